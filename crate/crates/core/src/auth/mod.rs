//! Accounts, credentials and presence.

mod directory;
mod password;
mod store;

pub use directory::{
    Directory, DirectoryConfig, PresenceState, RosterEntry, SessionToken, DEFAULT_HEARTBEAT_SECS, TOKEN_LEN,
};
pub use password::{CredentialDigest, DEFAULT_ITERATIONS, MIN_PASSWORD_LEN, SALT_LEN};
pub use store::{AccountStore, FileStore, MemoryStore, StoredAccount};

use thiserror::Error;

pub const MAX_USERNAME_CHARS: usize = 64;
pub const MAX_PICTURE_BYTES: usize = 1024 * 1024;

#[derive(Debug, Error)]
pub enum AuthError {
    #[error("username already taken")]
    UsernameTaken,
    #[error("invalid username")]
    InvalidUsername,
    #[error("password must be at least {MIN_PASSWORD_LEN} characters")]
    WeakPassword,
    #[error("picture exceeds {MAX_PICTURE_BYTES} bytes")]
    PictureTooLarge,
    #[error("unsupported picture format")]
    UnsupportedFormat,
    #[error("bad credentials")]
    BadCredentials,
    #[error("unauthorized")]
    Unauthorized,
    #[error("unknown user")]
    UnknownUser,
    #[error("account store: {0}")]
    Store(#[from] std::io::Error),
}

pub fn validate_username(name: &str) -> Result<(), AuthError> {
    let chars = name.chars().count();
    if chars == 0 || chars > MAX_USERNAME_CHARS || name.chars().any(|c| c.is_control() || c.is_whitespace()) {
        return Err(AuthError::InvalidUsername);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PictureFormat {
    Png,
    Jpeg,
}

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";
const JPEG_MAGIC: &[u8] = &[0xff, 0xd8, 0xff];

/// Checks size and raster magic bytes.
pub fn check_picture(blob: &[u8]) -> Result<PictureFormat, AuthError> {
    if blob.len() > MAX_PICTURE_BYTES {
        return Err(AuthError::PictureTooLarge);
    }
    if blob.starts_with(PNG_MAGIC) {
        Ok(PictureFormat::Png)
    } else if blob.starts_with(JPEG_MAGIC) {
        Ok(PictureFormat::Jpeg)
    } else {
        Err(AuthError::UnsupportedFormat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn magic_byte_table() {
        let mut png = PNG_MAGIC.to_vec();
        png.resize(4096, 7);
        let cases: &[(&[u8], Option<PictureFormat>)] = &[
            (&png, Some(PictureFormat::Png)),
            (&[0xff, 0xd8, 0xff, 0xe0, 0, 0x10], Some(PictureFormat::Jpeg)),
            (b"MZ\x90\x00\x03", None),
            (b"\x7fELF\x02\x01", None),
            (b"GIF89a", None),
            (b"\x89PNG\r\n", None),
            (b"", None),
        ];
        for (blob, want) in cases {
            match (check_picture(blob), want) {
                (Ok(got), Some(w)) => assert_eq!(got, *w),
                (Err(AuthError::UnsupportedFormat), None) => {}
                (other, _) => panic!("{blob:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn picture_size_boundary() {
        let mut ok = PNG_MAGIC.to_vec();
        ok.resize(MAX_PICTURE_BYTES, 0);
        assert!(check_picture(&ok).is_ok());
        ok.push(0);
        assert!(matches!(check_picture(&ok), Err(AuthError::PictureTooLarge)));
    }

    #[test]
    fn usernames() {
        assert!(validate_username("alice").is_ok());
        assert!(validate_username(&"é".repeat(64)).is_ok());
        assert!(validate_username(&"a".repeat(65)).is_err());
        assert!(validate_username("").is_err());
        assert!(validate_username("a b").is_err());
        assert!(validate_username("a\nb").is_err());
    }
}
