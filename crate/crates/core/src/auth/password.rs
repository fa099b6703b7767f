use std::num::NonZeroU32;

use ring::pbkdf2;
use serde::{Deserialize, Serialize};

use crate::crypto::random_bytes;

pub const SALT_LEN: usize = 16;
pub const DIGEST_LEN: usize = 32;
pub const MIN_PASSWORD_LEN: usize = 8;
pub const DEFAULT_ITERATIONS: u32 = 60_000;

static ALGORITHM: pbkdf2::Algorithm = pbkdf2::PBKDF2_HMAC_SHA256;

/// Salted one-way credential digest (PBKDF2-HMAC-SHA256).
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CredentialDigest {
    #[serde(with = "hex_bytes")]
    pub salt: [u8; SALT_LEN],
    #[serde(with = "hex_bytes")]
    pub digest: [u8; DIGEST_LEN],
    pub iterations: u32,
}

impl std::fmt::Debug for CredentialDigest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CredentialDigest")
            .field("iterations", &self.iterations)
            .finish_non_exhaustive()
    }
}

impl CredentialDigest {
    pub fn derive(password: &str, iterations: u32) -> Self {
        Self::derive_with_salt(password, random_bytes(), iterations)
    }

    pub fn derive_with_salt(password: &str, salt: [u8; SALT_LEN], iterations: u32) -> Self {
        let iterations = iterations.max(1);
        let mut digest = [0u8; DIGEST_LEN];
        pbkdf2::derive(
            ALGORITHM,
            NonZeroU32::new(iterations).expect("non-zero"),
            &salt,
            password.as_bytes(),
            &mut digest,
        );
        Self {
            salt,
            digest,
            iterations,
        }
    }

    /// Constant-time comparison.
    pub fn verify(&self, password: &str) -> bool {
        let Some(iter) = NonZeroU32::new(self.iterations) else {
            return false;
        };
        pbkdf2::verify(ALGORITHM, iter, &self.salt, password.as_bytes(), &self.digest).is_ok()
    }
}

mod hex_bytes {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer, const N: usize>(v: &[u8; N], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>, const N: usize>(d: D) -> Result<[u8; N], D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(s).map_err(D::Error::custom)?;
        v.try_into().map_err(|_| D::Error::custom("wrong length"))
    }
}
