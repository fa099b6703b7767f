use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::password::CredentialDigest;
use super::AuthError;
use crate::clock::UtcMillis;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredAccount {
    pub username: String,
    pub credential: CredentialDigest,
    #[serde(default, with = "opt_b64", skip_serializing_if = "Option::is_none")]
    pub picture: Option<Vec<u8>>,
    pub created_at: UtcMillis,
}

/// Persistence seam for accounts. Implementations enforce username uniqueness.
pub trait AccountStore: Send + Sync {
    fn get(&self, username: &str) -> Option<StoredAccount>;
    fn insert(&mut self, account: StoredAccount) -> Result<(), AuthError>;
    fn set_picture(&mut self, username: &str, picture: Vec<u8>) -> Result<(), AuthError>;
    fn usernames(&self) -> Vec<String>;
}

#[derive(Debug, Default)]
pub struct MemoryStore {
    accounts: BTreeMap<String, StoredAccount>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl AccountStore for MemoryStore {
    fn get(&self, username: &str) -> Option<StoredAccount> {
        self.accounts.get(username).cloned()
    }

    fn insert(&mut self, account: StoredAccount) -> Result<(), AuthError> {
        if self.accounts.contains_key(&account.username) {
            return Err(AuthError::UsernameTaken);
        }
        self.accounts.insert(account.username.clone(), account);
        Ok(())
    }

    fn set_picture(&mut self, username: &str, picture: Vec<u8>) -> Result<(), AuthError> {
        let acct = self.accounts.get_mut(username).ok_or(AuthError::UnknownUser)?;
        acct.picture = Some(picture);
        Ok(())
    }

    fn usernames(&self) -> Vec<String> {
        self.accounts.keys().cloned().collect()
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct StoreFile {
    accounts: Vec<StoredAccount>,
}

/// Single JSON file, rewritten through a temp file and rename on every change.
#[derive(Debug)]
pub struct FileStore {
    path: PathBuf,
    mem: MemoryStore,
}

impl FileStore {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, AuthError> {
        let path = path.into();
        let mut mem = MemoryStore::new();
        match fs::read(&path) {
            Ok(bytes) => {
                let file: StoreFile =
                    serde_json::from_slice(&bytes).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
                for acct in file.accounts {
                    mem.insert(acct)?;
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        Ok(Self { path, mem })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn persist(&self) -> io::Result<()> {
        let file = StoreFile {
            accounts: self.mem.accounts.values().cloned().collect(),
        };
        let bytes = serde_json::to_vec(&file).map_err(io::Error::other)?;
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = self.path.with_extension("tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &self.path)
    }
}

impl AccountStore for FileStore {
    fn get(&self, username: &str) -> Option<StoredAccount> {
        self.mem.get(username)
    }

    fn insert(&mut self, account: StoredAccount) -> Result<(), AuthError> {
        let name = account.username.clone();
        self.mem.insert(account)?;
        if let Err(e) = self.persist() {
            self.mem.accounts.remove(&name);
            return Err(e.into());
        }
        Ok(())
    }

    fn set_picture(&mut self, username: &str, picture: Vec<u8>) -> Result<(), AuthError> {
        let prev = self.mem.get(username).ok_or(AuthError::UnknownUser)?.picture;
        self.mem.set_picture(username, picture)?;
        if let Err(e) = self.persist() {
            if let Some(acct) = self.mem.accounts.get_mut(username) {
                acct.picture = prev;
            }
            return Err(e.into());
        }
        Ok(())
    }

    fn usernames(&self) -> Vec<String> {
        self.mem.usernames()
    }
}

mod opt_b64 {
    use super::*;
    use serde::{de::Error, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(b) => s.serialize_some(&base64::engine::general_purpose::STANDARD.encode(b)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|s| base64::engine::general_purpose::STANDARD.decode(s).map_err(D::Error::custom))
            .transpose()
    }
}
