use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::password::{CredentialDigest, DEFAULT_ITERATIONS, MIN_PASSWORD_LEN};
use super::store::{AccountStore, StoredAccount};
use super::{check_picture, validate_username, AuthError};
use crate::clock::{Clock, UtcMillis};
use crate::crypto::random_bytes;

pub const TOKEN_LEN: usize = 32;
pub const DEFAULT_HEARTBEAT_SECS: u64 = 5;

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct SessionToken(pub [u8; TOKEN_LEN]);

impl SessionToken {
    pub fn generate() -> Self {
        Self(random_bytes())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        hex::decode(s).ok()?.try_into().ok().map(Self)
    }
}

impl fmt::Debug for SessionToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SessionToken(..)")
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DirectoryConfig {
    pub heartbeat_ms: u64,
    pub iterations: u32,
}

impl DirectoryConfig {
    pub fn presence_timeout_ms(&self) -> u64 {
        3 * self.heartbeat_ms
    }
}

impl Default for DirectoryConfig {
    fn default() -> Self {
        Self {
            heartbeat_ms: DEFAULT_HEARTBEAT_SECS * 1000,
            iterations: DEFAULT_ITERATIONS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PresenceState {
    Online,
    Offline,
}

/// What a roster query reveals about one user. Tokens never leave the directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RosterEntry {
    pub username: String,
    pub state: PresenceState,
    pub last_heartbeat: UtcMillis,
}

#[derive(Debug)]
struct Presence {
    last_heartbeat: UtcMillis,
    token: Option<SessionToken>,
}

#[derive(Debug, Default)]
struct Sessions {
    presence: HashMap<String, Presence>,
    tokens: HashMap<SessionToken, String>,
}

/// Accounts plus live sessions. Cheap to share behind an `Arc`.
pub struct Directory {
    store: Mutex<Box<dyn AccountStore>>,
    sessions: Mutex<Sessions>,
    clock: Arc<dyn Clock>,
    config: DirectoryConfig,
    // compared against for unknown users so both failure paths cost the same
    dummy: CredentialDigest,
}

impl Directory {
    pub fn new(store: Box<dyn AccountStore>, clock: Arc<dyn Clock>, config: DirectoryConfig) -> Self {
        Self {
            store: Mutex::new(store),
            sessions: Mutex::new(Sessions::default()),
            clock,
            dummy: CredentialDigest::derive(&hex::encode(random_bytes::<16>()), config.iterations),
            config,
        }
    }

    pub fn config(&self) -> DirectoryConfig {
        self.config
    }

    pub fn now(&self) -> UtcMillis {
        self.clock.now()
    }

    pub fn signup(&self, username: &str, password: &str, picture: Option<Vec<u8>>) -> Result<StoredAccount, AuthError> {
        validate_username(username)?;
        if password.chars().count() < MIN_PASSWORD_LEN {
            return Err(AuthError::WeakPassword);
        }
        if let Some(p) = &picture {
            check_picture(p)?;
        }
        if self.store.lock().expect("store lock").get(username).is_some() {
            return Err(AuthError::UsernameTaken);
        }
        let account = StoredAccount {
            username: username.to_string(),
            credential: CredentialDigest::derive(password, self.config.iterations),
            picture,
            created_at: self.clock.now(),
        };
        self.store.lock().expect("store lock").insert(account.clone())?;
        tracing::info!(user = username, "account created");
        Ok(account)
    }

    /// Returns the fresh token and, when this login replaced an older
    /// session, that session's token so the caller can close it.
    pub fn login(&self, username: &str, password: &str) -> Result<(SessionToken, Option<SessionToken>), AuthError> {
        let account = self.store.lock().expect("store lock").get(username);
        let ok = match &account {
            Some(a) => a.credential.verify(password),
            None => {
                self.dummy.verify(password);
                false
            }
        };
        if !ok {
            return Err(AuthError::BadCredentials);
        }
        let token = SessionToken::generate();
        let now = self.clock.now();
        let mut s = self.sessions.lock().expect("sessions lock");
        let old = s.presence.get(username).and_then(|p| p.token);
        if let Some(old) = old {
            s.tokens.remove(&old);
        }
        s.tokens.insert(token, username.to_string());
        s.presence.insert(
            username.to_string(),
            Presence {
                last_heartbeat: now,
                token: Some(token),
            },
        );
        Ok((token, old))
    }

    pub fn authenticate(&self, token: &SessionToken) -> Result<String, AuthError> {
        self.sessions
            .lock()
            .expect("sessions lock")
            .tokens
            .get(token)
            .cloned()
            .ok_or(AuthError::Unauthorized)
    }

    pub fn heartbeat(&self, token: &SessionToken) -> Result<(), AuthError> {
        let now = self.clock.now();
        let mut s = self.sessions.lock().expect("sessions lock");
        let user = s.tokens.get(token).cloned().ok_or(AuthError::Unauthorized)?;
        if let Some(p) = s.presence.get_mut(&user) {
            p.last_heartbeat = now;
        }
        Ok(())
    }

    pub fn logout(&self, token: &SessionToken) -> Result<String, AuthError> {
        let mut s = self.sessions.lock().expect("sessions lock");
        let user = s.tokens.remove(token).ok_or(AuthError::Unauthorized)?;
        if let Some(p) = s.presence.get_mut(&user) {
            p.token = None;
        }
        Ok(user)
    }

    pub fn set_picture(&self, token: &SessionToken, blob: Vec<u8>) -> Result<(), AuthError> {
        let user = self.authenticate(token)?;
        check_picture(&blob)?;
        self.store.lock().expect("store lock").set_picture(&user, blob)
    }

    pub fn picture(&self, username: &str) -> Result<Option<Vec<u8>>, AuthError> {
        self.store
            .lock()
            .expect("store lock")
            .get(username)
            .map(|a| a.picture)
            .ok_or(AuthError::UnknownUser)
    }

    pub fn account_exists(&self, username: &str) -> bool {
        self.store.lock().expect("store lock").get(username).is_some()
    }

    fn state_of(&self, p: &Presence, now: UtcMillis) -> PresenceState {
        let fresh = now.0.saturating_sub(p.last_heartbeat.0) <= self.config.presence_timeout_ms();
        if p.token.is_some() && fresh {
            PresenceState::Online
        } else {
            PresenceState::Offline
        }
    }

    pub fn is_online(&self, username: &str) -> bool {
        let now = self.clock.now();
        let s = self.sessions.lock().expect("sessions lock");
        s.presence
            .get(username)
            .is_some_and(|p| self.state_of(p, now) == PresenceState::Online)
    }

    /// Every user seen since start, with state computed now. The requester
    /// is always listed.
    pub fn roster(&self, token: &SessionToken) -> Result<Vec<RosterEntry>, AuthError> {
        let now = self.clock.now();
        let s = self.sessions.lock().expect("sessions lock");
        let me = s.tokens.get(token).ok_or(AuthError::Unauthorized)?;
        let mut out: Vec<RosterEntry> = s
            .presence
            .iter()
            .map(|(name, p)| RosterEntry {
                username: name.clone(),
                state: if name == me { PresenceState::Online } else { self.state_of(p, now) },
                last_heartbeat: p.last_heartbeat,
            })
            .collect();
        out.sort_by(|a, b| a.username.cmp(&b.username));
        Ok(out)
    }

    /// Drops sessions whose heartbeat is older than the presence timeout and
    /// returns them so the caller can close their connections.
    pub fn expire(&self) -> Vec<(String, SessionToken)> {
        let now = self.clock.now();
        let mut s = self.sessions.lock().expect("sessions lock");
        let stale: Vec<(String, SessionToken)> = s
            .presence
            .iter()
            .filter(|(_, p)| self.state_of(p, now) == PresenceState::Offline)
            .filter_map(|(name, p)| p.token.map(|t| (name.clone(), t)))
            .collect();
        for (name, token) in &stale {
            s.tokens.remove(token);
            if let Some(p) = s.presence.get_mut(name) {
                p.token = None;
            }
        }
        stale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auth::{FileStore, MemoryStore};
    use crate::clock::ManualClock;

    fn dir_with(clock: &ManualClock) -> Directory {
        Directory::new(
            Box::new(MemoryStore::new()),
            Arc::new(clock.clone()),
            DirectoryConfig {
                heartbeat_ms: 5000,
                iterations: 10,
            },
        )
    }

    #[test]
    fn signup_then_login() {
        let clock = ManualClock::starting_at(1_000_000);
        let d = dir_with(&clock);
        d.signup("alice", "hunter2pass", None).unwrap();
        assert!(matches!(d.signup("alice", "otherpass1", None), Err(AuthError::UsernameTaken)));
        assert!(matches!(d.signup("bob", "short", None), Err(AuthError::WeakPassword)));
        let (tok, old) = d.login("alice", "hunter2pass").unwrap();
        assert!(old.is_none());
        assert_eq!(d.authenticate(&tok).unwrap(), "alice");
        assert!(d.is_online("alice"));
    }

    #[test]
    fn bad_credentials_are_indistinguishable() {
        let clock = ManualClock::starting_at(0);
        let d = dir_with(&clock);
        d.signup("alice", "hunter2pass", None).unwrap();
        let wrong = d.login("alice", "nope-nope").unwrap_err().to_string();
        let unknown = d.login("mallory", "nope-nope").unwrap_err().to_string();
        assert_eq!(wrong, unknown);
    }

    #[test]
    fn second_login_invalidates_first() {
        let clock = ManualClock::starting_at(0);
        let d = dir_with(&clock);
        d.signup("alice", "hunter2pass", None).unwrap();
        let (t1, _) = d.login("alice", "hunter2pass").unwrap();
        let (t2, old) = d.login("alice", "hunter2pass").unwrap();
        assert_eq!(old, Some(t1));
        assert!(matches!(d.authenticate(&t1), Err(AuthError::Unauthorized)));
        assert!(matches!(d.roster(&t1), Err(AuthError::Unauthorized)));
        assert_eq!(d.authenticate(&t2).unwrap(), "alice");
    }

    #[test]
    fn presence_timeout_boundary() {
        let clock = ManualClock::starting_at(10_000);
        let d = dir_with(&clock);
        for u in ["alice", "bob"] {
            d.signup(u, "hunter2pass", None).unwrap();
        }
        let (ta, _) = d.login("alice", "hunter2pass").unwrap();
        d.login("bob", "hunter2pass").unwrap();
        let states = |d: &Directory| {
            d.roster(&ta)
                .unwrap()
                .into_iter()
                .map(|e| (e.username, e.state))
                .collect::<Vec<_>>()
        };
        assert_eq!(
            states(&d),
            vec![("alice".into(), PresenceState::Online), ("bob".into(), PresenceState::Online)]
        );
        clock.advance_millis(15_000);
        d.heartbeat(&ta).unwrap();
        assert!(d.is_online("bob"));
        clock.advance_millis(1);
        assert!(!d.is_online("bob"));
        assert_eq!(states(&d)[1], ("bob".into(), PresenceState::Offline));
        let expired = d.expire();
        assert_eq!(expired.len(), 1);
        assert_eq!(expired[0].0, "bob");
        assert!(d.is_online("alice"));
    }

    #[test]
    fn fresh_server_single_login_roster() {
        let clock = ManualClock::starting_at(0);
        let d = dir_with(&clock);
        d.signup("alice", "hunter2pass", None).unwrap();
        d.signup("bob", "hunter2pass", None).unwrap();
        let (t, _) = d.login("alice", "hunter2pass").unwrap();
        assert_eq!(d.roster(&t).unwrap().len(), 1);
    }

    #[test]
    fn picture_round_trip_and_errors() {
        let clock = ManualClock::starting_at(0);
        let d = dir_with(&clock);
        d.signup("alice", "hunter2pass", None).unwrap();
        let (t, _) = d.login("alice", "hunter2pass").unwrap();
        let mut png = b"\x89PNG\r\n\x1a\n".to_vec();
        png.extend((0..4088).map(|i| (i % 251) as u8));
        d.set_picture(&t, png.clone()).unwrap();
        assert_eq!(d.picture("alice").unwrap().unwrap(), png);
        assert!(matches!(d.set_picture(&t, b"MZ\x90\x00".to_vec()), Err(AuthError::UnsupportedFormat)));
        assert!(matches!(
            d.set_picture(&SessionToken([0; 32]), png),
            Err(AuthError::Unauthorized)
        ));
    }

    #[test]
    fn restart_keeps_accounts_and_no_password_in_store() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("accounts.json");
        let clock = ManualClock::starting_at(0);
        // uppercase G..Z never occurs in hex, JSON keys or usernames
        let passwords: Vec<String> = (0..5)
            .map(|_| random_bytes::<12>().iter().map(|b| (b'G' + b % 20) as char).collect())
            .collect();
        {
            let d = Directory::new(
                Box::new(FileStore::open(&path).unwrap()),
                Arc::new(clock.clone()),
                DirectoryConfig {
                    heartbeat_ms: 5000,
                    iterations: 10,
                },
            );
            for (i, p) in passwords.iter().enumerate() {
                d.signup(&format!("user{i}"), p, None).unwrap();
            }
        }
        let raw = std::fs::read(&path).unwrap();
        for p in &passwords {
            // every substring of length >= 4
            for w in 4..=p.len() {
                for sub in p.as_bytes().windows(w) {
                    assert!(!raw.windows(sub.len()).any(|x| x == sub), "found {:?}", String::from_utf8_lossy(sub));
                }
            }
        }
        let d = Directory::new(
            Box::new(FileStore::open(&path).unwrap()),
            Arc::new(clock),
            DirectoryConfig::default(),
        );
        d.login("user3", &passwords[3]).unwrap();
    }
}
