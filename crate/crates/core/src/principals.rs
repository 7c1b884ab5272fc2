//! Installed principals, their install-time manifests, and the host→ad
//! delegation ledger.
//!
//! The registry also owns the monitor keystore: every principal gets a fresh
//! 32-byte MAC key at install time, addressed by [`KeyId`]. Key bytes never
//! leave the crate.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::MacKey;

/// First uid handed out; the System principal always receives it.
pub const FIRST_UID: u32 = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PrincipalError {
    #[error("a System principal is already installed")]
    DuplicateSystem,
    #[error("unknown principal {0}")]
    UnknownPrincipal(PrincipalId),
    #[error("{grantor} does not hold {permission}")]
    NotHeldByGrantor {
        grantor: PrincipalId,
        permission: PermissionId,
    },
    #[error("delegation requires a Host grantor and an Ad grantee, got {grantor:?} -> {grantee:?}")]
    KindMismatch {
        grantor: PrincipalKind,
        grantee: PrincipalKind,
    },
    #[error("unknown delegation token {0}")]
    UnknownToken(DelegationId),
    #[error("invalid permission name {0:?}")]
    InvalidPermission(String),
}

/// Short uppercase permission token such as `INTERNET` or `FINE_LOCATION`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PermissionId(String);

impl PermissionId {
    pub fn new(name: impl Into<String>) -> Result<Self, PrincipalError> {
        let name = name.into();
        let valid = (1..=64).contains(&name.len()) && name.bytes().all(|b| b.is_ascii_uppercase() || b == b'_');
        if valid {
            Ok(Self(name))
        } else {
            Err(PrincipalError::InvalidPermission(name))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for PermissionId {
    type Error = PrincipalError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<PermissionId> for String {
    fn from(p: PermissionId) -> Self {
        p.0
    }
}

impl FromStr for PermissionId {
    type Err = PrincipalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::new(s)
    }
}

impl fmt::Display for PermissionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Builds a permission set from literal names. Panics on an invalid name, so
/// only use it with constants.
pub fn perms<I, S>(names: I) -> BTreeSet<PermissionId>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    names
        .into_iter()
        .map(|n| PermissionId::new(n.as_ref()).expect("valid permission literal"))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermissionManifest {
    pub requested: BTreeSet<PermissionId>,
}

impl PermissionManifest {
    pub fn new(requested: impl IntoIterator<Item = PermissionId>) -> Self {
        Self {
            requested: requested.into_iter().collect(),
        }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn contains(&self, perm: &PermissionId) -> bool {
        self.requested.contains(perm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PrincipalKind {
    Host,
    Ad,
    System,
    Blocker,
}

impl PrincipalKind {
    fn prefix(self) -> &'static str {
        match self {
            PrincipalKind::Host => "host",
            PrincipalKind::Ad => "ad",
            PrincipalKind::System => "system",
            PrincipalKind::Blocker => "blocker",
        }
    }
}

/// On-disk manifest: `{"kind":"Host","permissions":["INTERNET"]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub kind: PrincipalKind,
    pub permissions: Vec<PermissionId>,
}

impl ManifestFile {
    pub fn into_parts(self) -> (PermissionManifest, PrincipalKind) {
        (PermissionManifest::new(self.permissions), self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PrincipalId(String);

impl PrincipalId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for PrincipalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Handle into the monitor keystore.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeyId(pub u32);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principal {
    pub id: PrincipalId,
    pub uid: u32,
    pub kind: PrincipalKind,
    pub manifest: PermissionManifest,
    pub mac_key_id: KeyId,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DelegationId(String);

impl DelegationId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }
}

impl fmt::Display for DelegationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelegationToken {
    pub token_id: DelegationId,
    pub grantor: PrincipalId,
    pub grantee: PrincipalId,
    pub permission: PermissionId,
    pub revoked: bool,
}

/// Fixture-friendly dump of a registry. Keys are never included.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryDump {
    pub principals: Vec<Principal>,
    pub delegations: Vec<DelegationToken>,
}

pub struct Registry {
    principals: BTreeMap<PrincipalId, Principal>,
    next_uid: u32,
    keys: HashMap<KeyId, MacKey>,
    delegations: Vec<DelegationToken>,
    delegation_index: HashMap<DelegationId, usize>,
    rng: ChaCha20Rng,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("principals", &self.principals.len())
            .field("delegations", &self.delegations.len())
            .finish_non_exhaustive()
    }
}

impl Registry {
    /// Creates a registry holding only the System principal (uid 1000).
    pub fn new(rng: ChaCha20Rng) -> Self {
        let mut reg = Self {
            principals: BTreeMap::new(),
            next_uid: FIRST_UID,
            keys: HashMap::new(),
            delegations: Vec::new(),
            delegation_index: HashMap::new(),
            rng,
        };
        reg.insert(PermissionManifest::empty(), PrincipalKind::System);
        reg
    }

    pub fn install(&mut self, manifest: PermissionManifest, kind: PrincipalKind) -> Result<Principal, PrincipalError> {
        if kind == PrincipalKind::System {
            return Err(PrincipalError::DuplicateSystem);
        }
        Ok(self.insert(manifest, kind))
    }

    fn insert(&mut self, manifest: PermissionManifest, kind: PrincipalKind) -> Principal {
        let uid = self.next_uid;
        self.next_uid += 1;
        let key_id = KeyId(uid);
        self.keys.insert(key_id, MacKey::generate(&mut self.rng));
        let principal = Principal {
            id: PrincipalId(format!("{}-{uid}", kind.prefix())),
            uid,
            kind,
            manifest,
            mac_key_id: key_id,
        };
        self.principals.insert(principal.id.clone(), principal.clone());
        principal
    }

    pub fn get(&self, id: &PrincipalId) -> Result<&Principal, PrincipalError> {
        self.principals
            .get(id)
            .ok_or_else(|| PrincipalError::UnknownPrincipal(id.clone()))
    }

    pub fn contains(&self, id: &PrincipalId) -> bool {
        self.principals.contains_key(id)
    }

    pub fn system(&self) -> &Principal {
        self.principals
            .values()
            .find(|p| p.kind == PrincipalKind::System)
            .expect("registry always holds a System principal")
    }

    pub fn principals(&self) -> impl Iterator<Item = &Principal> {
        self.principals.values()
    }

    pub fn len(&self) -> usize {
        self.principals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.principals.is_empty()
    }

    pub(crate) fn key_for(&self, id: &PrincipalId) -> Option<&MacKey> {
        let p = self.principals.get(id)?;
        self.keys.get(&p.mac_key_id)
    }

    /// True iff `perm` is in the manifest or held through an unrevoked
    /// delegation. System holds every permission.
    pub fn grant_check(&self, id: &PrincipalId, perm: &PermissionId) -> Result<bool, PrincipalError> {
        let p = self.get(id)?;
        if p.kind == PrincipalKind::System || p.manifest.contains(perm) {
            return Ok(true);
        }
        Ok(self
            .delegations
            .iter()
            .any(|t| !t.revoked && &t.grantee == id && &t.permission == perm))
    }

    /// Every permission the principal would pass `grant_check` for, restricted
    /// to [`Registry::known_permissions`] when the principal is System.
    pub fn granted_set(&self, id: &PrincipalId) -> Result<BTreeSet<PermissionId>, PrincipalError> {
        let p = self.get(id)?;
        if p.kind == PrincipalKind::System {
            return Ok(self.known_permissions());
        }
        let mut out = p.manifest.requested.clone();
        out.extend(
            self.delegations
                .iter()
                .filter(|t| !t.revoked && &t.grantee == id)
                .map(|t| t.permission.clone()),
        );
        Ok(out)
    }

    /// Union of every permission named in a manifest or delegation.
    pub fn known_permissions(&self) -> BTreeSet<PermissionId> {
        let mut out: BTreeSet<PermissionId> = self
            .principals
            .values()
            .flat_map(|p| p.manifest.requested.iter().cloned())
            .collect();
        out.extend(self.delegations.iter().map(|t| t.permission.clone()));
        out
    }

    pub fn delegate(
        &mut self,
        host: &PrincipalId,
        ad: &PrincipalId,
        perm: PermissionId,
    ) -> Result<DelegationToken, PrincipalError> {
        let grantor = self.get(host)?;
        let grantee = self.get(ad)?;
        if grantor.kind != PrincipalKind::Host || grantee.kind != PrincipalKind::Ad {
            return Err(PrincipalError::KindMismatch {
                grantor: grantor.kind,
                grantee: grantee.kind,
            });
        }
        if !grantor.manifest.contains(&perm) {
            return Err(PrincipalError::NotHeldByGrantor {
                grantor: host.clone(),
                permission: perm,
            });
        }
        let token = DelegationToken {
            token_id: DelegationId(format!("dlg-{}", self.delegations.len() + 1)),
            grantor: host.clone(),
            grantee: ad.clone(),
            permission: perm,
            revoked: false,
        };
        self.delegation_index
            .insert(token.token_id.clone(), self.delegations.len());
        self.delegations.push(token.clone());
        Ok(token)
    }

    /// Idempotent.
    pub fn revoke(&mut self, token: &DelegationId) -> Result<(), PrincipalError> {
        let idx = *self
            .delegation_index
            .get(token)
            .ok_or_else(|| PrincipalError::UnknownToken(token.clone()))?;
        self.delegations[idx].revoked = true;
        Ok(())
    }

    pub fn delegations(&self) -> &[DelegationToken] {
        &self.delegations
    }

    pub fn dump(&self) -> RegistryDump {
        RegistryDump {
            principals: self.principals.values().cloned().collect(),
            delegations: self.delegations.clone(),
        }
    }
}
