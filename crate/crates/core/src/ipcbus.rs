//! Monitor-mediated IPC with MAC-signed, hash-linked call-chain provenance.
//!
//! Every hop appends a [`Statement`] signed with the speaker's monitor-held
//! key. A statement MACs the digest of its message plus the previous
//! statement's tag, so a chain can be neither reordered nor spliced. The
//! permissions a request carries are the intersection over every distinct
//! speaker on its chain; the only way to act on one's own full authority is
//! [`Bus::assert_authority`], which starts a fresh chain and leaves an audit
//! record behind.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, put_lp, sha256, Digest32, ZERO_DIGEST};
use crate::principals::{PermissionId, PrincipalId, PrincipalKind, Registry};

const STATEMENT_VERSION: u8 = 0x01;
const MESSAGE_VERSION: u8 = 0x01;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IpcError {
    #[error("unknown principal {0}")]
    UnknownPrincipal(PrincipalId),
    #[error("parent chain rejected: {0}")]
    InvalidParentChain(Box<IpcError>),
    #[error("call chain is empty")]
    EmptyChain,
    #[error("statement {index}: MAC does not verify")]
    BadMac { index: usize },
    #[error("statement {index}: link to previous statement broken")]
    BrokenLink { index: usize },
    #[error("statement {index}: counter reused")]
    CounterReplay { index: usize },
    #[error("{deputy} has no deputy policy for {op_name:?}")]
    DeputyPolicyDenied { deputy: PrincipalId, op_name: String },
    #[error("{principal} is not the recipient of the message")]
    NotRecipient { principal: PrincipalId },
}

/// One MAC-signed hop of provenance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Statement {
    pub speaker: PrincipalId,
    pub counter: u64,
    #[serde(with = "crypto::b64")]
    pub payload_digest: Digest32,
    #[serde(with = "crypto::b64")]
    pub prev_mac: Digest32,
    #[serde(with = "crypto::b64")]
    pub mac: Digest32,
}

impl Statement {
    /// `0x01 || lp(speaker) || counter_u64_be || payload_digest || prev_mac`
    pub fn canonical_bytes(&self) -> Vec<u8> {
        statement_bytes(&self.speaker, self.counter, &self.payload_digest, &self.prev_mac)
    }
}

fn statement_bytes(speaker: &PrincipalId, counter: u64, digest: &Digest32, prev: &Digest32) -> Vec<u8> {
    let mut buf = Vec::with_capacity(1 + 4 + speaker.as_str().len() + 8 + 64);
    buf.push(STATEMENT_VERSION);
    put_lp(&mut buf, speaker.as_str().as_bytes());
    buf.extend_from_slice(&counter.to_be_bytes());
    buf.extend_from_slice(digest);
    buf.extend_from_slice(prev);
    buf
}

/// `0x01 || lp(from) || lp(to) || lp(op_name) || lp(payload)`
pub fn message_canonical_bytes(from: &str, to: &str, op_name: &str, payload: &[u8]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(17 + from.len() + to.len() + op_name.len() + payload.len());
    buf.push(MESSAGE_VERSION);
    put_lp(&mut buf, from.as_bytes());
    put_lp(&mut buf, to.as_bytes());
    put_lp(&mut buf, op_name.as_bytes());
    put_lp(&mut buf, payload);
    buf
}

pub fn message_digest(from: &str, to: &str, op_name: &str, payload: &[u8]) -> Digest32 {
    sha256(&message_canonical_bytes(from, to, op_name, payload))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CallChain {
    pub statements: Vec<Statement>,
}

impl CallChain {
    pub fn len(&self) -> usize {
        self.statements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.statements.is_empty()
    }

    pub fn head(&self) -> Option<&Statement> {
        self.statements.first()
    }

    pub fn last(&self) -> Option<&Statement> {
        self.statements.last()
    }

    pub fn speakers(&self) -> impl Iterator<Item = &PrincipalId> {
        self.statements.iter().map(|s| &s.speaker)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub from: PrincipalId,
    /// A principal id, or a remote endpoint name for outbound messages.
    pub to: String,
    pub op_name: String,
    #[serde(with = "crypto::b64::vec")]
    pub payload: Vec<u8>,
    pub chain: CallChain,
}

impl Message {
    pub fn digest(&self) -> Digest32 {
        message_digest(self.from.as_str(), &self.to, &self.op_name, &self.payload)
    }
}

/// A chain that passed [`Bus::verify_chain`]. Only the bus constructs these.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifiedChain {
    speakers: Vec<PrincipalId>,
    last_mac: Digest32,
}

impl VerifiedChain {
    /// Speakers in chain order, repeats included.
    pub fn speakers(&self) -> &[PrincipalId] {
        &self.speakers
    }

    pub fn head_speaker(&self) -> &PrincipalId {
        &self.speakers[0]
    }

    pub fn last_speaker(&self) -> &PrincipalId {
        self.speakers.last().expect("verified chains are non-empty")
    }

    pub fn distinct_speakers(&self) -> BTreeSet<&PrincipalId> {
        self.speakers.iter().collect()
    }

    pub fn last_mac(&self) -> &Digest32 {
        &self.last_mac
    }
}

/// Audit trail entry left by a deputy assertion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub deputy: PrincipalId,
    pub op_name: String,
    /// SHA-256 of the parent chain's last MAC.
    #[serde(with = "crypto::b64")]
    pub parent_digest: Digest32,
    pub parent_speakers: Vec<PrincipalId>,
    #[serde(with = "crypto::b64")]
    pub new_head_mac: Digest32,
}

#[derive(Debug, Default)]
pub struct Bus {
    counters: Mutex<HashMap<PrincipalId, u64>>,
    /// (speaker, counter) → MAC of the statement first seen under that pair.
    counter_ledger: Mutex<HashMap<(PrincipalId, u64), Digest32>>,
    inboxes: Mutex<HashMap<PrincipalId, VecDeque<Message>>>,
    deputy_policy: RwLock<HashMap<PrincipalId, BTreeSet<String>>>,
    audit: Mutex<Vec<AuditRecord>>,
}

impl Bus {
    pub fn new() -> Self {
        Self::default()
    }

    /// Signs a new hop from `from` and delivers the message to `to`'s inbox.
    pub fn send(
        &self,
        reg: &Registry,
        from: &PrincipalId,
        to: &PrincipalId,
        op_name: &str,
        payload: &[u8],
        parent: Option<&CallChain>,
    ) -> Result<Message, IpcError> {
        if !reg.contains(to) {
            return Err(IpcError::UnknownPrincipal(to.clone()));
        }
        let msg = self.sign_message(reg, from, to.as_str(), op_name, payload, parent)?;
        self.inboxes
            .lock()
            .entry(to.clone())
            .or_default()
            .push_back(msg.clone());
        Ok(msg)
    }

    /// Like [`Bus::send`] but addressed to a remote endpoint; nothing is queued.
    pub fn send_external(
        &self,
        reg: &Registry,
        from: &PrincipalId,
        remote: &str,
        op_name: &str,
        payload: &[u8],
        parent: Option<&CallChain>,
    ) -> Result<Message, IpcError> {
        self.sign_message(reg, from, remote, op_name, payload, parent)
    }

    fn sign_message(
        &self,
        reg: &Registry,
        from: &PrincipalId,
        to: &str,
        op_name: &str,
        payload: &[u8],
        parent: Option<&CallChain>,
    ) -> Result<Message, IpcError> {
        if !reg.contains(from) {
            return Err(IpcError::UnknownPrincipal(from.clone()));
        }
        let mut chain = match parent {
            Some(parent) => {
                self.verify_chain(reg, parent)
                    .map_err(|e| IpcError::InvalidParentChain(Box::new(e)))?;
                parent.clone()
            }
            None => CallChain { statements: Vec::new() },
        };
        let prev = chain.last().map_or(ZERO_DIGEST, |s| s.mac);
        let counter = {
            let mut counters = self.counters.lock();
            let c = counters.entry(from.clone()).or_insert(0);
            *c += 1;
            *c
        };
        let digest = message_digest(from.as_str(), to, op_name, payload);
        let stmt = self.sign_statement(reg, from, counter, digest, prev)?;
        chain.statements.push(stmt);
        Ok(Message {
            from: from.clone(),
            to: to.to_owned(),
            op_name: op_name.to_owned(),
            payload: payload.to_vec(),
            chain,
        })
    }

    /// Signs and records a statement with an explicit counter. The public path
    /// always draws the counter from the per-speaker sequence.
    pub(crate) fn sign_statement(
        &self,
        reg: &Registry,
        speaker: &PrincipalId,
        counter: u64,
        payload_digest: Digest32,
        prev_mac: Digest32,
    ) -> Result<Statement, IpcError> {
        let key = reg
            .key_for(speaker)
            .ok_or_else(|| IpcError::UnknownPrincipal(speaker.clone()))?;
        let mac = key.sign(&statement_bytes(speaker, counter, &payload_digest, &prev_mac));
        self.counter_ledger
            .lock()
            .entry((speaker.clone(), counter))
            .or_insert(mac);
        Ok(Statement {
            speaker: speaker.clone(),
            counter,
            payload_digest,
            prev_mac,
            mac,
        })
    }

    pub fn verify_chain(&self, reg: &Registry, chain: &CallChain) -> Result<VerifiedChain, IpcError> {
        if chain.is_empty() {
            return Err(IpcError::EmptyChain);
        }
        let mut last_counter: HashMap<&PrincipalId, u64> = HashMap::new();
        for (index, stmt) in chain.statements.iter().enumerate() {
            let key = reg.key_for(&stmt.speaker).ok_or(IpcError::BadMac { index })?;
            if !key.verify(&stmt.canonical_bytes(), &stmt.mac) {
                return Err(IpcError::BadMac { index });
            }
            let expected_prev = if index == 0 {
                ZERO_DIGEST
            } else {
                chain.statements[index - 1].mac
            };
            if stmt.prev_mac != expected_prev {
                return Err(IpcError::BrokenLink { index });
            }
            if let Some(prev) = last_counter.insert(&stmt.speaker, stmt.counter) {
                if stmt.counter <= prev {
                    return Err(IpcError::CounterReplay { index });
                }
            }
        }

        // Counters before ledger, so no signer can draw a counter this chain
        // is about to claim.
        let mut counters = self.counters.lock();
        let mut ledger = self.counter_ledger.lock();
        for (index, stmt) in chain.statements.iter().enumerate() {
            if let Some(seen) = ledger.get(&(stmt.speaker.clone(), stmt.counter)) {
                if *seen != stmt.mac {
                    return Err(IpcError::CounterReplay { index });
                }
            }
        }
        for stmt in &chain.statements {
            ledger
                .entry((stmt.speaker.clone(), stmt.counter))
                .or_insert(stmt.mac);
            let next = counters.entry(stmt.speaker.clone()).or_insert(0);
            *next = (*next).max(stmt.counter);
        }
        drop(ledger);
        drop(counters);

        Ok(VerifiedChain {
            speakers: chain.statements.iter().map(|s| s.speaker.clone()).collect(),
            last_mac: chain.statements.last().expect("non-empty").mac,
        })
    }

    pub fn recv(&self, principal: &PrincipalId) -> Option<Message> {
        self.inboxes.lock().get_mut(principal)?.pop_front()
    }

    pub fn pending(&self, principal: &PrincipalId) -> usize {
        self.inboxes.lock().get(principal).map_or(0, VecDeque::len)
    }

    /// Replaces the set of operations `deputy` is willing to perform on its
    /// own authority.
    pub fn set_deputy_policy<I, S>(&self, deputy: &PrincipalId, ops: I)
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.deputy_policy
            .write()
            .insert(deputy.clone(), ops.into_iter().map(Into::into).collect());
    }

    /// Acts on `deputy`'s own authority in response to `received`: the result
    /// is a fresh length-1 chain spoken by `deputy`, linked to the parent only
    /// through an audit record.
    pub fn assert_authority(
        &self,
        reg: &Registry,
        deputy: &PrincipalId,
        received: &Message,
        to: &PrincipalId,
        op_name: &str,
        payload: &[u8],
    ) -> Result<(Message, AuditRecord), IpcError> {
        if received.to != deputy.as_str() {
            return Err(IpcError::NotRecipient {
                principal: deputy.clone(),
            });
        }
        let parent = self
            .verify_chain(reg, &received.chain)
            .map_err(|e| IpcError::InvalidParentChain(Box::new(e)))?;
        let allowed = self
            .deputy_policy
            .read()
            .get(deputy)
            .is_some_and(|ops| ops.contains(op_name));
        if !allowed {
            return Err(IpcError::DeputyPolicyDenied {
                deputy: deputy.clone(),
                op_name: op_name.to_owned(),
            });
        }
        let msg = self.send(reg, deputy, to, op_name, payload, None)?;
        let record = AuditRecord {
            deputy: deputy.clone(),
            op_name: op_name.to_owned(),
            parent_digest: sha256(parent.last_mac()),
            parent_speakers: parent.speakers().to_vec(),
            new_head_mac: msg.chain.statements[0].mac,
        };
        self.audit.lock().push(record.clone());
        Ok((msg, record))
    }

    pub fn audit_log(&self) -> Vec<AuditRecord> {
        self.audit.lock().clone()
    }
}

/// Intersection over every distinct speaker of the permissions that speaker
/// passes `grant_check` for. System speakers do not restrict the result.
pub fn effective_permissions(reg: &Registry, chain: &VerifiedChain) -> BTreeSet<PermissionId> {
    let mut seen = HashSet::new();
    let mut acc: Option<BTreeSet<PermissionId>> = None;
    for speaker in chain.speakers() {
        if !seen.insert(speaker) {
            continue;
        }
        let Ok(p) = reg.get(speaker) else {
            return BTreeSet::new();
        };
        if p.kind == PrincipalKind::System {
            continue;
        }
        let granted = reg.granted_set(speaker).unwrap_or_default();
        acc = Some(match acc {
            None => granted,
            Some(a) => a.intersection(&granted).cloned().collect(),
        });
        if acc.as_ref().is_some_and(BTreeSet::is_empty) {
            break;
        }
    }
    acc.unwrap_or_else(|| reg.known_permissions())
}
