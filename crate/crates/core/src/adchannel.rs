//! Ad delivery and reporting: pinned creative fetch, impression records,
//! display validation, and the remote server's click verification.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, sha256, Digest32};
use crate::ipcbus::{CallChain, IpcError, VerifiedChain};
use crate::monitor::{Monitor, Session};
use crate::principals::{PermissionId, PrincipalId};
use crate::uievents::{ClickToken, DeviceId, ImpressionOwners, TokenId};

/// Permission required to reach any ad endpoint.
pub const INTERNET: &str = "INTERNET";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AdError {
    #[error("endpoint {endpoint} presented fingerprint {presented}, pinned {pinned}")]
    PinMismatch {
        endpoint: String,
        pinned: String,
        presented: String,
    },
    #[error("{principal} lacks {permission}")]
    PermissionDenied {
        principal: PrincipalId,
        permission: PermissionId,
    },
    #[error("{0} owns no display region")]
    NoRegisteredRegion(PrincipalId),
    #[error("impression shows {record} but creative is {creative}")]
    CreativeMismatch { record: CreativeId, creative: CreativeId },
    #[error("unknown principal {0}")]
    UnknownPrincipal(PrincipalId),
    #[error("malformed click report: {0}")]
    MalformedReport(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImpressionId(String);

impl ImpressionId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ImpressionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CreativeId(String);

impl CreativeId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }
}

impl fmt::Display for CreativeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdCreative {
    pub creative_id: CreativeId,
    #[serde(with = "crypto::b64::vec")]
    pub content: Vec<u8>,
    #[serde(with = "crypto::b64")]
    pub content_digest: Digest32,
    #[serde(with = "crypto::b64")]
    pub server_fingerprint: Digest32,
}

impl AdCreative {
    pub fn new(creative_id: CreativeId, content: Vec<u8>, server_fingerprint: Digest32) -> Self {
        Self {
            content_digest: sha256(&content),
            creative_id,
            content,
            server_fingerprint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchRequest {
    pub device: DeviceId,
    pub ad: PrincipalId,
}

/// Something an ad principal can fetch creatives from. The fingerprint stands
/// in for the endpoint's TLS credential.
pub trait Endpoint: Send + Sync {
    fn name(&self) -> &str;
    fn fingerprint(&self) -> Digest32;
    fn serve(&self, req: &FetchRequest) -> AdCreative;
}

/// Transparent proxy that swaps every creative for blank bytes.
#[derive(Debug, Clone)]
pub struct BlankProxy {
    name: String,
    fingerprint: Digest32,
}

impl BlankProxy {
    pub fn new(name: impl Into<String>, credential: &[u8]) -> Self {
        Self {
            name: name.into(),
            fingerprint: sha256(credential),
        }
    }
}

impl Endpoint for BlankProxy {
    fn name(&self) -> &str {
        &self.name
    }

    fn fingerprint(&self) -> Digest32 {
        self.fingerprint
    }

    fn serve(&self, _req: &FetchRequest) -> AdCreative {
        AdCreative::new(CreativeId::new("blank"), vec![0u8; 64], self.fingerprint)
    }
}

/// Fetches a creative for `ad`, refusing any endpoint whose fingerprint
/// differs from `pinned`. When `chain` is given the request is judged by the
/// chain's effective permissions and its last speaker must be `ad`.
pub fn fetch_creative(
    monitor: &Monitor,
    ad: &PrincipalId,
    endpoint: &dyn Endpoint,
    pinned: &Digest32,
    chain: Option<&VerifiedChain>,
) -> Result<AdCreative, AdError> {
    let internet = PermissionId::new(INTERNET).expect("constant");
    let allowed = match chain {
        Some(chain) => chain.last_speaker() == ad && monitor.effective_permissions(chain).contains(&internet),
        None => monitor
            .grant_check(ad, &internet)
            .map_err(|_| AdError::UnknownPrincipal(ad.clone()))?,
    };
    if !allowed {
        return Err(AdError::PermissionDenied {
            principal: ad.clone(),
            permission: internet,
        });
    }
    let presented = endpoint.fingerprint();
    if &presented != pinned {
        return Err(pin_mismatch(endpoint.name(), pinned, &presented));
    }
    let creative = endpoint.serve(&FetchRequest {
        device: monitor.device().clone(),
        ad: ad.clone(),
    });
    if &creative.server_fingerprint != pinned {
        return Err(pin_mismatch(endpoint.name(), pinned, &creative.server_fingerprint));
    }
    Ok(creative)
}

fn pin_mismatch(endpoint: &str, pinned: &Digest32, presented: &Digest32) -> AdError {
    AdError::PinMismatch {
        endpoint: endpoint.to_owned(),
        pinned: hex::encode(pinned),
        presented: hex::encode(presented),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImpressionRecord {
    pub impression_id: ImpressionId,
    pub creative_id: CreativeId,
    pub owner: PrincipalId,
    #[serde(with = "crypto::b64")]
    pub displayed_digest: Digest32,
    pub timestamp: u64,
}

/// True iff the displayed bytes hash to the creative's digest.
pub fn validate_display(record: &ImpressionRecord, creative: &AdCreative) -> Result<bool, AdError> {
    if record.creative_id != creative.creative_id {
        return Err(AdError::CreativeMismatch {
            record: record.creative_id.clone(),
            creative: creative.creative_id.clone(),
        });
    }
    Ok(record.displayed_digest == creative.content_digest)
}

/// Monitor-side record of everything actually drawn on screen.
#[derive(Debug, Default)]
pub struct ImpressionLedger {
    inner: Mutex<(u64, BTreeMap<ImpressionId, ImpressionRecord>)>,
}

impl ImpressionLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn record(&self, owner: &PrincipalId, creative: &AdCreative, displayed: &[u8], timestamp: u64) -> ImpressionRecord {
        let mut inner = self.inner.lock();
        inner.0 += 1;
        let record = ImpressionRecord {
            impression_id: ImpressionId(format!("imp-{}", inner.0)),
            creative_id: creative.creative_id.clone(),
            owner: owner.clone(),
            displayed_digest: sha256(displayed),
            timestamp,
        };
        inner.1.insert(record.impression_id.clone(), record.clone());
        record
    }

    pub fn get(&self, id: &ImpressionId) -> Option<ImpressionRecord> {
        self.inner.lock().1.get(id).cloned()
    }

    pub fn records(&self) -> Vec<ImpressionRecord> {
        self.inner.lock().1.values().cloned().collect()
    }
}

impl ImpressionOwners for ImpressionLedger {
    fn impression_owner(&self, id: &ImpressionId) -> Option<PrincipalId> {
        self.inner.lock().1.get(id).map(|r| r.owner.clone())
    }
}

/// Server-verifiable click submission.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickReport {
    pub impression_id: ImpressionId,
    pub token: ClickToken,
    pub chain: CallChain,
    pub submitted_at: u64,
}

/// Operation name of the outbound click message.
pub const CLICK_OP: &str = "click.report";

/// Ad-side: wraps a token in a report whose chain is a fresh outbound message
/// to `remote` carrying the token's canonical bytes.
pub fn build_click_report(session: &Session<'_>, remote: &str, token: ClickToken, submitted_at: u64) -> Result<ClickReport, IpcError> {
    let msg = session.send_external(remote, CLICK_OP, &token.canonical_bytes(), None)?;
    Ok(ClickReport {
        impression_id: token.impression_id.clone(),
        token,
        chain: msg.chain,
        submitted_at,
    })
}

impl ClickReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, AdError> {
        serde_json::from_str(text).map_err(|e| AdError::MalformedReport(e.to_string()))
    }
}

/// Why the server refused a click. Declaration order is check order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RejectReason {
    BadTokenMac,
    ImpressionMismatch,
    UnknownImpression,
    ImpressionOwnerMismatch,
    DisplayNotValidated,
    BadChain,
    ChainSpeakerMismatch,
    DuplicateToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "verdict")]
pub enum Verdict {
    Accepted,
    Rejected { reason: RejectReason },
}

impl Verdict {
    pub fn is_accepted(&self) -> bool {
        matches!(self, Verdict::Accepted)
    }

    pub fn reason(&self) -> Option<RejectReason> {
        match self {
            Verdict::Accepted => None,
            Verdict::Rejected { reason } => Some(*reason),
        }
    }
}

/// One JSON-lines entry of the server log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerLogEntry {
    pub ts: u64,
    pub token_id: TokenId,
    pub verdict: String,
    pub reason: Option<RejectReason>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub accepted: u64,
    pub rejected_by_reason: BTreeMap<RejectReason, u64>,
}

impl Tally {
    pub fn rejected(&self) -> u64 {
        self.rejected_by_reason.values().sum()
    }

    pub fn from_log(log: &[ServerLogEntry]) -> Self {
        let mut tally = Tally::default();
        for entry in log {
            match entry.reason {
                None => tally.accepted += 1,
                Some(r) => *tally.rejected_by_reason.entry(r).or_default() += 1,
            }
        }
        tally
    }
}

/// Simulated remote ad server. Trusts the event key and keystore of every
/// enrolled device monitor.
pub struct AdServer {
    name: String,
    fingerprint: Digest32,
    catalog: BTreeMap<CreativeId, AdCreative>,
    order: Vec<CreativeId>,
    devices: RwLock<HashMap<DeviceId, Arc<Monitor>>>,
    accepted: Mutex<HashSet<TokenId>>,
    log: Mutex<Vec<ServerLogEntry>>,
}

impl fmt::Debug for AdServer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AdServer")
            .field("name", &self.name)
            .field("fingerprint", &hex::encode(self.fingerprint))
            .field("creatives", &self.order.len())
            .finish_non_exhaustive()
    }
}

impl AdServer {
    /// `credential` is hashed into the server fingerprint. `contents` must be
    /// non-empty.
    pub fn new(name: impl Into<String>, credential: &[u8], contents: Vec<Vec<u8>>) -> Self {
        assert!(!contents.is_empty(), "ad server needs at least one creative");
        let fingerprint = sha256(credential);
        let mut catalog = BTreeMap::new();
        let mut order = Vec::new();
        for (i, content) in contents.into_iter().enumerate() {
            let id = CreativeId(format!("creative-{}", i + 1));
            order.push(id.clone());
            catalog.insert(id.clone(), AdCreative::new(id, content, fingerprint));
        }
        Self {
            name: name.into(),
            fingerprint,
            catalog,
            order,
            devices: RwLock::new(HashMap::new()),
            accepted: Mutex::new(HashSet::new()),
            log: Mutex::new(Vec::new()),
        }
    }

    /// Server with `n` deterministic pseudo-random creatives.
    pub fn with_seed(name: impl Into<String>, seed: u64, n: usize) -> Self {
        let name = name.into();
        let contents = (0..n.max(1))
            .map(|i| {
                let mut body = Vec::with_capacity(256);
                let mut block = sha256(format!("{name}/{seed}/{i}").as_bytes());
                while body.len() < 256 {
                    body.extend_from_slice(&block);
                    block = sha256(&block);
                }
                body
            })
            .collect();
        let credential = format!("{name}/credential/{seed}");
        Self::new(name, credential.as_bytes(), contents)
    }

    pub fn trust_device(&self, monitor: Arc<Monitor>) {
        self.devices.write().insert(monitor.device().clone(), monitor);
    }

    pub fn creative(&self, id: &CreativeId) -> Option<&AdCreative> {
        self.catalog.get(id)
    }

    pub fn creatives(&self) -> impl Iterator<Item = &AdCreative> {
        self.order.iter().map(|id| &self.catalog[id])
    }

    /// Runs every check in fixed order and logs the verdict.
    pub fn submit_click(&self, report: &ClickReport, now: u64) -> Verdict {
        let verdict = match self.check(report) {
            Ok(()) => Verdict::Accepted,
            Err(reason) => Verdict::Rejected { reason },
        };
        self.log.lock().push(ServerLogEntry {
            ts: now,
            token_id: report.token.token_id.clone(),
            verdict: if verdict.is_accepted() { "Accepted" } else { "Rejected" }.to_owned(),
            reason: verdict.reason(),
        });
        verdict
    }

    fn check(&self, report: &ClickReport) -> Result<(), RejectReason> {
        let token = &report.token;
        let monitor = self
            .devices
            .read()
            .get(&token.device)
            .cloned()
            .ok_or(RejectReason::BadTokenMac)?;
        if !monitor.verify_token(token) {
            return Err(RejectReason::BadTokenMac);
        }

        if token.impression_id != report.impression_id {
            return Err(RejectReason::ImpressionMismatch);
        }

        let record = monitor
            .impression(&report.impression_id)
            .ok_or(RejectReason::UnknownImpression)?;
        if record.owner != token.ad_principal {
            return Err(RejectReason::ImpressionOwnerMismatch);
        }
        let displayed_ok = self
            .catalog
            .get(&record.creative_id)
            .is_some_and(|c| validate_display(&record, c).unwrap_or(false));
        if !displayed_ok {
            return Err(RejectReason::DisplayNotValidated);
        }

        let chain = monitor
            .verify_chain(&report.chain)
            .map_err(|_| RejectReason::BadChain)?;
        if chain.head_speaker() != &token.ad_principal {
            return Err(RejectReason::ChainSpeakerMismatch);
        }

        if !self.accepted.lock().insert(token.token_id.clone()) {
            return Err(RejectReason::DuplicateToken);
        }
        Ok(())
    }

    pub fn revenue_tally(&self) -> Tally {
        let tally = Tally::from_log(&self.log.lock());
        debug_assert_eq!(tally.accepted as usize, self.accepted.lock().len());
        tally
    }

    pub fn log(&self) -> Vec<ServerLogEntry> {
        self.log.lock().clone()
    }

    pub fn log_jsonl(&self) -> String {
        self.log
            .lock()
            .iter()
            .map(|e| serde_json::to_string(e).expect("log entry serializes") + "\n")
            .collect()
    }

    /// Sorted accepted token ids, JSON-encoded.
    pub fn accepted_snapshot(&self) -> Vec<u8> {
        let mut ids: Vec<TokenId> = self.accepted.lock().iter().cloned().collect();
        ids.sort();
        serde_json::to_vec(&ids).expect("ids serialize")
    }

    pub fn restore_accepted(&self, snapshot: &[u8]) -> Result<(), AdError> {
        let ids: Vec<TokenId> =
            serde_json::from_slice(snapshot).map_err(|e| AdError::MalformedReport(e.to_string()))?;
        *self.accepted.lock() = ids.into_iter().collect();
        Ok(())
    }
}

impl Endpoint for AdServer {
    fn name(&self) -> &str {
        &self.name
    }

    fn fingerprint(&self) -> Digest32 {
        self.fingerprint
    }

    /// Creative choice depends only on (device, ad).
    fn serve(&self, req: &FetchRequest) -> AdCreative {
        let mut buf = Vec::new();
        crypto::put_lp(&mut buf, req.device.as_str().as_bytes());
        crypto::put_lp(&mut buf, req.ad.as_str().as_bytes());
        let h = sha256(&buf);
        let idx = u64::from_be_bytes(h[..8].try_into().expect("8 bytes")) % self.order.len() as u64;
        self.catalog[&self.order[idx as usize]].clone()
    }
}
