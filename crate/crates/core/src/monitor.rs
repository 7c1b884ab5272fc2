//! The reference monitor: one simulated device's trusted computing base.
//!
//! [`Monitor`] owns the registry and keystore, the IPC bus, the event
//! authority and the impression ledger. Scenario drivers and tests hold the
//! monitor itself; principals (including adversarial ones) only ever get a
//! [`Session`], which speaks as exactly one principal and exposes no key
//! material and no way to emit input events.

use std::collections::BTreeSet;
use std::fmt;

use parking_lot::RwLock;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::adchannel::{self, AdCreative, AdError, Endpoint, ImpressionId, ImpressionLedger, ImpressionRecord};
use crate::crypto::Digest32;
use crate::ipcbus::{self, AuditRecord, Bus, CallChain, IpcError, Message, VerifiedChain};
use crate::principals::{
    DelegationId, DelegationToken, PermissionId, PermissionManifest, Principal, PrincipalError, PrincipalId,
    PrincipalKind, Registry, RegistryDump,
};
use crate::uievents::{
    ClickToken, ConsumedLedger, DeviceId, EventAttestation, EventAuthority, InputEvent, Rect, RegionId, UiError,
    DEFAULT_FRESHNESS_MS,
};

const REGISTRY_STREAM: u64 = 1;
const EVENT_STREAM: u64 = 2;

#[derive(Debug, Clone)]
pub struct MonitorConfig {
    pub device: DeviceId,
    /// `None` draws keys from OS entropy.
    pub seed: Option<u64>,
    pub freshness_ms: u64,
}

impl MonitorConfig {
    pub fn new(device: impl Into<String>) -> Self {
        Self {
            device: DeviceId::new(device),
            seed: None,
            freshness_ms: DEFAULT_FRESHNESS_MS,
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn freshness_ms(mut self, ms: u64) -> Self {
        self.freshness_ms = ms;
        self
    }
}

pub struct Monitor {
    registry: RwLock<Registry>,
    bus: Bus,
    events: EventAuthority,
    impressions: ImpressionLedger,
}

impl fmt::Debug for Monitor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Monitor")
            .field("device", self.device())
            .field("registry", &*self.registry.read())
            .finish_non_exhaustive()
    }
}

fn stream(seed: u64, id: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl Monitor {
    pub fn new(config: MonitorConfig) -> Self {
        let seed = config.seed.unwrap_or_else(rand::random);
        Self {
            registry: RwLock::new(Registry::new(stream(seed, REGISTRY_STREAM))),
            bus: Bus::new(),
            events: EventAuthority::new(config.device, stream(seed, EVENT_STREAM), config.freshness_ms),
            impressions: ImpressionLedger::new(),
        }
    }

    pub fn with_seed(device: impl Into<String>, seed: u64) -> Self {
        Self::new(MonitorConfig::new(device).seed(seed))
    }

    pub fn device(&self) -> &DeviceId {
        self.events.device()
    }

    // --- principals ---

    pub fn install(&self, manifest: PermissionManifest, kind: PrincipalKind) -> Result<Principal, PrincipalError> {
        self.registry.write().install(manifest, kind)
    }

    pub fn principal(&self, id: &PrincipalId) -> Result<Principal, PrincipalError> {
        self.registry.read().get(id).cloned()
    }

    pub fn system(&self) -> Principal {
        self.registry.read().system().clone()
    }

    pub fn grant_check(&self, id: &PrincipalId, perm: &PermissionId) -> Result<bool, PrincipalError> {
        self.registry.read().grant_check(id, perm)
    }

    pub fn delegate(&self, host: &PrincipalId, ad: &PrincipalId, perm: PermissionId) -> Result<DelegationToken, PrincipalError> {
        self.registry.write().delegate(host, ad, perm)
    }

    pub fn revoke(&self, token: &DelegationId) -> Result<(), PrincipalError> {
        self.registry.write().revoke(token)
    }

    pub fn registry_dump(&self) -> RegistryDump {
        self.registry.read().dump()
    }

    // --- ipc ---

    /// Trusted send on behalf of any principal.
    pub fn send(
        &self,
        from: &PrincipalId,
        to: &PrincipalId,
        op_name: &str,
        payload: &[u8],
        parent: Option<&CallChain>,
    ) -> Result<Message, IpcError> {
        self.bus.send(&self.registry.read(), from, to, op_name, payload, parent)
    }

    pub fn send_external(
        &self,
        from: &PrincipalId,
        remote: &str,
        op_name: &str,
        payload: &[u8],
        parent: Option<&CallChain>,
    ) -> Result<Message, IpcError> {
        self.bus.send_external(&self.registry.read(), from, remote, op_name, payload, parent)
    }

    pub fn recv(&self, principal: &PrincipalId) -> Option<Message> {
        self.bus.recv(principal)
    }

    pub fn pending(&self, principal: &PrincipalId) -> usize {
        self.bus.pending(principal)
    }

    pub fn verify_chain(&self, chain: &CallChain) -> Result<VerifiedChain, IpcError> {
        self.bus.verify_chain(&self.registry.read(), chain)
    }

    pub fn effective_permissions(&self, chain: &VerifiedChain) -> BTreeSet<PermissionId> {
        ipcbus::effective_permissions(&self.registry.read(), chain)
    }

    pub fn set_deputy_policy<I, S>(&self, deputy: &PrincipalId, ops: I)
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.bus.set_deputy_policy(deputy, ops);
    }

    pub fn assert_authority(
        &self,
        deputy: &PrincipalId,
        received: &Message,
        to: &PrincipalId,
        op_name: &str,
        payload: &[u8],
    ) -> Result<(Message, AuditRecord), IpcError> {
        self.bus
            .assert_authority(&self.registry.read(), deputy, received, to, op_name, payload)
    }

    pub fn audit_log(&self) -> Vec<AuditRecord> {
        self.bus.audit_log()
    }

    // --- ui events ---

    pub fn register_region(&self, owner: &PrincipalId, bounds: Rect) -> Result<RegionId, UiError> {
        if !self.registry.read().contains(owner) {
            return Err(UiError::UnknownPrincipal(owner.clone()));
        }
        self.events.register_region(owner, bounds)
    }

    /// Trusted: simulates the user touching the screen.
    pub fn emit_event(&self, region: &RegionId, x: i32, y: i32, timestamp: u64) -> Result<(InputEvent, EventAttestation), UiError> {
        self.events.emit_event(region, x, y, timestamp)
    }

    pub fn verify_event(&self, event: &InputEvent, att: &EventAttestation, now: u64) -> Result<(), UiError> {
        self.events.verify_event(event, att, now)
    }

    pub fn mint_click_token(
        &self,
        ad: &PrincipalId,
        event: &InputEvent,
        att: &EventAttestation,
        impression: &ImpressionId,
        now: u64,
    ) -> Result<ClickToken, UiError> {
        if !self.registry.read().contains(ad) {
            return Err(UiError::UnknownPrincipal(ad.clone()));
        }
        self.events
            .mint_click_token(ad, event, att, impression, now, &self.impressions)
    }

    pub fn verify_token(&self, token: &ClickToken) -> bool {
        self.events.verify_token(token)
    }

    pub fn freshness_ms(&self) -> u64 {
        self.events.freshness_ms()
    }

    pub fn consumed_snapshot(&self) -> ConsumedLedger {
        self.events.consumed_snapshot()
    }

    pub fn restore_consumed(&self, ledger: ConsumedLedger) {
        self.events.restore_consumed(ledger);
    }

    // --- impressions ---

    /// Trusted: records what was actually drawn in `ad`'s region.
    pub fn record_impression(&self, ad: &PrincipalId, creative: &AdCreative, displayed: &[u8], timestamp: u64) -> Result<ImpressionRecord, AdError> {
        if !self.registry.read().contains(ad) {
            return Err(AdError::UnknownPrincipal(ad.clone()));
        }
        if !self.events.owns_region(ad) {
            return Err(AdError::NoRegisteredRegion(ad.clone()));
        }
        Ok(self.impressions.record(ad, creative, displayed, timestamp))
    }

    pub fn impression(&self, id: &ImpressionId) -> Option<ImpressionRecord> {
        self.impressions.get(id)
    }

    pub fn impressions(&self) -> Vec<ImpressionRecord> {
        self.impressions.records()
    }

    pub fn session(&self, principal: &PrincipalId) -> Result<Session<'_>, PrincipalError> {
        let p = self.principal(principal)?;
        Ok(Session { monitor: self, me: p })
    }

    #[cfg(test)]
    pub(crate) fn key_bytes(&self, id: &PrincipalId) -> Option<[u8; 32]> {
        self.registry.read().key_for(id).map(|k| *k.as_bytes())
    }
}

/// What a principal's process can do: speak as itself, read its inbox, ask
/// the monitor for tokens. No key material is reachable from here.
pub struct Session<'m> {
    monitor: &'m Monitor,
    me: Principal,
}

impl fmt::Debug for Session<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Session").field("principal", &self.me.id).finish()
    }
}

impl Session<'_> {
    pub fn id(&self) -> &PrincipalId {
        &self.me.id
    }

    pub fn principal(&self) -> &Principal {
        &self.me
    }

    pub fn device(&self) -> &DeviceId {
        self.monitor.device()
    }

    /// Public directory lookup.
    pub fn lookup(&self, id: &PrincipalId) -> Result<Principal, PrincipalError> {
        self.monitor.principal(id)
    }

    pub fn send(&self, to: &PrincipalId, op_name: &str, payload: &[u8], parent: Option<&CallChain>) -> Result<Message, IpcError> {
        self.monitor.send(&self.me.id, to, op_name, payload, parent)
    }

    pub fn send_external(&self, remote: &str, op_name: &str, payload: &[u8], parent: Option<&CallChain>) -> Result<Message, IpcError> {
        self.monitor.send_external(&self.me.id, remote, op_name, payload, parent)
    }

    pub fn recv(&self) -> Option<Message> {
        self.monitor.recv(&self.me.id)
    }

    pub fn verify_chain(&self, chain: &CallChain) -> Result<VerifiedChain, IpcError> {
        self.monitor.verify_chain(chain)
    }

    pub fn effective_permissions(&self, chain: &VerifiedChain) -> BTreeSet<PermissionId> {
        self.monitor.effective_permissions(chain)
    }

    pub fn grant_check(&self, perm: &PermissionId) -> bool {
        self.monitor.grant_check(&self.me.id, perm).unwrap_or(false)
    }

    pub fn assert_authority(&self, received: &Message, to: &PrincipalId, op_name: &str, payload: &[u8]) -> Result<(Message, AuditRecord), IpcError> {
        self.monitor.assert_authority(&self.me.id, received, to, op_name, payload)
    }

    pub fn verify_event(&self, event: &InputEvent, att: &EventAttestation, now: u64) -> Result<(), UiError> {
        self.monitor.verify_event(event, att, now)
    }

    pub fn mint_click_token(&self, event: &InputEvent, att: &EventAttestation, impression: &ImpressionId, now: u64) -> Result<ClickToken, UiError> {
        self.monitor.mint_click_token(&self.me.id, event, att, impression, now)
    }

    pub fn fetch_creative(&self, endpoint: &dyn Endpoint, pinned: &Digest32, chain: Option<&VerifiedChain>) -> Result<AdCreative, AdError> {
        adchannel::fetch_creative(self.monitor, &self.me.id, endpoint, pinned, chain)
    }
}
