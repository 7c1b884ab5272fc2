//! Monitor-attested input events and single-use click tokens.
//!
//! Only the monitor holds the event key. An [`InputEvent`] carries an
//! [`EventAttestation`] MAC'd under that key; the ad principal exchanges a
//! fresh attested event for exactly one [`ClickToken`] bound to one of its
//! impressions. The consumed-event ledger enforces single use.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use parking_lot::{Mutex, RwLock};
use rand::RngCore;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adchannel::ImpressionId;
use crate::crypto::{self, put_lp, Digest32, MacKey};
use crate::principals::PrincipalId;

pub const DEFAULT_FRESHNESS_MS: u64 = 5000;

const EVENT_VERSION: u8 = 0x02;
const TOKEN_VERSION: u8 = 0x03;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum UiError {
    #[error("region bounds must have positive width and height")]
    DegenerateBounds,
    #[error("unknown region {0}")]
    UnknownRegion(RegionId),
    #[error("point ({x}, {y}) lies outside region {region}")]
    OutOfBounds { region: RegionId, x: i32, y: i32 },
    #[error("event attestation does not verify")]
    BadEventMac,
    #[error("event is {age_ms} ms old, window is {window_ms} ms")]
    StaleEvent { age_ms: u64, window_ms: u64 },
    #[error("event already exchanged for a click token")]
    EventAlreadyConsumed,
    #[error("region {region} is owned by {owner}, not {requester}")]
    RegionOwnerMismatch {
        region: RegionId,
        owner: PrincipalId,
        requester: PrincipalId,
    },
    #[error("unknown impression {0}")]
    UnknownImpression(ImpressionId),
    #[error("impression {0} belongs to another principal")]
    ImpressionNotOwned(ImpressionId),
    #[error("unknown principal {0}")]
    UnknownPrincipal(PrincipalId),
    #[error("corrupt ledger snapshot: {0}")]
    CorruptLedger(String),
}

/// Identifies one simulated device, i.e. one reference monitor instance.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeviceId(String);

impl DeviceId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RegionId(String);

impl RegionId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Axis-aligned display rectangle, half-open on the right and bottom edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: i32,
    pub y: i32,
    pub width: u32,
    pub height: u32,
}

impl Rect {
    pub fn new(x: i32, y: i32, width: u32, height: u32) -> Self {
        Self { x, y, width, height }
    }

    pub fn contains(&self, px: i32, py: i32) -> bool {
        let (px, py) = (i64::from(px), i64::from(py));
        let (x, y) = (i64::from(self.x), i64::from(self.y));
        px >= x && px < x + i64::from(self.width) && py >= y && py < y + i64::from(self.height)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub owner: PrincipalId,
    pub bounds: Rect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EventId(#[serde(with = "crypto::b64")] pub [u8; 16]);

impl fmt::Display for EventId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputEvent {
    pub event_id: EventId,
    pub timestamp: u64,
    pub x: i32,
    pub y: i32,
    pub region_id: RegionId,
}

impl InputEvent {
    /// `0x02 || event_id(16) || timestamp_u64_be || x_i32_be || y_i32_be || lp(region_id)`
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(1 + 16 + 8 + 8 + 4 + self.region_id.0.len());
        buf.push(EVENT_VERSION);
        buf.extend_from_slice(&self.event_id.0);
        buf.extend_from_slice(&self.timestamp.to_be_bytes());
        buf.extend_from_slice(&self.x.to_be_bytes());
        buf.extend_from_slice(&self.y.to_be_bytes());
        put_lp(&mut buf, self.region_id.0.as_bytes());
        buf
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EventAttestation {
    #[serde(with = "crypto::b64")]
    pub mac: Digest32,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(String);

impl TokenId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClickToken {
    pub token_id: TokenId,
    pub event_id: EventId,
    pub impression_id: ImpressionId,
    pub ad_principal: PrincipalId,
    pub device: DeviceId,
    #[serde(with = "crypto::b64")]
    pub mac: Digest32,
}

impl ClickToken {
    /// `0x03 || lp(token_id) || event_id(16) || lp(impression_id) || lp(ad_principal) || lp(device)`
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(96);
        buf.push(TOKEN_VERSION);
        put_lp(&mut buf, self.token_id.0.as_bytes());
        buf.extend_from_slice(&self.event_id.0);
        put_lp(&mut buf, self.impression_id.as_str().as_bytes());
        put_lp(&mut buf, self.ad_principal.as_str().as_bytes());
        put_lp(&mut buf, self.device.as_str().as_bytes());
        buf
    }
}

/// Lookup of impression ownership, implemented by the impression ledger.
pub trait ImpressionOwners {
    fn impression_owner(&self, id: &ImpressionId) -> Option<PrincipalId>;
}

/// Event id → token id for every event already exchanged.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsumedLedger {
    pub consumed: BTreeMap<EventId, TokenId>,
}

impl ConsumedLedger {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("ledger serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, UiError> {
        serde_json::from_slice(bytes).map_err(|e| UiError::CorruptLedger(e.to_string()))
    }
}

struct Regions {
    next: u64,
    table: BTreeMap<RegionId, Region>,
}

pub struct EventAuthority {
    device: DeviceId,
    key: MacKey,
    freshness_ms: u64,
    regions: RwLock<Regions>,
    ids: Mutex<(ChaCha20Rng, HashSet<EventId>)>,
    consumed: Mutex<ConsumedLedger>,
}

impl fmt::Debug for EventAuthority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EventAuthority")
            .field("device", &self.device)
            .field("freshness_ms", &self.freshness_ms)
            .finish_non_exhaustive()
    }
}

impl EventAuthority {
    pub fn new(device: DeviceId, mut rng: ChaCha20Rng, freshness_ms: u64) -> Self {
        let key = MacKey::generate(&mut rng);
        Self {
            device,
            key,
            freshness_ms,
            regions: RwLock::new(Regions {
                next: 1,
                table: BTreeMap::new(),
            }),
            ids: Mutex::new((rng, HashSet::new())),
            consumed: Mutex::new(ConsumedLedger::default()),
        }
    }

    pub fn device(&self) -> &DeviceId {
        &self.device
    }

    pub fn freshness_ms(&self) -> u64 {
        self.freshness_ms
    }

    pub fn register_region(&self, owner: &PrincipalId, bounds: Rect) -> Result<RegionId, UiError> {
        if bounds.width == 0 || bounds.height == 0 {
            return Err(UiError::DegenerateBounds);
        }
        let mut regions = self.regions.write();
        let id = RegionId(format!("region-{}", regions.next));
        regions.next += 1;
        regions.table.insert(
            id.clone(),
            Region {
                owner: owner.clone(),
                bounds,
            },
        );
        Ok(id)
    }

    pub fn region(&self, id: &RegionId) -> Option<Region> {
        self.regions.read().table.get(id).cloned()
    }

    pub fn owns_region(&self, owner: &PrincipalId) -> bool {
        self.regions.read().table.values().any(|r| &r.owner == owner)
    }

    pub fn emit_event(&self, region_id: &RegionId, x: i32, y: i32, timestamp: u64) -> Result<(InputEvent, EventAttestation), UiError> {
        let region = self
            .region(region_id)
            .ok_or_else(|| UiError::UnknownRegion(region_id.clone()))?;
        if !region.bounds.contains(x, y) {
            return Err(UiError::OutOfBounds {
                region: region_id.clone(),
                x,
                y,
            });
        }
        let event_id = {
            let mut guard = self.ids.lock();
            let (rng, issued) = &mut *guard;
            loop {
                let mut raw = [0u8; 16];
                rng.fill_bytes(&mut raw);
                if issued.insert(EventId(raw)) {
                    break EventId(raw);
                }
            }
        };
        let event = InputEvent {
            event_id,
            timestamp,
            x,
            y,
            region_id: region_id.clone(),
        };
        let att = EventAttestation {
            mac: self.key.sign(&event.canonical_bytes()),
        };
        Ok((event, att))
    }

    /// MAC first, then freshness. Events stamped in the future count as fresh.
    pub fn verify_event(&self, event: &InputEvent, att: &EventAttestation, now: u64) -> Result<(), UiError> {
        if !self.key.verify(&event.canonical_bytes(), &att.mac) {
            return Err(UiError::BadEventMac);
        }
        let age_ms = now.saturating_sub(event.timestamp);
        if age_ms > self.freshness_ms {
            return Err(UiError::StaleEvent {
                age_ms,
                window_ms: self.freshness_ms,
            });
        }
        Ok(())
    }

    pub fn mint_click_token(
        &self,
        ad: &PrincipalId,
        event: &InputEvent,
        att: &EventAttestation,
        impression_id: &ImpressionId,
        now: u64,
        impressions: &impl ImpressionOwners,
    ) -> Result<ClickToken, UiError> {
        self.verify_event(event, att, now)?;
        let region = self
            .region(&event.region_id)
            .ok_or_else(|| UiError::UnknownRegion(event.region_id.clone()))?;
        if &region.owner != ad {
            return Err(UiError::RegionOwnerMismatch {
                region: event.region_id.clone(),
                owner: region.owner,
                requester: ad.clone(),
            });
        }
        match impressions.impression_owner(impression_id) {
            None => return Err(UiError::UnknownImpression(impression_id.clone())),
            Some(owner) if &owner != ad => return Err(UiError::ImpressionNotOwned(impression_id.clone())),
            Some(_) => {}
        }

        let token_id = TokenId(format!("{}/{}", self.device, event.event_id));
        {
            let mut ledger = self.consumed.lock();
            if ledger.consumed.contains_key(&event.event_id) {
                return Err(UiError::EventAlreadyConsumed);
            }
            ledger.consumed.insert(event.event_id, token_id.clone());
        }
        let mut token = ClickToken {
            token_id,
            event_id: event.event_id,
            impression_id: impression_id.clone(),
            ad_principal: ad.clone(),
            device: self.device.clone(),
            mac: [0u8; 32],
        };
        token.mac = self.key.sign(&token.canonical_bytes());
        Ok(token)
    }

    pub fn verify_token(&self, token: &ClickToken) -> bool {
        token.device == self.device && self.key.verify(&token.canonical_bytes(), &token.mac)
    }

    pub fn is_consumed(&self, event: &EventId) -> bool {
        self.consumed.lock().consumed.contains_key(event)
    }

    pub fn consumed_snapshot(&self) -> ConsumedLedger {
        self.consumed.lock().clone()
    }

    pub fn restore_consumed(&self, ledger: ConsumedLedger) {
        let mut ids = self.ids.lock();
        ids.1.extend(ledger.consumed.keys().copied());
        *self.consumed.lock() = ledger;
    }

    #[cfg(test)]
    pub(crate) fn key_bytes(&self) -> [u8; 32] {
        *self.key.as_bytes()
    }
}
