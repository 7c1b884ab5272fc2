//! Adversary behaviours. Everything here works from a principal [`Session`]
//! plus bytes the adversary has observed; none of it can reach monitor keys.

use rand::{Rng, RngCore};

use crate::adchannel::{ClickReport, ImpressionId, CLICK_OP};
use crate::crypto::Digest32;
use crate::ipcbus::{CallChain, Statement};
use crate::monitor::Session;
use crate::principals::PrincipalId;
use crate::uievents::{ClickToken, EventId, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Forgery {
    /// Random token MAC and a fabricated chain claiming to be the ad.
    RandomMac,
    /// Random token MAC over a chain the forger signs with its own key.
    SelfSignedChain,
    /// Token MAC copied from a MAC the forger legitimately obtained.
    SplicedMac,
}

impl Forgery {
    pub const ALL: [Forgery; 3] = [Forgery::RandomMac, Forgery::SelfSignedChain, Forgery::SplicedMac];
}

fn random_digest<R: RngCore>(rng: &mut R) -> Digest32 {
    let mut d = [0u8; 32];
    rng.fill_bytes(&mut d);
    d
}

/// Builds a click report for `ad` without any genuine input event.
pub fn forge_report<R: RngCore>(
    forger: &Session<'_>,
    ad: &PrincipalId,
    impression: &ImpressionId,
    remote: &str,
    variant: Forgery,
    rng: &mut R,
    submitted_at: u64,
) -> ClickReport {
    let mut raw = [0u8; 16];
    rng.fill_bytes(&mut raw);
    let event_id = EventId(raw);
    let mut token = ClickToken {
        token_id: TokenId::new(format!("{}/{}", forger.device(), event_id)),
        event_id,
        impression_id: impression.clone(),
        ad_principal: ad.clone(),
        device: forger.device().clone(),
        mac: random_digest(rng),
    };
    let fabricated = CallChain {
        statements: vec![Statement {
            speaker: ad.clone(),
            counter: rng.gen(),
            payload_digest: random_digest(rng),
            prev_mac: [0u8; 32],
            mac: random_digest(rng),
        }],
    };
    let chain = match variant {
        Forgery::RandomMac => fabricated,
        Forgery::SelfSignedChain | Forgery::SplicedMac => forger
            .send_external(remote, CLICK_OP, &token.canonical_bytes(), None)
            .map(|m| m.chain)
            .unwrap_or(fabricated),
    };
    if variant == Forgery::SplicedMac {
        token.mac = chain.statements[0].mac;
    }
    ClickReport {
        impression_id: impression.clone(),
        token,
        chain,
        submitted_at,
    }
}

/// Corrupts an observed report so it looks like a different click: fresh
/// token id, same MAC.
pub fn retarget_stolen(report: &ClickReport, rng: &mut impl RngCore) -> ClickReport {
    let mut out = report.clone();
    let mut raw = [0u8; 16];
    rng.fill_bytes(&mut raw);
    out.token.event_id = EventId(raw);
    out.token.token_id = TokenId::new(format!("{}/{}", out.token.device, out.token.event_id));
    out
}
