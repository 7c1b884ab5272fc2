//! The honest ad pipeline on one device: fetch → display → touch → token →
//! report.

use std::sync::Arc;

use thiserror::Error;

use crate::adchannel::{self, AdCreative, AdError, AdServer, ClickReport, Endpoint, ImpressionRecord};
use crate::ipcbus::IpcError;
use crate::monitor::{Monitor, MonitorConfig, Session};
use crate::principals::{perms, PermissionManifest, Principal, PrincipalError, PrincipalKind};
use crate::uievents::{ClickToken, EventAttestation, InputEvent, Rect, RegionId, UiError};

/// Banner slot at the top of the screen.
pub const AD_BOUNDS: Rect = Rect {
    x: 0,
    y: 0,
    width: 320,
    height: 50,
};

/// Everything below the banner.
pub const HOST_BOUNDS: Rect = Rect {
    x: 0,
    y: 50,
    width: 320,
    height: 430,
};

/// Delay between the touch and the ad asking for its token.
pub const MINT_DELAY_MS: u64 = 5;
/// Delay between the touch and the report reaching the server.
pub const REPORT_DELAY_MS: u64 = 10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Principal(#[from] PrincipalError),
    #[error(transparent)]
    Ipc(#[from] IpcError),
    #[error(transparent)]
    Ui(#[from] UiError),
    #[error(transparent)]
    Ad(#[from] AdError),
}

/// A device with one host embedding one ad, enrolled with a server.
#[derive(Debug, Clone)]
pub struct Device {
    pub monitor: Arc<Monitor>,
    pub host: Principal,
    pub ad: Principal,
    pub ad_region: RegionId,
    pub host_region: RegionId,
}

impl Device {
    pub fn install(device: &str, seed: u64, freshness_ms: u64, server: &AdServer) -> Result<Self, PipelineError> {
        let monitor = Arc::new(Monitor::new(
            MonitorConfig::new(device).seed(seed).freshness_ms(freshness_ms),
        ));
        let host = monitor.install(PermissionManifest::new(perms(["INTERNET"])), PrincipalKind::Host)?;
        let ad = monitor.install(PermissionManifest::new(perms(["INTERNET"])), PrincipalKind::Ad)?;
        let host_region = monitor.register_region(&host.id, HOST_BOUNDS)?;
        let ad_region = monitor.register_region(&ad.id, AD_BOUNDS)?;
        server.trust_device(monitor.clone());
        Ok(Self {
            monitor,
            host,
            ad,
            ad_region,
            host_region,
        })
    }

    pub fn ad_session(&self) -> Session<'_> {
        self.monitor.session(&self.ad.id).expect("ad installed")
    }

    pub fn host_session(&self) -> Session<'_> {
        self.monitor.session(&self.host.id).expect("host installed")
    }
}

#[derive(Debug, Clone)]
pub struct HonestClick {
    pub creative: AdCreative,
    pub impression: ImpressionRecord,
    pub event: InputEvent,
    pub attestation: EventAttestation,
    pub token: ClickToken,
    pub report: ClickReport,
}

/// A genuine touch at `(x, y)` in `region` at `ts`, exchanged for a token and
/// wrapped in a report addressed to `remote`.
pub fn genuine_click(
    monitor: &Monitor,
    ad: &Session<'_>,
    region: &RegionId,
    impression: &ImpressionRecord,
    remote: &str,
    (x, y): (i32, i32),
    ts: u64,
) -> Result<(InputEvent, EventAttestation, ClickReport), PipelineError> {
    let (event, att) = monitor.emit_event(region, x, y, ts)?;
    let mint_at = ts + MINT_DELAY_MS.min(monitor.freshness_ms());
    let token = ad.mint_click_token(&event, &att, &impression.impression_id, mint_at)?;
    let report = adchannel::build_click_report(ad, remote, token, ts + REPORT_DELAY_MS)?;
    Ok((event, att, report))
}

/// Runs the full honest pipeline against `server` without submitting.
pub fn honest_click(device: &Device, server: &AdServer, ts: u64) -> Result<HonestClick, PipelineError> {
    let ad = device.ad_session();
    let creative = ad.fetch_creative(server, &server.fingerprint(), None)?;
    let impression = device
        .monitor
        .record_impression(&device.ad.id, &creative, &creative.content, ts)?;
    let (event, attestation, report) = genuine_click(
        &device.monitor,
        &ad,
        &device.ad_region,
        &impression,
        server.name(),
        (160, 25),
        ts + 1,
    )?;
    Ok(HonestClick {
        creative,
        impression,
        event,
        attestation,
        token: report.token.clone(),
        report,
    })
}
