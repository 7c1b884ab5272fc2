//! Seeded adversarial scenarios against the full monitor + ad-server stack.
//!
//! Every user gets its own simulated device (its own [`Monitor`], keys derived
//! from the scenario seed and user index). Device sessions are independent,
//! so they run on a worker pool; the resulting click submissions are then
//! replayed to the shared [`AdServer`] in logical-timestamp order. The report
//! only depends on the seed, never on the worker count or the wall clock.

mod adversary;
mod pipeline;
mod scenario;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adversary::{forge_report, retarget_stolen, Forgery};
pub use pipeline::{genuine_click, honest_click, Device, HonestClick, PipelineError, AD_BOUNDS, HOST_BOUNDS};
pub use scenario::{inject_crash, CrashSpec, PrincipalSpec, Scenario, ScenarioError, Strategy, SYSTEM_NAME};

use crate::adchannel::{validate_display, AdError, AdServer, BlankProxy, ClickReport, Endpoint, RejectReason, ServerLogEntry};
use crate::crypto::{put_lp, sha256};
use crate::monitor::{Monitor, MonitorConfig};
use crate::principals::{PermissionId, PermissionManifest, Principal, PrincipalId, PrincipalKind};

/// Logical milliseconds between consecutive user sessions.
pub const SESSION_SPAN_MS: u64 = 1_000;
/// Offset of the first click inside a session.
const FIRST_CLICK_MS: u64 = 100;
const CLICK_SPACING_MS: u64 = 10;

pub const SERVER_NAME: &str = "ads.example";
const SERVER_CREATIVES: usize = 8;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub accepted_clicks: u64,
    pub rejected_by_reason: BTreeMap<RejectReason, u64>,
    pub submissions: u64,
    pub genuine_clicks: u64,
    pub forged_submissions: u64,
    pub blockers_present: u64,
    pub blockers_detected: u64,
    pub impressions_validated: u64,
    pub impressions_failed: u64,
    pub fetch_denied: u64,
    pub escalation_attempts: u64,
    pub escalations_blocked: u64,
    pub crash_survivals: u64,
    pub host_messages: u64,
    /// Logical end of the run in simulated milliseconds.
    pub wall_ms: u64,
}

impl RunReport {
    pub fn rejected(&self) -> u64 {
        self.rejected_by_reason.values().sum()
    }

    pub fn rejected_for(&self, reason: RejectReason) -> u64 {
        self.rejected_by_reason.get(&reason).copied().unwrap_or(0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// True iff both reports serialize to identical bytes.
pub fn replay_report(r1: &RunReport, r2: &RunReport) -> bool {
    serde_json::to_vec(r1).expect("report serializes") == serde_json::to_vec(r2).expect("report serializes")
}

/// One message sent or received by a host principal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostLogEntry {
    pub step: u64,
    pub ts: u64,
    pub from: String,
    pub to: String,
    pub op: String,
    pub mac: String,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub host_log: Vec<HostLogEntry>,
    pub server_log: Vec<ServerLogEntry>,
}

impl RunOutcome {
    pub fn host_log_jsonl(&self) -> String {
        self.host_log
            .iter()
            .map(|e| serde_json::to_string(e).expect("entry serializes") + "\n")
            .collect()
    }
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

pub fn run_scenario(s: &Scenario) -> Result<RunReport, ScenarioError> {
    run_scenario_with_workers(s, default_workers())
}

pub fn run_scenario_with_workers(s: &Scenario, workers: usize) -> Result<RunReport, ScenarioError> {
    run_detailed(s, workers).map(|o| o.report)
}

pub fn run_detailed(s: &Scenario, workers: usize) -> Result<RunOutcome, ScenarioError> {
    s.validate()?;
    let ctx = Context::new(s);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| ScenarioError::InvalidScenario(format!("worker pool: {e}")))?;
    let sessions: Vec<SessionOutcome> = pool.install(|| {
        (0..s.n_users)
            .into_par_iter()
            .map(|u| ctx.run_user(u))
            .collect::<Result<_, _>>()
    })?;

    let mut submissions: Vec<&Submission> = sessions.iter().flat_map(|o| &o.submissions).collect();
    submissions.sort_by_key(|sub| (sub.ts, sub.user, sub.seq));
    for sub in &submissions {
        ctx.server.submit_click(&sub.report, sub.ts);
    }
    let tally = ctx.server.revenue_tally();

    let mut report = RunReport {
        accepted_clicks: tally.accepted,
        rejected_by_reason: tally.rejected_by_reason,
        submissions: submissions.len() as u64,
        blockers_present: ctx.blockers.iter().filter(|b| **b).count() as u64,
        wall_ms: s.n_users * SESSION_SPAN_MS,
        ..RunReport::default()
    };
    let mut host_log = Vec::new();
    for o in &sessions {
        report.genuine_clicks += o.genuine;
        report.forged_submissions += o.forged;
        report.blockers_detected += u64::from(o.blocker_detected);
        report.impressions_validated += o.validated;
        report.impressions_failed += o.failed;
        report.fetch_denied += o.fetch_denied;
        report.escalation_attempts += o.escalation_attempts;
        report.escalations_blocked += o.escalations_blocked;
        report.host_messages += o.host_log.len() as u64;
        report.wall_ms = report.wall_ms.max(o.last_ts);
        host_log.extend(o.host_log.iter().cloned());
    }
    report.crash_survivals = crash_survivals(s, &sessions);
    debug_assert_eq!(report.accepted_clicks + report.rejected(), report.submissions);

    Ok(RunOutcome {
        report,
        host_log,
        server_log: ctx.server.log(),
    })
}

/// A crash is survived when every later session whose host is still alive
/// completed its own host work.
fn crash_survivals(s: &Scenario, sessions: &[SessionOutcome]) -> u64 {
    s.crashes
        .iter()
        .filter(|c| c.at_step < s.n_users)
        .filter(|c| {
            sessions
                .iter()
                .skip(c.at_step as usize)
                .filter(|o| o.host_alive)
                .all(|o| o.host_work_done)
        })
        .count() as u64
}

fn derive_seed(seed: u64, user: u64, label: &str) -> u64 {
    let mut buf = Vec::new();
    put_lp(&mut buf, label.as_bytes());
    buf.extend_from_slice(&seed.to_be_bytes());
    buf.extend_from_slice(&user.to_be_bytes());
    u64::from_be_bytes(sha256(&buf)[..8].try_into().expect("8 bytes"))
}

struct Context<'s> {
    s: &'s Scenario,
    server: Arc<AdServer>,
    proxy: BlankProxy,
    blockers: Vec<bool>,
    hosts: Vec<&'s PrincipalSpec>,
}

struct Submission {
    ts: u64,
    user: u64,
    seq: u32,
    report: ClickReport,
}

#[derive(Default)]
struct SessionOutcome {
    host_log: Vec<HostLogEntry>,
    submissions: Vec<Submission>,
    blocker_detected: bool,
    validated: u64,
    failed: u64,
    fetch_denied: u64,
    genuine: u64,
    forged: u64,
    escalation_attempts: u64,
    escalations_blocked: u64,
    host_alive: bool,
    host_work_done: bool,
    last_ts: u64,
}

fn internal(e: impl std::fmt::Display) -> ScenarioError {
    ScenarioError::InvalidScenario(format!("simulation failed: {e}"))
}

impl<'s> Context<'s> {
    fn new(s: &'s Scenario) -> Self {
        let n = s.n_users as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha20Rng::seed_from_u64(derive_seed(s.seed, 0, "blockers")));
        let mut blockers = vec![false; n];
        for &u in order.iter().take(s.blocker_count() as usize) {
            blockers[u] = true;
        }
        let proxy_name = s
            .principals
            .iter()
            .find(|p| p.kind == PrincipalKind::Blocker)
            .map_or("blocker-proxy", |p| p.name.as_str());
        Self {
            s,
            server: Arc::new(AdServer::with_seed(SERVER_NAME, s.seed, SERVER_CREATIVES)),
            proxy: BlankProxy::new(proxy_name, format!("{proxy_name}/{}", s.seed).as_bytes()),
            blockers,
            hosts: s.hosts().collect(),
        }
    }

    fn crashed(&self, name: &str, step: u64) -> bool {
        self.s
            .crashes
            .iter()
            .any(|c| c.principal == name && step >= c.at_step)
    }

    fn run_user(&self, u: u64) -> Result<SessionOutcome, ScenarioError> {
        let s = self.s;
        let monitor = Arc::new(Monitor::new(
            MonitorConfig::new(format!("device-{u}"))
                .seed(derive_seed(s.seed, u, "device"))
                .freshness_ms(s.freshness_ms),
        ));
        let mut installed: BTreeMap<&str, Principal> = BTreeMap::new();
        for spec in &s.principals {
            let p = monitor
                .install(PermissionManifest::new(spec.permissions.iter().cloned()), spec.kind)
                .map_err(internal)?;
            installed.insert(spec.name.as_str(), p);
        }
        self.server.trust_device(monitor.clone());

        let host_spec = self.hosts[(u % self.hosts.len() as u64) as usize];
        let ad_spec = s.embedded_ad(host_spec).expect("validated");
        let host = &installed[host_spec.name.as_str()];
        let ad = &installed[ad_spec.name.as_str()];
        let system = monitor.system();
        monitor.register_region(&host.id, HOST_BOUNDS).map_err(internal)?;
        let ad_region = monitor.register_region(&ad.id, AD_BOUNDS).map_err(internal)?;

        let host_strategy = s.strategy(&host_spec.name);
        let ad_strategy = s.strategy(&ad_spec.name);
        let host_alive = !self.crashed(&host_spec.name, u);
        let ad_alive = !self.crashed(&ad_spec.name, u);

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s.seed, u, "user"));
        let mut out = SessionOutcome {
            host_alive,
            ..SessionOutcome::default()
        };
        let t0 = u * SESSION_SPAN_MS;
        let log = |out: &mut SessionOutcome, ts: u64, msg: &crate::ipcbus::Message| {
            out.host_log.push(HostLogEntry {
                step: u,
                ts,
                from: msg.from.to_string(),
                to: msg.to.clone(),
                op: msg.op_name.clone(),
                mac: hex::encode(msg.chain.last().expect("non-empty").mac),
            });
        };

        if !host_alive {
            return Ok(out);
        }
        let host_s = monitor.session(&host.id).map_err(internal)?;
        let sys_s = monitor.session(&system.id).map_err(internal)?;
        let ad_s = monitor.session(&ad.id).map_err(internal)?;

        // The host's own work, which must not depend on the ad.
        let work = host_s
            .send(&system.id, "host.work", &u.to_be_bytes(), None)
            .map_err(internal)?;
        log(&mut out, t0, &work);
        let received = sys_s.recv().expect("just delivered");
        let reply = sys_s
            .send(&host.id, "host.work.ok", &received.payload, Some(&received.chain))
            .map_err(internal)?;
        host_s.recv();
        log(&mut out, t0 + 1, &reply);
        out.host_work_done = true;

        let show = host_s
            .send(&ad.id, "ad.show", ad_region.as_str().as_bytes(), None)
            .map_err(internal)?;
        log(&mut out, t0 + 2, &show);

        let mut proxy_request = None;
        if host_strategy == Strategy::DeputyEscalation {
            let target = escalation_target(&monitor, &host.id, &ad.id);
            let req = host_s
                .send(&ad.id, "ad.proxy", target.as_str().as_bytes(), None)
                .map_err(internal)?;
            log(&mut out, t0 + 3, &req);
            out.escalation_attempts += 1;
            proxy_request = Some(target);
        }
        out.last_ts = t0 + 3;

        if !ad_alive {
            out.escalations_blocked += out.escalation_attempts;
            return Ok(out);
        }

        // The ad drains its inbox in order.
        while let Some(msg) = ad_s.recv() {
            if msg.op_name != "ad.proxy" {
                continue;
            }
            let target = proxy_request.clone().expect("host sent a proxy request");
            let fwd = ad_s
                .send(&system.id, "system.privileged", target.as_str().as_bytes(), Some(&msg.chain))
                .map_err(internal)?;
            let at_system = sys_s.recv().expect("just delivered");
            let verified = sys_s.verify_chain(&at_system.chain).map_err(internal)?;
            let effective = sys_s.effective_permissions(&verified);
            debug_assert_eq!(fwd.chain, at_system.chain);
            if !effective.contains(&target) {
                out.escalations_blocked += 1;
            }
        }

        let endpoint: &dyn Endpoint = if self.blockers[u as usize] {
            &self.proxy
        } else {
            &*self.server
        };
        let creative = match ad_s.fetch_creative(endpoint, &self.server.fingerprint(), None) {
            Ok(c) => c,
            Err(AdError::PinMismatch { .. }) => {
                out.blocker_detected = self.blockers[u as usize];
                return Ok(out);
            }
            Err(AdError::PermissionDenied { .. }) => {
                out.fetch_denied += 1;
                return Ok(out);
            }
            Err(e) => return Err(internal(e)),
        };

        let hidden = host_strategy == Strategy::HiddenDisplay || ad_strategy == Strategy::HiddenDisplay;
        let displayed = if hidden {
            vec![0u8; creative.content.len()]
        } else {
            creative.content.clone()
        };
        let impression = monitor
            .record_impression(&ad.id, &creative, &displayed, t0 + 10)
            .map_err(internal)?;
        if validate_display(&impression, &creative).map_err(internal)? {
            out.validated += 1;
        } else {
            out.failed += 1;
        }

        let forger = if host_strategy == Strategy::ForgeClick {
            Some(&host_s)
        } else if ad_strategy == Strategy::ForgeClick {
            Some(&ad_s)
        } else {
            None
        };
        let replays = if host_strategy == Strategy::ReplayClick || ad_strategy == Strategy::ReplayClick {
            s.replay_multiplicity
        } else {
            1
        };

        let mut seq = 0u32;
        for c in 0..s.clicks_per_user {
            let ts = t0 + FIRST_CLICK_MS + c * CLICK_SPACING_MS;
            if let Some(forger) = forger {
                let variant = Forgery::ALL[((u + c) % Forgery::ALL.len() as u64) as usize];
                let report = forge_report(
                    forger,
                    &ad.id,
                    &impression.impression_id,
                    SERVER_NAME,
                    variant,
                    &mut rng,
                    ts,
                );
                out.forged += 1;
                out.submissions.push(Submission { ts, user: u, seq, report });
                seq += 1;
                out.last_ts = out.last_ts.max(ts);
                continue;
            }
            let x = rng.gen_range(0..AD_BOUNDS.width as i32);
            let y = rng.gen_range(0..AD_BOUNDS.height as i32);
            let (_, _, report) =
                genuine_click(&monitor, &ad_s, &ad_region, &impression, SERVER_NAME, (x, y), ts).map_err(internal)?;
            out.genuine += 1;
            for k in 0..replays {
                let at = report.submitted_at + k;
                out.submissions.push(Submission {
                    ts: at,
                    user: u,
                    seq,
                    report: report.clone(),
                });
                seq += 1;
                out.last_ts = out.last_ts.max(at);
            }
        }
        Ok(out)
    }
}

/// A permission the ad holds but the host does not, if any.
fn escalation_target(monitor: &Monitor, host: &PrincipalId, ad: &PrincipalId) -> PermissionId {
    let ad_perms: BTreeSet<PermissionId> = monitor.principal(ad).map(|p| p.manifest.requested).unwrap_or_default();
    ad_perms
        .into_iter()
        .find(|p| !monitor.grant_check(host, p).unwrap_or(false))
        .unwrap_or_else(|| PermissionId::new("FINE_LOCATION").expect("constant"))
}
