//! Acceptance suite. Each criterion prints one PASS/FAIL line; the test fails
//! if any criterion does. Run with `--nocapture` to see the lines.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use adshield::adchannel::Endpoint;
use adshield::fraudbench::{
    self, forge_report, genuine_click, honest_click, inject_crash, retarget_stolen, Device, Forgery, PrincipalSpec,
    Scenario, Strategy,
};
use adshield::permtool::{self, AppRecord, BloatReport, LibraryProfile};
use adshield::uievents::{ConsumedLedger, UiError};
use adshield::{AdServer, PermissionId, PrincipalKind, RejectReason, Verdict};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn soundness() -> Outcome {
    const N: usize = 10_000;
    let start = Instant::now();
    let server = AdServer::with_seed(fraudbench::SERVER_NAME, 11, 8);
    let device = Device::install("device-victim", 11, 5_000, &server).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    // Reports the adversary observed on the wire; half of them already paid.
    let mut stolen = Vec::new();
    for i in 0..64 {
        let click = honest_click(&device, &server, 1_000 + i * 100).map_err(|e| e.to_string())?;
        if i % 2 == 0 {
            let v = server.submit_click(&click.report, click.report.submitted_at);
            ensure!(v.is_accepted(), "setup click {i} rejected: {v:?}");
        }
        stolen.push(click.report);
    }
    let paid = server.revenue_tally().accepted;
    let impression = device.monitor.impressions()[0].impression_id.clone();
    let host = device.host_session();
    let ad = device.ad_session();

    let mut by_kind: BTreeMap<&str, u64> = BTreeMap::new();
    for i in 0..N {
        let now = 100_000 + i as u64;
        let (kind, report) = match i % 6 {
            0 => ("random-mac", forge_report(&host, &device.ad.id, &impression, server.name(), Forgery::RandomMac, &mut rng, now)),
            1 => ("host-chain", forge_report(&host, &device.ad.id, &impression, server.name(), Forgery::SelfSignedChain, &mut rng, now)),
            2 => ("spliced-mac", forge_report(&ad, &device.ad.id, &impression, server.name(), Forgery::SplicedMac, &mut rng, now)),
            3 => {
                // Replay of a report that was already paid.
                let r = &stolen[2 * rng.gen_range(0..stolen.len() / 2)];
                ("replayed", r.clone())
            }
            4 => ("retargeted", retarget_stolen(stolen.choose(&mut rng).unwrap(), &mut rng)),
            _ => {
                // A genuine, unpaid token re-wrapped in a chain the host signs.
                let mut r = stolen[2 * rng.gen_range(0..stolen.len() / 2) + 1].clone();
                r.chain = host
                    .send_external(server.name(), adshield::adchannel::CLICK_OP, &r.token.canonical_bytes(), None)
                    .map_err(|e| e.to_string())?
                    .chain;
                ("stolen-token-host-chain", r)
            }
        };
        let v = server.submit_click(&report, now);
        ensure!(!v.is_accepted(), "forged submission {i} ({kind}) was accepted");
        *by_kind.entry(kind).or_default() += 1;
    }
    let elapsed = start.elapsed();
    let accepted_forged = server.revenue_tally().accepted - paid;
    ensure!(accepted_forged == 0, "{accepted_forged} forged submissions accepted");
    ensure!(elapsed < Duration::from_secs(10), "took {}", secs(elapsed));
    Ok(format!("{N} forged, 0 accepted in {} ({by_kind:?})", secs(elapsed)))
}

fn completeness() -> Outcome {
    const N: u64 = 1_000;
    let server = AdServer::with_seed(fraudbench::SERVER_NAME, 22, 8);
    let mut rejected = Vec::new();
    for i in 0..N {
        let device = Device::install(&format!("device-{i}"), 22_000 + i, 5_000, &server).map_err(|e| e.to_string())?;
        let click = honest_click(&device, &server, 1_000 + i).map_err(|e| e.to_string())?;
        let v = server.submit_click(&click.report, click.report.submitted_at);
        if !v.is_accepted() {
            rejected.push((i, v));
        }
    }
    let tally = server.revenue_tally();
    ensure!(rejected.is_empty(), "rejected honest pipelines: {:?}", &rejected[..rejected.len().min(5)]);
    ensure!(tally.accepted == N && tally.rejected() == 0, "tally {tally:?}");
    Ok(format!("{N} honest pipelines, {} accepted, 0 rejected", tally.accepted))
}

fn chain_fuzz() -> Outcome {
    let (monitor, chain) = common::three_hop_chain(33);
    ensure!(monitor.verify_chain(&chain).is_ok(), "unmutated chain rejected");
    let (mutants, skipped) = common::single_bit_mutants(&chain);
    ensure!(mutants.len() >= 2_000, "only {} mutants", mutants.len());
    for (i, m) in mutants.iter().enumerate() {
        ensure!(monitor.verify_chain(m).is_err(), "mutant {i} verified");
    }
    ensure!(monitor.verify_chain(&chain).is_ok(), "unmutated chain rejected after fuzzing");
    Ok(format!("{} mutants rejected ({skipped} non-UTF-8 speaker flips not representable)", mutants.len()))
}

fn intersection_oracle() -> Outcome {
    let mut lengths = BTreeMap::<usize, u64>::new();
    for seed in 0..1_000 {
        let inst = common::random_chain_instance(seed);
        let verified = inst.monitor.verify_chain(&inst.chain).map_err(|e| format!("seed {seed}: {e}"))?;
        let got = common::names(&inst.monitor.effective_permissions(&verified));
        ensure!(
            got == inst.expected,
            "seed {seed}: speakers {:?} got {got:?} expected {:?}",
            inst.speakers,
            inst.expected
        );
        *lengths.entry(inst.speakers.len()).or_default() += 1;
    }
    Ok(format!("1000 instances match fold-intersection (chain lengths {lengths:?})"))
}

fn replay() -> Outcome {
    let mut lines = Vec::new();
    for k in [2u64, 3, 5] {
        for (who, n) in [("host", 40u64), ("ad", 25)] {
            let mut s = Scenario::basic(n, 50 + k).with_strategy(who, Strategy::ReplayClick);
            s.replay_multiplicity = k;
            s.clicks_per_user = 2;
            let r = fraudbench::run_scenario(&s).map_err(|e| e.to_string())?;
            let clicks = n * s.clicks_per_user;
            ensure!(r.accepted_clicks == clicks, "k={k} {who}: accepted {}", r.accepted_clicks);
            ensure!(
                r.rejected_for(RejectReason::DuplicateToken) == clicks * (k - 1) && r.rejected() == clicks * (k - 1),
                "k={k} {who}: rejections {:?}",
                r.rejected_by_reason
            );
            lines.push(format!("k={k}:{}dup", clicks * (k - 1)));
        }
    }

    // Checkpoint the monitor's consumed-event ledger and the server's paid
    // set, restart both from the same seeds, and try again.
    let server = AdServer::with_seed(fraudbench::SERVER_NAME, 55, 8);
    let device = Device::install("device-ckpt", 55, 5_000, &server).map_err(|e| e.to_string())?;
    let click = honest_click(&device, &server, 1_000).map_err(|e| e.to_string())?;
    ensure!(server.submit_click(&click.report, 1_010).is_accepted(), "first submission rejected");
    let consumed = device.monitor.consumed_snapshot().to_bytes();
    let paid = server.accepted_snapshot();

    let server2 = AdServer::with_seed(fraudbench::SERVER_NAME, 55, 8);
    let device2 = Device::install("device-ckpt", 55, 5_000, &server2).map_err(|e| e.to_string())?;
    let creative = device2
        .ad_session()
        .fetch_creative(&server2, &server2.fingerprint(), None)
        .map_err(|e| e.to_string())?;
    let impression = device2
        .monitor
        .record_impression(&device2.ad.id, &creative, &creative.content, 1_000)
        .map_err(|e| e.to_string())?;
    ensure!(impression.impression_id == click.impression.impression_id, "restart changed impression ids");
    device2
        .monitor
        .restore_consumed(ConsumedLedger::from_bytes(&consumed).map_err(|e| e.to_string())?);
    server2.restore_accepted(&paid).map_err(|e| e.to_string())?;

    let remint = device2
        .ad_session()
        .mint_click_token(&click.event, &click.attestation, &impression.impression_id, 1_006);
    ensure!(remint == Err(UiError::EventAlreadyConsumed), "re-mint after restore: {remint:?}");
    let v = server2.submit_click(&click.report, 1_020);
    ensure!(
        v == Verdict::Rejected { reason: RejectReason::DuplicateToken },
        "resubmission after restore: {v:?}"
    );
    // Control: a fresh click on the restored device is still paid once.
    let (_, _, fresh) = genuine_click(&device2.monitor, &device2.ad_session(), &device2.ad_region, &impression, server2.name(), (3, 3), 2_000)
        .map_err(|e| e.to_string())?;
    let v = server2.submit_click(&fresh, 2_010);
    ensure!(v.is_accepted(), "fresh click after restore: {v:?}");
    ensure!(!server2.submit_click(&fresh, 2_011).is_accepted(), "fresh click paid twice");
    Ok(format!("exactly k-1 DuplicateToken ({}); ledger survives checkpoint/restore", lines.join(" ")))
}

fn blocker_scenario(n: u64, seed: u64) -> Scenario {
    let mut s = Scenario::basic(n, seed);
    s.principals.push(PrincipalSpec {
        name: "blocker".into(),
        kind: PrincipalKind::Blocker,
        permissions: vec![PermissionId::new("INTERNET").unwrap()],
        embeds: None,
    });
    s.blocker_fraction = 0.40;
    s.with_strategy("blocker", Strategy::BlankProxy)
}

fn blocking_detection() -> Outcome {
    let s = blocker_scenario(10_000, 66);
    let r = fraudbench::run_scenario(&s).map_err(|e| e.to_string())?;
    ensure!(r.blockers_present == 4_000, "blockers_present {}", r.blockers_present);
    ensure!(r.blockers_detected == 4_000, "blockers_detected {}", r.blockers_detected);
    ensure!(r.accepted_clicks == 6_000, "accepted {}", r.accepted_clicks);
    Ok(format!(
        "present {} detected {}, {} unblocked users paid",
        r.blockers_present, r.blockers_detected, r.accepted_clicks
    ))
}

fn fault_isolation() -> Outcome {
    let base = Scenario::basic(300, 77).with_strategy("host", Strategy::DeputyEscalation);
    let baseline = fraudbench::run_detailed(&base, 4).map_err(|e| e.to_string())?;
    let mut details = Vec::new();
    for at_step in [0, 150] {
        let crashed = inject_crash(&base, "ad", at_step).map_err(|e| e.to_string())?;
        let run = fraudbench::run_detailed(&crashed, 4).map_err(|e| e.to_string())?;
        ensure!(
            run.host_log_jsonl().as_bytes() == baseline.host_log_jsonl().as_bytes(),
            "host log differs with ad crashed at step {at_step}"
        );
        ensure!(run.report.crash_survivals == 1, "crash_survivals {}", run.report.crash_survivals);
        ensure!(
            run.report.accepted_clicks == at_step,
            "crash at {at_step}: {} clicks paid",
            run.report.accepted_clicks
        );
        details.push(format!("crash@{at_step}"));
    }
    Ok(format!(
        "{} host log lines byte-identical to baseline ({})",
        baseline.host_log.len(),
        details.join(", ")
    ))
}

fn determinism() -> Outcome {
    let mut mixed = blocker_scenario(80, 5);
    mixed.blocker_fraction = 0.25;
    mixed = mixed.with_strategy("ad", Strategy::ReplayClick).with_strategy("host", Strategy::DeputyEscalation);
    let scenarios = [
        ("honest", Scenario::basic(80, 1)),
        ("forge", Scenario::basic(80, 2).with_strategy("host", Strategy::ForgeClick)),
        ("hidden", Scenario::basic(80, 3).with_strategy("ad", Strategy::HiddenDisplay)),
        ("crash", inject_crash(&Scenario::basic(80, 4), "ad", 40).map_err(|e| e.to_string())?),
        ("mixed", mixed),
    ];
    let many = fraudbench::default_workers().max(4);
    for (name, s) in &scenarios {
        let reference = fraudbench::run_detailed(s, 1).map_err(|e| e.to_string())?;
        for run in 0..20 {
            let workers = if run % 2 == 0 { 1 } else { many };
            let again = fraudbench::run_detailed(s, workers).map_err(|e| e.to_string())?;
            ensure!(
                again.report.to_json() == reference.report.to_json(),
                "{name} run {run} ({workers} workers) report differs"
            );
            ensure!(
                again.host_log_jsonl() == reference.host_log_jsonl(),
                "{name} run {run} ({workers} workers) host log differs"
            );
        }
    }
    Ok(format!("5 scenarios x 20 runs byte-identical at 1 and {many} workers"))
}

/// Recomputes a bloat report with nothing but linear scans over vectors.
fn brute_force(corpus: &[AppRecord], profiles: &[LibraryProfile]) -> BloatReport {
    let mut report = BloatReport::default();
    for app in corpus {
        let mut attr = permtool::AppAttribution::default();
        for p in &app.permissions {
            let by_lib = app.libraries.iter().any(|lib| {
                profiles
                    .iter()
                    .filter(|prof| &prof.library_id == lib)
                    .any(|prof| prof.required.iter().any(|r| r == p))
            });
            if by_lib {
                attr.attributable.insert(p.clone());
                *report.histogram.entry(p.clone()).or_default() += 1;
            } else {
                attr.residual.insert(p.clone());
            }
        }
        if attr.residual.is_empty() && !attr.attributable.is_empty() {
            report.ad_only_apps += 1;
        }
        report.per_app.insert(app.app_id.clone(), attr);
    }
    report
}

fn partition_holds(corpus: &[AppRecord], report: &BloatReport) -> bool {
    corpus.iter().all(|app| {
        let a = &report.per_app[&app.app_id];
        a.attributable.is_disjoint(&a.residual)
            && a.attributable.union(&a.residual).cloned().collect::<BTreeSet<_>>() == app.permissions
    })
}

fn permtool_oracle() -> Outcome {
    let mut profiles = permtool::builtin_profiles();
    let mut corpus = permtool::synth_corpus(100, &profiles, 99);
    let report = permtool::attribute(&corpus, &profiles).map_err(|e| e.to_string())?;
    ensure!(report == brute_force(&corpus, &profiles), "report differs from brute force");
    ensure!(partition_holds(&corpus, &report), "partition law broken on the base corpus");

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let universe: Vec<PermissionId> = common::UNIVERSE
        .iter()
        .chain(["ACCESS_NETWORK_STATE", "READ_PHONE_STATE", "BLUETOOTH"].iter())
        .map(|p| PermissionId::new(*p).unwrap())
        .collect();
    let mut before = report;
    for step in 0..1_000 {
        let perm = universe.choose(&mut rng).unwrap().clone();
        let app = rng.gen_range(0..corpus.len());
        let lib = profiles.choose(&mut rng).unwrap().library_id.clone();
        let prof = rng.gen_range(0..profiles.len());
        // 0..=1 only grow library coverage; 2..=3 only shrink it; 4 changes
        // an app's own request set.
        let op = rng.gen_range(0..5);
        match op {
            0 => {
                corpus[app].libraries.insert(lib);
            }
            1 => {
                profiles[prof].required.insert(perm.clone());
            }
            2 => {
                corpus[app].libraries.remove(&lib);
            }
            3 => {
                profiles[prof].required.remove(&perm);
            }
            _ => {
                if !corpus[app].permissions.remove(&perm) {
                    corpus[app].permissions.insert(perm.clone());
                }
            }
        }
        let after = permtool::attribute(&corpus, &profiles).map_err(|e| format!("step {step}: {e}"))?;
        ensure!(after == brute_force(&corpus, &profiles), "step {step}: differs from brute force");
        ensure!(partition_holds(&corpus, &after), "step {step}: partition law broken");
        if op <= 3 {
            for a in &corpus {
                let (old, new) = (&before.per_app[&a.app_id].attributable, &after.per_app[&a.app_id].attributable);
                let ok = if op <= 1 { old.is_subset(new) } else { new.is_subset(old) };
                ensure!(ok, "step {step} op {op}: monotonicity broken for {}", a.app_id);
            }
        }
        before = after;
    }
    Ok("100-app corpus matches brute force; partition and monotonicity hold over 1000 mutations".into())
}

fn performance() -> Outcome {
    let s = Scenario::basic(10_000, 1010);
    let start = Instant::now();
    let r = fraudbench::run_scenario(&s).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure!(r.accepted_clicks == 10_000, "accepted {}", r.accepted_clicks);
    ensure!(elapsed < Duration::from_secs(30), "took {}", secs(elapsed));
    Ok(format!("10000 users x 1 click in {}", secs(elapsed)))
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 10] = [
        ("soundness", soundness),
        ("completeness", completeness),
        ("chain-fuzz", chain_fuzz),
        ("intersection-oracle", intersection_oracle),
        ("replay", replay),
        ("blocking-detection", blocking_detection),
        ("fault-isolation", fault_isolation),
        ("determinism", determinism),
        ("permtool-oracle", permtool_oracle),
        ("performance", performance),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS [{}] {name}: {detail}", i + 1),
            Err(why) => {
                println!("FAIL [{}] {name}: {why}", i + 1);
                failed.push(*name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
