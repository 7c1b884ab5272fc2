//! Oracles and fixtures shared by the integration tests. The oracles work on
//! plain strings and never call into the code they check.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use adshield::ipcbus::{CallChain, Statement};
use adshield::principals::{perms, PermissionManifest, PrincipalKind};
use adshield::{Monitor, PrincipalId};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const UNIVERSE: &[&str] = &[
    "INTERNET",
    "FINE_LOCATION",
    "COARSE_LOCATION",
    "CAMERA",
    "READ_CONTACTS",
    "RECORD_AUDIO",
    "WAKE_LOCK",
    "VIBRATE",
];

pub fn names(set: &BTreeSet<adshield::PermissionId>) -> BTreeSet<String> {
    set.iter().map(|p| p.as_str().to_owned()).collect()
}

/// A monitor with random principals, manifests and delegations, a random
/// speaker sequence that has been sent as one call chain, and the
/// permissions that chain should carry.
pub struct ChainInstance {
    pub monitor: Monitor,
    pub chain: CallChain,
    pub speakers: Vec<PrincipalId>,
    pub expected: BTreeSet<String>,
}

pub fn random_chain_instance(seed: u64) -> ChainInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let monitor = Monitor::with_seed(format!("oracle-{seed}"), seed);
    let system = monitor.system().id;

    let mut kinds: BTreeMap<PrincipalId, PrincipalKind> = BTreeMap::new();
    let mut granted: BTreeMap<PrincipalId, BTreeSet<String>> = BTreeMap::new();
    let mut manifests: BTreeMap<PrincipalId, BTreeSet<String>> = BTreeMap::new();
    let mut known: BTreeSet<String> = BTreeSet::new();

    for _ in 0..rng.gen_range(1..=5) {
        let kind = *[PrincipalKind::Host, PrincipalKind::Ad, PrincipalKind::Blocker]
            .choose(&mut rng)
            .unwrap();
        let chosen: BTreeSet<String> = UNIVERSE
            .iter()
            .filter(|_| rng.gen_bool(0.5))
            .map(|s| s.to_string())
            .collect();
        let p = monitor
            .install(PermissionManifest::new(perms(chosen.iter().map(String::as_str))), kind)
            .unwrap();
        known.extend(chosen.iter().cloned());
        kinds.insert(p.id.clone(), kind);
        manifests.insert(p.id.clone(), chosen.clone());
        granted.insert(p.id, chosen);
    }

    let ids: Vec<PrincipalId> = kinds.keys().cloned().collect();
    let mut live = Vec::new();
    for _ in 0..rng.gen_range(0..4) {
        let grantor = ids.choose(&mut rng).unwrap().clone();
        let grantee = ids.choose(&mut rng).unwrap().clone();
        let perm = *UNIVERSE.choose(&mut rng).unwrap();
        let predicted = kinds[&grantor] == PrincipalKind::Host
            && kinds[&grantee] == PrincipalKind::Ad
            && manifests[&grantor].contains(perm);
        let result = monitor.delegate(&grantor, &grantee, adshield::PermissionId::new(perm).unwrap());
        assert_eq!(result.is_ok(), predicted, "delegation outcome for {grantor}→{grantee} {perm}");
        if let Ok(token) = result {
            known.insert(perm.to_owned());
            live.push((token.token_id, grantee, perm.to_owned()));
        }
    }
    for (token, grantee, perm) in live {
        if rng.gen_bool(0.3) {
            monitor.revoke(&token).unwrap();
        } else {
            granted.get_mut(&grantee).unwrap().insert(perm);
        }
    }

    let mut pool = ids.clone();
    pool.push(system.clone());
    let speakers: Vec<PrincipalId> = (0..rng.gen_range(1..=6))
        .map(|_| pool.choose(&mut rng).unwrap().clone())
        .collect();
    let mut chain: Option<CallChain> = None;
    for (i, from) in speakers.iter().enumerate() {
        let to = speakers.get(i + 1).unwrap_or(&system);
        let msg = monitor
            .send(from, to, "oracle.hop", &(i as u64).to_be_bytes(), chain.as_ref())
            .unwrap();
        chain = Some(msg.chain);
    }

    let mut acc: Option<BTreeSet<String>> = None;
    for s in &speakers {
        if *s == system {
            continue;
        }
        let mine = &granted[s];
        acc = Some(match acc {
            None => mine.clone(),
            Some(prev) => prev.intersection(mine).cloned().collect(),
        });
    }
    ChainInstance {
        monitor,
        chain: chain.unwrap(),
        speakers,
        expected: acc.unwrap_or(known),
    }
}

/// Sends host → ad → system → host and returns the resulting 3-statement
/// chain together with its monitor.
pub fn three_hop_chain(seed: u64) -> (Monitor, CallChain) {
    let m = Monitor::with_seed("fuzz", seed);
    let host = m
        .install(PermissionManifest::new(perms(["INTERNET"])), PrincipalKind::Host)
        .unwrap();
    let ad = m
        .install(PermissionManifest::new(perms(["INTERNET", "FINE_LOCATION"])), PrincipalKind::Ad)
        .unwrap();
    let system = m.system();
    let a = m.send(&host.id, &ad.id, "show", b"banner", None).unwrap();
    let b = m.send(&ad.id, &system.id, "locate", b"fine", Some(&a.chain)).unwrap();
    let c = m.send(&system.id, &host.id, "reply", b"ok", Some(&b.chain)).unwrap();
    assert_eq!(c.chain.len(), 3);
    (m, c.chain)
}

fn flip_all(bytes: &[u8]) -> impl Iterator<Item = Vec<u8>> + '_ {
    (0..bytes.len() * 8).map(move |bit| {
        let mut out = bytes.to_vec();
        out[bit / 8] ^= 1 << (bit % 8);
        out
    })
}

fn arr(v: Vec<u8>) -> [u8; 32] {
    v.try_into().unwrap()
}

/// Every single-bit mutation of every field of every statement. Speaker
/// mutations that do not decode as UTF-8 cannot be represented and are
/// counted in the second return value instead.
pub fn single_bit_mutants(chain: &CallChain) -> (Vec<CallChain>, usize) {
    let mut out = Vec::new();
    let mut unrepresentable = 0;
    for i in 0..chain.statements.len() {
        let orig = &chain.statements[i];
        let mut push = |stmt: Statement| {
            let mut c = chain.clone();
            c.statements[i] = stmt;
            out.push(c);
        };
        for bytes in flip_all(orig.speaker.as_str().as_bytes()) {
            match String::from_utf8(bytes) {
                Ok(s) => push(Statement {
                    speaker: PrincipalId::new(s),
                    ..orig.clone()
                }),
                Err(_) => unrepresentable += 1,
            }
        }
        for bytes in flip_all(&orig.counter.to_be_bytes()) {
            push(Statement {
                counter: u64::from_be_bytes(bytes.try_into().unwrap()),
                ..orig.clone()
            });
        }
        for bytes in flip_all(&orig.payload_digest) {
            push(Statement {
                payload_digest: arr(bytes),
                ..orig.clone()
            });
        }
        for bytes in flip_all(&orig.prev_mac) {
            push(Statement {
                prev_mac: arr(bytes),
                ..orig.clone()
            });
        }
        for bytes in flip_all(&orig.mac) {
            push(Statement {
                mac: arr(bytes),
                ..orig.clone()
            });
        }
    }
    (out, unrepresentable)
}
