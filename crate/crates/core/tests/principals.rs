use std::collections::{BTreeMap, BTreeSet};

use adshield::principals::{perms, DelegationId, PrincipalError, RegistryDump};
use adshield::{Monitor, PermissionId, PermissionManifest, PrincipalId, PrincipalKind};
use proptest::prelude::*;

const POOL: &[&str] = &["INTERNET", "FINE_LOCATION", "CAMERA", "READ_CONTACTS", "VIBRATE"];

#[derive(Debug, Clone)]
enum Op {
    Delegate { grantor: usize, grantee: usize, perm: usize },
    Revoke(usize),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0..6usize, 0..6usize, 0..POOL.len()).prop_map(|(grantor, grantee, perm)| Op::Delegate { grantor, grantee, perm }),
        (0..16usize).prop_map(Op::Revoke),
    ]
}

fn world(seed: u64, manifests: &[Vec<bool>]) -> (Monitor, Vec<PrincipalId>) {
    let m = Monitor::with_seed("props", seed);
    let ids = manifests
        .iter()
        .enumerate()
        .map(|(i, mask)| {
            let kind = if i % 2 == 0 { PrincipalKind::Host } else { PrincipalKind::Ad };
            let names = POOL.iter().zip(mask).filter(|(_, on)| **on).map(|(p, _)| *p);
            m.install(PermissionManifest::new(perms(names)), kind).unwrap().id
        })
        .collect();
    (m, ids)
}

/// Granted sets rebuilt from nothing but a dump's manifests and ledger.
fn replay_ledger(dump: &RegistryDump) -> BTreeMap<PrincipalId, BTreeSet<String>> {
    let mut out: BTreeMap<PrincipalId, BTreeSet<String>> = dump
        .principals
        .iter()
        .filter(|p| p.kind != PrincipalKind::System)
        .map(|p| (p.id.clone(), p.manifest.requested.iter().map(|x| x.as_str().to_owned()).collect()))
        .collect();
    for t in dump.delegations.iter().filter(|t| !t.revoked) {
        out.get_mut(&t.grantee).unwrap().insert(t.permission.as_str().to_owned());
    }
    out
}

fn granted(m: &Monitor, ids: &[PrincipalId]) -> BTreeMap<PrincipalId, BTreeSet<String>> {
    ids.iter()
        .map(|id| {
            let set = POOL
                .iter()
                .filter(|p| m.grant_check(id, &PermissionId::new(**p).unwrap()).unwrap())
                .map(|p| p.to_string())
                .collect();
            (id.clone(), set)
        })
        .collect()
}

fn subset_everywhere(small: &BTreeMap<PrincipalId, BTreeSet<String>>, big: &BTreeMap<PrincipalId, BTreeSet<String>>) -> bool {
    small.iter().all(|(id, s)| s.is_subset(&big[id]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn ledger_replay_matches_grant_check(
        seed in any::<u64>(),
        manifests in proptest::collection::vec(proptest::collection::vec(any::<bool>(), POOL.len()), 2..6),
        ops in proptest::collection::vec(op(), 0..24),
    ) {
        let (m, ids) = world(seed, &manifests);
        let mut tokens: Vec<DelegationId> = Vec::new();
        for op in ops {
            let before = granted(&m, &ids);
            match op {
                Op::Delegate { grantor, grantee, perm } => {
                    let (g, r) = (&ids[grantor % ids.len()], &ids[grantee % ids.len()]);
                    match m.delegate(g, r, PermissionId::new(POOL[perm]).unwrap()) {
                        Ok(t) => tokens.push(t.token_id),
                        Err(PrincipalError::KindMismatch { .. } | PrincipalError::NotHeldByGrantor { .. }) => {}
                        Err(e) => prop_assert!(false, "unexpected {e}"),
                    }
                    // Granting never takes anything away.
                    prop_assert!(subset_everywhere(&before, &granted(&m, &ids)));
                }
                Op::Revoke(i) => {
                    if let Some(t) = tokens.get(i % tokens.len().max(1)) {
                        m.revoke(t).unwrap();
                    }
                    // Revoking never adds anything.
                    prop_assert!(subset_everywhere(&granted(&m, &ids), &before));
                }
            }
            prop_assert_eq!(granted(&m, &ids), replay_ledger(&m.registry_dump()));
        }
    }

    #[test]
    fn delegation_never_exceeds_grantor_manifest(
        seed in any::<u64>(),
        manifests in proptest::collection::vec(proptest::collection::vec(any::<bool>(), POOL.len()), 2..6),
        ops in proptest::collection::vec(op(), 0..24),
    ) {
        let (m, ids) = world(seed, &manifests);
        for op in ops {
            if let Op::Delegate { grantor, grantee, perm } = op {
                let _ = m.delegate(&ids[grantor % ids.len()], &ids[grantee % ids.len()], PermissionId::new(POOL[perm]).unwrap());
            }
        }
        let dump = m.registry_dump();
        let by_id: BTreeMap<_, _> = dump.principals.iter().map(|p| (&p.id, p)).collect();
        for t in &dump.delegations {
            prop_assert_eq!(by_id[&t.grantor].kind, PrincipalKind::Host);
            prop_assert_eq!(by_id[&t.grantee].kind, PrincipalKind::Ad);
            prop_assert!(by_id[&t.grantor].manifest.contains(&t.permission));
        }
    }
}

#[test]
fn dump_round_trips_through_json() {
    let (m, ids) = world(3, &[vec![true; 5], vec![false; 5]]);
    let t = m.delegate(&ids[0], &ids[1], PermissionId::new("CAMERA").unwrap()).unwrap();
    m.revoke(&t.token_id).unwrap();
    let dump = m.registry_dump();
    let text = serde_json::to_string(&dump).unwrap();
    assert!(!text.contains("key\""), "dump must not carry key material: {text}");
    assert_eq!(serde_json::from_str::<RegistryDump>(&text).unwrap(), dump);
    assert!(dump.delegations[0].revoked);
}

#[test]
fn revoking_twice_is_harmless_and_unknown_tokens_are_errors() {
    let (m, ids) = world(4, &[vec![true; 5], vec![false; 5]]);
    let t = m.delegate(&ids[0], &ids[1], PermissionId::new("VIBRATE").unwrap()).unwrap();
    m.revoke(&t.token_id).unwrap();
    m.revoke(&t.token_id).unwrap();
    assert!(matches!(m.revoke(&DelegationId::new("dlg-999")), Err(PrincipalError::UnknownToken(_))));
}
