use std::collections::BTreeSet;

use adshield::permtool::{self, AppRecord, LibraryProfile, PermtoolError};
use adshield::principals::perms;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn lib(id: &str, req: &[&str]) -> LibraryProfile {
    LibraryProfile {
        library_id: id.into(),
        required: perms(req),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_law(n in 0..60usize, seed in any::<u64>()) {
        let profiles = permtool::builtin_profiles();
        let corpus = permtool::synth_corpus(n, &profiles, seed);
        let report = permtool::attribute(&corpus, &profiles).unwrap();
        prop_assert_eq!(report.per_app.len(), corpus.len());
        for app in &corpus {
            let a = &report.per_app[&app.app_id];
            prop_assert!(a.attributable.is_disjoint(&a.residual));
            let joined: BTreeSet<_> = a.attributable.union(&a.residual).cloned().collect();
            prop_assert_eq!(&joined, &app.permissions);
        }
        let hist_total: u64 = report.histogram.values().sum();
        let attributable_total: usize = report.per_app.values().map(|a| a.attributable.len()).sum();
        prop_assert_eq!(hist_total as usize, attributable_total);
    }

    #[test]
    fn order_independent(n in 1..60usize, seed in any::<u64>()) {
        let profiles = permtool::builtin_profiles();
        let corpus = permtool::synth_corpus(n, &profiles, seed);
        let mut shuffled = corpus.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut rev_profiles = profiles.clone();
        rev_profiles.reverse();
        prop_assert_eq!(
            permtool::attribute(&corpus, &profiles).unwrap(),
            permtool::attribute(&shuffled, &rev_profiles).unwrap()
        );
    }

    #[test]
    fn linking_a_library_never_shrinks_attribution(n in 1..40usize, seed in any::<u64>(), pick in any::<prop::sample::Index>()) {
        let profiles = permtool::builtin_profiles();
        let mut corpus = permtool::synth_corpus(n, &profiles, seed);
        let before = permtool::attribute(&corpus, &profiles).unwrap();
        let app = pick.index(corpus.len());
        let extra = &profiles[pick.index(profiles.len())];
        corpus[app].libraries.insert(extra.library_id.clone());
        let after = permtool::attribute(&corpus, &profiles).unwrap();
        for a in &corpus {
            prop_assert!(before.per_app[&a.app_id].attributable.is_subset(&after.per_app[&a.app_id].attributable));
        }
    }
}

#[test]
fn worked_example() {
    let profiles = vec![lib("ads", &["INTERNET", "FINE_LOCATION"]), lib("stats", &["READ_PHONE_STATE"])];
    let corpus = vec![
        AppRecord {
            app_id: "flashlight".into(),
            permissions: perms(["INTERNET", "FINE_LOCATION", "CAMERA"]),
            libraries: ["ads".to_string()].into(),
        },
        AppRecord {
            app_id: "wallpaper".into(),
            permissions: perms(["INTERNET", "READ_PHONE_STATE"]),
            libraries: ["ads".to_string(), "stats".to_string()].into(),
        },
    ];
    let r = permtool::attribute(&corpus, &profiles).unwrap();
    assert_eq!(r.per_app["flashlight"].residual, perms(["CAMERA"]));
    assert_eq!(r.per_app["wallpaper"].attributable, perms(["INTERNET", "READ_PHONE_STATE"]));
    assert_eq!(r.ad_only_apps, 1);
    assert_eq!(r.histogram[&adshield::PermissionId::new("INTERNET").unwrap()], 2);
    assert_eq!(r.histogram.len(), 3);
}

#[test]
fn unknown_library_names_the_app() {
    let corpus = vec![AppRecord {
        app_id: "x".into(),
        permissions: perms(["INTERNET"]),
        libraries: ["ghost".to_string()].into(),
    }];
    match permtool::attribute(&corpus, &[]) {
        Err(PermtoolError::UnknownLibrary { app, library }) => assert_eq!((app.as_str(), library.as_str()), ("x", "ghost")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn profiles_parse_from_json() {
    let text = r#"[{"library_id":"ads","required":["INTERNET"]}]"#;
    assert_eq!(permtool::read_profiles(text).unwrap(), vec![lib("ads", &["INTERNET"])]);
    assert!(permtool::read_profiles(r#"[{"library_id":"ads","required":["lower"]}]"#).is_err());
}
