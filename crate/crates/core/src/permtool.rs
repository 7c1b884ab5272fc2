//! Permission-bloat analysis over app-manifest corpora.
//!
//! A requested permission is *attributable* to an app's ad libraries when at
//! least one linked library requires it; everything else is *residual*.
//! Manifests alone cannot tell whether the app itself also needs an
//! attributable permission, so attribution is an upper bound on bloat.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::principals::{perms, PermissionId};

#[derive(Debug, Error)]
pub enum PermtoolError {
    #[error("app {app} links unknown library {library}")]
    UnknownLibrary { app: String, library: String },
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppRecord {
    pub app_id: String,
    pub permissions: BTreeSet<PermissionId>,
    #[serde(default)]
    pub libraries: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LibraryProfile {
    pub library_id: String,
    pub required: BTreeSet<PermissionId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppAttribution {
    pub attributable: BTreeSet<PermissionId>,
    pub residual: BTreeSet<PermissionId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BloatReport {
    pub per_app: BTreeMap<String, AppAttribution>,
    /// Apps whose every permission is attributable (and at least one is).
    pub ad_only_apps: u64,
    /// Permission → number of apps in which it is attributable.
    pub histogram: BTreeMap<PermissionId, u64>,
}

impl BloatReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Illustrative ad and analytics library profiles.
pub fn builtin_profiles() -> Vec<LibraryProfile> {
    let p = |id: &str, req: &[&str]| LibraryProfile {
        library_id: id.to_owned(),
        required: perms(req),
    };
    vec![
        p("adlib-banner", &["INTERNET", "ACCESS_NETWORK_STATE"]),
        p("adlib-geo", &["INTERNET", "ACCESS_NETWORK_STATE", "FINE_LOCATION", "COARSE_LOCATION"]),
        p("adlib-social", &["INTERNET", "READ_CONTACTS", "READ_PHONE_STATE"]),
        p("adlib-video", &["INTERNET", "ACCESS_NETWORK_STATE", "WAKE_LOCK"]),
        p("analytics-lite", &["INTERNET", "READ_PHONE_STATE"]),
    ]
}

pub fn attribute(corpus: &[AppRecord], profiles: &[LibraryProfile]) -> Result<BloatReport, PermtoolError> {
    let index: HashMap<&str, &BTreeSet<PermissionId>> = profiles
        .iter()
        .map(|p| (p.library_id.as_str(), &p.required))
        .collect();

    let per_app: Vec<(String, AppAttribution)> = corpus
        .par_iter()
        .map(|app| {
            let mut lib_perms = BTreeSet::new();
            for lib in &app.libraries {
                let req = index.get(lib.as_str()).ok_or_else(|| PermtoolError::UnknownLibrary {
                    app: app.app_id.clone(),
                    library: lib.clone(),
                })?;
                lib_perms.extend(req.iter().cloned());
            }
            let (attributable, residual) = app
                .permissions
                .iter()
                .cloned()
                .partition(|p| lib_perms.contains(p));
            Ok((app.app_id.clone(), AppAttribution { attributable, residual }))
        })
        .collect::<Result<_, PermtoolError>>()?;

    let mut report = BloatReport::default();
    for (app_id, attr) in per_app {
        if attr.residual.is_empty() && !attr.attributable.is_empty() {
            report.ad_only_apps += 1;
        }
        for p in &attr.attributable {
            *report.histogram.entry(p.clone()).or_default() += 1;
        }
        report.per_app.insert(app_id, attr);
    }
    Ok(report)
}

/// Permissions apps commonly request for their own features.
const APP_PERMISSIONS: &[&str] = &[
    "INTERNET",
    "CAMERA",
    "RECORD_AUDIO",
    "VIBRATE",
    "WRITE_EXTERNAL_STORAGE",
    "FINE_LOCATION",
    "READ_CONTACTS",
    "BLUETOOTH",
];

/// Deterministic synthetic corpus. Every app links 0–2 libraries from
/// `library_pool` and requests most of what they require plus a few
/// permissions of its own.
pub fn synth_corpus(n_apps: usize, library_pool: &[LibraryProfile], seed: u64) -> Vec<AppRecord> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let own = perms(APP_PERMISSIONS.iter().copied());
    let own: Vec<PermissionId> = own.into_iter().collect();
    (0..n_apps)
        .map(|i| {
            let n_libs = if library_pool.is_empty() { 0 } else { rng.gen_range(0..=2.min(library_pool.len())) };
            let libs: Vec<&LibraryProfile> = library_pool.choose_multiple(&mut rng, n_libs).collect();
            let mut permissions = BTreeSet::new();
            for lib in &libs {
                for p in &lib.required {
                    if rng.gen_bool(0.85) {
                        permissions.insert(p.clone());
                    }
                }
            }
            let n_own = rng.gen_range(0..=3);
            permissions.extend(own.choose_multiple(&mut rng, n_own).cloned());
            AppRecord {
                app_id: format!("app-{i:05}"),
                permissions,
                libraries: libs.iter().map(|l| l.library_id.clone()).collect(),
            }
        })
        .collect()
}

pub fn write_corpus<W: Write>(corpus: &[AppRecord], mut out: W) -> Result<(), PermtoolError> {
    for app in corpus {
        serde_json::to_writer(&mut out, app)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads JSON-lines; blank lines are skipped.
pub fn read_corpus<R: BufRead>(input: R) -> Result<Vec<AppRecord>, PermtoolError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| PermtoolError::Parse { line: i + 1, source })?);
    }
    Ok(out)
}

pub fn read_profiles(text: &str) -> Result<Vec<LibraryProfile>, PermtoolError> {
    Ok(serde_json::from_str(text)?)
}
