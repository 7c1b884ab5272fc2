use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::principals::{PermissionId, PrincipalKind};
use crate::uievents::DEFAULT_FRESHNESS_MS;

/// Name that always refers to the monitor's own System principal.
pub const SYSTEM_NAME: &str = "system";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("unknown principal {0:?}")]
    UnknownPrincipal(String),
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::InvalidScenario(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub enum Strategy {
    #[default]
    Honest,
    ForgeClick,
    ReplayClick,
    BlankProxy,
    HiddenDisplay,
    DeputyEscalation,
}

impl Strategy {
    fn allowed_for(self, kind: PrincipalKind) -> bool {
        use PrincipalKind::*;
        match self {
            Strategy::Honest => true,
            Strategy::ForgeClick | Strategy::ReplayClick | Strategy::HiddenDisplay => matches!(kind, Host | Ad),
            Strategy::BlankProxy => kind == Blocker,
            Strategy::DeputyEscalation => kind == Host,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrincipalSpec {
    pub name: String,
    pub kind: PrincipalKind,
    #[serde(default)]
    pub permissions: Vec<PermissionId>,
    /// For hosts: the ad principal embedded in this host. Defaults to the
    /// first ad principal listed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeds: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashSpec {
    pub principal: String,
    pub at_step: u64,
}

fn default_clicks() -> u64 {
    1
}

fn default_freshness() -> u64 {
    DEFAULT_FRESHNESS_MS
}

fn default_replays() -> u64 {
    2
}

/// A seeded adversarial experiment. Each of the `n_users` users runs its own
/// simulated device; user `u` is scheduler step `u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub principals: Vec<PrincipalSpec>,
    /// Principal name → strategy; unlisted principals are Honest.
    #[serde(default)]
    pub strategies: BTreeMap<String, Strategy>,
    pub n_users: u64,
    #[serde(default)]
    pub blocker_fraction: f64,
    #[serde(default = "default_clicks")]
    pub clicks_per_user: u64,
    #[serde(default = "default_freshness")]
    pub freshness_ms: u64,
    #[serde(default)]
    pub seed: u64,
    /// Submissions per click under ReplayClick.
    #[serde(default = "default_replays")]
    pub replay_multiplicity: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub crashes: Vec<CrashSpec>,
}

impl Scenario {
    /// One host embedding one ad, both holding INTERNET, everyone Honest.
    pub fn basic(n_users: u64, seed: u64) -> Self {
        let internet = PermissionId::new("INTERNET").expect("constant");
        Self {
            principals: vec![
                PrincipalSpec {
                    name: "host".into(),
                    kind: PrincipalKind::Host,
                    permissions: vec![internet.clone()],
                    embeds: Some("ad".into()),
                },
                PrincipalSpec {
                    name: "ad".into(),
                    kind: PrincipalKind::Ad,
                    permissions: vec![internet, PermissionId::new("FINE_LOCATION").expect("constant")],
                    embeds: None,
                },
            ],
            strategies: BTreeMap::new(),
            n_users,
            blocker_fraction: 0.0,
            clicks_per_user: 1,
            freshness_ms: DEFAULT_FRESHNESS_MS,
            seed,
            replay_multiplicity: default_replays(),
            crashes: Vec::new(),
        }
    }

    pub fn with_strategy(mut self, principal: &str, strategy: Strategy) -> Self {
        self.strategies.insert(principal.to_owned(), strategy);
        self
    }

    pub fn strategy(&self, principal: &str) -> Strategy {
        self.strategies.get(principal).copied().unwrap_or_default()
    }

    pub fn spec(&self, name: &str) -> Option<&PrincipalSpec> {
        self.principals.iter().find(|p| p.name == name)
    }

    /// The ad principal a host embeds.
    pub fn embedded_ad(&self, host: &PrincipalSpec) -> Option<&PrincipalSpec> {
        match &host.embeds {
            Some(name) => self.spec(name).filter(|p| p.kind == PrincipalKind::Ad),
            None => self.principals.iter().find(|p| p.kind == PrincipalKind::Ad),
        }
    }

    pub fn hosts(&self) -> impl Iterator<Item = &PrincipalSpec> {
        self.principals.iter().filter(|p| p.kind == PrincipalKind::Host)
    }

    /// Exact blocker count: floor(blocker_fraction · n_users).
    pub fn blocker_count(&self) -> u64 {
        (self.blocker_fraction * self.n_users as f64).floor() as u64
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(0.0..=1.0).contains(&self.blocker_fraction) {
            return Err(invalid(format!("blocker_fraction {} outside [0, 1]", self.blocker_fraction)));
        }
        if self.replay_multiplicity == 0 {
            return Err(invalid("replay_multiplicity must be at least 1"));
        }
        let mut names = BTreeSet::new();
        for p in &self.principals {
            if p.name.is_empty() {
                return Err(invalid("principal name must be non-empty"));
            }
            if p.name == SYSTEM_NAME || p.kind == PrincipalKind::System {
                return Err(invalid("the System principal is implicit and cannot be declared"));
            }
            if !names.insert(p.name.as_str()) {
                return Err(invalid(format!("duplicate principal name {:?}", p.name)));
            }
        }
        if self.hosts().next().is_none() {
            return Err(invalid("scenario needs at least one Host principal"));
        }
        for host in self.hosts() {
            if self.embedded_ad(host).is_none() {
                return Err(invalid(format!("host {:?} does not embed an Ad principal", host.name)));
            }
        }
        for p in &self.principals {
            if p.embeds.is_some() && p.kind != PrincipalKind::Host {
                return Err(invalid(format!("only hosts embed ads, {:?} is {:?}", p.name, p.kind)));
            }
        }
        for (name, strategy) in &self.strategies {
            let spec = self
                .spec(name)
                .ok_or_else(|| ScenarioError::UnknownPrincipal(name.clone()))?;
            if !strategy.allowed_for(spec.kind) {
                return Err(invalid(format!("strategy {strategy:?} does not apply to {:?} principal {name:?}", spec.kind)));
            }
        }
        for crash in &self.crashes {
            if crash.principal == SYSTEM_NAME {
                return Err(invalid("the System principal is the monitor and cannot crash"));
            }
            if self.spec(&crash.principal).is_none() {
                return Err(ScenarioError::UnknownPrincipal(crash.principal.clone()));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Returns a copy of `s` in which `principal` stops responding from step
/// `at_step` onwards.
pub fn inject_crash(s: &Scenario, principal: &str, at_step: u64) -> Result<Scenario, ScenarioError> {
    if principal == SYSTEM_NAME {
        return Err(invalid("the System principal is the monitor and cannot crash"));
    }
    if s.spec(principal).is_none() {
        return Err(ScenarioError::UnknownPrincipal(principal.to_owned()));
    }
    let mut out = s.clone();
    out.crashes.push(CrashSpec {
        principal: principal.to_owned(),
        at_step,
    });
    Ok(out)
}
