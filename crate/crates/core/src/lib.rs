//! Reference-monitor simulator for privilege-separated mobile advertising.
//!
//! Host applications and their ad libraries run as separate principals. The
//! monitor ([`monitor::Monitor`]) mediates IPC with MAC-signed call chains,
//! attests genuine input events, and records what is actually displayed, so a
//! remote ad server can tell real clicks from forged ones and detect
//! blank-proxy ad blockers. [`fraudbench`] drives seeded adversarial
//! scenarios against the whole stack; [`permtool`] measures permission bloat
//! over app-manifest corpora.

pub mod adchannel;
pub mod cli;
pub mod crypto;
pub mod fraudbench;
pub mod ipcbus;
pub mod monitor;
pub mod permtool;
pub mod principals;
pub mod uievents;

pub use adchannel::{AdServer, ClickReport, RejectReason, Verdict};
pub use monitor::{Monitor, MonitorConfig, Session};
pub use principals::{PermissionId, PermissionManifest, Principal, PrincipalId, PrincipalKind};
