//! Coupled equilibrium of an electrified logistics operator and a power system operator.
//!
//! The logistics side schedules an e-truck fleet through a perturbed-utility MDP whose
//! rewards are designed to maximise operator profit ([`pumdp`], [`reward_design`]); the
//! grid side clears a DC optimal power flow and sets locational marginal prices
//! ([`dcopf`]). The two are coupled by a price fixed point ([`equilibrium`]) solved with
//! safeguarded Anderson acceleration ([`anderson`]).

pub mod anderson;
pub mod cli;
pub mod dcopf;
pub mod equilibrium;
pub mod error;
pub mod fixtures;
pub mod output;
pub mod pumdp;
pub mod reward_design;
pub mod scenario;

pub use error::{Error, Result};
