//! Simulation and analysis toolkit for rf-driven transport of molecular
//! quantum states through magnetically tunable avoided-crossing manifolds.
//!
//! The crate is organized around the life cycle of a transport experiment:
//!
//! - [`manifold`] — the level map: bare molecular levels linear in magnetic
//!   field, the avoided crossings between them, config file ingestion.
//! - [`crossing`] — closed-form two-level algebra for a single avoided
//!   crossing: dressed energies, mixing angle, rf transition moment, and the
//!   geometry of rf-induced crossings.
//! - [`dynamics`] — time-dependent Schrödinger propagation of a state under
//!   programmed field ramps and rf pulses, the analytic Landau-Zener
//!   reference, and the adiabatic-transfer-across-a-crossing (ATAC) protocol.
//! - [`spectroscopy`] — the two splitting-measurement methods (resonant
//!   scans and Ramsey interferometry), hyperbola fitting, and field-noise
//!   averaging.
//! - [`planner`] — compilation of a route through the crossing graph into an
//!   executable pulse schedule with per-crossing action selection and
//!   survival estimation.
//!
//! # Units
//!
//! One unit system is used everywhere, chosen so that no ħ bookkeeping is
//! ever needed (see [`units`]): magnetic field in gauss, energies as E/h in
//! MHz, magnetic moments in MHz/G, schedule durations in ms, dynamics time
//! in µs, angular frequencies in rad/µs. A quantum phase is then simply
//! 2π · f[MHz] · t[µs].

pub mod crossing;
pub mod dynamics;
pub mod fit;
pub mod io;
pub mod manifold;
pub mod planner;
pub mod spectroscopy;
pub mod units;

pub use crossing::CrossingFrame;
pub use manifold::{load_manifold, LevelManifold};
