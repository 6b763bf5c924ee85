//! Harmonic map heat flow into Lorentzian warped products `N × R` on the unit
//! square: discrete calculus, target geometry, the elliptic constraint, the
//! coupled flow with its energy ledger, blow-up diagnostics and the scenario
//! harness.

pub mod diagnostics;
pub mod elliptic;
pub mod error;
pub mod flow;
pub mod grid;
pub mod harness;
pub mod io;
pub mod scenario;
pub mod target;

pub use error::{Error, Result};
