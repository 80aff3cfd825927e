//! Fixed numerical tolerances used across the crate and its tests.
//!
//! | constant              | value  | used for                                           |
//! |-----------------------|--------|----------------------------------------------------|
//! | `EXACT`               | 1e-12  | identities that hold in exact arithmetic           |
//! | `COMPOSED`            | 1e-10  | identities after several composed operations       |
//! | `EXAMPLE_LAW`         | 1e-13  | explicit 4-dim group law vs the BCH route          |
//! | `FD_STEP`             | 1e-5   | central differences for gradients and oracles      |
//! | `MIXED_FD_STEP`       | 1e-4   | second (mixed) derivative of cutoff coefficients   |
//! | `BLOWUP_NORM`         | 1e9    | coordinate norm that aborts a path                 |
//! | `EXPLOSION_PROXY_NORM`| 1e6    | coordinate norm counted by the no-explosion check  |

pub const EXACT: f64 = 1e-12;
pub const COMPOSED: f64 = 1e-10;
pub const EXAMPLE_LAW: f64 = 1e-13;
pub const FD_STEP: f64 = 1e-5;
pub const MIXED_FD_STEP: f64 = 1e-4;
pub const BLOWUP_NORM: f64 = 1e9;
pub const EXPLOSION_PROXY_NORM: f64 = 1e6;
