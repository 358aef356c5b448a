//! Inverse optimal control for discrete-time linear-quadratic regulators.

pub mod conic;
pub mod error;
pub mod estimation;
pub mod experiments;
pub mod io;
pub mod irl;
pub mod linalg;
pub mod linsys;
pub mod robust;

pub use error::{Error, Result};
