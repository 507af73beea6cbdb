pub mod cfdp;
pub mod error;
pub mod gmta;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod optim;
pub mod orppt;
pub mod rng;
pub mod synthdata;

pub use error::{Error, Result};
