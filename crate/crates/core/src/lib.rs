pub mod env;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod learners;
pub mod nnet;
pub mod oracle;
pub mod rnd;
pub mod shaping;
pub mod textio;
pub mod tmdp;

pub use error::{Error, Result};
