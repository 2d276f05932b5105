//! Multi-start team orienteering: instances, the routing MDP, exact and
//! heuristic solvers, the DDTM attention policy, REINFORCE training and
//! decoding strategies.

pub mod ddtm;
pub mod env;
pub mod error;
pub mod inference;
pub mod instance;
pub mod oracle;
pub mod seeds;
pub mod trainer;

pub use error::{CoreError, Result};
