//! Non-autonomous equation discovery: time signals are classified by using
//! them as the forcing of a hidden-state ODE whose vector field is a learned
//! combination of dictionary functions, read out through a softmax layer.

pub mod cli;
pub mod datagen;
pub mod dataio;
pub mod dictionary;
pub mod error;
pub mod gradients;
pub mod integrator;
pub mod model;
pub mod portrait;
pub mod signal;
pub mod stability;
pub mod trainer;

pub use dictionary::{DictionaryKind, DictionarySpec};
pub use error::{NaedError, Result};
pub use integrator::SolverConfig;
pub use model::{Matrix, Parameters};
pub use signal::{Dataset, TimeSeries};
