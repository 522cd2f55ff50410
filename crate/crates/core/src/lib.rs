//! Doubly robust off-policy evaluation and policy learning for
//! average-reward Markov decision processes with kernel nuisance estimators.

pub mod basis;
pub mod data;
pub mod dr;
pub mod error;
pub mod kernel;
pub mod lbfgs;
pub mod linalg;
pub mod nuisance;
pub mod optimize;
pub mod par;
pub mod policy;
pub mod reference;
pub mod seed;
pub mod sim;
pub mod tabular;
pub mod tuner;

pub use data::{flatten, load_dataset, validate, write_dataset, Dataset, Trajectory, TupleTable};
pub use error::{OplError, Result};
pub use kernel::KernelConfig;
pub use nuisance::{fit_ratio, fit_value, RatioFit, TuningPair, Tunings, ValueFit};
pub use policy::{FeatureMap, PolicyParams};
