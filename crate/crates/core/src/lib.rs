//! Group-adaptive ridge GLMs with co-data.

pub mod codata;
pub mod error;
pub mod estimator;
pub mod glm;
pub mod hypershrinkage;
pub mod linalg;
pub mod mom;
pub mod selection;

pub use codata::{CoDataMatrix, GroupSplit, Grouping, HierTree, HierarchyOptions};
pub use error::{EcpcError, Result};
pub use estimator::{fit_ecpc, predict, CoDataSource, EcpcOptions, FittedModel};
pub use glm::{Family, PenaltyState, Response, RidgeFit};
pub use hypershrinkage::{GroupWeights, HyperKind, HyperPenalty};
pub use mom::{MomentCore, MomentSystem};
