//! Capacity-constrained optimal partition of a discretized consumer space.
//!
//! A finite set of agents with heterogeneous per-consumer profit functions
//! ("wisdoms") and limited capacities shares a weighted point cloud of
//! consumers. The library computes equilibrium prices by minimizing the
//! convex dual objective, extracts the induced partition, evaluates
//! individual values and their agent/consumer decomposition, builds the
//! coalition/partition cooperative game with core certificates, and
//! provides a closed-form fast path for multiplicative wisdom families.

pub mod closed_form;
pub mod dual;
pub mod game;
pub mod measure;
pub mod monotonicity;
pub mod oracle;
pub mod values;

pub mod cli;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use serde::{de::DeserializeOwned, Serialize};

/// Scalar type the core math is generic over. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + FromPrimitive + Sum + Debug + Display + Serialize + DeserializeOwned + Send + Sync + 'static
{
    /// Shorthand for lossy conversion of an `f64` constant (tolerances, literals).
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant representable in scalar type")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Default concrete scalar used by the CLI, generators and file I/O.
pub type Real = f64;

pub type Instance = measure::ProblemInstance<Real>;
pub type Measure = measure::DiscreteMeasure<Real>;
pub type Wisdoms = measure::WisdomMatrix<Real>;
pub type Capacities = measure::CapacityVector<Real>;
pub type Prices = dual::PriceVector<Real>;
pub type Plan = oracle::TransportPlan<Real>;
pub type Game = game::CoalitionGame<Real>;
pub type Model = closed_form::ClosedFormModel<Real>;
