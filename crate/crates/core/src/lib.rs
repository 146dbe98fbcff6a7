//! Simulation lab for the hierarchical Anderson–Bernoulli operator
//! H = 2d − Δ + V_hi + βω on finite boxes of Z^d.

pub mod error;
pub mod lattice;
pub mod linalg;
pub mod operator;
pub mod potential;
pub mod rng;
pub mod schur;
pub mod experiments;
pub mod spectral;
pub mod stats;
pub mod transversality;

pub use error::{Error, Result};
pub use lattice::{LatticeBox, ScaleLadder, Site, SiteSet};
pub use operator::{BoxOperator, GreenSolver, ModelParams};
pub use potential::{DisorderConfig, HierarchicalPotential, HierarchyParams};
