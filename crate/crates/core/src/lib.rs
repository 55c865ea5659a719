//! Multi-entity Bayesian network (MEBN) engine.
//!
//! Knowledge is declared as MFrags (parameterised network fragments) collected
//! into an [`MTheory`](model::MTheory). A theory is checked by
//! [`validate`](validate::validate), grounded into a situation-specific
//! Bayesian network for a query by [`build_ssbn`](ground::build_ssbn), and
//! answered exactly by variable elimination ([`infer`]), with brute-force
//! enumeration available as an independent oracle.
//!
//! The crate is `no_std` and needs only `alloc`. Text formats, JSON and the
//! command-line front end live in the companion `mebn` crate.

#![no_std]

extern crate alloc;

pub mod error;
pub mod ground;
pub mod infer;
pub mod ldl;
pub mod logic;
pub mod model;
pub mod validate;

pub use error::{Error, Result};
pub use ground::{build_ssbn, prune_ssbn, GroundingLimits, NodeKey, Ssbn};
pub use infer::{answer_query, brute_force_posterior, eliminate, Posterior, Query, QueryResult};
pub use ldl::{InfluenceCounts, LocalExpr, ProbabilityVector};
pub use logic::ThreeValued;
pub use model::{
    EntityRegistry, Evidence, Finding, Formula, Ident, MFrag, MTheory, RvInstance, RvTemplate, RvTerm, StateSpace,
    TypeName,
};
pub use validate::{validate, ValidatedMTheory, ValidationReport};
