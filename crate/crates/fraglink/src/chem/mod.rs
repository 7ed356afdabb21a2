//! Geometry-to-chemistry evaluation: bond perception from covalent radii,
//! molecular graphs, validity, linker extraction, canonical keys for
//! uniqueness/novelty/recovery, and steric clash counting.

pub mod canon;
pub mod elements;
pub mod graph;
pub mod metrics;

pub use canon::{canonical_form, canonical_key, CanonicalKey};
pub use elements::{ElementInfo, ElementTable};
pub use graph::{
    check_validity, count_clashes, count_rings, extract_linker, largest_connected_component,
    perceive_bonds, MoleculeGraph, DEFAULT_BOND_TOL, POSITION_MATCH_TOL,
};
pub use metrics::{evaluate_samples, EvaluationConfig, InputMetrics, MetricsReport};
