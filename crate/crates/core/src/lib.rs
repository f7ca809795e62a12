//! Process matrices with indefinite causal order.
//!
//! Labeled operator algebra, process validity, QC-QC / QC-CC decompositions,
//! the constructive dephasing decompositions, and a dense SDP feasibility
//! engine deciding class membership.

pub mod error;
pub mod hilbert;
pub mod process;
pub mod classes;
pub mod switch;
pub mod constructors;
pub mod sdp;

pub use error::{Error, Result};
pub use hilbert::{BasisKind, DephasingBasis, LabeledOperator, OperatorJson, SpaceRegistry, SystemLabel};
pub use process::{check_validity, ProcessMatrix, Role, RoleMap, ValidityReport};
pub use classes::{verify_qccc, verify_qcqc, Decomposition, QcCcDecomposition, QcQcDecomposition};
pub use sdp::{qccc_membership, qcqc_membership, SolverOptions, Status, Verdict, VerdictJson};
