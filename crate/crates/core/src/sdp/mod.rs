//! QC-QC / QC-CC membership as semidefinite feasibility.
//!
//! A system is assembled from the characterization equalities, reduced
//! (see [`reduce`]), and solved as min s subject to blocks + s·𝟙 ⪰ 0. Every
//! Feasible verdict carries a point that passed `verify_*`; every Infeasible
//! verdict carries a dual certificate that was re-checked independently of
//! the solver.

pub mod certificate;
pub mod ipm;
pub mod reduce;
pub mod system;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::classes::{Decomposition, DecompositionJson, QcCcDecomposition, QcQcDecomposition};
use crate::error::Result;
use crate::hilbert::LabeledOperator;
use crate::process::ProcessMatrix;

pub use certificate::{Certificate, CertificateCheck, CertificateJson, CertificateKind};
pub use reduce::{Limits, Reduced};
pub use system::{assemble_qccc_system, assemble_qcqc_system, BlockKey, ConstraintSystem, ConstraintSystemJson, SystemKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Feasible,
    Infeasible,
    Undetermined,
}

#[derive(Clone, Copy, Debug)]
pub struct SolverOptions {
    /// Required certified margin for a verdict.
    pub tol_margin: f64,
    /// Certificate residual and equality tolerance.
    pub tol: f64,
    /// Tolerance for re-verifying a returned point.
    pub verify_tol: f64,
    pub max_iter: usize,
    pub limits: Limits,
    /// Largest null-space dimension handed to the interior-point method.
    pub max_free: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol_margin: 1e-6,
            tol: 1e-8,
            verify_tol: 1e-7,
            max_iter: 120,
            limits: Limits { max_coords: 40_000, max_component: 6_000 },
            max_free: 2_500,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Verdict {
    pub status: Status,
    /// Feasible: smallest witness eigenvalue of the returned point.
    /// Infeasible: certified lower bound on the optimal slack.
    pub margin: f64,
    pub iterations: usize,
    pub runtime_s: f64,
    pub interpretation: String,
    pub point: Option<Decomposition>,
    pub certificate: Option<CertificateJson>,
    pub n_slots: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerdictJson {
    pub status: Status,
    pub margin: f64,
    pub iterations: usize,
    pub runtime_s: f64,
    pub interpretation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate: Option<CertificateJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<DecompositionJson>,
}

impl Verdict {
    pub fn to_json(&self) -> VerdictJson {
        VerdictJson {
            status: self.status,
            margin: if self.margin.is_finite() { self.margin } else { 0.0 },
            iterations: self.iterations,
            runtime_s: self.runtime_s,
            interpretation: self.interpretation.clone(),
            certificate: self.certificate.clone(),
            point: self.point.as_ref().map(|p| p.to_json(self.n_slots)),
        }
    }
}

fn interpretation(kind: SystemKind, status: Status, n: usize) -> String {
    match (kind, status) {
        (SystemKind::Qccc, Status::Feasible) if n <= 3 => "QC-CC (causally separable)".into(),
        (SystemKind::Qccc, Status::Feasible) => "QC-CC".into(),
        (SystemKind::Qccc, Status::Infeasible) if n <= 3 => "causally nonseparable".into(),
        (SystemKind::Qccc, Status::Infeasible) => "not QC-CC".into(),
        (SystemKind::Qcqc, Status::Feasible) => "QC-QC".into(),
        (SystemKind::Qcqc, Status::Infeasible) => "not QC-QC".into(),
        (_, Status::Undetermined) => "undetermined".into(),
    }
}

fn decomposition_of(sys: &ConstraintSystem, values: Vec<LabeledOperator>) -> Decomposition {
    match sys.kind {
        SystemKind::Qcqc => {
            let witnesses = sys
                .blocks
                .iter()
                .zip(values)
                .filter_map(|(b, v)| match &b.key {
                    BlockKey::QcQc(k) => Some((*k, v)),
                    _ => None,
                })
                .collect();
            Decomposition::QcQc(QcQcDecomposition { witnesses })
        }
        SystemKind::Qccc => {
            let mut d = QcCcDecomposition { order_witnesses: Default::default(), terminal_witnesses: Default::default() };
            for (b, v) in sys.blocks.iter().zip(values) {
                match &b.key {
                    BlockKey::Order(s) => {
                        d.order_witnesses.insert(s.clone(), v);
                    }
                    BlockKey::Terminal(s) => {
                        d.terminal_witnesses.insert(s.clone(), v);
                    }
                    BlockKey::QcQc(_) => {}
                }
            }
            Decomposition::QcCc(d)
        }
    }
}

struct Outcome {
    status: Status,
    margin: f64,
    note: Option<String>,
    point: Option<Decomposition>,
    certificate: Option<CertificateJson>,
    iterations: usize,
}

impl Outcome {
    fn undetermined(note: String, iterations: usize) -> Self {
        Self { status: Status::Undetermined, margin: f64::NAN, note: Some(note), point: None, certificate: None, iterations }
    }
}

/// Lifts a reduced point to witnesses and keeps it only if it verifies.
fn try_point(sys: &ConstraintSystem, red: &Reduced, x: &[f64], opts: &SolverOptions) -> Result<Option<(Decomposition, f64)>> {
    let d = decomposition_of(sys, red.lift(sys, x)?);
    let report = d.verify(&sys.process, opts.verify_tol)?;
    if !report.verdict {
        return Ok(None);
    }
    let witnesses: Vec<&LabeledOperator> = match &d {
        Decomposition::QcQc(q) => q.witnesses.values().collect(),
        Decomposition::QcCc(q) => q.order_witnesses.values().chain(q.terminal_witnesses.values()).collect(),
    };
    let mut margin = f64::INFINITY;
    for w in witnesses {
        margin = margin.min(w.min_eigenvalue()?);
    }
    Ok(Some((d, margin)))
}

fn try_certificate(
    sys: &ConstraintSystem,
    red: &Reduced,
    kind: CertificateKind,
    lambda: &[f64],
    opts: &SolverOptions,
) -> Result<std::result::Result<(CertificateJson, f64), String>> {
    let mut cert = Certificate { kind, multipliers: red.multiplier_operators(sys, lambda) };
    let first = cert.check(sys, red)?;
    if first.normalization > 0.0 && first.normalization.is_finite() {
        for m in &mut cert.multipliers {
            *m = m.scale(1.0 / first.normalization);
        }
    }
    let check = cert.check(sys, red)?;
    if check.dual_residual <= opts.tol && check.margin >= opts.tol_margin {
        Ok(Ok((cert.to_json(sys, red, &check), check.margin)))
    } else {
        Ok(Err(format!(
            "certificate rejected: margin {:.3e}, dual residual {:.3e}",
            check.margin, check.dual_residual
        )))
    }
}

fn solve_inner(sys: &ConstraintSystem, opts: &SolverOptions) -> Result<Outcome> {
    let red = match reduce::reduce(sys, &opts.limits)? {
        Ok(r) => r,
        Err(why) => return Ok(Outcome::undetermined(why, 0)),
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let b_norm = norm(&red.b);
    let r_norm = norm(&red.residual);
    if r_norm > opts.tol * b_norm.max(1.0) {
        return Ok(match try_certificate(sys, &red, CertificateKind::Affine, &red.residual, opts)? {
            Ok((cert, margin)) => Outcome {
                status: Status::Infeasible,
                margin,
                note: None,
                point: None,
                certificate: Some(cert),
                iterations: 0,
            },
            Err(why) => Outcome::undetermined(format!("equalities inconsistent at {r_norm:.3e}; {why}"), 0),
        });
    }
    if red.n_free() > opts.max_free {
        return Ok(Outcome::undetermined(
            format!("{} free coordinates exceed the cap of {}", red.n_free(), opts.max_free),
            0,
        ));
    }

    let lmi = ipm::Lmi {
        sizes: red.sub_blocks.iter().map(|sb| sb.r).collect(),
        f0: red.matrices_of(&red.x0),
        f: red.null_directions(),
    };
    let ipm_opts = ipm::IpmOptions { max_iter: opts.max_iter, feasible_exit: opts.tol_margin, ..Default::default() };
    let res = ipm::solve(&lmi, &ipm_opts);

    if res.s < opts.tol_margin {
        if let Some((point, margin)) = try_point(sys, &red, &red.point(&res.z), opts)? {
            return Ok(Outcome {
                status: Status::Feasible,
                margin,
                note: None,
                point: Some(point),
                certificate: None,
                iterations: res.iterations,
            });
        }
    }
    let x = red.coords_of(&res.x);
    let lambda = red.multipliers_for(&x);
    Ok(match try_certificate(sys, &red, CertificateKind::Lmi, &lambda, opts)? {
        Ok((cert, margin)) => Outcome {
            status: Status::Infeasible,
            margin,
            note: None,
            point: None,
            certificate: Some(cert),
            iterations: res.iterations,
        },
        Err(why) => Outcome::undetermined(
            format!("slack {:.3e} within the margin band (converged: {}); {why}", res.s, res.converged),
            res.iterations,
        ),
    })
}

/// Solves min s subject to blocks + s·𝟙 ⪰ 0 and the equalities. Feasible
/// verdicts are re-verified with `verify_*`; Infeasible verdicts carry a
/// re-checked certificate with margin ≥ `tol_margin`.
pub fn solve_feasibility(sys: &ConstraintSystem, opts: &SolverOptions) -> Result<Verdict> {
    let start = Instant::now();
    let out = solve_inner(sys, opts)?;
    let n = sys.n_slots();
    let mut interpretation = interpretation(sys.kind, out.status, n);
    if let Some(note) = out.note {
        interpretation = format!("{interpretation}: {note}");
    }
    Ok(Verdict {
        status: out.status,
        margin: out.margin,
        iterations: out.iterations,
        runtime_s: start.elapsed().as_secs_f64(),
        interpretation,
        point: out.point,
        certificate: out.certificate,
        n_slots: n,
    })
}

pub fn qcqc_membership(w: &ProcessMatrix) -> Result<Verdict> {
    solve_feasibility(&assemble_qcqc_system(w)?, &SolverOptions::default())
}

pub fn qccc_membership(w: &ProcessMatrix) -> Result<Verdict> {
    solve_feasibility(&assemble_qccc_system(w)?, &SolverOptions::default())
}
