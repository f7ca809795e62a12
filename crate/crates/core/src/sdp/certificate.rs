//! Dual certificates of infeasibility and their independent re-check.
//!
//! Multipliers Λ_e, one Hermitian operator per equality, define
//! G_b = −Σ_{terms on b} adjoint(Λ_e) on every block. If every (reduced)
//! G_b is PSD, then any point satisfying the equalities with block + s·𝟙 ⪰ 0
//! has s ≥ Σ_e ⟨rhs_e, Λ_e⟩ / Σ_b Tr G_b. If instead every G_b vanishes and
//! Σ_e ⟨rhs_e, Λ_e⟩ > 0, the equalities alone are inconsistent.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::hilbert::{min_eigenvalue, BasisKind, LabeledOperator, Matrix, OperatorJson};

use super::reduce::Reduced;
use super::system::ConstraintSystem;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CertificateKind {
    /// PSD multiplier certificate with a positive slack bound.
    Lmi,
    /// The equalities have no solution at all.
    Affine,
}

/// Compensated (Neumaier) summation.
#[derive(Clone, Copy, Debug, Default)]
pub struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for Neumaier {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = Neumaier::default();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

#[derive(Clone, Debug)]
pub struct Certificate {
    pub kind: CertificateKind,
    /// One operator per equality, in the solver frame.
    pub multipliers: Vec<LabeledOperator>,
}

/// Outcome of re-checking a certificate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateCheck {
    /// Σ_e ⟨rhs_e, Λ_e⟩.
    pub dual_objective: f64,
    /// Σ_b Tr G_b (Lmi) or ‖Λ‖₂ (Affine).
    pub normalization: f64,
    /// max(0, −λ_min(G))/normalization (Lmi) or ‖G‖₂/normalization (Affine).
    pub dual_residual: f64,
    /// dual_objective / normalization.
    pub margin: f64,
}

fn re_trace_product(a: &Matrix, b: &Matrix) -> Neumaier {
    let n = a.nrows();
    let mut acc = Neumaier::default();
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (a[(i, j)], b[(j, i)]);
            acc.add(x.re * y.re);
            acc.add(-x.im * y.im);
        }
    }
    acc
}

impl Certificate {
    pub fn check(&self, sys: &ConstraintSystem, red: &Reduced) -> Result<CertificateCheck> {
        let reg = sys.registry();
        let mut g: Vec<LabeledOperator> = sys.blocks.iter().map(|b| LabeledOperator::zeros(reg, &b.systems)).collect();
        for (eq, lam) in sys.equalities.iter().zip(&self.multipliers) {
            for t in &eq.terms {
                g[t.block].add_scaled(&t.adjoint(lam)?, -1.0)?;
            }
        }
        let mut objective = Neumaier::default();
        for (rhs, lam) in red.rhs_frame.iter().zip(&self.multipliers) {
            let part = re_trace_product(rhs.matrix(), lam.matrix());
            objective.add(part.sum);
            objective.add(part.comp);
        }
        let objective = objective.total();

        let mut trace = Neumaier::default();
        let mut frob = Neumaier::default();
        let mut min_eig = f64::INFINITY;
        for sb in &red.sub_blocks {
            let m = g[sb.block].matrix();
            let sector = Matrix::from_fn(sb.indices.len(), sb.indices.len(), |a, b| m[(sb.indices[a], sb.indices[b])]);
            let reduced = match &sb.iso {
                Some(v) => v.adjoint() * sector * v,
                None => sector,
            };
            for i in 0..reduced.nrows() {
                trace.add(reduced[(i, i)].re);
            }
            for z in reduced.iter() {
                frob.add(z.norm_sqr());
            }
            min_eig = min_eig.min(min_eigenvalue(&reduced));
        }
        let (normalization, dual_residual) = match self.kind {
            CertificateKind::Lmi => {
                let tr = trace.total();
                (tr, (-min_eig).max(0.0) / tr)
            }
            CertificateKind::Affine => {
                let norm = self
                    .multipliers
                    .iter()
                    .flat_map(|l| l.matrix().iter().map(|z| z.norm_sqr()).collect::<Vec<_>>())
                    .collect::<Neumaier>()
                    .total()
                    .sqrt();
                (norm, frob.total().sqrt() / norm)
            }
        };
        let margin = if normalization > 0.0 { objective / normalization } else { f64::NAN };
        Ok(CertificateCheck { dual_objective: objective, normalization, dual_residual, margin })
    }

    pub fn to_json(&self, sys: &ConstraintSystem, red: &Reduced, check: &CertificateCheck) -> CertificateJson {
        let reg = sys.registry();
        CertificateJson {
            kind: self.kind,
            frame: red.frame.iter().map(|&(s, k)| (reg.name(s).to_string(), k)).collect(),
            pinched: reg.names_of(&red.pinched),
            multipliers: sys
                .equalities
                .iter()
                .zip(&self.multipliers)
                .map(|(eq, lam)| MultiplierJson { equality: eq.name.clone(), operator: lam.to_json() })
                .collect(),
            check: *check,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiplierJson {
    pub equality: String,
    pub operator: OperatorJson,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateJson {
    pub kind: CertificateKind,
    /// Systems rotated to the given basis before solving; multipliers are
    /// expressed in the rotated frame.
    pub frame: Vec<(String, BasisKind)>,
    /// Systems on which the witnesses were restricted to be block diagonal.
    pub pinched: Vec<String>,
    pub multipliers: Vec<MultiplierJson>,
    pub check: CertificateCheck,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neumaier_recovers_cancelled_terms() {
        let xs = [1.0, 1e100, 1.0, -1e100];
        let naive: f64 = xs.iter().sum();
        let acc: Neumaier = xs.into_iter().collect();
        assert_eq!(naive, 0.0);
        assert_eq!(acc.total(), 2.0);
    }
}
