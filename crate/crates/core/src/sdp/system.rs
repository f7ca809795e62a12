//! Constraint systems: PSD witness blocks tied together by linear equalities
//! built from partial traces and identity extensions.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::classes::{order_support, qcqc_keys, qcqc_support, sequences, QcCcDecomposition, QcQcDecomposition, QcQcKey};
use crate::error::{Error, Result};
use crate::hilbert::{union, LabeledOperator, OperatorJson, SpaceRegistry};
use crate::process::{check_validity, full_mask, slots_in, ProcessMatrix, RegistryEntry};

/// Validity tolerance required of the data before a system is assembled.
pub const ASSEMBLY_VALIDITY_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemKind {
    Qcqc,
    Qccc,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum BlockKey {
    QcQc(QcQcKey),
    Order(Vec<usize>),
    Terminal(Vec<usize>),
}

#[derive(Clone, Debug)]
pub struct Block {
    pub name: String,
    pub key: BlockKey,
    pub systems: Vec<usize>,
    pub dim: usize,
}

/// coeff · (Tr_{trace_over} X_block) ⊗ 𝟙^{tensor_with}.
#[derive(Clone, Debug)]
pub struct Term {
    pub block: usize,
    pub coeff: f64,
    pub trace_over: Vec<usize>,
    pub tensor_with: Vec<usize>,
}

impl Term {
    pub fn apply(&self, x: &LabeledOperator) -> Result<LabeledOperator> {
        Ok(x.partial_trace(&self.trace_over)?.tensor_identity(&self.tensor_with)?.scale(self.coeff))
    }

    /// Hilbert–Schmidt adjoint: coeff · (Tr_{tensor_with} Y) ⊗ 𝟙^{trace_over}.
    pub fn adjoint(&self, y: &LabeledOperator) -> Result<LabeledOperator> {
        Ok(y.partial_trace(&self.tensor_with)?.tensor_identity(&self.trace_over)?.scale(self.coeff))
    }
}

/// Σ terms = rhs, an operator equation on `systems`.
#[derive(Clone, Debug)]
pub struct Equality {
    pub name: String,
    pub systems: Vec<usize>,
    pub terms: Vec<Term>,
    pub rhs: LabeledOperator,
}

/// Feasibility problem: find PSD blocks satisfying every equality. The
/// solver minimises s subject to block + s·𝟙 ⪰ 0 for every block.
#[derive(Clone, Debug)]
pub struct ConstraintSystem {
    pub kind: SystemKind,
    pub process: ProcessMatrix,
    pub blocks: Vec<Block>,
    pub equalities: Vec<Equality>,
}

fn set_name(mask: u32, n: usize) -> String {
    let parts: Vec<String> = slots_in(mask, n).map(|k| (k + 1).to_string()).collect();
    format!("{{{}}}", parts.join(","))
}

fn seq_name(seq: &[usize]) -> String {
    seq.iter().map(|k| (k + 1).to_string()).collect::<Vec<_>>().join(",")
}

fn require_valid(w: &ProcessMatrix) -> Result<()> {
    let rep = check_validity(w, ASSEMBLY_VALIDITY_TOL)?;
    if !rep.verdict {
        return Err(Error::Precondition {
            what: "membership needs a valid process".into(),
            residual: rep.max_residual().max(-rep.psd_min_eig).max(rep.normalization_gap),
        });
    }
    Ok(())
}

impl ConstraintSystem {
    pub fn registry(&self) -> &Arc<SpaceRegistry> {
        self.process.registry()
    }

    pub fn n_slots(&self) -> usize {
        self.process.n_slots()
    }

    fn block_index(&self, key: &BlockKey) -> usize {
        self.blocks.iter().position(|b| &b.key == key).expect("block key assembled")
    }

    /// Real coordinates of all blocks together (d² per d×d block).
    pub fn n_real_variables(&self) -> usize {
        self.blocks.iter().map(|b| b.dim * b.dim).sum()
    }

    /// Σ terms − rhs for every equality, evaluated at the given block values.
    pub fn equality_residuals(&self, values: &[LabeledOperator]) -> Result<Vec<(String, f64)>> {
        if values.len() != self.blocks.len() {
            return Err(Error::System(format!("{} block values for {} blocks", values.len(), self.blocks.len())));
        }
        self.equalities
            .iter()
            .map(|eq| {
                let mut acc = eq.rhs.scale(-1.0);
                for t in &eq.terms {
                    acc.add_scaled(&t.apply(&values[t.block])?, 1.0)?;
                }
                Ok((eq.name.clone(), acc.norm_inf()))
            })
            .collect()
    }

    /// Block values of a decomposition of the matching kind, in block order.
    pub fn values_of_qcqc(&self, d: &QcQcDecomposition) -> Result<Vec<LabeledOperator>> {
        self.blocks
            .iter()
            .map(|b| match &b.key {
                BlockKey::QcQc(k) => d.get(k.0, k.1).cloned(),
                _ => Err(Error::System("not a QC-QC system".into())),
            })
            .collect()
    }

    pub fn values_of_qccc(&self, d: &QcCcDecomposition) -> Result<Vec<LabeledOperator>> {
        self.blocks
            .iter()
            .map(|b| match &b.key {
                BlockKey::Order(s) => d.order(s).cloned(),
                BlockKey::Terminal(s) => d.terminal(s).cloned(),
                BlockKey::QcQc(_) => Err(Error::System("not a QC-CC system".into())),
            })
            .collect()
    }

    pub fn to_json(&self) -> ConstraintSystemJson {
        let reg = self.registry();
        let names = |ids: &[usize]| reg.names_of(ids);
        ConstraintSystemJson {
            kind: self.kind,
            registry: self.process.to_json().registry,
            parametrization: "hermitian orthonormal: diagonal entries, then for i<j sqrt2*Re(x_ij), sqrt2*Im(x_ij)".into(),
            objective: "minimise s subject to block + s*identity >= 0 for every block".into(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockJson { name: b.name.clone(), systems: names(&b.systems), dim: b.dim })
                .collect(),
            equalities: self
                .equalities
                .iter()
                .map(|eq| EqualityJson {
                    name: eq.name.clone(),
                    systems: names(&eq.systems),
                    terms: eq
                        .terms
                        .iter()
                        .map(|t| TermJson {
                            block: t.block,
                            coeff: t.coeff,
                            trace_over: names(&t.trace_over),
                            tensor_with: names(&t.tensor_with),
                        })
                        .collect(),
                    rhs: eq.rhs.to_json(),
                })
                .collect(),
        }
    }
}

/// Blocks W_(K,k) for every strict subset K and k ∉ K, with
/// Tr_F W = Σ_k W_(N∖k,k) ⊗ 𝟙^{A_O^k},
/// Σ_{k∉K} Tr_{A_I^k} W_(K,k) = Σ_{k∈K} W_(K∖k,k) ⊗ 𝟙^{A_O^k} for ∅ ≠ K ⊊ N,
/// Σ_k Tr_{A_I^k} W_(∅,k) = 𝟙^P.
pub fn assemble_qcqc_system(w: &ProcessMatrix) -> Result<ConstraintSystem> {
    require_valid(w)?;
    let roles = w.roles();
    let reg = w.registry();
    let n = roles.n_slots();
    if n == 0 {
        return Err(Error::Roles("process has no slots".into()));
    }
    let blocks: Vec<Block> = qcqc_keys(n)
        .into_iter()
        .map(|key| {
            let systems = qcqc_support(roles, key);
            Block {
                name: format!("W({},{})", set_name(key.0, n), key.1 + 1),
                key: BlockKey::QcQc(key),
                dim: reg.dim_of(&systems),
                systems,
            }
        })
        .collect();
    let mut sys = ConstraintSystem { kind: SystemKind::Qcqc, process: w.clone(), blocks, equalities: Vec::new() };
    let idx = |sys: &ConstraintSystem, mask: u32, k: usize| sys.block_index(&BlockKey::QcQc((mask, k)));

    let incoming = |sys: &ConstraintSystem, mask: u32, coeff: f64| -> Vec<Term> {
        slots_in(mask, n)
            .map(|k| Term {
                block: idx(sys, mask & !(1 << k), k),
                coeff,
                trace_over: Vec::new(),
                tensor_with: vec![roles.output(k)],
            })
            .collect()
    };
    let outgoing = |sys: &ConstraintSystem, mask: u32| -> Vec<Term> {
        (0..n)
            .filter(|k| mask & (1 << k) == 0)
            .map(|k| Term { block: idx(sys, mask, k), coeff: 1.0, trace_over: vec![roles.input(k)], tensor_with: Vec::new() })
            .collect()
    };

    let full = full_mask(n);
    let data = w.future_marginal();
    sys.equalities.push(Equality {
        name: "final".into(),
        systems: data.systems().to_vec(),
        terms: incoming(&sys, full, 1.0),
        rhs: data,
    });
    for mask in 1..full {
        let systems = union(roles.past(), &roles.io_of(mask));
        let mut terms = outgoing(&sys, mask);
        terms.extend(incoming(&sys, mask, -1.0));
        sys.equalities.push(Equality {
            name: format!("layer {}", crate::process::slot_set_name(mask, n)),
            rhs: LabeledOperator::zeros(reg, &systems),
            systems,
            terms,
        });
    }
    sys.equalities.push(Equality {
        name: "initial".into(),
        systems: roles.past().to_vec(),
        terms: outgoing(&sys, 0),
        rhs: LabeledOperator::identity(reg, roles.past()),
    });
    Ok(sys)
}

/// Order blocks W_(k_1..k_n) for n = 1..N and terminal blocks
/// W_(k_1..k_N,F) on the whole registry, with
/// W = Σ W_(k_1..k_N,F),  Tr_F W_(k_1..k_N,F) = W_(k_1..k_N) ⊗ 𝟙^{A_O^{k_N}},
/// Σ_{k} Tr_{A_I^k} W_(k_1..k_n,k) = W_(k_1..k_n) ⊗ 𝟙^{A_O^{k_n}},
/// Σ_k Tr_{A_I^k} W_(k) = 𝟙^P.
pub fn assemble_qccc_system(w: &ProcessMatrix) -> Result<ConstraintSystem> {
    require_valid(w)?;
    let roles = w.roles();
    let reg = w.registry();
    let n = roles.n_slots();
    if n == 0 {
        return Err(Error::Roles("process has no slots".into()));
    }
    let mut blocks = Vec::new();
    for len in 1..=n {
        for seq in sequences(n, len) {
            let systems = order_support(roles, &seq);
            blocks.push(Block {
                name: format!("W({})", seq_name(&seq)),
                key: BlockKey::Order(seq),
                dim: reg.dim_of(&systems),
                systems,
            });
        }
    }
    for seq in sequences(n, n) {
        blocks.push(Block {
            name: format!("W({},F)", seq_name(&seq)),
            key: BlockKey::Terminal(seq),
            dim: reg.total_dim(),
            systems: reg.all(),
        });
    }
    let mut sys = ConstraintSystem { kind: SystemKind::Qccc, process: w.clone(), blocks, equalities: Vec::new() };

    let terminals: Vec<Term> = sequences(n, n)
        .into_iter()
        .map(|seq| Term {
            block: sys.block_index(&BlockKey::Terminal(seq)),
            coeff: 1.0,
            trace_over: Vec::new(),
            tensor_with: Vec::new(),
        })
        .collect();
    sys.equalities.push(Equality {
        name: "total".into(),
        systems: reg.all(),
        terms: terminals,
        rhs: w.op().clone(),
    });
    for seq in sequences(n, n) {
        let last = seq[n - 1];
        let systems = union(roles.past(), &roles.all_io());
        let terms = vec![
            Term {
                block: sys.block_index(&BlockKey::Terminal(seq.clone())),
                coeff: 1.0,
                trace_over: roles.future().to_vec(),
                tensor_with: Vec::new(),
            },
            Term {
                block: sys.block_index(&BlockKey::Order(seq.clone())),
                coeff: -1.0,
                trace_over: Vec::new(),
                tensor_with: vec![roles.output(last)],
            },
        ];
        sys.equalities.push(Equality {
            name: format!("terminal ({})", seq_name(&seq)),
            rhs: LabeledOperator::zeros(reg, &systems),
            systems,
            terms,
        });
    }
    for len in 1..n {
        for seq in sequences(n, len) {
            let last = seq[len - 1];
            let mut terms: Vec<Term> = (0..n)
                .filter(|k| !seq.contains(k))
                .map(|k| {
                    let mut next = seq.clone();
                    next.push(k);
                    Term {
                        block: sys.block_index(&BlockKey::Order(next)),
                        coeff: 1.0,
                        trace_over: vec![roles.input(k)],
                        tensor_with: Vec::new(),
                    }
                })
                .collect();
            terms.push(Term {
                block: sys.block_index(&BlockKey::Order(seq.clone())),
                coeff: -1.0,
                trace_over: Vec::new(),
                tensor_with: vec![roles.output(last)],
            });
            let systems = union(roles.past(), &roles.io_of(crate::classes::mask_of(&seq)));
            sys.equalities.push(Equality {
                name: format!("layer ({})", seq_name(&seq)),
                rhs: LabeledOperator::zeros(reg, &systems),
                systems,
                terms,
            });
        }
    }
    let initial: Vec<Term> = (0..n)
        .map(|k| Term {
            block: sys.block_index(&BlockKey::Order(vec![k])),
            coeff: 1.0,
            trace_over: vec![roles.input(k)],
            tensor_with: Vec::new(),
        })
        .collect();
    sys.equalities.push(Equality {
        name: "initial".into(),
        systems: roles.past().to_vec(),
        terms: initial,
        rhs: LabeledOperator::identity(reg, roles.past()),
    });
    Ok(sys)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockJson {
    pub name: String,
    pub systems: Vec<String>,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermJson {
    /// Index into `blocks`.
    pub block: usize,
    pub coeff: f64,
    pub trace_over: Vec<String>,
    pub tensor_with: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EqualityJson {
    pub name: String,
    pub systems: Vec<String>,
    pub terms: Vec<TermJson>,
    pub rhs: OperatorJson,
}

/// Self-contained dump of a constraint system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSystemJson {
    pub kind: SystemKind,
    pub registry: Vec<RegistryEntry>,
    pub parametrization: String,
    pub objective: String,
    pub blocks: Vec<BlockJson>,
    pub equalities: Vec<EqualityJson>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::{standard_registry, white_noise_process};
    use crate::switch::{build_quantum_switch, switch_decomposition};

    #[test]
    fn switch_qcqc_block_sides() {
        let sys = assemble_qcqc_system(&build_quantum_switch()).unwrap();
        let mut dims: Vec<usize> = sys.blocks.iter().map(|b| b.dim).collect();
        dims.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(dims, vec![32, 32, 8, 8]);
    }

    #[test]
    fn switch_decomposition_satisfies_assembled_equalities() {
        let w = build_quantum_switch();
        let sys = assemble_qcqc_system(&w).unwrap();
        let values = sys.values_of_qcqc(&switch_decomposition()).unwrap();
        for (name, r) in sys.equality_residuals(&values).unwrap() {
            assert_eq!(r, 0.0, "{name}");
        }
    }

    #[test]
    fn single_slot_system() {
        let (reg, roles) = standard_registry(&["A"], 2, 2, 2).unwrap();
        let w = white_noise_process(&reg, &roles).unwrap();
        let sys = assemble_qcqc_system(&w).unwrap();
        assert_eq!(sys.blocks.len(), 1);
        let names: Vec<&str> = sys.equalities.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, vec!["final", "initial"]);
    }

    #[test]
    fn tripartite_counts() {
        let (reg, roles) = standard_registry(&["A", "B", "C"], 1, 2, 1).unwrap();
        let w = white_noise_process(&reg, &roles).unwrap();
        let qcqc = assemble_qcqc_system(&w).unwrap();
        // final + one layer per nonempty strict subset + initial
        let subsets: usize = (1..3).map(|k| [1, 3, 3, 1][k]).sum();
        assert_eq!(qcqc.equalities.len(), 1 + subsets + 1);
        let qccc = assemble_qccc_system(&w).unwrap();
        let order = qccc.blocks.iter().filter(|b| matches!(b.key, BlockKey::Order(_))).count();
        let terminal = qccc.blocks.iter().filter(|b| matches!(b.key, BlockKey::Terminal(_))).count();
        assert_eq!((order, terminal), (3 + 6 + 6, 6));
    }

    #[test]
    fn bipartite_qccc_blocks() {
        let sys = assemble_qccc_system(&build_quantum_switch()).unwrap();
        let full = sys.blocks.iter().filter(|b| b.dim == 256).count();
        assert_eq!((sys.blocks.len(), full), (6, 2));
    }

    #[test]
    fn adjoint_matches_hilbert_schmidt_pairing() {
        let (reg, _) = standard_registry(&["A", "B"], 2, 2, 1).unwrap();
        let ids = |v: &[&str]| reg.ids(v).unwrap();
        let term = Term { block: 0, coeff: -1.5, trace_over: ids(&["B_I"]), tensor_with: ids(&["A_O"]) };
        let m = |sys: &[usize], seed: f64| {
            let d = reg.dim_of(sys);
            let mat = crate::hilbert::Matrix::from_fn(d, d, |i, j| {
                crate::hilbert::c(((i * 7 + j * 3) as f64 + seed).sin(), ((i * 5 + j) as f64 * seed).cos())
            });
            LabeledOperator::new(reg.clone(), sys.to_vec(), &mat + mat.adjoint()).unwrap()
        };
        let x = m(&ids(&["P", "A_I", "B_I"]), 0.3);
        let y = m(&ids(&["P", "A_I", "A_O"]), 1.1);
        let lhs = crate::hilbert::hs_inner(term.apply(&x).unwrap().matrix(), y.matrix());
        let rhs = crate::hilbert::hs_inner(x.matrix(), term.adjoint(&y).unwrap().matrix());
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }
}
