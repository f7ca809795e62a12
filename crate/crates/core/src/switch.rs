//! The quantum switch, its partially dephased variants, and slot patterns
//! (state injection, tracing out and dephasing of individual subsystems).

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::classes::QcQcDecomposition;
use crate::error::{Error, Result};
use crate::hilbert::{c, qubit, BasisKind, DephasingBasis, LabeledOperator, Matrix, SpaceRegistry, SystemLabel, C64};
use crate::process::{ProcessMatrix, Role, RoleMap};

pub const SWITCH_SYSTEMS: [&str; 8] = ["P_c", "P_t", "A_I", "A_O", "B_I", "B_O", "F_t", "F_c"];

fn switch_roles() -> [Role; 8] {
    [
        Role::Past,
        Role::Past,
        Role::Input(0),
        Role::Output(0),
        Role::Input(1),
        Role::Output(1),
        Role::Future,
        Role::Future,
    ]
}

pub fn switch_registry() -> Arc<SpaceRegistry> {
    SpaceRegistry::qubits(&SWITCH_SYSTEMS).expect("static registry")
}

/// W_QS = |w⟩⟨w| with
/// |w⟩ = Σ_{ijk} |0,i,i,j,j,k,k,0⟩ + |1,i,j,k,i,j,k,1⟩ in the order
/// P_c P_t A_I A_O B_I B_O F_t F_c: control 0 routes the target through A
/// then B, control 1 through B then A.
pub fn build_quantum_switch() -> ProcessMatrix {
    let reg = switch_registry();
    let mut v = DVector::<C64>::zeros(256);
    let index = |bits: [usize; 8]| bits.iter().fold(0usize, |acc, &b| 2 * acc + b);
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                v[index([0, i, i, j, j, k, k, 0])] += c(1.0, 0.0);
                // P_c P_t A_I A_O B_I B_O F_t F_c with B first: P_t→B_I, B_O→A_I, A_O→F_t.
                v[index([1, i, j, k, i, j, k, 1])] += c(1.0, 0.0);
            }
        }
    }
    let op = LabeledOperator::new(reg.clone(), reg.all(), &v * v.adjoint()).expect("dimensions match");
    let roles = RoleMap::new(&reg, switch_roles().to_vec()).expect("static roles");
    ProcessMatrix::new(op, roles).expect("rank-one projector is Hermitian")
}

fn branch_projector(reg: &Arc<SpaceRegistry>, names: &[&str], pattern: impl Fn(usize, usize) -> Vec<usize>) -> LabeledOperator {
    let d = 1 << names.len();
    let mut v = DVector::<C64>::zeros(d);
    for i in 0..2 {
        for j in 0..2 {
            let bits = pattern(i, j);
            v[bits.iter().fold(0usize, |acc, &b| 2 * acc + b)] = c(1.0, 0.0);
        }
    }
    LabeledOperator::from_factors(reg, names, &v * v.adjoint()).expect("switch systems")
}

/// The QC-QC decomposition of the switch. Each witness is the projector onto
/// the coherent sum over the target's paths, e.g.
/// W_(A,B) = |a⟩⟨a| with |a⟩ = Σ_{ij} |0⟩^{P_c}|i⟩^{P_t}|i⟩^{A_I}|j⟩^{A_O}|j⟩^{B_I}.
pub fn switch_decomposition() -> QcQcDecomposition {
    let reg = switch_registry();
    let mut witnesses = BTreeMap::new();
    witnesses.insert(
        (0b01, 1),
        branch_projector(&reg, &["P_c", "P_t", "A_I", "A_O", "B_I"], |i, j| vec![0, i, i, j, j]),
    );
    witnesses.insert(
        (0b10, 0),
        branch_projector(&reg, &["P_c", "P_t", "B_I", "B_O", "A_I"], |i, j| vec![1, i, i, j, j]),
    );
    // The single-operation witnesses only depend on i; the j loop revisits the same entry.
    witnesses.insert((0, 0), branch_projector(&reg, &["P_c", "P_t", "A_I"], |i, _| vec![0, i, i]));
    witnesses.insert((0, 1), branch_projector(&reg, &["P_c", "P_t", "B_I"], |i, _| vec![1, i, i]));
    QcQcDecomposition { witnesses }
}

/// The same witnesses with every projector taken entry by entry in the
/// computational basis, e.g. W_(A,B) = Σ_{ij} [[0]]^{P_c}[[i]]^{P_t}[[i]]^{A_I}[[j]]^{A_O}[[j]]^{B_I}.
/// This decomposes the switch once all its non-future systems are dephased.
pub fn dephased_switch_decomposition() -> QcQcDecomposition {
    let reg = switch_registry();
    let p = qubit::proj;
    let sum = |terms: Vec<Vec<(&str, Matrix)>>| -> LabeledOperator {
        let mut acc: Option<LabeledOperator> = None;
        for t in terms {
            let op = LabeledOperator::product(&reg, &t).expect("switch systems");
            match acc.as_mut() {
                Some(a) => a.add_scaled(&op, 1.0).expect("same support"),
                None => acc = Some(op),
            }
        }
        acc.expect("nonempty")
    };
    let (mut ab, mut ba, mut a, mut b) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..2 {
        for j in 0..2 {
            ab.push(vec![("P_c", p(0)), ("P_t", p(i)), ("A_I", p(i)), ("A_O", p(j)), ("B_I", p(j))]);
            ba.push(vec![("P_c", p(1)), ("P_t", p(i)), ("B_I", p(i)), ("B_O", p(j)), ("A_I", p(j))]);
        }
        a.push(vec![("P_c", p(0)), ("P_t", p(i)), ("A_I", p(i))]);
        b.push(vec![("P_c", p(1)), ("P_t", p(i)), ("B_I", p(i))]);
    }
    let mut witnesses = BTreeMap::new();
    witnesses.insert((0b01, 1), sum(ab));
    witnesses.insert((0b10, 0), sum(ba));
    witnesses.insert((0, 0), sum(a));
    witnesses.insert((0, 1), sum(b));
    QcQcDecomposition { witnesses }
}

/// Pattern dephasing every non-future system of the switch in the
/// computational basis.
pub fn dephase_all_pattern() -> SlotPattern {
    ["P_c", "P_t", "A_I", "A_O", "B_I", "B_O"]
        .iter()
        .fold(SlotPattern::new(), |p, s| p.dephase(s, BasisKind::Z))
}

/// What to do with one subsystem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum SlotAction {
    Keep,
    TraceOut,
    Dephase {
        basis: BasisKind,
    },
    /// Feeds a pure state into a past subsystem: ⟨ψ| W |ψ⟩.
    Inject {
        state: Vec<[f64; 2]>,
    },
}

/// Per-subsystem actions, applied as: all injections, then all partial
/// traces, then all dephasings. Systems not mentioned are kept.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SlotPattern {
    pub actions: BTreeMap<String, SlotAction>,
}

impl SlotPattern {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, system: &str, action: SlotAction) -> Self {
        self.actions.insert(system.to_string(), action);
        self
    }

    pub fn inject(self, system: &str, state: &[C64]) -> Self {
        self.with(system, SlotAction::Inject { state: state.iter().map(|z| [z.re, z.im]).collect() })
    }

    pub fn dephase(self, system: &str, basis: BasisKind) -> Self {
        self.with(system, SlotAction::Dephase { basis })
    }

    pub fn trace_out(self, system: &str) -> Self {
        self.with(system, SlotAction::TraceOut)
    }
}

pub fn ket0() -> Vec<C64> {
    vec![c(1.0, 0.0), c(0.0, 0.0)]
}

pub fn ket_plus() -> Vec<C64> {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    vec![c(h, 0.0), c(h, 0.0)]
}

/// Applies a slot pattern. The result lives on a registry with the injected
/// and traced systems removed.
pub fn apply_pattern(w: &ProcessMatrix, pattern: &SlotPattern) -> Result<ProcessMatrix> {
    let reg = w.registry().clone();
    let mut injected: Vec<(usize, DVector<C64>)> = Vec::new();
    let mut traced = Vec::new();
    let mut dephasings = Vec::new();
    for (name, action) in &pattern.actions {
        let idx = reg.index_of(name)?;
        let role = w.roles().role(idx);
        match action {
            SlotAction::Keep => {}
            SlotAction::TraceOut => {
                if role != Role::Future {
                    return Err(Error::Pattern(format!("only future systems can be traced out, `{name}` is not one")));
                }
                traced.push(idx);
            }
            SlotAction::Inject { state } => {
                if role != Role::Past {
                    return Err(Error::Pattern(format!("states can only be fed into past systems, `{name}` is not one")));
                }
                if state.len() != reg.dim(idx) {
                    return Err(Error::Pattern(format!(
                        "state for `{name}` has {} amplitudes, system dimension is {}",
                        state.len(),
                        reg.dim(idx)
                    )));
                }
                let psi = DVector::from_iterator(state.len(), state.iter().map(|[re, im]| c(*re, *im)));
                let norm = psi.norm();
                if (norm - 1.0).abs() > 1e-10 {
                    return Err(Error::Pattern(format!("state for `{name}` has norm {norm}, expected 1")));
                }
                injected.push((idx, psi));
            }
            SlotAction::Dephase { basis } => {
                dephasings.push(DephasingBasis::of_kind(name.clone(), reg.dim(idx), *basis));
            }
        }
    }

    let mut op = w.op().clone();
    for (idx, psi) in &injected {
        let proj = LabeledOperator::new(reg.clone(), vec![*idx], psi * psi.adjoint())?;
        let extra: Vec<usize> = op.systems().iter().copied().filter(|s| s != idx).collect();
        op = proj.tensor_identity(&extra)?.mul(&op)?.partial_trace(&[*idx])?;
    }
    op = op.partial_trace(&traced)?;
    for basis in &dephasings {
        op = op.dephase(basis)?;
    }

    let removed: Vec<usize> = injected.iter().map(|(i, _)| *i).chain(traced.iter().copied()).collect();
    let kept: Vec<usize> = reg.all().into_iter().filter(|i| !removed.contains(i)).collect();
    let new_reg = SpaceRegistry::new(kept.iter().map(|&i| reg.systems()[i].clone()).collect())?;
    let roles = RoleMap::new(&new_reg, kept.iter().map(|&i| w.roles().role(i)).collect())?;
    let op = op.rebase(&new_reg)?;
    // Pinching and injection leave tiny anti-Hermitian round-off; remove it.
    let m = op.matrix();
    let op = op.with_matrix((m + m.adjoint()).map(|z| z * 0.5));
    ProcessMatrix::new(op, roles)
}

/// The slot pattern turning the switch into example `n` ∈ {1, 2, 3}.
pub fn example_pattern(n: usize) -> Result<SlotPattern> {
    use BasisKind::{X, Z};
    let p = SlotPattern::new();
    Ok(match n {
        1 => p
            .inject("P_t", &ket0())
            .trace_out("F_t")
            .dephase("A_I", Z)
            .dephase("A_O", Z)
            .dephase("B_I", Z)
            .dephase("B_O", Z)
            .dephase("F_c", X),
        2 => p
            .inject("P_c", &ket_plus())
            .inject("P_t", &ket_plus())
            .trace_out("F_t")
            .dephase("A_O", Z)
            .dephase("B_I", Z)
            .dephase("B_O", Z)
            .dephase("F_c", X),
        3 => p
            .inject("P_c", &ket_plus())
            .inject("P_t", &ket0())
            .dephase("A_I", Z)
            .dephase("B_I", Z)
            .dephase("B_O", Z)
            .dephase("F_t", X)
            .dephase("F_c", X),
        _ => return Err(Error::Pattern(format!("no example {n}; choose 1, 2 or 3"))),
    })
}

/// The single extra dephasing that removes the last coherent non-future
/// system of example `n`.
pub fn flip_pattern(n: usize) -> Result<SlotPattern> {
    let p = SlotPattern::new();
    Ok(match n {
        1 => p.dephase("P_c", BasisKind::X),
        2 => p.dephase("A_I", BasisKind::Z),
        3 => p.dephase("A_O", BasisKind::Z),
        _ => return Err(Error::Pattern(format!("no example {n}; choose 1, 2 or 3"))),
    })
}

fn example_registry(names: &[&str]) -> (Arc<SpaceRegistry>, RoleMap) {
    let reg = SpaceRegistry::new(names.iter().map(|n| SystemLabel::new(*n, 2)).collect()).expect("static registry");
    let base = switch_roles();
    let roles = names
        .iter()
        .map(|n| base[SWITCH_SYSTEMS.iter().position(|s| s == n).expect("switch system")])
        .collect();
    let roles = RoleMap::new(&reg, roles).expect("static roles");
    (reg, roles)
}

/// Closed-form partially dephased switch examples, written directly as sums
/// of products of single-qubit operators.
type Term = (f64, Vec<(&'static str, Matrix)>);

pub fn build_example(n: usize) -> Result<ProcessMatrix> {
    let p = qubit::proj;
    let id = qubit::id;
    let x = qubit::x;
    let z = qubit::z;
    let half = |m: Matrix| m.map(|e| e * 0.5);
    let (reg, roles, terms): (_, _, Vec<Term>) = match n {
        1 => {
            let (reg, roles) = example_registry(&["P_c", "A_I", "A_O", "B_I", "B_O", "F_c"]);
            let mut t = Vec::new();
            for i in 0..2 {
                t.push((1.0, vec![("P_c", p(0)), ("A_I", p(0)), ("A_O", p(i)), ("B_I", p(i)), ("B_O", id()), ("F_c", half(id()))]));
                t.push((1.0, vec![("P_c", p(1)), ("B_I", p(0)), ("B_O", p(i)), ("A_I", p(i)), ("A_O", id()), ("F_c", half(id()))]));
            }
            t.push((1.0, vec![("P_c", x()), ("A_I", p(0)), ("A_O", p(0)), ("B_I", p(0)), ("B_O", p(0)), ("F_c", half(x()))]));
            (reg, roles, t)
        }
        2 => {
            let (reg, roles) = example_registry(&["A_I", "A_O", "B_I", "B_O", "F_c"]);
            let mut t = Vec::new();
            for i in 0..2 {
                t.push((0.5, vec![("A_I", qubit::plus()), ("A_O", p(i)), ("B_I", p(i)), ("B_O", id()), ("F_c", half(id()))]));
                t.push((0.5, vec![("B_I", half(id())), ("B_O", p(i)), ("A_I", p(i)), ("A_O", id()), ("F_c", half(id()))]));
                t.push((0.5, vec![("A_I", p(i) + half(x())), ("A_O", p(i)), ("B_I", p(i)), ("B_O", p(i)), ("F_c", half(x()))]));
            }
            (reg, roles, t)
        }
        3 => {
            let (reg, roles) = example_registry(&["A_I", "A_O", "B_I", "B_O", "F_t", "F_c"]);
            let mut t = Vec::new();
            for i in 0..2 {
                t.push((0.5, vec![("A_I", p(0)), ("A_O", p(i)), ("B_I", p(i)), ("B_O", half(id())), ("F_t", id()), ("F_c", half(id()))]));
                // [[0]]^{B_I}[[i]]^{B_O}[[i]]^{A_I} (𝟙^{A_O F_t} + X^{A_O} X^{F_t})/2 · 𝟙^{F_c}/2
                t.push((0.25, vec![("B_I", p(0)), ("B_O", p(i)), ("A_I", p(i)), ("A_O", id()), ("F_t", id()), ("F_c", half(id()))]));
                t.push((0.25, vec![("B_I", p(0)), ("B_O", p(i)), ("A_I", p(i)), ("A_O", x()), ("F_t", x()), ("F_c", half(id()))]));
            }
            // ½ [[0]]^{B_I}[[0]]^{B_O}[[0]]^{A_I} (𝟙^{A_O F_t} + Z^{A_O}𝟙^{F_t} + X^{A_O}X^{F_t})/2 · X^{F_c}/2
            let common = |ao: Matrix, ft: Matrix| vec![("B_I", p(0)), ("B_O", p(0)), ("A_I", p(0)), ("A_O", ao), ("F_t", ft), ("F_c", half(x()))];
            t.push((0.25, common(id(), id())));
            t.push((0.25, common(z(), id())));
            t.push((0.25, common(x(), x())));
            (reg, roles, t)
        }
        _ => return Err(Error::Pattern(format!("no example {n}; choose 1, 2 or 3"))),
    };
    let mut acc = LabeledOperator::zeros(&reg, &reg.all());
    for (f, factors) in terms {
        acc.add_scaled(&LabeledOperator::product(&reg, &factors)?, f)?;
    }
    ProcessMatrix::new(acc, roles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classes::verify_qcqc;
    use crate::process::{check_validity, contract};

    #[test]
    fn switch_is_valid_rank_one_with_trace_16() {
        let w = build_quantum_switch();
        assert_eq!(w.op().trace(), c(16.0, 0.0));
        let rep = check_validity(&w, 1e-10).unwrap();
        assert!(rep.verdict, "{rep:?}");
        let (vals, _) = w.op().hermitian_eigs().unwrap();
        assert!(vals[..255].iter().all(|v| v.abs() < 1e-10));
        assert!((vals[255] - 16.0).abs() < 1e-10);
    }

    #[test]
    fn switch_decomposition_is_exact() {
        let rep = verify_qcqc(&build_quantum_switch(), &switch_decomposition(), 1e-12).unwrap();
        assert!(rep.residuals.values().all(|&r| r == 0.0), "{rep:?}");
        assert_eq!(rep.normalization_gap, 0.0);
        assert!(rep.verdict);
    }

    #[test]
    fn entrywise_decomposition_fits_only_the_dephased_switch() {
        let w = build_quantum_switch();
        let diag = dephased_switch_decomposition();
        let rep = verify_qcqc(&w, &diag, 1e-9).unwrap();
        assert!(!rep.verdict);
        assert!((rep.residuals["final"] - 1.0).abs() < 1e-12);

        let dephased = apply_pattern(&w, &dephase_all_pattern()).unwrap();
        let rep = verify_qcqc(&dephased, &diag, 1e-12).unwrap();
        assert!(rep.verdict, "{rep:?}");
        let coherent = (&diag, &switch_decomposition());
        let mut d = coherent.1.clone();
        for s in ["P_c", "P_t", "A_I", "A_O", "B_I", "B_O"] {
            d = d.dephase(&DephasingBasis::computational(s, 2)).unwrap();
        }
        assert_eq!(&d, coherent.0);
    }

    fn identity_choi(reg: &Arc<SpaceRegistry>, a: &str, b: &str) -> LabeledOperator {
        let mut v = DVector::<C64>::zeros(4);
        v[0] = c(1.0, 0.0);
        v[3] = c(1.0, 0.0);
        LabeledOperator::from_factors(reg, &[a, b], &v * v.adjoint()).unwrap()
    }

    #[test]
    fn contracting_identity_channels_gives_identity_channel() {
        let w = build_quantum_switch();
        let reg = w.registry().clone();
        let slots = [identity_choi(&reg, "A_I", "A_O"), identity_choi(&reg, "B_I", "B_O")];
        let m = contract(&w, &slots).unwrap();
        // Choi of the identity P_c P_t → F_c F_t, i.e. |Φ⟩⟩ on (P_c,F_c) ⊗ |Φ⟩⟩ on (P_t,F_t).
        let expected = identity_choi(&reg, "P_c", "F_c").tensor(&identity_choi(&reg, "P_t", "F_t")).unwrap();
        assert!(m.distance(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn pattern_json_shape() {
        let p = example_pattern(1).unwrap();
        let text = serde_json::to_string(&p).unwrap();
        assert!(text.contains(r#""F_c":{"action":"dephase","basis":"x"}"#));
        let back: SlotPattern = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn identity_pattern_is_noop() {
        let w = build_quantum_switch();
        let out = apply_pattern(&w, &SlotPattern::new().with("A_I", SlotAction::Keep)).unwrap();
        assert_eq!(out.op().matrix(), w.op().matrix());
    }

    #[test]
    fn pattern_role_violations() {
        let w = build_quantum_switch();
        assert!(matches!(apply_pattern(&w, &SlotPattern::new().trace_out("A_O")), Err(Error::Pattern(_))));
        assert!(matches!(apply_pattern(&w, &SlotPattern::new().inject("F_c", &ket0())), Err(Error::Pattern(_))));
        let bad = SlotPattern::new().inject("P_c", &[c(1.0, 0.0), c(1.0, 0.0)]);
        assert!(matches!(apply_pattern(&w, &bad), Err(Error::Pattern(_))));
    }

    #[test]
    fn examples_match_pipeline() {
        let w = build_quantum_switch();
        for n in 1..=3 {
            let piped = apply_pattern(&w, &example_pattern(n).unwrap()).unwrap();
            let closed = build_example(n).unwrap();
            assert_eq!(piped.registry(), closed.registry());
            let dist = piped.op().distance(closed.op()).unwrap();
            assert!(dist <= 1e-12, "example {n}: distance {dist}");
            assert!(check_validity(&closed, 1e-10).unwrap().verdict);
        }
        assert!((build_example(1).unwrap().op().trace().re - 8.0).abs() < 1e-12);
    }
}
