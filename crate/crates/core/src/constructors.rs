//! Constructive decompositions of dephased processes.
//!
//! * Bipartite processes dephased on P, A_I, B_I (and optionally A_O, B_O)
//!   are QC-QCs: split Tr_F W = S ⊗ 𝟙^{B_O} + T ⊗ 𝟙^{A_O}, then shift every
//!   (p,i,j) block of S down by its minimum and T up by the same amount.
//! * QC-QCs dephased on every non-future system are QC-CCs: the order
//!   witnesses are obtained layer by layer by splitting each QC-QC witness
//!   cell in proportion to the weight each ordering carries in that cell.
//!
//! Systems may be declared dephased in the Z or X basis. X-basis systems are
//! rotated into the computational frame, processed, and the witnesses are
//! rotated back.

use std::collections::BTreeMap;

use crate::classes::{mask_of, sequences, verify_qcqc, QcCcDecomposition, QcQcDecomposition};
use crate::error::{Error, Result};
use crate::hilbert::{union, BasisKind, DephasingBasis, LabeledOperator, Matrix};
use crate::process::{check_validity, non_future, ProcessMatrix, RoleMap};

/// Off-diagonal mass (relative to max(1, ‖W‖∞)) above which an input is
/// rejected as not dephased.
pub const DIAGONALITY_TOL: f64 = 1e-9;

/// Default tolerance for the validity / decomposition preconditions.
pub const PRECONDITION_TOL: f64 = 1e-8;

/// Cells whose total weight is below this fraction of Tr W get zero weight
/// in every ordering.
pub const ZERO_CELL_CUTOFF: f64 = 1e-12;

/// Declared dephasing basis per system name; unlisted systems use Z.
pub type BasisMap = BTreeMap<String, BasisKind>;

/// S on P A_I B_I A_O and T on P A_I B_I B_O with S ⊗ 𝟙^{B_O} + T ⊗ 𝟙^{A_O} = Tr_F W.
#[derive(Clone, Debug)]
pub struct StSplit {
    pub s: LabeledOperator,
    pub t: LabeledOperator,
    pub reconstruction_residual: f64,
}

fn bipartite_systems(roles: &RoleMap) -> Result<(usize, usize, usize, usize)> {
    if roles.n_slots() != 2 {
        return Err(Error::Roles(format!("expected a bipartite process, found {} slots", roles.n_slots())));
    }
    Ok((roles.input(0), roles.output(0), roles.input(1), roles.output(1)))
}

/// Canonical split S = Tr_{B_O} x / d_{B_O},
/// T = Tr_{A_O} x / d_{A_O} − Tr_{A_O B_O} x ⊗ 𝟙^{B_O} / (d_{A_O} d_{B_O}),
/// for x = Tr_F W satisfying {}_{[1−A_O][1−B_O]} x = 0.
pub fn canonical_st_split(x: &LabeledOperator, roles: &RoleMap, tol: f64) -> Result<StSplit> {
    let (_, ao, _, bo) = bipartite_systems(roles)?;
    let reg = x.registry();
    let scale = x.norm_inf().max(1.0);
    let violation = x.one_minus(&[ao])?.one_minus(&[bo])?.norm_inf();
    if violation > tol * scale {
        return Err(Error::Precondition {
            what: "Tr_F W has a component without identity on either output".into(),
            residual: violation,
        });
    }
    let (d_ao, d_bo) = (reg.dim(ao) as f64, reg.dim(bo) as f64);
    let s = x.partial_trace(&[bo])?.scale(1.0 / d_bo);
    let t_first = x.partial_trace(&[ao])?.scale(1.0 / d_ao);
    let t_second = x.partial_trace(&[ao, bo])?.tensor_identity(&[bo])?.scale(1.0 / (d_ao * d_bo));
    let t = t_first.sub(&t_second)?;
    let rebuilt = s.tensor_identity(&[bo])?.add(&t.tensor_identity(&[ao])?)?;
    let reconstruction_residual = rebuilt.distance(x)?;
    Ok(StSplit { s, t, reconstruction_residual })
}

impl StSplit {
    /// ‖{}_{[1−A_O]} Tr_{B_I} S‖∞ and ‖{}_{[1−B_O]} Tr_{A_I} T‖∞, both zero
    /// whenever W satisfies the single-slot validity constraints.
    pub fn side_condition_residuals(&self, roles: &RoleMap) -> Result<(f64, f64)> {
        let (ai, ao, bi, bo) = bipartite_systems(roles)?;
        let s = self.s.partial_trace(&[bi])?.one_minus(&[ao])?.norm_inf();
        let t = self.t.partial_trace(&[ai])?.one_minus(&[bo])?.norm_inf();
        Ok((s, t))
    }
}

/// How the per-cell shift s̲_{p,i,j} is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftRule {
    /// Smallest diagonal entry of the cell (all systems dephased).
    MinDiagonal,
    /// Smallest eigenvalue of the cell's A_O block.
    MinEigenvalue,
}

/// Per-cell blocks S_{p,i,j} (on A_O) and T_{p,i,j} (on B_O), the shifts
/// s̲_{p,i,j}, and the shifted blocks S′ = S − s̲𝟙, T′ = T + s̲𝟙.
#[derive(Clone, Debug)]
pub struct DiagonalCoefficients {
    pub s_blocks: Vec<Matrix>,
    pub t_blocks: Vec<Matrix>,
    pub s_min: Vec<f64>,
    pub s_shifted: Vec<Matrix>,
    pub t_shifted: Vec<Matrix>,
}

/// Applies the minimum shift to each cell. For `MinDiagonal` the blocks
/// must be diagonal; ties in the minimum are irrelevant since only its value
/// is used.
pub fn shift_blocks(s_blocks: Vec<Matrix>, t_blocks: Vec<Matrix>, rule: ShiftRule) -> DiagonalCoefficients {
    let s_min: Vec<f64> = s_blocks
        .iter()
        .map(|b| match rule {
            ShiftRule::MinDiagonal => (0..b.nrows()).map(|k| b[(k, k)].re).fold(f64::INFINITY, f64::min),
            ShiftRule::MinEigenvalue => crate::hilbert::min_eigenvalue(b),
        })
        .collect();
    let shift = |b: &Matrix, by: f64| {
        let mut out = b.clone();
        for k in 0..out.nrows() {
            out[(k, k)].re += by;
        }
        out
    };
    let s_shifted = s_blocks.iter().zip(&s_min).map(|(b, &m)| shift(b, -m)).collect();
    let t_shifted = t_blocks.iter().zip(&s_min).map(|(b, &m)| shift(b, m)).collect();
    DiagonalCoefficients { s_blocks, t_blocks, s_min, s_shifted, t_shifted }
}

/// Rotates every declared X-basis system into the computational frame
/// (`forward`) or back.
fn change_frame(op: &LabeledOperator, bases: &BasisMap, forward: bool) -> Result<LabeledOperator> {
    let reg = op.registry().clone();
    let mut out = op.clone();
    for (name, kind) in bases {
        if *kind == BasisKind::Z {
            continue;
        }
        let idx = reg.index_of(name)?;
        if !out.systems().contains(&idx) {
            continue;
        }
        let u = DephasingBasis::of_kind(name.clone(), reg.dim(idx), *kind).unitary();
        out = out.conjugate_local(idx, &if forward { u.adjoint() } else { u })?;
    }
    Ok(out)
}

fn require_diagonal(op: &LabeledOperator, systems: &[usize], bases: &BasisMap) -> Result<()> {
    let reg = op.registry();
    let scale = op.norm_inf().max(1.0);
    for &s in systems {
        let name = reg.name(s);
        let kind = bases.get(name).copied().unwrap_or(BasisKind::Z);
        let mass = op.off_diagonal_mass(&DephasingBasis::of_kind(name, reg.dim(s), kind))?;
        if mass > DIAGONALITY_TOL * scale {
            return Err(Error::NotDiagonal { system: name.to_string(), mass });
        }
    }
    Ok(())
}

fn require_valid(w: &ProcessMatrix, tol: f64) -> Result<()> {
    let rep = check_validity(w, tol)?;
    if !rep.verdict {
        return Err(Error::Precondition { what: "input is not a valid process".into(), residual: rep.max_residual().max(-rep.psd_min_eig) });
    }
    Ok(())
}

/// QC-QC decomposition of a bipartite process dephased on P, A_I, B_I
/// (outputs may be coherent). Cell shifts use the minimum eigenvalue of
/// each S_{p,i,j} block.
pub fn qcqc_from_dephased_inputs(w: &ProcessMatrix, bases: &BasisMap) -> Result<QcQcDecomposition> {
    let roles = w.roles();
    let (ai, _, bi, _) = bipartite_systems(roles)?;
    let conditioned = union(roles.past(), &[ai, bi]);
    qcqc_by_shift(w, bases, &conditioned, ShiftRule::MinEigenvalue)
}

/// QC-QC decomposition of a bipartite process dephased on P, A_I, B_I, A_O
/// and B_O. Cell shifts use the smallest diagonal entry; every witness is
/// diagonal.
pub fn qcqc_from_dephased_all(w: &ProcessMatrix, bases: &BasisMap) -> Result<QcQcDecomposition> {
    let roles = w.roles();
    bipartite_systems(roles)?;
    qcqc_by_shift(w, bases, &non_future(roles), ShiftRule::MinDiagonal)
}

fn qcqc_by_shift(w: &ProcessMatrix, bases: &BasisMap, dephased: &[usize], rule: ShiftRule) -> Result<QcQcDecomposition> {
    let roles = w.roles();
    let (ai, ao, bi, bo) = bipartite_systems(roles)?;
    let reg = w.registry().clone();
    require_valid(w, PRECONDITION_TOL)?;
    require_diagonal(w.op(), dephased, bases)?;

    let frame = w.with_op(change_frame(w.op(), bases, true)?)?;
    let split = canonical_st_split(&frame.future_marginal(), roles, PRECONDITION_TOL)?;
    let cells = union(roles.past(), &[ai, bi]);
    let coeffs = shift_blocks(split.s.blocks(&cells)?, split.t.blocks(&cells)?, rule);

    let s_prime = LabeledOperator::from_blocks(&reg, split.s.systems(), &cells, &coeffs.s_shifted)?;
    let t_prime = LabeledOperator::from_blocks(&reg, split.t.systems(), &cells, &coeffs.t_shifted)?;
    let shift_cells: Vec<Matrix> = coeffs.s_min.iter().map(|&m| Matrix::from_element(1, 1, m.into())).collect();
    let s_bar = LabeledOperator::from_blocks(&reg, &cells, &cells, &shift_cells)?;

    let d_ao = reg.dim(ao) as f64;
    let d_bo = reg.dim(bo) as f64;
    let w_a = split.s.partial_trace(&[ao, bi])?.scale(1.0 / d_ao).sub(&s_bar.partial_trace(&[bi])?)?;
    let w_b = split.t.partial_trace(&[bo, ai])?.scale(1.0 / d_bo).add(&s_bar.partial_trace(&[ai])?)?;

    let mut witnesses = BTreeMap::new();
    witnesses.insert((0b01, 1), change_frame(&s_prime, bases, false)?);
    witnesses.insert((0b10, 0), change_frame(&t_prime, bases, false)?);
    witnesses.insert((0, 0), change_frame(&w_a, bases, false)?);
    witnesses.insert((0, 1), change_frame(&w_b, bases, false)?);
    Ok(QcQcDecomposition { witnesses })
}

/// QC-CC decomposition of a QC-QC dephased on every non-future system, from
/// a QC-QC decomposition that is diagonal on those systems. Works for any
/// number of slots.
pub fn qccc_from_dephased_qcqc(w: &ProcessMatrix, d: &QcQcDecomposition, bases: &BasisMap) -> Result<QcCcDecomposition> {
    let roles = w.roles();
    let n = roles.n_slots();
    let rep = verify_qcqc(w, d, PRECONDITION_TOL)?;
    if !rep.verdict {
        return Err(Error::Precondition {
            what: "decomposition does not verify for the process".into(),
            residual: rep.max_residual().max(-rep.psd_min_eig),
        });
    }
    let dephased = non_future(roles);
    require_diagonal(w.op(), &dephased, bases)?;
    for op in d.witnesses.values() {
        require_diagonal(op, &dephased.iter().copied().filter(|s| op.systems().contains(s)).collect::<Vec<_>>(), bases)?;
    }

    let w_frame = change_frame(w.op(), bases, true)?;
    let d_frame: BTreeMap<(u32, usize), LabeledOperator> =
        d.witnesses.iter().map(|(k, op)| Ok((*k, change_frame(op, bases, true)?))).collect::<Result<_>>()?;
    let cutoff = ZERO_CELL_CUTOFF * w_frame.trace().re.abs();

    let mut order: BTreeMap<Vec<usize>, LabeledOperator> = BTreeMap::new();
    for k in 0..n {
        order.insert(vec![k], d_frame[&(0, k)].clone());
    }
    let mut terminal = BTreeMap::new();
    for len in 1..=n {
        // Weight of every ordering of K in each cell of P A_IO^K.
        let mut weights: BTreeMap<Vec<usize>, Vec<f64>> = BTreeMap::new();
        let mut totals: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for seq in sequences(n, len) {
            let last = *seq.last().expect("nonempty");
            let diag = order[&seq].tensor_identity(&[roles.output(last)])?.diagonal();
            let total = totals.entry(mask_of(&seq)).or_insert_with(|| vec![0.0; diag.len()]);
            for (t, v) in total.iter_mut().zip(&diag) {
                *t += v;
            }
            weights.insert(seq, diag);
        }
        for (seq, wts) in &weights {
            let mask = mask_of(seq);
            let total = &totals[&mask];
            let ratio: Vec<f64> = wts
                .iter()
                .zip(total)
                .map(|(&v, &t)| if t <= cutoff { 0.0 } else { (v / t).clamp(0.0, 1.0).sqrt() })
                .collect();
            let cell_systems = union(roles.past(), &roles.io_of(mask));
            if len == n {
                terminal.insert(seq.clone(), w_frame.diagonal_congruence(&cell_systems, &ratio)?);
            } else {
                for k in (0..n).filter(|k| mask & (1 << k) == 0) {
                    let mut next = seq.clone();
                    next.push(k);
                    let op = d_frame[&(mask, k)].diagonal_congruence(&cell_systems, &ratio)?;
                    order.insert(next, op);
                }
            }
        }
    }

    let back = |m: BTreeMap<Vec<usize>, LabeledOperator>| -> Result<BTreeMap<Vec<usize>, LabeledOperator>> {
        m.into_iter().map(|(k, op)| Ok((k, change_frame(&op, bases, false)?))).collect()
    };
    Ok(QcCcDecomposition { order_witnesses: back(order)?, terminal_witnesses: back(terminal)? })
}

/// Both constructions in sequence, for a bipartite process dephased on every
/// non-future system.
pub fn qccc_from_dephased(w: &ProcessMatrix, bases: &BasisMap) -> Result<QcCcDecomposition> {
    let qcqc = qcqc_from_dephased_all(w, bases)?;
    qccc_from_dephased_qcqc(w, &qcqc, bases)
}
