//! Exact reductions of a constraint system before the conic solve.
//!
//! * Systems on which the data is diagonal (Z) or diagonal after a Fourier
//!   change of frame (X) are pinched: pinching on such a system commutes
//!   with every equality and leaves the data fixed, so the witnesses may be
//!   taken block diagonal in its basis. Each block splits into sectors.
//! * Terminal QC-CC blocks sum to W and are PSD at any feasible point, so
//!   they are compressed onto the range of W sector by sector.
//! * Equalities are rewritten in real Hermitian coordinates and eliminated:
//!   x = x₀ + N z with N an orthonormal null-space basis.

use std::collections::{BTreeMap, HashMap};

use faer::{c64, Mat, Side};

use crate::error::{Error, Result};
use crate::hilbert::{hermitian_eigs, BasisKind, DephasingBasis, LabeledOperator, Matrix, Split, C64};

use super::system::{BlockKey, ConstraintSystem, SystemKind};

/// Off-diagonal mass (relative to max(1, ‖W‖∞)) below which a system is
/// treated as dephased.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Eigenvalues of W below this fraction of the largest are outside its range.
pub const RANGE_TOL: f64 = 1e-10;
/// Gram eigenvalues below this fraction of the largest span the null space.
pub const GRAM_RANK_TOL: f64 = 1e-10;

const SQRT2: f64 = std::f64::consts::SQRT_2;

#[derive(Clone, Debug)]
pub struct SubBlock {
    pub block: usize,
    /// Canonical indices of the block belonging to this sector.
    pub indices: Vec<usize>,
    /// Isometry onto the retained range (indices.len() × r), if compressed.
    pub iso: Option<Matrix>,
    pub r: usize,
    /// First real coordinate of this sub-block.
    pub offset: usize,
}

#[derive(Clone, Debug)]
pub struct Component {
    pub cols: Vec<usize>,
    /// Eigenvectors of the Gram matrix with nonzero eigenvalue, and 1/eigenvalue.
    pub range: Mat<f64>,
    pub inv_eigs: Vec<f64>,
    pub null: Mat<f64>,
}

/// The reduced problem in real coordinates.
#[derive(Clone, Debug)]
pub struct Reduced {
    /// Systems whose frame was rotated to the Fourier basis.
    pub frame: Vec<(usize, BasisKind)>,
    pub pinched: Vec<usize>,
    pub sub_blocks: Vec<SubBlock>,
    pub n_coords: usize,
    /// (equality, coordinate on the equality's space) of each row.
    pub rows: Vec<(usize, usize)>,
    pub b: Vec<f64>,
    /// Sparse columns of the equality matrix.
    pub columns: Vec<Vec<(usize, f64)>>,
    pub components: Vec<Component>,
    /// Least-squares solution of the equalities.
    pub x0: Vec<f64>,
    /// b − A x₀ per row.
    pub residual: Vec<f64>,
    /// Equality right-hand sides in the rotated frame.
    pub rhs_frame: Vec<LabeledOperator>,
}

pub fn frame_unitary(dim: usize, kind: BasisKind) -> Matrix {
    DephasingBasis::of_kind("", dim, kind).unitary()
}

/// Rotates the listed systems into (`forward`) or out of the solver frame.
pub fn to_frame(op: &LabeledOperator, frame: &[(usize, BasisKind)], forward: bool) -> Result<LabeledOperator> {
    let mut out = op.clone();
    for &(s, kind) in frame {
        if out.systems().contains(&s) {
            let u = frame_unitary(op.registry().dim(s), kind);
            out = out.conjugate_local(s, &if forward { u.adjoint() } else { u })?;
        }
    }
    Ok(out)
}

/// Systems on which W is diagonal in the Z basis, else in the X basis.
pub fn detect_symmetry(w: &LabeledOperator) -> Result<Vec<(usize, BasisKind)>> {
    let reg = w.registry();
    let tol = SYMMETRY_TOL * w.norm_inf().max(1.0);
    let mut out = Vec::new();
    for s in reg.all() {
        for kind in [BasisKind::Z, BasisKind::X] {
            if w.off_diagonal_mass(&DephasingBasis::of_kind(reg.name(s), reg.dim(s), kind))? <= tol {
                out.push((s, kind));
                break;
            }
        }
    }
    Ok(out)
}

/// Number of real coordinates of an r×r Hermitian matrix.
pub fn n_herm(r: usize) -> usize {
    r * r
}

/// Upper-triangle pair of the p-th off-diagonal coordinate pair.
fn pair_of(r: usize, mut p: usize) -> (usize, usize) {
    for a in 0..r {
        let len = r - a - 1;
        if p < len {
            return (a, a + 1 + p);
        }
        p -= len;
    }
    unreachable!("pair index out of range")
}

fn pair_index(r: usize, a: usize, b: usize) -> usize {
    a * r - a * (a + 1) / 2 + (b - a - 1)
}

/// Entries of the k-th orthonormal Hermitian basis element.
pub fn basis_entries(r: usize, k: usize) -> Vec<(usize, usize, C64)> {
    if k < r {
        return vec![(k, k, C64::new(1.0, 0.0))];
    }
    let (a, b) = pair_of(r, (k - r) / 2);
    let h = 1.0 / SQRT2;
    if (k - r).is_multiple_of(2) {
        vec![(a, b, C64::new(h, 0.0)), (b, a, C64::new(h, 0.0))]
    } else {
        vec![(a, b, C64::new(0.0, h)), (b, a, C64::new(0.0, -h))]
    }
}

/// Hermitian matrix from its real coordinates.
pub fn herm_from_coords(r: usize, x: &[f64]) -> Mat<c64> {
    let mut m = Mat::<c64>::zeros(r, r);
    for a in 0..r {
        m[(a, a)] = c64::new(x[a], 0.0);
    }
    let mut k = r;
    for a in 0..r {
        for b in a + 1..r {
            let z = c64::new(x[k] / SQRT2, x[k + 1] / SQRT2);
            m[(a, b)] = z;
            m[(b, a)] = z.conj();
            k += 2;
        }
    }
    m
}

/// Real coordinates of (the Hermitian part of) a square matrix.
pub fn coords_of_herm(m: &Mat<c64>) -> Vec<f64> {
    let r = m.nrows();
    let mut x = Vec::with_capacity(r * r);
    for a in 0..r {
        x.push(m[(a, a)].re);
    }
    for a in 0..r {
        for b in a + 1..r {
            let z = (m[(a, b)] + m[(b, a)].conj()) * 0.5;
            x.push(SQRT2 * z.re);
            x.push(SQRT2 * z.im);
        }
    }
    x
}

/// Coordinate index of entry (a, b), a ≤ b, and its real/imaginary weights.
fn coords_of_entry(d: usize, a: usize, b: usize, v: C64) -> [(usize, f64); 2] {
    if a == b {
        [(a, v.re), (usize::MAX, 0.0)]
    } else {
        let base = d + 2 * pair_index(d, a, b);
        [(base, SQRT2 * v.re), (base + 1, SQRT2 * v.im)]
    }
}

/// Hermitian operator on `systems` from coordinates given sparsely.
pub fn herm_from_sparse(
    registry: &std::sync::Arc<crate::hilbert::SpaceRegistry>,
    systems: &[usize],
    coords: &[(usize, f64)],
) -> LabeledOperator {
    let d = registry.dim_of(systems);
    let mut m = Matrix::zeros(d, d);
    for &(k, v) in coords {
        for (a, b, e) in basis_entries(d, k) {
            m[(a, b)] += e * v;
        }
    }
    LabeledOperator::new(registry.clone(), systems.to_vec(), m).expect("sorted systems")
}

/// Index bookkeeping for one term: block entry (i, j) contributes to
/// equality entries (base[i] + t, base[j] + t) for every offset t when
/// traced[i] == traced[j].
struct TermMap {
    equality: usize,
    coeff: f64,
    traced: Vec<usize>,
    base: Vec<usize>,
    offsets: Vec<usize>,
}

fn term_map(sys: &ConstraintSystem, e: usize, t: usize) -> Result<TermMap> {
    let reg = sys.registry();
    let eq = &sys.equalities[e];
    let term = &eq.terms[t];
    let block = &sys.blocks[term.block];
    let dims_b: Vec<usize> = block.systems.iter().map(|&s| reg.dim(s)).collect();
    let keep_b: Vec<bool> = block.systems.iter().map(|s| !term.trace_over.contains(s)).collect();
    let kept_systems: Vec<usize> = block.systems.iter().copied().filter(|s| !term.trace_over.contains(s)).collect();
    let split_b = Split::new(&dims_b, &keep_b);

    let mut eq_systems = kept_systems.clone();
    eq_systems.extend(&term.tensor_with);
    eq_systems.sort_unstable();
    if eq_systems != eq.systems {
        return Err(Error::System(format!("term {t} of equality `{}` does not map onto its systems", eq.name)));
    }
    let dims_e: Vec<usize> = eq.systems.iter().map(|&s| reg.dim(s)).collect();
    let keep_e: Vec<bool> = eq.systems.iter().map(|s| kept_systems.contains(s)).collect();
    let split_e = Split::new(&dims_e, &keep_e);
    let mut table = vec![0usize; split_e.kept_dim * split_e.other_dim];
    for j in 0..split_e.kept.len() {
        table[split_e.kept[j] * split_e.other_dim + split_e.other[j]] = j;
    }
    let base = (0..split_b.kept.len()).map(|i| table[split_b.kept[i] * split_e.other_dim]).collect();
    let offsets = (0..split_e.other_dim).map(|w| table[w]).collect();
    Ok(TermMap { equality: e, coeff: term.coeff, traced: split_b.other.clone(), base, offsets })
}

fn sub_blocks(sys: &ConstraintSystem, w_frame: &LabeledOperator, pinched: &[usize]) -> Vec<SubBlock> {
    let reg = sys.registry();
    let lambda_max = hermitian_eigs(w_frame.matrix()).0.last().copied().unwrap_or(0.0).max(0.0);
    let mut out = Vec::new();
    let mut offset = 0;
    for (bi, block) in sys.blocks.iter().enumerate() {
        let dims: Vec<usize> = block.systems.iter().map(|&s| reg.dim(s)).collect();
        let keep: Vec<bool> = block.systems.iter().map(|s| pinched.contains(s)).collect();
        let split = Split::new(&dims, &keep);
        let mut sectors = vec![Vec::new(); split.kept_dim];
        for i in 0..block.dim {
            sectors[split.kept[i]].push(i);
        }
        let compress = sys.kind == SystemKind::Qccc && matches!(block.key, BlockKey::Terminal(_));
        for indices in sectors {
            let (iso, r) = if compress {
                let m = w_frame.matrix();
                let sub = Matrix::from_fn(indices.len(), indices.len(), |a, b| m[(indices[a], indices[b])]);
                let (vals, vecs) = hermitian_eigs(&sub);
                let keep: Vec<usize> = (0..vals.len()).filter(|&k| vals[k] > RANGE_TOL * lambda_max).collect();
                if keep.len() == indices.len() {
                    (None, indices.len())
                } else {
                    (Some(Matrix::from_fn(indices.len(), keep.len(), |a, k| vecs[(a, keep[k])])), keep.len())
                }
            } else {
                (None, indices.len())
            };
            if r == 0 {
                continue;
            }
            out.push(SubBlock { block: bi, indices, iso, r, offset });
            offset += n_herm(r);
        }
    }
    out
}

/// Entries (in block indices) of the k-th basis element of a sub-block.
fn lift_basis(sb: &SubBlock, k: usize) -> Vec<(usize, usize, C64)> {
    let entries = basis_entries(sb.r, k);
    match &sb.iso {
        None => entries.into_iter().map(|(a, b, v)| (sb.indices[a], sb.indices[b], v)).collect(),
        Some(v) => {
            let n = sb.indices.len();
            let mut dense = vec![C64::new(0.0, 0.0); n * n];
            for (a, b, e) in entries {
                for i in 0..n {
                    let via = v[(i, a)] * e;
                    for j in 0..n {
                        dense[i * n + j] += via * v[(j, b)].conj();
                    }
                }
            }
            let mut out = Vec::with_capacity(n * n);
            for i in 0..n {
                for j in 0..n {
                    out.push((sb.indices[i], sb.indices[j], dense[i * n + j]));
                }
            }
            out
        }
    }
}

/// Union–find over columns linked by shared rows.
fn components_of(n_cols: usize, row_cols: &[Vec<(usize, f64)>]) -> Vec<Vec<usize>> {
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut parent: Vec<usize> = (0..n_cols).collect();
    for cols in row_cols {
        if let Some(&(first, _)) = cols.first() {
            for &(c, _) in &cols[1..] {
                let (a, b) = (find(&mut parent, first), find(&mut parent, c));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
    for c in 0..n_cols {
        let root = find(&mut parent, c);
        groups.entry(root).or_default().push(c);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort();
    out
}

/// Size caps beyond which the dense solver is not attempted.
#[derive(Clone, Copy, Debug)]
pub struct Limits {
    pub max_coords: usize,
    pub max_component: usize,
}

/// Reduces the system, or explains (inner `Err`) why it is too large.
pub fn reduce(sys: &ConstraintSystem, limits: &Limits) -> Result<std::result::Result<Reduced, String>> {
    let w = sys.process.op();
    let frame_all = detect_symmetry(w)?;
    let pinched: Vec<usize> = frame_all.iter().map(|&(s, _)| s).collect();
    let frame: Vec<(usize, BasisKind)> = frame_all.into_iter().filter(|&(_, k)| k != BasisKind::Z).collect();
    let w_frame = to_frame(w, &frame, true)?;

    let sub_blocks = sub_blocks(sys, &w_frame, &pinched);
    let n_coords: usize = sub_blocks.iter().map(|sb| n_herm(sb.r)).sum();
    if n_coords > limits.max_coords {
        return Ok(Err(format!("{n_coords} real coordinates after reduction exceed the cap of {}", limits.max_coords)));
    }

    let mut maps: Vec<Vec<TermMap>> = (0..sys.blocks.len()).map(|_| Vec::new()).collect();
    for (e, eq) in sys.equalities.iter().enumerate() {
        for (t, term) in eq.terms.iter().enumerate() {
            maps[term.block].push(term_map(sys, e, t)?);
        }
    }
    let eq_dims: Vec<usize> = sys.equalities.iter().map(|eq| sys.registry().dim_of(&eq.systems)).collect();

    let mut row_id: HashMap<(usize, usize), usize> = HashMap::new();
    let mut rows: Vec<(usize, usize)> = Vec::new();
    let mut columns: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n_coords);
    for sb in &sub_blocks {
        for k in 0..n_herm(sb.r) {
            let lifted = lift_basis(sb, k);
            let mut acc: BTreeMap<(usize, usize, usize), C64> = BTreeMap::new();
            for tm in &maps[sb.block] {
                for &(i, j, v) in &lifted {
                    if tm.traced[i] != tm.traced[j] {
                        continue;
                    }
                    let (bi, bj) = (tm.base[i], tm.base[j]);
                    for &t in &tm.offsets {
                        let (a, b) = (bi + t, bj + t);
                        if a <= b {
                            *acc.entry((tm.equality, a, b)).or_insert(C64::new(0.0, 0.0)) += v * tm.coeff;
                        }
                    }
                }
            }
            let mut col: Vec<(usize, f64)> = Vec::new();
            for ((e, a, b), v) in acc {
                for (coord, val) in coords_of_entry(eq_dims[e], a, b, v) {
                    if coord == usize::MAX || val.abs() <= 1e-15 {
                        continue;
                    }
                    let next = rows.len();
                    let r = *row_id.entry((e, coord)).or_insert(next);
                    if r == next {
                        rows.push((e, coord));
                    }
                    col.push((r, val));
                }
            }
            col.sort_unstable_by_key(|&(r, _)| r);
            columns.push(col);
        }
    }

    let mut rhs_frame = Vec::with_capacity(sys.equalities.len());
    for (e, eq) in sys.equalities.iter().enumerate() {
        let rhs = to_frame(&eq.rhs, &frame, true)?;
        let m = rhs.matrix();
        let d = eq_dims[e];
        for a in 0..d {
            for b in a..d {
                let v = (m[(a, b)] + m[(b, a)].conj()) * 0.5;
                for (coord, val) in coords_of_entry(d, a, b, v) {
                    if coord == usize::MAX || val == 0.0 {
                        continue;
                    }
                    let next = rows.len();
                    if *row_id.entry((e, coord)).or_insert(next) == next {
                        rows.push((e, coord));
                    }
                }
            }
        }
        rhs_frame.push(rhs);
    }
    let mut b = vec![0.0; rows.len()];
    for (r, &(e, coord)) in rows.iter().enumerate() {
        let d = eq_dims[e];
        let m = rhs_frame[e].matrix();
        b[r] = if coord < d {
            m[(coord, coord)].re
        } else {
            let (a, bb) = pair_of(d, (coord - d) / 2);
            let v = (m[(a, bb)] + m[(bb, a)].conj()) * 0.5;
            if (coord - d).is_multiple_of(2) {
                SQRT2 * v.re
            } else {
                SQRT2 * v.im
            }
        };
    }

    let mut row_cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); rows.len()];
    for (c, col) in columns.iter().enumerate() {
        for &(r, v) in col {
            row_cols[r].push((c, v));
        }
    }

    let groups = components_of(n_coords, &row_cols);
    if let Some(big) = groups.iter().map(Vec::len).max().filter(|&n| n > limits.max_component) {
        return Ok(Err(format!("a coupled group of {big} coordinates exceeds the cap of {}", limits.max_component)));
    }
    let mut x0 = vec![0.0; n_coords];
    let mut components = Vec::new();
    for cols in groups {
        let n = cols.len();
        let local: HashMap<usize, usize> = cols.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let mut gram = Mat::<f64>::zeros(n, n);
        let mut atb = vec![0.0; n];
        let mut seen_rows: Vec<usize> = cols.iter().flat_map(|&c| columns[c].iter().map(|&(r, _)| r)).collect();
        seen_rows.sort_unstable();
        seen_rows.dedup();
        for &r in &seen_rows {
            let entries: Vec<(usize, f64)> = row_cols[r].iter().map(|&(c, v)| (local[&c], v)).collect();
            for &(i, vi) in &entries {
                atb[i] += vi * b[r];
                for &(j, vj) in &entries {
                    gram[(i, j)] += vi * vj;
                }
            }
        }
        let eig = gram
            .self_adjoint_eigen(Side::Lower)
            .map_err(|e| Error::System(format!("Gram eigendecomposition failed: {e:?}")))?;
        let vals: Vec<f64> = (0..n).map(|i| eig.S().column_vector()[i]).collect();
        let u = eig.U();
        let top = vals.last().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
        let rank_idx: Vec<usize> = (0..n).filter(|&i| vals[i] > GRAM_RANK_TOL * top).collect();
        let null_idx: Vec<usize> = (0..n).filter(|&i| vals[i] <= GRAM_RANK_TOL * top).collect();
        let range = Mat::<f64>::from_fn(n, rank_idx.len(), |i, k| u[(i, rank_idx[k])]);
        let null = Mat::<f64>::from_fn(n, null_idx.len(), |i, k| u[(i, null_idx[k])]);
        let inv_eigs: Vec<f64> = rank_idx.iter().map(|&i| 1.0 / vals[i]).collect();
        for (k, &inv) in inv_eigs.iter().enumerate() {
            let proj: f64 = (0..n).map(|i| range[(i, k)] * atb[i]).sum();
            for i in 0..n {
                x0[cols[i]] += range[(i, k)] * proj * inv;
            }
        }
        components.push(Component { cols, range, inv_eigs, null });
    }

    let mut residual = b.clone();
    for (c, col) in columns.iter().enumerate() {
        for &(r, v) in col {
            residual[r] -= v * x0[c];
        }
    }

    Ok(Ok(Reduced { frame, pinched, sub_blocks, n_coords, rows, b, columns, components, x0, residual, rhs_frame }))
}

impl Reduced {
    pub fn n_free(&self) -> usize {
        self.components.iter().map(|c| c.null.ncols()).sum()
    }

    pub fn sub_block_of(&self, coord: usize) -> usize {
        self.sub_blocks.partition_point(|sb| sb.offset <= coord) - 1
    }

    /// Per-sub-block Hermitian matrices of a coordinate vector.
    pub fn matrices_of(&self, x: &[f64]) -> Vec<Mat<c64>> {
        self.sub_blocks.iter().map(|sb| herm_from_coords(sb.r, &x[sb.offset..sb.offset + n_herm(sb.r)])).collect()
    }

    pub fn coords_of(&self, mats: &[Mat<c64>]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.n_coords);
        for m in mats {
            x.extend(coords_of_herm(m));
        }
        x
    }

    /// Null-space directions as sparse lists of sub-block matrices.
    pub fn null_directions(&self) -> Vec<Vec<(usize, Mat<c64>)>> {
        let mut out = Vec::new();
        for comp in &self.components {
            let touched: Vec<usize> = {
                let mut t: Vec<usize> = comp.cols.iter().map(|&c| self.sub_block_of(c)).collect();
                t.dedup();
                t
            };
            for k in 0..comp.null.ncols() {
                let mut coords: HashMap<usize, Vec<f64>> = HashMap::new();
                for (i, &c) in comp.cols.iter().enumerate() {
                    let sb = self.sub_block_of(c);
                    let entry = coords.entry(sb).or_insert_with(|| vec![0.0; n_herm(self.sub_blocks[sb].r)]);
                    entry[c - self.sub_blocks[sb].offset] = comp.null[(i, k)];
                }
                let dir = touched
                    .iter()
                    .map(|&sb| (sb, herm_from_coords(self.sub_blocks[sb].r, &coords[&sb])))
                    .collect();
                out.push(dir);
            }
        }
        out
    }

    /// Coordinates x₀ + N z.
    pub fn point(&self, z: &[f64]) -> Vec<f64> {
        let mut x = self.x0.clone();
        let mut k = 0;
        for comp in &self.components {
            for j in 0..comp.null.ncols() {
                for (i, &c) in comp.cols.iter().enumerate() {
                    x[c] += comp.null[(i, j)] * z[k];
                }
                k += 1;
            }
        }
        x
    }

    /// Full block operators (original frame) of a coordinate vector.
    pub fn lift(&self, sys: &ConstraintSystem, x: &[f64]) -> Result<Vec<LabeledOperator>> {
        let reg = sys.registry();
        let mut mats: Vec<Matrix> = sys.blocks.iter().map(|b| Matrix::zeros(b.dim, b.dim)).collect();
        for (sb, y) in self.sub_blocks.iter().zip(self.matrices_of(x)) {
            let y = Matrix::from_fn(sb.r, sb.r, |a, b| y[(a, b)]);
            let full = match &sb.iso {
                Some(v) => v * y * v.adjoint(),
                None => y,
            };
            let m = &mut mats[sb.block];
            for (a, &i) in sb.indices.iter().enumerate() {
                for (bb, &j) in sb.indices.iter().enumerate() {
                    m[(i, j)] = full[(a, bb)];
                }
            }
        }
        sys.blocks
            .iter()
            .zip(mats)
            .map(|(b, m)| to_frame(&LabeledOperator::new(reg.clone(), b.systems.clone(), m)?, &self.frame, false))
            .collect()
    }

    /// Multipliers λ with −Aᵀλ equal to the range part of x.
    pub fn multipliers_for(&self, x: &[f64]) -> Vec<f64> {
        let mut w = vec![0.0; self.n_coords];
        for comp in &self.components {
            let n = comp.cols.len();
            for (k, &inv) in comp.inv_eigs.iter().enumerate() {
                let proj: f64 = (0..n).map(|i| comp.range[(i, k)] * x[comp.cols[i]]).sum();
                for i in 0..n {
                    w[comp.cols[i]] += comp.range[(i, k)] * proj * inv;
                }
            }
        }
        let mut lambda = vec![0.0; self.rows.len()];
        for (c, col) in self.columns.iter().enumerate() {
            for &(r, v) in col {
                lambda[r] -= v * w[c];
            }
        }
        lambda
    }

    /// Per-equality Hermitian operators (solver frame) from row multipliers.
    pub fn multiplier_operators(&self, sys: &ConstraintSystem, lambda: &[f64]) -> Vec<LabeledOperator> {
        let mut per_eq: Vec<Vec<(usize, f64)>> = vec![Vec::new(); sys.equalities.len()];
        for (&(e, coord), &l) in self.rows.iter().zip(lambda) {
            per_eq[e].push((coord, l));
        }
        sys.equalities
            .iter()
            .zip(per_eq)
            .map(|(eq, coords)| herm_from_sparse(sys.registry(), &eq.systems, &coords))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coordinates_round_trip() {
        let x: Vec<f64> = (0..9).map(|k| (k as f64 * 0.37).sin()).collect();
        let m = herm_from_coords(3, &x);
        assert_eq!(coords_of_herm(&m).len(), 9);
        for (a, b) in x.iter().zip(coords_of_herm(&m)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn basis_is_orthonormal() {
        let r = 3;
        let mats: Vec<Mat<c64>> = (0..9)
            .map(|k| {
                let mut m = Mat::<c64>::zeros(r, r);
                for (a, b, v) in basis_entries(r, k) {
                    m[(a, b)] = v;
                }
                m
            })
            .collect();
        for i in 0..9 {
            for j in 0..9 {
                let mut ip = c64::new(0.0, 0.0);
                for a in 0..r {
                    for b in 0..r {
                        ip += mats[i][(a, b)].conj() * mats[j][(a, b)];
                    }
                }
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((ip.re - want).abs() < 1e-15 && ip.im.abs() < 1e-15);
            }
        }
    }

    #[test]
    fn pair_indexing_is_consistent() {
        let r = 5;
        for p in 0..r * (r - 1) / 2 {
            let (a, b) = pair_of(r, p);
            assert!(a < b);
            assert_eq!(pair_index(r, a, b), p);
        }
    }
}
