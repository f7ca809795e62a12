//! Labeled tensor-product operator algebra.
//!
//! Every operator is tagged with the subsystems it acts on. Subsystems are
//! identified by their position in a shared [`SpaceRegistry`], and matrices are
//! always stored with their factors in registry order (first factor most
//! significant), so two operators over the same subsystem set compare
//! entry-wise.

use std::collections::HashSet;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type Matrix = DMatrix<C64>;

pub const HERMITIAN_TOL: f64 = 1e-10;
pub const ORTHONORMAL_TOL: f64 = 1e-10;
pub const EIG_TOL: f64 = 1e-9;

#[inline]
pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemLabel {
    pub name: String,
    pub dim: usize,
}

impl SystemLabel {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self { name: name.into(), dim }
    }
}

/// Ordered collection of named subsystems. The order is the canonical tensor
/// factor order used by every operator built on this registry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpaceRegistry {
    systems: Vec<SystemLabel>,
}

impl SpaceRegistry {
    pub fn new(systems: Vec<SystemLabel>) -> Result<Arc<Self>> {
        let mut seen = HashSet::new();
        for s in &systems {
            if s.dim == 0 {
                return Err(Error::Registry(format!("system `{}` has dimension 0", s.name)));
            }
            if !seen.insert(s.name.as_str()) {
                return Err(Error::Registry(format!("duplicate system name `{}`", s.name)));
            }
        }
        Ok(Arc::new(Self { systems }))
    }

    pub fn qubits(names: &[&str]) -> Result<Arc<Self>> {
        Self::new(names.iter().map(|n| SystemLabel::new(*n, 2)).collect())
    }

    pub fn systems(&self) -> &[SystemLabel] {
        &self.systems
    }

    pub fn len(&self) -> usize {
        self.systems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.systems.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.systems
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::UnknownSystem(name.to_string()))
    }

    /// Registry indices for a list of names, sorted canonically.
    pub fn ids(&self, names: &[&str]) -> Result<Vec<usize>> {
        let mut out = names.iter().map(|n| self.index_of(n)).collect::<Result<Vec<_>>>()?;
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.systems[idx].name
    }

    pub fn dim(&self, idx: usize) -> usize {
        self.systems[idx].dim
    }

    pub fn dim_of(&self, ids: &[usize]) -> usize {
        ids.iter().map(|&i| self.systems[i].dim).product()
    }

    pub fn all(&self) -> Vec<usize> {
        (0..self.systems.len()).collect()
    }

    pub fn total_dim(&self) -> usize {
        self.systems.iter().map(|s| s.dim).product()
    }

    pub fn names_of(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.systems[i].name.clone()).collect()
    }
}

pub(crate) fn union(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = a.iter().chain(b).copied().collect();
    out.sort_unstable();
    out.dedup();
    out
}

pub(crate) fn difference(a: &[usize], b: &[usize]) -> Vec<usize> {
    a.iter().copied().filter(|x| !b.contains(x)).collect()
}

/// For an ordered factor list, maps every composite index onto its
/// (kept-factor index, other-factor index) pair.
pub(crate) struct Split {
    pub kept: Vec<usize>,
    pub other: Vec<usize>,
    pub kept_dim: usize,
    pub other_dim: usize,
}

impl Split {
    /// `dims[p]` is the dimension at factor position `p`; `keep[p]` selects the
    /// factors that make up the kept index.
    pub fn new(dims: &[usize], keep: &[bool]) -> Self {
        let total: usize = dims.iter().product();
        let kept_dim: usize = dims.iter().zip(keep).filter(|(_, &k)| k).map(|(d, _)| d).product();
        let other_dim = total / kept_dim;
        let mut kept = vec![0usize; total];
        let mut other = vec![0usize; total];
        let mut digits = vec![0usize; dims.len()];
        for idx in 0..total {
            let (mut k, mut o) = (0usize, 0usize);
            for (p, &d) in digits.iter().enumerate() {
                if keep[p] {
                    k = k * dims[p] + d;
                } else {
                    o = o * dims[p] + d;
                }
            }
            kept[idx] = k;
            other[idx] = o;
            for p in (0..dims.len()).rev() {
                digits[p] += 1;
                if digits[p] < dims[p] {
                    break;
                }
                digits[p] = 0;
            }
        }
        Self { kept, other, kept_dim, other_dim }
    }
}

pub fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0, |acc, z| acc.max(z.norm()))
}

pub fn hermiticity_defect(m: &Matrix) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

/// Hermitian inner product Re Tr(A† B).
pub fn hs_inner(a: &Matrix, b: &Matrix) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x.conj() * y).re).sum()
}

pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    a.kronecker(b)
}

/// A complex square matrix tagged with the subsystems it acts on.
#[derive(Clone, Debug)]
pub struct LabeledOperator {
    registry: Arc<SpaceRegistry>,
    systems: Vec<usize>,
    mat: Matrix,
}

impl PartialEq for LabeledOperator {
    fn eq(&self, other: &Self) -> bool {
        self.registry == other.registry && self.systems == other.systems && self.mat == other.mat
    }
}

impl LabeledOperator {
    /// Builds an operator from a matrix whose factors are already in
    /// canonical (sorted) order.
    pub fn new(registry: Arc<SpaceRegistry>, mut systems: Vec<usize>, mat: Matrix) -> Result<Self> {
        let sorted = {
            let mut s = systems.clone();
            s.sort_unstable();
            s.dedup();
            s
        };
        if sorted.len() != systems.len() {
            return Err(Error::DimensionMismatch("repeated subsystem".into()));
        }
        if let Some(&bad) = systems.iter().find(|&&i| i >= registry.len()) {
            return Err(Error::UnknownSystem(format!("#{bad}")));
        }
        if sorted != systems {
            return Err(Error::DimensionMismatch(
                "subsystems must be listed in registry order; use from_factors for arbitrary orders".into(),
            ));
        }
        systems = sorted;
        let d = registry.dim_of(&systems);
        if mat.nrows() != d || mat.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "matrix is {}x{}, subsystems require {d}x{d}",
                mat.nrows(),
                mat.ncols()
            )));
        }
        Ok(Self { registry, systems, mat })
    }

    /// Builds an operator on `names` given in any order; the matrix factors
    /// follow the order of `names` and are permuted into canonical order.
    pub fn from_factors(registry: &Arc<SpaceRegistry>, names: &[&str], mat: Matrix) -> Result<Self> {
        let ids = names.iter().map(|n| registry.index_of(n)).collect::<Result<Vec<_>>>()?;
        let dims: Vec<usize> = ids.iter().map(|&i| registry.dim(i)).collect();
        let d: usize = dims.iter().product();
        if mat.nrows() != d || mat.ncols() != d {
            return Err(Error::DimensionMismatch(format!("expected {d}x{d} matrix")));
        }
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.sort_by_key(|&p| ids[p]);
        for w in order.windows(2) {
            if ids[w[0]] == ids[w[1]] {
                return Err(Error::OverlappingSystems(registry.name(ids[w[0]]).to_string()));
            }
        }
        let perm = permutation_indices(&dims, &order);
        let mut out = Matrix::zeros(d, d);
        for j in 0..d {
            for i in 0..d {
                out[(i, j)] = mat[(perm[i], perm[j])];
            }
        }
        let systems = order.iter().map(|&p| ids[p]).collect();
        Ok(Self { registry: registry.clone(), systems, mat: out })
    }

    /// Product of single-system factors, given in any order.
    pub fn product(registry: &Arc<SpaceRegistry>, factors: &[(&str, Matrix)]) -> Result<Self> {
        let mut mat = Matrix::from_element(1, 1, c(1.0, 0.0));
        let mut names = Vec::with_capacity(factors.len());
        for (name, m) in factors {
            mat = kron(&mat, m);
            names.push(*name);
        }
        Self::from_factors(registry, &names, mat)
    }

    pub fn identity(registry: &Arc<SpaceRegistry>, systems: &[usize]) -> Self {
        let mut systems = systems.to_vec();
        systems.sort_unstable();
        systems.dedup();
        let d = registry.dim_of(&systems);
        Self { registry: registry.clone(), systems, mat: Matrix::identity(d, d) }
    }

    pub fn zeros(registry: &Arc<SpaceRegistry>, systems: &[usize]) -> Self {
        let mut systems = systems.to_vec();
        systems.sort_unstable();
        systems.dedup();
        let d = registry.dim_of(&systems);
        Self { registry: registry.clone(), systems, mat: Matrix::zeros(d, d) }
    }

    pub fn registry(&self) -> &Arc<SpaceRegistry> {
        &self.registry
    }

    pub fn systems(&self) -> &[usize] {
        &self.systems
    }

    pub fn system_names(&self) -> Vec<String> {
        self.registry.names_of(&self.systems)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.mat
    }

    pub fn into_matrix(self) -> Matrix {
        self.mat
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.systems.iter().map(|&i| self.registry.dim(i)).collect()
    }

    pub fn with_matrix(&self, mat: Matrix) -> Self {
        debug_assert_eq!(mat.shape(), self.mat.shape());
        Self { registry: self.registry.clone(), systems: self.systems.clone(), mat }
    }

    pub fn trace(&self) -> C64 {
        self.mat.trace()
    }

    pub fn scale(&self, f: f64) -> Self {
        self.with_matrix(self.mat.map(|z| z * f))
    }

    pub fn norm_inf(&self) -> f64 {
        max_abs(&self.mat)
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        hermiticity_defect(&self.mat) <= tol * self.norm_inf().max(1.0)
    }

    pub fn adjoint(&self) -> Self {
        self.with_matrix(self.mat.adjoint())
    }

    /// Entry-wise transpose in the computational basis.
    pub fn transpose(&self) -> Self {
        self.with_matrix(self.mat.transpose())
    }

    fn same_space(&self, other: &Self) -> Result<()> {
        if self.registry != other.registry {
            return Err(Error::DimensionMismatch("operators live on different registries".into()));
        }
        if self.systems != other.systems {
            return Err(Error::DimensionMismatch(format!(
                "subsystems differ: {:?} vs {:?}",
                self.system_names(),
                other.system_names()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_space(other)?;
        Ok(self.with_matrix(&self.mat + &other.mat))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_space(other)?;
        Ok(self.with_matrix(&self.mat - &other.mat))
    }

    pub fn add_scaled(&mut self, other: &Self, f: f64) -> Result<()> {
        self.same_space(other)?;
        self.mat.zip_apply(&other.mat, |a, b| *a += b * f);
        Ok(())
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.same_space(other)?;
        Ok(self.with_matrix(&self.mat * &other.mat))
    }

    /// Max-entry distance between two operators on the same space.
    pub fn distance(&self, other: &Self) -> Result<f64> {
        self.same_space(other)?;
        Ok(max_abs(&(&self.mat - &other.mat)))
    }

    fn positions(&self, ids: &[usize]) -> Result<Vec<bool>> {
        for &i in ids {
            if !self.systems.contains(&i) {
                let name = if i < self.registry.len() { self.registry.name(i).to_string() } else { format!("#{i}") };
                return Err(Error::UnknownSystem(name));
            }
        }
        Ok(self.systems.iter().map(|s| ids.contains(s)).collect())
    }

    /// Kronecker product, reordered into canonical order.
    pub fn tensor(&self, other: &Self) -> Result<Self> {
        if self.registry != other.registry {
            return Err(Error::DimensionMismatch("operators live on different registries".into()));
        }
        if let Some(&s) = self.systems.iter().find(|s| other.systems.contains(s)) {
            return Err(Error::OverlappingSystems(self.registry.name(s).to_string()));
        }
        let systems = union(&self.systems, &other.systems);
        let dims: Vec<usize> = systems.iter().map(|&i| self.registry.dim(i)).collect();
        let keep: Vec<bool> = systems.iter().map(|s| self.systems.contains(s)).collect();
        let split = Split::new(&dims, &keep);
        let d = split.kept.len();
        let mut mat = Matrix::zeros(d, d);
        for j in 0..d {
            let (aj, bj) = (split.kept[j], split.other[j]);
            for i in 0..d {
                let a = self.mat[(split.kept[i], aj)];
                if a != C64::new(0.0, 0.0) {
                    mat[(i, j)] = a * other.mat[(split.other[i], bj)];
                }
            }
        }
        Ok(Self { registry: self.registry.clone(), systems, mat })
    }

    /// W ⊗ 𝟙 on `extra` (systems already present are rejected).
    pub fn tensor_identity(&self, extra: &[usize]) -> Result<Self> {
        let id = Self::identity(&self.registry, extra);
        self.tensor(&id)
    }

    pub fn partial_trace(&self, over: &[usize]) -> Result<Self> {
        let traced = self.positions(over)?;
        if over.is_empty() {
            return Ok(self.clone());
        }
        let keep: Vec<bool> = traced.iter().map(|t| !t).collect();
        let split = Split::new(&self.dims(), &keep);
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); split.other_dim];
        for (idx, &t) in split.other.iter().enumerate() {
            groups[t].push(idx);
        }
        let mut out = Matrix::zeros(split.kept_dim, split.kept_dim);
        for g in &groups {
            for &j in g {
                let kj = split.kept[j];
                for &i in g {
                    out[(split.kept[i], kj)] += self.mat[(i, j)];
                }
            }
        }
        let systems = difference(&self.systems, over);
        Ok(Self { registry: self.registry.clone(), systems, mat: out })
    }

    /// {}_X W = Tr_X(W) ⊗ 𝟙^X / d_X.
    pub fn trace_and_replace(&self, x: &[usize]) -> Result<Self> {
        let d = self.registry.dim_of(x) as f64;
        self.partial_trace(x)?.tensor_identity(x).map(|o| o.scale(1.0 / d))
    }

    /// {}_[1−X] W = W − {}_X W.
    pub fn one_minus(&self, x: &[usize]) -> Result<Self> {
        self.sub(&self.trace_and_replace(x)?)
    }

    /// Re-expresses the operator on another registry, matching systems by name.
    pub fn rebase(&self, registry: &Arc<SpaceRegistry>) -> Result<Self> {
        let names = self.system_names();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        for (n, &i) in refs.iter().zip(&self.systems) {
            let j = registry.index_of(n)?;
            if registry.dim(j) != self.registry.dim(i) {
                return Err(Error::DimensionMismatch(format!("system `{n}` changes dimension")));
            }
        }
        Self::from_factors(registry, &refs, self.mat.clone())
    }

    /// (U ⊗ 𝟙) W (U† ⊗ 1) with U acting on `system`.
    pub fn conjugate_local(&self, system: usize, u: &Matrix) -> Result<Self> {
        let keep = self.positions(&[system])?;
        let split = Split::new(&self.dims(), &keep);
        let d = split.kept_dim;
        if u.nrows() != d || u.ncols() != d {
            return Err(Error::DimensionMismatch("local unitary has wrong size".into()));
        }
        let total = self.dim();
        // compose[(rest, digit)] -> full index
        let mut compose = vec![0usize; total];
        for idx in 0..total {
            compose[split.other[idx] * d + split.kept[idx]] = idx;
        }
        let mut tmp = Matrix::zeros(total, total);
        for j in 0..total {
            for i in 0..total {
                let (r, s) = (split.other[i], split.kept[i]);
                let mut acc = C64::new(0.0, 0.0);
                for a in 0..d {
                    let ua = u[(s, a)];
                    if ua != C64::new(0.0, 0.0) {
                        acc += ua * self.mat[(compose[r * d + a], j)];
                    }
                }
                tmp[(i, j)] = acc;
            }
        }
        let mut out = Matrix::zeros(total, total);
        for j in 0..total {
            let (r, s) = (split.other[j], split.kept[j]);
            for b in 0..d {
                let ub = u[(s, b)].conj();
                if ub == C64::new(0.0, 0.0) {
                    continue;
                }
                let col = compose[r * d + b];
                for i in 0..total {
                    out[(i, j)] += tmp[(i, col)] * ub;
                }
            }
        }
        Ok(self.with_matrix(out))
    }

    /// Diagonal blocks conditioned on the computational-basis index of
    /// `over`: entry c is (⟨c|^{over} ⊗ 𝟙) W (|c⟩^{over} ⊗ 𝟙), an operator on
    /// the remaining systems. Cells are enumerated in canonical order.
    pub fn blocks(&self, over: &[usize]) -> Result<Vec<Matrix>> {
        let keep = self.positions(over)?;
        let split = Split::new(&self.dims(), &keep);
        let mut out = vec![Matrix::zeros(split.other_dim, split.other_dim); split.kept_dim];
        let n = self.dim();
        for j in 0..n {
            for i in 0..n {
                if split.kept[i] == split.kept[j] {
                    out[split.kept[i]][(split.other[i], split.other[j])] = self.mat[(i, j)];
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`blocks`](Self::blocks): Σ_c [[c]]^{over} ⊗ B_c on `systems`.
    pub fn from_blocks(registry: &Arc<SpaceRegistry>, systems: &[usize], over: &[usize], blocks: &[Matrix]) -> Result<Self> {
        let mut out = Self::zeros(registry, systems);
        let keep = out.positions(over)?;
        let split = Split::new(&out.dims(), &keep);
        if blocks.len() != split.kept_dim || blocks.iter().any(|b| b.nrows() != split.other_dim) {
            return Err(Error::DimensionMismatch("block count or size does not match the subsystems".into()));
        }
        let n = out.dim();
        for j in 0..n {
            for i in 0..n {
                if split.kept[i] == split.kept[j] {
                    out.mat[(i, j)] = blocks[split.kept[i]][(split.other[i], split.other[j])];
                }
            }
        }
        Ok(out)
    }

    /// Real diagonal, in canonical index order.
    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.mat[(i, i)].re).collect()
    }

    /// (D ⊗ 𝟙) W (D ⊗ 𝟙) for D diagonal on a subset of W's systems, given by
    /// its diagonal `d` (canonical order on `d_systems`).
    pub fn diagonal_congruence(&self, d_systems: &[usize], d: &[f64]) -> Result<Self> {
        let keep = self.positions(d_systems)?;
        let split = Split::new(&self.dims(), &keep);
        if d.len() != split.kept_dim {
            return Err(Error::DimensionMismatch("diagonal has wrong length".into()));
        }
        let n = self.dim();
        let mut out = self.mat.clone();
        for j in 0..n {
            let fj = d[split.kept[j]];
            for i in 0..n {
                out[(i, j)] *= d[split.kept[i]] * fj;
            }
        }
        Ok(self.with_matrix(out))
    }

    /// Zeros every entry whose `system` digits differ (dephasing in the
    /// computational basis).
    fn pinch_computational(&self, system: usize) -> Result<Self> {
        let keep = self.positions(&[system])?;
        let split = Split::new(&self.dims(), &keep);
        let mut out = self.mat.clone();
        let n = self.dim();
        for j in 0..n {
            for i in 0..n {
                if split.kept[i] != split.kept[j] {
                    out[(i, j)] = C64::new(0.0, 0.0);
                }
            }
        }
        Ok(self.with_matrix(out))
    }

    /// Δ_S(W) = Σ_i ([[i]] ⊗ 𝟙) W ([[i]] ⊗ 𝟙).
    pub fn dephase(&self, basis: &DephasingBasis) -> Result<Self> {
        let sys = self.registry.index_of(&basis.system)?;
        if basis.dim() != self.registry.dim(sys) {
            return Err(Error::InvalidBasis(format!(
                "basis has {} vectors, `{}` has dimension {}",
                basis.dim(),
                basis.system,
                self.registry.dim(sys)
            )));
        }
        if basis.is_computational() {
            return self.pinch_computational(sys);
        }
        let u = basis.unitary();
        let rotated = self.conjugate_local(sys, &u.adjoint())?;
        rotated.pinch_computational(sys)?.conjugate_local(sys, &u)
    }

    /// Largest |entry| coupling different basis states of `basis.system`.
    pub fn off_diagonal_mass(&self, basis: &DephasingBasis) -> Result<f64> {
        let sys = self.registry.index_of(&basis.system)?;
        let frame = if basis.is_computational() {
            self.clone()
        } else {
            self.conjugate_local(sys, &basis.unitary().adjoint())?
        };
        let keep = frame.positions(&[sys])?;
        let split = Split::new(&frame.dims(), &keep);
        let n = frame.dim();
        let mut worst = 0.0f64;
        for j in 0..n {
            for i in 0..n {
                if split.kept[i] != split.kept[j] {
                    worst = worst.max(frame.mat[(i, j)].norm());
                }
            }
        }
        Ok(worst)
    }

    pub fn is_diagonal_in(&self, basis: &DephasingBasis, tol: f64) -> Result<bool> {
        Ok(self.off_diagonal_mass(basis)? <= tol * self.norm_inf().max(1.0))
    }

    pub fn hermitian_eigs(&self) -> Result<(Vec<f64>, Matrix)> {
        let defect = hermiticity_defect(&self.mat);
        if defect > HERMITIAN_TOL * self.norm_inf().max(1.0) {
            return Err(Error::NotHermitian(defect));
        }
        Ok(hermitian_eigs(&self.mat))
    }

    pub fn min_eigenvalue(&self) -> Result<f64> {
        let defect = hermiticity_defect(&self.mat);
        if defect > HERMITIAN_TOL * self.norm_inf().max(1.0) {
            return Err(Error::NotHermitian(defect));
        }
        Ok(min_eigenvalue(&self.mat))
    }

    /// True iff λ_min ≥ −tol·max(1, ‖W‖∞).
    pub fn psd_check(&self, tol: f64) -> Result<bool> {
        Ok(self.min_eigenvalue()? >= -tol * self.norm_inf().max(1.0))
    }

    pub fn to_json(&self) -> OperatorJson {
        let n = self.dim();
        let mut entries = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let z = self.mat[(i, j)];
                entries.push([z.re, z.im]);
            }
        }
        OperatorJson { subsystems: self.system_names(), entries }
    }

    pub fn from_json(registry: &Arc<SpaceRegistry>, json: &OperatorJson) -> Result<Self> {
        let names: Vec<&str> = json.subsystems.iter().map(String::as_str).collect();
        let ids = names.iter().map(|n| registry.index_of(n)).collect::<Result<Vec<_>>>()?;
        let d = registry.dim_of(&ids);
        if json.entries.len() != d * d {
            return Err(Error::DimensionMismatch(format!(
                "expected {} entries for subsystems {:?}, found {}",
                d * d,
                json.subsystems,
                json.entries.len()
            )));
        }
        let mat = Matrix::from_fn(d, d, |i, j| {
            let [re, im] = json.entries[i * d + j];
            c(re, im)
        });
        Self::from_factors(registry, &names, mat)
    }
}

/// Index permutation taking canonical positions to source positions: the
/// factor at canonical slot `q` is source factor `order[q]`.
fn permutation_indices(dims: &[usize], order: &[usize]) -> Vec<usize> {
    let n = dims.len();
    let total: usize = dims.iter().product();
    let new_dims: Vec<usize> = order.iter().map(|&p| dims[p]).collect();
    let mut src_stride = vec![1usize; n];
    for p in (0..n.saturating_sub(1)).rev() {
        src_stride[p] = src_stride[p + 1] * dims[p + 1];
    }
    let mut out = vec![0usize; total];
    let mut digits = vec![0usize; n];
    for slot in out.iter_mut() {
        *slot = digits.iter().enumerate().map(|(q, &d)| d * src_stride[order[q]]).sum();
        for q in (0..n).rev() {
            digits[q] += 1;
            if digits[q] < new_dims[q] {
                break;
            }
            digits[q] = 0;
        }
    }
    out
}

pub(crate) fn to_faer(m: &Matrix) -> faer::Mat<C64> {
    faer::Mat::from_fn(m.nrows(), m.ncols(), |i, j| 0.5 * (m[(i, j)] + m[(j, i)].conj()))
}

/// Ascending eigenvalues and matching eigenvectors (columns) of a Hermitian
/// matrix (its Hermitian part, to be exact).
pub fn hermitian_eigs(m: &Matrix) -> (Vec<f64>, Matrix) {
    let n = m.nrows();
    if n == 0 {
        return (Vec::new(), Matrix::zeros(0, 0));
    }
    let eig = to_faer(m).self_adjoint_eigen(faer::Side::Lower).expect("Hermitian eigendecomposition converges");
    let s = eig.S().column_vector();
    let u = eig.U();
    let values = (0..n).map(|i| s[i].re).collect();
    (values, Matrix::from_fn(n, n, |i, j| u[(i, j)]))
}

pub fn min_eigenvalue(m: &Matrix) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let vals = to_faer(m).self_adjoint_eigenvalues(faer::Side::Lower).expect("Hermitian eigenvalues converge");
    vals.iter().copied().fold(f64::INFINITY, f64::min)
}

/// f applied to the spectrum of a Hermitian matrix.
pub fn hermitian_function(m: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    let n = m.nrows();
    let diagonal = (0..n).all(|j| (0..n).all(|i| i == j || m[(i, j)] == C64::new(0.0, 0.0)));
    if diagonal {
        return Matrix::from_fn(n, n, |i, j| if i == j { c(f(m[(i, i)].re), 0.0) } else { C64::new(0.0, 0.0) });
    }
    let (vals, vecs) = hermitian_eigs(m);
    let mut scaled = vecs.clone();
    for (j, &v) in vals.iter().enumerate() {
        let fv = f(v);
        scaled.column_mut(j).iter_mut().for_each(|z| *z *= fv);
    }
    &scaled * vecs.adjoint()
}

/// M^{1/2} (or its pseudo-inverse when `inverse`) of a PSD matrix; eigenvalues
/// below 1e−14 of the largest are treated as zero.
pub fn psd_sqrt(m: &Matrix, inverse: bool) -> Matrix {
    let top = max_abs(m).max(f64::MIN_POSITIVE);
    let cut = 1e-14 * top;
    hermitian_function(m, |v| {
        if v <= cut {
            0.0
        } else if inverse {
            1.0 / v.sqrt()
        } else {
            v.sqrt()
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    /// Computational basis {|0⟩, …, |d−1⟩}.
    Z,
    /// Fourier basis; {|+⟩, |−⟩} for qubits.
    X,
}

/// Orthonormal basis of one system, defining a dephasing map on it.
#[derive(Clone, Debug, PartialEq)]
pub struct DephasingBasis {
    pub system: String,
    vectors: Vec<DVector<C64>>,
    computational: bool,
}

impl DephasingBasis {
    pub fn new(system: impl Into<String>, vectors: Vec<DVector<C64>>) -> Result<Self> {
        let system = system.into();
        let d = vectors.len();
        if d == 0 {
            return Err(Error::InvalidBasis("empty basis".into()));
        }
        for (i, v) in vectors.iter().enumerate() {
            if v.len() != d {
                return Err(Error::InvalidBasis(format!("vector {i} has length {}, expected {d}", v.len())));
            }
            for (j, w) in vectors.iter().enumerate() {
                let ip = v.dotc(w);
                let want = if i == j { 1.0 } else { 0.0 };
                if (ip - c(want, 0.0)).norm() > ORTHONORMAL_TOL {
                    return Err(Error::InvalidBasis(format!("vectors {i},{j} overlap {ip}")));
                }
            }
        }
        let computational = vectors.iter().enumerate().all(|(i, v)| {
            v.iter().enumerate().all(|(k, z)| *z == if k == i { c(1.0, 0.0) } else { c(0.0, 0.0) })
        });
        Ok(Self { system, vectors, computational })
    }

    pub fn computational(system: impl Into<String>, dim: usize) -> Self {
        let vectors = (0..dim).map(|i| DVector::from_fn(dim, |k, _| c(if k == i { 1.0 } else { 0.0 }, 0.0))).collect();
        Self { system: system.into(), vectors, computational: true }
    }

    /// Fourier basis |x_k⟩ = Σ_j ω^{jk}|j⟩/√d; for d = 2 this is {|+⟩, |−⟩}.
    pub fn fourier(system: impl Into<String>, dim: usize) -> Self {
        let norm = 1.0 / (dim as f64).sqrt();
        let vectors = (0..dim)
            .map(|k| {
                DVector::from_fn(dim, |j, _| {
                    let phase = 2.0 * std::f64::consts::PI * (j * k) as f64 / dim as f64;
                    if dim == 2 {
                        c(if j * k % 2 == 0 { norm } else { -norm }, 0.0)
                    } else {
                        C64::from_polar(norm, phase)
                    }
                })
            })
            .collect();
        Self { system: system.into(), vectors, computational: dim == 1 }
    }

    pub fn of_kind(system: impl Into<String>, dim: usize, kind: BasisKind) -> Self {
        match kind {
            BasisKind::Z => Self::computational(system, dim),
            BasisKind::X => Self::fourier(system, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.vectors.len()
    }

    pub fn vectors(&self) -> &[DVector<C64>] {
        &self.vectors
    }

    pub fn is_computational(&self) -> bool {
        self.computational
    }

    /// Unitary with the basis vectors as columns.
    pub fn unitary(&self) -> Matrix {
        let d = self.dim();
        Matrix::from_fn(d, d, |i, j| self.vectors[j][i])
    }

    /// Projector |i⟩⟨i|.
    pub fn projector(&self, i: usize) -> Matrix {
        let v = &self.vectors[i];
        v * v.adjoint()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorJson {
    pub subsystems: Vec<String>,
    /// Row-major `[re, im]` pairs.
    pub entries: Vec<[f64; 2]>,
}

/// Common single-qubit matrices.
pub mod qubit {
    use super::{c, Matrix};

    pub fn id() -> Matrix {
        Matrix::identity(2, 2)
    }

    pub fn x() -> Matrix {
        Matrix::from_row_slice(2, 2, &[c(0.0, 0.0), c(1.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)])
    }

    pub fn z() -> Matrix {
        Matrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(-1.0, 0.0)])
    }

    /// [[i]] = |i⟩⟨i|.
    pub fn proj(i: usize) -> Matrix {
        let mut m = Matrix::zeros(2, 2);
        m[(i, i)] = c(1.0, 0.0);
        m
    }

    /// [[+]] = |+⟩⟨+|.
    pub fn plus() -> Matrix {
        Matrix::from_element(2, 2, c(0.5, 0.0))
    }

    pub fn hadamard() -> Matrix {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        Matrix::from_row_slice(2, 2, &[c(h, 0.0), c(h, 0.0), c(h, 0.0), c(-h, 0.0)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reg3() -> Arc<SpaceRegistry> {
        SpaceRegistry::qubits(&["A", "B", "C"]).unwrap()
    }

    fn random_matrix(n: usize, seed: u64) -> Matrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, n, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    }

    fn random_hermitian(reg: &Arc<SpaceRegistry>, ids: &[usize], seed: u64) -> LabeledOperator {
        let d = reg.dim_of(ids);
        let m = random_matrix(d, seed);
        LabeledOperator::new(reg.clone(), ids.to_vec(), &m + m.adjoint()).unwrap()
    }

    #[test]
    fn tensor_of_identities_is_identity() {
        let reg = reg3();
        let a = LabeledOperator::identity(&reg, &[0]);
        let b = LabeledOperator::identity(&reg, &[2]);
        let ab = a.tensor(&b).unwrap();
        assert_eq!(ab.systems(), &[0, 2]);
        assert_eq!(ab.matrix(), &Matrix::identity(4, 4));
    }

    #[test]
    fn tensor_rejects_overlap() {
        let reg = reg3();
        let a = LabeledOperator::identity(&reg, &[0, 1]);
        let b = LabeledOperator::identity(&reg, &[1]);
        assert!(matches!(a.tensor(&b), Err(Error::OverlappingSystems(_))));
    }

    #[test]
    fn tensor_reorders_into_canonical_order() {
        let reg = reg3();
        let x = LabeledOperator::new(reg.clone(), vec![2], qubit::x()).unwrap();
        let z = LabeledOperator::new(reg.clone(), vec![0], qubit::z()).unwrap();
        let xz = x.tensor(&z).unwrap();
        assert_eq!(xz.matrix(), &kron(&qubit::z(), &qubit::x()));
        let proj0 = LabeledOperator::new(reg.clone(), vec![0], qubit::proj(0)).unwrap();
        assert_eq!(proj0.tensor(&x).unwrap().trace(), c(0.0, 0.0));
    }

    #[test]
    fn from_factors_matches_kron_in_canonical_order() {
        let reg = reg3();
        let m = kron(&qubit::x(), &qubit::z());
        let op = LabeledOperator::from_factors(&reg, &["C", "A"], m).unwrap();
        assert_eq!(op.matrix(), &kron(&qubit::z(), &qubit::x()));
    }

    #[test]
    fn bell_marginal_is_maximally_mixed() {
        let reg = SpaceRegistry::qubits(&["A", "B"]).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let v = DVector::from_vec(vec![c(h, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(h, 0.0)]);
        let rho = LabeledOperator::new(reg.clone(), vec![0, 1], &v * v.adjoint()).unwrap();
        let marg = rho.partial_trace(&[1]).unwrap();
        assert!(max_abs(&(marg.matrix() - Matrix::identity(2, 2).map(|z| z * 0.5))) < 1e-15);
    }

    #[test]
    fn partial_trace_of_product_factorizes() {
        let reg = reg3();
        let a = random_hermitian(&reg, &[0, 2], 1);
        let b = random_hermitian(&reg, &[1], 2);
        let ab = a.tensor(&b).unwrap();
        let tr = ab.partial_trace(&[1]).unwrap();
        let expected = a.matrix().map(|z| z * b.trace());
        assert!(max_abs(&(tr.matrix() - expected)) < 1e-12);
        assert!((ab.partial_trace(&[0, 2]).unwrap().trace() - ab.trace()).norm() < 1e-12);
    }

    #[test]
    fn partial_trace_unknown_system() {
        let reg = reg3();
        let a = random_hermitian(&reg, &[0], 1);
        assert!(matches!(a.partial_trace(&[1]), Err(Error::UnknownSystem(_))));
    }

    #[test]
    fn trace_and_replace_projector_properties() {
        let reg = reg3();
        let id = LabeledOperator::identity(&reg, &[0, 1, 2]);
        assert_eq!(id.trace_and_replace(&[1]).unwrap().distance(&id).unwrap(), 0.0);
        assert_eq!(id.one_minus(&[0, 2]).unwrap().norm_inf(), 0.0);

        let w = random_hermitian(&reg, &[0, 1, 2], 7);
        let once = w.trace_and_replace(&[0, 2]).unwrap();
        let twice = once.trace_and_replace(&[0, 2]).unwrap();
        assert!(once.distance(&twice).unwrap() < 1e-12);
        assert!(once.one_minus(&[0, 2]).unwrap().norm_inf() < 1e-12);
        assert!((once.trace() - w.trace()).norm() < 1e-12);

        let v = random_hermitian(&reg, &[0, 1, 2], 8);
        let lhs = hs_inner(once.matrix(), v.matrix());
        let rhs = hs_inner(w.matrix(), v.trace_and_replace(&[0, 2]).unwrap().matrix());
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn tensor_partial_trace_adjointness() {
        let reg = reg3();
        let a = random_hermitian(&reg, &[1], 3);
        let w = random_hermitian(&reg, &[0, 1, 2], 4);
        let lhs = a.tensor_identity(&[0, 2]).unwrap().mul(&w).unwrap().trace();
        let rhs = a.mul(&w.partial_trace(&[0, 2]).unwrap()).unwrap().trace();
        assert!((lhs - rhs).norm() < 1e-10);
    }

    #[test]
    fn dephasing_plus_state_gives_maximally_mixed() {
        let reg = SpaceRegistry::qubits(&["A"]).unwrap();
        let plus = LabeledOperator::new(reg.clone(), vec![0], qubit::plus()).unwrap();
        let out = plus.dephase(&DephasingBasis::computational("A", 2)).unwrap();
        assert_eq!(out.matrix(), &Matrix::identity(2, 2).map(|z| z * 0.5));
        // In the X basis |+⟩ is already diagonal.
        let same = plus.dephase(&DephasingBasis::fourier("A", 2)).unwrap();
        assert!(same.distance(&plus).unwrap() < 1e-15);
    }

    #[test]
    fn dephasing_properties() {
        let reg = reg3();
        let w = random_hermitian(&reg, &[0, 1, 2], 11);
        for basis in [DephasingBasis::computational("B", 2), DephasingBasis::fourier("B", 2)] {
            let once = w.dephase(&basis).unwrap();
            let twice = once.dephase(&basis).unwrap();
            assert!(once.distance(&twice).unwrap() < 1e-12);
            assert!((once.trace() - w.trace()).norm() < 1e-12);
            let id = LabeledOperator::identity(&reg, &[0, 1, 2]);
            assert!(id.dephase(&basis).unwrap().distance(&id).unwrap() < 1e-12);
            // Tr_T Δ_S = Δ_S Tr_T for T disjoint from S, and Tr_S Δ_S = Tr_S.
            let lhs = once.partial_trace(&[2]).unwrap();
            let rhs = w.partial_trace(&[2]).unwrap().dephase(&basis).unwrap();
            assert!(lhs.distance(&rhs).unwrap() < 1e-12);
            let gone = once.partial_trace(&[1]).unwrap();
            assert!(gone.distance(&w.partial_trace(&[1]).unwrap()).unwrap() < 1e-12);
        }
    }

    #[test]
    fn dephasing_dimension_mismatch() {
        let reg = reg3();
        let w = random_hermitian(&reg, &[0], 1);
        assert!(matches!(w.dephase(&DephasingBasis::computational("A", 3)), Err(Error::InvalidBasis(_))));
    }

    #[test]
    fn basis_must_be_orthonormal() {
        let v = DVector::from_vec(vec![c(1.0, 0.0), c(0.0, 0.0)]);
        assert!(DephasingBasis::new("A", vec![v.clone(), v]).is_err());
    }

    #[test]
    fn eigs_of_simple_matrices() {
        let reg = reg3();
        let x = LabeledOperator::new(reg.clone(), vec![0], qubit::x()).unwrap();
        let (vals, _) = x.hermitian_eigs().unwrap();
        assert!((vals[0] + 1.0).abs() < 1e-14 && (vals[1] - 1.0).abs() < 1e-14);
        let id = LabeledOperator::identity(&reg, &[0, 1]);
        let (vals, _) = id.hermitian_eigs().unwrap();
        assert!(vals.iter().all(|v| (v - 1.0).abs() < 1e-14) && vals.len() == 4);
        assert!(id.psd_check(1e-10).unwrap());
        let z = LabeledOperator::new(reg.clone(), vec![1], qubit::z()).unwrap();
        assert!(!z.psd_check(1e-10).unwrap());
    }

    #[test]
    fn eigs_reconstruct_and_match_closed_form() {
        let reg = reg3();
        for seed in 0..20 {
            let w = random_hermitian(&reg, &[0], seed);
            let m = w.matrix();
            let tr = (m[(0, 0)] + m[(1, 1)]).re;
            let det = (m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)]).re;
            let closed = tr / 2.0 - (tr * tr / 4.0 - det).sqrt();
            let (vals, vecs) = w.hermitian_eigs().unwrap();
            assert!((vals[0] - closed).abs() < 1e-12);
            let lam = Matrix::from_diagonal(&DVector::from_iterator(2, vals.iter().map(|&v| c(v, 0.0))));
            let rec = &vecs * lam * vecs.adjoint();
            assert!(max_abs(&(rec - m)) <= EIG_TOL * w.norm_inf());
        }
    }

    #[test]
    fn eigs_reject_non_hermitian() {
        let reg = reg3();
        let m = Matrix::from_row_slice(2, 2, &[c(0.0, 0.0), c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)]);
        let op = LabeledOperator::new(reg, vec![0], m).unwrap();
        assert!(matches!(op.hermitian_eigs(), Err(Error::NotHermitian(_))));
    }

    #[test]
    fn json_roundtrip_preserves_factor_order() {
        let reg = reg3();
        let w = random_hermitian(&reg, &[0, 2], 5);
        let json = serde_json::to_string(&w.to_json()).unwrap();
        let back: OperatorJson = serde_json::from_str(&json).unwrap();
        let w2 = LabeledOperator::from_json(&reg, &back).unwrap();
        assert_eq!(w, w2);
    }
}
