//! Process matrices: role assignment, validity constraints, slot contraction
//! and test-instance generators.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::{
    c, difference, hermiticity_defect, union, DephasingBasis, LabeledOperator, Matrix, OperatorJson, SpaceRegistry,
    SystemLabel, HERMITIAN_TOL,
};

/// Role of one registry subsystem. Slots are 0-based internally.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Past,
    Input(usize),
    Output(usize),
    Future,
}

/// Subsystem indices grouped by role.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoleMap {
    roles: Vec<Role>,
    past: Vec<usize>,
    future: Vec<usize>,
    inputs: Vec<usize>,
    outputs: Vec<usize>,
}

impl RoleMap {
    /// One role per registry subsystem. The past and future may consist of
    /// several subsystems or none at all (a trivial space).
    pub fn new(registry: &SpaceRegistry, roles: Vec<Role>) -> Result<Self> {
        if roles.len() != registry.len() {
            return Err(Error::Roles(format!("{} roles for {} subsystems", roles.len(), registry.len())));
        }
        let n = roles
            .iter()
            .filter_map(|r| match r {
                Role::Input(k) | Role::Output(k) => Some(k + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        let mut inputs = vec![usize::MAX; n];
        let mut outputs = vec![usize::MAX; n];
        let (mut past, mut future) = (Vec::new(), Vec::new());
        for (idx, role) in roles.iter().enumerate() {
            match *role {
                Role::Past => past.push(idx),
                Role::Future => future.push(idx),
                Role::Input(k) | Role::Output(k) => {
                    let slot = if matches!(role, Role::Input(_)) { &mut inputs[k] } else { &mut outputs[k] };
                    if *slot != usize::MAX {
                        return Err(Error::Roles(format!(
                            "slot {} has two {} systems",
                            k + 1,
                            if matches!(role, Role::Input(_)) { "input" } else { "output" }
                        )));
                    }
                    *slot = idx;
                }
            }
        }
        for k in 0..n {
            if inputs[k] == usize::MAX || outputs[k] == usize::MAX {
                return Err(Error::Roles(format!("slot {} needs exactly one input and one output", k + 1)));
            }
        }
        Ok(Self { roles, past, future, inputs, outputs })
    }

    /// Roles by subsystem name; systems not listed are rejected.
    pub fn from_names(registry: &SpaceRegistry, named: &[(&str, Role)]) -> Result<Self> {
        let mut roles: Vec<Option<Role>> = vec![None; registry.len()];
        for (name, role) in named {
            let idx = registry.index_of(name)?;
            if roles[idx].replace(*role).is_some() {
                return Err(Error::Roles(format!("system `{name}` assigned twice")));
            }
        }
        let roles = roles
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.ok_or_else(|| Error::Roles(format!("system `{}` has no role", registry.name(i)))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(registry, roles)
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn role(&self, idx: usize) -> Role {
        self.roles[idx]
    }

    pub fn n_slots(&self) -> usize {
        self.inputs.len()
    }

    pub fn past(&self) -> &[usize] {
        &self.past
    }

    pub fn future(&self) -> &[usize] {
        &self.future
    }

    pub fn input(&self, k: usize) -> usize {
        self.inputs[k]
    }

    pub fn output(&self, k: usize) -> usize {
        self.outputs[k]
    }

    /// Input and output of slot k.
    pub fn io(&self, k: usize) -> Vec<usize> {
        union(&[self.inputs[k]], &[self.outputs[k]])
    }

    /// Inputs and outputs of every slot in `mask`.
    pub fn io_of(&self, mask: u32) -> Vec<usize> {
        let mut out = Vec::new();
        for k in slots_in(mask, self.n_slots()) {
            out = union(&out, &self.io(k));
        }
        out
    }

    pub fn all_io(&self) -> Vec<usize> {
        self.io_of(full_mask(self.n_slots()))
    }

    pub fn inputs_of(&self, mask: u32) -> Vec<usize> {
        let mut v: Vec<usize> = slots_in(mask, self.n_slots()).map(|k| self.inputs[k]).collect();
        v.sort_unstable();
        v
    }

    pub fn outputs_of(&self, mask: u32) -> Vec<usize> {
        let mut v: Vec<usize> = slots_in(mask, self.n_slots()).map(|k| self.outputs[k]).collect();
        v.sort_unstable();
        v
    }
}

pub fn full_mask(n: usize) -> u32 {
    if n == 0 {
        0
    } else {
        (1u32 << n) - 1
    }
}

pub fn slots_in(mask: u32, n: usize) -> impl Iterator<Item = usize> {
    (0..n).filter(move |k| mask & (1 << k) != 0)
}

/// A process matrix: a Hermitian operator on the whole registry together
/// with its role assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcessMatrix {
    op: LabeledOperator,
    roles: RoleMap,
}

impl ProcessMatrix {
    pub fn new(op: LabeledOperator, roles: RoleMap) -> Result<Self> {
        let reg = op.registry().clone();
        if op.systems() != reg.all().as_slice() {
            return Err(Error::Roles(format!(
                "process must act on every registry system, got {:?}",
                op.system_names()
            )));
        }
        if roles.roles().len() != reg.len() {
            return Err(Error::Roles("role map does not match registry".into()));
        }
        let defect = hermiticity_defect(op.matrix());
        if defect > HERMITIAN_TOL * op.norm_inf().max(1.0) {
            return Err(Error::NotHermitian(defect));
        }
        Ok(Self { op, roles })
    }

    pub fn op(&self) -> &LabeledOperator {
        &self.op
    }

    pub fn registry(&self) -> &Arc<SpaceRegistry> {
        self.op.registry()
    }

    pub fn roles(&self) -> &RoleMap {
        &self.roles
    }

    pub fn n_slots(&self) -> usize {
        self.roles.n_slots()
    }

    pub fn with_op(&self, op: LabeledOperator) -> Result<Self> {
        Self::new(op, self.roles.clone())
    }

    pub fn dim_past(&self) -> usize {
        self.registry().dim_of(self.roles.past())
    }

    pub fn dim_future(&self) -> usize {
        self.registry().dim_of(self.roles.future())
    }

    /// d_P · Π_k d_{A_O^k}.
    pub fn normalization_target(&self) -> f64 {
        let outs = self.roles.outputs_of(full_mask(self.n_slots()));
        (self.dim_past() * self.registry().dim_of(&outs)) as f64
    }

    /// Tr_F W.
    pub fn future_marginal(&self) -> LabeledOperator {
        self.op.partial_trace(self.roles.future()).expect("future systems belong to the process")
    }

    pub fn dephase(&self, basis: &DephasingBasis) -> Result<Self> {
        self.with_op(self.op.dephase(basis)?)
    }

    pub fn scale(&self, f: f64) -> Self {
        Self { op: self.op.scale(f), roles: self.roles.clone() }
    }

    /// (1−p)·self + p·other.
    pub fn mix(&self, other: &Self, p: f64) -> Result<Self> {
        if self.roles != other.roles {
            return Err(Error::Roles("mixing processes with different roles".into()));
        }
        let op = self.op.scale(1.0 - p).add(&other.op.scale(p))?;
        self.with_op(op)
    }

    pub fn to_json(&self) -> ProcessJson {
        let reg = self.registry();
        let registry = reg
            .systems()
            .iter()
            .zip(self.roles.roles())
            .map(|(s, r)| {
                let (role, slot) = match *r {
                    Role::Past => (RoleName::Past, None),
                    Role::Future => (RoleName::Future, None),
                    Role::Input(k) => (RoleName::Input, Some(k + 1)),
                    Role::Output(k) => (RoleName::Output, Some(k + 1)),
                };
                RegistryEntry { name: s.name.clone(), dim: s.dim, role, slot }
            })
            .collect();
        ProcessJson { registry, operator: self.op.to_json() }
    }

    pub fn from_json(json: &ProcessJson) -> Result<Self> {
        let reg = SpaceRegistry::new(json.registry.iter().map(|e| SystemLabel::new(e.name.clone(), e.dim)).collect())?;
        let roles = json
            .registry
            .iter()
            .map(|e| match (e.role, e.slot) {
                (RoleName::Past, None) => Ok(Role::Past),
                (RoleName::Future, None) => Ok(Role::Future),
                (RoleName::Input, Some(k)) if k >= 1 => Ok(Role::Input(k - 1)),
                (RoleName::Output, Some(k)) if k >= 1 => Ok(Role::Output(k - 1)),
                (RoleName::Past | RoleName::Future, Some(_)) => {
                    Err(Error::Roles(format!("`{}`: past/future systems take no slot", e.name)))
                }
                _ => Err(Error::Roles(format!("`{}`: input/output systems need a slot number ≥ 1", e.name))),
            })
            .collect::<Result<Vec<_>>>()?;
        let roles = RoleMap::new(&reg, roles)?;
        let op = LabeledOperator::from_json(&reg, &json.operator)?;
        Self::new(op, roles)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoleName {
    Past,
    Input,
    Output,
    Future,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub name: String,
    pub dim: usize,
    pub role: RoleName,
    /// 1-based slot number for input and output systems.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessJson {
    pub registry: Vec<RegistryEntry>,
    pub operator: OperatorJson,
}

/// Residuals of a family of equality constraints plus a PSD margin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub residuals: BTreeMap<String, f64>,
    pub normalization_gap: f64,
    pub psd_min_eig: f64,
    pub verdict: bool,
}

impl ValidityReport {
    pub fn new(residuals: BTreeMap<String, f64>, normalization_gap: f64, psd_min_eig: f64, tol: f64) -> Self {
        let verdict = residuals.values().all(|&r| r <= tol) && normalization_gap <= tol && psd_min_eig >= -tol;
        Self { residuals, normalization_gap, psd_min_eig, verdict }
    }

    pub fn max_residual(&self) -> f64 {
        self.residuals.values().copied().fold(self.normalization_gap, f64::max)
    }
}

pub(crate) fn slot_set_name(mask: u32, n: usize) -> String {
    let parts: Vec<String> = slots_in(mask, n).map(|k| (k + 1).to_string()).collect();
    format!("slots{{{}}}", parts.join(","))
}

/// Validity check against the N-partite constraint family: one residual per
/// nonempty slot subset K, one for the past, plus normalization and
/// positivity. Residuals are max-entry norms; the normalization gap is the
/// absolute trace deviation.
pub fn check_validity(w: &ProcessMatrix, tol: f64) -> Result<ValidityReport> {
    let residuals = validity_residuals(w)?;
    finish_report(w, residuals, tol)
}

fn finish_report(w: &ProcessMatrix, residuals: BTreeMap<String, f64>, tol: f64) -> Result<ValidityReport> {
    let gap = (w.op().trace().re - w.normalization_target()).abs();
    let scale = w.op().norm_inf().max(1.0);
    let min_eig = w.op().min_eigenvalue()? / scale;
    Ok(ValidityReport::new(residuals, gap, min_eig, tol))
}

/// The affine validity residuals for any number of slots.
pub fn validity_residuals(w: &ProcessMatrix) -> Result<BTreeMap<String, f64>> {
    let roles = w.roles();
    let n = w.n_slots();
    let mut out = BTreeMap::new();
    for mask in 1..=full_mask(n) {
        let rest = full_mask(n) & !mask;
        let traced = union(&roles.io_of(rest), roles.future());
        let mut x = w.op().partial_trace(&traced)?;
        for k in slots_in(mask, n) {
            x = x.one_minus(&[roles.output(k)])?;
        }
        out.insert(slot_set_name(mask, n), x.norm_inf());
    }
    let traced = union(&roles.all_io(), roles.future());
    let x = w.op().partial_trace(&traced)?.one_minus(roles.past())?;
    out.insert("past".into(), x.norm_inf());
    Ok(out)
}

/// Validity check written out for exactly two slots; residual names match
/// [`check_validity`].
pub fn check_validity_bipartite(w: &ProcessMatrix, tol: f64) -> Result<ValidityReport> {
    let roles = w.roles();
    if roles.n_slots() != 2 {
        return Err(Error::Roles(format!("bipartite check needs 2 slots, process has {}", roles.n_slots())));
    }
    let (ai, ao, bi, bo) = (roles.input(0), roles.output(0), roles.input(1), roles.output(1));
    let f = roles.future();
    let p = roles.past();
    let op = w.op();

    let tr_f = op.partial_trace(f)?;
    let both = tr_f.one_minus(&[ao])?.one_minus(&[bo])?;
    let only_a = op.partial_trace(&union(&[bi, bo], f))?.one_minus(&[ao])?;
    let only_b = op.partial_trace(&union(&[ai, ao], f))?.one_minus(&[bo])?;
    let past = op.partial_trace(&union(&[ai, ao, bi, bo], f))?.one_minus(p)?;

    let mut residuals = BTreeMap::new();
    residuals.insert("slots{1,2}".to_string(), both.norm_inf());
    residuals.insert("slots{1}".to_string(), only_a.norm_inf());
    residuals.insert("slots{2}".to_string(), only_b.norm_inf());
    residuals.insert("past".to_string(), past.norm_inf());
    finish_report(w, residuals, tol)
}

/// Choi matrix of the induced map P → F:
/// M = Tr_{A_IO}[(A_1 ⊗ … ⊗ A_N)^T ⊗ 𝟙^{PF} · W].
pub fn contract(w: &ProcessMatrix, slots: &[LabeledOperator]) -> Result<LabeledOperator> {
    let roles = w.roles();
    if slots.len() != roles.n_slots() {
        return Err(Error::DimensionMismatch(format!(
            "{} slot operators for {} slots",
            slots.len(),
            roles.n_slots()
        )));
    }
    let reg = w.registry();
    let mut product = LabeledOperator::identity(reg, &[]);
    for (k, a) in slots.iter().enumerate() {
        if a.registry() != reg {
            return Err(Error::DimensionMismatch("slot operator built on another registry".into()));
        }
        if a.systems() != roles.io(k).as_slice() {
            return Err(Error::DimensionMismatch(format!(
                "slot {} operator acts on {:?}, expected its input and output",
                k + 1,
                a.system_names()
            )));
        }
        product = product.tensor(a)?;
    }
    let pf = union(roles.past(), roles.future());
    let full = product.transpose().tensor_identity(&pf)?;
    full.mul(w.op())?.partial_trace(&roles.all_io())
}

/// 𝟙 / (Π_k d_{A_I^k} · d_F), the maximally mixed valid process.
pub fn white_noise_process(registry: &Arc<SpaceRegistry>, roles: &RoleMap) -> Result<ProcessMatrix> {
    let ins = roles.inputs_of(full_mask(roles.n_slots()));
    let scale = (registry.dim_of(&ins) * registry.dim_of(roles.future())) as f64;
    let op = LabeledOperator::identity(registry, &registry.all()).scale(1.0 / scale);
    ProcessMatrix::new(op, roles.clone())
}

/// Orthogonal projection of a Hermitian operator onto the linear span of the
/// validity constraints' kernel.
pub fn project_onto_valid_subspace(x: &LabeledOperator, roles: &RoleMap) -> Result<LabeledOperator> {
    let n = roles.n_slots();
    let mut y = x.clone();
    for mask in 1..=full_mask(n) {
        let rest = full_mask(n) & !mask;
        let replaced = union(&roles.io_of(rest), roles.future());
        let mut q = y.trace_and_replace(&replaced)?;
        for k in slots_in(mask, n) {
            q = q.one_minus(&[roles.output(k)])?;
        }
        y = y.sub(&q)?;
    }
    let replaced = union(&roles.all_io(), roles.future());
    let q = y.trace_and_replace(&replaced)?.one_minus(roles.past())?;
    y.sub(&q)
}

pub const RANDOM_PROCESS_MARGIN: f64 = 1e-6;

/// Seeded random valid process, exactly diagonal (computational basis) on
/// every subsystem in `dephased`, with λ_min ≥ 1e−6 after the smallest
/// sufficient admixture of white noise.
pub fn random_valid_process(
    registry: &Arc<SpaceRegistry>,
    roles: &RoleMap,
    dephased: &[usize],
    seed: u64,
) -> Result<ProcessMatrix> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let d = registry.total_dim();
    let g = DMatrix::from_fn(d, d, |_, _| {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        c(re, im)
    });
    let herm: Matrix = (&g + g.adjoint()).map(|z| z * 0.5);
    let mut x = LabeledOperator::new(registry.clone(), registry.all(), herm)?;
    for &s in dephased {
        x = x.dephase(&DephasingBasis::computational(registry.name(s), registry.dim(s)))?;
    }
    let noise = white_noise_process(registry, roles)?;
    let mut y = project_onto_valid_subspace(&x, roles)?;
    let target = noise.normalization_target();
    let shift = (target - y.trace().re) / d as f64;
    y.add_scaled(&LabeledOperator::identity(registry, &registry.all()), shift)?;
    let base = ProcessMatrix::new(y, roles.clone())?;
    mix_to_margin(&base, &noise, RANDOM_PROCESS_MARGIN)
}

/// Smallest p ∈ [0, 1] (to bisection precision, rounded up) with
/// λ_min((1−p)·w + p·noise) ≥ margin.
pub fn mix_to_margin(w: &ProcessMatrix, noise: &ProcessMatrix, margin: f64) -> Result<ProcessMatrix> {
    let lam = |p: f64| -> Result<f64> { w.mix(noise, p)?.op().min_eigenvalue() };
    if lam(0.0)? >= margin {
        return Ok(w.clone());
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if lam(mid)? >= margin {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    w.mix(noise, hi)
}

/// The N-slot role map for a registry whose systems are named P, F and
/// `<slot>_I`, `<slot>_O` in slot order. Convenience for tests and demos.
pub fn standard_registry(slot_names: &[&str], d_p: usize, d_io: usize, d_f: usize) -> Result<(Arc<SpaceRegistry>, RoleMap)> {
    let mut systems = vec![SystemLabel::new("P", d_p)];
    let mut named = vec![("P".to_string(), Role::Past)];
    for (k, s) in slot_names.iter().enumerate() {
        systems.push(SystemLabel::new(format!("{s}_I"), d_io));
        systems.push(SystemLabel::new(format!("{s}_O"), d_io));
        named.push((format!("{s}_I"), Role::Input(k)));
        named.push((format!("{s}_O"), Role::Output(k)));
    }
    systems.push(SystemLabel::new("F", d_f));
    named.push(("F".to_string(), Role::Future));
    let reg = SpaceRegistry::new(systems)?;
    let refs: Vec<(&str, Role)> = named.iter().map(|(n, r)| (n.as_str(), *r)).collect();
    let roles = RoleMap::from_names(&reg, &refs)?;
    Ok((reg, roles))
}

/// All systems of the process except the future ones.
pub fn non_future(roles: &RoleMap) -> Vec<usize> {
    difference(&(0..roles.roles().len()).collect::<Vec<_>>(), roles.future())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::max_abs;

    #[test]
    fn white_noise_is_valid_with_zero_residuals() {
        let (reg, roles) = standard_registry(&["A", "B"], 2, 2, 2).unwrap();
        let w = white_noise_process(&reg, &roles).unwrap();
        let rep = check_validity(&w, 1e-10).unwrap();
        assert!(rep.verdict);
        assert!(rep.residuals.values().all(|&r| r == 0.0));
        assert_eq!(w.op().matrix()[(0, 0)].re, 1.0 / 8.0);
    }

    #[test]
    fn single_slot_white_noise() {
        let reg = SpaceRegistry::qubits(&["A_I", "A_O"]).unwrap();
        let roles = RoleMap::new(&reg, vec![Role::Input(0), Role::Output(0)]).unwrap();
        let w = white_noise_process(&reg, &roles).unwrap();
        assert!(max_abs(&(w.op().matrix() - Matrix::identity(4, 4).map(|z| z * 0.5))) == 0.0);
        assert!(check_validity(&w, 1e-12).unwrap().verdict);
    }

    #[test]
    fn role_errors() {
        let reg = SpaceRegistry::qubits(&["A_I", "A_O", "B_I"]).unwrap();
        let bad = RoleMap::new(&reg, vec![Role::Input(0), Role::Output(0), Role::Input(1)]);
        assert!(matches!(bad, Err(Error::Roles(_))));
        let dup = RoleMap::new(&reg, vec![Role::Input(0), Role::Output(0), Role::Input(0)]);
        assert!(matches!(dup, Err(Error::Roles(_))));
    }

    #[test]
    fn random_processes_are_valid_and_dephased() {
        let (reg, roles) = standard_registry(&["A", "B"], 2, 2, 2).unwrap();
        let dephased = non_future(&roles);
        for seed in 0..5 {
            let w = random_valid_process(&reg, &roles, &dephased, seed).unwrap();
            let rep = check_validity(&w, 1e-9).unwrap();
            assert!(rep.verdict, "{rep:?}");
            for &s in &dephased {
                let b = DephasingBasis::computational(reg.name(s), 2);
                assert!(w.op().off_diagonal_mass(&b).unwrap() <= 1e-12);
            }
            assert!(w.op().min_eigenvalue().unwrap() >= RANDOM_PROCESS_MARGIN * (1.0 - 1e-6));
        }
    }

    #[test]
    fn random_process_is_seed_deterministic() {
        let (reg, roles) = standard_registry(&["A"], 2, 2, 2).unwrap();
        let a = random_valid_process(&reg, &roles, &[], 9).unwrap();
        let b = random_valid_process(&reg, &roles, &[], 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bipartite_and_generic_paths_agree() {
        let (reg, roles) = standard_registry(&["A", "B"], 2, 2, 2).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let d = reg.total_dim();
        let g = DMatrix::from_fn(d, d, |_, _| {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            c(re, im)
        });
        let op = LabeledOperator::new(reg.clone(), reg.all(), &g + g.adjoint()).unwrap();
        let w = ProcessMatrix::new(op, roles).unwrap();
        let generic = check_validity(&w, 1e-9).unwrap();
        let bip = check_validity_bipartite(&w, 1e-9).unwrap();
        assert_eq!(generic.residuals.keys().collect::<Vec<_>>(), bip.residuals.keys().collect::<Vec<_>>());
        for (k, v) in &generic.residuals {
            assert!((v - bip.residuals[k]).abs() <= 1e-12, "{k}");
            assert!(*v > 1e-3);
        }
    }

    #[test]
    fn process_json_roundtrip() {
        let (reg, roles) = standard_registry(&["A"], 2, 2, 1).unwrap();
        let w = random_valid_process(&reg, &roles, &[], 1).unwrap();
        let text = serde_json::to_string(&w.to_json()).unwrap();
        let back = ProcessMatrix::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(w, back);
    }
}
