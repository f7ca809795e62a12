//! QC-QC and QC-CC decompositions and their verification.
//!
//! A QC-QC witness W_(K,k) is keyed by the slot bitmask K of operations already
//! applied and the next slot k ∉ K; it acts on P, the inputs/outputs of K, and
//! the input of k. A QC-CC order witness W_(k_1..k_n) acts on P, the
//! inputs/outputs of k_1..k_{n−1}, and the input of k_n; terminal witnesses
//! W_(k_1..k_N,F) act on the whole registry.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::{c, psd_sqrt, union, DephasingBasis, LabeledOperator, Matrix, OperatorJson, SpaceRegistry};
use crate::process::{full_mask, slots_in, ProcessMatrix, RoleMap, ValidityReport};

pub type QcQcKey = (u32, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct QcQcDecomposition {
    pub witnesses: BTreeMap<QcQcKey, LabeledOperator>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QcCcDecomposition {
    /// Keyed by ordered slot sequences of length 1..=N.
    pub order_witnesses: BTreeMap<Vec<usize>, LabeledOperator>,
    /// Keyed by full orderings of the N slots.
    pub terminal_witnesses: BTreeMap<Vec<usize>, LabeledOperator>,
}

/// All (K, k) pairs with K a strict subset and k ∉ K.
pub fn qcqc_keys(n: usize) -> Vec<QcQcKey> {
    let mut out = Vec::new();
    for mask in 0..full_mask(n) {
        for k in 0..n {
            if mask & (1 << k) == 0 {
                out.push((mask, k));
            }
        }
    }
    out
}

/// Ordered sequences of distinct slots of the given length.
pub fn sequences(n: usize, len: usize) -> Vec<Vec<usize>> {
    fn rec(n: usize, len: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == len {
            out.push(cur.clone());
            return;
        }
        for k in 0..n {
            if !cur.contains(&k) {
                cur.push(k);
                rec(n, len, cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    rec(n, len, &mut Vec::with_capacity(len), &mut out);
    out
}

pub fn mask_of(seq: &[usize]) -> u32 {
    seq.iter().fold(0, |m, &k| m | (1 << k))
}

/// Systems of W_(K,k): P ∪ A_IO^K ∪ A_I^k.
pub fn qcqc_support(roles: &RoleMap, key: QcQcKey) -> Vec<usize> {
    union(&union(roles.past(), &roles.io_of(key.0)), &[roles.input(key.1)])
}

/// Systems of W_(k_1..k_n): P ∪ A_IO^{k_1..k_{n−1}} ∪ A_I^{k_n}.
pub fn order_support(roles: &RoleMap, seq: &[usize]) -> Vec<usize> {
    let (last, head) = seq.split_last().expect("nonempty sequence");
    qcqc_support(roles, (mask_of(head), *last))
}

fn seq_name(seq: &[usize]) -> String {
    let parts: Vec<String> = seq.iter().map(|k| (k + 1).to_string()).collect();
    format!("({})", parts.join(","))
}

fn key_name(n: usize, key: QcQcKey) -> String {
    let parts: Vec<String> = slots_in(key.0, n).map(|k| (k + 1).to_string()).collect();
    format!("({{{}}},{})", parts.join(","), key.1 + 1)
}

fn check_support(w: &LabeledOperator, want: &[usize], what: &str) -> Result<()> {
    if w.systems() != want {
        return Err(Error::Decomposition(format!(
            "witness {what} acts on {:?}, expected {:?}",
            w.system_names(),
            w.registry().names_of(want)
        )));
    }
    Ok(())
}

fn relative_min_eig(w: &LabeledOperator) -> Result<f64> {
    Ok(w.min_eigenvalue()? / w.norm_inf().max(1.0))
}

fn normalization_gap(w: &ProcessMatrix) -> f64 {
    (w.op().trace().re - w.normalization_target()).abs()
}

impl QcQcDecomposition {
    pub fn get(&self, mask: u32, k: usize) -> Result<&LabeledOperator> {
        self.witnesses
            .get(&(mask, k))
            .ok_or_else(|| Error::Decomposition(format!("missing witness for set {mask:#b}, next slot {}", k + 1)))
    }

    /// Checks that exactly the expected keys are present with the expected
    /// supports.
    pub fn check_shape(&self, w: &ProcessMatrix) -> Result<()> {
        let roles = w.roles();
        let keys = qcqc_keys(roles.n_slots());
        if self.witnesses.len() != keys.len() {
            return Err(Error::Decomposition(format!(
                "{} witnesses for {} expected",
                self.witnesses.len(),
                keys.len()
            )));
        }
        for key in keys {
            let op = self.get(key.0, key.1)?;
            if op.registry() != w.registry() {
                return Err(Error::Decomposition("witness built on another registry".into()));
            }
            check_support(op, &qcqc_support(roles, key), &key_name(roles.n_slots(), key))?;
        }
        Ok(())
    }

    /// Applies a dephasing to every witness acting on the basis' system.
    pub fn dephase(&self, basis: &DephasingBasis) -> Result<Self> {
        let witnesses = self
            .witnesses
            .iter()
            .map(|(k, op)| Ok((*k, dephase_if_present(op, basis)?)))
            .collect::<Result<_>>()?;
        Ok(Self { witnesses })
    }

    pub fn scale(&self, f: f64) -> Self {
        Self { witnesses: self.witnesses.iter().map(|(k, op)| (*k, op.scale(f))).collect() }
    }

    /// Witness-wise convex combination (1−p)·self + p·other.
    pub fn mix(&self, other: &Self, p: f64) -> Result<Self> {
        let mut witnesses = BTreeMap::new();
        for (k, a) in &self.witnesses {
            let b = other
                .witnesses
                .get(k)
                .ok_or_else(|| Error::Decomposition("mixing decompositions with different keys".into()))?;
            witnesses.insert(*k, a.scale(1.0 - p).add(&b.scale(p))?);
        }
        Ok(Self { witnesses })
    }

    pub fn to_json(&self, n: usize) -> DecompositionJson {
        let witnesses = self
            .witnesses
            .iter()
            .map(|(&(mask, k), op)| WitnessJson {
                index: WitnessIndex {
                    set: Some(slots_in(mask, n).map(|s| s + 1).collect()),
                    next: Some(k + 1),
                    order: None,
                    future: None,
                },
                operator: op.to_json(),
            })
            .collect();
        DecompositionJson { kind: DecompositionKind::Qcqc, witnesses }
    }
}

fn dephase_if_present(op: &LabeledOperator, basis: &DephasingBasis) -> Result<LabeledOperator> {
    let sys = op.registry().index_of(&basis.system)?;
    if op.systems().contains(&sys) {
        op.dephase(basis)
    } else {
        Ok(op.clone())
    }
}

impl QcCcDecomposition {
    pub fn order(&self, seq: &[usize]) -> Result<&LabeledOperator> {
        self.order_witnesses
            .get(seq)
            .ok_or_else(|| Error::Decomposition(format!("missing order witness {}", seq_name(seq))))
    }

    pub fn terminal(&self, seq: &[usize]) -> Result<&LabeledOperator> {
        self.terminal_witnesses
            .get(seq)
            .ok_or_else(|| Error::Decomposition(format!("missing terminal witness {}", seq_name(seq))))
    }

    pub fn check_shape(&self, w: &ProcessMatrix) -> Result<()> {
        let roles = w.roles();
        let n = roles.n_slots();
        let expected: usize = (1..=n).map(|len| sequences(n, len).len()).sum();
        if self.order_witnesses.len() != expected || self.terminal_witnesses.len() != sequences(n, n).len() {
            return Err(Error::Decomposition(format!(
                "{} order and {} terminal witnesses for {} slots",
                self.order_witnesses.len(),
                self.terminal_witnesses.len(),
                n
            )));
        }
        for len in 1..=n {
            for seq in sequences(n, len) {
                let op = self.order(&seq)?;
                if op.registry() != w.registry() {
                    return Err(Error::Decomposition("witness built on another registry".into()));
                }
                check_support(op, &order_support(roles, &seq), &seq_name(&seq))?;
            }
        }
        let all = w.registry().all();
        for seq in sequences(n, n) {
            check_support(self.terminal(&seq)?, &all, &format!("{},F", seq_name(&seq)))?;
        }
        Ok(())
    }

    pub fn dephase(&self, basis: &DephasingBasis) -> Result<Self> {
        let map = |m: &BTreeMap<Vec<usize>, LabeledOperator>| -> Result<BTreeMap<Vec<usize>, LabeledOperator>> {
            m.iter().map(|(k, op)| Ok((k.clone(), dephase_if_present(op, basis)?))).collect()
        };
        Ok(Self { order_witnesses: map(&self.order_witnesses)?, terminal_witnesses: map(&self.terminal_witnesses)? })
    }

    /// Sums over the orders inside each K: W_(K,k) = Σ_{orderings of K} W_(…,k).
    pub fn collapse_to_qcqc(&self, roles: &RoleMap) -> Result<QcQcDecomposition> {
        let n = roles.n_slots();
        let mut witnesses: BTreeMap<QcQcKey, LabeledOperator> = BTreeMap::new();
        for len in 1..=n {
            for seq in sequences(n, len) {
                let (last, head) = seq.split_last().expect("nonempty");
                let key = (mask_of(head), *last);
                let op = self.order(&seq)?;
                match witnesses.get_mut(&key) {
                    Some(acc) => acc.add_scaled(op, 1.0)?,
                    None => {
                        witnesses.insert(key, op.clone());
                    }
                }
            }
        }
        Ok(QcQcDecomposition { witnesses })
    }

    pub fn to_json(&self) -> DecompositionJson {
        let one_based = |s: &[usize]| s.iter().map(|k| k + 1).collect::<Vec<_>>();
        let mut witnesses: Vec<WitnessJson> = self
            .order_witnesses
            .iter()
            .map(|(seq, op)| WitnessJson {
                index: WitnessIndex { set: None, next: None, order: Some(one_based(seq)), future: None },
                operator: op.to_json(),
            })
            .collect();
        witnesses.extend(self.terminal_witnesses.iter().map(|(seq, op)| WitnessJson {
            index: WitnessIndex { set: None, next: None, order: Some(one_based(seq)), future: Some(true) },
            operator: op.to_json(),
        }));
        DecompositionJson { kind: DecompositionKind::Qccc, witnesses }
    }
}

/// Residuals of the QC-QC characterization for a given decomposition.
pub fn verify_qcqc(w: &ProcessMatrix, d: &QcQcDecomposition, tol: f64) -> Result<ValidityReport> {
    d.check_shape(w)?;
    let roles = w.roles();
    let n = roles.n_slots();
    let full = full_mask(n);
    let mut residuals = BTreeMap::new();

    // Σ_k W_(K∖k,k) ⊗ 𝟙^{A_O^k} for a nonempty K.
    let incoming = |mask: u32| -> Result<LabeledOperator> {
        let mut acc: Option<LabeledOperator> = None;
        for k in slots_in(mask, n) {
            let term = d.get(mask & !(1 << k), k)?.tensor_identity(&[roles.output(k)])?;
            match acc.as_mut() {
                Some(a) => a.add_scaled(&term, 1.0)?,
                None => acc = Some(term),
            }
        }
        Ok(acc.expect("nonempty mask"))
    };
    // Σ_{k∉K} Tr_{A_I^k} W_(K,k).
    let outgoing = |mask: u32| -> Result<LabeledOperator> {
        let mut acc: Option<LabeledOperator> = None;
        for k in (0..n).filter(|k| mask & (1 << k) == 0) {
            let term = d.get(mask, k)?.partial_trace(&[roles.input(k)])?;
            match acc.as_mut() {
                Some(a) => a.add_scaled(&term, 1.0)?,
                None => acc = Some(term),
            }
        }
        Ok(acc.expect("strict subset"))
    };

    if n == 0 {
        return Err(Error::Decomposition("process has no slots".into()));
    }
    residuals.insert("final".to_string(), w.future_marginal().distance(&incoming(full)?)?);
    for mask in 1..full {
        let name = format!("layer {}", crate::process::slot_set_name(mask, n));
        residuals.insert(name, outgoing(mask)?.distance(&incoming(mask)?)?);
    }
    let id_p = LabeledOperator::identity(w.registry(), roles.past());
    residuals.insert("initial".to_string(), outgoing(0)?.distance(&id_p)?);

    let mut min_eig = relative_min_eig(w.op())?;
    for op in d.witnesses.values() {
        min_eig = min_eig.min(relative_min_eig(op)?);
    }
    Ok(ValidityReport::new(residuals, normalization_gap(w), min_eig, tol))
}

/// Residuals of the QC-CC characterization for a given decomposition.
pub fn verify_qccc(w: &ProcessMatrix, d: &QcCcDecomposition, tol: f64) -> Result<ValidityReport> {
    d.check_shape(w)?;
    let roles = w.roles();
    let n = roles.n_slots();
    if n == 0 {
        return Err(Error::Decomposition("process has no slots".into()));
    }
    let mut residuals = BTreeMap::new();

    let mut total = LabeledOperator::zeros(w.registry(), &w.registry().all());
    for seq in sequences(n, n) {
        let t = d.terminal(&seq)?;
        total.add_scaled(t, 1.0)?;
        let lhs = t.partial_trace(roles.future())?;
        let rhs = d.order(&seq)?.tensor_identity(&[roles.output(seq[n - 1])])?;
        residuals.insert(format!("terminal {}", seq_name(&seq)), lhs.distance(&rhs)?);
    }
    residuals.insert("total".to_string(), total.distance(w.op())?);

    for len in 1..n {
        for seq in sequences(n, len) {
            let mut acc: Option<LabeledOperator> = None;
            for k in (0..n).filter(|k| !seq.contains(k)) {
                let mut next = seq.clone();
                next.push(k);
                let term = d.order(&next)?.partial_trace(&[roles.input(k)])?;
                match acc.as_mut() {
                    Some(a) => a.add_scaled(&term, 1.0)?,
                    None => acc = Some(term),
                }
            }
            let rhs = d.order(&seq)?.tensor_identity(&[roles.output(seq[len - 1])])?;
            residuals.insert(format!("layer {}", seq_name(&seq)), acc.expect("strict prefix").distance(&rhs)?);
        }
    }

    let mut init = LabeledOperator::zeros(w.registry(), roles.past());
    for k in 0..n {
        init.add_scaled(&d.order(&[k])?.partial_trace(&[roles.input(k)])?, 1.0)?;
    }
    let id_p = LabeledOperator::identity(w.registry(), roles.past());
    residuals.insert("initial".to_string(), init.distance(&id_p)?);

    let mut min_eig = f64::INFINITY;
    for op in d.order_witnesses.values().chain(d.terminal_witnesses.values()) {
        min_eig = min_eig.min(relative_min_eig(op)?);
    }
    Ok(ValidityReport::new(residuals, normalization_gap(w), min_eig, tol))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecompositionKind {
    Qcqc,
    Qccc,
}

/// Witness key in JSON form; slots are 1-based. QC-QC witnesses use
/// `set` + `next`, QC-CC witnesses use `order` (+ `future: true` for the
/// terminal ones).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WitnessIndex {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub set: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub future: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WitnessJson {
    pub index: WitnessIndex,
    pub operator: OperatorJson,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionJson {
    pub kind: DecompositionKind,
    pub witnesses: Vec<WitnessJson>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Decomposition {
    QcQc(QcQcDecomposition),
    QcCc(QcCcDecomposition),
}

impl Decomposition {
    pub fn to_json(&self, n_slots: usize) -> DecompositionJson {
        match self {
            Decomposition::QcQc(d) => d.to_json(n_slots),
            Decomposition::QcCc(d) => d.to_json(),
        }
    }

    pub fn from_json(registry: &Arc<SpaceRegistry>, json: &DecompositionJson) -> Result<Self> {
        let zero_based = |v: &[usize]| -> Result<Vec<usize>> {
            v.iter()
                .map(|&k| k.checked_sub(1).ok_or_else(|| Error::Decomposition("slots are numbered from 1".into())))
                .collect()
        };
        match json.kind {
            DecompositionKind::Qcqc => {
                let mut witnesses = BTreeMap::new();
                for wj in &json.witnesses {
                    let (Some(set), Some(next)) = (&wj.index.set, wj.index.next) else {
                        return Err(Error::Decomposition("qcqc witness index needs `set` and `next`".into()));
                    };
                    let set = zero_based(set)?;
                    let next = zero_based(&[next])?[0];
                    let key = (mask_of(&set), next);
                    let op = LabeledOperator::from_json(registry, &wj.operator)?;
                    if witnesses.insert(key, op).is_some() {
                        return Err(Error::Decomposition("duplicate qcqc witness index".into()));
                    }
                }
                Ok(Decomposition::QcQc(QcQcDecomposition { witnesses }))
            }
            DecompositionKind::Qccc => {
                let mut order_witnesses = BTreeMap::new();
                let mut terminal_witnesses = BTreeMap::new();
                for wj in &json.witnesses {
                    let Some(order) = &wj.index.order else {
                        return Err(Error::Decomposition("qccc witness index needs `order`".into()));
                    };
                    let seq = zero_based(order)?;
                    let op = LabeledOperator::from_json(registry, &wj.operator)?;
                    let target =
                        if wj.index.future.unwrap_or(false) { &mut terminal_witnesses } else { &mut order_witnesses };
                    if target.insert(seq, op).is_some() {
                        return Err(Error::Decomposition("duplicate qccc witness index".into()));
                    }
                }
                Ok(Decomposition::QcCc(QcCcDecomposition { order_witnesses, terminal_witnesses }))
            }
        }
    }

    pub fn verify(&self, w: &ProcessMatrix, tol: f64) -> Result<ValidityReport> {
        match self {
            Decomposition::QcQc(d) => verify_qcqc(w, d, tol),
            Decomposition::QcCc(d) => verify_qccc(w, d, tol),
        }
    }
}

fn random_psd(
    registry: &Arc<SpaceRegistry>,
    systems: &[usize],
    dephased: &[usize],
    rng: &mut ChaCha20Rng,
) -> Result<LabeledOperator> {
    let d = registry.dim_of(systems);
    let g = Matrix::from_fn(d, d, |_, _| {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        c(re, im)
    });
    let mut op = LabeledOperator::new(registry.clone(), systems.to_vec(), &g * g.adjoint())?;
    for &s in dephased.iter().filter(|s| systems.contains(s)) {
        op = op.dephase(&DephasingBasis::computational(registry.name(s), registry.dim(s)))?;
    }
    Ok(op)
}

/// (X ⊗ 𝟙) Y (X ⊗ 𝟙) for Hermitian X on a subset of Y's systems.
fn sandwich(x: &LabeledOperator, y: &LabeledOperator) -> Result<LabeledOperator> {
    let extra: Vec<usize> = y.systems().iter().copied().filter(|s| !x.systems().contains(s)).collect();
    let big = x.tensor_identity(&extra)?;
    big.mul(y)?.mul(&big)
}

/// Rescales random PSD operators Q̃_j so that Σ_j Tr_{traced_j} Q_j = R:
/// Q_j = (R^{1/2} T^{−1/2} ⊗ 𝟙) Q̃_j (T^{−1/2} R^{1/2} ⊗ 𝟙), T = Σ_j Tr Q̃_j.
fn normalize_branches(
    raw: Vec<(LabeledOperator, Vec<usize>)>,
    target: &LabeledOperator,
) -> Result<Vec<LabeledOperator>> {
    let mut t = LabeledOperator::zeros(target.registry(), target.systems());
    for (q, traced) in &raw {
        t.add_scaled(&q.partial_trace(traced)?, 1.0)?;
    }
    let t_inv = t.with_matrix(psd_sqrt(t.matrix(), true));
    let r_half = target.with_matrix(psd_sqrt(target.matrix(), false));
    raw.iter().map(|(q, _)| sandwich(&r_half, &sandwich(&t_inv, q)?)).collect()
}

/// Seeded random QC-QC with its decomposition, built layer by layer. With
/// `diagonal`, every non-future system is dephased in the computational
/// basis throughout.
pub fn random_qcqc(
    registry: &Arc<SpaceRegistry>,
    roles: &RoleMap,
    diagonal: bool,
    seed: u64,
) -> Result<(ProcessMatrix, QcQcDecomposition)> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = roles.n_slots();
    let dephased = if diagonal { crate::process::non_future(roles) } else { Vec::new() };
    let mut witnesses: BTreeMap<QcQcKey, LabeledOperator> = BTreeMap::new();
    let incoming = |mask: u32, witnesses: &BTreeMap<QcQcKey, LabeledOperator>| -> Result<LabeledOperator> {
        if mask == 0 {
            return Ok(LabeledOperator::identity(registry, roles.past()));
        }
        let mut acc = LabeledOperator::zeros(registry, &union(roles.past(), &roles.io_of(mask)));
        for k in slots_in(mask, n) {
            let prev = &witnesses[&(mask & !(1 << k), k)];
            acc.add_scaled(&prev.tensor_identity(&[roles.output(k)])?, 1.0)?;
        }
        Ok(acc)
    };
    for size in 0..n {
        for mask in (0..full_mask(n)).filter(|m| m.count_ones() as usize == size) {
            let target = incoming(mask, &witnesses)?;
            let nexts: Vec<usize> = (0..n).filter(|k| mask & (1 << k) == 0).collect();
            let raw = nexts
                .iter()
                .map(|&k| {
                    let q = random_psd(registry, &qcqc_support(roles, (mask, k)), &dephased, &mut rng)?;
                    Ok((q, vec![roles.input(k)]))
                })
                .collect::<Result<Vec<_>>>()?;
            for (k, op) in nexts.into_iter().zip(normalize_branches(raw, &target)?) {
                witnesses.insert((mask, k), op);
            }
        }
    }
    let target = incoming(full_mask(n), &witnesses)?;
    let q = random_psd(registry, &registry.all(), &dephased, &mut rng)?;
    let w = normalize_branches(vec![(q, roles.future().to_vec())], &target)?.remove(0);
    let w = symmetrize(&w);
    let decomposition = QcQcDecomposition { witnesses: witnesses.iter().map(|(k, v)| (*k, symmetrize(v))).collect() };
    Ok((ProcessMatrix::new(w, roles.clone())?, decomposition))
}

/// Seeded random QC-CC with its decomposition, built order by order.
pub fn random_qccc(
    registry: &Arc<SpaceRegistry>,
    roles: &RoleMap,
    diagonal: bool,
    seed: u64,
) -> Result<(ProcessMatrix, QcCcDecomposition)> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = roles.n_slots();
    let dephased = if diagonal { crate::process::non_future(roles) } else { Vec::new() };
    let mut order_witnesses: BTreeMap<Vec<usize>, LabeledOperator> = BTreeMap::new();
    for len in 0..n {
        for seq in sequences(n, len) {
            let target = match seq.last() {
                None => LabeledOperator::identity(registry, roles.past()),
                Some(&last) => order_witnesses[&seq].tensor_identity(&[roles.output(last)])?,
            };
            let nexts: Vec<usize> = (0..n).filter(|k| !seq.contains(k)).collect();
            let raw = nexts
                .iter()
                .map(|&k| {
                    let q = random_psd(registry, &qcqc_support(roles, (mask_of(&seq), k)), &dephased, &mut rng)?;
                    Ok((q, vec![roles.input(k)]))
                })
                .collect::<Result<Vec<_>>>()?;
            for (k, op) in nexts.into_iter().zip(normalize_branches(raw, &target)?) {
                let mut next = seq.clone();
                next.push(k);
                order_witnesses.insert(next, symmetrize(&op));
            }
        }
    }
    let mut terminal_witnesses = BTreeMap::new();
    let mut total = LabeledOperator::zeros(registry, &registry.all());
    for seq in sequences(n, n) {
        let target = order_witnesses[&seq].tensor_identity(&[roles.output(seq[n - 1])])?;
        let q = random_psd(registry, &registry.all(), &dephased, &mut rng)?;
        let t = symmetrize(&normalize_branches(vec![(q, roles.future().to_vec())], &target)?.remove(0));
        total.add_scaled(&t, 1.0)?;
        terminal_witnesses.insert(seq, t);
    }
    Ok((ProcessMatrix::new(total, roles.clone())?, QcCcDecomposition { order_witnesses, terminal_witnesses }))
}

fn symmetrize(op: &LabeledOperator) -> LabeledOperator {
    let m = op.matrix();
    op.with_matrix((m + m.adjoint()).map(|z| z * 0.5))
}

/// Single fixed order 1 → 2 → … → N with the supplied channel-like random
/// structure; every other ordering carries zero weight.
pub fn fixed_order_qccc(
    registry: &Arc<SpaceRegistry>,
    roles: &RoleMap,
    seed: u64,
) -> Result<(ProcessMatrix, QcCcDecomposition)> {
    let (_, full) = random_qccc(registry, roles, false, seed)?;
    let n = roles.n_slots();
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed);
    let identity_order: Vec<usize> = (0..n).collect();
    let mut order_witnesses = BTreeMap::new();
    let mut target = LabeledOperator::identity(registry, roles.past());
    for len in 1..=n {
        let seq = identity_order[..len].to_vec();
        let q = random_psd(registry, &order_support(roles, &seq), &[], &mut rng)?;
        let op = symmetrize(&normalize_branches(vec![(q, vec![roles.input(len - 1)])], &target)?.remove(0));
        target = op.tensor_identity(&[roles.output(len - 1)])?;
        order_witnesses.insert(seq, op);
    }
    let q = random_psd(registry, &registry.all(), &[], &mut rng)?;
    let w = symmetrize(&normalize_branches(vec![(q, roles.future().to_vec())], &target)?.remove(0));
    let mut d = QcCcDecomposition { order_witnesses: BTreeMap::new(), terminal_witnesses: BTreeMap::new() };
    for (seq, op) in &full.order_witnesses {
        let own = order_witnesses.get(seq).cloned();
        d.order_witnesses.insert(seq.clone(), own.unwrap_or_else(|| op.scale(0.0)));
    }
    for seq in full.terminal_witnesses.keys() {
        let t = if *seq == identity_order { w.clone() } else { w.scale(0.0) };
        d.terminal_witnesses.insert(seq.clone(), t);
    }
    Ok((ProcessMatrix::new(w, roles.clone())?, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::{check_validity, standard_registry, white_noise_process};

    #[test]
    fn key_and_sequence_counts() {
        assert_eq!(qcqc_keys(1).len(), 1);
        assert_eq!(qcqc_keys(2).len(), 4);
        assert_eq!(qcqc_keys(3).len(), 3 + 6 + 3);
        assert_eq!(sequences(3, 2).len(), 6);
        assert_eq!(sequences(3, 3).len(), 6);
    }

    fn white_noise_split(reg: &Arc<SpaceRegistry>, roles: &RoleMap) -> QcQcDecomposition {
        let d_ai = reg.dim(roles.input(0)) as f64;
        let d_bi = reg.dim(roles.input(1)) as f64;
        // Tr_F of white noise is 𝟙/(d_AI d_BI); split it evenly between the two orders.
        let half = 0.5 / (d_ai * d_bi);
        let id = |key: QcQcKey, f: f64| LabeledOperator::identity(reg, &qcqc_support(roles, key)).scale(f);
        let mut witnesses = BTreeMap::new();
        witnesses.insert((0b01, 1), id((0b01, 1), half));
        witnesses.insert((0b10, 0), id((0b10, 0), half));
        witnesses.insert((0, 0), id((0, 0), half * d_bi));
        witnesses.insert((0, 1), id((0, 1), half * d_ai));
        QcQcDecomposition { witnesses }
    }

    #[test]
    fn white_noise_symmetric_split_verifies() {
        let (reg, roles) = standard_registry(&["A", "B"], 2, 2, 2).unwrap();
        let w = white_noise_process(&reg, &roles).unwrap();
        let d = white_noise_split(&reg, &roles);
        let rep = verify_qcqc(&w, &d, 1e-12).unwrap();
        assert!(rep.verdict, "{rep:?}");

        let mut bad = d.clone();
        let neg = bad.witnesses[&(0, 0)].scale(-1.0);
        bad.witnesses.insert((0, 0), neg);
        assert!(!verify_qcqc(&w, &bad, 1e-9).unwrap().verdict);
    }

    #[test]
    fn missing_witness_is_an_error() {
        let (reg, roles) = standard_registry(&["A", "B"], 2, 2, 2).unwrap();
        let w = white_noise_process(&reg, &roles).unwrap();
        let mut d = white_noise_split(&reg, &roles);
        d.witnesses.remove(&(0, 1));
        assert!(matches!(verify_qcqc(&w, &d, 1e-9), Err(Error::Decomposition(_))));
    }

    #[test]
    fn random_qcqc_verifies_and_is_valid() {
        for n in 1..=3 {
            let names = ["A", "B", "C"];
            let (reg, roles) = standard_registry(&names[..n], 2, 2, 2).unwrap();
            for (seed, diagonal) in [(1, false), (2, true)] {
                let (w, d) = random_qcqc(&reg, &roles, diagonal, seed).unwrap();
                let rep = verify_qcqc(&w, &d, 1e-9).unwrap();
                assert!(rep.verdict, "n={n} {rep:?}");
                assert!(check_validity(&w, 1e-9).unwrap().verdict);
            }
        }
    }

    #[test]
    fn random_qccc_verifies_and_collapses() {
        let (reg, roles) = standard_registry(&["A", "B", "C"], 2, 2, 1).unwrap();
        let (w, d) = random_qccc(&reg, &roles, false, 4).unwrap();
        assert!(verify_qccc(&w, &d, 1e-9).unwrap().verdict);
        let collapsed = d.collapse_to_qcqc(&roles).unwrap();
        assert!(verify_qcqc(&w, &collapsed, 1e-9).unwrap().verdict);
        assert!(check_validity(&w, 1e-9).unwrap().verdict);
    }

    #[test]
    fn fixed_order_circuit_verifies() {
        let (reg, roles) = standard_registry(&["A", "B"], 2, 2, 2).unwrap();
        let (w, d) = fixed_order_qccc(&reg, &roles, 8).unwrap();
        let rep = verify_qccc(&w, &d, 1e-9).unwrap();
        assert!(rep.verdict, "{rep:?}");
        assert_eq!(d.terminal(&[1, 0]).unwrap().norm_inf(), 0.0);
    }

    #[test]
    fn decomposition_json_roundtrip() {
        let (reg, roles) = standard_registry(&["A", "B"], 2, 2, 1).unwrap();
        let (w, d) = random_qccc(&reg, &roles, true, 3).unwrap();
        let dd = Decomposition::QcCc(d);
        let text = serde_json::to_string(&dd.to_json(2)).unwrap();
        let back = Decomposition::from_json(&reg, &serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, dd);
        assert!(back.verify(&w, 1e-9).unwrap().verdict);
        let q = Decomposition::QcQc(white_noise_split(&reg, &roles));
        let text = serde_json::to_string(&q.to_json(2)).unwrap();
        assert_eq!(Decomposition::from_json(&reg, &serde_json::from_str(&text).unwrap()).unwrap(), q);
    }
}
