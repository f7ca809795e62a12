use std::sync::Arc;

use proptest::prelude::*;

use procmat::classes::{random_qccc, random_qcqc};
use procmat::hilbert::{c, Matrix, SpaceRegistry, SystemLabel};
use procmat::process::{check_validity, random_valid_process, standard_registry};
use procmat::{qccc_membership, qcqc_membership, BasisKind, DephasingBasis, LabeledOperator, Status};

fn registry() -> Arc<SpaceRegistry> {
    SpaceRegistry::new(vec![SystemLabel::new("a", 2), SystemLabel::new("b", 3), SystemLabel::new("c", 2)]).unwrap()
}

fn hermitian(entries: &[(f64, f64)], n: usize) -> Matrix {
    let m = Matrix::from_fn(n, n, |i, j| {
        let (re, im) = entries[i * n + j];
        c(re, im)
    });
    (&m + m.adjoint()) * c(0.5, 0.0)
}

fn operator() -> impl Strategy<Value = LabeledOperator> {
    prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), 144).prop_map(|e| {
        let reg = registry();
        LabeledOperator::new(reg.clone(), reg.all(), hermitian(&e, 12)).unwrap()
    })
}

/// A nonempty set of systems with a basis kind for each.
fn bases() -> impl Strategy<Value = Vec<(usize, BasisKind)>> {
    prop::collection::btree_map(0..3usize, prop_oneof![Just(BasisKind::Z), Just(BasisKind::X)], 1..=3)
        .prop_map(|m| m.into_iter().collect())
}

fn dephase(op: &LabeledOperator, s: &[(usize, BasisKind)]) -> LabeledOperator {
    let reg = op.registry().clone();
    s.iter().fold(op.clone(), |acc, &(k, kind)| {
        if acc.systems().contains(&k) {
            acc.dephase(&DephasingBasis::of_kind(reg.name(k), reg.dim(k), kind)).unwrap()
        } else {
            acc
        }
    })
}

proptest! {
    #[test]
    fn dephasing_is_an_idempotent_unital_trace_preserving_projection(x in operator(), s in bases()) {
        let dx = dephase(&x, &s);
        prop_assert!(dephase(&dx, &s).distance(&dx).unwrap() <= 1e-12);
        let id = LabeledOperator::identity(x.registry(), x.systems());
        prop_assert!(dephase(&id, &s).distance(&id).unwrap() <= 1e-12);
        prop_assert!((dx.trace() - x.trace()).norm() <= 1e-12);
        prop_assert!(dx.is_hermitian(1e-12));
    }

    #[test]
    fn dephasing_commutes_with_partial_traces(x in operator(), s in bases()) {
        let ids: Vec<usize> = s.iter().map(|p| p.0).collect();
        let dx = dephase(&x, &s);
        prop_assert!(dx.partial_trace(&ids).unwrap().distance(&x.partial_trace(&ids).unwrap()).unwrap() <= 1e-12);
        let others: Vec<usize> = (0..3).filter(|k| !ids.contains(k)).collect();
        if !others.is_empty() {
            let a = dx.partial_trace(&others).unwrap();
            let b = dephase(&x.partial_trace(&others).unwrap(), &s);
            prop_assert!(a.distance(&b).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn dephasing_preserves_positivity(x in operator(), s in bases()) {
        let psd = x.mul(&x).unwrap();
        prop_assert!(dephase(&psd, &s).min_eigenvalue().unwrap() >= -1e-12);
    }

    #[test]
    fn block_round_trip_is_computational_pinching(x in operator(), s in bases()) {
        let over: Vec<usize> = s.iter().map(|p| p.0).collect();
        let blocks = x.blocks(&over).unwrap();
        let back = LabeledOperator::from_blocks(x.registry(), x.systems(), &over, &blocks).unwrap();
        let z: Vec<(usize, BasisKind)> = over.iter().map(|&k| (k, BasisKind::Z)).collect();
        prop_assert!(back.distance(&dephase(&x, &z)).unwrap() <= 1e-15);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dephasing_preserves_validity(seed in 0u64..10_000, s in bases()) {
        let (reg, roles) = standard_registry(&["A"], 2, 2, 2).unwrap();
        let w = random_valid_process(&reg, &roles, &[], seed).unwrap();
        let dw = w.with_op(dephase(w.op(), &s)).unwrap();
        prop_assert!(check_validity(&dw, 1e-10).unwrap().verdict);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn constructed_members_are_never_refuted(seed in 0u64..10_000, diagonal in any::<bool>()) {
        let (reg, roles) = standard_registry(&["A", "B"], 2, 2, 2).unwrap();
        let (w, _) = random_qccc(&reg, &roles, diagonal, seed).unwrap();
        prop_assert_ne!(qccc_membership(&w).unwrap().status, Status::Infeasible);
        let (w, _) = random_qcqc(&reg, &roles, diagonal, seed).unwrap();
        prop_assert_ne!(qcqc_membership(&w).unwrap().status, Status::Infeasible);
    }

    #[test]
    fn qccc_membership_implies_qcqc_membership(seed in 0u64..10_000) {
        let (reg, roles) = standard_registry(&["A", "B"], 2, 2, 2).unwrap();
        let (w, _) = random_qccc(&reg, &roles, true, seed).unwrap();
        if qccc_membership(&w).unwrap().status == Status::Feasible {
            prop_assert_eq!(qcqc_membership(&w).unwrap().status, Status::Feasible);
        }
    }
}
