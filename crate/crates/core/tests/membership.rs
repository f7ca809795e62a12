use procmat::classes::{random_qccc, random_qcqc};
use procmat::constructors::{qccc_from_dephased, qcqc_from_dephased_inputs, BasisMap};
use procmat::process::{non_future, random_valid_process, standard_registry, white_noise_process};
use procmat::sdp::{
    assemble_qccc_system, qccc_membership, qcqc_membership, solve_feasibility, SolverOptions, Status, Verdict,
};
use procmat::switch::{apply_pattern, build_example, build_quantum_switch, flip_pattern};
use procmat::{BasisKind, Decomposition, DephasingBasis, ProcessMatrix};

fn assert_feasible(v: &Verdict, w: &ProcessMatrix, what: &str) {
    assert_eq!(v.status, Status::Feasible, "{what}: {}", v.interpretation);
    let point = v.point.as_ref().expect("feasible verdict carries a point");
    let report = point.verify(w, 1e-7).unwrap();
    assert!(report.verdict, "{what}: returned point fails verification: {report:?}");
}

fn assert_infeasible(v: &Verdict, what: &str) {
    assert_eq!(v.status, Status::Infeasible, "{what}: {}", v.interpretation);
    assert!(v.margin >= 1e-6, "{what}: margin {}", v.margin);
    let cert = v.certificate.as_ref().expect("infeasible verdict carries a certificate");
    assert!(cert.check.dual_residual <= 1e-8, "{what}: {:?}", cert.check);
    assert!(cert.check.dual_objective >= v.margin * (1.0 - 1e-12), "{what}: {:?}", cert.check);
}

fn dephase_on(w: &ProcessMatrix, systems: &[(&str, BasisKind)]) -> ProcessMatrix {
    let reg = w.registry().clone();
    systems.iter().fold(w.clone(), |acc, &(name, kind)| {
        let dim = reg.dim(reg.index_of(name).unwrap());
        acc.dephase(&DephasingBasis::of_kind(name, dim, kind)).unwrap()
    })
}

fn dephase_non_future(w: &ProcessMatrix) -> ProcessMatrix {
    let reg = w.registry().clone();
    non_future(w.roles())
        .into_iter()
        .fold(w.clone(), |acc, s| acc.dephase(&DephasingBasis::computational(reg.name(s), reg.dim(s))).unwrap())
}

#[test]
fn switch_is_qcqc_and_causally_nonseparable() {
    let w = build_quantum_switch();
    assert_feasible(&qcqc_membership(&w).unwrap(), &w, "switch, QC-QC");
    let v = qccc_membership(&w).unwrap();
    assert_infeasible(&v, "switch, QC-CC");
    assert_eq!(v.interpretation, "causally nonseparable");
}

#[test]
fn white_noise_is_qccc() {
    let (reg, roles) = standard_registry(&["A", "B"], 2, 2, 2).unwrap();
    let w = white_noise_process(&reg, &roles).unwrap();
    let v = qccc_membership(&w).unwrap();
    assert_feasible(&v, &w, "white noise");
    assert!(v.margin > 1e-6);
    assert_eq!(v.interpretation, "QC-CC (causally separable)");
}

#[test]
fn examples_are_qcqc_but_not_qccc() {
    for n in 1..=3 {
        let w = build_example(n).unwrap();
        assert_infeasible(&qccc_membership(&w).unwrap(), &format!("W{n}"));
        assert_feasible(&qcqc_membership(&w).unwrap(), &w, &format!("W{n}, QC-QC"));
    }
}

#[test]
fn flipped_examples_agree_with_the_construction() {
    for n in 1..=3 {
        let w = apply_pattern(&build_example(n).unwrap(), &flip_pattern(n).unwrap()).unwrap();
        assert_feasible(&qccc_membership(&w).unwrap(), &w, &format!("flipped W{n}"));
        let bases: BasisMap = if n == 1 { [("P_c".to_string(), BasisKind::X)].into() } else { BasisMap::new() };
        let d = qccc_from_dephased(&w, &bases).unwrap();
        assert!(Decomposition::QcCc(d).verify(&w, 1e-8).unwrap().verdict, "flipped W{n}");
    }
}

#[test]
fn dephased_inputs_make_random_processes_qcqc() {
    let (reg, roles) = standard_registry(&["A", "B"], 2, 2, 2).unwrap();
    let dephased = reg.ids(&["P", "A_I", "B_I"]).unwrap();
    for seed in 0..5 {
        let w = random_valid_process(&reg, &roles, &dephased, seed).unwrap();
        let built = qcqc_from_dephased_inputs(&w, &BasisMap::new()).unwrap();
        assert!(Decomposition::QcQc(built).verify(&w, 1e-8).unwrap().verdict);
        assert_feasible(&qcqc_membership(&w).unwrap(), &w, &format!("seed {seed}"));
    }
}

#[test]
fn trivial_future_makes_both_classes_coincide() {
    let (reg, roles) = standard_registry(&["A", "B"], 1, 2, 1).unwrap();
    for seed in 0..4 {
        let w = random_valid_process(&reg, &roles, &[], seed).unwrap();
        let (a, b) = (qcqc_membership(&w).unwrap(), qccc_membership(&w).unwrap());
        assert_ne!(a.status, Status::Undetermined, "seed {seed}: {}", a.interpretation);
        assert_eq!(a.status, b.status, "seed {seed}: {} vs {}", a.interpretation, b.interpretation);
    }
    let (w, _) = random_qcqc(&reg, &roles, false, 9).unwrap();
    assert_eq!(qccc_membership(&w).unwrap().status, Status::Feasible);
}

#[test]
fn dephasing_preserves_qccc_membership() {
    let (reg, roles) = standard_registry(&["A", "B"], 2, 2, 2).unwrap();
    let mut feasible = vec![white_noise_process(&reg, &roles).unwrap()];
    for seed in 0..2 {
        feasible.push(random_qccc(&reg, &roles, true, seed).unwrap().0);
    }
    feasible.push(apply_pattern(&build_example(2).unwrap(), &flip_pattern(2).unwrap()).unwrap());
    for w in &feasible {
        assert_feasible(&qccc_membership(w).unwrap(), w, "before dephasing");
        let names: Vec<String> = w.registry().systems().iter().map(|s| s.name.clone()).collect();
        for name in names.iter().take(3) {
            let d = dephase_on(w, &[(name, BasisKind::X)]);
            assert_feasible(&qccc_membership(&d).unwrap(), &d, &format!("after X-dephasing {name}"));
        }
    }
}

#[test]
fn mixtures_of_qccc_processes_are_qccc() {
    let (reg, roles) = standard_registry(&["A", "B"], 2, 2, 2).unwrap();
    for seed in 0..3 {
        let (a, _) = random_qcqc(&reg, &roles, true, seed).unwrap();
        let (b, _) = random_qcqc(&reg, &roles, true, seed + 100).unwrap();
        let mixed = dephase_non_future(&a.mix(&b, 0.3).unwrap());
        assert_feasible(&qccc_membership(&mixed).unwrap(), &mixed, &format!("pair {seed}"));
    }
    let flipped = apply_pattern(&build_example(1).unwrap(), &flip_pattern(1).unwrap()).unwrap();
    let noise = white_noise_process(flipped.registry(), flipped.roles()).unwrap();
    let mixed = flipped.mix(&noise, 0.5).unwrap();
    assert_feasible(&qccc_membership(&mixed).unwrap(), &mixed, "flipped W1 with noise");
}

/// Smallest white-noise weight (to `steps` bisection steps) at which the
/// mixture is reported Feasible.
fn critical_noise_weight(w: &ProcessMatrix, tol_margin: f64, steps: usize) -> f64 {
    let noise = white_noise_process(w.registry(), w.roles()).unwrap();
    let opts = SolverOptions { tol_margin, ..Default::default() };
    let feasible = |p: f64| {
        let sys = assemble_qccc_system(&w.mix(&noise, p).unwrap()).unwrap();
        solve_feasibility(&sys, &opts).unwrap().status == Status::Feasible
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    assert!(feasible(hi));
    for _ in 0..steps {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

#[test]
fn enough_noise_makes_an_example_separable() {
    let w = build_example(1).unwrap();
    let steps = 6;
    let weights: Vec<f64> = [1e-7, 1e-6, 1e-5].iter().map(|&t| critical_noise_weight(&w, t, steps)).collect();
    assert!(weights[0] > 0.0 && weights[2] < 1.0, "{weights:?}");
    let step = 0.5f64.powi(steps as i32);
    for pair in weights.windows(2) {
        assert!(pair[0] <= pair[1] + step, "critical weight not monotone in tolerance: {weights:?}");
    }
}

#[test]
fn verdicts_are_deterministic() {
    let w = build_example(3).unwrap();
    let (a, b) = (qccc_membership(&w).unwrap(), qccc_membership(&w).unwrap());
    assert_eq!(a.status, b.status);
    assert_eq!(a.margin.to_bits(), b.margin.to_bits());
    assert_eq!(a.certificate, b.certificate);
}

#[test]
fn verdict_json_round_trips() {
    let w = build_example(2).unwrap();
    let v = qccc_membership(&w).unwrap().to_json();
    let text = serde_json::to_string(&v).unwrap();
    let back: procmat::sdp::VerdictJson = serde_json::from_str(&text).unwrap();
    assert_eq!(back, v);
    let flipped = apply_pattern(&w, &flip_pattern(2).unwrap()).unwrap();
    let v = qccc_membership(&flipped).unwrap().to_json();
    let point = v.point.as_ref().expect("feasible point in JSON");
    let d = Decomposition::from_json(flipped.registry(), point).unwrap();
    assert!(d.verify(&flipped, 1e-7).unwrap().verdict);
}
