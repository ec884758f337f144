mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lattice_htst::assembly::{hessian, hessian_reference, HessianKind};
use lattice_htst::lattice::build_supercell;
use lattice_htst::linalg::{sym_eigh, sym_eigvals};
use lattice_htst::potentials::{anharmonic_double_well, Symbol};
use lattice_htst::spectral::{
    add_projector, conjugate_operator, kernel_fn, logdet_plus, matrix_log_plus, symbol_f, ModeRules,
};
use lattice_htst::stationary::{kicked_guess, relax_minimum, SolverOptions};

use common::{random_field, shifted};

#[test]
fn logdet_chain_on_random_stable_states() {
    let model = anharmonic_double_well();
    let cell = build_supercell(model.spec().clone(), 6).unwrap();
    let f = kernel_fn(&model, &cell).unwrap();
    let min = relax_minimum(&model, &kicked_guess(&cell, &[0.3, 0.0]).unwrap(), &f, &SolverOptions::default()).unwrap();
    let rules = ModeRules::new(Some(2));
    let (ld_hom, _) = logdet_plus(&hessian_reference(&model, &cell).unwrap().to_dense(), &rules).unwrap();
    for seed in 0..4 {
        let u = shifted(&min.u, &random_field(&cell, seed, 1.0), 0.03);
        let h = hessian(&model, &u, HessianKind::Defect).unwrap();
        let (ld, c) = logdet_plus(&h.to_dense(), &rules).unwrap();
        assert_eq!(c.negative, 0);
        let mut a = conjugate_operator(&f, &h).unwrap().to_dense();
        add_projector(&mut a, 2);
        let (log_a, _) = matrix_log_plus(&a, &ModeRules::new(Some(0))).unwrap();
        let (ld_a, _) = logdet_plus(&a, &ModeRules::new(Some(0))).unwrap();
        assert!((-0.5 * (ld - ld_hom) - (-0.5 * log_a.trace())).abs() < 1e-8);
        assert!((log_a.trace() - ld_a).abs() < 1e-10);
    }
}

#[test]
fn certified_bounds_contain_the_conjugated_spectrum() {
    let model = anharmonic_double_well();
    let cell = build_supercell(model.spec().clone(), 6).unwrap();
    let f = kernel_fn(&model, &cell).unwrap();
    let min = relax_minimum(&model, &kicked_guess(&cell, &[0.3, 0.0]).unwrap(), &f, &SolverOptions::default()).unwrap();
    let h = hessian(&model, &min.u, HessianKind::Defect).unwrap();
    let mut a = conjugate_operator(&f, &h).unwrap().to_dense();
    add_projector(&mut a, 2);
    let (lo, hi) = min.certificate.sigma;
    assert!(lo > 0.0);
    for ev in sym_eigvals(&a).unwrap() {
        assert!(ev >= lo * (1.0 - 1e-6) && ev <= hi * (1.0 + 1e-6), "{ev} outside [{lo}, {hi}]");
    }
}

#[test]
fn small_log_plus_cases() {
    let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.0, 0.0, 2.0, 2.0]));
    let (ld, c) = logdet_plus(&a, &ModeRules::new(Some(2))).unwrap();
    assert_eq!(c.zero, 2);
    assert!((ld - 2.0 * 2f64.ln()).abs() < 1e-14);
    let (l, _) = matrix_log_plus(&(DMatrix::<f64>::identity(5, 5) * 2.0), &ModeRules::new(Some(0))).unwrap();
    assert!((l - DMatrix::<f64>::identity(5, 5) * 2f64.ln()).amax() < 1e-14);
}

fn random_orthogonal(n: usize, seed: u64) -> DMatrix<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let (_, q) = sym_eigh(&(&g + g.transpose())).unwrap();
    q
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// `log⁺ A` lives on the positive eigenspace and commutes with `A`.
    #[test]
    fn log_plus_respects_the_positive_eigenspace(seed in 0u64..1000, neg in 0usize..2, n in 4usize..12) {
        let q = random_orthogonal(n, seed);
        let mut ev: Vec<f64> = (0..n).map(|i| 0.5 + 2.5 * i as f64 / n as f64).collect();
        for e in ev.iter_mut().take(neg) {
            *e = -1.5;
        }
        let a = &q * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(ev.clone())) * q.transpose();
        let (l, _) = matrix_log_plus(&a, &ModeRules::new(Some(0))).unwrap();
        let mut p = DMatrix::zeros(n, n);
        for (i, e) in ev.iter().enumerate() {
            if *e > 0.0 {
                p += q.column(i) * q.column(i).transpose();
            }
        }
        prop_assert!((&l * &a - &a * &l).amax() < 1e-10);
        prop_assert!((&l * &p - &l).amax() < 1e-10);
        let want: f64 = ev.iter().filter(|e| **e > 0.0).map(|e| e.ln()).sum();
        prop_assert!((l.trace() - want).abs() < 1e-10);
    }

    /// `F̂ ĥ F̂ = I` away from `k = 0`.
    #[test]
    fn symbol_square_root_inverts(k0 in -3.1f64..3.1, k1 in -3.1f64..3.1) {
        prop_assume!(k0.hypot(k1) > 1e-3);
        let sym = Symbol::new(&anharmonic_double_well().homogeneous_model());
        let f = symbol_f(&sym, &[k0, k1]).unwrap();
        let h = sym.eval(&[k0, k1]);
        let r = &f * &h * &f - DMatrix::<f64>::identity(2, 2);
        prop_assert!(r.amax() < 1e-12);
    }
}
