mod common;

use lattice_htst::harness::{fit_rate, FitMode};
use lattice_htst::assembly::{hessian, hessian_reference, HessianKind};
use lattice_htst::lattice::{build_supercell, PeriodicField};
use lattice_htst::linalg::sym_eigvals;
use lattice_htst::potentials::{anharmonic_double_well, harmonic_defect_spec, square_lattice, PotentialModel};
use lattice_htst::spectral::kernel_fn;
use lattice_htst::stationary::{find_saddle, kicked_guess, mirror_midpoint, relax_minimum, PointKind, SolverOptions, StationaryPoint};
use lattice_htst::thermo::{
    delta_s_saddle, entropy_total, first_variation_profile, htst_rate, product_form, rate_at, renormalised_entropy, site_entropies,
    ThermoOptions,
};

use common::{random_field, shifted};

fn scaled(u: &PeriodicField, t: f64) -> PeriodicField {
    PeriodicField::from_values(u.cell().clone(), u.values().iter().map(|x| t * x).collect()).unwrap()
}

fn with_u(p: &StationaryPoint, u: PeriodicField) -> StationaryPoint {
    let mut q = p.clone();
    q.u = u;
    q
}

#[test]
fn first_variation_matches_entropy_difference() {
    let model = anharmonic_double_well();
    let cell = build_supercell(model.spec().clone(), 8).unwrap();
    let f = kernel_fn(&model, &cell).unwrap();
    let min = relax_minimum(&model, &kicked_guess(&cell, &[0.3, 0.0]).unwrap(), &f, &SolverOptions::default()).unwrap();
    let hom = model.homogeneous_model();
    let h = 1e-4;
    let sp = site_entropies(&hom, &scaled(&min.u, h), PointKind::Minimum, &f).unwrap();
    let sm = site_entropies(&hom, &scaled(&min.u, -h), PointKind::Minimum, &f).unwrap();
    let fv = first_variation_profile(&model, &min.u, &f).unwrap();
    let scale = fv.iter().map(|x| x.abs()).fold(0.0, f64::max);
    assert!(scale > 1e-3);
    for s in 0..cell.len() {
        let fd = (sp.values[s] - sm.values[s]) / (2.0 * h);
        assert!((fd - fv[s]).abs() < 1e-5 * scale, "site {s}: {fd} vs {}", fv[s]);
    }
    // the total homogeneous entropy is stationary at 0
    assert!(fv.iter().sum::<f64>().abs() < 1e-12);
}

#[test]
fn first_variation_vanishes_for_harmonic_and_constant_fields() {
    let harmonic = PotentialModel::new(square_lattice(), &harmonic_defect_spec(1.0, 0.5, 2.0)).unwrap();
    let cell = build_supercell(harmonic.spec().clone(), 4).unwrap();
    let f = kernel_fn(&harmonic, &cell).unwrap();
    let u = random_field(&cell, 3, 0.1);
    assert!(first_variation_profile(&harmonic, &u, &f).unwrap().iter().all(|x| *x == 0.0));
    let model = anharmonic_double_well();
    let c = PeriodicField::from_values(cell.clone(), [0.2, -0.1].repeat(cell.len())).unwrap();
    let fv = first_variation_profile(&model, &c, &f).unwrap();
    assert!(fv.iter().all(|x| x.abs() < 1e-14));
}

#[test]
fn harmonic_entropy_against_eigenvalue_products() {
    let model = PotentialModel::new(square_lattice(), &harmonic_defect_spec(1.0, 0.5, 2.0)).unwrap();
    let cell = build_supercell(model.spec().clone(), 5).unwrap();
    let f = kernel_fn(&model, &cell).unwrap();
    let min = relax_minimum(&model, &PeriodicField::zeros(cell.clone()), &f, &SolverOptions::default()).unwrap();
    let logprod = |a: nalgebra::DMatrix<f64>| {
        let mut ev = sym_eigvals(&a).unwrap();
        ev.sort_by(f64::total_cmp);
        ev[2..].iter().map(|x| x.ln()).sum::<f64>()
    };
    let h = logprod(hessian(&model, &min.u, HessianKind::Defect).unwrap().to_dense());
    let h0 = logprod(hessian_reference(&model, &cell).unwrap().to_dense());
    let s = entropy_total(&model, &min).unwrap();
    assert!((s - (-0.5 * (h - h0))).abs() < 1e-9);
    // stiffer defect: fewer accessible states
    assert!(s < 0.0);
}

#[test]
fn harmonic_renormalised_entropy_is_the_cell_sum() {
    let model = PotentialModel::new(square_lattice(), &harmonic_defect_spec(1.0, 0.5, 2.0)).unwrap();
    let cell = build_supercell(model.spec().clone(), 16).unwrap();
    let f = kernel_fn(&model, &cell).unwrap();
    let min = relax_minimum(&model, &PeriodicField::zeros(cell.clone()), &f, &SolverOptions::default()).unwrap();
    let r = renormalised_entropy(&model, &min, &f, 4.0).unwrap();
    let s = entropy_total(&model, &min).unwrap();
    assert!((r.cell_sum - s).abs() < 1e-8);
    assert!((r.value - s).abs() <= r.tail_bound, "{} vs {s}, tail {}", r.value, r.tail_bound);
}

#[test]
fn homogeneous_entropy_vanishes_under_shifts() {
    let model = anharmonic_double_well().homogeneous_model();
    for n in [3, 5, 8] {
        let cell = build_supercell(model.spec().clone(), n).unwrap();
        let f = kernel_fn(&model, &cell).unwrap();
        let c = PeriodicField::from_values(cell.clone(), [0.4, 0.9].repeat(cell.len())).unwrap();
        let min = relax_minimum(&model, &PeriodicField::zeros(cell.clone()), &f, &SolverOptions::default()).unwrap();
        for u in [min.u.clone(), c] {
            let p = with_u(&min, u);
            assert!(entropy_total(&model, &p).unwrap().abs() < 1e-10);
        }
    }
}

fn pair(n: usize) -> (PotentialModel, lattice_htst::spectral::KernelTable, StationaryPoint, StationaryPoint) {
    let model = anharmonic_double_well();
    let cell = build_supercell(model.spec().clone(), n).unwrap();
    let f = kernel_fn(&model, &cell).unwrap();
    let opts = SolverOptions::default();
    let min = relax_minimum(&model, &kicked_guess(&cell, &[0.3, 0.0]).unwrap(), &f, &opts).unwrap();
    let sad = find_saddle(&model, &mirror_midpoint(&model, &min.u).unwrap(), &f, &opts).unwrap();
    (model, f, min, sad)
}

#[test]
fn rates_are_invariant_under_constant_shifts() {
    let (model, f, min, sad) = pair(6);
    let opts = ThermoOptions::default();
    let base = htst_rate(&model, &min, &sad, 1.0, &f, &opts).unwrap();
    let c = PeriodicField::from_values(min.u.cell().clone(), [-0.25, 0.6].repeat(min.u.cell().len())).unwrap();
    let min2 = with_u(&min, shifted(&min.u, &c, 1.0));
    let sad2 = with_u(&sad, shifted(&sad.u, &c, 1.0));
    let moved = htst_rate(&model, &min2, &sad2, 1.0, &f, &opts).unwrap();
    assert!((base.delta_s - moved.delta_s).abs() < 1e-10);
    assert!((base.log_k - moved.log_k).abs() < 1e-10);
    assert!((entropy_total(&model, &min).unwrap() - entropy_total(&model, &min2).unwrap()).abs() < 1e-10);
}

#[test]
fn log_rate_is_affine_in_beta() {
    let (model, f, min, sad) = pair(5);
    let ds = delta_s_saddle(&model, &min, &sad, &f, &ThermoOptions::default()).unwrap();
    assert_eq!(ds.imaginary_part, 0.0);
    let prod = product_form(&model, &min, &sad).unwrap();
    let mut xs = Vec::new();
    for beta in [0.25, 0.5, 1.0, 2.0, 4.0, 8.0] {
        let r = rate_at(&min, &sad, &ds, Some(&prod), beta).unwrap();
        assert!(r.product_rel_diff.unwrap() < 1e-8);
        xs.push((beta, r.log_k));
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().map(|p| p.0).sum::<f64>() / n, xs.iter().map(|p| p.1).sum::<f64>() / n);
    let slope = xs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / xs.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    let icpt = my - slope * mx;
    let resid = xs.iter().map(|p| (p.1 - icpt - slope * p.0).abs()).fold(0.0, f64::max);
    let de = sad.energy - min.energy;
    assert!((slope + de).abs() < 1e-10);
    assert!((icpt - ds.delta_s).abs() < 1e-10);
    assert!(resid < 1e-10);
}

#[test]
fn site_profile_decays_away_from_the_core() {
    let (model, f, min, _) = pair(12);
    let p = site_entropies(&model, &min.u, PointKind::Minimum, &f).unwrap();
    let core = p.sites.iter().position(|s| s.is_origin()).unwrap();
    let peak = p.values.iter().map(|x| x.abs()).fold(0.0, f64::max);
    assert_eq!(p.values[core].abs(), peak);
    let pts: Vec<(f64, f64)> = lattice_htst::thermo::shell_envelope(&p.radii, &p.values.iter().map(|x| x.abs()).collect::<Vec<_>>(), 2.0, 6.0);
    let fit = fit_rate(&pts, FitMode::PurePower).unwrap();
    assert!(fit.exponent <= -1.5, "{}", fit.exponent);
}
