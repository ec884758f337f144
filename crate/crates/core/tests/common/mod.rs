#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lattice_htst::lattice::{LatticeSpec, PeriodicField, Supercell};
use lattice_htst::potentials::{
    anharmonic_double_well, anharmonic_misfit_spec, harmonic_defect_spec, square_lattice, MorseShell, OverrideSpec, PotentialModel,
    TermSpec, ModelSpec,
};

pub fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub fn random_field(cell: &Arc<Supercell>, seed: u64, amp: f64) -> PeriodicField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vals = (0..cell.dofs()).map(|_| rng.random_range(-amp..amp)).collect();
    PeriodicField::from_values(cell.clone(), vals).unwrap()
}

/// `u + t v`.
pub fn shifted(u: &PeriodicField, v: &PeriodicField, t: f64) -> PeriodicField {
    let vals = u.values().iter().zip(v.values()).map(|(a, b)| a + t * b).collect();
    PeriodicField::from_values(u.cell().clone(), vals).unwrap()
}

fn morse(depth: f64, shift: f64) -> MorseShell {
    MorseShell { depth, alpha: 1.2, shift }
}

/// Morse chain on Z with a misfit double-well site at the origin.
pub fn morse_chain() -> PotentialModel {
    let spec = Arc::new(LatticeSpec::cubic(1, 1, 1.01).unwrap());
    PotentialModel::new(
        spec,
        &ModelSpec {
            name: "morse-chain".into(),
            homogeneous: vec![TermSpec::MorseBonds { shells: vec![morse(1.0, 0.0)] }],
            overrides: vec![OverrideSpec {
                site: vec![0],
                terms: vec![
                    TermSpec::MorseBonds { shells: vec![morse(1.0, 0.1)] },
                    TermSpec::DoubleWell { a: 6.0, s: 0.4, direction: vec![1.0] },
                ],
            }],
            mirror: None,
        },
    )
    .unwrap()
}

/// Simple cubic Morse crystal, nearest and next-nearest bonds, misfit site.
pub fn morse_cubic() -> PotentialModel {
    let spec = Arc::new(LatticeSpec::cubic(3, 3, 1.5).unwrap());
    PotentialModel::new(
        spec,
        &ModelSpec {
            name: "cubic-morse-misfit".into(),
            homogeneous: vec![TermSpec::MorseBonds { shells: vec![morse(1.0, 0.0), morse(0.5, 0.0)] }],
            overrides: vec![OverrideSpec {
                site: vec![0, 0, 0],
                terms: vec![TermSpec::MorseBonds { shells: vec![morse(1.0, 0.1), morse(0.5, 0.1)] }],
            }],
            mirror: None,
        },
    )
    .unwrap()
}

/// Every shipped or test model, paired with a supercell size small enough
/// for dense finite-difference checks.
pub fn model_family() -> Vec<(PotentialModel, usize)> {
    vec![
        (anharmonic_double_well(), 3),
        (PotentialModel::new(square_lattice(), &anharmonic_misfit_spec()).unwrap(), 3),
        (PotentialModel::new(square_lattice(), &harmonic_defect_spec(1.0, 0.5, 2.0)).unwrap(), 3),
        (morse_chain(), 6),
        (morse_cubic(), 2),
    ]
}
