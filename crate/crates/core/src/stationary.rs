//! Equilibria `ū_N` and index-1 saddles `ū^s_N` of `E_N`, their
//! continuation across supercell sizes, and spectral certificates.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::assembly::{energy_periodic, hessian, EnergyReport, HessianKind, LinearLatticeOperator};
use crate::error::{Error, Result};
use crate::lattice::{read_field_csv, write_field_csv, LatticePoint, PeriodicField, Supercell};
use crate::linalg;
use crate::potentials::PotentialModel;
use crate::spectral::{
    self, add_projector, classify, conjugated_spectrum_bounds, project_out_constants, Eigenpair, KernelTable,
    ModeClassification, ModeRules,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointKind {
    Minimum,
    Saddle,
}

impl PointKind {
    fn negative_modes(self) -> usize {
        match self {
            PointKind::Minimum => 0,
            PointKind::Saddle => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    TrustRegionNewton,
    EigenvectorFollowing,
    MirrorPlane,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertMethod {
    /// Full dense eigendecomposition of the Hessian.
    Dense,
    /// `LDLᵀ` inertia of `H + π_N` plus Lanczos extreme eigenvalues.
    Inertia,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// `tol_grad = tol_grad_rel · √|Λ_N|`.
    pub tol_grad_rel: f64,
    pub max_iter: usize,
    /// Largest change of a single displacement component per step.
    pub max_step: f64,
    /// Certify by dense eigendecomposition up to this many degrees of freedom.
    pub dense_certify_max_dofs: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol_grad_rel: 1e-10,
            max_iter: 80,
            max_step: 0.25,
            dense_certify_max_dofs: 2100,
        }
    }
}

impl SolverOptions {
    pub fn tol_grad(&self, cell: &Supercell) -> f64 {
        self.tol_grad_rel * (cell.len() as f64).sqrt()
    }
}

#[derive(Clone, Debug)]
pub struct Certificate {
    pub classification: ModeClassification,
    pub method: CertMethod,
    /// Lowest eigenpair of `H` on zero-mean fields: `(λ̄_N, φ̄_N)` at a saddle.
    pub lowest: Eigenpair,
    /// `[σ̲, σ̄]`: positive spectrum of `F_N H F_N + π_N`.
    pub sigma: (f64, f64),
}

#[derive(Clone, Debug)]
pub struct StationaryPoint {
    pub kind: PointKind,
    pub u: PeriodicField,
    pub energy: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    pub method: SolveMethod,
    pub certificate: Certificate,
}

// ---------------------------------------------------------------------------
// Mirror symmetry on a cell

/// `(M u)(Lℓ) = P u(ℓ)` on `Λ_N`.
#[derive(Clone, Debug)]
pub struct MirrorMap {
    perm: Vec<usize>,
    p: DMatrix<f64>,
    m: usize,
}

impl MirrorMap {
    pub fn new(model: &PotentialModel, cell: &Supercell) -> Result<Option<Self>> {
        let Some(mirror) = model.mirror() else {
            return Ok(None);
        };
        let d = cell.spec().dim();
        let m = cell.spec().m();
        let perm: Vec<usize> = (0..cell.len())
            .map(|s| cell.index_of(&mirror.map_point(&cell.site(s), d)))
            .collect();
        let mut seen = vec![false; cell.len()];
        for (s, &t) in perm.iter().enumerate() {
            if seen[t] || perm[t] != s {
                return Err(Error::Config("mirror is not an involution on the supercell".into()));
            }
            seen[t] = true;
        }
        let p = &mirror.displacement;
        if (p * p - DMatrix::identity(m, m)).amax() > 1e-12 || (p - p.transpose()).amax() > 1e-12 {
            return Err(Error::Config("mirror displacement map must be a symmetric involution".into()));
        }
        for (o, _) in model.overrides() {
            if !model.overrides().contains_key(&mirror.map_point(o, d)) {
                return Err(Error::Config(format!("mirror maps override {o:?} outside the defect core")));
            }
        }
        Ok(Some(MirrorMap { perm, p: p.clone(), m }))
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let m = self.m;
        let mut out = vec![0.0; v.len()];
        for (s, &t) in self.perm.iter().enumerate() {
            for i in 0..m {
                out[t * m + i] = (0..m).map(|j| self.p[(i, j)] * v[s * m + j]).sum();
            }
        }
        out
    }

    pub fn symmetrize(&self, v: &[f64]) -> Vec<f64> {
        self.apply(v).iter().zip(v).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    /// `‖M v − v‖_∞`.
    pub fn asymmetry(&self, v: &[f64]) -> f64 {
        self.apply(v).iter().zip(v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

// ---------------------------------------------------------------------------
// Guesses and continuation

/// Zero field with an extra displacement `kick` on the origin, mean removed.
pub fn kicked_guess(cell: &Arc<Supercell>, kick: &[f64]) -> Result<PeriodicField> {
    let mut u = PeriodicField::zeros(cell.clone());
    let m = cell.spec().m();
    if kick.len() != m {
        return Err(Error::SizeMismatch {
            what: "initial kick",
            expected: m,
            actual: kick.len(),
        });
    }
    let s = cell.index_of(&LatticePoint::origin());
    u.values_mut()[s * m..(s + 1) * m].copy_from_slice(kick);
    project_out_constants(u.values_mut(), m);
    Ok(u)
}

/// Midpoint of two fields.
pub fn midpoint(a: &PeriodicField, b: &PeriodicField) -> Result<PeriodicField> {
    let v = a.values().iter().zip(b.values()).map(|(x, y)| 0.5 * (x + y)).collect();
    PeriodicField::from_values(a.cell().clone(), v)
}

/// Saddle guess: midpoint between a minimum and its mirror image.
pub fn mirror_midpoint(model: &PotentialModel, min: &PeriodicField) -> Result<PeriodicField> {
    let mirror = MirrorMap::new(model, min.cell())?
        .ok_or_else(|| Error::Precondition("model declares no mirror symmetry".into()))?;
    let img = PeriodicField::from_values(min.cell().clone(), mirror.apply(min.values()))?;
    midpoint(min, &img)
}

/// Prolongs a field from `Λ_N` to `Λ_{N'}`: sites of the old cell keep their
/// values, new sites get the old mean; the result has zero mean.
pub fn continue_in_n(u: &PeriodicField, target: &Arc<Supercell>) -> Result<PeriodicField> {
    let old = u.cell();
    if target.n() < old.n() {
        return Err(Error::Precondition(format!(
            "continuation goes to larger cells only ({} -> {})",
            old.n(),
            target.n()
        )));
    }
    let m = u.m();
    let mean = u.mean();
    let mut out = PeriodicField::zeros(target.clone());
    for s in 0..target.len() {
        let p = target.site(s);
        let v = match old.try_index(&p) {
            Some(i) if old.site(i) == p => u.site_value(i).to_vec(),
            _ => mean.clone(),
        };
        out.values_mut()[s * m..(s + 1) * m].copy_from_slice(&v);
    }
    project_out_constants(out.values_mut(), m);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Solvers

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cap_step(p: &mut [f64], max_step: f64) {
    let big = p.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    if big > max_step {
        let s = max_step / big;
        p.iter_mut().for_each(|x| *x *= s);
    }
}

fn dense_hessian_plus_projector(model: &PotentialModel, u: &PeriodicField) -> Result<DMatrix<f64>> {
    let mut a = hessian(model, u, HessianKind::Defect)?.to_dense();
    add_projector(&mut a, u.m());
    Ok(a)
}

struct Trace {
    history: Vec<f64>,
}

/// Trust-region (Levenberg-shifted) Newton descent on zero-mean fields.
/// With a mirror map, iterates stay on the mirror-symmetric subspace and
/// the shifted system is solved by `LDLᵀ`, since the Hessian may be
/// indefinite across the plane.
fn newton_descent(
    model: &PotentialModel,
    u0: &PeriodicField,
    opts: &SolverOptions,
    mirror: Option<&MirrorMap>,
) -> Result<(PeriodicField, EnergyReport, Trace)> {
    let cell = u0.cell().clone();
    let m = u0.m();
    let tol = opts.tol_grad(&cell);
    let mut x = u0.values().to_vec();
    if let Some(mm) = mirror {
        x = mm.symmetrize(&x);
    }
    project_out_constants(&mut x, m);
    let field = |v: &[f64]| PeriodicField::from_values(cell.clone(), v.to_vec());
    let mut rep = energy_periodic(model, &field(&x)?)?;
    let mut trace = Trace { history: Vec::new() };
    let mut mu = 0.0f64;
    for _ in 0..opts.max_iter {
        let g = match mirror {
            Some(mm) => mm.symmetrize(&rep.gradient),
            None => rep.gradient.clone(),
        };
        let gn = norm(&g);
        trace.history.push(gn);
        if gn <= tol {
            return Ok((field(&x)?, rep, trace));
        }
        let h = dense_hessian_plus_projector(model, &field(&x)?)?;
        let scale = linalg::inf_norm(&h);
        let neg_g: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut accepted = false;
        for _ in 0..40 {
            let mut a = h.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += mu;
            }
            let step = match mirror {
                None => linalg::cholesky_solve(&a, &neg_g)?,
                Some(mm) => {
                    let (p, _) = linalg::sym_indefinite_solve(&a, &neg_g)?;
                    let p = mm.symmetrize(&p);
                    (dot(&p, &g) < 0.0).then_some(p)
                }
            };
            let Some(mut p) = step else {
                mu = (4.0 * mu).max(1e-3 * scale);
                continue;
            };
            project_out_constants(&mut p, m);
            cap_step(&mut p, opts.max_step);
            let hp = &h * DVector::from_column_slice(&p);
            let pred = dot(&g, &p) + 0.5 * dot(&p, hp.as_slice());
            let trial: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + b).collect();
            let trep = energy_periodic(model, &field(&trial)?)?;
            let actual = trep.value - rep.value;
            let tgrad = match mirror {
                Some(mm) => norm(&mm.symmetrize(&trep.gradient)),
                None => trep.gradient_norm,
            };
            // Near convergence energy differences drown in roundoff; the
            // gradient norm decides there.
            let tiny = pred.abs() < 1e-11 * (1.0 + rep.value.abs());
            let ok = if tiny {
                tgrad < gn
            } else {
                pred < 0.0 && actual < 0.0 && actual / pred > 0.1
            };
            if ok {
                if !tiny && actual / pred > 0.75 {
                    mu /= 4.0;
                    if mu < 1e-10 * scale {
                        mu = 0.0;
                    }
                }
                x = trial;
                rep = trep;
                accepted = true;
                break;
            }
            mu = (4.0 * mu).max(1e-3 * scale);
        }
        if !accepted {
            return Err(Error::Convergence(format!(
                "trust-region Newton could not find an acceptable step (gradient {gn:e})"
            )));
        }
    }
    Err(Error::Convergence(format!(
        "trust-region Newton did not reach tol {tol:e} in {} iterations (gradient {:e})",
        opts.max_iter,
        trace.history.last().copied().unwrap_or(f64::NAN)
    )))
}

/// Eigenvector-following: ascend along the lowest Hessian mode, descend in
/// its complement.
fn eigenvector_following(
    model: &PotentialModel,
    u0: &PeriodicField,
    opts: &SolverOptions,
) -> Result<(PeriodicField, EnergyReport, Trace)> {
    let cell = u0.cell().clone();
    let m = u0.m();
    let tol = opts.tol_grad(&cell);
    let mut x = u0.values().to_vec();
    project_out_constants(&mut x, m);
    let field = |v: &[f64]| PeriodicField::from_values(cell.clone(), v.to_vec());
    let mut trace = Trace { history: Vec::new() };
    let mut worse = 0;
    let mut max_step = opts.max_step;
    for _ in 0..opts.max_iter {
        let u = field(&x)?;
        let rep = energy_periodic(model, &u)?;
        let g = rep.gradient.clone();
        let gn = norm(&g);
        if let Some(&prev) = trace.history.last() {
            if gn > prev {
                worse += 1;
                max_step *= 0.5;
                if worse > 6 {
                    break;
                }
            }
        }
        trace.history.push(gn);
        if gn <= tol {
            return Ok((u, rep, trace));
        }
        let hs = hessian(model, &u, HessianKind::Defect)?;
        let low = spectral::smallest_eigenpair(&hs)?;
        let v1 = &low.vector;
        let l1 = low.value;
        let g1 = dot(v1, &g);
        let gperp: Vec<f64> = g.iter().zip(v1).map(|(a, b)| a - g1 * b).collect();
        let lp = 0.5 * l1 + (0.25 * l1 * l1 + g1 * g1).sqrt();
        let p1 = if g1 == 0.0 { 0.0 } else { -g1 / (l1 - lp) };
        let mut a = hs.to_dense();
        add_projector(&mut a, m);
        let vv = DVector::from_column_slice(v1);
        a += &vv * vv.transpose() * (1.0 - l1);
        let scale = linalg::inf_norm(&a);
        let neg: Vec<f64> = gperp.iter().map(|x| -x).collect();
        let mut mu = 0.0;
        let pperp = loop {
            let mut b = a.clone();
            for i in 0..b.nrows() {
                b[(i, i)] += mu;
            }
            if let Some(p) = linalg::cholesky_solve(&b, &neg)? {
                break p;
            }
            mu = (4.0 * mu).max(1e-3 * scale);
        };
        let c = dot(v1, &pperp);
        let mut p: Vec<f64> = pperp.iter().zip(v1).map(|(a, b)| a - c * b + p1 * b).collect();
        project_out_constants(&mut p, m);
        cap_step(&mut p, max_step);
        x.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
    }
    Err(Error::Convergence(format!(
        "eigenvector-following stalled (gradient {:e}, tol {tol:e})",
        trace.history.last().copied().unwrap_or(f64::NAN)
    )))
}

// ---------------------------------------------------------------------------
// Certification

/// Counts zero, negative and positive modes of `H_N(u)` and records the
/// lowest eigenpair and `[σ̲, σ̄]` of `F_N H F_N + π_N`.
pub fn certify(
    model: &PotentialModel,
    u: &PeriodicField,
    kind: PointKind,
    f: &KernelTable,
    opts: &SolverOptions,
) -> Result<Certificate> {
    let m = u.m();
    let h = hessian(model, u, HessianKind::Defect)?;
    let lowest = spectral::smallest_eigenpair(&h)?;
    let rules = ModeRules::new(Some(m));
    let (classification, method) = if h.dim() <= opts.dense_certify_max_dofs {
        let w = linalg::sym_eigvals(&h.to_dense())?;
        (classify(&w, &rules)?, CertMethod::Dense)
    } else {
        (inertia_classification(&h, &rules)?, CertMethod::Inertia)
    };
    let want = kind.negative_modes();
    if classification.negative != want {
        return Err(Error::Certification {
            reason: format!("{kind:?} needs {want} negative modes"),
            negative: classification.negative,
            zero: classification.zero,
        });
    }
    let sigma = conjugated_spectrum_bounds(&h, f, want)?;
    Ok(Certificate {
        classification,
        method,
        lowest,
        sigma,
    })
}

/// Mode counts without a full eigendecomposition: the inertia of `H + π_N`
/// counts negative modes, and Lanczos checks that no eigenvalue on the
/// zero-mean subspace falls into the dead zone.
fn inertia_classification(h: &LinearLatticeOperator, rules: &ModeRules) -> Result<ModeClassification> {
    let m = h.cell().spec().m();
    let mut a = h.to_dense();
    add_projector(&mut a, m);
    let inertia = linalg::ldlt_inertia(&a)?;
    let op = |v: &[f64]| h.apply(v);
    let lows = spectral::lanczos(op, h.dim(), m, inertia.negative + 1, spectral::End::Lowest, 1e-9, 41)?;
    let high = spectral::lanczos(op, h.dim(), m, 1, spectral::End::Highest, 1e-9, 43)?;
    let mut sample: Vec<f64> = vec![0.0; m];
    sample.extend(lows.iter().map(|p| p.value));
    sample.push(high[0].value);
    sample.sort_by(f64::total_cmp);
    let c = classify(&sample, rules)?;
    if c.negative != inertia.negative {
        return Err(Error::AmbiguousSpectrum(format!(
            "inertia reports {} negative modes, Lanczos {}",
            inertia.negative, c.negative
        )));
    }
    let positive = h.dim() - m - inertia.negative;
    Ok(ModeClassification {
        positive,
        negative: inertia.negative,
        zero: m,
        ..c
    })
}

// ---------------------------------------------------------------------------
// Public entry points

/// `ū_N`: trust-region Newton from `guess`, then certification.
pub fn relax_minimum(
    model: &PotentialModel,
    guess: &PeriodicField,
    f: &KernelTable,
    opts: &SolverOptions,
) -> Result<StationaryPoint> {
    let (u, rep, trace) = newton_descent(model, guess, opts, None)?;
    let certificate = certify(model, &u, PointKind::Minimum, f, opts)?;
    Ok(StationaryPoint {
        kind: PointKind::Minimum,
        energy: rep.value,
        gradient_norm: rep.gradient_norm,
        iterations: trace.history.len() - 1,
        residual_history: trace.history,
        method: SolveMethod::TrustRegionNewton,
        u,
        certificate,
    })
}

/// `ū^s_N`: eigenvector-following from `guess`; if that fails and the model
/// has a mirror symmetry, relaxation on the mirror plane.
pub fn find_saddle(
    model: &PotentialModel,
    guess: &PeriodicField,
    f: &KernelTable,
    opts: &SolverOptions,
) -> Result<StationaryPoint> {
    let first = eigenvector_following(model, guess, opts).and_then(|(u, rep, trace)| {
        let c = certify(model, &u, PointKind::Saddle, f, opts)?;
        Ok((u, rep, trace, c, SolveMethod::EigenvectorFollowing))
    });
    let (u, rep, trace, certificate, method) = match first {
        Ok(r) => r,
        Err(e) => {
            let Some(mirror) = MirrorMap::new(model, guess.cell())? else {
                return Err(e);
            };
            log::info!("eigenvector-following failed ({e}); relaxing on the mirror plane");
            let (u, rep, trace) = newton_descent(model, guess, opts, Some(&mirror))?;
            if rep.gradient_norm > opts.tol_grad(u.cell()) {
                return Err(Error::Convergence(format!(
                    "mirror-plane point has full gradient {:e}",
                    rep.gradient_norm
                )));
            }
            let c = certify(model, &u, PointKind::Saddle, f, opts)?;
            (u, rep, trace, c, SolveMethod::MirrorPlane)
        }
    };
    Ok(StationaryPoint {
        kind: PointKind::Saddle,
        energy: rep.value,
        gradient_norm: rep.gradient_norm,
        iterations: trace.history.len() - 1,
        residual_history: trace.history,
        method,
        u,
        certificate,
    })
}

// ---------------------------------------------------------------------------
// Persistence

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PointMeta {
    pub model_hash: String,
    pub n: usize,
    pub kind: PointKind,
    pub method: SolveMethod,
    pub energy: f64,
    pub gradient_norm: f64,
    pub negative: usize,
    pub zero: usize,
    pub lowest_eigenvalue: f64,
    pub sigma: (f64, f64),
}

/// Writes `<prefix>.csv` (field) and `<prefix>.json` (metadata).
pub fn save_point(point: &StationaryPoint, prefix: &Path, model_hash: &str) -> Result<()> {
    let meta = PointMeta {
        model_hash: model_hash.to_string(),
        n: point.u.cell().n(),
        kind: point.kind,
        method: point.method,
        energy: point.energy,
        gradient_norm: point.gradient_norm,
        negative: point.certificate.classification.negative,
        zero: point.certificate.classification.zero,
        lowest_eigenvalue: point.certificate.lowest.value,
        sigma: point.certificate.sigma,
    };
    let mut buf = Vec::new();
    write_field_csv(&point.u, &mut buf)?;
    crate::harness::atomic_write(&prefix.with_extension("csv"), &buf)?;
    let json = serde_json::to_vec_pretty(&meta)?;
    crate::harness::atomic_write(&prefix.with_extension("json"), &json)
}

/// Reads a persisted point's field if its metadata matches `model_hash` and
/// the cell size.
pub fn load_point_field(prefix: &Path, model_hash: &str, cell: &Arc<Supercell>) -> Result<Option<(PointMeta, PeriodicField)>> {
    let meta_path = prefix.with_extension("json");
    if !meta_path.exists() {
        return Ok(None);
    }
    let text = std::fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: PointMeta = serde_json::from_slice(&text)?;
    if meta.model_hash != model_hash || meta.n != cell.n() {
        return Ok(None);
    }
    let csv_path = prefix.with_extension("csv");
    let file = std::fs::File::open(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    Ok(Some((meta, read_field_csv(cell.clone(), file)?)))
}
