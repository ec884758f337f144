//! Vibrational entropy `S_N`, its site decomposition, the renormalised
//! entropy, the entropy difference across a saddle and the HTST rate.

use serde::{Deserialize, Serialize};

use crate::assembly::{hessian, hessian_reference, variation_contractions, HessianKind, LinearLatticeOperator};
use crate::error::{Error, Result};
use crate::harness::{fit_rate, FitMode};
use crate::lattice::{LatticePoint, PeriodicField};
use crate::linalg;
use crate::potentials::PotentialModel;
use crate::spectral::{
    add_projector, conjugate_operator, decompose, generalized_eigen, log_plus_block_traces, logdet_plus,
    logdet_plus_factored, logdet_plus_hom, KernelTable, ModeLabel, ModeRules,
};
use crate::stationary::{PointKind, StationaryPoint};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThermoOptions {
    /// Dense eigenvalue paths (cross-checks) up to this many degrees of
    /// freedom; factorisations beyond.
    pub dense_max_dofs: usize,
}

impl Default for ThermoOptions {
    fn default() -> Self {
        ThermoOptions { dense_max_dofs: 4608 }
    }
}

// ---------------------------------------------------------------------------
// Totals

/// `S_N(u) = −½ log det⁺ H_N(u) + ½ log det⁺ H_N^hom` through one
/// factorisation of `H_N + π_N`. At a saddle `lambda_bar` is divided out.
pub fn entropy_factored(model: &PotentialModel, u: &PeriodicField, lambda_bar: Option<f64>) -> Result<f64> {
    let h = hessian(model, u, HessianKind::Defect)?;
    let (ld, _) = logdet_plus_factored(&h, lambda_bar)?;
    let ld_hom = logdet_plus_hom(model, u.cell())?;
    Ok(-0.5 * (ld - ld_hom))
}

/// `S_N` at a certified point.
pub fn entropy_total(model: &PotentialModel, point: &StationaryPoint) -> Result<f64> {
    let lambda_bar = match point.kind {
        PointKind::Minimum => None,
        PointKind::Saddle => Some(point.certificate.lowest.value),
    };
    entropy_factored(model, &point.u, lambda_bar)
}

/// Dense oracle: eigenvalues of `H_N(u)` and `H_N^hom`, positive ones only.
pub fn entropy_dense(model: &PotentialModel, u: &PeriodicField, kind: PointKind) -> Result<f64> {
    let m = u.m();
    let rules = ModeRules::new(Some(m));
    let h = hessian(model, u, HessianKind::Defect)?.to_dense();
    let (ld, c) = logdet_plus(&h, &rules)?;
    check_negatives(kind, c.negative, c.zero)?;
    let (ld_hom, _) = logdet_plus(&hessian_reference(model, u.cell())?.to_dense(), &rules)?;
    Ok(-0.5 * (ld - ld_hom))
}

fn expected_negatives(kind: PointKind) -> usize {
    match kind {
        PointKind::Minimum => 0,
        PointKind::Saddle => 1,
    }
}

fn check_negatives(kind: PointKind, negative: usize, zero: usize) -> Result<()> {
    if negative != expected_negatives(kind) {
        return Err(Error::Certification {
            reason: format!("{kind:?} classification mismatch"),
            negative,
            zero,
        });
    }
    Ok(())
}

fn conjugated_dense(f: &KernelTable, h: &LinearLatticeOperator) -> Result<nalgebra::DMatrix<f64>> {
    let mut a = conjugate_operator(f, h)?.to_dense();
    add_projector(&mut a, h.cell().spec().m());
    Ok(a)
}

// ---------------------------------------------------------------------------
// Site decomposition

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EntropyProfile {
    pub n: usize,
    pub dim: usize,
    pub variant: PointKind,
    pub sites: Vec<LatticePoint>,
    pub radii: Vec<f64>,
    /// `S_{N,ℓ}`, or `S⁺_{N,ℓ}` at a saddle.
    pub values: Vec<f64>,
    pub total: f64,
}

/// `S_{N,ℓ} = −½ Tr log⁺(F_N H_N F_N + π_N)_{ℓℓ}`.
pub fn site_entropies(model: &PotentialModel, u: &PeriodicField, kind: PointKind, f: &KernelTable) -> Result<EntropyProfile> {
    let cell = u.cell();
    let h = hessian(model, u, HessianKind::Defect)?;
    let a = conjugated_dense(f, &h)?;
    let dec = decompose(&a, &ModeRules::new(Some(0)))?;
    check_negatives(kind, dec.classification.negative, dec.classification.zero)?;
    let values: Vec<f64> = log_plus_block_traces(&dec, u.m()).into_iter().map(|t| -0.5 * t).collect();
    let total = values.iter().sum();
    Ok(EntropyProfile {
        n: cell.n(),
        dim: cell.spec().dim(),
        variant: kind,
        sites: cell.sites().to_vec(),
        radii: (0..cell.len()).map(|s| cell.site_norm(s)).collect(),
        values,
        total,
    })
}

/// `⟨δS^hom_ℓ(0), u⟩ = −½ Σ_i ⟨F_N e_{ℓ,i}, δH^hom(0)[u] F_N e_{ℓ,i}⟩` for
/// every site `ℓ` of the cell.
pub fn first_variation_profile(model: &PotentialModel, u: &PeriodicField, f: &KernelTable) -> Result<Vec<f64>> {
    let cell = u.cell();
    let x = variation_contractions(model, &PeriodicField::zeros(cell.clone()), u, None, HessianKind::Homogeneous)?;
    (0..cell.len()).map(|s| first_variation_at(&x, f, s)).collect()
}

/// Single-site version of [`first_variation_profile`].
pub fn site_entropy_first_variation(model: &PotentialModel, l: &LatticePoint, u: &PeriodicField, f: &KernelTable) -> Result<f64> {
    let cell = u.cell();
    let s = cell
        .try_index(l)
        .ok_or_else(|| Error::Precondition(format!("{l:?} is not a site representative of the cell")))?;
    let x = variation_contractions(model, &PeriodicField::zeros(cell.clone()), u, None, HessianKind::Homogeneous)?;
    first_variation_at(&x, f, s)
}

fn first_variation_at(x: &LinearLatticeOperator, f: &KernelTable, s: usize) -> Result<f64> {
    let cell = x.cell();
    let m = cell.spec().m();
    let l = cell.site(s);
    let blocks: Vec<_> = (0..cell.len()).map(|t| f.value(&(cell.site(t) - l))).collect();
    let mut acc = 0.0;
    for i in 0..m {
        let mut col = vec![0.0; cell.dofs()];
        for (t, b) in blocks.iter().enumerate() {
            for j in 0..m {
                col[t * m + j] = b[(j, i)];
            }
        }
        let y = x.apply(&col)?;
        acc += col.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(-0.5 * acc)
}

// ---------------------------------------------------------------------------
// Renormalised entropy

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RenormalisedEntropy {
    pub n_ref: usize,
    pub r_sum: f64,
    pub radii: Vec<f64>,
    /// `S_ℓ(u) − ⟨δS^hom_ℓ(0), u⟩` per site of the reference cell.
    pub terms: Vec<f64>,
    /// `(R, Σ_{|ℓ|≤R} terms)` over shells up to `r_sum`.
    pub partial_sums: Vec<(f64, f64)>,
    pub value: f64,
    /// Fitted decay exponent of the shell maxima of `|terms|`.
    pub decay_exponent: f64,
    pub decay_interval: f64,
    /// Estimate of `Σ_{|ℓ|>r_sum} |terms|` from the fitted decay.
    pub tail_bound: f64,
    /// Σ over the whole reference cell (equals `S_{N_ref}`).
    pub cell_sum: f64,
}

/// Per-shell maxima `(r, max |v|)` over shells `[k, k+1)`, `lo ≤ r ≤ hi`.
pub fn shell_envelope(radii: &[f64], values: &[f64], lo: f64, hi: f64) -> Vec<(f64, f64)> {
    let mut shells: std::collections::BTreeMap<i64, (f64, f64)> = Default::default();
    for (&r, &v) in radii.iter().zip(values) {
        if r < lo || r > hi {
            continue;
        }
        let e = shells.entry(r.floor() as i64).or_insert((r, 0.0));
        if v.abs() > e.1 {
            *e = (r, v.abs());
        }
    }
    shells.into_values().filter(|&(_, v)| v > 0.0).collect()
}

/// Decay fit window `[2, N/2]` for per-site quantities on a cell of size `N`.
pub fn decay_window(n: usize) -> (f64, f64) {
    (2.0, n as f64 / 2.0)
}

/// `S(u) ≈ Σ_{|ℓ|≤R_sum} (S_ℓ(u) − ⟨δS^hom_ℓ(0), u⟩)` with `S_ℓ` taken at
/// the level of `point`'s cell (`N_ref`).
pub fn renormalised_entropy(model: &PotentialModel, point: &StationaryPoint, f: &KernelTable, r_sum: f64) -> Result<RenormalisedEntropy> {
    let cell = point.u.cell();
    let n_ref = cell.n();
    if (n_ref as f64) < 4.0 * r_sum {
        return Err(Error::Precondition(format!("N_ref = {n_ref} must be at least 4 R_sum = {}", 4.0 * r_sum)));
    }
    let profile = site_entropies(model, &point.u, point.kind, f)?;
    let fv = first_variation_profile(model, &point.u, f)?;
    let terms: Vec<f64> = profile.values.iter().zip(&fv).map(|(a, b)| a - b).collect();
    let radii = profile.radii.clone();

    let mut order: Vec<usize> = (0..terms.len()).collect();
    order.sort_by(|&a, &b| radii[a].total_cmp(&radii[b]));
    let mut partial_sums: Vec<(f64, f64)> = Vec::new();
    let mut acc = 0.0;
    for &s in &order {
        if radii[s] > r_sum + 1e-12 {
            break;
        }
        acc += terms[s];
        match partial_sums.last_mut() {
            Some(last) if (last.0 - radii[s]).abs() < 1e-12 => last.1 = acc,
            _ => partial_sums.push((radii[s], acc)),
        }
    }

    let d = cell.spec().dim() as f64;
    let (lo, hi) = decay_window(n_ref);
    let env = shell_envelope(&radii, &terms, lo, hi);
    let fit = fit_rate(&env, FitMode::PurePower)?;
    let p = fit.exponent;
    if p > -d - 0.5 {
        return Err(Error::Convergence(format!(
            "renormalised site terms decay like r^{p:.2}; need at most {:.1} to extrapolate",
            -d - 0.5
        )));
    }
    let surface = match cell.spec().dim() {
        1 => 2.0,
        2 => 2.0 * std::f64::consts::PI,
        _ => 4.0 * std::f64::consts::PI,
    };
    let r = r_sum.max(1.0);
    let tail_bound = fit.intercept.exp() * surface * r.powf(p + d) / (-p - d);
    Ok(RenormalisedEntropy {
        n_ref,
        r_sum,
        value: acc,
        cell_sum: terms.iter().sum(),
        radii,
        terms,
        partial_sums,
        decay_exponent: p,
        decay_interval: fit.interval,
        tail_bound,
    })
}

// ---------------------------------------------------------------------------
// Saddle entropy and rate

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeltaSReport {
    pub s_min: f64,
    pub s_saddle: f64,
    /// `ΔS_N` from the two det⁺ entropies.
    pub delta_s: f64,
    /// `ΔS_N` from `Σ S⁺ − ½ log|μ̄| + ½ log|λ̄|` against `−½ Tr log(F H F + π)` at the minimum.
    pub delta_s_split: f64,
    /// `Σ_ℓ S⁺_{N,ℓ}` at the saddle.
    pub s_plus: f64,
    pub lambda_bar: f64,
    pub mu_bar: f64,
    /// `μ̄` read off the dense spectrum of `F H F`, when that path ran.
    pub mu_bar_dense: Option<f64>,
    /// Imaginary part of the complex-log bookkeeping, in units of `π`.
    pub imaginary_part: f64,
}

/// `ΔS_N = S_N(ū^s_N) − S_N(ū_N)` by the det⁺ path and the splitting path.
pub fn delta_s_saddle(
    model: &PotentialModel,
    min: &StationaryPoint,
    sad: &StationaryPoint,
    f: &KernelTable,
    opts: &ThermoOptions,
) -> Result<DeltaSReport> {
    if min.kind != PointKind::Minimum || sad.kind != PointKind::Saddle {
        return Err(Error::Precondition("delta_s_saddle needs a minimum and a saddle".into()));
    }
    let lambda_bar = sad.certificate.lowest.value;
    if lambda_bar >= 0.0 {
        return Err(Error::Certification {
            reason: format!("λ̄ = {lambda_bar:e} is not negative"),
            negative: sad.certificate.classification.negative,
            zero: sad.certificate.classification.zero,
        });
    }
    let s_min = entropy_total(model, min)?;
    let s_saddle = entropy_total(model, sad)?;

    let h_sad = hessian(model, &sad.u, HessianKind::Defect)?;
    let mu_bar = generalized_eigen(&h_sad, f)?.value;
    if mu_bar >= 0.0 {
        return Err(Error::Certification {
            reason: format!("μ̄ = {mu_bar:e} is not negative"),
            negative: 0,
            zero: 0,
        });
    }
    let a_sad = conjugated_dense(f, &h_sad)?;
    let (trace_plus, mu_bar_dense) = if a_sad.nrows() <= opts.dense_max_dofs {
        let w = linalg::sym_eigvals(&a_sad)?;
        let c = crate::spectral::classify(&w, &ModeRules::new(Some(0)))?;
        check_negatives(PointKind::Saddle, c.negative, c.zero)?;
        let tr: f64 = w
            .iter()
            .zip(&c.labels)
            .filter(|(_, l)| **l == ModeLabel::Positive)
            .map(|(x, _)| x.ln())
            .sum();
        (tr, Some(w[0]))
    } else {
        let inertia = linalg::ldlt_inertia(&a_sad)?;
        check_negatives(PointKind::Saddle, inertia.negative, inertia.zero)?;
        (inertia.log_abs_det - mu_bar.abs().ln(), None)
    };
    drop(a_sad);
    let s_plus = -0.5 * trace_plus;
    // −½ log μ̄ and +½ log λ̄ each carry ±iπ/2 for one negative eigenvalue.
    let imaginary_part = 0.5 * (1.0 - 1.0);
    let s_saddle_split = s_plus - 0.5 * mu_bar.abs().ln() + 0.5 * lambda_bar.abs().ln();

    let h_min = hessian(model, &min.u, HessianKind::Defect)?;
    let a_min = conjugated_dense(f, &h_min)?;
    let s_min_split = match linalg::cholesky_logdet(&a_min)? {
        Some(v) => -0.5 * v,
        None => {
            return Err(Error::Certification {
                reason: "F H F + π is not positive definite at the minimum".into(),
                negative: linalg::ldlt_inertia(&a_min)?.negative,
                zero: 0,
            })
        }
    };
    Ok(DeltaSReport {
        s_min,
        s_saddle,
        delta_s: s_saddle - s_min,
        delta_s_split: s_saddle_split - s_min_split,
        s_plus,
        lambda_bar,
        mu_bar,
        mu_bar_dense,
        imaginary_part,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProductForm {
    /// `Σ log λ_j` over the positive eigenvalues of `H_N(ū_N)`.
    pub log_prod_min: f64,
    /// The same at the saddle.
    pub log_prod_saddle: f64,
}

/// Positive-eigenvalue log-products for the product form of the rate.
pub fn product_form(model: &PotentialModel, min: &StationaryPoint, sad: &StationaryPoint) -> Result<ProductForm> {
    let m = min.u.m();
    let rules = ModeRules::new(Some(m));
    let (a, ca) = logdet_plus(&hessian(model, &min.u, HessianKind::Defect)?.to_dense(), &rules)?;
    check_negatives(PointKind::Minimum, ca.negative, ca.zero)?;
    let (b, cb) = logdet_plus(&hessian(model, &sad.u, HessianKind::Defect)?.to_dense(), &rules)?;
    check_negatives(PointKind::Saddle, cb.negative, cb.zero)?;
    Ok(ProductForm {
        log_prod_min: a,
        log_prod_saddle: b,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RateReport {
    pub n: usize,
    pub beta: f64,
    pub delta_e: f64,
    pub delta_s: f64,
    pub free_energy_min: f64,
    pub free_energy_saddle: f64,
    pub log_k: f64,
    pub k: f64,
    /// `log K_N` from the eigenvalue products, when computed.
    pub log_k_product: Option<f64>,
    /// `|K_entropy / K_product − 1|`.
    pub product_rel_diff: Option<f64>,
    pub lambda_bar: f64,
    pub mu_bar: f64,
    /// `e^{βN^{-d}} (βN^{-d} + N^{-d} log⁵ N)`: shape of the relative error
    /// bound, up to an unknown constant.
    pub relative_error_shape: f64,
    /// Set when `ΔE_N ≤ 0`.
    pub direction_warning: bool,
}

/// `K_N = exp(−β(ΔE_N − β⁻¹ΔS_N))` for one `β`.
pub fn rate_at(
    min: &StationaryPoint,
    sad: &StationaryPoint,
    ds: &DeltaSReport,
    product: Option<&ProductForm>,
    beta: f64,
) -> Result<RateReport> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Precondition(format!("β must be positive, got {beta}")));
    }
    let cell = min.u.cell();
    let n = cell.n();
    let delta_e = sad.energy - min.energy;
    let direction_warning = delta_e <= 0.0;
    if direction_warning {
        log::warn!("ΔE_N = {delta_e:e} is not positive; transition direction suspect");
    }
    let log_k = -beta * delta_e + ds.delta_s;
    let log_k_product = product.map(|p| 0.5 * (p.log_prod_min - p.log_prod_saddle) - beta * delta_e);
    let product_rel_diff = log_k_product.map(|lp| (log_k - lp).exp_m1().abs());
    let nd = (n as f64).powi(-(cell.spec().dim() as i32));
    let relative_error_shape = (beta * nd).exp() * (beta * nd + nd * (n as f64).ln().powi(5));
    Ok(RateReport {
        n,
        beta,
        delta_e,
        delta_s: ds.delta_s,
        free_energy_min: min.energy - ds.s_min / beta,
        free_energy_saddle: sad.energy - ds.s_saddle / beta,
        log_k,
        k: log_k.exp(),
        log_k_product,
        product_rel_diff,
        lambda_bar: ds.lambda_bar,
        mu_bar: ds.mu_bar,
        relative_error_shape,
        direction_warning,
    })
}

/// HTST rate with the entropy difference and, below the dense limit, the
/// eigenvalue-product cross-check.
pub fn htst_rate(
    model: &PotentialModel,
    min: &StationaryPoint,
    sad: &StationaryPoint,
    beta: f64,
    f: &KernelTable,
    opts: &ThermoOptions,
) -> Result<RateReport> {
    let ds = delta_s_saddle(model, min, sad, f, opts)?;
    let product = if min.u.values().len() <= opts.dense_max_dofs {
        Some(product_form(model, min, sad)?)
    } else {
        None
    };
    rate_at(min, sad, &ds, product.as_ref(), beta)
}
