//! Convergence sweeps, rate fits, extrapolation and result emission.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lattice::{build_supercell, LatticeSpec, PeriodicField};
use crate::potentials::{ModelSpec, PotentialModel};
use crate::spectral::{kernel_fn, ModeRules};
use crate::stationary::{
    find_saddle, kicked_guess, mirror_midpoint, relax_minimum, save_point, CertMethod, SolveMethod, SolverOptions,
    StationaryPoint,
};
use crate::thermo::{
    decay_window, delta_s_saddle, entropy_total, product_form, rate_at, renormalised_entropy, shell_envelope,
    ThermoOptions,
};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Rate fits

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FitMode {
    PurePower,
    /// Fits `err ≈ C N^p log^q N`, with `q` fixed.
    PowerWithLog { q: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub exponent: f64,
    /// Half-width of the 95% confidence interval of the exponent.
    pub interval: f64,
    pub intercept: f64,
    /// RMS residual in log space.
    pub residual: f64,
    pub used: usize,
    pub dropped: usize,
    pub flag: Option<String>,
}

fn t975(dof: usize) -> f64 {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    match StudentsT::new(0.0, 1.0, dof as f64) {
        Ok(t) => t.inverse_cdf(0.975),
        Err(_) => f64::INFINITY,
    }
}

/// Least squares of `log err` against `log N`. Nonpositive or non-finite
/// errors are dropped with a notice.
pub fn fit_rate(pairs: &[(f64, f64)], mode: FitMode) -> Result<FitResult> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &(n, e) in pairs {
        if !(e > 0.0 && e.is_finite() && n > 1.0) {
            continue;
        }
        let mut y = e.ln();
        if let FitMode::PowerWithLog { q } = mode {
            y -= q * n.ln().ln();
        }
        xs.push(n.ln());
        ys.push(y);
    }
    let dropped = pairs.len() - xs.len();
    if dropped > 0 {
        log::warn!("fit_rate: dropped {dropped} nonpositive or non-finite errors");
    }
    if xs.len() < 3 {
        return Err(Error::Precondition(format!(
            "rate fit needs at least 3 positive errors, got {}",
            xs.len()
        )));
    }
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Precondition("rate fit needs at least two distinct N".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let dof = xs.len() - 2;
    let se = (ssr / dof as f64 / sxx).sqrt();
    let flag = (slope > -0.25).then(|| "not converging".to_string());
    Ok(FitResult {
        exponent: slope,
        interval: t975(dof) * se,
        intercept,
        residual: (ssr / k).sqrt(),
        used: xs.len(),
        dropped,
        flag,
    })
}

// ---------------------------------------------------------------------------
// Richardson extrapolation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extrapolation {
    pub limit: f64,
    /// Change of the limit when the largest N is dropped.
    pub uncertainty: f64,
    /// RMS residual of the three-point fit.
    pub residual: f64,
}

/// Least-squares fit of `v(N) = L + C N^{-p}`; returns `L` and the RMS residual.
fn limit_fit(points: &[(f64, f64)], p: f64) -> (f64, f64) {
    let k = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|(n, _)| n.powf(-p)).collect();
    let mx = xs.iter().sum::<f64>() / k;
    let my = points.iter().map(|(_, v)| v).sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(points).map(|(x, (_, v))| (x - mx) * (v - my)).sum();
    let c = sxy / sxx;
    let l = my - c * mx;
    let ssr: f64 = xs.iter().zip(points).map(|(x, (_, v))| (v - l - c * x).powi(2)).sum();
    (l, (ssr / k).sqrt())
}

/// Limit of `v(N) = L + C N^{-p} + …` from the three largest `N`.
pub fn richardson(points: &[(f64, f64)], p: f64) -> Result<Extrapolation> {
    let mut pts: Vec<(f64, f64)> = points.iter().copied().filter(|(_, v)| v.is_finite()).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts.dedup_by(|a, b| a.0 == b.0);
    if pts.len() < 3 {
        return Err(Error::Precondition(format!(
            "extrapolation needs three distinct N, got {}",
            pts.len()
        )));
    }
    let top = &pts[pts.len() - 3..];
    let (limit, residual) = limit_fit(top, p);
    let uncertainty = if pts.len() >= 4 {
        (limit_fit(&pts[pts.len() - 4..pts.len() - 1], p).0 - limit).abs()
    } else {
        (limit_fit(&pts[..2], p).0 - limit).abs()
    };
    Ok(Extrapolation {
        limit,
        uncertainty,
        residual,
    })
}

// ---------------------------------------------------------------------------
// Run configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    /// Rows of `A`.
    pub a: Vec<Vec<f64>>,
    /// Rows of `B`; defaults to `A`.
    #[serde(default)]
    pub b: Option<Vec<Vec<f64>>>,
    pub m: usize,
    pub r_cut: f64,
}

impl LatticeConfig {
    pub fn build(&self) -> Result<Arc<LatticeSpec>> {
        let to_matrix = |rows: &Vec<Vec<f64>>| -> Result<DMatrix<f64>> {
            let d = rows.len();
            if rows.iter().any(|r| r.len() != d) {
                return Err(Error::Config("lattice matrices must be square".into()));
            }
            Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
        };
        let a = to_matrix(&self.a)?;
        let b = match &self.b {
            Some(b) => to_matrix(b)?,
            None => a.clone(),
        };
        Ok(Arc::new(LatticeSpec::new(a, b, self.m, self.r_cut)?))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub lattice: LatticeConfig,
    pub model: ModelSpec,
    /// Supercell sizes, strictly ascending.
    pub ns: Vec<usize>,
    #[serde(default = "default_betas")]
    pub betas: Vec<f64>,
    /// Displacement of the defect site in the minimum's initial guess.
    #[serde(default)]
    pub kick: Option<Vec<f64>>,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub thermo: ThermoOptions,
    /// Reference level for the renormalised entropy; skipped when absent.
    #[serde(default)]
    pub n_ref: Option<usize>,
    #[serde(default = "default_r_sum")]
    pub r_sum: f64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Recorded with the results. The pipeline itself is deterministic.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_resolution")]
    pub stability_resolution: usize,
}

fn default_betas() -> Vec<f64> {
    vec![1.0]
}

fn default_r_sum() -> f64 {
    4.0
}

fn default_workers() -> usize {
    1
}

fn default_resolution() -> usize {
    64
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ns.is_empty() {
            return Err(Error::Config("ns must not be empty".into()));
        }
        if self.ns.windows(2).any(|w| w[1] <= w[0]) || self.ns[0] == 0 {
            return Err(Error::Config(format!("ns must be positive and strictly ascending: {:?}", self.ns)));
        }
        if self.ns.len() < 4 {
            log::warn!("{} supercell sizes; rate fits want at least 4", self.ns.len());
        }
        if self.betas.is_empty() || self.betas.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
            return Err(Error::Config(format!("betas must be positive: {:?}", self.betas)));
        }
        if let Some(k) = &self.kick {
            if k.len() != self.lattice.m {
                return Err(Error::Config(format!("kick has {} components, m = {}", k.len(), self.lattice.m)));
            }
        }
        if let Some(n_ref) = self.n_ref {
            if (n_ref as f64) < 4.0 * self.r_sum {
                return Err(Error::Config(format!("n_ref = {n_ref} is below 4 r_sum = {}", 4.0 * self.r_sum)));
            }
            let max_n = *self.ns.last().unwrap_or(&0);
            if n_ref < 2 * max_n {
                log::warn!("n_ref = {n_ref} is below twice the largest N ({max_n})");
            }
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<PotentialModel> {
        PotentialModel::new(self.lattice.build()?, &self.model)
    }

    /// Hash of the lattice and model definition.
    pub fn model_hash(&self) -> String {
        let json = serde_json::to_vec(&(&self.lattice, &self.model)).expect("serialisable config");
        sha_hex(&json)
    }

    /// Hash of everything that affects the numbers of a row.
    pub fn row_hash(&self) -> String {
        let json = serde_json::to_vec(&(
            &self.lattice,
            &self.model,
            &self.betas,
            &self.kick,
            &self.solver,
            &self.thermo,
        ))
        .expect("serialisable config");
        sha_hex(&json)
    }
}

// ---------------------------------------------------------------------------
// Sweep

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub energy: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub method: SolveMethod,
    pub cert_method: CertMethod,
    pub negative: usize,
    pub zero: usize,
    pub positive: usize,
    pub lowest_eigenvalue: f64,
    pub sigma: (f64, f64),
    pub cert_hash: String,
}

impl PointSummary {
    pub fn new(p: &StationaryPoint) -> Self {
        let c = &p.certificate;
        let cl = &c.classification;
        let key = serde_json::to_vec(&(
            p.kind,
            p.u.cell().n(),
            c.method,
            cl.negative,
            cl.zero,
            cl.positive,
            cl.tau_zero,
            c.lowest.value,
            c.sigma,
        ))
        .expect("serialisable certificate");
        PointSummary {
            energy: p.energy,
            gradient_norm: p.gradient_norm,
            iterations: p.iterations,
            method: p.method,
            cert_method: c.method,
            negative: cl.negative,
            zero: cl.zero,
            positive: cl.positive,
            lowest_eigenvalue: c.lowest.value,
            sigma: c.sigma,
            cert_hash: sha_hex(&key)[..16].to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateEntry {
    pub beta: f64,
    pub log_k: f64,
    pub k: f64,
    pub log_k_product: Option<f64>,
    pub product_rel_diff: Option<f64>,
    pub relative_error_shape: f64,
    pub direction_warning: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub dofs: usize,
    pub row_hash: String,
    pub minimum: Option<PointSummary>,
    pub saddle: Option<PointSummary>,
    pub s_min: Option<f64>,
    pub s_saddle: Option<f64>,
    pub delta_e: Option<f64>,
    pub delta_s: Option<f64>,
    pub delta_s_split: Option<f64>,
    pub s_plus: Option<f64>,
    pub mu_bar: Option<f64>,
    pub mu_bar_dense: Option<f64>,
    pub rates: Vec<RateEntry>,
    /// Fitted decay exponent of `|Dū_N(ℓ)|`.
    pub du_decay: Option<f64>,
    pub errors: Vec<String>,
}

impl SweepRow {
    /// All requested stages ran and were certified.
    pub fn certified(&self, expect_saddle: bool) -> bool {
        self.errors.is_empty() && self.minimum.is_some() && (!expect_saddle || self.saddle.is_some())
    }

    pub fn lambda_bar(&self) -> Option<f64> {
        self.saddle.as_ref().map(|s| s.lowest_eigenvalue)
    }

    fn quantity(&self, q: &Quantity) -> Option<f64> {
        match q {
            Quantity::EnergyMin => self.minimum.as_ref().map(|p| p.energy),
            Quantity::EntropyMin => self.s_min,
            Quantity::EnergySaddle => self.saddle.as_ref().map(|p| p.energy),
            Quantity::EntropySaddle => self.s_saddle,
            Quantity::DeltaE => self.delta_e,
            Quantity::DeltaS => self.delta_s,
            Quantity::LambdaBar => self.lambda_bar(),
            Quantity::MuBar => self.mu_bar,
            Quantity::Rate(b) => self.rates.iter().find(|r| r.beta == *b).map(|r| r.k),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Quantity {
    EnergyMin,
    EntropyMin,
    EnergySaddle,
    EntropySaddle,
    DeltaE,
    DeltaS,
    LambdaBar,
    MuBar,
    Rate(f64),
}

impl Quantity {
    fn name(&self) -> String {
        match self {
            Quantity::EnergyMin => "energy_min".into(),
            Quantity::EntropyMin => "entropy_min".into(),
            Quantity::EnergySaddle => "energy_saddle".into(),
            Quantity::EntropySaddle => "entropy_saddle".into(),
            Quantity::DeltaE => "delta_e".into(),
            Quantity::DeltaS => "delta_s".into(),
            Quantity::LambdaBar => "lambda_bar".into(),
            Quantity::MuBar => "mu_bar".into(),
            Quantity::Rate(b) => format!("k_beta_{b}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantityFit {
    pub quantity: String,
    pub extrapolation: Option<Extrapolation>,
    /// `(N, |q_N − q_ext|)`.
    pub errors: Vec<(usize, f64)>,
    pub fit: Option<FitResult>,
    /// Fit with a `log⁵ N` factor divided out.
    pub fit_log5: Option<FitResult>,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenormalisedSummary {
    pub n_ref: usize,
    pub r_sum: f64,
    pub value: f64,
    pub s_n_ref: f64,
    pub decay_exponent: f64,
    pub decay_interval: f64,
    pub tail_bound: f64,
}

pub const SCHEMA_VERSION: u32 = 1;

/// JSON schema of [`ConvergenceTable`].
pub const TABLE_SCHEMA: &str = include_str!("../schema/convergence_table.schema.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub schema_version: u32,
    pub model_name: String,
    pub model_hash: String,
    pub dim: usize,
    pub seed: u64,
    pub betas: Vec<f64>,
    pub mode_rules: ModeRules,
    pub rows: Vec<SweepRow>,
    pub fits: Vec<QuantityFit>,
    pub renormalised: Option<RenormalisedSummary>,
}

impl ConvergenceTable {
    pub fn fit(&self, quantity: &str) -> Option<&QuantityFit> {
        self.fits.iter().find(|f| f.quantity == quantity)
    }

    /// Every row certified for every stage it should have run.
    pub fn all_certified(&self, expect_saddle: bool) -> bool {
        self.rows.iter().all(|r| r.certified(expect_saddle))
    }
}

/// Decay exponent of `max_ρ |D_ρ u(ℓ)|` over the window `[2, N/2]`.
pub fn gradient_decay(u: &PeriodicField) -> Result<f64> {
    let cell = u.cell();
    let m = u.m();
    let nr = cell.spec().stencil_len();
    let mut g = vec![0.0; nr * m];
    let mut radii = Vec::with_capacity(cell.len());
    let mut vals = Vec::with_capacity(cell.len());
    for s in 0..cell.len() {
        u.stencil_at(s, &mut g);
        let mx = (0..nr)
            .map(|r| g[r * m..(r + 1) * m].iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        radii.push(cell.site_norm(s));
        vals.push(mx);
    }
    let (lo, hi) = decay_window(cell.n());
    Ok(fit_rate(&shell_envelope(&radii, &vals, lo, hi), FitMode::PurePower)?.exponent)
}

/// One row of the sweep: relax, saddle, entropies, rates. Stage failures
/// are recorded and later stages skipped.
pub fn compute_row(model: &PotentialModel, cfg: &RunConfig, n: usize) -> SweepRow {
    let mut row = SweepRow {
        n,
        dofs: 0,
        row_hash: cfg.row_hash(),
        minimum: None,
        saddle: None,
        s_min: None,
        s_saddle: None,
        delta_e: None,
        delta_s: None,
        delta_s_split: None,
        s_plus: None,
        mu_bar: None,
        mu_bar_dense: None,
        rates: Vec::new(),
        du_decay: None,
        errors: Vec::new(),
    };
    if let Err(e) = fill_row(model, cfg, &mut row) {
        log::warn!("N = {n}: {e}");
        row.errors.push(e.to_string());
    }
    row
}

fn fill_row(model: &PotentialModel, cfg: &RunConfig, row: &mut SweepRow) -> Result<()> {
    let cell = build_supercell(model.spec().clone(), row.n)?;
    row.dofs = cell.dofs();
    let f = kernel_fn(model, &cell)?;
    let guess = match &cfg.kick {
        Some(k) if model.has_defect() => kicked_guess(&cell, k)?,
        _ => PeriodicField::zeros(cell.clone()),
    };
    let min = relax_minimum(model, &guess, &f, &cfg.solver)?;
    row.minimum = Some(PointSummary::new(&min));
    row.s_min = Some(entropy_total(model, &min)?);
    if model.has_defect() {
        // A diagnostic only: small cells have too few shells to fit.
        match gradient_decay(&min.u) {
            Ok(p) => row.du_decay = Some(p),
            Err(e) => log::info!("N = {}: no decay fit ({e})", row.n),
        }
    }
    if let Some(dir) = &cfg.out_dir {
        save_point(&min, &dir.join("points").join(format!("min_n{}", row.n)), &cfg.model_hash())?;
    }
    if !model.has_defect() {
        return Ok(());
    }
    let sguess = mirror_midpoint(model, &min.u)?;
    let sad = find_saddle(model, &sguess, &f, &cfg.solver)?;
    row.saddle = Some(PointSummary::new(&sad));
    if let Some(dir) = &cfg.out_dir {
        save_point(&sad, &dir.join("points").join(format!("saddle_n{}", row.n)), &cfg.model_hash())?;
    }
    let ds = delta_s_saddle(model, &min, &sad, &f, &cfg.thermo)?;
    row.s_saddle = Some(ds.s_saddle);
    row.delta_e = Some(sad.energy - min.energy);
    row.delta_s = Some(ds.delta_s);
    row.delta_s_split = Some(ds.delta_s_split);
    row.s_plus = Some(ds.s_plus);
    row.mu_bar = Some(ds.mu_bar);
    row.mu_bar_dense = ds.mu_bar_dense;
    let product = if cell.dofs() <= cfg.thermo.dense_max_dofs {
        Some(product_form(model, &min, &sad)?)
    } else {
        None
    };
    for &beta in &cfg.betas {
        let r = rate_at(&min, &sad, &ds, product.as_ref(), beta)?;
        row.rates.push(RateEntry {
            beta,
            log_k: r.log_k,
            k: r.k,
            log_k_product: r.log_k_product,
            product_rel_diff: r.product_rel_diff,
            relative_error_shape: r.relative_error_shape,
            direction_warning: r.direction_warning,
        });
    }
    Ok(())
}

fn row_path(dir: &Path, n: usize) -> PathBuf {
    dir.join("rows").join(format!("n{n}.json"))
}

fn load_row(dir: &Path, n: usize, hash: &str) -> Result<Option<SweepRow>> {
    let path = row_path(dir, n);
    if !path.exists() {
        return Ok(None);
    }
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let row: SweepRow = serde_json::from_slice(&bytes)?;
    Ok((row.row_hash == hash && row.n == n && row.errors.is_empty()).then_some(row))
}

/// Fits `|q_N − q_ext|` for every quantity present in the rows.
pub fn compute_fits(rows: &[SweepRow], dim: usize, betas: &[f64]) -> Vec<QuantityFit> {
    let mut qs = vec![
        Quantity::EnergyMin,
        Quantity::EntropyMin,
        Quantity::EnergySaddle,
        Quantity::EntropySaddle,
        Quantity::DeltaE,
        Quantity::DeltaS,
        Quantity::LambdaBar,
        Quantity::MuBar,
    ];
    qs.extend(betas.iter().map(|&b| Quantity::Rate(b)));
    let mut out = Vec::new();
    for q in qs {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter_map(|r| r.quantity(&q).map(|v| (r.n as f64, v)))
            .collect();
        if pts.is_empty() {
            continue;
        }
        let mut qf = QuantityFit {
            quantity: q.name(),
            extrapolation: None,
            errors: Vec::new(),
            fit: None,
            fit_log5: None,
            note: None,
        };
        if pts.iter().all(|(_, v)| v.abs() <= 1e-10) {
            qf.note = Some("undefined: quantity vanishes at every N".into());
            out.push(qf);
            continue;
        }
        match richardson(&pts, dim as f64) {
            Ok(ext) => {
                qf.errors = pts.iter().map(|&(n, v)| (n as usize, (v - ext.limit).abs())).collect();
                qf.extrapolation = Some(ext);
                let errs: Vec<(f64, f64)> = qf.errors.iter().map(|&(n, e)| (n as f64, e)).collect();
                match fit_rate(&errs, FitMode::PurePower) {
                    Ok(f) => {
                        qf.note = f.flag.clone();
                        qf.fit = Some(f);
                    }
                    Err(e) => qf.note = Some(format!("undefined: {e}")),
                }
                qf.fit_log5 = fit_rate(&errs, FitMode::PowerWithLog { q: 5.0 }).ok();
            }
            Err(e) => qf.note = Some(format!("undefined: {e}")),
        }
        out.push(qf);
    }
    out
}

fn renormalised_stage(model: &PotentialModel, cfg: &RunConfig, n_ref: usize) -> Result<RenormalisedSummary> {
    let cell = build_supercell(model.spec().clone(), n_ref)?;
    let f = kernel_fn(model, &cell)?;
    let guess = match &cfg.kick {
        Some(k) => kicked_guess(&cell, k)?,
        None => PeriodicField::zeros(cell.clone()),
    };
    let min = relax_minimum(model, &guess, &f, &cfg.solver)?;
    let r = renormalised_entropy(model, &min, &f, cfg.r_sum)?;
    Ok(RenormalisedSummary {
        n_ref,
        r_sum: cfg.r_sum,
        value: r.value,
        s_n_ref: r.cell_sum,
        decay_exponent: r.decay_exponent,
        decay_interval: r.decay_interval,
        tail_bound: r.tail_bound,
    })
}

/// Runs every row of the configuration (persisted rows are reused) and
/// fits the convergence rates.
pub fn sweep(cfg: &RunConfig) -> Result<ConvergenceTable> {
    cfg.validate()?;
    let model = cfg.build_model()?;
    let stab = model.stability(cfg.stability_resolution);
    if !stab.pass {
        return Err(Error::Instability(format!(
            "stability scan failed: c0 = {:e} at k = {:?}",
            stab.c0, stab.k_min
        )));
    }
    let hash = cfg.row_hash();
    let slots: Vec<Mutex<Option<SweepRow>>> = cfg.ns.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let work = || -> Result<()> {
        loop {
            let i = next.fetch_add(1, Ordering::SeqCst);
            let Some(&n) = cfg.ns.get(i) else {
                return Ok(());
            };
            let cached = match &cfg.out_dir {
                Some(dir) => load_row(dir, n, &hash)?,
                None => None,
            };
            let row = match cached {
                Some(r) => {
                    log::info!("N = {n}: reusing persisted row");
                    r
                }
                None => {
                    let r = compute_row(&model, cfg, n);
                    if let Some(dir) = &cfg.out_dir {
                        atomic_write(&row_path(dir, n), &serde_json::to_vec_pretty(&r)?)?;
                    }
                    r
                }
            };
            *slots[i].lock().expect("row slot") = Some(row);
        }
    };
    let workers = cfg.workers.min(cfg.ns.len()).max(1);
    if workers == 1 {
        work()?;
    } else {
        std::thread::scope(|s| -> Result<()> {
            let handles: Vec<_> = (0..workers).map(|_| s.spawn(&work)).collect();
            for h in handles {
                h.join().map_err(|_| Error::Convergence("sweep worker panicked".into()))??;
            }
            Ok(())
        })?;
    }
    let rows: Vec<SweepRow> = slots
        .into_iter()
        .map(|m| m.into_inner().expect("row slot").expect("every row computed"))
        .collect();
    let dim = model.spec().dim();
    let fits = compute_fits(&rows, dim, &cfg.betas);
    let renormalised = match cfg.n_ref {
        Some(n_ref) if model.has_defect() => match renormalised_stage(&model, cfg, n_ref) {
            Ok(r) => Some(r),
            Err(e) => {
                log::warn!("renormalised entropy at N_ref = {n_ref}: {e}");
                None
            }
        },
        _ => None,
    };
    Ok(ConvergenceTable {
        schema_version: SCHEMA_VERSION,
        model_name: model.name().to_string(),
        model_hash: cfg.model_hash(),
        dim,
        seed: cfg.seed,
        betas: cfg.betas.clone(),
        mode_rules: ModeRules::new(Some(model.spec().m())),
        rows,
        fits,
        renormalised,
    })
}

// ---------------------------------------------------------------------------
// Emission

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Json,
    Both,
}

/// Flat CSV record: one line per `(N, β)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub n: usize,
    pub beta: Option<f64>,
    pub certified: bool,
    pub e_min: Option<f64>,
    pub e_saddle: Option<f64>,
    pub s_min: Option<f64>,
    pub s_saddle: Option<f64>,
    pub delta_e: Option<f64>,
    pub delta_s: Option<f64>,
    pub delta_s_split: Option<f64>,
    pub log_k: Option<f64>,
    pub k: Option<f64>,
    pub log_k_product: Option<f64>,
    pub product_rel_diff: Option<f64>,
    pub lambda_bar: Option<f64>,
    pub mu_bar: Option<f64>,
    pub grad_min: Option<f64>,
    pub grad_saddle: Option<f64>,
    pub sigma_low_saddle: Option<f64>,
    pub sigma_high_saddle: Option<f64>,
    pub cert_min: Option<String>,
    pub cert_saddle: Option<String>,
    pub err_e_min: Option<f64>,
    pub err_s_min: Option<f64>,
    pub err_lambda_bar: Option<f64>,
    pub err_mu_bar: Option<f64>,
    pub err_k: Option<f64>,
    pub errors: String,
}

fn error_at(table: &ConvergenceTable, quantity: &str, n: usize) -> Option<f64> {
    table.fit(quantity)?.errors.iter().find(|(m, _)| *m == n).map(|(_, e)| *e)
}

pub fn csv_rows(table: &ConvergenceTable) -> Vec<CsvRow> {
    let expect_saddle = table.rows.iter().any(|r| r.saddle.is_some());
    let mut out = Vec::new();
    for r in &table.rows {
        let betas: Vec<Option<&RateEntry>> = if r.rates.is_empty() {
            vec![None]
        } else {
            r.rates.iter().map(Some).collect()
        };
        for rate in betas {
            out.push(CsvRow {
                n: r.n,
                beta: rate.map(|x| x.beta),
                certified: r.certified(expect_saddle),
                e_min: r.minimum.as_ref().map(|p| p.energy),
                e_saddle: r.saddle.as_ref().map(|p| p.energy),
                s_min: r.s_min,
                s_saddle: r.s_saddle,
                delta_e: r.delta_e,
                delta_s: r.delta_s,
                delta_s_split: r.delta_s_split,
                log_k: rate.map(|x| x.log_k),
                k: rate.map(|x| x.k),
                log_k_product: rate.and_then(|x| x.log_k_product),
                product_rel_diff: rate.and_then(|x| x.product_rel_diff),
                lambda_bar: r.lambda_bar(),
                mu_bar: r.mu_bar,
                grad_min: r.minimum.as_ref().map(|p| p.gradient_norm),
                grad_saddle: r.saddle.as_ref().map(|p| p.gradient_norm),
                sigma_low_saddle: r.saddle.as_ref().map(|p| p.sigma.0),
                sigma_high_saddle: r.saddle.as_ref().map(|p| p.sigma.1),
                cert_min: r.minimum.as_ref().map(|p| p.cert_hash.clone()),
                cert_saddle: r.saddle.as_ref().map(|p| p.cert_hash.clone()),
                err_e_min: error_at(table, "energy_min", r.n),
                err_s_min: error_at(table, "entropy_min", r.n),
                err_lambda_bar: error_at(table, "lambda_bar", r.n),
                err_mu_bar: error_at(table, "mu_bar", r.n),
                err_k: rate.and_then(|x| error_at(table, &format!("k_beta_{}", x.beta), r.n)),
                errors: r.errors.join("; "),
            });
        }
    }
    out
}

/// Header line of the canonical CSV.
pub const CSV_HEADER: &str = "n,beta,certified,e_min,e_saddle,s_min,s_saddle,delta_e,delta_s,delta_s_split,log_k,k,\
log_k_product,product_rel_diff,lambda_bar,mu_bar,grad_min,grad_saddle,sigma_low_saddle,sigma_high_saddle,cert_min,\
cert_saddle,err_e_min,err_s_min,err_lambda_bar,err_mu_bar,err_k,errors";

pub fn write_csv_rows<W: Write>(rows: &[CsvRow], w: W) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(CSV_HEADER.split(','))?;
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn read_csv_rows<R: Read>(r: R) -> Result<Vec<CsvRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rd.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// Long-format plot data: `quantity,n,abs_error`, for log-log plots.
pub fn write_plot_data<W: Write>(table: &ConvergenceTable, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["quantity", "n", "abs_error"])?;
    for f in &table.fits {
        for (n, e) in &f.errors {
            wr.write_record([f.quantity.clone(), n.to_string(), format!("{e:e}")])?;
        }
    }
    wr.flush().map_err(|e| Error::io("<plot data>", e))
}

/// Writes `table.csv`, `table.json` and `plot_data.csv` into `dir`.
pub fn emit(table: &ConvergenceTable, dir: &Path, format: OutputFormat) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    if matches!(format, OutputFormat::Csv | OutputFormat::Both) {
        let mut buf = Vec::new();
        write_csv_rows(&csv_rows(table), &mut buf)?;
        let p = dir.join("table.csv");
        atomic_write(&p, &buf)?;
        written.push(p);
    }
    if matches!(format, OutputFormat::Json | OutputFormat::Both) {
        let p = dir.join("table.json");
        atomic_write(&p, &serde_json::to_vec_pretty(table)?)?;
        written.push(p);
    }
    let mut buf = Vec::new();
    write_plot_data(table, &mut buf)?;
    let p = dir.join("plot_data.csv");
    atomic_write(&p, &buf)?;
    written.push(p);
    Ok(written)
}

pub fn read_table_json(path: &Path) -> Result<ConvergenceTable> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}
