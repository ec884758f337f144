//! Site potentials `V_ℓ(Du(ℓ))` with analytic derivatives up to order four,
//! the homogeneous/defect split, and stability diagnostics through the
//! Fourier symbol `ĥ(k)` of the homogeneous Hessian.
//!
//! A stencil gradient is a flat vector of length `n = |R| m`; component
//! `(r, i)` sits at `r * m + i`. Derivative tensors use the same flattening,
//! row-major.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{LatticePoint, LatticeSpec, MAX_DIM};

pub use crate::lattice::StencilGradient;

/// Highest derivative order every shipped potential provides.
pub const REGULARITY: usize = 4;

// ---------------------------------------------------------------------------
// Configuration form of a model

/// Parameters of one distance shell of a bond model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MorseShell {
    pub depth: f64,
    pub alpha: f64,
    /// Rest-length misfit: the bond is relaxed at `|ρ| + shift`.
    #[serde(default)]
    pub shift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpringShell {
    pub k: f64,
    /// Central springs act along `ρ` (`k ρ̂ρ̂ᵀ`, needs `m = d`); otherwise `k I`.
    #[serde(default)]
    pub central: bool,
}

/// One additive term of a site potential.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TermSpec {
    /// `¼ Σ_ρ g_ρᵀ K_ρ g_ρ`, one stiffness per distance shell.
    Springs { shells: Vec<SpringShell> },
    /// `½ Σ_ρ φ_ρ(|ρ + g_ρ| − |ρ|)` with Morse curves per shell.
    MorseBonds { shells: Vec<MorseShell> },
    /// `a ((e·w)² − s²)² − a s⁴` in the relative displacement
    /// `w = −mean_ρ g_ρ` of the site against its neighbours.
    DoubleWell { a: f64, s: f64, direction: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverrideSpec {
    pub site: Vec<i64>,
    pub terms: Vec<TermSpec>,
}

/// Reflection symmetry of a model: `ℓ ↦ L ℓ` on lattice coordinates and
/// `u ↦ P u` on displacements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MirrorSpec {
    pub lattice: Vec<Vec<i64>>,
    pub displacement: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default)]
    pub name: String,
    pub homogeneous: Vec<TermSpec>,
    #[serde(default)]
    pub overrides: Vec<OverrideSpec>,
    #[serde(default)]
    pub mirror: Option<MirrorSpec>,
}

// ---------------------------------------------------------------------------
// Site potentials

#[derive(Clone, Debug)]
enum SiteTerm {
    /// Per stencil vector `m×m` stiffness, row-major.
    Springs { blocks: Vec<Vec<f64>> },
    Bonds {
        curves: Vec<MorseShell>,
        rho: Vec<[f64; MAX_DIM]>,
    },
    DoubleWell { a: f64, s: f64, dir: Vec<f64> },
}

/// `V_ℓ` as a function of the stencil gradient.
#[derive(Clone, Debug)]
pub struct SitePotential {
    nr: usize,
    m: usize,
    terms: Vec<SiteTerm>,
}

/// Value and requested derivative tensors of a site potential.
#[derive(Clone, Debug)]
pub struct SiteDerivatives {
    pub n: usize,
    pub value: f64,
    pub gradient: Option<Vec<f64>>,
    pub hessian: Option<Vec<f64>>,
    pub third: Option<Vec<f64>>,
    pub fourth: Option<Vec<f64>>,
}

/// `φ(t)` and `φ'(t) .. φ''''(t)` of a Morse curve with `φ(0) = 0`.
fn morse(c: &MorseShell, t: f64) -> [f64; 5] {
    let y = (-c.alpha * (t - c.shift)).exp();
    let y0 = 1.0 - (c.alpha * c.shift).exp();
    let mut out = [0.0; 5];
    out[0] = c.depth * ((1.0 - y) * (1.0 - y) - y0 * y0);
    let mut pa = 1.0;
    let mut p2a = 1.0;
    for o in out.iter_mut().skip(1) {
        pa *= -c.alpha;
        p2a *= -2.0 * c.alpha;
        *o = c.depth * (-2.0 * pa * y + p2a * y * y);
    }
    out
}

/// Derivatives of `ψ(s) = φ(√s − r0)` with respect to `s = |x|²`.
fn psi(c: &MorseShell, s: f64, r0: f64) -> [f64; 5] {
    let r = s.sqrt();
    let p = morse(c, r - r0);
    let r1 = 0.5 / r;
    let r2 = -0.25 / (r * s);
    let r3 = 0.375 / (r * s * s);
    let r4 = -0.9375 / (r * s * s * s);
    [
        p[0],
        p[1] * r1,
        p[2] * r1 * r1 + p[1] * r2,
        p[3] * r1.powi(3) + 3.0 * p[2] * r1 * r2 + p[1] * r3,
        p[4] * r1.powi(4) + 6.0 * p[3] * r1 * r1 * r2 + p[2] * (3.0 * r2 * r2 + 4.0 * r1 * r3) + p[1] * r4,
    ]
}

fn delta(i: usize, j: usize) -> f64 {
    if i == j {
        1.0
    } else {
        0.0
    }
}

impl SitePotential {
    fn n(&self) -> usize {
        self.nr * self.m
    }

    pub fn stencil_len(&self) -> usize {
        self.nr
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// True if every term is quadratic, so derivatives above order two vanish.
    pub fn is_harmonic(&self) -> bool {
        self.terms.iter().all(|t| matches!(t, SiteTerm::Springs { .. }))
    }

    fn check_len(&self, g: &[f64]) -> Result<()> {
        if g.len() != self.n() {
            return Err(Error::SizeMismatch {
                what: "stencil gradient length",
                expected: self.n(),
                actual: g.len(),
            });
        }
        Ok(())
    }

    pub fn value(&self, g: &[f64]) -> f64 {
        let m = self.m;
        let mut v = 0.0;
        for t in &self.terms {
            match t {
                SiteTerm::Springs { blocks } => {
                    for (r, k) in blocks.iter().enumerate() {
                        let gr = &g[r * m..(r + 1) * m];
                        for i in 0..m {
                            for j in 0..m {
                                v += 0.25 * gr[i] * k[i * m + j] * gr[j];
                            }
                        }
                    }
                }
                SiteTerm::Bonds { curves, rho } => {
                    for (r, c) in curves.iter().enumerate() {
                        if c.depth == 0.0 {
                            continue;
                        }
                        let (s, r0) = bond_geometry(&rho[r], &g[r * m..(r + 1) * m], m);
                        v += 0.5 * morse(c, s.sqrt() - r0)[0];
                    }
                }
                SiteTerm::DoubleWell { a, s, dir } => {
                    let q = well_coordinate(dir, g, self.nr, m);
                    v += a * (q * q - s * s).powi(2) - a * s.powi(4);
                }
            }
        }
        v
    }

    pub fn add_gradient(&self, g: &[f64], out: &mut [f64]) {
        let m = self.m;
        for t in &self.terms {
            match t {
                SiteTerm::Springs { blocks } => {
                    for (r, k) in blocks.iter().enumerate() {
                        let gr = &g[r * m..(r + 1) * m];
                        for i in 0..m {
                            out[r * m + i] += 0.5 * (0..m).map(|j| k[i * m + j] * gr[j]).sum::<f64>();
                        }
                    }
                }
                SiteTerm::Bonds { curves, rho } => {
                    for (r, c) in curves.iter().enumerate() {
                        if c.depth == 0.0 {
                            continue;
                        }
                        let x = bond_x(&rho[r], &g[r * m..(r + 1) * m], m);
                        let (s, r0) = bond_geometry(&rho[r], &g[r * m..(r + 1) * m], m);
                        let p = psi(c, s, r0);
                        for i in 0..m {
                            out[r * m + i] += 0.5 * 2.0 * p[1] * x[i];
                        }
                    }
                }
                SiteTerm::DoubleWell { a, s, dir } => {
                    let q = well_coordinate(dir, g, self.nr, m);
                    let d1 = 4.0 * a * q * q * q - 4.0 * a * s * s * q;
                    for r in 0..self.nr {
                        for i in 0..m {
                            out[r * m + i] += d1 * (-dir[i] / self.nr as f64);
                        }
                    }
                }
            }
        }
    }

    /// Adds `∇²V(g)` into a row-major `n×n` buffer.
    pub fn add_hessian(&self, g: &[f64], out: &mut [f64]) {
        let m = self.m;
        let n = self.n();
        for t in &self.terms {
            match t {
                SiteTerm::Springs { blocks } => {
                    for (r, k) in blocks.iter().enumerate() {
                        for i in 0..m {
                            for j in 0..m {
                                out[(r * m + i) * n + r * m + j] += 0.5 * k[i * m + j];
                            }
                        }
                    }
                }
                SiteTerm::Bonds { curves, rho } => {
                    for (r, c) in curves.iter().enumerate() {
                        if c.depth == 0.0 {
                            continue;
                        }
                        let x = bond_x(&rho[r], &g[r * m..(r + 1) * m], m);
                        let (s, r0) = bond_geometry(&rho[r], &g[r * m..(r + 1) * m], m);
                        let p = psi(c, s, r0);
                        for i in 0..m {
                            for j in 0..m {
                                let t2 = 4.0 * p[2] * x[i] * x[j] + 2.0 * p[1] * delta(i, j);
                                out[(r * m + i) * n + r * m + j] += 0.5 * t2;
                            }
                        }
                    }
                }
                SiteTerm::DoubleWell { a, s, dir } => {
                    let q = well_coordinate(dir, g, self.nr, m);
                    let d2 = 12.0 * a * q * q - 4.0 * a * s * s;
                    let c = well_direction(dir, self.nr, m);
                    for p in 0..n {
                        for q2 in 0..n {
                            out[p * n + q2] += d2 * c[p] * c[q2];
                        }
                    }
                }
            }
        }
    }

    /// Adds `∇³V(g)[·, ·, v]` into a row-major `n×n` buffer.
    pub fn add_third_contracted(&self, g: &[f64], v: &[f64], out: &mut [f64]) {
        let m = self.m;
        let n = self.n();
        for t in &self.terms {
            match t {
                SiteTerm::Springs { .. } => {}
                SiteTerm::Bonds { curves, rho } => {
                    for (r, c) in curves.iter().enumerate() {
                        if c.depth == 0.0 {
                            continue;
                        }
                        let x = bond_x(&rho[r], &g[r * m..(r + 1) * m], m);
                        let (s, r0) = bond_geometry(&rho[r], &g[r * m..(r + 1) * m], m);
                        let p = psi(c, s, r0);
                        let vr = &v[r * m..(r + 1) * m];
                        let xv: f64 = (0..m).map(|k| x[k] * vr[k]).sum();
                        for i in 0..m {
                            for j in 0..m {
                                let t3 = 8.0 * p[3] * x[i] * x[j] * xv
                                    + 4.0 * p[2] * (delta(i, j) * xv + x[j] * vr[i] + x[i] * vr[j]);
                                out[(r * m + i) * n + r * m + j] += 0.5 * t3;
                            }
                        }
                    }
                }
                SiteTerm::DoubleWell { a, dir, .. } => {
                    let q = well_coordinate(dir, g, self.nr, m);
                    let c = well_direction(dir, self.nr, m);
                    let cv: f64 = c.iter().zip(v).map(|(a, b)| a * b).sum();
                    let d3 = 24.0 * a * q * cv;
                    for p in 0..n {
                        for q2 in 0..n {
                            out[p * n + q2] += d3 * c[p] * c[q2];
                        }
                    }
                }
            }
        }
    }

    /// Adds `∇⁴V(g)[·, ·, v, w]` into a row-major `n×n` buffer.
    pub fn add_fourth_contracted(&self, g: &[f64], v: &[f64], w: &[f64], out: &mut [f64]) {
        let m = self.m;
        let n = self.n();
        for t in &self.terms {
            match t {
                SiteTerm::Springs { .. } => {}
                SiteTerm::Bonds { curves, rho } => {
                    for (r, c) in curves.iter().enumerate() {
                        if c.depth == 0.0 {
                            continue;
                        }
                        let x = bond_x(&rho[r], &g[r * m..(r + 1) * m], m);
                        let (s, r0) = bond_geometry(&rho[r], &g[r * m..(r + 1) * m], m);
                        let p = psi(c, s, r0);
                        let vr = &v[r * m..(r + 1) * m];
                        let wr = &w[r * m..(r + 1) * m];
                        let xv: f64 = (0..m).map(|k| x[k] * vr[k]).sum();
                        let xw: f64 = (0..m).map(|k| x[k] * wr[k]).sum();
                        let vw: f64 = (0..m).map(|k| vr[k] * wr[k]).sum();
                        for i in 0..m {
                            for j in 0..m {
                                let dij = delta(i, j);
                                let t4 = 16.0 * p[4] * x[i] * x[j] * xv * xw
                                    + 8.0
                                        * p[3]
                                        * (dij * xv * xw
                                            + vr[i] * x[j] * xw
                                            + wr[i] * x[j] * xv
                                            + vr[j] * x[i] * xw
                                            + wr[j] * x[i] * xv
                                            + vw * x[i] * x[j])
                                    + 4.0 * p[2] * (dij * vw + vr[i] * wr[j] + wr[i] * vr[j]);
                                out[(r * m + i) * n + r * m + j] += 0.5 * t4;
                            }
                        }
                    }
                }
                SiteTerm::DoubleWell { a, dir, .. } => {
                    let c = well_direction(dir, self.nr, m);
                    let cv: f64 = c.iter().zip(v).map(|(a, b)| a * b).sum();
                    let cw: f64 = c.iter().zip(w).map(|(a, b)| a * b).sum();
                    let d4 = 24.0 * a * cv * cw;
                    for p in 0..n {
                        for q2 in 0..n {
                            out[p * n + q2] += d4 * c[p] * c[q2];
                        }
                    }
                }
            }
        }
    }

    /// Value and derivative tensors through `order` as dense row-major
    /// arrays of size `n^j`.
    pub fn evaluate(&self, g: &StencilGradient, order: usize) -> Result<SiteDerivatives> {
        if order > REGULARITY {
            return Err(Error::Precondition(format!(
                "derivative order {order} exceeds the regularity {REGULARITY}"
            )));
        }
        let g = &g.entries;
        self.check_len(g)?;
        let n = self.n();
        let mut out = SiteDerivatives {
            n,
            value: self.value(g),
            gradient: None,
            hessian: None,
            third: None,
            fourth: None,
        };
        if order >= 1 {
            let mut grad = vec![0.0; n];
            self.add_gradient(g, &mut grad);
            out.gradient = Some(grad);
        }
        if order >= 2 {
            let mut h = vec![0.0; n * n];
            self.add_hessian(g, &mut h);
            out.hessian = Some(h);
        }
        let mut e = vec![0.0; n];
        if order >= 3 {
            let mut t3 = vec![0.0; n * n * n];
            let mut buf = vec![0.0; n * n];
            for k in 0..n {
                e[k] = 1.0;
                buf.iter_mut().for_each(|x| *x = 0.0);
                self.add_third_contracted(g, &e, &mut buf);
                for ij in 0..n * n {
                    t3[ij * n + k] = buf[ij];
                }
                e[k] = 0.0;
            }
            out.third = Some(t3);
        }
        if order >= 4 {
            let mut t4 = vec![0.0; n * n * n * n];
            let mut buf = vec![0.0; n * n];
            let mut f = vec![0.0; n];
            for k in 0..n {
                e[k] = 1.0;
                for l in 0..n {
                    f[l] = 1.0;
                    buf.iter_mut().for_each(|x| *x = 0.0);
                    self.add_fourth_contracted(g, &e, &f, &mut buf);
                    for ij in 0..n * n {
                        t4[(ij * n + k) * n + l] = buf[ij];
                    }
                    f[l] = 0.0;
                }
                e[k] = 0.0;
            }
            out.fourth = Some(t4);
        }
        Ok(out)
    }
}

fn bond_x(rho: &[f64; MAX_DIM], g: &[f64], m: usize) -> [f64; MAX_DIM] {
    let mut x = [0.0; MAX_DIM];
    for i in 0..m {
        x[i] = rho[i] + g[i];
    }
    x
}

/// `(|ρ + g|², |ρ|)`.
fn bond_geometry(rho: &[f64; MAX_DIM], g: &[f64], m: usize) -> (f64, f64) {
    let x = bond_x(rho, g, m);
    let s = (0..m).map(|i| x[i] * x[i]).sum::<f64>();
    let r0 = (0..m).map(|i| rho[i] * rho[i]).sum::<f64>().sqrt();
    (s, r0)
}

/// `q = e · w` with `w = −mean_ρ g_ρ`.
fn well_coordinate(dir: &[f64], g: &[f64], nr: usize, m: usize) -> f64 {
    let mut q = 0.0;
    for r in 0..nr {
        for i in 0..m {
            q -= dir[i] * g[r * m + i];
        }
    }
    q / nr as f64
}

/// `∂q/∂g`.
fn well_direction(dir: &[f64], nr: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; nr * m];
    for r in 0..nr {
        for i in 0..m {
            c[r * m + i] = -dir[i] / nr as f64;
        }
    }
    c
}

// ---------------------------------------------------------------------------
// Models

#[derive(Clone, Debug)]
pub struct Mirror {
    pub lattice: [[i64; MAX_DIM]; MAX_DIM],
    pub displacement: DMatrix<f64>,
}

impl Mirror {
    pub fn map_point(&self, p: &LatticePoint, d: usize) -> LatticePoint {
        let mut z = [0i64; MAX_DIM];
        for (i, zi) in z.iter_mut().enumerate().take(d) {
            *zi = (0..d).map(|j| self.lattice[i][j] * p.0[j]).sum();
        }
        LatticePoint(z)
    }
}

/// Homogeneous site potential plus finitely many defect overrides.
#[derive(Clone, Debug)]
pub struct PotentialModel {
    spec: Arc<LatticeSpec>,
    name: String,
    homogeneous: SitePotential,
    overrides: BTreeMap<LatticePoint, SitePotential>,
    mirror: Option<Mirror>,
    source: ModelSpec,
}

fn shells(spec: &LatticeSpec) -> (Vec<f64>, Vec<usize>) {
    let mut lengths: Vec<f64> = Vec::new();
    let mut shell_of = Vec::new();
    for rho in spec.stencil() {
        let r = spec.norm(rho);
        let idx = match lengths.iter().position(|&l| (l - r).abs() < 1e-9) {
            Some(i) => i,
            None => {
                lengths.push(r);
                lengths.len() - 1
            }
        };
        shell_of.push(idx);
    }
    (lengths, shell_of)
}

fn build_terms(spec: &LatticeSpec, terms: &[TermSpec]) -> Result<SitePotential> {
    let (lengths, shell_of) = shells(spec);
    let (d, m, nr) = (spec.dim(), spec.m(), spec.stencil_len());
    let mut out = Vec::new();
    for t in terms {
        match t {
            TermSpec::Springs { shells } => {
                if shells.len() != lengths.len() {
                    return Err(Error::Config(format!(
                        "springs need {} shells, got {}",
                        lengths.len(),
                        shells.len()
                    )));
                }
                let mut blocks = Vec::with_capacity(nr);
                for (r, rho) in spec.stencil().iter().enumerate() {
                    let sh = &shells[shell_of[r]];
                    let mut k = vec![0.0; m * m];
                    if sh.central {
                        if m != d {
                            return Err(Error::Config("central springs need m = d".into()));
                        }
                        let x = spec.position(rho);
                        let r2: f64 = x[..d].iter().map(|v| v * v).sum();
                        for i in 0..m {
                            for j in 0..m {
                                k[i * m + j] = sh.k * x[i] * x[j] / r2;
                            }
                        }
                    } else {
                        for i in 0..m {
                            k[i * m + i] = sh.k;
                        }
                    }
                    blocks.push(k);
                }
                out.push(SiteTerm::Springs { blocks });
            }
            TermSpec::MorseBonds { shells } => {
                if m != d {
                    return Err(Error::Config("Morse bonds need m = d".into()));
                }
                if shells.len() != lengths.len() {
                    return Err(Error::Config(format!(
                        "Morse bonds need {} shells, got {}",
                        lengths.len(),
                        shells.len()
                    )));
                }
                for sh in shells {
                    if !(sh.alpha > 0.0) || !sh.depth.is_finite() || !sh.shift.is_finite() {
                        return Err(Error::Config(format!("invalid Morse parameters {sh:?}")));
                    }
                }
                let curves = shell_of.iter().map(|&s| shells[s].clone()).collect();
                let rho = spec.stencil().iter().map(|p| spec.position(p)).collect();
                out.push(SiteTerm::Bonds { curves, rho });
            }
            TermSpec::DoubleWell { a, s, direction } => {
                if direction.len() != m {
                    return Err(Error::Config("double-well direction must have m entries".into()));
                }
                let norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::Config("double-well direction must be nonzero".into()));
                }
                out.push(SiteTerm::DoubleWell {
                    a: *a,
                    s: *s,
                    dir: direction.iter().map(|x| x / norm).collect(),
                });
            }
        }
    }
    Ok(SitePotential { nr, m, terms: out })
}

impl PotentialModel {
    pub fn new(spec: Arc<LatticeSpec>, model: &ModelSpec) -> Result<Self> {
        let d = spec.dim();
        let homogeneous = build_terms(&spec, &model.homogeneous)?;
        let mut overrides = BTreeMap::new();
        for o in &model.overrides {
            if o.site.len() != d {
                return Err(Error::Config(format!("override site {:?} must have {d} coordinates", o.site)));
            }
            let p = LatticePoint::from_slice(&o.site);
            if spec.norm(&p) >= spec.r_cut() {
                return Err(Error::Config(format!(
                    "override site {:?} must satisfy |l| < r_cut",
                    o.site
                )));
            }
            if overrides.insert(p, build_terms(&spec, &o.terms)?).is_some() {
                return Err(Error::Config(format!("duplicate override for site {:?}", o.site)));
            }
        }
        let mirror = match &model.mirror {
            None => None,
            Some(ms) => {
                let m = spec.m();
                if ms.lattice.len() != d
                    || ms.lattice.iter().any(|r| r.len() != d)
                    || ms.displacement.len() != m
                    || ms.displacement.iter().any(|r| r.len() != m)
                {
                    return Err(Error::Config("mirror matrices have the wrong shape".into()));
                }
                let mut l = [[0i64; MAX_DIM]; MAX_DIM];
                for i in 0..d {
                    for j in 0..d {
                        l[i][j] = ms.lattice[i][j];
                    }
                }
                let p = DMatrix::from_fn(m, m, |i, j| ms.displacement[i][j]);
                Some(Mirror {
                    lattice: l,
                    displacement: p,
                })
            }
        };
        let out = PotentialModel {
            spec,
            name: model.name.clone(),
            homogeneous,
            overrides,
            mirror,
            source: model.clone(),
        };
        out.validate()?;
        Ok(out)
    }

    /// Checks `V(0) = 0`, `∇V_hom(0) = 0` and point symmetry on random
    /// gradients.
    fn validate(&self) -> Result<()> {
        let n = self.spec.stencil_len() * self.spec.m();
        let zero = vec![0.0; n];
        for (what, v) in self.site_potentials() {
            let v0 = v.value(&zero);
            if v0.abs() > 1e-12 {
                return Err(Error::Config(format!("{what}: V(0) = {v0} is not zero")));
            }
        }
        let mut grad = vec![0.0; n];
        self.homogeneous.add_gradient(&zero, &mut grad);
        let gmax = grad.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        if gmax > 1e-12 {
            return Err(Error::Config(format!(
                "homogeneous potential has nonzero gradient {gmax} at 0; the perfect lattice must be an equilibrium"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        for _ in 0..20 {
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(-0.2..0.2)).collect();
            let gs = self.point_reflect(&g);
            for (what, v) in self.site_potentials() {
                let (a, b) = (v.value(&g), v.value(&gs));
                if (a - b).abs() > 1e-10 * (1.0 + a.abs()) {
                    return Err(Error::Config(format!("{what} is not point symmetric ({a} vs {b})")));
                }
            }
        }
        Ok(())
    }

    fn site_potentials(&self) -> Vec<(String, &SitePotential)> {
        let mut v = vec![("homogeneous potential".to_string(), &self.homogeneous)];
        for (p, o) in &self.overrides {
            v.push((format!("override at {p:?}"), o));
        }
        v
    }

    /// `(−g_{−ρ})_ρ`.
    pub fn point_reflect(&self, g: &[f64]) -> Vec<f64> {
        let m = self.spec.m();
        let mut out = vec![0.0; g.len()];
        for r in 0..self.spec.stencil_len() {
            let o = self.spec.opposite(r);
            for i in 0..m {
                out[r * m + i] = -g[o * m + i];
            }
        }
        out
    }

    pub fn spec(&self) -> &Arc<LatticeSpec> {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn source(&self) -> &ModelSpec {
        &self.source
    }

    pub fn homogeneous(&self) -> &SitePotential {
        &self.homogeneous
    }

    pub fn overrides(&self) -> &BTreeMap<LatticePoint, SitePotential> {
        &self.overrides
    }

    pub fn has_defect(&self) -> bool {
        !self.overrides.is_empty()
    }

    pub fn mirror(&self) -> Option<&Mirror> {
        self.mirror.as_ref()
    }

    /// `V_ℓ`.
    pub fn site_potential(&self, p: &LatticePoint) -> &SitePotential {
        self.overrides.get(p).unwrap_or(&self.homogeneous)
    }

    /// The model with all overrides removed.
    pub fn homogeneous_model(&self) -> PotentialModel {
        let mut source = self.source.clone();
        source.overrides.clear();
        PotentialModel {
            spec: self.spec.clone(),
            name: format!("{} (homogeneous)", self.name),
            homogeneous: self.homogeneous.clone(),
            overrides: BTreeMap::new(),
            mirror: self.mirror.clone(),
            source,
        }
    }

    pub fn is_harmonic(&self) -> bool {
        self.homogeneous.is_harmonic() && self.overrides.values().all(|v| v.is_harmonic())
    }

    /// `∇²V(0)` blocks `V_ρσ` (row-major `n×n`).
    pub fn reference_hessian(&self) -> Vec<f64> {
        let n = self.spec.stencil_len() * self.spec.m();
        let mut h = vec![0.0; n * n];
        self.homogeneous.add_hessian(&vec![0.0; n], &mut h);
        h
    }

    /// Coefficients `C_τ` with `ĥ(k) = Σ_τ e^{ik·τ} C_τ`.
    fn symbol_coefficients(&self) -> BTreeMap<LatticePoint, Vec<f64>> {
        let m = self.spec.m();
        let nr = self.spec.stencil_len();
        let n = nr * m;
        let h = self.reference_hessian();
        let mut c: BTreeMap<LatticePoint, Vec<f64>> = BTreeMap::new();
        let stencil = self.spec.stencil();
        let mut add = |tau: LatticePoint, sign: f64, r: usize, s: usize| {
            let e = c.entry(tau).or_insert_with(|| vec![0.0; m * m]);
            for i in 0..m {
                for j in 0..m {
                    e[i * m + j] += sign * h[(r * m + i) * n + s * m + j];
                }
            }
        };
        for r in 0..nr {
            for s in 0..nr {
                let (rho, sigma) = (stencil[r], stencil[s]);
                add(sigma - rho, 1.0, r, s);
                add(-rho, -1.0, r, s);
                add(sigma, -1.0, r, s);
                add(LatticePoint::origin(), 1.0, r, s);
            }
        }
        c
    }

    /// Sine-form coefficients `A_τ` over all nonzero `τ`, so that
    /// `ĥ(k) = 4 Σ_τ A_τ sin²(k·τ/2)`.
    pub fn sine_coefficients(&self) -> Vec<(LatticePoint, DMatrix<f64>)> {
        let m = self.spec.m();
        let c = self.symbol_coefficients();
        let mut out = Vec::new();
        for (tau, ct) in &c {
            if tau.is_origin() {
                continue;
            }
            let cm = DMatrix::from_row_slice(m, m, ct);
            let a = -(&cm + cm.transpose()) * 0.25;
            if a.amax() > 0.0 {
                out.push((*tau, a));
            }
        }
        out
    }

    /// Stability scan on the homogeneous part; see [`stability_scan`].
    pub fn stability(&self, resolution: usize) -> StabilityReport {
        stability_scan(self, resolution)
    }
}

/// `ĥ(k)` in both forms.
#[derive(Clone, Debug)]
pub struct SymbolMatrix {
    pub k: Vec<f64>,
    /// `Σ_{ρσ} (e^{−ik·ρ} − 1)(e^{ik·σ} − 1) V_ρσ`.
    pub raw: DMatrix<Complex64>,
    /// `4 Σ_τ A_τ sin²(k·τ/2)`.
    pub sine: DMatrix<f64>,
}

/// Precomputed homogeneous symbol for repeated evaluation.
#[derive(Clone, Debug)]
pub struct Symbol {
    spec: Arc<LatticeSpec>,
    terms: Vec<([f64; MAX_DIM], DMatrix<f64>)>,
}

impl Symbol {
    pub fn new(model: &PotentialModel) -> Self {
        let spec = model.spec().clone();
        let terms = model
            .sine_coefficients()
            .into_iter()
            .map(|(t, a)| (spec.position(&t), a))
            .collect();
        Symbol { spec, terms }
    }

    pub fn m(&self) -> usize {
        self.spec.m()
    }

    /// Sine form at Cartesian `k`.
    pub fn eval(&self, k: &[f64]) -> DMatrix<f64> {
        let m = self.spec.m();
        let d = self.spec.dim();
        let mut h = DMatrix::zeros(m, m);
        for (tau, a) in &self.terms {
            let x: f64 = (0..d).map(|i| k[i] * tau[i]).sum();
            let s = (0.5 * x).sin();
            h += a * (4.0 * s * s);
        }
        h
    }

    /// `lim_{t→0} ĥ(t k̂)/t² = Σ_τ A_τ (k̂·τ)²`.
    pub fn small_k_limit(&self, khat: &[f64]) -> DMatrix<f64> {
        let m = self.spec.m();
        let d = self.spec.dim();
        let mut h = DMatrix::zeros(m, m);
        for (tau, a) in &self.terms {
            let x: f64 = (0..d).map(|i| khat[i] * tau[i]).sum();
            h += a * (x * x);
        }
        h
    }
}

/// Both forms of `ĥ(k)` for the homogeneous part of `model`.
pub fn symbol_h(model: &PotentialModel, k: &[f64]) -> SymbolMatrix {
    let spec = model.spec();
    let (d, m, nr) = (spec.dim(), spec.m(), spec.stencil_len());
    let n = nr * m;
    let h = model.reference_hessian();
    let phase = |p: &LatticePoint, sign: f64| -> Complex64 {
        let x = spec.position(p);
        let t: f64 = (0..d).map(|i| k[i] * x[i]).sum();
        Complex64::from_polar(1.0, sign * t) - 1.0
    };
    let mut raw = DMatrix::<Complex64>::zeros(m, m);
    for r in 0..nr {
        let pr = phase(&spec.stencil()[r], -1.0);
        for s in 0..nr {
            let ps = phase(&spec.stencil()[s], 1.0);
            for i in 0..m {
                for j in 0..m {
                    raw[(i, j)] += pr * ps * h[(r * m + i) * n + s * m + j];
                }
            }
        }
    }
    let sine = Symbol::new(model).eval(k);
    SymbolMatrix {
        k: k.to_vec(),
        raw,
        sine,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StabilityReport {
    /// `inf` of the eigenvalues of `ĥ(k)/|k|²` over the scan.
    pub c0: f64,
    /// `sup` of the same.
    pub c1: f64,
    pub pass: bool,
    pub resolution: usize,
    /// k-point (or limiting direction) where `c0` was attained.
    pub k_min: Vec<f64>,
}

/// Scans `ĥ(k)/|k|²` on a `resolution^d` grid of the Brillouin zone
/// `π A^{-T}(−1, 1]^d` (k = 0 excluded) plus the small-k limit over a set of
/// directions.
pub fn stability_scan(model: &PotentialModel, resolution: usize) -> StabilityReport {
    let spec = model.spec();
    let d = spec.dim();
    let sym = Symbol::new(model);
    let a_inv_t = spec.a().clone().try_inverse().expect("A is nonsingular").transpose();
    let mut c0 = f64::INFINITY;
    let mut c1 = f64::NEG_INFINITY;
    let mut k_min = vec![0.0; d];
    let mut visit = |k: &[f64], h: DMatrix<f64>, scale: f64| {
        let e = SymmetricEigen::new(h).eigenvalues;
        let lo = e.min() / scale;
        let hi = e.max() / scale;
        if lo < c0 {
            c0 = lo;
            k_min = k.to_vec();
        }
        c1 = c1.max(hi);
    };
    let res = resolution.max(2);
    let total = res.pow(d as u32);
    for idx in 0..total {
        let mut rem = idx;
        let mut s = [0.0; MAX_DIM];
        for si in s.iter_mut().take(d) {
            let j = rem % res;
            rem /= res;
            *si = -1.0 + 2.0 * (j as f64 + 1.0) / res as f64;
        }
        let mut k = vec![0.0; d];
        for i in 0..d {
            k[i] = std::f64::consts::PI * (0..d).map(|j| a_inv_t[(i, j)] * s[j]).sum::<f64>();
        }
        let k2: f64 = k.iter().map(|x| x * x).sum();
        if k2 < 1e-24 {
            continue;
        }
        visit(&k, sym.eval(&k), k2);
    }
    for dir in unit_directions(d, 64) {
        visit(&dir, sym.small_k_limit(&dir), 1.0);
    }
    StabilityReport {
        c0,
        c1,
        pass: c0 > 0.0,
        resolution: res,
        k_min,
    }
}

fn unit_directions(d: usize, count: usize) -> Vec<Vec<f64>> {
    match d {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..count)
            .map(|i| {
                let t = std::f64::consts::PI * i as f64 / count as f64;
                vec![t.cos(), t.sin()]
            })
            .collect(),
        _ => {
            // Fibonacci sphere
            let n = count * 4;
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            (0..n)
                .map(|i| {
                    let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                    let r = (1.0 - y * y).sqrt();
                    let t = golden * i as f64;
                    vec![r * t.cos(), y, r * t.sin()]
                })
                .collect()
        }
    }
}

// ---------------------------------------------------------------------------
// Shipped models

/// Square lattice, `m = 2`, nearest and next-nearest neighbour interactions.
pub fn square_lattice() -> Arc<LatticeSpec> {
    Arc::new(LatticeSpec::cubic(2, 2, 1.5).expect("square lattice"))
}

fn morse_shells(shift: f64) -> Vec<MorseShell> {
    vec![
        MorseShell {
            depth: 1.0,
            alpha: 1.2,
            shift,
        },
        MorseShell {
            depth: 0.5,
            alpha: 1.2,
            shift,
        },
    ]
}

/// Morse bond crystal on the square lattice with a substitutional defect at
/// the origin. The defect has a bond misfit and a double well in its
/// displacement relative to its neighbours, so it has two mirror-image
/// minima separated by a symmetric index-1 saddle.
pub fn anharmonic_double_well_spec() -> ModelSpec {
    ModelSpec {
        name: "square-morse-double-well".into(),
        homogeneous: vec![TermSpec::MorseBonds {
            shells: morse_shells(0.0),
        }],
        overrides: vec![OverrideSpec {
            site: vec![0, 0],
            terms: vec![
                TermSpec::MorseBonds {
                    shells: morse_shells(0.15),
                },
                TermSpec::DoubleWell {
                    a: 14.0,
                    s: 0.5,
                    direction: vec![1.0, 0.0],
                },
            ],
        }],
        mirror: Some(MirrorSpec {
            lattice: vec![vec![-1, 0], vec![0, 1]],
            displacement: vec![vec![-1.0, 0.0], vec![0.0, 1.0]],
        }),
    }
}

/// Morse crystal with only the misfit substitution (single minimum).
pub fn anharmonic_misfit_spec() -> ModelSpec {
    let mut s = anharmonic_double_well_spec();
    s.name = "square-morse-misfit".into();
    s.overrides[0].terms.truncate(1);
    s
}

/// Harmonic springs with a stiffer substitutional site.
pub fn harmonic_defect_spec(k_nn: f64, k_nnn: f64, defect_factor: f64) -> ModelSpec {
    let shells = |f: f64| {
        vec![
            SpringShell {
                k: k_nn * f,
                central: false,
            },
            SpringShell {
                k: k_nnn * f,
                central: false,
            },
        ]
    };
    ModelSpec {
        name: "square-springs".into(),
        homogeneous: vec![TermSpec::Springs { shells: shells(1.0) }],
        overrides: if defect_factor == 1.0 {
            vec![]
        } else {
            vec![OverrideSpec {
                site: vec![0, 0],
                terms: vec![TermSpec::Springs {
                    shells: shells(defect_factor),
                }],
            }]
        },
        mirror: None,
    }
}

/// Unit nearest-neighbour springs on `Z^d` with `m` components.
pub fn unit_springs(d: usize, m: usize) -> Result<PotentialModel> {
    let spec = Arc::new(LatticeSpec::cubic(d, m, 1.01)?);
    PotentialModel::new(
        spec,
        &ModelSpec {
            name: format!("unit-springs-{d}d"),
            homogeneous: vec![TermSpec::Springs {
                shells: vec![SpringShell { k: 1.0, central: false }],
            }],
            overrides: vec![],
            mirror: None,
        },
    )
}

pub fn anharmonic_double_well() -> PotentialModel {
    PotentialModel::new(square_lattice(), &anharmonic_double_well_spec()).expect("shipped model")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> Vec<PotentialModel> {
        let sq = square_lattice();
        vec![
            anharmonic_double_well(),
            PotentialModel::new(sq.clone(), &anharmonic_misfit_spec()).unwrap(),
            PotentialModel::new(sq.clone(), &harmonic_defect_spec(1.0, 0.5, 1.7)).unwrap(),
            PotentialModel::new(
                sq,
                &ModelSpec {
                    name: "central".into(),
                    homogeneous: vec![TermSpec::Springs {
                        shells: vec![
                            SpringShell { k: 1.0, central: true },
                            SpringShell { k: 0.5, central: true },
                        ],
                    }],
                    overrides: vec![],
                    mirror: None,
                },
            )
            .unwrap(),
        ]
    }

    fn rand_g(n: usize, seed: u64, scale: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-scale..scale)).collect()
    }

    #[test]
    fn zero_value_and_gradient() {
        let m = unit_springs(2, 2).unwrap();
        let g = StencilGradient::zeros(4, 2);
        let e = m.homogeneous().evaluate(&g, 1).unwrap();
        assert_eq!(e.value, 0.0);
        assert!(e.gradient.unwrap().iter().all(|&x| x == 0.0));
        assert!(m.homogeneous().evaluate(&g, 5).is_err());
    }

    #[test]
    fn derivative_ladder_against_finite_differences() {
        let h = 1e-5;
        for model in corpus() {
            let mut pots = vec![model.homogeneous().clone()];
            pots.extend(model.overrides().values().cloned());
            for (pi, v) in pots.iter().enumerate() {
                let n = v.n();
                let g = rand_g(n, 11 + pi as u64, 0.15);
                let dir = rand_g(n, 99, 1.0);
                let gp: Vec<f64> = g.iter().zip(&dir).map(|(a, b)| a + h * b).collect();
                let gm: Vec<f64> = g.iter().zip(&dir).map(|(a, b)| a - h * b).collect();
                let sg = |x: &Vec<f64>| StencilGradient { m: v.m, entries: x.clone() };
                let e0 = v.evaluate(&sg(&g), 4).unwrap();
                let ep = v.evaluate(&sg(&gp), 4).unwrap();
                let em = v.evaluate(&sg(&gm), 4).unwrap();
                let rel = |fd: &[f64], an: Vec<f64>| {
                    let scale = an.iter().fold(1e-8f64, |a, b| a.max(b.abs()));
                    fd.iter().zip(&an).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale
                };
                // order 0 -> 1
                let fd = [(ep.value - em.value) / (2.0 * h)];
                let an: f64 = e0.gradient.as_ref().unwrap().iter().zip(&dir).map(|(a, b)| a * b).sum();
                assert!(rel(&fd, vec![an]) < 1e-6, "{}: grad", model.name());
                let pairs = [
                    (&ep.gradient, &em.gradient, &e0.hessian),
                    (&ep.hessian, &em.hessian, &e0.third),
                    (&ep.third, &em.third, &e0.fourth),
                ];
                for (order, (p, q, t)) in pairs.into_iter().enumerate() {
                    let (p, q, t) = (p.as_ref().unwrap(), q.as_ref().unwrap(), t.as_ref().unwrap());
                    let fd: Vec<f64> = p.iter().zip(q).map(|(x, y)| (x - y) / (2.0 * h)).collect();
                    let an: Vec<f64> = (0..fd.len()).map(|i| (0..n).map(|k| t[i * n + k] * dir[k]).sum()).collect();
                    assert!(rel(&fd, an) < 1e-5, "{}: order {}", model.name(), order + 2);
                }
            }
        }
    }

    #[test]
    fn hessian_symmetry() {
        for model in corpus() {
            let v = model.site_potential(&LatticePoint::origin());
            let n = v.n();
            let g = rand_g(n, 5, 0.1);
            let e = v.evaluate(&StencilGradient { m: v.m, entries: g }, 2).unwrap();
            let h = e.hessian.unwrap();
            for t in 0..10 {
                let a = rand_g(n, 100 + t, 1.0);
                let b = rand_g(n, 200 + t, 1.0);
                let hab: f64 = (0..n).map(|i| (0..n).map(|j| a[i] * h[i * n + j] * b[j]).sum::<f64>()).sum();
                let hba: f64 = (0..n).map(|i| (0..n).map(|j| b[i] * h[i * n + j] * a[j]).sum::<f64>()).sum();
                assert!((hab - hba).abs() < 1e-12 * (1.0 + hab.abs()));
            }
        }
    }

    #[test]
    fn point_symmetry_random() {
        for model in corpus() {
            for (_, v) in model.site_potentials() {
                let n = v.n();
                for t in 0..100 {
                    let g = rand_g(n, 300 + t, 0.2);
                    let gs = model.point_reflect(&g);
                    assert!((v.value(&g) - v.value(&gs)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn chain_symbol() {
        let m = unit_springs(1, 1).unwrap();
        for k in [0.3, 1.0, 2.5, -1.7] {
            let s = symbol_h(&m, &[k]);
            let e = 4.0 * (k / 2.0_f64).sin().powi(2);
            assert!((s.sine[(0, 0)] - e).abs() < 1e-13);
            assert!((s.raw[(0, 0)].re - e).abs() < 1e-13 && s.raw[(0, 0)].im.abs() < 1e-13);
        }
        let z = symbol_h(&m, &[0.0]);
        assert_eq!(z.sine[(0, 0)], 0.0);
    }

    #[test]
    fn raw_and_sine_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for model in corpus() {
            for _ in 0..10 {
                let k = [rng.random_range(-3.1..3.1), rng.random_range(-3.1..3.1)];
                let s = symbol_h(&model, &k);
                for i in 0..2 {
                    for j in 0..2 {
                        assert!((s.raw[(i, j)].re - s.sine[(i, j)]).abs() < 1e-12);
                        assert!(s.raw[(i, j)].im.abs() < 1e-12);
                    }
                }
                let mk = symbol_h(&model, &[-k[0], -k[1]]);
                assert!((mk.raw.clone() - s.raw.conjugate()).camax() < 1e-12);
            }
        }
    }

    #[test]
    fn chain_stability_constants() {
        let m = unit_springs(1, 1).unwrap();
        let r = stability_scan(&m, 256);
        assert!(r.pass);
        // 4 sin²(k/2)/k² ranges over [4/π², 1]
        assert!((r.c1 - 1.0).abs() < 1e-12);
        assert!((r.c0 - 4.0 / std::f64::consts::PI.powi(2)).abs() < 1e-9);
    }

    #[test]
    fn square_models_stable_and_negative_springs_fail() {
        for model in corpus() {
            let r = model.stability(64);
            assert!(r.pass && r.c0 > 0.0, "{}", model.name());
        }
        let bad = PotentialModel::new(square_lattice(), &harmonic_defect_spec(-1.0, 0.2, 1.0)).unwrap();
        assert!(!bad.stability(64).pass);
    }

    #[test]
    fn invalid_models_rejected() {
        let sq = square_lattice();
        let mut s = anharmonic_misfit_spec();
        s.homogeneous = vec![TermSpec::MorseBonds {
            shells: morse_shells(0.1),
        }];
        assert!(PotentialModel::new(sq.clone(), &s).is_err());
        let mut s = anharmonic_misfit_spec();
        s.overrides[0].site = vec![2, 0];
        assert!(PotentialModel::new(sq, &s).is_err());
    }
}
