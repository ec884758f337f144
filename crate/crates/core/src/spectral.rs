//! The kernels `F = (H^hom)^{-1/2}` (infinite lattice, via quadrature) and
//! `F_N` (periodic, k = 0 removed), conjugated Hessians `F_N H F_N`, the
//! projector `π_N`, log-determinants and logarithms restricted to the
//! positive spectrum, and iterative extreme eigenpairs.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assembly::{Annotation, LinearLatticeOperator};
use crate::error::{Error, Result};
use crate::lattice::{build_supercell, LatticePoint, Supercell};
use crate::linalg;
use crate::potentials::{PotentialModel, Symbol};

// ---------------------------------------------------------------------------
// Symbols and kernel tables

/// `F̂(k) = ĥ(k)^{-1/2}`.
pub fn symbol_f(symbol: &Symbol, k: &[f64]) -> Result<DMatrix<f64>> {
    let h = symbol.eval(k);
    let scale = h.amax().max(f64::MIN_POSITIVE);
    let e = SymmetricEigen::new(h);
    if e.eigenvalues.iter().any(|&x| x <= 1e-14 * scale) {
        return Err(Error::Instability(format!(
            "ĥ(k) is not positive definite at k = {k:?} (eigenvalues {:?})",
            e.eigenvalues.as_slice()
        )));
    }
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|x| 1.0 / x.sqrt()));
    Ok(&e.eigenvectors * d * e.eigenvectors.transpose())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelSource {
    /// Brillouin-zone quadrature at level `M_quad`.
    Infinite { m_quad: usize },
    Periodic { n: usize },
}

/// `F_N(ℓ)` for every `ℓ ∈ Λ_N` plus the symbol values on `B_N`.
#[derive(Clone, Debug)]
pub struct KernelTable {
    source: KernelSource,
    cell: Arc<Supercell>,
    m: usize,
    /// Site-major, `m×m` row-major per site.
    values: Vec<f64>,
    /// `F̂(k)` per k-point (zero at k = 0), `m×m` row-major.
    symbol: Vec<f64>,
}

fn build_table(model: &PotentialModel, cell: Arc<Supercell>, source: KernelSource) -> Result<KernelTable> {
    let sym = Symbol::new(model);
    let m = model.spec().m();
    let d = model.spec().dim();
    let grid = cell.dual();
    let mut symbol = vec![0.0; grid.len() * m * m];
    for (ki, k) in grid.k_points().iter().enumerate() {
        if ki == grid.zero_index() {
            continue;
        }
        let f = symbol_f(&sym, &k[..d])?;
        for i in 0..m {
            for j in 0..m {
                symbol[ki * m * m + i * m + j] = f[(i, j)];
            }
        }
    }
    let c: Vec<Complex64> = symbol.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    let values = grid.idft(&c, m * m)?.into_iter().map(|z| z.re).collect();
    Ok(KernelTable {
        source,
        cell,
        m,
        values,
        symbol,
    })
}

/// Periodic kernel `F_N(ℓ) = |B_N|⁻¹ Σ_{k≠0} e^{−ik·ℓ} F̂(k)`.
pub fn kernel_fn(model: &PotentialModel, cell: &Arc<Supercell>) -> Result<KernelTable> {
    build_table(model, cell.clone(), KernelSource::Periodic { n: cell.n() })
}

/// Infinite-lattice kernel realised at quadrature level `m_quad`; valid for
/// offsets with `|ℓ| <= m_quad / 4`.
pub fn kernel_f(model: &PotentialModel, m_quad: usize, max_offset: f64) -> Result<KernelTable> {
    if (m_quad as f64) < 4.0 * max_offset {
        return Err(Error::Precondition(format!(
            "quadrature level {m_quad} is below 4 × the largest offset {max_offset}"
        )));
    }
    let cell = build_supercell(model.spec().clone(), m_quad)?;
    build_table(model, cell, KernelSource::Infinite { m_quad })
}

impl KernelTable {
    pub fn source(&self) -> KernelSource {
        self.source
    }

    pub fn cell(&self) -> &Arc<Supercell> {
        &self.cell
    }

    /// `F(ℓ)`; offsets wrap periodically.
    pub fn value(&self, l: &LatticePoint) -> DMatrix<f64> {
        self.value_site(self.cell.index_of(l))
    }

    pub fn value_site(&self, s: usize) -> DMatrix<f64> {
        let mm = self.m * self.m;
        DMatrix::from_row_slice(self.m, self.m, &self.values[s * mm..(s + 1) * mm])
    }

    /// `D_ρ F(ℓ) = F(ℓ+ρ) − F(ℓ)` for stencil index `r`.
    pub fn d(&self, l: &LatticePoint, r: usize) -> DMatrix<f64> {
        let rho = self.cell.spec().stencil()[r];
        self.value(&(*l + rho)) - self.value(l)
    }

    /// `D_σ D_ρ F(ℓ)`.
    pub fn d2(&self, l: &LatticePoint, r: usize, t: usize) -> DMatrix<f64> {
        let sigma = self.cell.spec().stencil()[t];
        self.d(&(*l + sigma), r) - self.d(l, r)
    }

    /// `max_ρ |D_ρF(ℓ)|` (Frobenius norm per block).
    pub fn d_norm(&self, l: &LatticePoint) -> f64 {
        (0..self.cell.spec().stencil_len()).map(|r| self.d(l, r).norm()).fold(0.0, f64::max)
    }

    pub fn d2_norm(&self, l: &LatticePoint) -> f64 {
        let nr = self.cell.spec().stencil_len();
        let mut best: f64 = 0.0;
        for r in 0..nr {
            for t in 0..nr {
                best = best.max(self.d2(l, r, t).norm());
            }
        }
        best
    }

    /// `Σ_{ℓ∈Λ_N} F(ℓ)`.
    pub fn sum(&self) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.m, self.m);
        for i in 0..self.cell.len() {
            s += self.value_site(i);
        }
        s
    }

    /// `(F v)(ℓ) = Σ_n F(ℓ − n) v(n)`, evaluated in Fourier space.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let m = self.m;
        let grid = self.cell.dual();
        let vh = grid.dft_real(v, m)?;
        let mut out = vec![Complex64::new(0.0, 0.0); vh.len()];
        for k in 0..grid.len() {
            let f = &self.symbol[k * m * m..(k + 1) * m * m];
            for i in 0..m {
                let mut acc = Complex64::new(0.0, 0.0);
                for j in 0..m {
                    acc += f[i * m + j] * vh[k * m + j];
                }
                out[k * m + i] = acc;
            }
        }
        Ok(grid.idft(&out, m)?.into_iter().map(|z| z.re).collect())
    }

    /// Dense `F_N` with blocks `F_N(ℓ − n)`.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let m = self.m;
        let n = self.cell.len();
        let mut a = DMatrix::zeros(n * m, n * m);
        for r in 0..n {
            for c in 0..n {
                let b = self.value(&(self.cell.site(r) - self.cell.site(c)));
                a.view_mut((r * m, c * m), (m, m)).copy_from(&b);
            }
        }
        a
    }

    pub fn to_operator(&self) -> Result<LinearLatticeOperator> {
        LinearLatticeOperator::from_dense(self.cell.clone(), self.to_dense(), Annotation::KernelFN)
    }

    /// CSV rows `l1..ld, F_ij...`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let d = self.cell.spec().dim();
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (1..=d).map(|i| format!("l{i}")).collect();
        for i in 0..self.m {
            for j in 0..self.m {
                header.push(format!("F{}{}", i + 1, j + 1));
            }
        }
        wr.write_record(&header)?;
        let mm = self.m * self.m;
        for s in 0..self.cell.len() {
            let p = self.cell.site(s);
            let mut rec: Vec<String> = p.coords(d).iter().map(|x| x.to_string()).collect();
            rec.extend(self.values[s * mm..(s + 1) * mm].iter().map(|x| format!("{x:e}")));
            wr.write_record(&rec)?;
        }
        wr.flush().map_err(|e| Error::io("<kernel csv>", e))?;
        Ok(())
    }
}

/// Orthogonal projector onto constant fields.
pub fn projector(cell: &Arc<Supercell>) -> Result<LinearLatticeOperator> {
    let m = cell.spec().m();
    let n = cell.dofs();
    let w = 1.0 / cell.len() as f64;
    let a = DMatrix::from_fn(n, n, |i, j| if i % m == j % m { w } else { 0.0 });
    LinearLatticeOperator::from_dense(cell.clone(), a, Annotation::Projector)
}

/// Adds `π_N` to a dense matrix in place.
pub fn add_projector(a: &mut DMatrix<f64>, m: usize) {
    let n = a.nrows();
    let w = m as f64 / n as f64;
    for j in 0..n {
        for i in (j % m..n).step_by(m) {
            a[(i, j)] += w;
        }
    }
}

/// Removes the mean of each component.
pub fn project_out_constants(v: &mut [f64], m: usize) {
    let sites = v.len() / m;
    for i in 0..m {
        let mean: f64 = (0..sites).map(|s| v[s * m + i]).sum::<f64>() / sites as f64;
        for s in 0..sites {
            v[s * m + i] -= mean;
        }
    }
}

/// Dense `F_N H F_N`, built column by column through the FFT.
pub fn conjugate_operator(f: &KernelTable, h: &LinearLatticeOperator) -> Result<LinearLatticeOperator> {
    let n = h.dim();
    if f.cell.dofs() != n || f.cell.n() != h.cell().n() {
        return Err(Error::SizeMismatch {
            what: "kernel and operator supercells",
            expected: f.cell.dofs(),
            actual: n,
        });
    }
    let mut hf = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = h.apply(&f.apply(&e)?)?;
        hf.column_mut(j).copy_from_slice(&col);
        e[j] = 0.0;
    }
    let mut out = DMatrix::zeros(n, n);
    for j in 0..n {
        let col = f.apply(hf.column(j).as_slice())?;
        out.column_mut(j).copy_from_slice(&col);
    }
    let sym = (&out + out.transpose()) * 0.5;
    LinearLatticeOperator::from_dense(h.cell().clone(), sym, Annotation::Composite)
}

// ---------------------------------------------------------------------------
// Mode classification

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeLabel {
    TranslationZero,
    UnstableNegative,
    Positive,
}

/// Thresholds for sorting eigenvalues into zero, negative and positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeRules {
    /// `τ_zero = zero_rel · ‖A‖₂`.
    pub zero_rel: f64,
    /// Eigenvalues with `τ_zero < |λ| <= dead_factor · τ_zero` are ambiguous.
    pub dead_factor: f64,
    /// Required number of zero modes, if known.
    pub expected_zero: Option<usize>,
}

impl ModeRules {
    pub fn new(expected_zero: Option<usize>) -> Self {
        ModeRules {
            zero_rel: 1e-8,
            dead_factor: 1e3,
            expected_zero,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ModeClassification {
    #[serde(skip)]
    pub eigenvalues: Vec<f64>,
    #[serde(skip)]
    pub labels: Vec<ModeLabel>,
    pub tau_zero: f64,
    pub tau_dead: f64,
    pub zero: usize,
    pub negative: usize,
    pub positive: usize,
    /// Smallest and largest positive eigenvalue.
    pub positive_range: (f64, f64),
}

impl ModeClassification {
    /// Audit line for logs.
    pub fn summary(&self) -> String {
        format!(
            "zero {} negative {} positive {} tau_zero {:.3e} positive range [{:.6e}, {:.6e}]",
            self.zero, self.negative, self.positive, self.tau_zero, self.positive_range.0, self.positive_range.1
        )
    }
}

/// Classifies ascending eigenvalues; fails on dead-zone values or a wrong
/// zero-mode count.
pub fn classify(eigenvalues: &[f64], rules: &ModeRules) -> Result<ModeClassification> {
    let norm = eigenvalues.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let tau_zero = rules.zero_rel * norm;
    let tau_dead = rules.dead_factor * tau_zero;
    let mut labels = Vec::with_capacity(eigenvalues.len());
    let (mut zero, mut negative, mut positive) = (0, 0, 0);
    let mut range = (f64::INFINITY, f64::NEG_INFINITY);
    for &x in eigenvalues {
        let a = x.abs();
        if a <= tau_zero {
            labels.push(ModeLabel::TranslationZero);
            zero += 1;
        } else if a <= tau_dead {
            return Err(Error::AmbiguousSpectrum(format!(
                "eigenvalue {x:e} lies in the dead zone ({tau_zero:e}, {tau_dead:e}]"
            )));
        } else if x < 0.0 {
            labels.push(ModeLabel::UnstableNegative);
            negative += 1;
        } else {
            labels.push(ModeLabel::Positive);
            positive += 1;
            range = (range.0.min(x), range.1.max(x));
        }
    }
    if let Some(z) = rules.expected_zero {
        if z != zero {
            return Err(Error::AmbiguousSpectrum(format!(
                "expected {z} zero modes, found {zero} (tau_zero {tau_zero:e})"
            )));
        }
    }
    Ok(ModeClassification {
        eigenvalues: eigenvalues.to_vec(),
        labels,
        tau_zero,
        tau_dead,
        zero,
        negative,
        positive,
        positive_range: range,
    })
}

#[derive(Clone, Debug)]
pub struct SpectralDecomposition {
    pub eigenvalues: Vec<f64>,
    pub vectors: DMatrix<f64>,
    pub classification: ModeClassification,
}

pub fn decompose(a: &DMatrix<f64>, rules: &ModeRules) -> Result<SpectralDecomposition> {
    let (w, v) = linalg::sym_eigh(a)?;
    let classification = classify(&w, rules)?;
    Ok(SpectralDecomposition {
        eigenvalues: w,
        vectors: v,
        classification,
    })
}

// ---------------------------------------------------------------------------
// log det⁺ and log⁺

/// `Σ log λ` over the positive eigenvalues of a symmetric matrix.
pub fn logdet_plus(a: &DMatrix<f64>, rules: &ModeRules) -> Result<(f64, ModeClassification)> {
    let w = linalg::sym_eigvals(a)?;
    let c = classify(&w, rules)?;
    let v = w
        .iter()
        .zip(&c.labels)
        .filter(|(_, l)| **l == ModeLabel::Positive)
        .map(|(x, _)| x.ln())
        .sum();
    Ok((v, c))
}

/// `log det⁺ H` for a translation-invariant `H` with exactly `m` zero modes
/// through one factorisation of `H + π_N`. With a negative mode its
/// eigenvalue `lambda_bar` (from an iterative solver) is divided out.
pub fn logdet_plus_factored(h: &LinearLatticeOperator, lambda_bar: Option<f64>) -> Result<(f64, linalg::Inertia)> {
    let m = h.cell().spec().m();
    let mut a = h.to_dense();
    add_projector(&mut a, m);
    if lambda_bar.is_none() {
        if let Some(v) = linalg::cholesky_logdet(&a)? {
            let inertia = linalg::Inertia {
                negative: 0,
                zero: 0,
                positive: a.nrows(),
                log_abs_det: v,
            };
            return Ok((v, inertia));
        }
    }
    let inertia = linalg::ldlt_inertia(&a)?;
    match (inertia.negative, lambda_bar) {
        (0, None) => Ok((inertia.log_abs_det, inertia)),
        (1, Some(l)) if l < 0.0 => Ok((inertia.log_abs_det - l.abs().ln(), inertia)),
        (neg, l) => Err(Error::Certification {
            reason: format!("factorised log det⁺ expects {} negative modes (λ̄ = {l:?})", l.is_some() as usize),
            negative: neg,
            zero: inertia.zero,
        }),
    }
}

/// `log det⁺ H_N^hom = Σ_{k≠0} log det ĥ(k)`.
pub fn logdet_plus_hom(model: &PotentialModel, cell: &Supercell) -> Result<f64> {
    let sym = Symbol::new(model);
    let d = model.spec().dim();
    let grid = cell.dual();
    let mut acc = 0.0;
    for (ki, k) in grid.k_points().iter().enumerate() {
        if ki == grid.zero_index() {
            continue;
        }
        let h = sym.eval(&k[..d]);
        let e = SymmetricEigen::new(h).eigenvalues;
        if e.iter().any(|&x| x <= 0.0) {
            return Err(Error::Instability(format!("ĥ(k) not positive definite at k = {:?}", &k[..d])));
        }
        acc += e.iter().map(|x| x.ln()).sum::<f64>();
    }
    Ok(acc)
}

/// `log⁺ A = Σ_{λ>τ} log λ · v vᵀ`.
pub fn matrix_log_plus(a: &DMatrix<f64>, rules: &ModeRules) -> Result<(DMatrix<f64>, ModeClassification)> {
    let dec = decompose(a, rules)?;
    Ok((log_plus_from(&dec), dec.classification))
}

/// Reassembles `log⁺` from a decomposition.
pub fn log_plus_from(dec: &SpectralDecomposition) -> DMatrix<f64> {
    let v = &dec.vectors;
    let mut scaled = v.clone();
    for (j, (x, l)) in dec.eigenvalues.iter().zip(&dec.classification.labels).enumerate() {
        let f = if *l == ModeLabel::Positive { x.ln() } else { 0.0 };
        scaled.column_mut(j).scale_mut(f);
    }
    scaled * v.transpose()
}

/// Traces of the diagonal `m×m` blocks of `log⁺ A`, without forming it.
pub fn log_plus_block_traces(dec: &SpectralDecomposition, m: usize) -> Vec<f64> {
    let n = dec.vectors.nrows();
    let mut out = vec![0.0; n / m];
    for (j, (x, l)) in dec.eigenvalues.iter().zip(&dec.classification.labels).enumerate() {
        if *l != ModeLabel::Positive {
            continue;
        }
        let f = x.ln();
        let col = dec.vectors.column(j);
        for (i, c) in col.iter().enumerate() {
            out[i / m] += f * c * c;
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct ContourLog {
    pub matrix: DMatrix<f64>,
    pub nodes: usize,
    /// Max entry change between the last two node counts.
    pub stability: f64,
}

/// `log⁺ A` as `(2πi)⁻¹ ∮ log z (z − A)⁻¹ dz` on the circle through
/// `lo/2` and `2·hi`; `[lo, hi]` must contain the positive spectrum and
/// `lo > 0`. Trapezoidal nodes are doubled from 64 until successive results
/// differ by less than `tol`.
pub fn matrix_log_plus_contour(a: &DMatrix<f64>, lo: f64, hi: f64, tol: f64) -> Result<ContourLog> {
    if !(lo > 0.0 && hi >= lo) {
        return Err(Error::Precondition(format!("contour needs 0 < lo <= hi, got [{lo}, {hi}]")));
    }
    let n = a.nrows();
    let (left, right) = (0.5 * lo, 2.0 * hi);
    let c = 0.5 * (left + right);
    let r = 0.5 * (right - left);
    // Nodes at angles 2πj/q for j = 0..=q/2; conjugate pairs give 2 Re of the
    // upper half, and the two real nodes count once. Doubling q keeps every
    // old node, so only the odd ones are new.
    let node = |q: usize, j: usize| -> Result<DMatrix<f64>> {
        let theta = j as f64 * std::f64::consts::TAU / q as f64;
        let z = Complex64::new(c + r * theta.cos(), r * theta.sin());
        let mut za: Vec<Complex64> = a.iter().map(|&x| Complex64::new(-x, 0.0)).collect();
        for i in 0..n {
            za[i * n + i] += z;
        }
        let mut rhs = vec![Complex64::new(0.0, 0.0); n * n];
        for i in 0..n {
            rhs[i * n + i] = Complex64::new(1.0, 0.0);
        }
        linalg::complex_solve(&mut za, n, &mut rhs, n)?;
        let w = z.ln() * (z - c);
        Ok(DMatrix::from_iterator(n, n, rhs.iter().map(|x| (w * x).re)))
    };
    let mut q = 64;
    let mut sum = node(q, 0)? + node(q, q / 2)?;
    for j in 1..q / 2 {
        sum += node(q, j)? * 2.0;
    }
    let mut prev = &sum / q as f64;
    loop {
        let q2 = 2 * q;
        for j in (1..q2 / 2).step_by(2) {
            sum += node(q2, j)? * 2.0;
        }
        let next = &sum / q2 as f64;
        let diff = (&next - &prev).amax();
        if diff < tol || q2 >= 8192 {
            if diff >= tol {
                return Err(Error::Convergence(format!("contour quadrature unstable at {q2} nodes ({diff:e})")));
            }
            return Ok(ContourLog {
                matrix: next,
                nodes: q2,
                stability: diff,
            });
        }
        prev = next;
        q = q2;
    }
}

// ---------------------------------------------------------------------------
// Iterative extreme eigenpairs

#[derive(Clone, Debug)]
pub struct Eigenpair {
    pub value: f64,
    pub vector: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum End {
    Lowest,
    Highest,
}

/// Lanczos with full reorthogonalisation on the zero-mean subspace of
/// fields with `m` components per site. Returns `count` extreme Ritz pairs
/// with residual `‖Av − θv‖ <= tol · ‖T‖`.
pub fn lanczos<F>(apply: F, dim: usize, m: usize, count: usize, end: End, tol: f64, seed: u64) -> Result<Vec<Eigenpair>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let sub = dim - m;
    if count == 0 || count > sub {
        return Err(Error::Precondition(format!("cannot extract {count} eigenpairs from dimension {sub}")));
    }
    let max_iter = sub.min(3000);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    project_out_constants(&mut q, m);
    normalise(&mut q);
    // Constants would sit at an extreme end of the spectrum and creep back in
    // through roundoff; map them to an interior value (the Rayleigh quotient
    // of the start vector) instead.
    let shift = {
        let mut aq = apply(&q)?;
        project_out_constants(&mut aq, m);
        dot(&aq, &q)
    };
    let apply = |v: &[f64]| -> Result<Vec<f64>> {
        let mut pv = v.to_vec();
        project_out_constants(&mut pv, m);
        let mut out = apply(&pv)?;
        project_out_constants(&mut out, m);
        for ((o, a), b) in out.iter_mut().zip(v).zip(&pv) {
            *o += shift * (a - b);
        }
        Ok(out)
    };
    let mut basis: Vec<Vec<f64>> = vec![q];
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut next_check = 20.min(max_iter);
    loop {
        let j = basis.len() - 1;
        let mut w = apply(&basis[j])?;
        let a = dot(&w, &basis[j]);
        alpha.push(a);
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&w, b);
                axpy(-c, b, &mut w);
            }
        }
        let bnorm = dot(&w, &w).sqrt();
        let k = alpha.len();
        let tnorm = alpha.iter().chain(beta.iter()).fold(0.0f64, |s, x| s.max(x.abs())).max(bnorm);
        let exhausted = k >= max_iter || bnorm <= 1e-13 * tnorm.max(1e-300);
        if k >= next_check.min(max_iter) || exhausted {
            let t = DMatrix::from_fn(k, k, |r, c| {
                if r == c {
                    alpha[r]
                } else if r + 1 == c || c + 1 == r {
                    beta[r.min(c)]
                } else {
                    0.0
                }
            });
            let e = SymmetricEigen::new(t);
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&x, &y| e.eigenvalues[x].total_cmp(&e.eigenvalues[y]));
            if end == End::Highest {
                order.reverse();
            }
            let want = count.min(k);
            let est_ok = order[..want].iter().all(|&i| (bnorm * e.eigenvectors[(k - 1, i)]).abs() <= tol * tnorm);
            if want == count && (est_ok || exhausted) {
                let mut pairs = Vec::with_capacity(count);
                let mut all_ok = true;
                for &i in &order[..count] {
                    let theta = e.eigenvalues[i];
                    let mut v = vec![0.0; dim];
                    for (c, b) in basis.iter().enumerate() {
                        axpy(e.eigenvectors[(c, i)], b, &mut v);
                    }
                    normalise(&mut v);
                    project_out_constants(&mut v, m);
                    normalise(&mut v);
                    let mut av = apply(&v)?;
                    axpy(-theta, &v, &mut av);
                    let res = dot(&av, &av).sqrt();
                    all_ok &= res <= tol * tnorm;
                    pairs.push(Eigenpair {
                        value: theta,
                        vector: v,
                        residual: res,
                        iterations: k,
                    });
                }
                if all_ok || exhausted {
                    if !all_ok {
                        let worst = pairs.iter().map(|p| p.residual).fold(0.0, f64::max);
                        return Err(Error::Convergence(format!(
                            "Lanczos stopped after {k} steps with residual {worst:e}"
                        )));
                    }
                    return Ok(pairs);
                }
            }
            next_check = (k + k / 2).max(k + 10);
        }
        beta.push(bnorm);
        w.iter_mut().for_each(|x| *x /= bnorm);
        basis.push(w);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (t, v) in y.iter_mut().zip(x) {
        *t += a * v;
    }
}

fn normalise(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// Tolerance used for the iterative eigenpairs.
pub const EIGEN_TOL: f64 = 1e-10;

/// `(λ̄, φ̄)`: the lowest eigenpair of `H` on the zero-mean subspace.
pub fn smallest_eigenpair(h: &LinearLatticeOperator) -> Result<Eigenpair> {
    let m = h.cell().spec().m();
    let mut p = lanczos(|v| h.apply(v), h.dim(), m, 1, End::Lowest, EIGEN_TOL, 17)?;
    Ok(p.remove(0))
}

/// `(μ̄, ψ̄)`: lowest generalised eigenpair of `H ψ = μ H^hom ψ` with
/// `⟨H^hom ψ, ψ⟩ = 1`, computed as `ψ = F_N φ` for the lowest eigenpair of
/// `F_N H F_N`.
pub fn generalized_eigen(h: &LinearLatticeOperator, f: &KernelTable) -> Result<Eigenpair> {
    let m = h.cell().spec().m();
    let mut p = lanczos(|v| f.apply(&h.apply(&f.apply(v)?)?), h.dim(), m, 1, End::Lowest, EIGEN_TOL, 23)?;
    let mut e = p.remove(0);
    e.vector = f.apply(&e.vector)?;
    Ok(e)
}

/// Extreme eigenvalues of `F_N H F_N + π_N`, i.e. `[σ̲, σ̄]` over its
/// positive spectrum. `skip` lowest modes are ignored (1 at a saddle).
pub fn conjugated_spectrum_bounds(h: &LinearLatticeOperator, f: &KernelTable, skip: usize) -> Result<(f64, f64)> {
    let m = h.cell().spec().m();
    let op = |v: &[f64]| f.apply(&h.apply(&f.apply(v)?)?);
    let lo = lanczos(op, h.dim(), m, skip + 1, End::Lowest, 1e-8, 29)?;
    let hi = lanczos(op, h.dim(), m, 1, End::Highest, 1e-8, 31)?;
    // π_N contributes the eigenvalue 1 on constants.
    let low = lo[skip].value.min(1.0);
    let high = hi[0].value.max(1.0);
    Ok((low, high))
}

/// Dense oracle: all generalised eigenvalues of `(H + π, H^hom + π)`, which
/// are those of `H ψ = μ H^hom ψ` on zero-mean fields plus `m` ones.
pub fn generalized_eigen_dense(h: &LinearLatticeOperator, h_hom: &LinearLatticeOperator, vectors: bool) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let m = h.cell().spec().m();
    let mut a = h.to_dense();
    let mut b = h_hom.to_dense();
    add_projector(&mut a, m);
    add_projector(&mut b, m);
    linalg::sym_gen_eigh(&a, &b, vectors)
}
