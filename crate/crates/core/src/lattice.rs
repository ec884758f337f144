//! Bravais lattices, periodic supercells, stencil differences, the dual grid
//! with its discrete Fourier transform, periodic projection and the cut-off
//! operator for displacement fields.
//!
//! Lattice points are stored as integer coordinates `z` in the basis `A`, so
//! the Cartesian position is `A z`. The supercell `Λ_N` is the set of points
//! with `B⁻¹ A z ∈ (−N, N]^d`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_DIM: usize = 3;

/// Boundary tolerance of the half-open cell test.
const CELL_TOL: f64 = 1e-12;

/// Integer coordinates of a lattice point in the basis `A`.
/// Unused trailing coordinates are zero.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LatticePoint(pub [i64; MAX_DIM]);

impl LatticePoint {
    pub fn from_slice(z: &[i64]) -> Self {
        assert!(z.len() <= MAX_DIM);
        let mut c = [0; MAX_DIM];
        c[..z.len()].copy_from_slice(z);
        LatticePoint(c)
    }

    pub fn origin() -> Self {
        LatticePoint([0; MAX_DIM])
    }

    pub fn coords(&self, d: usize) -> &[i64] {
        &self.0[..d]
    }

    pub fn is_origin(&self) -> bool {
        self.0.iter().all(|&c| c == 0)
    }
}

impl std::ops::Add for LatticePoint {
    type Output = LatticePoint;
    fn add(self, o: LatticePoint) -> LatticePoint {
        LatticePoint([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}

impl std::ops::Sub for LatticePoint {
    type Output = LatticePoint;
    fn sub(self, o: LatticePoint) -> LatticePoint {
        LatticePoint([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}

impl std::ops::Neg for LatticePoint {
    type Output = LatticePoint;
    fn neg(self) -> LatticePoint {
        LatticePoint([-self.0[0], -self.0[1], -self.0[2]])
    }
}

impl fmt::Debug for LatticePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.0[0], self.0[1], self.0[2])
    }
}

/// Bravais geometry, displacement dimension and interaction stencil.
#[derive(Clone, Debug)]
pub struct LatticeSpec {
    d: usize,
    m: usize,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    /// `A⁻¹B`, integer by construction.
    cell_int: [[i64; MAX_DIM]; MAX_DIM],
    /// `(A⁻¹B)⁻¹`.
    cell_int_inv: DMatrix<f64>,
    a_inv: DMatrix<f64>,
    r_cut: f64,
    stencil: Vec<LatticePoint>,
    /// `opposite[r]` is the index of `−ρ_r`.
    opposite: Vec<usize>,
}

impl LatticeSpec {
    /// Builds the geometry and the stencil `R = (Λ \ {0}) ∩ B_{r_cut}`
    /// (open ball).
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, m: usize, r_cut: f64) -> Result<Self> {
        let d = a.nrows();
        if d == 0 || d > MAX_DIM || a.ncols() != d || b.nrows() != d || b.ncols() != d {
            return Err(Error::Config(format!(
                "A and B must be square of equal size 1..={MAX_DIM}"
            )));
        }
        if m == 0 {
            return Err(Error::Config("displacement dimension m must be >= 1".into()));
        }
        if !(r_cut > 0.0 && r_cut.is_finite()) {
            return Err(Error::Config(format!("r_cut must be positive, got {r_cut}")));
        }
        let a_inv = a
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Config("lattice generator A is singular".into()))?;
        let mf = &a_inv * &b;
        let mut cell_int = [[0i64; MAX_DIM]; MAX_DIM];
        for i in 0..d {
            for j in 0..d {
                let v = mf[(i, j)];
                let r = v.round();
                if (v - r).abs() > 1e-9 * (1.0 + v.abs()) {
                    return Err(Error::Config(format!(
                        "A^-1 B is not an integer matrix (entry ({i},{j}) = {v})"
                    )));
                }
                cell_int[i][j] = r as i64;
            }
        }
        let mi = DMatrix::from_fn(d, d, |i, j| cell_int[i][j] as f64);
        let cell_int_inv = mi
            .try_inverse()
            .ok_or_else(|| Error::Config("supercell generator B is singular".into()))?;

        let mut stencil: Vec<LatticePoint> = points_in_ball(&a, &a_inv, r_cut, true)
            .into_iter()
            .filter(|p| !p.is_origin())
            .collect();
        sort_by_length(&a, &mut stencil);
        if stencil.is_empty() {
            return Err(Error::Config(format!("empty interaction stencil for r_cut = {r_cut}")));
        }
        let pos: HashMap<LatticePoint, usize> =
            stencil.iter().enumerate().map(|(i, p)| (*p, i)).collect();
        let opposite = stencil
            .iter()
            .map(|p| pos.get(&(-*p)).copied())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Config("stencil is not point symmetric".into()))?;
        if integer_span_index(&stencil, d) != 1 {
            return Err(Error::Config(
                "stencil does not generate the lattice over the integers".into(),
            ));
        }
        Ok(LatticeSpec {
            d,
            m,
            a,
            b,
            cell_int,
            cell_int_inv,
            a_inv,
            r_cut,
            stencil,
            opposite,
        })
    }

    /// `Z^d` with unit supercell generator, the most common test geometry.
    pub fn cubic(d: usize, m: usize, r_cut: f64) -> Result<Self> {
        LatticeSpec::new(DMatrix::identity(d, d), DMatrix::identity(d, d), m, r_cut)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn r_cut(&self) -> f64 {
        self.r_cut
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn stencil(&self) -> &[LatticePoint] {
        &self.stencil
    }

    pub fn stencil_len(&self) -> usize {
        self.stencil.len()
    }

    pub fn opposite(&self, r: usize) -> usize {
        self.opposite[r]
    }

    /// `|det(A⁻¹B)|`.
    pub fn cell_multiplicity(&self) -> usize {
        let mi = DMatrix::from_fn(self.d, self.d, |i, j| self.cell_int[i][j] as f64);
        mi.determinant().abs().round() as usize
    }

    /// Cartesian position `A z`.
    pub fn position(&self, p: &LatticePoint) -> [f64; MAX_DIM] {
        let mut x = [0.0; MAX_DIM];
        for (i, xi) in x.iter_mut().enumerate().take(self.d) {
            *xi = (0..self.d).map(|j| self.a[(i, j)] * p.0[j] as f64).sum();
        }
        x
    }

    pub fn norm(&self, p: &LatticePoint) -> f64 {
        self.position(p).iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Supercell coordinates `t = (A⁻¹B)⁻¹ z = B⁻¹ A z`.
    pub fn cell_coords(&self, p: &LatticePoint) -> [f64; MAX_DIM] {
        let mut t = [0.0; MAX_DIM];
        for (i, ti) in t.iter_mut().enumerate().take(self.d) {
            *ti = (0..self.d)
                .map(|j| self.cell_int_inv[(i, j)] * p.0[j] as f64)
                .sum();
        }
        t
    }

    /// Lattice point with Cartesian position closest to `x` among integer
    /// roundings of `A⁻¹x`; exact when `x` is a lattice point.
    pub fn point_at(&self, x: &[f64]) -> LatticePoint {
        let mut z = [0i64; MAX_DIM];
        for (i, zi) in z.iter_mut().enumerate().take(self.d) {
            *zi = (0..self.d)
                .map(|j| self.a_inv[(i, j)] * x[j])
                .sum::<f64>()
                .round() as i64;
        }
        LatticePoint(z)
    }

    /// All lattice points with `|ℓ| < radius`, sorted by length then
    /// coordinates.
    pub fn ball(&self, radius: f64) -> Vec<LatticePoint> {
        let mut pts = points_in_ball(&self.a, &self.a_inv, radius, true);
        sort_by_length(&self.a, &mut pts);
        pts
    }

    /// Applies the integer matrix `A⁻¹B` to a coordinate vector.
    fn cell_apply(&self, j: &[i64; MAX_DIM]) -> LatticePoint {
        let mut z = [0i64; MAX_DIM];
        for (i, zi) in z.iter_mut().enumerate().take(self.d) {
            *zi = (0..self.d).map(|k| self.cell_int[i][k] * j[k]).sum();
        }
        LatticePoint(z)
    }
}

fn points_in_ball(a: &DMatrix<f64>, a_inv: &DMatrix<f64>, radius: f64, open: bool) -> Vec<LatticePoint> {
    let d = a.nrows();
    // |z_i| <= |row_i(A⁻¹)| |x|
    let bounds: Vec<i64> = (0..d)
        .map(|i| (a_inv.row(i).norm() * radius).ceil() as i64 + 1)
        .collect();
    let mut out = Vec::new();
    for_each_in_box(&bounds, |z| {
        let p = LatticePoint::from_slice(z);
        let mut r2 = 0.0;
        for i in 0..d {
            let xi: f64 = (0..d).map(|j| a[(i, j)] * z[j] as f64).sum();
            r2 += xi * xi;
        }
        let r = r2.sqrt();
        let inside = if open { r < radius - 1e-12 } else { r <= radius + 1e-12 };
        if inside {
            out.push(p);
        }
    });
    out
}

fn sort_by_length(a: &DMatrix<f64>, pts: &mut [LatticePoint]) {
    let d = a.nrows();
    let len = |p: &LatticePoint| -> f64 {
        (0..d)
            .map(|i| {
                let x: f64 = (0..d).map(|j| a[(i, j)] * p.0[j] as f64).sum();
                x * x
            })
            .sum::<f64>()
    };
    pts.sort_by(|p, q| {
        let (lp, lq) = (len(p), len(q));
        if (lp - lq).abs() > 1e-9 {
            lp.partial_cmp(&lq).unwrap()
        } else {
            p.cmp(q)
        }
    });
}

/// Calls `f` on every integer vector with `|z_i| <= bounds[i]`.
fn for_each_in_box(bounds: &[i64], mut f: impl FnMut(&[i64])) {
    let d = bounds.len();
    let mut z: Vec<i64> = bounds.iter().map(|b| -b).collect();
    loop {
        f(&z);
        let mut i = d;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if z[i] < bounds[i] {
                z[i] += 1;
                break;
            }
            z[i] = -bounds[i];
        }
    }
}

/// Index of the integer span of `pts` in `Z^d`: the gcd of all d×d minors
/// (0 if the points do not span).
fn integer_span_index(pts: &[LatticePoint], d: usize) -> i64 {
    fn gcd(a: i64, b: i64) -> i64 {
        if b == 0 {
            a.abs()
        } else {
            gcd(b, a % b)
        }
    }
    fn det(rows: &[&[i64]]) -> i64 {
        match rows.len() {
            1 => rows[0][0],
            2 => rows[0][0] * rows[1][1] - rows[0][1] * rows[1][0],
            _ => {
                let (a, b, c) = (rows[0], rows[1], rows[2]);
                a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
                    + a[2] * (b[0] * c[1] - b[1] * c[0])
            }
        }
    }
    let n = pts.len();
    let mut g = 0;
    let mut idx: Vec<usize> = (0..d).collect();
    if n < d {
        return 0;
    }
    loop {
        let rows: Vec<&[i64]> = idx.iter().map(|&i| pts[i].coords(d)).collect();
        g = gcd(g, det(&rows));
        if g == 1 {
            return 1;
        }
        // next combination
        let mut i = d;
        loop {
            if i == 0 {
                return g;
            }
            i -= 1;
            if idx[i] < n - d + i {
                idx[i] += 1;
                for j in i + 1..d {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// The periodic cell `Λ_N`, its site ordering, neighbour table and dual grid.
#[derive(Debug)]
pub struct Supercell {
    spec: Arc<LatticeSpec>,
    n: usize,
    sites: Vec<LatticePoint>,
    index: HashMap<LatticePoint, usize>,
    /// `neighbours[s * |R| + r]` = index of `wrap(ℓ_s + ρ_r)`.
    neighbours: Vec<usize>,
    dual: DualGrid,
}

/// Builds `Λ_N = Λ ∩ B(−N, N]^d` in lexicographic order of `B⁻¹ℓ`.
pub fn build_supercell(spec: Arc<LatticeSpec>, n: usize) -> Result<Arc<Supercell>> {
    Supercell::new(spec, n).map(Arc::new)
}

fn in_cell(t: &[f64], d: usize, n: f64) -> bool {
    t[..d].iter().all(|&x| x > -n + CELL_TOL && x <= n + CELL_TOL)
}

impl Supercell {
    pub fn new(spec: Arc<LatticeSpec>, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Precondition("supercell size N must be positive".into()));
        }
        let d = spec.d;
        let nf = n as f64;
        // Closed-box test: every stencil vector needs a representative in
        // the cell without being further than N cells away.
        for rho in &spec.stencil {
            let t = spec.cell_coords(rho);
            if t[..d].iter().any(|x| x.abs() > nf + CELL_TOL) {
                return Err(Error::Precondition(format!(
                    "N = {n} too small: stencil vector {rho:?} lies outside the cell"
                )));
            }
        }
        // z = (A⁻¹B) t with t ∈ (−N, N]^d, so |z_i| <= N Σ_j |M_ij|.
        let bounds: Vec<i64> = (0..d)
            .map(|i| n as i64 * spec.cell_int[i][..d].iter().map(|v| v.abs()).sum::<i64>())
            .collect();
        let mut keyed: Vec<([f64; MAX_DIM], LatticePoint)> = Vec::new();
        for_each_in_box(&bounds, |z| {
            let p = LatticePoint::from_slice(z);
            let t = spec.cell_coords(&p);
            if in_cell(&t, d, nf) {
                keyed.push((t, p));
            }
        });
        keyed.sort_by(|x, y| {
            for i in 0..d {
                match x.0[i].partial_cmp(&y.0[i]).unwrap() {
                    std::cmp::Ordering::Equal => continue,
                    o => return o,
                }
            }
            std::cmp::Ordering::Equal
        });
        let sites: Vec<LatticePoint> = keyed.into_iter().map(|(_, p)| p).collect();
        let expected = (2 * n).pow(d as u32) * spec.cell_multiplicity();
        if sites.len() != expected {
            return Err(Error::Config(format!(
                "supercell enumeration found {} sites, expected {expected}",
                sites.len()
            )));
        }
        let index: HashMap<LatticePoint, usize> =
            sites.iter().enumerate().map(|(i, p)| (*p, i)).collect();
        let nr = spec.stencil.len();
        let mut neighbours = Vec::with_capacity(sites.len() * nr);
        for s in &sites {
            for rho in &spec.stencil {
                let w = wrap_point(&spec, n, *s + *rho);
                neighbours.push(index[&w]);
            }
        }
        let dual = DualGrid::new(&spec, n, &sites)?;
        Ok(Supercell {
            spec,
            n,
            sites,
            index,
            neighbours,
            dual,
        })
    }

    pub fn spec(&self) -> &Arc<LatticeSpec> {
        &self.spec
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    /// Number of scalar degrees of freedom, `|Λ_N| m`.
    pub fn dofs(&self) -> usize {
        self.sites.len() * self.spec.m
    }

    pub fn sites(&self) -> &[LatticePoint] {
        &self.sites
    }

    pub fn site(&self, s: usize) -> LatticePoint {
        self.sites[s]
    }

    /// Ordinal of `wrap(p)`.
    pub fn index_of(&self, p: &LatticePoint) -> usize {
        self.index[&self.wrap(p)]
    }

    /// Ordinal of `p` if it lies in `Λ_N` itself (no wrapping).
    pub fn try_index(&self, p: &LatticePoint) -> Option<usize> {
        self.index.get(p).copied()
    }

    pub fn neighbour(&self, s: usize, r: usize) -> usize {
        self.neighbours[s * self.spec.stencil.len() + r]
    }

    pub fn neighbours_of(&self, s: usize) -> &[usize] {
        let nr = self.spec.stencil.len();
        &self.neighbours[s * nr..(s + 1) * nr]
    }

    /// Representative of `p + 2N B Z^d` inside `Λ_N`.
    pub fn wrap(&self, p: &LatticePoint) -> LatticePoint {
        wrap_point(&self.spec, self.n, *p)
    }

    pub fn dual(&self) -> &DualGrid {
        &self.dual
    }

    /// Distance from the origin of the periodic image of `ℓ_s` closest to it.
    pub fn site_norm(&self, s: usize) -> f64 {
        self.spec.norm(&self.sites[s])
    }
}

fn wrap_point(spec: &LatticeSpec, n: usize, p: LatticePoint) -> LatticePoint {
    let d = spec.d;
    let t = spec.cell_coords(&p);
    let nf = n as f64;
    let mut j = [0i64; MAX_DIM];
    for i in 0..d {
        j[i] = ((t[i] - nf) / (2.0 * nf) - 1e-9).ceil() as i64;
    }
    if j.iter().all(|&x| x == 0) {
        return p;
    }
    let shift = spec.cell_apply(&j);
    let two_n = 2 * n as i64;
    p - LatticePoint([two_n * shift.0[0], two_n * shift.0[1], two_n * shift.0[2]])
}

/// Grid layout used when `A⁻¹B` is diagonal; k-points are then stored in the
/// row-major order of the FFT grid.
struct FftLayout {
    shape: Vec<usize>,
    site_to_grid: Vec<usize>,
    forward: Vec<Arc<dyn Fft<f64>>>,
    inverse: Vec<Arc<dyn Fft<f64>>>,
}

impl fmt::Debug for FftLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FftLayout").field("shape", &self.shape).finish()
    }
}

/// `B_N = (π/N) B^{-T} Z^d ∩ π A^{-T} (−1, 1]^d`, the characters of `Λ_N`.
#[derive(Debug)]
pub struct DualGrid {
    d: usize,
    k_list: Vec<[f64; MAX_DIM]>,
    zero: usize,
    /// Cartesian site positions, used by the naive transform.
    positions: Vec<[f64; MAX_DIM]>,
    fft: Option<FftLayout>,
}

impl DualGrid {
    fn new(spec: &LatticeSpec, n: usize, sites: &[LatticePoint]) -> Result<Self> {
        let d = spec.d;
        let nf = n as f64;
        let b_inv_t = spec
            .b
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Config("B is singular".into()))?
            .transpose();
        let kpoint = |j: &[i64]| -> [f64; MAX_DIM] {
            let mut k = [0.0; MAX_DIM];
            for (i, ki) in k.iter_mut().enumerate().take(d) {
                *ki = std::f64::consts::PI / nf
                    * (0..d).map(|l| b_inv_t[(i, l)] * j[l] as f64).sum::<f64>();
            }
            k
        };
        let positions: Vec<[f64; MAX_DIM]> = sites.iter().map(|p| spec.position(p)).collect();
        let diagonal = (0..d).all(|i| (0..d).all(|j| i == j || spec.cell_int[i][j] == 0));

        if diagonal {
            let shape: Vec<usize> = (0..d)
                .map(|i| 2 * n * spec.cell_int[i][i].unsigned_abs() as usize)
                .collect();
            let total: usize = shape.iter().product();
            let mut k_list = Vec::with_capacity(total);
            let mut zero = 0;
            for g in 0..total {
                let mut rem = g;
                let mut j = [0i64; MAX_DIM];
                for i in (0..d).rev() {
                    let idx = rem % shape[i];
                    rem /= shape[i];
                    let p = shape[i] as i64;
                    let mut ji = idx as i64;
                    if ji > p / 2 {
                        ji -= p;
                    }
                    // sign of M_ii flips the orientation of axis i
                    j[i] = if spec.cell_int[i][i] < 0 { -ji } else { ji };
                }
                if j.iter().all(|&x| x == 0) {
                    zero = g;
                }
                k_list.push(kpoint(&j));
            }
            let site_to_grid = sites
                .iter()
                .map(|p| {
                    let mut g = 0;
                    for i in 0..d {
                        let len = shape[i] as i64;
                        g = g * shape[i] + p.0[i].rem_euclid(len) as usize;
                    }
                    g
                })
                .collect();
            let mut planner = FftPlanner::new();
            let forward = shape.iter().map(|&s| planner.plan_fft_forward(s)).collect();
            let inverse = shape.iter().map(|&s| planner.plan_fft_inverse(s)).collect();
            // For negative diagonal entries the phase uses j_i z_i / (N M_ii)
            // and the sign flip above keeps k·ℓ = 2π idx_i z_i / p_i.
            return Ok(DualGrid {
                d,
                k_list,
                zero,
                positions,
                fft: Some(FftLayout {
                    shape,
                    site_to_grid,
                    forward,
                    inverse,
                }),
            });
        }

        // General case: enumerate j with (A⁻¹B)^{-T} j / N ∈ (−1, 1]^d.
        let mi_inv_t = spec.cell_int_inv.transpose();
        let bounds: Vec<i64> = (0..d)
            .map(|i| n as i64 * (0..d).map(|k| spec.cell_int[k][i].abs()).sum::<i64>())
            .collect();
        let mut js: Vec<([f64; MAX_DIM], [i64; MAX_DIM])> = Vec::new();
        for_each_in_box(&bounds, |j| {
            let mut s = [0.0; MAX_DIM];
            for i in 0..d {
                s[i] = (0..d).map(|l| mi_inv_t[(i, l)] * j[l] as f64).sum::<f64>() / nf;
            }
            if in_cell(&s, d, 1.0) {
                let mut jj = [0i64; MAX_DIM];
                jj[..d].copy_from_slice(j);
                js.push((s, jj));
            }
        });
        js.sort_by(|x, y| x.1.cmp(&y.1));
        if js.len() != sites.len() {
            return Err(Error::Config(format!(
                "dual grid has {} points but the cell has {} sites",
                js.len(),
                sites.len()
            )));
        }
        let zero = js
            .iter()
            .position(|(_, j)| j.iter().all(|&x| x == 0))
            .expect("k = 0 is always in the dual grid");
        let k_list = js.iter().map(|(_, j)| kpoint(j)).collect();
        Ok(DualGrid {
            d,
            k_list,
            zero,
            positions,
            fft: None,
        })
    }

    pub fn len(&self) -> usize {
        self.k_list.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k_list.is_empty()
    }

    pub fn k_points(&self) -> &[[f64; MAX_DIM]] {
        &self.k_list
    }

    pub fn zero_index(&self) -> usize {
        self.zero
    }

    pub fn uses_fft(&self) -> bool {
        self.fft.is_some()
    }

    /// `ĝ(k) = Σ_ℓ e^{ik·ℓ} g(ℓ)` for a field with `width` components per
    /// site (site-major layout); the result is k-major with the same width.
    pub fn dft(&self, f: &[Complex64], width: usize) -> Result<Vec<Complex64>> {
        self.transform(f, width, 1.0)
    }

    /// `g(ℓ) = |B_N|⁻¹ Σ_k e^{−ik·ℓ} ĝ(k)`.
    pub fn idft(&self, fhat: &[Complex64], width: usize) -> Result<Vec<Complex64>> {
        let mut out = self.transform(fhat, width, -1.0)?;
        let scale = 1.0 / self.len() as f64;
        out.iter_mut().for_each(|v| *v *= scale);
        Ok(out)
    }

    /// Real convenience wrapper around [`DualGrid::dft`].
    pub fn dft_real(&self, f: &[f64], width: usize) -> Result<Vec<Complex64>> {
        let c: Vec<Complex64> = f.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.dft(&c, width)
    }

    fn transform(&self, f: &[Complex64], width: usize, sign: f64) -> Result<Vec<Complex64>> {
        let n = self.len();
        if f.len() != n * width {
            return Err(Error::SizeMismatch {
                what: "field length vs grid size times width",
                expected: n * width,
                actual: f.len(),
            });
        }
        match &self.fft {
            Some(layout) => Ok(self.transform_fft(layout, f, width, sign)),
            None => Ok(self.transform_naive(f, width, sign)),
        }
    }

    fn transform_fft(&self, layout: &FftLayout, f: &[Complex64], width: usize, sign: f64) -> Vec<Complex64> {
        let n = self.len();
        let mut out = vec![Complex64::new(0.0, 0.0); n * width];
        let mut grid = vec![Complex64::new(0.0, 0.0); n];
        for c in 0..width {
            if sign > 0.0 {
                // sites -> grid -> k (grid order)
                for (s, &g) in layout.site_to_grid.iter().enumerate() {
                    grid[g] = f[s * width + c];
                }
                fft_nd(&mut grid, &layout.shape, &layout.inverse);
                for (k, v) in grid.iter().enumerate() {
                    out[k * width + c] = *v;
                }
            } else {
                for k in 0..n {
                    grid[k] = f[k * width + c];
                }
                fft_nd(&mut grid, &layout.shape, &layout.forward);
                for (s, &g) in layout.site_to_grid.iter().enumerate() {
                    out[s * width + c] = grid[g];
                }
            }
        }
        out
    }

    fn transform_naive(&self, f: &[Complex64], width: usize, sign: f64) -> Vec<Complex64> {
        let n = self.len();
        let d = self.d;
        let mut out = vec![Complex64::new(0.0, 0.0); n * width];
        for (ki, k) in self.k_list.iter().enumerate() {
            for (si, x) in self.positions.iter().enumerate() {
                let phase: f64 = (0..d).map(|i| k[i] * x[i]).sum();
                let e = Complex64::from_polar(1.0, sign * phase);
                let (src, dst) = if sign > 0.0 { (si, ki) } else { (ki, si) };
                for c in 0..width {
                    out[dst * width + c] += e * f[src * width + c];
                }
            }
        }
        out
    }
}

fn fft_nd(data: &mut [Complex64], shape: &[usize], plans: &[Arc<dyn Fft<f64>>]) {
    let d = shape.len();
    let mut line = Vec::new();
    for axis in 0..d {
        let len = shape[axis];
        let stride: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        line.resize(len, Complex64::new(0.0, 0.0));
        for o in 0..outer {
            for inner in 0..stride {
                let base = o * len * stride + inner;
                for (i, v) in line.iter_mut().enumerate() {
                    *v = data[base + i * stride];
                }
                plans[axis].process(&mut line);
                for (i, v) in line.iter().enumerate() {
                    data[base + i * stride] = *v;
                }
            }
        }
    }
}

/// Periodic projection `f_N(ℓ) = |B_N|⁻¹ Σ_k e^{−ik·ℓ} f̂(k)`.
///
/// `f_hat` returns `width` components at a Cartesian k-point or `None` if
/// undefined there. With `skip_zero` the k = 0 term is omitted.
pub fn periodic_projection<F>(cell: &Supercell, width: usize, skip_zero: bool, mut f_hat: F) -> Result<Vec<Complex64>>
where
    F: FnMut(&[f64]) -> Option<Vec<Complex64>>,
{
    let grid = cell.dual();
    let d = grid.d;
    let mut vals = vec![Complex64::new(0.0, 0.0); grid.len() * width];
    for (ki, k) in grid.k_points().iter().enumerate() {
        if skip_zero && ki == grid.zero_index() {
            continue;
        }
        let v = f_hat(&k[..d]).ok_or_else(|| {
            Error::Precondition(format!("symbol undefined at k = {:?}", &k[..d]))
        })?;
        if v.len() != width {
            return Err(Error::SizeMismatch {
                what: "symbol width",
                expected: width,
                actual: v.len(),
            });
        }
        vals[ki * width..(ki + 1) * width].copy_from_slice(&v);
    }
    grid.idft(&vals, width)
}

/// The `|R|`-tuple of differences `(u(ℓ+ρ) − u(ℓ))_ρ`, stored flat with
/// `m` entries per stencil vector.
#[derive(Clone, Debug, PartialEq)]
pub struct StencilGradient {
    pub m: usize,
    pub entries: Vec<f64>,
}

impl StencilGradient {
    pub fn zeros(nr: usize, m: usize) -> Self {
        StencilGradient {
            m,
            entries: vec![0.0; nr * m],
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len() / self.m
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, r: usize) -> &[f64] {
        &self.entries[r * self.m..(r + 1) * self.m]
    }
}

/// A displacement field on `Λ_N` with one value per site.
#[derive(Clone, Debug)]
pub struct PeriodicField {
    cell: Arc<Supercell>,
    values: Vec<f64>,
}

impl PeriodicField {
    pub fn zeros(cell: Arc<Supercell>) -> Self {
        let n = cell.dofs();
        PeriodicField {
            cell,
            values: vec![0.0; n],
        }
    }

    pub fn from_values(cell: Arc<Supercell>, values: Vec<f64>) -> Result<Self> {
        if values.len() != cell.dofs() {
            return Err(Error::SizeMismatch {
                what: "periodic field values",
                expected: cell.dofs(),
                actual: values.len(),
            });
        }
        Ok(PeriodicField { cell, values })
    }

    pub fn cell(&self) -> &Arc<Supercell> {
        &self.cell
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn m(&self) -> usize {
        self.cell.spec().m()
    }

    pub fn site_value(&self, s: usize) -> &[f64] {
        let m = self.m();
        &self.values[s * m..(s + 1) * m]
    }

    pub fn value_at(&self, p: &LatticePoint) -> &[f64] {
        self.site_value(self.cell.index_of(p))
    }

    /// Mean displacement over the cell.
    pub fn mean(&self) -> Vec<f64> {
        let m = self.m();
        let mut c = vec![0.0; m];
        for s in 0..self.cell.len() {
            for i in 0..m {
                c[i] += self.values[s * m + i];
            }
        }
        c.iter_mut().for_each(|x| *x /= self.cell.len() as f64);
        c
    }

    /// Stencil gradient at site index `s`.
    pub fn stencil_at(&self, s: usize, out: &mut [f64]) {
        let m = self.m();
        let us = &self.values[s * m..(s + 1) * m];
        for (r, &nb) in self.cell.neighbours_of(s).iter().enumerate() {
            for i in 0..m {
                out[r * m + i] = self.values[nb * m + i] - us[i];
            }
        }
    }
}

/// A field on all of `Λ` that equals `far_value` outside a finite set.
#[derive(Clone, Debug)]
pub struct CompactField {
    spec: Arc<LatticeSpec>,
    support_radius: f64,
    far_value: Vec<f64>,
    values: BTreeMap<LatticePoint, Vec<f64>>,
}

impl CompactField {
    pub fn new(
        spec: Arc<LatticeSpec>,
        support_radius: f64,
        far_value: Vec<f64>,
        values: BTreeMap<LatticePoint, Vec<f64>>,
    ) -> Result<Self> {
        let m = spec.m();
        if far_value.len() != m || values.values().any(|v| v.len() != m) {
            return Err(Error::Config("compact field values must have m components".into()));
        }
        // Du vanishes for |ℓ| >= R iff u = far value beyond R − r_cut.
        let inner = support_radius - spec.r_cut();
        if let Some((p, _)) = values
            .iter()
            .find(|(p, v)| spec.norm(p) > inner + 1e-12 && *v != &far_value)
        {
            return Err(Error::Config(format!(
                "compact field value at {p:?} violates the declared support radius"
            )));
        }
        Ok(CompactField {
            spec,
            support_radius,
            far_value,
            values,
        })
    }

    pub fn support_radius(&self) -> f64 {
        self.support_radius
    }

    pub fn far_value(&self) -> &[f64] {
        &self.far_value
    }

    pub fn value_at(&self, p: &LatticePoint) -> &[f64] {
        self.values.get(p).map(|v| v.as_slice()).unwrap_or(&self.far_value)
    }

    pub fn stored(&self) -> &BTreeMap<LatticePoint, Vec<f64>> {
        &self.values
    }
}

#[derive(Clone, Debug)]
pub enum DisplacementField {
    Periodic(PeriodicField),
    Compact(CompactField),
}

impl DisplacementField {
    pub fn spec(&self) -> &Arc<LatticeSpec> {
        match self {
            DisplacementField::Periodic(f) => f.cell.spec(),
            DisplacementField::Compact(f) => &f.spec,
        }
    }

    pub fn value_at(&self, p: &LatticePoint) -> &[f64] {
        match self {
            DisplacementField::Periodic(f) => f.value_at(p),
            DisplacementField::Compact(f) => f.value_at(p),
        }
    }
}

/// `Du(ℓ) = (u(ℓ+ρ) − u(ℓ))_{ρ∈R}`; periodic fields wrap.
pub fn stencil_difference(u: &DisplacementField, l: &LatticePoint) -> StencilGradient {
    let spec = u.spec();
    let m = spec.m();
    let base = u.value_at(l).to_vec();
    let mut g = StencilGradient::zeros(spec.stencil_len(), m);
    for (r, rho) in spec.stencil().iter().enumerate() {
        let v = u.value_at(&(*l + *rho));
        for i in 0..m {
            g.entries[r * m + i] = v[i] - base[i];
        }
    }
    g
}

/// C² taper: 1 for `s <= 0`, 0 for `s >= 1`.
fn smooth_step_down(s: f64) -> f64 {
    if s <= 0.0 {
        1.0
    } else if s >= 1.0 {
        0.0
    } else {
        1.0 - s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
    }
}

/// Smallest admissible cut-off radius: the taper needs a nonempty band
/// between `R/2 + r_cut` and `R − r_cut`.
pub fn min_cutoff_radius(spec: &LatticeSpec) -> f64 {
    4.0 * spec.r_cut()
}

/// Cut-off operator `T_R u = η_R (u − c) + c`, where `c` is the mean of `u`
/// over the annulus `R/2 < |ℓ| < R` and `η_R` is a C² radial taper that is 1
/// up to `R/2 + r_cut` and 0 from `R − r_cut` on.
pub fn cutoff_t_r(u: &DisplacementField, radius: f64, r0: f64) -> Result<CompactField> {
    let spec = u.spec().clone();
    let r0 = r0.max(min_cutoff_radius(&spec));
    if radius <= r0 {
        return Err(Error::Precondition(format!(
            "cut-off radius {radius} must exceed the minimal radius {r0}"
        )));
    }
    let m = spec.m();
    let pts = spec.ball(radius);
    let mut c = vec![0.0; m];
    let mut count = 0usize;
    for p in &pts {
        if spec.norm(p) > radius / 2.0 {
            let v = u.value_at(p);
            for i in 0..m {
                c[i] += v[i];
            }
            count += 1;
        }
    }
    if count > 0 {
        c.iter_mut().for_each(|x| *x /= count as f64);
    }
    let r_in = radius / 2.0 + spec.r_cut();
    let r_out = radius - spec.r_cut();
    let mut values = BTreeMap::new();
    for p in &pts {
        let r = spec.norm(p);
        if r >= r_out {
            continue;
        }
        let eta = smooth_step_down((r - r_in) / (r_out - r_in));
        let v = u.value_at(p);
        values.insert(*p, (0..m).map(|i| eta * (v[i] - c[i]) + c[i]).collect());
    }
    CompactField::new(spec, radius, c, values)
}

/// Writes a periodic field as CSV with columns `l1..ld,u1..um`, where the
/// `l` columns are integer coordinates in the basis `A`.
pub fn write_field_csv<W: Write>(field: &PeriodicField, w: W) -> Result<()> {
    let spec = field.cell().spec();
    let (d, m) = (spec.dim(), spec.m());
    let mut wr = csv::Writer::from_writer(w);
    let header: Vec<String> = (1..=d)
        .map(|i| format!("l{i}"))
        .chain((1..=m).map(|i| format!("u{i}")))
        .collect();
    wr.write_record(&header)?;
    for (s, p) in field.cell().sites().iter().enumerate() {
        let rec: Vec<String> = p
            .coords(d)
            .iter()
            .map(|c| c.to_string())
            .chain(field.site_value(s).iter().map(|v| format!("{v:e}")))
            .collect();
        wr.write_record(&rec)?;
    }
    wr.flush().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(())
}

/// Reads a field written by [`write_field_csv`] onto `cell`.
pub fn read_field_csv<R: Read>(cell: Arc<Supercell>, r: R) -> Result<PeriodicField> {
    let spec = cell.spec().clone();
    let (d, m) = (spec.dim(), spec.m());
    let mut rd = csv::Reader::from_reader(r);
    let mut values = vec![f64::NAN; cell.dofs()];
    for rec in rd.records() {
        let rec = rec?;
        if rec.len() != d + m {
            return Err(Error::Parse(format!("field row has {} columns, expected {}", rec.len(), d + m)));
        }
        let z: Vec<i64> = (0..d)
            .map(|i| rec[i].parse::<i64>().map_err(|e| Error::Parse(e.to_string())))
            .collect::<Result<_>>()?;
        let s = cell
            .try_index(&LatticePoint::from_slice(&z))
            .ok_or_else(|| Error::Parse(format!("site {z:?} is not in the cell")))?;
        for i in 0..m {
            values[s * m + i] = rec[d + i].parse::<f64>().map_err(|e| Error::Parse(e.to_string()))?;
        }
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Parse("field file does not cover every site".into()));
    }
    PeriodicField::from_values(cell, values)
}
