//! Energies, gradients, Hessians and third/fourth variations on periodic
//! supercells.
//!
//! All second-order objects go through one scatter: a site contributes a
//! local `n×n` matrix `L` in stencil coordinates (`n = |R| m`), and because
//! `Du(ℓ)_ρ = u(ℓ+ρ) − u(ℓ)` the global blocks receive
//! `(ℓ+ρ, ℓ+σ) += L_ρσ`, `(ℓ+ρ, ℓ) −= L_ρσ`, `(ℓ, ℓ+σ) −= L_ρσ`, `(ℓ, ℓ) += L_ρσ`.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lattice::{PeriodicField, Supercell};
use crate::potentials::{PotentialModel, SitePotential};

/// What an operator represents; carried along for audit output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Annotation {
    Hessian,
    HessianHom,
    KernelFN,
    Projector,
    Composite,
}

/// Block-sparse rows: row site `s` owns `row_ptr[s]..row_ptr[s+1]` in
/// `cols` / `blocks`, each block `m×m` row-major.
#[derive(Clone, Debug)]
struct BlockCsr {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    blocks: Vec<f64>,
}

#[derive(Clone, Debug)]
enum Storage {
    Sparse(BlockCsr),
    Dense(DMatrix<f64>),
}

/// A linear map on periodic fields of `Λ_N`, stored as `m×m` site blocks.
#[derive(Clone, Debug)]
pub struct LinearLatticeOperator {
    cell: Arc<Supercell>,
    annotation: Annotation,
    storage: Storage,
}

impl LinearLatticeOperator {
    pub fn from_dense(cell: Arc<Supercell>, a: DMatrix<f64>, annotation: Annotation) -> Result<Self> {
        let n = cell.dofs();
        if a.nrows() != n || a.ncols() != n {
            return Err(Error::SizeMismatch {
                what: "dense operator dimension",
                expected: n,
                actual: a.nrows(),
            });
        }
        Ok(LinearLatticeOperator {
            cell,
            annotation,
            storage: Storage::Dense(a),
        })
    }

    pub fn cell(&self) -> &Arc<Supercell> {
        &self.cell
    }

    pub fn annotation(&self) -> Annotation {
        self.annotation
    }

    pub fn dim(&self) -> usize {
        self.cell.dofs()
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self.storage, Storage::Sparse(_))
    }

    fn m(&self) -> usize {
        self.cell.spec().m()
    }

    /// `A v`.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        if v.len() != n {
            return Err(Error::SizeMismatch {
                what: "operator argument",
                expected: n,
                actual: v.len(),
            });
        }
        let m = self.m();
        let mut out = vec![0.0; n];
        match &self.storage {
            Storage::Sparse(csr) => {
                for s in 0..self.cell.len() {
                    let o = &mut out[s * m..(s + 1) * m];
                    for p in csr.row_ptr[s]..csr.row_ptr[s + 1] {
                        let c = csr.cols[p];
                        let b = &csr.blocks[p * m * m..(p + 1) * m * m];
                        for i in 0..m {
                            for j in 0..m {
                                o[i] += b[i * m + j] * v[c * m + j];
                            }
                        }
                    }
                }
            }
            Storage::Dense(a) => {
                let r = a * DVector::from_column_slice(v);
                out.copy_from_slice(r.as_slice());
            }
        }
        Ok(out)
    }

    /// The `m×m` block `(ℓ, n)` by site index (zero if not stored).
    pub fn block(&self, row: usize, col: usize) -> DMatrix<f64> {
        let m = self.m();
        match &self.storage {
            Storage::Sparse(csr) => {
                for p in csr.row_ptr[row]..csr.row_ptr[row + 1] {
                    if csr.cols[p] == col {
                        return DMatrix::from_row_slice(m, m, &csr.blocks[p * m * m..(p + 1) * m * m]);
                    }
                }
                DMatrix::zeros(m, m)
            }
            Storage::Dense(a) => a.view((row * m, col * m), (m, m)).into_owned(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match &self.storage {
            Storage::Dense(a) => a.clone(),
            Storage::Sparse(csr) => {
                let m = self.m();
                let n = self.dim();
                let mut a = DMatrix::zeros(n, n);
                for s in 0..self.cell.len() {
                    for p in csr.row_ptr[s]..csr.row_ptr[s + 1] {
                        let c = csr.cols[p];
                        let b = &csr.blocks[p * m * m..(p + 1) * m * m];
                        for i in 0..m {
                            for j in 0..m {
                                a[(s * m + i, c * m + j)] = b[i * m + j];
                            }
                        }
                    }
                }
                a
            }
        }
    }

    /// `a·A + b·B` blockwise; sparse if both inputs are sparse.
    pub fn lincomb(a: f64, x: &Self, b: f64, y: &Self, annotation: Annotation) -> Result<Self> {
        if x.dim() != y.dim() {
            return Err(Error::SizeMismatch {
                what: "operator combination",
                expected: x.dim(),
                actual: y.dim(),
            });
        }
        let storage = match (&x.storage, &y.storage) {
            (Storage::Sparse(p), Storage::Sparse(q)) => {
                let m = x.m();
                let mut acc = Accumulator::new(x.cell.len(), m);
                for (w, csr) in [(a, p), (b, q)] {
                    for s in 0..x.cell.len() {
                        for k in csr.row_ptr[s]..csr.row_ptr[s + 1] {
                            let blk = acc.block(s, csr.cols[k]);
                            for (t, v) in blk.iter_mut().zip(&csr.blocks[k * m * m..(k + 1) * m * m]) {
                                *t += w * v;
                            }
                        }
                    }
                }
                Storage::Sparse(acc.finish())
            }
            _ => Storage::Dense(x.to_dense() * a + y.to_dense() * b),
        };
        Ok(LinearLatticeOperator {
            cell: x.cell.clone(),
            annotation,
            storage,
        })
    }

    /// `max |A − Aᵀ|`.
    pub fn asymmetry(&self) -> f64 {
        let a = self.to_dense();
        (&a - a.transpose()).amax()
    }

    /// Coordinate list `row_site,col_site,i,j,value`, one nonzero per line.
    pub fn write_coo<W: Write>(&self, mut w: W) -> Result<()> {
        let m = self.m();
        let io = |e| Error::io("<coo writer>", e);
        writeln!(w, "row,col,i,j,value").map_err(io)?;
        let n = self.cell.len();
        for r in 0..n {
            for c in 0..n {
                let b = self.block(r, c);
                if matches!(self.storage, Storage::Dense(_)) && b.amax() == 0.0 {
                    continue;
                }
                for i in 0..m {
                    for j in 0..m {
                        if b[(i, j)] != 0.0 {
                            writeln!(w, "{r},{c},{i},{j},{:e}", b[(i, j)]).map_err(io)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Largest lattice distance between coupled sites (sparse storage only).
    pub fn bandwidth(&self) -> Option<f64> {
        let Storage::Sparse(csr) = &self.storage else {
            return None;
        };
        let spec = self.cell.spec();
        let mut w: f64 = 0.0;
        for s in 0..self.cell.len() {
            for p in csr.row_ptr[s]..csr.row_ptr[s + 1] {
                let diff = self.cell.wrap(&(self.cell.site(csr.cols[p]) - self.cell.site(s)));
                w = w.max(spec.norm(&diff));
            }
        }
        Some(w)
    }
}

/// Collects blocks keyed by `(row, col)` site pairs.
struct Accumulator {
    m: usize,
    nsites: usize,
    index: HashMap<(usize, usize), usize>,
    keys: Vec<(usize, usize)>,
    data: Vec<f64>,
}

impl Accumulator {
    fn new(nsites: usize, m: usize) -> Self {
        Accumulator {
            m,
            nsites,
            index: HashMap::new(),
            keys: Vec::new(),
            data: Vec::new(),
        }
    }

    fn block(&mut self, r: usize, c: usize) -> &mut [f64] {
        let mm = self.m * self.m;
        let next = self.keys.len();
        let k = *self.index.entry((r, c)).or_insert(next);
        if k == next {
            self.keys.push((r, c));
            self.data.extend(std::iter::repeat_n(0.0, mm));
        }
        &mut self.data[k * mm..(k + 1) * mm]
    }

    /// Adds `sign · L_{ρσ}` (local stencil blocks) to global block `(r, c)`.
    fn add_local(&mut self, r: usize, c: usize, local: &[f64], n: usize, rb: usize, cb: usize, sign: f64) {
        let m = self.m;
        let blk = self.block(r, c);
        for i in 0..m {
            for j in 0..m {
                blk[i * m + j] += sign * local[(rb * m + i) * n + cb * m + j];
            }
        }
    }

    fn finish(self) -> BlockCsr {
        let mm = self.m * self.m;
        let mut order: Vec<usize> = (0..self.keys.len()).collect();
        order.sort_by_key(|&k| self.keys[k]);
        let mut row_ptr = vec![0usize; self.nsites + 1];
        let mut cols = Vec::with_capacity(order.len());
        let mut blocks = Vec::with_capacity(order.len() * mm);
        for &k in &order {
            let (r, c) = self.keys[k];
            row_ptr[r + 1] += 1;
            cols.push(c);
            blocks.extend_from_slice(&self.data[k * mm..(k + 1) * mm]);
        }
        for s in 0..self.nsites {
            row_ptr[s + 1] += row_ptr[s];
        }
        BlockCsr { row_ptr, cols, blocks }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EnergyReport {
    pub value: f64,
    #[serde(skip)]
    pub gradient: Vec<f64>,
    pub gradient_norm: f64,
    /// True if at least one defect override took part.
    pub defect_flag: bool,
}

/// Which site potentials enter an assembly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HessianKind {
    Defect,
    Homogeneous,
}

fn check_field(model: &PotentialModel, u: &PeriodicField) -> Result<()> {
    let spec = u.cell().spec();
    if spec.m() != model.spec().m() || spec.stencil() != model.spec().stencil() {
        return Err(Error::Precondition(
            "field and model live on different lattices".into(),
        ));
    }
    Ok(())
}

/// `V_ℓ` for every site of the cell.
pub fn site_potentials<'a>(
    model: &'a PotentialModel,
    cell: &Supercell,
    kind: HessianKind,
) -> Result<Vec<&'a SitePotential>> {
    let mut out = vec![model.homogeneous(); cell.len()];
    if kind == HessianKind::Defect {
        for (p, v) in model.overrides() {
            match cell.try_index(p) {
                Some(s) if cell.site(s) == *p => out[s] = v,
                _ => {
                    return Err(Error::Precondition(format!(
                        "override site {p:?} is not a representative of Λ_N for N = {}",
                        cell.n()
                    )))
                }
            }
        }
    }
    Ok(out)
}

fn energy_with(model: &PotentialModel, u: &PeriodicField, kind: HessianKind) -> Result<EnergyReport> {
    check_field(model, u)?;
    let cell = u.cell();
    let pots = site_potentials(model, cell, kind)?;
    let (m, nr) = (cell.spec().m(), cell.spec().stencil_len());
    let mut g = vec![0.0; nr * m];
    let mut lg = vec![0.0; nr * m];
    let mut grad = vec![0.0; cell.dofs()];
    let mut value = 0.0;
    for s in 0..cell.len() {
        u.stencil_at(s, &mut g);
        value += pots[s].value(&g);
        lg.iter_mut().for_each(|x| *x = 0.0);
        pots[s].add_gradient(&g, &mut lg);
        for (r, &nb) in cell.neighbours_of(s).iter().enumerate() {
            for i in 0..m {
                grad[nb * m + i] += lg[r * m + i];
                grad[s * m + i] -= lg[r * m + i];
            }
        }
    }
    let gradient_norm = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(EnergyReport {
        value,
        gradient: grad,
        gradient_norm,
        defect_flag: kind == HessianKind::Defect && model.has_defect(),
    })
}

/// `E_N(u) = Σ_{ℓ∈Λ_N} V_ℓ(Du(ℓ))` and its gradient.
pub fn energy_periodic(model: &PotentialModel, u: &PeriodicField) -> Result<EnergyReport> {
    energy_with(model, u, HessianKind::Defect)
}

/// Same with `V` at every site.
pub fn energy_homogeneous(model: &PotentialModel, u: &PeriodicField) -> Result<EnergyReport> {
    energy_with(model, u, HessianKind::Homogeneous)
}

/// Assembles `Σ_ℓ Dᵀ L_ℓ D` where `local(s, Du(ℓ_s), out)` fills `L_ℓ`.
fn assemble<F>(cell: &Arc<Supercell>, u: &PeriodicField, annotation: Annotation, mut local: F) -> LinearLatticeOperator
where
    F: FnMut(usize, &[f64], &mut [f64]),
{
    let (m, nr) = (cell.spec().m(), cell.spec().stencil_len());
    let n = nr * m;
    let mut acc = Accumulator::new(cell.len(), m);
    let mut g = vec![0.0; n];
    let mut l = vec![0.0; n * n];
    let mut rowsum = vec![0.0; n * m];
    let mut colsum = vec![0.0; m * n];
    for s in 0..cell.len() {
        u.stencil_at(s, &mut g);
        l.iter_mut().for_each(|x| *x = 0.0);
        local(s, &g, &mut l);
        if l.iter().all(|&x| x == 0.0) {
            continue;
        }
        let nbs = cell.neighbours_of(s);
        // rowsum[ρ] = Σ_σ L_ρσ, colsum[σ] = Σ_ρ L_ρσ, both m×m
        rowsum.iter_mut().for_each(|x| *x = 0.0);
        colsum.iter_mut().for_each(|x| *x = 0.0);
        let mut total = vec![0.0; m * m];
        for r in 0..nr {
            for t in 0..nr {
                acc.add_local(nbs[r], nbs[t], &l, n, r, t, 1.0);
                for i in 0..m {
                    for j in 0..m {
                        let v = l[(r * m + i) * n + t * m + j];
                        rowsum[(r * m + i) * m + j] += v;
                        colsum[i * n + t * m + j] += v;
                        total[i * m + j] += v;
                    }
                }
            }
        }
        for r in 0..nr {
            acc.add_local(nbs[r], s, &rowsum, m, r, 0, -1.0);
            acc.add_local(s, nbs[r], &colsum, n, 0, r, -1.0);
        }
        acc.add_local(s, s, &total, m, 0, 0, 1.0);
    }
    LinearLatticeOperator {
        cell: cell.clone(),
        annotation,
        storage: Storage::Sparse(acc.finish()),
    }
}

/// `H_N(u) = δ²E_N(u)` (or `H_N^hom(u)` with the homogeneous kind).
pub fn hessian(model: &PotentialModel, u: &PeriodicField, kind: HessianKind) -> Result<LinearLatticeOperator> {
    check_field(model, u)?;
    let cell = u.cell().clone();
    let pots = site_potentials(model, &cell, kind)?;
    let ann = match kind {
        HessianKind::Defect => Annotation::Hessian,
        HessianKind::Homogeneous => Annotation::HessianHom,
    };
    Ok(assemble(&cell, u, ann, |s, g, l| pots[s].add_hessian(g, l)))
}

/// `H_N^hom` at `u = 0`.
pub fn hessian_reference(model: &PotentialModel, cell: &Arc<Supercell>) -> Result<LinearLatticeOperator> {
    hessian(model, &PeriodicField::zeros(cell.clone()), HessianKind::Homogeneous)
}

/// `H^t(u) = (1 − t) H^hom + t H(u)` with `H^hom` at the reference state.
pub fn hessian_interp(model: &PotentialModel, u: &PeriodicField, t: f64) -> Result<LinearLatticeOperator> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Precondition(format!("interpolation parameter t = {t} outside [0, 1]")));
    }
    let h0 = hessian_reference(model, u.cell())?;
    let h1 = hessian(model, u, HessianKind::Defect)?;
    LinearLatticeOperator::lincomb(1.0 - t, &h0, t, &h1, Annotation::Composite)
}

/// Far-field-linearised Hessian: `∇²V(0)` on sites with `|ℓ| <= radius`,
/// `∇²V(Du(ℓ))` elsewhere, homogeneous potential everywhere.
pub fn hessian_truncated(model: &PotentialModel, u: &PeriodicField, radius: f64) -> Result<LinearLatticeOperator> {
    check_field(model, u)?;
    if !(radius >= 0.0) {
        return Err(Error::Precondition(format!("truncation radius {radius} must be nonnegative")));
    }
    let cell = u.cell().clone();
    let v = model.homogeneous();
    let zero = vec![0.0; cell.spec().stencil_len() * cell.spec().m()];
    Ok(assemble(&cell, u, Annotation::Composite, |s, g, l| {
        if cell.site_norm(s) <= radius {
            v.add_hessian(&zero, l)
        } else {
            v.add_hessian(g, l)
        }
    }))
}

/// `⟨δH(u), v⟩` (blocks `Σ_ξ ∇³V_ξ(Du(ξ))[Dδ_a, Dδ_b, Dv(ξ)]`), or with `w`
/// the second variation `⟨δ²H(u) v, w⟩` through `∇⁴V`.
pub fn variation_contractions(
    model: &PotentialModel,
    u: &PeriodicField,
    v: &PeriodicField,
    w: Option<&PeriodicField>,
    kind: HessianKind,
) -> Result<LinearLatticeOperator> {
    check_field(model, u)?;
    check_field(model, v)?;
    if v.values().len() != u.values().len() || w.is_some_and(|w| w.values().len() != u.values().len()) {
        return Err(Error::SizeMismatch {
            what: "variation direction",
            expected: u.values().len(),
            actual: v.values().len(),
        });
    }
    let cell = u.cell().clone();
    let pots = site_potentials(model, &cell, kind)?;
    let n = cell.spec().stencil_len() * cell.spec().m();
    let mut dv = vec![0.0; n];
    let mut dw = vec![0.0; n];
    Ok(assemble(&cell, u, Annotation::Composite, |s, g, l| {
        if pots[s].is_harmonic() {
            return;
        }
        v.stencil_at(s, &mut dv);
        match w {
            None => pots[s].add_third_contracted(g, &dv, l),
            Some(w) => {
                w.stencil_at(s, &mut dw);
                pots[s].add_fourth_contracted(g, &dv, &dw, l)
            }
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::build_supercell;
    use crate::potentials::{self, anharmonic_double_well, harmonic_defect_spec, square_lattice, symbol_h, unit_springs};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(cell: &Arc<Supercell>, seed: u64, scale: f64) -> PeriodicField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..cell.dofs()).map(|_| rng.random_range(-scale..scale)).collect();
        PeriodicField::from_values(cell.clone(), v).unwrap()
    }

    fn shifted(u: &PeriodicField, v: &PeriodicField, h: f64) -> PeriodicField {
        let vals = u.values().iter().zip(v.values()).map(|(a, b)| a + h * b).collect();
        PeriodicField::from_values(u.cell().clone(), vals).unwrap()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn zero_and_constant_fields() {
        let model = anharmonic_double_well();
        let cell = build_supercell(model.spec().clone(), 4).unwrap();
        let e = energy_periodic(&model, &PeriodicField::zeros(cell.clone())).unwrap();
        assert_eq!(e.value, 0.0);
        let c = PeriodicField::from_values(cell.clone(), [0.3, -0.2].repeat(cell.len())).unwrap();
        let e = energy_periodic(&model, &c).unwrap();
        assert!(e.value.abs() < 1e-14);
        let hom = energy_homogeneous(&model, &c).unwrap();
        assert!(hom.value.abs() < 1e-14 && hom.gradient_norm < 1e-14);
        // the defect has a misfit, so the constant state is not in equilibrium
        assert!(e.gradient_norm > 1e-3);
        let h = hessian(&model, &random_field(&cell, 3, 0.1), HessianKind::Defect).unwrap();
        assert!(h.apply(c.values()).unwrap().iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn harmonic_energy_is_quadratic_form() {
        let model = potentials::PotentialModel::new(square_lattice(), &harmonic_defect_spec(1.0, 0.4, 2.5)).unwrap();
        let cell = build_supercell(model.spec().clone(), 5).unwrap();
        let u = random_field(&cell, 7, 1.0);
        let h = hessian(&model, &PeriodicField::zeros(cell.clone()), HessianKind::Defect).unwrap();
        let q = 0.5 * dot(&h.apply(u.values()).unwrap(), u.values());
        let e = energy_periodic(&model, &u).unwrap().value;
        assert!((e - q).abs() < 1e-10 * e.abs());
    }

    #[test]
    fn homogeneous_energy_matches_override_free_model() {
        let model = anharmonic_double_well();
        let hom = model.homogeneous_model();
        let cell = build_supercell(model.spec().clone(), 4).unwrap();
        let u = random_field(&cell, 9, 0.2);
        let a = energy_homogeneous(&model, &u).unwrap();
        let b = energy_periodic(&hom, &u).unwrap();
        assert!((a.value - b.value).abs() < 1e-13);
        assert!(!b.defect_flag && energy_periodic(&model, &u).unwrap().defect_flag);
        // supported away from the core
        let mut far = PeriodicField::zeros(cell.clone());
        for s in 0..cell.len() {
            if cell.site_norm(s) > 2.5 {
                far.values_mut()[2 * s] = 0.1 * s as f64 / cell.len() as f64;
            }
        }
        let x = energy_periodic(&model, &far).unwrap().value;
        let y = energy_homogeneous(&model, &far).unwrap().value;
        assert!((x - y).abs() < 1e-14);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let model = anharmonic_double_well();
        let cell = build_supercell(model.spec().clone(), 4).unwrap();
        let u = random_field(&cell, 1, 0.1);
        let v = random_field(&cell, 2, 1.0);
        let g = energy_periodic(&model, &u).unwrap().gradient;
        let exact = dot(&g, v.values());
        let fd = |h: f64| {
            let ep = energy_periodic(&model, &shifted(&u, &v, h)).unwrap().value;
            let em = energy_periodic(&model, &shifted(&u, &v, -h)).unwrap().value;
            (ep - em) / (2.0 * h)
        };
        let e3 = (fd(1e-3) - exact).abs();
        let e4 = (fd(1e-4) - exact).abs();
        assert!(e4 < 1e-7 * exact.abs().max(1.0));
        // O(h²): shrinking h tenfold cuts the error about a hundredfold
        let ratio = e3 / e4;
        assert!(ratio > 50.0 && ratio < 200.0, "ratio {ratio}");
    }

    #[test]
    fn hessian_matches_second_difference() {
        let model = anharmonic_double_well();
        let cell = build_supercell(model.spec().clone(), 4).unwrap();
        let u = random_field(&cell, 4, 0.1);
        let v = random_field(&cell, 5, 1.0);
        let h = hessian(&model, &u, HessianKind::Defect).unwrap();
        assert!(h.asymmetry() < 1e-12);
        let exact = dot(&h.apply(v.values()).unwrap(), v.values());
        let step = 1e-4;
        let e0 = energy_periodic(&model, &u).unwrap().value;
        let ep = energy_periodic(&model, &shifted(&u, &v, step)).unwrap().value;
        let em = energy_periodic(&model, &shifted(&u, &v, -step)).unwrap().value;
        let fd = (ep - 2.0 * e0 + em) / (step * step);
        assert!((fd - exact).abs() < 1e-5 * exact.abs());
        // gradient difference gives the full action
        let gp = energy_periodic(&model, &shifted(&u, &v, step)).unwrap().gradient;
        let gm = energy_periodic(&model, &shifted(&u, &v, -step)).unwrap().gradient;
        let hv = h.apply(v.values()).unwrap();
        let err = gp.iter().zip(&gm).zip(&hv).map(|((a, b), c)| ((a - b) / (2.0 * step) - c).abs()).fold(0.0, f64::max);
        assert!(err < 1e-5 * hv.iter().fold(0.0f64, |a, b| a.max(b.abs())));
    }

    #[test]
    fn chain_eigenvalues_are_symbol_values() {
        let model = unit_springs(1, 1).unwrap();
        let cell = build_supercell(model.spec().clone(), 2).unwrap();
        let h = hessian_reference(&model, &cell).unwrap().to_dense();
        let mut ev: Vec<f64> = h.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        let mut sym: Vec<f64> = cell.dual().k_points().iter().map(|k| symbol_h(&model, &k[..1]).sine[(0, 0)]).collect();
        sym.sort_by(f64::total_cmp);
        for (a, b) in ev.iter().zip(&sym) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn homogeneous_hessian_psd_with_m_zero_modes() {
        let model = anharmonic_double_well();
        let cell = build_supercell(model.spec().clone(), 4).unwrap();
        let h = hessian_reference(&model, &cell).unwrap();
        let ev = h.to_dense().symmetric_eigenvalues();
        assert!(ev.min() > -1e-10);
        assert_eq!(ev.iter().filter(|x| x.abs() < 1e-8).count(), 2);
        assert!(h.bandwidth().unwrap() <= 2.0 * model.spec().r_cut() + 1e-12);
    }

    #[test]
    fn interpolation_is_affine() {
        let model = anharmonic_double_well();
        let cell = build_supercell(model.spec().clone(), 3).unwrap();
        let u = random_field(&cell, 6, 0.1);
        let h0 = hessian_interp(&model, &u, 0.0).unwrap().to_dense();
        let h1 = hessian_interp(&model, &u, 1.0).unwrap().to_dense();
        let hh = hessian_interp(&model, &u, 0.5).unwrap().to_dense();
        assert!((&h0 - hessian_reference(&model, &cell).unwrap().to_dense()).amax() < 1e-15);
        assert!((&h1 - hessian(&model, &u, HessianKind::Defect).unwrap().to_dense()).amax() < 1e-15);
        assert!((&hh - (&h0 + &h1) * 0.5).amax() < 1e-14);
        assert!(hessian_interp(&model, &u, 1.5).is_err());
    }

    #[test]
    fn truncated_hessian_rules() {
        let model = anharmonic_double_well();
        let cell = build_supercell(model.spec().clone(), 4).unwrap();
        let u = random_field(&cell, 8, 0.1);
        let href = hessian_reference(&model, &cell).unwrap().to_dense();
        let hall = hessian_truncated(&model, &u, 100.0).unwrap().to_dense();
        assert!((&hall - &href).amax() < 1e-15);
        // radius 0: only the origin is linearised
        let hnone = hessian_truncated(&model, &u, 0.0).unwrap().to_dense();
        let hh = hessian(&model, &u, HessianKind::Homogeneous).unwrap().to_dense();
        assert!((&hnone - &hh).amax() > 0.0);
        // per-site oracle at radius 2
        let radius = 2.0;
        let ht = hessian_truncated(&model, &u, radius).unwrap().to_dense();
        let zero = PeriodicField::zeros(cell.clone());
        let mut oracle = DMatrix::zeros(cell.dofs(), cell.dofs());
        for s in 0..cell.len() {
            // energy of a single site's contribution, assembled alone
            let single = assemble(&cell, if cell.site_norm(s) <= radius { &zero } else { &u }, Annotation::Composite, |t, g, l| {
                if t == s {
                    model.homogeneous().add_hessian(g, l)
                }
            });
            oracle += single.to_dense();
        }
        assert!((&ht - &oracle).amax() < 1e-13);
    }

    #[test]
    fn third_and_fourth_variations_match_differences() {
        let model = anharmonic_double_well();
        let cell = build_supercell(model.spec().clone(), 3).unwrap();
        let u = random_field(&cell, 10, 0.1);
        let v = random_field(&cell, 11, 1.0);
        let h = 1e-4;
        let hp = hessian(&model, &shifted(&u, &v, h), HessianKind::Defect).unwrap().to_dense();
        let hm = hessian(&model, &shifted(&u, &v, -h), HessianKind::Defect).unwrap().to_dense();
        let h0 = hessian(&model, &u, HessianKind::Defect).unwrap().to_dense();
        let d1 = variation_contractions(&model, &u, &v, None, HessianKind::Defect).unwrap().to_dense();
        let fd1 = (&hp - &hm) / (2.0 * h);
        assert!((&fd1 - &d1).amax() < 1e-5 * d1.amax());
        let d2 = variation_contractions(&model, &u, &v, Some(&v), HessianKind::Defect).unwrap().to_dense();
        let fd2 = (&hp - &h0 * 2.0 + &hm) / (h * h);
        assert!((&fd2 - &d2).amax() < 1e-4 * d2.amax());
        let harmonic = potentials::PotentialModel::new(square_lattice(), &harmonic_defect_spec(1.0, 0.5, 2.0)).unwrap();
        let z = variation_contractions(&harmonic, &u, &v, None, HessianKind::Defect).unwrap();
        assert_eq!(z.to_dense().amax(), 0.0);
    }

    #[test]
    fn coo_export_lists_nonzeros() {
        let model = unit_springs(1, 1).unwrap();
        let cell = build_supercell(model.spec().clone(), 3).unwrap();
        let h = hessian_reference(&model, &cell).unwrap();
        let mut buf = Vec::new();
        h.write_coo(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        // tridiagonal periodic: 3 entries per row
        assert_eq!(text.lines().count(), 1 + 3 * cell.len());
    }
}
