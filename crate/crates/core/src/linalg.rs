//! Thin safe wrappers over the dense LAPACK routines used by the spectral
//! and thermo modules. Matrices are nalgebra column-major `DMatrix<f64>`.

use std::sync::OnceLock;

use lapack_sys as lp;
use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Solves a small transposed triangular system through LAPACK and compares
/// it with plain back substitution. Some OpenBLAS builds dispatch to kernels
/// that get this wrong on recent CPUs; every dense routine refuses to run
/// in that case instead of returning silently wrong spectra.
fn backend_check() -> Result<()> {
    static OK: OnceLock<bool> = OnceLock::new();
    let ok = *OK.get_or_init(|| {
        let n = 24usize;
        let l = DMatrix::from_fn(n, n, |i, j| {
            if i < j {
                0.0
            } else if i == j {
                2.0 + (i % 3) as f64
            } else {
                ((i * 7 + j * 3) % 5) as f64 * 0.25 - 0.5
            }
        });
        let rhs = DMatrix::from_fn(n, n, |i, j| ((i + 2 * j) % 7) as f64 - 3.0);
        let mut x = rhs.clone();
        let ni = n as i32;
        let mut info = 0;
        unsafe {
            lp::dtrtrs_(&(b'L' as i8), &(b'T' as i8), &(b'N' as i8), &ni, &ni, l.as_ptr(), &ni, x.as_mut_ptr(), &ni, &mut info);
        }
        info == 0 && (l.transpose() * &x - &rhs).amax() < 1e-10
    });
    if ok {
        Ok(())
    } else {
        Err(Error::Config(
            "the linked BLAS/LAPACK failed its self-check; with OpenBLAS set OPENBLAS_CORETYPE=Haswell".into(),
        ))
    }
}

fn check(routine: &'static str, info: i32) -> Result<()> {
    if info != 0 {
        Err(Error::Lapack { routine, info })
    } else {
        Ok(())
    }
}

fn square_dim(a: &DMatrix<f64>) -> Result<i32> {
    backend_check()?;
    if a.nrows() != a.ncols() {
        return Err(Error::SizeMismatch {
            what: "square matrix",
            expected: a.nrows(),
            actual: a.ncols(),
        });
    }
    Ok(a.nrows() as i32)
}

fn syevd(mut a: DMatrix<f64>, vectors: bool) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = square_dim(&a)?;
    let mut w = vec![0.0; n as usize];
    if n == 0 {
        return Ok((w, a));
    }
    let jobz = if vectors { b'V' } else { b'N' } as i8;
    let uplo = b'L' as i8;
    let mut info = 0;
    let mut wq = 0.0;
    let mut iwq = 0;
    unsafe {
        lp::dsyevd_(&jobz, &uplo, &n, a.as_mut_ptr(), &n, w.as_mut_ptr(), &mut wq, &-1, &mut iwq, &-1, &mut info);
    }
    check("dsyevd (query)", info)?;
    let lwork = wq as i32;
    let liwork = iwq.max(1);
    let mut work = vec![0.0; lwork.max(1) as usize];
    let mut iwork = vec![0i32; liwork as usize];
    unsafe {
        lp::dsyevd_(
            &jobz,
            &uplo,
            &n,
            a.as_mut_ptr(),
            &n,
            w.as_mut_ptr(),
            work.as_mut_ptr(),
            &lwork,
            iwork.as_mut_ptr(),
            &liwork,
            &mut info,
        );
    }
    check("dsyevd", info)?;
    Ok((w, a))
}

/// Eigenvalues of a symmetric matrix in ascending order (lower triangle used).
pub fn sym_eigvals(a: &DMatrix<f64>) -> Result<Vec<f64>> {
    syevd(a.clone(), false).map(|(w, _)| w)
}

/// Ascending eigenvalues and orthonormal eigenvectors (columns).
pub fn sym_eigh(a: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    syevd(a.clone(), true)
}

/// Lower Cholesky factor of a symmetric positive definite matrix; `None` if
/// the factorisation breaks down.
pub fn cholesky_lower(a: &DMatrix<f64>) -> Result<Option<DMatrix<f64>>> {
    let n = square_dim(a)?;
    let mut l = a.clone();
    let mut info = 0;
    unsafe {
        lp::dpotrf_(&(b'L' as i8), &n, l.as_mut_ptr(), &n, &mut info);
    }
    if info > 0 {
        return Ok(None);
    }
    check("dpotrf", info)?;
    for j in 0..n as usize {
        for i in 0..j {
            l[(i, j)] = 0.0;
        }
    }
    Ok(Some(l))
}

/// Solves `op(L) X = B` in place for lower-triangular `L`; `transpose`
/// selects `Lᵀ`.
pub fn lower_solve(l: &DMatrix<f64>, b: &mut DMatrix<f64>, transpose: bool) -> Result<()> {
    let n = square_dim(l)?;
    if b.nrows() != l.nrows() {
        return Err(Error::SizeMismatch {
            what: "triangular solve right-hand side",
            expected: l.nrows(),
            actual: b.nrows(),
        });
    }
    let nrhs = b.ncols() as i32;
    let trans = if transpose { b'T' } else { b'N' } as i8;
    let mut info = 0;
    unsafe {
        lp::dtrtrs_(&(b'L' as i8), &trans, &(b'N' as i8), &n, &nrhs, l.as_ptr(), &n, b.as_mut_ptr(), &n, &mut info);
    }
    check("dtrtrs", info)
}

/// Generalized problem `A x = λ B x` with `B` symmetric positive definite,
/// reduced to `L⁻¹ A L⁻ᵀ y = λ y` with `B = L Lᵀ`. Eigenvectors are
/// normalised to `xᵀ B x = 1`.
pub fn sym_gen_eigh(a: &DMatrix<f64>, b: &DMatrix<f64>, vectors: bool) -> Result<(Vec<f64>, DMatrix<f64>)> {
    square_dim(a)?;
    if b.shape() != a.shape() {
        return Err(Error::SizeMismatch {
            what: "generalized eigenproblem operands",
            expected: a.nrows(),
            actual: b.nrows(),
        });
    }
    let l = cholesky_lower(b)?
        .ok_or_else(|| Error::Precondition("generalized eigenproblem: B is not positive definite".into()))?;
    // C = L⁻¹ A L⁻ᵀ
    let mut c = a.clone();
    lower_solve(&l, &mut c, false)?;
    let mut ct = c.transpose();
    lower_solve(&l, &mut ct, false)?;
    let c = (&ct + ct.transpose()) * 0.5;
    let (w, mut y) = syevd(c, vectors)?;
    if vectors {
        lower_solve(&l, &mut y, true)?;
    }
    Ok((w, y))
}

/// `log det A` via Cholesky; `None` if `A` is not numerically positive
/// definite.
pub fn cholesky_logdet(a: &DMatrix<f64>) -> Result<Option<f64>> {
    let n = square_dim(a)?;
    let mut l = a.clone();
    let mut info = 0;
    unsafe {
        lp::dpotrf_(&(b'L' as i8), &n, l.as_mut_ptr(), &n, &mut info);
    }
    if info > 0 {
        return Ok(None);
    }
    check("dpotrf", info)?;
    Ok(Some((0..n as usize).map(|i| 2.0 * l[(i, i)].ln()).sum()))
}

/// Inertia and `log |det A|` of a symmetric matrix from a Bunch–Kaufman
/// `LDLᵀ` factorisation (Sylvester's law of inertia).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Inertia {
    pub negative: usize,
    pub zero: usize,
    pub positive: usize,
    pub log_abs_det: f64,
}

pub fn ldlt_inertia(a: &DMatrix<f64>) -> Result<Inertia> {
    let (f, ipiv) = ldlt_factor(a)?;
    Ok(inertia_of(&f, &ipiv))
}

/// Solves `A x = b` for symmetric, possibly indefinite `A` and returns the
/// inertia of `A` from the same factorisation.
pub fn sym_indefinite_solve(a: &DMatrix<f64>, b: &[f64]) -> Result<(Vec<f64>, Inertia)> {
    let (f, ipiv) = ldlt_factor(a)?;
    let inertia = inertia_of(&f, &ipiv);
    if inertia.zero > 0 {
        return Err(Error::Precondition("singular matrix in indefinite solve".into()));
    }
    let n = f.nrows() as i32;
    let mut x = b.to_vec();
    let mut info = 0;
    unsafe {
        lp::dsytrs_(&(b'L' as i8), &n, &1, f.as_ptr(), &n, ipiv.as_ptr(), x.as_mut_ptr(), &n, &mut info);
    }
    check("dsytrs", info)?;
    Ok((x, inertia))
}

/// Solves `A x = b` by Cholesky; `None` if `A` is not positive definite.
pub fn cholesky_solve(a: &DMatrix<f64>, b: &[f64]) -> Result<Option<Vec<f64>>> {
    let n = square_dim(a)?;
    let mut l = a.clone();
    let mut info = 0;
    unsafe {
        lp::dpotrf_(&(b'L' as i8), &n, l.as_mut_ptr(), &n, &mut info);
    }
    if info > 0 {
        return Ok(None);
    }
    check("dpotrf", info)?;
    let mut x = b.to_vec();
    unsafe {
        lp::dpotrs_(&(b'L' as i8), &n, &1, l.as_ptr(), &n, x.as_mut_ptr(), &n, &mut info);
    }
    check("dpotrs", info)?;
    Ok(Some(x))
}

fn ldlt_factor(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<i32>)> {
    let n = square_dim(a)?;
    let mut f = a.clone();
    let mut ipiv = vec![0i32; n as usize];
    let uplo = b'L' as i8;
    let mut info = 0;
    let mut wq = 0.0;
    unsafe {
        lp::dsytrf_(&uplo, &n, f.as_mut_ptr(), &n, ipiv.as_mut_ptr(), &mut wq, &-1, &mut info);
    }
    check("dsytrf (query)", info)?;
    let lwork = (wq as i32).max(1);
    let mut work = vec![0.0; lwork as usize];
    unsafe {
        lp::dsytrf_(&uplo, &n, f.as_mut_ptr(), &n, ipiv.as_mut_ptr(), work.as_mut_ptr(), &lwork, &mut info);
    }
    if info < 0 {
        check("dsytrf", info)?;
    }
    Ok((f, ipiv))
}

fn inertia_of(f: &DMatrix<f64>, ipiv: &[i32]) -> Inertia {
    let mut res = Inertia {
        negative: 0,
        zero: 0,
        positive: 0,
        log_abs_det: 0.0,
    };
    let n = f.nrows();
    let mut k = 0;
    while k < n {
        if ipiv[k] > 0 {
            let dk = f[(k, k)];
            match dk.partial_cmp(&0.0) {
                Some(std::cmp::Ordering::Less) => res.negative += 1,
                Some(std::cmp::Ordering::Greater) => res.positive += 1,
                _ => res.zero += 1,
            }
            res.log_abs_det += dk.abs().ln();
            k += 1;
        } else {
            let (a11, a21, a22) = (f[(k, k)], f[(k + 1, k)], f[(k + 1, k + 1)]);
            let det = a11 * a22 - a21 * a21;
            if det < 0.0 {
                res.negative += 1;
                res.positive += 1;
            } else if det > 0.0 {
                if a11 + a22 > 0.0 {
                    res.positive += 2;
                } else {
                    res.negative += 2;
                }
            } else {
                res.zero += 1;
                if a11 + a22 > 0.0 {
                    res.positive += 1;
                } else {
                    res.negative += 1;
                }
            }
            res.log_abs_det += det.abs().ln();
            k += 2;
        }
    }
    res
}

/// Solves `A X = B` for complex `A` (n×n) and `B` (n×nrhs), both
/// column-major; `B` is overwritten with `X`.
pub fn complex_solve(a: &mut [Complex64], n: usize, b: &mut [Complex64], nrhs: usize) -> Result<()> {
    if a.len() != n * n || b.len() != n * nrhs {
        return Err(Error::SizeMismatch {
            what: "complex solve operands",
            expected: n * n,
            actual: a.len(),
        });
    }
    backend_check()?;
    let mut ipiv = vec![0i32; n];
    let mut info = 0;
    let ni = n as i32;
    let nr = nrhs as i32;
    // Complex64 is repr(C) {re, im}, layout-compatible with the binding type.
    unsafe {
        lp::zgesv_(
            &ni,
            &nr,
            a.as_mut_ptr() as *mut lp::__BindgenComplex<f64>,
            &ni,
            ipiv.as_mut_ptr(),
            b.as_mut_ptr() as *mut lp::__BindgenComplex<f64>,
            &ni,
            &mut info,
        );
    }
    check("zgesv", info)
}

/// Largest absolute eigenvalue bound via the maximum absolute row sum.
pub fn inf_norm(a: &DMatrix<f64>) -> f64 {
    (0..a.nrows())
        .map(|i| a.row(i).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sym(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        (&x + x.transpose()) * 0.5
    }

    #[test]
    fn eigh_residual_and_orthonormality() {
        let a = random_sym(40, 1);
        let (w, v) = sym_eigh(&a).unwrap();
        let r = &a * &v - &v * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(w.clone()));
        assert!(r.amax() < 1e-12);
        let id = v.transpose() * &v - DMatrix::identity(40, 40);
        assert!(id.amax() < 1e-12);
        let w2 = sym_eigvals(&a).unwrap();
        for (x, y) in w.iter().zip(&w2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn generalized_matches_cholesky_transform() {
        let a = random_sym(20, 2);
        let x = random_sym(20, 3);
        let b = &x * &x + DMatrix::identity(20, 20);
        let (w, v) = sym_gen_eigh(&a, &b, true).unwrap();
        let l = b.clone().cholesky().unwrap();
        let linv = l.l().try_inverse().unwrap();
        let c = &linv * &a * linv.transpose();
        let w2 = sym_eigvals(&((&c + c.transpose()) * 0.5)).unwrap();
        for (p, q) in w.iter().zip(&w2) {
            assert!((p - q).abs() < 1e-10);
        }
        let v0 = v.column(0);
        let q = (v0.transpose() * &b * v0)[(0, 0)];
        let res = (&a * v0 - &b * v0 * w[0]).amax();
        assert!(res < 1e-10, "{res}");
        assert!((q - 1.0).abs() < 1e-10, "{q}");
    }

    #[test]
    fn inertia_and_logdet() {
        let a = random_sym(30, 4);
        let w = sym_eigvals(&a).unwrap();
        let inr = ldlt_inertia(&a).unwrap();
        assert_eq!(inr.negative, w.iter().filter(|&&x| x < 0.0).count());
        assert_eq!(inr.positive, w.iter().filter(|&&x| x > 0.0).count());
        let ld: f64 = w.iter().map(|x| x.abs().ln()).sum();
        assert!((inr.log_abs_det - ld).abs() < 1e-9);

        let spd = &a * &a + DMatrix::identity(30, 30);
        let w = sym_eigvals(&spd).unwrap();
        let ld: f64 = w.iter().map(|x| x.ln()).sum();
        assert!((cholesky_logdet(&spd).unwrap().unwrap() - ld).abs() < 1e-9);
        assert!(cholesky_logdet(&a).unwrap().is_none());
    }

    #[test]
    fn complex_solve_roundtrip() {
        let n = 12;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<Complex64> = (0..n * n)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let x: Vec<Complex64> = (0..n).map(|i| Complex64::new(i as f64, 1.0)).collect();
        let mut b = vec![Complex64::new(0.0, 0.0); n];
        for j in 0..n {
            for i in 0..n {
                b[i] += a[j * n + i] * x[j];
            }
        }
        let mut af = a.clone();
        complex_solve(&mut af, n, &mut b, 1).unwrap();
        for i in 0..n {
            assert!((b[i] - x[i]).norm() < 1e-10);
        }
    }

    #[test]
    fn linear_solves() {
        let a = random_sym(40, 9);
        let b: Vec<f64> = (0..40).map(|i| (i as f64).sin()).collect();
        let (x, inertia) = sym_indefinite_solve(&a, &b).unwrap();
        let r = &a * nalgebra::DVector::from_column_slice(&x) - nalgebra::DVector::from_column_slice(&b);
        assert!(r.amax() < 1e-9);
        let w = sym_eigvals(&a).unwrap();
        assert_eq!(inertia.negative, w.iter().filter(|&&x| x < 0.0).count());
        assert!(cholesky_solve(&a, &b).unwrap().is_none());
        let spd = &a * &a + DMatrix::identity(40, 40);
        let x = cholesky_solve(&spd, &b).unwrap().unwrap();
        let r = &spd * nalgebra::DVector::from_column_slice(&x) - nalgebra::DVector::from_column_slice(&b);
        assert!(r.amax() < 1e-10);
    }
}
