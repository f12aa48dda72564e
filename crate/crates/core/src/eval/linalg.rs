//! Symmetric eigendecomposition and the PSD square roots built on it.

use crate::{Scalar, Tensor};

use super::{EvalError, Result};

/// Eigenvalues below this (after scaling by the spectrum's magnitude) are an error;
/// those between it and 0 are roundoff and clamp to 0.
pub const NEG_EIG_TOL: f64 = 1e-8;

const MAX_SWEEPS: usize = 64;

fn check_square<T: Scalar>(a: &Tensor<T>) -> Result<usize> {
    match *a.shape() {
        [r, c] if r == c => Ok(r),
        _ => Err(EvalError::Shape(format!("expected a square matrix, got {:?}", a.shape()))),
    }
}

/// Fails unless `a` is symmetric to within roundoff of its largest entry.
pub fn check_symmetric<T: Scalar>(a: &Tensor<T>) -> Result<()> {
    let n = check_square(a)?;
    let tol = T::epsilon() * T::lit(64.0) * a.max_abs().max(T::one());
    for i in 0..n {
        for j in i + 1..n {
            let d = (a.get2(i, j) - a.get2(j, i)).abs();
            if !(d <= tol) {
                return Err(EvalError::NotSymmetric { row: i, col: j, gap: d.to_f64_lossy() });
            }
        }
    }
    Ok(())
}

/// `(A + Aᵀ)/2`.
pub fn symmetrize<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let n = a.rows();
    let half = T::lit(0.5);
    let data = (0..n * n).map(|k| (a.get2(k / n, k % n) + a.get2(k % n, k / n)) * half).collect();
    Tensor::matrix(n, n, data)
}

/// Cyclic Jacobi rotations on a symmetric matrix. Returns eigenvalues and the
/// eigenvectors as the columns of an orthogonal matrix.
pub fn sym_eigen<T: Scalar>(a: &Tensor<T>) -> Result<(Vec<T>, Tensor<T>)> {
    let n = check_square(a)?;
    if !a.is_finite() {
        return Err(EvalError::NonFinite("matrix passed to the eigensolver"));
    }
    let mut m: Vec<T> = a.data().to_vec();
    let mut v = Tensor::<T>::identity(n).into_data();
    let at = |i: usize, j: usize| i * n + j;
    let total = m.iter().map(|&x| x * x).sum::<T>();
    for _ in 0..MAX_SWEEPS {
        let off = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[at(i, j)] * m[at(i, j)]).sum::<T>();
        if off <= T::epsilon() * T::epsilon() * total {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[at(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (m[at(q, q)] - m[at(p, p)]) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[at(k, p)], m[at(k, q)]);
                    m[at(k, p)] = c * mkp - s * mkq;
                    m[at(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[at(p, k)], m[at(q, k)]);
                    m[at(p, k)] = c * mpk - s * mqk;
                    m[at(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[at(k, p)], v[at(k, q)]);
                    v[at(k, p)] = c * vkp - s * vkq;
                    v[at(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    Ok(((0..n).map(|i| m[at(i, i)]).collect(), Tensor::matrix(n, n, v)))
}

/// Eigenvalues of a PSD matrix with roundoff negatives set to 0.
fn clamp_spectrum<T: Scalar>(eig: &mut [T]) -> Result<()> {
    let scale = eig.iter().fold(T::one(), |m, &x| m.max(x.abs()));
    let tol = T::lit(NEG_EIG_TOL).max(T::epsilon() * T::lit(64.0)) * scale;
    for e in eig.iter_mut() {
        if *e < -tol {
            return Err(EvalError::NotPsd(e.to_f64_lossy()));
        }
        *e = e.max(T::zero());
    }
    Ok(())
}

/// `V f(Λ) Vᵀ`.
fn reassemble<T: Scalar>(vals: &[T], vecs: &Tensor<T>) -> Tensor<T> {
    let n = vals.len();
    let mut out = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i..n {
            let s = (0..n).map(|k| vecs.get2(i, k) * vals[k] * vecs.get2(j, k)).sum::<T>();
            out[i * n + j] = s;
            out[j * n + i] = s;
        }
    }
    Tensor::matrix(n, n, out)
}

/// Principal square root of a symmetric PSD matrix.
pub fn psd_sqrt<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    check_symmetric(a)?;
    let (mut vals, vecs) = sym_eigen(&symmetrize(a))?;
    clamp_spectrum(&mut vals)?;
    let roots: Vec<T> = vals.iter().map(|v| v.sqrt()).collect();
    Ok(reassemble(&roots, &vecs))
}

/// `Tr((Σ₁Σ₂)^{1/2})`, through the symmetric form `Σ₂^{1/2} Σ₁ Σ₂^{1/2}` whose
/// spectrum equals that of `Σ₁Σ₂`.
pub fn psd_sqrt_product<T: Scalar>(s1: &Tensor<T>, s2: &Tensor<T>) -> Result<T> {
    check_symmetric(s1)?;
    if s1.shape() != s2.shape() {
        return Err(EvalError::Shape(format!("{:?} vs {:?}", s1.shape(), s2.shape())));
    }
    let r2 = psd_sqrt(s2)?;
    let inner = r2.matmul(&symmetrize(s1))?.matmul(&r2)?;
    let (mut vals, _) = sym_eigen(&symmetrize(&inner))?;
    clamp_spectrum(&mut vals)?;
    Ok(vals.iter().map(|v| v.sqrt()).sum())
}

#[cfg(test)]
mod tests {
    use nalgebra::DMatrix;
    use rand::{Rng as _, SeedableRng};

    use super::*;
    use crate::Rng;

    fn random_spd(n: usize, rng: &mut Rng) -> Tensor<f64> {
        let b = Tensor::matrix(n, n, (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect());
        let mut a = b.matmul(&b.transpose().unwrap()).unwrap();
        for i in 0..n {
            a.data_mut()[i * n + i] += 0.1;
        }
        a
    }

    #[test]
    fn eigen_matches_nalgebra() {
        let mut rng = Rng::seed_from_u64(9);
        for n in [1, 2, 5, 12] {
            let a = random_spd(n, &mut rng);
            let (mut ours, vecs) = sym_eigen(&a).unwrap();
            ours.sort_by(f64::total_cmp);
            let mut theirs: Vec<f64> = DMatrix::from_row_slice(n, n, a.data()).symmetric_eigen().eigenvalues.iter().copied().collect();
            theirs.sort_by(f64::total_cmp);
            for (x, y) in ours.iter().zip(&theirs) {
                assert!((x - y).abs() < 1e-10 * (1.0 + y.abs()), "{x} {y}");
            }
            let vtv = vecs.transpose().unwrap().matmul(&vecs).unwrap();
            for i in 0..n {
                for j in 0..n {
                    assert!((vtv.get2(i, j) - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn sqrt_squares_back() {
        let mut rng = Rng::seed_from_u64(10);
        let a = random_spd(6, &mut rng);
        let r = psd_sqrt(&a).unwrap();
        let back = r.matmul(&r).unwrap();
        for (x, y) in back.data().iter().zip(a.data()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn product_trace_matches_nalgebra_oracle() {
        let mut rng = Rng::seed_from_u64(11);
        for n in [2, 4, 8] {
            let (a, b) = (random_spd(n, &mut rng), random_spd(n, &mut rng));
            // Oracle: eigenvalues of the (non-symmetric) product are real and
            // nonnegative; Tr of the square root is the sum of their roots.
            let prod = DMatrix::from_row_slice(n, n, a.data()) * DMatrix::from_row_slice(n, n, b.data());
            let expect: f64 = prod.complex_eigenvalues().iter().map(|c| c.re.max(0.0).sqrt()).sum();
            let got = psd_sqrt_product(&a, &b).unwrap();
            assert!((got - expect).abs() < 1e-9 * (1.0 + expect), "{got} {expect}");
        }
    }

    #[test]
    fn rejects_asymmetric_and_indefinite() {
        let asym = Tensor::matrix(2, 2, vec![1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(psd_sqrt_product(&asym, &Tensor::identity(2)), Err(EvalError::NotSymmetric { .. })));
        let indefinite = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, -0.1]);
        assert!(matches!(psd_sqrt(&indefinite), Err(EvalError::NotPsd(_))));
        let roundoff = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, -1e-12]);
        assert_eq!(psd_sqrt(&roundoff).unwrap().get2(1, 1), 0.0);
    }

    #[test]
    fn closed_forms() {
        assert!((psd_sqrt_product(&Tensor::identity(5), &Tensor::<f64>::identity(5)).unwrap() - 5.0).abs() < 1e-14);
        let one = Tensor::matrix(1, 1, vec![1.0f64]);
        let four = Tensor::matrix(1, 1, vec![4.0]);
        assert!((psd_sqrt_product(&one, &four).unwrap() - 2.0).abs() < 1e-15);
        let d1 = Tensor::matrix(2, 2, vec![4.0f64, 0.0, 0.0, 9.0]);
        assert!((psd_sqrt_product(&d1, &Tensor::identity(2)).unwrap() - 5.0).abs() < 1e-14);
    }
}
