//! 2-D PCA by power iteration with deflation, used to dump embedding and
//! prototype distributions to CSV for external plotting.

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, Matrix};
use crate::rng::SeededRng;

/// Iteration budget before giving up on an eigendirection.
pub const DEFAULT_MAX_ITERS: usize = 500;
/// Per-iteration change threshold for declaring an eigenvector converged.
const CONVERGENCE_TOL: f64 = 1e-9;
/// Below this, a matrix-vector product is considered annihilated (the
/// remaining spectrum is numerically zero).
const NULL_PRODUCT_EPS: f64 = 1e-14;

/// Mean vector and top-2 principal directions of a fitted point cloud.
#[derive(Debug, Clone)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    pub dirs: [Vec<f64>; 2],
}

impl Pca2 {
    /// Fit on the rows of `data` (needs at least 2 rows).
    pub fn fit(data: &Matrix, max_iters: usize) -> Result<Pca2> {
        if data.n_rows() < 2 {
            return Err(Error::config("PCA needs at least 2 rows"));
        }
        let d = data.n_cols();
        let n = data.n_rows() as f64;

        let mut mean = vec![0.0; d];
        for row in data.rows_iter() {
            axpy(1.0, row, &mut mean);
        }
        for m in &mut mean {
            *m /= n;
        }

        // Covariance of the centered rows (1/N convention).
        let mut cov = Matrix::zeros(d, d);
        for row in data.rows_iter() {
            let c: Vec<f64> = row.iter().zip(&mean).map(|(x, m)| x - m).collect();
            for i in 0..d {
                for j in 0..d {
                    cov.set(i, j, cov.at(i, j) + c[i] * c[j] / n);
                }
            }
        }

        let first = power_iterate(&cov, &[], max_iters)?;
        let second = power_iterate(&cov, &[first.clone()], max_iters)?;
        Ok(Pca2 {
            mean,
            dirs: [first, second],
        })
    }

    /// Coordinates of `v` in the fitted basis.
    pub fn project(&self, v: &[f64]) -> (f64, f64) {
        let c: Vec<f64> = v.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        (dot(&c, &self.dirs[0]), dot(&c, &self.dirs[1]))
    }
}

/// Dominant eigenvector of `cov` orthogonal to every vector in `against`.
fn power_iterate(cov: &Matrix, against: &[Vec<f64>], max_iters: usize) -> Result<Vec<f64>> {
    let d = cov.n_cols();
    let scale_ref = (0..d).map(|i| cov.at(i, i)).sum::<f64>().max(1.0);

    // Deterministic pseudo-random start so a start vector orthogonal to the
    // target eigenvector cannot be constructed by the data.
    let mut rng = SeededRng::new(0x5ca1_ab1e);
    let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    orthogonalize(&mut v, against);
    let nv = norm(&v);
    if nv < NULL_PRODUCT_EPS {
        return Ok(basis_completion(d, against));
    }
    for x in &mut v {
        *x /= nv;
    }

    for _ in 0..max_iters {
        let mut w = cov.matvec(&v);
        orthogonalize(&mut w, against);
        let nw = norm(&w);
        if nw < NULL_PRODUCT_EPS * scale_ref {
            // Remaining spectrum is numerically zero; any orthogonal unit
            // vector is a valid direction. Pick one deterministically.
            return Ok(basis_completion(d, against));
        }
        for x in &mut w {
            *x /= nw;
        }
        // Eigenvectors are defined up to sign.
        let delta_plus: f64 = w.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum();
        let delta_minus: f64 = w.iter().zip(&v).map(|(a, b)| (a + b) * (a + b)).sum();
        let delta = delta_plus.min(delta_minus).sqrt();
        v = w;
        if delta < CONVERGENCE_TOL {
            return Ok(v);
        }
    }
    Err(Error::DidNotConverge(max_iters))
}

fn orthogonalize(v: &mut [f64], against: &[Vec<f64>]) {
    for u in against {
        let p = dot(v, u);
        axpy(-p, u, v);
    }
}

/// Deterministic unit vector orthogonal to `against` (used when the deflated
/// spectrum has collapsed to zero).
fn basis_completion(d: usize, against: &[Vec<f64>]) -> Vec<f64> {
    for axis in 0..d {
        let mut e = vec![0.0; d];
        e[axis] = 1.0;
        orthogonalize(&mut e, against);
        let n = norm(&e);
        if n > 1e-6 {
            for x in &mut e {
                *x /= n;
            }
            return e;
        }
    }
    let mut e = vec![0.0; d];
    e[0] = 1.0;
    e
}

/// Projection of every row of `data` onto its top-2 principal directions.
pub fn pca_project_2d(data: &Matrix) -> Result<Vec<(f64, f64)>> {
    pca_project_2d_with(data, DEFAULT_MAX_ITERS)
}

pub fn pca_project_2d_with(data: &Matrix, max_iters: usize) -> Result<Vec<(f64, f64)>> {
    let pca = Pca2::fit(data, max_iters)?;
    Ok(data.rows_iter().map(|r| pca.project(r)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    /// Full eigendecomposition by cyclic Jacobi, used as an oracle.
    fn jacobi_eigenvalues(mat: &Matrix) -> Vec<f64> {
        let d = mat.n_cols();
        let mut a = mat.clone();
        for _sweep in 0..100 {
            let mut off = 0.0;
            for p in 0..d {
                for q in (p + 1)..d {
                    off += a.at(p, q) * a.at(p, q);
                }
            }
            if off.sqrt() < 1e-13 {
                break;
            }
            for p in 0..d {
                for q in (p + 1)..d {
                    let apq = a.at(p, q);
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let app = a.at(p, p);
                    let aqq = a.at(q, q);
                    let tau = (aqq - app) / (2.0 * apq);
                    let t = if tau >= 0.0 {
                        1.0 / (tau + (1.0 + tau * tau).sqrt())
                    } else {
                        1.0 / (tau - (1.0 + tau * tau).sqrt())
                    };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;
                    // A <- J^T A J with J(p,p)=J(q,q)=c, J(p,q)=s, J(q,p)=-s.
                    for k in 0..d {
                        let akp = a.at(k, p);
                        let akq = a.at(k, q);
                        a.set(k, p, c * akp - s * akq);
                        a.set(k, q, s * akp + c * akq);
                    }
                    for k in 0..d {
                        let apk = a.at(p, k);
                        let aqk = a.at(q, k);
                        a.set(p, k, c * apk - s * aqk);
                        a.set(q, k, s * apk + c * aqk);
                    }
                }
            }
        }
        let mut eig: Vec<f64> = (0..d).map(|i| a.at(i, i)).collect();
        eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
        eig
    }

    fn covariance(data: &Matrix) -> Matrix {
        let d = data.n_cols();
        let n = data.n_rows() as f64;
        let mut mean = vec![0.0; d];
        for row in data.rows_iter() {
            axpy(1.0, row, &mut mean);
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut cov = Matrix::zeros(d, d);
        for row in data.rows_iter() {
            let c: Vec<f64> = row.iter().zip(&mean).map(|(x, m)| x - m).collect();
            for i in 0..d {
                for j in 0..d {
                    cov.set(i, j, cov.at(i, j) + c[i] * c[j] / n);
                }
            }
        }
        cov
    }

    #[test]
    fn rank_one_data_has_negligible_second_component() {
        // Points on a line in 8-D.
        let mut rng = SeededRng::new(5);
        let dir: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|_| {
                let t = rng.normal() * 3.0;
                dir.iter().map(|d| d * t).collect()
            })
            .collect();
        let m = Matrix::from_rows(&rows).unwrap();
        let proj = pca_project_2d(&m).unwrap();
        let s1: f64 = proj.iter().map(|p| p.0 * p.0).sum::<f64>().sqrt();
        let s2: f64 = proj.iter().map(|p| p.1 * p.1).sum::<f64>().sqrt();
        assert!(s2 < 1e-8 * s1, "s1={s1} s2={s2}");
    }

    #[test]
    fn axis_aligned_2d_recovers_x_axis() {
        let mut rng = SeededRng::new(9);
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| vec![3.0 * rng.normal(), 0.5 * rng.normal()])
            .collect();
        let m = Matrix::from_rows(&rows).unwrap();
        let pca = Pca2::fit(&m, DEFAULT_MAX_ITERS).unwrap();
        let d0 = &pca.dirs[0];
        assert!(
            (d0[0].abs() - 1.0).abs() < 1e-6 && d0[1].abs() < 1e-6,
            "first direction {d0:?} is not the x-axis"
        );
    }

    #[test]
    fn directions_unit_norm_and_orthogonal() {
        let mut rng = SeededRng::new(77);
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..8).map(|_| rng.normal()).collect())
            .collect();
        let m = Matrix::from_rows(&rows).unwrap();
        let pca = Pca2::fit(&m, DEFAULT_MAX_ITERS).unwrap();
        assert!((norm(&pca.dirs[0]) - 1.0).abs() < 1e-6);
        assert!((norm(&pca.dirs[1]) - 1.0).abs() < 1e-6);
        assert!(dot(&pca.dirs[0], &pca.dirs[1]).abs() < 1e-6);
    }

    #[test]
    fn projection_variance_matches_jacobi_top2_eigenvalues() {
        let mut rng = SeededRng::new(123);
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..8).map(|_| rng.normal() * 1.5).collect())
            .collect();
        let m = Matrix::from_rows(&rows).unwrap();
        let proj = pca_project_2d(&m).unwrap();
        let n = proj.len() as f64;
        // Projections of centered data are already centered.
        let var: f64 = proj.iter().map(|p| (p.0 * p.0 + p.1 * p.1) / n).sum();

        let eig = jacobi_eigenvalues(&covariance(&m));
        let expected = eig[0] + eig[1];
        assert!(
            (var - expected).abs() < 1e-6,
            "projection variance {var} vs eigen sum {expected}"
        );
    }

    #[test]
    fn too_few_rows_rejected() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(Pca2::fit(&m, 10).is_err());
    }
}
