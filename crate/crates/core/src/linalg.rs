//! Small dense linear algebra helpers.
//!
//! The symmetric eigensolver is a cyclic Jacobi sweep. It is meant for the
//! matrices that show up here (lower-level Hessians, congruence products),
//! which are at most a few dozen rows.

use nalgebra::{DMatrix, DVector};

const MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: DVector<f64>,
    /// Column `i` is the unit eigenvector for `values[i]`.
    pub vectors: DMatrix<f64>,
}

impl SymmetricEigen {
    /// Runs cyclic Jacobi rotations until the off-diagonal mass is at
    /// machine precision relative to the Frobenius norm.
    pub fn new(matrix: &DMatrix<f64>) -> Self {
        let n = matrix.nrows();
        assert_eq!(n, matrix.ncols(), "eigen-decomposition needs a square matrix");
        let mut a = matrix.clone();
        // symmetrize; callers pass matrices that are symmetric up to rounding
        for i in 0..n {
            for j in (i + 1)..n {
                let s = 0.5 * (a[(i, j)] + a[(j, i)]);
                a[(i, j)] = s;
                a[(j, i)] = s;
            }
        }
        let mut v = DMatrix::<f64>::identity(n, n);
        let scale = a.norm();

        for _ in 0..MAX_SWEEPS {
            let mut off = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    off += a[(i, j)] * a[(i, j)];
                }
            }
            if off.sqrt() <= f64::EPSILON * scale || off == 0.0 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a[(p, q)];
                    if apq == 0.0 {
                        continue;
                    }
                    let app = a[(p, p)];
                    let aqq = a[(q, q)];
                    let theta = (aqq - app) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;

                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    for k in 0..n {
                        let vkp = v[(k, p)];
                        let vkq = v[(k, q)];
                        v[(k, p)] = c * vkp - s * vkq;
                        v[(k, q)] = s * vkp + c * vkq;
                    }
                }
            }
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
        let values = DVector::from_iterator(n, order.iter().map(|&i| a[(i, i)]));
        let mut vectors = DMatrix::<f64>::zeros(n, n);
        for (col, &i) in order.iter().enumerate() {
            vectors.set_column(col, &v.column(i));
        }
        Self { values, vectors }
    }

    /// Largest eigenvalue magnitude, i.e. the operator norm for symmetric input.
    pub fn spectral_radius(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    pub fn min_abs(&self) -> f64 {
        self.values.iter().fold(f64::INFINITY, |acc, v| acc.min(v.abs()))
    }

    pub fn negative_count(&self) -> usize {
        self.values.iter().filter(|v| **v < 0.0).count()
    }

    /// Solves `A X = B` through the spectral decomposition. Returns `None`
    /// when an eigenvalue is exactly zero.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        if self.values.iter().any(|v| *v == 0.0) {
            return None;
        }
        let mut projected = self.vectors.transpose() * rhs;
        for (i, lambda) in self.values.iter().enumerate() {
            projected.row_mut(i).unscale_mut(*lambda);
        }
        Some(&self.vectors * projected)
    }
}

/// Counts of positive, negative and zero eigenvalues.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Inertia {
    pub positive: usize,
    pub negative: usize,
    pub zero: usize,
}

impl Inertia {
    /// Eigenvalues with `|λ| <= rel_tol * max|λ|` count as zero.
    pub fn from_values(values: &DVector<f64>, rel_tol: f64) -> Self {
        let scale = values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
        let cutoff = rel_tol * scale;
        let mut out = Inertia { positive: 0, negative: 0, zero: 0 };
        for v in values.iter() {
            if v.abs() <= cutoff {
                out.zero += 1;
            } else if *v > 0.0 {
                out.positive += 1;
            } else {
                out.negative += 1;
            }
        }
        out
    }
}

/// Largest singular value of a general matrix, from the eigenvalues of `AᵀA`.
pub fn largest_singular_value(matrix: &DMatrix<f64>) -> f64 {
    let gram = matrix.transpose() * matrix;
    SymmetricEigen::new(&gram).spectral_radius().sqrt()
}

/// `‖A − Aᵀ‖_max ≤ rel_tol · (1 + ‖A‖_max)`.
pub fn is_symmetric(matrix: &DMatrix<f64>, rel_tol: f64) -> bool {
    if matrix.nrows() != matrix.ncols() {
        return false;
    }
    let max_abs = matrix.amax();
    let mut worst = 0.0_f64;
    for i in 0..matrix.nrows() {
        for j in (i + 1)..matrix.ncols() {
            worst = worst.max((matrix[(i, j)] - matrix[(j, i)]).abs());
        }
    }
    worst <= rel_tol * (1.0 + max_abs)
}

/// Max-abs error of `approx` against `reference`, with a unit-floored denominator.
pub fn relative_error(approx: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    let diff = (approx - reference).amax();
    diff / reference.amax().max(1.0)
}

pub fn relative_error_vec(approx: &DVector<f64>, reference: &DVector<f64>) -> f64 {
    let diff = (approx - reference).amax();
    diff / reference.amax().max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix_is_sorted() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, -1.0, 2.0]));
        let e = SymmetricEigen::new(&m);
        assert_eq!(e.values.as_slice(), &[-1.0, 2.0, 3.0]);
        assert_eq!(e.negative_count(), 1);
    }

    #[test]
    fn two_by_two_closed_form() {
        // [[2,1],[1,2]] has eigenvalues 1 and 3
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let e = SymmetricEigen::new(&m);
        assert!((e.values[0] - 1.0).abs() < 1e-14);
        assert!((e.values[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn reconstruction_and_orthogonality() {
        let m = DMatrix::from_row_slice(
            4,
            4,
            &[
                4.0, 1.0, -2.0, 0.5, 1.0, -3.0, 0.0, 1.5, -2.0, 0.0, 1.0, 2.0, 0.5, 1.5, 2.0, 0.0,
            ],
        );
        let e = SymmetricEigen::new(&m);
        let recon = &e.vectors * DMatrix::from_diagonal(&e.values) * e.vectors.transpose();
        assert!((recon - &m).amax() < 1e-12);
        let gram = e.vectors.transpose() * &e.vectors;
        assert!((gram - DMatrix::identity(4, 4)).amax() < 1e-12);
        // trace is invariant
        assert!((e.values.sum() - m.trace()).abs() < 1e-12);
    }

    #[test]
    fn spectral_solve_inverts() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, -4.0]);
        let e = SymmetricEigen::new(&m);
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 1.0, -1.0, 3.0]);
        let x = e.solve(&b).unwrap();
        assert!((&m * x - b).amax() < 1e-12);
    }

    #[test]
    fn inertia_counts() {
        let v = DVector::from_vec(vec![-2.0, 0.0, 1e-20, 5.0]);
        let i = Inertia::from_values(&v, 1e-12);
        assert_eq!(i, Inertia { positive: 1, negative: 1, zero: 2 });
    }

    #[test]
    fn singular_value_of_rotation_scaled() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, -3.0, 3.0, 0.0]);
        assert!((largest_singular_value(&m) - 3.0).abs() < 1e-12);
    }
}
