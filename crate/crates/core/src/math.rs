//! Small dense linear algebra: skew/vec/Kronecker operators and the
//! affine-invariant metric on the cone of 3×3 symmetric positive-definite
//! matrices.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, SymmetricEigen, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Relative asymmetry accepted (and removed) before an eigendecomposition.
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;

/// Smallest accepted ratio between the extreme eigenvalues of an SPD matrix.
pub const EIGEN_RATIO_FLOOR: f64 = 1e-12;

/// Cross-product matrix: `skew(v) * w == v.cross(&w)`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Kronecker product of a `p×q` and an `r×s` matrix.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (p, q) = a.shape();
    let (r, s) = b.shape();
    let mut out = DMatrix::zeros(p * r, q * s);
    for i in 0..p {
        for j in 0..q {
            out.view_mut((i * r, j * s), (r, s)).copy_from(&(b * a[(i, j)]));
        }
    }
    out
}

/// `vᵀ ⊗ B` for a 3-vector `v` and 3×3 `B`, without heap allocation.
pub fn kron_row3(v: &Vec3, b: &Mat3) -> SMatrix<f64, 3, 9> {
    let mut out = SMatrix::<f64, 3, 9>::zeros();
    for j in 0..3 {
        out.fixed_view_mut::<3, 3>(0, 3 * j).copy_from(&(b * v[j]));
    }
    out
}

/// Column-stacking vectorization.
pub fn vec(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec`] for a `rows×cols` target shape.
pub fn unvec(v: &DVector<f64>, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if v.len() != rows * cols {
        return Err(Error::LengthMismatch {
            left: v.len(),
            right: rows * cols,
        });
    }
    Ok(DMatrix::from_column_slice(rows, cols, v.as_slice()))
}

pub fn vec3x3(m: &Mat3) -> SVector<f64, 9> {
    SVector::<f64, 9>::from_column_slice(m.as_slice())
}

/// Divides `m` by the cube root of its determinant so the result has unit
/// determinant. Returns the scale that was divided out.
pub fn normalize_det(m: &Mat3) -> Result<(Mat3, f64)> {
    let det = m.determinant();
    if !(det.is_finite() && det > 0.0) {
        return Err(Error::DeterminantOutOfTolerance {
            det,
            tolerance: f64::INFINITY,
        });
    }
    let scale = det.cbrt();
    Ok((m / scale, scale))
}

/// A symmetric positive-definite 3×3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpdMat3(Mat3);

impl SpdMat3 {
    pub fn new(m: Mat3) -> Result<Self> {
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("SPD matrix"));
        }
        let norm = m.norm();
        let asymmetry = if norm > 0.0 {
            (m - m.transpose()).norm() / norm
        } else {
            0.0
        };
        if asymmetry > SYMMETRY_TOLERANCE {
            return Err(Error::NotSymmetric { asymmetry });
        }
        let sym = (m + m.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let ev = eig.eigenvalues;
        let max = ev.max();
        let min = ev.min();
        if !(max > 0.0 && min > EIGEN_RATIO_FLOOR * max) {
            return Err(Error::NotPositiveDefinite {
                eigenvalues: [ev[0], ev[1], ev[2]],
            });
        }
        Ok(SpdMat3(sym))
    }

    pub fn identity() -> Self {
        SpdMat3(Mat3::identity())
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn into_inner(self) -> Mat3 {
        self.0
    }

    fn map_eigenvalues(&self, f: impl Fn(f64) -> f64) -> Mat3 {
        let eig = SymmetricEigen::new(self.0);
        let d = Mat3::from_diagonal(&eig.eigenvalues.map(f));
        eig.eigenvectors * d * eig.eigenvectors.transpose()
    }

    pub fn eigenvalues(&self) -> Vec3 {
        SymmetricEigen::new(self.0).eigenvalues
    }

    pub fn inverse(&self) -> SpdMat3 {
        SpdMat3(symmetrize(&self.map_eigenvalues(|x| 1.0 / x)))
    }

    pub fn sqrt(&self) -> SpdMat3 {
        SpdMat3(symmetrize(&self.map_eigenvalues(f64::sqrt)))
    }

    pub fn inv_sqrt(&self) -> SpdMat3 {
        SpdMat3(symmetrize(&self.map_eigenvalues(|x| 1.0 / x.sqrt())))
    }

    /// Principal matrix logarithm (symmetric, possibly indefinite).
    pub fn log(&self) -> Mat3 {
        symmetrize(&self.map_eigenvalues(f64::ln))
    }

    pub fn det(&self) -> f64 {
        self.0.determinant()
    }
}

fn symmetrize(m: &Mat3) -> Mat3 {
    (m + m.transpose()) * 0.5
}

/// Affine-invariant geodesic distance `‖log(A^{-1/2} B A^{-1/2})‖_F`.
pub fn geodesic_distance(a: &SpdMat3, b: &SpdMat3) -> f64 {
    let w = a.inv_sqrt().into_inner();
    let inner = symmetrize(&(w * b.matrix() * w));
    let ev = SymmetricEigen::new(inner).eigenvalues;
    ev.iter().map(|l| l.ln().powi(2)).sum::<f64>().sqrt()
}
