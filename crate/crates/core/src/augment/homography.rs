//! Planar homographies: exact 4-point and normalized least-squares DLT.

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Homographies with a smaller normalized determinant are treated as singular.
pub const MIN_ABS_DET: f64 = 1e-8;

/// A 3x3 projective transform normalized so that `m[2][2] == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    m: [[f64; 3]; 3],
}

impl Homography {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]],
        }
    }

    /// Normalize and validate an arbitrary 3x3 matrix.
    pub fn new(m: [[f64; 3]; 3]) -> Result<Self> {
        let s = m[2][2];
        if !s.is_finite() || s.abs() < 1e-12 {
            return Err(Error::Degenerate(
                "homography bottom-right entry is zero".into(),
            ));
        }
        let mut n = m;
        for row in &mut n {
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        n[2][2] = 1.0;
        let h = Self { m: n };
        if !h.m.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::Degenerate(
                "homography has non-finite entries".into(),
            ));
        }
        if h.determinant().abs() < MIN_ABS_DET {
            return Err(Error::Degenerate(format!(
                "homography is singular (|det| = {:e})",
                h.determinant().abs()
            )));
        }
        Ok(h)
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        self.m
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Map a point; `None` if it lands on the line at infinity.
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let m = &self.m;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        if w.abs() < 1e-15 {
            return None;
        }
        Some((
            (m[0][0] * x + m[0][1] * y + m[0][2]) / w,
            (m[1][0] * x + m[1][1] * y + m[1][2]) / w,
        ))
    }

    /// Inverse via the adjugate, so exact for identity and translations.
    pub fn inverse(&self) -> Result<Self> {
        let m = &self.m;
        let det = self.determinant();
        if det.abs() < MIN_ABS_DET {
            return Err(Error::invalid("homography is not invertible"));
        }
        let adj = [
            [
                m[1][1] * m[2][2] - m[1][2] * m[2][1],
                m[0][2] * m[2][1] - m[0][1] * m[2][2],
                m[0][1] * m[1][2] - m[0][2] * m[1][1],
            ],
            [
                m[1][2] * m[2][0] - m[1][0] * m[2][2],
                m[0][0] * m[2][2] - m[0][2] * m[2][0],
                m[0][2] * m[1][0] - m[0][0] * m[1][2],
            ],
            [
                m[1][0] * m[2][1] - m[1][1] * m[2][0],
                m[0][1] * m[2][0] - m[0][0] * m[2][1],
                m[0][0] * m[1][1] - m[0][1] * m[1][0],
            ],
        ];
        Self::new(adj).map_err(|_| Error::invalid("homography is not invertible"))
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: &Homography) -> Result<Self> {
        let a = Matrix3::from(self.m).transpose();
        let b = Matrix3::from(first.m).transpose();
        let c = a * b;
        let mut out = [[0.0; 3]; 3];
        for (r, row) in out.iter_mut().enumerate() {
            for (col, v) in row.iter_mut().enumerate() {
                *v = c[(r, col)];
            }
        }
        Self::new(out)
    }

    /// Max absolute entry difference after normalization.
    pub fn max_abs_diff(&self, other: &Homography) -> f64 {
        self.m
            .iter()
            .flatten()
            .zip(other.m.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Exact solve from four correspondences `src[i] -> dst[i]`.
    pub fn from_four_points(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Result<Self> {
        if has_collinear_triple(src) || has_collinear_triple(dst) {
            return Err(Error::Degenerate(
                "three of the four points are collinear".into(),
            ));
        }
        Self::fit(src, dst)
    }

    /// Normalized DLT over `n >= 4` correspondences (least squares when `n > 4`).
    pub fn fit(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Result<Self> {
        let n = src.len();
        if n < 4 || dst.len() != n {
            return Err(Error::invalid(format!(
                "need >= 4 matched points, got {n}/{}",
                dst.len()
            )));
        }
        let (sn, ts) = normalize_points(src)?;
        let (dn, td) = normalize_points(dst)?;

        // Pad to at least 9 rows so the SVD exposes the null vector.
        let rows = (2 * n).max(9);
        let mut a = DMatrix::<f64>::zeros(rows, 9);
        for (i, (p, q)) in sn.iter().zip(&dn).enumerate() {
            let (x, y) = *p;
            let (u, v) = *q;
            let r = 2 * i;
            a[(r, 0)] = -x;
            a[(r, 1)] = -y;
            a[(r, 2)] = -1.0;
            a[(r, 6)] = u * x;
            a[(r, 7)] = u * y;
            a[(r, 8)] = u;
            a[(r + 1, 3)] = -x;
            a[(r + 1, 4)] = -y;
            a[(r + 1, 5)] = -1.0;
            a[(r + 1, 6)] = v * x;
            a[(r + 1, 7)] = v * y;
            a[(r + 1, 8)] = v;
        }
        let svd = a.svd(false, true);
        let vt = svd
            .v_t
            .ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
        let (min_idx, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("nine singular values");
        let h = vt.row(min_idx);
        let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
        let td_inv = td
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("normalization not invertible".into()))?;
        let full = td_inv * hn * ts;
        let mut m = [[0.0; 3]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = full[(r, c)];
            }
        }
        Self::new(m)
    }
}

/// Hartley normalization: centroid to origin, mean distance sqrt(2).
fn normalize_points(pts: &[(f64, f64)]) -> Result<(Vec<(f64, f64)>, Matrix3<f64>)> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let mean_dist = pts
        .iter()
        .map(|p| ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if mean_dist < 1e-12 {
        return Err(Error::Degenerate("all points coincide".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    let t = Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0);
    let out = pts
        .iter()
        .map(|p| {
            let v = t * Vector3::new(p.0, p.1, 1.0);
            (v[0], v[1])
        })
        .collect();
    Ok((out, t))
}

/// Twice the signed triangle area of `a, b, c`.
pub fn cross(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

pub fn has_collinear_triple(pts: &[(f64, f64); 4]) -> bool {
    let scale = pts
        .iter()
        .flat_map(|p| [p.0.abs(), p.1.abs()])
        .fold(1.0f64, f64::max);
    let tol = 1e-9 * scale * scale;
    [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)]
        .iter()
        .any(|&(i, j, k)| cross(pts[i], pts[j], pts[k]).abs() <= tol)
}
