//! Dense matrices and singular values by one-sided Jacobi rotation.

use super::EquivError;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { rows, cols, data }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                data.push(self.get(r, c));
            }
        }
        Matrix::new(self.cols, self.rows, data)
    }
}

/// Singular values sorted descending, with entries below [`Spectrum::FLOOR`] removed.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Spectrum {
    pub singulars: Vec<f64>,
}

impl Spectrum {
    pub const FLOOR: f64 = 1e-12;

    pub fn from_values(mut values: Vec<f64>) -> Self {
        values.sort_by(|a, b| b.total_cmp(a));
        values.retain(|&v| v >= Self::FLOOR);
        Self { singulars: values }
    }

    pub fn norm(&self) -> f64 {
        self.singulars.iter().map(|s| s * s).sum::<f64>().sqrt()
    }
}

/// Relative L2 distance, zero-padding the shorter spectrum. The denominator is
/// the smaller of the two norms so the measure is symmetric and a uniform
/// scaling by `1 + d` yields exactly `d`.
pub fn spectrum_distance(a: &Spectrum, b: &Spectrum) -> f64 {
    let n = a.singulars.len().max(b.singulars.len());
    let at = |s: &Spectrum, i: usize| s.singulars.get(i).copied().unwrap_or(0.0);
    let diff = (0..n).map(|i| (at(a, i) - at(b, i)).powi(2)).sum::<f64>().sqrt();
    diff / a.norm().min(b.norm()).max(Spectrum::FLOOR)
}

const MAX_SWEEPS: usize = 80;

/// Orthogonalizes the columns of the narrower orientation of `m`; the column
/// norms at convergence are the singular values.
pub fn singular_values(m: &Matrix) -> Result<Spectrum, EquivError> {
    if m.data.iter().any(|v| !v.is_finite()) {
        return Err(EquivError::NonFinite);
    }
    let work = if m.cols > m.rows { m.transpose() } else { m.clone() };
    let (rows, cols) = (work.rows, work.cols);
    // Column-major copy so each column is contiguous.
    let mut a: Vec<Vec<f64>> = (0..cols)
        .map(|c| (0..rows).map(|r| work.get(r, c)).collect())
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&a[p], &a[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for i in 0..rows {
                        alpha += cp[i] * cp[i];
                        beta += cq[i] * cq[i];
                        gamma += cp[i] * cq[i];
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = a.split_at_mut(q);
                let (cp, cq) = (&mut lo[p], &mut hi[0]);
                for i in 0..rows {
                    let x = cp[i];
                    let y = cq[i];
                    cp[i] = c * x - s * y;
                    cq[i] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let values = a
        .iter()
        .map(|col| col.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    Ok(Spectrum::from_values(values))
}
