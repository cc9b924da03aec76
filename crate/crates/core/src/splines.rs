//! Clamped cubic B-splines with a knot at every integer year, and the
//! sum-to-zero parameterization of their coefficients.
//!
//! Free coefficients are the first differences `α_h − α_{h−1}` of the
//! constrained coefficient vector. The map `Z` rebuilds `α` from them by a
//! cumulative sum recentred to mean zero, so `Σ α_h = 0` holds exactly and
//! `D·Z = I` for the first-difference operator `D`.

use thiserror::Error;

use crate::math::normal_lpdf;

pub const DEGREE: usize = 3;
const ORDER: usize = DEGREE + 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("window {0}..={1} is shorter than three years")]
    WindowTooShort(i32, i32),
    #[error("time {0} is outside the spline window {1}..={2}")]
    OutOfWindow(f64, i32, i32),
    #[error("expected {expected} free coefficients, got {got}")]
    CoefficientLength { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    pub year_min: i32,
    pub year_max: i32,
    pub knots: Vec<f64>,
    /// Number of basis functions.
    pub h: usize,
    /// `(grid years × h)` row-major basis evaluations on the integer grid.
    pub b: Vec<f64>,
    /// `(h × (h − 1))` row-major map from free to constrained coefficients.
    pub z: Vec<f64>,
    /// `(grid years × (h − 1))` row-major product `B·Z`.
    pub bz: Vec<f64>,
}

impl SplineBasis {
    pub fn grid_len(&self) -> usize {
        (self.year_max - self.year_min + 1) as usize
    }

    pub fn free_len(&self) -> usize {
        self.h - 1
    }

    pub fn b_row(&self, year: i32) -> &[f64] {
        let r = (year - self.year_min) as usize;
        &self.b[r * self.h..(r + 1) * self.h]
    }

    /// Row of `B·Z` for an integer grid year: the linear map from free
    /// coefficients to the trend at that year.
    pub fn bz_row(&self, year: i32) -> &[f64] {
        let k = self.free_len();
        let r = (year - self.year_min) as usize;
        &self.bz[r * k..(r + 1) * k]
    }

    pub fn z_entry(&self, h: usize, k: usize) -> f64 {
        self.z[h * self.free_len() + k]
    }

    /// All `h` basis functions at `t`.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>, SplineError> {
        if !(t >= self.year_min as f64 && t <= self.year_max as f64) {
            return Err(SplineError::OutOfWindow(t, self.year_min, self.year_max));
        }
        let mut out = vec![0.0; self.h];
        let span = self.find_span(t);
        let local = basis_funs(&self.knots, span, t);
        for (j, v) in local.iter().enumerate() {
            out[span - DEGREE + j] = *v;
        }
        Ok(out)
    }

    /// Constrained coefficients `α = Z·free`.
    pub fn constrain(&self, free: &[f64]) -> Result<Vec<f64>, SplineError> {
        self.check_len(free)?;
        let k = self.free_len();
        Ok((0..self.h)
            .map(|h| (0..k).map(|j| self.z[h * k + j] * free[j]).sum())
            .collect())
    }

    /// Trend `Σ_h k_h(t) α_h` with `α = Z·free`.
    pub fn eval_trend(&self, free: &[f64], t: f64) -> Result<f64, SplineError> {
        let basis = self.eval(t)?;
        let alpha = self.constrain(free)?;
        Ok(basis.iter().zip(&alpha).map(|(b, a)| b * a).sum())
    }

    fn check_len(&self, free: &[f64]) -> Result<(), SplineError> {
        if free.len() != self.free_len() {
            return Err(SplineError::CoefficientLength {
                expected: self.free_len(),
                got: free.len(),
            });
        }
        Ok(())
    }

    fn find_span(&self, t: f64) -> usize {
        // Last non-degenerate span when t sits on the right boundary.
        let last = self.h - 1;
        if t >= self.knots[last + 1] {
            return last;
        }
        let mut span = DEGREE;
        while span < last && t >= self.knots[span + 1] {
            span += 1;
        }
        span
    }
}

/// The `ORDER` non-zero basis functions on knot span `span` (de Boor–Cox,
/// triangular form).
fn basis_funs(knots: &[f64], span: usize, t: f64) -> [f64; ORDER] {
    let mut n = [0.0; ORDER];
    let mut left = [0.0; ORDER];
    let mut right = [0.0; ORDER];
    n[0] = 1.0;
    for j in 1..=DEGREE {
        left[j] = t - knots[span + 1 - j];
        right[j] = knots[span + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            let tmp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * tmp;
            saved = left[j - r] * tmp;
        }
        n[j] = saved;
    }
    n
}

/// Cubic B-spline basis with knots at every integer year of
/// `year_min..=year_max`, boundary knots repeated to full multiplicity.
pub fn build_basis(year_min: i32, year_max: i32) -> Result<SplineBasis, SplineError> {
    if year_max - year_min < 3 {
        return Err(SplineError::WindowTooShort(year_min, year_max));
    }
    let mut knots = vec![year_min as f64; DEGREE];
    knots.extend((year_min..=year_max).map(f64::from));
    knots.extend(std::iter::repeat_n(year_max as f64, DEGREE));
    let h = knots.len() - ORDER;
    let k = h - 1;

    let mut z = vec![0.0; h * k];
    for row in 0..h {
        for col in 0..k {
            let step = if row > col { 1.0 } else { 0.0 };
            z[row * k + col] = step - (h - 1 - col) as f64 / h as f64;
        }
    }

    let mut basis = SplineBasis {
        year_min,
        year_max,
        knots,
        h,
        b: Vec::new(),
        z,
        bz: Vec::new(),
    };
    let grid = basis.grid_len();
    let mut b = Vec::with_capacity(grid * h);
    for year in year_min..=year_max {
        b.extend(basis.eval(year as f64).expect("grid year inside window"));
    }
    let mut bz = vec![0.0; grid * k];
    for r in 0..grid {
        for col in 0..k {
            bz[r * k + col] = (0..h).map(|j| b[r * h + j] * basis.z[j * k + col]).sum();
        }
    }
    basis.b = b;
    basis.bz = bz;
    Ok(basis)
}

/// First-difference operator `D` as a dense `((h − 1) × h)` matrix.
pub fn difference_matrix(h: usize) -> Vec<Vec<f64>> {
    (0..h - 1)
        .map(|r| {
            let mut row = vec![0.0; h];
            row[r] = -1.0;
            row[r + 1] = 1.0;
            row
        })
        .collect()
}

/// `Σ_{h≥2} log Normal(α_h − α_{h−1} | 0, σ_Δ²)` with `α = Z·free`.
pub fn diff_penalty(basis: &SplineBasis, free: &[f64], sigma_delta: f64) -> Result<f64, SplineError> {
    let alpha = basis.constrain(free)?;
    Ok(alpha
        .windows(2)
        .map(|w| normal_lpdf(w[1] - w[0], 0.0, sigma_delta))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Recursive Cox–de Boor definition with the 0/0 = 0 convention; the
    /// right boundary is closed for the last basis function.
    fn cox_de_boor(knots: &[f64], i: usize, p: usize, t: f64, last: usize) -> f64 {
        if p == 0 {
            let (a, b) = (knots[i], knots[i + 1]);
            return if (a <= t && t < b) || (i == last && t == b && a < b) {
                1.0
            } else {
                0.0
            };
        }
        let mut v = 0.0;
        let d1 = knots[i + p] - knots[i];
        if d1 > 0.0 {
            v += (t - knots[i]) / d1 * cox_de_boor(knots, i, p - 1, t, last);
        }
        let d2 = knots[i + p + 1] - knots[i + 1];
        if d2 > 0.0 {
            v += (knots[i + p + 1] - t) / d2 * cox_de_boor(knots, i + 1, p - 1, t, last);
        }
        v
    }

    #[test]
    fn dimension_for_2000_2021() {
        let b = build_basis(2000, 2021).unwrap();
        // intervals + degree
        assert_eq!(b.h, 21 + 3);
        assert_eq!(b.h, 24);
        for t in [2000.0, 2003.4, 2010.0, 2020.99, 2021.0] {
            let fast = b.eval(t).unwrap();
            for (i, v) in fast.iter().enumerate() {
                let slow = cox_de_boor(&b.knots, i, DEGREE, t, b.h - 1);
                assert_abs_diff_eq!(*v, slow, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn short_window_and_domain() {
        assert_eq!(build_basis(2000, 2002), Err(SplineError::WindowTooShort(2000, 2002)));
        let b = build_basis(2000, 2003).unwrap();
        assert_eq!(b.h, 6);
        assert!(matches!(b.eval(1999.9), Err(SplineError::OutOfWindow(..))));
        assert!(matches!(b.eval(2003.1), Err(SplineError::OutOfWindow(..))));
        assert!(b.eval_trend(&[0.0; 5], 2004.0).is_err());
    }

    #[test]
    fn z_columns_sum_to_zero_and_invert_differences() {
        let b = build_basis(2000, 2021).unwrap();
        let k = b.free_len();
        for col in 0..k {
            let s: f64 = (0..b.h).map(|r| b.z_entry(r, col)).sum();
            assert_abs_diff_eq!(s, 0.0, epsilon = 1e-12);
        }
        let d = difference_matrix(b.h);
        for (r, row) in d.iter().enumerate() {
            for col in 0..k {
                let dz: f64 = (0..b.h).map(|j| row[j] * b.z_entry(j, col)).sum();
                assert_abs_diff_eq!(dz, if r == col { 1.0 } else { 0.0 }, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_coefficients_give_zero_trend() {
        let b = build_basis(2000, 2021).unwrap();
        for t in [2000.0, 2010.5, 2021.0] {
            assert_eq!(b.eval_trend(&vec![0.0; b.free_len()], t).unwrap(), 0.0);
        }
    }

    #[test]
    fn diff_penalty_at_zero() {
        let b = build_basis(2000, 2021).unwrap();
        let zero = vec![0.0; b.free_len()];
        let p1 = diff_penalty(&b, &zero, 1.0).unwrap();
        assert_abs_diff_eq!(p1, (b.h - 1) as f64 * normal_lpdf(0.0, 0.0, 1.0), epsilon = 1e-12);
        let p2 = diff_penalty(&b, &zero, 2.0).unwrap();
        assert_abs_diff_eq!(p1 - p2, (b.h - 1) as f64 * 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn diff_penalty_matches_termwise_oracle() {
        let b = build_basis(2000, 2021).unwrap();
        let free: Vec<f64> = (0..b.free_len()).map(|i| ((i * 7 + 3) % 11) as f64 / 10.0 - 0.5).collect();
        let sigma: f64 = 0.5;
        // Differences of α are the free coefficients themselves.
        let oracle: f64 = free
            .iter()
            .map(|d| -0.5 * (d / sigma).powi(2) - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln())
            .sum();
        assert_abs_diff_eq!(diff_penalty(&b, &free, sigma).unwrap(), oracle, epsilon = 1e-10);
    }

    #[test]
    fn trend_matches_dense_product() {
        let b = build_basis(2000, 2021).unwrap();
        let free: Vec<f64> = (0..b.free_len()).map(|i| (i as f64 * 0.37).sin()).collect();
        // B·(Z·u) by explicit loops over the grid row for 2010.
        let row = b.b_row(2010);
        let mut oracle = 0.0;
        for h in 0..b.h {
            let mut alpha_h = 0.0;
            for k in 0..b.free_len() {
                alpha_h += b.z_entry(h, k) * free[k];
            }
            oracle += row[h] * alpha_h;
        }
        assert_abs_diff_eq!(b.eval_trend(&free, 2010.0).unwrap(), oracle, epsilon = 1e-12);
        let via_bz: f64 = b.bz_row(2010).iter().zip(&free).map(|(a, c)| a * c).sum();
        assert_abs_diff_eq!(via_bz, oracle, epsilon = 1e-12);
    }
}
