//! Minimax polynomial approximations of `2^x` on `[0, 1)`.
//!
//! The constant term is pinned to `1.0` so that `p(0) == 1` exactly, which
//! keeps integer arguments exact once the exponent field is spliced in.
//! The remaining coefficients minimise the maximum *relative* error and are
//! found with a Remez exchange. Because the error vanishes at `x = 0`, the
//! reference set lives in `(0, 1]` and has `degree + 1` points.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const EXCHANGE_MAX_ITERS: usize = 60;
const EXCHANGE_GRID: usize = 100_000;
const EXCHANGE_TOL: f64 = 1e-9;
const LAWSON_ITERS: usize = 400;
const CERTIFY_GRID: usize = 1 << 20;

/// A polynomial approximation of `2^x` for `x in [0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Poly2x {
    degree: usize,
    coeffs: Vec<f32>,
    certified_max_rel_err: f64,
}

impl Poly2x {
    /// Builds a polynomial from explicit coefficients `p_0..p_n`.
    ///
    /// `p_0` must be exactly `1.0`. The certified error is measured on a
    /// dense grid of the single-precision evaluation.
    pub fn from_coeffs(coeffs: Vec<f32>) -> Result<Self> {
        let degree = coeffs.len().saturating_sub(1);
        if !(3..=5).contains(&degree) {
            return Err(Error::UnsupportedDegree(degree));
        }
        if coeffs[0] != 1.0 {
            return Err(Error::InvalidArgument(format!(
                "constant coefficient must be exactly 1.0, got {}",
                coeffs[0]
            )));
        }
        let mut poly = Self {
            degree,
            coeffs,
            certified_max_rel_err: f64::NAN,
        };
        poly.certified_max_rel_err = poly.measure_max_rel_err(CERTIFY_GRID);
        Ok(poly)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn coeffs(&self) -> &[f32] {
        &self.coeffs
    }

    /// Max relative error of the single-precision evaluation over a dense
    /// grid of `[0, 1)`, recorded when the polynomial was built.
    pub fn certified_max_rel_err(&self) -> f64 {
        self.certified_max_rel_err
    }

    /// Horner evaluation with fused multiply-adds in single precision.
    #[inline]
    pub fn eval(&self, x: f32) -> f32 {
        let mut acc = self.coeffs[self.degree];
        for &c in self.coeffs[..self.degree].iter().rev() {
            acc = acc.mul_add(x, c);
        }
        acc
    }

    fn measure_max_rel_err(&self, n: usize) -> f64 {
        (0..n)
            .map(|i| {
                let x = (i as f64 / n as f64) as f32;
                let exact = (x as f64).exp2();
                ((self.eval(x) as f64 - exact) / exact).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Serialises to `{degree, coeffs[], certified_max_rel_err}`.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses the JSON form and re-validates the coefficient invariants.
    ///
    /// The stored certified error is kept as written; use
    /// [`Poly2x::from_coeffs`] to re-measure.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Poly2x = serde_json::from_str(text)?;
        if raw.coeffs.len() != raw.degree + 1 {
            return Err(Error::InvalidArgument(format!(
                "degree {} does not match {} coefficients",
                raw.degree,
                raw.coeffs.len()
            )));
        }
        if !(3..=5).contains(&raw.degree) {
            return Err(Error::UnsupportedDegree(raw.degree));
        }
        if raw.coeffs[0] != 1.0 {
            return Err(Error::InvalidArgument(
                "constant coefficient must be exactly 1.0".into(),
            ));
        }
        Ok(raw)
    }
}

/// Fits the minimax relative-error polynomial of the given degree.
///
/// Deterministic for a given degree. Falls back to Lawson's iteratively
/// reweighted least squares if the exchange cannot find an alternating set.
pub fn fit_minimax(degree: usize) -> Result<Poly2x> {
    if !(3..=5).contains(&degree) {
        return Err(Error::UnsupportedDegree(degree));
    }
    let tail = match remez_exchange(degree) {
        Ok(tail) => tail,
        Err(Error::FitFailed { .. }) => lawson_fit(degree)?,
        Err(e) => return Err(e),
    };
    let mut coeffs = Vec::with_capacity(degree + 1);
    coeffs.push(1.0f32);
    coeffs.extend(tail.iter().map(|&c| c as f32));
    Poly2x::from_coeffs(coeffs)
}

/// Relative error of `1 + sum c_i x^i` against `2^x`, in double precision.
fn rel_err(tail: &[f64], x: f64) -> f64 {
    let mut acc = 0.0;
    for &c in tail.iter().rev() {
        acc = (acc + c) * x;
    }
    let exact = x.exp2();
    (1.0 + acc - exact) / exact
}

fn solve(a: DMatrix<f64>, b: DVector<f64>) -> Option<DVector<f64>> {
    a.lu().solve(&b)
}

/// Returns the non-constant coefficients `c_1..c_n`.
fn remez_exchange(degree: usize) -> Result<Vec<f64>> {
    let n = degree;
    // Chebyshev-like initial reference on (0, 1], last point at 1.
    let mut refs: Vec<f64> = (0..=n)
        .map(|k| 0.5 * (1.0 - (std::f64::consts::PI * (k + 1) as f64 / (n + 1) as f64).cos()))
        .collect();
    let grid: Vec<f64> = (1..=EXCHANGE_GRID)
        .map(|i| i as f64 / EXCHANGE_GRID as f64)
        .collect();

    for _ in 0..EXCHANGE_MAX_ITERS {
        // sum_i c_i x_k^i - (-1)^k E 2^{x_k} = 2^{x_k} - 1
        let mut a = DMatrix::<f64>::zeros(n + 1, n + 1);
        let mut b = DVector::<f64>::zeros(n + 1);
        for (k, &x) in refs.iter().enumerate() {
            let mut xp = 1.0;
            for i in 0..n {
                xp *= x;
                a[(k, i)] = xp;
            }
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            a[(k, n)] = -sign * x.exp2();
            b[k] = x.exp2() - 1.0;
        }
        let sol = solve(a, b).ok_or(Error::FitFailed { iterations: 0 })?;
        let tail: Vec<f64> = sol.iter().take(n).copied().collect();

        let new_refs = alternating_extrema(&tail, &grid, n + 1)
            .ok_or(Error::FitFailed { iterations: 0 })?;
        let mags: Vec<f64> = new_refs.iter().map(|&x| rel_err(&tail, x).abs()).collect();
        let hi = mags.iter().cloned().fold(0.0, f64::max);
        let lo = mags.iter().cloned().fold(f64::INFINITY, f64::min);
        refs = new_refs;
        if hi > 0.0 && (hi - lo) / hi < EXCHANGE_TOL {
            return Ok(tail);
        }
    }
    Err(Error::FitFailed {
        iterations: EXCHANGE_MAX_ITERS,
    })
}

/// Picks `count` alternating-sign extrema of the error curve on `grid`.
fn alternating_extrema(tail: &[f64], grid: &[f64], count: usize) -> Option<Vec<f64>> {
    // One (position, |err|) per maximal run of constant sign.
    let mut runs: Vec<(f64, f64)> = Vec::new();
    let mut last_sign = 0i8;
    for &x in grid {
        let e = rel_err(tail, x);
        let s = if e > 0.0 {
            1
        } else if e < 0.0 {
            -1
        } else {
            continue;
        };
        if s != last_sign {
            runs.push((x, e.abs()));
            last_sign = s;
        } else if let Some(run) = runs.last_mut() {
            if e.abs() > run.1 {
                *run = (x, e.abs());
            }
        }
    }
    if runs.len() < count {
        return None;
    }
    // Trim the weaker end until exactly `count` alternating points remain.
    while runs.len() > count {
        if runs[0].1 < runs[runs.len() - 1].1 {
            runs.remove(0);
        } else {
            runs.pop();
        }
    }
    Some(runs.into_iter().map(|(x, _)| x).collect())
}

/// Lawson's algorithm: weighted least squares whose weights are pushed
/// towards the points of largest error.
fn lawson_fit(degree: usize) -> Result<Vec<f64>> {
    let n = degree;
    let m = 2_000;
    let xs: Vec<f64> = (1..=m).map(|i| i as f64 / m as f64).collect();
    let mut weights = vec![1.0 / m as f64; m];
    let mut tail = vec![0.0; n];
    for _ in 0..LAWSON_ITERS {
        let mut a = DMatrix::<f64>::zeros(m, n);
        let mut b = DVector::<f64>::zeros(m);
        for (j, &x) in xs.iter().enumerate() {
            let w = weights[j].sqrt();
            let exact = x.exp2();
            let mut xp = 1.0;
            for i in 0..n {
                xp *= x;
                a[(j, i)] = w * xp / exact;
            }
            b[j] = w * (exact - 1.0) / exact;
        }
        let sol = a
            .svd(true, true)
            .solve(&b, 1e-14)
            .map_err(|_| Error::FitFailed {
                iterations: LAWSON_ITERS,
            })?;
        tail = sol.iter().copied().collect();
        let mut total = 0.0;
        for (j, &x) in xs.iter().enumerate() {
            weights[j] *= rel_err(&tail, x).abs();
            total += weights[j];
        }
        if total == 0.0 || !total.is_finite() {
            break;
        }
        weights.iter_mut().for_each(|w| *w /= total);
    }
    if tail.iter().all(|c| c.is_finite()) {
        Ok(tail)
    } else {
        Err(Error::FitFailed {
            iterations: LAWSON_ITERS,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degree_out_of_range() {
        assert!(matches!(fit_minimax(2), Err(Error::UnsupportedDegree(2))));
        assert!(matches!(fit_minimax(6), Err(Error::UnsupportedDegree(6))));
    }

    #[test]
    fn constant_term_is_one_and_p0_exact() {
        for d in 3..=5 {
            let p = fit_minimax(d).unwrap();
            assert_eq!(p.coeffs()[0], 1.0);
            assert_eq!(p.coeffs().len(), d + 1);
            assert_eq!(p.eval(0.0), 1.0);
        }
    }

    #[test]
    fn fit_is_deterministic() {
        assert_eq!(fit_minimax(4).unwrap(), fit_minimax(4).unwrap());
    }

    #[test]
    fn equioscillates_in_double_precision() {
        let p = fit_minimax(3).unwrap();
        let tail: Vec<f64> = p.coeffs()[1..].iter().map(|&c| c as f64).collect();
        let grid: Vec<f64> = (1..=20_000).map(|i| i as f64 / 20_000.0).collect();
        let ext = alternating_extrema(&tail, &grid, 4).unwrap();
        let mags: Vec<f64> = ext.iter().map(|&x| rel_err(&tail, x).abs()).collect();
        let hi = mags.iter().cloned().fold(0.0, f64::max);
        let lo = mags.iter().cloned().fold(f64::INFINITY, f64::min);
        // f32 rounding of the coefficients perturbs the levels slightly.
        assert!((hi - lo) / hi < 0.05, "levels {mags:?}");
    }

    #[test]
    fn lawson_fallback_approaches_minimax() {
        let remez = remez_exchange(3).unwrap();
        let lawson = lawson_fit(3).unwrap();
        let grid: Vec<f64> = (1..=20_000).map(|i| i as f64 / 20_000.0).collect();
        let max_err = |t: &[f64]| grid.iter().map(|&x| rel_err(t, x).abs()).fold(0.0, f64::max);
        let r = max_err(&remez);
        let l = max_err(&lawson);
        assert!(l >= r * 0.999);
        assert!(l < r * 1.5, "lawson {l} vs remez {r}");
    }

    #[test]
    fn json_round_trip_and_validation() {
        let p = fit_minimax(5).unwrap();
        let back = Poly2x::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(p, back);

        let bad = r#"{"degree":3,"coeffs":[0.5,1.0,0.0,0.0],"certified_max_rel_err":1.0}"#;
        assert!(Poly2x::from_json(bad).is_err());
        let short = r#"{"degree":4,"coeffs":[1.0,1.0,0.0,0.0],"certified_max_rel_err":1.0}"#;
        assert!(Poly2x::from_json(short).is_err());
    }
}
