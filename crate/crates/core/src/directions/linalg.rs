//! Dense least-squares and principal-axis helpers on top of faer.

use std::str::FromStr;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative singular-value floor shared by every solver.
pub const RCOND: f64 = 1e-10;

/// Below this many usable singular values the median is not a usable
/// noise-level estimate and the hard threshold falls back to `RCOND`.
const MIN_BULK: usize = 8;

/// How the underdetermined least-squares problem is regularized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", content = "lambda")]
pub enum Solver {
    /// Pseudo-inverse keeping singular values above the optimal hard
    /// threshold for an unknown noise level (Gavish and Donoho, 2014).
    #[default]
    GavishDonoho,
    /// Plain minimum-norm pseudo-inverse, cutoff `RCOND * s_max`.
    MinNorm,
    /// Ridge penalty `lambda * |w|^2` on the centered problem.
    Ridge(f64),
}

impl FromStr for Solver {
    type Err = Error;

    /// `gavish-donoho`, `min-norm` or `ridge=LAMBDA`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace('_', "-");
        match s.as_str() {
            "gavish-donoho" | "gd" => Ok(Solver::GavishDonoho),
            "min-norm" | "minnorm" | "pinv" => Ok(Solver::MinNorm),
            _ => {
                let lambda = s
                    .strip_prefix("ridge=")
                    .or_else(|| s.strip_prefix("ridge:"))
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown solver `{s}` (gavish-donoho, min-norm, ridge=LAMBDA)")))?;
                let lambda: f64 = lambda
                    .parse()
                    .map_err(|e| Error::InvalidArgument(format!("ridge lambda: {e}")))?;
                if !(lambda > 0.0 && lambda.is_finite()) {
                    return Err(Error::InvalidArgument("ridge lambda must be positive".into()));
                }
                Ok(Solver::Ridge(lambda))
            }
        }
    }
}

/// `omega(beta)` approximation from Gavish and Donoho (2014).
fn omega(beta: f64) -> f64 {
    0.56 * beta.powi(3) - 0.95 * beta.powi(2) + 1.82 * beta + 1.43
}

/// Largest singular value expected from rounding `n x d` entries of
/// magnitude up to `max_abs` to f32.
fn f32_noise_floor(max_abs: f64, n: usize, d: usize) -> f64 {
    f64::from(f32::EPSILON) * max_abs * ((n as f64).sqrt() + (d as f64).sqrt())
}

/// Singular-value cutoff used by `solver` for a centered `n x d` matrix whose
/// uncentered entries are bounded by `max_abs`. `sv` must be sorted
/// descending.
pub(crate) fn cutoff(solver: Solver, sv: &[f64], n: usize, d: usize, max_abs: f64) -> f64 {
    let smax = sv.first().copied().unwrap_or(0.0);
    let floor = RCOND * smax;
    match solver {
        Solver::GavishDonoho => {
            // Activations are stored as f32; rounding residue is not signal.
            let floor = floor.max(f32_noise_floor(max_abs, n, d));
            // Centering removes one degree of freedom.
            let m = n.saturating_sub(1).max(1);
            let k = m.min(d).min(sv.len());
            if k < MIN_BULK {
                return floor;
            }
            let beta = m.min(d) as f64 / m.max(d) as f64;
            let median = sv[k / 2];
            (omega(beta) * median).max(floor)
        }
        Solver::MinNorm | Solver::Ridge(_) => floor,
    }
}

fn column_means(rows: &[Vec<f64>], d: usize) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut m = vec![0.0; d];
    for r in rows {
        m.iter_mut().zip(r).for_each(|(a, x)| *a += x);
    }
    m.iter_mut().for_each(|a| *a /= n);
    m
}

fn centered(rows: &[Vec<f64>], means: &[f64]) -> Mat<f64> {
    Mat::from_fn(rows.len(), means.len(), |i, j| rows[i][j] - means[j])
}

/// Thin SVD with singular triplets sorted by descending singular value.
pub(crate) struct SortedSvd {
    /// Left singular vectors, one per singular value.
    pub u: Vec<Vec<f64>>,
    pub s: Vec<f64>,
    /// Right singular vectors, one per singular value.
    pub v: Vec<Vec<f64>>,
}

pub(crate) fn svd_sorted(x: &Mat<f64>) -> Result<SortedSvd> {
    let svd = x
        .thin_svd()
        .map_err(|e| Error::DegenerateInput(format!("SVD did not converge: {e:?}")))?;
    let sv = svd.S().column_vector();
    let k = sv.nrows();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let (u, v) = (svd.U(), svd.V());
    Ok(SortedSvd {
        u: order.iter().map(|&c| (0..u.nrows()).map(|r| u[(r, c)]).collect()).collect(),
        s: order.iter().map(|&c| sv[c]).collect(),
        v: order.iter().map(|&c| (0..v.nrows()).map(|r| v[(r, c)]).collect()).collect(),
    })
}

/// Least squares `y ~ X w + b` with an unpenalized intercept. Returns `(w, b)`.
///
/// Centering both sides and solving on the centered system gives the
/// minimum-norm `w` among all minimizers, with `b = mean(y) - w . mean(X)`.
pub fn least_squares(rows: &[Vec<f64>], y: &[f64], solver: Solver) -> Result<(Vec<f64>, f64)> {
    if rows.is_empty() {
        return Err(Error::EmptyInput);
    }
    if rows.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: rows.len(),
            actual: y.len(),
        });
    }
    let d = rows[0].len();
    if let Some(bad) = rows.iter().find(|r| r.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: bad.len(),
        });
    }
    let n = rows.len();
    let xm = column_means(rows, d);
    let ym = y.iter().sum::<f64>() / n as f64;
    let yc: Vec<f64> = y.iter().map(|v| v - ym).collect();

    let svd = svd_sorted(&centered(rows, &xm))?;
    if svd.s.first().copied().unwrap_or(0.0) == 0.0 {
        return Err(Error::DegenerateInput("all inputs are identical".into()));
    }
    let max_abs = rows.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
    let cut = cutoff(solver, &svd.s, n, d, max_abs);
    if svd.s[0] <= cut {
        return Err(Error::DegenerateInput("no singular value above the noise cutoff".into()));
    }
    let mut w = vec![0.0; d];
    for ((s, u), v) in svd.s.iter().zip(&svd.u).zip(&svd.v) {
        if *s <= cut {
            break;
        }
        let scale = match solver {
            Solver::Ridge(lambda) => s / (s * s + lambda),
            _ => 1.0 / s,
        };
        let coef = dot(u, &yc) * scale;
        w.iter_mut().zip(v).for_each(|(a, x)| *a += coef * x);
    }
    let b = ym - dot(&w, &xm);
    Ok((w, b))
}

/// Top-`k` principal axes of the mean-centered rows, unit norm, each flipped
/// so its largest-magnitude component is positive. Returns fewer than `k`
/// axes when the centered data has lower rank.
pub fn principal_axes(rows: &[Vec<f64>], k: usize) -> Result<Vec<Vec<f64>>> {
    if rows.len() < 2 {
        return Err(Error::DegenerateInput(format!("need at least 2 vectors, got {}", rows.len())));
    }
    let d = rows[0].len();
    if let Some(bad) = rows.iter().find(|r| r.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: bad.len(),
        });
    }
    // Sorting makes the result bitwise independent of input order.
    let mut sorted: Vec<&Vec<f64>> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let owned: Vec<Vec<f64>> = sorted.into_iter().cloned().collect();
    let svd = svd_sorted(&centered(&owned, &column_means(&owned, d)))?;
    let smax = svd.s.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return Err(Error::DegenerateInput("all vectors are identical".into()));
    }
    let rank = svd.s.iter().take_while(|&&s| s > RCOND * smax).count();
    if k > rank {
        log::warn!("requested {k} SVD directions but the centered data has rank {rank}");
    }
    Ok((0..k.min(rank))
        .map(|i| {
            let mut v = svd.v[i].clone();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let (imax, _) = v
                .iter()
                .enumerate()
                .fold((0, 0.0f64), |(bi, bm), (i, x)| if x.abs() > bm { (i, x.abs()) } else { (bi, bm) });
            let sign = if v[imax] < 0.0 { -1.0 } else { 1.0 };
            for x in &mut v {
                *x *= sign / norm;
            }
            v
        })
        .collect())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}
