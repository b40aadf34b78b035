//! Least-squares latency models `y = alpha x1 + beta x2 + gamma`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitKind {
    Bivariate,
    /// Fitted on `x1` only; `beta` is 0.
    Univariate,
    /// Not fitted: nominal coefficients supplied up front.
    Prior,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub r_squared: f64,
    pub sample_count: usize,
    pub kind: FitKind,
    /// A bivariate fit was requested but the design was rank deficient.
    pub degraded: bool,
}

impl LatencyModel {
    pub fn prior(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self {
            alpha,
            beta,
            gamma,
            r_squared: 0.0,
            sample_count: 0,
            kind: FitKind::Prior,
            degraded: false,
        }
    }

    pub fn predict(&self, x1: f64, x2: f64) -> f64 {
        self.alpha * x1 + self.beta * x2 + self.gamma
    }

    pub fn is_valid_bivariate(&self) -> bool {
        self.kind == FitKind::Bivariate && self.sample_count >= 3
    }
}

fn mean(v: impl Iterator<Item = f64>) -> (f64, usize) {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (s / n.max(1) as f64, n)
}

fn r_squared(samples: &[(f64, f64, f64)], m: &LatencyModel) -> f64 {
    let (ybar, _) = mean(samples.iter().map(|s| s.2));
    let ss_tot: f64 = samples.iter().map(|s| (s.2 - ybar).powi(2)).sum();
    let ss_res: f64 = samples
        .iter()
        .map(|s| (s.2 - m.predict(s.0, s.1)).powi(2))
        .sum();
    if ss_tot <= f64::EPSILON * ybar.abs().max(1.0) * samples.len() as f64 {
        if ss_res <= 1e-24 * samples.len() as f64 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    }
}

/// Ordinary least squares on `y = alpha x + gamma` over `(x, y)` pairs.
/// Needs at least two distinct `x` values.
pub fn fit_univariate(samples: &[(f64, f64)]) -> Result<LatencyModel> {
    let (xbar, n) = mean(samples.iter().map(|s| s.0));
    let (ybar, _) = mean(samples.iter().map(|s| s.1));
    let sxx: f64 = samples.iter().map(|s| (s.0 - xbar).powi(2)).sum();
    if n < 2 || !(sxx > 1e-12 * (1.0 + xbar * xbar) * n as f64) {
        return Err(Error::Guard(
            "univariate fit needs at least two distinct x values".into(),
        ));
    }
    let sxy: f64 = samples.iter().map(|s| (s.0 - xbar) * (s.1 - ybar)).sum();
    let alpha = sxy / sxx;
    let mut m = LatencyModel {
        alpha,
        beta: 0.0,
        gamma: ybar - alpha * xbar,
        r_squared: 0.0,
        sample_count: n,
        kind: FitKind::Univariate,
        degraded: false,
    };
    let triples: Vec<(f64, f64, f64)> = samples.iter().map(|s| (s.0, 0.0, s.1)).collect();
    m.r_squared = r_squared(&triples, &m);
    Ok(m)
}

/// Ordinary least squares on `y = alpha x1 + beta x2 + gamma`.
///
/// A rank-deficient design (for instance constant `x2`) falls back to a
/// univariate fit on `x1` with `beta = 0` and `degraded` set.
pub fn fit_bivariate(samples: &[(f64, f64, f64)]) -> Result<LatencyModel> {
    let n = samples.len();
    let univariate = || -> Result<LatencyModel> {
        let pairs: Vec<(f64, f64)> = samples.iter().map(|s| (s.0, s.2)).collect();
        let mut m = fit_univariate(&pairs)?;
        m.degraded = true;
        Ok(m)
    };
    if n < 3 {
        return univariate();
    }
    let (m1, _) = mean(samples.iter().map(|s| s.0));
    let (m2, _) = mean(samples.iter().map(|s| s.1));
    let (my, _) = mean(samples.iter().map(|s| s.2));
    let (mut s11, mut s12, mut s22, mut s1y, mut s2y) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(x1, x2, y) in samples {
        let (a, b, c) = (x1 - m1, x2 - m2, y - my);
        s11 += a * a;
        s12 += a * b;
        s22 += b * b;
        s1y += a * c;
        s2y += b * c;
    }
    let det = s11 * s22 - s12 * s12;
    if !(s11 > 0.0) || !(s22 > 0.0) || det <= 1e-10 * s11 * s22 {
        return univariate();
    }
    let alpha = (s22 * s1y - s12 * s2y) / det;
    let beta = (s11 * s2y - s12 * s1y) / det;
    let mut m = LatencyModel {
        alpha,
        beta,
        gamma: my - alpha * m1 - beta * m2,
        r_squared: 0.0,
        sample_count: n,
        kind: FitKind::Bivariate,
        degraded: false,
    };
    m.r_squared = r_squared(samples, &m);
    Ok(m)
}
