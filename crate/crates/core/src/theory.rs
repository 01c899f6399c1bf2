//! Numeric evaluators for residual-stream variance growth and the gradient
//! upper-estimate product, with and without gating.
//!
//! With gate factor `s_l = 1 - SiLU(alpha_l)` the variance follows
//! `sigma2[l+1] = sigma2[l] * (1 + 1/sigma[l]) * s_l`. Since
//! `x/(1+x) <= ln(1+x) <= x`, the log-variance after `l-1` steps is bracketed
//! termwise by `1/(sigma+1) + min ln s` and `1/sigma + max ln s`.

use serde::Serialize;

use crate::autodiff::GateActivation;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TheoryParams {
    pub sigma1_sq: f64,
    /// One alpha per layer; `alphas[l]` drives the step from layer l to l+1.
    pub alphas: Vec<f64>,
    pub a: f64,
    pub b: f64,
}

impl TheoryParams {
    pub fn uniform(sigma1_sq: f64, alpha: f64, depth: usize, a: f64, b: f64) -> Self {
        Self {
            sigma1_sq,
            alphas: vec![alpha; depth],
            a,
            b,
        }
    }

    pub fn depth(&self) -> usize {
        self.alphas.len()
    }

    /// `ln(1 - SiLU(alpha_l))` per layer; errors where the factor is not positive.
    pub fn log_factors(&self) -> Result<Vec<f64>> {
        self.alphas
            .iter()
            .enumerate()
            .map(|(l, &a)| {
                let f = gate_factor(a);
                if f > 0.0 && f.is_finite() {
                    Ok(f.ln())
                } else {
                    Err(Error::InvalidGate { layer: l + 1, factor: f })
                }
            })
            .collect()
    }

    fn check(&self) -> Result<()> {
        if !(self.sigma1_sq > 0.0 && self.sigma1_sq.is_finite()) {
            return Err(Error::Config(format!("sigma1_sq must be positive, got {}", self.sigma1_sq)));
        }
        if self.alphas.is_empty() {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        Ok(())
    }
}

/// `1 - SiLU(alpha)`.
pub fn gate_factor(alpha: f64) -> f64 {
    GateActivation::Silu.scale(alpha)
}

/// σ² for layers 1..=L.
pub fn variance_recurrence(p: &TheoryParams) -> Result<Vec<f64>> {
    p.check()?;
    let logs = p.log_factors()?;
    let mut out = Vec::with_capacity(p.depth());
    let mut s2 = p.sigma1_sq;
    out.push(s2);
    for &lf in &logs[..p.depth() - 1] {
        s2 = s2 * (1.0 + 1.0 / s2.sqrt()) * lf.exp();
        out.push(s2);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Bounds {
    pub sigma_sq: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// min / max over layers of ln(1 - SiLU(alpha)).
    pub l_alpha: f64,
    pub m_alpha: f64,
    /// Calibration constant making both bounds exact at layer 1.
    pub c: f64,
}

/// Evaluates both log-variance bounds along the realised trajectory.
pub fn variance_bounds(p: &TheoryParams) -> Result<Bounds> {
    let sigma_sq = variance_recurrence(p)?;
    let logs = p.log_factors()?;
    let l_alpha = logs.iter().copied().fold(f64::INFINITY, f64::min);
    let m_alpha = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let base = p.sigma1_sq.ln();
    // both sums are empty at layer 1, so the anchor is met with C = 0
    let c = 0.0;
    let (mut lo, mut hi) = (0.0, 0.0);
    let mut lower = Vec::with_capacity(sigma_sq.len());
    let mut upper = Vec::with_capacity(sigma_sq.len());
    for (k, s2) in sigma_sq.iter().enumerate() {
        lower.push(base + lo + c);
        upper.push(base + hi + c);
        if k + 1 < sigma_sq.len() {
            let s = s2.sqrt();
            lo += 1.0 / (s + 1.0) + l_alpha;
            hi += 1.0 / s + m_alpha;
        }
    }
    Ok(Bounds {
        sigma_sq,
        lower,
        upper,
        l_alpha,
        m_alpha,
        c,
    })
}

/// Running `prod_{l<k} (1 + A/sigma_l + B/sigma_l^2)` for k = 1..=L; the
/// first entry is the empty product.
pub fn grad_up_product(sigma_sq: &[f64], a: f64, b: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(sigma_sq.len());
    let mut acc = 1.0;
    for (k, s2) in sigma_sq.iter().enumerate() {
        out.push(acc);
        if k + 1 < sigma_sq.len() {
            acc *= 1.0 + a / s2.sqrt() + b / s2;
        }
    }
    out
}

/// One trajectory flattened into CSV rows.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoryRow {
    pub depth: usize,
    pub layer: usize,
    pub sigma_sq: f64,
    pub lower: f64,
    pub upper: f64,
    pub up_product: f64,
    pub regime: String,
}

pub const THEORY_CSV_HEADER: &str = "depth,layer,sigma_sq,lower,upper,up_product,regime";

pub fn trajectory_rows(p: &TheoryParams, regime: &str) -> Result<Vec<TheoryRow>> {
    let b = variance_bounds(p)?;
    let up = grad_up_product(&b.sigma_sq, p.a, p.b);
    Ok((0..p.depth())
        .map(|l| TheoryRow {
            depth: p.depth(),
            layer: l + 1,
            sigma_sq: b.sigma_sq[l],
            lower: b.lower[l],
            upper: b.upper[l],
            up_product: up[l],
            regime: regime.into(),
        })
        .collect())
}

pub fn rows_to_csv(rows: &[TheoryRow]) -> String {
    let mut s = String::from(THEORY_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s += &format!(
            "{},{},{},{},{},{},{}\n",
            r.depth, r.layer, r.sigma_sq, r.lower, r.upper, r.up_product, r.regime
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegimePoint {
    pub depth: usize,
    pub sigma_sq_preln: f64,
    pub sigma_sq_gpas: f64,
    pub log_up_preln: f64,
    pub log_up_gpas: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegimeReport {
    pub points: Vec<RegimePoint>,
    /// Smallest c with log UP_preln(L) <= c·L over the depths evaluated.
    pub preln_linear_coef: f64,
    /// Least-squares slope of ln(log UP_preln) against ln L; below 1 means
    /// sublinear growth.
    pub preln_loglog_slope: f64,
    pub gpas_loglog_slope: f64,
}

fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(_, &y)| y > 0.0)
        .map(|(&x, &y)| (x.ln(), y.ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Runs the un-gated (alpha = 0) and gated trajectories at each depth and
/// compares the final variance and log UP product.
pub fn regime_compare(depths: &[usize], alpha_gpas: f64, sigma1_sq: f64, a: f64, b: f64) -> Result<RegimeReport> {
    if !(alpha_gpas > 0.0) {
        return Err(Error::Config(format!("alpha_gpas must be positive, got {alpha_gpas}")));
    }
    let mut points = Vec::with_capacity(depths.len());
    for &d in depths {
        let run = |alpha: f64| -> Result<(f64, f64)> {
            let s = variance_recurrence(&TheoryParams::uniform(sigma1_sq, alpha, d, a, b))?;
            let up = grad_up_product(&s, a, b);
            Ok((*s.last().unwrap(), up.last().unwrap().ln()))
        };
        let (sp, up_p) = run(0.0)?;
        let (sg, up_g) = run(alpha_gpas)?;
        points.push(RegimePoint {
            depth: d,
            sigma_sq_preln: sp,
            sigma_sq_gpas: sg,
            log_up_preln: up_p,
            log_up_gpas: up_g,
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.depth as f64).collect();
    let pre: Vec<f64> = points.iter().map(|p| p.log_up_preln).collect();
    let gp: Vec<f64> = points.iter().map(|p| p.log_up_gpas).collect();
    Ok(RegimeReport {
        preln_linear_coef: points
            .iter()
            .map(|p| p.log_up_preln / p.depth as f64)
            .fold(0.0, f64::max),
        preln_loglog_slope: loglog_slope(&xs, &pre),
        gpas_loglog_slope: loglog_slope(&xs, &gp),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_iteration() {
        let s = variance_recurrence(&TheoryParams::uniform(1.0, 0.0, 3, 1.0, 1.0)).unwrap();
        assert_eq!(s[0], 1.0);
        assert_eq!(s[1], 2.0);
        assert!((s[2] - (2.0 + 2f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn invalid_gate_is_rejected() {
        // 1 - SiLU(2) < 0
        let r = variance_recurrence(&TheoryParams::uniform(1.0, 2.0, 3, 1.0, 1.0));
        assert!(matches!(r, Err(Error::InvalidGate { layer: 1, .. })));
    }

    #[test]
    fn up_product_small_case() {
        assert_eq!(grad_up_product(&[1.0, 1.0], 1.0, 1.0), vec![1.0, 3.0]);
        assert!(grad_up_product(&[1.0, 4.0, 9.0], 0.0, 0.0).iter().all(|&u| u == 1.0));
    }

    #[test]
    fn bounds_anchor_at_first_layer() {
        let b = variance_bounds(&TheoryParams::uniform(2.5, 1.0, 5, 1.0, 1.0)).unwrap();
        assert_eq!(b.lower[0], 2.5f64.ln());
        assert_eq!(b.upper[0], 2.5f64.ln());
        assert!((b.l_alpha - (-1.3132616875182228)).abs() < 1e-12);
        assert_eq!(b.l_alpha, b.m_alpha);
    }
}
