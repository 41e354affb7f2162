//! Chi-squared detector: distance measure, Gaussian threshold formula,
//! false-alarm rate of a mixture residual, threshold search, and the
//! per-mode (bank of detectors) thresholds.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::gmm::GaussianMode;
use crate::linalg;
use crate::lti::seeded_rng;
use crate::quadrature::{integrate, DoublingOptions};
use crate::residual::ResidualModel;
use crate::special::{gamma_p, gamma_p_inv, std_normal_cdf, std_normal_interval};

/// Alarm rule `z = (r - μ)ᵀ Σ⁻¹ (r - μ) > α`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChiSquaredDetector {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    /// Lower Cholesky factor of `cov`.
    chol: DMatrix<f64>,
    chol_inv: DMatrix<f64>,
    threshold: f64,
}

impl ChiSquaredDetector {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0) {
            return Err(Error::Domain(format!(
                "threshold must be positive, got {threshold}"
            )));
        }
        if cov.shape() != (mean.len(), mean.len()) {
            return Err(Error::dim(
                "cov",
                format!("{0}x{0}", mean.len()),
                format!("{}x{}", cov.nrows(), cov.ncols()),
            ));
        }
        let chol = nalgebra::Cholesky::new(cov.clone())
            .ok_or_else(|| Error::Singular {
                what: "detector covariance".into(),
                condition: linalg::condition_number(&cov),
            })?
            .l();
        let p = mean.len();
        let chol_inv = chol
            .solve_lower_triangular(&DMatrix::identity(p, p))
            .expect("positive diagonal");
        Ok(Self {
            mean,
            cov,
            chol,
            chol_inv,
            threshold,
        })
    }

    /// Detector on a residual model's overall mean and covariance.
    pub fn for_model(model: &ResidualModel, threshold: f64) -> Result<Self> {
        Self::new(
            model.overall_mean.clone(),
            model.overall_cov.clone(),
            threshold,
        )
    }

    pub fn with_threshold(&self, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0) {
            return Err(Error::Domain(format!(
                "threshold must be positive, got {threshold}"
            )));
        }
        Ok(Self {
            threshold,
            ..self.clone()
        })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }
    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }
    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }
    pub fn threshold(&self) -> f64 {
        self.threshold
    }
    pub fn p(&self) -> usize {
        self.mean.len()
    }

    /// Distance measure `z` via the triangular factor.
    pub fn distance(&self, r: &DVector<f64>) -> f64 {
        let y = self
            .chol
            .solve_lower_triangular(&(r - &self.mean))
            .expect("positive diagonal");
        y.norm_squared()
    }

    /// Distance measure from a raw slice, without allocation for p <= 4.
    pub fn distance_slice(&self, r: &[f64]) -> f64 {
        let p = self.p();
        let mut z = 0.0;
        for i in 0..p {
            let mut yi = 0.0;
            for j in 0..=i {
                yi += self.chol_inv[(i, j)] * (r[j] - self.mean[j]);
            }
            z += yi * yi;
        }
        z
    }

    pub fn alarm(&self, r: &DVector<f64>) -> bool {
        self.distance(r) > self.threshold
    }

    /// Mode expressed in whitened coordinates `ρ = 𝒞⁻¹ (r - μ)`.
    fn whiten(&self, mode: &GaussianMode) -> (DVector<f64>, DMatrix<f64>) {
        let m = &self.chol_inv * (&mode.mean - &self.mean);
        let s = linalg::symmetrize(&(&self.chol_inv * &mode.cov * self.chol_inv.transpose()));
        (m, s)
    }
}

/// Lemma-1 threshold `2 P⁻¹(1 - rate, p/2)` for a Gaussian residual.
pub fn gaussian_threshold(p: usize, target_rate: f64) -> Result<f64> {
    if p == 0 {
        return Err(Error::Domain("dimension must be positive".into()));
    }
    if !(target_rate > 0.0 && target_rate < 1.0) {
        return Err(Error::Domain(format!(
            "target rate must lie in (0, 1), got {target_rate}"
        )));
    }
    Ok(2.0 * gamma_p_inv(p as f64 / 2.0, 1.0 - target_rate)?)
}

/// Chi-squared(p) CDF at `alpha`, `P(p/2, alpha/2)`.
pub fn chi_squared_cdf(p: usize, alpha: f64) -> Result<f64> {
    gamma_p(p as f64 / 2.0, alpha / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuadratureMethod {
    #[serde(rename = "closed-form-1d")]
    ClosedForm1d,
    #[serde(rename = "polar-2d")]
    Polar2d,
    #[serde(rename = "spherical-3d")]
    Spherical3d,
    #[serde(rename = "qmc")]
    Qmc,
}

impl QuadratureMethod {
    pub fn for_dim(p: usize) -> Self {
        match p {
            1 => Self::ClosedForm1d,
            2 => Self::Polar2d,
            3 => Self::Spherical3d,
            _ => Self::Qmc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MassOptions {
    pub quadrature: DoublingOptions,
    /// Points for the p > 3 fallback.
    pub qmc_points: usize,
    pub qmc_seed: u64,
}

impl Default for MassOptions {
    fn default() -> Self {
        Self {
            quadrature: DoublingOptions::default(),
            qmc_points: 1 << 20,
            qmc_seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeMass {
    pub mass: f64,
    pub error: f64,
    pub method: QuadratureMethod,
}

/// `∫_0^R r^n exp(-½(a r² - 2 b r + c)) dr` for `n ∈ {1, 2}`, `a > 0`,
/// in closed form.
fn radial_moment(n: u32, a: f64, b: f64, c: f64, radius: f64) -> f64 {
    let sa = a.sqrt();
    let s = 1.0 / sa;
    let r0 = b / a;
    let t0 = -b / sa;
    let t1 = radius * sa - b / sa;
    // exponent values at r = 0 and r = R; both <= 0 up to rounding
    let e0 = (-0.5 * c).exp();
    let e1 = (-0.5 * (a * radius * radius - 2.0 * b * radius + c)).exp();
    let g = (0.5 * (b * b / a - c)).min(0.0).exp();
    let gauss = g * (2.0 * PI).sqrt() * std_normal_interval(t0, t1);
    match n {
        1 => r0 * s * gauss + s * s * (e0 - e1),
        2 => {
            r0 * r0 * s * gauss
                + 2.0 * r0 * s * s * (e0 - e1)
                + s * s * s * (t0 * e0 - t1 * e1 + gauss)
        }
        _ => unreachable!("radial moments implemented for n = 1, 2"),
    }
}

/// Direction-dependent coefficients `(uᵀS⁻¹u, uᵀS⁻¹m)`.
fn ray_coeffs(s_inv: &DMatrix<f64>, s_inv_m: &DVector<f64>, u: &[f64]) -> (f64, f64) {
    let p = u.len();
    let mut a = 0.0;
    let mut b = 0.0;
    for i in 0..p {
        b += u[i] * s_inv_m[i];
        for j in 0..p {
            a += u[i] * s_inv[(i, j)] * u[j];
        }
    }
    (a, b)
}

/// Probability under `mode` of the detector's region `z <= α`.
pub fn mode_mass(
    det: &ChiSquaredDetector,
    mode: &GaussianMode,
    opts: &MassOptions,
) -> Result<ModeMass> {
    let p = det.p();
    if mode.dim() != p {
        return Err(Error::dim("mode", p, mode.dim()));
    }
    let alpha = det.threshold();
    let radius = alpha.sqrt();
    let (m, s) = det.whiten(mode);
    let method = QuadratureMethod::for_dim(p);

    if p == 1 {
        let sd = s[(0, 0)].max(0.0).sqrt();
        let mass = if sd == 0.0 {
            if m[0].abs() <= radius {
                1.0
            } else {
                0.0
            }
        } else {
            std_normal_interval((-radius - m[0]) / sd, (radius - m[0]) / sd)
        };
        return Ok(ModeMass {
            mass: mass.clamp(0.0, 1.0),
            error: 0.0,
            method,
        });
    }
    if p > 3 {
        return qmc_mass(&m, &s, alpha, opts);
    }

    let ch = linalg::cholesky_jittered(&s, "whitened mode covariance")?;
    let s_inv = ch.inverse();
    let s_inv_m = &s_inv * &m;
    let c = m.dot(&s_inv_m);
    let log_det: f64 = ch.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let norm = (-0.5 * (p as f64 * (2.0 * PI).ln() + log_det)).exp();

    let (value, error, converged) = if p == 2 {
        let est = integrate(
            |theta| {
                let u = [theta.cos(), theta.sin()];
                let (a, b) = ray_coeffs(&s_inv, &s_inv_m, &u);
                radial_moment(1, a, b, c, radius)
            },
            0.0,
            2.0 * PI,
            &opts.quadrature,
        );
        (est.value, est.error, est.converged)
    } else {
        let mut worst_inner = 0.0f64;
        let mut inner_ok = true;
        let est = integrate(
            |theta| {
                let (st, ct) = theta.sin_cos();
                let inner = integrate(
                    |phi| {
                        let (sp, cp) = phi.sin_cos();
                        let u = [st * cp, st * sp, ct];
                        let (a, b) = ray_coeffs(&s_inv, &s_inv_m, &u);
                        radial_moment(2, a, b, c, radius)
                    },
                    0.0,
                    2.0 * PI,
                    &opts.quadrature,
                );
                worst_inner = worst_inner.max(inner.error);
                inner_ok &= inner.converged;
                inner.value * st
            },
            0.0,
            PI,
            &opts.quadrature,
        );
        (
            est.value,
            est.error + PI * worst_inner,
            est.converged && inner_ok,
        )
    };
    let mass = norm * value;
    let error = norm * error;
    if !converged {
        return Err(Error::Quadrature {
            mode: 0,
            estimate: mass,
            change: error,
        });
    }
    Ok(ModeMass {
        mass: mass.clamp(0.0, 1.0),
        error,
        method,
    })
}

/// Randomly shifted Halton estimate of `P(|m + L z|² <= α)`, `z ~ N(0, I)`.
fn qmc_mass(
    m: &DVector<f64>,
    s: &DMatrix<f64>,
    alpha: f64,
    opts: &MassOptions,
) -> Result<ModeMass> {
    const PRIMES: [u64; 24] = [
        2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
    ];
    let p = m.len();
    if p > PRIMES.len() {
        return Err(Error::Domain(format!(
            "QMC fallback supports p <= {}",
            PRIMES.len()
        )));
    }
    let l = linalg::sampling_factor(s)?;
    let normal = Normal::standard();
    let replicas = 8usize;
    let per = (opts.qmc_points / replicas).max(1);
    let mut rng = seeded_rng(opts.qmc_seed, 0);
    let shifts: Vec<Vec<f64>> = (0..replicas)
        .map(|_| (0..p).map(|_| rng.random::<f64>()).collect())
        .collect();
    let estimates: Vec<f64> = shifts
        .par_iter()
        .map(|shift| {
            let mut inside = 0usize;
            let mut z = DVector::zeros(p);
            for i in 1..=per as u64 {
                for d in 0..p {
                    let h = (radical_inverse(i, PRIMES[d]) + shift[d]).fract();
                    z[d] = normal.inverse_cdf(h.clamp(1e-16, 1.0 - 1e-16));
                }
                let x = m + &l * &z;
                if x.norm_squared() <= alpha {
                    inside += 1;
                }
            }
            inside as f64 / per as f64
        })
        .collect();
    let mean = estimates.iter().sum::<f64>() / replicas as f64;
    let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (replicas as f64 - 1.0);
    Ok(ModeMass {
        mass: mean.clamp(0.0, 1.0),
        error: (var / replicas as f64).sqrt(),
        method: QuadratureMethod::Qmc,
    })
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut out = 0.0;
    while i > 0 {
        out += (i % base) as f64 * f;
        i /= base;
        f *= inv;
    }
    out
}

/// Outcome of evaluating a threshold on a residual model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningReport {
    pub alpha: f64,
    /// Mixture probabilities π_j, normalised to sum to one.
    pub mode_weights: Vec<f64>,
    /// M_j: probability of the sub-threshold region under mode j.
    pub mode_masses: Vec<f64>,
    pub false_alarm: f64,
    /// α_j of the equivalent per-mode detectors; `None` means infinite.
    pub per_mode_alphas: Vec<Option<f64>>,
    pub quadrature_error_estimate: f64,
    pub method: QuadratureMethod,
}

impl TuningReport {
    /// `Σ π_j (1 - M_j)`, which equals the false-alarm rate.
    pub fn bank_false_alarm(&self) -> f64 {
        self.mode_weights
            .iter()
            .zip(&self.mode_masses)
            .map(|(w, m)| w * (1.0 - m))
            .sum()
    }
}

/// False-alarm rate `1 - Σ π_j M_j` of the detector built on the model's
/// overall moments, with threshold `alpha`.
pub fn false_alarm_rate(model: &ResidualModel, alpha: f64) -> Result<TuningReport> {
    false_alarm_rate_with(model, alpha, &MassOptions::default())
}

pub fn false_alarm_rate_with(
    model: &ResidualModel,
    alpha: f64,
    opts: &MassOptions,
) -> Result<TuningReport> {
    let det = ChiSquaredDetector::for_model(model, alpha)?;
    let modes = model.mixture.modes();
    let masses: Vec<ModeMass> = modes
        .par_iter()
        .enumerate()
        .map(|(j, mode)| {
            mode_mass(&det, mode, opts).map_err(|e| match e {
                Error::Quadrature {
                    estimate, change, ..
                } => Error::Quadrature {
                    mode: j,
                    estimate,
                    change,
                },
                other => other,
            })
        })
        .collect::<Result<_>>()?;
    let total: f64 = modes.iter().map(|m| m.weight).sum();
    let mode_weights: Vec<f64> = modes.iter().map(|m| m.weight / total).collect();
    let mode_masses: Vec<f64> = masses.iter().map(|m| m.mass).collect();
    let inside: f64 = mode_weights
        .iter()
        .zip(&mode_masses)
        .map(|(w, m)| w * m)
        .sum();
    let quad_err: f64 = mode_weights
        .iter()
        .zip(&masses)
        .map(|(w, m)| w * m.error)
        .sum();
    let mut report = TuningReport {
        alpha,
        mode_weights,
        mode_masses,
        false_alarm: (1.0 - inside).clamp(0.0, 1.0),
        per_mode_alphas: Vec::new(),
        quadrature_error_estimate: quad_err,
        method: QuadratureMethod::for_dim(model.p()),
    };
    report.per_mode_alphas = per_mode_thresholds(&report, model.p())?;
    Ok(report)
}

/// Thresholds `α_j = 2 P⁻¹(M_j, p/2)` of per-mode chi-squared detectors
/// with rates `1 - M_j`.
pub fn per_mode_thresholds(report: &TuningReport, p: usize) -> Result<Vec<Option<f64>>> {
    report
        .mode_masses
        .iter()
        .map(|&m| {
            if m >= 1.0 {
                Ok(None)
            } else {
                Ok(Some(2.0 * gamma_p_inv(p as f64 / 2.0, m.max(0.0))?))
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TuneOptions {
    pub rate_tol: f64,
    pub width_tol: f64,
    pub mass: MassOptions,
}

impl Default for TuneOptions {
    fn default() -> Self {
        Self {
            rate_tol: 1e-4,
            width_tol: 1e-10,
            mass: MassOptions::default(),
        }
    }
}

/// Bisection for the threshold whose false-alarm rate is `target`.
pub fn tune_threshold(model: &ResidualModel, target: f64) -> Result<(f64, TuningReport)> {
    tune_threshold_with(model, target, &TuneOptions::default())
}

pub fn tune_threshold_with(
    model: &ResidualModel,
    target: f64,
    opts: &TuneOptions,
) -> Result<(f64, TuningReport)> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Domain(format!(
            "target rate must lie in (0, 1), got {target}"
        )));
    }
    let eval = |alpha: f64| false_alarm_rate_with(model, alpha, &opts.mass);

    let mut hi = model.p() as f64;
    let mut hi_report = eval(hi)?;
    let mut doublings = 0;
    while hi_report.false_alarm >= target {
        hi *= 2.0;
        hi_report = eval(hi)?;
        doublings += 1;
        if doublings > 200 {
            return Err(Error::Domain(format!("no threshold reaches rate {target}")));
        }
    }
    if (hi_report.false_alarm - target).abs() <= opts.rate_tol {
        return Ok((hi, hi_report));
    }
    let mut lo = 0.0;
    let mut best = (hi, hi_report);
    while hi - lo > opts.width_tol {
        let mid = 0.5 * (lo + hi);
        let r = eval(mid)?;
        let gap = r.false_alarm - target;
        if gap.abs() < (best.1.false_alarm - target).abs() {
            best = (mid, r.clone());
        }
        if gap.abs() <= opts.rate_tol {
            return Ok((mid, r));
        }
        // the rate falls as alpha grows
        if gap > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best)
}

/// `(α, 𝒜(α))` pairs over `points` equally spaced thresholds in `(0, alpha_max]`.
pub fn cdf_curve(model: &ResidualModel, alpha_max: f64, points: usize) -> Result<Vec<(f64, f64)>> {
    if !(alpha_max > 0.0) || points == 0 {
        return Err(Error::Domain(
            "cdf curve needs alpha_max > 0 and points > 0".into(),
        ));
    }
    (1..=points)
        .map(|i| {
            let a = alpha_max * i as f64 / points as f64;
            Ok((a, false_alarm_rate(model, a)?.false_alarm))
        })
        .collect()
}

/// Gaussian tail `P(|N(0,1)| > x)`, used by tests and reports.
pub fn two_sided_tail(x: f64) -> f64 {
    2.0 * std_normal_cdf(-x.abs())
}
