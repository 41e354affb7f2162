//! Residual distribution as a Gaussian mixture: exact enumeration at a
//! finite horizon, iterative convolution with reduction, the steady-state
//! model, and equivalent per-mode Gaussian measurement noises.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{GaussianMode, Gmm, GmmJson, ReductionConfig};
use crate::linalg;
use crate::lti::{residual_weights, settling_horizon, LtiSystem, ResidualWeights};

/// Largest mixture the exact enumerator will build.
pub const EXACT_MODE_GUARD: usize = 1_000_000;

/// Mixed-radix counter over `2k - 1` digits: digits `0..k` range over the
/// measurement-noise modes, digits `k..2k-1` over the system-noise modes.
/// The first digit advances fastest and carries into the next on overflow.
#[derive(Debug, Clone)]
pub struct ModeCounter {
    radices: Vec<usize>,
    digits: Vec<usize>,
    done: bool,
}

impl ModeCounter {
    pub fn new(m1: usize, m2: usize, k: usize) -> Self {
        let mut radices = vec![m1; k];
        radices.extend(std::iter::repeat_n(m2, k.saturating_sub(1)));
        let done = radices.contains(&0);
        Self {
            digits: vec![0; radices.len()],
            radices,
            done,
        }
    }
}

impl Iterator for ModeCounter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let current = self.digits.clone();
        // add one to the first digit, wrapping into the next
        let mut pos = 0;
        loop {
            if pos == self.digits.len() {
                self.done = true;
                break;
            }
            self.digits[pos] += 1;
            if self.digits[pos] < self.radices[pos] {
                break;
            }
            self.digits[pos] = 0;
            pos += 1;
        }
        Some(current)
    }
}

fn zero_noise_or(noise_v: Option<&Gmm>, n: usize) -> Result<Gmm> {
    match noise_v {
        Some(v) if v.dim() != n => Err(Error::dim("noise_v", n, v.dim())),
        Some(v) => Ok(v.clone()),
        None => Ok(Gmm::point_mass(n)),
    }
}

fn check_eta(sys: &LtiSystem, eta: &Gmm) -> Result<()> {
    if eta.dim() != sys.p() {
        return Err(Error::dim("noise_eta", sys.p(), eta.dim()));
    }
    Ok(())
}

/// `m1^k * m2^(k-1)` as a float (it overflows integers quickly).
pub fn exact_mode_count(m1: usize, m2: usize, k: usize) -> f64 {
    (m1 as f64).powi(k as i32) * (m2 as f64).powi(k as i32 - 1)
}

/// Residual mixture at horizon `k` by enumerating every combination of
/// noise modes. `noise_v = None` means no system noise.
pub fn residual_gmm_exact(
    sys: &LtiSystem,
    noise_eta: &Gmm,
    noise_v: Option<&Gmm>,
    k: usize,
) -> Result<Gmm> {
    check_eta(sys, noise_eta)?;
    let v = zero_noise_or(noise_v, sys.n())?;
    let w = residual_weights(sys, k)?;
    let (m1, m2) = (noise_eta.len(), v.len());
    let count = exact_mode_count(m1, m2, k);
    if count > EXACT_MODE_GUARD as f64 {
        return Err(Error::EnumerationGuard {
            count,
            guard: EXACT_MODE_GUARD,
        });
    }
    // Per-term mapped parameters, indexed [κ][mode].
    let map_all = |g: &Gmm, q: &DMatrix<f64>| -> Vec<(f64, DVector<f64>, DMatrix<f64>)> {
        g.modes()
            .iter()
            .map(|m| (m.weight, q * &m.mean, q * &m.cov * q.transpose()))
            .collect()
    };
    let eta_terms: Vec<_> = w.a.iter().map(|a| map_all(noise_eta, a)).collect();
    let v_terms: Vec<_> = w.b.iter().map(|b| map_all(&v, b)).collect();

    let p = sys.p();
    let modes = ModeCounter::new(m1, m2, k)
        .map(|digits| {
            let mut weight = 1.0;
            let mut mean = DVector::zeros(p);
            let mut cov = DMatrix::zeros(p, p);
            for (kappa, &j) in digits.iter().enumerate() {
                let (wj, mj, kj) = if kappa < k {
                    &eta_terms[kappa][j]
                } else {
                    &v_terms[kappa - k][j]
                };
                weight *= wj;
                mean += mj;
                cov += kj;
            }
            GaussianMode::new(weight, mean, linalg::symmetrize(&cov))
        })
        .collect();
    Ok(Gmm::from_parts(p, modes))
}

/// Residual mixture at horizon `k` by repeated independent sums of the
/// mapped noise mixtures, reducing after each sum with `reduction`
/// (thresholds as given, applied per step).
pub fn residual_gmm_iterative(
    sys: &LtiSystem,
    noise_eta: &Gmm,
    noise_v: Option<&Gmm>,
    k: usize,
    reduction: &ReductionConfig,
) -> Result<Gmm> {
    check_eta(sys, noise_eta)?;
    let v = zero_noise_or(noise_v, sys.n())?;
    let w = residual_weights(sys, k)?;
    convolve_terms(noise_eta, noise_v.map(|_| &v), &w, reduction)
}

fn convolve_terms(
    noise_eta: &Gmm,
    noise_v: Option<&Gmm>,
    w: &ResidualWeights,
    reduction: &ReductionConfig,
) -> Result<Gmm> {
    let mut acc = noise_eta.linear_map(&w.a[0])?;
    for a in &w.a[1..] {
        acc = acc
            .independent_sum(&noise_eta.linear_map(a)?)?
            .reduce(reduction);
    }
    if let Some(v) = noise_v {
        for b in &w.b {
            acc = acc.independent_sum(&v.linear_map(b)?)?.reduce(reduction);
        }
    }
    Ok(acc)
}

/// How the steady-state construction picks its reduction thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReductionSpec {
    /// No merging.
    None,
    /// One percent of the residual spread.
    Auto,
    /// Final-threshold budget; each of the `k*` steps uses `1/k*` of it.
    Fixed(ReductionConfig),
}

/// Steady-state residual mixture and its overall moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualModel {
    pub mixture: Gmm,
    pub overall_mean: DVector<f64>,
    pub overall_cov: DMatrix<f64>,
    pub k_star: usize,
    /// Final-threshold budget (before the per-step split).
    pub reduction: ReductionConfig,
    /// log10 of `m1^k* * m2^(k*-1)`.
    pub mode_count_exact_log10: f64,
    /// Exact count when it fits in an integer.
    pub mode_count_exact: Option<u128>,
}

impl ResidualModel {
    /// Wraps a mixture, computing its overall moments. The overall
    /// covariance must be positive definite.
    pub fn from_mixture(
        mixture: Gmm,
        k_star: usize,
        reduction: ReductionConfig,
        m1: usize,
        m2: usize,
    ) -> Result<Self> {
        let (overall_mean, overall_cov) = mixture.moments();
        if nalgebra::Cholesky::new(overall_cov.clone()).is_none() {
            return Err(Error::Singular {
                what: "residual covariance".into(),
                condition: linalg::condition_number(&overall_cov),
            });
        }
        let exact_log10 =
            k_star as f64 * (m1 as f64).log10() + (k_star as f64 - 1.0) * (m2 as f64).log10();
        let mode_count_exact = (m1 as u128).checked_pow(k_star as u32).and_then(|a| {
            (m2 as u128)
                .checked_pow(k_star as u32 - 1)
                .and_then(|b| a.checked_mul(b))
        });
        Ok(Self {
            mixture,
            overall_mean,
            overall_cov,
            k_star,
            reduction,
            mode_count_exact_log10: exact_log10,
            mode_count_exact,
        })
    }

    pub fn p(&self) -> usize {
        self.mixture.dim()
    }

    pub fn to_json(&self) -> ResidualModelJson {
        ResidualModelJson {
            mixture: self.mixture.to_json(),
            overall_mean: self.overall_mean.iter().copied().collect(),
            overall_cov: linalg::to_rows(&self.overall_cov),
            k_star: self.k_star,
            reduction: self.reduction,
            mode_count: self.mixture.len(),
            mode_count_exact_log10: self.mode_count_exact_log10,
            mode_count_exact: self.mode_count_exact.map(|c| c.to_string()),
        }
    }

    pub fn from_json(doc: &ResidualModelJson) -> Result<Self> {
        let mixture = Gmm::from_json(&doc.mixture)?;
        let (overall_mean, overall_cov) = mixture.moments();
        if nalgebra::Cholesky::new(overall_cov.clone()).is_none() {
            return Err(Error::config(
                "overall_cov",
                "residual covariance is not positive definite",
            ));
        }
        let mode_count_exact = match &doc.mode_count_exact {
            Some(s) => Some(
                s.parse::<u128>()
                    .map_err(|_| Error::config("mode_count_exact", "not an integer"))?,
            ),
            None => None,
        };
        Ok(Self {
            mixture,
            overall_mean,
            overall_cov,
            k_star: doc.k_star,
            reduction: doc.reduction,
            mode_count_exact_log10: doc.mode_count_exact_log10,
            mode_count_exact,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualModelJson {
    pub mixture: GmmJson,
    pub overall_mean: Vec<f64>,
    pub overall_cov: Vec<Vec<f64>>,
    pub k_star: usize,
    pub reduction: ReductionConfig,
    pub mode_count: usize,
    pub mode_count_exact_log10: f64,
    /// Decimal string; absent when it exceeds 128 bits.
    pub mode_count_exact: Option<String>,
}

/// Analytic overall moments of the residual at horizon `k`, straight from
/// the noise moments (no mixture construction).
pub fn residual_moments(
    sys: &LtiSystem,
    noise_eta: &Gmm,
    noise_v: Option<&Gmm>,
    k: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_eta(sys, noise_eta)?;
    let v = zero_noise_or(noise_v, sys.n())?;
    let w = residual_weights(sys, k)?;
    let (me, ce) = noise_eta.moments();
    let (mv, cv) = v.moments();
    let p = sys.p();
    let mut mean = DVector::zeros(p);
    let mut cov = DMatrix::zeros(p, p);
    for a in &w.a {
        mean += a * &me;
        cov += a * &ce * a.transpose();
    }
    for b in &w.b {
        mean += b * &mv;
        cov += b * &cv * b.transpose();
    }
    Ok((mean, linalg::symmetrize(&cov)))
}

/// Steady-state residual model at the settling horizon for `tail_tol`.
pub fn steady_state_residual(
    sys: &LtiSystem,
    noise_eta: &Gmm,
    noise_v: Option<&Gmm>,
    tail_tol: f64,
    reduction: ReductionSpec,
) -> Result<ResidualModel> {
    let k_star = settling_horizon(sys, tail_tol)?;
    residual_model_at(sys, noise_eta, noise_v, k_star, reduction)
}

/// Residual model at an explicit horizon `k_star`.
pub fn residual_model_at(
    sys: &LtiSystem,
    noise_eta: &Gmm,
    noise_v: Option<&Gmm>,
    k_star: usize,
    reduction: ReductionSpec,
) -> Result<ResidualModel> {
    let budget = match reduction {
        ReductionSpec::None => ReductionConfig::none(),
        ReductionSpec::Fixed(cfg) => cfg,
        ReductionSpec::Auto => {
            let moments = residual_moments(sys, noise_eta, noise_v, k_star)?;
            ReductionConfig::auto(&moments)
        }
    };
    let per_step = budget.scaled(1.0 / k_star as f64);
    let mixture = residual_gmm_iterative(sys, noise_eta, noise_v, k_star, &per_step)?;
    let m2 = noise_v.map(|v| v.len()).unwrap_or(1);
    ResidualModel::from_mixture(mixture, k_star, budget, noise_eta.len(), m2)
}

/// Per-mode Gaussian measurement noises that reproduce each residual mode.
///
/// `E = Σ_{κ≤k*} A_κ` is the aggregate gain from a persistent measurement
/// offset to the residual. `means[j] = E⁻¹ μ_j` and
/// `covs[j] = E⁻¹ K_j E⁻ᵀ` reproduce mode `j` through that gain.
/// `iid_covs[j]` instead solves `Σ_κ A_κ X A_κᵀ = K_j`, the covariance an iid
/// Gaussian noise must have to reproduce `K_j` through the residual recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivalentNoise {
    pub e: DMatrix<f64>,
    pub condition_number: f64,
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    pub iid_covs: Vec<DMatrix<f64>>,
}

pub fn equivalent_noise(
    model: &ResidualModel,
    sys: &LtiSystem,
    k_star: usize,
) -> Result<EquivalentNoise> {
    if model.p() != sys.p() {
        return Err(Error::dim("model", sys.p(), model.p()));
    }
    let w = residual_weights(sys, k_star)?;
    let p = sys.p();
    let e = w.a.iter().fold(DMatrix::zeros(p, p), |acc, a| acc + a);
    let cond = linalg::condition_number(&e);
    let singular = |what: &str, c: f64| Error::Singular {
        what: what.into(),
        condition: c,
    };
    if !cond.is_finite() || cond > 1e12 {
        return Err(singular("E = sum of A_k", cond));
    }
    let lu = e.clone().lu();
    let e_inv = lu
        .try_inverse()
        .ok_or_else(|| singular("E = sum of A_k", cond))?;

    // Σ_κ (A_κ ⊗ A_κ) vec(X) = vec(K)
    let mut kron = DMatrix::zeros(p * p, p * p);
    for a in &w.a {
        kron += a.kronecker(a);
    }
    let kron_cond = linalg::condition_number(&kron);
    let kron_lu = kron.lu();

    let mut means = Vec::with_capacity(model.mixture.len());
    let mut covs = Vec::with_capacity(model.mixture.len());
    let mut iid_covs = Vec::with_capacity(model.mixture.len());
    for m in model.mixture.modes() {
        means.push(&e_inv * &m.mean);
        covs.push(linalg::symmetrize(&(&e_inv * &m.cov * e_inv.transpose())));
        let vec_k = DVector::from_column_slice(m.cov.as_slice());
        let x = kron_lu
            .solve(&vec_k)
            .ok_or_else(|| singular("sum of A_k (x) A_k", kron_cond))?;
        iid_covs.push(linalg::symmetrize(&DMatrix::from_column_slice(
            p,
            p,
            x.as_slice(),
        )));
    }
    Ok(EquivalentNoise {
        e,
        condition_number: cond,
        means,
        covs,
        iid_covs,
    })
}
