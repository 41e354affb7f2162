//! Expectation-maximisation fit of a full-covariance mixture to samples.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gmm::{GaussianMode, Gmm};
use crate::linalg::{self, outer};
use crate::lti::{seeded_rng, SimRng};

const CHUNK: usize = 4096;
const MIN_WEIGHT: f64 = 1e-8;
const SCREEN_ITERS: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmOptions {
    pub max_iter: usize,
    /// Stop when the mean log-likelihood per sample improves by less than this.
    pub tol: f64,
    /// Independent k-means++ starts; the fit with the best likelihood is kept.
    pub starts: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-8,
            starts: 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub gmm: Gmm,
    /// Mean log-likelihood per sample of the initial mixture.
    pub initial_log_likelihood: f64,
    /// Mean log-likelihood per sample after each EM iteration.
    pub trace: Vec<f64>,
    pub converged: bool,
    /// Number of restarts used (0 or 1).
    pub reseeds: usize,
}

impl EmFit {
    pub fn log_likelihood(&self) -> f64 {
        self.trace
            .last()
            .copied()
            .unwrap_or(self.initial_log_likelihood)
    }
}

struct Component {
    mean: DVector<f64>,
    inv_l: DMatrix<f64>,
    /// log of weight times Gaussian normaliser.
    log_norm: f64,
}

fn prepare(modes: &[GaussianMode]) -> Result<Vec<Component>> {
    modes
        .iter()
        .map(|m| {
            let ch = linalg::cholesky_jittered(&m.cov, "EM covariance")
                .map_err(|_| Error::DegenerateCluster("singular covariance".into()))?;
            let l = ch.l();
            let d = m.dim();
            let inv_l = l
                .clone()
                .solve_lower_triangular(&DMatrix::identity(d, d))
                .ok_or_else(|| Error::DegenerateCluster("singular covariance".into()))?;
            let log_det: f64 = l.diagonal().iter().map(|v| 2.0 * v.ln()).sum();
            Ok(Component {
                mean: m.mean.clone(),
                inv_l,
                log_norm: m.weight.ln()
                    - 0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det),
            })
        })
        .collect()
}

/// Per-chunk sufficient statistics: (log-likelihood, Σγ, Σγx, Σγxxᵀ per component).
struct Stats {
    ll: f64,
    n: Vec<f64>,
    sx: Vec<DVector<f64>>,
    sxx: Vec<DMatrix<f64>>,
}

fn e_step(samples: &[DVector<f64>], comps: &[Component]) -> Stats {
    let k = comps.len();
    let d = samples[0].len();
    let partials: Vec<Stats> = samples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut st = Stats {
                ll: 0.0,
                n: vec![0.0; k],
                sx: vec![DVector::zeros(d); k],
                sxx: vec![DMatrix::zeros(d, d); k],
            };
            let mut logp = vec![0.0; k];
            let mut diff = vec![0.0; d];
            for x in chunk {
                for (j, c) in comps.iter().enumerate() {
                    for (i, di) in diff.iter_mut().enumerate() {
                        *di = x[i] - c.mean[i];
                    }
                    let mut q = 0.0;
                    for i in 0..d {
                        let mut yi = 0.0;
                        for (l, dl) in diff.iter().enumerate().take(i + 1) {
                            yi += c.inv_l[(i, l)] * dl;
                        }
                        q += yi * yi;
                    }
                    logp[j] = c.log_norm - 0.5 * q;
                }
                let max = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in logp.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                st.ll += max + sum.ln();
                for j in 0..k {
                    let g = logp[j] / sum;
                    st.n[j] += g;
                    st.sx[j].axpy(g, x, 1.0);
                    st.sxx[j].ger(g, x, x, 1.0);
                }
            }
            st
        })
        .collect();
    // sequential merge keeps the result independent of thread scheduling
    let mut total = Stats {
        ll: 0.0,
        n: vec![0.0; k],
        sx: vec![DVector::zeros(d); k],
        sxx: vec![DMatrix::zeros(d, d); k],
    };
    for p in partials {
        total.ll += p.ll;
        for j in 0..k {
            total.n[j] += p.n[j];
            total.sx[j] += &p.sx[j];
            total.sxx[j] += &p.sxx[j];
        }
    }
    total
}

fn m_step(stats: &Stats, count: usize) -> Result<Vec<GaussianMode>> {
    let n = count as f64;
    stats
        .n
        .iter()
        .enumerate()
        .map(|(j, &nj)| {
            let weight = nj / n;
            if weight < MIN_WEIGHT {
                return Err(Error::DegenerateCluster(format!(
                    "component {j} weight {weight:e}"
                )));
            }
            let mean = &stats.sx[j] / nj;
            let cov = linalg::symmetrize(&(&stats.sxx[j] / nj - outer(&mean)));
            if linalg::min_eigenvalue(&cov) <= 0.0 {
                return Err(Error::DegenerateCluster(format!(
                    "component {j} covariance is singular"
                )));
            }
            Ok(GaussianMode::new(weight, mean, cov))
        })
        .collect()
}

fn sq_dist(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm_squared()
}

/// k-means++ seeding followed by a hard assignment to build the initial mixture.
fn kmeanspp_init(
    samples: &[DVector<f64>],
    k: usize,
    rng: &mut SimRng,
) -> Result<Vec<GaussianMode>> {
    let n = samples.len();
    let mut centers = vec![samples[rng.random_range(0..n)].clone()];
    let mut dist: Vec<f64> = samples.iter().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, d) in dist.iter().enumerate() {
                if u < *d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        let c = samples[next].clone();
        for (d, x) in dist.iter_mut().zip(samples) {
            *d = d.min(sq_dist(x, &c));
        }
        centers.push(c);
    }

    let d = samples[0].len();
    let mut stats = Stats {
        ll: 0.0,
        n: vec![0.0; k],
        sx: vec![DVector::zeros(d); k],
        sxx: vec![DMatrix::zeros(d, d); k],
    };
    for x in samples {
        let j = (0..k)
            .min_by(|&a, &b| sq_dist(x, &centers[a]).total_cmp(&sq_dist(x, &centers[b])))
            .expect("k >= 1");
        stats.n[j] += 1.0;
        stats.sx[j] += x;
        stats.sxx[j] += outer(x);
    }
    m_step(&stats, n)
}

/// EM state between iterations.
struct Run {
    modes: Vec<GaussianMode>,
    stats: Stats,
    initial: f64,
    trace: Vec<f64>,
    converged: bool,
}

impl Run {
    fn start(samples: &[DVector<f64>], k: usize, rng: &mut SimRng) -> Result<Self> {
        let modes = kmeanspp_init(samples, k, rng)?;
        let stats = e_step(samples, &prepare(&modes)?);
        Ok(Self {
            initial: stats.ll / samples.len() as f64,
            modes,
            stats,
            trace: Vec::new(),
            converged: false,
        })
    }

    fn log_likelihood(&self) -> f64 {
        self.trace.last().copied().unwrap_or(self.initial)
    }

    /// Up to `iters` further iterations, stopping early on convergence.
    fn advance(&mut self, samples: &[DVector<f64>], iters: usize, tol: f64) -> Result<()> {
        let count = samples.len() as f64;
        for _ in 0..iters {
            if self.converged {
                break;
            }
            let prev = self.log_likelihood();
            self.modes = m_step(&self.stats, samples.len())?;
            self.stats = e_step(samples, &prepare(&self.modes)?);
            let ll = self.stats.ll / count;
            self.trace.push(ll);
            self.converged = (ll - prev).abs() < tol;
        }
        Ok(())
    }

    fn finish(self) -> Result<EmFit> {
        Ok(EmFit {
            gmm: Gmm::normalized(self.modes)?,
            initial_log_likelihood: self.initial,
            trace: self.trace,
            converged: self.converged,
            reseeds: 0,
        })
    }
}

/// Fits `mode_count` full-covariance components. Needs at least
/// `10 * mode_count * dim` samples. Runs `opts.starts` k-means++ starts for a
/// few iterations each and continues the most likely one to convergence. If every start hits a degenerate component the
/// whole batch is re-seeded once before the error is reported.
pub fn em_fit(samples: &[DVector<f64>], mode_count: usize, seed: u64) -> Result<EmFit> {
    em_fit_with(samples, mode_count, seed, &EmOptions::default())
}

pub fn em_fit_with(
    samples: &[DVector<f64>],
    mode_count: usize,
    seed: u64,
    opts: &EmOptions,
) -> Result<EmFit> {
    if mode_count == 0 {
        return Err(Error::Domain("mode_count must be at least 1".into()));
    }
    let d = samples.first().map(|x| x.len()).unwrap_or(0);
    if d == 0 {
        return Err(Error::Domain("no samples".into()));
    }
    if let Some((i, x)) = samples.iter().enumerate().find(|(_, x)| x.len() != d) {
        return Err(Error::dim(format!("samples[{i}]"), d, x.len()));
    }
    if samples.len() < 10 * mode_count * d {
        return Err(Error::Domain(format!(
            "need at least {} samples for {mode_count} modes in dimension {d}, got {}",
            10 * mode_count * d,
            samples.len()
        )));
    }
    let starts = opts.starts.max(1) as u64;
    let screen = SCREEN_ITERS.min(opts.max_iter);
    let attempt = |first_stream: u64| -> Result<EmFit> {
        let mut best: Option<Run> = None;
        let mut last_err = None;
        for s in first_stream..first_stream + starts {
            let mut rng = seeded_rng(seed, s);
            let run = Run::start(samples, mode_count, &mut rng).and_then(|mut r| {
                r.advance(samples, screen, opts.tol)?;
                Ok(r)
            });
            match run {
                Ok(r) => {
                    if best
                        .as_ref()
                        .is_none_or(|b| r.log_likelihood() > b.log_likelihood())
                    {
                        best = Some(r);
                    }
                }
                Err(e @ Error::DegenerateCluster(_)) => last_err = Some(e),
                Err(e) => return Err(e),
            }
        }
        let mut run = best.ok_or_else(|| last_err.expect("at least one start"))?;
        run.advance(samples, opts.max_iter - screen, opts.tol)?;
        run.finish()
    };
    match attempt(0) {
        Ok(fit) => Ok(fit),
        Err(Error::DegenerateCluster(_)) => {
            let mut fit = attempt(starts)?;
            fit.reseeds = 1;
            Ok(fit)
        }
        Err(e) => Err(e),
    }
}

/// Reads one sample vector per CSV row (no header). Rows must share a length.
pub fn read_samples_csv(path: &Path) -> Result<Vec<DVector<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut out = Vec::new();
    let mut dim = None;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::config("samples", format!("row {i}: cannot parse `{s}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let d = *dim.get_or_insert(row.len());
        if row.len() != d {
            return Err(Error::config(
                "samples",
                format!("row {i} has {} columns, expected {d}", row.len()),
            ));
        }
        out.push(DVector::from_vec(row));
    }
    if out.is_empty() {
        return Err(Error::config("samples", "file contains no rows"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::tests::table_mixture;

    #[test]
    fn single_component_is_sample_moments() {
        let g = Gmm::single(
            DVector::from_vec(vec![1.0, -2.0]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]),
        )
        .unwrap();
        let xs = g.sample(20_000, 3).unwrap();
        let fit = em_fit(&xs, 1, 0).unwrap();
        let n = xs.len() as f64;
        let mean = xs.iter().fold(DVector::zeros(2), |a, x| a + x) / n;
        let cov = xs
            .iter()
            .fold(DMatrix::zeros(2, 2), |a, x| a + outer(&(x - &mean)))
            / n;
        let m = &fit.gmm.modes()[0];
        assert!((&m.mean - &mean).norm() < 1e-10);
        assert!((&m.cov - &cov).norm() < 1e-9);
        // recovered within sampling error of the generator
        let se = (2.0f64 / n).sqrt();
        assert!((m.mean[0] - 1.0).abs() < 3.0 * se);
    }

    #[test]
    fn table_mixture_likelihood_matches_generator() {
        let g = table_mixture();
        let xs = g.sample(200_000, 7).unwrap();
        let fit = em_fit(&xs, 6, 1).unwrap();
        let truth: f64 = xs.iter().map(|x| g.pdf(x).unwrap().ln()).sum::<f64>() / xs.len() as f64;
        // per-sample ll sd is O(1); the fitted model may exceed the truth slightly
        assert!(
            fit.log_likelihood() > truth - 5e-3,
            "{} vs {truth}",
            fit.log_likelihood()
        );
        assert!(fit.log_likelihood() >= fit.initial_log_likelihood);
        for w in fit.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-12);
        }
        assert!((fit.gmm.total_weight() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn too_few_samples() {
        let xs = vec![DVector::from_element(1, 0.0); 5];
        assert!(matches!(em_fit(&xs, 1, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn deterministic_given_seed() {
        let xs = table_mixture().sample(5_000, 9).unwrap();
        let a = em_fit(&xs, 3, 4).unwrap();
        let b = em_fit(&xs, 3, 4).unwrap();
        assert_eq!(a.gmm, b.gmm);
        assert_eq!(a.trace, b.trace);
    }
}
