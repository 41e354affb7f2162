//! Monte-Carlo ground truth: empirical residual moments, alarm rates,
//! histograms and Kolmogorov–Smirnov distances.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::ChiSquaredDetector;
use crate::error::{Error, Result};
use crate::gmm::{GaussianMode, Gmm, GmmSampler};
use crate::linalg;
use crate::lti::{seeded_rng, LtiSystem, NoiseSource, ResidualStepper, ZeroNoise};

pub const DEFAULT_BATCHES: usize = 16;
pub const DEFAULT_KS_SAMPLES: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McOptions {
    pub samples: usize,
    /// Steps discarded at the start of every batch trajectory.
    pub burn_in: usize,
    pub seed: u64,
    pub batches: usize,
    pub histogram_bins: usize,
    /// Residuals per batch kept for the KS distance (the first ones after
    /// burn-in).
    pub ks_per_batch: usize,
}

impl McOptions {
    /// Defaults for a model of horizon `k_star`: burn-in `5 k*`,
    /// [`DEFAULT_BATCHES`] batches.
    pub fn for_horizon(samples: usize, k_star: usize, seed: u64) -> Self {
        Self {
            samples,
            burn_in: 5 * k_star,
            seed,
            batches: DEFAULT_BATCHES,
            histogram_bins: 100,
            ks_per_batch: DEFAULT_KS_SAMPLES / DEFAULT_BATCHES,
        }
    }
}

/// Streaming mean/covariance accumulator with an associative merge.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentAccumulator {
    pub count: u64,
    pub mean: DVector<f64>,
    /// Sum of outer products of deviations.
    pub m2: DMatrix<f64>,
    pub alarms: u64,
}

impl MomentAccumulator {
    pub fn new(p: usize) -> Self {
        Self {
            count: 0,
            mean: DVector::zeros(p),
            m2: DMatrix::zeros(p, p),
            alarms: 0,
        }
    }

    pub fn push(&mut self, r: &DVector<f64>, alarm: bool) {
        self.count += 1;
        self.alarms += alarm as u64;
        let n = self.count as f64;
        let p = r.len();
        // Welford update, written out to avoid temporaries
        let mut delta = [0.0f64; 8];
        if p <= delta.len() {
            for i in 0..p {
                delta[i] = r[i] - self.mean[i];
                self.mean[i] += delta[i] / n;
            }
            for i in 0..p {
                let d2 = r[i] - self.mean[i];
                for j in 0..p {
                    self.m2[(j, i)] += delta[j] * d2;
                }
            }
        } else {
            let delta = r - &self.mean;
            self.mean += &delta / n;
            let delta2 = r - &self.mean;
            self.m2 += &delta * delta2.transpose();
        }
    }

    /// Chan et al. pairwise combination.
    pub fn merge(&self, other: &Self) -> Self {
        if self.count == 0 {
            return other.clone();
        }
        if other.count == 0 {
            return self.clone();
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta = &other.mean - &self.mean;
        Self {
            count: self.count + other.count,
            mean: &self.mean + &delta * (nb / n),
            m2: &self.m2 + &other.m2 + (&delta * delta.transpose()) * (na * nb / n),
            alarms: self.alarms + other.alarms,
        }
    }

    /// Unbiased sample covariance.
    pub fn cov(&self) -> DMatrix<f64> {
        if self.count < 2 {
            return DMatrix::zeros(self.mean.len(), self.mean.len());
        }
        linalg::symmetrize(&(&self.m2 / (self.count as f64 - 1.0)))
    }
}

/// Fixed-range histogram; out-of-range values land in the end bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        let bins = bins.max(1);
        let edges = (0..=bins)
            .map(|i| lo + (hi - lo) * i as f64 / bins as f64)
            .collect();
        Self {
            edges,
            counts: vec![0; bins],
        }
    }

    pub fn push(&mut self, x: f64) {
        let bins = self.counts.len();
        let lo = self.edges[0];
        let hi = self.edges[bins];
        let idx = ((x - lo) / (hi - lo) * bins as f64).floor();
        let idx = if idx.is_nan() {
            0
        } else {
            (idx.max(0.0) as usize).min(bins - 1)
        };
        self.counts[idx] += 1;
    }

    pub fn merge(&mut self, other: &Histogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// CSV with columns `bin_left,bin_right,count`.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(["bin_left", "bin_right", "count"])?;
        for (i, c) in self.counts.iter().enumerate() {
            w.write_record(&[
                self.edges[i].to_string(),
                self.edges[i + 1].to_string(),
                c.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalSummary {
    pub sample_count: u64,
    pub empirical_mean: Vec<f64>,
    pub empirical_cov: Vec<Vec<f64>>,
    pub alarm_count: u64,
    pub alarm_rate: f64,
    /// Distance of the first residual component to the model marginal.
    pub ks_distance: Option<f64>,
    pub ks_sample_count: usize,
    /// Histogram of the first residual component.
    pub histogram: Histogram,
}

impl EmpiricalSummary {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }
}

/// Per-batch output before merging.
struct BatchResult {
    acc: MomentAccumulator,
    hist: Histogram,
    first: Vec<f64>,
}

fn run_batch(
    sys: &LtiSystem,
    eta: &dyn NoiseSource,
    v: &dyn NoiseSource,
    det: &ChiSquaredDetector,
    samples: usize,
    opts: &McOptions,
    stream: u64,
    hist: Histogram,
    keep_first: usize,
) -> Result<BatchResult> {
    let mut stepper = ResidualStepper::new(sys, v, eta, seeded_rng(opts.seed, stream))?;
    for _ in 0..opts.burn_in {
        stepper.step();
    }
    let mut acc = MomentAccumulator::new(sys.p());
    let mut hist = hist;
    let mut first = Vec::with_capacity(keep_first.min(samples));
    for _ in 0..samples {
        let r = stepper.step();
        let alarm = det.distance_slice(r.as_slice()) > det.threshold();
        acc.push(r, alarm);
        hist.push(r[0]);
        if first.len() < keep_first {
            first.push(r[0]);
        }
    }
    Ok(BatchResult { acc, hist, first })
}

/// Simulates `opts.batches` independent trajectories (stream id = batch
/// index), discards the burn-in of each, and merges the statistics in batch
/// order. `model`, when given, is the reference for the
/// KS distance of the first residual component.
pub fn empirical_false_alarm(
    sys: &LtiSystem,
    noise_eta: &Gmm,
    noise_v: Option<&Gmm>,
    det: &ChiSquaredDetector,
    opts: &McOptions,
    model: Option<&Gmm>,
) -> Result<EmpiricalSummary> {
    if opts.samples == 0 || opts.batches == 0 {
        return Err(Error::Domain(
            "Monte-Carlo run needs samples > 0 and batches > 0".into(),
        ));
    }
    if det.p() != sys.p() {
        return Err(Error::dim("detector", sys.p(), det.p()));
    }
    let eta = GmmSampler::new(noise_eta)?;
    let v_gmm;
    let zero = ZeroNoise(sys.n());
    let v: &dyn NoiseSource = match noise_v {
        Some(g) => {
            v_gmm = GmmSampler::new(g)?;
            &v_gmm
        }
        None => &zero,
    };

    let (c0, sd0) = {
        let m = det.mean()[0];
        let s = det.cov()[(0, 0)].sqrt();
        (m, s)
    };
    let template = Histogram::new(c0 - 6.0 * sd0, c0 + 6.0 * sd0, opts.histogram_bins);
    let keep_first = if model.is_some() {
        opts.ks_per_batch
    } else {
        0
    };

    let b = opts.batches;
    let base = opts.samples / b;
    let extra = opts.samples % b;
    let results: Vec<BatchResult> = (0..b)
        .into_par_iter()
        .map(|i| {
            let n = base + usize::from(i < extra);
            run_batch(
                sys,
                &eta,
                v,
                det,
                n,
                opts,
                i as u64,
                template.clone(),
                keep_first,
            )
        })
        .collect::<Result<_>>()?;

    let mut acc = MomentAccumulator::new(sys.p());
    let mut hist = template;
    let mut first = Vec::new();
    for r in results {
        acc = acc.merge(&r.acc);
        hist.merge(&r.hist);
        first.extend(r.first);
    }
    let ks_distance = match model {
        Some(g) => Some(ks_1d(&first, &marginal_first(g))?),
        None => None,
    };
    Ok(EmpiricalSummary {
        sample_count: acc.count,
        empirical_mean: acc.mean.iter().copied().collect(),
        empirical_cov: linalg::to_rows(&acc.cov()),
        alarm_count: acc.alarms,
        alarm_rate: acc.alarms as f64 / acc.count as f64,
        ks_distance,
        ks_sample_count: if model.is_some() { first.len() } else { 0 },
        histogram: hist,
    })
}

/// Marginal of the first coordinate.
pub fn marginal_first(g: &Gmm) -> Gmm {
    let modes = g
        .modes()
        .iter()
        .map(|m| {
            GaussianMode::new(
                m.weight,
                DVector::from_element(1, m.mean[0]),
                DMatrix::from_element(1, 1, m.cov[(0, 0)]),
            )
        })
        .collect();
    Gmm::normalized(modes).expect("marginal of a valid mixture")
}

/// Sup-norm distance between the empirical CDF of `samples` and the
/// mixture CDF.
pub fn ks_1d(samples: &[f64], model: &Gmm) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Domain(
            "KS distance needs at least one sample".into(),
        ));
    }
    if model.dim() != 1 {
        return Err(Error::dim("model", 1, model.dim()));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let cdfs: Vec<f64> = xs
        .par_chunks(8192)
        .map(|c| {
            c.iter()
                .map(|&x| model.cdf_1d(x).unwrap())
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .concat();
    let mut d = 0.0f64;
    for (i, f) in cdfs.iter().enumerate() {
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    Ok(d.clamp(0.0, 1.0))
}
