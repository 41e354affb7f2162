//! Gaussian-mixture algebra: affine maps, sums of independent mixtures,
//! moments, densities, sampling and mode reduction.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, cholesky_jittered, outer, sampling_factor};
use crate::lti::{seeded_rng, NoiseSource, SimRng};

const WEIGHT_TOL: f64 = 1e-10;
const SYMMETRY_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-12;

/// One weighted Gaussian component.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMode {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianMode {
    pub fn new(weight: f64, mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self { weight, mean, cov }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Density of `N(mean, cov)` at `x` (ignores the weight).
    pub fn density(&self, x: &DVector<f64>) -> Result<f64> {
        let d = self.dim();
        let ch = cholesky_jittered(&self.cov, "mode covariance")?;
        let delta = x - &self.mean;
        let y = ch
            .l()
            .solve_lower_triangular(&delta)
            .expect("non-singular factor");
        let log_det: f64 = ch.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let log_norm = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        Ok((log_norm - 0.5 * y.norm_squared()).exp())
    }
}

/// Finite mixture of Gaussians over a common dimension; weights sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Gmm {
    dim: usize,
    modes: Vec<GaussianMode>,
}

fn check_mode(i: usize, mode: &GaussianMode, dim: usize) -> Result<()> {
    if mode.mean.len() != dim {
        return Err(Error::dim(format!("modes[{i}].mean"), dim, mode.mean.len()));
    }
    if mode.cov.shape() != (dim, dim) {
        return Err(Error::dim(
            format!("modes[{i}].cov"),
            format!("{dim}x{dim}"),
            format!("{}x{}", mode.cov.nrows(), mode.cov.ncols()),
        ));
    }
    if !(mode.weight > 0.0 && mode.weight <= 1.0 + WEIGHT_TOL) {
        return Err(Error::InvalidMixture(format!(
            "mode {i} weight {} outside (0, 1]",
            mode.weight
        )));
    }
    if mode
        .mean
        .iter()
        .chain(mode.cov.iter())
        .any(|v| !v.is_finite())
    {
        return Err(Error::InvalidMixture(format!(
            "mode {i} has non-finite parameters"
        )));
    }
    let scale = mode.cov.amax().max(1.0);
    if !linalg::is_symmetric(&mode.cov, SYMMETRY_TOL * scale) {
        return Err(Error::InvalidMixture(format!(
            "mode {i} covariance is not symmetric"
        )));
    }
    if linalg::min_eigenvalue(&mode.cov) < -PSD_TOL * scale {
        return Err(Error::InvalidMixture(format!(
            "mode {i} covariance is not positive semi-definite"
        )));
    }
    Ok(())
}

impl Gmm {
    /// Validating constructor: weights must already sum to one.
    pub fn new(modes: Vec<GaussianMode>) -> Result<Self> {
        let dim = modes
            .first()
            .ok_or_else(|| Error::InvalidMixture("mixture needs at least one mode".into()))?
            .dim();
        if dim == 0 {
            return Err(Error::InvalidMixture(
                "mixture dimension must be positive".into(),
            ));
        }
        for (i, m) in modes.iter().enumerate() {
            check_mode(i, m, dim)?;
        }
        let total: f64 = modes.iter().map(|m| m.weight).sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::InvalidMixture(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        Ok(Self { dim, modes })
    }

    /// Like [`Gmm::new`] but rescales positive weights to sum to one.
    pub fn normalized(mut modes: Vec<GaussianMode>) -> Result<Self> {
        let total: f64 = modes.iter().map(|m| m.weight).sum();
        if !(total > 0.0) || modes.iter().any(|m| !(m.weight > 0.0)) {
            return Err(Error::InvalidMixture("weights must be positive".into()));
        }
        for m in &mut modes {
            m.weight /= total;
        }
        Self::new(modes)
    }

    pub fn single(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![GaussianMode::new(1.0, mean, cov)])
    }

    /// Degenerate mixture concentrated at the origin.
    pub fn point_mass(dim: usize) -> Self {
        Self {
            dim,
            modes: vec![GaussianMode::new(
                1.0,
                DVector::zeros(dim),
                DMatrix::zeros(dim, dim),
            )],
        }
    }

    /// Internal constructor for results of closed operations on valid inputs.
    pub(crate) fn from_parts(dim: usize, modes: Vec<GaussianMode>) -> Self {
        debug_assert!(modes.iter().all(|m| m.dim() == dim));
        Self { dim, modes }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn modes(&self) -> &[GaussianMode] {
        &self.modes
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.modes.iter().map(|m| m.weight).sum()
    }

    /// Image of the mixture under `x -> Q x + shift`.
    pub fn affine_map(&self, q: &DMatrix<f64>, shift: &DVector<f64>) -> Result<Gmm> {
        if q.ncols() != self.dim {
            return Err(Error::dim(
                "Q",
                format!("q x {}", self.dim),
                format!("{}x{}", q.nrows(), q.ncols()),
            ));
        }
        if shift.len() != q.nrows() {
            return Err(Error::dim("shift", q.nrows(), shift.len()));
        }
        let qt = q.transpose();
        let modes = self
            .modes
            .iter()
            .map(|m| GaussianMode {
                weight: m.weight,
                mean: q * &m.mean + shift,
                cov: linalg::symmetrize(&(q * &m.cov * &qt)),
            })
            .collect();
        Ok(Gmm::from_parts(q.nrows(), modes))
    }

    /// Linear image `x -> Q x`.
    pub fn linear_map(&self, q: &DMatrix<f64>) -> Result<Gmm> {
        self.affine_map(q, &DVector::zeros(q.nrows()))
    }

    /// Distribution of `a + b` for independent `a ~ self`, `b ~ other`:
    /// the cross product of modes, with weights multiplied and means and
    /// covariances added. Mode order is row-major in (`self`, `other`).
    pub fn independent_sum(&self, other: &Gmm) -> Result<Gmm> {
        if self.dim != other.dim {
            return Err(Error::dim("independent_sum operand", self.dim, other.dim));
        }
        let mut modes = Vec::with_capacity(self.len() * other.len());
        for a in &self.modes {
            for b in &other.modes {
                modes.push(GaussianMode {
                    weight: a.weight * b.weight,
                    mean: &a.mean + &b.mean,
                    cov: &a.cov + &b.cov,
                });
            }
        }
        Ok(Gmm::from_parts(self.dim, modes))
    }

    /// Overall mean and covariance.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        mixture_moments(self.modes.iter())
    }

    pub fn pdf(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::dim("x", self.dim, x.len()));
        }
        let mut total = 0.0;
        for m in &self.modes {
            total += m.weight * m.density(x)?;
        }
        Ok(total)
    }

    /// CDF of a one-dimensional mixture.
    pub fn cdf_1d(&self, x: f64) -> Result<f64> {
        if self.dim != 1 {
            return Err(Error::Domain(format!(
                "cdf_1d needs a one-dimensional mixture, got dimension {}",
                self.dim
            )));
        }
        let total: f64 = self
            .modes
            .iter()
            .map(|m| {
                let sd = m.cov[(0, 0)].max(0.0).sqrt();
                let mu = m.mean[0];
                let c = if sd == 0.0 {
                    if x >= mu {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    crate::special::std_normal_cdf((x - mu) / sd)
                };
                m.weight * c
            })
            .sum();
        Ok(total.clamp(0.0, 1.0))
    }

    pub fn sample(&self, count: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
        let sampler = GmmSampler::new(self)?;
        let mut rng = seeded_rng(seed, 0);
        Ok((0..count)
            .map(|_| {
                let mut out = DVector::zeros(self.dim);
                sampler.draw_into(&mut rng, &mut out);
                out
            })
            .collect())
    }

    /// Merges nearly identical modes. Zero thresholds return the mixture unchanged.
    pub fn reduce(&self, cfg: &ReductionConfig) -> Gmm {
        if cfg.is_identity() || self.len() <= 1 {
            return self.clone();
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&i, &j| canonical_order(&self.modes[i], &self.modes[j]));

        // (representative index, member indices)
        let mut clusters: Vec<(usize, Vec<usize>)> = Vec::new();
        let mut grid = RepGrid::new(self.dim, cfg.d_mu);
        for &i in &order {
            let mode = &self.modes[i];
            // first cluster in creation order whose representative is close
            let hit = grid.nearby(&mode.mean).filter(|&c| {
                let r = &self.modes[clusters[c].0];
                (&mode.mean - &r.mean).norm() <= cfg.d_mu && (&mode.cov - &r.cov).norm() <= cfg.d_k
            });
            match hit.min() {
                Some(c) => clusters[c].1.push(i),
                None => {
                    grid.insert(&mode.mean, clusters.len());
                    clusters.push((i, vec![i]));
                }
            }
        }

        let modes = clusters
            .into_iter()
            .map(|(rep, members)| {
                if members.len() == 1 {
                    return self.modes[rep].clone();
                }
                let weight: f64 = members.iter().map(|&i| self.modes[i].weight).sum();
                match cfg.merge {
                    MergeRule::KeepRepresentative => GaussianMode {
                        weight,
                        mean: self.modes[rep].mean.clone(),
                        cov: self.modes[rep].cov.clone(),
                    },
                    MergeRule::MomentMatch => {
                        let (mean, cov) = mixture_moments(members.iter().map(|&i| &self.modes[i]));
                        GaussianMode { weight, mean, cov }
                    }
                }
            })
            .collect();
        Gmm::from_parts(self.dim, modes)
    }

    pub fn to_json(&self) -> GmmJson {
        GmmJson {
            dim: self.dim,
            modes: self
                .modes
                .iter()
                .map(|m| ModeJson {
                    weight: m.weight,
                    mean: m.mean.iter().copied().collect(),
                    cov: linalg::to_rows(&m.cov),
                })
                .collect(),
        }
    }

    /// Parses the JSON schema. Weights are renormalised when their sum is
    /// within 1e-3 of one (published tables are rounded); larger deviations
    /// are rejected.
    pub fn from_json(doc: &GmmJson) -> Result<Gmm> {
        if doc.modes.is_empty() {
            return Err(Error::config("modes", "at least one mode required"));
        }
        let mut modes = Vec::with_capacity(doc.modes.len());
        for (i, m) in doc.modes.iter().enumerate() {
            if m.mean.len() != doc.dim {
                return Err(Error::config(
                    format!("modes[{i}].mean"),
                    format!("expected {} entries, found {}", doc.dim, m.mean.len()),
                ));
            }
            let cov = linalg::from_rows(&format!("modes[{i}].cov"), &m.cov)?;
            modes.push(GaussianMode::new(
                m.weight,
                DVector::from_vec(m.mean.clone()),
                cov,
            ));
        }
        let total: f64 = modes.iter().map(|m| m.weight).sum();
        if (total - 1.0).abs() > 1e-3 {
            return Err(Error::config(
                "modes",
                format!("weights sum to {total}, expected 1"),
            ));
        }
        let built = if (total - 1.0).abs() <= 1e-10 {
            Gmm::new(modes)
        } else {
            Gmm::normalized(modes)
        };
        built.map_err(|e| Error::config("modes", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Gmm> {
        let text = std::fs::read_to_string(path)?;
        let doc: GmmJson = serde_json::from_str(&text)?;
        Gmm::from_json(&doc)
    }
}

/// Overall moments of a (possibly unnormalised) set of modes, normalised by
/// their total weight.
pub(crate) fn mixture_moments<'a>(
    modes: impl Iterator<Item = &'a GaussianMode> + Clone,
) -> (DVector<f64>, DMatrix<f64>) {
    let first = modes.clone().next().expect("at least one mode");
    let d = first.dim();
    let total: f64 = modes.clone().map(|m| m.weight).sum();
    let mut mean = DVector::zeros(d);
    for m in modes.clone() {
        mean.axpy(m.weight / total, &m.mean, 1.0);
    }
    let mut cov = DMatrix::zeros(d, d);
    for m in modes {
        let gamma = &mean - &m.mean;
        cov += (&m.cov + outer(&gamma)) * (m.weight / total);
    }
    (mean, linalg::symmetrize(&cov))
}

/// Cluster representatives bucketed on a grid of cell size `d_mu`, so a
/// candidate only needs checking against the 3^d neighbouring cells.
struct RepGrid {
    cell: f64,
    dim: usize,
    cells: HashMap<Vec<i64>, Vec<usize>>,
}

impl RepGrid {
    fn new(dim: usize, cell: f64) -> Self {
        Self {
            cell,
            dim,
            cells: HashMap::new(),
        }
    }

    fn key(&self, x: &DVector<f64>) -> Vec<i64> {
        x.iter()
            .map(|v| {
                if self.cell > 0.0 {
                    (v / self.cell).floor() as i64
                } else {
                    (v + 0.0).to_bits() as i64
                }
            })
            .collect()
    }

    fn insert(&mut self, x: &DVector<f64>, cluster: usize) {
        let k = self.key(x);
        self.cells.entry(k).or_default().push(cluster);
    }

    fn nearby<'a>(&'a self, x: &DVector<f64>) -> impl Iterator<Item = usize> + 'a {
        let centre = self.key(x);
        let span: i64 = if self.cell > 0.0 { 1 } else { 0 };
        let width = (2 * span + 1) as usize;
        let count = width.pow(self.dim as u32);
        (0..count).flat_map(move |mut code| {
            let key: Vec<i64> = centre
                .iter()
                .map(|c| {
                    let off = (code % width) as i64 - span;
                    code /= width;
                    c.saturating_add(off)
                })
                .collect();
            self.cells.get(&key).into_iter().flatten().copied()
        })
    }
}

/// Weight descending, then lexicographic mean.
fn canonical_order(a: &GaussianMode, b: &GaussianMode) -> Ordering {
    b.weight.total_cmp(&a.weight).then_with(|| {
        a.mean
            .iter()
            .zip(b.mean.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeRule {
    /// Merged mode carries the members' moment-matched mean and covariance.
    #[default]
    MomentMatch,
    /// Merged mode keeps the first member's parameters; only weights add.
    KeepRepresentative,
}

/// Thresholds for merging modes: Euclidean distance between means and
/// Frobenius distance between covariances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReductionConfig {
    pub d_mu: f64,
    #[serde(rename = "d_K")]
    pub d_k: f64,
    #[serde(default)]
    pub merge: MergeRule,
}

impl ReductionConfig {
    pub fn new(d_mu: f64, d_k: f64) -> Result<Self> {
        if !(d_mu >= 0.0 && d_k >= 0.0) || !d_mu.is_finite() || !d_k.is_finite() {
            return Err(Error::Domain(format!(
                "reduction thresholds must be finite and non-negative, got d_mu={d_mu}, d_K={d_k}"
            )));
        }
        Ok(Self {
            d_mu,
            d_k,
            merge: MergeRule::MomentMatch,
        })
    }

    pub fn none() -> Self {
        Self {
            d_mu: 0.0,
            d_k: 0.0,
            merge: MergeRule::MomentMatch,
        }
    }

    pub fn with_merge(mut self, merge: MergeRule) -> Self {
        self.merge = merge;
        self
    }

    /// One percent of the spread: `d_mu = 0.01 ||std||`, `d_K = 0.01 ||cov||_F`.
    pub fn auto(mean_cov: &(DVector<f64>, DMatrix<f64>)) -> Self {
        let cov = &mean_cov.1;
        let std = cov.diagonal().map(|v| v.max(0.0).sqrt());
        Self {
            d_mu: 0.01 * std.norm(),
            d_k: 0.01 * cov.norm(),
            merge: MergeRule::MomentMatch,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            d_mu: self.d_mu * factor,
            d_k: self.d_k * factor,
            merge: self.merge,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.d_mu == 0.0 && self.d_k == 0.0
    }
}

/// Serialized mixture: `{"dim": d, "modes": [{"weight", "mean", "cov"}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmJson {
    pub dim: usize,
    pub modes: Vec<ModeJson>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeJson {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

/// Precomputed categorical table and Cholesky factors for repeated draws.
#[derive(Debug, Clone)]
pub struct GmmSampler {
    dim: usize,
    cumulative: Vec<f64>,
    means: Vec<DVector<f64>>,
    factors: Vec<DMatrix<f64>>,
}

impl GmmSampler {
    pub fn new(g: &Gmm) -> Result<Self> {
        let mut acc = 0.0;
        let cumulative = g
            .modes
            .iter()
            .map(|m| {
                acc += m.weight;
                acc
            })
            .collect();
        let factors = g
            .modes
            .iter()
            .map(|m| sampling_factor(&m.cov))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dim: g.dim,
            cumulative,
            means: g.modes.iter().map(|m| m.mean.clone()).collect(),
            factors,
        })
    }

    /// Draws a mode label.
    pub fn draw_label(&self, rng: &mut SimRng) -> usize {
        let total = *self.cumulative.last().expect("non-empty");
        let u: f64 = rng.random::<f64>() * total;
        self.cumulative
            .partition_point(|&c| c <= u)
            .min(self.cumulative.len() - 1)
    }

    /// Draws from mode `j` into `out`.
    pub fn draw_from_mode(&self, j: usize, rng: &mut SimRng, out: &mut DVector<f64>) {
        let f = &self.factors[j];
        out.copy_from(&self.means[j]);
        if self.dim == 1 {
            let z: f64 = rng.sample(StandardNormal);
            out[0] += f[(0, 0)] * z;
            return;
        }
        let z = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        out.gemv(1.0, f, &z, 1.0);
    }
}

impl NoiseSource for GmmSampler {
    fn dim(&self) -> usize {
        self.dim
    }

    fn draw_into(&self, rng: &mut SimRng, out: &mut DVector<f64>) {
        let j = self.draw_label(rng);
        self.draw_from_mode(j, rng, out);
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) const TABLE_W: [f64; 6] = [0.0847, 0.2012, 0.1184, 0.3200, 0.1889, 0.0869];
    pub(crate) const TABLE_MU: [f64; 6] = [-7.0877, -4.4709, -2.0082, 1.2318, 4.5240, 7.0504];
    pub(crate) const TABLE_K: [f64; 6] = [2.1997, 0.4471, 0.2062, 1.0392, 0.3858, 2.2329];

    pub(crate) fn table_mixture() -> Gmm {
        Gmm::normalized(
            (0..6)
                .map(|j| {
                    GaussianMode::new(
                        TABLE_W[j],
                        DVector::from_element(1, TABLE_MU[j]),
                        DMatrix::from_element(1, 1, TABLE_K[j]),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    fn scalar_mode(w: f64, mu: f64, k: f64) -> GaussianMode {
        GaussianMode::new(
            w,
            DVector::from_element(1, mu),
            DMatrix::from_element(1, 1, k),
        )
    }

    #[test]
    fn rejects_bad_weights_and_cov() {
        assert!(Gmm::new(vec![scalar_mode(0.5, 0.0, 1.0)]).is_err());
        assert!(Gmm::new(vec![scalar_mode(1.0, 0.0, -1.0)]).is_err());
        let asym = GaussianMode::new(
            1.0,
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]),
        );
        assert!(Gmm::new(vec![asym]).is_err());
        assert!(Gmm::new(vec![]).is_err());
    }

    #[test]
    fn identity_affine_map() {
        let g = table_mixture();
        let h = g
            .affine_map(&DMatrix::identity(1, 1), &DVector::zeros(1))
            .unwrap();
        assert_eq!(g, h);
    }

    #[test]
    fn row_vector_projection() {
        let mean = DVector::from_vec(vec![1.0, -2.0]);
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let g = Gmm::single(mean.clone(), cov.clone()).unwrap();
        let c = DMatrix::from_row_slice(1, 2, &[0.5, 2.0]);
        let h = g.linear_map(&c).unwrap();
        let ct = DVector::from_vec(vec![0.5, 2.0]);
        assert!((h.modes()[0].mean[0] - ct.dot(&mean)).abs() < 1e-15);
        assert!((h.modes()[0].cov[(0, 0)] - (ct.transpose() * &cov * &ct)[(0, 0)]).abs() < 1e-14);
    }

    #[test]
    fn table_mode_under_weight_map() {
        // A_2-like scalar map applied to mode 1 versus direct arithmetic.
        let q = DMatrix::from_element(1, 1, -0.0375);
        let h = table_mixture().linear_map(&q).unwrap();
        assert!((h.modes()[0].mean[0] - (-0.0375 * -7.0877)).abs() < 1e-15);
        assert!((h.modes()[0].cov[(0, 0)] - 0.0375 * 0.0375 * 2.1997).abs() < 1e-15);
    }

    #[test]
    fn gaussian_convolution() {
        let k1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let k2 = DMatrix::from_row_slice(2, 2, &[0.3, -0.1, -0.1, 0.7]);
        let a = Gmm::single(DVector::zeros(2), k1.clone()).unwrap();
        let b = Gmm::single(DVector::zeros(2), k2.clone()).unwrap();
        let s = a.independent_sum(&b).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.modes()[0].cov, k1 + k2);
    }

    #[test]
    fn cross_product_counts() {
        let a = Gmm::new(vec![scalar_mode(0.4, 0.0, 1.0), scalar_mode(0.6, 1.0, 1.0)]).unwrap();
        let b = Gmm::new(vec![
            scalar_mode(0.2, 0.0, 1.0),
            scalar_mode(0.3, 1.0, 2.0),
            scalar_mode(0.5, 3.0, 1.0),
        ])
        .unwrap();
        let s = a.independent_sum(&b).unwrap();
        assert_eq!(s.len(), 6);
        assert!((s.total_weight() - 1.0).abs() < 1e-15);
        assert!(a.independent_sum(&Gmm::point_mass(2)).is_err());
    }

    #[test]
    fn doubled_table_mean() {
        let g = table_mixture();
        let s = g.independent_sum(&g).unwrap();
        let direct: f64 = g.modes().iter().map(|m| m.weight * m.mean[0]).sum();
        assert!((s.moments().0[0] - 2.0 * direct).abs() < 1e-12);
    }

    #[test]
    fn two_point_variance() {
        let g = Gmm::new(vec![
            scalar_mode(0.5, -1.0, 0.0),
            scalar_mode(0.5, 1.0, 0.0),
        ])
        .unwrap();
        let (m, c) = g.moments();
        assert_eq!(m[0], 0.0);
        assert!((c[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_mode_moments() {
        let g = Gmm::single(
            DVector::from_element(1, 3.0),
            DMatrix::from_element(1, 1, 2.0),
        )
        .unwrap();
        let (m, c) = g.moments();
        assert_eq!((m[0], c[(0, 0)]), (3.0, 2.0));
    }

    #[test]
    fn table_mean_by_sampling() {
        let g = table_mixture();
        let (mean, cov) = g.moments();
        let direct: f64 = (0..6).map(|j| TABLE_W[j] * TABLE_MU[j]).sum::<f64>() / 1.0001;
        assert!((mean[0] - direct).abs() < 1e-12);
        let n = 1_000_000;
        let xs = g.sample(n, 11).unwrap();
        let emp = xs.iter().map(|x| x[0]).sum::<f64>() / n as f64;
        let se = (cov[(0, 0)] / n as f64).sqrt();
        assert!((emp - mean[0]).abs() < 3.0 * se, "{emp} vs {}", mean[0]);
    }

    #[test]
    fn standard_normal_pdf_cdf() {
        let g = Gmm::single(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        let v = g.pdf(&DVector::zeros(1)).unwrap();
        assert!((v - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-15);
        assert!((g.cdf_1d(0.0).unwrap() - 0.5).abs() < 1e-15);
        let g2 = Gmm::single(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        assert!(g2.cdf_1d(0.0).is_err());
    }

    #[test]
    fn table_pdf_by_direct_sum() {
        let g = table_mixture();
        let x = 1.2318;
        let direct: f64 = (0..6)
            .map(|j| {
                let w = TABLE_W[j] / 1.0001;
                let z = x - TABLE_MU[j];
                w * (-0.5 * z * z / TABLE_K[j]).exp()
                    / (2.0 * std::f64::consts::PI * TABLE_K[j]).sqrt()
            })
            .sum();
        let v = g.pdf(&DVector::from_element(1, x)).unwrap();
        assert!((v - direct).abs() < 1e-14);
    }

    #[test]
    fn pdf_integrates_to_one_in_2d() {
        let g = Gmm::new(vec![
            GaussianMode::new(
                0.3,
                DVector::from_vec(vec![1.0, 0.0]),
                DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.4]),
            ),
            GaussianMode::new(
                0.7,
                DVector::from_vec(vec![-1.0, 0.5]),
                DMatrix::from_row_slice(2, 2, &[1.0, -0.3, -0.3, 0.8]),
            ),
        ])
        .unwrap();
        // midpoint rule on [-8, 8]^2
        let n = 320;
        let h = 16.0 / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = DVector::from_vec(vec![
                    -8.0 + (i as f64 + 0.5) * h,
                    -8.0 + (j as f64 + 0.5) * h,
                ]);
                total += g.pdf(&x).unwrap() * h * h;
            }
        }
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn degenerate_sampling_and_determinism() {
        let g = Gmm::single(DVector::from_vec(vec![2.0, -1.0]), DMatrix::zeros(2, 2)).unwrap();
        assert!(g
            .sample(100, 5)
            .unwrap()
            .iter()
            .all(|x| x == &DVector::from_vec(vec![2.0, -1.0])));
        let t = table_mixture();
        assert_eq!(t.sample(1000, 42).unwrap(), t.sample(1000, 42).unwrap());
        assert_ne!(t.sample(1000, 42).unwrap(), t.sample(1000, 43).unwrap());
    }

    #[test]
    fn reduce_zero_thresholds_is_identity() {
        let g = table_mixture();
        assert_eq!(g.reduce(&ReductionConfig::none()), g);
    }

    #[test]
    fn reduce_merges_duplicates() {
        let g = Gmm::new(vec![scalar_mode(0.5, 1.0, 2.0), scalar_mode(0.5, 1.0, 2.0)]).unwrap();
        let r = g.reduce(&ReductionConfig::new(1e-9, 1e-9).unwrap());
        assert_eq!(r.len(), 1);
        assert_eq!(r.modes()[0], scalar_mode(1.0, 1.0, 2.0));
    }

    #[test]
    fn keep_representative_rule() {
        let g = Gmm::new(vec![
            scalar_mode(0.6, 1.0, 2.0),
            scalar_mode(0.4, 1.05, 2.0),
        ])
        .unwrap();
        let cfg = ReductionConfig::new(0.1, 0.1).unwrap();
        let lit = g.reduce(&cfg.with_merge(MergeRule::KeepRepresentative));
        assert_eq!(lit.modes()[0].mean[0], 1.0);
        let mm = g.reduce(&cfg);
        assert!((mm.modes()[0].mean[0] - 1.02).abs() < 1e-15);
        assert!((mm.moments().0[0] - g.moments().0[0]).abs() < 1e-15);
    }

    #[test]
    fn auto_thresholds() {
        let cfg = ReductionConfig::auto(&table_mixture().moments());
        let (_, c) = table_mixture().moments();
        assert!((cfg.d_mu - 0.01 * c[(0, 0)].sqrt()).abs() < 1e-15);
        assert!((cfg.d_k - 0.01 * c[(0, 0)]).abs() < 1e-15);
    }

    #[test]
    fn json_roundtrip_and_renormalisation() {
        let g = table_mixture();
        let text = serde_json::to_string(&g.to_json()).unwrap();
        let back = Gmm::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(g, back);
        let mut doc = g.to_json();
        doc.modes[0].weight = 0.5;
        assert!(Gmm::from_json(&doc).is_err());
    }

    fn arb_mixture(dim: usize) -> impl Strategy<Value = Gmm> {
        prop::collection::vec(
            (
                0.05f64..1.0,
                prop::collection::vec(-3.0f64..3.0, dim),
                prop::collection::vec(-1.0f64..1.0, dim * dim),
            ),
            1..5,
        )
        .prop_map(move |raw| {
            let modes = raw
                .into_iter()
                .map(|(w, mu, a)| {
                    let a = DMatrix::from_vec(dim, dim, a);
                    let cov = &a * a.transpose() + DMatrix::identity(dim, dim) * 0.1;
                    GaussianMode::new(w, DVector::from_vec(mu), linalg::symmetrize(&cov))
                })
                .collect();
            Gmm::normalized(modes).unwrap()
        })
    }

    proptest! {
        #[test]
        fn sum_commutes_with_moments(a in arb_mixture(2), b in arb_mixture(2)) {
            let s = a.independent_sum(&b).unwrap();
            let (ma, ca) = a.moments();
            let (mb, cb) = b.moments();
            let (ms, cs) = s.moments();
            prop_assert!((ms - (ma + mb)).norm() < 1e-12);
            prop_assert!((cs - (ca + cb)).norm() < 1e-11);
            prop_assert!((s.total_weight() - 1.0).abs() < 1e-10);
        }

        #[test]
        fn affine_commutes_with_moments(a in arb_mixture(2), q in prop::collection::vec(-2.0f64..2.0, 6), t in prop::collection::vec(-1.0f64..1.0, 3)) {
            let q = DMatrix::from_vec(3, 2, q);
            let t = DVector::from_vec(t);
            let (m, c) = a.moments();
            let (mq, cq) = a.affine_map(&q, &t).unwrap().moments();
            prop_assert!((mq - (&q * m + t)).norm() < 1e-12);
            prop_assert!((cq - &q * c * q.transpose()).norm() < 1e-11);
        }

        #[test]
        fn grid_reduce_matches_linear_first_fit(a in arb_mixture(2), d in 0.0f64..3.0, dk in 0.0f64..3.0) {
            let b = a.independent_sum(&a).unwrap().independent_sum(&a).unwrap();
            let cfg = ReductionConfig::new(d, dk).unwrap();
            let fast = b.reduce(&cfg);
            let mut order: Vec<&GaussianMode> = b.modes().iter().collect();
            order.sort_by(|x, y| canonical_order(x, y));
            let mut reps: Vec<(&GaussianMode, f64)> = Vec::new();
            for m in order {
                match reps.iter_mut().find(|(r, _)| {
                    (&m.mean - &r.mean).norm() <= d && (&m.cov - &r.cov).norm() <= dk
                }) {
                    Some(slot) => slot.1 += m.weight,
                    None => reps.push((m, m.weight)),
                }
            }
            prop_assert_eq!(fast.len(), reps.len());
            for (f, (_, w)) in fast.modes().iter().zip(&reps) {
                prop_assert!((f.weight - w).abs() < 1e-12);
            }
        }

        #[test]
        fn reduce_preserves_weight_and_mean(a in arb_mixture(2), d in 0.0f64..3.0) {
            let b = a.independent_sum(&a).unwrap();
            let r = b.reduce(&ReductionConfig::new(d, d).unwrap());
            prop_assert!((r.total_weight() - 1.0).abs() < 1e-10);
            prop_assert!((r.moments().0 - b.moments().0).norm() < 1e-10);
            // moment matching keeps the overall covariance as well
            prop_assert!((r.moments().1 - b.moments().1).norm() < 1e-9 * (1.0 + b.moments().1.norm()));
        }

        #[test]
        fn cdf_is_monotone(a in arb_mixture(1), x in -10.0f64..10.0, dx in 0.0f64..5.0) {
            prop_assert!(a.cdf_1d(x).unwrap() <= a.cdf_1d(x + dx).unwrap() + 1e-15);
        }
    }
}
