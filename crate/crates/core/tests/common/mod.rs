#![allow(dead_code)]

use chi2tune::gmm::GaussianMode;
use chi2tune::lti::{seeded_rng, SimRng};
use chi2tune::{Gmm, LtiSystem};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub const TABLE_W: [f64; 6] = [0.0847, 0.2012, 0.1184, 0.3200, 0.1889, 0.0869];
pub const TABLE_MU: [f64; 6] = [-7.0877, -4.4709, -2.0082, 1.2318, 4.5240, 7.0504];
pub const TABLE_K: [f64; 6] = [2.1997, 0.4471, 0.2062, 1.0392, 0.3858, 2.2329];

pub fn m(rows: &[&[f64]]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
}

pub fn example_system() -> LtiSystem {
    LtiSystem::without_input(
        m(&[&[0.8, 0.2], &[-0.25, 0.1]]),
        m(&[&[0.5, 0.5]]),
        m(&[&[0.3], &[-0.3]]),
    )
    .unwrap()
}

/// Six-mode measurement noise; the printed weights sum to 1.0001 and are
/// renormalised.
pub fn table_mixture() -> Gmm {
    let modes = (0..6)
        .map(|i| {
            GaussianMode::new(
                TABLE_W[i],
                DVector::from_element(1, TABLE_MU[i]),
                DMatrix::from_element(1, 1, TABLE_K[i]),
            )
        })
        .collect();
    Gmm::normalized(modes).unwrap()
}

pub fn rng(seed: u64) -> SimRng {
    seeded_rng(seed, 0)
}

pub fn normal(rng: &mut SimRng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_matrix(rng: &mut SimRng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * normal(rng))
}

/// SPD matrix with eigenvalues roughly in `[lo, lo + spread]`.
pub fn random_spd(rng: &mut SimRng, d: usize, lo: f64, spread: f64) -> DMatrix<f64> {
    let a = random_matrix(rng, d, d, 1.0);
    let q = a.qr().q();
    let eig = DVector::from_fn(d, |_, _| lo + spread * rng.random::<f64>());
    &q * DMatrix::from_diagonal(&eig) * q.transpose()
}

/// Random system whose closed loop `F - LC` has spectral radius at most
/// `rho_max`.
pub fn random_system(rng: &mut SimRng, n: usize, p: usize, rho_max: f64) -> LtiSystem {
    loop {
        let c = random_matrix(rng, p, n, 1.0);
        let l = random_matrix(rng, n, p, 0.4);
        let a = random_matrix(rng, n, n, 1.0);
        let rho = a
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        if rho < 1e-6 {
            continue;
        }
        let target = rho_max * (0.3 + 0.7 * rng.random::<f64>());
        let a = a * (target / rho);
        let f = &a + &l * &c;
        let g = random_matrix(rng, n, 1, 1.0);
        if let Ok(sys) = LtiSystem::new(f, g, c, l) {
            return sys;
        }
    }
}

pub fn random_gmm(
    rng: &mut SimRng,
    d: usize,
    modes: usize,
    mean_scale: f64,
    cov_lo: f64,
    cov_spread: f64,
) -> Gmm {
    let raw: Vec<f64> = (0..modes).map(|_| 0.2 + rng.random::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    let ms = raw
        .iter()
        .map(|w| {
            GaussianMode::new(
                w / total,
                DVector::from_fn(d, |_, _| mean_scale * normal(rng)),
                random_spd(rng, d, cov_lo, cov_spread),
            )
        })
        .collect();
    Gmm::normalized(ms).unwrap()
}

pub fn rel_fro(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}
