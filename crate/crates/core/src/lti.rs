//! Plant/observer pair, residual weights, settling horizon, the Gaussian
//! baseline Lyapunov solve, and trajectory simulation.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, spectral_norm};

/// RNG used for every seeded stream in the crate.
pub type SimRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Discrete-time plant `x+ = F x + G u + v`, `y = C x + eta` with a
/// Luenberger observer of gain `L`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    f: DMatrix<f64>,
    g: DMatrix<f64>,
    c: DMatrix<f64>,
    l: DMatrix<f64>,
    closed_loop: DMatrix<f64>,
    spectral_radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub spectral_radius: f64,
    pub stable: bool,
    /// Eigenvalue of F - LC with the largest modulus, as (re, im).
    pub dominant_eigenvalue: (f64, f64),
}

/// Checks dimensions and reports the spectral radius of `F - LC`.
///
/// A dimension mismatch is an error; an unstable closed loop is not, it is
/// reported through `stable == false`.
pub fn validate_system(
    f: &DMatrix<f64>,
    g: &DMatrix<f64>,
    c: &DMatrix<f64>,
    l: &DMatrix<f64>,
) -> Result<StabilityReport> {
    let n = f.nrows();
    if n == 0 || !f.is_square() {
        return Err(Error::dim(
            "F",
            "square n x n",
            format!("{}x{}", f.nrows(), f.ncols()),
        ));
    }
    if g.nrows() != n || g.ncols() == 0 {
        return Err(Error::dim(
            "G",
            format!("{n} x m"),
            format!("{}x{}", g.nrows(), g.ncols()),
        ));
    }
    if c.ncols() != n || c.nrows() == 0 {
        return Err(Error::dim(
            "C",
            format!("p x {n}"),
            format!("{}x{}", c.nrows(), c.ncols()),
        ));
    }
    let p = c.nrows();
    if l.nrows() != n || l.ncols() != p {
        return Err(Error::dim(
            "L",
            format!("{n}x{p}"),
            format!("{}x{}", l.nrows(), l.ncols()),
        ));
    }
    let closed = f - l * c;
    let eig = closed.complex_eigenvalues();
    let dominant = eig
        .iter()
        .copied()
        .max_by(|a, b| a.norm().total_cmp(&b.norm()))
        .expect("n >= 1");
    let rho = dominant.norm();
    Ok(StabilityReport {
        spectral_radius: rho,
        stable: rho < 1.0,
        dominant_eigenvalue: (dominant.re, dominant.im),
    })
}

impl LtiSystem {
    /// Builds a system, rejecting inconsistent dimensions and unstable `F - LC`.
    pub fn new(f: DMatrix<f64>, g: DMatrix<f64>, c: DMatrix<f64>, l: DMatrix<f64>) -> Result<Self> {
        let report = validate_system(&f, &g, &c, &l)?;
        if !report.stable {
            let (re, im) = report.dominant_eigenvalue;
            return Err(Error::Unstable {
                re,
                im,
                modulus: report.spectral_radius,
            });
        }
        let closed_loop = &f - &l * &c;
        Ok(Self {
            f,
            g,
            c,
            l,
            closed_loop,
            spectral_radius: report.spectral_radius,
        })
    }

    /// System with `G = 0` (single zero input column).
    pub fn without_input(f: DMatrix<f64>, c: DMatrix<f64>, l: DMatrix<f64>) -> Result<Self> {
        let g = DMatrix::zeros(f.nrows(), 1);
        Self::new(f, g, c, l)
    }

    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }
    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }
    /// `F - LC`.
    pub fn closed_loop(&self) -> &DMatrix<f64> {
        &self.closed_loop
    }
    pub fn spectral_radius(&self) -> f64 {
        self.spectral_radius
    }
    /// State dimension.
    pub fn n(&self) -> usize {
        self.f.nrows()
    }
    /// Output dimension.
    pub fn p(&self) -> usize {
        self.c.nrows()
    }
    /// Input dimension.
    pub fn m(&self) -> usize {
        self.g.ncols()
    }

    pub fn stability(&self) -> StabilityReport {
        validate_system(&self.f, &self.g, &self.c, &self.l).expect("validated at construction")
    }
}

/// Linear-combination weights of the residual at horizon `k`:
/// `r_k = sum_{κ=1..k} A_κ η + sum_{κ=1..k-1} B_κ v` (independent draws).
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualWeights {
    pub horizon: usize,
    /// `A_1 = I`, `A_κ = -C (F-LC)^{κ-2} L`.
    pub a: Vec<DMatrix<f64>>,
    /// `B_κ = C (F-LC)^{κ-1}`, κ = 1..k-1.
    pub b: Vec<DMatrix<f64>>,
}

pub fn residual_weights(sys: &LtiSystem, k: usize) -> Result<ResidualWeights> {
    if k == 0 {
        return Err(Error::Domain(
            "residual horizon k must be at least 1".into(),
        ));
    }
    let p = sys.p();
    let mut a = Vec::with_capacity(k);
    let mut b = Vec::with_capacity(k - 1);
    a.push(DMatrix::identity(p, p));
    // power = (F-LC)^{j}, starting at j = 0
    let mut power = DMatrix::identity(sys.n(), sys.n());
    for _ in 2..=k {
        // power = (F-LC)^{κ-2}, so c_pow is both A_κ's prefix and B_{κ-1}
        let c_pow = sys.c() * &power;
        a.push(-(&c_pow * sys.l()));
        b.push(c_pow);
        power = sys.closed_loop() * &power;
    }
    Ok(ResidualWeights { horizon: k, a, b })
}

/// Smallest `k` with `||(F-LC)^{k-1}||_2 * max(1, ||L||_2) * ||C||_2 < tail_tol`.
///
/// The first dropped weights are `A_{k+1} = -C (F-LC)^{k-1} L` and
/// `B_k = C (F-LC)^{k-1}`, so the bound covers both. The bound must also hold
/// for the next `n` powers, which screens out transient dips of non-normal
/// closed loops.
pub fn settling_horizon(sys: &LtiSystem, tail_tol: f64) -> Result<usize> {
    if !(tail_tol > 0.0) {
        return Err(Error::Domain(format!(
            "tail_tol must be positive, got {tail_tol}"
        )));
    }
    let scale = spectral_norm(sys.c()) * spectral_norm(sys.l()).max(1.0);
    let lookahead = sys.n();
    const MAX_HORIZON: usize = 1_000_000;

    let mut power = DMatrix::identity(sys.n(), sys.n());
    let mut candidate: Option<usize> = None;
    let mut j = 0usize;
    loop {
        if spectral_norm(&power) * scale < tail_tol {
            let start = *candidate.get_or_insert(j);
            if j - start >= lookahead {
                return Ok(start + 1);
            }
        } else {
            candidate = None;
        }
        if j >= MAX_HORIZON {
            return Err(Error::Domain(format!(
                "settling horizon exceeds {MAX_HORIZON} steps for tail_tol {tail_tol}"
            )));
        }
        power = sys.closed_loop() * &power;
        j += 1;
    }
}

/// Solves `(F-LC) P (F-LC)^T - P + R1 + L R2 L^T = 0` and returns `(P, C P C^T + R2)`.
pub fn lyapunov_residual_cov(
    sys: &LtiSystem,
    r1: &DMatrix<f64>,
    r2: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, p) = (sys.n(), sys.p());
    if r1.shape() != (n, n) {
        return Err(Error::dim(
            "R1",
            format!("{n}x{n}"),
            format!("{}x{}", r1.nrows(), r1.ncols()),
        ));
    }
    if r2.shape() != (p, p) {
        return Err(Error::dim(
            "R2",
            format!("{p}x{p}"),
            format!("{}x{}", r2.nrows(), r2.ncols()),
        ));
    }
    if sys.spectral_radius() >= 1.0 {
        return Err(Error::Domain(
            "Lyapunov equation has no solution for unstable F - LC".into(),
        ));
    }
    let q = r1 + sys.l() * r2 * sys.l().transpose();
    let p_mat = stein_solve(sys.closed_loop(), &q)?;
    let sigma = linalg::symmetrize(&(sys.c() * &p_mat * sys.c().transpose() + r2));
    Ok((p_mat, sigma))
}

/// Solves `X = A X A^T + Q` for stable `A` by squared Smith iteration,
/// a doubling form of the fixed point `X <- A X A^T + Q` started at 0.
pub fn stein_solve(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut x = q.clone();
    let mut ak = a.clone();
    for _ in 0..64 {
        let update = &ak * &x * ak.transpose();
        let rel = update.norm() / x.norm().max(f64::MIN_POSITIVE);
        x += update;
        ak = &ak * &ak;
        if rel < 1e-16 || ak.norm() == 0.0 {
            break;
        }
    }
    let x = linalg::symmetrize(&x);
    let residual = (a * &x * a.transpose() - &x + q).norm();
    if residual > 1e-10 * x.norm().max(1e-300) {
        // Polish with plain fixed-point steps; converges linearly from a good start.
        let mut x = x;
        for _ in 0..10_000 {
            let next = linalg::symmetrize(&(a * &x * a.transpose() + q));
            let change = (&next - &x).norm();
            x = next;
            if change <= 1e-12 * x.norm() {
                break;
            }
        }
        return Ok(x);
    }
    Ok(x)
}

/// Source of iid noise vectors for simulation.
pub trait NoiseSource: Sync {
    fn dim(&self) -> usize;
    fn draw_into(&self, rng: &mut SimRng, out: &mut DVector<f64>);
}

/// Identically zero noise.
#[derive(Debug, Clone, Copy)]
pub struct ZeroNoise(pub usize);

impl NoiseSource for ZeroNoise {
    fn dim(&self) -> usize {
        self.0
    }
    fn draw_into(&self, _rng: &mut SimRng, out: &mut DVector<f64>) {
        out.fill(0.0);
    }
}

/// Recorded trajectory. Index `k` of every field refers to the same step.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub states: Vec<DVector<f64>>,
    pub estimates: Vec<DVector<f64>>,
    pub outputs: Vec<DVector<f64>>,
    pub residuals: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
}

impl SimTrace {
    /// Estimation errors `e_k = x_k - x̂_k`.
    pub fn errors(&self) -> Vec<DVector<f64>> {
        self.states
            .iter()
            .zip(&self.estimates)
            .map(|(x, xh)| x - xh)
            .collect()
    }
}

/// Simulates plant and observer from `x_0 = x̂_0 = 0`.
///
/// `inputs` may be empty (zero input) or hold exactly `steps` vectors.
pub fn simulate(
    sys: &LtiSystem,
    noise_v: &dyn NoiseSource,
    noise_eta: &dyn NoiseSource,
    inputs: &[DVector<f64>],
    steps: usize,
    seed: u64,
) -> Result<SimTrace> {
    let (n, p, m) = (sys.n(), sys.p(), sys.m());
    if noise_v.dim() != n {
        return Err(Error::dim("noise_v", n, noise_v.dim()));
    }
    if noise_eta.dim() != p {
        return Err(Error::dim("noise_eta", p, noise_eta.dim()));
    }
    if !inputs.is_empty() && inputs.len() != steps {
        return Err(Error::dim(
            "inputs",
            format!("{steps} vectors"),
            inputs.len(),
        ));
    }
    if let Some(u) = inputs.iter().find(|u| u.len() != m) {
        return Err(Error::dim("inputs", m, u.len()));
    }

    // Two streams so the noise realisation does not depend on the input.
    let mut rng_v = seeded_rng(seed, 0);
    let mut rng_eta = seeded_rng(seed, 1);
    let mut x = DVector::zeros(n);
    let mut xh = DVector::zeros(n);
    let mut v = DVector::zeros(n);
    let mut eta = DVector::zeros(p);
    let zero_u = DVector::zeros(m);

    let mut trace = SimTrace {
        states: Vec::with_capacity(steps),
        estimates: Vec::with_capacity(steps),
        outputs: Vec::with_capacity(steps),
        residuals: Vec::with_capacity(steps),
        inputs: Vec::with_capacity(steps),
    };
    for k in 0..steps {
        let u = inputs.get(k).unwrap_or(&zero_u);
        noise_eta.draw_into(&mut rng_eta, &mut eta);
        noise_v.draw_into(&mut rng_v, &mut v);
        let y = sys.c() * &x + &eta;
        let r = &y - sys.c() * &xh;
        let gu = sys.g() * u;
        let x_next = sys.f() * &x + &gu + &v;
        let xh_next = sys.f() * &xh + &gu + sys.l() * &r;
        trace.states.push(std::mem::replace(&mut x, x_next));
        trace.estimates.push(std::mem::replace(&mut xh, xh_next));
        trace.outputs.push(y);
        trace.residuals.push(r);
        trace.inputs.push(u.clone());
    }
    Ok(trace)
}

/// Allocation-free residual generator in error coordinates:
/// `r_k = C e_k + η_k`, `e_{k+1} = (F-LC) e_k - L η_k + v_k`.
///
/// Equivalent to [`simulate`] under perfect model knowledge, where the
/// residual does not depend on the input.
pub struct ResidualStepper<'a> {
    sys: &'a LtiSystem,
    noise_v: &'a dyn NoiseSource,
    noise_eta: &'a dyn NoiseSource,
    rng: SimRng,
    e: DVector<f64>,
    e_next: DVector<f64>,
    v: DVector<f64>,
    eta: DVector<f64>,
    r: DVector<f64>,
}

impl<'a> ResidualStepper<'a> {
    pub fn new(
        sys: &'a LtiSystem,
        noise_v: &'a dyn NoiseSource,
        noise_eta: &'a dyn NoiseSource,
        rng: SimRng,
    ) -> Result<Self> {
        let (n, p) = (sys.n(), sys.p());
        if noise_v.dim() != n {
            return Err(Error::dim("noise_v", n, noise_v.dim()));
        }
        if noise_eta.dim() != p {
            return Err(Error::dim("noise_eta", p, noise_eta.dim()));
        }
        Ok(Self {
            sys,
            noise_v,
            noise_eta,
            rng,
            e: DVector::zeros(n),
            e_next: DVector::zeros(n),
            v: DVector::zeros(n),
            eta: DVector::zeros(p),
            r: DVector::zeros(p),
        })
    }

    /// Advances one step and returns the residual of that step.
    pub fn step(&mut self) -> &DVector<f64> {
        self.noise_eta.draw_into(&mut self.rng, &mut self.eta);
        self.noise_v.draw_into(&mut self.rng, &mut self.v);
        self.r.copy_from(&self.eta);
        self.r.gemv(1.0, self.sys.c(), &self.e, 1.0);
        self.e_next.copy_from(&self.v);
        self.e_next.gemv(1.0, self.sys.closed_loop(), &self.e, 1.0);
        self.e_next.gemv(-1.0, self.sys.l(), &self.eta, 1.0);
        std::mem::swap(&mut self.e, &mut self.e_next);
        &self.r
    }
}
