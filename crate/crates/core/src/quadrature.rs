//! Composite Gauss–Legendre quadrature with panel doubling.

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// `n`-point rule; nodes by Newton iteration on `P_n`.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        if n == 1 {
            return Self {
                nodes: vec![0.0],
                weights: vec![2.0],
            };
        }
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let nf = n as f64;
        for i in 0..n.div_ceil(2) {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
            let mut dp = 1.0;
            for _ in 0..100 {
                // three-term recurrence: p1 = P_n(x), p0 = P_{n-1}(x)
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let kf = k as f64;
                    let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                    p0 = p1;
                    p1 = p2;
                }
                dp = nf * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            weights[i] = w;
            nodes[n - 1 - i] = x;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    /// Composite rule over `panels` equal sub-intervals of `[a, b]`.
    pub fn composite(&self, f: &mut impl FnMut(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
        let h = (b - a) / panels as f64;
        let mut total = 0.0;
        for k in 0..panels {
            let mid = a + (k as f64 + 0.5) * h;
            let half = 0.5 * h;
            let mut s = 0.0;
            for (x, w) in self.nodes.iter().zip(&self.weights) {
                s += w * f(mid + half * x);
            }
            total += s * half;
        }
        total
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoublingOptions {
    /// Points per panel.
    pub order: usize,
    pub initial_panels: usize,
    /// Absolute tolerance on successive estimates.
    pub tol: f64,
    pub max_doublings: usize,
}

impl Default for DoublingOptions {
    fn default() -> Self {
        Self {
            order: 8,
            initial_panels: 2,
            tol: 1e-8,
            max_doublings: 12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadEstimate {
    pub value: f64,
    /// |last - previous| at termination.
    pub error: f64,
    pub converged: bool,
}

/// Doubles the panel count until two successive estimates agree to `tol`.
pub fn integrate(
    mut f: impl FnMut(f64) -> f64,
    a: f64,
    b: f64,
    opts: &DoublingOptions,
) -> QuadEstimate {
    let rule = GaussLegendre::new(opts.order);
    let mut panels = opts.initial_panels.max(1);
    let mut prev = rule.composite(&mut f, a, b, panels);
    let mut err = f64::INFINITY;
    for _ in 0..opts.max_doublings {
        panels *= 2;
        let cur = rule.composite(&mut f, a, b, panels);
        err = (cur - prev).abs();
        prev = cur;
        if err < opts.tol {
            return QuadEstimate {
                value: cur,
                error: err,
                converged: true,
            };
        }
    }
    QuadEstimate {
        value: prev,
        error: err,
        converged: false,
    }
}
