//! Comparison controllers: zeroth-order policy optimization with two-point
//! rollout estimates, and nominal receding-horizon control.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::lqr::{lqr_cost, LqrWeights};
use crate::mathkit::{solve_dare, spectral_radius};
use crate::rng::{substream, Stream};
use crate::{par, Error, Mat, Result, Vector};

/// Rollouts whose state norm exceeds this are treated as unstable.
pub const ROLLOUT_DIVERGENCE: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZopoConfig {
    /// Smoothing radius in gain space.
    pub radius: f64,
    /// Rollout length in steps.
    pub rollout_len: usize,
    /// Direction pairs per gradient estimate.
    pub n_dir: usize,
    pub step: f64,
}

impl Default for ZopoConfig {
    fn default() -> Self {
        ZopoConfig {
            radius: 0.05,
            rollout_len: 150,
            n_dir: 10,
            step: 1e-3,
        }
    }
}

impl ZopoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) || self.rollout_len == 0 || self.n_dir == 0 || !(self.step >= 0.0) {
            return Err(Error::Config(format!("invalid zeroth-order configuration {self:?}")));
        }
        Ok(())
    }

    /// Samples consumed by one gradient estimate.
    pub fn samples_per_update(&self) -> usize {
        2 * self.rollout_len * self.n_dir
    }
}

/// Linear plant driven by process noise `σ_w B_w w` and exploration `σ_s v`.
#[derive(Debug, Clone)]
pub struct RolloutSystem {
    pub a: Mat,
    pub b: Mat,
    pub b_w: Mat,
    pub sigma_w: f64,
    pub sigma_s: f64,
}

impl RolloutSystem {
    /// `U_ε = σ_w² B_w B_wᵀ + σ_s² B Bᵀ`.
    pub fn u_eps(&self) -> Mat {
        &self.b_w * self.b_w.transpose() * self.sigma_w.powi(2)
            + &self.b * self.b.transpose() * self.sigma_s.powi(2)
    }

    fn draw_noise(&self, rng: &mut ChaCha8Rng, len: usize) -> Vec<Vector> {
        let (n, m, d) = (self.a.nrows(), self.b.ncols(), self.b_w.ncols());
        (0..len)
            .map(|_| {
                let w = Vector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                let v = Vector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
                let mut eps = &self.b_w * w * self.sigma_w;
                eps += &self.b * v * self.sigma_s;
                debug_assert_eq!(eps.len(), n);
                eps
            })
            .collect()
    }

    /// Empirical cost `(1/l) Σ xᵀ(Q + KᵀRK)x` of a rollout from the origin;
    /// `+∞` when the state blows up.
    pub fn rollout_cost(&self, k: &Mat, w: &LqrWeights, noise: &[Vector]) -> f64 {
        let a_cl = &self.a + &self.b * k;
        let stage = w.stage(k);
        let mut x = Vector::zeros(self.a.nrows());
        let mut acc = 0.0;
        for eps in noise {
            x = &a_cl * &x + eps;
            let nx = x.norm();
            if !(nx <= ROLLOUT_DIVERGENCE) {
                return f64::INFINITY;
            }
            acc += x.dot(&(&stage * &x));
        }
        acc / noise.len() as f64
    }
}

/// Uniform direction on the unit Frobenius sphere.
fn sphere(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Mat {
    loop {
        let u = Mat::from_fn(m, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let nu = u.norm();
        if nu > 0.0 {
            return u / nu;
        }
    }
}

/// Outcome of one two-point gradient estimate.
#[derive(Debug, Clone)]
pub struct ZoEstimate {
    pub grad: Mat,
    /// Samples spent, discarded pairs included.
    pub samples: usize,
    pub discarded: usize,
}

/// Generic two-point estimator
/// `ĝ = (d / 2r) · mean_i (f(K + rUᵢ) − f(K − rUᵢ)) Uᵢ` with `d = mn`.
/// `f` receives the perturbed gain and the pair's random stream, so both
/// sides of a pair can share their random numbers. Pairs with a
/// non-finite side are discarded and redrawn, at most `4 n_dir` times.
pub fn two_point_estimate<F>(k: &Mat, radius: f64, n_dir: usize, seed: u64, round: u64, f: F) -> (Mat, usize)
where
    F: Fn(&Mat, &mut ChaCha8Rng) -> f64 + Sync + Send,
{
    let (m, n) = k.shape();
    let d = (m * n) as f64;
    let mut acc = Mat::zeros(m, n);
    let mut kept = 0usize;
    let mut attempts = 0usize;
    let max_attempts = 5 * n_dir;
    while kept < n_dir && attempts < max_attempts {
        let batch: Vec<u64> = (attempts..attempts + (n_dir - kept)).map(|i| i as u64).collect();
        attempts += batch.len();
        let results = par::map(batch, |i| {
            let mut rng = substream(seed, Stream::ZoDirections, round << 20 | i);
            let u = sphere(&mut rng, m, n);
            let crn = rng.clone();
            let fp = f(&(k + &u * radius), &mut crn.clone());
            let fm = f(&(k - &u * radius), &mut crn.clone());
            (u, fp, fm)
        });
        for (u, fp, fm) in results {
            if fp.is_finite() && fm.is_finite() {
                acc += u * (fp - fm);
                kept += 1;
            }
        }
    }
    if kept == 0 {
        return (Mat::zeros(m, n), attempts);
    }
    (acc * (d / (2.0 * radius * kept as f64)), attempts)
}

pub fn zopo_gradient(
    k: &Mat,
    sys: &RolloutSystem,
    w: &LqrWeights,
    cfg: &ZopoConfig,
    seed: u64,
    round: u64,
) -> ZoEstimate {
    let len = cfg.rollout_len;
    let (grad, attempts) = two_point_estimate(k, cfg.radius, cfg.n_dir, seed, round, |kk, rng| {
        if spectral_radius(&(&sys.a + &sys.b * kk)) >= 1.0 {
            return f64::INFINITY;
        }
        let noise = sys.draw_noise(rng, len);
        sys.rollout_cost(kk, w, &noise)
    });
    if attempts > cfg.n_dir {
        log::debug!("zeroth-order round {round}: {} pairs redrawn", attempts - cfg.n_dir);
    }
    ZoEstimate {
        grad,
        samples: attempts * 2 * len,
        discarded: attempts.saturating_sub(cfg.n_dir),
    }
}

/// Learning curve of zeroth-order policy optimization: `(samples, C(K))`
/// pairs, starting with `(0, C(K₀))`.
pub fn zopo_run(
    sys: &RolloutSystem,
    k0: &Mat,
    w: &LqrWeights,
    cfg: &ZopoConfig,
    budget_samples: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    cfg.validate()?;
    let u_eps = sys.u_eps();
    let mut k = k0.clone();
    let mut used = 0usize;
    let mut trace = vec![(0, lqr_cost(&sys.a, &sys.b, &k, w, &u_eps))];
    let mut round = 0u64;
    while used + cfg.samples_per_update() <= budget_samples {
        let est = zopo_gradient(&k, sys, w, cfg, seed, round);
        round += 1;
        used += est.samples;
        let cand = &k - est.grad * cfg.step;
        let c = lqr_cost(&sys.a, &sys.b, &cand, w, &u_eps);
        if c.is_finite() {
            k = cand;
        } else {
            log::debug!("zeroth-order step {round} would destabilize; gain kept");
        }
        trace.push((used, lqr_cost(&sys.a, &sys.b, &k, w, &u_eps)));
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    pub horizon: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig { horizon: 20 }
    }
}

/// First-step gain of the unconstrained finite-horizon problem with
/// terminal weight from the nominal Riccati equation.
pub fn mpc_gain(a: &Mat, b: &Mat, w: &LqrWeights, cfg: &MpcConfig) -> Result<Mat> {
    if cfg.horizon == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    let mut p = solve_dare(a, b, &w.q, &w.r)?.p;
    let gain = |p: &Mat| -> Result<Mat> {
        let s = &w.r + b.transpose() * p * b;
        s.cholesky()
            .map(|c| -c.solve(&(b.transpose() * p * a)))
            .ok_or_else(|| Error::NotStabilizable("singular input weighting in recursion".into()))
    };
    for _ in 1..cfg.horizon {
        let k = gain(&p)?;
        let a_cl = a + b * &k;
        p = &w.q + k.transpose() * &w.r * &k + a_cl.transpose() * &p * &a_cl;
        p = crate::mathkit::symmetrize(&p);
    }
    gain(&p)
}
