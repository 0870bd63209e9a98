//! Covariance-parameterized policy optimization from closed-loop data.
//!
//! The gain is lifted to `V = Φ⁻¹[K; I]`, where `Φ = D₀D₀ᵀ/t` is the sample
//! covariance of `φ = [u; x]`. The surrogate
//! `J(V) = Tr((Q + VᵀŪ₀ᵀRŪ₀V) Û_K)` with `Û_K = Û_ε + (X̄₁V)Û_K(X̄₁V)ᵀ`
//! is then minimized over the affine set `X̄₀V = I`, either by projected
//! gradient steps or by ADAM steps followed by an affine projection.

use serde::{Deserialize, Serialize};

use crate::lqr::{self, DataBatch, LqrWeights};
use crate::mathkit::{spectral_radius, stein_stable, symmetrize};
use crate::{Error, Mat, Result, Vector};

/// Closed-loop surrogates with `ρ(X̄₁V)` at or above this are infeasible.
pub const FEASIBILITY_MARGIN: f64 = 1e-6;
/// Interval (in updates) between checks of the recursive inverse.
pub const RESYNC_INTERVAL: usize = 1000;
/// Allowed drift of `Φ·Φ⁻¹` from the identity.
pub const INVERSE_DRIFT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_HALVINGS: u32 = 30;

/// Running data moments of the closed loop.
#[derive(Debug, Clone)]
pub struct CovBuffers {
    n: usize,
    m: usize,
    t: usize,
    phi: Mat,
    phi_inv: Mat,
    xbar1: Mat,
    s11: Mat,
    since_check: usize,
    resync_every: Option<usize>,
}

impl CovBuffers {
    pub fn from_batch(batch: &DataBatch) -> Result<Self> {
        let (n, m, t) = (batch.n(), batch.m(), batch.len());
        if t < n + m {
            return Err(Error::InsufficientData {
                needed: n + m,
                have: t,
            });
        }
        let d0 = batch.d0();
        let tf = t as f64;
        let phi = symmetrize(&(&d0 * d0.transpose() / tf));
        lqr::check_condition(&phi)?;
        let phi_inv = invert_spd(&phi)?;
        Ok(CovBuffers {
            n,
            m,
            t,
            phi,
            phi_inv,
            xbar1: &batch.x1 * d0.transpose() / tf,
            s11: symmetrize(&(&batch.x1 * batch.x1.transpose() / tf)),
            since_check: 0,
            resync_every: Some(RESYNC_INTERVAL),
        })
    }

    /// Interval of direct re-inversion checks; `None` trusts the recursion.
    pub fn with_resync(mut self, every: Option<usize>) -> Self {
        self.resync_every = every;
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of samples absorbed so far.
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn phi(&self) -> &Mat {
        &self.phi
    }

    pub fn phi_inv(&self) -> &Mat {
        &self.phi_inv
    }

    /// `Ū₀ = U₀D₀ᵀ/t`, the top `m` rows of `Φ`.
    pub fn ubar0(&self) -> Mat {
        self.phi.rows(0, self.m).into_owned()
    }

    /// `X̄₀ = X₀D₀ᵀ/t`, the bottom `n` rows of `Φ`.
    pub fn xbar0(&self) -> Mat {
        self.phi.rows(self.m, self.n).into_owned()
    }

    pub fn xbar1(&self) -> &Mat {
        &self.xbar1
    }

    /// `X₀X₀ᵀ/t`.
    pub fn s00(&self) -> Mat {
        self.phi.view((self.m, self.m), (self.n, self.n)).into_owned()
    }

    /// `X₀X₁ᵀ/t`.
    pub fn s01(&self) -> Mat {
        self.xbar1.columns(self.m, self.n).transpose()
    }

    /// `X₁X₁ᵀ/t`.
    pub fn s11(&self) -> &Mat {
        &self.s11
    }

    pub fn sigma_min(&self) -> f64 {
        self.phi.symmetric_eigenvalues().min()
    }

    /// Absorbs one sample `(u_t, x_t, x_{t+1})`; the inverse follows by
    /// Sherman–Morrison.
    pub fn rank1_update(&mut self, u: &Vector, x: &Vector, x_next: &Vector) {
        let (m, n) = (self.m, self.n);
        let mut phi_t = Vector::zeros(m + n);
        phi_t.rows_mut(0, m).copy_from(u);
        phi_t.rows_mut(m, n).copy_from(x);
        let t = self.t as f64;
        let a = t / (t + 1.0);
        let b = 1.0 / (t + 1.0);

        let pv = &self.phi_inv * &phi_t;
        let denom = t + phi_t.dot(&pv);
        self.phi_inv = (&self.phi_inv - &pv * pv.transpose() / denom) * ((t + 1.0) / t);
        self.phi = &self.phi * a + &phi_t * phi_t.transpose() * b;
        self.xbar1 = &self.xbar1 * a + x_next * phi_t.transpose() * b;
        self.s11 = &self.s11 * a + x_next * x_next.transpose() * b;
        self.t += 1;

        self.since_check += 1;
        if let Some(every) = self.resync_every {
            if self.since_check >= every {
                self.since_check = 0;
                let drift = self.inverse_drift();
                if drift > INVERSE_DRIFT_TOL {
                    log::warn!("recursive inverse drifted by {drift:.3e} at t = {}; resyncing", self.t);
                    if let Ok(inv) = invert_spd(&self.phi) {
                        self.phi_inv = inv;
                    }
                }
            }
        }
    }

    /// `‖Φ·Φ⁻¹ − I‖_F` of the recursively maintained inverse.
    pub fn inverse_drift(&self) -> f64 {
        let k = self.m + self.n;
        (&self.phi * &self.phi_inv - Mat::identity(k, k)).norm()
    }
}

fn invert_spd(m: &Mat) -> Result<Mat> {
    match m.clone().cholesky() {
        Some(c) => Ok(c.inverse()),
        None => Err(Error::RankDeficientData {
            cond: f64::INFINITY,
        }),
    }
}

/// `(X̄₀X̄₀ᵀ)⁻¹` through a Cholesky factor.
fn gram_inverse(xbar0: &Mat) -> Result<Mat> {
    let g = xbar0 * xbar0.transpose();
    g.cholesky()
        .map(|c| c.inverse())
        .ok_or(Error::RankDeficientData {
            cond: f64::INFINITY,
        })
}

/// `V = Φ⁻¹[K; I]`.
pub fn lift(buf: &CovBuffers, k: &Mat) -> Mat {
    let (m, n) = (buf.m, buf.n);
    let mut ki = Mat::zeros(m + n, n);
    ki.rows_mut(0, m).copy_from(k);
    ki.rows_mut(m, n).fill_with_identity();
    &buf.phi_inv * ki
}

/// `K = Ū₀V`.
pub fn recover_gain(buf: &CovBuffers, v: &Mat) -> Mat {
    buf.phi.rows(0, buf.m) * v
}

/// Residual covariance `(X₁ − X̄₁VX₀)(X₁ − X̄₁VX₀)ᵀ/t` from the running
/// moments.
pub fn noise_cov_estimate(buf: &CovBuffers, v: &Mat) -> Mat {
    let mm = &buf.xbar1 * v;
    let s01 = buf.s01();
    let cross = &mm * &s01;
    symmetrize(&(&buf.s11 - &cross - cross.transpose() + &mm * buf.s00() * mm.transpose()))
}

/// Surrogate value with the intermediate Lyapunov solutions.
#[derive(Debug, Clone)]
pub struct SurrogateEval {
    pub j: f64,
    /// `Tr(P_V Û_ε)`, equal to `j` up to rounding.
    pub j_dual: f64,
    pub u_k: Mat,
    pub p_v: Mat,
    pub rho: f64,
}

pub fn surrogate_eval(
    buf: &CovBuffers,
    v: &Mat,
    w: &LqrWeights,
    u_eps_hat: &Mat,
) -> Result<SurrogateEval> {
    let a_v = &buf.xbar1 * v;
    let rho = spectral_radius(&a_v);
    if !(rho < 1.0 - FEASIBILITY_MARGIN) {
        return Err(Error::Infeasible { rho });
    }
    let k = recover_gain(buf, v);
    let stage = w.stage(&k);
    let u_k = stein_stable(&a_v, u_eps_hat);
    let p_v = stein_stable(&a_v.transpose(), &stage);
    Ok(SurrogateEval {
        j: (&stage * &u_k).trace(),
        j_dual: (&p_v * u_eps_hat).trace(),
        u_k,
        p_v,
        rho,
    })
}

pub fn surrogate_cost(buf: &CovBuffers, v: &Mat, w: &LqrWeights, u_eps_hat: &Mat) -> Result<f64> {
    surrogate_eval(buf, v, w, u_eps_hat).map(|e| e.j)
}

fn gradient_from(buf: &CovBuffers, v: &Mat, w: &LqrWeights, ev: &SurrogateEval) -> Mat {
    let ubar0 = buf.ubar0();
    let h = ubar0.transpose() * &w.r * &ubar0 + buf.xbar1.transpose() * &ev.p_v * &buf.xbar1;
    h * v * &ev.u_k * 2.0
}

/// `∇J = 2(Ū₀ᵀRŪ₀ + X̄₁ᵀP_VX̄₁) V Û_K`.
pub fn gradient(buf: &CovBuffers, v: &Mat, w: &LqrWeights, u_eps_hat: &Mat) -> Result<Mat> {
    let ev = surrogate_eval(buf, v, w, u_eps_hat)?;
    Ok(gradient_from(buf, v, w, &ev))
}

/// Orthogonal projection onto `{Δ : X̄₀Δ = 0}`.
pub fn project_tangent(g: &Mat, xbar0: &Mat) -> Result<Mat> {
    let gi = gram_inverse(xbar0)?;
    Ok(g - xbar0.transpose() * (gi * (xbar0 * g)))
}

/// Nearest point of `{V : X̄₀V = I}` in Frobenius norm.
pub fn affine_project(v_tilde: &Mat, xbar0: &Mat) -> Result<Mat> {
    let n = xbar0.nrows();
    let gi = gram_inverse(xbar0)?;
    Ok(v_tilde + xbar0.transpose() * (gi * (Mat::identity(n, n) - xbar0 * v_tilde)))
}

/// Stepsize schedule of the ADAM variant, indexed by `t − t₀`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant { eta: f64 },
    /// `η₀ / √(t − t₀ + 1)`.
    InvSqrt { eta0: f64 },
}

impl Schedule {
    pub fn at(&self, k: usize) -> f64 {
        match *self {
            Schedule::Constant { eta } => eta,
            Schedule::InvSqrt { eta0 } => eta0 / ((k + 1) as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHyper {
    pub schedule: Schedule,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamHyper {
    pub fn with_eta0(eta0: f64) -> Self {
        AdamHyper {
            schedule: Schedule::InvSqrt { eta0 },
            ..Default::default()
        }
    }
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            schedule: Schedule::InvSqrt { eta0: 1e-2 },
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Current lifted variable, gain and optimizer memory.
#[derive(Debug, Clone)]
pub struct PolicyState {
    pub k: Mat,
    pub v: Mat,
    pub adam_m: Mat,
    pub adam_v: Mat,
    /// Updates performed since the warm start, `t − t₀`.
    pub step: usize,
}

impl PolicyState {
    pub fn new(buf: &CovBuffers, k: Mat) -> Self {
        let v = lift(buf, &k);
        let shape = v.shape();
        PolicyState {
            k,
            v,
            adam_m: Mat::zeros(shape.0, shape.1),
            adam_v: Mat::zeros(shape.0, shape.1),
            step: 0,
        }
    }
}

pub fn warm_start(batch: &DataBatch, k0: &Mat) -> Result<(CovBuffers, PolicyState)> {
    if k0.shape() != (batch.m(), batch.n()) {
        return Err(Error::DimensionMismatch(format!(
            "gain {:?} for m = {}, n = {}",
            k0.shape(),
            batch.m(),
            batch.n()
        )));
    }
    let buf = CovBuffers::from_batch(batch)?;
    let pol = PolicyState::new(&buf, k0.clone());
    Ok((buf, pol))
}

/// Diagnostics of one accepted update.
#[derive(Debug, Clone)]
pub struct StepInfo {
    pub eta: f64,
    pub halvings: u32,
    pub grad_norm: f64,
    /// `ρ(X̄₁V')` of the accepted candidate.
    pub rho: f64,
    pub surrogate: f64,
    /// Range `[min, max]` of the applied elementwise preconditioner `1/D`.
    pub precond: Option<(f64, f64)>,
    /// Constraint residual `‖X̄₀V' − I‖_F`.
    pub constraint: f64,
}

fn feasible_rho(buf: &CovBuffers, v: &Mat) -> Option<f64> {
    let rho = spectral_radius(&(&buf.xbar1 * v));
    (rho < 1.0 - FEASIBILITY_MARGIN && v.iter().all(|x| x.is_finite())).then_some(rho)
}

fn constraint_residual(xbar0: &Mat, v: &Mat) -> f64 {
    let n = xbar0.nrows();
    (xbar0 * v - Mat::identity(n, n)).norm()
}

/// Searches `η, η/2, η/4, …` for a candidate that keeps `ρ(X̄₁V') < 1`.
fn backtrack(
    buf: &CovBuffers,
    max_halvings: u32,
    eta: f64,
    candidate: impl Fn(f64) -> Result<Mat>,
) -> Result<(Mat, f64, u32, f64)> {
    let mut e = eta;
    for h in 0..=max_halvings {
        let v = candidate(e)?;
        if let Some(rho) = feasible_rho(buf, &v) {
            return Ok((v, e, h, rho));
        }
        e *= 0.5;
    }
    Err(Error::StepRejected {
        halvings: max_halvings,
    })
}

fn estimate_or_identity(buf: &CovBuffers, v: &Mat, identity_cov: bool) -> Mat {
    if identity_cov {
        Mat::identity(buf.n, buf.n)
    } else {
        noise_cov_estimate(buf, v)
    }
}

/// One projected gradient step `V' = V − ηΠ∇J(V)`, `K⁺ = Ū₀V'`.
pub fn gd_step(
    buf: &CovBuffers,
    pol: &mut PolicyState,
    w: &LqrWeights,
    eta: f64,
    u_eps_hat: &Mat,
    max_halvings: u32,
) -> Result<StepInfo> {
    let ev = surrogate_eval(buf, &pol.v, w, u_eps_hat)?;
    let xbar0 = buf.xbar0();
    let g = project_tangent(&gradient_from(buf, &pol.v, w, &ev), &xbar0)?;
    let (v_new, eta_used, halvings, rho) =
        backtrack(buf, max_halvings, eta, |e| Ok(&pol.v - &g * e))?;
    pol.k = recover_gain(buf, &v_new);
    let constraint = constraint_residual(&xbar0, &v_new);
    pol.v = v_new;
    pol.step += 1;
    Ok(StepInfo {
        eta: eta_used,
        halvings,
        grad_norm: g.norm(),
        rho,
        surrogate: ev.j,
        precond: None,
        constraint,
    })
}

/// One ADAM step on `V` followed by the affine projection onto `X̄₀V = I`.
pub fn adam_step(
    buf: &CovBuffers,
    pol: &mut PolicyState,
    w: &LqrWeights,
    hyper: &AdamHyper,
    u_eps_hat: &Mat,
    max_halvings: u32,
) -> Result<StepInfo> {
    let ev = surrogate_eval(buf, &pol.v, w, u_eps_hat)?;
    let xbar0 = buf.xbar0();
    // Moments track the gradient restricted to the constraint set; the
    // component normal to it carries no information about the gain.
    let g = project_tangent(&gradient_from(buf, &pol.v, w, &ev), &xbar0)?;
    let k = pol.step;
    let expo = (k + 1) as i32;
    let m_new = &pol.adam_m * hyper.beta1 + &g * (1.0 - hyper.beta1);
    let v_new = &pol.adam_v * hyper.beta2 + g.map(|x| x * x) * (1.0 - hyper.beta2);
    let bc1 = 1.0 - hyper.beta1.powi(expo);
    let bc2 = 1.0 - hyper.beta2.powi(expo);
    let d = v_new.map(|x| (x / bc2).sqrt() + hyper.epsilon);
    let dir = (&m_new / bc1).component_div(&d);
    let precond = d.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &x| {
        (lo.min(1.0 / x), hi.max(1.0 / x))
    });
    let (v_next, eta_used, halvings, rho) =
        backtrack(buf, max_halvings, hyper.schedule.at(k), |e| {
            affine_project(&(&pol.v - &dir * e), &xbar0)
        })?;
    pol.adam_m = m_new;
    pol.adam_v = v_new;
    pol.k = recover_gain(buf, &v_next);
    let constraint = constraint_residual(&xbar0, &v_next);
    pol.v = v_next;
    pol.step += 1;
    Ok(StepInfo {
        eta: eta_used,
        halvings,
        grad_norm: g.norm(),
        rho,
        surrogate: ev.j,
        precond: Some(precond),
        constraint,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    Gd { eta: f64 },
    Adam(AdamHyper),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeepoOptions {
    pub optimizer: Optimizer,
    /// Use `Û_ε = I` instead of the residual estimate.
    pub identity_cov: bool,
    /// Re-lift `V = Φ⁻¹[K; I]` after every data update (`false` carries the
    /// previous `V'` forward through an affine projection).
    pub relift: bool,
    pub max_halvings: u32,
    /// Signal unit: every sample is divided by it before entering the
    /// buffers. Gains are invariant under a common scaling of states and
    /// inputs, so this only fixes the units the step sizes refer to.
    /// `None` leaves the data as they are; the simulator fills it with the
    /// exploration level.
    pub data_unit: Option<f64>,
}

impl Default for DeepoOptions {
    fn default() -> Self {
        DeepoOptions {
            optimizer: Optimizer::Gd { eta: 1e-3 },
            identity_cov: false,
            relift: true,
            max_halvings: DEFAULT_MAX_HALVINGS,
            data_unit: None,
        }
    }
}

/// Online learner owning one buffer/policy pair.
#[derive(Debug, Clone)]
pub struct DeepoLearner {
    pub buf: CovBuffers,
    pub pol: PolicyState,
    pub weights: LqrWeights,
    pub opts: DeepoOptions,
    u_eps_hat: Mat,
    /// Factor applied to every sample before it enters the buffers.
    pub scale: f64,
    pub rejected: usize,
}

impl DeepoLearner {
    pub fn new(batch: &DataBatch, k0: &Mat, weights: LqrWeights, opts: DeepoOptions) -> Result<Self> {
        let scale = match opts.data_unit {
            Some(u) if u > 0.0 && u.is_finite() => 1.0 / u,
            Some(u) => return Err(Error::Config(format!("data unit {u} must be positive"))),
            None => 1.0,
        };
        let scaled = DataBatch::new(&batch.x0 * scale, &batch.u0 * scale, &batch.x1 * scale)?;
        let (buf, pol) = warm_start(&scaled, k0)?;
        let u_eps_hat = noise_cov_estimate(&buf, &pol.v) / (scale * scale);
        Ok(DeepoLearner {
            buf,
            pol,
            weights,
            opts,
            u_eps_hat,
            scale,
            rejected: 0,
        })
    }

    pub fn gain(&self) -> &Mat {
        &self.pol.k
    }

    /// Latest residual covariance estimate in the units of the plant,
    /// regardless of the identity mode.
    pub fn u_eps_hat(&self) -> &Mat {
        &self.u_eps_hat
    }

    /// Absorbs one transition and performs one policy update. Rejected or
    /// infeasible updates keep the previous gain and return the error.
    pub fn step(&mut self, u: &Vector, x: &Vector, x_next: &Vector) -> Result<StepInfo> {
        let s = self.scale;
        self.buf.rank1_update(&(u * s), &(x * s), &(x_next * s));
        let v = if self.opts.relift {
            lift(&self.buf, &self.pol.k)
        } else {
            affine_project(&self.pol.v, &self.buf.xbar0())?
        };
        self.pol.v = v;
        let ue = estimate_or_identity(&self.buf, &self.pol.v, self.opts.identity_cov);
        self.u_eps_hat = if self.opts.identity_cov {
            noise_cov_estimate(&self.buf, &self.pol.v) / (s * s)
        } else {
            &ue / (s * s)
        };
        let res = match self.opts.optimizer {
            Optimizer::Gd { eta } => gd_step(
                &self.buf,
                &mut self.pol,
                &self.weights,
                eta,
                &ue,
                self.opts.max_halvings,
            ),
            Optimizer::Adam(h) => adam_step(
                &self.buf,
                &mut self.pol,
                &self.weights,
                &h,
                &ue,
                self.opts.max_halvings,
            ),
        };
        if let Err(e) = &res {
            self.rejected += 1;
            self.pol.step += 1;
            log::debug!("policy update skipped at t = {}: {e}", self.buf.t());
        }
        res
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lqr::{lqr_cost, model_lqr};
    use crate::presets::bench3d_a;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    /// Closed-loop batch of `(A, B)` under `K` with unit exploration and
    /// process noise of standard deviation `sw` through `bw`.
    pub(crate) fn batch(a: &Mat, b: &Mat, bw: &Mat, k: &Mat, t: usize, sw: f64, seed: u64) -> DataBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, m) = (a.nrows(), b.ncols());
        let (mut x0, mut u0, mut x1) = (Mat::zeros(n, t), Mat::zeros(m, t), Mat::zeros(n, t));
        let mut x = Vector::zeros(n);
        for j in 0..t {
            let u = k * &x + randn(&mut rng, m, 1).column(0);
            let next = a * &x + b * &u + bw * randn(&mut rng, bw.ncols(), 1).column(0) * sw;
            x0.set_column(j, &x);
            u0.set_column(j, &u);
            x1.set_column(j, &next);
            x = next;
        }
        DataBatch::new(x0, u0, x1).unwrap()
    }

    fn bench() -> (Mat, Mat, LqrWeights, Mat) {
        let a = bench3d_a();
        let b = Mat::identity(3, 3);
        let w = LqrWeights::identity(3, 3);
        let k0 = model_lqr(&(&a * 1.1), &b, &w, &Mat::identity(3, 3)).unwrap().k;
        (a, b, w, k0)
    }

    #[test]
    fn lift_and_recover_round_trip() {
        let (a, b, _, k0) = bench();
        let data = batch(&a, &b, &Mat::identity(3, 3), &k0, 50, 0.1, 1);
        let (buf, pol) = warm_start(&data, &k0).unwrap();
        assert!(buf.phi().clone().cholesky().is_some());
        assert_relative_eq!(recover_gain(&buf, &pol.v), k0, epsilon = 1e-8);
        assert_relative_eq!(buf.xbar0() * &pol.v, Mat::identity(3, 3), epsilon = 1e-8);
        assert_eq!(recover_gain(&buf, &Mat::zeros(6, 3)), Mat::zeros(3, 3));
    }

    #[test]
    fn closed_loop_identity_with_explicit_noise_term() {
        let (a, b, _, k0) = bench();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = 60;
        let (mut x0, mut u0, mut x1, mut w0) =
            (Mat::zeros(3, t), Mat::zeros(3, t), Mat::zeros(3, t), Mat::zeros(3, t));
        let mut x = Vector::zeros(3);
        for j in 0..t {
            let u = &k0 * &x + randn(&mut rng, 3, 1).column(0);
            let w = randn(&mut rng, 3, 1).column(0) * 0.1;
            let next = &a * &x + &b * &u + &w;
            x0.set_column(j, &x);
            u0.set_column(j, &u);
            x1.set_column(j, &next);
            w0.set_column(j, &w);
            x = next;
        }
        let data = DataBatch::new(x0, u0, x1).unwrap();
        let (buf, pol) = warm_start(&data, &k0).unwrap();
        let wbar0 = &w0 * data.d0().transpose() / t as f64;
        assert_relative_eq!((buf.xbar1() - wbar0) * &pol.v, &a + &b * &k0, epsilon = 1e-8);
    }

    #[test]
    fn sherman_morrison_tracks_direct_inverse() {
        let (a, b, _, k0) = bench();
        let data = batch(&a, &b, &Mat::identity(3, 3), &k0, 1050, 0.1, 2);
        let warm = DataBatch::new(
            data.x0.columns(0, 50).into_owned(),
            data.u0.columns(0, 50).into_owned(),
            data.x1.columns(0, 50).into_owned(),
        )
        .unwrap();
        let mut buf = CovBuffers::from_batch(&warm).unwrap().with_resync(None);
        for j in 50..1050 {
            buf.rank1_update(
                &data.u0.column(j).into_owned(),
                &data.x0.column(j).into_owned(),
                &data.x1.column(j).into_owned(),
            );
        }
        let direct = buf.phi().clone().try_inverse().unwrap();
        assert!((buf.phi_inv() - &direct).norm() <= 1e-8);
        let full = CovBuffers::from_batch(&data).unwrap();
        assert_relative_eq!(buf.phi(), full.phi(), epsilon = 1e-10);
        assert_relative_eq!(buf.xbar1(), full.xbar1(), epsilon = 1e-10);
        assert_relative_eq!(buf.s11(), full.s11(), epsilon = 1e-10);
    }

    #[test]
    fn zero_sample_shrinks_moments() {
        let (a, b, _, k0) = bench();
        let data = batch(&a, &b, &Mat::identity(3, 3), &k0, 50, 0.1, 4);
        let mut buf = CovBuffers::from_batch(&data).unwrap();
        let before = buf.phi().clone();
        buf.rank1_update(&Vector::zeros(3), &Vector::zeros(3), &Vector::zeros(3));
        assert_relative_eq!(buf.phi(), &(before * (50.0 / 51.0)), epsilon = 1e-14);
        let direct = buf.phi().clone().try_inverse().unwrap();
        assert_relative_eq!(buf.phi_inv(), &direct, epsilon = 1e-8);
    }

    #[test]
    fn duplicate_sample_keeps_direction() {
        // all samples equal: Φ stays a multiple of φφᵀ
        let phi = Vector::from_vec(vec![1.0, 2.0]);
        let mut buf = CovBuffers {
            n: 1,
            m: 1,
            t: 1,
            phi: &phi * phi.transpose(),
            phi_inv: Mat::identity(2, 2),
            xbar1: Mat::zeros(1, 2),
            s11: Mat::zeros(1, 1),
            since_check: 0,
            resync_every: None,
        };
        let before = buf.phi().clone();
        buf.rank1_update(&phi.rows(0, 1).into_owned(), &phi.rows(1, 1).into_owned(), &Vector::zeros(1));
        assert_relative_eq!(buf.phi(), &before, epsilon = 1e-15);
    }

    #[test]
    fn noise_estimate_matches_direct_product() {
        let (a, b, _, k0) = bench();
        let data = batch(&a, &b, &Mat::identity(3, 3), &k0, 50, 0.1, 5);
        let (buf, pol) = warm_start(&data, &k0).unwrap();
        let resid = &data.x1 - buf.xbar1() * &pol.v * &data.x0;
        let direct = &resid * resid.transpose() / 50.0;
        let est = noise_cov_estimate(&buf, &pol.v);
        assert_relative_eq!(est, direct, epsilon = 1e-10);
        assert!(est.symmetric_eigenvalues().min() >= -1e-10);
    }

    #[test]
    fn noise_free_autonomous_data_has_zero_residual() {
        let a = bench3d_a() * 0.9;
        let b = Mat::zeros(3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = 30;
        let mut x0 = Mat::zeros(3, t);
        let mut u0 = Mat::zeros(1, t);
        let mut x1 = Mat::zeros(3, t);
        for j in 0..t {
            let x = randn(&mut rng, 3, 1).column(0).into_owned();
            let u = randn(&mut rng, 1, 1).column(0).into_owned();
            x0.set_column(j, &x);
            u0.set_column(j, &u);
            x1.set_column(j, &(&a * &x + &b * &u));
        }
        let data = DataBatch::new(x0, u0, x1).unwrap();
        let (buf, pol) = warm_start(&data, &Mat::zeros(1, 3)).unwrap();
        assert!(noise_cov_estimate(&buf, &pol.v).norm() <= 1e-10);
    }

    /// Buffers whose moments come from an exact noise-free model.
    fn exact_buffers(a: &Mat, b: &Mat, k: &Mat, seed: u64) -> CovBuffers {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, m) = (a.nrows(), b.ncols());
        let t = 4 * (n + m);
        let mut x0 = randn(&mut rng, n, t);
        let u0 = k * &x0 + randn(&mut rng, m, t);
        x0 += Mat::zeros(n, t);
        let x1 = a * &x0 + b * &u0;
        CovBuffers::from_batch(&DataBatch::new(x0, u0, x1).unwrap()).unwrap()
    }

    #[test]
    fn surrogate_equals_true_cost_on_exact_data() {
        let (a, b, w, k0) = bench();
        let buf = exact_buffers(&a, &b, &k0, 7);
        let ue = Mat::from_row_slice(3, 3, &[1.0, 0.3, 0.0, 0.3, 2.0, 0.1, 0.0, 0.1, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let k = &k0 + randn(&mut rng, 3, 3) * 0.02;
            let v = lift(&buf, &k);
            let ev = surrogate_eval(&buf, &v, &w, &ue).unwrap();
            let c = lqr_cost(&a, &b, &k, &w, &ue);
            assert_relative_eq!(ev.j, c, max_relative = 1e-8);
            assert_relative_eq!(ev.j, ev.j_dual, max_relative = 1e-8);
        }
        let v = lift(&buf, &k0);
        assert_eq!(surrogate_cost(&buf, &v, &w, &Mat::zeros(3, 3)).unwrap(), 0.0);
        let j1 = surrogate_cost(&buf, &v, &w, &ue).unwrap();
        let j3 = surrogate_cost(&buf, &v, &w, &(&ue * 3.0)).unwrap();
        assert_relative_eq!(j3, 3.0 * j1, max_relative = 1e-12);
        assert!(gradient(&buf, &v, &w, &Mat::zeros(3, 3)).unwrap().norm() == 0.0);
    }

    #[test]
    fn infeasible_lift_is_reported() {
        let (a, b, w, _) = bench();
        let buf = exact_buffers(&a, &b, &Mat::zeros(3, 3), 9);
        let v = lift(&buf, &Mat::zeros(3, 3));
        assert!(matches!(
            surrogate_cost(&buf, &v, &w, &Mat::identity(3, 3)),
            Err(Error::Infeasible { .. })
        ));
    }

    #[test]
    fn gradient_matches_finite_differences_on_tangent_space() {
        let (a, b, w, k0) = bench();
        let data = batch(&a, &b, &Mat::identity(3, 3), &k0, 50, 0.1, 10);
        let (buf, pol) = warm_start(&data, &k0).unwrap();
        let ue = noise_cov_estimate(&buf, &pol.v);
        let g = gradient(&buf, &pol.v, &w, &ue).unwrap();
        let xbar0 = buf.xbar0();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for _ in 0..20 {
            let d = project_tangent(&randn(&mut rng, 6, 3), &xbar0).unwrap();
            let d = &d / d.norm();
            let jp = surrogate_cost(&buf, &(&pol.v + &d * h), &w, &ue).unwrap();
            let jm = surrogate_cost(&buf, &(&pol.v - &d * h), &w, &ue).unwrap();
            let fd = (jp - jm) / (2.0 * h);
            let an = g.dot(&d);
            assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-3 * g.norm()), "{fd} vs {an}");
        }
    }

    #[test]
    fn projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = randn(&mut rng, 3, 6);
        let g = randn(&mut rng, 6, 3);
        let pg = project_tangent(&g, &x).unwrap();
        assert!((&x * &pg).norm() <= 1e-10);
        assert_relative_eq!(project_tangent(&pg, &x).unwrap(), pg.clone(), epsilon = 1e-10);
        assert_relative_eq!(g.norm_squared(), pg.norm_squared() + (&g - &pg).norm_squared(), max_relative = 1e-10);
        let normal = x.transpose() * randn(&mut rng, 3, 3);
        assert!(project_tangent(&normal, &x).unwrap().norm() <= 1e-10);

        let vp = affine_project(&g, &x).unwrap();
        assert_relative_eq!(&x * &vp, Mat::identity(3, 3), epsilon = 1e-10);
        assert_relative_eq!(affine_project(&vp, &x).unwrap(), vp.clone(), epsilon = 1e-10);
        let pinv_like = x.transpose() * (&x * x.transpose()).try_inverse().unwrap();
        assert_relative_eq!(affine_project(&Mat::zeros(6, 3), &x).unwrap(), pinv_like, epsilon = 1e-10);
        // nearest point: every other feasible point lies farther away
        for _ in 0..20 {
            let other = &vp + project_tangent(&randn(&mut rng, 6, 3), &x).unwrap();
            assert!((&other - &g).norm() >= (&vp - &g).norm() - 1e-9);
        }
    }

    #[test]
    fn zero_step_and_zero_gradient_leave_gain_unchanged() {
        let (a, b, w, k0) = bench();
        let data = batch(&a, &b, &Mat::identity(3, 3), &k0, 50, 0.1, 13);
        let (buf, mut pol) = warm_start(&data, &k0).unwrap();
        let ue = noise_cov_estimate(&buf, &pol.v);
        gd_step(&buf, &mut pol, &w, 0.0, &ue, 0).unwrap();
        assert_relative_eq!(pol.k, k0, epsilon = 1e-8);
        let mut pol = PolicyState::new(&buf, k0.clone());
        for _ in 0..5 {
            adam_step(&buf, &mut pol, &w, &AdamHyper::default(), &Mat::zeros(3, 3), 0).unwrap();
        }
        assert_relative_eq!(pol.k, k0, epsilon = 1e-8);
    }

    #[test]
    fn first_adam_step_is_sign_normalized_tangent_gradient() {
        let (a, b, w, k0) = bench();
        let data = batch(&a, &b, &Mat::identity(3, 3), &k0, 50, 0.1, 14);
        let (buf, mut pol) = warm_start(&data, &k0).unwrap();
        let ue = noise_cov_estimate(&buf, &pol.v);
        let g = project_tangent(&gradient(&buf, &pol.v, &w, &ue).unwrap(), &buf.xbar0()).unwrap();
        let hyper = AdamHyper {
            schedule: Schedule::Constant { eta: 1e-4 },
            beta1: 0.0,
            beta2: 0.0,
            epsilon: 1e-8,
        };
        let v0 = pol.v.clone();
        adam_step(&buf, &mut pol, &w, &hyper, &ue, 0).unwrap();
        let signed = g.map(|x| x / (x.abs() + 1e-8));
        let expected = affine_project(&(&v0 - signed * 1e-4), &buf.xbar0()).unwrap();
        assert_relative_eq!(pol.v, expected, epsilon = 1e-12);
    }

    #[test]
    fn frozen_data_gd_descends_to_ce_gain() {
        let (a, b, w, k0) = bench();
        let buf = exact_buffers(&a, &b, &k0, 15);
        let ue = Mat::identity(3, 3);
        let mut pol = PolicyState::new(&buf, k0.clone());
        let mut last = f64::INFINITY;
        for _ in 0..3000 {
            let info = gd_step(&buf, &mut pol, &w, 0.02, &ue, 0).unwrap();
            assert!(info.surrogate <= last + 1e-12);
            assert!(info.constraint <= 1e-8);
            last = info.surrogate;
            if info.grad_norm <= 1e-8 {
                break;
            }
        }
        let k_ce = lqr::ce_lqr(&a, &b, &w).unwrap();
        assert_relative_eq!(pol.k, k_ce, epsilon = 1e-6);
        // stationarity at the optimum
        let v_star = lift(&buf, &k_ce);
        let g = project_tangent(&gradient(&buf, &v_star, &w, &ue).unwrap(), &buf.xbar0()).unwrap();
        assert!(g.norm() <= 1e-6);
    }
}
