//! Closed-loop simulation of mismatched plants, noise generation, regret
//! accounting and excitation diagnostics.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::baselines::{zopo_gradient, RolloutSystem, ZopoConfig};
use crate::deepo::{DeepoLearner, DeepoOptions};
use crate::lqr::{ce_lqr, evaluate_cost, ls_identify, lqr_cost, model_lqr, DataBatch, LqrWeights};
use crate::mathkit::{excitation_level, spectral_radius};
use crate::rng::{stream, Stream};
use crate::{Error, Mat, Result, Vector};

/// State norm at which a run is declared divergent.
pub const DIVERGENCE_CAP: f64 = 1e9;

/// Variance of a standard normal truncated to `[-3, 3]`.
const TRUNCATED_VARIANCE: f64 = 0.973_336_924_844_769_3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Waveform {
    /// I.i.d. uniform on `[-amp, amp]` every step.
    UniformIid,
    /// `amp · sin(2πk / period)`.
    Sinusoid { period: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MismatchSpec {
    /// Static perturbation of the thermal time scale.
    pub delta_e: f64,
    /// Amplitude of the relative time-varying component.
    pub delta_c_amp: f64,
    pub waveform: Waveform,
}

impl Default for MismatchSpec {
    fn default() -> Self {
        MismatchSpec {
            delta_e: 0.0,
            delta_c_amp: 0.0,
            waveform: Waveform::UniformIid,
        }
    }
}

impl MismatchSpec {
    pub fn is_static(&self) -> bool {
        self.delta_c_amp == 0.0
    }
}

/// Linear plant `A(k) = A_nom + δ_e(1 + δ_eᶜ(k)) Δ`.
#[derive(Debug, Clone)]
pub struct Plant {
    pub a_nom: Mat,
    pub direction: Mat,
    pub b: Mat,
    pub b_w: Mat,
    pub spec: MismatchSpec,
    drift: Vec<f64>,
}

/// Builds the real plant over `horizon` steps, drawing the time-varying
/// component from the drift stream of `seed`.
pub fn make_real_plant(
    a_nom: Mat,
    direction: Mat,
    b: Mat,
    b_w: Mat,
    spec: MismatchSpec,
    horizon: usize,
    seed: u64,
) -> Plant {
    let amp = spec.delta_c_amp;
    let drift = if amp == 0.0 {
        Vec::new()
    } else {
        match spec.waveform {
            Waveform::UniformIid => {
                let mut rng = stream(seed, Stream::Drift);
                (0..horizon).map(|_| rng.random_range(-amp..=amp)).collect()
            }
            Waveform::Sinusoid { period } => (0..horizon)
                .map(|k| amp * (2.0 * std::f64::consts::PI * k as f64 / period).sin())
                .collect(),
        }
    };
    Plant {
        a_nom,
        direction,
        b,
        b_w,
        spec,
        drift,
    }
}

impl Plant {
    /// Time-varying component at step `k` (zero past the generated horizon).
    pub fn drift_at(&self, k: usize) -> f64 {
        self.drift.get(k).copied().unwrap_or(0.0)
    }

    /// Effective perturbation `δ_e(1 + δ_eᶜ(k))`.
    pub fn delta_at(&self, k: usize) -> f64 {
        self.spec.delta_e * (1.0 + self.drift_at(k))
    }

    pub fn a_at(&self, k: usize) -> Mat {
        &self.a_nom + &self.direction * self.delta_at(k)
    }

    /// Plant at the mean perturbation `δ_e`.
    pub fn a_mean(&self) -> Mat {
        &self.a_nom + &self.direction * self.spec.delta_e
    }

    pub fn n(&self) -> usize {
        self.a_nom.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseDist {
    Gaussian,
    /// Gaussian truncated to ±3σ, which is bounded.
    Truncated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Process noise scale on the disturbance channels.
    pub sigma_w: f64,
    /// Exploration scale on the inputs.
    pub sigma_s: f64,
    pub distribution: NoiseDist,
}

impl NoiseSpec {
    pub fn gaussian(sigma_w: f64, sigma_s: f64) -> Self {
        NoiseSpec {
            sigma_w,
            sigma_s,
            distribution: NoiseDist::Gaussian,
        }
    }

    fn variance_factor(&self) -> f64 {
        match self.distribution {
            NoiseDist::Gaussian => 1.0,
            NoiseDist::Truncated => TRUNCATED_VARIANCE,
        }
    }

    /// True noise covariance `σ_w² B_wB_wᵀ + σ_s² BBᵀ`.
    pub fn u_eps(&self, b: &Mat, b_w: &Mat) -> Mat {
        (b_w * b_w.transpose() * self.sigma_w.powi(2) + b * b.transpose() * self.sigma_s.powi(2))
            * self.variance_factor()
    }

    /// Disturbance bound `3σ_w√d` for `d` channels. Exact for the truncated
    /// distribution; a nominal 3σ level for the Gaussian one.
    pub fn bound(&self, d: usize) -> f64 {
        3.0 * self.sigma_w * (d as f64).sqrt()
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vector {
        let truncated = self.distribution == NoiseDist::Truncated;
        Vector::from_fn(dim, |_, _| loop {
            let z: f64 = rng.sample(StandardNormal);
            if !truncated || z.abs() <= 3.0 {
                break z * scale;
            }
        })
    }
}

/// `x⁺ = A(k)x + Bu + B_w w`.
pub fn simulate_step(a_k: &Mat, b: &Mat, b_w: &Mat, x: &Vector, u: &Vector, w: &Vector) -> Result<Vector> {
    let next = a_k * x + b * u + b_w * w;
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(Error::NonFinite("state update".into()))
    }
}

/// Physical bookkeeping of a heating-network scenario.
#[derive(Debug, Clone)]
pub struct Physical {
    pub n_t: usize,
    /// `T_{-1}` and `hᴳ_{-1}`.
    pub t_prev: Vector,
    pub hg_prev: Vector,
}

/// Nominal forecast-based tracking law `hᴳ = h_set + K_p (T − T_set)`.
#[derive(Debug, Clone)]
pub struct MpcLaw {
    pub k_phys: Mat,
    pub t_set: Vector,
    pub h_set: Vector,
}

#[derive(Debug, Clone)]
pub enum Controller {
    Fixed(Mat),
    /// Certainty equivalence: identify `(Â, B̂)` from the warm-start data,
    /// then hold the Riccati gain of the estimate.
    Ce,
    Deepo(DeepoOptions),
    Zopo(ZopoConfig),
    Mpc(MpcLaw),
}

impl Controller {
    pub fn label(&self) -> &'static str {
        match self {
            Controller::Fixed(_) => "fixed",
            Controller::Ce => "ce",
            Controller::Deepo(o) => match o.optimizer {
                crate::deepo::Optimizer::Gd { .. } => "gd",
                crate::deepo::Optimizer::Adam(_) => "adam",
            },
            Controller::Zopo(_) => "zopo",
            Controller::Mpc(_) => "mpc",
        }
    }
}

/// Everything a closed-loop run needs besides the controller.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub plant: Plant,
    pub weights: LqrWeights,
    pub noise: NoiseSpec,
    /// Initial stabilizing gain (also used for the warm start).
    pub k0: Mat,
    pub x0: Vector,
    pub physical: Option<Physical>,
    /// Output map `(C, D)` of the optimality error `e = Cx + Du`.
    pub output: Option<(Mat, Mat)>,
}

impl Scenario {
    pub fn u_eps(&self) -> Mat {
        self.noise.u_eps(&self.plant.b, &self.plant.b_w)
    }

    /// Optimal gain and cost of the mean plant.
    pub fn reference(&self) -> Result<Reference> {
        let a = self.plant.a_mean();
        let u_eps = self.u_eps();
        let sol = model_lqr(&a, &self.plant.b, &self.weights, &u_eps)?;
        let p_star = evaluate_cost(&a, &self.plant.b, &sol.k, &self.weights, &u_eps)?.p_k;
        Ok(Reference {
            k_star: sol.k,
            c_star: sol.cost,
            p_star,
            u_eps,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Reference {
    pub k_star: Mat,
    pub c_star: f64,
    pub p_star: Mat,
    pub u_eps: Mat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunOptions {
    pub steps: usize,
    pub warm_start: usize,
    /// Cost and diagnostics are evaluated every `cost_stride` steps and at
    /// the final step.
    pub cost_stride: usize,
    /// Gain snapshots every this many steps (0 disables).
    pub snapshot_stride: usize,
    /// Excitation level every this many steps (0 evaluates only at the end).
    pub snr_stride: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            steps: 1000,
            warm_start: 50,
            cost_stride: 1,
            snapshot_stride: 0,
            snr_stride: 0,
        }
    }
}

/// Cost record at one logged step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostSample {
    pub t: usize,
    /// `C(K_t)` on the plant frozen at step `t`.
    pub cost: f64,
    /// `C(K_t)` on the mean plant; the regret terms refer to this one.
    pub mean_cost: f64,
    pub rho: f64,
    pub noise_mismatch: f64,
    pub ce_regret: f64,
    pub optimal_bias: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub label: String,
    pub xs: Vec<Vector>,
    pub us: Vec<Vector>,
    pub es: Vec<Vector>,
    /// Optimality error at the initial operating point, before the warm
    /// start.
    pub e_initial: Option<Vector>,
    /// Physical temperatures and generation (heating scenarios only).
    pub temps: Vec<Vector>,
    pub gens: Vec<Vector>,
    pub costs: Vec<CostSample>,
    pub snapshots: Vec<(usize, Mat)>,
    pub snr: Vec<(usize, f64)>,
    pub final_k: Option<Mat>,
    pub c_star: f64,
    /// Step at which the state exceeded the divergence cap.
    pub diverged: Option<usize>,
    pub rejected: usize,
    /// `‖Û_ε − U_ε‖₂` at the end of the run.
    pub noise_error: Option<f64>,
    /// Cumulative number of samples consumed after the warm start.
    pub samples: usize,
}

impl Trajectory {
    pub fn final_relative_error(&self) -> f64 {
        match self.costs.last() {
            Some(c) => (c.cost - self.c_star).abs() / self.c_star,
            None => f64::NAN,
        }
    }

    pub fn is_failed(&self) -> bool {
        self.diverged.is_some()
    }
}

/// Runs the closed loop for `opts.steps` steps after a warm start of
/// `opts.warm_start` steps under `K₀`.
pub fn run_closed_loop(
    scn: &Scenario,
    controller: &Controller,
    opts: &RunOptions,
    seed: u64,
) -> Result<Trajectory> {
    let plant = &scn.plant;
    let (n, m) = (plant.n(), plant.m());
    let d = plant.b_w.ncols();
    let reference = scn.reference()?;
    let mut rng_w = stream(seed, Stream::Process);
    let mut rng_s = stream(seed, Stream::Exploration);
    let stride = opts.cost_stride.max(1);

    let mut traj = Trajectory {
        label: controller.label().to_string(),
        c_star: reference.c_star,
        ..Default::default()
    };

    // physical bookkeeping: T_k and hᴳ_{k-1}
    let mut phys = scn.physical.as_ref().map(|p| {
        let t0 = &p.t_prev + scn.x0.rows(0, p.n_t);
        (t0, p.hg_prev.clone())
    });

    let mut x = scn.x0.clone();
    let mut k_plant = 0usize;

    let mpc = match controller {
        Controller::Mpc(law) => {
            if phys.is_none() {
                return Err(Error::Config("tracking control needs a physical scenario".into()));
            }
            Some(law)
        }
        _ => None,
    };

    // input for the current state; MPC acts in physical coordinates
    let input = |k: &Mat, x: &Vector, phys: &Option<(Vector, Vector)>, v: &Vector| -> Vector {
        match (mpc, phys) {
            (Some(law), Some((t_cur, h_prev))) => {
                let h = &law.h_set + &law.k_phys * (t_cur - &law.t_set) + v;
                h - h_prev
            }
            _ => k * x + v,
        }
    };

    let advance = |x: &Vector, u: &Vector, k_plant: usize, rng_w: &mut ChaCha8Rng| -> Result<Vector> {
        let w = scn.noise.draw(rng_w, d, scn.noise.sigma_w);
        simulate_step(&plant.a_at(k_plant), &plant.b, &plant.b_w, x, u, &w)
    };

    let update_phys = |phys: &mut Option<(Vector, Vector)>, u: &Vector, x_next: &Vector| {
        if let Some((t_cur, h_prev)) = phys.as_mut() {
            *h_prev += u;
            let n_t = t_cur.len();
            *t_cur += x_next.rows(0, n_t);
        }
    };

    // warm start
    let (mut x0s, mut u0s, mut x1s) = (Mat::zeros(n, opts.warm_start), Mat::zeros(m, opts.warm_start), Mat::zeros(n, opts.warm_start));
    for j in 0..opts.warm_start {
        let v = scn.noise.draw(&mut rng_s, m, scn.noise.sigma_s);
        let u = input(&scn.k0, &x, &phys, &v);
        let next = advance(&x, &u, k_plant, &mut rng_w)?;
        if j == 0 {
            traj.e_initial = scn.output.as_ref().map(|(c, dd)| c * &x + dd * &u);
        }
        x0s.set_column(j, &x);
        u0s.set_column(j, &u);
        x1s.set_column(j, &next);
        update_phys(&mut phys, &u, &next);
        x = next;
        k_plant += 1;
    }

    let batch = DataBatch::new(x0s, u0s, x1s)?;
    let mut learner = match controller {
        Controller::Deepo(o) => Some(DeepoLearner::new(
            &batch,
            &scn.k0,
            scn.weights.clone(),
            DeepoOptions {
                data_unit: o.data_unit.or((scn.noise.sigma_s > 0.0).then_some(scn.noise.sigma_s)),
                ..*o
            },
        )?),
        _ => None,
    };

    let mut k = match controller {
        Controller::Fixed(k) => k.clone(),
        Controller::Ce => ce_gain(&batch, scn),
        _ => scn.k0.clone(),
    };

    let zo_sys = RolloutSystem {
        a: plant.a_mean(),
        b: plant.b.clone(),
        b_w: plant.b_w.clone(),
        sigma_w: scn.noise.sigma_w,
        sigma_s: scn.noise.sigma_s,
    };
    let mut zo_round = 0u64;

    let log_cost = |t: usize, k: &Mat, k_plant: usize, u_eps_hat: Option<&Mat>, traj: &mut Trajectory| {
        let a_mean = plant.a_mean();
        let rho = spectral_radius(&(&a_mean + &plant.b * k));
        let (mean_cost, nm, ce, ob) = match evaluate_cost(&a_mean, &plant.b, k, &scn.weights, &reference.u_eps) {
            Ok(cb) => {
                let (nm, ce, ob) = match u_eps_hat {
                    Some(ue) => {
                        let e_noise = &reference.u_eps - ue;
                        let nm = (&cb.p_k * &e_noise).trace();
                        let ce = (&cb.p_k * ue).trace() - (&reference.p_star * ue).trace();
                        let ob = -(&reference.p_star * &e_noise).trace();
                        (nm, ce, ob)
                    }
                    None => (0.0, cb.primal - reference.c_star, 0.0),
                };
                (cb.primal, nm, ce, ob)
            }
            Err(_) => (f64::INFINITY, f64::NAN, f64::NAN, f64::NAN),
        };
        let cost = if plant.spec.is_static() {
            mean_cost
        } else {
            lqr_cost(&plant.a_at(k_plant), &plant.b, k, &scn.weights, &reference.u_eps)
        };
        traj.costs.push(CostSample {
            t,
            cost,
            mean_cost,
            rho,
            noise_mismatch: nm,
            ce_regret: ce,
            optimal_bias: ob,
        });
    };

    for t in 0..opts.steps {
        if t % stride == 0 && mpc.is_none() {
            let ue = learner.as_ref().map(|l| l.u_eps_hat().clone());
            log_cost(t, &k, k_plant, ue.as_ref(), &mut traj);
        }
        if opts.snapshot_stride > 0 && t % opts.snapshot_stride == 0 {
            traj.snapshots.push((t, k.clone()));
        }
        let v = scn.noise.draw(&mut rng_s, m, scn.noise.sigma_s);
        let u = input(&k, &x, &phys, &v);
        let next = advance(&x, &u, k_plant, &mut rng_w)?;
        if let Some((c, dd)) = &scn.output {
            traj.es.push(c * &x + dd * &u);
        }
        traj.xs.push(x.clone());
        traj.us.push(u.clone());
        update_phys(&mut phys, &u, &next);
        if let Some((t_cur, h_prev)) = &phys {
            // after the update h_prev holds hᴳ_t and t_cur holds T_{t+1}
            traj.gens.push(h_prev.clone());
            traj.temps.push(t_cur - next.rows(0, t_cur.len()));
        }
        traj.samples += 1;

        match controller {
            Controller::Deepo(_) => {
                let l = learner.as_mut().expect("learner exists for DeePO");
                let _ = l.step(&u, &x, &next);
                k = l.gain().clone();
            }
            Controller::Zopo(cfg) if (t + 1) % cfg.samples_per_update() == 0 => {
                let est = zopo_gradient(&k, &zo_sys, &scn.weights, cfg, seed, zo_round);
                zo_round += 1;
                let cand = &k - est.grad * cfg.step;
                if spectral_radius(&(&zo_sys.a + &plant.b * &cand)) < 1.0 {
                    k = cand;
                } else {
                    traj.rejected += 1;
                }
            }
            _ => {}
        }

        x = next;
        k_plant += 1;
        if !(x.norm() <= DIVERGENCE_CAP) {
            log::warn!("run '{}' diverged at step {t}", traj.label);
            traj.diverged = Some(t);
            break;
        }
        if opts.snr_stride > 0 && (t + 1) % opts.snr_stride == 0 && traj.us.len() > n + 1 {
            if let Ok(g) = excitation_level(&traj.us, n + 1) {
                traj.snr.push((t + 1, g / scn.noise.bound(d)));
            }
        }
    }

    if traj.diverged.is_none() && mpc.is_none() {
        let ue = learner.as_ref().map(|l| l.u_eps_hat().clone());
        let last = traj.costs.last().map(|c| c.t);
        if last != Some(opts.steps) {
            log_cost(opts.steps, &k, k_plant, ue.as_ref(), &mut traj);
        }
    }
    if opts.snr_stride == 0 && traj.us.len() > n + 1 {
        if let Ok(g) = excitation_level(&traj.us, n + 1) {
            traj.snr.push((traj.us.len(), g / scn.noise.bound(d)));
        }
    }
    if let Some(l) = &learner {
        traj.rejected = l.rejected;
        traj.noise_error = Some((&reference.u_eps - l.u_eps_hat()).norm());
    }
    traj.final_k = Some(k);
    Ok(traj)
}

/// CE gain from the warm-start batch, or `K₀` when identification fails or
/// the gain does not stabilize the mean plant.
fn ce_gain(batch: &DataBatch, scn: &Scenario) -> Mat {
    let k = ls_identify(batch).and_then(|id| ce_lqr(&id.a_hat, &id.b_hat, &scn.weights));
    match k {
        Ok(k) if spectral_radius(&(scn.plant.a_mean() + &scn.plant.b * &k)) < 1.0 => k,
        Ok(_) => {
            log::warn!("certainty-equivalence gain does not stabilize the plant; keeping K0");
            scn.k0.clone()
        }
        Err(e) => {
            log::warn!("certainty-equivalence identification failed ({e}); keeping K0");
            scn.k0.clone()
        }
    }
}

/// Time-averaged optimality gap on the mean plant and its decomposition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegretReport {
    pub steps: usize,
    pub regret: f64,
    pub noise_mismatch: f64,
    pub ce_regret: f64,
    pub optimal_bias: f64,
    pub final_relative_error: f64,
    /// Largest per-step violation of gap = sum of the three terms.
    pub identity_residual: f64,
}

/// Regret over the first `horizon` logged steps (all when `None`).
pub fn regret(traj: &Trajectory, c_star: f64, horizon: Option<usize>) -> Result<RegretReport> {
    let samples: Vec<&CostSample> = traj
        .costs
        .iter()
        .filter(|c| horizon.is_none_or(|h| c.t < h))
        .collect();
    if samples.is_empty() {
        return Err(Error::InsufficientData { needed: 1, have: 0 });
    }
    if let Some(bad) = samples.iter().find(|c| !c.mean_cost.is_finite()) {
        return Err(Error::NotSchurStable { rho: bad.rho });
    }
    let len = samples.len() as f64;
    let mut rep = RegretReport {
        steps: samples.len(),
        regret: 0.0,
        noise_mismatch: 0.0,
        ce_regret: 0.0,
        optimal_bias: 0.0,
        final_relative_error: (samples[samples.len() - 1].mean_cost - c_star).abs() / c_star,
        identity_residual: 0.0,
    };
    for c in &samples {
        let gap = c.mean_cost - c_star;
        rep.regret += gap / len;
        rep.noise_mismatch += c.noise_mismatch / len;
        rep.ce_regret += c.ce_regret / len;
        rep.optimal_bias += c.optimal_bias / len;
        let resid = (gap - (c.noise_mismatch + c.ce_regret + c.optimal_bias)).abs();
        rep.identity_residual = rep.identity_residual.max(resid / c_star.abs().max(1.0));
    }
    Ok(rep)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnrReport {
    pub gamma_hat: f64,
    pub delta: f64,
    pub snr: f64,
}

/// Excitation level of `u_seq` at depth `n + 1` against the disturbance
/// bound of `d` channels.
pub fn snr_report(u_seq: &[Vector], noise: &NoiseSpec, n: usize, d: usize) -> Result<SnrReport> {
    if u_seq.len() < n + 1 {
        return Err(Error::InsufficientData {
            needed: n + 1,
            have: u_seq.len(),
        });
    }
    let gamma_hat = excitation_level(u_seq, n + 1)?;
    let delta = noise.bound(d);
    Ok(SnrReport {
        gamma_hat,
        delta,
        snr: if delta > 0.0 { gamma_hat / delta } else { f64::INFINITY },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::bench3d_a;
    use approx::assert_relative_eq;

    fn bench_scenario(sw: f64, ss: f64) -> Scenario {
        let a = bench3d_a();
        let w = LqrWeights::identity(3, 3);
        let k0 = model_lqr(&(&a * 1.1), &Mat::identity(3, 3), &w, &Mat::identity(3, 3)).unwrap().k;
        Scenario {
            plant: make_real_plant(a.clone(), a, Mat::identity(3, 3), Mat::identity(3, 3), MismatchSpec::default(), 0, 0),
            weights: w,
            noise: NoiseSpec::gaussian(sw, ss),
            k0,
            x0: Vector::zeros(3),
            physical: None,
            output: None,
        }
    }

    #[test]
    fn plant_construction() {
        let a = Mat::identity(2, 2);
        let dir = Mat::from_row_slice(2, 2, &[-0.1, 0.0, 0.0, -0.2]);
        let p = make_real_plant(a.clone(), dir.clone(), Mat::zeros(2, 1), Mat::zeros(2, 1), MismatchSpec::default(), 10, 1);
        assert_eq!(p.a_at(3), a);
        let spec = MismatchSpec { delta_e: 0.2, ..Default::default() };
        let p = make_real_plant(a.clone(), dir.clone(), Mat::zeros(2, 1), Mat::zeros(2, 1), spec, 10, 1);
        assert_relative_eq!(p.a_at(5), &a + &dir * 0.2, epsilon = 1e-15);
        let spec = MismatchSpec { delta_e: 0.2, delta_c_amp: 0.8, waveform: Waveform::UniformIid };
        let p = make_real_plant(a, dir, Mat::zeros(2, 1), Mat::zeros(2, 1), spec, 1000, 1);
        for k in 0..1000 {
            let d = p.delta_at(k);
            assert!((0.2 * 0.2..=0.2 * 1.8).contains(&d));
        }
    }

    #[test]
    fn step_basics() {
        let a = bench3d_a();
        let z = Vector::zeros(3);
        assert_eq!(simulate_step(&a, &Mat::identity(3, 3), &Mat::identity(3, 3), &z, &z, &z).unwrap(), z);
        let e0 = Vector::from_vec(vec![1.0, 0.0, 0.0]);
        let mut x = simulate_step(&a, &Mat::identity(3, 3), &Mat::identity(3, 3), &z, &z, &e0).unwrap();
        let mut ak = Mat::identity(3, 3);
        for _ in 0..5 {
            assert_relative_eq!(x, &ak * &e0, epsilon = 1e-14);
            x = simulate_step(&a, &Mat::identity(3, 3), &Mat::identity(3, 3), &x, &z, &z).unwrap();
            ak = &a * ak;
        }
        let nan = Vector::from_element(3, f64::NAN);
        assert!(simulate_step(&a, &Mat::identity(3, 3), &Mat::identity(3, 3), &nan, &z, &z).is_err());
    }

    #[test]
    fn noise_free_optimal_gain_decays_geometrically() {
        let mut scn = bench_scenario(0.0, 0.0);
        let r = scn.reference().unwrap();
        scn.x0 = Vector::from_vec(vec![1.0, -2.0, 0.5]);
        let traj = run_closed_loop(&scn, &Controller::Fixed(r.k_star.clone()), &RunOptions { steps: 200, warm_start: 0, cost_stride: 1000, ..Default::default() }, 1).unwrap();
        let rho = spectral_radius(&(bench3d_a() + &r.k_star));
        let last = traj.xs.last().unwrap().norm();
        assert!(last <= 10.0 * rho.powi(199) * scn.x0.norm());
    }

    #[test]
    fn decomposition_sums_to_gap() {
        let scn = bench_scenario(0.1, 1.0);
        let traj = run_closed_loop(
            &scn,
            &Controller::Deepo(DeepoOptions::default()),
            &RunOptions { steps: 200, ..Default::default() },
            3,
        )
        .unwrap();
        let rep = regret(&traj, traj.c_star, None).unwrap();
        assert!(rep.identity_residual <= 1e-10, "{}", rep.identity_residual);
        let fixed = run_closed_loop(&scn, &Controller::Fixed(scn.reference().unwrap().k_star), &RunOptions { steps: 50, ..Default::default() }, 3).unwrap();
        assert!(regret(&fixed, fixed.c_star, None).unwrap().regret.abs() <= 1e-9 * fixed.c_star);
    }

    #[test]
    fn runs_are_deterministic() {
        let scn = bench_scenario(0.1, 1.0);
        let opts = RunOptions { steps: 100, ..Default::default() };
        let ctl = Controller::Deepo(DeepoOptions::default());
        let a = run_closed_loop(&scn, &ctl, &opts, 9).unwrap();
        let b = run_closed_loop(&scn, &ctl, &opts, 9).unwrap();
        assert_eq!(a.xs, b.xs);
        assert_eq!(a.final_k, b.final_k);
    }

    #[test]
    fn snr_of_zero_input_is_zero() {
        let us = vec![Vector::zeros(3); 30];
        let rep = snr_report(&us, &NoiseSpec::gaussian(0.1, 1.0), 3, 3).unwrap();
        assert_eq!(rep.snr, 0.0);
        assert!(snr_report(&us[..3], &NoiseSpec::gaussian(0.1, 1.0), 3, 3).is_err());
    }

    #[test]
    fn ce_controller_holds_the_identified_gain() {
        let scn = bench_scenario(0.1, 1.0);
        let opts = RunOptions { steps: 20, warm_start: 500, ..Default::default() };
        let traj = run_closed_loop(&scn, &Controller::Ce, &opts, 4).unwrap();
        assert_eq!(traj.label, "ce");
        assert!(traj.final_k.as_ref() != Some(&scn.k0));
        assert!(traj.final_relative_error() < 1e-3);
    }
}
