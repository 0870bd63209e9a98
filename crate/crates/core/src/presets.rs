//! Ready-made scenarios: the marginally unstable three-state benchmark and a
//! synthesized industrial-park heating network with three producers and
//! eight loads.

use serde::{Deserialize, Serialize};

use crate::augment::{build_augmented, build_error_maps, AugmentedSystem};
use crate::dhs::{
    build_continuous, discretize, solve_dispatch, solve_temperature, watts_to_scaled,
    ContinuousModel, DiscreteModel, EconomicSpec, EdgeKind, EdgeSpec, EquilibriumPoint,
    HeatNetwork, NetworkSpec, NodeSpec,
};
use crate::baselines::{mpc_gain, MpcConfig};
use crate::lqr::{model_lqr, LqrWeights};
use crate::simlab::{make_real_plant, MismatchSpec, MpcLaw, NoiseSpec, Physical, Scenario};
use crate::{Error, Mat, Result, Vector};

#[rustfmt::skip]
pub fn bench3d_a() -> Mat {
    Mat::from_row_slice(3, 3, &[
        1.01, 0.01, 0.0,
        0.01, 1.01, 0.01,
        0.0,  0.01, 1.01,
    ])
}

/// Disturbance input matrices with increasing coupling, `level` in 1..=4.
pub fn bench3d_bw(level: u8) -> Result<Mat> {
    let (a01, a02) = match level {
        1 => (0.0, 0.0),
        2 => (1.0, 0.0),
        3 => (1.0, 0.5),
        4 => (1.0, 1.0),
        _ => return Err(Error::Config(format!("disturbance coupling level {level} not in 1..=4"))),
    };
    let mut bw = Mat::identity(3, 3);
    bw[(0, 1)] = a01;
    bw[(0, 2)] = a02;
    Ok(bw)
}

/// Process noise standard deviation of the benchmark (`w ~ N(0, I/100)`).
pub const BENCH3D_SIGMA_W: f64 = 0.1;
pub const BENCH3D_SIGMA_S: f64 = 1.0;
pub const BENCH3D_WARM_START: usize = 50;
pub const BENCH3D_DESIGN_MISMATCH: f64 = 0.1;
pub const BENCH3D_STEPS: usize = 2000;
pub const BENCH3D_GD_ETA: f64 = 1e-3;
/// Sample budget given to ZO-PO on the benchmark.
pub const ZOPO_BUDGET: usize = 3_000_000;

/// Benchmark scenario: the true plant is `A`, the initial gain is the
/// Riccati gain of `(1 + design_mismatch) A`.
pub fn bench3d_scenario(level: u8, design_mismatch: f64, noise: NoiseSpec) -> Result<Scenario> {
    let a = bench3d_a();
    let b = Mat::identity(3, 3);
    let weights = LqrWeights::identity(3, 3);
    let b_w = bench3d_bw(level)?;
    let k0 = model_lqr(&(&a * (1.0 + design_mismatch)), &b, &weights, &Mat::identity(3, 3))?.k;
    Ok(Scenario {
        plant: make_real_plant(a.clone(), a, b, b_w, MismatchSpec::default(), 0, 0),
        weights,
        noise,
        k0,
        x0: Vector::zeros(3),
        physical: None,
        output: None,
    })
}

pub fn bench3d_noise() -> NoiseSpec {
    NoiseSpec::gaussian(BENCH3D_SIGMA_W, BENCH3D_SIGMA_S)
}

pub const INDUSTRIAL_TAU: f64 = 0.1;
pub const INDUSTRIAL_STEPS: usize = 10_000;
/// Total heat demand in watts.
pub const INDUSTRIAL_DEMAND_W: f64 = 10e6;
/// Process and exploration noise levels in watts.
pub const INDUSTRIAL_SIGMA_W_W: f64 = 4.2;
pub const INDUSTRIAL_SIGMA_S_W: f64 = 100.0;
pub const INDUSTRIAL_WARM_START: usize = 2000;
/// Step sizes for the learners on the industrial network.
pub const INDUSTRIAL_ADAM_ETA0: f64 = 0.1;
pub const INDUSTRIAL_GD_ETA: f64 = 1e-6;
pub const INDUSTRIAL_STATIC_MISMATCH: [f64; 8] = [0.01, -0.01, 0.02, -0.02, 0.15, -0.15, 0.2, -0.2];
pub const INDUSTRIAL_DRIFT_AMPLITUDES: [f64; 4] = [0.1, 0.3, 0.5, 0.8];

/// Tunable physical parameters of the synthesized network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndustrialParams {
    /// Producer flows in m³/s; every other flow follows from mass balance.
    pub producer_flows: [f64; 3],
    /// Edge water volumes in m³, ordered P1..P3, L1..L8.
    pub edge_volumes: [f64; 11],
    /// Node water volumes in m³, ordered N0..N7.
    pub node_volumes: [f64; 8],
    /// Fraction of the merged flow at N5 routed through L5/L7.
    pub split: f64,
    pub f_g: [f64; 3],
    /// Initial generation offset from the economic optimum, in watts per
    /// producer (zero sum keeps the initial point on an equilibrium line).
    pub initial_offset_w: [f64; 3],
    /// Input weight of the conservative design that yields the initial gain,
    /// relative to the performance weight `R`.
    pub design_input_weight: f64,
}

impl Default for IndustrialParams {
    fn default() -> Self {
        IndustrialParams {
            producer_flows: [0.6, 0.4, 0.2],
            edge_volumes: [0.6, 0.5, 0.4, 0.8, 0.7, 0.9, 1.2, 0.6, 0.5, 1.0, 0.8],
            node_volumes: [0.2, 0.25, 0.3, 0.15, 0.35, 0.2, 0.3, 0.25],
            split: 0.55,
            f_g: [1.0, 2.0, 3.0],
            initial_offset_w: [100e3, -50e3, -50e3],
            design_input_weight: 10.0,
        }
    }
}

/// Eight nodes, three producers feeding three supply nodes, eight loads
/// merging back to the return header. Unequal volumes and an uneven split
/// keep every thermal mode controllable.
pub fn industrial_network(p: &IndustrialParams) -> NetworkSpec {
    let [q1, q2, q3] = p.producer_flows;
    let q4 = q1 + q2;
    let q5 = q3 + q4;
    let (qa, qb) = (q5 * p.split, q5 * (1.0 - p.split));
    let mut vols = p.edge_volumes.iter().copied();
    let mut edge = |id: &str, kind, tail: &str, head: &str, flow| EdgeSpec {
        id: id.into(),
        kind,
        tail: tail.into(),
        head: head.into(),
        flow,
        volume: vols.next().unwrap_or(1.0),
    };
    use EdgeKind::{Load, Producer};
    NetworkSpec {
        nodes: (0..8)
            .map(|i| NodeSpec {
                id: format!("N{i}"),
                volume: p.node_volumes[i],
            })
            .collect(),
        edges: vec![
            edge("P1", Producer, "N0", "N1", q1),
            edge("P2", Producer, "N0", "N2", q2),
            edge("P3", Producer, "N0", "N3", q3),
            edge("L1", Load, "N1", "N4", q1),
            edge("L2", Load, "N2", "N4", q2),
            edge("L3", Load, "N3", "N5", q3),
            edge("L4", Load, "N4", "N5", q4),
            edge("L5", Load, "N5", "N6", qa),
            edge("L6", Load, "N5", "N7", qb),
            edge("L7", Load, "N6", "N0", qa),
            edge("L8", Load, "N7", "N0", qb),
        ],
    }
}

/// The industrial network with its models and operating point.
#[derive(Debug, Clone)]
pub struct Industrial {
    pub params: IndustrialParams,
    pub net: HeatNetwork,
    pub cm: ContinuousModel,
    pub dm: DiscreteModel,
    pub econ: EconomicSpec,
    pub aug: AugmentedSystem,
    pub weights: LqrWeights,
    /// Constant load per load edge, model units.
    pub load: Vector,
    pub sigma_w: f64,
    pub sigma_s: f64,
}

impl Industrial {
    pub fn new(params: IndustrialParams) -> Result<Self> {
        let net = HeatNetwork::new(industrial_network(&params))?;
        let cm = build_continuous(&net)?;
        let dm = discretize(&cm, INDUSTRIAL_TAU)?;
        let econ = EconomicSpec::new(params.f_g.to_vec(), vec![1.0; cm.n_t])?;
        let (c_t, d_t) = build_error_maps(&econ, cm.n_t)?;
        let aug = build_augmented(&dm, &c_t, &d_t)?;
        let n_l = cm.n_loads();
        let load = Vector::from_element(n_l, watts_to_scaled(INDUSTRIAL_DEMAND_W) / n_l as f64);
        let weights = LqrWeights::identity(aug.n(), aug.m());
        Ok(Industrial {
            params,
            net,
            cm,
            dm,
            econ,
            aug,
            weights,
            load,
            sigma_w: watts_to_scaled(INDUSTRIAL_SIGMA_W_W),
            sigma_s: watts_to_scaled(INDUSTRIAL_SIGMA_S_W),
        })
    }

    /// Direction of the thermal time-scale perturbation:
    /// `A_real = A + δ·Δ` with `Δ = blkdiag(−τA₁, 0)`.
    pub fn mismatch_direction(&self) -> Mat {
        let n = self.aug.n();
        let n_t = self.aug.n_t;
        let mut d = Mat::zeros(n, n);
        d.view_mut((0, 0), (n_t, n_t)).copy_from(&(&self.cm.a1 * (-self.dm.tau)));
        d
    }

    /// Continuous model with `A₁` scaled by `1 + δ`.
    pub fn scaled_model(&self, delta: f64) -> ContinuousModel {
        let mut cm = self.cm.clone();
        cm.a1 *= 1.0 + delta;
        cm
    }

    /// Economic optimum of the plant whose thermal rates are scaled by `1 + δ`.
    pub fn optimum(&self, delta: f64) -> Result<EquilibriumPoint> {
        let hg = solve_dispatch(&self.econ, &self.load);
        solve_temperature(&self.scaled_model(delta), &self.econ, &hg, &self.load)
    }

    /// Generation before the first step: the optimum shifted by the
    /// configured offset.
    pub fn initial_generation(&self) -> Vector {
        let hg = solve_dispatch(&self.econ, &self.load);
        hg + Vector::from_iterator(3, self.params.initial_offset_w.iter().map(|&w| watts_to_scaled(w)))
    }

    /// Temperatures before the first step: the plant equilibrium of the
    /// initial generation with zero weighted temperature sum.
    pub fn initial_temperature(&self, delta: f64) -> Result<Vector> {
        let hg = self.initial_generation();
        Ok(solve_temperature(&self.scaled_model(delta), &self.econ, &hg, &self.load)?.t_star)
    }

    /// Augmented state of the first step: no temperature increment, error
    /// of the initial point.
    pub fn initial_state(&self, delta: f64) -> Result<Vector> {
        let t = self.initial_temperature(delta)?;
        let hg = self.initial_generation();
        let e = &self.aug.c_t * &t + &self.aug.d_t * &hg;
        let mut x = Vector::zeros(self.aug.n());
        x.rows_mut(self.aug.n_t, self.aug.m()).copy_from(&e);
        Ok(x)
    }
}

impl Industrial {
    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec::gaussian(self.sigma_w, self.sigma_s)
    }

    /// Initial gain: the nominal LQR design with the input weight inflated
    /// by `design_input_weight`.
    pub fn initial_gain(&self) -> Result<Mat> {
        let design = LqrWeights::new(
            self.weights.q.clone(),
            &self.weights.r * self.params.design_input_weight,
        )?;
        Ok(model_lqr(&self.aug.a, &self.aug.b, &design, &Mat::identity(self.aug.n(), self.aug.n()))?.k)
    }

    /// Real plant with the given mismatch, initial gain from
    /// [`Industrial::initial_gain`], initial state from
    /// [`Industrial::initial_state`].
    pub fn scenario(&self, mismatch: MismatchSpec, noise: NoiseSpec, horizon: usize, seed: u64) -> Result<Scenario> {
        let k0 = self.initial_gain()?;
        let delta = mismatch.delta_e;
        Ok(Scenario {
            plant: make_real_plant(
                self.aug.a.clone(),
                self.mismatch_direction(),
                self.aug.b.clone(),
                self.aug.b_w.clone(),
                mismatch,
                horizon,
                seed,
            ),
            weights: self.weights.clone(),
            noise,
            k0,
            x0: self.initial_state(delta)?,
            physical: Some(Physical {
                n_t: self.aug.n_t,
                t_prev: self.initial_temperature(delta)?,
                hg_prev: self.initial_generation(),
            }),
            output: Some((self.aug.c.clone(), self.aug.d.clone())),
        })
    }

    /// Nominal tracking law: receding-horizon gain of the nominal thermal
    /// model around the nominal optimum.
    pub fn mpc_law(&self, cfg: &MpcConfig) -> Result<MpcLaw> {
        let n_t = self.aug.n_t;
        let w = LqrWeights::identity(n_t, self.aug.m());
        let k_phys = mpc_gain(&self.dm.a_t, &self.dm.b_t, &w, cfg)?;
        let opt = self.optimum(0.0)?;
        Ok(MpcLaw {
            k_phys,
            t_set: opt.t_star,
            h_set: opt.hg_star,
        })
    }
}
