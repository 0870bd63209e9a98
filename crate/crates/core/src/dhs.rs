//! Heating-network thermal models and steady-state economic optimality.
//!
//! Heat quantities (generation, loads, noise) are stored pre-divided by the
//! volumetric heat capacity of water, so a flow in m³/s times a temperature
//! difference in K has the same units as a heat rate.

use serde::{Deserialize, Serialize};

use crate::mathkit::{pinv, spectral_radius};
use crate::{Error, Mat, Result, Vector};

/// Volumetric heat capacity of water, J/(m³·K).
pub const RHO_CP: f64 = 4.186e6;

/// Converts a heat rate in watts into the scaled units used by the models.
pub fn watts_to_scaled(w: f64) -> f64 {
    w / RHO_CP
}

pub fn scaled_to_watts(h: f64) -> f64 {
    h * RHO_CP
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Producer,
    Load,
    Pipe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeSpec {
    pub id: String,
    pub kind: EdgeKind,
    pub tail: String,
    pub head: String,
    /// Volumetric flow, m³/s.
    pub flow: f64,
    /// Edge volume, m³.
    pub volume: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: String,
    pub volume: f64,
}

/// Declarative topology as read from a network file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    #[serde(rename = "node")]
    pub nodes: Vec<NodeSpec>,
    #[serde(rename = "edge")]
    pub edges: Vec<EdgeSpec>,
}

/// Validated heating network.
///
/// Edges are kept ordered producers first, then loads, then pipes, which is
/// the block order every model matrix assumes.
#[derive(Debug, Clone)]
pub struct HeatNetwork {
    edges: Vec<EdgeSpec>,
    nodes: Vec<NodeSpec>,
    tails: Vec<usize>,
    heads: Vec<usize>,
}

const FLOW_BALANCE_TOL: f64 = 1e-10;

impl HeatNetwork {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        let NetworkSpec { nodes, mut edges } = spec;
        if nodes.is_empty() {
            return Err(Error::InvalidNetwork("no nodes".into()));
        }
        for node in &nodes {
            if !(node.volume > 0.0 && node.volume.is_finite()) {
                return Err(Error::InvalidNetwork(format!(
                    "node `{}` has non-positive volume",
                    node.id
                )));
            }
        }
        for (i, node) in nodes.iter().enumerate() {
            if nodes[..i].iter().any(|o| o.id == node.id) {
                return Err(Error::InvalidNetwork(format!("duplicate node `{}`", node.id)));
            }
        }
        edges.sort_by_key(|e| e.kind);
        let index_of = |id: &str| nodes.iter().position(|n| n.id == id);
        let mut tails = Vec::with_capacity(edges.len());
        let mut heads = Vec::with_capacity(edges.len());
        for (i, e) in edges.iter().enumerate() {
            if edges[..i].iter().any(|o| o.id == e.id) {
                return Err(Error::InvalidNetwork(format!("duplicate edge `{}`", e.id)));
            }
            let tail = index_of(&e.tail).ok_or_else(|| {
                Error::InvalidNetwork(format!("edge `{}` references unknown node `{}`", e.id, e.tail))
            })?;
            let head = index_of(&e.head).ok_or_else(|| {
                Error::InvalidNetwork(format!("edge `{}` references unknown node `{}`", e.id, e.head))
            })?;
            if tail == head {
                return Err(Error::InvalidNetwork(format!("edge `{}` is a self-loop", e.id)));
            }
            if !(e.flow > 0.0 && e.flow.is_finite()) {
                return Err(Error::InvalidNetwork(format!("edge `{}` has non-positive flow", e.id)));
            }
            if !(e.volume > 0.0 && e.volume.is_finite()) {
                return Err(Error::InvalidNetwork(format!(
                    "edge `{}` has non-positive volume",
                    e.id
                )));
            }
            tails.push(tail);
            heads.push(head);
        }
        let net = HeatNetwork {
            edges,
            nodes,
            tails,
            heads,
        };
        net.check_flow_balance()?;
        net.check_connected()?;
        Ok(net)
    }

    fn check_flow_balance(&self) -> Result<()> {
        let scale = self.edges.iter().map(|e| e.flow).fold(1.0, f64::max);
        let mut net_in = vec![0.0; self.nodes.len()];
        for (j, e) in self.edges.iter().enumerate() {
            net_in[self.heads[j]] += e.flow;
            net_in[self.tails[j]] -= e.flow;
        }
        for (k, imbalance) in net_in.into_iter().enumerate() {
            if imbalance.abs() > FLOW_BALANCE_TOL * scale {
                return Err(Error::FlowImbalance {
                    node: self.nodes[k].id.clone(),
                    imbalance,
                });
            }
        }
        Ok(())
    }

    fn check_connected(&self) -> Result<()> {
        let mut parent: Vec<usize> = (0..self.nodes.len()).collect();
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for j in 0..self.edges.len() {
            let a = find(&mut parent, self.tails[j]);
            let b = find(&mut parent, self.heads[j]);
            parent[a] = b;
        }
        let root = find(&mut parent, 0);
        if (0..self.nodes.len()).all(|k| find(&mut parent, k) == root) {
            Ok(())
        } else {
            Err(Error::Disconnected)
        }
    }

    pub fn edges(&self) -> &[EdgeSpec] {
        &self.edges
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn count(&self, kind: EdgeKind) -> usize {
        self.edges.iter().filter(|e| e.kind == kind).count()
    }

    /// Number of temperature states (edges plus nodes).
    pub fn n_temperatures(&self) -> usize {
        self.edges.len() + self.nodes.len()
    }

    /// Node-by-edge incidence: +1 where the edge enters the node, -1 where it
    /// leaves.
    pub fn incidence(&self) -> Mat {
        let mut bh = Mat::zeros(self.nodes.len(), self.edges.len());
        for j in 0..self.edges.len() {
            bh[(self.heads[j], j)] = 1.0;
            bh[(self.tails[j], j)] = -1.0;
        }
        bh
    }

    /// Edge volumes followed by node volumes.
    pub fn volumes(&self) -> Vector {
        Vector::from_iterator(
            self.n_temperatures(),
            self.edges
                .iter()
                .map(|e| e.volume)
                .chain(self.nodes.iter().map(|n| n.volume)),
        )
    }

    pub fn flows(&self) -> Vector {
        Vector::from_iterator(self.edges.len(), self.edges.iter().map(|e| e.flow))
    }

    pub fn spec(&self) -> NetworkSpec {
        NetworkSpec {
            nodes: self.nodes.clone(),
            edges: self.edges.clone(),
        }
    }
}

/// Flow-weighted Kirchhoff matrix over edge and node temperatures.
pub fn build_kirchhoff(net: &HeatNetwork) -> Result<Mat> {
    net.check_flow_balance()?;
    let ne = net.edges.len();
    let nn = net.nodes.len();
    let bh = net.incidence();
    let bh_abs = bh.abs();
    let b_th = (&bh_abs + &bh) * 0.5;
    let b_sh = (&bh_abs - &bh) * 0.5;
    let q = net.flows();
    let dq = Mat::from_diagonal(&q);

    let mut ah = Mat::zeros(ne + nn, ne + nn);
    ah.view_mut((0, 0), (ne, ne)).copy_from(&dq);
    ah.view_mut((0, ne), (ne, nn))
        .copy_from(&(-(&dq * b_sh.transpose())));
    ah.view_mut((ne, 0), (nn, ne)).copy_from(&(-(&b_th * &dq)));
    ah.view_mut((ne, ne), (nn, nn))
        .copy_from(&Mat::from_diagonal(&(&b_th * &q)));
    Ok(ah)
}

/// Continuous-time model `Ṫ = -A₁T + B₁hᴳ - B₂hᴸ`.
#[derive(Debug, Clone)]
pub struct ContinuousModel {
    pub a1: Mat,
    pub b1: Mat,
    pub b2: Mat,
    pub n_t: usize,
    pub volumes: Vector,
}

impl ContinuousModel {
    pub fn n_producers(&self) -> usize {
        self.b1.ncols()
    }

    pub fn n_loads(&self) -> usize {
        self.b2.ncols()
    }
}

pub fn build_continuous(net: &HeatNetwork) -> Result<ContinuousModel> {
    let ah = build_kirchhoff(net)?;
    let vol = net.volumes();
    let n_t = vol.len();
    let n_g = net.count(EdgeKind::Producer);
    let n_l = net.count(EdgeKind::Load);
    let vinv = vol.map(|v| 1.0 / v);
    let mut a1 = ah;
    for (i, mut row) in a1.row_iter_mut().enumerate() {
        row *= vinv[i];
    }
    let mut b1 = Mat::zeros(n_t, n_g);
    let mut b2 = Mat::zeros(n_t, n_l);
    for i in 0..n_g {
        b1[(i, i)] = vinv[i];
    }
    for i in 0..n_l {
        b2[(n_g + i, i)] = vinv[n_g + i];
    }
    Ok(ContinuousModel {
        a1,
        b1,
        b2,
        n_t,
        volumes: vol,
    })
}

/// Euler-discretized model `T⁺ = A_T T + B_T hᴳ + B_Tᴸ hᴸ`.
#[derive(Debug, Clone)]
pub struct DiscreteModel {
    pub a_t: Mat,
    pub b_t: Mat,
    pub b_t_l: Mat,
    pub tau: f64,
}

pub fn discretize(cm: &ContinuousModel, tau: f64) -> Result<DiscreteModel> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("sampling interval must be >= 0, got {tau}")));
    }
    let rho = spectral_radius(&cm.a1);
    if rho > 0.0 {
        let limit = 2.0 / rho;
        if tau >= limit {
            return Err(Error::StepTooLarge { tau, limit });
        }
        if tau > 1.0 / rho {
            log::warn!(
                "sampling interval {tau} is above 1/rho(A1) = {}; Euler model oscillates",
                1.0 / rho
            );
        }
    }
    let n = cm.n_t;
    Ok(DiscreteModel {
        a_t: Mat::identity(n, n) - &cm.a1 * tau,
        b_t: &cm.b1 * tau,
        b_t_l: &cm.b2 * (-tau),
        tau,
    })
}

/// Producer and temperature cost coefficients (diagonals).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EconomicSpec {
    pub f_g: Vec<f64>,
    pub f_d: Vec<f64>,
}

impl EconomicSpec {
    pub fn new(f_g: Vec<f64>, f_d: Vec<f64>) -> Result<Self> {
        if f_g.is_empty() {
            return Err(Error::Config("at least one producer cost is required".into()));
        }
        if f_g.iter().chain(f_d.iter()).any(|&f| !(f > 0.0 && f.is_finite())) {
            return Err(Error::Config("cost coefficients must be positive".into()));
        }
        Ok(EconomicSpec { f_g, f_d })
    }

    pub fn n_producers(&self) -> usize {
        self.f_g.len()
    }

    pub fn f_g_mat(&self) -> Mat {
        Mat::from_diagonal(&Vector::from_column_slice(&self.f_g))
    }

    pub fn f_d_vec(&self) -> Vector {
        Vector::from_column_slice(&self.f_d)
    }

    /// Equal-marginal-cost matrix: row i is `F_i e_i - F_{i+1} e_{i+1}`.
    /// Empty (0 x 1) for a single producer.
    pub fn f_m(&self) -> Mat {
        let g = self.f_g.len();
        let mut fm = Mat::zeros(g - 1, g);
        for i in 0..g - 1 {
            fm[(i, i)] = self.f_g[i];
            fm[(i, i + 1)] = -self.f_g[i + 1];
        }
        fm
    }
}

/// Economically optimal generation for a steady load.
pub fn solve_dispatch(spec: &EconomicSpec, load: &Vector) -> Vector {
    let total: f64 = load.sum();
    let inv_sum: f64 = spec.f_g.iter().map(|f| 1.0 / f).sum();
    Vector::from_iterator(
        spec.f_g.len(),
        spec.f_g.iter().map(|f| total / (f * inv_sum)),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumPoint {
    pub t_star: Vector,
    pub hg_star: Vector,
}

/// Minimum-deviation temperature profile on the equilibrium line of `hg`.
pub fn solve_temperature(
    cm: &ContinuousModel,
    spec: &EconomicSpec,
    hg: &Vector,
    load: &Vector,
) -> Result<EquilibriumPoint> {
    if spec.f_d.len() != cm.n_t || hg.len() != cm.n_producers() || load.len() != cm.n_loads() {
        return Err(Error::DimensionMismatch(
            "economic spec, generation and load must match the model".into(),
        ));
    }
    let base = pinv(&cm.a1) * (&cm.b1 * hg - &cm.b2 * load);
    let fd = spec.f_d_vec();
    let z = -fd.dot(&base) / fd.sum();
    Ok(EquilibriumPoint {
        t_star: base.add_scalar(z),
        hg_star: hg.clone(),
    })
}

/// Residuals of the optimality conditions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimalityResiduals {
    /// `‖F_M hᴳ‖`: equal marginal cost.
    pub marginal: f64,
    /// `|1ᵀ F_D T|`: weighted temperature balance.
    pub temperature: f64,
    /// `‖A₁T − B₁hᴳ + B₂h̄ᴸ‖`: steady-state heat balance.
    pub balance: f64,
}

pub const OPTIMALITY_TOL: f64 = 1e-8;

impl OptimalityResiduals {
    pub fn is_optimal(&self) -> bool {
        self.marginal <= OPTIMALITY_TOL
            && self.temperature <= OPTIMALITY_TOL
            && self.balance <= OPTIMALITY_TOL
    }
}

pub fn verify_optimality(
    spec: &EconomicSpec,
    t: &Vector,
    hg: &Vector,
    cm: &ContinuousModel,
    load: &Vector,
) -> OptimalityResiduals {
    let marginal = if spec.n_producers() > 1 {
        (spec.f_m() * hg).norm()
    } else {
        0.0
    };
    OptimalityResiduals {
        marginal,
        temperature: spec.f_d_vec().dot(t).abs(),
        balance: (&cm.a1 * t - &cm.b1 * hg + &cm.b2 * load).norm(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn edge(id: &str, kind: EdgeKind, tail: &str, head: &str, flow: f64, volume: f64) -> EdgeSpec {
        EdgeSpec {
            id: id.into(),
            kind,
            tail: tail.into(),
            head: head.into(),
            flow,
            volume,
        }
    }

    fn node(id: &str, volume: f64) -> NodeSpec {
        NodeSpec {
            id: id.into(),
            volume,
        }
    }

    /// One producer into a hub feeding two loads back to the source node.
    pub(crate) fn star() -> HeatNetwork {
        HeatNetwork::new(NetworkSpec {
            nodes: vec![node("src", 1.0), node("hub", 2.0)],
            edges: vec![
                edge("g", EdgeKind::Producer, "src", "hub", 2.0, 1.0),
                edge("l1", EdgeKind::Load, "hub", "src", 1.0, 1.5),
                edge("l2", EdgeKind::Load, "hub", "src", 1.0, 0.5),
            ],
        })
        .unwrap()
    }

    #[test]
    fn cycle_kirchhoff_sums_vanish() {
        let net = HeatNetwork::new(NetworkSpec {
            nodes: vec![node("a", 1.0), node("b", 1.0)],
            edges: vec![
                edge("g", EdgeKind::Producer, "a", "b", 1.0, 1.0),
                edge("l", EdgeKind::Load, "b", "a", 1.0, 1.0),
            ],
        })
        .unwrap();
        let ah = build_kirchhoff(&net).unwrap();
        for i in 0..4 {
            assert_eq!(ah.row(i).sum(), 0.0);
            assert_eq!(ah.column(i).sum(), 0.0);
        }
    }

    #[test]
    fn star_kirchhoff_by_hand() {
        let ah = build_kirchhoff(&star()).unwrap();
        // order: g, l1, l2, src, hub
        #[rustfmt::skip]
        let expected = Mat::from_row_slice(5, 5, &[
            2.0, 0.0, 0.0, -2.0,  0.0,
            0.0, 1.0, 0.0,  0.0, -1.0,
            0.0, 0.0, 1.0,  0.0, -1.0,
            0.0, -1.0, -1.0, 2.0, 0.0,
            -2.0, 0.0, 0.0, 0.0, 2.0,
        ]);
        assert_eq!(ah, expected);
    }

    #[test]
    fn kirchhoff_symmetric_part_has_simple_zero() {
        let ah = build_kirchhoff(&star()).unwrap();
        let mut eig: Vec<f64> = ((&ah + ah.transpose()) * 0.5)
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .collect();
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(eig[0].abs() < 1e-10);
        assert!(eig[1] > 1e-6);
    }

    #[test]
    fn rejects_bad_topologies() {
        let unbalanced = NetworkSpec {
            nodes: vec![node("a", 1.0), node("b", 1.0)],
            edges: vec![
                edge("g", EdgeKind::Producer, "a", "b", 2.0, 1.0),
                edge("l", EdgeKind::Load, "b", "a", 1.0, 1.0),
            ],
        };
        assert!(matches!(
            HeatNetwork::new(unbalanced),
            Err(Error::FlowImbalance { .. })
        ));
        let split = NetworkSpec {
            nodes: vec![node("a", 1.0), node("b", 1.0), node("c", 1.0), node("d", 1.0)],
            edges: vec![
                edge("g", EdgeKind::Producer, "a", "b", 1.0, 1.0),
                edge("l", EdgeKind::Load, "b", "a", 1.0, 1.0),
                edge("g2", EdgeKind::Producer, "c", "d", 1.0, 1.0),
                edge("l2", EdgeKind::Load, "d", "c", 1.0, 1.0),
            ],
        };
        assert!(matches!(HeatNetwork::new(split), Err(Error::Disconnected)));
        let dangling = NetworkSpec {
            nodes: vec![node("a", 1.0)],
            edges: vec![edge("g", EdgeKind::Producer, "a", "zz", 1.0, 1.0)],
        };
        assert!(matches!(HeatNetwork::new(dangling), Err(Error::InvalidNetwork(_))));
    }

    #[test]
    fn continuous_model_scaling() {
        let net = star();
        let cm = build_continuous(&net).unwrap();
        let ah = build_kirchhoff(&net).unwrap();
        let vol = net.volumes();
        assert_relative_eq!(&cm.a1 * Vector::from_element(5, 1.0), Vector::zeros(5), epsilon = 1e-12);
        assert_relative_eq!(vol.transpose() * &cm.a1, Vector::zeros(5).transpose(), epsilon = 1e-12);
        assert_relative_eq!(Mat::from_diagonal(&vol) * &cm.a1, ah, epsilon = 1e-12);

        let mut doubled = net.spec();
        doubled.nodes.iter_mut().for_each(|n| n.volume *= 2.0);
        doubled.edges.iter_mut().for_each(|e| e.volume *= 2.0);
        let cm2 = build_continuous(&HeatNetwork::new(doubled).unwrap()).unwrap();
        assert_relative_eq!(cm2.a1 * 2.0, cm.a1, epsilon = 1e-12);
        assert_relative_eq!(cm2.b1 * 2.0, cm.b1, epsilon = 1e-12);
        assert_relative_eq!(cm2.b2 * 2.0, cm.b2, epsilon = 1e-12);
    }

    #[test]
    fn unit_volumes_give_kirchhoff() {
        let mut spec = star().spec();
        spec.nodes.iter_mut().for_each(|n| n.volume = 1.0);
        spec.edges.iter_mut().for_each(|e| e.volume = 1.0);
        let net = HeatNetwork::new(spec).unwrap();
        assert_eq!(build_continuous(&net).unwrap().a1, build_kirchhoff(&net).unwrap());
    }

    #[test]
    fn discretization() {
        let cm = build_continuous(&star()).unwrap();
        let dm = discretize(&cm, 0.0).unwrap();
        assert_eq!(dm.a_t, Mat::identity(5, 5));
        assert_eq!(dm.b_t, Mat::zeros(5, 1));
        for tau in [1e-2, 1e-3, 1e-4] {
            let dm = discretize(&cm, tau).unwrap();
            let recovered = (&dm.a_t - Mat::identity(5, 5)) / tau;
            assert_relative_eq!(recovered, -&cm.a1, epsilon = 1e-12, max_relative = 1e-12);
        }
        let limit = 2.0 / spectral_radius(&cm.a1);
        assert!(matches!(discretize(&cm, limit * 1.01), Err(Error::StepTooLarge { .. })));
    }

    #[test]
    fn dispatch_examples() {
        let spec = EconomicSpec::new(vec![1.0, 2.0], vec![1.0; 5]).unwrap();
        let h = solve_dispatch(&spec, &Vector::from_vec(vec![1.0, 2.0]));
        assert_relative_eq!(h, Vector::from_vec(vec![2.0, 1.0]), epsilon = 1e-14);
        let eq = EconomicSpec::new(vec![3.0; 4], vec![1.0]).unwrap();
        let h = solve_dispatch(&eq, &Vector::from_vec(vec![8.0]));
        assert_relative_eq!(h, Vector::from_element(4, 2.0), epsilon = 1e-14);
        assert_eq!(solve_dispatch(&eq, &Vector::zeros(2)), Vector::zeros(4));
    }

    #[test]
    fn single_producer_has_empty_marginal_matrix() {
        let spec = EconomicSpec::new(vec![2.0], vec![1.0; 5]).unwrap();
        assert_eq!(spec.f_m().shape(), (0, 1));
    }

    #[test]
    fn temperature_optimum_on_star() {
        let cm = build_continuous(&star()).unwrap();
        let spec = EconomicSpec::new(vec![1.0], vec![1.0, 2.0, 0.5, 3.0, 1.5]).unwrap();
        let load = Vector::from_vec(vec![0.7, 0.3]);
        let hg = solve_dispatch(&spec, &load);
        let eq = solve_temperature(&cm, &spec, &hg, &load).unwrap();
        let res = verify_optimality(&spec, &eq.t_star, &hg, &cm, &load);
        assert!(res.is_optimal(), "{res:?}");

        // 1-D oracle: minimize ½(T0 + z1)ᵀF_D(T0 + z1) by golden-section search
        let base = pinv(&cm.a1) * (&cm.b1 * &hg - &cm.b2 * &load);
        let fd = spec.f_d_vec();
        let f = |z: f64| {
            let t = base.add_scalar(z);
            0.5 * t.component_mul(&t).dot(&fd)
        };
        let (mut lo, mut hi) = (-100.0_f64, 100.0_f64);
        let g = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..200 {
            let c = hi - g * (hi - lo);
            let d = lo + g * (hi - lo);
            if f(c) < f(d) {
                hi = d;
            } else {
                lo = c;
            }
        }
        let z = 0.5 * (lo + hi);
        assert_relative_eq!(eq.t_star, base.add_scalar(z), epsilon = 1e-8);
        // derivative changes sign around z*
        let zs = eq.t_star[0] - base[0];
        assert!(f(zs - 1e-4) > f(zs) && f(zs + 1e-4) > f(zs));
    }

    #[test]
    fn centered_profile_needs_no_shift() {
        let cm = build_continuous(&star()).unwrap();
        let spec = EconomicSpec::new(vec![1.0], vec![1.0; 5]).unwrap();
        // zero load and zero generation: the base profile is 0 and stays put
        let eq = solve_temperature(&cm, &spec, &Vector::zeros(1), &Vector::zeros(2)).unwrap();
        assert_relative_eq!(eq.t_star, Vector::zeros(5), epsilon = 1e-14);
    }

    #[test]
    fn residuals_react_to_perturbations() {
        let net = HeatNetwork::new(NetworkSpec {
            nodes: vec![node("a", 1.0), node("b", 1.0)],
            edges: vec![
                edge("g1", EdgeKind::Producer, "a", "b", 1.0, 1.0),
                edge("g2", EdgeKind::Producer, "a", "b", 1.0, 1.0),
                edge("l", EdgeKind::Load, "b", "a", 2.0, 1.0),
            ],
        })
        .unwrap();
        let cm = build_continuous(&net).unwrap();
        let spec = EconomicSpec::new(vec![1.0, 3.0], vec![1.0; 5]).unwrap();
        let load = Vector::from_vec(vec![4.0]);
        let hg = solve_dispatch(&spec, &load);
        let eq = solve_temperature(&cm, &spec, &hg, &load).unwrap();
        assert!(verify_optimality(&spec, &eq.t_star, &hg, &cm, &load).is_optimal());

        let eps = 1e-3;
        let bumped = &hg + Vector::from_vec(vec![eps, -eps]);
        let res = verify_optimality(&spec, &eq.t_star, &bumped, &cm, &load);
        assert_relative_eq!(res.marginal, eps * (1.0 + 3.0), epsilon = 1e-12);

        let shifted = eq.t_star.add_scalar(0.25);
        let res = verify_optimality(&spec, &shifted, &hg, &cm, &load);
        assert_relative_eq!(res.temperature, 0.25 * 5.0, epsilon = 1e-12);
        assert!(res.balance < 1e-10);
    }
}
