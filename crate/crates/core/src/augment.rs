//! Optimality-error output and the augmented incremental realization.
//!
//! The augmented state is `x_{k+1} = [T_{k+1} - T_k; e_k]` with input
//! `u_k = hᴳ_k - hᴳ_{k-1}`, so the origin of the augmented system is exactly
//! the economically optimal operating point.

use crate::dhs::{DiscreteModel, EconomicSpec, EquilibriumPoint};
use crate::mathkit::uncontrollable_modes;
use crate::{Error, Mat, Result, Vector};

/// `C_T` (m x n_T) and `D_T` (m x m) of the optimality error
/// `e = C_T T + D_T hᴳ`.
pub fn build_error_maps(spec: &EconomicSpec, n_t: usize) -> Result<(Mat, Mat)> {
    if spec.f_d.len() != n_t {
        return Err(Error::DimensionMismatch(format!(
            "{} temperature cost coefficients for {n_t} temperatures",
            spec.f_d.len()
        )));
    }
    let m = spec.n_producers();
    let mut c_t = Mat::zeros(m, n_t);
    c_t.row_mut(m - 1).copy_from(&spec.f_d_vec().transpose());
    let mut d_t = Mat::zeros(m, m);
    if m > 1 {
        d_t.view_mut((0, 0), (m - 1, m)).copy_from(&spec.f_m());
    }
    Ok((c_t, d_t))
}

pub fn error_output(c_t: &Mat, d_t: &Mat, t: &Vector, hg: &Vector) -> Vector {
    c_t * t + d_t * hg
}

/// `x⁺ = A x + B u + B_w w`, `e = C x + D u`.
#[derive(Debug, Clone)]
pub struct AugmentedSystem {
    pub a: Mat,
    pub b: Mat,
    pub b_w: Mat,
    pub c: Mat,
    pub d: Mat,
    pub c_t: Mat,
    pub d_t: Mat,
    pub n_t: usize,
    /// Number of modes of `(A, B)` passing the PBH controllability test.
    pub ctrb_rank: usize,
}

impl AugmentedSystem {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn is_controllable(&self) -> bool {
        self.ctrb_rank == self.n()
    }

    /// Upper-left thermal block of `A`.
    pub fn a_t(&self) -> Mat {
        self.a.view((0, 0), (self.n_t, self.n_t)).into_owned()
    }

    /// Splits an augmented state into its temperature-increment and error
    /// parts.
    pub fn split_state(&self, x: &Vector) -> (Vector, Vector) {
        (
            x.rows(0, self.n_t).into_owned(),
            x.rows(self.n_t, self.m()).into_owned(),
        )
    }
}

pub fn build_augmented(dm: &DiscreteModel, c_t: &Mat, d_t: &Mat) -> Result<AugmentedSystem> {
    let n_t = dm.a_t.nrows();
    let m = dm.b_t.ncols();
    if c_t.shape() != (m, n_t) || d_t.shape() != (m, m) {
        return Err(Error::DimensionMismatch(format!(
            "C_T {:?} and D_T {:?} for n_T = {n_t}, m = {m}",
            c_t.shape(),
            d_t.shape()
        )));
    }
    let n = n_t + m;
    let mut a = Mat::zeros(n, n);
    a.view_mut((0, 0), (n_t, n_t)).copy_from(&dm.a_t);
    a.view_mut((n_t, 0), (m, n_t)).copy_from(c_t);
    a.view_mut((n_t, n_t), (m, m)).fill_with_identity();
    let mut b = Mat::zeros(n, m);
    b.view_mut((0, 0), (n_t, m)).copy_from(&dm.b_t);
    b.view_mut((n_t, 0), (m, m)).copy_from(d_t);
    let n_l = dm.b_t_l.ncols();
    let mut b_w = Mat::zeros(n, n_l);
    b_w.view_mut((0, 0), (n_t, n_l)).copy_from(&dm.b_t_l);
    let mut c = Mat::zeros(m, n);
    c.view_mut((0, 0), (m, n_t)).copy_from(c_t);
    c.view_mut((0, n_t), (m, m)).fill_with_identity();
    let ctrb_rank = n - uncontrollable_modes(&a, &b);
    if ctrb_rank < n {
        log::warn!("augmented pair has {} uncontrollable modes", n - ctrb_rank);
    }
    Ok(AugmentedSystem {
        a,
        b,
        b_w,
        c,
        d: d_t.clone(),
        c_t: c_t.clone(),
        d_t: d_t.clone(),
        n_t,
        ctrb_rank,
    })
}

/// Rebuilds physical temperatures and generation from augmented data.
///
/// `t_prev` and `hg_prev` are the temperature and generation one step before
/// `xs[0]`; `T_k = t_prev + Σ_{j<=k} ΔT_j` and `hᴳ_k = hg_prev + Σ_{j<=k} u_j`.
pub fn physical_from_augmented(
    xs: &[Vector],
    us: &[Vector],
    t_prev: &Vector,
    hg_prev: &Vector,
) -> (Vec<Vector>, Vec<Vector>) {
    let n_t = t_prev.len();
    let mut t = t_prev.clone();
    let temps = xs
        .iter()
        .map(|x| {
            t += x.rows(0, n_t);
            t.clone()
        })
        .collect();
    let mut h = hg_prev.clone();
    let gens = us
        .iter()
        .map(|u| {
            h += u;
            h.clone()
        })
        .collect();
    (temps, gens)
}

/// Distances of trailing-window means from the optimal operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquilibriumReport {
    pub temperature: f64,
    pub generation: f64,
    pub error: f64,
    pub window: usize,
}

pub const DEFAULT_WINDOW: usize = 500;

fn window_mean(seq: &[Vector], window: usize) -> Vector {
    let w = window.min(seq.len()).max(1);
    let tail = &seq[seq.len() - w..];
    let mut acc = Vector::zeros(tail[0].len());
    for v in tail {
        acc += v;
    }
    acc / w as f64
}

/// Compares trailing-window means of `T`, `hᴳ` and `e` with the optimum.
/// Windows longer than the data shrink to the data length.
pub fn check_equilibrium(
    temps: &[Vector],
    gens: &[Vector],
    errors: &[Vector],
    optimum: &EquilibriumPoint,
    window: usize,
) -> EquilibriumReport {
    let w = window.min(temps.len()).min(gens.len()).min(errors.len());
    EquilibriumReport {
        temperature: (window_mean(temps, w) - &optimum.t_star).norm(),
        generation: (window_mean(gens, w) - &optimum.hg_star).norm(),
        error: window_mean(errors, w).norm(),
        window: w,
    }
}

/// Componentwise windowed mean of `|e|`'s mean, i.e. `|mean(e_i)|` per channel.
pub fn windowed_error_means(errors: &[Vector], window: usize) -> Vector {
    window_mean(errors, window).abs()
}
