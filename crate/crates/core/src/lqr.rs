//! Exact LQR cost evaluation, model-based LQR and the certainty-equivalence
//! pipeline.
//!
//! Gains follow the `u = K x` convention, so a stabilizing gain has
//! `ρ(A + BK) < 1`.

use crate::mathkit::{self, solve_dare, spectral_radius, stein_stable, TOL};
use crate::{Error, Mat, Result};

/// Agreement required between the two trace forms of the cost.
pub const COST_DUALITY_TOL: f64 = 1e-8;

/// Largest condition number of `Φ` accepted as persistently exciting.
pub const MAX_DATA_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct LqrWeights {
    pub q: Mat,
    pub r: Mat,
}

impl LqrWeights {
    pub fn new(q: Mat, r: Mat) -> Result<Self> {
        for (m, what) in [(&q, "Q"), (&r, "R")] {
            if !m.is_square() {
                return Err(Error::DimensionMismatch(format!("{what} must be square")));
            }
            if (m - m.transpose()).norm() > TOL.symmetry * m.norm() {
                return Err(Error::Config(format!("{what} must be symmetric")));
            }
            if m.clone().cholesky().is_none() {
                return Err(Error::Config(format!("{what} must be positive definite")));
            }
        }
        Ok(LqrWeights { q, r })
    }

    pub fn identity(n: usize, m: usize) -> Self {
        LqrWeights {
            q: Mat::identity(n, n),
            r: Mat::identity(m, m),
        }
    }

    /// `Q + Kᵀ R K`.
    pub fn stage(&self, k: &Mat) -> Mat {
        &self.q + k.transpose() * &self.r * k
    }
}

/// Column-aligned trajectory data `X₀`, `U₀`, `X₁`.
#[derive(Debug, Clone)]
pub struct DataBatch {
    pub x0: Mat,
    pub u0: Mat,
    pub x1: Mat,
}

impl DataBatch {
    pub fn new(x0: Mat, u0: Mat, x1: Mat) -> Result<Self> {
        let t = x0.ncols();
        if u0.ncols() != t || x1.ncols() != t || x1.nrows() != x0.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "batch X0 {:?}, U0 {:?}, X1 {:?}",
                x0.shape(),
                u0.shape(),
                x1.shape()
            )));
        }
        Ok(DataBatch { x0, u0, x1 })
    }

    pub fn len(&self) -> usize {
        self.x0.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n(&self) -> usize {
        self.x0.nrows()
    }

    pub fn m(&self) -> usize {
        self.u0.nrows()
    }

    /// `D₀ = [U₀; X₀]`.
    pub fn d0(&self) -> Mat {
        let (n, m, t) = (self.n(), self.m(), self.len());
        let mut d0 = Mat::zeros(m + n, t);
        d0.rows_mut(0, m).copy_from(&self.u0);
        d0.rows_mut(m, n).copy_from(&self.x0);
        d0
    }
}

fn closed_loop(a: &Mat, b: &Mat, k: &Mat) -> Mat {
    a + b * k
}

fn require_stable(a_cl: &Mat) -> Result<()> {
    let rho = spectral_radius(a_cl);
    if rho < 1.0 - TOL.stability_margin {
        Ok(())
    } else {
        Err(Error::NotSchurStable { rho })
    }
}

/// Stationary state covariance `U_K = U_ε + (A+BK) U_K (A+BK)ᵀ`.
pub fn stationary_cov(a: &Mat, b: &Mat, k: &Mat, u_eps: &Mat) -> Result<Mat> {
    mathkit::solve_dlyap_ctrl(&closed_loop(a, b, k), u_eps)
}

/// Cost-to-go matrix `P_K = Q + KᵀRK + (A+BK)ᵀ P_K (A+BK)`.
pub fn value_matrix(a: &Mat, b: &Mat, k: &Mat, w: &LqrWeights) -> Result<Mat> {
    mathkit::solve_dlyap_obsv(&closed_loop(a, b, k), &w.stage(k))
}

/// Both trace forms of the cost together with the Lyapunov solutions.
#[derive(Debug, Clone)]
pub struct CostBreakdown {
    /// `Tr((Q + KᵀRK) U_K)`.
    pub primal: f64,
    /// `Tr(P_K U_ε)`.
    pub dual: f64,
    pub p_k: Mat,
    pub u_k: Mat,
}

impl CostBreakdown {
    pub fn relative_gap(&self) -> f64 {
        (self.primal - self.dual).abs() / self.primal.abs().max(f64::MIN_POSITIVE)
    }
}

pub fn evaluate_cost(
    a: &Mat,
    b: &Mat,
    k: &Mat,
    w: &LqrWeights,
    u_eps: &Mat,
) -> Result<CostBreakdown> {
    let a_cl = closed_loop(a, b, k);
    mathkit::ensure_finite(&a_cl, "closed-loop matrix")?;
    require_stable(&a_cl)?;
    let stage = w.stage(k);
    let u_k = stein_stable(&a_cl, u_eps);
    let p_k = stein_stable(&a_cl.transpose(), &stage);
    Ok(CostBreakdown {
        primal: (&stage * &u_k).trace(),
        dual: (&p_k * u_eps).trace(),
        p_k,
        u_k,
    })
}

/// Steady-state cost `C(K)`; `+∞` when `K` does not stabilize `(A, B)`.
pub fn lqr_cost(a: &Mat, b: &Mat, k: &Mat, w: &LqrWeights, u_eps: &Mat) -> f64 {
    match evaluate_cost(a, b, k, w, u_eps) {
        Ok(c) => {
            debug_assert!(
                c.relative_gap() <= COST_DUALITY_TOL,
                "cost forms disagree: {} vs {}",
                c.primal,
                c.dual
            );
            c.primal
        }
        Err(_) => f64::INFINITY,
    }
}

/// Exact policy gradient `2((R + BᵀPB)K + BᵀPA) U_K`.
pub fn policy_gradient(a: &Mat, b: &Mat, k: &Mat, w: &LqrWeights, u_eps: &Mat) -> Result<Mat> {
    let c = evaluate_cost(a, b, k, w, u_eps)?;
    let btp = b.transpose() * &c.p_k;
    Ok(((&w.r + &btp * b) * k + btp * a) * c.u_k * 2.0)
}

#[derive(Debug, Clone)]
pub struct LqrSolution {
    pub k: Mat,
    pub p: Mat,
    pub cost: f64,
}

pub fn model_lqr(a: &Mat, b: &Mat, w: &LqrWeights, u_eps: &Mat) -> Result<LqrSolution> {
    let sol = solve_dare(a, b, &w.q, &w.r)?;
    let cost = evaluate_cost(a, b, &sol.k, w, u_eps)?.primal;
    Ok(LqrSolution {
        k: sol.k,
        p: sol.p,
        cost,
    })
}

/// Least-squares model estimate from one batch.
#[derive(Debug, Clone)]
pub struct Identified {
    pub a_hat: Mat,
    pub b_hat: Mat,
    /// Sample covariance `Φ = D₀D₀ᵀ / t`.
    pub phi: Mat,
}

pub(crate) fn check_condition(phi: &Mat) -> Result<()> {
    let sv = phi.clone().singular_values();
    let smin = sv.min();
    let cond = if smin > 0.0 { sv.max() / smin } else { f64::INFINITY };
    if !(cond <= MAX_DATA_CONDITION) {
        return Err(Error::RankDeficientData { cond });
    }
    Ok(())
}

/// `[B̂, Â] = X̄₁ Φ⁻¹` with `X̄₁ = X₁D₀ᵀ/t`.
pub fn ls_identify(batch: &DataBatch) -> Result<Identified> {
    let (n, m, t) = (batch.n(), batch.m(), batch.len());
    if t < n + m {
        return Err(Error::RankDeficientData {
            cond: f64::INFINITY,
        });
    }
    let d0 = batch.d0();
    let tf = t as f64;
    let phi = &d0 * d0.transpose() / tf;
    check_condition(&phi)?;
    let xbar1 = &batch.x1 * d0.transpose() / tf;
    let chol = phi
        .clone()
        .cholesky()
        .ok_or(Error::RankDeficientData { cond: f64::INFINITY })?;
    // X̄₁Φ⁻¹ = (Φ⁻¹X̄₁ᵀ)ᵀ since Φ is symmetric
    let theta = chol.solve(&xbar1.transpose()).transpose();
    Ok(Identified {
        b_hat: theta.columns(0, m).into_owned(),
        a_hat: theta.columns(m, n).into_owned(),
        phi,
    })
}

/// `Û_ε = ε̂ε̂ᵀ/t` with `ε̂ = X₁ − (Â + B̂K₀)X₀`.
pub fn residual_cov(batch: &DataBatch, a_hat: &Mat, b_hat: &Mat, k0: &Mat) -> Mat {
    let resid = &batch.x1 - (a_hat + b_hat * k0) * &batch.x0;
    mathkit::symmetrize(&(&resid * resid.transpose() / batch.len() as f64))
}

/// Certainty-equivalence gain: the Riccati gain of the estimated pair.
pub fn ce_lqr(a_hat: &Mat, b_hat: &Mat, w: &LqrWeights) -> Result<Mat> {
    Ok(solve_dare(a_hat, b_hat, &w.q, &w.r)?.k)
}
