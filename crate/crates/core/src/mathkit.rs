//! Dense numerical kernels shared by every other module.
//!
//! Sizes in this crate stay below a few dozen states, so everything is dense
//! and exact-ish: Stein (discrete Lyapunov) equations go through the
//! Kronecker system for tiny matrices and through squared Smith iteration
//! otherwise, and the Riccati equation is solved by value iteration followed
//! by Hewer refinement.

use crate::{Error, Mat, Result, Vector};

/// Numerical tolerances used by solvers and their tests alike.
#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    /// Matrices with spectral radius at or above `1 - stability_margin` are
    /// treated as unstable.
    pub stability_margin: f64,
    /// Relative asymmetry allowed in symmetric inputs.
    pub symmetry: f64,
    /// Relative residual target of Lyapunov solutions.
    pub lyapunov_residual: f64,
    /// Relative change that stops Riccati value iteration.
    pub dare_rel_change: f64,
    pub dare_max_iter: usize,
    /// Relative residual target of Riccati solutions.
    pub dare_residual: f64,
    /// Singular values below `rank * sigma_max` count as zero.
    pub rank: f64,
    /// Largest state dimension solved through the Kronecker system.
    pub kron_max_dim: usize,
}

pub const TOL: Tolerances = Tolerances {
    stability_margin: 1e-12,
    symmetry: 1e-10,
    lyapunov_residual: 1e-10,
    dare_rel_change: 1e-13,
    dare_max_iter: 100_000,
    dare_residual: 1e-9,
    rank: 1e-8,
    kron_max_dim: 8,
};

const DOUBLING_MAX_ITER: usize = 64;
const DARE_DIVERGENCE_CAP: f64 = 1e14;
const HEWER_MAX_ITER: usize = 8;

pub fn ensure_finite(m: &Mat, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn ensure_square(m: &Mat, what: &str) -> Result<()> {
    if m.is_square() {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )))
    }
}

fn ensure_symmetric(m: &Mat) -> Result<()> {
    let asym = (m - m.transpose()).norm();
    if asym > TOL.symmetry * m.norm() {
        return Err(Error::NonSymmetricInput { asym });
    }
    Ok(())
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &Mat) -> f64 {
    assert!(m.is_square(), "spectral radius of a non-square matrix");
    if m.nrows() == 0 {
        return 0.0;
    }
    if !m.iter().all(|v| v.is_finite()) {
        return f64::INFINITY;
    }
    // the default Schur iteration is uncapped; a matrix it cannot reduce is
    // reported as unstable rather than hanging the caller
    match nalgebra::linalg::Schur::try_new(m.clone(), f64::EPSILON, SCHUR_MAX_ITER) {
        Some(s) => s
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max),
        None => {
            log::warn!("Schur iteration did not converge for a {}x{} matrix", m.nrows(), m.ncols());
            f64::INFINITY
        }
    }
}

const SCHUR_MAX_ITER: usize = 100_000;

fn check_stable(a: &Mat) -> Result<()> {
    let rho = spectral_radius(a);
    if !(rho < 1.0 - TOL.stability_margin) {
        return Err(Error::NotSchurStable { rho });
    }
    Ok(())
}

/// Solves `X = A X Aᵀ + M` for a Schur-stable `A` without re-checking stability.
pub(crate) fn stein_stable(a: &Mat, m: &Mat) -> Mat {
    let n = a.nrows();
    let x = if n <= TOL.kron_max_dim {
        stein_kron(a, m)
    } else {
        let mut x = stein_doubling(a, m);
        // one correction pass absorbs the rounding of the squared iteration
        let resid = m + a * &x * a.transpose() - &x;
        if resid.norm() > 1e-3 * TOL.lyapunov_residual * (1.0 + x.norm()) {
            x += stein_doubling(a, &resid);
        }
        x
    };
    symmetrize(&x)
}

fn stein_kron(a: &Mat, m: &Mat) -> Mat {
    let n = a.nrows();
    let lhs = Mat::identity(n * n, n * n) - a.kronecker(a);
    let rhs = Vector::from_column_slice(m.as_slice());
    match lhs.lu().solve(&rhs) {
        Some(v) => Mat::from_column_slice(n, n, v.as_slice()),
        None => stein_doubling(a, m),
    }
}

fn stein_doubling(a: &Mat, m: &Mat) -> Mat {
    let mut x = m.clone();
    let mut ak = a.clone();
    for _ in 0..DOUBLING_MAX_ITER {
        let inc = &ak * &x * ak.transpose();
        x += &inc;
        if inc.norm() <= f64::EPSILON * x.norm() {
            break;
        }
        ak = &ak * &ak;
    }
    x
}

/// Observability-orientation Lyapunov equation `P = M + A_clᵀ P A_cl`.
pub fn solve_dlyap_obsv(a_cl: &Mat, m: &Mat) -> Result<Mat> {
    ensure_square(a_cl, "closed-loop matrix")?;
    ensure_finite(a_cl, "closed-loop matrix")?;
    ensure_finite(m, "weight matrix")?;
    ensure_symmetric(m)?;
    check_stable(a_cl)?;
    Ok(stein_stable(&a_cl.transpose(), m))
}

/// Controllability-orientation Lyapunov equation `U = M + A_cl U A_clᵀ`.
pub fn solve_dlyap_ctrl(a_cl: &Mat, m: &Mat) -> Result<Mat> {
    ensure_square(a_cl, "closed-loop matrix")?;
    ensure_finite(a_cl, "closed-loop matrix")?;
    ensure_finite(m, "covariance matrix")?;
    ensure_symmetric(m)?;
    check_stable(a_cl)?;
    Ok(stein_stable(a_cl, m))
}

#[derive(Debug, Clone)]
pub struct DareSolution {
    pub p: Mat,
    /// Optimal gain with the `u = K x` sign convention.
    pub k: Mat,
    pub iterations: usize,
}

fn riccati_gain(a: &Mat, b: &Mat, r: &Mat, p: &Mat) -> Option<Mat> {
    let btp = b.transpose() * p;
    let s = r + &btp * b;
    let rhs = &btp * a;
    let chol = s.cholesky()?;
    Some(-chol.solve(&rhs))
}

pub fn riccati_residual(a: &Mat, b: &Mat, q: &Mat, r: &Mat, p: &Mat) -> f64 {
    let btp = b.transpose() * p;
    let s = r + &btp * b;
    let gain_term = match s.clone().try_inverse() {
        Some(si) => btp.transpose() * si * &btp,
        None => return f64::INFINITY,
    };
    let rhs = q + a.transpose() * (p - gain_term) * a;
    (p - rhs).norm()
}

/// Stabilizing solution of the discrete algebraic Riccati equation.
pub fn solve_dare(a: &Mat, b: &Mat, q: &Mat, r: &Mat) -> Result<DareSolution> {
    ensure_square(a, "A")?;
    let n = a.nrows();
    if b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::DimensionMismatch(format!(
            "DARE with A {:?}, B {:?}, Q {:?}, R {:?}",
            a.shape(),
            b.shape(),
            q.shape(),
            r.shape()
        )));
    }
    for (m, what) in [(a, "A"), (b, "B"), (q, "Q"), (r, "R")] {
        ensure_finite(m, what)?;
    }
    ensure_symmetric(q)?;
    ensure_symmetric(r)?;

    let at = a.transpose();
    let mut p = q.clone();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < TOL.dare_max_iter {
        iterations += 1;
        let btp = b.transpose() * &p;
        let s = r + &btp * b;
        let Some(chol) = s.cholesky() else {
            return Err(Error::NotStabilizable("R + BᵀPB lost definiteness".into()));
        };
        let btpa = &btp * a;
        let next = symmetrize(&(q + &at * &p * a - btpa.transpose() * chol.solve(&btpa)));
        if !next.iter().all(|v| v.is_finite()) || next.norm() > DARE_DIVERGENCE_CAP {
            return Err(Error::NotStabilizable(format!(
                "value iteration diverged after {iterations} iterations"
            )));
        }
        let change = (&next - &p).norm();
        p = next;
        if change <= TOL.dare_rel_change * p.norm() {
            converged = true;
            break;
        }
    }
    let mut k = riccati_gain(a, b, r, &p)
        .ok_or_else(|| Error::NotStabilizable("singular gain system".into()))?;

    // Hewer refinement polishes the value-iteration fixed point.
    let mut resid = riccati_residual(a, b, q, r, &p);
    let mut hewer = 0;
    while resid > 1e-3 * TOL.dare_residual * (1.0 + p.norm()) && hewer < HEWER_MAX_ITER {
        let a_cl = a + b * &k;
        if spectral_radius(&a_cl) >= 1.0 - TOL.stability_margin {
            break;
        }
        let candidate = stein_stable(&a_cl.transpose(), &(q + k.transpose() * r * &k));
        let cand_resid = riccati_residual(a, b, q, r, &candidate);
        if cand_resid >= resid {
            break;
        }
        p = candidate;
        resid = cand_resid;
        k = riccati_gain(a, b, r, &p)
            .ok_or_else(|| Error::NotStabilizable("singular gain system".into()))?;
        hewer += 1;
    }
    if !converged && resid > TOL.dare_residual * (1.0 + p.norm()) {
        return Err(Error::NotStabilizable(format!(
            "value iteration did not converge in {} iterations",
            TOL.dare_max_iter
        )));
    }
    let rho = spectral_radius(&(a + b * &k));
    if !(rho < 1.0) {
        return Err(Error::NotStabilizable(format!(
            "Riccati gain leaves spectral radius {rho}"
        )));
    }
    Ok(DareSolution { p, k, iterations })
}

/// Moore-Penrose pseudoinverse with the usual `max(r, c) * eps * sigma_max`
/// cutoff.
pub fn pinv(m: &Mat) -> Mat {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return Mat::zeros(c, r);
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return Mat::zeros(c, r);
    }
    let eps = smax * (r.max(c) as f64) * f64::EPSILON;
    svd.pseudo_inverse(eps)
        .expect("SVD computed with both factors")
}

/// Smallest singular value of `[A − λI, B]` for every eigenvalue `λ` of `A`
/// (Popov–Belevitch–Hautus test), paired with `|λ|`. Complex pencils are
/// embedded as real matrices of twice the size.
pub fn pbh_margins(a: &Mat, b: &Mat) -> Vec<(f64, f64)> {
    let n = a.nrows();
    let m = b.ncols();
    a.complex_eigenvalues()
        .iter()
        .map(|l| {
            let shifted = a - Mat::identity(n, n) * l.re;
            let mut pencil = Mat::zeros(2 * n, 2 * (n + m));
            pencil.view_mut((0, 0), (n, n)).copy_from(&shifted);
            pencil.view_mut((n, n), (n, n)).copy_from(&shifted);
            pencil.view_mut((0, n), (n, n)).fill_diagonal(l.im);
            pencil.view_mut((n, 0), (n, n)).fill_diagonal(-l.im);
            pencil.view_mut((0, 2 * n), (n, m)).copy_from(b);
            pencil.view_mut((n, 2 * n + m), (n, m)).copy_from(b);
            (l.norm(), pencil.singular_values().min())
        })
        .collect()
}

/// Number of eigenvalues (with multiplicity) that fail the PBH test at
/// relative tolerance `TOL.rank`.
pub fn uncontrollable_modes(a: &Mat, b: &Mat) -> usize {
    let scale = a.norm().max(b.norm()).max(f64::MIN_POSITIVE);
    pbh_margins(a, b)
        .iter()
        .filter(|(_, s)| *s <= TOL.rank * scale)
        .count()
}

/// `(A, B)` is stabilizable: every eigenvalue on or outside the unit circle
/// passes the PBH test.
pub fn is_stabilizable(a: &Mat, b: &Mat) -> bool {
    let scale = a.norm().max(b.norm()).max(f64::MIN_POSITIVE);
    pbh_margins(a, b)
        .iter()
        .all(|&(mag, s)| mag < 1.0 - TOL.stability_margin || s > TOL.rank * scale)
}

/// Rank of the controllability matrix `[B, AB, ..., A^{n-1}B]`.
pub fn kalman_rank(a: &Mat, b: &Mat) -> usize {
    let n = a.nrows();
    let m = b.ncols();
    if n == 0 || m == 0 {
        return 0;
    }
    let mut ctrb = Mat::zeros(n, n * m);
    let mut block = b.clone();
    for i in 0..n {
        ctrb.view_mut((0, i * m), (n, m)).copy_from(&block);
        block = a * block;
    }
    numerical_rank(&ctrb)
}

pub fn numerical_rank(m: &Mat) -> usize {
    let sv = m.clone().singular_values();
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > TOL.rank * smax).count()
}

/// Gram matrix `H Hᵀ` of the depth-`depth` block Hankel matrix.
fn hankel_gram(u_seq: &[Vector], depth: usize) -> Mat {
    let m = u_seq[0].len();
    let rows = m * depth;
    let cols = u_seq.len() + 1 - depth;
    let mut gram = Mat::zeros(rows, rows);
    let mut col = Vector::zeros(rows);
    for j in 0..cols {
        for i in 0..depth {
            col.rows_mut(i * m, m).copy_from(&u_seq[j + i]);
        }
        gram.syger(1.0, &col, &col, 1.0);
    }
    gram.fill_upper_triangle_with_lower_triangle();
    gram
}

/// Smallest singular value of the block Hankel matrix of `u_seq`.
///
/// Measured over the `m * depth` rows, so it is zero whenever the Hankel
/// matrix cannot have full row rank.
pub fn hankel_min_sv(u_seq: &[Vector], depth: usize) -> Result<f64> {
    if depth == 0 || u_seq.len() < depth {
        return Err(Error::InsufficientData {
            needed: depth.max(1),
            have: u_seq.len(),
        });
    }
    let gram = hankel_gram(u_seq, depth);
    let lmin = gram.symmetric_eigenvalues().min();
    Ok(lmin.max(0.0).sqrt())
}

/// Empirical excitation level `sigma_min / sqrt(t * depth)`.
pub fn excitation_level(u_seq: &[Vector], depth: usize) -> Result<f64> {
    let s = hankel_min_sv(u_seq, depth)?;
    Ok(s / ((u_seq.len() * depth) as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stable(n: usize, rho: f64, rng: &mut impl Rng) -> Mat {
        let a = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let r = spectral_radius(&a);
        a * (rho / r)
    }

    fn series_ctrl(a: &Mat, m: &Mat, terms: usize) -> Mat {
        let mut acc = Mat::zeros(a.nrows(), a.nrows());
        let mut ai = Mat::identity(a.nrows(), a.nrows());
        for _ in 0..terms {
            acc += &ai * m * ai.transpose();
            ai = a * ai;
        }
        acc
    }

    #[test]
    fn lyapunov_trivial_cases() {
        let p = solve_dlyap_obsv(&Mat::zeros(3, 3), &Mat::identity(3, 3)).unwrap();
        assert_relative_eq!(p, Mat::identity(3, 3), epsilon = 1e-14);
        let p = solve_dlyap_obsv(&Mat::from_element(1, 1, 0.5), &Mat::from_element(1, 1, 1.0))
            .unwrap();
        assert_relative_eq!(p[(0, 0)], 4.0 / 3.0, epsilon = 1e-13);
        let u = solve_dlyap_ctrl(&Mat::from_element(1, 1, 0.9), &Mat::from_element(1, 1, 1.0))
            .unwrap();
        assert_relative_eq!(u[(0, 0)], 1.0 / (1.0 - 0.81), epsilon = 1e-11);
        let ue = Mat::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let u = solve_dlyap_ctrl(&Mat::zeros(2, 2), &ue).unwrap();
        assert_relative_eq!(u, ue, epsilon = 1e-14);
    }

    #[test]
    fn lyapunov_matches_truncated_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [3, 12] {
            let a = random_stable(n, 0.85, &mut rng);
            let m = Mat::identity(n, n);
            let u = solve_dlyap_ctrl(&a, &m).unwrap();
            assert_relative_eq!(u, series_ctrl(&a, &m, 400), epsilon = 1e-8, max_relative = 1e-8);
            let p = solve_dlyap_obsv(&a, &m).unwrap();
            let series = series_ctrl(&a.transpose(), &m, 400);
            assert_relative_eq!(p, series, epsilon = 1e-8, max_relative = 1e-8);
        }
    }

    #[test]
    fn lyapunov_residual_near_marginal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [4, 22] {
            let a = random_stable(n, 0.9995, &mut rng);
            let m = Mat::identity(n, n);
            let p = solve_dlyap_obsv(&a, &m).unwrap();
            let resid = (&m + a.transpose() * &p * &a - &p).norm();
            assert!(resid <= TOL.lyapunov_residual * (1.0 + p.norm()), "resid {resid}");
        }
    }

    #[test]
    fn lyapunov_errors() {
        let a = Mat::from_element(1, 1, 1.0);
        let m = Mat::identity(1, 1);
        assert!(matches!(solve_dlyap_obsv(&a, &m), Err(Error::NotSchurStable { .. })));
        let m2 = Mat::from_row_slice(2, 2, &[1.0, 0.3, 0.0, 1.0]);
        assert!(matches!(
            solve_dlyap_ctrl(&Mat::zeros(2, 2), &m2),
            Err(Error::NonSymmetricInput { .. })
        ));
    }

    #[test]
    fn dare_without_dynamics() {
        let q = Mat::from_diagonal(&Vector::from_vec(vec![1.0, 2.0]));
        let sol = solve_dare(&Mat::zeros(2, 2), &Mat::identity(2, 2), &q, &Mat::identity(2, 2))
            .unwrap();
        assert_relative_eq!(sol.p, q, epsilon = 1e-12);
        assert_relative_eq!(sol.k, Mat::zeros(2, 2), epsilon = 1e-12);
    }

    #[test]
    fn dare_scalar_fixed_point() {
        // independent value iteration on the scalar recursion
        let a: f64 = 1.01;
        let mut p: f64 = 1.0;
        for _ in 0..10_000 {
            let next = 1.0 + a * a * p - a * a * p * p / (1.0 + p);
            if (next - p).abs() < 1e-12 {
                p = next;
                break;
            }
            p = next;
        }
        let sol = solve_dare(
            &Mat::from_element(1, 1, a),
            &Mat::from_element(1, 1, 1.0),
            &Mat::from_element(1, 1, 1.0),
            &Mat::from_element(1, 1, 1.0),
        )
        .unwrap();
        assert_relative_eq!(sol.p[(0, 0)], p, epsilon = 1e-10);
        assert_relative_eq!(sol.k[(0, 0)], -a * p / (1.0 + p), epsilon = 1e-10);
    }

    #[test]
    fn dare_rejects_unstabilizable() {
        let a = Mat::from_row_slice(2, 2, &[1.2, 0.0, 0.0, 0.5]);
        let b = Mat::from_row_slice(2, 1, &[0.0, 1.0]);
        let res = solve_dare(&a, &b, &Mat::identity(2, 2), &Mat::identity(1, 1));
        assert!(matches!(res, Err(Error::NotStabilizable(_))));
    }

    #[test]
    fn pinv_examples() {
        assert_relative_eq!(pinv(&Mat::identity(3, 3)), Mat::identity(3, 3), epsilon = 1e-14);
        let ones = Mat::from_element(2, 2, 1.0);
        assert_relative_eq!(pinv(&ones), ones.clone() * 0.25, epsilon = 1e-14);
    }

    #[test]
    fn pinv_full_column_rank_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Mat::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
        let normal = (m.transpose() * &m).try_inverse().unwrap() * m.transpose();
        assert_relative_eq!(pinv(&m), normal, epsilon = 1e-9, max_relative = 1e-9);
    }

    #[test]
    fn spectral_radius_examples() {
        assert_relative_eq!(spectral_radius(&Mat::identity(4, 4)), 1.0, epsilon = 1e-12);
        let nil = Mat::from_row_slice(3, 3, &[0.0, 1.0, 2.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0]);
        assert!(spectral_radius(&nil) < 1e-10);
    }

    #[test]
    fn pbh_detects_uncontrollable_modes() {
        let a = Mat::from_diagonal(&Vector::from_vec(vec![0.5, 1.2]));
        let b1 = Mat::from_row_slice(2, 1, &[1.0, 0.0]);
        let b2 = Mat::from_row_slice(2, 1, &[0.0, 1.0]);
        assert_eq!(uncontrollable_modes(&a, &b1), 1);
        assert!(!is_stabilizable(&a, &b1));
        assert_eq!(uncontrollable_modes(&a, &b2), 1);
        assert!(is_stabilizable(&a, &b2));
        let rot = Mat::from_row_slice(2, 2, &[0.0, -1.1, 1.1, 0.0]);
        assert_eq!(uncontrollable_modes(&rot, &b1), 0);
        assert_eq!(uncontrollable_modes(&rot, &Mat::zeros(2, 1)), 2);
    }

    #[test]
    fn kalman_rank_extremes() {
        assert_eq!(kalman_rank(&Mat::zeros(3, 3), &Mat::identity(3, 3)), 3);
        assert_eq!(kalman_rank(&Mat::identity(3, 3), &Mat::zeros(3, 2)), 0);
    }

    #[test]
    fn hankel_cases() {
        let zeros = vec![Vector::zeros(2); 10];
        assert_eq!(hankel_min_sv(&zeros, 3).unwrap(), 0.0);
        let mut imp = vec![Vector::zeros(1); 6];
        imp[2][0] = 1.0;
        // direct SVD of the 2x5 Hankel matrix
        let mut h = Mat::zeros(2, 5);
        for j in 0..5 {
            h[(0, j)] = imp[j][0];
            h[(1, j)] = imp[j + 1][0];
        }
        let direct = h.singular_values().min();
        assert_relative_eq!(hankel_min_sv(&imp, 2).unwrap(), direct, epsilon = 1e-12);
        assert!(matches!(
            hankel_min_sv(&imp, 7),
            Err(Error::InsufficientData { .. })
        ));
    }
}
