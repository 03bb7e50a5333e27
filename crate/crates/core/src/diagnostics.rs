//! Certification of candidate invariant curves.
//!
//! For a curve with tangent `X_p` and a transverse bundle `E`, the attraction
//! inequality reads
//!
//! ```text
//! |dPhi^t w| |v| <= C(p) e^{-t nu} |dPhi^t v| |w|,   v tangent, w in E_p, t >= 0,
//! ```
//!
//! and `C` must be log-Lipschitz along trajectories with rate `nu_C`. The
//! smallest admissible constant at `p` is
//! `c(p) = sup_s e^{s nu} gain_E(s) / gain_T(s)`, and its damped trajectory
//! supremum `C_hat(p) = sup_t c(Phi^t p) e^{-|t| nu_C}` satisfies both
//! conditions, with `1 <= c <= C_hat`.
//!
//! All suprema are taken over dyadic grids. A certificate covers the grids,
//! the horizon and the sampled arc it reports, nothing more.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{propagate_frames, sample_trajectory, trajectory_domain, PropagatedFrame, Tolerances};
use crate::lyapunov::{adjoint_ftle, extremal_adjoint_ftle_perp, ftle, tangent_gain, Extremum};
use crate::models::ModelSpec;
use crate::scalar::{from_usize, lit, to_f64, Real};

/// How the transverse bundle `E_p` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BundleRule {
    /// The g-orthogonal complement of `X_p`; generally not invariant.
    Orthogonal,
    /// The invariant bundle supplied by the model's oracles.
    Oracle,
}

/// A sampled candidate curve. The tangent at each sample is `X_p`.
#[derive(Debug, Clone)]
pub struct CandidateCurve<T: Real> {
    pub points: Vec<DVector<T>>,
    pub bundle: BundleRule,
}

impl<T: Real> CandidateCurve<T> {
    pub fn new(points: Vec<DVector<T>>, bundle: BundleRule) -> Self {
        Self { points, bundle }
    }

    /// Samples the model's known invariant curve at the given parameters.
    pub fn from_known_manifold(model: &ModelSpec<T>, params: &[T], bundle: BundleRule) -> Result<Self> {
        let curve = model
            .oracles()
            .manifold
            .as_ref()
            .ok_or_else(|| Error::InvalidSpec(format!("model {} has no known manifold", model.name())))?;
        Ok(Self { points: params.iter().map(|s| curve.point(*s)).collect(), bundle })
    }
}

/// Columns spanning `E_p`.
pub fn transverse_basis<T: Real>(model: &ModelSpec<T>, rule: BundleRule, p: &DVector<T>) -> Result<DMatrix<T>> {
    let x = model.field(p);
    let basis = match rule {
        BundleRule::Orthogonal => model.metric().at(p)?.orthonormal_complement(&x)?,
        BundleRule::Oracle => {
            let f = model
                .oracles()
                .transverse
                .as_ref()
                .ok_or_else(|| Error::InvalidSpec(format!("model {} has no transverse bundle", model.name())))?;
            f(p)
        }
    };
    let q = model.dim();
    if basis.nrows() != q || basis.ncols() + 1 != q {
        return Err(Error::DimensionMismatch { expected: q - 1, got: basis.ncols() });
    }
    let mut joint = DMatrix::zeros(q, q);
    joint.set_column(0, &x);
    joint.view_mut((0, 1), (q, q - 1)).copy_from(&basis);
    let sv = joint.singular_values();
    let smax = sv.max();
    if smax == T::zero() || sv.min() <= lit::<T>(1e-10) * smax {
        return Err(Error::InvalidSpec("transverse bundle is not complementary to the tangent".into()));
    }
    Ok(basis)
}

/// `log(gain_E / gain_T)` of a frame: the largest growth over `E_p` minus the
/// growth of the tangent, both in logarithmic form.
fn log_gain_ratio<T: Real>(model: &ModelSpec<T>, frame: &PropagatedFrame<T>, e: &DMatrix<T>) -> Result<T> {
    let g = model.metric();
    let gp = g.at(&frame.base)?;
    let gt = g.at(&frame.state)?;
    let x = model.field(&frame.base);
    let tangent = gt.norm(&(&frame.m * &x)) / gp.norm(&x);
    let normal = tangent_gain(&frame.m, e, &gp, &gt, Extremum::Max);
    Ok((normal / tangent).ln())
}

fn uniform_grid<T: Real>(span: T, level: u32) -> Vec<T> {
    let n = 1usize << level;
    let h = span / from_usize(n);
    (0..=n).map(|k| from_usize::<T>(k) * h).collect()
}

/// Discretized `c(p)` on the grid of `s` values (which should contain `0`),
/// with the maximizing `s`.
pub fn c_of_p<T: Real>(
    model: &ModelSpec<T>,
    rule: BundleRule,
    p: &DVector<T>,
    nu: T,
    s_grid: &[T],
    tol: &Tolerances,
) -> Result<(T, T)> {
    let e = transverse_basis(model, rule, p)?;
    let run = propagate_frames(model, p, s_grid, tol)?;
    let mut best = (T::one(), T::zero());
    for s in s_grid {
        let frame = if *s == T::zero() {
            PropagatedFrame::identity(p.clone())
        } else {
            run.frame_at(*s).cloned().ok_or(Error::DomainTruncated { t: to_f64(*s) })?
        };
        let v = (log_gain_ratio(model, &frame, &e)? + *s * nu).exp();
        if v > best.0 {
            best = (v, *s);
        }
    }
    Ok(best)
}

/// Discretized `C_hat(p)`: the supremum over the `t` grid (restricted to the
/// trajectory domain) of `c(Phi^t p) e^{-|t| nu_C}`, with the maximizing `t`.
/// Also returns the per-time values of `c` along the trajectory.
#[allow(clippy::too_many_arguments)]
pub fn c_hat_of_p<T: Real>(
    model: &ModelSpec<T>,
    rule: BundleRule,
    p: &DVector<T>,
    nu: T,
    nu_c: T,
    t_grid: &[T],
    s_grid: &[T],
    tol: &Tolerances,
) -> Result<ChatValue<T>> {
    let (states, _) = sample_trajectory(model, p, t_grid, tol)?;
    let along: Vec<(T, T)> = states
        .par_iter()
        .map(|(t, q)| c_of_p(model, rule, q, nu, s_grid, tol).map(|(c, _)| (*t, c)))
        .collect::<Result<_>>()?;
    let mut best = (T::neg_infinity(), T::zero());
    for (t, c) in &along {
        let v = *c * (-t.abs() * nu_c).exp();
        if v > best.0 {
            best = (v, *t);
        }
    }
    if along.is_empty() {
        return Err(Error::EmptyGrid);
    }
    Ok(ChatValue { value: best.0, arg_t: best.1, along })
}

#[derive(Debug, Clone)]
pub struct ChatValue<T: Real> {
    pub value: T,
    pub arg_t: T,
    /// `(t, c(Phi^t p))` on the part of the grid inside the trajectory domain.
    pub along: Vec<(T, T)>,
}

/// Per-sample part of an [`AttractionCertificate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleCertificate {
    pub point: Vec<f64>,
    pub c: f64,
    pub c_arg_s: f64,
    pub c_hat: f64,
    pub c_hat_arg_t: f64,
    /// Smallest margin of the attraction inequality in logarithmic form,
    /// `log C - t nu - log(gain_E / gain_T)`, over the validation grid.
    pub worst_slack: f64,
    pub worst_slack_t: f64,
    /// Smallest margin `nu_C |dt| - |d log c|` between consecutive times of
    /// the trajectory grid.
    pub lipschitz_slack: f64,
}

/// Result of checking the attraction inequalities on a sampled curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttractionCertificate {
    pub nu: f64,
    pub nu_c: f64,
    pub horizon: f64,
    pub level: u32,
    pub bundle: BundleRule,
    /// Grid on which `c` is computed (`[0, horizon/2]`, level `L`).
    pub fit_grid: Vec<f64>,
    /// Grid on which the inequality is validated (`[0, horizon]`, level `L+2`).
    pub validation_grid: Vec<f64>,
    /// Signed grid for `C_hat` and the log-Lipschitz check.
    pub trajectory_grid: Vec<f64>,
    pub samples: Vec<SampleCertificate>,
    pub worst_slack: f64,
    pub worst_lipschitz_slack: f64,
    /// `1 <= c <= C_hat` at every sample, to `1e-9`.
    pub ordering_holds: bool,
    pub passed: bool,
    pub note: String,
}

/// Slack below which a certificate is refused.
pub const PASS_TOLERANCE: f64 = -1e-9;

/// Checks the attraction inequality on every sample of `curve`.
///
/// `C(p)` is fitted as `c(p)` on `[0, horizon/2]` and validated on
/// `[0, horizon]` with a four times finer grid, so a rate `nu` beyond the true
/// gap shows up as negative slack.
pub fn check_attraction<T: Real>(
    model: &ModelSpec<T>,
    curve: &CandidateCurve<T>,
    nu: T,
    nu_c: T,
    horizon: T,
    level: u32,
    tol: &Tolerances,
) -> Result<AttractionCertificate> {
    if !(nu_c >= T::zero() && nu_c < nu) {
        return Err(Error::InvalidParameter(format!("need 0 <= nu_C < nu, got nu = {nu}, nu_C = {nu_c}")));
    }
    if !(horizon > T::zero()) {
        return Err(Error::InvalidParameter("horizon must be positive".into()));
    }
    if curve.points.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let two = lit::<T>(2.0);
    let fit = uniform_grid(horizon / two, level);
    let validation = uniform_grid(horizon, level + 2);
    let forward = uniform_grid(horizon, level);
    let mut traj: Vec<T> = forward.iter().skip(1).rev().map(|t| -*t).collect();
    traj.extend(forward.iter().copied());

    let samples: Vec<SampleCertificate> = curve
        .points
        .par_iter()
        .map(|p| certify_sample(model, curve.bundle, p, nu, nu_c, &fit, &validation, &traj, tol))
        .collect::<Result<_>>()?;

    let worst_slack = samples.iter().map(|s| s.worst_slack).fold(f64::INFINITY, f64::min);
    let worst_lipschitz_slack = samples.iter().map(|s| s.lipschitz_slack).fold(f64::INFINITY, f64::min);
    let ordering_holds = samples.iter().all(|s| s.c >= 1.0 - 1e-9 && s.c <= s.c_hat + 1e-9);
    let note = match curve.bundle {
        BundleRule::Orthogonal => {
            "transverse bundle is the orthogonal complement of the field, which need not be invariant; \
             the check is sufficient for this splitting only"
        }
        BundleRule::Oracle => "transverse bundle supplied by the model (invariant)",
    };
    Ok(AttractionCertificate {
        nu: to_f64(nu),
        nu_c: to_f64(nu_c),
        horizon: to_f64(horizon),
        level,
        bundle: curve.bundle,
        fit_grid: fit.iter().map(|t| to_f64(*t)).collect(),
        validation_grid: validation.iter().map(|t| to_f64(*t)).collect(),
        trajectory_grid: traj.iter().map(|t| to_f64(*t)).collect(),
        passed: worst_slack >= PASS_TOLERANCE && worst_lipschitz_slack >= PASS_TOLERANCE && ordering_holds,
        samples,
        worst_slack,
        worst_lipschitz_slack,
        ordering_holds,
        note: note.into(),
    })
}

#[allow(clippy::too_many_arguments)]
fn certify_sample<T: Real>(
    model: &ModelSpec<T>,
    rule: BundleRule,
    p: &DVector<T>,
    nu: T,
    nu_c: T,
    fit: &[T],
    validation: &[T],
    traj: &[T],
    tol: &Tolerances,
) -> Result<SampleCertificate> {
    let (c, c_arg) = c_of_p(model, rule, p, nu, fit, tol)?;
    let e = transverse_basis(model, rule, p)?;
    let run = propagate_frames(model, p, validation, tol)?;
    let log_c = c.ln();
    let mut worst = (f64::INFINITY, 0.0);
    for t in validation {
        let frame = if *t == T::zero() {
            PropagatedFrame::identity(p.clone())
        } else {
            match run.frame_at(*t) {
                Some(f) => f.clone(),
                None => continue,
            }
        };
        let slack = to_f64(log_c - *t * nu - log_gain_ratio(model, &frame, &e)?);
        if slack < worst.0 {
            worst = (slack, to_f64(*t));
        }
    }
    let chat = c_hat_of_p(model, rule, p, nu, nu_c, traj, fit, tol)?;
    let mut lipschitz = f64::INFINITY;
    for w in chat.along.windows(2) {
        let (t0, c0) = w[0];
        let (t1, c1) = w[1];
        let s = to_f64(nu_c * (t1 - t0).abs() - (c1.ln() - c0.ln()).abs());
        lipschitz = lipschitz.min(s);
    }
    Ok(SampleCertificate {
        point: p.iter().map(|v| to_f64(*v)).collect(),
        c: to_f64(c),
        c_arg_s: to_f64(c_arg),
        c_hat: to_f64(chat.value),
        c_hat_arg_t: to_f64(chat.arg_t),
        worst_slack: worst.0,
        worst_slack_t: worst.1,
        lipschitz_slack: lipschitz,
    })
}

/// Finite-time forms of the necessary conditions at a point of a candidate
/// curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NecessaryConditionReport {
    pub t_forward: f64,
    pub t_backward: f64,
    /// `ftle(X_p) + min` over unit normal covectors of the adjoint exponent,
    /// at `t_forward`: the estimated normal gap.
    pub nu_est: f64,
    /// Angle condition: for the extremal normal covector `u`, the largest over
    /// `w` in the bundle basis of `ftle(w) + adjoint_ftle(u) - log|cos(u, w)| / t`.
    /// Nonnegative when the condition holds.
    pub angle_margin: f64,
    /// Backward split: smallest backward exponent over unit normals minus the
    /// backward exponent of the tangent, at `t_backward`.
    pub backward_split: f64,
    pub truncated: bool,
}

/// Evaluates the finite-time necessary conditions at `p`, using the largest
/// admissible `|t| <= horizon` in each direction.
pub fn necessary_condition_diagnostics<T: Real>(
    model: &ModelSpec<T>,
    rule: BundleRule,
    p: &DVector<T>,
    horizon: T,
    tol: &Tolerances,
) -> Result<NecessaryConditionReport> {
    let g = model.metric();
    let x = model.field(p);
    if x.iter().all(|v| *v == T::zero()) {
        return Err(Error::ZeroField);
    }
    let dom = trajectory_domain(model, p, horizon, tol);
    let shrink = lit::<T>(1.0 - 1e-6);
    let t_fwd = if dom.upper_failure.is_some() { dom.t_max * shrink } else { horizon };
    let t_bwd = if dom.lower_failure.is_some() { dom.t_min * shrink } else { -horizon };
    if t_fwd <= T::zero() || t_bwd >= T::zero() {
        return Err(Error::DomainTruncated { t: 0.0 });
    }
    let run = propagate_frames(model, p, &[t_bwd, t_fwd], tol)?;
    let ff = run.frame_at(t_fwd).ok_or(Error::DomainTruncated { t: to_f64(t_fwd) })?;
    let fb = run.frame_at(t_bwd).ok_or(Error::DomainTruncated { t: to_f64(t_bwd) })?;

    let u = extremal_adjoint_ftle_perp(ff, &x, g, Extremum::Min)?;
    let nu_est = ftle(ff, &x, g)? + u.value;

    let gp = g.at(p)?;
    let e = transverse_basis(model, rule, p)?;
    let u_vec = gp.sharp(&u.direction);
    let lu = adjoint_ftle(ff, &u.direction, g)?;
    let mut angle_margin = T::neg_infinity();
    for j in 0..e.ncols() {
        let w = e.column(j).into_owned();
        let cos = gp.angle(&u_vec, &w)?.cos().abs();
        if cos <= T::eps() {
            continue;
        }
        let m = ftle(ff, &w, g)? + lu - cos.ln() / t_fwd.abs();
        if m > angle_margin {
            angle_margin = m;
        }
    }

    let gb = g.at(&fb.state)?;
    let normals = gp.orthonormal_complement(&x)?;
    let min_normal = tangent_gain(&fb.m, &normals, &gp, &gb, Extremum::Min).ln() / t_bwd.abs();
    let backward_split = min_normal - ftle(fb, &x, g)?;

    Ok(NecessaryConditionReport {
        t_forward: to_f64(t_fwd),
        t_backward: to_f64(t_bwd),
        nu_est: to_f64(nu_est),
        angle_margin: to_f64(angle_margin),
        backward_split: to_f64(backward_split),
        truncated: dom.is_truncated(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{davis_skodje, linear_model};
    use nalgebra::{dmatrix, dvector};

    fn diag13() -> ModelSpec<f64> {
        linear_model(dmatrix![-1.0, 0.0; 0.0, -3.0]).unwrap()
    }

    fn x_axis(n: usize) -> Vec<DVector<f64>> {
        (1..=n).map(|k| dvector![0.2 * k as f64, 0.0]).collect()
    }

    #[test]
    fn linear_c_values() {
        let m = diag13();
        let tol = Tolerances::default();
        let grid = uniform_grid(4.0, 4);
        let p = dvector![0.5, 0.0];
        for nu in [0.0, 2.0] {
            let (c, _) = c_of_p(&m, BundleRule::Orthogonal, &p, nu, &grid, &tol).unwrap();
            assert!((c - 1.0).abs() < 1e-7, "nu={nu} c={c}");
        }
        // Beyond the gap, c grows like e^{s (nu - 2)} with the grid span.
        let (c4, s4) = c_of_p(&m, BundleRule::Orthogonal, &p, 3.0, &grid, &tol).unwrap();
        let (c8, _) = c_of_p(&m, BundleRule::Orthogonal, &p, 3.0, &uniform_grid(8.0, 5), &tol).unwrap();
        assert_eq!(s4, 4.0);
        assert!((c4 - 4f64.exp()).abs() < 1e-5 * c4);
        assert!(c8 > 50.0 * c4);
    }

    #[test]
    fn refining_the_s_grid_never_lowers_c() {
        let m = davis_skodje(2.0).unwrap();
        let tol = Tolerances::default();
        let p = dvector![-0.4, 0.3];
        let coarse = c_of_p(&m, BundleRule::Orthogonal, &p, 0.5, &uniform_grid(3.0, 3), &tol).unwrap().0;
        let fine = c_of_p(&m, BundleRule::Orthogonal, &p, 0.5, &uniform_grid(3.0, 5), &tol).unwrap().0;
        assert!(fine >= coarse);
    }

    #[test]
    fn constant_c_gives_equal_c_hat() {
        let m = diag13();
        let tol = Tolerances::default();
        let s = uniform_grid(2.0, 3);
        let t: Vec<f64> = (-4..=4).map(|k| k as f64 * 0.5).collect();
        let p = dvector![0.5, 0.0];
        let r = c_hat_of_p(&m, BundleRule::Orthogonal, &p, 1.0, 0.1, &t, &s, &tol).unwrap();
        assert!((r.value - 1.0).abs() < 1e-7);
        assert_eq!(r.arg_t, 0.0);
    }

    #[test]
    fn linear_eigenline_certificate_is_tight() {
        let m = diag13();
        let tol = Tolerances::new(1e-12, 1e-14);
        let curve = CandidateCurve::new(x_axis(4), BundleRule::Orthogonal);
        let cert = check_attraction(&m, &curve, 2.0, 0.5, 4.0, 3, &tol).unwrap();
        assert!(cert.passed, "{cert:?}");
        for s in &cert.samples {
            assert!((s.c - 1.0).abs() < 1e-9);
            assert!(s.worst_slack.abs() < 1e-9);
        }
    }

    #[test]
    fn linear_slack_matches_closed_form() {
        // With nu below the gap of 2, c = 1 and the slack at time t is
        // (2 - nu) t, smallest at t = 0.
        let m = diag13();
        let curve = CandidateCurve::new(x_axis(2), BundleRule::Orthogonal);
        let tol = Tolerances::new(1e-12, 1e-14);
        let cert = check_attraction(&m, &curve, 1.25, 0.5, 4.0, 3, &tol).unwrap();
        assert!(cert.passed);
        let p = dvector![0.2, 0.0];
        let e = transverse_basis(&m, BundleRule::Orthogonal, &p).unwrap();
        let run = propagate_frames(&m, &p, &[1.5, 4.0], &tol).unwrap();
        for f in &run.frames {
            let slack = -(f.t * 1.25 + log_gain_ratio(&m, f, &e).unwrap());
            assert!((slack - 0.75 * f.t).abs() < 1e-8);
        }
        assert_eq!(cert.worst_slack, 0.0);
    }

    #[test]
    fn davis_skodje_vertical_bundle() {
        let m = davis_skodje(2.0).unwrap();
        let params: Vec<f64> = (1..=6).map(|k| k as f64 / 6.0).collect();
        let curve = CandidateCurve::from_known_manifold(&m, &params, BundleRule::Oracle).unwrap();
        let tol = Tolerances::default();
        let ok = check_attraction(&m, &curve, 0.9, 0.1, 5.0, 3, &tol).unwrap();
        assert!(ok.passed && ok.worst_slack >= 0.0 && ok.ordering_holds, "{ok:?}");
        let bad = check_attraction(&m, &curve, 1.5, 0.1, 5.0, 3, &tol).unwrap();
        assert!(!bad.passed && bad.worst_slack < 0.0);
        assert!(ok.note.contains("invariant"));
    }

    #[test]
    fn invalid_rates_are_rejected() {
        let curve = CandidateCurve::new(x_axis(1), BundleRule::Orthogonal);
        assert!(check_attraction(&diag13(), &curve, 1.0, 1.0, 1.0, 2, &Tolerances::default()).is_err());
    }

    #[test]
    fn necessary_conditions_on_linear_eigenline() {
        let r = necessary_condition_diagnostics(&diag13(), BundleRule::Orthogonal, &dvector![0.5, 0.0], 3.0, &Tolerances::default())
            .unwrap();
        assert!((r.nu_est - 2.0).abs() < 1e-7);
        assert!(r.angle_margin >= -1e-8);
        assert!((r.backward_split - 2.0).abs() < 1e-7);
        assert!(!r.truncated);
    }

    #[test]
    fn gap_estimate_on_davis_skodje() {
        let m = davis_skodje(2.0).unwrap();
        let x0: f64 = 0.05;
        let p = dvector![x0, x0 / (1.0 + x0)];
        let r = necessary_condition_diagnostics(&m, BundleRule::Oracle, &p, 5.0, &Tolerances::default()).unwrap();
        assert!((r.nu_est - 1.0).abs() < 0.1, "{r:?}");
        assert!(r.angle_margin >= -1e-8);
    }
}
