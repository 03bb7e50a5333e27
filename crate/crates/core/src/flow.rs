//! Flow map, tangent propagator and adjoint propagator.
//!
//! The tangent propagator solves `M' = DX M`, `M(0) = I`. The adjoint
//! propagator solves `N' = -DX^T N`, `N(0) = I`, as its own matrix equation;
//! in exact arithmetic `N = M^{-T}`. Backward times integrate the time-reversed
//! system, so the frame at `t < 0` carries `dPhi^t` and its inverse transpose.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use crate::ode::{FailureReason, Method, Tolerances};
use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::ode::{self, OdeSystem, Rejection};
use crate::scalar::{lit, to_f64, Real};

/// State, tangent propagator and adjoint propagator at time `t` along the
/// trajectory through `base`.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagatedFrame<T: Real> {
    pub t: T,
    pub state: DVector<T>,
    pub m: DMatrix<T>,
    pub n_adj: DMatrix<T>,
    pub base: DVector<T>,
}

impl<T: Real> PropagatedFrame<T> {
    pub fn identity(base: DVector<T>) -> Self {
        let q = base.len();
        Self {
            t: T::zero(),
            state: base.clone(),
            m: DMatrix::identity(q, q),
            n_adj: DMatrix::identity(q, q),
            base,
        }
    }
}

/// Probed interval of existence of a trajectory.
///
/// An end without a failure reason means integration reached the probe
/// horizon there; the true interval may extend further.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDomain<T: Real> {
    pub t_min: T,
    pub t_max: T,
    pub lower_failure: Option<FailureReason>,
    pub upper_failure: Option<FailureReason>,
}

impl<T: Real> TrajectoryDomain<T> {
    pub fn contains(&self, t: T) -> bool {
        let lower_ok = t > self.t_min || (t == self.t_min && self.lower_failure.is_none());
        let upper_ok = t < self.t_max || (t == self.t_max && self.upper_failure.is_none());
        lower_ok && upper_ok
    }

    pub fn is_truncated(&self) -> bool {
        self.lower_failure.is_some() || self.upper_failure.is_some()
    }
}

/// Frames at the requested grid times that lie inside the trajectory domain.
#[derive(Debug, Clone)]
pub struct Propagation<T: Real> {
    pub frames: Vec<PropagatedFrame<T>>,
    pub domain: TrajectoryDomain<T>,
}

impl<T: Real> Propagation<T> {
    pub fn frame_at(&self, t: T) -> Option<&PropagatedFrame<T>> {
        self.frames.iter().find(|f| f.t == t)
    }
}

struct FlowSystem<'a, T: Real> {
    model: &'a ModelSpec<T>,
    sign: T,
    variational: bool,
    blowup: T,
}

impl<T: Real> FlowSystem<'_, T> {
    fn q(&self) -> usize {
        self.model.dim()
    }

    fn block(&self, y: &DVector<T>, k: usize) -> DMatrix<T> {
        let q = self.q();
        DMatrix::from_column_slice(q, q, &y.as_slice()[q + k * q * q..q + (k + 1) * q * q])
    }
}

impl<T: Real> OdeSystem<T> for FlowSystem<'_, T> {
    fn rhs(&self, y: &DVector<T>) -> DVector<T> {
        let q = self.q();
        let x = y.rows(0, q).into_owned();
        let fx = self.model.field(&x) * self.sign;
        if !self.variational {
            return fx;
        }
        let j = self.model.jacobian(&x) * self.sign;
        let dm = &j * self.block(y, 0);
        let dn = -(j.transpose() * self.block(y, 1));
        let mut out = DVector::zeros(y.len());
        out.rows_mut(0, q).copy_from(&fx);
        out.as_mut_slice()[q..q + q * q].copy_from_slice(dm.as_slice());
        out.as_mut_slice()[q + q * q..].copy_from_slice(dn.as_slice());
        out
    }

    fn check(&self, y: &DVector<T>) -> Option<Rejection> {
        if y.iter().any(|v| !v.is_finite_value()) {
            return Some(Rejection::BlowUp);
        }
        let x = y.rows(0, self.q()).into_owned();
        if x.norm() > self.blowup {
            return Some(Rejection::BlowUp);
        }
        if !self.model.is_admissible(&x) {
            return Some(Rejection::Guard);
        }
        None
    }

    fn w_solver(&self, y: &DVector<T>, gh: T) -> Option<Box<dyn Fn(&DVector<T>) -> DVector<T> + '_>> {
        let q = self.q();
        let x = y.rows(0, q).into_owned();
        let j = self.model.jacobian(&x) * (self.sign * gh);
        let id = DMatrix::<T>::identity(q, q);
        let w_fwd = (&id - &j).lu();
        let w_adj = (&id + j.transpose()).lu();
        if !w_fwd.is_invertible() || !w_adj.is_invertible() {
            return None;
        }
        let variational = self.variational;
        Some(Box::new(move |r: &DVector<T>| {
            let mut out = DVector::zeros(r.len());
            let rx = r.rows(0, q).into_owned();
            out.rows_mut(0, q).copy_from(&w_fwd.solve(&rx).unwrap_or(rx));
            if variational {
                let rm = DMatrix::from_column_slice(q, q, &r.as_slice()[q..q + q * q]);
                let rn = DMatrix::from_column_slice(q, q, &r.as_slice()[q + q * q..]);
                let sm = w_fwd.solve(&rm).unwrap_or(rm);
                let sn = w_adj.solve(&rn).unwrap_or(rn);
                out.as_mut_slice()[q..q + q * q].copy_from_slice(sm.as_slice());
                out.as_mut_slice()[q + q * q..].copy_from_slice(sn.as_slice());
            }
            out
        }))
    }
}

fn augmented_initial<T: Real>(p: &DVector<T>) -> DVector<T> {
    let q = p.len();
    let mut y = DVector::zeros(q + 2 * q * q);
    y.rows_mut(0, q).copy_from(p);
    for i in 0..q {
        y[q + i * q + i] = T::one();
        y[q + q * q + i * q + i] = T::one();
    }
    y
}

fn check_start<T: Real>(model: &ModelSpec<T>, p: &DVector<T>) -> Result<()> {
    if p.len() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: p.len() });
    }
    if !model.is_admissible(p) {
        return Err(Error::Integration { t: 0.0, reason: FailureReason::DomainExit });
    }
    Ok(())
}

fn system<'a, T: Real>(model: &'a ModelSpec<T>, sign: T, variational: bool, tol: &Tolerances) -> FlowSystem<'a, T> {
    FlowSystem { model, sign, variational, blowup: lit(tol.blowup) }
}

/// Approximates `Phi^t(p)`, landing exactly on `t` (negative `t` integrates
/// backward).
pub fn integrate<T: Real>(model: &ModelSpec<T>, p: &DVector<T>, t: T, tol: &Tolerances) -> Result<DVector<T>> {
    check_start(model, p)?;
    if t == T::zero() {
        return Ok(p.clone());
    }
    let sign = if t < T::zero() { -T::one() } else { T::one() };
    let sys = system(model, sign, false, tol);
    let out = ode::integrate(&sys, p, &[], Some(t.abs()), tol);
    match out.failure {
        None => Ok(out.final_state),
        Some(reason) => Err(Error::Integration { t: to_f64(sign * out.reached), reason }),
    }
}

struct HalfRun<T: Real> {
    values: Vec<DVector<T>>,
    reached: T,
    failure: Option<FailureReason>,
}

/// Runs one time direction; `taus` ascending and positive.
fn half_run<T: Real>(
    model: &ModelSpec<T>,
    y0: &DVector<T>,
    sign: T,
    taus: &[T],
    variational: bool,
    land: bool,
    tol: &Tolerances,
) -> HalfRun<T> {
    if taus.is_empty() {
        return HalfRun { values: Vec::new(), reached: T::zero(), failure: None };
    }
    let sys = system(model, sign, variational, tol);
    let land_on = if land { taus.last().copied() } else { None };
    let out = ode::integrate(&sys, y0, taus, land_on, tol);
    HalfRun { values: out.outputs, reached: out.reached, failure: out.failure }
}

fn split_grid<T: Real>(grid: &[T]) -> (Vec<T>, Vec<T>) {
    let mut back: Vec<T> = grid.iter().filter(|t| **t < T::zero()).map(|t| -*t).collect();
    let mut fwd: Vec<T> = grid.iter().filter(|t| **t > T::zero()).copied().collect();
    back.sort_by(|a, b| a.partial_cmp(b).unwrap());
    back.dedup();
    fwd.sort_by(|a, b| a.partial_cmp(b).unwrap());
    fwd.dedup();
    (back, fwd)
}

fn domain_from<T: Real>(back: &[T], fwd: &[T], b: &HalfRun<T>, f: &HalfRun<T>) -> TrajectoryDomain<T> {
    let t_min = if b.failure.is_some() { -b.reached } else { -back.last().copied().unwrap_or(T::zero()) };
    let t_max = if f.failure.is_some() { f.reached } else { fwd.last().copied().unwrap_or(T::zero()) };
    TrajectoryDomain { t_min, t_max, lower_failure: b.failure, upper_failure: f.failure }
}

/// Propagates state, tangent and adjoint propagators through `p` and emits a
/// frame at every grid time inside the trajectory domain.
///
/// Grid times are reached by dense output, so the step sequence (and hence
/// every emitted frame) is independent of how far the grid extends.
pub fn propagate_frames<T: Real>(
    model: &ModelSpec<T>,
    p: &DVector<T>,
    grid: &[T],
    tol: &Tolerances,
) -> Result<Propagation<T>> {
    check_start(model, p)?;
    let q = model.dim();
    let (back, fwd) = split_grid(grid);
    let y0 = augmented_initial(p);
    let (b, f) = rayon::join(
        || half_run(model, &y0, -T::one(), &back, true, false, tol),
        || half_run(model, &y0, T::one(), &fwd, true, false, tol),
    );
    let domain = domain_from(&back, &fwd, &b, &f);

    let unpack = |t: T, y: &DVector<T>| PropagatedFrame {
        t,
        state: y.rows(0, q).into_owned(),
        m: DMatrix::from_column_slice(q, q, &y.as_slice()[q..q + q * q]),
        n_adj: DMatrix::from_column_slice(q, q, &y.as_slice()[q + q * q..]),
        base: p.clone(),
    };
    let mut frames = Vec::with_capacity(b.values.len() + f.values.len() + 1);
    for (tau, y) in back.iter().zip(&b.values).rev() {
        frames.push(unpack(-*tau, y));
    }
    if grid.iter().any(|t| *t == T::zero()) {
        frames.push(PropagatedFrame::identity(p.clone()));
    }
    for (tau, y) in fwd.iter().zip(&f.values) {
        frames.push(unpack(*tau, y));
    }
    Ok(Propagation { frames, domain })
}

/// States at the requested times (any order of signs), plus the domain.
/// Times outside the domain are omitted from the result.
pub fn sample_trajectory<T: Real>(
    model: &ModelSpec<T>,
    p: &DVector<T>,
    times: &[T],
    tol: &Tolerances,
) -> Result<(Vec<(T, DVector<T>)>, TrajectoryDomain<T>)> {
    check_start(model, p)?;
    let (back, fwd) = split_grid(times);
    let (b, f) = rayon::join(
        || half_run(model, p, -T::one(), &back, false, false, tol),
        || half_run(model, p, T::one(), &fwd, false, false, tol),
    );
    let domain = domain_from(&back, &fwd, &b, &f);
    let mut out = Vec::new();
    for (tau, y) in back.iter().zip(&b.values).rev() {
        out.push((-*tau, y.clone()));
    }
    if times.iter().any(|t| *t == T::zero()) {
        out.push((T::zero(), p.clone()));
    }
    for (tau, y) in fwd.iter().zip(&f.values) {
        out.push((*tau, y.clone()));
    }
    Ok((out, domain))
}

/// Probes the trajectory through `p` on `[-horizon, horizon]`.
pub fn trajectory_domain<T: Real>(model: &ModelSpec<T>, p: &DVector<T>, horizon: T, tol: &Tolerances) -> TrajectoryDomain<T> {
    if check_start(model, p).is_err() {
        return TrajectoryDomain {
            t_min: T::zero(),
            t_max: T::zero(),
            lower_failure: Some(FailureReason::DomainExit),
            upper_failure: Some(FailureReason::DomainExit),
        };
    }
    let h = [horizon.abs()];
    let (b, f) = rayon::join(
        || half_run(model, p, -T::one(), &h, false, true, tol),
        || half_run(model, p, T::one(), &h, false, true, tol),
    );
    domain_from(&h, &h, &b, &f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{davis_skodje, linear_model, michaelis_menten};
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn diag13() -> ModelSpec<f64> {
        linear_model(dmatrix![-1.0, 0.0; 0.0, -3.0]).unwrap()
    }

    #[test]
    fn time_zero_is_identity() {
        let m = davis_skodje(2.0).unwrap();
        let p = dvector![0.3, -0.2];
        assert_eq!(integrate(&m, &p, 0.0, &Tolerances::default()).unwrap(), p);
        let pr = propagate_frames(&m, &p, &[0.0], &Tolerances::default()).unwrap();
        assert_eq!(pr.frames[0].m, DMatrix::identity(2, 2));
        assert_eq!(pr.frames[0].n_adj, DMatrix::identity(2, 2));
    }

    #[test]
    fn linear_flow_matches_exponential() {
        let y = integrate(&diag13(), &dvector![1.0, 1.0], 1.0, &Tolerances::default()).unwrap();
        assert_relative_eq!(y[0], (-1.0f64).exp(), max_relative = 1e-8);
        assert_relative_eq!(y[1], (-3.0f64).exp(), max_relative = 1e-7);
    }

    #[test]
    fn davis_skodje_matches_closed_form() {
        let m = davis_skodje(2.0).unwrap();
        let p = dvector![1.0, 1.0];
        let exact = (m.oracles().flow.as_ref().unwrap())(&p, 2.0);
        let y = integrate(&m, &p, 2.0, &Tolerances::default()).unwrap();
        assert!((y - exact).amax() < 1e-7);
    }

    #[test]
    fn linear_propagators_match_exponentials() {
        let a = dmatrix![-1.0, 0.5; 0.2, -2.0];
        let m = linear_model(a.clone()).unwrap();
        let pr = propagate_frames(&m, &dvector![0.4, -0.3], &[-1.0, 0.0, 0.5, 1.5], &Tolerances::default()).unwrap();
        assert_eq!(pr.frames.len(), 4);
        for f in &pr.frames {
            let e = (&a * f.t).exp();
            let e_adj = (a.transpose() * -f.t).exp();
            assert!((&f.m - &e).amax() < 1e-7 * e.amax(), "t={}", f.t);
            assert!((&f.n_adj - &e_adj).amax() < 1e-7 * e_adj.amax(), "t={}", f.t);
        }
    }

    #[test]
    fn davis_skodje_naim_tangent_is_transported() {
        let m = davis_skodje(2.0).unwrap();
        let x0: f64 = 0.5;
        let p = dvector![x0, x0 / (1.0 + x0)];
        let pr = propagate_frames(&m, &p, &[-1.0, 1.0, 3.0], &Tolerances::default()).unwrap();
        let tangent = |x: f64| dvector![1.0, 1.0 / ((1.0 + x) * (1.0 + x))];
        for f in &pr.frames {
            let v = &f.m * tangent(x0);
            let w = tangent(f.state[0]);
            let cross = (v[0] * w[1] - v[1] * w[0]) / (v.norm() * w.norm());
            assert!(cross.abs() < 1e-6, "t={} cross={cross}", f.t);
        }
    }

    #[test]
    fn semigroup_cocycle_and_pairing() {
        let tol = Tolerances::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for model in [davis_skodje(2.0).unwrap(), michaelis_menten(0.5, 0.5, 0.5).unwrap()] {
            for _ in 0..10 {
                let p = dvector![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
                let s = rng.random_range(0.0..1.0);
                let t = rng.random_range(0.0..1.0);
                let direct = integrate(&model, &p, s + t, &tol).unwrap();
                let mid = integrate(&model, &p, s, &tol).unwrap();
                let chained = integrate(&model, &mid, t, &tol).unwrap();
                assert!((&direct - &chained).amax() < 10.0 * (tol.rel * direct.amax() + tol.abs) + 1e-9);

                let a = propagate_frames(&model, &p, &[s, s + t], &tol).unwrap();
                let b = propagate_frames(&model, &a.frames[0].state, &[t], &tol).unwrap();
                let m_st = &a.frames[1].m;
                let chain = &b.frames[0].m * &a.frames[0].m;
                assert!((m_st - &chain).amax() <= 1e-5 * m_st.amax());
                for f in &a.frames {
                    let prod = &f.n_adj * f.m.transpose();
                    assert!((prod - DMatrix::identity(2, 2)).amax() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn tighter_tolerance_reduces_oracle_error() {
        let m = davis_skodje(2.0).unwrap();
        let p = dvector![1.0, 1.0];
        let exact = (m.oracles().flow.as_ref().unwrap())(&p, 5.0);
        let err = |tol: Tolerances| (integrate(&m, &p, 5.0, &tol).unwrap() - &exact).amax();
        let coarse = err(Tolerances::new(1e-6, 1e-8));
        let fine = err(Tolerances::new(1e-6, 1e-8).scaled(0.5));
        assert!(fine < coarse, "{fine} !< {coarse}");
    }

    #[test]
    fn domain_probes() {
        let d = trajectory_domain(&diag13(), &dvector![1e-3, 1e-3], 10.0, &Tolerances::default());
        assert_eq!((d.t_min, d.t_max), (-10.0, 10.0));
        assert!(!d.is_truncated());
        assert!(d.contains(0.0) && d.contains(-10.0));

        // x(t) = x0 e^{-t} reaches -1 at t = -ln 2 for x0 = -0.5.
        let m = davis_skodje(2.0).unwrap();
        let d = trajectory_domain(&m, &dvector![-0.5, 0.0], 3.0, &Tolerances::default());
        assert_eq!(d.lower_failure, Some(FailureReason::DomainExit));
        assert!((d.t_min + 2f64.ln()).abs() < 1e-3, "t_min {}", d.t_min);
        assert!(d.contains(0.0) && !d.contains(-1.0));
    }

    #[test]
    fn frames_beyond_failure_are_omitted() {
        let m = davis_skodje(2.0).unwrap();
        let pr = propagate_frames(&m, &dvector![-0.5, 0.0], &[-2.0, -0.5, 0.0, 1.0], &Tolerances::default()).unwrap();
        let times: Vec<f64> = pr.frames.iter().map(|f| f.t).collect();
        assert_eq!(times, vec![-0.5, 0.0, 1.0]);
    }

    #[test]
    fn nested_grids_give_identical_frames() {
        let m = davis_skodje(3.0).unwrap();
        let p = dvector![0.2, 0.7];
        let tol = Tolerances::default();
        let g1: Vec<f64> = (-4..=4).map(|k| k as f64 * 0.25).collect();
        let g2: Vec<f64> = (-12..=12).map(|k| k as f64 * 0.25).collect();
        let a = propagate_frames(&m, &p, &g1, &tol).unwrap();
        let b = propagate_frames(&m, &p, &g2, &tol).unwrap();
        for f in &a.frames {
            assert_eq!(Some(f), b.frame_at(f.t));
        }
    }

    #[test]
    fn stiff_method_propagates_linear_system() {
        let tol = Tolerances::new(1e-8, 1e-10).with_method(Method::Rosenbrock2);
        let pr = propagate_frames(&diag13(), &dvector![1.0, 1.0], &[1.0], &tol).unwrap();
        assert!((pr.frames[0].m[(1, 1)] - (-3.0f64).exp()).abs() < 1e-6);
        assert!((pr.frames[0].n_adj[(1, 1)] - 3.0f64.exp()).abs() < 1e-4);
    }
}
