//! Finite-time Lyapunov exponents of tangent vectors and covectors.
//!
//! For a frame at time `t != 0` through `p`:
//!
//! * `ftle(v) = log(|M v|_{Phi^t p} / |v|_p) / |t|`
//! * `adjoint_ftle(w) = log(|N w|_{Phi^t p} / |w|_p) / |t|` with the cometric
//!   norm on covectors and `N = M^{-T}` the adjoint propagator.
//!
//! The exponent of a zero vector is `-inf`. Time zero is not evaluated.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{propagate_frames, PropagatedFrame, Tolerances};
use crate::geometry::{LocalMetric, MetricField};
use crate::models::ModelSpec;
use crate::scalar::{to_f64, Real};

/// Which end of the spectrum to select.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extremum {
    Min,
    Max,
}

/// An exponent together with the direction that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct FtleSample<T: Real> {
    pub t: T,
    pub value: T,
    pub direction: DVector<T>,
}

fn require_nonzero_time<T: Real>(frame: &PropagatedFrame<T>) -> Result<()> {
    if frame.t == T::zero() {
        return Err(Error::InvalidSpec("exponents are not evaluated at t = 0".into()));
    }
    Ok(())
}

fn log_ratio<T: Real>(num: T, den: T, t: T) -> T {
    if den == T::zero() || num == T::zero() {
        return T::neg_infinity();
    }
    (num / den).ln() / t.abs()
}

pub fn ftle<T: Real>(frame: &PropagatedFrame<T>, v: &DVector<T>, g: &MetricField<T>) -> Result<T> {
    require_nonzero_time(frame)?;
    let gp = g.at(&frame.base)?;
    let gt = g.at(&frame.state)?;
    Ok(log_ratio(gt.norm(&(&frame.m * v)), gp.norm(v), frame.t))
}

pub fn adjoint_ftle<T: Real>(frame: &PropagatedFrame<T>, w: &DVector<T>, g: &MetricField<T>) -> Result<T> {
    require_nonzero_time(frame)?;
    let gp = g.at(&frame.base)?;
    let gt = g.at(&frame.state)?;
    Ok(log_ratio(gt.conorm(&(&frame.n_adj * w)), gp.conorm(w), frame.t))
}

/// Singular values (descending) and right singular vectors of a linear map
/// restricted to the span of `basis`, measured in whitened coordinates.
///
/// `whiten_in` maps basis columns to coordinates in which the input norm is
/// Euclidean, `whiten_out` does the same for images. Returns the singular
/// values together with the combinations of `basis` columns (unit input norm)
/// realizing them.
pub(crate) fn restricted_svd<T: Real>(
    map: &DMatrix<T>,
    basis: &DMatrix<T>,
    whiten_in: impl Fn(&DMatrix<T>) -> DMatrix<T>,
    whiten_out: impl Fn(&DMatrix<T>) -> DMatrix<T>,
) -> (Vec<T>, Vec<DVector<T>>) {
    let y = whiten_in(basis);
    let qr = y.qr();
    let r = qr.r();
    let r_inv = r.clone().try_inverse().expect("basis must have full column rank");
    let orth = basis * &r_inv;
    let a = whiten_out(&(map * &orth));
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let mut pairs: Vec<(T, DVector<T>)> = (0..svd.singular_values.len())
        .map(|k| (svd.singular_values[k], &orth * v_t.row(k).transpose()))
        .collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    pairs.into_iter().unzip()
}

/// Extremal adjoint exponent over covectors `w^flat` with `w` a unit tangent
/// vector g-orthogonal to `x`.
///
/// Returns the exponent and the optimizing covector (unit in the cometric).
pub fn extremal_adjoint_ftle_perp<T: Real>(
    frame: &PropagatedFrame<T>,
    x: &DVector<T>,
    g: &MetricField<T>,
    mode: Extremum,
) -> Result<FtleSample<T>> {
    require_nonzero_time(frame)?;
    let gp = g.at(&frame.base)?;
    let gt = g.at(&frame.state)?;
    let basis = gp.orthonormal_complement(x)?;
    if basis.ncols() == 0 {
        return Err(Error::InvalidSpec("no directions perpendicular to the field in dimension 1".into()));
    }
    let covectors = gp.matrix() * &basis;
    let (sv, dirs) = restricted_svd(&frame.n_adj, &covectors, |m| gp.whiten_cotangents(m), |m| gt.whiten_cotangents(m));
    let k = match mode {
        Extremum::Max => 0,
        Extremum::Min => sv.len() - 1,
    };
    Ok(FtleSample { t: frame.t, value: log_ratio(sv[k], T::one(), frame.t), direction: dirs[k].clone() })
}

/// Extremal growth `|M w|/|w|` over `w` in the span of `basis` (tangent
/// vectors at the frame base).
pub fn tangent_gain<T: Real>(
    m: &DMatrix<T>,
    basis: &DMatrix<T>,
    at_base: &LocalMetric<T>,
    at_image: &LocalMetric<T>,
    mode: Extremum,
) -> T {
    let (sv, _) = restricted_svd(m, basis, |b| at_base.whiten_tangents(b), |b| at_image.whiten_tangents(b));
    match mode {
        Extremum::Max => sv[0],
        Extremum::Min => sv[sv.len() - 1],
    }
}

/// Exponents along a list of frames (frames at `t = 0` are skipped).
pub fn ftle_series<T: Real>(frames: &[PropagatedFrame<T>], v: &DVector<T>, g: &MetricField<T>) -> Result<Vec<FtleSample<T>>> {
    frames
        .iter()
        .filter(|f| f.t != T::zero())
        .map(|f| Ok(FtleSample { t: f.t, value: ftle(f, v, g)?, direction: v.clone() }))
        .collect()
}

/// Residual of the cocycle identity
/// `l^t(dPhi^s v) = (|s+t|/|t|) l^{s+t}(v) - (|s|/|t|) l^s(v)`.
pub fn cocycle_check<T: Real>(
    model: &ModelSpec<T>,
    p: &DVector<T>,
    s: T,
    t: T,
    v: &DVector<T>,
    tol: &Tolerances,
) -> Result<T> {
    if t == T::zero() {
        return Err(Error::InvalidSpec("cocycle check needs t != 0".into()));
    }
    let g = model.metric();
    let grid = [s, s + t];
    let run = propagate_frames(model, p, &grid, tol)?;
    let frame = |time: T| -> Result<PropagatedFrame<T>> {
        if time == T::zero() {
            return Ok(PropagatedFrame::identity(p.clone()));
        }
        run.frame_at(time).cloned().ok_or(Error::DomainTruncated { t: to_f64(time) })
    };
    let fs = frame(s)?;
    let fst = frame(s + t)?;
    let later = propagate_frames(model, &fs.state, &[t], tol)?;
    let ft = later.frame_at(t).ok_or(Error::DomainTruncated { t: to_f64(s + t) })?;
    let lhs = ftle(ft, &(&fs.m * v), g)?;
    let term = |f: &PropagatedFrame<T>| -> Result<T> {
        if f.t == T::zero() {
            Ok(T::zero())
        } else {
            Ok(f.t.abs() / t.abs() * ftle(f, v, g)?)
        }
    };
    let rhs = term(&fst)? - term(&fs)?;
    Ok((lhs - rhs).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{davis_skodje, linear_model};
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;

    fn frame(a: DMatrix<f64>, p: DVector<f64>, t: f64) -> PropagatedFrame<f64> {
        let m = linear_model(a).unwrap();
        propagate_frames(&m, &p, &[t], &Tolerances::default()).unwrap().frames.remove(0)
    }

    fn diag13() -> DMatrix<f64> {
        dmatrix![-1.0, 0.0; 0.0, -3.0]
    }

    #[test]
    fn zero_direction_is_minus_infinity() {
        let f = frame(diag13(), dvector![1.0, 0.0], 1.0);
        let g = MetricField::euclidean(2);
        assert_eq!(ftle(&f, &dvector![0.0, 0.0], &g).unwrap(), f64::NEG_INFINITY);
        assert_eq!(adjoint_ftle(&f, &dvector![0.0, 0.0], &g).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn time_zero_is_rejected() {
        let f = PropagatedFrame::identity(dvector![1.0, 0.0]);
        assert!(ftle(&f, &dvector![1.0, 0.0], &MetricField::euclidean(2)).is_err());
    }

    #[test]
    fn diagonal_examples() {
        let g = MetricField::euclidean(2);
        let f2 = frame(diag13(), dvector![1.0, 0.0], 2.0);
        assert!((ftle(&f2, &dvector![1.0, 0.0], &g).unwrap() + 1.0).abs() < 1e-8);
        let f1 = frame(diag13(), dvector![1.0, 0.0], 1.0);
        assert!((adjoint_ftle(&f1, &dvector![1.0, 0.0], &g).unwrap() - 1.0).abs() < 1e-8);
        let ext = extremal_adjoint_ftle_perp(&f1, &dvector![-1.0, 0.0], &g, Extremum::Min).unwrap();
        assert!((ext.value - 3.0).abs() < 1e-7, "{}", ext.value - 3.0);
        for i in 0..2 {
            let e = DVector::from_fn(2, |k, _| if k == i { 1.0 } else { 0.0 });
            let sum = ftle(&f1, &e, &g).unwrap() + adjoint_ftle(&f1, &e, &g).unwrap();
            assert!(sum.abs() < 1e-7);
        }
    }

    #[test]
    fn planar_extremum_is_the_perpendicular_covector() {
        let g: MetricField<f64> = MetricField::constant(dmatrix![2.0, 0.3; 0.3, 1.0]).unwrap();
        let model = davis_skodje(2.0).unwrap();
        let p = dvector![0.4, 0.1];
        let f = propagate_frames(&model, &p, &[1.5], &Tolerances::default()).unwrap().frames.remove(0);
        let x = model.field(&p);
        let lo = extremal_adjoint_ftle_perp(&f, &x, &g, Extremum::Min).unwrap();
        let hi = extremal_adjoint_ftle_perp(&f, &x, &g, Extremum::Max).unwrap();
        assert!((lo.value - hi.value).abs() < 1e-12);
        let direct = adjoint_ftle(&f, &lo.direction, &g).unwrap();
        assert!((direct - lo.value).abs() < 1e-12);
        let gp = g.at(&p).unwrap();
        assert!((gp.conorm(&lo.direction) - 1.0).abs() < 1e-12);
        assert!(gp.inner(&gp.sharp(&lo.direction), &x).abs() < 1e-10);
    }

    #[test]
    fn dominant_direction_subadditivity_is_exact() {
        // Every vector decays at least as fast as e1, so l(v + w) <= l(e1 multiple).
        let f = frame(diag13(), dvector![1.0, 1.0], 2.0);
        let g = MetricField::euclidean(2);
        let v = dvector![0.7, 0.0];
        for w in [dvector![0.3, -2.0], dvector![-0.7, 1.0], dvector![5.0, 0.1]] {
            let lhs = ftle(&f, &(&v + &w), &g).unwrap();
            let rhs = ftle(&f, &v, &g).unwrap().max(ftle(&f, &w, &g).unwrap());
            assert!(lhs <= rhs + 1e-9, "{lhs} > {rhs}");
        }
    }

    #[test]
    fn cocycle_identity() {
        let m = linear_model(dmatrix![-1.0, 0.4; 0.0, -2.5]).unwrap();
        let tol = Tolerances::default();
        let p = dvector![0.3, 0.8];
        let v = dvector![0.2, -1.0];
        assert!(cocycle_check(&m, &p, 0.0, 1.3, &v, &tol).unwrap() < 1e-12);
        for (s, t) in [(0.5, 1.0), (-0.7, 1.2), (1.1, -0.4)] {
            assert!(cocycle_check(&m, &p, s, t, &v, &tol).unwrap() < 1e-7, "s={s} t={t}");
        }
        let ds = davis_skodje(2.0).unwrap();
        assert!(cocycle_check(&ds, &dvector![0.5, 0.2], 1.0, 1.0, &v, &tol).unwrap() < 1e-5);
    }

    fn skewed_3d() -> (ModelSpec<f64>, MetricField<f64>) {
        let a = dmatrix![-1.0, 0.3, 0.0; 0.1, -2.0, 0.5; 0.0, -0.4, -4.0];
        let g = MetricField::constant(dmatrix![1.5, 0.2, 0.1; 0.2, 1.0, 0.0; 0.1, 0.0, 2.0]).unwrap();
        (linear_model(a).unwrap().with_metric(g.clone()), g)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn scaling_invariance(alpha in prop_oneof![-50.0..-0.01f64, 0.01..50.0f64], x in -1.0..1.0f64, y in -1.0..1.0f64) {
            prop_assume!(x.abs() + y.abs() > 1e-3);
            let f = frame(dmatrix![-1.0, 0.5; 0.0, -3.0], dvector![1.0, 0.5], 1.5);
            let g = MetricField::euclidean(2);
            let v = dvector![x, y];
            let a = ftle(&f, &v, &g).unwrap();
            let b = ftle(&f, &(&v * alpha), &g).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn dual_bases_obey_the_angle_bound(seed in 0u64..1000, t in prop_oneof![-2.0..-0.2f64, 0.2..2.0f64]) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (model, g) = skewed_3d();
            let p = dvector![0.2, -0.1, 0.3];
            let gp = g.at(&p).unwrap();
            let f = propagate_frames(&model, &p, &[t], &Tolerances::default()).unwrap().frames.remove(0);
            let basis: DMatrix<f64> = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            prop_assume!(basis.determinant().abs() > 1e-2);
            let dual = basis.clone().try_inverse().unwrap().transpose();
            for i in 0..3 {
                let v = basis.column(i).into_owned();
                let w = dual.column(i).into_owned();
                let s = ftle(&f, &v, &g).unwrap() + adjoint_ftle(&f, &w, &g).unwrap();
                let bound = gp.angle(&v, &gp.sharp(&w)).unwrap().cos().ln() / t.abs();
                prop_assert!(s >= bound - 1e-8, "sum {} bound {}", s, bound);
            }
            // For a g-orthonormal basis the dual covectors are the flats and
            // the bound is zero.
            let orth = gp.factor().transpose().try_inverse().unwrap() * (gp.whiten_tangents(&basis)).qr().q();
            for i in 0..3 {
                let v = orth.column(i).into_owned();
                let s = ftle(&f, &v, &g).unwrap() + adjoint_ftle(&f, &gp.flat(&v), &g).unwrap();
                prop_assert!(s >= -1e-8, "sum {}", s);
            }
        }
    }

    #[test]
    fn extremal_value_beats_random_perpendicular_directions() {
        use rand::{Rng, SeedableRng};
        let (model, g) = skewed_3d();
        let p = dvector![0.2, -0.1, 0.3];
        let x = model.field(&p);
        let f = propagate_frames(&model, &p, &[1.7], &Tolerances::default()).unwrap().frames.remove(0);
        let lo = extremal_adjoint_ftle_perp(&f, &x, &g, Extremum::Min).unwrap();
        let hi = extremal_adjoint_ftle_perp(&f, &x, &g, Extremum::Max).unwrap();
        let gp = g.at(&p).unwrap();
        let basis = gp.orthonormal_complement(&x).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let c = dvector![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let w = &basis * c;
            let val = adjoint_ftle(&f, &gp.flat(&w), &g).unwrap();
            assert!(lo.value <= val + 1e-12 && val <= hi.value + 1e-12);
        }
    }
}
