//! Pointwise trajectory criteria `f_t` and their horizon aggregates `F_T`.
//!
//! Three criteria are available at a frame through `p` at time `t`:
//!
//! * `Variant::A`: `ftle(X_p)`.
//! * `Variant::B`: `ftle(X_p)` plus the smallest adjoint exponent over unit
//!   covectors perpendicular to `X_p`.
//! * `Variant::C`: the gap-resembling bracket with inner supremum over
//!   `tau in (0, T - t)` and offset `nu^T(p)`; forward mode only.
//!
//! `F_T` aggregates `f_t` over the signed dyadic grid `{+-k h}` with
//! `h = T_ref / 2^L`. Keeping `T_ref` fixed across a sweep nests the grids, and
//! because the integrator never looks at the end time, frames on shared grid
//! points are bit-identical; `F_T` under supremum aggregation is then exactly
//! nondecreasing in `T`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{propagate_frames, PropagatedFrame, Propagation, Tolerances};
use crate::geometry::MetricField;
use crate::lyapunov::{extremal_adjoint_ftle_perp, ftle, restricted_svd, Extremum};
use crate::models::ModelSpec;
use crate::scalar::{lit, to_f64, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    A,
    B,
    C,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HorizonMode {
    Forward,
    Backward,
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Sup,
    Inf,
}

/// Objective configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub variant: Variant,
    pub mode: HorizonMode,
    pub horizon: f64,
    /// Dyadic refinement level `L`.
    pub level: u32,
    /// Reference horizon fixing the grid spacing `grid_base / 2^L`; defaults
    /// to `horizon`. Set it to the first horizon of a sweep to nest grids.
    #[serde(default)]
    pub grid_base: Option<f64>,
    pub orientation: Orientation,
    pub aggregation: Aggregation,
}

impl ObjectiveSpec {
    /// Backward-mode criterion (a), minimized, supremum aggregation.
    pub fn default_recipe(horizon: f64) -> Self {
        Self {
            variant: Variant::A,
            mode: HorizonMode::Backward,
            horizon,
            level: 4,
            grid_base: None,
            orientation: Orientation::Minimize,
            aggregation: Aggregation::Sup,
        }
    }

    /// Forward-mode criterion (b), maximized, infimum aggregation.
    pub fn gap_recipe(horizon: f64) -> Self {
        Self {
            variant: Variant::B,
            mode: HorizonMode::Forward,
            horizon,
            level: 4,
            grid_base: None,
            orientation: Orientation::Maximize,
            aggregation: Aggregation::Inf,
        }
    }

    pub fn with_horizon(&self, horizon: f64) -> Self {
        Self { horizon, ..self.clone() }
    }

    pub fn with_level(&self, level: u32) -> Self {
        Self { level, ..self.clone() }
    }

    pub fn with_grid_base(&self, base: f64) -> Self {
        Self { grid_base: Some(base), ..self.clone() }
    }

    pub fn step(&self) -> f64 {
        self.grid_base.unwrap_or(self.horizon) / f64::from(1u32 << self.level)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.into()));
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad("horizon must be positive and finite");
        }
        if self.level > 24 {
            return bad("grid level must be at most 24");
        }
        if let Some(b) = self.grid_base {
            if !(b > 0.0 && b.is_finite()) {
                return bad("grid base must be positive and finite");
            }
            if b > self.horizon * (1.0 + 1e-12) {
                return bad("grid base must not exceed the horizon");
            }
        }
        if self.variant == Variant::C && self.mode != HorizonMode::Forward {
            return bad("criterion (c) is defined for the forward mode only");
        }
        Ok(())
    }
}

/// The signed grid of the objective, ascending, without `t = 0`.
pub fn time_grid(spec: &ObjectiveSpec) -> Vec<f64> {
    let h = spec.step();
    let n = ((spec.horizon / h) * (1.0 + 1e-12)).floor() as i64;
    let pos: Vec<f64> = (1..=n).map(|k| k as f64 * h).collect();
    let mut out = Vec::new();
    if matches!(spec.mode, HorizonMode::Backward | HorizonMode::TwoSided) {
        out.extend(pos.iter().rev().map(|t| -t));
    }
    if matches!(spec.mode, HorizonMode::Forward | HorizonMode::TwoSided) {
        out.extend(pos.iter().copied());
    }
    out
}

/// Aggregated objective value with bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub value: f64,
    /// Grid time attaining the aggregate.
    pub arg_t: f64,
    /// `(t, f_t)` for every evaluated grid time.
    pub samples: Vec<(f64, f64)>,
    /// Grid times dropped because they fall outside the trajectory domain.
    pub skipped: Vec<f64>,
}

fn field_at<T: Real>(model: &ModelSpec<T>, p: &DVector<T>) -> Result<DVector<T>> {
    let x = model.field(p);
    if x.iter().all(|v| *v == T::zero()) {
        return Err(Error::ZeroField);
    }
    Ok(x)
}

fn pointwise_ab<T: Real>(frame: &PropagatedFrame<T>, x: &DVector<T>, g: &MetricField<T>, variant: Variant) -> Result<T> {
    let a = ftle(frame, x, g)?;
    match variant {
        Variant::A => Ok(a),
        _ => Ok(a + extremal_adjoint_ftle_perp(frame, x, g, Extremum::Min)?.value),
    }
}

/// `log(|N(t2) u| / |N(t1) u|)` minimized over covectors `u = w^flat`, `w`
/// perpendicular to `x` at the base.
fn min_covector_log_growth<T: Real>(
    f1: &PropagatedFrame<T>,
    f2: &PropagatedFrame<T>,
    x: &DVector<T>,
    g: &MetricField<T>,
) -> Result<T> {
    let gp = g.at(&f1.base)?;
    let g1 = g.at(&f1.state)?;
    let g2 = g.at(&f2.state)?;
    let covectors = gp.matrix() * gp.orthonormal_complement(x)?;
    let (sv, _) = restricted_svd(
        &f2.n_adj,
        &covectors,
        |c| g1.whiten_cotangents(&(&f1.n_adj * c)),
        |c| g2.whiten_cotangents(c),
    );
    Ok(sv[sv.len() - 1].ln())
}

struct FrameIndex<'a, T: Real> {
    run: &'a Propagation<T>,
    base: &'a DVector<T>,
}

impl<T: Real> FrameIndex<'_, T> {
    fn get(&self, t: T) -> Option<PropagatedFrame<T>> {
        if t == T::zero() {
            Some(PropagatedFrame::identity(self.base.clone()))
        } else {
            self.run.frame_at(t).cloned()
        }
    }
}

/// Criterion (c) at grid time `t = k h`, given frames of one two-sided
/// propagation from `p` on the grid `{j h : |j h| < T}` and at `T`.
fn pointwise_c<T: Real>(
    frames: &FrameIndex<'_, T>,
    t: T,
    h: T,
    horizon: T,
    nu_t: T,
    x: &DVector<T>,
    g: &MetricField<T>,
) -> Result<Option<T>> {
    let Some(ft) = frames.get(t) else { return Ok(None) };
    let gt = g.at(&ft.state)?;
    let mx_t = gt.norm(&(&ft.m * x));
    let mut best = T::zero();
    let mut k = 1usize;
    loop {
        let tau = crate::scalar::from_usize::<T>(k) * h;
        if !(tau < horizon - t) {
            break;
        }
        k += 1;
        let (Some(back), Some(fwd)) = (frames.get(t - tau), frames.get(t + tau)) else {
            continue;
        };
        let gb = g.at(&back.state)?;
        let back_growth = (gb.norm(&(&back.m * x)) / mx_t).ln();
        let adj = min_covector_log_growth(&ft, &fwd, x, g)?;
        let bracket = tau * nu_t - back_growth - adj;
        if bracket > best {
            best = bracket;
        }
    }
    Ok(Some(best / t.abs() + nu_t))
}

/// Pointwise criterion at a single signed time `t != 0`.
pub fn f_t<T: Real>(model: &ModelSpec<T>, p: &DVector<T>, t: T, spec: &ObjectiveSpec, tol: &Tolerances) -> Result<T> {
    let horizon: T = lit(spec.horizon);
    if spec.variant == Variant::C {
        let x = field_at(model, p)?;
        let h = lit::<T>(spec.step());
        let grid: Vec<T> = time_grid(&ObjectiveSpec { mode: HorizonMode::TwoSided, ..spec.clone() })
            .into_iter()
            .map(lit)
            .filter(|s: &T| *s != t)
            .chain([t, horizon])
            .collect();
        let run = propagate_frames(model, p, &grid, tol)?;
        let idx = FrameIndex { run: &run, base: p };
        let nu = nu_at(&idx, horizon, &x, model.metric())?;
        return pointwise_c(&idx, t, h, horizon, nu, &x, model.metric())?
            .ok_or(Error::DomainTruncated { t: to_f64(t) });
    }
    let x = field_at(model, p)?;
    let run = propagate_frames(model, p, &[t], tol)?;
    let frame = run.frame_at(t).ok_or(Error::DomainTruncated { t: to_f64(t) })?;
    pointwise_ab(frame, &x, model.metric(), spec.variant)
}

fn nu_at<T: Real>(idx: &FrameIndex<'_, T>, horizon: T, x: &DVector<T>, g: &MetricField<T>) -> Result<T> {
    let f = idx.get(horizon).ok_or(Error::DomainTruncated { t: to_f64(horizon) })?;
    Ok(ftle(&f, x, g)? + extremal_adjoint_ftle_perp(&f, x, g, Extremum::Min)?.value)
}

/// The horizon aggregate `F_T(p)`.
#[allow(non_snake_case)]
pub fn F_T<T: Real>(model: &ModelSpec<T>, p: &DVector<T>, spec: &ObjectiveSpec, tol: &Tolerances) -> Result<ObjectiveValue> {
    spec.validate()?;
    let x = field_at(model, p)?;
    let g = model.metric();
    let grid = time_grid(spec);
    let mut samples = Vec::with_capacity(grid.len());
    let mut skipped = Vec::new();

    match spec.variant {
        Variant::A | Variant::B => {
            let grid_t: Vec<T> = grid.iter().map(|t| lit(*t)).collect();
            let run = propagate_frames(model, p, &grid_t, tol)?;
            for (t, tt) in grid.iter().zip(&grid_t) {
                match run.frame_at(*tt) {
                    Some(f) => samples.push((*t, to_f64(pointwise_ab(f, &x, g, spec.variant)?))),
                    None => skipped.push(*t),
                }
            }
        }
        Variant::C => {
            let horizon: T = lit(spec.horizon);
            let h: T = lit(spec.step());
            let mut all = time_grid(&ObjectiveSpec { mode: HorizonMode::TwoSided, ..spec.clone() });
            all.push(spec.horizon);
            let all_t: Vec<T> = all.iter().map(|t| lit(*t)).collect();
            let run = propagate_frames(model, p, &all_t, tol)?;
            let idx = FrameIndex { run: &run, base: p };
            let nu = nu_at(&idx, horizon, &x, g)?;
            for t in &grid {
                match pointwise_c(&idx, lit(*t), h, horizon, nu, &x, g)? {
                    Some(v) => samples.push((*t, to_f64(v))),
                    None => skipped.push(*t),
                }
            }
        }
    }
    aggregate(samples, skipped, spec.aggregation)
}

fn aggregate(samples: Vec<(f64, f64)>, skipped: Vec<f64>, agg: Aggregation) -> Result<ObjectiveValue> {
    let mut best: Option<(f64, f64)> = None;
    for &(t, v) in &samples {
        let better = match (best, agg) {
            (None, _) => true,
            (Some((_, b)), Aggregation::Sup) => v > b,
            (Some((_, b)), Aggregation::Inf) => v < b,
        };
        if better || v.is_nan() {
            best = Some((t, v));
        }
        if v.is_nan() {
            break;
        }
    }
    let (arg_t, value) = best.ok_or(Error::EmptyGrid)?;
    Ok(ObjectiveValue { value, arg_t, samples, skipped })
}

/// Post-hoc check of `F` at a point on a finer grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub objective_value: f64,
    pub validation_level: u32,
    pub horizon: f64,
    /// `(t, |t| (F - f_t))` for supremum aggregation, sign reversed for
    /// infimum aggregation. Nonnegative values confirm the growth bound.
    pub slacks: Vec<(f64, f64)>,
    pub worst_slack: f64,
    pub worst_t: f64,
    pub flagged: bool,
    pub skipped: Vec<f64>,
}

/// Threshold below which a slack counts as a violation.
pub const CERTIFICATE_FLAG: f64 = -1e-6;

/// Re-evaluates `f_t` at `p_star` on the objective grid refined to
/// `validation_level` and reports the growth-bound slack at each time.
pub fn certify<T: Real>(
    model: &ModelSpec<T>,
    p_star: &DVector<T>,
    spec: &ObjectiveSpec,
    f_value: f64,
    validation_level: u32,
    tol: &Tolerances,
) -> Result<CertificateReport> {
    let fine = ObjectiveSpec { level: validation_level, ..spec.clone() };
    let v = F_T(model, p_star, &fine, tol)?;
    let sign = match spec.aggregation {
        Aggregation::Sup => 1.0,
        Aggregation::Inf => -1.0,
    };
    let slacks: Vec<(f64, f64)> = v.samples.iter().map(|&(t, ft)| (t, sign * t.abs() * (f_value - ft))).collect();
    let (worst_t, worst_slack) = slacks
        .iter()
        .copied()
        .fold((0.0, f64::INFINITY), |acc, s| if s.1 < acc.1 { s } else { acc });
    Ok(CertificateReport {
        objective_value: f_value,
        validation_level,
        horizon: spec.horizon,
        flagged: worst_slack < CERTIFICATE_FLAG,
        slacks,
        worst_slack,
        worst_t,
        skipped: v.skipped,
    })
}
