//! Optimization of `F_T` over the speed level set `K_eps = {|X_p| = eps}` and
//! the horizon sweep.
//!
//! States are parameterized by reduced coordinates `z` through an affine
//! embedding `p = origin + B z`. Toy models use the identity; reaction
//! mechanisms use an orthonormal basis of the kernel of their conservation
//! rows, which keeps every iterate on the invariant affine subspace.
//!
//! Each start runs an augmented-Lagrangian loop around Nelder-Mead, then a
//! compass search on `K_eps` itself: trial points are moved along tangent
//! directions and projected back onto the level set by Newton steps along the
//! speed gradient.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{sample_trajectory, Tolerances, TrajectoryDomain};
use crate::models::{null_space_basis, ModelSpec};
use crate::objective::{ObjectiveSpec, ObjectiveValue, Orientation, F_T};
use crate::scalar::{from_usize, lit, to_f64, Real};

/// Affine parameterization `p = origin + basis z`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T: Real> {
    pub origin: DVector<T>,
    pub basis: DMatrix<T>,
}

impl<T: Real> Embedding<T> {
    pub fn identity(dim: usize) -> Self {
        Self { origin: DVector::zeros(dim), basis: DMatrix::identity(dim, dim) }
    }

    /// The affine subspace through `origin` left invariant by the model's
    /// conservation rows (the identity when there are none).
    pub fn for_model(model: &ModelSpec<T>, origin: DVector<T>) -> Self {
        match model.conservation() {
            Some(rows) => Self { basis: null_space_basis(rows), origin },
            None => Self { basis: DMatrix::identity(model.dim(), model.dim()), origin },
        }
    }

    pub fn reduced_dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn point(&self, z: &DVector<T>) -> DVector<T> {
        &self.origin + &self.basis * z
    }

    /// Least-squares reduced coordinates of an ambient point.
    pub fn coordinates(&self, p: &DVector<T>) -> DVector<T> {
        self.basis.tr_mul(&(p - &self.origin))
    }
}

/// The constraint set and the region searched for it. The region box is a
/// hard bound: points of `K_eps` outside it are never sampled or accepted.
#[derive(Debug, Clone)]
pub struct LevelSetSpec<T: Real> {
    pub epsilon: T,
    pub embedding: Embedding<T>,
    /// Box in reduced coordinates: `(lo, hi)`.
    pub region: (DVector<T>, DVector<T>),
}

impl<T: Real> LevelSetSpec<T> {
    pub fn new(epsilon: T, embedding: Embedding<T>, lo: DVector<T>, hi: DVector<T>) -> Result<Self> {
        if !(epsilon > T::zero()) {
            return Err(Error::InvalidParameter("epsilon must be positive".into()));
        }
        let r = embedding.reduced_dim();
        if lo.len() != r || hi.len() != r {
            return Err(Error::DimensionMismatch { expected: r, got: lo.len() });
        }
        if lo.iter().zip(hi.iter()).any(|(a, b)| !(a < b)) {
            return Err(Error::InvalidParameter("region bounds must satisfy lo < hi".into()));
        }
        Ok(Self { epsilon, embedding, region: (lo, hi) })
    }

    /// Signed residual `|X_p| - eps`.
    pub fn residual(&self, model: &ModelSpec<T>, p: &DVector<T>) -> Result<T> {
        Ok(model.speed(p)? - self.epsilon)
    }

    fn centre(&self) -> DVector<T> {
        (&self.region.0 + &self.region.1) * lit::<T>(0.5)
    }

    fn size(&self) -> T {
        (&self.region.1 - &self.region.0).norm()
    }

    fn inside(&self, z: &DVector<T>) -> bool {
        z.iter().zip(self.region.0.iter().zip(self.region.1.iter())).all(|(v, (a, b))| v >= a && v <= b)
    }
}

/// `eps = fraction * |X|` at the centre of the region.
pub fn epsilon_from_centre<T: Real>(model: &ModelSpec<T>, embedding: &Embedding<T>, lo: &DVector<T>, hi: &DVector<T>, fraction: T) -> Result<T> {
    let c = (lo + hi) * lit::<T>(0.5);
    let speed = model.speed(&embedding.point(&c))?;
    if !(speed > T::zero()) {
        return Err(Error::InvalidParameter("the field vanishes at the region centre; give epsilon explicitly".into()));
    }
    Ok(speed * fraction)
}

/// The `quantile` of field speeds over `n` admissible uniform samples of the
/// region.
pub fn epsilon_quantile<T: Real>(
    model: &ModelSpec<T>,
    embedding: &Embedding<T>,
    lo: &DVector<T>,
    hi: &DVector<T>,
    quantile: f64,
    n: usize,
    seed: u64,
) -> Result<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut speeds = Vec::with_capacity(n);
    let mut tries = 0;
    while speeds.len() < n && tries < 1000 * n.max(1) {
        tries += 1;
        let z = DVector::from_fn(lo.len(), |i, _| lo[i] + (hi[i] - lo[i]) * lit::<T>(rng.random::<f64>()));
        let p = embedding.point(&z);
        if model.is_admissible(&p) {
            speeds.push(to_f64(model.speed(&p)?));
        }
    }
    if speeds.is_empty() {
        return Err(Error::LevelSetNotFound);
    }
    speeds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = ((speeds.len() - 1) as f64 * quantile.clamp(0.0, 1.0)).round() as usize;
    Ok(lit(speeds[k]))
}

/// Gradient of the speed with respect to reduced coordinates (metric taken
/// as frozen at `p`).
fn speed_gradient<T: Real>(model: &ModelSpec<T>, emb: &Embedding<T>, p: &DVector<T>) -> Result<(T, DVector<T>)> {
    let g = model.metric().at(p)?;
    let x = model.field(p);
    let s = g.norm(&x);
    if s == T::zero() {
        return Err(Error::ZeroField);
    }
    let gx = g.flat(&x);
    let grad = emb.basis.tr_mul(&model.jacobian(p).tr_mul(&gx)) / s;
    Ok((s, grad))
}

/// Projects `z` onto `K_eps` by Newton steps along the speed gradient.
pub fn project_to_level_set<T: Real>(model: &ModelSpec<T>, ls: &LevelSetSpec<T>, z: &DVector<T>) -> Option<DVector<T>> {
    let mut z = z.clone();
    let target = lit::<T>(1e-13) * ls.epsilon;
    for _ in 0..60 {
        let p = ls.embedding.point(&z);
        if !model.is_admissible(&p) {
            return None;
        }
        let (s, grad) = speed_gradient(model, &ls.embedding, &p).ok()?;
        let h = s - ls.epsilon;
        if h.abs() <= target {
            return Some(z);
        }
        let gg = grad.norm_squared();
        if gg == T::zero() || !gg.is_finite_value() {
            return None;
        }
        let mut step = &grad * (h / gg);
        // Damp steps that overshoot into inadmissible states.
        let mut accepted = false;
        for _ in 0..30 {
            let trial = &z - &step;
            if model.is_admissible(&ls.embedding.point(&trial)) {
                z = trial;
                accepted = true;
                break;
            }
            step *= lit::<T>(0.5);
        }
        if !accepted {
            return None;
        }
    }
    let p = ls.embedding.point(&z);
    let r = ls.residual(model, &p).ok()?;
    (r.abs() <= lit::<T>(1e-10) * ls.epsilon).then_some(z)
}

fn newton_equilibrium<T: Real>(model: &ModelSpec<T>, ls: &LevelSetSpec<T>) -> Option<DVector<T>> {
    let emb = &ls.embedding;
    let mut z = ls.centre();
    let scale = model.speed(&emb.point(&z)).ok()?;
    for _ in 0..100 {
        let p = emb.point(&z);
        if !model.is_admissible(&p) || !ls.inside(&z) {
            return None;
        }
        let f = emb.basis.tr_mul(&model.field(&p));
        if f.norm() <= lit::<T>(1e-12) * scale.max(T::eps()) {
            return Some(z);
        }
        let j = emb.basis.tr_mul(&(model.jacobian(&p) * &emb.basis));
        let dz = j.lu().solve(&f)?;
        let mut lambda = T::one();
        let mut moved = false;
        for _ in 0..30 {
            let trial = &z - &dz * lambda;
            let pt = emb.point(&trial);
            if model.is_admissible(&pt) {
                let ft = emb.basis.tr_mul(&model.field(&pt));
                if ft.norm() < f.norm() {
                    z = trial;
                    moved = true;
                    break;
                }
            }
            lambda *= lit::<T>(0.5);
        }
        if !moved {
            return None;
        }
    }
    None
}

fn bisect<T: Real>(
    model: &ModelSpec<T>,
    ls: &LevelSetSpec<T>,
    mut inside: DVector<T>,
    mut outside: DVector<T>,
) -> Option<DVector<T>> {
    let target = lit::<T>(1e-10) * ls.epsilon;
    for _ in 0..200 {
        let mid = (&inside + &outside) * lit::<T>(0.5);
        let p = ls.embedding.point(&mid);
        if !model.is_admissible(&p) {
            return None;
        }
        let r = ls.residual(model, &p).ok()?;
        if r.abs() <= target {
            return Some(mid);
        }
        if r < T::zero() {
            inside = mid;
        } else {
            outside = mid;
        }
    }
    None
}

/// A point of `K_eps` in both coordinate systems.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSetPoint<T: Real> {
    pub z: DVector<T>,
    pub p: DVector<T>,
}

/// Samples `n` points of `K_eps`.
///
/// Rays are shot in random directions from an equilibrium located by Newton's
/// method from the region centre, marching outward with doubling steps until
/// the residual changes sign and then bisecting. Without an equilibrium,
/// random chords between admissible region points are bisected instead.
pub fn sample_level_set<T: Real>(model: &ModelSpec<T>, ls: &LevelSetSpec<T>, n: usize, seed: u64) -> Result<Vec<LevelSetPoint<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = ls.embedding.reduced_dim();
    let mut out = Vec::with_capacity(n);
    let max_tries = 50 * n.max(1);
    let to_point = |z: DVector<T>| LevelSetPoint { p: ls.embedding.point(&z), z };

    if let Some(eq) = newton_equilibrium(model, ls) {
        let step0 = ls.size() * lit::<T>(1e-4);
        let mut tries = 0;
        while out.len() < n && tries < max_tries {
            tries += 1;
            let d = DVector::from_fn(r, |_, _| lit::<T>(rng.sample::<f64, _>(StandardNormal)));
            let d = &d / d.norm();
            let mut prev = eq.clone();
            let mut s = step0;
            while s < ls.size() * lit::<T>(2.0) {
                let z = &eq + &d * s;
                let p = ls.embedding.point(&z);
                if !ls.inside(&z) || !model.is_admissible(&p) {
                    break;
                }
                let res = ls.residual(model, &p)?;
                if res > T::zero() {
                    if let Some(hit) = bisect(model, ls, prev.clone(), z) {
                        out.push(to_point(hit));
                    }
                    break;
                }
                prev = z;
                s *= lit::<T>(2.0);
            }
        }
        if out.len() == n {
            return Ok(out);
        }
    }

    let (lo, hi) = &ls.region;
    let mut tries = 0;
    while out.len() < n && tries < 200 * max_tries {
        tries += 1;
        let mut draw = || DVector::from_fn(r, |i, _| lo[i] + (hi[i] - lo[i]) * lit::<T>(rng.random::<f64>()));
        let (a, b) = (draw(), draw());
        let (pa, pb) = (ls.embedding.point(&a), ls.embedding.point(&b));
        if !model.is_admissible(&pa) || !model.is_admissible(&pb) {
            continue;
        }
        let (ra, rb) = (ls.residual(model, &pa)?, ls.residual(model, &pb)?);
        let hit = if ra < T::zero() && rb > T::zero() {
            bisect(model, ls, a, b)
        } else if rb < T::zero() && ra > T::zero() {
            bisect(model, ls, b, a)
        } else {
            None
        };
        if let Some(h) = hit {
            out.push(to_point(h));
        }
    }
    if out.is_empty() {
        return Err(Error::LevelSetNotFound);
    }
    if out.len() < n {
        return Err(Error::LevelSetNotFound);
    }
    Ok(out)
}

/// Budgets of the constrained search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSettings {
    /// Starts kept after screening by objective value.
    pub keep: usize,
    pub penalty_start: f64,
    pub penalty_growth: f64,
    pub penalty_rounds: usize,
    pub simplex_evals: usize,
    /// Initial simplex and compass step, relative to the length scale.
    pub initial_step: f64,
    /// Compass search stops below this step, relative to the length scale.
    pub min_step: f64,
    pub polish_evals: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            keep: 4,
            penalty_start: 10.0,
            penalty_growth: 10.0,
            penalty_rounds: 8,
            simplex_evals: 300,
            initial_step: 0.05,
            min_step: 1e-10,
            polish_evals: 4000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    BudgetExhausted,
}

/// The accepted solution for one horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimizerRecord {
    pub horizon: f64,
    pub p_star: Vec<f64>,
    pub z_star: Vec<f64>,
    pub f_value: f64,
    pub residual: f64,
    pub evaluations: usize,
    pub starts_used: usize,
    pub status: SolveStatus,
    pub objective: ObjectiveValue,
}

/// Signed objective to minimize; `+inf` where it cannot be evaluated.
struct Problem<'a, T: Real> {
    model: &'a ModelSpec<T>,
    spec: &'a ObjectiveSpec,
    ls: &'a LevelSetSpec<T>,
    tol: &'a Tolerances,
    sign: f64,
}

impl<T: Real> Problem<'_, T> {
    fn objective(&self, z: &DVector<T>) -> f64 {
        let p = self.ls.embedding.point(z);
        if !self.ls.inside(z) || !self.model.is_admissible(&p) {
            return f64::INFINITY;
        }
        match F_T(self.model, &p, self.spec, self.tol) {
            Ok(v) if v.value.is_finite() => self.sign * v.value,
            _ => f64::INFINITY,
        }
    }

    fn constraint(&self, z: &DVector<T>) -> f64 {
        let p = self.ls.embedding.point(z);
        match self.ls.residual(self.model, &p) {
            Ok(r) => to_f64(r / self.ls.epsilon),
            Err(_) => f64::INFINITY,
        }
    }
}

fn lex_less<T: Real>(a: &DVector<T>, b: &DVector<T>) -> bool {
    for (x, y) in a.iter().zip(b.iter()) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    false
}

/// `true` when `(fa, za)` beats `(fb, zb)`: lower value, with values within
/// `1e-10` ordered lexicographically by coordinates.
fn better<T: Real>(fa: f64, za: &DVector<T>, fb: f64, zb: &DVector<T>) -> bool {
    if (fa - fb).abs() <= 1e-10 {
        lex_less(za, zb)
    } else {
        fa < fb
    }
}

fn nelder_mead<T: Real>(f: &dyn Fn(&DVector<T>) -> f64, x0: &DVector<T>, step: T, max_evals: usize) -> (DVector<T>, f64, usize) {
    let n = x0.len();
    let mut pts: Vec<(DVector<T>, f64)> = Vec::with_capacity(n + 1);
    pts.push((x0.clone(), f(x0)));
    for i in 0..n {
        let mut x = x0.clone();
        x[i] += step;
        let v = f(&x);
        pts.push((x, v));
    }
    let mut evals = n + 1;
    let order = |pts: &mut Vec<(DVector<T>, f64)>| {
        pts.sort_by(|a, b| {
            let (fa, fb) = (if a.1.is_nan() { f64::INFINITY } else { a.1 }, if b.1.is_nan() { f64::INFINITY } else { b.1 });
            fa.partial_cmp(&fb).unwrap().then_with(|| if lex_less(&a.0, &b.0) { std::cmp::Ordering::Less } else { std::cmp::Ordering::Greater })
        })
    };
    while evals < max_evals {
        order(&mut pts);
        let spread = pts[n].1 - pts[0].1;
        let size = pts.iter().skip(1).map(|(x, _)| (x - &pts[0].0).amax()).fold(T::zero(), |a, b| a.max(b));
        if (spread.is_finite() && spread.abs() <= 1e-13) && size <= step * lit::<T>(1e-9) {
            break;
        }
        let centroid = pts.iter().take(n).fold(DVector::zeros(n), |acc, (x, _)| acc + x) / from_usize::<T>(n);
        let worst = pts[n].clone();
        let reflect = &centroid + (&centroid - &worst.0);
        let fr = f(&reflect);
        evals += 1;
        if fr < pts[0].1 {
            let expand = &centroid + (&centroid - &worst.0) * lit::<T>(2.0);
            let fe = f(&expand);
            evals += 1;
            pts[n] = if fe < fr { (expand, fe) } else { (reflect, fr) };
        } else if fr < pts[n - 1].1 {
            pts[n] = (reflect, fr);
        } else {
            let (target, ft) = if fr < worst.1 { (reflect, fr) } else { (worst.0.clone(), worst.1) };
            let contract = &centroid + (&target - &centroid) * lit::<T>(0.5);
            let fc = f(&contract);
            evals += 1;
            if fc < ft {
                pts[n] = (contract, fc);
            } else {
                let best = pts[0].0.clone();
                for item in pts.iter_mut().skip(1) {
                    let x = &best + (&item.0 - &best) * lit::<T>(0.5);
                    let v = f(&x);
                    *item = (x, v);
                }
                evals += n;
            }
        }
    }
    order(&mut pts);
    let (x, v) = pts.swap_remove(0);
    (x, v, evals)
}

/// Orthonormal basis (columns) of the tangent space of `K_eps` at `z`.
fn level_set_tangents<T: Real>(model: &ModelSpec<T>, ls: &LevelSetSpec<T>, z: &DVector<T>) -> Option<DMatrix<T>> {
    let p = ls.embedding.point(z);
    let (_, grad) = speed_gradient(model, &ls.embedding, &p).ok()?;
    let r = grad.len();
    if r < 2 {
        return None;
    }
    let n = grad.norm();
    if n == T::zero() {
        return None;
    }
    let metric = crate::geometry::LocalMetric::identity(r);
    metric.orthonormal_complement(&(grad / n)).ok()
}

/// Compass search restricted to `K_eps`.
fn polish<T: Real>(prob: &Problem<'_, T>, z0: DVector<T>, f0: f64, step0: T, min_step: T, budget: usize) -> (DVector<T>, f64, usize, SolveStatus) {
    let (mut z, mut fz) = (z0, f0);
    let mut step = step0;
    let mut evals = 0;
    let mut rotation = 0usize;
    while step > min_step {
        if evals >= budget {
            return (z, fz, evals, SolveStatus::BudgetExhausted);
        }
        let Some(tangents) = level_set_tangents(prob.model, prob.ls, &z) else { break };
        let k = tangents.ncols();
        let mut dirs: Vec<DVector<T>> = Vec::with_capacity(4 * k);
        for j in 0..k {
            let d = tangents.column(j).into_owned();
            dirs.push(d.clone());
            dirs.push(-d);
        }
        if k >= 2 {
            // Diagonal directions, alternating between rounds, help on kinks.
            let a = tangents.column(rotation % k).into_owned();
            let b = tangents.column((rotation + 1) % k).into_owned();
            let s = lit::<T>(std::f64::consts::FRAC_1_SQRT_2);
            for (u, v) in [(T::one(), T::one()), (T::one(), -T::one())] {
                let d = (&a * u + &b * v) * s;
                dirs.push(d.clone());
                dirs.push(-d);
            }
            rotation += 1;
        }
        let mut improved = false;
        for d in &dirs {
            let Some(trial) = project_to_level_set(prob.model, prob.ls, &(&z + d * step)) else { continue };
            let ft = prob.objective(&trial);
            evals += 1;
            if ft < fz {
                z = trial;
                fz = ft;
                improved = true;
                break;
            }
        }
        if !improved {
            step *= lit::<T>(0.5);
        }
    }
    (z, fz, evals, SolveStatus::Converged)
}

struct StartResult<T: Real> {
    z: DVector<T>,
    value: f64,
    evals: usize,
    status: SolveStatus,
}

fn solve_from<T: Real>(prob: &Problem<'_, T>, z0: &DVector<T>, scale: T, cfg: &OptimizerSettings) -> Option<StartResult<T>> {
    let anchor = project_to_level_set(prob.model, prob.ls, z0).map(|z| {
        let v = prob.objective(&z);
        (z, v)
    });
    let mut z = anchor.as_ref().map_or_else(|| z0.clone(), |a| a.0.clone());
    let mut lambda = 0.0;
    let mut rho = cfg.penalty_start;
    let mut evals = 0;
    let step = scale * lit::<T>(cfg.initial_step);
    for _ in 0..cfg.penalty_rounds {
        let lag = |x: &DVector<T>| {
            let h = prob.constraint(x);
            prob.objective(x) + lambda * h + 0.5 * rho * h * h
        };
        let (zn, _, e) = nelder_mead(&lag, &z, step, cfg.simplex_evals);
        evals += e;
        z = zn;
        let h = prob.constraint(&z);
        if !h.is_finite() {
            break;
        }
        if h.abs() <= 1e-8 {
            break;
        }
        lambda += rho * h;
        rho *= cfg.penalty_growth;
    }
    // The penalty phase may end somewhere the projection cannot recover
    // from; the projected start is then the fallback.
    let refined = project_to_level_set(prob.model, prob.ls, &z).map(|z| {
        let v = prob.objective(&z);
        (z, v)
    });
    let (z, f0) = [refined, anchor]
        .into_iter()
        .flatten()
        .filter(|c| c.1.is_finite())
        .reduce(|a, b| if better(b.1, &b.0, a.1, &a.0) { b } else { a })?;
    let (z, value, e, status) = polish(prob, z, f0, step, scale * lit::<T>(cfg.min_step), cfg.polish_evals);
    Some(StartResult { z, value, evals: evals + e + 1, status })
}

/// Length scale of `K_eps`: the spread of the starts around their mean, or
/// the region size when there is a single start.
fn length_scale<T: Real>(ls: &LevelSetSpec<T>, starts: &[DVector<T>]) -> T {
    if starts.len() >= 2 {
        let mean = starts.iter().fold(DVector::zeros(starts[0].len()), |a, z| a + z) / from_usize::<T>(starts.len());
        let spread = starts.iter().map(|z| (z - &mean).norm()).fold(T::zero(), |a, b| a.max(b));
        if spread > T::zero() {
            return spread;
        }
    }
    ls.size() * lit::<T>(0.01)
}

/// Minimizes (or maximizes, per the orientation) `F_T` on `K_eps`.
///
/// `starts` are reduced coordinates. They are projected onto the level set
/// and screened by objective value, and the best `settings.keep` are solved
/// in parallel. The best feasible result wins, with ties within `1e-10`
/// broken lexicographically.
pub fn optimize_on_levelset<T: Real>(
    model: &ModelSpec<T>,
    spec: &ObjectiveSpec,
    ls: &LevelSetSpec<T>,
    starts: &[DVector<T>],
    settings: &OptimizerSettings,
    tol: &Tolerances,
) -> Result<MinimizerRecord> {
    spec.validate()?;
    if starts.is_empty() {
        return Err(Error::InvalidParameter("at least one start is required".into()));
    }
    let sign = match spec.orientation {
        Orientation::Minimize => 1.0,
        Orientation::Maximize => -1.0,
    };
    let prob = Problem { model, spec, ls, tol, sign };
    let scale = length_scale(ls, starts);

    let mut screened: Vec<(usize, DVector<T>, f64)> = starts
        .par_iter()
        .enumerate()
        .map(|(i, z)| {
            let zp = project_to_level_set(model, ls, z).unwrap_or_else(|| z.clone());
            let v = prob.objective(&zp);
            (i, zp, v)
        })
        .collect();
    let screen_evals = screened.len();
    if screened.iter().all(|s| !s.2.is_finite()) {
        return Err(Error::ObjectiveFailure("objective is undefined at every start".into()));
    }
    screened.sort_by(|a, b| {
        if better(a.2, &a.1, b.2, &b.1) {
            std::cmp::Ordering::Less
        } else if better(b.2, &b.1, a.2, &a.1) {
            std::cmp::Ordering::Greater
        } else {
            a.0.cmp(&b.0)
        }
    });
    let chosen: Vec<DVector<T>> = screened.iter().take(settings.keep.max(1)).map(|s| s.1.clone()).collect();

    let results: Vec<Option<StartResult<T>>> = chosen.par_iter().map(|z| solve_from(&prob, z, scale, settings)).collect();
    let evals: usize = screen_evals + results.iter().flatten().map(|r| r.evals).sum::<usize>();

    let mut best: Option<StartResult<T>> = None;
    let mut best_residual = f64::INFINITY;
    for r in results.into_iter().flatten() {
        let res = prob.constraint(&r.z).abs();
        best_residual = best_residual.min(res);
        if res > 1e-8 || !r.value.is_finite() {
            continue;
        }
        let replace = match &best {
            None => true,
            Some(b) => better(r.value, &r.z, b.value, &b.z),
        };
        if replace {
            best = Some(r);
        }
    }
    let best = best.ok_or(Error::Infeasible { best_residual: best_residual * to_f64(ls.epsilon) })?;
    let p = ls.embedding.point(&best.z);
    let objective = F_T(model, &p, spec, tol)?;
    Ok(MinimizerRecord {
        horizon: spec.horizon,
        p_star: p.iter().map(|v| to_f64(*v)).collect(),
        z_star: best.z.iter().map(|v| to_f64(*v)).collect(),
        f_value: objective.value,
        residual: to_f64(ls.residual(model, &p)?),
        evaluations: evals,
        starts_used: chosen.len(),
        status: best.status,
        objective,
    })
}

/// Records of a horizon sweep with convergence bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub records: Vec<MinimizerRecord>,
    /// `|p*_{k+1} - p*_k|` (Euclidean, ambient coordinates).
    pub distances: Vec<f64>,
    pub accumulation: bool,
    pub accumulation_tol: f64,
    /// Grid spacing shared by all horizons.
    pub grid_step: f64,
    /// `F_{T_{k-1}}(p*_k) <= F_{T_k}(p*_k)` for every `k >= 1`.
    pub monotone_at_points: bool,
    /// Error that stopped the sweep early, if any.
    pub error: Option<String>,
    #[serde(skip)]
    pub failure: Option<Error>,
}

/// Accumulation heuristic: at least three distances, the last three strictly
/// decreasing, and the final one at most `tol`.
pub fn accumulation_flag(distances: &[f64], tol: f64) -> bool {
    let n = distances.len();
    n >= 3 && distances[n - 3] > distances[n - 2] && distances[n - 2] > distances[n - 1] && distances[n - 1] <= tol
}

/// Solves for every horizon in `horizons` (ascending). The grid spacing is
/// fixed by the first horizon unless the template sets it, so the grids are
/// nested. Each solve is warm-started from the previous minimizer in
/// addition to `starts`.
pub fn horizon_sweep<T: Real>(
    model: &ModelSpec<T>,
    template: &ObjectiveSpec,
    ls: &LevelSetSpec<T>,
    horizons: &[f64],
    starts: &[DVector<T>],
    settings: &OptimizerSettings,
    accumulation_tol: f64,
    tol: &Tolerances,
) -> Result<SweepResult> {
    if horizons.is_empty() {
        return Err(Error::InvalidParameter("no horizons given".into()));
    }
    if horizons.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidParameter("horizons must be strictly increasing".into()));
    }
    let base = template.grid_base.unwrap_or(horizons[0]);
    let mut records: Vec<MinimizerRecord> = Vec::new();
    let mut error = None;
    let mut monotone = true;
    for &h in horizons {
        let spec = template.with_horizon(h).with_grid_base(base);
        let mut run_starts: Vec<DVector<T>> = Vec::with_capacity(starts.len() + 1);
        if let Some(prev) = records.last() {
            run_starts.push(DVector::from_iterator(prev.z_star.len(), prev.z_star.iter().map(|v| lit::<T>(*v))));
        }
        run_starts.extend(starts.iter().cloned());
        match optimize_on_levelset(model, &spec, ls, &run_starts, settings, tol) {
            Ok(rec) => {
                if let Some(prev) = records.last() {
                    let p = DVector::from_iterator(rec.p_star.len(), rec.p_star.iter().map(|v| lit::<T>(*v)));
                    let earlier = F_T(model, &p, &template.with_horizon(prev.horizon).with_grid_base(base), tol)?;
                    let agg_ok = match template.aggregation {
                        crate::objective::Aggregation::Sup => earlier.value <= rec.f_value,
                        crate::objective::Aggregation::Inf => earlier.value >= rec.f_value,
                    };
                    monotone &= agg_ok;
                }
                records.push(rec);
            }
            Err(e) => {
                if records.is_empty() {
                    return Err(e);
                }
                error = Some(e);
                break;
            }
        }
    }
    let distances: Vec<f64> = records
        .windows(2)
        .map(|w| w[0].p_star.iter().zip(&w[1].p_star).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .collect();
    Ok(SweepResult {
        accumulation: accumulation_flag(&distances, accumulation_tol),
        records,
        distances,
        accumulation_tol,
        grid_step: template.with_grid_base(base).step(),
        monotone_at_points: monotone,
        error: error.as_ref().map(|e| e.to_string()),
        failure: error,
    })
}

/// Samples of the trajectory through a minimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct EmittedTrajectory<T: Real> {
    pub times: Vec<T>,
    pub states: Vec<DVector<T>>,
    pub speeds: Vec<T>,
    pub domain: TrajectoryDomain<T>,
}

/// Samples the trajectory through `p_star` on `[t_back, t_fwd]` at spacing
/// `dt`, both directions, truncated at any integration failure.
pub fn emit_limit_trajectory<T: Real>(
    model: &ModelSpec<T>,
    p_star: &DVector<T>,
    span: (T, T),
    dt: T,
    tol: &Tolerances,
) -> Result<EmittedTrajectory<T>> {
    let (t_back, t_fwd) = span;
    if t_back > T::zero() || t_fwd < T::zero() || !(dt > T::zero()) {
        return Err(Error::InvalidParameter("span must contain 0 and dt must be positive".into()));
    }
    let nb = to_f64(-t_back / dt).round() as usize;
    let nf = to_f64(t_fwd / dt).round() as usize;
    let mut times: Vec<T> = (1..=nb).rev().map(|k| -from_usize::<T>(k) * dt).collect();
    times.push(T::zero());
    times.extend((1..=nf).map(|k| from_usize::<T>(k) * dt));
    let (samples, domain) = sample_trajectory(model, p_star, &times, tol)?;
    let speeds = samples.iter().map(|(_, s)| model.speed(s)).collect::<Result<Vec<_>>>()?;
    let (times, states) = samples.into_iter().unzip();
    Ok(EmittedTrajectory { times, states, speeds, domain })
}
