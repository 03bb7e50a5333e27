//! Vector-field models.
//!
//! A [`ModelSpec`] bundles a smooth vector field `X`, its Jacobian `DX`, a
//! metric, an admissibility guard for states, and optional closed-form
//! oracles (flow map, known invariant curve, invariant transverse bundle) used
//! by tests and diagnostics.

mod mechanism;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

pub use mechanism::{
    arrhenius_rate, compile_mechanism, conserved_subspace, Arrhenius, Mechanism, MechanismFile,
    Reaction, Species, GAS_CONSTANT_KJ, HYDROGEN_MECHANISM,
};

use crate::error::{Error, Result};
use crate::geometry::MetricField;
use crate::scalar::{lit, Real};

pub(crate) type VecFn<T> = dyn Fn(&DVector<T>) -> DVector<T> + Send + Sync;
pub(crate) type MatFn<T> = dyn Fn(&DVector<T>) -> DMatrix<T> + Send + Sync;
type GuardFn<T> = dyn Fn(&DVector<T>) -> bool + Send + Sync;
type FlowFn<T> = dyn Fn(&DVector<T>, T) -> DVector<T> + Send + Sync;

/// A closed-form invariant curve given as a graph over one parameter.
#[derive(Clone)]
pub struct KnownCurve<T: Real> {
    /// Admissible parameter interval (open).
    pub range: (T, T),
    point: Arc<dyn Fn(T) -> DVector<T> + Send + Sync>,
    residual: Arc<dyn Fn(&DVector<T>) -> T + Send + Sync>,
}

impl<T: Real> KnownCurve<T> {
    pub fn new<P, R>(range: (T, T), point: P, residual: R) -> Self
    where
        P: Fn(T) -> DVector<T> + Send + Sync + 'static,
        R: Fn(&DVector<T>) -> T + Send + Sync + 'static,
    {
        Self { range, point: Arc::new(point), residual: Arc::new(residual) }
    }

    pub fn point(&self, s: T) -> DVector<T> {
        (self.point)(s)
    }

    /// Signed graph residual; zero exactly on the curve.
    pub fn residual(&self, p: &DVector<T>) -> T {
        (self.residual)(p)
    }
}

/// Closed-form knowledge attached to a model.
#[derive(Clone)]
pub struct Oracles<T: Real> {
    pub flow: Option<Arc<FlowFn<T>>>,
    pub manifold: Option<KnownCurve<T>>,
    /// Basis (columns) of an invariant complement to the known manifold.
    pub transverse: Option<Arc<MatFn<T>>>,
}

impl<T: Real> Default for Oracles<T> {
    fn default() -> Self {
        Self { flow: None, manifold: None, transverse: None }
    }
}

/// A smooth vector field with Jacobian, metric and domain guard.
#[derive(Clone)]
pub struct ModelSpec<T: Real> {
    name: String,
    dim: usize,
    field: Arc<VecFn<T>>,
    jacobian: Arc<MatFn<T>>,
    metric: MetricField<T>,
    guard: Arc<GuardFn<T>>,
    oracles: Oracles<T>,
    conservation: Option<DMatrix<T>>,
    coordinates: Vec<String>,
}

impl<T: Real> fmt::Debug for ModelSpec<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("metric", &self.metric)
            .field("coordinates", &self.coordinates)
            .finish_non_exhaustive()
    }
}

impl<T: Real> ModelSpec<T> {
    pub fn new<F, J>(name: impl Into<String>, dim: usize, field: F, jacobian: J) -> Self
    where
        F: Fn(&DVector<T>) -> DVector<T> + Send + Sync + 'static,
        J: Fn(&DVector<T>) -> DMatrix<T> + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            dim,
            field: Arc::new(field),
            jacobian: Arc::new(jacobian),
            metric: MetricField::euclidean(dim),
            guard: Arc::new(|p: &DVector<T>| p.iter().all(|x| x.is_finite_value())),
            oracles: Oracles::default(),
            conservation: None,
            coordinates: (1..=dim).map(|i| format!("x_{i}")).collect(),
        }
    }

    pub fn with_metric(mut self, metric: MetricField<T>) -> Self {
        assert_eq!(metric.dim(), self.dim, "metric dimension must match the model");
        self.metric = metric;
        self
    }

    /// Adds a domain predicate; finiteness is always required in addition.
    pub fn with_guard<G>(mut self, guard: G) -> Self
    where
        G: Fn(&DVector<T>) -> bool + Send + Sync + 'static,
    {
        self.guard = Arc::new(move |p| p.iter().all(|x| x.is_finite_value()) && guard(p));
        self
    }

    pub fn with_flow_oracle<F>(mut self, flow: F) -> Self
    where
        F: Fn(&DVector<T>, T) -> DVector<T> + Send + Sync + 'static,
    {
        self.oracles.flow = Some(Arc::new(flow));
        self
    }

    pub fn with_known_manifold(mut self, curve: KnownCurve<T>) -> Self {
        self.oracles.manifold = Some(curve);
        self
    }

    pub fn with_transverse_bundle<F>(mut self, bundle: F) -> Self
    where
        F: Fn(&DVector<T>) -> DMatrix<T> + Send + Sync + 'static,
    {
        self.oracles.transverse = Some(Arc::new(bundle));
        self
    }

    /// Rows `L` with `L X(p) = 0` for every state.
    pub fn with_conservation(mut self, rows: DMatrix<T>) -> Self {
        assert_eq!(rows.ncols(), self.dim);
        self.conservation = Some(rows);
        self
    }

    pub fn with_coordinate_names(mut self, names: Vec<String>) -> Self {
        assert_eq!(names.len(), self.dim);
        self.coordinates = names;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn metric(&self) -> &MetricField<T> {
        &self.metric
    }

    pub fn oracles(&self) -> &Oracles<T> {
        &self.oracles
    }

    pub fn conservation(&self) -> Option<&DMatrix<T>> {
        self.conservation.as_ref()
    }

    pub fn coordinate_names(&self) -> &[String] {
        &self.coordinates
    }

    #[inline]
    pub fn field(&self, p: &DVector<T>) -> DVector<T> {
        (self.field)(p)
    }

    #[inline]
    pub fn jacobian(&self, p: &DVector<T>) -> DMatrix<T> {
        (self.jacobian)(p)
    }

    #[inline]
    pub fn is_admissible(&self, p: &DVector<T>) -> bool {
        p.len() == self.dim && (self.guard)(p)
    }

    /// Speed `|X_p|` in the model metric.
    pub fn speed(&self, p: &DVector<T>) -> Result<T> {
        Ok(self.metric.at(p)?.norm(&self.field(p)))
    }

    /// The model in coordinates `z` of the affine subspace `p = origin + basis z`.
    ///
    /// The field must be tangent to the subspace (as it is for the kernel of
    /// the conservation rows through any state). The metric is pulled back,
    /// so with orthonormal columns and a Euclidean metric the embedding is an
    /// isometry. Oracles are dropped.
    pub fn restrict(&self, origin: DVector<T>, basis: DMatrix<T>) -> Result<ModelSpec<T>> {
        if origin.len() != self.dim || basis.nrows() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: basis.nrows() });
        }
        let r = basis.ncols();
        let embed = {
            let (o, b) = (origin.clone(), basis.clone());
            move |z: &DVector<T>| &o + &b * z
        };
        let gram = basis.tr_mul(&basis);
        let pinv = gram
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidParameter("subspace basis is rank deficient".into()))?
            .solve(&basis.transpose());
        let (field, e1, b1) = (self.field.clone(), embed.clone(), pinv.clone());
        let (jac, e2, p2, b2) = (self.jacobian.clone(), embed.clone(), pinv, basis.clone());
        let (guard, e3) = (self.guard.clone(), embed.clone());
        let mut reduced = ModelSpec::new(
            format!("{} restricted to {r} dimensions", self.name),
            r,
            move |z: &DVector<T>| &b1 * field(&e1(z)),
            move |z: &DVector<T>| &p2 * (jac(&e2(z)) * &b2),
        )
        .with_guard(move |z| guard(&e3(z)));
        let orthonormal = (gram - DMatrix::identity(r, r)).amax() <= lit::<T>(1e-12);
        if !(self.metric.is_euclidean() && orthonormal) {
            let (metric, e4, b4) = (self.metric.clone(), embed, basis);
            reduced = reduced.with_metric(MetricField::field(r, move |z| match metric.at(&e4(z)) {
                Ok(g) => b4.tr_mul(&(g.matrix() * &b4)),
                Err(_) => DMatrix::from_element(r, r, lit::<T>(f64::NAN)),
            }));
        }
        Ok(reduced.with_coordinate_names((1..=r).map(|i| format!("z_{i}")).collect()))
    }

    /// Largest entry-wise deviation of `DX(p)` from central differences
    /// (step `1e-6` times the state magnitude), relative to the largest
    /// Jacobian entry.
    pub fn jacobian_fd_error(&self, p: &DVector<T>) -> T {
        let j = self.jacobian(p);
        let mut fd = DMatrix::zeros(self.dim, self.dim);
        let state_scale = p.amax();
        for k in 0..self.dim {
            let mag = p[k].abs().max(state_scale);
            let h = lit::<T>(1e-6) * if mag > T::zero() { mag } else { T::one() };
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp[k] += h;
            pm[k] -= h;
            let col = (self.field(&pp) - self.field(&pm)) / (h + h);
            fd.set_column(k, &col);
        }
        let scale = j.amax().max(fd.amax()).max(T::eps() * T::eps());
        (j - fd).amax() / scale
    }
}

/// The two-dimensional Davis-Skodje model; `gamma > 1` is the time-scale ratio.
pub fn davis_skodje<T: Real>(gamma: T) -> Result<ModelSpec<T>> {
    if !(gamma > T::one()) || !gamma.is_finite_value() {
        return Err(Error::InvalidParameter(format!("davis_skodje requires gamma > 1, got {gamma}")));
    }
    let g = gamma;
    let field = move |p: &DVector<T>| {
        let (x, y) = (p[0], p[1]);
        let d = T::one() + x;
        DVector::from_vec(vec![-x, -g * y + ((g - T::one()) * x + g * x * x) / (d * d)])
    };
    let jac = move |p: &DVector<T>| {
        let x = p[0];
        let d = T::one() + x;
        let dgx = ((g - T::one()) + (g + T::one()) * x) / (d * d * d);
        DMatrix::from_row_slice(2, 2, &[-T::one(), T::zero(), dgx, -g])
    };
    let flow = move |p0: &DVector<T>, t: T| {
        let (x0, y0) = (p0[0], p0[1]);
        let x = x0 * (-t).exp();
        let off = y0 - x0 / (T::one() + x0);
        DVector::from_vec(vec![x, x / (T::one() + x) + off * (-g * t).exp()])
    };
    let curve = KnownCurve::new(
        (-T::one(), lit(1e6)),
        |s: T| DVector::from_vec(vec![s, s / (T::one() + s)]),
        |p: &DVector<T>| p[1] - p[0] / (T::one() + p[0]),
    );
    Ok(ModelSpec::new(format!("davis_skodje(gamma={gamma})"), 2, field, jac)
        .with_guard(|p| p[0] > -T::one())
        .with_flow_oracle(flow)
        .with_known_manifold(curve)
        .with_transverse_bundle(|_p| DMatrix::from_column_slice(2, 1, &[T::zero(), T::one()]))
        .with_coordinate_names(vec!["x".into(), "y".into()]))
}

/// The Michaelis-Menten system with the sign pattern
/// `x' = -x + x y + (kappa - beta) y`, `y' = gamma (x + x y + kappa y)`.
///
/// For `gamma = kappa = beta > 0` the origin is a saddle (eigenvalues `-1`
/// and `gamma kappa`), unlike the classical reduced enzyme kinetics, and the
/// axis `x = 0` is invariant.
pub fn michaelis_menten<T: Real>(gamma: T, kappa: T, beta: T) -> Result<ModelSpec<T>> {
    if ![gamma, kappa, beta].iter().all(|v| v.is_finite_value()) {
        return Err(Error::InvalidParameter("michaelis_menten parameters must be finite".into()));
    }
    let field = move |p: &DVector<T>| {
        let (x, y) = (p[0], p[1]);
        DVector::from_vec(vec![-x + x * y + (kappa - beta) * y, gamma * (x + x * y + kappa * y)])
    };
    let jac = move |p: &DVector<T>| {
        let (x, y) = (p[0], p[1]);
        DMatrix::from_row_slice(
            2,
            2,
            &[-T::one() + y, x + kappa - beta, gamma * (T::one() + y), gamma * (x + kappa)],
        )
    };
    Ok(ModelSpec::new(
        format!("michaelis_menten(gamma={gamma}, kappa={kappa}, beta={beta})"),
        2,
        field,
        jac,
    )
    .with_coordinate_names(vec!["x".into(), "y".into()]))
}

/// The linear field `X(p) = A p` with its matrix-exponential flow.
pub fn linear_model<T: Real>(a: DMatrix<T>) -> Result<ModelSpec<T>> {
    if !a.is_square() {
        return Err(Error::InvalidParameter("linear model matrix must be square".into()));
    }
    if a.iter().any(|x| !x.is_finite_value()) {
        return Err(Error::InvalidParameter("linear model matrix must be finite".into()));
    }
    let dim = a.nrows();
    let af = a.clone();
    let aj = a.clone();
    let aflow = a;
    Ok(ModelSpec::new(
        format!("linear({dim}x{dim})"),
        dim,
        move |p: &DVector<T>| &af * p,
        move |_p: &DVector<T>| aj.clone(),
    )
    .with_flow_oracle(move |p, t| (&aflow * t).exp() * p))
}

/// Orthonormal basis (columns) of the null space of `rows`.
pub fn null_space_basis<T: Real>(rows: &DMatrix<T>) -> DMatrix<T> {
    let q = rows.ncols();
    let mut ortho: Vec<DVector<T>> = Vec::new();
    let gs = |mut c: DVector<T>, kept: &[DVector<T>]| {
        for _ in 0..2 {
            for b in kept {
                let d = b.dot(&c);
                c.axpy(-d, b, T::one());
            }
        }
        c
    };
    for r in rows.row_iter() {
        let c = gs(r.transpose(), &ortho);
        let n = c.norm();
        if n > lit::<T>(1e-10) * r.norm().max(T::eps() * T::eps()) {
            ortho.push(c / n);
        }
    }
    let rank = ortho.len();
    let mut kernel: Vec<DVector<T>> = Vec::new();
    for i in 0..q {
        if rank + kernel.len() == q {
            break;
        }
        let e = DVector::from_fn(q, |k, _| if k == i { T::one() } else { T::zero() });
        let all: Vec<DVector<T>> = ortho.iter().chain(kernel.iter()).cloned().collect();
        let c = gs(e, &all);
        let n = c.norm();
        if n > lit(1e-8) {
            kernel.push(c / n);
        }
    }
    let mut basis = DMatrix::zeros(q, kernel.len());
    for (j, k) in kernel.iter().enumerate() {
        basis.set_column(j, k);
    }
    basis
}
