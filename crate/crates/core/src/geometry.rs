//! Riemannian inner products on a single coordinate domain.
//!
//! The phase space is an open subset of `R^q` carrying a symmetric positive
//! definite metric tensor `G(p)`. Tangent vectors are measured with `G`,
//! cotangent vectors with `G^{-1}`; the musical maps are `v -> G v` and
//! `w -> G^{-1} w`.
//!
//! A [`LocalMetric`] is the metric evaluated and Cholesky-factored at one base
//! point. Callers that need several products at the same point should build it
//! once and reuse it.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::{lit, Real};

type MetricFn<T> = dyn Fn(&DVector<T>) -> DMatrix<T> + Send + Sync;

#[derive(Clone)]
enum MetricKind<T: Real> {
    Euclidean,
    Constant(DMatrix<T>),
    Field(Arc<MetricFn<T>>),
}

/// A metric tensor field `p -> G(p)` on a `dim`-dimensional coordinate domain.
#[derive(Clone)]
pub struct MetricField<T: Real> {
    dim: usize,
    kind: MetricKind<T>,
}

impl<T: Real> fmt::Debug for MetricField<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            MetricKind::Euclidean => "euclidean",
            MetricKind::Constant(_) => "constant",
            MetricKind::Field(_) => "field",
        };
        f.debug_struct("MetricField")
            .field("dim", &self.dim)
            .field("kind", &kind)
            .finish()
    }
}

impl<T: Real> MetricField<T> {
    /// The identity metric.
    pub fn euclidean(dim: usize) -> Self {
        Self { dim, kind: MetricKind::Euclidean }
    }

    /// A state-independent metric. Fails if `g` is not symmetric positive definite.
    pub fn constant(g: DMatrix<T>) -> Result<Self> {
        if !g.is_square() {
            return Err(Error::InvalidMetric("metric matrix is not square".into()));
        }
        let dim = g.nrows();
        // Validate eagerly; the factorization is redone at each evaluation.
        LocalMetric::from_matrix(g.clone())?;
        Ok(Self { dim, kind: MetricKind::Constant(g) })
    }

    /// A state-dependent metric. Validity is checked at every evaluation.
    pub fn field<F>(dim: usize, g: F) -> Self
    where
        F: Fn(&DVector<T>) -> DMatrix<T> + Send + Sync + 'static,
    {
        Self { dim, kind: MetricKind::Field(Arc::new(g)) }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_euclidean(&self) -> bool {
        matches!(self.kind, MetricKind::Euclidean)
    }

    /// Evaluates and factors the metric at `p`.
    pub fn at(&self, p: &DVector<T>) -> Result<LocalMetric<T>> {
        if p.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: p.len() });
        }
        match &self.kind {
            MetricKind::Euclidean => Ok(LocalMetric::identity(self.dim)),
            MetricKind::Constant(g) => LocalMetric::from_matrix(g.clone()),
            MetricKind::Field(f) => LocalMetric::from_matrix(f(p)),
        }
    }
}

/// The metric at a single base point together with its Cholesky factor `G = L L^T`.
#[derive(Debug, Clone)]
pub struct LocalMetric<T: Real> {
    g: DMatrix<T>,
    l: DMatrix<T>,
    identity: bool,
}

impl<T: Real> LocalMetric<T> {
    pub fn identity(dim: usize) -> Self {
        Self { g: DMatrix::identity(dim, dim), l: DMatrix::identity(dim, dim), identity: true }
    }

    /// Factors `g`, rejecting asymmetric (beyond 1e-12 relative) or indefinite input.
    pub fn from_matrix(g: DMatrix<T>) -> Result<Self> {
        if !g.is_square() {
            return Err(Error::InvalidMetric("metric matrix is not square".into()));
        }
        if g.iter().any(|x| !x.is_finite_value()) {
            return Err(Error::InvalidMetric("non-finite metric entry".into()));
        }
        let scale = g.amax();
        let asym = (&g - g.transpose()).amax();
        if asym > lit::<T>(1e-12) * scale {
            return Err(Error::InvalidMetric(format!("asymmetry {asym:e} exceeds tolerance")));
        }
        let chol = g
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidMetric("metric is not positive definite".into()))?;
        let l = chol.l();
        Ok(Self { g, l, identity: false })
    }

    pub fn dim(&self) -> usize {
        self.g.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.g
    }

    /// Lower Cholesky factor `L`.
    pub fn factor(&self) -> &DMatrix<T> {
        &self.l
    }

    pub fn inner(&self, u: &DVector<T>, v: &DVector<T>) -> T {
        if self.identity {
            u.dot(v)
        } else {
            u.dot(&(&self.g * v))
        }
    }

    pub fn norm(&self, v: &DVector<T>) -> T {
        self.whiten_tangent(v).norm()
    }

    pub fn conorm(&self, w: &DVector<T>) -> T {
        self.whiten_cotangent(w).norm()
    }

    pub fn flat(&self, v: &DVector<T>) -> DVector<T> {
        if self.identity {
            v.clone()
        } else {
            &self.g * v
        }
    }

    pub fn sharp(&self, w: &DVector<T>) -> DVector<T> {
        if self.identity {
            return w.clone();
        }
        let y = self.l.solve_lower_triangular(w).expect("cholesky factor is invertible");
        self.l.tr_solve_lower_triangular(&y).expect("cholesky factor is invertible")
    }

    /// `L^T v`, so that `|v|_g = |L^T v|`.
    pub fn whiten_tangent(&self, v: &DVector<T>) -> DVector<T> {
        if self.identity {
            v.clone()
        } else {
            self.l.tr_mul(v)
        }
    }

    /// `L^{-1} w`, so that `|w|_{g^{-1}} = |L^{-1} w|`.
    pub fn whiten_cotangent(&self, w: &DVector<T>) -> DVector<T> {
        if self.identity {
            w.clone()
        } else {
            self.l.solve_lower_triangular(w).expect("cholesky factor is invertible")
        }
    }

    /// Column-wise [`whiten_tangent`](Self::whiten_tangent).
    pub fn whiten_tangents(&self, m: &DMatrix<T>) -> DMatrix<T> {
        if self.identity {
            m.clone()
        } else {
            self.l.tr_mul(m)
        }
    }

    /// Column-wise [`whiten_cotangent`](Self::whiten_cotangent).
    pub fn whiten_cotangents(&self, m: &DMatrix<T>) -> DMatrix<T> {
        if self.identity {
            m.clone()
        } else {
            self.l.solve_lower_triangular(m).expect("cholesky factor is invertible")
        }
    }

    /// Angle between two nonzero tangent vectors, in `[0, pi]`.
    pub fn angle(&self, u: &DVector<T>, w: &DVector<T>) -> Result<T> {
        let nu = self.norm(u);
        let nw = self.norm(w);
        if nu == T::zero() || nw == T::zero() {
            return Err(Error::ZeroVector);
        }
        let c = (self.inner(u, w) / (nu * nw)).clamp(-T::one(), T::one());
        Ok(c.acos())
    }

    /// A g-orthonormal basis (as columns) of the g-orthogonal complement of `x`.
    pub fn orthonormal_complement(&self, x: &DVector<T>) -> Result<DMatrix<T>> {
        let q = self.dim();
        let y = self.whiten_tangent(x);
        let ny = y.norm();
        if ny == T::zero() {
            return Err(Error::ZeroVector);
        }
        let mut kept: Vec<DVector<T>> = vec![y / ny];
        for i in 0..q {
            if kept.len() == q {
                break;
            }
            let mut c = DVector::from_fn(q, |k, _| if k == i { T::one() } else { T::zero() });
            // Two Gram-Schmidt passes.
            for _ in 0..2 {
                for b in &kept {
                    let d = b.dot(&c);
                    c.axpy(-d, b, T::one());
                }
            }
            let nc = c.norm();
            if nc > lit(1e-8) {
                kept.push(c / nc);
            }
        }
        let mut basis = DMatrix::zeros(q, q - 1);
        for (j, c) in kept.iter().skip(1).enumerate() {
            let b = if self.identity {
                c.clone()
            } else {
                self.l.tr_solve_lower_triangular(c).expect("cholesky factor is invertible")
            };
            basis.set_column(j, &b);
        }
        Ok(basis)
    }
}

/// A tangent vector attached to a base point.
#[derive(Debug, Clone, PartialEq)]
pub struct Tangent<T: Real> {
    pub base: DVector<T>,
    pub components: DVector<T>,
}

/// A cotangent vector attached to a base point.
#[derive(Debug, Clone, PartialEq)]
pub struct Cotangent<T: Real> {
    pub base: DVector<T>,
    pub components: DVector<T>,
}

impl<T: Real> Tangent<T> {
    pub fn new(base: DVector<T>, components: DVector<T>) -> Self {
        Self { base, components }
    }
}

impl<T: Real> Cotangent<T> {
    pub fn new(base: DVector<T>, components: DVector<T>) -> Self {
        Self { base, components }
    }

    /// The pairing `w(v)`; bases must agree.
    pub fn pair(&self, v: &Tangent<T>) -> T {
        self.components.dot(&v.components)
    }
}

pub fn norm<T: Real>(v: &Tangent<T>, g: &MetricField<T>) -> Result<T> {
    Ok(g.at(&v.base)?.norm(&v.components))
}

pub fn conorm<T: Real>(w: &Cotangent<T>, g: &MetricField<T>) -> Result<T> {
    Ok(g.at(&w.base)?.conorm(&w.components))
}

pub fn flat<T: Real>(v: &Tangent<T>, g: &MetricField<T>) -> Result<Cotangent<T>> {
    let m = g.at(&v.base)?;
    Ok(Cotangent::new(v.base.clone(), m.flat(&v.components)))
}

pub fn sharp<T: Real>(w: &Cotangent<T>, g: &MetricField<T>) -> Result<Tangent<T>> {
    let m = g.at(&w.base)?;
    Ok(Tangent::new(w.base.clone(), m.sharp(&w.components)))
}

pub fn angle<T: Real>(u: &Tangent<T>, w: &Tangent<T>, g: &MetricField<T>) -> Result<T> {
    if u.base != w.base {
        return Err(Error::InvalidParameter("tangent vectors at different base points".into()));
    }
    g.at(&u.base)?.angle(&u.components, &w.components)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dvector;
    use proptest::prelude::*;

    fn diag(a: f64, b: f64) -> MetricField<f64> {
        MetricField::constant(DMatrix::from_diagonal(&dvector![a, b])).unwrap()
    }

    fn at0(v: DVector<f64>) -> Tangent<f64> {
        Tangent::new(DVector::zeros(v.len()), v)
    }

    fn co0(v: DVector<f64>) -> Cotangent<f64> {
        Cotangent::new(DVector::zeros(v.len()), v)
    }

    #[test]
    fn norm_examples() {
        let e = MetricField::euclidean(2);
        assert_eq!(norm(&at0(dvector![1.0, 0.0]), &e).unwrap(), 1.0);
        assert_eq!(norm(&at0(dvector![0.0, 0.0]), &diag(4.0, 9.0)).unwrap(), 0.0);
        assert_relative_eq!(
            norm(&at0(dvector![1.0, 1.0]), &diag(4.0, 9.0)).unwrap(),
            13f64.sqrt(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn conorm_examples() {
        let e = MetricField::euclidean(2);
        assert_eq!(conorm(&co0(dvector![1.0, 0.0]), &e).unwrap(), 1.0);
        assert_relative_eq!(conorm(&co0(dvector![2.0, 0.0]), &diag(4.0, 1.0)).unwrap(), 1.0);
    }

    #[test]
    fn flat_sharp_examples() {
        let e = MetricField::euclidean(2);
        assert_eq!(flat(&at0(dvector![1.0, 0.0]), &e).unwrap().components, dvector![1.0, 0.0]);
        let g = diag(4.0, 1.0);
        assert_eq!(flat(&at0(dvector![1.0, 0.0]), &g).unwrap().components, dvector![4.0, 0.0]);
    }

    #[test]
    fn angle_examples() {
        let e = MetricField::euclidean(2);
        let a = |u, w| angle(&at0(u), &at0(w), &e).unwrap();
        assert_eq!(a(dvector![1.0, 0.0], dvector![1.0, 0.0]), 0.0);
        assert_relative_eq!(a(dvector![1.0, 0.0], dvector![0.0, 1.0]), std::f64::consts::FRAC_PI_2);
        assert_relative_eq!(
            a(dvector![1.0, 0.0], dvector![1.0, 1.0]),
            std::f64::consts::FRAC_PI_4,
            epsilon = 1e-15
        );
        assert_eq!(
            angle(&at0(dvector![0.0, 0.0]), &at0(dvector![1.0, 0.0]), &e),
            Err(Error::ZeroVector)
        );
    }

    #[test]
    fn rejects_invalid_metrics() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(MetricField::constant(asym), Err(Error::InvalidMetric(_))));
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(MetricField::constant(indef), Err(Error::InvalidMetric(_))));
        let bad = MetricField::field(2, |_p: &DVector<f64>| DMatrix::zeros(2, 2));
        assert!(matches!(norm(&at0(dvector![1.0, 0.0]), &bad), Err(Error::InvalidMetric(_))));
    }

    #[test]
    fn state_dependent_metric_uses_base_point() {
        let g = MetricField::field(2, |p: &DVector<f64>| {
            DMatrix::from_diagonal(&dvector![1.0 + p[0] * p[0], 1.0])
        });
        let v = Tangent::new(dvector![2.0, 0.0], dvector![1.0, 0.0]);
        assert_relative_eq!(norm(&v, &g).unwrap(), 5f64.sqrt());
    }

    #[test]
    fn works_in_single_precision() {
        let g = MetricField::<f32>::constant(DMatrix::from_diagonal(&DVector::from_vec(vec![
            4.0f32, 9.0,
        ])))
        .unwrap();
        let v = Tangent::new(DVector::zeros(2), DVector::from_vec(vec![1.0f32, 1.0]));
        assert!((norm(&v, &g).unwrap() - 13f32.sqrt()).abs() < 1e-6);
    }

    fn spd_and_vector() -> impl Strategy<Value = (DMatrix<f64>, DVector<f64>, DVector<f64>)> {
        (
            proptest::collection::vec(-1.0..1.0f64, 9),
            proptest::collection::vec(-2.0..2.0f64, 3),
            proptest::collection::vec(-2.0..2.0f64, 3),
        )
            .prop_map(|(a, v, w)| {
                let a = DMatrix::from_vec(3, 3, a);
                let g = &a * a.transpose() + DMatrix::identity(3, 3) * 0.5;
                (g, DVector::from_vec(v), DVector::from_vec(w))
            })
    }

    proptest! {
        #[test]
        fn musical_maps_are_inverse_isometries((g, v, _w) in spd_and_vector()) {
            let m = LocalMetric::from_matrix(g).unwrap();
            let f = m.flat(&v);
            let back = m.sharp(&f);
            prop_assert!((&back - &v).amax() <= 1e-10 * (1.0 + v.amax()));
            let n = m.norm(&v);
            prop_assert!((m.conorm(&f) - n).abs() <= 1e-10 * (1.0 + n));
            prop_assert!((n * n - f.dot(&v)).abs() <= 1e-10 * (1.0 + n * n));
        }

        #[test]
        fn angle_symmetric_and_scale_invariant((g, v, w) in spd_and_vector(), s in 0.1..10.0f64) {
            prop_assume!(v.norm() > 1e-3 && w.norm() > 1e-3);
            let m = LocalMetric::from_matrix(g).unwrap();
            let a = m.angle(&v, &w).unwrap();
            prop_assert!((a - m.angle(&w, &v).unwrap()).abs() < 1e-12);
            prop_assert!((a - m.angle(&(&v * s), &w).unwrap()).abs() < 1e-7);
            prop_assert!((0.0..=std::f64::consts::PI).contains(&a));
        }

        #[test]
        fn complement_is_orthonormal((g, v, _w) in spd_and_vector()) {
            prop_assume!(v.norm() > 1e-3);
            let m = LocalMetric::from_matrix(g).unwrap();
            let b = m.orthonormal_complement(&v).unwrap();
            prop_assert_eq!(b.ncols(), 2);
            for j in 0..2 {
                let bj = b.column(j).into_owned();
                prop_assert!((m.norm(&bj) - 1.0).abs() < 1e-10);
                prop_assert!(m.inner(&bj, &v).abs() < 1e-10 * (1.0 + m.norm(&v)));
            }
            let b0 = b.column(0).into_owned();
            let b1 = b.column(1).into_owned();
            prop_assert!(m.inner(&b0, &b1).abs() < 1e-10);
        }
    }
}
