//! Sample, sweep, emit and certify, as driven by a [`RunConfig`].

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use tboa_core::diagnostics::{check_attraction, AttractionCertificate, CandidateCurve};
use tboa_core::models::{
    compile_mechanism, davis_skodje, linear_model, michaelis_menten, null_space_basis, Mechanism,
};
use tboa_core::objective::{certify, CertificateReport};
use tboa_core::optimizer::{
    emit_limit_trajectory, epsilon_from_centre, epsilon_quantile, horizon_sweep, sample_level_set, SweepResult,
};
use tboa_core::{LevelSet, Model, Reduced, Tolerances, Trajectory};

use crate::config::{EpsilonConfig, ModelConfig, RunConfig};
use crate::error::{CliError, Result};

/// Species-space frame of a mechanism run. The search runs in coordinates
/// `w` with `c = origin + basis * w`.
#[derive(Debug)]
pub struct SpeciesFrame {
    pub mechanism: Mechanism,
    pub full: Model,
    pub origin: DVector<f64>,
    pub basis: DMatrix<f64>,
}

impl SpeciesFrame {
    pub fn lift(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.origin + &self.basis * w
    }

    /// Least-squares subspace coordinates of a species vector.
    pub fn project(&self, c: &DVector<f64>) -> DVector<f64> {
        let gram = self.basis.tr_mul(&self.basis);
        let rhs = self.basis.tr_mul(&(c - &self.origin));
        gram.cholesky().expect("basis has full column rank").solve(&rhs)
    }
}

/// A configuration turned into a model and its search space.
#[derive(Debug)]
pub struct Setup {
    pub config: RunConfig,
    /// The model the search runs on (restricted to the conserved subspace
    /// for mechanisms).
    pub model: Model,
    pub embedding: Reduced,
    pub species: Option<SpeciesFrame>,
}

impl Setup {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let (model, species) = match &config.model {
            ModelConfig::DavisSkodje { gamma } => (davis_skodje(*gamma)?, None),
            ModelConfig::MichaelisMenten { gamma, kappa, beta } => (michaelis_menten(*gamma, *kappa, *beta)?, None),
            ModelConfig::Linear { matrix } => {
                let n = matrix.len();
                (linear_model(DMatrix::from_fn(n, n, |i, j| matrix[i][j]))?, None)
            }
            ModelConfig::Mechanism { file, temperature_k, initial } => {
                let mut mech = match file {
                    Some(path) => Mechanism::from_path(path)?,
                    None => Mechanism::hydrogen(),
                };
                if let Some(t) = temperature_k {
                    mech = mech.with_temperature(*t)?;
                }
                let mut origin = DVector::zeros(mech.species.len());
                for (name, &c) in initial {
                    let i = mech
                        .species_index(name)
                        .ok_or_else(|| CliError::Config(format!("unknown species '{name}' in initial composition")))?;
                    origin[i] = c;
                }
                let full: Model = compile_mechanism(&mech);
                let rows = full.conservation().cloned().unwrap_or_else(|| DMatrix::zeros(0, mech.species.len()));
                let basis = null_space_basis(&rows);
                let reduced = full.restrict(origin.clone(), basis.clone())?;
                (reduced, Some(SpeciesFrame { mechanism: mech, full, origin, basis }))
            }
        };
        let dim = model.dim();
        if config.level_set.region.lo.len() != dim {
            return Err(CliError::Config(format!(
                "region has {} coordinates but the search space has {dim}",
                config.level_set.region.lo.len()
            )));
        }
        Ok(Self { config, model, embedding: Reduced::identity(dim), species })
    }

    pub fn tolerances(&self) -> Tolerances {
        self.config.tolerances.tolerances()
    }

    fn region(&self) -> (DVector<f64>, DVector<f64>) {
        let r = &self.config.level_set.region;
        (DVector::from_column_slice(&r.lo), DVector::from_column_slice(&r.hi))
    }

    pub fn epsilon(&self) -> Result<f64> {
        let (lo, hi) = self.region();
        Ok(match self.config.level_set.epsilon {
            EpsilonConfig::Value(v) => v,
            EpsilonConfig::CentreFraction(f) => epsilon_from_centre(&self.model, &self.embedding, &lo, &hi, f)?,
            EpsilonConfig::Quantile { q, samples } => {
                epsilon_quantile(&self.model, &self.embedding, &lo, &hi, q, samples, self.config.seed.wrapping_add(1))?
            }
        })
    }

    pub fn level_set(&self) -> Result<LevelSet> {
        let (lo, hi) = self.region();
        Ok(LevelSet::new(self.epsilon()?, self.embedding.clone(), lo, hi)?)
    }

    /// Output coordinates of a search-space state: species concentrations for
    /// mechanisms (mol/cm3), the state itself otherwise.
    pub fn output_state(&self, p: &DVector<f64>) -> DVector<f64> {
        match &self.species {
            Some(frame) => frame.lift(p),
            None => p.clone(),
        }
    }

    pub fn output_names(&self) -> Vec<String> {
        match &self.species {
            Some(frame) => frame.mechanism.species_names(),
            None => self.model.coordinate_names().to_vec(),
        }
    }
}

/// Level set and sweep of one run.
#[derive(Debug, Serialize)]
pub struct SweepReport {
    pub model: String,
    pub epsilon: f64,
    /// Names of the search coordinates, matching `p_star`.
    pub search_coordinates: Vec<String>,
    /// Minimizers in output coordinates, one per record.
    pub output_coordinates: Vec<String>,
    pub output_states: Vec<Vec<f64>>,
    pub starts: Vec<Vec<f64>>,
    #[serde(flatten)]
    pub sweep: SweepResult,
}

pub fn run_sweep(setup: &Setup) -> Result<SweepReport> {
    let cfg = &setup.config;
    let tol = setup.tolerances();
    let ls = setup.level_set()?;
    let starts: Vec<DVector<f64>> =
        sample_level_set(&setup.model, &ls, cfg.starts.count, cfg.seed)?.into_iter().map(|s| s.z).collect();
    let template = cfg.objective.spec(cfg.horizons[0]);
    let sweep = horizon_sweep(
        &setup.model,
        &template,
        &ls,
        &cfg.horizons,
        &starts,
        &cfg.optimizer,
        cfg.accumulation_tol,
        &tol,
    )?;
    let output_states = sweep
        .records
        .iter()
        .map(|r| setup.output_state(&DVector::from_column_slice(&r.p_star)).iter().copied().collect())
        .collect();
    Ok(SweepReport {
        model: setup.model.name().to_string(),
        epsilon: ls.epsilon,
        search_coordinates: setup.model.coordinate_names().to_vec(),
        output_coordinates: setup.output_names(),
        output_states,
        starts: starts.iter().map(|s| s.iter().copied().collect()).collect(),
        sweep,
    })
}

pub fn emit(setup: &Setup, report: &SweepReport) -> Result<Vec<Trajectory>> {
    let tol = setup.tolerances();
    report
        .sweep
        .records
        .iter()
        .map(|r| {
            let (span, dt) = setup.config.emit.resolve(r.horizon);
            Ok(emit_limit_trajectory(&setup.model, &DVector::from_column_slice(&r.p_star), span, dt, &tol)?)
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct Certificates {
    pub objective: Vec<CertificateReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attraction: Option<AttractionCertificate>,
}

/// Objective certificates at every minimizer, plus the attraction check on
/// the last emitted trajectory when configured.
pub fn certify_run(setup: &Setup, report: &SweepReport, trajectories: &[Trajectory]) -> Result<Certificates> {
    let cfg = &setup.config;
    let tol = setup.tolerances();
    let base = cfg.objective.grid_base.unwrap_or(cfg.horizons[0]);
    let objective = report
        .sweep
        .records
        .iter()
        .map(|r| {
            let spec = cfg.objective.spec(r.horizon).with_grid_base(base);
            let p = DVector::from_column_slice(&r.p_star);
            Ok(certify(&setup.model, &p, &spec, r.f_value, spec.level + cfg.certificate.refine_levels, &tol)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let attraction = match (&cfg.certificate.attraction, trajectories.last()) {
        (Some(a), Some(traj)) => {
            let points = evenly_spaced(&traj.states, a.samples);
            Some(attraction_check(setup, points, a.nu, a.nu_c, a.horizon, a.level, a.bundle)?)
        }
        _ => None,
    };
    Ok(Certificates { objective, attraction })
}

pub fn attraction_check(
    setup: &Setup,
    points: Vec<DVector<f64>>,
    nu: f64,
    nu_c: f64,
    horizon: f64,
    level: u32,
    bundle: crate::config::BundleChoice,
) -> Result<AttractionCertificate> {
    let rule = bundle.rule(setup.model.oracles().transverse.is_some());
    let curve = CandidateCurve::new(points, rule);
    Ok(check_attraction(&setup.model, &curve, nu, nu_c, horizon, level, &setup.tolerances())?)
}

/// `n` entries spread evenly over `items`, endpoints included.
pub fn evenly_spaced<T: Clone>(items: &[T], n: usize) -> Vec<T> {
    if n >= items.len() {
        return items.to_vec();
    }
    if n == 1 {
        return vec![items[items.len() / 2].clone()];
    }
    (0..n).map(|k| items[(k * (items.len() - 1) + (n - 1) / 2) / (n - 1)].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evenly_spaced_keeps_endpoints() {
        let v: Vec<usize> = (0..11).collect();
        assert_eq!(evenly_spaced(&v, 3), vec![0, 5, 10]);
        assert_eq!(evenly_spaced(&v, 20).len(), 11);
        assert_eq!(evenly_spaced(&v, 1), vec![5]);
    }

    #[test]
    fn hydrogen_setup_searches_the_conserved_subspace() {
        let setup = Setup::new(RunConfig::preset("hydrogen").unwrap()).unwrap();
        let frame = setup.species.as_ref().unwrap();
        assert_eq!(setup.model.dim(), 3);
        let w = DVector::from_vec(vec![0.1, -0.2, 0.05]);
        let c = frame.lift(&w);
        assert!((frame.project(&c) - &w).amax() < 1e-14);
        let rows = frame.full.conservation().unwrap();
        assert!((rows * (&c - &frame.origin)).amax() < 1e-14);
    }

    #[test]
    fn region_dimension_is_checked() {
        let mut cfg = RunConfig::preset("davis_skodje").unwrap();
        cfg.level_set.region.lo.push(0.0);
        cfg.level_set.region.hi.push(1.0);
        assert!(matches!(Setup::new(cfg), Err(CliError::Config(_))));
    }
}
