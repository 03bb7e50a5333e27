//! Isothermal mass-action mechanisms with Arrhenius rate constants.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::ModelSpec;
use crate::error::{Error, Result};
use crate::scalar::{lit, Real};

/// Universal gas constant in kJ mol^-1 K^-1.
pub const GAS_CONSTANT_KJ: f64 = 8.314462618e-3;

/// Modified Arrhenius parameters; `ea` is stored in kJ/mol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arrhenius {
    #[serde(rename = "A")]
    pub a: f64,
    pub b: f64,
    #[serde(rename = "Ea")]
    pub ea: f64,
}

impl Arrhenius {
    pub fn rate(&self, temperature: f64) -> f64 {
        arrhenius_rate(self.a, self.b, self.ea, temperature)
    }
}

/// `k(T) = A T^b exp(-Ea / (R T))` with `Ea` in kJ/mol.
pub fn arrhenius_rate(a: f64, b: f64, ea_kj: f64, temperature: f64) -> f64 {
    a * temperature.powf(b) * (-ea_kj / (GAS_CONSTANT_KJ * temperature)).exp()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitsDecl {
    #[serde(rename = "A_units")]
    pub a_units: String,
    #[serde(rename = "Ea_units")]
    pub ea_units: String,
    pub conc: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesDecl {
    pub name: String,
    pub composition: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReactionDecl {
    #[serde(default)]
    pub label: Option<String>,
    pub reactants: BTreeMap<String, f64>,
    pub products: BTreeMap<String, f64>,
    #[serde(default)]
    pub third_body: bool,
    pub forward: Arrhenius,
    #[serde(default)]
    pub reverse: Option<Arrhenius>,
}

/// The on-disk mechanism document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MechanismFile {
    pub units: UnitsDecl,
    #[serde(rename = "temperature_K")]
    pub temperature_k: f64,
    pub species: Vec<SpeciesDecl>,
    pub reactions: Vec<ReactionDecl>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Species {
    pub name: String,
    pub composition: BTreeMap<String, u32>,
}

/// A validated reaction; stoichiometry is indexed by species position.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reaction {
    pub label: String,
    pub reactants: Vec<(usize, u32)>,
    pub products: Vec<(usize, u32)>,
    pub third_body: bool,
    pub forward: Arrhenius,
    pub reverse: Option<Arrhenius>,
}

/// A validated, immutable mechanism at a fixed temperature.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Mechanism {
    pub species: Vec<Species>,
    pub reactions: Vec<Reaction>,
    pub temperature: f64,
    pub a_units: String,
}

/// The bundled six-reaction hydrogen mechanism at 3000 K, forward rates only.
pub const HYDROGEN_MECHANISM: &str = include_str!("../../data/h2_mechanism.json");

impl Mechanism {
    pub fn hydrogen() -> Self {
        Self::from_json_str(HYDROGEN_MECHANISM).expect("bundled mechanism validates")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: MechanismFile = serde_json::from_str(text)
            .map_err(|e| Error::MechanismValidation(vec![format!("parse error: {e}")]))?;
        Self::from_file_decl(file)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::MechanismValidation(vec![format!("cannot read {}: {e}", path.display())])
        })?;
        Self::from_json_str(&text)
    }

    /// Validates a parsed document: units, species, stoichiometry, positivity
    /// of pre-exponential factors, and per-element atom balance.
    pub fn from_file_decl(file: MechanismFile) -> Result<Self> {
        let mut errors = Vec::new();
        let ea_scale = match file.units.ea_units.trim() {
            "kJ/mol" => 1.0,
            "J/mol" => 1e-3,
            other => {
                errors.push(format!("unsupported Ea_units '{other}' (expected kJ/mol or J/mol)"));
                1.0
            }
        };
        if file.units.conc.trim() != "mol/cm3" {
            errors.push(format!("unsupported conc units '{}' (expected mol/cm3)", file.units.conc));
        }
        if !(file.temperature_k > 0.0 && file.temperature_k.is_finite()) {
            errors.push(format!("temperature must be positive, got {}", file.temperature_k));
        }

        let mut index = BTreeMap::new();
        let mut species = Vec::with_capacity(file.species.len());
        for (i, s) in file.species.iter().enumerate() {
            if index.insert(s.name.clone(), i).is_some() {
                errors.push(format!("duplicate species '{}'", s.name));
            }
            let mut composition = BTreeMap::new();
            for (el, &n) in &s.composition {
                match as_count(n) {
                    Some(c) => {
                        composition.insert(el.clone(), c);
                    }
                    None => errors.push(format!(
                        "species '{}': element '{el}' count {n} is not a nonnegative integer",
                        s.name
                    )),
                }
            }
            species.push(Species { name: s.name.clone(), composition });
        }

        let mut reactions = Vec::with_capacity(file.reactions.len());
        for (r, decl) in file.reactions.iter().enumerate() {
            let label = decl.label.clone().unwrap_or_else(|| describe(decl));
            let tag = format!("reaction {} ({label})", r + 1);
            let side = |m: &BTreeMap<String, f64>, errors: &mut Vec<String>| {
                let mut out = Vec::new();
                for (name, &nu) in m {
                    let Some(&i) = index.get(name) else {
                        errors.push(format!("{tag}: unknown species '{name}'"));
                        continue;
                    };
                    match as_count(nu) {
                        Some(0) => {}
                        Some(c) => out.push((i, c)),
                        None => errors.push(format!(
                            "{tag}: coefficient {nu} of '{name}' is not a nonnegative integer"
                        )),
                    }
                }
                out
            };
            let reactants = side(&decl.reactants, &mut errors);
            let products = side(&decl.products, &mut errors);
            for (dir, arr) in [("forward", Some(decl.forward)), ("reverse", decl.reverse)] {
                if let Some(arr) = arr {
                    if !(arr.a > 0.0 && arr.a.is_finite()) {
                        errors.push(format!("{tag}: {dir} A must be positive, got {}", arr.a));
                    }
                    if !arr.b.is_finite() || !arr.ea.is_finite() {
                        errors.push(format!("{tag}: {dir} parameters must be finite"));
                    }
                }
            }
            let scale_ea = |a: Arrhenius| Arrhenius { ea: a.ea * ea_scale, ..a };
            reactions.push(Reaction {
                label,
                reactants,
                products,
                third_body: decl.third_body,
                forward: scale_ea(decl.forward),
                reverse: decl.reverse.map(scale_ea),
            });
        }

        if errors.is_empty() {
            for (r, rx) in reactions.iter().enumerate() {
                for (el, lhs, rhs) in atom_imbalance(&species, rx) {
                    errors.push(format!(
                        "reaction {} ({}): element '{el}' unbalanced ({lhs} reactant atoms vs {rhs} product atoms)",
                        r + 1,
                        rx.label
                    ));
                }
            }
        }

        if errors.is_empty() {
            Ok(Self {
                species,
                reactions,
                temperature: file.temperature_k,
                a_units: file.units.a_units,
            })
        } else {
            Err(Error::MechanismValidation(errors))
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidParameter(format!("temperature must be positive, got {temperature}")));
        }
        self.temperature = temperature;
        Ok(self)
    }

    pub fn species_names(&self) -> Vec<String> {
        self.species.iter().map(|s| s.name.clone()).collect()
    }

    pub fn species_index(&self, name: &str) -> Option<usize> {
        self.species.iter().position(|s| s.name == name)
    }

    /// Sorted element symbols occurring in any species.
    pub fn elements(&self) -> Vec<String> {
        let set: BTreeSet<&String> =
            self.species.iter().flat_map(|s| s.composition.keys()).collect();
        set.into_iter().cloned().collect()
    }

    /// Element-by-species atom count matrix.
    pub fn composition_matrix(&self) -> DMatrix<f64> {
        let elements = self.elements();
        DMatrix::from_fn(elements.len(), self.species.len(), |e, s| {
            f64::from(self.species[s].composition.get(&elements[e]).copied().unwrap_or(0))
        })
    }

    /// Forward and reverse rate constants at the mechanism temperature.
    pub fn rate_constants(&self) -> Vec<(f64, Option<f64>)> {
        self.reactions
            .iter()
            .map(|r| {
                (r.forward.rate(self.temperature), r.reverse.map(|a| a.rate(self.temperature)))
            })
            .collect()
    }
}

fn as_count(x: f64) -> Option<u32> {
    (x >= 0.0 && x.fract() == 0.0 && x <= f64::from(u32::MAX)).then_some(x as u32)
}

fn describe(r: &ReactionDecl) -> String {
    let side = |m: &BTreeMap<String, f64>| {
        m.iter()
            .map(|(n, &c)| if c == 1.0 { n.clone() } else { format!("{c}{n}") })
            .collect::<Vec<_>>()
            .join(" + ")
    };
    let m = if r.third_body { " + M" } else { "" };
    let arrow = if r.reverse.is_some() { "<=>" } else { "=>" };
    format!("{}{m} {arrow} {}{m}", side(&r.reactants), side(&r.products))
}

fn atom_imbalance(species: &[Species], rx: &Reaction) -> Vec<(String, u64, u64)> {
    let mut count: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for &(i, nu) in &rx.reactants {
        for (el, &n) in &species[i].composition {
            count.entry(el).or_default().0 += u64::from(nu) * u64::from(n);
        }
    }
    for &(i, nu) in &rx.products {
        for (el, &n) in &species[i].composition {
            count.entry(el).or_default().1 += u64::from(nu) * u64::from(n);
        }
    }
    count
        .into_iter()
        .filter(|(_, (l, r))| l != r)
        .map(|(el, (l, r))| (el.to_string(), l, r))
        .collect()
}

/// Linearly independent elemental conservation rows (one per independent
/// element, in sorted element order).
pub fn conserved_subspace(mech: &Mechanism) -> DMatrix<f64> {
    let e = mech.composition_matrix();
    let mut kept_rows: Vec<usize> = Vec::new();
    let mut ortho: Vec<DVector<f64>> = Vec::new();
    for (i, row) in e.row_iter().enumerate() {
        let mut c = row.transpose();
        for _ in 0..2 {
            for b in &ortho {
                let d = b.dot(&c);
                c.axpy(-d, b, 1.0);
            }
        }
        let n = c.norm();
        if n > 1e-10 * row.norm().max(f64::MIN_POSITIVE) {
            ortho.push(c / n);
            kept_rows.push(i);
        }
    }
    DMatrix::from_fn(kept_rows.len(), e.ncols(), |r, c| e[(kept_rows[r], c)])
}

struct CompiledReaction<T> {
    reactants: Vec<(usize, i32)>,
    products: Vec<(usize, i32)>,
    net: Vec<(usize, T)>,
    third_body: bool,
    kf: T,
    kb: T,
}

fn mass_action_product<T: Real>(c: &DVector<T>, side: &[(usize, i32)]) -> T {
    side.iter().fold(T::one(), |acc, &(i, nu)| acc * c[i].powi(nu))
}

/// `d/dc_k prod_j c_j^{nu_j}`.
fn mass_action_gradient<T: Real>(c: &DVector<T>, side: &[(usize, i32)], k: usize) -> T {
    let mut out = T::zero();
    for (pos, &(i, nu)) in side.iter().enumerate() {
        if i != k {
            continue;
        }
        let mut term = lit::<T>(f64::from(nu)) * c[i].powi(nu - 1);
        for (other, &(j, mu)) in side.iter().enumerate() {
            if other != pos {
                term *= c[j].powi(mu);
            }
        }
        out += term;
    }
    out
}

/// Compiles a mechanism into its isothermal mass-action vector field.
///
/// State is the species concentration vector in mol/cm3. Third-body
/// reactions are multiplied by `[M] = sum_j c_j` (unit efficiencies).
pub fn compile_mechanism<T: Real>(mech: &Mechanism) -> ModelSpec<T> {
    let n = mech.species.len();
    let ks = mech.rate_constants();
    let compiled: Vec<CompiledReaction<T>> = mech
        .reactions
        .iter()
        .zip(ks)
        .map(|(r, (kf, kb))| {
            let mut net = vec![0i64; n];
            for &(i, nu) in &r.reactants {
                net[i] -= i64::from(nu);
            }
            for &(i, nu) in &r.products {
                net[i] += i64::from(nu);
            }
            let conv = |side: &[(usize, u32)]| -> Vec<(usize, i32)> {
                side.iter().map(|&(i, nu)| (i, nu as i32)).collect()
            };
            CompiledReaction {
                reactants: conv(&r.reactants),
                products: conv(&r.products),
                net: net
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0)
                    .map(|(i, &v)| (i, lit::<T>(v as f64)))
                    .collect(),
                third_body: r.third_body,
                kf: lit(kf),
                kb: lit(kb.unwrap_or(0.0)),
            }
        })
        .collect();
    let compiled = std::sync::Arc::new(compiled);

    let cf = compiled.clone();
    let field = move |c: &DVector<T>| {
        let m: T = c.sum();
        let mut out = DVector::zeros(c.len());
        for r in cf.iter() {
            let mut rate = r.kf * mass_action_product(c, &r.reactants);
            if r.kb != T::zero() {
                rate -= r.kb * mass_action_product(c, &r.products);
            }
            if r.third_body {
                rate *= m;
            }
            for &(i, nu) in &r.net {
                out[i] += nu * rate;
            }
        }
        out
    };
    let cj = compiled;
    let jacobian = move |c: &DVector<T>| {
        let n = c.len();
        let m: T = c.sum();
        let mut jac = DMatrix::zeros(n, n);
        for r in cj.iter() {
            let base = if r.third_body {
                let mut b = r.kf * mass_action_product(c, &r.reactants);
                if r.kb != T::zero() {
                    b -= r.kb * mass_action_product(c, &r.products);
                }
                b
            } else {
                T::zero()
            };
            for k in 0..n {
                let mut d = r.kf * mass_action_gradient(c, &r.reactants, k);
                if r.kb != T::zero() {
                    d -= r.kb * mass_action_gradient(c, &r.products, k);
                }
                if r.third_body {
                    d = d * m + base;
                }
                if d == T::zero() {
                    continue;
                }
                for &(i, nu) in &r.net {
                    jac[(i, k)] += nu * d;
                }
            }
        }
        jac
    };
    let rows = conserved_subspace(mech).map(|x| lit::<T>(x));
    ModelSpec::new(
        format!("mechanism({} species, {} reactions, T={} K)", n, mech.reactions.len(), mech.temperature),
        n,
        field,
        jacobian,
    )
    // Concentrations may undershoot zero by integration round-off only.
    .with_guard(|c: &DVector<T>| {
        let total = c.iter().fold(T::zero(), |a, x| a + x.abs());
        c.iter().all(|&x| x >= -lit::<T>(1e-8) * total)
    })
    .with_conservation(rows)
    .with_coordinate_names(mech.species_names())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    const BUNDLED: &str = HYDROGEN_MECHANISM;

    fn two_species(reactions: &str) -> String {
        format!(
            r#"{{"units": {{"A_units": "cm3/mol/s", "Ea_units": "kJ/mol", "conc": "mol/cm3"}},
                "temperature_K": 1000.0,
                "species": [{{"name": "A", "composition": {{"C": 1}}}},
                            {{"name": "B", "composition": {{"C": 1}}}}],
                "reactions": [{reactions}]}}"#
        )
    }

    #[test]
    fn unit_mass_action() {
        let text = two_species(
            r#"{"reactants": {"A": 1}, "products": {"B": 1}, "forward": {"A": 1.0, "b": 0.0, "Ea": 0.0}}"#,
        );
        let mech = Mechanism::from_json_str(&text).unwrap();
        let model = compile_mechanism::<f64>(&mech);
        assert_eq!(model.field(&dvector![1.0, 0.0]), dvector![-1.0, 1.0]);
    }

    #[test]
    fn reversible_and_third_body_jacobian() {
        let text = two_species(
            r#"{"reactants": {"A": 2}, "products": {"B": 2}, "third_body": true,
                "forward": {"A": 3.0, "b": 0.5, "Ea": 10.0}, "reverse": {"A": 2.0, "b": 0.0, "Ea": 5.0}}"#,
        );
        let mech = Mechanism::from_json_str(&text).unwrap();
        let model = compile_mechanism::<f64>(&mech);
        for p in [dvector![0.3, 0.7], dvector![1.2, 0.1]] {
            assert!(model.jacobian_fd_error(&p) < 1e-7);
        }
    }

    #[test]
    fn rejects_unbalanced_reactions_naming_the_element() {
        let text = r#"{"units": {"A_units": "x", "Ea_units": "kJ/mol", "conc": "mol/cm3"},
            "temperature_K": 1000.0,
            "species": [{"name": "H2", "composition": {"H": 2}},
                        {"name": "H", "composition": {"H": 1}}],
            "reactions": [{"reactants": {"H2": 1}, "products": {"H": 1},
                           "forward": {"A": 1.0, "b": 0.0, "Ea": 0.0}}]}"#;
        match Mechanism::from_json_str(text) {
            Err(Error::MechanismValidation(msgs)) => {
                assert_eq!(msgs.len(), 1);
                assert!(msgs[0].contains("element 'H'"), "{msgs:?}");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_unknown_species_and_nonpositive_a() {
        let text = two_species(
            r#"{"reactants": {"Z": 1}, "products": {"B": 1}, "forward": {"A": 0.0, "b": 0.0, "Ea": 0.0}}"#,
        );
        let Err(Error::MechanismValidation(msgs)) = Mechanism::from_json_str(&text) else {
            panic!("expected validation failure");
        };
        assert!(msgs.iter().any(|m| m.contains("unknown species 'Z'")));
        assert!(msgs.iter().any(|m| m.contains("A must be positive")));
    }

    #[test]
    fn rejects_fractional_stoichiometry() {
        let text = two_species(
            r#"{"reactants": {"A": 0.5}, "products": {"B": 0.5}, "forward": {"A": 1.0, "b": 0.0, "Ea": 0.0}}"#,
        );
        assert!(matches!(Mechanism::from_json_str(&text), Err(Error::MechanismValidation(_))));
    }

    #[test]
    fn hydrogen_hydrogen_atom_conservation_row() {
        let text = r#"{"units": {"A_units": "x", "Ea_units": "kJ/mol", "conc": "mol/cm3"},
            "temperature_K": 1000.0,
            "species": [{"name": "H2", "composition": {"H": 2}}, {"name": "H", "composition": {"H": 1}}],
            "reactions": [{"reactants": {"H2": 1}, "products": {"H": 2},
                           "forward": {"A": 1.0, "b": 0.0, "Ea": 0.0}}]}"#;
        let mech = Mechanism::from_json_str(text).unwrap();
        assert_eq!(conserved_subspace(&mech), DMatrix::from_row_slice(1, 2, &[2.0, 1.0]));
    }

    #[test]
    fn bundled_mechanism_loads_with_rank_two_conservation() {
        let mech = Mechanism::from_json_str(BUNDLED).unwrap();
        assert_eq!(mech.reactions.len(), 6);
        assert_eq!(mech.species_names(), vec!["H2", "O", "H", "OH", "H2O"]);
        let rows = conserved_subspace(&mech);
        assert_eq!(rows.nrows(), 2);
        assert_eq!(
            rows,
            DMatrix::from_row_slice(2, 5, &[2.0, 0.0, 1.0, 1.0, 2.0, 0.0, 1.0, 0.0, 1.0, 1.0])
        );
    }

    #[test]
    fn bundled_mechanism_rate_constant_matches_hand_evaluation() {
        let mech = Mechanism::from_json_str(BUNDLED).unwrap().with_temperature(3000.0).unwrap();
        let kf = mech.rate_constants()[0].0;
        // ln k = ln A + b ln T - Ea/(R T), evaluated independently.
        let hand = (5.08e4f64.ln() + 2.7 * 3000f64.ln() - 26.317 / (8.314462618e-3 * 3000.0)).exp();
        assert!(((kf - hand) / hand).abs() < 1e-12, "{kf} vs {hand}");
    }

    #[test]
    fn bundled_mechanism_field_conserves_atoms_and_jacobian_matches() {
        let mech = Mechanism::from_json_str(BUNDLED).unwrap();
        let model = compile_mechanism::<f64>(&mech);
        let rows = mech.composition_matrix();
        let c = dvector![1.0e-6, 0.4e-6, 0.5e-6, 0.3e-6, 1.5e-6];
        let f = model.field(&c);
        let scale = f.amax();
        assert!(scale > 0.0);
        assert!((&rows * &f).amax() <= 1e-12 * scale);
        assert!(model.jacobian_fd_error(&c) < 1e-5);
    }
}
