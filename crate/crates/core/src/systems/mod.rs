//! Integrable-system specifications: the document format, the built-in
//! fixtures, and the checks of the commutative and non-commutative
//! integrability conditions.

mod fixtures;
mod validate;

use std::sync::OnceLock;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{self, EvalError, Expr, ParseError};
use crate::geometry::{hamiltonian_vector_field, GeometryError, PoissonStructure, SampleBox, VectorFieldExpr};

pub use fixtures::{builtin, BUILTIN_NAMES};
pub use validate::{
    induced_base_bracket, is_cas_basic, validate_commutative, validate_noncommutative, CasBasicReport,
    ValidationReport, Verdict,
};

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("cannot parse `{field}`: {source}")]
    Parse {
        field: String,
        #[source]
        source: ParseError,
    },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("unknown built-in system `{0}`")]
    UnknownBuiltin(String),
    #[error("expected a {expected:?} system, got {got:?}")]
    KindMismatch { expected: Kind, got: Kind },
    #[error("need at least 2 fiber samples, got {0}")]
    TooFewSamples(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("malformed document: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Commutative,
    Noncommutative,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedFunction {
    pub name: String,
    pub expr: Expr,
}

/// Cached symbolic data derived from a spec.
#[derive(Debug, Default)]
struct Derived {
    gradients: OnceLock<Vec<Vec<Expr>>>,
    fields: OnceLock<Vec<VectorFieldExpr>>,
}

/// A Poisson structure together with a candidate integrable system `F`.
#[derive(Debug)]
pub struct SystemSpec {
    pub structure: PoissonStructure,
    pub functions: Vec<NamedFunction>,
    /// `r`: the first `r` functions generate the torus action.
    pub rank: usize,
    pub kind: Kind,
    pub transverse: Vec<String>,
    pub domain_box: SampleBox,
    pub seed: Vec<f64>,
    derived: Derived,
}

impl Clone for SystemSpec {
    fn clone(&self) -> Self {
        SystemSpec {
            structure: self.structure.clone(),
            functions: self.functions.clone(),
            rank: self.rank,
            kind: self.kind,
            transverse: self.transverse.clone(),
            domain_box: self.domain_box.clone(),
            seed: self.seed.clone(),
            derived: Derived::default(),
        }
    }
}

impl PartialEq for SystemSpec {
    fn eq(&self, o: &Self) -> bool {
        self.structure == o.structure
            && self.functions == o.functions
            && self.rank == o.rank
            && self.kind == o.kind
            && self.transverse == o.transverse
            && self.domain_box == o.domain_box
            && self.seed == o.seed
    }
}

impl SystemSpec {
    pub fn new(
        structure: PoissonStructure,
        functions: Vec<NamedFunction>,
        rank: usize,
        kind: Kind,
        transverse: Vec<String>,
        domain_box: SampleBox,
        seed: Vec<f64>,
    ) -> Result<SystemSpec, SystemError> {
        let spec = SystemSpec {
            structure,
            functions,
            rank,
            kind,
            transverse,
            domain_box,
            seed,
            derived: Derived::default(),
        };
        spec.check_invariants()?;
        Ok(spec)
    }

    fn check_invariants(&self) -> Result<(), SystemError> {
        let (n, r, s) = (self.n(), self.rank, self.s());
        if r + s != n {
            return Err(SystemError::Invariant(format!("r + s = {r} + {s} != n = {n}")));
        }
        if r == 0 {
            return Err(SystemError::Invariant("rank r must be positive".into()));
        }
        for (k, f) in self.functions.iter().enumerate() {
            if self.functions[..k].iter().any(|g| g.name == f.name) {
                return Err(SystemError::Invariant(format!("duplicate function name `{}`", f.name)));
            }
            if f.expr.arity() > n {
                return Err(SystemError::Invariant(format!("function `{}` uses undeclared coordinates", f.name)));
            }
        }
        for t in &self.transverse {
            match self.function_index(t) {
                None => return Err(SystemError::Invariant(format!("transverse name `{t}` is not a function"))),
                Some(k) if k < r => {
                    return Err(SystemError::Invariant(format!(
                        "transverse name `{t}` is one of the first r functions"
                    )))
                }
                _ => {}
            }
        }
        if self.transverse.len() != s - r {
            return Err(SystemError::Invariant(format!(
                "expected s - r = {} transverse names, got {}",
                s - r,
                self.transverse.len()
            )));
        }
        if self.domain_box.dim() != n || self.domain_box.hi.len() != n {
            return Err(SystemError::Invariant("domain box dimension differs from n".into()));
        }
        if self.seed.len() != n {
            return Err(SystemError::Invariant("seed point dimension differs from n".into()));
        }
        if !self.domain_box.contains(&self.seed) {
            return Err(SystemError::Invariant("seed point lies outside the domain box".into()));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.structure.dim()
    }

    pub fn s(&self) -> usize {
        self.functions.len()
    }

    pub fn r(&self) -> usize {
        self.rank
    }

    pub fn coords(&self) -> &[String] {
        self.structure.coords()
    }

    pub fn function_names(&self) -> Vec<String> {
        self.functions.iter().map(|f| f.name.clone()).collect()
    }

    pub fn function_index(&self, name: &str) -> Option<usize> {
        self.functions.iter().position(|f| f.name == name)
    }

    pub fn function_exprs(&self) -> Vec<Expr> {
        self.functions.iter().map(|f| f.expr.clone()).collect()
    }

    /// Indices of the transverse functions, in declared order.
    pub fn transverse_indices(&self) -> Vec<usize> {
        self.transverse.iter().filter_map(|t| self.function_index(t)).collect()
    }

    /// Return a copy with a different seed point (used by `--seed`).
    pub fn with_seed(&self, seed: Vec<f64>) -> Result<SystemSpec, SystemError> {
        let mut out = self.clone();
        out.seed = seed;
        if out.seed.len() != out.n() {
            return Err(SystemError::Invariant("seed point dimension differs from n".into()));
        }
        if !out.domain_box.contains(&out.seed) {
            // widen the box rather than reject a user-chosen seed
            for k in 0..out.n() {
                out.domain_box.lo[k] = out.domain_box.lo[k].min(out.seed[k]);
                out.domain_box.hi[k] = out.domain_box.hi[k].max(out.seed[k]);
            }
        }
        Ok(out)
    }

    pub fn eval_f(&self, m: &[f64]) -> Result<Vec<f64>, EvalError> {
        self.functions.iter().map(|f| f.expr.evaluate(m)).collect()
    }

    /// Symbolic gradients `∂_k f_i`.
    pub fn gradients(&self) -> &[Vec<Expr>] {
        self.derived.gradients.get_or_init(|| {
            self.functions
                .iter()
                .map(|f| (0..self.n()).map(|k| f.expr.differentiate(k).canonicalize()).collect())
                .collect()
        })
    }

    /// Hamiltonian vector fields of all `s` functions.
    pub fn fields(&self) -> &[VectorFieldExpr] {
        self.derived.fields.get_or_init(|| {
            self.functions
                .iter()
                .map(|f| hamiltonian_vector_field(&self.structure, &f.expr).expect("arity checked at construction"))
                .collect()
        })
    }

    /// `dF(m)` as an `s × n` matrix.
    pub fn jacobian_at(&self, m: &[f64]) -> Result<DMatrix<f64>, EvalError> {
        let grads = self.gradients();
        let mut j = DMatrix::zeros(self.s(), self.n());
        for (i, row) in grads.iter().enumerate() {
            for (k, g) in row.iter().enumerate() {
                j[(i, k)] = g.evaluate(m)?;
            }
        }
        Ok(j)
    }

    /// Columns `X_{f_1}(m) .. X_{f_r}(m)` as an `n × r` matrix.
    pub fn action_fields_at(&self, m: &[f64]) -> Result<DMatrix<f64>, EvalError> {
        let mut out = DMatrix::zeros(self.n(), self.r());
        for (j, x) in self.fields()[..self.r()].iter().enumerate() {
            for (i, c) in x.components.iter().enumerate() {
                out[(i, j)] = c.evaluate(m)?;
            }
        }
        Ok(out)
    }

    /// Compose an expression in the function names with `F`.
    pub fn pull_back(&self, g: &Expr) -> Expr {
        g.substitute(&self.function_exprs())
    }

    /// Parse an expression whose variables are the function (base) names.
    pub fn parse_base(&self, text: &str) -> Result<Expr, SystemError> {
        expr::parse(text, &self.function_names()).map_err(|source| SystemError::Parse {
            field: text.to_string(),
            source,
        })
    }

    pub fn parse_ambient(&self, text: &str) -> Result<Expr, SystemError> {
        expr::parse(text, self.coords()).map_err(|source| SystemError::Parse {
            field: text.to_string(),
            source,
        })
    }

    pub fn to_document(&self) -> SystemDocument {
        let names = self.coords();
        SystemDocument {
            dimension: self.n(),
            coordinates: names.to_vec(),
            poisson: self
                .structure
                .upper_entries()
                .into_iter()
                .map(|(i, j, e)| PoissonEntry {
                    i,
                    j,
                    expr: e.display(names).to_string(),
                })
                .collect(),
            functions: self
                .functions
                .iter()
                .map(|f| FunctionEntry {
                    name: f.name.clone(),
                    expr: f.expr.display(names).to_string(),
                })
                .collect(),
            rank: self.rank,
            kind: self.kind,
            transverse: self.transverse.clone(),
            domain_box: self.domain_box.clone(),
            seed: self.seed.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("document serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoissonEntry {
    pub i: usize,
    pub j: usize,
    pub expr: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionEntry {
    pub name: String,
    pub expr: String,
}

/// On-disk system description (JSON).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemDocument {
    pub dimension: usize,
    pub coordinates: Vec<String>,
    #[serde(default)]
    pub poisson: Vec<PoissonEntry>,
    pub functions: Vec<FunctionEntry>,
    pub rank: usize,
    pub kind: Kind,
    #[serde(default)]
    pub transverse: Vec<String>,
    pub domain_box: SampleBox,
    pub seed: Vec<f64>,
}

impl SystemDocument {
    pub fn into_spec(self) -> Result<SystemSpec, SystemError> {
        let n = self.dimension;
        if self.coordinates.len() != n {
            return Err(SystemError::Schema(format!(
                "dimension is {n} but {} coordinates are declared",
                self.coordinates.len()
            )));
        }
        for (k, c) in self.coordinates.iter().enumerate() {
            let valid = c.chars().next().is_some_and(|ch| ch.is_ascii_alphabetic() || ch == '_')
                && c.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_');
            if !valid || expr::Func::from_name(c).is_some() {
                return Err(SystemError::Schema(format!("invalid coordinate name `{c}`")));
            }
            if self.coordinates[..k].contains(c) {
                return Err(SystemError::Schema(format!("duplicate coordinate `{c}`")));
            }
        }
        if self.domain_box.lo.len() != n || self.domain_box.hi.len() != n {
            return Err(SystemError::Schema("domain_box lo/hi must have `dimension` entries".into()));
        }
        if self.seed.len() != n {
            return Err(SystemError::Schema("seed must have `dimension` entries".into()));
        }
        let mut entries = Vec::with_capacity(self.poisson.len());
        for (k, e) in self.poisson.iter().enumerate() {
            if e.i >= e.j || e.j >= n {
                return Err(SystemError::Schema(format!(
                    "poisson[{k}] needs 0 <= i < j < dimension, got ({}, {})",
                    e.i, e.j
                )));
            }
            if entries.iter().any(|(i, j, _)| *i == e.i && *j == e.j) {
                return Err(SystemError::Schema(format!("poisson entry ({}, {}) given twice", e.i, e.j)));
            }
            let parsed = expr::parse(&e.expr, &self.coordinates).map_err(|source| SystemError::Parse {
                field: format!("poisson[{k}].expr"),
                source,
            })?;
            entries.push((e.i, e.j, parsed));
        }
        let structure = PoissonStructure::new(self.coordinates.clone(), entries)?;
        let functions = self
            .functions
            .iter()
            .enumerate()
            .map(|(k, f)| {
                expr::parse(&f.expr, &self.coordinates)
                    .map(|expr| NamedFunction {
                        name: f.name.clone(),
                        expr,
                    })
                    .map_err(|source| SystemError::Parse {
                        field: format!("functions[{k}].expr"),
                        source,
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        SystemSpec::new(
            structure,
            functions,
            self.rank,
            self.kind,
            self.transverse,
            self.domain_box,
            self.seed,
        )
    }
}

/// Parse a JSON system document.
pub fn load_system(document: &str) -> Result<SystemSpec, SystemError> {
    let doc: SystemDocument = serde_json::from_str(document)?;
    doc.into_spec()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const HARMONIC_DOC: &str = r#"{
        "dimension": 2,
        "coordinates": ["q", "p"],
        "poisson": [{"i": 0, "j": 1, "expr": "1"}],
        "functions": [{"name": "H", "expr": "(q^2+p^2)/2"}],
        "rank": 1,
        "kind": "commutative",
        "transverse": [],
        "domain_box": {"lo": [-2, -2], "hi": [2, 2]},
        "seed": [1, 0]
    }"#;

    #[test]
    fn loads_harmonic_document() {
        let spec = load_system(HARMONIC_DOC).unwrap();
        assert_eq!((spec.n(), spec.r(), spec.s()), (2, 1, 1));
        assert_eq!(spec, builtin("harmonic1d").unwrap());
    }

    #[test]
    fn rejects_rank_dimension_mismatch() {
        let doc = r#"{
            "dimension": 3, "coordinates": ["x", "y", "z"],
            "poisson": [{"i": 0, "j": 1, "expr": "z"}],
            "functions": [{"name": "a", "expr": "x"}, {"name": "b", "expr": "y"}],
            "rank": 2, "kind": "commutative", "transverse": [],
            "domain_box": {"lo": [-1, -1, -1], "hi": [1, 1, 1]}, "seed": [0, 0, 0]
        }"#;
        assert!(matches!(load_system(doc), Err(SystemError::Invariant(_))));
    }

    #[test]
    fn schema_errors() {
        assert!(matches!(load_system("{"), Err(SystemError::Json(_))));
        let missing = HARMONIC_DOC.replace("\"rank\": 1,", "");
        assert!(matches!(load_system(&missing), Err(SystemError::Json(_))));
        let wrong_arity = HARMONIC_DOC.replace("\"seed\": [1, 0]", "\"seed\": [1, 0, 0]");
        assert!(matches!(load_system(&wrong_arity), Err(SystemError::Schema(_))));
        let lower = HARMONIC_DOC.replace("\"i\": 0, \"j\": 1", "\"i\": 1, \"j\": 0");
        assert!(matches!(load_system(&lower), Err(SystemError::Schema(_))));
    }

    #[test]
    fn parse_errors_carry_location() {
        let bad = HARMONIC_DOC.replace("(q^2+p^2)/2", "(q^2+p^2/2");
        match load_system(&bad) {
            Err(SystemError::Parse { field, source }) => {
                assert_eq!(field, "functions[0].expr");
                assert_eq!(source.offset(), 10);
            }
            other => panic!("{other:?}"),
        }
        let unknown = HARMONIC_DOC.replace("(q^2+p^2)/2", "w*q");
        assert!(matches!(load_system(&unknown), Err(SystemError::Parse { .. })));
    }

    #[test]
    fn seed_outside_box_is_rejected() {
        let bad = HARMONIC_DOC.replace("\"seed\": [1, 0]", "\"seed\": [3, 0]");
        assert!(matches!(load_system(&bad), Err(SystemError::Invariant(_))));
    }

    #[test]
    fn builtins_round_trip() {
        for name in BUILTIN_NAMES {
            let spec = builtin(name).unwrap();
            let back = load_system(&spec.to_json()).unwrap();
            assert_eq!(back, spec, "{name}");
        }
    }
}
