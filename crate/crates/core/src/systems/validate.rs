use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Kind, SystemError, SystemSpec};
use crate::expr::{certify_zero, Expr};
use crate::geometry::{self, hamiltonian_vector_field, poisson_bracket, DEFAULT_RANK_TOL};
use crate::linalg;
use crate::par;

/// Relative singular-value tolerance for independence of `dF` and of the fields.
pub const INDEPENDENCE_TOL: f64 = 1e-8;
const SAMPLE_SEED: u64 = 0x5eed_0002;

/// Outcome of one integrability condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub condition: String,
    pub passed: bool,
    /// Worst residual for sampled conditions; smallest normalized singular
    /// value for rank conditions.
    pub residual: f64,
    pub witness: Vec<f64>,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub kind: Kind,
    pub verdicts: Vec<Verdict>,
    pub passed: bool,
}

impl ValidationReport {
    fn new(kind: Kind, verdicts: Vec<Verdict>) -> ValidationReport {
        let passed = verdicts.iter().all(|v| v.passed);
        ValidationReport { kind, verdicts, passed }
    }

    pub fn verdict(&self, condition: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.condition == condition)
    }

    pub fn failed(&self) -> Vec<&str> {
        self.verdicts.iter().filter(|v| !v.passed).map(|v| v.condition.as_str()).collect()
    }
}

/// Largest `|e|` over the points, with the point where it occurs.
/// Points where `e` is undefined are skipped.
fn worst_abs(exprs: &[Expr], points: &[Vec<f64>]) -> (f64, Option<Vec<f64>>) {
    let per_point = par::map_slice(points, |m| {
        exprs
            .iter()
            .filter_map(|e| e.evaluate(m).ok())
            .fold(0.0_f64, |a, v| a.max(v.abs()))
    });
    let mut best = (0.0, None);
    for (v, m) in per_point.into_iter().zip(points) {
        if best.1.is_none() || v > best.0 {
            best = (v, Some(m.clone()));
        }
    }
    best
}

fn bracket_verdict(spec: &SystemSpec, pairs: &[(usize, usize)], points: &[Vec<f64>], tol: f64) -> Verdict {
    let box_ = &spec.domain_box;
    let mut brackets = Vec::with_capacity(pairs.len());
    let mut symbolic = 0;
    for &(i, j) in pairs {
        let b = poisson_bracket(&spec.structure, &spec.functions[i].expr, &spec.functions[j].expr)
            .expect("arity checked at construction");
        if certify_zero(&b, &box_.lo, &box_.hi, SAMPLE_SEED).symbolic {
            symbolic += 1;
        }
        brackets.push(b);
    }
    let (residual, witness) = worst_abs(&brackets, points);
    let all_symbolic = symbolic == pairs.len();
    Verdict {
        condition: "involution".into(),
        passed: all_symbolic || residual < tol,
        residual: if all_symbolic { 0.0 } else { residual },
        witness: witness.unwrap_or_else(|| spec.seed.clone()),
        detail: format!("{symbolic}/{} brackets fold to zero symbolically", pairs.len()),
    }
}

/// Rank of an `rows × n` matrix against an expected value.
fn rank_verdict(condition: &str, a: Result<DMatrix<f64>, crate::expr::EvalError>, expected: usize, at: &[f64]) -> Verdict {
    match a {
        Err(e) => Verdict {
            condition: condition.into(),
            passed: false,
            residual: f64::NAN,
            witness: at.to_vec(),
            detail: e.to_string(),
        },
        Ok(a) => {
            let (rank, gap, svals) = linalg::rank_with_gap(&a, INDEPENDENCE_TOL);
            let smax = svals.first().copied().unwrap_or(0.0);
            let residual = if expected == 0 {
                0.0
            } else if smax > 0.0 {
                svals.get(expected - 1).copied().unwrap_or(0.0) / smax
            } else {
                0.0
            };
            Verdict {
                condition: condition.into(),
                passed: rank == expected,
                residual,
                witness: at.to_vec(),
                detail: format!("rank {rank}, expected {expected}, gap {gap:.3e}"),
            }
        }
    }
}

fn poisson_rank_verdict(spec: &SystemSpec) -> Verdict {
    let expected = 2 * spec.r();
    match geometry::rank_at(&spec.structure, &spec.seed, DEFAULT_RANK_TOL) {
        Ok(rep) => {
            let smax = rep.singular_values.first().copied().unwrap_or(0.0);
            let kept = rep.singular_values.get(expected.saturating_sub(1)).copied().unwrap_or(0.0);
            Verdict {
                condition: "poisson_rank".into(),
                passed: rep.rank == expected,
                residual: if smax > 0.0 { kept / smax } else { 0.0 },
                witness: spec.seed.clone(),
                detail: format!("rank {}, expected {expected}, gap {:.3e}", rep.rank, rep.gap),
            }
        }
        Err(e) => Verdict {
            condition: "poisson_rank".into(),
            passed: false,
            residual: f64::NAN,
            witness: spec.seed.clone(),
            detail: e.to_string(),
        },
    }
}

fn seed_verdicts(spec: &SystemSpec) -> Vec<Verdict> {
    let independence = rank_verdict("independence", spec.jacobian_at(&spec.seed), spec.s(), &spec.seed);
    let fields = rank_verdict(
        "hamiltonian_independence",
        spec.action_fields_at(&spec.seed).map(|m| m.transpose()),
        spec.r(),
        &spec.seed,
    );
    let regular = Verdict {
        condition: "regular_seed".into(),
        passed: independence.passed && fields.passed,
        residual: independence.residual.min(fields.residual),
        witness: spec.seed.clone(),
        detail: "dF of full rank and the first r fields independent at the seed".into(),
    };
    vec![independence, fields, regular]
}

/// Check the commutative integrability conditions.
pub fn validate_commutative(spec: &SystemSpec, n_samples: usize, tol: f64) -> Result<ValidationReport, SystemError> {
    if spec.kind != Kind::Commutative {
        return Err(SystemError::KindMismatch {
            expected: Kind::Commutative,
            got: spec.kind,
        });
    }
    let points = spec.domain_box.sample(n_samples, SAMPLE_SEED);
    let s = spec.s();
    let pairs: Vec<_> = (0..s).flat_map(|i| (i + 1..s).map(move |j| (i, j))).collect();
    let mut verdicts = vec![bracket_verdict(spec, &pairs, &points, tol)];
    verdicts.extend(seed_verdicts(spec));
    verdicts.push(poisson_rank_verdict(spec));
    verdicts.push(transverse_verdict(spec, &points, tol));
    Ok(ValidationReport::new(Kind::Commutative, verdicts))
}

/// Declared transverse functions must be Casimirs: `Π·dz = X_z = 0`.
fn transverse_verdict(spec: &SystemSpec, points: &[Vec<f64>], tol: f64) -> Verdict {
    let box_ = &spec.domain_box;
    let mut comps = Vec::new();
    let mut symbolic = true;
    for k in spec.transverse_indices() {
        let x = hamiltonian_vector_field(&spec.structure, &spec.functions[k].expr).expect("arity checked");
        for c in &x.components {
            symbolic &= certify_zero(c, &box_.lo, &box_.hi, SAMPLE_SEED).symbolic;
        }
        comps.extend(x.components);
    }
    let (residual, witness) = worst_abs(&comps, points);
    Verdict {
        condition: "transverse_casimir".into(),
        passed: symbolic || residual < tol,
        residual: if symbolic { 0.0 } else { residual },
        witness: witness.unwrap_or_else(|| spec.seed.clone()),
        detail: format!("{} declared transverse functions", spec.transverse.len()),
    }
}

/// Check the non-commutative integrability conditions and the polarity
/// `(span{df_1..df_r})^⊥Π = span{df_1..df_s}` at sampled regular points.
pub fn validate_noncommutative(spec: &SystemSpec, n_samples: usize, tol: f64) -> Result<ValidationReport, SystemError> {
    if spec.kind != Kind::Noncommutative {
        return Err(SystemError::KindMismatch {
            expected: Kind::Noncommutative,
            got: spec.kind,
        });
    }
    let points = spec.domain_box.sample(n_samples, SAMPLE_SEED);
    let (r, s) = (spec.r(), spec.s());
    let pairs: Vec<_> = (0..r).flat_map(|i| (i + 1..s).map(move |j| (i, j))).collect();
    let mut verdicts = seed_verdicts(spec);
    verdicts.insert(1, bracket_verdict(spec, &pairs, &points, tol));
    verdicts.push(Verdict {
        condition: "dimension".into(),
        passed: r + s == spec.n(),
        residual: (r + s).abs_diff(spec.n()) as f64,
        witness: spec.seed.clone(),
        detail: format!("r + s = {}, n = {}", r + s, spec.n()),
    });
    verdicts.extend(polarity_verdicts(spec, n_samples, tol));
    Ok(ValidationReport::new(Kind::Noncommutative, verdicts))
}

/// Sampled points of the domain box where `dF` has rank `s` and the first
/// `r` fields are independent.
pub(crate) fn regular_points(spec: &SystemSpec, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let candidates = spec.domain_box.sample(count * 20, seed);
    let keep = par::map_slice(&candidates, |m| {
        let ok = spec
            .jacobian_at(m)
            .map(|j| linalg::rank_with_gap(&j, INDEPENDENCE_TOL).0 == spec.s())
            .unwrap_or(false)
            && spec
                .action_fields_at(m)
                .map(|x| linalg::rank_with_gap(&x, INDEPENDENCE_TOL).0 == spec.r())
                .unwrap_or(false);
        ok
    });
    candidates
        .into_iter()
        .zip(keep)
        .filter_map(|(m, ok)| ok.then_some(m))
        .take(count)
        .collect()
}

fn polarity_verdicts(spec: &SystemSpec, n_samples: usize, tol: f64) -> Vec<Verdict> {
    let points = regular_points(spec, n_samples.max(1), SAMPLE_SEED ^ 0x9e37);
    let (r, n) = (spec.r(), spec.n());
    let per_point = par::map_slice(&points, |m| -> Option<(f64, f64)> {
        let b = spec.structure.matrix_at(m).ok()?;
        let j = spec.jacobian_at(m).ok()?;
        let row = |i: usize| (0..n).map(|k| j[(i, k)]).collect::<Vec<f64>>();
        let d_r: Vec<Vec<f64>> = (0..r).map(row).collect();
        let polar = geometry::polar_subspace(&b, &d_r);
        let span_s = linalg::column_basis(&j.transpose(), INDEPENDENCE_TOL);
        let duality = linalg::subspace_distance(&polar, &span_s);
        // the double polar must contain span{df_1..df_r}
        let cols: Vec<Vec<f64>> = (0..polar.ncols()).map(|c| polar.column(c).iter().copied().collect()).collect();
        let double = geometry::polar_subspace(&b, &cols);
        let mut worst: f64 = 0.0;
        for v in &d_r {
            let v = DVector::from_column_slice(v);
            let proj = &double * (double.transpose() * &v);
            worst = worst.max((&v - proj).norm() / v.norm().max(f64::MIN_POSITIVE));
        }
        Some((duality, worst))
    });
    let mut duality = (0.0_f64, spec.seed.clone(), 0usize);
    let mut double = (0.0_f64, spec.seed.clone());
    let mut failures = 0;
    for (res, m) in per_point.into_iter().zip(&points) {
        match res {
            Some((d, w)) => {
                duality.2 += 1;
                if d >= duality.0 {
                    duality = (d, m.clone(), duality.2);
                }
                if w >= double.0 {
                    double = (w, m.clone());
                }
            }
            None => failures += 1,
        }
    }
    let checked = duality.2;
    let enough = checked > 0 && failures == 0;
    vec![
        Verdict {
            condition: "polarity".into(),
            passed: enough && duality.0 < tol,
            residual: duality.0,
            witness: duality.1,
            detail: format!("largest principal-angle sine over {checked} regular points"),
        },
        Verdict {
            condition: "double_polar".into(),
            passed: enough && double.0 < tol,
            residual: double.0,
            witness: double.1,
            detail: "relative distance of df_1..df_r from the polar of the polar".into(),
        },
    ]
}

/// `{g∘F, h∘F}` evaluated along a fiber: mean value and max deviation.
pub fn induced_base_bracket(
    spec: &SystemSpec,
    g: &Expr,
    h: &Expr,
    fiber_samples: &[Vec<f64>],
) -> Result<(f64, f64), SystemError> {
    if fiber_samples.len() < 2 {
        return Err(SystemError::TooFewSamples(fiber_samples.len()));
    }
    let b = poisson_bracket(&spec.structure, &spec.pull_back(g), &spec.pull_back(h))?;
    if b.is_zero() {
        return Ok((0.0, 0.0));
    }
    let values = fiber_samples
        .iter()
        .map(|m| b.evaluate(m))
        .collect::<Result<Vec<_>, _>>()?;
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let spread = values.iter().fold(0.0_f64, |a, v| a.max((v - mean).abs()));
    Ok((mean, spread))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CasBasicReport {
    pub passed: bool,
    pub worst_residual: f64,
    pub witness: Vec<f64>,
    /// Name of the `f_j` with the largest `|{g∘F, f_j}|`.
    pub worst_function: String,
    /// On pass: worst residual of `X_{g∘F} = Σ ψ_i X_{f_i}` over the samples.
    pub expansion_residual: Option<f64>,
    /// On pass: `ψ_1..ψ_r` at the seed point.
    pub coefficients_at_seed: Option<Vec<f64>>,
}

/// Test whether `g∘F` commutes with every `f_j`, and if so express its
/// Hamiltonian field through the first `r` fields.
pub fn is_cas_basic(spec: &SystemSpec, g: &Expr, n_samples: usize, tol: f64) -> Result<CasBasicReport, SystemError> {
    let gf = spec.pull_back(g);
    let brackets = spec
        .functions
        .iter()
        .map(|f| poisson_bracket(&spec.structure, &gf, &f.expr))
        .collect::<Result<Vec<_>, _>>()?;
    let points = spec.domain_box.sample(n_samples, SAMPLE_SEED ^ 0xca5);
    let mut worst = (0.0_f64, spec.seed.clone(), spec.functions[0].name.clone());
    for (k, b) in brackets.iter().enumerate() {
        let (res, at) = worst_abs(std::slice::from_ref(b), &points);
        if res > worst.0 {
            worst = (res, at.unwrap_or_else(|| spec.seed.clone()), spec.functions[k].name.clone());
        }
    }
    let passed = worst.0 < tol;
    let (mut expansion_residual, mut coefficients_at_seed) = (None, None);
    if passed {
        let xg = hamiltonian_vector_field(&spec.structure, &gf)?;
        let fit = |m: &[f64]| -> Result<(f64, Vec<f64>), SystemError> {
            let a = spec.action_fields_at(m)?;
            let b = DVector::from_vec(xg.evaluate(m)?);
            let psi = linalg::lstsq(&a, &b).unwrap_or_else(|| DVector::zeros(spec.r()));
            Ok(((&a * &psi - &b).norm(), psi.iter().copied().collect()))
        };
        let mut res: f64 = 0.0;
        for m in &points {
            if let Ok((e, _)) = fit(m) {
                res = res.max(e);
            }
        }
        expansion_residual = Some(res);
        coefficients_at_seed = Some(fit(&spec.seed)?.1);
    }
    Ok(CasBasicReport {
        passed,
        worst_residual: worst.0,
        witness: worst.1,
        worst_function: worst.2,
        expansion_residual,
        coefficients_at_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::builtin;

    #[test]
    fn harmonic_passes_symbolically() {
        let rep = validate_commutative(&builtin("harmonic1d").unwrap(), 50, 1e-9).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert_eq!(rep.verdict("involution").unwrap().residual, 0.0);
    }

    #[test]
    fn so3_passes_and_fails_at_origin() {
        let spec = builtin("so3_rigid_body").unwrap();
        let rep = validate_commutative(&spec, 100, 1e-9).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert_eq!(rep.verdict("involution").unwrap().residual, 0.0);
        assert!(rep.verdict("poisson_rank").unwrap().detail.starts_with("rank 2"));
        let origin = spec.with_seed(vec![0.0, 0.0, 0.0]).unwrap();
        let rep = validate_commutative(&origin, 100, 1e-9).unwrap();
        let rank = rep.verdict("poisson_rank").unwrap();
        assert!(!rank.passed);
        assert!(rank.detail.starts_with("rank 0"));
    }

    #[test]
    fn cjl_and_oscillator_pass() {
        for name in ["cjl_counterexample", "oscillator2d", "unitfreq1d"] {
            let rep = validate_commutative(&builtin(name).unwrap(), 50, 1e-9).unwrap();
            assert!(rep.passed, "{name}: {rep:?}");
        }
    }

    #[test]
    fn isotropic_noncommutative() {
        let spec = builtin("isotropic2d_nc").unwrap();
        let rep = validate_noncommutative(&spec, 40, 1e-8).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert_eq!(rep.verdict("involution").unwrap().residual, 0.0);
        let origin = spec.with_seed(vec![0.0; 4]).unwrap();
        let rep = validate_noncommutative(&origin, 10, 1e-8).unwrap();
        assert!(!rep.verdict("hamiltonian_independence").unwrap().passed);
    }

    #[test]
    fn kind_mismatch() {
        let spec = builtin("harmonic1d").unwrap();
        assert!(matches!(
            validate_noncommutative(&spec, 10, 1e-9),
            Err(SystemError::KindMismatch { .. })
        ));
    }

    #[test]
    fn base_bracket_trivial_cases() {
        let spec = builtin("harmonic1d").unwrap();
        let h = spec.parse_base("H").unwrap();
        let pts = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(induced_base_bracket(&spec, &h, &h, &pts).unwrap(), (0.0, 0.0));
        assert!(matches!(
            induced_base_bracket(&spec, &h, &h, &pts[..1]),
            Err(SystemError::TooFewSamples(1))
        ));
    }

    #[test]
    fn base_bracket_isotropic_on_flow_orbit() {
        let spec = builtin("isotropic2d_nc").unwrap();
        let (l, k) = (spec.parse_base("L").unwrap(), spec.parse_base("K").unwrap());
        // the H-flow rotates (q_i, p_i) by the same angle in both planes
        let m0 = [1.0, 0.2, 0.5, -0.3];
        let orbit: Vec<Vec<f64>> = (0..12)
            .map(|k| {
                let t = k as f64 * 0.5;
                let (c, s) = (t.cos(), t.sin());
                vec![
                    m0[0] * c + m0[1] * s,
                    m0[1] * c - m0[0] * s,
                    m0[2] * c + m0[3] * s,
                    m0[3] * c - m0[2] * s,
                ]
            })
            .collect();
        let (value, spread) = induced_base_bracket(&spec, &l, &k, &orbit).unwrap();
        let expected = 2.0 * (m0[0] * m0[2] + m0[1] * m0[3]);
        assert!((value - expected).abs() < 1e-12);
        assert!(spread < 1e-12);
    }

    #[test]
    fn cas_basic_examples() {
        let iso = builtin("isotropic2d_nc").unwrap();
        let rep = is_cas_basic(&iso, &iso.parse_base("H").unwrap(), 50, 1e-9).unwrap();
        assert!(rep.passed);
        assert!((rep.coefficients_at_seed.unwrap()[0] - 1.0).abs() < 1e-12);
        assert!(rep.expansion_residual.unwrap() < 1e-12);
        let rep = is_cas_basic(&iso, &iso.parse_base("L").unwrap(), 50, 1e-9).unwrap();
        assert!(!rep.passed);
        assert_eq!(rep.worst_function, "K");

        let so3 = builtin("so3_rigid_body").unwrap();
        let rep = is_cas_basic(&so3, &so3.parse_base("C").unwrap(), 50, 1e-9).unwrap();
        assert!(rep.passed);
        assert!(rep.coefficients_at_seed.unwrap()[0].abs() < 1e-12);
    }
}
