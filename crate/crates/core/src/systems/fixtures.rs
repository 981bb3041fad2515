//! Built-in systems. Each is written as a document so the loader and the
//! fixtures share one code path.

use crate::geometry::SampleBox;

use super::{FunctionEntry, Kind, PoissonEntry, SystemDocument, SystemError, SystemSpec};

pub const BUILTIN_NAMES: [&str; 6] = [
    "harmonic1d",
    "unitfreq1d",
    "oscillator2d",
    "so3_rigid_body",
    "cjl_counterexample",
    "isotropic2d_nc",
];

fn entry(i: usize, j: usize, expr: &str) -> PoissonEntry {
    PoissonEntry {
        i,
        j,
        expr: expr.into(),
    }
}

fn function(name: &str, expr: &str) -> FunctionEntry {
    FunctionEntry {
        name: name.into(),
        expr: expr.into(),
    }
}

fn strings(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn planar(h: &str) -> SystemDocument {
    SystemDocument {
        dimension: 2,
        coordinates: strings(&["q", "p"]),
        poisson: vec![entry(0, 1, "1")],
        functions: vec![function("H", h)],
        rank: 1,
        kind: Kind::Commutative,
        transverse: vec![],
        domain_box: SampleBox::cube(2, 2.0),
        seed: vec![1.0, 0.0],
    }
}

fn canonical4(functions: Vec<FunctionEntry>, rank: usize, kind: Kind, transverse: &[&str]) -> SystemDocument {
    SystemDocument {
        dimension: 4,
        coordinates: strings(&["q1", "p1", "q2", "p2"]),
        poisson: vec![entry(0, 1, "1"), entry(2, 3, "1")],
        functions,
        rank,
        kind,
        transverse: strings(transverse),
        domain_box: SampleBox::cube(4, 2.0),
        seed: vec![1.0, 0.0, 1.0, 0.0],
    }
}

fn document(name: &str) -> Option<SystemDocument> {
    Some(match name {
        "harmonic1d" => planar("(q^2+p^2)/2"),
        "unitfreq1d" => planar("3.141592653589793*(q^2+p^2)"),
        "oscillator2d" => canonical4(
            vec![function("H1", "(q1^2+p1^2)/2"), function("H2", "(q2^2+p2^2)/2")],
            2,
            Kind::Commutative,
            &[],
        ),
        "so3_rigid_body" => SystemDocument {
            dimension: 3,
            coordinates: strings(&["x", "y", "z"]),
            poisson: vec![entry(0, 1, "z"), entry(1, 2, "x"), entry(0, 2, "-y")],
            functions: vec![function("H", "x^2/2 + y^2/4 + z^2/6"), function("C", "x^2+y^2+z^2")],
            rank: 1,
            kind: Kind::Commutative,
            transverse: strings(&["C"]),
            // a window around the stable axis, away from the separatrices
            domain_box: SampleBox::new(vec![-0.4, -0.4, 0.8], vec![0.4, 0.4, 1.2]),
            seed: vec![0.1, 0.1, 1.0],
        },
        "cjl_counterexample" => SystemDocument {
            dimension: 4,
            coordinates: strings(&["f1", "f2", "g1", "g2"]),
            // {g1,f1} = 1, {g2,f2} = g2^2, {g1,f2} = g2, stored with i < j
            poisson: vec![entry(0, 2, "-1"), entry(1, 3, "-g2^2"), entry(1, 2, "-g2")],
            functions: vec![function("f1", "f1"), function("f2", "f2")],
            rank: 2,
            kind: Kind::Commutative,
            transverse: vec![],
            domain_box: SampleBox::cube(4, 1.0),
            seed: vec![0.0, 0.0, 0.0, 0.5],
        },
        "isotropic2d_nc" => {
            let mut doc = canonical4(
                vec![
                    function("H", "(q1^2+p1^2+q2^2+p2^2)/2"),
                    function("L", "q1*p2 - q2*p1"),
                    function("K", "(q1^2+p1^2-q2^2-p2^2)/2"),
                ],
                1,
                Kind::Noncommutative,
                &["L", "K"],
            );
            doc.domain_box = SampleBox::cube(4, 1.5);
            doc.seed = vec![1.0, 0.0, 0.5, 0.0];
            doc
        }
        _ => return None,
    })
}

/// Look up a built-in system by name.
pub fn builtin(name: &str) -> Result<SystemSpec, SystemError> {
    document(name)
        .ok_or_else(|| SystemError::UnknownBuiltin(name.to_string()))?
        .into_spec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse, Expr};

    #[test]
    fn all_builtins_load() {
        for name in BUILTIN_NAMES {
            let spec = builtin(name).unwrap();
            assert_eq!(spec.r() + spec.s(), spec.n(), "{name}");
        }
        assert!(matches!(builtin("pendulum"), Err(SystemError::UnknownBuiltin(_))));
    }

    #[test]
    fn cjl_structure() {
        let spec = builtin("cjl_counterexample").unwrap();
        assert_eq!(spec.n(), 4);
        let names = spec.coords().to_vec();
        let g2 = Expr::Var(3);
        // Π^{g2 f2} = χ(g2) = g2^2 and Π^{g1 f2} = ψ(g2) = g2
        assert_eq!(spec.structure.entry(3, 1).canonicalize(), Expr::Pow(Box::new(g2.clone()), 2.0));
        assert_eq!(spec.structure.entry(2, 1).canonicalize(), g2);
        assert_eq!(spec.structure.entry(2, 0).canonicalize(), Expr::one());
        assert_eq!(spec.functions[1].expr, parse("f2", &names).unwrap());
    }

    #[test]
    fn so3_shape() {
        let spec = builtin("so3_rigid_body").unwrap();
        assert_eq!((spec.n(), spec.r(), spec.s()), (3, 1, 2));
        assert_eq!(spec.transverse, vec!["C".to_string()]);
    }

    #[test]
    fn unitfreq_literal() {
        let spec = builtin("unitfreq1d").unwrap();
        let h = spec.functions[0].expr.evaluate(&[1.0, 0.0]).unwrap();
        assert_eq!(h, std::f64::consts::PI);
    }
}
