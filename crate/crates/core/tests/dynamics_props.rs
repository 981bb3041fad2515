use std::sync::OnceLock;

use poisson_tori::chart::{angle_of, Chart};
use poisson_tori::flows::{flow_by_index, joint_flow, FlowConfig};
use poisson_tori::linalg;
use poisson_tori::systems::{builtin, SystemSpec};
use poisson_tori::torus::{continue_lattice, refine_period, seed_lattice, GridSpec};
use proptest::prelude::*;

fn cfg() -> FlowConfig {
    FlowConfig::default()
}

fn point_in(spec: &SystemSpec) -> impl Strategy<Value = Vec<f64>> {
    let b = spec.domain_box.clone();
    (0..spec.n())
        .map(|k| b.lo[k] * 0.8..b.hi[k] * 0.8)
        .collect::<Vec<_>>()
}

fn oscillator_chart() -> &'static (SystemSpec, Chart) {
    static CHART: OnceLock<(SystemSpec, Chart)> = OnceLock::new();
    CHART.get_or_init(|| {
        let spec = builtin("oscillator2d").unwrap();
        let seed = seed_lattice(&spec, &spec.seed, &cfg()).unwrap();
        let grid = GridSpec::around(&[0.5, 0.5], &[0.02, 0.02], 5);
        let field = continue_lattice(&spec, &grid, &seed, &cfg()).unwrap();
        let chart = Chart::build(&spec, field, &cfg()).unwrap();
        (spec, chart)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn so3_flow_conserves_energy_and_casimir(x in point_in(&builtin("so3_rigid_body").unwrap()), t in -5.0f64..5.0) {
        let spec = builtin("so3_rigid_body").unwrap();
        let res = flow_by_index(&spec, 0, &x, t, &cfg()).unwrap();
        prop_assert!(res.drift < 1e-8, "drift {}", res.drift);
    }

    #[test]
    fn isotropic_flows_commute(x in point_in(&builtin("isotropic2d_nc").unwrap()), s in -2.0f64..2.0, t in -2.0f64..2.0) {
        let spec = builtin("isotropic2d_nc").unwrap();
        // H and L commute, so their flows do
        let a = flow_by_index(&spec, 1, &flow_by_index(&spec, 0, &x, s, &cfg()).unwrap().point, t, &cfg()).unwrap().point;
        let b = flow_by_index(&spec, 0, &flow_by_index(&spec, 1, &x, t, &cfg()).unwrap().point, s, &cfg()).unwrap().point;
        prop_assert!(linalg::dist(&a, &b) < 1e-8);
    }

    #[test]
    fn flows_compose_and_reverse(x in point_in(&builtin("oscillator2d").unwrap()), s in -3.0f64..3.0, t in -3.0f64..3.0) {
        let spec = builtin("oscillator2d").unwrap();
        let joint = joint_flow(&spec, &[s, t], &x, &cfg()).unwrap().point;
        let split = flow_by_index(&spec, 1, &flow_by_index(&spec, 0, &x, s, &cfg()).unwrap().point, t, &cfg()).unwrap().point;
        prop_assert!(linalg::dist(&joint, &split) < 1e-8);
        let back = joint_flow(&spec, &[-s, -t], &joint, &cfg()).unwrap().point;
        prop_assert!(linalg::dist(&back, &x) < 1e-8);
        let whole = flow_by_index(&spec, 0, &x, s + t, &cfg()).unwrap().point;
        let parts = flow_by_index(&spec, 0, &flow_by_index(&spec, 0, &x, s, &cfg()).unwrap().point, t, &cfg()).unwrap().point;
        prop_assert!(linalg::dist(&whole, &parts) < 1e-8);
    }

    #[test]
    fn harmonic_period_is_two_pi_everywhere(r in 0.3f64..1.8, phase in 0.0f64..6.28, guess in 5.8f64..6.8) {
        let spec = builtin("harmonic1d").unwrap();
        let m = [r * phase.cos(), r * phase.sin()];
        let l = refine_period(&spec, &m, &[guess], &cfg()).unwrap();
        prop_assert!((l.period[0] - 2.0 * std::f64::consts::PI).abs() < 1e-8);
        // refining a refined period changes nothing
        let again = refine_period(&spec, &m, &l.period, &cfg()).unwrap();
        prop_assert!((again.period[0] - l.period[0]).abs() < 1e-10);
    }

    #[test]
    fn angles_round_trip(t1 in 0.0f64..1.0, t2 in 0.0f64..1.0, k in 0usize..25) {
        let (spec, chart) = oscillator_chart();
        let lambda = chart.field.lambda_node(k);
        let t: Vec<f64> = (0..2).map(|j| t1 * lambda[(0, j)] + t2 * lambda[(1, j)]).collect();
        let m = joint_flow(spec, &t, &chart.section[k], &cfg()).unwrap().point;
        let back = angle_of(spec, chart, &m).unwrap();
        for (a, b) in [t1, t2].iter().zip(&back) {
            let d = (a - b).rem_euclid(1.0);
            prop_assert!(d.min(1.0 - d) < 1e-6, "{:?} vs {:?}", (t1, t2), back);
        }
    }

    #[test]
    fn actions_depend_only_on_the_fiber(k in 0usize..25, t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let (spec, chart) = oscillator_chart();
        let lambda = chart.field.lambda_node(k);
        let t: Vec<f64> = (0..2).map(|j| t1 * lambda[(0, j)] + t2 * lambda[(1, j)]).collect();
        let m = joint_flow(spec, &t, &chart.section[k], &cfg()).unwrap().point;
        let p = chart.actions_of(spec, &m).unwrap();
        for (a, b) in p.iter().zip(&chart.actions.values[k]) {
            prop_assert!((a - b).abs() < 1e-8);
        }
    }
}
