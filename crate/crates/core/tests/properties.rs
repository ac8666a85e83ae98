use std::f64::consts::PI;

use proptest::prelude::*;

use conormal_lab::charts::{make_model, wrap_delta, ModelName, ModelParams, PhasePoint};
use conormal_lab::conormal::SigmaSpec;
use conormal_lab::flow::{homogeneity_check, integrate_jet};
use conormal_lab::kuznecov::torus_series;
use conormal_lab::linalg::symplecticity_defect;
use conormal_lab::scenarios::{builtin, list_builtin, Scenario, Threshold};

fn model() -> impl Strategy<Value = ModelName> {
    prop::sample::select(ModelName::ALL.to_vec())
}

/// Point in the central part of every chart: `x₂` scaled into the latitude or tube band.
fn start(name: ModelName, u: f64, v: f64, a: f64) -> PhasePoint {
    let band = match name {
        ModelName::FermiSegment => 0.5 * ModelParams::default().r_tube,
        ModelName::RoundSphere | ModelName::HalfTurnQuotient => 0.5,
        _ => PI,
    };
    PhasePoint::new(vec![u, v * band], vec![a.cos(), a.sin()])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn symbol_is_positive_and_quadratic(name in model(), u in 0.0..1.0f64, v in -1.0..1.0f64, a in 0.0..2.0 * PI, c in 0.1..10.0f64) {
        let chart = make_model(name, &ModelParams::default()).unwrap().chart;
        let p = start(name, u, v, a);
        let e = chart.symbol(&p).unwrap();
        prop_assert!(e > 0.0);
        let scaled = chart.symbol(&p.scale_xi(c)).unwrap();
        prop_assert!((scaled - c * c * e).abs() <= 1e-12 * scaled.max(1.0));
        prop_assert_eq!(chart.symbol(&p.scale_xi(0.0)).unwrap(), 0.0);
    }

    #[test]
    fn flow_conserves_symbol_and_form(name in model(), u in 0.0..1.0f64, v in -1.0..1.0f64, a in 0.0..2.0 * PI) {
        let chart = make_model(name, &ModelParams::default()).unwrap().chart;
        let p = start(name, u, v, a);
        match integrate_jet(&chart, &p, 0.2, 1e-11) {
            Ok(jet) => {
                prop_assert!(jet.energy_drift <= 1e-9);
                prop_assert!(symplecticity_defect(&jet.jacobian) <= 1e-7);
            }
            Err(e) => prop_assert!(matches!(e, conormal_lab::error::LabError::ChartExit { .. }), "{e}"),
        }
    }

    #[test]
    fn flow_is_homogeneous(u in 0.0..6.0f64, v in -0.5..0.5f64, a in 0.0..2.0 * PI, c in 0.5..2.0f64) {
        let chart = make_model(ModelName::RoundSphere, &ModelParams::default()).unwrap().chart;
        let p = PhasePoint::new(vec![u, v], vec![0.3 * a.cos(), 0.3 * a.sin()]);
        prop_assert!(homogeneity_check(&chart, &p, c, 0.5).unwrap() <= 1e-8);
    }

    #[test]
    fn wrap_delta_is_a_representative(d in -100.0..100.0f64, period in 0.5..10.0f64) {
        let w = wrap_delta(d, period);
        prop_assert!((-0.5 * period..0.5 * period + 1e-12).contains(&w));
        let k = (d - w) / period;
        prop_assert!((k - k.round()).abs() < 1e-9);
    }

    #[test]
    fn threshold_is_a_closed_interval(v in -10.0..10.0f64, lo in -5.0..0.0f64, width in 0.0..5.0f64) {
        let t = Threshold { metric: "m".into(), min: Some(lo), max: Some(lo + width) };
        prop_assert_eq!(t.accepts(v), lo <= v && v <= lo + width);
        prop_assert!(!t.accepts(f64::NAN));
    }

    #[test]
    fn torus_count_is_monotone_integer(value in 0.0..2.0 * PI, lmax in 1.0..40.0f64) {
        let p = 2.0 * PI;
        let s = torus_series(&[p, p], &SigmaSpec::TorusLine { value, period: p, sheet_period: p }, lmax).unwrap();
        let mut last = 0.0;
        for k in 0..=64 {
            let n = s.count(lmax * k as f64 / 64.0);
            prop_assert!(n + 1e-9 >= last);
            prop_assert!((n - n.round()).abs() < 1e-8);
            last = n;
        }
    }

    #[test]
    fn scenario_toml_round_trip(idx in 0..16usize, seed in any::<u64>()) {
        let names = list_builtin();
        let mut s = builtin(names[idx % names.len()]).unwrap();
        s.seed = seed;
        let back = Scenario::from_toml(&s.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back.seed, seed);
        prop_assert_eq!(back.config_hash().unwrap(), s.config_hash().unwrap());
    }
}
