//! Builtin scenario configs. Thresholds are part of each config.

use super::Scenario;
use crate::error::{LabError, Result};

const BUILTIN: &[(&str, &str)] = &[
    (
        "flow_conservation",
        r#"
schema_version = 1
name = "flow_conservation"
claim = "the geodesic flow conserves the symbol and its Jacobian is symplectic"
seed = 11

[[pipeline]]
op = "flow_conservation"
starts = 100
horizon = 20.0
tol = 1e-10

[[thresholds]]
metric = "max_energy_drift"
max = 1e-9

[[thresholds]]
metric = "max_symplecticity_defect"
max = 1e-6

[[thresholds]]
metric = "min_accepted_starts"
min = 100
"#,
    ),
    (
        "pullback_correspondence",
        r#"
schema_version = 1
name = "pullback_correspondence"
claim = "the pulled-back symbol equals the symbol composed with the lifted diffeomorphism, and orbits correspond"
seed = 12

[model]
name = "round_sphere"

[[pipeline]]
op = "pullback_correspondence"
center = [0.5, 0.2]
r_inner = 0.3
r_outer = 0.7
params = [0.01, 0.02, 0.05, -0.03, 0.02, 0.04]
points = 1000
orbits = 20
horizon = 3.0

[[thresholds]]
metric = "symbol_error"
max = 1e-8

[[thresholds]]
metric = "orbit_error"
max = 1e-6

[[thresholds]]
metric = "orbits_compared"
min = 20
"#,
    ),
    (
        "diffeo_param_jacobian",
        r#"
schema_version = 1
name = "diffeo_param_jacobian"
claim = "the parameter Jacobian of the lifted diffeomorphism has full rank 2n off the zero section"
seed = 13

[model]
name = "flat_torus"

[[pipeline]]
op = "param_jacobian"
center = [1.0, 2.0]
r_inner = 0.5
r_outer = 1.0
points = 100
h = 1e-6

[[thresholds]]
metric = "max_fd_error"
max = 1e-6

[[thresholds]]
metric = "min_rank_deficit"
max = 0

[[thresholds]]
metric = "zero_section_refused"
min = 1
"#,
    ),
    (
        "axis_response_closed_form",
        r#"
schema_version = 1
name = "axis_response_closed_form"
claim = "the linear response to tube-constant profiles along the axis orbit has a closed form"
seed = 0

[model]
name = "fermi_segment"

[[pipeline]]
op = "axis_response"
epsilons = [0.0, 1.0]

[[thresholds]]
metric = "axis_max_error"
max = 1e-8

[[thresholds]]
metric = "axis_profile_count"
min = 3
"#,
    ),
    (
        "transverse_response_closed_form",
        r#"
schema_version = 1
name = "transverse_response_closed_form"
claim = "the linear response to transversally linear profiles has a closed form in the scaling limit"
seed = 0

[model]
name = "fermi_segment"

[[pipeline]]
op = "transverse_response"

[[thresholds]]
metric = "transverse_max_error"
max = 1e-8

[[thresholds]]
metric = "transverse_profile_count"
min = 5
"#,
    ),
    (
        "response_error_order",
        r#"
schema_version = 1
name = "response_error_order"
claim = "the scaled response deviates from its scaling limit at second order in epsilon"
seed = 0

[model]
name = "fermi_segment"

[[pipeline]]
op = "response_order"
epsilons = [0.2, 0.1, 0.05, 0.025]

[[thresholds]]
metric = "slope_x"
min = 1.85
max = 2.15

[[thresholds]]
metric = "slope_xi"
min = 1.85
max = 2.15
"#,
    ),
    (
        "endpoint_surjectivity",
        r#"
schema_version = 1
name = "endpoint_surjectivity"
claim = "three bump families make the endpoint map of the axis orbit a submersion for small epsilon"
seed = 0

[model]
name = "fermi_segment"

[[pipeline]]
op = "endpoint_surjectivity"
tube_radius = 0.2
epsilons = [0.2, 0.1, 0.05, 0.025]
small_eps = 0.05

[[thresholds]]
metric = "limit_sigma_min"
min = 0.61803397875
max = 0.61803399875

[[thresholds]]
metric = "limit_pattern_deviation"
max = 1e-8

[[thresholds]]
metric = "pattern_slope"
min = 1.85
max = 2.15

[[thresholds]]
metric = "min_sigma_small_eps"
min = 0.1
"#,
    ),
    (
        "loop_tail",
        r#"
schema_version = 1
name = "loop_tail"
claim = "a degenerate return has a tail segment with a clear tube where perturbations can be placed"
seed = 0

[[pipeline]]
op = "loop_tail"

[[thresholds]]
metric = "return_defect"
max = 1e-4

[[thresholds]]
metric = "tube_radius"
min = 1e-3

[[thresholds]]
metric = "tail_margin"
min = 1e-3
"#,
    ),
    (
        "second_pass_cancellation",
        r#"
schema_version = 1
name = "second_pass_cancellation"
claim = "on the half-turn quotient a forcing met once per period cancels at the second return"
seed = 0

[[pipeline]]
op = "second_pass_cancellation"
forcing = { t0 = 1.0, width = 0.3, amplitude = 0.5 }

[[thresholds]]
metric = "quotient_ratio"
max = 1e-3

[[thresholds]]
metric = "sphere_ratio"
min = 0.5

[[thresholds]]
metric = "quotient_first_over_scale"
min = 0.1
"#,
    ),
    (
        "closed_normal_scan",
        r#"
schema_version = 1
name = "closed_normal_scan"
claim = "the normal family of a closed geodesic of the flat torus returns conormally and closes at multiples of the period"
seed = 0

[model]
name = "flat_torus"

[sigma]
kind = "torus_line"
value = 0.0
period = 6.283185307179586
sheet_period = 6.283185307179586

[[pipeline]]
op = "returns_scan"
horizon = 13.0
expected = [6.283185307179586, 12.566370614359172]
expected_closed = [6.283185307179586, 12.566370614359172]
rank_defects = true
returns = { grid = 8 }

[[thresholds]]
metric = "time_error"
max = 1e-8

[[thresholds]]
metric = "closed_time_error"
max = 1e-8

[[thresholds]]
metric = "unexpected_events"
max = 0

[[thresholds]]
metric = "max_defect"
max = 1e-6

[[thresholds]]
metric = "min_rank_defect"
min = 1
"#,
    ),
    (
        "sphere_returns",
        r#"
schema_version = 1
name = "sphere_returns"
claim = "the normal family of a great circle returns conormally at pi and 2 pi"
seed = 0

[model]
name = "round_sphere"

[sigma]
kind = "polar_great_circle"
u_max = 1.2

[[pipeline]]
op = "returns_scan"
horizon = 7.0
expected = [3.141592653589793, 6.283185307179586]
returns = { grid = 8 }

[[thresholds]]
metric = "time_error"
max = 1e-8

[[thresholds]]
metric = "unexpected_events"
max = 0

[[thresholds]]
metric = "max_defect"
max = 1e-6
"#,
    ),
    (
        "closed_normal_separation",
        r#"
schema_version = 1
name = "closed_normal_separation"
claim = "a small diffeomorphism opens a closed conormal branch"
seed = 0

[model]
name = "flat_torus"

[sigma]
kind = "torus_line"
value = 0.0
period = 6.283185307179586
sheet_period = 6.283185307179586

[[pipeline]]
op = "closed_normal_separation"
horizon = 7.0
returns = { grid = 4, with_defect = false }
separation = { directions = 8, window_samples = 5, seed = 7 }

[[thresholds]]
metric = "separated"
min = 1

[[thresholds]]
metric = "norm"
max = 0.05

[[thresholds]]
metric = "closure_gap_after"
min = 1e-4
"#,
    ),
    (
        "break_loop",
        r#"
schema_version = 1
name = "break_loop"
claim = "a conformal perturbation on the tail makes a degenerate return transversal"
seed = 0

[[pipeline]]
op = "break_loop"
rescan_factor = 2

[[thresholds]]
metric = "success"
min = 1

[[thresholds]]
metric = "defect_before"
max = 1e-4

[[thresholds]]
metric = "s_norm"
max = 0.1

[[thresholds]]
metric = "defect_after"
min = 1e-3

[[thresholds]]
metric = "rescan_defect"
min = 1e-3
"#,
    ),
    (
        "torus_kuznecov",
        r#"
schema_version = 1
name = "torus_kuznecov"
claim = "period-integral counts of a closed geodesic on the flat torus: lattice law, sawtooth remainder, peaks at return times"
seed = 0

[model]
name = "flat_torus"

[sigma]
kind = "torus_line"
value = 0.0
period = 6.283185307179586
sheet_period = 6.283185307179586

[[pipeline]]
op = "kuznecov_torus"
lambda_max = 500.0
spectrum = { t_max = 20.0 }

[[thresholds]]
metric = "count_mismatch"
max = 1e-9

[[thresholds]]
metric = "c_fit"
min = 1.96
max = 2.04

[[thresholds]]
metric = "exponent_fit"
min = 0.98
max = 1.02

[[thresholds]]
metric = "max_abs_residual"
max = 1.01

[[thresholds]]
metric = "peak_match_ratio"
max = 1.0

[[thresholds]]
metric = "unmatched_returns"
max = 0
"#,
    ),
    (
        "sphere_kuznecov",
        r#"
schema_version = 1
name = "sphere_kuznecov"
claim = "period-integral counts of a great circle on the round sphere: odd degrees vanish, remainder peaks at pi and 2 pi"
seed = 0

[model]
name = "round_sphere"

[sigma]
kind = "polar_great_circle"
u_max = 1.2

[[pipeline]]
op = "kuznecov_sphere"
l_max = 400
l_control = 200
spectrum = { t_max = 7.0 }

[[thresholds]]
metric = "odd_weight_max"
max = 1e-12

[[thresholds]]
metric = "exponent_fit"
min = 0.95
max = 1.05

[[thresholds]]
metric = "peak_match_ratio"
max = 1.0

[[thresholds]]
metric = "unmatched_returns"
max = 0

[[thresholds]]
metric = "individual_bound"
max = 5.0

[[thresholds]]
metric = "bound_stability"
max = 0.1

[[thresholds]]
metric = "residual_stability"
max = 0.1
"#,
    ),
    (
        "frequency_match",
        r#"
schema_version = 1
name = "frequency_match"
claim = "remainder frequencies of a latitude circle coincide with its conormal return times"
seed = 0

[model]
name = "round_sphere"

[sigma]
kind = "latitude_circle"
u0 = 0.3
arc = 1.0

[[pipeline]]
op = "kuznecov_sphere"
l_max = 400
l_control = 200
spectrum = { t_max = 7.0 }

[[thresholds]]
metric = "peak_match_ratio"
max = 1.0

[[thresholds]]
metric = "unmatched_returns"
max = 0

[[thresholds]]
metric = "return_time_count"
min = 3
max = 3
"#,
    ),
];

pub fn list_builtin() -> Vec<&'static str> {
    BUILTIN.iter().map(|(n, _)| *n).collect()
}

pub fn builtin_toml(name: &str) -> Option<&'static str> {
    BUILTIN.iter().find(|(n, _)| *n == name).map(|(_, t)| t.trim_start())
}

pub fn builtin(name: &str) -> Result<Scenario> {
    let text = builtin_toml(name).ok_or_else(|| {
        LabError::Config(format!("unknown builtin scenario `{name}` (known: {})", list_builtin().join(", ")))
    })?;
    Scenario::from_toml(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse_and_names_match() {
        let names = list_builtin();
        assert!(names.len() >= 13);
        for n in names {
            let s = builtin(n).unwrap();
            assert_eq!(s.name, n);
            assert!(!s.thresholds.is_empty() && !s.claim.is_empty());
            let again = Scenario::from_toml(&s.to_toml().unwrap()).unwrap();
            assert_eq!(again.config_hash().unwrap(), s.config_hash().unwrap());
        }
    }

    #[test]
    fn unknown_op_is_a_config_error() {
        let text = "schema_version = 1\nname = \"x\"\nclaim = \"c\"\n\n[[pipeline]]\nop = \"no_such_op\"\n";
        let e = Scenario::from_toml(text).unwrap_err();
        assert!(e.is_config() && e.to_string().contains("no_such_op"), "{e}");
    }

    #[test]
    fn unknown_field_reports_line() {
        let text = "schema_version = 1\nname = \"x\"\nclaim = \"c\"\n\n[[pipeline]]\nop = \"response_order\"\nepsilon = [0.1]\n";
        let e = Scenario::from_toml(text).unwrap_err().to_string();
        assert!(e.contains("line 5") && e.contains("`epsilon`"), "{e}");
    }

    #[test]
    fn unknown_builtin() {
        assert!(builtin("nope").unwrap_err().is_config());
    }
}
