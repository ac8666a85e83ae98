use std::path::Path;
use std::process::{Command, Output};

fn bin(out: &Path) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_conormal-lab"));
    c.env_remove("CONORMAL_LAB_OUT").arg("--out").arg(out);
    c
}

fn run(out: &Path, args: &[&str]) -> Output {
    bin(out).args(args).output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn help_matches_golden() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    for (args, file) in [
        (&["--help"][..], "help.txt"),
        (&["flow", "--help"][..], "help_flow.txt"),
        (&["scenario", "run", "--help"][..], "help_scenario_run.txt"),
    ] {
        let o = Command::new(env!("CARGO_BIN_EXE_conormal-lab")).env_remove("CONORMAL_LAB_OUT").args(args).output().unwrap();
        assert!(o.status.success());
        let want = std::fs::read_to_string(golden.join(file)).unwrap();
        assert_eq!(text(&o.stdout), want, "{file} drifted");
    }
}

#[test]
fn list_names_every_builtin() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), &["scenario", "list"]);
    assert!(o.status.success());
    let names: Vec<String> = text(&o.stdout).lines().map(str::to_string).collect();
    assert_eq!(names, conormal_lab::scenarios::list_builtin());
    assert!(names.iter().any(|n| n == "second_pass_cancellation") && names.iter().any(|n| n == "frequency_match"));
}

#[test]
fn malformed_config_exits_2_with_location() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 3\n[options]\nhorizon = 7.0\nhorizn = 2.0\n").unwrap();
    let o = run(d.path(), &["returns", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = text(&o.stderr);
    assert!(err.contains("line 4") && err.contains("horizn"), "{err}");
    assert!(!d.path().join("returns").exists());
}

#[test]
fn unknown_scenario_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), &["scenario", "run", "no_such_scenario"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("no_such_scenario"));
}

#[test]
fn failed_threshold_exits_1() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("strict.toml");
    std::fs::write(&cfg, "[options]\nt = 1.0\nsamples = 10\n\n[[thresholds]]\nmetric = \"t_end\"\nmax = 0.5\n").unwrap();
    let o = run(d.path(), &["flow", "--config", cfg.to_str().unwrap(), "--x", "0.1,0.2", "--xi", "1,0"]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o.stderr));
    assert!(text(&o.stdout).contains("FAIL t_end"));
}

#[test]
fn flow_writes_only_below_out() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("root");
    let o = run(&out, &["flow", "--model", "round_sphere", "--x", "0.3,0.1", "--xi=-0.5,1", "--t", "2"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let csv = std::fs::read_to_string(out.join("flow/trajectory.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "t,x1,x2,xi1,xi2,energy");
    let top: Vec<_> = std::fs::read_dir(d.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(top, vec!["root"]);
    for f in ["report.json", "summary.txt", "scenario.toml"] {
        assert!(out.join("flow").join(f).exists(), "{f}");
    }
}

#[test]
fn env_sets_default_out() {
    let d = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_conormal-lab"))
        .env("CONORMAL_LAB_OUT", d.path())
        .current_dir(d.path())
        .args(["kuznecov", "torus"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", text(&o.stdout));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.path().join("kuznecov_torus/report.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], true);
    assert!(d.path().join("kuznecov_torus/series.csv").exists());
}

#[test]
fn scenario_file_round_trips() {
    let d = tempfile::tempdir().unwrap();
    let path = d.path().join("mine.toml");
    let mut s = conormal_lab::scenarios::builtin("sphere_returns").unwrap();
    s.name = "my_sphere".into();
    std::fs::write(&path, s.to_toml().unwrap()).unwrap();
    let o = run(d.path(), &["--seed", "9", "scenario", "run", path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.path().join("my_sphere/report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 9);
}
