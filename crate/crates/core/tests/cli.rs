use std::path::PathBuf;
use std::process::{Command, Output};

use tempfile::TempDir;

use lda_particles::harness::{parse_csv_rows, parse_json_report, Method, CSV_HEADER};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lda-particles"))
}

fn write_config(dir: &TempDir, name: &str, body: &str) -> PathBuf {
    let path = dir.path().join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn model(sigma: f64) -> String {
    format!(
        r#"{{"frequency":{{"kind":"poisson","lambda":2.0}},"severity":{{"kind":"lognormal","mu":2.0,"sigma":{sigma}}}}}"#
    )
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn sla_prints_the_table_row() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "sla.json", &format!(r#"{{"model":{},"seed":1}}"#, model(1.0)));
    let out = run(&["sla", "--config", cfg.to_str().unwrap()]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
    let rows = parse_csv_rows(&text).unwrap();
    let row = rows.iter().find(|r| r.alpha == 0.99).unwrap();
    assert_eq!(row.method, Method::Sla);
    assert_eq!(row.var.unwrap().floor(), 97.0);
}

#[test]
fn simulate_is_deterministic_across_runs_and_threads() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "mc.json",
        &format!(
            r#"{{"model":{},"method":{{"kind":"mc","samples":200000}},"seed":5}}"#,
            model(0.5)
        ),
    );
    let c = cfg.to_str().unwrap();
    let a = run(&["simulate", "--config", c, "--threads", "1"]).stdout;
    let b = run(&["simulate", "--config", c, "--threads", "4"]).stdout;
    let again = run(&["simulate", "--config", c, "--threads", "4", "--deterministic-reduction"]).stdout;
    assert_eq!(a, b);
    assert_eq!(b, again);
    let other = run(&["simulate", "--config", c, "--seed", "6"]).stdout;
    assert_ne!(a, other);
}

#[test]
fn particle_json_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "particle.json",
        &format!(
            r#"{{"model":{},"method":{{"kind":"particle","particles":500,"grid":{{"kind":"linear","width":2.0,"end":120.0}}}},
                "levels":[0.5,0.9],"seed":3,"output":"json"}}"#,
            model(0.5)
        ),
    );
    let c = cfg.to_str().unwrap();
    let a = run(&["particle", "--config", c, "--threads", "1"]).stdout;
    let b = run(&["particle", "--config", c, "--threads", "3"]).stdout;
    assert_eq!(a, b);
    let report = parse_json_report(&String::from_utf8(a).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert!(report.meta.runtime.is_none());
}

#[test]
fn config_errors_are_structured() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "bad.json",
        r#"{"model":{"frequency":{"kind":"poisson","lambda":-1.0},"severity":{"kind":"lognormal","mu":2.0,"sigma":1.0}},"seed":1}"#,
    );
    let out = bin().args(["sla", "--config", cfg.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "config");
    assert_eq!(err["error"]["field"], "model");

    let cfg = write_config(
        &dir,
        "typo.json",
        &format!(r#"{{"model":{},"seed":1,"levls":[0.9]}}"#, model(1.0)),
    );
    let out = bin().args(["sla", "--config", cfg.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["field"], "levls");

    let cfg = write_config(
        &dir,
        "kind.json",
        &format!(r#"{{"model":{},"method":{{"kind":"sla"}},"seed":1}}"#, model(1.0)),
    );
    let out = bin()
        .args(["panjer", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["field"], "method.kind");
}

#[test]
fn table1_small_scale_is_well_formed() {
    let out = run(&[
        "table1", "--preset", "sigma05", "--scale", "0.0001", "--out", "json", "--timing",
    ]);
    let report = parse_json_report(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert!(report.meta.runtime.is_some());
    for method in [Method::Mc, Method::Particle, Method::Sla] {
        let vars: Vec<f64> = report.rows_for(method).map(|r| r.var.unwrap()).collect();
        assert_eq!(vars.len(), 7, "{method:?}");
        assert!(vars.windows(2).all(|w| w[1] >= w[0]), "{method:?}: {vars:?}");
    }
}

#[test]
fn report_can_go_to_a_file() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "file.json", &format!(r#"{{"model":{},"seed":1}}"#, model(0.5)));
    let dest = cfg.with_file_name("report.json");
    run(&[
        "panjer",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        "json",
        "--output",
        dest.to_str().unwrap(),
    ]);
    let report = parse_json_report(&std::fs::read_to_string(&dest).unwrap()).unwrap();
    assert_eq!(report.var(Method::Panjer, 0.99).map(f64::round), Some(57.0));
}
