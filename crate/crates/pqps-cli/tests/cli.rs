//! Contract tests for the command-line surface: exit codes, file schemas,
//! determinism of outputs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pqps() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pqps"))
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("pqps-cli-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn pqps")
}

#[test]
fn vertices_no_knots_matches_formulas() {
    let dir = tmp_dir("vertices0");
    let out = dir.join("v.csv");
    let st = run(pqps().args(["vertices", "--knots", "0", "--out"]).arg(&out));
    assert!(st.status.success());
    let text = read(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "c1,c2,c3");
    assert_eq!(lines.len(), 5); // header + 4 vertices
    assert_eq!(lines[1], "0,0,0");
    assert_eq!(lines[2], "0.5,0,0");
    assert!(lines[3].starts_with("0.6666666666666666,0.3333333333333333"));
    assert_eq!(lines[4], "1,1,1");
}

#[test]
fn vertices_explicit_knot_row() {
    let dir = tmp_dir("vertices1");
    let out = dir.join("v.csv");
    let st = run(pqps()
        .args(["vertices", "--interior", "0.5", "--out"])
        .arg(&out));
    assert!(st.status.success());
    let text = read(&out);
    let lines: Vec<&str> = text.lines().collect();
    // header carries K+3 = 4 coordinates
    assert_eq!(lines[0].split(',').count(), 4);
    assert_eq!(lines.last().unwrap(), &"1,1,1,0.125");
}

#[test]
fn vertices_bad_knots_exit_2() {
    let dir = tmp_dir("vertices-bad");
    let out = dir.join("v.csv");
    let st = run(pqps()
        .args(["vertices", "--interior", "0.9,0.1", "--out"])
        .arg(&out));
    assert_eq!(st.status.code(), Some(2));
    let st = run(pqps()
        .args(["vertices", "--interior", "1.5", "--out"])
        .arg(&out));
    assert_eq!(st.status.code(), Some(2));
}

#[test]
fn fit_rejects_malformed_input_with_exit_2() {
    let dir = tmp_dir("fit-bad");
    // empty file
    let empty = dir.join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    let st = run(pqps()
        .arg("fit")
        .arg(&empty)
        .arg("--out")
        .arg(dir.join("o1")));
    assert_eq!(st.status.code(), Some(2));

    // header only
    let header_only = dir.join("header.csv");
    std::fs::write(&header_only, "x,y\n").unwrap();
    let st = run(pqps()
        .arg("fit")
        .arg(&header_only)
        .arg("--out")
        .arg(dir.join("o2")));
    assert_eq!(st.status.code(), Some(2));

    // unparseable row
    let garbled = dir.join("garbled.csv");
    std::fs::write(&garbled, "x,y\n0.1,2.0\noops,3\n").unwrap();
    let st = run(pqps()
        .arg("fit")
        .arg(&garbled)
        .arg("--out")
        .arg(dir.join("o3")));
    assert_eq!(st.status.code(), Some(2));
    assert!(
        String::from_utf8_lossy(&st.stderr).contains(":3"),
        "line number in diagnostics"
    );

    // non-finite value
    let nonfinite = dir.join("nonfinite.csv");
    std::fs::write(&nonfinite, "x,y\n0.1,2.0\n0.2,inf\n").unwrap();
    let st = run(pqps()
        .arg("fit")
        .arg(&nonfinite)
        .arg("--out")
        .arg(dir.join("o4")));
    assert_eq!(st.status.code(), Some(2));

    // missing file
    let st = run(pqps()
        .arg("fit")
        .arg(dir.join("nope.csv"))
        .arg("--out")
        .arg(dir.join("o5")));
    assert_eq!(st.status.code(), Some(2));

    // bad flag values
    let ok = dir.join("ok.csv");
    std::fs::write(&ok, "x,y\n0.0,1.0\n0.5,2.0\n1.0,3.0\n").unwrap();
    let st = run(pqps()
        .arg("fit")
        .arg(&ok)
        .args(["--levels", "0.9,0.1", "--out"])
        .arg(dir.join("o6")));
    assert_eq!(st.status.code(), Some(2));
}

#[test]
fn simulate_writes_expected_schemas() {
    let dir = tmp_dir("simulate");
    let st = run(pqps()
        .args([
            "simulate", "--design", "4", "--n", "25", "--seed", "7", "--out",
        ])
        .arg(&dir));
    assert!(st.status.success());

    let data = read(&dir.join("data.csv"));
    let lines: Vec<&str> = data.lines().collect();
    assert_eq!(lines[0], "x,y");
    assert_eq!(lines.len(), 26);

    let truth = read(&dir.join("truth.csv"));
    let tlines: Vec<&str> = truth.lines().collect();
    assert_eq!(tlines[0], "x,tau,q_true");
    assert_eq!(tlines.len(), 1 + 25 * 5); // default five levels

    // design 4 records the Cauchy recommendation in the metadata
    let meta = read(&dir.join("meta.json"));
    assert!(meta.contains("\"recommended_re_family\": \"cauchy\""));
    assert!(meta.contains("\"design\": 4"));
}

#[test]
fn simulate_is_deterministic_under_seed() {
    let dir_a = tmp_dir("sim-det-a");
    let dir_b = tmp_dir("sim-det-b");
    for dir in [&dir_a, &dir_b] {
        let st = run(pqps()
            .args([
                "simulate", "--design", "2", "--n", "31", "--seed", "99", "--out",
            ])
            .arg(dir));
        assert!(st.status.success());
    }
    assert_eq!(read(&dir_a.join("data.csv")), read(&dir_b.join("data.csv")));
    assert_eq!(
        read(&dir_a.join("truth.csv")),
        read(&dir_b.join("truth.csv"))
    );
}

#[test]
fn study_report_schema_and_smoke_run() {
    let dir = tmp_dir("study");
    let report = dir.join("report.csv");
    let raw = dir.join("raw.csv");
    let st = run(pqps()
        .args(["study", "--design", "1", "--replicates", "1", "--n", "60"])
        .args(["--levels", "0.5,0.9"])
        .args(["--knots", "4", "--sd-knots", "2"])
        .args([
            "--iters1", "800", "--iters2", "600", "--burnin", "200", "--thin", "2",
        ])
        .args(["--seed", "5", "--grid", "11"])
        .arg("--out")
        .arg(&report)
        .arg("--raw")
        .arg(&raw));
    assert!(
        st.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&st.stderr)
    );

    let text = read(&report);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "tau,rmise_x100,coverage,replicates");
    assert_eq!(lines.len(), 3); // two requested levels
    for line in &lines[1..] {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 4);
        let coverage: f64 = fields[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&coverage));
        let rmise: f64 = fields[1].parse().unwrap();
        assert!(rmise >= 0.0);
    }
    let raw_text = read(&raw);
    assert!(raw_text.starts_with("replicate,tau,rmise_x100,covered,points\n"));

    // stdout carries the aligned table
    let stdout = String::from_utf8_lossy(&st.stdout);
    assert!(stdout.contains("rmise_x100"));
}

#[test]
fn fit_produces_noncrossing_bands_and_config_file_roundtrip() {
    let dir = tmp_dir("fit-ok");
    // motorcycle-like shape: flat, sharp dip, rebound, settle
    let mut csv = String::from("x,y\n");
    let mut state = 9u64;
    let mut next = || {
        // xorshift for a cheap deterministic noise stream
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state % 1000) as f64 / 1000.0 - 0.5
    };
    for i in 0..80 {
        let t = i as f64 / 79.0;
        let mean = if t < 0.2 {
            0.0
        } else if t < 0.5 {
            -120.0 * ((t - 0.2) * std::f64::consts::PI / 0.3).sin()
        } else {
            40.0 * (1.0 - t) * ((t - 0.5) * 12.0).cos()
        };
        let scale = if t < 0.2 { 3.0 } else { 25.0 };
        csv.push_str(&format!("{},{}\n", 2.4 + 55.0 * t, mean + scale * next()));
    }
    let data = dir.join("moto.csv");
    std::fs::write(&data, &csv).unwrap();

    let config = dir.join("config.json");
    std::fs::write(
        &config,
        r#"{
  "levels": [0.05, 0.25, 0.5, 0.75, 0.95],
  "knots": 8,
  "sd_knots": 2,
  "re_family": "cauchy",
  "iters1": 1500,
  "burnin1": 400,
  "iters2": 1200,
  "burnin": 400,
  "thin": 4,
  "seed": 31,
  "grid": 40
}"#,
    )
    .unwrap();

    let st = run(pqps()
        .arg("fit")
        .arg(&data)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&dir));
    assert!(
        st.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&st.stderr)
    );

    let curves = read(&dir.join("curves.csv"));
    let lines: Vec<&str> = curves.lines().collect();
    assert_eq!(lines[0], "x,tau,posterior_mean,lower95,upper95");
    assert_eq!(lines.len(), 1 + 40 * 5);

    // parse rows back and assert non-crossing across levels at every grid x
    let mut rows: Vec<(f64, f64, f64, f64, f64)> = Vec::new();
    for line in &lines[1..] {
        let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        rows.push((f[0], f[1], f[2], f[3], f[4]));
    }
    for chunk in rows.chunks(5) {
        for pair in chunk.windows(2) {
            assert!(pair[0].1 < pair[1].1, "levels ordered within grid point");
            assert!(
                pair[0].2 <= pair[1].2 + 1e-10,
                "posterior means must not cross"
            );
            assert!(pair[0].3 <= pair[1].3 + 1e-10, "lower bands must not cross");
            assert!(pair[0].4 <= pair[1].4 + 1e-10, "upper bands must not cross");
        }
        for &(_, _, mean, lo, hi) in chunk {
            assert!(lo <= mean && mean <= hi);
        }
    }
    // grid is reported on the original covariate scale
    assert!((rows[0].0 - 2.4).abs() < 1e-9);
    assert!((rows.last().unwrap().0 - 57.4).abs() < 1e-9);

    // summary carries the rescale map and diagnostics
    let summary = read(&dir.join("summary.json"));
    assert!(summary.contains("\"x_map\""));
    assert!(summary.contains("\"vertex_basis_condition\""));
    assert!(summary.contains("\"runtime_seconds\""));
    assert!(summary.contains("\"re_family\": \"cauchy\""));
}

#[test]
fn unknown_flags_exit_2() {
    let st = run(pqps().args(["fit", "--definitely-not-a-flag"]));
    assert_eq!(st.status.code(), Some(2));
    let st = run(pqps().args(["study", "--design", "9", "--replicates", "1"]));
    assert_eq!(st.status.code(), Some(2));
}
