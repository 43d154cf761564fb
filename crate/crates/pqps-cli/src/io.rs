//! CSV and JSON input/output for the command-line surface.

use std::fmt::Write as _;
use std::path::Path;

use crate::CliError;

/// Read a two-column `x,y` CSV with a header line.
pub fn read_xy_csv(path: &Path) -> Result<(Vec<f64>, Vec<f64>), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(CliError::Input(format!("{}: empty file", path.display())));
    };
    let cols: Vec<&str> = header.split(',').map(|s| s.trim()).collect();
    if cols.len() < 2 || !cols[0].eq_ignore_ascii_case("x") || !cols[1].eq_ignore_ascii_case("y") {
        return Err(CliError::Input(format!(
            "{}: expected header 'x,y', found '{header}'",
            path.display()
        )));
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(|s| s.trim()).collect();
        if fields.len() < 2 {
            return Err(CliError::Input(format!(
                "{}:{}: expected two comma-separated values",
                path.display(),
                lineno + 1
            )));
        }
        let parse = |s: &str, name: &str| -> Result<f64, CliError> {
            let v: f64 = s.parse().map_err(|_| {
                CliError::Input(format!(
                    "{}:{}: cannot parse {name} value '{s}'",
                    path.display(),
                    lineno + 1
                ))
            })?;
            if !v.is_finite() {
                return Err(CliError::Input(format!(
                    "{}:{}: non-finite {name} value '{s}'",
                    path.display(),
                    lineno + 1
                )));
            }
            Ok(v)
        };
        x.push(parse(fields[0], "x")?);
        y.push(parse(fields[1], "y")?);
    }
    if x.is_empty() {
        return Err(CliError::Input(format!("{}: no data rows", path.display())));
    }
    Ok((x, y))
}

pub fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)
                .map_err(|e| CliError::Input(format!("cannot create {}: {e}", dir.display())))?;
        }
    }
    std::fs::write(path, content)
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

/// Plot-ready curve bands: one row per (grid point, quantile level).
pub fn curves_csv(xs: &[f64], levels: &[f64], summary: &pqps::CurveSummary) -> String {
    let mut out = String::from("x,tau,posterior_mean,lower95,upper95\n");
    for (i, &x) in xs.iter().enumerate() {
        for (t, &tau) in levels.iter().enumerate() {
            let _ = writeln!(
                out,
                "{x},{tau},{},{},{}",
                summary.mean[(i, t)],
                summary.lower95[(i, t)],
                summary.upper95[(i, t)]
            );
        }
    }
    out
}

pub fn xy_csv(x: &[f64], y: &[f64]) -> String {
    let mut out = String::from("x,y\n");
    for (a, b) in x.iter().zip(y) {
        let _ = writeln!(out, "{a},{b}");
    }
    out
}

pub fn truth_csv(x: &[f64], levels: &[f64], design: pqps::Design) -> String {
    let mut out = String::from("x,tau,q_true\n");
    for &xi in x {
        for &tau in levels {
            let _ = writeln!(out, "{xi},{tau},{}", design.true_quantile(tau, xi));
        }
    }
    out
}

/// One vertex per row, coordinate columns c1..c(K+3).
pub fn vertices_csv(vertices: &nalgebra::DMatrix<f64>) -> String {
    let mut out = String::new();
    for j in 0..vertices.ncols() {
        if j > 0 {
            out.push(',');
        }
        let _ = write!(out, "c{}", j + 1);
    }
    out.push('\n');
    for i in 0..vertices.nrows() {
        for j in 0..vertices.ncols() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", vertices[(i, j)]);
        }
        out.push('\n');
    }
    out
}
