//! CSV emission: summary tables, per-run values, slices and loss curves.
//!
//! Every file is UTF-8 with LF line endings. Lines starting with `#` carry
//! metadata (such as a timestamp) and are the only content allowed to differ
//! between two runs of the same configuration.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::error::{contract, Result};
use crate::schemes::{evaluate_slice, LossRecord, TrainedStack};

use super::report::RunReport;

/// Formats `v` with 6 significant digits.
pub fn sig6(v: f64) -> String {
    if !v.is_finite() {
        return if v.is_nan() { "NaN".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let exp = v.abs().log10().floor() as i32;
    if !(-4..=9).contains(&exp) {
        return format!("{v:.5e}");
    }
    let decimals = (5 - exp).max(0) as usize;
    let s = format!("{v:.decimals$}");
    // Rounding can carry into a new leading digit (9.999996 → 10.00000); trim the extra place.
    let digits = s.trim_start_matches('-').trim_start_matches(['0', '.']).chars().filter(char::is_ascii_digit).count();
    if digits > 6 && decimals > 0 {
        format!("{v:.prec$}", prec = decimals - 1)
    } else {
        s
    }
}

fn open(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn opt(v: Option<f64>, f: impl Fn(f64) -> String) -> String {
    v.map(f).unwrap_or_default()
}

/// One summary row per report: `scheme,avg,std,rel_err_pct,converged_runs,notes`.
pub fn emit_table(reports: &[RunReport], path: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(contract("emit_table needs at least one report"));
    }
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(open(path)?);
    w.write_record(["scheme", "avg", "std", "rel_err_pct", "converged_runs", "notes"])?;
    for r in reports {
        w.write_record([
            r.scheme.name().to_string(),
            sig6(r.mean),
            sig6(r.std),
            opt(r.rel_err_pct, sig6),
            r.converged_runs.to_string(),
            r.notes(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-run values at full precision: `scheme,run,seed,y0,converged`, after a timestamp comment.
pub fn emit_runs(reports: &[RunReport], path: &Path) -> Result<()> {
    let mut out = open(path)?;
    writeln!(out, "{}", timestamp_line())?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["scheme", "run", "seed", "y0", "converged"])?;
    for rep in reports {
        for (k, r) in rep.runs.iter().enumerate() {
            w.write_record([
                rep.scheme.name().to_string(),
                k.to_string(),
                r.seed.to_string(),
                format!("{:?}", r.y0),
                r.converged.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `# generated unix=<seconds>`.
pub fn timestamp_line() -> String {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    format!("# generated unix={secs}")
}

/// Points `x0 + s·1_d` for `s` uniform on `[−half_width, half_width]`; a single point is `x0`.
pub fn diagonal_points(x0: &[f64], half_width: f64, n_points: usize) -> Vec<Vec<f64>> {
    (0..n_points)
        .map(|k| {
            let s = if n_points == 1 { 0.0 } else { -half_width + 2.0 * half_width * k as f64 / (n_points - 1) as f64 };
            x0.iter().map(|v| v + s).collect()
        })
        .collect()
}

/// Writes `Û_i`, `Ẑ_i` and the exact solution (blank when unknown) along the diagonal through `x0`.
pub fn emit_slice(
    stack: &TrainedStack,
    i: usize,
    half_width: f64,
    n_points: usize,
    path: &Path,
    comment: Option<&str>,
) -> Result<()> {
    if n_points == 0 {
        return Err(contract("a slice needs at least one point"));
    }
    let problem = stack.problem();
    let d = problem.dim();
    let rows = evaluate_slice(stack, i, &diagonal_points(problem.x0(), half_width, n_points))?;
    let mut out = open(path)?;
    if let Some(c) = comment {
        writeln!(out, "# {c}")?;
    }
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let mut header: Vec<String> = (1..=d).map(|j| format!("x_{j}")).collect();
    header.push("u_hat".into());
    header.extend((1..=d).map(|j| format!("z_hat_{j}")));
    header.push("u_exact".into());
    header.extend((1..=d).map(|j| format!("z_exact_{j}")));
    w.write_record(&header)?;
    for row in rows {
        let mut rec: Vec<String> = row.x.iter().map(|v| format!("{v:?}")).collect();
        rec.push(format!("{:?}", row.u_hat));
        rec.extend(row.z_hat.iter().map(|v| format!("{v:?}")));
        rec.push(opt(row.u_exact, |v| format!("{v:?}")));
        match &row.z_exact {
            Some(z) => rec.extend(z.iter().map(|v| format!("{v:?}"))),
            None => rec.extend(std::iter::repeat_n(String::new(), d)),
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// `step,iteration,loss` for every recorded optimizer iteration.
pub fn emit_losses(losses: &[LossRecord], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(open(path)?);
    w.write_record(["step", "iteration", "loss"])?;
    for l in losses {
        w.write_record([l.step.to_string(), l.iteration.to_string(), format!("{:?}", l.loss)])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(1.4686934), "1.46869");
        assert_eq!(sig6(0.0123456789), "0.0123457");
        assert_eq!(sig6(123456.7), "123457");
        assert_eq!(sig6(9.9999996), "10.0000");
        assert_eq!(sig6(-0.672854), "-0.672854");
        assert_eq!(sig6(1.5e-7), "1.50000e-7");
        assert_eq!(sig6(0.0), "0");
    }

    #[test]
    fn diagonal_points_are_centred_on_x0() {
        let pts = diagonal_points(&[1.0, 2.0], 0.5, 3);
        assert_eq!(pts, vec![vec![0.5, 1.5], vec![1.0, 2.0], vec![1.5, 2.5]]);
        assert_eq!(diagonal_points(&[3.0], 1.0, 1), vec![vec![3.0]]);
    }
}
