//! Render sweep tables as CSV or markdown, and read CSV tables back.
//! All floats are written with three decimal places; cells that failed
//! to evaluate render as "nan".

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::sweep::{SweepCell, SweepResult, SweepRow};

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.3}")
    }
}

fn check_result(result: &SweepResult) -> Result<()> {
    if result.rows.is_empty() || result.columns.is_empty() {
        return Err(Error::invalid("report: empty sweep result"));
    }
    for name in &result.columns {
        if name.contains(',') || name.contains('|') || name.contains('\n') {
            return Err(Error::invalid(format!(
                "report: column name '{name}' contains a delimiter"
            )));
        }
    }
    for row in &result.rows {
        if row.cells.len() != result.columns.len() {
            return Err(Error::invalid(format!(
                "report: row for epsilon {} has {} cells, expected {}",
                row.epsilon,
                row.cells.len(),
                result.columns.len()
            )));
        }
    }
    Ok(())
}

pub fn csv_string(result: &SweepResult) -> Result<String> {
    check_result(result)?;
    let mut out = String::from("epsilon,l2_diff");
    for name in &result.columns {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for row in &result.rows {
        out.push_str(&fmt(row.epsilon as f64));
        out.push(',');
        out.push_str(&fmt(row.l2_diff));
        for cell in &row.cells {
            out.push(',');
            out.push_str(&fmt(cell.accuracy));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn markdown_string(result: &SweepResult) -> Result<String> {
    check_result(result)?;
    let mut out = String::from("| epsilon | l2_diff |");
    for name in &result.columns {
        out.push_str(&format!(" {name} |"));
    }
    out.push('\n');
    out.push_str("|---:|---:|");
    for _ in &result.columns {
        out.push_str("---:|");
    }
    out.push('\n');
    for row in &result.rows {
        out.push_str(&format!(
            "| {} | {} |",
            fmt(row.epsilon as f64),
            fmt(row.l2_diff)
        ));
        for cell in &row.cells {
            out.push_str(&format!(" {} |", fmt(cell.accuracy)));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn emit_csv(result: &SweepResult, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, csv_string(result)?)?;
    Ok(())
}

pub fn emit_markdown(result: &SweepResult, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, markdown_string(result)?)?;
    Ok(())
}

/// Read a table written by [`emit_csv`]. Sample counts and error notes
/// are not part of the CSV, so cells come back with `samples = 0` and
/// no error; the numeric content round-trips at the printed precision.
pub fn parse_csv_str(text: &str) -> Result<SweepResult> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::invalid("csv: empty input"))?;
    let mut fields = header.split(',');
    if fields.next() != Some("epsilon") || fields.next() != Some("l2_diff") {
        return Err(Error::invalid(
            "csv: header must start with 'epsilon,l2_diff'",
        ));
    }
    let columns: Vec<String> = fields.map(str::to_string).collect();
    if columns.is_empty() {
        return Err(Error::invalid("csv: header has no defense columns"));
    }

    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let values: Vec<&str> = line.split(',').collect();
        if values.len() != columns.len() + 2 {
            return Err(Error::invalid(format!(
                "csv line {}: expected {} fields, got {}",
                idx + 1,
                columns.len() + 2,
                values.len()
            )));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|_| {
                Error::invalid(format!("csv line {}: bad {what} '{s}'", idx + 1))
            })
        };
        let epsilon = num(values[0], "epsilon")? as f32;
        let l2_diff = num(values[1], "l2_diff")?;
        let cells = values[2..]
            .iter()
            .map(|v| {
                Ok(SweepCell {
                    accuracy: num(v, "accuracy")?,
                    samples: 0,
                    error: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(SweepRow {
            epsilon,
            l2_diff,
            cells,
        });
    }
    if rows.is_empty() {
        return Err(Error::invalid("csv: no data rows"));
    }
    Ok(SweepResult { columns, rows })
}

pub fn parse_csv(path: impl AsRef<Path>) -> Result<SweepResult> {
    parse_csv_str(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SweepResult {
        let cell = |a: f64| SweepCell {
            accuracy: a,
            samples: 100,
            error: None,
        };
        SweepResult {
            columns: vec!["none".into(), "vae".into(), "smooth".into()],
            rows: vec![
                SweepRow {
                    epsilon: 0.05,
                    l2_diff: 0.1234567,
                    cells: vec![cell(0.8453), cell(0.9017), cell(f64::NAN)],
                },
                SweepRow {
                    epsilon: 0.1,
                    l2_diff: 0.2499,
                    cells: vec![cell(0.5), cell(0.75), cell(0.6666)],
                },
            ],
        }
    }

    #[test]
    fn one_row_result_is_two_csv_lines() {
        let mut r = sample();
        r.rows.truncate(1);
        let text = csv_string(&r).unwrap();
        assert_eq!(text.trim_end().lines().count(), 2);
        assert!(text.starts_with("epsilon,l2_diff,none,vae,smooth\n"));
    }

    #[test]
    fn three_decimal_rounding() {
        let text = csv_string(&sample()).unwrap();
        let first_row = text.lines().nth(1).unwrap();
        assert_eq!(first_row, "0.050,0.123,0.845,0.902,nan");
    }

    #[test]
    fn markdown_has_defenses_plus_two_columns() {
        let md = markdown_string(&sample()).unwrap();
        let header = md.lines().next().unwrap();
        let cols = header.matches('|').count() - 1;
        assert_eq!(cols, 3 + 2);
        assert!(md.lines().nth(1).unwrap().contains("---:"));
        assert_eq!(md.lines().count(), 2 + 2);
    }

    #[test]
    fn csv_round_trips_at_three_decimals() {
        let r = sample();
        let parsed = parse_csv_str(&csv_string(&r).unwrap()).unwrap();
        assert_eq!(parsed.columns, r.columns);
        assert_eq!(parsed.rows.len(), r.rows.len());
        let round = |v: f64| (v * 1000.0).round() / 1000.0;
        for (a, b) in r.rows.iter().zip(&parsed.rows) {
            assert_eq!(round(a.epsilon as f64), round(b.epsilon as f64));
            assert_eq!(round(a.l2_diff), b.l2_diff);
            for (x, y) in a.cells.iter().zip(&b.cells) {
                if x.accuracy.is_nan() {
                    assert!(y.accuracy.is_nan());
                } else {
                    assert_eq!(round(x.accuracy), y.accuracy);
                }
            }
        }
    }

    #[test]
    fn emit_writes_files_and_parse_reads_them() {
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("t.csv");
        let md_path = dir.path().join("t.md");
        emit_csv(&sample(), &csv_path).unwrap();
        emit_markdown(&sample(), &md_path).unwrap();
        let parsed = parse_csv(&csv_path).unwrap();
        assert_eq!(parsed.columns, sample().columns);
        assert!(std::fs::read_to_string(&md_path).unwrap().contains("| 0.050 |"));
        assert!(emit_csv(&sample(), dir.path().join("no/such/dir/t.csv")).is_err());
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let empty = SweepResult {
            columns: vec![],
            rows: vec![],
        };
        assert!(csv_string(&empty).is_err());
        let mut bad = sample();
        bad.columns[1] = "a,b".into();
        assert!(csv_string(&bad).is_err());

        assert!(parse_csv_str("").is_err());
        assert!(parse_csv_str("eps,l2,none\n0.1,0.2,0.3\n").is_err());
        assert!(parse_csv_str("epsilon,l2_diff,none\n0.1,0.2\n").is_err());
        assert!(parse_csv_str("epsilon,l2_diff,none\n0.1,x,0.3\n").is_err());
        assert!(parse_csv_str("epsilon,l2_diff,none\n").is_err());
    }
}
