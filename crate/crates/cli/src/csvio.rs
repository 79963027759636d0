//! Minimal CSV emission for metric logs and reports.

use std::io::Write;
use std::path::Path;

use crate::error::Result;

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{}", header.join(","))?;
    for row in rows {
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}

/// Reads a simple (unquoted) CSV back as header + rows.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .map(|l| l.split(',').map(|s| s.to_string()).collect())
        .unwrap_or_default();
    let rows = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|s| s.to_string()).collect())
        .collect();
    Ok((header, rows))
}

/// One row of the standard metric report: metric, value, n, config_hash.
pub fn metric_row(metric: &str, value: f64, n: usize, hash: &str) -> Vec<String> {
    vec![
        metric.to_string(),
        format!("{value}"),
        n.to_string(),
        hash.to_string(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let dir = std::env::temp_dir().join("handprint_csv_test");
        let path = dir.join("m.csv");
        write_csv(
            &path,
            &["metric", "value", "n", "config_hash"],
            &[metric_row("word_accuracy", 0.5, 10, "abc")],
        )
        .unwrap();
        let (header, rows) = read_csv(&path).unwrap();
        assert_eq!(header, vec!["metric", "value", "n", "config_hash"]);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0][0], "word_accuracy");
    }
}
