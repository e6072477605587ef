use std::io::Write;
use std::path::Path;

use super::{PrPoint, Result, RocPoint};

fn fmt_threshold(t: f64) -> String {
    if t.is_infinite() {
        "inf".into()
    } else {
        format!("{t}")
    }
}

fn write_lines(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{header}")?;
    for r in rows {
        writeln!(f, "{r}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_roc_csv(path: impl AsRef<Path>, curve: &[RocPoint]) -> Result<()> {
    write_lines(
        path.as_ref(),
        "fpr,tpr,threshold",
        curve.iter().map(|p| format!("{},{},{}", p.fpr, p.tpr, fmt_threshold(p.threshold))),
    )
}

pub fn write_pr_csv(path: impl AsRef<Path>, curve: &[PrPoint]) -> Result<()> {
    write_lines(
        path.as_ref(),
        "recall,precision,threshold",
        curve.iter().map(|p| format!("{},{},{}", p.recall, p.precision, fmt_threshold(p.threshold))),
    )
}

pub fn write_vertical_roc_csv(path: impl AsRef<Path>, curve: &[(f64, f64)]) -> Result<()> {
    write_lines(path.as_ref(), "fpr,tpr", curve.iter().map(|(x, y)| format!("{x},{y}")))
}

pub fn write_vertical_pr_csv(path: impl AsRef<Path>, curve: &[(f64, f64)]) -> Result<()> {
    write_lines(path.as_ref(), "recall,precision", curve.iter().map(|(x, y)| format!("{x},{y}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roc_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("curves/roc.csv");
        let curve = crate::eval::roc_curve(&[0.9, 0.1], &[true, false]).unwrap();
        write_roc_csv(&p, &curve).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines, ["fpr,tpr,threshold", "0,0,inf", "0,1,0.9", "1,1,0.1"]);
    }
}
