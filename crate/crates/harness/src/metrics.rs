//! Append-only training log written as CSV.

use std::fmt::Write as _;

pub const CSV_HEADER: &str = "iter,loss,psnr,seconds,count";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub experiment: String,
    pub iter: usize,
    /// Mean squared error of the evaluation renders.
    pub loss: f64,
    pub psnr: f64,
    pub seconds: f64,
    /// Primitives (splat) or samples per ray (volume).
    pub count: usize,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!("{},{:.9e},{:.6},{:.3},{}", self.iter, self.loss, self.psnr, self.seconds, self.count)
    }
}

pub fn to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_line());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_header_and_columns() {
        let r = MetricsRow {
            experiment: "x".into(),
            iter: 10,
            loss: 0.0125,
            psnr: 19.03,
            seconds: 0.0,
            count: 48,
        };
        let csv = to_csv(&[r.clone(), r]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "10,1.250000000e-2,19.030000,0.000,48");
        assert!(lines.iter().all(|l| l.split(',').count() == 5));
    }
}
