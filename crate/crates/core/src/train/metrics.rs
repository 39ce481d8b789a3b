use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,val_acc_ma5,wall_seconds";

/// Smoothing window applied to validation accuracy.
pub const MA_WINDOW: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub wall_seconds: f64,
}

/// Trailing mean: `out[i]` averages `series[max(0, i+1-window) ..= i]`.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    assert!(window >= 1, "moving average window must be at least 1");
    (0..series.len())
        .map(|i| {
            let start = (i + 1).saturating_sub(window);
            let slice = &series[start..=i];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect()
}

/// `%g`-style formatting with six significant digits.
pub fn fmt_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{mantissa}e{sign}{:02}", exp.abs());
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Validation accuracy smoothed over the trailing [`MA_WINDOW`] epochs.
pub fn smoothed_val_acc(rows: &[EpochMetrics]) -> Vec<f64> {
    let acc: Vec<f64> = rows.iter().map(|r| r.val_acc).collect();
    moving_average(&acc, MA_WINDOW)
}

/// First 1-based epoch whose smoothed validation accuracy reaches `threshold`.
pub fn epochs_to_threshold(rows: &[EpochMetrics], threshold: f64) -> Option<usize> {
    smoothed_val_acc(rows)
        .iter()
        .zip(rows)
        .find(|(ma, _)| **ma >= threshold)
        .map(|(_, r)| r.epoch)
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (row, ma) in rows.iter().zip(smoothed_val_acc(rows)) {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            row.epoch,
            fmt_sig6(row.train_loss),
            fmt_sig6(row.train_acc),
            fmt_sig6(row.val_loss),
            fmt_sig6(row.val_acc),
            fmt_sig6(ma),
            fmt_sig6(row.wall_seconds),
        );
    }
    out
}

pub fn write_metrics_csv(rows: &[EpochMetrics], path: &Path) -> Result<()> {
    std::fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn trailing_means() {
        let out = moving_average(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 5);
        assert_eq!(out, vec![1.0, 1.5, 2.0, 2.5, 3.0, 4.0]);
        assert_eq!(moving_average(&[3.0, 1.0, 2.0], 1), vec![3.0, 1.0, 2.0]);
        assert!(moving_average(&[], 5).is_empty());
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(fmt_sig6(0.0), "0");
        assert_eq!(fmt_sig6(1.0), "1");
        assert_eq!(fmt_sig6(0.5), "0.5");
        assert_eq!(fmt_sig6(1.3862943611), "1.38629");
        assert_eq!(fmt_sig6(123456.7), "123457");
        assert_eq!(fmt_sig6(1234567.0), "1.23457e+06");
        assert_eq!(fmt_sig6(0.000123456789), "0.000123457");
        assert_eq!(fmt_sig6(0.0000123456789), "1.23457e-05");
        assert_eq!(fmt_sig6(-2.5), "-2.5");
        assert_eq!(fmt_sig6(0.9999999), "1");
    }

    #[test]
    fn threshold_uses_smoothed_series() {
        let rows: Vec<_> = [0.5, 1.0, 1.0, 1.0]
            .iter()
            .enumerate()
            .map(|(i, &a)| EpochMetrics {
                epoch: i + 1,
                train_loss: 0.0,
                train_acc: 0.0,
                val_loss: 0.0,
                val_acc: a,
                wall_seconds: 0.0,
            })
            .collect();
        // ma5: 0.5, 0.75, 0.8333, 0.875
        assert_eq!(epochs_to_threshold(&rows, 0.8), Some(3));
        assert_eq!(epochs_to_threshold(&rows, 0.9), None);
        let csv = metrics_csv(&rows);
        assert!(csv.starts_with(CSV_HEADER));
        assert!(csv.contains("\n3,0,0,0,1,0.833333,0\n"));
    }

    proptest! {
        #[test]
        fn constant_series_is_fixed(v in -1e3f64..1e3, n in 0usize..20, w in 1usize..8) {
            let s = vec![v; n];
            for x in moving_average(&s, w) {
                prop_assert!((x - v).abs() <= 1e-12 * v.abs().max(1.0));
            }
        }

        #[test]
        fn never_exceeds_running_max(s in proptest::collection::vec(-10.0f64..10.0, 1..30), w in 1usize..8) {
            let ma = moving_average(&s, w);
            let mut running = f64::NEG_INFINITY;
            for (x, m) in s.iter().zip(ma) {
                running = running.max(*x);
                prop_assert!(m <= running + 1e-12);
            }
        }
    }
}
