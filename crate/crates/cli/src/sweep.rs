//! Sweep rows and their CSV form.
//!
//! Columns: `indicator, keep_rate, fusion, overlap, gflops, images_per_sec,
//! top1`. Unmeasured columns are left empty. Floats are written at full
//! precision, so parsing a file and writing it back gives the same bytes.

use patchprune::cost::model_gflops;
use patchprune::model::ModelConfig;
use patchprune::IndicatorKind;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::flags::OnOff;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub indicator: IndicatorKind,
    pub keep_rate: f64,
    pub fusion: OnOff,
    pub overlap: OnOff,
    pub gflops: f64,
    pub images_per_sec: Option<f64>,
    pub top1: Option<f64>,
}

impl SweepRow {
    /// Row for `cfg` with the analytic GFLOPs filled in.
    pub fn for_config(cfg: &ModelConfig) -> Result<Self, CliError> {
        let report = model_gflops(cfg)?;
        Ok(SweepRow {
            indicator: cfg.indicator,
            keep_rate: cfg.keep_rate,
            fusion: cfg.fusion_enabled.into(),
            overlap: cfg.is_overlapping().into(),
            gflops: report.total_gflops,
            images_per_sec: None,
            top1: None,
        })
    }
}

pub fn rows_to_csv(rows: &[SweepRow]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Output(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn rows_from_csv(text: &str) -> Result<Vec<SweepRow>, CliError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(CliError::from)).collect()
}

/// Fixed-width table with two decimals, for terminals.
pub fn rows_to_table(rows: &[SweepRow]) -> String {
    let opt = |v: Option<f64>, prec: usize| v.map_or("-".to_string(), |x| format!("{x:.prec$}"));
    let mut s = format!(
        "{:<9} {:>6} {:>6} {:>7} {:>7} {:>10} {:>7}\n",
        "indicator", "r", "fusion", "overlap", "GFLOPs", "images/s", "top1"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<9} {:>6.2} {:>6} {:>7} {:>7.2} {:>10} {:>7}\n",
            r.indicator.as_str(),
            r.keep_rate,
            if r.fusion.is_on() { "on" } else { "off" },
            if r.overlap.is_on() { "on" } else { "off" },
            r.gflops,
            opt(r.images_per_sec, 1),
            opt(r.top1, 4),
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_byte_identical() {
        let rows = vec![
            SweepRow {
                indicator: IndicatorKind::Variance,
                keep_rate: 0.7,
                fusion: OnOff::On,
                overlap: OnOff::Off,
                gflops: 3.013_456_789_012_345,
                images_per_sec: None,
                top1: None,
            },
            SweepRow {
                indicator: IndicatorKind::Medad,
                keep_rate: 0.3,
                fusion: OnOff::Off,
                overlap: OnOff::On,
                gflops: 3.104,
                images_per_sec: Some(1234.5678),
                top1: Some(0.5),
            },
        ];
        let text = rows_to_csv(&rows).unwrap();
        assert!(text.starts_with("indicator,keep_rate,fusion,overlap,gflops,images_per_sec,top1\n"));
        let parsed = rows_from_csv(&text).unwrap();
        assert_eq!(parsed, rows);
        assert_eq!(rows_to_csv(&parsed).unwrap(), text);
    }
}
