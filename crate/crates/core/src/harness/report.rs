use std::fmt::Write as _;

use serde::Serialize;

use super::bench::{BenchMode, TrialRecord};
use super::HarnessError;

pub const CSV_HEADER: &str = "trial,mode,latency_ns,registry_lookups,cache_outcome";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Text,
}

/// Mean and sample standard deviation (n - 1 denominator) of trial latencies.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub mode: BenchMode,
    pub n: usize,
    pub mean_ns: f64,
    pub stddev_ns: f64,
    pub min_ns: u64,
    pub max_ns: u64,
}

pub fn summarize_latencies(mode: BenchMode, latencies: &[u64]) -> Result<Summary, HarnessError> {
    let n = latencies.len();
    if n < 2 {
        return Err(HarnessError::InsufficientSamples(n));
    }
    let sum: u128 = latencies.iter().map(|&x| x as u128).sum();
    let mean = sum as f64 / n as f64;
    let sq: f64 = latencies
        .iter()
        .map(|&x| {
            let d = x as f64 - mean;
            d * d
        })
        .sum();
    Ok(Summary {
        mode,
        n,
        mean_ns: mean,
        stddev_ns: (sq / (n - 1) as f64).sqrt(),
        min_ns: *latencies.iter().min().expect("n >= 2"),
        max_ns: *latencies.iter().max().expect("n >= 2"),
    })
}

/// Summarizes records that all share one mode.
pub fn summarize(records: &[TrialRecord]) -> Result<Summary, HarnessError> {
    let Some(first) = records.first() else {
        return Err(HarnessError::InsufficientSamples(0));
    };
    if records.iter().any(|r| r.mode != first.mode) {
        return Err(HarnessError::InvalidConfig("records mix benchmark modes".into()));
    }
    let latencies: Vec<u64> = records.iter().map(|r| r.latency_ns).collect();
    summarize_latencies(first.mode, &latencies)
}

/// Renders records as CSV or summaries as a text table.
pub fn emit_report(records: &[TrialRecord], summaries: &[Summary], format: ReportFormat) -> Result<String, HarnessError> {
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in records {
                w.serialize(r).map_err(|e| HarnessError::Io(e.into()))?;
            }
            if records.is_empty() {
                return Ok(format!("{CSV_HEADER}\n"));
            }
            let bytes = w.into_inner().map_err(|e| HarnessError::Io(e.into_error()))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        ReportFormat::Text => {
            let mut out = String::new();
            let _ = writeln!(
                out,
                "{:<11} {:>4} {:>28} {:>12} {:>12}",
                "mode", "n", "mean_ns ± stddev_ns", "min_ns", "max_ns"
            );
            for s in summaries {
                let _ = writeln!(
                    out,
                    "{:<11} {:>4} {:>28} {:>12} {:>12}",
                    s.mode.as_str(),
                    s.n,
                    format!("{:.1} ± {:.1}", s.mean_ns, s.stddev_ns),
                    s.min_ns,
                    s.max_ns
                );
            }
            let find = |m: BenchMode| summaries.iter().find(|s| s.mode == m);
            match (find(BenchMode::Uncached), find(BenchMode::Cached)) {
                (Some(u), Some(c)) if c.mean_ns > 0.0 => {
                    let _ = writeln!(out, "ratio uncached/cached mean: {:.2}", u.mean_ns / c.mean_ns);
                }
                _ => {
                    let _ = writeln!(out, "ratio uncached/cached mean: n/a");
                }
            }
            Ok(out)
        }
    }
}

/// Parses CSV produced by [`emit_report`].
pub fn parse_csv(content: &str) -> Result<Vec<TrialRecord>, HarnessError> {
    let mut rdr = csv::Reader::from_reader(content.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| HarnessError::Parse(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.join(",") != CSV_HEADER {
        return Err(HarnessError::Parse(format!("unexpected CSV header {:?}", header.join(","))));
    }
    rdr.deserialize()
        .map(|r| r.map_err(|e| HarnessError::Parse(e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::TrialOutcome;
    use proptest::prelude::*;

    fn rec(i: usize, mode: BenchMode, latency_ns: u64) -> TrialRecord {
        TrialRecord {
            trial_index: i,
            mode,
            latency_ns,
            registry_lookups_delta: 0,
            cache_outcome: TrialOutcome::Hit,
        }
    }

    #[test]
    fn constant_samples() {
        let s = summarize_latencies(BenchMode::Cached, &[10, 10, 10]).unwrap();
        assert_eq!((s.mean_ns, s.stddev_ns, s.min_ns, s.max_ns), (10.0, 0.0, 10, 10));
    }

    #[test]
    fn two_samples_hand_computed() {
        // (10 - 15)^2 + (20 - 15)^2 = 50, over n - 1 = 1.
        let s = summarize_latencies(BenchMode::Cached, &[10, 20]).unwrap();
        assert_eq!(s.mean_ns, 15.0);
        assert!((s.stddev_ns - 50f64.sqrt()).abs() <= 1e-9 * 50f64.sqrt());
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(
            summarize_latencies(BenchMode::Cached, &[5]),
            Err(HarnessError::InsufficientSamples(1))
        ));
        assert!(matches!(summarize(&[]), Err(HarnessError::InsufficientSamples(0))));
    }

    #[test]
    fn csv_layout() {
        let records: Vec<_> = (0..3).map(|i| rec(i, BenchMode::ColdClear, 100 + i as u64)).collect();
        let csv = emit_report(&records, &[], ReportFormat::Csv).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert_eq!(lines.next(), Some("0,cold-clear,100,0,hit"));
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(emit_report(&[], &[], ReportFormat::Csv).unwrap(), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn text_has_both_modes_and_ratio() {
        let u = summarize_latencies(BenchMode::Uncached, &[100, 300]).unwrap();
        let c = summarize_latencies(BenchMode::Cached, &[10, 30]).unwrap();
        let text = emit_report(&[], &[u, c], ReportFormat::Text).unwrap();
        assert!(text.contains("uncached"));
        assert!(text.lines().any(|l| l.starts_with("cached ")));
        assert!(text.contains("ratio uncached/cached mean: 10.00"));
    }

    #[test]
    fn bad_header_rejected() {
        assert!(matches!(parse_csv("a,b\n1,2\n"), Err(HarnessError::Parse(_))));
    }

    proptest! {
        #[test]
        fn summary_bounds(xs in prop::collection::vec(0u64..10_000_000_000, 2..200)) {
            let s = summarize_latencies(BenchMode::Uncached, &xs).unwrap();
            prop_assert!(s.min_ns as f64 <= s.mean_ns && s.mean_ns <= s.max_ns as f64);
            prop_assert!(s.stddev_ns >= 0.0);
        }

        #[test]
        fn csv_round_trip_reproduces_summary(xs in prop::collection::vec(0u64..u32::MAX as u64, 2..50)) {
            let records: Vec<_> = xs.iter().enumerate().map(|(i, &x)| rec(i, BenchMode::Uncached, x)).collect();
            let csv = emit_report(&records, &[], ReportFormat::Csv).unwrap();
            let parsed = parse_csv(&csv).unwrap();
            prop_assert_eq!(&parsed, &records);
            let (a, b) = (summarize(&records).unwrap(), summarize(&parsed).unwrap());
            prop_assert_eq!(a.mean_ns.to_bits(), b.mean_ns.to_bits());
            prop_assert_eq!(a.stddev_ns.to_bits(), b.stddev_ns.to_bits());
        }
    }
}
