//! Plain-text rendering of a finished stream's logs.

use std::fmt::Write;

use vrloop_core::pipeline::{MetricsLog, Summary};
use vrloop_core::replay::ReplayStats;
use vrloop_core::synthworld::Category;

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.2}", 100.0 * x))
}

fn delta(b: Option<f64>, t: Option<f64>) -> String {
    b.zip(t).map_or_else(|| "n/a".to_string(), |(b, t)| format!("{:+.2}", 100.0 * (t - b)))
}

/// Category table (rates in percent) followed by the pair-economy line.
pub fn render(summary: &Summary) -> String {
    let empty = Default::default();
    let base = summary.baseline.as_ref().unwrap_or(&empty);
    let trained = summary.trained.as_ref().unwrap_or(&empty);
    let mut out = String::new();
    writeln!(out, "{:<14} {:>9} {:>9} {:>8}", "category", "baseline", "trained", "delta").unwrap();
    for c in Category::ALL {
        let (b, t) = (base.rate(c), trained.rate(c));
        writeln!(out, "{:<14} {:>9} {:>9} {:>8}", c.name(), pct(b), pct(t), delta(b, t)).unwrap();
    }
    let (b, t) = (base.overall(), trained.overall());
    writeln!(out, "{:<14} {:>9} {:>9} {:>8}", "overall", pct(b), pct(t), delta(b, t)).unwrap();
    writeln!(out).unwrap();
    writeln!(out, "{}", summary.economy_line()).unwrap();
    writeln!(
        out,
        "{} pair-yielding, {} exhausted, {} admitted, {} margin-filtered",
        summary.pair_yielding, summary.exhausted, summary.admitted, summary.filtered
    )
    .unwrap();
    out
}

/// Counts rebuilt from the per-prompt and per-burst records, with the
/// stored rates and buffer statistics carried over.
pub fn recompute(log: &MetricsLog) -> Summary {
    let stored = log.summary.as_ref();
    let buffer = stored.map_or(ReplayStats { size: 0, admitted: 0, evicted: 0, mean_progress: 0.0 }, |s| s.buffer);
    let mut s = Summary::from_records(&log.prompts, &log.bursts, buffer);
    if let Some(stored) = stored {
        s.baseline = stored.baseline.clone();
        s.trained = stored.trained.clone();
        s.max_lag = stored.max_lag;
        s.generation_events = stored.generation_events;
    }
    s
}
