//! Human-readable and tab-separated metric reports, and epoch log lines.

use std::fmt::Write as _;

use nadex_core::eval::MetricReport;
use nadex_core::objectives::EpochSummary;

use crate::error::{CliError, Result};

pub const TSV_HEADER: &str = "metric\tvalue\tquery_count";

/// Header of the per-epoch training log.
pub const EPOCH_HEADER: &str = "epoch\tL_r\tL_neg\tL_total\tseconds";

pub fn epoch_line(epoch: usize, summary: &EpochSummary, seconds: f64) -> String {
    format!(
        "{epoch}\t{}\t{}\t{}\t{seconds:.3}",
        summary.reconstruction, summary.negative, summary.total
    )
}

/// Aligned table for terminals.
pub fn table(title: &str, r: &MetricReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{title} ({} queries)", r.count);
    for (name, v) in [("MRR", r.mrr), ("Hits@1", r.hits1), ("Hits@3", r.hits3), ("Hits@10", r.hits10)] {
        let _ = writeln!(out, "  {name:<8} {:>8.4}", v);
    }
    out
}

/// One row per metric plus a final row carrying every per-query rank, so
/// the report parses back losslessly.
pub fn to_tsv(r: &MetricReport) -> String {
    let mut out = String::from(TSV_HEADER);
    out.push('\n');
    for (name, v) in [("mrr", r.mrr), ("hits@1", r.hits1), ("hits@3", r.hits3), ("hits@10", r.hits10)] {
        let _ = writeln!(out, "{name}\t{v}\t{}", r.count);
    }
    let ranks: Vec<String> = r.ranks.iter().map(usize::to_string).collect();
    let _ = writeln!(out, "ranks\t{}\t{}", ranks.join(","), r.count);
    out
}

pub fn from_tsv(text: &str) -> Result<MetricReport> {
    let bad = |m: String| CliError::Config(format!("metric report: {m}"));
    let mut lines = text.lines();
    if lines.next() != Some(TSV_HEADER) {
        return Err(bad("missing header".into()));
    }
    let mut values = [None; 4];
    let mut ranks = None;
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(bad(format!("malformed row `{line}`")));
        }
        let slot = match f[0] {
            "mrr" => 0,
            "hits@1" => 1,
            "hits@3" => 2,
            "hits@10" => 3,
            "ranks" => {
                let parsed = f[1]
                    .split(',')
                    .map(|s| s.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad("bad rank list".into()))?;
                ranks = Some(parsed);
                continue;
            }
            other => return Err(bad(format!("unknown metric `{other}`"))),
        };
        values[slot] = Some(f[1].parse::<f64>().map_err(|_| bad(format!("bad value `{}`", f[1])))?);
    }
    let ranks = ranks.ok_or_else(|| bad("missing ranks row".into()))?;
    let report = MetricReport::from_ranks(ranks)?;
    let stored = [report.mrr, report.hits1, report.hits3, report.hits10];
    for (v, s) in values.iter().zip(stored) {
        match v {
            Some(v) if v.to_bits() == s.to_bits() => {}
            _ => return Err(bad("summary rows disagree with ranks".into())),
        }
    }
    Ok(report)
}
