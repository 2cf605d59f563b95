use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{write_file, Result};
use crate::evaluation::{MetricReport, REAL_SYSTEM};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    Higher,
    Lower,
    /// Best is the value nearest the real row.
    ClosestToReal,
}

impl Orientation {
    pub fn arrow(self) -> &'static str {
        match self {
            Orientation::Higher => "↑",
            Orientation::Lower => "↓",
            Orientation::ClosestToReal => "→",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Metric {
    pub name: &'static str,
    pub orientation: Orientation,
}

pub const METRICS: [Metric; 6] = [
    Metric { name: "top1", orientation: Orientation::Higher },
    Metric { name: "top2", orientation: Orientation::Higher },
    Metric { name: "top3", orientation: Orientation::Higher },
    Metric { name: "fid", orientation: Orientation::Lower },
    Metric { name: "diversity", orientation: Orientation::ClosestToReal },
    Metric { name: "mean_similarity", orientation: Orientation::Higher },
];

impl Metric {
    pub fn value(&self, r: &MetricReport) -> Option<f64> {
        match self.name {
            "top1" => Some(r.top1),
            "top2" => Some(r.top2),
            "top3" => Some(r.top3),
            "fid" => Some(r.fid),
            "diversity" => Some(r.diversity),
            "mean_similarity" => r.mean_similarity,
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mark {
    None,
    Best,
    Second,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub rows: Vec<MetricReport>,
    /// `marks[row][metric]`, aligned with `METRICS`.
    pub marks: Vec<Vec<Mark>>,
    pub warnings: Vec<String>,
}

fn is_real(r: &MetricReport) -> bool {
    r.system.eq_ignore_ascii_case(REAL_SYSTEM)
}

/// Ranks every non-real row per metric. Equal scores share a mark; the
/// second mark goes to the next distinct score. A lone system gets no marks.
pub fn compare(reports: &[MetricReport]) -> Comparison {
    let mut warnings = Vec::new();
    let prints: Vec<&str> = reports.iter().map(|r| r.fingerprint.as_str()).filter(|f| !f.is_empty()).collect();
    if prints.windows(2).any(|w| w[0] != w[1]) {
        let msg = "reports carry different config fingerprints".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let real = reports.iter().find(|r| is_real(r));
    let mut marks = vec![vec![Mark::None; METRICS.len()]; reports.len()];
    for (m, metric) in METRICS.iter().enumerate() {
        let target = match metric.orientation {
            Orientation::ClosestToReal => match real.and_then(|r| metric.value(r)) {
                Some(v) => Some(v),
                None => {
                    warnings.push(format!("no real row: `{}` is left unranked", metric.name));
                    continue;
                }
            },
            _ => None,
        };
        let key = |v: f64| match metric.orientation {
            Orientation::Higher => -v,
            Orientation::Lower => v,
            Orientation::ClosestToReal => (v - target.expect("set above")).abs(),
        };
        let scored: Vec<(usize, f64)> = reports
            .iter()
            .enumerate()
            .filter(|(_, r)| !is_real(r))
            .filter_map(|(i, r)| metric.value(r).filter(|v| v.is_finite()).map(|v| (i, key(v))))
            .collect();
        if scored.len() < 2 {
            continue;
        }
        let mut distinct: Vec<f64> = scored.iter().map(|s| s.1).collect();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        for &(i, k) in &scored {
            if k == distinct[0] {
                marks[i][m] = Mark::Best;
            } else if distinct.len() > 1 && k == distinct[1] {
                marks[i][m] = Mark::Second;
            }
        }
    }
    Comparison {
        rows: reports.to_vec(),
        marks,
        warnings,
    }
}

/// Markdown table; best values in bold, second best underlined.
pub fn render_table(c: &Comparison) -> String {
    let mut out = String::from("| system |");
    for m in &METRICS {
        let _ = write!(out, " {} {} |", m.name, m.orientation.arrow());
    }
    out.push_str(" count |\n|---|");
    for _ in &METRICS {
        out.push_str("---:|");
    }
    out.push_str("---:|\n");
    for (row, marks) in c.rows.iter().zip(&c.marks) {
        let _ = write!(out, "| {} |", row.system);
        for (m, mark) in METRICS.iter().zip(marks) {
            let cell = match m.value(row) {
                Some(v) => format!("{v:.4}"),
                None => "-".into(),
            };
            let _ = match mark {
                Mark::Best => write!(out, " **{cell}** |"),
                Mark::Second => write!(out, " <u>{cell}</u> |"),
                Mark::None => write!(out, " {cell} |"),
            };
        }
        let _ = writeln!(out, " {} |", row.count);
    }
    out
}

/// One `system,value` CSV per metric in `dir`, for external plotting.
pub fn write_series(dir: &Path, reports: &[MetricReport]) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::with_capacity(METRICS.len());
    for m in &METRICS {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["system", "value"])?;
        for r in reports {
            let v = m.value(r).map(|v| v.to_string()).unwrap_or_default();
            w.write_record([r.system.as_str(), v.as_str()])?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| crate::error::Error::validation(format!("csv flush: {e}")))?;
        let path = dir.join(format!("{}.csv", m.name));
        write_file(&path, &bytes)?;
        paths.push(path);
    }
    Ok(paths)
}
