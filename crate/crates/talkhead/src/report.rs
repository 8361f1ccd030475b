//! Text reports: tab-separated metric tables and training run reports.

use std::fmt::Write as _;
use std::path::Path;

use talkhead_core::train::{FrameMetrics, GateReport, StepLog};

use crate::config::RunConfig;
use crate::fsio::{self, IoError};

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

/// Column means of a metrics table: `(psnr, ssim, lmd)`.
pub fn summary(rows: &[FrameMetrics]) -> (Option<f64>, Option<f64>, Option<f64>) {
    (
        mean(rows.iter().map(|r| r.psnr)),
        mean(rows.iter().map(|r| r.ssim)),
        mean(rows.iter().filter_map(|r| r.lmd)),
    )
}

/// `frame psnr ssim lmd` rows plus a closing `mean` row.
pub fn metrics_table(rows: &[FrameMetrics]) -> String {
    let mut out = String::from("frame\tpsnr\tssim\tlmd\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{:.4}\t{:.6}\t{}", r.frame, r.psnr, r.ssim, opt(r.lmd));
    }
    let (p, s, l) = summary(rows);
    let _ = writeln!(out, "mean\t{}\t{}\t{}", opt(p), opt(s), opt(l));
    out
}

/// Accumulates losses during training and renders the run report.
#[derive(Debug, Clone, Default)]
pub struct RunReport {
    window: usize,
    acc: [f64; 5],
    seen: [usize; 5],
    count: usize,
    last: usize,
    rows: Vec<String>,
    sections: Vec<String>,
}

impl RunReport {
    /// Average losses over `window` iterations per table row.
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
            ..Self::default()
        }
    }

    pub fn record(&mut self, log: &StepLog, elapsed: f64) -> Option<&str> {
        let l = &log.losses;
        for (k, v) in [Some(log.total), Some(l.render), l.kl, l.score, l.geo]
            .into_iter()
            .enumerate()
        {
            if let Some(v) = v {
                self.acc[k] += v;
                self.seen[k] += 1;
            }
        }
        self.count += 1;
        self.last = log.iteration + 1;
        if self.count < self.window {
            return None;
        }
        self.emit(elapsed)
    }

    /// Emit a row for a partly filled window.
    pub fn flush(&mut self, elapsed: f64) -> Option<&str> {
        if self.count == 0 {
            return None;
        }
        self.emit(elapsed)
    }

    fn emit(&mut self, elapsed: f64) -> Option<&str> {
        let cols: Vec<String> = (0..5)
            .map(|k| {
                if self.seen[k] == 0 {
                    "-".into()
                } else {
                    format!("{:.6}", self.acc[k] / self.seen[k] as f64)
                }
            })
            .collect();
        self.rows
            .push(format!("{}\t{}\t{elapsed:.1}", self.last, cols.join("\t")));
        self.acc = [0.0; 5];
        self.seen = [0; 5];
        self.count = 0;
        self.rows.last().map(String::as_str)
    }

    pub fn add_metrics(&mut self, identity: &str, rows: &[FrameMetrics]) {
        let (p, s, l) = summary(rows);
        self.sections.push(format!(
            "metrics {identity}: psnr {} ssim {} lmd {} ({} frames)",
            opt(p),
            opt(s),
            opt(l),
            rows.len()
        ));
    }

    pub fn add_gate(&mut self, identity: &str, g: &GateReport) {
        self.sections.push(format!(
            "gate {identity}: mae {:.4} argmax agreement {:.3} ({} frames, {} with e > 0.5)",
            g.mae, g.argmax_agreement, g.frames, g.emotional_frames
        ));
    }

    pub fn add_line(&mut self, line: impl Into<String>) {
        self.sections.push(line.into());
    }

    pub fn render(&self, title: &str, run: &RunConfig, wall: f64) -> String {
        let mut out = format!(
            "# {title}\n\nwall time {wall:.1} s\nconfig hash {:016x}\n\n",
            run.hash()
        );
        out.push_str("## settings against the reference\nkey\tthis run\treference\tstatus\n");
        for line in run.reference_comparison() {
            out.push_str(&line);
            out.push('\n');
        }
        out.push_str("\n## losses\niteration\ttotal\trender\tkl\tscore\tgeo\tseconds\n");
        for r in &self.rows {
            out.push_str(r);
            out.push('\n');
        }
        if !self.sections.is_empty() {
            out.push_str("\n## results\n");
            for s in &self.sections {
                out.push_str(s);
                out.push('\n');
            }
        }
        out.push_str("\n## config\n");
        out.push_str(&run.canonical());
        out
    }

    pub fn save(&self, path: &Path, title: &str, run: &RunConfig, wall: f64) -> Result<(), IoError> {
        fsio::write_atomic(path, self.render(title, run, wall).as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_has_a_mean_row() {
        let rows = [
            FrameMetrics {
                frame: 0,
                psnr: 30.0,
                ssim: 0.9,
                lmd: Some(1.0),
            },
            FrameMetrics {
                frame: 1,
                psnr: 40.0,
                ssim: 1.0,
                lmd: None,
            },
        ];
        let t = metrics_table(&rows);
        assert!(t.starts_with("frame\tpsnr\tssim\tlmd\n0\t30.0000"));
        assert!(t.ends_with("mean\t35.0000\t0.9500\t1.0000\n"), "{t}");
    }
}
