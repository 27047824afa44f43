//! Run metadata and the comparison report.
//!
//! Every command writes a `run.meta` key=value file (command, dataset,
//! wall-clock timestamps) and evaluation commands write `metrics.json`.
//! The report command collects any number of run directories into a
//! comparison table (model, dataset, mIoU, DSC, training time) plus a
//! per-epoch progression table from each run's `history.csv`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, MetricsRecord};

/// Wall-clock provenance of one run directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMeta {
    pub command: String,
    pub dataset: String,
    pub start_unix: u64,
    pub end_unix: u64,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunMeta {
    pub fn to_text(&self) -> String {
        format!(
            "command={}\ndataset={}\nstart_unix={}\nend_unix={}\nengine_version={}\n",
            self.command,
            self.dataset,
            self.start_unix,
            self.end_unix,
            env!("CARGO_PKG_VERSION")
        )
    }

    pub fn parse(text: &str, source: &str) -> Result<RunMeta> {
        let mut command = None;
        let mut dataset = None;
        let mut start = None;
        let mut end = None;
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                match k {
                    "command" => command = Some(v.to_string()),
                    "dataset" => dataset = Some(v.to_string()),
                    "start_unix" => start = v.parse().ok(),
                    "end_unix" => end = v.parse().ok(),
                    _ => {}
                }
            }
        }
        Ok(RunMeta {
            command: command.ok_or_else(|| Error::data(format!("{source}: missing command")))?,
            dataset: dataset.unwrap_or_default(),
            start_unix: start.ok_or_else(|| Error::data(format!("{source}: missing start_unix")))?,
            end_unix: end.ok_or_else(|| Error::data(format!("{source}: missing end_unix")))?,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("run.meta"), self.to_text())?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<RunMeta> {
        let path = dir.join("run.meta");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        RunMeta::parse(&text, &path.display().to_string())
    }
}

/// Contents of `metrics.json`: the metrics plus the confusion matrix they
/// were computed from, so they can be recomputed and verified exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub metrics: MetricsRecord,
    pub confusion: Vec<Vec<u64>>,
}

impl EvalReport {
    pub fn new(metrics: MetricsRecord, cm: &ConfusionMatrix) -> EvalReport {
        EvalReport { metrics, confusion: cm.rows() }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::data(format!("metrics serialization failed: {e}")))?;
        std::fs::write(dir.join("metrics.json"), json)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<EvalReport> {
        let path = dir.join("metrics.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
    }

    pub fn confusion_matrix(&self) -> Result<ConfusionMatrix> {
        ConfusionMatrix::from_rows(&self.confusion)
    }
}

/// Human-readable duration in the largest sensible units.
pub fn format_duration(seconds: u64) -> String {
    let (d, h, m, s) = (seconds / 86_400, (seconds / 3_600) % 24, (seconds / 60) % 60, seconds % 60);
    if d > 0 {
        format!("{d}d-{h}h")
    } else if h > 0 {
        format!("{h}h-{m}m")
    } else if m > 0 {
        format!("{m}m")
    } else {
        format!("{s}s")
    }
}

struct HistoryRow {
    epoch: usize,
    pixel_acc: f64,
    miou: f64,
    dsc: f64,
}

fn read_history(dir: &Path) -> Result<Vec<HistoryRow>> {
    let path = dir.join("history.csv");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 6 {
            return Err(Error::data(format!("{}:{}: malformed history row", path.display(), i + 1)));
        }
        rows.push(HistoryRow {
            epoch: f[0].parse().map_err(|_| Error::data(format!("{}:{}: bad epoch", path.display(), i + 1)))?,
            pixel_acc: f[2].parse().unwrap_or(f64::NAN),
            miou: f[3].parse().unwrap_or(f64::NAN),
            dsc: f[4].parse().unwrap_or(f64::NAN),
        });
    }
    Ok(rows)
}

/// The assembled report: a text rendering and a machine-readable CSV.
pub struct Report {
    pub text: String,
    pub csv: String,
}

/// Build the comparison across run directories. The model label of a run
/// is its directory name; training time is end-start from `run.meta`.
pub fn build_report(run_dirs: &[PathBuf]) -> Result<Report> {
    if run_dirs.is_empty() {
        return Err(Error::config("report needs at least one run directory"));
    }
    let mut rows = Vec::new();
    for dir in run_dirs {
        let meta = RunMeta::read(dir)?;
        let eval = EvalReport::read(dir)?;
        let model = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let seconds = meta.end_unix.saturating_sub(meta.start_unix);
        rows.push((model, meta.dataset, eval.metrics.miou, eval.metrics.dsc, seconds, dir.clone()));
    }

    let mut text = String::new();
    let _ = writeln!(text, "{:<24}{:<16}{:>8}{:>8}  {:>10}", "Model", "Dataset", "mIoU", "DSC", "Time(Tr.)");
    let mut csv = String::from("model,dataset,miou,dsc,time_seconds\n");
    for (model, dataset, miou, dsc, seconds, _) in &rows {
        let _ = writeln!(
            text,
            "{:<24}{:<16}{:>8.3}{:>8.3}  {:>10}",
            model,
            dataset,
            miou,
            dsc,
            format_duration(*seconds)
        );
        let _ = writeln!(csv, "{model},{dataset},{miou},{dsc},{seconds}");
    }

    // per-run epoch progression where a history exists
    for (model, _, _, _, _, dir) in &rows {
        let Ok(history) = read_history(dir) else { continue };
        if history.is_empty() {
            continue;
        }
        let _ = writeln!(text, "\n{model} progression");
        let _ = writeln!(text, "{:<8}{:>16}{:>8}{:>8}", "Epoch", "Pixel Accuracy", "mIoU", "DSC");
        let step = (history.len() / 6).max(1);
        let mut shown: Vec<&HistoryRow> = history.iter().step_by(step).collect();
        if shown.last().map(|r| r.epoch) != history.last().map(|r| r.epoch) {
            shown.push(history.last().expect("non-empty"));
        }
        for row in shown {
            let _ = writeln!(text, "{:<8}{:>16.3}{:>8.3}{:>8.3}", row.epoch + 1, row.pixel_acc, row.miou, row.dsc);
        }
    }
    Ok(Report { text, csv })
}
