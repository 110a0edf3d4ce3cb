use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Attribution, SubsetCounts};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::experiment::{run_experiment, ExperimentConfig, Method};
use crate::game::GameResult;
use crate::inference::LogisticModel;
use crate::query::{Axis, QueryMultiset, QuerySyntax};

/// Width of vulnerability histogram bins (2.5 percentage points).
pub const HISTOGRAM_BIN_WIDTH: f64 = 0.025;

const Z95: f64 = 1.959_963_984_540_054;

/// Wall-clock seconds. The only nondeterministic part of a report.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Timing {
    pub search_seconds: f64,
    pub game_seconds: f64,
    pub explain_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explainability {
    pub dflq: SubsetCounts,
    pub gdflq: SubsetCounts,
    pub dflq_attribution: Option<Attribution>,
    pub gdflq_attribution: Option<Attribution>,
}

/// Result of attacking one target in one repetition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserReport {
    pub repetition: usize,
    pub user_id: u64,
    pub known_attributes: Vec<String>,
    pub method: Method,
    pub accuracy: f64,
    /// 95% Wilson interval of the game accuracy.
    pub ci: (f64, f64),
    pub game: Option<GameResult>,
    pub best_fitness: Option<f64>,
    pub multiset_sql: Vec<String>,
    pub multiset: Option<QueryMultiset>,
    pub model: Option<LogisticModel>,
    pub syntax: Option<QuerySyntax>,
    pub stage_choices: Vec<Axis>,
    pub trace: Vec<f64>,
    pub stability: Option<f64>,
    pub fleet_requests: u64,
    /// `"predicted"`, or `"abstained"` when the differential attack found
    /// no usable pair in any repetition.
    pub status: String,
    pub explain: Option<Explainability>,
    pub timing: Timing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub mean_accuracy: f64,
    /// Population standard deviation of per-run accuracies.
    pub std_accuracy: f64,
    /// Wins over all games of all runs.
    pub pooled_accuracy: f64,
    pub pooled_games: usize,
    pub pooled_ci: (f64, f64),
    pub mean_stability: Option<f64>,
}

impl Aggregate {
    pub fn from_users(users: &[UserReport]) -> Self {
        let n = users.len();
        let acc: Vec<f64> = users.iter().map(|u| u.accuracy).collect();
        let mean = if n == 0 { 0.0 } else { acc.iter().sum::<f64>() / n as f64 };
        let std = if n == 0 {
            0.0
        } else {
            (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
        };
        let (wins, games) = users
            .iter()
            .filter_map(|u| u.game.as_ref())
            .fold((0usize, 0usize), |(w, g), r| {
                (w + r.wins.iter().filter(|x| **x).count(), g + r.wins.len())
            });
        let pooled = if games == 0 { 0.0 } else { wins as f64 / games as f64 };
        let stabilities: Vec<f64> = users.iter().filter_map(|u| u.stability).collect();
        Aggregate {
            runs: n,
            mean_accuracy: mean,
            std_accuracy: std,
            pooled_accuracy: pooled,
            pooled_games: games,
            pooled_ci: wilson_interval(pooled, games),
            mean_stability: (!stabilities.is_empty())
                .then(|| stabilities.iter().sum::<f64>() / stabilities.len() as f64),
        }
    }
}

/// Full output of an attack experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub config: ExperimentConfig,
    pub aggregate: Aggregate,
    pub users: Vec<UserReport>,
    pub timing: Timing,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    repetition: usize,
    user_id: u64,
    method: Method,
    accuracy: f64,
    ci_low: f64,
    ci_high: f64,
    best_fitness: Option<f64>,
    stability: Option<f64>,
    status: String,
    search_seconds: f64,
}

impl AttackReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }

    /// One row per target and repetition.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for u in &self.users {
            w.serialize(CsvRow {
                repetition: u.repetition,
                user_id: u.user_id,
                method: u.method,
                accuracy: u.accuracy,
                ci_low: u.ci.0,
                ci_high: u.ci.1,
                best_fitness: u.best_fitness,
                stability: u.stability,
                status: u.status.clone(),
                search_seconds: u.timing.search_seconds,
            })?;
        }
        w.flush().map_err(|e| Error::InvalidParameter(format!("csv flush failed: {e}")))?;
        Ok(())
    }

    /// Accuracies read back from a CSV written by [`AttackReport::write_csv`].
    pub fn read_csv_accuracies<R: std::io::Read>(reader: R) -> Result<Vec<(usize, u64, f64)>> {
        csv::Reader::from_reader(reader)
            .deserialize::<CsvRow>()
            .map(|r| {
                let r = r?;
                Ok((r.repetition, r.user_id, r.accuracy))
            })
            .collect()
    }
}

/// 95% Wilson score interval for `accuracy` observed over `n` trials.
pub fn wilson_interval(accuracy: f64, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let z2 = Z95 * Z95;
    let center = (accuracy + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = Z95 / (1.0 + z2 / n) * (accuracy * (1.0 - accuracy) / n + z2 / (4.0 * n * n)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Counts of accuracies in fixed bins of [`HISTOGRAM_BIN_WIDTH`] covering
/// `[0, 1]`, as `(bin_start, count)`. An accuracy of exactly 1 falls in the
/// last bin.
pub fn histogram(accuracies: &[f64]) -> Vec<(f64, usize)> {
    let bins = (1.0 / HISTOGRAM_BIN_WIDTH).round() as usize;
    let mut counts = vec![0usize; bins];
    for &a in accuracies {
        // accuracies are k/R; nudge to avoid k/R landing just below an edge
        let i = ((a / HISTOGRAM_BIN_WIDTH) + 1e-9).floor().clamp(0.0, (bins - 1) as f64);
        counts[i as usize] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (i as f64 * 25.0 / 1000.0, c))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanEntry {
    pub repetition: usize,
    pub user_id: u64,
    pub accuracy: f64,
}

/// Per-target accuracies sorted ascending and their histogram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub entries: Vec<ScanEntry>,
    pub histogram: Vec<(f64, usize)>,
    /// `max - min` accuracy over the scanned targets.
    pub spread: f64,
    pub report: AttackReport,
}

/// Attacks every configured target and tabulates how vulnerable each is.
pub fn vulnerability_scan(data: &Dataset, config: &ExperimentConfig) -> Result<ScanReport> {
    let report = run_experiment(data, config)?;
    let mut entries: Vec<ScanEntry> = report
        .users
        .iter()
        .map(|u| ScanEntry {
            repetition: u.repetition,
            user_id: u.user_id,
            accuracy: u.accuracy,
        })
        .collect();
    entries.sort_by(|a, b| {
        a.accuracy
            .total_cmp(&b.accuracy)
            .then(a.repetition.cmp(&b.repetition))
            .then(a.user_id.cmp(&b.user_id))
    });
    let accuracies: Vec<f64> = entries.iter().map(|e| e.accuracy).collect();
    let spread = match (accuracies.first(), accuracies.last()) {
        (Some(lo), Some(hi)) => hi - lo,
        _ => 0.0,
    };
    Ok(ScanReport {
        histogram: histogram(&accuracies),
        entries,
        spread,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_matches_reference_values() {
        // 160/200: reference interval (0.7390, 0.8496)
        let (lo, hi) = wilson_interval(0.8, 200);
        assert!((lo - 0.7390).abs() < 1e-3 && (hi - 0.8496).abs() < 1e-3, "{lo} {hi}");
        let (lo, hi) = wilson_interval(0.5, 1000);
        assert!(lo < 0.5 && hi > 0.5);
    }

    #[test]
    fn histogram_bins_sum_and_edges() {
        let acc = [0.0, 0.5, 0.525, 0.5249, 1.0, 0.975, 0.07];
        let h = histogram(&acc);
        assert_eq!(h.len(), 40);
        assert_eq!(h.iter().map(|b| b.1).sum::<usize>(), acc.len());
        assert_eq!(h[20], (0.5, 2));
        assert_eq!(h[21], (0.525, 1));
        assert_eq!(h[39], (0.975, 2));
        assert_eq!(h[2], (0.05, 1));
    }
}
