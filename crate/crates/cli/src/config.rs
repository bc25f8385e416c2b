//! Run configuration: a declarative JSON file merged with command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use minwidth::{Loss, Metric, ProbedFold, TrainSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// 1e-3, patience 3.
    Constant,
    /// 1e-3 down to 1e-6, patience 10.
    Decreasing,
}

impl std::str::FromStr for ScheduleKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        match s {
            "constant" => Ok(ScheduleKind::Constant),
            "decreasing" => Ok(ScheduleKind::Decreasing),
            _ => bail!("unknown schedule {s:?} (expected constant or decreasing)"),
        }
    }
}

impl ScheduleKind {
    pub fn build(self, loss: Loss, max_epochs: Option<usize>) -> TrainSchedule {
        let mut s = match self {
            ScheduleKind::Constant => TrainSchedule::constant(loss),
            ScheduleKind::Decreasing => TrainSchedule::decreasing(loss),
        };
        if let Some(m) = max_epochs {
            s.max_epochs = m;
        }
        s
    }
}

/// Every field is optional; unset fields fall back to the recipe, then to
/// built-in defaults. The resolved form is written next to each run's
/// outputs so it can be replayed with `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Recipe name (`mnist8`, `mnist28`, `fashion`, `california`, `wine`),
    /// `csv:<path>` or `idx:<images>,<labels>`.
    pub dataset: Option<String>,
    /// Root directory for recipe files.
    pub data_dir: Option<PathBuf>,
    /// Target column for `csv:` datasets.
    pub target: Option<String>,
    /// Held-out test set, same syntax as `dataset` (recipe test sets are built in).
    pub test: Option<String>,
    /// Fraction split off as the test set when no test file is given.
    pub test_fraction: Option<f64>,
    /// Reduce 28x28 images to 8x8.
    pub downscale: Option<bool>,
    /// Use only the first N training samples.
    pub limit: Option<usize>,
    pub formula: Option<String>,
    /// Width multiplier substituted for `p` in the formula.
    pub width_multiplier: Option<usize>,
    pub folds: Option<usize>,
    pub metric: Option<Metric>,
    pub seed: Option<u64>,
    pub bootstrap_n: Option<usize>,
    pub layers: Option<Vec<usize>>,
    pub jobs: Option<usize>,
    pub schedule: Option<ScheduleKind>,
    /// Schedule for the retrained networks in `verify`.
    pub verify_schedule: Option<ScheduleKind>,
    pub max_epochs: Option<usize>,
    pub sweep_points: Option<usize>,
    pub svd_rows: Option<usize>,
    /// Which network carries the autoencoder for a fold pair.
    pub probed_fold: Option<ProbedFold>,
    /// Directory of previously trained fold networks.
    pub networks: Option<PathBuf>,
    /// Widths for `verify`, as `layer=width` pairs.
    pub widths: Option<Vec<(usize, usize)>>,
    /// Estimate report whose widths `verify` should use.
    pub report: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let s = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&s).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Fields set in `over` replace those in `self`.
    pub fn merge(self, over: RunConfig) -> RunConfig {
        macro_rules! pick {
            ($($f:ident),*) => { RunConfig { $($f: over.$f.or(self.$f)),* } };
        }
        pick!(
            dataset,
            data_dir,
            target,
            test,
            test_fraction,
            downscale,
            limit,
            formula,
            width_multiplier,
            folds,
            metric,
            seed,
            bootstrap_n,
            layers,
            jobs,
            schedule,
            verify_schedule,
            max_epochs,
            sweep_points,
            svd_rows,
            probed_fold,
            networks,
            widths,
            report,
            out
        )
    }
}

/// `1=40,2=10` → `[(1, 40), (2, 10)]`.
pub fn parse_widths(s: &str) -> anyhow::Result<Vec<(usize, usize)>> {
    s.split(',')
        .map(|pair| {
            let (l, w) = pair
                .split_once('=')
                .with_context(|| format!("width {pair:?} is not of the form layer=width"))?;
            Ok((
                l.trim().parse().with_context(|| format!("bad layer index in {pair:?}"))?,
                w.trim().parse().with_context(|| format!("bad width in {pair:?}"))?,
            ))
        })
        .collect()
}

pub fn parse_layers(s: &str) -> anyhow::Result<Vec<usize>> {
    s.split(',')
        .map(|l| l.trim().parse().with_context(|| format!("bad layer index {l:?}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_win() {
        let file = RunConfig {
            folds: Some(3),
            seed: Some(1),
            ..Default::default()
        };
        let flags = RunConfig {
            seed: Some(7),
            ..Default::default()
        };
        let m = file.merge(flags);
        assert_eq!(m.folds, Some(3));
        assert_eq!(m.seed, Some(7));
    }

    #[test]
    fn widths_and_layers() {
        assert_eq!(parse_widths("1=40, 2=10").unwrap(), vec![(1, 40), (2, 10)]);
        assert!(parse_widths("1:40").is_err());
        assert_eq!(parse_layers("1,2").unwrap(), vec![1, 2]);
        assert!(parse_layers("a").is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"fold": 3}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"folds": 3, "metric": "mse", "schedule": "decreasing"}"#).unwrap();
        assert_eq!(c.metric, Some(Metric::Mse));
        assert_eq!(c.schedule, Some(ScheduleKind::Decreasing));
    }
}
