//! Command execution.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use minwidth::report::{load_json, save_json, write_atomic};
use minwidth::search::{ensemble_from_networks, Ensemble};
use minwidth::{
    cross_validate_train, estimate_with_ensemble, verify_retrain, EstimateReport, FoldPlan, Network, TrainOutcome,
    VerificationReport,
};

use crate::config::RunConfig;
use crate::recipe::{plan, Loaded, Plan};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Estimate,
    Verify,
}

/// Summary of a `train` run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub val_q: Vec<f64>,
    pub mean_val_q: f64,
    pub outcomes: Vec<Option<TrainOutcome>>,
}

const FOLDS_FILE: &str = "folds.json";

fn network_file(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("fold_{i}.json"))
}

fn save_networks(ens: &Ensemble, dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (i, n) in ens.networks.iter().enumerate() {
        n.save_json(&network_file(dir, i))?;
    }
    save_json(&ens.plan, &dir.join(FOLDS_FILE))?;
    Ok(())
}

fn load_ensemble(dir: &Path, loaded: &Loaded) -> anyhow::Result<Ensemble> {
    let plan: FoldPlan = load_json(&dir.join(FOLDS_FILE))?;
    if plan.c != loaded.search.folds {
        bail!(
            "{} was trained with {} folds, but {} were requested",
            dir.display(),
            plan.c,
            loaded.search.folds
        );
    }
    let networks = (0..plan.c)
        .map(|i| Network::load_json(&network_file(dir, i)))
        .collect::<minwidth::Result<Vec<_>>>()?;
    if networks[0].architecture() != loaded.arch {
        bail!("networks in {} do not match the requested architecture", dir.display());
    }
    Ok(ensemble_from_networks(networks, &loaded.train, plan, &loaded.search)?)
}

fn ensemble(plan: &Plan, loaded: &Loaded) -> anyhow::Result<(Ensemble, bool)> {
    match &plan.config.networks {
        Some(dir) => Ok((load_ensemble(dir, loaded)?, false)),
        None => Ok((cross_validate_train(&loaded.arch, &loaded.train, &loaded.search)?, true)),
    }
}

fn write_text(path: &Path, s: &str) -> anyhow::Result<()> {
    Ok(write_atomic(path, s.as_bytes())?)
}

/// Resolve, load and execute one command; returns the text printed to stdout.
pub fn run(command: Command, cfg: RunConfig) -> anyhow::Result<String> {
    let plan = plan(cfg)?;
    let jobs = plan.config.jobs.unwrap_or(0);
    minwidth::exec::with_jobs(jobs, || execute(command, &plan))
}

fn execute(command: Command, plan: &Plan) -> anyhow::Result<String> {
    let loaded = plan.load()?;
    let out = plan.out();
    match command {
        Command::Train => {
            let ens = cross_validate_train(&loaded.arch, &loaded.train, &loaded.search)?;
            fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            save_networks(&ens, &out.join("networks"))?;
            let summary = TrainSummary {
                val_q: ens.val_qs.clone(),
                mean_val_q: ens.mean_val_q(),
                outcomes: ens.outcomes.clone(),
            };
            save_json(&summary, &out.join("train.json"))?;
            save_json(&plan.config, &out.join("run.json"))?;
            let vals: Vec<String> = ens.val_qs.iter().map(|q| format!("{q:.4}")).collect();
            Ok(format!(
                "trained {} networks; validation metric per fold: {} (mean {:.4})\n",
                ens.folds(),
                vals.join(", "),
                ens.mean_val_q()
            ))
        }
        Command::Estimate => {
            let start = std::time::Instant::now();
            let (ens, fresh) = ensemble(plan, &loaded)?;
            let train_seconds = start.elapsed().as_secs_f64();
            let mut report = estimate_with_ensemble(&ens, &loaded.train, &loaded.search)?;
            report.timing.train_seconds = train_seconds;
            fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            if fresh {
                save_networks(&ens, &out.join("networks"))?;
            }
            report.save(&out.join("report.json"))?;
            let text = report.summary_text();
            write_text(&out.join("summary.txt"), &text)?;
            write_text(&out.join("sweep.tsv"), &report.sweep_tsv())?;
            save_json(&plan.config, &out.join("run.json"))?;
            Ok(text)
        }
        Command::Verify => {
            let widths = match (&plan.config.widths, &plan.config.report) {
                (Some(w), _) => w.clone(),
                (None, Some(r)) => EstimateReport::load(r)?.widths(),
                (None, None) => bail!("verify needs --widths or --report"),
            };
            if loaded.test.is_empty() {
                bail!("verify needs a non-empty test set");
            }
            let (ens, _) = ensemble(plan, &loaded)?;
            let schedule = plan
                .config
                .verify_schedule
                .expect("filled by plan")
                .build(plan.loss(), plan.config.max_epochs);
            let report = verify_retrain(&ens, &widths, &loaded.train, &loaded.test, &loaded.search, &schedule)?;
            fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            report.save(&out.join("verify.json"))?;
            let text = report.summary_text();
            write_text(&out.join("verify.txt"), &text)?;
            save_json(&plan.config, &out.join("run.json"))?;
            Ok(text)
        }
    }
}

/// Render an existing estimate or verification report. With `out`, the
/// summary (and for estimates the sweep table) are also written there.
pub fn render_report(path: &Path, out: Option<&Path>) -> anyhow::Result<String> {
    let raw = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&raw).with_context(|| format!("{} is not valid JSON", path.display()))?;
    let (text, tsv) = if value.get("per_layer").is_some() {
        let r: EstimateReport = serde_json::from_value(value).context("not an estimate report")?;
        if r.schema_version != minwidth::search::REPORT_SCHEMA_VERSION {
            bail!("unsupported report schema version {}", r.schema_version);
        }
        (r.summary_text(), Some(r.sweep_tsv()))
    } else {
        let r: VerificationReport = serde_json::from_value(value).context("not a verification report")?;
        (r.summary_text(), None)
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_text(&dir.join("summary.txt"), &text)?;
        if let Some(t) = tsv {
            write_text(&dir.join("sweep.tsv"), &t)?;
        }
    }
    Ok(text)
}
