//! Bundled experiment recipes and dataset resolution.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};

use minwidth::data::{downscale_8x8, Standardizer};
use minwidth::exec::derive_seed;
use minwidth::{load_csv, load_idx, Architecture, Dataset, Loss, Metric, ProbedFold, SearchConfig};

use crate::config::{RunConfig, ScheduleKind};
use crate::formula::parse_formula_scaled;

#[derive(Debug, Clone, Copy)]
pub struct Recipe {
    pub name: &'static str,
    pub formula: &'static str,
    pub metric: Metric,
    source: RecipeSource,
}

#[derive(Debug, Clone, Copy)]
enum RecipeSource {
    /// Directory under the data root holding the four standard IDX files.
    Idx { dir: &'static str, downscale: bool },
    Csv { file: &'static str, target: &'static str },
}

pub const RECIPES: &[Recipe] = &[
    Recipe {
        name: "mnist8",
        formula: "FCx10(Softmax),FCx(p*128)(Abs),FCx(p*128)(Abs),BN",
        metric: Metric::Accuracy,
        source: RecipeSource::Idx {
            dir: "mnist",
            downscale: true,
        },
    },
    Recipe {
        name: "mnist28",
        formula: "FCx10(Softmax),FCx300(ReLU),FCx300(ReLU),BN,FL",
        metric: Metric::Accuracy,
        source: RecipeSource::Idx {
            dir: "mnist",
            downscale: false,
        },
    },
    Recipe {
        name: "fashion",
        formula: "FCx10(Softmax),FCx200(ReLU),FCx200(ReLU),BN,FL",
        metric: Metric::Accuracy,
        source: RecipeSource::Idx {
            dir: "fashion",
            downscale: false,
        },
    },
    Recipe {
        name: "california",
        formula: "FCx1(Linear),FCx200(ReLU),BN",
        metric: Metric::Mse,
        source: RecipeSource::Csv {
            file: "california_housing.csv.gz",
            target: "MedHouseVal",
        },
    },
    Recipe {
        name: "wine",
        formula: "FCx1(Linear),FCx200(ReLU),BN",
        metric: Metric::Mse,
        source: RecipeSource::Csv {
            file: "winequality-red.csv.gz",
            target: "quality",
        },
    },
];

pub fn recipe(name: &str) -> Option<&'static Recipe> {
    RECIPES.iter().find(|r| r.name == name)
}

#[derive(Debug, Clone, PartialEq)]
enum Source {
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    Csv {
        path: PathBuf,
        target: String,
    },
}

fn idx_pair(dir: &Path, prefix: &str) -> Source {
    Source::Idx {
        images: dir.join(format!("{prefix}-images-idx3-ubyte.gz")),
        labels: dir.join(format!("{prefix}-labels-idx1-ubyte.gz")),
    }
}

fn parse_source(spec: &str, target: Option<&str>) -> anyhow::Result<Source> {
    if let Some(path) = spec.strip_prefix("csv:") {
        let target = target.context("csv datasets need --target")?;
        Ok(Source::Csv {
            path: PathBuf::from(path),
            target: target.to_string(),
        })
    } else if let Some(rest) = spec.strip_prefix("idx:") {
        let (images, labels) = rest
            .split_once(',')
            .context("idx datasets are given as idx:<images>,<labels>")?;
        Ok(Source::Idx {
            images: PathBuf::from(images),
            labels: PathBuf::from(labels),
        })
    } else {
        let names: Vec<&str> = RECIPES.iter().map(|r| r.name).collect();
        bail!("unknown dataset {spec:?}; expected one of {names:?}, csv:<path> or idx:<images>,<labels>")
    }
}

impl Source {
    fn paths(&self) -> Vec<&Path> {
        match self {
            Source::Idx { images, labels } => vec![images, labels],
            Source::Csv { path, .. } => vec![path],
        }
    }

    fn load(&self) -> anyhow::Result<Dataset> {
        Ok(match self {
            Source::Idx { images, labels } => load_idx(images, labels)?,
            Source::Csv { path, target } => load_csv(path, &[target.as_str()], false)?,
        })
    }
}

/// A configuration with every default filled in and every input file checked.
#[derive(Debug, Clone)]
pub struct Plan {
    pub config: RunConfig,
    train: Source,
    test: Option<Source>,
}

fn require_exists(p: &Path, what: &str) -> anyhow::Result<()> {
    if !p.exists() {
        bail!("{what} {} does not exist", p.display());
    }
    Ok(())
}

/// Fill defaults from the recipe and built-ins, then check referenced files.
pub fn plan(cfg: RunConfig) -> anyhow::Result<Plan> {
    let mut c = cfg;
    let dataset = c.dataset.clone().context("no dataset given (use --dataset)")?;
    let data_dir = c.data_dir.get_or_insert_with(|| PathBuf::from("data")).clone();
    let (train, test) = match recipe(&dataset) {
        Some(r) => {
            c.formula.get_or_insert_with(|| r.formula.to_string());
            c.metric.get_or_insert(r.metric);
            match r.source {
                RecipeSource::Idx { dir, downscale } => {
                    c.downscale.get_or_insert(downscale);
                    let d = data_dir.join(dir);
                    (idx_pair(&d, "train"), Some(idx_pair(&d, "t10k")))
                }
                RecipeSource::Csv { file, target } => {
                    c.target.get_or_insert_with(|| target.to_string());
                    (
                        Source::Csv {
                            path: data_dir.join(file),
                            target: c.target.clone().unwrap_or_default(),
                        },
                        None,
                    )
                }
            }
        }
        None => {
            let s = parse_source(&dataset, c.target.as_deref())?;
            c.metric.get_or_insert(match s {
                Source::Idx { .. } => Metric::Accuracy,
                Source::Csv { .. } => Metric::Mse,
            });
            (s, None)
        }
    };
    let test = match &c.test {
        Some(t) => Some(parse_source(t, c.target.as_deref())?),
        None => test,
    };
    if test.is_none() {
        let f = *c.test_fraction.get_or_insert(0.2);
        if !(0.0..1.0).contains(&f) {
            bail!("test fraction {f} is not in [0, 1)");
        }
    }
    c.downscale.get_or_insert(false);
    c.formula.as_ref().context("no architecture formula given (use --formula)")?;
    c.width_multiplier.get_or_insert(1);
    c.folds.get_or_insert(3);
    c.seed.get_or_insert(0);
    c.bootstrap_n.get_or_insert(minwidth::equiv::DEFAULT_BOOTSTRAP_N);
    c.jobs.get_or_insert(0);
    c.schedule.get_or_insert(ScheduleKind::Constant);
    c.verify_schedule.get_or_insert(ScheduleKind::Decreasing);
    c.sweep_points.get_or_insert(minwidth::search::DEFAULT_SWEEP_POINTS);
    c.probed_fold.get_or_insert(ProbedFold::Same);
    c.out.get_or_insert_with(|| PathBuf::from("out"));

    for p in train.paths() {
        require_exists(p, "dataset file")?;
    }
    if let Some(t) = &test {
        for p in t.paths() {
            require_exists(p, "test file")?;
        }
    }
    if let Some(n) = &c.networks {
        require_exists(n, "networks directory")?;
    }
    if let Some(r) = &c.report {
        require_exists(r, "report")?;
    }
    Ok(Plan {
        config: c,
        train,
        test,
    })
}

pub struct Loaded {
    pub train: Dataset,
    pub test: Dataset,
    pub arch: Architecture,
    pub search: SearchConfig,
}

impl Plan {
    pub fn loss(&self) -> Loss {
        match self.config.metric {
            Some(Metric::Mse) => Loss::Mse,
            _ => Loss::CrossEntropy,
        }
    }

    pub fn out(&self) -> &Path {
        self.config.out.as_deref().expect("filled by plan")
    }

    pub fn load(&self) -> anyhow::Result<Loaded> {
        let c = &self.config;
        let seed = c.seed.expect("filled by plan");
        let full = self.train.load()?;
        let (mut train, mut test) = match &self.test {
            Some(t) => (full, t.load()?),
            None => full.split(c.test_fraction.expect("filled by plan"), derive_seed(seed, &[99]))?,
        };
        if c.downscale == Some(true) {
            train = downscale_8x8(&train)?;
            test = downscale_8x8(&test)?;
        }
        if matches!(self.train, Source::Csv { .. }) {
            let st = Standardizer::fit(&train.x);
            train.x = st.apply(&train.x)?;
            if !test.is_empty() {
                test.x = st.apply(&test.x)?;
            }
        }
        if let Some(n) = c.limit {
            train = train.first(n);
        }
        let layers = parse_formula_scaled(c.formula.as_deref().expect("filled by plan"), c.width_multiplier.unwrap_or(1))?;
        let arch = Architecture::new(train.n_features(), layers)?;
        let mut search = SearchConfig::new(
            c.metric.expect("filled by plan"),
            c.schedule.expect("filled by plan").build(self.loss(), c.max_epochs),
        );
        search.folds = c.folds.expect("filled by plan");
        search.master_seed = seed;
        search.n_bootstrap = c.bootstrap_n.expect("filled by plan");
        search.layers = c.layers.clone().unwrap_or_default();
        search.sweep_points = c.sweep_points.expect("filled by plan");
        search.svd_row_subsample = c.svd_rows;
        search.probed_fold = c.probed_fold.expect("filled by plan");
        search.validate(&arch)?;
        log::info!(
            "{} training samples, {} test samples, {} features, {} outputs",
            train.len(),
            test.len(),
            train.n_features(),
            train.n_outputs()
        );
        Ok(Loaded {
            train,
            test,
            arch,
            search,
        })
    }
}
