//! Width estimation over a cross-validated ensemble.
//!
//! 1. Train one network per fold (fold `i` held out for validation).
//! 2. Capture each probed layer's outputs over the whole dataset and factor them.
//! 3. For every ordered fold pair `(i, j)`, bisect the truncation level `M`
//!    of an autoencoder inserted after the probed layer, comparing network `i`
//!    with a probed network on the union of validation folds `i` and `j`.
//!    The probed network is network `i` itself by default, or network `j`
//!    with [`ProbedFold::Peer`].
//! 4. Average the per-pair minima and round up.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_folds, Dataset, FoldPlan};
use crate::equiv::{
    metric_eval, pair_eval_indices, threshold_q0, worst_q_from_predictions, Metric, DEFAULT_BOOTSTRAP_N,
};
use crate::error::{Error, Result};
use crate::exec::{derive_seed, Exec};
use crate::linalg::{effective_rank, thin_svd, Matrix, SvdFactors, DEFAULT_RANK_TOL};
use crate::nn::{train, Architecture, Mode, Network, TrainOutcome, TrainSchedule, BN_EPS, BN_MOMENTUM};
use crate::probe::{build_autoencoder, ProbedNetwork};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_SWEEP_POINTS: usize = 8;

const TAG_FOLDS: u64 = 1;
const TAG_TRAIN: u64 = 2;
const TAG_BOOTSTRAP: u64 = 3;
const TAG_SUBSAMPLE: u64 = 4;
const TAG_VERIFY: u64 = 5;

/// Which network carries the autoencoder when fold pair `(i, j)` is evaluated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbedFold {
    /// Network `i` against its own probed copy, built from fold `i`'s factors.
    #[default]
    Same,
    /// Network `i` against network `j` probed with fold `j`'s factors.
    Peer,
}

impl std::str::FromStr for ProbedFold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same" => Ok(ProbedFold::Same),
            "peer" => Ok(ProbedFold::Peer),
            other => Err(Error::Config(format!("unknown probed fold {other:?} (expected same or peer)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Number of cross-validation folds, at least 2.
    pub folds: usize,
    /// Hidden Dense layer indices to probe; empty means all of them.
    pub layers: Vec<usize>,
    pub metric: Metric,
    pub n_bootstrap: usize,
    pub master_seed: u64,
    pub schedule: TrainSchedule,
    /// Evenly spaced diagnostic evaluations of Q(M) per fold pair; 0 disables.
    pub sweep_points: usize,
    /// Factor only this many randomly chosen rows of each layer output.
    pub svd_row_subsample: Option<usize>,
    #[serde(default)]
    pub probed_fold: ProbedFold,
    #[serde(skip)]
    pub exec: Exec,
}

impl SearchConfig {
    pub fn new(metric: Metric, schedule: TrainSchedule) -> Self {
        SearchConfig {
            folds: 3,
            layers: Vec::new(),
            metric,
            n_bootstrap: DEFAULT_BOOTSTRAP_N,
            master_seed: 0,
            schedule,
            sweep_points: DEFAULT_SWEEP_POINTS,
            svd_row_subsample: None,
            probed_fold: ProbedFold::Same,
            exec: Exec::default(),
        }
    }

    /// Probed layers after resolving the empty default; checks each is a
    /// hidden Dense layer with an elementwise activation.
    pub fn resolved_layers(&self, arch: &Architecture) -> Result<Vec<usize>> {
        let hidden = arch.hidden_dense_layers();
        let layers = if self.layers.is_empty() {
            hidden.clone()
        } else {
            let mut l = self.layers.clone();
            l.sort_unstable();
            l.dedup();
            l
        };
        if layers.is_empty() {
            return Err(Error::Config("the architecture has no hidden dense layer to probe".into()));
        }
        for &l in &layers {
            if !hidden.contains(&l) {
                return Err(Error::Config(format!(
                    "layer {l} is not a hidden dense layer (hidden dense layers: {hidden:?})"
                )));
            }
            if let Some(crate::nn::LayerSpec::Dense { activation, .. }) = arch.layers.get(l) {
                if !activation.is_elementwise() {
                    return Err(Error::Unsupported(format!("layer {l} has a non-elementwise activation")));
                }
            }
        }
        Ok(layers)
    }

    pub fn validate(&self, arch: &Architecture) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config(format!(
                "{} folds requested; at least 2 are needed so that no network is trained on the whole equivalence-check set",
                self.folds
            )));
        }
        if self.n_bootstrap == 0 {
            return Err(Error::Config("bootstrap count must be at least 1".into()));
        }
        if self.svd_row_subsample == Some(0) {
            return Err(Error::Config("row subsample must be positive".into()));
        }
        self.schedule.validate()?;
        self.resolved_layers(arch)?;
        Ok(())
    }

    pub fn fold_seed(&self) -> u64 {
        derive_seed(self.master_seed, &[TAG_FOLDS])
    }

    pub fn bootstrap_seed(&self, layer: usize, i: usize, j: usize, m: usize) -> u64 {
        derive_seed(
            self.master_seed,
            &[TAG_BOOTSTRAP, layer as u64, i as u64, j as u64, m as u64],
        )
    }
}

/// C networks trained by cross-validation, with the SVD of every probed
/// layer's output over the full dataset.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub plan: FoldPlan,
    pub networks: Vec<Network>,
    /// Metric of network `i` against ground truth on validation fold `i`.
    pub val_qs: Vec<f64>,
    pub outcomes: Vec<Option<TrainOutcome>>,
    pub factors: BTreeMap<usize, Vec<SvdFactors>>,
}

impl Ensemble {
    pub fn mean_val_q(&self) -> f64 {
        self.val_qs.iter().sum::<f64>() / self.val_qs.len() as f64
    }

    pub fn folds(&self) -> usize {
        self.networks.len()
    }
}

/// Layer output over `x`, optionally restricted to a seeded row subsample, then factored.
pub fn layer_factors(net: &Network, x: &Matrix, layer: usize, subsample: Option<(usize, u64)>) -> Result<SvdFactors> {
    let y = net.forward_capture(x, layer)?;
    let y = match subsample {
        Some((n, seed)) if n < y.rows() => {
            let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(seed), y.rows(), n).into_vec();
            idx.sort_unstable();
            y.select_rows(&idx)
        }
        _ => y,
    };
    thin_svd(&y)
}

fn validation_metric(q: Metric, net: &Network, val: &Dataset) -> Result<f64> {
    let out = net.forward(&val.x, Mode::Inference)?;
    metric_eval(q, &val.t, &out)
}

fn check_data(arch: &Architecture, data: &Dataset) -> Result<()> {
    if data.n_features() != arch.input_dim {
        return Err(Error::Shape(format!(
            "architecture takes {} inputs, dataset has {} features",
            arch.input_dim,
            data.n_features()
        )));
    }
    if data.n_outputs() != arch.output_dim() {
        return Err(Error::Shape(format!(
            "architecture has {} outputs, dataset has {} targets",
            arch.output_dim(),
            data.n_outputs()
        )));
    }
    Ok(())
}

/// Train one network per fold of a fresh seeded fold plan and factor the
/// probed layers.
pub fn cross_validate_train(arch: &Architecture, data: &Dataset, config: &SearchConfig) -> Result<Ensemble> {
    config.validate(arch)?;
    check_data(arch, data)?;
    let plan = make_folds(data.len(), config.folds, config.fold_seed())?;
    let trained = config.exec.map_range(config.folds, |i| {
        train_fold(arch, data, &plan, i, &config.schedule, config.master_seed, TAG_TRAIN).map_err(|e| e.in_fold(i))
    });
    let mut networks = Vec::with_capacity(config.folds);
    let mut outcomes = Vec::with_capacity(config.folds);
    for r in trained {
        let (net, outcome) = r?;
        networks.push(net);
        outcomes.push(Some(outcome));
    }
    let mut ens = ensemble_from_networks(networks, data, plan, config)?;
    ens.outcomes = outcomes;
    Ok(ens)
}

fn train_fold(
    arch: &Architecture,
    data: &Dataset,
    plan: &FoldPlan,
    i: usize,
    schedule: &TrainSchedule,
    master: u64,
    tag: u64,
) -> Result<(Network, TrainOutcome)> {
    let tr = data.select(&plan.train(i));
    let va = data.select(&plan.fold(i));
    let net = Network::new(arch, derive_seed(master, &[tag, i as u64, 0]))?;
    log::info!("training fold {i}: {} train / {} validation samples", tr.len(), va.len());
    let (net, outcome) = train(net, &tr.x, &tr.t, &va.x, &va.t, schedule, derive_seed(master, &[tag, i as u64, 1]))?;
    log::info!(
        "fold {i}: {} epochs, validation loss {:.5}, metric {:.5}",
        outcome.epochs,
        outcome.val_loss,
        outcome.val_metric
    );
    Ok((net, outcome))
}

/// Wrap already-trained fold networks (network `i` validated on fold `i`).
pub fn ensemble_from_networks(
    networks: Vec<Network>,
    data: &Dataset,
    plan: FoldPlan,
    config: &SearchConfig,
) -> Result<Ensemble> {
    if networks.len() != plan.c {
        return Err(Error::Config(format!(
            "{} networks for a {}-fold plan",
            networks.len(),
            plan.c
        )));
    }
    if plan.assignments.len() != data.len() {
        return Err(Error::Data("fold plan does not match the dataset".into()));
    }
    let arch = networks[0].architecture();
    config.validate(&arch)?;
    check_data(&arch, data)?;
    let layers = config.resolved_layers(&arch)?;
    let val_qs = config
        .exec
        .map_range(plan.c, |i| validation_metric(config.metric, &networks[i], &data.select(&plan.fold(i))))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let jobs: Vec<(usize, usize)> = layers
        .iter()
        .flat_map(|&l| (0..plan.c).map(move |i| (l, i)))
        .collect();
    let results = config.exec.map_slice(&jobs, |&(l, i)| {
        let sub = config
            .svd_row_subsample
            .map(|n| (n, derive_seed(config.master_seed, &[TAG_SUBSAMPLE, l as u64, i as u64])));
        layer_factors(&networks[i], &data.x, l, sub)
    });
    let mut factors: BTreeMap<usize, Vec<SvdFactors>> = BTreeMap::new();
    for (&(l, _), f) in jobs.iter().zip(results) {
        factors.entry(l).or_default().push(f?);
    }
    Ok(Ensemble {
        outcomes: vec![None; plan.c],
        plan,
        networks,
        val_qs,
        factors,
    })
}

/// Smallest `M ∈ [1, width]` accepted by `equivalent`, assuming acceptance
/// is monotone in `M`. `width` itself is never evaluated (assumed accepted);
/// `M = 0` is never evaluated (assumed rejected). Needs at most
/// `⌈log₂ width⌉` evaluations.
pub fn bisect_min_width<F>(width: usize, mut equivalent: F) -> Result<usize>
where
    F: FnMut(usize) -> Result<bool>,
{
    if width == 0 {
        return Err(Error::Config("cannot bisect a zero-width layer".into()));
    }
    let (mut lo, mut hi) = (0usize, width);
    while hi - lo > 1 {
        let m = (lo + hi) / 2;
        if equivalent(m)? {
            hi = m;
        } else {
            lo = m;
        }
    }
    Ok(hi)
}

/// Bisection driven by a metric curve `Q(M)`: `M` is accepted when `Q(M)` is
/// not worse than `q_search`.
pub fn bisect_layer_width_with<F>(width: usize, metric: Metric, q_search: f64, mut q_of_m: F) -> Result<usize>
where
    F: FnMut(usize) -> Result<f64>,
{
    bisect_min_width(width, |m| Ok(!metric.worse(q_of_m(m)?, q_search)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub m: usize,
    pub worst_q: f64,
    pub equivalent: bool,
    /// Evaluated by the bisection (as opposed to the diagnostic sweep only).
    pub bisection: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEstimate {
    pub i: usize,
    pub j: usize,
    pub m_found: usize,
    /// Every evaluated truncation level, ascending.
    pub trace: Vec<TracePoint>,
    /// Some smaller `M` was equivalent while a larger one was not.
    pub non_monotone: bool,
}

fn sweep_levels(width: usize, points: usize) -> Vec<usize> {
    if points == 0 {
        return Vec::new();
    }
    if points == 1 {
        return vec![width];
    }
    let mut v: Vec<usize> = (0..points)
        .map(|k| 1 + ((width - 1) as f64 * k as f64 / (points - 1) as f64).round() as usize)
        .collect();
    v.dedup();
    v
}

/// Bisection for one ordered fold pair: network `i` is compared with a probed
/// network (see [`ProbedFold`]) on the union of validation folds `i` and `j`.
pub fn bisect_layer_width(
    layer: usize,
    pair: (usize, usize),
    ensemble: &Ensemble,
    data: &Dataset,
    q_search: f64,
    config: &SearchConfig,
) -> Result<PairEstimate> {
    let (i, j) = pair;
    let eval_idx = pair_eval_indices(&ensemble.plan, i, j)?;
    let x_eval = data.x.select_rows(&eval_idx);
    let k = match config.probed_fold {
        ProbedFold::Same => i,
        ProbedFold::Peer => j,
    };
    let net_s = &ensemble.networks[i];
    let net_d = &ensemble.networks[k];
    let factors = ensemble
        .factors
        .get(&layer)
        .and_then(|f| f.get(k))
        .ok_or_else(|| Error::Config(format!("no factors for layer {layer}, fold {k}")))?;
    let width = net_d
        .width_of(layer)
        .ok_or_else(|| Error::Layer(format!("layer {layer} is not dense")))?;

    let t = net_s.forward(&x_eval, Mode::Inference)?;
    let y = net_d.forward_capture(&x_eval, layer)?;

    let mut cache: BTreeMap<usize, (f64, bool)> = BTreeMap::new();
    let mut evaluate = |m: usize| -> Result<(f64, bool)> {
        if let Some(&v) = cache.get(&m) {
            return Ok(v);
        }
        let probed = ProbedNetwork::new(net_d, build_autoencoder(factors, m, layer)?)?;
        let tp = probed.forward_from_capture(&y)?;
        let seed = config.bootstrap_seed(layer, i, j, m);
        let wq = worst_q_from_predictions(&t, &tp, config.metric, config.n_bootstrap, seed, config.exec)?;
        let eq = !config.metric.worse(wq, q_search);
        log::debug!("layer {layer} pair ({i},{j}) M={m}: worst_q={wq:.5} equivalent={eq}");
        cache.insert(m, (wq, eq));
        Ok((wq, eq))
    };

    let mut bisected = Vec::new();
    let m_found = bisect_layer_width_with(width, config.metric, q_search, |m| {
        bisected.push(m);
        Ok(evaluate(m)?.0)
    })?;
    for m in sweep_levels(width, config.sweep_points) {
        evaluate(m)?;
    }

    let trace: Vec<TracePoint> = cache
        .iter()
        .map(|(&m, &(worst_q, equivalent))| TracePoint {
            m,
            worst_q,
            equivalent,
            bisection: bisected.contains(&m),
        })
        .collect();
    let non_monotone = trace
        .iter()
        .enumerate()
        .any(|(a, p)| p.equivalent && trace[a + 1..].iter().any(|q| !q.equivalent));
    if non_monotone {
        log::warn!("layer {layer} pair ({i},{j}): equivalence is not monotone in M");
    }
    Ok(PairEstimate {
        i,
        j,
        m_found,
        trace,
        non_monotone,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEstimate {
    pub layer: usize,
    pub width: usize,
    /// One entry per ordered fold pair `(i, j)`, `i ≠ j`.
    pub pairs: Vec<PairEstimate>,
    pub m_mean: f64,
    /// `ceil(m_mean)`.
    pub m_final: usize,
    /// Population standard deviation of the per-pair values over their mean.
    pub relative_spread: f64,
    /// Numerical rank (relative tolerance 1e-10) of each fold's layer output.
    pub effective_ranks: Vec<usize>,
    pub non_monotone: bool,
}

impl LayerEstimate {
    pub fn m_found(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.m_found).collect()
    }
}

/// Reference widths from universal approximation results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UniversalBounds {
    /// `N_in + N_out + 2`.
    pub grip: usize,
    /// `max(N_in, N_out)`.
    pub cai: usize,
}

impl UniversalBounds {
    pub fn new(n_in: usize, n_out: usize) -> Self {
        UniversalBounds {
            grip: n_in + n_out + 2,
            cai: n_in.max(n_out),
        }
    }
}

/// Defaults that are not part of [`SearchConfig`] but shape every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineDefaults {
    pub batch_norm_eps: f64,
    pub batch_norm_momentum: f64,
    pub weight_init: String,
    pub cross_entropy_clamp: f64,
    pub rank_tolerance: f64,
    pub bootstrap_rng: String,
    pub rounding: String,
}

impl Default for EngineDefaults {
    fn default() -> Self {
        EngineDefaults {
            batch_norm_eps: BN_EPS,
            batch_norm_momentum: BN_MOMENTUM,
            weight_init: "glorot-uniform, zero bias".into(),
            cross_entropy_clamp: crate::nn::CE_CLAMP_MIN,
            rank_tolerance: DEFAULT_RANK_TOL,
            bootstrap_rng: "xoshiro256++ seeded per resample, uniform u32 row indices".into(),
            rounding: "m_final = ceil(mean of per-pair minima)".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub train_seconds: f64,
    pub search_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub schema_version: u32,
    pub config: SearchConfig,
    pub defaults: EngineDefaults,
    pub architecture: Architecture,
    pub n_samples: usize,
    pub fold_plan: FoldPlan,
    pub per_fold_val_q: Vec<f64>,
    pub mean_val_q: f64,
    pub q_threshold: f64,
    pub per_layer: Vec<LayerEstimate>,
    pub universal_bounds: UniversalBounds,
    pub training: Vec<Option<TrainOutcome>>,
    pub timing: Timing,
}

impl EstimateReport {
    pub fn layer(&self, layer: usize) -> Option<&LayerEstimate> {
        self.per_layer.iter().find(|l| l.layer == layer)
    }

    /// Found widths as `(layer, m_final)` pairs.
    pub fn widths(&self) -> Vec<(usize, usize)> {
        self.per_layer.iter().map(|l| (l.layer, l.m_final)).collect()
    }
}

/// Full pipeline: cross-validated training followed by the per-layer search.
pub fn estimate_min_neurons(arch: &Architecture, data: &Dataset, config: &SearchConfig) -> Result<EstimateReport> {
    let start = Instant::now();
    let ensemble = cross_validate_train(arch, data, config)?;
    let train_seconds = start.elapsed().as_secs_f64();
    let mut report = estimate_with_ensemble(&ensemble, data, config)?;
    report.timing.train_seconds = train_seconds;
    Ok(report)
}

/// Per-layer search over an existing ensemble.
pub fn estimate_with_ensemble(ensemble: &Ensemble, data: &Dataset, config: &SearchConfig) -> Result<EstimateReport> {
    let start = Instant::now();
    let arch = ensemble.networks[0].architecture();
    let layers = config.resolved_layers(&arch)?;
    let mean_val_q = ensemble.mean_val_q();
    let q_search = threshold_q0(mean_val_q, config.metric);
    let c = ensemble.folds();
    log::info!("mean validation metric {mean_val_q:.5}, equivalence threshold {q_search:.5}");

    let jobs: Vec<(usize, usize, usize)> = layers
        .iter()
        .flat_map(|&l| (0..c).flat_map(move |i| (0..c).filter(move |&j| j != i).map(move |j| (l, i, j))))
        .collect();
    let results = config
        .exec
        .map_slice(&jobs, |&(l, i, j)| bisect_layer_width(l, (i, j), ensemble, data, q_search, config));

    let mut by_layer: BTreeMap<usize, Vec<PairEstimate>> = BTreeMap::new();
    for (&(l, _, _), r) in jobs.iter().zip(results) {
        by_layer.entry(l).or_default().push(r?);
    }
    let per_layer = by_layer
        .into_iter()
        .map(|(layer, pairs)| {
            let found: Vec<f64> = pairs.iter().map(|p| p.m_found as f64).collect();
            let m_mean = found.iter().sum::<f64>() / found.len() as f64;
            let var = found.iter().map(|m| (m - m_mean).powi(2)).sum::<f64>() / found.len() as f64;
            let effective_ranks = ensemble.factors[&layer]
                .iter()
                .map(|f| effective_rank(&f.sigma, DEFAULT_RANK_TOL))
                .collect();
            let non_monotone = pairs.iter().any(|p| p.non_monotone);
            LayerEstimate {
                layer,
                width: arch.width_of(layer).expect("probed layers are dense"),
                m_final: m_mean.ceil() as usize,
                m_mean,
                relative_spread: var.sqrt() / m_mean,
                pairs,
                effective_ranks,
                non_monotone,
            }
        })
        .collect();

    Ok(EstimateReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: config.clone(),
        defaults: EngineDefaults::default(),
        universal_bounds: UniversalBounds::new(arch.input_dim, arch.output_dim()),
        architecture: arch,
        n_samples: data.len(),
        fold_plan: ensemble.plan.clone(),
        per_fold_val_q: ensemble.val_qs.clone(),
        mean_val_q,
        q_threshold: q_search,
        per_layer,
        training: ensemble.outcomes.clone(),
        timing: Timing {
            train_seconds: 0.0,
            search_seconds: start.elapsed().as_secs_f64(),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairAgreement {
    /// Index of the original network.
    pub s: usize,
    /// Index of the retrained narrow network.
    pub d: usize,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub schema_version: u32,
    pub metric: Metric,
    pub widths: Vec<(usize, usize)>,
    pub d_architecture: Architecture,
    pub schedule: TrainSchedule,
    /// Validation metrics against ground truth, per fold.
    pub s_val_q: Vec<f64>,
    pub d_val_q: Vec<f64>,
    /// Test-set metrics against ground truth, per fold.
    pub s_test_q: Vec<f64>,
    pub d_test_q: Vec<f64>,
    /// Test-set agreement between every original and every retrained network.
    pub agreement: Vec<PairAgreement>,
    pub worst_agreement: f64,
    /// Mean validation metric of the original networks.
    pub threshold: f64,
    pub equivalent: bool,
    pub d_training: Vec<TrainOutcome>,
    pub train_seconds: f64,
}

/// Retrain the architecture at the found widths on the same fold plan and
/// compare with the original ensemble on a held-out test set.
pub fn verify_retrain(
    s: &Ensemble,
    widths: &[(usize, usize)],
    data: &Dataset,
    test: &Dataset,
    config: &SearchConfig,
    d_schedule: &TrainSchedule,
) -> Result<VerificationReport> {
    let start = Instant::now();
    let s_arch = s.networks[0].architecture();
    let d_arch = s_arch.with_widths(widths)?;
    check_data(&d_arch, data)?;
    check_data(&d_arch, test)?;
    if test.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    d_schedule.validate()?;
    let trained = config.exec.map_range(s.folds(), |i| {
        train_fold(&d_arch, data, &s.plan, i, d_schedule, config.master_seed, TAG_VERIFY).map_err(|e| e.in_fold(i))
    });
    let mut d_nets = Vec::new();
    let mut d_training = Vec::new();
    for r in trained {
        let (n, o) = r?;
        d_nets.push(n);
        d_training.push(o);
    }
    let q = config.metric;
    let d_val_q = (0..s.folds())
        .map(|i| validation_metric(q, &d_nets[i], &data.select(&s.plan.fold(i))))
        .collect::<Result<Vec<_>>>()?;
    let s_out = s
        .networks
        .iter()
        .map(|n| n.forward(&test.x, Mode::Inference))
        .collect::<Result<Vec<_>>>()?;
    let d_out = d_nets
        .iter()
        .map(|n| n.forward(&test.x, Mode::Inference))
        .collect::<Result<Vec<_>>>()?;
    let s_test_q = s_out.iter().map(|o| metric_eval(q, &test.t, o)).collect::<Result<Vec<_>>>()?;
    let d_test_q = d_out.iter().map(|o| metric_eval(q, &test.t, o)).collect::<Result<Vec<_>>>()?;
    let mut agreement = Vec::new();
    for (si, so) in s_out.iter().enumerate() {
        for (di, d_o) in d_out.iter().enumerate() {
            agreement.push(PairAgreement {
                s: si,
                d: di,
                q: metric_eval(q, so, d_o)?,
            });
        }
    }
    let worst_agreement = q.worst_of(agreement.iter().map(|a| a.q)).expect("at least one pair");
    let threshold = s.mean_val_q();
    Ok(VerificationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        metric: q,
        widths: widths.to_vec(),
        d_architecture: d_arch,
        schedule: d_schedule.clone(),
        s_val_q: s.val_qs.clone(),
        d_val_q,
        s_test_q,
        d_test_q,
        equivalent: !q.worse(worst_agreement, threshold),
        agreement,
        worst_agreement,
        threshold,
        d_training,
        train_seconds: start.elapsed().as_secs_f64(),
    })
}
