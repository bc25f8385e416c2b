//! Agreement metrics between two networks' predictions, the bootstrap
//! worst-case estimator, and the equivalence threshold.
//!
//! Bootstrap protocol: an evaluation seeded with `seed` draws resample `k`
//! from `Xoshiro256PlusPlus::seed_from_u64(derive_seed(seed, &[k]))`, taking
//! `n` row indices from `Uniform::new(0, n as u32)`. Resamples are therefore
//! independent of each other and of the execution order.

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FoldPlan};
use crate::error::{Error, Result};
use crate::exec::{derive_seed, Exec};
use crate::linalg::Matrix;
use crate::nn::{Loss, Mode, Network};
use crate::probe::ProbedNetwork;

/// Resample count used when none is configured.
pub const DEFAULT_BOOTSTRAP_N: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Fraction of rows with matching argmax; higher is better.
    Accuracy,
    /// Mean squared elementwise difference; lower is better.
    Mse,
}

impl Metric {
    pub fn best_value(self) -> f64 {
        match self {
            Metric::Accuracy => 1.0,
            Metric::Mse => 0.0,
        }
    }

    pub fn higher_is_better(self) -> bool {
        self == Metric::Accuracy
    }

    /// `a` is strictly worse than `b`.
    pub fn worse(self, a: f64, b: f64) -> bool {
        match self {
            Metric::Accuracy => a < b,
            Metric::Mse => a > b,
        }
    }

    pub fn worst_of(self, values: impl IntoIterator<Item = f64>) -> Option<f64> {
        values
            .into_iter()
            .reduce(|a, b| if self.worse(b, a) { b } else { a })
    }

    pub fn for_loss(loss: Loss) -> Metric {
        match loss {
            Loss::CrossEntropy => Metric::Accuracy,
            Loss::Mse => Metric::Mse,
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "accuracy" | "acc" => Ok(Metric::Accuracy),
            "mse" => Ok(Metric::Mse),
            other => Err(Error::Config(format!("unknown metric {other:?}"))),
        }
    }
}

/// Per-row contribution to the metric numerator.
fn row_score(q: Metric, t: &Matrix, tp: &Matrix, i: usize) -> f64 {
    match q {
        Metric::Accuracy => (t.row_argmax(i) == tp.row_argmax(i)) as u8 as f64,
        Metric::Mse => t
            .row(i)
            .iter()
            .zip(tp.row(i))
            .map(|(a, b)| (a - b) * (a - b))
            .sum(),
    }
}

fn denominator(q: Metric, rows: usize, cols: usize) -> f64 {
    match q {
        Metric::Accuracy => rows as f64,
        Metric::Mse => (rows * cols) as f64,
    }
}

/// Metric between two prediction sets (not against ground truth, unless one
/// of them is the ground truth). Row contributions are summed in row order.
pub fn metric_eval(q: Metric, t: &Matrix, t_prime: &Matrix) -> Result<f64> {
    if t.shape() != t_prime.shape() {
        return Err(Error::Shape(format!(
            "metric between {:?} and {:?}",
            t.shape(),
            t_prime.shape()
        )));
    }
    if t.rows() == 0 {
        return Err(Error::Shape("metric of empty predictions".into()));
    }
    let sum: f64 = (0..t.rows()).map(|i| row_score(q, t, t_prime, i)).sum();
    Ok(sum / denominator(q, t.rows(), t.cols()))
}

/// One paired resample: `n` rows drawn with replacement, the same index
/// applied to both matrices.
pub fn bootstrapped_pairs<R: Rng>(t: &Matrix, t_prime: &Matrix, rng: &mut R) -> Result<(Matrix, Matrix)> {
    if t.shape() != t_prime.shape() {
        return Err(Error::Shape("bootstrap of mismatched predictions".into()));
    }
    if t.rows() == 0 {
        return Err(Error::Shape("bootstrap of empty predictions".into()));
    }
    let n = t.rows();
    let index = index_sampler(n)?;
    let idx: Vec<usize> = (0..n).map(|_| index.sample(rng) as usize).collect();
    Ok((t.select_rows(&idx), t_prime.select_rows(&idx)))
}

/// The generator for resample `k` of an evaluation seeded with `seed`.
pub fn resample_rng(seed: u64, k: usize) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(derive_seed(seed, &[k as u64]))
}

/// Uniform row index in `0..n`.
pub fn index_sampler(n: usize) -> Result<Uniform<u32>> {
    match u32::try_from(n) {
        Ok(m) if m > 0 => Ok(Uniform::new(0, m)),
        _ => Err(Error::Data(format!("cannot resample {n} rows"))),
    }
}

/// Worst metric over `n` paired bootstrap resamples of fixed predictions.
pub fn worst_q_from_predictions(
    t: &Matrix,
    t_prime: &Matrix,
    q: Metric,
    n: usize,
    seed: u64,
    exec: Exec,
) -> Result<f64> {
    if t.shape() != t_prime.shape() {
        return Err(Error::Shape("worst_q of mismatched predictions".into()));
    }
    let rows = t.rows();
    if rows < 2 {
        return Err(Error::Data(format!("equivalence set needs at least 2 samples, got {rows}")));
    }
    if n == 0 {
        return Err(Error::Config("bootstrap count must be at least 1".into()));
    }
    let scores: Vec<f64> = (0..rows).map(|i| row_score(q, t, t_prime, i)).collect();
    let denom = denominator(q, rows, t.cols());
    let index = index_sampler(rows)?;
    let values = exec.map_range(n, |k| {
        let mut rng = resample_rng(seed, k);
        let mut sum = 0.0;
        for _ in 0..rows {
            sum += scores[index.sample(&mut rng) as usize];
        }
        sum / denom
    });
    Ok(q.worst_of(values).expect("n >= 1"))
}

/// Worst metric between `net_s` and a probed network. Predictions on
/// `x_eval` are computed once, then bootstrapped `n` times.
pub fn worst_q(
    x_eval: &Matrix,
    net_s: &Network,
    net_d: &ProbedNetwork<'_>,
    q: Metric,
    n: usize,
    seed: u64,
    exec: Exec,
) -> Result<f64> {
    if x_eval.rows() < 2 {
        return Err(Error::Data("equivalence set needs at least 2 samples".into()));
    }
    let t = net_s.forward(x_eval, Mode::Inference)?;
    let t_prime = net_d.forward(x_eval)?;
    worst_q_from_predictions(&t, &t_prime, q, n, seed, exec)
}

/// Midpoint between the mean validation metric and the best attainable value.
pub fn threshold_q0(mean_val_q: f64, q: Metric) -> f64 {
    (mean_val_q + q.best_value()) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceVerdict {
    pub worst_q: f64,
    pub threshold: f64,
    pub equivalent: bool,
    pub n_bootstrap: usize,
    pub fold_pair: (usize, usize),
}

impl EquivalenceVerdict {
    pub fn new(q: Metric, worst_q: f64, threshold: f64, n_bootstrap: usize, fold_pair: (usize, usize)) -> Self {
        EquivalenceVerdict {
            worst_q,
            threshold,
            equivalent: !q.worse(worst_q, threshold),
            n_bootstrap,
            fold_pair,
        }
    }
}

/// Sample indices of the union of validation folds `i` and `j`, ascending.
pub fn pair_eval_indices(plan: &FoldPlan, i: usize, j: usize) -> Result<Vec<usize>> {
    if i == j {
        return Err(Error::Config(format!("fold pair ({i}, {j}) must be distinct")));
    }
    if i >= plan.c || j >= plan.c {
        return Err(Error::Config(format!("fold pair ({i}, {j}) out of range for {} folds", plan.c)));
    }
    Ok(plan
        .assignments
        .iter()
        .enumerate()
        .filter_map(|(s, &f)| (f == i || f == j).then_some(s))
        .collect())
}

/// Union of validation folds `i` and `j`: each compared network was trained
/// on at most half of it.
pub fn build_pair_eval_set(x: &Dataset, plan: &FoldPlan, i: usize, j: usize) -> Result<Dataset> {
    if plan.assignments.len() != x.len() {
        return Err(Error::Data(format!(
            "fold plan covers {} samples, dataset has {}",
            plan.assignments.len(),
            x.len()
        )));
    }
    Ok(x.select(&pair_eval_indices(plan, i, j)?))
}
