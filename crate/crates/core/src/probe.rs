//! Truncated-SVD autoencoder inserted after a hidden layer.
//!
//! For a captured layer output `Y` with right singular vectors `V`, the
//! autoencoder maps `Y ↦ Y·V_M·V_Mᵀ`, an orthogonal projector onto the top-`M`
//! directions. With `M ≥ rank(Y)` it leaves `Y` unchanged.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gemm, Matrix, SvdFactors};
use crate::nn::{Activation, Dense, Layer, Network};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdAutoencoder {
    /// `K × M'`: leading right singular vectors as columns.
    pub encoder: Matrix,
    /// `M' × K`: the transpose of the encoder.
    pub decoder: Matrix,
    /// Requested truncation level.
    pub m: usize,
    pub source_layer: usize,
}

/// Encoder/decoder from the top-`m` right singular vectors. When the factors
/// carry fewer than `m` directions (fewer samples than neurons), all of them
/// are used, which already reproduces the factored matrix exactly.
pub fn build_autoencoder(factors: &SvdFactors, m: usize, layer: usize) -> Result<SvdAutoencoder> {
    let k = factors.cols();
    if m == 0 || m > k {
        return Err(Error::Config(format!("truncation level {m} outside [1, {k}]")));
    }
    let kept = m.min(factors.rank_capacity());
    let decoder = factors.vt.leading_rows(kept);
    Ok(SvdAutoencoder {
        encoder: decoder.transpose(),
        decoder,
        m,
        source_layer: layer,
    })
}

impl SvdAutoencoder {
    pub fn width(&self) -> usize {
        self.encoder.rows()
    }

    /// `encoder · decoder` (K × K).
    pub fn projector(&self) -> Matrix {
        let mut p = Matrix::zeros(self.width(), self.width());
        gemm(1.0, &self.encoder, false, &self.decoder, false, 0.0, &mut p);
        p
    }

    /// `y · encoder · decoder`.
    pub fn apply(&self, y: &Matrix) -> Result<Matrix> {
        if y.cols() != self.width() {
            return Err(Error::Shape(format!(
                "autoencoder expects {} columns, got {}",
                self.width(),
                y.cols()
            )));
        }
        let mut code = Matrix::zeros(y.rows(), self.encoder.cols());
        gemm(1.0, y, false, &self.encoder, false, 0.0, &mut code);
        let mut out = Matrix::zeros(y.rows(), self.width());
        gemm(1.0, &code, false, &self.decoder, false, 0.0, &mut out);
        Ok(out)
    }
}

/// A frozen network with an autoencoder after one hidden Dense layer.
#[derive(Debug, Clone)]
pub struct ProbedNetwork<'a> {
    base: &'a Network,
    autoencoder: SvdAutoencoder,
}

impl<'a> ProbedNetwork<'a> {
    pub fn new(base: &'a Network, autoencoder: SvdAutoencoder) -> Result<Self> {
        let layer = autoencoder.source_layer;
        base.check_hidden_dense(layer)?;
        let width = base.width_of(layer).expect("hidden dense layer");
        if width != autoencoder.width() {
            return Err(Error::Shape(format!(
                "autoencoder width {} does not match layer {layer} width {width}",
                autoencoder.width()
            )));
        }
        if !base.dense(layer).expect("dense").activation.is_elementwise() {
            return Err(Error::Unsupported(format!("layer {layer} has a non-elementwise activation")));
        }
        Ok(ProbedNetwork { base, autoencoder })
    }

    pub fn base(&self) -> &Network {
        self.base
    }

    pub fn autoencoder(&self) -> &SvdAutoencoder {
        &self.autoencoder
    }

    /// Inference forward with the layer output replaced by its projection.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let y = self.base.forward_capture(x, self.autoencoder.source_layer)?;
        self.forward_from_capture(&y)
    }

    /// Same as [`forward`](Self::forward) given the already captured layer output.
    pub fn forward_from_capture(&self, y: &Matrix) -> Result<Matrix> {
        let projected = self.autoencoder.apply(y)?;
        self.base.forward_after(projected, self.autoencoder.source_layer)
    }

    /// Plain network computing the same function: the encoder becomes a
    /// bias-free Linear layer of width `M'` and the decoder is absorbed into
    /// the next Dense layer (`W̃ = decoder · W_next`).
    pub fn fold_decoder_linear(&self) -> Result<Network> {
        let layer = self.autoencoder.source_layer;
        let next = match self.base.layers.get(layer + 1) {
            Some(Layer::Dense(d)) => d,
            _ => {
                return Err(Error::Unsupported(format!(
                    "layer after {layer} is not dense; the decoder cannot be folded"
                )))
            }
        };
        let mut folded_w = Matrix::zeros(self.autoencoder.decoder.rows(), next.weights.cols());
        gemm(1.0, &self.autoencoder.decoder, false, &next.weights, false, 0.0, &mut folded_w);

        let mut layers = Vec::with_capacity(self.base.layers.len() + 1);
        layers.extend(self.base.layers[..=layer].iter().cloned());
        layers.push(Layer::Dense(Dense {
            weights: self.autoencoder.encoder.clone(),
            bias: vec![0.0; self.autoencoder.encoder.cols()],
            activation: Activation::Linear,
        }));
        layers.push(Layer::Dense(Dense {
            weights: folded_w,
            bias: next.bias.clone(),
            activation: next.activation,
        }));
        layers.extend(self.base.layers[layer + 2..].iter().cloned());
        let mut net = Network::from_layers(self.base.input_dim, layers)?;
        net.seed = self.base.seed;
        Ok(net)
    }

    /// Write base network plus autoencoder matrices as one JSON file.
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let rec = ProbedRecord {
            format: PROBED_FORMAT.into(),
            version: 1,
            base: self.base.clone(),
            autoencoder: self.autoencoder.clone(),
        };
        fs::write(path, serde_json::to_string(&rec)?).map_err(|e| Error::io(path, e))
    }
}

pub const PROBED_FORMAT: &str = "minwidth-probed-network";

#[derive(Serialize, Deserialize)]
struct ProbedRecord {
    format: String,
    version: u32,
    base: Network,
    autoencoder: SvdAutoencoder,
}

/// Read a file written by [`ProbedNetwork::save_json`].
pub fn load_probed_json(path: &Path) -> Result<(Network, SvdAutoencoder)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rec: ProbedRecord = serde_json::from_str(&text)?;
    if rec.format != PROBED_FORMAT {
        return Err(Error::Config(format!("{} is not a probed-network file", path.display())));
    }
    rec.base.validate()?;
    ProbedNetwork::new(&rec.base, rec.autoencoder.clone())?;
    Ok((rec.base, rec.autoencoder))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{matmul, thin_svd};
    use crate::nn::{Architecture, LayerSpec, Mode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn small_net(seed: u64) -> Network {
        let arch = Architecture::new(
            5,
            vec![
                LayerSpec::BatchNorm,
                LayerSpec::Dense { width: 6, activation: Activation::Abs },
                LayerSpec::Dense { width: 4, activation: Activation::Relu },
                LayerSpec::Dense { width: 3, activation: Activation::Softmax },
            ],
        )
        .unwrap();
        Network::new(&arch, seed).unwrap()
    }

    #[test]
    fn full_rank_projector_is_identity() {
        let f = thin_svd(&random(30, 6, 1)).unwrap();
        let ae = build_autoencoder(&f, 6, 1).unwrap();
        assert!(ae.projector().max_abs_diff(&Matrix::identity(6)) < 1e-9);
    }

    #[test]
    fn projector_identities() {
        let y = random(30, 6, 2);
        let f = thin_svd(&y).unwrap();
        for m in 1..=6 {
            let ae = build_autoencoder(&f, m, 1).unwrap();
            let p = ae.projector();
            assert!(p.max_abs_diff(&p.transpose()) < 1e-9);
            assert!(matmul(&p, &p).unwrap().max_abs_diff(&p) < 1e-9);
            let de = matmul(&ae.decoder, &ae.encoder).unwrap();
            assert!(de.max_abs_diff(&Matrix::identity(m)) < 1e-9);
        }
    }

    #[test]
    fn rank_one_exact() {
        let y = Matrix::from_fn(12, 5, |i, j| (i as f64 - 3.0) * (j as f64 + 1.0));
        let ae = build_autoencoder(&thin_svd(&y).unwrap(), 1, 1).unwrap();
        assert!(ae.apply(&y).unwrap().max_abs_diff(&y) < 1e-8);
    }

    #[test]
    fn truncation_error_matches_tail() {
        let y = random(40, 7, 3);
        let f = thin_svd(&y).unwrap();
        for m in 1..7 {
            let ae = build_autoencoder(&f, m, 1).unwrap();
            let err2 = y.sub(&ae.apply(&y).unwrap()).unwrap().frobenius_norm().powi(2);
            let tail: f64 = f.sigma[m..].iter().map(|s| s * s).sum();
            assert!((err2 - tail).abs() <= 1e-6 * tail.max(1e-300));
        }
    }

    #[test]
    fn bad_truncation_levels() {
        let f = thin_svd(&random(10, 4, 4)).unwrap();
        assert!(matches!(build_autoencoder(&f, 0, 1), Err(Error::Config(_))));
        assert!(matches!(build_autoencoder(&f, 5, 1), Err(Error::Config(_))));
    }

    #[test]
    fn fewer_samples_than_neurons() {
        let y = random(3, 8, 5);
        let f = thin_svd(&y).unwrap();
        let ae = build_autoencoder(&f, 8, 1).unwrap();
        assert!(ae.apply(&y).unwrap().max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn full_width_probe_matches_base() {
        let net = small_net(7);
        let x = random(25, 5, 8);
        let y = net.forward_capture(&x, 1).unwrap();
        let ae = build_autoencoder(&thin_svd(&y).unwrap(), 6, 1).unwrap();
        let probed = ProbedNetwork::new(&net, ae).unwrap();
        let base = net.forward(&x, Mode::Inference).unwrap();
        assert!(probed.forward(&x).unwrap().max_abs_diff(&base) < 1e-6);
    }

    #[test]
    fn folded_network_matches_probe() {
        let net = small_net(9);
        let x = random(25, 5, 10);
        for layer in [1, 2] {
            let y = net.forward_capture(&x, layer).unwrap();
            let f = thin_svd(&y).unwrap();
            for m in 1..=net.width_of(layer).unwrap() {
                let probed = ProbedNetwork::new(&net, build_autoencoder(&f, m, layer).unwrap()).unwrap();
                let folded = probed.fold_decoder_linear().unwrap();
                let a = probed.forward(&x).unwrap();
                let b = folded.forward(&x, Mode::Inference).unwrap();
                assert!(a.max_abs_diff(&b) < 1e-9);
                // single-sample batch
                let one = x.select_rows(&[3]);
                assert!(probed.forward(&one).unwrap().max_abs_diff(&folded.forward(&one, Mode::Inference).unwrap()) < 1e-9);
            }
        }
    }

    #[test]
    fn probe_rejects_output_layer() {
        let net = small_net(1);
        let f = thin_svd(&random(10, 3, 1)).unwrap();
        let ae = build_autoencoder(&f, 2, 3).unwrap();
        assert!(matches!(ProbedNetwork::new(&net, ae), Err(Error::Layer(_))));
    }

    #[test]
    fn fold_requires_dense_successor() {
        let arch = Architecture::new(
            3,
            vec![
                LayerSpec::Dense { width: 4, activation: Activation::Relu },
                LayerSpec::BatchNorm,
                LayerSpec::Dense { width: 2, activation: Activation::Linear },
            ],
        )
        .unwrap();
        let net = Network::new(&arch, 2).unwrap();
        let x = random(10, 3, 3);
        let f = thin_svd(&net.forward_capture(&x, 0).unwrap()).unwrap();
        let p = ProbedNetwork::new(&net, build_autoencoder(&f, 2, 0).unwrap()).unwrap();
        assert!(matches!(p.fold_decoder_linear(), Err(Error::Unsupported(_))));
    }

    #[test]
    fn probed_file_round_trip() {
        let net = small_net(3);
        let x = random(20, 5, 4);
        let f = thin_svd(&net.forward_capture(&x, 2).unwrap()).unwrap();
        let p = ProbedNetwork::new(&net, build_autoencoder(&f, 2, 2).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        p.save_json(&path).unwrap();
        let (base, ae) = load_probed_json(&path).unwrap();
        assert_eq!(&base, &net);
        assert_eq!(&ae, p.autoencoder());
    }
}
