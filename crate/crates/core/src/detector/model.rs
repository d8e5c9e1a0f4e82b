use std::path::Path;

use base64::Engine as _;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::nn::{sigmoid, Adam, LayerSpec, Network};
use super::{bayes_confidence, heuristic_confidence, Detection, DetectorError};
use crate::calibrate::ThresholdSet;
use crate::diagram::{write_atomic, Category, PatchSample, DEFAULT_PATCH_SIZE};

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_FORMAT: &str = "qdtune-detector";
/// Initial posterior standard deviation of every bcnn parameter.
const BCNN_INIT_SIGMA: f64 = 0.05;
/// Roughly this many validation checkpoints per training run.
const VALIDATION_POINTS: usize = 20;
const INFER_CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ff,
    Cnn,
    Bcnn,
}

impl std::str::FromStr for ModelKind {
    type Err = DetectorError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ff" => Ok(ModelKind::Ff),
            "cnn" => Ok(ModelKind::Cnn),
            "bcnn" => Ok(ModelKind::Bcnn),
            other => Err(DetectorError::InvalidSpec(format!(
                "unknown model kind `{other}` (expected ff, cnn or bcnn)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Hidden layers; the single-logit output layer is implicit.
    pub layers: Vec<LayerSpec>,
    pub train_updates: usize,
    pub learning_rate: f64,
    pub dropout_rate: f64,
    pub batch_size: usize,
    /// Forward passes per bcnn inference.
    pub bayes_samples: usize,
    pub seed: u64,
    pub patch_size: usize,
}

impl ModelSpec {
    /// Full-scale architecture and training settings.
    pub fn full_scale(kind: ModelKind) -> Self {
        let conv = vec![
            LayerSpec::Conv { kernel: 4, channels: 12 },
            LayerSpec::Conv { kernel: 4, channels: 24 },
            LayerSpec::Dense { units: 200 },
            LayerSpec::Dense { units: 100 },
        ];
        let (layers, updates, lr, dropout) = match kind {
            ModelKind::Ff => (
                vec![LayerSpec::Dense { units: 400 }, LayerSpec::Dense { units: 100 }],
                15_000,
                5e-4,
                0.6,
            ),
            ModelKind::Cnn => (conv, 30_000, 1e-3, 0.6),
            ModelKind::Bcnn => (conv, 30_000, 1e-3, 0.0),
        };
        Self {
            kind,
            layers,
            train_updates: updates,
            learning_rate: lr,
            dropout_rate: dropout,
            batch_size: 512,
            bayes_samples: 10,
            seed: 0,
            patch_size: DEFAULT_PATCH_SIZE,
        }
    }

    /// Reduced budget for quick runs: a tenth of the updates, batches of 128.
    pub fn desk_scale(mut self) -> Self {
        self.train_updates = (self.train_updates / 10).max(1);
        self.batch_size = 128;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<Network, DetectorError> {
        let bad = |m: &str| Err(DetectorError::InvalidSpec(m.to_string()));
        if self.train_updates == 0 || self.batch_size == 0 {
            return bad("train_updates and batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if self.kind == ModelKind::Bcnn && self.bayes_samples < 2 {
            return bad("bcnn needs at least 2 bayes_samples");
        }
        if self.kind == ModelKind::Ff && self.layers.iter().any(|l| matches!(l, LayerSpec::Conv { .. })) {
            return bad("ff models cannot contain convolutions");
        }
        Network::new(&self.layers, self.patch_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub update: usize,
    /// Mean training loss since the previous entry.
    pub train_loss: f64,
    pub val_accuracy: f64,
}

/// Trained network parameters plus provenance. For bcnn the parameter vector
/// holds all means followed by all pre-softplus scales.
#[derive(Clone, Debug)]
pub struct TrainedDetector {
    pub spec: ModelSpec,
    params: Vec<f64>,
    pub log: Vec<LogEntry>,
    pub thresholds: Option<ThresholdSet>,
    net: Network,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn inverse_softplus(y: f64) -> f64 {
    y.exp_m1().ln()
}

fn batch_matrix<'a>(rows: impl ExactSizeIterator<Item = &'a [f64]>, width: usize) -> Array2<f64> {
    let n = rows.len();
    let mut flat = Vec::with_capacity(n * width);
    rows.for_each(|r| flat.extend_from_slice(r));
    Array2::from_shape_vec((n, width), flat).expect("rows have the patch width")
}

/// Variational objective pieces for one bcnn update.
struct BayesStep {
    loss: f64,
    grad: Vec<f64>,
}

/// Samples weights `mu + softplus(rho)·eps`, returns the batch loss plus the
/// KL term scaled by `kl_weight`, and gradients w.r.t. `[mu, rho]`.
fn bayes_loss_and_grad(
    net: &Network,
    params: &[f64],
    eps: &[f64],
    x: &Array2<f64>,
    targets: &[f64],
    kl_weight: f64,
) -> BayesStep {
    let n = net.n_params();
    let (mu, rho) = params.split_at(n);
    let w: Vec<f64> = (0..n).map(|i| mu[i] + softplus(rho[i]) * eps[i]).collect();
    let (data_loss, gw) = net.loss_and_grad(&w, x, targets, None);
    let mut grad = vec![0.0; 2 * n];
    let mut kl = 0.0;
    for i in 0..n {
        let sigma = softplus(rho[i]);
        let dsig = sigmoid(rho[i]);
        kl += 0.5 * (sigma * sigma + mu[i] * mu[i] - 1.0) - sigma.ln();
        grad[i] = gw[i] + kl_weight * mu[i];
        grad[n + i] = gw[i] * eps[i] * dsig + kl_weight * (sigma - 1.0 / sigma) * dsig;
    }
    BayesStep {
        loss: data_loss + kl_weight * kl,
        grad,
    }
}

/// Draws `size` indices, each from `lines` or `empties` with probability ½
/// and uniformly within the chosen pool. Both pools must be non-empty.
pub fn balanced_batch(lines: &[usize], empties: &[usize], size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..size)
        .map(|_| {
            let pool = if rng.random_bool(0.5) { lines } else { empties };
            pool[rng.random_range(0..pool.len())]
        })
        .collect()
}

/// Trains a detector. Batches are drawn class-balanced (each item is a line
/// sample with probability ½) and the parameters with the best validation
/// accuracy are kept.
pub fn train(
    spec: &ModelSpec,
    train: &[PatchSample],
    val: &[PatchSample],
) -> Result<TrainedDetector, DetectorError> {
    let net = spec.validate()?;
    if train.is_empty() {
        return Err(DetectorError::EmptySplit("training"));
    }
    if val.is_empty() {
        return Err(DetectorError::EmptySplit("validation"));
    }
    let width = net.input_len();
    for s in train.iter().chain(val) {
        if s.values.len() != width {
            return Err(DetectorError::ShapeMismatch {
                expected: width,
                found: s.values.len(),
            });
        }
    }
    let (lines, empties): (Vec<usize>, Vec<usize>) =
        (0..train.len()).partition(|&i| train[i].category == Category::Line);
    if lines.is_empty() || empties.is_empty() {
        return Err(DetectorError::SingleClass);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bayes = spec.kind == ModelKind::Bcnn;
    let n = net.n_params();
    let mut params = net.init(&mut rng);
    if bayes {
        params.resize(2 * n, inverse_softplus(BCNN_INIT_SIGMA));
    }
    let mut opt = Adam::new(params.len(), spec.learning_rate);
    let num_batches = train.len().div_ceil(spec.batch_size) as f64;
    let kl_weight = 1.0 / (num_batches * spec.batch_size as f64);
    let eval_every = (spec.train_updates / VALIDATION_POINTS).max(1);

    let mut detector = TrainedDetector {
        spec: spec.clone(),
        params: params.clone(),
        log: Vec::new(),
        thresholds: None,
        net: net.clone(),
    };
    let mut best = f64::NEG_INFINITY;
    let mut loss_acc = 0.0;
    let mut loss_count = 0usize;
    let mut eps = vec![0.0; if bayes { n } else { 0 }];
    for update in 0..spec.train_updates {
        let idx = balanced_batch(&lines, &empties, spec.batch_size, &mut rng);
        let x = batch_matrix(idx.iter().map(|&i| train[i].values.as_slice()), width);
        let t: Vec<f64> = idx.iter().map(|&i| train[i].category.as_target()).collect();
        let (loss, grad) = if bayes {
            eps.iter_mut().for_each(|e| *e = rng.sample(StandardNormal));
            let step = bayes_loss_and_grad(&net, &params, &eps, &x, &t, kl_weight);
            (step.loss, step.grad)
        } else {
            let dropout = (spec.dropout_rate > 0.0).then_some((spec.dropout_rate, &mut rng));
            net.loss_and_grad(&params, &x, &t, dropout)
        };
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(DetectorError::Divergence { update });
        }
        opt.step(&mut params, &grad);
        loss_acc += loss;
        loss_count += 1;

        let last = update + 1 == spec.train_updates;
        if (update + 1) % eval_every == 0 || last {
            let candidate = TrainedDetector {
                params: params.clone(),
                ..detector.clone_without_params()
            };
            let acc = candidate.point_accuracy(val);
            detector.log.push(LogEntry {
                update: update + 1,
                train_loss: loss_acc / loss_count as f64,
                val_accuracy: acc,
            });
            loss_acc = 0.0;
            loss_count = 0;
            if acc > best {
                best = acc;
                detector.params = candidate.params;
            }
        }
    }
    log::debug!(
        "trained {:?} for {} updates, best validation accuracy {best:.4}",
        spec.kind,
        spec.train_updates
    );
    Ok(detector)
}

impl TrainedDetector {
    fn clone_without_params(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            params: Vec::new(),
            log: self.log.clone(),
            thresholds: self.thresholds,
            net: self.net.clone(),
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Deterministic logits: the posterior mean for bcnn.
    fn point_logits(&self, x: &Array2<f64>) -> Vec<f64> {
        self.net.logits(&self.params[..self.net.n_params()], x)
    }

    fn point_accuracy(&self, samples: &[PatchSample]) -> f64 {
        let width = self.net.input_len();
        let mut correct = 0usize;
        for chunk in samples.chunks(INFER_CHUNK) {
            let x = batch_matrix(chunk.iter().map(|s| s.values.as_slice()), width);
            for (z, s) in self.point_logits(&x).into_iter().zip(chunk) {
                if super::category_of(sigmoid(z)) == s.category {
                    correct += 1;
                }
            }
        }
        correct as f64 / samples.len() as f64
    }

    /// Copy of a bcnn with every parameter scale set to zero.
    pub fn with_zero_scales(&self) -> Self {
        let mut out = self.clone();
        if self.spec.kind == ModelKind::Bcnn {
            let n = self.net.n_params();
            out.params[n..].fill(-1000.0);
        }
        out
    }

    pub fn infer(&self, patch: &[f64], sampling_seed: Option<u64>) -> Result<Detection, DetectorError> {
        Ok(self.infer_batch(&[patch], sampling_seed)?.remove(0))
    }

    /// Verdicts for many patches. For bcnn every patch sees the same
    /// `bayes_samples` parameter draws, derived from `sampling_seed` alone, so
    /// a patch's verdict does not depend on what else is in the batch.
    pub fn infer_batch<P: AsRef<[f64]>>(
        &self,
        patches: &[P],
        sampling_seed: Option<u64>,
    ) -> Result<Vec<Detection>, DetectorError> {
        let width = self.net.input_len();
        for p in patches {
            let found = p.as_ref().len();
            if found != width {
                return Err(DetectorError::ShapeMismatch { expected: width, found });
            }
        }
        let matrices: Vec<Array2<f64>> = patches
            .chunks(INFER_CHUNK)
            .map(|c| batch_matrix(c.iter().map(|p| p.as_ref()), width))
            .collect();
        if self.spec.kind != ModelKind::Bcnn {
            let mut out = Vec::with_capacity(patches.len());
            for x in &matrices {
                for z in self.point_logits(x) {
                    let y = sigmoid(z);
                    out.push(Detection::new(y, heuristic_confidence(y)?));
                }
            }
            return Ok(out);
        }
        let seed = sampling_seed.ok_or(DetectorError::MissingSamplingSeed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.net.n_params();
        let (mu, rho) = self.params.split_at(n);
        let draws = self.spec.bayes_samples;
        let mut samples = vec![Vec::with_capacity(draws); patches.len()];
        for _ in 0..draws {
            let w: Vec<f64> = (0..n)
                .map(|i| {
                    let e: f64 = rng.sample(StandardNormal);
                    mu[i] + softplus(rho[i]) * e
                })
                .collect();
            let mut k = 0;
            for x in &matrices {
                for z in self.net.logits(&w, x) {
                    samples[k].push(sigmoid(z));
                    k += 1;
                }
            }
        }
        samples
            .into_iter()
            .map(|s| {
                let y = s.iter().sum::<f64>() / s.len() as f64;
                Ok(Detection::new(y, bayes_confidence(&s)?))
            })
            .collect()
    }

    fn param_bytes(&self) -> Vec<u8> {
        self.params.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// SHA-256 of the little-endian parameter bytes, hex encoded.
    pub fn parameter_checksum(&self) -> String {
        hex(&Sha256::digest(self.param_bytes()))
    }

    pub fn to_json(&self) -> String {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            parameters: ParamBlock {
                encoding: "f64-le-base64".to_string(),
                count: self.params.len(),
                sha256: self.parameter_checksum(),
                data: base64::engine::general_purpose::STANDARD.encode(self.param_bytes()),
            },
            log: self.log.clone(),
            thresholds: self.thresholds,
        };
        serde_json::to_string_pretty(&file).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DetectorError> {
        let bad = |m: String| DetectorError::Checkpoint(m);
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(bad(format!("unexpected format `{}`", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {}", file.version)));
        }
        if file.parameters.encoding != "f64-le-base64" {
            return Err(bad(format!("unsupported encoding `{}`", file.parameters.encoding)));
        }
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&file.parameters.data)
            .map_err(|e| bad(format!("parameter data: {e}")))?;
        if bytes.len() != file.parameters.count * 8 {
            return Err(bad(format!(
                "parameter count {} does not match {} data bytes",
                file.parameters.count,
                bytes.len()
            )));
        }
        let net = file.spec.validate()?;
        let expected = net.n_params() * if file.spec.kind == ModelKind::Bcnn { 2 } else { 1 };
        if file.parameters.count != expected {
            return Err(bad(format!(
                "spec needs {expected} parameters, checkpoint has {}",
                file.parameters.count
            )));
        }
        let params = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let out = Self {
            spec: file.spec,
            params,
            log: file.log,
            thresholds: file.thresholds,
            net,
        };
        if out.parameter_checksum() != file.parameters.sha256 {
            return Err(bad("parameter checksum mismatch".into()));
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DetectorError> {
        let path = path.as_ref();
        write_atomic(path, self.to_json().as_bytes()).map_err(|source| DetectorError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DetectorError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| DetectorError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    spec: ModelSpec,
    parameters: ParamBlock,
    log: Vec<LogEntry>,
    thresholds: Option<ThresholdSet>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamBlock {
    encoding: String,
    count: usize,
    sha256: String,
    data: String,
}

#[doc(hidden)]
pub mod testing {
    //! Hooks for gradient checks from integration tests.
    use super::*;

    /// Loss and `[mu, rho]` gradient of one bcnn update with fixed noise.
    pub fn bayes_objective(
        net: &Network,
        params: &[f64],
        eps: &[f64],
        x: &Array2<f64>,
        targets: &[f64],
        kl_weight: f64,
    ) -> (f64, Vec<f64>) {
        let s = bayes_loss_and_grad(net, params, eps, x, targets, kl_weight);
        (s.loss, s.grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagram::Rect;

    fn toy_samples(n: usize, side: usize, seed: u64) -> Vec<PatchSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|k| {
                let line = k % 3 == 0;
                let values = (0..side * side)
                    .map(|i| {
                        let centre = (i / side) == side / 2;
                        let base: f64 = rng.random_range(0.0..0.4);
                        if line && centre { 0.6 + base } else { base }
                    })
                    .collect();
                PatchSample {
                    values,
                    rect: Rect::new(0, 0, side),
                    category: if line { Category::Line } else { Category::NoLine },
                    diagram_id: "toy".into(),
                }
            })
            .collect()
    }

    fn small(kind: ModelKind) -> ModelSpec {
        let mut s = ModelSpec::full_scale(kind);
        s.patch_size = 6;
        s.layers = match kind {
            ModelKind::Ff => vec![LayerSpec::Dense { units: 8 }],
            _ => vec![LayerSpec::Conv { kernel: 3, channels: 2 }, LayerSpec::Dense { units: 6 }],
        };
        s.train_updates = 150;
        s.batch_size = 16;
        s.learning_rate = 0.01;
        s
    }

    #[test]
    fn full_scale_defaults() {
        let ff = ModelSpec::full_scale(ModelKind::Ff);
        assert_eq!((ff.train_updates, ff.learning_rate, ff.batch_size), (15_000, 5e-4, 512));
        let cnn = ModelSpec::full_scale(ModelKind::Cnn);
        assert_eq!((cnn.train_updates, cnn.learning_rate, cnn.dropout_rate), (30_000, 1e-3, 0.6));
        let b = ModelSpec::full_scale(ModelKind::Bcnn);
        assert_eq!((b.dropout_rate, b.bayes_samples, b.layers.len()), (0.0, 10, 4));
        let desk = ModelSpec::full_scale(ModelKind::Cnn).desk_scale();
        assert_eq!((desk.train_updates, desk.batch_size), (3000, 128));
    }

    #[test]
    fn learns_a_separable_toy_problem_deterministically() {
        let data = toy_samples(300, 6, 1);
        let val = toy_samples(60, 6, 2);
        for kind in [ModelKind::Ff, ModelKind::Cnn, ModelKind::Bcnn] {
            let spec = small(kind);
            let a = train(&spec, &data, &val).unwrap();
            let b = train(&spec, &data, &val).unwrap();
            assert_eq!(a.parameter_checksum(), b.parameter_checksum(), "{kind:?}");
            let best = a.log.iter().map(|e| e.val_accuracy).fold(0.0, f64::max);
            assert!(best >= 0.95, "{kind:?}: {best}");
        }
    }

    #[test]
    fn rejects_single_class_and_bad_shapes() {
        let data: Vec<_> = toy_samples(30, 6, 1)
            .into_iter()
            .filter(|s| s.category == Category::Line)
            .collect();
        assert!(matches!(train(&small(ModelKind::Ff), &data, &data), Err(DetectorError::SingleClass)));
        let det = train(&small(ModelKind::Ff), &toy_samples(30, 6, 1), &toy_samples(9, 6, 2)).unwrap();
        assert!(matches!(det.infer(&[0.0; 25], None), Err(DetectorError::ShapeMismatch { .. })));
    }

    #[test]
    fn bcnn_zero_scales_give_full_confidence() {
        let spec = small(ModelKind::Bcnn);
        let det = train(&spec, &toy_samples(60, 6, 3), &toy_samples(12, 6, 4)).unwrap();
        let patch = toy_samples(1, 6, 5).remove(0).values;
        assert!(matches!(det.infer(&patch, None), Err(DetectorError::MissingSamplingSeed)));
        let fixed = det.with_zero_scales();
        assert_eq!(fixed.infer(&patch, Some(1)).unwrap().confidence, 1.0);
        let a = det.infer(&patch, Some(9)).unwrap();
        assert_eq!(a, det.infer(&patch, Some(9)).unwrap());
        assert!(a.confidence < 1.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut det = train(&small(ModelKind::Cnn), &toy_samples(40, 6, 1), &toy_samples(10, 6, 2)).unwrap();
        det.thresholds = Some(ThresholdSet::new(0.7, 0.55, 0.2));
        let back = TrainedDetector::from_json(&det.to_json()).unwrap();
        assert_eq!(back.params(), det.params());
        assert_eq!(back.thresholds, det.thresholds);
        assert_eq!(back.log, det.log);
        let tampered = det.to_json().replace("\"version\": 1", "\"version\": 7");
        assert!(TrainedDetector::from_json(&tampered).is_err());
    }
}
