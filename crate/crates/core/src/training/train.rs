use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::devices::NoiseSpec;
use crate::error::{OsnnError, Result};
use crate::layers::model::{argmax, cross_entropy_grad, ForwardNoise, SampleTrace};
use crate::layers::OsnnModel;

use super::dpe::DpeModel;
use super::noise::drifted_sigma;
use super::quant::QuantSpec;

/// Group-sparsity settings for [`super::prune_sigma_groups`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    /// Weight of the group penalty `lambda * sum ||Σ_ij||_2`.
    pub lambda: f64,
    /// Units with `||Σ_ij||_2 < tau` are removed.
    pub tau: f64,
    pub penalty_epochs: usize,
    pub finetune_epochs: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            tau: 0.0,
            penalty_epochs: 4,
            finetune_epochs: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Fractions of the run after which the rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    pub quant: Option<QuantSpec>,
    /// Injected on every training forward.
    pub noise: NoiseSpec,
    pub prune: PruneConfig,
    pub seed: u64,
    pub threads: usize,
    /// Test-set size used for the per-epoch accuracy column (`None` = all).
    pub eval_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            lr_milestones: vec![0.5, 0.75],
            lr_decay: 0.1,
            quant: Some(QuantSpec::default()),
            noise: NoiseSpec::none(),
            prune: PruneConfig::default(),
            seed: 0,
            threads: 1,
            eval_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(OsnnError::invalid("batch_size", "must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(OsnnError::invalid("learning_rate", format!("{}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(OsnnError::invalid("momentum", format!("{} not in [0, 1)", self.momentum)));
        }
        if self.threads == 0 {
            return Err(OsnnError::invalid("threads", "must be >= 1"));
        }
        self.noise.validate()
    }

    fn rate(&self, epoch: usize, epochs: usize) -> f64 {
        let mut lr = self.learning_rate;
        for m in &self.lr_milestones {
            if epoch as f64 >= m * epochs as f64 {
                lr *= self.lr_decay;
            }
        }
        lr
    }
}

/// Where the training forward gets its B and P matrices from.
#[derive(Clone, Debug)]
pub enum Backend {
    Ideal,
    Dpe(Box<DpeModel>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub pruned_fraction: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,test_acc,pruned_fraction";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.train_loss, self.train_acc, self.test_acc, self.pruned_fraction
        )
    }
}

/// Header plus one line per epoch.
pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: OsnnModel,
    pub metrics: Vec<EpochMetrics>,
}

/// Per-example random stream: independent of batching and thread count.
pub(crate) fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// Per-layer weights for one forward pass; phase drift perturbs every
/// kept Σ entry independently.
pub(crate) fn sample_weights(
    model: &OsnnModel,
    sigmas: &[Vec<f64>],
    noise: &NoiseSpec,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<Vec<f64>>> {
    if noise.phase_drift_sigma <= 0.0 {
        return None;
    }
    let normal = Normal::new(0.0, noise.phase_drift_sigma).expect("validated");
    Some(
        model
            .blocked_layers()
            .zip(sigmas)
            .map(|(layer, sigma)| {
                let k = layer.k();
                let drifted: Vec<f64> = sigma
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| {
                        if layer.is_kept(i / k) {
                            drifted_sigma(s, normal.sample(rng))
                        } else {
                            0.0
                        }
                    })
                    .collect();
                layer.dense_from(&drifted)
            })
            .collect(),
    )
}

/// Logits of one example with `noise` drawn from `rng`.
pub(crate) fn noisy_logits(
    model: &OsnnModel,
    nominal: &[Vec<f64>],
    sigmas: &[Vec<f64>],
    image: &[f64],
    noise: &NoiseSpec,
    rng: &mut ChaCha8Rng,
    trace: Option<&mut SampleTrace>,
) -> (Vec<f64>, Option<Vec<Vec<f64>>>) {
    if noise.is_zero() {
        return (model.forward_sample::<ChaCha8Rng>(nominal, image, None, trace), None);
    }
    let drifted = sample_weights(model, sigmas, noise, rng);
    let weights = drifted.as_deref().unwrap_or(nominal);
    let logits = model.forward_sample(
        weights,
        image,
        Some(ForwardNoise {
            input_sigma: noise.input_sigma,
            detector_sigma: noise.detector_sigma,
            rng,
        }),
        trace,
    );
    (logits, drifted)
}

struct Partial {
    loss: f64,
    correct: usize,
    grad_w: Vec<Vec<f64>>,
    non_finite: bool,
}

fn chunk_gradient(
    model: &OsnnModel,
    nominal: &[Vec<f64>],
    sigmas: &[Vec<f64>],
    data: &Dataset,
    indices: &[usize],
    noise: &NoiseSpec,
    seed: u64,
    epoch: usize,
) -> Partial {
    let mut grad_w: Vec<Vec<f64>> = nominal.iter().map(|w| vec![0.0; w.len()]).collect();
    let mut trace = SampleTrace {
        acts: Vec::new(),
        blocks: Vec::new(),
    };
    let mut loss = 0.0;
    let mut correct = 0;
    let mut non_finite = false;
    for &idx in indices {
        let mut rng = sample_rng(seed, epoch, idx);
        let (logits, drifted) = noisy_logits(model, nominal, sigmas, data.image(idx), noise, &mut rng, Some(&mut trace));
        let label = data.label(idx);
        let (l, g) = cross_entropy_grad(&logits, label);
        if !l.is_finite() {
            non_finite = true;
        }
        loss += l;
        if argmax(&logits) == label {
            correct += 1;
        }
        model.backward_sample(drifted.as_deref().unwrap_or(nominal), &trace, &g, &mut grad_w);
    }
    Partial {
        loss,
        correct,
        grad_w,
        non_finite,
    }
}

/// Summed loss, correct count and `dL/dW` over `indices`, split across
/// `threads` contiguous chunks reduced in order.
#[allow(clippy::too_many_arguments)]
fn batch_gradient(
    model: &OsnnModel,
    nominal: &[Vec<f64>],
    sigmas: &[Vec<f64>],
    data: &Dataset,
    indices: &[usize],
    noise: &NoiseSpec,
    seed: u64,
    epoch: usize,
    threads: usize,
) -> Partial {
    if threads <= 1 || indices.len() < 2 * threads {
        return chunk_gradient(model, nominal, sigmas, data, indices, noise, seed, epoch);
    }
    let size = indices.len().div_ceil(threads);
    let parts: Vec<Partial> = std::thread::scope(|s| {
        let handles: Vec<_> = indices
            .chunks(size)
            .map(|chunk| s.spawn(move || chunk_gradient(model, nominal, sigmas, data, chunk, noise, seed, epoch)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut iter = parts.into_iter();
    let mut acc = iter.next().expect("at least one chunk");
    for p in iter {
        acc.loss += p.loss;
        acc.correct += p.correct;
        acc.non_finite |= p.non_finite;
        for (a, b) in acc.grad_w.iter_mut().zip(&p.grad_w) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
    acc
}

/// Mean cross-entropy over `indices` and its gradient with respect to the
/// realized Σ of every blocked layer (no noise).
pub fn loss_and_sigma_grad(model: &OsnnModel, data: &Dataset, indices: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    if indices.is_empty() {
        return Err(OsnnError::Empty("indices"));
    }
    let nominal = model.nominal_weights();
    let sigmas: Vec<Vec<f64>> = model.blocked_layers().map(|l| l.effective_sigma()).collect();
    let p = chunk_gradient(model, &nominal, &sigmas, data, indices, &NoiseSpec::none(), 0, 0);
    let n = indices.len() as f64;
    let grads = model
        .blocked_layers()
        .zip(&p.grad_w)
        .map(|(l, g)| l.sigma_grad_from_dense(g).into_iter().map(|v| v / n).collect())
        .collect();
    Ok((p.loss / n, grads))
}

/// Result of scoring a model on a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Evaluation {
    pub(crate) fn from_predictions(preds: &[(usize, usize, f64)], classes: usize) -> Self {
        let mut confusion = vec![vec![0; classes]; classes];
        let mut correct = 0;
        let mut loss = 0.0;
        for &(label, pred, l) in preds {
            confusion[label][pred] += 1;
            if label == pred {
                correct += 1;
            }
            loss += l;
        }
        let n = preds.len().max(1) as f64;
        Self {
            accuracy: correct as f64 / n,
            loss: loss / n,
            confusion,
        }
    }
}

/// Runs `f(index)` for every index, in parallel chunks, keeping order.
pub(crate) fn par_map<T: Send>(count: usize, threads: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    if threads <= 1 || count < 2 * threads {
        return (0..count).map(f).collect();
    }
    let size = count.div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..count)
            .step_by(size)
            .map(|start| s.spawn(move || (start..(start + size).min(count)).map(f).collect::<Vec<T>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Accuracy of the model's own math (ideal or hardware B/P) with optional
/// dynamic noise; example `i` draws noise from stream `(seed, i)`.
pub fn evaluate(model: &OsnnModel, data: &Dataset, noise: &NoiseSpec, seed: u64, threads: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(OsnnError::Empty("dataset"));
    }
    noise.validate()?;
    let classes = model.output_len();
    let nominal = model.nominal_weights();
    let sigmas: Vec<Vec<f64>> = model.blocked_layers().map(|l| l.effective_sigma()).collect();
    let preds = par_map(data.len(), threads, |i| {
        let mut rng = sample_rng(seed, usize::MAX >> 32, i);
        let (logits, _) = noisy_logits(model, &nominal, &sigmas, data.image(i), noise, &mut rng, None);
        let label = data.label(i);
        (label, argmax(&logits), cross_entropy_grad(&logits, label).0)
    });
    Ok(Evaluation::from_predictions(&preds, classes))
}

/// Momentum SGD state over the latent Σ of every blocked layer.
pub(crate) struct Optimizer {
    velocity: Vec<Vec<f64>>,
}

impl Optimizer {
    pub(crate) fn new(model: &OsnnModel) -> Self {
        Self {
            velocity: model.blocked_layers().map(|l| vec![0.0; l.sigma().len()]).collect(),
        }
    }
}

/// Options for one stretch of epochs.
pub(crate) struct Phase<'a> {
    pub config: &'a TrainConfig,
    pub epochs: usize,
    pub first_epoch: usize,
    /// Group-lasso weight applied as a proximal step.
    pub group_penalty: f64,
}

pub(crate) fn pruned_fraction(model: &OsnnModel) -> f64 {
    let mut total = 0;
    let mut pruned = 0;
    for l in model.blocked_layers() {
        let units = l.padding().unit_count();
        total += units;
        pruned += (0..units).filter(|&u| !l.is_kept(u)).count();
    }
    if total == 0 {
        0.0
    } else {
        pruned as f64 / total as f64
    }
}

pub(crate) fn run_epochs(
    model: &mut OsnnModel,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    phase: &Phase<'_>,
    opt: &mut Optimizer,
) -> Result<Vec<EpochMetrics>> {
    let cfg = phase.config;
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(OsnnError::Empty("training set"));
    }
    let expected: usize = model.input_shape().iter().product();
    let (h, w) = train_set.dims();
    if h * w != expected {
        return Err(OsnnError::shape(
            "train",
            format!("images are {}x{}, model expects {:?}", h, w, model.input_shape()),
        ));
    }
    let test_subset = test_set.map(|t| match cfg.eval_limit {
        Some(n) => t.head(n),
        None => t.clone(),
    });
    let mut log = Vec::with_capacity(phase.epochs);
    for e in 0..phase.epochs {
        let epoch = phase.first_epoch + e;
        let lr = cfg.rate(e, phase.epochs);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut sample_rng(cfg.seed, epoch, usize::MAX >> 32));
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let nominal = model.nominal_weights();
            let sigmas: Vec<Vec<f64>> = model.blocked_layers().map(|l| l.effective_sigma()).collect();
            let part = batch_gradient(
                model,
                &nominal,
                &sigmas,
                train_set,
                batch,
                &cfg.noise,
                cfg.seed,
                epoch,
                cfg.threads,
            );
            if part.non_finite || !part.loss.is_finite() {
                return Err(OsnnError::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    last_good: Box::new(model.clone()),
                });
            }
            loss_sum += part.loss;
            correct += part.correct;
            let scale = 1.0 / batch.len() as f64;
            let grads: Vec<Vec<f64>> = model
                .blocked_layers()
                .zip(&part.grad_w)
                .map(|(l, g)| l.sigma_grad_from_dense(g))
                .collect();
            for ((layer, g), v) in model.blocked_layers_mut().zip(grads).zip(opt.velocity.iter_mut()) {
                let k = layer.k();
                let kept: Vec<bool> = (0..layer.padding().unit_count()).map(|u| layer.is_kept(u)).collect();
                let sigma = layer.sigma_mut();
                for i in 0..sigma.len() {
                    v[i] = cfg.momentum * v[i] + g[i] * scale;
                    sigma[i] -= lr * v[i];
                }
                if phase.group_penalty > 0.0 {
                    let shrink = lr * phase.group_penalty;
                    for unit in sigma.chunks_mut(k) {
                        let norm = unit.iter().map(|s| s * s).sum::<f64>().sqrt();
                        let f = if norm > shrink { 1.0 - shrink / norm } else { 0.0 };
                        unit.iter_mut().for_each(|s| *s *= f);
                    }
                }
                for s in sigma.iter_mut() {
                    *s = s.clamp(-1.0, 1.0);
                }
                for (u, keep) in kept.iter().enumerate() {
                    if !keep {
                        sigma[u * k..(u + 1) * k].fill(0.0);
                        v[u * k..(u + 1) * k].fill(0.0);
                    }
                }
            }
        }
        let test_acc = match &test_subset {
            Some(t) => evaluate(model, t, &NoiseSpec::none(), 0, cfg.threads)?.accuracy,
            None => f64::NAN,
        };
        log.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            test_acc,
            pruned_fraction: pruned_fraction(model),
        });
    }
    Ok(log)
}

/// Minibatch SGD on the Σ values of `model`.
///
/// Σ magnitudes are quantized in the forward pass (straight-through in the
/// backward pass) when `config.quant` is set, and `config.noise` is drawn
/// for every example. With the `Dpe` backend the fitted chip model replaces
/// the ideal B and P of every layer.
pub fn train(
    model: &OsnnModel,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    config: &TrainConfig,
    backend: &Backend,
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.epochs == 0 {
        return Ok(TrainOutcome {
            model: model.clone(),
            metrics: Vec::new(),
        });
    }
    let mut model = model.clone();
    model.set_quant(config.quant);
    if let Backend::Dpe(dpe) = backend {
        for layer in model.blocked_layers_mut() {
            let hw = dpe.hardware_transfer(layer.b_config(), layer.p_config())?;
            layer.set_hardware(Some(hw))?;
        }
    }
    let mut opt = Optimizer::new(&model);
    let phase = Phase {
        config,
        epochs: config.epochs,
        first_epoch: 0,
        group_penalty: 0.0,
    };
    let metrics = run_epochs(&mut model, train_set, test_set, &phase, &mut opt)?;
    Ok(TrainOutcome { model, metrics })
}
