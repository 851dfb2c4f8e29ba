//! Adam training loop over stratified batches, and evaluation.

use std::fmt::Write as _;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::lora::{AdapterSet, LoraConfig};
use crate::loss::{combined_loss_graph, LossConfig};
use crate::metrics::EvalReport;
use crate::model::{bind_params, forward, forward_graph, ModelState};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub lora: LoraConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 36,
            steps: 500,
            seed: 0,
            loss: LossConfig::default(),
            lora: LoraConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("adam_epsilon must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.steps == 0 {
            return bad("steps must be positive");
        }
        self.loss.validate()?;
        self.lora.validate()
    }
}

/// Adam moments for each trainable tensor, keyed by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub moments: IndexMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self {
            t: 0,
            moments: IndexMap::new(),
        }
    }
}

/// One Adam step with decoupled weight decay:
/// `p ← p − lr·wd·p`, then `p ← p − lr·m̂/(√v̂ + ε)`.
///
/// `params` lists exactly the trainable tensors; each must have a gradient
/// in `grads`.
pub fn adam_step<T: Scalar>(
    params: &mut [(String, &mut Tensor<T>)],
    grads: &IndexMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no gradient for trainable parameter {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let f = T::from_f64_lossy;
    let (b1, b2) = (f(cfg.beta1), f(cfg.beta2));
    let bc1 = f(1.0 - cfg.beta1.powi(t));
    let bc2 = f(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (f(cfg.learning_rate), f(cfg.adam_epsilon));
    let decay = f(cfg.learning_rate * cfg.weight_decay);

    for (name, p) in params.iter_mut() {
        let g = &grads[name.as_str()];
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
        let pd = p.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
            let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let mut x = pd[i];
            x -= decay * x;
            x -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            pd[i] = x;
        }
    }
    Ok(())
}

/// Draws batches half real, half fake (reals take the odd slot), cycling
/// through a fresh shuffle of each class. Falls back to one class only
/// when the other is absent.
pub struct StratifiedSampler {
    rng: ChaCha8Rng,
    real: ClassCycle,
    fake: ClassCycle,
}

struct ClassCycle {
    items: Vec<usize>,
    pos: usize,
}

impl ClassCycle {
    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == 0 {
            self.items.shuffle(rng);
        }
        let v = self.items[self.pos];
        self.pos = (self.pos + 1) % self.items.len();
        v
    }
}

impl StratifiedSampler {
    pub fn new(samples: &[Sample], seed: u64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Contract("cannot sample batches from an empty dataset".into()));
        }
        let (real, fake): (Vec<usize>, Vec<usize>) = (0..samples.len()).partition(|&i| samples[i].is_real());
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            real: ClassCycle { items: real, pos: 0 },
            fake: ClassCycle { items: fake, pos: 0 },
        })
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let n_real = match (self.real.items.is_empty(), self.fake.items.is_empty()) {
            (true, _) => 0,
            (_, true) => size,
            _ => size.div_ceil(2),
        };
        let mut out: Vec<usize> = (0..n_real).map(|_| self.real.next(&mut self.rng)).collect();
        out.extend((n_real..size).map(|_| self.fake.next(&mut self.rng)));
        out
    }
}

/// Stacks sample images into `[B, C, H, W]`.
pub fn stack_images<T: Scalar>(samples: &[Sample], idx: &[usize]) -> Result<Tensor<T>> {
    let first = samples
        .get(*idx.first().ok_or_else(|| Error::Contract("empty batch".into()))?)
        .ok_or_else(|| Error::Contract("batch index out of range".into()))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(idx.len() * first.image.len());
    for &i in idx {
        let s = &samples[i];
        if s.image.shape() != shape.as_slice() {
            return Err(Error::Shape {
                op: "stack_images",
                lhs: shape.clone(),
                rhs: s.image.shape().to_vec(),
            });
        }
        data.extend(s.image.data().iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    let mut full = vec![idx.len()];
    full.extend(shape);
    Tensor::new(full, data)
}

fn label_tensor<T: Scalar>(samples: &[Sample], idx: &[usize]) -> Tensor<T> {
    Tensor::from_fn([idx.len()], |i| T::from_f64_lossy(samples[idx[i]].label.value()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub l_ce: f64,
    pub l_scl: f64,
    pub l: f64,
    /// Steps so far (this one included) whose SCL term was skipped.
    pub skipped_scl_count: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const HEADER: &'static str = "step,l_ce,l_scl,l,skipped_scl_count";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.step, r.l_ce, r.l_scl, r.l, r.skipped_scl_count);
        }
        s
    }
}

/// Names and tensors the optimizer updates: trainable model parameters
/// followed by adapter weights (when `train_adapters`).
fn trainable_tensors<'a, T: Scalar>(
    model: &'a mut ModelState<T>,
    adapters: Option<&'a mut AdapterSet<T>>,
) -> Vec<(String, &'a mut Tensor<T>)> {
    let mut out: Vec<(String, &mut Tensor<T>)> = model
        .params_mut()
        .filter(|p| p.trainable)
        .map(|p| (p.name.clone(), &mut p.tensor))
        .collect();
    if let Some(set) = adapters {
        for a in set.iter_mut() {
            let prefix = a.prefix();
            out.push((format!("{prefix}.w_down"), &mut a.w_down));
            out.push((format!("{prefix}.w_up"), &mut a.w_up));
        }
    }
    out
}

/// Trains the trainable model parameters and every adapter weight on
/// `dataset`. Frozen parameters are never written.
pub fn train<T: Scalar>(
    model: &mut ModelState<T>,
    mut adapters: Option<&mut AdapterSet<T>>,
    dataset: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    let mut sampler = StratifiedSampler::new(dataset, cfg.seed)?;
    let mut state = AdamState::new();
    let mut log = TrainLog::default();
    let mut skipped = 0;
    let mut last_finite = None;

    for step in 0..cfg.steps {
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => Error::Diverged { step, last_finite },
            other => other,
        };
        let idx = sampler.next_batch(cfg.batch_size);
        let images = stack_images::<T>(dataset, &idx)?;
        let labels = label_tensor::<T>(dataset, &idx);

        let g = Graph::new();
        let params = bind_params(&g, model, true);
        let bound = adapters.as_deref().map(|a| a.bind(&g, true));
        let out = forward_graph(&g, model.config(), &params, &images, bound.as_ref()).map_err(diverged)?;
        let loss = combined_loss_graph(&g, out.logits, out.features, &labels, &cfg.loss).map_err(diverged)?;
        let mut grads_raw = g.backward(loss.total).map_err(diverged)?;

        let mut grads = IndexMap::new();
        for p in model.params().filter(|p| p.trainable) {
            if let Some(t) = grads_raw.take(params.get(&p.name)?) {
                grads.insert(p.name.clone(), t);
            }
        }
        if let (Some(set), Some(b)) = (adapters.as_deref(), bound.as_ref()) {
            for a in set.iter() {
                let ba = b.get(a.block_index, a.target).expect("bound from the same set");
                let prefix = a.prefix();
                if let Some(t) = grads_raw.take(ba.w_down) {
                    grads.insert(format!("{prefix}.w_down"), t);
                }
                if let Some(t) = grads_raw.take(ba.w_up) {
                    grads.insert(format!("{prefix}.w_up"), t);
                }
            }
        }

        let read = |v| g.value(v).data()[0].as_f64();
        let row = LogRow {
            step,
            l_ce: read(loss.ce),
            l_scl: read(loss.scl),
            l: read(loss.total),
            skipped_scl_count: {
                skipped += loss.scl_skipped as usize;
                skipped
            },
        };
        drop(params);
        drop(bound);
        drop(g);

        let mut targets = trainable_tensors(model, adapters.as_deref_mut());
        adam_step(&mut targets, &grads, &mut state, cfg)?;
        if targets.iter().any(|(_, t)| !t.all_finite()) {
            return Err(Error::Diverged { step, last_finite });
        }
        last_finite = Some(step);
        log.rows.push(row);
    }
    Ok(log)
}

/// Anything that turns samples into real-evidence scores (logit scale:
/// `score ≥ 0` means "real").
pub trait Detector {
    fn scores(&self, samples: &[Sample]) -> Result<Vec<f64>>;
}

/// A model with optional adapters, scored in fixed-size chunks.
pub struct ModelDetector<'a, T> {
    pub model: &'a ModelState<T>,
    pub adapters: Option<&'a AdapterSet<T>>,
    pub batch_size: usize,
}

impl<T: Scalar> Detector for ModelDetector<'_, T> {
    fn scores(&self, samples: &[Sample]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len());
        let idx: Vec<usize> = (0..samples.len()).collect();
        for chunk in idx.chunks(self.batch_size.max(1)) {
            let images = stack_images::<T>(samples, chunk)?;
            let f = forward(self.model, &images, self.adapters)?;
            out.extend(f.logits.data().iter().map(|v| v.as_f64()));
        }
        Ok(out)
    }
}

/// Reads the ground-truth label. An upper bound for protocol plumbing.
pub struct OracleDetector;

impl Detector for OracleDetector {
    fn scores(&self, samples: &[Sample]) -> Result<Vec<f64>> {
        Ok(samples.iter().map(|s| if s.is_real() { 1.0 } else { -1.0 }).collect())
    }
}

pub fn evaluate(detector: &dyn Detector, samples: &[Sample], tag: impl Into<String>) -> Result<EvalReport> {
    let scores = detector.scores(samples)?;
    let labels: Vec<bool> = samples.iter().map(Sample::is_real).collect();
    EvalReport::from_scores(tag, &scores, &labels)
}
