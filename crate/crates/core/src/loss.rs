//! Training objective: binary cross-entropy plus a weighted single-center
//! loss on the penultimate features.
//!
//! ```text
//! L      = L_ce + λ·L_scl
//! L_ce   = −(1/N) Σ [c·ln ĉ + (1−c)·ln(1−ĉ)]          (ĉ clamped to [ε, 1−ε])
//! L_scl  = d_real + max(d_real − d_fake + margin, 0)
//! d_k    = mean over class k of ‖f_i − C‖₂,  C = mean of real features
//! ```
//!
//! Labels are `1` for real and `0` for fake. The center `C` is recomputed
//! from each batch and differentiated like any other function of the real
//! features. A batch missing either class skips the SCL term.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Probability clamp applied before the logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CenterPolicy {
    /// Mean of the batch's real features.
    #[default]
    BatchMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EmptyClassPolicy {
    /// Contribute zero and report the skip.
    #[default]
    SkipScl,
}

impl fmt::Display for CenterPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("batch_mean")
    }
}

impl FromStr for CenterPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch_mean" => Ok(CenterPolicy::BatchMean),
            other => Err(Error::Config(format!("unknown center policy {other:?}"))),
        }
    }
}

impl fmt::Display for EmptyClassPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("skip_scl")
    }
}

impl FromStr for EmptyClassPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skip_scl" => Ok(EmptyClassPolicy::SkipScl),
            other => Err(Error::Config(format!("unknown empty-class policy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub margin: f64,
    pub center_policy: CenterPolicy,
    pub empty_class_policy: EmptyClassPolicy,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            margin: 3.0,
            center_policy: CenterPolicy::BatchMean,
            empty_class_policy: EmptyClassPolicy::SkipScl,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.margin >= 0.0) || !self.margin.is_finite() {
            return Err(Error::Config(format!("margin must be >= 0, got {}", self.margin)));
        }
        Ok(())
    }
}

/// Features, predicted probabilities of "real", and binary labels.
#[derive(Clone, Debug)]
pub struct LabeledBatch<T> {
    /// `[B, F]`
    pub features: Tensor<T>,
    /// `[B]` or `[B, 1]`
    pub predictions: Tensor<T>,
    /// `[B]`, 1 = real, 0 = fake
    pub labels: Tensor<T>,
}

impl<T: Scalar> LabeledBatch<T> {
    pub fn new(features: Tensor<T>, predictions: Tensor<T>, labels: Tensor<T>) -> Result<Self> {
        let batch = Self {
            features,
            predictions,
            labels,
        };
        let n = batch.labels.len();
        let (rows, _) = batch.features.dims2("labeled batch")?;
        if rows != n || batch.predictions.len() != n {
            return Err(Error::Shape {
                op: "labeled batch",
                lhs: batch.features.shape().to_vec(),
                rhs: batch.labels.shape().to_vec(),
            });
        }
        check_labels(batch.labels.data())?;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn check_labels<T: Scalar>(labels: &[T]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    if labels.iter().any(|&c| c != T::zero() && c != T::one()) {
        return Err(Error::Contract("labels must be 0 or 1".into()));
    }
    Ok(())
}

fn clamp_prob<T: Scalar>(p: T) -> (T, bool) {
    let eps = T::from_f64_lossy(PROB_EPS);
    let hi = T::one() - eps;
    if p < eps {
        (eps, true)
    } else if p > hi {
        (hi, true)
    } else {
        (p, false)
    }
}

fn ce_value<T: Scalar>(probs: &[T], labels: &[T]) -> T {
    let n = T::from_usize(labels.len()).unwrap();
    let total: T = probs
        .iter()
        .zip(labels)
        .map(|(&p, &c)| {
            let (p, _) = clamp_prob(p);
            c * p.ln() + (T::one() - c) * (T::one() - p).ln()
        })
        .sum();
    -total / n
}

fn ce_grad<T: Scalar>(probs: &[T], labels: &[T]) -> Vec<T> {
    let n = T::from_usize(labels.len()).unwrap();
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &c)| {
            let (p, clamped) = clamp_prob(p);
            if clamped {
                T::zero()
            } else {
                -(c / p - (T::one() - c) / (T::one() - p)) / n
            }
        })
        .collect()
}

/// Binary cross-entropy averaged over the batch.
pub fn cross_entropy<T: Scalar>(batch: &LabeledBatch<T>) -> Result<T> {
    check_labels(batch.labels.data())?;
    Ok(ce_value(batch.predictions.data(), batch.labels.data()))
}

fn center_of<T: Scalar>(features: &[T], cols: usize, labels: &[T]) -> Result<Tensor<T>> {
    let mut center = vec![T::zero(); cols];
    let mut count = 0usize;
    for (row, &c) in features.chunks_exact(cols).zip(labels) {
        if c == T::one() {
            count += 1;
            for (acc, &v) in center.iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyClass("real"));
    }
    let n = T::from_usize(count).unwrap();
    for v in &mut center {
        *v /= n;
    }
    Tensor::new([cols], center)
}

/// Mean feature of the real samples.
pub fn real_center<T: Scalar>(batch: &LabeledBatch<T>) -> Result<Tensor<T>> {
    let (_, cols) = batch.features.dims2("real_center")?;
    center_of(batch.features.data(), cols, batch.labels.data())
}

/// Intermediate quantities of the single-center loss.
#[derive(Clone, Debug)]
pub struct SclParts<T> {
    pub center: Tensor<T>,
    /// `‖f_i − C‖₂` per sample.
    pub distances: Vec<T>,
    pub d_real: T,
    pub d_fake: T,
    pub n_real: usize,
    pub n_fake: usize,
    /// `d_real − d_fake + margin`
    pub hinge_arg: T,
    pub value: T,
}

fn scl_parts<T: Scalar>(features: &Tensor<T>, labels: &[T], margin: T) -> Result<SclParts<T>> {
    let (_, cols) = features.dims2("scl")?;
    check_labels(labels)?;
    let center = center_of(features.data(), cols, labels)?;
    let n_real = labels.iter().filter(|&&c| c == T::one()).count();
    let n_fake = labels.len() - n_real;
    if n_fake == 0 {
        return Err(Error::EmptyClass("fake"));
    }
    let distances: Vec<T> = features
        .data()
        .chunks_exact(cols)
        .map(|row| {
            row.iter()
                .zip(center.data())
                .map(|(&v, &c)| (v - c) * (v - c))
                .sum::<T>()
                .sqrt()
        })
        .collect();
    let (mut sr, mut sf) = (T::zero(), T::zero());
    for (&d, &c) in distances.iter().zip(labels) {
        if c == T::one() {
            sr += d;
        } else {
            sf += d;
        }
    }
    let d_real = sr / T::from_usize(n_real).unwrap();
    let d_fake = sf / T::from_usize(n_fake).unwrap();
    let hinge_arg = d_real - d_fake + margin;
    let value = d_real + hinge_arg.max(T::zero());
    Ok(SclParts {
        center,
        distances,
        d_real,
        d_fake,
        n_real,
        n_fake,
        hinge_arg,
        value,
    })
}

/// Gradient with respect to every feature row. Real rows also move the
/// center, so each real row additionally receives `−(1/N_real)·∂L/∂C`
/// where `∂L/∂C = −Σ_i w_i·u_i`.
fn scl_grad<T: Scalar>(features: &Tensor<T>, labels: &[T], parts: &SclParts<T>) -> Tensor<T> {
    let cols = features.shape()[1];
    let active = parts.hinge_arg > T::zero();
    let w_real = (if active { T::one() + T::one() } else { T::one() }) / T::from_usize(parts.n_real).unwrap();
    let w_fake = if active {
        -T::one() / T::from_usize(parts.n_fake).unwrap()
    } else {
        T::zero()
    };
    let mut grad = vec![T::zero(); features.len()];
    let mut d_center = vec![T::zero(); cols];
    for (i, (row, &c)) in features.data().chunks_exact(cols).zip(labels).enumerate() {
        let d = parts.distances[i];
        if d == T::zero() {
            continue;
        }
        let w = if c == T::one() { w_real } else { w_fake } / d;
        for (k, ((g, &v), &cv)) in grad[i * cols..(i + 1) * cols]
            .iter_mut()
            .zip(row)
            .zip(parts.center.data())
            .enumerate()
        {
            *g = w * (v - cv);
            d_center[k] -= *g;
        }
    }
    let share = T::one() / T::from_usize(parts.n_real).unwrap();
    for (row, &c) in grad.chunks_exact_mut(cols).zip(labels) {
        if c == T::one() {
            for (g, &dc) in row.iter_mut().zip(&d_center) {
                *g += share * dc;
            }
        }
    }
    Tensor::new(features.shape(), grad).unwrap()
}

/// Outcome of an SCL evaluation; `skipped` is set when the batch lacked a
/// class and the empty-class policy substituted zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SclValue<T> {
    pub value: T,
    pub skipped: bool,
}

pub fn scl_parts_of<T: Scalar>(batch: &LabeledBatch<T>, cfg: &LossConfig) -> Result<SclParts<T>> {
    scl_parts(&batch.features, batch.labels.data(), T::from_f64_lossy(cfg.margin))
}

pub fn scl<T: Scalar>(batch: &LabeledBatch<T>, cfg: &LossConfig) -> Result<SclValue<T>> {
    match scl_parts_of(batch, cfg) {
        Ok(p) => Ok(SclValue {
            value: p.value,
            skipped: false,
        }),
        Err(Error::EmptyClass(_)) => match cfg.empty_class_policy {
            EmptyClassPolicy::SkipScl => Ok(SclValue {
                value: T::zero(),
                skipped: true,
            }),
        },
        Err(e) => Err(e),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    pub ce: T,
    pub scl: T,
    pub total: T,
    pub scl_skipped: bool,
}

pub fn combined_loss<T: Scalar>(batch: &LabeledBatch<T>, cfg: &LossConfig) -> Result<LossBreakdown<T>> {
    cfg.validate()?;
    let ce = cross_entropy(batch)?;
    let s = scl(batch, cfg)?;
    Ok(LossBreakdown {
        ce,
        scl: s.value,
        total: ce + T::from_f64_lossy(cfg.lambda) * s.value,
        scl_skipped: s.skipped,
    })
}

/// Cross-entropy as a tape op over predicted probabilities.
pub fn cross_entropy_graph<T: Scalar>(g: &Graph<T>, probs: Var, labels: &Tensor<T>) -> Result<Var> {
    let pv = g.value(probs);
    if pv.len() != labels.len() {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: pv.shape().to_vec(),
            rhs: labels.shape().to_vec(),
        });
    }
    check_labels(labels.data())?;
    let value = ce_value(pv.data(), labels.data());
    let labels = labels.clone();
    g.record("cross_entropy", Tensor::scalar(value), &[probs], move |gout, _| {
        let scale = gout.data()[0];
        let grad = ce_grad(pv.data(), labels.data());
        vec![Some(
            Tensor::new(pv.shape(), grad.into_iter().map(|v| v * scale).collect()).unwrap(),
        )]
    })
}

/// Single-center loss as a tape op over features. Returns the loss node
/// and whether the empty-class policy replaced it by zero.
pub fn scl_graph<T: Scalar>(g: &Graph<T>, features: Var, labels: &Tensor<T>, cfg: &LossConfig) -> Result<(Var, bool)> {
    let fv = g.value(features);
    if fv.dims2("scl")?.0 != labels.len() {
        return Err(Error::Shape {
            op: "scl",
            lhs: fv.shape().to_vec(),
            rhs: labels.shape().to_vec(),
        });
    }
    let parts = match scl_parts(&fv, labels.data(), T::from_f64_lossy(cfg.margin)) {
        Ok(p) => p,
        Err(Error::EmptyClass(_)) => match cfg.empty_class_policy {
            EmptyClassPolicy::SkipScl => return Ok((g.constant(Tensor::scalar(T::zero())), true)),
        },
        Err(e) => return Err(e),
    };
    let labels = labels.clone();
    let node = g.record("scl", Tensor::scalar(parts.value), &[features], move |gout, _| {
        let s = gout.data()[0];
        vec![Some(scl_grad(&fv, labels.data(), &parts).map(|v| v * s))]
    })?;
    Ok((node, false))
}

/// Graph handles for the full objective.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    pub scl: Var,
    pub scl_skipped: bool,
}

/// `L_ce(sigmoid(logits)) + λ·L_scl(features)` on the graph.
pub fn combined_loss_graph<T: Scalar>(
    g: &Graph<T>,
    logits: Var,
    features: Var,
    labels: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<LossVars> {
    cfg.validate()?;
    let probs = g.sigmoid(logits)?;
    let ce = cross_entropy_graph(g, probs, labels)?;
    let (scl, scl_skipped) = scl_graph(g, features, labels, cfg)?;
    let weighted = g.scale(scl, T::from_f64_lossy(cfg.lambda))?;
    let total = g.add(ce, weighted)?;
    Ok(LossVars {
        total,
        ce,
        scl,
        scl_skipped,
    })
}
