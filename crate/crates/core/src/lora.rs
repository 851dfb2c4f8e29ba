//! Low-rank adaptation of the attention query/key projections.
//!
//! An adapter on projection `W: [D, d]` adds `s · (x · W_down) · W_up` with
//! `W_down: [D, r]` and `W_up: [r, d]`. Only `r·(D + d)` parameters train
//! instead of `D·d`. The value projection is never adapted.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::model::{projection_name, BoundParams, ModelState, ViTConfig};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ProjectionTarget {
    Query,
    Key,
    /// Present so that attempts to adapt it can be named and rejected.
    Value,
}

impl ProjectionTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            ProjectionTarget::Query => "query",
            ProjectionTarget::Key => "key",
            ProjectionTarget::Value => "value",
        }
    }
}

impl fmt::Display for ProjectionTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProjectionTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query" | "q" => Ok(ProjectionTarget::Query),
            "key" | "k" => Ok(ProjectionTarget::Key),
            "value" | "v" => Ok(ProjectionTarget::Value),
            other => Err(Error::Config(format!("unknown projection target {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub scale: f64,
    pub targets: Vec<ProjectionTarget>,
    /// Standard deviation of the `W_down` initializer.
    pub init_std: f64,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            scale: 1.0,
            targets: vec![ProjectionTarget::Query, ProjectionTarget::Key],
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Config("LoRA targets must not be empty".into()));
        }
        if self.targets.contains(&ProjectionTarget::Value) {
            return Err(Error::Config(
                "LoRA cannot target the value projection (V' = W_v·x is left unadapted)".into(),
            ));
        }
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if !(self.init_std >= 0.0) || !self.scale.is_finite() {
            return Err(Error::Config("LoRA init_std must be >= 0 and scale finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T> {
    /// `[D, r]`
    pub w_down: Tensor<T>,
    /// `[r, d]`
    pub w_up: Tensor<T>,
    pub scale: T,
    pub rank: usize,
    pub target: ProjectionTarget,
    pub block_index: usize,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn new(
        w_down: Tensor<T>,
        w_up: Tensor<T>,
        scale: T,
        target: ProjectionTarget,
        block_index: usize,
    ) -> Result<Self> {
        let (d_in, r) = w_down.dims2("lora w_down")?;
        let (r2, d_out) = w_up.dims2("lora w_up")?;
        if r != r2 {
            return Err(Error::Shape {
                op: "lora adapter",
                lhs: w_down.shape().to_vec(),
                rhs: w_up.shape().to_vec(),
            });
        }
        if target == ProjectionTarget::Value {
            return Err(Error::Contract("LoRA adapter may not target the value projection".into()));
        }
        if r == 0 || r >= d_in.min(d_out) {
            return Err(Error::Contract(format!(
                "LoRA rank {r} must satisfy 1 <= r < min({d_in}, {d_out})"
            )));
        }
        Ok(Self {
            w_down,
            w_up,
            scale,
            rank: r,
            target,
            block_index,
        })
    }

    pub fn d_in(&self) -> usize {
        self.w_down.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.w_up.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.w_down.len() + self.w_up.len()
    }

    /// Checkpoint name prefix, `lora.{block}.{target}`.
    pub fn prefix(&self) -> String {
        format!("lora.{}.{}", self.block_index, self.target)
    }
}

/// At most one adapter per `(block, target)`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AdapterSet<T> {
    adapters: BTreeMap<(usize, ProjectionTarget), LoraAdapter<T>>,
}

impl<T: Scalar> AdapterSet<T> {
    pub fn new() -> Self {
        Self {
            adapters: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, adapter: LoraAdapter<T>) -> Result<()> {
        if adapter.target == ProjectionTarget::Value {
            return Err(Error::Contract("LoRA adapter may not target the value projection".into()));
        }
        let key = (adapter.block_index, adapter.target);
        if self.adapters.contains_key(&key) {
            return Err(Error::Contract(format!(
                "duplicate adapter for block {} {}",
                key.0, key.1
            )));
        }
        self.adapters.insert(key, adapter);
        Ok(())
    }

    pub fn get(&self, block: usize, target: ProjectionTarget) -> Option<&LoraAdapter<T>> {
        self.adapters.get(&(block, target))
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &LoraAdapter<T>> {
        self.adapters.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut LoraAdapter<T>> {
        self.adapters.values_mut()
    }

    pub fn param_count(&self) -> usize {
        self.iter().map(LoraAdapter::param_count).sum()
    }

    pub fn set_scale(&mut self, scale: T) {
        for a in self.adapters.values_mut() {
            a.scale = scale;
        }
    }

    /// Records adapter weights on a graph (as trainable leaves when
    /// `track_grads`).
    pub fn bind(&self, g: &Graph<T>, track_grads: bool) -> BoundAdapters<T> {
        BoundAdapters {
            adapters: self
                .adapters
                .iter()
                .map(|(&key, a)| {
                    (
                        key,
                        BoundAdapter {
                            w_down: g.leaf(a.w_down.clone(), track_grads),
                            w_up: g.leaf(a.w_up.clone(), track_grads),
                            scale: a.scale,
                            d_in: a.d_in(),
                            d_out: a.d_out(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Serializable entries `lora.{block}.{target}.{w_down,w_up,scale}`.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::with_capacity(3 * self.len());
        for a in self.iter() {
            let p = a.prefix();
            out.push((format!("{p}.w_down"), a.w_down.clone()));
            out.push((format!("{p}.w_up"), a.w_up.clone()));
            out.push((format!("{p}.scale"), Tensor::scalar(a.scale)));
        }
        out
    }

    /// Inverse of [`named_tensors`](Self::named_tensors). Consumes every
    /// `lora.*` entry from `tensors`.
    pub fn from_named_tensors(tensors: &mut IndexMap<String, Tensor<T>>) -> Result<Self> {
        let mut grouped: BTreeMap<(usize, ProjectionTarget), [Option<Tensor<T>>; 3]> = BTreeMap::new();
        let names: Vec<String> = tensors.keys().filter(|k| k.starts_with("lora.")).cloned().collect();
        for name in names {
            let parts: Vec<&str> = name.split('.').collect();
            let bad = || Error::Integrity(format!("malformed adapter entry name {name:?}"));
            let [_, block, target, field] = parts.as_slice() else {
                return Err(bad());
            };
            let block: usize = block.parse().map_err(|_| bad())?;
            let target: ProjectionTarget = target.parse().map_err(|_| bad())?;
            let slot = match *field {
                "w_down" => 0,
                "w_up" => 1,
                "scale" => 2,
                _ => return Err(bad()),
            };
            let t = tensors.swap_remove(&name).expect("listed above");
            grouped.entry((block, target)).or_default()[slot] = Some(t);
        }
        let mut set = AdapterSet::new();
        for ((block, target), [down, up, scale]) in grouped {
            let missing = || Error::Integrity(format!("incomplete adapter lora.{block}.{target}"));
            let scale = scale.ok_or_else(missing)?;
            if scale.len() != 1 {
                return Err(Error::Integrity(format!("adapter lora.{block}.{target} scale is not a scalar")));
            }
            set.insert(LoraAdapter::new(
                down.ok_or_else(missing)?,
                up.ok_or_else(missing)?,
                scale.data()[0],
                target,
                block,
            )?)?;
        }
        Ok(set)
    }

    pub fn cast<U: Scalar>(&self) -> AdapterSet<U> {
        AdapterSet {
            adapters: self
                .adapters
                .iter()
                .map(|(&k, a)| {
                    (
                        k,
                        LoraAdapter {
                            w_down: a.w_down.cast(),
                            w_up: a.w_up.cast(),
                            scale: U::from_f64_lossy(a.scale.as_f64()),
                            rank: a.rank,
                            target: a.target,
                            block_index: a.block_index,
                        },
                    )
                })
                .collect(),
        }
    }
}

pub struct BoundAdapter<T> {
    pub w_down: Var,
    pub w_up: Var,
    pub scale: T,
    d_in: usize,
    d_out: usize,
}

/// Adapter weights recorded on a graph.
pub struct BoundAdapters<T> {
    adapters: BTreeMap<(usize, ProjectionTarget), BoundAdapter<T>>,
}

impl<T: Scalar> BoundAdapters<T> {
    pub fn get(&self, block: usize, target: ProjectionTarget) -> Option<&BoundAdapter<T>> {
        self.adapters.get(&(block, target))
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, ProjectionTarget), &BoundAdapter<T>)> {
        self.adapters.iter().map(|(&k, v)| (k, v))
    }

    pub(crate) fn validate_for(&self, cfg: &ViTConfig) -> Result<()> {
        for (&(block, target), a) in &self.adapters {
            if target == ProjectionTarget::Value {
                return Err(Error::Contract(format!(
                    "adapter on block {block} targets the value projection"
                )));
            }
            if block >= cfg.depth {
                return Err(Error::Contract(format!(
                    "adapter targets block {block} but the model has {} blocks",
                    cfg.depth
                )));
            }
            if a.d_in != cfg.embed_dim || a.d_out != cfg.embed_dim {
                return Err(Error::Shape {
                    op: "lora adapter",
                    lhs: vec![a.d_in, a.d_out],
                    rhs: vec![cfg.embed_dim, cfg.embed_dim],
                });
            }
        }
        Ok(())
    }
}

/// `x·W + s·((x·W_down)·W_up)` on a graph; plain `x·W` without an adapter.
pub fn adapted_projection_graph<T: Scalar>(
    g: &Graph<T>,
    x: Var,
    w: Var,
    adapter: Option<&BoundAdapter<T>>,
) -> Result<Var> {
    let base = g.matmul(x, w)?;
    let Some(a) = adapter else { return Ok(base) };
    let low = g.matmul(x, a.w_down)?;
    let low = g.matmul(low, a.w_up)?;
    let low = g.scale(low, a.scale)?;
    g.add(base, low)
}

/// Query, key, and value projections of one block. Only query and key
/// consult the adapter set.
pub fn project_qkv<T: Scalar>(
    g: &Graph<T>,
    x: Var,
    block: usize,
    params: &BoundParams,
    adapters: Option<&BoundAdapters<T>>,
) -> Result<(Var, Var, Var)> {
    let adapter = |t| adapters.and_then(|a| a.get(block, t));
    let q = adapted_projection_graph(
        g,
        x,
        params.get(&projection_name(block, ProjectionTarget::Query))?,
        adapter(ProjectionTarget::Query),
    )?;
    let k = adapted_projection_graph(
        g,
        x,
        params.get(&projection_name(block, ProjectionTarget::Key))?,
        adapter(ProjectionTarget::Key),
    )?;
    let v = g.matmul(x, params.get(&projection_name(block, ProjectionTarget::Value))?)?;
    Ok((q, k, v))
}

/// The low-rank correction `s·((x·W_down)·W_up)` alone.
pub fn low_rank_delta<T: Scalar>(x: &Tensor<T>, a: &LoraAdapter<T>) -> Result<Tensor<T>> {
    let low = kernels::matmul(&kernels::matmul(x, &a.w_down)?, &a.w_up)?;
    Ok(low.map(|v| v * a.scale))
}

/// `x·W + s·((x·W_down)·W_up)` without forming `W_down·W_up`.
pub fn adapted_projection<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, a: &LoraAdapter<T>) -> Result<Tensor<T>> {
    let base = kernels::matmul(x, w)?;
    let delta = low_rank_delta(x, a)?;
    if base.shape() != delta.shape() {
        return Err(Error::Shape {
            op: "adapted_projection",
            lhs: base.shape().to_vec(),
            rhs: delta.shape().to_vec(),
        });
    }
    Ok(base.zip_map(&delta, |b, d| b + d))
}

/// `W + s·(W_down·W_up)`.
pub fn merge<T: Scalar>(w: &Tensor<T>, a: &LoraAdapter<T>) -> Result<Tensor<T>> {
    let delta = kernels::matmul(&a.w_down, &a.w_up)?;
    if delta.shape() != w.shape() {
        return Err(Error::Shape {
            op: "merge",
            lhs: w.shape().to_vec(),
            rhs: delta.shape().to_vec(),
        });
    }
    Ok(w.zip_map(&delta, |x, d| x + a.scale * d))
}

/// Folds every adapter into its projection weight.
pub fn merge_into<T: Scalar>(model: &ModelState<T>, adapters: &AdapterSet<T>) -> Result<ModelState<T>> {
    let mut merged = model.clone();
    for a in adapters.iter() {
        let name = projection_name(a.block_index, a.target);
        let w = merge(model.tensor(&name)?, a)?;
        *merged.tensor_mut(&name)? = w;
    }
    Ok(merged)
}

/// Attaches one adapter per block per target. `W_down ~ N(0, init_std)`,
/// `W_up = 0`, so the adapted model starts out identical to the base.
/// Backbone parameters are frozen; the head stays trainable.
pub fn inject<T: Scalar>(model: &mut ModelState<T>, cfg: &LoraConfig) -> Result<AdapterSet<T>> {
    cfg.validate()?;
    let mcfg = model.config().clone();
    let d = mcfg.embed_dim;
    if cfg.rank >= d {
        return Err(Error::Config(format!(
            "LoRA rank {} must be smaller than the projection width {d}",
            cfg.rank
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut set = AdapterSet::new();
    let mut targets = cfg.targets.clone();
    targets.sort();
    targets.dedup();
    for block in 0..mcfg.depth {
        for &target in &targets {
            let w_down = Tensor::from_fn([d, cfg.rank], |_| T::from_f64_lossy(normal.sample(&mut rng)));
            let w_up = Tensor::zeros([cfg.rank, d]);
            set.insert(LoraAdapter::new(
                w_down,
                w_up,
                T::from_f64_lossy(cfg.scale),
                target,
                block,
            )?)?;
        }
    }
    model.freeze_backbone();
    Ok(set)
}

/// Trainable/frozen parameter totals.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamReport {
    pub trainable: usize,
    pub frozen: usize,
    /// Parameters in all adapters.
    pub adapter_total: usize,
    pub adapter_count: usize,
    /// `r·(D + d)` for one adapted projection (0 without adapters).
    pub per_projection_adapter: usize,
    /// `D·d` for one dense projection.
    pub per_projection_dense: usize,
}

/// `(r·(D + d), D·d)`; no clamping for large `r`.
pub fn projection_param_counts(d_in: usize, d_out: usize, rank: usize) -> (usize, usize) {
    (rank * (d_in + d_out), d_in * d_out)
}

pub fn trainable_parameter_count<T: Scalar>(model: &ModelState<T>, adapters: &AdapterSet<T>) -> ParamReport {
    let (mut trainable, mut frozen) = (0, 0);
    for p in model.params() {
        if p.trainable {
            trainable += p.tensor.len();
        } else {
            frozen += p.tensor.len();
        }
    }
    let adapter_total = adapters.param_count();
    let d = model.config().embed_dim;
    let (per_projection_adapter, per_projection_dense) = match adapters.iter().next() {
        Some(a) => projection_param_counts(a.d_in(), a.d_out(), a.rank),
        None => (0, d * d),
    };
    ParamReport {
        trainable: trainable + adapter_total,
        frozen,
        adapter_total,
        adapter_count: adapters.len(),
        per_projection_adapter,
        per_projection_dense,
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "trainable,{}", self.trainable)?;
        writeln!(f, "frozen,{}", self.frozen)?;
        writeln!(f, "adapters,{}", self.adapter_count)?;
        writeln!(f, "adapter_params,{}", self.adapter_total)?;
        writeln!(f, "per_projection_adapter,{}", self.per_projection_adapter)?;
        write!(f, "per_projection_dense,{}", self.per_projection_dense)
    }
}
