//! Vision Transformer backbone with a two-layer classification head.
//!
//! Row-vector convention throughout: a token matrix `x` is `[n_tok, D]` and
//! a projection is `x · W` with `W: [D, D]`.
//!
//! Parameter naming scheme (all names are unique):
//!
//! ```text
//! patch_embed.weight  [C·P·P, D]     patch_embed.bias  [D]
//! cls_token           [1, D]         pos_embed         [n_tok, D]
//! blocks.{i}.norm1.gain / .bias                         [D]
//! blocks.{i}.attn.w_q / w_k / w_v / w_o                 [D, D]
//! blocks.{i}.attn.b_o                                   [D]
//! blocks.{i}.norm2.gain / .bias                         [D]
//! blocks.{i}.mlp.fc1.weight [D, D·mlp_ratio]   blocks.{i}.mlp.fc1.bias [D·mlp_ratio]
//! blocks.{i}.mlp.fc2.weight [D·mlp_ratio, D]   blocks.{i}.mlp.fc2.bias [D]
//! norm.gain / norm.bias                                 [D]
//! head.fc1.weight [D, F]   head.fc1.bias [F]
//! head.fc2.weight [F, 1]   head.fc2.bias [1]
//! ```

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::lora::{self, AdapterSet, BoundAdapters};
use crate::tensor::{Scalar, Tensor};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Width `F` of the penultimate head layer (the feature tap).
    pub head_hidden: usize,
    pub seed: u64,
}

impl Default for ViTConfig {
    /// Desk-scale configuration.
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            head_hidden: 32,
            seed: 0,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("head_hidden", self.head_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patches plus the class token.
    pub fn n_tokens(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// Every parameter name with its shape, in registry order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let h = self.mlp_hidden();
        let f = self.head_hidden;
        let mut out = vec![
            ("patch_embed.weight".to_string(), vec![self.patch_dim(), d]),
            ("patch_embed.bias".to_string(), vec![d]),
            ("cls_token".to_string(), vec![1, d]),
            ("pos_embed".to_string(), vec![self.n_tokens(), d]),
        ];
        for i in 0..self.depth {
            let p = |s: &str| format!("blocks.{i}.{s}");
            out.extend([
                (p("norm1.gain"), vec![d]),
                (p("norm1.bias"), vec![d]),
                (p("attn.w_q"), vec![d, d]),
                (p("attn.w_k"), vec![d, d]),
                (p("attn.w_v"), vec![d, d]),
                (p("attn.w_o"), vec![d, d]),
                (p("attn.b_o"), vec![d]),
                (p("norm2.gain"), vec![d]),
                (p("norm2.bias"), vec![d]),
                (p("mlp.fc1.weight"), vec![d, h]),
                (p("mlp.fc1.bias"), vec![h]),
                (p("mlp.fc2.weight"), vec![h, d]),
                (p("mlp.fc2.bias"), vec![d]),
            ]);
        }
        out.extend([
            ("norm.gain".to_string(), vec![d]),
            ("norm.bias".to_string(), vec![d]),
            ("head.fc1.weight".to_string(), vec![d, f]),
            ("head.fc1.bias".to_string(), vec![f]),
            ("head.fc2.weight".to_string(), vec![f, 1]),
            ("head.fc2.bias".to_string(), vec![1]),
        ]);
        out
    }
}

/// Which tensor of a block's attention a projection weight belongs to.
pub fn projection_name(block: usize, target: lora::ProjectionTarget) -> String {
    let suffix = match target {
        lora::ProjectionTarget::Query => "w_q",
        lora::ProjectionTarget::Key => "w_k",
        lora::ProjectionTarget::Value => "w_v",
    };
    format!("blocks.{block}.attn.{suffix}")
}

pub fn is_head_param(name: &str) -> bool {
    name.starts_with("head.")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Named parameter registry of the backbone and head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    config: ViTConfig,
    params: IndexMap<String, Parameter<T>>,
}

impl<T: Scalar> ModelState<T> {
    /// Builds a state from named tensors, requiring exactly the name and
    /// shape set the config implies. All parameters start trainable.
    pub fn from_tensors(config: ViTConfig, mut tensors: IndexMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes();
        let missing: Vec<String> = expected
            .iter()
            .filter(|(n, _)| !tensors.contains_key(n))
            .map(|(n, _)| n.clone())
            .collect();
        let extra: Vec<String> = tensors
            .keys()
            .filter(|k| !expected.iter().any(|(n, _)| n == *k))
            .cloned()
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::NameMismatch { missing, extra });
        }
        let mut params = IndexMap::with_capacity(expected.len());
        for (name, shape) in expected {
            let tensor = tensors.swap_remove(&name).expect("checked above");
            if tensor.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "load parameter",
                    lhs: shape,
                    rhs: tensor.shape().to_vec(),
                });
            }
            params.insert(
                name.clone(),
                Parameter {
                    name,
                    tensor,
                    trainable: true,
                },
            );
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.tensor)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.values()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool) {
        for p in self.params.values_mut() {
            p.trainable = pred(&p.name);
        }
    }

    /// Freezes everything except the classification head.
    pub fn freeze_backbone(&mut self) {
        self.set_trainable_where(is_head_param);
    }

    pub fn set_head_trainable(&mut self, trainable: bool) {
        for p in self.params.values_mut().filter(|p| is_head_param(&p.name)) {
            p.trainable = trainable;
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Parameter {
                            name: p.name.clone(),
                            tensor: p.tensor.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Bitwise equality of every tensor (trainability flags ignored).
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().all(|(k, p)| {
                other
                    .params
                    .get(k)
                    .is_some_and(|q| p.tensor.bit_eq(&q.tensor))
            })
    }
}

/// Draws weights from a normal truncated at ±2σ (σ = 0.02); biases are
/// zero and layer-norm gains one. Deterministic in `cfg.seed`.
pub fn init_model<T: Scalar>(cfg: &ViTConfig) -> Result<ModelState<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut tensors = IndexMap::new();
    for (name, shape) in cfg.parameter_shapes() {
        let t = if name.ends_with(".bias") || name.ends_with(".b_o") {
            Tensor::zeros(shape)
        } else if name.ends_with(".gain") {
            Tensor::full(shape, T::one())
        } else {
            Tensor::from_fn(shape, |_| loop {
                let v: f64 = normal.sample(&mut rng);
                if v.abs() <= 2.0 * INIT_STD {
                    break T::from_f64_lossy(v);
                }
            })
        };
        tensors.insert(name, t);
    }
    ModelState::from_tensors(cfg.clone(), tensors)
}

/// Parameters recorded as leaves on a graph.
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Records every parameter as a leaf. With `track_grads == false` all
/// leaves are constants (inference); otherwise a leaf requires a gradient
/// exactly when its parameter is trainable.
pub fn bind_params<T: Scalar>(g: &Graph<T>, model: &ModelState<T>, track_grads: bool) -> BoundParams {
    BoundParams {
        vars: model
            .params()
            .map(|p| (p.name.clone(), g.leaf(p.tensor.clone(), track_grads && p.trainable)))
            .collect(),
    }
}

/// Rearranges `[B, C, H, W]` images in `[0, 1]` into `[B·n_patches,
/// C·P·P]` patch rows (patch grid row-major, vector order `(c, py, px)`),
/// rescaled to `[-1, 1]`.
pub fn patchify<T: Scalar>(cfg: &ViTConfig, images: &Tensor<T>) -> Result<Tensor<T>> {
    let expected = [cfg.channels, cfg.image_size, cfg.image_size];
    let shape = images.shape();
    if shape.len() != 4 || shape[1..] != expected {
        return Err(Error::Shape {
            op: "patchify",
            lhs: shape.to_vec(),
            rhs: expected.to_vec(),
        });
    }
    let (b, c, s, p, grid) = (shape[0], cfg.channels, cfg.image_size, cfg.patch_size, cfg.grid());
    let two = T::from_f64_lossy(2.0);
    let mut out = Vec::with_capacity(b * cfg.n_patches() * cfg.patch_dim());
    let data = images.data();
    for bi in 0..b {
        for gy in 0..grid {
            for gx in 0..grid {
                for ci in 0..c {
                    for py in 0..p {
                        let row = ((bi * c + ci) * s + gy * p + py) * s + gx * p;
                        out.extend(data[row..row + p].iter().map(|&v| v * two - T::one()));
                    }
                }
            }
        }
    }
    Tensor::new([b * cfg.n_patches(), cfg.patch_dim()], out)
}

/// Graph handles of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[B, 1]`; `sigmoid(logit)` is the predicted probability of "real".
    pub logits: Var,
    /// `[B, F]`: post-activation output of the penultimate head layer.
    pub features: Var,
}

/// Records the full forward pass on `g`.
pub fn forward_graph<T: Scalar>(
    g: &Graph<T>,
    cfg: &ViTConfig,
    params: &BoundParams,
    images: &Tensor<T>,
    adapters: Option<&BoundAdapters<T>>,
) -> Result<ForwardVars> {
    if let Some(a) = adapters {
        a.validate_for(cfg)?;
    }
    let batch = images.shape().first().copied().unwrap_or(0);
    if batch == 0 {
        return Err(Error::Contract("forward on an empty batch".into()));
    }
    let n_tok = cfg.n_tokens();
    let np = cfg.n_patches();

    let patches = g.constant(patchify(cfg, images)?);
    let emb = g.matmul(patches, params.get("patch_embed.weight")?)?;
    let emb = g.add_broadcast_rows(emb, params.get("patch_embed.bias")?)?;

    let cls = params.get("cls_token")?;
    let mut parts = Vec::with_capacity(2 * batch);
    for b in 0..batch {
        parts.push(cls);
        parts.push(g.slice_rows(emb, b * np, (b + 1) * np)?);
    }
    let tokens = g.concat_rows(&parts)?;
    let mut x = g.add_broadcast_rows(tokens, params.get("pos_embed")?)?;

    for block in 0..cfg.depth {
        let p = |s: &str| params.get(&format!("blocks.{block}.{s}"));
        let h = g.layer_norm(x, p("norm1.gain")?, p("norm1.bias")?)?;
        let (q, k, v) = lora::project_qkv(g, h, block, params, adapters)?;
        let att = g.attention(q, k, v, n_tok, cfg.heads)?;
        let att = g.matmul(att, p("attn.w_o")?)?;
        let att = g.add_broadcast_rows(att, p("attn.b_o")?)?;
        x = g.add(x, att)?;

        let h = g.layer_norm(x, p("norm2.gain")?, p("norm2.bias")?)?;
        let h = g.matmul(h, p("mlp.fc1.weight")?)?;
        let h = g.add_broadcast_rows(h, p("mlp.fc1.bias")?)?;
        let h = g.gelu(h)?;
        let h = g.matmul(h, p("mlp.fc2.weight")?)?;
        let h = g.add_broadcast_rows(h, p("mlp.fc2.bias")?)?;
        x = g.add(x, h)?;
    }

    let x = g.layer_norm(x, params.get("norm.gain")?, params.get("norm.bias")?)?;
    let cls_rows: Vec<usize> = (0..batch).map(|b| b * n_tok).collect();
    let pooled = g.gather_rows(x, &cls_rows)?;

    let f = g.matmul(pooled, params.get("head.fc1.weight")?)?;
    let f = g.add_broadcast_rows(f, params.get("head.fc1.bias")?)?;
    let features = g.gelu(f)?;
    let logits = g.matmul(features, params.get("head.fc2.weight")?)?;
    let logits = g.add_broadcast_rows(logits, params.get("head.fc2.bias")?)?;
    Ok(ForwardVars { logits, features })
}

/// Plain forward-pass outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<T> {
    pub logits: Tensor<T>,
    pub features: Tensor<T>,
}

/// Inference forward pass (no gradient tracking).
pub fn forward<T: Scalar>(
    model: &ModelState<T>,
    images: &Tensor<T>,
    adapters: Option<&AdapterSet<T>>,
) -> Result<ForwardOutput<T>> {
    let g = Graph::new();
    let params = bind_params(&g, model, false);
    let bound = adapters.map(|a| a.bind(&g, false));
    let out = forward_graph(&g, model.config(), &params, images, bound.as_ref())?;
    Ok(ForwardOutput {
        logits: (*g.value(out.logits)).clone(),
        features: (*g.value(out.features)).clone(),
    })
}
