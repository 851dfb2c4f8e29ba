//! End-to-end gradient verification: reverse-mode gradients of the full
//! training objective against central finite differences, in 64-bit, on
//! a one-block model small enough to probe every coordinate.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::Graph;
use crate::config::RunConfig;
use crate::error::Result;
use crate::gradcheck::{finite_diff_grad, relative_error, DEFAULT_STEP};
use crate::lora::{inject, AdapterSet};
use crate::loss::{combined_loss_graph, LossConfig};
use crate::model::{bind_params, forward_graph, init_model, ModelState, ViTConfig};
use crate::tensor::Tensor;

/// Relative-error bound for every checked parameter.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub checks: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("parameter,numel,rel_error,status\n");
        for c in &self.checks {
            let status = if c.passed { "pass" } else { "fail" };
            let _ = writeln!(s, "{},{},{:e},{status}", c.name, c.numel, c.rel_error);
        }
        s
    }
}

/// One block, `D = 16`, small images; everything else from `base`.
pub fn gradcheck_model_config(base: &ViTConfig) -> ViTConfig {
    let heads = if 16 % base.heads == 0 { base.heads } else { 2 };
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 16,
        depth: 1,
        heads,
        head_hidden: 8,
        ..base.clone()
    }
}

struct Problem {
    model: ModelState<f64>,
    adapters: Option<AdapterSet<f64>>,
    images: Tensor<f64>,
    labels: Tensor<f64>,
    loss: LossConfig,
}

impl Problem {
    fn objective(&self, model: &ModelState<f64>, adapters: Option<&AdapterSet<f64>>) -> Result<f64> {
        let g = Graph::new();
        let params = bind_params(&g, model, false);
        let bound = adapters.map(|a| a.bind(&g, false));
        let out = forward_graph(&g, model.config(), &params, &self.images, bound.as_ref())?;
        let l = combined_loss_graph(&g, out.logits, out.features, &self.labels, &self.loss)?;
        let v = g.value(l.total).data()[0];
        Ok(v)
    }
}

fn build_problem(cfg: &RunConfig) -> Result<Problem> {
    let vit = gradcheck_model_config(&cfg.model);
    let mut model = init_model::<f64>(&vit)?;
    let mut adapters = if cfg.lora_enabled {
        Some(inject(&mut model, &cfg.train.lora)?)
    } else {
        model.freeze_backbone();
        None
    };
    if cfg.freeze_head {
        model.set_head_trainable(false);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.model.seed ^ 0x6C0D_E5EE);
    // A zero up-projection would make every down-projection gradient
    // vanish and the check vacuous.
    let normal = Normal::new(0.0, 0.1).unwrap();
    if let Some(set) = adapters.as_mut() {
        for a in set.iter_mut() {
            for v in a.w_up.data_mut() {
                *v = normal.sample(&mut rng);
            }
        }
    }
    let batch = 4;
    let shape = [batch, vit.channels, vit.image_size, vit.image_size];
    let images = Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0));
    let labels = Tensor::new([batch], vec![1.0, 1.0, 0.0, 0.0])?;
    Ok(Problem {
        model,
        adapters,
        images,
        labels,
        loss: cfg.train.loss.clone(),
    })
}

/// Checks every trainable tensor of the one-block model built from `cfg`
/// (adapters included).
pub fn gradcheck(cfg: &RunConfig) -> Result<GradcheckReport> {
    let p = build_problem(cfg)?;

    let g = Graph::new();
    let params = bind_params(&g, &p.model, true);
    let bound = p.adapters.as_ref().map(|a| a.bind(&g, true));
    let out = forward_graph(&g, p.model.config(), &params, &p.images, bound.as_ref())?;
    let loss = combined_loss_graph(&g, out.logits, out.features, &p.labels, &p.loss)?;
    let grads = g.backward(loss.total)?;

    let mut checks = Vec::new();
    let mut record = |name: String, analytic: Tensor<f64>, numeric: Tensor<f64>| {
        let rel_error = relative_error(&analytic, &numeric, 1e-12);
        checks.push(ParamCheck {
            name,
            numel: analytic.len(),
            rel_error,
            passed: rel_error < GRADCHECK_TOLERANCE,
        });
    };

    for param in p.model.params().filter(|q| q.trainable) {
        let analytic = grads
            .get(params.get(&param.name)?)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(param.tensor.shape()));
        let numeric = finite_diff_grad(
            |x| {
                let mut m = p.model.clone();
                *m.tensor_mut(&param.name)? = x.clone();
                p.objective(&m, p.adapters.as_ref())
            },
            &param.tensor,
            DEFAULT_STEP,
        )?;
        record(param.name.clone(), analytic, numeric);
    }

    if let (Some(set), Some(b)) = (p.adapters.as_ref(), bound.as_ref()) {
        for (i, a) in set.iter().enumerate() {
            let ba = b.get(a.block_index, a.target).expect("bound from the same set");
            for (suffix, var, tensor) in [("w_down", ba.w_down, &a.w_down), ("w_up", ba.w_up, &a.w_up)] {
                let analytic = grads.get(var).cloned().unwrap_or_else(|| Tensor::zeros(tensor.shape()));
                let numeric = finite_diff_grad(
                    |x| {
                        let mut s = set.clone();
                        let target = s.iter_mut().nth(i).expect("same length");
                        if suffix == "w_down" {
                            target.w_down = x.clone();
                        } else {
                            target.w_up = x.clone();
                        }
                        p.objective(&p.model, Some(&s))
                    },
                    tensor,
                    DEFAULT_STEP,
                )?;
                record(format!("{}.{suffix}", a.prefix()), analytic, numeric);
            }
        }
    }

    Ok(GradcheckReport {
        checks,
        tolerance: GRADCHECK_TOLERANCE,
    })
}
