//! Experiment harnesses: leave-one-out cross-manipulation, cross-domain,
//! and the head / LoRA / LoRA+SCL ablation.

use std::fmt::Write as _;

use crate::config::RunConfig;
use crate::data::{generate_pool, leave_one_out_protocols, make_split, test_offset, Protocol, Quality, Sample};
use crate::error::{Error, Result};
use crate::lora::{inject, trainable_parameter_count, AdapterSet, ParamReport};
use crate::metrics::EvalReport;
use crate::model::{init_model, ModelState};
use crate::train::{evaluate, train, Detector, ModelDetector, TrainLog};

/// A model with its adapters after training.
pub struct TrainedModel {
    pub model: ModelState<f32>,
    pub adapters: Option<AdapterSet<f32>>,
    pub log: TrainLog,
    pub eval_batch_size: usize,
}

impl Detector for TrainedModel {
    fn scores(&self, samples: &[Sample]) -> Result<Vec<f64>> {
        ModelDetector {
            model: &self.model,
            adapters: self.adapters.as_ref(),
            batch_size: self.eval_batch_size,
        }
        .scores(samples)
    }
}

/// Fits a detector on the training side of a protocol.
pub trait Trainer {
    type Output: Detector;
    fn fit(&self, protocol: &Protocol, train_set: &[Sample]) -> Result<Self::Output>;
}

/// Fresh model per fit, configured by a [`RunConfig`].
pub struct ModelTrainer {
    pub config: RunConfig,
}

/// Initial model and adapters for `cfg`: adapters with a frozen backbone
/// when LoRA is enabled, otherwise a frozen backbone with a trainable head.
pub fn prepare_model(cfg: &RunConfig) -> Result<(ModelState<f32>, Option<AdapterSet<f32>>)> {
    let mut model = init_model::<f32>(&cfg.model)?;
    let adapters = if cfg.lora_enabled {
        Some(inject(&mut model, &cfg.train.lora)?)
    } else {
        model.freeze_backbone();
        None
    };
    if cfg.freeze_head {
        model.set_head_trainable(false);
    }
    Ok((model, adapters))
}

/// Every model parameter trainable, no adapters.
pub fn prepare_full_finetune(cfg: &RunConfig) -> Result<ModelState<f32>> {
    let mut model = init_model::<f32>(&cfg.model)?;
    model.set_trainable_where(|_| true);
    Ok(model)
}

pub fn param_report(cfg: &RunConfig) -> Result<ParamReport> {
    let (model, adapters) = prepare_model(cfg)?;
    Ok(trainable_parameter_count(&model, &adapters.unwrap_or_default()))
}

impl Trainer for ModelTrainer {
    type Output = TrainedModel;

    fn fit(&self, _protocol: &Protocol, train_set: &[Sample]) -> Result<TrainedModel> {
        let (mut model, mut adapters) = prepare_model(&self.config)?;
        let log = train(&mut model, adapters.as_mut(), train_set, &self.config.train)?;
        Ok(TrainedModel {
            model,
            adapters,
            log,
            eval_batch_size: self.config.eval_batch_size,
        })
    }
}

/// Trains every model parameter; the literal fine-tuned baseline.
pub struct FullFinetuneTrainer {
    pub config: RunConfig,
}

impl Trainer for FullFinetuneTrainer {
    type Output = TrainedModel;

    fn fit(&self, _protocol: &Protocol, train_set: &[Sample]) -> Result<TrainedModel> {
        let mut model = prepare_full_finetune(&self.config)?;
        let log = train(&mut model, None, train_set, &self.config.train)?;
        Ok(TrainedModel {
            model,
            adapters: None,
            log,
            eval_batch_size: self.config.eval_batch_size,
        })
    }
}

/// Per-setting reports plus their unweighted mean.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolTable {
    pub rows: Vec<EvalReport>,
    pub mean_auc: f64,
    pub mean_acc: f64,
}

impl ProtocolTable {
    pub fn new(rows: Vec<EvalReport>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Metric("no settings to average".into()));
        }
        let n = rows.len() as f64;
        let mean_auc = rows.iter().map(|r| r.auc).sum::<f64>() / n;
        let mean_acc = rows.iter().map(|r| r.acc).sum::<f64>() / n;
        Ok(Self { rows, mean_auc, mean_acc })
    }

    /// `setting,auc,acc` with one row per setting and a final `average`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("setting,auc,acc\n");
        for r in &self.rows {
            let _ = writeln!(s, "{r}");
        }
        let _ = writeln!(s, "average,{},{}", self.mean_auc, self.mean_acc);
        s
    }

    /// Settings as columns: `metric,<tag>...,average`, rows `auc` and `acc`.
    pub fn to_wide_csv(&self) -> String {
        let tags: Vec<&str> = self.rows.iter().map(|r| r.tag.as_str()).collect();
        let mut s = format!("metric,{},average\n", tags.join(","));
        for (name, pick, mean) in [
            ("auc", (|r: &EvalReport| r.auc) as fn(&EvalReport) -> f64, self.mean_auc),
            ("acc", |r: &EvalReport| r.acc, self.mean_acc),
        ] {
            let vals: Vec<String> = self.rows.iter().map(|r| pick(r).to_string()).collect();
            let _ = writeln!(s, "{name},{},{mean}", vals.join(","));
        }
        s
    }
}

/// Fits on each protocol's training side and evaluates on its test side.
pub fn run_protocols<Tr: Trainer>(
    trainer: &Tr,
    cfg: &RunConfig,
    protocols: &[Protocol],
    mut tag: impl FnMut(&Protocol) -> String,
) -> Result<(ProtocolTable, Vec<Tr::Output>)> {
    let mut reports = Vec::with_capacity(protocols.len());
    let mut fitted = Vec::with_capacity(protocols.len());
    for p in protocols {
        let split = make_split(&cfg.dataset_spec(p.quality, p.train_domain), p)?;
        let det = trainer.fit(p, &split.train)?;
        reports.push(evaluate(&det, &split.test, tag(p))?);
        fitted.push(det);
    }
    Ok((ProtocolTable::new(reports)?, fitted))
}

/// The four leave-one-out settings at `quality`.
pub fn cross_manipulation_protocol<Tr: Trainer>(
    trainer: &Tr,
    cfg: &RunConfig,
    quality: Quality,
) -> Result<ProtocolTable> {
    Ok(run_protocols(trainer, cfg, &leave_one_out_protocols(quality), Protocol::label)?.0)
}

/// Trains on domain 0 and tests on domains `1..=k`. One model is fitted
/// and reused, since every setting shares the same training side.
pub fn cross_dataset_protocol<Tr: Trainer>(trainer: &Tr, cfg: &RunConfig) -> Result<ProtocolTable> {
    if cfg.xdataset_domains == 0 {
        return Err(Error::Config("xdataset.domains must be at least 1".into()));
    }
    let quality = cfg.protocol.quality;
    let protocols: Vec<Protocol> = (1..=cfg.xdataset_domains)
        .map(|d| Protocol::cross_domain(cfg.xdataset_family, quality, d))
        .collect();
    let split = make_split(&cfg.dataset_spec(quality, 0), &protocols[0])?;
    let det = trainer.fit(&protocols[0], &split.train)?;
    let mut reports = vec![evaluate(&det, &split.test, "domain1")?];
    for p in &protocols[1..] {
        p.validate()?;
        let test = generate_pool(&cfg.dataset_spec(quality, 0), &p.test_families, quality, p.test_domain, test_offset())?;
        reports.push(evaluate(&det, &test, format!("domain{}", p.test_domain))?);
    }
    ProtocolTable::new(reports)
}

/// Ablation rows, in order.
pub const ABLATION_ROWS: [&str; 3] = ["head_only", "lora", "lora_scl"];

/// The three ablation configurations derived from `cfg`: the head-only
/// baseline, adapters with the SCL weight at zero, and adapters with the
/// configured SCL weight.
pub fn ablation_configs(cfg: &RunConfig) -> [RunConfig; 3] {
    let mut head = cfg.clone();
    head.lora_enabled = false;
    head.train.loss.lambda = 0.0;
    let mut lora = cfg.clone();
    lora.lora_enabled = true;
    lora.train.loss.lambda = 0.0;
    let mut full = cfg.clone();
    full.lora_enabled = true;
    [head, lora, full]
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: &'static str,
    pub auc: f64,
    pub acc: f64,
    pub adapter_params: usize,
    /// One cross-manipulation table per seed.
    pub per_seed: Vec<(u64, ProtocolTable)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("configuration,auc,acc\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.name, r.auc, r.acc);
        }
        s
    }

    /// `configuration,seed,setting,auc,acc` for every run.
    pub fn detail_csv(&self) -> String {
        let mut s = String::from("configuration,seed,setting,auc,acc\n");
        for r in &self.rows {
            for (seed, t) in &r.per_seed {
                for e in &t.rows {
                    let _ = writeln!(s, "{},{seed},{},{},{}", r.name, e.tag, e.auc, e.acc);
                }
            }
        }
        s
    }
}

/// Runs the low-quality cross-manipulation protocol for each ablation
/// configuration and seed; each row reports the mean over seeds of the
/// per-seed averages.
pub fn ablation_run(cfg: &RunConfig) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(3);
    for (name, base) in ABLATION_ROWS.into_iter().zip(ablation_configs(cfg)) {
        let mut per_seed = Vec::with_capacity(cfg.ablation_seeds.len());
        for &seed in &cfg.ablation_seeds {
            let run = base.with_run_seed(seed);
            let table = if name == "head_only" && cfg.full_finetune_baseline {
                cross_manipulation_protocol(&FullFinetuneTrainer { config: run }, &base, Quality::Lq)?
            } else {
                cross_manipulation_protocol(&ModelTrainer { config: run }, &base, Quality::Lq)?
            };
            per_seed.push((seed, table));
        }
        let n = per_seed.len() as f64;
        rows.push(AblationRow {
            name: if name == "head_only" && cfg.full_finetune_baseline {
                "full_finetune"
            } else {
                name
            },
            auc: per_seed.iter().map(|(_, t)| t.mean_auc).sum::<f64>() / n,
            acc: per_seed.iter().map(|(_, t)| t.mean_acc).sum::<f64>() / n,
            adapter_params: param_report(&base)?.adapter_total,
            per_seed,
        });
    }
    Ok(AblationTable { rows })
}
