use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vitlora::checkpoint::{load_checkpoint, save_checkpoint};
use vitlora::config::{RunConfig, RESOLVED_CONFIG_FILE};
use vitlora::data::{generate_pool, read_dataset, select_families, test_offset, write_dataset, Quality, Sample};
use vitlora::experiment::{
    ablation_run, cross_dataset_protocol, cross_manipulation_protocol, param_report, prepare_model, ModelTrainer,
};
use vitlora::train::{evaluate, train, ModelDetector};
use vitlora::verify::gradcheck;
use vitlora::{Error, Result};

#[derive(Parser)]
#[command(name = "vitlora", version, about = "LoRA-adapted ViT forgery detector: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// key=value run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable); wins over the file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Clone)]
struct OutArg {
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize synthetic datasets for every configured family, tier and domain
    GenData {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model on a generated dataset and evaluate it
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Root directory written by gen-data
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a generated dataset
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to the resolved config saved beside the checkpoint
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Head-only vs LoRA vs LoRA+SCL on the low-quality leave-one-out protocol
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArg,
        /// Baseline row trains the whole model instead of the head only
        #[arg(long)]
        full_finetune_baseline: bool,
        /// Keep the classification head frozen as well
        #[arg(long)]
        freeze_head: bool,
    },
    /// Leave-one-out cross-manipulation protocol (4 settings + average)
    Xmanip {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArg,
    },
    /// Train on domain 0, evaluate on shifted domains
    Xdataset {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArg,
    },
    /// 64-bit finite-difference check of every trainable parameter
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArg,
    },
    /// Trainable and frozen parameter totals
    ParamCount {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArg,
    },
}

fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Prints `csv` and, with an output directory, saves it there with the
/// resolved config.
fn emit(out: Option<&Path>, file: &str, csv: &str, cfg: &RunConfig) -> Result<()> {
    print!("{csv}");
    if let Some(dir) = out {
        mkdir(dir)?;
        write(&dir.join(file), csv)?;
        cfg.write_resolved(dir)?;
    }
    Ok(())
}

fn split_dir(root: &Path, quality: Quality, domain: u32, split: &str) -> PathBuf {
    root.join(quality.as_str()).join(format!("domain{domain}")).join(split)
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    mkdir(out)?;
    let mut manifest = String::from("quality,domain,split,n_real,n_fake\n");
    for &quality in &cfg.data.qualities {
        for &domain in &cfg.data.domains {
            let spec = cfg.dataset_spec(quality, domain);
            for (split, offset) in [("train", 0), ("test", test_offset())] {
                let pool = generate_pool(&spec, &cfg.data.families, quality, domain, offset)?;
                let n_real = pool.iter().filter(|s| s.is_real()).count();
                write_dataset(split_dir(out, quality, domain, split), &pool)?;
                manifest.push_str(&format!("{quality},{domain},{split},{n_real},{}\n", pool.len() - n_real));
            }
        }
    }
    emit(Some(out), "manifest.csv", &manifest, cfg)
}

fn load_side(root: &Path, cfg: &RunConfig, train_side: bool) -> Result<Vec<Sample>> {
    let p = &cfg.protocol;
    let (domain, families, split) = if train_side {
        (p.train_domain, &p.train_families, "train")
    } else {
        (p.test_domain, &p.test_families, "test")
    };
    let pool = read_dataset(split_dir(root, p.quality, domain, split))?;
    let picked = select_families(&pool, families);
    if picked.len() == pool.iter().filter(|s| s.is_real()).count() {
        return Err(Error::Integrity(format!(
            "{} split holds no fakes of the requested families",
            split
        )));
    }
    Ok(picked)
}

fn train_cmd(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let train_set = load_side(data, cfg, true)?;
    let test_set = load_side(data, cfg, false)?;
    let (mut model, mut adapters) = prepare_model(cfg)?;
    let log = train(&mut model, adapters.as_mut(), &train_set, &cfg.train)?;
    mkdir(out)?;
    let log_csv = log.to_csv();
    print!("{log_csv}");
    write(&out.join("train_log.csv"), &log_csv)?;
    save_checkpoint(out.join("model.ckpt"), &model, adapters.as_ref())?;
    let det = ModelDetector {
        model: &model,
        adapters: adapters.as_ref(),
        batch_size: cfg.eval_batch_size,
    };
    let report = evaluate(&det, &test_set, cfg.protocol.label())?;
    emit(Some(out), "eval.csv", &format!("setting,auc,acc\n{report}\n"), cfg)
}

fn eval_cmd(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let (model, adapters) = load_checkpoint::<f32>(checkpoint, &cfg.model)?;
    let test_set = load_side(data, cfg, false)?;
    let det = ModelDetector {
        model: &model,
        adapters: adapters.as_ref(),
        batch_size: cfg.eval_batch_size,
    };
    let report = evaluate(&det, &test_set, cfg.protocol.label())?;
    emit(out, "eval.csv", &format!("setting,auc,acc\n{report}\n"), cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, overrides, out } => {
            let cfg = resolve(spec.as_deref(), &overrides)?;
            gen_data(&cfg, &out)
        }
        Command::Train { cfg, data, out } => {
            let c = resolve(cfg.config.as_deref(), &cfg.overrides)?;
            train_cmd(&c, &data, &out)
        }
        Command::Eval {
            checkpoint,
            data,
            config,
            out,
        } => {
            let path = config.unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .unwrap_or(Path::new("."))
                    .join(RESOLVED_CONFIG_FILE)
            });
            let c = resolve(Some(&path), &[])?;
            eval_cmd(&c, &checkpoint, &data, out.out.as_deref())
        }
        Command::Ablate {
            cfg,
            out,
            full_finetune_baseline,
            freeze_head,
        } => {
            let mut c = resolve(cfg.config.as_deref(), &cfg.overrides)?;
            c.full_finetune_baseline |= full_finetune_baseline;
            c.freeze_head |= freeze_head;
            let table = ablation_run(&c)?;
            if let Some(dir) = out.out.as_deref() {
                mkdir(dir)?;
                write(&dir.join("ablation_detail.csv"), &table.detail_csv())?;
            }
            emit(out.out.as_deref(), "ablation.csv", &table.to_csv(), &c)
        }
        Command::Xmanip { cfg, out } => {
            let c = resolve(cfg.config.as_deref(), &cfg.overrides)?;
            let table = cross_manipulation_protocol(&ModelTrainer { config: c.clone() }, &c, c.protocol.quality)?;
            emit(out.out.as_deref(), "xmanip.csv", &table.to_csv(), &c)
        }
        Command::Xdataset { cfg, out } => {
            let c = resolve(cfg.config.as_deref(), &cfg.overrides)?;
            let table = cross_dataset_protocol(&ModelTrainer { config: c.clone() }, &c)?;
            emit(out.out.as_deref(), "xdataset.csv", &table.to_wide_csv(), &c)
        }
        Command::Gradcheck { cfg, out } => {
            let c = resolve(cfg.config.as_deref(), &cfg.overrides)?;
            let report = gradcheck(&c)?;
            emit(out.out.as_deref(), "gradcheck.csv", &report.to_csv(), &c)?;
            if report.passed() {
                Ok(())
            } else {
                Err(Error::Oracle(format!(
                    "gradient check failed (tolerance {:e}) for: {}",
                    report.tolerance,
                    report.failures().join(", ")
                )))
            }
        }
        Command::ParamCount { cfg, out } => {
            let c = resolve(cfg.config.as_deref(), &cfg.overrides)?;
            let report = param_report(&c)?;
            emit(out.out.as_deref(), "param_count.csv", &format!("quantity,value\n{report}\n"), &c)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
