use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::Serialize;
use styleblend::checkpoint::load_checkpoint;
use styleblend::critic::adv_loss_v;
use styleblend::losses::{self, LossReport};
use styleblend::model::FaceSwapModel;
use styleblend::ops::mean_scalar;
use styleblend::selfcheck::{self, CheckResult, Mutation};
use styleblend::trainer::{generator_terms, sample_batch, MetricsRecord, MetricsWriter, NoiseLabels, TrainConfig, Trainer};
use styleblend::types::Image;
use styleblend::ModelConfig;

use crate::dataset::{load_image, save_png, Dataset};
use crate::error::CliError;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.sbld";

pub fn checkpoint_name(step: u64) -> String {
    format!("step-{step:08}.sbld")
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{what} {}: {e}", path.display())))
}

/// Reads a model config file and applies the seed override.
pub fn load_model_config(path: &Path, seed: Option<u64>) -> Result<ModelConfig, CliError> {
    let mut cfg: ModelConfig = read_json(path, "model config")?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub train_config: Option<PathBuf>,
    pub steps: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub first_step: u64,
    pub steps: u64,
    pub images: usize,
    pub checkpoint: PathBuf,
    pub last: Option<MetricsRecord>,
}

/// Trains from scratch or from `--resume`, writing metrics and checkpoints under `out`.
pub fn train(args: &TrainArgs, seed: Option<u64>) -> Result<TrainSummary, CliError> {
    let model_cfg = load_model_config(&args.config, seed)?;
    let mut tcfg = match &args.train_config {
        Some(p) => read_json::<TrainConfig>(p, "train config")?,
        None => TrainConfig::desk(),
    };
    if let Some(steps) = args.steps {
        tcfg.total_steps = steps;
    }
    tcfg.validate().map_err(|e| CliError::Config(e.to_string()))?;

    let dataset = Dataset::open(&args.data)?;
    let data = dataset.load_all(model_cfg.image_size)?;

    let mut trainer = match &args.resume {
        Some(ckpt) => {
            let t = Trainer::resume(ckpt, tcfg).map_err(CliError::from_checkpoint)?;
            if t.model.cfg != model_cfg {
                return Err(CliError::Config(format!(
                    "checkpoint {} was written for a different model config",
                    ckpt.display()
                )));
            }
            t
        }
        None => Trainer::new(&model_cfg, tcfg).map_err(|e| CliError::Config(e.to_string()))?,
    };

    std::fs::create_dir_all(&args.out).map_err(|e| CliError::Failure(format!("{}: {e}", args.out.display())))?;
    let metrics_path = args.out.join(METRICS_FILE);
    if args.resume.is_none() && metrics_path.exists() {
        std::fs::remove_file(&metrics_path).map_err(|e| CliError::Failure(e.to_string()))?;
    }
    let mut metrics = MetricsWriter::append(&metrics_path).map_err(CliError::from_run)?;

    let first_step = trainer.step;
    let mut last = None;
    while trainer.step < tcfg.total_steps {
        let (source, target) =
            sample_batch(&data, tcfg.batch_size, model_cfg.seed, trainer.step).map_err(CliError::from_run)?;
        let outcome = trainer.train_step(&source, &target).map_err(CliError::from_run)?;
        let record = MetricsRecord::from(&outcome);
        if outcome.step % tcfg.metrics_every == 0 {
            metrics.write(&record).map_err(CliError::from_run)?;
        }
        last = Some(record);
        if trainer.step % tcfg.checkpoint_every == 0 {
            trainer
                .save(args.out.join(checkpoint_name(trainer.step)))
                .map_err(CliError::from_run)?;
        }
    }
    let checkpoint = args.out.join(FINAL_CHECKPOINT);
    trainer.save(&checkpoint).map_err(CliError::from_run)?;
    Ok(TrainSummary {
        first_step,
        steps: trainer.step - first_step,
        images: dataset.len(),
        checkpoint,
        last,
    })
}

/// Loads model weights and the seed the checkpoint was trained with.
pub fn load_model(ckpt: &Path) -> Result<FaceSwapModel, CliError> {
    let (manifest, tensors) = load_checkpoint(ckpt).map_err(CliError::from_checkpoint)?;
    let model = FaceSwapModel::new(&manifest.config, DType::F32).map_err(CliError::from_checkpoint)?;
    model.store.load(&tensors).map_err(CliError::from_checkpoint)?;
    Ok(model)
}

fn load_pair(model: &FaceSwapModel, source: &Path, target: &Path) -> Result<(Tensor, Tensor), CliError> {
    let size = model.cfg.image_size;
    let s = load_image(source, size)?;
    let t = load_image(target, size)?;
    let batch = |img: Image| img.tensor().unsqueeze(0).map_err(|e| CliError::Failure(e.to_string()));
    Ok((batch(s)?, batch(t)?))
}

/// Swaps `source` onto `target` and writes the PNG. Noise comes from `seed`, defaulting to
/// the checkpoint's model seed.
pub fn swap(ckpt: &Path, source: &Path, target: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let model = load_model(ckpt)?;
    let (s, t) = load_pair(&model, source, target)?;
    let noise = NoiseLabels {
        seed: seed.unwrap_or(model.cfg.seed),
        prefix: "swap".into(),
    };
    let fake = model.swap(&s, &t, &mut noise.stream("main")).map_err(CliError::from_run)?;
    let img = Image::unbatch(&fake).map_err(CliError::from_run)?.remove(0);
    save_png(&img, out)
}

/// Loss report for one pair, as printed by `losses`.
#[derive(Debug, Clone, Serialize)]
pub struct PairLosses {
    #[serde(flatten)]
    pub report: LossReport,
    /// Whether the two files are byte-identical, which makes the pair a reconstruction pair.
    pub same_input: bool,
    /// Reconstruction term evaluated as a swap pair; always zero.
    pub rec_as_swap: f64,
    pub swap_to_source: f64,
    pub swap_to_target: f64,
}

pub fn pair_losses(ckpt: &Path, source: &Path, target: &Path, seed: Option<u64>) -> Result<PairLosses, CliError> {
    let model = load_model(ckpt)?;
    let (s, t) = load_pair(&model, source, target)?;
    let read = |p: &Path| std::fs::read(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())));
    let same_input = read(source)? == read(target)?;
    let run = CliError::from_run;
    let noise = NoiseLabels {
        seed: seed.unwrap_or(model.cfg.seed),
        prefix: "losses".into(),
    };
    let w = losses::LossWeights::default();
    let (terms, fake) = generator_terms(&model, &s, &t, &[same_input], 1, false, &w, &noise).map_err(run)?;
    let (_, mut report) = losses::total_generator_loss(&terms, &w).map_err(run)?;
    let adv_v = adv_loss_v(&model.critic.scores(&t).map_err(run)?, &model.critic.scores(&fake).map_err(run)?)
        .map_err(run)?;
    report.adv_v = mean_scalar(&adv_v).map_err(run)?;
    let rec_as_swap = mean_scalar(&losses::reconstruction_loss(&fake, &t, &[false]).map_err(run)?).map_err(run)?;

    let mut pass = 0;
    let parts = losses::dual_swap_loss(
        |a, b| {
            pass += 1;
            model.swap(a, b, &mut noise.stream(&format!("swap{pass}")))
        },
        &s,
        &t,
        &fake,
    )
    .map_err(run)?;
    Ok(PairLosses {
        report,
        same_input,
        rec_as_swap,
        swap_to_source: mean_scalar(&parts.to_source).map_err(run)?,
        swap_to_target: mean_scalar(&parts.to_target).map_err(run)?,
    })
}

/// Runs the self-check suite, printing one line per check to `out`.
pub fn selfcheck(mutation: Mutation, out: &mut impl Write) -> Result<Vec<CheckResult>, CliError> {
    let mut io_err = None;
    let results = selfcheck::run_all(mutation, |r| {
        let line = format!(
            "{:<20} {:>10.3e}  tol {:.0e}  {}",
            r.name,
            r.value,
            r.tolerance,
            if r.passed { "ok" } else { "FAIL" }
        );
        if let Err(e) = writeln!(out, "{line}") {
            io_err.get_or_insert(e);
        }
    })
    .map_err(|e| CliError::Failure(e.to_string()))?;
    if let Some(e) = io_err {
        return Err(CliError::Failure(e.to_string()));
    }
    match results.iter().find(|r| !r.passed) {
        Some(r) => Err(CliError::Check {
            name: r.name.to_string(),
            value: r.value,
            tolerance: r.tolerance,
        }),
        None => Ok(results),
    }
}

/// Parses `STYLEBLEND_SELFCHECK_MUTATION`.
pub fn parse_mutation(value: Option<&str>) -> Result<Mutation, CliError> {
    match value {
        None | Some("") | Some("none") => Ok(Mutation::None),
        Some("adain") => Ok(Mutation::AdainDetachedStd),
        Some(other) => Err(CliError::Config(format!("unknown self-check mutation {other:?}"))),
    }
}

/// Parses `STYLEBLEND_SEED`.
pub fn parse_seed(value: Option<&str>) -> Result<Option<u64>, CliError> {
    value
        .map(|v| {
            v.trim()
                .parse::<u64>()
                .map_err(|e| CliError::Config(format!("STYLEBLEND_SEED={v:?}: {e}")))
        })
        .transpose()
}
