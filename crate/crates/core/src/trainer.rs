//! Adversarial training: curriculum, alternating generator and critic updates, the two-phase
//! freeze schedule, optimizer state, checkpoints and metrics.
//!
//! Every random draw of step `k` comes from streams labelled with `k`, so a run resumed from
//! a checkpoint replays exactly the draws an uninterrupted run would make.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Manifest};
use crate::config::ModelConfig;
use crate::critic::{adv_loss_g, adv_loss_v};
use crate::extractors::{extract_id, extract_landmarks};
use crate::losses::{self, GeneratorTerms, LossReport, LossWeights};
use crate::model::FaceSwapModel;
use crate::ops::mean_scalar;
use crate::params::{ParamGroup, ParamStore};
use crate::rng::seeded_rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Encoder and blending module train against a frozen decoder.
    One,
    /// Decoder fine-tunes while encoder and blending module stay fixed.
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning-rate multiplier applied from `phase2_start` on.
    pub phase2_lr_scale: f64,
    pub curriculum_warm_steps: u64,
    pub curriculum_decay_steps: u64,
    pub phase2_start: u64,
    /// Share of each batch that also runs the two dual-swap passes.
    pub swap_fraction: f64,
    /// Stops gradients at the first swap output before the swap-back passes.
    pub swap_loss_detach: bool,
    pub metrics_every: u64,
    pub checkpoint_every: u64,
    pub weights: LossWeights,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            total_steps: 300,
            batch_size: 8,
            lr: 1e-4,
            phase2_lr_scale: 0.1,
            curriculum_warm_steps: 100,
            curriculum_decay_steps: 100,
            phase2_start: 200,
            swap_fraction: 0.25,
            swap_loss_detach: false,
            metrics_every: 1,
            checkpoint_every: 100,
            weights: LossWeights::default(),
        }
    }

    pub fn paper() -> Self {
        Self {
            total_steps: 2_400_000,
            batch_size: 32,
            lr: 4e-5,
            curriculum_warm_steps: 100_000,
            curriculum_decay_steps: 500_000,
            phase2_start: 1_200_000,
            checkpoint_every: 10_000,
            metrics_every: 100,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("train config: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0) || !(self.phase2_lr_scale > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..=1.0).contains(&self.swap_fraction) {
            return bad("swap_fraction must lie in [0, 1]");
        }
        if self.metrics_every == 0 || self.checkpoint_every == 0 {
            return bad("metrics_every and checkpoint_every must be positive");
        }
        if !(self.weights.tau > 0.0) {
            return bad("tau must be positive");
        }
        let w = &self.weights;
        if [w.id, w.con, w.rec, w.lm, w.swap].iter().any(|&v| !(v >= 0.0)) {
            return bad("loss weights must be nonnegative");
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Probability that a sample is a reconstruction pair: 1 during warm-up, then a linear ramp
/// down to 0 over the decay window.
pub fn curriculum_p(step: u64, cfg: &TrainConfig) -> f64 {
    if step < cfg.curriculum_warm_steps {
        return 1.0;
    }
    if cfg.curriculum_decay_steps == 0 {
        return 0.0;
    }
    let t = (step - cfg.curriculum_warm_steps) as f64 / cfg.curriculum_decay_steps as f64;
    (1.0 - t).max(0.0)
}

pub fn phase_at(step: u64, cfg: &TrainConfig) -> Phase {
    if step < cfg.phase2_start {
        Phase::One
    } else {
        Phase::Two
    }
}

/// Parameter groups the optimizer may touch at `step`.
pub fn phase_mask(step: u64, cfg: &TrainConfig) -> BTreeSet<ParamGroup> {
    match phase_at(step, cfg) {
        Phase::One => [ParamGroup::Encoder, ParamGroup::Sbm, ParamGroup::Critic].into(),
        Phase::Two => [ParamGroup::Decoder, ParamGroup::Critic].into(),
    }
}

/// Adam with per-group step counters. Moments live alongside the parameters by name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    steps: BTreeMap<ParamGroup, u64>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            steps: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// One update of every parameter in `group` that received a gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, group: ParamGroup, lr: f64) -> Result<()> {
        let t = {
            let t = self.steps.entry(group).or_insert(0);
            *t += 1;
            *t as i32
        };
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, var) in store.group(group) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                None => (g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let delta = ((&m / bc1)?.div(&denom)? * lr)?;
            var.set(&var.as_tensor().sub(&delta)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    pub fn steps(&self) -> BTreeMap<String, u64> {
        self.steps.iter().map(|(g, &t)| (g.prefix().to_string(), t)).collect()
    }

    fn tensors(&self) -> impl Iterator<Item = (String, &Tensor)> {
        let m = self.m.iter().map(|(k, t)| (format!("optim/m/{k}"), t));
        let v = self.v.iter().map(|(k, t)| (format!("optim/v/{k}"), t));
        m.chain(v)
    }

    fn restore(tensors: &BTreeMap<String, Tensor>, steps: &BTreeMap<String, u64>) -> Result<Self> {
        let mut adam = Self::default();
        for (name, t) in tensors {
            if let Some(k) = name.strip_prefix("optim/m/") {
                adam.m.insert(k.to_string(), t.clone());
            } else if let Some(k) = name.strip_prefix("optim/v/") {
                adam.v.insert(k.to_string(), t.clone());
            }
        }
        for (prefix, &t) in steps {
            let group = ParamGroup::of(prefix)
                .ok_or_else(|| Error::Corrupt(format!("unknown optimizer group {prefix:?}")))?;
            adam.steps.insert(group, t);
        }
        Ok(adam)
    }
}

/// Draws `n` (source, target) index pairs from a dataset of `len` images.
pub fn sample_indices(len: usize, n: usize, seed: u64, step: u64) -> Vec<(usize, usize)> {
    let mut rng = seeded_rng(seed, &format!("batch/{step}"));
    (0..n).map(|_| (rng.random_range(0..len), rng.random_range(0..len))).collect()
}

/// Gathers a `(source, target)` batch from `images` (`(M, 3, S, S)`).
pub fn sample_batch(images: &Tensor, n: usize, seed: u64, step: u64) -> Result<(Tensor, Tensor)> {
    let len = images.dims4()?.0;
    if len == 0 {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let pairs = sample_indices(len, n, seed, step);
    let pick = |which: fn(&(usize, usize)) -> usize| -> Result<Tensor> {
        let idx: Vec<u32> = pairs.iter().map(|p| which(p) as u32).collect();
        Ok(images.index_select(&Tensor::new(idx.as_slice(), images.device())?, 0)?)
    };
    Ok((pick(|p| p.0)?, pick(|p| p.1)?))
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub step: u64,
    pub p_pi: f64,
    pub same: Vec<bool>,
    pub report: LossReport,
}

/// One line of the metrics stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub adv_g: f64,
    pub adv_v: f64,
    pub id: f64,
    pub con: f64,
    pub rec: f64,
    pub lm: f64,
    pub swap: f64,
    pub total: f64,
    pub p_pi: f64,
}

impl From<&StepOutcome> for MetricsRecord {
    fn from(o: &StepOutcome) -> Self {
        let r = &o.report;
        Self {
            step: o.step,
            adv_g: r.adv_g,
            adv_v: r.adv_v,
            id: r.id,
            con: r.con,
            rec: r.rec,
            lm: r.lm,
            swap: r.swap,
            total: r.total,
            p_pi: o.p_pi,
        }
    }
}

/// Appends JSON lines to a metrics file.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record).map_err(std::io::Error::from)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Seeds and labels of the noise streams used by one generator evaluation.
#[derive(Debug, Clone)]
pub struct NoiseLabels {
    pub seed: u64,
    pub prefix: String,
}

impl NoiseLabels {
    pub fn step(seed: u64, step: u64) -> Self {
        Self {
            seed,
            prefix: format!("noise/{step}"),
        }
    }

    pub fn stream(&self, pass: &str) -> crate::rng::Stream {
        seeded_rng(self.seed, &format!("{}/{pass}", self.prefix))
    }
}

/// Runs the generator on `(source, target)` and assembles every unweighted generator term.
/// The dual swap uses the first `swap_count` samples. Returns the terms and the swapped images.
#[allow(clippy::too_many_arguments)]
pub fn generator_terms(
    m: &FaceSwapModel,
    source: &Tensor,
    target: &Tensor,
    same: &[bool],
    swap_count: usize,
    swap_detach: bool,
    w: &LossWeights,
    noise: &NoiseLabels,
) -> Result<(GeneratorTerms, Tensor)> {
    let fake = m.swap(source, target, &mut noise.stream("main"))?;

    let adv_g = adv_loss_g(&m.critic.scores(&fake)?)?;
    let e_swap = extract_id(&fake, &m.id)?.0;
    let e_src = extract_id(source, &m.id)?.0;
    let e_tgt = extract_id(target, &m.id)?.0;
    let id = losses::id_loss(&e_swap, &e_src)?;
    let negatives = losses::batch_negatives(&e_src)?;
    let con = losses::contrastive_id_loss(
        &e_swap,
        &e_src,
        &e_tgt,
        negatives.as_ref(),
        w.tau,
        w.con_denominator_includes_positive,
    )?;
    let rec = losses::reconstruction_loss(&fake, target, same)?;
    let lm = losses::landmark_loss(&extract_landmarks(target, &m.lm)?.0, &extract_landmarks(&fake, &m.lm)?.0)?;

    let swap = if swap_count == 0 {
        Tensor::zeros((), fake.dtype(), fake.device())?
    } else {
        let i_st = fake.narrow(0, 0, swap_count)?;
        let i_st = if swap_detach { i_st.detach() } else { i_st };
        let mut pass = 0;
        let ds = losses::dual_swap_loss(
            |s, t| {
                pass += 1;
                m.swap(s, t, &mut noise.stream(&format!("swap{pass}")))
            },
            &source.narrow(0, 0, swap_count)?,
            &target.narrow(0, 0, swap_count)?,
            &i_st,
        )?;
        ds.total()?
    };
    let terms = GeneratorTerms {
        adv_g,
        id,
        con,
        rec,
        lm,
        swap,
    };
    Ok((terms, fake))
}

pub struct Trainer {
    pub model: FaceSwapModel,
    pub cfg: TrainConfig,
    pub adam: Adam,
    /// Index of the next step to run.
    pub step: u64,
}

fn finite(term: &str, value: f64, step: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite {
            term: term.to_string(),
            step: Some(step),
        })
    }
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            model: FaceSwapModel::new(model_cfg, DType::F32)?,
            cfg,
            adam: Adam::default(),
            step: 0,
        })
    }

    pub fn phase(&self) -> Phase {
        phase_at(self.step, &self.cfg)
    }

    fn lr(&self) -> f64 {
        match self.phase() {
            Phase::One => self.cfg.lr,
            Phase::Two => self.cfg.lr * self.cfg.phase2_lr_scale,
        }
    }

    /// Runs one generator update and one critic update on `(source, target)`.
    pub fn train_step(&mut self, source: &Tensor, target: &Tensor) -> Result<StepOutcome> {
        let step = self.step;
        let seed = self.model.cfg.seed;
        let n = target.dims4()?.0;
        if source.dims() != target.dims() {
            return Err(Error::shape(format!(
                "source batch {:?} vs target batch {:?}",
                source.dims(),
                target.dims()
            )));
        }
        let p_pi = curriculum_p(step, &self.cfg);
        let mut coin = seeded_rng(seed, &format!("curriculum/{step}"));
        let same: Vec<bool> = (0..n).map(|_| coin.random::<f64>() < p_pi).collect();
        let source = if same.iter().any(|&s| s) {
            let rows = (0..n)
                .map(|i| if same[i] { target.get(i) } else { source.get(i) })
                .collect::<candle_core::Result<Vec<_>>>()?;
            Tensor::stack(&rows, 0)?
        } else {
            source.clone()
        };

        let k = ((self.cfg.swap_fraction * n as f64).ceil() as usize).min(n);
        let noise = NoiseLabels::step(seed, step);
        let (terms, fake) = generator_terms(
            &self.model,
            &source,
            target,
            &same,
            k,
            self.cfg.swap_loss_detach,
            &self.cfg.weights,
            &noise,
        )?;
        let w = &self.cfg.weights;
        let (total, mut report) = losses::total_generator_loss(&terms, w).map_err(|e| match e {
            Error::NonFinite { term, .. } => Error::NonFinite { term, step: Some(step) },
            e => e,
        })?;
        finite("total", report.total, step)?;

        let mask = phase_mask(step, &self.cfg);
        let lr = self.lr();
        let grads = total.backward()?;
        for group in [ParamGroup::Encoder, ParamGroup::Sbm, ParamGroup::Decoder] {
            if mask.contains(&group) {
                self.adam.step(&self.model.store, &grads, group, lr)?;
            }
        }
        drop(grads);

        let critic = &self.model.critic;
        let adv_v = adv_loss_v(&critic.scores(target)?, &critic.scores(&fake.detach())?)?;
        report.adv_v = finite("adv_v", mean_scalar(&adv_v)?, step)?;
        let grads = adv_v.backward()?;
        self.adam.step(&self.model.store, &grads, ParamGroup::Critic, lr)?;

        self.step += 1;
        Ok(StepOutcome {
            step,
            p_pi,
            same,
            report,
        })
    }

    pub fn manifest(&self) -> Manifest {
        let mut manifest = Manifest::new(self.model.cfg, self.step, self.phase());
        manifest.adam_steps = self.adam.steps();
        manifest
    }

    /// Parameters and optimizer moments, keyed by archive name.
    pub fn state(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut all = self.model.store.snapshot()?;
        for (name, t) in self.adam.tensors() {
            all.insert(name, t.clone());
        }
        Ok(all)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let state = self.state()?;
        save_checkpoint(path, state.iter(), &self.manifest())
    }

    /// Rebuilds a trainer from a checkpoint written by [`Trainer::save`].
    pub fn resume(path: impl AsRef<Path>, cfg: TrainConfig) -> Result<Self> {
        let (manifest, tensors) = load_checkpoint(path)?;
        let mut trainer = Self::new(&manifest.config, cfg)?;
        trainer.model.store.load(&tensors)?;
        trainer.adam = Adam::restore(&tensors, &manifest.adam_steps)?;
        trainer.step = manifest.step;
        Ok(trainer)
    }
}

/// Loads model parameters from a checkpoint for inference.
pub fn load_model(path: impl AsRef<Path>, dtype: DType) -> Result<FaceSwapModel> {
    let (manifest, tensors) = load_checkpoint(path)?;
    let model = FaceSwapModel::new(&manifest.config, dtype)?;
    model.store.load(&tensors)?;
    Ok(model)
}
