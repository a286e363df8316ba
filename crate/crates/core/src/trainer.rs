//! Two-stage multi-task training, fine-tuning and the ablation harness.
//!
//! Stage 1 trains phoneme-to-text alone until the clean-phoneme dev loss
//! stops improving. Stage 2 cycles through single-task batches in the
//! configured ratio. Fine-tuning is speech-to-text only with a fresh
//! optimizer. Every random draw is keyed by `(seed, phase, step, example)`,
//! so a resumed run matches an uninterrupted one bit for bit.

use std::path::{Path, PathBuf};

use autograd::{adam_step, AdamConfig, AdamState, Gradients, InverseSqrtSchedule, Matrix, Tape};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::TaskData;
use crate::decoding::greedy_ter;
use crate::error::{Error, Result};
use crate::lexicon::{noise_phonemes, NoiseConfig};
use crate::losses::{self, marginal_entropy, total_loss, LossBreakdown, LossWeights, MetricsRecord, Task};
use crate::masking::{sample_span_mask, SpanMaskConfig};
use crate::model::{Forward, Model, ModelConfig, OutputSpace};
use crate::rng::{self, tag};
use crate::tasks::{self, decoder_io, ExampleLoss};

macro_rules! per_task {
    ($(#[$m:meta])* $name:ident, $ty:ty, [$msp:expr, $pp:expr, $s2c:expr, $p2t:expr, $s2t:expr]) => {
        $(#[$m])*
        #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
        #[serde(default, deny_unknown_fields)]
        pub struct $name {
            pub msp: $ty,
            pub pp: $ty,
            pub s2c: $ty,
            pub p2t: $ty,
            pub s2t: $ty,
        }

        impl Default for $name {
            fn default() -> Self {
                Self { msp: $msp, pp: $pp, s2c: $s2c, p2t: $p2t, s2t: $s2t }
            }
        }

        impl $name {
            pub fn get(&self, task: Task) -> &$ty {
                match task {
                    Task::Msp => &self.msp,
                    Task::Pp => &self.pp,
                    Task::S2c => &self.s2c,
                    Task::P2t => &self.p2t,
                    Task::S2t => &self.s2t,
                }
            }
        }
    };
}

per_task!(
    /// Batches of each task per scheduling cycle.
    TaskRatios, u32, [4, 1, 4, 2, 1]
);
per_task!(
    /// Examples per batch.
    BatchSizes, usize, [8, 8, 8, 8, 8]
);
per_task!(
    /// Parameter names that a task's steps never update.
    FreezePolicy, Vec<String>, [vec![crate::model::PHONEME_EMBEDDING.to_string()], vec![], vec![], vec![], vec![]]
);

impl FreezePolicy {
    /// Drops gradients of the parameters frozen for `task`.
    pub fn apply(&self, model: &Model, task: Task, grads: &mut Gradients) -> Result<()> {
        for name in self.get(task) {
            let id = model.params.id(name).ok_or_else(|| Error::Config(format!("freeze: unknown parameter {name}")))?;
            grads.remove(id);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub stage1_steps: u64,
    /// Dev evaluations without improvement before stage 1 stops.
    pub stage1_patience: usize,
    pub stage1_eval_interval: u64,
    pub stage2_steps: u64,
    pub finetune_steps: u64,
    /// Dev-loss logging interval in stage 2 and fine-tuning; 0 disables.
    pub eval_interval: u64,
    pub batch: BatchSizes,
    pub ratios: TaskRatios,
    pub weights: LossWeights,
    pub enabled_tasks: Vec<Task>,
    pub freeze: FreezePolicy,
    pub lr: InverseSqrtSchedule,
    pub finetune_lr: InverseSqrtSchedule,
    pub adam: AdamConfig,
    /// Steps between checkpoints; 0 disables.
    pub checkpoint_interval: u64,
    pub span_mask: SpanMaskConfig,
    pub noise: NoiseConfig,
    /// Alert threshold on the predicted-phoneme entropy; defaults to ln(I)/10.
    pub collapse_floor: Option<f64>,
    /// Dev utterances used for dev losses and TER.
    pub dev_utts: usize,
    /// Decoding length cap for dev TER.
    pub max_decode_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            stage1_steps: 2000,
            stage1_patience: 5,
            stage1_eval_interval: 100,
            stage2_steps: 4000,
            finetune_steps: 1000,
            eval_interval: 200,
            batch: BatchSizes::default(),
            ratios: TaskRatios::default(),
            weights: LossWeights::default(),
            enabled_tasks: Task::ALL.to_vec(),
            freeze: FreezePolicy::default(),
            lr: InverseSqrtSchedule::default(),
            finetune_lr: InverseSqrtSchedule::default(),
            adam: AdamConfig::default(),
            checkpoint_interval: 0,
            span_mask: SpanMaskConfig::default(),
            noise: NoiseConfig::default(),
            collapse_floor: None,
            dev_utts: 200,
            max_decode_len: 24,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enabled_tasks.is_empty() {
            return Err(Error::Config("enabled_tasks is empty; at least one task is needed".into()));
        }
        if !self.enabled_tasks.iter().any(|&t| *self.ratios.get(t) > 0) {
            return Err(Error::Config("every enabled task has sampling ratio 0".into()));
        }
        for &t in &self.enabled_tasks {
            if *self.batch.get(t) == 0 {
                return Err(Error::Config(format!("batch.{t} must be at least 1")));
            }
        }
        self.weights.validate()?;
        self.span_mask.validate()?;
        self.noise.validate()?;
        for (name, s) in [("lr", &self.lr), ("finetune_lr", &self.finetune_lr)] {
            if !(s.peak > 0.0 && s.peak.is_finite()) {
                return Err(Error::Config(format!("{name}.peak must be positive")));
            }
        }
        if self.stage1_eval_interval == 0 {
            return Err(Error::Config("stage1_eval_interval must be at least 1".into()));
        }
        if let Some(f) = self.collapse_floor {
            if !f.is_finite() {
                return Err(Error::Config("collapse_floor must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn enabled(&self, task: Task) -> bool {
        self.enabled_tasks.contains(&task)
    }

    pub fn collapse_floor(&self, phoneme_vocab: usize) -> f64 {
        self.collapse_floor.unwrap_or((phoneme_vocab as f64).ln() / 10.0)
    }

    pub fn without(&self, removed: &[Task]) -> Self {
        let mut c = self.clone();
        c.enabled_tasks.retain(|t| !removed.contains(t));
        c
    }
}

/// Deterministic task sequence. Each cycle holds every enabled task as many
/// times as its ratio, in an order drawn from a per-cycle seeded shuffle.
#[derive(Clone, Debug)]
pub struct Schedule {
    pool: Vec<Task>,
    seed: u64,
}

impl Schedule {
    pub fn new(ratios: &TaskRatios, enabled: &[Task], seed: u64) -> Result<Self> {
        let pool: Vec<Task> = Task::ALL
            .into_iter()
            .filter(|t| enabled.contains(t))
            .flat_map(|t| std::iter::repeat_n(t, *ratios.get(t) as usize))
            .collect();
        if pool.is_empty() {
            return Err(Error::Config("schedule is empty: no enabled task has a positive ratio".into()));
        }
        Ok(Self { pool, seed })
    }

    pub fn cycle_len(&self) -> usize {
        self.pool.len()
    }

    pub fn cycle(&self, index: u64) -> Vec<Task> {
        let mut c = self.pool.clone();
        c.shuffle(&mut rng::stream(self.seed, &[tag::SCHEDULE, index]));
        c
    }

    pub fn task_at(&self, step: u64) -> Task {
        let n = self.pool.len() as u64;
        self.cycle(step / n)[(step % n) as usize]
    }

    pub fn take(&self, steps: u64) -> Vec<Task> {
        (0..steps).map(|s| self.task_at(s)).collect()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Stage1,
    Stage2,
    Finetune,
    Done,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Stage1 => "stage1",
            Phase::Stage2 => "stage2",
            Phase::Finetune => "finetune",
            Phase::Done => "done",
        }
    }

    fn key(self) -> u64 {
        self as u64 + 1
    }
}

/// Resizes the input and vocabularies of `base` to the data.
pub fn fit_model_config(base: &ModelConfig, data: &TaskData) -> ModelConfig {
    let feature_dim = data.speech.iter().map(|s| s.features.cols()).chain(data.paired.iter().map(|p| p.features.cols())).next();
    ModelConfig {
        feature_dim: feature_dim.unwrap_or(base.feature_dim),
        phoneme_vocab: data.phoneme_vocab,
        text_vocab: data.text_vocab,
        code_vocab: data.code_vocab.max(1),
        ..base.clone()
    }
}

/// Loss and gradients of one single-task batch, before weighting.
#[derive(Debug)]
pub struct BatchResult {
    pub grads: Gradients,
    pub loss_sum: f64,
    pub count: usize,
    pub skipped: usize,
    pub predicted: Vec<Vec<f64>>,
    pub target_entropy: Option<f64>,
}

fn example_stream(cfg: &TrainConfig, what: u64, phase: Phase, step: u64, i: usize) -> rand_chacha::ChaCha8Rng {
    rng::stream(cfg.seed, &[what, phase.key(), step, i as u64])
}

fn pool_len(data: &TaskData, task: Task) -> usize {
    match task {
        Task::Msp | Task::S2c => data.speech.len(),
        Task::Pp | Task::S2t => data.paired.len(),
        Task::P2t => data.text.len(),
    }
}

fn run_example(
    model: &Model,
    data: &TaskData,
    cfg: &TrainConfig,
    task: Task,
    phase: Phase,
    step: u64,
    i: usize,
    idx: usize,
) -> Result<Option<(Gradients, ExampleLoss)>> {
    let mut tape = Tape::new(&model.params);
    let dropout = Some(example_stream(cfg, tag::DROPOUT, phase, step, i));
    let mut fwd = Forward::new(model, &mut tape, dropout);
    let out = match task {
        Task::Msp => {
            let x = &data.speech[idx].features;
            let target = tasks::msp_target(model, x)?;
            let frames = sample_span_mask(x.rows(), &cfg.span_mask, &mut example_stream(cfg, tag::SPAN_MASK, phase, step, i));
            let latent = tasks::latent_mask(model, &frames);
            if !latent.iter().any(|&m| m) {
                return Ok(None);
            }
            tasks::msp(&mut fwd, x, &latent, &target)
        }
        Task::S2c => {
            let it = &data.speech[idx];
            tasks::s2c(&mut fwd, model, &it.features, &it.codes)
        }
        Task::Pp => {
            let it = &data.paired[idx];
            tasks::pp(&mut fwd, &it.features, &it.phonemes)
        }
        Task::P2t => {
            let it = &data.text[idx];
            let mut r = example_stream(cfg, tag::PHONEME_NOISE, phase, step, i);
            let noised = noise_phonemes(&it.phonemes, &data.lexicon, &cfg.noise, &mut r);
            tasks::p2t(&mut fwd, model, &noised.noisy, &it.text)
        }
        Task::S2t => {
            let it = &data.paired[idx];
            tasks::s2t(&mut fwd, model, &it.features, &it.text)
        }
    };
    let out = match out {
        Err(Error::CtcInfeasible { .. }) => return Ok(None),
        other => other?,
    };
    let grads = tape.backward(out.loss);
    Ok(Some((grads, out)))
}

/// Runs one batch of `task` in parallel and reduces in example order.
pub fn compute_batch(model: &Model, data: &TaskData, cfg: &TrainConfig, task: Task, phase: Phase, step: u64) -> Result<BatchResult> {
    let n = pool_len(data, task);
    if n == 0 {
        return Err(Error::InsufficientData(format!("no training examples for task {task}")));
    }
    let mut r = rng::stream(cfg.seed, &[tag::BATCH, phase.key(), step]);
    let indices: Vec<usize> = (0..*cfg.batch.get(task)).map(|_| r.random_range(0..n)).collect();
    let results: Vec<_> = indices
        .par_iter()
        .enumerate()
        .map(|(i, &idx)| run_example(model, data, cfg, task, phase, step, i, idx))
        .collect::<Result<_>>()?;
    let mut out = BatchResult {
        grads: Gradients::new(),
        loss_sum: 0.0,
        count: 0,
        skipped: 0,
        predicted: Vec::new(),
        target_entropy: None,
    };
    let mut entropies = Vec::new();
    for r in results {
        let Some((g, ex)) = r else {
            out.skipped += 1;
            continue;
        };
        out.grads.merge(&g);
        out.loss_sum += ex.value;
        out.count += ex.count;
        out.predicted.extend(ex.predicted);
        entropies.extend(ex.target_entropy);
    }
    if !entropies.is_empty() {
        out.target_entropy = Some(entropies.iter().sum::<f64>() / entropies.len() as f64);
    }
    Ok(out)
}

/// Mean per-token loss of a clean-input dev pass, no dropout.
pub fn dev_loss(model: &Model, data: &TaskData, task: Task, limit: usize) -> Result<Option<f64>> {
    let per: Vec<(f64, usize)> = match task {
        Task::P2t => data.text_dev.iter().take(limit).collect::<Vec<_>>().par_iter().map(|it| {
            let h = model.encode_phonemes(&it.phonemes)?;
            let (inp, tgt) = decoder_io(&it.text, model.config.text_vocab);
            let lp = model.decoder_logp(&h, &inp, OutputSpace::Text)?;
            Ok((losses::sequence_nll(&lp, &tgt)?.value, tgt.len()))
        })
        .collect::<Result<_>>()?,
        Task::S2t => data.paired_dev.iter().take(limit).collect::<Vec<_>>().par_iter().map(|it| {
            let h = model.encode_speech(&it.features, None)?;
            let (inp, tgt) = decoder_io(&it.text, model.config.text_vocab);
            let lp = model.decoder_logp(&h, &inp, OutputSpace::Text)?;
            Ok((losses::sequence_nll(&lp, &tgt)?.value, tgt.len()))
        })
        .collect::<Result<_>>()?,
        _ => return Err(Error::Config(format!("no dev loss defined for task {task}"))),
    };
    let n: usize = per.iter().map(|p| p.1).sum();
    Ok((n > 0).then(|| per.iter().map(|p| p.0).sum::<f64>() / n as f64))
}

/// Resumable progress of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub config: TrainConfig,
    pub phase: Phase,
    /// Completed steps in the current phase.
    pub step: u64,
    pub stage1_steps_run: u64,
    pub stage1_best: Option<f64>,
    pub stage1_bad_evals: usize,
    pub ctc_skipped: u64,
    pub collapse_alerts: u64,
    /// Lowest mean per-position entropy of MSP predictions.
    pub min_prediction_entropy: Option<f64>,
    pub target_entropy_sum: f64,
    pub msp_steps: u64,
}

impl TrainerState {
    /// Mean entropy of the MSP targets over all MSP steps so far.
    pub fn mean_target_entropy(&self) -> Option<f64> {
        (self.msp_steps > 0).then(|| self.target_entropy_sum / self.msp_steps as f64)
    }
}

#[derive(Debug)]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub state: TrainerState,
}

/// Hooks and limits for [`Trainer::run`].
#[derive(Default)]
pub struct RunOptions<'a> {
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop after this many steps in this call, leaving the run resumable.
    pub max_steps: Option<u64>,
    pub log: Option<&'a mut dyn FnMut(&MetricsRecord)>,
}

impl Trainer {
    fn start(model: Model, config: TrainConfig, phase: Phase) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(model.params.len());
        let state = TrainerState {
            config,
            phase,
            step: 0,
            stage1_steps_run: 0,
            stage1_best: None,
            stage1_bad_evals: 0,
            ctc_skipped: 0,
            collapse_alerts: 0,
            min_prediction_entropy: None,
            target_entropy_sum: 0.0,
            msp_steps: 0,
        };
        Ok(Self { model, adam, state })
    }

    /// Stage 1 then stage 2. Without P2T, or with no stage-1 budget, the
    /// warm-up is skipped.
    pub fn pretrain(model: Model, config: TrainConfig) -> Result<Self> {
        let phase = if config.enabled(Task::P2t) && config.stage1_steps > 0 { Phase::Stage1 } else { Phase::Stage2 };
        Self::start(model, config, phase)
    }

    pub fn finetune(model: Model, config: TrainConfig) -> Result<Self> {
        Self::start(model, config, Phase::Finetune)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.model, &self.adam, &self.state)
    }

    pub fn resume(path: &Path) -> Result<Self> {
        let (model, adam, state): (Model, AdamState, TrainerState) = checkpoint::load(path)?;
        state.config.validate()?;
        Ok(Self { model, adam, state })
    }

    pub fn is_done(&self) -> bool {
        self.state.phase == Phase::Done
    }

    fn phase_budget(&self) -> u64 {
        let c = &self.state.config;
        match self.state.phase {
            Phase::Stage1 => c.stage1_steps,
            Phase::Stage2 => c.stage2_steps,
            Phase::Finetune => c.finetune_steps,
            Phase::Done => 0,
        }
    }

    fn advance_phase(&mut self) {
        self.state.phase = match self.state.phase {
            Phase::Stage1 => Phase::Stage2,
            _ => Phase::Done,
        };
        self.state.step = 0;
    }

    fn check_data(&self, data: &TaskData) -> Result<()> {
        let c = &self.state.config;
        let tasks: Vec<Task> = match self.state.phase {
            Phase::Stage1 => vec![Task::P2t],
            Phase::Stage2 => c.enabled_tasks.clone(),
            Phase::Finetune => vec![Task::S2t],
            Phase::Done => vec![],
        };
        for t in tasks {
            if pool_len(data, t) == 0 {
                return Err(Error::InsufficientData(format!("task {t} has no training examples")));
            }
            if t == Task::S2c && (data.code_vocab == 0 || data.speech.iter().all(|s| s.codes.is_empty())) {
                return Err(Error::InsufficientData("task s2c needs pseudo-codes; none were supplied".into()));
            }
        }
        let m = &self.model.config;
        if (m.phoneme_vocab, m.text_vocab) != (data.phoneme_vocab, data.text_vocab) {
            return Err(Error::Config(format!(
                "model vocabularies ({}, {}) do not match the data ({}, {})",
                m.phoneme_vocab, m.text_vocab, data.phoneme_vocab, data.text_vocab
            )));
        }
        if data.code_vocab > 0 && m.code_vocab != data.code_vocab {
            return Err(Error::Dimension { expected: data.code_vocab, got: m.code_vocab });
        }
        Ok(())
    }

    /// Trains until the run is done or `opts.max_steps` steps have been
    /// taken in this call.
    pub fn run(&mut self, data: &TaskData, opts: &mut RunOptions<'_>) -> Result<()> {
        let mut taken = 0u64;
        while !self.is_done() {
            if opts.max_steps.is_some_and(|m| taken >= m) {
                return Ok(());
            }
            if self.state.step >= self.phase_budget() {
                self.advance_phase();
                continue;
            }
            if self.state.step == 0 {
                self.check_data(data)?;
            }
            let record = self.train_step(data)?;
            taken += 1;
            if let Some(log) = opts.log.as_mut() {
                log(&record);
            }
            let c = &self.state.config;
            if let Some(dir) = &opts.checkpoint_dir {
                if c.checkpoint_interval > 0 && self.state.step.is_multiple_of(c.checkpoint_interval) {
                    let name = format!("ckpt-{}-{:07}.bin", self.state.phase.as_str(), self.state.step);
                    self.save(&dir.join(name))?;
                }
            }
        }
        Ok(())
    }

    /// One optimizer step of the current phase.
    pub fn train_step(&mut self, data: &TaskData) -> Result<MetricsRecord> {
        let phase = self.state.phase;
        let step = self.state.step;
        let cfg = self.state.config.clone();
        let (task, sched) = match phase {
            Phase::Stage1 => (Task::P2t, &cfg.lr),
            Phase::Stage2 => {
                let s = Schedule::new(&cfg.ratios, &cfg.enabled_tasks, rng::derive_seed(cfg.seed, &[phase.key()]))?;
                (s.task_at(step), &cfg.lr)
            }
            Phase::Finetune => (Task::S2t, &cfg.finetune_lr),
            Phase::Done => return Err(Error::Config("training already finished".into())),
        };
        let lr = sched.lr(step + 1);
        let mut batch = compute_batch(&self.model, data, &cfg, task, phase, step)?;
        self.state.ctc_skipped += batch.skipped as u64;

        let mut losses = LossBreakdown::default();
        if batch.count > 0 {
            let mean = batch.loss_sum / batch.count as f64;
            losses = total_loss(&[(task, mean)], &cfg.weights);
            batch.grads.scale(cfg.weights.get(task) / batch.count as f64);
            if !mean.is_finite() || !batch.grads.all_finite() {
                return Err(Error::Divergence { task: format!("{}/{task}", phase.as_str()), step });
            }
            cfg.freeze.apply(&self.model, task, &mut batch.grads)?;
            adam_step(&mut self.model.params, &batch.grads, &mut self.adam, &cfg.adam, lr);
            if !self.model.params.all_finite() {
                return Err(Error::Divergence { task: format!("{}/{task}", phase.as_str()), step });
            }
        }
        losses.diagnostics.ctc_skipped = batch.skipped;
        let mut collapse_alert = false;
        if task == Task::Msp && !batch.predicted.is_empty() {
            let rows: Vec<&[f64]> = batch.predicted.iter().map(Vec::as_slice).collect();
            let marginal = marginal_entropy(&rows);
            let frame = losses::mean_row_entropy(&Matrix::from_rows(&batch.predicted));
            let d = &mut losses.diagnostics;
            d.masked_frames = batch.count;
            d.prediction_entropy = Some(marginal);
            d.frame_entropy = Some(frame);
            d.target_entropy = batch.target_entropy;
            collapse_alert = frame < cfg.collapse_floor(self.model.config.phoneme_vocab);
            if collapse_alert {
                self.state.collapse_alerts += 1;
            }
            let m = &mut self.state.min_prediction_entropy;
            *m = Some(m.map_or(frame, |v| v.min(frame)));
            if let Some(t) = batch.target_entropy {
                self.state.target_entropy_sum += t;
                self.state.msp_steps += 1;
            }
        }

        self.state.step += 1;
        let mut dev = None;
        match phase {
            Phase::Stage1 => {
                self.state.stage1_steps_run = self.state.step;
                if self.state.step.is_multiple_of(cfg.stage1_eval_interval) {
                    dev = dev_loss(&self.model, data, Task::P2t, cfg.dev_utts)?;
                    if let Some(d) = dev {
                        if self.state.stage1_best.is_none_or(|b| d < b) {
                            self.state.stage1_best = Some(d);
                            self.state.stage1_bad_evals = 0;
                        } else {
                            self.state.stage1_bad_evals += 1;
                        }
                    }
                    if self.state.stage1_bad_evals >= cfg.stage1_patience {
                        self.state.step = self.phase_budget();
                    }
                }
            }
            _ => {
                if cfg.eval_interval > 0 && self.state.step.is_multiple_of(cfg.eval_interval) {
                    dev = dev_loss(&self.model, data, Task::S2t, cfg.dev_utts)?;
                }
            }
        }
        Ok(MetricsRecord {
            stage: phase.as_str().to_string(),
            step,
            task: Some(task),
            losses,
            lr,
            dev_loss: dev,
            collapse_alert,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub removed: Vec<Task>,
}

impl AblationVariant {
    pub fn new(removed: &[Task]) -> Self {
        let name = if removed.is_empty() {
            "full".to_string()
        } else {
            let parts: Vec<String> = removed.iter().map(|t| t.as_str().to_uppercase()).collect();
            format!("-{}", parts.join("&"))
        };
        Self { name, removed: removed.to_vec() }
    }
}

/// The full model, every single removal, and the two pair removals.
pub fn standard_variants() -> Vec<AblationVariant> {
    [
        &[][..],
        &[Task::P2t],
        &[Task::Msp],
        &[Task::S2c],
        &[Task::Msp, Task::S2c],
        &[Task::Pp],
        &[Task::S2t],
        &[Task::Pp, Task::S2c],
    ]
    .into_iter()
    .map(AblationVariant::new)
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub removed: Vec<Task>,
    pub dev_ter: Option<f64>,
    /// Dev TER of the pre-trained model before fine-tuning.
    pub dev_ter_no_ft: Option<f64>,
    pub error: Option<String>,
    pub collapse_alerts: u64,
    pub min_prediction_entropy: Option<f64>,
    pub mean_target_entropy: Option<f64>,
    pub stage1_steps_run: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.4}"))
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_table(&self) -> String {
        let mut s =
            String::from("variant\tdev_ter\tdev_ter_no_ft\tcollapse_alerts\tmin_pred_entropy\tmean_target_entropy\tstatus\n");
        for r in &self.rows {
            s += &format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.name,
                fmt_opt(r.dev_ter),
                fmt_opt(r.dev_ter_no_ft),
                r.collapse_alerts,
                fmt_opt(r.min_prediction_entropy),
                fmt_opt(r.mean_target_entropy),
                r.error.as_deref().unwrap_or("ok")
            );
        }
        s
    }
}

/// Pre-trains and fine-tunes one model per variant from the same seeds,
/// then greedy-decodes the dev set. A failing variant is recorded and the
/// rest still run.
pub fn ablate(model_cfg: &ModelConfig, base: &TrainConfig, data: &TaskData, variants: &[AblationVariant]) -> Result<AblationReport> {
    let mut report = AblationReport::default();
    for v in variants {
        let cfg = base.without(&v.removed);
        cfg.validate()?;
        let dev = &data.paired_dev[..base.dev_utts.min(data.paired_dev.len())];
        let mut row = AblationRow {
            name: v.name.clone(),
            removed: v.removed.clone(),
            dev_ter: None,
            dev_ter_no_ft: None,
            error: None,
            collapse_alerts: 0,
            min_prediction_entropy: None,
            mean_target_entropy: None,
            stage1_steps_run: 0,
        };
        let result = (|| -> Result<()> {
            let mut t = Trainer::pretrain(Model::new(fit_model_config(model_cfg, data))?, cfg.clone())?;
            let outcome = t.run(data, &mut RunOptions::default());
            row.collapse_alerts = t.state.collapse_alerts;
            row.min_prediction_entropy = t.state.min_prediction_entropy;
            row.mean_target_entropy = t.state.mean_target_entropy();
            row.stage1_steps_run = t.state.stage1_steps_run;
            outcome?;
            row.dev_ter_no_ft = Some(greedy_ter(&t.model, dev, cfg.max_decode_len)?);
            let mut ft = Trainer::finetune(t.model, cfg.clone())?;
            ft.run(data, &mut RunOptions::default())?;
            row.dev_ter = Some(greedy_ter(&ft.model, dev, cfg.max_decode_len)?);
            Ok(())
        })();
        if let Err(e) = result {
            log::warn!("ablation variant {} failed: {e}", v.name);
            row.error = Some(e.to_string());
        }
        report.rows.push(row);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;
    use crate::data_synth::{synth_corpus, SyntheticCorpusConfig};
    use crate::pseudo_codes::{fit_pseudo_coder, CoderConfig};

    fn tiny_data() -> TaskData {
        let corpus = synth_corpus(&SyntheticCorpusConfig {
            n_text_utts: 200,
            n_unlabeled_speech_utts: 60,
            n_paired_utts: 60,
            text_vocab_size: 12,
            feature_dim: 6,
            text_len: [2, 4],
            ..SyntheticCorpusConfig::default()
        })
        .unwrap();
        let speech: Vec<&Matrix> = corpus.utterances.iter().filter_map(|u| u.features.as_ref()).collect();
        let coder = fit_pseudo_coder(
            &speech,
            &CoderConfig { teacher_dim: 6, clusters: 8, bpe_vocab: 14, ..CoderConfig::default() },
        )
        .unwrap();
        TaskData::from_corpus(&corpus, Some(&coder)).unwrap()
    }

    fn tiny_model(data: &TaskData) -> Model {
        let cfg = ModelConfig {
            feature_dim: 6,
            model_dim: 16,
            ffn_dim: 32,
            heads: 2,
            layers_speech_enc: 1,
            layers_shared_enc: 1,
            layers_dec: 1,
            ..ModelConfig::default()
        };
        Model::new(fit_model_config(&cfg, data)).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            stage1_steps: 4,
            stage1_eval_interval: 2,
            stage2_steps: 12,
            finetune_steps: 3,
            eval_interval: 4,
            batch: BatchSizes { msp: 3, pp: 3, s2c: 3, p2t: 3, s2t: 3 },
            dev_utts: 4,
            ..TrainConfig::default()
        }
    }

    fn counts(tasks: &[Task]) -> HashMap<Task, usize> {
        let mut m = HashMap::new();
        for &t in tasks {
            *m.entry(t).or_default() += 1;
        }
        m
    }

    #[test]
    fn every_cycle_window_has_exact_counts() {
        let s = Schedule::new(&TaskRatios::default(), &Task::ALL, 9).unwrap();
        assert_eq!(s.cycle_len(), 12);
        let seq = s.take(12 * 40);
        let expect = HashMap::from([(Task::Msp, 4), (Task::S2c, 4), (Task::P2t, 2), (Task::Pp, 1), (Task::S2t, 1)]);
        for w in seq.chunks(12) {
            assert_eq!(counts(w), expect);
        }
        let cycles: Vec<_> = seq.chunks(12).collect();
        assert!(cycles.windows(2).any(|p| p[0] != p[1]), "order should vary between cycles");
    }

    #[test]
    fn schedule_edge_cases() {
        let one = Schedule::new(&TaskRatios::default(), &[Task::Pp], 0).unwrap();
        assert!(one.take(50).iter().all(|&t| t == Task::Pp));
        let ratios = TaskRatios { msp: 2, pp: 1, s2c: 0, p2t: 0, s2t: 0 };
        let c = counts(&Schedule::new(&ratios, &Task::ALL, 3).unwrap().take(999));
        assert_eq!((c[&Task::Msp], c[&Task::Pp]), (666, 333));
        assert!(Schedule::new(&ratios, &[Task::S2t], 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { enabled_tasks: vec![], ..TrainConfig::default() }.validate().is_err());
        let zero = TrainConfig { enabled_tasks: vec![Task::S2c], ratios: TaskRatios { s2c: 0, ..TaskRatios::default() }, ..TrainConfig::default() };
        assert!(zero.validate().is_err());
        let names: Vec<_> = standard_variants().into_iter().map(|v| v.name).collect();
        assert_eq!(names, ["full", "-P2T", "-MSP", "-S2C", "-MSP&S2C", "-PP", "-S2T", "-PP&S2C"]);
    }

    fn one_step(task: Task) -> (Model, Model) {
        let data = tiny_data();
        let model = tiny_model(&data);
        let cfg = TrainConfig { enabled_tasks: vec![task], stage2_steps: 1, ..tiny_cfg() };
        let mut t = Trainer::start(model.clone(), cfg, Phase::Stage2).unwrap();
        let rec = t.train_step(&data).unwrap();
        assert_eq!(rec.task, Some(task));
        assert!(rec.losses.get(task).unwrap() > 0.0);
        (model, t.model)
    }

    #[test]
    fn msp_step_keeps_phoneme_table() {
        let (before, after) = one_step(Task::Msp);
        assert_eq!(before.phoneme_embedding(), after.phoneme_embedding());
        assert_ne!(before.params, after.params);
    }

    #[test]
    fn pp_and_p2t_steps_move_phoneme_table() {
        for task in [Task::Pp, Task::P2t] {
            let (before, after) = one_step(task);
            assert_ne!(before.phoneme_embedding(), after.phoneme_embedding(), "{task}");
        }
    }

    #[test]
    fn zero_steps_change_nothing() {
        let data = tiny_data();
        let model = tiny_model(&data);
        let cfg = TrainConfig { stage1_steps: 0, stage2_steps: 0, ..tiny_cfg() };
        let mut t = Trainer::pretrain(model.clone(), cfg).unwrap();
        t.run(&data, &mut RunOptions::default()).unwrap();
        assert!(t.is_done());
        assert_eq!(t.model.params, model.params);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = tiny_data();
        let cfg = tiny_cfg();
        let mut full = Trainer::pretrain(tiny_model(&data), cfg.clone()).unwrap();
        let mut log_full = Vec::new();
        full.run(&data, &mut RunOptions { log: Some(&mut |r: &MetricsRecord| log_full.push(r.to_json_line())), ..Default::default() })
            .unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.bin");
        let mut part = Trainer::pretrain(tiny_model(&data), cfg).unwrap();
        let mut log_part = Vec::new();
        part.run(&data, &mut RunOptions { max_steps: Some(7), log: Some(&mut |r: &MetricsRecord| log_part.push(r.to_json_line())), ..Default::default() })
            .unwrap();
        part.save(&path).unwrap();
        drop(part);
        let mut resumed = Trainer::resume(&path).unwrap();
        resumed
            .run(&data, &mut RunOptions { log: Some(&mut |r: &MetricsRecord| log_part.push(r.to_json_line())), ..Default::default() })
            .unwrap();
        assert_eq!(resumed.model.params, full.model.params);
        assert_eq!(resumed.adam, full.adam);
        assert_eq!(resumed.state, full.state);
        assert_eq!(log_part, log_full);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let data = tiny_data();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let mut t = Trainer::pretrain(tiny_model(&data), tiny_cfg()).unwrap();
                t.run(&data, &mut RunOptions { max_steps: Some(8), ..Default::default() }).unwrap();
                t.model.params
            })
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn s2c_without_codes_names_the_missing_stage() {
        let mut data = tiny_data();
        for s in &mut data.speech {
            s.codes.clear();
        }
        let cfg = TrainConfig { enabled_tasks: vec![Task::S2c], ..tiny_cfg() };
        let mut t = Trainer::pretrain(tiny_model(&data), cfg).unwrap();
        let err = t.run(&data, &mut RunOptions::default()).unwrap_err();
        assert!(err.to_string().contains("pseudo-codes"), "{err}");
    }

    #[test]
    fn ablation_runs_every_variant() {
        let data = tiny_data();
        let cfg = TrainConfig { stage2_steps: 4, finetune_steps: 2, ..tiny_cfg() };
        let variants = vec![AblationVariant::new(&[]), AblationVariant::new(&[Task::P2t])];
        let report = ablate(&tiny_model(&data).config, &cfg, &data, &variants).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!(report.rows.iter().all(|r| r.dev_ter.is_some() && r.error.is_none()));
        assert_eq!(report.row("-P2T").unwrap().stage1_steps_run, 0);
        assert!(report.row("full").unwrap().stage1_steps_run > 0);
        assert!(report.to_table().lines().count() == 3);
    }

    proptest::proptest! {
        #[test]
        fn every_cycle_matches_the_ratios(seed in 0u64..1000, ratios in proptest::collection::vec(0u32..5, 5), cycles in 1u64..20) {
            let r = TaskRatios { msp: ratios[0], pp: ratios[1], s2c: ratios[2], p2t: ratios[3], s2t: ratios[4] };
            match Schedule::new(&r, &Task::ALL, seed) {
                Err(_) => proptest::prop_assert!(ratios.iter().all(|&x| x == 0)),
                Ok(s) => {
                    let n = s.cycle_len();
                    proptest::prop_assert_eq!(n as u32, ratios.iter().sum::<u32>());
                    for w in s.take(cycles * n as u64).chunks(n) {
                        for t in Task::ALL {
                            proptest::prop_assert_eq!(w.iter().filter(|&&x| x == t).count() as u32, *r.get(t));
                        }
                    }
                }
            }
        }
    }
}
