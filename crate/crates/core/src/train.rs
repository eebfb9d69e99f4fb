//! Supervised fine-tuning of the adapter parameters, plus the seeded
//! 24-trial random hyperparameter search.
//!
//! The training loop streams `epochs` shuffled passes over the (optionally
//! subsampled) TRAIN split as one sequence of examples, chunks it into
//! micro-batches of `batch_size`, and takes one Adam step per `grad_accum`
//! micro-batches, averaging their gradients. Accumulation groups may cross
//! epoch boundaries, which makes the optimizer-step count exactly
//! ceil(examples * epochs / (batch_size * grad_accum)).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{cot_flags_for, Corpus, CotTarget, EmailRecord, Label};
use crate::error::{Error, Result};
use crate::eval::{encode_prompt, evaluate};
use crate::model::{Grads, Model, ModelConfig, TrainTarget};
use crate::rng::{subseed, Rng};
use crate::tensor::Mat;
use crate::tokenizer::{encode, TokenSeq, Vocab, CLS_LEGIT, CLS_SPAM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Scheduler {
    Cosine,
    Linear,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub scheduler: Scheduler,
    pub peak_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub lora_rank: usize,
    pub data_fraction: f64,
    /// Decoupled weight decay on the adapters; the paper never states a
    /// value, so the default is 0.
    pub weight_decay: f64,
    /// Residual dropout probability; default 0 for the same reason.
    pub dropout: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// The configuration selected for the main experiments: 3 epochs at a
    /// constant peak learning rate of 1e-4, rank 16, micro-batch 2 with 8
    /// accumulation steps, 100% of the training data.
    pub fn selected_default(seed: u64) -> TrainConfig {
        TrainConfig {
            scheduler: Scheduler::Constant,
            peak_lr: 1e-4,
            epochs: 3,
            batch_size: 2,
            grad_accum: 8,
            lora_rank: 16,
            data_fraction: 1.0,
            weight_decay: 0.0,
            dropout: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.grad_accum == 0 || self.lora_rank == 0 {
            return Err(Error::new(
                "train",
                "TRAIN_BAD_CONFIG",
                "batch_size, grad_accum and lora_rank must be positive",
            ));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::new(
                "train",
                "TRAIN_BAD_CONFIG",
                format!("data_fraction must be in (0, 1], got {}", self.data_fraction),
            ));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::new("train", "TRAIN_BAD_CONFIG", "peak_lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::new("train", "TRAIN_BAD_CONFIG", "dropout must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Learning rate at `step` of `total_steps` under the configured schedule.
pub fn lr_at(cfg: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    debug_assert!(total_steps >= 1 && step <= total_steps);
    let progress = step as f64 / total_steps as f64;
    match cfg.scheduler {
        Scheduler::Constant => cfg.peak_lr,
        Scheduler::Linear => cfg.peak_lr * (1.0 - progress),
        Scheduler::Cosine => cfg.peak_lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TargetFormat {
    /// The single label token.
    Label,
    /// Next-token prediction over the serialized chain-of-thought target.
    Cot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub curve: Vec<CurvePoint>,
    pub optimizer_steps: usize,
    pub examples_used: usize,
}

/// Plain Adam over the adapter parameters (beta 0.9/0.999, eps 1e-8),
/// with optional decoupled weight decay.
pub struct Adam {
    m: Grads,
    v: Grads,
    t: u64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new(model: &Model) -> Adam {
        Adam {
            m: Grads::zeros_like(model),
            v: Grads::zeros_like(model),
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Grads, lr: f64, weight_decay: f64) {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(BETA1, self.t as f64);
        let bc2 = 1.0 - libm::pow(BETA2, self.t as f64);
        let mut update = |p: &mut Mat, g: &Mat, m: &mut Mat, v: &mut Mat| {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = BETA1 * m.data[i] + (1.0 - BETA1) * gi;
                v.data[i] = BETA2 * v.data[i] + (1.0 - BETA2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                let p_i = &mut p.data[i];
                *p_i -= lr * (mhat / (libm::sqrt(vhat) + ADAM_EPS) + weight_decay * *p_i);
            }
        };
        for (li, layer) in model.layers.iter_mut().enumerate() {
            let gm = &grads.layers[li];
            let mm = &mut self.m.layers[li];
            let vm = &mut self.v.layers[li];
            update(&mut layer.lora_q.a, &gm.q.a, &mut mm.q.a, &mut vm.q.a);
            update(&mut layer.lora_q.b, &gm.q.b, &mut mm.q.b, &mut vm.q.b);
            update(&mut layer.lora_v.a, &gm.v.a, &mut mm.v.a, &mut vm.v.a);
            update(&mut layer.lora_v.b, &gm.v.b, &mut mm.v.b, &mut vm.v.b);
        }
    }
}

/// Builds the (input sequence, target) pair for one record.
pub fn build_train_item(
    vocab: &Vocab,
    max_len: usize,
    record: &EmailRecord,
    format: TargetFormat,
) -> Result<(TokenSeq, TrainTarget)> {
    match format {
        TargetFormat::Label => {
            let enc = encode_prompt(vocab, &record.text, max_len, 0);
            Ok((enc.seq, TrainTarget::Label(record.label)))
        }
        TargetFormat::Cot => {
            let flags = cot_flags_for(&record.text);
            let target = CotTarget::new(flags, record.label)
                .expect("rule-based flags are unique by construction");
            let serialized = target.serialize();
            let mut cot_ids = encode(vocab, &serialized, usize::MAX).ids;
            cot_ids.remove(0); // BOS
            // The final label word becomes the dedicated label token, so
            // first-token confidence works identically in both formats.
            let cls = match record.label {
                Label::Spam => CLS_SPAM,
                Label::Legit => CLS_LEGIT,
            };
            *cot_ids.last_mut().expect("serialization is never empty") = cls;

            let enc = encode_prompt(vocab, &record.text, max_len, cot_ids.len());
            let mut seq = enc.seq;
            let prompt_len = seq.len();
            let mut targets = Vec::with_capacity(cot_ids.len());
            for (j, &tok) in cot_ids.iter().enumerate() {
                targets.push((prompt_len - 1 + j, tok));
            }
            for &tok in &cot_ids[..cot_ids.len() - 1] {
                seq.ids.push(tok);
                seq.offsets.push((0, 0));
            }
            Ok((seq, TrainTarget::Tokens(targets)))
        }
    }
}

/// Fine-tunes the adapters on the corpus TRAIN split. Only adapter
/// parameters change; the loss curve records one point per optimizer step.
pub fn train(
    model: &mut Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
    format: TargetFormat,
) -> Result<TrainRun> {
    cfg.validate()?;
    let train_recs: Vec<&EmailRecord> = corpus.train_records().collect();
    if train_recs.is_empty() {
        return Err(Error::new(
            "train",
            "TRAIN_EMPTY",
            format!("corpus '{}' has no TRAIN records", corpus.name),
        ));
    }
    // Seeded subsample of the TRAIN split only.
    let k = ((cfg.data_fraction * train_recs.len() as f64) as usize).max(1);
    let mut sub_rng = Rng::seed_from(subseed(cfg.seed, "subsample"));
    let mut selected = sub_rng.sample_indices(train_recs.len(), k);
    selected.sort_unstable();

    if cfg.epochs == 0 {
        return Ok(TrainRun {
            curve: Vec::new(),
            optimizer_steps: 0,
            examples_used: k,
        });
    }

    // One stream of examples across all epochs, shuffled per epoch.
    let mut stream: Vec<usize> = Vec::with_capacity(k * cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order = selected.clone();
        let mut rng = Rng::seed_from(subseed(cfg.seed, &format!("epoch/{epoch}")));
        rng.shuffle(&mut order);
        stream.extend(order);
    }

    let micro_total = stream.len().div_ceil(cfg.batch_size);
    let total_steps = micro_total.div_ceil(cfg.grad_accum);
    let mut adam = Adam::new(model);
    let mut drop_rng = Rng::seed_from(subseed(cfg.seed, "dropout"));
    let mut curve = Vec::with_capacity(total_steps);

    let mut step = 0usize;
    let mut micro_in_group = 0usize;
    let mut group_grads = Grads::zeros_like(model);
    let mut group_loss = 0.0f64;
    for micro in stream.chunks(cfg.batch_size) {
        let batch: Vec<(TokenSeq, TrainTarget)> = micro
            .iter()
            .map(|&i| build_train_item(&model.vocab, model.cfg.max_len, train_recs[i], format))
            .collect::<Result<_>>()?;
        let (loss, grads) = model.loss_and_grads_with(
            &batch,
            cfg.dropout,
            if cfg.dropout > 0.0 { Some(&mut drop_rng) } else { None },
        )?;
        group_grads.add_assign(&grads);
        group_loss += loss;
        micro_in_group += 1;
        let group_done = micro_in_group == cfg.grad_accum;
        let stream_done = step * cfg.grad_accum + micro_in_group == micro_total;
        if group_done || stream_done {
            // Average, not sum, so the effective learning rate does not
            // depend on grad_accum.
            group_grads.scale(1.0 / micro_in_group as f64);
            let lr = lr_at(cfg, step, total_steps);
            adam.step(model, &group_grads, lr, cfg.weight_decay);
            curve.push(CurvePoint {
                step,
                lr,
                loss: group_loss / micro_in_group as f64,
            });
            step += 1;
            micro_in_group = 0;
            group_grads = Grads::zeros_like(model);
            group_loss = 0.0;
        }
    }
    debug_assert_eq!(step, total_steps);
    Ok(TrainRun {
        curve,
        optimizer_steps: step,
        examples_used: k,
    })
}

// ---------------------------------------------------------------------------
// Random hyperparameter search
// ---------------------------------------------------------------------------

pub const SCHEDULER_CHOICES: [Scheduler; 3] = [Scheduler::Cosine, Scheduler::Linear, Scheduler::Constant];
pub const PEAK_LR_CHOICES: [f64; 3] = [5e-5, 1e-4, 2e-4];
pub const EPOCH_CHOICES: [usize; 3] = [2, 3, 5];
pub const BATCH_CHOICES: [usize; 2] = [1, 2];
pub const GRAD_ACCUM_CHOICES: [usize; 2] = [8, 16];
pub const LORA_RANK_CHOICES: [usize; 4] = [8, 16, 32, 64];
pub const DATA_FRACTION_CHOICES: [f64; 3] = [0.25, 0.5, 1.0];

/// Draws one configuration by independent uniform choices from the
/// discrete search lists, seeded per (master_seed, trial_index).
pub fn sample_config(master_seed: u64, trial_index: usize) -> TrainConfig {
    let mut rng = Rng::seed_from(subseed(master_seed, &format!("trial/{trial_index}")));
    TrainConfig {
        scheduler: *rng.choose(&SCHEDULER_CHOICES),
        peak_lr: *rng.choose(&PEAK_LR_CHOICES),
        epochs: *rng.choose(&EPOCH_CHOICES),
        batch_size: *rng.choose(&BATCH_CHOICES),
        grad_accum: *rng.choose(&GRAD_ACCUM_CHOICES),
        lora_rank: *rng.choose(&LORA_RANK_CHOICES),
        data_fraction: *rng.choose(&DATA_FRACTION_CHOICES),
        weight_decay: 0.0,
        dropout: 0.0,
        seed: subseed(master_seed, &format!("trial-data/{trial_index}")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub config: TrainConfig,
    pub f1: f64,
    pub accuracy: f64,
    pub wall_time_ms: u64,
    pub trial_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub trials: Vec<TrialResult>,
    pub selected: TrainConfig,
    pub selected_index: usize,
}

/// Sweep plumbing with an injectable trial runner; the runner returns
/// (weighted F1, accuracy, wall-clock ms) for a sampled configuration.
pub fn sweep_with(
    n_trials: usize,
    master_seed: u64,
    mut run_trial: impl FnMut(usize, &TrainConfig) -> Result<(f64, f64, u64)>,
) -> Result<SweepOutcome> {
    if n_trials == 0 {
        return Err(Error::new("train", "TRAIN_BAD_CONFIG", "n_trials must be at least 1"));
    }
    let mut trials = Vec::with_capacity(n_trials);
    for i in 0..n_trials {
        let cfg = sample_config(master_seed, i);
        let (f1, accuracy, wall_time_ms) = run_trial(i, &cfg)?;
        trials.push(TrialResult {
            config: cfg,
            f1,
            accuracy,
            wall_time_ms,
            trial_index: i,
        });
    }
    // Best F1 wins; ties go to the lowest trial index, which the forward
    // scan gives for free with a strict comparison.
    let mut best = 0usize;
    for (i, t) in trials.iter().enumerate() {
        if t.f1 > trials[best].f1 {
            best = i;
        }
    }
    Ok(SweepOutcome {
        selected: trials[best].config.clone(),
        selected_index: best,
        trials,
    })
}

/// The full 24-trial random search: each trial trains a fresh model (same
/// frozen base, trial-specific rank) on the corpus TRAIN split and scores
/// weighted F1 on the hold-out TEST split. `timer`, when provided, returns
/// monotonic milliseconds and is sampled around each trial.
pub fn random_sweep(
    base_cfg: &ModelConfig,
    vocab: &Vocab,
    corpus: &Corpus,
    n_trials: usize,
    master_seed: u64,
    mut timer: Option<&mut dyn FnMut() -> u64>,
) -> Result<SweepOutcome> {
    let test_recs: Vec<&EmailRecord> = corpus.test_records().collect();
    if test_recs.is_empty() {
        return Err(Error::new(
            "train",
            "TRAIN_EMPTY",
            "sweep corpus has no TEST split to evaluate on",
        ));
    }
    sweep_with(n_trials, master_seed, |i, cfg| {
        let started = timer.as_mut().map(|t| t());
        let mut model_cfg = base_cfg.clone();
        model_cfg.lora_rank = cfg.lora_rank;
        let mut model = Model::init(model_cfg, vocab.clone())?;
        train(&mut model, corpus, cfg, TargetFormat::Label)?;
        let report = evaluate(&model, &test_recs)?;
        let elapsed = match (started, timer.as_mut()) {
            (Some(s), Some(t)) => t() - s,
            _ => 0,
        };
        let _ = i;
        Ok((report.weighted_f1, report.accuracy, elapsed))
    })
}
