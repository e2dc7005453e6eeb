//! Teacher-forcing training, checkpoints, greedy decoding and ablations.

mod ablation;
mod decode;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use ablation::{ablation_table, run_ablation, AblationRow, Variant};
pub use decode::{greedy_decode, greedy_decode_with, ModelScorer, NextTokenScorer, SummaryHypothesis};

use crate::config::{Config, TrainConfig};
use crate::corpus::Vocabulary;
use crate::model::{Example, Model};
use crate::tensor::{adam_step, AdamState, Checkpoint, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

/// Teacher-forced loss of one target.
#[derive(Clone, Copy, Debug)]
pub struct Loss {
    /// Mean NLL per non-pad token (the optimized quantity).
    pub mean: Var,
    /// Summed NLL.
    pub sum: f64,
    pub tokens: usize,
}

/// `logits[t]` scores `targets[t]`; pad targets are skipped.
pub fn compute_loss(tape: &mut Tape, logits: Var, targets: &[usize], pad: usize) -> Result<Loss> {
    let tokens = targets.iter().filter(|&&t| t != pad).count();
    if tokens == 0 {
        return Err(Error::Invalid("target has only padding".into()));
    }
    let sum = tape.cross_entropy_sum(logits, targets, Some(pad))?;
    let value = tape.value(sum).item()?;
    let mean = tape.scale(sum, 1.0 / tokens as f64);
    Ok(Loss {
        mean,
        sum: value,
        tokens,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Base,
    New,
}

/// Linear warmup from 0 at step 0 to the group rate, then constant.
pub fn lr_at(step: usize, group: ParamGroup, cfg: &TrainConfig) -> f64 {
    let (lr, warmup) = match group {
        ParamGroup::Base => (cfg.base_lr, cfg.base_warmup_steps),
        ParamGroup::New => (cfg.new_module_lr, cfg.new_warmup_steps),
    };
    if warmup == 0 {
        return lr;
    }
    lr * (step as f64 / warmup as f64).min(1.0)
}

/// Adam state for the two parameter groups.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub base: AdamState,
    pub new: AdamState,
}

impl Optimizer {
    pub fn new(model: &Model) -> Self {
        let (base, new) = model.param_groups();
        let t = &model.config.train;
        Self {
            base: AdamState::new(&model.params, base, t.base_lr),
            new: AdamState::new(&model.params, new, t.new_module_lr),
        }
    }
}

/// Mean NLL per token over a batch, with the summed NLL and token count.
pub fn batch_loss(
    model: &Model,
    tape: &mut Tape,
    params: &ParamStore,
    batch: &[&Example],
) -> Result<(Var, f64, usize)> {
    let mut total: Option<Var> = None;
    let mut tokens = 0;
    for ex in batch {
        let (nll, n) = model.example_nll(tape, params, ex)?;
        tokens += n;
        total = Some(match total {
            Some(t) => tape.add(t, nll)?,
            None => nll,
        });
    }
    let total = total.ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let sum = tape.value(total).item()?;
    Ok((tape.scale(total, 1.0 / tokens as f64), sum, tokens))
}

/// Dropout seed of a training step.
fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (step as u64).wrapping_add(1)
}

/// Forward, backward, global-norm clipping and one Adam update per group at
/// the scheduled rates. Returns the batch loss before the update.
pub fn train_step(model: &mut Model, batch: &[&Example], opt: &mut Optimizer, step: usize) -> Result<f64> {
    let cfg = model.config.train.clone();
    model.params.zero_grad();
    let mut tape = Tape::training(step_seed(cfg.seed, step));
    let (loss, _, _) = batch_loss(model, &mut tape, &model.params, batch)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { step, loss: value });
    }
    tape.backward_into(loss, &mut model.params)?;
    model.params.clip_grad_norm(cfg.grad_clip_norm);
    opt.base.lr = lr_at(step, ParamGroup::Base, &cfg);
    opt.new.lr = lr_at(step, ParamGroup::New, &cfg);
    adam_step(&mut model.params, &mut opt.base)?;
    adam_step(&mut model.params, &mut opt.new)?;
    model.params.zero_grad();
    Ok(value)
}

/// Mean NLL per token over `examples` without dropout.
pub fn evaluate_loss(model: &Model, examples: &[Example]) -> Result<f64> {
    let mut sum = 0.0;
    let mut tokens = 0;
    for ex in examples {
        let mut tape = Tape::new();
        let (nll, n) = model.example_nll(&mut tape, &model.params, ex)?;
        sum += tape.value(nll).item()?;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::Invalid("no target tokens".into()));
    }
    Ok(sum / tokens as f64)
}

/// Example indices for each step: consecutive chunks of a stream of
/// per-epoch shuffles.
#[derive(Clone, Debug)]
pub struct BatchSchedule {
    n: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
    pending: Vec<usize>,
}

impl BatchSchedule {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            n,
            batch_size: batch_size.min(n).max(1),
            rng: ChaCha8Rng::seed_from_u64(seed),
            pending: Vec::new(),
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.pending.is_empty() {
                self.pending = (0..self.n).collect();
                self.pending.shuffle(&mut self.rng);
                self.pending.reverse();
            }
            out.push(self.pending.pop().expect("refilled"));
        }
        out
    }
}

/// One train-report line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRecord {
    pub step: usize,
    pub loss: f64,
    pub alphas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Batch loss of every step, index `i` for step `i + 1`.
    pub losses: Vec<f64>,
    /// Step 0 holds the initial corpus loss and gates; later records hold the
    /// batch loss of each eval step and of the final step.
    pub records: Vec<ReportRecord>,
    /// Corpus loss without dropout after the last step.
    pub final_loss: f64,
    /// SHA-256 of the final parameters.
    pub params_hash: String,
}

/// Runs `model.config.train.max_steps` steps over `examples`.
pub fn train(model: &mut Model, examples: &[Example]) -> Result<TrainReport> {
    train_with(model, examples, |_| {})
}

/// Like [`train`], calling `on_record` for every report record as it is made.
pub fn train_with(
    model: &mut Model,
    examples: &[Example],
    mut on_record: impl FnMut(&ReportRecord),
) -> Result<TrainReport> {
    if examples.is_empty() {
        return Err(Error::Invalid("no training examples".into()));
    }
    let cfg = model.config.train.clone();
    let mut opt = Optimizer::new(model);
    let mut schedule = BatchSchedule::new(examples.len(), cfg.batch_size, cfg.seed);
    let mut records = vec![ReportRecord {
        step: 0,
        loss: evaluate_loss(model, examples)?,
        alphas: model.alphas(),
    }];
    on_record(&records[0]);
    let mut losses = Vec::with_capacity(cfg.max_steps);
    for step in 1..=cfg.max_steps {
        let batch: Vec<&Example> = schedule.next_batch().into_iter().map(|i| &examples[i]).collect();
        let loss = train_step(model, &batch, &mut opt, step)?;
        losses.push(loss);
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let rec = ReportRecord {
                step,
                loss,
                alphas: model.alphas(),
            };
            log::info!("step {step} loss {loss:.4} alphas {:?}", rec.alphas);
            on_record(&rec);
            records.push(rec);
        }
    }
    Ok(TrainReport {
        losses,
        records,
        final_loss: evaluate_loss(model, examples)?,
        params_hash: model.params.content_hash(),
    })
}

pub const CONFIG_KEY: &str = "config";
pub const VOCAB_KEY: &str = "vocab";

/// Archive with the config text and the vocabulary embedded.
pub fn make_checkpoint(model: &Model, vocab: &Vocabulary, step: u64) -> Checkpoint {
    let vocab_json = serde_json::to_string(vocab.tokens()).expect("strings serialize");
    Checkpoint::from_store(&model.params, model.config.hash(), step)
        .with_metadata(CONFIG_KEY, model.config.to_text())
        .with_metadata(VOCAB_KEY, vocab_json)
}

/// Rebuilds the model and vocabulary stored by [`make_checkpoint`].
pub fn restore_checkpoint(ck: &Checkpoint) -> Result<(Model, Vocabulary)> {
    let text = ck
        .metadata(CONFIG_KEY)
        .ok_or_else(|| Error::Invalid("checkpoint has no config section".into()))?;
    let config = Config::parse(text)?;
    if config.hash() != ck.config_hash {
        return Err(Error::Invalid("checkpoint config hash mismatch".into()));
    }
    let tokens: Vec<String> = ck
        .metadata(VOCAB_KEY)
        .map(serde_json::from_str)
        .transpose()
        .map_err(|e| Error::Invalid(format!("checkpoint vocabulary: {e}")))?
        .ok_or_else(|| Error::Invalid("checkpoint has no vocabulary section".into()))?;
    let vocab = Vocabulary::from_tokens(tokens)?;
    let mut model = Model::init(&config, vocab.len(), 0)?;
    ck.restore_into(&mut model.params)?;
    Ok((model, vocab))
}

/// Copies gate values without touching anything else.
pub fn set_alphas(model: &mut Model, values: &[f64]) {
    for (id, v) in model.alpha_ids().into_iter().zip(values) {
        model.params.get_mut(id).value = Tensor::scalar(*v);
    }
}
