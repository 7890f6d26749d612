//! Joint objective, alternating per-task optimization with group freezing,
//! SGD with gradient-norm clipping, checkpointing and the metrics log.

pub mod gradcheck;

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{save_checkpoint, CheckpointError, CheckpointMeta};
use crate::datasets::{
    build_char_vocab, build_vocab, make_mrc_batches, make_slu_batches, DataError, LabelMap,
    MrcBatch, MrcExample, SluBatch, SluExample,
};
use crate::evaluation::{evaluate_squad, intent_accuracy, slot_f1, EvalError};
use crate::model::JointModel;
use crate::mrc_head::{decode_batch, render_answer, InjectScope, MrcError};
use crate::params::{ParamGroup, ParamStore};
use crate::slu_head::{predict_slot_tags, sentence_intents, SluError};
use crate::tensor::{fl, Scalar, Tape};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss (mrc={mrc}, intent={intent}, slot={slot})")]
    NonFinite { mrc: f64, intent: f64, slot: f64 },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Mrc(#[from] MrcError),
    #[error(transparent)]
    Slu(#[from] SluError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// All hyperparameters of a run. Defaults follow the reference setup:
/// 512-wide word embeddings, 256 hidden units, 11 epochs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size_mrc: usize,
    pub batch_size_slu: usize,
    pub seed: u64,
    pub h: usize,
    pub d_word: usize,
    pub d_char: usize,
    pub char_filters: usize,
    pub kernel_width: usize,
    pub d_attn: usize,
    pub d_ctx: usize,
    pub inject_scope: InjectScope,
    pub null_threshold: f64,
    pub max_answer_len: usize,
    pub detach_injection: bool,
    pub max_passage_len: usize,
    pub min_count: usize,
    pub grad_clip: f64,
    pub warm_start_slu: usize,
    pub glove: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.5,
            epochs: 11,
            lr: 1e-3,
            batch_size_mrc: 32,
            batch_size_slu: 32,
            seed: 42,
            h: 256,
            d_word: 512,
            d_char: 16,
            char_filters: 100,
            kernel_width: 5,
            d_attn: 256,
            d_ctx: 0,
            inject_scope: InjectScope::Both,
            null_threshold: 0.0,
            max_answer_len: 30,
            detach_injection: false,
            max_passage_len: 400,
            min_count: 1,
            grad_clip: 5.0,
            warm_start_slu: 0,
            glove: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size_mrc", self.batch_size_mrc),
            ("batch_size_slu", self.batch_size_slu),
            ("h", self.h),
            ("d_word", self.d_word),
            ("d_char", self.d_char),
            ("char_filters", self.char_filters),
            ("kernel_width", self.kernel_width),
            ("max_answer_len", self.max_answer_len),
            ("max_passage_len", self.max_passage_len),
            ("min_count", self.min_count),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(format!("{name} must be >= 1"));
            }
        }
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err("alpha must be finite and >= 0".into());
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err("lr must be finite and > 0".into());
        }
        if self.grad_clip <= 0.0 {
            return Err("grad_clip must be > 0".into());
        }
        Ok(())
    }
}

/// The two alternating tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Mrc,
    Slu,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Mrc => "mrc",
            Task::Slu => "slu",
        }
    }

    /// Parameter groups a step of this task is allowed to update.
    pub fn updated_groups(&self) -> [ParamGroup; 3] {
        match self {
            Task::Mrc => [ParamGroup::Embeddings, ParamGroup::SharedEncoder, ParamGroup::MrcHead],
            Task::Slu => [ParamGroup::Embeddings, ParamGroup::SharedEncoder, ParamGroup::SluDecoders],
        }
    }
}

/// Total objective: `loss_mrc + alpha * (loss_intent + loss_slot)`.
pub fn joint_loss(
    loss_mrc: f64,
    loss_intent: f64,
    loss_slot: f64,
    alpha: f64,
) -> Result<f64, TrainError> {
    if !(loss_mrc.is_finite() && loss_intent.is_finite() && loss_slot.is_finite()) {
        return Err(TrainError::NonFinite { mrc: loss_mrc, intent: loss_intent, slot: loss_slot });
    }
    Ok(loss_mrc + alpha * (loss_intent + loss_slot))
}

/// Stochastic gradient descent with global gradient-norm clipping.
pub struct Sgd {
    pub lr: f64,
    pub clip: f64,
}

impl Sgd {
    /// Applies one update restricted to `groups`; frozen rows and
    /// non-trainable tensors are left untouched.
    pub fn apply<F: Scalar>(
        &self,
        store: &mut ParamStore<F>,
        grads: &HashMap<usize, ArrayD<F>>,
        groups: &[ParamGroup],
    ) {
        let ids: Vec<usize> = store
            .ids()
            .filter(|&id| groups.contains(&store.group(id)) && store.trainable(id))
            .collect();
        let mut sq_norm = 0.0f64;
        let mut clipped: HashMap<usize, ArrayD<F>> = HashMap::new();
        for &id in &ids {
            let Some(g) = grads.get(&id) else { continue };
            let mut g = g.clone();
            if let Some(row) = store.frozen_row(id) {
                let d = g.shape()[1];
                for j in 0..d {
                    g[[row, j]] = F::zero();
                }
            }
            sq_norm += g.iter().map(|&x| x.to_f64().unwrap().powi(2)).sum::<f64>();
            clipped.insert(id, g);
        }
        let norm = sq_norm.sqrt();
        let scale = if norm > self.clip { self.clip / norm } else { 1.0 };
        let step = fl::<F>(self.lr * scale);
        for (&id, g) in clipped.iter() {
            let p = store.value_mut(id);
            p.zip_mut_with(g, |x, &gx| *x = *x - step * gx);
        }
    }
}

/// One optimization step on an MRC batch. Only the embeddings, shared
/// encoder and MRC head may change.
pub fn train_step_mrc<F: Scalar>(
    model: &mut JointModel<F>,
    batch: &MrcBatch,
    config: &TrainConfig,
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let (start_logits, end_logits) = model.forward_mrc(&mut tape, batch);
    let loss = crate::mrc_head::mrc_loss(
        &mut tape,
        start_logits,
        end_logits,
        &batch.answer_start,
        &batch.answer_end,
        &batch.passage.lengths,
    )?;
    let loss_value = tape.value(loss)[ndarray::IxDyn(&[])].to_f64().unwrap();
    joint_loss(loss_value, 0.0, 0.0, 0.0)?; // finiteness check
    let grads = tape.backward(loss);
    let param_grads = tape.param_grads(&grads);
    Sgd { lr: config.lr, clip: config.grad_clip }.apply(
        &mut model.store,
        &param_grads,
        &Task::Mrc.updated_groups(),
    );
    Ok(loss_value)
}

/// One optimization step on an SLU batch, minimizing
/// `alpha * (loss_intent + loss_slot)`. Only the embeddings, shared encoder
/// and SLU decoders may change.
pub fn train_step_slu<F: Scalar>(
    model: &mut JointModel<F>,
    batch: &SluBatch,
    config: &TrainConfig,
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let (intent_logits, slot_logits, _) = model.forward_slu(&mut tape, batch);
    let (loss_i, loss_s) = crate::slu_head::slu_loss(
        &mut tape,
        intent_logits,
        slot_logits,
        batch,
        model.intents.len(),
        model.slots.len(),
    )?;
    let summed = tape.add(loss_i, loss_s);
    let objective = tape.scale(summed, fl::<F>(config.alpha));
    let li = tape.value(loss_i)[ndarray::IxDyn(&[])].to_f64().unwrap();
    let ls = tape.value(loss_s)[ndarray::IxDyn(&[])].to_f64().unwrap();
    joint_loss(0.0, li, ls, config.alpha)?;
    let grads = tape.backward(objective);
    let param_grads = tape.param_grads(&grads);
    Sgd { lr: config.lr, clip: config.grad_clip }.apply(
        &mut model.store,
        &param_grads,
        &Task::Slu.updated_groups(),
    );
    Ok(li + ls)
}

/// One step-level record of the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub task: String,
    pub loss: f64,
}

/// Epoch-end development metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DevRecord {
    pub epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_em: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intent_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slot_f1: Option<f64>,
}

/// Everything a completed run produced.
pub struct RunSummary {
    pub checkpoints: Vec<PathBuf>,
    pub steps: Vec<StepRecord>,
    pub dev: Vec<DevRecord>,
}

impl RunSummary {
    pub fn last_checkpoint(&self) -> Option<&PathBuf> {
        self.checkpoints.last()
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.display().to_string(), source }
}

/// Builds the joint vocabulary over both corpora plus label maps.
pub fn build_vocabularies(
    mrc: &[MrcExample],
    slu: &[SluExample],
    min_count: usize,
) -> Result<(crate::datasets::Vocabulary, crate::datasets::Vocabulary, LabelMap, LabelMap), DataError>
{
    let mut corpora: Vec<Vec<String>> = Vec::new();
    for ex in mrc {
        corpora.push(ex.passage_tokens.clone());
        corpora.push(ex.question_tokens.clone());
    }
    for ex in slu {
        corpora.push(ex.tokens.clone());
    }
    let word_vocab = build_vocab(&corpora, min_count)?;
    let char_vocab = build_char_vocab(&corpora)?;
    let intents = LabelMap::from_names(slu.iter().map(|e| e.intent.clone()));
    let slots = LabelMap::from_names(slu.iter().flat_map(|e| e.slots.iter().cloned()));
    Ok((word_vocab, char_vocab, intents, slots))
}

/// Answer strings for every example, decoded with the model's thresholds.
pub fn predict_mrc_answers<F: Scalar>(
    model: &JointModel<F>,
    examples: &[MrcExample],
    config: &TrainConfig,
) -> Result<std::collections::BTreeMap<String, String>, TrainError> {
    let batches = make_mrc_batches(
        examples,
        &model.word_vocab,
        &model.char_vocab,
        config.batch_size_mrc,
        0,
        false,
        config.kernel_width,
    );
    let mut out = std::collections::BTreeMap::new();
    for batch in &batches {
        let mut tape = Tape::new();
        let (sl, el) = model.forward_mrc(&mut tape, batch);
        let preds = decode_batch(
            tape.value(sl),
            tape.value(el),
            &batch.passage.lengths,
            &batch.qids,
            config.max_answer_len,
            config.null_threshold,
        )?;
        for (bi, pred) in preds.iter().enumerate() {
            out.insert(pred.qid.clone(), render_answer(pred, &batch.passage.tokens[bi]));
        }
    }
    Ok(out)
}

/// Predicted intent names and repaired slot tags, aligned with `examples`.
pub fn predict_slu_labels<F: Scalar>(
    model: &JointModel<F>,
    examples: &[SluExample],
    config: &TrainConfig,
) -> Result<(Vec<String>, Vec<Vec<String>>), TrainError> {
    let batches = make_slu_batches(
        examples,
        &model.word_vocab,
        &model.char_vocab,
        &model.intents,
        &model.slots,
        config.batch_size_slu,
        0,
        false,
        config.kernel_width,
    );
    let mut intents = Vec::with_capacity(examples.len());
    let mut tags = Vec::with_capacity(examples.len());
    for batch in &batches {
        let mut tape = Tape::new();
        let (il, sl, enc) = model.forward_slu(&mut tape, batch);
        let intent_ids = sentence_intents(tape.value(il), &enc.mask);
        for id in intent_ids {
            intents.push(model.intents.name(id).to_string());
        }
        let mut batch_tags = predict_slot_tags(
            tape.value(sl),
            &batch.utterance.lengths,
            model.slots.names(),
        );
        tags.append(&mut batch_tags);
    }
    Ok((intents, tags))
}

/// Full alternating training loop: for each epoch of the MRC stream, one
/// MRC batch then one SLU batch (the SLU stream recycles; skipped entirely
/// when alpha = 0). Writes one checkpoint per epoch and a line-delimited
/// JSON metrics log under `out_dir`.
pub fn run_training<F: Scalar>(
    model: &mut JointModel<F>,
    config: &TrainConfig,
    out_dir: &Path,
    mrc_train: &[MrcExample],
    slu_train: &[SluExample],
    mrc_dev: Option<&[MrcExample]>,
    slu_dev: Option<&[SluExample]>,
) -> Result<RunSummary, TrainError> {
    assert!(!mrc_train.is_empty(), "run_training: empty MRC dataset");
    assert!(!slu_train.is_empty(), "run_training: empty SLU dataset");
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics =
        std::fs::File::create(&metrics_path).map_err(io_err(&metrics_path))?;

    let meta = CheckpointMeta {
        version: 1,
        config: config.clone(),
        word_vocab: model.word_vocab.clone(),
        char_vocab: model.char_vocab.clone(),
        intents: model.intents.clone(),
        slots: model.slots.clone(),
    };

    let mut slu_stream = SluStream::new(slu_train, model, config);
    let mut steps = Vec::new();
    let mut dev_records = Vec::new();
    let mut checkpoints = Vec::new();
    let mut step = 0usize;

    let mut log_step = |metrics: &mut std::fs::File,
                        steps: &mut Vec<StepRecord>,
                        rec: StepRecord|
     -> Result<(), TrainError> {
        let line = serde_json::to_string(&rec).expect("metrics encode");
        writeln!(metrics, "{line}").map_err(io_err(&metrics_path))?;
        steps.push(rec);
        Ok(())
    };

    if config.alpha > 0.0 {
        for _ in 0..config.warm_start_slu {
            let batch = slu_stream.next(model, config);
            let loss = train_step_slu(model, &batch, config)?;
            step += 1;
            log_step(
                &mut metrics,
                &mut steps,
                StepRecord { step, epoch: 0, task: Task::Slu.name().into(), loss },
            )?;
        }
    }

    for epoch in 1..=config.epochs {
        let mrc_batches = make_mrc_batches(
            mrc_train,
            &model.word_vocab,
            &model.char_vocab,
            config.batch_size_mrc,
            config.seed.wrapping_add(epoch as u64),
            true,
            config.kernel_width,
        );
        for batch in &mrc_batches {
            let loss = train_step_mrc(model, batch, config)?;
            step += 1;
            log_step(
                &mut metrics,
                &mut steps,
                StepRecord { step, epoch, task: Task::Mrc.name().into(), loss },
            )?;
            if config.alpha > 0.0 {
                let slu_batch = slu_stream.next(model, config);
                let loss = train_step_slu(model, &slu_batch, config)?;
                step += 1;
                log_step(
                    &mut metrics,
                    &mut steps,
                    StepRecord { step, epoch, task: Task::Slu.name().into(), loss },
                )?;
            }
        }

        let ckpt = out_dir.join(format!("checkpoint_epoch_{epoch:03}.bin"));
        save_checkpoint(&ckpt, &meta, &model.store)?;
        checkpoints.push(ckpt);

        let mut dev = DevRecord { epoch, dev_em: None, dev_f1: None, intent_acc: None, slot_f1: None };
        if let Some(dev_examples) = mrc_dev {
            let preds = predict_mrc_answers(model, dev_examples, config)?;
            let map: HashMap<String, String> = preds.into_iter().collect();
            let report = evaluate_squad(&map, dev_examples)?;
            dev.dev_em = Some(report.em);
            dev.dev_f1 = Some(report.f1);
        }
        if let Some(dev_examples) = slu_dev {
            let (pred_intents, pred_tags) = predict_slu_labels(model, dev_examples, config)?;
            let gold_i: Vec<usize> = dev_examples
                .iter()
                .map(|e| model.intents.index(&e.intent).unwrap_or(usize::MAX))
                .collect();
            let pred_i: Vec<usize> = pred_intents
                .iter()
                .map(|n| model.intents.index(n).unwrap_or(usize::MAX - 1))
                .collect();
            dev.intent_acc = Some(intent_accuracy(&pred_i, &gold_i));
            let gold_tags: Vec<Vec<String>> =
                dev_examples.iter().map(|e| e.slots.clone()).collect();
            dev.slot_f1 = Some(slot_f1(&pred_tags, &gold_tags)?);
        }
        if dev.dev_em.is_some() || dev.intent_acc.is_some() {
            let line = serde_json::to_string(&dev).expect("metrics encode");
            writeln!(metrics, "{line}").map_err(io_err(&metrics_path))?;
            dev_records.push(dev);
        }
    }
    Ok(RunSummary { checkpoints, steps, dev: dev_records })
}

/// Recycling SLU batch stream with deterministic reshuffles.
struct SluStream {
    batches: Vec<SluBatch>,
    pos: usize,
    recycles: u64,
    examples: Vec<SluExample>,
}

impl SluStream {
    fn new<F: Scalar>(examples: &[SluExample], model: &JointModel<F>, config: &TrainConfig) -> Self {
        let batches = make_slu_batches(
            examples,
            &model.word_vocab,
            &model.char_vocab,
            &model.intents,
            &model.slots,
            config.batch_size_slu,
            config.seed ^ 0x5e_1f_00,
            true,
            config.kernel_width,
        );
        SluStream { batches, pos: 0, recycles: 0, examples: examples.to_vec() }
    }

    fn next<F: Scalar>(&mut self, model: &JointModel<F>, config: &TrainConfig) -> SluBatch {
        if self.pos == self.batches.len() {
            self.recycles += 1;
            self.batches = make_slu_batches(
                &self.examples,
                &model.word_vocab,
                &model.char_vocab,
                &model.intents,
                &model.slots,
                config.batch_size_slu,
                (config.seed ^ 0x5e_1f_00).wrapping_add(self.recycles),
                true,
                config.kernel_width,
            );
            self.pos = 0;
        }
        let b = self.batches[self.pos].clone();
        self.pos += 1;
        b
    }
}
