//! Intent and slot decoders over the shared encoder.
//!
//! The intent decoder predicts a label per token; the utterance label is a
//! majority vote over unmasked positions. The slot decoder consumes the
//! encoder state concatenated with the softmaxed intent distribution, so
//! intent information propagates into slot filling differentiably.

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::datasets::SluBatch;
use crate::encoder::{lstm_direction, EncoderOutput, LstmParams};
use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::tensor::{fl, Scalar, Tape, Var};

#[derive(Debug, Error)]
pub enum SluError {
    #[error("intent target {target} out of range for {count} intents")]
    IntentRange { target: usize, count: usize },
    #[error("slot target {target} out of range for {count} tags")]
    SlotRange { target: usize, count: usize },
}

/// Token-level intent decoder: unidirectional LSTM plus projection.
#[derive(Debug, Clone)]
pub struct IntentDecoderParams {
    pub lstm: LstmParams,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub n_intents: usize,
}

/// Slot decoder; input is the encoder token width plus the intent
/// distribution width.
#[derive(Debug, Clone)]
pub struct SlotDecoderParams {
    pub lstm: LstmParams,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub n_slots: usize,
}

/// Both decoders of the utterance-understanding head.
#[derive(Debug, Clone)]
pub struct SluHeadParams {
    pub intent: IntentDecoderParams,
    pub slot: SlotDecoderParams,
}

impl SluHeadParams {
    pub fn register(
        store: &mut ParamStore<impl Scalar>,
        rng: &mut ChaCha8Rng,
        encoder_width: usize,
        decoder_hidden: usize,
        n_intents: usize,
        n_slots: usize,
    ) -> Self {
        let intent_lstm = LstmParams::register(
            store,
            rng,
            "slu.intent_dec",
            ParamGroup::SluDecoders,
            encoder_width,
            decoder_hidden,
        );
        let intent_w = store.register(
            "slu.intent_proj_w",
            ParamGroup::SluDecoders,
            &[decoder_hidden, n_intents],
            Init::Uniform(0.08),
            rng,
        );
        let intent_b = store.register(
            "slu.intent_proj_b",
            ParamGroup::SluDecoders,
            &[n_intents],
            Init::Zeros,
            rng,
        );
        let slot_lstm = LstmParams::register(
            store,
            rng,
            "slu.slot_dec",
            ParamGroup::SluDecoders,
            encoder_width + n_intents,
            decoder_hidden,
        );
        let slot_w = store.register(
            "slu.slot_proj_w",
            ParamGroup::SluDecoders,
            &[decoder_hidden, n_slots],
            Init::Uniform(0.08),
            rng,
        );
        let slot_b = store.register(
            "slu.slot_proj_b",
            ParamGroup::SluDecoders,
            &[n_slots],
            Init::Zeros,
            rng,
        );
        SluHeadParams {
            intent: IntentDecoderParams {
                lstm: intent_lstm,
                proj_w: intent_w,
                proj_b: intent_b,
                n_intents,
            },
            slot: SlotDecoderParams { lstm: slot_lstm, proj_w: slot_w, proj_b: slot_b, n_slots },
        }
    }
}

/// Token-level intent logits `[B,T,|I|]`.
pub fn decode_intent<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    params: &IntentDecoderParams,
    enc: &EncoderOutput<F>,
) -> Var {
    let (states, _) = lstm_direction(tape, store, &params.lstm, enc.token_states, &enc.mask, false);
    let w = tape.param(params.proj_w, store.value(params.proj_w));
    let b = tape.param(params.proj_b, store.value(params.proj_b));
    let logits = tape.linear(states, w);
    tape.add(logits, b)
}

/// Slot logits `[B,T,|S|]`; decoder input is the encoder state concatenated
/// with the (row-normalized) intent distribution at each step.
pub fn decode_slots<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    params: &SlotDecoderParams,
    enc: &EncoderOutput<F>,
    intent_token_dists: Var,
) -> Var {
    let enc_width = *tape.shape(enc.token_states).last().unwrap();
    let dist_width = *tape.shape(intent_token_dists).last().unwrap();
    assert_eq!(
        enc_width + dist_width,
        params.lstm.input_dim,
        "decode_slots: input width {} + {} vs decoder {}",
        enc_width,
        dist_width,
        params.lstm.input_dim
    );
    let x = tape.concat_last(&[enc.token_states, intent_token_dists]);
    let (states, _) = lstm_direction(tape, store, &params.lstm, x, &enc.mask, false);
    let w = tape.param(params.proj_w, store.value(params.proj_w));
    let b = tape.param(params.proj_b, store.value(params.proj_b));
    let logits = tape.linear(states, w);
    tape.add(logits, b)
}

/// Sentence-level intent per batch row: majority vote over per-token
/// argmaxes at unmasked positions; ties resolved by the highest mean token
/// probability among the tied labels.
pub fn sentence_intents<F: Scalar>(
    token_logits: &ArrayD<F>,
    mask: &ArrayD<F>,
) -> Vec<usize> {
    let shape = token_logits.shape();
    let (b, t, n) = (shape[0], shape[1], shape[2]);
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let mut votes = vec![0usize; n];
        let mut mean_prob = vec![0.0f64; n];
        let mut count = 0usize;
        for ti in 0..t {
            if mask[[bi, ti, 0]] <= F::zero() {
                continue;
            }
            count += 1;
            // softmax of this token's logits
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                mx = mx.max(token_logits[[bi, ti, j]].to_f64().unwrap());
            }
            let mut z = 0.0;
            let mut probs = vec![0.0f64; n];
            for j in 0..n {
                probs[j] = (token_logits[[bi, ti, j]].to_f64().unwrap() - mx).exp();
                z += probs[j];
            }
            let mut best = 0;
            for j in 0..n {
                probs[j] /= z;
                mean_prob[j] += probs[j];
                if probs[j] > probs[best] {
                    best = j;
                }
            }
            votes[best] += 1;
        }
        debug_assert!(count > 0, "sentence_intents: empty row");
        let top = *votes.iter().max().unwrap();
        let tied: Vec<usize> = (0..n).filter(|&j| votes[j] == top).collect();
        let winner = if tied.len() == 1 {
            tied[0]
        } else {
            *tied
                .iter()
                .max_by(|&&a, &&b| mean_prob[a].partial_cmp(&mean_prob[b]).unwrap())
                .unwrap()
        };
        out.push(winner);
    }
    out
}

/// Intent and slot NLL terms, each a masked token mean. The gold intent is
/// broadcast to every unmasked token of its utterance.
pub fn slu_loss<F: Scalar>(
    tape: &mut Tape<F>,
    intent_logits: Var,
    slot_logits: Var,
    batch: &SluBatch,
    n_intents: usize,
    n_slots: usize,
) -> Result<(Var, Var), SluError> {
    let shape = tape.shape(intent_logits).to_vec();
    let (b, t) = (shape[0], shape[1]);
    let mut intent_targets = Vec::with_capacity(b * t);
    let mut slot_targets = Vec::with_capacity(b * t);
    let mut weights: Vec<F> = Vec::with_capacity(b * t);
    for bi in 0..b {
        let gold_intent = batch.intents[bi];
        if gold_intent >= n_intents {
            return Err(SluError::IntentRange { target: gold_intent, count: n_intents });
        }
        for ti in 0..t {
            let on = batch.utterance.mask[[bi, ti]] > 0;
            let slot = batch.slot_tags[[bi, ti]];
            if on && slot >= n_slots {
                return Err(SluError::SlotRange { target: slot, count: n_slots });
            }
            intent_targets.push(gold_intent);
            slot_targets.push(slot);
            weights.push(if on { F::one() } else { F::zero() });
        }
    }
    let flat_intent = tape.reshape(intent_logits, &[b * t, n_intents]);
    let flat_slot = tape.reshape(slot_logits, &[b * t, n_slots]);
    let loss_intent = tape.nll_masked(flat_intent, &intent_targets, &weights);
    let loss_slot = tape.nll_masked(flat_slot, &slot_targets, &weights);
    Ok((loss_intent, loss_slot))
}

/// Rewrites `I-X` tags with no open chunk of type `X` to `B-X`; idempotent.
pub fn repair_bio(tags: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(tags.len());
    for (i, tag) in tags.iter().enumerate() {
        if let Some(ty) = tag.strip_prefix("I-") {
            let opened = i > 0
                && (out[i - 1] == format!("B-{ty}") || out[i - 1] == format!("I-{ty}"));
            if !opened {
                out.push(format!("B-{ty}"));
                continue;
            }
        }
        out.push(tag.clone());
    }
    out
}

/// Per-token argmax tags for a batch, truncated to true lengths and
/// repaired to valid BIO.
pub fn predict_slot_tags<F: Scalar>(
    slot_logits: &ArrayD<F>,
    lengths: &[usize],
    slot_names: &[String],
) -> Vec<Vec<String>> {
    let shape = slot_logits.shape();
    let (b, _t, n) = (shape[0], shape[1], shape[2]);
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let mut tags = Vec::with_capacity(lengths[bi]);
        for ti in 0..lengths[bi] {
            let mut best = 0;
            for j in 1..n {
                if slot_logits[[bi, ti, j]] > slot_logits[[bi, ti, best]] {
                    best = j;
                }
            }
            tags.push(slot_names[best].clone());
        }
        out.push(repair_bio(&tags));
    }
    out
}

/// Prediction dump line: `intent<TAB>tag1 tag2 ...`.
pub fn format_slu_prediction(intent: &str, tags: &[String]) -> String {
    format!("{intent}\t{}", tags.join(" "))
}

/// Uniform distribution helper for tests and ablations.
pub fn uniform_dists<F: Scalar>(b: usize, t: usize, n: usize) -> ArrayD<F> {
    ArrayD::from_elem(IxDyn(&[b, t, n]), fl::<F>(1.0 / n as f64))
}
