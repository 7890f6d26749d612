//! Central finite-difference verification of every analytic gradient, per
//! submodule, on seeded tiny float64 instances.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datasets::{LabelMap, MrcExample, PaddedSeqs, SluBatch, SluExample, Vocabulary};
use crate::embedding::embed_chars;
use crate::encoder::{bilstm_encode, self_attend, AttentionParams, BiLstmParams, EncoderOutput};
use crate::mrc_head::{attention_flow, modeling_layer, mrc_loss, predict_span, MrcHeadParams};
use crate::model::JointModel;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::slu_head::{decode_intent, decode_slots, slu_loss, SluHeadParams};
use crate::tensor::{Tape, Var};
use crate::training::TrainConfig;

pub const EPSILON: f64 = 1e-5;
pub const REL_ERR_THRESHOLD: f64 = 1e-4;
/// Relative-error denominator floor; differences below it are
/// finite-difference noise, not gradient disagreement.
const DENOM_FLOOR: f64 = 1e-3;

/// Subsystems with independently checkable gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckModule {
    CharCnn,
    BiLstm,
    SelfAttention,
    AttentionFlow,
    SpanOutput,
    IntentDecoder,
    SlotDecoder,
    MrcEndToEnd,
    SluEndToEnd,
}

impl CheckModule {
    pub const ALL: [CheckModule; 9] = [
        CheckModule::CharCnn,
        CheckModule::BiLstm,
        CheckModule::SelfAttention,
        CheckModule::AttentionFlow,
        CheckModule::SpanOutput,
        CheckModule::IntentDecoder,
        CheckModule::SlotDecoder,
        CheckModule::MrcEndToEnd,
        CheckModule::SluEndToEnd,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CheckModule::CharCnn => "char_cnn",
            CheckModule::BiLstm => "bilstm",
            CheckModule::SelfAttention => "self_attention",
            CheckModule::AttentionFlow => "attention_flow",
            CheckModule::SpanOutput => "span_output",
            CheckModule::IntentDecoder => "intent_decoder",
            CheckModule::SlotDecoder => "slot_decoder",
            CheckModule::MrcEndToEnd => "mrc_end_to_end",
            CheckModule::SluEndToEnd => "slu_end_to_end",
        }
    }

    pub fn parse(s: &str) -> Option<CheckModule> {
        CheckModule::ALL.iter().copied().find(|m| m.name() == s)
    }
}

/// Worst relative error observed for one parameter tensor.
#[derive(Debug, Clone)]
pub struct TensorReport {
    pub name: String,
    pub max_rel_err: f64,
}

impl TensorReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < REL_ERR_THRESHOLD
    }
}

/// Result of checking one module.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub module: &'static str,
    pub entries: Vec<TensorReport>,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn failing(&self) -> Vec<&TensorReport> {
        self.entries.iter().filter(|e| !e.pass()).collect()
    }
}

type RunFn = Box<dyn Fn(&ParamStore<f64>) -> (Tape<f64>, Var)>;

struct CheckSetup {
    store: ParamStore<f64>,
    ids: Vec<ParamId>,
    run: RunFn,
}

/// Checks `module` at `seed`; `corrupt` perturbs the named tensor's analytic
/// gradient before comparison (negative-control fixture).
pub fn run_check(module: CheckModule, seed: u64, corrupt: Option<&str>) -> GradCheckReport {
    let CheckSetup { mut store, ids, run } = setup(module, seed);
    let (tape, loss) = run(&store);
    let grads = tape.backward(loss);
    let mut analytic: HashMap<usize, ArrayD<f64>> = tape.param_grads(&grads);
    if let Some(name) = corrupt {
        if let Some(id) = store.id_of(name) {
            let shape = store.value(id).shape().to_vec();
            let entry =
                analytic.entry(id).or_insert_with(|| ArrayD::zeros(IxDyn(&shape)));
            entry.mapv_inplace(|x| x + 1e-2);
        }
    }
    let mut entries = Vec::new();
    for &id in &ids {
        let name = store.name(id).to_string();
        let n = store.value(id).len();
        let zeros = ArrayD::zeros(store.value(id).raw_dim());
        let a = analytic.get(&id).unwrap_or(&zeros).clone();
        let a_slice = a.as_slice().expect("analytic grad contiguous").to_vec();
        let mut max_rel = 0.0f64;
        for i in 0..n {
            let orig = store.value(id).as_slice().unwrap()[i];
            store.value_mut(id).as_slice_mut().unwrap()[i] = orig + EPSILON;
            let (t_plus, l_plus) = run(&store);
            let lp = t_plus.value(l_plus)[IxDyn(&[])];
            store.value_mut(id).as_slice_mut().unwrap()[i] = orig - EPSILON;
            let (t_minus, l_minus) = run(&store);
            let lm = t_minus.value(l_minus)[IxDyn(&[])];
            store.value_mut(id).as_slice_mut().unwrap()[i] = orig;
            let fd = (lp - lm) / (2.0 * EPSILON);
            let rel = (a_slice[i] - fd).abs() / a_slice[i].abs().max(fd.abs()).max(DENOM_FLOOR);
            max_rel = max_rel.max(rel);
        }
        entries.push(TensorReport { name, max_rel_err: max_rel });
    }
    let pass = entries.iter().all(|e| e.pass());
    GradCheckReport { module: module.name(), entries, pass }
}

pub fn gradcheck(module: CheckModule, seed: u64) -> GradCheckReport {
    run_check(module, seed, None)
}

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-scale..scale))
}

fn length_mask(lengths: &[usize], t_max: usize) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(&[lengths.len(), t_max, 1]), |ix| {
        if ix[1] < lengths[ix[0]] {
            1.0
        } else {
            0.0
        }
    })
}

/// Weighted-sum pseudo-loss so non-scalar outputs become a smooth scalar.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, weights: &ArrayD<f64>) -> Var {
    let w = tape.mul_const(out, weights);
    tape.sum_all(w)
}

fn setup(module: CheckModule, seed: u64) -> CheckSetup {
    match module {
        CheckModule::CharCnn => setup_char_cnn(seed),
        CheckModule::BiLstm => setup_bilstm(seed),
        CheckModule::SelfAttention => setup_self_attention(seed),
        CheckModule::AttentionFlow => setup_attention_flow(seed),
        CheckModule::SpanOutput => setup_span_output(seed),
        CheckModule::IntentDecoder => setup_slu(seed, true),
        CheckModule::SlotDecoder => setup_slu(seed, false),
        CheckModule::MrcEndToEnd => setup_end_to_end(seed, true),
        CheckModule::SluEndToEnd => setup_end_to_end(seed, false),
    }
}

fn setup_char_cnn(seed: u64) -> CheckSetup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let params = crate::embedding::CharCnnParams::register(&mut store, &mut rng, 7, 3, 2, 4, 0);
    let ids = vec![params.char_embed, params.conv_w, params.conv_b];
    let char_ids =
        ndarray::Array3::from_shape_fn((2, 3, 5), |_| rng.random_range(1..7usize));
    let weights = rand_array(&mut rng, &[2, 3, 4], 1.0);
    CheckSetup {
        store,
        ids,
        run: Box::new(move |store| {
            let mut tape = Tape::new();
            let out = embed_chars(&mut tape, store, &params, &char_ids);
            let loss = weighted_sum(&mut tape, out, &weights);
            (tape, loss)
        }),
    }
}

fn setup_bilstm(seed: u64) -> CheckSetup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let params =
        BiLstmParams::register(&mut store, &mut rng, "enc", ParamGroup::SharedEncoder, 3, 3);
    let ids = store.ids().collect();
    let x = rand_array(&mut rng, &[2, 4, 3], 1.0);
    let mask = length_mask(&[4, 2], 4);
    let w_states = rand_array(&mut rng, &[2, 4, 6], 1.0);
    let w_summary = rand_array(&mut rng, &[2, 6], 1.0);
    CheckSetup {
        store,
        ids,
        run: Box::new(move |store| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let (states, summary) = bilstm_encode(&mut tape, store, &params, xv, &mask);
            let l1 = weighted_sum(&mut tape, states, &w_states);
            let l2 = weighted_sum(&mut tape, summary, &w_summary);
            let loss = tape.add(l1, l2);
            (tape, loss)
        }),
    }
}

fn setup_self_attention(seed: u64) -> CheckSetup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let params =
        AttentionParams::register(&mut store, &mut rng, "attn", ParamGroup::SharedEncoder, 3, 2);
    let ids = store.ids().collect();
    let x = rand_array(&mut rng, &[2, 4, 3], 1.0);
    let mask = length_mask(&[4, 3], 4);
    let weights = rand_array(&mut rng, &[2, 4, 2], 1.0);
    CheckSetup {
        store,
        ids,
        run: Box::new(move |store| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let out = self_attend(&mut tape, store, &params, xv, &mask);
            let masked = tape.mul_const(out, &mask);
            let loss = weighted_sum(&mut tape, masked, &weights);
            (tape, loss)
        }),
    }
}

fn setup_attention_flow(seed: u64) -> CheckSetup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let params = MrcHeadParams::register(&mut store, &mut rng, 4, 2); // d = 4
    let ids = vec![params.w_sim];
    let h_p = rand_array(&mut rng, &[2, 3, 4], 1.0);
    let u_q = rand_array(&mut rng, &[2, 2, 4], 1.0);
    let p_mask = length_mask(&[3, 2], 3);
    let q_mask = length_mask(&[2, 1], 2);
    let weights = rand_array(&mut rng, &[2, 3, 16], 1.0);
    CheckSetup {
        store,
        ids,
        run: Box::new(move |store| {
            let mut tape = Tape::new();
            let h = tape.constant(h_p.clone());
            let u = tape.constant(u_q.clone());
            let g = attention_flow(&mut tape, store, &params, h, u, &p_mask, &q_mask);
            let loss = weighted_sum(&mut tape, g, &weights);
            (tape, loss)
        }),
    }
}

fn setup_span_output(seed: u64) -> CheckSetup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let params = MrcHeadParams::register(&mut store, &mut rng, 4, 2); // d = 4, G width 16
    let ids: Vec<ParamId> = store
        .ids()
        .filter(|&id| {
            let n = store.name(id);
            n.starts_with("mrc.modeling") || n.contains("w_start") || n.contains("w_end")
                || n.contains("null_bias")
        })
        .collect();
    let g = rand_array(&mut rng, &[2, 3, 16], 0.6);
    let p_mask = length_mask(&[3, 2], 3);
    let starts = vec![Some(1), None];
    let ends = vec![Some(2), None];
    let lengths = vec![3usize, 2];
    CheckSetup {
        store,
        ids,
        run: Box::new(move |store| {
            let mut tape = Tape::new();
            let gv = tape.constant(g.clone());
            let m = modeling_layer(&mut tape, store, &params, gv, &p_mask);
            let (sl, el) = predict_span(&mut tape, store, &params, gv, m, &p_mask);
            let loss = mrc_loss(&mut tape, sl, el, &starts, &ends, &lengths).unwrap();
            (tape, loss)
        }),
    }
}

fn tiny_slu_batch(rng: &mut ChaCha8Rng, b: usize, t: usize) -> SluBatch {
    let lengths: Vec<usize> = (0..b).map(|i| t - (i % 2)).collect();
    let mut mask = ndarray::Array2::<u8>::zeros((b, t));
    for (bi, &len) in lengths.iter().enumerate() {
        for ti in 0..len {
            mask[[bi, ti]] = 1;
        }
    }
    SluBatch {
        utterance: PaddedSeqs {
            token_ids: ndarray::Array2::zeros((b, t)),
            char_ids: ndarray::Array3::zeros((b, t, 2)),
            lengths: lengths.clone(),
            mask,
            tokens: vec![vec!["w".to_string(); t]; b],
        },
        intents: (0..b).map(|_| rng.random_range(0..2usize)).collect(),
        slot_tags: ndarray::Array2::from_shape_fn((b, t), |_| rng.random_range(0..3usize)),
    }
}

fn setup_slu(seed: u64, intent_side: bool) -> CheckSetup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let enc_width = 5;
    let head = SluHeadParams::register(&mut store, &mut rng, enc_width, 3, 2, 3);
    let ids: Vec<ParamId> = store
        .ids()
        .filter(|&id| {
            let n = store.name(id);
            if intent_side {
                n.starts_with("slu.intent")
            } else {
                n.starts_with("slu.slot")
            }
        })
        .collect();
    let batch = tiny_slu_batch(&mut rng, 1, 3);
    let states = rand_array(&mut rng, &[1, 3, enc_width], 1.0);
    let mask = length_mask(&batch.utterance.lengths, 3);
    CheckSetup {
        store,
        ids,
        run: Box::new(move |store| {
            let mut tape = Tape::new();
            let token_states = tape.constant(states.clone());
            let summary = tape.constant(ArrayD::zeros(IxDyn(&[1, 2])));
            let enc = EncoderOutput { token_states, summary, mask: mask.clone() };
            let il = decode_intent(&mut tape, store, &head.intent, &enc);
            let dists = tape.softmax(il);
            let sl = decode_slots(&mut tape, store, &head.slot, &enc, dists);
            let (li, ls) = slu_loss(&mut tape, il, sl, &batch, 2, 3).unwrap();
            let loss = if intent_side { tape.add(li, ls) } else { ls };
            (tape, loss)
        }),
    }
}

fn tiny_joint_model(seed: u64) -> (TrainConfig, JointModel<f64>) {
    let mut config = TrainConfig::default();
    config.seed = seed;
    config.h = 2;
    config.d_word = 3;
    config.d_char = 2;
    config.char_filters = 2;
    config.kernel_width = 2;
    config.d_attn = 2;
    let tokens: Vec<String> =
        ["find", "it", "the", "box", "red", "is", "here", "now"].iter().map(|s| s.to_string()).collect();
    let word_vocab = Vocabulary::from_tokens(tokens.iter().cloned());
    let char_vocab = crate::datasets::build_char_vocab(&[tokens.clone()]).unwrap();
    let intents = LabelMap::from_names(vec!["A".into(), "B".into()]);
    let slots = LabelMap::from_names(vec!["O".into(), "B-x".into(), "I-x".into()]);
    let model = JointModel::<f64>::new(&config, word_vocab, char_vocab, intents, slots, None);
    (config, model)
}

fn setup_end_to_end(seed: u64, mrc_side: bool) -> CheckSetup {
    let (config, model) = tiny_joint_model(seed);
    // Twin store with identical layout: the checker perturbs this copy and
    // the run closure syncs it into the live model before each forward.
    let (_, twin) = tiny_joint_model(seed);
    let store = twin.store;
    let groups: &[ParamGroup] = if mrc_side {
        &[ParamGroup::Embeddings, ParamGroup::SharedEncoder, ParamGroup::MrcHead]
    } else {
        &[ParamGroup::Embeddings, ParamGroup::SharedEncoder, ParamGroup::SluDecoders]
    };
    let ids: Vec<ParamId> = store.ids().filter(|&id| groups.contains(&store.group(id))).collect();
    let model = std::cell::RefCell::new(model);

    if mrc_side {
        let examples = vec![
            MrcExample {
                qid: "g0".into(),
                passage_tokens: vec!["the".into(), "red".into(), "box".into(), "is".into()],
                question_tokens: vec!["find".into(), "it".into()],
                answer_start_token: Some(1),
                answer_end_token: Some(2),
                is_impossible: false,
                raw_context: String::new(),
                raw_answer_text: "red box".into(),
                gold_answer_texts: vec!["red box".into()],
            },
            MrcExample {
                qid: "g1".into(),
                passage_tokens: vec!["here".into(), "now".into()],
                question_tokens: vec!["find".into()],
                answer_start_token: None,
                answer_end_token: None,
                is_impossible: true,
                raw_context: String::new(),
                raw_answer_text: String::new(),
                gold_answer_texts: vec![],
            },
        ];
        let refs: Vec<&MrcExample> = examples.iter().collect();
        let batch = {
            let m = model.borrow();
            crate::datasets::collate_mrc(&refs, &m.word_vocab, &m.char_vocab, config.kernel_width)
        };
        CheckSetup {
            store,
            ids,
            run: Box::new(move |store| {
                let mut m = model.borrow_mut();
                m.store.copy_values_from(store);
                let mut tape = Tape::new();
                let (sl, el) = m.forward_mrc(&mut tape, &batch);
                let loss = mrc_loss(
                    &mut tape,
                    sl,
                    el,
                    &batch.answer_start,
                    &batch.answer_end,
                    &batch.passage.lengths,
                )
                .unwrap();
                (tape, loss)
            }),
        }
    } else {
        let examples = vec![SluExample {
            tokens: vec!["find".into(), "the".into(), "box".into()],
            intent: "A".into(),
            slots: vec!["O".into(), "B-x".into(), "I-x".into()],
        }];
        let refs: Vec<&SluExample> = examples.iter().collect();
        let (batch, n_intents, n_slots) = {
            let m = model.borrow();
            (
                crate::datasets::collate_slu(
                    &refs,
                    &m.word_vocab,
                    &m.char_vocab,
                    &m.intents,
                    &m.slots,
                    config.kernel_width,
                ),
                m.intents.len(),
                m.slots.len(),
            )
        };
        CheckSetup {
            store,
            ids,
            run: Box::new(move |store| {
                let mut m = model.borrow_mut();
                m.store.copy_values_from(store);
                let mut tape = Tape::new();
                let (il, sl, _) = m.forward_slu(&mut tape, &batch);
                let (li, ls) = slu_loss(&mut tape, il, sl, &batch, n_intents, n_slots).unwrap();
                let loss = tape.add(li, ls);
                (tape, loss)
            }),
        }
    }
}
