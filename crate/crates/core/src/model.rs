//! Joint model: one embedding pipeline and one shared encoder feeding the
//! utterance decoders, plus the span-extraction head whose inputs carry the
//! shared-encoder states when injection is enabled.

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datasets::{LabelMap, MrcBatch, PaddedSeqs, SluBatch, Vocabulary};
use crate::embedding::{
    embed_tokens, CharCnnParams, ContextualFeatureProvider, EmbeddingParams, WordEmbeddingTable,
    ZeroProvider,
};
use crate::encoder::{bilstm_encode, encode, float_mask, EncoderOutput, EncoderParams};
use crate::mrc_head::{
    attention_flow, inject, modeling_layer, predict_span, InjectScope, MrcHeadParams,
};
use crate::params::ParamStore;
use crate::slu_head::SluHeadParams;
use crate::tensor::{Scalar, Tape, Var};
use crate::training::TrainConfig;

/// Everything needed to run either task end to end.
pub struct JointModel<F: Scalar> {
    pub store: ParamStore<F>,
    pub embed: EmbeddingParams,
    pub shared: EncoderParams,
    pub slu: SluHeadParams,
    pub mrc: MrcHeadParams,
    pub word_vocab: Vocabulary,
    pub char_vocab: Vocabulary,
    pub intents: LabelMap,
    pub slots: LabelMap,
    pub inject_scope: InjectScope,
    pub detach_injection: bool,
    pub provider: Box<dyn ContextualFeatureProvider>,
}

impl<F: Scalar> JointModel<F> {
    /// Registers all parameters deterministically from `config.seed`.
    pub fn new(
        config: &TrainConfig,
        word_vocab: Vocabulary,
        char_vocab: Vocabulary,
        intents: LabelMap,
        slots: LabelMap,
        pretrained_words: Option<ndarray::Array2<F>>,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let char_cnn = CharCnnParams::register(
            &mut store,
            &mut rng,
            char_vocab.size(),
            config.d_char,
            config.kernel_width,
            config.char_filters,
            char_vocab.pad_id,
        );
        let word = WordEmbeddingTable::register(
            &mut store,
            &mut rng,
            word_vocab.size(),
            config.d_word,
            word_vocab.pad_id,
            pretrained_words,
            true,
        );
        let embed = EmbeddingParams { char_cnn, word, d_ctx: config.d_ctx };
        let shared = EncoderParams::register(
            &mut store,
            &mut rng,
            "shared",
            crate::params::ParamGroup::SharedEncoder,
            embed.d_in(),
            config.h,
            config.d_attn,
        );
        let slu = SluHeadParams::register(
            &mut store,
            &mut rng,
            shared.token_width(),
            config.h,
            intents.len(),
            slots.len(),
        );
        let d_slu = match config.inject_scope {
            InjectScope::Disabled => 0,
            _ => shared.token_width(),
        };
        let mrc = MrcHeadParams::register(&mut store, &mut rng, embed.d_in() + d_slu, config.h);
        JointModel {
            store,
            embed,
            shared,
            slu,
            mrc,
            word_vocab,
            char_vocab,
            intents,
            slots,
            inject_scope: config.inject_scope,
            detach_injection: config.detach_injection,
            provider: Box::new(ZeroProvider { d_ctx: config.d_ctx }),
        }
    }

    /// Width the MRC contextual encoder expects per token.
    pub fn mrc_input_width(&self) -> usize {
        self.mrc.ctx_encoder.fwd.input_dim
    }

    fn embed_seqs(&self, tape: &mut Tape<F>, seqs: &PaddedSeqs) -> Var {
        embed_tokens(tape, &self.store, &self.embed, self.provider.as_ref(), seqs)
            .expect("embedding failed")
    }

    /// Utterance pipeline: embeddings -> shared encoder -> decoders.
    /// Returns intent logits, slot logits and the encoder output.
    pub fn forward_slu(
        &self,
        tape: &mut Tape<F>,
        batch: &SluBatch,
    ) -> (Var, Var, EncoderOutput<F>) {
        let mask = float_mask::<F>(&batch.utterance.mask);
        let x = self.embed_seqs(tape, &batch.utterance);
        let enc = encode(tape, &self.store, &self.shared, x, &mask);
        let intent_logits = crate::slu_head::decode_intent(tape, &self.store, &self.slu.intent, &enc);
        let dists = tape.softmax(intent_logits);
        let slot_logits = crate::slu_head::decode_slots(tape, &self.store, &self.slu.slot, &enc, dists);
        (intent_logits, slot_logits, enc)
    }

    /// Reading-comprehension pipeline; returns start/end logits over the
    /// virtual-null-prefixed positions, `[B, 1+T_p]`.
    pub fn forward_mrc(&self, tape: &mut Tape<F>, batch: &MrcBatch) -> (Var, Var) {
        let p_mask = float_mask::<F>(&batch.passage.mask);
        let q_mask = float_mask::<F>(&batch.question.mask);
        let e_p = self.embed_seqs(tape, &batch.passage);
        let e_q = self.embed_seqs(tape, &batch.question);

        let (inj_p, inj_q) = match self.inject_scope {
            InjectScope::Disabled => (None, None),
            InjectScope::Question => {
                let enc_q = encode(tape, &self.store, &self.shared, e_q, &q_mask);
                let zeros = self.zero_injection(tape, &batch.passage);
                (Some(zeros), Some(self.maybe_detach(tape, enc_q.token_states)))
            }
            InjectScope::Both => {
                let enc_p = encode(tape, &self.store, &self.shared, e_p, &p_mask);
                let enc_q = encode(tape, &self.store, &self.shared, e_q, &q_mask);
                (
                    Some(self.maybe_detach(tape, enc_p.token_states)),
                    Some(self.maybe_detach(tape, enc_q.token_states)),
                )
            }
        };
        let x_p = inject(tape, e_p, inj_p).expect("passage injection");
        let x_q = inject(tape, e_q, inj_q).expect("question injection");

        let (h_p, _) = bilstm_encode(tape, &self.store, &self.mrc.ctx_encoder, x_p, &p_mask);
        let (u_q, _) = bilstm_encode(tape, &self.store, &self.mrc.ctx_encoder, x_q, &q_mask);
        let g = attention_flow(tape, &self.store, &self.mrc, h_p, u_q, &p_mask, &q_mask);
        let m = modeling_layer(tape, &self.store, &self.mrc, g, &p_mask);
        predict_span(tape, &self.store, &self.mrc, g, m, &p_mask)
    }

    fn maybe_detach(&self, tape: &mut Tape<F>, v: Var) -> Var {
        if self.detach_injection {
            tape.detach(v)
        } else {
            v
        }
    }

    fn zero_injection(&self, tape: &mut Tape<F>, seqs: &PaddedSeqs) -> Var {
        let width = self.shared.token_width();
        tape.constant(ArrayD::zeros(IxDyn(&[seqs.batch_size(), seqs.max_len(), width])))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{build_char_vocab, build_vocab, collate_mrc, collate_slu, MrcExample, SluExample};
    use crate::training::TrainConfig;

    fn toy_config() -> TrainConfig {
        let mut c = TrainConfig::default();
        c.h = 3;
        c.d_word = 4;
        c.d_char = 3;
        c.char_filters = 4;
        c.kernel_width = 2;
        c.d_attn = 3;
        c.seed = 5;
        c
    }

    fn toy_data() -> (Vocabulary, Vocabulary, LabelMap, LabelMap, Vec<MrcExample>, Vec<SluExample>) {
        let corpus: Vec<Vec<String>> = vec![
            ["the", "cat", "sat", "on", "mat", "where", "is"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        ];
        let wv = build_vocab(&corpus, 1).unwrap();
        let cv = build_char_vocab(&corpus).unwrap();
        let intents = LabelMap::from_names(vec!["Find".into(), "Play".into()]);
        let slots = LabelMap::from_names(vec!["O".into(), "B-x".into(), "I-x".into()]);
        let mrc = vec![
            MrcExample {
                qid: "q0".into(),
                passage_tokens: ["the", "cat", "sat", "on", "mat"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
                question_tokens: vec!["where".into(), "is".into()],
                answer_start_token: Some(1),
                answer_end_token: Some(2),
                is_impossible: false,
                raw_context: "the cat sat on mat".into(),
                raw_answer_text: "cat sat".into(),
                gold_answer_texts: vec!["cat sat".into()],
            },
            MrcExample {
                qid: "q1".into(),
                passage_tokens: vec!["the".into(), "mat".into()],
                question_tokens: vec!["where".into()],
                answer_start_token: None,
                answer_end_token: None,
                is_impossible: true,
                raw_context: "the mat".into(),
                raw_answer_text: String::new(),
                gold_answer_texts: vec![],
            },
        ];
        let slu = vec![SluExample {
            tokens: vec!["the".into(), "cat".into(), "sat".into()],
            intent: "Find".into(),
            slots: vec!["O".into(), "B-x".into(), "I-x".into()],
        }];
        (wv, cv, intents, slots, mrc, slu)
    }

    #[test]
    fn forward_shapes_all_scopes() {
        for scope in [InjectScope::Disabled, InjectScope::Question, InjectScope::Both] {
            let mut cfg = toy_config();
            cfg.inject_scope = scope;
            let (wv, cv, intents, slots, mrc, slu) = toy_data();
            let model = JointModel::<f64>::new(&cfg, wv.clone(), cv.clone(), intents, slots, None);
            let d_slu = if scope == InjectScope::Disabled { 0 } else { model.shared.token_width() };
            assert_eq!(model.mrc_input_width(), model.embed.d_in() + d_slu);

            let refs: Vec<&MrcExample> = mrc.iter().collect();
            let batch = collate_mrc(&refs, &wv, &cv, cfg.kernel_width);
            let mut tape = Tape::new();
            let (sl, el) = model.forward_mrc(&mut tape, &batch);
            assert_eq!(tape.shape(sl), &[2, 6]); // T_p max = 5
            assert_eq!(tape.shape(el), &[2, 6]);

            let refs: Vec<&SluExample> = slu.iter().collect();
            let sbatch = collate_slu(&refs, &wv, &cv, &model.intents, &model.slots, cfg.kernel_width);
            let mut tape = Tape::new();
            let (il, sl2, _) = model.forward_slu(&mut tape, &sbatch);
            assert_eq!(tape.shape(il), &[1, 3, 2]);
            assert_eq!(tape.shape(sl2), &[1, 3, 3]);
        }
    }

    #[test]
    fn injection_toggle_changes_start_logits() {
        // same seed, same data: enabling injection must change the output
        // (different parameter shapes); more telling is detach vs not under
        // identical shapes, checked in the training tests. Here: toggling
        // injection changes the downstream logits at all.
        let (wv, cv, intents, slots, mrc, _) = toy_data();
        let refs: Vec<&MrcExample> = mrc.iter().collect();

        let mut cfg_on = toy_config();
        cfg_on.inject_scope = InjectScope::Both;
        let model_on =
            JointModel::<f64>::new(&cfg_on, wv.clone(), cv.clone(), intents.clone(), slots.clone(), None);
        let batch = collate_mrc(&refs, &wv, &cv, cfg_on.kernel_width);
        let mut tape = Tape::new();
        let (sl_on, _) = model_on.forward_mrc(&mut tape, &batch);
        let on = tape.value(sl_on).to_owned();

        let mut cfg_off = toy_config();
        cfg_off.inject_scope = InjectScope::Disabled;
        let model_off = JointModel::<f64>::new(&cfg_off, wv.clone(), cv.clone(), intents, slots, None);
        let mut tape = Tape::new();
        let (sl_off, _) = model_off.forward_mrc(&mut tape, &batch);
        let off = tape.value(sl_off).to_owned();

        let diff = on
            .iter()
            .zip(off.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff > 1e-9, "injection plumbing appears dead");
    }

    #[test]
    fn determinism_same_seed_same_outputs() {
        let (wv, cv, intents, slots, mrc, _) = toy_data();
        let refs: Vec<&MrcExample> = mrc.iter().collect();
        let cfg = toy_config();
        let batch = collate_mrc(&refs, &wv, &cv, cfg.kernel_width);
        let run = || {
            let model =
                JointModel::<f64>::new(&cfg, wv.clone(), cv.clone(), intents.clone(), slots.clone(), None);
            let mut tape = Tape::new();
            let (sl, _) = model.forward_mrc(&mut tape, &batch);
            tape.value(sl).to_owned()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }
}
