//! Span-extraction head: injected input representations, bidirectional
//! attention flow between passage and question, BiLSTM modeling layers and
//! start/end pointers over a virtual null position that encodes "no answer".

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::encoder::{bilstm_encode, BiLstmParams};
use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::tensor::{fl, Scalar, Tape, Var, MASK_BIG};

#[derive(Debug, Error)]
pub enum MrcError {
    #[error("empty passage")]
    EmptyPassage,
    #[error("span target {target} out of range for {count} positions")]
    TargetRange { target: usize, count: usize },
    #[error("passage and injected states disagree on sequence length: {a} vs {b}")]
    InjectLength { a: usize, b: usize },
}

/// Where the shared-encoder states are concatenated into the MRC input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InjectScope {
    Disabled,
    Question,
    Both,
}

impl InjectScope {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "disabled" => Some(InjectScope::Disabled),
            "question" => Some(InjectScope::Question),
            "both" => Some(InjectScope::Both),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            InjectScope::Disabled => "disabled",
            InjectScope::Question => "question",
            InjectScope::Both => "both",
        }
    }
}

/// One decoded span in virtual-null coordinates: positions 1..=T_p are
/// passage tokens, (0,0) is the no-answer prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanPrediction {
    pub qid: String,
    pub start: usize,
    pub end: usize,
    pub is_null: bool,
    pub score: f64,
    pub null_score: f64,
}

/// All MRC-side weights.
#[derive(Debug, Clone)]
pub struct MrcHeadParams {
    pub ctx_encoder: BiLstmParams,
    pub w_sim: ParamId,
    pub modeling1: BiLstmParams,
    pub modeling2: BiLstmParams,
    pub w_start: ParamId,
    pub w_end: ParamId,
    pub null_bias: ParamId,
    pub hidden_dim: usize,
}

impl MrcHeadParams {
    pub fn register(
        store: &mut ParamStore<impl Scalar>,
        rng: &mut ChaCha8Rng,
        input_width: usize,
        hidden_dim: usize,
    ) -> Self {
        let ctx_encoder = BiLstmParams::register(
            store,
            rng,
            "mrc.ctx_enc",
            ParamGroup::MrcHead,
            input_width,
            hidden_dim,
        );
        let d = 2 * hidden_dim;
        let w_sim = store.register(
            "mrc.att_w_sim",
            ParamGroup::MrcHead,
            &[3 * d],
            Init::Uniform(0.08),
            rng,
        );
        let modeling1 = BiLstmParams::register(
            store,
            rng,
            "mrc.modeling1",
            ParamGroup::MrcHead,
            4 * d,
            hidden_dim,
        );
        let modeling2 = BiLstmParams::register(
            store,
            rng,
            "mrc.modeling2",
            ParamGroup::MrcHead,
            4 * d + 2 * hidden_dim,
            hidden_dim,
        );
        let w_start = store.register(
            "mrc.w_start",
            ParamGroup::MrcHead,
            &[4 * d + 2 * hidden_dim, 1],
            Init::Uniform(0.08),
            rng,
        );
        let w_end = store.register(
            "mrc.w_end",
            ParamGroup::MrcHead,
            &[4 * d + 2 * hidden_dim, 1],
            Init::Uniform(0.08),
            rng,
        );
        let null_bias =
            store.register("mrc.null_bias", ParamGroup::MrcHead, &[1], Init::Zeros, rng);
        MrcHeadParams {
            ctx_encoder,
            w_sim,
            modeling1,
            modeling2,
            w_start,
            w_end,
            null_bias,
            hidden_dim,
        }
    }
}

/// Concatenates shared-encoder token states onto the MRC embeddings.
/// `None` leaves the input unchanged (injection disabled).
pub fn inject<F: Scalar>(
    tape: &mut Tape<F>,
    mrc_embeddings: Var,
    slu_states: Option<Var>,
) -> Result<Var, MrcError> {
    match slu_states {
        None => Ok(mrc_embeddings),
        Some(states) => {
            let a = tape.shape(mrc_embeddings)[1];
            let b = tape.shape(states)[1];
            if a != b {
                return Err(MrcError::InjectLength { a, b });
            }
            Ok(tape.concat_last(&[mrc_embeddings, states]))
        }
    }
}

/// Bidirectional attention flow. For passage states `H [B,T_p,d]` and
/// question states `U [B,T_q,d]` produces `G [B,T_p,4d]` per token:
/// `[h; ĉ; h∘ĉ; h∘q̃]` where ĉ is the context-to-query attended question and
/// q̃ the query-to-context summary broadcast over passage positions.
pub fn attention_flow<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    params: &MrcHeadParams,
    h_p: Var,
    u_q: Var,
    p_mask: &ArrayD<F>,
    q_mask: &ArrayD<F>,
) -> Var {
    let d = *tape.shape(h_p).last().unwrap();
    assert_eq!(d, *tape.shape(u_q).last().unwrap(), "attention_flow: width mismatch");
    let (b, t_p) = (tape.shape(h_p)[0], tape.shape(h_p)[1]);
    let t_q = tape.shape(u_q)[1];

    let w_sim = tape.param(params.w_sim, store.value(params.w_sim));
    let w_h = tape.slice_last(w_sim, 0, d);
    let w_u = tape.slice_last(w_sim, d, d);
    let w_hu = tape.slice_last(w_sim, 2 * d, d);
    let w_h = tape.reshape(w_h, &[d, 1]);
    let w_u = tape.reshape(w_u, &[d, 1]);

    // S[t,j] = w_h·h_t + w_u·u_j + w_hu·(h_t ∘ u_j)
    let h_term = tape.linear(h_p, w_h); // [B,T_p,1]
    let u_term = tape.linear(u_q, w_u); // [B,T_q,1]
    let u_term = tape.reshape(u_term, &[b, 1, t_q]);
    let h_scaled = tape.mul(h_p, w_hu); // broadcast [d] over [B,T_p,d]
    let hu_term = tape.bmm_nt(h_scaled, u_q); // [B,T_p,T_q]
    let s = tape.add(h_term, u_term);
    let s = tape.add(s, hu_term);

    // context-to-query: softmax over questions
    let q_mask_row = q_mask
        .clone()
        .into_shape_with_order(IxDyn(&[b, 1, t_q]))
        .expect("attention_flow: q_mask shape");
    let a = tape.masked_softmax(s, &q_mask_row);
    let c_hat = tape.bmm(a, u_q); // [B,T_p,d]

    // query-to-context: max over questions, softmax over passage
    let q_neg = q_mask_row.mapv(|m| (m - F::one()) * fl::<F>(MASK_BIG));
    let s_masked = tape.add_const(s, &q_neg);
    let col_max = tape.max_axis(s_masked, 2); // [B,T_p]
    let p_mask_2d = p_mask
        .clone()
        .into_shape_with_order(IxDyn(&[b, t_p]))
        .expect("attention_flow: p_mask shape");
    let beta = tape.masked_softmax(col_max, &p_mask_2d); // [B,T_p]
    let beta = tape.reshape(beta, &[b, 1, t_p]);
    let q_tilde = tape.bmm(beta, h_p); // [B,1,d]

    let h_c = tape.mul(h_p, c_hat);
    let h_q = tape.mul(h_p, q_tilde); // broadcast over T_p
    let g = tape.concat_last(&[h_p, c_hat, h_c, h_q]);
    tape.mul_const(g, p_mask)
}

/// First modeling pass: a BiLSTM over G.
pub fn modeling_layer<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    params: &MrcHeadParams,
    g: Var,
    p_mask: &ArrayD<F>,
) -> Var {
    let (m, _) = bilstm_encode(tape, store, &params.modeling1, g, p_mask);
    m
}

/// Start/end logits over `1 + T_p` positions. Index 0 is the virtual null
/// with a learned bias; end logits condition on a second BiLSTM over [G; M].
pub fn predict_span<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    params: &MrcHeadParams,
    g: Var,
    modeling_states: Var,
    p_mask: &ArrayD<F>,
) -> (Var, Var) {
    let b = tape.shape(g)[0];
    let t_p = tape.shape(g)[1];
    let gm = tape.concat_last(&[g, modeling_states]);
    let w_start = tape.param(params.w_start, store.value(params.w_start));
    let start_body = tape.linear(gm, w_start);
    let start_body = tape.reshape(start_body, &[b, t_p]);

    let (m2, _) = bilstm_encode(tape, store, &params.modeling2, gm, p_mask);
    let gm2 = tape.concat_last(&[g, m2]);
    let w_end = tape.param(params.w_end, store.value(params.w_end));
    let end_body = tape.linear(gm2, w_end);
    let end_body = tape.reshape(end_body, &[b, t_p]);

    let null_bias = tape.param(params.null_bias, store.value(params.null_bias));
    let zeros = tape.constant(ArrayD::zeros(IxDyn(&[b, 1])));
    let null_col = tape.add(zeros, null_bias); // [B,1]
    let start_logits = tape.concat_last(&[null_col, start_body]);
    let end_logits = tape.concat_last(&[null_col, end_body]);
    (start_logits, end_logits)
}

/// Mean NLL of the gold (start, end) pair under the two softmaxes, with
/// unanswerable examples targeting the null position (0, 0). Padded passage
/// positions are excluded from the softmax support.
pub fn mrc_loss<F: Scalar>(
    tape: &mut Tape<F>,
    start_logits: Var,
    end_logits: Var,
    answer_start: &[Option<usize>],
    answer_end: &[Option<usize>],
    lengths: &[usize],
) -> Result<Var, MrcError> {
    let shape = tape.shape(start_logits).to_vec();
    let (b, width) = (shape[0], shape[1]);
    let mut starts = Vec::with_capacity(b);
    let mut ends = Vec::with_capacity(b);
    for bi in 0..b {
        let (s, e) = match (answer_start[bi], answer_end[bi]) {
            (Some(s), Some(e)) => (s + 1, e + 1),
            _ => (0, 0),
        };
        if s >= width || e >= width {
            return Err(MrcError::TargetRange { target: s.max(e), count: width });
        }
        starts.push(s);
        ends.push(e);
    }
    // additive mask: null position plus true passage positions are valid
    let mut addmask = ArrayD::<F>::zeros(IxDyn(&[b, width]));
    for bi in 0..b {
        for t in 0..width {
            let valid = t == 0 || t <= lengths[bi];
            if !valid {
                addmask[[bi, t]] = fl(-MASK_BIG);
            }
        }
    }
    let weights = vec![F::one(); b];
    let sl = tape.add_const(start_logits, &addmask);
    let el = tape.add_const(end_logits, &addmask);
    let loss_s = tape.nll_masked(sl, &starts, &weights);
    let loss_e = tape.nll_masked(el, &ends, &weights);
    Ok(tape.add(loss_s, loss_e))
}

/// Decodes one example's logits (already truncated to `1 + true_length`).
/// The best non-null pair maximizes `start[s] + end[e]` over
/// `1 <= s <= e < s + max_answer_len`; the null prediction wins when
/// `start[0] + end[0] > best + null_threshold`.
pub fn decode_answer<F: Scalar>(
    start_logits: &[F],
    end_logits: &[F],
    max_answer_len: usize,
    null_threshold: f64,
) -> Result<SpanPrediction, MrcError> {
    assert!(max_answer_len >= 1, "decode_answer: max_answer_len must be >= 1");
    assert_eq!(start_logits.len(), end_logits.len(), "decode_answer: logit lengths differ");
    let t_p = start_logits.len().saturating_sub(1);
    if t_p == 0 {
        return Err(MrcError::EmptyPassage);
    }
    let mut best: Option<(f64, usize, usize)> = None;
    for s in 1..=t_p {
        let e_hi = t_p.min(s + max_answer_len - 1);
        for e in s..=e_hi {
            let score = start_logits[s].to_f64().unwrap() + end_logits[e].to_f64().unwrap();
            if best.map_or(true, |(b, _, _)| score > b) {
                best = Some((score, s, e));
            }
        }
    }
    let (score, s, e) = best.unwrap();
    let null_score = start_logits[0].to_f64().unwrap() + end_logits[0].to_f64().unwrap();
    if null_score > score + null_threshold {
        Ok(SpanPrediction {
            qid: String::new(),
            start: 0,
            end: 0,
            is_null: true,
            score,
            null_score,
        })
    } else {
        Ok(SpanPrediction { qid: String::new(), start: s, end: e, is_null: false, score, null_score })
    }
}

/// Batch decode of `[B, 1+T_max]` logits, truncating each row to its true
/// passage length.
pub fn decode_batch<F: Scalar>(
    start_logits: &ArrayD<F>,
    end_logits: &ArrayD<F>,
    lengths: &[usize],
    qids: &[String],
    max_answer_len: usize,
    null_threshold: f64,
) -> Result<Vec<SpanPrediction>, MrcError> {
    let b = start_logits.shape()[0];
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let n = lengths[bi] + 1;
        let s: Vec<F> = (0..n).map(|t| start_logits[[bi, t]]).collect();
        let e: Vec<F> = (0..n).map(|t| end_logits[[bi, t]]).collect();
        let mut pred = decode_answer(&s, &e, max_answer_len, null_threshold)?;
        pred.qid = qids[bi].clone();
        out.push(pred);
    }
    Ok(out)
}

/// Renders a span prediction as an answer string over the passage tokens
/// (token coordinates are virtual-null coordinates minus one).
pub fn render_answer(pred: &SpanPrediction, passage_tokens: &[String]) -> String {
    if pred.is_null {
        return String::new();
    }
    passage_tokens[pred.start - 1..=pred.end - 1].join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn inject_widths_and_identity() {
        let mut tape = Tape::<f64>::new();
        let e = tape.constant(ArrayD::zeros(IxDyn(&[2, 3, 350])));
        let s = tape.constant(ArrayD::zeros(IxDyn(&[2, 3, 512])));
        let out = inject(&mut tape, e, Some(s)).unwrap();
        assert_eq!(tape.shape(out), &[2, 3, 862]);
        let same = inject(&mut tape, e, None).unwrap();
        assert_eq!(same, e);
    }

    #[test]
    fn inject_length_mismatch_is_error() {
        let mut tape = Tape::<f64>::new();
        let e = tape.constant(ArrayD::zeros(IxDyn(&[1, 3, 4])));
        let s = tape.constant(ArrayD::zeros(IxDyn(&[1, 4, 4])));
        assert!(matches!(
            inject(&mut tape, e, Some(s)),
            Err(MrcError::InjectLength { a: 3, b: 4 })
        ));
    }

    fn head(seed: u64, input_width: usize, h: usize) -> (ParamStore<f64>, MrcHeadParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = MrcHeadParams::register(&mut store, &mut rng, input_width, h);
        (store, p)
    }

    fn ones_mask(b: usize, t: usize) -> ArrayD<f64> {
        ArrayD::from_elem(IxDyn(&[b, t, 1]), 1.0)
    }

    #[test]
    fn attention_flow_output_width_is_4d() {
        let (store, p) = head(1, 6, 2); // d = 4
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h_p =
            tape.constant(ArrayD::from_shape_fn(IxDyn(&[1, 3, 4]), |_| rng.random_range(-1.0..1.0)));
        let u_q =
            tape.constant(ArrayD::from_shape_fn(IxDyn(&[1, 2, 4]), |_| rng.random_range(-1.0..1.0)));
        let g = attention_flow(&mut tape, &store, &p, h_p, u_q, &ones_mask(1, 3), &ones_mask(1, 2));
        assert_eq!(tape.shape(g), &[1, 3, 16]);
    }

    #[test]
    fn single_question_token_attends_fully() {
        let (store, p) = head(2, 6, 2);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h_p =
            tape.constant(ArrayD::from_shape_fn(IxDyn(&[1, 3, 4]), |_| rng.random_range(-1.0..1.0)));
        let uq_val = ArrayD::from_shape_fn(IxDyn(&[1, 1, 4]), |_| rng.random_range(-1.0..1.0));
        let u_q = tape.constant(uq_val.clone());
        let g = attention_flow(&mut tape, &store, &p, h_p, u_q, &ones_mask(1, 3), &ones_mask(1, 1));
        // ĉ_t (columns d..2d of G) equals the single question vector for all t
        let gv = tape.value(g);
        for t in 0..3 {
            for d in 0..4 {
                assert!((gv[[0, t, 4 + d]] - uq_val[[0, 0, d]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn attention_flow_hand_instance_matches_direct_evaluation() {
        // B=1, T_p=2, T_q=2, d=2 with hand-set weights
        let (mut store, p) = head(3, 6, 1); // hidden 1 -> d = 2
        let w = ndarray::ArrayD::from_shape_vec(
            IxDyn(&[6]),
            vec![0.5, -1.0, 1.0, 0.25, -0.5, 2.0],
        )
        .unwrap();
        store.value_mut(p.w_sim).assign(&w);
        let hp = ndarray::arr3(&[[[1.0, 0.0], [0.5, -1.0]]]).into_dyn();
        let uq = ndarray::arr3(&[[[0.0, 1.0], [1.0, 1.0]]]).into_dyn();
        let mut tape = Tape::new();
        let h_p = tape.constant(hp.clone());
        let u_q = tape.constant(uq.clone());
        let g = attention_flow(&mut tape, &store, &p, h_p, u_q, &ones_mask(1, 2), &ones_mask(1, 2));

        // direct evaluation with plain arrays
        let (w_h, w_u, w_hu) = ([0.5, -1.0], [1.0, 0.25], [-0.5, 2.0]);
        let mut s = [[0.0f64; 2]; 2];
        for t in 0..2 {
            for j in 0..2 {
                let mut v = 0.0;
                for d in 0..2 {
                    v += w_h[d] * hp[[0, t, d]]
                        + w_u[d] * uq[[0, j, d]]
                        + w_hu[d] * hp[[0, t, d]] * uq[[0, j, d]];
                }
                s[t][j] = v;
            }
        }
        let mut c_hat = [[0.0f64; 2]; 2];
        for t in 0..2 {
            let mx = s[t][0].max(s[t][1]);
            let e0 = (s[t][0] - mx).exp();
            let e1 = (s[t][1] - mx).exp();
            let z = e0 + e1;
            for d in 0..2 {
                c_hat[t][d] = e0 / z * uq[[0, 0, d]] + e1 / z * uq[[0, 1, d]];
            }
        }
        let m = [s[0][0].max(s[0][1]), s[1][0].max(s[1][1])];
        let mx = m[0].max(m[1]);
        let b0 = (m[0] - mx).exp();
        let b1 = (m[1] - mx).exp();
        let z = b0 + b1;
        let mut q_tilde = [0.0f64; 2];
        for d in 0..2 {
            q_tilde[d] = b0 / z * hp[[0, 0, d]] + b1 / z * hp[[0, 1, d]];
        }
        let gv = tape.value(g);
        for t in 0..2 {
            for d in 0..2 {
                assert!((gv[[0, t, d]] - hp[[0, t, d]]).abs() < 1e-6);
                assert!((gv[[0, t, 2 + d]] - c_hat[t][d]).abs() < 1e-6, "c_hat t={t} d={d}");
                assert!(
                    (gv[[0, t, 4 + d]] - hp[[0, t, d]] * c_hat[t][d]).abs() < 1e-6,
                    "h*c t={t} d={d}"
                );
                assert!(
                    (gv[[0, t, 6 + d]] - hp[[0, t, d]] * q_tilde[d]).abs() < 1e-6,
                    "h*q t={t} d={d}"
                );
            }
        }
    }

    #[test]
    fn span_logits_shape_and_null_target() {
        let (store, p) = head(4, 6, 2);
        let d = 4;
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = tape
            .constant(ArrayD::from_shape_fn(IxDyn(&[2, 5, 4 * d]), |_| rng.random_range(-0.5..0.5)));
        let mask = ones_mask(2, 5);
        let m = modeling_layer(&mut tape, &store, &p, g, &mask);
        let (sl, el) = predict_span(&mut tape, &store, &p, g, m, &mask);
        assert_eq!(tape.shape(sl), &[2, 6]);
        assert_eq!(tape.shape(el), &[2, 6]);

        // unanswerable gold -> target indices (0,0); certainty -> loss ~ 0
        let mut sv = ArrayD::from_elem(IxDyn(&[1, 3]), 0.0);
        sv[[0, 0]] = 50.0;
        let start = tape.constant(sv.clone());
        let end = tape.constant(sv);
        let loss = mrc_loss(&mut tape, start, end, &[None], &[None], &[2]).unwrap();
        assert!(tape.value(loss)[IxDyn(&[])] < 1e-9);
    }

    #[test]
    fn uniform_loss_is_two_ln_eleven() {
        let mut tape = Tape::<f64>::new();
        let start = tape.constant(ArrayD::zeros(IxDyn(&[1, 11])));
        let end = tape.constant(ArrayD::zeros(IxDyn(&[1, 11])));
        let loss =
            mrc_loss(&mut tape, start, end, &[Some(2)], &[Some(4)], &[10]).unwrap();
        let v = tape.value(loss)[IxDyn(&[])];
        assert!((v - 2.0 * 11.0f64.ln()).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn hand_loss_matches_direct_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let sv = ArrayD::from_shape_vec(IxDyn(&[1, 3]), vec![0.1, 1.2, -0.3]).unwrap();
        let ev = ArrayD::from_shape_vec(IxDyn(&[1, 3]), vec![-0.4, 0.9, 2.0]).unwrap();
        let start = tape.constant(sv.clone());
        let end = tape.constant(ev.clone());
        let loss = mrc_loss(&mut tape, start, end, &[Some(0)], &[Some(1)], &[2]).unwrap();
        let lse = |v: &[f64]| {
            let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
        };
        let expect = -(sv[[0, 1]] - lse(&[0.1, 1.2, -0.3])) - (ev[[0, 2]] - lse(&[-0.4, 0.9, 2.0]));
        assert!((tape.value(loss)[IxDyn(&[])] - expect).abs() < 1e-9);
    }

    #[test]
    fn out_of_range_span_target_is_error() {
        let mut tape = Tape::<f64>::new();
        let start = tape.constant(ArrayD::zeros(IxDyn(&[1, 3])));
        let end = tape.constant(ArrayD::zeros(IxDyn(&[1, 3])));
        let err = mrc_loss(&mut tape, start, end, &[Some(5)], &[Some(5)], &[2]).unwrap_err();
        assert!(matches!(err, MrcError::TargetRange { .. }));
    }

    #[test]
    fn decode_null_dominates() {
        let start = [10.0, 0.0, 1.0];
        let end = [10.0, 0.5, 0.2];
        let pred = decode_answer(&start, &end, 5, 0.0).unwrap();
        assert!(pred.is_null);
        assert_eq!((pred.start, pred.end), (0, 0));
        assert_eq!(pred.null_score, 20.0);
    }

    #[test]
    fn decode_monotone_peak() {
        // peak start at s=3, end at e=5, within cap
        let start = [0.0, 0.1, 0.2, 5.0, 0.1, 0.0];
        let end = [0.0, 0.0, 0.1, 0.2, 0.3, 4.0];
        let pred = decode_answer(&start, &end, 4, 0.0).unwrap();
        assert!(!pred.is_null);
        assert_eq!((pred.start, pred.end), (3, 5));
    }

    #[test]
    fn decode_cap_one_forces_s_equals_e() {
        let start = [0.0, 3.0, 0.0];
        let end = [0.0, 0.0, 4.0];
        let pred = decode_answer(&start, &end, 1, 0.0).unwrap();
        assert_eq!(pred.start, pred.end);
        // pairs (1,1): 3.0, (2,2): 4.0 -> picks (2,2)
        assert_eq!((pred.start, pred.end), (2, 2));
    }

    #[test]
    fn decode_empty_passage_errors() {
        let start = [1.0];
        let end = [1.0];
        assert!(matches!(decode_answer(&start, &end, 3, 0.0), Err(MrcError::EmptyPassage)));
    }

    #[test]
    fn render_answer_empty_for_null() {
        let toks: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let null = SpanPrediction {
            qid: "q".into(),
            start: 0,
            end: 0,
            is_null: true,
            score: 0.0,
            null_score: 1.0,
        };
        assert_eq!(render_answer(&null, &toks), "");
        let span = SpanPrediction {
            qid: "q".into(),
            start: 2,
            end: 3,
            is_null: false,
            score: 1.0,
            null_score: 0.0,
        };
        assert_eq!(render_answer(&span, &toks), "b c");
    }

    #[test]
    fn decode_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..500 {
            let t_p = rng.random_range(1..=20usize);
            let cap = rng.random_range(1..=8usize);
            let thr = rng.random_range(-1.0..1.0);
            let start: Vec<f64> = (0..=t_p).map(|_| rng.random_range(-3.0..3.0)).collect();
            let end: Vec<f64> = (0..=t_p).map(|_| rng.random_range(-3.0..3.0)).collect();
            let got = decode_answer(&start, &end, cap, thr).unwrap();

            // exhaustive enumeration
            let mut best: Option<(f64, usize, usize)> = None;
            for s in 1..=t_p {
                for e in s..=t_p {
                    if e >= s + cap {
                        continue;
                    }
                    let sc = start[s] + end[e];
                    if best.map_or(true, |(b, _, _)| sc > b) {
                        best = Some((sc, s, e));
                    }
                }
            }
            let (bsc, bs, be) = best.unwrap();
            let null = start[0] + end[0];
            if null > bsc + thr {
                assert!(got.is_null);
            } else {
                assert!(!got.is_null);
                assert_eq!((got.start, got.end), (bs, be));
            }
        }
    }
}
