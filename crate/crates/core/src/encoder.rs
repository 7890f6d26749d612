//! Shared sequence encoder: a BiLSTM and a single-head scaled dot-product
//! self-attention branch run in parallel over the input embeddings, their
//! outputs concatenated per token. Also produces the sentence summary
//! (forward final state ⊕ backward first state) at true lengths.

use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::tensor::{fl, Scalar, Tape, Var};

/// Weights of one LSTM direction. Gate order in the fused matrices is
/// input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct LstmParams {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmParams {
    pub fn register(
        store: &mut ParamStore<impl Scalar>,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        input_dim: usize,
        hidden_dim: usize,
    ) -> Self {
        let wx = store.register(
            &format!("{name}.wx"),
            group,
            &[input_dim, 4 * hidden_dim],
            Init::Uniform(0.08),
            rng,
        );
        let wh = store.register(
            &format!("{name}.wh"),
            group,
            &[hidden_dim, 4 * hidden_dim],
            Init::Uniform(0.08),
            rng,
        );
        let b = store.register(
            &format!("{name}.b"),
            group,
            &[4 * hidden_dim],
            Init::Zeros,
            rng,
        );
        LstmParams { wx, wh, b, input_dim, hidden_dim }
    }
}

/// A forward/backward LSTM pair of equal dimensions.
#[derive(Debug, Clone)]
pub struct BiLstmParams {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

impl BiLstmParams {
    pub fn register(
        store: &mut ParamStore<impl Scalar>,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        input_dim: usize,
        hidden_dim: usize,
    ) -> Self {
        BiLstmParams {
            fwd: LstmParams::register(store, rng, &format!("{name}.fwd"), group, input_dim, hidden_dim),
            bwd: LstmParams::register(store, rng, &format!("{name}.bwd"), group, input_dim, hidden_dim),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.fwd.hidden_dim
    }
}

/// Single-head attention projections sharing input width `d_model`.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub d_model: usize,
    pub d_k: usize,
}

impl AttentionParams {
    pub fn register(
        store: &mut ParamStore<impl Scalar>,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        d_model: usize,
        d_k: usize,
    ) -> Self {
        let mut proj = |suffix: &str, store: &mut ParamStore<_>, rng: &mut ChaCha8Rng| {
            store.register(
                &format!("{name}.{suffix}"),
                group,
                &[d_model, d_k],
                Init::Uniform(0.08),
                rng,
            )
        };
        let w_q = proj("w_q", store, rng);
        let w_k = proj("w_k", store, rng);
        let w_v = proj("w_v", store, rng);
        AttentionParams { w_q, w_k, w_v, d_model, d_k }
    }
}

/// Shared-encoder weights: BiLSTM plus optional attention branch
/// (`d_attn = 0` disables attention).
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub bilstm: BiLstmParams,
    pub attention: Option<AttentionParams>,
}

impl EncoderParams {
    pub fn register(
        store: &mut ParamStore<impl Scalar>,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        input_dim: usize,
        hidden_dim: usize,
        d_attn: usize,
    ) -> Self {
        let bilstm =
            BiLstmParams::register(store, rng, &format!("{name}.bilstm"), group, input_dim, hidden_dim);
        let attention = (d_attn > 0).then(|| {
            AttentionParams::register(store, rng, &format!("{name}.attn"), group, input_dim, d_attn)
        });
        EncoderParams { bilstm, attention }
    }

    /// Per-token output width: 2h + d_attn.
    pub fn token_width(&self) -> usize {
        2 * self.bilstm.hidden_dim() + self.attention.as_ref().map_or(0, |a| a.d_k)
    }
}

/// Encoder result: per-token states (masked positions zeroed), the sentence
/// summary, and the 0/1 mask the heads should reuse.
pub struct EncoderOutput<F: Scalar> {
    pub token_states: Var,
    pub summary: Var,
    pub mask: ArrayD<F>,
}

/// Builds an `[B,T,1]`-shaped float mask from a 0/1 byte mask.
pub fn float_mask<F: Scalar>(mask: &Array2<u8>) -> ArrayD<F> {
    let (b, t) = mask.dim();
    let mut out = ArrayD::<F>::zeros(IxDyn(&[b, t, 1]));
    for bi in 0..b {
        for ti in 0..t {
            out[[bi, ti, 0]] = fl((mask[[bi, ti]] > 0) as u8 as f64);
        }
    }
    out
}

/// One LSTM direction over a padded batch with mask gating: at padded
/// steps the state carries over unchanged, so final states are taken at
/// true lengths and appended padding never perturbs earlier outputs.
/// Returns per-step states `[B,T,h]` (unzeroed) and the carried final state.
pub fn lstm_direction<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    params: &LstmParams,
    x: Var,
    mask: &ArrayD<F>,
    reverse: bool,
) -> (Var, Var) {
    let shape = tape.shape(x).to_vec();
    assert_eq!(shape.len(), 3, "lstm: input must be [B,T,D]");
    let (b, t_max, d) = (shape[0], shape[1], shape[2]);
    assert_eq!(d, params.input_dim, "lstm: input width {d} vs {}", params.input_dim);
    let h = params.hidden_dim;

    let wx = tape.param(params.wx, store.value(params.wx));
    let wh = tape.param(params.wh, store.value(params.wh));
    let bias = tape.param(params.b, store.value(params.b));

    let mut state_h = tape.constant(ArrayD::zeros(IxDyn(&[b, h])));
    let mut state_c = tape.constant(ArrayD::zeros(IxDyn(&[b, h])));
    let mut steps: Vec<Var> = vec![state_h; t_max];

    let order: Vec<usize> =
        if reverse { (0..t_max).rev().collect() } else { (0..t_max).collect() };
    for t in order {
        let x_t = tape.slice_time(x, t);
        let from_x = tape.matmul(x_t, wx);
        let from_h = tape.matmul(state_h, wh);
        let pre = tape.add(from_x, from_h);
        let pre = tape.add(pre, bias);
        let gi = tape.slice_last(pre, 0, h);
        let gf = tape.slice_last(pre, h, h);
        let gc = tape.slice_last(pre, 2 * h, h);
        let go = tape.slice_last(pre, 3 * h, h);
        let i = tape.sigmoid(gi);
        let f = tape.sigmoid(gf);
        let c_hat = tape.tanh(gc);
        let o = tape.sigmoid(go);
        let fc = tape.mul(f, state_c);
        let ic = tape.mul(i, c_hat);
        let c_new = tape.add(fc, ic);
        let tanh_c = tape.tanh(c_new);
        let h_new = tape.mul(o, tanh_c);

        // m_t gates the update: padded steps keep the previous state.
        let m_t: Array2<F> = Array2::from_shape_fn((b, 1), |(bi, _)| mask[[bi, t, 0]]);
        let m_t = m_t.into_dyn();
        let one_minus: ArrayD<F> = m_t.mapv(|v| F::one() - v);
        let gated_new_h = tape.mul_const(h_new, &m_t);
        let kept_h = tape.mul_const(state_h, &one_minus);
        state_h = tape.add(gated_new_h, kept_h);
        let gated_new_c = tape.mul_const(c_new, &m_t);
        let kept_c = tape.mul_const(state_c, &one_minus);
        state_c = tape.add(gated_new_c, kept_c);

        steps[t] = state_h;
    }
    let states = tape.stack_time(&steps);
    (states, state_h)
}

/// Bidirectional encoding. `states[b,t]` is the forward ⊕ backward state at
/// `t`, zeroed for `t >= lengths[b]`; `summary[b]` is the forward state at
/// the last true token ⊕ the backward state at the first token.
pub fn bilstm_encode<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    params: &BiLstmParams,
    x: Var,
    mask: &ArrayD<F>,
) -> (Var, Var) {
    let value = tape.value(x);
    assert!(
        value.iter().all(|v| v.is_finite()),
        "bilstm_encode: non-finite input"
    );
    let (fwd_states, fwd_final) = lstm_direction(tape, store, &params.fwd, x, mask, false);
    let (bwd_states, bwd_first) = lstm_direction(tape, store, &params.bwd, x, mask, true);
    let states = tape.concat_last(&[fwd_states, bwd_states]);
    let states = tape.mul_const(states, mask);
    let summary = tape.concat_last(&[fwd_final, bwd_first]);
    (states, summary)
}

/// `softmax(Q Kᵀ / √d_k) V` with key-side masking; each attention row over
/// unmasked keys sums to one. Rows of the output at padded query positions
/// are meaningless and must be masked by the caller.
pub fn self_attend<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    params: &AttentionParams,
    x: Var,
    mask: &ArrayD<F>,
) -> Var {
    let shape = tape.shape(x).to_vec();
    assert_eq!(shape[2], params.d_model, "self_attend: width {} vs {}", shape[2], params.d_model);
    let (b, t) = (shape[0], shape[1]);
    let w_q = tape.param(params.w_q, store.value(params.w_q));
    let w_k = tape.param(params.w_k, store.value(params.w_k));
    let w_v = tape.param(params.w_v, store.value(params.w_v));
    let q = tape.linear(x, w_q);
    let k = tape.linear(x, w_k);
    let v = tape.linear(x, w_v);
    let scores = tape.bmm_nt(q, k); // [B,T,T]
    let scores = tape.scale(scores, fl::<F>(1.0 / (params.d_k as f64).sqrt()));
    // key mask broadcast over query rows: [B,1,T]
    let key_mask = mask
        .clone()
        .into_shape_with_order(IxDyn(&[b, 1, t]))
        .expect("self_attend: mask shape");
    let attn = tape.masked_softmax(scores, &key_mask);
    tape.bmm(attn, v)
}

/// Full shared-encoder forward: BiLSTM ⊕ attention per token, plus summary.
pub fn encode<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    params: &EncoderParams,
    x: Var,
    mask: &ArrayD<F>,
) -> EncoderOutput<F> {
    let (states, summary) = bilstm_encode(tape, store, &params.bilstm, x, mask);
    let token_states = match &params.attention {
        Some(attn) => {
            let ctx = self_attend(tape, store, attn, x, mask);
            let cat = tape.concat_last(&[states, ctx]);
            tape.mul_const(cat, mask)
        }
        None => states,
    };
    EncoderOutput { token_states, summary, mask: mask.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;

    fn mask_from(lengths: &[usize], t_max: usize) -> ArrayD<f64> {
        let b = lengths.len();
        ArrayD::from_shape_fn(IxDyn(&[b, t_max, 1]), |ix| {
            if ix[1] < lengths[ix[0]] {
                1.0
            } else {
                0.0
            }
        })
    }

    fn random_input(b: usize, t: usize, d: usize, seed: u64) -> ArrayD<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(&[b, t, d]), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn single_step_summary_equals_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let p = BiLstmParams::register(&mut store, &mut rng, "enc", ParamGroup::SharedEncoder, 4, 3);
        let mut tape = Tape::new();
        let x = tape.constant(random_input(2, 1, 4, 1));
        let mask = mask_from(&[1, 1], 1);
        let (states, summary) = bilstm_encode(&mut tape, &store, &p, x, &mask);
        let sv = tape.value(states).to_owned();
        let sm = tape.value(summary);
        for bi in 0..2 {
            for d in 0..6 {
                assert!((sv[[bi, 0, d]] - sm[[bi, d]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let p = BiLstmParams::register(&mut store, &mut rng, "enc", ParamGroup::SharedEncoder, 4, 3);
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).fill(0.0);
        }
        let mut tape = Tape::new();
        let x = tape.constant(random_input(1, 3, 4, 2));
        let mask = mask_from(&[3], 3);
        let (states, _) = bilstm_encode(&mut tape, &store, &p, x, &mask);
        assert!(tape.value(states).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn summary_taken_at_true_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let p = BiLstmParams::register(&mut store, &mut rng, "enc", ParamGroup::SharedEncoder, 4, 3);
        // batch row with length 2 padded to 4 must match the unpadded run
        let x_full = random_input(1, 2, 4, 9);
        let mut x_padded = ArrayD::zeros(IxDyn(&[1, 4, 4]));
        for t in 0..2 {
            for d in 0..4 {
                x_padded[[0, t, d]] = x_full[[0, t, d]];
            }
        }
        let mut tape1 = Tape::new();
        let x1 = tape1.constant(x_full);
        let (_, sum1) = bilstm_encode(&mut tape1, &store, &p, x1, &mask_from(&[2], 2));
        let mut tape2 = Tape::new();
        let x2 = tape2.constant(x_padded);
        let (states2, sum2) = bilstm_encode(&mut tape2, &store, &p, x2, &mask_from(&[2], 4));
        for d in 0..6 {
            assert!((tape1.value(sum1)[[0, d]] - tape2.value(sum2)[[0, d]]).abs() < 1e-12);
        }
        // padded tail positions are zeroed
        let sv = tape2.value(states2);
        for t in 2..4 {
            for d in 0..6 {
                assert_eq!(sv[[0, t, d]], 0.0);
            }
        }
    }

    #[test]
    fn attention_singleton_returns_v_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new();
        let p = AttentionParams::register(&mut store, &mut rng, "attn", ParamGroup::SharedEncoder, 4, 2);
        let mut tape = Tape::new();
        let xv = random_input(1, 1, 4, 3);
        let x = tape.constant(xv.clone());
        let mask = ArrayD::from_elem(IxDyn(&[1, 1, 1]), 1.0);
        let out = self_attend(&mut tape, &store, &p, x, &mask);
        // expected: x @ w_v exactly (weight 1.0 on the only token)
        let x2 = xv.to_shape((1, 4)).unwrap().to_owned();
        let wv = store.value(p.w_v).to_shape((4, 2)).unwrap().to_owned();
        let expect = x2.dot(&wv);
        let got = tape.value(out);
        for d in 0..2 {
            assert!((got[[0, 0, d]] - expect[[0, d]]).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut store = ParamStore::<f64>::new();
        let p = AttentionParams::register(&mut store, &mut rng, "attn", ParamGroup::SharedEncoder, 3, 2);
        // two identical tokens: every query row weights them 0.5/0.5, so the
        // output equals the (shared) V projection of either token.
        let mut x = Array3::<f64>::zeros((1, 2, 3));
        for t in 0..2 {
            x[[0, t, 0]] = 0.3;
            x[[0, t, 1]] = -0.7;
            x[[0, t, 2]] = 0.1;
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.into_dyn());
        let mask = ArrayD::from_elem(IxDyn(&[1, 2, 1]), 1.0);
        let out = self_attend(&mut tape, &store, &p, xv, &mask);
        let got = tape.value(out);
        for d in 0..2 {
            assert!((got[[0, 0, d]] - got[[0, 1, d]]).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_computed_attention_matches() {
        // B=1, T=3, d_model=2, d_k=2 with hand-set projections
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut store = ParamStore::<f64>::new();
        let p = AttentionParams::register(&mut store, &mut rng, "attn", ParamGroup::SharedEncoder, 2, 2);
        store.value_mut(p.w_q).assign(&ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]).into_dyn());
        store.value_mut(p.w_k).assign(&ndarray::arr2(&[[0.0, 1.0], [1.0, 0.0]]).into_dyn());
        store.value_mut(p.w_v).assign(&ndarray::arr2(&[[2.0, 0.0], [0.0, -1.0]]).into_dyn());
        let x = ndarray::arr3(&[[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.into_dyn());
        let mask = ArrayD::from_elem(IxDyn(&[1, 3, 1]), 1.0);
        let out = self_attend(&mut tape, &store, &p, xv, &mask);

        // direct evaluation: Q=x, K=x@wk, V=x@wv, scores=QK^T/sqrt(2)
        let q = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let k = ndarray::arr2(&[[0.0, 1.0], [1.0, 0.0], [1.0, 1.0]]);
        let v = ndarray::arr2(&[[2.0, 0.0], [0.0, -1.0], [2.0, -1.0]]);
        let scores = q.dot(&k.t()) / 2.0f64.sqrt();
        let mut expect = ndarray::Array2::<f64>::zeros((3, 2));
        for i in 0..3 {
            let row = scores.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&s| (s - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..3 {
                for d in 0..2 {
                    expect[[i, d]] += exps[j] / z * v[[j, d]];
                }
            }
        }
        let got = tape.value(out);
        for t in 0..3 {
            for d in 0..2 {
                assert!((got[[0, t, d]] - expect[[t, d]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn encode_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut store = ParamStore::<f64>::new();
        let p = EncoderParams::register(&mut store, &mut rng, "enc", ParamGroup::SharedEncoder, 5, 4, 4);
        assert_eq!(p.token_width(), 12);
        let mut tape = Tape::new();
        let x = tape.constant(random_input(2, 3, 5, 7));
        let mask = mask_from(&[3, 2], 3);
        let out = encode(&mut tape, &store, &p, x, &mask);
        assert_eq!(tape.shape(out.token_states), &[2, 3, 12]);
        assert_eq!(tape.shape(out.summary), &[2, 8]);
        // masked tail position zeroed
        let v = tape.value(out.token_states);
        for d in 0..12 {
            assert_eq!(v[[1, 2, d]], 0.0);
        }

        // d_attn = 0 disables attention
        let mut store2 = ParamStore::<f64>::new();
        let p2 = EncoderParams::register(&mut store2, &mut rng, "enc", ParamGroup::SharedEncoder, 5, 4, 0);
        assert_eq!(p2.token_width(), 8);
    }
}
