//! Per-token input representation: character CNN features, word embeddings
//! and optional fixed contextual features, concatenated in that order.

use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::datasets::{PaddedSeqs, Vocabulary};
use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::tensor::{fl, Scalar, Tape, Var};

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("contextual feature provider returned {got} rows for {expected} tokens")]
    ProviderLength { expected: usize, got: usize },
    #[error("glove file {path}: {message}")]
    Glove { path: String, message: String },
}

/// Character-CNN weights: embedding table, one convolution bank, bias.
/// The per-word output width equals `num_filters` regardless of word length.
#[derive(Debug, Clone)]
pub struct CharCnnParams {
    pub char_embed: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub char_vocab_size: usize,
    pub char_embed_dim: usize,
    pub kernel_width: usize,
    pub num_filters: usize,
}

impl CharCnnParams {
    pub fn register(
        store: &mut ParamStore<impl Scalar>,
        rng: &mut ChaCha8Rng,
        char_vocab_size: usize,
        char_embed_dim: usize,
        kernel_width: usize,
        num_filters: usize,
        pad_id: usize,
    ) -> Self {
        assert!(kernel_width >= 1 && num_filters >= 1);
        let char_embed = store.register(
            "embed.char_table",
            ParamGroup::Embeddings,
            &[char_vocab_size, char_embed_dim],
            Init::Uniform(0.1),
            rng,
        );
        zero_row(store, char_embed, pad_id);
        store.freeze_row(char_embed, pad_id);
        let conv_w = store.register(
            "embed.char_conv_w",
            ParamGroup::Embeddings,
            &[kernel_width * char_embed_dim, num_filters],
            Init::Uniform(0.08),
            rng,
        );
        let conv_b = store.register(
            "embed.char_conv_b",
            ParamGroup::Embeddings,
            &[num_filters],
            Init::Zeros,
            rng,
        );
        CharCnnParams {
            char_embed,
            conv_w,
            conv_b,
            char_vocab_size,
            char_embed_dim,
            kernel_width,
            num_filters,
        }
    }
}

/// Word embedding table; the padding row stays zero and is never updated.
#[derive(Debug, Clone)]
pub struct WordEmbeddingTable {
    pub table: ParamId,
    pub trainable: bool,
    pub vocab_size: usize,
    pub dim: usize,
}

impl WordEmbeddingTable {
    pub fn register<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        vocab_size: usize,
        dim: usize,
        pad_id: usize,
        pretrained: Option<Array2<F>>,
        trainable: bool,
    ) -> Self {
        let table = store.register(
            "embed.word_table",
            ParamGroup::Embeddings,
            &[vocab_size, dim],
            Init::Uniform(0.1),
            rng,
        );
        if let Some(pre) = pretrained {
            assert_eq!(pre.shape(), &[vocab_size, dim], "pretrained table shape");
            store.value_mut(table).assign(&pre.into_dyn());
        }
        zero_row(store, table, pad_id);
        store.freeze_row(table, pad_id);
        if !trainable {
            store.set_trainable(table, false);
        }
        WordEmbeddingTable { table, trainable, vocab_size, dim }
    }
}

fn zero_row<F: Scalar>(store: &mut ParamStore<F>, id: ParamId, row: usize) {
    let v = store.value_mut(id);
    let d = v.shape()[1];
    for j in 0..d {
        v[[row, j]] = F::zero();
    }
}

/// Fixed (non-trained) per-token features, e.g. from a pretrained language
/// model run offline. Output row count must equal the token count.
pub trait ContextualFeatureProvider {
    fn dim(&self) -> usize;
    fn features(&self, tokens: &[String]) -> Array2<f64>;
}

/// Disabled provider: zero features of a configurable width (0 = off).
#[derive(Debug, Clone, Default)]
pub struct ZeroProvider {
    pub d_ctx: usize,
}

impl ContextualFeatureProvider for ZeroProvider {
    fn dim(&self) -> usize {
        self.d_ctx
    }

    fn features(&self, tokens: &[String]) -> Array2<f64> {
        Array2::zeros((tokens.len(), self.d_ctx))
    }
}

/// All embedding-layer parameters.
#[derive(Debug, Clone)]
pub struct EmbeddingParams {
    pub char_cnn: CharCnnParams,
    pub word: WordEmbeddingTable,
    pub d_ctx: usize,
}

impl EmbeddingParams {
    /// Total per-token width: num_filters + d_word + d_ctx.
    pub fn d_in(&self) -> usize {
        self.char_cnn.num_filters + self.word.dim + self.d_ctx
    }
}

/// Max-over-time pooled 1-D convolution over character embeddings.
/// `char_ids` is `[B,T,C]` with `C >= kernel_width` (pad short words).
pub fn embed_chars<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    params: &CharCnnParams,
    char_ids: &ndarray::Array3<usize>,
) -> Var {
    let c = char_ids.shape()[2];
    assert!(c >= 1, "embed_chars: empty char axis");
    assert!(
        c >= params.kernel_width,
        "embed_chars: {c} chars < kernel width {} (pad words first)",
        params.kernel_width
    );
    let table = tape.param(params.char_embed, store.value(params.char_embed));
    let ids = char_ids.clone().into_dyn();
    let embeds = tape.lookup(table, &ids); // [B,T,C,d_char]
    let windows = tape.unfold_chars(embeds, params.kernel_width); // [B,T,W,k*d_char]
    let w = tape.param(params.conv_w, store.value(params.conv_w));
    let b = tape.param(params.conv_b, store.value(params.conv_b));
    let conv = tape.linear(windows, w);
    let conv = tape.add(conv, b);
    tape.max_axis(conv, 2) // [B,T,num_filters]
}

/// Full input representation for a padded batch:
/// char features ⊕ word embedding ⊕ contextual features, `[B,T,d_in]`.
pub fn embed_tokens<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    params: &EmbeddingParams,
    provider: &dyn ContextualFeatureProvider,
    seqs: &PaddedSeqs,
) -> Result<Var, EmbeddingError> {
    let chars = embed_chars(tape, store, &params.char_cnn, &seqs.char_ids);
    let table = tape.param(params.word.table, store.value(params.word.table));
    let words = tape.lookup(table, &seqs.token_ids.clone().into_dyn());
    let mut parts = vec![chars, words];
    if params.d_ctx > 0 {
        assert_eq!(provider.dim(), params.d_ctx, "provider width mismatch");
        let (b, t_max) = (seqs.batch_size(), seqs.max_len());
        let mut ctx = ArrayD::<F>::zeros(IxDyn(&[b, t_max, params.d_ctx]));
        for (bi, tokens) in seqs.tokens.iter().enumerate() {
            let feats = provider.features(tokens);
            if feats.nrows() != tokens.len() {
                return Err(EmbeddingError::ProviderLength {
                    expected: tokens.len(),
                    got: feats.nrows(),
                });
            }
            for (ti, row) in feats.rows().into_iter().enumerate() {
                for (di, &x) in row.iter().enumerate() {
                    ctx[[bi, ti, di]] = fl(x);
                }
            }
        }
        parts.push(tape.constant(ctx));
    }
    Ok(tape.concat_last(&parts))
}

/// Reads a text embedding file of `token v1 ... vd` lines into a table
/// aligned with `vocab`. Tokens absent from the file keep their random
/// initialization; returns the table and the number of rows filled.
pub fn load_glove<F: Scalar>(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Array2<F>, usize), EmbeddingError> {
    let text = std::fs::read_to_string(path).map_err(|e| EmbeddingError::Glove {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut table = Array2::from_shape_fn((vocab.size(), dim), |_| {
        fl::<F>(rng.random_range(-0.1..0.1))
    });
    let mut hits = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let Some(token) = it.next() else { continue };
        if !vocab.contains(token) {
            continue;
        }
        let values: Vec<f64> = it
            .map(|v| {
                v.parse::<f64>().map_err(|_| EmbeddingError::Glove {
                    path: path.display().to_string(),
                    message: format!("line {}: bad float {v:?}", lineno + 1),
                })
            })
            .collect::<Result<_, _>>()?;
        if values.len() != dim {
            return Err(EmbeddingError::Glove {
                path: path.display().to_string(),
                message: format!("line {}: {} values, expected {dim}", lineno + 1, values.len()),
            });
        }
        let row = vocab.id(token);
        for (j, &v) in values.iter().enumerate() {
            table[[row, j]] = fl(v);
        }
        hits += 1;
    }
    Ok((table, hits))
}
