//! Deterministic padded batching for both tasks.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MrcExample, SluExample, Vocabulary};

/// Label set with stable string/index mapping (intents, slot tags).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelMap {
    names: Vec<String>,
}

impl LabelMap {
    /// Deterministic: sorted unique names.
    pub fn from_names<I: IntoIterator<Item = String>>(names: I) -> Self {
        let mut names: Vec<String> = names.into_iter().collect();
        names.sort();
        names.dedup();
        LabelMap { names }
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.binary_search_by(|n| n.as_str().cmp(name)).ok()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// One padded token block: ids, char ids, true lengths and the 0/1 mask.
#[derive(Debug, Clone)]
pub struct PaddedSeqs {
    pub token_ids: Array2<usize>,
    pub char_ids: Array3<usize>,
    pub lengths: Vec<usize>,
    pub mask: Array2<u8>,
    /// Raw token strings, for contextual feature providers.
    pub tokens: Vec<Vec<String>>,
}

impl PaddedSeqs {
    pub fn batch_size(&self) -> usize {
        self.token_ids.nrows()
    }

    pub fn max_len(&self) -> usize {
        self.token_ids.ncols()
    }
}

/// Pads a batch of token sequences; `min_chars` keeps words convolvable.
pub fn pad_sequences(
    seqs: &[&[String]],
    word_vocab: &Vocabulary,
    char_vocab: &Vocabulary,
    min_chars: usize,
) -> PaddedSeqs {
    let b = seqs.len();
    let t_max = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let c_max = seqs
        .iter()
        .flat_map(|s| s.iter().map(|w| w.chars().count()))
        .max()
        .unwrap_or(1)
        .max(min_chars);
    let mut token_ids = Array2::from_elem((b, t_max), word_vocab.pad_id);
    let mut char_ids = Array3::from_elem((b, t_max, c_max), char_vocab.pad_id);
    let mut mask = Array2::zeros((b, t_max));
    let mut lengths = Vec::with_capacity(b);
    for (bi, seq) in seqs.iter().enumerate() {
        lengths.push(seq.len());
        for (ti, tok) in seq.iter().enumerate() {
            token_ids[[bi, ti]] = word_vocab.id(tok);
            mask[[bi, ti]] = 1;
            for (ci, ch) in tok.chars().enumerate() {
                char_ids[[bi, ti, ci]] = char_vocab.id(&ch.to_string());
            }
        }
    }
    PaddedSeqs {
        token_ids,
        char_ids,
        lengths,
        mask,
        tokens: seqs.iter().map(|s| s.to_vec()).collect(),
    }
}

/// One batch of reading-comprehension examples.
#[derive(Debug, Clone)]
pub struct MrcBatch {
    pub qids: Vec<String>,
    pub passage: PaddedSeqs,
    pub question: PaddedSeqs,
    /// Inclusive token spans; `None` = unanswerable (virtual-null target).
    pub answer_start: Vec<Option<usize>>,
    pub answer_end: Vec<Option<usize>>,
}

/// One batch of utterances with intent and slot targets.
#[derive(Debug, Clone)]
pub struct SluBatch {
    pub utterance: PaddedSeqs,
    pub intents: Vec<usize>,
    /// [B, T_max], padded entries are 0 and masked out of the loss.
    pub slot_tags: Array2<usize>,
}

/// Deterministic batch index order: shuffled once per call when `shuffle`,
/// then chunked. Every index appears exactly once.
pub fn batch_order(n: usize, batch_size: usize, seed: u64, shuffle: bool) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut idx: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
    }
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

pub fn collate_mrc(
    examples: &[&MrcExample],
    word_vocab: &Vocabulary,
    char_vocab: &Vocabulary,
    min_chars: usize,
) -> MrcBatch {
    let passages: Vec<&[String]> = examples.iter().map(|e| e.passage_tokens.as_slice()).collect();
    let questions: Vec<&[String]> = examples.iter().map(|e| e.question_tokens.as_slice()).collect();
    MrcBatch {
        qids: examples.iter().map(|e| e.qid.clone()).collect(),
        passage: pad_sequences(&passages, word_vocab, char_vocab, min_chars),
        question: pad_sequences(&questions, word_vocab, char_vocab, min_chars),
        answer_start: examples.iter().map(|e| e.answer_start_token).collect(),
        answer_end: examples.iter().map(|e| e.answer_end_token).collect(),
    }
}

pub fn collate_slu(
    examples: &[&SluExample],
    word_vocab: &Vocabulary,
    char_vocab: &Vocabulary,
    intents: &LabelMap,
    slots: &LabelMap,
    min_chars: usize,
) -> SluBatch {
    let utts: Vec<&[String]> = examples.iter().map(|e| e.tokens.as_slice()).collect();
    let utterance = pad_sequences(&utts, word_vocab, char_vocab, min_chars);
    let t_max = utterance.max_len();
    let mut slot_tags = Array2::zeros((examples.len(), t_max));
    for (bi, ex) in examples.iter().enumerate() {
        for (ti, tag) in ex.slots.iter().enumerate() {
            slot_tags[[bi, ti]] =
                slots.index(tag).unwrap_or_else(|| panic!("unknown slot tag {tag:?}"));
        }
    }
    SluBatch {
        utterance,
        intents: examples
            .iter()
            .map(|e| {
                intents
                    .index(&e.intent)
                    .unwrap_or_else(|| panic!("unknown intent {:?}", e.intent))
            })
            .collect(),
        slot_tags,
    }
}

/// Full-epoch batch stream over MRC examples, deterministic in `seed`.
pub fn make_mrc_batches(
    examples: &[MrcExample],
    word_vocab: &Vocabulary,
    char_vocab: &Vocabulary,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
    min_chars: usize,
) -> Vec<MrcBatch> {
    batch_order(examples.len(), batch_size, seed, shuffle)
        .into_iter()
        .map(|idxs| {
            let batch: Vec<&MrcExample> = idxs.iter().map(|&i| &examples[i]).collect();
            collate_mrc(&batch, word_vocab, char_vocab, min_chars)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn make_slu_batches(
    examples: &[SluExample],
    word_vocab: &Vocabulary,
    char_vocab: &Vocabulary,
    intents: &LabelMap,
    slots: &LabelMap,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
    min_chars: usize,
) -> Vec<SluBatch> {
    batch_order(examples.len(), batch_size, seed, shuffle)
        .into_iter()
        .map(|idxs| {
            let batch: Vec<&SluExample> = idxs.iter().map(|&i| &examples[i]).collect();
            collate_slu(&batch, word_vocab, char_vocab, intents, slots, min_chars)
        })
        .collect()
}
