//! Named parameter registry partitioned into update groups.
//!
//! The alternating trainer freezes whole groups, so every trainable tensor
//! must belong to exactly one [`ParamGroup`]. Groups are hashed bit-wise in
//! tests to assert the freeze contract.

use std::collections::HashMap;
use std::hash::Hasher;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{fl, Scalar};

/// Update group a parameter belongs to.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum ParamGroup {
    Embeddings,
    SharedEncoder,
    SluDecoders,
    MrcHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Embeddings,
        ParamGroup::SharedEncoder,
        ParamGroup::SluDecoders,
        ParamGroup::MrcHead,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ParamGroup::Embeddings => "embeddings",
            ParamGroup::SharedEncoder => "shared_encoder",
            ParamGroup::SluDecoders => "slu_decoders",
            ParamGroup::MrcHead => "mrc_head",
        }
    }
}

/// Handle to a registered parameter tensor.
pub type ParamId = usize;

/// Initialization scheme for a freshly registered tensor.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    /// Uniform in [-a, a].
    Uniform(f64),
}

struct ParamRecord<F: Scalar> {
    name: String,
    group: ParamGroup,
    value: ArrayD<F>,
    trainable: bool,
    /// Row whose gradient is forced to zero (embedding padding row).
    frozen_row: Option<usize>,
}

/// All trainable state of a model, in registration order.
pub struct ParamStore<F: Scalar> {
    records: Vec<ParamRecord<F>>,
    by_name: HashMap<String, ParamId>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { records: Vec::new(), by_name: HashMap::new() }
    }

    pub fn register(
        &mut self,
        name: &str,
        group: ParamGroup,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "parameter {name} registered twice"
        );
        let value = match init {
            Init::Zeros => ArrayD::zeros(IxDyn(shape)),
            Init::Uniform(a) => {
                let n: usize = shape.iter().product();
                let data: Vec<F> =
                    (0..n).map(|_| fl(rng.random_range(-a..a))).collect();
                ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
            }
        };
        self.records.push(ParamRecord {
            name: name.to_string(),
            group,
            value,
            trainable: true,
            frozen_row: None,
        });
        let id = self.records.len() - 1;
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<F> {
        &self.records[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.records[id].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.records[id].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.records[id].group
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        0..self.records.len()
    }

    pub fn ids_in_group(&self, group: ParamGroup) -> Vec<ParamId> {
        (0..self.records.len()).filter(|&i| self.records[i].group == group).collect()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.records[id].trainable = trainable;
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.records[id].trainable
    }

    /// Mark one row of a 2-d parameter as non-updatable (padding row).
    pub fn freeze_row(&mut self, id: ParamId, row: usize) {
        assert_eq!(self.records[id].value.ndim(), 2, "freeze_row: not a matrix");
        self.records[id].frozen_row = Some(row);
    }

    pub fn frozen_row(&self, id: ParamId) -> Option<usize> {
        self.records[id].frozen_row
    }

    /// Bit-wise hash of every tensor in a group, for freeze assertions.
    pub fn group_hash(&self, group: ParamGroup) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for r in &self.records {
            if r.group != group {
                continue;
            }
            h.write(r.name.as_bytes());
            for &x in r.value.iter() {
                h.write_u64(x.to_f64().unwrap().to_bits());
            }
        }
        h.finish()
    }

    /// Largest absolute difference between two stores with identical layout.
    pub fn max_abs_diff(&self, other: &Self, group: ParamGroup) -> f64 {
        let mut m = 0.0f64;
        for (a, b) in self.records.iter().zip(&other.records) {
            if a.group != group {
                continue;
            }
            for (&x, &y) in a.value.iter().zip(b.value.iter()) {
                m = m.max((x.to_f64().unwrap() - y.to_f64().unwrap()).abs());
            }
        }
        m
    }

    /// Overwrites every tensor with the values of a layout-identical store.
    pub fn copy_values_from(&mut self, other: &ParamStore<F>) {
        assert_eq!(self.records.len(), other.records.len(), "store layout mismatch");
        for (a, b) in self.records.iter_mut().zip(&other.records) {
            debug_assert_eq!(a.name, b.name, "store layout mismatch");
            a.value.assign(&b.value);
        }
    }

    /// Convert every tensor to another precision, keeping names and groups.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for r in &self.records {
            let value = r.value.mapv(|x| G::from(x).unwrap());
            out.records.push(ParamRecord {
                name: r.name.clone(),
                group: r.group,
                value,
                trainable: r.trainable,
                frozen_row: r.frozen_row,
            });
            out.by_name.insert(r.name.clone(), out.records.len() - 1);
        }
        out
    }

    /// Checks that the four groups are disjoint and cover every tensor.
    /// (Disjointness is structural; this validates coverage counts.)
    pub fn partition_counts(&self) -> HashMap<ParamGroup, usize> {
        let mut counts = HashMap::new();
        for r in &self.records {
            *counts.entry(r.group).or_insert(0) += 1;
        }
        counts
    }
}
