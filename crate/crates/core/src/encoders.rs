//! Trainable toy encoders standing in for pretrained text and vision
//! backbones.
//!
//! A pretrained backbone plugs in by producing the same two matrices: one
//! row per *word* for text (subword encoders pool by taking each word's first
//! subword) and `k + 1` rows for regions, row 0 being the embedding of a blank
//! image used as the ungroundable slot.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{AttentionBlock, Linear};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Matrix;
use crate::types::CandidateRegion;

pub const UNK: &str = "<unk>";
pub const MASK: &str = "[MASK]";

/// Word vocabulary; id 0 is the unknown word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self { words, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    /// Vocabulary over `words` in first-seen order, after `<unk>` and `[MASK]`.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut list = vec![UNK.to_string(), MASK.to_string()];
        let mut seen: HashMap<String, usize> = list
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        for w in words {
            if !seen.contains_key(w) {
                seen.insert(w.to_string(), list.len());
                list.push(w.to_string());
            }
        }
        Self {
            words: list,
            index: seen,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// `n × h` word-level text representation.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoding(pub Matrix);

/// `(k + 1) × h` region representation; row 0 is the ungroundable token.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionEncoding(pub Matrix);

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub embedding: ParamId,
    pub positions: Option<ParamId>,
    pub blocks: Vec<AttentionBlock>,
}

impl TextEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        vocab_size: usize,
        dim: usize,
        heads: usize,
        depth: usize,
        max_positions: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let g = ParamGroup::Encoder;
        let embedding = store.add_normal("text.embedding", g, vocab_size, dim, 1.0, rng);
        let positions =
            max_positions.map(|m| store.add_normal("text.positions", g, m, dim, 0.1, rng));
        let blocks = (0..depth)
            .map(|i| AttentionBlock::new(store, &format!("text.block{i}"), g, dim, heads, rng))
            .collect();
        Self {
            embedding,
            positions,
            blocks,
        }
    }

    /// Encode a token-id sequence into an `n × h` node.
    pub fn encode(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::invalid("cannot encode an empty token sequence"));
        }
        let table = g.param(self.embedding);
        let mut x = g.gather_rows(table, ids);
        if let Some(pos) = self.positions {
            let max = g.store().value(pos).rows();
            let idx: Vec<usize> = (0..ids.len()).map(|i| i.min(max - 1)).collect();
            let table = g.param(pos);
            let p = g.gather_rows(table, &idx);
            x = g.add(x, p);
        }
        for block in &self.blocks {
            x = block.forward(g, x, x).out;
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
pub struct VisionEncoder {
    pub proj: Linear,
    pub ungroundable: ParamId,
    pub raw_dim: usize,
}

impl VisionEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, raw_dim: usize, dim: usize, rng: &mut R) -> Self {
        let g = ParamGroup::Encoder;
        Self {
            proj: Linear::new(store, "vision.proj", g, raw_dim, dim, true, rng),
            ungroundable: store.add_normal("vision.ungroundable", g, 1, dim, 1.0, rng),
            raw_dim,
        }
    }

    /// Raw region features as a `k × raw_dim` matrix.
    pub fn raw_features(&self, regions: &[CandidateRegion]) -> Result<Matrix> {
        for (i, r) in regions.iter().enumerate() {
            if r.feature.len() != self.raw_dim {
                return Err(Error::invalid(format!(
                    "region {i} has feature dimension {} (expected {})",
                    r.feature.len(),
                    self.raw_dim
                )));
            }
        }
        let data = regions.iter().flat_map(|r| r.feature.iter().copied()).collect();
        Ok(Matrix::from_vec(regions.len(), self.raw_dim, data))
    }

    /// `(k + 1) × h` node with the ungroundable row first, then the
    /// projected regions in input order.
    pub fn encode(&self, g: &mut Graph, regions: &[CandidateRegion]) -> Result<Var> {
        let ug = g.param(self.ungroundable);
        if regions.is_empty() {
            return Ok(ug);
        }
        let raw = self.raw_features(regions)?;
        let raw = g.input(raw);
        let projected = self.proj.forward(g, raw);
        Ok(g.concat_rows(&[ug, projected]))
    }
}

/// Freeze or release the encoder parameter group.
pub fn freeze(store: &mut ParamStore, frozen: bool) {
    store.set_group_frozen(ParamGroup::Encoder, frozen);
}
