//! Hashing tokenizer and learned embedding table standing in for a text encoder.

use crate::tensor::Mat;

use super::layers::{Grads, ParamId, ParamStore};

/// Row 0 of the table is the null token; prompt words hash into rows `1..vocab`.
pub const NULL_TOKEN: usize = 0;

/// Fixed-length sequence of condition vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    pub tokens: Mat,
    pub is_null: bool,
    pub(crate) ids: Vec<usize>,
}

impl ConditionEmbedding {
    pub fn token_ids(&self) -> &[usize] {
        &self.ids
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
    pub len: usize,
}

fn fnv1a(word: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in word.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercased alphanumeric words of a prompt.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

impl TextEncoder {
    pub fn word_id(&self, word: &str) -> usize {
        1 + (fnv1a(word) % (self.vocab as u64 - 1)) as usize
    }

    /// Token ids padded with the null token to the fixed length; extra words
    /// are truncated.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = words(text).iter().take(self.len).map(|w| self.word_id(w)).collect();
        ids.resize(self.len, NULL_TOKEN);
        ids
    }

    pub fn embed_ids(&self, ps: &ParamStore, ids: &[usize]) -> ConditionEmbedding {
        let table = ps.get(self.table);
        let mut tokens = Mat::zeros(ids.len(), self.dim);
        for (r, id) in ids.iter().enumerate() {
            tokens.row_mut(r).copy_from_slice(&table[id * self.dim..(id + 1) * self.dim]);
        }
        ConditionEmbedding {
            tokens,
            is_null: ids.iter().all(|i| *i == NULL_TOKEN),
            ids: ids.to_vec(),
        }
    }

    pub fn embed(&self, ps: &ParamStore, text: &str) -> ConditionEmbedding {
        self.embed_ids(ps, &self.tokenize(text))
    }

    pub fn null(&self, ps: &ParamStore) -> ConditionEmbedding {
        self.embed_ids(ps, &vec![NULL_TOKEN; self.len])
    }

    /// Scatters token-row gradients back into the table.
    pub fn backward(&self, grads: &mut Grads, ids: &[usize], dtokens: &Mat) {
        let g = grads.get_mut(self.table);
        for (r, id) in ids.iter().enumerate() {
            for (dst, src) in g[id * self.dim..(id + 1) * self.dim].iter_mut().zip(dtokens.row(r)) {
                *dst += src;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn encoder() -> (ParamStore, TextEncoder) {
        let mut ps = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let table = ps.add_normal("text.table", vec![64, 4], 1.0, &mut rng);
        (
            ps,
            TextEncoder {
                table,
                vocab: 64,
                dim: 4,
                len: 5,
            },
        )
    }

    #[test]
    fn empty_prompt_is_null() {
        let (ps, enc) = encoder();
        let e = enc.embed(&ps, "");
        assert!(e.is_null);
        assert_eq!(e, enc.null(&ps));
        assert!(!enc.embed(&ps, "empty scene").is_null);
    }

    #[test]
    fn tokenizer_normalizes_and_pads() {
        let (_, enc) = encoder();
        assert_eq!(enc.tokenize("A Red, circle!"), enc.tokenize("a red circle"));
        let ids = enc.tokenize("one two three four five six seven");
        assert_eq!(ids.len(), 5);
        assert!(enc.tokenize("x").iter().skip(1).all(|i| *i == NULL_TOKEN));
    }

    #[test]
    fn caption_vocabulary_has_no_collisions() {
        let (_, enc) = encoder();
        let enc = TextEncoder {
            vocab: crate::backbone::DenoiserConfig::default().vocab_size,
            ..enc
        };
        let mut seen = std::collections::HashMap::new();
        for caption in crate::backbone::dataset::all_captions() {
            for w in words(&caption) {
                let id = enc.word_id(&w);
                let prev = seen.entry(id).or_insert_with(|| w.clone());
                assert_eq!(*prev, w, "words share token {id}");
            }
        }
    }
}
