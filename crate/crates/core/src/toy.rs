//! Seeded toy checkpoints and corpora for desk-scale experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::engine::TokenSequence;
use crate::error::Result;
use crate::store::{self, Dtype, HeadRef, Tensor, TensorData, TensorStore};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small default config used by `gen-toy` and the test suites.
pub fn default_config() -> ModelConfig {
    ModelConfig {
        max_seq_len: 64,
        ..ModelConfig::new(3, 2, 8, 4, 16, 12)
    }
}

/// A checkpoint with every engine tensor drawn uniformly from
/// `±1/sqrt(fan_in)`.
pub fn random_store(cfg: &ModelConfig, seed: u64, dtype: Dtype) -> TensorStore {
    let mut rng = rng(seed);
    let mut store = TensorStore::new(Some(*cfg));
    for (name, shape) in store::expected_shapes(cfg) {
        let fan_in = if name == store::EMBED_NAME { 1 } else { shape[0] };
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        let data = match dtype {
            Dtype::F64 => TensorData::F64(values),
            Dtype::F32 => TensorData::F32(values.into_iter().map(|v| v as f32).collect()),
        };
        store.insert(name, Tensor::new(shape, data).expect("shape product matches"));
    }
    store
}

/// Random model whose listed heads are exact copies of earlier heads, and
/// whose non-final layers write nothing back to the residual stream.
///
/// Every layer therefore sees the token embeddings as input, so a copied head
/// produces the same attention map as its source on every input.
pub fn planted_duplicates(cfg: &ModelConfig, seed: u64, copies: &[(HeadRef, HeadRef)]) -> Result<TensorStore> {
    let mut store = random_store(cfg, seed, Dtype::F64);
    for layer in 0..cfg.num_layers.saturating_sub(1) {
        for name in [store::attn_name(layer, "wo"), store::ffn_name(layer, "down")] {
            let t = store.get_mut(&name)?;
            *t = t.zeros_like_f64();
        }
    }
    for &(src, dst) in copies {
        store::copy_head(&mut store, cfg, src, dst)?;
    }
    Ok(store)
}

/// Sequences from a sparse Markov chain: each token has one preferred
/// successor taken with probability 0.8, otherwise the next token is uniform.
pub fn markov_corpus(cfg: &ModelConfig, seed: u64, count: usize, len: usize) -> Vec<TokenSequence> {
    let mut rng = rng(seed);
    let v = cfg.vocab_size;
    let successor: Vec<usize> = (0..v).map(|_| rng.random_range(0..v)).collect();
    (0..count)
        .map(|_| {
            let mut ids = Vec::with_capacity(len);
            let mut cur = rng.random_range(0..v);
            for _ in 0..len {
                ids.push(cur);
                cur = if rng.random_bool(0.8) {
                    successor[cur]
                } else {
                    rng.random_range(0..v)
                };
            }
            TokenSequence::new_unchecked(ids)
        })
        .collect()
}

/// Uniformly random sequences.
pub fn random_sequences(cfg: &ModelConfig, seed: u64, count: usize, len: usize) -> Vec<TokenSequence> {
    let mut rng = rng(seed);
    (0..count)
        .map(|_| TokenSequence::new_unchecked((0..len).map(|_| rng.random_range(0..cfg.vocab_size)).collect()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_store_is_seeded() {
        let cfg = default_config();
        assert_eq!(random_store(&cfg, 3, Dtype::F64), random_store(&cfg, 3, Dtype::F64));
        assert_ne!(random_store(&cfg, 3, Dtype::F64), random_store(&cfg, 4, Dtype::F64));
        random_store(&cfg, 3, Dtype::F64).validate_against(&cfg).unwrap();
    }

    #[test]
    fn corpus_ids_in_range() {
        let cfg = default_config();
        for seq in markov_corpus(&cfg, 1, 10, 9) {
            assert_eq!(seq.len(), 9);
            assert!(seq.ids().iter().all(|&t| t < cfg.vocab_size));
        }
    }
}
