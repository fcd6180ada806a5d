//! Bag-of-hashed-tokens instruction embedding.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const DEFAULT_TEXT_DIM: usize = 32;
pub const DEFAULT_VOCAB: usize = 4096;
const DEFAULT_SEED: u64 = 0x7e47;

/// Words that must never share a bucket; the task verb is the strongest
/// signal an instruction carries.
const DISTINCT: &[&str] = &["add", "remove"];

#[derive(Clone, Debug)]
pub struct TextEmbedder {
    vocab: usize,
    dim: usize,
    table: Vec<f32>,
}

impl Default for TextEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_VOCAB, DEFAULT_TEXT_DIM, DEFAULT_SEED).expect("default text embedder")
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

fn fnv1a(token: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in token.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl TextEmbedder {
    pub fn new(vocab: usize, dim: usize, seed: u64) -> Result<Self> {
        if vocab == 0 || dim == 0 {
            return Err(Error::invalid("text embedder vocab and dim must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let table = (0..vocab * dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * scale) as f32
            })
            .collect();
        let emb = Self { vocab, dim, table };
        let buckets: Vec<usize> = DISTINCT.iter().map(|w| emb.bucket(w)).collect();
        for i in 0..buckets.len() {
            for j in i + 1..buckets.len() {
                if buckets[i] == buckets[j] {
                    return Err(Error::config(format!(
                        "text embedder: {:?} and {:?} collide in a {vocab}-bucket table",
                        DISTINCT[i], DISTINCT[j]
                    )));
                }
            }
        }
        Ok(emb)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a(token) % self.vocab as u64) as usize
    }

    /// Mean of the token rows; an empty instruction embeds to zeros.
    pub fn embed(&self, instruction: &str) -> Vec<f32> {
        let tokens = tokenize(instruction);
        let mut out = vec![0f32; self.dim];
        if tokens.is_empty() {
            log::warn!("empty instruction embeds to the zero vector");
            return out;
        }
        for tok in &tokens {
            let row = self.bucket(tok) * self.dim;
            for (o, v) in out.iter_mut().zip(&self.table[row..row + self.dim]) {
                *o += v;
            }
        }
        let n = tokens.len() as f32;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }

    /// `[B, D]` batch of embeddings.
    pub fn embed_batch<S: AsRef<str>>(&self, instructions: &[S], dtype: DType, device: &Device) -> Result<Tensor> {
        let mut data = Vec::with_capacity(instructions.len() * self.dim);
        for s in instructions {
            data.extend(self.embed(s.as_ref()));
        }
        Ok(Tensor::from_vec(data, (instructions.len(), self.dim), device)?.to_dtype(dtype)?)
    }
}

/// Embedding of one instruction with the default embedder.
pub fn embed_text(instruction: &str) -> Vec<f32> {
    thread_local! {
        static DEFAULT: TextEmbedder = TextEmbedder::default();
    }
    DEFAULT.with(|e| e.embed(instruction))
}
