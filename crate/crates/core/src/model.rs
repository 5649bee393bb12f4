//! Deterministic toy bidirectional transformer used as the mask predictor:
//! token + learned absolute position embeddings, pre-norm residual blocks
//! with multi-head bidirectional self-attention and a two-layer feed-forward,
//! then a vocabulary head.
//!
//! Weights are untrained: every tensor entry comes from a counter-based
//! generator keyed on `(init_seed, tensor name, flat index)`, so a config
//! reproduces its weights bit-for-bit. The forward passes expose per-layer
//! Q/K/V so the cache and analysis layers can work with exactly the matrices
//! attention consumed.

use serde::{Deserialize, Serialize};

use crate::cache::LayerCache;
use crate::error::{EngineError, Result};
use crate::numerics::{matmul, rms_norm_rows, softmax_rows, Matrix, OpCounter};

/// Model shape and seed. The mask token is always the last vocabulary id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn mask_token_id(&self) -> u32 {
        (self.vocab_size - 1) as u32
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(EngineError::Config(
                "vocab_size: need at least one real token besides the mask token".into(),
            ));
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(EngineError::Config(format!("{name}: must be >= 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(EngineError::Config(format!(
                "d_model: {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Strict JSON parse: unknown fields are rejected.
    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_slice(bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_json_bytes(&bytes)
    }
}

#[derive(Debug, Clone)]
struct LayerWeights {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    ff_in: Matrix,
    ff_out: Matrix,
}

/// Immutable weight set; shareable across threads once initialized.
#[derive(Debug, Clone)]
pub struct ModelWeights {
    config: ModelConfig,
    token_embedding: Matrix,    // vocab_size x d_model
    position_embedding: Matrix, // max_seq_len x d_model
    layers: Vec<LayerWeights>,
    output_head: Matrix, // d_model x vocab_size
}

/// Per-layer Q/K/V as used by attention in one forward pass. Row count is
/// the number of token positions fed to the layer in that pass.
#[derive(Debug, Clone)]
pub struct LayerQkv {
    pub layer: usize,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

/// Output of a full-sequence forward pass.
pub struct FullForward {
    /// L x vocab logits.
    pub logits: Matrix,
    /// Q/K/V for all positions, one entry per layer.
    pub layer_qkv: Vec<LayerQkv>,
    /// Mean-over-heads post-softmax attention (L x L per layer), when requested.
    pub attention: Option<Vec<Matrix>>,
}

/// Output of a cached block forward pass.
pub struct BlockForward {
    /// b x vocab logits for the block positions.
    pub logits: Matrix,
    /// Fresh Q/K/V for the block positions only, one entry per layer.
    pub layer_qkv: Vec<LayerQkv>,
}

/// Counter-based weight init: FNV-1a over the tensor name mixed with the
/// seed and flat index through the splitmix64 finalizer, mapped to
/// [-0.05, 0.05). Stateless, so any entry can be recomputed independently.
fn tensor_entry(seed: u64, name: &str, index: u64) -> f64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100000001b3);
    }
    let mut z = seed
        .wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add(h)
        .wrapping_add(index.wrapping_mul(0xD1B54A32D192ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^= z >> 31;
    ((z >> 11) as f64 / (1u64 << 53) as f64) * 0.1 - 0.05
}

fn init_tensor(seed: u64, name: &str, rows: usize, cols: usize) -> Matrix {
    let mut idx = 0u64;
    Matrix::from_fn(rows, cols, |_, _| {
        let v = tensor_entry(seed, name, idx);
        idx += 1;
        v
    })
}

/// Builds the full weight set for a config. Same config, same bits.
pub fn init_weights(config: &ModelConfig) -> Result<ModelWeights> {
    config.validate()?;
    let d = config.d_model;
    let seed = config.init_seed;
    let layers = (0..config.n_layers)
        .map(|l| LayerWeights {
            wq: init_tensor(seed, &format!("layer{l}.wq"), d, d),
            wk: init_tensor(seed, &format!("layer{l}.wk"), d, d),
            wv: init_tensor(seed, &format!("layer{l}.wv"), d, d),
            wo: init_tensor(seed, &format!("layer{l}.wo"), d, d),
            ff_in: init_tensor(seed, &format!("layer{l}.ff_in"), d, config.d_ff),
            ff_out: init_tensor(seed, &format!("layer{l}.ff_out"), config.d_ff, d),
        })
        .collect();
    Ok(ModelWeights {
        token_embedding: init_tensor(seed, "token_embedding", config.vocab_size, d),
        position_embedding: init_tensor(seed, "position_embedding", config.max_seq_len, d),
        layers,
        output_head: init_tensor(seed, "output_head", d, config.vocab_size),
        config: config.clone(),
    })
}

/// Scaled dot-product attention over `n_heads` column-blocks of Q/K/V.
///
/// Only the score pass (Q Kᵀ) and the value pass (A V) go through the
/// counter, so the tally stays equal to `2 * rows * keys * d_model` per call.
fn multi_head_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    n_heads: usize,
    counter: &mut OpCounter,
    capture_attention: bool,
) -> Result<(Matrix, Option<Matrix>)> {
    let d_model = q.cols();
    let head_dim = d_model / n_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut out = Matrix::zeros(q.rows(), d_model);
    let mut mean_attention = capture_attention.then(|| Matrix::zeros(q.rows(), k.rows()));

    for h in 0..n_heads {
        let qh = q.slice_cols(h * head_dim, head_dim);
        let kh = k.slice_cols(h * head_dim, head_dim);
        let vh = v.slice_cols(h * head_dim, head_dim);
        let scores = matmul(&qh, &kh.transpose(), counter)?.scale(scale);
        let probs = softmax_rows(&scores);
        if let Some(acc) = mean_attention.as_mut() {
            let w = 1.0 / n_heads as f64;
            for r in 0..probs.rows() {
                for c in 0..probs.cols() {
                    acc.set(r, c, acc.get(r, c) + w * probs.get(r, c));
                }
            }
        }
        let head_out = matmul(&probs, &vh, counter)?;
        out.set_cols(h * head_dim, &head_out);
    }
    Ok((out, mean_attention))
}

fn relu_inplace(m: &mut Matrix) {
    for r in 0..m.rows() {
        for v in m.row_mut(r) {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
}

impl ModelWeights {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn token_embedding(&self) -> &Matrix {
        &self.token_embedding
    }

    fn embed(&self, tokens: &[u32], positions_start: usize) -> Result<Matrix> {
        let d = self.config.d_model;
        let mut h = Matrix::zeros(tokens.len(), d);
        for (i, &tok) in tokens.iter().enumerate() {
            if tok as usize >= self.config.vocab_size {
                return Err(EngineError::Input(format!(
                    "token id {tok} out of vocabulary (size {})",
                    self.config.vocab_size
                )));
            }
            let row = h.row_mut(i);
            let te = self.token_embedding.row(tok as usize);
            let pe = self.position_embedding.row(positions_start + i);
            for j in 0..d {
                row[j] = te[j] + pe[j];
            }
        }
        Ok(h)
    }

    fn feed_forward(&self, layer: &LayerWeights, h: &Matrix) -> Result<Matrix> {
        let f = rms_norm_rows(h);
        let mut hidden = f.matmul(&layer.ff_in)?;
        relu_inplace(&mut hidden);
        let projected = hidden.matmul(&layer.ff_out)?;
        h.add(&projected)
    }

    /// Full bidirectional forward over all `tokens.len()` positions.
    pub fn forward_full(
        &self,
        tokens: &[u32],
        capture_attention: bool,
        counter: &mut OpCounter,
    ) -> Result<FullForward> {
        if tokens.is_empty() {
            return Err(EngineError::Input("forward of an empty sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(EngineError::Capacity(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }

        let mut h = self.embed(tokens, 0)?;
        let mut layer_qkv = Vec::with_capacity(self.config.n_layers);
        let mut attention = capture_attention.then(Vec::new);

        for (li, lw) in self.layers.iter().enumerate() {
            let a = rms_norm_rows(&h);
            let q = a.matmul(&lw.wq)?;
            let k = a.matmul(&lw.wk)?;
            let v = a.matmul(&lw.wv)?;
            let (attn_out, attn_probs) =
                multi_head_attention(&q, &k, &v, self.config.n_heads, counter, capture_attention)?;
            h = h.add(&attn_out.matmul(&lw.wo)?)?;
            h = self.feed_forward(lw, &h)?;
            layer_qkv.push(LayerQkv { layer: li, q, k, v });
            if let (Some(traces), Some(probs)) = (attention.as_mut(), attn_probs) {
                traces.push(probs);
            }
        }

        let logits = rms_norm_rows(&h).matmul(&self.output_head)?;
        debug_assert!(logits.all_finite());
        Ok(FullForward {
            logits,
            layer_qkv,
            attention,
        })
    }

    /// Forward over the current block only, attending cached K/V for all
    /// other positions. Cached entries are concatenated before the block's
    /// fresh keys; attention is permutation-invariant over keys, so the
    /// order is a convention.
    pub fn forward_block_with_cache(
        &self,
        block_tokens: &[u32],
        block_start: usize,
        caches: &[LayerCache],
        counter: &mut OpCounter,
    ) -> Result<BlockForward> {
        let b = block_tokens.len();
        if b == 0 {
            return Err(EngineError::Input("forward of an empty block".into()));
        }
        if block_start + b > self.config.max_seq_len {
            return Err(EngineError::Capacity(format!(
                "block [{block_start}, {}) exceeds max_seq_len {}",
                block_start + b,
                self.config.max_seq_len
            )));
        }
        if caches.len() != self.config.n_layers {
            return Err(EngineError::CacheState(format!(
                "expected {} layer caches, got {}",
                self.config.n_layers,
                caches.len()
            )));
        }

        let mut h = self.embed(block_tokens, block_start)?;
        let mut layer_qkv = Vec::with_capacity(self.config.n_layers);

        for (li, lw) in self.layers.iter().enumerate() {
            let cache = &caches[li];
            if cache.is_empty() {
                return Err(EngineError::CacheState(format!(
                    "layer {li} cache is empty"
                )));
            }
            let a = rms_norm_rows(&h);
            let q = a.matmul(&lw.wq)?;
            let k = a.matmul(&lw.wk)?;
            let v = a.matmul(&lw.wv)?;
            let k_all = cache.k_c.vstack(&k)?;
            let v_all = cache.v_c.vstack(&v)?;
            let (attn_out, _) =
                multi_head_attention(&q, &k_all, &v_all, self.config.n_heads, counter, false)?;
            h = h.add(&attn_out.matmul(&lw.wo)?)?;
            h = self.feed_forward(lw, &h)?;
            layer_qkv.push(LayerQkv { layer: li, q, k, v });
        }

        let logits = rms_norm_rows(&h).matmul(&self.output_head)?;
        debug_assert!(logits.all_finite());
        Ok(BlockForward { logits, layer_qkv })
    }
}
