//! Block-wise iterative unmasking.
//!
//! A decode run starts from the prompt followed by `gen_len` mask tokens and
//! walks the generation region block by block, left to right. Each step runs
//! the mask predictor (full or cached, as the cache state machine dictates),
//! greedily predicts every masked position in the current block, and commits
//! a fixed per-step budget of them. After `total_steps` steps no masks
//! remain.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{CacheManager, CachePolicy, CacheState, LayerCache};
use crate::error::{EngineError, Result};
use crate::harness::RunReport;
use crate::model::{LayerQkv, ModelConfig, ModelWeights};
use crate::numerics::{Matrix, OpCounter};

/// Token sequence plus mask flags at one point of the unmasking schedule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceState {
    tokens: Vec<u32>,
    is_masked: Vec<bool>,
    prompt_len: usize,
}

impl SequenceState {
    /// Prompt followed by `gen_len` mask tokens.
    pub fn init(prompt: &[u32], gen_len: usize, model_cfg: &ModelConfig) -> Result<Self> {
        if prompt.is_empty() {
            return Err(EngineError::Input("prompt must not be empty".into()));
        }
        let mask = model_cfg.mask_token_id();
        for &t in prompt {
            if t >= mask {
                return Err(EngineError::Input(format!(
                    "prompt token {t} is not a regular vocabulary id (mask id is {mask})"
                )));
            }
        }
        let total = prompt.len() + gen_len;
        if total > model_cfg.max_seq_len {
            return Err(EngineError::Capacity(format!(
                "prompt {} + gen_len {gen_len} exceeds max_seq_len {}",
                prompt.len(),
                model_cfg.max_seq_len
            )));
        }
        let mut tokens = prompt.to_vec();
        tokens.resize(total, mask);
        let mut is_masked = vec![false; prompt.len()];
        is_masked.resize(total, true);
        Ok(SequenceState {
            tokens,
            is_masked,
            prompt_len: prompt.len(),
        })
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn is_masked(&self, position: usize) -> bool {
        self.is_masked[position]
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.is_masked.iter().filter(|&&m| m).count()
    }

    /// FNV-1a over the little-endian token bytes; stable across runs.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for t in &self.tokens {
            for b in t.to_le_bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

/// Which masked positions a step commits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnmaskRule {
    /// Highest prediction confidence first (ties toward the lower position).
    Confidence,
    /// Uniformly sampled masked positions from the seeded generator.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub total_steps: usize,
    pub gen_len: usize,
    pub block_len: usize,
    pub unmask_rule: UnmaskRule,
    pub rng_seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            total_steps: 256,
            gen_len: 256,
            block_len: 32,
            unmask_rule: UnmaskRule::Confidence,
            rng_seed: 2025,
        }
    }
}

impl DecodeConfig {
    pub fn num_blocks(&self) -> usize {
        self.gen_len.checked_div(self.block_len).unwrap_or(0)
    }

    pub fn steps_per_block(&self) -> usize {
        self.total_steps.checked_div(self.num_blocks()).unwrap_or(0)
    }

    /// Masked positions committed per step.
    pub fn tokens_per_step(&self) -> usize {
        self.block_len.checked_div(self.steps_per_block()).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gen_len == 0 {
            // zero-step degenerate run; nothing to schedule
            return Ok(());
        }
        if self.block_len == 0 {
            return Err(EngineError::Config("block_len: must be >= 1".into()));
        }
        if !self.gen_len.is_multiple_of(self.block_len) {
            return Err(EngineError::Config(format!(
                "gen_len: {} not divisible by block_len {}",
                self.gen_len, self.block_len
            )));
        }
        let blocks = self.num_blocks();
        if self.total_steps == 0 || !self.total_steps.is_multiple_of(blocks) {
            return Err(EngineError::Config(format!(
                "total_steps: {} not divisible by num_blocks {blocks}",
                self.total_steps
            )));
        }
        let spb = self.steps_per_block();
        if !self.block_len.is_multiple_of(spb) {
            return Err(EngineError::Config(format!(
                "block_len: {} not divisible by steps_per_block {spb}",
                self.block_len
            )));
        }
        Ok(())
    }
}

/// Position of one decoding step inside the block grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSchedule {
    pub block_index: usize,
    /// Offset of the block's first token in the sequence.
    pub offset: usize,
    pub length: usize,
    pub step_in_block: usize,
}

/// Greedy prediction for one masked position of the current block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPrediction {
    pub position: usize,
    pub token: u32,
    pub confidence: f64,
}

/// Greedy decoding over the masked positions of the current block: argmax of
/// the softmaxed logits row, excluding the mask token so the final sequence
/// can never contain it. Argmax ties break toward the lower token id.
///
/// `logits` may cover the whole sequence (full pass) or just the block
/// (cached pass); row indexing adapts to whichever it is.
pub fn greedy_predict(
    logits: &Matrix,
    state: &SequenceState,
    block: &BlockSchedule,
    mask_token_id: u32,
) -> Result<Vec<BlockPrediction>> {
    let row_base = if logits.rows() == state.len() {
        0
    } else if logits.rows() == block.length {
        block.offset
    } else {
        return Err(EngineError::Input(format!(
            "logits rows {} cover neither the sequence ({}) nor the block ({})",
            logits.rows(),
            state.len(),
            block.length
        )));
    };

    let mut predictions = Vec::new();
    for pos in block.offset..block.offset + block.length {
        if !state.is_masked(pos) {
            continue;
        }
        let row = logits.row(pos - row_base);
        let mut best: Option<(usize, f64)> = None;
        for (tok, &z) in row.iter().enumerate() {
            if tok as u32 == mask_token_id {
                continue;
            }
            match best {
                Some((_, bz)) if z <= bz => {}
                _ => best = Some((tok, z)),
            }
        }
        let (token, best_z) = best.expect("vocabulary has a non-mask token");
        // softmax over the full row, evaluated only at the argmax
        let max_z = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&z| (z - max_z).exp()).sum();
        let confidence = (best_z - max_z).exp() / denom;
        predictions.push(BlockPrediction {
            position: pos,
            token: token as u32,
            confidence,
        });
    }
    Ok(predictions)
}

/// Commits exactly `budget` predictions into the state and returns the
/// positions that were unmasked, sorted ascending.
pub fn transition(
    state: &mut SequenceState,
    predictions: &[BlockPrediction],
    block: &BlockSchedule,
    rule: UnmaskRule,
    budget: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if predictions.len() < budget {
        return Err(EngineError::Schedule(format!(
            "block {} step {} has {} masked positions but must unmask {budget}",
            block.block_index,
            block.step_in_block,
            predictions.len()
        )));
    }

    let chosen: Vec<&BlockPrediction> = match rule {
        UnmaskRule::Confidence => {
            let mut order: Vec<&BlockPrediction> = predictions.iter().collect();
            order.sort_by(|a, b| {
                b.confidence
                    .total_cmp(&a.confidence)
                    .then(a.position.cmp(&b.position))
            });
            order.truncate(budget);
            order
        }
        UnmaskRule::Random => {
            let mut pool: Vec<&BlockPrediction> = predictions.iter().collect();
            let (picked, _) = pool.partial_shuffle(rng, budget);
            picked.to_vec()
        }
    };

    let mut unmasked: Vec<usize> = chosen.iter().map(|p| p.position).collect();
    for p in chosen {
        state.tokens[p.position] = p.token;
        state.is_masked[p.position] = false;
    }
    unmasked.sort_unstable();
    Ok(unmasked)
}

/// Step metadata handed to observers.
#[derive(Debug, Clone)]
pub struct StepContext {
    pub global_step: usize,
    pub block: BlockSchedule,
    pub cache_state: CacheState,
}

/// Instrumentation hooks into a decode run. All methods default to no-ops.
pub trait DecodeObserver {
    /// Return true to have the next full pass capture per-layer attention.
    fn wants_attention(&self, _global_step: usize) -> bool {
        false
    }
    /// A full (state 0 or 1) pass finished; Q/K/V cover every position.
    fn on_full_pass(&mut self, _ctx: &StepContext, _qkv: &[LayerQkv], _attention: Option<&[Matrix]>) {
    }
    /// A cached (state 2) pass finished; Q/K/V cover the block only.
    fn on_cached_pass(&mut self, _ctx: &StepContext, _qkv: &[LayerQkv], _caches: &[LayerCache]) {}
    /// The caches were just written from this step's K/V.
    fn on_cache_write(&mut self, _ctx: &StepContext, _caches: &[LayerCache]) {}
    /// Tokens were committed; `unmasked` lists the affected positions.
    fn on_transition(&mut self, _ctx: &StepContext, _unmasked: &[usize], _state: &SequenceState) {}
}

#[derive(Debug, Clone, Default)]
pub struct DecodeOptions {
    /// Enable the attention multiply-add counter for this run.
    pub count_ops: bool,
}

/// Runs the full block-wise decode loop under the given cache policy.
pub fn decode(
    weights: &ModelWeights,
    prompt: &[u32],
    cfg: &DecodeConfig,
    policy: &CachePolicy,
    options: &DecodeOptions,
    mut observer: Option<&mut dyn DecodeObserver>,
) -> Result<(SequenceState, RunReport)> {
    cfg.validate()?;
    let model_cfg = weights.config();
    let mut state = SequenceState::init(prompt, cfg.gen_len, model_cfg)?;

    if cfg.gen_len == 0 {
        let report = RunReport::new(policy.name(), 0, 0.0, 0, 0, 0, 0, 0, vec![], &state, cfg, model_cfg);
        return Ok((state, report));
    }

    let spb = cfg.steps_per_block();
    policy.validate(spb)?;
    let budget = cfg.tokens_per_step();
    let mask = model_cfg.mask_token_id();
    let block_len = cfg.block_len;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut counter = if options.count_ops {
        OpCounter::enabled()
    } else {
        OpCounter::disabled()
    };
    let mut manager = CacheManager::new(policy.clone(), model_cfg.n_layers, model_cfg.n_heads);
    let mut global_step = 0usize;
    let mut full_steps = 0usize;
    let mut cached_steps = 0usize;

    let start = Instant::now();
    for block_index in 0..cfg.num_blocks() {
        manager.clear();
        let offset = state.prompt_len() + block_index * block_len;
        for step_in_block in 0..spb {
            let block = BlockSchedule {
                block_index,
                offset,
                length: block_len,
                step_in_block,
            };
            let cache_state = manager.state_for_step(step_in_block);
            let ctx = StepContext {
                global_step,
                block: block.clone(),
                cache_state,
            };

            let predictions = match cache_state {
                CacheState::FullAttention | CacheState::UpdateCache => {
                    full_steps += 1;
                    let capture = observer
                        .as_ref()
                        .is_some_and(|o| o.wants_attention(global_step));
                    let fwd = weights.forward_full(state.tokens(), capture, &mut counter)?;
                    if let Some(obs) = observer.as_deref_mut() {
                        obs.on_full_pass(&ctx, &fwd.layer_qkv, fwd.attention.as_deref());
                    }
                    if cache_state == CacheState::UpdateCache {
                        manager.write_from_full(&fwd.layer_qkv, offset, block_len)?;
                        if let Some(obs) = observer.as_deref_mut() {
                            obs.on_cache_write(&ctx, manager.caches()?);
                        }
                    }
                    greedy_predict(&fwd.logits, &state, &block, mask)?
                }
                CacheState::ReuseCache => {
                    cached_steps += 1;
                    let caches = manager.caches()?;
                    let block_tokens = &state.tokens()[offset..offset + block_len];
                    let fwd =
                        weights.forward_block_with_cache(block_tokens, offset, caches, &mut counter)?;
                    if let Some(obs) = observer.as_deref_mut() {
                        obs.on_cached_pass(&ctx, &fwd.layer_qkv, caches);
                    }
                    greedy_predict(&fwd.logits, &state, &block, mask)?
                }
            };

            let unmasked = transition(
                &mut state,
                &predictions,
                &block,
                cfg.unmask_rule,
                budget,
                &mut rng,
            )?;
            if let Some(obs) = observer.as_deref_mut() {
                obs.on_transition(&ctx, &unmasked, &state);
            }
            global_step += 1;
        }
    }
    let wall_seconds = start.elapsed().as_secs_f64();

    debug_assert_eq!(state.masked_count(), 0);
    let report = RunReport::new(
        policy.name(),
        cfg.gen_len,
        wall_seconds,
        counter.multiply_adds(),
        manager.peak_entries(),
        full_steps,
        cached_steps,
        manager.total_writes(),
        manager.per_block_retained().to_vec(),
        &state,
        cfg,
        model_cfg,
    );
    Ok((state, report))
}
