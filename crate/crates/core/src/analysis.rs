//! Run instrumentation: attention-map capture for the block's queries,
//! saliency-overlap statistics across steps, and the per-step L2 norm of
//! outside-block KV drift.
//!
//! All diagnostics read from full-attention steps. Asking for a trace on a
//! cached step is an error: cached attention does not produce full rows, so
//! there is nothing faithful to record.

use std::io::Write;

use crate::cache::{candidate_scores, retained_count, top_n_indices, EvictionConfig};
use crate::decoder::{DecodeObserver, StepContext};
use crate::error::{EngineError, Result};
use crate::model::LayerQkv;
use crate::numerics::{maxpool_1d, Matrix};

/// Which (layer, step) pairs a traced run records.
#[derive(Debug, Clone, Default)]
pub struct TraceSpec {
    pub layers: Vec<usize>,
    /// Global decode step indices (0-based over all `total_steps`).
    pub steps: Vec<usize>,
    /// Also keep per-step outside-block K/V copies for the drift series.
    pub capture_kv: bool,
}

/// Post-softmax attention rows (mean over heads) for the block's queries at
/// one (layer, step).
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub layer: usize,
    pub step: usize,
    pub block_index: usize,
    pub offset: usize,
    /// block_len x seq_len, each row a distribution over all keys.
    pub rows: Matrix,
}

impl AttentionTrace {
    /// Sum of the largest `ceil(r * L)` weights of one query row.
    pub fn top_r_mass(&self, query: usize, retention_ratio: f64) -> f64 {
        let keep = ((self.rows.cols() as f64 * retention_ratio).ceil() as usize)
            .clamp(1, self.rows.cols());
        let mut weights = self.rows.row(query).to_vec();
        weights.sort_unstable_by(|a, b| b.total_cmp(a));
        weights[..keep].iter().sum()
    }
}

/// Block queries and full keys at one (layer, step); feeds the saliency
/// overlap through the cache module's scoring path.
#[derive(Debug, Clone)]
pub struct QkvSnapshot {
    pub layer: usize,
    pub step: usize,
    pub block_index: usize,
    pub offset: usize,
    pub block_len: usize,
    pub q_block: Matrix,
    pub k_full: Matrix,
}

/// One adjacent-step KV drift value.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftEntry {
    pub block_index: usize,
    /// Pair index i measures the change from step i to step i+1.
    pub pair: usize,
    pub value: f64,
}

/// Drift values for every adjacent step pair of every block.
#[derive(Debug, Clone, Default)]
pub struct KvDriftSeries {
    pub entries: Vec<DriftEntry>,
}

/// Fraction of retained indices shared by two snapshots of the same layer
/// and block, using exactly the eviction scoring path (mean block query,
/// scaled per-head dots, head mean, max pooling, top-k).
pub fn saliency_overlap(
    a: &QkvSnapshot,
    b: &QkvSnapshot,
    n_heads: usize,
    cfg: &EvictionConfig,
) -> Result<f64> {
    if a.layer != b.layer {
        return Err(EngineError::Input(format!(
            "saliency overlap across layers {} and {}",
            a.layer, b.layer
        )));
    }
    if a.offset != b.offset || a.block_len != b.block_len || a.k_full.rows() != b.k_full.rows() {
        return Err(EngineError::Input(
            "saliency overlap requires snapshots of the same block".into(),
        ));
    }
    let select = |s: &QkvSnapshot| -> Result<Vec<usize>> {
        let len = s.k_full.rows();
        let outside: Vec<usize> = (0..s.offset).chain(s.offset + s.block_len..len).collect();
        let k_f = s.k_full.select_rows(&outside);
        let scores = candidate_scores(&s.q_block, &k_f, n_heads, cfg)?;
        let importance = maxpool_1d(&scores, cfg.kernel_size)?;
        let n = retained_count(outside.len(), cfg.retention_ratio);
        if n == 0 {
            return Err(EngineError::DegenerateCache(
                "saliency overlap with zero retained indices".into(),
            ));
        }
        Ok(top_n_indices(&importance, n))
    };
    let sa = select(a)?;
    let sb = select(b)?;
    let n = sa.len();
    let shared = sa.iter().filter(|i| sb.contains(i)).count();
    Ok(shared as f64 / n as f64)
}

/// Overlap of consecutive traced steps within one block and layer.
#[derive(Debug, Clone)]
pub struct OverlapEntry {
    pub layer: usize,
    pub step_a: usize,
    pub step_b: usize,
    pub overlap: f64,
}

#[derive(Debug)]
struct StepKv {
    block_index: usize,
    step_in_block: usize,
    /// Outside-block (K, V) per layer.
    layers: Vec<(Matrix, Matrix)>,
}

/// Everything a traced run recorded.
#[derive(Debug)]
pub struct TraceData {
    pub attention: Vec<AttentionTrace>,
    pub snapshots: Vec<QkvSnapshot>,
    kv_steps: Vec<StepKv>,
    kv_enabled: bool,
    kv_complete: bool,
    pub num_blocks: usize,
    pub steps_per_block: usize,
}

impl TraceData {
    /// Layerwise-summed `||dK||_2 + ||dV||_2` of outside-block KV states for
    /// every adjacent step pair within every block. Needs a run whose steps
    /// were all full attention.
    pub fn kv_drift(&self) -> Result<KvDriftSeries> {
        if !self.kv_enabled {
            return Err(EngineError::TraceUnavailable(
                "kv drift requires capture_kv in the trace spec".into(),
            ));
        }
        if !self.kv_complete {
            return Err(EngineError::TraceUnavailable(
                "kv drift requires full attention at every step (run with no_cache)".into(),
            ));
        }
        let mut entries = Vec::new();
        for block in 0..self.num_blocks {
            let mut steps: Vec<&StepKv> = self
                .kv_steps
                .iter()
                .filter(|s| s.block_index == block)
                .collect();
            steps.sort_by_key(|s| s.step_in_block);
            for pair in 0..steps.len().saturating_sub(1) {
                let (prev, next) = (steps[pair], steps[pair + 1]);
                let mut value = 0.0;
                for ((kp, vp), (kn, vn)) in prev.layers.iter().zip(&next.layers) {
                    let dk = kn.add(&kp.scale(-1.0))?;
                    let dv = vn.add(&vp.scale(-1.0))?;
                    value += dk.frobenius_norm() + dv.frobenius_norm();
                }
                entries.push(DriftEntry {
                    block_index: block,
                    pair,
                    value,
                });
            }
        }
        Ok(KvDriftSeries { entries })
    }

    /// Saliency overlap between consecutive traced steps of each block, per
    /// layer.
    pub fn overlaps(&self, n_heads: usize, cfg: &EvictionConfig) -> Result<Vec<OverlapEntry>> {
        let mut out = Vec::new();
        let mut layers: Vec<usize> = self.snapshots.iter().map(|s| s.layer).collect();
        layers.sort_unstable();
        layers.dedup();
        for layer in layers {
            let mut snaps: Vec<&QkvSnapshot> = self
                .snapshots
                .iter()
                .filter(|s| s.layer == layer)
                .collect();
            snaps.sort_by_key(|s| s.step);
            for w in snaps.windows(2) {
                if w[0].block_index != w[1].block_index {
                    continue;
                }
                out.push(OverlapEntry {
                    layer,
                    step_a: w[0].step,
                    step_b: w[1].step,
                    overlap: saliency_overlap(w[0], w[1], n_heads, cfg)?,
                });
            }
        }
        Ok(out)
    }
}

/// Decode observer that fills a [`TraceData`].
#[derive(Debug)]
pub struct TraceCollector {
    spec: TraceSpec,
    attention: Vec<AttentionTrace>,
    snapshots: Vec<QkvSnapshot>,
    kv_steps: Vec<StepKv>,
    kv_complete: bool,
    missed_steps: Vec<usize>,
    num_blocks: usize,
    steps_per_block: usize,
}

impl TraceCollector {
    pub fn new(spec: TraceSpec, num_blocks: usize, steps_per_block: usize) -> Self {
        TraceCollector {
            spec,
            attention: Vec::new(),
            snapshots: Vec::new(),
            kv_steps: Vec::new(),
            kv_complete: true,
            missed_steps: Vec::new(),
            num_blocks,
            steps_per_block,
        }
    }

    /// Consumes the collector; errors if a requested step fell on a cached
    /// pass where no full attention rows exist.
    pub fn finish(self) -> Result<TraceData> {
        if !self.missed_steps.is_empty() {
            return Err(EngineError::TraceUnavailable(format!(
                "steps {:?} ran with cached attention; full rows unavailable",
                self.missed_steps
            )));
        }
        Ok(TraceData {
            attention: self.attention,
            snapshots: self.snapshots,
            kv_steps: self.kv_steps,
            kv_enabled: self.spec.capture_kv,
            kv_complete: self.kv_complete,
            num_blocks: self.num_blocks,
            steps_per_block: self.steps_per_block,
        })
    }
}

impl DecodeObserver for TraceCollector {
    fn wants_attention(&self, global_step: usize) -> bool {
        self.spec.steps.contains(&global_step)
    }

    fn on_full_pass(&mut self, ctx: &StepContext, qkv: &[LayerQkv], attention: Option<&[Matrix]>) {
        let step_requested = self.spec.steps.contains(&ctx.global_step);
        if step_requested {
            for &layer in &self.spec.layers {
                if layer >= qkv.len() {
                    continue;
                }
                if let Some(per_layer) = attention {
                    self.attention.push(AttentionTrace {
                        layer,
                        step: ctx.global_step,
                        block_index: ctx.block.block_index,
                        offset: ctx.block.offset,
                        rows: per_layer[layer].slice_rows(ctx.block.offset, ctx.block.length),
                    });
                }
                self.snapshots.push(QkvSnapshot {
                    layer,
                    step: ctx.global_step,
                    block_index: ctx.block.block_index,
                    offset: ctx.block.offset,
                    block_len: ctx.block.length,
                    q_block: qkv[layer].q.slice_rows(ctx.block.offset, ctx.block.length),
                    k_full: qkv[layer].k.clone(),
                });
            }
        }
        if self.spec.capture_kv {
            let len = qkv[0].k.rows();
            let outside: Vec<usize> = (0..ctx.block.offset)
                .chain(ctx.block.offset + ctx.block.length..len)
                .collect();
            self.kv_steps.push(StepKv {
                block_index: ctx.block.block_index,
                step_in_block: ctx.block.step_in_block,
                layers: qkv
                    .iter()
                    .map(|l| (l.k.select_rows(&outside), l.v.select_rows(&outside)))
                    .collect(),
            });
        }
    }

    fn on_cached_pass(&mut self, ctx: &StepContext, _qkv: &[LayerQkv], _caches: &[crate::cache::LayerCache]) {
        if self.spec.steps.contains(&ctx.global_step) {
            self.missed_steps.push(ctx.global_step);
        }
        if self.spec.capture_kv {
            self.kv_complete = false;
        }
    }
}

/// CSV emission. Every writer prints a schema header row first.
pub mod csv {
    use super::*;

    pub fn write_attention<W: Write>(traces: &[AttentionTrace], out: &mut W) -> Result<()> {
        writeln!(out, "layer,step,query_pos,key_pos,weight")?;
        for t in traces {
            for q in 0..t.rows.rows() {
                let query_pos = t.offset + q;
                for key_pos in 0..t.rows.cols() {
                    writeln!(
                        out,
                        "{},{},{},{},{:.12e}",
                        t.layer,
                        t.step,
                        query_pos,
                        key_pos,
                        t.rows.get(q, key_pos)
                    )?;
                }
            }
        }
        Ok(())
    }

    pub fn write_top_mass<W: Write>(
        traces: &[AttentionTrace],
        retention_ratio: f64,
        out: &mut W,
    ) -> Result<()> {
        writeln!(out, "layer,step,query_pos,top_r_mass")?;
        for t in traces {
            for q in 0..t.rows.rows() {
                writeln!(
                    out,
                    "{},{},{},{:.12}",
                    t.layer,
                    t.step,
                    t.offset + q,
                    t.top_r_mass(q, retention_ratio)
                )?;
            }
        }
        Ok(())
    }

    pub fn write_overlaps<W: Write>(entries: &[OverlapEntry], out: &mut W) -> Result<()> {
        writeln!(out, "layer,step_a,step_b,overlap")?;
        for e in entries {
            writeln!(out, "{},{},{},{:.6}", e.layer, e.step_a, e.step_b, e.overlap)?;
        }
        Ok(())
    }

    pub fn write_drift<W: Write>(series: &KvDriftSeries, out: &mut W) -> Result<()> {
        writeln!(out, "block,pair,value")?;
        for e in &series.entries {
            writeln!(out, "{},{},{:.12}", e.block_index, e.pair, e.value)?;
        }
        Ok(())
    }
}
