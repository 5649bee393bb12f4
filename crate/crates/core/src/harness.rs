//! Experiment runner: loads configs, decodes under a matrix of cache
//! policies, measures wall-clock throughput and the closed-form compute and
//! memory counters, and writes comparison reports.
//!
//! Throughput at this scale is reported but never compared against any
//! full-size model's numbers; the multiply-add counters are the primary
//! efficiency evidence, wall clock the secondary.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cache::{
    CachePolicy, EvictionConfig, LayerCache, PolicyKind, QueryAggregation,
};
use crate::decoder::{
    decode, DecodeConfig, DecodeObserver, DecodeOptions, SequenceState, StepContext, UnmaskRule,
};
use crate::error::{EngineError, Result};
use crate::model::{init_weights, ModelConfig};

fn fnv_fold(h: &mut u64, bytes: &[u8]) {
    for &b in bytes {
        *h = (*h ^ b as u64).wrapping_mul(0x100000001b3);
    }
}

/// Metrics of one decode run under one policy.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub policy: String,
    pub repetition: usize,
    pub tokens_generated: usize,
    pub wall_seconds: f64,
    pub throughput_tps: f64,
    pub attention_multiply_adds: u64,
    pub peak_cache_entries: usize,
    pub peak_cache_bytes: usize,
    pub per_block_eviction_sizes: Vec<usize>,
    pub full_steps: usize,
    pub cached_steps: usize,
    pub cache_writes: usize,
    pub output_checksum: u64,
    /// Fingerprint of (decode config, prompt, model config); reports are
    /// only comparable when it matches.
    pub config_digest: u64,
}

impl RunReport {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        policy: &str,
        tokens_generated: usize,
        wall_seconds: f64,
        attention_multiply_adds: u64,
        peak_cache_entries: usize,
        full_steps: usize,
        cached_steps: usize,
        cache_writes: usize,
        per_block_eviction_sizes: Vec<usize>,
        state: &SequenceState,
        decode_cfg: &DecodeConfig,
        model_cfg: &ModelConfig,
    ) -> RunReport {
        let throughput_tps = if wall_seconds > 0.0 && tokens_generated > 0 {
            tokens_generated as f64 / wall_seconds
        } else {
            0.0
        };

        let mut digest: u64 = 0xcbf29ce484222325;
        for v in [
            decode_cfg.total_steps as u64,
            decode_cfg.gen_len as u64,
            decode_cfg.block_len as u64,
            matches!(decode_cfg.unmask_rule, UnmaskRule::Random) as u64,
            decode_cfg.rng_seed,
            state.prompt_len() as u64,
            model_cfg.vocab_size as u64,
            model_cfg.d_model as u64,
            model_cfg.n_heads as u64,
            model_cfg.n_layers as u64,
            model_cfg.d_ff as u64,
            model_cfg.max_seq_len as u64,
            model_cfg.init_seed,
        ] {
            fnv_fold(&mut digest, &v.to_le_bytes());
        }
        for &t in &state.tokens()[..state.prompt_len()] {
            fnv_fold(&mut digest, &t.to_le_bytes());
        }

        RunReport {
            policy: policy.to_string(),
            repetition: 0,
            tokens_generated,
            wall_seconds,
            throughput_tps,
            attention_multiply_adds,
            peak_cache_entries,
            peak_cache_bytes: peak_cache_entries * model_cfg.d_model * 8 * 2,
            per_block_eviction_sizes,
            full_steps,
            cached_steps,
            cache_writes,
            output_checksum: state.checksum(),
            config_digest: digest,
        }
    }

    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.9},{:.9},{},{},{},{:016x}",
            self.policy,
            self.repetition,
            self.tokens_generated,
            self.wall_seconds,
            self.throughput_tps,
            self.attention_multiply_adds,
            self.peak_cache_entries,
            self.peak_cache_bytes,
            self.output_checksum
        )
    }
}

pub const REPORT_CSV_HEADER: &str =
    "policy,repetition,tokens,wall_seconds,tps,mul_adds,peak_cache_entries,peak_cache_bytes,checksum";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(EngineError::Config(format!(
                "report_format: expected csv or json, got '{other}'"
            ))),
        }
    }
}

fn d_total_steps() -> usize {
    256
}
fn d_gen_len() -> usize {
    256
}
fn d_block_len() -> usize {
    32
}
fn d_unmask_rule() -> UnmaskRule {
    UnmaskRule::Confidence
}
fn d_rng_seed() -> u64 {
    2025
}
fn d_retention_ratio() -> f64 {
    0.5
}
fn d_kernel_size() -> usize {
    3
}
fn d_delay_steps() -> usize {
    1
}
fn d_repetitions() -> usize {
    1
}
fn d_report_path() -> PathBuf {
    PathBuf::from("report.csv")
}

/// One experiment: a model, a prompt, a decode schedule, and the policies to
/// run it under. Unknown JSON keys are rejected by name.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model_config_path: PathBuf,
    #[serde(default)]
    pub prompt_tokens: Option<Vec<u32>>,
    #[serde(default)]
    pub prompt_text: Option<String>,
    #[serde(default)]
    pub prompt_tokens_path: Option<PathBuf>,
    #[serde(default = "d_total_steps")]
    pub total_steps: usize,
    #[serde(default = "d_gen_len")]
    pub gen_len: usize,
    #[serde(default = "d_block_len")]
    pub block_len: usize,
    #[serde(default = "d_unmask_rule")]
    pub unmask_rule: UnmaskRule,
    #[serde(default = "d_rng_seed")]
    pub rng_seed: u64,
    /// Optional total sequence length; the prompt is cycled or truncated to
    /// `seq_len - gen_len` tokens.
    #[serde(default)]
    pub seq_len: Option<usize>,
    pub policies: Vec<String>,
    #[serde(default = "d_retention_ratio")]
    pub retention_ratio: f64,
    #[serde(default = "d_kernel_size")]
    pub kernel_size: usize,
    #[serde(default)]
    pub query_aggregation: QueryAggregation,
    #[serde(default = "d_delay_steps")]
    pub delay_steps: usize,
    #[serde(default = "d_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub count_ops: bool,
    #[serde(default = "d_report_path")]
    pub report_path: PathBuf,
    #[serde(default)]
    pub report_format: ReportFormat,
}

impl ExperimentConfig {
    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_slice(bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_json_bytes(&bytes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(EngineError::Config("repetitions: must be >= 1".into()));
        }
        if self.policies.is_empty() {
            return Err(EngineError::Config(
                "policies: at least one policy required".into(),
            ));
        }
        for p in &self.policies {
            PolicyKind::parse(p)?;
        }
        let sources = [
            self.prompt_tokens.is_some(),
            self.prompt_text.is_some(),
            self.prompt_tokens_path.is_some(),
        ]
        .iter()
        .filter(|&&s| s)
        .count();
        if sources != 1 {
            return Err(EngineError::Config(
                "prompt: exactly one of prompt_tokens, prompt_text, prompt_tokens_path".into(),
            ));
        }
        self.eviction_config().validate()?;
        Ok(())
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            total_steps: self.total_steps,
            gen_len: self.gen_len,
            block_len: self.block_len,
            unmask_rule: self.unmask_rule,
            rng_seed: self.rng_seed,
        }
    }

    pub fn eviction_config(&self) -> EvictionConfig {
        EvictionConfig {
            retention_ratio: self.retention_ratio,
            kernel_size: self.kernel_size,
            query_aggregation: self.query_aggregation,
            ..EvictionConfig::default()
        }
    }

    pub fn cache_policy(&self, kind: PolicyKind) -> CachePolicy {
        CachePolicy::new(kind, self.eviction_config(), self.delay_steps)
    }

    /// Materializes the prompt token ids, applying the byte tokenizer or
    /// token file and the optional `seq_len` fit.
    pub fn resolve_prompt(&self, model_cfg: &ModelConfig) -> Result<Vec<u32>> {
        let mut prompt = if let Some(tokens) = &self.prompt_tokens {
            tokens.clone()
        } else if let Some(text) = &self.prompt_text {
            if model_cfg.vocab_size < 257 {
                return Err(EngineError::Config(format!(
                    "prompt_text: byte tokenizer needs vocab_size >= 257, model has {}",
                    model_cfg.vocab_size
                )));
            }
            byte_tokenizer(text)
        } else if let Some(path) = &self.prompt_tokens_path {
            parse_prompt_tokens(&std::fs::read_to_string(path)?)?
        } else {
            unreachable!("validate() enforces one prompt source")
        };

        let mask = model_cfg.mask_token_id();
        if let Some(&bad) = prompt.iter().find(|&&t| t >= mask) {
            return Err(EngineError::Config(format!(
                "prompt: token id {bad} is not below the mask id {mask}"
            )));
        }
        if prompt.is_empty() {
            return Err(EngineError::Config("prompt: empty prompt".into()));
        }

        if let Some(seq_len) = self.seq_len {
            if seq_len <= self.gen_len {
                return Err(EngineError::Config(format!(
                    "seq_len: {seq_len} must exceed gen_len {}",
                    self.gen_len
                )));
            }
            prompt = fit_prompt(&prompt, seq_len - self.gen_len);
        }
        Ok(prompt)
    }
}

/// Trivial byte-level tokenizer: each byte is its own id. Pair it with a
/// 257-entry vocabulary (ids 0..=255 plus the mask token 256).
pub fn byte_tokenizer(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Parses a token-id file: unsigned ids separated by whitespace or commas.
pub fn parse_prompt_tokens(src: &str) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for tok in src.split(|c: char| c.is_whitespace() || c == ',') {
        if tok.is_empty() {
            continue;
        }
        let id = tok.parse::<u32>().map_err(|_| {
            EngineError::Config(format!("prompt_tokens_path: invalid token id '{tok}'"))
        })?;
        out.push(id);
    }
    if out.is_empty() {
        return Err(EngineError::Config(
            "prompt_tokens_path: no token ids found".into(),
        ));
    }
    Ok(out)
}

/// Cycles or truncates a prompt to exactly `target_len` tokens.
pub fn fit_prompt(prompt: &[u32], target_len: usize) -> Vec<u32> {
    prompt.iter().cycle().take(target_len).copied().collect()
}

fn with_policy_context(e: EngineError, policy: &str) -> EngineError {
    use EngineError::*;
    let pre = |s: String| format!("policy {policy}: {s}");
    match e {
        Shape(s) => Shape(pre(s)),
        Config(s) => Config(pre(s)),
        Capacity(s) => Capacity(pre(s)),
        Input(s) => Input(pre(s)),
        CacheState(s) => CacheState(pre(s)),
        DegenerateCache(s) => DegenerateCache(pre(s)),
        Schedule(s) => Schedule(pre(s)),
        TraceUnavailable(s) => TraceUnavailable(pre(s)),
        Comparison(s) => Comparison(pre(s)),
        other => other,
    }
}

/// Records the first cache write's layer-0 retained positions.
#[derive(Default)]
struct RetainedSetProbe {
    set: Option<Vec<usize>>,
}

impl DecodeObserver for RetainedSetProbe {
    fn on_cache_write(&mut self, _ctx: &StepContext, caches: &[LayerCache]) {
        if self.set.is_none() {
            self.set = Some(caches[0].source_indices.clone());
        }
    }
}

/// Runs every (policy x repetition) of the experiment and appends the
/// reports to the configured output file.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunReport>> {
    Ok(run_experiment_probed(cfg)?.0)
}

/// Loads the referenced model config; an unreadable path violates the
/// experiment config's contract and is reported as such.
pub fn load_model_config(cfg: &ExperimentConfig) -> Result<ModelConfig> {
    let bytes = std::fs::read(&cfg.model_config_path).map_err(|e| {
        EngineError::Config(format!(
            "model_config_path: cannot read {} ({e})",
            cfg.model_config_path.display()
        ))
    })?;
    ModelConfig::from_json_bytes(&bytes)
}

/// As [`run_experiment`], additionally returning the first eviction's
/// retained index set (layer 0) of the first scoring policy, when one ran.
pub fn run_experiment_probed(
    cfg: &ExperimentConfig,
) -> Result<(Vec<RunReport>, Option<Vec<usize>>)> {
    cfg.validate()?;
    let model_cfg = load_model_config(cfg)?;
    let weights = init_weights(&model_cfg)?;
    let prompt = cfg.resolve_prompt(&model_cfg)?;
    let dcfg = cfg.decode_config();
    let options = DecodeOptions {
        count_ops: cfg.count_ops,
    };

    let mut reports = Vec::new();
    let mut retained: Option<Vec<usize>> = None;
    for policy_name in &cfg.policies {
        let kind = PolicyKind::parse(policy_name)?;
        let policy = cfg.cache_policy(kind);
        let scoring = matches!(
            kind,
            PolicyKind::PrefixSparse | PolicyKind::SparseBidirectional
        );
        for rep in 0..cfg.repetitions {
            let probe_this_run = scoring && retained.is_none() && rep == 0;
            let mut probe = RetainedSetProbe::default();
            let observer: Option<&mut dyn DecodeObserver> =
                probe_this_run.then_some(&mut probe as &mut dyn DecodeObserver);
            let (_, mut report) = decode(&weights, &prompt, &dcfg, &policy, &options, observer)
                .map_err(|e| with_policy_context(e, policy_name))?;
            report.repetition = rep;
            reports.push(report);
            if probe_this_run {
                retained = probe.set;
            }
        }
    }

    append_reports(&cfg.report_path, cfg.report_format, &reports)?;
    Ok((reports, retained))
}

/// Appends reports to `path` in one buffered write; the CSV header is
/// emitted only when the file is new or empty.
pub fn append_reports(path: &Path, format: ReportFormat, reports: &[RunReport]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    let existing = file.metadata()?.len();

    let mut payload = String::new();
    match format {
        ReportFormat::Csv => {
            if existing == 0 {
                payload.push_str(REPORT_CSV_HEADER);
                payload.push('\n');
            }
            for r in reports {
                let _ = writeln!(payload, "{}", r.csv_row());
            }
        }
        ReportFormat::Json => {
            for r in reports {
                let _ = writeln!(payload, "{}", serde_json::to_string(r)?);
            }
        }
    }
    file.write_all(payload.as_bytes())?;
    file.flush()?;
    Ok(())
}

/// Per-policy aggregate over repetitions.
#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRow {
    pub policy: String,
    pub runs: usize,
    pub mean_tps: f64,
    /// Relative to the NoCache baseline when one is present; 1.0 for the
    /// baseline itself.
    pub speedup_vs_no_cache: Option<f64>,
    pub attention_multiply_adds: u64,
    pub peak_cache_entries: usize,
    pub checksum_match: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

pub const COMPARISON_CSV_HEADER: &str =
    "policy,runs,mean_tps,speedup_vs_no_cache,mul_adds,peak_cache_entries,checksum_match";

impl ComparisonTable {
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "{COMPARISON_CSV_HEADER}")?;
        for r in &self.rows {
            let speedup = r
                .speedup_vs_no_cache
                .map(|s| format!("{s:.6}"))
                .unwrap_or_default();
            writeln!(
                out,
                "{},{},{:.6},{},{},{},{}",
                r.policy,
                r.runs,
                r.mean_tps,
                speedup,
                r.attention_multiply_adds,
                r.peak_cache_entries,
                r.checksum_match
            )?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Aggregates reports into one row per policy, without the two-policy
/// minimum that [`compare_policies`] enforces.
pub fn build_table(reports: &[RunReport]) -> Result<ComparisonTable> {
    if reports.is_empty() {
        return Err(EngineError::Comparison("no reports to compare".into()));
    }
    let digest = reports[0].config_digest;
    if reports.iter().any(|r| r.config_digest != digest) {
        return Err(EngineError::Comparison(
            "reports were produced under different decode configs".into(),
        ));
    }

    let mut groups: Vec<(String, Vec<&RunReport>)> = Vec::new();
    for r in reports {
        match groups.iter_mut().find(|(name, _)| *name == r.policy) {
            Some((_, list)) => list.push(r),
            None => groups.push((r.policy.clone(), vec![r])),
        }
    }

    let baseline_tps = groups
        .iter()
        .find(|(name, _)| name == PolicyKind::NoCache.name())
        .map(|(_, list)| list.iter().map(|r| r.throughput_tps).sum::<f64>() / list.len() as f64);

    let rows = groups
        .into_iter()
        .map(|(policy, list)| {
            let mean_tps =
                list.iter().map(|r| r.throughput_tps).sum::<f64>() / list.len() as f64;
            let checksum_match = list
                .windows(2)
                .all(|w| w[0].output_checksum == w[1].output_checksum);
            ComparisonRow {
                policy,
                runs: list.len(),
                mean_tps,
                speedup_vs_no_cache: baseline_tps.map(|b| mean_tps / b),
                attention_multiply_adds: list[0].attention_multiply_adds,
                peak_cache_entries: list.iter().map(|r| r.peak_cache_entries).max().unwrap_or(0),
                checksum_match,
            }
        })
        .collect();
    Ok(ComparisonTable { rows })
}

/// Comparison across at least two policies run under identical decode
/// configs.
pub fn compare_policies(reports: &[RunReport]) -> Result<ComparisonTable> {
    let table = build_table(reports)?;
    if table.rows.len() < 2 {
        return Err(EngineError::Comparison(format!(
            "need reports from at least 2 policies, got {}",
            table.rows.len()
        )));
    }
    Ok(table)
}

/// Sweepable experiment axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    RetentionRatio,
    KernelSize,
    DelaySteps,
    SeqLen,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "retention_ratio" => Ok(SweepAxis::RetentionRatio),
            "kernel_size" => Ok(SweepAxis::KernelSize),
            "delay_steps" => Ok(SweepAxis::DelaySteps),
            "seq_len" => Ok(SweepAxis::SeqLen),
            other => Err(EngineError::Config(format!(
                "axis: unknown sweep axis '{other}' (expected retention_ratio, kernel_size, delay_steps, seq_len)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::RetentionRatio => "retention_ratio",
            SweepAxis::KernelSize => "kernel_size",
            SweepAxis::DelaySteps => "delay_steps",
            SweepAxis::SeqLen => "seq_len",
        }
    }
}

/// One sweep point: the reports and comparison table at one axis value.
#[derive(Debug)]
pub struct SweepEntry {
    pub axis: SweepAxis,
    pub value: String,
    pub reports: Vec<RunReport>,
    pub table: ComparisonTable,
    /// Jaccard distance of the first eviction's retained set against the
    /// kernel_size = 1 entry; recorded on kernel sweeps only.
    pub jaccard_vs_kernel1: Option<f64>,
}

fn jaccard_distance(a: &[usize], b: &[usize]) -> f64 {
    let inter = a.iter().filter(|x| b.contains(x)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        1.0 - inter as f64 / union as f64
    }
}

/// Runs the experiment once per axis value, mirroring the ablation tables.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[String]) -> Result<Vec<SweepEntry>> {
    if values.is_empty() {
        return Err(EngineError::Config("values: empty sweep".into()));
    }
    let mut entries = Vec::new();
    let mut retained_sets: Vec<Option<Vec<usize>>> = Vec::new();

    for raw in values {
        let mut point = cfg.clone();
        match axis {
            SweepAxis::RetentionRatio => {
                point.retention_ratio = raw.parse::<f64>().map_err(|_| {
                    EngineError::Config(format!("values: '{raw}' is not a retention ratio"))
                })?;
            }
            SweepAxis::KernelSize => {
                point.kernel_size = raw.parse::<usize>().map_err(|_| {
                    EngineError::Config(format!("values: '{raw}' is not a kernel size"))
                })?;
            }
            SweepAxis::DelaySteps => {
                point.delay_steps = raw.parse::<usize>().map_err(|_| {
                    EngineError::Config(format!("values: '{raw}' is not a delay step count"))
                })?;
            }
            SweepAxis::SeqLen => {
                point.seq_len = Some(raw.parse::<usize>().map_err(|_| {
                    EngineError::Config(format!("values: '{raw}' is not a sequence length"))
                })?);
            }
        }
        let (reports, retained) = run_experiment_probed(&point)?;
        let table = build_table(&reports)?;
        retained_sets.push(retained);
        entries.push(SweepEntry {
            axis,
            value: raw.clone(),
            reports,
            table,
            jaccard_vs_kernel1: None,
        });
    }

    if axis == SweepAxis::KernelSize {
        let baseline_idx = values.iter().position(|v| v == "1").unwrap_or(0);
        if let Some(base) = retained_sets[baseline_idx].clone() {
            for (entry, set) in entries.iter_mut().zip(&retained_sets) {
                if let Some(set) = set {
                    entry.jaccard_vs_kernel1 = Some(jaccard_distance(&base, set));
                }
            }
        }
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn write_model_config(dir: &Path) -> PathBuf {
        let path = dir.join("model.json");
        std::fs::write(
            &path,
            r#"{"vocab_size": 17, "d_model": 16, "n_heads": 2, "n_layers": 2,
               "d_ff": 32, "max_seq_len": 64, "init_seed": 2025}"#,
        )
        .unwrap();
        path
    }

    fn small_experiment(dir: &Path, policies: &[&str]) -> ExperimentConfig {
        ExperimentConfig {
            model_config_path: write_model_config(dir),
            prompt_tokens: Some(vec![1, 2, 3, 4]),
            prompt_text: None,
            prompt_tokens_path: None,
            total_steps: 8,
            gen_len: 16,
            block_len: 8,
            unmask_rule: UnmaskRule::Confidence,
            rng_seed: 2025,
            seq_len: None,
            policies: policies.iter().map(|s| s.to_string()).collect(),
            retention_ratio: 0.5,
            kernel_size: 3,
            query_aggregation: QueryAggregation::BlockMeanQuery,
            delay_steps: 1,
            repetitions: 1,
            count_ops: true,
            report_path: dir.join("report.csv"),
            report_format: ReportFormat::Csv,
        }
    }

    #[test]
    fn experiment_config_strict_json() {
        let ok = r#"{
            "model_config_path": "m.json",
            "prompt_tokens": [1, 2],
            "policies": ["no_cache"]
        }"#;
        let cfg = ExperimentConfig::from_json_bytes(ok.as_bytes()).unwrap();
        assert_eq!(cfg.total_steps, 256);
        assert_eq!(cfg.retention_ratio, 0.5);
        assert_eq!(cfg.kernel_size, 3);
        assert_eq!(cfg.rng_seed, 2025);

        let unknown = r#"{
            "model_config_path": "m.json",
            "prompt_tokens": [1, 2],
            "policies": ["no_cache"],
            "warmup": 3
        }"#;
        let err = ExperimentConfig::from_json_bytes(unknown.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("warmup"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn experiment_config_requires_one_prompt_source() {
        let none = r#"{"model_config_path": "m.json", "policies": ["no_cache"]}"#;
        assert!(ExperimentConfig::from_json_bytes(none.as_bytes()).is_err());

        let both = r#"{
            "model_config_path": "m.json",
            "prompt_tokens": [1], "prompt_text": "hi",
            "policies": ["no_cache"]
        }"#;
        assert!(ExperimentConfig::from_json_bytes(both.as_bytes()).is_err());
    }

    #[test]
    fn byte_tokenizer_and_prompt_fit() {
        assert_eq!(byte_tokenizer("AB"), vec![65, 66]);
        assert_eq!(fit_prompt(&[1, 2, 3], 2), vec![1, 2]);
        assert_eq!(fit_prompt(&[1, 2, 3], 7), vec![1, 2, 3, 1, 2, 3, 1]);
    }

    #[test]
    fn parse_prompt_tokens_formats() {
        assert_eq!(parse_prompt_tokens("1 2\n3,4").unwrap(), vec![1, 2, 3, 4]);
        assert!(parse_prompt_tokens("1 x").is_err());
        assert!(parse_prompt_tokens("  ").is_err());
    }

    #[test]
    fn byte_prompt_requires_byte_vocab() {
        let dir = TempDir::new().unwrap();
        let mut cfg = small_experiment(dir.path(), &["no_cache"]);
        cfg.prompt_tokens = None;
        cfg.prompt_text = Some("hello".into());
        let model_cfg = ModelConfig::from_json_file(&cfg.model_config_path).unwrap();
        let err = cfg.resolve_prompt(&model_cfg).unwrap_err();
        assert!(matches!(err, EngineError::Config(_)));
    }

    #[test]
    fn run_experiment_reports_and_csv() {
        let dir = TempDir::new().unwrap();
        let mut cfg = small_experiment(dir.path(), &["no_cache", "sparse_bidirectional"]);
        cfg.repetitions = 2;
        let reports = run_experiment(&cfg).unwrap();
        assert_eq!(reports.len(), 4);

        // deterministic across repetitions
        for pair in reports.chunks(2) {
            assert_eq!(pair[0].output_checksum, pair[1].output_checksum);
            assert_eq!(pair[0].attention_multiply_adds, pair[1].attention_multiply_adds);
        }
        // the counters must strictly favour the sparse policy
        let no_cache = &reports[0];
        let sparse = &reports[2];
        assert!(sparse.attention_multiply_adds < no_cache.attention_multiply_adds);
        assert_eq!(no_cache.peak_cache_entries, 0);

        // report internal consistency
        for r in &reports {
            if r.wall_seconds > 0.0 {
                let expect = r.tokens_generated as f64 / r.wall_seconds;
                assert!((r.throughput_tps - expect).abs() <= 1e-9 * expect);
            }
        }

        let text = std::fs::read_to_string(&cfg.report_path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), REPORT_CSV_HEADER);
        assert_eq!(lines.count(), 4);

        // appending keeps a single header
        run_experiment(&cfg).unwrap();
        let text = std::fs::read_to_string(&cfg.report_path).unwrap();
        assert_eq!(text.matches("policy,").count(), 1);
        assert_eq!(text.lines().count(), 9);
    }

    #[test]
    fn json_report_lines_parse_back() {
        let dir = TempDir::new().unwrap();
        let mut cfg = small_experiment(dir.path(), &["no_cache"]);
        cfg.report_format = ReportFormat::Json;
        cfg.report_path = dir.path().join("report.jsonl");
        run_experiment(&cfg).unwrap();
        let text = std::fs::read_to_string(&cfg.report_path).unwrap();
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.get("policy").is_some());
            assert!(v.get("per_block_eviction_sizes").is_some());
        }
    }

    #[test]
    fn comparison_table_baseline_and_peaks() {
        let dir = TempDir::new().unwrap();
        let cfg = small_experiment(
            dir.path(),
            &["no_cache", "full_cache", "sparse_bidirectional"],
        );
        let reports = run_experiment(&cfg).unwrap();
        let table = compare_policies(&reports).unwrap();
        assert_eq!(table.rows.len(), 3);

        let row = |name: &str| table.rows.iter().find(|r| r.policy == name).unwrap();
        let baseline = row("no_cache");
        assert!((baseline.speedup_vs_no_cache.unwrap() - 1.0).abs() < 1e-12);
        // r = 0.5 < 1: the sparse cache must be strictly smaller
        assert!(row("full_cache").peak_cache_entries > row("sparse_bidirectional").peak_cache_entries);
        for r in &table.rows {
            assert!(r.checksum_match);
        }

        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with(COMPARISON_CSV_HEADER));
    }

    #[test]
    fn comparison_rejects_mixed_configs_and_single_policy() {
        let dir = TempDir::new().unwrap();
        let cfg_a = small_experiment(dir.path(), &["no_cache"]);
        let mut cfg_b = small_experiment(dir.path(), &["full_cache"]);
        cfg_b.gen_len = 8;
        cfg_b.total_steps = 4;
        let mut reports = run_experiment(&cfg_a).unwrap();
        reports.extend(run_experiment(&cfg_b).unwrap());
        assert!(matches!(
            compare_policies(&reports),
            Err(EngineError::Comparison(_))
        ));

        let solo = run_experiment(&cfg_a).unwrap();
        assert!(matches!(
            compare_policies(&solo),
            Err(EngineError::Comparison(_))
        ));
    }

    #[test]
    fn delay_sweep_multiply_adds_non_decreasing() {
        let dir = TempDir::new().unwrap();
        let cfg = small_experiment(dir.path(), &["sparse_bidirectional"]);
        // steps_per_block = 4: delays 0..=3 are valid
        let values: Vec<String> = (0..4).map(|d| d.to_string()).collect();
        let entries = sweep(&cfg, SweepAxis::DelaySteps, &values).unwrap();
        let mul_adds: Vec<u64> = entries
            .iter()
            .map(|e| e.reports[0].attention_multiply_adds)
            .collect();
        assert!(mul_adds.windows(2).all(|w| w[0] <= w[1]), "{mul_adds:?}");
        let cached: Vec<usize> = entries.iter().map(|e| e.reports[0].cached_steps).collect();
        assert!(cached.windows(2).all(|w| w[0] >= w[1]), "{cached:?}");
    }

    #[test]
    fn retention_sweep_peak_entries_strictly_increase() {
        let dir = TempDir::new().unwrap();
        let mut cfg = small_experiment(dir.path(), &["sparse_bidirectional"]);
        cfg.gen_len = 16;
        cfg.block_len = 8;
        cfg.total_steps = 8;
        // prompt + gen = 24 tokens, 16 candidates per write
        let values: Vec<String> = (1..=9).map(|r| format!("0.{r}")).collect();
        let entries = sweep(&cfg, SweepAxis::RetentionRatio, &values).unwrap();
        let peaks: Vec<usize> = entries
            .iter()
            .map(|e| e.reports[0].peak_cache_entries)
            .collect();
        assert!(peaks.windows(2).all(|w| w[0] < w[1]), "{peaks:?}");
    }

    #[test]
    fn kernel_sweep_records_jaccard() {
        let dir = TempDir::new().unwrap();
        let cfg = small_experiment(dir.path(), &["sparse_bidirectional"]);
        let values = vec!["1".to_string(), "3".to_string(), "5".to_string()];
        let entries = sweep(&cfg, SweepAxis::KernelSize, &values).unwrap();
        assert!((entries[0].jaccard_vs_kernel1.unwrap() - 0.0).abs() < 1e-12);
        for e in &entries[1..] {
            let d = e.jaccard_vs_kernel1.unwrap();
            assert!((0.0..=1.0).contains(&d));
        }
    }

    #[test]
    fn seq_len_sweep_cache_growth_slope_is_retention_times_full() {
        let dir = TempDir::new().unwrap();
        let mut cfg = small_experiment(dir.path(), &["full_cache", "sparse_bidirectional"]);
        cfg.gen_len = 16;
        cfg.block_len = 8;
        cfg.total_steps = 8;
        let values = vec!["32".to_string(), "48".to_string(), "64".to_string()];
        let entries = sweep(&cfg, SweepAxis::SeqLen, &values).unwrap();

        let peak = |e: &SweepEntry, policy: &str| {
            e.reports
                .iter()
                .find(|r| r.policy == policy)
                .unwrap()
                .peak_cache_entries as f64
        };
        for w in entries.windows(2) {
            let full_slope = peak(&w[1], "full_cache") - peak(&w[0], "full_cache");
            let sparse_slope =
                peak(&w[1], "sparse_bidirectional") - peak(&w[0], "sparse_bidirectional");
            // candidate counts here are even, so floor(c * 0.5) is exact
            assert!((sparse_slope - 0.5 * full_slope).abs() < 1e-12);
        }
    }

    #[test]
    fn error_context_preserves_class() {
        let e = with_policy_context(EngineError::Config("kernel_size: bad".into()), "full_cache");
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("full_cache"));
    }
}
