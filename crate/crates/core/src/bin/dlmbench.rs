//! Benchmark and diagnostics CLI for the diffusion-LM decode engine.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime error.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use dlm_core::analysis::{self, TraceCollector, TraceSpec};
use dlm_core::cache::PolicyKind;
use dlm_core::decoder::{decode, DecodeOptions};
use dlm_core::error::{EngineError, Result};
use dlm_core::harness::{
    compare_policies, load_model_config, run_experiment, sweep, ExperimentConfig, ReportFormat,
    SweepAxis,
};
use dlm_core::model::init_weights;

#[derive(Parser)]
#[command(
    name = "dlmbench",
    about = "Block-diffusion decode benchmark with KV-cache eviction policies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags that override fields of the experiment config file.
///
/// The trace subcommand reuses `--steps` for its step list, so the
/// total-steps override lives in [`StepsOverride`] and is flattened only
/// where it applies.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// Run a single policy instead of the config's policy list
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    retention_ratio: Option<f64>,
    #[arg(long)]
    kernel_size: Option<usize>,
    /// Cache-update delay in steps within each block
    #[arg(long)]
    delay: Option<usize>,
    #[arg(long)]
    block_len: Option<usize>,
    #[arg(long)]
    gen_len: Option<usize>,
    /// Total sequence length; the prompt is cycled/truncated to fit
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report output path
    #[arg(long)]
    report: Option<PathBuf>,
    /// Report format: json or csv
    #[arg(long)]
    format: Option<String>,
    /// Enable the attention multiply-add counter
    #[arg(long)]
    count_ops: bool,
}

#[derive(Args, Debug, Default)]
struct StepsOverride {
    /// Total decoding steps
    #[arg(long)]
    steps: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(policy) = &self.policy {
            PolicyKind::parse(policy)?;
            cfg.policies = vec![policy.clone()];
        }
        if let Some(r) = self.retention_ratio {
            cfg.retention_ratio = r;
        }
        if let Some(k) = self.kernel_size {
            cfg.kernel_size = k;
        }
        if let Some(d) = self.delay {
            cfg.delay_steps = d;
        }
        if let Some(b) = self.block_len {
            cfg.block_len = b;
        }
        if let Some(g) = self.gen_len {
            cfg.gen_len = g;
        }
        if let Some(l) = self.seq_len {
            cfg.seq_len = Some(l);
        }
        if let Some(s) = self.seed {
            cfg.rng_seed = s;
        }
        if let Some(p) = &self.report {
            cfg.report_path = p.clone();
        }
        if let Some(f) = &self.format {
            cfg.report_format = ReportFormat::parse(f)?;
        }
        if self.count_ops {
            cfg.count_ops = true;
        }
        cfg.validate()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment and append per-run reports to the report file
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[command(flatten)]
        steps: StepsOverride,
    },
    /// Re-run the experiment across values of one axis
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// One of: retention_ratio, kernel_size, delay_steps, seq_len
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values
        #[arg(long)]
        values: String,
        #[command(flatten)]
        overrides: Overrides,
        #[command(flatten)]
        steps: StepsOverride,
    },
    /// Capture attention traces and diagnostics into a directory of CSVs
    Trace {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated layer indices
        #[arg(long)]
        layers: String,
        /// Comma-separated global step indices
        #[arg(long)]
        steps: String,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn parse_index_list(name: &str, raw: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in raw.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(part.parse::<usize>().map_err(|_| {
            EngineError::Config(format!("{name}: '{part}' is not an index"))
        })?);
    }
    if out.is_empty() {
        return Err(EngineError::Config(format!("{name}: empty list")));
    }
    Ok(out)
}

fn load_config(
    path: &std::path::Path,
    overrides: &Overrides,
    steps: Option<usize>,
) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_json_file(path)?;
    if let Some(t) = steps {
        cfg.total_steps = t;
    }
    overrides.apply(&mut cfg)?;
    Ok(cfg)
}

fn cmd_run(config: PathBuf, overrides: Overrides, steps: Option<usize>) -> Result<()> {
    let cfg = load_config(&config, &overrides, steps)?;
    let reports = run_experiment(&cfg)?;
    eprintln!(
        "wrote {} report(s) to {}",
        reports.len(),
        cfg.report_path.display()
    );
    if reports.iter().map(|r| &r.policy).collect::<std::collections::HashSet<_>>().len() >= 2 {
        let table = compare_policies(&reports)?;
        emit_table(&table, cfg.report_format, None)?;
    }
    Ok(())
}

fn emit_table(
    table: &dlm_core::harness::ComparisonTable,
    format: ReportFormat,
    jaccard: Option<f64>,
) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match format {
        ReportFormat::Csv => {
            table.write_csv(&mut out)?;
            if let Some(j) = jaccard {
                use std::io::Write;
                writeln!(out, "# jaccard_distance_vs_kernel1,{j:.6}")?;
            }
        }
        ReportFormat::Json => {
            use std::io::Write;
            writeln!(out, "{}", table.to_json()?)?;
            if let Some(j) = jaccard {
                writeln!(out, "{{\"jaccard_distance_vs_kernel1\": {j:.6}}}")?;
            }
        }
    }
    Ok(())
}

fn cmd_sweep(
    config: PathBuf,
    axis: String,
    values: String,
    overrides: Overrides,
    steps: Option<usize>,
) -> Result<()> {
    let cfg = load_config(&config, &overrides, steps)?;
    let axis = SweepAxis::parse(&axis)?;
    let values: Vec<String> = values
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    let entries = sweep(&cfg, axis, &values)?;
    for entry in &entries {
        println!("== {} = {}", entry.axis.name(), entry.value);
        emit_table(&entry.table, cfg.report_format, entry.jaccard_vs_kernel1)?;
    }
    eprintln!(
        "appended {} sweep report(s) to {}",
        entries.iter().map(|e| e.reports.len()).sum::<usize>(),
        cfg.report_path.display()
    );
    Ok(())
}

fn cmd_trace(
    config: PathBuf,
    layers: String,
    steps: String,
    overrides: Overrides,
) -> Result<()> {
    let cfg = load_config(&config, &overrides, None)?;
    let layers = parse_index_list("layers", &layers)?;
    let steps = parse_index_list("steps", &steps)?;

    let model_cfg = load_model_config(&cfg)?;
    let weights = init_weights(&model_cfg)?;
    let prompt = cfg.resolve_prompt(&model_cfg)?;
    let dcfg = cfg.decode_config();
    let kind = PolicyKind::parse(&cfg.policies[0])?;
    let policy = cfg.cache_policy(kind);
    let capture_kv = kind == PolicyKind::NoCache;

    let mut collector = TraceCollector::new(
        TraceSpec {
            layers,
            steps,
            capture_kv,
        },
        dcfg.num_blocks(),
        dcfg.steps_per_block(),
    );
    decode(
        &weights,
        &prompt,
        &dcfg,
        &policy,
        &DecodeOptions {
            count_ops: cfg.count_ops,
        },
        Some(&mut collector),
    )?;
    let data = collector.finish()?;

    // --report names the output directory for trace runs
    let out_dir = cfg.report_path.clone();
    std::fs::create_dir_all(&out_dir)?;
    let mut f = std::fs::File::create(out_dir.join("attention.csv"))?;
    analysis::csv::write_attention(&data.attention, &mut f)?;
    let mut f = std::fs::File::create(out_dir.join("top_mass.csv"))?;
    analysis::csv::write_top_mass(&data.attention, cfg.retention_ratio, &mut f)?;
    let overlaps = data.overlaps(model_cfg.n_heads, &cfg.eviction_config())?;
    let mut f = std::fs::File::create(out_dir.join("overlap.csv"))?;
    analysis::csv::write_overlaps(&overlaps, &mut f)?;
    if capture_kv {
        let mut f = std::fs::File::create(out_dir.join("kv_drift.csv"))?;
        analysis::csv::write_drift(&data.kv_drift()?, &mut f)?;
    } else {
        eprintln!("note: kv_drift.csv needs a no_cache policy (full attention at every step)");
    }
    eprintln!("trace CSVs written to {}", out_dir.display());
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            overrides,
            steps,
        } => cmd_run(config, overrides, steps.steps),
        Command::Sweep {
            config,
            axis,
            values,
            overrides,
            steps,
        } => cmd_sweep(config, axis, values, overrides, steps.steps),
        Command::Trace {
            config,
            layers,
            steps,
            overrides,
        } => cmd_trace(config, layers, steps, overrides),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
