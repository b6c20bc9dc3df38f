//! The `bifurc` command line.
//!
//! Exit codes: 0 when every check passes, 1 on a tolerance or exactness
//! violation, 2 on usage, configuration or I/O errors.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::attention::ModelConfig;
use crate::bench::calibrate::{calibrate, CalibrationPlan};
use crate::bench::config::{BenchConfig, OutputFormat, CONFIG_ENV};
use crate::bench::equiv::{run_equivalence, EquivReport, Fault, SweepSpec};
use crate::bench::io_table::{io_rows, rows_to_csv, rows_to_json, IoSweep};
use crate::bifurcated::{AttentionPath, PathMode};
use crate::engine::{
    decode_bytes, encode_bytes, generate, prefill, DecodeSession, GenerateOptions, Generation,
    SamplingConfig, ToyModel,
};
use crate::error::{Error, Result};
use crate::io_model::{step_io, CostModel};
use crate::kv_cache::KvCache;
use crate::tensor_core::IoLedger;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "bifurc",
    version,
    about = "Bifurcated attention toy engine, IO sweeps and tools"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PathArg {
    Naive,
    Bifurcated,
    Auto,
}

impl From<PathArg> for PathMode {
    fn from(p: PathArg) -> Self {
        match p {
            PathArg::Naive => PathMode::AlwaysNaive,
            PathArg::Bifurcated => PathMode::AlwaysBifurcated,
            PathArg::Auto => PathMode::Auto,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

/// Flags that override the configuration file.
#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON configuration file.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub path: Option<PathArg>,
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    #[arg(long, global = true)]
    pub max_new: Option<usize>,
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    #[arg(long, global = true)]
    pub top_p: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<FormatArg>,
    /// Model shape for analytic tables: 7b-mh-8k, 7b-mq-8k, 1b-mh or toy.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Threads for decode kernels; results do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CostArg {
    Cpu,
    Gpu,
    /// The calibrated model stored in the configuration file.
    Config,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Randomized bifurcated-vs-naive equivalence and IO exactness sweep.
    Equiv {
        #[arg(long, default_value_t = 200)]
        cases: usize,
        /// Normalize each branch separately (a deliberate bug) to confirm failures are caught.
        #[arg(long)]
        inject_fault: bool,
        /// Only sweep caches with no decoded positions.
        #[arg(long)]
        no_decode: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analytic KV traffic and predicted step latency, naive against bifurcated.
    Io {
        #[arg(long, value_delimiter = ',')]
        b: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        m_c: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        m_d: Option<Vec<usize>>,
        #[arg(long, value_enum, default_value = "gpu")]
        cost_model: CostArg,
        /// Bytes per element for traffic.
        #[arg(long, default_value_t = 2)]
        width: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a freshly initialized model checkpoint.
    Init {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        hidden: usize,
        #[arg(long, default_value_t = 8)]
        heads: usize,
        #[arg(long, default_value_t = 2)]
        groups: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 4)]
        fanout: usize,
        #[arg(long, default_value_t = 512)]
        max_positions: usize,
        #[arg(long)]
        force: bool,
    },
    /// Single-context batch sampling from a checkpoint and a prompt file.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        prompt: PathBuf,
        #[arg(long)]
        greedy: bool,
        /// Also write the JSON transcript here.
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// Fit the cost model on this host and store it in a configuration file.
    Calibrate {
        #[arg(long, default_value_t = 5)]
        iterations: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Write or inspect a KV cache snapshot.
    Snapshot {
        #[arg(long, required_unless_present = "inspect")]
        model: Option<PathBuf>,
        #[arg(long, required_unless_present = "inspect")]
        prompt: Option<PathBuf>,
        #[arg(long, required_unless_present = "inspect")]
        out: Option<PathBuf>,
        /// Decode steps to run before writing.
        #[arg(long, default_value_t = 0)]
        steps: usize,
        #[arg(long, conflicts_with_all = ["model", "prompt", "out"])]
        inspect: Option<PathBuf>,
    },
}

impl CommonArgs {
    fn resolve(&self) -> Result<BenchConfig> {
        let mut c = BenchConfig::load(self.config.as_deref())?;
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.path {
            c.path = v.into();
        }
        if let Some(v) = self.batch {
            c.batch = v;
        }
        if let Some(v) = self.max_new {
            c.max_new = v;
        }
        if let Some(v) = self.temperature {
            c.temperature = v;
        }
        if let Some(v) = self.top_p {
            c.top_p = v;
        }
        if let Some(v) = self.format {
            c.format = match v {
                FormatArg::Csv => OutputFormat::Csv,
                FormatArg::Json => OutputFormat::Json,
            };
        }
        if let Some(v) = &self.preset {
            c.preset = v.clone();
        }
        if let Some(v) = self.workers {
            c.workers = v;
        }
        Ok(c)
    }
}

/// Runs a parsed command, writing its main output to `out`. Returns the
/// process exit code; errors map to [`EXIT_USAGE`] in [`main_with_args`].
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let cfg = cli.common.resolve()?;
    match &cli.command {
        Command::Equiv {
            cases,
            inject_fault,
            no_decode,
            out: path,
        } => {
            let mut spec = SweepSpec {
                cases: *cases,
                seed: cfg.seed,
                ..SweepSpec::default()
            };
            if *no_decode {
                spec.m_d = vec![0];
                spec.m_c = (1..=32).collect();
            }
            let fault = if *inject_fault {
                Fault::PerBranchSoftmax
            } else {
                Fault::None
            };
            let report = run_equivalence(&spec, fault)?;
            let text = match cfg.format {
                OutputFormat::Csv => equiv_csv(&report),
                OutputFormat::Json => serde_json::to_string_pretty(&report)? + "\n",
            };
            emit(out, path.as_deref(), &text)?;
            eprintln!(
                "equiv: {} cases, {} failures, f64 max abs err {:e}, f32 max rel err {:e} (tolerance {:e}), io exact: {}",
                report.cases.len(),
                report.failures,
                report.max_abs_err_f64,
                report.max_rel_err_f32,
                report.tolerance,
                report.io_exact
            );
            Ok(if report.passed() {
                EXIT_OK
            } else {
                EXIT_VIOLATION
            })
        }
        Command::Io {
            b,
            m_c,
            m_d,
            cost_model,
            width,
            out: path,
        } => {
            let mut sweep = IoSweep::table_one(&cfg.preset);
            sweep.elem_width_bytes = *width;
            if let Some(v) = b {
                sweep.b = v.clone();
            }
            if let Some(v) = m_c {
                sweep.m_c = v.clone();
            }
            if let Some(v) = m_d {
                sweep.m_d = v.clone();
            }
            let cm = match cost_model {
                CostArg::Cpu => CostModel::generic_cpu(),
                CostArg::Gpu => CostModel::datacenter_gpu(),
                CostArg::Config => cfg.cost_model.ok_or_else(|| {
                    Error::Config("configuration has no calibrated cost model".into())
                })?,
            };
            let rows = io_rows(&sweep, &cm)?;
            let text = match cfg.format {
                OutputFormat::Csv => rows_to_csv(&rows),
                OutputFormat::Json => rows_to_json(&rows)? + "\n",
            };
            emit(out, path.as_deref(), &text)?;
            let bad = rows.iter().any(|r| r.verified == Some(false));
            Ok(if bad { EXIT_VIOLATION } else { EXIT_OK })
        }
        Command::Init {
            out: path,
            hidden,
            heads,
            groups,
            layers,
            fanout,
            max_positions,
            force,
        } => {
            if path.exists() && !force {
                return Err(Error::WouldOverwrite(path.display().to_string()));
            }
            let mcfg = ModelConfig::new(*hidden, *heads, *groups, *layers)?
                .with_fanout(*fanout)?
                .with_max_positions(*max_positions);
            let model = ToyModel::<f32>::new(mcfg, cfg.seed)?;
            let mut buf = Vec::new();
            model.write_checkpoint(&mut buf)?;
            std::fs::write(path, buf)?;
            writeln!(
                out,
                "wrote {}: d={} h={} g={} layers={} params={} (non-embedding {})",
                path.display(),
                hidden,
                heads,
                groups,
                layers,
                model.total_params(),
                model.non_embedding_params()
            )?;
            Ok(EXIT_OK)
        }
        Command::Generate {
            model,
            prompt,
            greedy,
            transcript,
        } => {
            let model = load_model(model)?;
            let context = encode_bytes(&std::fs::read(prompt)?);
            let opts = GenerateOptions {
                batch: cfg.batch,
                max_new: cfg.max_new,
                sampling: SamplingConfig {
                    temperature: cfg.temperature,
                    top_p: cfg.top_p,
                    greedy: *greedy,
                },
                policy: cfg.policy(),
                seed: cfg.seed,
                workers: cfg.workers,
            };
            let g = generate(&model, &context, &opts)?;
            let json = g.to_json()? + "\n";
            if let Some(p) = transcript {
                std::fs::write(p, &json)?;
            }
            match cfg.format {
                OutputFormat::Json => out.write_all(json.as_bytes())?,
                OutputFormat::Csv => {
                    out.write_all(generation_summary(&model.cfg, &g)?.as_bytes())?
                }
            }
            Ok(EXIT_OK)
        }
        Command::Calibrate {
            iterations,
            out: path,
            force,
        } => {
            if path.exists() && !force {
                return Err(Error::WouldOverwrite(path.display().to_string()));
            }
            let report = calibrate(*iterations, &CalibrationPlan::default())?;
            let mut saved = if path.exists() {
                BenchConfig::from_file(path)?
            } else {
                cfg.clone()
            };
            saved.cost_model = Some(report.cost_model);
            if let Some(t) = report.suggested_auto_threshold {
                saved.auto_threshold = t;
            }
            saved.save(path, *force)?;
            match cfg.format {
                OutputFormat::Json => writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?,
                OutputFormat::Csv => writeln!(
                    out,
                    "bandwidth {:.3e} B/s, throughput {:.3e} FLOP/s, overhead {:.3e} s, R^2 {:.4}, auto threshold {}",
                    report.cost_model.bytes_per_second,
                    report.cost_model.flops_per_second,
                    report.cost_model.fixed_overhead_seconds,
                    report.r_squared,
                    report
                        .suggested_auto_threshold
                        .map_or("unchanged".to_string(), |t| t.to_string())
                )?,
            }
            Ok(EXIT_OK)
        }
        Command::Snapshot {
            model,
            prompt,
            out: path,
            steps,
            inspect,
        } => {
            if let Some(p) = inspect {
                let cache = KvCache::<f64>::read_snapshot(std::fs::File::open(p)?, 0)?;
                writeln!(out, "{}", describe_cache(&cache))?;
                return Ok(EXIT_OK);
            }
            let (model, prompt, path) = match (model, prompt, path) {
                (Some(m), Some(p), Some(o)) => (m, p, o),
                _ => {
                    return Err(Error::Config(
                        "snapshot needs --model, --prompt and --out".into(),
                    ))
                }
            };
            let model = load_model(model)?;
            let context = encode_bytes(&std::fs::read(prompt)?);
            let pre = prefill(&model, &context, &mut IoLedger::new())?;
            let sampling = SamplingConfig {
                temperature: cfg.temperature,
                top_p: cfg.top_p,
                greedy: false,
            };
            let mut session = DecodeSession::new(
                &model,
                &pre,
                cfg.batch,
                *steps,
                sampling,
                cfg.policy(),
                cfg.seed,
                cfg.workers,
            )?;
            for _ in 0..*steps {
                session.decode_step()?;
            }
            let mut buf = Vec::new();
            session.cache().write_snapshot(&mut buf)?;
            std::fs::write(path, buf)?;
            writeln!(out, "{}", describe_cache(session.cache()))?;
            Ok(EXIT_OK)
        }
    }
}

fn load_model(path: &Path) -> Result<ToyModel<f64>> {
    ToyModel::read_checkpoint(std::fs::File::open(path)?)
}

fn emit(out: &mut dyn Write, path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn describe_cache(cache: &KvCache<f64>) -> String {
    format!(
        "b={} g={} k={} m_c={} m_d={} layers={} stored_per_tensor_layer={} materialized_per_tensor_layer={} context_checksum={:016x}",
        cache.batch(),
        cache.groups(),
        cache.head_dim(),
        cache.context_len(),
        cache.decoded_len(),
        cache.num_layers(),
        cache.stored_elements(0),
        cache.materialized_elements(0),
        cache.context_checksum()
    )
}

pub fn equiv_csv(report: &EquivReport) -> String {
    let mut s = String::from(
        "case,b,h,g,k,m_c,m_d,n,bit_exact_f64,max_abs_err_f64,max_rel_err_f32,naive_k_reads,bifurcated_k_reads,naive_v_reads,bifurcated_v_reads,expected_naive,expected_bifurcated,pass\n",
    );
    for c in &report.cases {
        let sh = &c.shape;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{:e},{:e},{},{},{},{},{},{},{}",
            sh.index,
            sh.b,
            sh.h,
            sh.g,
            sh.k,
            sh.m_c,
            sh.m_d,
            sh.n,
            c.bit_exact_f64,
            c.max_abs_err_f64,
            c.max_rel_err_f32,
            c.key_reads[0],
            c.key_reads[1],
            c.value_reads[0],
            c.value_reads[1],
            c.expected_reads[0],
            c.expected_reads[1],
            c.pass
        );
    }
    s
}

/// Human-readable generation summary: ranked sequences and KV traffic
/// against a naive run of the same trajectory.
pub fn generation_summary(cfg: &ModelConfig, g: &Generation) -> Result<String> {
    let b = g.options.batch;
    let mut naive_kv = g.prefill_io.kv_reads();
    for s in &g.steps {
        naive_kv += step_io(cfg, b, s.m_c, s.m_d, s.n, false)?.kv_elements;
    }
    let actual = g.ledger.kv_reads();
    let bifurcated_steps = g
        .steps
        .iter()
        .filter(|s| s.path == AttentionPath::Bifurcated)
        .count();
    let mut s = String::new();
    let _ = writeln!(
        s,
        "context {} tokens, batch {}, {} new tokens, {} of {} decode steps bifurcated",
        g.context_len,
        b,
        g.options.max_new,
        bifurcated_steps,
        g.steps.len()
    );
    for (rank, r) in g.ranked.iter().enumerate() {
        let text = String::from_utf8_lossy(&decode_bytes(&r.tokens))
            .escape_debug()
            .to_string();
        let _ = writeln!(
            s,
            "#{:<3} x{:<3} mean log-prob {:>9.4}  \"{}\"",
            rank + 1,
            r.multiplicity,
            r.mean_logprob,
            text
        );
    }
    let saved = naive_kv.saturating_sub(actual);
    let _ = writeln!(
        s,
        "KV elements read: {actual} (naive would read {naive_kv}; saved {saved}, {:.1}%)",
        if naive_kv > 0 {
            100.0 * saved as f64 / naive_kv as f64
        } else {
            0.0
        }
    );
    Ok(s)
}

/// Parses `args`, runs, prints errors, and returns the exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(&cli, &mut lock) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}
