use std::fs::{self, File};
use std::io::{self, BufWriter, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tracing::{error, info, warn};
use tracing_subscriber::EnvFilter;

use relcom::corpus::{self, InputFormat};
use relcom::dynamics::{self, ReportRow};
use relcom::par::{self, Exec};
use relcom::pipeline::{self, files, Output, PipelineConfig};
use relcom::synth::{self, StreamingCorpus, SynthConfig};

#[derive(Parser)]
#[command(name = "relcom", version, about = "Related-community discovery and spinoff analysis over event logs")]
struct Cli {
    /// Worker threads for data-parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run every kernel on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// Log only warnings and errors. `RUST_LOG` takes precedence.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and index the input; writes per-community statistics.
    Ingest {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Where to write the statistics (default: <out>/index_stats.csv).
        #[arg(long)]
        index_stats: Option<PathBuf>,
    },
    /// Detect candidate affix pairs among eligible communities.
    Pairs {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score candidate pairs against the all-pairs background and keep related ones.
    Similarity {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Candidate pairs CSV (default: <out>/candidate_pairs.csv).
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Temporal order, activity balance and early participants per related pair.
    Characterize {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Related pairs CSV (default: <out>/related_pairs.csv).
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Classify characterized pairs as spinoffs.
    Spinoffs {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dynamics CSV (default: <out>/dynamics.csv).
        #[arg(long)]
        dynamics: Option<PathBuf>,
    },
    /// Explorer matching and exploration effects for spinoff pairs.
    Explore {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Spinoffs CSV (default: <out>/spinoffs.csv).
        #[arg(long)]
        spinoffs: Option<PathBuf>,
    },
    /// Generate a synthetic corpus with planted ground truth.
    Synth(SynthArgs),
    /// Write plot-ready long-format tables from the stage outputs in a directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Run every stage and write a manifest.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Args)]
struct SynthArgs {
    /// Generator config (JSON). Required unless `--stream` is given.
    #[arg(long, required_unless_present = "stream")]
    config: Option<PathBuf>,
    /// Output JSON Lines file; `-` for stdout.
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth manifest (JSON).
    #[arg(long, conflicts_with = "stream")]
    manifest: Option<PathBuf>,
    /// Emit this many unstructured events instead of a planted corpus.
    #[arg(long)]
    stream: Option<u64>,
    #[arg(long, default_value_t = 1000, requires = "stream")]
    communities: u32,
    #[arg(long, default_value_t = 100_000, requires = "stream")]
    users: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Config file plus per-field overrides. Flags win over the file.
#[derive(Args, Default)]
struct ConfigArgs {
    /// TOML or JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for stage files.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Input event files, read in order (replaces `inputs` from the config).
    #[arg(long = "input", short = 'i')]
    inputs: Vec<PathBuf>,
    /// Input format: jsonl or csv.
    #[arg(long, value_parser = parse_format)]
    format: Option<InputFormat>,
    #[arg(long)]
    topics: Option<PathBuf>,
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    /// User ids dropped at ingest; repeatable.
    #[arg(long = "exclude-user")]
    exclude_users: Vec<String>,
    #[arg(long)]
    min_posters: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    min_affix_count: Option<usize>,
    #[arg(long)]
    early_n: Option<usize>,
    #[arg(long)]
    membership_window_days: Option<i64>,
    #[arg(long)]
    horizon_months: Option<usize>,
    #[arg(long)]
    spinoff_threshold: Option<f64>,
    #[arg(long)]
    window_days: Option<i64>,
    #[arg(long)]
    match_window_hours: Option<i64>,
    #[arg(long)]
    match_tolerance: Option<f64>,
    #[arg(long)]
    min_pre: Option<usize>,
    #[arg(long)]
    min_k: Option<usize>,
    #[arg(long)]
    bootstrap_resamples: Option<usize>,
    #[arg(long)]
    confidence: Option<f64>,
    #[arg(long)]
    min_category_pairs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_format(s: &str) -> std::result::Result<InputFormat, String> {
    match s.to_ascii_lowercase().as_str() {
        "jsonl" | "json" | "jsonlines" => Ok(InputFormat::JsonLines),
        "csv" => Ok(InputFormat::Csv),
        other => Err(format!("unknown format {other:?} (expected jsonl or csv)")),
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => PipelineConfig::default(),
        };
        if !self.inputs.is_empty() {
            c.inputs = self.inputs.clone();
        }
        if !self.exclude_users.is_empty() {
            c.exclude_users = self.exclude_users.clone();
        }
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = self.$f.clone() {
                    c.$f = v;
                }
            )*};
        }
        set!(
            format,
            min_posters,
            threshold,
            min_affix_count,
            early_n,
            membership_window_days,
            horizon_months,
            spinoff_threshold,
            window_days,
            match_window_hours,
            match_tolerance,
            min_pre,
            min_k,
            bootstrap_resamples,
            confidence,
            min_category_pairs,
            seed
        );
        if self.topics.is_some() {
            c.topics = self.topics.clone();
        }
        if self.taxonomy.is_some() {
            c.taxonomy = self.taxonomy.clone();
        }
        c.validate()?;
        Ok(c)
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }

    fn input_file(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out.join(default))
    }
}

fn log_outputs(outputs: &[Output]) {
    for o in outputs {
        info!(file = %o.file, rows = o.rows, "wrote");
    }
}

fn read_report_rows(path: &Path) -> Result<Vec<ReportRow>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(dynamics::read_report_rows(f)?)
}

fn execute(command: Command, exec: Exec) -> Result<()> {
    match command {
        Command::Ingest { cfg, index_stats } => {
            let c = cfg.resolve()?;
            let (index, report) = pipeline::stage_ingest(&c, exec)?;
            let path = match index_stats {
                Some(p) => p,
                None => cfg.out_dir()?.join(files::INDEX_STATS),
            };
            let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
            corpus::write_index_stats(&index, &mut w)?;
            w.flush()?;
            info!(
                accepted = report.accepted,
                skipped = report.skipped,
                events = index.total_events(),
                duplicates = index.duplicates_removed(),
                file = %path.display(),
                "index statistics written"
            );
        }
        Command::Pairs { cfg } => {
            let c = cfg.resolve()?;
            let (index, _) = pipeline::stage_ingest(&c, exec)?;
            let pairs = pipeline::stage_pairs(&index, &c, &c.taxonomy()?, exec)?;
            log_outputs(&pipeline::write_pairs_outputs(cfg.out_dir()?, &pairs)?);
        }
        Command::Similarity { cfg, pairs } => {
            let c = cfg.resolve()?;
            let candidates = pipeline::read_pairs(&cfg.input_file(&pairs, files::CANDIDATES))?;
            let (index, _) = pipeline::stage_ingest(&c, exec)?;
            let sim = pipeline::stage_similarity(&index, &candidates, &c, &c.taxonomy()?, exec)?;
            info!(topic_source = sim.topic_source, related = sim.related.len(), "similarity scored");
            log_outputs(&pipeline::write_similarity_outputs(cfg.out_dir()?, &sim)?);
        }
        Command::Characterize { cfg, pairs } => {
            let c = cfg.resolve()?;
            let related = pipeline::read_pairs(&cfg.input_file(&pairs, files::RELATED))?;
            let (index, _) = pipeline::stage_ingest(&c, exec)?;
            let reports = pipeline::stage_characterize(&index, &related, &c, exec)?;
            let orders = related
                .iter()
                .map(|p| dynamics::temporal_order(p, &index))
                .collect::<relcom::Result<Vec<_>>>()?;
            let dir = cfg.out_dir()?;
            let mut outputs = pipeline::write_dynamics_outputs(dir, &reports, c.early_n)?;
            outputs.push(pipeline::write_gaps(dir, &dynamics::gap_by_cohort(&orders))?);
            log_outputs(&outputs);
        }
        Command::Spinoffs { cfg, dynamics } => {
            let c = cfg.resolve()?;
            let rows = read_report_rows(&cfg.input_file(&dynamics, files::DYNAMICS))?;
            let (spin, cats) = pipeline::stage_spinoffs(&rows, c.spinoff_threshold);
            info!(pairs = rows.len(), spinoffs = spin.len(), "classified");
            log_outputs(&pipeline::write_spinoff_outputs(cfg.out_dir()?, &spin, &cats)?);
        }
        Command::Explore { cfg, spinoffs } => {
            let c = cfg.resolve()?;
            let rows = read_report_rows(&cfg.input_file(&spinoffs, files::SPINOFFS))?;
            let (index, _) = pipeline::stage_ingest(&c, exec)?;
            let outcomes = pipeline::stage_explore(&index, &rows, &c, exec)?;
            for o in &outcomes {
                let r = &o.result;
                if r.discarded {
                    info!(pair = %r.pair, k = r.k, "pair discarded");
                } else {
                    info!(pair = %r.pair, k = r.k, effect = r.effect, "explored");
                }
            }
            log_outputs(&pipeline::write_exploration_outputs(cfg.out_dir()?, &outcomes, &c)?);
        }
        Command::Synth(args) => synth_command(args)?,
        Command::Report { dir } => {
            if !dir.is_dir() {
                bail!("{} is not a directory", dir.display());
            }
            let outputs = pipeline::stage_report(&dir)?;
            if outputs.is_empty() {
                warn!(dir = %dir.display(), "no stage outputs found");
            }
            log_outputs(&outputs);
        }
        Command::Run { cfg } => {
            let c = cfg.resolve()?;
            let m = pipeline::run_pipeline(&c, &cfg.out, exec)?;
            for s in &m.stages {
                log_outputs(&s.outputs);
            }
            for w in &m.warnings {
                warn!("{w}");
            }
            info!(dir = %cfg.out.display(), "pipeline finished");
        }
    }
    Ok(())
}

fn synth_command(args: SynthArgs) -> Result<()> {
    let sink: Box<dyn Write> = if args.out.as_os_str() == "-" {
        Box::new(io::stdout().lock())
    } else {
        Box::new(File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?)
    };
    let mut sink = BufWriter::new(sink);
    if let Some(n) = args.stream {
        let copied = io::copy(&mut StreamingCorpus::new(args.seed, n, args.communities, args.users), &mut sink)?;
        sink.flush()?;
        info!(events = n, bytes = copied, "stream written");
        return Ok(());
    }
    let path = args.config.expect("clap enforces --config without --stream");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = SynthConfig::from_json(&text)?;
    let (events, truth) = synth::generate(&cfg)?;
    synth::write_jsonl(&events, &mut sink)?;
    sink.flush()?;
    if let Some(m) = &args.manifest {
        let f = File::create(m).with_context(|| format!("creating {}", m.display()))?;
        synth::write_manifest(&truth, BufWriter::new(f))?;
    }
    info!(events = events.len(), pairs = truth.pairs.len(), "synthetic corpus written");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default = if cli.quiet { "warn" } else { "info" };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default)))
        .with_writer(io::stderr)
        .with_ansi(io::stderr().is_terminal())
        .with_target(false)
        .init();

    if let Some(n) = cli.threads {
        if let Err(e) = par::init_threads(n) {
            error!("cannot size worker pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match execute(cli.command, exec) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
