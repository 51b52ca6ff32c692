use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use online_thinning::anscombe::anscombe;
use online_thinning::engine::{EngineConfig, ThinningEngine};
use online_thinning::eval::{self, SweepBase, SweepKind};
use online_thinning::stream::{self, Batching, FlagWriter, ReadOptions, StreamFormat};
use online_thinning::synth::{gen_synthetic, SyntheticConfig};
use online_thinning::tree::StructureEvent;
use online_thinning::{Result, ThinError};

#[derive(Parser)]
#[command(name = "othin", version, about = "Streaming data thinning with a dynamic low-rank Gaussian mixture")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score a stream and write the flagged observations as JSON lines.
    Thin(ThinArgs),
    /// Write a synthetic rotating union-of-subspaces stream.
    Synth(SynthArgs),
    /// Detection metrics for a score file, or a tradeoff sweep.
    Eval(EvalArgs),
    /// Apply the Anscombe transform to a CSV of counts.
    Anscombe(AnscombeArgs),
}

#[derive(Args)]
struct EngineOverrides {
    /// JSON file with EngineConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    tau: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    tol: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    gamma: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    noise_var: Option<f64>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    subsample_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl EngineOverrides {
    fn resolve(&self) -> Result<EngineConfig> {
        let mut c = match &self.config {
            Some(p) => serde_json::from_reader(std::io::BufReader::new(File::open(p)?))?,
            None => EngineConfig::default(),
        };
        if let Some(v) = self.alpha {
            c.alpha = v;
        }
        if self.tau.is_some() {
            c.tau = self.tau;
        }
        if self.tol.is_some() {
            c.tol = self.tol;
        }
        if self.gamma.is_some() {
            c.gamma = self.gamma;
        }
        if let Some(v) = self.rank {
            c.rank = v;
        }
        if self.noise_var.is_some() {
            c.noise_var = self.noise_var;
        }
        if let Some(v) = self.k_max {
            c.k_max = v;
        }
        if let Some(v) = self.subsample_rate {
            c.subsample_rate = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct ThinArgs {
    /// Input stream (`.bin` for binary, CSV otherwise).
    input: PathBuf,
    #[command(flatten)]
    engine: EngineOverrides,
    /// Observations per time step.
    #[arg(long, conflicts_with = "time_col")]
    batch_size: Option<usize>,
    /// Leading CSV column holds the time index.
    #[arg(long)]
    time_col: bool,
    /// Skip the first CSV line.
    #[arg(long)]
    header: bool,
    /// Fit the initial model on the first N observations of the input.
    #[arg(long, conflicts_with = "resume")]
    train: Option<usize>,
    /// Continue from a saved engine instead of training.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Save the engine here after the stream ends.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Flagged records (JSON lines). Standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Every score, one per line, in stream order.
    #[arg(long)]
    scores_out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    p: usize,
    #[arg(long, default_value_t = 10)]
    rank: usize,
    #[arg(long, default_value_t = 0.0)]
    delta: f64,
    #[arg(long, default_value_t = 4000)]
    total: usize,
    #[arg(long, default_value_t = 1000)]
    train: usize,
    #[arg(long, default_value_t = 0.1)]
    noise_var: f64,
    #[arg(long, default_value_t = 0.95)]
    inlier_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Observations, one per row (`.bin` for binary).
    #[arg(long)]
    out: PathBuf,
    /// One label per observation: 1 for anomaly, 0 for inlier.
    #[arg(long)]
    labels_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, requires = "labels", conflicts_with = "sweep")]
    scores: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, conflicts_with = "best", allow_negative_numbers = true)]
    tau: Option<f64>,
    /// Report the threshold minimizing the detection error.
    #[arg(long)]
    best: bool,
    /// Drop this many leading labels (the training block).
    #[arg(long, default_value_t = 0)]
    skip: usize,
    #[arg(long)]
    sweep: Option<SweepKind>,
    /// Comma-separated subsampling rates or batch sizes.
    #[arg(long, value_delimiter = ',')]
    grid: Vec<f64>,
    /// Rotation speeds, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    delta: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Batch size when sweeping subsampling rates.
    #[arg(long, default_value_t = 10)]
    batch_size: usize,
    /// Engine rank for the sweep.
    #[arg(long, default_value_t = 10)]
    rank: usize,
    /// Forgetting factor for the sweep.
    #[arg(long, default_value_t = 0.9)]
    alpha: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnscombeArgs {
    /// CSV of non-negative integer counts.
    input: PathBuf,
    #[arg(long)]
    header: bool,
    #[arg(long)]
    out: PathBuf,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn thin(a: ThinArgs) -> Result<()> {
    let format = StreamFormat::from_path(&a.input);
    let batching = match (a.time_col, a.batch_size) {
        (true, _) => Batching::TimeColumn,
        (false, Some(n)) => Batching::Size(n),
        (false, None) => Batching::Size(1),
    };
    let mut opts = ReadOptions::new(format, batching);
    opts.header = a.header;

    let mut engine = match (&a.resume, a.train) {
        (Some(path), _) => {
            let mut e = ThinningEngine::load_checkpoint(path)?;
            if let Some(t) = a.engine.tau {
                e.set_tau(t)?;
            }
            opts.start_time = e.steps();
            e
        }
        (None, Some(n)) => {
            let mut seen = 0;
            let head = stream::read_stream(&a.input, opts)?.take_while(|b| {
                let more = seen < n;
                if let Ok(b) = b {
                    seen += b.len();
                }
                more
            });
            let all = stream::concat(head)?;
            if n == 0 || n > all.ncols() {
                return Err(ThinError::InvalidArgument(format!(
                    "--train {n} out of range for {} observations",
                    all.ncols()
                )));
            }
            let (e, s) = ThinningEngine::train(&a.engine.resolve()?, &all.columns(0, n).into_owned())?;
            info!(
                "trained on {n} observations: tol {:.4} gamma {:.4} tau {:.4} noise {:.4}",
                s.tol, s.gamma, s.tau, s.noise_var
            );
            opts.skip = n;
            e
        }
        (None, None) => {
            return Err(ThinError::InvalidArgument("either --train N or --resume PATH is required".into()))
        }
    };

    let mut flags = FlagWriter::new(output(a.out.as_deref())?);
    let mut scores = a.scores_out.as_deref().map(|p| File::create(p).map(BufWriter::new)).transpose()?;
    let (mut n, mut flagged, mut splits, mut merges) = (0usize, 0usize, 0usize, 0usize);
    for batch in stream::read_stream(&a.input, opts)? {
        let out = engine.process_batch(&batch?)?;
        n += out.scored.len();
        for e in &out.events {
            match e {
                StructureEvent::Split { .. } => splits += 1,
                StructureEvent::Merge { .. } => merges += 1,
            }
        }
        if let Some(w) = scores.as_mut() {
            for o in &out.scored {
                writeln!(w, "{}", o.score)?;
            }
        }
        let hits: Vec<_> = out.scored.into_iter().filter(|o| o.flagged).collect();
        flagged += hits.len();
        flags.write(&hits)?;
    }
    flags.finish()?;
    if let Some(mut w) = scores {
        w.flush()?;
    }
    info!(
        "{n} observations, {flagged} flagged, {splits} splits, {merges} merges, {} leaves",
        engine.tree().leaf_count()
    );
    if let Some(path) = &a.checkpoint {
        engine.save_checkpoint(path)?;
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        ambient_dim: a.p,
        subspace_rank: a.rank,
        rotation_speed: a.delta,
        total: a.total,
        train_count: a.train,
        noise_var: a.noise_var,
        inlier_fraction: a.inlier_frac,
        seed: a.seed,
        ..SyntheticConfig::default()
    };
    let s = gen_synthetic(&cfg)?;
    stream::write_matrix(&a.out, &s.data)?;
    if let Some(path) = &a.labels_out {
        let mut w = BufWriter::new(File::create(path)?);
        for &l in &s.labels {
            writeln!(w, "{}", u8::from(l))?;
        }
        w.flush()?;
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let mut out = output(a.out.as_deref())?;
    if let Some(kind) = a.sweep {
        if a.grid.is_empty() {
            return Err(ThinError::InvalidArgument("--sweep needs --grid".into()));
        }
        let base = SweepBase {
            synth: SyntheticConfig::default(),
            engine: EngineConfig {
                rank: a.rank,
                alpha: a.alpha,
                ..EngineConfig::default()
            },
            batch_size: a.batch_size,
        };
        let rows = eval::tradeoff_sweep(kind, &a.grid, &a.delta, &base, a.seeds)?;
        eval::write_sweep_csv(&mut out, kind, &rows)?;
        out.flush()?;
        return Ok(());
    }
    let (Some(sp), Some(lp)) = (&a.scores, &a.labels) else {
        return Err(ThinError::InvalidArgument("need --scores and --labels, or --sweep".into()));
    };
    let scores: Vec<f64> = stream::read_values(sp)?;
    let raw: Vec<u8> = stream::read_values(lp)?;
    let labels: Vec<bool> = raw.iter().skip(a.skip).map(|&v| v != 0).collect();
    let (tau, m) = match a.tau {
        Some(t) => (t, eval::detection_rates(&scores, &labels, t)?),
        None => eval::best_threshold(&scores, &labels)?,
    };
    let report = serde_json::json!({
        "tau": tau,
        "p_d": m.p_d,
        "p_f": m.p_f,
        "detection_error": m.detection_error,
        "auc": eval::auc(&scores, &labels)?,
    });
    writeln!(out, "{report}")?;
    out.flush()?;
    Ok(())
}

fn anscombe_cmd(a: AnscombeArgs) -> Result<()> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(a.header)
        .trim(csv::Trim::All)
        .from_path(&a.input)
        .map_err(|e| ThinError::InvalidArgument(e.to_string()))?;
    let mut w = BufWriter::new(File::create(&a.out)?);
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 1 + usize::from(a.header);
        let rec = rec.map_err(|e| ThinError::Parse { line, msg: e.to_string() })?;
        let counts = rec
            .iter()
            .map(|f| f.parse::<i64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| ThinError::Parse { line, msg: e.to_string() })?;
        let row: Vec<String> = anscombe(&counts)?.iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = match Cli::parse().command {
        Command::Thin(a) => thin(a),
        Command::Synth(a) => synth(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Anscombe(a) => anscombe_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
