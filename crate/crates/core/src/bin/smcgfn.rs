use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use smcgfn::checkpoint::{peek_config, Checkpoint};
use smcgfn::config::{Algo, ProcessConfig, TrainConfig};
use smcgfn::enumerate::enumerate;
use smcgfn::metrics::{evaluate, evaluate_bounds, Metric};
use smcgfn::process::{sample_forward, DiscreteReward, PrependAppend, Process};
use smcgfn::smc::{smc_sampling, ResampleScheme, SmcSettings};
use smcgfn::trainer::{MetricsWriter, Trainer};

#[derive(Parser)]
#[command(name = "smcgfn", version, about = "Train and evaluate amortised samplers with SMC and importance-weighted replay")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a sampler and write metrics.csv and checkpoints.
    Train(TrainArgs),
    /// Draw samples from a trained sampler.
    Sample(SampleArgs),
    /// Run SMC with the trained policy and flows.
    Smc(SmcArgs),
    /// Evaluate a trained sampler.
    Eval(EvalArgs),
    /// Write the replay buffer of a checkpoint as CSV.
    DumpBuffer(DumpArgs),
    /// Exhaustively enumerate a small prepend/append environment.
    Enumerate(EnumerateArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON configuration, laid over its named profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Profile used when no configuration file is given.
    #[arg(long, default_value = "desk")]
    profile: String,
    #[arg(long)]
    algo: Option<Algo>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Override the number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Write a checkpoint every C epochs (0 keeps only the final one).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Continue from a checkpoint instead of starting afresh.
    #[arg(long, conflicts_with_all = ["config", "algo"])]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long)]
    seed: u64,
    /// Output CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SmcArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of particles.
    #[arg(long, short = 'k', default_value_t = 1000)]
    particles: usize,
    /// Segment length between resampling opportunities.
    #[arg(long)]
    chunk: Option<usize>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    systematic: bool,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated list of elbo, eubo, sinkhorn, mmd, modes, pearson.
    #[arg(long, default_value = "elbo,eubo")]
    metrics: String,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long)]
    seed: u64,
    /// Append the report as a CSV row to this file.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EnumerateArgs {
    #[arg(long)]
    vocab: String,
    #[arg(long)]
    len: usize,
    #[arg(long, default_value = "count_a_pow2")]
    reward: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train(a) => train(a),
        Command::Sample(a) => with_checkpoint(&a.checkpoint.clone(), SampleJob(a)),
        Command::Smc(a) => with_checkpoint(&a.checkpoint.clone(), SmcJob(a)),
        Command::Eval(a) => eval(a),
        Command::DumpBuffer(a) => with_checkpoint(&a.checkpoint.clone(), DumpJob(a)),
        Command::Enumerate(a) => {
            let vocab: Vec<char> = a.vocab.chars().collect();
            let reward = DiscreteReward::from_name(&a.reward, &vocab)?;
            let table = enumerate(&PrependAppend::new(vocab, a.len, reward)?)?;
            println!("terminals = {}", table.terminals.len());
            println!("log Z = {}", table.log_z);
            println!("Z = {}", fmt_z(table.log_z.exp()));
            Ok(())
        }
    }
}

fn fmt_z(z: f64) -> String {
    if (z - z.round()).abs() < 1e-9 * z.abs().max(1.0) {
        format!("{}", z.round())
    } else {
        format!("{z}")
    }
}

/// A command that runs against a restored trainer of either process kind.
trait Job {
    fn run<P: Process>(self, trainer: Trainer<P>) -> anyhow::Result<()>;
}

fn with_checkpoint(path: &Path, job: impl Job) -> anyhow::Result<()> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let config = peek_config(&text)?;
    match config.process {
        ProcessConfig::Diffusion { .. } => {
            let process = config.build_diffusion()?;
            job.run(Checkpoint::<Vec<f64>>::from_json(&text)?.into_trainer(process)?)
        }
        ProcessConfig::PrependAppend { .. } => {
            let process = config.build_prepend_append()?;
            job.run(Checkpoint::<Vec<u8>>::from_json(&text)?.into_trainer(process)?)
        }
    }
}

fn output(path: &Option<PathBuf>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let (config, resume_text) = match &a.resume {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            (peek_config(&text)?, Some(text))
        }
        None => {
            let mut c = match &a.config {
                Some(p) => TrainConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
                None => TrainConfig::profile(&a.profile)?,
            };
            if let Some(algo) = a.algo {
                c.algo = algo;
            }
            (c, None)
        }
    };
    let mut config = config;
    if resume_text.is_some() && config.seed != a.seed {
        bail!("--seed {} differs from the checkpoint seed {}", a.seed, config.seed);
    }
    config.seed = a.seed;
    if let Some(n) = a.epochs {
        config.n_epoch = n;
    }
    if let Some(c) = a.checkpoint_every {
        config.checkpoint_every = c;
    }
    config.validate()?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("config.json"), config.to_json()? + "\n")?;
    let job = TrainJob { out: a.out, resume_text };
    match config.process {
        ProcessConfig::Diffusion { .. } => {
            let p = config.build_diffusion()?;
            job.run(config, p)
        }
        ProcessConfig::PrependAppend { .. } => {
            let p = config.build_prepend_append()?;
            job.run(config, p)
        }
    }
}

struct TrainJob {
    out: PathBuf,
    resume_text: Option<String>,
}

impl TrainJob {
    fn run<P: Process>(self, config: TrainConfig, process: P) -> anyhow::Result<()>
    {
        let metrics_path = self.out.join("metrics.csv");
        let mut trainer = match &self.resume_text {
            Some(text) => {
                let ck = Checkpoint::<P::State>::from_json(text)?;
                let mut t = ck.into_trainer(process)?;
                t.config.n_epoch = config.n_epoch;
                t.config.checkpoint_every = config.checkpoint_every;
                t
            }
            None => Trainer::new(config, process)?,
        };
        let resuming = self.resume_text.is_some() && trainer.epoch() > 0 && metrics_path.exists();
        let mut writer = if resuming {
            MetricsWriter::appending(BufWriter::new(truncate_metrics(&metrics_path, trainer.epoch())?))
        } else {
            MetricsWriter::new(BufWriter::new(File::create(&metrics_path)?))
        };
        let out = self.out.clone();
        trainer.run(|t, rec| {
            writer.write(rec)?;
            let every = t.config.checkpoint_every;
            if every > 0 && rec.epoch % every == 0 {
                writer.flush()?;
                Checkpoint::from_trainer(t).save(&out.join(format!("checkpoint_{:06}.json", rec.epoch)))?;
            }
            Ok(())
        })?;
        writer.flush()?;
        Checkpoint::from_trainer(&trainer).save(&self.out.join("final.json"))?;
        eprintln!(
            "trained {} epochs; log Z_theta = {:.6}; outputs in {}",
            trainer.epoch(),
            trainer.policy().log_z,
            self.out.display()
        );
        Ok(())
    }
}

/// Keeps the header and the first `epochs` rows of an existing metrics file.
fn truncate_metrics(path: &Path, epochs: usize) -> anyhow::Result<File> {
    let text = fs::read_to_string(path)?;
    let kept: Vec<&str> = text.lines().take(epochs + 1).collect();
    let mut f = File::create(path)?;
    for l in kept {
        writeln!(f, "{l}")?;
    }
    Ok(f)
}

struct SampleJob(SampleArgs);

impl Job for SampleJob {
    fn run<P: Process>(self, t: Trainer<P>) -> anyhow::Result<()>
    {
        let mut rng = ChaCha8Rng::seed_from_u64(self.0.seed);
        let trajs = sample_forward(&t.process, t.policy(), self.0.n, 0.0, &mut rng)?;
        let mut w = csv::Writer::from_writer(output(&self.0.out)?);
        let mut header = t.process.state_columns();
        header.extend(["log_weight", "log_r"].map(String::from));
        w.write_record(&header)?;
        for tr in &trajs {
            let mut row = t.process.state_fields(tr.terminal());
            row.push(tr.log_weight().to_string());
            row.push(tr.log_r.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

struct SmcJob(SmcArgs);

impl Job for SmcJob {
    fn run<P: Process>(self, t: Trainer<P>) -> anyhow::Result<()>
    {
        let a = self.0;
        let flow = t.flow().context("SMC needs learnt flows; train with --algo smc or combined")?;
        let settings = SmcSettings {
            particles: a.particles,
            chunk: a.chunk.unwrap_or(t.config.chunk),
            kappa: a.kappa.unwrap_or(t.config.kappa),
            gamma: a.gamma.unwrap_or(t.config.gamma),
            scheme: if a.systematic { ResampleScheme::Systematic } else { ResampleScheme::Multinomial },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let out = smc_sampling(&t.process, t.policy(), flow, &settings, &mut rng)?;
        let mut w = csv::Writer::from_writer(output(&a.out)?);
        let mut header = t.process.state_columns();
        header.extend(["log_weight", "log_z_hat"].map(String::from));
        w.write_record(&header)?;
        for (x, lw) in out.states.iter().zip(&out.log_w_bar) {
            let mut row = t.process.state_fields(x);
            row.push(lw.to_string());
            row.push(out.log_z_hat.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        eprintln!("log Z_hat = {}; resampled at steps {:?}", out.log_z_hat, out.resample_steps);
        Ok(())
    }
}

struct DumpJob(DumpArgs);

impl Job for DumpJob {
    fn run<P: Process>(self, t: Trainer<P>) -> anyhow::Result<()>
    {
        let buf = t.buffer().context("this checkpoint was trained without a replay buffer")?;
        buf.write_csv(&t.process, output(&self.0.out)?)?;
        Ok(())
    }
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let metrics = a.metrics.split(',').map(str::parse).collect::<Result<Vec<Metric>, _>>()?;
    let text = fs::read_to_string(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let config = peek_config(&text)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let report = match config.process {
        ProcessConfig::Diffusion { .. } => {
            let process = config.build_diffusion()?;
            let t = Checkpoint::<Vec<f64>>::from_json(&text)?.into_trainer(process)?;
            let means = t.process.target.mode_means().map(<[Vec<f64>]>::to_vec);
            evaluate(&t.process, t.policy(), &metrics, a.n, means.as_deref(), a.seed, &mut rng)?
        }
        ProcessConfig::PrependAppend { .. } => {
            if let Some(m) = metrics.iter().find(|m| matches!(m, Metric::Sinkhorn | Metric::Mmd | Metric::Modes)) {
                bail!("metric {m:?} is defined for continuous targets only");
            }
            let process = config.build_prepend_append()?;
            let t = Checkpoint::<Vec<u8>>::from_json(&text)?.into_trainer(process)?;
            evaluate_bounds(&t.process, t.policy(), &metrics, a.n, a.seed, &mut rng)?.0
        }
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(path) = &a.csv {
        append_report_row(path, &report)?;
    }
    Ok(())
}

fn append_report_row(path: &Path, report: &smcgfn::metrics::EvalReport) -> anyhow::Result<()> {
    let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
    let f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::Writer::from_writer(f);
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    if fresh {
        w.write_record([
            "seed", "sample_count", "elbo", "elbo_se", "eubo", "eubo_se", "log_z_theta", "sinkhorn", "mmd", "mode_count",
            "pearson_r",
        ])?;
    }
    w.write_record([
        report.seed.to_string(),
        report.sample_count.to_string(),
        opt(report.elbo.as_ref().map(|e| e.value)),
        opt(report.elbo.as_ref().map(|e| e.std_error)),
        opt(report.eubo.as_ref().map(|e| e.value)),
        opt(report.eubo.as_ref().map(|e| e.std_error)),
        report.log_z_theta.to_string(),
        opt(report.sinkhorn),
        opt(report.mmd),
        report.mode_count.map(|m| m.to_string()).unwrap_or_default(),
        opt(report.pearson_r),
    ])?;
    w.flush()?;
    Ok(())
}
