use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use latflow::metrics::Region;
use latflow::pipeline::{self, Ablation, SampleOptions, Synthesizer};
use latflow::schedulers::{DdpmSchedule, SchedulerConfig};
use latflow::synthdata::{write_dataset, Manifest, PhantomSpec, Split};
use latflow::train::{self, load_vae, ModelKind, RunConfig, TrainOutcome};
use latflow::vae::Vae;
use latflow::velocity_net::{UNet, UNetConfig};
use latflow::{Error, Result};

#[derive(Parser)]
#[command(name = "latflow", version, about = "Latent rectified-flow synthesis of contrast-enhanced volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset with a manifest.
    GenData(GenData),
    /// Train the autoencoder.
    TrainVae(TrainArgs),
    /// Train the velocity network with rectified flow.
    TrainRflow(TrainArgs),
    /// Train the same network as a DDPM baseline.
    TrainDdpm(TrainArgs),
    /// Synthesize contrast-enhanced volumes for one split.
    Sample(SampleArgs),
    /// Score predictions against the targets.
    Evaluate(EvaluateArgs),
    /// Time encode, denoise and decode per sampler and step count.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Total number of cases, split 80/10/10 unless --split is given.
    #[arg(long, default_value_t = 250)]
    cases: usize,
    /// Cube edge length in voxels.
    #[arg(long, default_value_t = 16)]
    extent: usize,
    /// Explicit train,val,test sizes.
    #[arg(long, value_delimiter = ',')]
    split: Option<Vec<usize>>,
    #[arg(long, default_value = "data")]
    out: PathBuf,
    /// Also write NIfTI copies of every volume.
    #[arg(long)]
    nifti: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    vae_checkpoint: Option<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Euler steps (rflow only); defaults to the checkpoint's scheduler.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    mask_t1w: bool,
    #[arg(long)]
    mask_flair: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    vae_checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Prediction directory to score.
    #[arg(long, required_unless_present = "compare")]
    pred: Option<PathBuf>,
    /// Two prediction directories to score and test against each other.
    #[arg(long, num_args = 2, value_names = ["RUN_A", "RUN_B"])]
    compare: Option<Vec<PathBuf>>,
    /// Also score the padded tumor box.
    #[arg(long)]
    with_masks: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum SamplerArg {
    Rflow,
    Ddpm,
}

#[derive(Args)]
struct BenchArgs {
    /// Latent-network checkpoint; random desk-scale weights when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    vae_checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "200")]
    steps: Vec<usize>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "rflow,ddpm")]
    samplers: Vec<SamplerArg>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 16)]
    extent: usize,
    /// Write the table as CSV here instead of printing JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn gen_data(a: GenData) -> Result<()> {
    let counts = match a.split.as_deref() {
        Some([t, v, s]) => (*t, *v, *s),
        Some(other) => return Err(Error::ConfigInvalid(format!("--split takes three counts, got {other:?}"))),
        None => {
            let held = (a.cases as f64 * 0.1).round().max(1.0) as usize;
            if a.cases < 2 * held + 1 {
                return Err(Error::ConfigInvalid(format!("{} cases cannot fill three splits", a.cases)));
            }
            (a.cases - 2 * held, held, held)
        }
    };
    let spec = PhantomSpec { extents: [a.extent; 3], seed: a.seed, ..Default::default() };
    let m = write_dataset(&spec, &a.out, counts, a.nifti)?;
    println!("wrote {} cases to {}", m.cases.len(), a.out.display());
    Ok(())
}

fn run_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(m) = &a.manifest {
        cfg.manifest = m.clone();
    }
    if let Some(o) = &a.out_dir {
        cfg.out_dir = o.clone();
    }
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }
    if a.vae_checkpoint.is_some() {
        cfg.vae_checkpoint = a.vae_checkpoint.clone();
    }
    if a.resume.is_some() {
        cfg.resume = a.resume.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(o: &TrainOutcome) {
    let first = o.losses.first().map_or(f64::NAN, |r| r.loss);
    let last = o.losses.last().map_or(f64::NAN, |r| r.loss);
    println!("{} steps, loss {first:.5} -> {last:.5}, checkpoint {}", o.steps, o.final_checkpoint.display());
}

fn sample(a: SampleArgs) -> Result<()> {
    let synth = Synthesizer::load(&a.checkpoint, a.vae_checkpoint.as_deref())?;
    let manifest = Manifest::load(&a.manifest)?;
    let opts = SampleOptions {
        seed: a.seed,
        steps: a.steps,
        ablation: Ablation::from_masks(a.mask_t1w, a.mask_flair)?,
    };
    let written = pipeline::sample_split(&synth, &manifest, a.split.into(), &opts, &a.out)?;
    println!("wrote {} predictions to {}", written.len(), a.out.display());
    Ok(())
}

fn label_of(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let split = a.split.into();
    let score = |dir: &Path| pipeline::evaluate_dir(dir, &manifest, split, a.with_masks, &label_of(dir));
    if let Some(dir) = &a.pred {
        let r = score(dir)?;
        r.write(&a.out, &r.label)?;
        print_summary(&r);
    }
    if let Some(pair) = &a.compare {
        let (mut ra, rb) = (score(&pair[0])?, score(&pair[1])?);
        let mut tests = ra.compare(&rb, Region::Whole)?;
        if a.with_masks {
            tests.extend(ra.compare(&rb, Region::Tumor)?);
        }
        rb.write(&a.out, &rb.label)?;
        print_summary(&ra);
        print_summary(&rb);
        for t in &tests {
            println!("{} {}: t = {:.4}, dof = {:.2}, p = {:.3e}", t.region, t.metric, t.t, t.dof, t.p);
        }
        ra.ttests = tests;
        ra.write(&a.out, &ra.label)?;
        let path = a.out.join("ttests.json");
        let text = serde_json::to_string_pretty(&ra.ttests).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
    }
    Ok(())
}

fn print_summary(r: &latflow::metrics::MetricReport) {
    for agg in &r.aggregates {
        println!("{} {} {}: {:.4} +/- {:.4} (n = {})", r.label, agg.region, agg.metric, agg.mean, agg.std, agg.n);
    }
}

fn bench(a: BenchArgs) -> Result<()> {
    let (vae, vae_params, unet, params, ddpm) = match &a.checkpoint {
        Some(ck) => {
            let s = Synthesizer::load(ck, a.vae_checkpoint.as_deref())?;
            let ddpm = match s.scheduler {
                SchedulerConfig::Ddpm { train_timesteps, beta_start, beta_end } => {
                    DdpmSchedule::linear(train_timesteps, beta_start, beta_end)?
                }
                SchedulerConfig::Rflow(_) => DdpmSchedule::default(),
            };
            (s.vae, s.vae_params, s.unet, s.params, ddpm)
        }
        None => {
            let mut rng = latflow::rng::stream(0, &[latflow::rng::tag("bench-init")]);
            let (vae, vae_params) = match &a.vae_checkpoint {
                Some(p) => {
                    let (v, ck) = load_vae(p)?;
                    (v, ck.params)
                }
                None => {
                    let v = Vae::new(Default::default())?;
                    let p = v.init_params(&mut rng)?;
                    (v, p)
                }
            };
            let unet = UNet::new(UNetConfig::desk(vae.config.latent_channels))?;
            let params = unet.init_params(&mut rng)?;
            (vae, vae_params, unet, params, DdpmSchedule::default())
        }
    };
    let mut runs = Vec::new();
    for s in &a.samplers {
        match s {
            SamplerArg::Rflow => runs.extend(a.steps.iter().map(|&k| (ModelKind::Rflow, k))),
            SamplerArg::Ddpm => runs.push((ModelKind::Ddpm, ddpm.len())),
        }
    }
    let report = pipeline::bench(&vae, &vae_params, &unet, &params, [a.extent; 3], &runs, &ddpm, a.repeats)?;
    match &a.out {
        Some(path) => {
            std::fs::write(path, report.to_csv()?).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            println!("wrote {}", path.display());
        }
        None => println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainVae(a) => train::train_vae(&run_config(&a)?).map(|o| report(&o)),
        Command::TrainRflow(a) => train::train_rflow(&run_config(&a)?).map(|o| report(&o)),
        Command::TrainDdpm(a) => train::train_ddpm(&run_config(&a)?).map(|o| report(&o)),
        Command::Sample(a) => sample(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Bench(a) => bench(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("RFLOW_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // a pool that is already built keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 1 })
        }
    }
}
