use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use facesketch::content::{train, ContentNet, ContentNetConfig, Sample, TrainOptions};
use facesketch::pipeline::align::Eyes;
use facesketch::pipeline::image_io::{load_gray, save_gray};
use facesketch::pipeline::{
    load_aligned_pair, load_exemplars, DatasetManifest, ExemplarCache, Preset, SynthesisConfig,
    Synthesizer,
};
use facesketch::selfcheck::{gradient_suite, TOLERANCE};
use facesketch::vgg::VggWeights;

#[derive(Parser, Debug)]
#[command(name = "facesketch", version, about = "Face photo to sketch synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a sketch for one photo.
    Synth(SynthArgs),
    /// Synthesize sketches for every photo in a manifest.
    Batch(BatchArgs),
    /// Train the content network on the photo-sketch pairs of a manifest.
    TrainContent(TrainArgs),
    /// Precompute exemplar sketch pyramids into the cache directory.
    CacheExemplars(CacheArgs),
    /// Run the finite-difference gradient self-test.
    Check(CheckArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML config file.
    #[arg(long)]
    config: PathBuf,
    /// Loss-weight preset; overrides the weights in the config.
    #[arg(long)]
    preset: Option<Preset>,
}

impl ConfigArgs {
    fn load(&self) -> Result<SynthesisConfig> {
        let mut cfg = SynthesisConfig::load(&self.config)
            .with_context(|| format!("loading config {}", self.config.display()))?;
        if let Some(p) = self.preset {
            cfg.apply_preset(p);
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    photo: PathBuf,
    /// Output sketch, written as 8-bit grayscale PNG or PGM.
    #[arg(long)]
    out: PathBuf,
    /// Eye centers in source pixels: `lx,ly,rx,ry`. Without them the photo is stretched onto the canvas.
    #[arg(long, value_parser = parse_eyes)]
    eyes: Option<Eyes>,
    /// Directory for intermediate images and the loss log.
    #[arg(long)]
    debug_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BatchArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Photos to process, with their eye coordinates.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Photos processed concurrently.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    jobs: u16,
    /// Write per-photo debug output under `<out-dir>/debug/<name>`.
    #[arg(long)]
    debug: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Config supplying the canvas geometry used for alignment.
    #[arg(long)]
    config: PathBuf,
    /// Manifest of photo-sketch pairs; records without a sketch are ignored.
    #[arg(long)]
    manifest: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    #[arg(long, default_value_t = 1.0)]
    lr: f64,
}

#[derive(Args, Debug)]
struct CacheArgs {
    /// Config naming the weights and the exemplar manifest.
    #[arg(long)]
    config: PathBuf,
    /// Cache directory; overrides `exemplar_cache` from the config.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CheckArgs {
    /// Random fixtures per check.
    #[arg(long, default_value_t = 20)]
    fixtures: usize,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
}

fn parse_eyes(s: &str) -> std::result::Result<Eyes, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [lx, ly, rx, ry] if v.iter().all(|c| c.is_finite()) => Ok(Eyes::new(lx, ly, rx, ry)),
        _ => Err("expected four finite numbers: lx,ly,rx,ry".into()),
    }
}

fn synth(args: &SynthArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let synth = Synthesizer::from_config(cfg)?;
    let photo = load_gray(&args.photo)?;
    let t = Instant::now();
    let out = synth.synthesize(&photo, args.eyes, args.debug_dir.as_deref())?;
    save_gray(&out.sketch, &args.out)?;
    log::info!(
        "{} -> {} in {:.1?}: {} iterations, loss {:e} ({:?})",
        args.photo.display(),
        args.out.display(),
        t.elapsed(),
        out.optim.report.iterations,
        out.optim.report.loss,
        out.optim.report.stop
    );
    Ok(())
}

fn batch(args: &BatchArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let manifest = DatasetManifest::load(&args.manifest)?;
    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let synth = Synthesizer::from_config(cfg)?;
    let records = &manifest.records;
    let next = AtomicUsize::new(0);
    let failures = Mutex::new(Vec::new());
    let run_one = |i: usize| -> Result<()> {
        let rec = &records[i];
        let stem = rec
            .photo
            .file_stem()
            .with_context(|| format!("{} has no file name", rec.photo.display()))?;
        let out = args.out_dir.join(Path::new(stem).with_extension("png"));
        let debug = args.debug.then(|| args.out_dir.join("debug").join(stem));
        let photo = load_gray(&rec.photo)?;
        let result = synth.synthesize(&photo, Some(rec.eyes), debug.as_deref())?;
        save_gray(&result.sketch, &out)?;
        log::info!("{} -> {}", rec.photo.display(), out.display());
        Ok(())
    };
    let jobs = (args.jobs as usize).min(records.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= records.len() {
                    break;
                }
                if let Err(e) = run_one(i) {
                    let msg = format!("{}: {e:#}", records[i].photo.display());
                    log::error!("{msg}");
                    failures.lock().expect("failure list").push((i, msg));
                }
            });
        }
    });
    let mut failures = failures.into_inner().expect("failure list");
    if failures.is_empty() {
        return Ok(());
    }
    failures.sort();
    for (_, msg) in &failures {
        eprintln!("failed: {msg}");
    }
    bail!("{} of {} photos failed", failures.len(), records.len())
}

fn train_content(args: &TrainArgs) -> Result<()> {
    let cfg = SynthesisConfig::load(&args.config)?;
    let manifest = DatasetManifest::load(&args.manifest)?;
    let canvas = cfg.canvas();
    let data = manifest
        .pairs()
        .map(|rec| {
            let (photo, sketch) = load_aligned_pair(rec, &canvas)?;
            Sample::from_pair(&photo, &sketch)
        })
        .collect::<facesketch::Result<Vec<_>>>()?;
    if data.is_empty() {
        bail!("{} lists no photo-sketch pairs", args.manifest.display());
    }
    let opts = TrainOptions {
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.seed,
        val_fraction: args.val_fraction,
        lr: args.lr,
        ..Default::default()
    };
    let net = ContentNet::new(ContentNetConfig::default(), args.seed)?;
    let outcome = train(net, &data, &opts, |s| match s.val_loss {
        Some(v) => log::info!("epoch {}: train {:.5} val {:.5}", s.epoch, s.train_loss, v),
        None => log::info!("epoch {}: train {:.5}", s.epoch, s.train_loss),
    })?;
    outcome.net.save(&args.out)?;
    println!(
        "trained on {} pairs; best epoch {} written to {}",
        data.len(),
        outcome.best_epoch,
        args.out.display()
    );
    Ok(())
}

fn cache_exemplars(args: &CacheArgs) -> Result<()> {
    let cfg = SynthesisConfig::load(&args.config)?;
    let dir = match args.cache_dir.as_ref().or(cfg.exemplar_cache.as_ref()) {
        Some(d) => d.clone(),
        None => bail!("no cache directory: pass --cache-dir or set exemplar_cache"),
    };
    let mut vgg = VggWeights::load(cfg.require(&cfg.vgg_weights, "vgg_weights")?)?;
    vgg.pooling = cfg.pooling;
    let manifest = DatasetManifest::load(cfg.require(&cfg.exemplars, "exemplars")?)?;
    let cache = ExemplarCache::new(&dir)?;
    let (set, hits) = load_exemplars(&manifest, &cfg.canvas(), &vgg, Some(&cache))?;
    println!(
        "{} exemplars: {hits} already cached, {} computed, in {}",
        set.len(),
        set.len() - hits,
        dir.display()
    );
    Ok(())
}

fn check(args: &CheckArgs) -> Result<()> {
    let results = gradient_suite(args.fixtures, args.seed)?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAILED" };
        failed += !r.passed() as usize;
        println!(
            "{:<16} {:>3} fixtures  worst {:.2e}  {status}",
            r.name, r.fixtures, r.worst
        );
    }
    if failed > 0 {
        bail!("{failed} gradient checks exceeded relative error {TOLERANCE:e}");
    }
    println!("all {} gradient checks passed", results.len());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Batch(a) => batch(a),
        Command::TrainContent(a) => train_content(a),
        Command::CacheExemplars(a) => cache_exemplars(a),
        Command::Check(a) => check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
