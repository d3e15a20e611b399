use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use howlkit::config::RunConfig;
use howlkit::loopsim::AhsProcessor;
use howlkit::metrics::{evaluate, run_variant, score, write_spectrogram_pgm, AhsVariant};
use howlkit::neural_kalman::{KalmanAhs, Nets};
use howlkit::scene::SceneSampler;
use howlkit::signal::TimeSignal;
use howlkit::trainer::{load_nets, train, Checkpoint, LogRecord};
use howlkit::wav::{read_wav, write_wav};
use howlkit::Error;

#[derive(Parser)]
#[command(name = "howlkit", version, about = "Closed-loop howling simulation and suppression")]
struct Cli {
    /// TOML run configuration; defaults apply to everything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed (sampler, networks and trainer).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the scene length in seconds.
    #[arg(long, global = true)]
    duration: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    None,
    Kalman,
    Neuralkalman,
}

#[derive(Args, Clone)]
struct VariantOpts {
    #[arg(long, value_enum, default_value = "kalman")]
    variant: VariantArg,
    /// Learned variant without the masked reference.
    #[arg(long)]
    no_mask: bool,
    /// Learned variant without the learned covariances.
    #[arg(long)]
    no_cov: bool,
    /// Drop gradients through the filter recursion when training.
    #[arg(long)]
    stop_grad_filter: bool,
    /// Network weights or training checkpoint for the learned variant.
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as TOML.
    Config,
    /// Render closed-loop scenes to WAV files plus a manifest.
    Simulate {
        #[arg(long, required = true)]
        out: PathBuf,
        /// Loop gains; repeat for several.
        #[arg(long)]
        gain: Vec<f64>,
        #[command(flatten)]
        variant: VariantOpts,
    },
    /// Run one suppressor on a WAV file (open loop) or on a sampled scene.
    Suppress {
        #[arg(long, required = true)]
        out: PathBuf,
        /// Microphone recording to process.
        #[arg(long, conflicts_with = "scene")]
        input: Option<PathBuf>,
        /// Loudspeaker signal matching `--input`; silence when absent.
        #[arg(long, requires = "input")]
        reference: Option<PathBuf>,
        /// Index into the evaluation scene list.
        #[arg(long)]
        scene: Option<usize>,
        #[arg(long, default_value_t = 2.0)]
        gain: f64,
        #[command(flatten)]
        variant: VariantOpts,
    },
    /// Generate loudspeaker and talker impulse responses for sampled rooms.
    Rir {
        #[arg(long, required = true)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Train the networks inside the closed loop.
    Train {
        /// Checkpoint to write.
        #[arg(long, required = true)]
        out: PathBuf,
        /// Use synthetic utterances (the default when no corpus is configured).
        #[arg(long, conflicts_with = "corpus")]
        synthetic: bool,
        /// Directory of mono WAV utterances.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Learned variant without the masked reference.
        #[arg(long)]
        no_mask: bool,
        /// Learned variant without the learned covariances.
        #[arg(long)]
        no_cov: bool,
        #[arg(long)]
        stop_grad_filter: bool,
    },
    /// Sweep suppressors over gains and scenes; writes CSV and JSON reports.
    Eval {
        #[arg(long, required = true)]
        out: PathBuf,
        #[arg(long)]
        gain: Vec<f64>,
        /// Network weights or checkpoint; adds the learned variants.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Evaluate only this variant (with the ablation flags).
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long)]
        no_mask: bool,
        #[arg(long)]
        no_cov: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Shape(_) | Error::Geometry(_) | Error::EmptyPool(_) => 2,
        Error::Io(_) | Error::Wav(_) | Error::Format(_) | Error::RateMismatch { .. } | Error::SignalTooShort { .. } => 3,
        Error::NonFinite(_) | Error::Numeric(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn effective_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.trainer.seed = seed;
    }
    if let Some(d) = cli.duration {
        cfg.sampler.duration = d;
        cfg.trainer.duration = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn variant_of(cfg: &RunConfig, arg: VariantArg, no_mask: bool, no_cov: bool, stop_grad: bool) -> Result<AhsVariant, Error> {
    if arg != VariantArg::Neuralkalman && (no_mask || no_cov) {
        return Err(Error::Config("--no-mask and --no-cov apply to --variant neuralkalman".into()));
    }
    Ok(match arg {
        VariantArg::None => AhsVariant::Identity,
        VariantArg::Kalman => AhsVariant::kalman(cfg.filter.fdkf),
        VariantArg::Neuralkalman => {
            let mut hybrid = cfg.filter;
            if no_mask {
                hybrid.reference = howlkit::neural_kalman::ReferenceSource::Raw;
            }
            if no_cov {
                hybrid.covariance = howlkit::neural_kalman::CovarianceSource::Classical;
            }
            hybrid.stop_grad_filter |= stop_grad;
            AhsVariant::Hybrid(hybrid)
        }
    })
}

fn nets_for(variant: &AhsVariant, weights: Option<&Path>) -> Result<Option<Arc<Nets<f64>>>, Error> {
    match (variant.needs_nets(), weights) {
        (false, _) => Ok(None),
        (true, Some(p)) => Ok(Some(Arc::new(load_nets(p)?))),
        (true, None) => Err(Error::Config("the learned variant needs --weights".into())),
    }
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text)?;
    Ok(())
}

fn to_json(v: &serde_json::Value) -> Result<String, Error> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = effective_config(&cli)?;
    let format = cfg.output.wav_format;
    let rate = cfg.sampler.sample_rate;
    match cli.command {
        Command::Config => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
        Command::Simulate { out, gain, variant } => {
            let v = variant_of(&cfg, variant.variant, variant.no_mask, variant.no_cov, variant.stop_grad_filter)?;
            let nets = nets_for(&v, variant.weights.as_deref())?;
            let sampler = SceneSampler::new(cfg.sampler.clone(), cfg.seed)?;
            let gains = if gain.is_empty() { cfg.simulate.gains.clone() } else { gain };
            let draws = sampler.fixed_set(cfg.simulate.split, cfg.simulate.scenes, cfg.seed);
            create_dir(&out)?;
            let setup = cfg.eval_setup(cfg.sampler.duration);
            let mut manifest = Vec::new();
            for (i, draw) in draws.iter().enumerate() {
                for &g in &gains {
                    let scene = sampler.build_with_gain(draw, g)?;
                    let result = run_variant(&scene, &v, &setup, nets.clone())?;
                    let dir = out.join(format!("scene{i:03}_g{g}"));
                    create_dir(&dir)?;
                    for (name, data) in [
                        ("mic", &result.mic),
                        ("output", &result.output),
                        ("loudspeaker", &result.loudspeaker),
                        ("playback", &result.playback),
                        ("target", &result.target),
                    ] {
                        write_wav(&dir.join(format!("{name}.wav")), data, rate, format)?;
                    }
                    let (sdr, lsd) = score(&result, &cfg.stft)?;
                    manifest.push(serde_json::json!({
                        "scene": i, "gain": g, "draw": draw, "variant": v.label(),
                        "dir": dir.file_name().map(|n| n.to_string_lossy().into_owned()),
                        "sdr_db": sdr, "lsd_db": lsd,
                        "howl_at": result.howl_event.map(|e| e.detected_at),
                    }));
                }
            }
            write_text(&out.join("manifest.json"), &to_json(&manifest.into())?)
        }
        Command::Suppress { out, input, reference, scene, gain, variant } => {
            let v = variant_of(&cfg, variant.variant, variant.no_mask, variant.no_cov, variant.stop_grad_filter)?;
            let nets = nets_for(&v, variant.weights.as_deref())?;
            create_dir(&out)?;
            let (mic, output, summary) = match (input, scene) {
                (Some(path), _) => {
                    let mic = read_wav::<f64>(&path, Some(rate))?;
                    let reference = match reference {
                        Some(p) => read_wav::<f64>(&p, Some(rate))?,
                        None => TimeSignal::zeros(mic.len(), rate),
                    };
                    if reference.len() != mic.len() {
                        return Err(Error::Shape("reference and input lengths differ".into()));
                    }
                    let output = suppress_open_loop(&cfg, &v, nets, mic.samples(), reference.samples())?;
                    (mic.into_samples(), output, serde_json::json!({ "variant": v.label(), "input": path }))
                }
                (None, idx) => {
                    let idx = idx.unwrap_or(0);
                    let sampler = SceneSampler::new(cfg.sampler.clone(), cfg.seed)?;
                    let draws = sampler.fixed_set(cfg.eval.split, idx + 1, cfg.eval.draw_seed);
                    let scene = sampler.build_with_gain(&draws[idx], gain)?;
                    let result = run_variant(&scene, &v, &cfg.eval_setup(cfg.sampler.duration), nets)?;
                    let (sdr, lsd) = score(&result, &cfg.stft)?;
                    write_wav(&out.join("target.wav"), &result.target, rate, format)?;
                    let summary = serde_json::json!({
                        "variant": v.label(), "scene": idx, "gain": gain, "sdr_db": sdr, "lsd_db": lsd,
                        "howl_at": result.howl_event.map(|e| e.detected_at),
                    });
                    (result.mic, result.output, summary)
                }
            };
            write_wav(&out.join("mic.wav"), &mic, rate, format)?;
            write_wav(&out.join("output.wav"), &output, rate, format)?;
            write_spectrogram_pgm(&out.join("mic.pgm"), &mic, &cfg.stft)?;
            write_spectrogram_pgm(&out.join("output.pgm"), &output, &cfg.stft)?;
            let text = to_json(&summary)?;
            println!("{text}");
            write_text(&out.join("summary.json"), &text)
        }
        Command::Rir { out, count } => {
            let sampler = SceneSampler::new(cfg.sampler.clone(), cfg.seed)?;
            create_dir(&out)?;
            let draws = sampler.fixed_set(cfg.eval.split, count, cfg.seed);
            let mut manifest = Vec::new();
            for (i, d) in draws.iter().enumerate() {
                let (feedback, near) = sampler.rir_pair(d.room, d.rt60)?;
                write_wav(&out.join(format!("rir{i:03}_feedback.wav")), feedback.taps(), rate, howlkit::wav::WavFormat::Float32)?;
                write_wav(&out.join(format!("rir{i:03}_near.wav")), near.taps(), rate, howlkit::wav::WavFormat::Float32)?;
                manifest.push(serde_json::json!({ "index": i, "room": d.room, "rt60": d.rt60, "layout": sampler.layout(d.room) }));
            }
            write_text(&out.join("manifest.json"), &to_json(&manifest.into())?)
        }
        Command::Train { out, synthetic, corpus, no_mask, no_cov, stop_grad_filter } => {
            let mut cfg = cfg;
            if synthetic {
                cfg.sampler.corpus.clear();
            }
            if let Some(dir) = corpus {
                cfg.sampler.corpus = wav_files(&dir)?;
            }
            if let AhsVariant::Hybrid(h) = variant_of(&cfg, VariantArg::Neuralkalman, no_mask, no_cov, stop_grad_filter)? {
                cfg.filter = h;
            }
            let sampler = SceneSampler::new(cfg.sampler.clone(), cfg.seed)?;
            let nets = Nets::new(cfg.filter.fdkf.num_bins, &cfg.nets, cfg.seed)?;
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            let outcome = train(nets, &sampler, &cfg.trainer, &cfg.train_setup(), &mut |r: &LogRecord| {
                let _ = writeln!(lock, "{}", r.to_json_line());
                let _ = lock.flush();
            })?;
            let ck = Checkpoint { epoch: outcome.log.best_epoch as u64, nets: outcome.nets, optimizer: outcome.optimizer };
            ck.save(&out)
        }
        Command::Eval { out, gain, weights, variant, no_mask, no_cov } => {
            let gains = if gain.is_empty() { cfg.eval.gains.clone() } else { gain };
            let variants = match variant {
                Some(arg) => vec![variant_of(&cfg, arg, no_mask, no_cov, false)?],
                None => {
                    let f = cfg.filter.fdkf;
                    let mut v = vec![AhsVariant::Identity, AhsVariant::kalman(f)];
                    if weights.is_some() {
                        v.push(AhsVariant::Hybrid(cfg.filter));
                        v.push(AhsVariant::neural(f, false, true, cfg.filter.stop_grad_filter));
                        v.push(AhsVariant::neural(f, true, false, cfg.filter.stop_grad_filter));
                    }
                    v
                }
            };
            let nets = match &weights {
                Some(p) => Some(Arc::new(load_nets(p)?)),
                None => None,
            };
            if variants.iter().any(|v| v.needs_nets()) && nets.is_none() {
                return Err(Error::Config("the learned variant needs --weights".into()));
            }
            let sampler = SceneSampler::new(cfg.sampler.clone(), cfg.seed)?;
            let draws = sampler.fixed_set(cfg.eval.split, cfg.eval.scenes, cfg.eval.draw_seed);
            let report = evaluate(&sampler, &draws, &variants, &gains, &cfg.eval_setup(cfg.sampler.duration), nets)?;
            create_dir(&out)?;
            write_text(&out.join("report.csv"), &report.rows_csv())?;
            write_text(&out.join("summary.csv"), &report.summary_csv())?;
            write_text(&out.join("report.json"), &report.to_json()?)?;
            print!("{}", report.summary_csv());
            Ok(())
        }
    }
}

/// Streams a recording through a suppressor without closing the loop and
/// removes the processing latency from the output.
fn suppress_open_loop(
    cfg: &RunConfig,
    variant: &AhsVariant,
    nets: Option<Arc<Nets<f64>>>,
    mic: &[f64],
    reference: &[f64],
) -> Result<Vec<f64>, Error> {
    let mut ahs: Box<dyn AhsProcessor<f64>> = match variant {
        AhsVariant::Identity => Box::new(howlkit::loopsim::IdentityAhs::new(cfg.stft.hop)),
        AhsVariant::Hybrid(h) => Box::new(KalmanAhs::new(cfg.stft, *h, nets)?),
    };
    let (block, latency) = (ahs.block_len(), ahs.latency());
    let padded_len = (mic.len() + latency).div_ceil(block) * block;
    let pad = |x: &[f64]| {
        let mut v = x.to_vec();
        v.resize(padded_len, 0.0);
        v
    };
    let (m, r) = (pad(mic), pad(reference));
    let mut out = vec![0.0; padded_len];
    for start in (0..padded_len).step_by(block) {
        ahs.process(&m[start..start + block], &r[start..start + block], &mut out[start..start + block]);
    }
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("suppressor output"));
    }
    Ok(out[latency..latency + mic.len()].to_vec())
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>, Error> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::EmptyPool("corpus directory"));
    }
    Ok(files)
}
