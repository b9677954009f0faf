//! Command-line front end: data synthesis, training, offline and streaming
//! denoising, benchmarking, ablation and evaluation.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or format
//! error, 3 numeric failure.

use std::ffi::OsString;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use unet_denoise::data::{load_manifest, load_wav, parse_manifest, save_wav, synth_pairs, write_manifest};
use unet_denoise::eval::{ablation_run, denoise, evaluate_noisy, rtf_bench, AblationOptions, ClipMetrics, MetricReport, RtfOptions};
use unet_denoise::io::atomic_write;
use unet_denoise::stream::StreamOptions;
use unet_denoise::train::{load_checkpoint, parse_run_config, train_loop, RunOutputs, Trainer};
use unet_denoise::{latency_samples, AudioClip, Error, Model, ModelConfig, Stream, TrainConfig};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "unet-denoise", version, about = "Causal U-Net waveform denoiser")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic clean/noisy WAV pairs and train/test manifests
    SynthData(SynthArgs),
    /// Train from a config file and a manifest
    Train(TrainArgs),
    /// Denoise one file offline
    Denoise(DenoiseArgs),
    /// Denoise raw f32 little-endian samples from stdin to stdout
    Stream(StreamArgs),
    /// Real-time factor and parameter count
    Bench(BenchArgs),
    /// Print a configuration, its parameter count and latency
    Info(InfoArgs),
    /// Train and evaluate the blocks x loss-mode grid
    Ablate(AblateArgs),
    /// Metrics for a manifest of (reference, estimate) pairs
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16000)]
    sr: u32,
    #[arg(long, default_value_t = 400)]
    train_count: usize,
    #[arg(long, default_value_t = 50)]
    test_count: usize,
    #[arg(long, default_value_t = 1.0)]
    seconds: f64,
    #[arg(long, default_value_t = -5.0, allow_hyphen_values = true)]
    snr_min: f64,
    #[arg(long, default_value_t = 25.0, allow_hyphen_values = true)]
    snr_max: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// key=value file with model and training settings
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training manifest
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory for loss.tsv and checkpoints
    #[arg(long)]
    out: PathBuf,
    /// Resume from this checkpoint instead of starting fresh
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Args, Debug)]
struct DenoiseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// WAV input, or raw f32 little-endian with a `.f32` extension
    #[arg(long = "in")]
    input: PathBuf,
    /// WAV output, or raw f32 little-endian with a `.f32` extension
    #[arg(long)]
    out: PathBuf,
    /// Sample rate of raw input
    #[arg(long, default_value_t = 16000)]
    sr: u32,
}

#[derive(Args, Debug)]
struct StreamArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Samples read from stdin per step
    #[arg(long, default_value_t = 256)]
    chunk: usize,
    #[arg(long, default_value_t = 16000)]
    sr: u32,
    /// Bound the attention cache to this many frames
    #[arg(long)]
    max_context: Option<usize>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Model config; the full model with 3 and 5 blocks when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 10.0)]
    seconds: f64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 16000)]
    sr: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct InfoArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 16000)]
    sr: u32,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Training settings plus `depth`, `hidden`, `kernel`
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training manifest
    #[arg(long = "in")]
    input: PathBuf,
    /// Held-out manifest
    #[arg(long)]
    test: PathBuf,
    /// Comma-separated attention block counts
    #[arg(long, default_value = "3,5")]
    blocks: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Manifest of `reference<TAB>estimate` pairs
    #[arg(long = "in")]
    input: PathBuf,
    /// Denoise the second column with this model before scoring
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failed command: exit code plus a one-line diagnostic.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => EXIT_USAGE,
            Error::NonFinite(_) | Error::NotScalar(_) | Error::GraphConsumed => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdin: &mut dyn Read, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { stdout.write_all(text.as_bytes()) } else { stderr.write_all(text.as_bytes()) };
            return code;
        }
    };
    match dispatch(cli.command, stdin, stdout, stderr) {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(stderr, "error: {}", f.message.lines().next().unwrap_or(""));
            f.code
        }
    }
}

fn dispatch(cmd: Command, stdin: &mut dyn Read, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    match cmd {
        Command::SynthData(a) => synth_data(a, out),
        Command::Train(a) => train(a, out, err),
        Command::Denoise(a) => denoise_file(a, out),
        Command::Stream(a) => stream(a, stdin, out, err),
        Command::Bench(a) => bench(a, out),
        Command::Info(a) => info(a, out),
        Command::Ablate(a) => ablate(a, out, err),
        Command::Eval(a) => eval(a, out),
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| Failure { code: EXIT_DATA, message: format!("{}: {e}", path.display()) })
}

fn load_model(path: &Path) -> CliResult<Model<f32>> {
    Ok(load_checkpoint(path)?.to_model()?)
}

fn is_raw(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "f32")
}

pub fn decode_f32(bytes: &[u8]) -> CliResult<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Failure { code: EXIT_DATA, message: format!("raw f32 input of {} bytes is not a whole number of samples", bytes.len()) });
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn encode_f32(samples: &[f32]) -> Vec<u8> {
    samples.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn read_audio(path: &Path, sr: u32) -> CliResult<AudioClip> {
    if is_raw(path) {
        Ok(AudioClip::new(sr, decode_f32(&std::fs::read(path)?)?)?)
    } else {
        Ok(load_wav(path)?)
    }
}

fn write_audio(path: &Path, clip: &AudioClip) -> CliResult {
    if is_raw(path) {
        let bytes = encode_f32(&clip.samples);
        atomic_write(path, |w| Ok(w.write_all(&bytes)?))?;
    } else {
        save_wav(clip, path)?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult {
    atomic_write(path, |w| Ok(w.write_all(text.as_bytes())?))?;
    Ok(())
}

fn synth_data(a: SynthArgs, out: &mut dyn Write) -> CliResult {
    if a.train_count == 0 {
        return Err(Failure::usage("--train-count must be positive"));
    }
    let snr = (a.snr_min, a.snr_max);
    for (split, count, seed) in [("train", a.train_count, a.seed), ("test", a.test_count, a.seed ^ 0x5eed_7e57)] {
        if count == 0 {
            continue;
        }
        let dir = a.out.join(split);
        std::fs::create_dir_all(dir.join("clean"))?;
        std::fs::create_dir_all(dir.join("noisy"))?;
        let pairs = synth_pairs(count, seed, a.seconds, a.sr, snr)?;
        let mut entries = Vec::with_capacity(count);
        for (i, (clean, noisy)) in pairs.iter().enumerate() {
            let (c, n) = (PathBuf::from(format!("{split}/clean/{i:05}.wav")), PathBuf::from(format!("{split}/noisy/{i:05}.wav")));
            save_wav(clean, &a.out.join(&c))?;
            save_wav(noisy, &a.out.join(&n))?;
            entries.push((c, n));
        }
        write_manifest(&a.out.join(format!("{split}.tsv")), &entries)?;
        writeln!(out, "{split}: {count} pairs -> {}", a.out.join(format!("{split}.tsv")).display())?;
    }
    Ok(())
}

fn load_run_config(path: Option<&Path>) -> CliResult<(ModelConfig, TrainConfig)> {
    match path {
        Some(p) => Ok(parse_run_config(&read_text(p)?)?),
        None => Ok((ModelConfig::small(4, 16, 4, 2), TrainConfig::default())),
    }
}

fn train(a: TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    let mut trainer = match &a.checkpoint {
        Some(ck) => {
            if a.config.is_some() {
                return Err(Failure::usage("--checkpoint resumes with its stored config; drop --config"));
            }
            Trainer::from_checkpoint(&load_checkpoint(ck)?)?
        }
        None => {
            let (mc, mut tc) = load_run_config(a.config.as_deref())?;
            if let Some(s) = a.seed {
                tc.seed = s;
            }
            Trainer::new(Model::build(mc, tc.seed)?, tc)?
        }
    };
    let data = load_manifest(&a.input, trainer.config().clip_seconds)?;
    std::fs::create_dir_all(&a.out)?;
    let every = a.log_every.max(1) as u64;
    let rows = train_loop(&mut trainer, &data, &RunOutputs { dir: Some(a.out.clone()) }, |r| {
        if r.step % every == 0 {
            let _ = writeln!(err, "step {} lr {:.3e} loss {:.5} (l1 {:.5} sc {:.4} logmag {:.4})", r.step, r.lr, r.terms.total, r.terms.l1, r.terms.sc, r.terms.logmag);
        }
    })?;
    let last = rows.last().map(|r| r.terms.total).unwrap_or(f64::NAN);
    writeln!(out, "trained to step {} (final loss {last:.5}); checkpoint {}", trainer.step(), a.out.join("final.clun").display())?;
    Ok(())
}

fn denoise_file(a: DenoiseArgs, out: &mut dyn Write) -> CliResult {
    let model = load_model(&a.checkpoint)?;
    let clip = read_audio(&a.input, a.sr)?;
    let y = denoise(&model, &clip)?;
    write_audio(&a.out, &y)?;
    writeln!(out, "{} samples at {} Hz -> {}", y.len(), y.sample_rate, a.out.display())?;
    Ok(())
}

fn stream(a: StreamArgs, stdin: &mut dyn Read, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    if a.chunk == 0 {
        return Err(Failure::usage("--chunk must be positive"));
    }
    let model = load_model(&a.checkpoint)?;
    let lat = latency_samples(model.config());
    let _ = writeln!(err, "latency {lat} samples ({:.2} ms at {} Hz)", 1000.0 * lat as f64 / a.sr as f64, a.sr);
    let mut st = Stream::with_options(&model, StreamOptions { max_context: a.max_context });
    let mut buf = vec![0u8; a.chunk * 4];
    let mut carry = Vec::new();
    loop {
        let n = stdin.read(&mut buf)?;
        if n == 0 {
            break;
        }
        carry.extend_from_slice(&buf[..n]);
        let whole = carry.len() / 4 * 4;
        let samples = decode_f32(&carry[..whole])?;
        carry.drain(..whole);
        let y = st.feed(&samples)?;
        if !y.is_empty() {
            out.write_all(&encode_f32(&y))?;
            out.flush()?;
        }
    }
    if !carry.is_empty() {
        return Err(Failure { code: EXIT_DATA, message: format!("stream ended with {} stray bytes", carry.len()) });
    }
    out.write_all(&encode_f32(&st.flush()?))?;
    out.flush()?;
    Ok(())
}

fn bench(a: BenchArgs, out: &mut dyn Write) -> CliResult {
    let configs = match &a.config {
        Some(p) => vec![parse_model_config(&read_text(p)?)?],
        None => vec![ModelConfig::full(64, 3), ModelConfig::full(64, 5)],
    };
    let opts = RtfOptions { seconds: a.seconds, batch: a.batch, sample_rate: a.sr, reps: a.reps, seed: a.seed };
    writeln!(out, "config\tparams\trtf\treal_time")?;
    for cfg in configs {
        let model = Model::<f32>::build(cfg, a.seed)?;
        let r = rtf_bench(&model, opts)?;
        let tag = format!("D={} H={} K={} N={}", cfg.depth, cfg.hidden, cfg.kernel, cfg.blocks);
        writeln!(out, "{tag}\t{}\t{:.4e}\t{}", r.param_count, r.rtf, if r.rtf < 1.0 { "yes" } else { "no" })?;
    }
    Ok(())
}

fn parse_model_config(text: &str) -> CliResult<ModelConfig> {
    Ok(parse_run_config(text)?.0)
}

fn info(a: InfoArgs, out: &mut dyn Write) -> CliResult {
    let cfg = match (&a.config, &a.checkpoint) {
        (Some(_), Some(_)) => return Err(Failure::usage("give --config or --checkpoint, not both")),
        (Some(p), None) => parse_model_config(&read_text(p)?)?,
        (None, Some(p)) => load_checkpoint(p)?.model_config,
        (None, None) => ModelConfig::full(64, 5),
    };
    cfg.validate()?;
    let lat = latency_samples(&cfg);
    write!(out, "{}", cfg.to_kv().to_text())?;
    writeln!(out, "param_count={}", cfg.param_count())?;
    writeln!(out, "latency_samples={lat}")?;
    writeln!(out, "latency_ms={}", 1000.0 * lat as f64 / a.sr as f64)?;
    Ok(())
}

fn ablate(a: AblateArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    let (mc, mut tc) = load_run_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    let blocks = a
        .blocks
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| Failure::usage(format!("bad --blocks entry {s:?}"))))
        .collect::<CliResult<Vec<_>>>()?;
    let data = load_manifest(&a.input, tc.clip_seconds)?;
    let test = load_pairs(&a.test)?;
    let opts = AblationOptions { blocks, depth: mc.depth, hidden: mc.hidden, kernel: mc.kernel, train: tc, ..Default::default() };
    let table = ablation_run(&data, &test, &opts, |n, mode, row| {
        let _ = writeln!(err, "N={n} {mode}: si_sdr {:.3} dB, lsd {:.3} dB", row.report.si_sdr_db, row.report.lsd);
    })?;
    let mut text = table.to_text();
    for (n, full, l1) in table.lsd_reversals(0.1) {
        text.push_str(&format!("# reversal: N={n} l1+full lsd {full:.3} > l1 lsd {l1:.3}\n"));
    }
    out.write_all(text.as_bytes())?;
    if let Some(p) = &a.out {
        write_text(p, &text)?;
    }
    Ok(())
}

fn load_pairs(manifest: &Path) -> CliResult<Vec<(AudioClip, AudioClip)>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    parse_manifest(&read_text(manifest)?, base)?
        .into_iter()
        .map(|(c, n)| Ok((load_wav(&c)?, load_wav(&n)?)))
        .collect()
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> CliResult {
    let base = a.input.parent().unwrap_or(Path::new("."));
    let entries = parse_manifest(&read_text(&a.input)?, base)?;
    let pairs = load_pairs(&a.input)?;
    let report = match &a.checkpoint {
        None => evaluate_noisy(&pairs)?,
        Some(ck) => {
            let model = load_model(ck)?;
            let clips = pairs.iter().map(|(r, n)| Ok(ClipMetrics::measure(r, &denoise(&model, n)?)?)).collect::<CliResult<Vec<_>>>()?;
            MetricReport::from_clips(clips)?
        }
    };
    let names: Vec<String> = entries.iter().map(|(_, e)| e.display().to_string()).collect();
    let text = report.to_tsv(Some(&names));
    out.write_all(text.as_bytes())?;
    if let Some(p) = &a.out {
        write_text(p, &text)?;
    }
    Ok(())
}
