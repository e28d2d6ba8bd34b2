use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use nanocodec::codec::Codec;
use nanocodec::config::{builtin, published_rates_for, rate_report, CodecConfig};
use nanocodec::fsq::TokenFrame;
use nanocodec::generator::{build_decoder, build_encoder, lookahead_frames, Network};
use nanocodec::metrics::{cosine_similarity, mel_distance, parse_embeddings, scl, EmbeddingSource, MelSpec};
use nanocodec::streaming::{measure_latency, TokenArrival};
use nanocodec::wav::{read_wav, wav_bytes, Audio, ReadOptions, WavFormat};
use nanocodec::weights::{self, random_init_codec, WeightFile};

const PAPER_ENCODER_PARAMS: f64 = 30.4e6;
const PAPER_DECODER_PARAMS: f64 = 31.6e6;

#[derive(Parser)]
#[command(name = "nanocodec", version, about = "Low frame-rate neural audio codec")]
struct Cli {
    /// Print reports as JSON instead of key=value lines.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode a WAV file to a token bitstream.
    Encode {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        wav: WavArgs,
    },
    /// Decode a token bitstream to a WAV file.
    Decode {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write 32-bit float samples instead of 16-bit PCM.
        #[arg(long)]
        float: bool,
    },
    /// Print a config and its rates, a weight file's records, or a bitstream header.
    Info {
        #[arg(long)]
        config: Option<String>,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        bitstream: Option<PathBuf>,
    },
    /// Rates, parameter counts, lookahead and hop size of a config.
    Analyze {
        #[arg(long)]
        config: String,
    },
    /// Compare a reference and a degraded WAV.
    Eval {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        deg: PathBuf,
        #[arg(long)]
        ref_emb: Option<PathBuf>,
        #[arg(long)]
        deg_emb: Option<PathBuf>,
        #[arg(long, default_value_t = 22050)]
        sample_rate: u32,
        #[command(flatten)]
        wav: WavArgs,
    },
    /// Measure decoder time-to-first-audio and real-time factor.
    Bench {
        #[arg(long)]
        config: String,
        /// Weight file; random weights from --seed when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3.0)]
        seconds: f64,
        /// `instant`, `realtime` or a frame rate in frames per second.
        #[arg(long, default_value = "realtime")]
        arrival: String,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long)]
        force: bool,
    },
    /// Write reproducible random weights for a config.
    GenWeights {
        #[arg(long)]
        config: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Zero every conv weight and bias (snake alphas stay 1).
        #[arg(long)]
        zero: bool,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// Built-in config name or path to a config file.
    #[arg(long)]
    config: String,
    #[arg(long)]
    weights: PathBuf,
    /// Load weights even if their config fingerprint differs.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct WavArgs {
    /// Average multichannel input to mono.
    #[arg(long)]
    downmix: bool,
    /// Linearly resample input at other rates.
    #[arg(long)]
    resample: bool,
}

impl WavArgs {
    fn options(&self) -> ReadOptions {
        ReadOptions { downmix: self.downmix, resample: self.resample }
    }
}

/// Ordered key=value report.
#[derive(Default)]
struct Report(Vec<(String, Value, &'static str)>);

impl Report {
    fn add(&mut self, key: &str, value: impl Into<Value>) -> &mut Self {
        self.0.push((key.to_string(), value.into(), ""));
        self
    }

    fn add_unit(&mut self, key: &str, value: impl Into<Value>, unit: &'static str) -> &mut Self {
        self.0.push((key.to_string(), value.into(), unit));
        self
    }

    fn print(&self, json: bool) {
        if json {
            let map: serde_json::Map<String, Value> = self.0.iter().map(|(k, v, _)| (k.clone(), v.clone())).collect();
            println!("{}", serde_json::to_string_pretty(&Value::Object(map)).unwrap());
            return;
        }
        for (k, v, unit) in &self.0 {
            match v {
                Value::String(s) => println!("{k}={s}{unit}"),
                other => println!("{k}={other}{unit}"),
            }
        }
    }
}

fn rate_value(r: nanocodec::config::Rate) -> Value {
    if r.is_integer() {
        json!(r.to_integer())
    } else {
        json!(nanocodec::config::ratio_f64(r))
    }
}

fn config_dirs() -> Vec<PathBuf> {
    std::env::var_os("NANOCODEC_CONFIG_DIR").map(|v| std::env::split_paths(&v).collect()).unwrap_or_default()
}

/// Resolves a config file path, a built-in name, or a file in one of the
/// `NANOCODEC_CONFIG_DIR` directories.
fn resolve_config(spec: &str) -> Result<CodecConfig> {
    let from_file = |p: &Path| -> Result<CodecConfig> {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
        let c = CodecConfig::from_text(&text).with_context(|| format!("parsing config {}", p.display()))?;
        c.check()?;
        Ok(c)
    };
    let path = Path::new(spec);
    if path.is_file() {
        return from_file(path);
    }
    if let Ok(c) = builtin(spec) {
        return Ok(c);
    }
    for dir in config_dirs() {
        for candidate in [dir.join(spec), dir.join(format!("{spec}.cfg"))] {
            if candidate.is_file() {
                return from_file(&candidate);
            }
        }
    }
    bail!("unknown config `{spec}`: not a file, a built-in name, or a file in NANOCODEC_CONFIG_DIR")
}

fn load_codec(model: &ModelArgs) -> Result<Codec> {
    let config = resolve_config(&model.config)?;
    let loaded = weights::load(&model.weights, &config, model.force)
        .with_context(|| format!("loading weights {}", model.weights.display()))?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    Ok(Codec::new(config, &loaded.weights)?)
}

/// Writes through a temporary file in the destination directory, so a
/// failure never leaves a partial output behind.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating temp file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| anyhow!("writing {}: {}", path.display(), e.error))?;
    Ok(())
}

fn read_audio(path: &Path, rate: u32, opts: ReadOptions) -> Result<Audio> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_wav(BufReader::new(file), rate, opts).with_context(|| format!("reading {}", path.display()))
}

fn parse_arrival(s: &str) -> Result<TokenArrival> {
    match s {
        "instant" => Ok(TokenArrival::Instant),
        "realtime" => Ok(TokenArrival::RealTime),
        other => {
            let fps: f64 = other.parse().map_err(|_| anyhow!("--arrival must be instant, realtime or a number, got `{other}`"))?;
            if !(fps > 0.0 && fps.is_finite()) {
                bail!("--arrival rate must be positive");
            }
            Ok(TokenArrival::FramesPerSec(fps))
        }
    }
}

fn rate_fields(r: &mut Report, config: &CodecConfig) -> Result<()> {
    let rates = rate_report(config)?;
    r.add("frames/sec", rate_value(rates.frames_per_sec))
        .add("tokens/sec", rate_value(rates.tokens_per_sec))
        .add_unit("bitrate", rate_value(rates.bitrate_bps), "bps")
        .add_unit("bitrate_label", format!("{}kbps", rates.bitrate_kbps_label()), "")
        .add("bits_per_token", rates.bits_per_token)
        .add_unit("hop", rates.hop_samples, " samples");
    if let Some(p) = published_rates_for(config) {
        r.add("published_frames/sec", p.frames_per_sec)
            .add("published_tokens/sec", p.tokens_per_sec)
            .add_unit("published_bitrate", p.kbps, "kbps");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut report = Report::default();
    match cli.command {
        Command::Encode { model, input, out, wav } => {
            let codec = load_codec(&model)?;
            let audio = read_audio(&input, codec.config.sample_rate_hz, wav.options())?;
            let bytes = codec.encode(&audio.samples)?;
            write_atomic(&out, &bytes)?;
            let frames = (audio.samples.len() as u64).div_ceil(codec.config.hop_samples());
            report
                .add("config", codec.config.name.as_str())
                .add("samples", audio.samples.len())
                .add("frames", frames)
                .add_unit("bytes", bytes.len(), "")
                .add("out", out.display().to_string());
        }
        Command::Decode { model, input, out, float } => {
            let codec = load_codec(&model)?;
            let bytes = std::fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let samples = codec.decode(&bytes).with_context(|| format!("decoding {}", input.display()))?;
            let audio = Audio { sample_rate_hz: codec.config.sample_rate_hz, samples };
            let format = if float { WavFormat::Float32 } else { WavFormat::Pcm16 };
            write_atomic(&out, &wav_bytes(&audio, format)?)?;
            report
                .add("config", codec.config.name.as_str())
                .add("samples", audio.samples.len())
                .add("out", out.display().to_string());
        }
        Command::Info { config, weights: weights_path, bitstream } => {
            if config.is_none() && weights_path.is_none() && bitstream.is_none() {
                bail!("info needs at least one of --config, --weights, --bitstream");
            }
            let config = config.as_deref().map(resolve_config).transpose()?;
            if let Some(c) = &config {
                if !cli.json {
                    print!("{}", c.to_text());
                }
                report.add("config", c.name.as_str()).add("causality", c.causality_label());
                rate_fields(&mut report, c)?;
            }
            if let Some(path) = &weights_path {
                let file = WeightFile::read(path).with_context(|| format!("reading {}", path.display()))?;
                report.add("weights_records", file.weights.len());
                report.add(
                    "weights_fingerprint",
                    file.fingerprint.iter().map(|b| format!("{b:02x}")).collect::<String>(),
                );
                for (name, t) in file.weights.iter() {
                    let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
                    report.add(&format!("record.{name}"), dims.join("x"));
                }
                if let Some(c) = &config {
                    match weights::validate_file(file, c, false) {
                        Ok(l) => {
                            report.add("weights_valid", true).add("weights_warnings", l.warnings.len());
                        }
                        Err(e) => {
                            report.add("weights_valid", false).add("weights_error", e.to_string());
                        }
                    }
                }
            }
            if let Some(path) = &bitstream {
                let mut f = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
                let h = nanocodec::bitstream::BitstreamHeader::read_from(&mut f)?;
                let rates = h.rate_report()?;
                report
                    .add("bitstream_version", h.version)
                    .add("sample_rate_hz", h.sample_rate_hz)
                    .add("stride_product", h.stride_product)
                    .add("num_codebooks", h.num_codebooks)
                    .add("levels", h.levels.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(","))
                    .add("original_samples", h.original_sample_count)
                    .add("frames", h.num_frames())
                    .add("decoder_causal", h.decoder_causal())
                    .add_unit("stream_bitrate", rate_value(rates.bitrate_bps), "bps");
            }
        }
        Command::Analyze { config } => {
            let c = resolve_config(&config)?;
            report.add("config", c.name.as_str()).add("causality", c.causality_label());
            rate_fields(&mut report, &c)?;
            let enc = build_encoder(&c)?.parameter_count();
            let dec = build_decoder(&c)?.parameter_count();
            let (la_enc, la_dec) = lookahead_frames(&c)?;
            let total = la_enc.plus(&la_dec);
            report
                .add_unit("lookahead", format_lookahead(total.frames_f64()), " frames")
                .add_unit("lookahead_ms", round3(total.ms), " ms")
                .add_unit("lookahead_samples", total.samples, " samples")
                .add_unit("encoder_lookahead", format_lookahead(la_enc.frames_f64()), " frames")
                .add_unit("decoder_lookahead", format_lookahead(la_dec.frames_f64()), " frames")
                .add_unit("decoder_lookahead_ms", round3(la_dec.ms), " ms")
                .add("encoder_params", enc)
                .add("decoder_params", dec)
                .add("encoder_params_vs_30.4M", round3(enc as f64 / PAPER_ENCODER_PARAMS))
                .add("decoder_params_vs_31.6M", round3(dec as f64 / PAPER_DECODER_PARAMS));
        }
        Command::Eval { reference, deg, ref_emb, deg_emb, sample_rate, wav } => {
            let a = read_audio(&reference, sample_rate, wav.options())?;
            let b = read_audio(&deg, sample_rate, wav.options())?;
            if a.samples.len() != b.samples.len() {
                eprintln!(
                    "warning: lengths differ ({} vs {} samples); the shorter input is zero-padded",
                    a.samples.len(),
                    b.samples.len()
                );
            }
            let spec = MelSpec { sample_rate_hz: sample_rate, fmax: sample_rate as f64 / 2.0, ..MelSpec::default() };
            report.add("mel_dist", mel_distance(&a.samples, &b.samples, &spec)?);
            match (ref_emb, deg_emb) {
                (Some(r), Some(d)) => {
                    let read = |p: &Path, s| -> Result<_> {
                        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                        Ok(parse_embeddings(&text, s)?)
                    };
                    let g = read(&r, EmbeddingSource::GroundTruth)?;
                    let h = read(&d, EmbeddingSource::Generated)?;
                    if g.len() != h.len() || g.is_empty() {
                        bail!("embedding files hold {} and {} vectors; need the same nonzero count", g.len(), h.len());
                    }
                    let mut secs = 0.0;
                    for (x, y) in g.iter().zip(&h) {
                        secs += cosine_similarity(x, y)?;
                    }
                    report.add("secs", secs / g.len() as f64).add("scl", scl(&g, &h, 0.1)?);
                }
                (None, None) => {}
                _ => bail!("--ref-emb and --deg-emb must be given together"),
            }
        }
        Command::Bench { config, weights: weights_path, seed, seconds, arrival, runs, force } => {
            let c = resolve_config(&config)?;
            let arrival = parse_arrival(&arrival)?;
            let w = match &weights_path {
                Some(p) => weights::load(p, &c, force)?.weights,
                None => random_init_codec(&c, seed)?,
            };
            let decoder = Arc::new(Network::new(build_decoder(&c)?, &w)?);
            if !(seconds > 0.0 && seconds.is_finite()) {
                bail!("--seconds must be positive");
            }
            let n = ((seconds * c.sample_rate_hz as f64) / c.hop_samples() as f64).ceil().max(1.0) as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let codes = c.fsq.codes_per_codebook() as u32;
            let frames: Vec<TokenFrame> = (0..n)
                .map(|_| TokenFrame::new((0..c.fsq.num_codebooks).map(|_| rng.gen_range(0..codes)).collect()))
                .collect();
            let l = measure_latency(&decoder, &c.fsq, &frames, arrival, runs)?;
            report
                .add("config", c.name.as_str())
                .add("decoder_causal", c.decoder_causal)
                .add("frames", n)
                .add_unit("ttfa_ms", round3(l.ttfa_ms), "")
                .add_unit("ttfa_compute_ms", round3(l.ttfa_compute_ms), "")
                .add_unit("ttfa_buffering_ms", round3(l.ttfa_buffering_ms), "")
                .add("rtf", (l.rtf * 1e4).round() / 1e4)
                .add("frames_buffered_before_first_output", l.frames_buffered_before_first_output)
                .add("runs", l.runs);
        }
        Command::GenWeights { config, out, seed, zero } => {
            let c = resolve_config(&config)?;
            let mut w = random_init_codec(&c, seed)?;
            if zero {
                let names: Vec<String> = w.iter().map(|(k, _)| k.clone()).filter(|k| !k.ends_with(".alpha")).collect();
                for name in names {
                    w.get_mut(&name).unwrap().data.fill(0.0);
                }
            }
            let file = WeightFile::for_config(&c, w);
            let bytes = file.to_bytes();
            write_atomic(&out, &bytes)?;
            report
                .add("config", c.name.as_str())
                .add("records", file.weights.len())
                .add("bytes", bytes.len())
                .add("out", out.display().to_string());
        }
    }
    report.print(cli.json);
    Ok(())
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

fn format_lookahead(frames: f64) -> Value {
    if frames == frames.trunc() {
        json!(frames as u64)
    } else {
        json!(round3(frames))
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
