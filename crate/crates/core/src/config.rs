//! Codec configurations and the frame-rate / token-rate / bitrate arithmetic
//! derived from them.
//!
//! All rates are exact rationals. `22050 / 1024` is not 21.5, and the token
//! and bit rates inherit that exactly instead of accumulating float drift.

use std::fmt;

use num_rational::Ratio;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Exact rate in events per second.
pub type Rate = Ratio<u64>;

/// Number of encoder stages (residual block + strided conv).
pub const NUM_STAGES: usize = 5;

pub const DEFAULT_SAMPLE_RATE: u32 = 22050;
pub const DEFAULT_DILATIONS: [u32; 3] = [1, 3, 5];
pub const DEFAULT_RESIDUAL_KERNEL: usize = 3;

/// Finite scalar quantizer layout: `num_codebooks` parallel codebooks, each
/// quantizing `levels.len()` latent dimensions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FsqSpec {
    pub num_codebooks: usize,
    pub levels: Vec<u32>,
}

impl FsqSpec {
    pub fn new(num_codebooks: usize, levels: &[u32]) -> Self {
        Self {
            num_codebooks,
            levels: levels.to_vec(),
        }
    }

    pub fn dims_per_codebook(&self) -> usize {
        self.levels.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.num_codebooks * self.levels.len()
    }

    pub fn codes_per_codebook(&self) -> u64 {
        self.levels.iter().map(|&l| u64::from(l)).product()
    }

    pub fn bits_per_token(&self) -> u32 {
        bits_for_codes(self.codes_per_codebook())
    }
}

/// `ceil(log2(codes))`, the width needed to store any index below `codes`.
pub fn bits_for_codes(codes: u64) -> u32 {
    if codes <= 1 {
        0
    } else {
        u64::BITS - (codes - 1).leading_zeros()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CodecConfig {
    pub name: String,
    pub sample_rate_hz: u32,
    pub encoder_strides: Vec<u32>,
    pub encoder_initial_channels: usize,
    pub decoder_initial_channels: usize,
    pub fsq: FsqSpec,
    pub encoder_causal: bool,
    pub decoder_causal: bool,
    pub residual_dilations: Vec<u32>,
    pub residual_kernel_size: usize,
}

impl CodecConfig {
    /// Audio samples per latent frame (product of the encoder strides).
    pub fn hop_samples(&self) -> u64 {
        self.encoder_strides.iter().map(|&s| u64::from(s)).product()
    }

    /// Decoder upsample rates: the encoder strides in reverse order.
    pub fn decoder_upsample_rates(&self) -> Vec<u32> {
        self.encoder_strides.iter().rev().copied().collect()
    }

    /// Channel width entering the encoder's bottleneck projection.
    pub fn bottleneck_channels(&self) -> usize {
        self.encoder_initial_channels << self.encoder_strides.len()
    }

    pub fn is_fully_causal(&self) -> bool {
        self.encoder_causal && self.decoder_causal
    }

    pub fn causality_label(&self) -> &'static str {
        match (self.encoder_causal, self.decoder_causal) {
            (true, true) => "causal",
            (false, false) => "noncausal",
            (false, true) => "partialcausal",
            (true, false) => "causal-encoder",
        }
    }

    /// Returns an error listing every violation, or `Ok` for a usable config.
    pub fn check(&self) -> Result<()> {
        let violations = validate(self);
        if violations.is_empty() {
            Ok(())
        } else {
            let joined: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            Err(Error::Config(joined.join("; ")))
        }
    }

    /// Canonical key/value text, parseable by [`CodecConfig::from_text`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("name = {}\n", self.name));
        out.push_str(&self.architecture_text());
        out
    }

    fn architecture_text(&self) -> String {
        format!(
            "sample_rate_hz = {}\n\
             encoder_strides = {}\n\
             encoder_initial_channels = {}\n\
             decoder_initial_channels = {}\n\
             num_codebooks = {}\n\
             levels = {}\n\
             encoder_causal = {}\n\
             decoder_causal = {}\n\
             residual_dilations = {}\n\
             residual_kernel_size = {}\n",
            self.sample_rate_hz,
            join_list(&self.encoder_strides),
            self.encoder_initial_channels,
            self.decoder_initial_channels,
            self.fsq.num_codebooks,
            join_list(&self.fsq.levels),
            self.encoder_causal,
            self.decoder_causal,
            join_list(&self.residual_dilations),
            self.residual_kernel_size,
        )
    }

    /// SHA-256 over the canonical text minus the name, so renamed copies of
    /// the same architecture share weight files.
    pub fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(self.architecture_text().as_bytes()).into()
    }

    /// Parses the flat `key = value` format. `#` starts a comment. The
    /// residual fields are optional and default to dilations `1,3,5` with
    /// kernel size 3; everything else is required.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut fields: Vec<(&str, &str)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            if fields.iter().any(|(k, _)| *k == key) {
                return Err(Error::Config(format!("duplicate key `{key}`")));
            }
            fields.push((key, value.trim()));
        }

        let get = |key: &str| fields.iter().find(|(k, _)| *k == key).map(|(_, v)| *v);
        let require = |key: &str| get(key).ok_or_else(|| Error::Config(format!("missing key `{key}`")));

        const KNOWN: [&str; 11] = [
            "name",
            "sample_rate_hz",
            "encoder_strides",
            "encoder_initial_channels",
            "decoder_initial_channels",
            "num_codebooks",
            "levels",
            "encoder_causal",
            "decoder_causal",
            "residual_dilations",
            "residual_kernel_size",
        ];
        if let Some((key, _)) = fields.iter().find(|(k, _)| !KNOWN.contains(k)) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }

        let config = CodecConfig {
            name: require("name")?.to_string(),
            sample_rate_hz: parse_scalar("sample_rate_hz", require("sample_rate_hz")?)?,
            encoder_strides: parse_list("encoder_strides", require("encoder_strides")?)?,
            encoder_initial_channels: parse_scalar(
                "encoder_initial_channels",
                require("encoder_initial_channels")?,
            )?,
            decoder_initial_channels: parse_scalar(
                "decoder_initial_channels",
                require("decoder_initial_channels")?,
            )?,
            fsq: FsqSpec {
                num_codebooks: parse_scalar("num_codebooks", require("num_codebooks")?)?,
                levels: parse_list("levels", require("levels")?)?,
            },
            encoder_causal: parse_bool("encoder_causal", require("encoder_causal")?)?,
            decoder_causal: parse_bool("decoder_causal", require("decoder_causal")?)?,
            residual_dilations: match get("residual_dilations") {
                Some(v) => parse_list("residual_dilations", v)?,
                None => DEFAULT_DILATIONS.to_vec(),
            },
            residual_kernel_size: match get("residual_kernel_size") {
                Some(v) => parse_scalar("residual_kernel_size", v)?,
                None => DEFAULT_RESIDUAL_KERNEL,
            },
        };
        Ok(config)
    }
}

impl fmt::Display for CodecConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

fn join_list(values: &[u32]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_scalar<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<u32>> {
    let inner = value.trim().trim_start_matches('[').trim_end_matches(']').trim();
    if inner.is_empty() {
        return Ok(Vec::new());
    }
    inner
        .split(',')
        .map(|item| parse_scalar(key, item.trim()))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!("`{key}`: expected true/false, got `{other}`"))),
    }
}

/// One failed configuration invariant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation(pub String);

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Checks every config and quantizer invariant and returns all violations.
/// An empty result means the config is valid.
pub fn validate(config: &CodecConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |msg: String| out.push(Violation(msg));

    if config.name.is_empty() || config.name.chars().any(|c| c.is_whitespace() || c == '=' || c == '#') {
        push(format!("invalid name `{}`", config.name));
    }
    if config.sample_rate_hz == 0 {
        push("non-positive sample rate".into());
    }
    if config.encoder_strides.len() != NUM_STAGES {
        push(format!(
            "expected {NUM_STAGES} encoder strides, got {}",
            config.encoder_strides.len()
        ));
    }
    if config.encoder_strides.iter().any(|&s| s == 0) {
        push("non-positive stride".into());
    }
    if config.hop_samples() > u64::from(u32::MAX) {
        push("stride product does not fit in 32 bits".into());
    }
    if config.encoder_initial_channels == 0 {
        push("non-positive encoder_initial_channels".into());
    }
    let halvings = 1usize << config.encoder_strides.len().min(16);
    if config.decoder_initial_channels == 0 || config.decoder_initial_channels % halvings != 0 {
        push(format!(
            "decoder_initial_channels {} must be a positive multiple of {halvings}",
            config.decoder_initial_channels
        ));
    }

    let fsq = &config.fsq;
    if fsq.num_codebooks == 0 {
        push("num_codebooks must be positive".into());
    }
    if fsq.levels.is_empty() {
        push("empty level vector".into());
    }
    if fsq.levels.iter().any(|&l| l < 2) {
        push("every FSQ level must be at least 2".into());
    }
    if !fsq.levels.is_empty() && fsq.levels.iter().all(|&l| l >= 2) {
        let codes = fsq
            .levels
            .iter()
            .try_fold(1u64, |acc, &l| acc.checked_mul(u64::from(l)));
        match codes {
            Some(c) if bits_for_codes(c) <= 32 => {}
            _ => push("codebook size exceeds 2^32 codes".into()),
        }
    }
    if fsq.num_codebooks > usize::from(u16::MAX) || fsq.levels.len() > usize::from(u16::MAX) {
        push("too many codebooks or levels for the bitstream header".into());
    }

    if config.residual_dilations.is_empty() {
        push("empty residual dilation list".into());
    }
    if config.residual_dilations.iter().any(|&d| d == 0) {
        push("non-positive residual dilation".into());
    }
    if config.residual_kernel_size == 0 || config.residual_kernel_size % 2 == 0 {
        push(format!(
            "residual_kernel_size {} must be positive and odd",
            config.residual_kernel_size
        ));
    }
    out
}

/// Latent frames per second: `sample_rate / product(strides)`.
pub fn frame_rate_of(config: &CodecConfig) -> Result<Rate> {
    if config.encoder_strides.is_empty() {
        return Err(Error::Config("empty stride list".into()));
    }
    if config.encoder_strides.iter().any(|&s| s == 0) {
        return Err(Error::Config("non-positive stride".into()));
    }
    if config.sample_rate_hz == 0 {
        return Err(Error::Config("non-positive sample rate".into()));
    }
    Ok(Rate::new(u64::from(config.sample_rate_hz), config.hop_samples()))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RateReport {
    pub frames_per_sec: Rate,
    pub tokens_per_sec: Rate,
    pub bits_per_token: u32,
    pub bitrate_bps: Rate,
    pub hop_samples: u64,
}

impl RateReport {
    pub fn frames_per_sec_f64(&self) -> f64 {
        ratio_f64(self.frames_per_sec)
    }

    pub fn tokens_per_sec_f64(&self) -> f64 {
        ratio_f64(self.tokens_per_sec)
    }

    pub fn bitrate_bps_f64(&self) -> f64 {
        ratio_f64(self.bitrate_bps)
    }

    /// Bitrate in kbps truncated to two decimals, the way operating points
    /// are usually labelled (1787.5 bps reads as 1.78 kbps).
    pub fn bitrate_kbps_label(&self) -> String {
        let centi_kbps = (self.bitrate_bps / 10).to_integer();
        format!("{}.{:02}", centi_kbps / 100, centi_kbps % 100)
    }
}

pub fn ratio_f64(r: Rate) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Formats an exact rate with at most two decimals and no trailing zeros.
pub fn format_rate(r: Rate) -> String {
    if r.is_integer() {
        return r.to_integer().to_string();
    }
    let s = format!("{:.2}", ratio_f64(r));
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

pub fn rate_report(config: &CodecConfig) -> Result<RateReport> {
    config.check()?;
    let frames_per_sec = frame_rate_of(config)?;
    let tokens_per_sec = frames_per_sec * config.fsq.num_codebooks as u64;
    let bits_per_token = config.fsq.bits_per_token();
    Ok(RateReport {
        frames_per_sec,
        tokens_per_sec,
        bits_per_token,
        bitrate_bps: tokens_per_sec * u64::from(bits_per_token),
        hop_samples: config.hop_samples(),
    })
}

pub const STRIDES_21_5_FPS: [u32; 5] = [2, 2, 4, 8, 8];
pub const STRIDES_25_FPS: [u32; 5] = [2, 3, 3, 7, 7];
pub const STRIDES_12_5_FPS: [u32; 5] = [2, 3, 6, 7, 7];
pub const STRIDES_6_25_FPS: [u32; 5] = [3, 4, 6, 7, 7];

pub const LEVELS_2016: [u32; 4] = [8, 7, 6, 6];
pub const LEVELS_4032: [u32; 4] = [8, 8, 7, 9];
pub const LEVELS_65536: [u32; 4] = [16, 16, 16, 16];

pub const ENCODER_INITIAL_CHANNELS: usize = 24;
pub const DECODER_INITIAL_CHANNELS: usize = 864;

fn make(
    base: &str,
    strides: [u32; 5],
    num_codebooks: usize,
    levels: [u32; 4],
    encoder_causal: bool,
    decoder_causal: bool,
) -> CodecConfig {
    let mut config = CodecConfig {
        name: String::new(),
        sample_rate_hz: DEFAULT_SAMPLE_RATE,
        encoder_strides: strides.to_vec(),
        encoder_initial_channels: ENCODER_INITIAL_CHANNELS,
        decoder_initial_channels: DECODER_INITIAL_CHANNELS,
        fsq: FsqSpec::new(num_codebooks, &levels),
        encoder_causal,
        decoder_causal,
        residual_dilations: DEFAULT_DILATIONS.to_vec(),
        residual_kernel_size: DEFAULT_RESIDUAL_KERNEL,
    };
    config.name = format!("{base}-{}", config.causality_label());
    config
}

/// Every built-in operating point, in each causality variant that was
/// trained for it. Names are `<fps>fps-<kbps>kbps-<causality>`.
pub fn builtin_configs() -> Vec<CodecConfig> {
    vec![
        make("21.5fps-1.89kbps", STRIDES_21_5_FPS, 8, LEVELS_2016, false, false),
        make("21.5fps-1.89kbps", STRIDES_21_5_FPS, 8, LEVELS_2016, false, true),
        make("12.5fps-1.1kbps", STRIDES_12_5_FPS, 8, LEVELS_2016, true, true),
        make("12.5fps-1.1kbps", STRIDES_12_5_FPS, 8, LEVELS_2016, false, false),
        make("12.5fps-1.1kbps", STRIDES_12_5_FPS, 8, LEVELS_2016, false, true),
        make("25fps-1.1kbps", STRIDES_25_FPS, 4, LEVELS_2016, false, true),
        make("6.25fps-1.1kbps", STRIDES_6_25_FPS, 16, LEVELS_2016, false, true),
        make("12.5fps-1.78kbps", STRIDES_12_5_FPS, 13, LEVELS_2016, false, true),
        make("12.5fps-0.8kbps", STRIDES_12_5_FPS, 4, LEVELS_65536, false, true),
        make("12.5fps-0.6kbps", STRIDES_12_5_FPS, 4, LEVELS_4032, false, true),
    ]
}

/// Looks up a built-in config by full name, or by `<fps>fps-<kbps>kbps`
/// alone, which selects the noncausal-encoder / causal-decoder variant.
pub fn builtin(name: &str) -> Result<CodecConfig> {
    let configs = builtin_configs();
    if let Some(c) = configs.iter().find(|c| c.name == name) {
        return Ok(c.clone());
    }
    let alias = format!("{name}-partialcausal");
    configs
        .into_iter()
        .find(|c| c.name == alias)
        .ok_or_else(|| Error::ConfigNotFound(name.to_string()))
}

/// A published operating point: the rates a built-in config is expected to
/// reproduce, as printed (rounded) in the codec's results table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PublishedRates {
    pub config: &'static str,
    pub frames_per_sec: f64,
    pub tokens_per_sec: f64,
    pub kbps: f64,
    pub num_codebooks: usize,
    pub codes: u64,
}

pub const PUBLISHED_RATES: [PublishedRates; 7] = [
    PublishedRates { config: "21.5fps-1.89kbps", frames_per_sec: 21.5, tokens_per_sec: 172.0, kbps: 1.89, num_codebooks: 8, codes: 2016 },
    PublishedRates { config: "25fps-1.1kbps", frames_per_sec: 25.0, tokens_per_sec: 100.0, kbps: 1.1, num_codebooks: 4, codes: 2016 },
    PublishedRates { config: "12.5fps-1.1kbps", frames_per_sec: 12.5, tokens_per_sec: 100.0, kbps: 1.1, num_codebooks: 8, codes: 2016 },
    PublishedRates { config: "6.25fps-1.1kbps", frames_per_sec: 6.25, tokens_per_sec: 100.0, kbps: 1.1, num_codebooks: 16, codes: 2016 },
    PublishedRates { config: "12.5fps-1.78kbps", frames_per_sec: 12.5, tokens_per_sec: 162.5, kbps: 1.78, num_codebooks: 13, codes: 2016 },
    PublishedRates { config: "12.5fps-0.8kbps", frames_per_sec: 12.5, tokens_per_sec: 50.0, kbps: 0.8, num_codebooks: 4, codes: 65536 },
    PublishedRates { config: "12.5fps-0.6kbps", frames_per_sec: 12.5, tokens_per_sec: 50.0, kbps: 0.6, num_codebooks: 4, codes: 4032 },
];

/// Published rates for the operating point a config belongs to, if any.
pub fn published_rates_for(config: &CodecConfig) -> Option<&'static PublishedRates> {
    PUBLISHED_RATES
        .iter()
        .find(|p| config.name.strip_prefix(p.config).is_some_and(|rest| rest.starts_with('-')))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_strides(strides: &[u32]) -> CodecConfig {
        let mut c = builtin("12.5fps-1.1kbps").unwrap();
        c.encoder_strides = strides.to_vec();
        c
    }

    #[test]
    fn frame_rates_for_stride_schedules() {
        assert_eq!(frame_rate_of(&with_strides(&[2, 3, 6, 7, 7])).unwrap(), Rate::new(25, 2));
        assert_eq!(frame_rate_of(&with_strides(&[3, 4, 6, 7, 7])).unwrap(), Rate::new(25, 4));
        let fps = frame_rate_of(&with_strides(&[2, 2, 4, 8, 8])).unwrap();
        assert_eq!(fps, Rate::new(22050, 1024));
        assert_eq!(format_rate(fps), "21.53");
        assert!((ratio_f64(fps) - 21.5).abs() < 0.05);
    }

    #[test]
    fn zero_stride_is_a_config_error() {
        assert!(matches!(frame_rate_of(&with_strides(&[0, 2, 4, 8, 8])), Err(Error::Config(_))));
    }

    #[test]
    fn rate_report_matches_published_rows() {
        let r = rate_report(&builtin("12.5fps-1.78kbps").unwrap()).unwrap();
        assert_eq!(r.tokens_per_sec, Rate::new(325, 2));
        assert_eq!(r.bits_per_token, 11);
        assert_eq!(r.bitrate_bps, Rate::new(3575, 2));
        assert_eq!(r.bitrate_kbps_label(), "1.78");

        let r = rate_report(&builtin("12.5fps-0.8kbps").unwrap()).unwrap();
        assert_eq!((r.tokens_per_sec, r.bits_per_token, r.bitrate_bps), (Rate::from(50), 16, Rate::from(800)));

        let r = rate_report(&builtin("12.5fps-0.6kbps").unwrap()).unwrap();
        assert_eq!((r.tokens_per_sec, r.bits_per_token, r.bitrate_bps), (Rate::from(50), 12, Rate::from(600)));
    }

    #[test]
    fn ceil_log2_law() {
        assert_eq!(bits_for_codes(2016), 11);
        assert_eq!(bits_for_codes(4032), 12);
        assert_eq!(bits_for_codes(65536), 16);
        assert_eq!(bits_for_codes(2), 1);
        assert_eq!(bits_for_codes(2048), 11);
        assert_eq!(bits_for_codes(2049), 12);
        for codes in 2u64..5000 {
            let bits = bits_for_codes(codes);
            assert!(1u64 << bits >= codes && 1u64 << (bits - 1) < codes);
        }
    }

    #[test]
    fn builtin_lookup() {
        let c = builtin("12.5fps-1.1kbps-partialcausal").unwrap();
        assert_eq!(c.fsq, FsqSpec::new(8, &[8, 7, 6, 6]));
        assert!(!c.encoder_causal && c.decoder_causal);

        let c = builtin("21.5fps-1.89kbps").unwrap();
        assert_eq!(c.encoder_strides, vec![2, 2, 4, 8, 8]);
        assert_eq!(c.fsq.num_codebooks, 8);

        assert!(matches!(builtin("nonexistent"), Err(Error::ConfigNotFound(_))));
    }

    #[test]
    fn builtins_are_valid_and_unique() {
        let all = builtin_configs();
        for c in &all {
            assert!(validate(c).is_empty(), "{}: {:?}", c.name, validate(c));
            assert_eq!(c.decoder_upsample_rates(), c.encoder_strides.iter().rev().copied().collect::<Vec<_>>());
            assert_eq!(c.bottleneck_channels(), 768);
            assert!(published_rates_for(c).is_some(), "{}", c.name);
        }
        for (i, a) in all.iter().enumerate() {
            assert!(all[i + 1..].iter().all(|b| b.name != a.name));
        }
    }

    #[test]
    fn validation_collects_every_violation() {
        let mut c = with_strides(&[0, 2, 4, 8, 8]);
        c.fsq.levels.clear();
        c.residual_kernel_size = 4;
        let v = validate(&c);
        let text: Vec<String> = v.iter().map(|v| v.to_string()).collect();
        assert!(text.iter().any(|t| t.contains("non-positive stride")));
        assert!(text.iter().any(|t| t.contains("empty level vector")));
        assert!(text.iter().any(|t| t.contains("residual_kernel_size")));
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn text_round_trip_and_defaults() {
        for c in builtin_configs() {
            assert_eq!(CodecConfig::from_text(&c.to_text()).unwrap(), c);
        }
        let text = "# toy\nname = toy\nsample_rate_hz = 22050\nencoder_strides = [2, 2, 4, 8, 8]\n\
                    encoder_initial_channels = 4\ndecoder_initial_channels = 64\nnum_codebooks = 2\n\
                    levels = 8,7,6,6\nencoder_causal = true\ndecoder_causal = true\n";
        let c = CodecConfig::from_text(text).unwrap();
        assert_eq!(c.residual_dilations, vec![1, 3, 5]);
        assert_eq!(c.residual_kernel_size, 3);
        assert!(c.check().is_ok());
    }

    #[test]
    fn text_parse_errors() {
        let base = builtin("12.5fps-1.1kbps").unwrap().to_text();
        assert!(CodecConfig::from_text(&format!("{base}bogus = 1\n")).is_err());
        assert!(CodecConfig::from_text(&format!("{base}name = again\n")).is_err());
        assert!(CodecConfig::from_text(&base.replace("encoder_causal = false", "encoder_causal = maybe")).is_err());
        assert!(CodecConfig::from_text(&base.replace("num_codebooks = 8\n", "")).is_err());
    }

    #[test]
    fn fingerprint_ignores_name_only() {
        let a = builtin("12.5fps-1.1kbps").unwrap();
        let mut b = a.clone();
        b.name = "renamed".into();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.decoder_causal = !b.decoder_causal;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
