//! Chunked encode and decode sessions over causal graphs, and latency
//! measurement.
//!
//! A session owns its layer histories and shares the network through an
//! `Arc`, so sessions can move between threads and many can run over one
//! set of weights.

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::config::{ratio_f64, FsqSpec};
use crate::dsp::FeatureMap;
use crate::error::{Error, Result};
use crate::fsq::{self, TokenFrame};
use crate::generator::{decode_latents, Direction, LatentFrames, Network, NetworkState};

/// Counters and buffers carried between calls.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamState {
    pub layers: NetworkState,
    pub frames_emitted: u64,
    pub samples_emitted: u64,
    /// Input samples short of a full hop (encoder side only).
    pub pending_input: Vec<f32>,
}

impl StreamState {
    fn new(network: &Network) -> Self {
        Self {
            layers: network.new_state(),
            frames_emitted: 0,
            samples_emitted: 0,
            pending_input: Vec::new(),
        }
    }
}

fn require_causal(network: &Network, direction: Direction) -> Result<()> {
    let graph = network.graph();
    if graph.direction != direction {
        return Err(Error::Contract(format!("expected a {} network", direction.prefix())));
    }
    if !graph.is_causal() {
        let la = graph.lookahead();
        return Err(Error::Contract(format!(
            "streaming needs a causal {}; this one needs {:.2} frames ({} samples) of lookahead",
            if direction == Direction::Encoder { "encoder" } else { "decoder" },
            la.frames_f64(),
            la.samples
        )));
    }
    Ok(())
}

/// Streaming encoder: audio in, one token frame per completed hop out.
pub struct StreamEncoder {
    network: Arc<Network>,
    spec: FsqSpec,
    hop: usize,
    state: StreamState,
}

impl StreamEncoder {
    pub fn new(network: Arc<Network>, spec: FsqSpec) -> Result<Self> {
        require_causal(&network, Direction::Encoder)?;
        if network.graph().latent_dim != spec.latent_dim() {
            return Err(Error::shape("latent dimension", spec.latent_dim(), network.graph().latent_dim));
        }
        let hop = network.graph().hop_samples as usize;
        let state = StreamState::new(&network);
        Ok(Self { network, spec, hop, state })
    }

    pub fn state(&self) -> &StreamState {
        &self.state
    }

    pub fn hop_samples(&self) -> usize {
        self.hop
    }

    /// Buffers `samples` and encodes every completed hop.
    pub fn push_samples(&mut self, samples: &[f32]) -> Result<Vec<TokenFrame>> {
        if let Some(bad) = samples.iter().find(|v| !v.is_finite()) {
            return Err(Error::Audio(format!("non-finite input sample {bad}")));
        }
        let pending = &mut self.state.pending_input;
        let whole = (pending.len() + samples.len()) / self.hop * self.hop;
        if whole == 0 {
            pending.extend_from_slice(samples);
            return Ok(Vec::new());
        }
        let mut block = std::mem::take(pending);
        let take = whole - block.len();
        block.extend_from_slice(&samples[..take]);
        let frames = self.run(&block)?;
        self.state.pending_input = samples[take..].to_vec();
        Ok(frames)
    }

    /// Zero-pads any pending samples to a full hop and encodes them.
    pub fn finish(&mut self) -> Result<Vec<TokenFrame>> {
        if self.state.pending_input.is_empty() {
            return Ok(Vec::new());
        }
        let mut block = std::mem::take(&mut self.state.pending_input);
        block.resize(self.hop, 0.0);
        self.run(&block)
    }

    pub fn reset(&mut self) {
        self.state = StreamState::new(&self.network);
    }

    fn run(&mut self, block: &[f32]) -> Result<Vec<TokenFrame>> {
        let latents = LatentFrames {
            values: self.network.step(&mut self.state.layers, FeatureMap::from_mono(block))?,
        };
        let frames = (0..latents.num_frames())
            .map(|t| fsq::quantize(&latents.frame(t), &self.spec))
            .collect::<Result<Vec<_>>>()?;
        self.state.frames_emitted += frames.len() as u64;
        self.state.samples_emitted += block.len() as u64;
        Ok(frames)
    }
}

/// Streaming decoder: exactly one hop of audio per token frame.
pub struct StreamDecoder {
    network: Arc<Network>,
    spec: FsqSpec,
    hop: usize,
    state: StreamState,
}

impl StreamDecoder {
    pub fn new(network: Arc<Network>, spec: FsqSpec) -> Result<Self> {
        require_causal(&network, Direction::Decoder)?;
        if network.graph().latent_dim != spec.latent_dim() {
            return Err(Error::shape("latent dimension", spec.latent_dim(), network.graph().latent_dim));
        }
        let hop = network.graph().hop_samples as usize;
        let state = StreamState::new(&network);
        Ok(Self { network, spec, hop, state })
    }

    pub fn state(&self) -> &StreamState {
        &self.state
    }

    pub fn push_frame(&mut self, frame: &TokenFrame) -> Result<Vec<f32>> {
        self.push_frames(std::slice::from_ref(frame))
    }

    /// Decodes several frames in one step; same samples as pushing them
    /// one at a time.
    pub fn push_frames(&mut self, frames: &[TokenFrame]) -> Result<Vec<f32>> {
        if frames.is_empty() {
            return Ok(Vec::new());
        }
        let latents = dequantize_frames(frames, &self.spec)?;
        let out = self.network.step(&mut self.state.layers, latents.values)?;
        assert_eq!(out.len(), frames.len() * self.hop);
        self.state.frames_emitted += frames.len() as u64;
        self.state.samples_emitted += out.len() as u64;
        Ok(out.into_data())
    }

    pub fn reset(&mut self) {
        self.state = StreamState::new(&self.network);
    }
}

/// Dequantized latents for a run of frames.
pub fn dequantize_frames(frames: &[TokenFrame], spec: &FsqSpec) -> Result<LatentFrames> {
    let vectors = frames.iter().map(|f| fsq::dequantize(f, spec)).collect::<Result<Vec<_>>>()?;
    LatentFrames::from_frames(spec.latent_dim(), &vectors)
}

/// When tokens reach the decoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TokenArrival {
    /// Everything is available at once.
    Instant,
    /// Frames arrive at the codec's own frame rate.
    RealTime,
    /// Frames arrive at the given rate.
    FramesPerSec(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyReport {
    /// `ttfa_compute_ms + ttfa_buffering_ms`.
    pub ttfa_ms: f64,
    /// Median wall time from having the needed frames to the first sample.
    pub ttfa_compute_ms: f64,
    /// Time spent waiting for lookahead frames to arrive.
    pub ttfa_buffering_ms: f64,
    /// Median processing time over emitted audio duration.
    pub rtf: f64,
    pub frames_buffered_before_first_output: u64,
    pub runs: usize,
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    v[v.len() / 2]
}

/// Times decoding `frames` under `arrival`. Causal decoders stream frame
/// by frame; noncausal ones must first buffer their lookahead and decode
/// offline. Runs at least five times and reports medians.
pub fn measure_latency(
    decoder: &Arc<Network>,
    spec: &FsqSpec,
    frames: &[TokenFrame],
    arrival: TokenArrival,
    runs: usize,
) -> Result<LatencyReport> {
    let graph = decoder.graph();
    if graph.direction != Direction::Decoder {
        return Err(Error::Contract("measure_latency needs a decoder network".into()));
    }
    if frames.is_empty() {
        return Err(Error::Parameter("measure_latency needs at least one frame".into()));
    }
    let runs = runs.max(5);
    let fps = graph.sample_rate_hz as f64 / graph.hop_samples as f64;
    let arrival_fps = match arrival {
        TokenArrival::Instant => f64::INFINITY,
        TokenArrival::RealTime => fps,
        TokenArrival::FramesPerSec(r) if r > 0.0 => r,
        TokenArrival::FramesPerSec(r) => return Err(Error::Parameter(format!("arrival rate {r} must be positive"))),
    };
    let audio_secs = frames.len() as f64 / fps;
    let causal = graph.is_causal();
    let lookahead = graph.lookahead();
    let needed = if causal { 1 } else { 1 + lookahead.frames.ceil().to_integer() };
    let mut first = Vec::with_capacity(runs);
    let mut total = Vec::with_capacity(runs);
    for _ in 0..runs {
        if causal {
            let mut session = StreamDecoder::new(Arc::clone(decoder), spec.clone())?;
            let start = Instant::now();
            session.push_frame(&frames[0])?;
            first.push(start.elapsed());
            for f in &frames[1..] {
                session.push_frame(f)?;
            }
            total.push(start.elapsed());
        } else {
            let head = &frames[..(needed as usize).min(frames.len())];
            let start = Instant::now();
            decode_latents(decoder, &dequantize_frames(head, spec)?)?;
            first.push(start.elapsed());
            let start = Instant::now();
            decode_latents(decoder, &dequantize_frames(frames, spec)?)?;
            total.push(start.elapsed());
        }
    }
    let compute_ms = median(first).as_secs_f64() * 1e3;
    let buffering_ms = if causal { 0.0 } else { ratio_f64(lookahead.frames) / arrival_fps * 1e3 };
    Ok(LatencyReport {
        ttfa_ms: compute_ms + buffering_ms,
        ttfa_compute_ms: compute_ms,
        ttfa_buffering_ms: buffering_ms,
        rtf: median(total).as_secs_f64() / audio_secs,
        frames_buffered_before_first_output: needed,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{builtin, CodecConfig};
    use crate::generator::{build_decoder, build_encoder, encode_audio};
    use crate::weights::random_init_codec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(causal: bool) -> CodecConfig {
        let mut c = builtin("12.5fps-1.1kbps-causal").unwrap();
        c.name = "toy".into();
        c.encoder_strides = vec![2, 2, 2, 2, 2];
        c.encoder_initial_channels = 2;
        c.decoder_initial_channels = 64;
        c.fsq.num_codebooks = 2;
        c.encoder_causal = causal;
        c.decoder_causal = causal;
        c
    }

    fn networks(c: &CodecConfig) -> (Arc<Network>, Arc<Network>) {
        let w = random_init_codec(c, 9).unwrap();
        (
            Arc::new(Network::new(build_encoder(c).unwrap(), &w).unwrap()),
            Arc::new(Network::new(build_decoder(c).unwrap(), &w).unwrap()),
        )
    }

    fn offline_tokens(enc: &Network, spec: &FsqSpec, audio: &[f32]) -> Vec<TokenFrame> {
        let lat = encode_audio(enc, audio).unwrap();
        (0..lat.num_frames()).map(|t| fsq::quantize(&lat.frame(t), spec).unwrap()).collect()
    }

    #[test]
    fn hop_boundary() {
        let c = toy(true);
        let (enc, _) = networks(&c);
        let mut s = StreamEncoder::new(enc, c.fsq.clone()).unwrap();
        assert!(s.push_samples(&[0.1; 31]).unwrap().is_empty());
        assert_eq!(s.state().pending_input.len(), 31);
        assert_eq!(s.push_samples(&[0.1]).unwrap().len(), 1);
        assert!(s.state().pending_input.is_empty());
        let before = s.state().clone();
        assert!(s.push_samples(&[]).unwrap().is_empty());
        assert_eq!(s.state(), &before);
    }

    #[test]
    fn chunked_encode_matches_offline() {
        let c = toy(true);
        let (enc, _) = networks(&c);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let audio: Vec<f32> = (0..32 * 9 + 5).map(|_| rng.gen_range(-0.9..0.9)).collect();
        let want = offline_tokens(&enc, &c.fsq, &audio);
        for _ in 0..20 {
            let mut s = StreamEncoder::new(Arc::clone(&enc), c.fsq.clone()).unwrap();
            let mut got = Vec::new();
            let mut pos = 0;
            while pos < audio.len() {
                let n = rng.gen_range(0..70).min(audio.len() - pos);
                got.extend(s.push_samples(&audio[pos..pos + n]).unwrap());
                assert!(s.state().pending_input.len() < 32);
                pos += n;
            }
            got.extend(s.finish().unwrap());
            assert_eq!(got, want);
        }
    }

    #[test]
    fn frame_by_frame_decode_matches_offline() {
        let c = toy(true);
        let (_, dec) = networks(&c);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let codes = c.fsq.codes_per_codebook() as u32;
        let frames: Vec<TokenFrame> =
            (0..25).map(|_| TokenFrame::new((0..2).map(|_| rng.gen_range(0..codes)).collect())).collect();
        let want = decode_latents(&dec, &dequantize_frames(&frames, &c.fsq).unwrap()).unwrap();
        let mut s = StreamDecoder::new(Arc::clone(&dec), c.fsq.clone()).unwrap();
        let mut got = Vec::new();
        for f in &frames {
            let chunk = s.push_frame(f).unwrap();
            assert_eq!(chunk.len(), 32);
            got.extend(chunk);
        }
        assert_eq!(got, want);
        assert_eq!(s.state().samples_emitted, s.state().frames_emitted * 32);

        // Without a reset the stale history changes the output.
        let again = s.push_frames(&frames).unwrap();
        assert_ne!(again, want);
        s.reset();
        assert_eq!(s.push_frames(&frames).unwrap(), want);
    }

    #[test]
    fn noncausal_graphs_are_refused() {
        let c = toy(false);
        let (enc, dec) = networks(&c);
        let e = StreamEncoder::new(enc, c.fsq.clone()).err().unwrap();
        assert!(matches!(&e, Error::Contract(m) if m.contains("lookahead")));
        assert!(matches!(StreamDecoder::new(dec, c.fsq.clone()), Err(Error::Contract(_))));
    }

    #[test]
    fn latency_reports() {
        let frames: Vec<TokenFrame> = (0..8).map(|_| TokenFrame::new(vec![5, 9])).collect();
        let c = toy(true);
        let (_, dec) = networks(&c);
        let r = measure_latency(&dec, &c.fsq, &frames, TokenArrival::Instant, 5).unwrap();
        assert_eq!(r.frames_buffered_before_first_output, 1);
        assert_eq!(r.ttfa_buffering_ms, 0.0);
        assert!(r.rtf > 0.0 && r.runs == 5);

        let c = toy(false);
        let (_, dec) = networks(&c);
        let la = dec.graph().lookahead();
        let r = measure_latency(&dec, &c.fsq, &frames, TokenArrival::RealTime, 5).unwrap();
        assert_eq!(r.frames_buffered_before_first_output, 1 + la.frames.ceil().to_integer());
        assert!((r.ttfa_buffering_ms - la.ms).abs() < 1e-9);
        let fast = measure_latency(&dec, &c.fsq, &frames, TokenArrival::FramesPerSec(2.0 * 22050.0 / 32.0), 5).unwrap();
        assert!((fast.ttfa_buffering_ms * 2.0 - r.ttfa_buffering_ms).abs() < 1e-9);
    }
}
