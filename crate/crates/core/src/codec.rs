//! Encoder, quantizer, bitstream and decoder bundled for one config.

use std::sync::Arc;

use crate::bitstream::{read_stream, write_stream, BitstreamHeader};
use crate::config::CodecConfig;
use crate::error::{Error, Result};
use crate::fsq::{self, TokenFrame};
use crate::generator::{build_decoder, build_encoder, decode_latents, encode_audio, Network};
use crate::streaming::{dequantize_frames, StreamDecoder, StreamEncoder};
use crate::weights::WeightMap;

pub struct Codec {
    pub config: CodecConfig,
    pub encoder: Arc<Network>,
    pub decoder: Arc<Network>,
}

impl Codec {
    pub fn new(config: CodecConfig, weights: &WeightMap) -> Result<Self> {
        config.check()?;
        let encoder = Arc::new(Network::new(build_encoder(&config)?, weights)?);
        let decoder = Arc::new(Network::new(build_decoder(&config)?, weights)?);
        Ok(Self { config, encoder, decoder })
    }

    pub fn hop_samples(&self) -> usize {
        self.config.hop_samples() as usize
    }

    /// Offline encode; the tail is zero-padded to a whole hop.
    pub fn encode_tokens(&self, audio: &[f32]) -> Result<Vec<TokenFrame>> {
        if let Some(bad) = audio.iter().find(|v| !v.is_finite()) {
            return Err(Error::Audio(format!("non-finite input sample {bad}")));
        }
        let latents = encode_audio(&self.encoder, audio)?;
        (0..latents.num_frames()).map(|t| fsq::quantize(&latents.frame(t), &self.config.fsq)).collect()
    }

    /// Offline decode to `frames.len() * hop` samples.
    pub fn decode_tokens(&self, frames: &[TokenFrame]) -> Result<Vec<f32>> {
        decode_latents(&self.decoder, &dequantize_frames(frames, &self.config.fsq)?)
    }

    /// Audio to a complete bitstream.
    pub fn encode(&self, audio: &[f32]) -> Result<Vec<u8>> {
        let frames = self.encode_tokens(audio)?;
        let header = BitstreamHeader::for_config(&self.config, audio.len() as u64)?;
        write_stream(&header, &frames)
    }

    /// Bitstream to audio trimmed to the original length.
    pub fn decode(&self, bytes: &[u8]) -> Result<Vec<f32>> {
        let (header, frames) = read_stream(bytes)?;
        header.check_matches(&self.config)?;
        let mut audio = self.decode_tokens(&frames)?;
        audio.truncate(header.original_sample_count as usize);
        Ok(audio)
    }

    pub fn stream_encoder(&self) -> Result<StreamEncoder> {
        StreamEncoder::new(Arc::clone(&self.encoder), self.config.fsq.clone())
    }

    pub fn stream_decoder(&self) -> Result<StreamDecoder> {
        StreamDecoder::new(Arc::clone(&self.decoder), self.config.fsq.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::builtin;
    use crate::weights::random_init_codec;

    fn toy() -> CodecConfig {
        let mut c = builtin("12.5fps-1.1kbps-causal").unwrap();
        c.name = "toy".into();
        c.encoder_strides = vec![2, 2, 2, 2, 2];
        c.encoder_initial_channels = 2;
        c.decoder_initial_channels = 64;
        c.fsq.num_codebooks = 2;
        c
    }

    #[test]
    fn bitstream_round_trip_trims_to_length() {
        let c = toy();
        let codec = Codec::new(c.clone(), &random_init_codec(&c, 3).unwrap()).unwrap();
        let audio: Vec<f32> = (0..100).map(|i| (i as f32 * 0.05).sin() * 0.5).collect();
        let bytes = codec.encode(&audio).unwrap();
        let out = codec.decode(&bytes).unwrap();
        assert_eq!(out.len(), 100);
        let full = codec.decode_tokens(&codec.encode_tokens(&audio).unwrap()).unwrap();
        assert_eq!(full.len(), 128);
        assert_eq!(&full[..100], &out[..]);
    }

    #[test]
    fn foreign_bitstream_is_rejected() {
        let c = toy();
        let codec = Codec::new(c.clone(), &random_init_codec(&c, 3).unwrap()).unwrap();
        let mut other = c.clone();
        other.fsq.num_codebooks = 3;
        let foreign = Codec::new(other.clone(), &random_init_codec(&other, 3).unwrap()).unwrap();
        let bytes = foreign.encode(&[0.1; 64]).unwrap();
        assert!(matches!(codec.decode(&bytes), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_audio_is_rejected() {
        let c = toy();
        let codec = Codec::new(c.clone(), &random_init_codec(&c, 3).unwrap()).unwrap();
        assert!(matches!(codec.encode(&[0.0, f32::NAN]), Err(Error::Audio(_))));
    }
}
