//! Mono WAV input and output.

use std::io::{Read, Seek, Write};

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

/// How to treat input that is not mono at the codec rate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ReadOptions {
    /// Average all channels instead of refusing multichannel input.
    pub downmix: bool,
    /// Linearly resample to the target rate instead of refusing.
    pub resample: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Audio {
    pub sample_rate_hz: u32,
    pub samples: Vec<f32>,
}

fn audio_err(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(e) => Error::Io(e),
        hound::Error::Unsupported => {
            Error::Audio("unsupported WAV encoding; convert to mono 16-bit PCM or 32-bit float".into())
        }
        other => Error::Audio(other.to_string()),
    }
}

/// Reads mono PCM16 or float32 audio, resampled to `target_rate_hz`.
pub fn read_wav<R: Read>(reader: R, target_rate_hz: u32, opts: ReadOptions) -> Result<Audio> {
    let wav = WavReader::new(reader).map_err(audio_err)?;
    let spec = wav.spec();
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => wav
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(audio_err)?,
        (SampleFormat::Float, 32) => {
            wav.into_samples::<f32>().collect::<std::result::Result<_, _>>().map_err(audio_err)?
        }
        (fmt, bits) => {
            return Err(Error::Audio(format!(
                "{bits}-bit {} WAV is not supported; convert to 16-bit PCM or 32-bit float (e.g. `sox in.wav -b 16 out.wav`)",
                if fmt == SampleFormat::Int { "integer" } else { "float" }
            )))
        }
    };
    let channels = spec.channels as usize;
    let samples = if channels == 1 {
        interleaved
    } else if opts.downmix {
        interleaved.chunks_exact(channels).map(|f| f.iter().sum::<f32>() / channels as f32).collect()
    } else {
        return Err(Error::Audio(format!("input has {channels} channels; pass --downmix to average them to mono")));
    };
    if let Some(bad) = samples.iter().find(|v| !v.is_finite()) {
        return Err(Error::Audio(format!("non-finite sample {bad} in WAV")));
    }
    let samples = if spec.sample_rate == target_rate_hz {
        samples
    } else if opts.resample {
        resample_linear(&samples, spec.sample_rate, target_rate_hz)
    } else {
        return Err(Error::Audio(format!(
            "input is {} Hz but the codec runs at {target_rate_hz} Hz; pass --resample to convert",
            spec.sample_rate
        )));
    };
    Ok(Audio { sample_rate_hz: target_rate_hz, samples })
}

/// Linear interpolation resampler. Output length is
/// `round(len * to / from)`.
pub fn resample_linear(samples: &[f32], from_hz: u32, to_hz: u32) -> Vec<f32> {
    if samples.is_empty() || from_hz == to_hz {
        return samples.to_vec();
    }
    let n_out = ((samples.len() as u64 * to_hz as u64 + from_hz as u64 / 2) / from_hz as u64) as usize;
    let last = samples.len() - 1;
    (0..n_out)
        .map(|j| {
            let pos = j as f64 * from_hz as f64 / to_hz as f64;
            let i = (pos.floor() as usize).min(last);
            let frac = (pos - i as f64) as f32;
            let next = samples[(i + 1).min(last)];
            samples[i] + (next - samples[i]) * frac
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

/// Writes mono audio. PCM16 output is clipped to [-1, 1).
pub fn write_wav<W: Write + Seek>(writer: W, audio: &Audio, format: WavFormat) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate_hz,
        bits_per_sample: if format == WavFormat::Pcm16 { 16 } else { 32 },
        sample_format: if format == WavFormat::Pcm16 { SampleFormat::Int } else { SampleFormat::Float },
    };
    let mut w = WavWriter::new(writer, spec).map_err(audio_err)?;
    for &s in &audio.samples {
        match format {
            WavFormat::Pcm16 => w.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16),
            WavFormat::Float32 => w.write_sample(s),
        }
        .map_err(audio_err)?;
    }
    w.finalize().map_err(audio_err)
}

pub fn wav_bytes(audio: &Audio, format: WavFormat) -> Result<Vec<u8>> {
    let mut cur = std::io::Cursor::new(Vec::new());
    write_wav(&mut cur, audio, format)?;
    Ok(cur.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn raw(channels: u16, rate: u32, bits: u16, fmt: SampleFormat, n: usize) -> Vec<u8> {
        let spec = WavSpec { channels, sample_rate: rate, bits_per_sample: bits, sample_format: fmt };
        let mut cur = Cursor::new(Vec::new());
        let mut w = WavWriter::new(&mut cur, spec).unwrap();
        for i in 0..n * channels as usize {
            match (fmt, bits) {
                (SampleFormat::Float, _) => w.write_sample(i as f32 / 100.0).unwrap(),
                (_, 16) => w.write_sample(i as i16).unwrap(),
                _ => w.write_sample(i as i32).unwrap(),
            }
        }
        w.finalize().unwrap();
        cur.into_inner()
    }

    #[test]
    fn pcm16_round_trip_is_exact() {
        let audio = Audio { sample_rate_hz: 22050, samples: (0..500).map(|i| (i as f32 - 250.0) / 256.0).collect() };
        let bytes = wav_bytes(&audio, WavFormat::Pcm16).unwrap();
        assert_eq!(read_wav(Cursor::new(bytes), 22050, ReadOptions::default()).unwrap(), audio);
        let bytes = wav_bytes(&audio, WavFormat::Float32).unwrap();
        assert_eq!(read_wav(Cursor::new(bytes), 22050, ReadOptions::default()).unwrap(), audio);
    }

    #[test]
    fn stereo_needs_downmix() {
        let bytes = raw(2, 22050, 32, SampleFormat::Float, 10);
        let e = read_wav(Cursor::new(bytes.clone()), 22050, ReadOptions::default()).unwrap_err();
        assert!(e.to_string().contains("--downmix"));
        let a = read_wav(Cursor::new(bytes), 22050, ReadOptions { downmix: true, resample: false }).unwrap();
        assert_eq!(a.samples.len(), 10);
        assert!((a.samples[1] - 0.025).abs() < 1e-7);
    }

    #[test]
    fn rate_mismatch_needs_resample() {
        let bytes = raw(1, 44100, 16, SampleFormat::Int, 1000);
        let e = read_wav(Cursor::new(bytes.clone()), 22050, ReadOptions::default()).unwrap_err();
        assert!(e.to_string().contains("--resample"));
        let a = read_wav(Cursor::new(bytes), 22050, ReadOptions { downmix: false, resample: true }).unwrap();
        assert_eq!(a.samples.len(), 500);
        assert_eq!(a.samples[3], 6.0 / 32768.0);
    }

    #[test]
    fn other_encodings_are_refused() {
        let bytes = raw(1, 22050, 24, SampleFormat::Int, 10);
        let e = read_wav(Cursor::new(bytes), 22050, ReadOptions::default()).unwrap_err();
        assert!(e.to_string().contains("16-bit PCM"));
        assert!(read_wav(Cursor::new(b"RIFFjunk".to_vec()), 22050, ReadOptions::default()).is_err());
    }

    #[test]
    fn linear_resampler() {
        assert_eq!(resample_linear(&[0.0, 1.0, 2.0], 1, 2), vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.0]);
        assert_eq!(resample_linear(&[0.0, 1.0, 2.0, 3.0], 2, 1), vec![0.0, 2.0]);
        assert!(resample_linear(&[], 3, 2).is_empty());
    }

    #[test]
    fn pcm16_clips() {
        let audio = Audio { sample_rate_hz: 8000, samples: vec![2.0, -2.0] };
        let a = read_wav(Cursor::new(wav_bytes(&audio, WavFormat::Pcm16).unwrap()), 8000, ReadOptions::default()).unwrap();
        assert_eq!(a.samples, vec![32767.0 / 32768.0, -1.0]);
    }
}
