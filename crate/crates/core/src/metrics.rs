//! Training losses and reference-free reconstruction metrics.

use std::str::FromStr;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum EmbeddingSource {
    GroundTruth,
    Generated,
}

/// Speaker embedding produced by an external speaker encoder.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub source: EmbeddingSource,
}

impl Embedding {
    pub fn new(values: Vec<f64>, source: EmbeddingSource) -> Self {
        Self { values, source }
    }

    fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Parses one embedding per line of whitespace-separated floats. Blank
/// lines and `#` comments are skipped.
pub fn parse_embeddings(text: &str, source: EmbeddingSource) -> Result<Vec<Embedding>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let values = line
            .split_whitespace()
            .map(f64::from_str)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("embedding line {}: {e}", n + 1)))?;
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Format(format!("embedding line {}: non-finite value {bad}", n + 1)));
        }
        out.push(Embedding::new(values, source));
    }
    Ok(out)
}

pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.values.len() != b.values.len() {
        return Err(Error::shape("embedding length", a.values.len(), b.values.len()));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Parameter("cosine similarity of a zero-norm embedding".into()));
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Speaker consistency loss: `-(alpha / n) * sum cos(g_i, h_i)`.
pub fn scl(gt: &[Embedding], generated: &[Embedding], alpha: f64) -> Result<f64> {
    if gt.len() != generated.len() {
        return Err(Error::shape("embedding list", gt.len(), generated.len()));
    }
    if gt.is_empty() {
        return Err(Error::Parameter("scl needs at least one embedding pair".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Parameter(format!("alpha must be positive, got {alpha}")));
    }
    let mut sum = 0.0;
    for (g, h) in gt.iter().zip(generated) {
        sum += cosine_similarity(g, h)?;
    }
    Ok(-alpha * sum / gt.len() as f64)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Least-squares GAN losses, returned as `(discriminator, generator)`.
pub fn squared_gan_losses(real_scores: &[f64], fake_scores: &[f64]) -> Result<(f64, f64)> {
    if real_scores.is_empty() || fake_scores.is_empty() {
        return Err(Error::Parameter("squared GAN loss needs nonempty score lists".into()));
    }
    let d = mean(real_scores.iter().map(|r| (r - 1.0).powi(2))) + mean(fake_scores.iter().map(|f| f * f));
    let g = mean(fake_scores.iter().map(|f| (f - 1.0).powi(2)));
    Ok((d, g))
}

/// Mean over layers of the mean absolute difference.
pub fn feature_matching(real: &[Vec<f64>], fake: &[Vec<f64>]) -> Result<f64> {
    if real.len() != fake.len() {
        return Err(Error::shape("feature layer count", real.len(), fake.len()));
    }
    if real.is_empty() {
        return Err(Error::Parameter("feature matching needs at least one layer".into()));
    }
    let mut total = 0.0;
    for (i, (r, f)) in real.iter().zip(fake).enumerate() {
        if r.len() != f.len() {
            return Err(Error::shape(format!("feature layer {i}"), r.len(), f.len()));
        }
        if r.is_empty() {
            return Err(Error::Parameter(format!("feature layer {i} is empty")));
        }
        total += mean(r.iter().zip(f).map(|(a, b)| (a - b).abs()));
    }
    Ok(total / real.len() as f64)
}

/// Log-mel analysis settings.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MelSpec {
    pub sample_rate_hz: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub win: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for MelSpec {
    fn default() -> Self {
        Self {
            sample_rate_hz: 22050,
            n_fft: 1024,
            hop: 256,
            win: 1024,
            n_mels: 80,
            fmin: 0.0,
            fmax: 11025.0,
            log_floor: 1e-5,
        }
    }
}

impl MelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.n_mels == 0 || self.n_fft < 2 || self.hop == 0 {
            return bad(format!("n_mels, hop must be >= 1 and n_fft >= 2 (got {self:?})"));
        }
        if self.win == 0 || self.win > self.n_fft {
            return bad(format!("window length {} must be in 1..={}", self.win, self.n_fft));
        }
        if !(0.0 <= self.fmin && self.fmin < self.fmax && self.fmax <= self.sample_rate_hz as f64 / 2.0) {
            return bad(format!("need 0 <= fmin < fmax <= {}", self.sample_rate_hz as f64 / 2.0));
        }
        if !(self.log_floor > 0.0) {
            return bad(format!("log floor must be positive, got {}", self.log_floor));
        }
        Ok(())
    }

    /// Frames for `len` samples: the signal is zero-padded on the right so
    /// every sample falls in at least one frame.
    pub fn num_frames(&self, len: usize) -> usize {
        1 + len.saturating_sub(self.n_fft).div_ceil(self.hop)
    }

    /// Periodic Hann window of length `win`, centered in `n_fft`.
    pub fn window(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.n_fft];
        let off = (self.n_fft - self.win) / 2;
        for i in 0..self.win {
            let s = (std::f64::consts::PI * i as f64 / self.win as f64).sin();
            w[off + i] = s * s;
        }
        w
    }

    /// Slaney triangular filters with area normalization, `n_mels` rows of
    /// `n_fft / 2 + 1` weights.
    pub fn filterbank(&self) -> Vec<Vec<f64>> {
        let bins = self.n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(self.fmin), hz_to_mel(self.fmax));
        let edges: Vec<f64> = (0..self.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (self.n_mels + 1) as f64))
            .collect();
        let bin_hz = self.sample_rate_hz as f64 / self.n_fft as f64;
        (0..self.n_mels)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                let norm = 2.0 / (r - l);
                (0..bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        let up = (f - l) / (c - l);
                        let down = (r - f) / (r - c);
                        up.min(down).max(0.0) * norm
                    })
                    .collect()
            })
            .collect()
    }

    /// Log-mel matrix, `frames` rows of `n_mels` values.
    pub fn log_mel(&self, audio: &[f32]) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        if audio.is_empty() {
            return Err(Error::Audio("mel spectrogram of empty audio".into()));
        }
        Ok(self.log_mel_padded(audio, audio.len()))
    }

    fn log_mel_padded(&self, audio: &[f32], len: usize) -> Vec<Vec<f64>> {
        let frames = self.num_frames(len);
        let window = self.window();
        let filters = self.filterbank();
        let fft = FftPlanner::<f64>::new().plan_fft_forward(self.n_fft);
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut power = vec![0.0; self.n_fft / 2 + 1];
        (0..frames)
            .map(|t| {
                let start = t * self.hop;
                for (i, b) in buf.iter_mut().enumerate() {
                    let x = audio.get(start + i).copied().unwrap_or(0.0) as f64;
                    *b = Complex::new(x * window[i], 0.0);
                }
                fft.process(&mut buf);
                for (p, b) in power.iter_mut().zip(&buf) {
                    *p = b.norm_sqr();
                }
                filters
                    .iter()
                    .map(|f| f.iter().zip(&power).map(|(w, p)| w * p).sum::<f64>().max(self.log_floor).ln())
                    .collect()
            })
            .collect()
    }
}

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    const STEP: f64 = 200.0 / 3.0;
    let log_step = 6.4f64.ln() / 27.0;
    if hz < 1000.0 {
        hz / STEP
    } else {
        1000.0 / STEP + (hz / 1000.0).ln() / log_step
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    const STEP: f64 = 200.0 / 3.0;
    let log_step = 6.4f64.ln() / 27.0;
    let knee = 1000.0 / STEP;
    if mel < knee {
        mel * STEP
    } else {
        1000.0 * ((mel - knee) * log_step).exp()
    }
}

/// Mean absolute difference of log-mel matrices. The shorter input is
/// zero-padded to the longer length.
pub fn mel_distance(a: &[f32], b: &[f32], spec: &MelSpec) -> Result<f64> {
    spec.validate()?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::Audio("mel distance of empty audio".into()));
    }
    let len = a.len().max(b.len());
    let ma = spec.log_mel_padded(a, len);
    let mb = spec.log_mel_padded(b, len);
    let n = (ma.len() * spec.n_mels) as f64;
    let sum: f64 = ma.iter().zip(&mb).flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs())).sum();
    Ok(sum / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec(), EmbeddingSource::Generated)
    }

    #[test]
    fn scl_identities() {
        let g = vec![emb(&[1.0, 2.0]), emb(&[-3.0, 0.5])];
        assert!((scl(&g, &g, 0.1).unwrap() + 0.1).abs() < 1e-15);
        let neg: Vec<_> = g.iter().map(|e| emb(&e.values.iter().map(|v| -v).collect::<Vec<_>>())).collect();
        assert!((scl(&g, &neg, 0.1).unwrap() - 0.1).abs() < 1e-15);
        let orth = vec![emb(&[-2.0, 1.0]), emb(&[0.5, 3.0])];
        assert!(scl(&g, &orth, 0.1).unwrap().abs() < 1e-15);
        assert!(scl(&g, &g[..1], 0.1).is_err());
        assert!(scl(&[emb(&[0.0, 0.0])], &[emb(&[1.0, 0.0])], 0.1).is_err());
        assert!(scl(&g, &g, 0.0).is_err());
    }

    #[test]
    fn cosine_cases() {
        let v = emb(&[0.3, -1.2, 2.0]);
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&emb(&[1.0, 0.0]), &emb(&[0.0, 1.0])).unwrap(), 0.0);
        let n = emb(&[-0.3, 1.2, -2.0]);
        assert!((cosine_similarity(&v, &n).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn gan_losses() {
        assert_eq!(squared_gan_losses(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), (0.0, 1.0));
        assert_eq!(squared_gan_losses(&[0.3], &[1.0]).unwrap().1, 0.0);
        assert_eq!(squared_gan_losses(&[0.5; 3], &[0.5; 4]).unwrap(), (0.5, 0.25));
        assert!(squared_gan_losses(&[], &[1.0]).is_err());
    }

    #[test]
    fn feature_matching_cases() {
        let real = vec![vec![0.0, 2.0]];
        assert_eq!(feature_matching(&real, &[vec![1.0, 1.0]]).unwrap(), 1.0);
        let layers = vec![vec![0.5, -1.0, 3.0], vec![2.0]];
        assert_eq!(feature_matching(&layers, &layers).unwrap(), 0.0);
        let shifted: Vec<Vec<f64>> = layers.iter().map(|l| l.iter().map(|v| v + 1.0).collect()).collect();
        assert_eq!(feature_matching(&layers, &shifted).unwrap(), 1.0);
        assert!(feature_matching(&layers, &layers[..1]).is_err());
        assert!(feature_matching(&[vec![1.0]], &[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn embedding_file() {
        let e = parse_embeddings("1 2 3\n\n# c\n-0.5 1e-3 4 # tail\n", EmbeddingSource::GroundTruth).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e[1].values, vec![-0.5, 1e-3, 4.0]);
        assert!(parse_embeddings("1 x", EmbeddingSource::GroundTruth).is_err());
        assert!(parse_embeddings("1 nan", EmbeddingSource::GroundTruth).is_err());
    }

    #[test]
    fn mel_scale_round_trip() {
        for hz in [0.0, 440.0, 999.0, 1000.0, 4000.0, 11025.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        assert!((hz_to_mel(1000.0) - 15.0).abs() < 1e-12);
    }

    #[test]
    fn filters_have_unit_scaled_area() {
        // Area of each triangle in Hz, times 2/(r-l), is 1.
        let spec = MelSpec { n_fft: 8192, ..MelSpec::default() };
        let bin_hz = 22050.0 / 8192.0;
        for row in spec.filterbank().iter().skip(5) {
            let area: f64 = row.iter().sum::<f64>() * bin_hz;
            assert!((area - 1.0).abs() < 0.02, "{area}");
        }
    }

    #[test]
    fn tone_against_silence() {
        let spec = MelSpec::default();
        let tone: Vec<f32> = (0..22050).map(|i| (2.0 * std::f32::consts::PI * 440.0 * i as f32 / 22050.0).sin()).collect();
        let silence = vec![0.0; 22050];
        let d = mel_distance(&tone, &silence, &spec).unwrap();
        assert!(d > 1.0);
        assert_eq!(mel_distance(&tone, &tone, &spec).unwrap(), 0.0);
        assert!(mel_distance(&[], &tone, &spec).is_err());
    }

    #[test]
    fn shorter_input_is_padded() {
        let spec = MelSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f32> = (0..3000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut padded = a[..2000].to_vec();
        padded.resize(3000, 0.0);
        assert_eq!(mel_distance(&a, &a[..2000], &spec).unwrap(), mel_distance(&a, &padded, &spec).unwrap());
    }

    #[test]
    fn spec_validation() {
        assert!(MelSpec { fmax: 12000.0, ..MelSpec::default() }.validate().is_err());
        assert!(MelSpec { n_mels: 0, ..MelSpec::default() }.validate().is_err());
        assert!(MelSpec { win: 2048, ..MelSpec::default() }.validate().is_err());
        assert_eq!(MelSpec::default().num_frames(1024), 1);
        assert_eq!(MelSpec::default().num_frames(1025), 2);
        assert_eq!(MelSpec::default().num_frames(10), 1);
    }

    fn clip(seed: u64, n: usize) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn mel_distance_is_a_metric(s in 0u64..1000, n in 1usize..4000) {
            let spec = MelSpec { n_fft: 256, hop: 64, win: 256, n_mels: 20, ..MelSpec::default() };
            let (a, b, c) = (clip(s, n), clip(s + 1, n), clip(s + 2, n));
            let ab = mel_distance(&a, &b, &spec).unwrap();
            prop_assert_eq!(ab, mel_distance(&b, &a, &spec).unwrap());
            prop_assert!(ab >= 0.0);
            let ac = mel_distance(&a, &c, &spec).unwrap();
            let cb = mel_distance(&c, &b, &spec).unwrap();
            prop_assert!(ab <= ac + cb + 1e-12);
        }
    }
}
