//! 1-D signal kernels: (transposed) convolution in causal and noncausal form,
//! streaming state for the causal variants, and pointwise activations.
//!
//! Every convolution is lowered to `bias + W · columns`, where `W` is packed
//! as `(out, tap, in)` and `columns` is an im2col view of the input. The sum
//! runs kernel-tap-major, then input-channel, and the value of each output
//! cell never depends on how many other columns are computed alongside it.
//! That is what makes chunked streaming bit-identical to one-shot inference.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gemm::{gemm, BRow, PackedA, RowsC, StridedB};

/// Time-major activation tensor: `channels` rows of `len` samples each.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    len: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, len: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::shape("feature map channels", "> 0", 0));
        }
        if data.len() != channels * len {
            return Err(Error::shape("feature map data", channels * len, data.len()));
        }
        Ok(Self { channels, len, data })
    }

    pub fn zeros(channels: usize, len: usize) -> Self {
        assert!(channels > 0, "feature map needs at least one channel");
        Self {
            channels,
            len,
            data: vec![0.0; channels * len],
        }
    }

    pub fn from_mono(samples: &[f32]) -> Self {
        Self {
            channels: 1,
            len: samples.len(),
            data: samples.to_vec(),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, channel: usize) -> &[f32] {
        &self.data[channel * self.len..(channel + 1) * self.len]
    }

    pub fn row_mut(&mut self, channel: usize) -> &mut [f32] {
        &mut self.data[channel * self.len..(channel + 1) * self.len]
    }

    pub fn get(&self, channel: usize, t: usize) -> f32 {
        self.data[channel * self.len + t]
    }

    /// Time steps `[start, end)` of every channel.
    pub fn slice_time(&self, start: usize, end: usize) -> FeatureMap {
        assert!(start <= end && end <= self.len);
        let mut data = Vec::with_capacity(self.channels * (end - start));
        for c in 0..self.channels {
            data.extend_from_slice(&self.row(c)[start..end]);
        }
        FeatureMap {
            channels: self.channels,
            len: end - start,
            data,
        }
    }

    /// Appends `other` along the time axis.
    pub fn concat_time(&self, other: &FeatureMap) -> Result<FeatureMap> {
        if other.channels != self.channels {
            return Err(Error::shape("concatenated channels", self.channels, other.channels));
        }
        let len = self.len + other.len;
        let mut data = Vec::with_capacity(self.channels * len);
        for c in 0..self.channels {
            data.extend_from_slice(self.row(c));
            data.extend_from_slice(other.row(c));
        }
        Ok(FeatureMap {
            channels: self.channels,
            len,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &FeatureMap) -> Result<()> {
        if other.channels != self.channels || other.len != self.len {
            return Err(Error::shape(
                "residual add",
                format!("{}x{}", self.channels, self.len),
                format!("{}x{}", other.channels, other.len),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub dilation: usize,
    pub causal: bool,
    pub transposed: bool,
}

impl ConvSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel_size: usize, causal: bool) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size,
            stride: 1,
            dilation: 1,
            causal,
            transposed: false,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn transposed(in_channels: usize, out_channels: usize, kernel_size: usize, stride: usize, causal: bool) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            dilation: 1,
            causal,
            transposed: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("kernel_size", self.kernel_size),
            ("stride", self.stride),
            ("dilation", self.dilation),
        ];
        for (name, value) in fields {
            if value == 0 {
                return Err(Error::Parameter(format!("conv {name} must be positive")));
            }
        }
        if self.transposed {
            if self.dilation != 1 {
                return Err(Error::Parameter("transposed conv supports dilation 1 only".into()));
            }
            if self.kernel_size < self.stride {
                return Err(Error::Parameter(format!(
                    "transposed conv kernel {} shorter than stride {}",
                    self.kernel_size, self.stride
                )));
            }
        }
        Ok(())
    }

    /// Total receptive span minus one, `(kernel - 1) * dilation`.
    pub fn span(&self) -> usize {
        (self.kernel_size - 1) * self.dilation
    }

    /// Left zero padding of a plain conv (all of the span when causal,
    /// the floor half otherwise).
    pub fn left_pad(&self) -> usize {
        if self.causal {
            self.span()
        } else {
            self.span() / 2
        }
    }

    /// Output samples trimmed from the start of a transposed conv's full
    /// output. Causal layers trim only at the end.
    pub fn transposed_left_trim(&self) -> usize {
        if self.causal {
            0
        } else {
            (self.kernel_size - self.stride) / 2
        }
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        if self.transposed {
            input_len * self.stride
        } else {
            input_len.div_ceil(self.stride)
        }
    }

    /// Length of the causal streaming history for this layer.
    pub fn history_len(&self) -> usize {
        if self.transposed {
            self.kernel_size.div_ceil(self.stride) - 1
        } else {
            self.span()
        }
    }

    pub fn weight_shape(&self) -> [usize; 3] {
        [self.out_channels, self.in_channels, self.kernel_size]
    }

    pub fn parameter_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_size + self.out_channels
    }
}

/// One group of output columns fed by a fixed list of taps.
#[derive(Clone, Debug)]
struct TapGroup {
    /// `out x (taps * in)` weights, tap-major.
    packed: PackedA,
    /// Input offset of each tap relative to the column's base index.
    tap_offsets: Vec<isize>,
    /// Base input index of column `q` is `base + q * step`.
    base: isize,
    step: isize,
    /// Output position of column `q` is `first_out + q * out_step`.
    first_out: usize,
    out_step: usize,
}

impl TapGroup {
    fn columns(&self, out_len: usize) -> usize {
        if self.first_out >= out_len || self.tap_offsets.is_empty() {
            0
        } else {
            (out_len - self.first_out).div_ceil(self.out_step)
        }
    }
}

/// A convolution with weights packed for execution. Weight layout on the
/// way in is `(out_channels, in_channels, kernel)` for both plain and
/// transposed convs; for transposed convs `w[o][i][k]` scatters input `t`
/// into output `t * stride + k` (before trimming).
#[derive(Clone, Debug)]
pub struct ConvLayer {
    spec: ConvSpec,
    weight: Vec<f32>,
    bias: Vec<f32>,
    /// Packed tap groups, one for a plain conv and one per output phase for
    /// a transposed conv. Offsets are relative to a zero origin.
    groups: Vec<TapGroup>,
}

impl ConvLayer {
    pub fn new(spec: ConvSpec, weight: &[f32], bias: &[f32]) -> Result<Self> {
        spec.validate()?;
        let [o, i, k] = spec.weight_shape();
        if weight.len() != o * i * k {
            return Err(Error::shape("conv weight", format!("{o}x{i}x{k} = {}", o * i * k), weight.len()));
        }
        if bias.len() != o {
            return Err(Error::shape("conv bias", o, bias.len()));
        }
        let groups = if spec.transposed {
            Self::transposed_groups(&spec, weight)
        } else {
            Self::plain_groups(&spec, weight)
        };
        Ok(Self {
            spec,
            weight: weight.to_vec(),
            bias: bias.to_vec(),
            groups,
        })
    }

    fn pack(spec: &ConvSpec, weight: &[f32], kernel_taps: &[usize]) -> PackedA {
        let [o_n, i_n, k_n] = spec.weight_shape();
        PackedA::new(o_n, kernel_taps.len() * i_n, |o, kk| {
            let (t, i) = (kk / i_n, kk % i_n);
            weight[(o * i_n + i) * k_n + kernel_taps[t]]
        })
    }

    fn plain_groups(spec: &ConvSpec, weight: &[f32]) -> Vec<TapGroup> {
        let taps: Vec<usize> = (0..spec.kernel_size).collect();
        vec![TapGroup {
            packed: Self::pack(spec, weight, &taps),
            tap_offsets: taps.iter().map(|&k| (k * spec.dilation) as isize).collect(),
            base: -(spec.left_pad() as isize),
            step: spec.stride as isize,
            first_out: 0,
            out_step: 1,
        }]
    }

    // Output n of the trimmed transposed conv gathers input t through tap
    // k whenever n + trim = t * stride + k. For phase p = n mod stride the
    // usable taps are k = r, r + s, r + 2s, ... with r = (p + trim) mod s,
    // and tap k = r + j*s reads t = q + (p + trim) / s - j.
    fn transposed_groups(spec: &ConvSpec, weight: &[f32]) -> Vec<TapGroup> {
        let s = spec.stride;
        let trim = spec.transposed_left_trim();
        (0..s)
            .map(|p| {
                let r = (p + trim) % s;
                let carry = ((p + trim) / s) as isize;
                let taps: Vec<usize> = (r..spec.kernel_size).step_by(s).collect();
                TapGroup {
                    packed: Self::pack(spec, weight, &taps),
                    tap_offsets: (0..taps.len()).map(|j| -(j as isize)).collect(),
                    base: carry,
                    step: 1,
                    first_out: p,
                    out_step: s,
                }
            })
            .collect()
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn weight(&self) -> &[f32] {
        &self.weight
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    /// One-shot convolution with zero padding on both sides.
    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        self.check_input(x)?;
        Ok(self.run(x, 0, self.spec.output_len(x.len())))
    }

    /// Streaming step for a causal layer: consumes `chunk` after the stored
    /// history and returns the outputs it completes.
    pub fn step(&self, state: &mut LayerState, chunk: &FeatureMap) -> Result<FeatureMap> {
        if !self.spec.causal {
            return Err(Error::Contract("streaming step requires a causal convolution".into()));
        }
        self.check_input(chunk)?;
        if state.history.channels() != self.spec.in_channels || state.history.len() != self.spec.history_len() {
            return Err(Error::shape(
                "layer state",
                format!("{}x{}", self.spec.in_channels, self.spec.history_len()),
                format!("{}x{}", state.history.channels(), state.history.len()),
            ));
        }
        if chunk.is_empty() {
            return Ok(FeatureMap::zeros(self.spec.out_channels, 0));
        }
        if !self.spec.transposed && chunk.len() % self.spec.stride != 0 {
            return Err(Error::Contract(format!(
                "chunk length {} is not a multiple of stride {}",
                chunk.len(),
                self.spec.stride
            )));
        }
        let hist = state.history.len();
        let joined = state.history.concat_time(chunk)?;
        // The history stands in for the causal left padding.
        let out = self.run(&joined, hist as isize, self.spec.output_len(chunk.len()));
        state.history = joined.slice_time(joined.len() - hist, joined.len());
        Ok(out)
    }

    fn check_input(&self, x: &FeatureMap) -> Result<()> {
        if x.channels() != self.spec.in_channels {
            return Err(Error::shape("conv input channels", self.spec.in_channels, x.channels()));
        }
        Ok(())
    }

    /// Computes `out_len` outputs. Logical input index 0 sits at position
    /// `origin` of `x`; reads outside `x` see zeros.
    ///
    /// Every output cell is the bias followed by one multiply-add chain
    /// over taps in order and channels within a tap, independent of how
    /// many columns are computed at once.
    fn run(&self, x: &FeatureMap, origin: isize, out_len: usize) -> FeatureMap {
        let out_ch = self.spec.out_channels;
        let mut out = FeatureMap::zeros(out_ch, out_len);
        for (o, &b) in self.bias.iter().enumerate() {
            out.row_mut(o).fill(b);
        }
        let in_ch = self.spec.in_channels;
        let mut rows = Vec::new();
        for group in &self.groups {
            let n = group.columns(out_len);
            if n == 0 {
                continue;
            }
            rows.clear();
            for &tap in &group.tap_offsets {
                let offset = origin + group.base + tap;
                rows.extend((0..in_ch).map(|i| BRow { start: i * x.len(), offset }));
            }
            let b = StridedB { src: x.data(), rows: &rows, row_len: x.len(), step: group.step as usize };
            if group.out_step == 1 {
                let mut c = RowsC { data: out.data_mut(), row_stride: out_len, first: group.first_out };
                gemm(&group.packed, &b, &mut c, n);
                continue;
            }
            // Transposed phase: compute contiguously, then interleave.
            let mut phase = vec![0.0f32; out_ch * n];
            for (row, &bias) in phase.chunks_exact_mut(n).zip(&self.bias) {
                row.fill(bias);
            }
            gemm(&group.packed, &b, &mut RowsC { data: &mut phase, row_stride: n, first: 0 }, n);
            for (o, row) in phase.chunks_exact(n).enumerate() {
                let dst = &mut out.row_mut(o)[group.first_out..];
                for (d, &v) in dst.iter_mut().step_by(group.out_step).zip(row) {
                    *d = v;
                }
            }
        }
        out
    }
}

/// Per-layer streaming history for a causal (transposed) convolution.
///
/// Plain convs keep the last `(kernel - 1) * dilation` input samples.
/// Transposed convs keep the last `ceil(kernel / stride) - 1` input frames,
/// which is the input that the pending output overlap is derived from.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState {
    pub history: FeatureMap,
}

impl LayerState {
    pub fn new(spec: &ConvSpec) -> Self {
        Self {
            history: FeatureMap::zeros(spec.in_channels, spec.history_len()),
        }
    }
}

fn check_plain(spec: &ConvSpec, transposed: bool) -> Result<()> {
    if spec.transposed != transposed {
        return Err(Error::Parameter(format!(
            "expected a {}transposed conv spec",
            if transposed { "" } else { "non-" }
        )));
    }
    Ok(())
}

/// One-shot 1-D convolution. Noncausal mode pads `span/2` on the left and
/// the rest on the right; causal mode pads only on the left. Output length
/// is `ceil(len / stride)`.
pub fn conv1d(x: &FeatureMap, spec: &ConvSpec, weight: &[f32], bias: &[f32]) -> Result<FeatureMap> {
    check_plain(spec, false)?;
    ConvLayer::new(*spec, weight, bias)?.forward(x)
}

/// One-shot transposed convolution with output length `len * stride`;
/// noncausal mode trims the overhang symmetrically, causal mode only on the
/// right.
pub fn conv1d_transposed(x: &FeatureMap, spec: &ConvSpec, weight: &[f32], bias: &[f32]) -> Result<FeatureMap> {
    check_plain(spec, true)?;
    ConvLayer::new(*spec, weight, bias)?.forward(x)
}

/// Streaming causal convolution step, returning the outputs and the
/// updated state.
pub fn conv_step(
    state: LayerState,
    chunk: &FeatureMap,
    spec: &ConvSpec,
    weight: &[f32],
    bias: &[f32],
) -> Result<(FeatureMap, LayerState)> {
    let mut state = state;
    let out = ConvLayer::new(*spec, weight, bias)?.step(&mut state, chunk)?;
    Ok((out, state))
}

/// `x + sin²(alpha·x) / alpha`.
pub fn snake(x: f32, alpha: f32) -> Result<f32> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Parameter(format!("snake alpha must be positive, got {alpha}")));
    }
    Ok(snake_unchecked(x, alpha))
}

#[inline]
fn snake_unchecked(x: f32, alpha: f32) -> f32 {
    let s = (alpha * x).sin();
    x + s * s / alpha
}

pub fn leaky_relu(x: f32, slope: f32) -> f32 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

/// Applies snake in place with one alpha per channel.
pub fn snake_channels(x: &mut FeatureMap, alphas: &[f32]) -> Result<()> {
    if alphas.len() != x.channels() {
        return Err(Error::shape("snake alphas", x.channels(), alphas.len()));
    }
    if let Some(bad) = alphas.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
        return Err(Error::Parameter(format!("snake alpha must be positive, got {bad}")));
    }
    for (c, &alpha) in alphas.iter().enumerate() {
        snake_row(x.row_mut(c), alpha);
    }
    Ok(())
}

fn snake_row(row: &mut [f32], alpha: f32) {
    let peak = row.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if alpha * peak >= SIN2_FAST_LIMIT {
        let inv = 1.0 / alpha;
        for v in row.iter_mut() {
            let y = alpha * *v;
            let s2 = if y.abs() < SIN2_FAST_LIMIT { sin2_reduced(y) } else { y.sin() * y.sin() };
            *v += s2 * inv;
        }
        return;
    }
    // Same arithmetic on every path (no contraction), only wider.
    #[cfg(target_arch = "x86_64")]
    match crate::gemm::isa() {
        // SAFETY: the features were detected at runtime.
        crate::gemm::Isa::Avx512 => return unsafe { snake_row_avx512(row, alpha) },
        crate::gemm::Isa::Avx2 => return unsafe { snake_row_avx2(row, alpha) },
        crate::gemm::Isa::Generic => {}
    }
    snake_row_fast(row, alpha);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn snake_row_avx512(row: &mut [f32], alpha: f32) {
    snake_row_fast(row, alpha);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn snake_row_avx2(row: &mut [f32], alpha: f32) {
    snake_row_fast(row, alpha);
}

#[inline(always)]
fn snake_row_fast(row: &mut [f32], alpha: f32) {
    let inv = 1.0 / alpha;
    for v in row.iter_mut() {
        *v += sin2_reduced(alpha * *v) * inv;
    }
}

/// Beyond this argument the three-part reduction below loses accuracy.
const SIN2_FAST_LIMIT: f32 = 8192.0;

/// `sin²(y)` for `|y| < SIN2_FAST_LIMIT`. sin² has period pi, so reduce to
/// `[-pi/2, pi/2]` and evaluate a Taylor polynomial (error < 6e-8 there).
#[inline(always)]
fn sin2_reduced(y: f32) -> f32 {
    const ROUND: f32 = 12_582_912.0; // 1.5 * 2^23
    const PI_A: f32 = 3.140_625;
    const PI_B: f32 = 9.675_025_94e-4;
    const PI_C: f32 = 1.509_957_9e-7;
    let n = (y * std::f32::consts::FRAC_1_PI + ROUND) - ROUND;
    let r = ((y - n * PI_A) - n * PI_B) - n * PI_C;
    let r2 = r * r;
    let p = -2.505_210_8e-8f32;
    let p = p * r2 + 2.755_731_9e-6;
    let p = p * r2 - 1.984_127e-4;
    let p = p * r2 + 8.333_333e-3;
    let p = p * r2 - 0.166_666_67;
    let s = r + r * r2 * p;
    s * s
}

pub fn leaky_relu_inplace(x: &mut FeatureMap, slope: f32) {
    for v in x.data_mut() {
        *v = leaky_relu(*v, slope);
    }
}

pub fn tanh_inplace(x: &mut FeatureMap) {
    for v in x.data_mut() {
        *v = v.tanh();
    }
}
