//! The `.nncb` token stream.
//!
//! ```text
//! header (little-endian)
//!   magic                  4 bytes  "NNCB"
//!   version                u16      1
//!   sample_rate_hz         u32
//!   stride_product         u32      samples per frame
//!   num_codebooks          u16
//!   level_count            u16      L
//!   levels                 L x u16
//!   original_sample_count  u64
//!   flags                  u32      bit 0: decoder is causal
//! payload
//!   ceil(original_sample_count / stride_product) frames, each
//!   num_codebooks indices of bits_per_token bits, MSB first, packed
//!   back to back; zero bits pad the final byte only
//! ```
//!
//! The header is `30 + 2 L` bytes. Frames have a fixed size, so there are
//! no sync markers.

use std::io::Read;

use crate::bytes::Cursor;
use crate::config::{bits_for_codes, rate_report, CodecConfig, FsqSpec, Rate, RateReport};
use crate::error::{Error, Result};
use crate::fsq::TokenFrame;

pub const MAGIC: [u8; 4] = *b"NNCB";
pub const VERSION: u16 = 1;
pub const FLAG_DECODER_CAUSAL: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitstreamHeader {
    pub version: u16,
    pub sample_rate_hz: u32,
    pub stride_product: u32,
    pub num_codebooks: u16,
    pub levels: Vec<u16>,
    pub original_sample_count: u64,
    pub flags: u32,
}

impl BitstreamHeader {
    pub fn for_config(config: &CodecConfig, original_sample_count: u64) -> Result<Self> {
        config.check()?;
        let narrow = |v: u64, what: &str| -> Result<u16> {
            u16::try_from(v).map_err(|_| Error::Config(format!("{what} {v} does not fit the stream header")))
        };
        Ok(Self {
            version: VERSION,
            sample_rate_hz: config.sample_rate_hz,
            stride_product: u32::try_from(config.hop_samples())
                .map_err(|_| Error::Config("stride product does not fit the stream header".into()))?,
            num_codebooks: narrow(config.fsq.num_codebooks as u64, "codebook count")?,
            levels: config
                .fsq
                .levels
                .iter()
                .map(|&l| narrow(u64::from(l), "level"))
                .collect::<Result<_>>()?,
            original_sample_count,
            flags: if config.decoder_causal { FLAG_DECODER_CAUSAL } else { 0 },
        })
    }

    pub fn fsq_spec(&self) -> FsqSpec {
        let levels: Vec<u32> = self.levels.iter().map(|&l| u32::from(l)).collect();
        FsqSpec::new(usize::from(self.num_codebooks), &levels)
    }

    pub fn decoder_causal(&self) -> bool {
        self.flags & FLAG_DECODER_CAUSAL != 0
    }

    pub fn num_frames(&self) -> u64 {
        self.original_sample_count.div_ceil(u64::from(self.stride_product))
    }

    pub fn bits_per_token(&self) -> u32 {
        bits_for_codes(self.levels.iter().map(|&l| u64::from(l)).product())
    }

    pub fn frame_bits(&self) -> u64 {
        u64::from(self.num_codebooks) * u64::from(self.bits_per_token())
    }

    pub fn payload_bytes(&self) -> u64 {
        (self.num_frames() * self.frame_bits()).div_ceil(8)
    }

    pub fn header_len(&self) -> usize {
        30 + 2 * self.levels.len()
    }

    /// Rates implied by the header alone.
    pub fn rate_report(&self) -> Result<RateReport> {
        self.check()?;
        let frames_per_sec = Rate::new(u64::from(self.sample_rate_hz), u64::from(self.stride_product));
        let tokens_per_sec = frames_per_sec * u64::from(self.num_codebooks);
        let bits_per_token = self.bits_per_token();
        Ok(RateReport {
            frames_per_sec,
            tokens_per_sec,
            bits_per_token,
            bitrate_bps: tokens_per_sec * u64::from(bits_per_token),
            hop_samples: u64::from(self.stride_product),
        })
    }

    /// Fails unless this stream can be decoded with `config`.
    pub fn check_matches(&self, config: &CodecConfig) -> Result<()> {
        let expected = Self::for_config(config, self.original_sample_count)?;
        if expected.levels != self.levels || expected.num_codebooks != self.num_codebooks {
            return Err(Error::Contract(format!(
                "stream has {} codebooks with levels {:?}; config `{}` has {} with {:?}",
                self.num_codebooks, self.levels, config.name, expected.num_codebooks, expected.levels
            )));
        }
        if self.rate_report()? != rate_report(config)? {
            return Err(Error::Contract(format!(
                "stream rates ({} Hz, {} samples per frame) differ from config `{}` ({} Hz, {})",
                self.sample_rate_hz,
                self.stride_product,
                config.name,
                config.sample_rate_hz,
                config.hop_samples()
            )));
        }
        if self.decoder_causal() != config.decoder_causal {
            return Err(Error::Contract(format!(
                "stream flags a {} decoder; config `{}` is {}",
                if self.decoder_causal() { "causal" } else { "noncausal" },
                config.name,
                config.causality_label()
            )));
        }
        Ok(())
    }

    fn check(&self) -> Result<()> {
        if self.version != VERSION {
            return Err(Error::Format(format!("unsupported stream version {}", self.version)));
        }
        if self.sample_rate_hz == 0 || self.stride_product == 0 {
            return Err(Error::Format("zero sample rate or stride product".into()));
        }
        if self.num_codebooks == 0 || self.levels.is_empty() {
            return Err(Error::Format("no codebooks or empty level list".into()));
        }
        if let Some(l) = self.levels.iter().find(|&&l| l < 2) {
            return Err(Error::Format(format!("level {l} is below 2")));
        }
        if self.levels.iter().map(|&l| u64::from(l)).try_fold(1u64, |a, l| a.checked_mul(l).filter(|&p| p <= 1 << 32)).is_none() {
            return Err(Error::Format("codebook size exceeds 2^32".into()));
        }
        if self.flags & !FLAG_DECODER_CAUSAL != 0 {
            return Err(Error::Format(format!("unknown flag bits {:#x}", self.flags)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check()?;
        let mut out = Vec::with_capacity(self.header_len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.sample_rate_hz.to_le_bytes());
        out.extend_from_slice(&self.stride_product.to_le_bytes());
        out.extend_from_slice(&self.num_codebooks.to_le_bytes());
        out.extend_from_slice(&(self.levels.len() as u16).to_le_bytes());
        for l in &self.levels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out.extend_from_slice(&self.original_sample_count.to_le_bytes());
        out.extend_from_slice(&self.flags.to_le_bytes());
        Ok(out)
    }

    /// Reads a header from the front of `reader`.
    pub fn read_from(reader: &mut impl Read) -> Result<Self> {
        let mut fixed = [0u8; 18];
        read_exact(reader, &mut fixed, "stream header")?;
        let mut c = Cursor::new(&fixed, "stream header");
        if c.array::<4>()? != MAGIC {
            return Err(Error::Format("bad magic; not an .nncb stream".into()));
        }
        let version = c.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported stream version {version}")));
        }
        let sample_rate_hz = c.u32()?;
        let stride_product = c.u32()?;
        let num_codebooks = c.u16()?;
        let level_count = usize::from(c.u16()?);
        let mut rest = vec![0u8; 2 * level_count + 12];
        read_exact(reader, &mut rest, "stream header")?;
        let mut c = Cursor::new(&rest, "stream header");
        let levels = (0..level_count).map(|_| c.u16()).collect::<Result<_>>()?;
        let header = Self {
            version,
            sample_rate_hz,
            stride_product,
            num_codebooks,
            levels,
            original_sample_count: c.u64()?,
            flags: c.u32()?,
        };
        header.check()?;
        Ok(header)
    }
}

fn read_exact(reader: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    reader.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Framing(format!("{what} is truncated")),
        _ => Error::Io(e),
    })
}

/// MSB-first bit writer.
#[derive(Clone, Debug, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    bits: u64,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the low `width` bits of `value`, most significant first.
    pub fn push(&mut self, value: u32, width: u32) {
        assert!(width <= 32 && (width == 32 || value >> width == 0));
        for i in (0..width).rev() {
            let bit = (value >> i) & 1;
            let used = (self.bits % 8) as u32;
            if used == 0 {
                self.bytes.push(0);
            }
            if bit == 1 {
                *self.bytes.last_mut().expect("pushed above") |= 0x80 >> used;
            }
            self.bits += 1;
        }
    }

    pub fn bit_len(&self) -> u64 {
        self.bits
    }

    /// The bytes written so far, zero-padded to a byte boundary.
    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

/// MSB-first bit reader over a byte slice, starting `offset` bits in.
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: u64,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8], offset: u64) -> Self {
        Self { bytes, pos: offset }
    }

    pub fn remaining(&self) -> u64 {
        (self.bytes.len() as u64 * 8).saturating_sub(self.pos)
    }

    pub fn position(&self) -> u64 {
        self.pos
    }

    pub fn read(&mut self, width: u32) -> Result<u32> {
        if self.remaining() < u64::from(width) {
            return Err(Error::Framing(format!(
                "wanted {width} bits, {} left in the payload",
                self.remaining()
            )));
        }
        let mut v = 0u32;
        for _ in 0..width {
            let byte = self.bytes[(self.pos / 8) as usize];
            let bit = (byte >> (7 - self.pos % 8)) & 1;
            v = (v << 1) | u32::from(bit);
            self.pos += 1;
        }
        Ok(v)
    }
}

fn write_frame(w: &mut BitWriter, frame: &TokenFrame, spec: &FsqSpec) -> Result<()> {
    frame.validate(spec)?;
    let width = spec.bits_per_token();
    for &index in &frame.indices {
        w.push(index, width);
    }
    Ok(())
}

fn read_frame(r: &mut BitReader<'_>, spec: &FsqSpec) -> Result<TokenFrame> {
    let width = spec.bits_per_token();
    let codes = spec.codes_per_codebook();
    let indices = (0..spec.num_codebooks)
        .map(|_| {
            let index = r.read(width)?;
            if u64::from(index) >= codes {
                return Err(Error::Range(format!("decoded index {index} >= {codes} codes")));
            }
            Ok(index)
        })
        .collect::<Result<_>>()?;
    Ok(TokenFrame { indices })
}

/// Packs one frame on its own, zero-padded to whole bytes.
pub fn pack_frame(frame: &TokenFrame, spec: &FsqSpec) -> Result<Vec<u8>> {
    let mut w = BitWriter::new();
    write_frame(&mut w, frame, spec)?;
    Ok(w.into_bytes())
}

pub fn unpack_frame(bytes: &[u8], spec: &FsqSpec) -> Result<TokenFrame> {
    read_frame(&mut BitReader::new(bytes, 0), spec)
}

/// Serializes a header and exactly `header.num_frames()` frames.
pub fn write_stream(header: &BitstreamHeader, frames: &[TokenFrame]) -> Result<Vec<u8>> {
    if frames.len() as u64 != header.num_frames() {
        return Err(Error::Framing(format!(
            "{} frames for {} samples; the header implies {}",
            frames.len(),
            header.original_sample_count,
            header.num_frames()
        )));
    }
    let spec = header.fsq_spec();
    let mut w = BitWriter::new();
    for frame in frames {
        write_frame(&mut w, frame, &spec)?;
    }
    let mut out = header.to_bytes()?;
    out.extend_from_slice(&w.into_bytes());
    Ok(out)
}

/// Parses a whole stream held in memory.
pub fn read_stream(bytes: &[u8]) -> Result<(BitstreamHeader, Vec<TokenFrame>)> {
    let mut reader = FrameReader::new(bytes)?;
    let header = reader.header().clone();
    let payload = bytes.len() as u64 - header.header_len() as u64;
    if payload != header.payload_bytes() {
        return Err(Error::Framing(format!(
            "payload is {payload} bytes; {} frames need {}",
            header.num_frames(),
            header.payload_bytes()
        )));
    }
    let frames = reader.by_ref().collect::<Result<Vec<_>>>()?;
    Ok((header, frames))
}

/// Sequential frame reader that holds at most one frame of payload (plus
/// a partial byte) at a time. The trailing padding and end of input are
/// checked after the last frame.
pub struct FrameReader<R: Read> {
    reader: R,
    header: BitstreamHeader,
    spec: FsqSpec,
    frames_read: u64,
    /// Leftover partial byte and how many of its bits were consumed.
    carry: Option<(u8, u32)>,
    buf: Vec<u8>,
    done: bool,
}

impl<R: Read> FrameReader<R> {
    pub fn new(mut reader: R) -> Result<Self> {
        let header = BitstreamHeader::read_from(&mut reader)?;
        let spec = header.fsq_spec();
        Ok(Self {
            reader,
            header,
            spec,
            frames_read: 0,
            carry: None,
            buf: Vec::new(),
            done: false,
        })
    }

    pub fn header(&self) -> &BitstreamHeader {
        &self.header
    }

    pub fn frames_read(&self) -> u64 {
        self.frames_read
    }

    /// Payload bytes held for the last frame; at most one frame plus one.
    pub fn buffered_bytes(&self) -> usize {
        self.buf.len()
    }

    pub fn next_frame(&mut self) -> Result<Option<TokenFrame>> {
        if self.done {
            return Ok(None);
        }
        if self.frames_read == self.header.num_frames() {
            self.done = true;
            self.finish()?;
            return Ok(None);
        }
        let frame_bits = self.header.frame_bits();
        let (carry_byte, offset) = match self.carry {
            Some((b, used)) => (Some(b), u64::from(used)),
            None => (None, 0),
        };
        let carried = if carry_byte.is_some() { 8 - offset } else { 0 };
        let fresh = (frame_bits.saturating_sub(carried)).div_ceil(8) as usize;
        self.buf.clear();
        self.buf.extend(carry_byte);
        let start = self.buf.len();
        self.buf.resize(start + fresh, 0);
        read_exact(&mut self.reader, &mut self.buf[start..], "frame payload").map_err(|e| {
            self.done = true;
            e
        })?;
        let mut r = BitReader::new(&self.buf, offset);
        let frame = read_frame(&mut r, &self.spec).map_err(|e| {
            self.done = true;
            e
        })?;
        let end = r.position();
        self.carry = (end % 8 != 0).then(|| (self.buf[(end / 8) as usize], (end % 8) as u32));
        self.frames_read += 1;
        Ok(Some(frame))
    }

    fn finish(&mut self) -> Result<()> {
        if let Some((byte, used)) = self.carry {
            if byte & (0xFF >> used) != 0 {
                return Err(Error::Framing("nonzero padding bits after the last frame".into()));
            }
        }
        let mut extra = [0u8; 1];
        match self.reader.read(&mut extra)? {
            0 => Ok(()),
            _ => Err(Error::Framing("trailing bytes after the last frame".into())),
        }
    }
}

impl<R: Read> Iterator for FrameReader<R> {
    type Item = Result<TokenFrame>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_frame().transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{builtin, builtin_configs};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frames(spec: &FsqSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<TokenFrame> {
        let codes = spec.codes_per_codebook();
        (0..n)
            .map(|_| TokenFrame::new((0..spec.num_codebooks).map(|_| rng.gen_range(0..codes) as u32).collect()))
            .collect()
    }

    fn base2(v: u32, width: u32) -> String {
        let mut s = String::new();
        let mut v = v;
        for _ in 0..width {
            s.insert(0, if v % 2 == 1 { '1' } else { '0' });
            v /= 2;
        }
        s
    }

    #[test]
    fn zero_frame_is_all_zero_bits() {
        let spec = FsqSpec::new(8, &[8, 7, 6, 6]);
        let bytes = pack_frame(&TokenFrame::new(vec![0; 8]), &spec).unwrap();
        assert_eq!(bytes, vec![0u8; 11]);
    }

    #[test]
    fn index_bits_are_msb_first() {
        let spec = FsqSpec::new(1, &[8, 7, 6, 6]);
        let bytes = pack_frame(&TokenFrame::new(vec![2015]), &spec).unwrap();
        let bits: String = bytes.iter().map(|b| format!("{b:08b}")).collect();
        assert_eq!(&bits[..11], base2(2015, 11));
        assert_eq!(&bits[..11], "11111011111");
        assert_eq!(&bits[11..], "00000");
    }

    #[test]
    fn frame_errors() {
        let spec = FsqSpec::new(2, &[8, 7, 6, 6]);
        assert!(matches!(pack_frame(&TokenFrame::new(vec![0, 2016]), &spec), Err(Error::Range(_))));
        assert!(matches!(unpack_frame(&[0, 0], &spec), Err(Error::Framing(_))));
        // 2047 fits in 11 bits but is not a code.
        assert!(matches!(unpack_frame(&[0xFF; 3], &spec), Err(Error::Range(_))));
    }

    #[test]
    fn header_layout() {
        let c = builtin("12.5fps-1.1kbps-causal").unwrap();
        let h = BitstreamHeader::for_config(&c, 22050).unwrap();
        let bytes = h.to_bytes().unwrap();
        assert_eq!(bytes.len(), 38);
        assert_eq!(&bytes[..4], b"NNCB");
        assert_eq!(u32::from_le_bytes(bytes[10..14].try_into().unwrap()), 1764);
        assert_eq!(h.num_frames(), 13);
        assert!(h.decoder_causal());
        assert_eq!(BitstreamHeader::read_from(&mut &bytes[..]).unwrap(), h);
        assert_eq!(h.rate_report().unwrap(), rate_report(&c).unwrap());
    }

    #[test]
    fn stream_round_trip_and_size_for_every_builtin() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for c in builtin_configs() {
            let hop = c.hop_samples();
            for samples in [0, 1, hop - 1, hop, hop + 1, 7 * hop + 3] {
                let h = BitstreamHeader::for_config(&c, samples).unwrap();
                let frames = random_frames(&c.fsq, h.num_frames() as usize, &mut rng);
                let bytes = write_stream(&h, &frames).unwrap();
                let bits = h.num_frames() * c.fsq.num_codebooks as u64 * u64::from(c.fsq.bits_per_token());
                assert_eq!(bytes.len() as u64, h.header_len() as u64 + bits.div_ceil(8));
                let (h2, f2) = read_stream(&bytes).unwrap();
                assert_eq!((h2, f2), (h.clone(), frames.clone()));
                assert_eq!(write_stream(&h, &frames).unwrap(), bytes);
            }
        }
    }

    #[test]
    fn one_second_at_1_78_kbps() {
        let c = builtin("12.5fps-1.78kbps").unwrap();
        let h = BitstreamHeader::for_config(&c, 22050).unwrap();
        assert_eq!(h.num_frames(), 13);
        assert_eq!(h.payload_bytes(), 233);
    }

    #[test]
    fn stream_errors() {
        let c = builtin("12.5fps-1.1kbps-causal").unwrap();
        let h = BitstreamHeader::for_config(&c, 2 * 1764).unwrap();
        let frames = random_frames(&c.fsq, 2, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(write_stream(&h, &frames[..1]), Err(Error::Framing(_))));
        let good = write_stream(&h, &frames).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(read_stream(&bad), Err(Error::Format(_))));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(read_stream(&bad), Err(Error::Format(_))));
        assert!(matches!(read_stream(&good[..good.len() - 1]), Err(Error::Framing(_))));
        assert!(matches!(read_stream(&good[..20]), Err(Error::Framing(_))));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(read_stream(&long), Err(Error::Framing(_))));
        // The second frame starts on byte 11 of the payload; eleven ones
        // decode to 2047, which is not a code.
        let mut bad = good.clone();
        let n = bad.len();
        bad[n - 11..n - 9].fill(0xFF);
        assert!(matches!(read_stream(&bad), Err(Error::Range(_))));
    }

    #[test]
    fn padding_bits_must_be_zero() {
        let c = builtin("12.5fps-1.78kbps").unwrap();
        let h = BitstreamHeader::for_config(&c, 1).unwrap();
        let frames = random_frames(&c.fsq, 1, &mut ChaCha8Rng::seed_from_u64(2));
        let mut bytes = write_stream(&h, &frames).unwrap();
        // 13 x 11 = 143 bits: one padding bit.
        *bytes.last_mut().unwrap() |= 1;
        assert!(matches!(read_stream(&bytes), Err(Error::Framing(_))));
    }

    #[test]
    fn frame_reader_buffers_one_frame() {
        let c = builtin("12.5fps-1.78kbps").unwrap();
        let h = BitstreamHeader::for_config(&c, 40 * 1764).unwrap();
        let frames = random_frames(&c.fsq, 40, &mut ChaCha8Rng::seed_from_u64(4));
        let bytes = write_stream(&h, &frames).unwrap();
        let mut reader = FrameReader::new(&bytes[..]).unwrap();
        let limit = (h.frame_bits().div_ceil(8) + 1) as usize;
        let mut got = Vec::new();
        while let Some(f) = reader.next_frame().unwrap() {
            assert!(reader.buffered_bytes() <= limit);
            got.push(f);
        }
        assert_eq!(got, frames);
    }

    #[test]
    fn header_must_match_config() {
        let c = builtin("12.5fps-1.1kbps-causal").unwrap();
        let h = BitstreamHeader::for_config(&c, 100).unwrap();
        h.check_matches(&c).unwrap();
        assert!(h.check_matches(&builtin("21.5fps-1.89kbps-noncausal").unwrap()).is_err());
        assert!(h.check_matches(&builtin("12.5fps-1.1kbps-noncausal").unwrap()).is_err());
        assert!(h.check_matches(&builtin("12.5fps-0.6kbps").unwrap()).is_err());
    }
}
