//! CFA frame representation, Bayer-pattern unification, CFA<->4-channel
//! packing, Bayer-preserving augmentation, and the RVDS on-disk container.
//!
//! All pixel data is stored as normalized `f32` in nominal `[0,1]` units;
//! integer bit depths and black levels are resolved at ingestion and not
//! modeled here.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise_model::NoiseParams;

/// The 2x2 top-left CFA tile, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BayerPattern {
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
}

impl BayerPattern {
    pub const ALL: [BayerPattern; 4] = [
        BayerPattern::Rggb,
        BayerPattern::Bggr,
        BayerPattern::Grbg,
        BayerPattern::Gbrg,
    ];

    /// RVDS container code.
    pub fn code(self) -> u8 {
        match self {
            BayerPattern::Rggb => 0,
            BayerPattern::Bggr => 1,
            BayerPattern::Grbg => 2,
            BayerPattern::Gbrg => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => BayerPattern::Rggb,
            1 => BayerPattern::Bggr,
            2 => BayerPattern::Grbg,
            3 => BayerPattern::Gbrg,
            other => return Err(Error::Format(format!("unknown pattern code {other}"))),
        })
    }

    /// Color at CFA position `(row, col)`: 0=R, 1=G, 2=B.
    pub fn color_at(self, row: usize, col: usize) -> u8 {
        let tile: [[u8; 2]; 2] = match self {
            BayerPattern::Rggb => [[0, 1], [1, 2]],
            BayerPattern::Bggr => [[2, 1], [1, 0]],
            BayerPattern::Grbg => [[1, 0], [2, 1]],
            BayerPattern::Gbrg => [[1, 2], [0, 1]],
        };
        tile[row % 2][col % 2]
    }
}

/// Flips applied by [`unify_pattern`], recorded so they can be undone exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlipRecord {
    pub vertical: bool,
    pub horizontal: bool,
}

/// A single-channel CFA mosaic with Bayer metadata. Height and width are
/// even (a whole number of 2x2 tiles); samples are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFrame {
    pub pattern: BayerPattern,
    pub data: Array2<f32>,
}

impl RawFrame {
    pub fn new(pattern: BayerPattern, data: Array2<f32>) -> Result<Self> {
        let (h, w) = data.dim();
        if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "raw frame dimensions must be even and nonzero, got {h}x{w}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("raw frame contains non-finite samples".into()));
        }
        Ok(RawFrame { pattern, data })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }
}

/// A half-resolution 4-channel image; channel order is always (R, G1, G2, B),
/// stored channel-planar as `[4, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedFrame {
    pub data: Array3<f32>,
}

pub const CH_R: usize = 0;
pub const CH_G1: usize = 1;
pub const CH_G2: usize = 2;
pub const CH_B: usize = 3;

impl PackedFrame {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 4 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "packed frame must be [4, h, w] with h,w > 0, got [{c}, {h}, {w}]"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("packed frame contains non-finite samples".into()));
        }
        Ok(PackedFrame { data })
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }
}

/// An ordered list of packed frames sharing one shape, with optional noise
/// parameters and the Bayer pattern of the source mosaic.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub frames: Vec<PackedFrame>,
    pub noise: Option<NoiseParams>,
    pub source_pattern: BayerPattern,
}

impl Sequence {
    pub fn new(
        frames: Vec<PackedFrame>,
        noise: Option<NoiseParams>,
        source_pattern: BayerPattern,
    ) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Shape("sequence must contain at least one frame".into()));
        }
        let dim = frames[0].data.dim();
        if frames.iter().any(|f| f.data.dim() != dim) {
            return Err(Error::Shape("sequence frames have differing dimensions".into()));
        }
        Ok(Sequence { frames, noise, source_pattern })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }
}

/// Flips needed to bring a pattern to RGGB. Reflecting an even-sized mosaic
/// shifts the 2x2 tile parity by exactly one row (vertical) or column
/// (horizontal).
fn flips_for(pattern: BayerPattern) -> FlipRecord {
    match pattern {
        BayerPattern::Rggb => FlipRecord { vertical: false, horizontal: false },
        BayerPattern::Grbg => FlipRecord { vertical: false, horizontal: true },
        BayerPattern::Gbrg => FlipRecord { vertical: true, horizontal: false },
        BayerPattern::Bggr => FlipRecord { vertical: true, horizontal: true },
    }
}

fn apply_flips(data: &Array2<f32>, flips: FlipRecord) -> Array2<f32> {
    let mut out = data.clone();
    if flips.vertical {
        out.invert_axis(Axis(0));
    }
    if flips.horizontal {
        out.invert_axis(Axis(1));
    }
    out
}

/// Reflect a frame so its pattern becomes RGGB; the returned record undoes
/// the reflection exactly.
pub fn unify_pattern(frame: &RawFrame) -> (RawFrame, FlipRecord) {
    let flips = flips_for(frame.pattern);
    let data = apply_flips(&frame.data, flips);
    (RawFrame { pattern: BayerPattern::Rggb, data }, flips)
}

/// Exact inverse of [`unify_pattern`].
pub fn undo_unify(frame: &RawFrame, flips: FlipRecord, original: BayerPattern) -> RawFrame {
    let data = apply_flips(&frame.data, flips);
    RawFrame { pattern: original, data }
}

/// Pack an RGGB mosaic into (R, G1, G2, B) planes at half resolution.
pub fn pack_cfa(frame: &RawFrame) -> Result<PackedFrame> {
    if frame.pattern != BayerPattern::Rggb {
        return Err(Error::Pattern(format!(
            "pack_cfa requires an RGGB frame, got {:?}; unify first",
            frame.pattern
        )));
    }
    let (h, w) = frame.data.dim();
    let (hp, wp) = (h / 2, w / 2);
    let mut out = Array3::<f32>::zeros((4, hp, wp));
    for i in 0..hp {
        for j in 0..wp {
            out[[CH_R, i, j]] = frame.data[[2 * i, 2 * j]];
            out[[CH_G1, i, j]] = frame.data[[2 * i, 2 * j + 1]];
            out[[CH_G2, i, j]] = frame.data[[2 * i + 1, 2 * j]];
            out[[CH_B, i, j]] = frame.data[[2 * i + 1, 2 * j + 1]];
        }
    }
    Ok(PackedFrame { data: out })
}

/// Exact inverse of [`pack_cfa`]; the result is always RGGB.
pub fn unpack_cfa(frame: &PackedFrame) -> RawFrame {
    let (_, hp, wp) = frame.data.dim();
    let mut out = Array2::<f32>::zeros((2 * hp, 2 * wp));
    for i in 0..hp {
        for j in 0..wp {
            out[[2 * i, 2 * j]] = frame.data[[CH_R, i, j]];
            out[[2 * i, 2 * j + 1]] = frame.data[[CH_G1, i, j]];
            out[[2 * i + 1, 2 * j]] = frame.data[[CH_G2, i, j]];
            out[[2 * i + 1, 2 * j + 1]] = frame.data[[CH_B, i, j]];
        }
    }
    RawFrame { pattern: BayerPattern::Rggb, data: out }
}

/// CFA-preserving geometric augmentation in packed space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentOp {
    None,
    HFlip,
    VFlip,
    Transpose,
}

fn augment_frame(frame: &PackedFrame, op: AugmentOp) -> PackedFrame {
    let mut data = frame.data.clone();
    match op {
        AugmentOp::None => {}
        // Mirroring the packed planes mirrors the scene at tile granularity
        // while every sample keeps its CFA color, so unpacking still yields a
        // valid RGGB mosaic. (A raw-domain mirror would change tile parity
        // and put green samples at R sites.)
        AugmentOp::HFlip => data.invert_axis(Axis(2)),
        AugmentOp::VFlip => data.invert_axis(Axis(1)),
        // Transposing an RGGB tile exchanges the two green sites.
        AugmentOp::Transpose => {
            let (_, h, w) = data.dim();
            let mut t = Array3::<f32>::zeros((4, w, h));
            for c in 0..4 {
                let dst = match c {
                    CH_G1 => CH_G2,
                    CH_G2 => CH_G1,
                    other => other,
                };
                for i in 0..h {
                    for j in 0..w {
                        t[[dst, j, i]] = data[[c, i, j]];
                    }
                }
            }
            data = t;
        }
    }
    PackedFrame { data }
}

/// Apply the op identically to every frame of the sequence.
pub fn augment(seq: &Sequence, op: AugmentOp) -> Sequence {
    Sequence {
        frames: seq.frames.iter().map(|f| augment_frame(f, op)).collect(),
        noise: seq.noise.clone(),
        source_pattern: seq.source_pattern,
    }
}

// ---------------------------------------------------------------------------
// RVDS container
// ---------------------------------------------------------------------------

const RVDS_MAGIC: [u8; 4] = *b"RVDS";
const RVDS_VERSION: u32 = 1;
/// Refuse headers whose payload would exceed this many samples per frame.
const MAX_FRAME_SAMPLES: u64 = 1 << 32;

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Truncated("header ended early".into()))?;
    Ok(u32::from_le_bytes(buf))
}

struct RvdsHeader {
    frames: u32,
    height: u32,
    width: u32,
    channels: u32,
    pattern: BayerPattern,
}

fn write_header<W: Write>(w: &mut W, h: &RvdsHeader) -> Result<()> {
    w.write_all(&RVDS_MAGIC)?;
    write_u32(w, RVDS_VERSION)?;
    write_u32(w, h.frames)?;
    write_u32(w, h.height)?;
    write_u32(w, h.width)?;
    write_u32(w, h.channels)?;
    w.write_all(&[h.pattern.code(), 0u8, 0u8, 0u8])?; // dtype 0 = f32, 2 reserved
    Ok(())
}

fn read_header<R: Read>(r: &mut R) -> Result<RvdsHeader> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::BadMagic { expected: RVDS_MAGIC, found: [0; 4] })?;
    if magic != RVDS_MAGIC {
        return Err(Error::BadMagic { expected: RVDS_MAGIC, found: magic });
    }
    let version = read_u32(r)?;
    if version != RVDS_VERSION {
        return Err(Error::VersionMismatch { expected: RVDS_VERSION, found: version });
    }
    let frames = read_u32(r)?;
    let height = read_u32(r)?;
    let width = read_u32(r)?;
    let channels = read_u32(r)?;
    let mut tail = [0u8; 4];
    r.read_exact(&mut tail)
        .map_err(|_| Error::Truncated("header ended early".into()))?;
    let pattern = BayerPattern::from_code(tail[0])?;
    if tail[1] != 0 {
        return Err(Error::Format(format!("unknown dtype code {}", tail[1])));
    }
    if channels != 1 && channels != 4 {
        return Err(Error::Format(format!("unsupported channel count {channels}")));
    }
    let samples = height as u128 * width as u128 * channels as u128;
    if samples == 0 || samples > MAX_FRAME_SAMPLES as u128 {
        return Err(Error::DimensionOverflow(format!(
            "declared frame of {height}x{width}x{channels} samples"
        )));
    }
    Ok(RvdsHeader { frames, height, width, channels, pattern })
}

fn write_plane<W: Write>(w: &mut W, data: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_samples<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Truncated("payload shorter than header declares".into()))?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Write a packed sequence (channels = 4) to an RVDS file.
pub fn write_sequence<P: AsRef<Path>>(seq: &Sequence, path: P) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = RvdsHeader {
        frames: seq.len() as u32,
        height: seq.height() as u32,
        width: seq.width() as u32,
        channels: 4,
        pattern: seq.source_pattern,
    };
    write_header(&mut w, &header)?;
    for frame in &seq.frames {
        write_plane(&mut w, frame.data.as_slice().expect("contiguous"))?;
    }
    w.flush()?;
    Ok(())
}

/// Read a packed sequence from an RVDS file. Noise parameters are not part
/// of the container; they travel in manifests or CLI flags.
pub fn read_sequence<P: AsRef<Path>>(path: P) -> Result<Sequence> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r)?;
    if header.channels != 4 {
        return Err(Error::Format(
            "expected a packed (4-channel) sequence, found CFA (1-channel)".into(),
        ));
    }
    if header.frames == 0 {
        return Err(Error::Format("sequence declares zero frames".into()));
    }
    let (h, w) = (header.height as usize, header.width as usize);
    let mut frames = Vec::with_capacity(header.frames as usize);
    for _ in 0..header.frames {
        let samples = read_samples(&mut r, 4 * h * w)?;
        let data = Array3::from_shape_vec((4, h, w), samples).expect("shape checked");
        frames.push(PackedFrame::new(data)?);
    }
    Sequence::new(frames, None, header.pattern)
}

/// Write a list of CFA frames (channels = 1, shared pattern) to an RVDS file.
pub fn write_raw_frames<P: AsRef<Path>>(frames: &[RawFrame], path: P) -> Result<()> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Shape("cannot write an empty frame list".into()))?;
    if frames.iter().any(|f| f.data.dim() != first.data.dim() || f.pattern != first.pattern) {
        return Err(Error::Shape("raw frames must share shape and pattern".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    let header = RvdsHeader {
        frames: frames.len() as u32,
        height: first.height() as u32,
        width: first.width() as u32,
        channels: 1,
        pattern: first.pattern,
    };
    write_header(&mut w, &header)?;
    for frame in frames {
        write_plane(&mut w, frame.data.as_slice().expect("contiguous"))?;
    }
    w.flush()?;
    Ok(())
}

/// Read a list of CFA frames (channels = 1) from an RVDS file.
pub fn read_raw_frames<P: AsRef<Path>>(path: P) -> Result<Vec<RawFrame>> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r)?;
    if header.channels != 1 {
        return Err(Error::Format(
            "expected a CFA (1-channel) file, found a packed sequence".into(),
        ));
    }
    let (h, w) = (header.height as usize, header.width as usize);
    let mut frames = Vec::with_capacity(header.frames as usize);
    for _ in 0..header.frames {
        let samples = read_samples(&mut r, h * w)?;
        let data = Array2::from_shape_vec((h, w), samples).expect("shape checked");
        frames.push(RawFrame::new(header.pattern, data)?);
    }
    Ok(frames)
}
