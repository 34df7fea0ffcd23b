//! Synthetic detector frames and the `ICEM` measurement file format.
//!
//! A frame is a square lattice of Gaussian peaks (lattice constant `width/8`
//! pixels on both axes, sigma one sixth of that) sitting on a flat
//! background, shifted by the probe position and topped with seeded noise.
//! Each pixel takes the nearest lattice peak only.
//!
//! File layout: `b"ICEM"`, version byte `1`, big-endian `u32` width and
//! height, then `width * height` big-endian `u16` pixels in row-major order.

use crate::instrument::{ProbePosition, ScanParameters};
use crate::wire::ErrorInfo;

pub const MAGIC: &[u8; 4] = b"ICEM";
pub const VERSION: u8 = 1;
pub const BACKGROUND: f64 = 1000.0;
pub const AMPLITUDE: f64 = 40000.0;
const HEADER_LEN: usize = 4 + 1 + 4 + 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: u32,
    pub height: u32,
    /// Row-major intensities, `height * width` long.
    pub pixels: Vec<u16>,
}

impl Frame {
    pub fn pixel(&self, col: u32, row: u32) -> u16 {
        self.pixels[(row * self.width + col) as usize]
    }

    /// Pixels as big-endian bytes, the payload of a measurement file.
    pub fn pixel_bytes(&self) -> Vec<u8> {
        self.pixels.iter().flat_map(|p| p.to_be_bytes()).collect()
    }
}

/// Output `index + 1` of a SplitMix64 stream started at `seed`.
pub fn splitmix64(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice_offset(coord: f64, lattice: f64) -> f64 {
    let d = coord.rem_euclid(lattice);
    d.min(lattice - d)
}

pub fn generate_frame(
    params: &ScanParameters,
    position: ProbePosition,
) -> Result<Frame, ErrorInfo> {
    params.validate()?;
    ProbePosition::new(position.x, position.y)?;
    let (w, h) = (params.width, params.height);
    let lattice = w as f64 / 8.0;
    let sigma = lattice / 6.0;
    let two_sigma_sq = 2.0 * sigma * sigma;
    let shift_x = position.x * w as f64;
    let shift_y = position.y * h as f64;
    let noisy = params.pixel_count() > 1;

    let mut pixels = Vec::with_capacity(params.pixel_count() as usize);
    for row in 0..h {
        let dy = lattice_offset(row as f64 + shift_y, lattice);
        for col in 0..w {
            let dx = lattice_offset(col as f64 + shift_x, lattice);
            let peak = AMPLITUDE * (-(dx * dx + dy * dy) / two_sigma_sq).exp();
            let index = row as u64 * w as u64 + col as u64;
            let noise = if noisy {
                splitmix64(params.seed, index) % 256
            } else {
                0
            };
            let value = (BACKGROUND + peak).round() as u64 + noise;
            pixels.push(value.min(u16::MAX as u64) as u16);
        }
    }
    Ok(Frame {
        width: w,
        height: h,
        pixels,
    })
}

pub fn encode_measurement(frame: &Frame) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + frame.pixels.len() * 2);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&frame.width.to_be_bytes());
    out.extend_from_slice(&frame.height.to_be_bytes());
    out.extend(frame.pixel_bytes());
    out
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MeasurementError {
    #[error("not an ICEM file")]
    BadMagic,
    #[error("unsupported ICEM version {0}")]
    Version(u8),
    #[error("file is {actual} bytes, header implies {expected}")]
    Length { expected: u64, actual: u64 },
}

pub fn decode_measurement(bytes: &[u8]) -> Result<Frame, MeasurementError> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(MeasurementError::BadMagic);
    }
    if bytes[4] != VERSION {
        return Err(MeasurementError::Version(bytes[4]));
    }
    let width = u32::from_be_bytes(bytes[5..9].try_into().unwrap());
    let height = u32::from_be_bytes(bytes[9..13].try_into().unwrap());
    let expected = HEADER_LEN as u64 + width as u64 * height as u64 * 2;
    if bytes.len() as u64 != expected {
        return Err(MeasurementError::Length {
            expected,
            actual: bytes.len() as u64,
        });
    }
    let pixels = bytes[HEADER_LEN..]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok(Frame {
        width,
        height,
        pixels,
    })
}
