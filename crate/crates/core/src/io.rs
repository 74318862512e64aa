//! On-disk formats: 8-bit RGB PNG for images and a small binary container
//! for feature grids and masks.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! offset 0   magic  b"FGRD" | b"BMSK"
//! offset 4   u32    rows
//! offset 8   u32    cols
//! offset 12  u32    dim   (1 for masks)
//! offset 16  payload: rows*cols*dim f32 LE, or ceil(rows*cols/8) bytes of
//!            row-major bits, least significant bit first
//! ```

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{GraftError, Result};
use crate::grid::{BinaryMask, FeatureGrid, PixelImage};

pub const FEATURE_MAGIC: &[u8; 4] = b"FGRD";
pub const MASK_MAGIC: &[u8; 4] = b"BMSK";
pub const HEADER_LEN: usize = 16;

fn header(magic: &[u8; 4], rows: usize, cols: usize, dim: usize) -> Result<[u8; HEADER_LEN]> {
    let mut out = [0u8; HEADER_LEN];
    out[..4].copy_from_slice(magic);
    for (slot, value) in [rows, cols, dim].into_iter().enumerate() {
        let v = u32::try_from(value)
            .map_err(|_| GraftError::Format(format!("dimension {value} exceeds u32")))?;
        out[4 + slot * 4..8 + slot * 4].copy_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn parse_header(bytes: &[u8], magic: &[u8; 4]) -> Result<(usize, usize, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(GraftError::Format(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != magic {
        return Err(GraftError::Format(format!(
            "bad magic {:?}, expected {:?}",
            &bytes[..4],
            std::str::from_utf8(magic).unwrap_or("?")
        )));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + i * 4..8 + i * 4].try_into().unwrap()) as usize;
    Ok((word(0), word(1), word(2)))
}

pub fn encode_features(grid: &FeatureGrid) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + grid.data().len() * 4);
    out.extend_from_slice(&header(FEATURE_MAGIC, grid.rows(), grid.cols(), grid.dim())?);
    for v in grid.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureGrid> {
    let (rows, cols, dim) = parse_header(bytes, FEATURE_MAGIC)?;
    let payload = &bytes[HEADER_LEN..];
    let expected = rows * cols * dim * 4;
    if payload.len() != expected {
        return Err(GraftError::Format(format!(
            "payload has {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureGrid::new(rows, cols, dim, data)
}

pub fn encode_mask(mask: &BinaryMask) -> Result<Vec<u8>> {
    let n = mask.rows() * mask.cols();
    let mut out = Vec::with_capacity(HEADER_LEN + n.div_ceil(8));
    out.extend_from_slice(&header(MASK_MAGIC, mask.rows(), mask.cols(), 1)?);
    let mut packed = vec![0u8; n.div_ceil(8)];
    for i in mask.ones_indices() {
        packed[i / 8] |= 1 << (i % 8);
    }
    out.extend_from_slice(&packed);
    Ok(out)
}

pub fn decode_mask(bytes: &[u8]) -> Result<BinaryMask> {
    let (rows, cols, dim) = parse_header(bytes, MASK_MAGIC)?;
    if dim != 1 {
        return Err(GraftError::Format(format!("mask dim must be 1, got {dim}")));
    }
    let n = rows * cols;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != n.div_ceil(8) {
        return Err(GraftError::Format(format!(
            "mask payload has {} bytes, expected {}",
            payload.len(),
            n.div_ceil(8)
        )));
    }
    let bits = (0..n).map(|i| payload[i / 8] >> (i % 8) & 1 == 1).collect();
    BinaryMask::new(rows, cols, bits)
}

pub fn write_features(path: &Path, grid: &FeatureGrid) -> Result<()> {
    std::fs::write(path, encode_features(grid)?)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureGrid> {
    decode_features(&std::fs::read(path)?)
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    std::fs::write(path, encode_mask(mask)?)?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    decode_mask(&std::fs::read(path)?)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_png(image: &PixelImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, image.width() as u32, image.height() as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header()?;
        let bytes: Vec<u8> = image.data().iter().map(|&v| quantize(v)).collect();
        writer.write_image_data(&bytes)?;
    }
    Ok(out)
}

pub fn decode_png<R: Read>(reader: R) -> Result<PixelImage> {
    let mut decoder = png::Decoder::new(reader);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(GraftError::Format(format!("unsupported png color type {other:?}"))),
    };
    let mut data = Vec::with_capacity(w * h * 3);
    for px in buf[..w * h * stride].chunks_exact(stride) {
        if stride >= 3 {
            data.extend(px[..3].iter().map(|&b| b as f32 / 255.0));
        } else {
            data.extend(std::iter::repeat_n(px[0] as f32 / 255.0, 3));
        }
    }
    PixelImage::new(w, h, data)
}

pub fn write_png(path: &Path, image: &PixelImage) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&encode_png(image)?)?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<PixelImage> {
    decode_png(File::open(path)?)
}
