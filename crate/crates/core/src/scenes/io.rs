//! 8-bit grayscale PNG and binary PGM (P5) reading and writing.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};

use super::raster::{BinaryMask, GrayImage};

const PNG_MAGIC: &[u8] = b"\x89PNG";

fn parse_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        reason: reason.into(),
    }
}

pub fn encode_png(img: &GrayImage) -> Result<Vec<u8>> {
    encode_png_depth(img.width, img.height, png::BitDepth::Eight, &img.pixels)
}

fn encode_png_depth(
    width: usize,
    height: usize,
    depth: png::BitDepth,
    data: &[u8],
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(depth);
        let mut w = enc
            .write_header()
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        w.write_image_data(data)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    Ok(out)
}

/// 1-bit grayscale PNG.
pub fn encode_mask_png(mask: &BinaryMask) -> Result<Vec<u8>> {
    let stride = mask.width.div_ceil(8);
    let mut packed = vec![0u8; stride * mask.height];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                packed[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    encode_png_depth(mask.width, mask.height, png::BitDepth::One, &packed)
}

/// Decodes a grayscale PNG of bit depth 1, 2, 4 or 8 into 8-bit values.
pub fn decode_png(bytes: &[u8]) -> Result<GrayImage> {
    if !bytes.starts_with(PNG_MAGIC) {
        return Err(parse_err(0, "missing PNG signature"));
    }
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| parse_err(0, format!("PNG header: {e}")))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth == png::BitDepth::Sixteen {
        return Err(parse_err(
            0,
            format!(
                "unsupported PNG layout {:?}/{:?}, expected 8-bit grayscale",
                info.color_type, info.bit_depth
            ),
        ));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| parse_err(0, "PNG dimensions overflow"))?;
    let mut buf = vec![0; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| parse_err(0, format!("PNG data: {e}")))?;
    buf.truncate(frame.buffer_size());
    GrayImage::from_pixels(frame.width as usize, frame.height as usize, buf)
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

struct PgmCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl PgmCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(start, format!("{what} out of range")))
    }
}

/// Parses a binary PGM and returns the raw samples with their maximum value.
pub fn decode_pgm_raw(bytes: &[u8]) -> Result<(usize, usize, u16, Vec<u16>)> {
    if !bytes.starts_with(b"P5") {
        return Err(parse_err(0, "missing P5 magic"));
    }
    let mut cur = PgmCursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let max_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(parse_err(
            max_at,
            format!("maxval {maxval} outside 1..=65535"),
        ));
    }
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(parse_err(
            cur.pos,
            "expected single whitespace before raster",
        ));
    }
    cur.pos += 1;
    let wide = maxval > 255;
    let need = width * height * if wide { 2 } else { 1 };
    let data = &bytes[cur.pos..];
    if data.len() < need {
        return Err(parse_err(
            bytes.len(),
            format!("raster truncated: need {need} bytes, have {}", data.len()),
        ));
    }
    let samples: Vec<u16> = if wide {
        data[..need]
            .chunks(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    } else {
        data[..need].iter().map(|&b| u16::from(b)).collect()
    };
    for (i, &s) in samples.iter().enumerate() {
        if usize::from(s) > maxval {
            let off = cur.pos + if wide { 2 * i } else { i };
            return Err(parse_err(
                off,
                format!("sample {s} exceeds maxval {maxval}"),
            ));
        }
    }
    Ok((width, height, maxval as u16, samples))
}

/// Decodes a PGM, rescaling samples to 8 bits.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let (w, h, maxval, samples) = decode_pgm_raw(bytes)?;
    let m = u32::from(maxval);
    let pixels = samples
        .iter()
        .map(|&s| ((u32::from(s) * 255 + m / 2) / m) as u8)
        .collect();
    GrayImage::from_pixels(w, h, pixels)
}

pub fn decode_image(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.starts_with(PNG_MAGIC) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P5") {
        decode_pgm(bytes)
    } else {
        Err(parse_err(
            0,
            "unrecognized image format (expected PNG or binary PGM)",
        ))
    }
}

/// Decodes a mask; only pure black and pure white samples are accepted.
pub fn decode_mask(bytes: &[u8]) -> Result<BinaryMask> {
    let (width, height, values, maxval, data_offset, sample_width): (
        usize,
        usize,
        Vec<u16>,
        u16,
        usize,
        usize,
    ) = if bytes.starts_with(b"P5") {
        let (w, h, maxval, samples) = decode_pgm_raw(bytes)?;
        let width = if maxval > 255 { 2 } else { 1 };
        let offset = bytes.len() - w * h * width;
        (w, h, samples, maxval, offset, width)
    } else {
        let img = decode_image(bytes)?;
        (
            img.width,
            img.height,
            img.pixels.iter().map(|&p| u16::from(p)).collect(),
            255,
            0,
            1,
        )
    };
    let mut bits = Vec::with_capacity(values.len());
    for (i, &v) in values.iter().enumerate() {
        if v != 0 && v != maxval {
            return Err(parse_err(
                data_offset + i * sample_width,
                format!(
                    "mask is not binary: sample {v} at pixel {i} (maxval {maxval}); \
                     threshold the image first, e.g. set samples >= {} to {maxval} and the rest to 0",
                    maxval / 2 + 1
                ),
            ));
        }
        bits.push(v == maxval);
    }
    BinaryMask::from_bits(width, height, bits)
}

pub fn load_image(path: &Path) -> Result<GrayImage> {
    decode_image(&fs::read(path)?)
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    decode_mask(&fs::read(path)?)
}

pub fn save_png(path: &Path, img: &GrayImage) -> Result<()> {
    fs::write(path, encode_png(img)?)?;
    Ok(())
}

/// Writes a mask as PGM when the extension is `.pgm`, otherwise as 1-bit PNG.
pub fn save_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => encode_pgm(&mask.to_image()),
        _ => encode_mask_png(mask)?,
    };
    fs::write(path, bytes)?;
    Ok(())
}
