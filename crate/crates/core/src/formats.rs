//! On-disk image formats.
//!
//! * Normal maps: 16-bit RGB PNG, channel value `round((c + 1) / 2 · 65535)`.
//! * Raw radiance and albedo: 16-bit grayscale PNG, value `round(v · 65535)`.
//! * Float images: PFM, little-endian (scale `-1.0`), rows stored bottom to top.

use std::fs;
use std::io::{BufReader, Cursor};
use std::path::Path;

use crate::error::{Error, Result};
use crate::photometry::{NirImage, NormalMap, Radiance};

pub fn quantize_component(c: f64) -> u16 {
    (((c.clamp(-1.0, 1.0) + 1.0) / 2.0) * 65535.0).round() as u16
}

pub fn dequantize_component(v: u16) -> f64 {
    v as f64 / 65535.0 * 2.0 - 1.0
}

pub fn quantize_unit(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

pub fn dequantize_unit(v: u16) -> f64 {
    v as f64 / 65535.0
}

fn encode_png(width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> std::result::Result<Vec<u8>, png::EncodingError> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, width as u32, height as u32);
        encoder.set_color(color);
        encoder.set_depth(depth);
        let mut writer = encoder.write_header()?;
        writer.write_image_data(data)?;
        writer.finish()?;
    }
    Ok(out)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_png16(path: &Path, width: usize, height: usize, color: png::ColorType, samples: &[u16]) -> Result<()> {
    let bytes: Vec<u8> = samples.iter().flat_map(|s| s.to_be_bytes()).collect();
    let png = encode_png(width, height, color, png::BitDepth::Sixteen, &bytes)
        .map_err(|e| Error::format(path, e.to_string()))?;
    write_bytes(path, &png)
}

pub fn write_rgb8_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let png = encode_png(width, height, png::ColorType::Rgb, png::BitDepth::Eight, rgb)
        .map_err(|e| Error::format(path, e.to_string()))?;
    write_bytes(path, &png)
}

/// Decoded PNG samples widened to 16 bits.
pub struct PngSamples {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub samples: Vec<u16>,
}

pub fn read_png(path: &Path) -> Result<PngSamples> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::format(path, m);
    let mut decoder = png::Decoder::new(BufReader::new(Cursor::new(bytes)));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| bad("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(bad("indexed PNGs are not supported".into())),
    };
    let (width, height) = (info.width as usize, info.height as usize);
    let n = width * height * channels;
    let samples = match info.bit_depth {
        png::BitDepth::Sixteen => buf[..2 * n]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]))
            .collect(),
        png::BitDepth::Eight => buf[..n].iter().map(|&b| u16::from(b) * 257).collect(),
        d => return Err(bad(format!("unsupported bit depth {d:?}"))),
    };
    Ok(PngSamples {
        width,
        height,
        channels,
        samples,
    })
}

pub fn write_normal_png(path: &Path, normals: &NormalMap) -> Result<()> {
    write_normal_components(path, normals.width(), normals.height(), normals.normals())
}

pub fn write_normal_components_png(path: &Path, normals: &EncodedNormals) -> Result<()> {
    write_normal_components(path, normals.width, normals.height, &normals.components)
}

fn write_normal_components(path: &Path, width: usize, height: usize, components: &[[f64; 3]]) -> Result<()> {
    let samples: Vec<u16> = components.iter().flat_map(|n| n.map(quantize_component)).collect();
    write_png16(path, width, height, png::ColorType::Rgb, &samples)
}

/// Stored normal components in `[−1, 1]`, not renormalized.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedNormals {
    pub width: usize,
    pub height: usize,
    pub components: Vec<[f64; 3]>,
}

impl EncodedNormals {
    pub fn to_normal_map(&self) -> Result<NormalMap> {
        Ok(NormalMap::from_vectors(self.width, self.height, &self.components)?.0)
    }
}

pub fn read_normal_png(path: &Path) -> Result<EncodedNormals> {
    let png = read_png(path)?;
    if png.channels < 3 {
        return Err(Error::format(path, "normal map PNG must have RGB channels"));
    }
    let components = png
        .samples
        .chunks_exact(png.channels)
        .map(|s| [dequantize_component(s[0]), dequantize_component(s[1]), dequantize_component(s[2])])
        .collect();
    Ok(EncodedNormals {
        width: png.width,
        height: png.height,
        components,
    })
}

/// Writes values in `[0, 1]` as 16-bit grayscale.
pub fn write_unit_png(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let samples: Vec<u16> = values.iter().map(|&v| quantize_unit(v)).collect();
    write_png16(path, width, height, png::ColorType::Grayscale, &samples)
}

/// Reads a grayscale PNG (8 or 16 bit) into `[0, 1]`; color inputs use the
/// first channel.
pub fn read_unit_png(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let png = read_png(path)?;
    let values = png
        .samples
        .chunks_exact(png.channels)
        .map(|s| dequantize_unit(s[0]))
        .collect();
    Ok((png.width, png.height, values))
}

pub fn write_pfm(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<()> {
    let mut out = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    for row in (0..height).rev() {
        for v in &values[row * width..(row + 1) * width] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_bytes(path, &out)
}

pub fn read_pfm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m.to_string());
    // three whitespace-terminated header tokens: magic, "w h", scale
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PFM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "Pf" {
        return Err(bad("only grayscale PFM (Pf) is supported"));
    }
    let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f32 = fields[3].parse().map_err(|_| bad("bad scale"))?;
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() < 4 * width * height {
        return Err(bad("truncated PFM data"));
    }
    let read = |b: &[u8]| {
        let a = [b[0], b[1], b[2], b[3]];
        if scale < 0.0 {
            f32::from_le_bytes(a)
        } else {
            f32::from_be_bytes(a)
        }
    };
    let mut values = vec![0f32; width * height];
    for (k, chunk) in body.chunks_exact(4).take(width * height).enumerate() {
        let (file_row, col) = (k / width, k % width);
        values[(height - 1 - file_row) * width + col] = read(chunk);
    }
    Ok((width, height, values))
}

/// Loads an NIR image from a grayscale PNG (raw radiance) or PFM
/// (normalized values).
pub fn read_nir(path: &Path) -> Result<NirImage> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pfm") => {
            let (w, h, v) = read_pfm(path)?;
            NirImage::new(w, h, v.into_iter().map(f64::from).collect(), Radiance::Normalized)
        }
        _ => {
            let (w, h, v) = read_unit_png(path)?;
            NirImage::new(w, h, v, Radiance::Raw)
        }
    }
}
