//! 8-bit PNG codec for RGB images and single-channel label maps.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use png::{BitDepth, ColorType, Decoder, Encoder};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, LabelMap};

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(width: usize, height: usize, color: ColorType, data: &[u8]) -> std::result::Result<Vec<u8>, png::EncodingError> {
    let mut bytes = Vec::new();
    {
        let mut enc = Encoder::new(&mut bytes, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(data)?;
    }
    Ok(bytes)
}

pub fn encode_rgb(img: &ImageTensor) -> Vec<u8> {
    let (h, w) = img.dims();
    let mut raw = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            raw.extend(img.pixel(y, x).map(quantize));
        }
    }
    encode(w, h, ColorType::Rgb, &raw).expect("in-memory PNG encoding")
}

pub fn encode_rgb8(h: usize, w: usize, raw: &[u8]) -> Vec<u8> {
    encode(w, h, ColorType::Rgb, raw).expect("in-memory PNG encoding")
}

pub fn encode_label(label: &LabelMap) -> Vec<u8> {
    let (h, w) = label.dims();
    encode(w, h, ColorType::Grayscale, label.data()).expect("in-memory PNG encoding")
}

fn decode(path: &Path) -> Result<(usize, usize, ColorType, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut reader = Decoder::new(Cursor::new(bytes))
        .read_info()
        .map_err(|e| Error::decode(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::decode(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::decode(path, e.to_string()))?;
    if info.bit_depth != BitDepth::Eight {
        return Err(Error::decode(path, format!("expected 8-bit samples, found {:?}", info.bit_depth)));
    }
    buf.truncate(info.buffer_size());
    Ok((info.height as usize, info.width as usize, info.color_type, buf))
}

/// Reads an RGB (or RGBA, alpha dropped) PNG into `[0, 1]` floats.
pub fn read_image(path: &Path) -> Result<ImageTensor> {
    let (h, w, color, buf) = decode(path)?;
    let stride = match color {
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        other => return Err(Error::decode(path, format!("expected an RGB image, found {other:?}"))),
    };
    let mut data = vec![0.0; 3 * h * w];
    for (p, px) in buf.chunks_exact(stride).enumerate() {
        for c in 0..3 {
            data[c * h * w + p] = px[c] as f64 / 255.0;
        }
    }
    ImageTensor::new(h, w, data)
}

/// Reads a single-channel PNG of class indices.
pub fn read_label(path: &Path) -> Result<LabelMap> {
    let (h, w, color, buf) = decode(path)?;
    if color != ColorType::Grayscale {
        return Err(Error::decode(path, format!("expected a grayscale label map, found {color:?}")));
    }
    LabelMap::new(h, w, buf)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_image(path: &Path, img: &ImageTensor) -> Result<()> {
    write_bytes(path, &encode_rgb(img))
}

pub fn write_label(path: &Path, label: &LabelMap) -> Result<()> {
    write_bytes(path, &encode_label(label))
}
