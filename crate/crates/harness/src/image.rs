//! PSNR and 8-bit PPM/PNG image files.

use erm_core::volren::ImageBuffer;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("size mismatch: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Ppm,
    Png,
}

impl ImageFormat {
    /// From the file extension; PPM unless it ends in `.png`.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("png") => ImageFormat::Png,
            _ => ImageFormat::Ppm,
        }
    }
}

pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, ImageError> {
    if a.width != b.width || a.height != b.height {
        return Err(ImageError::SizeMismatch(a.width, a.height, b.width, b.height));
    }
    let n = a.data.len() as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `10 log10(1 / mse)` for unit-range images, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, ImageError> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP)
}

fn quantize(buf: &ImageBuffer) -> Vec<u8> {
    buf.data.iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn dequantize(width: usize, height: usize, bytes: &[u8]) -> ImageBuffer {
    ImageBuffer {
        width,
        height,
        data: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
    }
}

/// Binary PPM (P6, maxval 255).
pub fn encode_ppm(buf: &ImageBuffer) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", buf.width, buf.height).into_bytes();
    out.extend(quantize(buf));
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageBuffer, String> {
    // header: magic, width, height, maxval, separated by whitespace (comments allowed)
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(format!("unsupported magic {}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field `{s}`"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 || w == 0 || h == 0 {
        return Err("only 8-bit images with positive size are supported".into());
    }
    let body = bytes.get(pos + 1..).unwrap_or(&[]);
    if body.len() < w * h * 3 {
        return Err(format!("truncated pixel data: {} of {} bytes", body.len(), w * h * 3));
    }
    Ok(dequantize(w, h, &body[..w * h * 3]))
}

pub fn encode_png(buf: &ImageBuffer) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut out), buf.width as u32, buf.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().expect("in-memory png header");
        w.write_image_data(&quantize(buf)).expect("in-memory png data");
    }
    out
}

pub fn decode_png(bytes: &[u8]) -> Result<ImageBuffer, String> {
    let dec = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = dec.read_info().map_err(|e| e.to_string())?;
    let size = reader.output_buffer_size().ok_or("image too large")?;
    let mut data = vec![0; size];
    let info = reader.next_frame(&mut data).map_err(|e| e.to_string())?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(format!("expected 8-bit RGB, got {:?} {:?}", info.color_type, info.bit_depth));
    }
    Ok(dequantize(info.width as usize, info.height as usize, &data[..info.buffer_size()]))
}

pub fn write_image(buf: &ImageBuffer, path: &Path, format: ImageFormat) -> Result<(), ImageError> {
    let bytes = match format {
        ImageFormat::Ppm => encode_ppm(buf),
        ImageFormat::Png => encode_png(buf),
    };
    fs::write(path, bytes).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a PPM or PNG, chosen by content.
pub fn read_image(path: &Path) -> Result<ImageBuffer, ImageError> {
    let bytes = fs::read(path).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let decoded = if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes)
    } else {
        decode_ppm(&bytes)
    };
    decoded.map_err(|reason| ImageError::Decode {
        path: path.to_path_buf(),
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let z = ImageBuffer::filled(4, 4, [0.0; 3]);
        assert_eq!(psnr(&z, &z).unwrap(), PSNR_CAP);
        assert_eq!(psnr(&z, &ImageBuffer::filled(4, 4, [1.0; 3])).unwrap(), 0.0);
        let half = psnr(&z, &ImageBuffer::filled(4, 4, [0.5; 3])).unwrap();
        assert!((half - 6.0206).abs() < 1e-4);
        assert!(psnr(&z, &ImageBuffer::filled(3, 4, [0.0; 3])).is_err());
    }

    #[test]
    fn ppm_bytes() {
        let mut b = ImageBuffer::new(2, 1);
        b.set(1, 0, [1.0; 3]);
        let mut want = b"P6\n2 1\n255\n".to_vec();
        want.extend([0, 0, 0, 255, 255, 255]);
        assert_eq!(encode_ppm(&b), want);
    }

    #[test]
    fn round_trips_within_a_level() {
        let mut b = ImageBuffer::new(5, 3);
        for y in 0..3 {
            for x in 0..5 {
                b.set(x, y, [x as f64 / 7.3, y as f64 / 2.9, 0.123]);
            }
        }
        for back in [decode_ppm(&encode_ppm(&b)).unwrap(), decode_png(&encode_png(&b)).unwrap()] {
            let err = b.data.iter().zip(&back.data).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
            assert!(err <= 1.0 / 255.0);
        }
    }

    #[test]
    fn truncated_files_fail() {
        let b = ImageBuffer::filled(3, 3, [0.5; 3]);
        let ppm = encode_ppm(&b);
        assert!(decode_ppm(&ppm[..ppm.len() - 1]).is_err());
        assert!(decode_ppm(b"P6\n3").is_err());
        let png = encode_png(&b);
        assert!(decode_png(&png[..png.len() / 2]).is_err());
    }
}
