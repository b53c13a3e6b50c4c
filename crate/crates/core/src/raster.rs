//! Grayscale raster I/O: PGM (P2/P5, 8 or 16 bit) and grayscale PNG.

use std::fs::{self, File};
use std::io::BufReader;
use std::path::Path;

use crate::domain::GrayImage;
use crate::error::{Error, Result};

/// A decoded raster with its sample ceiling (255 or 65535 for PNG, maxval for PGM).
#[derive(Clone, Debug)]
pub struct Raster {
    pub image: GrayImage,
    pub max_value: u32,
}

/// Reads a raster as linear intensities in sample units.
pub fn read_raster(path: &Path) -> Result<Raster> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("png") => read_png(path),
        _ => read_pgm(path),
    }
}

/// Reads a raster and rescales it to [0, 1] by its sample ceiling.
pub fn read_normalized(path: &Path) -> Result<GrayImage> {
    let r = read_raster(path)?;
    let scale = f64::from(r.max_value);
    let pixels = r.image.pixels().iter().map(|&p| (p / scale).min(1.0)).collect();
    GrayImage::new_normalized(r.image.width(), r.image.height(), pixels)
}

fn raster_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Raster {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn read_pgm(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|m| raster_err(path, m))
}

fn decode_pgm(bytes: &[u8]) -> std::result::Result<Raster, String> {
    let mut pos = 0usize;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let number = |s: String| s.parse::<usize>().map_err(|_| format!("bad header field `{s}`"));
    let width = number(token()?)?;
    let height = number(token()?)?;
    let max_value = number(token()?)?;
    if max_value == 0 || max_value > 65535 {
        return Err(format!("unsupported maxval {max_value}"));
    }
    let n = width * height;
    let pixels: Vec<f64> = match magic.as_str() {
        "P2" => {
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                let v = number(token()?)?;
                out.push(v as f64);
            }
            out
        }
        "P5" => {
            // exactly one whitespace byte separates the header from the samples
            let data = &bytes[(pos + 1).min(bytes.len())..];
            if max_value < 256 {
                if data.len() < n {
                    return Err("truncated pixel data".into());
                }
                data[..n].iter().map(|&b| f64::from(b)).collect()
            } else {
                if data.len() < 2 * n {
                    return Err("truncated pixel data".into());
                }
                data[..2 * n]
                    .chunks_exact(2)
                    .map(|c| f64::from(u16::from_be_bytes([c[0], c[1]])))
                    .collect()
            }
        }
        other => return Err(format!("unsupported PGM magic `{other}`")),
    };
    let image = GrayImage::new(width, height, pixels).map_err(|e| e.to_string())?;
    Ok(Raster {
        image,
        max_value: max_value as u32,
    })
}

pub fn read_png(path: &Path) -> Result<Raster> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| raster_err(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| raster_err(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(raster_err(path, format!("not grayscale: {other:?}"))),
    };
    let (pixels, max_value) = match info.bit_depth {
        png::BitDepth::Sixteen => (
            buf[..info.buffer_size()]
                .chunks_exact(2 * channels)
                .map(|c| f64::from(u16::from_be_bytes([c[0], c[1]])))
                .collect::<Vec<_>>(),
            65535,
        ),
        _ => (
            buf[..info.buffer_size()]
                .chunks_exact(channels)
                .map(|c| f64::from(c[0]))
                .collect::<Vec<_>>(),
            255,
        ),
    };
    let image = GrayImage::new(w, h, pixels).map_err(|e| raster_err(path, e.to_string()))?;
    Ok(Raster { image, max_value })
}

/// Writes integer samples as binary PGM; 16-bit when `max_value > 255`.
pub fn write_pgm(path: &Path, width: usize, height: usize, samples: &[u16], max_value: u16) -> Result<()> {
    if samples.len() != width * height {
        return Err(Error::InvalidImage(format!(
            "{} samples for a {width}x{height} image",
            samples.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n{max_value}\n").into_bytes();
    if max_value > 255 {
        for s in samples {
            out.extend_from_slice(&s.to_be_bytes());
        }
    } else {
        out.extend(samples.iter().map(|&s| s.min(255) as u8));
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes a [0, 1] image as 16-bit PGM.
pub fn write_normalized_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let samples: Vec<u16> = img
        .pixels()
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    write_pgm(path, img.width(), img.height(), &samples, 65535)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_pgm_with_comments() {
        let r = decode_pgm(b"P2\n# comment\n3 1\n255\n0 128 255\n").unwrap();
        assert_eq!(r.image.pixels(), &[0.0, 128.0, 255.0]);
        assert_eq!(r.max_value, 255);
    }

    #[test]
    fn binary_pgm_round_trip_8_and_16_bit() {
        let dir = tempfile::tempdir().unwrap();
        let p8 = dir.path().join("a.pgm");
        write_pgm(&p8, 2, 2, &[0, 10, 200, 255], 255).unwrap();
        assert_eq!(read_raster(&p8).unwrap().image.pixels(), &[0.0, 10.0, 200.0, 255.0]);

        let p16 = dir.path().join("b.pgm");
        write_pgm(&p16, 3, 1, &[0, 1000, 65535], 65535).unwrap();
        let r = read_raster(&p16).unwrap();
        assert_eq!(r.image.pixels(), &[0.0, 1000.0, 65535.0]);
        assert_eq!(r.max_value, 65535);
    }

    #[test]
    fn normalized_pgm_round_trip_is_close() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.pgm");
        let img = GrayImage::new_normalized(2, 1, vec![0.25, 1.0]).unwrap();
        write_normalized_pgm(&p, &img).unwrap();
        let back = read_normalized(&p).unwrap();
        assert!((back.pixels()[0] - 0.25).abs() < 1e-4);
        assert_eq!(back.pixels()[1], 1.0);
    }

    #[test]
    fn grayscale_png_is_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        {
            let file = File::create(&p).unwrap();
            let mut enc = png::Encoder::new(std::io::BufWriter::new(file), 2, 1);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[7, 250]).unwrap();
        }
        let r = read_raster(&p).unwrap();
        assert_eq!(r.image.pixels(), &[7.0, 250.0]);
        assert_eq!(r.max_value, 255);
    }

    #[test]
    fn garbage_is_an_error() {
        assert!(decode_pgm(b"P9\n1 1\n255\n0").is_err());
        assert!(decode_pgm(b"P5\n4 4\n255\n\x00").is_err());
    }
}
