//! 8-bit grayscale image files and resampling.

use std::fs;
use std::io::{BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit grayscale raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }
}

fn decode_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Parses a binary PGM (`P5`, maxval ≤ 255). Comments in the header are skipped.
pub fn parse_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let mut pos = 0;
    let mut token = || -> Result<&[u8]> {
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
            return Err(decode_err(path, "truncated PGM header"));
        }
        Ok(&bytes[start..pos])
    };
    if token()? != b"P5" {
        return Err(decode_err(path, "not a binary PGM (P5)"));
    }
    let mut num = |what: &str| -> Result<usize> {
        let t = token()?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| decode_err(path, format!("bad {what} in PGM header")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(decode_err(path, format!("unsupported PGM maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let len = width
        .checked_mul(height)
        .ok_or_else(|| decode_err(path, "PGM extent overflows"))?;
    let raster = bytes
        .get(start..start + len)
        .ok_or_else(|| decode_err(path, "truncated PGM raster"))?;
    let pixels = if maxval == 255 {
        raster.to_vec()
    } else {
        raster
            .iter()
            .map(|&v| ((v.min(maxval as u8) as usize * 255 + maxval / 2) / maxval) as u8)
            .collect()
    };
    Ok(GrayImage {
        width,
        height,
        pixels,
    })
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn write_pgm(img: &GrayImage, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_pgm(img)).map_err(|e| Error::io(path, e))
}

/// Decodes a PNG to 8-bit gray. Palette and low bit depths are expanded, 16-bit
/// samples keep their high byte, alpha is dropped and colour is reduced to luma.
pub fn read_png(path: &Path) -> Result<GrayImage> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| decode_err(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| decode_err(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let data = &buf[..info.buffer_size()];
    let channels = info.color_type.samples();
    let pixels = match info.color_type {
        png::ColorType::Grayscale => data.to_vec(),
        png::ColorType::GrayscaleAlpha => data.chunks_exact(2).map(|p| p[0]).collect(),
        png::ColorType::Rgb | png::ColorType::Rgba => data
            .chunks_exact(channels)
            .map(|p| {
                let y = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
                y.round().clamp(0.0, 255.0) as u8
            })
            .collect(),
        png::ColorType::Indexed => return Err(decode_err(path, "palette was not expanded")),
    };
    GrayImage::new(w, h, pixels)
}

pub fn write_png(img: &GrayImage, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(file, img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| decode_err(path, e.to_string()))?;
    writer
        .write_image_data(&img.pixels)
        .map_err(|e| decode_err(path, e.to_string()))
}

/// Reads a `.pgm` or `.png` file by extension.
pub fn read_gray(path: &Path) -> Result<GrayImage> {
    match extension(path).as_deref() {
        Some("pgm") => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            parse_pgm(&bytes, path)
        }
        Some("png") => read_png(path),
        _ => Err(decode_err(path, "unsupported image extension")),
    }
}

pub(crate) fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
}

/// Half-pixel-centred bilinear resampling of a plane, clamping at the edges.
pub fn resize_bilinear(src: &[f32], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f32> {
    let taps = |s: usize, d: usize| -> Vec<(usize, usize, f32)> {
        let scale = s as f64 / d as f64;
        (0..d)
            .map(|o| {
                let x = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (x.floor() as usize).min(s - 1);
                let i1 = (i0 + 1).min(s - 1);
                (i0, i1, (x - i0 as f64) as f32)
            })
            .collect()
    };
    let (tx, ty) = (taps(sw, dw), taps(sh, dh));
    let mut out = Vec::with_capacity(dw * dh);
    for &(y0, y1, fy) in &ty {
        let (r0, r1) = (&src[y0 * sw..(y0 + 1) * sw], &src[y1 * sw..(y1 + 1) * sw]);
        for &(x0, x1, fx) in &tx {
            let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
            let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
            out.push(top + (bot - top) * fy);
        }
    }
    out
}

/// Nearest-neighbour resampling: output `o` reads source `floor((o + 0.5) · s / d)`.
pub fn resize_nearest<T: Copy>(src: &[T], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<T> {
    let pick = |o: usize, s: usize, d: usize| (((2 * o + 1) * s) / (2 * d)).min(s - 1);
    let mut out = Vec::with_capacity(dw * dh);
    for oy in 0..dh {
        let row = &src[pick(oy, sh, dh) * sw..];
        out.extend((0..dw).map(|ox| row[pick(ox, sw, dw)]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_with_comments() {
        let img = GrayImage::new(3, 2, vec![0, 10, 20, 30, 40, 255]).unwrap();
        let bytes = encode_pgm(&img);
        assert_eq!(parse_pgm(&bytes, Path::new("x.pgm")).unwrap(), img);
        let mut commented = b"P5\n# made by hand\n3 2\n# another\n255\n".to_vec();
        commented.extend_from_slice(&img.pixels);
        assert_eq!(parse_pgm(&commented, Path::new("x.pgm")).unwrap(), img);
    }

    #[test]
    fn pgm_rejects_bad_input() {
        let p = Path::new("bad.pgm");
        assert!(parse_pgm(b"P2\n1 1\n255\n0", p).is_err());
        assert!(parse_pgm(b"P5\n2 2\n255\n\x00\x01", p).is_err());
        assert!(parse_pgm(b"P5\n1 1\n65535\n\x00\x00", p).is_err());
        assert!(parse_pgm(b"P5\n1", p).is_err());
    }

    #[test]
    fn pgm_low_maxval_scales_to_255() {
        let img = parse_pgm(b"P5\n2 1\n15\n\x00\x0f", Path::new("m.pgm")).unwrap();
        assert_eq!(img.pixels, vec![0, 255]);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = GrayImage::new(4, 3, (0..12).map(|v| v * 20).collect()).unwrap();
        write_png(&img, &path).unwrap();
        assert_eq!(read_gray(&path).unwrap(), img);
    }

    #[test]
    fn bilinear_preserves_constants_and_identity() {
        let src = vec![0.3f32; 15];
        assert!(resize_bilinear(&src, 5, 3, 8, 7).iter().all(|&v| (v - 0.3).abs() < 1e-6));
        let ramp: Vec<f32> = (0..12).map(|v| v as f32).collect();
        assert_eq!(resize_bilinear(&ramp, 4, 3, 4, 3), ramp);
    }

    #[test]
    fn bilinear_half_pixel_upsample() {
        assert_eq!(resize_bilinear(&[0.0, 1.0], 2, 1, 4, 1), vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn nearest_downsample_picks_centres() {
        let src: Vec<u8> = (0..16).collect();
        assert_eq!(resize_nearest(&src, 4, 4, 2, 2), vec![5, 7, 13, 15]);
        assert_eq!(resize_nearest(&[1u8, 2], 2, 1, 4, 1), vec![1, 1, 2, 2]);
    }
}
