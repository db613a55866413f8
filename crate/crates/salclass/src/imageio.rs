//! Image file I/O: binary PGM (P5) read/write and PNG via the `image`
//! crate. Maps are exported as 8-bit PGM and 16-bit grayscale PNG, values
//! scaled from [0,1] to the integer range.

use crate::error::{Error, Result};
use crate::saliency::SaliencyMap;
use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;

/// Writes a [0,1] map as 8-bit binary PGM.
pub fn write_pgm(path: &Path, map: &SaliencyMap) -> Result<()> {
    let mut buf = Vec::with_capacity(map.values.len() + 32);
    write!(buf, "P5\n{} {}\n255\n", map.w, map.h)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    for &v in &map.values {
        buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads an 8-bit binary PGM into a [0,1] map.
pub fn read_pgm(path: &Path) -> Result<SaliencyMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let err = |msg: &str| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        msg: msg.to_string(),
    };
    // header: magic, width, height, maxval, then a single whitespace byte
    let mut fields = Vec::new();
    let mut pos = 0usize;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(&bytes[start..pos]);
    }
    if fields.len() < 4 || fields[0] != b"P5" {
        return Err(err("not a binary PGM (P5) file"));
    }
    let parse = |b: &[u8]| -> Result<usize> {
        std::str::from_utf8(b)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err("bad header field"))
    };
    let w = parse(fields[1])?;
    let h = parse(fields[2])?;
    let maxval = parse(fields[3])?;
    if maxval != 255 {
        return Err(err("only maxval 255 supported"));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + w * h {
        return Err(err("truncated pixel data"));
    }
    let values = bytes[pos..pos + w * h]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    SaliencyMap::new(h, w, values)
}

/// Writes a [0,1] map as 16-bit grayscale PNG.
pub fn write_png16(path: &Path, map: &SaliencyMap) -> Result<()> {
    let data: Vec<u16> = map
        .values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let img = image::ImageBuffer::<image::Luma<u16>, _>::from_vec(map.w as u32, map.h as u32, data)
        .expect("buffer size matches dimensions");
    img.save(path)
        .map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::Other, e),
        })
}

/// Writes an RGB image tensor `[3,H,W]` with values in [0,1] as 8-bit PNG.
pub fn write_rgb_png(path: &Path, t: &Tensor) -> Result<()> {
    if t.shape.len() != 3 || t.shape[0] != 3 {
        return Err(Error::Shape(format!(
            "write_rgb_png expects [3,H,W], got {:?}",
            t.shape
        )));
    }
    let (h, w) = (t.shape[1], t.shape[2]);
    let plane = h * w;
    let mut buf = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            buf.push((t.data[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let img = image::RgbImage::from_vec(w as u32, h as u32, buf).expect("sized buffer");
    img.save(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: std::io::Error::new(std::io::ErrorKind::Other, e),
    })
}

/// Reads an image file (PNG or PGM) into an RGB tensor `[3,H,W]` in [0,1].
pub fn read_rgb(path: &Path) -> Result<Tensor> {
    if path.extension().map(|e| e == "pgm").unwrap_or(false) {
        let m = read_pgm(path)?;
        let mut data = Vec::with_capacity(3 * m.values.len());
        for _ in 0..3 {
            data.extend_from_slice(&m.values);
        }
        return Tensor::new(&[3, m.h, m.w], data);
    }
    let img = image::open(path)
        .map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::Other, e),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for (p, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + p] = px.0[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}
