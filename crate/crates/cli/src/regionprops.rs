//! Labeled PGM images to detections.

use std::collections::BTreeMap;
use std::path::Path;

use trax_core::{Detection, Features, Frame, NodeId};

use crate::error::CliError;

/// A grayscale image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u16>,
}

fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8], CliError> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(CliError::usage("truncated PGM header"));
    }
    Ok(&bytes[start..*pos])
}

fn number(bytes: &[u8], pos: &mut usize) -> Result<usize, CliError> {
    std::str::from_utf8(token(bytes, pos)?)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CliError::usage("bad number in PGM header"))
}

/// Binary (`P5`) PGM, 8- or 16-bit (big-endian).
pub fn parse_pgm(bytes: &[u8]) -> Result<Image, CliError> {
    let mut pos = 0;
    if token(bytes, &mut pos)? != b"P5" {
        return Err(CliError::usage("only binary P5 PGM files are supported"));
    }
    let width = number(bytes, &mut pos)?;
    let height = number(bytes, &mut pos)?;
    let maxval = number(bytes, &mut pos)?;
    if maxval == 0 || maxval > 65535 {
        return Err(CliError::usage(format!("PGM maxval {maxval} out of range")));
    }
    pos += 1;
    let bpp = if maxval > 255 { 2 } else { 1 };
    let n = width * height;
    let data = bytes.get(pos..pos + n * bpp).ok_or_else(|| CliError::usage("truncated PGM data"))?;
    let pixels = if bpp == 2 {
        data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        data.iter().map(|&b| b as u16).collect()
    };
    Ok(Image { width, height, pixels })
}

pub fn write_pgm16(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    for p in &img.pixels {
        out.extend(p.to_be_bytes());
    }
    out
}

pub fn read_pgm(path: &Path) -> Result<Image, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    parse_pgm(&bytes).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

#[derive(Default)]
struct Moments {
    n: f64,
    sx: f64,
    sy: f64,
    sxx: f64,
    syy: f64,
    sxy: f64,
    intensity: f64,
}

/// Region properties of every nonzero label of one frame, ids starting at
/// `first_id` in label order. Without `raw` the intensity is 0.
pub fn regions(labels: &Image, raw: Option<&Image>, frame: Frame, first_id: NodeId) -> Result<Vec<Detection>, CliError> {
    if let Some(r) = raw {
        if (r.width, r.height) != (labels.width, labels.height) {
            return Err(CliError::usage("raw image size differs from the label image"));
        }
    }
    let mut acc: BTreeMap<u16, Moments> = BTreeMap::new();
    for (k, &l) in labels.pixels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let (x, y) = ((k % labels.width) as f64, (k / labels.width) as f64);
        let m = acc.entry(l).or_default();
        m.n += 1.0;
        m.sx += x;
        m.sy += y;
        m.sxx += x * x;
        m.syy += y * y;
        m.sxy += x * y;
        if let Some(r) = raw {
            m.intensity += r.pixels[k] as f64;
        }
    }
    let mut out = Vec::with_capacity(acc.len());
    for (k, (label, m)) in acc.into_iter().enumerate() {
        let (cx, cy) = (m.sx / m.n, m.sy / m.n);
        let mut d = Detection::point(first_id + k as NodeId, frame, cx, cy).with_features(Features {
            area: m.n,
            intensity: m.intensity / m.n,
            ixx: (m.sxx / m.n - cx * cx).max(0.0),
            iyy: (m.syy / m.n - cy * cy).max(0.0),
            ixy: m.sxy / m.n - cx * cy,
        });
        d.mask_ref = Some(label as u32);
        out.push(d);
    }
    Ok(out)
}

/// One label image per frame, in the given order.
pub fn regionprops(labels: &[impl AsRef<Path>], raw: Option<&[impl AsRef<Path>]>) -> Result<Vec<Detection>, CliError> {
    if let Some(r) = raw {
        if r.len() != labels.len() {
            return Err(CliError::usage("need one raw image per label image"));
        }
    }
    let mut out = Vec::new();
    for (t, path) in labels.iter().enumerate() {
        let img = read_pgm(path.as_ref())?;
        let raw_img = raw.map(|r| read_pgm(r[t].as_ref())).transpose()?;
        out.extend(regions(&img, raw_img.as_ref(), t as Frame, out.len() as NodeId + 1)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_region() {
        let mut labels = Image {
            width: 6,
            height: 5,
            pixels: vec![0; 30],
        };
        let mut raw = labels.clone();
        for y in 1..4 {
            for x in 2..5 {
                labels.pixels[y * 6 + x] = 300;
                raw.pixels[y * 6 + x] = 1000;
            }
        }
        labels.pixels[0] = 7;
        let img = parse_pgm(&write_pgm16(&labels)).unwrap();
        assert_eq!(img, labels);
        let r = regions(&img, Some(&raw), 0, 1).unwrap();
        assert_eq!(r.len(), 2);
        let sq = &r[1];
        assert_eq!(sq.mask_ref, Some(300));
        assert_eq!(sq.pos, [3.0, 2.0]);
        let f = sq.features.unwrap();
        assert_eq!(f.area, 9.0);
        assert_eq!(f.intensity, 1000.0);
        // Variance of {-1, 0, 1}.
        assert!((f.ixx - 2.0 / 3.0).abs() < 1e-12);
        assert!((f.iyy - 2.0 / 3.0).abs() < 1e-12);
        assert!(f.ixy.abs() < 1e-12);
    }

    #[test]
    fn rejects_ascii_pgm() {
        assert!(parse_pgm(b"P2\n1 1\n255\n0\n").is_err());
        assert!(parse_pgm(b"P5\n2 2\n65535\n\0\0").is_err());
    }
}
