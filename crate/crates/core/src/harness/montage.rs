//! Binary PGM (`P5`) montages of 32 profiles in a 4 x 8 grid.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::simulate::{CrackProfile, PROFILE_H, PROFILE_W};

pub const MONTAGE_ROWS: usize = 4;
pub const MONTAGE_COLS: usize = 8;
pub const MONTAGE_TILES: usize = MONTAGE_ROWS * MONTAGE_COLS;
pub const SEPARATOR: usize = 2;
pub const SEPARATOR_GRAY: u8 = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

/// Lays out up to 32 profiles row-major; missing tiles stay black.
pub fn montage_image(profiles: &[CrackProfile]) -> Result<GrayImage> {
    if profiles.len() > MONTAGE_TILES {
        return Err(Error::InvalidArgument(format!(
            "a montage holds {MONTAGE_TILES} profiles, got {}",
            profiles.len()
        )));
    }
    let height = MONTAGE_ROWS * PROFILE_H + (MONTAGE_ROWS - 1) * SEPARATOR;
    let width = MONTAGE_COLS * PROFILE_W + (MONTAGE_COLS - 1) * SEPARATOR;
    let mut pixels = vec![SEPARATOR_GRAY; height * width];
    for tile in 0..MONTAGE_TILES {
        let (top, left) = (
            (tile / MONTAGE_COLS) * (PROFILE_H + SEPARATOR),
            (tile % MONTAGE_COLS) * (PROFILE_W + SEPARATOR),
        );
        for m in 0..PROFILE_H {
            for n in 0..PROFILE_W {
                let on = profiles.get(tile).is_some_and(|p| p.get(m, n));
                pixels[(top + m) * width + left + n] = if on { 255 } else { 0 };
            }
        }
    }
    Ok(GrayImage { height, width, pixels })
}

/// Cellwise `|pred - truth|` of binary profiles.
pub fn error_montage(pred: &[CrackProfile], truth: &[CrackProfile]) -> Result<GrayImage> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} truths",
            pred.len(),
            truth.len()
        )));
    }
    let diff: Vec<CrackProfile> = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| {
            let mut d = CrackProfile::zeros();
            for m in 0..PROFILE_H {
                for n in 0..PROFILE_W {
                    d.set(m, n, p.get(m, n) != t.get(m, n));
                }
            }
            d
        })
        .collect();
    montage_image(&diff)
}

pub fn pgm_bytes(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Reads back `(width, height, maxval)` and the pixel offset of a `P5` file.
pub fn parse_pgm_header(bytes: &[u8]) -> Result<(usize, usize, usize, usize)> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Truncated("PGM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).unwrap_or("").to_string());
    }
    if fields[0] != "P5" {
        return Err(Error::Malformed(format!("expected a P5 image, found {:?}", fields[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Malformed(format!("PGM field {s:?}")))
    };
    Ok((num(&fields[1])?, num(&fields[2])?, num(&fields[3])?, i + 1))
}

pub fn write_montage(profiles: &[CrackProfile], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, pgm_bytes(&montage_image(profiles)?))?;
    Ok(())
}

pub fn write_error_montage(pred: &[CrackProfile], truth: &[CrackProfile], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, pgm_bytes(&error_montage(pred, truth)?))?;
    Ok(())
}
