//! Mask and probability-map dumps for inspection.

use std::fs;
use std::path::Path;

use crate::bytes::{put_f32s, put_u32, to_u32};
use crate::error::Result;
use crate::tensor::Real;

/// Binary P5 PGM: foreground 255, background 0.
pub fn pgm_bytes(mask: &[u8], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(mask.iter().map(|&v| if v != 0 { 255u8 } else { 0 }));
    out
}

pub fn write_pgm(path: &Path, mask: &[u8], h: usize, w: usize) -> Result<()> {
    fs::write(path, pgm_bytes(mask, h, w))?;
    Ok(())
}

/// Probability maps as "ADCP": magic, version u32 = 1, map count u32,
/// h u32, w u32, then f32 values map by map.
pub fn prob_bytes<T: Real>(maps: &[&[T]], h: usize, w: usize) -> Result<Vec<u8>> {
    let mut out = b"ADCP".to_vec();
    put_u32(&mut out, 1);
    put_u32(&mut out, to_u32(maps.len(), "map count")?);
    put_u32(&mut out, to_u32(h, "h")?);
    put_u32(&mut out, to_u32(w, "w")?);
    for m in maps {
        put_f32s(&mut out, m.iter().map(|v| v.to_f64() as f32));
    }
    Ok(out)
}
