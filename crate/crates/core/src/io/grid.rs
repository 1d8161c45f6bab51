//! Token attention grids: one row per step, one column for the summed text
//! tokens followed by one per IP token.

use std::path::Path;

use super::atomic_write;
use super::png::encode_gray;
use crate::attention::{columns_share, AttentionRecord, HeadReduce};
use crate::encoders::IP_TOKENS;
use crate::error::{Error, Result};

pub const UPSCALE: usize = 8;
pub const SEPARATOR: usize = 2;
pub const SEPARATOR_VALUE: u8 = 64;
pub const COLUMNS: usize = 1 + IP_TOKENS;

/// Grayscale raster of a grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub rows: usize,
    pub tile: (usize, usize),
    pub pixels: Vec<u8>,
}

impl Grid {
    pub fn pixel(&self, y: usize, x: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Top-left pixel of tile `(row, col)`.
    pub fn tile_origin(&self, row: usize, col: usize) -> (usize, usize) {
        (row * (self.tile.0 + SEPARATOR), col * (self.tile.1 + SEPARATOR))
    }
}

/// Min-max normalize to 0..=255; a zero-range map renders black.
pub fn quantize(map: &[f32]) -> Vec<u8> {
    let lo = map.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = (hi - lo) as f64;
    map.iter()
        .map(|&v| {
            if range > 0.0 {
                (((v - lo) as f64 / range) * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}

pub fn render_attention_grid(records: &[AttentionRecord], layer_id: &str) -> Result<Grid> {
    let mut recs: Vec<&AttentionRecord> = records.iter().filter(|r| r.layer_id == layer_id).collect();
    if recs.is_empty() {
        return Err(Error::UnknownLayer(layer_id.to_string()));
    }
    recs.sort_by_key(|r| r.step_index);
    if recs.windows(2).any(|w| w[0].step_index == w[1].step_index) {
        return Err(Error::Malformed(format!("duplicate steps for layer `{layer_id}`")));
    }
    let (h, w) = recs[0].spatial_dims;
    let tile = (h * UPSCALE, w * UPSCALE);
    let rows = recs.len();
    let width = COLUMNS * tile.1 + (COLUMNS - 1) * SEPARATOR;
    let height = rows * tile.0 + (rows - 1) * SEPARATOR;
    let mut pixels = vec![SEPARATOR_VALUE; width * height];
    let mut grid = Grid {
        width,
        height,
        rows,
        tile,
        pixels: Vec::new(),
    };
    for (row, rec) in recs.iter().enumerate() {
        if rec.spatial_dims != (h, w) {
            return Err(Error::Malformed("records of one layer differ in size".into()));
        }
        let t = rec.tokens();
        if t < IP_TOKENS {
            return Err(Error::Malformed(format!("record has only {t} tokens")));
        }
        let ip0 = t - IP_TOKENS;
        for col in 0..COLUMNS {
            let cols = if col == 0 { 0..ip0 } else { ip0 + col - 1..ip0 + col };
            let map = columns_share(rec, cols, HeadReduce::Mean)?;
            let q = quantize(map.data());
            let (oy, ox) = grid.tile_origin(row, col);
            for y in 0..tile.0 {
                for x in 0..tile.1 {
                    pixels[(oy + y) * width + ox + x] = q[(y / UPSCALE) * w + x / UPSCALE];
                }
            }
        }
    }
    grid.pixels = pixels;
    Ok(grid)
}

/// Write the grid for `layer_id` as a grayscale PNG.
pub fn dump_attention_grid(records: &[AttentionRecord], layer_id: &str, out_path: &Path) -> Result<Grid> {
    let grid = render_attention_grid(records, layer_id)?;
    atomic_write(out_path, &encode_gray(&grid.pixels, grid.width, grid.height)?)?;
    Ok(grid)
}
