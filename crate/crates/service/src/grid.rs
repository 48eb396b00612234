use periph_core::Fixation;

pub const DEFAULT_GRID_N: usize = 12;
pub const MAX_GRID_N: usize = 64;

/// Fixation for tile `(gx, gy)`: the centre of that grid cell, rounded to
/// the nearest pixel.
pub fn grid_fixation(gx: usize, gy: usize, grid_n: usize, h: usize, w: usize, fovea_radius: f64) -> Fixation {
    let fx = ((gx as f64 + 0.5) * w as f64 / grid_n as f64).round();
    let fy = ((gy as f64 + 0.5) * h as f64 / grid_n as f64).round();
    Fixation::new(fx.min(w as f64 - 1.0), fy.min(h as f64 - 1.0), fovea_radius)
}

/// One eighth of the width, 64 pixels at 512.
pub fn default_fovea_radius(w: usize) -> f64 {
    w as f64 / 8.0
}

/// Row-major tile index.
pub fn tile_index(gx: usize, gy: usize, grid_n: usize) -> usize {
    gy * grid_n + gx
}
