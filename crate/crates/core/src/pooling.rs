//! Overlapping pooling regions that grow linearly with eccentricity.
//!
//! Region centres sit on log-polar rings. Ring eccentricities grow
//! geometrically by `1 + bouma / 2`, so consecutive rings are half a radius
//! apart, and each ring carries enough regions that neighbouring centres are
//! strictly closer than the local radius. Every region has a raised-cosine
//! window, `0.5 * (1 + cos(pi * d / r))` for `d < r`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::foveamask::Fixation;
use crate::{Error, Result};

pub const DEFAULT_BOUMA: f64 = 0.5;
pub const DEFAULT_R_MIN: f64 = 8.0;

/// Regions whose in-frame window mass falls below this are dropped.
pub const MIN_REGION_MASS: f64 = 0.05;

const LAYOUT_VERSION: u32 = 1;

/// Axis-aligned pixel rectangle `[y0, y0 + h) x [x0, x0 + w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

impl BBox {
    #[inline]
    pub fn area(&self) -> usize {
        self.h * self.w
    }
}

/// Window weights over a bounding box at one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelWindow {
    pub bbox: BBox,
    pub weights: Vec<f64>,
}

impl LevelWindow {
    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolingRegion {
    /// `(row, col)`, may lie outside the frame for clipped edge regions.
    pub center: (f64, f64),
    pub radius: f64,
    pub eccentricity: f64,
    pub ring: usize,
    pub bbox: BBox,
    /// Window weights over `bbox`, row-major.
    pub weights: Vec<f64>,
}

impl PoolingRegion {
    /// A region with explicit weights; centre and radius are descriptive only.
    pub fn from_weights(bbox: BBox, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != bbox.area() {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for a {}x{} box",
                weights.len(),
                bbox.h,
                bbox.w
            )));
        }
        Ok(Self {
            center: (
                bbox.y0 as f64 + (bbox.h as f64 - 1.0) / 2.0,
                bbox.x0 as f64 + (bbox.w as f64 - 1.0) / 2.0,
            ),
            radius: (bbox.h.max(bbox.w) as f64) / 2.0,
            eccentricity: 0.0,
            ring: 0,
            bbox,
            weights,
        })
    }

    pub fn weight_at(&self, row: usize, col: usize) -> f64 {
        let b = &self.bbox;
        if row < b.y0 || col < b.x0 || row >= b.y0 + b.h || col >= b.x0 + b.w {
            0.0
        } else {
            self.weights[(row - b.y0) * b.w + (col - b.x0)]
        }
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn level0(&self) -> LevelWindow {
        LevelWindow {
            bbox: self.bbox,
            weights: self.weights.clone(),
        }
    }

    /// Window resampled to pyramid level `level` of a `frame_h x frame_w`
    /// image: each level pixel averages the in-frame full-resolution weights
    /// of its `2^level` block.
    pub fn level_window(&self, level: usize, frame_h: usize, frame_w: usize) -> LevelWindow {
        if level == 0 {
            return self.level0();
        }
        let f = 1usize << level;
        let lh = frame_h.div_ceil(f);
        let lw = frame_w.div_ceil(f);
        let b = &self.bbox;
        let y0 = b.y0 / f;
        let x0 = b.x0 / f;
        let y1 = (b.y0 + b.h).div_ceil(f).min(lh);
        let x1 = (b.x0 + b.w).div_ceil(f).min(lw);
        let mut weights = Vec::with_capacity((y1 - y0) * (x1 - x0));
        for ly in y0..y1 {
            for lx in x0..x1 {
                let (ry0, ry1) = (ly * f, ((ly + 1) * f).min(frame_h));
                let (rx0, rx1) = (lx * f, ((lx + 1) * f).min(frame_w));
                let mut acc = 0.0;
                for r in ry0..ry1 {
                    for c in rx0..rx1 {
                        acc += self.weight_at(r, c);
                    }
                }
                weights.push(acc / ((ry1 - ry0) * (rx1 - rx0)) as f64);
            }
        }
        LevelWindow {
            bbox: BBox {
                y0,
                x0,
                h: y1 - y0,
                w: x1 - x0,
            },
            weights,
        }
    }
}

/// Raised-cosine window value at distance `d` from a centre of radius `r`.
#[inline]
pub fn window(d: f64, r: f64) -> f64 {
    if d >= r {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * d / r).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayoutParams {
    pub height: usize,
    pub width: usize,
    pub fixation: Fixation,
    pub bouma: f64,
    pub r_min: f64,
    pub normalized: bool,
}

impl LayoutParams {
    /// Content hash of the parameters; floats hashed by bit pattern.
    pub fn schema_id(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(LAYOUT_VERSION.to_le_bytes());
        hasher.update((self.height as u64).to_le_bytes());
        hasher.update((self.width as u64).to_le_bytes());
        for v in [
            self.fixation.fx,
            self.fixation.fy,
            self.fixation.fovea_radius,
            self.bouma,
            self.r_min,
        ] {
            hasher.update(v.to_bits().to_le_bytes());
        }
        hasher.update([self.normalized as u8]);
        hex::encode(&hasher.finalize()[..16])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolingLayout {
    pub params: LayoutParams,
    pub regions: Vec<PoolingRegion>,
    pub schema_id: String,
}

/// One ring of the construction before clipping to the frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ring {
    pub eccentricity: f64,
    pub radius: f64,
    pub count: usize,
    /// Angular offset of the first centre, in units of the angular step.
    pub phase: f64,
}

impl Ring {
    pub fn center(&self, fix: &Fixation, j: usize) -> (f64, f64) {
        let theta = 2.0 * std::f64::consts::PI * (j as f64 + self.phase) / self.count as f64;
        (
            fix.fy + self.eccentricity * theta.sin(),
            fix.fx + self.eccentricity * theta.cos(),
        )
    }

    /// Chord between neighbouring centres.
    pub fn spacing(&self) -> f64 {
        2.0 * self.eccentricity * (std::f64::consts::PI / self.count as f64).sin()
    }
}

fn validate(bouma: f64, r_min: f64, h: usize, w: usize, fix: &Fixation) -> Result<()> {
    if !(bouma > 0.0 && bouma <= 1.0) {
        return Err(Error::InvalidArgument(format!("bouma factor {bouma} outside (0, 1]")));
    }
    if !(r_min >= 2.0 && r_min.is_finite()) {
        return Err(Error::InvalidArgument(format!("r_min {r_min} below 2")));
    }
    fix.check_bounds(h, w)
}

/// Ring sequence covering every eccentricity in the frame.
pub fn rings(h: usize, w: usize, fix: &Fixation, bouma: f64, r_min: f64) -> Vec<Ring> {
    let reach = crate::radialblur::farthest_corner(h, w, fix);
    let growth = 1.0 + bouma / 2.0;
    let mut e = fix.fovea_radius.max(r_min / 2.0);
    let mut out = Vec::new();
    loop {
        let radius = (bouma * e).max(r_min);
        if e - radius > reach {
            break;
        }
        // floor + 1 keeps the arc spacing strictly below the radius
        let count = ((2.0 * std::f64::consts::PI * e / radius).floor() as usize + 1).max(3);
        let phase = if out.len() % 2 == 1 { 0.5 } else { 0.0 };
        out.push(Ring {
            eccentricity: e,
            radius,
            count,
            phase,
        });
        e *= growth;
    }
    out
}

pub fn build_layout(h: usize, w: usize, fix: &Fixation, bouma: f64, r_min: f64) -> Result<PoolingLayout> {
    validate(bouma, r_min, h, w, fix)?;
    let mut regions = Vec::new();
    for (k, ring) in rings(h, w, fix, bouma, r_min).iter().enumerate() {
        for j in 0..ring.count {
            let center = ring.center(fix, j);
            if let Some(region) = rasterize(center, ring.radius, ring.eccentricity, k, h, w) {
                if region.mass() >= MIN_REGION_MASS {
                    regions.push(region);
                }
            }
        }
    }
    let params = LayoutParams {
        height: h,
        width: w,
        fixation: *fix,
        bouma,
        r_min,
        normalized: false,
    };
    Ok(PoolingLayout {
        schema_id: params.schema_id(),
        params,
        regions,
    })
}

fn rasterize(
    center: (f64, f64),
    radius: f64,
    eccentricity: f64,
    ring: usize,
    h: usize,
    w: usize,
) -> Option<PoolingRegion> {
    let (cy, cx) = center;
    let y0 = (cy - radius).floor().max(0.0);
    let x0 = (cx - radius).floor().max(0.0);
    let y1 = ((cy + radius).ceil() + 1.0).min(h as f64);
    let x1 = ((cx + radius).ceil() + 1.0).min(w as f64);
    if y1 <= y0 || x1 <= x0 {
        return None;
    }
    let bbox = BBox {
        y0: y0 as usize,
        x0: x0 as usize,
        h: (y1 - y0) as usize,
        w: (x1 - x0) as usize,
    };
    let mut weights = Vec::with_capacity(bbox.area());
    for r in bbox.y0..bbox.y0 + bbox.h {
        for c in bbox.x0..bbox.x0 + bbox.w {
            let d = ((r as f64 - cy).powi(2) + (c as f64 - cx).powi(2)).sqrt();
            weights.push(window(d, radius));
        }
    }
    Some(PoolingRegion {
        center,
        radius,
        eccentricity,
        ring,
        bbox,
        weights,
    })
}

impl PoolingLayout {
    pub fn height(&self) -> usize {
        self.params.height
    }

    pub fn width(&self) -> usize {
        self.params.width
    }

    pub fn fixation(&self) -> &Fixation {
        &self.params.fixation
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// Per-pixel sum of region weights over the frame.
    pub fn coverage_sum(&self) -> Vec<f64> {
        let w = self.width();
        let mut sum = vec![0.0; self.height() * w];
        for region in &self.regions {
            let b = region.bbox;
            for r in 0..b.h {
                for c in 0..b.w {
                    sum[(b.y0 + r) * w + b.x0 + c] += region.weights[r * b.w + c];
                }
            }
        }
        sum
    }

    /// Number of regions with non-zero weight at each pixel.
    pub fn coverage_count(&self) -> Vec<u32> {
        let w = self.width();
        let mut count = vec![0; self.height() * w];
        for region in &self.regions {
            let b = region.bbox;
            for r in 0..b.h {
                for c in 0..b.w {
                    if region.weights[r * b.w + c] > 0.0 {
                        count[(b.y0 + r) * w + b.x0 + c] += 1;
                    }
                }
            }
        }
        count
    }

    /// Divides every weight by the per-pixel total so that covered pixels sum
    /// to one. Fails if a pixel outside the fovea has no coverage.
    pub fn normalize_weights(&self) -> Result<PoolingLayout> {
        let sum = self.coverage_sum();
        let (h, w) = (self.height(), self.width());
        let fix = self.fixation();
        for r in 0..h {
            for c in 0..w {
                if sum[r * w + c] <= 0.0 && !fix.in_fovea(r, c) {
                    return Err(Error::UncoveredPixel { row: r, col: c });
                }
            }
        }
        let regions = self
            .regions
            .iter()
            .map(|region| {
                let b = region.bbox;
                let mut out = region.clone();
                for r in 0..b.h {
                    for c in 0..b.w {
                        let s = sum[(b.y0 + r) * w + b.x0 + c];
                        if s > 0.0 {
                            out.weights[r * b.w + c] /= s;
                        }
                    }
                }
                out
            })
            .collect();
        let params = LayoutParams {
            normalized: true,
            ..self.params
        };
        Ok(PoolingLayout {
            schema_id: params.schema_id(),
            params,
            regions,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = LayoutDoc {
            schema_id: self.schema_id.clone(),
            params: self.params,
            regions: self
                .regions
                .iter()
                .map(|r| RegionDoc {
                    center: [r.center.0, r.center.1],
                    radius: r.radius,
                    eccentricity: r.eccentricity,
                    ring: r.ring,
                    bbox: r.bbox,
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Rebuilds the layout from its parameters and checks it against the document.
    pub fn from_json(s: &str) -> Result<PoolingLayout> {
        let doc: LayoutDoc = serde_json::from_str(s)?;
        let p = doc.params;
        let mut layout = build_layout(p.height, p.width, &p.fixation, p.bouma, p.r_min)?;
        if p.normalized {
            layout = layout.normalize_weights()?;
        }
        if layout.schema_id != doc.schema_id || layout.regions.len() != doc.regions.len() {
            return Err(Error::SchemaMismatch(format!(
                "layout document {} does not match its parameters ({})",
                doc.schema_id, layout.schema_id
            )));
        }
        Ok(layout)
    }
}

#[derive(Serialize, Deserialize)]
struct LayoutDoc {
    schema_id: String,
    params: LayoutParams,
    regions: Vec<RegionDoc>,
}

#[derive(Serialize, Deserialize)]
struct RegionDoc {
    center: [f64; 2],
    radius: f64,
    eccentricity: f64,
    ring: usize,
    bbox: BBox,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_layout(n: usize) -> PoolingLayout {
        build_layout(n, n, &Fixation::centered(n, n), DEFAULT_BOUMA, DEFAULT_R_MIN).unwrap()
    }

    #[test]
    fn radius_follows_bouma() {
        let fix = Fixation::new(0.0, 0.0, 0.0);
        let rs = rings(512, 512, &fix, 0.5, 8.0);
        for ring in &rs {
            assert_eq!(ring.radius, (0.5 * ring.eccentricity).max(8.0));
        }
        // a ring at eccentricity 100 would have radius 50
        assert_eq!((0.5f64 * 100.0).max(8.0), 50.0);
    }

    #[test]
    fn rejects_bad_parameters() {
        let fix = Fixation::centered(64, 64);
        assert!(build_layout(64, 64, &fix, 0.0, 8.0).is_err());
        assert!(build_layout(64, 64, &fix, 1.5, 8.0).is_err());
        assert!(build_layout(64, 64, &fix, 0.5, 1.0).is_err());
    }

    #[test]
    fn neighbour_spacing_below_radius() {
        for fix in [Fixation::centered(128, 128), Fixation::new(3.0, 100.0, 0.0)] {
            for ring in rings(128, 128, &fix, 0.5, 8.0) {
                assert!(ring.spacing() < ring.radius, "{ring:?}");
            }
            let rs = rings(128, 128, &fix, 0.5, 8.0);
            for pair in rs.windows(2) {
                assert!(pair[1].eccentricity - pair[0].eccentricity <= pair[0].radius / 2.0 + 1e-9);
            }
        }
    }

    #[test]
    fn radii_nondecreasing_with_eccentricity() {
        let layout = default_layout(128);
        let mut regions: Vec<_> = layout.regions.iter().collect();
        regions.sort_by(|a, b| a.eccentricity.total_cmp(&b.eccentricity));
        assert!(regions.windows(2).all(|p| p[0].radius <= p[1].radius));
    }

    #[test]
    fn periphery_is_doubly_covered() {
        for (n, fix) in [
            (64, Fixation::centered(64, 64)),
            (96, Fixation::new(5.0, 90.0, 0.0)),
            (80, Fixation::new(40.0, 10.0, 3.0)),
        ] {
            let layout = build_layout(n, n, &fix, 0.5, 8.0).unwrap();
            let count = layout.coverage_count();
            for r in 0..n {
                for c in 0..n {
                    if !fix.in_fovea(r, c) {
                        assert!(count[r * n + c] >= 2, "pixel ({r},{c}) covered {} times", count[r * n + c]);
                    }
                }
            }
        }
    }

    #[test]
    fn normalization_is_a_partition_of_unity() {
        let layout = default_layout(512).normalize_weights().unwrap();
        let sum = layout.coverage_sum();
        let fix = layout.fixation();
        let mut worst = 0.0f64;
        for r in 0..512 {
            for c in 0..512 {
                if !fix.in_fovea(r, c) {
                    worst = worst.max((sum[r * 512 + c] - 1.0).abs());
                }
            }
        }
        assert!(worst < 1e-5, "max deviation {worst}");
    }

    #[test]
    fn golden_region_count_512() {
        let a = default_layout(512);
        let b = default_layout(512);
        assert_eq!(a, b);
        assert_eq!(a.len(), GOLDEN_REGIONS_512);
    }

    const GOLDEN_REGIONS_512: usize = 136;

    #[test]
    fn single_region_normalizes_to_one() {
        let bbox = BBox { y0: 0, x0: 0, h: 4, w: 4 };
        let region = PoolingRegion::from_weights(bbox, vec![0.25; 16]).unwrap();
        let params = LayoutParams {
            height: 4,
            width: 4,
            fixation: Fixation::new(0.0, 0.0, 0.0),
            bouma: 0.5,
            r_min: 8.0,
            normalized: false,
        };
        let layout = PoolingLayout {
            schema_id: params.schema_id(),
            params,
            regions: vec![region.clone()],
        };
        let n = layout.normalize_weights().unwrap();
        assert!(n.regions[0].weights.iter().all(|&v| v == 1.0));

        let twin = PoolingLayout {
            regions: vec![region.clone(), region],
            ..layout
        };
        let n = twin.normalize_weights().unwrap();
        for r in &n.regions {
            assert!(r.weights.iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn uncovered_pixel_reported() {
        let bbox = BBox { y0: 0, x0: 0, h: 2, w: 2 };
        let params = LayoutParams {
            height: 4,
            width: 4,
            fixation: Fixation::new(0.0, 0.0, 0.0),
            bouma: 0.5,
            r_min: 8.0,
            normalized: false,
        };
        let layout = PoolingLayout {
            schema_id: params.schema_id(),
            params,
            regions: vec![PoolingRegion::from_weights(bbox, vec![1.0; 4]).unwrap()],
        };
        assert!(matches!(layout.normalize_weights(), Err(Error::UncoveredPixel { .. })));
    }

    #[test]
    fn geometric_covariance() {
        let s = 3.0;
        let fix = Fixation::new(20.0, 12.0, 4.0);
        let a = build_layout(40, 48, &fix, 0.5, 6.0).unwrap();
        let fix_s = Fixation::new(fix.fx * s, fix.fy * s, fix.fovea_radius * s);
        let b = build_layout(120, 144, &fix_s, 0.5, 6.0 * s).unwrap();
        let inside = |r: &PoolingRegion, h: f64, w: f64| {
            r.center.0 >= 0.0 && r.center.1 >= 0.0 && r.center.0 <= h - 1.0 && r.center.1 <= w - 1.0
        };
        let mut matched = 0;
        for ra in a.regions.iter().filter(|r| inside(r, 40.0, 48.0)) {
            let rb = b
                .regions
                .iter()
                .find(|rb| {
                    (rb.center.0 - s * ra.center.0).abs() < 1e-9 && (rb.center.1 - s * ra.center.1).abs() < 1e-9
                })
                .expect("scaled counterpart");
            assert!((rb.radius - s * ra.radius).abs() < 1e-9);
            matched += 1;
        }
        assert!(matched > 10);
    }

    #[test]
    fn schema_id_tracks_parameters() {
        let fix = Fixation::centered(64, 64);
        let base = build_layout(64, 64, &fix, 0.5, 8.0).unwrap();
        assert_eq!(base.schema_id, build_layout(64, 64, &fix, 0.5, 8.0).unwrap().schema_id);
        let variants = [
            build_layout(64, 65, &fix, 0.5, 8.0).unwrap(),
            build_layout(64, 64, &fix.with_radius(7.0), 0.5, 8.0).unwrap(),
            build_layout(64, 64, &Fixation::new(31.0, 32.0, 8.0), 0.5, 8.0).unwrap(),
            build_layout(64, 64, &fix, 0.45, 8.0).unwrap(),
            build_layout(64, 64, &fix, 0.5, 9.0).unwrap(),
            base.normalize_weights().unwrap(),
        ];
        for v in &variants {
            assert_ne!(v.schema_id, base.schema_id);
        }
    }

    #[test]
    fn json_round_trip() {
        let layout = default_layout(64).normalize_weights().unwrap();
        let json = layout.to_json().unwrap();
        assert_eq!(PoolingLayout::from_json(&json).unwrap(), layout);
        let tampered = json.replacen(&layout.schema_id, "0000", 1);
        assert!(PoolingLayout::from_json(&tampered).is_err());
    }

    #[test]
    fn level_windows_keep_mass() {
        let layout = default_layout(64);
        for region in &layout.regions {
            for level in 0..3 {
                let win = region.level_window(level, 64, 64);
                assert!(win.total() >= region.mass() / 4f64.powi(level as i32) - 1e-9);
                assert!(win.weights.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }
}
