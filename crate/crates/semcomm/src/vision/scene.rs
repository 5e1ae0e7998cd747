//! Synthetic scene generation with exact ground truth.
//!
//! Scenes are a low-amplitude smooth background with 1-4 opaque bright
//! shapes composited in draw order. The generator records exact geometry,
//! so occupancy grids and keypoint targets are known by construction.
//! Output depends only on (rng stream, spec).

use super::Image;
use crate::error::{Error, Result};
use crate::numcore::RngStream;

/// Shape fill colors; bright against the dim background.
pub const PALETTE: [[f32; 3]; 8] = [
    [0.90, 0.10, 0.10], // red
    [0.10, 0.80, 0.15], // green
    [0.15, 0.20, 0.90], // blue
    [0.95, 0.90, 0.10], // yellow
    [0.10, 0.85, 0.90], // cyan
    [0.90, 0.15, 0.85], // magenta
    [0.95, 0.95, 0.95], // white
    [0.95, 0.55, 0.10], // orange
];

const BG_LO: f64 = 0.06;
const BG_HI: f64 = 0.16;
const BG_NOISE: f64 = 0.02;
const MAX_PLACEMENT_TRIES: usize = 10_000;

/// Filled-region geometry of one object. Membership is evaluated at pixel
/// centers (x + 0.5, y + 0.5).
#[derive(Debug, Clone, PartialEq)]
pub enum ShapeGeom {
    /// Half-open pixel box [x0, x1) × [y0, y1).
    Rect {
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
    },
    /// Disk of radius `r` around (cx, cy) in continuous pixel coordinates.
    Disk { cx: f64, cy: f64, r: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub geom: ShapeGeom,
    pub color: [f32; 3],
}

impl SceneObject {
    /// Tight half-open pixel bounding box.
    pub fn bbox(&self) -> (usize, usize, usize, usize) {
        match &self.geom {
            ShapeGeom::Rect { x0, y0, x1, y1 } => (*x0, *y0, *x1, *y1),
            ShapeGeom::Disk { cx, cy, r } => (
                (cx - r).floor().max(0.0) as usize,
                (cy - r).floor().max(0.0) as usize,
                (cx + r).ceil() as usize,
                (cy + r).ceil() as usize,
            ),
        }
    }

    /// Does the filled region cover the center of pixel (x, y)?
    pub fn covers(&self, x: usize, y: usize) -> bool {
        match &self.geom {
            ShapeGeom::Rect { x0, y0, x1, y1 } => x >= *x0 && x < *x1 && y >= *y0 && y < *y1,
            ShapeGeom::Disk { cx, cy, r } => {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                dx * dx + dy * dy <= r * r
            }
        }
    }

    /// Analytic area, used to pick the primary (largest) object.
    pub fn area(&self) -> f64 {
        match &self.geom {
            ShapeGeom::Rect { x0, y0, x1, y1 } => ((x1 - x0) * (y1 - y0)) as f64,
            ShapeGeom::Disk { r, .. } => std::f64::consts::PI * r * r,
        }
    }

    /// Geometric center in continuous pixel coordinates.
    pub fn center(&self) -> (f64, f64) {
        match &self.geom {
            ShapeGeom::Rect { x0, y0, x1, y1 } => {
                ((*x0 + *x1) as f64 / 2.0, (*y0 + *y1) as f64 / 2.0)
            }
            ShapeGeom::Disk { cx, cy, .. } => (*cx, *cy),
        }
    }
}

/// Exact ground truth for one generated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTruth {
    /// Objects in draw order (later objects overdraw earlier ones).
    pub objects: Vec<SceneObject>,
    /// Center of the largest object, normalized to [0, 1]².
    pub primary_centroid: (f64, f64),
}

/// Patch-resolution binary occupancy map.
#[derive(Debug, Clone, PartialEq)]
pub struct BitGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub bits: Vec<bool>,
}

impl BitGrid {
    #[inline]
    pub fn get(&self, gy: usize, gx: usize) -> bool {
        self.bits[gy * self.grid_w + gx]
    }

    pub fn count_set(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Scene generator parameters.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object extent range in pixels (rect side / disk diameter).
    pub min_size: usize,
    pub max_size: usize,
    /// Fractional placement region (x0, y0, x1, y1); objects land fully
    /// inside it. Full frame by default; a sub-region makes relevance
    /// known by construction (e.g. the top-left-quadrant experiment).
    pub region: (f64, f64, f64, f64),
}

impl SceneSpec {
    /// Desk-scale default: 32×32×3 with 4-pixel patches (64 patches).
    pub fn desk_default() -> Self {
        SceneSpec {
            height: 32,
            width: 32,
            channels: 3,
            patch_size: 4,
            min_objects: 1,
            max_objects: 4,
            min_size: 6,
            max_size: 14,
            region: (0.0, 0.0, 1.0, 1.0),
        }
    }

    fn region_pixels(&self) -> (usize, usize, usize, usize) {
        let (fx0, fy0, fx1, fy1) = self.region;
        let x0 = (fx0 * self.width as f64).round() as usize;
        let y0 = (fy0 * self.height as f64).round() as usize;
        let x1 = (fx1 * self.width as f64).round() as usize;
        let y1 = (fy1 * self.height as f64).round() as usize;
        (x0, y0, x1.min(self.width), y1.min(self.height))
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0
            || self.height % self.patch_size != 0
            || self.width % self.patch_size != 0
        {
            return Err(Error::config(format!(
                "scene {}x{} not divisible by patch size {}",
                self.height, self.width, self.patch_size
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::config("scene channels must be 1 or 3".into()));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::config("object count range invalid".into()));
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return Err(Error::config("object size range invalid".into()));
        }
        let (rx0, ry0, rx1, ry1) = self.region_pixels();
        if rx0 >= rx1 || ry0 >= ry1 {
            return Err(Error::config("placement region is empty".into()));
        }
        if self.max_size > rx1 - rx0 || self.max_size > ry1 - ry0 {
            return Err(Error::config(format!(
                "object size {} exceeds placement region {}x{}",
                self.max_size,
                rx1 - rx0,
                ry1 - ry0
            )));
        }
        Ok(())
    }

    pub fn grid_h(&self) -> usize {
        self.height / self.patch_size
    }

    pub fn grid_w(&self) -> usize {
        self.width / self.patch_size
    }

    pub fn patch_count(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Canonical one-line form, used in checkpoint config digests.
    pub fn summary(&self) -> String {
        format!(
            "scene:{}x{}x{}:p{}:obj{}-{}:size{}-{}:reg{:.3},{:.3},{:.3},{:.3}",
            self.height,
            self.width,
            self.channels,
            self.patch_size,
            self.min_objects,
            self.max_objects,
            self.min_size,
            self.max_size,
            self.region.0,
            self.region.1,
            self.region.2,
            self.region.3
        )
    }
}

/// Generate one scene and its exact truth, deterministically in `rng`.
pub fn gen_scene(rng: &mut RngStream, spec: &SceneSpec) -> Result<(Image, SceneTruth)> {
    spec.validate()?;
    let (h, w, c) = (spec.height, spec.width, spec.channels);

    // Smooth background: per-channel bilinear blend of four corner levels
    // plus per-pixel noise, all inside a dim band so objects dominate.
    let mut corners = [[0.0f64; 4]; 3];
    for ch in 0..c {
        for corner in corners[ch].iter_mut() {
            *corner = rng.uniform_in(BG_LO, BG_HI);
        }
    }
    let mut img = Image::black(h, w, c);
    for y in 0..h {
        let fy = y as f64 / (h - 1).max(1) as f64;
        for x in 0..w {
            let fx = x as f64 / (w - 1).max(1) as f64;
            for ch in 0..c {
                let [c00, c01, c10, c11] = corners[ch];
                let top = c00 * (1.0 - fx) + c01 * fx;
                let bot = c10 * (1.0 - fx) + c11 * fx;
                let base = top * (1.0 - fy) + bot * fy;
                let noisy = base + rng.uniform_in(-BG_NOISE, BG_NOISE);
                img.set(y, x, ch, noisy.clamp(0.0, 1.0) as f32);
            }
        }
    }

    let (rx0, ry0, rx1, ry1) = spec.region_pixels();
    let n_objects = spec.min_objects + rng.below(spec.max_objects - spec.min_objects + 1);
    let mut objects = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let is_disk = rng.below(2) == 1;
        let color = PALETTE[rng.below(PALETTE.len())];
        let geom = if is_disk {
            let diameter = spec.min_size + rng.below(spec.max_size - spec.min_size + 1);
            let r = diameter as f64 / 2.0;
            let mut placed = None;
            for _ in 0..MAX_PLACEMENT_TRIES {
                let cx = rng.uniform_in(0.0, w as f64);
                let cy = rng.uniform_in(0.0, h as f64);
                if cx - r >= rx0 as f64
                    && cx + r <= rx1 as f64
                    && cy - r >= ry0 as f64
                    && cy + r <= ry1 as f64
                {
                    placed = Some(ShapeGeom::Disk { cx, cy, r });
                    break;
                }
            }
            placed
        } else {
            let ow = spec.min_size + rng.below(spec.max_size - spec.min_size + 1);
            let oh = spec.min_size + rng.below(spec.max_size - spec.min_size + 1);
            let mut placed = None;
            for _ in 0..MAX_PLACEMENT_TRIES {
                let x0 = rng.below(w);
                let y0 = rng.below(h);
                if x0 >= rx0 && x0 + ow <= rx1 && y0 >= ry0 && y0 + oh <= ry1 {
                    placed = Some(ShapeGeom::Rect {
                        x0,
                        y0,
                        x1: x0 + ow,
                        y1: y0 + oh,
                    });
                    break;
                }
            }
            placed
        };
        let geom = geom.ok_or_else(|| {
            Error::config("could not place object inside region (spec unsatisfiable)".into())
        })?;
        objects.push(SceneObject { geom, color });
    }

    // Composite in draw order; objects are opaque.
    for obj in &objects {
        let (bx0, by0, bx1, by1) = obj.bbox();
        for y in by0..by1.min(h) {
            for x in bx0..bx1.min(w) {
                if obj.covers(x, y) {
                    for ch in 0..c {
                        img.set(y, x, ch, obj.color[ch]);
                    }
                }
            }
        }
    }

    let primary = objects
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| {
            a.area()
                .partial_cmp(&b.area())
                .unwrap()
                .then(ib.cmp(ia)) // tie: earliest in draw order wins
        })
        .map(|(_, o)| o)
        .expect("at least one object");
    let (cx, cy) = primary.center();
    let truth = SceneTruth {
        primary_centroid: (cx / w as f64, cy / h as f64),
        objects,
    };
    Ok((img, truth))
}

/// Patch-resolution occupancy: a patch is set iff any pixel center inside
/// it lies in some object's filled region.
pub fn occupancy_grid(
    truth: &SceneTruth,
    height: usize,
    width: usize,
    patch_size: usize,
) -> Result<BitGrid> {
    if patch_size == 0 || height % patch_size != 0 || width % patch_size != 0 {
        return Err(Error::shape(format!(
            "occupancy grid: {height}x{width} not divisible by {patch_size}"
        )));
    }
    let grid_h = height / patch_size;
    let grid_w = width / patch_size;
    let mut bits = vec![false; grid_h * grid_w];
    for obj in &truth.objects {
        let (bx0, by0, bx1, by1) = obj.bbox();
        for y in by0..by1.min(height) {
            for x in bx0..bx1.min(width) {
                if obj.covers(x, y) {
                    bits[(y / patch_size) * grid_w + (x / patch_size)] = true;
                }
            }
        }
    }
    Ok(BitGrid {
        grid_h,
        grid_w,
        bits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_identical_scene() {
        let spec = SceneSpec::desk_default();
        let (img_a, truth_a) = gen_scene(&mut RngStream::labeled(9, "img"), &spec).unwrap();
        let (img_b, truth_b) = gen_scene(&mut RngStream::labeled(9, "img"), &spec).unwrap();
        assert_eq!(img_a, img_b);
        assert_eq!(truth_a, truth_b);
    }

    #[test]
    fn count_range_of_one_gives_one_object() {
        let spec = SceneSpec {
            min_objects: 1,
            max_objects: 1,
            ..SceneSpec::desk_default()
        };
        let (_, truth) = gen_scene(&mut RngStream::new(4), &spec).unwrap();
        assert_eq!(truth.objects.len(), 1);
    }

    #[test]
    fn oversized_object_is_configuration_error() {
        let spec = SceneSpec {
            min_size: 40,
            max_size: 40,
            ..SceneSpec::desk_default()
        };
        assert!(gen_scene(&mut RngStream::new(4), &spec).is_err());
    }

    #[test]
    fn occupancy_matches_per_pixel_rasterization_oracle() {
        // Independent oracle: rasterize the full frame per pixel from the
        // truth record, then OR over each patch footprint.
        let spec = SceneSpec::desk_default();
        for seed in 0..25u64 {
            let (_, truth) = gen_scene(&mut RngStream::new(seed), &spec).unwrap();
            let grid = occupancy_grid(&truth, 32, 32, 4).unwrap();
            let mut painted = vec![false; 32 * 32];
            for y in 0..32 {
                for x in 0..32 {
                    painted[y * 32 + x] = truth.objects.iter().any(|o| o.covers(x, y));
                }
            }
            for gy in 0..8 {
                for gx in 0..8 {
                    let mut any = false;
                    for py in 0..4 {
                        for px in 0..4 {
                            any |= painted[(gy * 4 + py) * 32 + (gx * 4 + px)];
                        }
                    }
                    assert_eq!(grid.get(gy, gx), any, "patch ({gy},{gx}) seed {seed}");
                }
            }
        }
    }

    #[test]
    fn bounding_boxes_inside_image_and_truth_nonempty() {
        let spec = SceneSpec::desk_default();
        for seed in 0..50u64 {
            let (_, truth) = gen_scene(&mut RngStream::new(seed), &spec).unwrap();
            assert!(!truth.objects.is_empty());
            for obj in &truth.objects {
                let (x0, y0, x1, y1) = obj.bbox();
                assert!(x0 < x1 && y0 < y1);
                assert!(x1 <= 32 && y1 <= 32);
            }
            let (cx, cy) = truth.primary_centroid;
            assert!((0.0..=1.0).contains(&cx) && (0.0..=1.0).contains(&cy));
        }
    }

    #[test]
    fn quadrant_region_confines_objects() {
        let spec = SceneSpec {
            region: (0.0, 0.0, 0.5, 0.5),
            min_size: 4,
            max_size: 10,
            ..SceneSpec::desk_default()
        };
        for seed in 0..20u64 {
            let (_, truth) = gen_scene(&mut RngStream::new(seed), &spec).unwrap();
            for obj in &truth.objects {
                let (_, _, x1, y1) = obj.bbox();
                assert!(x1 <= 16 && y1 <= 16, "object escaped the quadrant");
            }
        }
    }

    #[test]
    fn background_stays_dim() {
        let spec = SceneSpec {
            min_objects: 1,
            max_objects: 1,
            min_size: 6,
            max_size: 6,
            ..SceneSpec::desk_default()
        };
        let (img, truth) = gen_scene(&mut RngStream::new(11), &spec).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                if !truth.objects.iter().any(|o| o.covers(x, y)) {
                    for c in 0..3 {
                        assert!(img.get(y, x, c) <= (BG_HI + BG_NOISE) as f32 + 1e-6);
                    }
                }
            }
        }
    }
}
