//! Image representation, patchify/unpatchify, synthetic scenes, and
//! PPM/PGM file I/O.

mod netpbm;
mod scene;

pub use netpbm::{
    load_ppm, save_pgm, save_pgm_heatmap, save_pgm_prob_grid, save_ppm,
};
pub use scene::{
    gen_scene, occupancy_grid, BitGrid, SceneObject, SceneSpec, SceneTruth, ShapeGeom, PALETTE,
};

use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// H×W×C grid of intensities in [0, 1], row-major, channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::config(format!("unsupported channel count {channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::shape(format!(
                "pixel buffer length {} does not match {}x{}x{}",
                pixels.len(),
                height,
                width,
                channels
            )));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::numeric("pixel outside [0, 1]".into()));
        }
        Ok(Image {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn black(height: usize, width: usize, channels: usize) -> Self {
        Image {
            height,
            width,
            channels,
            pixels: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn same_geometry(&self, other: &Image) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.channels == other.channels
    }
}

/// Ordered sequence of flattened fixed-size patches plus grid geometry;
/// the unit of scoring, selection, and transmission.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub patch_size: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    /// One row per patch, in row-major grid order; each row is the patch's
    /// pixels row-major, channel-interleaved.
    pub patches: Matrix,
}

impl PatchSet {
    pub fn patch_count(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Split an image into a row-major grid of P×P patches.
pub fn patchify(img: &Image, patch_size: usize) -> Result<PatchSet> {
    if patch_size == 0 || img.height % patch_size != 0 || img.width % patch_size != 0 {
        return Err(Error::shape(format!(
            "image {}x{} not divisible by patch size {}",
            img.height, img.width, patch_size
        )));
    }
    let grid_h = img.height / patch_size;
    let grid_w = img.width / patch_size;
    let dim = patch_size * patch_size * img.channels;
    let mut patches = Matrix::zeros(grid_h * grid_w, dim);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let row = patches.row_mut(gy * grid_w + gx);
            let mut at = 0;
            for py in 0..patch_size {
                for px in 0..patch_size {
                    for c in 0..img.channels {
                        row[at] = img.get(gy * patch_size + py, gx * patch_size + px, c);
                        at += 1;
                    }
                }
            }
        }
    }
    Ok(PatchSet {
        patch_size,
        grid_h,
        grid_w,
        channels: img.channels,
        patches,
    })
}

/// Reassemble patches into an image. Values are clamped to [0, 1] so model
/// outputs become valid images; for in-range inputs this is the exact
/// inverse of [`patchify`].
pub fn unpatchify(ps: &PatchSet) -> Result<Image> {
    let n = ps.patch_count();
    let dim = ps.patch_dim();
    if ps.patches.shape() != (n, dim) {
        return Err(Error::shape(format!(
            "patch matrix {:?} does not match geometry {}x{} patches of dim {}",
            ps.patches.shape(),
            ps.grid_h,
            ps.grid_w,
            dim
        )));
    }
    let mut img = Image::black(
        ps.grid_h * ps.patch_size,
        ps.grid_w * ps.patch_size,
        ps.channels,
    );
    for gy in 0..ps.grid_h {
        for gx in 0..ps.grid_w {
            let row = ps.patches.row(gy * ps.grid_w + gx);
            let mut at = 0;
            for py in 0..ps.patch_size {
                for px in 0..ps.patch_size {
                    for c in 0..ps.channels {
                        let v = row[at].clamp(0.0, 1.0);
                        img.set(gy * ps.patch_size + py, gx * ps.patch_size + px, c, v);
                        at += 1;
                    }
                }
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::RngStream;

    fn random_image(h: usize, w: usize, c: usize, rng: &mut RngStream) -> Image {
        let pixels = (0..h * w * c).map(|_| rng.uniform() as f32).collect();
        Image::new(h, w, c, pixels).unwrap()
    }

    #[test]
    fn desk_scale_patch_count() {
        let img = Image::black(32, 32, 3);
        let ps = patchify(&img, 4).unwrap();
        assert_eq!(ps.patch_count(), 64);
        assert_eq!(ps.patch_dim(), 48);
    }

    #[test]
    fn full_scale_patch_count() {
        // 224x224x3 with 16x16 patches: 196 patches of length 768.
        let img = Image::black(224, 224, 3);
        let ps = patchify(&img, 16).unwrap();
        assert_eq!(ps.patch_count(), 196);
        assert_eq!(ps.patch_dim(), 768);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = RngStream::new(88);
        for &(h, w, c, p) in &[(32usize, 32usize, 3usize, 4usize), (8, 16, 1, 4), (12, 12, 3, 3)] {
            let img = random_image(h, w, c, &mut rng);
            let back = unpatchify(&patchify(&img, p).unwrap()).unwrap();
            assert_eq!(img, back, "round trip must be exact for {h}x{w}x{c} P={p}");
        }
    }

    #[test]
    fn indivisible_dimensions_rejected() {
        let img = Image::black(30, 32, 3);
        assert!(patchify(&img, 4).is_err());
    }

    #[test]
    fn all_zero_patches_give_black_image() {
        let ps = PatchSet {
            patch_size: 2,
            grid_h: 2,
            grid_w: 2,
            channels: 1,
            patches: Matrix::zeros(4, 4),
        };
        let img = unpatchify(&ps).unwrap();
        assert!(img.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_patch_grid_reshapes() {
        let patches = Matrix::from_rows(&[vec![0.1, 0.2, 0.3, 0.4]]).unwrap();
        let ps = PatchSet {
            patch_size: 2,
            grid_h: 1,
            grid_w: 1,
            channels: 1,
            patches,
        };
        let img = unpatchify(&ps).unwrap();
        assert_eq!(img.get(0, 0, 0), 0.1);
        assert_eq!(img.get(0, 1, 0), 0.2);
        assert_eq!(img.get(1, 0, 0), 0.3);
        assert_eq!(img.get(1, 1, 0), 0.4);
    }

    #[test]
    fn out_of_range_values_clamped() {
        let patches = Matrix::from_rows(&[vec![1.2, -0.3, 0.5, 0.9]]).unwrap();
        let ps = PatchSet {
            patch_size: 2,
            grid_h: 1,
            grid_w: 1,
            channels: 1,
            patches,
        };
        let img = unpatchify(&ps).unwrap();
        assert_eq!(img.get(0, 0, 0), 1.0);
        assert_eq!(img.get(0, 1, 0), 0.0);
    }

    #[test]
    fn geometry_mismatch_rejected() {
        let ps = PatchSet {
            patch_size: 2,
            grid_h: 2,
            grid_w: 2,
            channels: 1,
            patches: Matrix::zeros(3, 4),
        };
        assert!(unpatchify(&ps).is_err());
    }
}
