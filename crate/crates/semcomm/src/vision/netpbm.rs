//! Binary netpbm I/O: P6 (PPM) for color images, P5 (PGM) for grayscale
//! dumps. Maxval is fixed at 255 and header tokens are separated by single
//! whitespace bytes. Loading maps byte b to b/255; saving maps v to
//! round(clamp(v, 0, 1) * 255).

use super::Image;
use crate::error::{Error, Result};

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Serialize a 3-channel image as binary PPM (P6, maxval 255).
pub fn save_ppm(img: &Image) -> Result<Vec<u8>> {
    if img.channels != 3 {
        return Err(Error::config(format!(
            "PPM requires 3 channels, image has {}",
            img.channels
        )));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.reserve(img.width * img.height * 3);
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..3 {
                out.push(quantize(img.get(y, x, c)));
            }
        }
    }
    Ok(out)
}

/// Serialize a grayscale buffer (row-major, values in [0, 1]) as binary PGM.
pub fn save_pgm(values: &[f32], width: usize, height: usize) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::shape(format!(
            "PGM buffer length {} does not match {}x{}",
            values.len(),
            width,
            height
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| quantize(v)));
    Ok(out)
}

/// Per-patch score heatmap: each patch score is rescaled so the maximum
/// score maps to 255, then upsampled to a P×P block.
pub fn save_pgm_heatmap(
    scores: &[f32],
    grid_h: usize,
    grid_w: usize,
    patch_size: usize,
) -> Result<Vec<u8>> {
    if scores.len() != grid_h * grid_w {
        return Err(Error::shape(format!(
            "heatmap: {} scores for {}x{} grid",
            scores.len(),
            grid_h,
            grid_w
        )));
    }
    let max = scores.iter().cloned().fold(0.0f32, f32::max);
    let rescaled: Vec<f32> = if max > 0.0 {
        scores.iter().map(|&s| s / max).collect()
    } else {
        vec![0.0; scores.len()]
    };
    upsampled_pgm(&rescaled, grid_h, grid_w, patch_size)
}

/// Per-patch probability grid rendered directly (no rescale), upsampled to
/// P×P blocks.
pub fn save_pgm_prob_grid(
    probs: &[f32],
    grid_h: usize,
    grid_w: usize,
    patch_size: usize,
) -> Result<Vec<u8>> {
    if probs.len() != grid_h * grid_w {
        return Err(Error::shape(format!(
            "probability grid: {} values for {}x{} grid",
            probs.len(),
            grid_h,
            grid_w
        )));
    }
    upsampled_pgm(probs, grid_h, grid_w, patch_size)
}

fn upsampled_pgm(
    values: &[f32],
    grid_h: usize,
    grid_w: usize,
    patch_size: usize,
) -> Result<Vec<u8>> {
    let (h, w) = (grid_h * patch_size, grid_w * patch_size);
    let mut pixels = vec![0.0f32; h * w];
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let v = values[gy * grid_w + gx];
            for py in 0..patch_size {
                for px in 0..patch_size {
                    pixels[(gy * patch_size + py) * w + gx * patch_size + px] = v;
                }
            }
        }
    }
    save_pgm(&pixels, w, h)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::parse(self.at, msg)
    }

    fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        if self.bytes.len() < self.at + magic.len()
            || &self.bytes[self.at..self.at + magic.len()] != magic
        {
            return Err(self.err(format!(
                "expected magic {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        self.at += magic.len();
        Ok(())
    }

    fn skip_whitespace(&mut self) -> Result<()> {
        let start = self.at;
        while self.at < self.bytes.len() && self.bytes[self.at].is_ascii_whitespace() {
            self.at += 1;
        }
        if self.at == start {
            return Err(self.err("expected whitespace"));
        }
        Ok(())
    }

    fn read_uint(&mut self) -> Result<usize> {
        let start = self.at;
        while self.at < self.bytes.len() && self.bytes[self.at].is_ascii_digit() {
            self.at += 1;
        }
        if self.at == start {
            return Err(self.err("expected decimal integer"));
        }
        std::str::from_utf8(&self.bytes[start..self.at])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err("integer out of range"))
    }

    /// Exactly one whitespace byte separates the maxval from the payload.
    fn expect_single_whitespace(&mut self) -> Result<()> {
        if self.at >= self.bytes.len() || !self.bytes[self.at].is_ascii_whitespace() {
            return Err(self.err("expected single whitespace before payload"));
        }
        self.at += 1;
        Ok(())
    }
}

/// Parse a binary PPM (P6, maxval 255) into an image.
pub fn load_ppm(bytes: &[u8]) -> Result<Image> {
    let mut cur = Cursor { bytes, at: 0 };
    cur.expect_magic(b"P6")?;
    cur.skip_whitespace()?;
    let width = cur.read_uint()?;
    cur.skip_whitespace()?;
    let height = cur.read_uint()?;
    cur.skip_whitespace()?;
    let maxval_at = cur.at;
    let maxval = cur.read_uint()?;
    if maxval != 255 {
        return Err(Error::parse(maxval_at, format!("maxval {maxval}, only 255 supported")));
    }
    cur.expect_single_whitespace()?;
    let need = width * height * 3;
    if bytes.len() - cur.at < need {
        return Err(Error::parse(
            bytes.len(),
            format!(
                "payload truncated: need {need} bytes, have {}",
                bytes.len() - cur.at
            ),
        ));
    }
    let payload = &bytes[cur.at..cur.at + need];
    let pixels: Vec<f32> = payload.iter().map(|&b| b as f32 / 255.0).collect();
    Image::new(height, width, 3, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::RngStream;

    #[test]
    fn save_load_round_trip_within_half_quantum() {
        let mut rng = RngStream::new(21);
        let pixels: Vec<f32> = (0..16 * 16 * 3).map(|_| rng.uniform() as f32).collect();
        let img = Image::new(16, 16, 3, pixels).unwrap();
        let back = load_ppm(&save_ppm(&img).unwrap()).unwrap();
        assert!(img.same_geometry(&back));
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn two_pixel_file_by_definition() {
        let bytes = b"P6\n2 1\n255\n\xff\x00\x00\x00\x00\xff";
        let img = load_ppm(bytes).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.get(0, 0, 0), 1.0); // red pixel
        assert_eq!(img.get(0, 0, 2), 0.0);
        assert_eq!(img.get(0, 1, 0), 0.0); // blue pixel
        assert_eq!(img.get(0, 1, 2), 1.0);
    }

    #[test]
    fn malformed_inputs_rejected_with_offsets() {
        assert!(matches!(
            load_ppm(b"P5\n2 1\n255\n__"),
            Err(Error::Parse { offset: 0, .. })
        ));
        // Wrong maxval: offset points at the maxval token.
        match load_ppm(b"P6\n2 1\n127\n\0\0\0\0\0\0") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 7),
            other => panic!("expected parse error, got {other:?}"),
        }
        // Truncated payload.
        assert!(matches!(
            load_ppm(b"P6\n2 1\n255\n\xff\x00"),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn uniform_scores_render_fully_bright() {
        let scores = vec![0.25f32; 4];
        let bytes = save_pgm_heatmap(&scores, 2, 2, 2).unwrap();
        let (header_end, _) = bytes
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == b'\n')
            .nth(2)
            .unwrap();
        assert!(bytes[header_end + 1..].iter().all(|&b| b == 255));
    }

    #[test]
    fn prob_grid_maps_values_directly() {
        let bytes = save_pgm_prob_grid(&[0.0, 1.0], 1, 2, 1).unwrap();
        let n = bytes.len();
        assert_eq!(&bytes[n - 2..], &[0u8, 255u8]);
    }

    #[test]
    fn grayscale_image_rejected_by_ppm_writer() {
        let img = Image::black(4, 4, 1);
        assert!(save_ppm(&img).is_err());
    }
}
