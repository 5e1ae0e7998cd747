//! SCKPT1 checkpoint format.
//!
//! Text format, lossless: header line with version and tensor count, one
//! meta line, one arch line, then per tensor a name line, a dims line, and
//! one whitespace-separated line of values as hexadecimal float literals.
//! Hexfloats round-trip every f32 bit pattern we store, including negative
//! zero and subnormals.
//!
//! ```text
//! SCKPT1 2
//! meta seed=42 epoch=20 config=d1f3a9c2b4e8f001
//! arch kind=codec n=64 ...
//! tensor enc.proj.w
//! 48 32
//! 0x1.0p-3 -0x1.8p-2 ...
//! ```

use crate::error::{Error, Result};
use crate::numcore::Matrix;
use std::path::Path;

// ---------------------------------------------------------------------------
// Hexadecimal float literals for f32
// ---------------------------------------------------------------------------

/// Render an f32 as a hexadecimal float literal. Finite values only.
pub fn f32_to_hex(v: f32) -> String {
    assert!(v.is_finite(), "checkpoint values must be finite");
    let bits = v.to_bits();
    let sign = if bits >> 31 == 1 { "-" } else { "" };
    let exp = ((bits >> 23) & 0xFF) as i32;
    let man = bits & 0x7F_FFFF;
    if exp == 0 && man == 0 {
        return format!("{sign}0x0p+0");
    }
    // 23 mantissa bits, left-shifted by one into 24 bits = 6 hex digits.
    let frac = man << 1;
    if exp == 0 {
        // Subnormal: 0.frac × 2^-126.
        format!("{sign}0x0.{frac:06x}p-126")
    } else {
        let e = exp - 127;
        format!("{sign}0x1.{frac:06x}p{}{}", if e >= 0 { "+" } else { "-" }, e.abs())
    }
}

/// Parse the canonical hexfloat form emitted by [`f32_to_hex`].
pub fn f32_from_hex(s: &str) -> Option<f32> {
    let (neg, rest) = match s.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, s),
    };
    let rest = rest.strip_prefix("0x")?;
    if rest == "0p+0" {
        return Some(if neg { -0.0 } else { 0.0 });
    }
    let (mantissa_part, exp_part) = rest.split_once('p')?;
    let exp: i32 = match exp_part.strip_prefix('+') {
        Some(e) => e.parse().ok()?,
        None => exp_part.parse().ok()?,
    };
    let (lead, frac_hex) = mantissa_part.split_once('.')?;
    if frac_hex.len() != 6 || !frac_hex.chars().all(|c| c.is_ascii_hexdigit()) {
        return None;
    }
    let frac = u32::from_str_radix(frac_hex, 16).ok()?;
    if frac & 1 != 0 {
        return None; // 24th bit must be the shifted-in zero
    }
    let man = frac >> 1;
    let bits = match lead {
        "1" => {
            let e = exp + 127;
            if !(1..=254).contains(&e) {
                return None;
            }
            ((e as u32) << 23) | man
        }
        "0" => {
            if exp != -126 || man == 0 {
                return None;
            }
            man
        }
        _ => return None,
    };
    let bits = if neg { bits | 0x8000_0000 } else { bits };
    Some(f32::from_bits(bits))
}

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: u64,
    /// FNV-1a digest of the canonical config string, hex-encoded.
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    /// Free-form `k=v` tokens describing the stored architecture.
    pub arch: String,
    pub tensors: Vec<(String, Matrix)>,
}

/// FNV-1a digest of a canonical config string.
pub fn config_digest(config: &str) -> String {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in config.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1_0000_0000_01B3);
    }
    format!("{h:016x}")
}

impl Checkpoint {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("SCKPT1 {}\n", self.tensors.len()));
        out.push_str(&format!(
            "meta seed={} epoch={} config={}\n",
            self.meta.seed, self.meta.epoch, self.meta.config_digest
        ));
        out.push_str(&format!("arch {}\n", self.arch));
        for (name, m) in &self.tensors {
            out.push_str(&format!("tensor {name}\n"));
            out.push_str(&format!("{} {}\n", m.rows(), m.cols()));
            let mut first = true;
            for &v in m.as_slice() {
                if !first {
                    out.push(' ');
                }
                out.push_str(&f32_to_hex(v));
                first = false;
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Checkpoint> {
        let mut lines = LineCursor::new(text);
        let header = lines.next_line("header")?;
        let mut parts = header.text.split_ascii_whitespace();
        match parts.next() {
            Some("SCKPT1") => {}
            Some(other) => {
                return Err(Error::parse(
                    header.offset,
                    format!("unsupported checkpoint version '{other}'"),
                ))
            }
            None => return Err(Error::parse(header.offset, "empty header".to_string())),
        }
        let count: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(header.offset, "missing tensor count".to_string()))?;

        let meta_line = lines.next_line("meta")?;
        let meta = parse_meta(meta_line.text)
            .ok_or_else(|| Error::parse(meta_line.offset, "malformed meta line".to_string()))?;

        let arch_line = lines.next_line("arch")?;
        let arch = arch_line
            .text
            .strip_prefix("arch ")
            .or(if arch_line.text == "arch" { Some("") } else { None })
            .ok_or_else(|| Error::parse(arch_line.offset, "malformed arch line".to_string()))?
            .to_string();

        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_line = lines.next_line("tensor name")?;
            let name = name_line
                .text
                .strip_prefix("tensor ")
                .ok_or_else(|| {
                    Error::parse(name_line.offset, "expected 'tensor <name>' line".to_string())
                })?
                .to_string();
            let dims_line = lines.next_line("tensor dims")?;
            let mut dims = dims_line.text.split_ascii_whitespace();
            let rows: usize = dims.parse_next(&name, dims_line.offset)?;
            let cols: usize = dims.parse_next(&name, dims_line.offset)?;
            let values_line = lines.next_line("tensor values")?;
            let mut data = Vec::with_capacity(rows * cols);
            for tok in values_line.text.split_ascii_whitespace() {
                let v = f32_from_hex(tok).ok_or_else(|| {
                    Error::parse(
                        values_line.offset,
                        format!("tensor '{name}': bad value token '{tok}'"),
                    )
                })?;
                data.push(v);
            }
            if data.len() != rows * cols {
                return Err(Error::parse(
                    values_line.offset,
                    format!(
                        "tensor '{name}': {} values for declared dims {rows}x{cols}",
                        data.len()
                    ),
                ));
            }
            let m = Matrix::new(rows, cols, data)
                .map_err(|e| Error::parse(values_line.offset, format!("tensor '{name}': {e}")))?;
            tensors.push((name, m));
        }
        Ok(Checkpoint {
            meta,
            arch,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        Checkpoint::parse(&text)
    }

    /// Parsed arch tokens as (key, value) pairs.
    pub fn arch_map(&self) -> Vec<(&str, &str)> {
        self.arch
            .split_ascii_whitespace()
            .filter_map(|tok| tok.split_once('='))
            .collect()
    }

    pub fn arch_value(&self, key: &str) -> Option<&str> {
        self.arch_map()
            .into_iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
    }

    pub fn arch_usize(&self, key: &str) -> Result<usize> {
        self.arch_value(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::config(format!("checkpoint arch missing integer key '{key}'")))
    }
}

fn parse_meta(line: &str) -> Option<CheckpointMeta> {
    let rest = line.strip_prefix("meta ")?;
    let mut seed = None;
    let mut epoch = None;
    let mut config = None;
    for tok in rest.split_ascii_whitespace() {
        let (k, v) = tok.split_once('=')?;
        match k {
            "seed" => seed = v.parse().ok(),
            "epoch" => epoch = v.parse().ok(),
            "config" => config = Some(v.to_string()),
            _ => return None,
        }
    }
    Some(CheckpointMeta {
        seed: seed?,
        epoch: epoch?,
        config_digest: config?,
    })
}

struct Line<'a> {
    text: &'a str,
    offset: usize,
}

struct LineCursor<'a> {
    text: &'a str,
    at: usize,
}

impl<'a> LineCursor<'a> {
    fn new(text: &'a str) -> Self {
        LineCursor { text, at: 0 }
    }

    fn next_line(&mut self, what: &str) -> Result<Line<'a>> {
        if self.at >= self.text.len() {
            return Err(Error::parse(
                self.at,
                format!("checkpoint truncated: expected {what}"),
            ));
        }
        let start = self.at;
        let rest = &self.text[start..];
        let (line, consumed) = match rest.find('\n') {
            Some(i) => (&rest[..i], i + 1),
            None => (rest, rest.len()),
        };
        self.at += consumed;
        Ok(Line {
            text: line,
            offset: start,
        })
    }
}

trait ParseNext {
    fn parse_next(&mut self, tensor: &str, offset: usize) -> Result<usize>;
}

impl<'a, I: Iterator<Item = &'a str>> ParseNext for I {
    fn parse_next(&mut self, tensor: &str, offset: usize) -> Result<usize> {
        self.next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(offset, format!("tensor '{tensor}': malformed dims line")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hexfloat_round_trips_special_values() {
        let cases = [
            0.0f32,
            -0.0,
            1.0,
            -1.0,
            0.5,
            std::f32::consts::PI,
            f32::MIN_POSITIVE,          // smallest normal
            f32::from_bits(1),          // smallest subnormal
            f32::from_bits(0x8000_0001), // negative subnormal
            f32::MAX,
            f32::MIN,
            1.1754942e-38, // largest subnormal neighborhood
        ];
        for &v in &cases {
            let s = f32_to_hex(v);
            let back = f32_from_hex(&s).unwrap_or_else(|| panic!("failed to parse {s}"));
            assert_eq!(v.to_bits(), back.to_bits(), "{v} via {s}");
        }
    }

    #[test]
    fn hexfloat_round_trips_random_bit_patterns() {
        let mut rng = crate::numcore::RngStream::new(13);
        let mut n = 0;
        while n < 5000 {
            let bits = rng.next_u64() as u32;
            let v = f32::from_bits(bits);
            if !v.is_finite() {
                continue;
            }
            n += 1;
            let back = f32_from_hex(&f32_to_hex(v)).unwrap();
            assert_eq!(v.to_bits(), back.to_bits());
        }
    }

    fn sample_checkpoint() -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                seed: 42,
                epoch: 20,
                config_digest: config_digest("toy"),
            },
            arch: "kind=test n=2".to_string(),
            tensors: vec![
                (
                    "a.w".to_string(),
                    Matrix::from_rows(&[vec![1.0, -0.5], vec![0.25, -0.0]]).unwrap(),
                ),
                ("a.b".to_string(), Matrix::row_vec(vec![f32::from_bits(1)])),
            ],
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ck = sample_checkpoint();
        let text = ck.render();
        let parsed = Checkpoint::parse(&text).unwrap();
        assert_eq!(parsed, ck);
        assert_eq!(parsed.render(), text);
    }

    #[test]
    fn unknown_version_rejected() {
        let text = sample_checkpoint().render().replace("SCKPT1", "SCKPT9");
        match Checkpoint::parse(&text) {
            Err(Error::Parse { offset: 0, msg }) => assert!(msg.contains("SCKPT9")),
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn tampered_dims_name_the_tensor() {
        let text = sample_checkpoint().render().replace("2 2", "2 3");
        match Checkpoint::parse(&text) {
            Err(Error::Parse { msg, .. }) => assert!(msg.contains("a.w"), "{msg}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_rejected() {
        let text = sample_checkpoint().render();
        let cut = &text[..text.len() / 2];
        assert!(matches!(Checkpoint::parse(cut), Err(Error::Parse { .. })));
    }

    #[test]
    fn empty_tensor_list_is_valid() {
        let ck = Checkpoint {
            meta: CheckpointMeta {
                seed: 1,
                epoch: 0,
                config_digest: config_digest(""),
            },
            arch: "kind=empty".to_string(),
            tensors: vec![],
        };
        let parsed = Checkpoint::parse(&ck.render()).unwrap();
        assert_eq!(parsed, ck);
    }
}
