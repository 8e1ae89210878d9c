//! Point-cloud and transform files.
//!
//! `RGF1` is little-endian binary: the magic, then `N`, `D` and an attribute
//! bitmask as `u32`, then `N × 3` `f32` coordinates and the optional blocks
//! in bit order: features (`N × D` `f32`), fg_prob (`N` `f32`), cluster ids
//! (`N` `i32`) and flow (`N × 3` `f32`).

use std::fs;
use std::path::Path;

use rigidflow::{FeatureMatrix, Point3, PointCloud, RigidTransform, Vector3};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"RGF1";
pub const HAS_FEATURES: u32 = 1;
pub const HAS_FG_PROB: u32 = 1 << 1;
pub const HAS_CLUSTER_ID: u32 = 1 << 2;
pub const HAS_FLOW: u32 = 1 << 3;
const KNOWN_BITS: u32 = HAS_FEATURES | HAS_FG_PROB | HAS_CLUSTER_ID | HAS_FLOW;

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, message: impl Into<String>) -> CliError {
        CliError::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if left < n {
            return Err(self.err(self.pos, format!("truncated {what}: need {n} bytes, {left} left")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32_block(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let start = self.pos;
        let raw = self.take(count.checked_mul(4).ok_or_else(|| self.err(start, "block too large"))?, what)?;
        raw.chunks_exact(4)
            .enumerate()
            .map(|(i, c)| {
                let v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
                if v.is_finite() {
                    Ok(v as f64)
                } else {
                    Err(self.err(start + 4 * i, format!("non-finite value in {what}")))
                }
            })
            .collect()
    }
}

fn to_points(v: &[f64]) -> Vec<Point3> {
    v.chunks_exact(3).map(|c| Point3::new(c[0], c[1], c[2])).collect()
}

fn to_vectors(v: &[f64]) -> Vec<Vector3> {
    v.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect()
}

pub fn decode_rgf(path: &Path, bytes: &[u8]) -> Result<PointCloud> {
    let mut r = Reader { path, bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.err(0, "bad magic, expected RGF1"));
    }
    let n = r.u32("point count")? as usize;
    let d = r.u32("feature dimension")? as usize;
    let mask_at = r.pos;
    let mask = r.u32("attribute mask")?;
    if mask & !KNOWN_BITS != 0 {
        return Err(r.err(mask_at, format!("unknown attribute bits {:#x}", mask & !KNOWN_BITS)));
    }
    if (mask & HAS_FEATURES != 0) != (d > 0) {
        return Err(r.err(4 + 4, format!("feature dimension {d} inconsistent with attribute mask")));
    }

    let coords = r.f32_block(3 * n, "coordinates")?;
    let mut pc = PointCloud::new(to_points(&coords))?;
    if mask & HAS_FEATURES != 0 {
        let f = r.f32_block(n * d, "features")?;
        pc = pc.with_features(FeatureMatrix::new(d, f)?)?;
    }
    if mask & HAS_FG_PROB != 0 {
        let start = r.pos;
        let p = r.f32_block(n, "fg_prob")?;
        if let Some(i) = p.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(r.err(start + 4 * i, format!("fg_prob {} outside [0, 1]", p[i])));
        }
        pc = pc.with_fg_prob(p)?;
    }
    if mask & HAS_CLUSTER_ID != 0 {
        let raw = r.take(4 * n, "cluster ids")?;
        let ids = raw
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        pc = pc.with_cluster_ids(ids)?;
    }
    if mask & HAS_FLOW != 0 {
        let f = r.f32_block(3 * n, "flow")?;
        pc = pc.with_flow(to_vectors(&f))?;
    }
    if r.pos != bytes.len() {
        return Err(r.err(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(pc)
}

pub fn encode_rgf(pc: &PointCloud) -> Vec<u8> {
    let n = pc.len();
    let d = pc.features().map_or(0, |f| f.dim());
    let mut mask = 0;
    if pc.features().is_some() {
        mask |= HAS_FEATURES;
    }
    if pc.fg_prob().is_some() {
        mask |= HAS_FG_PROB;
    }
    if pc.cluster_ids().is_some() {
        mask |= HAS_CLUSTER_ID;
    }
    if pc.flow().is_some() {
        mask |= HAS_FLOW;
    }
    let mut out = Vec::with_capacity(16 + 4 * n * (3 + d + 1 + 1 + 3));
    out.extend_from_slice(MAGIC);
    for v in [n as u32, d as u32, mask] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut put = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    for p in pc.points() {
        p.coords.iter().for_each(|&c| put(c));
    }
    if let Some(f) = pc.features() {
        f.as_slice().iter().for_each(|&v| put(v));
    }
    if let Some(h) = pc.fg_prob() {
        h.iter().for_each(|&v| put(v));
    }
    if let Some(ids) = pc.cluster_ids() {
        for id in ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
    }
    if let Some(flow) = pc.flow() {
        for v in flow {
            for &c in v.iter() {
                out.extend_from_slice(&(c as f32).to_le_bytes());
            }
        }
    }
    out
}

/// Plain text: one point per line as `x y z` or `x y z vx vy vz`; blank
/// lines and `#` comments are skipped.
pub fn decode_text(path: &Path, text: &str) -> Result<PointCloud> {
    let mut pts = Vec::new();
    let mut flow = Vec::new();
    let mut width = None;
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| CliError::Parse {
            path: path.to_path_buf(),
            line: no + 1,
            message,
        };
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| err(format!("`{t}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != 3 && vals.len() != 6 {
            return Err(err(format!("expected 3 or 6 values, found {}", vals.len())));
        }
        if *width.get_or_insert(vals.len()) != vals.len() {
            return Err(err("mixed rows with and without flow".into()));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(err("non-finite value".into()));
        }
        pts.push(Point3::new(vals[0], vals[1], vals[2]));
        if vals.len() == 6 {
            flow.push(Vector3::new(vals[3], vals[4], vals[5]));
        }
    }
    let pc = PointCloud::new(pts)?;
    Ok(if width == Some(6) { pc.with_flow(flow)? } else { pc })
}

pub fn encode_text(pc: &PointCloud) -> String {
    let mut s = String::new();
    for (i, p) in pc.points().iter().enumerate() {
        s.push_str(&format!("{} {} {}", p.x, p.y, p.z));
        if let Some(f) = pc.flow() {
            s.push_str(&format!(" {} {} {}", f[i].x, f[i].y, f[i].z));
        }
        s.push('\n');
    }
    s
}

/// Reads either format, telling them apart by the magic.
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    if bytes.starts_with(MAGIC) {
        decode_rgf(path, &bytes)
    } else {
        let text = std::str::from_utf8(&bytes).map_err(|e| CliError::Format {
            path: path.to_path_buf(),
            offset: e.valid_up_to() as u64,
            message: "neither RGF1 nor UTF-8 text".into(),
        })?;
        decode_text(path, text)
    }
}

pub fn write_cloud(path: &Path, pc: &PointCloud) -> Result<()> {
    fs::write(path, encode_rgf(pc)).map_err(|e| CliError::io(path, e))
}

/// Row-major 3×4 `[R | t]`, one row per line.
pub fn encode_transforms(ts: &[RigidTransform]) -> String {
    let blocks: Vec<String> = ts
        .iter()
        .map(|t| {
            (0..3)
                .map(|r| {
                    let row = t.rotation().row(r);
                    format!("{} {} {} {}\n", row[0], row[1], row[2], t.translation()[r])
                })
                .collect()
        })
        .collect();
    blocks.join("\n")
}

pub fn decode_transforms(path: &Path, text: &str) -> Result<Vec<RigidTransform>> {
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| CliError::Parse {
                path: path.to_path_buf(),
                line: no + 1,
                message: e.to_string(),
            })?;
        if vals.len() != 4 {
            return Err(CliError::Parse {
                path: path.to_path_buf(),
                line: no + 1,
                message: format!("expected 4 values per row, found {}", vals.len()),
            });
        }
        rows.push((no + 1, vals));
    }
    if !rows.len().is_multiple_of(3) {
        return Err(CliError::Parse {
            path: path.to_path_buf(),
            line: rows.last().map_or(0, |r| r.0),
            message: format!("{} rows do not form whole 3×4 transforms", rows.len()),
        });
    }
    rows.chunks_exact(3)
        .map(|c| {
            let m = nalgebra::Matrix3::from_fn(|r, k| c[r].1[k]);
            let t = Vector3::new(c[0].1[3], c[1].1[3], c[2].1[3]);
            RigidTransform::new(m, t).map_err(|e| CliError::Parse {
                path: path.to_path_buf(),
                line: c[0].0,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_transforms(path: &Path) -> Result<Vec<RigidTransform>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    decode_transforms(path, &text)
}

pub fn write_transforms(path: &Path, ts: &[RigidTransform]) -> Result<()> {
    fs::write(path, encode_transforms(ts)).map_err(|e| CliError::io(path, e))
}
