//! File formats: PFM depth, Middlebury flow, binary PGM masks, and the text
//! files of the result bundle.

mod config;
mod project;

pub use config::{ConfigOverrides, ConfigValue, PipelineConfig};
pub use project::{pair_file_name, read_params, write_json, write_params, write_result_bundle, ProjectData, ProjectLayout};

use std::fs;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};

use crate::correspondence::{BinaryMask, FlowField};
use crate::error::{Error, Result};
use crate::geometry::{DepthMap, Pose};

/// Tag at the start of every `.flo` file.
pub const FLO_MAGIC: f32 = 202021.25;

/// Flow components at or above this magnitude mean "unknown".
pub const UNKNOWN_FLOW_THRESHOLD: f64 = 1e9;

/// Value written for unknown flow.
pub const UNKNOWN_FLOW: f64 = 1e10;

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    let bytes = read_bytes(path)?;
    String::from_utf8(bytes).map_err(|_| Error::format(path, "not valid UTF-8 text"))
}

/// Reads `n` whitespace-separated header tokens, skipping `#` comments,
/// then consumes the single whitespace byte that ends the header.
fn header_tokens(bytes: &[u8], n: usize) -> std::result::Result<(Vec<String>, usize), String> {
    let mut tokens = Vec::with_capacity(n);
    let mut i = 0;
    while tokens.len() < n {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err("truncated header".into());
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err("header is not terminated by whitespace".into());
    }
    Ok((tokens, i + 1))
}

fn parse_dim(token: &str, what: &str) -> std::result::Result<usize, String> {
    match token.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(format!("invalid {what} {token:?}")),
    }
}

fn check_payload(len: usize, expected: usize) -> std::result::Result<(), String> {
    match len.cmp(&expected) {
        std::cmp::Ordering::Less => Err(format!("truncated data: {len} bytes, expected {expected}")),
        std::cmp::Ordering::Greater => Err(format!("{} trailing bytes after data", len - expected)),
        std::cmp::Ordering::Equal => Ok(()),
    }
}

/// Encodes a single-channel little-endian PFM. Rows are stored bottom to
/// top, as the format prescribes; `values` is in top-to-bottom raster order.
pub fn encode_pfm(width: usize, height: usize, values: &[f32]) -> Vec<u8> {
    let mut out = format!("Pf\n{width} {height}\n-1\n").into_bytes();
    out.reserve(values.len() * 4);
    for y in (0..height).rev() {
        for v in &values[y * width..(y + 1) * width] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decodes a single-channel PFM into top-to-bottom raster order. The sign
/// of the scale line selects the byte order.
pub fn decode_pfm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<f32>), String> {
    let (tok, offset) = header_tokens(bytes, 4)?;
    if tok[0] != "Pf" {
        return Err(format!("expected magic \"Pf\", found {:?}", tok[0]));
    }
    let width = parse_dim(&tok[1], "width")?;
    let height = parse_dim(&tok[2], "height")?;
    let scale: f32 = tok[3].parse().map_err(|_| format!("invalid scale {:?}", tok[3]))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(format!("invalid scale {:?}", tok[3]));
    }
    let little = scale < 0.0;
    let data = &bytes[offset..];
    check_payload(data.len(), width * height * 4)?;
    let mut values = vec![0f32; width * height];
    for (k, chunk) in data.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (x, file_row) = (k % width, k / width);
        values[(height - 1 - file_row) * width + x] = v;
    }
    Ok((width, height, values))
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    let values: Vec<f32> = depth.values.iter().map(|&v| v as f32).collect();
    write_bytes(path, &encode_pfm(depth.width, depth.height, &values))
}

/// Reads a PFM depth map. NaN, infinite or non-positive values are rejected
/// with their pixel coordinate.
pub fn read_depth(path: &Path, frame: usize) -> Result<DepthMap> {
    let bytes = read_bytes(path)?;
    let (w, h, values) = decode_pfm(&bytes).map_err(|m| Error::format(path, m))?;
    for (k, v) in values.iter().enumerate() {
        let (x, y) = (k % w, k / w);
        if v.is_nan() {
            return Err(Error::format(path, format!("NaN depth at pixel ({x}, {y})")));
        }
        if !(v.is_finite() && *v > 0.0) {
            return Err(Error::format(
                path,
                format!("depth {v} at pixel ({x}, {y}) is not positive and finite"),
            ));
        }
    }
    DepthMap::new(w, h, frame, values.into_iter().map(f64::from).collect())
}

pub fn encode_flo(width: usize, height: usize, values: &[[f32; 2]]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + values.len() * 8);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(width as i32).to_le_bytes());
    out.extend_from_slice(&(height as i32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v[0].to_le_bytes());
        out.extend_from_slice(&v[1].to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<[f32; 2]>), String> {
    if bytes.len() < 12 {
        return Err("not a flow file: shorter than the header".into());
    }
    let word = |k: usize| [bytes[4 * k], bytes[4 * k + 1], bytes[4 * k + 2], bytes[4 * k + 3]];
    if f32::from_le_bytes(word(0)) != FLO_MAGIC {
        return Err("not a flow file: bad magic".into());
    }
    let (w, h) = (i32::from_le_bytes(word(1)), i32::from_le_bytes(word(2)));
    if w <= 0 || h <= 0 {
        return Err(format!("invalid flow dimensions {w}x{h}"));
    }
    let (w, h) = (w as usize, h as usize);
    check_payload(bytes.len() - 12, w * h * 8)?;
    let values = bytes[12..]
        .chunks_exact(8)
        .map(|c| {
            [
                f32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                f32::from_le_bytes([c[4], c[5], c[6], c[7]]),
            ]
        })
        .collect();
    Ok((w, h, values))
}

pub fn write_flow(path: &Path, flow: &FlowField) -> Result<()> {
    let values: Vec<[f32; 2]> = flow.values.iter().map(|v| [v.x as f32, v.y as f32]).collect();
    write_bytes(path, &encode_flo(flow.width, flow.height, &values))
}

/// Reads a `.flo` file as the flow `src -> dst`. Unknown vectors are kept
/// as stored; they never pass a consistency check.
pub fn read_flow(path: &Path, src: usize, dst: usize) -> Result<FlowField> {
    let bytes = read_bytes(path)?;
    let (w, h, values) = decode_flo(&bytes).map_err(|m| Error::format(path, m))?;
    let values = values.into_iter().map(|[u, v]| Vector2::new(u as f64, v as f64)).collect();
    FlowField::new(w, h, src, dst, values).map_err(|e| Error::format(path, e.to_string()))
}

pub fn encode_pgm(mask: &BinaryMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.values.iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

/// Decodes an 8-bit binary PGM; only 0 and 255 are accepted.
pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<BinaryMask, String> {
    let (tok, offset) = header_tokens(bytes, 4)?;
    if tok[0] != "P5" {
        return Err(format!("expected magic \"P5\", found {:?}", tok[0]));
    }
    let width = parse_dim(&tok[1], "width")?;
    let height = parse_dim(&tok[2], "height")?;
    if tok[3] != "255" {
        return Err(format!("expected maxval 255, found {:?}", tok[3]));
    }
    let data = &bytes[offset..];
    check_payload(data.len(), width * height)?;
    let mut values = Vec::with_capacity(data.len());
    for (k, &b) in data.iter().enumerate() {
        match b {
            0 => values.push(false),
            255 => values.push(true),
            _ => {
                return Err(format!(
                    "mask value {b} at pixel ({}, {}) is neither 0 nor 255",
                    k % width,
                    k / width
                ))
            }
        }
    }
    Ok(BinaryMask { width, height, values })
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_bytes(path, &encode_pgm(mask))
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let bytes = read_bytes(path)?;
    decode_pgm(&bytes).map_err(|m| Error::format(path, m))
}

/// Raw little-endian float32 array, for plotting tools.
pub fn write_f32_array(path: &Path, values: &[f64]) -> Result<()> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    write_bytes(path, &out)
}

pub fn read_f32_array(path: &Path) -> Result<Vec<f32>> {
    let bytes = read_bytes(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(path, "length is not a multiple of 4"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// One line per pose: `index tx ty tz qx qy qz qw`.
pub fn format_trajectory(poses: &[Pose]) -> String {
    let mut s = String::from("# frame tx ty tz qx qy qz qw\n");
    for (k, p) in poses.iter().enumerate() {
        let q = p.quaternion();
        let t = p.translation;
        s.push_str(&format!("{k} {} {} {} {} {} {} {}\n", t.x, t.y, t.z, q.i, q.j, q.k, q.w));
    }
    s
}

fn numbers(line: &str, path: &Path, lineno: usize) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::format(path, format!("line {lineno}: invalid number {t:?}")))
        })
        .collect()
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(k, l)| (k + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub fn parse_trajectory(text: &str, path: &Path) -> Result<Vec<Pose>> {
    let mut poses = Vec::new();
    for (lineno, line) in data_lines(text) {
        let v = numbers(line, path, lineno)?;
        if v.len() != 8 {
            return Err(Error::format(path, format!("line {lineno}: expected 8 fields, found {}", v.len())));
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        if (q.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::format(path, format!("line {lineno}: quaternion is not unit length")));
        }
        poses.push(Pose::from_quaternion(
            &UnitQuaternion::from_quaternion(q),
            Vector3::new(v[1], v[2], v[3]),
        ));
    }
    Ok(poses)
}

pub fn write_trajectory(path: &Path, poses: &[Pose]) -> Result<()> {
    write_bytes(path, format_trajectory(poses).as_bytes())
}

pub fn read_trajectory(path: &Path) -> Result<Vec<Pose>> {
    parse_trajectory(&read_text(path)?, path)
}

/// One line per frame: `index focal`.
pub fn format_focals(focals: &[f64]) -> String {
    let mut s = String::from("# frame focal\n");
    for (k, f) in focals.iter().enumerate() {
        s.push_str(&format!("{k} {f}\n"));
    }
    s
}

pub fn parse_focals(text: &str, path: &Path) -> Result<Vec<f64>> {
    data_lines(text)
        .map(|(lineno, line)| {
            let v = numbers(line, path, lineno)?;
            match v.as_slice() {
                [_, f] if *f > 0.0 => Ok(*f),
                _ => Err(Error::format(
                    path,
                    format!("line {lineno}: expected \"frame focal\" with focal > 0"),
                )),
            }
        })
        .collect()
}
