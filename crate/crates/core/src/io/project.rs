//! On-disk project layout and result bundle.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{
    format_focals, format_trajectory, parse_focals, parse_trajectory, read_depth, read_flow, read_mask, read_text, write_bytes,
    write_depth, write_flow, write_mask,
};
use crate::correspondence::{BinaryMask, FlowBank};
use crate::deformation::DeformationGrid;
use crate::error::{Error, Result};
use crate::geometry::DepthMap;
use crate::solver::{CameraParamBlock, FrameParams};

/// `{i:06}_{j:06}.{ext}`.
pub fn pair_file_name(i: usize, j: usize, ext: &str) -> String {
    format!("{i:06}_{j:06}.{ext}")
}

fn parse_pair_name(name: &str, ext: &str) -> Option<(usize, usize)> {
    let stem = name.strip_suffix(ext)?.strip_suffix('.')?;
    let (a, b) = stem.split_once('_')?;
    if a.len() != 6 || b.len() != 6 {
        return None;
    }
    Some((a.parse().ok()?, b.parse().ok()?))
}

/// Paths of a project rooted at one directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProjectLayout {
    pub root: PathBuf,
}

impl ProjectLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.txt")
    }

    pub fn depth_dir(&self) -> PathBuf {
        self.root.join("depth")
    }

    pub fn depth_path(&self, k: usize) -> PathBuf {
        self.depth_dir().join(format!("{k:06}.pfm"))
    }

    pub fn flow_dir(&self) -> PathBuf {
        self.root.join("flow")
    }

    pub fn flow_path(&self, i: usize, j: usize) -> PathBuf {
        self.flow_dir().join(pair_file_name(i, j, "flo"))
    }

    /// Dynamic-object masks, optional.
    pub fn masks_dir(&self) -> PathBuf {
        self.root.join("masks")
    }

    pub fn mask_path(&self, k: usize) -> PathBuf {
        self.masks_dir().join(format!("{k:06}.pgm"))
    }

    /// Ground truth written by the synthetic generator.
    pub fn gt_dir(&self) -> PathBuf {
        self.root.join("gt")
    }

    pub fn out_dir(&self) -> PathBuf {
        self.root.join("out")
    }

    /// Forward-backward consistency masks.
    pub fn fb_dir(&self) -> PathBuf {
        self.out_dir().join("fb")
    }

    pub fn fb_path(&self, i: usize, j: usize) -> PathBuf {
        self.fb_dir().join(pair_file_name(i, j, "pgm"))
    }

    /// Number of depth files. Indices must run from 0 without gaps.
    pub fn frame_count(&self) -> Result<usize> {
        let dir = self.depth_dir();
        if !dir.is_dir() {
            return Err(Error::MissingPath(dir));
        }
        let mut indices = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let name = entry.map_err(|e| Error::io(&dir, e))?.file_name();
            let stem = name.to_str().and_then(|n| n.strip_suffix(".pfm"));
            if let Some(k) = stem.filter(|s| s.len() == 6).and_then(|s| s.parse::<usize>().ok()) {
                indices.push(k);
            }
        }
        indices.sort_unstable();
        match indices.iter().enumerate().find(|(k, &i)| *k != i) {
            Some((k, _)) => Err(Error::MissingPath(self.depth_path(k))),
            None if indices.is_empty() => Err(Error::MissingPath(self.depth_path(0))),
            None => Ok(indices.len()),
        }
    }

    pub fn read_depths(&self, dir: &Path, n: usize) -> Result<Vec<DepthMap>> {
        let depths: Vec<DepthMap> = (0..n)
            .map(|k| read_depth(&dir.join(format!("{k:06}.pfm")), k))
            .collect::<Result<_>>()?;
        check_same_size(depths.iter().map(|d| (d.width, d.height)))?;
        Ok(depths)
    }

    pub fn write_depths(&self, dir: &Path, depths: &[DepthMap]) -> Result<()> {
        for (k, d) in depths.iter().enumerate() {
            write_depth(&dir.join(format!("{k:06}.pfm")), d)?;
        }
        Ok(())
    }

    /// Every `.flo` file under `flow/`. Both directions between consecutive
    /// frames are required.
    pub fn read_flows(&self, n: usize) -> Result<FlowBank> {
        let dir = self.flow_dir();
        if !dir.is_dir() {
            return Err(Error::MissingPath(dir));
        }
        let mut keys = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            if let Some((i, j)) = entry.file_name().to_str().and_then(|s| parse_pair_name(s, "flo")) {
                if i < n && j < n && i != j {
                    keys.push((i, j));
                }
            }
        }
        keys.sort_unstable();
        for k in 0..n.saturating_sub(1) {
            for (i, j) in [(k, k + 1), (k + 1, k)] {
                if keys.binary_search(&(i, j)).is_err() {
                    return Err(Error::MissingPath(self.flow_path(i, j)));
                }
            }
        }
        let mut bank = FlowBank::default();
        for (i, j) in keys {
            bank.insert(read_flow(&self.flow_path(i, j), i, j)?);
        }
        check_same_size(bank.flows.values().map(|f| (f.width, f.height)))?;
        Ok(bank)
    }

    pub fn write_flows(&self, bank: &FlowBank) -> Result<()> {
        for ((i, j), f) in &bank.flows {
            write_flow(&self.flow_path(*i, *j), f)?;
        }
        Ok(())
    }

    /// Dynamic masks; all `None` when `masks/` is absent.
    pub fn read_dynamic_masks(&self, n: usize) -> Result<Vec<Option<BinaryMask>>> {
        if !self.masks_dir().is_dir() {
            return Ok(vec![None; n]);
        }
        (0..n).map(|k| read_mask(&self.mask_path(k)).map(Some)).collect()
    }

    pub fn write_dynamic_masks(&self, masks: &[Option<BinaryMask>]) -> Result<()> {
        for (k, m) in masks.iter().enumerate() {
            if let Some(m) = m {
                write_mask(&self.mask_path(k), m)?;
            }
        }
        Ok(())
    }

    /// Loads stored consistency masks into `bank`, one per stored flow.
    pub fn read_fb_masks(&self, bank: &mut FlowBank) -> Result<()> {
        if !self.fb_dir().is_dir() {
            return Err(Error::MissingPath(self.fb_dir()));
        }
        let keys: Vec<(usize, usize)> = bank.flows.keys().copied().collect();
        for (i, j) in keys {
            let path = self.fb_path(i, j);
            if path.exists() {
                bank.masks.insert((i, j), read_mask(&path)?);
            }
        }
        Ok(())
    }

    pub fn write_fb_masks(&self, bank: &FlowBank) -> Result<()> {
        let sorted: BTreeMap<_, _> = bank.masks.iter().collect();
        for ((i, j), m) in sorted {
            write_mask(&self.fb_path(*i, *j), m)?;
        }
        Ok(())
    }

    pub fn load_inputs(&self) -> Result<ProjectData> {
        let n = self.frame_count()?;
        let depths = self.read_depths(&self.depth_dir(), n)?;
        let flows = self.read_flows(n)?;
        let dyn_masks = self.read_dynamic_masks(n)?;
        let (w, h) = (depths[0].width, depths[0].height);
        let sizes = flows
            .flows
            .values()
            .map(|f| (f.width, f.height))
            .chain(dyn_masks.iter().flatten().map(|m| (m.width, m.height)));
        check_same_size(std::iter::once((w, h)).chain(sizes))?;
        Ok(ProjectData { depths, flows, dyn_masks })
    }

    pub fn save_inputs(&self, data: &ProjectData) -> Result<()> {
        self.write_depths(&self.depth_dir(), &data.depths)?;
        self.write_flows(&data.flows)?;
        self.write_dynamic_masks(&data.dyn_masks)
    }
}

fn check_same_size(mut sizes: impl Iterator<Item = (usize, usize)>) -> Result<()> {
    if let Some(first) = sizes.next() {
        for s in sizes {
            if s != first {
                return Err(Error::DimensionMismatch { expected: first, got: s });
            }
        }
    }
    Ok(())
}

/// Inputs of a project.
#[derive(Debug, Clone)]
pub struct ProjectData {
    pub depths: Vec<DepthMap>,
    pub flows: FlowBank,
    pub dyn_masks: Vec<Option<BinaryMask>>,
}

fn format_grids(params: &CameraParamBlock) -> String {
    let mut s = String::from("# frame cols rows handles (row-major)\n");
    for (k, f) in params.frames.iter().enumerate() {
        s.push_str(&format!("{k} {} {}", f.grid.cols, f.grid.rows));
        for h in &f.grid.handles {
            s.push_str(&format!(" {h}"));
        }
        s.push('\n');
    }
    s
}

/// Writes `trajectory.txt`, `focal.txt` and `grids.txt` into `dir`.
pub fn write_params(dir: &Path, params: &CameraParamBlock) -> Result<()> {
    if params.is_empty() {
        return Err(Error::InvalidInput("cannot write an empty video".into()));
    }
    write_bytes(&dir.join("trajectory.txt"), format_trajectory(&params.poses()).as_bytes())?;
    let focals: Vec<f64> = params.frames.iter().map(|f| f.focal).collect();
    write_bytes(&dir.join("focal.txt"), format_focals(&focals).as_bytes())?;
    write_bytes(&dir.join("grids.txt"), format_grids(params).as_bytes())
}

/// Reads the files written by [`write_params`] for `width x height` frames.
pub fn read_params(dir: &Path, width: usize, height: usize) -> Result<CameraParamBlock> {
    let tpath = dir.join("trajectory.txt");
    let poses = parse_trajectory(&read_text(&tpath)?, &tpath)?;
    let fpath = dir.join("focal.txt");
    let focals = parse_focals(&read_text(&fpath)?, &fpath)?;
    let gpath = dir.join("grids.txt");
    let text = read_text(&gpath)?;
    let mut grids = Vec::new();
    for (lineno, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
    {
        let bad = || Error::format(&gpath, format!("line {}: malformed grid", lineno + 1));
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 3 {
            return Err(bad());
        }
        let cols: usize = tok[1].parse().map_err(|_| bad())?;
        let rows: usize = tok[2].parse().map_err(|_| bad())?;
        let handles: Vec<f64> = tok[3..]
            .iter()
            .map(|t| t.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        grids.push(DeformationGrid::new(cols, rows, width, height, handles).map_err(|e| Error::format(&gpath, e.to_string()))?);
    }
    if poses.len() != focals.len() || poses.len() != grids.len() || poses.is_empty() {
        return Err(Error::format(
            dir,
            format!("{} poses, {} focals and {} grids", poses.len(), focals.len(), grids.len()),
        ));
    }
    let frames = poses
        .into_iter()
        .zip(focals)
        .zip(grids)
        .map(|((pose, focal), grid)| FrameParams { pose, focal, grid })
        .collect();
    Ok(CameraParamBlock { frames })
}

/// Writes the parameters, optional final depths under `depth/`, and the
/// report as `report.json`. Output bytes depend only on the inputs.
pub fn write_result_bundle(dir: &Path, params: &CameraParamBlock, depths: Option<&[DepthMap]>, report: &impl Serialize) -> Result<()> {
    write_params(dir, params)?;
    if let Some(depths) = depths {
        if depths.len() != params.len() {
            return Err(Error::InvalidInput(format!(
                "{} depth maps for {} frames",
                depths.len(),
                params.len()
            )));
        }
        for (k, d) in depths.iter().enumerate() {
            write_depth(&dir.join("depth").join(format!("{k:06}.pfm")), d)?;
        }
    }
    write_json(&dir.join("report.json"), report)
}

/// Pretty JSON with a trailing newline.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}
