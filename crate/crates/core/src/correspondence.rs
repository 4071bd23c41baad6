//! Flow fields, masks, the hierarchical frame-pair set, forward-backward
//! consistency, chained long-range flow and match subsampling.

use std::collections::{BTreeMap, HashMap};

use nalgebra::Vector2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{bilinear_taps, ImagePlane, PixelCoord};
use crate::par::{map_slice, Exec};

/// Dense per-pixel displacement from frame `src` to frame `dst`, in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub src: usize,
    pub dst: usize,
    pub values: Vec<Vector2<f64>>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, src: usize, dst: usize, values: Vec<Vector2<f64>>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "flow raster has {} vectors, expected {width}x{height}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !(v.x.is_finite() && v.y.is_finite())) {
            return Err(Error::InvalidInput(format!(
                "non-finite flow at pixel ({}, {})",
                i % width.max(1),
                i / width.max(1)
            )));
        }
        Ok(Self {
            width,
            height,
            src,
            dst,
            values,
        })
    }

    pub fn constant(width: usize, height: usize, src: usize, dst: usize, v: Vector2<f64>) -> Self {
        Self {
            width,
            height,
            src,
            dst,
            values: vec![v; width * height],
        }
    }

    pub fn plane(&self) -> ImagePlane {
        ImagePlane::new(self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize) -> Vector2<f64> {
        self.values[y * self.width + x]
    }

    /// Bilinear sample; `None` outside the raster.
    pub fn sample(&self, p: PixelCoord) -> Option<Vector2<f64>> {
        let taps = bilinear_taps(self.width, self.height, p)?;
        let mut v = Vector2::zeros();
        for (i, w) in taps {
            if w != 0.0 {
                v += w * self.values[i];
            }
        }
        Some(v)
    }
}

/// Per-pixel boolean raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub values: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "mask has {} pixels, expected {width}x{height}",
                values.len()
            )));
        }
        Ok(Self { width, height, values })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.values[y * self.width + x]
    }

    /// Value at the pixel nearest to `p`; false outside the raster.
    pub fn at(&self, p: PixelCoord) -> bool {
        if !ImagePlane::new(self.width, self.height).contains(p) {
            return false;
        }
        let x = (p.x.round().max(0.0) as usize).min(self.width - 1);
        let y = (p.y.round().max(0.0) as usize).min(self.height - 1);
        self.get(x, y)
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|v| **v).count()
    }
}

/// Unordered frame pairs `(i, j)`, `i < j`, with `j - i = k` a power of two
/// and `i` a multiple of `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    pub pairs: Vec<(usize, usize)>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        let (a, b) = (i.min(j), i.max(j));
        self.pairs.contains(&(a, b))
    }

    /// One `i j` line per pair.
    pub fn to_text(&self) -> String {
        self.pairs.iter().map(|(i, j)| format!("{i} {j}\n")).collect()
    }
}

/// Builds the pair set for `n_frames`, grouped by gap `k = 1, 2, 4, ...`.
pub fn build_pair_set(n_frames: usize) -> Result<PairSet> {
    if n_frames < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 frames, got {n_frames}")));
    }
    let mut pairs = Vec::new();
    let mut k = 1;
    while k < n_frames {
        let mut i = 0;
        while i + k < n_frames {
            pairs.push((i, i + k));
            i += k;
        }
        k *= 2;
    }
    Ok(PairSet { pairs })
}

/// Forward-backward consistency: `p` is kept when
/// `|f_ij(p) + f_ji(p + f_ij(p))| < threshold`.
pub fn fb_consistency_mask(flow_ij: &FlowField, flow_ji: &FlowField, threshold: f64) -> Result<BinaryMask> {
    if flow_ij.width != flow_ji.width || flow_ij.height != flow_ji.height {
        return Err(Error::DimensionMismatch {
            expected: (flow_ij.width, flow_ij.height),
            got: (flow_ji.width, flow_ji.height),
        });
    }
    let w = flow_ij.width;
    let values = flow_ij
        .values
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let p = PixelCoord::new((i % w) as f64 + f.x, (i / w) as f64 + f.y);
            match flow_ji.sample(p) {
                Some(back) => (f + back).norm() < threshold,
                None => false,
            }
        })
        .collect();
    BinaryMask::new(w, flow_ij.height, values)
}

/// Flow fields and their consistency masks, keyed by `(src, dst)`.
#[derive(Debug, Clone, Default)]
pub struct FlowBank {
    pub flows: BTreeMap<(usize, usize), FlowField>,
    pub masks: HashMap<(usize, usize), BinaryMask>,
}

impl FlowBank {
    pub fn insert(&mut self, flow: FlowField) {
        self.flows.insert((flow.src, flow.dst), flow);
    }

    pub fn get(&self, src: usize, dst: usize) -> Option<&FlowField> {
        self.flows.get(&(src, dst))
    }

    /// Computes consistency masks for every stored flow whose reverse is also
    /// stored.
    pub fn compute_masks(&mut self, threshold: f64, exec: Exec) -> Result<()> {
        let keys: Vec<(usize, usize)> = self
            .flows
            .keys()
            .copied()
            .filter(|(i, j)| self.flows.contains_key(&(*j, *i)))
            .collect();
        let masks = map_slice(exec, &keys, |&(i, j)| {
            fb_consistency_mask(&self.flows[&(i, j)], &self.flows[&(j, i)], threshold)
        });
        for (key, mask) in keys.into_iter().zip(masks) {
            self.masks.insert(key, mask?);
        }
        Ok(())
    }
}

/// Composes consecutive flows from `i` to `j`, resampling bilinearly at each
/// hop. A pixel is valid only if every hop starts inside the raster on a
/// pixel passing that hop's consistency mask (when one is stored) and the
/// final position is inside the raster.
pub fn chain_flow(bank: &FlowBank, i: usize, j: usize, width: usize, height: usize) -> Result<(FlowField, BinaryMask)> {
    let step: isize = if j >= i { 1 } else { -1 };
    let mut hops = Vec::new();
    let mut k = i as isize;
    while k != j as isize {
        let (a, b) = (k as usize, (k + step) as usize);
        let flow = bank.get(a, b).ok_or(Error::MissingFlow { src: a, dst: b })?;
        if flow.width != width || flow.height != height {
            return Err(Error::DimensionMismatch {
                expected: (width, height),
                got: (flow.width, flow.height),
            });
        }
        hops.push((flow, bank.masks.get(&(a, b))));
        k += step;
    }
    let plane = ImagePlane::new(width, height);
    let mut values = Vec::with_capacity(width * height);
    let mut valid = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let start = PixelCoord::new(x as f64, y as f64);
            let mut pos = start;
            let mut ok = true;
            for (flow, mask) in &hops {
                if let Some(m) = mask {
                    if !m.at(pos) {
                        ok = false;
                    }
                }
                match flow.sample(pos) {
                    Some(f) => pos = pos.offset(f.x, f.y),
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            ok &= plane.contains(pos);
            values.push(if ok {
                Vector2::new(pos.x - start.x, pos.y - start.y)
            } else {
                Vector2::zeros()
            });
            valid.push(ok);
        }
    }
    Ok((
        FlowField {
            width,
            height,
            src: i,
            dst: j,
            values,
        },
        BinaryMask {
            width,
            height,
            values: valid,
        },
    ))
}

/// A correspondence between `p` in frame `src` and `q = p + f(p)` in `dst`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub pair: usize,
    pub src: usize,
    pub dst: usize,
    pub p: PixelCoord,
    pub q: PixelCoord,
}

/// Subsampled matches plus the number of flow fields with no eligible pixel.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchSet {
    pub matches: Vec<Match>,
    pub empty_flows: usize,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn extend(&mut self, other: MatchSet) {
        self.matches.extend(other.matches);
        self.empty_flows += other.empty_flows;
    }
}

/// Seeded spatially stratified subsampling: eligible pixels (consistent flow,
/// not dynamic, target inside the raster) are visited in a seeded random
/// order and accepted when no accepted pixel lies closer than `min_dist`.
pub fn sample_matches(
    flow: &FlowField,
    pair: usize,
    m_flow: &BinaryMask,
    m_dyn: &BinaryMask,
    min_dist: f64,
    seed: u64,
) -> Result<MatchSet> {
    for m in [m_flow, m_dyn] {
        if m.width != flow.width || m.height != flow.height {
            return Err(Error::DimensionMismatch {
                expected: (flow.width, flow.height),
                got: (m.width, m.height),
            });
        }
    }
    if !(min_dist > 0.0) {
        return Err(Error::InvalidArgument(format!("min_dist must be positive, got {min_dist}")));
    }
    let plane = flow.plane();
    let w = flow.width;
    let mut eligible: Vec<usize> = (0..w * flow.height)
        .filter(|&i| {
            let f = flow.values[i];
            let q = PixelCoord::new((i % w) as f64 + f.x, (i / w) as f64 + f.y);
            m_flow.values[i] && !m_dyn.values[i] && plane.interior(q)
        })
        .collect();
    if eligible.is_empty() {
        return Ok(MatchSet {
            matches: Vec::new(),
            empty_flows: 1,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((flow.src as u64) << 32) ^ (flow.dst as u64).wrapping_mul(0x9E37_79B9));
    eligible.shuffle(&mut rng);

    let cells_x = ((w as f64 / min_dist).ceil() as usize).max(1);
    let cells_y = ((flow.height as f64 / min_dist).ceil() as usize).max(1);
    let mut buckets: Vec<Vec<PixelCoord>> = vec![Vec::new(); cells_x * cells_y];
    let mut matches = Vec::new();
    for i in eligible {
        let p = PixelCoord::new((i % w) as f64, (i / w) as f64);
        let cx = ((p.x / min_dist) as usize).min(cells_x - 1);
        let cy = ((p.y / min_dist) as usize).min(cells_y - 1);
        let mut free = true;
        'scan: for ny in cy.saturating_sub(1)..=(cy + 1).min(cells_y - 1) {
            for nx in cx.saturating_sub(1)..=(cx + 1).min(cells_x - 1) {
                if buckets[ny * cells_x + nx].iter().any(|o| o.distance(p) < min_dist) {
                    free = false;
                    break 'scan;
                }
            }
        }
        if free {
            buckets[cy * cells_x + cx].push(p);
            let f = flow.values[i];
            matches.push(Match {
                pair,
                src: flow.src,
                dst: flow.dst,
                p,
                q: p.offset(f.x, f.y),
            });
        }
    }
    // Raster order keeps downstream accumulation independent of the shuffle.
    matches.sort_by(|a, b| (a.p.y, a.p.x).partial_cmp(&(b.p.y, b.p.x)).unwrap());
    Ok(MatchSet { matches, empty_flows: 0 })
}

/// Samples matches for every pair in both directions. Flows are looked up in
/// `bank`; consistency masks come from the bank and dynamic masks are per
/// frame (`None` means static).
pub fn sample_all_matches(
    bank: &FlowBank,
    pairs: &PairSet,
    dyn_masks: &[Option<BinaryMask>],
    min_dist: f64,
    seed: u64,
    exec: Exec,
) -> Result<MatchSet> {
    let mut jobs = Vec::new();
    for (id, &(i, j)) in pairs.pairs.iter().enumerate() {
        jobs.push((id, i, j));
        jobs.push((id, j, i));
    }
    let results = map_slice(exec, &jobs, |&(id, a, b)| -> Result<MatchSet> {
        let flow = bank.get(a, b).ok_or(Error::MissingFlow { src: a, dst: b })?;
        let full;
        let m_flow = match bank.masks.get(&(a, b)) {
            Some(m) => m,
            None => {
                full = BinaryMask::filled(flow.width, flow.height, true);
                &full
            }
        };
        let clear;
        let m_dyn = match dyn_masks.get(a).and_then(|m| m.as_ref()) {
            Some(m) => m,
            None => {
                clear = BinaryMask::filled(flow.width, flow.height, false);
                &clear
            }
        };
        let set = sample_matches(flow, id, m_flow, m_dyn, min_dist, seed)?;
        if set.empty_flows > 0 {
            log::warn!("no eligible matches for flow {a}->{b}");
        }
        Ok(set)
    });
    let mut out = MatchSet::default();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn brute_pairs(n: usize) -> BTreeSet<(usize, usize)> {
        let mut out = BTreeSet::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let k = j - i;
                if k.is_power_of_two() && i % k == 0 {
                    out.insert((i, j));
                }
            }
        }
        out
    }

    #[test]
    fn pair_set_examples() {
        let s = build_pair_set(5).unwrap();
        let expected: BTreeSet<_> = [(0, 1), (1, 2), (2, 3), (3, 4), (0, 2), (2, 4), (0, 4)].into_iter().collect();
        assert_eq!(s.pairs.iter().copied().collect::<BTreeSet<_>>(), expected);
        assert_eq!(s.len(), 7);
        assert_eq!(build_pair_set(2).unwrap().pairs, vec![(0, 1)]);
        let s = build_pair_set(9).unwrap();
        assert!(s.contains(0, 8));
        assert!(s.pairs.iter().all(|(i, j)| j - i != 3));
        assert!(build_pair_set(1).is_err());
    }

    #[test]
    fn pair_set_matches_brute_force_up_to_64() {
        for n in 2..=64 {
            let s = build_pair_set(n).unwrap();
            let set: BTreeSet<_> = s.pairs.iter().copied().collect();
            assert_eq!(set.len(), s.len(), "duplicates at n={n}");
            assert_eq!(set, brute_pairs(n), "n={n}");
            let mut size = 0;
            let mut k = 1;
            while k < n {
                size += (n - 1) / k;
                k *= 2;
            }
            assert_eq!(s.len(), size);
        }
    }

    #[test]
    fn fb_mask_examples() {
        let f = FlowField::constant(10, 8, 0, 1, Vector2::new(1.0, 0.0));
        let b = FlowField::constant(10, 8, 1, 0, Vector2::new(-1.0, 0.0));
        let m = fb_consistency_mask(&f, &b, 1.0).unwrap();
        for y in 0..8 {
            for x in 0..9 {
                assert!(m.get(x, y));
            }
            // x = 9 lands at 10, outside [-0.5, 9.5].
            assert!(!m.get(9, y));
        }
        let f = FlowField::constant(10, 8, 0, 1, Vector2::new(5.0, 0.0));
        let z = FlowField::constant(10, 8, 1, 0, Vector2::zeros());
        assert_eq!(fb_consistency_mask(&f, &z, 1.0).unwrap().count(), 0);
        let small = FlowField::constant(9, 8, 1, 0, Vector2::zeros());
        assert!(fb_consistency_mask(&f, &small, 1.0).is_err());
    }

    #[test]
    fn chain_flow_examples() {
        let mut bank = FlowBank::default();
        for k in 0..3 {
            bank.insert(FlowField::constant(12, 6, k, k + 1, Vector2::zeros()));
        }
        let (c, v) = chain_flow(&bank, 0, 3, 12, 6).unwrap();
        assert!(c.values.iter().all(|f| f.norm() == 0.0));
        assert_eq!(v.count(), 72);

        let mut bank = FlowBank::default();
        bank.insert(FlowField::constant(12, 6, 0, 1, Vector2::new(1.0, 0.0)));
        bank.insert(FlowField::constant(12, 6, 1, 2, Vector2::new(1.0, 0.0)));
        let (c, v) = chain_flow(&bank, 0, 2, 12, 6).unwrap();
        assert_eq!(c.get(3, 2), Vector2::new(2.0, 0.0));
        assert!(v.get(3, 2));
        // Leaves the raster on the last hop.
        assert!(!v.get(10, 2));
        assert!(matches!(chain_flow(&bank, 0, 3, 12, 6), Err(Error::MissingFlow { src: 2, dst: 3 })));
        assert!(matches!(chain_flow(&bank, 2, 0, 12, 6), Err(Error::MissingFlow { .. })));
    }

    #[test]
    fn chain_validity_within_hop_masks() {
        let mut bank = FlowBank::default();
        bank.insert(FlowField::constant(12, 6, 0, 1, Vector2::new(1.0, 0.0)));
        bank.insert(FlowField::constant(12, 6, 1, 2, Vector2::new(0.0, 1.0)));
        let mut m0 = BinaryMask::filled(12, 6, true);
        m0.values[2 * 12 + 4] = false;
        let mut m1 = BinaryMask::filled(12, 6, true);
        m1.values[2 * 12 + 6] = false;
        bank.masks.insert((0, 1), m0.clone());
        bank.masks.insert((1, 2), m1.clone());
        let (_, v) = chain_flow(&bank, 0, 2, 12, 6).unwrap();
        assert!(!v.get(4, 2));
        assert!(!v.get(5, 2));
        for y in 0..6 {
            for x in 0..12 {
                if v.get(x, y) {
                    assert!(m0.get(x, y) && m1.get(x + 1, y));
                }
            }
        }
    }

    #[test]
    fn sample_matches_examples() {
        let f = FlowField::constant(100, 100, 0, 1, Vector2::zeros());
        let all = BinaryMask::filled(100, 100, true);
        let none = BinaryMask::filled(100, 100, false);
        let set = sample_matches(&f, 0, &all, &all, 10.0, 1).unwrap();
        assert!(set.is_empty());
        assert_eq!(set.empty_flows, 1);

        let set = sample_matches(&f, 0, &all, &none, 10.0, 1).unwrap();
        assert!((60..=100).contains(&set.len()), "{}", set.len());
        for (a, m) in set.matches.iter().enumerate() {
            for n in &set.matches[a + 1..] {
                assert!(m.p.distance(n.p) >= 10.0);
            }
        }
        assert_eq!(set, sample_matches(&f, 0, &all, &none, 10.0, 1).unwrap());
        assert_ne!(set, sample_matches(&f, 0, &all, &none, 10.0, 2).unwrap());
    }

    #[test]
    fn sample_matches_respects_masks() {
        let f = FlowField::constant(40, 30, 0, 1, Vector2::new(2.0, -1.0));
        let m_flow = BinaryMask::new(40, 30, (0..1200).map(|i| (i % 40) < 30).collect()).unwrap();
        let m_dyn = BinaryMask::new(40, 30, (0..1200).map(|i| (i / 40) < 10).collect()).unwrap();
        let set = sample_matches(&f, 3, &m_flow, &m_dyn, 4.0, 9).unwrap();
        assert!(!set.is_empty());
        for m in &set.matches {
            let (x, y) = (m.p.x as usize, m.p.y as usize);
            assert!(m_flow.get(x, y) && !m_dyn.get(x, y));
            assert_eq!(m.q, m.p.offset(2.0, -1.0));
            assert_eq!(m.pair, 3);
        }
    }

    proptest! {
        #[test]
        fn fb_mask_symmetric_for_exact_inverse(dx in -3i32..=3, dy in -3i32..=3) {
            let v = Vector2::new(dx as f64, dy as f64);
            let f = FlowField::constant(16, 12, 0, 1, v);
            let b = FlowField::constant(16, 12, 1, 0, -v);
            let mf = fb_consistency_mask(&f, &b, 1.0).unwrap();
            let mb = fb_consistency_mask(&b, &f, 1.0).unwrap();
            for y in 0..12 {
                for x in 0..16 {
                    if mf.get(x, y) {
                        prop_assert!(mb.get((x as i32 + dx) as usize, (y as i32 + dy) as usize));
                    }
                }
            }
        }

        #[test]
        fn spacing_holds(seed in 0u64..50, d in 2.0f64..12.0) {
            let f = FlowField::constant(48, 32, 0, 1, Vector2::zeros());
            let set = sample_matches(&f, 0, &BinaryMask::filled(48, 32, true), &BinaryMask::filled(48, 32, false), d, seed).unwrap();
            for (a, m) in set.matches.iter().enumerate() {
                for n in &set.matches[a + 1..] {
                    prop_assert!(m.p.distance(n.p) >= d);
                }
            }
        }
    }
}
