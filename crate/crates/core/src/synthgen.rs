//! Synthetic ground truth: piecewise-planar static scenes, camera
//! trajectories, exact depth and flow rendering, and controlled depth
//! corruption.
//!
//! World axes follow the camera convention: x right, y down, z forward.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::correspondence::{BinaryMask, FlowBank, FlowField, PairSet};
use crate::deformation::DeformationGrid;
use crate::error::{Error, Result};
use crate::geometry::{bilinear_taps, so3_exp, DepthMap, ImagePlane, PixelCoord, Pose};
use crate::losses::default_focal_prior;
use crate::par::{fill_rows, map_range, map_slice, Exec};

/// Surface content of a synthetic scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GeometryKind {
    /// Room with axis-aligned boxes standing on the floor.
    #[default]
    MultiPlane,
    /// Room whose floor is a triangulated random heightfield.
    Heightfield,
    /// Room plus random points splatted to single pixels.
    PointCloud,
}

/// Camera path of a synthetic scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrajectoryKind {
    /// Full circle around the scene center, looking at it.
    #[default]
    Orbit,
    /// 60 degree arc around the scene center.
    Arc,
    /// Straight line along +z.
    Forward,
    /// Smooth drifting path with seeded per-frame shake.
    Handheld,
}

impl GeometryKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "multi-plane" | "planes" => Some(Self::MultiPlane),
            "heightfield" => Some(Self::Heightfield),
            "point-cloud" | "points" => Some(Self::PointCloud),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::MultiPlane => "multi-plane",
            Self::Heightfield => "heightfield",
            Self::PointCloud => "point-cloud",
        }
    }
}

impl TrajectoryKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "orbit" => Some(Self::Orbit),
            "arc" => Some(Self::Arc),
            "forward" => Some(Self::Forward),
            "handheld" | "handheld-jitter" => Some(Self::Handheld),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Orbit => "orbit",
            Self::Arc => "arc",
            Self::Forward => "forward",
            Self::Handheld => "handheld",
        }
    }
}

/// A box translating at constant velocity, used to exercise dynamic masks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicBox {
    pub center: Vector3<f64>,
    pub half_size: Vector3<f64>,
    /// Displacement per frame.
    pub velocity: Vector3<f64>,
}

/// Parameters of a synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub geometry: GeometryKind,
    /// Boxes, heightfield cells per side, or points, depending on `geometry`.
    pub primitives: usize,
    /// Scene size; the orbit radius is `1.6 * extent`.
    pub extent: f64,
    pub trajectory: TrajectoryKind,
    pub n_frames: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub seed: u64,
    pub dynamic: Option<DynamicBox>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            geometry: GeometryKind::MultiPlane,
            primitives: 4,
            extent: 1.0,
            trajectory: TrajectoryKind::Orbit,
            n_frames: 12,
            width: 160,
            height: 96,
            focal: default_focal_prior(),
            seed: 0,
            dynamic: None,
        }
    }
}

/// A planar surface patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prim {
    /// Rectangle `origin + a e1 + b e2`, `a, b` in `[0, 1]`, `e1 . e2 = 0`.
    Quad {
        origin: Vector3<f64>,
        e1: Vector3<f64>,
        e2: Vector3<f64>,
    },
    Triangle {
        a: Vector3<f64>,
        b: Vector3<f64>,
        c: Vector3<f64>,
    },
}

impl Prim {
    /// Ray parameter of the first hit with `t > 1e-9`.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        match self {
            Prim::Quad { origin, e1, e2 } => {
                let n = e1.cross(e2);
                let den = d.dot(&n);
                if den.abs() < 1e-14 {
                    return None;
                }
                let t = (origin - o).dot(&n) / den;
                if t <= 1e-9 {
                    return None;
                }
                let rel = o + t * d - origin;
                let a = rel.dot(e1) / e1.norm_squared();
                let b = rel.dot(e2) / e2.norm_squared();
                ((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b)).then_some(t)
            }
            Prim::Triangle { a, b, c } => {
                let e1 = b - a;
                let e2 = c - a;
                let pv = d.cross(&e2);
                let det = e1.dot(&pv);
                if det.abs() < 1e-14 {
                    return None;
                }
                let inv = 1.0 / det;
                let tv = o - a;
                let u = tv.dot(&pv) * inv;
                if !(0.0..=1.0).contains(&u) {
                    return None;
                }
                let qv = tv.cross(&e1);
                let v = d.dot(&qv) * inv;
                if v < 0.0 || u + v > 1.0 {
                    return None;
                }
                let t = e2.dot(&qv) * inv;
                (t > 1e-9).then_some(t)
            }
        }
    }
}

/// The six faces of an axis-aligned box.
pub fn box_faces(min: Vector3<f64>, max: Vector3<f64>) -> Vec<Prim> {
    let s = max - min;
    let (ex, ey, ez) = (
        Vector3::new(s.x, 0.0, 0.0),
        Vector3::new(0.0, s.y, 0.0),
        Vector3::new(0.0, 0.0, s.z),
    );
    vec![
        Prim::Quad {
            origin: min,
            e1: ey,
            e2: ez,
        },
        Prim::Quad {
            origin: min + ex,
            e1: ey,
            e2: ez,
        },
        Prim::Quad {
            origin: min,
            e1: ex,
            e2: ez,
        },
        Prim::Quad {
            origin: min + ey,
            e1: ex,
            e2: ez,
        },
        Prim::Quad {
            origin: min,
            e1: ex,
            e2: ey,
        },
        Prim::Quad {
            origin: min + ez,
            e1: ex,
            e2: ey,
        },
    ]
}

/// Ground truth of a synthetic video.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub poses: Vec<Pose>,
    pub prims: Vec<Prim>,
    /// Points splatted to single pixels.
    pub points: Vec<Vector3<f64>>,
    pub dynamic: Option<DynamicBox>,
}

/// Id of pixels showing nothing, a splatted point or the dynamic box.
pub const ID_NONE: u32 = u32::MAX;
pub const ID_SPLAT: u32 = u32::MAX - 1;
pub const ID_DYNAMIC: u32 = u32::MAX - 2;

/// Per-frame render: depth and the id of the surface seen at each pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRender {
    pub depth: Vec<f64>,
    pub ids: Vec<u32>,
}

fn look_at(position: Vector3<f64>, target: Vector3<f64>) -> Pose {
    let forward = (target - position).normalize();
    let down = Vector3::new(0.0, 1.0, 0.0);
    let right = down.cross(&forward).normalize();
    let down = forward.cross(&right);
    Pose {
        rotation: Matrix3::from_columns(&[right, down, forward]),
        translation: position,
    }
}

fn trajectory(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Pose>> {
    let e = spec.extent;
    let n = spec.n_frames;
    let radius = 1.6 * e;
    let target = Vector3::new(0.0, 0.3 * e, 0.0);
    let height = -0.2 * e;
    let poses = match spec.trajectory {
        TrajectoryKind::Orbit | TrajectoryKind::Arc => {
            if !(radius > 0.0) {
                return Err(Error::InvalidArgument("orbit radius must be positive".into()));
            }
            let span = if spec.trajectory == TrajectoryKind::Orbit {
                std::f64::consts::TAU
            } else {
                60f64.to_radians()
            };
            let steps = if spec.trajectory == TrajectoryKind::Orbit { n } else { n - 1 };
            (0..n)
                .map(|k| {
                    let th = span * k as f64 / steps as f64;
                    let pos = Vector3::new(radius * th.sin(), height, -radius * th.cos());
                    let tgt = Vector3::new(0.0, target.y, 0.0);
                    look_at(pos, tgt)
                })
                .collect()
        }
        TrajectoryKind::Forward => {
            let step = 0.8 * e / n as f64;
            (0..n)
                .map(|k| Pose {
                    rotation: Matrix3::identity(),
                    translation: Vector3::new(0.0, 0.0, -1.8 * e + step * k as f64),
                })
                .collect()
        }
        TrajectoryKind::Handheld => {
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            (0..n)
                .map(|k| {
                    let s = k as f64 / n as f64;
                    let base = Vector3::new(0.3 * e * (2.0 * s - 1.0), 0.05 * e * (3.0 * s).sin(), -1.8 * e + 0.4 * e * s);
                    let tgt = Vector3::new(0.15 * e * (2.0 * s - 1.0), target.y, 0.0);
                    let mut pose = look_at(base, tgt);
                    let jitter_r = Vector3::from_fn(|_, _| 0.3f64.to_radians() * normal.sample(rng));
                    let jitter_t = Vector3::from_fn(|_, _| 0.004 * e * normal.sample(rng));
                    pose.rotation *= so3_exp(&jitter_r);
                    pose.translation += jitter_t;
                    pose
                })
                .collect()
        }
    };
    Ok(poses)
}

/// Builds the ground-truth bundle of a scene spec. Deterministic per seed.
pub fn gen_scene(spec: &SceneSpec) -> Result<SceneBundle> {
    if spec.n_frames < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 frames, got {}", spec.n_frames)));
    }
    if !(spec.extent > 0.0 && spec.extent.is_finite()) {
        return Err(Error::InvalidArgument(format!("extent must be positive, got {}", spec.extent)));
    }
    if spec.width < 2 || spec.height < 2 {
        return Err(Error::InvalidArgument(format!("image too small: {}x{}", spec.width, spec.height)));
    }
    if !(spec.focal > 0.0) {
        return Err(Error::InvalidArgument(format!("focal must be positive, got {}", spec.focal)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let e = spec.extent;
    let floor = 1.0 * e;
    let room_min = Vector3::new(-3.0 * e, -1.5 * e, -3.0 * e);
    // Heightfield rooms extend the walls below the floor so they meet the terrain.
    let wall_bottom = if spec.geometry == GeometryKind::Heightfield {
        floor + 0.5 * e
    } else {
        floor
    };
    let room_max = Vector3::new(3.0 * e, wall_bottom, 3.0 * e);
    let mut prims = box_faces(room_min, room_max);
    let mut points = Vec::new();

    match spec.geometry {
        GeometryKind::MultiPlane => {
            for _ in 0..spec.primitives {
                let half = Vector3::new(rng.gen_range(0.1..0.25), rng.gen_range(0.15..0.45), rng.gen_range(0.1..0.25)) * e;
                let r = rng.gen_range(0.0..0.6) * e;
                let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let c = Vector3::new(r * a.cos(), floor - half.y, r * a.sin());
                prims.extend(box_faces(c - half, c + half));
            }
        }
        GeometryKind::Heightfield => {
            // Replace the flat floor with a triangulated random heightfield.
            prims.remove(3);
            let cells = spec.primitives.max(1);
            let step = (room_max.x - room_min.x) / cells as f64;
            let h: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen_range(-0.2..0.2) * e).collect();
            let vtx = |i: usize, j: usize| {
                Vector3::new(
                    room_min.x + i as f64 * step,
                    floor + h[j * (cells + 1) + i],
                    room_min.z + j as f64 * step,
                )
            };
            for j in 0..cells {
                for i in 0..cells {
                    prims.push(Prim::Triangle {
                        a: vtx(i, j),
                        b: vtx(i + 1, j),
                        c: vtx(i + 1, j + 1),
                    });
                    prims.push(Prim::Triangle {
                        a: vtx(i, j),
                        b: vtx(i + 1, j + 1),
                        c: vtx(i, j + 1),
                    });
                }
            }
        }
        GeometryKind::PointCloud => {
            for _ in 0..spec.primitives {
                points.push(Vector3::new(
                    rng.gen_range(-1.0..1.0) * e,
                    rng.gen_range(-0.5..0.9) * e,
                    rng.gen_range(-1.0..1.0) * e,
                ));
            }
        }
    }
    let poses = trajectory(spec, &mut rng)?;
    Ok(SceneBundle {
        width: spec.width,
        height: spec.height,
        focal: spec.focal,
        poses,
        prims,
        points,
        dynamic: spec.dynamic,
    })
}

impl SceneBundle {
    pub fn n_frames(&self) -> usize {
        self.poses.len()
    }

    pub fn plane(&self) -> ImagePlane {
        ImagePlane::new(self.width, self.height)
    }

    /// Metric camera ray with unit z through raster location `p`.
    pub fn ray(&self, p: PixelCoord) -> Vector3<f64> {
        let v = self.plane().to_plane(p);
        Vector3::new(v.x / self.focal, v.y / self.focal, 1.0)
    }

    fn dynamic_prims(&self, frame: usize) -> Vec<Prim> {
        match &self.dynamic {
            Some(b) => {
                let c = b.center + b.velocity * frame as f64;
                box_faces(c - b.half_size, c + b.half_size)
            }
            None => Vec::new(),
        }
    }

    /// Projects a world point into `frame`: raster location and camera depth.
    pub fn project(&self, frame: usize, x: &Vector3<f64>) -> Option<(PixelCoord, f64)> {
        let y = self.poses[frame].inverse_transform(x);
        if !(y.z > 0.0) {
            return None;
        }
        let v = Vector2::new(self.focal * y.x / y.z, self.focal * y.y / y.z);
        Some((self.plane().to_raster(&v), y.z))
    }

    /// Ray casts one frame.
    pub fn render_frame(&self, frame: usize, exec: Exec) -> FrameRender {
        let pose = self.poses[frame];
        let dyn_prims = self.dynamic_prims(frame);
        let n = self.width * self.height;
        let mut cells = vec![(f64::INFINITY, ID_NONE); n];
        fill_rows(exec, &mut cells, self.width, |y, row| {
            for (x, cell) in row.iter_mut().enumerate() {
                let d = pose.rotation * self.ray(PixelCoord::new(x as f64, y as f64));
                let o = pose.translation;
                for (id, prim) in self.prims.iter().enumerate() {
                    if let Some(t) = prim.intersect(&o, &d) {
                        if t < cell.0 {
                            *cell = (t, id as u32);
                        }
                    }
                }
                for prim in &dyn_prims {
                    if let Some(t) = prim.intersect(&o, &d) {
                        if t < cell.0 {
                            *cell = (t, ID_DYNAMIC);
                        }
                    }
                }
            }
        });
        for x in &self.points {
            if let Some((p, z)) = self.project(frame, x) {
                let (px, py) = (p.x.round(), p.y.round());
                if px >= 0.0 && py >= 0.0 && (px as usize) < self.width && (py as usize) < self.height {
                    let i = py as usize * self.width + px as usize;
                    if z < cells[i].0 {
                        cells[i] = (z, ID_SPLAT);
                    }
                }
            }
        }
        FrameRender {
            depth: cells.iter().map(|c| c.0).collect(),
            ids: cells.iter().map(|c| c.1).collect(),
        }
    }

    pub fn render_all(&self, exec: Exec) -> Vec<FrameRender> {
        map_range(exec, self.n_frames(), |k| self.render_frame(k, Exec::Sequential))
    }

    /// World position of the surface seen at integer pixel `(x, y)` of `frame`.
    fn surface_point(&self, frame: usize, render: &FrameRender, x: usize, y: usize) -> Vector3<f64> {
        let z = render.depth[y * self.width + x];
        self.poses[frame].transform(&(z * self.ray(PixelCoord::new(x as f64, y as f64))))
    }

    /// Exact flow `i -> j` and its visibility mask from pre-rendered frames.
    ///
    /// A pixel is visible when its surface lands inside frame `j` unoccluded
    /// and all four raster taps around the landing point show the same static
    /// planar surface, so bilinear depth sampling there is exact.
    pub fn flow_between(&self, i: usize, j: usize, ri: &FrameRender, rj: &FrameRender) -> (FlowField, BinaryMask) {
        let (w, h) = (self.width, self.height);
        let mut flow = Vec::with_capacity(w * h);
        let mut vis = Vec::with_capacity(w * h);
        let velocity = self.dynamic.map(|b| b.velocity).unwrap_or_else(Vector3::zeros);
        for y in 0..h {
            for x in 0..w {
                let idx = y * w + x;
                let id = ri.ids[idx];
                if id == ID_NONE {
                    flow.push(Vector2::zeros());
                    vis.push(false);
                    continue;
                }
                let mut world = self.surface_point(i, ri, x, y);
                if id == ID_DYNAMIC {
                    world += velocity * (j as f64 - i as f64);
                }
                let Some((q, z)) = self.project(j, &world) else {
                    flow.push(Vector2::zeros());
                    vis.push(false);
                    continue;
                };
                flow.push(Vector2::new(q.x - x as f64, q.y - y as f64));
                let mut ok = id < ID_DYNAMIC;
                if ok {
                    ok = match bilinear_taps(w, h, q) {
                        Some(taps) => {
                            let same = taps.iter().all(|&(t, _)| rj.ids[t] == id);
                            let mut inv = 0.0;
                            for (t, wt) in taps {
                                inv += wt / rj.depth[t];
                            }
                            same && ((1.0 / inv) - z).abs() <= 1e-6 * z
                        }
                        None => false,
                    };
                }
                vis.push(ok);
            }
        }
        (
            FlowField {
                width: w,
                height: h,
                src: i,
                dst: j,
                values: flow,
            },
            BinaryMask {
                width: w,
                height: h,
                values: vis,
            },
        )
    }

    /// Pixels showing the moving box.
    pub fn dynamic_mask(&self, render: &FrameRender) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            values: render.ids.iter().map(|&id| id == ID_DYNAMIC).collect(),
        }
    }
}

/// A scene with every frame rendered once.
#[derive(Debug, Clone)]
pub struct RenderedVideo {
    pub bundle: SceneBundle,
    pub renders: Vec<FrameRender>,
}

impl RenderedVideo {
    pub fn new(bundle: SceneBundle, exec: Exec) -> Self {
        let renders = bundle.render_all(exec);
        Self { bundle, renders }
    }

    pub fn n_frames(&self) -> usize {
        self.bundle.n_frames()
    }

    /// Exact depth maps of all frames.
    pub fn depths(&self) -> Result<Vec<DepthMap>> {
        self.renders
            .iter()
            .enumerate()
            .map(|(k, r)| DepthMap::new(self.bundle.width, self.bundle.height, k, r.depth.clone()))
            .collect()
    }

    /// Exact flow `i -> j` and its visibility mask.
    pub fn flow(&self, i: usize, j: usize) -> (FlowField, BinaryMask) {
        self.bundle.flow_between(i, j, &self.renders[i], &self.renders[j])
    }

    /// Flows in both directions for every pair plus all consecutive frames,
    /// with visibility masks stored as consistency masks.
    pub fn flow_bank(&self, pairs: &PairSet, exec: Exec) -> FlowBank {
        let mut keys: Vec<(usize, usize)> = pairs.pairs.iter().flat_map(|&(i, j)| [(i, j), (j, i)]).collect();
        for k in 0..self.n_frames().saturating_sub(1) {
            keys.push((k, k + 1));
            keys.push((k + 1, k));
        }
        keys.sort_unstable();
        keys.dedup();
        let flows = map_slice(exec, &keys, |&(i, j)| self.flow(i, j));
        let mut bank = FlowBank::default();
        for ((i, j), (flow, vis)) in keys.into_iter().zip(flows) {
            bank.insert(flow);
            bank.masks.insert((i, j), vis);
        }
        bank
    }

    /// Dynamic masks per frame, `None` for a static scene.
    pub fn dynamic_masks(&self) -> Vec<Option<BinaryMask>> {
        self.renders
            .iter()
            .map(|r| self.bundle.dynamic.is_some().then(|| self.bundle.dynamic_mask(r)))
            .collect()
    }
}

/// Exact depth of `frame`. Pixels that see nothing are an error.
pub fn render_depth(bundle: &SceneBundle, frame: usize) -> Result<DepthMap> {
    check_frame(bundle, frame)?;
    let r = bundle.render_frame(frame, Exec::default());
    DepthMap::new(bundle.width, bundle.height, frame, r.depth)
}

/// Exact flow `i -> j` with its visibility mask.
pub fn render_flow(bundle: &SceneBundle, i: usize, j: usize) -> Result<(FlowField, BinaryMask)> {
    check_frame(bundle, i)?;
    check_frame(bundle, j)?;
    let ri = bundle.render_frame(i, Exec::default());
    let rj = bundle.render_frame(j, Exec::default());
    Ok(bundle.flow_between(i, j, &ri, &rj))
}

fn check_frame(bundle: &SceneBundle, frame: usize) -> Result<()> {
    if frame >= bundle.n_frames() {
        return Err(Error::InvalidArgument(format!(
            "frame {frame} out of range for {} frames",
            bundle.n_frames()
        )));
    }
    Ok(())
}

/// Depth corruption parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionSpec {
    /// Resolution `(cols, rows)` of the random spline.
    pub grid: (usize, usize),
    /// Handles of the spline are `1 + amplitude * U(-1, 1)`.
    pub amplitude: f64,
    /// Standard deviation of the per-pixel multiplicative noise.
    pub noise_sigma: f64,
    /// Per-frame global scale factor `1 + drift * U(-1, 1)`.
    pub drift: f64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            grid: (5, 3),
            amplitude: 0.0,
            noise_sigma: 0.0,
            drift: 0.0,
        }
    }
}

/// A corrupted depth map with the recorded low-frequency field. The
/// multiplicative field is `1 / reciprocal(p)`, so a deformation grid at
/// least as fine as `reciprocal` can undo it exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Corruption {
    pub depth: DepthMap,
    pub reciprocal: DeformationGrid,
}

impl Corruption {
    pub fn field(&self, p: PixelCoord) -> f64 {
        1.0 / self.reciprocal.eval(p)
    }
}

/// `d'(p) = d(p) field(p) (1 + noise(p))` with a seeded random spline field.
pub fn corrupt_depth(depth: &DepthMap, spec: &CorruptionSpec, seed: u64) -> Result<Corruption> {
    if !(0.0..1.0).contains(&spec.amplitude) || !(0.0..1.0).contains(&spec.drift) {
        return Err(Error::InvalidArgument(format!(
            "amplitude {} and drift {} must lie in [0, 1) to keep depths positive",
            spec.amplitude, spec.drift
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (depth.frame as u64).wrapping_mul(0x2545_F491_4F6C_DD1D));
    let (cols, rows) = spec.grid;
    let scale = 1.0 + spec.drift * rng.gen_range(-1.0..=1.0);
    let handles = (0..cols * rows)
        .map(|_| scale * (1.0 + spec.amplitude * rng.gen_range(-1.0..=1.0)))
        .collect();
    let reciprocal = DeformationGrid::new(cols, rows, depth.width, depth.height, handles)?;
    let depth = corrupt_with_field(depth, &reciprocal, spec.noise_sigma, &mut rng)?;
    Ok(Corruption { depth, reciprocal })
}

/// Divides depth by `reciprocal(p)` and applies multiplicative Gaussian noise.
pub fn corrupt_with_field(depth: &DepthMap, reciprocal: &DeformationGrid, noise_sigma: f64, rng: &mut ChaCha8Rng) -> Result<DepthMap> {
    if reciprocal.width != depth.width || reciprocal.height != depth.height {
        return Err(Error::DimensionMismatch {
            expected: (depth.width, depth.height),
            got: (reciprocal.width, reciprocal.height),
        });
    }
    let normal = Normal::new(0.0, noise_sigma.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let w = depth.width;
    let first = reciprocal.handles[0];
    let uniform = reciprocal.handles.iter().all(|&h| h == first);
    let mut values = Vec::with_capacity(depth.values.len());
    for (i, d) in depth.values.iter().enumerate() {
        let p = PixelCoord::new((i % w) as f64, (i / w) as f64);
        let noise = if noise_sigma > 0.0 { 1.0 + normal.sample(rng) } else { 1.0 };
        if noise <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "noise sigma {noise_sigma} produced a non-positive depth"
            )));
        }
        let g = if uniform { first } else { reciprocal.eval(p) };
        values.push(d / g * noise);
    }
    DepthMap::new(depth.width, depth.height, depth.frame, values)
}
