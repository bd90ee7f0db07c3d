//! Procedural LiDAR simulator.
//!
//! A scene is a flat list of labeled analytic primitives (axis-aligned boxes,
//! vertical cylinders, spheres) laid out around a road running along the x
//! axis. A [`SensorSpec`] describes a spinning multi-beam sensor; casting its
//! rays against a scene yields a labeled [`PointCloud`] in the sensor frame
//! (sensor at the origin, y up). Domains built from the same scene seeds but
//! different sensors observe identical worlds.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cloud::{narrow, save_native, ClassId, Point, PointCloud};
use crate::error::{Error, Result};
use crate::seed;

pub const VEHICLE: ClassId = ClassId(0);
pub const PERSON: ClassId = ClassId(1);
pub const ROAD: ClassId = ClassId(2);
pub const SIDEWALK: ClassId = ClassId(3);
pub const TERRAIN: ClassId = ClassId(4);
pub const MANMADE: ClassId = ClassId(5);
pub const VEGETATION: ClassId = ClassId(6);

/// Number of classes the simulator emits.
pub const SYNTH_CLASSES: usize = 7;

/// Constant return intensity of every simulated point.
pub const INTENSITY: f64 = 0.5;

/// Ground surface heights above the road, meters.
pub const SIDEWALK_TOP: f64 = 0.15;
pub const TERRAIN_TOP: f64 = 0.08;
const GROUND_BOTTOM: f64 = -0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorSpec {
    pub beam_count: usize,
    /// Lowest and highest beam elevation, degrees. Beams are spaced evenly,
    /// both ends included.
    pub elevation_deg: [f64; 2],
    pub azimuth_step_deg: f64,
    pub max_range: f64,
    pub range_noise_sigma: f64,
    pub mount_height: f64,
}

impl Default for SensorSpec {
    fn default() -> Self {
        SensorSpec::domain_a()
    }
}

impl SensorSpec {
    /// Dense 64-beam sensor.
    pub fn domain_a() -> Self {
        SensorSpec {
            beam_count: 64,
            elevation_deg: [-25.0, 3.0],
            azimuth_step_deg: 1.0,
            max_range: 40.0,
            range_noise_sigma: 0.01,
            mount_height: 1.75,
        }
    }

    /// Sparse 32-beam sensor with a wider vertical field of view.
    pub fn domain_b() -> Self {
        SensorSpec {
            beam_count: 32,
            elevation_deg: [-30.0, 10.0],
            ..SensorSpec::domain_a()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_count == 0 {
            return Err(Error::validation("beam_count must be at least 1"));
        }
        let [lo, hi] = self.elevation_deg;
        if !(lo <= hi && lo >= -90.0 && hi <= 90.0) {
            return Err(Error::validation(format!("elevation range [{lo}, {hi}] is invalid")));
        }
        if !(self.azimuth_step_deg > 0.0 && self.azimuth_step_deg <= 360.0) {
            return Err(Error::validation("azimuth_step_deg must be in (0, 360]"));
        }
        if !(self.max_range > 0.0 && self.max_range.is_finite()) {
            return Err(Error::validation("max_range must be positive"));
        }
        if !(self.range_noise_sigma >= 0.0 && self.range_noise_sigma.is_finite()) {
            return Err(Error::validation("range_noise_sigma must be non-negative"));
        }
        if !self.mount_height.is_finite() {
            return Err(Error::validation("mount_height must be finite"));
        }
        Ok(())
    }

    /// Beam elevations in radians, lowest first.
    pub fn elevations(&self) -> Vec<f64> {
        let [lo, hi] = self.elevation_deg;
        if self.beam_count == 1 {
            return vec![lo.to_radians()];
        }
        let step = (hi - lo) / (self.beam_count - 1) as f64;
        (0..self.beam_count).map(|i| (lo + step * i as f64).to_radians()).collect()
    }

    /// Azimuths in radians, starting at 0 and covering one revolution.
    pub fn azimuths(&self) -> Vec<f64> {
        let n = (360.0 / self.azimuth_step_deg).round().max(1.0) as usize;
        (0..n).map(|i| (self.azimuth_step_deg * i as f64).to_radians()).collect()
    }

    pub fn ray_count(&self) -> usize {
        self.beam_count * self.azimuths().len()
    }

    pub fn origin(&self) -> [f64; 3] {
        [0.0, self.mount_height, 0.0]
    }
}

/// Direction of the ray at elevation `e` and azimuth `phi` (radians).
pub fn ray_direction(e: f64, phi: f64) -> [f64; 3] {
    [e.cos() * phi.cos(), e.sin(), e.cos() * phi.sin()]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Box { min: [f64; 3], max: [f64; 3] },
    /// Closed vertical cylinder around the axis through `(center[0], ·, center[1])`.
    Cylinder { center: [f64; 2], radius: f64, y: [f64; 2] },
    Sphere { center: [f64; 3], radius: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub class: ClassId,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Smallest root of `a t² + b t + c` greater than `t_min`.
fn first_root(a: f64, b: f64, c: f64, t_min: f64) -> Option<f64> {
    if a == 0.0 {
        return None;
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    // numerically stable pair of roots
    let q = -0.5 * (b + b.signum() * s);
    let (mut t0, mut t1) = (q / a, if q != 0.0 { c / q } else { -b / (2.0 * a) });
    if t0 > t1 {
        std::mem::swap(&mut t0, &mut t1);
    }
    [t0, t1].into_iter().find(|&t| t > t_min)
}

const T_MIN: f64 = 1e-9;

impl Shape {
    /// Distance along the unit ray `o + t·d` to the first surface crossing.
    pub fn intersect(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        match *self {
            Shape::Box { min, max } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for a in 0..3 {
                    if d[a] == 0.0 {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut near, mut far) = ((min[a] - o[a]) / d[a], (max[a] - o[a]) / d[a]);
                    if near > far {
                        std::mem::swap(&mut near, &mut far);
                    }
                    t0 = t0.max(near);
                    t1 = t1.min(far);
                }
                if t0 > t1 {
                    None
                } else if t0 > T_MIN {
                    Some(t0)
                } else if t1 > T_MIN {
                    Some(t1)
                } else {
                    None
                }
            }
            Shape::Cylinder { center, radius, y } => {
                let (ox, oz) = (o[0] - center[0], o[2] - center[1]);
                let side = first_root(
                    d[0] * d[0] + d[2] * d[2],
                    2.0 * (ox * d[0] + oz * d[2]),
                    ox * ox + oz * oz - radius * radius,
                    T_MIN,
                )
                .filter(|t| (y[0]..=y[1]).contains(&(o[1] + t * d[1])));
                let cap = |h: f64| {
                    if d[1] == 0.0 {
                        return None;
                    }
                    let t = (h - o[1]) / d[1];
                    let (px, pz) = (ox + t * d[0], oz + t * d[2]);
                    (t > T_MIN && px * px + pz * pz <= radius * radius).then_some(t)
                };
                [side, cap(y[0]), cap(y[1])].into_iter().flatten().reduce(f64::min)
            }
            Shape::Sphere { center, radius } => {
                let oc = sub(o, center);
                first_root(
                    d[0] * d[0] + d[1] * d[1] + d[2] * d[2],
                    2.0 * (oc[0] * d[0] + oc[1] * d[1] + oc[2] * d[2]),
                    oc[0] * oc[0] + oc[1] * oc[1] + oc[2] * oc[2] - radius * radius,
                    T_MIN,
                )
            }
        }
    }

    /// Unsigned distance from `p` to the surface.
    pub fn surface_distance(&self, p: [f64; 3]) -> f64 {
        match *self {
            Shape::Box { min, max } => {
                let outside: Vec<f64> = (0..3).map(|a| (min[a] - p[a]).max(p[a] - max[a]).max(0.0)).collect();
                let out = norm([outside[0], outside[1], outside[2]]);
                if out > 0.0 {
                    out
                } else {
                    (0..3).map(|a| (p[a] - min[a]).min(max[a] - p[a])).fold(f64::INFINITY, f64::min)
                }
            }
            Shape::Cylinder { center, radius, y } => {
                let radial = ((p[0] - center[0]).powi(2) + (p[2] - center[1]).powi(2)).sqrt() - radius;
                let axial = (y[0] - p[1]).max(p[1] - y[1]);
                if radial <= 0.0 && axial <= 0.0 {
                    (-radial).min(-axial)
                } else {
                    norm([radial.max(0.0), axial.max(0.0), 0.0])
                }
            }
            Shape::Sphere { center, radius } => (norm(sub(p, center)) - radius).abs(),
        }
    }

    /// Horizontal bounding rectangle `[x0, z0, x1, z1]`.
    pub fn footprint(&self) -> [f64; 4] {
        match *self {
            Shape::Box { min, max } => [min[0], min[2], max[0], max[2]],
            Shape::Cylinder { center, radius, .. } => {
                [center[0] - radius, center[1] - radius, center[0] + radius, center[1] + radius]
            }
            Shape::Sphere { center, radius } => {
                [center[0] - radius, center[2] - radius, center[0] + radius, center[2] + radius]
            }
        }
    }
}

/// Scene layout. The world spans `[-extent, extent]` in x and z; counts are
/// inclusive ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub seed: u64,
    pub extent: f64,
    pub road_half_width: f64,
    pub sidewalk_width: f64,
    pub buildings: [usize; 2],
    pub vehicles: [usize; 2],
    pub persons: [usize; 2],
    pub trees: [usize; 2],
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            extent: 30.0,
            road_half_width: 4.0,
            sidewalk_width: 2.5,
            buildings: [4, 8],
            vehicles: [2, 5],
            persons: [2, 6],
            trees: [3, 8],
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let ground = self.road_half_width + self.sidewalk_width;
        if !(self.road_half_width > 0.0 && self.sidewalk_width > 0.0 && self.extent > ground + 12.0) {
            return Err(Error::validation(
                "scene extent must leave at least 12 m of terrain beyond road and sidewalks",
            ));
        }
        for (name, [lo, hi]) in [
            ("buildings", self.buildings),
            ("vehicles", self.vehicles),
            ("persons", self.persons),
            ("trees", self.trees),
        ] {
            if lo > hi {
                return Err(Error::validation(format!("{name} range [{lo}, {hi}] is reversed")));
            }
        }
        Ok(())
    }
}

fn overlaps(a: [f64; 4], b: [f64; 4], margin: f64) -> bool {
    a[0] < b[2] + margin && b[0] < a[2] + margin && a[1] < b[3] + margin && b[1] < a[3] + margin
}

struct Placer<'a, R> {
    rng: &'a mut R,
    taken: Vec<[f64; 4]>,
    out: Vec<Primitive>,
}

impl<R: Rng> Placer<'_, R> {
    /// Rejection-samples a free spot; `make` draws a candidate object.
    fn place(&mut self, make: impl Fn(&mut R) -> Vec<Primitive>) {
        for _ in 0..200 {
            let cand = make(self.rng);
            let fp = cand
                .iter()
                .map(|p| p.shape.footprint())
                .reduce(|a, b| [a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])])
                .expect("objects have parts");
            if self.taken.iter().all(|&t| !overlaps(t, fp, 0.5)) {
                self.taken.push(fp);
                self.out.extend(cand);
                return;
            }
        }
    }
}

/// Deterministic primitive list for `spec`: ground strips first, then
/// buildings, vehicles, persons and trees.
pub fn generate_scene(spec: &SceneSpec) -> Result<Vec<Primitive>> {
    spec.validate()?;
    let e = spec.extent;
    let rw = spec.road_half_width;
    let sw = rw + spec.sidewalk_width;
    let slab = |z0: f64, z1: f64, top: f64, class| Primitive {
        shape: Shape::Box {
            min: [-e, GROUND_BOTTOM, z0],
            max: [e, top, z1],
        },
        class,
    };
    let mut out = vec![
        slab(-rw, rw, 0.0, ROAD),
        slab(-sw, -rw, SIDEWALK_TOP, SIDEWALK),
        slab(rw, sw, SIDEWALK_TOP, SIDEWALK),
        slab(-e, -sw, TERRAIN_TOP, TERRAIN),
        slab(sw, e, TERRAIN_TOP, TERRAIN),
    ];

    let mut rng = seed::rng(spec.seed, "scene");
    let count = |r: [usize; 2], rng: &mut seed::Rng| rng.random_range(r[0]..=r[1]);
    let n_build = count(spec.buildings, &mut rng);
    let n_veh = count(spec.vehicles, &mut rng);
    let n_per = count(spec.persons, &mut rng);
    let n_tree = count(spec.trees, &mut rng);
    let side = |rng: &mut seed::Rng| if rng.random_bool(0.5) { 1.0 } else { -1.0 };

    let mut placer = Placer {
        rng: &mut rng,
        taken: Vec::new(),
        out: Vec::new(),
    };
    for _ in 0..n_build {
        placer.place(|rng| {
            let (lx, lz, h) = (rng.random_range(4.0..10.0), rng.random_range(3.0..7.0), rng.random_range(3.0..10.0));
            let x = rng.random_range(-e..e - lx);
            let z0 = rng.random_range(sw + 1.0..e - lz);
            let s = side(rng);
            let (za, zb) = if s > 0.0 { (z0, z0 + lz) } else { (-z0 - lz, -z0) };
            vec![Primitive {
                shape: Shape::Box {
                    min: [x, GROUND_BOTTOM, za],
                    max: [x + lx, h, zb],
                },
                class: MANMADE,
            }]
        });
    }
    for _ in 0..n_veh {
        placer.place(|rng| {
            let (lx, lz, h) = (rng.random_range(3.5..4.8), rng.random_range(1.6..1.9), rng.random_range(1.4..1.8));
            let lane = side(rng) * rw / 2.0;
            // keep clear of the sensor at the origin
            let d = rng.random_range(5.0..e - lx);
            let x = if side(rng) > 0.0 { d } else { -d - lx };
            vec![Primitive {
                shape: Shape::Box {
                    min: [x, 0.0, lane - lz / 2.0],
                    max: [x + lx, h, lane + lz / 2.0],
                },
                class: VEHICLE,
            }]
        });
    }
    for _ in 0..n_per {
        placer.place(|rng| {
            let r = rng.random_range(0.25..0.35);
            let h = rng.random_range(1.6..1.9);
            let z = side(rng) * rng.random_range(rw + r..sw - r);
            let x = rng.random_range(-e + r..e - r);
            vec![Primitive {
                shape: Shape::Cylinder {
                    center: [x, z],
                    radius: r,
                    y: [SIDEWALK_TOP, SIDEWALK_TOP + h],
                },
                class: PERSON,
            }]
        });
    }
    for _ in 0..n_tree {
        placer.place(|rng| {
            let crown = rng.random_range(1.0..2.2);
            let trunk_r = rng.random_range(0.15..0.25);
            let trunk_h = rng.random_range(2.0..3.5);
            let x = rng.random_range(-e + crown..e - crown);
            let z = side(rng) * rng.random_range(sw + crown..e - crown);
            vec![
                Primitive {
                    shape: Shape::Cylinder {
                        center: [x, z],
                        radius: trunk_r,
                        y: [TERRAIN_TOP, TERRAIN_TOP + trunk_h],
                    },
                    class: VEGETATION,
                },
                Primitive {
                    shape: Shape::Sphere {
                        center: [x, TERRAIN_TOP + trunk_h + 0.6 * crown, z],
                        radius: crown,
                    },
                    class: VEGETATION,
                },
            ]
        });
    }
    out.extend(placer.out);
    Ok(out)
}

/// An un-noised ray return, in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub direction: [f64; 3],
    pub range: f64,
    pub primitive: usize,
}

impl Hit {
    pub fn world_point(&self, origin: [f64; 3]) -> [f64; 3] {
        [
            origin[0] + self.range * self.direction[0],
            origin[1] + self.range * self.direction[1],
            origin[2] + self.range * self.direction[2],
        ]
    }
}

/// Nearest return of every ray within `max_range`, in beam-major order
/// (elevation outer, azimuth inner).
pub fn cast_rays(scene: &[Primitive], sensor: &SensorSpec) -> Result<Vec<Hit>> {
    sensor.validate()?;
    let origin = sensor.origin();
    let azimuths = sensor.azimuths();
    let mut hits = Vec::new();
    for e in sensor.elevations() {
        for &phi in &azimuths {
            let d = ray_direction(e, phi);
            let mut best: Option<(f64, usize)> = None;
            for (i, p) in scene.iter().enumerate() {
                if let Some(t) = p.shape.intersect(origin, d) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, i));
                    }
                }
            }
            if let Some((range, primitive)) = best.filter(|&(t, _)| t <= sensor.max_range) {
                hits.push(Hit {
                    direction: d,
                    range,
                    primitive,
                });
            }
        }
    }
    Ok(hits)
}

/// Labeled scan in the sensor frame. Each return is displaced along its ray
/// by Gaussian range noise; coordinates are rounded to `f32` so the scan is
/// unchanged by a round trip through the native file format.
pub fn raycast_scan(scene: &[Primitive], sensor: &SensorSpec, rng: &mut impl Rng) -> Result<PointCloud> {
    let hits = cast_rays(scene, sensor)?;
    let noise = Normal::new(0.0, sensor.range_noise_sigma)
        .map_err(|e| Error::validation(format!("range noise: {e}")))?;
    let mut points = Vec::with_capacity(hits.len());
    let mut labels = Vec::with_capacity(hits.len());
    for h in &hits {
        let r = h.range + noise.sample(rng);
        let [dx, dy, dz] = h.direction;
        points.push(Point::new(narrow(r * dx), narrow(r * dy), narrow(r * dz)).with_intensity(INTENSITY));
        labels.push(scene[h.primitive].class);
    }
    PointCloud::labeled(points, labels)
}

/// One synthetic domain: `n_scans` frames whose scene seeds derive from
/// `scene_seed_base`, observed by `sensor`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSpec {
    pub name: String,
    pub n_scans: usize,
    pub scene_seed_base: u64,
    pub noise_seed: u64,
    /// Layout template; its `seed` is replaced per frame.
    pub scene: SceneSpec,
    pub sensor: SensorSpec,
}

impl Default for DomainSpec {
    fn default() -> Self {
        DomainSpec {
            name: "a".into(),
            n_scans: 10,
            scene_seed_base: 0,
            noise_seed: 0,
            scene: SceneSpec::default(),
            sensor: SensorSpec::domain_a(),
        }
    }
}

impl DomainSpec {
    pub fn scene_seed(&self, frame: usize) -> u64 {
        seed::derive(self.scene_seed_base, &format!("scene/{frame}"))
    }

    pub fn scene(&self, frame: usize) -> Result<Vec<Primitive>> {
        generate_scene(&SceneSpec {
            seed: self.scene_seed(frame),
            ..self.scene.clone()
        })
    }

    /// The labeled scan of `frame`.
    pub fn scan(&self, frame: usize) -> Result<PointCloud> {
        let scene = self.scene(frame)?;
        let mut rng = seed::rng(self.noise_seed, &format!("noise/{}/{frame}", self.name));
        Ok(raycast_scan(&scene, &self.sensor, &mut rng)?.with_frame_id(format!("{frame:06}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanEntry {
    pub file: String,
    pub scene_seed: u64,
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainManifest {
    pub spec: DomainSpec,
    pub scans: Vec<ScanEntry>,
    /// Point count per class name.
    pub class_histogram: BTreeMap<String, u64>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn class_histogram(scans: &[PointCloud]) -> BTreeMap<String, u64> {
    let vocab = crate::cloud::ClassVocabulary::default();
    let mut hist: BTreeMap<String, u64> = vocab.names().iter().map(|n| (n.clone(), 0)).collect();
    for l in scans.iter().filter_map(|s| s.labels.as_ref()).flatten() {
        if !l.is_ignore() {
            *hist.entry(vocab.name(*l).to_string()).or_default() += 1;
        }
    }
    hist
}

/// Scans of every frame of `spec`, built on up to `workers` threads. Frames
/// are seeded independently so the worker count never changes the output.
pub fn generate_scans(spec: &DomainSpec, workers: usize) -> Result<Vec<PointCloud>> {
    let workers = workers.clamp(1, spec.n_scans.max(1));
    let mut slots: Vec<Option<Result<PointCloud>>> = (0..spec.n_scans).map(|_| None).collect();
    std::thread::scope(|s| {
        let chunk = spec.n_scans.div_ceil(workers).max(1);
        for (w, part) in slots.chunks_mut(chunk).enumerate() {
            s.spawn(move || {
                for (j, slot) in part.iter_mut().enumerate() {
                    *slot = Some(spec.scan(w * chunk + j));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every frame visited")).collect()
}

/// Writes `scans/NNNNNN.ldg` for every frame plus `manifest.json` under `dir`.
pub fn generate_domain(spec: &DomainSpec, dir: impl AsRef<Path>, workers: usize) -> Result<DomainManifest> {
    spec.sensor.validate()?;
    spec.scene.validate()?;
    let dir = dir.as_ref();
    let scan_dir = dir.join("scans");
    std::fs::create_dir_all(&scan_dir).map_err(|e| Error::io(&scan_dir, e))?;
    let scans = generate_scans(spec, workers)?;
    let mut entries = Vec::with_capacity(scans.len());
    for (i, scan) in scans.iter().enumerate() {
        let file = format!("scans/{i:06}.ldg");
        save_native(scan, dir.join(&file))?;
        entries.push(ScanEntry {
            file,
            scene_seed: spec.scene_seed(i),
            points: scan.len(),
        });
    }
    let manifest = DomainManifest {
        spec: spec.clone(),
        scans: entries,
        class_histogram: class_histogram(&scans),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A dataset directory written by [`generate_domain`].
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DomainManifest,
    pub scans: Vec<PointCloud>,
}

pub fn load_domain(dir: impl AsRef<Path>) -> Result<Dataset> {
    let root = dir.as_ref().to_path_buf();
    let path = root.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DomainManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        offset: e.column() as u64,
        reason: format!("{}: {e}", path.display()),
    })?;
    let scans = manifest
        .scans
        .iter()
        .map(|s| crate::cloud::load_scan(root.join(&s.file), crate::cloud::ScanFormat::Native))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        root,
        manifest,
        scans,
    })
}
