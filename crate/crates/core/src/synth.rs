//! Synthetic registration problems with exact ground-truth flow.
//!
//! Surfaces are sampled uniformly by area, deformed by a closed-form map and
//! optionally cropped to a half-space or perturbed with ball noise. Every
//! generator is a pure function of its seed.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::types::{self, CloudError, Point3, PointCloud};
use crate::warp;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("unknown shape '{0}' (expected plane, sphere, cylinder or torus)")]
    UnknownShape(String),
    #[error("invalid deformation spec '{spec}': {reason}")]
    Spec { spec: String, reason: String },
    #[error("overlap fraction {0} must lie in (0, 1]")]
    Overlap(f64),
    #[error("noise ratio {ratio} must lie in [0, 1] and radius {radius} must be positive")]
    Noise { ratio: f64, radius: f64 },
    #[error(transparent)]
    Cloud(#[from] CloudError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    /// Unit square `[-0.5, 0.5]^2` at `z = 0`.
    Plane,
    /// Unit sphere.
    Sphere,
    /// Lateral surface of radius 0.5, height 1, axis `z`.
    Cylinder,
    /// Ring radius 0.5, tube radius 0.2, axis `z`.
    Torus,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Plane, Shape::Sphere, Shape::Cylinder, Shape::Torus];

    /// Bounding-box size of the canonical sample.
    pub fn extent(self) -> Point3 {
        match self {
            Shape::Plane => [1.0, 1.0, 0.0],
            Shape::Sphere => [2.0, 2.0, 2.0],
            Shape::Cylinder => [1.0, 1.0, 1.0],
            Shape::Torus => {
                let w = 2.0 * (TORUS_RING + TORUS_TUBE);
                [w, w, 2.0 * TORUS_TUBE]
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Shape::Plane => "plane",
            Shape::Sphere => "sphere",
            Shape::Cylinder => "cylinder",
            Shape::Torus => "torus",
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Shape {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self> {
        Shape::ALL
            .into_iter()
            .find(|k| k.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| SynthError::UnknownShape(s.to_string()))
    }
}

const TORUS_RING: f64 = 0.5;
const TORUS_TUBE: f64 = 0.2;

fn sample_point(shape: Shape, rng: &mut ChaCha8Rng) -> Point3 {
    match shape {
        Shape::Plane => [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 0.0],
        Shape::Sphere => loop {
            let v = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let n2 = types::dot(v, v);
            if n2 > 1e-6 && n2 <= 1.0 {
                break types::scale(v, 1.0 / n2.sqrt());
            }
        },
        Shape::Cylinder => {
            let t = rng.gen_range(0.0..TAU);
            [0.5 * t.cos(), 0.5 * t.sin(), rng.gen_range(-0.5..0.5)]
        }
        Shape::Torus => {
            // Area element is proportional to R + r cos(phi).
            let phi = loop {
                let phi = rng.gen_range(0.0..TAU);
                let accept = (TORUS_RING + TORUS_TUBE * phi.cos()) / (TORUS_RING + TORUS_TUBE);
                if rng.gen::<f64>() < accept {
                    break phi;
                }
            };
            let theta = rng.gen_range(0.0..TAU);
            let rho = TORUS_RING + TORUS_TUBE * phi.cos();
            [rho * theta.cos(), rho * theta.sin(), TORUS_TUBE * phi.sin()]
        }
    }
}

/// `n` points drawn uniformly from the surface of `shape`.
pub fn sample_surface(shape: Shape, n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n).map(|_| sample_point(shape, &mut rng)).collect();
    PointCloud::new(points).expect("sampled points are finite")
}

/// Uniform scaling about the origin to the given bounding-box diagonal.
pub fn scale_to_diagonal(cloud: &PointCloud, diagonal: f64) -> PointCloud {
    let d = cloud.diagonal();
    if d == 0.0 {
        return cloud.clone();
    }
    let s = diagonal / d;
    let pts = cloud.points().iter().map(|&p| types::scale(p, s)).collect();
    cloud.with_points(pts).expect("scaled points are finite")
}

/// Closed-form smooth deformations.
#[derive(Debug, Clone, PartialEq)]
pub enum Deformation {
    /// Rotation (axis-angle) then translation.
    Rigid {
        rotation: Point3,
        translation: Point3,
    },
    /// `s R p + t`.
    Similarity {
        scale: f64,
        rotation: Point3,
        translation: Point3,
    },
    /// Rotation about `axis` (through the origin) by `rate * (p . axis)` radians.
    Twist { axis: Point3, rate: f64 },
    /// Bends the plane orthogonal to `axis` around it with the given curvature.
    Bend { axis: Point3, curvature: f64 },
    /// `z += amplitude * sin(frequency * x)`.
    Sine { amplitude: f64, frequency: f64 },
}

impl Deformation {
    pub fn identity() -> Self {
        Deformation::Rigid {
            rotation: [0.0; 3],
            translation: [0.0; 3],
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Deformation::Rigid { .. } => "rigid",
            Deformation::Similarity { .. } => "similarity",
            Deformation::Twist { .. } => "twist",
            Deformation::Bend { .. } => "bend",
            Deformation::Sine { .. } => "sine",
        }
    }

    /// Image of one point.
    pub fn apply(&self, p: Point3) -> Point3 {
        match *self {
            Deformation::Rigid {
                rotation,
                translation,
            } => types::add(warp::mat_vec(&warp::exp_so3(rotation), p), translation),
            Deformation::Similarity {
                scale,
                rotation,
                translation,
            } => types::add(
                types::scale(warp::mat_vec(&warp::exp_so3(rotation), p), scale),
                translation,
            ),
            Deformation::Twist { axis, rate } => {
                let a = unit(axis);
                let angle = rate * types::dot(p, a);
                warp::mat_vec(&warp::exp_so3(types::scale(a, angle)), p)
            }
            Deformation::Bend { axis, curvature } => bend(p, unit(axis), curvature),
            Deformation::Sine {
                amplitude,
                frequency,
            } => [p[0], p[1], p[2] + amplitude * (frequency * p[0]).sin()],
        }
    }
}

fn unit(v: Point3) -> Point3 {
    let n = types::norm(v);
    if n == 0.0 {
        [0.0, 0.0, 1.0]
    } else {
        types::scale(v, 1.0 / n)
    }
}

/// Arc bend: the coordinate `u` along the bend direction becomes arc length
/// on a circle of radius `1/curvature` around `axis`; the normal offset `w`
/// shrinks or grows that radius.
fn bend(p: Point3, axis: Point3, curvature: f64) -> Point3 {
    if curvature.abs() < 1e-12 {
        return p;
    }
    let seed = if axis[0].abs() < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let dir = unit(types::sub(seed, types::scale(axis, types::dot(seed, axis))));
    let normal = types::cross(axis, dir);
    let (u, w, a) = (
        types::dot(p, dir),
        types::dot(p, normal),
        types::dot(p, axis),
    );
    let r = 1.0 / curvature;
    let theta = curvature * u;
    let along = (r - w) * theta.sin();
    let across = r - (r - w) * theta.cos();
    types::add(
        types::add(types::scale(dir, along), types::scale(normal, across)),
        types::scale(axis, a),
    )
}

fn fmt_vec(v: Point3) -> String {
    format!("{},{},{}", v[0], v[1], v[2])
}

/// Textual form `kind:key=value:key=value`, e.g. `twist:axis=0,0,1:rate=0.5`.
impl fmt::Display for Deformation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Deformation::Rigid {
                rotation,
                translation,
            } => {
                write!(
                    f,
                    "rigid:rot={}:t={}",
                    fmt_vec(rotation),
                    fmt_vec(translation)
                )
            }
            Deformation::Similarity {
                scale,
                rotation,
                translation,
            } => write!(
                f,
                "similarity:s={}:rot={}:t={}",
                scale,
                fmt_vec(rotation),
                fmt_vec(translation)
            ),
            Deformation::Twist { axis, rate } => {
                write!(f, "twist:axis={}:rate={}", fmt_vec(axis), rate)
            }
            Deformation::Bend { axis, curvature } => {
                write!(f, "bend:axis={}:curvature={}", fmt_vec(axis), curvature)
            }
            Deformation::Sine {
                amplitude,
                frequency,
            } => {
                write!(f, "sine:amplitude={}:frequency={}", amplitude, frequency)
            }
        }
    }
}

impl FromStr for Deformation {
    type Err = SynthError;

    fn from_str(spec: &str) -> Result<Self> {
        let bad = |reason: String| SynthError::Spec {
            spec: spec.to_string(),
            reason,
        };
        let mut parts = spec.trim().split(':');
        let kind = parts.next().unwrap_or("").to_ascii_lowercase();
        let mut fields = std::collections::BTreeMap::new();
        for part in parts {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got '{part}'")))?;
            fields.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
        }
        let d = match kind.as_str() {
            "identity" => Deformation::identity(),
            "rigid" | "similarity" => {
                let scale = if kind == "similarity" {
                    take_num(&mut fields, "s", Some(1.0)).map_err(&bad)?
                } else {
                    1.0
                };
                let rotation = take_vec(&mut fields, "rot", [0.0; 3]).map_err(&bad)?;
                let translation = take_vec(&mut fields, "t", [0.0; 3]).map_err(&bad)?;
                if kind == "rigid" {
                    Deformation::Rigid {
                        rotation,
                        translation,
                    }
                } else {
                    if scale <= 0.0 {
                        return Err(bad("scale must be positive".into()));
                    }
                    Deformation::Similarity {
                        scale,
                        rotation,
                        translation,
                    }
                }
            }
            "twist" => {
                let rate = take_num(&mut fields, "rate", None).map_err(&bad)?;
                let axis = take_vec(&mut fields, "axis", [0.0, 0.0, 1.0]).map_err(&bad)?;
                Deformation::Twist { axis, rate }
            }
            "bend" => {
                let curvature = take_num(&mut fields, "curvature", None).map_err(&bad)?;
                let axis = take_vec(&mut fields, "axis", [0.0, 1.0, 0.0]).map_err(&bad)?;
                Deformation::Bend { axis, curvature }
            }
            "sine" => {
                let amplitude = take_num(&mut fields, "amplitude", None).map_err(&bad)?;
                let frequency = take_num(&mut fields, "frequency", None).map_err(&bad)?;
                Deformation::Sine {
                    amplitude,
                    frequency,
                }
            }
            other => return Err(bad(format!("unknown kind '{other}'"))),
        };
        if let Some(k) = fields.keys().next() {
            return Err(bad(format!("unexpected key '{k}'")));
        }
        if let Deformation::Twist { axis, .. } | Deformation::Bend { axis, .. } = d {
            if types::norm(axis) == 0.0 {
                return Err(bad("axis must be non-zero".into()));
            }
        }
        Ok(d)
    }
}

fn take_num(
    fields: &mut std::collections::BTreeMap<String, String>,
    key: &str,
    default: Option<f64>,
) -> std::result::Result<f64, String> {
    match fields.remove(key) {
        Some(v) => v
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| format!("{key}: bad number '{v}'")),
        None => default.ok_or_else(|| format!("missing {key}")),
    }
}

fn take_vec(
    fields: &mut std::collections::BTreeMap<String, String>,
    key: &str,
    default: Point3,
) -> std::result::Result<Point3, String> {
    let Some(v) = fields.remove(key) else {
        return Ok(default);
    };
    let parts: Vec<f64> = v
        .split(',')
        .map(|x| x.trim().parse::<f64>().ok().filter(|x| x.is_finite()))
        .collect::<Option<_>>()
        .ok_or_else(|| format!("{key}: bad vector '{v}'"))?;
    match parts[..] {
        [x, y, z] => Ok([x, y, z]),
        _ => Err(format!("{key}: expected 3 components, got {}", parts.len())),
    }
}

/// Deformed copy of `cloud` and the per-point ground-truth flow. The deformed
/// positions are computed as `original + flow`, so that identity is exact.
pub fn apply_deformation(cloud: &PointCloud, spec: &Deformation) -> (PointCloud, Vec<Point3>) {
    let gt: Vec<Point3> = cloud
        .points()
        .iter()
        .map(|&p| types::sub(spec.apply(p), p))
        .collect();
    let moved = cloud
        .points()
        .iter()
        .zip(&gt)
        .map(|(&p, &g)| types::add(p, g))
        .collect();
    (
        cloud
            .with_points(moved)
            .expect("deformation keeps points finite"),
        gt,
    )
}

/// Seeded uniformly random unit vector.
fn random_direction(rng: &mut ChaCha8Rng) -> Point3 {
    loop {
        let v = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n2 = types::dot(v, v);
        if n2 > 1e-6 && n2 <= 1.0 {
            return types::scale(v, 1.0 / n2.sqrt());
        }
    }
}

/// Indices (ascending) kept by [`make_partial`].
pub fn partial_indices(cloud: &PointCloud, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(SynthError::Overlap(fraction));
    }
    let n = cloud.len();
    let keep = ((fraction * n as f64).round() as usize).min(n);
    if keep == n {
        return Ok((0..n).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = random_direction(&mut rng);
    let mut order: Vec<(f64, usize)> = cloud
        .points()
        .iter()
        .enumerate()
        .map(|(i, &p)| (types::dot(p, dir), i))
        .collect();
    // The kept points are exactly those below a plane orthogonal to `dir`.
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut idx: Vec<usize> = order[..keep].iter().map(|&(_, i)| i).collect();
    idx.sort_unstable();
    Ok(idx)
}

/// Keeps the points on one side of a seeded random plane, `round(fraction * n)` of them.
pub fn make_partial(cloud: &PointCloud, fraction: f64, seed: u64) -> Result<PointCloud> {
    Ok(cloud.select(&partial_indices(cloud, fraction, seed)?))
}

/// Perturbs `round(ratio * n)` seeded points uniformly inside a ball of
/// `radius`. Returns the noisy cloud and the perturbed indices (ascending).
pub fn add_noise(
    cloud: &PointCloud,
    ratio: f64,
    radius: f64,
    seed: u64,
) -> Result<(PointCloud, Vec<usize>)> {
    if !(0.0..=1.0).contains(&ratio) || !(radius > 0.0) || !radius.is_finite() {
        return Err(SynthError::Noise { ratio, radius });
    }
    let n = cloud.len();
    let count = ((ratio * n as f64).round() as usize).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, count).into_vec();
    idx.sort_unstable();
    let mut pts = cloud.points().to_vec();
    for &i in &idx {
        let offset = loop {
            let v = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            if types::dot(v, v) <= 1.0 {
                break types::scale(v, radius);
            }
        };
        pts[i] = types::add(pts[i], offset);
    }
    Ok((cloud.with_points(pts)?, idx))
}

/// A generated registration problem. `gt` is the flow of every source point.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub name: String,
    pub shape: Shape,
    pub deformation: Deformation,
    pub source: PointCloud,
    pub target: PointCloud,
    pub gt: Vec<Point3>,
}

/// Options of [`make_instance`].
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceOptions {
    pub points: usize,
    /// Bounding-box diagonal of the source, in scene units.
    pub diagonal: f64,
    /// Fraction of the target kept by a half-space crop.
    pub overlap: Option<f64>,
    /// `(ratio, radius)` ball noise on the target.
    pub noise: Option<(f64, f64)>,
}

impl Default for InstanceOptions {
    fn default() -> Self {
        Self {
            points: 2000,
            diagonal: 1.0,
            overlap: None,
            noise: None,
        }
    }
}

/// Source sampled from `shape`; target an independent resample of the same
/// surface, deformed, then optionally cropped and perturbed.
pub fn make_instance(
    shape: Shape,
    deformation: Deformation,
    opts: &InstanceOptions,
    seed: u64,
) -> Result<Instance> {
    make_posed_instance(shape, [0.0; 3], deformation, opts, seed)
}

/// [`make_instance`] with the canonical surface first rotated by the
/// axis-angle vector `pose`.
pub fn make_posed_instance(
    shape: Shape,
    pose: Point3,
    deformation: Deformation,
    opts: &InstanceOptions,
    seed: u64,
) -> Result<Instance> {
    let rotation = warp::exp_so3(pose);
    let place = |c: PointCloud| {
        let pts = c
            .points()
            .iter()
            .map(|&p| warp::mat_vec(&rotation, p))
            .collect();
        c.with_points(pts).expect("finite")
    };
    let raw = place(sample_surface(shape, opts.points, seed));
    let s = if raw.diagonal() > 0.0 {
        opts.diagonal / raw.diagonal()
    } else {
        1.0
    };
    let rescale = |c: &PointCloud| {
        let pts = c.points().iter().map(|&p| types::scale(p, s)).collect();
        c.with_points(pts).expect("finite")
    };
    let source = rescale(&raw);
    let resample = rescale(&place(sample_surface(
        shape,
        opts.points,
        seed ^ 0x5EED_0001,
    )));
    let (_, gt) = apply_deformation(&source, &deformation);
    let (mut target, _) = apply_deformation(&resample, &deformation);
    if let Some(f) = opts.overlap {
        target = make_partial(&target, f, seed ^ 0x5EED_0002)?;
    }
    if let Some((ratio, radius)) = opts.noise {
        target = add_noise(&target, ratio, radius, seed ^ 0x5EED_0003)?.0;
    }
    Ok(Instance {
        name: format!("{}-{}-{}", shape, deformation.kind(), seed),
        shape,
        deformation,
        source,
        target,
        gt,
    })
}

/// Shapes of the benchmark suite. Spheres are left out: a rotation about the
/// center leaves a sphere invariant, so no chamfer-driven method can recover
/// its flow.
pub const SUITE_SHAPES: [Shape; 3] = [Shape::Plane, Shape::Cylinder, Shape::Torus];

/// Magnitude ranges of the benchmark suite, sampled uniformly per instance.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteSpec {
    /// End-to-end twist angle in degrees.
    pub twist_degrees: (f64, f64),
    /// End-to-end bend angle in degrees.
    pub bend_degrees: (f64, f64),
    /// Sine amplitude as a fraction of the diagonal.
    pub sine_amplitude: (f64, f64),
    /// Sine periods over the object length.
    pub sine_periods: (f64, f64),
}

impl Default for SuiteSpec {
    fn default() -> Self {
        Self {
            twist_degrees: (30.0, 50.0),
            bend_degrees: (40.0, 70.0),
            sine_amplitude: (0.05, 0.08),
            sine_periods: (1.0, 1.5),
        }
    }
}

/// Orientation of `shape` for deformation `kind` (0 twist, 1 bend, 2 sine).
/// Cylinders stand upright for twists and lie along `x` otherwise.
fn suite_pose(shape: Shape, kind: usize) -> Point3 {
    match (shape, kind) {
        (Shape::Cylinder, 1 | 2) => [0.0, std::f64::consts::FRAC_PI_2, 0.0],
        _ => [0.0; 3],
    }
}

/// Extent along `x` of the posed shape scaled to unit diagonal.
fn posed_length(shape: Shape, pose: Point3) -> f64 {
    let e = shape.extent();
    let r = warp::exp_so3(pose);
    let x = (0..3).map(|j| (r[0][j] * e[j]).abs()).sum::<f64>();
    x / types::norm(e)
}

/// The benchmark suite with default magnitudes; see [`suite_with`].
pub fn suite(count: usize, opts: &InstanceOptions, seed: u64) -> Result<Vec<Instance>> {
    suite_with(count, opts, &SuiteSpec::default(), seed)
}

/// `count` instances cycling through twist, bend and sine deformations and
/// then through [`SUITE_SHAPES`], so that every pairing appears. All
/// deformations act along `x`: twists turn the object about `x`, bends curl
/// it around `y` and sine waves displace along `z`. Shapes are posed by
/// [`suite_pose`] and rates are scaled to the posed length along `x`.
pub fn suite_with(
    count: usize,
    opts: &InstanceOptions,
    spec: &SuiteSpec,
    seed: u64,
) -> Result<Vec<Instance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let kind = i % 3;
        let shape = SUITE_SHAPES[(i / 3) % SUITE_SHAPES.len()];
        let pose = suite_pose(shape, kind);
        let length = posed_length(shape, pose) * opts.diagonal;
        let tilt: [f64; 2] = [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)];
        let sign = if rng.gen() { 1.0 } else { -1.0 };
        let mut draw = |(lo, hi): (f64, f64)| if hi > lo { rng.gen_range(lo..hi) } else { lo };
        let deformation = match kind {
            0 => Deformation::Twist {
                axis: [1.0, tilt[0], tilt[1]],
                rate: draw(spec.twist_degrees).to_radians() * sign / length,
            },
            1 => Deformation::Bend {
                axis: [tilt[0], 1.0, tilt[1]],
                curvature: draw(spec.bend_degrees).to_radians() * sign / length,
            },
            _ => Deformation::Sine {
                amplitude: draw(spec.sine_amplitude) * opts.diagonal * sign,
                frequency: draw(spec.sine_periods) * TAU / length,
            },
        };
        out.push(make_posed_instance(
            shape,
            pose,
            deformation,
            opts,
            rng.gen(),
        )?);
    }
    Ok(out)
}
