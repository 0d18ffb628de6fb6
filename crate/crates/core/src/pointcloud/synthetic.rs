use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::pointcloud::{ColorRange, ColoredPointCloud, LabeledDataset, SplitTag};

/// Bound on the radial/offset surface noise added to generated shapes.
/// Construction guarantees e.g. |"distance to sphere surface"| <= this.
pub const SURFACE_NOISE: f64 = 0.02;

/// Geometry primitives the generator samples points on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
    Plane,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Cylinder,
        ShapeKind::Cone,
        ShapeKind::Torus,
        ShapeKind::Plane,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Cone => "cone",
            ShapeKind::Torus => "torus",
            ShapeKind::Plane => "plane",
        }
    }
}

/// Class-correlated color patterns; colors are what make the color route
/// carry label signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorPattern {
    Solid,
    /// Two tones split at the shape's equator.
    TwoTone,
    /// Linear blend from base to a darkened base along height.
    Gradient,
}

impl ColorPattern {
    pub const ALL: [ColorPattern; 3] = [
        ColorPattern::Solid,
        ColorPattern::TwoTone,
        ColorPattern::Gradient,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ColorPattern::Solid => "solid",
            ColorPattern::TwoTone => "twotone",
            ColorPattern::Gradient => "gradient",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    pub points: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 8,
            per_class: 32,
            points: 1024,
            seed: 0,
        }
    }
}

const MAX_CLASSES: usize = ShapeKind::ALL.len() * ColorPattern::ALL.len();

/// Samples `n` points on the unit-scale surface of `kind`, plus bounded
/// surface noise. No rotation or scale jitter is applied here, so
/// construction-time properties (sphere radius, plane height) hold up to
/// [`SURFACE_NOISE`].
pub fn shape_surface_points(kind: ShapeKind, n: usize, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::Empty {
            context: "shape sampling",
        });
    }
    let mut data = Vec::with_capacity(n * 3);
    for _ in 0..n {
        let noise = rng.random_range(-SURFACE_NOISE..=SURFACE_NOISE);
        let [x, y, z] = match kind {
            ShapeKind::Sphere => {
                let dir = random_unit_vector(rng);
                let r = 1.0 + noise;
                [dir[0] * r, dir[1] * r, dir[2] * r]
            }
            ShapeKind::Cube => {
                // Pick a face, then a uniform point on it; push outward by
                // the noise along the face normal.
                let face = rng.random_range(0..6usize);
                let u = rng.random_range(-1.0..1.0);
                let v = rng.random_range(-1.0..1.0);
                let s = 1.0 + noise;
                match face {
                    0 => [s, u, v],
                    1 => [-s, u, v],
                    2 => [u, s, v],
                    3 => [u, -s, v],
                    4 => [u, v, s],
                    _ => [u, v, -s],
                }
            }
            ShapeKind::Cylinder => {
                // Lateral area 2*pi*r*h = 4*pi, cap area 2*pi*r^2 = 2*pi.
                let lateral = rng.random_range(0.0..3.0) < 2.0;
                if lateral {
                    let theta = rng.random_range(0.0..std::f64::consts::TAU);
                    let r = 1.0 + noise;
                    [r * theta.cos(), r * theta.sin(), rng.random_range(-1.0..1.0)]
                } else {
                    let theta = rng.random_range(0.0..std::f64::consts::TAU);
                    let r = rng.random_range(0.0f64..1.0).sqrt();
                    let z: f64 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    [r * theta.cos(), r * theta.sin(), z + noise * z.signum()]
                }
            }
            ShapeKind::Cone => {
                // Apex at z = 1, base disc at z = -1 with radius 1.
                let lateral = rng.random_range(0.0..std::f64::consts::SQRT_2 + 1.0)
                    < std::f64::consts::SQRT_2;
                if lateral {
                    // Uniform in area: radius density grows linearly.
                    let t = rng.random_range(0.0f64..1.0).sqrt();
                    let theta = rng.random_range(0.0..std::f64::consts::TAU);
                    let r = t * (1.0 + noise);
                    [r * theta.cos(), r * theta.sin(), 1.0 - 2.0 * t]
                } else {
                    let theta = rng.random_range(0.0..std::f64::consts::TAU);
                    let r = rng.random_range(0.0f64..1.0).sqrt();
                    [r * theta.cos(), r * theta.sin(), -1.0 + noise]
                }
            }
            ShapeKind::Torus => {
                // Major radius 1, minor radius 0.35; rejection on the major
                // angle keeps the surface density uniform.
                let minor = 0.35;
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                let theta = loop {
                    let candidate = rng.random_range(0.0..std::f64::consts::TAU);
                    let accept = (1.0 + minor * candidate.cos()) / (1.0 + minor);
                    if rng.random_range(0.0..1.0) < accept {
                        break candidate;
                    }
                };
                let ring = 1.0 + (minor + noise) * theta.cos();
                [
                    ring * phi.cos(),
                    ring * phi.sin(),
                    (minor + noise) * theta.sin(),
                ]
            }
            ShapeKind::Plane => [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                noise,
            ],
        };
        data.extend_from_slice(&[x, y, z]);
    }
    Ok(Matrix::from_raw(n, 3, data))
}

fn random_unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let norm2: f64 = v.iter().map(|x| x * x).sum();
        if norm2 > 1e-6 && norm2 <= 1.0 {
            let norm = norm2.sqrt();
            return [v[0] / norm, v[1] / norm, v[2] / norm];
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor() as usize % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r * 255.0, g * 255.0, b * 255.0]
}

/// Normalizes a generated instance. A degenerate instance (single point,
/// or all points coincident) has no spatial extent to scale, so it is
/// centered at the origin with unit scale instead.
fn normalize_or_center(cloud: ColoredPointCloud) -> Result<ColoredPointCloud> {
    let n = cloud.len();
    let first = cloud.positions().row(0).to_vec();
    let degenerate = (0..n).all(|i| cloud.positions().row(i) == first.as_slice());
    if !degenerate {
        return cloud.normalize_with(ColorRange::EightBit);
    }
    let colors = cloud.colors().map(|c| 2.0 * c / 255.0 - 1.0);
    ColoredPointCloud::from_split(
        Matrix::zeros(n, 3),
        colors,
        Some(crate::pointcloud::NormalizeState {
            centroid: [first[0], first[1], first[2]],
            scale: 1.0,
            color_range: ColorRange::EightBit,
        }),
    )
}

fn class_recipe(class: usize, class_count: usize) -> (ShapeKind, ColorPattern, f64) {
    let shape = ShapeKind::ALL[class % ShapeKind::ALL.len()];
    let pattern = ColorPattern::ALL[(class / ShapeKind::ALL.len()) % ColorPattern::ALL.len()];
    let hue = class as f64 / class_count as f64;
    (shape, pattern, hue)
}

pub fn class_name(class: usize, class_count: usize) -> String {
    let (shape, pattern, _) = class_recipe(class, class_count);
    format!("{}-{}", shape.name(), pattern.name())
}

fn colorize(
    positions: &Matrix,
    pattern: ColorPattern,
    hue: f64,
    rng: &mut ChaCha8Rng,
) -> Matrix {
    let base = hsv_to_rgb(hue, 0.85, 0.9);
    let alt = hsv_to_rgb(hue + 0.5, 0.85, 0.9);
    let n = positions.rows();
    let mut data = Vec::with_capacity(n * 3);
    let (zmin, zmax) = positions
        .data()
        .chunks(3)
        .map(|p| p[2])
        .fold((f64::MAX, f64::MIN), |(lo, hi), z| (lo.min(z), hi.max(z)));
    let span = (zmax - zmin).max(1e-9);
    for i in 0..n {
        let z = positions.row(i)[2];
        let color = match pattern {
            ColorPattern::Solid => base,
            ColorPattern::TwoTone => {
                if z > (zmin + zmax) / 2.0 {
                    base
                } else {
                    alt
                }
            }
            ColorPattern::Gradient => {
                let t = (z - zmin) / span;
                [
                    base[0] * t + alt[0] * (1.0 - t),
                    base[1] * t + alt[1] * (1.0 - t),
                    base[2] * t + alt[2] * (1.0 - t),
                ]
            }
        };
        for c in color {
            let jitter = rng.random_range(-8.0..=8.0);
            data.push((c + jitter).clamp(0.0, 255.0));
        }
    }
    Matrix::from_raw(n, 3, data)
}

/// Generates a labeled, normalized dataset of procedural colored shapes.
///
/// Each class is a (shape, color pattern, hue) combination; instances get a
/// random rotation about z and isotropic scale jitter. Deterministic under
/// the config seed.
pub fn generate_synthetic_dataset(config: &SyntheticConfig) -> Result<LabeledDataset> {
    if config.classes < 2 || config.classes > MAX_CLASSES {
        return Err(Error::InvalidArgument(format!(
            "unsupported class count {}; supported range is 2..={MAX_CLASSES}",
            config.classes
        )));
    }
    if config.per_class == 0 || config.points == 0 {
        return Err(Error::InvalidArgument(
            "per_class and points must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut clouds = Vec::with_capacity(config.classes * config.per_class);
    for class in 0..config.classes {
        let (shape, pattern, hue) = class_recipe(class, config.classes);
        for _ in 0..config.per_class {
            let mut positions = shape_surface_points(shape, config.points, &mut rng)?;
            let colors = colorize(&positions, pattern, hue, &mut rng);

            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let scale = rng.random_range(0.8..1.2);
            let (sin, cos) = angle.sin_cos();
            for i in 0..positions.rows() {
                let row = positions.row_mut(i);
                let (x, y) = (row[0], row[1]);
                row[0] = scale * (x * cos - y * sin);
                row[1] = scale * (x * sin + y * cos);
                row[2] *= scale;
            }

            let cloud = normalize_or_center(ColoredPointCloud::new(positions, colors)?)?
                .with_label(class);
            clouds.push(cloud);
        }
    }
    let names = (0..config.classes)
        .map(|c| class_name(c, config.classes))
        .collect();
    LabeledDataset::new(clouds, config.classes, names, SplitTag::All)
}
