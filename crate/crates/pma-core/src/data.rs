//! Synthetic 4-class point cloud task: sphere, cube, torus, capped cylinder.
//! Each cloud gets a uniform random pose, then an exact unit-bounding-box
//! normalization (longest extent exactly 1, centered at the origin) computed
//! from the rotated shape's support function; Gaussian jitter is added last,
//! so noiseless clouds sit on the exact analytic surface. The random pose is
//! what keeps the task from collapsing to axis-aligned statistics.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use crate::config::{RunConfig, N_CLASSES};
use crate::error::{Error, Result};
use crate::geometry::PointSet;

pub const CLASS_NAMES: [&str; 4] = ["sphere", "cube", "torus", "cylinder"];

/// Torus tube radius before normalization (major radius is 1).
const TORUS_R_MINOR: f64 = 0.4;
/// Cylinder radius and height before normalization.
const CYL_RADIUS: f64 = 0.5;
const CYL_HEIGHT: f64 = 1.4;

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub clouds: Vec<PointSet>,
    pub labels: Vec<usize>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub train: DatasetSplit,
    pub test: DatasetSplit,
}

// Natural-size samplers: sphere of radius 0.5, unit cube, torus with major
// radius 1 and tube TORUS_R_MINOR, capped cylinder of radius CYL_RADIUS and
// height CYL_HEIGHT. Pose and normalization are applied afterwards.

fn sample_sphere(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let v: [f64; 3] = UnitSphere.sample(rng);
    [0.5 * v[0], 0.5 * v[1], 0.5 * v[2]]
}

fn sample_cube(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let face = rng.gen_range(0..6usize);
    let u = rng.gen_range(-0.5..0.5);
    let v = rng.gen_range(-0.5..0.5);
    let fixed = if face % 2 == 0 { 0.5 } else { -0.5 };
    match face / 2 {
        0 => [fixed, u, v],
        1 => [u, fixed, v],
        _ => [u, v, fixed],
    }
}

fn sample_torus(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let phi = rng.gen_range(0.0..std::f64::consts::TAU);
    // Rejection keeps the surface measure uniform: the outer rim carries
    // more area than the inner rim in proportion to 1 + r*cos(theta).
    let theta = loop {
        let t = rng.gen_range(0.0..std::f64::consts::TAU);
        let accept = (1.0 + TORUS_R_MINOR * t.cos()) / (1.0 + TORUS_R_MINOR);
        if rng.gen_range(0.0..1.0) < accept {
            break t;
        }
    };
    let ring = 1.0 + TORUS_R_MINOR * theta.cos();
    [
        ring * phi.cos(),
        ring * phi.sin(),
        TORUS_R_MINOR * theta.sin(),
    ]
}

fn sample_cylinder(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let lateral_area = std::f64::consts::TAU * CYL_RADIUS * CYL_HEIGHT;
    let cap_area = 2.0 * std::f64::consts::PI * CYL_RADIUS * CYL_RADIUS;
    let phi = rng.gen_range(0.0..std::f64::consts::TAU);
    if rng.gen_range(0.0..lateral_area + cap_area) < lateral_area {
        let z = rng.gen_range(-0.5 * CYL_HEIGHT..0.5 * CYL_HEIGHT);
        [CYL_RADIUS * phi.cos(), CYL_RADIUS * phi.sin(), z]
    } else {
        let rho = CYL_RADIUS * rng.gen_range(0.0..1.0f64).sqrt();
        let z = if rng.gen_range(0.0..1.0) < 0.5 { 0.5 } else { -0.5 } * CYL_HEIGHT;
        [rho * phi.cos(), rho * phi.sin(), z]
    }
}

fn natural_sample(class: usize, rng: &mut ChaCha8Rng) -> [f64; 3] {
    match class {
        0 => sample_sphere(rng),
        1 => sample_cube(rng),
        2 => sample_torus(rng),
        _ => sample_cylinder(rng),
    }
}

/// Uniform random rotation from a normalized Gaussian quaternion; rows map
/// body coordinates to world coordinates.
fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let gauss = Normal::new(0.0, 1.0).expect("unit normal is valid");
    loop {
        let q: [f64; 4] = [
            gauss.sample(rng),
            gauss.sample(rng),
            gauss.sample(rng),
            gauss.sample(rng),
        ];
        let norm2: f64 = q.iter().map(|v| v * v).sum();
        if norm2 < 1e-12 {
            continue;
        }
        let s = 1.0 / norm2.sqrt();
        let (w, x, y, z) = (q[0] * s, q[1] * s, q[2] * s, q[3] * s);
        return [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ];
    }
}

/// Exact half-extent of the rotated ideal surface along each world axis, via
/// the shapes' support functions. All four shapes are centrally symmetric, so
/// unit-bounding-box normalization is the isotropic scale 0.5 / max extent.
fn support_half_extents(class: usize, rot: &[[f64; 3]; 3]) -> [f64; 3] {
    let mut h = [0.0; 3];
    for (i, row) in rot.iter().enumerate() {
        // `row` is the world axis i expressed in body coordinates.
        let in_plane = (row[0] * row[0] + row[1] * row[1]).sqrt();
        let axial = row[2].abs();
        h[i] = match class {
            0 => 0.5,
            1 => 0.5 * (row[0].abs() + row[1].abs() + row[2].abs()),
            2 => in_plane + TORUS_R_MINOR,
            _ => CYL_RADIUS * in_plane + 0.5 * CYL_HEIGHT * axial,
        };
    }
    h
}

fn support_scale(class: usize, rot: &[[f64; 3]; 3]) -> f64 {
    let h = support_half_extents(class, rot);
    0.5 / h[0].max(h[1]).max(h[2])
}

const IDENTITY: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Canonical-pose surface samples (no rotation, no jitter), normalized to the
/// unit bounding box. Mainly useful for verifying the analytic geometry.
pub fn sample_surface(class: usize, points: usize, rng: &mut ChaCha8Rng) -> Result<Vec<[f64; 3]>> {
    if class >= N_CLASSES {
        return Err(Error::Data(format!("class {class} out of range")));
    }
    let scale = support_scale(class, &IDENTITY);
    Ok((0..points)
        .map(|_| {
            let p = natural_sample(class, rng);
            [scale * p[0], scale * p[1], scale * p[2]]
        })
        .collect())
}

/// One cloud, fully determined by (dataset seed, sample index): a uniform
/// random pose, surface samples, exact normalization, then jitter.
pub fn sample_cloud(
    class: usize,
    points: usize,
    sigma: f64,
    dataset_seed: u64,
    sample_index: u64,
) -> Result<PointSet> {
    if class >= N_CLASSES {
        return Err(Error::Data(format!("class {class} out of range")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(dataset_seed);
    rng.set_stream(sample_index);
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Data(e.to_string()))?;
    let rot = random_rotation(&mut rng);
    let scale = support_scale(class, &rot);
    let mut coords = Vec::with_capacity(points);
    for _ in 0..points {
        let b = natural_sample(class, &mut rng);
        let mut p = [0.0f64; 3];
        for (c, row) in p.iter_mut().zip(&rot) {
            *c = scale * (row[0] * b[0] + row[1] * b[1] + row[2] * b[2]);
        }
        for c in &mut p {
            *c += noise.sample(&mut rng);
        }
        coords.push(p);
    }
    PointSet::from_coords(&coords)
}

/// Labels cycle through the class set, so any count is balanced within one
/// sample per class. Train and test draw from disjoint sample-index ranges
/// of the same seed.
pub fn generate_dataset(cfg: &RunConfig) -> Result<SyntheticDataset> {
    if !(cfg.sigma >= 0.0) {
        return Err(Error::Config(format!("sigma = {} must be >= 0", cfg.sigma)));
    }
    let make = |count: usize, index_base: u64| -> Result<DatasetSplit> {
        let mut clouds = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let label = i % N_CLASSES;
            clouds.push(sample_cloud(
                label,
                cfg.points,
                cfg.sigma,
                cfg.dataset_seed,
                index_base + i as u64,
            )?);
            labels.push(label);
        }
        Ok(DatasetSplit { clouds, labels })
    };
    Ok(SyntheticDataset {
        train: make(cfg.train_clouds, 0)?,
        test: make(cfg.test_clouds, cfg.train_clouds as u64)?,
    })
}

/// Plain text, one `x y z` triple per line. `{}` formatting round-trips f64
/// exactly, so write followed by read is lossless.
pub fn write_xyz(path: &Path, ps: &PointSet) -> Result<()> {
    let mut out = String::new();
    for i in 0..ps.len() {
        let p = ps.point(i);
        out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_xyz(path: &Path) -> Result<PointSet> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut coords = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Data(format!(
                "{}:{}: expected 3 coordinates, found {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let mut p = [0.0f64; 3];
        for (axis, f) in fields.iter().enumerate() {
            p[axis] = f.parse::<f64>().map_err(|e| {
                Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            if !p[axis].is_finite() {
                return Err(Error::Data(format!(
                    "{}:{}: non-finite coordinate",
                    path.display(),
                    lineno + 1
                )));
            }
        }
        coords.push(p);
    }
    if coords.is_empty() {
        return Err(Error::Data(format!("{}: no points", path.display())));
    }
    PointSet::from_coords(&coords)
}

/// Writes `labels.csv` plus one `.xyz` file per cloud into `dir`.
pub fn save_split_dir(dir: &Path, split: &DatasetSplit) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut labels = String::from("filename,label\n");
    for (i, (cloud, label)) in split.clouds.iter().zip(&split.labels).enumerate() {
        let name = format!("cloud_{i:04}.xyz");
        write_xyz(&dir.join(&name), cloud)?;
        labels.push_str(&format!("{name},{label}\n"));
    }
    fs::write(dir.join("labels.csv"), labels)?;
    Ok(())
}

/// Reads a directory in the `save_split_dir` layout, in labels.csv order.
pub fn load_split_dir(dir: &Path) -> Result<DatasetSplit> {
    let labels_path = dir.join("labels.csv");
    let text = fs::read_to_string(&labels_path)
        .map_err(|e| Error::Data(format!("{}: {e}", labels_path.display())))?;
    let mut clouds = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line.trim() != "filename,label" {
                return Err(Error::Data(format!(
                    "{}: expected header filename,label",
                    labels_path.display()
                )));
            }
            continue;
        }
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (name, label) = line.split_once(',').ok_or_else(|| {
            Error::Data(format!("{}:{}: expected filename,label", labels_path.display(), lineno + 1))
        })?;
        let label: usize = label.trim().parse().map_err(|e| {
            Error::Data(format!("{}:{}: {e}", labels_path.display(), lineno + 1))
        })?;
        clouds.push(read_xyz(&dir.join(name.trim()))?);
        labels.push(label);
    }
    if clouds.is_empty() {
        return Err(Error::Data(format!("{}: no labeled clouds", labels_path.display())));
    }
    Ok(DatasetSplit { clouds, labels })
}
