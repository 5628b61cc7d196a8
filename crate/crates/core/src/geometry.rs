//! Particle distributions on the cube `[-1, 1]³` and radial interaction kernels.
//!
//! Points are drawn with [`ChaCha8Rng`] seeded through `seed_from_u64`, so a
//! `(geometry, n, seed)` triple reproduces the same cloud on every platform.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Geometry {
    /// Uniform in the solid cube.
    Cube,
    /// Uniform on the six faces.
    Surf,
    /// Uniform on the twelve edges.
    Edge,
}

impl Geometry {
    pub const ALL: [Geometry; 3] = [Geometry::Cube, Geometry::Surf, Geometry::Edge];

    pub fn name(self) -> &'static str {
        match self {
            Geometry::Cube => "cube",
            Geometry::Surf => "surf",
            Geometry::Edge => "edge",
        }
    }
}

impl fmt::Display for Geometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Geometry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cube" => Ok(Geometry::Cube),
            "surf" | "surface" => Ok(Geometry::Surf),
            "edge" | "edges" => Ok(Geometry::Edge),
            other => Err(Error::invalid(
                "geometry",
                format!("unknown geometry `{other}` (expected cube, surf or edge)"),
            )),
        }
    }
}

/// Radial kernel `K(r)`; both variants evaluate to zero at `r = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Kernel {
    /// `1 / r^p`.
    InversePower(u32),
    /// `ln r`.
    Log,
}

impl Kernel {
    /// Evaluates the kernel from the squared distance, which avoids a square
    /// root for even orders.
    #[inline]
    pub fn eval_sq(self, r2: f64) -> f64 {
        if r2 == 0.0 {
            return 0.0;
        }
        match self {
            Kernel::InversePower(p) => {
                if p % 2 == 0 {
                    1.0 / r2.powi((p / 2) as i32)
                } else {
                    1.0 / r2.sqrt().powi(p as i32)
                }
            }
            Kernel::Log => 0.5 * r2.ln(),
        }
    }

    #[inline]
    pub fn eval(self, r: f64) -> f64 {
        self.eval_sq(r * r)
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kernel::InversePower(p) => write!(f, "invpow:{p}"),
            Kernel::Log => f.write_str("log"),
        }
    }
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "log" || s == "ln" {
            return Ok(Kernel::Log);
        }
        let order = s
            .strip_prefix("invpow:")
            .ok_or_else(|| Error::invalid("kernel", format!("unknown kernel `{s}` (expected invpow:<p> or log)")))?;
        match order.parse::<u32>() {
            Ok(p) if p > 0 => Ok(Kernel::InversePower(p)),
            _ => Err(Error::invalid(
                "kernel",
                format!("order `{order}` is not a positive integer"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
    geometry: Geometry,
    seed: u64,
}

impl PointCloud {
    /// Wraps explicit coordinates; `geometry` and `seed` are kept as labels.
    pub fn from_points(points: Vec<[f64; 3]>, geometry: Geometry, seed: u64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        Ok(PointCloud { points, geometry, seed })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    pub fn dist_sq(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (&self.points[i], &self.points[j]);
        let dx = a[0] - b[0];
        let dy = a[1] - b[1];
        let dz = a[2] - b[2];
        dx * dx + dy * dy + dz * dz
    }
}

/// Draws `n` points uniformly on the region named by `geometry`.
pub fn generate_points(geometry: Geometry, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::invalid("n", "at least one point is required"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| match geometry {
            Geometry::Cube => [uniform(&mut rng), uniform(&mut rng), uniform(&mut rng)],
            Geometry::Surf => {
                let face = rng.gen_range(0..6usize);
                let mut p = [uniform(&mut rng), uniform(&mut rng), uniform(&mut rng)];
                p[face / 2] = if face % 2 == 0 { -1.0 } else { 1.0 };
                p
            }
            Geometry::Edge => {
                // An edge is fixed by its free axis and the signs of the other two.
                let edge = rng.gen_range(0..12usize);
                let axis = edge / 4;
                let t = uniform(&mut rng);
                let s0 = if edge & 1 == 0 { -1.0 } else { 1.0 };
                let s1 = if edge & 2 == 0 { -1.0 } else { 1.0 };
                match axis {
                    0 => [t, s0, s1],
                    1 => [s0, t, s1],
                    _ => [s0, s1, t],
                }
            }
        })
        .collect();
    Ok(PointCloud { points, geometry, seed })
}

fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen_range(-1.0..=1.0)
}

/// `K(‖x_i − x_j‖₂)` in the cloud's original ordering.
pub fn entry(cloud: &PointCloud, kernel: Kernel, i: usize, j: usize) -> Result<f64> {
    let n = cloud.len();
    if i >= n || j >= n {
        return Err(Error::IndexOutOfRange { row: i, col: j, n });
    }
    Ok(kernel.eval_sq(cloud.dist_sq(i, j)))
}
