//! Procedural box rooms rendered as equirectangular RGB plus ground-truth
//! distance.
//!
//! The room spans `[0, Lx] × [0, Ly] × [0, Lz]` with `z` measured up from
//! the floor. View directions come from the projection module; its `-z`
//! axis (the top image row) is mapped to room "up", so panoramas have the
//! ceiling at the top.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::projection::EquirectGrid;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneParams {
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// Camera position as fractions of the room extents; random when `None`.
    pub camera: Option<[f64; 3]>,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            width: 128,
            height: 64,
            seed: 0,
            camera: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Pattern {
    Checker,
    Stripes,
    Plaid,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Surface {
    base: [f64; 3],
    accent: [f64; 3],
    pattern: Pattern,
    tile: f64,
    phase: [f64; 2],
}

impl Surface {
    fn random(rng: &mut impl Rng) -> Self {
        let mut color = || std::array::from_fn(|_| rng.random_range(0.15..0.95));
        let (base, accent) = (color(), color());
        let pattern = match rng.random_range(0..3) {
            0 => Pattern::Checker,
            1 => Pattern::Stripes,
            _ => Pattern::Plaid,
        };
        Self {
            base,
            accent,
            pattern,
            tile: rng.random_range(0.3..1.2),
            phase: [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
        }
    }

    fn color(&self, u: f64, v: f64) -> [f64; 3] {
        let a = ((u / self.tile + self.phase[0]).floor() as i64).rem_euclid(2);
        let b = ((v / self.tile + self.phase[1]).floor() as i64).rem_euclid(2);
        let mix = match self.pattern {
            Pattern::Checker => ((a + b) % 2) as f64,
            Pattern::Stripes => a as f64,
            Pattern::Plaid => 0.5 * (a + b) as f64,
        };
        std::array::from_fn(|i| self.base[i] + mix * (self.accent[i] - self.base[i]))
    }
}

/// Room geometry and surface textures.
#[derive(Debug, Clone, PartialEq)]
pub struct Room {
    pub size: [f64; 3],
    pub camera: [f64; 3],
    surfaces: [Surface; 6],
}

impl Room {
    pub fn random(seed: u64, camera: Option<[f64; 3]>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = [
            rng.random_range(4.0..6.5),
            rng.random_range(4.0..6.5),
            rng.random_range(2.6..3.2),
        ];
        let random_camera = [
            rng.random_range(0.8..size[0] - 0.8),
            rng.random_range(0.8..size[1] - 0.8),
            rng.random_range(1.2..1.8),
        ];
        let surfaces = std::array::from_fn(|_| Surface::random(&mut rng));
        let camera = match camera {
            None => random_camera,
            Some(f) => {
                if f.iter().any(|&x| !(x > 0.0 && x < 1.0)) {
                    return Err(Error::Domain(format!(
                        "camera fractions {f:?} must lie strictly inside (0, 1)"
                    )));
                }
                std::array::from_fn(|i| f[i] * size[i])
            }
        };
        Ok(Self {
            size,
            camera,
            surfaces,
        })
    }

    /// Distance to the first wall along a unit room-frame direction, and
    /// that wall's colour.
    pub fn trace(&self, dir: [f64; 3]) -> (f64, [f64; 3]) {
        let mut best = (f64::INFINITY, 0usize);
        for axis in 0..3 {
            let d = dir[axis];
            if d == 0.0 {
                continue;
            }
            let (t, side) = if d > 0.0 {
                ((self.size[axis] - self.camera[axis]) / d, 1)
            } else {
                (-self.camera[axis] / d, 0)
            };
            if t < best.0 {
                best = (t, 2 * axis + side);
            }
        }
        let (t, wall) = best;
        let hit: [f64; 3] = std::array::from_fn(|i| self.camera[i] + t * dir[i]);
        let axis = wall / 2;
        let (u, v) = match axis {
            0 => (hit[1], hit[2]),
            1 => (hit[0], hit[2]),
            _ => (hit[0], hit[1]),
        };
        let base = self.surfaces[wall].color(u, v);
        let shade = (0.55 + 0.45 * dir[axis].abs()) / (1.0 + 0.04 * t);
        (t, base.map(|c| (c * shade).clamp(0.0, 1.0)))
    }
}

/// Rendered panorama: 8-bit RGB and `f64` distances, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<[u8; 3]>,
    pub distance: Vec<f64>,
    pub room: Room,
}

impl SyntheticScene {
    /// `[H, W, 3]` colours scaled to `[0, 1]`.
    pub fn rgb_tensor(&self) -> Tensor {
        let data = self
            .rgb
            .iter()
            .flat_map(|px| px.map(|c| f64::from(c) / 255.0))
            .collect();
        Tensor::new([self.height, self.width, 3], data).expect("sizes agree")
    }

    pub fn distance_tensor(&self) -> Tensor {
        Tensor::new([self.height, self.width], self.distance.clone()).expect("sizes agree")
    }
}

pub fn render(params: &SceneParams) -> Result<SyntheticScene> {
    let grid = EquirectGrid::new(params.width, params.height)?;
    let room = Room::random(params.seed, params.camera)?;
    let mut rgb = Vec::with_capacity(grid.pixel_count());
    let mut distance = Vec::with_capacity(grid.pixel_count());
    for row in 0..params.height {
        for col in 0..params.width {
            let [x, y, z] = grid.pixel_center_direction(col, row);
            let (t, color) = room.trace([x, y, -z]);
            distance.push(t);
            rgb.push(color.map(|c| (c * 255.0).round() as u8));
        }
    }
    Ok(SyntheticScene {
        width: params.width,
        height: params.height,
        rgb,
        distance,
        room,
    })
}
