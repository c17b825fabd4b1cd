//! World <-> unit-cube mapping shared by every module.

use serde::{Deserialize, Serialize};

/// Uniform-scale mapping of a world bounding box into the unit cube. The
/// box is centered in the cube and its largest extent (plus margin) spans
/// the cube side, so lengths scale by a single factor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFrame {
    pub world_min: [f64; 3],
    pub world_max: [f64; 3],
    /// World meters per unit-cube length.
    pub side: f64,
}

impl SceneFrame {
    pub fn from_box(world_min: [f64; 3], world_max: [f64; 3], margin: f64) -> Self {
        let extent = (0..3).map(|a| world_max[a] - world_min[a]).fold(0.0, f64::max);
        Self { world_min, world_max, side: extent * (1.0 + 2.0 * margin) }
    }

    fn center(&self) -> [f64; 3] {
        std::array::from_fn(|a| 0.5 * (self.world_min[a] + self.world_max[a]))
    }

    pub fn to_unit(&self, p: [f64; 3]) -> [f64; 3] {
        let c = self.center();
        std::array::from_fn(|a| 0.5 + (p[a] - c[a]) / self.side)
    }

    pub fn to_world(&self, u: [f64; 3]) -> [f64; 3] {
        let c = self.center();
        std::array::from_fn(|a| c[a] + (u[a] - 0.5) * self.side)
    }

    pub fn to_unit_len(&self, meters: f64) -> f64 {
        meters / self.side
    }

    pub fn to_world_len(&self, units: f64) -> f64 {
        units * self.side
    }

    /// The world box expressed in unit-cube coordinates.
    pub fn unit_box(&self) -> ([f64; 3], [f64; 3]) {
        (self.to_unit(self.world_min), self.to_unit(self.world_max))
    }
}

/// Parametric interval where `origin + t * dir` lies inside the box.
pub fn ray_box(origin: [f64; 3], dir: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a] == 0.0 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut ta, mut tb) = ((lo[a] - origin[a]) * inv, (hi[a] - origin[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 <= t1).then_some((t0, t1))
}
