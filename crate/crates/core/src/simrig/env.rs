//! 2.5D environments: vertical wall segments extruded between a floor and a
//! ceiling, with procedural textures so cameras see more than flat color.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub color: [f64; 3],
}

impl Segment {
    pub fn length(&self) -> f64 {
        ((self.b[0] - self.a[0]).powi(2) + (self.b[1] - self.a[1]).powi(2)).sqrt()
    }
}

/// A closed polygon, either the room outline or a solid obstacle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub name: String,
    pub vertices: Vec<[f64; 2]>,
    pub color: [f64; 3],
}

impl Polygon {
    pub fn rect(name: &str, lo: [f64; 2], hi: [f64; 2], color: [f64; 3]) -> Self {
        Self { name: name.into(), vertices: vec![lo, [hi[0], lo[1]], hi, [lo[0], hi[1]]], color }
    }

    pub fn segments(&self) -> impl Iterator<Item = Segment> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| Segment { a: self.vertices[i], b: self.vertices[(i + 1) % n], color: self.color })
    }

    /// Even-odd point-in-polygon test.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let v = &self.vertices;
        let mut inside = false;
        let mut j = v.len() - 1;
        for i in 0..v.len() {
            let (a, b) = (v[i], v[j]);
            if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0] {
                inside = !inside;
            }
            j = i;
        }
        inside
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Surface {
    Wall,
    Floor,
    Ceiling,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub color: [f64; 3],
    pub surface: Surface,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub name: String,
    pub room: Polygon,
    pub obstacles: Vec<Polygon>,
    pub floor_z: f64,
    pub ceiling_z: f64,
    /// Plain surfaces show their base color unmodulated.
    #[serde(default = "yes")]
    pub textured: bool,
    #[serde(skip)]
    segments: Vec<Segment>,
}

fn yes() -> bool {
    true
}

fn cross(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

/// Parameter `t` where the planar ray `o + t d` crosses segment `s`.
pub fn ray_segment(o: [f64; 2], d: [f64; 2], s: &Segment) -> Option<f64> {
    let e = [s.b[0] - s.a[0], s.b[1] - s.a[1]];
    let denom = cross(d, e);
    if denom == 0.0 {
        return None;
    }
    let ao = [s.a[0] - o[0], s.a[1] - o[1]];
    let t = cross(ao, e) / denom;
    let u = cross(ao, d) / denom;
    if t > 1e-12 && (0.0..=1.0).contains(&u) {
        Some(t)
    } else {
        None
    }
}

impl Environment {
    pub fn new(name: &str, room: Polygon, obstacles: Vec<Polygon>, floor_z: f64, ceiling_z: f64) -> Result<Self> {
        if !(ceiling_z > floor_z) {
            return invalid("ceiling must be above the floor");
        }
        let mut env = Self { name: name.into(), room, obstacles, floor_z, ceiling_z, textured: true, segments: Vec::new() };
        env.rebuild()?;
        Ok(env)
    }

    /// Recomputes the segment cache; needed after deserializing.
    pub fn rebuild(&mut self) -> Result<()> {
        let mut segs: Vec<Segment> = self.room.segments().collect();
        for o in &self.obstacles {
            if o.vertices.len() < 3 {
                return invalid(format!("obstacle {} needs at least three vertices", o.name));
            }
            segs.extend(o.segments());
        }
        if self.room.vertices.len() < 3 {
            return invalid("room outline needs at least three vertices");
        }
        if let Some(s) = segs.iter().find(|s| s.length() < 1e-9) {
            return invalid(format!("degenerate segment at {:?}", s.a));
        }
        self.segments = segs;
        Ok(())
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Axis-aligned world box `(min, max)` enclosing all geometry.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY, f64::INFINITY, self.floor_z];
        let mut hi = [f64::NEG_INFINITY, f64::NEG_INFINITY, self.ceiling_z];
        for v in self.room.vertices.iter().chain(self.obstacles.iter().flat_map(|o| o.vertices.iter())) {
            for a in 0..2 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        (lo, hi)
    }

    /// Inside the room and outside every obstacle.
    pub fn is_free(&self, p: [f64; 2]) -> bool {
        self.room.contains(p) && !self.obstacles.iter().any(|o| o.contains(p))
    }

    /// Distance from `p` to the nearest wall segment.
    pub fn clearance(&self, p: [f64; 2]) -> f64 {
        self.segments
            .iter()
            .map(|s| {
                let e = [s.b[0] - s.a[0], s.b[1] - s.a[1]];
                let l2 = e[0] * e[0] + e[1] * e[1];
                let u = (((p[0] - s.a[0]) * e[0] + (p[1] - s.a[1]) * e[1]) / l2).clamp(0.0, 1.0);
                let q = [s.a[0] + u * e[0] - p[0], s.a[1] + u * e[1] - p[1]];
                (q[0] * q[0] + q[1] * q[1]).sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn check_pose(&self, p: [f64; 3]) -> Result<()> {
        if !self.is_free([p[0], p[1]]) || p[2] <= self.floor_z || p[2] >= self.ceiling_z {
            return Err(Error::InvalidPose(format!("({:.3}, {:.3}, {:.3}) is not in free space", p[0], p[1], p[2])));
        }
        Ok(())
    }

    /// Nearest surface hit along `origin + t * dir`. `dir` need not be
    /// unit; distances are in units of its length.
    pub fn raycast(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut consider = |t: f64, color: [f64; 3], surface: Surface| {
            if best.is_none_or(|b| t < b.distance) {
                best = Some(Hit { distance: t, color, surface });
            }
        };
        let o2 = [origin[0], origin[1]];
        let d2 = [dir[0], dir[1]];
        for s in &self.segments {
            if let Some(t) = ray_segment(o2, d2, s) {
                let z = origin[2] + t * dir[2];
                if z >= self.floor_z && z <= self.ceiling_z {
                    let e = [s.b[0] - s.a[0], s.b[1] - s.a[1]];
                    let h = [o2[0] + t * d2[0] - s.a[0], o2[1] + t * d2[1] - s.a[1]];
                    let along = (h[0] * e[0] + h[1] * e[1]) / s.length();
                    let color = if self.textured { wall_texture(s.color, along, z - self.floor_z) } else { s.color };
                    consider(t, color, Surface::Wall);
                }
            }
        }
        if dir[2] < 0.0 {
            let t = (self.floor_z - origin[2]) / dir[2];
            let p = [origin[0] + t * dir[0], origin[1] + t * dir[1]];
            if t > 0.0 && self.room.contains(p) {
                consider(t, if self.textured { floor_texture(p) } else { [0.5; 3] }, Surface::Floor);
            }
        } else if dir[2] > 0.0 {
            let t = (self.ceiling_z - origin[2]) / dir[2];
            let p = [origin[0] + t * dir[0], origin[1] + t * dir[1]];
            if t > 0.0 && self.room.contains(p) {
                consider(t, [0.85, 0.85, 0.8], Surface::Ceiling);
            }
        }
        let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
        best.map(|mut h| {
            h.distance *= n;
            h
        })
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "mini-office" => Ok(mini_office()),
            "mini-commons" => Ok(mini_commons()),
            _ => invalid(format!("unknown scene '{name}' (expected mini-office or mini-commons)")),
        }
    }

    /// Empty untextured square room `[0, side]^2`.
    pub fn square_room(side: f64, height: f64, color: [f64; 3]) -> Result<Self> {
        let mut env = Environment::new("square", Polygon::rect("room", [0.0, 0.0], [side, side], color), Vec::new(), 0.0, height)?;
        env.textured = false;
        Ok(env)
    }
}

/// Vertical stripes every 0.4 m and a darker band above 1.6 m.
fn wall_texture(base: [f64; 3], along: f64, height: f64) -> [f64; 3] {
    let stripe = if (along / 0.4).floor() as i64 % 2 == 0 { 1.0 } else { 0.7 };
    let band = if height > 1.6 { 0.8 } else { 1.0 };
    base.map(|c| c * stripe * band)
}

fn floor_texture(p: [f64; 2]) -> [f64; 3] {
    let checker = ((p[0] / 0.5).floor() as i64 + (p[1] / 0.5).floor() as i64).rem_euclid(2) == 0;
    if checker {
        [0.55, 0.45, 0.35]
    } else {
        [0.35, 0.28, 0.22]
    }
}

fn mini_office() -> Environment {
    let room = Polygon::rect("walls", [0.0, 0.0], [9.0, 8.0], [0.9, 0.88, 0.8]);
    let obstacles = vec![
        Polygon::rect("desk-a", [0.6, 0.6], [2.0, 1.4], [0.6, 0.4, 0.2]),
        Polygon::rect("desk-b", [0.6, 5.8], [2.0, 6.6], [0.6, 0.4, 0.2]),
        Polygon::rect("cabinet", [8.0, 0.5], [8.6, 2.5], [0.3, 0.35, 0.6]),
        Polygon::rect("partition", [4.3, 0.0], [4.5, 2.0], [0.7, 0.7, 0.72]),
        Polygon::rect("pillar", [4.2, 3.8], [4.6, 4.2], [0.8, 0.3, 0.3]),
        Polygon::rect("shelf", [6.0, 7.2], [7.5, 7.7], [0.2, 0.55, 0.3]),
        Polygon::rect("table", [6.6, 4.5], [7.6, 5.5], [0.65, 0.5, 0.3]),
        Polygon::rect("printer", [0.3, 3.6], [0.9, 4.2], [0.4, 0.4, 0.45]),
    ];
    Environment::new("mini-office", room, obstacles, 0.0, 2.6).expect("bundled scene is valid")
}

fn mini_commons() -> Environment {
    let room = Polygon::rect("walls", [0.0, 0.0], [18.0, 12.0], [0.85, 0.85, 0.9]);
    let obstacles = vec![
        Polygon::rect("pillar-1", [5.75, 5.75], [6.25, 6.25], [0.8, 0.3, 0.3]),
        Polygon::rect("pillar-2", [11.75, 5.75], [12.25, 6.25], [0.3, 0.3, 0.8]),
        Polygon::rect("bench", [8.0, 7.2], [10.0, 7.8], [0.6, 0.45, 0.25]),
        Polygon::rect("counter", [15.5, 0.6], [17.5, 1.6], [0.3, 0.6, 0.35]),
        Polygon::rect("planter", [1.0, 10.0], [2.0, 11.0], [0.25, 0.5, 0.2]),
    ];
    Environment::new("mini-commons", room, obstacles, 0.0, 3.2).expect("bundled scene is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_square_center() {
        let env = Environment::square_room(1.0, 2.0, [1.0, 0.0, 0.0]).unwrap();
        let h = env.raycast([0.5, 0.5, 1.0], [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(h.distance, 0.5);
        assert_eq!(h.surface, Surface::Wall);
    }

    #[test]
    fn parallel_ray_misses_segment() {
        let s = Segment { a: [0.0, 1.0], b: [1.0, 1.0], color: [0.0; 3] };
        assert_eq!(ray_segment([0.0, 0.0], [1.0, 0.0], &s), None);
    }

    // Solves [d, -e] [t, u]^T = a - o with an explicit 2x2 inverse.
    fn oracle(env: &Environment, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        let mut best = f64::INFINITY;
        for s in env.segments() {
            let m = [[d[0], s.a[0] - s.b[0]], [d[1], s.a[1] - s.b[1]]];
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            if det == 0.0 {
                continue;
            }
            let r = [s.a[0] - o[0], s.a[1] - o[1]];
            let t = (m[1][1] * r[0] - m[0][1] * r[1]) / det;
            let u = (-m[1][0] * r[0] + m[0][0] * r[1]) / det;
            let z = o[2] + t * d[2];
            if t > 1e-12 && (0.0..=1.0).contains(&u) && z >= env.floor_z && z <= env.ceiling_z {
                best = best.min(t);
            }
        }
        if d[2] < 0.0 {
            best = best.min((env.floor_z - o[2]) / d[2]);
        }
        if d[2] > 0.0 {
            best = best.min((env.ceiling_z - o[2]) / d[2]);
        }
        best.is_finite().then(|| best * (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt())
    }

    #[test]
    fn raycast_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for name in ["mini-office", "mini-commons"] {
            let env = Environment::preset(name).unwrap();
            let (lo, hi) = env.bounds();
            let mut n = 0;
            while n < 2000 {
                let o = [rng.random_range(lo[0]..hi[0]), rng.random_range(lo[1]..hi[1]), rng.random_range(0.1..2.5)];
                if !env.is_free([o[0], o[1]]) {
                    continue;
                }
                let d = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3)];
                let got = env.raycast(o, d).map(|h| h.distance);
                let want = oracle(&env, o, d);
                match (got, want) {
                    (Some(g), Some(w)) => assert!((g - w).abs() <= 1e-12 * w.max(1.0), "{g} vs {w}"),
                    (g, w) => assert_eq!(g, w),
                }
                n += 1;
            }
        }
    }

    #[test]
    fn obstacles_are_not_free() {
        let env = Environment::preset("mini-office").unwrap();
        assert!(!env.is_free([4.4, 4.0]));
        assert!(env.is_free([3.0, 3.0]));
        assert!(env.check_pose([4.4, 4.0, 1.0]).is_err());
        assert!(Environment::preset("atrium").is_err());
    }

    #[test]
    fn deserialized_environment_rebuilds() {
        let env = Environment::preset("mini-commons").unwrap();
        let mut back: Environment = serde_json::from_str(&serde_json::to_string(&env).unwrap()).unwrap();
        assert!(back.segments().is_empty());
        back.rebuild().unwrap();
        assert_eq!(back, env);
    }
}
