//! Incremental traversal of a uniform voxel lattice along a ray.

/// Visits every lattice cell `[i * cell, (i + 1) * cell)^3` pierced by
/// `origin + t * dir` for `t` in `[t_start, t_end]`, in order, passing the
/// cell and its clipped parametric interval. Stops early when `visit`
/// returns `false`.
pub fn walk(origin: [f64; 3], dir: [f64; 3], cell: f64, t_start: f64, t_end: f64, mut visit: impl FnMut([i64; 3], f64, f64) -> bool) {
    if !(t_end > t_start) {
        return;
    }
    let mut idx = [0i64; 3];
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        let p = origin[a] + t_start * dir[a];
        idx[a] = (p / cell).floor() as i64;
        if dir[a] > 0.0 {
            step[a] = 1;
            t_max[a] = ((idx[a] + 1) as f64 * cell - origin[a]) / dir[a];
            t_delta[a] = cell / dir[a];
        } else if dir[a] < 0.0 {
            step[a] = -1;
            t_max[a] = (idx[a] as f64 * cell - origin[a]) / dir[a];
            t_delta[a] = -cell / dir[a];
        }
    }
    let mut t = t_start;
    loop {
        let axis = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        let exit = t_max[axis].min(t_end);
        if !visit(idx, t, exit.max(t)) || t_max[axis] >= t_end {
            return;
        }
        t = t_max[axis].max(t);
        idx[axis] += step[axis];
        t_max[axis] += t_delta[axis];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Brute force: every cell whose slab interval overlaps the segment.
    fn brute(origin: [f64; 3], dir: [f64; 3], cell: f64, t0: f64, t1: f64) -> Vec<[i64; 3]> {
        let mut out = Vec::new();
        for i in -10..20 {
            for j in -10..20 {
                for k in -10..20 {
                    let lo = [i as f64 * cell, j as f64 * cell, k as f64 * cell];
                    let hi = [lo[0] + cell, lo[1] + cell, lo[2] + cell];
                    if let Some((a, b)) = crate::scene::ray_box(origin, dir, lo, hi) {
                        let (a, b) = (a.max(t0), b.min(t1));
                        if b - a > 1e-9 {
                            out.push([i, j, k]);
                        }
                    }
                }
            }
        }
        out
    }

    proptest! {
        #[test]
        fn walk_visits_exactly_the_pierced_cells(
            ox in 0.05f64..0.95, oy in 0.05f64..0.95, oz in 0.05f64..0.95,
            dx in -1.0f64..1.0, dy in -1.0f64..1.0, dz in -1.0f64..1.0,
            len in 0.01f64..0.8,
        ) {
            let n = (dx * dx + dy * dy + dz * dz).sqrt();
            prop_assume!(n > 0.1);
            let dir = [dx / n, dy / n, dz / n];
            let origin = [ox, oy, oz];
            let cell = 0.1;
            let mut seen = Vec::new();
            walk(origin, dir, cell, 0.0, len, |c, a, b| {
                if b - a > 1e-9 {
                    seen.push(c);
                }
                true
            });
            let mut want = brute(origin, dir, cell, 0.0, len);
            let mut got = seen.clone();
            want.sort();
            got.sort();
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn axis_aligned_walk() {
        let mut cells = Vec::new();
        walk([0.05, 0.05, 0.05], [1.0, 0.0, 0.0], 0.1, 0.0, 0.3, |c, a, b| {
            cells.push((c, a, b));
            true
        });
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[0].0, [0, 0, 0]);
        assert_eq!(cells[3].0, [3, 0, 0]);
        assert!((cells[3].2 - 0.3).abs() < 1e-12);
    }
}
