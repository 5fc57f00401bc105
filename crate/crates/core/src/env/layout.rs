//! Obstacle layouts and the 2-D geometry the simulator needs: disk/rectangle
//! collision, swept segments and beam casting.

use serde::{Deserialize, Serialize};

use super::EnvError;

pub const LAYOUT_FORMAT: &str = "ceres-layout";
pub const LAYOUT_VERSION: u32 = 1;

/// Axis-aligned rectangle `[min, max]` in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn new(min: [f64; 2], max: [f64; 2]) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }

    /// Euclidean distance from `p` to the rectangle (zero inside).
    pub fn distance(&self, p: [f64; 2]) -> f64 {
        let dx = (self.min[0] - p[0]).max(0.0).max(p[0] - self.max[0]);
        let dy = (self.min[1] - p[1]).max(0.0).max(p[1] - self.max[1]);
        dx.hypot(dy)
    }

    fn corners(&self) -> [[f64; 2]; 4] {
        [
            self.min,
            [self.max[0], self.min[1]],
            self.max,
            [self.min[0], self.max[1]],
        ]
    }

    /// Entry parameter of the ray `origin + t·dir`, `t >= 0`, by the slab method.
    pub fn ray_entry(&self, origin: [f64; 2], dir: [f64; 2]) -> Option<f64> {
        let mut t_min = 0.0_f64;
        let mut t_max = f64::INFINITY;
        for axis in 0..2 {
            if dir[axis].abs() < 1e-15 {
                if origin[axis] < self.min[axis] || origin[axis] > self.max[axis] {
                    return None;
                }
            } else {
                let inv = 1.0 / dir[axis];
                let mut t0 = (self.min[axis] - origin[axis]) * inv;
                let mut t1 = (self.max[axis] - origin[axis]) * inv;
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                }
                t_min = t_min.max(t0);
                t_max = t_max.min(t1);
                if t_min > t_max {
                    return None;
                }
            }
        }
        Some(t_min)
    }

    /// Shortest distance between the segment `[p, q]` and the rectangle.
    pub fn segment_distance(&self, p: [f64; 2], q: [f64; 2]) -> f64 {
        let d = [q[0] - p[0], q[1] - p[1]];
        let len = d[0].hypot(d[1]);
        if len > 0.0 {
            if let Some(t) = self.ray_entry(p, [d[0] / len, d[1] / len]) {
                if t <= len {
                    return 0.0;
                }
            }
        }
        // Disjoint convex sets: the closest pair involves a vertex of one of them.
        let mut best = self.distance(p).min(self.distance(q));
        for c in self.corners() {
            best = best.min(point_segment_distance(c, p, q));
        }
        best
    }
}

pub fn point_segment_distance(c: [f64; 2], p: [f64; 2], q: [f64; 2]) -> f64 {
    let d = [q[0] - p[0], q[1] - p[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((c[0] - p[0]) * d[0] + (c[1] - p[1]) * d[1]) / len2).clamp(0.0, 1.0)
    };
    (c[0] - p[0] - t * d[0]).hypot(c[1] - p[1] - t * d[1])
}

/// A versioned set of rectangular holes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub format: String,
    pub version: u32,
    pub name: String,
    pub holes: Vec<Rect>,
}

const STATIC_MAZE_JSON: &str = include_str!("../../layouts/static_maze_v1.json");

impl Layout {
    pub fn new(name: &str, holes: Vec<Rect>) -> Self {
        Self {
            format: LAYOUT_FORMAT.to_string(),
            version: LAYOUT_VERSION,
            name: name.to_string(),
            holes,
        }
    }

    /// The maze shipped with the crate: world border plus a central hole.
    pub fn static_maze() -> Self {
        Self::from_json(STATIC_MAZE_JSON).expect("shipped layout parses")
    }

    pub fn from_json(text: &str) -> Result<Self, EnvError> {
        let layout: Layout = serde_json::from_str(text)?;
        if layout.format != LAYOUT_FORMAT || layout.version != LAYOUT_VERSION {
            return Err(EnvError::Config(format!(
                "unsupported layout {:?} version {}",
                layout.format, layout.version
            )));
        }
        for (i, r) in layout.holes.iter().enumerate() {
            if !(r.min[0] < r.max[0] && r.min[1] < r.max[1]) {
                return Err(EnvError::Config(format!("hole {i} has empty extent")));
            }
        }
        Ok(layout)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, EnvError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Static geometry of one episode: square world `[-h, h]²` and holes.
#[derive(Debug, Clone, Copy)]
pub struct World<'a> {
    pub half_extent: f64,
    pub holes: &'a [Rect],
}

impl World<'_> {
    /// Disk of `radius` at `p` touches the border or a hole.
    pub fn disk_collides(&self, p: [f64; 2], radius: f64) -> bool {
        p[0].abs() + radius >= self.half_extent
            || p[1].abs() + radius >= self.half_extent
            || self.holes.iter().any(|h| h.distance(p) <= radius)
    }

    /// Disk swept from `p` to `q` touches the border or a hole. The world is
    /// convex, so the border only needs the endpoint.
    pub fn sweep_collides(&self, p: [f64; 2], q: [f64; 2], radius: f64) -> bool {
        q[0].abs() + radius >= self.half_extent
            || q[1].abs() + radius >= self.half_extent
            || self.holes.iter().any(|h| h.segment_distance(p, q) <= radius)
    }

    pub fn point_blocked(&self, p: [f64; 2]) -> bool {
        p[0].abs() >= self.half_extent
            || p[1].abs() >= self.half_extent
            || self.holes.iter().any(|h| h.contains(p))
    }

    /// Distance along `dir` (unit) from `origin` to the first border or hole,
    /// capped at `max_range`.
    pub fn cast(&self, origin: [f64; 2], dir: [f64; 2], max_range: f64) -> f64 {
        if self.point_blocked(origin) {
            return 0.0;
        }
        let mut t = max_range;
        for axis in 0..2 {
            if dir[axis] > 1e-15 {
                t = t.min((self.half_extent - origin[axis]) / dir[axis]);
            } else if dir[axis] < -1e-15 {
                t = t.min((-self.half_extent - origin[axis]) / dir[axis]);
            }
        }
        for h in self.holes {
            if let Some(entry) = h.ray_entry(origin, dir) {
                t = t.min(entry);
            }
        }
        t.max(0.0)
    }

    /// `count` beams at regular angular spacing, the first along `+x`.
    pub fn beams(&self, origin: [f64; 2], count: usize, max_range: f64) -> Vec<f64> {
        (0..count)
            .map(|k| {
                let angle = 2.0 * std::f64::consts::PI * k as f64 / count as f64;
                self.cast(origin, [angle.cos(), angle.sin()], max_range)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rect_distance_and_containment() {
        let r = Rect::new([0.0, 0.0], [1.0, 1.0]);
        assert_eq!(r.distance([0.5, 0.5]), 0.0);
        assert!((r.distance([2.0, 0.5]) - 1.0).abs() < 1e-15);
        assert!((r.distance([2.0, 2.0]) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn segment_crossing_thin_rect_collides() {
        let r = Rect::new([-0.01, -1.0], [0.01, 1.0]);
        assert_eq!(r.segment_distance([-0.05, 0.0], [0.05, 0.0]), 0.0);
        assert!((r.segment_distance([-0.05, 0.0], [-0.03, 0.0]) - 0.02).abs() < 1e-15);
        // Passing diagonally near a corner.
        let s = Rect::new([0.0, 0.0], [1.0, 1.0]);
        let d = s.segment_distance([-0.2, 0.0], [0.0, -0.2]);
        assert!((d - 0.2 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn beams_in_empty_world() {
        let w = World { half_extent: 1.0, holes: &[] };
        let beams = w.beams([0.0, 0.0], 8, 2.0 * 2f64.sqrt());
        assert!((beams[0] - 1.0).abs() < 1e-12);
        assert!((beams[2] - 1.0).abs() < 1e-12);
        assert!((beams[1] - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn shipped_maze_loads() {
        let maze = Layout::static_maze();
        assert!(!maze.holes.is_empty());
    }
}
