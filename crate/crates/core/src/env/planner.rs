//! Grid shortest paths over the free space of a [`World`].

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::layout::World;

/// 8-connected occupancy grid over `[-h, h]²`. A cell is free when a disk
/// of radius `clearance` at its center does not collide.
#[derive(Debug, Clone)]
pub struct GridPlanner {
    half_extent: f64,
    resolution: f64,
    cells: usize,
    free: Vec<bool>,
}

const STRAIGHT: u64 = 1000;
const DIAGONAL: u64 = 1414;

impl GridPlanner {
    pub fn new(world: World<'_>, resolution: f64, clearance: f64) -> Self {
        let cells = (2.0 * world.half_extent / resolution).round() as usize;
        let mut planner = Self {
            half_extent: world.half_extent,
            resolution,
            cells,
            free: vec![false; cells * cells],
        };
        for j in 0..cells {
            for i in 0..cells {
                let c = planner.center(i, j);
                planner.free[j * cells + i] = !world.disk_collides(c, clearance);
            }
        }
        planner
    }

    pub fn center(&self, i: usize, j: usize) -> [f64; 2] {
        [
            -self.half_extent + (i as f64 + 0.5) * self.resolution,
            -self.half_extent + (j as f64 + 0.5) * self.resolution,
        ]
    }

    fn cell_of(&self, p: [f64; 2]) -> (usize, usize) {
        let idx = |v: f64| {
            (((v + self.half_extent) / self.resolution).floor().max(0.0) as usize).min(self.cells - 1)
        };
        (idx(p[0]), idx(p[1]))
    }

    pub fn is_free(&self, i: usize, j: usize) -> bool {
        self.free[j * self.cells + i]
    }

    /// Nearest free cell to `p` within a few cells, preferring its own cell.
    fn snap(&self, p: [f64; 2]) -> Option<(usize, usize)> {
        let (ci, cj) = self.cell_of(p);
        if self.is_free(ci, cj) {
            return Some((ci, cj));
        }
        let mut best: Option<((usize, usize), f64)> = None;
        for radius in 1..=3i64 {
            for dj in -radius..=radius {
                for di in -radius..=radius {
                    let (i, j) = (ci as i64 + di, cj as i64 + dj);
                    if i < 0 || j < 0 || i >= self.cells as i64 || j >= self.cells as i64 {
                        continue;
                    }
                    let (i, j) = (i as usize, j as usize);
                    if !self.is_free(i, j) {
                        continue;
                    }
                    let c = self.center(i, j);
                    let d = (c[0] - p[0]).hypot(c[1] - p[1]);
                    if best.map_or(true, |(_, bd)| d < bd) {
                        best = Some(((i, j), d));
                    }
                }
            }
            if best.is_some() {
                break;
            }
        }
        best.map(|(c, _)| c)
    }

    /// Cell-center waypoints from `start` to `goal` (both endpoints included
    /// verbatim), or `None` when they are disconnected.
    pub fn shortest_path(&self, start: [f64; 2], goal: [f64; 2]) -> Option<Vec<[f64; 2]>> {
        let s = self.snap(start)?;
        let g = self.snap(goal)?;
        let n = self.cells;
        let index = |(i, j): (usize, usize)| j * n + i;
        let mut dist = vec![u64::MAX; n * n];
        let mut parent = vec![usize::MAX; n * n];
        let mut heap = BinaryHeap::new();
        dist[index(s)] = 0;
        heap.push(Reverse((0u64, index(s))));
        while let Some(Reverse((d, u))) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            if u == index(g) {
                break;
            }
            let (ui, uj) = ((u % n) as i64, (u / n) as i64);
            for dj in -1..=1i64 {
                for di in -1..=1i64 {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let (vi, vj) = (ui + di, uj + dj);
                    if vi < 0 || vj < 0 || vi >= n as i64 || vj >= n as i64 {
                        continue;
                    }
                    let (vi, vj) = (vi as usize, vj as usize);
                    if !self.is_free(vi, vj) {
                        continue;
                    }
                    let diagonal = di != 0 && dj != 0;
                    if diagonal
                        && (!self.is_free(ui as usize, vj) || !self.is_free(vi, uj as usize))
                    {
                        continue;
                    }
                    let v = index((vi, vj));
                    let nd = d + if diagonal { DIAGONAL } else { STRAIGHT };
                    if nd < dist[v] {
                        dist[v] = nd;
                        parent[v] = u;
                        heap.push(Reverse((nd, v)));
                    }
                }
            }
        }
        if dist[index(g)] == u64::MAX {
            return None;
        }
        let mut cells = vec![index(g)];
        while *cells.last().expect("non-empty") != index(s) {
            cells.push(parent[*cells.last().expect("non-empty")]);
        }
        cells.reverse();
        let mut path = vec![start];
        path.extend(cells.into_iter().map(|c| self.center(c % n, c / n)));
        path.push(goal);
        Some(path)
    }

    pub fn connected(&self, start: [f64; 2], goal: [f64; 2]) -> bool {
        self.shortest_path(start, goal).is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::layout::Rect;

    #[test]
    fn path_goes_around_a_wall() {
        let holes = [Rect::new([-0.1, -0.8], [0.1, 1.0])];
        let world = World { half_extent: 1.0, holes: &holes };
        let planner = GridPlanner::new(world, 0.05, 0.03);
        let path = planner.shortest_path([-0.5, 0.5], [0.5, 0.5]).unwrap();
        assert!(path.iter().any(|p| p[1] < -0.8));
        for w in path.windows(2).skip(1).take(path.len() - 3) {
            assert!(!world.sweep_collides(w[0], w[1], 0.02));
        }
    }

    #[test]
    fn disconnected_regions_have_no_path() {
        let holes = [Rect::new([-0.1, -1.0], [0.1, 1.0])];
        let world = World { half_extent: 1.0, holes: &holes };
        let planner = GridPlanner::new(world, 0.05, 0.03);
        assert!(!planner.connected([-0.5, 0.0], [0.5, 0.0]));
        assert!(planner.connected([-0.5, 0.0], [-0.5, 0.7]));
    }
}
