//! Incremental Delaunay triangulation with exact predicates.
//!
//! Sites are inserted in index order into a mesh closed by "ghost" triangles
//! that share a vertex at infinity, so hull updates need no special cases.
//! Orientation and in-circle signs come from adaptive exact arithmetic.
//! Exactly cocircular quadruples are resolved by a symbolic lifting
//! perturbation: site `i` is lifted by `eps^(i+1)`, so lower indices dominate.
//! The perturbed point set is in general position, which makes the
//! triangulation unique and independent of insertion order.

use std::collections::{BTreeSet, HashSet};

use robust::Coord;

use crate::error::{Error, Result};

const GHOST: usize = usize::MAX;

fn coord(p: [f64; 2]) -> Coord<f64> {
    Coord { x: p[0], y: p[1] }
}

/// Positive when `a, b, c` turn counter-clockwise.
pub fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    robust::orient2d(coord(a), coord(b), coord(c))
}

/// Positive when `d` is strictly inside the circle through counter-clockwise
/// `a, b, c`, with cocircular ties broken by the index perturbation.
pub fn in_circle_perturbed(pts: &[[f64; 2]], a: usize, b: usize, c: usize, d: usize) -> bool {
    let det = robust::incircle(coord(pts[a]), coord(pts[b]), coord(pts[c]), coord(pts[d]));
    if det != 0.0 {
        return det > 0.0;
    }
    // Partial derivatives of the in-circle determinant w.r.t. each lifted height.
    let mut terms = [
        (a, orient(pts[d], pts[b], pts[c])),
        (b, orient(pts[a], pts[d], pts[c])),
        (c, orient(pts[a], pts[b], pts[d])),
        (d, -orient(pts[a], pts[b], pts[c])),
    ];
    terms.sort_by_key(|&(i, _)| i);
    terms
        .iter()
        .find(|&&(_, s)| s != 0.0)
        .is_some_and(|&(_, s)| s > 0.0)
}

/// Raw output: counter-clockwise triangles over `points` indices.
pub fn triangulate(points: &[[f64; 2]]) -> Result<Vec<[usize; 3]>> {
    if points.len() < 3 {
        return Err(Error::Geometry(format!(
            "need at least 3 distinct sites, got {}",
            points.len()
        )));
    }
    let (i0, i1) = (0, 1);
    let i2 = (2..points.len())
        .find(|&i| orient(points[i0], points[i1], points[i]) != 0.0)
        .ok_or_else(|| Error::Geometry("all sites are collinear".into()))?;
    let mut mesh = Mesh::new(points);
    if orient(points[i0], points[i1], points[i2]) > 0.0 {
        mesh.seed(i0, i1, i2);
    } else {
        mesh.seed(i0, i2, i1);
    }
    for p in (2..points.len()).filter(|&i| i != i2) {
        mesh.insert(p);
    }
    Ok(mesh.real_triangles())
}

struct Mesh<'a> {
    pts: &'a [[f64; 2]],
    tris: Vec<[usize; 3]>,
    alive: Vec<bool>,
}

impl<'a> Mesh<'a> {
    fn new(pts: &'a [[f64; 2]]) -> Self {
        Mesh {
            pts,
            tris: Vec::new(),
            alive: Vec::new(),
        }
    }

    fn push(&mut self, t: [usize; 3]) {
        self.tris.push(t);
        self.alive.push(true);
    }

    /// Ghost triangles are stored as `[x, y, GHOST]`, where `x -> y` is a hull
    /// edge traversed with the outside on its left.
    fn seed(&mut self, a: usize, b: usize, c: usize) {
        self.push([a, b, c]);
        self.push([b, a, GHOST]);
        self.push([c, b, GHOST]);
        self.push([a, c, GHOST]);
    }

    fn in_conflict(&self, t: [usize; 3], p: usize) -> bool {
        let pts = self.pts;
        if t[2] == GHOST {
            let (x, y) = (pts[t[0]], pts[t[1]]);
            let o = orient(x, y, pts[p]);
            if o != 0.0 {
                return o > 0.0;
            }
            // On the hull line: conflicts only if strictly inside the segment.
            let q = pts[p];
            let dot = (q[0] - x[0]) * (y[0] - x[0]) + (q[1] - x[1]) * (y[1] - x[1]);
            let len2 = (y[0] - x[0]).powi(2) + (y[1] - x[1]).powi(2);
            dot > 0.0 && dot < len2
        } else {
            in_circle_perturbed(pts, t[0], t[1], t[2], p)
        }
    }

    fn insert(&mut self, p: usize) {
        let mut cavity_edges: HashSet<(usize, usize)> = HashSet::new();
        let mut removed = Vec::new();
        for (i, t) in self.tris.iter().enumerate() {
            if self.alive[i] && self.in_conflict(*t, p) {
                removed.push(i);
            }
        }
        for &i in &removed {
            self.alive[i] = false;
            let t = self.tris[i];
            for e in 0..3 {
                cavity_edges.insert((t[e], t[(e + 1) % 3]));
            }
        }
        let boundary: Vec<(usize, usize)> = cavity_edges
            .iter()
            .filter(|&&(u, v)| !cavity_edges.contains(&(v, u)))
            .copied()
            .collect();
        for (u, v) in boundary {
            let t = if u == GHOST {
                [v, p, GHOST]
            } else if v == GHOST {
                [p, u, GHOST]
            } else {
                [u, v, p]
            };
            self.push(t);
        }
        if self.tris.len() > 64 && self.alive.iter().filter(|&&a| !a).count() * 2 > self.tris.len() {
            self.compact();
        }
    }

    fn compact(&mut self) {
        let tris = std::mem::take(&mut self.tris);
        let alive = std::mem::take(&mut self.alive);
        for (t, a) in tris.into_iter().zip(alive) {
            if a {
                self.push(t);
            }
        }
    }

    fn real_triangles(&self) -> Vec<[usize; 3]> {
        let mut out: Vec<[usize; 3]> = self
            .tris
            .iter()
            .zip(&self.alive)
            .filter(|(t, &a)| a && t[2] != GHOST)
            .map(|(t, _)| {
                // Rotate so the smallest index comes first; orientation is kept.
                let m = (0..3).min_by_key(|&i| t[i]).unwrap();
                [t[m], t[(m + 1) % 3], t[(m + 2) % 3]]
            })
            .collect();
        out.sort_unstable();
        out
    }
}

/// Undirected edges `(i, j)` with `i < j` of a triangle list.
pub fn edges_of(triangles: &[[usize; 3]]) -> BTreeSet<(usize, usize)> {
    let mut edges = BTreeSet::new();
    for t in triangles {
        for e in 0..3 {
            let (a, b) = (t[e], t[(e + 1) % 3]);
            edges.insert((a.min(b), a.max(b)));
        }
    }
    edges
}
