//! Brute-force geometry oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use lifestyles::geo::Triangulation;

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Circumcenter and radius of a non-degenerate triangle.
pub fn circumcircle(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> ([f64; 2], f64) {
    let d = 2.0 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]));
    let a2 = a[0] * a[0] + a[1] * a[1];
    let b2 = b[0] * b[0] + b[1] * b[1];
    let c2 = c[0] * c[0] + c[1] * c[1];
    let ux = (a2 * (b[1] - c[1]) + b2 * (c[1] - a[1]) + c2 * (a[1] - b[1])) / d;
    let uy = (a2 * (c[0] - b[0]) + b2 * (a[0] - c[0]) + c2 * (b[0] - a[0])) / d;
    let center = [ux, uy];
    (center, dist(center, a))
}

/// Sites strictly inside some triangle's circumcircle, beyond a relative slack.
pub fn empty_circle_violations(tri: &Triangulation) -> usize {
    let pts: Vec<[f64; 2]> = tri.sites.iter().map(|s| s.position).collect();
    let mut bad = 0;
    for t in &tri.triangles {
        let (c, r) = circumcircle(pts[t[0]], pts[t[1]], pts[t[2]]);
        for (i, &p) in pts.iter().enumerate() {
            if !t.contains(&i) && dist(c, p) < r * (1.0 - 1e-9) {
                bad += 1;
            }
        }
    }
    bad
}

pub fn signed_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
}

/// Convex hull area by Andrew's monotone chain.
pub fn hull_area(points: &[[f64; 2]]) -> f64 {
    let mut p = points.to_vec();
    p.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    p.dedup();
    if p.len() < 3 {
        return 0.0;
    }
    let mut hull: Vec<[f64; 2]> = Vec::new();
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 { Box::new(p.iter()) } else { Box::new(p.iter().rev()) };
        for &q in iter {
            while hull.len() >= start + 2 && signed_area(hull[hull.len() - 2], hull[hull.len() - 1], q) <= 0.0 {
                hull.pop();
            }
            hull.push(q);
        }
        hull.pop();
    }
    let mut area = 0.0;
    for i in 0..hull.len() {
        let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
        area += a[0] * b[1] - b[0] * a[1];
    }
    0.5 * area
}

fn nearest(points: &[[f64; 2]], q: [f64; 2]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &p) in points.iter().enumerate() {
        let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Outcome of rasterizing the Voronoi diagram on a grid.
pub struct VoronoiCheck {
    /// Site pairs whose cells touch on the grid at least 3 times but that are
    /// not Delaunay neighbors.
    pub spurious: Vec<(usize, usize)>,
    /// Delaunay edges with a long Voronoi edge that the grid never saw.
    pub undetected: Vec<(usize, usize)>,
}

/// Labels grid points by nearest site and compares 4-neighbor label changes
/// with the Delaunay edges. The reverse direction measures each Voronoi edge
/// by walking the perpendicular bisector and only requires detection when its
/// length inside the box is at least 5 grid steps.
pub fn voronoi_duality(tri: &Triangulation, steps: usize) -> VoronoiCheck {
    let pts: Vec<[f64; 2]> = tri.sites.iter().map(|s| s.position).collect();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &pts {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let (x0, y0) = (lo[0] - 0.25 * span, lo[1] - 0.25 * span);
    let size = 1.5 * span;
    let h = size / steps as f64;
    // Irrational offset keeps grid points off exactly tied positions.
    let shift = h * 0.381_966_011_250_105;
    let at = |i: usize, j: usize| [x0 + shift + i as f64 * h, y0 + shift + j as f64 * h];
    let labels: Vec<Vec<usize>> = (0..=steps).map(|i| (0..=steps).map(|j| nearest(&pts, at(i, j))).collect()).collect();

    let mut crossings: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for i in 0..=steps {
        for j in 0..=steps {
            let a = labels[i][j];
            for (ni, nj) in [(i + 1, j), (i, j + 1)] {
                if ni > steps || nj > steps {
                    continue;
                }
                let b = labels[ni][nj];
                if a != b {
                    *crossings.entry((a.min(b), a.max(b))).or_default() += 1;
                }
            }
        }
    }
    let edges: &BTreeSet<(usize, usize)> = &tri.edges;
    let spurious = crossings
        .iter()
        .filter(|(pair, &n)| n >= 3 && !edges.contains(pair))
        .map(|(&pair, _)| pair)
        .collect();

    let inside = |q: [f64; 2]| q[0] >= x0 && q[0] <= x0 + size && q[1] >= y0 && q[1] <= y0 + size;
    let mut undetected = Vec::new();
    for &(a, b) in edges {
        let mid = [(pts[a][0] + pts[b][0]) / 2.0, (pts[a][1] + pts[b][1]) / 2.0];
        let len = dist(pts[a], pts[b]);
        let dir = [-(pts[b][1] - pts[a][1]) / len, (pts[b][0] - pts[a][0]) / len];
        let dt = h / 8.0;
        let reach = 2.0 * size;
        let mut on_edge = 0usize;
        let mut t = -reach;
        while t <= reach {
            let q = [mid[0] + t * dir[0], mid[1] + t * dir[1]];
            if inside(q) {
                let da = dist(q, pts[a]);
                if pts.iter().enumerate().all(|(k, &p)| k == a || k == b || dist(q, p) >= da - 1e-12 * size) {
                    on_edge += 1;
                }
            }
            t += dt;
        }
        let length = on_edge as f64 * dt;
        if length >= 5.0 * h && !crossings.contains_key(&(a, b)) {
            undetected.push((a, b));
        }
    }
    VoronoiCheck { spurious, undetected }
}

/// Half the mean distance to Delaunay neighbors, from the edge list alone.
pub fn radius_oracle(tri: &Triangulation, site: usize) -> f64 {
    let p = tri.sites[site].position;
    let ds: Vec<f64> = tri
        .edges
        .iter()
        .filter(|&&(a, b)| a == site || b == site)
        .map(|&(a, b)| dist(p, tri.sites[if a == site { b } else { a }].position))
        .collect();
    0.5 * ds.iter().sum::<f64>() / ds.len() as f64
}
