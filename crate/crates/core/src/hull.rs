//! Incremental 3D convex hull with conflict lists.
//!
//! Insertion order and tie-breaking depend only on point indices, so the
//! output is a pure function of the input slice. Coplanar and collinear
//! inputs fall back to the lower-dimensional hull and are flagged.

use std::collections::HashMap;

use crate::geometry::Vec3;

/// Relative tolerance for orientation and plane-distance tests, scaled by
/// the bounding-box extent of the input.
pub const DEGENERACY_EPS: f64 = 1e-10;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Hull {
    /// Indices of the extreme points, sorted ascending.
    pub vertices: Vec<usize>,
    /// Outward-oriented triangles; empty for degenerate inputs.
    pub faces: Vec<[usize; 3]>,
    /// Set when the input spans fewer than three dimensions.
    pub degenerate: bool,
}

struct Face {
    v: [usize; 3],
    normal: Vec3,
    offset: f64,
    outside: Vec<usize>,
    alive: bool,
}

impl Face {
    fn new(v: [usize; 3], pts: &[Vec3]) -> Face {
        let (a, b, c) = (pts[v[0]], pts[v[1]], pts[v[2]]);
        let n = (b - a).cross(&(c - a));
        let len = n.norm();
        let normal = if len > 0.0 { n / len } else { n };
        Face {
            v,
            normal,
            offset: normal.dot(&a),
            outside: Vec::new(),
            alive: true,
        }
    }

    fn distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) - self.offset
    }
}

/// Computes the convex hull of `points`.
pub fn convex_hull_3d(points: &[Vec3]) -> Hull {
    match points.len() {
        0 => return Hull::default(),
        1 => {
            return Hull {
                vertices: vec![0],
                faces: vec![],
                degenerate: true,
            }
        }
        _ => {}
    }
    let scale = extent(points).max(f64::MIN_POSITIVE);
    let tol = DEGENERACY_EPS * scale;

    // Initial simplex.
    let i0 = argmax(points.len(), |i| -points[i].x);
    let i1 = argmax(points.len(), |i| (points[i] - points[i0]).norm());
    if (points[i1] - points[i0]).norm() <= tol {
        return Hull {
            vertices: vec![i0],
            faces: vec![],
            degenerate: true,
        };
    }
    let dir = (points[i1] - points[i0]).normalize();
    let line_dist = |i: usize| {
        let d = points[i] - points[i0];
        (d - dir * d.dot(&dir)).norm()
    };
    let i2 = argmax(points.len(), line_dist);
    if line_dist(i2) <= tol {
        return collinear_hull(points, &dir);
    }
    let plane_n = (points[i1] - points[i0]).cross(&(points[i2] - points[i0])).normalize();
    let plane_dist = |i: usize| plane_n.dot(&(points[i] - points[i0]));
    let i3 = argmax(points.len(), |i| plane_dist(i).abs());
    if plane_dist(i3).abs() <= tol {
        return planar_hull(points, &plane_n, tol);
    }

    let interior = (points[i0] + points[i1] + points[i2] + points[i3]) / 4.0;
    let mut faces: Vec<Face> = Vec::new();
    let mut edges: HashMap<(usize, usize), usize> = HashMap::new();
    for tri in [[i0, i1, i2], [i0, i1, i3], [i0, i2, i3], [i1, i2, i3]] {
        let mut f = Face::new(tri, points);
        if f.distance(&interior) > 0.0 {
            f = Face::new([tri[0], tri[2], tri[1]], points);
        }
        add_face(&mut faces, &mut edges, f);
    }
    let simplex = [i0, i1, i2, i3];
    let initial: Vec<usize> = (0..points.len()).filter(|i| !simplex.contains(i)).collect();
    let all_faces: Vec<usize> = (0..faces.len()).collect();
    assign(&mut faces, &all_faces, &initial, points, tol);

    let mut cursor = 0;
    loop {
        // Next face with a non-empty conflict list, scanning in creation order.
        while cursor < faces.len() && !(faces[cursor].alive && !faces[cursor].outside.is_empty()) {
            cursor += 1;
        }
        if cursor == faces.len() {
            break;
        }
        let start = cursor;
        let eye = {
            let f = &faces[start];
            let mut best = f.outside[0];
            let mut best_d = f.distance(&points[best]);
            for &i in &f.outside[1..] {
                let d = f.distance(&points[i]);
                if d > best_d || (d == best_d && i < best) {
                    best = i;
                    best_d = d;
                }
            }
            best
        };
        let p = points[eye];

        // Visible region: connected set of faces seen from the eye point.
        let mut visible = vec![start];
        let mut is_visible: HashMap<usize, bool> = HashMap::new();
        is_visible.insert(start, true);
        let mut k = 0;
        while k < visible.len() {
            let f = visible[k];
            k += 1;
            let v = faces[f].v;
            for e in 0..3 {
                let (a, b) = (v[e], v[(e + 1) % 3]);
                if let Some(&nb) = edges.get(&(b, a)) {
                    if is_visible.contains_key(&nb) {
                        continue;
                    }
                    let vis = faces[nb].distance(&p) > tol;
                    is_visible.insert(nb, vis);
                    if vis {
                        visible.push(nb);
                    }
                }
            }
        }

        let mut horizon = Vec::new();
        for &f in &visible {
            let v = faces[f].v;
            for e in 0..3 {
                let (a, b) = (v[e], v[(e + 1) % 3]);
                let twin_visible = edges.get(&(b, a)).is_some_and(|nb| is_visible.get(nb).copied().unwrap_or(false));
                if !twin_visible {
                    horizon.push((a, b));
                }
            }
        }

        let mut orphans = Vec::new();
        for &f in &visible {
            let face = &mut faces[f];
            face.alive = false;
            orphans.extend(face.outside.drain(..).filter(|&i| i != eye));
            let v = face.v;
            for e in 0..3 {
                edges.remove(&(v[e], v[(e + 1) % 3]));
            }
        }
        orphans.sort_unstable();

        let mut created = Vec::with_capacity(horizon.len());
        for (a, b) in horizon {
            let f = Face::new([a, b, eye], points);
            created.push(add_face(&mut faces, &mut edges, f));
        }
        assign(&mut faces, &created, &orphans, points, tol);
        cursor = start;
    }

    let mut hull_faces = Vec::new();
    let mut vertices = Vec::new();
    for f in faces.iter().filter(|f| f.alive) {
        hull_faces.push(f.v);
        vertices.extend_from_slice(&f.v);
    }
    vertices.sort_unstable();
    vertices.dedup();
    Hull {
        vertices,
        faces: hull_faces,
        degenerate: false,
    }
}

fn add_face(faces: &mut Vec<Face>, edges: &mut HashMap<(usize, usize), usize>, f: Face) -> usize {
    let id = faces.len();
    let v = f.v;
    for e in 0..3 {
        edges.insert((v[e], v[(e + 1) % 3]), id);
    }
    faces.push(f);
    id
}

/// Attaches each point to the candidate face it lies farthest above.
fn assign(faces: &mut [Face], candidates: &[usize], pts: &[usize], points: &[Vec3], tol: f64) {
    for &i in pts {
        let mut best: Option<(usize, f64)> = None;
        for &f in candidates {
            let d = faces[f].distance(&points[i]);
            if d > tol && best.is_none_or(|(_, bd)| d > bd) {
                best = Some((f, d));
            }
        }
        if let Some((f, _)) = best {
            faces[f].outside.push(i);
        }
    }
}

fn argmax(n: usize, key: impl Fn(usize) -> f64) -> usize {
    let mut best = 0;
    let mut best_v = key(0);
    for i in 1..n {
        let v = key(i);
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

fn extent(points: &[Vec3]) -> f64 {
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let d = hi - lo;
    d.x.max(d.y).max(d.z).max(lo.abs().max()).max(hi.abs().max())
}

fn collinear_hull(points: &[Vec3], dir: &Vec3) -> Hull {
    let lo = argmax(points.len(), |i| -points[i].dot(dir));
    let hi = argmax(points.len(), |i| points[i].dot(dir));
    let mut vertices = vec![lo, hi];
    vertices.sort_unstable();
    vertices.dedup();
    Hull {
        vertices,
        faces: vec![],
        degenerate: true,
    }
}

/// Monotone-chain hull in the plane with normal `n`.
fn planar_hull(points: &[Vec3], n: &Vec3, tol: f64) -> Hull {
    let u = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = (u - n * n.dot(&u)).normalize();
    let w = n.cross(&u);
    let mut idx: Vec<usize> = (0..points.len()).collect();
    let coords: Vec<(f64, f64)> = points.iter().map(|p| (p.dot(&u), p.dot(&w))).collect();
    idx.sort_by(|&a, &b| {
        coords[a]
            .0
            .total_cmp(&coords[b].0)
            .then(coords[a].1.total_cmp(&coords[b].1))
            .then(a.cmp(&b))
    });
    let cross = |o: usize, a: usize, b: usize| {
        let (o, a, b) = (coords[o], coords[a], coords[b]);
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let area_tol = tol * tol.sqrt().max(tol);
    let mut chain: Vec<usize> = Vec::new();
    for pass in 0..2 {
        let base = chain.len();
        let iter: Box<dyn Iterator<Item = &usize>> = if pass == 0 { Box::new(idx.iter()) } else { Box::new(idx.iter().rev()) };
        for &i in iter {
            while chain.len() >= base + 2 && cross(chain[chain.len() - 2], chain[chain.len() - 1], i) <= area_tol {
                chain.pop();
            }
            chain.push(i);
        }
        chain.pop();
    }
    chain.sort_unstable();
    chain.dedup();
    Hull {
        vertices: chain,
        faces: vec![],
        degenerate: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::random_unit_vector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute-force facet enumeration: a point is a hull vertex iff it belongs
    /// to some triple whose plane has every other point on one side.
    fn brute_force_vertices(points: &[Vec3]) -> Vec<usize> {
        let n = points.len();
        let mut is_vertex = vec![false; n];
        for i in 0..n {
            for j in i + 1..n {
                for k in j + 1..n {
                    let nrm = (points[j] - points[i]).cross(&(points[k] - points[i]));
                    if nrm.norm() < 1e-12 {
                        continue;
                    }
                    let (mut pos, mut neg) = (false, false);
                    for (m, p) in points.iter().enumerate() {
                        if m == i || m == j || m == k {
                            continue;
                        }
                        let d = nrm.dot(&(p - points[i]));
                        pos |= d > 1e-12;
                        neg |= d < -1e-12;
                        if pos && neg {
                            break;
                        }
                    }
                    if !(pos && neg) {
                        is_vertex[i] = true;
                        is_vertex[j] = true;
                        is_vertex[k] = true;
                    }
                }
            }
        }
        (0..n).filter(|&i| is_vertex[i]).collect()
    }

    fn ball(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| random_unit_vector(&mut rng) * rng.random::<f64>().cbrt())
            .collect()
    }

    #[test]
    fn simplex_returns_all_four() {
        let pts = vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()];
        let h = convex_hull_3d(&pts);
        assert_eq!(h.vertices, vec![0, 1, 2, 3]);
        assert_eq!(h.faces.len(), 4);
        assert!(!h.degenerate);
    }

    #[test]
    fn cube_excludes_centroid() {
        let mut pts = Vec::new();
        for i in 0..8 {
            pts.push(Vec3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64));
        }
        pts.push(Vec3::new(0.5, 0.5, 0.5));
        let h = convex_hull_3d(&pts);
        assert_eq!(h.vertices, (0..8).collect::<Vec<_>>());
        assert_eq!(h.faces.len(), 12);
    }

    #[test]
    fn random_ball_matches_brute_force() {
        for seed in 0..3 {
            let pts = ball(200, seed);
            let h = convex_hull_3d(&pts);
            assert_eq!(h.vertices, brute_force_vertices(&pts), "seed {seed}");
        }
    }

    #[test]
    fn support_points_are_vertices() {
        let pts = ball(200, 11);
        let h = convex_hull_3d(&pts);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..5000 {
            let d = random_unit_vector(&mut rng);
            let best = argmax(pts.len(), |i| pts[i].dot(&d));
            assert!(h.vertices.binary_search(&best).is_ok());
        }
    }

    #[test]
    fn every_point_inside_or_on_hull() {
        let pts = ball(300, 13);
        let h = convex_hull_3d(&pts);
        for f in &h.faces {
            let n = (pts[f[1]] - pts[f[0]]).cross(&(pts[f[2]] - pts[f[0]])).normalize();
            for p in &pts {
                assert!(n.dot(&(p - pts[f[0]])) <= 1e-9);
            }
        }
        // Euler characteristic of a closed triangulated sphere.
        assert_eq!(h.faces.len(), 2 * h.vertices.len() - 4);
    }

    #[test]
    fn coplanar_input_falls_back_to_polygon() {
        let pts = vec![
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(1.0, 0.0, 1.0),
            Vec3::new(1.0, 1.0, 1.0),
            Vec3::new(0.0, 1.0, 1.0),
            Vec3::new(0.5, 0.5, 1.0),
        ];
        let h = convex_hull_3d(&pts);
        assert!(h.degenerate);
        assert_eq!(h.vertices, vec![0, 1, 2, 3]);
    }

    #[test]
    fn collinear_and_tiny_inputs() {
        let pts: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        let h = convex_hull_3d(&pts);
        assert!(h.degenerate);
        assert_eq!(h.vertices, vec![0, 4]);
        assert_eq!(convex_hull_3d(&[Vec3::x()]).vertices, vec![0]);
        assert_eq!(convex_hull_3d(&[Vec3::x(), Vec3::y()]).vertices, vec![0, 1]);
        assert!(convex_hull_3d(&[]).vertices.is_empty());
    }

    #[test]
    fn points_on_sphere_are_all_vertices() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let pts: Vec<Vec3> = (0..400).map(|_| random_unit_vector(&mut rng) * 200.0).collect();
        let h = convex_hull_3d(&pts);
        assert_eq!(h.vertices.len(), 400);
    }

    #[test]
    fn deterministic() {
        let pts = ball(150, 15);
        assert_eq!(convex_hull_3d(&pts), convex_hull_3d(&pts));
    }
}
