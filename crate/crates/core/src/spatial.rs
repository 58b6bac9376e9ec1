//! Nearest-neighbor search. A 3D kd-tree for coordinate queries and a
//! brute-force scan for high-dimensional feature rows. Both break distance
//! ties toward the smaller point index.

use nalgebra::Vector3;

struct Node {
    // point index in the original array
    point: u32,
    axis: u8,
    left: i32,  // -1 = none
    right: i32, // -1 = none
}

pub struct KdTree3 {
    points: Vec<Vector3<f64>>,
    nodes: Vec<Node>,
    root: i32,
}

impl KdTree3 {
    pub fn build(points: &[Vector3<f64>]) -> Self {
        let mut idx: Vec<u32> = (0..points.len() as u32).collect();
        let mut tree = KdTree3 {
            points: points.to_vec(),
            nodes: Vec::with_capacity(points.len()),
            root: -1,
        };
        let root = tree.build_rec(&mut idx, 0);
        tree.root = root;
        tree
    }

    fn build_rec(&mut self, idx: &mut [u32], depth: usize) -> i32 {
        if idx.is_empty() {
            return -1;
        }
        let axis = (depth % 3) as u8;
        let mid = idx.len() / 2;
        let pts = &self.points;
        idx.select_nth_unstable_by(mid, |&a, &b| {
            pts[a as usize][axis as usize]
                .partial_cmp(&pts[b as usize][axis as usize])
                .unwrap()
                .then(a.cmp(&b))
        });
        let point = idx[mid];
        let node_id = self.nodes.len() as i32;
        self.nodes.push(Node {
            point,
            axis,
            left: -1,
            right: -1,
        });
        let (lo, rest) = idx.split_at_mut(mid);
        let hi = &mut rest[1..];
        let left = self.build_rec(lo, depth + 1);
        let right = self.build_rec(hi, depth + 1);
        self.nodes[node_id as usize].left = left;
        self.nodes[node_id as usize].right = right;
        node_id
    }

    /// Index of the nearest stored point, smaller index on exact ties.
    pub fn nearest(&self, q: &Vector3<f64>) -> usize {
        debug_assert!(self.root >= 0);
        let mut best = (f64::INFINITY, u32::MAX);
        self.search(self.root, q, &mut best);
        best.1 as usize
    }

    /// The `k` nearest stored points, ordered by (distance, index).
    /// Brute force; node counts here are small (skinning uses k <= 8).
    pub fn knearest(&self, q: &Vector3<f64>, k: usize) -> Vec<(f64, u32)> {
        let mut all: Vec<(f64, u32)> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| ((p - q).norm_squared(), i as u32))
            .collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        all.truncate(k);
        for e in &mut all {
            e.0 = e.0.sqrt();
        }
        all
    }

    fn search(&self, node: i32, q: &Vector3<f64>, best: &mut (f64, u32)) {
        if node < 0 {
            return;
        }
        let n = &self.nodes[node as usize];
        let p = &self.points[n.point as usize];
        let d2 = (p - q).norm_squared();
        if d2 < best.0 || (d2 == best.0 && n.point < best.1) {
            *best = (d2, n.point);
        }
        let delta = q[n.axis as usize] - p[n.axis as usize];
        let (near, far) = if delta < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.search(near, q, best);
        // <= so equal-distance candidates on the far side are still visited
        // (the tie may belong to a smaller index there)
        if delta * delta <= best.0 {
            self.search(far, q, best);
        }
    }
}

/// For each query point, the index of its nearest neighbor among `data`.
pub fn nearest_indices(queries: &[Vector3<f64>], data: &[Vector3<f64>]) -> Vec<u32> {
    let tree = KdTree3::build(data);
    queries.iter().map(|q| tree.nearest(q) as u32).collect()
}

/// Row-wise nearest neighbor between two row-major matrices (n×d, m×d).
/// Brute force; ties go to the smaller row index.
pub fn nearest_rows(queries: &[f64], data: &[f64], d: usize) -> Vec<u32> {
    assert!(d > 0 && queries.len() % d == 0 && data.len() % d == 0);
    let n = queries.len() / d;
    let m = data.len() / d;
    assert!(m > 0);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let qi = &queries[i * d..(i + 1) * d];
        let mut best = (f64::INFINITY, 0u32);
        for j in 0..m {
            let dj = &data[j * d..(j + 1) * d];
            let mut dist = 0.0;
            for k in 0..d {
                let t = qi[k] - dj[k];
                dist += t * t;
            }
            if dist < best.0 {
                best = (dist, j as u32);
            }
        }
        out.push(best.1);
    }
    out
}
