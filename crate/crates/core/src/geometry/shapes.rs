//! Procedural shapes used by tests, benchmarks, and synthetic pipelines.

use nalgebra::Vector3;

use super::mesh::TriMesh;

pub fn octahedron() -> TriMesh {
    let v = |x: f64, y: f64, z: f64| Vector3::new(x, y, z);
    let vertices = vec![
        v(1.0, 0.0, 0.0),
        v(-1.0, 0.0, 0.0),
        v(0.0, 1.0, 0.0),
        v(0.0, -1.0, 0.0),
        v(0.0, 0.0, 1.0),
        v(0.0, 0.0, -1.0),
    ];
    let faces = vec![
        [0, 2, 4],
        [2, 1, 4],
        [1, 3, 4],
        [3, 0, 4],
        [2, 0, 5],
        [1, 2, 5],
        [3, 1, 5],
        [0, 3, 5],
    ];
    TriMesh::new(vertices, faces, "octahedron").unwrap()
}

pub fn unit_cube() -> TriMesh {
    let v = |x: f64, y: f64, z: f64| Vector3::new(x, y, z);
    let vertices = vec![
        v(0.0, 0.0, 0.0),
        v(1.0, 0.0, 0.0),
        v(1.0, 1.0, 0.0),
        v(0.0, 1.0, 0.0),
        v(0.0, 0.0, 1.0),
        v(1.0, 0.0, 1.0),
        v(1.0, 1.0, 1.0),
        v(0.0, 1.0, 1.0),
    ];
    let faces = vec![
        [0, 2, 1],
        [0, 3, 2],
        [4, 5, 6],
        [4, 6, 7],
        [0, 1, 5],
        [0, 5, 4],
        [2, 3, 7],
        [2, 7, 6],
        [1, 2, 6],
        [1, 6, 5],
        [3, 0, 4],
        [3, 4, 7],
    ];
    TriMesh::new(vertices, faces, "cube").unwrap()
}

/// Planar grid of `nx` by `ny` vertices in the xy-plane, unit spacing.
pub fn grid(nx: usize, ny: usize) -> TriMesh {
    assert!(nx >= 2 && ny >= 2);
    let mut vertices = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            vertices.push(Vector3::new(i as f64, j as f64, 0.0));
        }
    }
    let idx = |i: usize, j: usize| (j * nx + i) as u32;
    let mut faces = Vec::with_capacity((nx - 1) * (ny - 1) * 2);
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            faces.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
            faces.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
        }
    }
    TriMesh::new(vertices, faces, format!("grid{nx}x{ny}")).unwrap()
}

/// Icosphere by repeated midpoint subdivision, projected to the unit sphere.
pub fn icosphere(level: usize) -> TriMesh {
    let t = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vector3<f64>> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];

    for _ in 0..level {
        let mut midpoint = std::collections::BTreeMap::new();
        let mut new_faces = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mids = [0u32; 3];
            for (e, (a, b)) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])].iter().enumerate() {
                let key = (*a.min(b), *a.max(b));
                mids[e] = *midpoint.entry(key).or_insert_with(|| {
                    let m = (vertices[*a as usize] + vertices[*b as usize]).normalize();
                    vertices.push(m);
                    (vertices.len() - 1) as u32
                });
            }
            new_faces.push([f[0], mids[0], mids[2]]);
            new_faces.push([f[1], mids[1], mids[0]]);
            new_faces.push([f[2], mids[2], mids[1]]);
            new_faces.push([mids[0], mids[1], mids[2]]);
        }
        faces = new_faces;
    }
    TriMesh::new(vertices, faces, format!("icosphere{level}")).unwrap()
}

/// Chain of collinear vertices with unit spacing, triangulated by offset
/// apex vertices so each segment is an edge of some face.
pub fn path_mesh(n: usize) -> TriMesh {
    assert!(n >= 2);
    let mut vertices: Vec<Vector3<f64>> = (0..n)
        .map(|i| Vector3::new(i as f64, 0.0, 0.0))
        .collect();
    let mut faces = Vec::with_capacity(n - 1);
    for i in 0..n - 1 {
        vertices.push(Vector3::new(i as f64 + 0.5, 1.0, 0.0));
        faces.push([i as u32, (i + 1) as u32, (n + i) as u32]);
    }
    TriMesh::new(vertices, faces, format!("path{n}")).unwrap()
}
