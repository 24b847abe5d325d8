//! Marching-cubes extraction of the `alpha = tau` iso-surface.
//!
//! The 256-case table ships as `mc_cases.txt` (one line per corner mask,
//! listing triangle edge indices). It is produced by [`generate_case_table`],
//! which traces the iso-line segments on each cube face and chains them into
//! closed loops. Faces with two diagonal inside corners keep those corners
//! apart, a rule that depends only on the face, so neighbouring cells agree
//! and the mesh is closed.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::sync::OnceLock;

use rayon::prelude::*;

use crate::field::SceneField;
use crate::{Error, Result, Vec3};

pub const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

pub const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Face corner cycles, counter-clockwise seen from outside the cube.
const FACES: [[usize; 4]; 6] = [
    [0, 3, 2, 1],
    [4, 5, 6, 7],
    [0, 1, 5, 4],
    [3, 7, 6, 2],
    [0, 4, 7, 3],
    [1, 2, 6, 5],
];

const TABLE_DATA: &str = include_str!("mc_cases.txt");

fn edge_between(a: usize, b: usize) -> usize {
    EDGES
        .iter()
        .position(|e| (e[0] == a && e[1] == b) || (e[0] == b && e[1] == a))
        .expect("corners share an edge")
}

/// Triangles (as edge-index triples) for every corner mask. Bit `c` of the
/// mask is set when corner `c` is inside (`alpha >= tau`). Triangles wind
/// counter-clockwise seen from the outside region.
pub fn generate_case_table() -> Vec<Vec<[u8; 3]>> {
    (0..256usize)
        .map(|mask| {
            let inside = |c: usize| mask >> c & 1 == 1;
            // Directed segments from an entering crossing to the next
            // leaving crossing along each face cycle.
            let mut next = [usize::MAX; 12];
            for face in FACES {
                let mut crossings = Vec::new();
                for k in 0..4 {
                    let (p, q) = (face[k], face[(k + 1) % 4]);
                    if inside(p) != inside(q) {
                        crossings.push((edge_between(p, q), inside(q)));
                    }
                }
                let n = crossings.len();
                for (i, &(edge, entering)) in crossings.iter().enumerate() {
                    if entering {
                        next[edge] = crossings[(i + 1) % n].0;
                    }
                }
            }
            let mut triangles = Vec::new();
            let mut seen = [false; 12];
            for start in 0..12 {
                if next[start] == usize::MAX || seen[start] {
                    continue;
                }
                let mut ring = Vec::new();
                let mut e = start;
                while !seen[e] {
                    seen[e] = true;
                    ring.push(e as u8);
                    e = next[e];
                }
                for i in 1..ring.len() - 1 {
                    triangles.push([ring[0], ring[i], ring[i + 1]]);
                }
            }
            triangles
        })
        .collect()
}

/// Text form of a case table, one line per mask.
pub fn format_case_table(table: &[Vec<[u8; 3]>]) -> String {
    let mut out = String::new();
    for tris in table {
        let line: Vec<String> = tris.iter().flatten().map(|e| e.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn case_table() -> &'static [Vec<[u8; 3]>] {
    static TABLE: OnceLock<Vec<Vec<[u8; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| {
        TABLE_DATA
            .lines()
            .map(|line| {
                let idx: Vec<u8> = line.split_whitespace().map(|t| t.parse().expect("edge index")).collect();
                idx.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
            })
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsoMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub resolution: usize,
}

impl IsoMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// `V - E + F`.
    pub fn euler_characteristic(&self) -> i64 {
        let mut edges = BTreeSet::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        self.vertices.len() as i64 - edges.len() as i64 + self.triangles.len() as i64
    }

    /// Every undirected edge is shared by exactly two triangles.
    pub fn is_closed(&self) -> bool {
        let mut count: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        count.values().all(|c| *c == 2)
    }

    /// Wavefront OBJ text: a comment header, `v` lines with six decimals,
    /// then 1-based `f` lines.
    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# occufield iso-surface, grid {}^3, {} vertices, {} triangles",
            self.resolution,
            self.vertices.len(),
            self.triangles.len()
        );
        for v in &self.vertices {
            let _ = writeln!(s, "v {:.6} {:.6} {:.6}", v.x, v.y, v.z);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        s
    }
}

/// Extract the `alpha = tau` surface on a grid of `resolution` sample points
/// per axis spanning `[lo, hi]`.
pub fn marching_cubes(field: &dyn SceneField, lo: Vec3, hi: Vec3, resolution: usize, tau: f64) -> Result<IsoMesh> {
    if resolution < 2 {
        return Err(Error::Config("marching cubes needs at least 2 samples per axis".into()));
    }
    if (0..3).any(|i| !(hi[i] > lo[i])) {
        return Err(Error::Config("extraction bounds are empty".into()));
    }
    let r = resolution;
    let step = (hi - lo) / (r - 1) as f64;
    let point = |i: usize, j: usize, k: usize| lo + Vec3::new(i as f64 * step.x, j as f64 * step.y, k as f64 * step.z);
    let idx = |i: usize, j: usize, k: usize| (k * r + j) * r + i;

    let values: Vec<f64> = (0..r)
        .into_par_iter()
        .flat_map_iter(|k| {
            (0..r).flat_map(move |j| (0..r).map(move |i| field.alpha(&point(i, j, k))))
        })
        .collect();
    let table = case_table();

    // Each slab emits triangles keyed by grid edge (lower corner, axis).
    type EdgeKey = (usize, usize, usize, usize);
    let slabs: Vec<Vec<[EdgeKey; 3]>> = (0..r - 1)
        .into_par_iter()
        .map(|k| {
            let mut tris = Vec::new();
            for j in 0..r - 1 {
                for i in 0..r - 1 {
                    let mut mask = 0usize;
                    for (c, off) in CORNERS.iter().enumerate() {
                        if values[idx(i + off[0], j + off[1], k + off[2])] >= tau {
                            mask |= 1 << c;
                        }
                    }
                    for tri in &table[mask] {
                        tris.push(tri.map(|e| {
                            let [a, b] = EDGES[e as usize];
                            let (pa, pb) = (CORNERS[a], CORNERS[b]);
                            let axis = (0..3).find(|&d| pa[d] != pb[d]).expect("edge has an axis");
                            let base = if pa[axis] < pb[axis] { pa } else { pb };
                            (i + base[0], j + base[1], k + base[2], axis)
                        }));
                    }
                }
            }
            tris
        })
        .collect();

    let mut lookup: HashMap<EdgeKey, usize> = HashMap::new();
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for tri in slabs.into_iter().flatten() {
        let t = tri.map(|key| {
            *lookup.entry(key).or_insert_with(|| {
                let (i, j, k, axis) = key;
                let mut n = [i, j, k];
                n[axis] += 1;
                let (a, b) = (values[idx(i, j, k)], values[idx(n[0], n[1], n[2])]);
                let s = if a != b { ((tau - a) / (b - a)).clamp(0.0, 1.0) } else { 0.5 };
                let (p, q) = (point(i, j, k), point(n[0], n[1], n[2]));
                vertices.push(p + (q - p) * s);
                vertices.len() - 1
            })
        });
        triangles.push(t);
    }
    Ok(IsoMesh {
        vertices,
        triangles,
        resolution,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{AnalyticField, ColorModel, Shape};

    #[test]
    fn shipped_table_matches_generator() {
        let generated = generate_case_table();
        assert_eq!(format_case_table(&generated), TABLE_DATA);
        assert_eq!(case_table(), generated.as_slice());
    }

    /// Rewrites the shipped table: `cargo test -p occufield-core -- --ignored write_case_table`.
    #[test]
    #[ignore]
    fn write_case_table() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/src/mc_cases.txt");
        std::fs::write(path, format_case_table(&generate_case_table())).unwrap();
    }

    #[test]
    fn faces_wind_outward() {
        for face in FACES {
            let p: Vec<Vec3> = face.iter().map(|&c| Vec3::from(CORNERS[c].map(|v| v as f64))).collect();
            let n = (p[1] - p[0]).cross(&(p[2] - p[1]));
            let centroid = p.iter().sum::<Vec3>() / 4.0 - Vec3::repeat(0.5);
            assert!(n.dot(&centroid) > 0.0);
        }
    }

    #[test]
    fn table_basics() {
        let t = case_table();
        assert!(t[0].is_empty() && t[255].is_empty());
        assert_eq!(t[1].len(), 1);
        // Complementary masks cut the same edges.
        for m in 0..256 {
            let edges = |m: usize| t[m].iter().flatten().copied().collect::<BTreeSet<u8>>();
            assert_eq!(edges(m), edges(255 - m));
        }
    }

    #[test]
    fn single_corner_triangle_faces_away_from_inside() {
        let t = case_table()[1][0];
        let mid = |e: u8| {
            let [a, b] = EDGES[e as usize];
            (Vec3::from(CORNERS[a].map(|v| v as f64)) + Vec3::from(CORNERS[b].map(|v| v as f64))) / 2.0
        };
        let (a, b, c) = (mid(t[0]), mid(t[1]), mid(t[2]));
        assert!((b - a).cross(&(c - b)).dot(&Vec3::repeat(1.0)) > 0.0);
    }

    fn sphere(r: f64) -> AnalyticField {
        AnalyticField::sphere([0.0; 3], r, 40.0, [1.0; 3])
    }

    fn mean_radius_error(mesh: &IsoMesh, r: f64) -> f64 {
        mesh.vertices.iter().map(|v| (v.norm() - r).abs()).sum::<f64>() / mesh.vertices.len() as f64
    }

    #[test]
    fn sphere_mesh_is_closed_genus_zero() {
        let f = sphere(0.5);
        let m = marching_cubes(&f, Vec3::repeat(-1.0), Vec3::repeat(1.0), 64, 0.5).unwrap();
        let cell = 2.0 / 63.0;
        assert!(mean_radius_error(&m, 0.5) < 2.0 * cell);
        assert_eq!(m.euler_characteristic(), 2);
        assert!(m.is_closed());
        for t in &m.triangles {
            assert!(t.iter().all(|i| *i < m.vertices.len()));
            let (a, b, c) = (m.vertices[t[0]], m.vertices[t[1]], m.vertices[t[2]]);
            let n = (b - a).cross(&(c - b));
            if n.norm() > 1e-14 {
                assert!(n.dot(&((a + b + c) / 3.0)) > 0.0, "inward triangle");
            }
        }
    }

    #[test]
    fn refinement_reduces_error() {
        let f = sphere(0.5);
        let coarse = marching_cubes(&f, Vec3::repeat(-1.0), Vec3::repeat(1.0), 16, 0.5).unwrap();
        let fine = marching_cubes(&f, Vec3::repeat(-1.0), Vec3::repeat(1.0), 32, 0.5).unwrap();
        assert!(mean_radius_error(&coarse, 0.5) >= 1.5 * mean_radius_error(&fine, 0.5));
    }

    #[test]
    fn torus_and_union_topology() {
        let torus = AnalyticField::new(
            Shape::Torus { center: [0.0; 3], major: 0.5, minor: 0.2 },
            40.0,
            ColorModel::Constant([1.0; 3]),
        )
        .unwrap();
        let m = marching_cubes(&torus, Vec3::repeat(-1.0), Vec3::repeat(1.0), 48, 0.5).unwrap();
        assert_eq!(m.euler_characteristic(), 0);
        assert!(m.is_closed());
    }

    #[test]
    fn constant_field_is_empty() {
        let f = AnalyticField::new(Shape::Constant { alpha: 0.2 }, 1.0, ColorModel::Constant([1.0; 3])).unwrap();
        let m = marching_cubes(&f, Vec3::repeat(-1.0), Vec3::repeat(1.0), 8, 0.5).unwrap();
        assert!(m.is_empty() && m.vertices.is_empty());
        assert_eq!(m.to_obj().lines().count(), 1);
    }

    #[test]
    fn extraction_is_deterministic() {
        let f = sphere(0.3);
        let a = marching_cubes(&f, Vec3::repeat(-0.5), Vec3::repeat(0.5), 20, 0.5).unwrap();
        let b = marching_cubes(&f, Vec3::repeat(-0.5), Vec3::repeat(0.5), 20, 0.5).unwrap();
        assert_eq!(a.to_obj(), b.to_obj());
        let obj = a.to_obj();
        assert!(obj.lines().nth(1).unwrap().starts_with("v "));
        assert!(!obj.contains('\r'));
    }

    #[test]
    fn vertices_lie_near_iso_level() {
        let f = sphere(0.3);
        let m = marching_cubes(&f, Vec3::repeat(-0.5), Vec3::repeat(0.5), 40, 0.5).unwrap();
        for v in &m.vertices {
            assert!((f.alpha(v) - 0.5).abs() < 0.05);
        }
    }

    #[test]
    fn rejects_bad_grids() {
        let f = sphere(0.3);
        assert!(marching_cubes(&f, Vec3::repeat(-0.5), Vec3::repeat(0.5), 1, 0.5).is_err());
        assert!(marching_cubes(&f, Vec3::repeat(0.5), Vec3::repeat(0.5), 4, 0.5).is_err());
    }
}
