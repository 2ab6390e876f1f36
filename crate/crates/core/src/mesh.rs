//! Indexed triangle meshes, mesh graphs, OBJ I/O, smoothing and garment/body
//! vertex association.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::autodiff::Index;
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

pub type Vec3 = Vector3<f64>;

/// Indexed triangle mesh with counter-clockwise faces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

impl TriMesh {
    /// Builds a mesh after checking index bounds and degenerate faces.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let mesh = Self { vertices, faces };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn empty() -> Self {
        Self {
            vertices: Vec::new(),
            faces: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (fi, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&i| i >= n) {
                return invalid(format!("face {fi} {f:?} indexes past {n} vertices"));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return invalid(format!("face {fi} {f:?} is degenerate"));
            }
        }
        if let Some(i) = self.vertices.iter().position(|v| !v.iter().all(|c| c.is_finite())) {
            return invalid(format!("vertex {i} is not finite"));
        }
        Ok(())
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    /// Same faces, new positions.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return invalid(format!(
                "{} positions for a mesh of {} vertices",
                vertices.len(),
                self.vertices.len()
            ));
        }
        Ok(Self {
            vertices,
            faces: self.faces.clone(),
        })
    }

    /// Undirected edges `(i, j)` with `i < j`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut set = BTreeSet::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                set.insert((a.min(b), a.max(b)));
            }
        }
        set.into_iter().collect()
    }

    /// Sorted 1-ring of every vertex (no self entries).
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut rings = vec![Vec::new(); self.vertices.len()];
        for (a, b) in self.edges() {
            rings[a].push(b);
            rings[b].push(a);
        }
        for r in &mut rings {
            r.sort_unstable();
        }
        rings
    }

    pub fn translated(&self, t: &Vec3) -> Self {
        Self {
            vertices: self.vertices.iter().map(|v| v + t).collect(),
            faces: self.faces.clone(),
        }
    }

    pub fn reversed(&self) -> Self {
        Self {
            vertices: self.vertices.clone(),
            faces: self.faces.iter().map(|f| [f[0], f[2], f[1]]).collect(),
        }
    }

    /// Relabels vertices so that new vertex `i` is old vertex `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let inverse = inverse_permutation(order, self.vertices.len())?;
        Ok(Self {
            vertices: order.iter().map(|&o| self.vertices[o]).collect(),
            faces: self.faces.iter().map(|f| [inverse[f[0]], inverse[f[1]], inverse[f[2]]]).collect(),
        })
    }

    pub fn bounding_box(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| (lo.inf(v), hi.sup(v))))
    }
}

pub(crate) fn inverse_permutation(order: &[usize], n: usize) -> Result<Vec<usize>> {
    if order.len() != n {
        return invalid(format!("permutation of length {} for {n} items", order.len()));
    }
    let mut inverse = vec![usize::MAX; n];
    for (new, &old) in order.iter().enumerate() {
        if old >= n || inverse[old] != usize::MAX {
            return invalid("not a permutation");
        }
        inverse[old] = new;
    }
    Ok(inverse)
}

/// Reads `v` and `f` records from a Wavefront OBJ file. Normals, texture
/// coordinates and all other records are ignored; polygons are fan
/// triangulated.
pub fn load_obj(path: impl AsRef<Path>) -> Result<TriMesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_obj(&text, path)
}

pub fn parse_obj(text: &str, path: &Path) -> Result<TriMesh> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let coords: Vec<f64> = parts
                    .take(3)
                    .map(|p| p.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| parse_err(line_no, format!("bad vertex coordinate: {e}")))?;
                if coords.len() != 3 {
                    return Err(parse_err(line_no, "vertex needs three coordinates".into()));
                }
                vertices.push(Vec3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let mut idx = Vec::new();
                for p in parts {
                    let first = p.split('/').next().unwrap_or("");
                    let i: i64 = first
                        .parse()
                        .map_err(|e| parse_err(line_no, format!("bad face index `{p}`: {e}")))?;
                    let resolved = match i {
                        0 => return Err(parse_err(line_no, "face index 0 is invalid".into())),
                        i if i > 0 => (i - 1) as usize,
                        i => {
                            let back = (-i) as usize;
                            if back > vertices.len() {
                                return Err(parse_err(line_no, format!("relative index {i} out of range")));
                            }
                            vertices.len() - back
                        }
                    };
                    idx.push(resolved);
                }
                if idx.len() < 3 {
                    return Err(parse_err(line_no, "face needs at least three vertices".into()));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    TriMesh::new(vertices, faces)
}

/// Serialises a mesh as OBJ text (`v` with 9 decimals, 1-based `f`).
pub fn obj_string(mesh: &TriMesh) -> String {
    let mut out = String::with_capacity(mesh.vertices.len() * 40 + mesh.faces.len() * 20);
    for v in &mesh.vertices {
        let _ = writeln!(out, "v {:.9} {:.9} {:.9}", v.x, v.y, v.z);
    }
    for f in &mesh.faces {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}

pub fn save_obj(mesh: &TriMesh, path: impl AsRef<Path>) -> Result<()> {
    mesh.validate()?;
    std::fs::write(path, obj_string(mesh))?;
    Ok(())
}

fn accumulate_face_normals(mesh: &TriMesh) -> Vec<Vec3> {
    let mut acc = vec![Vec3::zeros(); mesh.vertices.len()];
    for f in &mesh.faces {
        let (a, b, c) = (mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
        // |cross| is twice the face area, so this is the area weighting
        let n = (b - a).cross(&(c - a));
        for &i in f {
            acc[i] += n;
        }
    }
    acc
}

/// Area-weighted unit vertex normals. Fails on the first vertex whose
/// accumulated normal vanishes (isolated or fully degenerate 1-ring).
pub fn vertex_normals(mesh: &TriMesh) -> Result<Vec<Vec3>> {
    accumulate_face_normals(mesh)
        .into_iter()
        .enumerate()
        .map(|(i, n)| {
            let len = n.norm();
            if len < 1e-300 || !len.is_finite() {
                Err(Error::ZeroNormal(i))
            } else {
                Ok(n / len)
            }
        })
        .collect()
}

/// Like [`vertex_normals`] but substitutes the zero vector where no normal
/// exists.
pub fn vertex_normals_or_zero(mesh: &TriMesh) -> Vec<Vec3> {
    accumulate_face_normals(mesh)
        .into_iter()
        .map(|n| {
            let len = n.norm();
            if len < 1e-300 || !len.is_finite() {
                Vec3::zeros()
            } else {
                n / len
            }
        })
        .collect()
}

/// Connectivity of a mesh graph: sorted neighbor lists that include the node
/// itself, plus the flattened directed edge arrays used by attention.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphTopology {
    neighbors: Vec<Vec<usize>>,
    /// Receiving node of every directed edge (grouped by receiver).
    pub dst: Index,
    /// Sending node of every directed edge.
    pub src: Index,
    /// Undirected edges `(i, j)`, `i < j`, without self-loops.
    pub edges: Vec<(usize, usize)>,
}

impl GraphTopology {
    /// Builds the topology from undirected edges; self-loops are added.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut set = BTreeSet::new();
        for &(a, b) in edges {
            if a >= n || b >= n {
                return invalid(format!("edge ({a}, {b}) out of range for {n} nodes"));
            }
            if a != b {
                set.insert((a.min(b), a.max(b)));
            }
        }
        let edges: Vec<(usize, usize)> = set.into_iter().collect();
        let mut neighbors: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for &(a, b) in &edges {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for r in &mut neighbors {
            r.sort_unstable();
        }
        let mut dst = Vec::new();
        let mut src = Vec::new();
        for (i, ring) in neighbors.iter().enumerate() {
            for &j in ring {
                dst.push(i);
                src.push(j);
            }
        }
        Ok(Self {
            neighbors,
            dst: dst.into(),
            src: src.into(),
            edges,
        })
    }

    pub fn node_count(&self) -> usize {
        self.neighbors.len()
    }

    /// Neighbors of `i` including `i` itself.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn is_adjacent(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    /// Dense boolean adjacency (row-major), self-loops on the diagonal.
    pub fn dense_adjacency(&self) -> Vec<bool> {
        let n = self.node_count();
        let mut adj = vec![false; n * n];
        for (i, ring) in self.neighbors.iter().enumerate() {
            for &j in ring {
                adj[i * n + j] = true;
            }
        }
        adj
    }
}

/// Node features over a fixed graph topology.
#[derive(Clone, Debug)]
pub struct MeshGraph {
    pub features: Tensor,
    pub topology: Arc<GraphTopology>,
}

impl MeshGraph {
    pub fn new(features: Tensor, topology: Arc<GraphTopology>) -> Result<Self> {
        if features.rows() != topology.node_count() {
            return invalid(format!(
                "{} feature rows for {} nodes",
                features.rows(),
                topology.node_count()
            ));
        }
        Ok(Self { features, topology })
    }

    pub fn node_count(&self) -> usize {
        self.topology.node_count()
    }

    pub fn feature_width(&self) -> usize {
        self.features.cols()
    }
}

/// Graph over the mesh vertices with the mesh edges plus self-loops.
pub fn build_graph(mesh: &TriMesh, features: Tensor) -> Result<MeshGraph> {
    if features.rows() != mesh.vertex_count() {
        return invalid(format!(
            "{} feature rows for {} vertices",
            features.rows(),
            mesh.vertex_count()
        ));
    }
    let topology = GraphTopology::from_edges(mesh.vertex_count(), &mesh.edges())?;
    MeshGraph::new(features, Arc::new(topology))
}

/// Uniform (umbrella) Laplacian smoothing: every iteration moves each vertex
/// a fraction `lambda` of the way towards the average of its 1-ring.
pub fn laplacian_smooth(mesh: &TriMesh, iterations: usize, lambda: f64) -> Result<TriMesh> {
    if !(0.0..=1.0).contains(&lambda) {
        return invalid(format!("smoothing weight {lambda} outside [0, 1]"));
    }
    let rings = mesh.neighbors();
    let mut current = mesh.vertices.clone();
    let mut next = current.clone();
    for _ in 0..iterations {
        for (i, ring) in rings.iter().enumerate() {
            if ring.is_empty() {
                next[i] = current[i];
                continue;
            }
            let avg = ring.iter().fold(Vec3::zeros(), |acc, &j| acc + current[j]) / ring.len() as f64;
            next[i] = current[i] + lambda * (avg - current[i]);
        }
        std::mem::swap(&mut current, &mut next);
    }
    mesh.with_vertices(current)
}

/// Garment-vertex → body-vertex association (the rows of a one-hot indicator
/// matrix).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndicatorMap {
    pub garment_to_body: Vec<usize>,
    pub body_vertex_count: usize,
}

impl IndicatorMap {
    pub fn new(garment_to_body: Vec<usize>, body_vertex_count: usize) -> Result<Self> {
        let map = Self {
            garment_to_body,
            body_vertex_count,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(&bad) = self.garment_to_body.iter().find(|&&b| b >= self.body_vertex_count) {
            return invalid(format!(
                "indicator entry {bad} >= body vertex count {}",
                self.body_vertex_count
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.garment_to_body.len()
    }

    pub fn is_empty(&self) -> bool {
        self.garment_to_body.is_empty()
    }

    /// `I · M_b`: the associated body position of every garment vertex.
    pub fn project(&self, body: &TriMesh) -> Result<Vec<Vec3>> {
        if body.vertex_count() != self.body_vertex_count {
            return invalid(format!(
                "indicator built for {} body vertices, body has {}",
                self.body_vertex_count,
                body.vertex_count()
            ));
        }
        Ok(self.garment_to_body.iter().map(|&b| body.vertices[b]).collect())
    }
}

/// Brute-force nearest body vertex per garment vertex, ties to the lowest
/// body index.
pub fn nearest_vertex_map_brute_force(garment: &TriMesh, body: &TriMesh) -> Result<IndicatorMap> {
    if garment.vertices.is_empty() || body.vertices.is_empty() {
        return invalid("nearest-vertex association needs two nonempty meshes");
    }
    let map = garment
        .vertices
        .iter()
        .map(|g| {
            let mut best = (f64::INFINITY, 0);
            for (j, b) in body.vertices.iter().enumerate() {
                let d = (g - b).norm_squared();
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect();
    IndicatorMap::new(map, body.vertex_count())
}

/// Nearest body vertex per garment vertex (Euclidean, ties to the lowest body
/// index), accelerated with a uniform hash grid over the body.
pub fn nearest_vertex_map(garment: &TriMesh, body: &TriMesh) -> Result<IndicatorMap> {
    if garment.vertices.is_empty() || body.vertices.is_empty() {
        return invalid("nearest-vertex association needs two nonempty meshes");
    }
    let grid = PointGrid::new(&body.vertices);
    let map = garment.vertices.iter().map(|g| grid.nearest(g)).collect();
    IndicatorMap::new(map, body.vertex_count())
}

struct PointGrid<'a> {
    points: &'a [Vec3],
    origin: Vec3,
    cell: f64,
    dims: [i64; 3],
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl<'a> PointGrid<'a> {
    fn new(points: &'a [Vec3]) -> Self {
        let (lo, hi) = points
            .iter()
            .fold((points[0], points[0]), |(lo, hi), v| (lo.inf(v), hi.sup(v)));
        let extent = hi - lo;
        let longest = extent.iter().copied().fold(0.0, f64::max);
        let cell = (longest / (points.len() as f64).cbrt()).max(1e-9) * 1.5;
        let dims = [0, 1, 2].map(|k| ((extent[k] / cell).floor() as i64) + 1);
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            let key = [0, 1, 2].map(|k| ((p[k] - lo[k]) / cell).floor() as i64);
            cells.entry(key).or_default().push(i);
        }
        Self {
            points,
            origin: lo,
            cell,
            dims,
            cells,
        }
    }

    fn nearest(&self, q: &Vec3) -> usize {
        let key = [0, 1, 2].map(|k| ((q[k] - self.origin[k]) / self.cell).floor() as i64);
        let mut best = (f64::INFINITY, usize::MAX);
        let max_ring = self.dims.iter().copied().max().unwrap_or(1)
            + key.iter().map(|k| k.abs()).max().unwrap_or(0)
            + 1;
        for ring in 0..=max_ring {
            // every point in shells > ring is at least `ring * cell` away from q
            let lower_bound = (ring as f64 - 1.0).max(0.0) * self.cell;
            if best.1 != usize::MAX && lower_bound * lower_bound > best.0 {
                break;
            }
            if (2 * ring + 1).pow(3) as usize > 8 * self.cells.len() {
                return self.scan(q);
            }
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let Some(bucket) = self.cells.get(&[key[0] + dx, key[1] + dy, key[2] + dz]) else {
                            continue;
                        };
                        for &i in bucket {
                            let d = (self.points[i] - q).norm_squared();
                            if d < best.0 || (d == best.0 && i < best.1) {
                                best = (d, i);
                            }
                        }
                    }
                }
            }
        }
        best.1
    }

    fn scan(&self, q: &Vec3) -> usize {
        let mut best = (f64::INFINITY, usize::MAX);
        for (i, p) in self.points.iter().enumerate() {
            let d = (p - q).norm_squared();
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn unit_triangle() -> TriMesh {
        TriMesh::new(
            vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    pub(crate) fn icosphere(subdivisions: usize) -> TriMesh {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut v: Vec<Vec3> = [
            [-1.0, t, 0.0],
            [1.0, t, 0.0],
            [-1.0, -t, 0.0],
            [1.0, -t, 0.0],
            [0.0, -1.0, t],
            [0.0, 1.0, t],
            [0.0, -1.0, -t],
            [0.0, 1.0, -t],
            [t, 0.0, -1.0],
            [t, 0.0, 1.0],
            [-t, 0.0, -1.0],
            [-t, 0.0, 1.0],
        ]
        .iter()
        .map(|p| Vec3::new(p[0], p[1], p[2]).normalize())
        .collect();
        let mut f: Vec<[usize; 3]> = vec![
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
        for _ in 0..subdivisions {
            let mut mid = HashMap::new();
            let mut next = Vec::new();
            let mut midpoint = |a: usize, b: usize, v: &mut Vec<Vec3>| {
                *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                    v.push(((v[a] + v[b]) / 2.0).normalize());
                    v.len() - 1
                })
            };
            for tri in &f {
                let ab = midpoint(tri[0], tri[1], &mut v);
                let bc = midpoint(tri[1], tri[2], &mut v);
                let ca = midpoint(tri[2], tri[0], &mut v);
                next.extend([[tri[0], ab, ca], [tri[1], bc, ab], [tri[2], ca, bc], [ab, bc, ca]]);
            }
            f = next;
        }
        TriMesh::new(v, f).unwrap()
    }

    pub(crate) fn grid(nx: usize, ny: usize, spacing: f64) -> TriMesh {
        let mut v = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                v.push(Vec3::new(i as f64 * spacing, j as f64 * spacing, 0.0));
            }
        }
        let mut f = Vec::new();
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let a = j * nx + i;
                f.push([a, a + 1, a + nx + 1]);
                f.push([a, a + nx + 1, a + nx]);
            }
        }
        TriMesh::new(v, f).unwrap()
    }

    fn random_mesh(rng: &mut ChaCha8Rng) -> TriMesh {
        let nx = rng.random_range(2..7);
        let ny = rng.random_range(2..7);
        let mut m = grid(nx, ny, 0.1);
        for v in &mut m.vertices {
            *v += Vec3::new(
                rng.random_range(-0.03..0.03),
                rng.random_range(-0.03..0.03),
                rng.random_range(-1.0..1.0),
            );
        }
        m
    }

    #[test]
    fn loads_minimal_obj() {
        let m = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n", Path::new("x.obj")).unwrap();
        assert_eq!(m.vertex_count(), 3);
        assert_eq!(m.faces, vec![[0, 1, 2]]);
    }

    #[test]
    fn ignores_normals_and_uvs() {
        let text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nvt 0 0\nf 1/1/1 2/1/1 3/1/1\n";
        let m = parse_obj(text, Path::new("x.obj")).unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2]]);
    }

    #[test]
    fn out_of_range_face_is_a_validation_error() {
        let err = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 5\n", Path::new("x.obj")).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_obj("v 0 0 0\nv 1 zero 0\n", Path::new("x.obj")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn save_writes_three_vertices_and_one_face() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tri.obj");
        save_obj(&unit_triangle(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), 3);
        assert_eq!(text.lines().filter(|l| l.starts_with("f ")).count(), 1);
    }

    #[test]
    fn empty_mesh_saves_to_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.obj");
        save_obj(&TriMesh::empty(), &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "");
        assert_eq!(load_obj(&path).unwrap(), TriMesh::empty());
    }

    #[test]
    fn unwritable_path_is_an_io_error() {
        let err = save_obj(&unit_triangle(), "/nonexistent-dir/x/y.obj").unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }

    proptest! {
        #[test]
        fn obj_round_trip(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_mesh(&mut rng);
            let back = parse_obj(&obj_string(&m), Path::new("rt.obj")).unwrap();
            prop_assert_eq!(&back.faces, &m.faces);
            for (a, b) in back.vertices.iter().zip(&m.vertices) {
                prop_assert!((a - b).norm() <= 1e-6);
            }
        }

        #[test]
        fn graph_adjacency_is_symmetric(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_mesh(&mut rng);
            let g = build_graph(&m, Tensor::zeros(m.vertex_count(), 2)).unwrap();
            let n = g.node_count();
            let adj = g.topology.dense_adjacency();
            for i in 0..n {
                prop_assert!(adj[i * n + i]);
                for j in 0..n {
                    prop_assert_eq!(adj[i * n + j], adj[j * n + i]);
                }
            }
        }

        #[test]
        fn grid_search_matches_brute_force(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let body = random_mesh(&mut rng);
            let mut garment = random_mesh(&mut rng);
            for v in &mut garment.vertices {
                *v *= rng.random_range(0.5..3.0);
            }
            prop_assert_eq!(
                nearest_vertex_map(&garment, &body).unwrap(),
                nearest_vertex_map_brute_force(&garment, &body).unwrap()
            );
        }
    }

    #[test]
    fn planar_triangle_normals_point_up() {
        for n in vertex_normals(&unit_triangle()).unwrap() {
            assert_eq!(n, Vec3::new(0.0, 0.0, 1.0));
        }
    }

    #[test]
    fn icosphere_normals_are_radial_and_unit() {
        let sphere = icosphere(2);
        for (v, n) in sphere.vertices.iter().zip(vertex_normals(&sphere).unwrap()) {
            assert!((n.norm() - 1.0).abs() <= 1e-9);
            let angle = n.dot(&v.normalize()).clamp(-1.0, 1.0).acos();
            assert!(angle < 0.05, "angle {angle}");
        }
    }

    #[test]
    fn reversed_faces_negate_normals() {
        let sphere = icosphere(1);
        let a = vertex_normals(&sphere).unwrap();
        let b = vertex_normals(&sphere.reversed()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn isolated_vertex_has_no_normal() {
        let mut m = unit_triangle();
        m.vertices.push(Vec3::new(5.0, 5.0, 5.0));
        assert!(matches!(vertex_normals(&m), Err(Error::ZeroNormal(3))));
        assert_eq!(vertex_normals_or_zero(&m)[3], Vec3::zeros());
    }

    #[test]
    fn triangle_graph_is_fully_connected_with_self_loops() {
        let g = build_graph(&unit_triangle(), Tensor::zeros(3, 1)).unwrap();
        assert_eq!(g.node_count(), 3);
        assert!(g.topology.dense_adjacency().iter().all(|&a| a));
    }

    #[test]
    fn disconnected_triangles_give_block_diagonal_adjacency() {
        let mut m = unit_triangle();
        m.vertices.extend(m.vertices.clone());
        m.faces.push([3, 4, 5]);
        let g = build_graph(&m, Tensor::zeros(6, 1)).unwrap();
        let adj = g.topology.dense_adjacency();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(adj[i * 6 + j], (i < 3) == (j < 3));
            }
        }
    }

    #[test]
    fn graph_rejects_feature_row_mismatch() {
        assert!(build_graph(&unit_triangle(), Tensor::zeros(2, 1)).is_err());
    }

    #[test]
    fn zero_lambda_smoothing_is_identity() {
        let sphere = icosphere(1);
        assert_eq!(laplacian_smooth(&sphere, 25, 0.0).unwrap(), sphere);
    }

    #[test]
    fn smoothing_rejects_out_of_range_lambda() {
        assert!(laplacian_smooth(&unit_triangle(), 1, 1.5).is_err());
        assert!(laplacian_smooth(&unit_triangle(), 1, -0.1).is_err());
    }

    #[test]
    fn flat_grid_stays_flat() {
        let g = grid(6, 5, 0.1);
        let s = laplacian_smooth(&g, 20, 0.5).unwrap();
        assert_eq!(s.faces, g.faces);
        assert!(s.vertices.iter().all(|v| v.z == 0.0));
    }

    #[test]
    fn smoothing_shrinks_a_sphere() {
        let sphere = icosphere(2);
        let mean_radius = |m: &TriMesh| m.vertices.iter().map(|v| v.norm()).sum::<f64>() / m.vertex_count() as f64;
        let s = laplacian_smooth(&sphere, 20, 0.5).unwrap();
        assert!(mean_radius(&s) < mean_radius(&sphere));
        assert_eq!(s.vertex_count(), sphere.vertex_count());
    }

    #[test]
    fn offset_copy_maps_to_itself() {
        let body = icosphere(1);
        let garment = body.translated(&Vec3::new(0.0, 0.0, 0.01));
        let map = nearest_vertex_map(&garment, &body).unwrap();
        assert_eq!(map.garment_to_body, (0..body.vertex_count()).collect::<Vec<_>>());
    }

    #[test]
    fn nearest_picks_closest_body_vertex() {
        let garment = TriMesh {
            vertices: vec![Vec3::zeros()],
            faces: vec![],
        };
        let body = TriMesh {
            vertices: vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0)],
            faces: vec![],
        };
        assert_eq!(nearest_vertex_map(&garment, &body).unwrap().garment_to_body, vec![0]);
    }

    #[test]
    fn ties_break_to_lowest_body_index() {
        let garment = TriMesh {
            vertices: vec![Vec3::zeros()],
            faces: vec![],
        };
        let body = TriMesh {
            vertices: vec![Vec3::new(0.0, 1.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(-1.0, 0.0, 0.0)],
            faces: vec![],
        };
        assert_eq!(nearest_vertex_map(&garment, &body).unwrap().garment_to_body, vec![0]);
    }
}
