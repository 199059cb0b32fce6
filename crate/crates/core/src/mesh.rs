//! Icosahedral spherical meshes.
//!
//! A mesh at resolution `mr` is the unit icosahedron after `mr` rounds of
//! loop subdivision with every new edge midpoint pushed back onto the unit
//! sphere. Face `i` at level `L` has children `4i..4i+4` at level `L + 1`:
//! children `4i + k` for `k < 3` keep parent corner `k`, child `4i + 3` is
//! the triangle spanned by the three edge midpoints.
//!
//! The FAF (face adjacent face) table stores, for face `(v0, v1, v2)`, the
//! neighbour across edge `(v_k, v_{k+1 mod 3})` in slot `k`.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock, RwLock};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Per-face neighbour table, three face indices per face.
pub type FafTable = Vec<[usize; 3]>;

/// Point-location tolerance on determinant signs.
pub const CONTAINMENT_EPS: f64 = 1e-12;

pub fn face_count(mr: usize) -> usize {
    20 * 4usize.pow(mr as u32)
}

pub fn vertex_count(mr: usize) -> usize {
    10 * 4usize.pow(mr as u32) + 2
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// `det[a, b, c] = a · (b × c)`.
pub fn det3(a: Vec3, b: Vec3, c: Vec3) -> f64 {
    dot(a, cross(b, c))
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Vertices, faces and face centers of one subdivision level, without
/// adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct Triangulation {
    mr: usize,
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    centers: Vec<Vec3>,
}

impl Triangulation {
    /// The unit icosahedron from the golden-ratio vertex table.
    pub fn icosahedron() -> Self {
        let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
        let raw: [Vec3; 12] = [
            [-1.0, phi, 0.0],
            [1.0, phi, 0.0],
            [-1.0, -phi, 0.0],
            [1.0, -phi, 0.0],
            [0.0, -1.0, phi],
            [0.0, 1.0, phi],
            [0.0, -1.0, -phi],
            [0.0, 1.0, -phi],
            [phi, 0.0, -1.0],
            [phi, 0.0, 1.0],
            [-phi, 0.0, -1.0],
            [-phi, 0.0, 1.0],
        ];
        let vertices = raw.iter().map(|&v| normalize(v)).collect();
        let faces = vec![
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
        Self::from_parts(0, vertices, faces)
    }

    fn from_parts(mr: usize, vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Self {
        let centers = faces
            .iter()
            .map(|&[a, b, c]| {
                let (a, b, c) = (vertices[a], vertices[b], vertices[c]);
                normalize([a[0] + b[0] + c[0], a[1] + b[1] + c[1], a[2] + b[2] + c[2]])
            })
            .collect();
        Self {
            mr,
            vertices,
            faces,
            centers,
        }
    }

    /// One round of loop subdivision with midpoints renormalized onto the
    /// sphere.
    pub fn subdivide(&self) -> Self {
        let mut vertices = Vec::with_capacity(vertex_count(self.mr + 1));
        vertices.extend_from_slice(&self.vertices);
        let mut midpoints: HashMap<(usize, usize), usize> =
            HashMap::with_capacity(self.faces.len() * 3 / 2);
        let mut midpoint = |a: usize, b: usize, vertices: &mut Vec<Vec3>| -> usize {
            let key = if a < b { (a, b) } else { (b, a) };
            *midpoints.entry(key).or_insert_with(|| {
                let (p, q) = (vertices[a], vertices[b]);
                vertices.push(normalize([p[0] + q[0], p[1] + q[1], p[2] + q[2]]));
                vertices.len() - 1
            })
        };

        let mut faces = Vec::with_capacity(self.faces.len() * 4);
        for &[v0, v1, v2] in &self.faces {
            let m01 = midpoint(v0, v1, &mut vertices);
            let m12 = midpoint(v1, v2, &mut vertices);
            let m20 = midpoint(v2, v0, &mut vertices);
            faces.push([v0, m01, m20]);
            faces.push([m01, v1, m12]);
            faces.push([m20, m12, v2]);
            faces.push([m01, m12, m20]);
        }
        Self::from_parts(self.mr + 1, vertices, faces)
    }

    pub fn mr(&self) -> usize {
        self.mr
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    /// Normalized face centroids; a face's value is carried here.
    pub fn centers(&self) -> &[Vec3] {
        &self.centers
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn corners(&self, face: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[face];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Smallest of the three edge determinants of `p` against `face`.
    /// Non-negative (up to tolerance) iff the spherical triangle contains `p`.
    pub fn containment_margin(&self, face: usize, p: Vec3) -> f64 {
        let [a, b, c] = self.corners(face);
        det3(a, b, p).min(det3(b, c, p)).min(det3(c, a, p))
    }

    pub fn contains(&self, face: usize, p: Vec3) -> bool {
        self.containment_margin(face, p) >= -CONTAINMENT_EPS
    }
}

/// Builds the FAF table of a closed, consistently oriented triangle mesh.
///
/// Slot `k` of face `(v0, v1, v2)` holds the face sharing edge
/// `(v_k, v_{k+1 mod 3})`. Any edge without exactly two incident faces is
/// reported; the smallest such edge is named.
pub fn compute_faf(faces: &[[usize; 3]]) -> Result<FafTable> {
    let mut half_edges: Vec<(usize, usize, usize, u8)> = Vec::with_capacity(faces.len() * 3);
    for (f, tri) in faces.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            half_edges.push((a.min(b), a.max(b), f, k as u8));
        }
    }
    half_edges.sort_unstable();

    let mut faf = vec![[usize::MAX; 3]; faces.len()];
    let mut i = 0;
    while i < half_edges.len() {
        let (a, b, _, _) = half_edges[i];
        let mut j = i + 1;
        while j < half_edges.len() && half_edges[j].0 == a && half_edges[j].1 == b {
            j += 1;
        }
        if j - i != 2 || half_edges[i].2 == half_edges[i + 1].2 {
            return Err(Error::Topology(a, b, j - i));
        }
        let (_, _, f, k) = half_edges[i];
        let (_, _, g, l) = half_edges[i + 1];
        faf[f][k as usize] = g;
        faf[g][l as usize] = f;
        i = j;
    }
    Ok(faf)
}

/// One resolution level: geometry plus its FAF table.
#[derive(Debug, Clone)]
pub struct SphericalMesh {
    geometry: Arc<Triangulation>,
    faf: Arc<FafTable>,
}

impl SphericalMesh {
    pub fn from_geometry(geometry: Arc<Triangulation>) -> Result<Self> {
        let faf = compute_faf(geometry.faces())?;
        Ok(Self {
            geometry,
            faf: Arc::new(faf),
        })
    }

    pub fn geometry(&self) -> &Arc<Triangulation> {
        &self.geometry
    }

    pub fn mr(&self) -> usize {
        self.geometry.mr
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.geometry.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.geometry.faces
    }

    pub fn centers(&self) -> &[Vec3] {
        &self.geometry.centers
    }

    pub fn faf(&self) -> &Arc<FafTable> {
        &self.faf
    }

    pub fn face_count(&self) -> usize {
        self.geometry.face_count()
    }

    pub fn vertex_count(&self) -> usize {
        self.geometry.vertex_count()
    }

    /// Checks counts, unit-norm vertices, orientation and FAF symmetry /
    /// shared-edge structure.
    pub fn check_invariants(&self) -> Result<()> {
        let geo = &self.geometry;
        let mr = geo.mr;
        if geo.face_count() != face_count(mr) || geo.vertex_count() != vertex_count(mr) {
            return Err(Error::Geometry(format!(
                "mr {mr}: {} faces / {} vertices",
                geo.face_count(),
                geo.vertex_count()
            )));
        }
        if let Some((i, v)) = geo
            .vertices
            .iter()
            .enumerate()
            .find(|(_, v)| (norm(**v) - 1.0).abs() > 1e-12)
        {
            return Err(Error::Geometry(format!("vertex {i} has norm {}", norm(*v))));
        }
        for f in 0..geo.face_count() {
            let [a, b, c] = geo.corners(f);
            if det3(a, b, c) <= 0.0 {
                return Err(Error::Geometry(format!("face {f} is not outward oriented")));
            }
            let tri = geo.faces[f];
            for (k, &g) in self.faf[f].iter().enumerate() {
                if g == f || g >= geo.face_count() {
                    return Err(Error::Geometry(format!("face {f} slot {k} -> {g}")));
                }
                let edge = [tri[k], tri[(k + 1) % 3]];
                let other = geo.faces[g];
                let shared = other.iter().filter(|v| tri.contains(v)).count();
                if shared != 2 || !edge.iter().all(|v| other.contains(v)) {
                    return Err(Error::Geometry(format!(
                        "face {f} slot {k}: neighbour {g} does not share edge {edge:?}"
                    )));
                }
                if !self.faf[g].contains(&f) {
                    return Err(Error::Geometry(format!("FAF not symmetric between {f} and {g}")));
                }
            }
            let n = self.faf[f];
            if n[0] == n[1] || n[1] == n[2] || n[0] == n[2] {
                return Err(Error::Geometry(format!("face {f} has repeated neighbours {n:?}")));
            }
        }
        Ok(())
    }
}

pub fn build_icosahedron() -> SphericalMesh {
    SphericalMesh::from_geometry(Arc::new(Triangulation::icosahedron()))
        .expect("icosahedron is a closed manifold")
}

pub fn subdivide(mesh: &SphericalMesh) -> SphericalMesh {
    SphericalMesh::from_geometry(Arc::new(mesh.geometry.subdivide()))
        .expect("subdivision preserves manifoldness")
}

/// Geometry for every level from 0 up to the deepest level requested so
/// far, built lazily.
#[derive(Debug)]
pub struct MeshHierarchy {
    levels: RwLock<Vec<Arc<Triangulation>>>,
}

impl Default for MeshHierarchy {
    fn default() -> Self {
        Self::new()
    }
}

impl MeshHierarchy {
    pub fn new() -> Self {
        Self {
            levels: RwLock::new(vec![Arc::new(Triangulation::icosahedron())]),
        }
    }

    pub fn level(&self, mr: usize) -> Arc<Triangulation> {
        if let Some(level) = self.levels.read().unwrap().get(mr) {
            return Arc::clone(level);
        }
        let mut levels = self.levels.write().unwrap();
        while levels.len() <= mr {
            let next = levels.last().unwrap().subdivide();
            levels.push(Arc::new(next));
        }
        Arc::clone(&levels[mr])
    }

    pub fn locator(&self, mr: usize) -> FaceLocator {
        self.level(mr);
        let levels = self.levels.read().unwrap();
        FaceLocator {
            levels: levels[..=mr].to_vec(),
        }
    }

    /// Face at level `mr` whose spherical triangle contains `direction`.
    pub fn locate_face(&self, mr: usize, direction: Vec3) -> Result<usize> {
        self.locator(mr).locate(direction)
    }
}

/// Point location by descent from the 20 root faces through the child
/// convention; ties go to the lowest face index.
#[derive(Debug, Clone)]
pub struct FaceLocator {
    levels: Vec<Arc<Triangulation>>,
}

impl FaceLocator {
    pub fn mr(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn locate(&self, direction: Vec3) -> Result<usize> {
        if (norm(direction) - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!(
                "direction {direction:?} is not a unit vector"
            )));
        }
        let root = &self.levels[0];
        let mut face = (0..root.face_count())
            .find(|&f| root.contains(f, direction))
            .ok_or_else(|| {
                Error::Geometry(format!("no root face contains {direction:?}"))
            })?;
        for level in &self.levels[1..] {
            let children = 4 * face..4 * face + 4;
            face = match children.clone().find(|&c| level.contains(c, direction)) {
                Some(c) => c,
                // Rounding on a shared edge; take the least-violated child.
                None => children
                    .max_by(|&a, &b| {
                        level
                            .containment_margin(a, direction)
                            .total_cmp(&level.containment_margin(b, direction))
                    })
                    .unwrap(),
            };
        }
        Ok(face)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CacheStats {
    pub hits: usize,
    pub misses: usize,
}

/// Per-resolution memo of [`SphericalMesh`]es. Each level's FAF table is
/// computed at most once for the lifetime of the cache, also under
/// concurrent access.
#[derive(Debug, Default)]
pub struct AdjacencyCache {
    entries: Mutex<HashMap<usize, Arc<OnceLock<Arc<SphericalMesh>>>>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl AdjacencyCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_mesh(&self, hierarchy: &MeshHierarchy, mr: usize) -> Arc<SphericalMesh> {
        let slot = Arc::clone(self.entries.lock().unwrap().entry(mr).or_default());
        let mut computed = false;
        let mesh = slot.get_or_init(|| {
            computed = true;
            Arc::new(
                SphericalMesh::from_geometry(hierarchy.level(mr))
                    .expect("subdivided icosahedron is a closed manifold"),
            )
        });
        if computed {
            self.misses.fetch_add(1, Ordering::Relaxed);
        } else {
            self.hits.fetch_add(1, Ordering::Relaxed);
        }
        Arc::clone(mesh)
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
        }
    }

    /// Number of FAF tables built through this cache.
    pub fn faf_computations(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn cached_levels(&self) -> Vec<usize> {
        let mut levels: Vec<usize> = self.entries.lock().unwrap().keys().copied().collect();
        levels.sort_unstable();
        levels
    }
}
