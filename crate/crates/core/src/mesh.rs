//! Conforming triangulations of polygonal 2D domains.
//!
//! A [`Mesh`] stores counterclockwise triangles, globally oriented edges and
//! boundary markers. Edges are directed from the lower to the higher vertex
//! index; the per-triangle sign records whether the triangle traverses an
//! edge along that global direction (equivalently, whether the global edge
//! normal points out of the triangle). Meshes are immutable after
//! construction.
//!
//! The mesh size is `h = max_T h_T` with `h_T = sqrt(|T|)`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryTag {
    Dirichlet,
    Neumann,
}

impl fmt::Display for BoundaryTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoundaryTag::Dirichlet => write!(f, "DIRICHLET"),
            BoundaryTag::Neumann => write!(f, "NEUMANN"),
        }
    }
}

/// An undirected mesh edge, stored with `vertices[0] < vertices[1]`.
#[derive(Debug, Clone)]
pub struct Edge {
    pub vertices: [usize; 2],
    /// Incident triangles; boundary edges have exactly one.
    pub triangles: [Option<usize>; 2],
    /// `Some` exactly for boundary edges.
    pub tag: Option<BoundaryTag>,
}

impl Edge {
    pub fn is_boundary(&self) -> bool {
        self.tag.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct Mesh {
    vertices: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    edges: Vec<Edge>,
    /// `tri_edges[t][i]` is the edge opposite local vertex `i` of triangle `t`.
    tri_edges: Vec<[usize; 3]>,
    /// +1 when triangle `t` traverses the edge from lower to higher vertex
    /// index in its counterclockwise boundary walk, -1 otherwise.
    tri_edge_signs: Vec<[i8; 3]>,
    areas: Vec<f64>,
    dirichlet_vertices: Vec<bool>,
    h: f64,
}

fn signed_area(a: Point, b: Point, c: Point) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
}

impl Mesh {
    /// Assemble a mesh from raw vertices and triangles. Triangle orientation
    /// is normalized to counterclockwise; `tag` is queried once per boundary
    /// edge with the endpoint indices (lower first).
    pub fn from_parts(
        vertices: Vec<Point>,
        triangles: Vec<[usize; 3]>,
        tag: &mut dyn FnMut(usize, usize) -> Result<BoundaryTag>,
    ) -> Result<Mesh> {
        let nv = vertices.len();
        let mut tris = triangles;
        let mut areas = Vec::with_capacity(tris.len());
        for t in tris.iter_mut() {
            if t.iter().any(|&v| v >= nv) {
                return Err(Error::Mesh(format!("triangle {t:?} references missing vertex")));
            }
            let mut area = signed_area(vertices[t[0]], vertices[t[1]], vertices[t[2]]);
            if area < 0.0 {
                t.swap(1, 2);
                area = -area;
            }
            if !(area > 0.0) {
                return Err(Error::Mesh(format!("degenerate triangle {t:?} (area {area})")));
            }
            areas.push(area);
        }

        // Deterministic edge numbering: sorted by (lo, hi) vertex pair.
        let mut edge_ids: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for t in &tris {
            for i in 0..3 {
                let a = t[(i + 1) % 3];
                let b = t[(i + 2) % 3];
                let key = (a.min(b), a.max(b));
                let next = edge_ids.len();
                edge_ids.entry(key).or_insert(next);
            }
        }
        // BTreeMap iteration order is by key; renumber to make ids sorted too.
        let mut keys: Vec<(usize, usize)> = edge_ids.keys().copied().collect();
        keys.sort_unstable();
        for (id, key) in keys.iter().enumerate() {
            *edge_ids.get_mut(key).unwrap() = id;
        }

        let mut edges: Vec<Edge> = keys
            .iter()
            .map(|&(a, b)| Edge {
                vertices: [a, b],
                triangles: [None, None],
                tag: None,
            })
            .collect();

        let mut tri_edges = vec![[0usize; 3]; tris.len()];
        let mut tri_edge_signs = vec![[0i8; 3]; tris.len()];
        for (ti, t) in tris.iter().enumerate() {
            for i in 0..3 {
                let a = t[(i + 1) % 3];
                let b = t[(i + 2) % 3];
                let key = (a.min(b), a.max(b));
                let eid = edge_ids[&key];
                tri_edges[ti][i] = eid;
                tri_edge_signs[ti][i] = if a < b { 1 } else { -1 };
                let slots = &mut edges[eid].triangles;
                if slots[0].is_none() {
                    slots[0] = Some(ti);
                } else if slots[1].is_none() {
                    slots[1] = Some(ti);
                } else {
                    return Err(Error::Mesh(format!(
                        "edge {key:?} is shared by more than two triangles"
                    )));
                }
            }
        }

        let mut dirichlet_vertices = vec![false; nv];
        for e in edges.iter_mut() {
            if e.triangles[1].is_none() {
                let t = tag(e.vertices[0], e.vertices[1])?;
                e.tag = Some(t);
                if t == BoundaryTag::Dirichlet {
                    dirichlet_vertices[e.vertices[0]] = true;
                    dirichlet_vertices[e.vertices[1]] = true;
                }
            }
        }

        let h = areas.iter().fold(0.0_f64, |m, a| m.max(a.sqrt()));
        let mesh = Mesh {
            vertices,
            triangles: tris,
            edges,
            tri_edges,
            tri_edge_signs,
            areas,
            dirichlet_vertices,
            h,
        };
        debug_assert!(mesh.check().is_ok());
        Ok(mesh)
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn vertex(&self, v: usize) -> Point {
        self.vertices[v]
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn triangle(&self, t: usize) -> [usize; 3] {
        self.triangles[t]
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn edge(&self, e: usize) -> &Edge {
        &self.edges[e]
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn tri_edges(&self, t: usize) -> [usize; 3] {
        self.tri_edges[t]
    }

    pub fn tri_edge_signs(&self, t: usize) -> [i8; 3] {
        self.tri_edge_signs[t]
    }

    pub fn area(&self, t: usize) -> f64 {
        self.areas[t]
    }

    pub fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn min_h_t(&self) -> f64 {
        self.areas
            .iter()
            .fold(f64::INFINITY, |m, a| m.min(a.sqrt()))
    }

    pub fn edge_length(&self, e: usize) -> f64 {
        let [a, b] = self.edges[e].vertices;
        let pa = self.vertices[a];
        let pb = self.vertices[b];
        ((pb[0] - pa[0]).powi(2) + (pb[1] - pa[1]).powi(2)).sqrt()
    }

    pub fn centroid(&self, t: usize) -> Point {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        [
            (pa[0] + pb[0] + pc[0]) / 3.0,
            (pa[1] + pb[1] + pc[1]) / 3.0,
        ]
    }

    /// Midpoints of the three edges, opposite local vertices 0, 1, 2.
    /// Quadrature at these points is exact for quadratic integrands.
    pub fn edge_midpoints(&self, t: usize) -> [Point; 3] {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        let mid = |p: Point, q: Point| [(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0];
        [mid(pb, pc), mid(pc, pa), mid(pa, pb)]
    }

    pub fn is_dirichlet_vertex(&self, v: usize) -> bool {
        self.dirichlet_vertices[v]
    }

    pub fn dirichlet_vertex_mask(&self) -> &[bool] {
        &self.dirichlet_vertices
    }

    pub fn n_dirichlet_vertices(&self) -> usize {
        self.dirichlet_vertices.iter().filter(|&&d| d).count()
    }

    pub fn boundary_edges(&self) -> impl Iterator<Item = (usize, &Edge)> {
        self.edges
            .iter()
            .enumerate()
            .filter(|(_, e)| e.is_boundary())
    }

    /// Validate the structural invariants: positive areas, interior edges
    /// with exactly two incident triangles and opposite traversal signs,
    /// boundary edges with one triangle and a marker.
    pub fn check(&self) -> Result<()> {
        for (t, &a) in self.areas.iter().enumerate() {
            if !(a > 0.0) {
                return Err(Error::Mesh(format!("triangle {t} has area {a}")));
            }
        }
        let mut sign_sum: Vec<i32> = vec![0; self.edges.len()];
        let mut incidence: Vec<u32> = vec![0; self.edges.len()];
        for t in 0..self.triangles.len() {
            for i in 0..3 {
                let e = self.tri_edges[t][i];
                sign_sum[e] += self.tri_edge_signs[t][i] as i32;
                incidence[e] += 1;
            }
        }
        for (ei, e) in self.edges.iter().enumerate() {
            match (incidence[ei], e.tag) {
                (2, None) => {
                    if sign_sum[ei] != 0 {
                        return Err(Error::Mesh(format!(
                            "interior edge {ei} has equal traversal signs in both triangles"
                        )));
                    }
                }
                (1, Some(_)) => {}
                (1, None) => {
                    return Err(Error::Mesh(format!("boundary edge {ei} is untagged")));
                }
                (n, _) => {
                    return Err(Error::Mesh(format!(
                        "edge {ei} has {n} incident triangles / tag {:?}",
                        e.tag
                    )));
                }
            }
        }
        Ok(())
    }

    /// Red refinement: every triangle is split into four similar children by
    /// connecting the edge midpoints. Boundary markers are inherited and the
    /// mesh size halves.
    pub fn refine_uniform(&self) -> Mesh {
        let n_orig = self.vertices.len();
        let mut vertices = self.vertices.clone();
        // one new vertex per parent edge, numbered in edge order
        let mut midpoint = vec![0usize; self.edges.len()];
        for (ei, e) in self.edges.iter().enumerate() {
            let [a, b] = e.vertices;
            let (pa, pb) = (self.vertices[a], self.vertices[b]);
            midpoint[ei] = vertices.len();
            vertices.push([(pa[0] + pb[0]) / 2.0, (pa[1] + pb[1]) / 2.0]);
        }
        let mut triangles = Vec::with_capacity(4 * self.triangles.len());
        for t in 0..self.triangles.len() {
            let [a, b, c] = self.triangles[t];
            let [ea, eb, ec] = self.tri_edges[t]; // opposite a, b, c
            let (mab, mbc, mca) = (midpoint[ec], midpoint[ea], midpoint[eb]);
            triangles.push([a, mab, mca]);
            triangles.push([mab, b, mbc]);
            triangles.push([mca, mbc, c]);
            triangles.push([mab, mbc, mca]);
        }
        // Map a fine boundary edge back to its parent edge tag: one endpoint
        // is a parent-edge midpoint, the other an original vertex of that
        // parent edge.
        let parent_tag: BTreeMap<usize, Option<BoundaryTag>> = self
            .edges
            .iter()
            .enumerate()
            .map(|(ei, e)| (midpoint[ei], e.tag))
            .collect();
        let mut tag = |a: usize, b: usize| -> Result<BoundaryTag> {
            let (orig, mid) = if a < n_orig { (a, b) } else { (b, a) };
            debug_assert!(orig < n_orig && mid >= n_orig);
            parent_tag
                .get(&mid)
                .copied()
                .flatten()
                .ok_or_else(|| Error::Mesh(format!("refined edge ({a},{b}) lost its marker")))
        };
        Mesh::from_parts(vertices, triangles, &mut tag)
            .expect("refinement of a valid mesh is valid")
    }
}

/// Structured triangulation of the unit square with `2 n^2` triangles; every
/// boundary edge is marked `DIRICHLET`.
pub fn generate_unit_square(n: usize) -> Result<Mesh> {
    if n == 0 {
        return Err(Error::invalid("n", "subdivision count must be at least 1"));
    }
    let nf = n as f64;
    let idx = |i: usize, j: usize| j * (n + 1) + i;
    let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
    for j in 0..=n {
        for i in 0..=n {
            vertices.push([i as f64 / nf, j as f64 / nf]);
        }
    }
    let mut triangles = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let v00 = idx(i, j);
            let v10 = idx(i + 1, j);
            let v01 = idx(i, j + 1);
            let v11 = idx(i + 1, j + 1);
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }
    Mesh::from_parts(vertices, triangles, &mut |_, _| Ok(BoundaryTag::Dirichlet))
}

/// Corners of the diamond-with-cut domain: the vertical cut at `x1 = 0`
/// spans `|x2| <= 1/2` and the remaining corner sits at `(2, 0)`.
pub const DIAMOND_CORNERS: [Point; 3] = [[0.0, -0.5], [2.0, 0.0], [0.0, 0.5]];

/// Area of the diamond domain.
pub const DIAMOND_AREA: f64 = 1.0;

/// Structured triangulation of the cut diamond. Boundary edges lying on the
/// cut plane `{x1 = 0}` are marked `DIRICHLET`, all others `NEUMANN`. The
/// achieved mesh size `h = 1/k` is within a factor two of `h_target`.
pub fn generate_diamond(h_target: f64) -> Result<Mesh> {
    if !(h_target > 0.0) {
        return Err(Error::invalid("h_target", "must be positive"));
    }
    if h_target > 2.0 {
        return Err(Error::invalid(
            "h_target",
            format!("{h_target} exceeds the domain diameter"),
        ));
    }
    let k = (1.0 / h_target).ceil() as usize;
    if k > 4000 {
        return Err(Error::invalid(
            "h_target",
            format!("{h_target} would create {} triangles", k * k),
        ));
    }
    let [a, b, c] = DIAMOND_CORNERS;
    let kf = k as f64;
    // barycentric lattice, row j holds k - j + 1 points
    let offset: Vec<usize> = (0..=k)
        .scan(0usize, |acc, j| {
            let o = *acc;
            *acc += k - j + 1;
            Some(o)
        })
        .collect();
    let idx = |i: usize, j: usize| offset[j] + i;
    let mut vertices = Vec::with_capacity((k + 1) * (k + 2) / 2);
    for j in 0..=k {
        for i in 0..=(k - j) {
            let s = i as f64 / kf;
            let t = j as f64 / kf;
            vertices.push([
                a[0] + s * (b[0] - a[0]) + t * (c[0] - a[0]),
                a[1] + s * (b[1] - a[1]) + t * (c[1] - a[1]),
            ]);
        }
    }
    let mut triangles = Vec::with_capacity(k * k);
    for j in 0..k {
        for i in 0..(k - j) {
            triangles.push([idx(i, j), idx(i + 1, j), idx(i, j + 1)]);
            if i + 1 < k - j {
                triangles.push([idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)]);
            }
        }
    }
    let verts = vertices.clone();
    Mesh::from_parts(vertices, triangles, &mut |u, v| {
        let on_cut = verts[u][0].abs() <= 1e-12 && verts[v][0].abs() <= 1e-12;
        Ok(if on_cut {
            BoundaryTag::Dirichlet
        } else {
            BoundaryTag::Neumann
        })
    })
}

/// Write the plain-text mesh format:
///
/// ```text
/// vertices N / triangles M / boundary K
/// <x> <y>              N rows
/// <a> <b> <c>          M rows
/// edge <v0> <v1> <TAG> K rows
/// ```
pub fn write_text<W: Write>(mesh: &Mesh, w: &mut W) -> Result<()> {
    let n_boundary = mesh.boundary_edges().count();
    writeln!(
        w,
        "vertices {} / triangles {} / boundary {}",
        mesh.n_vertices(),
        mesh.n_triangles(),
        n_boundary
    )?;
    for p in mesh.vertices() {
        writeln!(w, "{:.17e} {:.17e}", p[0], p[1])?;
    }
    for t in mesh.triangles() {
        writeln!(w, "{} {} {}", t[0], t[1], t[2])?;
    }
    for (_, e) in mesh.boundary_edges() {
        writeln!(
            w,
            "edge {} {} {}",
            e.vertices[0],
            e.vertices[1],
            e.tag.expect("boundary edge is tagged")
        )?;
    }
    Ok(())
}

/// Read the format produced by [`write_text`]. The boundary rows must cover
/// exactly the boundary edges of the triangulation.
pub fn read_text<R: BufRead>(r: &mut R, path: &str) -> Result<Mesh> {
    let mut lines = r.lines().enumerate();
    let mut next_line = |what: &str| -> Result<(usize, String)> {
        for (no, line) in lines.by_ref() {
            let line = line?;
            if !line.trim().is_empty() {
                return Ok((no + 1, line));
            }
        }
        Err(Error::Parse {
            path: path.to_string(),
            line: 0,
            message: format!("unexpected end of file while reading {what}"),
        })
    };
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_string(),
        line,
        message,
    };

    let (hline, header) = next_line("header")?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let header_ok = fields.len() == 8
        && fields[0] == "vertices"
        && fields[2] == "/"
        && fields[3] == "triangles"
        && fields[5] == "/"
        && fields[6] == "boundary";
    if !header_ok {
        return Err(parse_err(hline, format!("malformed header `{header}`")));
    }
    let nv: usize = fields[1]
        .parse()
        .map_err(|e| parse_err(hline, format!("vertex count: {e}")))?;
    let nt: usize = fields[4]
        .parse()
        .map_err(|e| parse_err(hline, format!("triangle count: {e}")))?;
    let nb: usize = fields[7]
        .parse()
        .map_err(|e| parse_err(hline, format!("boundary count: {e}")))?;

    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (no, line) = next_line("vertex coordinates")?;
        let xs: Vec<&str> = line.split_whitespace().collect();
        if xs.len() != 2 {
            return Err(parse_err(no, format!("expected `x y`, got `{line}`")));
        }
        let x: f64 = xs[0]
            .parse()
            .map_err(|e| parse_err(no, format!("x coordinate: {e}")))?;
        let y: f64 = xs[1]
            .parse()
            .map_err(|e| parse_err(no, format!("y coordinate: {e}")))?;
        vertices.push([x, y]);
    }
    let mut triangles = Vec::with_capacity(nt);
    for _ in 0..nt {
        let (no, line) = next_line("triangle indices")?;
        let xs: Vec<&str> = line.split_whitespace().collect();
        if xs.len() != 3 {
            return Err(parse_err(no, format!("expected `a b c`, got `{line}`")));
        }
        let mut t = [0usize; 3];
        for (slot, s) in t.iter_mut().zip(&xs) {
            *slot = s
                .parse()
                .map_err(|e| parse_err(no, format!("vertex index: {e}")))?;
        }
        triangles.push(t);
    }
    let mut tags: BTreeMap<(usize, usize), BoundaryTag> = BTreeMap::new();
    for _ in 0..nb {
        let (no, line) = next_line("boundary edge")?;
        let xs: Vec<&str> = line.split_whitespace().collect();
        if xs.len() != 4 || xs[0] != "edge" {
            return Err(parse_err(no, format!("expected `edge v0 v1 TAG`, got `{line}`")));
        }
        let v0: usize = xs[1]
            .parse()
            .map_err(|e| parse_err(no, format!("edge vertex: {e}")))?;
        let v1: usize = xs[2]
            .parse()
            .map_err(|e| parse_err(no, format!("edge vertex: {e}")))?;
        let tag = match xs[3] {
            "DIRICHLET" => BoundaryTag::Dirichlet,
            "NEUMANN" => BoundaryTag::Neumann,
            other => return Err(parse_err(no, format!("unknown boundary tag `{other}`"))),
        };
        tags.insert((v0.min(v1), v0.max(v1)), tag);
    }

    let n_tags = tags.len();
    let mut used = 0usize;
    let mesh = Mesh::from_parts(vertices, triangles, &mut |a, b| {
        used += 1;
        tags.get(&(a, b)).copied().ok_or_else(|| Error::Parse {
            path: path.to_string(),
            line: 0,
            message: format!("boundary edge ({a},{b}) has no tag row"),
        })
    })?;
    if used != n_tags {
        return Err(Error::Parse {
            path: path.to_string(),
            line: 0,
            message: format!("{} tag rows do not match {} boundary edges", n_tags, used),
        });
    }
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn unit_square_minimal_split() {
        let m = generate_unit_square(1).unwrap();
        assert_eq!(m.n_triangles(), 2);
        assert_eq!(m.n_vertices(), 4);
        m.check().unwrap();
    }

    #[test]
    fn unit_square_counts() {
        let m = generate_unit_square(2).unwrap();
        assert_eq!(m.n_triangles(), 8);
        assert_eq!(m.n_vertices(), 9);
    }

    #[test]
    fn unit_square_h_t() {
        let m = generate_unit_square(4).unwrap();
        for t in 0..m.n_triangles() {
            assert_relative_eq!(m.area(t), 1.0 / 32.0, max_relative = 1e-14);
        }
        // frozen: sqrt(1/32)
        assert_relative_eq!(m.h(), 0.17677669529663687, max_relative = 1e-14);
    }

    #[test]
    fn unit_square_rejects_zero() {
        assert!(generate_unit_square(0).is_err());
    }

    #[test]
    fn unit_square_area_and_boundary() {
        let m = generate_unit_square(5).unwrap();
        assert_relative_eq!(m.total_area(), 1.0, max_relative = 1e-12);
        for (_, e) in m.boundary_edges() {
            assert_eq!(e.tag, Some(BoundaryTag::Dirichlet));
        }
        assert_eq!(m.boundary_edges().count(), 4 * 5);
    }

    #[test]
    fn diamond_coarse_invariants() {
        let m = generate_diamond(0.5).unwrap();
        m.check().unwrap();
        assert_relative_eq!(m.total_area(), DIAMOND_AREA, max_relative = 1e-12);
    }

    #[test]
    fn diamond_cut_edges_are_dirichlet() {
        for h in [0.5, 0.21, 0.05] {
            let m = generate_diamond(h).unwrap();
            let mut n_dirichlet = 0;
            for (_, e) in m.boundary_edges() {
                let on_cut = e
                    .vertices
                    .iter()
                    .all(|&v| m.vertex(v)[0].abs() <= 1e-12);
                match e.tag.unwrap() {
                    BoundaryTag::Dirichlet => {
                        assert!(on_cut);
                        n_dirichlet += 1;
                    }
                    BoundaryTag::Neumann => assert!(!on_cut),
                }
            }
            assert!(n_dirichlet > 0);
        }
    }

    #[test]
    fn diamond_h_within_factor_two() {
        for h in [1.9, 0.7, 0.3, 0.11, 0.013] {
            let m = generate_diamond(h).unwrap();
            assert!(m.h() <= h * (1.0 + 1e-12), "h = {} for target {}", m.h(), h);
            assert!(m.h() >= h / 2.0 * (1.0 - 1e-12));
        }
    }

    #[test]
    fn diamond_quasi_uniform_scaling() {
        // halving h_target roughly quadruples the vertex count
        let coarse = generate_diamond(0.02).unwrap();
        let fine = generate_diamond(0.01).unwrap();
        let ratio = fine.n_vertices() as f64 / coarse.n_vertices() as f64;
        assert!((3.4..=4.6).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn diamond_rejects_bad_targets() {
        assert!(generate_diamond(0.0).is_err());
        assert!(generate_diamond(-1.0).is_err());
        assert!(generate_diamond(2.5).is_err());
    }

    #[test]
    fn refine_quadruples_and_halves_h() {
        let m = generate_unit_square(1).unwrap();
        let r = m.refine_uniform();
        assert_eq!(r.n_triangles(), 8);
        assert_relative_eq!(r.h(), m.h() / 2.0, max_relative = 1e-14);
        let rr = r.refine_uniform();
        assert_eq!(rr.n_triangles(), 32);
        rr.check().unwrap();
        assert_relative_eq!(rr.total_area(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn refine_inherits_markers() {
        let m = generate_diamond(0.5).unwrap();
        let r = m.refine_uniform();
        for (_, e) in r.boundary_edges() {
            let on_cut = e.vertices.iter().all(|&v| r.vertex(v)[0].abs() <= 1e-12);
            assert_eq!(
                e.tag.unwrap(),
                if on_cut {
                    BoundaryTag::Dirichlet
                } else {
                    BoundaryTag::Neumann
                }
            );
        }
    }

    #[test]
    fn quasi_uniformity_bound() {
        for mesh in [
            generate_unit_square(3).unwrap().refine_uniform(),
            generate_diamond(0.22).unwrap(),
            generate_diamond(0.22).unwrap().refine_uniform(),
        ] {
            assert!(mesh.h() / mesh.min_h_t() <= 4.0);
        }
    }

    #[test]
    fn interior_edge_signs_are_opposite() {
        let m = generate_diamond(0.3).unwrap();
        // covered by check(), but assert the raw structure once explicitly
        for (ei, e) in m.edges().iter().enumerate() {
            if let [Some(t0), Some(t1)] = e.triangles {
                let s0 = (0..3)
                    .find(|&i| m.tri_edges(t0)[i] == ei)
                    .map(|i| m.tri_edge_signs(t0)[i])
                    .unwrap();
                let s1 = (0..3)
                    .find(|&i| m.tri_edges(t1)[i] == ei)
                    .map(|i| m.tri_edge_signs(t1)[i])
                    .unwrap();
                assert_eq!(s0 + s1, 0);
            }
        }
    }

    #[test]
    fn text_round_trip_is_identical() {
        let m = generate_diamond(0.4).unwrap();
        let mut buf = Vec::new();
        write_text(&m, &mut buf).unwrap();
        let parsed = read_text(&mut std::io::BufReader::new(buf.as_slice()), "mem").unwrap();
        let mut buf2 = Vec::new();
        write_text(&parsed, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
        assert_eq!(m.n_vertices(), parsed.n_vertices());
        assert_eq!(m.n_triangles(), parsed.n_triangles());
    }

    #[test]
    fn read_rejects_missing_tag() {
        let m = generate_unit_square(1).unwrap();
        let mut buf = Vec::new();
        write_text(&m, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let truncated: String = text
            .lines()
            .take(text.lines().count() - 1)
            .map(|l| format!("{l}\n"))
            .collect();
        let truncated = truncated.replace("boundary 4", "boundary 3");
        let res = read_text(
            &mut std::io::BufReader::new(truncated.as_bytes()),
            "mem",
        );
        assert!(res.is_err());
    }

    #[test]
    fn degenerate_triangle_rejected() {
        let verts = vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]];
        let tris = vec![[0, 1, 2]];
        let res = Mesh::from_parts(verts, tris, &mut |_, _| Ok(BoundaryTag::Dirichlet));
        assert!(res.is_err());
    }
}
