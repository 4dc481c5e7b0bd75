//! Semantic jaw graph: tooth nodes carrying category, layout and features,
//! connected by `Neighbor`, `Symmetry` and `Arch` relations.

mod fdi;
mod io;

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Matrix3, Point3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use fdi::{ToothId, NUM_CATEGORIES};
pub use io::{deserialize, serialize};

/// Length of the per-node semantic feature vector.
pub const FEATURE_DIM: usize = 16;

/// Number of scalar channels in a [`ToothLayout`].
pub const LAYOUT_DIM: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JawGraphError {
    #[error("invalid FDI code {0}")]
    InvalidFdi(u8),
    #[error("invalid FDI code {code} for {side} jaw")]
    WrongSide { code: u8, side: JawSide },
    #[error("graph failed validation: {}", format_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("jaw-graph parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JawSide {
    Upper,
    Lower,
}

impl fmt::Display for JawSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JawSide::Upper => "upper",
            JawSide::Lower => "lower",
        })
    }
}

impl std::str::FromStr for JawSide {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "upper" => Ok(JawSide::Upper),
            "lower" => Ok(JawSide::Lower),
            _ => Err(format!("unknown jaw side '{s}' (expected upper or lower)")),
        }
    }
}

/// Oriented box describing one tooth: center (mm), extents (mm) and the
/// two side rotations (radians).
///
/// The box's local x axis runs mesio-distally (`w`), local y bucco-lingually
/// (`l`) and local z along the crown height (`h`). The world orientation is
/// `Rz(k) * Rx(r)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToothLayout {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub h: f64,
    pub w: f64,
    pub l: f64,
    pub k: f64,
    pub r: f64,
}

impl ToothLayout {
    pub fn to_array(&self) -> [f64; LAYOUT_DIM] {
        [self.x, self.y, self.z, self.h, self.w, self.l, self.k, self.r]
    }

    pub fn from_array(a: [f64; LAYOUT_DIM]) -> Self {
        ToothLayout {
            x: a[0],
            y: a[1],
            z: a[2],
            h: a[3],
            w: a[4],
            l: a[5],
            k: a[6],
            r: a[7],
        }
    }

    pub fn center(&self) -> Point3<f64> {
        Point3::new(self.x, self.y, self.z)
    }

    /// Half extents along the local (x, y, z) axes.
    pub fn half_extents(&self) -> Vector3<f64> {
        Vector3::new(self.w, self.l, self.h) * 0.5
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_from_angles(self.k, self.r)
    }

    /// Maps a point from box-local coordinates to world coordinates.
    pub fn to_world(&self, local: Vector3<f64>) -> Point3<f64> {
        self.center() + self.rotation() * local
    }

    /// True when `p` lies in the box grown by `inflate` on every face.
    pub fn contains(&self, p: &Point3<f64>, inflate: f64) -> bool {
        let local = self.rotation().transpose() * (p - self.center());
        let half = self.half_extents();
        (0..3).all(|i| local[i].abs() <= half[i] + inflate)
    }

    /// Wraps both angles into (-pi, pi].
    pub fn wrapped(mut self) -> Self {
        self.k = wrap_angle(self.k);
        self.r = wrap_angle(self.r);
        self
    }
}

pub fn rotation_from_angles(k: f64, r: f64) -> Matrix3<f64> {
    let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), k);
    let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), r);
    (rz * rx).into_inner()
}

/// Inverse of [`rotation_from_angles`] for matrices of that form; for other
/// rotations returns the closest pair in the sense of the first column and
/// the last row.
pub fn angles_from_rotation(m: &Matrix3<f64>) -> (f64, f64) {
    let k = m[(1, 0)].atan2(m[(0, 0)]);
    let r = m[(2, 1)].atan2(m[(2, 2)]);
    (wrap_angle(k), wrap_angle(r))
}

pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToothNode {
    pub tooth_id: ToothId,
    pub layout: Option<ToothLayout>,
    pub features: Vec<f64>,
    pub missing: bool,
}

impl ToothNode {
    pub fn present(tooth_id: ToothId, layout: ToothLayout) -> Self {
        ToothNode {
            tooth_id,
            layout: Some(layout),
            features: geometry_features(&layout).to_vec(),
            missing: false,
        }
    }

    pub fn missing(tooth_id: ToothId) -> Self {
        ToothNode {
            tooth_id,
            layout: None,
            features: vec![0.0; FEATURE_DIM],
            missing: true,
        }
    }
}

/// Semantic features for a present tooth.
///
/// Segmentation-derived descriptors are not available here, so present teeth
/// carry a fixed geometric descriptor of their box; missing teeth carry zeros.
pub fn geometry_features(layout: &ToothLayout) -> [f64; FEATURE_DIM] {
    let (h, w, l) = (layout.h, layout.w, layout.l);
    let mut f = [0.0; FEATURE_DIM];
    f[0] = h / 10.0;
    f[1] = w / 10.0;
    f[2] = l / 10.0;
    f[3] = (h * w * l).cbrt() / 10.0;
    f[4] = w / h;
    f[5] = l / h;
    f[6] = w / l;
    f[7] = layout.k.cos();
    f[8] = layout.k.sin();
    f[9] = layout.r.cos();
    f[10] = layout.r.sin();
    f[11] = 1.0;
    f
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Relation {
    Neighbor,
    Symmetry,
    Arch,
}

impl Relation {
    pub const ALL: [Relation; 3] = [Relation::Neighbor, Relation::Symmetry, Relation::Arch];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JawEdge {
    pub src: usize,
    pub dst: usize,
    pub relation: Relation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JawGraph {
    pub jaw_side: JawSide,
    pub nodes: Vec<ToothNode>,
    pub edges: Vec<JawEdge>,
}

/// One failed invariant found by [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Node or edge index the violation refers to, if any.
    pub node: Option<usize>,
    pub edge: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.node, self.edge) {
            (Some(n), _) => write!(f, "node {n}: {}", self.message),
            (_, Some(e)) => write!(f, "edge {e}: {}", self.message),
            _ => f.write_str(&self.message),
        }
    }
}

impl JawGraph {
    /// Builds a graph from nodes, deriving the edge set.
    pub fn new(jaw_side: JawSide, nodes: Vec<ToothNode>) -> Result<Self, JawGraphError> {
        let edges = build_edges(&nodes, jaw_side)?;
        let g = JawGraph {
            jaw_side,
            nodes,
            edges,
        };
        validate(&g).map_err(JawGraphError::Invalid)?;
        Ok(g)
    }

    pub fn find(&self, id: ToothId) -> Option<usize> {
        self.nodes.iter().position(|n| n.tooth_id == id)
    }

    pub fn missing_indices(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].missing)
            .collect()
    }

    /// Splits the graph into its (categories, layouts, features, edges) parts.
    pub fn decompose(
        &self,
    ) -> (
        Vec<ToothId>,
        Vec<Option<ToothLayout>>,
        Vec<Vec<f64>>,
        Vec<JawEdge>,
    ) {
        (
            self.nodes.iter().map(|n| n.tooth_id).collect(),
            self.nodes.iter().map(|n| n.layout).collect(),
            self.nodes.iter().map(|n| n.features.clone()).collect(),
            self.edges.clone(),
        )
    }

    /// Edge set keyed by tooth ids, independent of node order.
    pub fn canonical_edges(&self) -> BTreeSet<(ToothId, ToothId, Relation)> {
        self.edges
            .iter()
            .map(|e| {
                let a = self.nodes[e.src].tooth_id;
                let b = self.nodes[e.dst].tooth_id;
                let (a, b) = if a.arch_rank() <= b.arch_rank() { (a, b) } else { (b, a) };
                (a, b, e.relation)
            })
            .collect()
    }

    /// Copy with nodes reordered by arch position and edges rebuilt.
    /// Returns the permutation `perm` with `canonical.nodes[i] == self.nodes[perm[i]]`.
    pub fn canonicalized(&self) -> Result<(JawGraph, Vec<usize>), JawGraphError> {
        let perm = arch_order(self)?;
        let nodes: Vec<ToothNode> = perm.iter().map(|&i| self.nodes[i].clone()).collect();
        let edges = build_edges(&nodes, self.jaw_side)?;
        Ok((
            JawGraph {
                jaw_side: self.jaw_side,
                nodes,
                edges,
            },
            perm,
        ))
    }
}

/// Node indices sorted along the dental arch (patient right to left).
pub fn arch_order(graph: &JawGraph) -> Result<Vec<usize>, JawGraphError> {
    arch_order_of(&graph.nodes, graph.jaw_side)
}

fn arch_order_of(nodes: &[ToothNode], side: JawSide) -> Result<Vec<usize>, JawGraphError> {
    let mut ranked = Vec::with_capacity(nodes.len());
    for (i, n) in nodes.iter().enumerate() {
        let id = n.tooth_id;
        if !id.is_valid() {
            return Err(JawGraphError::InvalidFdi(id.0));
        }
        if !id.is_valid_for(side) {
            return Err(JawGraphError::WrongSide { code: id.0, side });
        }
        ranked.push((id.arch_rank().unwrap(), i));
    }
    ranked.sort_unstable();
    Ok(ranked.into_iter().map(|(_, i)| i).collect())
}

/// Derives the relation edges for a set of tooth nodes.
///
/// * `Neighbor` joins teeth that are consecutive along the arch.
/// * `Symmetry` joins contralateral pairs when both are in the record.
/// * `Arch` joins every tooth to the two most central teeth in the record.
///
/// Each undirected relation is stored once, `src` preceding `dst` along the arch.
pub fn build_edges(nodes: &[ToothNode], side: JawSide) -> Result<Vec<JawEdge>, JawGraphError> {
    let order = arch_order_of(nodes, side)?;
    let rank = |i: usize| nodes[i].tooth_id.arch_rank().unwrap();
    let mut set: BTreeSet<(usize, usize, Relation)> = BTreeSet::new();
    let mut push = |a: usize, b: usize, rel: Relation| {
        if a == b {
            return;
        }
        let (s, d) = if rank(a) < rank(b) { (a, b) } else { (b, a) };
        set.insert((rank(s), rank(d), rel));
    };

    for w in order.windows(2) {
        push(w[0], w[1], Relation::Neighbor);
    }

    for &i in &order {
        let id = nodes[i].tooth_id;
        if id.is_left() {
            continue;
        }
        let mirror = id.mirror().unwrap();
        if let Some(j) = nodes.iter().position(|n| n.tooth_id == mirror) {
            push(i, j, Relation::Symmetry);
        }
    }

    // Distance of rank r to the midline is |2r - 15| half-steps.
    let mut central: Vec<usize> = order.clone();
    central.sort_by_key(|&i| ((2 * rank(i) as i64 - 15).abs(), rank(i)));
    central.truncate(2);
    for &c in &central {
        for &i in &order {
            push(i, c, Relation::Arch);
        }
    }

    let by_rank: Vec<usize> = {
        let mut v = vec![usize::MAX; 16];
        for &i in &order {
            v[rank(i)] = i;
        }
        v
    };
    let mut edges: Vec<JawEdge> = set
        .into_iter()
        .map(|(rs, rd, relation)| JawEdge {
            src: by_rank[rs],
            dst: by_rank[rd],
            relation,
        })
        .collect();
    edges.sort_by_key(|e| (e.relation, rank(e.src), rank(e.dst)));
    Ok(edges)
}

/// Checks every structural and value invariant, collecting all violations.
///
/// A missing tooth may carry a layout here (augmented graphs fill them in);
/// use [`validate_source`] for graphs as ingested.
pub fn validate(graph: &JawGraph) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let node_v = |i: usize, message: String| Violation {
        node: Some(i),
        edge: None,
        message,
    };

    let mut seen = BTreeSet::new();
    for (i, n) in graph.nodes.iter().enumerate() {
        let id = n.tooth_id;
        if !id.is_valid() {
            out.push(node_v(i, format!("invalid FDI code {}", id.0)));
        } else if !id.is_valid_for(graph.jaw_side) {
            out.push(node_v(
                i,
                format!("invalid FDI code {} for {} jaw", id.0, graph.jaw_side),
            ));
        }
        if !seen.insert(id) {
            out.push(node_v(i, format!("duplicate tooth_id {}", id.0)));
        }
        if n.features.len() != FEATURE_DIM {
            out.push(node_v(
                i,
                format!(
                    "feature dimension {} (expected {FEATURE_DIM})",
                    n.features.len()
                ),
            ));
        }
        if n.features.iter().any(|f| !f.is_finite()) {
            out.push(node_v(i, "non-finite feature".into()));
        }
        match &n.layout {
            None if !n.missing => {
                out.push(node_v(i, "present tooth without layout".into()));
            }
            None => {}
            Some(l) => {
                if l.to_array().iter().any(|v| !v.is_finite()) {
                    out.push(node_v(i, "non-finite layout value".into()));
                }
                if !(l.h > 0.0 && l.w > 0.0 && l.l > 0.0) {
                    out.push(node_v(i, "non-positive extent".into()));
                }
                for (name, a) in [("k", l.k), ("r", l.r)] {
                    if !(a > -PI && a <= PI) {
                        out.push(node_v(i, format!("angle {name} outside (-pi, pi]")));
                    }
                }
            }
        }
    }

    let mut triples = BTreeSet::new();
    for (e_idx, e) in graph.edges.iter().enumerate() {
        let edge_v = |message: String| Violation {
            node: None,
            edge: Some(e_idx),
            message,
        };
        let n = graph.nodes.len();
        if e.src >= n || e.dst >= n {
            out.push(edge_v(format!(
                "endpoint out of range ({} -> {}, {} nodes)",
                e.src, e.dst, n
            )));
            continue;
        }
        if e.src == e.dst {
            out.push(edge_v("self-edge".into()));
        }
        if !triples.insert((e.src, e.dst, e.relation)) {
            out.push(edge_v("duplicate edge".into()));
        }
    }

    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// [`validate`] plus the ingest rule: a tooth is missing exactly when its
/// layout is absent.
pub fn validate_source(graph: &JawGraph) -> Result<(), Vec<Violation>> {
    let mut out = validate(graph).err().unwrap_or_default();
    for (i, n) in graph.nodes.iter().enumerate() {
        if n.missing && n.layout.is_some() {
            out.push(Violation {
                node: Some(i),
                edge: None,
                message: "missing tooth with a defined layout".into(),
            });
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}
