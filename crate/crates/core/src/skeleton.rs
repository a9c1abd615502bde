//! Directed skeleton graphs and hyperbones.
//!
//! A skeleton is a tree of joints whose edges point away from the root. A
//! hyperbone is the directed path from an ancestor joint to one of its
//! descendants; its *order* is the number of joints on the path, so bones are
//! order-2 hyperbones.
//!
//! Hyperbones are enumerated in a fixed canonical order: ascending order
//! first, then lexicographic on `(start, end)`. The key axis of the high-order
//! attention follows this order.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TopologyError};
use crate::numerics::Tensor;

/// Declarative description of a skeleton, as read from a topology file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub name: String,
    pub joints: usize,
    pub root: usize,
    pub edges: Vec<(usize, usize)>,
    #[serde(default)]
    pub labels: Vec<String>,
}

const H36M_LABELS: [&str; 17] = [
    "hip",
    "right_hip",
    "right_knee",
    "right_foot",
    "left_hip",
    "left_knee",
    "left_foot",
    "spine",
    "thorax",
    "neck",
    "head",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
];

const MPI_LABELS: [&str; 17] = [
    "head_top",
    "neck",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_hip",
    "left_knee",
    "left_ankle",
    "pelvis",
    "spine",
    "head",
];

impl TopologySpec {
    /// 17-joint Human3.6M tree rooted at the hip.
    pub fn h36m() -> Self {
        Self {
            name: "h36m".into(),
            joints: 17,
            root: 0,
            edges: vec![
                (0, 1),
                (1, 2),
                (2, 3),
                (0, 4),
                (4, 5),
                (5, 6),
                (0, 7),
                (7, 8),
                (8, 9),
                (9, 10),
                (8, 11),
                (11, 12),
                (12, 13),
                (8, 14),
                (14, 15),
                (15, 16),
            ],
            labels: H36M_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// 17-joint MPI-INF-3DHP tree rooted at the pelvis (joint 14).
    pub fn mpi_inf_3dhp() -> Self {
        Self {
            name: "mpi_inf_3dhp".into(),
            joints: 17,
            root: 14,
            edges: vec![
                (14, 8),
                (8, 9),
                (9, 10),
                (14, 11),
                (11, 12),
                (12, 13),
                (14, 15),
                (15, 1),
                (1, 16),
                (16, 0),
                (1, 5),
                (5, 6),
                (6, 7),
                (1, 2),
                (2, 3),
                (3, 4),
            ],
            labels: MPI_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Five-joint tree (two chains of two off the root) for desk-scale runs.
    pub fn micro5() -> Self {
        Self {
            name: "micro5".into(),
            joints: 5,
            root: 0,
            edges: vec![(0, 1), (1, 2), (0, 3), (3, 4)],
            labels: ["root", "knee", "foot", "spine", "head"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "h36m" => Some(Self::h36m()),
            "mpi_inf_3dhp" => Some(Self::mpi_inf_3dhp()),
            "micro5" => Some(Self::micro5()),
            _ => None,
        }
    }

    /// A built-in topology by name, otherwise a topology file at that path.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match Self::builtin(name_or_path) {
            Some(t) => Ok(t),
            None => Self::load(name_or_path),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec = Self::parse(&text)?;
        if spec.name.is_empty() {
            spec.name = path.display().to_string();
        }
        Ok(spec)
    }

    /// Parses the line-oriented topology format:
    ///
    /// ```text
    /// # comment
    /// name: h36m
    /// joints: 17
    /// root: 0
    /// edge: 0 1
    /// label: 0 hip
    /// ```
    ///
    /// `name` and `label` lines are optional.
    pub fn parse(text: &str) -> Result<Self, TopologyError> {
        let mut name = String::new();
        let mut joints = None;
        let mut root = None;
        let mut edges = Vec::new();
        let mut labels: Vec<(usize, usize, String)> = Vec::new();
        let parse_err = |line: usize, message: String| TopologyError::Parse { line, message };
        let mut last_line = 0;
        for (no, raw) in text.lines().enumerate() {
            let line_no = no + 1;
            last_line = line_no;
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once(':').ok_or_else(|| {
                parse_err(line_no, format!("expected `key: value`, got `{line}`"))
            })?;
            let value = value.trim();
            let int = |s: &str| -> Result<usize, TopologyError> {
                s.parse()
                    .map_err(|_| parse_err(line_no, format!("`{s}` is not a non-negative integer")))
            };
            match key.trim() {
                "name" => name = value.to_string(),
                "joints" => joints = Some(int(value)?),
                "root" => root = Some(int(value)?),
                "edge" => {
                    let parts: Vec<&str> = value.split_whitespace().collect();
                    if parts.len() != 2 {
                        return Err(parse_err(
                            line_no,
                            format!("edge needs `parent child`, got `{value}`"),
                        ));
                    }
                    edges.push((int(parts[0])?, int(parts[1])?));
                }
                "label" => {
                    let (idx, label) = value
                        .split_once(char::is_whitespace)
                        .ok_or_else(|| parse_err(line_no, "label needs `index name`".into()))?;
                    labels.push((line_no, int(idx)?, label.trim().to_string()));
                }
                other => return Err(parse_err(line_no, format!("unknown key `{other}`"))),
            }
        }
        let joints = joints.ok_or_else(|| parse_err(last_line, "missing `joints:` line".into()))?;
        let root = root.ok_or_else(|| parse_err(last_line, "missing `root:` line".into()))?;
        let mut label_vec = Vec::new();
        if !labels.is_empty() {
            label_vec = (0..joints).map(|i| format!("joint_{i}")).collect();
            for (line, idx, label) in labels {
                if idx >= joints {
                    return Err(parse_err(
                        line,
                        format!("label index {idx} outside 0..{joints}"),
                    ));
                }
                label_vec[idx] = label;
            }
        }
        Ok(Self {
            name,
            joints,
            root,
            edges,
            labels: label_vec,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if !self.name.is_empty() {
            out += &format!("name: {}\n", self.name);
        }
        out += &format!("joints: {}\nroot: {}\n", self.joints, self.root);
        for (p, c) in &self.edges {
            out += &format!("edge: {p} {c}\n");
        }
        for (i, l) in self.labels.iter().enumerate() {
            out += &format!("label: {i} {l}\n");
        }
        out
    }
}

/// Validated directed tree of joints.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonGraph {
    name: String,
    root: usize,
    edges: Vec<(usize, usize)>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    depth: Vec<usize>,
    labels: Vec<String>,
}

/// Builds and validates a skeleton from its topology.
pub fn build_skeleton(spec: &TopologySpec) -> Result<SkeletonGraph, TopologyError> {
    let n = spec.joints;
    if n == 0 {
        return Err(TopologyError::Empty);
    }
    if spec.root >= n {
        return Err(TopologyError::RootOutOfRange {
            root: spec.root,
            joints: n,
        });
    }
    let mut parent: Vec<Option<usize>> = vec![None; n];
    for &(p, c) in &spec.edges {
        if p >= n || c >= n {
            return Err(TopologyError::JointOutOfRange {
                parent: p,
                child: c,
                joints: n,
            });
        }
        if p == c {
            return Err(TopologyError::SelfLoop { joint: p });
        }
        if let Some(first) = parent[c] {
            return Err(TopologyError::MultipleParents {
                joint: c,
                first,
                second: p,
            });
        }
        parent[c] = Some(p);
    }
    // with at most one parent per joint, a cycle shows up as a parent chain
    // that never terminates
    for start in 0..n {
        let mut cur = start;
        let mut steps = 0;
        while let Some(p) = parent[cur] {
            cur = p;
            steps += 1;
            if steps > n {
                return Err(TopologyError::Cycle { joint: start });
            }
        }
    }
    if let Some(p) = parent[spec.root] {
        return Err(TopologyError::RootHasParent {
            root: spec.root,
            parent: p,
        });
    }
    let mut depth = vec![0; n];
    for j in 0..n {
        let mut cur = j;
        let mut d = 0;
        while let Some(p) = parent[cur] {
            cur = p;
            d += 1;
        }
        if cur != spec.root {
            return Err(TopologyError::Orphan { joint: j });
        }
        depth[j] = d;
    }
    if spec.edges.len() != n - 1 {
        return Err(TopologyError::EdgeCount {
            joints: n,
            expected: n - 1,
            found: spec.edges.len(),
        });
    }
    let mut children = vec![Vec::new(); n];
    for &(p, c) in &spec.edges {
        children[p].push(c);
    }
    for c in &mut children {
        c.sort_unstable();
    }
    let labels = if spec.labels.len() == n {
        spec.labels.clone()
    } else {
        (0..n).map(|i| format!("joint_{i}")).collect()
    };
    Ok(SkeletonGraph {
        name: spec.name.clone(),
        root: spec.root,
        edges: spec.edges.clone(),
        parent,
        children,
        depth,
        labels,
    })
}

impl SkeletonGraph {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn joint_count(&self) -> usize {
        self.parent.len()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parent[joint]
    }

    pub fn children(&self, joint: usize) -> &[usize] {
        &self.children[joint]
    }

    /// Number of edges between the root and `joint`.
    pub fn depth(&self, joint: usize) -> usize {
        self.depth[joint]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn to_spec(&self) -> TopologySpec {
        TopologySpec {
            name: self.name.clone(),
            joints: self.joint_count(),
            root: self.root,
            edges: self.edges.clone(),
            labels: self.labels.clone(),
        }
    }

    /// Binary `N x N` matrix with `A[i][j] = 1` iff `(i, j)` is an edge.
    pub fn adjacency(&self) -> Tensor {
        let n = self.joint_count();
        let mut a = Tensor::zeros(vec![n, n]);
        for &(p, c) in &self.edges {
            a.data_mut()[p * n + c] = 1.0;
        }
        a
    }

    /// The directed path from ancestor `from` to descendant `to`.
    pub fn shortest_path(&self, from: usize, to: usize) -> Result<Hyperbone> {
        let n = self.joint_count();
        if from >= n || to >= n {
            return Err(Error::invalid(
                "shortest_path",
                format!("joint outside 0..{n}"),
            ));
        }
        if from == to {
            return Err(Error::DegeneratePath { from, to });
        }
        let mut path = vec![to];
        let mut cur = to;
        while let Some(p) = self.parent[cur] {
            path.push(p);
            if p == from {
                path.reverse();
                return Ok(Hyperbone { path });
            }
            cur = p;
        }
        Err(Error::NoDirectedPath { from, to })
    }

    /// All directed paths with between 2 and `max_order` joints, canonically
    /// ordered.
    pub fn enumerate_hyperbones(&self, max_order: usize) -> Result<HyperboneIndex> {
        if max_order < 2 {
            return Err(Error::invalid(
                "enumerate_hyperbones",
                format!("max_order {max_order} must be at least 2"),
            ));
        }
        let mut by_order: Vec<Vec<Hyperbone>> = vec![Vec::new(); max_order - 1];
        let mut stack = Vec::new();
        for start in 0..self.joint_count() {
            stack.clear();
            stack.push(vec![start]);
            while let Some(path) = stack.pop() {
                if path.len() >= 2 {
                    by_order[path.len() - 2].push(Hyperbone { path: path.clone() });
                }
                if path.len() < max_order {
                    for &c in &self.children[*path.last().unwrap()] {
                        let mut next = path.clone();
                        next.push(c);
                        stack.push(next);
                    }
                }
            }
        }
        for bucket in &mut by_order {
            bucket.sort_by_key(|h| (h.start(), h.end()));
        }
        Ok(HyperboneIndex::from_buckets(max_order, by_order))
    }
}

/// Directed joint path of order `n >= 2`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Hyperbone {
    path: Vec<usize>,
}

impl Hyperbone {
    /// Wraps a joint path after checking it against `graph`.
    pub fn new(path: Vec<usize>, graph: &SkeletonGraph) -> Result<Self> {
        if path.len() < 2 {
            return Err(Error::invalid("hyperbone", "order must be at least 2"));
        }
        for w in path.windows(2) {
            if w[1] >= graph.joint_count() || graph.parent(w[1]) != Some(w[0]) {
                return Err(Error::invalid(
                    "hyperbone",
                    format!("({}, {}) is not an edge", w[0], w[1]),
                ));
            }
        }
        Ok(Self { path })
    }

    pub fn path(&self) -> &[usize] {
        &self.path
    }

    pub fn order(&self) -> usize {
        self.path.len()
    }

    pub fn start(&self) -> usize {
        self.path[0]
    }

    pub fn end(&self) -> usize {
        *self.path.last().unwrap()
    }
}

impl fmt::Display for Hyperbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.path.iter().map(|j| j.to_string()).collect();
        write!(f, "{}", parts.join("-"))
    }
}

/// Every hyperbone up to an order cap, grouped per order and flattened in
/// canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperboneIndex {
    max_order: usize,
    by_order: Vec<Vec<Hyperbone>>,
    flat: Vec<Hyperbone>,
}

/// Contiguous run of one order inside the flat hyperbone axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OrderSlice {
    pub order: usize,
    pub start: usize,
    pub len: usize,
}

impl HyperboneIndex {
    fn from_buckets(max_order: usize, by_order: Vec<Vec<Hyperbone>>) -> Self {
        let flat = by_order.iter().flatten().cloned().collect();
        Self {
            max_order,
            by_order,
            flat,
        }
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    /// Total hyperbone count `M`.
    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn hyperbones(&self) -> &[Hyperbone] {
        &self.flat
    }

    pub fn of_order(&self, order: usize) -> &[Hyperbone] {
        if order < 2 || order > self.max_order {
            return &[];
        }
        &self.by_order[order - 2]
    }

    pub fn count(&self, order: usize) -> usize {
        self.of_order(order).len()
    }

    /// Non-empty per-order runs of the flat axis, ascending by order.
    pub fn slices(&self) -> Vec<OrderSlice> {
        let mut start = 0;
        let mut out = Vec::new();
        for (k, bucket) in self.by_order.iter().enumerate() {
            if !bucket.is_empty() {
                out.push(OrderSlice {
                    order: k + 2,
                    start,
                    len: bucket.len(),
                });
            }
            start += bucket.len();
        }
        out
    }

    /// One `index<TAB>path` line per hyperbone.
    pub fn legend(&self) -> String {
        self.flat
            .iter()
            .enumerate()
            .map(|(i, h)| format!("{i}\t{h}\n"))
            .collect()
    }
}

/// Hyperbone order cap, stated either in joints or in edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderCap {
    /// Maximum number of joints on a path.
    OrderJoints(usize),
    /// Maximum shortest-path distance in edges.
    SpdEdges(usize),
}

impl OrderCap {
    pub fn max_order_joints(self) -> usize {
        match self {
            OrderCap::OrderJoints(n) => n,
            OrderCap::SpdEdges(e) => e + 1,
        }
    }
}
