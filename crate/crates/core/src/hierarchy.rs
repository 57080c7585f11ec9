//! Label hierarchies: a rooted tree over class names.
//!
//! The on-disk form is a TAB-separated edge list. The first line declares the
//! root as `ROOT<TAB><name>`; every following line is `child<TAB>parent`.
//! Node ids are assigned densely in order of first appearance, and the leaf
//! order (the class order used everywhere downstream) is the id order
//! restricted to leaves.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const ROOT_TAG: &str = "ROOT";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HierarchyError {
    #[error("hierarchy file is empty")]
    Empty,
    #[error("line {line}: first line must be `ROOT<TAB><name>`")]
    MissingRoot { line: usize },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("`{child}` has two parents: `{first}` and `{second}`")]
    MultiParent {
        child: String,
        first: String,
        second: String,
    },
    #[error("cycle through `{node}`")]
    Cycle { node: String },
    #[error("`{node}` is not connected to the root")]
    Disconnected { node: String },
    #[error("unknown class `{0}`")]
    UnknownClass(String),
}

impl HierarchyError {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Empty => "Empty",
            Self::MissingRoot { .. } => "MissingRoot",
            Self::Malformed { .. } => "Malformed",
            Self::MultiParent { .. } => "MultiParent",
            Self::Cycle { .. } => "Cycle",
            Self::Disconnected { .. } => "Disconnected",
            Self::UnknownClass(_) => "UnknownClass",
        }
    }
}

/// Dense node index, stable for a given input file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Names are matched after trimming and case folding.
fn fold(name: &str) -> String {
    name.trim().to_lowercase()
}

/// Incremental construction of a [`LabelHierarchy`]. Used by the parser and
/// by code that generates hierarchies programmatically.
#[derive(Debug, Clone)]
pub struct HierarchyBuilder {
    names: Vec<String>,
    keys: HashMap<String, NodeId>,
    parent: Vec<Option<NodeId>>,
    edge_order: Vec<NodeId>,
}

impl HierarchyBuilder {
    pub fn new(root: &str) -> Self {
        let mut b = Self {
            names: Vec::new(),
            keys: HashMap::new(),
            parent: Vec::new(),
            edge_order: Vec::new(),
        };
        b.intern(root);
        b
    }

    fn intern(&mut self, name: &str) -> NodeId {
        let key = fold(name);
        if let Some(&id) = self.keys.get(&key) {
            return id;
        }
        let id = NodeId(self.names.len() as u32);
        self.names.push(name.trim().to_string());
        self.keys.insert(key, id);
        self.parent.push(None);
        id
    }

    /// Adds `child -> parent`. Repeating an identical edge is a no-op.
    pub fn edge(&mut self, child: &str, parent: &str) -> Result<&mut Self, HierarchyError> {
        if fold(child) == fold(parent) {
            return Err(HierarchyError::Cycle {
                node: child.trim().to_string(),
            });
        }
        let c = self.intern(child);
        let p = self.intern(parent);
        if c == NodeId(0) {
            // the root acquiring a parent closes a loop or makes a second root
            return Err(HierarchyError::Cycle {
                node: self.names[0].clone(),
            });
        }
        match self.parent[c.index()] {
            Some(existing) if existing == p => {}
            Some(existing) => {
                return Err(HierarchyError::MultiParent {
                    child: self.names[c.index()].clone(),
                    first: self.names[existing.index()].clone(),
                    second: self.names[p.index()].clone(),
                })
            }
            None => {
                self.parent[c.index()] = Some(p);
                self.edge_order.push(c);
            }
        }
        Ok(self)
    }

    pub fn build(self) -> Result<LabelHierarchy, HierarchyError> {
        let n = self.names.len();
        // 0 = unvisited, 1 = on the current walk, 2 = reaches the root
        let mut state = vec![0u8; n];
        state[0] = 2;
        let mut walk = Vec::new();
        for start in 0..n {
            walk.clear();
            let mut cur = start;
            loop {
                match state[cur] {
                    2 => break,
                    1 => {
                        return Err(HierarchyError::Cycle {
                            node: self.names[cur].clone(),
                        })
                    }
                    _ => {}
                }
                state[cur] = 1;
                walk.push(cur);
                match self.parent[cur] {
                    Some(p) => cur = p.index(),
                    None => {
                        return Err(HierarchyError::Disconnected {
                            node: self.names[cur].clone(),
                        })
                    }
                }
            }
            for &w in &walk {
                state[w] = 2;
            }
        }
        Ok(LabelHierarchy::from_parts(
            self.names,
            self.keys,
            self.parent,
            self.edge_order,
        ))
    }
}

/// Rooted tree of class names. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelHierarchy {
    names: Vec<String>,
    keys: HashMap<String, NodeId>,
    parent: Vec<Option<NodeId>>,
    children: Vec<Vec<NodeId>>,
    depth: Vec<u32>,
    height: Vec<u32>,
    leaves: Vec<NodeId>,
    leaf_pos: Vec<Option<usize>>,
    edge_order: Vec<NodeId>,
}

impl LabelHierarchy {
    fn from_parts(
        names: Vec<String>,
        keys: HashMap<String, NodeId>,
        parent: Vec<Option<NodeId>>,
        edge_order: Vec<NodeId>,
    ) -> Self {
        let n = names.len();
        let mut children = vec![Vec::new(); n];
        for (i, p) in parent.iter().enumerate() {
            if let Some(p) = p {
                children[p.index()].push(NodeId(i as u32));
            }
        }

        // BFS order from the root gives parents before children.
        let mut order = Vec::with_capacity(n);
        order.push(NodeId(0));
        let mut head = 0;
        while head < order.len() {
            let cur = order[head];
            head += 1;
            order.extend(children[cur.index()].iter().copied());
        }
        let mut depth = vec![0u32; n];
        for &v in &order[1..] {
            depth[v.index()] = depth[parent[v.index()].unwrap().index()] + 1;
        }
        let mut height = vec![0u32; n];
        for &v in order.iter().rev() {
            if let Some(p) = parent[v.index()] {
                let h = height[v.index()] + 1;
                if h > height[p.index()] {
                    height[p.index()] = h;
                }
            }
        }

        let mut leaves = Vec::new();
        let mut leaf_pos = vec![None; n];
        // a root-only tree has no classes
        for i in 1..n {
            if children[i].is_empty() {
                leaf_pos[i] = Some(leaves.len());
                leaves.push(NodeId(i as u32));
            }
        }

        Self {
            names,
            keys,
            parent,
            children,
            depth,
            height,
            leaves,
            leaf_pos,
            edge_order,
        }
    }

    /// Parses the TAB-separated edge-list format.
    pub fn parse(text: &str) -> Result<Self, HierarchyError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
            .filter(|(_, l)| !l.trim().is_empty());

        let (first_no, first) = lines.next().ok_or(HierarchyError::Empty)?;
        let root = match first.split_once('\t') {
            Some((tag, name)) if tag.trim() == ROOT_TAG && !name.trim().is_empty() => name,
            _ => return Err(HierarchyError::MissingRoot { line: first_no }),
        };

        let mut builder = HierarchyBuilder::new(root);
        for (no, line) in lines {
            let (child, parent) = line.split_once('\t').ok_or_else(|| HierarchyError::Malformed {
                line: no,
                reason: "expected `child<TAB>parent`".into(),
            })?;
            if child.trim().is_empty() || parent.trim().is_empty() {
                return Err(HierarchyError::Malformed {
                    line: no,
                    reason: "empty class name".into(),
                });
            }
            if parent.contains('\t') {
                return Err(HierarchyError::Malformed {
                    line: no,
                    reason: "more than two fields".into(),
                });
            }
            builder.edge(child, parent)?;
        }
        builder.build()
    }

    /// Canonical edge-list form: LF line endings, edges in declaration order.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("{ROOT_TAG}\t{}\n", self.names[0]);
        for &c in &self.edge_order {
            let p = self.parent[c.index()].expect("non-root node has a parent");
            out.push_str(&self.names[c.index()]);
            out.push('\t');
            out.push_str(&self.names[p.index()]);
            out.push('\n');
        }
        out
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.names.len() as u32).map(NodeId)
    }

    pub fn name(&self, n: NodeId) -> &str {
        &self.names[n.index()]
    }

    pub fn lookup(&self, name: &str) -> Option<NodeId> {
        self.keys.get(&fold(name)).copied()
    }

    pub fn require(&self, name: &str) -> Result<NodeId, HierarchyError> {
        self.lookup(name)
            .ok_or_else(|| HierarchyError::UnknownClass(name.to_string()))
    }

    pub fn parent(&self, n: NodeId) -> Option<NodeId> {
        self.parent[n.index()]
    }

    pub fn children(&self, n: NodeId) -> &[NodeId] {
        &self.children[n.index()]
    }

    pub fn is_leaf(&self, n: NodeId) -> bool {
        self.leaf_pos[n.index()].is_some()
    }

    /// The K downstream classes, in leaf order.
    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    pub fn leaf_names(&self) -> Vec<&str> {
        self.leaves.iter().map(|&l| self.name(l)).collect()
    }

    /// Position of a leaf in [`leaves`](Self::leaves).
    pub fn leaf_position(&self, n: NodeId) -> Option<usize> {
        self.leaf_pos[n.index()]
    }

    /// Position of a named class in leaf order.
    pub fn class_index(&self, name: &str) -> Result<usize, HierarchyError> {
        self.lookup(name)
            .and_then(|n| self.leaf_position(n))
            .ok_or_else(|| HierarchyError::UnknownClass(name.to_string()))
    }

    pub fn depth(&self, n: NodeId) -> u32 {
        self.depth[n.index()]
    }

    /// Longest downward path to a leaf; 0 for leaves.
    pub fn node_height(&self, n: NodeId) -> u32 {
        self.height[n.index()]
    }

    /// Height of the whole tree.
    pub fn height(&self) -> u32 {
        self.height[0]
    }

    pub fn lca(&self, a: NodeId, b: NodeId) -> NodeId {
        let (mut a, mut b) = (a, b);
        while self.depth(a) > self.depth(b) {
            a = self.parent[a.index()].unwrap();
        }
        while self.depth(b) > self.depth(a) {
            b = self.parent[b.index()].unwrap();
        }
        while a != b {
            a = self.parent[a.index()].unwrap();
            b = self.parent[b.index()].unwrap();
        }
        a
    }

    /// Height of the lowest common ancestor.
    pub fn hierarchical_distance(&self, a: NodeId, b: NodeId) -> u32 {
        self.node_height(self.lca(a, b))
    }

    /// Siblings of `n` in id order.
    pub fn siblings(&self, n: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        let sibs: &[NodeId] = match self.parent(n) {
            Some(p) => &self.children[p.index()],
            None => &[],
        };
        sibs.iter().copied().filter(move |&s| s != n)
    }

    /// Leaves sharing `y`'s parent, excluding `y`.
    pub fn leaf_peers(&self, y: NodeId) -> Vec<NodeId> {
        self.siblings(y).filter(|&s| self.is_leaf(s)).collect()
    }

    /// Proper ancestors excluding the root, nearest first.
    pub fn ancestor_path(&self, y: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut cur = self.parent(y);
        while let Some(a) = cur {
            if a == self.root() {
                break;
            }
            out.push(a);
            cur = self.parent(a);
        }
        out
    }

    /// For each non-root ancestor (nearest first), that ancestor's siblings.
    pub fn ancestor_peers(&self, y: NodeId) -> Vec<(NodeId, Vec<NodeId>)> {
        self.ancestor_path(y)
            .into_iter()
            .map(|a| (a, self.siblings(a).collect()))
            .collect()
    }

    /// Pairwise hierarchical distances between leaves, in leaf order.
    pub fn distance_matrix(&self) -> DistanceMatrix {
        let k = self.leaves.len();
        let mut data = vec![0u32; k * k];
        for i in 0..k {
            for j in (i + 1)..k {
                let d = self.hierarchical_distance(self.leaves[i], self.leaves[j]);
                data[i * k + j] = d;
                data[j * k + i] = d;
            }
        }
        DistanceMatrix {
            k,
            height: self.height(),
            data,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DistanceMatrixError {
    #[error("distance matrix is not square: {rows} rows, row {row} has {len} entries")]
    NotSquare { rows: usize, row: usize, len: usize },
    #[error("distance matrix must be symmetric with a zero diagonal")]
    NotSymmetric,
}

/// K x K hierarchical distances between leaves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceMatrix {
    k: usize,
    height: u32,
    data: Vec<u32>,
}

impl DistanceMatrix {
    /// Builds a matrix from explicit rows, e.g. for hand-made cost tables.
    /// The height bound is taken as the largest entry.
    pub fn from_rows(rows: Vec<Vec<u32>>) -> Result<Self, DistanceMatrixError> {
        let k = rows.len();
        let mut data = Vec::with_capacity(k * k);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != k {
                return Err(DistanceMatrixError::NotSquare {
                    rows: k,
                    row: i,
                    len: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        for i in 0..k {
            if data[i * k + i] != 0 {
                return Err(DistanceMatrixError::NotSymmetric);
            }
            for j in 0..i {
                if data[i * k + j] != data[j * k + i] {
                    return Err(DistanceMatrixError::NotSymmetric);
                }
            }
        }
        let height = data.iter().copied().max().unwrap_or(0);
        Ok(Self { k, height, data })
    }

    /// Every pair of distinct classes at distance 1.
    pub fn flat(k: usize) -> Self {
        let mut data = vec![1u32; k * k];
        for i in 0..k {
            data[i * k + i] = 0;
        }
        Self {
            k,
            height: u32::from(k > 1),
            data,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Upper bound on entries (the tree height).
    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.data[i * self.k + j]
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.data[i * self.k..(i + 1) * self.k]
    }
}
