//! Body graph, hop distances between joints, and distance-to-root groups.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Joint names of the 17-joint Human3.6M layout, in index order.
pub const H36M_JOINTS: [&str; 17] = [
    "pelvis",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hip",
    "l_knee",
    "l_ankle",
    "spine",
    "thorax",
    "neck",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
];

/// Parent-child bones of the 17-joint tree, rooted at the pelvis.
pub const H36M_EDGES: [(usize, usize); 16] = [
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
];

pub const DEFAULT_GROUPS: usize = 5;

/// A validated, connected joint graph.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SkeletonDoc", into = "SkeletonDoc")]
pub struct Skeleton {
    num_joints: usize,
    edges: Vec<(usize, usize)>,
    root: usize,
}

#[derive(Serialize, Deserialize)]
struct SkeletonDoc {
    num_joints: usize,
    root: usize,
    edges: Vec<[usize; 2]>,
}

impl TryFrom<SkeletonDoc> for Skeleton {
    type Error = Error;

    fn try_from(doc: SkeletonDoc) -> Result<Self> {
        let edges: Vec<_> = doc.edges.iter().map(|e| (e[0], e[1])).collect();
        Skeleton::new(doc.num_joints, &edges, doc.root)
    }
}

impl From<Skeleton> for SkeletonDoc {
    fn from(s: Skeleton) -> Self {
        SkeletonDoc {
            num_joints: s.num_joints,
            root: s.root,
            edges: s.edges.iter().map(|&(a, b)| [a, b]).collect(),
        }
    }
}

impl Skeleton {
    pub fn new(num_joints: usize, edges: &[(usize, usize)], root: usize) -> Result<Self> {
        let check = |index: usize| {
            if index >= num_joints {
                Err(Error::IndexOutOfRange { index, num_joints })
            } else {
                Ok(())
            }
        };
        check(root)?;
        let mut seen = std::collections::HashSet::new();
        for &(a, b) in edges {
            check(a)?;
            check(b)?;
            if a == b {
                return Err(Error::SelfLoop(a));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::DuplicateEdge(a, b));
            }
        }
        let s = Self {
            num_joints,
            edges: edges.to_vec(),
            root,
        };
        let hops = s.bfs(root);
        if let Some(j) = hops.iter().position(Option::is_none) {
            return Err(Error::DisconnectedGraph(j));
        }
        Ok(s)
    }

    /// The 17-joint Human3.6M tree with the pelvis as root.
    pub fn h36m() -> Self {
        Self::new(17, &H36M_EDGES, 0).expect("canonical skeleton is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn num_joints(&self) -> usize {
        self.num_joints
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn root(&self) -> usize {
        self.root
    }

    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_joints];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    fn bfs(&self, source: usize) -> Vec<Option<u32>> {
        let adj = self.adjacency();
        let mut hops = vec![None; self.num_joints];
        hops[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            let d = hops[u].unwrap();
            for &v in &adj[u] {
                if hops[v].is_none() {
                    hops[v] = Some(d + 1);
                    queue.push_back(v);
                }
            }
        }
        hops
    }

    /// Hop counts between every pair of joints.
    pub fn distance_matrix(&self) -> DistMatrix {
        let n = self.num_joints;
        let mut d = vec![0u32; n * n];
        for i in 0..n {
            for (j, h) in self.bfs(i).into_iter().enumerate() {
                d[i * n + j] = h.expect("connected by construction");
            }
        }
        DistMatrix { n, d }
    }

    /// Parent of every joint in the BFS tree from the root (`None` for the root).
    pub fn parents(&self) -> Vec<Option<usize>> {
        let adj = self.adjacency();
        let mut parent = vec![None; self.num_joints];
        let mut visited = vec![false; self.num_joints];
        visited[self.root] = true;
        let mut queue = VecDeque::from([self.root]);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !visited[v] {
                    visited[v] = true;
                    parent[v] = Some(u);
                    queue.push_back(v);
                }
            }
        }
        parent
    }
}

/// Symmetric matrix of shortest-path hop counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DistMatrix {
    n: usize,
    d: Vec<u32>,
}

impl DistMatrix {
    /// Wraps a raw row-major `n×n` hop table.
    pub fn from_raw(n: usize, d: Vec<u32>) -> Self {
        assert_eq!(d.len(), n * n);
        Self { n, d }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.d[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.d
    }

    /// Relabels joints: entry `(i, j)` of the result is `(perm[i], perm[j])` here.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n;
        let d = (0..n * n).map(|k| self.get(perm[k / n], perm[k % n])).collect();
        Self { n, d }
    }
}

/// Per-joint group index by hop distance to the root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub group: Vec<usize>,
    pub num_groups: usize,
}

/// `group[i] = min(d[i][root], num_groups - 1)`; joints farther than the last
/// group share it.
pub fn assign_groups(d: &DistMatrix, root: usize, num_groups: usize) -> GroupAssignment {
    assert!(num_groups >= 1, "need at least one group");
    let group = (0..d.len())
        .map(|i| (d.get(i, root) as usize).min(num_groups - 1))
        .collect();
    GroupAssignment { group, num_groups }
}

impl GroupAssignment {
    pub fn members(&self, g: usize) -> impl Iterator<Item = usize> + '_ {
        self.group
            .iter()
            .enumerate()
            .filter(move |&(_, &x)| x == g)
            .map(|(i, _)| i)
    }
}
