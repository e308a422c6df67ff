//! Groupings of covariates, co-data matrices and random group splits.
//!
//! A [`Grouping`] is a collection of (possibly overlapping) covariate index
//! sets that together cover all `p` covariates. Its [`CoDataMatrix`] spreads
//! each covariate's unit weight evenly over the groups it belongs to.
//! Continuous co-data is turned into a hierarchy of nested groups by
//! recursive median splits ([`build_hierarchy_from_continuous`]).

use std::collections::{BTreeMap, HashMap, VecDeque};

use log::warn;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EcpcError, Result};

/// Parent links over the groups of a grouping. Node `i` stands for group
/// `node_group[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierTree {
    pub node_group: Vec<usize>,
    pub parent: Vec<Option<usize>>,
}

impl HierTree {
    pub fn len(&self) -> usize {
        self.node_group.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_group.is_empty()
    }

    pub fn root(&self) -> usize {
        self.parent.iter().position(|p| p.is_none()).expect("validated tree has a root")
    }

    pub fn children(&self, node: usize) -> Vec<usize> {
        (0..self.len()).filter(|&c| self.parent[c] == Some(node)).collect()
    }

    pub fn leaves(&self) -> Vec<usize> {
        (0..self.len()).filter(|&v| self.children(v).is_empty()).collect()
    }

    /// Nodes on the path from the root down to `node`, root first.
    pub fn path_to(&self, node: usize) -> Vec<usize> {
        let mut path = vec![node];
        let mut cur = node;
        while let Some(p) = self.parent[cur] {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    pub fn node_of_group(&self, group: usize) -> Option<usize> {
        self.node_group.iter().position(|&g| g == group)
    }

    /// Whether `selected` (indexed by node) contains the parent of every selected node.
    pub fn is_ancestor_closed(&self, selected: &[bool]) -> bool {
        (0..self.len()).all(|v| !selected[v] || self.parent[v].map_or(true, |p| selected[p]))
    }

    /// Depth-first preorder with children visited in index order.
    pub fn preorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        let mut stack = vec![self.root()];
        while let Some(v) = stack.pop() {
            out.push(v);
            let mut ch = self.children(v);
            ch.reverse();
            stack.extend(ch);
        }
        out
    }
}

/// A collection of covariate groups (0-based, sorted, duplicate free).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grouping {
    pub name: String,
    pub p: usize,
    pub groups: Vec<Vec<usize>>,
    pub group_names: Vec<String>,
    pub tree: Option<HierTree>,
}

impl Grouping {
    /// Validate and build a grouping. Groups are sorted on ingest; duplicate
    /// or out-of-range indices and uncovered covariates are rejected.
    pub fn new(name: impl Into<String>, p: usize, groups: Vec<Vec<usize>>) -> Result<Self> {
        let names = (0..groups.len()).map(|g| format!("G{}", g + 1)).collect();
        Self::with_names(name, p, groups, names, None)
    }

    pub fn with_names(
        name: impl Into<String>,
        p: usize,
        groups: Vec<Vec<usize>>,
        group_names: Vec<String>,
        tree: Option<HierTree>,
    ) -> Result<Self> {
        let g = Self::unchecked(name, p, groups, group_names, tree)?;
        if let Some(k) = g.uncovered().first() {
            return Err(EcpcError::Coverage { covariate: k + 1, grouping: g.name.clone() });
        }
        if let Some(t) = &g.tree {
            g.validate_tree(t)?;
        }
        Ok(g)
    }

    /// Like [`Grouping::with_names`] but without the coverage requirement.
    /// Used for reduced groupings after group selection.
    pub(crate) fn unchecked(
        name: impl Into<String>,
        p: usize,
        mut groups: Vec<Vec<usize>>,
        group_names: Vec<String>,
        tree: Option<HierTree>,
    ) -> Result<Self> {
        let name = name.into();
        if group_names.len() != groups.len() {
            return Err(EcpcError::dim("group names and groups differ in length"));
        }
        for (gi, grp) in groups.iter_mut().enumerate() {
            if grp.is_empty() {
                return Err(EcpcError::invalid(format!("group '{}' of '{}' is empty", group_names[gi], name)));
            }
            grp.sort_unstable();
            if grp.windows(2).any(|w| w[0] == w[1]) {
                return Err(EcpcError::invalid(format!(
                    "group '{}' of '{}' lists a covariate twice",
                    group_names[gi], name
                )));
            }
            if let Some(&k) = grp.last() {
                if k >= p {
                    return Err(EcpcError::invalid(format!(
                        "group '{}' of '{}' references covariate {} but p = {}",
                        group_names[gi],
                        name,
                        k + 1,
                        p
                    )));
                }
            }
        }
        Ok(Self { name, p, groups, group_names, tree })
    }

    fn validate_tree(&self, t: &HierTree) -> Result<()> {
        if t.parent.len() != t.node_group.len() {
            return Err(EcpcError::invalid("tree parent and node_group lengths differ"));
        }
        if t.node_group.iter().any(|&g| g >= self.groups.len()) {
            return Err(EcpcError::invalid("tree references a group outside the grouping"));
        }
        let roots = t.parent.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return Err(EcpcError::invalid(format!("hierarchy must have exactly one root, found {roots}")));
        }
        for v in 0..t.len() {
            // walk up to detect cycles
            let mut cur = v;
            let mut steps = 0;
            while let Some(p) = t.parent[cur] {
                if p >= t.len() {
                    return Err(EcpcError::invalid("tree parent index out of range"));
                }
                cur = p;
                steps += 1;
                if steps > t.len() {
                    return Err(EcpcError::invalid("hierarchy contains a cycle"));
                }
            }
        }
        for v in 0..t.len() {
            let members = &self.groups[t.node_group[v]];
            if let Some(p) = t.parent[v] {
                let parent = &self.groups[t.node_group[p]];
                if !is_subset(members, parent) {
                    return Err(EcpcError::invalid(format!(
                        "group '{}' is not a subset of its parent '{}'",
                        self.group_names[t.node_group[v]],
                        self.group_names[t.node_group[p]]
                    )));
                }
            }
            let ch = t.children(v);
            if !ch.is_empty() {
                let mut union: Vec<usize> = ch.iter().flat_map(|&c| self.groups[t.node_group[c]].iter().copied()).collect();
                let total = union.len();
                union.sort_unstable();
                union.dedup();
                if union.len() != total || union != *members {
                    return Err(EcpcError::invalid(format!(
                        "children of '{}' do not partition it",
                        self.group_names[t.node_group[v]]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    /// Per-covariate list of groups containing it.
    pub fn memberships(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.p];
        for (g, grp) in self.groups.iter().enumerate() {
            for &k in grp {
                m[k].push(g);
            }
        }
        m
    }

    pub fn uncovered(&self) -> Vec<usize> {
        self.memberships()
            .iter()
            .enumerate()
            .filter(|(_, m)| m.is_empty())
            .map(|(k, _)| k)
            .collect()
    }

    pub fn is_disjoint(&self) -> bool {
        self.memberships().iter().all(|m| m.len() <= 1)
    }

    /// Keep only the groups in `keep` (in that order). Covariates may become
    /// uncovered; the tree is kept when the kept nodes stay ancestor-closed.
    pub fn restrict(&self, keep: &[usize]) -> Result<Self> {
        let groups = keep.iter().map(|&g| self.groups[g].clone()).collect();
        let names = keep.iter().map(|&g| self.group_names[g].clone()).collect();
        let tree = self.tree.as_ref().and_then(|t| {
            let new_index: HashMap<usize, usize> = keep.iter().enumerate().map(|(i, &g)| (g, i)).collect();
            let nodes: Vec<usize> = (0..t.len()).filter(|&v| new_index.contains_key(&t.node_group[v])).collect();
            let node_pos: HashMap<usize, usize> = nodes.iter().enumerate().map(|(i, &v)| (v, i)).collect();
            let mut parent = Vec::with_capacity(nodes.len());
            for &v in &nodes {
                match t.parent[v] {
                    None => parent.push(None),
                    Some(pv) => parent.push(Some(*node_pos.get(&pv)?)),
                }
            }
            if nodes.is_empty() || parent.iter().filter(|p| p.is_none()).count() != 1 {
                return None;
            }
            Some(HierTree { node_group: nodes.iter().map(|&v| new_index[&t.node_group[v]]).collect(), parent })
        });
        Self::unchecked(self.name.clone(), self.p, groups, names, tree)
    }

    /// Parse the JSON grouping format: an object mapping group name to an
    /// array of 1-based covariate indices, plus an optional `"parent"` object
    /// mapping child group name to parent group name.
    pub fn from_json_str(name: impl Into<String>, p: usize, text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| EcpcError::invalid(format!("grouping JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| EcpcError::invalid("grouping JSON must be an object"))?;
        let mut groups = Vec::new();
        let mut names = Vec::new();
        let mut parents: Option<&serde_json::Map<String, serde_json::Value>> = None;
        for (key, val) in obj {
            if key == "parent" {
                parents = Some(
                    val.as_object()
                        .ok_or_else(|| EcpcError::invalid("\"parent\" must map group names to group names"))?,
                );
                continue;
            }
            let arr = val
                .as_array()
                .ok_or_else(|| EcpcError::invalid(format!("group '{key}' must be an array of indices")))?;
            let mut grp = Vec::with_capacity(arr.len());
            for v in arr {
                let idx = v
                    .as_u64()
                    .filter(|&i| i >= 1)
                    .ok_or_else(|| EcpcError::invalid(format!("group '{key}': indices must be positive integers")))?;
                grp.push(idx as usize - 1);
            }
            groups.push(grp);
            names.push(key.clone());
        }
        let tree = match parents {
            None => None,
            Some(map) => {
                let pos: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
                let mut parent = vec![None; names.len()];
                for (child, par) in map {
                    let c = *pos
                        .get(child.as_str())
                        .ok_or_else(|| EcpcError::invalid(format!("parent map names unknown group '{child}'")))?;
                    let pname = par
                        .as_str()
                        .ok_or_else(|| EcpcError::invalid("parent names must be strings"))?;
                    let pidx = *pos
                        .get(pname)
                        .ok_or_else(|| EcpcError::invalid(format!("parent map names unknown group '{pname}'")))?;
                    parent[c] = Some(pidx);
                }
                Some(HierTree { node_group: (0..names.len()).collect(), parent })
            }
        };
        Self::with_names(name, p, groups, names, tree)
    }

    /// Serialise to the JSON grouping format (1-based indices).
    pub fn to_json_value(&self) -> serde_json::Value {
        let mut obj = serde_json::Map::new();
        for (g, grp) in self.groups.iter().enumerate() {
            obj.insert(
                self.group_names[g].clone(),
                serde_json::Value::from(grp.iter().map(|&k| k + 1).collect::<Vec<_>>()),
            );
        }
        if let Some(t) = &self.tree {
            let mut par = serde_json::Map::new();
            for v in 0..t.len() {
                if let Some(pv) = t.parent[v] {
                    par.insert(
                        self.group_names[t.node_group[v]].clone(),
                        serde_json::Value::from(self.group_names[t.node_group[pv]].clone()),
                    );
                }
            }
            obj.insert("parent".into(), serde_json::Value::Object(par));
        }
        serde_json::Value::Object(obj)
    }
}

fn is_subset(small: &[usize], big: &[usize]) -> bool {
    let mut j = 0;
    for &s in small {
        while j < big.len() && big[j] < s {
            j += 1;
        }
        if j == big.len() || big[j] != s {
            return false;
        }
    }
    true
}

/// `p × G` matrix with entry `1/|I_k|` when covariate `k` is in group `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoDataMatrix {
    pub entries: DMatrix<f64>,
    pub membership_counts: Vec<usize>,
}

impl CoDataMatrix {
    pub fn p(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n_groups(&self) -> usize {
        self.entries.ncols()
    }

    /// `Z γ`: per-covariate average of the weights of its groups.
    pub fn apply(&self, gamma: &[f64]) -> Vec<f64> {
        assert_eq!(gamma.len(), self.n_groups());
        (0..self.p())
            .map(|k| (0..self.n_groups()).map(|g| self.entries[(k, g)] * gamma[g]).sum())
            .collect()
    }
}

pub fn build_codata_matrix(grouping: &Grouping) -> Result<CoDataMatrix> {
    if let Some(k) = grouping.uncovered().first() {
        return Err(EcpcError::Coverage { covariate: k + 1, grouping: grouping.name.clone() });
    }
    Ok(codata_matrix_partial(grouping))
}

/// Co-data matrix that tolerates uncovered covariates (zero rows).
pub(crate) fn codata_matrix_partial(grouping: &Grouping) -> CoDataMatrix {
    let memberships = grouping.memberships();
    let counts: Vec<usize> = memberships.iter().map(Vec::len).collect();
    let mut z = DMatrix::zeros(grouping.p, grouping.n_groups());
    for (k, groups) in memberships.iter().enumerate() {
        for &g in groups {
            z[(k, g)] = 1.0 / counts[k] as f64;
        }
    }
    CoDataMatrix { entries: z, membership_counts: counts }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyOptions {
    pub min_group_size: usize,
    /// Split the root at this fixed value before median splitting.
    pub initial_threshold: Option<f64>,
    /// Only the child with the lowest values is split further.
    pub recurse_low_only: bool,
}

impl HierarchyOptions {
    pub fn new(min_group_size: usize) -> Self {
        Self { min_group_size, initial_threshold: None, recurse_low_only: false }
    }
}

/// Build nested groups from continuous co-data by recursive median splits.
///
/// Non-finite values (NaN) mark missing co-data; those covariates form a
/// separate trailing group named `"missing"` that is not part of the tree.
/// Nodes are numbered breadth-first with the low child before the high one.
pub fn build_hierarchy_from_continuous(
    name: impl Into<String>,
    values: &[f64],
    opts: &HierarchyOptions,
) -> Result<(Grouping, HierTree)> {
    let name = name.into();
    let p = values.len();
    if p == 0 {
        return Err(EcpcError::invalid("continuous co-data is empty"));
    }
    if opts.min_group_size == 0 {
        return Err(EcpcError::invalid("min_group_size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..p).filter(|&k| values[k].is_finite()).collect();
    let missing: Vec<usize> = (0..p).filter(|&k| !values[k].is_finite()).collect();
    if order.is_empty() {
        return Err(EcpcError::invalid("continuous co-data has no finite values"));
    }
    if opts.min_group_size > order.len() {
        return Err(EcpcError::invalid(format!(
            "min_group_size {} exceeds the number of covariates {}",
            opts.min_group_size,
            order.len()
        )));
    }
    // stable: ties keep original index order
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));

    // (members in value order, parent node, path label, may_split)
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    let mut parent: Vec<Option<usize>> = Vec::new();
    let mut queue: VecDeque<(Vec<usize>, Option<usize>, String, bool)> = VecDeque::new();

    groups.push(order.clone());
    names.push("1".to_string());
    parent.push(None);

    let root_children: Option<(Vec<usize>, Vec<usize>)> = match opts.initial_threshold {
        Some(t) => {
            let cut = order.partition_point(|&k| values[k] < t);
            if cut == 0 || cut == order.len() {
                warn!("threshold {t} does not split co-data '{name}'; using median splits from the root");
                None
            } else {
                Some((order[..cut].to_vec(), order[cut..].to_vec()))
            }
        }
        None => None,
    };
    match root_children {
        Some((low, high)) => {
            queue.push_back((low, Some(0), "1.1".into(), true));
            queue.push_back((high, Some(0), "1.2".into(), false));
        }
        None => {
            if let Some((low, high)) = median_split(&order, opts.min_group_size) {
                let recurse_high = !opts.recurse_low_only;
                queue.push_back((low, Some(0), "1.1".into(), true));
                queue.push_back((high, Some(0), "1.2".into(), recurse_high));
            }
        }
    }
    while let Some((members, par, label, may_split)) = queue.pop_front() {
        let node = groups.len();
        groups.push(members.clone());
        names.push(label.clone());
        parent.push(par);
        if !may_split {
            continue;
        }
        if let Some((low, high)) = median_split(&members, opts.min_group_size) {
            queue.push_back((low, Some(node), format!("{label}.1"), true));
            queue.push_back((high, Some(node), format!("{label}.2"), !opts.recurse_low_only));
        }
    }
    let tree = HierTree { node_group: (0..groups.len()).collect(), parent };
    if !missing.is_empty() {
        groups.push(missing);
        names.push("missing".into());
    }
    let grouping = Grouping::with_names(name, p, groups, names, Some(tree.clone()))?;
    Ok((grouping, tree))
}

/// Split value-ordered members after position `ceil(size/2)`; `None` when a
/// child would fall below the minimum size.
fn median_split(members: &[usize], min_size: usize) -> Option<(Vec<usize>, Vec<usize>)> {
    let n = members.len();
    let cut = n.div_ceil(2);
    if n - cut < min_size || n < 2 {
        return None;
    }
    Some((members[..cut].to_vec(), members[cut..].to_vec()))
}

/// Random in/out halves of every group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSplit {
    pub in_groups: Vec<Vec<usize>>,
    pub out_groups: Vec<Vec<usize>>,
    pub seed: u64,
}

impl GroupSplit {
    /// The split with every group entirely in the in-part.
    pub fn degenerate(grouping: &Grouping) -> Self {
        Self {
            in_groups: grouping.groups.clone(),
            out_groups: vec![Vec::new(); grouping.n_groups()],
            seed: 0,
        }
    }
}

pub fn split_groups_random(grouping: &Grouping, seed: u64) -> GroupSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_groups = Vec::with_capacity(grouping.n_groups());
    let mut out_groups = Vec::with_capacity(grouping.n_groups());
    for (g, grp) in grouping.groups.iter().enumerate() {
        if grp.len() < 2 {
            warn!("group '{}' of '{}' has a single member; kept whole in the in-part", grouping.group_names[g], grouping.name);
        }
        let mut shuffled = grp.clone();
        shuffled.shuffle(&mut rng);
        let cut = grp.len().div_ceil(2);
        let mut a = shuffled[..cut].to_vec();
        let mut b = shuffled[cut..].to_vec();
        a.sort_unstable();
        b.sort_unstable();
        in_groups.push(a);
        out_groups.push(b);
    }
    GroupSplit { in_groups, out_groups, seed }
}

/// Sizes of the groups in breadth-first node order, handy for summaries.
pub fn node_sizes(grouping: &Grouping, tree: &HierTree) -> BTreeMap<usize, usize> {
    (0..tree.len()).map(|v| (v, grouping.groups[tree.node_group[v]].len())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(z: &CoDataMatrix) -> Vec<Vec<f64>> {
        (0..z.p()).map(|k| z.entries.row(k).iter().copied().collect()).collect()
    }

    #[test]
    fn disjoint_indicator_matrix() {
        let g = Grouping::new("d", 4, vec![vec![0, 1], vec![2, 3]]).unwrap();
        let z = build_codata_matrix(&g).unwrap();
        assert_eq!(rows(&z), vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]);
    }

    #[test]
    fn overlapping_rows_average() {
        let g = Grouping::new("o", 3, vec![vec![0, 1], vec![1, 2]]).unwrap();
        let z = build_codata_matrix(&g).unwrap();
        assert_eq!(rows(&z)[1], vec![0.5, 0.5]);
        assert_eq!(z.membership_counts, vec![1, 2, 1]);
    }

    #[test]
    fn single_group_is_column_of_ones() {
        let g = Grouping::new("all", 5, vec![(0..5).collect()]).unwrap();
        let z = build_codata_matrix(&g).unwrap();
        assert_eq!(z.entries.shape(), (5, 1));
        assert!(z.entries.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn coverage_error_names_covariate() {
        let err = Grouping::new("gap", 4, vec![vec![0, 1], vec![3]]).unwrap_err();
        match err {
            EcpcError::Coverage { covariate, .. } => assert_eq!(covariate, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicates_and_bounds_rejected() {
        assert!(Grouping::new("dup", 3, vec![vec![0, 0, 1, 2]]).is_err());
        assert!(Grouping::new("oob", 3, vec![vec![0, 1, 2, 3]]).is_err());
        assert!(Grouping::new("empty", 3, vec![vec![0, 1, 2], vec![]]).is_err());
    }

    #[test]
    fn hierarchy_eight_values() {
        let vals = [0.8, 0.1, 0.5, 0.3, 0.9, 0.2, 0.7, 0.4];
        let (g, t) = build_hierarchy_from_continuous("c", &vals, &HierarchyOptions::new(2)).unwrap();
        assert_eq!(g.group_sizes(), vec![8, 4, 4, 2, 2, 2, 2]);
        assert_eq!(t.len(), 7);
        assert_eq!(t.leaves().len(), 4);
        // low half holds the four smallest values
        assert_eq!(g.groups[1], vec![1, 3, 5, 7]);
    }

    #[test]
    fn hierarchy_ties_broken_by_index() {
        let vals = [1.0; 8];
        let (g, _) = build_hierarchy_from_continuous("tie", &vals, &HierarchyOptions::new(2)).unwrap();
        assert_eq!(g.groups[1], vec![0, 1, 2, 3]);
        assert_eq!(g.groups[2], vec![4, 5, 6, 7]);
    }

    #[test]
    fn hierarchy_threshold_mode() {
        // 60 values below 0.5, 40 above
        let vals: Vec<f64> = (0..100).map(|i| if i < 60 { i as f64 / 200.0 } else { 0.5 + i as f64 / 1000.0 }).collect();
        let opts = HierarchyOptions { min_group_size: 20, initial_threshold: Some(0.5), recurse_low_only: true };
        let (g, t) = build_hierarchy_from_continuous("fdr", &vals, &opts).unwrap();
        assert_eq!(g.group_sizes(), vec![100, 60, 40, 30, 30]);
        assert_eq!(t.parent, vec![None, Some(0), Some(0), Some(1), Some(1)]);
    }

    #[test]
    fn hierarchy_low_only_recursion() {
        let vals: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let opts = HierarchyOptions { min_group_size: 2, initial_threshold: None, recurse_low_only: true };
        let (g, _) = build_hierarchy_from_continuous("c", &vals, &opts).unwrap();
        assert_eq!(g.group_sizes(), vec![16, 8, 8, 4, 4, 2, 2]);
        assert_eq!(g.groups[5], vec![0, 1]);
    }

    #[test]
    fn hierarchy_missing_values_get_own_group() {
        let vals = [0.1, f64::NAN, 0.3, 0.2, f64::NAN, 0.4];
        let (g, t) = build_hierarchy_from_continuous("m", &vals, &HierarchyOptions::new(2)).unwrap();
        assert_eq!(g.groups.last().unwrap(), &vec![1, 4]);
        assert_eq!(g.group_names.last().unwrap(), "missing");
        assert!(t.node_of_group(g.n_groups() - 1).is_none());
    }

    #[test]
    fn hierarchy_errors() {
        assert!(build_hierarchy_from_continuous("e", &[], &HierarchyOptions::new(1)).is_err());
        assert!(build_hierarchy_from_continuous("e", &[1.0, 2.0], &HierarchyOptions::new(3)).is_err());
    }

    #[test]
    fn split_sizes_follow_ceil_floor() {
        let g = Grouping::new("s", 11, vec![(0..6).collect(), (6..11).collect()]).unwrap();
        let s = split_groups_random(&g, 7);
        assert_eq!((s.in_groups[0].len(), s.out_groups[0].len()), (3, 3));
        assert_eq!((s.in_groups[1].len(), s.out_groups[1].len()), (3, 2));
        assert_eq!(s, split_groups_random(&g, 7));
    }

    #[test]
    fn singleton_group_kept_in() {
        let g = Grouping::new("s", 3, vec![vec![0], vec![1, 2]]).unwrap();
        let s = split_groups_random(&g, 1);
        assert_eq!(s.in_groups[0], vec![0]);
        assert!(s.out_groups[0].is_empty());
    }

    #[test]
    fn json_roundtrip_with_parent() {
        let text = r#"{"all": [1,2,3,4], "low": [1,2], "high": [3,4], "parent": {"low": "all", "high": "all"}}"#;
        let g = Grouping::from_json_str("j", 4, text).unwrap();
        assert_eq!(g.group_names, vec!["all", "low", "high"]);
        assert_eq!(g.tree.as_ref().unwrap().parent, vec![None, Some(0), Some(0)]);
        let back = Grouping::from_json_str("j", 4, &g.to_json_value().to_string()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn json_rejects_non_partitioning_children() {
        let text = r#"{"all": [1,2,3,4], "low": [1,2], "parent": {"low": "all"}}"#;
        assert!(Grouping::from_json_str("j", 4, text).is_err());
    }

    #[test]
    fn restrict_keeps_ancestor_closed_tree() {
        let vals: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let (g, _) = build_hierarchy_from_continuous("c", &vals, &HierarchyOptions::new(2)).unwrap();
        let r = g.restrict(&[0, 1, 2]).unwrap();
        assert_eq!(r.tree.unwrap().parent, vec![None, Some(0), Some(0)]);
        let uncovered = g.restrict(&[1]).unwrap().uncovered();
        assert_eq!(uncovered, vec![4, 5, 6, 7]);
    }
}
