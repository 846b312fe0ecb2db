//! Coupled row/column geometry: affinity kernels, Fiedler bipartitioning,
//! partition trees, tree-metric EMD, dual affinities and the Questionnaire
//! iteration.
//!
//! A [`PartitionTree`] stores a sequence of increasingly refined partitions
//! of an index set. Folders at every level are contiguous ranges over a leaf
//! ordering, so restricting a vector to a folder is a slice. Trees are built
//! by recursive spectral bipartitioning of an affinity matrix and padded so
//! all singleton leaves sit at the deepest level.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, EowsError, Result};
use crate::matcore::Mat;

/// One folder of a partition level: the leaf positions `start..end`, its
/// parent in the previous level and its children in the next.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Folder {
    pub start: usize,
    pub end: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
}

impl Folder {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// Nested partitions `V^1..V^L` of `0..N`, with `V^1` the single root folder
/// and `V^L` all singletons. `leaf_order[pos]` maps a leaf position back to
/// the original index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionTree {
    levels: Vec<Vec<Folder>>,
    leaf_order: Vec<usize>,
}

/// Weights of the multiscale tree metric: folder weight `2^(-a l) * |X|^b`
/// with `l` the 1-based level.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EmdParams {
    pub a: f64,
    pub b: f64,
    pub eps_factor: f64,
}

impl Default for EmdParams {
    fn default() -> Self {
        EmdParams { a: 0.0, b: 1.0, eps_factor: 1.0 }
    }
}

/// Which axis the Questionnaire organizes first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StartAxis {
    Columns,
    Rows,
}

/// Symmetric nonnegative affinity matrix with unit diagonal.
#[derive(Debug, Clone)]
pub struct Affinity {
    m: Mat,
}

impl Affinity {
    pub fn new(m: Mat) -> Result<Self> {
        if m.rows() != m.cols() {
            return input_err("affinity must be square");
        }
        for i in 0..m.rows() {
            if (m.get(i, i) - 1.0).abs() > 1e-12 {
                return input_err("affinity diagonal must be 1");
            }
            for j in 0..m.cols() {
                let v = m.get(i, j);
                if !(0.0..=1.0 + 1e-12).contains(&v) {
                    return input_err("affinity entries must lie in [0, 1]");
                }
                if (v - m.get(j, i)).abs() > 1e-12 {
                    return input_err("affinity must be symmetric");
                }
            }
        }
        Ok(Affinity { m })
    }

    pub(crate) fn new_unchecked(m: Mat) -> Self {
        Affinity { m }
    }

    pub fn n(&self) -> usize {
        self.m.rows()
    }

    pub fn mat(&self) -> &Mat {
        &self.m
    }
}

impl PartitionTree {
    /// Assemble a tree from raw parts without validation (see [`Self::validate`]).
    pub fn from_parts(levels: Vec<Vec<Folder>>, leaf_order: Vec<usize>) -> Self {
        PartitionTree { levels, leaf_order }
    }

    pub fn n_leaves(&self) -> usize {
        self.leaf_order.len()
    }

    /// Number of levels L.
    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[Vec<Folder>] {
        &self.levels
    }

    pub fn leaf_order(&self) -> &[usize] {
        &self.leaf_order
    }

    /// Original indices belonging to a folder.
    pub fn folder_members(&self, level: usize, folder: usize) -> Vec<usize> {
        let f = &self.levels[level][folder];
        self.leaf_order[f.start..f.end].to_vec()
    }

    /// Structural checks: root level, singleton last level, disjoint unions,
    /// parent/child nesting, leaf count at every level.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_leaves();
        if self.levels.is_empty() {
            return input_err("tree has no levels");
        }
        let mut sorted = self.leaf_order.clone();
        sorted.sort_unstable();
        if sorted != (0..n).collect::<Vec<_>>() {
            return input_err("leaf_order is not a permutation");
        }
        let root = &self.levels[0];
        if root.len() != 1 || root[0].start != 0 || root[0].end != n {
            return input_err("first level must be the single root folder");
        }
        for (li, level) in self.levels.iter().enumerate() {
            let mut pos = 0;
            for f in level {
                if f.start != pos || f.end <= f.start {
                    return input_err(format!("level {li} folders do not tile 0..{n}"));
                }
                pos = f.end;
            }
            if pos != n {
                return input_err(format!("level {li} does not cover all leaves"));
            }
        }
        if self.levels.last().unwrap().len() != n {
            return input_err("last level must be all singletons");
        }
        for li in 0..self.levels.len() - 1 {
            for (fi, f) in self.levels[li].iter().enumerate() {
                let mut covered = f.start;
                for &c in &f.children {
                    let child = &self.levels[li + 1][c];
                    if child.parent != Some(fi) {
                        return input_err("child/parent link mismatch");
                    }
                    if child.start != covered {
                        return input_err("children are not a disjoint union of the parent");
                    }
                    covered = child.end;
                }
                if covered != f.end {
                    return input_err("children do not cover the parent");
                }
            }
        }
        Ok(())
    }

    /// Tree distance: size of the smallest folder containing both indices,
    /// zero when they coincide. An ultrametric.
    pub fn tree_distance(&self, x: usize, y: usize) -> usize {
        if x == y {
            return 0;
        }
        let px = self.leaf_position(x);
        let py = self.leaf_position(y);
        for level in self.levels.iter().rev() {
            if let Some(f) = folder_containing(level, px) {
                if f.start <= py && py < f.end {
                    return f.len();
                }
            }
        }
        self.n_leaves()
    }

    fn leaf_position(&self, original: usize) -> usize {
        self.leaf_order.iter().position(|&v| v == original).expect("index out of range")
    }

    /// Min and max child/parent size ratio over genuine (two-child) splits.
    pub fn balance_ratios(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        for li in 0..self.levels.len().saturating_sub(1) {
            for f in &self.levels[li] {
                if f.children.len() < 2 {
                    continue;
                }
                for &c in &f.children {
                    let r = self.levels[li + 1][c].len() as f64 / f.len() as f64;
                    lo = lo.min(r);
                    hi = hi.max(r);
                }
            }
        }
        if lo.is_infinite() {
            (1.0, 1.0)
        } else {
            (lo, hi)
        }
    }

    /// JSON form `{levels: [[{id, parent, members}]], leaf_order}` with
    /// members given as original indices.
    pub fn to_json(&self) -> serde_json::Value {
        let levels: Vec<Vec<serde_json::Value>> = self
            .levels
            .iter()
            .enumerate()
            .map(|(li, level)| {
                level
                    .iter()
                    .enumerate()
                    .map(|(fi, f)| {
                        serde_json::json!({
                            "id": fi,
                            "parent": f.parent,
                            "members": self.folder_members(li, fi),
                        })
                    })
                    .collect()
            })
            .collect();
        serde_json::json!({ "levels": levels, "leaf_order": self.leaf_order })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let bad = |m: &str| EowsError::Input(format!("tree json: {m}"));
        let leaf_order: Vec<usize> = serde_json::from_value(
            v.get("leaf_order").ok_or_else(|| bad("missing leaf_order"))?.clone(),
        )
        .map_err(|e| bad(&e.to_string()))?;
        let mut pos_of = vec![usize::MAX; leaf_order.len()];
        for (pos, &orig) in leaf_order.iter().enumerate() {
            if orig >= leaf_order.len() || pos_of[orig] != usize::MAX {
                return Err(bad("leaf_order is not a permutation"));
            }
            pos_of[orig] = pos;
        }
        let levels_v = v
            .get("levels")
            .and_then(|l| l.as_array())
            .ok_or_else(|| bad("missing levels"))?;
        let mut levels: Vec<Vec<Folder>> = Vec::with_capacity(levels_v.len());
        for level_v in levels_v {
            let arr = level_v.as_array().ok_or_else(|| bad("level is not an array"))?;
            let mut folders = Vec::with_capacity(arr.len());
            for f in arr {
                let members: Vec<usize> = serde_json::from_value(
                    f.get("members").ok_or_else(|| bad("folder missing members"))?.clone(),
                )
                .map_err(|e| bad(&e.to_string()))?;
                let mut positions: Vec<usize> = members
                    .iter()
                    .map(|&m| {
                        if m < pos_of.len() {
                            pos_of[m]
                        } else {
                            usize::MAX
                        }
                    })
                    .collect();
                if positions.iter().any(|&p| p == usize::MAX) {
                    return Err(bad("folder member out of range"));
                }
                positions.sort_unstable();
                if positions.is_empty() || positions.windows(2).any(|w| w[1] != w[0] + 1) {
                    return Err(bad("folder members are not contiguous in leaf order"));
                }
                folders.push(Folder {
                    start: positions[0],
                    end: positions[positions.len() - 1] + 1,
                    parent: None,
                    children: Vec::new(),
                });
            }
            folders.sort_by_key(|f| f.start);
            levels.push(folders);
        }
        // Recompute links from the ranges.
        for li in 0..levels.len().saturating_sub(1) {
            let (parents, children) = {
                let (a, b) = levels.split_at_mut(li + 1);
                (&mut a[li], &mut b[0])
            };
            for (ci, c) in children.iter_mut().enumerate() {
                let pi = parents
                    .iter()
                    .position(|p| p.start <= c.start && c.end <= p.end)
                    .ok_or_else(|| bad("child folder not nested in any parent"))?;
                c.parent = Some(pi);
                parents[pi].children.push(ci);
            }
        }
        let tree = PartitionTree { levels, leaf_order };
        tree.validate()?;
        Ok(tree)
    }
}

fn folder_containing(level: &[Folder], pos: usize) -> Option<&Folder> {
    let idx = level.partition_point(|f| f.end <= pos);
    level.get(idx).filter(|f| f.start <= pos && pos < f.end)
}

/// Gaussian-kernel affinity of points (rows of `points`), with bandwidth set
/// to the median pairwise Euclidean distance.
pub fn gaussian_affinity(points: &Mat) -> Result<Affinity> {
    let n = points.rows();
    if n < 2 {
        return input_err("gaussian_affinity needs at least 2 points");
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(point_dist_sq(points, i, j).sqrt());
        }
    }
    let sigma = median(&mut dists);
    if sigma <= 0.0 {
        return input_err("gaussian_affinity: all points identical (sigma = 0)");
    }
    let denom = 2.0 * sigma * sigma;
    let mut w = Mat::zeros(n, n);
    for i in 0..n {
        w.set(i, i, 1.0);
        for j in (i + 1)..n {
            let v = (-point_dist_sq(points, i, j) / denom).exp();
            w.set(i, j, v);
            w.set(j, i, v);
        }
    }
    Ok(Affinity::new_unchecked(w))
}

fn point_dist_sq(points: &Mat, i: usize, j: usize) -> f64 {
    let a = points.row(i);
    let b = points.row(j);
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median with the average-of-two-middles convention for even lengths.
fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = values.len() / 2;
    if values.len() % 2 == 1 {
        values[k]
    } else {
        0.5 * (values[k - 1] + values[k])
    }
}

const DENSE_EIGEN_LIMIT: usize = 256;

/// Split by the sign of the Fiedler vector of `L_sym = I - D^{-1/2} W D^{-1/2}`.
///
/// Both sides are guaranteed nonempty: components within 1e-12 of zero go
/// left; an empty side falls back to a median split of the vector values and
/// finally to an index-parity split.
pub fn fiedler_bipartition(w: &Affinity) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = w.n();
    if n < 2 {
        return input_err("fiedler_bipartition needs at least 2 nodes");
    }
    let v = fiedler_vector(w)?;
    let mut left = Vec::new();
    let mut right = Vec::new();
    for (i, &x) in v.iter().enumerate() {
        if x >= -1e-12 {
            left.push(i);
        } else {
            right.push(i);
        }
    }
    if left.is_empty() || right.is_empty() {
        let mut sorted = v.clone();
        let med = median(&mut sorted);
        left.clear();
        right.clear();
        for (i, &x) in v.iter().enumerate() {
            if x <= med {
                left.push(i);
            } else {
                right.push(i);
            }
        }
    }
    if left.is_empty() || right.is_empty() {
        left = (0..n).step_by(2).collect();
        right = (1..n).step_by(2).collect();
    }
    Ok((left, right))
}

/// Eigenvector of the second-largest eigenvalue of `D^{-1/2} W D^{-1/2}`,
/// sign-normalized so its largest-magnitude entry is nonnegative.
fn fiedler_vector(w: &Affinity) -> Result<Vec<f64>> {
    let n = w.n();
    let mut dinv_sqrt = vec![0.0; n];
    for i in 0..n {
        let deg: f64 = (0..n).map(|j| w.mat().get(i, j)).sum();
        // Unit diagonal keeps degrees strictly positive.
        dinv_sqrt[i] = 1.0 / deg.sqrt();
    }
    let m = DMatrix::from_fn(n, n, |i, j| w.mat().get(i, j) * dinv_sqrt[i] * dinv_sqrt[j]);
    let mut v = if n <= DENSE_EIGEN_LIMIT {
        second_eigvec_dense(&m)
    } else {
        second_eigvec_lanczos(&m, &dinv_sqrt)
    };
    // Deterministic sign: first largest-|entry| component made nonnegative.
    let mut best = 0;
    let mut best_abs = -1.0;
    for (i, &x) in v.iter().enumerate() {
        if x.abs() > best_abs {
            best_abs = x.abs();
            best = i;
        }
    }
    if v[best] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
    Ok(v)
}

fn second_eigvec_dense(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let se = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        se.eigenvalues[b].partial_cmp(&se.eigenvalues[a]).unwrap().then(a.cmp(&b))
    });
    let idx = order[1];
    (0..n).map(|i| se.eigenvectors[(i, idx)]).collect()
}

/// Lanczos iteration for the second-largest eigenpair, deflating the known
/// top eigenvector `D^{1/2} 1` of the normalized affinity.
fn second_eigvec_lanczos(m: &DMatrix<f64>, dinv_sqrt: &[f64]) -> Vec<f64> {
    let n = m.nrows();
    let mut v1: Vec<f64> = dinv_sqrt.iter().map(|&x| 1.0 / x).collect();
    normalize(&mut v1);

    let k_max = 80.min(n - 1);
    let mut start: Vec<f64> = (0..n).map(|i| (1.0 + 0.7 * i as f64).cos()).collect();
    for restart in 0..4 {
        project_out(&mut start, &v1);
        let norm = normalize(&mut start);
        if norm < 1e-300 {
            start = (0..n).map(|i| (2.37 + 1.3 * (i + restart) as f64).sin()).collect();
            continue;
        }
        let mut basis: Vec<Vec<f64>> = vec![start.clone()];
        let mut alphas = Vec::new();
        let mut betas = Vec::new();
        for step in 0..k_max {
            let q = &basis[step];
            let mut y = matvec(m, q);
            project_out(&mut y, &v1);
            let alpha = dot(q, &y);
            alphas.push(alpha);
            for b in basis.iter() {
                let c = dot(b, &y);
                axpy(&mut y, -c, b);
            }
            // Second reorthogonalization pass for numerical safety.
            for b in basis.iter() {
                let c = dot(b, &y);
                axpy(&mut y, -c, b);
            }
            let beta = normalize(&mut y);
            if beta < 1e-13 {
                break;
            }
            betas.push(beta);
            basis.push(y);
        }
        let k = alphas.len();
        let mut t = DMatrix::zeros(k, k);
        for i in 0..k {
            t[(i, i)] = alphas[i];
            if i + 1 < k {
                t[(i, i + 1)] = betas[i];
                t[(i + 1, i)] = betas[i];
            }
        }
        let se = t.symmetric_eigen();
        let mut top = 0;
        for i in 1..k {
            if se.eigenvalues[i] > se.eigenvalues[top] {
                top = i;
            }
        }
        let theta = se.eigenvalues[top];
        let mut z = vec![0.0; n];
        for (bi, b) in basis.iter().take(k).enumerate() {
            axpy(&mut z, se.eigenvectors[(bi, top)], b);
        }
        normalize(&mut z);
        let mut res = matvec(m, &z);
        project_out(&mut res, &v1);
        axpy(&mut res, -theta, &z);
        let r = dot(&res, &res).sqrt();
        if r < 1e-8 {
            return z;
        }
        start = z;
    }
    start
}

fn matvec(m: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    let n = m.nrows();
    let mut y = vec![0.0; n];
    // nalgebra stores column-major; walk columns for locality.
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        let col = m.column(j);
        for i in 0..n {
            y[i] += col[i] * xj;
        }
    }
    y
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

fn project_out(v: &mut [f64], unit: &[f64]) {
    let c = dot(v, unit);
    axpy(v, -c, unit);
}

/// Recursive spectral bipartitioning into a binary partition tree.
pub fn build_tree(w: &Affinity) -> Result<PartitionTree> {
    let n = w.n();
    if n == 0 {
        return input_err("build_tree needs at least 1 element");
    }
    struct Node {
        members: Vec<usize>,
        depth: usize,
        children: Vec<usize>,
    }
    let mut arena: Vec<Node> = Vec::new();
    // Iterative DFS so unbalanced recursions cannot overflow the stack.
    let mut stack: Vec<usize> = Vec::new();
    arena.push(Node { members: (0..n).collect(), depth: 0, children: vec![] });
    stack.push(0);
    while let Some(id) = stack.pop() {
        if arena[id].members.len() <= 1 {
            continue;
        }
        let members = arena[id].members.clone();
        let depth = arena[id].depth;
        let sub = restrict_affinity(w, &members);
        let (l, r) = fiedler_bipartition(&sub)?;
        let left: Vec<usize> = l.iter().map(|&i| members[i]).collect();
        let right: Vec<usize> = r.iter().map(|&i| members[i]).collect();
        for part in [left, right] {
            let child = arena.len();
            arena.push(Node { members: part, depth: depth + 1, children: vec![] });
            arena[id].children.push(child);
            stack.push(child);
        }
        // Keep DFS order left-first: stack pops right first otherwise.
        let len = stack.len();
        stack.swap(len - 1, len - 2);
    }
    // In-order leaf ordering.
    let mut leaf_order = Vec::with_capacity(n);
    let mut max_depth = 0;
    let mut dfs = vec![0usize];
    while let Some(id) = dfs.pop() {
        if arena[id].children.is_empty() {
            leaf_order.extend_from_slice(&arena[id].members);
            max_depth = max_depth.max(arena[id].depth);
        } else {
            for &c in arena[id].children.iter().rev() {
                dfs.push(c);
            }
        }
    }
    let n_levels = max_depth + 1;

    let mut pos_of = vec![0usize; n];
    for (pos, &orig) in leaf_order.iter().enumerate() {
        pos_of[orig] = pos;
    }
    let mut levels: Vec<Vec<Folder>> = vec![Vec::new(); n_levels];
    for node in &arena {
        let positions: Vec<usize> = node.members.iter().map(|&m| pos_of[m]).collect();
        let start = *positions.iter().min().unwrap();
        let end = *positions.iter().max().unwrap() + 1;
        debug_assert_eq!(end - start, node.members.len());
        levels[node.depth].push(Folder { start, end, parent: None, children: vec![] });
        if node.children.is_empty() {
            // Pad leaves down to the deepest level.
            for level in levels.iter_mut().take(n_levels).skip(node.depth + 1) {
                level.push(Folder { start, end, parent: None, children: vec![] });
            }
        }
    }
    for level in levels.iter_mut() {
        level.sort_by_key(|f| f.start);
    }
    for li in 0..n_levels.saturating_sub(1) {
        let (parents, children) = {
            let (a, b) = levels.split_at_mut(li + 1);
            (&mut a[li], &mut b[0])
        };
        for (ci, c) in children.iter_mut().enumerate() {
            let pi = parents
                .iter()
                .position(|p| p.start <= c.start && c.end <= p.end)
                .expect("nested by construction");
            c.parent = Some(pi);
            parents[pi].children.push(ci);
        }
    }
    let tree = PartitionTree { levels, leaf_order };
    debug_assert!(tree.validate().is_ok());
    Ok(tree)
}

/// Balanced binary tree over `0..n` in index order (ceil/floor halving),
/// independent of any affinity. On dyadic `n` this is the classical dyadic
/// hierarchy.
pub fn uniform_tree(n: usize) -> PartitionTree {
    assert!(n >= 1);
    fn rec(
        start: usize,
        end: usize,
        depth: usize,
        raw: &mut Vec<Vec<(usize, usize)>>,
        max_depth: &mut usize,
    ) {
        if raw.len() <= depth {
            raw.resize(depth + 1, Vec::new());
        }
        raw[depth].push((start, end));
        if end - start == 1 {
            *max_depth = (*max_depth).max(depth);
            return;
        }
        let mid = start + (end - start).div_ceil(2);
        rec(start, mid, depth + 1, raw, max_depth);
        rec(mid, end, depth + 1, raw, max_depth);
    }
    let mut raw: Vec<Vec<(usize, usize)>> = Vec::new();
    let mut max_depth = 0;
    rec(0, n, 0, &mut raw, &mut max_depth);
    let total_levels = max_depth + 1;
    let mut padded: Vec<Vec<(usize, usize)>> = vec![Vec::new(); total_levels];
    for (depth, folders) in raw.iter().enumerate() {
        for &(s, e) in folders {
            padded[depth].push((s, e));
            if e - s == 1 {
                for level in padded.iter_mut().take(total_levels).skip(depth + 1) {
                    level.push((s, e));
                }
            }
        }
    }
    let mut levels: Vec<Vec<Folder>> = Vec::with_capacity(total_levels);
    for folders in padded.iter_mut() {
        folders.sort_unstable();
        levels.push(
            folders
                .iter()
                .map(|&(s, e)| Folder { start: s, end: e, parent: None, children: vec![] })
                .collect(),
        );
    }
    for li in 0..levels.len().saturating_sub(1) {
        let (parents, children) = {
            let (a, b) = levels.split_at_mut(li + 1);
            (&mut a[li], &mut b[0])
        };
        for (ci, c) in children.iter_mut().enumerate() {
            let pi = parents
                .iter()
                .position(|p| p.start <= c.start && c.end <= p.end)
                .expect("nested by construction");
            c.parent = Some(pi);
            parents[pi].children.push(ci);
        }
    }
    let tree = PartitionTree { levels, leaf_order: (0..n).collect() };
    debug_assert!(tree.validate().is_ok());
    tree
}

fn restrict_affinity(w: &Affinity, members: &[usize]) -> Affinity {
    let k = members.len();
    let mut sub = Mat::zeros(k, k);
    for (a, &i) in members.iter().enumerate() {
        for (b, &j) in members.iter().enumerate() {
            sub.set(a, b, w.mat().get(i, j));
        }
    }
    Affinity::new_unchecked(sub)
}

/// Precomputed walk for the tree metric: distinct folders in
/// child-before-parent order, each with its leaf range, level weight summed
/// over padded appearances, and child links for bottom-up accumulation.
struct EmdPlan {
    nodes: Vec<EmdNode>,
    child_ids: Vec<usize>,
}

struct EmdNode {
    start: usize,
    end: usize,
    weight: f64,
    children: std::ops::Range<usize>,
}

fn emd_plan(tree: &PartitionTree, prm: &EmdParams) -> EmdPlan {
    let n_levels = tree.n_levels();
    let mut nodes: Vec<EmdNode> = Vec::new();
    let mut child_ids = Vec::new();
    // below[start] = plan id of the folder starting at that position one level down.
    let mut below: Vec<Option<usize>> = vec![None; tree.n_leaves() + 1];
    for li in (0..n_levels).rev() {
        let mut current: Vec<Option<usize>> = vec![None; tree.n_leaves() + 1];
        for f in &tree.levels()[li] {
            let padded_copy = li + 1 < n_levels && f.len() == 1;
            if padded_copy {
                // The same singleton exists below; fold this level's weight in.
                let id = below[f.start].expect("padded singleton exists below");
                nodes[id].weight += level_weight(prm, li, f.len());
                current[f.start] = Some(id);
            } else {
                let child_start = child_ids.len();
                if li + 1 < n_levels {
                    for &c in &f.children {
                        let cf = &tree.levels()[li + 1][c];
                        child_ids.push(below[cf.start].expect("children already planned"));
                    }
                }
                let id = nodes.len();
                nodes.push(EmdNode {
                    start: f.start,
                    end: f.end,
                    weight: level_weight(prm, li, f.len()),
                    children: child_start..child_ids.len(),
                });
                current[f.start] = Some(id);
            }
        }
        below = current;
    }
    EmdPlan { nodes, child_ids }
}

/// omega(X)/|X| = 2^(-a l) |X|^(b-1), with l the 1-based level.
fn level_weight(prm: &EmdParams, level_idx: usize, size: usize) -> f64 {
    let l = (level_idx + 1) as f64;
    (2.0f64).powf(-prm.a * l) * (size as f64).powf(prm.b - 1.0)
}

fn emd_from_plan(plan: &EmdPlan, fi: &[f64], fj: &[f64], scratch: &mut Vec<f64>) -> f64 {
    scratch.clear();
    scratch.resize(plan.nodes.len(), 0.0);
    let mut total = 0.0;
    for (id, node) in plan.nodes.iter().enumerate() {
        let sq = if node.children.is_empty() {
            let mut acc = 0.0;
            for pos in node.start..node.end {
                let d = fi[pos] - fj[pos];
                acc += d * d;
            }
            acc
        } else {
            let mut acc = 0.0;
            for &c in &plan.child_ids[node.children.clone()] {
                acc += scratch[c];
            }
            acc
        };
        scratch[id] = sq;
        total += sq.sqrt() * node.weight;
    }
    total
}

/// Multiscale tree metric between two vectors over the tree's leaves: the
/// weighted sum over all folders of the Euclidean norm of the restricted
/// difference. An Earth-Mover's-Distance surrogate on tree-structured data.
pub fn tree_emd(f: &[f64], g: &[f64], tree: &PartitionTree, prm: &EmdParams) -> Result<f64> {
    let n = tree.n_leaves();
    if f.len() != n || g.len() != n {
        return input_err("tree_emd: vector length must equal the tree leaf count");
    }
    let plan = emd_plan(tree, prm);
    let fp = permute(f, tree.leaf_order());
    let gp = permute(g, tree.leaf_order());
    let mut scratch = Vec::new();
    Ok(emd_from_plan(&plan, &fp, &gp, &mut scratch))
}

fn permute(f: &[f64], leaf_order: &[usize]) -> Vec<f64> {
    leaf_order.iter().map(|&i| f[i]).collect()
}

/// Result of a dual-affinity computation.
pub struct DualAffinity {
    pub affinity: Affinity,
    /// Set when all rows were identical and the affinity degenerated to 1s.
    pub degenerate: bool,
    /// Median pairwise tree metric (the epsilon scale before `eps_factor`).
    pub median_emd: f64,
}

/// Affinity between the rows of `m` induced by a partition tree on its
/// columns: `W(i,j) = exp(-D(row_i, row_j) / eps)` with `eps` a multiple of
/// the median pairwise tree metric.
pub fn dual_affinity(m: &Mat, t_cols: &PartitionTree, prm: &EmdParams) -> Result<DualAffinity> {
    if t_cols.n_leaves() != m.cols() {
        return input_err("dual_affinity: tree leaf count must equal the column count");
    }
    let n_rows = m.rows();
    if n_rows < 2 {
        return input_err("dual_affinity needs at least 2 rows");
    }
    let plan = emd_plan(t_cols, prm);
    let rows: Vec<Vec<f64>> =
        (0..n_rows).map(|i| permute(m.row(i), t_cols.leaf_order())).collect();
    let pairs: Vec<(usize, usize)> =
        (0..n_rows).flat_map(|i| ((i + 1)..n_rows).map(move |j| (i, j))).collect();
    let dists: Vec<f64> = pairs
        .par_iter()
        .map_init(Vec::new, |scratch, &(i, j)| emd_from_plan(&plan, &rows[i], &rows[j], scratch))
        .collect();
    let degenerate = dists.iter().all(|&d| d == 0.0);
    if degenerate {
        let mut w = Mat::zeros(n_rows, n_rows);
        for v in w.data_mut().iter_mut() {
            *v = 1.0;
        }
        return Ok(DualAffinity {
            affinity: Affinity::new_unchecked(w),
            degenerate,
            median_emd: 0.0,
        });
    }
    let mut sorted = dists.clone();
    let med = median(&mut sorted);
    // A zero median with nonzero distances still needs a positive scale.
    let scale = if med > 0.0 {
        med
    } else {
        let mut pos: Vec<f64> = dists.iter().copied().filter(|&d| d > 0.0).collect();
        median(&mut pos)
    };
    let eps = prm.eps_factor * scale;
    let mut w = Mat::zeros(n_rows, n_rows);
    for (idx, &(i, j)) in pairs.iter().enumerate() {
        let v = (-dists[idx] / eps).exp();
        w.set(i, j, v);
        w.set(j, i, v);
    }
    for i in 0..n_rows {
        w.set(i, i, 1.0);
    }
    Ok(DualAffinity { affinity: Affinity::new_unchecked(w), degenerate, median_emd: med })
}

/// Alternating row/column tree refinement.
///
/// Starting from a Gaussian affinity on one axis (columns by default, viewed
/// as points of the ambient space), each iteration builds the other axis's
/// tree from the dual affinity induced by the current tree, then refreshes
/// the starting axis the same way. Returns `(rows_tree, cols_tree)`.
pub fn questionnaire(
    m: &Mat,
    iters: usize,
    prm: &EmdParams,
    start: StartAxis,
) -> Result<(PartitionTree, PartitionTree)> {
    if iters < 1 {
        return input_err("questionnaire: iters must be >= 1");
    }
    let mt = m.transpose();
    match start {
        StartAxis::Columns => {
            let w_cols = gaussian_affinity(&mt)?;
            let mut t_cols = build_tree(&w_cols)?;
            let mut t_rows = None;
            for _ in 0..iters {
                let w_rows = dual_affinity(m, &t_cols, prm)?;
                let rows_tree = build_tree(&w_rows.affinity)?;
                let w_cols = dual_affinity(&mt, &rows_tree, prm)?;
                t_cols = build_tree(&w_cols.affinity)?;
                t_rows = Some(rows_tree);
            }
            Ok((t_rows.expect("iters >= 1"), t_cols))
        }
        StartAxis::Rows => {
            let w_rows = gaussian_affinity(m)?;
            let mut t_rows = build_tree(&w_rows)?;
            let mut t_cols = None;
            for _ in 0..iters {
                let w_cols = dual_affinity(&mt, &t_rows, prm)?;
                let cols_tree = build_tree(&w_cols.affinity)?;
                let w_rows = dual_affinity(m, &cols_tree, prm)?;
                t_rows = build_tree(&w_rows.affinity)?;
                t_cols = Some(cols_tree);
            }
            Ok((t_rows, t_cols.expect("iters >= 1")))
        }
    }
}
