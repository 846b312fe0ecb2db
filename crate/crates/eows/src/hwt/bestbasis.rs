//! Best-basis selection over the Haar-Walsh dictionary.
//!
//! Admissible tilings are generated by recursively splitting (folder, band)
//! tiles either in frequency (halving the band within the folder) or in
//! time (descending to the two child folders); in 2-D the split applies to
//! either axis of a product tile. The dynamic program compares, for every
//! tile, the cost of each split and keeps the cheapest decomposition.
//! Ties are broken deterministically: frequency before time, rows before
//! columns, so an all-zero input yields the coarse root-level basis.

use std::sync::Mutex;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{input_err, Result};

use super::dictionary::{AtomId, Dictionary, TreeDictionary, NONE};
use super::tensor::TensorAnalysis;

/// A disjoint exact cover of the 2-D atom plane by tensor-product tiles,
/// along with the dictionaries it was selected from.
#[derive(Debug, Clone)]
pub struct BestBasis2D {
    pub row_dict: std::sync::Arc<TreeDictionary>,
    pub col_dict: std::sync::Arc<TreeDictionary>,
    pub tiles: Vec<(AtomId, AtomId)>,
    pub ell: f64,
    pub cost: f64,
}

pub(crate) trait DpCost: Copy + Send + Sync + PartialOrd {
    const INF: Self;
    fn from_f64(x: f64) -> Self;
    fn add(self, other: Self) -> Self;
}

impl DpCost for f64 {
    const INF: Self = f64::INFINITY;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn add(self, other: Self) -> Self {
        self + other
    }
}

impl DpCost for f32 {
    const INF: Self = f32::INFINITY;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn add(self, other: Self) -> Self {
        self + other
    }
}

#[inline]
pub(crate) fn cost_fn(ell: f64) -> impl Fn(f64) -> f64 + Copy {
    move |c: f64| {
        if ell == 1.0 {
            c.abs()
        } else {
            c.abs().powf(ell)
        }
    }
}

/// Minimal-cost 1-D tiling of the dictionary for cost `|coef|^ell`.
pub fn best_basis_1d(dict: &Dictionary, ell: f64) -> Result<(Vec<AtomId>, f64)> {
    if !(0.0..2.0).contains(&ell) || ell <= 0.0 {
        return input_err("best_basis_1d: ell must lie in (0, 2)");
    }
    let meta = &dict.meta;
    let states = meta.states();
    let n = meta.n();
    let cost_of = cost_fn(ell);
    let mut dp = vec![f64::INFINITY; states.len()];
    let mut choice = vec![0u8; states.len()];

    let mut by_height: Vec<Vec<u32>> = Vec::new();
    for (i, s) in states.iter().enumerate() {
        let h = s.height as usize;
        if by_height.len() <= h {
            by_height.resize(h + 1, Vec::new());
        }
        by_height[h].push(i as u32);
    }
    for bucket in &by_height {
        for &si in bucket {
            let s = &states[si as usize];
            if s.atom != NONE {
                let lin = s.atom as usize;
                dp[si as usize] = cost_of(dict.levels[lin / n][lin % n]);
                choice[si as usize] = 0;
                continue;
            }
            let mut best = f64::INFINITY;
            let mut ch = 0u8;
            if let Some((a, b)) = s.freq {
                let c = dp[a as usize] + dp[b as usize];
                if c < best {
                    best = c;
                    ch = 1;
                }
            }
            if let Some((a, b)) = s.time {
                let c = dp[a as usize] + dp[b as usize];
                if c < best {
                    best = c;
                    ch = 2;
                }
            }
            dp[si as usize] = best;
            choice[si as usize] = ch;
        }
    }

    let mut atoms = Vec::with_capacity(n);
    let mut stack = vec![meta.root_state()];
    while let Some(si) = stack.pop() {
        let s = &states[si as usize];
        match choice[si as usize] {
            0 => atoms.push(meta.atom_from_lin(s.atom as usize)),
            1 => {
                let (a, b) = s.freq.unwrap();
                stack.push(b);
                stack.push(a);
            }
            _ => {
                let (a, b) = s.time.unwrap();
                stack.push(b);
                stack.push(a);
            }
        }
    }
    let total: f64 = atoms
        .iter()
        .map(|a| dict.coeff(a).map(cost_of))
        .collect::<Result<Vec<f64>>>()?
        .iter()
        .sum();
    Ok((atoms, total))
}

/// Serializes the memory-heavy phase of concurrent large selections.
static BIG_DP_GATE: Mutex<()> = Mutex::new(());
const BIG_DP_STATES: usize = 1 << 26;
/// Above this state count the cost table is stored in f32; the chosen basis
/// stays a valid tiling and the reported cost is recomputed in f64.
const F32_DP_STATES: usize = 1 << 27;

/// Minimal-cost 2-D tiling over product tiles of the two dictionaries.
pub fn best_basis_2d(ta: &TensorAnalysis, ell: f64) -> Result<BestBasis2D> {
    if !(0.0..2.0).contains(&ell) || ell <= 0.0 {
        return input_err("best_basis_2d: ell must lie in (0, 2)");
    }
    let nr = ta.row_dict.states().len();
    let nc = ta.col_dict.states().len();
    let n_big = nr.checked_mul(nc).expect("state count overflow");
    let _gate = if n_big > BIG_DP_STATES { Some(BIG_DP_GATE.lock().unwrap()) } else { None };
    let tiles = if n_big > F32_DP_STATES {
        run_dp::<f32>(ta, ell)?
    } else {
        run_dp::<f64>(ta, ell)?
    };
    let cost_of = cost_fn(ell);
    let values = ta.coeffs_for(&tiles)?;
    let cost = values.iter().map(|&v| cost_of(v)).sum();
    Ok(BestBasis2D {
        row_dict: ta.row_dict.clone(),
        col_dict: ta.col_dict.clone(),
        tiles,
        ell,
        cost,
    })
}

/// Choice encoding for the 2-D program.
const CH_ATOM: u8 = 0;
const CH_ROW_FREQ: u8 = 1;
const CH_ROW_TIME: u8 = 2;
const CH_COL_FREQ: u8 = 3;
const CH_COL_TIME: u8 = 4;

fn run_dp<T: DpCost>(ta: &TensorAnalysis, ell: f64) -> Result<Vec<(AtomId, AtomId)>> {
    let row_states = ta.row_dict.states();
    let col_states = ta.col_dict.states();
    let nr = row_states.len();
    let nc = col_states.len();
    let mut dp: Vec<T> = vec![T::INF; nr * nc];
    let mut choice: Vec<u8> = vec![CH_ATOM; nr * nc];

    ta.fill_leaf_costs::<T>(ell, &mut dp)?;

    let mut rows_by_h: Vec<Vec<u32>> = Vec::new();
    for (i, s) in row_states.iter().enumerate() {
        let h = s.height as usize;
        if rows_by_h.len() <= h {
            rows_by_h.resize(h + 1, Vec::new());
        }
        rows_by_h[h].push(i as u32);
    }
    let mut cols_by_h: Vec<Vec<u32>> = Vec::new();
    for (i, s) in col_states.iter().enumerate() {
        let h = s.height as usize;
        if cols_by_h.len() <= h {
            cols_by_h.resize(h + 1, Vec::new());
        }
        cols_by_h[h].push(i as u32);
    }

    // Buckets by total height: every split target has strictly smaller
    // total height, so each bucket only reads finished cells. Cells within
    // a bucket are independent, which makes the row-parallel writes safe.
    struct Tables<T>(*mut T, *mut u8);
    unsafe impl<T> Sync for Tables<T> {}
    let tables = Tables(dp.as_mut_ptr(), choice.as_mut_ptr());
    let max_h = (rows_by_h.len() - 1) + (cols_by_h.len() - 1);
    for h_total in 1..=max_h {
        let pairs: Vec<(usize, usize)> = (0..rows_by_h.len())
            .filter_map(|hr| {
                let hc = h_total.checked_sub(hr)?;
                if hc < cols_by_h.len() && !(rows_by_h[hr].is_empty() || cols_by_h[hc].is_empty())
                {
                    Some((hr, hc))
                } else {
                    None
                }
            })
            .collect();
        for (hr, hc) in pairs {
            let rows = &rows_by_h[hr];
            let cols = &cols_by_h[hc];
            let t = &tables;
            rows.par_iter().for_each(|&r| {
                let rs = &row_states[r as usize];
                let dp_ptr = t.0;
                let ch_ptr = t.1;
                for &c in cols {
                    let cs = &col_states[c as usize];
                    let idx = r as usize * nc + c as usize;
                    let mut best = T::INF;
                    let mut ch = CH_ATOM;
                    // SAFETY: reads target cells from strictly smaller
                    // height buckets (already final); the write is this
                    // bucket's unique owner of `idx`.
                    unsafe {
                        if let Some((a, b)) = rs.freq {
                            let v = (*dp_ptr.add(a as usize * nc + c as usize))
                                .add(*dp_ptr.add(b as usize * nc + c as usize));
                            if v < best {
                                best = v;
                                ch = CH_ROW_FREQ;
                            }
                        }
                        if let Some((a, b)) = rs.time {
                            let v = (*dp_ptr.add(a as usize * nc + c as usize))
                                .add(*dp_ptr.add(b as usize * nc + c as usize));
                            if v < best {
                                best = v;
                                ch = CH_ROW_TIME;
                            }
                        }
                        if let Some((a, b)) = cs.freq {
                            let v = (*dp_ptr.add(r as usize * nc + a as usize))
                                .add(*dp_ptr.add(r as usize * nc + b as usize));
                            if v < best {
                                best = v;
                                ch = CH_COL_FREQ;
                            }
                        }
                        if let Some((a, b)) = cs.time {
                            let v = (*dp_ptr.add(r as usize * nc + a as usize))
                                .add(*dp_ptr.add(r as usize * nc + b as usize));
                            if v < best {
                                best = v;
                                ch = CH_COL_TIME;
                            }
                        }
                        if rs.atom != NONE && cs.atom != NONE {
                            // Leaf cells were filled upfront and never split.
                        } else {
                            *dp_ptr.add(idx) = best;
                            *ch_ptr.add(idx) = ch;
                        }
                    }
                }
            });
        }
    }

    // Walk the decisions from the root pair.
    let mut tiles = Vec::with_capacity(ta.row_dict.n() * ta.col_dict.n());
    let mut stack = vec![(ta.row_dict.root_state(), ta.col_dict.root_state())];
    while let Some((r, c)) = stack.pop() {
        let idx = r as usize * nc + c as usize;
        match choice[idx] {
            CH_ATOM => {
                let ra = row_states[r as usize].atom;
                let ca = col_states[c as usize].atom;
                debug_assert!(ra != NONE && ca != NONE);
                tiles.push((
                    ta.row_dict.atom_from_lin(ra as usize),
                    ta.col_dict.atom_from_lin(ca as usize),
                ));
            }
            CH_ROW_FREQ => {
                let (a, b) = row_states[r as usize].freq.unwrap();
                stack.push((b, c));
                stack.push((a, c));
            }
            CH_ROW_TIME => {
                let (a, b) = row_states[r as usize].time.unwrap();
                stack.push((b, c));
                stack.push((a, c));
            }
            CH_COL_FREQ => {
                let (a, b) = col_states[c as usize].freq.unwrap();
                stack.push((r, b));
                stack.push((r, a));
            }
            _ => {
                let (a, b) = col_states[c as usize].time.unwrap();
                stack.push((r, b));
                stack.push((r, a));
            }
        }
    }
    Ok(tiles)
}

/// Uniformly random admissible 1-D tiling (for dominance tests).
pub fn sample_tiling_1d(meta: &TreeDictionary, rng: &mut impl Rng) -> Vec<AtomId> {
    let states = meta.states();
    let mut atoms = Vec::with_capacity(meta.n());
    let mut stack = vec![meta.root_state()];
    while let Some(si) = stack.pop() {
        let s = &states[si as usize];
        if s.atom != NONE {
            atoms.push(meta.atom_from_lin(s.atom as usize));
            continue;
        }
        let mut options = Vec::with_capacity(2);
        if let Some(f) = s.freq {
            options.push(f);
        }
        if let Some(t) = s.time {
            options.push(t);
        }
        let (a, b) = options[rng.random_range(0..options.len())];
        stack.push(b);
        stack.push(a);
    }
    atoms
}

/// Uniformly random admissible 2-D tiling (for dominance tests).
pub fn sample_tiling_2d(
    row_meta: &TreeDictionary,
    col_meta: &TreeDictionary,
    rng: &mut impl Rng,
) -> Vec<(AtomId, AtomId)> {
    let rs = row_meta.states();
    let cs = col_meta.states();
    let mut tiles = Vec::with_capacity(row_meta.n() * col_meta.n());
    let mut stack = vec![(row_meta.root_state(), col_meta.root_state())];
    while let Some((r, c)) = stack.pop() {
        let sr = &rs[r as usize];
        let sc = &cs[c as usize];
        if sr.atom != NONE && sc.atom != NONE {
            tiles.push((
                row_meta.atom_from_lin(sr.atom as usize),
                col_meta.atom_from_lin(sc.atom as usize),
            ));
            continue;
        }
        let mut options: Vec<(u32, u32, bool)> = Vec::with_capacity(4);
        if let Some((a, b)) = sr.freq {
            options.push((a, b, true));
        }
        if let Some((a, b)) = sr.time {
            options.push((a, b, true));
        }
        if let Some((a, b)) = sc.freq {
            options.push((a, b, false));
        }
        if let Some((a, b)) = sc.time {
            options.push((a, b, false));
        }
        let (a, b, is_row) = options[rng.random_range(0..options.len())];
        if is_row {
            stack.push((b, c));
            stack.push((a, c));
        } else {
            stack.push((r, b));
            stack.push((r, a));
        }
    }
    tiles
}

/// Classical Haar tiling of a binary partition tree: the root scaling atom
/// plus one difference atom per genuine two-child split.
pub fn haar_tiling(meta: &TreeDictionary) -> Vec<AtomId> {
    let tree = meta.tree();
    let mut atoms = vec![AtomId { level: 0, folder: 0, tag: 0 }];
    for li in 0..tree.n_levels() {
        for (fi, f) in tree.levels()[li].iter().enumerate() {
            if f.children.len() >= 2 {
                debug_assert!(f.children.len() == 2, "haar tiling expects binary splits");
                atoms.push(AtomId { level: li, folder: fi, tag: 1 });
            }
        }
    }
    atoms
}

/// The all-singletons tiling: every leaf's scaling atom at the finest level.
pub fn finest_tiling(meta: &TreeDictionary) -> Vec<AtomId> {
    let finest = meta.tree().n_levels() - 1;
    (0..meta.n()).map(|f| AtomId { level: finest, folder: f, tag: 0 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hwt::dictionary::ghwt_analyze;
    use crate::hwt::tensor::tensor_analyze;
    use crate::seed::derive_rng;
    use crate::treegeo::uniform_tree;
    use crate::Mat;
    use rand::Rng;

    /// Exhaustively enumerate 1-D admissible tilings (small trees only).
    fn enumerate_tilings(meta: &TreeDictionary) -> Vec<Vec<AtomId>> {
        fn rec(meta: &TreeDictionary, state: u32, out: &mut Vec<Vec<AtomId>>) {
            let s = &meta.states()[state as usize];
            if s.atom != NONE {
                out.push(vec![meta.atom_from_lin(s.atom as usize)]);
                return;
            }
            let mut results = Vec::new();
            for split in [s.freq, s.time].into_iter().flatten() {
                let mut left = Vec::new();
                rec(meta, split.0, &mut left);
                let mut right = Vec::new();
                rec(meta, split.1, &mut right);
                for l in &left {
                    for r in &right {
                        let mut t = l.clone();
                        t.extend(r.iter().copied());
                        results.push(t);
                    }
                }
            }
            // Distinct splits can reach the same atom multiset; dedup.
            results.sort();
            results.dedup();
            out.extend(results);
        }
        let mut out = Vec::new();
        rec(meta, meta.root_state(), &mut out);
        for t in out.iter_mut() {
            t.sort();
        }
        out.sort();
        out.dedup();
        out
    }

    #[test]
    fn best_basis_1d_concentrated_spike() {
        let tree = uniform_tree(8);
        let mut v = vec![0.001; 8];
        v[5] = 10.0;
        let d = ghwt_analyze(&v, &tree).unwrap();
        let (atoms, _cost) = best_basis_1d(&d, 1.0).unwrap();
        let finest = tree.n_levels() - 1;
        let leaf_pos = tree.leaf_order().iter().position(|&i| i == 5).unwrap();
        assert!(
            atoms.iter().any(|a| a.level == finest
                && tree.levels()[finest][a.folder].start == leaf_pos),
            "expected the singleton atom at the spike, got {atoms:?}"
        );
    }

    #[test]
    fn best_basis_1d_constant_keeps_root_scaling() {
        let tree = uniform_tree(8);
        let v = vec![3.0; 8];
        let d = ghwt_analyze(&v, &tree).unwrap();
        let (atoms, cost) = best_basis_1d(&d, 1.0).unwrap();
        assert!(atoms.contains(&AtomId { level: 0, folder: 0, tag: 0 }));
        // All cost sits in the single scaling coefficient.
        assert!((cost - 3.0 * 8.0f64.sqrt()).abs() < 1e-12);
        // Tie rule: zero-cost complements stay at the root level.
        assert!(atoms.iter().all(|a| a.level == 0));
    }

    #[test]
    fn best_basis_1d_matches_enumeration_on_n4() {
        let tree = uniform_tree(4);
        let meta = TreeDictionary::new(&tree).unwrap();
        let tilings = enumerate_tilings(&meta);
        assert!(tilings.len() > 2);
        let mut rng = derive_rng(3, "bb1d", 0);
        for trial in 0..10 {
            let v: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let d = ghwt_analyze(&v, &tree).unwrap();
            let (_, cost) = best_basis_1d(&d, 1.0).unwrap();
            let brute = tilings
                .iter()
                .map(|t| {
                    t.iter().map(|a| d.coeff(a).unwrap().abs()).sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min);
            assert!(
                (cost - brute).abs() < 1e-12,
                "trial {trial}: dp {cost} vs brute {brute}"
            );
        }
    }

    #[test]
    fn sample_tilings_are_valid() {
        let tree = uniform_tree(8);
        let meta = TreeDictionary::new(&tree).unwrap();
        let mut rng = derive_rng(5, "sample1d", 0);
        for _ in 0..20 {
            let atoms = sample_tiling_1d(&meta, &mut rng);
            meta.validate_tiling(&atoms).unwrap();
        }
        let haar = haar_tiling(&meta);
        meta.validate_tiling(&haar).unwrap();
        let finest = finest_tiling(&meta);
        meta.validate_tiling(&finest).unwrap();
    }

    #[test]
    fn best_basis_2d_zero_matrix_canonical_tiling() {
        let tr = uniform_tree(4);
        let tc = uniform_tree(4);
        let m = Mat::zeros(4, 4);
        let ta = tensor_analyze(&m, &tr, &tc).unwrap();
        let basis = best_basis_2d(&ta, 1.0).unwrap();
        assert_eq!(basis.tiles.len(), 16);
        assert_eq!(basis.cost, 0.0);
        // Ties prefer frequency splits, which keep both axes at the root.
        assert!(basis.tiles.iter().all(|(p, q)| p.level == 0 && q.level == 0));
    }
}
