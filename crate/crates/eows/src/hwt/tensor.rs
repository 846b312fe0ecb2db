//! Tensor-product transforms: 2-D coefficients of a matrix against the
//! product of a row dictionary and a column dictionary, the coefficient
//! map on a chosen basis, and the inverse transform.
//!
//! Analysis is separable: every matrix row is analyzed against the column
//! dictionary once; the cross coefficient for a (row atom, col atom) pair
//! is then a row-dictionary analysis of one column of that intermediate.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{input_err, Result};
use crate::matcore::Mat;
use crate::treegeo::PartitionTree;

use super::bestbasis::{cost_fn, BestBasis2D, DpCost};
use super::dictionary::{AtomId, TreeDictionary};

/// Separable 2-D analysis state: per column-dictionary level, the matrix of
/// column coefficients for every row (stored transposed, `n x p`).
pub struct TensorAnalysis {
    pub row_dict: Arc<TreeDictionary>,
    pub col_dict: Arc<TreeDictionary>,
    /// t1[lc][(pos_c, i)] = level-lc coefficient at column position pos_c
    /// of row i.
    t1: Vec<Mat>,
    p: usize,
    n: usize,
}

/// 2-D coefficients of `m` for all atom pairs needed by the best-basis
/// search, in separable intermediate form.
pub fn tensor_analyze(
    m: &Mat,
    t_rows: &PartitionTree,
    t_cols: &PartitionTree,
) -> Result<TensorAnalysis> {
    if t_rows.n_leaves() != m.rows() || t_cols.n_leaves() != m.cols() {
        return input_err("tensor_analyze: tree leaf counts must match the matrix shape");
    }
    let row_dict = Arc::new(TreeDictionary::new(t_rows)?);
    let col_dict = Arc::new(TreeDictionary::new(t_cols)?);
    Ok(TensorAnalysis::new(m, row_dict, col_dict))
}

impl TensorAnalysis {
    pub(crate) fn new(m: &Mat, row_dict: Arc<TreeDictionary>, col_dict: Arc<TreeDictionary>) -> Self {
        let p = m.rows();
        let n = m.cols();
        let lc = col_dict.n_levels();
        let mut t1: Vec<Mat> = (0..lc).map(|_| Mat::zeros(n, p)).collect();
        let mut stack = col_dict.level_buffers();
        let mut temps = Vec::with_capacity(col_dict.scratch_capacity());
        for i in 0..p {
            col_dict.analyze_into(m.row(i), &mut stack, &mut temps);
            for (level, t1m) in t1.iter_mut().enumerate() {
                for pos_c in 0..n {
                    t1m.set(pos_c, i, stack[level][pos_c]);
                }
            }
        }
        TensorAnalysis { row_dict, col_dict, t1, p, n }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Single cross coefficient `<m, w_p x w_q>`.
    pub fn coeff(&self, p_atom: &AtomId, q_atom: &AtomId) -> Result<f64> {
        let q_lin = self.col_dict.atom_lin(q_atom)?;
        let p_lin = self.row_dict.atom_lin(p_atom)?;
        let mut stack = self.row_dict.level_buffers();
        let mut temps = Vec::new();
        let col = self.t1[q_lin / self.n].row(q_lin % self.n);
        self.row_dict.analyze_into(col, &mut stack, &mut temps);
        Ok(stack[p_lin / self.p][p_lin % self.p])
    }

    /// Full cross-coefficient table, row-atom linear index by col-atom
    /// linear index. Intended for small inputs.
    pub fn full_table(&self) -> Mat {
        let na_r = self.row_dict.n_atoms();
        let na_c = self.col_dict.n_atoms();
        let mut out = Mat::zeros(na_r, na_c);
        let mut stack = self.row_dict.level_buffers();
        let mut temps = Vec::new();
        for q_lin in 0..na_c {
            let col = self.t1[q_lin / self.n].row(q_lin % self.n);
            self.row_dict.analyze_into(col, &mut stack, &mut temps);
            for (lr, level) in stack.iter().enumerate() {
                for (pos_r, &v) in level.iter().enumerate() {
                    out.set(lr * self.p + pos_r, q_lin, v);
                }
            }
        }
        out
    }

    /// Coefficients for an explicit list of tiles, grouped so each distinct
    /// column atom costs one row-dictionary analysis.
    pub fn coeffs_for(&self, tiles: &[(AtomId, AtomId)]) -> Result<Vec<f64>> {
        let mut by_col: HashMap<usize, Vec<(usize, usize)>> = HashMap::new();
        for (k, (p_atom, q_atom)) in tiles.iter().enumerate() {
            let q_lin = self.col_dict.atom_lin(q_atom)?;
            let p_lin = self.row_dict.atom_lin(p_atom)?;
            by_col.entry(q_lin).or_default().push((k, p_lin));
        }
        let mut out = vec![0.0; tiles.len()];
        let mut stack = self.row_dict.level_buffers();
        let mut temps = Vec::new();
        let mut cols: Vec<usize> = by_col.keys().copied().collect();
        cols.sort_unstable();
        for q_lin in cols {
            let col = self.t1[q_lin / self.n].row(q_lin % self.n);
            self.row_dict.analyze_into(col, &mut stack, &mut temps);
            for &(k, p_lin) in &by_col[&q_lin] {
                out[k] = stack[p_lin / self.p][p_lin % self.p];
            }
        }
        Ok(out)
    }

    /// Write `|coeff|^ell` into the DP table for every (row atom, col atom)
    /// pair of leaf states.
    pub(crate) fn fill_leaf_costs<T: DpCost>(&self, ell: f64, dp: &mut [T]) -> Result<()> {
        let cost_of = cost_fn(ell);
        let nc_states = self.col_dict.states().len();
        let mut stack = self.row_dict.level_buffers();
        let mut temps = Vec::new();
        for q_lin in 0..self.col_dict.n_atoms() {
            let c_state = self.col_dict.atom_state(q_lin) as usize;
            let col = self.t1[q_lin / self.n].row(q_lin % self.n);
            self.row_dict.analyze_into(col, &mut stack, &mut temps);
            for (lr, level) in stack.iter().enumerate() {
                let base = lr * self.p;
                for (pos_r, &v) in level.iter().enumerate() {
                    let r_state = self.row_dict.atom_state(base + pos_r) as usize;
                    dp[r_state * nc_states + c_state] = T::from_f64(cost_of(v));
                }
            }
        }
        Ok(())
    }
}

/// Transform coefficients of a matrix on a chosen 2-D basis.
#[derive(Debug, Clone)]
pub struct CoeffMap {
    pub tiles: Vec<(AtomId, AtomId)>,
    pub values: Vec<f64>,
}

impl CoeffMap {
    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// `<m, Phi_(p,q)>` for every tile of the basis. The basis must cover the
/// plane exactly (p*n tiles forming an orthonormal set).
pub fn transform_2d(m: &Mat, basis: &BestBasis2D) -> Result<CoeffMap> {
    let p = basis.row_dict.n();
    let n = basis.col_dict.n();
    if m.rows() != p || m.cols() != n {
        return input_err("transform_2d: matrix shape does not match the basis");
    }
    validate_tiling_2d(basis)?;
    let ta = TensorAnalysis::new(m, basis.row_dict.clone(), basis.col_dict.clone());
    let values = ta.coeffs_for(&basis.tiles)?;
    Ok(CoeffMap { tiles: basis.tiles.clone(), values })
}

/// Synthesize the matrix from coefficients on a basis.
pub fn inverse_2d(cm: &CoeffMap, basis: &BestBasis2D) -> Result<Mat> {
    if cm.tiles != basis.tiles {
        return input_err("inverse_2d: coefficient keys do not match the basis");
    }
    let p = basis.row_dict.n();
    let n = basis.col_dict.n();
    if cm.tiles.len() != p * n {
        return input_err("inverse_2d: basis does not cover the plane");
    }
    // Group by row atom; one column-dictionary partial synthesis per group
    // gives that atom's column profile g_p.
    let mut by_row: HashMap<usize, Vec<(usize, f64)>> = HashMap::new();
    for ((p_atom, q_atom), &v) in cm.tiles.iter().zip(&cm.values) {
        let p_lin = basis.row_dict.atom_lin(p_atom)?;
        let q_lin = basis.col_dict.atom_lin(q_atom)?;
        by_row.entry(p_lin).or_default().push((q_lin, v));
    }
    let mut rows: Vec<usize> = by_row.keys().copied().collect();
    rows.sort_unstable();
    // g[k] = profile over original column indices for rows[k].
    let mut g: Vec<Vec<f64>> = Vec::with_capacity(rows.len());
    for &p_lin in &rows {
        g.push(basis.col_dict.synthesize_seeds(&by_row[&p_lin]));
    }
    // Column by column, a row-dictionary partial synthesis assembles m.
    let mut out = Mat::zeros(p, n);
    let mut seeds: Vec<(usize, f64)> = Vec::with_capacity(rows.len());
    for j in 0..n {
        seeds.clear();
        for (k, &p_lin) in rows.iter().enumerate() {
            seeds.push((p_lin, g[k][j]));
        }
        let col = basis.row_dict.synthesize_seeds(&seeds);
        for (i, &v) in col.iter().enumerate() {
            out.set(i, j, v);
        }
    }
    Ok(out)
}

/// Validity of a 2-D product tiling: exact count, no duplicates, and exact
/// round-trip of a deterministic generic probe matrix.
fn validate_tiling_2d(basis: &BestBasis2D) -> Result<()> {
    let p = basis.row_dict.n();
    let n = basis.col_dict.n();
    if basis.tiles.len() != p * n {
        return input_err(format!(
            "basis has {} tiles, expected {}",
            basis.tiles.len(),
            p * n
        ));
    }
    let mut keys: Vec<(usize, usize)> = Vec::with_capacity(basis.tiles.len());
    for (pa, qa) in &basis.tiles {
        keys.push((basis.row_dict.atom_lin(pa)?, basis.col_dict.atom_lin(qa)?));
    }
    keys.sort_unstable();
    if keys.windows(2).any(|w| w[0] == w[1]) {
        return input_err("duplicate tiles in basis");
    }
    let probe = Mat::from_fn(p, n, |i, j| ((i as f64 + 0.7) * 1.3 + (j as f64 + 0.3) * 0.9).sin());
    let ta = TensorAnalysis::new(&probe, basis.row_dict.clone(), basis.col_dict.clone());
    let values = ta.coeffs_for(&basis.tiles)?;
    let cm = CoeffMap { tiles: basis.tiles.clone(), values };
    let back = inverse_2d(&cm, basis)?;
    let err = probe.sub(&back)?.frob_norm();
    if err > 1e-8 * probe.frob_norm() {
        return input_err("tile set is not an admissible 2-D tiling");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hwt::bestbasis::{best_basis_1d, best_basis_2d, sample_tiling_2d};
    use crate::hwt::dictionary::ghwt_analyze;
    use crate::seed::derive_rng;
    use crate::treegeo::{build_tree, gaussian_affinity, uniform_tree};
    use rand::Rng;

    fn random_mat(p: usize, n: usize, seed: u64) -> Mat {
        let mut rng = derive_rng(seed, "tensor-test", 0);
        Mat::from_fn(p, n, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_tree(n: usize, seed: u64) -> PartitionTree {
        let mut rng = derive_rng(seed, "tensor-tree", 0);
        let pts = Mat::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
        build_tree(&gaussian_affinity(&pts).unwrap()).unwrap()
    }

    #[test]
    fn rank_one_coefficients_are_separable() {
        let f = [1.0, -0.5, 2.0, 0.25];
        let gvec = [0.5, 1.5, -1.0, 0.75, 2.0, -0.25];
        let m = Mat::from_fn(4, 6, |i, j| f[i] * gvec[j]);
        let tr = uniform_tree(4);
        let tc = random_tree(6, 2);
        let ta = tensor_analyze(&m, &tr, &tc).unwrap();
        let df = ghwt_analyze(&f, &tr).unwrap();
        let dg = ghwt_analyze(&gvec, &tc).unwrap();
        for lr in 0..tr.n_levels() {
            for (fr, fo) in tr.levels()[lr].iter().enumerate() {
                for tagr in 0..fo.len() {
                    let pa = AtomId { level: lr, folder: fr, tag: tagr };
                    for lc in 0..tc.n_levels() {
                        for (fc, co) in tc.levels()[lc].iter().enumerate() {
                            for tagc in 0..co.len() {
                                let qa = AtomId { level: lc, folder: fc, tag: tagc };
                                let c2d = ta.coeff(&pa, &qa).unwrap();
                                let c1 = df.coeff(&pa).unwrap() * dg.coeff(&qa).unwrap();
                                assert!(
                                    (c2d - c1).abs() < 1e-12,
                                    "tile ({pa:?},{qa:?}): {c2d} vs {c1}"
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn all_ones_has_single_root_coefficient() {
        let m = Mat::from_vec(4, 4, vec![1.0; 16]);
        let tr = uniform_tree(4);
        let tc = uniform_tree(4);
        let ta = tensor_analyze(&m, &tr, &tc).unwrap();
        let root = AtomId { level: 0, folder: 0, tag: 0 };
        assert!((ta.coeff(&root, &root).unwrap() - 4.0).abs() < 1e-12);
        // Every other coefficient on the root level vanishes.
        for tagr in 0..4 {
            for tagc in 0..4 {
                if tagr == 0 && tagc == 0 {
                    continue;
                }
                let c = ta
                    .coeff(
                        &AtomId { level: 0, folder: 0, tag: tagr },
                        &AtomId { level: 0, folder: 0, tag: tagc },
                    )
                    .unwrap();
                assert!(c.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parseval_on_sampled_tilings() {
        let m = random_mat(8, 8, 9);
        let tr = random_tree(8, 3);
        let tc = random_tree(8, 4);
        let ta = tensor_analyze(&m, &tr, &tc).unwrap();
        let energy = m.frob_norm_sq();
        let mut rng = derive_rng(11, "parseval", 0);
        for _ in 0..10 {
            let tiles = sample_tiling_2d(&ta.row_dict, &ta.col_dict, &mut rng);
            let values = ta.coeffs_for(&tiles).unwrap();
            let e: f64 = values.iter().map(|v| v * v).sum();
            assert!((e - energy).abs() < 1e-8 * energy, "parseval {e} vs {energy}");
        }
    }

    #[test]
    fn transform_inverse_round_trip() {
        let m = random_mat(16, 16, 5);
        let tr = random_tree(16, 6);
        let tc = random_tree(16, 7);
        let ta = tensor_analyze(&m, &tr, &tc).unwrap();
        let basis = best_basis_2d(&ta, 1.0).unwrap();
        let cm = transform_2d(&m, &basis).unwrap();
        let back = inverse_2d(&cm, &basis).unwrap();
        let err = m.sub(&back).unwrap().frob_norm();
        assert!(err < 1e-10, "round trip err {err}");
        assert!((cm.energy() - m.frob_norm_sq()).abs() < 1e-8 * m.frob_norm_sq());
    }

    #[test]
    fn zero_matrix_all_coefficients_zero() {
        let m = Mat::zeros(4, 6);
        let tr = uniform_tree(4);
        let tc = random_tree(6, 8);
        let ta = tensor_analyze(&m, &tr, &tc).unwrap();
        let basis = best_basis_2d(&ta, 1.0).unwrap();
        let cm = transform_2d(&m, &basis).unwrap();
        assert!(cm.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_entry_matrix_has_unit_energy() {
        let mut m = Mat::zeros(4, 4);
        m.set(2, 1, 1.0);
        let tr = uniform_tree(4);
        let tc = uniform_tree(4);
        let ta = tensor_analyze(&m, &tr, &tc).unwrap();
        let basis = best_basis_2d(&ta, 1.0).unwrap();
        let cm = transform_2d(&m, &basis).unwrap();
        assert!((cm.energy() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let m = random_mat(4, 6, 1);
        let tr = uniform_tree(4);
        let tc = random_tree(6, 9);
        assert!(tensor_analyze(&m, &tc, &tr).is_err());
        let ta = tensor_analyze(&m, &tr, &tc).unwrap();
        let basis = best_basis_2d(&ta, 1.0).unwrap();
        assert!(transform_2d(&random_mat(6, 4, 2), &basis).is_err());
        // Coverage violation: drop one tile.
        let mut broken = basis.clone();
        broken.tiles.pop();
        assert!(transform_2d(&m, &broken).is_err());
        let cm = transform_2d(&m, &basis).unwrap();
        let mut wrong_keys = cm.clone();
        wrong_keys.tiles.swap(0, 1);
        assert!(inverse_2d(&wrong_keys, &basis).is_err());
    }

    #[test]
    fn separable_best_basis_beats_product_of_1d_bases() {
        let f = [2.0, 2.1, -1.0, -0.9, 0.1, 0.12, 3.0, 2.9];
        let gv = [1.0, 1.05, -2.0, -1.9, 0.5, 0.45, 0.0, 0.05];
        let m = Mat::from_fn(8, 8, |i, j| f[i] * gv[j]);
        let tr = uniform_tree(8);
        let tc = uniform_tree(8);
        let ta = tensor_analyze(&m, &tr, &tc).unwrap();
        let basis = best_basis_2d(&ta, 1.0).unwrap();
        let df = ghwt_analyze(&f, &tr).unwrap();
        let dg = ghwt_analyze(&gv, &tc).unwrap();
        let (bf, _) = best_basis_1d(&df, 1.0).unwrap();
        let (bg, _) = best_basis_1d(&dg, 1.0).unwrap();
        let mut product_tiles = Vec::new();
        for a in &bf {
            for b in &bg {
                product_tiles.push((*a, *b));
            }
        }
        let product_cost: f64 =
            ta.coeffs_for(&product_tiles).unwrap().iter().map(|v| v.abs()).sum();
        assert!(
            basis.cost <= product_cost + 1e-10,
            "2d cost {} vs product cost {}",
            basis.cost,
            product_cost
        );
    }
}
