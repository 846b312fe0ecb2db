//! The generalized Haar-Walsh dictionary over one partition tree.
//!
//! Coefficients live on a `levels x N` grid of positions; position
//! `folder.start + tag` at a level holds the folder's atom with that tag.
//! Atoms are generated bottom-up: a folder with two children pairs up its
//! children's same-tag atoms into sum/difference combinations (tags 2t and
//! 2t+1, with the classical Walsh sign `(-1)^t` on the second child and
//! size-weighted averaging at t = 0) and passes unpaired atoms through.
//! Folders with more children fold pairwise through temporary slots.
//!
//! Every folder carries a "band tree", the dyadic hierarchy over its
//! nominal tags recording how atoms were generated; band nodes are the
//! frequency tiles the best-basis search splits.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::treegeo::PartitionTree;

/// Dictionary atom address: level (0 = root), folder index within the
/// level, and tag (slot within the folder, 0 = scaling).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AtomId {
    pub level: usize,
    pub folder: usize,
    pub tag: usize,
}

pub(crate) const NONE: u32 = u32::MAX;

/// Orthogonal 2x2 combination applied to a pair of child coefficients.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Butterfly {
    /// Size-weighted scaling/Haar step: even = wl*a + wr*b, odd = wr*a - wl*b.
    Scaling { wl: f64, wr: f64 },
    /// Walsh step: even = (a + s*b)/sqrt(2), odd = (a - s*b)/sqrt(2).
    Walsh { sign: f64 },
}

impl Butterfly {
    #[inline]
    fn forward(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            Butterfly::Scaling { wl, wr } => (wl * a + wr * b, wr * a - wl * b),
            Butterfly::Walsh { sign } => {
                let s = std::f64::consts::FRAC_1_SQRT_2;
                ((a + sign * b) * s, (a - sign * b) * s)
            }
        }
    }

    #[inline]
    fn inverse(self, e: f64, o: f64) -> (f64, f64) {
        match self {
            Butterfly::Scaling { wl, wr } => (wl * e + wr * o, wr * e - wl * o),
            Butterfly::Walsh { sign } => {
                let s = std::f64::consts::FRAC_1_SQRT_2;
                ((e + o) * s, sign * (e - o) * s)
            }
        }
    }
}

/// Forward-read slot: the level below, or folder-local scratch.
#[derive(Debug, Clone, Copy)]
enum Src {
    Lower(u32),
    Temp(u32),
}

/// Forward-write slot: the level being built, or folder-local scratch.
#[derive(Debug, Clone, Copy)]
enum Dst {
    Upper(u32),
    Temp(u32),
}

/// One step of a level's transform program.
#[derive(Debug, Clone, Copy)]
enum Instr {
    Pass { src: Src, dst: Dst },
    Bfly { a: Src, b: Src, e: Dst, o: Dst, kind: Butterfly },
}

#[derive(Debug, Default)]
struct LevelProgram {
    instrs: Vec<Instr>,
    n_temps: usize,
}

impl LevelProgram {
    /// Level li coefficients from level li+1 coefficients.
    fn forward(&self, upper: &mut [f64], lower: &[f64], temps: &mut Vec<f64>) {
        temps.clear();
        temps.resize(self.n_temps, 0.0);
        for instr in &self.instrs {
            match *instr {
                Instr::Pass { src, dst } => {
                    let v = read(src, lower, temps);
                    write(dst, v, upper, temps);
                }
                Instr::Bfly { a, b, e, o, kind } => {
                    let (ev, ov) = kind.forward(read(a, lower, temps), read(b, lower, temps));
                    write(e, ev, upper, temps);
                    write(o, ov, upper, temps);
                }
            }
        }
    }

    /// Transpose: push level li values down into level li+1 (accumulating).
    fn inverse(&self, upper: &[f64], lower: &mut [f64], temps: &mut Vec<f64>) {
        temps.clear();
        temps.resize(self.n_temps, 0.0);
        for instr in self.instrs.iter().rev() {
            match *instr {
                Instr::Pass { src, dst } => {
                    let v = read_dst(dst, upper, temps);
                    add(src, v, lower, temps);
                }
                Instr::Bfly { a, b, e, o, kind } => {
                    let (av, bv) =
                        kind.inverse(read_dst(e, upper, temps), read_dst(o, upper, temps));
                    add(a, av, lower, temps);
                    add(b, bv, lower, temps);
                }
            }
        }
    }
}

#[inline]
fn read(src: Src, lower: &[f64], temps: &[f64]) -> f64 {
    match src {
        Src::Lower(i) => lower[i as usize],
        Src::Temp(i) => temps[i as usize],
    }
}

#[inline]
fn write(dst: Dst, v: f64, upper: &mut [f64], temps: &mut [f64]) {
    match dst {
        Dst::Upper(i) => upper[i as usize] = v,
        Dst::Temp(i) => temps[i as usize] = v,
    }
}

#[inline]
fn read_dst(dst: Dst, upper: &[f64], temps: &[f64]) -> f64 {
    match dst {
        Dst::Upper(i) => upper[i as usize],
        Dst::Temp(i) => temps[i as usize],
    }
}

#[inline]
fn add(src: Src, v: f64, lower: &mut [f64], temps: &mut [f64]) {
    match src {
        Src::Lower(i) => lower[i as usize] += v,
        Src::Temp(i) => temps[i as usize] += v,
    }
}

/// One node of a folder's band tree: a dyadic range of nominal tags.
#[derive(Debug, Clone)]
pub(crate) struct BandNode {
    pub left: u32,
    pub right: u32,
    /// Slot holding this atom when the node is a leaf (coefficient position
    /// for stored arenas, temp id for fold intermediates), else NONE.
    pub atom_pos: u32,
    /// Nominal tag parity (leaves only).
    pub parity: bool,
    /// Band nodes in the two source arenas whose merge produced this node.
    pub src1: u32,
    pub src2: u32,
    /// Best-basis state id, when this node is effective.
    pub state: u32,
    pub n_atoms: u32,
}

impl BandNode {
    fn new() -> Self {
        BandNode {
            left: NONE,
            right: NONE,
            atom_pos: NONE,
            parity: false,
            src1: NONE,
            src2: NONE,
            state: NONE,
            n_atoms: 0,
        }
    }

    pub(crate) fn is_leaf(&self) -> bool {
        self.left == NONE && self.right == NONE
    }
}

/// Band-tree arena of one folder (or fold intermediate).
#[derive(Debug, Clone)]
pub(crate) struct BandArena {
    pub nodes: Vec<BandNode>,
    pub root: u32,
    /// log2 of the nominal tag range covered by the root.
    pub width: u32,
}

/// Best-basis DP state on one axis: a (folder, band) tile.
#[derive(Debug, Clone)]
pub(crate) struct AxisState {
    /// Frequency split into two sub-bands of the same folder.
    pub freq: Option<(u32, u32)>,
    /// Time split into bands of the two child folders.
    pub time: Option<(u32, u32)>,
    /// Linear atom index (level * n + pos) when this state is one atom.
    pub atom: u32,
    pub height: u32,
}

/// Tree-dependent structure of the dictionary: transform programs, band
/// trees and the precomputed tiling states. Independent of analyzed data.
#[derive(Debug)]
pub struct TreeDictionary {
    tree: PartitionTree,
    n: usize,
    n_levels: usize,
    programs: Vec<LevelProgram>,
    states: Vec<AxisState>,
    root_state: u32,
    atom_state: Vec<u32>,
    max_temps: usize,
}

impl TreeDictionary {
    pub fn new(tree: &PartitionTree) -> Result<Self> {
        tree.validate()?;
        let n = tree.n_leaves();
        let n_levels = tree.n_levels();
        let mut programs: Vec<LevelProgram> = Vec::with_capacity(n_levels.saturating_sub(1));
        let mut arenas: Vec<Vec<BandArena>> = vec![Vec::new(); n_levels];

        let finest = n_levels - 1;
        for f in &tree.levels()[finest] {
            let mut node = BandNode::new();
            node.atom_pos = f.start as u32;
            node.n_atoms = 1;
            arenas[finest].push(BandArena { nodes: vec![node], root: 0, width: 0 });
        }

        for li in (0..finest).rev() {
            let mut program = LevelProgram::default();
            let mut level_arenas = Vec::with_capacity(tree.levels()[li].len());
            for f in &tree.levels()[li] {
                let arena = match f.children.len() {
                    0 => unreachable!("non-finest folder without children"),
                    1 => {
                        let child = &arenas[li + 1][f.children[0]];
                        for node in &child.nodes {
                            if node.is_leaf() {
                                program.instrs.push(Instr::Pass {
                                    src: Src::Lower(node.atom_pos),
                                    dst: Dst::Upper(node.atom_pos),
                                });
                            }
                        }
                        // Same structure and positions, sources remembered.
                        let mut nodes = child.nodes.clone();
                        for (id, node) in nodes.iter_mut().enumerate() {
                            node.src1 = id as u32;
                            node.src2 = NONE;
                            node.state = NONE;
                        }
                        BandArena { nodes, root: child.root, width: child.width }
                    }
                    _ => {
                        let sizes: Vec<usize> = f
                            .children
                            .iter()
                            .map(|&c| tree.levels()[li + 1][c].len())
                            .collect();
                        let mut acc = arenas[li + 1][f.children[0]].clone();
                        let mut acc_size = sizes[0];
                        let mut acc_is_lower = true;
                        for (k, &c) in f.children.iter().enumerate().skip(1) {
                            let last = k + 1 == f.children.len();
                            let rhs = &arenas[li + 1][c];
                            acc = merge_arenas(
                                &acc,
                                acc_size,
                                acc_is_lower,
                                rhs,
                                sizes[k],
                                f.start as u32,
                                last,
                                &mut program,
                            );
                            acc_size += sizes[k];
                            acc_is_lower = false;
                        }
                        acc
                    }
                };
                level_arenas.push(arena);
            }
            arenas[li] = level_arenas;
            programs.push(program);
        }
        programs.reverse(); // programs[li] maps level li+1 -> level li

        let (states, root_state, atom_state) = build_states(tree, &mut arenas, n, n_levels);
        let max_temps = programs.iter().map(|p| p.n_temps).max().unwrap_or(0);
        Ok(TreeDictionary {
            tree: tree.clone(),
            n,
            n_levels,
            programs,
            states,
            root_state,
            atom_state,
            max_temps,
        })
    }

    pub fn tree(&self) -> &PartitionTree {
        &self.tree
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_levels(&self) -> usize {
        self.n_levels
    }

    pub(crate) fn states(&self) -> &[AxisState] {
        &self.states
    }

    pub(crate) fn root_state(&self) -> u32 {
        self.root_state
    }

    pub(crate) fn atom_state(&self, lin: usize) -> u32 {
        self.atom_state[lin]
    }

    pub(crate) fn n_atoms(&self) -> usize {
        self.n * self.n_levels
    }

    /// Linear index of an atom: `level * n + position`.
    pub fn atom_lin(&self, atom: &AtomId) -> Result<usize> {
        if atom.level >= self.n_levels {
            return input_err("atom level out of range");
        }
        let folders = &self.tree.levels()[atom.level];
        let f = folders
            .get(atom.folder)
            .ok_or_else(|| crate::error::EowsError::Input("atom folder out of range".into()))?;
        if atom.tag >= f.len() {
            return input_err("atom tag exceeds folder size");
        }
        Ok(atom.level * self.n + f.start + atom.tag)
    }

    pub fn atom_from_lin(&self, lin: usize) -> AtomId {
        let level = lin / self.n;
        let pos = lin % self.n;
        let folders = &self.tree.levels()[level];
        let fi = folders.partition_point(|f| f.end <= pos);
        AtomId { level, folder: fi, tag: pos - folders[fi].start }
    }

    /// Analyze a vector: the full coefficient grid, one array per level.
    pub fn analyze(&self, v: &[f64]) -> Result<Vec<Vec<f64>>> {
        if v.len() != self.n {
            return input_err("ghwt_analyze: vector length must equal the tree leaf count");
        }
        let mut levels = vec![vec![0.0; self.n]; self.n_levels];
        self.analyze_into(v, &mut levels, &mut Vec::new());
        Ok(levels)
    }

    /// Analysis into caller-provided buffers (levels sized `n_levels x n`).
    pub(crate) fn analyze_into(&self, v: &[f64], levels: &mut [Vec<f64>], temps: &mut Vec<f64>) {
        for (pos, &orig) in self.tree.leaf_order().iter().enumerate() {
            levels[self.n_levels - 1][pos] = v[orig];
        }
        for li in (0..self.n_levels - 1).rev() {
            let (upper, lower) = {
                let (a, b) = levels.split_at_mut(li + 1);
                (&mut a[li], &b[0])
            };
            self.programs[li].forward(upper, lower, temps);
        }
    }

    /// Linear partial synthesis: push seeded coefficients down to leaf
    /// samples (absent coefficients are zero) and undo the leaf ordering.
    pub(crate) fn synthesize_seeds(&self, seeds: &[(usize, f64)]) -> Vec<f64> {
        let mut levels = vec![vec![0.0; self.n]; self.n_levels];
        for &(lin, value) in seeds {
            levels[lin / self.n][lin % self.n] += value;
        }
        let mut temps = Vec::new();
        self.sweep_down(&mut levels, &mut temps);
        let mut out = vec![0.0; self.n];
        for (pos, &orig) in self.tree.leaf_order().iter().enumerate() {
            out[orig] = levels[self.n_levels - 1][pos];
        }
        out
    }

    /// As `synthesize_seeds` but over dense prefilled level buffers, leaving
    /// the result (in leaf order) in the finest level.
    pub(crate) fn sweep_down(&self, levels: &mut [Vec<f64>], temps: &mut Vec<f64>) {
        for li in 0..self.n_levels - 1 {
            let (upper, lower) = {
                let (a, b) = levels.split_at_mut(li + 1);
                (&a[li], &mut b[0])
            };
            self.programs[li].inverse(upper, lower, temps);
        }
    }

    pub(crate) fn level_buffers(&self) -> Vec<Vec<f64>> {
        vec![vec![0.0; self.n]; self.n_levels]
    }

    pub(crate) fn scratch_capacity(&self) -> usize {
        self.max_temps
    }

    /// Checks that `atoms` plausibly forms an orthonormal tiling: exactly N
    /// distinct atoms whose analysis-synthesis round-trips deterministic
    /// generic probes. Non-tilings fail the probes for generic inputs.
    pub(crate) fn validate_tiling(&self, atoms: &[AtomId]) -> Result<()> {
        if atoms.len() != self.n {
            return input_err(format!(
                "atom set of size {} is not a tiling of {} leaves",
                atoms.len(),
                self.n
            ));
        }
        let mut lins = Vec::with_capacity(atoms.len());
        for a in atoms {
            lins.push(self.atom_lin(a)?);
        }
        let mut sorted = lins.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return input_err("duplicate atoms in basis");
        }
        for probe_id in 0..2u64 {
            let v: Vec<f64> =
                (0..self.n).map(|i| ((i as f64 + 1.3) * (1.7 + probe_id as f64)).sin()).collect();
            let grid = self.analyze(&v)?;
            let seeds: Vec<(usize, f64)> =
                lins.iter().map(|&lin| (lin, grid[lin / self.n][lin % self.n])).collect();
            let back = self.synthesize_seeds(&seeds);
            let err: f64 = v.iter().zip(&back).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let scale: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if err > 1e-8 * scale.max(1.0) {
                return input_err("atom set is not an admissible tiling");
            }
        }
        Ok(())
    }
}

struct MergeCtx<'a> {
    out: Vec<BandNode>,
    left_arena: &'a BandArena,
    right_arena: &'a BandArena,
    wl: f64,
    wr: f64,
    gens: Vec<(u32, LeafGen)>,
}

#[derive(Clone, Copy)]
enum LeafGen {
    PassLeft { slot: u32 },
    PassRight { slot: u32 },
    PairEven { left: u32, right: u32, kind: Butterfly },
    PairOdd,
}

/// Merge two band trees into the parent's band tree, emitting transform
/// instructions into `program`. The left source reads from the lower level
/// when `left_is_lower`, else from temp slots (fold intermediates); the
/// right source always reads from the lower level. When `last` the outputs
/// are the parent folder's coefficient positions (assigned in band order
/// from `start`), otherwise fresh temp slots.
#[allow(clippy::too_many_arguments)]
fn merge_arenas(
    left: &BandArena,
    left_size: usize,
    left_is_lower: bool,
    right: &BandArena,
    right_size: usize,
    start: u32,
    last: bool,
    program: &mut LevelProgram,
) -> BandArena {
    let total = (left_size + right_size) as f64;
    let mut ctx = MergeCtx {
        out: Vec::new(),
        left_arena: left,
        right_arena: right,
        wl: (left_size as f64 / total).sqrt(),
        wr: (right_size as f64 / total).sqrt(),
        gens: Vec::new(),
    };
    let w = left.width.max(right.width);
    let root =
        merge_rec(&mut ctx, Some(left.root), left.width, Some(right.root), right.width, w, true)
            .expect("merging nonempty arenas");
    let mut arena = BandArena { nodes: ctx.out, root, width: w + 1 };

    // Assign output slots: coefficient positions in band order for the
    // final merge, temp ids otherwise.
    if last {
        let mut slot = start;
        let mut stack = vec![root];
        let mut order = Vec::new();
        while let Some(id) = stack.pop() {
            let node = &arena.nodes[id as usize];
            if node.is_leaf() {
                order.push(id);
                continue;
            }
            if node.right != NONE {
                stack.push(node.right);
            }
            if node.left != NONE {
                stack.push(node.left);
            }
        }
        for id in order {
            arena.nodes[id as usize].atom_pos = slot;
            slot += 1;
        }
    } else {
        let base = program.n_temps as u32;
        for (k, &(id, _)) in ctx.gens.iter().enumerate() {
            arena.nodes[id as usize].atom_pos = base + k as u32;
        }
        program.n_temps += ctx.gens.len();
    }

    let left_src = |slot: u32| {
        if left_is_lower {
            Src::Lower(slot)
        } else {
            Src::Temp(slot)
        }
    };
    let dst_of = |arena: &BandArena, id: u32| {
        if last {
            Dst::Upper(arena.nodes[id as usize].atom_pos)
        } else {
            Dst::Temp(arena.nodes[id as usize].atom_pos)
        }
    };
    let mut iter = ctx.gens.iter().peekable();
    while let Some(&(id, gen)) = iter.next() {
        match gen {
            LeafGen::PassLeft { slot } => program
                .instrs
                .push(Instr::Pass { src: left_src(slot), dst: dst_of(&arena, id) }),
            LeafGen::PassRight { slot } => program
                .instrs
                .push(Instr::Pass { src: Src::Lower(slot), dst: dst_of(&arena, id) }),
            LeafGen::PairEven { left, right, kind } => {
                let odd_id = iter.peek().expect("odd leaf follows its even sibling").0;
                iter.next();
                program.instrs.push(Instr::Bfly {
                    a: left_src(left),
                    b: Src::Lower(right),
                    e: dst_of(&arena, id),
                    o: dst_of(&arena, odd_id),
                    kind,
                });
            }
            LeafGen::PairOdd => unreachable!("odd leaves are consumed by their even sibling"),
        }
    }
    arena
}

/// Recursive band merge. `a`/`b` are source nodes covering the same nominal
/// range of width `2^w`; narrower content sits in the left part. Returns
/// the parent node covering the doubled nominal range.
fn merge_rec(
    ctx: &mut MergeCtx,
    a: Option<u32>,
    wa: u32,
    b: Option<u32>,
    wb: u32,
    w: u32,
    leftmost: bool,
) -> Option<u32> {
    if a.is_none() && b.is_none() {
        return None;
    }
    if w == 0 {
        // (parity, slot) of the width-0 source leaves.
        let la = a.map(|id| {
            let n = &ctx.left_arena.nodes[id as usize];
            debug_assert!(n.is_leaf());
            (n.parity, n.atom_pos)
        });
        let lb = b.map(|id| {
            let n = &ctx.right_arena.nodes[id as usize];
            debug_assert!(n.is_leaf());
            (n.parity, n.atom_pos)
        });
        let mut parent = BandNode::new();
        parent.src1 = a.unwrap_or(NONE);
        parent.src2 = b.unwrap_or(NONE);
        match (la, lb) {
            (Some((pa, slot_a)), Some((pb, slot_b))) => {
                debug_assert_eq!(pa, pb, "paired leaves share tag parity");
                let kind = if leftmost {
                    Butterfly::Scaling { wl: ctx.wl, wr: ctx.wr }
                } else {
                    Butterfly::Walsh { sign: if pa { -1.0 } else { 1.0 } }
                };
                let even_id = push(&mut ctx.out, leaf_node(false));
                ctx.gens
                    .push((even_id, LeafGen::PairEven { left: slot_a, right: slot_b, kind }));
                let odd_id = push(&mut ctx.out, leaf_node(true));
                ctx.gens.push((odd_id, LeafGen::PairOdd));
                parent.left = even_id;
                parent.right = odd_id;
                parent.n_atoms = 2;
            }
            (Some((_, slot)), None) => {
                let id = push(&mut ctx.out, leaf_node(false));
                ctx.gens.push((id, LeafGen::PassLeft { slot }));
                parent.left = id;
                parent.n_atoms = 1;
            }
            (None, Some((_, slot))) => {
                let id = push(&mut ctx.out, leaf_node(true));
                ctx.gens.push((id, LeafGen::PassRight { slot }));
                parent.right = id;
                parent.n_atoms = 1;
            }
            (None, None) => unreachable!(),
        }
        return Some(push(&mut ctx.out, parent));
    }

    let (al, ar, wa_next) = split_input(ctx.left_arena, a, wa, w);
    let (bl, br, wb_next) = split_input(ctx.right_arena, b, wb, w);
    let left = merge_rec(ctx, al, wa_next, bl, wb_next, w - 1, leftmost);
    let right = merge_rec(ctx, ar, wa_next, br, wb_next, w - 1, false);
    let mut parent = BandNode::new();
    parent.left = left.unwrap_or(NONE);
    parent.right = right.unwrap_or(NONE);
    parent.src1 = a.unwrap_or(NONE);
    parent.src2 = b.unwrap_or(NONE);
    parent.n_atoms = left.map_or(0, |id| ctx.out[id as usize].n_atoms)
        + right.map_or(0, |id| ctx.out[id as usize].n_atoms);
    Some(push(&mut ctx.out, parent))
}

fn leaf_node(parity: bool) -> BandNode {
    let mut node = BandNode::new();
    node.parity = parity;
    node.n_atoms = 1;
    node
}

fn split_input(
    arena: &BandArena,
    node: Option<u32>,
    w_node: u32,
    w: u32,
) -> (Option<u32>, Option<u32>, u32) {
    match node {
        None => (None, None, w.saturating_sub(1)),
        Some(id) => {
            if w_node == w {
                let n = &arena.nodes[id as usize];
                let l = if n.left == NONE { None } else { Some(n.left) };
                let r = if n.right == NONE { None } else { Some(n.right) };
                (l, r, w - 1)
            } else {
                // Entire content lies in the left half of the wider range.
                debug_assert!(w_node < w);
                (Some(id), None, w_node)
            }
        }
    }
}

fn push(out: &mut Vec<BandNode>, node: BandNode) -> u32 {
    let id = out.len() as u32;
    out.push(node);
    id
}

/// Contract single-child chains to the first leaf or two-child node.
fn effective(arena: &BandArena, mut id: u32) -> u32 {
    loop {
        let n = &arena.nodes[id as usize];
        if n.is_leaf() {
            return id;
        }
        match (n.left, n.right) {
            (l, r) if l != NONE && r != NONE => return id,
            (l, _) if l != NONE => id = l,
            (_, r) if r != NONE => id = r,
            _ => unreachable!("band node with no children and no atom"),
        }
    }
}

/// Enumerate DP states over all (level, folder, effective band node) tiles
/// and wire their frequency/time split links plus heights.
fn build_states(
    tree: &PartitionTree,
    arenas: &mut [Vec<BandArena>],
    n: usize,
    n_levels: usize,
) -> (Vec<AxisState>, u32, Vec<u32>) {
    let mut states: Vec<AxisState> = Vec::new();
    let mut atom_state = vec![NONE; n * n_levels];
    for li in (0..n_levels).rev() {
        for fi in 0..arenas[li].len() {
            let root = arenas[li][fi].root;
            let mut order = Vec::new();
            let mut stack = vec![(root, false)];
            while let Some((id, expanded)) = stack.pop() {
                if expanded {
                    order.push(id);
                    continue;
                }
                stack.push((id, true));
                let node = &arenas[li][fi].nodes[id as usize];
                if node.left != NONE {
                    stack.push((node.left, false));
                }
                if node.right != NONE {
                    stack.push((node.right, false));
                }
            }
            for id in order {
                let eff = effective(&arenas[li][fi], id);
                if eff != id {
                    let st = arenas[li][fi].nodes[eff as usize].state;
                    arenas[li][fi].nodes[id as usize].state = st;
                    continue;
                }
                let node = arenas[li][fi].nodes[id as usize].clone();
                let mut state =
                    AxisState { freq: None, time: None, atom: NONE, height: 0 };
                if node.is_leaf() {
                    state.atom = (li * n + node.atom_pos as usize) as u32;
                } else {
                    let ls =
                        arenas[li][fi].nodes[effective(&arenas[li][fi], node.left) as usize].state;
                    let rs = arenas[li][fi].nodes[effective(&arenas[li][fi], node.right) as usize]
                        .state;
                    debug_assert!(ls != NONE && rs != NONE);
                    state.freq = Some((ls, rs));
                    state.height =
                        states[ls as usize].height.max(states[rs as usize].height) + 1;
                }
                // Time split: both sources present and the folder has exactly
                // two children (fold intermediates are not addressable).
                let folder = &tree.levels()[li][fi];
                if node.src1 != NONE && node.src2 != NONE && folder.children.len() == 2 {
                    let a1 = &arenas[li + 1][folder.children[0]];
                    let a2 = &arenas[li + 1][folder.children[1]];
                    let s1 = a1.nodes[effective(a1, node.src1) as usize].state;
                    let s2 = a2.nodes[effective(a2, node.src2) as usize].state;
                    debug_assert!(s1 != NONE && s2 != NONE);
                    state.time = Some((s1, s2));
                    state.height = state
                        .height
                        .max(states[s1 as usize].height.max(states[s2 as usize].height) + 1);
                }
                let sid = states.len() as u32;
                if state.atom != NONE {
                    atom_state[state.atom as usize] = sid;
                }
                states.push(state);
                arenas[li][fi].nodes[id as usize].state = sid;
            }
        }
    }
    let root_arena = &arenas[0][0];
    let root_state = root_arena.nodes[effective(root_arena, root_arena.root) as usize].state;
    (states, root_state, atom_state)
}

/// Full dictionary analysis of one vector: the tree structure plus the
/// complete coefficient grid (N coefficients per level).
#[derive(Debug)]
pub struct Dictionary {
    pub meta: Arc<TreeDictionary>,
    pub levels: Vec<Vec<f64>>,
}

impl Dictionary {
    pub fn coeff(&self, atom: &AtomId) -> Result<f64> {
        let lin = self.meta.atom_lin(atom)?;
        Ok(self.levels[lin / self.meta.n()][lin % self.meta.n()])
    }

    /// Restrict the analysis to a chosen atom set.
    pub fn restrict(&self, atoms: &[AtomId]) -> Result<Vec<(AtomId, f64)>> {
        atoms.iter().map(|a| Ok((*a, self.coeff(a)?))).collect()
    }
}

/// Analyze a vector against the Haar-Walsh dictionary of a partition tree.
pub fn ghwt_analyze(v: &[f64], tree: &PartitionTree) -> Result<Dictionary> {
    let meta = Arc::new(TreeDictionary::new(tree)?);
    let levels = meta.analyze(v)?;
    Ok(Dictionary { meta, levels })
}

/// Synthesize a vector from coefficients on a chosen basis (an admissible
/// tiling of the dictionary).
pub fn ghwt_synthesize(coeffs: &[(AtomId, f64)], meta: &TreeDictionary) -> Result<Vec<f64>> {
    let atoms: Vec<AtomId> = coeffs.iter().map(|(a, _)| *a).collect();
    meta.validate_tiling(&atoms)?;
    let mut seeds = Vec::with_capacity(coeffs.len());
    for (a, v) in coeffs {
        seeds.push((meta.atom_lin(a)?, *v));
    }
    Ok(meta.synthesize_seeds(&seeds))
}

/// Support (original indices) and values of one dictionary atom; the values
/// form a unit vector.
pub fn atom_support(meta: &TreeDictionary, atom: &AtomId) -> Result<(Vec<usize>, Vec<f64>)> {
    let lin = meta.atom_lin(atom)?;
    let dense = meta.synthesize_seeds(&[(lin, 1.0)]);
    let f = &meta.tree().levels()[atom.level][atom.folder];
    let mut idx = Vec::with_capacity(f.len());
    let mut values = Vec::with_capacity(f.len());
    for pos in f.start..f.end {
        let orig = meta.tree().leaf_order()[pos];
        idx.push(orig);
        values.push(dense[orig]);
    }
    Ok((idx, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::derive_rng;
    use crate::treegeo::{build_tree, gaussian_affinity, uniform_tree, Folder};
    use crate::Mat;
    use rand::Rng;

    fn random_tree(n: usize, seed: u64) -> PartitionTree {
        let mut rng = derive_rng(seed, "hwt-tree", 0);
        let pts = Mat::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
        build_tree(&gaussian_affinity(&pts).unwrap()).unwrap()
    }

    #[test]
    fn haar_pair_coefficients() {
        let tree = uniform_tree(2);
        let d = ghwt_analyze(&[3.0, 1.0], &tree).unwrap();
        let s = 2.0f64.sqrt();
        assert!((d.levels[0][0] - 4.0 / s).abs() < 1e-14);
        assert!((d.levels[0][1] - 2.0 / s).abs() < 1e-14);
    }

    #[test]
    fn constant_vector_has_only_scaling_coefficients() {
        for tree in [uniform_tree(8), random_tree(11, 5)] {
            let v = vec![2.5; tree.n_leaves()];
            let d = ghwt_analyze(&v, &tree).unwrap();
            for (li, level) in tree.levels().iter().enumerate() {
                for f in level {
                    let scaling = d.levels[li][f.start];
                    assert!((scaling - 2.5 * (f.len() as f64).sqrt()).abs() < 1e-12);
                    for pos in f.start + 1..f.end {
                        assert!(d.levels[li][pos].abs() < 1e-12);
                    }
                }
            }
        }
    }

    /// Classical Walsh functions on 2^k points via the doubling recursion.
    fn walsh_oracle(n_funcs: usize, len: usize) -> Vec<Vec<f64>> {
        fn w(n: usize, len: usize) -> Vec<f64> {
            if len == 1 {
                return vec![1.0];
            }
            let half = w(n / 2, len / 2);
            let sign = if (n / 2) % 2 == 0 { 1.0 } else { -1.0 };
            // W_{2m} appends (+(-1)^m) W_m, W_{2m+1} appends (-(-1)^m) W_m.
            let flip = if n % 2 == 0 { sign } else { -sign };
            let mut out = Vec::with_capacity(len);
            out.extend(half.iter().copied());
            out.extend(half.iter().map(|x| x * flip));
            out
        }
        (0..n_funcs).map(|n| w(n, len)).collect()
    }

    #[test]
    fn walsh_oracle_is_selfconsistent() {
        let ws = walsh_oracle(4, 4);
        assert_eq!(ws[0], vec![1.0, 1.0, 1.0, 1.0]);
        assert_eq!(ws[1], vec![1.0, 1.0, -1.0, -1.0]);
        assert_eq!(ws[2], vec![1.0, -1.0, -1.0, 1.0]);
        assert_eq!(ws[3], vec![1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn root_atoms_match_walsh_recursion_on_dyadic_tree() {
        let n = 8;
        let tree = uniform_tree(n);
        let meta = TreeDictionary::new(&tree).unwrap();
        let oracle = walsh_oracle(n, n);
        for tag in 0..n {
            let (idx, values) = atom_support(&meta, &AtomId { level: 0, folder: 0, tag }).unwrap();
            assert_eq!(idx, (0..n).collect::<Vec<_>>());
            let scale = (n as f64).sqrt();
            // Same up to a global sign flip.
            let mut max_err_pos: f64 = 0.0;
            let mut max_err_neg: f64 = 0.0;
            for (i, &v) in values.iter().enumerate() {
                max_err_pos = max_err_pos.max((v - oracle[tag][i] / scale).abs());
                max_err_neg = max_err_neg.max((v + oracle[tag][i] / scale).abs());
            }
            assert!(
                max_err_pos < 1e-12 || max_err_neg < 1e-12,
                "tag {tag}: {values:?} vs walsh {:?}",
                oracle[tag]
            );
            // Sequency: number of sign changes equals the tag.
            let mut changes = 0;
            for i in 1..n {
                if values[i].signum() != values[i - 1].signum() {
                    changes += 1;
                }
            }
            assert_eq!(changes, tag, "tag {tag} sequency");
        }
    }

    #[test]
    fn per_level_atoms_are_orthonormal() {
        for tree in [uniform_tree(16), random_tree(13, 7), random_tree(16, 8)] {
            let n = tree.n_leaves();
            let meta = TreeDictionary::new(&tree).unwrap();
            for li in 0..tree.n_levels() {
                let mut atoms = Vec::new();
                for (fi, f) in tree.levels()[li].iter().enumerate() {
                    for tag in 0..f.len() {
                        let (idx, values) =
                            atom_support(&meta, &AtomId { level: li, folder: fi, tag }).unwrap();
                        let mut dense = vec![0.0; n];
                        for (k, &i) in idx.iter().enumerate() {
                            dense[i] = values[k];
                        }
                        atoms.push(dense);
                    }
                }
                assert_eq!(atoms.len(), n);
                for a in 0..n {
                    for b in a..n {
                        let dot: f64 = atoms[a].iter().zip(&atoms[b]).map(|(x, y)| x * y).sum();
                        let expect = if a == b { 1.0 } else { 0.0 };
                        assert!(
                            (dot - expect).abs() < 1e-10,
                            "level {li} atoms {a},{b}: {dot}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn ternary_folder_dictionary_is_orthonormal() {
        // Hand-built tree with a 3-way root split: levels pad singletons.
        let levels = vec![
            vec![Folder { start: 0, end: 4, parent: None, children: vec![0, 1, 2] }],
            vec![
                Folder { start: 0, end: 2, parent: Some(0), children: vec![0, 1] },
                Folder { start: 2, end: 3, parent: Some(0), children: vec![2] },
                Folder { start: 3, end: 4, parent: Some(0), children: vec![3] },
            ],
            vec![
                Folder { start: 0, end: 1, parent: Some(0), children: vec![] },
                Folder { start: 1, end: 2, parent: Some(0), children: vec![] },
                Folder { start: 2, end: 3, parent: Some(1), children: vec![] },
                Folder { start: 3, end: 4, parent: Some(2), children: vec![] },
            ],
        ];
        let tree = PartitionTree::from_parts(levels, vec![0, 1, 2, 3]);
        tree.validate().unwrap();
        let meta = TreeDictionary::new(&tree).unwrap();
        let mut atoms = Vec::new();
        for tag in 0..4 {
            let (idx, values) = atom_support(&meta, &AtomId { level: 0, folder: 0, tag }).unwrap();
            let mut dense = vec![0.0; 4];
            for (k, &i) in idx.iter().enumerate() {
                dense[i] = values[k];
            }
            atoms.push(dense);
        }
        for a in 0..4 {
            for b in a..4 {
                let dot: f64 = atoms[a].iter().zip(&atoms[b]).map(|(x, y)| x * y).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-12, "atoms {a},{b}: {dot}");
            }
        }
        // Scaling atom is constant 1/2.
        for &v in &atoms[0] {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn finest_level_synthesis_is_identity_reordering() {
        let tree = random_tree(9, 3);
        let mut rng = derive_rng(4, "hwt-v", 0);
        let v: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d = ghwt_analyze(&v, &tree).unwrap();
        let finest = tree.n_levels() - 1;
        let atoms: Vec<AtomId> =
            (0..9).map(|f| AtomId { level: finest, folder: f, tag: 0 }).collect();
        let coeffs = d.restrict(&atoms).unwrap();
        let back = ghwt_synthesize(&coeffs, &d.meta).unwrap();
        for i in 0..9 {
            assert!((back[i] - v[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn level_zero_synthesis_matches_dense_walsh_multiply() {
        let n = 8;
        let tree = uniform_tree(n);
        let mut rng = derive_rng(6, "hwt-w", 0);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d = ghwt_analyze(&v, &tree).unwrap();
        let atoms: Vec<AtomId> = (0..n).map(|tag| AtomId { level: 0, folder: 0, tag }).collect();
        // Dense oracle: synthesize by explicit multiply with densified atoms.
        let mut dense = vec![0.0; n];
        for a in &atoms {
            let (idx, values) = atom_support(&d.meta, a).unwrap();
            let c = d.coeff(a).unwrap();
            for (k, &i) in idx.iter().enumerate() {
                dense[i] += c * values[k];
            }
        }
        let fast = ghwt_synthesize(&d.restrict(&atoms).unwrap(), &d.meta).unwrap();
        for i in 0..n {
            assert!((fast[i] - dense[i]).abs() < 1e-12);
            assert!((fast[i] - v[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_on_random_admissible_tilings() {
        let mut rng = derive_rng(10, "hwt-tilings", 0);
        for seed in 0..4u64 {
            let tree = random_tree(10 + seed as usize, seed);
            let n = tree.n_leaves();
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let d = ghwt_analyze(&v, &tree).unwrap();
            for k in 0..5u64 {
                let mut trng = derive_rng(seed * 10 + k, "hwt-tiling-choice", 0);
                let atoms = crate::hwt::sample_tiling_1d(&d.meta, &mut trng);
                let coeffs = d.restrict(&atoms).unwrap();
                let back = ghwt_synthesize(&coeffs, &d.meta).unwrap();
                let err: f64 =
                    v.iter().zip(&back).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                assert!(err < 1e-10, "round trip err {err}");
                let energy: f64 = coeffs.iter().map(|(_, c)| c * c).sum();
                let venergy: f64 = v.iter().map(|x| x * x).sum();
                assert!((energy - venergy).abs() < 1e-8 * venergy.max(1.0));
            }
        }
    }

    #[test]
    fn synthesize_rejects_non_tilings() {
        let tree = uniform_tree(4);
        let v = [1.0, 2.0, 3.0, 4.0];
        let d = ghwt_analyze(&v, &tree).unwrap();
        let atoms = vec![AtomId { level: 0, folder: 0, tag: 0 }];
        assert!(ghwt_synthesize(&d.restrict(&atoms).unwrap(), &d.meta).is_err());
        let dup = vec![
            AtomId { level: 0, folder: 0, tag: 0 },
            AtomId { level: 0, folder: 0, tag: 0 },
            AtomId { level: 0, folder: 0, tag: 2 },
            AtomId { level: 0, folder: 0, tag: 3 },
        ];
        assert!(ghwt_synthesize(&d.restrict(&dup).unwrap(), &d.meta).is_err());
        // Right count, no duplicates, but overlapping spans.
        let finest = tree.n_levels() - 1;
        let bad = vec![
            AtomId { level: 0, folder: 0, tag: 0 },
            AtomId { level: finest, folder: 0, tag: 0 },
            AtomId { level: finest, folder: 1, tag: 0 },
            AtomId { level: finest, folder: 2, tag: 0 },
        ];
        assert!(ghwt_synthesize(&d.restrict(&bad).unwrap(), &d.meta).is_err());
    }

    #[test]
    fn atom_support_unit_norm_and_examples() {
        let tree = uniform_tree(4);
        let meta = TreeDictionary::new(&tree).unwrap();
        let (idx, values) = atom_support(&meta, &AtomId { level: 0, folder: 0, tag: 0 }).unwrap();
        assert_eq!(idx.len(), 4);
        for &v in &values {
            assert!((v - 0.5).abs() < 1e-14);
        }
        let tree2 = uniform_tree(2);
        let meta2 = TreeDictionary::new(&tree2).unwrap();
        let (_, values) = atom_support(&meta2, &AtomId { level: 0, folder: 0, tag: 1 }).unwrap();
        let s = 1.0 / 2.0f64.sqrt();
        assert!((values[0] - s).abs() < 1e-14);
        assert!((values[1] + s).abs() < 1e-14);
        let tree3 = random_tree(11, 21);
        let meta3 = TreeDictionary::new(&tree3).unwrap();
        for (fi, f) in tree3.levels()[1].iter().enumerate() {
            for tag in 0..f.len() {
                let (_, values) =
                    atom_support(&meta3, &AtomId { level: 1, folder: fi, tag }).unwrap();
                let norm: f64 = values.iter().map(|x| x * x).sum();
                assert!((norm - 1.0).abs() < 1e-12);
            }
        }
    }
}
