//! Finite ultrametric measure spaces as weighted dendrogram forests.
//!
//! A state is a forest of rooted trees. Internal nodes carry a merge height,
//! leaves carry a payload with a mass. Two leaves with lowest common node at
//! height `h` are at distance `2h`; leaves in different trees are at distance
//! `2 * ceiling`. Forests are kept in a normal form:
//!
//! * zero-mass leaves, childless and unary internal nodes are removed,
//! * a child at the same height as its parent is spliced into the parent,
//! * points at distance zero are merged into one leaf,
//! * the top level is empty (zero tree), a single leaf, or at least two trees
//!   all strictly below the ceiling.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;

use rand::Rng;

use crate::error::{domain, invalid};
use crate::Result;

pub const NONE: u32 = u32::MAX;

/// Default height quantum for canonical encodings.
pub const CANONICAL_TOLERANCE: f64 = 1e-9;

/// Leaf payload. Plain masses for [`Ums`], mark kernels for marked spaces.
pub trait LeafData: Clone + Debug + PartialEq {
    fn mass(&self) -> f64;
    /// Merge a second point lying at distance zero.
    fn absorb(&mut self, other: Self);
    fn encode(&self, out: &mut Vec<u8>, quantum: f64);
}

impl LeafData for f64 {
    fn mass(&self) -> f64 {
        *self
    }
    fn absorb(&mut self, other: Self) {
        *self += other;
    }
    fn encode(&self, out: &mut Vec<u8>, quantum: f64) {
        put_quantized(out, *self, quantum);
    }
}

pub(crate) fn put_quantized(out: &mut Vec<u8>, x: f64, quantum: f64) {
    let q = crate::math::round(x / quantum) as i64;
    out.extend_from_slice(&q.to_be_bytes());
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Node {
    /// Merge height; 0 for leaves.
    pub height: f64,
    /// Total mass of the subtree.
    pub mass: f64,
    pub parent: u32,
    /// First postorder index of the subtree; the subtree is `lo..=id`.
    pub lo: u32,
    first: u32,
    len: u32,
    leaf: u32,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        self.leaf != NONE
    }
}

/// Weighted dendrogram forest, stored as a postorder arena.
#[derive(Clone, Debug, PartialEq)]
pub struct Forest<L> {
    nodes: Vec<Node>,
    kids: Vec<u32>,
    leaves: Vec<L>,
    roots: Vec<u32>,
    ceiling: f64,
}

/// Unmarked ultrametric measure space.
pub type Ums = Forest<f64>;

/// Recursive view, used for literals and serialization.
#[derive(Clone, Debug, PartialEq)]
pub enum Tree<L> {
    Leaf(L),
    Node(f64, Vec<Tree<L>>),
}

impl<L> Tree<L> {
    pub fn node(height: f64, children: Vec<Tree<L>>) -> Self {
        Tree::Node(height, children)
    }
}

impl<L: LeafData> Default for Forest<L> {
    fn default() -> Self {
        Self::zero()
    }
}

impl<L: LeafData> Forest<L> {
    pub fn zero() -> Self {
        Forest { nodes: Vec::new(), kids: Vec::new(), leaves: Vec::new(), roots: Vec::new(), ceiling: 0.0 }
    }

    pub fn singleton(payload: L) -> Self {
        let mut b = Builder::new();
        let l = b.leaf(payload);
        b.finish(&[l], 0.0).expect("a single leaf is always valid")
    }

    /// Forest with the given top-level trees at mutual distance `2 * ceiling`.
    pub fn from_trees(ceiling: f64, trees: Vec<Tree<L>>) -> Result<Self> {
        let mut b = Builder::new();
        let mut roots = Vec::with_capacity(trees.len());
        for t in trees {
            roots.push(b.push_tree(t));
        }
        b.finish(&roots, ceiling)
    }

    pub fn to_trees(&self) -> (f64, Vec<Tree<L>>) {
        let trees = self.roots.iter().map(|&r| self.tree_at(r)).collect();
        (self.ceiling, trees)
    }

    fn tree_at(&self, id: u32) -> Tree<L> {
        let n = &self.nodes[id as usize];
        if n.is_leaf() {
            Tree::Leaf(self.leaves[n.leaf as usize].clone())
        } else {
            Tree::Node(n.height, self.children(id).iter().map(|&c| self.tree_at(c)).collect())
        }
    }

    pub fn is_zero(&self) -> bool {
        self.roots.is_empty()
    }

    pub fn ceiling(&self) -> f64 {
        self.ceiling
    }

    pub fn roots(&self) -> &[u32] {
        &self.roots
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: u32) -> &Node {
        &self.nodes[id as usize]
    }

    pub fn children(&self, id: u32) -> &[u32] {
        let n = &self.nodes[id as usize];
        &self.kids[n.first as usize..(n.first + n.len) as usize]
    }

    pub fn leaf(&self, id: u32) -> Option<&L> {
        let n = &self.nodes[id as usize];
        n.is_leaf().then(|| &self.leaves[n.leaf as usize])
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    /// Leaf node ids in postorder.
    pub fn leaf_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.nodes.iter().enumerate().filter(|(_, n)| n.is_leaf()).map(|(i, _)| i as u32)
    }

    pub fn total_mass(&self) -> f64 {
        self.roots.iter().map(|&r| self.nodes[r as usize].mass).sum()
    }

    pub fn diameter(&self) -> f64 {
        if self.roots.len() >= 2 {
            2.0 * self.ceiling
        } else {
            0.0
        }
    }

    /// Distance between two nodes (leaves in practice).
    pub fn distance(&self, a: u32, b: u32) -> f64 {
        if a == b {
            return 0.0;
        }
        let (mut x, mut y) = (a, b);
        // Heights strictly increase upward, so climb the lower node.
        loop {
            if x == y {
                return 2.0 * self.nodes[x as usize].height;
            }
            let (hx, hy) = (self.nodes[x as usize].height, self.nodes[y as usize].height);
            let (px, py) = (self.nodes[x as usize].parent, self.nodes[y as usize].parent);
            if hx < hy || (hx == hy && px != NONE) {
                if px == NONE {
                    return 2.0 * self.ceiling;
                }
                x = px;
            } else {
                if py == NONE {
                    return 2.0 * self.ceiling;
                }
                y = py;
            }
        }
    }

    /// Copy of the structure with heights mapped through `f` and payloads through `g`.
    /// `f` must be monotone; normalization takes care of ties it creates.
    pub fn map<M: LeafData>(
        &self,
        ceiling: f64,
        mut f: impl FnMut(f64) -> f64,
        mut g: impl FnMut(&L) -> M,
    ) -> Result<Forest<M>> {
        let mut b = Builder::with_capacity(self.nodes.len());
        let mut tmp = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let id = if n.is_leaf() {
                b.leaf(g(&self.leaves[n.leaf as usize]))
            } else {
                tmp.clear();
                tmp.extend_from_slice(self.children(i as u32));
                b.join(f(n.height), &tmp)
            };
            debug_assert_eq!(id as usize, i);
        }
        b.finish(&self.roots, ceiling)
    }

    /// The forest as one tree inside `b`, for regrouping under a new ceiling.
    pub(crate) fn graft_into(&self, b: &mut Builder<L>, h: f64) -> Option<u32> {
        let base = b.nodes.len() as u32;
        let mut tmp = Vec::new();
        for n in &self.nodes {
            if n.is_leaf() {
                b.leaf(self.leaves[n.leaf as usize].clone());
            } else {
                tmp.clear();
                tmp.extend(self.children_of(n).iter().map(|c| c + base));
                b.join(n.height.min(h), &tmp);
            }
        }
        match self.roots.len() {
            0 => None,
            1 => Some(self.roots[0] + base),
            _ => {
                let r: Vec<u32> = self.roots.iter().map(|r| r + base).collect();
                Some(b.join(self.ceiling.min(h), &r))
            }
        }
    }

    fn children_of(&self, n: &Node) -> &[u32] {
        &self.kids[n.first as usize..(n.first + n.len) as usize]
    }

    /// Forest consisting of the subtree below `id`.
    pub fn subtree(&self, id: u32) -> Forest<L> {
        let mut b = Builder::new();
        let root = self.copy_subtree(&mut b, id);
        b.finish(&[root], 0.0).expect("subtrees of a normal forest are valid")
    }

    fn copy_subtree(&self, b: &mut Builder<L>, id: u32) -> u32 {
        let n = self.nodes[id as usize];
        if n.is_leaf() {
            return b.leaf(self.leaves[n.leaf as usize].clone());
        }
        let kids: Vec<u32> = self.children(id).iter().map(|&c| self.copy_subtree(b, c)).collect();
        b.join(n.height, &kids)
    }

    /// The `h`-top: all distances capped at `2h`.
    pub fn truncate(&self, h: f64) -> Result<Self> {
        if !(h >= 0.0) {
            return Err(domain!("truncation level must be >= 0, got {h}"));
        }
        if self.diameter() <= 2.0 * h {
            return Ok(self.clone());
        }
        self.map(self.ceiling.min(h), |x| x.min(h), |l| l.clone())
    }

    /// `h`-concatenation: disjoint union with cross distances `2h`.
    pub fn concat(&self, other: &Self, h: f64) -> Result<Self> {
        if !(h >= 0.0) {
            return Err(domain!("concatenation level must be >= 0, got {h}"));
        }
        let mut b = Builder::with_capacity(self.nodes.len() + other.nodes.len() + 2);
        let mut roots = Vec::with_capacity(2);
        roots.extend(self.graft_into(&mut b, h));
        roots.extend(other.graft_into(&mut b, h));
        b.finish(&roots, h)
    }

    /// Concatenation of many forests at level `h`.
    pub fn concat_all<'a>(parts: impl IntoIterator<Item = &'a Self>, h: f64) -> Result<Self>
    where
        L: 'a,
    {
        if !(h >= 0.0) {
            return Err(domain!("concatenation level must be >= 0, got {h}"));
        }
        let mut b = Builder::new();
        let mut roots = Vec::new();
        for p in parts {
            roots.extend(p.graft_into(&mut b, h));
        }
        b.finish(&roots, h)
    }

    /// Maximal open `h`-balls of `u` in `S_h`.
    pub fn decompose(&self, h: f64) -> Result<Vec<Self>> {
        if !(h > 0.0) {
            return Err(domain!("decomposition level must be > 0, got {h}"));
        }
        if self.diameter() > 2.0 * h {
            return Err(domain!("diameter {} exceeds 2h = {}", self.diameter(), 2.0 * h));
        }
        if self.is_zero() {
            return Ok(Vec::new());
        }
        if self.roots.len() >= 2 && self.ceiling == h {
            Ok(self.roots.iter().map(|&r| self.subtree(r)).collect())
        } else {
            Ok(vec![self.clone()])
        }
    }

    /// Roots of the open `h`-balls (`h > 0`); `None` when the whole forest is one ball.
    pub fn ball_roots(&self, h: f64) -> Option<Vec<u32>> {
        if self.roots.len() >= 2 && self.ceiling < h {
            return None;
        }
        let mut out = Vec::new();
        let mut stack: Vec<u32> = self.roots.clone();
        while let Some(id) = stack.pop() {
            let n = &self.nodes[id as usize];
            if n.height < h {
                out.push(id);
            } else {
                stack.extend_from_slice(self.children(id));
            }
        }
        out.sort_unstable();
        Some(out)
    }

    /// Mass-weighted iid sample of `n` leaves (with replacement).
    pub fn sample_leaves<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<u32>> {
        let total = self.total_mass();
        if !(total > 0.0) {
            return Err(domain!("cannot sample from a space with zero mass"));
        }
        let sampler = LeafSampler::new(self);
        Ok((0..n).map(|_| sampler.draw(rng)).collect())
    }

    pub fn sample_distance_matrix<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<DistanceMatrix> {
        let leaves = self.sample_leaves(n, rng)?;
        Ok(self.distance_matrix(&leaves))
    }

    pub fn distance_matrix(&self, leaves: &[u32]) -> DistanceMatrix {
        let n = leaves.len();
        let mut m = DistanceMatrix::zeros(n);
        for i in 0..n {
            for j in i + 1..n {
                m.set(i, j, self.distance(leaves[i], leaves[j]));
            }
        }
        m
    }

    /// Deterministic encoding of the isomorphism class.
    pub fn canonical_form(&self) -> Vec<u8> {
        self.canonical_form_with(CANONICAL_TOLERANCE)
    }

    pub fn canonical_form_with(&self, quantum: f64) -> Vec<u8> {
        let mut enc: Vec<Vec<u8>> = Vec::with_capacity(self.nodes.len());
        for (i, n) in self.nodes.iter().enumerate() {
            let mut e = Vec::new();
            if n.is_leaf() {
                e.push(b'L');
                self.leaves[n.leaf as usize].encode(&mut e, quantum);
            } else {
                e.push(b'N');
                put_quantized(&mut e, n.height, quantum);
                let mut parts: Vec<(i64, &Vec<u8>)> = self
                    .children(i as u32)
                    .iter()
                    .map(|&c| (crate::math::round(self.nodes[c as usize].mass / quantum) as i64, &enc[c as usize]))
                    .collect();
                parts.sort();
                e.extend_from_slice(&(parts.len() as u32).to_be_bytes());
                for (_, p) in parts {
                    e.extend_from_slice(p);
                }
                e.push(b')');
            }
            enc.push(e);
        }
        let mut out = vec![b'F'];
        put_quantized(&mut out, self.ceiling, quantum);
        let mut tops: Vec<(i64, &Vec<u8>)> = self
            .roots
            .iter()
            .map(|&r| (crate::math::round(self.nodes[r as usize].mass / quantum) as i64, &enc[r as usize]))
            .collect();
        tops.sort();
        out.extend_from_slice(&(tops.len() as u32).to_be_bytes());
        for (_, t) in tops {
            out.extend_from_slice(t);
        }
        out
    }

    pub fn is_isomorphic(&self, other: &Self) -> bool {
        self.canonical_form() == other.canonical_form()
    }
}

impl Ums {
    /// The `(t - depth)`-trunk of `u` in `S_t`: open `(t-depth)`-balls become
    /// single points carrying the ball mass, remaining distances drop by `2(t-depth)`.
    pub fn trunk(&self, t: f64, depth: f64) -> Result<Ums> {
        if !(depth > 0.0 && depth <= t) {
            return Err(domain!("trunk depth must lie in (0, t], got {depth} with t = {t}"));
        }
        if self.diameter() > 2.0 * t {
            return Err(domain!("trunk needs u in S_t: diameter {} > 2t = {}", self.diameter(), 2.0 * t));
        }
        let c = t - depth;
        if c <= 0.0 {
            return Ok(self.clone());
        }
        let mut b = Builder::new();
        let mut map = vec![NONE; self.nodes.len()];
        let mut tmp = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let under_ball = n.parent != NONE && self.nodes[n.parent as usize].height < c;
            if under_ball {
                continue;
            }
            map[i] = if n.height < c {
                b.leaf(n.mass)
            } else {
                tmp.clear();
                tmp.extend(self.children(i as u32).iter().map(|&k| map[k as usize]));
                b.join(n.height - c, &tmp)
            };
        }
        let roots: Vec<u32> = self.roots.iter().map(|&r| map[r as usize]).collect();
        b.finish(&roots, (self.ceiling - c).max(0.0))
    }
}

/// Random dendrogram forest with `1..=max_leaves` leaves, masses in `[0.1, 1)`
/// and merge heights in `(0, max_height)`. With `grid = Some(q)` heights are
/// multiples of `q` (ties give multifurcations). The top level is sometimes a
/// forest under a random ceiling.
pub fn random_ums<R: Rng + ?Sized>(rng: &mut R, max_leaves: usize, max_height: f64, grid: Option<f64>) -> Ums {
    let leaves = rng.random_range(1..=max_leaves.max(1));
    let snap = |h: f64| match grid {
        Some(q) => (crate::math::floor(h / q) + 1.0) * q,
        None => h,
    };
    let mut b = Builder::with_capacity(2 * leaves);
    let mut pool: Vec<(u32, f64)> = (0..leaves).map(|_| (b.leaf(0.1 + 0.9 * rng.random::<f64>()), 0.0)).collect();
    let mut heights: Vec<f64> = (0..leaves.saturating_sub(1)).map(|_| snap(rng.random::<f64>() * max_height)).collect();
    heights.sort_by(|a, c| a.partial_cmp(c).expect("finite"));
    let merges = if leaves > 1 && rng.random::<f64>() < 0.3 { rng.random_range(0..leaves - 1) } else { leaves - 1 };
    for &h in heights.iter().take(merges) {
        let i = rng.random_range(0..pool.len());
        let (a, ha) = pool.swap_remove(i);
        let j = rng.random_range(0..pool.len());
        let (c, hc) = pool.swap_remove(j);
        let h = h.max(ha).max(hc);
        pool.push((b.join(h, &[a, c]), h));
    }
    let top = pool.iter().map(|p| p.1).fold(0.0, f64::max);
    let ceiling = if pool.len() > 1 { snap(top + rng.random::<f64>() * (max_height - top).max(0.0)) } else { 0.0 };
    let roots: Vec<u32> = pool.iter().map(|p| p.0).collect();
    b.finish(&roots, ceiling.max(top)).expect("generated forests are valid")
}

/// Alias-free mass-proportional leaf sampler (cumulative table + bisection).
pub struct LeafSampler {
    ids: Vec<u32>,
    cum: Vec<f64>,
}

impl LeafSampler {
    pub fn new<L: LeafData>(u: &Forest<L>) -> Self {
        Self::weighted(u.leaf_ids().map(|id| (id, u.node(id).mass)))
    }

    pub fn weighted(items: impl Iterator<Item = (u32, f64)>) -> Self {
        let mut ids = Vec::new();
        let mut cum = Vec::new();
        let mut acc = 0.0;
        for (id, w) in items {
            if w > 0.0 {
                acc += w;
                ids.push(id);
                cum.push(acc);
            }
        }
        LeafSampler { ids, cum }
    }

    pub fn total(&self) -> f64 {
        self.cum.last().copied().unwrap_or(0.0)
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        let x = rng.random::<f64>() * self.total();
        let k = self.cum.partition_point(|&c| c <= x).min(self.ids.len() - 1);
        self.ids[k]
    }
}

#[derive(Clone, Copy)]
struct Raw {
    height: f64,
    first: u32,
    len: u32,
    leaf: u32,
}

/// Incremental construction; children must be created before parents.
pub struct Builder<L> {
    nodes: Vec<Raw>,
    kids: Vec<u32>,
    leaves: Vec<Option<L>>,
}

impl<L: LeafData> Default for Builder<L> {
    fn default() -> Self {
        Self::new()
    }
}

impl<L: LeafData> Builder<L> {
    pub fn new() -> Self {
        Builder { nodes: Vec::new(), kids: Vec::new(), leaves: Vec::new() }
    }

    pub fn with_capacity(n: usize) -> Self {
        Builder { nodes: Vec::with_capacity(n), kids: Vec::with_capacity(n), leaves: Vec::with_capacity(n) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, payload: L) -> u32 {
        self.leaves.push(Some(payload));
        self.nodes.push(Raw { height: 0.0, first: 0, len: 0, leaf: (self.leaves.len() - 1) as u32 });
        (self.nodes.len() - 1) as u32
    }

    pub fn join(&mut self, height: f64, children: &[u32]) -> u32 {
        let first = self.kids.len() as u32;
        self.kids.extend_from_slice(children);
        self.nodes.push(Raw { height, first, len: children.len() as u32, leaf: NONE });
        (self.nodes.len() - 1) as u32
    }

    pub fn push_tree(&mut self, t: Tree<L>) -> u32 {
        match t {
            Tree::Leaf(l) => self.leaf(l),
            Tree::Node(h, cs) => {
                let ids: Vec<u32> = cs.into_iter().map(|c| self.push_tree(c)).collect();
                self.join(h, &ids)
            }
        }
    }

    /// Normalize and freeze.
    pub fn finish(mut self, roots: &[u32], ceiling: f64) -> Result<Forest<L>> {
        if !(ceiling >= 0.0 && ceiling.is_finite()) {
            return Err(invalid!("ceiling must be finite and >= 0, got {ceiling}"));
        }
        // Pass 1: resolve every raw node into a scratch forest (garbage allowed).
        let mut s = Scratch::<L> { nodes: Vec::with_capacity(self.nodes.len()), kids: Vec::new(), leaves: Vec::new() };
        let mut res = vec![NONE; self.nodes.len()];
        let mut collect: Vec<u32> = Vec::new();
        for i in 0..self.nodes.len() {
            let raw = self.nodes[i];
            if raw.leaf != NONE {
                let payload = self.leaves[raw.leaf as usize].take().ok_or_else(|| invalid!("leaf {i} used twice"))?;
                let m = payload.mass();
                if !(m >= 0.0 && m.is_finite()) {
                    return Err(invalid!("leaf mass must be finite and >= 0, got {m}"));
                }
                if m > 0.0 {
                    res[i] = s.leaf(payload);
                }
                continue;
            }
            let h = raw.height;
            if !(h >= 0.0 && h.is_finite()) {
                return Err(invalid!("merge height must be finite and >= 0, got {h}"));
            }
            collect.clear();
            for k in raw.first..raw.first + raw.len {
                let c = self.kids[k as usize] as usize;
                if c >= i {
                    return Err(invalid!("child {c} must be created before parent {i}"));
                }
                s.push_child(&mut collect, res[c], h)?;
            }
            res[i] = s.resolve(&collect, h);
        }
        // Top level.
        collect.clear();
        let mut tops = Vec::new();
        for &r in roots {
            if r as usize >= res.len() {
                return Err(invalid!("root {r} out of range"));
            }
            if res[r as usize] != NONE {
                tops.push(res[r as usize]);
            }
        }
        let (top_ids, ceil) = match tops.len() {
            0 => (Vec::new(), 0.0),
            1 => {
                let t = tops[0];
                if s.nodes[t as usize].leaf != NONE {
                    (tops, 0.0)
                } else {
                    let n = s.nodes[t as usize];
                    (s.kids[n.first as usize..(n.first + n.len) as usize].to_vec(), n.height)
                }
            }
            _ => {
                for &t in &tops {
                    s.push_child(&mut collect, t, ceiling)?;
                }
                let t = s.resolve(&collect, ceiling);
                let n = s.nodes[t as usize];
                if n.leaf != NONE {
                    (vec![t], 0.0)
                } else {
                    (s.kids[n.first as usize..(n.first + n.len) as usize].to_vec(), ceiling)
                }
            }
        };
        Ok(s.compact(&top_ids, ceil))
    }
}

#[derive(Clone, Copy)]
struct SNode {
    height: f64,
    first: u32,
    len: u32,
    leaf: u32,
}

struct Scratch<L> {
    nodes: Vec<SNode>,
    kids: Vec<u32>,
    leaves: Vec<Option<L>>,
}

impl<L: LeafData> Scratch<L> {
    fn leaf(&mut self, payload: L) -> u32 {
        self.leaves.push(Some(payload));
        self.nodes.push(SNode { height: 0.0, first: 0, len: 0, leaf: (self.leaves.len() - 1) as u32 });
        (self.nodes.len() - 1) as u32
    }

    fn push_child(&self, collect: &mut Vec<u32>, c: u32, h: f64) -> Result<()> {
        if c == NONE {
            return Ok(());
        }
        let n = self.nodes[c as usize];
        if n.leaf == NONE && n.height >= h {
            if n.height > h {
                return Err(invalid!("child height {} above parent height {h}", n.height));
            }
            collect.extend_from_slice(&self.kids[n.first as usize..(n.first + n.len) as usize]);
        } else {
            collect.push(c);
        }
        Ok(())
    }

    fn resolve(&mut self, collect: &[u32], h: f64) -> u32 {
        match collect.len() {
            0 => NONE,
            1 => collect[0],
            _ if h <= 0.0 => {
                // Everything sits at distance zero: one point.
                let mut acc: Option<L> = None;
                for &c in collect {
                    let li = self.nodes[c as usize].leaf as usize;
                    let p = self.leaves[li].take().expect("leaf payload consumed once");
                    match acc.as_mut() {
                        None => acc = Some(p),
                        Some(a) => a.absorb(p),
                    }
                }
                self.leaf(acc.expect("non-empty"))
            }
            _ => {
                let first = self.kids.len() as u32;
                self.kids.extend_from_slice(collect);
                self.nodes.push(SNode { height: h, first, len: collect.len() as u32, leaf: NONE });
                (self.nodes.len() - 1) as u32
            }
        }
    }

    fn compact(mut self, tops: &[u32], ceiling: f64) -> Forest<L> {
        let mut f = Forest {
            nodes: Vec::with_capacity(self.nodes.len()),
            kids: Vec::with_capacity(self.kids.len()),
            leaves: Vec::new(),
            roots: Vec::with_capacity(tops.len()),
            ceiling,
        };
        // Iterative postorder; each frame is (scratch id, next child index, new ids of done children start).
        let mut stack: Vec<(u32, u32)> = Vec::new();
        let mut done: Vec<u32> = Vec::new();
        for &t in tops {
            stack.push((t, 0));
            while let Some(&mut (id, ref mut next)) = stack.last_mut() {
                let n = self.nodes[id as usize];
                if n.leaf == NONE && *next < n.len {
                    let c = self.kids[(n.first + *next) as usize];
                    *next += 1;
                    stack.push((c, 0));
                    continue;
                }
                stack.pop();
                let new_id = f.nodes.len() as u32;
                if n.leaf != NONE {
                    let p = self.leaves[n.leaf as usize].take().expect("leaf reachable once");
                    let mass = p.mass();
                    f.leaves.push(p);
                    f.nodes.push(Node {
                        height: 0.0,
                        mass,
                        parent: NONE,
                        lo: new_id,
                        first: 0,
                        len: 0,
                        leaf: (f.leaves.len() - 1) as u32,
                    });
                } else {
                    let start = done.len() - n.len as usize;
                    let first = f.kids.len() as u32;
                    let mut mass = 0.0;
                    for &c in &done[start..] {
                        f.nodes[c as usize].parent = new_id;
                        mass += f.nodes[c as usize].mass;
                        f.kids.push(c);
                    }
                    let lo = f.nodes[done[start] as usize].lo;
                    done.truncate(start);
                    f.nodes.push(Node { height: n.height, mass, parent: NONE, lo, first, len: n.len, leaf: NONE });
                }
                done.push(new_id);
            }
            f.roots.push(done.pop().expect("root completed"));
        }
        f
    }
}

/// Pairwise distances of an `n`-sample, stored as the upper triangle.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    r: Vec<f64>,
}

/// Position of pair `(i, j)`, `i < j`, in row-major upper-triangle order.
#[inline]
pub fn pair_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * (2 * n - i - 1) / 2 + (j - i - 1)
}

impl DistanceMatrix {
    pub fn zeros(n: usize) -> Self {
        DistanceMatrix { n, r: vec![0.0; n * n.saturating_sub(1) / 2] }
    }

    pub fn from_upper(n: usize, r: Vec<f64>) -> Result<Self> {
        if r.len() != n * n.saturating_sub(1) / 2 {
            return Err(invalid!("expected {} entries for n = {n}, got {}", n * n.saturating_sub(1) / 2, r.len()));
        }
        if r.iter().any(|x| !(*x >= 0.0)) {
            return Err(invalid!("distances must be >= 0"));
        }
        Ok(DistanceMatrix { n, r })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[f64] {
        &self.r
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match i.cmp(&j) {
            core::cmp::Ordering::Equal => 0.0,
            core::cmp::Ordering::Less => self.r[pair_index(self.n, i, j)],
            core::cmp::Ordering::Greater => self.r[pair_index(self.n, j, i)],
        }
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        let k = pair_index(self.n, a, b);
        self.r[k] = v;
    }

    pub fn is_ultrametric(&self) -> bool {
        let n = self.n;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    if self.get(i, k) > self.get(i, j).max(self.get(j, k)) {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// `theta_{k,l}` with 0-based `k < l`: sample `l` is replaced by a copy of sample `k`.
    pub fn theta(&self, k: usize, l: usize) -> Result<Self> {
        if !(k < l && l < self.n) {
            return Err(domain!("theta needs k < l < n, got k = {k}, l = {l}, n = {}", self.n));
        }
        let mut out = self.clone();
        theta_in_place(self.n, &self.r, &mut out.r, k, l);
        Ok(out)
    }
}

pub(crate) fn theta_in_place(n: usize, src: &[f64], dst: &mut [f64], k: usize, l: usize) {
    let get = |i: usize, j: usize| -> f64 {
        match i.cmp(&j) {
            core::cmp::Ordering::Equal => 0.0,
            core::cmp::Ordering::Less => src[pair_index(n, i, j)],
            core::cmp::Ordering::Greater => src[pair_index(n, j, i)],
        }
    };
    for i in 0..n {
        for j in i + 1..n {
            let v = if i == l {
                get(k, j)
            } else if j == l {
                get(i, k)
            } else {
                get(i, j)
            };
            dst[pair_index(n, i, j)] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn leaf(m: f64) -> Tree<f64> {
        Tree::Leaf(m)
    }

    fn pair(m1: f64, m2: f64, h: f64) -> Ums {
        Ums::from_trees(0.0, vec![Tree::node(h, vec![leaf(m1), leaf(m2)])]).unwrap()
    }

    #[test]
    fn zero_tree_mass() {
        assert_eq!(Ums::zero().total_mass(), 0.0);
        assert!(Ums::from_trees(3.0, vec![leaf(0.0)]).unwrap().is_zero());
    }

    #[test]
    fn masses_add() {
        assert_eq!(pair(2.0, 3.0, 1.0).total_mass(), 5.0);
    }

    #[test]
    fn single_tree_root_becomes_ceiling() {
        let u = pair(1.0, 1.0, 2.5);
        assert_eq!(u.roots().len(), 2);
        assert_eq!(u.ceiling(), 2.5);
        assert_eq!(u.diameter(), 5.0);
    }

    #[test]
    fn truncate_caps_distance() {
        let u = pair(1.0, 1.0, 2.5).truncate(1.0).unwrap();
        let ids: Vec<u32> = u.leaf_ids().collect();
        assert_eq!(u.distance(ids[0], ids[1]), 2.0);
    }

    #[test]
    fn truncate_at_zero_collapses() {
        let u = pair(1.0, 2.0, 2.5).truncate(0.0).unwrap();
        assert_eq!(u.leaf_count(), 1);
        assert_eq!(u.total_mass(), 3.0);
    }

    #[test]
    fn truncate_rejects_negative() {
        assert!(matches!(pair(1.0, 1.0, 1.0).truncate(-1.0), Err(crate::Error::Domain(_))));
    }

    #[test]
    fn equal_height_child_is_spliced() {
        let u =
            Ums::from_trees(0.0, vec![Tree::node(1.0, vec![Tree::node(1.0, vec![leaf(1.0), leaf(1.0)]), leaf(1.0)])])
                .unwrap();
        assert_eq!(u.roots().len(), 3);
        assert!(Ums::from_trees(
            0.0,
            vec![Tree::node(1.0, vec![Tree::node(2.0, vec![leaf(1.0), leaf(1.0)]), leaf(1.0)])]
        )
        .is_err());
    }

    #[test]
    fn concat_cross_distance() {
        let u = Ums::singleton(1.0);
        let v = pair(1.0, 2.0, 0.2);
        let w = u.concat(&v, 0.5).unwrap();
        assert_eq!(w.total_mass(), 4.0);
        assert_eq!(w.ceiling(), 0.5);
        assert_eq!(w.roots().len(), 2);
        assert!(w.is_isomorphic(&v.concat(&u, 0.5).unwrap()));
        assert!(u.concat(&Ums::zero(), 0.5).unwrap().is_isomorphic(&u));
    }

    #[test]
    fn decompose_three_singletons() {
        let u = Ums::from_trees(1.0, vec![leaf(1.0), leaf(2.0), leaf(3.0)]).unwrap();
        let parts = u.decompose(1.0).unwrap();
        assert_eq!(parts.len(), 3);
        assert!(parts.iter().all(|p| p.leaf_count() == 1));
        assert!(u.decompose(0.5).is_err());
        assert_eq!(u.decompose(2.0).unwrap().len(), 1);
    }

    #[test]
    fn sampled_pair_law_two_leaves() {
        // P(r12 = d) = 2 p (1 - p) from the four ordered pairs.
        let p = 0.3;
        let u = pair(p, 1.0 - p, 0.75);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let reps = 200_000;
        let mut hits = 0usize;
        for _ in 0..reps {
            let m = u.sample_distance_matrix(2, &mut rng).unwrap();
            if m.get(0, 1) == 1.5 {
                hits += 1;
            }
        }
        let q = 2.0 * p * (1.0 - p);
        let se = libm::sqrt(q * (1.0 - q) / reps as f64);
        assert!((hits as f64 / reps as f64 - q).abs() < 4.0 * se);
    }

    #[test]
    fn canonical_relabeling() {
        let a = pair(1.0, 2.0, 1.0);
        let b = pair(2.0, 1.0, 1.0);
        assert_eq!(a.canonical_form(), b.canonical_form());
        assert!(!pair(1.0, 1.0, 1.0).is_isomorphic(&pair(1.0, 1.0, 2.0)));
    }

    #[test]
    fn trunk_single_ball() {
        let u = pair(1.0, 2.0, 0.1);
        let tr = u.trunk(1.0, 0.5).unwrap();
        assert_eq!(tr.leaf_count(), 1);
        assert_eq!(tr.total_mass(), 3.0);
    }

    #[test]
    fn trunk_three_families() {
        // Families of masses 1, 2, 3 at mutual distance 2t = 2. Cut level c = t - depth = 0.75:
        // each family is one 0.75-ball, reduced distances 2 - 1.5 = 0.5.
        let fam = |m: f64| Tree::node(0.2, vec![leaf(m / 2.0), leaf(m / 2.0)]);
        let u = Ums::from_trees(1.0, vec![fam(1.0), fam(2.0), fam(3.0)]).unwrap();
        let tr = u.trunk(1.0, 0.25).unwrap();
        assert_eq!(tr.leaf_count(), 3);
        assert!((tr.ceiling() - 0.25).abs() < 1e-15);
        let mut masses: Vec<f64> = tr.leaf_ids().map(|i| tr.node(i).mass).collect();
        masses.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(masses, vec![1.0, 2.0, 3.0]);
        // Cutting exactly at the family level, the families end at distance 0: one point.
        let flat = Ums::from_trees(1.0, vec![leaf(1.0), leaf(2.0), leaf(3.0)]).unwrap();
        let tr0 = flat.trunk(1.0, 1e-12).unwrap();
        assert_eq!(tr0.leaf_count(), 3);
        let full = u.trunk(1.0, 1.0).unwrap();
        assert!(full.is_isomorphic(&u));
    }

    #[test]
    fn trunk_collapses_at_cut() {
        let u = Ums::from_trees(1.0, vec![Tree::node(0.5, vec![leaf(1.0), leaf(1.0)]), leaf(2.0)]).unwrap();
        // c = 0.5: the pair at height 0.5 is not inside an open 0.5-ball, its leaves are
        // separate balls at reduced distance 0, so they merge.
        let tr = u.trunk(1.0, 0.5).unwrap();
        assert_eq!(tr.leaf_count(), 2);
        assert!((tr.ceiling() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn theta_example() {
        let m = DistanceMatrix::from_upper(3, vec![2.0, 4.0, 4.0]).unwrap();
        assert_eq!(m.theta(0, 1).unwrap().entries(), &[0.0, 4.0, 4.0]);
        let m2 = DistanceMatrix::from_upper(2, vec![3.0]).unwrap();
        assert_eq!(m2.theta(0, 1).unwrap().entries(), &[0.0]);
        assert!(m2.theta(1, 1).is_err());
    }

    #[test]
    fn pair_index_layout() {
        let n = 5;
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                assert_eq!(pair_index(n, i, j), k);
                k += 1;
            }
        }
    }
}
