//! Poisson cutting of a measured tree and the genealogy it induces.
//!
//! Cuts rain on the skeleton with intensity `dt (x) length`. Marked atoms
//! trace connected components through time; the partition genealogy of the
//! marks becomes a binary backbone whose path lengths are the time integrals
//! of component masses, and every chunk severed from an active marked
//! component is grafted back onto the backbone at the position its host path
//! had reached when the chunk was lost. Chunks are grafted even when they
//! carry no atoms, so length and path custody stay exact at finite scale.
//!
//! Once a component holds a single mark and no other atom, the mark is
//! isolated: its clock freezes and the component stops receiving cuts. This
//! truncates the zero-mass dust tail consistently between from-scratch
//! assembly and incremental refinement.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::tree::{MeasuredTree, NodeId, TreePoint};

/// One cut: a time and a skeleton location of the base tree.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CutEvent {
    pub time: f64,
    pub edge: NodeId,
    pub offset: f64,
}

/// Time-ordered Poisson cut events, materialized lazily in horizon blocks.
/// Block `b` is generated from a substream of `seed`, so extending the
/// horizon never changes already-materialized events.
#[derive(Clone, Debug)]
pub struct CutProcess {
    pub seed: u64,
    pub block_len: f64,
    pub horizon: f64,
    pub events: Vec<CutEvent>,
    used_offsets: HashMap<NodeId, Vec<f64>>,
}

/// Hard cap on how far the rain may be extended before giving up.
const MAX_HORIZON: f64 = 1e7;

impl CutProcess {
    /// Builds a process from a fixed event list (scenario files).
    pub fn from_events(events: Vec<CutEvent>, horizon: f64) -> CutProcess {
        CutProcess {
            seed: 0,
            block_len: horizon,
            horizon,
            events,
            used_offsets: HashMap::new(),
        }
    }

    /// Samples the rain on `tree` up to `horizon`. The caller's rng only
    /// seeds the process; everything else is a pure function of the seed.
    pub fn sample<R: Rng + ?Sized>(
        tree: &MeasuredTree,
        horizon: f64,
        block_len: f64,
        rng: &mut R,
    ) -> Result<CutProcess> {
        if tree.total_len() <= 0.0 {
            return Err(Error::ZeroLength);
        }
        if horizon <= 0.0 || block_len <= 0.0 {
            return Err(Error::InvalidArgument("horizon and block length must be > 0".into()));
        }
        let mut p = CutProcess {
            seed: rng.random::<u64>(),
            block_len,
            horizon: 0.0,
            events: Vec::new(),
            used_offsets: HashMap::new(),
        };
        p.ensure_horizon(tree, horizon);
        Ok(p)
    }

    /// Extends materialization to at least `t`.
    pub fn ensure_horizon(&mut self, tree: &MeasuredTree, t: f64) {
        while self.horizon < t {
            let b = (self.horizon / self.block_len).round() as u64;
            self.generate_block(tree, b);
            self.horizon = (b + 1) as f64 * self.block_len;
        }
    }

    fn generate_block(&mut self, tree: &MeasuredTree, b: u64) {
        let mut rng = exec::substream(self.seed, b.wrapping_add(0x5eed));
        let edges: Vec<(NodeId, f64)> = tree
            .node_ids()
            .filter(|&n| tree.edge_len(n) > 0.0)
            .map(|n| (n, tree.edge_len(n)))
            .collect();
        let total: f64 = edges.iter().map(|e| e.1).sum();
        let start = b as f64 * self.block_len;
        let end = start + self.block_len;
        let mut t = start;
        loop {
            t += -(1.0 - rng.random::<f64>()).ln() / total;
            if t >= end {
                break;
            }
            // location uniform by length; reject node hits and repeats
            let (edge, offset) = loop {
                let mut u = rng.random::<f64>() * total;
                let mut pick = edges[edges.len() - 1];
                for &e in &edges {
                    if u < e.1 {
                        pick = e;
                        break;
                    }
                    u -= e.1;
                }
                let off = rng.random::<f64>() * pick.1;
                if off <= 0.0 || off >= pick.1 {
                    continue;
                }
                let seen = self.used_offsets.entry(pick.0).or_default();
                if seen.iter().any(|&o| o == off) {
                    continue;
                }
                seen.push(off);
                break (pick.0, off);
            };
            self.events.push(CutEvent { time: t, edge, offset });
        }
    }
}

/// Samples the cutting process on `[0, horizon] x skeleton`.
pub fn sample_cuts<R: Rng + ?Sized>(
    tree: &MeasuredTree,
    horizon: f64,
    rng: &mut R,
) -> Result<CutProcess> {
    CutProcess::sample(tree, horizon, horizon.max(1.0), rng)
}

/// Provenance of a working edge inside the base tree: the original edge id
/// and the covered offset interval, possibly traversed in reverse.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrcSpan {
    pub edge: NodeId,
    pub lo: f64,
    pub hi: f64,
    pub flipped: bool,
}

impl SrcSpan {
    pub fn len(&self) -> f64 {
        self.hi - self.lo
    }

    /// Maps a sub-interval of this span (own orientation, measured from the
    /// parent end) back to base coordinates.
    pub fn compose(&self, lo: f64, hi: f64, flipped: bool) -> SrcSpan {
        if !self.flipped {
            SrcSpan { edge: self.edge, lo: self.lo + lo, hi: self.lo + hi, flipped }
        } else {
            SrcSpan { edge: self.edge, lo: self.hi - hi, hi: self.hi - lo, flipped: !flipped }
        }
    }

    /// Offset (from the parent end, own orientation) of base offset `o`.
    pub fn local_offset(&self, o: f64) -> f64 {
        if !self.flipped {
            o - self.lo
        } else {
            self.hi - o
        }
    }
}

/// A severed chunk grafted onto the backbone, rooted at its cut point.
#[derive(Clone, Debug)]
pub struct Graft {
    pub time: f64,
    /// Smallest mark index whose component shrank.
    pub host: usize,
    /// Distance from the backbone root along the host path.
    pub position: f64,
    pub mass: f64,
    pub tree: MeasuredTree,
    /// Base-tree node -> chunk node, for every surviving base node.
    pub node_of: HashMap<NodeId, NodeId>,
    /// Chunk edge (child id) -> base provenance.
    pub spans: Vec<(NodeId, SrcSpan)>,
}

impl Graft {
    /// Maps a base-tree location into chunk coordinates.
    pub fn map_location(&self, edge: NodeId, offset: f64) -> Option<(NodeId, f64)> {
        for &(child, s) in &self.spans {
            if s.edge == edge && s.lo < offset && offset < s.hi {
                return Some((child, s.local_offset(offset)));
            }
        }
        None
    }
}

/// One binary split of the mark partition.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitRecord {
    pub time: f64,
    pub block: Vec<usize>,
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    pub position: f64,
}

/// Genealogy backbone: the binary splitting history of the mark partition
/// with path lengths given by mass-time integrals.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Backbone {
    pub k: usize,
    pub records: Vec<SplitRecord>,
    /// Total root-to-leaf length per mark.
    pub leaf_len: Vec<f64>,
}

impl Backbone {
    /// Realizes the backbone as a measured tree; leaf `i` carries
    /// `leaf_mass[i]`. Returns the tree and the leaf node per mark.
    pub fn to_measured_tree(&self, leaf_mass: &[f64]) -> (MeasuredTree, Vec<NodeId>) {
        let mut tree = MeasuredTree::singleton(0.0);
        // block -> (anchor node, anchor depth)
        let mut anchor: BTreeMap<Vec<usize>, (NodeId, f64)> = BTreeMap::new();
        let all: Vec<usize> = (0..self.k).collect();
        anchor.insert(all, (tree.root(), 0.0));
        let mut records = self.records.clone();
        records.sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap());
        for r in &records {
            let mut key = r.block.clone();
            key.sort_unstable();
            let (node, depth) = anchor.remove(&key).expect("unknown block");
            let split = tree.add_child(node, r.position - depth, 0.0).expect("backbone edge");
            let mut l = r.left.clone();
            l.sort_unstable();
            let mut rr = r.right.clone();
            rr.sort_unstable();
            anchor.insert(l, (split, r.position));
            anchor.insert(rr, (split, r.position));
        }
        let mut leaves = vec![usize::MAX; self.k];
        for (block, (node, depth)) in anchor {
            debug_assert_eq!(block.len(), 1, "unsplit non-singleton block");
            let i = block[0];
            let leaf = tree
                .add_child(node, self.leaf_len[i] - depth, leaf_mass[i])
                .expect("leaf edge");
            leaves[i] = leaf;
        }
        (tree, leaves)
    }
}

/// The k-cut tree: backbone plus grafted chunks, with leftover custody of
/// whatever still hangs at the marks when every mark is isolated.
#[derive(Clone, Debug)]
pub struct CutTree {
    pub marks: Vec<NodeId>,
    pub backbone: Backbone,
    pub grafts: Vec<Graft>,
    /// Per mark: base spans still attached to the mark at stop time.
    pub leftover_spans: Vec<Vec<SrcSpan>>,
    pub total_mass: f64,
    pub mark_mass: Vec<f64>,
}

impl CutTree {
    pub fn k(&self) -> usize {
        self.marks.len()
    }

    /// Mass carried by grafts plus mark atoms; equals the base total mass.
    pub fn mass_check(&self) -> f64 {
        self.grafts.iter().map(|g| g.mass).sum::<f64>() + self.mark_mass.iter().sum::<f64>()
    }

    /// Hausdorff distance between the assembled tree and its backbone: the
    /// largest graft height.
    pub fn hausdorff_to_backbone(&self) -> f64 {
        self.grafts.iter().map(|g| g.tree.height()).fold(0.0, f64::max)
    }

    /// Largest graft diameter.
    pub fn max_graft_diameter(&self) -> f64 {
        self.grafts.iter().map(|g| g.tree.diameter()).fold(0.0, f64::max)
    }

    /// Assembles backbone and grafts into one measured tree. Backbone leaves
    /// carry the marks' atoms; graft roots carry no mass. Returns the tree
    /// and the backbone leaf node per mark.
    pub fn to_measured_tree(&self) -> (MeasuredTree, Vec<NodeId>) {
        let (mut tree, leaves) = self.backbone.to_measured_tree(&self.mark_mass);
        for g in &self.grafts {
            // locate the point at distance `position` from the root on the
            // host leaf path of the current (already partially split) tree
            let mut path = tree.ancestor_path(leaves[g.host]);
            path.reverse();
            let mut attach = *path.last().unwrap();
            let mut found = false;
            for w in path.windows(2) {
                let (top, bottom) = (w[0], w[1]);
                let d_top = tree.depth(top);
                let d_bot = d_top + tree.edge_len(bottom);
                if g.position <= d_bot + 1e-12 {
                    let off = (g.position - d_top).clamp(0.0, tree.edge_len(bottom));
                    attach = tree.split_edge(bottom, off).expect("graft split");
                    found = true;
                    break;
                }
            }
            debug_assert!(found || path.len() == 1, "graft position beyond its host path");
            let root_mass = g.tree.atom_mass(g.tree.root());
            tree.set_atom_mass(attach, tree.atom_mass(attach) + root_mass);
            for &c in g.tree.children(g.tree.root()) {
                g.tree.copy_subtree_into(c, &mut tree, attach);
            }
        }
        (tree, leaves)
    }
}

// ---------------------------------------------------------------------------
// simulation core
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
struct WNode {
    parent: Option<usize>,
    children: Vec<usize>,
    len: f64,
    mass: f64,
    src: SrcSpan,
}

#[derive(Clone, Debug)]
struct FragState {
    marks: Vec<usize>,
    mass: f64,
}

struct CutSim {
    nodes: Vec<WNode>,
    orig_len: usize,
    /// base edge -> covering pieces `(lo, hi, bottom working node)`.
    pieces: HashMap<NodeId, Vec<(f64, f64, usize)>>,
    frags: HashMap<usize, FragState>,
    mark_node: Vec<usize>,
    mark_isolated: Vec<bool>,
    levels: Vec<f64>,
    last_t: f64,
    records: Vec<SplitRecord>,
    grafts: Vec<Graft>,
}

impl CutSim {
    fn new(tree: &MeasuredTree, marks: &[usize], t_start: f64, l_start: f64) -> CutSim {
        let n = tree.node_ids().max().unwrap_or(0) + 1;
        let mut nodes = Vec::with_capacity(n);
        for id in 0..n {
            if tree.contains(id) {
                nodes.push(WNode {
                    parent: tree.parent(id),
                    children: tree.children(id).to_vec(),
                    len: tree.edge_len(id),
                    mass: tree.atom_mass(id),
                    src: SrcSpan { edge: id, lo: 0.0, hi: tree.edge_len(id), flipped: false },
                });
            } else {
                nodes.push(WNode {
                    parent: None,
                    children: Vec::new(),
                    len: 0.0,
                    mass: 0.0,
                    src: SrcSpan { edge: id, lo: 0.0, hi: 0.0, flipped: false },
                });
            }
        }
        let mut pieces: HashMap<NodeId, Vec<(f64, f64, usize)>> = HashMap::new();
        for id in tree.node_ids() {
            if tree.parent(id).is_some() && tree.edge_len(id) > 0.0 {
                pieces.insert(id, vec![(0.0, tree.edge_len(id), id)]);
            }
        }
        let root = tree.root();
        let total_mass = tree.total_mass();
        let mut sim = CutSim {
            nodes,
            orig_len: n,
            pieces,
            frags: HashMap::new(),
            mark_node: marks.to_vec(),
            mark_isolated: vec![false; marks.len()],
            levels: vec![l_start; marks.len()],
            last_t: t_start,
            records: Vec::new(),
            grafts: Vec::new(),
        };
        sim.frags
            .insert(root, FragState { marks: (0..marks.len()).collect(), mass: total_mass });
        sim.refresh_isolation(root);
        sim
    }

    fn frag_root(&self, mut x: usize) -> usize {
        while let Some(p) = self.nodes[x].parent {
            x = p;
        }
        x
    }

    fn is_ancestor(&self, anc: usize, mut x: usize) -> bool {
        loop {
            if x == anc {
                return true;
            }
            match self.nodes[x].parent {
                Some(p) => x = p,
                None => return false,
            }
        }
    }

    fn subtree_mass(&self, top: usize) -> f64 {
        let mut m = 0.0;
        let mut stack = vec![top];
        while let Some(x) = stack.pop() {
            m += self.nodes[x].mass;
            stack.extend_from_slice(&self.nodes[x].children);
        }
        m
    }

    fn advance_clock(&mut self, t: f64) {
        let dt = t - self.last_t;
        if dt > 0.0 {
            let increments: Vec<(usize, f64)> = self
                .frags
                .values()
                .flat_map(|f| {
                    let mu = self.frag_mu(f);
                    f.marks.iter().map(move |&i| (i, mu * dt))
                })
                .collect();
            for (i, inc) in increments {
                self.levels[i] += inc;
            }
        }
        self.last_t = t;
    }

    /// Component mass driving the backbone clock. Once a mark is isolated
    /// (alone with no other atoms) its own atom no longer counts, freezing
    /// the integral.
    fn frag_mu(&self, f: &FragState) -> f64 {
        if f.marks.len() == 1 && self.mark_isolated[f.marks[0]] {
            0.0
        } else {
            f.mass
        }
    }

    fn refresh_isolation(&mut self, frag_root: usize) {
        let f = self.frags.get(&frag_root).expect("marked fragment");
        if f.marks.len() == 1 {
            let i = f.marks[0];
            let own = self.nodes[self.mark_node[i]].mass;
            if f.mass - own == 0.0 {
                self.mark_isolated[i] = true;
            }
        }
    }

    fn all_isolated(&self) -> bool {
        self.mark_isolated.iter().all(|&b| b)
    }

    /// Finds the active fragment containing the location, without splitting.
    fn locate_active(&self, e: NodeId, offset: f64) -> Option<(usize, usize)> {
        let list = self.pieces.get(&e)?;
        let &(_, _, z) = list.iter().find(|&&(lo, hi, _)| lo < offset && offset < hi)?;
        let root = self.frag_root(z);
        let f = self.frags.get(&root)?;
        if f.marks.len() == 1 && self.mark_isolated[f.marks[0]] {
            return None;
        }
        Some((z, root))
    }

    /// Splits the piece of base edge `e` containing `offset` at the cut
    /// point, returning the created node.
    fn split_at(&mut self, e: NodeId, offset: f64, z: usize) -> usize {
        let list = self.pieces.get_mut(&e).expect("piece list");
        let idx = list
            .iter()
            .position(|&(lo, hi, b)| b == z && lo < offset && offset < hi)
            .expect("piece containing the cut");
        let (lo, hi, _) = list[idx];
        list.remove(idx);
        let y = self.nodes[z].parent.expect("piece bottom has a parent");
        let w = self.nodes.len();
        let zsrc = self.nodes[z].src;
        let (w_span, z_span) = if !zsrc.flipped {
            (
                SrcSpan { edge: e, lo, hi: offset, flipped: false },
                SrcSpan { edge: e, lo: offset, hi, flipped: false },
            )
        } else {
            (
                SrcSpan { edge: e, lo: offset, hi, flipped: true },
                SrcSpan { edge: e, lo, hi: offset, flipped: true },
            )
        };
        self.nodes.push(WNode {
            parent: Some(y),
            children: vec![z],
            len: w_span.len(),
            mass: 0.0,
            src: w_span,
        });
        let pos = self.nodes[y].children.iter().position(|&c| c == z).unwrap();
        self.nodes[y].children[pos] = w;
        self.nodes[z].parent = Some(w);
        self.nodes[z].len = z_span.len();
        self.nodes[z].src = z_span;
        let list = self.pieces.get_mut(&e).unwrap();
        list.push((w_span.lo, w_span.hi, w));
        list.push((z_span.lo, z_span.hi, z));
        list.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        w
    }

    /// Repoints the piece realized by `old`'s parent edge to `new`; both
    /// share the same span.
    fn repoint_piece(&mut self, old: usize, span: SrcSpan, new: usize) {
        if let Some(list) = self.pieces.get_mut(&span.edge) {
            for entry in list.iter_mut() {
                if entry.2 == old && entry.0 == span.lo && entry.1 == span.hi {
                    entry.2 = new;
                    return;
                }
            }
        }
        unreachable!("piece to repoint not found");
    }

    /// Re-roots the fragment containing `w` at `w`, flipping edges and
    /// updating the piece index along the inverted path.
    fn reroot_at(&mut self, w: usize) {
        let mut chain = vec![w];
        let mut x = w;
        while let Some(p) = self.nodes[x].parent {
            chain.push(p);
            x = p;
        }
        // capture the original parent-edge data before mutating
        let edges: Vec<(f64, SrcSpan)> =
            chain[..chain.len() - 1].iter().map(|&u| (self.nodes[u].len, self.nodes[u].src)).collect();
        for i in 0..chain.len() - 1 {
            let lower = chain[i];
            let upper = chain[i + 1];
            let (len, src) = edges[i];
            let pos = self.nodes[upper].children.iter().position(|&c| c == lower).unwrap();
            self.nodes[upper].children.remove(pos);
            self.nodes[lower].children.push(upper);
            self.nodes[upper].parent = Some(lower);
            self.nodes[upper].len = len;
            self.nodes[upper].src = SrcSpan { flipped: !src.flipped, ..src };
            self.repoint_piece(lower, src, upper);
        }
        self.nodes[w].parent = None;
        self.nodes[w].len = 0.0;
    }

    /// Extracts the working subtree at `w` as a standalone tree.
    fn extract(&self, w: usize) -> (MeasuredTree, HashMap<usize, NodeId>, Vec<(NodeId, SrcSpan)>) {
        let mut tree = MeasuredTree::singleton(self.nodes[w].mass);
        let mut map = HashMap::new();
        map.insert(w, tree.root());
        let mut spans = Vec::new();
        let mut stack: Vec<(usize, NodeId)> =
            self.nodes[w].children.iter().map(|&c| (c, tree.root())).collect();
        while let Some((x, parent)) = stack.pop() {
            let nid = tree
                .add_child(parent, self.nodes[x].len, self.nodes[x].mass)
                .expect("extract add_child");
            map.insert(x, nid);
            spans.push((nid, self.nodes[x].src));
            for &c in &self.nodes[x].children {
                stack.push((c, nid));
            }
        }
        (tree, map, spans)
    }

    /// Handles one cut event in local coordinates.
    fn process(&mut self, t: f64, edge: NodeId, offset: f64) {
        let (z, root) = match self.locate_active(edge, offset) {
            Some(hit) => hit,
            None => return,
        };
        self.advance_clock(t);
        let w = self.split_at(edge, offset, z);
        let frag = self.frags.get(&root).expect("marked fragment").clone();
        let below_marks: Vec<usize> = frag
            .marks
            .iter()
            .copied()
            .filter(|&i| self.is_ancestor(w, self.mark_node[i]))
            .collect();
        let above_marks: Vec<usize> =
            frag.marks.iter().copied().filter(|&i| !below_marks.contains(&i)).collect();

        if !below_marks.is_empty() && !above_marks.is_empty() {
            // block split: detach the below side, stub the dangling piece
            self.detach_below(w);
            let below_mass = self.subtree_mass(w);
            self.frags.insert(w, FragState { marks: below_marks.clone(), mass: below_mass });
            let above = self.frags.get_mut(&root).unwrap();
            above.marks = above_marks.clone();
            above.mass -= below_mass;
            let position = self.levels[frag.marks[0]];
            self.records.push(SplitRecord {
                time: t,
                block: frag.marks.clone(),
                left: above_marks,
                right: below_marks,
                position,
            });
            self.refresh_isolation(w);
            self.refresh_isolation(root);
        } else if above_marks.is_empty() {
            // the chunk is the side containing the old root; re-root it at w
            let kept_root = self.detach_below_keep(w);
            self.reroot_at(w);
            self.frags.remove(&root);
            let host = *below_marks.iter().min().expect("cut in a marked fragment");
            let below_mass = self.subtree_mass(kept_root);
            self.frags.insert(kept_root, FragState { marks: below_marks, mass: below_mass });
            self.push_graft(t, host, w);
            self.refresh_isolation(kept_root);
        } else {
            // chunk is the subtree below w
            self.detach_below(w);
            let host = *frag.marks.iter().min().unwrap();
            let below_mass = self.subtree_mass(w);
            let above = self.frags.get_mut(&root).unwrap();
            above.mass -= below_mass;
            self.push_graft(t, host, w);
            self.refresh_isolation(root);
        }
    }

    /// Detaches the subtree at `w` from its parent, leaving a massless stub
    /// for the dangling upper piece.
    fn detach_below(&mut self, w: usize) {
        let y = self.nodes[w].parent.expect("cut node has a parent");
        let span = self.nodes[w].src;
        let stub = self.nodes.len();
        self.nodes.push(WNode {
            parent: Some(y),
            children: Vec::new(),
            len: self.nodes[w].len,
            mass: 0.0,
            src: span,
        });
        let pos = self.nodes[y].children.iter().position(|&c| c == w).unwrap();
        self.nodes[y].children[pos] = stub;
        self.nodes[w].parent = None;
        self.nodes[w].len = 0.0;
        self.repoint_piece(w, span, stub);
    }

    /// Detaches the single child below `w`, rooting that side at a fresh
    /// anchor node; `w` keeps its own edge for the re-rooted upper chunk.
    fn detach_below_keep(&mut self, w: usize) -> usize {
        debug_assert_eq!(self.nodes[w].children.len(), 1);
        let z = self.nodes[w].children[0];
        let anchor = self.nodes.len();
        self.nodes.push(WNode {
            parent: None,
            children: vec![z],
            len: 0.0,
            mass: 0.0,
            src: SrcSpan { edge: usize::MAX, lo: 0.0, hi: 0.0, flipped: false },
        });
        self.nodes[w].children.clear();
        self.nodes[z].parent = Some(anchor);
        anchor
    }

    fn push_graft(&mut self, t: f64, host: usize, w: usize) {
        let position = self.levels[host];
        let (tree, map, spans) = self.extract(w);
        let mass = tree.total_mass();
        let orig_len = self.orig_len;
        self.grafts.push(Graft {
            time: t,
            host,
            position,
            mass,
            tree,
            node_of: map.into_iter().filter(|&(work, _)| work < orig_len).collect(),
            spans,
        });
    }

    fn leftover_spans(&self) -> Vec<Vec<SrcSpan>> {
        self.mark_node
            .iter()
            .map(|&m| {
                let root = self.frag_root(m);
                let mut spans = Vec::new();
                let mut stack = vec![root];
                while let Some(x) = stack.pop() {
                    if self.nodes[x].parent.is_some() && self.nodes[x].len > 0.0 {
                        spans.push(self.nodes[x].src);
                    }
                    stack.extend_from_slice(&self.nodes[x].children);
                }
                spans
            })
            .collect()
    }
}

/// Runs the cutting simulation for `marks` over the shared event process,
/// extending the horizon until every mark is isolated. `map_event` filters
/// and translates base events into the simulated tree's coordinates.
fn run_sim(
    tree: &MeasuredTree,
    base: &MeasuredTree,
    marks: &[NodeId],
    cuts: &mut CutProcess,
    t_start: f64,
    l_start: f64,
    map_event: impl Fn(&CutEvent) -> Option<(NodeId, f64)>,
) -> Result<CutSim> {
    let mut sim = CutSim::new(tree, marks, t_start, l_start);
    if sim.all_isolated() {
        return Ok(sim);
    }
    let mut idx = 0usize;
    loop {
        while idx < cuts.events.len() {
            let ev = cuts.events[idx];
            idx += 1;
            if ev.time <= t_start {
                continue;
            }
            if let Some((edge, offset)) = map_event(&ev) {
                sim.process(ev.time, edge, offset);
                if sim.all_isolated() {
                    return Ok(sim);
                }
            }
        }
        if cuts.horizon >= MAX_HORIZON {
            return Err(Error::NonTermination);
        }
        let next = (cuts.horizon * 2.0).max(cuts.block_len);
        cuts.ensure_horizon(base, next);
    }
}

fn check_marks(tree: &MeasuredTree, marks: &[NodeId]) -> Result<()> {
    if marks.is_empty() {
        return Err(Error::EmptyInput("no marks"));
    }
    for (i, &m) in marks.iter().enumerate() {
        if !tree.contains(m) {
            return Err(Error::InvalidNode(m));
        }
        if tree.atom_mass(m) <= 0.0 {
            return Err(Error::InvalidArgument(format!("mark {m} is not an atom")));
        }
        if marks[..i].contains(&m) {
            return Err(Error::InvalidArgument("marks must be distinct".into()));
        }
    }
    Ok(())
}

/// The partition genealogy backbone of the marked atoms.
pub fn genealogy_backbone(
    tree: &MeasuredTree,
    cuts: &mut CutProcess,
    marks: &[NodeId],
) -> Result<Backbone> {
    Ok(assemble_cut_tree(tree, cuts, marks)?.backbone)
}

/// Builds the k-cut tree of `marks` under the given rain.
pub fn assemble_cut_tree(
    tree: &MeasuredTree,
    cuts: &mut CutProcess,
    marks: &[NodeId],
) -> Result<CutTree> {
    check_marks(tree, marks)?;
    let sim = run_sim(tree, tree, marks, cuts, 0.0, 0.0, |ev| Some((ev.edge, ev.offset)))?;
    let leftover = sim.leftover_spans();
    let backbone =
        Backbone { k: marks.len(), records: sim.records.clone(), leaf_len: sim.levels.clone() };
    Ok(CutTree {
        marks: marks.to_vec(),
        backbone,
        grafts: sim.grafts,
        leftover_spans: leftover,
        total_mass: tree.total_mass(),
        mark_mass: marks.iter().map(|&m| tree.atom_mass(m)).collect(),
    })
}

/// Refines a cut tree with one extra mark by re-cutting only the graft that
/// contains it, on the same event realization. The output matches the
/// from-scratch assembly with `marks + [new_mark]`.
pub fn refine_cut_tree(
    prev: &CutTree,
    tree: &MeasuredTree,
    cuts: &mut CutProcess,
    new_mark: NodeId,
) -> Result<CutTree> {
    if prev.marks.contains(&new_mark) {
        return Err(Error::InvalidArgument("mark already present".into()));
    }
    if !tree.contains(new_mark) || tree.atom_mass(new_mark) <= 0.0 {
        return Err(Error::InvalidArgument("new mark is not an atom".into()));
    }
    let gi = prev
        .grafts
        .iter()
        .position(|g| g.node_of.contains_key(&new_mark))
        .ok_or(Error::MarkOnBackbone)?;
    let g = &prev.grafts[gi];
    let new_idx = prev.k();
    let local_mark = g.node_of[&new_mark];
    let sim = run_sim(&g.tree, tree, &[local_mark], cuts, g.time, g.position, |ev| {
        if ev.time <= g.time {
            return None;
        }
        g.map_location(ev.edge, ev.offset)
    })?;

    // genealogy: the new mark shares the host's blocks strictly before the
    // graft time, then becomes a singleton.
    let mut records = prev.backbone.records.clone();
    for r in records.iter_mut() {
        if r.time < g.time && r.block.contains(&g.host) {
            r.block.push(new_idx);
            if r.left.contains(&g.host) {
                r.left.push(new_idx);
            } else {
                r.right.push(new_idx);
            }
        }
    }
    let mut old_block: Vec<usize> = (0..prev.k())
        .filter(|&j| {
            !prev.backbone.records.iter().any(|r| {
                r.time < g.time
                    && r.block.contains(&g.host)
                    && r.block.contains(&j)
                    && (r.left.contains(&g.host) != r.left.contains(&j))
            })
        })
        .collect();
    let old_members = old_block.clone();
    old_block.push(new_idx);
    records.push(SplitRecord {
        time: g.time,
        block: old_block,
        left: old_members,
        right: vec![new_idx],
        position: g.position,
    });
    records.sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap());

    let mut leaf_len = prev.backbone.leaf_len.clone();
    leaf_len.push(sim.levels[0]);

    // grafts: everything but the refined one, plus the sub-grafts with
    // provenance composed back into base coordinates
    let mut grafts: Vec<Graft> = Vec::with_capacity(prev.grafts.len() + sim.grafts.len());
    for (i, old) in prev.grafts.iter().enumerate() {
        if i != gi {
            grafts.push(old.clone());
        }
    }
    let span_of: HashMap<NodeId, SrcSpan> = g.spans.iter().copied().collect();
    let local_of_outer: HashMap<NodeId, NodeId> =
        g.node_of.iter().map(|(&base, &loc)| (loc, base)).collect();
    let sub_leftover: Vec<SrcSpan> = sim.leftover_spans().remove(0);
    for sub in sim.grafts {
        let spans = sub
            .spans
            .iter()
            .map(|&(child, s)| {
                let outer = span_of[&s.edge];
                (child, outer.compose(s.lo, s.hi, s.flipped))
            })
            .collect();
        let node_of = sub
            .node_of
            .iter()
            .filter_map(|(&loc, &subnode)| local_of_outer.get(&loc).map(|&b| (b, subnode)))
            .collect();
        grafts.push(Graft {
            time: sub.time,
            host: new_idx,
            position: sub.position,
            mass: sub.mass,
            tree: sub.tree,
            node_of,
            spans,
        });
    }

    let mut leftover = prev.leftover_spans.clone();
    leftover.push(
        sub_leftover
            .into_iter()
            .map(|s| span_of[&s.edge].compose(s.lo, s.hi, s.flipped))
            .collect(),
    );

    let mut marks = prev.marks.clone();
    marks.push(new_mark);
    let mut mark_mass = prev.mark_mass.clone();
    mark_mass.push(tree.atom_mass(new_mark));
    Ok(CutTree {
        marks,
        backbone: Backbone { k: prev.k() + 1, records, leaf_len },
        grafts,
        leftover_spans: leftover,
        total_mass: prev.total_mass,
        mark_mass,
    })
}

/// The connected component of `tree` minus all cuts before `t` containing
/// `v`, rooted at its point closest to the original root. Dangling stubs at
/// open ends are kept so length custody is exact.
pub fn component_of(
    tree: &MeasuredTree,
    cuts: &CutProcess,
    v: TreePoint,
    t: f64,
) -> Result<MeasuredTree> {
    let mut work = tree.clone();
    let mut per_edge: HashMap<NodeId, Vec<(f64, bool)>> = HashMap::new();
    for ev in cuts.events.iter().filter(|e| e.time <= t) {
        if ev.edge == v.edge && ev.offset == v.offset {
            return Err(Error::InvalidArgument("base point is a cut location".into()));
        }
        per_edge.entry(ev.edge).or_default().push((ev.offset, false));
    }
    let mut v_node = work.point_as_node(v);
    if v_node.is_none() {
        per_edge.entry(v.edge).or_default().push((v.offset, true));
    }
    let mut walls: Vec<NodeId> = Vec::new();
    for (edge, mut offs) in per_edge {
        offs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        // split from the child end so earlier offsets stay valid
        let mut child = edge;
        for &(off, is_v) in offs.iter().rev() {
            let w = work.split_edge(child, off)?;
            if is_v {
                v_node = Some(w);
            } else {
                walls.push(w);
            }
            child = w;
        }
    }
    let start = v_node.expect("base point resolved");
    let mut seen: std::collections::HashSet<NodeId> = [start].into_iter().collect();
    let mut stack = vec![start];
    while let Some(x) = stack.pop() {
        let mut nbrs: Vec<NodeId> = work.children(x).to_vec();
        if let Some(p) = work.parent(x) {
            nbrs.push(p);
        }
        for n in nbrs {
            if !seen.contains(&n) && !walls.contains(&n) {
                seen.insert(n);
                stack.push(n);
            }
        }
    }
    // top = unique member closest to the root; when its parent is a cut
    // point the half-open segment up to the cut still belongs here
    let top = *seen
        .iter()
        .min_by(|&&a, &&b| work.depth(a).partial_cmp(&work.depth(b)).unwrap())
        .unwrap();
    let (mut out, top_in) = if work.parent(top).is_some() {
        let mut o = MeasuredTree::singleton(0.0);
        let t = o.add_child(0, work.edge_len(top), work.atom_mass(top))?;
        (o, t)
    } else {
        (MeasuredTree::singleton(work.atom_mass(top)), 0)
    };
    let mut stack: Vec<(NodeId, NodeId)> =
        work.children(top).iter().map(|&c| (c, top_in)).collect();
    while let Some((x, parent)) = stack.pop() {
        if walls.contains(&x) {
            // open end: keep the dangling length, drop the severed side
            out.add_child(parent, work.edge_len(x), 0.0)?;
            continue;
        }
        if !seen.contains(&x) {
            continue;
        }
        let nid = out.add_child(parent, work.edge_len(x), work.atom_mass(x))?;
        for &c in work.children(x) {
            stack.push((c, nid));
        }
    }
    Ok(out)
}
