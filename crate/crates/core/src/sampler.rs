//! Samplers for finite approximations of the Brownian continuum random tree.
//!
//! Two independent constructions are provided and cross-validated against
//! each other: a discretised normalized Brownian excursion turned into the
//! spanning tree of uniformly sampled times, and the line-breaking (stick
//! breaking) construction. Distances in the line-breaking tree are exact in
//! law; the excursion route carries an O(1/sqrt(grid)) discretisation bias in
//! the range minima.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tree::{MeasuredTree, NodeId};

/// Discrete nonnegative excursion on a uniform grid over [0, 1].
#[derive(Clone, Debug)]
pub struct ExcursionPath {
    /// `n + 1` values with `values[0] == values[n] == 0`.
    pub values: Vec<f64>,
}

impl ExcursionPath {
    pub fn grid_size(&self) -> usize {
        self.values.len() - 1
    }

    /// Minimum of the path over the inclusive grid index range.
    pub fn range_min(&self, lo: usize, hi: usize) -> f64 {
        let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
        self.values[lo..=hi].iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Tree pseudo-distance between grid times: `2(e_s + e_t - 2 min_[s,t] e)`.
    pub fn grid_distance(&self, s: usize, t: usize) -> f64 {
        2.0 * (self.values[s] + self.values[t] - 2.0 * self.range_min(s, t))
    }
}

/// Normalized Brownian excursion via bridge simulation and the Vervaat
/// transform (cyclic shift at the bridge minimum, first-index tie rule).
pub fn sample_excursion<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<ExcursionPath> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("grid size {n} < 2")));
    }
    let step = 1.0 / n as f64;
    let sd = step.sqrt();
    let mut walk = Vec::with_capacity(n + 1);
    walk.push(0.0);
    let mut acc = 0.0;
    for _ in 0..n {
        acc += sd * gaussian(rng);
        walk.push(acc);
    }
    let last = walk[n];
    // bridge by subtraction
    for (i, w) in walk.iter_mut().enumerate() {
        *w -= last * (i as f64) * step;
    }
    let mut argmin = 0usize;
    for i in 1..n {
        if walk[i] < walk[argmin] {
            argmin = i;
        }
    }
    let minv = walk[argmin];
    let mut values = Vec::with_capacity(n + 1);
    for i in 0..n {
        values.push(walk[(i + argmin) % n] - minv);
    }
    values.push(0.0);
    values[0] = 0.0;
    Ok(ExcursionPath { values })
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // Box-Muller; the pair's second value is discarded for simplicity.
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Spanning tree of `k` uniform times under the excursion metric, rooted at
/// time zero. Each sampled time carries atom mass `1/k`.
pub fn tree_from_excursion<R: Rng + ?Sized>(
    e: &ExcursionPath,
    k: usize,
    rng: &mut R,
) -> Result<MeasuredTree> {
    if k < 1 {
        return Err(Error::InvalidArgument("leaf count must be >= 1".into()));
    }
    let n = e.grid_size();
    let mut times: Vec<usize> = Vec::with_capacity(k);
    while times.len() < k {
        let t = rng.random_range(1..n);
        if !times.contains(&t) {
            times.push(t);
        }
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by_key(|&i| times[i]);

    // Contour-style construction along sorted times: maintain the rightmost
    // root-to-leaf path as a stack of (node, depth). The glue depth of
    // consecutive leaves is twice the running minimum between their times;
    // values[0] = 0 makes the first leaf glue at the root.
    let mut tree = MeasuredTree::singleton(0.0);
    let mass = 1.0 / k as f64;
    let mut stack: Vec<(NodeId, f64)> = vec![(tree.root(), 0.0)];
    let mut prev_time = 0usize;
    for &idx in &order {
        let t = times[idx];
        let depth = 2.0 * e.values[t];
        let glue = 2.0 * e.range_min(prev_time, t);
        let mut last_popped: Option<(NodeId, f64)> = None;
        while stack.last().unwrap().1 > glue {
            last_popped = stack.pop();
        }
        let (top, top_depth) = *stack.last().unwrap();
        let attach = if glue > top_depth {
            // glue <= previous leaf depth, so at least one entry was popped
            let (child, _) = last_popped.expect("glue below the stacked path");
            let mid = tree.split_edge(child, glue - top_depth)?;
            stack.push((mid, glue));
            mid
        } else {
            top
        };
        if depth > glue {
            let leaf = tree.add_child(attach, depth - glue, mass)?;
            stack.push((leaf, depth));
        } else {
            // sampled time realises the running minimum: atom on the skeleton
            tree.set_atom_mass(attach, tree.atom_mass(attach) + mass);
        }
        prev_time = t;
    }
    tree.validate()?;
    Ok(tree)
}

/// Line-breaking construction: inhomogeneous Poisson cuts on the half line
/// with intensity `t dt` yield segment lengths; each new segment attaches at
/// a uniform length-measure point of the current tree. Leaves carry `1/k`.
pub fn line_breaking_tree<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Result<MeasuredTree> {
    if k < 1 {
        return Err(Error::InvalidArgument("leaf count must be >= 1".into()));
    }
    let mass = 1.0 / k as f64;
    let mut c_sq = 2.0 * exponential(rng);
    let mut cut_prev = c_sq.sqrt();
    let mut tree = MeasuredTree::singleton(0.0);
    tree.add_child(tree.root(), cut_prev, mass)?;
    for _ in 1..k {
        c_sq += 2.0 * exponential(rng);
        let cut = c_sq.sqrt();
        let seg = cut - cut_prev;
        // uniform length-measure position on the current tree
        let pos = rng.random::<f64>() * cut_prev;
        let mut acc = 0.0;
        let mut attach = None;
        for id in tree.node_ids() {
            let l = tree.edge_len(id);
            if l == 0.0 {
                continue;
            }
            if pos < acc + l {
                attach = Some((id, pos - acc));
                break;
            }
            acc += l;
        }
        let (edge, off) = attach.unwrap_or_else(|| {
            // numerical tail: attach at the far end of the last positive edge
            let id = tree.node_ids().filter(|&i| tree.edge_len(i) > 0.0).last().unwrap();
            (id, tree.edge_len(id))
        });
        let at = tree.split_edge(edge, off)?;
        tree.add_child(at, seg, mass)?;
        cut_prev = cut;
    }
    tree.validate()?;
    Ok(tree)
}

fn exponential<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    -(1.0 - rng.random::<f64>()).ln()
}

/// Rayleigh sample via inverse CDF.
pub fn rayleigh<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    (-2.0 * (1.0 - rng.random::<f64>()).ln()).sqrt()
}

/// Rayleigh CDF `1 - exp(-x^2/2)`.
pub fn rayleigh_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        1.0 - (-x * x / 2.0).exp()
    }
}

/// Mean of the Rayleigh law.
pub fn rayleigh_mean() -> f64 {
    (std::f64::consts::PI / 2.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn excursion_shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = sample_excursion(2, &mut rng).unwrap();
        assert_eq!(e.values.len(), 3);
        assert_eq!(e.values[0], 0.0);
        assert_eq!(e.values[2], 0.0);
        assert!(e.values[1] > 0.0);
        assert!(sample_excursion(1, &mut rng).is_err());

        let a = sample_excursion(128, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = sample_excursion(128, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a.values, b.values);
        assert!(a.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn excursion_root_distance_is_rayleigh() {
        // two-sample oracle: 2*e_{Z} vs inverse-CDF Rayleigh draws
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 16_384;
        let m = 4000;
        let mut heights = Vec::with_capacity(m);
        for _ in 0..m / 8 {
            let e = sample_excursion(n, &mut rng).unwrap();
            for _ in 0..8 {
                let z = rng.random_range(1..n);
                heights.push(2.0 * e.values[z]);
            }
        }
        let ks = stats::ks_test(&heights, rayleigh_cdf, 0.01).unwrap();
        assert!(ks.pass, "KS statistic {} over threshold {}", ks.statistic, ks.threshold);
    }

    #[test]
    fn excursion_tree_single_leaf_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e = sample_excursion(256, &mut rng).unwrap();
        let t = tree_from_excursion(&e, 1, &mut rng).unwrap();
        // path of length 2 e_Z for some grid Z
        let atoms = t.atoms();
        assert_eq!(atoms.len(), 1);
        let depth = t.depth(atoms[0]);
        assert!(e.values.iter().any(|&v| (2.0 * v - depth).abs() < 1e-12));
    }

    #[test]
    fn excursion_tree_matches_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let e = sample_excursion(512, &mut rng).unwrap();
            let k = 10;
            // sample times through a cloned rng so we can recompute the matrix
            let mut probe = rng.clone();
            let t = tree_from_excursion(&e, k, &mut rng).unwrap();
            let mut times: Vec<usize> = Vec::with_capacity(k);
            while times.len() < k {
                let s = probe.random_range(1..e.grid_size());
                if !times.contains(&s) {
                    times.push(s);
                }
            }
            // leaves in time-sorted order correspond to the contour traversal
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by_key(|&i| times[i]);
            let atoms = t.atoms();
            assert_eq!(atoms.len(), k);
            // root distances must match 2 e_t as multisets
            let mut want: Vec<f64> = times.iter().map(|&s| 2.0 * e.values[s]).collect();
            let mut got: Vec<f64> = atoms.iter().map(|&a| t.depth(a)).collect();
            want.sort_by(|a, b| a.partial_cmp(b).unwrap());
            got.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (w, g) in want.iter().zip(&got) {
                assert!((w - g).abs() < 1e-9);
            }
            // leaves are created in sorted-time order with increasing ids
            let mut sorted_leaf = atoms.clone();
            sorted_leaf.sort();
            for (ii, &i) in order.iter().enumerate() {
                for (jj, &j) in order.iter().enumerate() {
                    if ii < jj {
                        let want = e.grid_distance(times[i], times[j]);
                        let got =
                            t.distance_nodes(sorted_leaf[ii], sorted_leaf[jj]);
                        assert!(
                            (want - got).abs() < 1e-9,
                            "pair ({ii},{jj}): want {want}, got {got}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn line_breaking_first_segment_law() {
        // first cut: C^2/2 ~ Exp(1); KS against the inverse-CDF oracle
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut samples = Vec::with_capacity(4000);
        for _ in 0..4000 {
            let t = line_breaking_tree(1, &mut rng).unwrap();
            samples.push(t.total_len().powi(2) / 2.0);
        }
        let ks = stats::ks_test(&samples, |x| 1.0 - (-x).exp(), 0.01).unwrap();
        assert!(ks.pass, "KS {} > {}", ks.statistic, ks.threshold);
    }

    #[test]
    fn line_breaking_two_leaves_binary() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..50 {
            let t = line_breaking_tree(2, &mut rng).unwrap();
            assert_eq!(t.atoms().len(), 2);
            let branch: Vec<_> = t.branch_points();
            assert_eq!(branch.len(), 1, "Y shape has exactly one branch point");
            assert_eq!(t.children(branch[0]).len(), 2);
        }
    }

    #[test]
    fn rayleigh_cdf_values() {
        assert_eq!(rayleigh_cdf(0.0), 0.0);
        let med = (2.0f64 * 2.0f64.ln()).sqrt();
        assert!((rayleigh_cdf(med) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rayleigh_mean_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| rayleigh(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - rayleigh_mean()).abs() < 0.007, "mean {mean}");
    }

    #[test]
    fn scaling_is_exact_on_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let t = line_breaking_tree(16, &mut rng).unwrap();
        let s = t.scale_lengths(2.0);
        let atoms = t.atoms();
        for i in 0..atoms.len() {
            for j in (i + 1)..atoms.len() {
                let d0 = t.distance_nodes(atoms[i], atoms[j]);
                let d1 = s.distance_nodes(atoms[i], atoms[j]);
                assert!((d1 - 2.0 * d0).abs() < 1e-12);
            }
        }
    }
}
