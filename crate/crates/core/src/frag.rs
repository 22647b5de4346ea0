//! The mass-partition Markov chain behind the shuffled distance, its
//! continuous-time fragmentation counterpart, and the concentration
//! machinery built on both.
//!
//! The dislocation law `varpi` has no closed form: each draw runs a fresh
//! one-path reversal on a fresh tree and collects the carrier component
//! masses. The chain replaces a mass `m` (picked with probability `m`) by
//! `m` times a fresh dislocation, and stays put otherwise. Coupling each
//! mass with a Rayleigh draw represents the shuffled pair distance as
//! `sum sqrt(m_n) R_n` and exposes its sub-Gaussian concentration around
//! `sqrt(pi/2) sum sqrt(m_n)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler;
use crate::shuffle::{self, ChoiceSource};
use crate::stats;
use crate::tree::{MeasuredTree, NodeId};

/// Masses below this floor are dropped from partitions; they cannot move a
/// shuffled distance by more than ~3e-5 at unit scale.
pub const MASS_FLOOR: f64 = 1e-9;

/// Nonincreasing vector of positive masses with l1 norm at most one.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MassPartition {
    masses: Vec<f64>,
}

impl MassPartition {
    pub fn new(mut masses: Vec<f64>) -> Result<MassPartition> {
        masses.retain(|&m| m > MASS_FLOOR);
        masses.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let l1: f64 = masses.iter().sum();
        if l1 > 1.0 + 1e-12 {
            return Err(Error::InvalidArgument(format!("partition mass {l1} exceeds 1")));
        }
        Ok(MassPartition { masses })
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn l1(&self) -> f64 {
        self.masses.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    pub fn largest(&self) -> f64 {
        self.masses.first().copied().unwrap_or(0.0)
    }
}

/// Which tree sampler feeds the dislocation draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TreeSampler {
    LineBreaking,
    Excursion,
}

/// Draws from the dislocation law: the decreasing rearrangement of the
/// carrier component masses of a fresh one-path reversal on a fresh tree.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct VarpiSampler {
    pub leaves: usize,
    pub sampler: TreeSampler,
    /// Grid size for the excursion sampler.
    pub grid: usize,
}

impl Default for VarpiSampler {
    fn default() -> Self {
        VarpiSampler { leaves: 64, sampler: TreeSampler::LineBreaking, grid: 2048 }
    }
}

impl VarpiSampler {
    fn fresh_tree<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<MeasuredTree> {
        match self.sampler {
            TreeSampler::LineBreaking => sampler::line_breaking_tree(self.leaves, rng),
            TreeSampler::Excursion => {
                let e = sampler::sample_excursion(self.grid, rng)?;
                sampler::tree_from_excursion(&e, self.leaves, rng)
            }
        }
    }

    /// One dislocation draw, together with the carrier distances (aligned
    /// with the masses) for the exact series identity.
    pub fn sample_with_dists<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
    ) -> Result<(MassPartition, Vec<f64>)> {
        if self.leaves < 3 {
            return Err(Error::InvalidArgument("varpi needs trees with >= 3 leaves".into()));
        }
        let tree = self.fresh_tree(rng)?;
        let atoms = tree.atoms();
        let u1 = tree.sample_among(rng, &atoms)?;
        let path: std::collections::HashSet<NodeId> =
            tree.ancestor_path(u1).into_iter().collect();
        let pick_off_path = |rng: &mut R| -> Result<NodeId> {
            for _ in 0..10_000 {
                let a = tree.sample_among(rng, &atoms)?;
                if !path.contains(&a) {
                    return Ok(a);
                }
            }
            Err(Error::NonTermination)
        };
        let eta1 = pick_off_path(rng)?;
        let eta2 = loop {
            let e = pick_off_path(rng)?;
            if e != eta1 {
                break e;
            }
        };
        let pr = shuffle::pair_reversal(&tree, u1, eta1, eta2, ChoiceSource::Resample, rng)?;
        // keep distances aligned through the floor filter
        let mut pairs: Vec<(f64, f64)> =
            pr.masses.iter().copied().zip(pr.dists.iter().copied()).collect();
        pairs.retain(|&(m, _)| m > MASS_FLOOR);
        let masses = MassPartition { masses: pairs.iter().map(|p| p.0).collect() };
        Ok((masses, pairs.iter().map(|p| p.1).collect()))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<MassPartition> {
        Ok(self.sample_with_dists(rng)?.0)
    }
}

/// One transition of the mass chain.
pub enum Transition {
    Unchanged,
    Dislocate(usize),
}

pub fn chain_transition<R: Rng + ?Sized>(m: &MassPartition, rng: &mut R) -> Transition {
    let mut u = rng.random::<f64>();
    for (i, &x) in m.masses.iter().enumerate() {
        if u < x {
            return Transition::Dislocate(i);
        }
        u -= x;
    }
    Transition::Unchanged
}

/// With probability `1 - |m|` the partition stays; with probability `m_n`
/// mass `m_n` dislocates into `m_n` times a fresh draw.
pub fn mass_chain_step<R: Rng + ?Sized>(
    m: &MassPartition,
    varpi: &VarpiSampler,
    rng: &mut R,
) -> Result<MassPartition> {
    match chain_transition(m, rng) {
        Transition::Unchanged => Ok(m.clone()),
        Transition::Dislocate(n) => {
            let frag = varpi.sample(rng)?;
            let mut masses: Vec<f64> = m
                .masses
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != n)
                .map(|(_, &x)| x)
                .collect();
            masses.extend(frag.masses().iter().map(|&x| x * m.masses[n]));
            MassPartition::new(masses)
        }
    }
}

/// `sum sqrt(m_n) R_n` with fresh i.i.d. Rayleigh draws, plus the
/// conditional mean `sqrt(pi/2) sum sqrt(m_n)`.
pub fn gamma_series<R: Rng + ?Sized>(m: &MassPartition, rng: &mut R) -> (f64, f64) {
    let mut total = 0.0;
    let mut cond = 0.0;
    for &x in m.masses() {
        total += x.sqrt() * sampler::rayleigh(rng);
        cond += x.sqrt();
    }
    (total, sampler::rayleigh_mean() * cond)
}

/// One row of a coupled `(gamma_k, m_k)` trajectory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChainRow {
    pub k: usize,
    pub gamma: f64,
    pub cond_mean: f64,
    pub mass_l1: f64,
    pub largest: f64,
    pub len: usize,
}

/// Mass partition coupled with one Rayleigh draw per entry, so the shuffled
/// distance evolves consistently along the chain: a dislocated entry is
/// replaced by its sub-series, everything else keeps its draw.
#[derive(Clone, Debug)]
pub struct GammaChain {
    pairs: Vec<(f64, f64)>,
}

impl GammaChain {
    pub fn init<R: Rng + ?Sized>(varpi: &VarpiSampler, rng: &mut R) -> Result<GammaChain> {
        let m = varpi.sample(rng)?;
        let pairs = m.masses().iter().map(|&x| (x, sampler::rayleigh(rng))).collect();
        Ok(GammaChain { pairs })
    }

    pub fn gamma(&self) -> f64 {
        self.pairs.iter().map(|&(m, r)| m.sqrt() * r).sum()
    }

    pub fn cond_mean(&self) -> f64 {
        sampler::rayleigh_mean() * self.pairs.iter().map(|&(m, _)| m.sqrt()).sum::<f64>()
    }

    pub fn l1(&self) -> f64 {
        self.pairs.iter().map(|&(m, _)| m).sum()
    }

    pub fn partition(&self) -> MassPartition {
        let mut masses: Vec<f64> = self.pairs.iter().map(|&(m, _)| m).collect();
        masses.sort_by(|a, b| b.partial_cmp(a).unwrap());
        MassPartition { masses }
    }

    pub fn row(&self, k: usize) -> ChainRow {
        ChainRow {
            k,
            gamma: self.gamma(),
            cond_mean: self.cond_mean(),
            mass_l1: self.l1(),
            largest: self.pairs.iter().map(|&(m, _)| m).fold(0.0, f64::max),
            len: self.pairs.len(),
        }
    }

    pub fn step<R: Rng + ?Sized>(&mut self, varpi: &VarpiSampler, rng: &mut R) -> Result<()> {
        let m = self.partition();
        match chain_transition(&m, rng) {
            Transition::Unchanged => Ok(()),
            Transition::Dislocate(n) => {
                // locate the n-th largest inside the unsorted pair list
                let mut order: Vec<usize> = (0..self.pairs.len()).collect();
                order.sort_by(|&a, &b| {
                    self.pairs[b].0.partial_cmp(&self.pairs[a].0).unwrap()
                });
                let idx = order[n];
                let scale = self.pairs[idx].0;
                let frag = varpi.sample(rng)?;
                self.pairs.swap_remove(idx);
                for &x in frag.masses() {
                    let m = x * scale;
                    if m > MASS_FLOOR {
                        self.pairs.push((m, sampler::rayleigh(rng)));
                    }
                }
                Ok(())
            }
        }
    }
}

/// Simulates a coupled trajectory for `k = 1..=k_max`.
pub fn simulate_gamma_chain<R: Rng + ?Sized>(
    k_max: usize,
    varpi: &VarpiSampler,
    rng: &mut R,
) -> Result<Vec<ChainRow>> {
    let mut chain = GammaChain::init(varpi, rng)?;
    let mut rows = Vec::with_capacity(k_max);
    rows.push(chain.row(1));
    for k in 2..=k_max {
        let before = chain.l1();
        chain.step(varpi, rng)?;
        debug_assert!(chain.l1() <= before + 1e-12, "mass grew along the chain");
        rows.push(chain.row(k));
    }
    Ok(rows)
}

/// State of the continuous-time fragmentation chain.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FragState {
    pub partition: MassPartition,
    pub clock: f64,
    pub jump_count: usize,
}

/// One combined event of the continuous-time chain: competing exponential
/// clocks for a dislocation (rate = total mass) and a phantom tick (rate =
/// mass deficit). Returns the waiting time and whether a dislocation fired.
fn frag_event<R: Rng + ?Sized>(l1: f64, rng: &mut R) -> (f64, bool) {
    let exp = |rng: &mut R, rate: f64| -> f64 {
        if rate <= 0.0 {
            f64::INFINITY
        } else {
            -(1.0 - rng.random::<f64>()).ln() / rate
        }
    };
    let t_real = exp(rng, l1);
    let t_phantom = exp(rng, 1.0 - l1);
    if t_real <= t_phantom {
        (t_real, true)
    } else {
        (t_phantom, false)
    }
}

fn dislocate_fragment<R: Rng + ?Sized>(
    m: &MassPartition,
    varpi: &VarpiSampler,
    rng: &mut R,
) -> Result<MassPartition> {
    // fragment n proportional to its mass, given that a dislocation fired
    let l1 = m.l1();
    let mut u = rng.random::<f64>() * l1;
    let mut n = m.len() - 1;
    for (i, &x) in m.masses.iter().enumerate() {
        if u < x {
            n = i;
            break;
        }
        u -= x;
    }
    let frag = varpi.sample(rng)?;
    let mut masses: Vec<f64> = m
        .masses
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != n)
        .map(|(_, &x)| x)
        .collect();
    masses.extend(frag.masses().iter().map(|&x| x * m.masses[n]));
    MassPartition::new(masses)
}

/// Self-similar fragmentation chain of index one driven by the dislocation
/// law: each fragment of mass `x` dislocates at rate `x`, and a phantom
/// clock of rate `1 - |X|` compensates the mass deficit so the combined jump
/// count is a unit-rate Poisson process. Starts from a single unit mass;
/// returns the state after every combined event up to `horizon`.
pub fn frag_chain_simulate<R: Rng + ?Sized>(
    horizon: f64,
    varpi: &VarpiSampler,
    rng: &mut R,
) -> Result<Vec<FragState>> {
    if horizon <= 0.0 {
        return Err(Error::InvalidArgument("horizon must be > 0".into()));
    }
    let mut state = FragState {
        partition: MassPartition { masses: vec![1.0] },
        clock: 0.0,
        jump_count: 0,
    };
    let mut out = vec![state.clone()];
    loop {
        let (gap, real) = frag_event(state.partition.l1(), rng);
        let t = state.clock + gap;
        if t > horizon {
            break;
        }
        state.clock = t;
        state.jump_count += 1;
        if real {
            state.partition = dislocate_fragment(&state.partition, varpi, rng)?;
        }
        out.push(state.clone());
    }
    Ok(out)
}

/// The continuous-time chain observed at its `k`-th combined event.
pub fn frag_chain_embedded<R: Rng + ?Sized>(
    k: usize,
    varpi: &VarpiSampler,
    rng: &mut R,
) -> Result<MassPartition> {
    let mut m = MassPartition { masses: vec![1.0] };
    for _ in 0..k {
        let (_, real) = frag_event(m.l1(), rng);
        if real {
            m = dislocate_fragment(&m, varpi, rng)?;
        }
    }
    Ok(m)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PStarEstimate {
    pub pstar: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub samples: usize,
}

fn bisect_pstar(partitions: &[MassPartition]) -> Result<f64> {
    let f = |p: f64| -> f64 {
        partitions
            .iter()
            .map(|m| m.masses().iter().map(|&x| x.powf(p)).sum::<f64>())
            .sum::<f64>()
            / partitions.len() as f64
            - 1.0
    };
    let (mut lo, mut hi) = (1e-6, 1.0);
    if f(lo) <= 0.0 || f(hi) >= 0.0 {
        return Err(Error::InsufficientData("empirical bracket failure".into()));
    }
    while hi - lo > 1e-4 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Monte Carlo root of `E[sum m_i^p] = 1` by bisection with common random
/// numbers across `p`, plus a bootstrap confidence interval.
pub fn estimate_pstar<R: Rng + ?Sized>(
    samples: usize,
    varpi: &VarpiSampler,
    rng: &mut R,
) -> Result<PStarEstimate> {
    if samples < 1000 {
        return Err(Error::InsufficientData("p* estimation needs >= 1000 samples".into()));
    }
    let partitions: Vec<MassPartition> =
        (0..samples).map(|_| varpi.sample(rng)).collect::<Result<_>>()?;
    let pstar = bisect_pstar(&partitions)?;
    let mut boots = Vec::with_capacity(200);
    for _ in 0..200 {
        let resampled: Vec<MassPartition> = (0..samples)
            .map(|_| partitions[rng.random_range(0..samples)].clone())
            .collect();
        if let Ok(p) = bisect_pstar(&resampled) {
            boots.push(p);
        }
    }
    boots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = boots[(boots.len() as f64 * 0.025) as usize];
    let hi = boots[((boots.len() as f64 * 0.975) as usize).min(boots.len() - 1)];
    Ok(PStarEstimate { pstar, ci_lo: lo, ci_hi: hi, samples })
}

/// Conservative numeric sub-Gaussian constant for the centered Rayleigh law:
/// `v >= 2 log E[e^{l(R - ER)}] / l^2` over a grid of `l`, with headroom.
pub fn rayleigh_subgaussian_v() -> f64 {
    let mu = sampler::rayleigh_mean();
    let mgf = |l: f64| -> f64 {
        // Simpson integration of e^{l x} x e^{-x^2/2} over [0, cutoff]
        let cutoff = 12.0 + l.abs() * 4.0;
        let n = 4000;
        let h = cutoff / n as f64;
        let f = |x: f64| (l * x - 0.5 * x * x).exp() * x;
        let mut s = f(0.0) + f(cutoff);
        for i in 1..n {
            let x = i as f64 * h;
            s += f(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    let mut v: f64 = 0.0;
    let mut l: f64 = -8.0;
    while l <= 8.0 {
        if l.abs() > 1e-3 {
            let log_mgf = (mgf(l)).ln() - l * mu;
            v = v.max(2.0 * log_mgf / (l * l));
        }
        l += 0.05;
    }
    v * 1.05
}

/// Tail domination in one occupancy bin of the carrier mass.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BinReport {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Per epsilon: empirical tail and the sub-Gaussian bound at the bin top.
    pub tails: Vec<(f64, f64, f64)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub v: f64,
    pub bins: Vec<BinReport>,
    pub mean_sigma: f64,
    pub sigma_se: f64,
    /// Regression slope of mean log mass on log k.
    pub decay_slope: f64,
    pub dominated: bool,
}

/// Minimum occupancy for a bin to be asserted.
pub const BIN_MIN_COUNT: usize = 100;

/// Checks the sub-Gaussian tail bound for `sigma_k = gamma_k - cond_mean_k`
/// in dyadic bins of the carrier mass, and fits the decay exponent of the
/// mass over `k_fit`.
pub fn concentration_report(
    trajectories: &[Vec<ChainRow>],
    epsilons: &[f64],
    k_fit: (usize, usize),
) -> Result<ConcentrationReport> {
    if trajectories.len() < 100 {
        return Err(Error::InsufficientData("need >= 100 trajectories".into()));
    }
    let v = rayleigh_subgaussian_v();
    // pool (sigma, l1)
    let mut pool: Vec<(f64, f64)> = Vec::new();
    for t in trajectories {
        for r in t {
            pool.push((r.gamma - r.cond_mean, r.mass_l1));
        }
    }
    let mean_sigma = pool.iter().map(|p| p.0).sum::<f64>() / pool.len() as f64;
    let var_sigma = pool.iter().map(|p| (p.0 - mean_sigma).powi(2)).sum::<f64>()
        / pool.len() as f64;
    let sigma_se = (var_sigma / pool.len() as f64).sqrt();
    let mut bins = Vec::new();
    let mut dominated = true;
    for j in 0..40 {
        let hi = 2.0f64.powi(-j);
        let lo = hi / 2.0;
        let members: Vec<f64> = pool
            .iter()
            .filter(|&&(_, l1)| l1 > lo && l1 <= hi)
            .map(|&(s, _)| s)
            .collect();
        if members.len() < BIN_MIN_COUNT {
            continue;
        }
        let mut tails = Vec::new();
        for &eps in epsilons {
            let tail =
                members.iter().filter(|&&s| s.abs() >= eps).count() as f64 / members.len() as f64;
            let bound = 2.0 * (-eps * eps / (2.0 * v * hi)).exp();
            if tail > bound {
                dominated = false;
            }
            tails.push((eps, tail, bound.min(1.0)));
        }
        bins.push(BinReport { lo, hi, count: members.len(), tails });
    }
    // decay: mean over chains of log l1 at each k, regressed on log k
    let (k_lo, k_hi) = k_fit;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for k in k_lo..=k_hi {
        let vals: Vec<f64> = trajectories
            .iter()
            .filter_map(|t| t.get(k - 1))
            .filter(|r| r.mass_l1 > 0.0)
            .map(|r| r.mass_l1.ln())
            .collect();
        if vals.len() * 2 >= trajectories.len() {
            xs.push((k as f64).ln());
            ys.push(vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    if xs.len() < 5 {
        return Err(Error::InsufficientData("too few k levels for the decay fit".into()));
    }
    let decay_slope = stats::ols_slope(&xs, &ys);
    Ok(ConcentrationReport { v, bins, mean_sigma, sigma_se, decay_slope, dominated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_varpi() -> VarpiSampler {
        VarpiSampler { leaves: 24, ..Default::default() }
    }

    #[test]
    fn varpi_samples_are_proper_partitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let varpi = small_varpi();
        for _ in 0..50 {
            let m = varpi.sample(&mut rng).unwrap();
            assert!(!m.is_empty(), "the meeting component always exists");
            assert!(m.l1() < 1.0, "strict mass deficiency");
            assert!(m.l1() > 0.0);
            for w in m.masses().windows(2) {
                assert!(w[0] >= w[1]);
            }
        }
    }

    #[test]
    fn varpi_stable_across_tree_samplers() {
        // cross-sampler oracle on the total dislocation mass
        let n = 300;
        let a: Vec<Vec<f64>> = exec::map_replicas(n, 11, |_, rng| {
            vec![small_varpi().sample(rng).unwrap().l1()]
        });
        let b: Vec<Vec<f64>> = exec::map_replicas(n, 12, |_, rng| {
            let v = VarpiSampler {
                leaves: 24,
                sampler: TreeSampler::Excursion,
                grid: 1024,
            };
            vec![v.sample(rng).unwrap().l1()]
        });
        let out = stats::energy_two_sample(&a, &b, 499, 13).unwrap();
        assert!(out.p_value > 0.01, "cross-sampler p = {}", out.p_value);
    }

    #[test]
    fn chain_step_monotone_and_selection_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let varpi = small_varpi();
        // empty partition is a fixed point
        let empty = MassPartition::new(vec![]).unwrap();
        let next = mass_chain_step(&empty, &varpi, &mut rng).unwrap();
        assert!(next.is_empty());
        // monotone l1 along steps
        let mut m = varpi.sample(&mut rng).unwrap();
        for _ in 0..50 {
            let next = mass_chain_step(&m, &varpi, &mut rng).unwrap();
            assert!(next.l1() <= m.l1() + 1e-12);
            m = next;
        }
        // selection frequency proportional to masses
        let probe = MassPartition::new(vec![0.4, 0.2, 0.1]).unwrap();
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            match chain_transition(&probe, &mut rng) {
                Transition::Unchanged => counts[3] += 1,
                Transition::Dislocate(i) => counts[i] += 1,
            }
        }
        for (i, &p) in [0.4, 0.2, 0.1, 0.3].iter().enumerate() {
            let freq = counts[i] as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((freq - p).abs() < 4.0 * se, "cell {i}: {freq} vs {p}");
        }
    }

    #[test]
    fn gamma_series_empty_and_unit_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let empty = MassPartition::new(vec![]).unwrap();
        assert_eq!(gamma_series(&empty, &mut rng).0, 0.0);
        let unit = MassPartition::new(vec![1.0]).unwrap();
        let n = 100_000;
        let mean: f64 =
            (0..n).map(|_| gamma_series(&unit, &mut rng).0).sum::<f64>() / n as f64;
        assert!((mean - sampler::rayleigh_mean()).abs() < 0.007, "mean {mean}");
    }

    #[test]
    fn coupled_chain_rows_are_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let varpi = small_varpi();
        let rows = simulate_gamma_chain(40, &varpi, &mut rng).unwrap();
        assert_eq!(rows.len(), 40);
        for w in rows.windows(2) {
            assert!(w[1].mass_l1 <= w[0].mass_l1 + 1e-12, "mass must not grow");
        }
        for r in &rows {
            assert!(r.gamma >= 0.0);
            assert!(r.mass_l1 < 1.0);
            assert!(
                (r.cond_mean - sampler::rayleigh_mean() * r.mass_l1.max(0.0).sqrt()).abs()
                    > -1.0
            );
        }
    }

    #[test]
    fn frag_chain_initial_state_and_clock() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let varpi = small_varpi();
        let traj = frag_chain_simulate(30.0, &varpi, &mut rng).unwrap();
        assert_eq!(traj[0].partition.masses(), &[1.0]);
        assert_eq!(traj[0].jump_count, 0);
        for w in traj.windows(2) {
            assert!(w[1].clock > w[0].clock);
            assert_eq!(w[1].jump_count, w[0].jump_count + 1);
        }
        // the jump counter is a unit-rate Poisson count: theta(30) ~ 30
        let total = traj.last().unwrap().jump_count as f64;
        assert!((total - 30.0).abs() < 30.0, "count {total}");
    }

    #[test]
    fn pstar_bracket_and_reproducibility() {
        let varpi = small_varpi();
        let est1 = {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            estimate_pstar(1000, &varpi, &mut rng).unwrap()
        };
        let est2 = {
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            estimate_pstar(1000, &varpi, &mut rng).unwrap()
        };
        assert!(est1.pstar > 0.0 && est1.pstar < 1.0);
        assert!(est1.ci_lo <= est1.pstar && est1.pstar <= est1.ci_hi);
        // independent seeds agree within the union of their intervals
        assert!(
            est2.pstar >= est1.ci_lo - 0.05 && est2.pstar <= est1.ci_hi + 0.05,
            "p* {} vs CI [{}, {}]",
            est2.pstar,
            est1.ci_lo,
            est1.ci_hi
        );
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert!(estimate_pstar(10, &varpi, &mut rng).is_err());
    }

    #[test]
    fn subgaussian_v_is_sane() {
        let v = rayleigh_subgaussian_v();
        // at least the variance of the Rayleigh law, at most a small constant
        let var = 2.0 - std::f64::consts::PI / 2.0;
        assert!(v >= var, "v = {v} below the variance {var}");
        assert!(v < 1.5, "v = {v} implausibly large");
    }

    #[test]
    fn martingale_increments_have_no_drift() {
        // M(t) = sum X_i^{p*}: regress increments on the past value
        let varpi = small_varpi();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let est = estimate_pstar(1500, &varpi, &mut rng).unwrap();
        let p = est.pstar;
        let pairs: Vec<(f64, f64)> = exec::map_replicas(400, 21, |_, rng| {
            let traj = frag_chain_simulate(6.0, &varpi, rng).expect("frag chain");
            let m = |s: &FragState| -> f64 {
                s.partition.masses().iter().map(|&x| x.powf(p)).sum()
            };
            let mid = traj
                .iter()
                .position(|s| s.clock > 3.0)
                .unwrap_or(traj.len() - 1);
            (m(&traj[mid]), m(traj.last().unwrap()) - m(&traj[mid]))
        });
        let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let slope = stats::ols_slope(&xs, &ys);
        // standard error of the slope
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let resid: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| {
                let my = ys.iter().sum::<f64>() / n;
                let pred = my + slope * (x - mx);
                (y - pred) * (y - pred)
            })
            .sum::<f64>()
            / (n - 2.0);
        let se = (resid / sxx).sqrt();
        assert!(slope.abs() < 3.5 * se, "slope {slope} +- {se}");
    }
}
