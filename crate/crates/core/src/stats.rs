//! Statistical machinery: goodness-of-fit, two-sample energy tests on
//! distance-matrix ensembles, the Gromov–Prokhorov-style sampling comparator,
//! and the spine decomposition checks.
//!
//! Everything is seed-reproducible: permutation indices come from counter
//! seeded generators, so results do not depend on thread count.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::sampler;
use crate::tree::MeasuredTree;

/// One test outcome in the report format used across the crate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TestRecord {
    pub test_name: String,
    pub statistic: f64,
    pub threshold: f64,
    pub p_value: Option<f64>,
    pub pass: bool,
    pub seed: u64,
    pub n: usize,
}

/// Asymptotic one-sample Kolmogorov–Smirnov coefficient at the 1% level:
/// `D_n < KS_COEF_1PCT / sqrt(n)`.
pub const KS_COEF_1PCT: f64 = 1.63;

#[derive(Clone, Debug)]
pub struct KsOutcome {
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
    pub n: usize,
}

/// One-sample Kolmogorov–Smirnov test against a cdf, at significance `alpha`
/// (asymptotic threshold `sqrt(-ln(alpha/2)/2) / sqrt(n)`).
pub fn ks_test(samples: &[f64], cdf: impl Fn(f64) -> f64, alpha: f64) -> Result<KsOutcome> {
    if samples.len() < 30 {
        return Err(Error::InsufficientData(format!(
            "KS needs >= 30 samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|x| x.is_nan()) {
        return Err(Error::InvalidArgument("NaN sample".into()));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max(((i + 1) as f64 / n - f).abs());
        d = d.max((i as f64 / n - f).abs());
    }
    let coef = (-(alpha / 2.0).ln() / 2.0).sqrt();
    let threshold = coef / n.sqrt();
    Ok(KsOutcome { statistic: d, threshold, pass: d < threshold, n: xs.len() })
}

#[derive(Clone, Debug)]
pub struct EnergyOutcome {
    pub statistic: f64,
    pub p_value: f64,
    pub permutations: usize,
}

/// Two-sample energy test with a permutation p-value. Vectors must share a
/// dimension; the p-value is `(1 + #{perm >= observed}) / (1 + n_perm)`.
pub fn energy_two_sample(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    n_perm: usize,
    seed: u64,
) -> Result<EnergyOutcome> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InsufficientData("energy test needs >= 2 per group".into()));
    }
    let dim = a[0].len();
    if a.iter().chain(b.iter()).any(|v| v.len() != dim) {
        return Err(Error::InvalidArgument("dimension mismatch".into()));
    }
    let pool: Vec<&Vec<f64>> = a.iter().chain(b.iter()).collect();
    let n_tot = pool.len();
    let mut dist = vec![0.0f64; n_tot * n_tot];
    for i in 0..n_tot {
        for j in (i + 1)..n_tot {
            let d = euclid(pool[i], pool[j]);
            dist[i * n_tot + j] = d;
            dist[j * n_tot + i] = d;
        }
    }
    let na = a.len();
    let idx: Vec<usize> = (0..n_tot).collect();
    let observed = energy_stat(&dist, n_tot, &idx, na);
    let hits: usize = exec::map_replicas(n_perm, seed, |i, _| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i + 1)));
        let mut perm = (0..n_tot).collect::<Vec<usize>>();
        perm.shuffle(&mut rng);
        usize::from(energy_stat(&dist, n_tot, &perm, na) >= observed)
    })
    .into_iter()
    .sum();
    let p_value = (1 + hits) as f64 / (1 + n_perm) as f64;
    Ok(EnergyOutcome { statistic: observed, p_value, permutations: n_perm })
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Energy statistic with group A at positions `labels[..na]`, group B at the
/// rest.
fn energy_stat(dist: &[f64], n_tot: usize, labels: &[usize], na: usize) -> f64 {
    let nb = n_tot - na;
    let (mut s_ab, mut s_aa, mut s_bb) = (0.0, 0.0, 0.0);
    for i in 0..n_tot {
        for j in (i + 1)..n_tot {
            let d = dist[labels[i] * n_tot + labels[j]];
            match (i < na, j < na) {
                (true, true) => s_aa += d,
                (false, false) => s_bb += d,
                _ => s_ab += d,
            }
        }
    }
    2.0 * s_ab / (na * nb) as f64
        - 2.0 * s_aa / (na * na) as f64
        - 2.0 * s_bb / (nb * nb) as f64
}

/// Samples `m` mass-measure points and returns the upper triangle of their
/// distance matrix in canonical row order.
pub fn gp_sample_vector<R: Rng + ?Sized>(
    tree: &MeasuredTree,
    m: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if m < 2 {
        return Err(Error::InvalidArgument("gp vector needs m >= 2".into()));
    }
    let pts: Vec<_> = (0..m)
        .map(|_| tree.sample_point(rng, None))
        .collect::<Result<_>>()?;
    Ok(tree.distance_matrix(&pts)?.upper_triangle())
}

/// Pearson's chi-square statistic and p-value for observed counts against
/// expected cell probabilities.
pub fn chi2_test(observed: &[usize], probs: &[f64]) -> Result<(f64, f64)> {
    if observed.len() != probs.len() || observed.len() < 2 {
        return Err(Error::InvalidArgument("chi2 cells mismatch".into()));
    }
    let n: f64 = observed.iter().sum::<usize>() as f64;
    let mut stat = 0.0;
    for (&o, &p) in observed.iter().zip(probs) {
        let e = n * p;
        if e <= 0.0 {
            return Err(Error::InvalidArgument("zero expected cell".into()));
        }
        stat += (o as f64 - e) * (o as f64 - e) / e;
    }
    let dof = (observed.len() - 1) as f64;
    let p = 1.0 - chi2_cdf(stat, dof);
    Ok((stat, p))
}

/// Regularized lower incomplete gamma P(s, x) by series / continued fraction.
fn gamma_p(s: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let ln_gamma_s = ln_gamma(s);
    if x < s + 1.0 {
        // series
        let mut term = 1.0 / s;
        let mut sum = term;
        let mut k = s;
        for _ in 0..500 {
            k += 1.0;
            term *= x / k;
            sum += term;
            if term.abs() < sum.abs() * 1e-15 {
                break;
            }
        }
        (sum.ln() + s * x.ln() - x - ln_gamma_s).exp()
    } else {
        // continued fraction for Q(s, x)
        let mut b = x + 1.0 - s;
        let mut c = 1.0 / 1e-300;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - s);
            b += 2.0;
            d = an * d + b;
            if d.abs() < 1e-300 {
                d = 1e-300;
            }
            c = b + an / c;
            if c.abs() < 1e-300 {
                c = 1e-300;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-15 {
                break;
            }
        }
        let q = (s * x.ln() - x - ln_gamma_s).exp() * h;
        1.0 - q
    }
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation
    const G: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        pi.ln() - (pi * x).sin().ln() - ln_gamma(1.0 - x)
    } else {
        let x = x - 1.0;
        let mut a = G[0];
        let t = x + 7.5;
        for (i, &g) in G.iter().enumerate().skip(1) {
            a += g / (x + i as f64);
        }
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
    }
}

pub fn chi2_cdf(x: f64, dof: f64) -> f64 {
    gamma_p(dof / 2.0, x / 2.0)
}

/// Ordinary least squares slope of y on x.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (xi, yi) in x.iter().zip(y) {
        num += (xi - mx) * (yi - my);
        den += (xi - mx) * (xi - mx);
    }
    num / den
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (xi, yi) in x.iter().zip(y) {
        sxy += (xi - mx) * (yi - my);
        sxx += (xi - mx) * (xi - mx);
        syy += (yi - my) * (yi - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Report of the spine decomposition checks on one ensemble of trees.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpineReport {
    pub replicas: usize,
    /// Max absolute error of the spine mass partition identity.
    pub partition_err: f64,
    /// KS outcome of rescaled within-subtree distances against Rayleigh.
    pub rescaled_ks_statistic: f64,
    pub rescaled_ks_threshold: f64,
    pub rescaled_ks_pass: bool,
    /// Log-log slope of the subtree mass density over the calibrated window.
    pub mass_density_slope: f64,
    /// Pearson correlation between spine height and subtree count.
    pub height_count_corr: f64,
}

/// Minimum atoms a spine subtree needs before its rescaled distances enter
/// the Rayleigh check; keeps the mass-estimate noise below the KS threshold.
pub const SPINE_MIN_ATOMS: usize = 128;

/// Mass window (relative to the whole tree) for the density slope fit, and
/// the number of logarithmic bins. Calibrated on pilot runs at 2048 leaves.
pub const SPINE_WINDOW: (f64, f64) = (8e-3, 0.2);
pub const SPINE_BINS: usize = 10;

/// Data gathered from one tree's spine decomposition.
pub struct SpineSample {
    pub spine_height: f64,
    pub subtree_count: usize,
    pub masses: Vec<f64>,
    pub partition_err: f64,
    pub rescaled_distances: Vec<f64>,
}

/// Conditions on the path to a mass-measure point and decomposes the tree
/// along it: subtree masses, their count, and rescaled within-subtree
/// distances for subtrees with at least [`SPINE_MIN_ATOMS`] atoms.
pub fn spine_sample<R: Rng + ?Sized>(tree: &MeasuredTree, rng: &mut R) -> Result<SpineSample> {
    let total = tree.total_mass();
    let z0 = tree.sample_point(rng, None)?;
    let z0_node = tree.point_as_node(z0).ok_or(Error::ZeroMass)?;
    let spine: Vec<_> = tree.ancestor_path(z0_node);
    let on_spine: std::collections::HashSet<_> = spine.iter().copied().collect();
    let spine_height = tree.depth(z0_node);
    let mut masses = Vec::new();
    let mut rescaled = Vec::new();
    for &s in &spine {
        for &c in tree.children(s) {
            if on_spine.contains(&c) {
                continue;
            }
            let atoms: Vec<_> = tree
                .subtree_nodes(c)
                .into_iter()
                .filter(|&n| tree.atom_mass(n) > 0.0)
                .collect();
            let m: f64 = atoms.iter().map(|&n| tree.atom_mass(n)).sum();
            if m <= 0.0 {
                continue;
            }
            masses.push(m / total);
            if atoms.len() >= SPINE_MIN_ATOMS {
                let a = tree.sample_among(rng, &atoms)?;
                let b = tree.sample_among(rng, &atoms)?;
                if a != b {
                    rescaled.push(tree.distance_nodes(a, b) / (m / total).sqrt());
                }
            }
        }
    }
    let sum: f64 = masses.iter().sum();
    let z0_mass = tree.atom_mass(z0_node)
        + spine.iter().filter(|&&s| s != z0_node).map(|&s| tree.atom_mass(s)).sum::<f64>();
    let partition_err = (sum * total + z0_mass - total).abs();
    Ok(SpineSample {
        spine_height,
        subtree_count: masses.len(),
        masses,
        partition_err,
        rescaled_distances: rescaled,
    })
}

/// Fits the log-log slope of the empirical mass density over the calibrated
/// window. Bin densities are counts divided by bin width.
pub fn mass_density_slope(masses: &[f64], window: (f64, f64), bins: usize) -> Result<f64> {
    let (lo, hi) = window;
    let edges: Vec<f64> = (0..=bins)
        .map(|i| lo * (hi / lo).powf(i as f64 / bins as f64))
        .collect();
    let mut counts = vec![0usize; bins];
    for &m in masses {
        if m >= lo && m < hi {
            let pos = ((m / lo).ln() / (hi / lo).ln() * bins as f64).floor() as usize;
            counts[pos.min(bins - 1)] += 1;
        }
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..bins {
        if counts[i] == 0 {
            continue;
        }
        let width = edges[i + 1] - edges[i];
        let center = (edges[i] * edges[i + 1]).sqrt();
        xs.push(center.ln());
        ys.push((counts[i] as f64 / width).ln());
    }
    if xs.len() < 3 {
        return Err(Error::InsufficientData("too few occupied density bins".into()));
    }
    Ok(ols_slope(&xs, &ys))
}

/// Runs the full spine suite over `replicas` fresh trees of `leaves` leaves.
pub fn spine_checks(leaves: usize, replicas: usize, seed: u64) -> Result<SpineReport> {
    if leaves < 128 {
        return Err(Error::InvalidArgument("spine checks need >= 128 leaves".into()));
    }
    let samples: Vec<SpineSample> = exec::map_replicas(replicas, seed, |i, rng| {
        let tree = sampler::line_breaking_tree(leaves, rng).expect("sampler");
        let _ = i;
        spine_sample(&tree, rng).expect("spine sample")
    });
    let partition_err = samples.iter().map(|s| s.partition_err).fold(0.0, f64::max);
    let mut rescaled = Vec::new();
    let mut masses = Vec::new();
    let mut heights = Vec::new();
    let mut counts = Vec::new();
    for s in &samples {
        rescaled.extend_from_slice(&s.rescaled_distances);
        masses.extend_from_slice(&s.masses);
        heights.push(s.spine_height);
        counts.push(s.subtree_count as f64);
    }
    let ks = ks_test(&rescaled, sampler::rayleigh_cdf, 0.01)?;
    let slope = mass_density_slope(&masses, SPINE_WINDOW, SPINE_BINS)?;
    let corr = pearson(&heights, &counts);
    Ok(SpineReport {
        replicas,
        partition_err,
        rescaled_ks_statistic: ks.statistic,
        rescaled_ks_threshold: ks.threshold,
        rescaled_ks_pass: ks.pass,
        mass_density_slope: slope,
        height_count_corr: corr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ks_accepts_own_law_rejects_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<f64> = (0..10_000).map(|_| sampler::rayleigh(&mut rng)).collect();
        let out = ks_test(&xs, sampler::rayleigh_cdf, 0.01).unwrap();
        assert!(out.pass, "D = {}", out.statistic);
        assert!(out.threshold < 0.0165 && out.threshold > 0.016);

        let cs = vec![1.0; 100];
        let out = ks_test(&cs, sampler::rayleigh_cdf, 0.01).unwrap();
        assert!(out.statistic >= 0.5);
        assert!(!out.pass);

        assert!(ks_test(&[f64::NAN; 40], sampler::rayleigh_cdf, 0.01).is_err());
        assert!(ks_test(&[1.0; 5], sampler::rayleigh_cdf, 0.01).is_err());
    }

    #[test]
    fn energy_zero_on_identical_groups() {
        let a: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64, 1.0]).collect();
        let out = energy_two_sample(&a, &a, 99, 5).unwrap();
        assert!(out.statistic.abs() < 1e-12);
        assert!(out.p_value > 0.5);
    }

    #[test]
    fn energy_detects_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<Vec<f64>> = (0..150)
            .map(|_| (0..4).map(|_| gauss(&mut rng)).collect())
            .collect();
        let b: Vec<Vec<f64>> = (0..150)
            .map(|_| (0..4).map(|_| gauss(&mut rng) + 1.0).collect())
            .collect();
        let out = energy_two_sample(&a, &b, 999, 5).unwrap();
        assert!(out.p_value <= 0.001, "p = {}", out.p_value);

        let short = vec![vec![0.0; 3]; 150];
        assert!(energy_two_sample(&a, &short, 9, 5).is_err());
    }

    #[test]
    fn energy_null_calibration() {
        // fraction of p < 0.05 under H0 should be near 0.05
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut low = 0usize;
        let reps = 200;
        for r in 0..reps {
            let a: Vec<Vec<f64>> = (0..60).map(|_| vec![gauss(&mut rng), gauss(&mut rng)]).collect();
            let b: Vec<Vec<f64>> = (0..60).map(|_| vec![gauss(&mut rng), gauss(&mut rng)]).collect();
            let out = energy_two_sample(&a, &b, 199, 1000 + r).unwrap();
            if out.p_value < 0.05 {
                low += 1;
            }
        }
        let frac = low as f64 / reps as f64;
        assert!((frac - 0.05).abs() <= 0.03, "frac = {frac}");
    }

    fn gauss<R: rand::Rng>(rng: &mut R) -> f64 {
        let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    #[test]
    fn gp_vector_triangle_and_rayleigh_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pair = Vec::with_capacity(2000);
        for _ in 0..2000 {
            let t = sampler::line_breaking_tree(64, &mut rng).unwrap();
            let v = gp_sample_vector(&t, 2, &mut rng).unwrap();
            pair.push(v[0]);
            let tri = gp_sample_vector(&t, 3, &mut rng).unwrap();
            assert!(tri[0] + tri[1] >= tri[2] - 1e-9);
            assert!(tri[0] + tri[2] >= tri[1] - 1e-9);
            assert!(tri[1] + tri[2] >= tri[0] - 1e-9);
        }
        // pair distance may be 0 when the same atom is drawn twice; drop those
        let pos: Vec<f64> = pair.into_iter().filter(|&d| d > 0.0).collect();
        let ks = ks_test(&pos, sampler::rayleigh_cdf, 0.01).unwrap();
        // atom duplication thins the sample; the law itself is exact
        assert!(ks.pass, "D = {} thr {}", ks.statistic, ks.threshold);
        assert!(gp_sample_vector(&sampler::line_breaking_tree(4, &mut rng).unwrap(), 1, &mut rng).is_err());
    }

    #[test]
    fn chi2_cdf_known_values() {
        // chi2(1): P(X <= 3.841) ~ 0.95; chi2(4): P(X <= 9.488) ~ 0.95
        assert!((chi2_cdf(3.841, 1.0) - 0.95).abs() < 2e-3);
        assert!((chi2_cdf(9.488, 4.0) - 0.95).abs() < 2e-3);
        let (stat, p) = chi2_test(&[250, 250, 250, 250], &[0.25; 4]).unwrap();
        assert!(stat.abs() < 1e-12);
        assert!(p > 0.99);
    }

    #[test]
    fn ols_slope_exact_line() {
        let x = vec![0.0, 1.0, 2.0, 3.0];
        let y = vec![1.0, 3.0, 5.0, 7.0];
        assert!((ols_slope(&x, &y) - 2.0).abs() < 1e-12);
    }
}
