use crtlab_core::{exec, sampler, shuffle, stats};

fn qk_marginal(k: usize, leaves: usize, reps: usize, seed: u64) -> (f64, f64) {
    let qa: Vec<Vec<f64>> = exec::map_replicas(reps, seed, |_, rng| {
        let h = sampler::line_breaking_tree(leaves, rng).unwrap();
        let us = {
            let atoms = h.atoms();
            let mut out: Vec<usize> = vec![];
            while out.len() < k {
                let a = h.sample_among(rng, &atoms).unwrap();
                if !out.contains(&a) { out.push(a); }
            }
            out
        };
        let q = shuffle::k_shuffle(&h, &us, None, rng).unwrap();
        stats::gp_sample_vector(&q, 6, rng).unwrap()
    });
    let ha: Vec<Vec<f64>> = exec::map_replicas(reps, seed + 1, |_, rng| {
        let h = sampler::line_breaking_tree(leaves, rng).unwrap();
        stats::gp_sample_vector(&h, 6, rng).unwrap()
    });
    let e = stats::energy_two_sample(&qa, &ha, 499, 7).unwrap();
    let mean = |v: &Vec<Vec<f64>>| -> f64 {
        v.iter().flat_map(|x| x.iter()).sum::<f64>() / (v.len() * v[0].len()) as f64
    };
    (e.p_value, mean(&qa) - mean(&ha))
}

#[test]
#[ignore]
fn diag_qk_by_k() {
    for k in [1usize, 2, 3, 5] {
        let (p, dmean) = qk_marginal(k, 256, 400, 100 + k as u64);
        println!("k={k}: p = {p:.4}, mean shift = {dmean:+.4}");
    }
}
