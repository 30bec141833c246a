#![allow(dead_code)]

use cbpfa::model::{sample_generative, GenerativeOverrides, GenerativeSample};
use cbpfa::Hyperparameters;

/// Minimum-cost assignment of every row to a distinct column (rows ≤ cols),
/// by the O(n²m) potentials method. Returns the column for each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "need rows <= cols");
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Best assignment by exhaustive search, for checking [`hungarian`].
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
        if row == cost.len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                best = best.min(cost[row][j] + go(cost, row + 1, used));
                used[j] = false;
            }
        }
        best
    }
    let mut used = vec![false; cost[0].len()];
    go(cost, 0, &mut used)
}

fn abs_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).abs()
    }
}

/// Mean |cosine| between every true column and its assigned learned column
/// under the assignment maximising the total.
pub fn matched_abs_cosine(truth: &[f64], learned: &[f64], dim: usize) -> f64 {
    let t: Vec<&[f64]> = truth.chunks_exact(dim).collect();
    let l: Vec<&[f64]> = learned.chunks_exact(dim).collect();
    let cost: Vec<Vec<f64>> = t.iter().map(|a| l.iter().map(|b| -abs_cos(a, b)).collect()).collect();
    let assign = hungarian(&cost);
    assign.iter().enumerate().map(|(i, &j)| -cost[i][j]).sum::<f64>() / t.len() as f64
}

/// Synthetic data at roughly 20 dB SNR: usage 0.3, unit weight precision.
pub fn snr20_data(k_true: usize, p: usize, n: usize, seed: u64) -> GenerativeSample {
    let h = Hyperparameters::default().with_k(k_true);
    let signal_per_element = k_true as f64 * 0.3 / (2 * p) as f64;
    let gamma = 100.0 / signal_per_element;
    let ov = GenerativeOverrides {
        gamma: Some(gamma),
        alpha: Some(1.0),
        pi: Some(vec![0.3; k_true]),
    };
    sample_generative(&h, p, n, seed, &ov).expect("generative sample")
}

/// Batch means standard error of the mean with `batches` equal batches.
pub fn batch_means_se(x: &[f64], batches: usize) -> f64 {
    let b = x.len() / batches;
    let means: Vec<f64> = (0..batches)
        .map(|j| x[j * b..(j + 1) * b].iter().sum::<f64>() / b as f64)
        .collect();
    let m = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (var / batches as f64).sqrt()
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Random valid variational state with data, for formula checks.
pub fn random_instance(
    n: usize,
    k: usize,
    p: usize,
    seed: u64,
) -> (cbpfa::GlobalVariationalState, cbpfa::LocalState, cbpfa::PatchMatrix) {
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let dim = 2 * p;
    let normal = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
    let g = cbpfa::GlobalVariationalState {
        p,
        k,
        tau1: (0..k).map(|_| rng.random_range(0.5..3.0)).collect(),
        tau2: (0..k).map(|_| rng.random_range(0.5..3.0)).collect(),
        phi: (0..dim * k).map(|_| 0.5 * normal(&mut rng)).collect(),
        phi_var: (0..k).map(|_| rng.random_range(0.01..0.2)).collect(),
        lambda1: rng.random_range(2.0..5.0),
        lambda2: rng.random_range(1.0..3.0),
        eps1: rng.random_range(2.0..5.0),
        eps2: rng.random_range(1.0..3.0),
    };
    let l = cbpfa::LocalState {
        n,
        k,
        nu: (0..n * k).map(|_| rng.random_range(0.05..0.95)).collect(),
        theta: (0..n * k).map(|_| normal(&mut rng)).collect(),
        theta_var: (0..n * k).map(|_| rng.random_range(0.05..0.5)).collect(),
    };
    let x = cbpfa::PatchMatrix::from_columns(dim, (0..n * dim).map(|_| normal(&mut rng)).collect()).unwrap();
    (g, l, x)
}
