use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Resident experts per layer for an offloaded MoE model.
///
/// After each step a layer keeps the experts it just activated when they
/// fit, otherwise a uniformly random `capacity`-subset of them.
#[derive(Debug, Clone)]
pub struct ExpertCacheState {
    resident: Vec<Vec<usize>>,
    capacity: usize,
    rng: ChaCha8Rng,
}

/// Experts kept per layer: `k` for a single lane, 2 for batched decoding.
pub fn cache_capacity(top_k: usize, batch: usize) -> usize {
    if batch <= 1 {
        top_k
    } else {
        2
    }
}

impl ExpertCacheState {
    /// Empty caches for `n_layers` layers.
    pub fn new(n_layers: usize, capacity: usize, seed: u64) -> Self {
        Self {
            resident: vec![Vec::new(); n_layers],
            capacity,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn n_layers(&self) -> usize {
        self.resident.len()
    }

    /// Sorted resident experts of `layer`.
    pub fn resident(&self, layer: usize) -> &[usize] {
        &self.resident[layer]
    }

    /// Applies one step's activations (one expert list per token row) to
    /// `layer` and returns the experts that had to be loaded, ascending.
    pub fn update(&mut self, layer: usize, activated: &[Vec<usize>]) -> Vec<usize> {
        let mut union: Vec<usize> = activated.iter().flatten().copied().collect();
        union.sort_unstable();
        union.dedup();
        let resident = &mut self.resident[layer];
        let loads: Vec<usize> = union
            .iter()
            .copied()
            .filter(|j| resident.binary_search(j).is_err())
            .collect();
        *resident = if union.len() <= self.capacity {
            union
        } else {
            let mut keep: Vec<usize> = sample(&mut self.rng, union.len(), self.capacity)
                .into_iter()
                .map(|i| union[i])
                .collect();
            keep.sort_unstable();
            keep
        };
        loads
    }
}

/// Uniform random `k`-subset of `0..n`, ascending.
pub fn random_experts(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    let mut s = sample(rng, n, k).into_vec();
    s.sort_unstable();
    s
}

fn binomial(n: usize, r: usize) -> f64 {
    if r > n {
        return 0.0;
    }
    let r = r.min(n - r);
    (0..r).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Distribution of the number of distinct experts activated by `batch`
/// lanes that each pick a uniform `k`-subset of `n`.
fn union_size_distribution(n: usize, k: usize, batch: usize) -> Vec<f64> {
    let mut p = vec![0.0; n + 1];
    p[0] = 1.0;
    let total = binomial(n, k);
    for _ in 0..batch {
        let mut next = vec![0.0; n + 1];
        for (u, &pu) in p.iter().enumerate() {
            if pu == 0.0 {
                continue;
            }
            for fresh in 0..=k.min(n - u) {
                let ways = binomial(u, k - fresh) * binomial(n - u, fresh);
                next[u + fresh] += pu * ways / total;
            }
        }
        p = next;
    }
    p
}

/// Steady-state expected loads per layer and step under uniform routing.
///
/// Each resident expert was drawn from an earlier step, independently of the
/// current one, so it is hit with probability `1 − (1 − k/n)^batch`. For a
/// single lane with capacity `k` this is `k − k²/n`.
pub fn expected_loads(n: usize, k: usize, batch: usize, capacity: usize) -> f64 {
    if n == 0 || k == 0 || batch == 0 {
        return 0.0;
    }
    let dist = union_size_distribution(n, k, batch);
    let mean_union: f64 = dist.iter().enumerate().map(|(u, p)| u as f64 * p).sum();
    let mean_resident: f64 = dist.iter().enumerate().map(|(u, p)| u.min(capacity) as f64 * p).sum();
    let hit = 1.0 - (1.0 - k as f64 / n as f64).powi(batch as i32);
    mean_union - mean_resident * hit
}

/// Mean and standard error of per-layer loads over `trials` simulated
/// decode steps with uniform routing, after one warm-up step.
pub fn simulate_loads(n: usize, k: usize, batch: usize, capacity: usize, trials: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cache = ExpertCacheState::new(1, capacity, rng.random());
    let step = |rng: &mut ChaCha8Rng| -> Vec<Vec<usize>> { (0..batch).map(|_| random_experts(rng, n, k)).collect() };
    let warm = step(&mut rng);
    cache.update(0, &warm);
    let (mut sum, mut sum_sq) = (0u64, 0u64);
    for _ in 0..trials {
        let act = step(&mut rng);
        let loads = cache.update(0, &act).len() as u64;
        sum += loads;
        sum_sq += loads * loads;
    }
    let t = trials.max(1) as f64;
    let mean = sum as f64 / t;
    let var = (sum_sq as f64 / t - mean * mean).max(0.0);
    (mean, (var / t).sqrt())
}
