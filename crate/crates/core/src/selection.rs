//! Picking a mutually homogeneous reference subset out of noisy candidates.
//!
//! Items are vertices of a graph weighted by cosine similarity. A subset of
//! size `k` is grown greedily on the facility-location function and then
//! refined by single swaps that raise the average pairwise similarity inside
//! the subset (a dense-k-subgraph heuristic).

use serde::{Deserialize, Serialize};

use crate::embeddings::{pairwise_similarity, EmbeddingMatrix};
use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-9;
/// Guard for [`exhaustive_dense_subset`].
pub const MAX_EXHAUSTIVE_SUBSETS: u128 = 1_000_000;
/// Minimum improvement for a refinement swap to be taken.
const SWAP_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionProblem {
    n: usize,
    sim: Vec<f64>,
    k: usize,
}

impl SelectionProblem {
    /// `sim` is row-major `n x n`, symmetric with a unit diagonal.
    pub fn new(n: usize, sim: Vec<f64>, k: usize) -> Result<Self> {
        if sim.len() != n * n {
            return Err(Error::format(format!(
                "similarity matrix has {} entries, expected {n}x{n}",
                sim.len()
            )));
        }
        if k < 2 || k > n {
            return Err(Error::domain(format!("subset size k={k} must satisfy 2 <= k <= n={n}")));
        }
        for i in 0..n {
            if (sim[i * n + i] - 1.0).abs() > SYMMETRY_TOL {
                return Err(Error::domain(format!(
                    "diagonal entry {i} is {}, expected 1",
                    sim[i * n + i]
                )));
            }
            for j in 0..i {
                let (a, b) = (sim[i * n + j], sim[j * n + i]);
                if !a.is_finite() || (a - b).abs() > SYMMETRY_TOL {
                    return Err(Error::domain(format!(
                        "similarity matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(SelectionProblem { n, sim, k })
    }

    /// Similarity graph of the rows of `refs`.
    pub fn from_embeddings(refs: &EmbeddingMatrix, k: usize) -> Result<Self> {
        let sim = pairwise_similarity(refs, refs)?;
        let n = refs.len();
        let mut data = sim.as_slice().to_vec();
        // Exact symmetry and unit diagonal; the kernel can differ in the last ulp.
        for i in 0..n {
            data[i * n + i] = 1.0;
            for j in 0..i {
                data[j * n + i] = data[i * n + j];
            }
        }
        Self::new(n, data, k)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn sim(&self, i: usize, j: usize) -> f64 {
        self.sim[i * self.n + j]
    }

    fn check_subset(&self, subset: &[usize]) -> Result<()> {
        if subset.is_empty() {
            return Err(Error::domain("empty subset"));
        }
        if let Some(&i) = subset.iter().find(|&&i| i >= self.n) {
            return Err(Error::domain(format!("index {i} out of range for {} items", self.n)));
        }
        Ok(())
    }
}

/// `sum_i max_{s in subset} max(sim[i][s], 0)` over every item `i`.
///
/// Negative similarities count as 0 so the function stays monotone.
pub fn facility_location_value(subset: &[usize], problem: &SelectionProblem) -> Result<f64> {
    problem.check_subset(subset)?;
    Ok(fl_value(subset, problem))
}

fn fl_value(subset: &[usize], p: &SelectionProblem) -> f64 {
    (0..p.n)
        .map(|i| subset.iter().map(|&s| p.sim(i, s).max(0.0)).fold(0.0, f64::max))
        .sum()
}

/// Mean similarity over the unordered pairs of `subset` (raw values).
pub fn average_pairwise_similarity(subset: &[usize], problem: &SelectionProblem) -> Result<f64> {
    problem.check_subset(subset)?;
    if subset.len() < 2 {
        return Err(Error::domain("average pairwise similarity needs at least 2 items"));
    }
    Ok(avg_sim(subset, problem))
}

fn avg_sim(subset: &[usize], p: &SelectionProblem) -> f64 {
    let mut s = 0.0;
    for (a, &i) in subset.iter().enumerate() {
        for &j in &subset[a + 1..] {
            s += p.sim(i, j);
        }
    }
    let m = subset.len();
    s / (m * (m - 1) / 2) as f64
}

/// Greedy facility-location maximization to size `k`; ties go to the lower
/// index.
pub fn greedy_facility_location(problem: &SelectionProblem) -> Vec<usize> {
    let n = problem.n;
    let mut cover = vec![0.0f64; n];
    let mut chosen = vec![false; n];
    let mut subset = Vec::with_capacity(problem.k);
    for _ in 0..problem.k {
        let mut best = (f64::NEG_INFINITY, 0);
        for c in (0..n).filter(|&c| !chosen[c]) {
            let gain: f64 = (0..n).map(|i| (problem.sim(i, c).max(0.0) - cover[i]).max(0.0)).sum();
            if gain > best.0 {
                best = (gain, c);
            }
        }
        let c = best.1;
        chosen[c] = true;
        subset.push(c);
        for (i, cv) in cover.iter_mut().enumerate() {
            *cv = cv.max(problem.sim(i, c).max(0.0));
        }
    }
    subset
}

/// Upper bound on the best size-`k` facility-location value: by
/// submodularity, `OPT <= f(S) + sum of the k largest gains f(S + x) - f(S)`.
pub fn fl_upper_bound(subset: &[usize], p: &SelectionProblem) -> f64 {
    let cover: Vec<f64> = (0..p.n)
        .map(|i| subset.iter().map(|&s| p.sim(i, s).max(0.0)).fold(0.0, f64::max))
        .collect();
    let mut gains: Vec<f64> = (0..p.n)
        .filter(|c| !subset.contains(c))
        .map(|c| {
            (0..p.n)
                .map(|i| (p.sim(i, c).max(0.0) - cover[i]).max(0.0))
                .sum::<f64>()
        })
        .collect();
    gains.sort_by(|a, b| b.total_cmp(a));
    cover.iter().sum::<f64>() + gains.iter().take(p.k).sum::<f64>()
}

const SUBGRADIENT_ITERS: usize = 200;

/// Lagrangian bound on the best size-`k` facility-location value, relaxing
/// "item i is served by j only if j is chosen" with multipliers `mu[i][j]`:
///
/// `OPT <= sum_i max(0, max_j (w[i][j] - mu[i][j])) + (top k of sum_i mu[i][j])`
///
/// holds for every `mu >= 0`. Multipliers follow Polyak subgradient steps
/// toward `lower`, a known achievable value; the best bound seen is kept.
pub fn lagrangian_bound(p: &SelectionProblem, lower: f64) -> f64 {
    let n = p.n;
    let w: Vec<f64> = p.sim.iter().map(|v| v.max(0.0)).collect();
    let mut mu = vec![0.0f64; n * n];
    let mut best = f64::INFINITY;
    let mut col = vec![0.0f64; n];
    let mut serve = vec![usize::MAX; n];
    let mut order: Vec<usize> = (0..n).collect();
    let mut scale = 2.0;
    let mut stalled = 0;
    for _ in 0..SUBGRADIENT_ITERS {
        let mut value = 0.0;
        col.iter_mut().for_each(|c| *c = 0.0);
        for i in 0..n {
            let mut m = (0.0, usize::MAX);
            for j in 0..n {
                let r = w[i * n + j] - mu[i * n + j];
                if r > m.0 {
                    m = (r, j);
                }
                col[j] += mu[i * n + j];
            }
            value += m.0;
            serve[i] = m.1;
        }
        order.sort_by(|&a, &b| col[b].total_cmp(&col[a]).then(a.cmp(&b)));
        let chosen = &order[..p.k];
        value += chosen.iter().map(|&j| col[j]).sum::<f64>();
        if value < best - 1e-12 {
            best = value;
            stalled = 0;
        } else {
            stalled += 1;
            if stalled >= 10 {
                scale /= 2.0;
                stalled = 0;
            }
        }
        if best - lower <= 1e-12 * (1.0 + lower.abs()) {
            break;
        }
        // g[i][j] = y_j - x_ij.
        let mut in_y = vec![false; n];
        for &j in chosen {
            in_y[j] = true;
        }
        let mut norm2 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let g = f64::from(u8::from(in_y[j])) - f64::from(u8::from(serve[i] == j));
                norm2 += g * g;
            }
        }
        if norm2 == 0.0 {
            break;
        }
        let step = scale * (value - lower) / norm2;
        for i in 0..n {
            for j in 0..n {
                let g = f64::from(u8::from(in_y[j])) - f64::from(u8::from(serve[i] == j));
                let v = &mut mu[i * n + j];
                *v = (*v - step * g).max(0.0);
            }
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Selected indices, ascending.
    pub indices: Vec<usize>,
    pub average_similarity: f64,
    pub facility_location: f64,
}

/// Greedy facility-location start followed by best-improvement single swaps
/// on the average pairwise similarity.
///
/// Every returned subset keeps its facility-location value at or above
/// `min(f(G), (1 - 1/e) U)`, where `G` is the greedy subset and
/// `U = f(G) + (sum of the k largest single-item gains on G)` bounds the
/// optimum from above. Either term is at least `(1 - 1/e)` of the optimum,
/// so the greedy guarantee survives refinement.
///
/// Swap search from the greedy subset alone stalls in poor local optima, so
/// it is repeated from one dense seed per item (grown by similarity sum) and
/// the densest admissible result wins. Deterministic: every scan runs in
/// index order and only strict improvements replace an incumbent.
pub fn select_dense_subset(problem: &SelectionProblem) -> Result<Selection> {
    let greedy = greedy_facility_location(problem);
    let starts: Vec<Vec<usize>> = (0..problem.n).map(|s| grow_from(s, problem)).collect();
    let mut bound = f64::INFINITY;
    for set in std::iter::once(&greedy).chain(&starts) {
        for i in 0..=problem.k {
            bound = bound.min(fl_upper_bound(&set[..i], problem));
        }
    }
    let lower = fl_value(&greedy, problem);
    bound = bound.min(lagrangian_bound(problem, lower));
    let floor = lower.min((1.0 - (-1.0f64).exp()) * bound);

    let mut best = swap_refine(greedy, problem, floor);
    let mut best_sum = pair_sum(&best, problem);
    for start in starts {
        let cand = swap_refine(start, problem, f64::NEG_INFINITY);
        let v = pair_sum(&cand, problem);
        if v > best_sum + SWAP_EPS && fl_value(&cand, problem) >= floor {
            best = cand;
            best_sum = v;
        }
    }
    best.sort_unstable();
    Ok(Selection {
        average_similarity: avg_sim(&best, problem),
        facility_location: fl_value(&best, problem),
        indices: best,
    })
}

fn pair_sum(subset: &[usize], p: &SelectionProblem) -> f64 {
    let mut s = 0.0;
    for (a, &i) in subset.iter().enumerate() {
        for &j in &subset[a + 1..] {
            s += p.sim(i, j);
        }
    }
    s
}

/// `seed`, then repeatedly the item with the largest similarity sum to the
/// items chosen so far.
fn grow_from(seed: usize, p: &SelectionProblem) -> Vec<usize> {
    let mut subset = vec![seed];
    let mut acc: Vec<f64> = (0..p.n).map(|c| p.sim(c, seed)).collect();
    while subset.len() < p.k {
        let mut pick = (f64::NEG_INFINITY, 0);
        for c in (0..p.n).filter(|c| !subset.contains(c)) {
            if acc[c] > pick.0 {
                pick = (acc[c], c);
            }
        }
        subset.push(pick.1);
        for (c, a) in acc.iter_mut().enumerate() {
            *a += p.sim(c, pick.1);
        }
    }
    subset
}

/// Best-improvement single swaps on the pair sum (equivalently the average),
/// restricted to subsets whose facility-location value is at least `floor`.
fn swap_refine(mut subset: Vec<usize>, p: &SelectionProblem, floor: f64) -> Vec<usize> {
    let mut inside = vec![false; p.n];
    for &s in &subset {
        inside[s] = true;
    }
    // Each accepted swap strictly raises the pair sum, so this terminates;
    // the cap just bounds pathological plateaus.
    for _ in 0..p.n * p.k * 4 {
        // r[c] = sum of sim(c, s) over s in subset, self included.
        let r: Vec<f64> = (0..p.n).map(|c| subset.iter().map(|&s| p.sim(c, s)).sum()).collect();
        let mut best: Option<(f64, usize, usize)> = None;
        for pos in 0..subset.len() {
            let old = subset[pos];
            for cand in (0..p.n).filter(|&c| !inside[c]) {
                let delta = r[cand] - p.sim(cand, old) - (r[old] - 1.0);
                if delta <= SWAP_EPS || best.is_some_and(|(b, _, _)| delta <= b) {
                    continue;
                }
                subset[pos] = cand;
                let ok = fl_value(&subset, p) >= floor;
                subset[pos] = old;
                if ok {
                    best = Some((delta, pos, cand));
                }
            }
        }
        match best {
            Some((_, pos, cand)) => {
                inside[subset[pos]] = false;
                inside[cand] = true;
                subset[pos] = cand;
            }
            None => break,
        }
    }
    subset
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k) as u128;
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (n as u128 - i) / (i + 1);
    }
    c
}

/// Visits every `k`-subset of `0..n` in lexicographic order.
pub fn for_each_subset(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        let mut i = k;
        while i > 0 && idx[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return;
        }
        idx[i - 1] += 1;
        for j in i..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// The `k`-subset with the highest average pairwise similarity, by
/// enumeration; ties go to the lexicographically first subset.
pub fn exhaustive_dense_subset(problem: &SelectionProblem) -> Result<Selection> {
    let count = binomial(problem.n, problem.k);
    if count > MAX_EXHAUSTIVE_SUBSETS {
        return Err(Error::domain(format!(
            "C({}, {}) = {count} subsets exceeds the enumeration limit",
            problem.n, problem.k
        )));
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for_each_subset(problem.n, problem.k, |s| {
        let v = avg_sim(s, problem);
        if v > best.0 {
            best = (v, s.to_vec());
        }
    });
    Ok(Selection {
        average_similarity: best.0,
        facility_location: fl_value(&best.1, problem),
        indices: best.1,
    })
}
