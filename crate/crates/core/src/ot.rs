//! Optimal-transport target assignment.
//!
//! Given classifier probability vectors for a batch and a multiset of
//! target classes, [`ot_assign`] finds the labelling with minimal total
//! Euclidean distance between each probability vector and its assigned
//! one-hot class. [`expected_ot_targets`] averages that assignment over
//! i.i.d. draws of the target multiset from a target distribution.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;

/// Largest number of distinct class-count vectors enumerated exactly.
pub const ENUMERATION_BUDGET: usize = 200_000;
pub const DEFAULT_MC_DRAWS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetDistribution {
    pub probs: Vec<f64>,
}

impl TargetDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::Argument(
                "target probabilities must be non-negative".into(),
            ));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Argument(format!(
                "target probabilities sum to {s}, not 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            probs: vec![1.0 / k as f64; k],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OtMethod {
    ExactEnumeration,
    MonteCarlo { draws: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OtTargetBatch {
    pub q: Vec<Vec<f64>>,
    pub y: Vec<usize>,
    pub c: Vec<f64>,
    pub method: OtMethod,
}

/// Minimum-cost perfect matching on a square cost matrix (shortest
/// augmenting paths with potentials). Returns the column of each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; column 0 is the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
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
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; n];
    for j in 1..=n {
        col_of[row_of[j] - 1] = j - 1;
    }
    col_of
}

fn one_hot_distance(p: &[f64], k: usize) -> f64 {
    p.iter()
        .enumerate()
        .map(|(j, v)| {
            let d = if j == k { v - 1.0 } else { *v };
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Assigns one class per sample so that class `k` is used exactly
/// `counts[k]` times and `sum_i |p_i - e_label(i)|_2` is minimal.
///
/// Ties are broken toward giving lower-indexed samples lower-indexed
/// classes: any pair `i < j` with `label(i) > label(j)` is swapped when the
/// swap does not increase the cost.
pub fn ot_assign(probs: &[Vec<f64>], counts: &[usize]) -> Result<Vec<usize>> {
    let n = probs.len();
    let k = counts.len();
    if counts.iter().sum::<usize>() != n {
        return Err(Error::Argument(format!(
            "class counts sum to {}, batch has {n} samples",
            counts.iter().sum::<usize>()
        )));
    }
    if let Some(p) = probs.iter().find(|p| p.len() != k) {
        return Err(Error::Argument(format!(
            "probability vector of length {} for {k} classes",
            p.len()
        )));
    }
    let dist: Vec<Vec<f64>> = probs
        .iter()
        .map(|p| (0..k).map(|c| one_hot_distance(p, c)).collect())
        .collect();
    let labels_of_col: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &m)| std::iter::repeat_n(c, m))
        .collect();
    let cost: Vec<Vec<f64>> = dist
        .iter()
        .map(|row| labels_of_col.iter().map(|&c| row[c]).collect())
        .collect();
    let cols = hungarian(&cost);
    let mut labels: Vec<usize> = cols.into_iter().map(|j| labels_of_col[j]).collect();
    let tol = 1e-12;
    loop {
        let mut swapped = false;
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (labels[i], labels[j]);
                if a > b && dist[i][b] + dist[j][a] <= dist[i][a] + dist[j][b] + tol {
                    labels.swap(i, j);
                    swapped = true;
                }
            }
        }
        if !swapped {
            break;
        }
    }
    Ok(labels)
}

pub fn assignment_cost(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    probs
        .iter()
        .zip(labels)
        .map(|(p, &c)| one_hot_distance(p, c))
        .sum()
}

fn for_each_composition(n: usize, k: usize, f: &mut dyn FnMut(&[usize])) {
    fn rec(remaining: usize, slot: usize, cur: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
        if slot + 1 == cur.len() {
            cur[slot] = remaining;
            f(cur);
            return;
        }
        for m in 0..=remaining {
            cur[slot] = m;
            rec(remaining - m, slot + 1, cur, f);
        }
    }
    let mut cur = vec![0; k];
    rec(n, 0, &mut cur, f);
}

/// `C(n + k - 1, k - 1)`, saturating.
pub fn num_compositions(n: usize, k: usize) -> usize {
    let mut acc: u128 = 1;
    for i in 1..k as u128 {
        acc = acc * (n as u128 + i) / i;
        if acc > usize::MAX as u128 {
            return usize::MAX;
        }
    }
    acc as usize
}

fn finish(q: Vec<Vec<f64>>, method: OtMethod) -> OtTargetBatch {
    let mut y = Vec::with_capacity(q.len());
    let mut c = Vec::with_capacity(q.len());
    for qi in &q {
        let mut best = 0;
        for (j, v) in qi.iter().enumerate() {
            if *v > qi[best] {
                best = j;
            }
        }
        y.push(best);
        c.push(qi[best]);
    }
    OtTargetBatch { q, y, c, method }
}

/// Expected optimal-transport targets for a batch.
///
/// The optimal assignment depends on the drawn targets only through their
/// class counts, so exact evaluation sums over count vectors weighted by
/// the multinomial probability; Monte Carlo draws the counts and caches
/// the assignment per distinct count vector.
pub fn expected_ot_targets(
    probs: &[Vec<f64>],
    target: &TargetDistribution,
    method: OtMethod,
) -> Result<OtTargetBatch> {
    let n = probs.len();
    let k = target.num_classes();
    if n == 0 {
        return Err(Error::Argument(
            "expected OT targets need a non-empty batch".into(),
        ));
    }
    let mut q = vec![vec![0.0; k]; n];
    match method {
        OtMethod::ExactEnumeration => {
            let count = num_compositions(n, k);
            if count > ENUMERATION_BUDGET {
                return Err(Error::Resource(format!(
                    "exact enumeration needs {count} count vectors (> {ENUMERATION_BUDGET}); use monte_carlo"
                )));
            }
            let log_fact: Vec<f64> = std::iter::once(0.0)
                .chain((1..=n).scan(0.0, |acc, i| {
                    *acc += (i as f64).ln();
                    Some(*acc)
                }))
                .collect();
            let mut err = None;
            for_each_composition(n, k, &mut |counts| {
                if err.is_some() {
                    return;
                }
                let mut logw = log_fact[n];
                for (c, &m) in counts.iter().enumerate() {
                    if m > 0 {
                        if target.probs[c] == 0.0 {
                            return;
                        }
                        logw += m as f64 * target.probs[c].ln() - log_fact[m];
                    }
                }
                let w = logw.exp();
                match ot_assign(probs, counts) {
                    Ok(labels) => labels.iter().enumerate().for_each(|(i, &l)| q[i][l] += w),
                    Err(e) => err = Some(e),
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
        }
        OtMethod::MonteCarlo { draws, seed } => {
            if draws == 0 {
                return Err(Error::Argument(
                    "monte carlo needs at least one draw".into(),
                ));
            }
            let mut rng = stream(seed, &[0x07]);
            let cdf: Vec<f64> = target
                .probs
                .iter()
                .scan(0.0, |a, p| {
                    *a += p;
                    Some(*a)
                })
                .collect();
            let mut cache: HashMap<Vec<usize>, Vec<usize>> = HashMap::new();
            let mut hits: HashMap<Vec<usize>, usize> = HashMap::new();
            for _ in 0..draws {
                let mut counts = vec![0usize; k];
                for _ in 0..n {
                    let u: f64 = rng.random();
                    let c = cdf.iter().position(|&x| u < x).unwrap_or_else(|| {
                        target.probs.iter().rposition(|p| *p > 0.0).unwrap_or(k - 1)
                    });
                    counts[c] += 1;
                }
                *hits.entry(counts).or_insert(0) += 1;
            }
            // deterministic accumulation order
            let mut keys: Vec<&Vec<usize>> = hits.keys().collect();
            keys.sort();
            for counts in keys {
                let labels = match cache.get(counts) {
                    Some(l) => l.clone(),
                    None => {
                        let l = ot_assign(probs, counts)?;
                        cache.insert(counts.clone(), l.clone());
                        l
                    }
                };
                let w = hits[counts] as f64 / draws as f64;
                labels.iter().enumerate().for_each(|(i, &l)| q[i][l] += w);
            }
        }
    }
    average_tied_samples(probs, &mut q);
    Ok(finish(q, method))
}

/// Samples with identical probability vectors are exchangeable under i.i.d.
/// target draws, so they share the average of their expected targets.
fn average_tied_samples(probs: &[Vec<f64>], q: &mut [Vec<f64>]) {
    let n = probs.len();
    let mut done = vec![false; n];
    for i in 0..n {
        if done[i] {
            continue;
        }
        let group: Vec<usize> = (i..n)
            .filter(|&j| !done[j] && probs[j] == probs[i])
            .collect();
        group.iter().for_each(|&j| done[j] = true);
        if group.len() < 2 {
            continue;
        }
        let k = q[i].len();
        let mean: Vec<f64> = (0..k)
            .map(|c| group.iter().map(|&j| q[j][c]).sum::<f64>() / group.len() as f64)
            .collect();
        for &j in &group {
            q[j].clone_from(&mean);
        }
    }
}
