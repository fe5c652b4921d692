//! Independent reference implementations used as test oracles. None of these
//! call into the library's math.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use sifter_core::training::{ParamMap, Tensor};

/// `1 / log2(k + 1)` via natural logs.
pub fn discount(k: usize) -> f64 {
    std::f64::consts::LN_2 / ((k + 1) as f64).ln()
}

/// Marginal-utility definition: each tier's lift over the previous tier,
/// discounted at the tier's outer cutoff.
pub fn reward_by_definition(s0: f64, scores: &[f64], cutoffs: &[usize]) -> f64 {
    let mut prev = s0;
    let mut total = 0.0;
    for (&s, &k) in scores.iter().zip(cutoffs) {
        total += discount(k) * (s - prev);
        prev = s;
    }
    total
}

/// Strictly increasing cutoffs starting at 1, length 1..=max_len, values ≤ max_k.
pub fn random_schedule(rng: &mut impl Rng, max_len: usize, max_k: usize) -> Vec<usize> {
    let len = rng.random_range(1..=max_len.min(max_k));
    let mut pool: Vec<usize> = (2..=max_k).collect();
    pool.shuffle(rng);
    let mut cutoffs: Vec<usize> = pool.into_iter().take(len - 1).collect();
    cutoffs.push(1);
    cutoffs.sort_unstable();
    cutoffs
}

fn dcg(ranked: &[u64], gold: &BTreeSet<u64>, k: usize) -> f64 {
    let mut seen = BTreeSet::new();
    ranked
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, id)| {
            let rel = if gold.contains(id) && seen.insert(*id) { 1.0 } else { 0.0 };
            rel / ((i + 2) as f64).log2()
        })
        .sum()
}

/// Every ordering of `items`.
pub fn permutations(items: &[u64]) -> Vec<Vec<u64>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

/// Every ordered selection of 1..=|items| distinct items.
pub fn partial_permutations(items: &[u64]) -> Vec<Vec<u64>> {
    let mut out = Vec::new();
    for perm in permutations(items) {
        for len in 1..=perm.len() {
            out.push(perm[..len].to_vec());
        }
    }
    out.sort();
    out.dedup();
    out
}

/// Ideal DCG found by searching every full ordering of the candidate universe.
pub fn ideal_dcg_by_search(universe: &[u64], gold: &BTreeSet<u64>, k: usize) -> f64 {
    permutations(universe).iter().map(|p| dcg(p, gold, k)).fold(0.0, f64::max)
}

pub fn ndcg_by_definition(ranked: &[u64], gold: &BTreeSet<u64>, k: usize, ideal: f64) -> f64 {
    if ideal == 0.0 {
        0.0
    } else {
        dcg(ranked, gold, k) / ideal
    }
}

/// Full distance sort, then prefix.
pub fn curriculum_by_sorting(perf: &BTreeMap<String, f64>, tau: f64, budget: usize) -> Vec<String> {
    let mut all: Vec<(f64, String)> = perf.iter().map(|(k, &p)| ((p - tau).abs(), k.clone())).collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(budget).map(|(_, k)| k).collect()
}

pub fn population_mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn random_param_map(rng: &mut impl Rng, shapes: &[(String, Vec<usize>)]) -> ParamMap<f32> {
    let mut m = ParamMap::default();
    for (name, shape) in shapes {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-10.0f32..10.0)).collect();
        m.insert(name.clone(), Tensor::new(shape.clone(), values).unwrap());
    }
    m
}

pub fn random_shapes(rng: &mut impl Rng) -> Vec<(String, Vec<usize>)> {
    (0..rng.random_range(1..4))
        .map(|i| {
            let dims = rng.random_range(1..3);
            (format!("layer{i}.w"), (0..dims).map(|_| rng.random_range(1..5)).collect())
        })
        .collect()
}

/// Elementwise mean accumulated in f64.
pub fn mean_by_definition(maps: &[ParamMap<f32>]) -> BTreeMap<String, Vec<f64>> {
    let mut out = BTreeMap::new();
    for name in maps[0].entries.keys() {
        let len = maps[0].entries[name].values.len();
        let v = (0..len)
            .map(|i| maps.iter().map(|m| f64::from(m.entries[name].values[i])).sum::<f64>() / maps.len() as f64)
            .collect();
        out.insert(name.clone(), v);
    }
    out
}

const FUZZ_PIECES: &[&str] = &[
    "<think>", "</think>", "<ranking>", "</ranking>", "<ranking", "ranking>", ",", ",,", " ", "\n", "\t", "-1",
    "0", "1", "2", "3", "7", "12", "99", "007", "18446744073709551616", "1.5", "abc", "session 3", "<session 2>",
    "[", "]", "é", "３", "NaN", "+4", " 5 ", "\u{200b}",
];

/// Random proxy-like output assembled from protocol fragments and noise.
pub fn fuzz_output(rng: &mut impl Rng) -> String {
    let mut s = String::new();
    if rng.random_bool(0.5) {
        s.push_str("<think>reasoning</think>");
    }
    if rng.random_bool(0.7) {
        s.push_str("<ranking>");
        for i in 0..rng.random_range(0..14) {
            if i > 0 {
                s.push(',');
            }
            if rng.random_bool(0.7) {
                s.push_str(&rng.random_range(0..16u64).to_string());
            } else {
                s.push_str(FUZZ_PIECES[rng.random_range(0..FUZZ_PIECES.len())]);
            }
        }
        if rng.random_bool(0.9) {
            s.push_str("</ranking>");
        }
    }
    for _ in 0..rng.random_range(0..6) {
        s.push_str(FUZZ_PIECES[rng.random_range(0..FUZZ_PIECES.len())]);
    }
    s
}
