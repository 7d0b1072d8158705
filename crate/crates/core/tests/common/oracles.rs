//! Reference implementations written independently of the library code.

use std::collections::HashSet;

use rand::Rng;

use mmdialog_core::seedset::{Characteristic, QualityLabel, SeedExample};

/// Full-matrix Wagner-Fischer over chars, divided by the longer length.
pub fn normalized_levenshtein(a: &str, b: &str) -> f64 {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let (n, m) = (a.len(), b.len());
    if n.max(m) == 0 {
        return 0.0;
    }
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let cost = if a[i - 1] == b[j - 1] { 0 } else { 1 };
            d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + cost);
        }
    }
    d[n][m] as f64 / n.max(m) as f64
}

fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let chars: Vec<char> = raw.chars().collect();
        let mut lo = 0;
        let mut hi = chars.len();
        while lo < hi && !chars[lo].is_alphanumeric() {
            lo += 1;
        }
        while hi > lo && !chars[hi - 1].is_alphanumeric() {
            hi -= 1;
        }
        if lo < hi {
            out.push(chars[lo..hi].iter().collect::<String>().to_lowercase());
        }
    }
    out
}

/// Distinct-n for n = 2, 3, 4 by brute force: every n-gram joined into one
/// string key, counted per text and pooled.
pub fn distinct_n_sum(texts: &[String]) -> f64 {
    let tokenized: Vec<Vec<String>> = texts.iter().map(|t| words(t)).collect();
    let mut score = 0.0;
    for n in 2..=4 {
        let mut seen: HashSet<String> = HashSet::new();
        let mut total = 0u64;
        for toks in &tokenized {
            if toks.len() < n {
                continue;
            }
            for start in 0..=toks.len() - n {
                total += 1;
                seen.insert(toks[start..start + n].join("\u{1f}"));
            }
        }
        if total > 0 {
            score += seen.len() as f64 / total as f64;
        }
    }
    score
}

/// Standard normal via Box-Muller.
pub fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn triple_ok(seed_set: &[SeedExample], t: [usize; 3]) -> bool {
    if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
        return false;
    }
    let excellent = t.iter().filter(|&&i| seed_set[i].quality == QualityLabel::Excellent).count();
    let mut covered = [false; 4];
    for &i in &t {
        for c in &seed_set[i].characteristics {
            let slot = match c {
                Characteristic::ImageCreation => 0,
                Characteristic::ImageComparison => 1,
                Characteristic::IntrinsicImageUnderstanding => 2,
                Characteristic::ExtrinsicImageUnderstanding => 3,
            };
            covered[slot] = true;
        }
    }
    excellent >= 1 && covered.iter().all(|&c| c)
}

/// Every sorted index triple that satisfies both constraints.
pub fn feasible_triples(seed_set: &[SeedExample]) -> Vec<[usize; 3]> {
    let n = seed_set.len();
    let mut out = Vec::new();
    for mask in 0u32..(1 << n) {
        if mask.count_ones() != 3 {
            continue;
        }
        let idx: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let t = [idx[0], idx[1], idx[2]];
        if triple_ok(seed_set, t) {
            out.push(t);
        }
    }
    out.sort();
    out
}
