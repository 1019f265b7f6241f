//! Brute-force reference implementations used for spot checks. They share
//! no code with the core crate.

use std::collections::BTreeSet;

/// Mean over rows of `Σ_c p log(p / q)`, with both sides floored at 1e-12
/// and zero-probability terms of `p` dropped.
pub fn kl_mean(p: &[Vec<f64>], q: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for r in 0..p.len() {
        let mut row = 0.0;
        for c in 0..p[r].len() {
            let a = p[r][c];
            if a <= 0.0 {
                continue;
            }
            let a = a.max(1e-12);
            let b = q[r][c].max(1e-12);
            row += a * (a.ln() - b.ln());
        }
        total += row;
    }
    total / p.len() as f64
}

pub fn pfpv(honest: &BTreeSet<usize>, flagged: &BTreeSet<usize>) -> f64 {
    let mut hits = 0usize;
    for h in honest {
        if flagged.iter().any(|f| f == h) {
            hits += 1;
        }
    }
    hits as f64 / honest.len() as f64
}

/// Round-trip bytes per client: up and down, logits on the public set plus
/// the optional `classes × d` final-layer gradient.
pub fn comm_bytes(n_public: u64, classes: u64, bytes_per_value: u64, grad_d: Option<u64>) -> u64 {
    let mut values = 0u64;
    for _ in 0..n_public {
        values += classes;
    }
    if let Some(d) = grad_d {
        values += classes * d;
    }
    let one_way = values * bytes_per_value;
    one_way + one_way
}
