#![allow(dead_code)]

//! Naive loop implementations of the losses and logits, written
//! independently of the library code.

use ndarray::{Array2, Array3};
use rand::Rng;

use maskground::losses::GroundingBatch;

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

pub fn oracle_similarity(z: &Array2<f64>, w: &Array2<f64>, tau: f64) -> f64 {
    let (n, k) = (z.nrows(), w.nrows());
    let mut total = 0.0;
    for j in 0..k {
        let wj = w.row(j).to_vec();
        let mut cos = vec![0.0; n];
        for i in 0..n {
            cos[i] = cosine(&z.row(i).to_vec(), &wj);
        }
        let mut denom = 0.0;
        for i in 0..n {
            denom += (cos[i] / tau).exp();
        }
        for i in 0..n {
            total += (cos[i] / tau).exp() / denom * cos[i];
        }
    }
    total / k as f64
}

pub fn oracle_grounding(batch: &GroundingBatch) -> f64 {
    let b = batch.len();
    let tau = batch.tau;
    let mut g = vec![vec![0.0; b]; b]; // g[c][i]: caption c against image i
    for c in 0..b {
        for i in 0..b {
            g[c][i] = oracle_similarity(&batch.regions[i], &batch.words[c], tau);
        }
    }
    let mut loss = 0.0;
    for e in 0..b {
        let mut over_images = 0.0;
        let mut over_captions = 0.0;
        for o in 0..b {
            over_images += (g[e][o] / tau).exp();
            over_captions += (g[o][e] / tau).exp();
        }
        loss += (g[e][e] / tau).exp().ln() - over_images.ln();
        loss += (g[e][e] / tau).exp().ln() - over_captions.ln();
    }
    -loss / b as f64
}

pub fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

pub fn random_batch(rng: &mut impl Rng, b: usize) -> GroundingBatch {
    let n = rng.random_range(1..=6);
    let d = rng.random_range(2..=8);
    GroundingBatch {
        regions: (0..b).map(|_| random_matrix(rng, n, d)).collect(),
        words: (0..b)
            .map(|_| {
                let k = rng.random_range(1..=4);
                random_matrix(rng, k, d)
            })
            .collect(),
        tau: rng.random_range(0.05..2.0),
    }
}

/// `y[k, i, j] = sum_n rl[k, n] s[n, i, j]` by explicit loops.
pub fn oracle_pixel_logits(rl: &Array2<f64>, s: &Array3<f64>) -> Array3<f64> {
    let (n, h, w) = s.dim();
    let k = rl.nrows();
    let mut y = Array3::zeros((k, h, w));
    for kk in 0..k {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for nn in 0..n {
                    acc += rl[(kk, nn)] * s[(nn, i, j)];
                }
                y[(kk, i, j)] = acc;
            }
        }
    }
    y
}
