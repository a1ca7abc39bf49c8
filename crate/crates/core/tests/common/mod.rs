//! Plain-loop reference implementations used as test oracles.
//!
//! Everything here works on `f64` slices with explicit index loops and reads
//! parameters element by element, so it shares no arithmetic with the crate.

#![allow(dead_code)]

use jrl_core::attention::AttentionParams;
use jrl_core::cell::LstmCell;
use jrl_core::model::{JrlModel, RegionEncoder};
use jrl_core::{Matrix, SeededRng, Vector};

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn mat_row_dot(m: &Matrix<f64>, row: usize, col_offset: usize, x: &[f64]) -> f64 {
    let mut s = 0.0;
    for (c, xc) in x.iter().enumerate() {
        s += m.get(row, col_offset + c) * xc;
    }
    s
}

/// One LSTM step with gate order forget, input, output, modulation.
pub fn lstm_step(cell: &LstmCell<f64>, h: &[f64], c: &[f64], inputs: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let d = h.len();
    let mut h_next = vec![0.0; d];
    let mut c_next = vec![0.0; d];
    for j in 0..d {
        let mut pre = [0.0f64; 4];
        for (g, gate) in cell.gates.iter().enumerate() {
            let mut s = gate.bias[j] + mat_row_dot(&gate.hidden, j, 0, h);
            for (w, u) in gate.inputs.iter().zip(inputs) {
                s += mat_row_dot(w, j, 0, u);
            }
            pre[g] = s;
        }
        let f = sigmoid(pre[0]);
        let i = sigmoid(pre[1]);
        let o = sigmoid(pre[2]);
        let g = pre[3].tanh();
        c_next[j] = f * c[j] + i * g;
        h_next[j] = o * c_next[j].tanh();
    }
    (h_next, c_next)
}

/// Additive attention: returns `(z_t, weights)`.
pub fn attend(p: &AttentionParams<f64>, h_dec: &[f64], states: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = h_dec.len();
    let width = p.v_a.len();
    let mut scores = Vec::with_capacity(states.len());
    for h in states {
        let mut s = 0.0;
        for a in 0..width {
            let u = p.b_a[a] + mat_row_dot(&p.w_a, a, 0, h_dec) + mat_row_dot(&p.w_a, a, d, h);
            s += p.v_a[a] * u.tanh();
        }
        scores.push(s);
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let mut z = vec![0.0; d];
    for (w, h) in weights.iter().zip(states) {
        for k in 0..d {
            z[k] += w * h[k];
        }
    }
    (z, weights)
}

/// Encoder states `h_1..h_m` and the context `z`.
pub fn encode(model: &JrlModel<f64>, regions: &[Vector<f64>]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let d = model.config.hidden_size;
    match &model.params.encoder {
        RegionEncoder::Lstm(cell) => {
            let (mut h, mut c) = (vec![0.0; d], vec![0.0; d]);
            let mut states = Vec::new();
            for x in regions {
                let (h2, c2) = lstm_step(cell, &h, &c, &[x]);
                h = h2;
                c = c2;
                states.push(h.clone());
            }
            (states, h)
        }
        RegionEncoder::Projection { w, b } => {
            let mut states = Vec::new();
            let mut z = vec![0.0; d];
            for x in regions {
                let h: Vec<f64> = (0..d).map(|j| b[j] + mat_row_dot(w, j, 0, x)).collect();
                for j in 0..d {
                    z[j] += h[j] / regions.len() as f64;
                }
                states.push(h);
            }
            (states, z)
        }
    }
}

/// Teacher-forced logits and mean cross-entropy for `tokens` (stop included), no dropout.
pub fn decode_loss(
    model: &JrlModel<f64>,
    states: &[Vec<f64>],
    z: &[f64],
    z_star: &[f64],
    tokens: &[usize],
) -> (Vec<Vec<f64>>, f64) {
    let cfg = &model.config;
    let p = &model.params;
    let mut h = z_star.to_vec();
    let mut c = vec![0.0; cfg.hidden_size];
    let mut prev: Option<usize> = None;
    let mut all_logits = Vec::new();
    let mut total = 0.0;
    for &tok in tokens {
        let ctx = if cfg.attention { attend(&p.attention, &h, states).0 } else { z.to_vec() };
        let y: Vec<f64> = match prev {
            Some(t) => p.embedding.row(t).to_vec(),
            None => vec![0.0; cfg.embed_dim],
        };
        let (h2, c2) = lstm_step(&p.decoder, &h, &c, &[&ctx, &y]);
        h = h2;
        c = c2;
        let logits: Vec<f64> = (0..cfg.num_classes())
            .map(|k| p.head_b[k] + mat_row_dot(&p.head_w, k, 0, &h))
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[tok];
        all_logits.push(logits);
        prev = Some(tok);
    }
    (all_logits, total / tokens.len() as f64)
}

/// Per-image precision/recall/F1 means by direct counting.
pub fn instance_counts(preds: &[Vec<u8>], gts: &[Vec<u8>]) -> (f64, f64, f64) {
    let (mut prc, mut rcl) = (0.0, 0.0);
    for (p, g) in preds.iter().zip(gts) {
        let mut inter = 0usize;
        let mut np = 0usize;
        let mut ng = 0usize;
        for k in 0..p.len() {
            if p[k] == 1 {
                np += 1;
            }
            if g[k] == 1 {
                ng += 1;
            }
            if p[k] == 1 && g[k] == 1 {
                inter += 1;
            }
        }
        prc += if np == 0 { 1.0 } else { inter as f64 / np as f64 };
        rcl += if ng == 0 { 1.0 } else { inter as f64 / ng as f64 };
    }
    let n = preds.len() as f64;
    let (prc, rcl) = (prc / n, rcl / n);
    let f1 = if prc + rcl > 0.0 { 2.0 * prc * rcl / (prc + rcl) } else { 0.0 };
    (prc, rcl, f1)
}

/// Mean balanced accuracy over attributes whose ground truth has both classes.
pub fn balanced_accuracy(preds: &[Vec<u8>], gts: &[Vec<u8>]) -> Option<f64> {
    let n_attr = gts[0].len();
    let mut sum = 0.0;
    let mut used = 0;
    for a in 0..n_attr {
        let (mut tp, mut fn_, mut tn, mut fp) = (0.0, 0.0, 0.0, 0.0);
        for (p, g) in preds.iter().zip(gts) {
            match (g[a], p[a]) {
                (1, 1) => tp += 1.0,
                (1, _) => fn_ += 1.0,
                (_, 0) => tn += 1.0,
                _ => fp += 1.0,
            }
        }
        if tp + fn_ > 0.0 && tn + fp > 0.0 {
            sum += 0.5 * (tp / (tp + fn_) + tn / (tn + fp));
            used += 1;
        }
    }
    (used > 0).then(|| sum / used as f64)
}

pub fn random_cell(rng: &mut SeededRng, cell: LstmCell<f64>) -> LstmCell<f64> {
    let mut cell = cell.init_random(rng);
    for gate in cell.gates.iter_mut() {
        for b in gate.bias.iter_mut() {
            *b = rng.uniform(-1.0, 1.0);
        }
    }
    cell
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
