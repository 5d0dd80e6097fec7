//! Independent oracles shared by the integration tests. Nothing here calls
//! into the simulator or the training code.
#![allow(dead_code, clippy::too_many_arguments)]

use std::collections::HashMap;

use commsim::testbed::{Loss, Minibatch};
use commsim::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Node {
    F(usize, usize),
    B(usize, usize),
    Up(usize, usize),
    Down(usize, usize),
    Dp(usize),
    Emb,
}

/// Earliest-start schedule by repeated relaxation over an explicit DAG:
/// compute lanes in 1F1B order, FIFO channels, data dependencies, then DP
/// all-reduces and the embedding sync (after both end stages' DP).
pub fn oracle_makespan(p: usize, m: usize, f: f64, b: f64, up: f64, down: f64, dp: f64, emb: f64) -> f64 {
    let mut dur: HashMap<Node, f64> = HashMap::new();
    let mut preds: HashMap<Node, Vec<Node>> = HashMap::new();
    let edge = |n: Node, on: Node, preds: &mut HashMap<Node, Vec<Node>>| {
        preds.entry(n).or_default().push(on);
    };

    for s in 0..p {
        // lane order
        let mut seq = Vec::new();
        let (mut nf, mut nb) = (0, 0);
        while nf < m && nf < p - s {
            seq.push(Node::F(s, nf));
            nf += 1;
        }
        while nb < m {
            seq.push(Node::B(s, nb));
            nb += 1;
            if nf < m {
                seq.push(Node::F(s, nf));
                nf += 1;
            }
        }
        for w in seq.windows(2) {
            edge(w[1], w[0], &mut preds);
        }
        for i in 0..m {
            dur.insert(Node::F(s, i), f);
            dur.insert(Node::B(s, i), b);
            if s + 1 < p {
                dur.insert(Node::Up(s, i), up);
                edge(Node::Up(s, i), Node::F(s, i), &mut preds);
                edge(Node::F(s + 1, i), Node::Up(s, i), &mut preds);
                if i > 0 {
                    edge(Node::Up(s, i), Node::Up(s, i - 1), &mut preds);
                }
                edge(Node::B(s, i), Node::Down(s + 1, i), &mut preds);
            } else {
                edge(Node::B(s, i), Node::F(s, i), &mut preds);
            }
            if s > 0 {
                dur.insert(Node::Down(s, i), down);
                edge(Node::Down(s, i), Node::B(s, i), &mut preds);
                if i > 0 {
                    edge(Node::Down(s, i), Node::Down(s, i - 1), &mut preds);
                }
            }
        }
        dur.insert(Node::Dp(s), dp);
        edge(Node::Dp(s), Node::B(s, m - 1), &mut preds);
    }
    dur.insert(Node::Emb, emb);
    edge(Node::Emb, Node::Dp(0), &mut preds);
    edge(Node::Emb, Node::Dp(p - 1), &mut preds);

    let mut start: HashMap<Node, f64> = dur.keys().map(|&n| (n, 0.0)).collect();
    loop {
        let mut changed = false;
        for (&n, ps) in &preds {
            let s = ps.iter().map(|q| start[q] + dur[q]).fold(0.0_f64, f64::max);
            if s > start[&n] {
                start.insert(n, s);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    dur.iter().map(|(n, d)| start[n] + d).fold(0.0, f64::max)
}

/// Loss of the whole mini-batch, written with plain loops and no shared code.
pub fn naive_loss(weights: &[Matrix], batch: &Minibatch, normalize: bool, tanh: bool, loss: Loss) -> f64 {
    let total_rows = batch.total_rows() as f64;
    let mut sum = 0.0;
    for mb in &batch.microbatches {
        let (rows, din) = mb.input.shape();
        let mut x: Vec<Vec<f64>> = (0..rows).map(|r| mb.input.row(r).to_vec()).collect();
        if normalize {
            for c in 0..din {
                let mean: f64 = x.iter().map(|row| row[c]).sum::<f64>() / rows as f64;
                let var: f64 = x.iter().map(|row| (row[c] - mean).powi(2)).sum::<f64>() / rows as f64;
                for row in x.iter_mut() {
                    row[c] = (row[c] - mean) / var.sqrt();
                }
            }
        }
        for (r, row) in x.into_iter().enumerate() {
            let mut h = row;
            for (k, w) in weights.iter().enumerate() {
                let mut next = vec![0.0; w.rows()];
                for (i, out) in next.iter_mut().enumerate() {
                    for (j, v) in h.iter().enumerate() {
                        *out += w.get(i, j) * v;
                    }
                    if tanh && k + 1 < weights.len() {
                        *out = out.tanh();
                    }
                }
                h = next;
            }
            let t = mb.target.row(r);
            sum += match loss {
                Loss::Mse => 0.5 * h.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>(),
                Loss::CrossEntropy => {
                    let max = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + h.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    h.iter().zip(t).map(|(z, y)| y * (lse - z)).sum::<f64>()
                }
            };
        }
    }
    sum / total_rows
}
