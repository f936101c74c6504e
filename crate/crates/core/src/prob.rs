//! Softmax and argmax helpers shared by the strategies and the trace.
//!
//! The mask token is a column of every logit row but never a commit
//! candidate: it takes part in normalization and is skipped by argmax,
//! sampling and ranking. Ties break toward the lower token id.

use crate::model::TokenId;

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = out.iter().sum();
    for p in &mut out {
        *p /= z;
    }
    out
}

pub fn softmax_f32(logits: &[f32]) -> Vec<f64> {
    let widened: Vec<f64> = logits.iter().map(|&x| f64::from(x)).collect();
    softmax(&widened)
}

/// Highest-probability token other than `excluded`, with its probability.
pub fn top_candidate(probs: &[f64], excluded: TokenId) -> (TokenId, f64) {
    let mut best: Option<(TokenId, f64)> = None;
    for (v, &p) in probs.iter().enumerate() {
        let v = v as TokenId;
        if v == excluded {
            continue;
        }
        match best {
            Some((_, bp)) if p <= bp => {}
            _ => best = Some((v, p)),
        }
    }
    best.expect("distribution has at least one non-mask token")
}

/// 1-based rank of `token` under the same ordering `top_candidate` uses.
pub fn rank_of(probs: &[f64], token: TokenId, excluded: TokenId) -> u32 {
    let pt = probs[token as usize];
    let ahead = probs
        .iter()
        .enumerate()
        .filter(|&(v, &p)| {
            let v = v as TokenId;
            v != excluded && v != token && (p > pt || (p == pt && v < token))
        })
        .count();
    ahead as u32 + 1
}
