#![allow(dead_code)]

use std::collections::BTreeMap;

use creditdec_core::denoise::{ConvergenceProfile, ScriptedTable};
use creditdec_core::model::{BlockLayout, TokenId, Vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random scripted run: table total for every call the layout's budget
/// allows, over all generation positions.
pub struct RandomScript {
    pub table: ScriptedTable,
    pub layout: BlockLayout,
}

pub fn random_script(seed: u64) -> RandomScript {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = rng.gen_range(4..=10usize);
    let vocab = Vocab::new(size, size as TokenId - 1, size as TokenId - 2).unwrap();
    let gen_length = rng.gen_range(2..=12usize);
    let block_length = rng.gen_range(1..=gen_length);
    let total_steps = gen_length * rng.gen_range(1..=2usize);
    let layout = BlockLayout::new(gen_length, block_length, total_steps).unwrap();
    let calls: usize = (0..layout.num_blocks())
        .map(|b| layout.budget_for_block(b))
        .sum();
    let table_calls = (0..calls)
        .map(|_| {
            (0..gen_length)
                .map(|p| {
                    let mut row: Vec<f32> =
                        (0..size).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
                    // occasional confident spike so thresholds get crossed
                    if rng.gen_bool(0.5) {
                        let hot = rng.gen_range(0..size - 1);
                        row[hot] += rng.gen_range(2.0f32..7.0);
                    }
                    (p, row)
                })
                .collect::<BTreeMap<_, _>>()
        })
        .collect();
    RandomScript {
        table: ScriptedTable::new(vocab, table_calls),
        layout,
    }
}

/// Strategy under simulation.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SimStrategy {
    Threshold,
    CreditTop1,
}

pub struct SimParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
}

pub const PAPER_PARAMS: SimParams = SimParams {
    alpha: 0.65,
    beta: 0.7,
    gamma: 0.5,
    tau: 0.9,
};

pub struct SimResult {
    pub forwards: usize,
    pub tokens: Vec<TokenId>,
}

fn sim_softmax(row: &[f32]) -> Vec<f64> {
    let xs: Vec<f64> = row.iter().map(|&x| x as f64).collect();
    let m = xs.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn sim_argmax(p: &[f64], mask: usize) -> usize {
    let mut best = usize::MAX;
    for v in 0..p.len() {
        if v != mask && (best == usize::MAX || p[v] > p[best]) {
            best = v;
        }
    }
    best
}

/// Step-by-step reference of block-wise threshold decoding with optional
/// top-1 trace credit, written directly from the update/fusion/softmax
/// formulas. `logits(offset, block_step, call)` gives the raw row of a
/// generation offset at a block-local step and global forward index.
pub fn simulate(
    strategy: SimStrategy,
    params: &SimParams,
    vocab_size: usize,
    mask: usize,
    layout: &BlockLayout,
    logits: impl Fn(usize, usize, usize) -> Vec<f32>,
) -> SimResult {
    let n = layout.gen_length();
    let mut tokens: Vec<Option<TokenId>> = vec![None; n];
    let mut forwards = 0;
    for b in 0..layout.num_blocks() {
        let offsets: Vec<usize> = layout.offsets(b).collect();
        let mut budget = layout.budget_for_block(b);
        let mut credit: BTreeMap<usize, Vec<f64>> = offsets
            .iter()
            .map(|&i| (i, vec![0.0; vocab_size]))
            .collect();
        let mut step = 0;
        while offsets.iter().any(|&i| tokens[i].is_none()) {
            forwards += 1;
            budget -= 1;
            let mut conf = BTreeMap::new();
            let mut cand = BTreeMap::new();
            for &i in offsets.iter().filter(|&&i| tokens[i].is_none()) {
                let row = logits(i, step, forwards - 1);
                let mut p = sim_softmax(&row);
                if strategy == SimStrategy::CreditTop1 {
                    let c = credit.get_mut(&i).unwrap();
                    let top = sim_argmax(&p, mask);
                    for x in c.iter_mut() {
                        *x *= params.beta;
                    }
                    c[top] += p[top].powf(params.gamma);
                    let f: Vec<f64> = row
                        .iter()
                        .zip(c.iter())
                        .map(|(&x, &cv)| x as f64 + params.alpha * (1.0 + cv).ln())
                        .collect();
                    let m = f.iter().cloned().fold(f64::MIN, f64::max);
                    let e: Vec<f64> = f.iter().map(|x| (x - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    p = e.into_iter().map(|x| x / z).collect();
                }
                let top = sim_argmax(&p, mask);
                conf.insert(i, p[top]);
                cand.insert(i, top as TokenId);
            }
            let mut chosen: Vec<usize> = conf
                .iter()
                .filter(|(_, &c)| c >= params.tau)
                .map(|(&i, _)| i)
                .collect();
            if chosen.is_empty() {
                let mut best = None;
                for (&i, &c) in &conf {
                    if best.is_none_or(|(_, bc)| c > bc) {
                        best = Some((i, c));
                    }
                }
                chosen.push(best.unwrap().0);
            }
            if budget == 0 {
                chosen = conf.keys().copied().collect();
            }
            for i in chosen {
                tokens[i] = Some(cand[&i]);
            }
            step += 1;
        }
    }
    SimResult {
        forwards,
        tokens: tokens.into_iter().map(Option::unwrap).collect(),
    }
}

/// Random noise-free convergence profile with a budget generous enough
/// that no block runs out of steps before every target is confident.
pub fn random_profile(seed: u64) -> (ConvergenceProfile, BlockLayout) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = rng.gen_range(5..=16usize);
    let vocab = Vocab::new(size, size as TokenId - 1, size as TokenId - 2).unwrap();
    let gen_length = rng.gen_range(4..=32usize);
    let block_length = *[4usize, 8, 16, 32]
        .iter()
        .find(|&&b| b >= gen_length.min(rng.gen_range(4..=32)))
        .unwrap();
    let max_stab = rng.gen_range(1..=8usize);
    let target = (0..gen_length)
        .map(|_| rng.gen_range(0..size as TokenId - 2))
        .collect();
    let stabilize_step = (0..gen_length)
        .map(|_| rng.gen_range(0..max_stab))
        .collect();
    let profile = ConvergenceProfile {
        vocab,
        prompt: vec![],
        target,
        decoy: None,
        stabilize_step,
        pre_gap: rng.gen_range(0.5f32..3.0),
        post_margin_growth: rng.gen_range(0.1f32..1.0),
        noise_scale: 0.0,
    };
    let layout = BlockLayout::new(gen_length, block_length, gen_length * 64).unwrap();
    (profile, layout)
}
