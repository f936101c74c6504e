use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Denoiser, LogitsMatrix};
use crate::error::{Error, Result};
use crate::model::{BlockLayout, SequenceState, TokenId, Vocab};

/// Logit given to the mask column; keeps it out of the probability mass.
pub const MASK_LOGIT: f32 = -1.0e4;

/// Parametrized convergence behavior for a synthetic denoiser.
///
/// Steps are counted per block, from the first forward pass in which the
/// block is active. Before `stabilize_step[i]` the decoy token leads by
/// `pre_gap`; from then on the target leads with margin
/// `pre_gap + post_margin_growth * (k + 1)` at `k` steps past
/// stabilization. All other tokens sit at logit 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceProfile {
    pub vocab: Vocab,
    #[serde(default)]
    pub prompt: Vec<TokenId>,
    /// Target token per generation offset.
    pub target: Vec<TokenId>,
    /// Decoy per generation offset; derived from the target when absent.
    #[serde(default)]
    pub decoy: Option<Vec<TokenId>>,
    pub stabilize_step: Vec<usize>,
    pub pre_gap: f32,
    pub post_margin_growth: f32,
    #[serde(default)]
    pub noise_scale: f32,
}

impl ConvergenceProfile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("profile serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn gen_length(&self) -> usize {
        self.target.len()
    }

    /// Decoy used at generation offset `i`.
    pub fn decoy_at(&self, i: usize) -> TokenId {
        if let Some(d) = &self.decoy {
            return d[i];
        }
        let size = self.vocab.size() as TokenId;
        let t = self.target[i];
        (1..size)
            .map(|k| (t + k) % size)
            .find(|&c| c != self.vocab.mask_id() && c != self.vocab.eos_id())
            .or_else(|| {
                (1..size)
                    .map(|k| (t + k) % size)
                    .find(|&c| c != self.vocab.mask_id())
            })
            .expect("vocabulary has a token besides target and mask")
    }

    pub fn validate(&self, layout: &BlockLayout) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(format!("convergence profile: {msg}")));
        let n = self.target.len();
        if n != layout.gen_length() {
            return bad(format!(
                "{n} targets for a generation length of {}",
                layout.gen_length()
            ));
        }
        if self.stabilize_step.len() != n {
            return bad(format!(
                "{} stabilize steps for {n} targets",
                self.stabilize_step.len()
            ));
        }
        if let Some(d) = &self.decoy {
            if d.len() != n {
                return bad(format!("{} decoys for {n} targets", d.len()));
            }
        }
        for i in 0..n {
            let (t, d) = (self.target[i], self.decoy_at(i));
            for tok in [t, d] {
                if !self.vocab.contains(tok) || tok == self.vocab.mask_id() {
                    return bad(format!(
                        "offset {i}: token {tok} is the mask or out of range"
                    ));
                }
            }
            if t == d {
                return bad(format!("offset {i}: decoy equals target"));
            }
            let budget = layout.budget_for_block(layout.block_of(i));
            if self.stabilize_step[i] >= budget {
                return bad(format!(
                    "offset {i}: stabilize step {} not below block budget {budget}",
                    self.stabilize_step[i]
                ));
            }
        }
        let finite_nonneg = |x: f32| x.is_finite() && x >= 0.0;
        if !finite_nonneg(self.pre_gap) || !finite_nonneg(self.noise_scale) {
            return bad("pre_gap and noise_scale must be finite and non-negative".into());
        }
        if !(self.post_margin_growth.is_finite() && self.post_margin_growth > 0.0) {
            return bad("post_margin_growth must be positive".into());
        }
        Ok(())
    }

    /// Noise-free logits for offset `i` at block-local step `step`.
    pub fn clean_logits(&self, i: usize, step: usize) -> Vec<f32> {
        let mut row = vec![0.0f32; self.vocab.size()];
        row[self.vocab.mask_id() as usize] = MASK_LOGIT;
        let stab = self.stabilize_step[i];
        if step < stab {
            row[self.decoy_at(i) as usize] = self.pre_gap;
        } else {
            let lead = f64::from(self.pre_gap)
                + f64::from(self.post_margin_growth) * (step - stab + 1) as f64;
            row[self.target[i] as usize] = lead as f32;
        }
        row
    }
}

/// Denoiser that follows a [`ConvergenceProfile`] and ignores context.
#[derive(Debug, Clone)]
pub struct SyntheticDenoiser {
    profile: ConvergenceProfile,
    layout: BlockLayout,
    seed: u64,
    block_entry: Vec<Option<u64>>,
}

impl SyntheticDenoiser {
    pub fn new(profile: ConvergenceProfile, layout: BlockLayout, seed: u64) -> Result<Self> {
        profile.validate(&layout)?;
        Ok(Self {
            block_entry: vec![None; layout.num_blocks()],
            profile,
            layout,
            seed,
        })
    }

    pub fn profile(&self) -> &ConvergenceProfile {
        &self.profile
    }

    fn noise_rng(&self, call: u64, position: usize) -> ChaCha8Rng {
        let mixed = self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ call.wrapping_mul(0xBF58_476D_1CE4_E5B9)
            ^ (position as u64).wrapping_mul(0x94D0_49BB_1331_11EB);
        ChaCha8Rng::seed_from_u64(mixed)
    }
}

impl Denoiser for SyntheticDenoiser {
    fn denoise(&mut self, state: &SequenceState, call: u64) -> Result<LogitsMatrix> {
        let prompt_len = state.prompt_len();
        if let Some(first) = state.masked_positions().next() {
            let active = self.layout.block_of(first - prompt_len);
            self.block_entry[active].get_or_insert(call);
        }
        let noise = self.profile.noise_scale;
        Ok(state
            .masked_positions()
            .map(|p| {
                let i = p - prompt_len;
                let step = self.block_entry[self.layout.block_of(i)]
                    .map_or(0, |entry| (call - entry) as usize);
                let mut row = self.profile.clean_logits(i, step);
                if noise > 0.0 {
                    let mut rng = self.noise_rng(call, p);
                    for x in row.iter_mut() {
                        *x += noise * rng.gen_range(-1.0f32..=1.0);
                    }
                }
                (p, row)
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::{softmax_f32, top_candidate};

    fn profile(stab: Vec<usize>, pre_gap: f32, growth: f32, noise: f32) -> ConvergenceProfile {
        let n = stab.len();
        ConvergenceProfile {
            vocab: Vocab::new(8, 7, 6).unwrap(),
            prompt: vec![],
            target: (0..n as u32).map(|i| i % 6).collect(),
            decoy: None,
            stabilize_step: stab,
            pre_gap,
            post_margin_growth: growth,
            noise_scale: noise,
        }
    }

    fn target_conf(row: &[f32], target: TokenId) -> (TokenId, f64) {
        let p = softmax_f32(row);
        (top_candidate(&p, 7).0, p[target as usize])
    }

    #[test]
    fn degenerate_profile_decodes_immediately() {
        let prof = profile(vec![0, 0], 1.0, 20.0, 0.0);
        let layout = BlockLayout::new(2, 2, 10).unwrap();
        let mut d = SyntheticDenoiser::new(prof.clone(), layout, 0).unwrap();
        let state = SequenceState::new(&[], 2, prof.vocab).unwrap();
        let m = d.denoise(&state, 0).unwrap();
        for (p, row) in m.iter() {
            let (top, conf) = target_conf(row, prof.target[p]);
            assert_eq!(top, prof.target[p]);
            assert!(conf > 0.999);
        }
    }

    #[test]
    fn decoy_leads_until_stabilization() {
        let prof = profile(vec![3], 1.0, 0.2, 0.0);
        let layout = BlockLayout::new(1, 1, 10).unwrap();
        let mut d = SyntheticDenoiser::new(prof.clone(), layout, 0).unwrap();
        let state = SequenceState::new(&[], 1, prof.vocab).unwrap();
        for call in 0..6u64 {
            let m = d.denoise(&state, call).unwrap();
            let (top, _) = target_conf(m.get(0).unwrap(), prof.target[0]);
            if call < 3 {
                assert_eq!(top, prof.decoy_at(0), "call {call}");
            } else {
                assert_eq!(top, prof.target[0], "call {call}");
            }
        }
    }

    #[test]
    fn target_confidence_rises_after_stabilization() {
        let prof = profile(vec![2], 1.0, 0.2, 0.0);
        let layout = BlockLayout::new(1, 1, 12).unwrap();
        let mut d = SyntheticDenoiser::new(prof.clone(), layout, 0).unwrap();
        let state = SequenceState::new(&[], 1, prof.vocab).unwrap();
        let confs: Vec<f64> = (0..12u64)
            .map(|c| target_conf(d.denoise(&state, c).unwrap().get(0).unwrap(), 0).1)
            .collect();
        // 10 calls at and after stabilization, each strictly above the last
        for w in confs[2..].windows(2) {
            assert!(w[1] > w[0], "{confs:?}");
        }
        // first stabilized step: e^1.2 / (e^1.2 + 6) over the 6 zero-logit tokens
        let e = 1.2f64.exp();
        assert!((confs[2] - e / (e + 6.0)).abs() < 1e-6);
    }

    #[test]
    fn later_blocks_count_from_their_own_entry() {
        let prof = profile(vec![0, 0, 1, 1], 1.0, 0.5, 0.0);
        let layout = BlockLayout::new(4, 2, 8).unwrap();
        let mut d = SyntheticDenoiser::new(prof.clone(), layout, 0).unwrap();
        let mut state = SequenceState::new(&[], 4, prof.vocab).unwrap();
        for call in 0..5 {
            d.denoise(&state, call).unwrap();
        }
        state.commit(0, 0).unwrap();
        state.commit(1, 1).unwrap();
        // block 1 enters at call 5: local step 0 < stabilize step 1, decoy leads
        let m = d.denoise(&state, 5).unwrap();
        assert_eq!(target_conf(m.get(2).unwrap(), 2).0, prof.decoy_at(2));
        let m = d.denoise(&state, 6).unwrap();
        assert_eq!(target_conf(m.get(2).unwrap(), 2).0, 2);
    }

    #[test]
    fn noise_is_seeded() {
        let prof = profile(vec![0, 0], 1.0, 0.3, 0.5);
        let layout = BlockLayout::new(2, 2, 4).unwrap();
        let state = SequenceState::new(&[], 2, prof.vocab).unwrap();
        let mut a = SyntheticDenoiser::new(prof.clone(), layout, 7).unwrap();
        let mut b = SyntheticDenoiser::new(prof.clone(), layout, 7).unwrap();
        let mut c = SyntheticDenoiser::new(prof, layout, 8).unwrap();
        let ma = a.denoise(&state, 1).unwrap();
        assert_eq!(ma, b.denoise(&state, 1).unwrap());
        assert_eq!(ma, a.denoise(&state, 1).unwrap());
        assert_ne!(ma, c.denoise(&state, 1).unwrap());
    }

    #[test]
    fn validation() {
        let layout = BlockLayout::new(2, 2, 4).unwrap();
        assert!(profile(vec![0, 4], 1.0, 0.2, 0.0)
            .validate(&layout)
            .is_err());
        assert!(profile(vec![0], 1.0, 0.2, 0.0).validate(&layout).is_err());
        assert!(profile(vec![0, 1], 1.0, 0.0, 0.0)
            .validate(&layout)
            .is_err());
        let mut p = profile(vec![0, 1], 1.0, 0.2, 0.0);
        p.decoy = Some(vec![0, 2]);
        assert!(p.validate(&layout).is_err());
        p.target = vec![7, 1];
        p.decoy = None;
        assert!(p.validate(&layout).is_err());
    }
}
