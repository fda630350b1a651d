//! Reward formulations: base conditional reward, semantic-guided and
//! semantic-relative preferences, the guidance-style blend, discounted
//! aggregation over injection sequences, and the relative extension for
//! unimodal (image-only) scorers.
//!
//! The semantic-relative form scores one image under opposing control
//! words; components shared by both text embeddings cancel, which is what
//! strips text-independent bias directions out of the optimization signal.

use crate::error::{Error, Result};
use crate::nets::RewardModel;
use crate::rng;
use crate::tensor::{Tape, Tensor};

/// Opposing control-word bags with branch weights.
#[derive(Debug, Clone)]
pub struct ControlWordPair {
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
    pub w_pos: f64,
    pub w_neg: f64,
}

impl ControlWordPair {
    pub fn new(positive: Vec<usize>, negative: Vec<usize>) -> Result<Self> {
        Self::weighted(positive, negative, 1.0, 1.0)
    }

    pub fn weighted(
        positive: Vec<usize>,
        negative: Vec<usize>,
        w_pos: f64,
        w_neg: f64,
    ) -> Result<Self> {
        if positive == negative {
            return Err(Error::Config(
                "control pair requires distinct positive/negative token bags".into(),
            ));
        }
        if positive.is_empty() || negative.is_empty() {
            return Err(Error::EmptyTokenList);
        }
        if !(w_pos.is_finite() && w_neg.is_finite() && w_pos >= 0.0 && w_neg >= 0.0) {
            return Err(Error::Config(format!(
                "control weights must be finite and nonnegative, got ({w_pos}, {w_neg})"
            )));
        }
        Ok(ControlWordPair {
            positive,
            negative,
            w_pos,
            w_neg,
        })
    }
}

/// Discount policy over an injection sequence: state `i` (0 = highest
/// noise) receives weight `max(gamma^i, lambda_floor)`.
#[derive(Debug, Clone, Copy)]
pub struct AggregationPolicy {
    pub n: usize,
    pub gamma: f64,
    pub lambda_floor: f64,
}

impl AggregationPolicy {
    pub fn new(n: usize, gamma: f64, lambda_floor: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Config(format!("gamma {gamma} outside (0, 1]")));
        }
        if !(lambda_floor >= 0.0 && lambda_floor.is_finite()) {
            return Err(Error::Config(format!("lambda_floor {lambda_floor} invalid")));
        }
        Ok(AggregationPolicy {
            n,
            gamma,
            lambda_floor,
        })
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.gamma.powi(i as i32).max(self.lambda_floor)
    }
}

/// Similarity reward `f_img(x) . f_txt(prompt)`, in [-1, 1].
pub fn base_reward(
    tape: &mut Tape,
    rm: &RewardModel,
    x: &Tensor,
    prompt: &[usize],
) -> Result<Tensor> {
    let img = rm.img_encode(tape, x)?;
    let txt = rm.txt_encode(tape, prompt)?;
    tape.dot(&img, &txt.vector)
}

fn augmented(control: &[usize], prompt: &[usize]) -> Result<Vec<usize>> {
    if control.is_empty() {
        return Err(Error::EmptyTokenList);
    }
    let mut bag = Vec::with_capacity(control.len() + prompt.len());
    bag.extend_from_slice(control);
    bag.extend_from_slice(prompt);
    Ok(bag)
}

/// Semantic-guided preference: the base reward with control tokens
/// prepended to the prompt bag.
pub fn sgp_reward(
    tape: &mut Tape,
    rm: &RewardModel,
    x: &Tensor,
    control: &[usize],
    prompt: &[usize],
) -> Result<Tensor> {
    base_reward(tape, rm, x, &augmented(control, prompt)?)
}

/// Semantic-relative preference: weighted difference of the two guided
/// rewards on the same image. Text-branch components shared by both
/// conditions cancel.
pub fn srp_reward(
    tape: &mut Tape,
    rm: &RewardModel,
    x: &Tensor,
    pair: &ControlWordPair,
    prompt: &[usize],
) -> Result<Tensor> {
    let img = rm.img_encode(tape, x)?;
    let c1 = rm.txt_encode(tape, &augmented(&pair.positive, prompt)?)?;
    let c2 = rm.txt_encode(tape, &augmented(&pair.negative, prompt)?)?;
    srp_from_embeddings(tape, &img, &c1.vector, &c2.vector, pair.w_pos, pair.w_neg)
}

/// SRP on explicit embeddings (also the hook for stubbed-encoder tests).
pub fn srp_from_embeddings(
    tape: &mut Tape,
    img: &Tensor,
    c1: &Tensor,
    c2: &Tensor,
    w_pos: f64,
    w_neg: f64,
) -> Result<Tensor> {
    let r1 = tape.dot(img, c1)?;
    let r2 = tape.dot(img, c2)?;
    let r1w = tape.scale(&r1, w_pos)?;
    let r2w = tape.scale(&r2, w_neg)?;
    tape.sub(&r1w, &r2w)
}

/// Guidance-style blend: `f_img(x) . ((1-k) C2 + k C1)`.
pub fn cfg_reward(
    tape: &mut Tape,
    rm: &RewardModel,
    x: &Tensor,
    pair: &ControlWordPair,
    prompt: &[usize],
    k: f64,
) -> Result<Tensor> {
    if !k.is_finite() {
        return Err(Error::Config(format!("cfg coefficient {k} must be finite")));
    }
    let img = rm.img_encode(tape, x)?;
    let c1 = rm.txt_encode(tape, &augmented(&pair.positive, prompt)?)?;
    let c2 = rm.txt_encode(tape, &augmented(&pair.negative, prompt)?)?;
    cfg_from_embeddings(tape, &img, &c1.vector, &c2.vector, k)
}

pub fn cfg_from_embeddings(
    tape: &mut Tape,
    img: &Tensor,
    c1: &Tensor,
    c2: &Tensor,
    k: f64,
) -> Result<Tensor> {
    let a = tape.scale(c1, k)?;
    let b = tape.scale(c2, 1.0 - k)?;
    let blend = tape.add(&a, &b)?;
    tape.dot(img, &blend)
}

/// Relative reward for a unimodal scorer: score of `x` minus the score of
/// a noised-and-clamped copy. Both terms stay differentiable, so the
/// shared bias direction of the scorer cancels to first order.
pub fn unimodal_relative_reward<F>(
    tape: &mut Tape,
    scorer: F,
    x: &Tensor,
    noise_level: f64,
    seed: u64,
) -> Result<Tensor>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor>,
{
    if !(noise_level > 0.0 && noise_level <= 0.2) {
        return Err(Error::BadNoiseLevel { level: noise_level });
    }
    let eta = rng::randn_vec(&mut rng::stream(seed, 400), x.len());
    let eta = Tensor::new(x.shape(), eta.into_iter().map(|v| v * noise_level).collect())?;
    let perturbed = tape.add(x, &eta)?;
    let perturbed = tape.clamp01(&perturbed)?;
    let clean_score = scorer(tape, x)?;
    let noisy_score = scorer(tape, &perturbed)?;
    if !clean_score.value().is_finite() || !noisy_score.value().is_finite() {
        return Err(Error::NonFinite {
            context: "unimodal scorer".to_string(),
        });
    }
    tape.sub(&clean_score, &noisy_score)
}

/// Differentiable saturation score in [0, 1]: mean squared distance from
/// mid-gray, rescaled. Maximizing it pushes pixels toward the rails,
/// which makes it a convenient hacking-prone unimodal scorer.
pub fn saturation_scorer(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    let mid = Tensor::full(x.shape(), 0.5);
    let d = tape.sub(x, &mid)?;
    let sq = tape.mul(&d, &d)?;
    let m = tape.mean(&sq)?;
    tape.scale(&m, 4.0)
}

/// Discounted sum of per-state rewards, state 0 = highest noise.
pub fn aggregate_rewards(
    tape: &mut Tape,
    per_state: &[Tensor],
    policy: &AggregationPolicy,
) -> Result<Tensor> {
    if per_state.len() != policy.n + 1 {
        return Err(Error::AggregationLengthMismatch {
            got: per_state.len(),
            expected: policy.n + 1,
        });
    }
    let mut total: Option<Tensor> = None;
    for (i, r) in per_state.iter().enumerate() {
        let weighted = tape.scale(r, policy.weight(i))?;
        total = Some(match total {
            Some(acc) => tape.add(&acc, &weighted)?,
            None => weighted,
        });
    }
    Ok(total.unwrap())
}
