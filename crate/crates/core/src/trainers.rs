//! Alignment trainers: the truncated-backprop baselines, Direct-Align
//! with noise injection and discounted aggregation, the semantic-relative
//! variant with inversion regularization, the offline-image variant, and
//! the pretraining loops for both networks.
//!
//! Sign convention for the inversion branch: the inversion reconstruction
//! mirrors the clean estimate around `x0`, so its sensitivity to the
//! model prediction has the opposite sign of the denoising branch. The
//! trainer therefore *ascends* the negative-control reward through the
//! inversion path, which moves generated images *down* that reward — the
//! penalty the relative objective calls for. The logged objective value
//! stays `w_pos * r1 - w_neg * r2`.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{
    denoise_recover, injection_sequence, inversion_recover, predict_x0, sampler_grid,
    sampler_rollout_opts, NoisePredictor, NoiseSchedule, SamplerOptions, GENERATION_CLIP,
};
use crate::error::{Error, Result};
use crate::nets::{flow_pretrain_loss, reward_bt_loss, FlowModel, RewardModel};
use crate::rewards::{
    aggregate_rewards, base_reward, sgp_reward, unimodal_relative_reward, AggregationPolicy,
    ControlWordPair,
};
use crate::rng::{self, randn_vec, uniform};
use crate::synthdata::{attribute_metrics, split_indices, DataItem};
use crate::tensor::{bit_identical, Optimizer, Tape, Tensor};

/// A labeled comparison: which of two images better fits the prompt.
#[derive(Clone)]
pub struct PreferencePair {
    pub winner: Tensor,
    pub loser: Tensor,
    pub prompt: Vec<usize>,
}

impl PreferencePair {
    pub fn new(winner: Tensor, loser: Tensor, prompt: Vec<usize>) -> Result<Self> {
        if bit_identical(&winner, &loser) {
            return Err(Error::DegeneratePair);
        }
        if prompt.is_empty() {
            return Err(Error::EmptyTokenList);
        }
        Ok(PreferencePair {
            winner,
            loser,
            prompt,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Refl,
    DraftK,
    DirectAlign,
    Srpo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interval {
    Early,
    All,
    Late,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchMode {
    /// Both control branches evaluated at every injected state.
    Both,
    /// Inversion (penalty) branch on the higher-noise half of the
    /// sequence, denoising branch on the rest.
    Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SrpoConstruction {
    /// Penalty branch through the inversion reconstruction.
    Inversion,
    /// Both branches on the denoised reconstruction (plain relative form).
    Direct,
}

#[derive(Debug, Clone)]
pub struct AlignConfig {
    pub method: Method,
    pub interval: Interval,
    pub injections: usize,
    pub spacing: f64,
    pub delta_sigma_fraction: f64,
    /// Upper bound on delta_sigma as a multiple of alpha(t). Keeps the
    /// model-term coefficient delta_sigma/alpha bounded, so the prior
    /// carries the bulk of high-noise recovery; at low noise the sigma
    /// bound takes over and recovery approaches the full one-step
    /// prediction.
    pub delta_cap_ratio: f64,
    pub aggregation: AggregationPolicy,
    pub control: Option<ControlWordPair>,
    pub cfg_k: Option<f64>,
    pub offline: bool,
    pub rollout_steps: usize,
    pub draft_k: usize,
    pub branch_mode: BranchMode,
    pub srpo_construction: SrpoConstruction,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
}

impl AlignConfig {
    pub fn direct_align(seed: u64) -> Self {
        AlignConfig {
            method: Method::DirectAlign,
            interval: Interval::All,
            injections: 3,
            spacing: 0.08,
            delta_sigma_fraction: 1.0,
            delta_cap_ratio: 0.3,
            aggregation: AggregationPolicy::new(3, 0.9, 0.0).unwrap(),
            control: None,
            cfg_k: None,
            offline: false,
            rollout_steps: 25,
            draft_k: 1,
            branch_mode: BranchMode::Both,
            srpo_construction: SrpoConstruction::Inversion,
            lr: 2e-5,
            steps: 300,
            batch: 4,
            seed,
        }
    }

    pub fn srpo(control: ControlWordPair, seed: u64) -> Self {
        AlignConfig {
            method: Method::Srpo,
            control: Some(control),
            ..Self::direct_align(seed)
        }
    }

    pub fn refl(seed: u64) -> Self {
        AlignConfig {
            method: Method::Refl,
            interval: Interval::Late,
            injections: 0,
            aggregation: AggregationPolicy::new(0, 1.0, 0.0).unwrap(),
            ..Self::direct_align(seed)
        }
    }

    pub fn draft(draft_k: usize, seed: u64) -> Self {
        AlignConfig {
            method: Method::DraftK,
            draft_k,
            injections: 0,
            aggregation: AggregationPolicy::new(0, 1.0, 0.0).unwrap(),
            ..Self::direct_align(seed)
        }
    }

    /// Timestep bounds for the configured interval: early = highest-noise
    /// quarter, late = lowest-noise quarter.
    pub fn interval_bounds(&self, s: &NoiseSchedule) -> (f64, f64) {
        match self.interval {
            Interval::Early => (0.75 * s.t_max, s.t_max),
            Interval::All => (s.t_min, s.t_max),
            Interval::Late => (s.t_min, 0.25),
        }
    }

    fn feasible_start_bounds(&self, s: &NoiseSchedule) -> Result<(f64, f64)> {
        let (lo, hi) = self.interval_bounds(s);
        let lo_eff = lo.max(s.t_min + self.injections as f64 * self.spacing);
        if lo_eff >= hi {
            return Err(Error::Config(format!(
                "interval [{lo}, {hi}] cannot fit {} injections spaced {}",
                self.injections, self.spacing
            )));
        }
        Ok((lo_eff, hi))
    }

    pub fn validate(&self, s: &NoiseSchedule) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if self.rollout_steps == 0 {
            return Err(Error::ZeroSamplerSteps);
        }
        if !(self.spacing >= 0.0 && self.spacing.is_finite()) {
            return Err(Error::Config(format!("spacing {} invalid", self.spacing)));
        }
        if !(self.delta_sigma_fraction >= 0.0 && self.delta_sigma_fraction.is_finite()) {
            return Err(Error::Config(format!(
                "delta_sigma_fraction {} invalid",
                self.delta_sigma_fraction
            )));
        }
        if !(self.delta_cap_ratio > 0.0 && self.delta_cap_ratio.is_finite()) {
            return Err(Error::Config(format!(
                "delta_cap_ratio {} invalid",
                self.delta_cap_ratio
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} invalid", self.lr)));
        }
        if self.aggregation.n != self.injections {
            return Err(Error::Config(format!(
                "aggregation n = {} must match injections = {}",
                self.aggregation.n, self.injections
            )));
        }
        if let Some(k) = self.cfg_k {
            if !k.is_finite() {
                return Err(Error::Config(format!("cfg_k {k} must be finite")));
            }
        }
        match self.method {
            Method::DraftK => {
                let cap = self.rollout_steps.min(5);
                if self.draft_k == 0 || self.draft_k > cap {
                    return Err(Error::Config(format!(
                        "draft_k {} outside 1..={cap}",
                        self.draft_k
                    )));
                }
            }
            Method::Srpo if self.control.is_none() => {
                return Err(Error::Config("srpo requires a control pair".into()));
            }
            _ => {}
        }
        self.feasible_start_bounds(s)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub step: usize,
    pub reward: f64,
    pub brightness: f64,
    pub extremity: f64,
    pub total_variation: f64,
    pub t_mean: f64,
    pub loss: f64,
    pub wall_clock_ms: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunMetrics {
    pub records: Vec<StepRecord>,
}

impl RunMetrics {
    fn push(&mut self, record: StepRecord) {
        debug_assert!(self
            .records
            .last()
            .map(|r| r.step < record.step)
            .unwrap_or(true));
        debug_assert!(
            record.reward.is_finite()
                && record.loss.is_finite()
                && record.brightness.is_finite()
                && record.extremity.is_finite()
                && record.total_variation.is_finite()
        );
        self.records.push(record);
    }

    pub fn final_reward(&self) -> f64 {
        self.records.last().map(|r| r.reward).unwrap_or(0.0)
    }

    pub fn final_loss(&self) -> f64 {
        self.records.last().map(|r| r.loss).unwrap_or(0.0)
    }

    /// Equality of every recorded value except wall-clock time.
    pub fn numeric_eq(&self, other: &RunMetrics) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.step == b.step
                    && a.reward.to_bits() == b.reward.to_bits()
                    && a.brightness.to_bits() == b.brightness.to_bits()
                    && a.extremity.to_bits() == b.extremity.to_bits()
                    && a.total_variation.to_bits() == b.total_variation.to_bits()
                    && a.t_mean.to_bits() == b.t_mean.to_bits()
                    && a.loss.to_bits() == b.loss.to_bits()
            })
    }

    pub fn moving_average_rewards(&self, window: usize) -> Vec<f64> {
        if self.records.len() < window || window == 0 {
            return Vec::new();
        }
        (0..=self.records.len() - window)
            .map(|i| {
                self.records[i..i + window]
                    .iter()
                    .map(|r| r.reward)
                    .sum::<f64>()
                    / window as f64
            })
            .collect()
    }
}

fn clamp_image(x: &Tensor) -> Tensor {
    Tensor::new(
        x.shape(),
        x.to_vec().iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    )
    .expect("clamped values are finite")
}

/// Sampler stabilization used by every generation path in the trainers.
fn gen_opts() -> SamplerOptions {
    SamplerOptions {
        x0_clip: Some(GENERATION_CLIP),
    }
}

/// Detached rollout prefix: integrate the sampler from `x_start` down to
/// grid index `j` without recording anything. Arithmetic matches the
/// sampler's untracked path (including intermediate-estimate clipping)
/// exactly.
fn rollout_to_index(
    model: &dyn NoisePredictor,
    x_start: &Tensor,
    steps: usize,
    j: usize,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    let grid = sampler_grid(steps, s);
    let (lo, hi) = GENERATION_CLIP;
    let mut x = x_start.detach();
    for i in 0..j {
        let mut scratch = Tape::new();
        let eps_hat = model.predict(&mut scratch, &x, grid[i])?.detach();
        let x0_hat = predict_x0(&mut scratch, &x, &eps_hat, grid[i], s)?.detach();
        let (a_next, s_next) = s.eval(grid[i + 1])?;
        let data: Vec<f64> = x0_hat
            .to_vec()
            .iter()
            .zip(eps_hat.to_vec().iter())
            .map(|(&h, &e)| a_next * h.clamp(lo, hi) + s_next * e)
            .collect();
        x = Tensor::new(x0_hat.shape(), data)?;
    }
    Ok(x)
}

fn draw_start_state(run_rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, randn_vec(run_rng, n))
}

fn assert_reward_frozen(rm: &RewardModel) -> Result<()> {
    for p in rm.parameters() {
        if let Some(g) = p.grad() {
            if g.iter().any(|v| *v != 0.0) {
                return Err(Error::Config(
                    "reward model received gradient during alignment".into(),
                ));
            }
        }
    }
    Ok(())
}

/// Per-state objective under one alignment method. `grad` is the scalar
/// ascended on the tape; `value` is the reported objective value.
struct StateObjective {
    grad: Tensor,
    value: f64,
}

enum Objective<'a> {
    Plain,
    Srpo {
        control: &'a ControlWordPair,
        construction: SrpoConstruction,
        branch_mode: BranchMode,
    },
    Unimodal {
        scorer: &'a dyn Fn(&mut Tape, &Tensor) -> Result<Tensor>,
        relative: bool,
        noise_level: f64,
        eta_seed: u64,
    },
}

#[allow(clippy::too_many_arguments)]
fn state_objective(
    tape: &mut Tape,
    flow: &FlowModel,
    rm: Option<&RewardModel>,
    objective: &Objective,
    state: &crate::diffusion::NoisySample,
    state_index: usize,
    state_count: usize,
    delta_sigma: f64,
    prompt: &[usize],
    c: &crate::nets::ConditionEmbedding,
    s: &NoiseSchedule,
) -> Result<StateObjective> {
    let eps_hat = flow.eps(tape, &state.xt, state.t, c)?;
    match objective {
        Objective::Plain => {
            let recovered = denoise_recover(tape, state, &eps_hat, delta_sigma, s)?;
            let r = base_reward(tape, rm.expect("plain objective needs a reward model"), &recovered, prompt)?;
            let value = r.value();
            Ok(StateObjective { grad: r, value })
        }
        Objective::Srpo {
            control,
            construction,
            branch_mode,
        } => {
            let rm = rm.expect("srpo needs a reward model");
            let positive_branch = |tape: &mut Tape| -> Result<Tensor> {
                let recovered = denoise_recover(tape, state, &eps_hat, delta_sigma, s)?;
                let r1 = sgp_reward(tape, rm, &recovered, &control.positive, prompt)?;
                tape.scale(&r1, control.w_pos)
            };
            let negative_branch = |tape: &mut Tape| -> Result<Tensor> {
                let recovered = match construction {
                    SrpoConstruction::Inversion => {
                        inversion_recover(tape, state, &eps_hat, delta_sigma, s)?
                    }
                    SrpoConstruction::Direct => {
                        denoise_recover(tape, state, &eps_hat, delta_sigma, s)?
                    }
                };
                let r2 = sgp_reward(tape, rm, &recovered, &control.negative, prompt)?;
                tape.scale(&r2, control.w_neg)
            };
            let split_penalty_half = matches!(branch_mode, BranchMode::Split)
                && state_index < state_count.div_ceil(2);
            let split_reward_half =
                matches!(branch_mode, BranchMode::Split) && !split_penalty_half;

            if split_reward_half {
                let r1 = positive_branch(tape)?;
                let value = r1.value();
                return Ok(StateObjective { grad: r1, value });
            }
            if split_penalty_half {
                let r2 = negative_branch(tape)?;
                let value = -r2.value();
                let grad = match construction {
                    // Ascending the inversion branch is the penalty.
                    SrpoConstruction::Inversion => r2,
                    SrpoConstruction::Direct => tape.scale(&r2, -1.0)?,
                };
                return Ok(StateObjective { grad, value });
            }

            let r1 = positive_branch(tape)?;
            let r2 = negative_branch(tape)?;
            let value = r1.value() - r2.value();
            let grad = match construction {
                SrpoConstruction::Inversion => tape.add(&r1, &r2)?,
                SrpoConstruction::Direct => tape.sub(&r1, &r2)?,
            };
            Ok(StateObjective { grad, value })
        }
        Objective::Unimodal {
            scorer,
            relative,
            noise_level,
            eta_seed,
        } => {
            let recovered = denoise_recover(tape, state, &eps_hat, delta_sigma, s)?;
            let r = if *relative {
                unimodal_relative_reward(tape, scorer, &recovered, *noise_level, *eta_seed)?
            } else {
                scorer(tape, &recovered)?
            };
            let value = r.value();
            Ok(StateObjective { grad: r, value })
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn align_injection_loop<'a>(
    flow: &FlowModel,
    rm: Option<&RewardModel>,
    cfg: &AlignConfig,
    prompts: &[Vec<usize>],
    offline: Option<&[DataItem]>,
    objective_for: &dyn Fn(u64) -> Objective<'a>,
    s: &NoiseSchedule,
) -> Result<RunMetrics> {
    if prompts.is_empty() {
        return Err(Error::EmptyBatch { op: "align" });
    }
    if cfg.offline && offline.map(|d| d.is_empty()).unwrap_or(true) {
        return Err(Error::EmptyBatch { op: "offline align" });
    }
    let (lo, hi) = cfg.feasible_start_bounds(s)?;
    let (ilo, ihi) = cfg.interval_bounds(s);
    let grid_step = (s.t_max - s.t_min) / (cfg.rollout_steps.max(2) - 1) as f64;
    let mut run_rng = rng::stream(cfg.seed, 700);
    let mut opt = Optimizer::adam(flow.parameters(), cfg.lr);
    if let Some(rm) = rm {
        rm.set_trainable(false);
    }
    let mut metrics = RunMetrics::default();
    let n_pixels = flow.img_h * flow.img_w;
    let started = Instant::now();

    for step in 0..cfg.steps {
        let step_start = started.elapsed();
        let mut tape = Tape::new();
        opt.prime_grads();
        let mut total: Option<Tensor> = None;
        let mut reward_sum = 0.0;
        let mut t_sum = 0.0;
        let mut stat_sum = (0.0, 0.0, 0.0);

        for item in 0..cfg.batch {
            // Offline items supervise with their own describing prompt, the
            // way captioned photos would; online items generate from the
            // prompt set.
            let (x0, prompt) = if cfg.offline {
                let data = offline.unwrap();
                let idx = run_rng.gen_range(0..data.len());
                (data[idx].image.detach(), &data[idx].prompt)
            } else {
                let prompt = &prompts[(step * cfg.batch + item) % prompts.len()];
                let c = flow.condition(prompt)?;
                let conditioned = flow.conditioned(&c);
                let x_start = draw_start_state(&mut run_rng, flow.image_shape())?;
                let x0 = sampler_rollout_opts(
                    &mut tape,
                    &conditioned,
                    &x_start,
                    cfg.rollout_steps,
                    0,
                    s,
                    gen_opts(),
                )?;
                (x0, prompt)
            };
            let c = flow.condition(prompt)?;
            let (b, e, tv) = attribute_metrics(&clamp_image(&x0))?;
            stat_sum.0 += b;
            stat_sum.1 += e;
            stat_sum.2 += tv;
            let eps = Tensor::new(flow.image_shape(), randn_vec(&mut run_rng, n_pixels))?;
            let width = (hi - lo) / cfg.batch as f64;
            let t_start = uniform(
                &mut run_rng,
                lo + item as f64 * width,
                lo + (item + 1) as f64 * width,
            );
            assert!(
                t_start >= ilo - 1e-12 && t_start <= ihi + 1e-12,
                "sampled t {t_start} escaped interval [{ilo}, {ihi}]"
            );
            t_sum += t_start;
            let seq = injection_sequence(&x0, &eps, t_start, cfg.injections, cfg.spacing, s)?;

            let mut per_state = Vec::with_capacity(seq.len());
            let mut value_agg = 0.0;
            for (k, state) in seq.states.iter().enumerate() {
                let (alpha, sigma) = s.eval(state.t)?;
                // Cap the model term so its coefficient delta_sigma/alpha
                // stays bounded; otherwise prediction error is amplified
                // without bound as t -> 1.
                let delta_sigma = (cfg.delta_sigma_fraction * grid_step)
                    .min(sigma)
                    .min(cfg.delta_cap_ratio * alpha)
                    .max(0.0);
                let eta_seed = cfg
                    .seed
                    .wrapping_mul(0x9e37)
                    .wrapping_add((step * cfg.batch + item) as u64 * 131 + k as u64);
                let obj = objective_for(eta_seed);
                let state_obj = state_objective(
                    &mut tape,
                    flow,
                    rm,
                    &obj,
                    state,
                    k,
                    seq.len(),
                    delta_sigma,
                    prompt,
                    &c,
                    s,
                )?;
                value_agg += cfg.aggregation.weight(k) * state_obj.value;
                per_state.push(state_obj.grad);
            }
            reward_sum += value_agg;
            let agg = aggregate_rewards(&mut tape, &per_state, &cfg.aggregation)?;
            total = Some(match total {
                Some(acc) => tape.add(&acc, &agg)?,
                None => agg,
            });
        }

        let objective = tape.scale(&total.unwrap(), 1.0 / cfg.batch as f64)?;
        let loss = tape.scale(&objective, -1.0)?;
        tape.backward(&loss)?;
        if let Some(rm) = rm {
            assert_reward_frozen(rm)?;
        }
        opt.step()?;

        let inv_batch = 1.0 / cfg.batch as f64;
        metrics.push(StepRecord {
            step,
            reward: reward_sum * inv_batch,
            brightness: stat_sum.0 * inv_batch,
            extremity: stat_sum.1 * inv_batch,
            total_variation: stat_sum.2 * inv_batch,
            t_mean: t_sum * inv_batch,
            loss: loss.value(),
            wall_clock_ms: (started.elapsed() - step_start).as_secs_f64() * 1e3,
        });
    }
    Ok(metrics)
}

/// ReFL-style baseline: detached rollout to a late-interval grid point,
/// one fully model-driven prediction, reward ascent on it.
pub fn align_refl(
    flow: &FlowModel,
    rm: &RewardModel,
    cfg: &AlignConfig,
    prompts: &[Vec<usize>],
    s: &NoiseSchedule,
) -> Result<RunMetrics> {
    if cfg.method != Method::Refl {
        return Err(Error::Config("align_refl requires method = refl".into()));
    }
    cfg.validate(s)?;
    if prompts.is_empty() {
        return Err(Error::EmptyBatch { op: "align_refl" });
    }
    let (lo, hi) = cfg.interval_bounds(s);
    let grid = sampler_grid(cfg.rollout_steps, s);
    let eligible: Vec<usize> = (0..grid.len())
        .filter(|&i| grid[i] >= lo && grid[i] <= hi)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Config(format!(
            "no sampler grid point lies in interval [{lo}, {hi}]"
        )));
    }
    let mut run_rng = rng::stream(cfg.seed, 700);
    let mut opt = Optimizer::adam(flow.parameters(), cfg.lr);
    rm.set_trainable(false);
    let mut metrics = RunMetrics::default();
    let started = Instant::now();

    for step in 0..cfg.steps {
        let step_start = started.elapsed();
        let mut tape = Tape::new();
        opt.prime_grads();
        let mut total: Option<Tensor> = None;
        let mut reward_sum = 0.0;
        let mut t_sum = 0.0;
        let mut stat_sum = (0.0, 0.0, 0.0);

        for item in 0..cfg.batch {
            let prompt = &prompts[(step * cfg.batch + item) % prompts.len()];
            let c = flow.condition(prompt)?;
            let conditioned = flow.conditioned(&c);
            let x_start = draw_start_state(&mut run_rng, flow.image_shape())?;
            let j = eligible[run_rng.gen_range(0..eligible.len())];
            let t = grid[j];
            t_sum += t;
            let xt = rollout_to_index(&conditioned, &x_start, cfg.rollout_steps, j, s)?;
            let eps_hat = flow.eps(&mut tape, &xt, t, &c)?;
            let x0_hat = predict_x0(&mut tape, &xt, &eps_hat, t, s)?;
            let r = base_reward(&mut tape, rm, &x0_hat, prompt)?;
            reward_sum += r.value();
            let (b, e, tv) = attribute_metrics(&clamp_image(&x0_hat))?;
            stat_sum.0 += b;
            stat_sum.1 += e;
            stat_sum.2 += tv;
            total = Some(match total {
                Some(acc) => tape.add(&acc, &r)?,
                None => r,
            });
        }

        let objective = tape.scale(&total.unwrap(), 1.0 / cfg.batch as f64)?;
        let loss = tape.scale(&objective, -1.0)?;
        tape.backward(&loss)?;
        assert_reward_frozen(rm)?;
        opt.step()?;

        let inv_batch = 1.0 / cfg.batch as f64;
        metrics.push(StepRecord {
            step,
            reward: reward_sum * inv_batch,
            brightness: stat_sum.0 * inv_batch,
            extremity: stat_sum.1 * inv_batch,
            total_variation: stat_sum.2 * inv_batch,
            t_mean: t_sum * inv_batch,
            loss: loss.value(),
            wall_clock_ms: (started.elapsed() - step_start).as_secs_f64() * 1e3,
        });
    }
    Ok(metrics)
}

/// DRaFT-style baseline: full rollout with gradient on the last
/// `draft_k` steps, reward ascent on the final image.
pub fn align_draft_k(
    flow: &FlowModel,
    rm: &RewardModel,
    cfg: &AlignConfig,
    prompts: &[Vec<usize>],
    s: &NoiseSchedule,
) -> Result<RunMetrics> {
    if cfg.method != Method::DraftK {
        return Err(Error::Config("align_draft_k requires method = draft_k".into()));
    }
    cfg.validate(s)?;
    if prompts.is_empty() {
        return Err(Error::EmptyBatch { op: "align_draft_k" });
    }
    let mut run_rng = rng::stream(cfg.seed, 700);
    let mut opt = Optimizer::adam(flow.parameters(), cfg.lr);
    rm.set_trainable(false);
    let mut metrics = RunMetrics::default();
    let started = Instant::now();

    for step in 0..cfg.steps {
        let step_start = started.elapsed();
        let mut tape = Tape::new();
        opt.prime_grads();
        let mut total: Option<Tensor> = None;
        let mut reward_sum = 0.0;
        let mut stat_sum = (0.0, 0.0, 0.0);

        for item in 0..cfg.batch {
            let prompt = &prompts[(step * cfg.batch + item) % prompts.len()];
            let c = flow.condition(prompt)?;
            let conditioned = flow.conditioned(&c);
            let x_start = draw_start_state(&mut run_rng, flow.image_shape())?;
            let final_image = sampler_rollout_opts(
                &mut tape,
                &conditioned,
                &x_start,
                cfg.rollout_steps,
                cfg.draft_k,
                s,
                gen_opts(),
            )?;
            let r = base_reward(&mut tape, rm, &final_image, prompt)?;
            reward_sum += r.value();
            let (b, e, tv) = attribute_metrics(&clamp_image(&final_image))?;
            stat_sum.0 += b;
            stat_sum.1 += e;
            stat_sum.2 += tv;
            total = Some(match total {
                Some(acc) => tape.add(&acc, &r)?,
                None => r,
            });
        }

        let objective = tape.scale(&total.unwrap(), 1.0 / cfg.batch as f64)?;
        let loss = tape.scale(&objective, -1.0)?;
        tape.backward(&loss)?;
        assert_reward_frozen(rm)?;
        opt.step()?;

        let inv_batch = 1.0 / cfg.batch as f64;
        metrics.push(StepRecord {
            step,
            reward: reward_sum * inv_batch,
            brightness: stat_sum.0 * inv_batch,
            extremity: stat_sum.1 * inv_batch,
            total_variation: stat_sum.2 * inv_batch,
            t_mean: sampler_grid(cfg.rollout_steps, s)[cfg.rollout_steps - 1],
            loss: loss.value(),
            wall_clock_ms: (started.elapsed() - step_start).as_secs_f64() * 1e3,
        });
    }
    Ok(metrics)
}

/// Direct-Align: recover from injected noise at interval-sampled
/// timesteps and ascend the discounted aggregate of plain rewards.
pub fn align_direct(
    flow: &FlowModel,
    rm: &RewardModel,
    cfg: &AlignConfig,
    prompts: &[Vec<usize>],
    offline: Option<&[DataItem]>,
    s: &NoiseSchedule,
) -> Result<RunMetrics> {
    if cfg.method != Method::DirectAlign {
        return Err(Error::Config(
            "align_direct requires method = direct_align".into(),
        ));
    }
    cfg.validate(s)?;
    align_injection_loop(
        flow,
        Some(rm),
        cfg,
        prompts,
        offline,
        &|_| Objective::Plain,
        s,
    )
}

/// Semantic-relative alignment: positive-control reward on the denoised
/// reconstruction, negative-control penalty through the inversion path
/// (or on the denoised one, for the direct construction).
pub fn align_srpo(
    flow: &FlowModel,
    rm: &RewardModel,
    cfg: &AlignConfig,
    prompts: &[Vec<usize>],
    offline: Option<&[DataItem]>,
    s: &NoiseSchedule,
) -> Result<RunMetrics> {
    if cfg.method != Method::Srpo {
        return Err(Error::Config("align_srpo requires method = srpo".into()));
    }
    cfg.validate(s)?;
    let control = cfg.control.as_ref().unwrap();
    let construction = cfg.srpo_construction;
    let branch_mode = cfg.branch_mode;
    align_injection_loop(
        flow,
        Some(rm),
        cfg,
        prompts,
        offline,
        &move |_| Objective::Srpo {
            control,
            construction,
            branch_mode,
        },
        s,
    )
}

/// Direct-Align against an image-only scorer, optionally in the relative
/// (noised-negative) form.
pub fn align_unimodal(
    flow: &FlowModel,
    scorer: &dyn Fn(&mut Tape, &Tensor) -> Result<Tensor>,
    relative: bool,
    noise_level: f64,
    cfg: &AlignConfig,
    prompts: &[Vec<usize>],
    s: &NoiseSchedule,
) -> Result<RunMetrics> {
    if cfg.method != Method::DirectAlign {
        return Err(Error::Config(
            "align_unimodal runs on method = direct_align".into(),
        ));
    }
    cfg.validate(s)?;
    align_injection_loop(
        flow,
        None,
        cfg,
        prompts,
        None,
        &move |eta_seed| Objective::Unimodal {
            scorer,
            relative,
            noise_level,
            eta_seed,
        },
        s,
    )
}

/// Dispatch on the configured method.
pub fn align(
    flow: &FlowModel,
    rm: &RewardModel,
    cfg: &AlignConfig,
    prompts: &[Vec<usize>],
    offline: Option<&[DataItem]>,
    s: &NoiseSchedule,
) -> Result<RunMetrics> {
    match cfg.method {
        Method::Refl => align_refl(flow, rm, cfg, prompts, s),
        Method::DraftK => align_draft_k(flow, rm, cfg, prompts, s),
        Method::DirectAlign => align_direct(flow, rm, cfg, prompts, offline, s),
        Method::Srpo => align_srpo(flow, rm, cfg, prompts, offline, s),
    }
}

/// Noise-matching pretraining for the flow model.
pub fn pretrain_flow(
    flow: &FlowModel,
    data: &[DataItem],
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<RunMetrics> {
    if data.is_empty() {
        return Err(Error::EmptyBatch { op: "pretrain_flow" });
    }
    let s = NoiseSchedule::default();
    let mut run_rng = rng::stream(seed, 710);
    let mut opt = Optimizer::adam(flow.parameters(), lr);
    let mut metrics = RunMetrics::default();
    let started = Instant::now();
    for step in 0..steps {
        let step_start = started.elapsed();
        let mut tape = Tape::new();
        let minibatch: Vec<(Tensor, Vec<usize>)> = (0..batch)
            .map(|_| {
                let item = &data[run_rng.gen_range(0..data.len())];
                (item.image.clone(), item.prompt.clone())
            })
            .collect();
        let loss = flow_pretrain_loss(&mut tape, flow, &minibatch, &s, seed, step as u64)?;
        let loss_value = loss.value();
        tape.backward(&loss)?;
        opt.step()?;
        metrics.push(StepRecord {
            step,
            reward: 0.0,
            brightness: 0.0,
            extremity: 0.0,
            total_variation: 0.0,
            t_mean: 0.0,
            loss: loss_value,
            wall_clock_ms: (started.elapsed() - step_start).as_secs_f64() * 1e3,
        });
    }
    Ok(metrics)
}

/// Bradley-Terry training of the reward model with a deterministic
/// held-out split; per-epoch records carry the held-out accuracy in the
/// `reward` field.
pub fn pretrain_reward(
    rm: &RewardModel,
    pairs: &[PreferencePair],
    epochs: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<RunMetrics> {
    if pairs.is_empty() {
        return Err(Error::EmptyBatch { op: "pretrain_reward" });
    }
    rm.set_trainable(true);
    let (train_idx, test_idx) = split_indices(pairs.len(), 0.2, seed);
    let mut run_rng = rng::stream(seed, 720);
    let mut opt = Optimizer::adam(rm.parameters(), lr);
    let mut metrics = RunMetrics::default();
    let started = Instant::now();

    for epoch in 0..epochs {
        let epoch_start = started.elapsed();
        let mut order = train_idx.clone();
        for i in (1..order.len()).rev() {
            let j = run_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch.max(1)) {
            let mut tape = Tape::new();
            let mut total: Option<Tensor> = None;
            for &idx in chunk {
                let l = reward_bt_loss(&mut tape, rm, &pairs[idx])?;
                total = Some(match total {
                    Some(acc) => tape.add(&acc, &l)?,
                    None => l,
                });
            }
            let loss = tape.scale(&total.unwrap(), 1.0 / chunk.len() as f64)?;
            loss_sum += loss.value();
            batches += 1;
            tape.backward(&loss)?;
            opt.step()?;
        }
        let accuracy = reward_pair_accuracy(rm, pairs, &test_idx)?;
        metrics.push(StepRecord {
            step: epoch,
            reward: accuracy,
            brightness: 0.0,
            extremity: 0.0,
            total_variation: 0.0,
            t_mean: 0.0,
            loss: loss_sum / batches.max(1) as f64,
            wall_clock_ms: (started.elapsed() - epoch_start).as_secs_f64() * 1e3,
        });
    }
    Ok(metrics)
}

/// Fraction of pairs where the winner outscores the loser.
pub fn reward_pair_accuracy(
    rm: &RewardModel,
    pairs: &[PreferencePair],
    indices: &[usize],
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::EmptyBatch {
            op: "reward_pair_accuracy",
        });
    }
    let mut correct = 0usize;
    for &idx in indices {
        let pair = &pairs[idx];
        let mut tape = Tape::new();
        let rw = base_reward(&mut tape, rm, &pair.winner, &pair.prompt)?;
        let rl = base_reward(&mut tape, rm, &pair.loser, &pair.prompt)?;
        if rw.value() > rl.value() {
            correct += 1;
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Attribute and reward statistics of detached generations on a fixed
/// prompt set with fixed seeds.
#[derive(Debug, Clone, Copy, Default)]
pub struct GenStats {
    pub brightness: f64,
    pub extremity: f64,
    pub total_variation: f64,
    pub raw_reward: f64,
    pub sgp_probe: f64,
}

pub fn eval_generation(
    flow: &FlowModel,
    rm: Option<&RewardModel>,
    probe: Option<&ControlWordPair>,
    prompts: &[Vec<usize>],
    rollout_steps: usize,
    seed: u64,
    s: &NoiseSchedule,
) -> Result<GenStats> {
    if prompts.is_empty() {
        return Err(Error::EmptyBatch {
            op: "eval_generation",
        });
    }
    let mut stats = GenStats::default();
    let n = flow.img_h * flow.img_w;
    for (i, prompt) in prompts.iter().enumerate() {
        let c = flow.condition(prompt)?;
        let conditioned = flow.conditioned(&c);
        let noise = randn_vec(&mut rng::stream(seed, 600 + i as u64), n);
        let x_start = Tensor::new(flow.image_shape(), noise)?;
        let mut tape = Tape::new();
        let raw = sampler_rollout_opts(
            &mut tape,
            &conditioned,
            &x_start,
            rollout_steps,
            0,
            s,
            gen_opts(),
        )?;
        let image = clamp_image(&raw);
        let (b, e, tv) = attribute_metrics(&image)?;
        stats.brightness += b;
        stats.extremity += e;
        stats.total_variation += tv;
        if let Some(rm) = rm {
            let mut tape = Tape::new();
            let r = base_reward(&mut tape, rm, &image, prompt)?;
            stats.raw_reward += r.value();
            if let Some(pair) = probe {
                let rp = sgp_reward(&mut tape, rm, &image, &pair.positive, prompt)?;
                let rn = sgp_reward(&mut tape, rm, &image, &pair.negative, prompt)?;
                stats.sgp_probe += rp.value() - rn.value();
            }
        }
    }
    let inv = 1.0 / prompts.len() as f64;
    stats.brightness *= inv;
    stats.extremity *= inv;
    stats.total_variation *= inv;
    stats.raw_reward *= inv;
    stats.sgp_probe *= inv;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{gen_dataset, tok};

    fn tiny_setup() -> (FlowModel, RewardModel, Vec<Vec<usize>>, NoiseSchedule) {
        let flow = FlowModel::new(4, 4, &[24], 12, 8, 31);
        let rm = RewardModel::new(4, 4, &[24], 12, 8, 32);
        let prompts = vec![
            vec![tok::A, tok::BRIGHT, tok::SHARP, tok::DISC],
            vec![tok::A, tok::DARK, tok::SMOOTH, tok::SQUARE],
        ];
        (flow, rm, prompts, NoiseSchedule::default())
    }

    fn quick_cfg(method: Method, seed: u64) -> AlignConfig {
        let mut cfg = match method {
            Method::Refl => AlignConfig::refl(seed),
            Method::DraftK => AlignConfig::draft(1, seed),
            Method::DirectAlign => AlignConfig::direct_align(seed),
            Method::Srpo => AlignConfig::srpo(
                ControlWordPair::new(vec![tok::PHOTO], vec![tok::RENDER]).unwrap(),
                seed,
            ),
        };
        cfg.steps = 3;
        cfg.batch = 2;
        cfg.rollout_steps = 6;
        cfg
    }

    #[test]
    fn config_validation() {
        let s = NoiseSchedule::default();
        let mut cfg = AlignConfig::draft(0, 1);
        assert!(cfg.validate(&s).is_err(), "draft_k = 0 must be rejected");
        cfg.draft_k = 6;
        assert!(cfg.validate(&s).is_err());
        cfg.draft_k = 3;
        assert!(cfg.validate(&s).is_ok());

        let mut srpo = AlignConfig::srpo(
            ControlWordPair::new(vec![tok::PHOTO], vec![tok::RENDER]).unwrap(),
            1,
        );
        srpo.control = None;
        assert!(srpo.validate(&s).is_err());

        let mut mismatch = AlignConfig::direct_align(1);
        mismatch.injections = 1;
        assert!(mismatch.validate(&s).is_err(), "aggregation n mismatch");

        let mut cramped = AlignConfig::direct_align(1);
        cramped.interval = Interval::Late;
        cramped.spacing = 0.2;
        assert!(cramped.validate(&s).is_err(), "late interval cannot fit 2x0.2");
    }

    #[test]
    fn method_dispatch_guards() {
        let (flow, rm, prompts, s) = tiny_setup();
        let cfg = quick_cfg(Method::DirectAlign, 5);
        assert!(align_refl(&flow, &rm, &cfg, &prompts, &s).is_err());
        assert!(align_srpo(&flow, &rm, &cfg, &prompts, None, &s).is_err());
    }

    #[test]
    fn zero_lr_leaves_everything_flat() {
        let (flow, rm, prompts, s) = tiny_setup();
        let before: Vec<Vec<f64>> = flow.parameters().iter().map(|p| p.to_vec()).collect();
        let mut cfg = quick_cfg(Method::Srpo, 6);
        cfg.lr = 0.0;
        let metrics = align_srpo(&flow, &rm, &cfg, &prompts, None, &s).unwrap();
        let after: Vec<Vec<f64>> = flow.parameters().iter().map(|p| p.to_vec()).collect();
        assert_eq!(before, after);
        let rewards: Vec<f64> = metrics.records.iter().map(|r| r.reward).collect();
        for w in rewards.windows(2) {
            // Same parameters, different sampled noise: rewards vary only
            // through data draws, parameters stay put. Loss repeats once
            // prompts cycle identically, so just check finiteness here.
            assert!(w[0].is_finite() && w[1].is_finite());
        }
    }

    #[test]
    fn srpo_zero_delta_sigma_is_exact_noop() {
        let (flow, rm, prompts, s) = tiny_setup();
        let before: Vec<Vec<f64>> = flow.parameters().iter().map(|p| p.to_vec()).collect();
        let mut cfg = quick_cfg(Method::Srpo, 7);
        cfg.delta_sigma_fraction = 0.0;
        cfg.lr = 1e-3;
        align_srpo(&flow, &rm, &cfg, &prompts, None, &s).unwrap();
        let after: Vec<Vec<f64>> = flow.parameters().iter().map(|p| p.to_vec()).collect();
        for (b, a) in before.iter().zip(&after) {
            for (x, y) in b.iter().zip(a) {
                assert_eq!(x.to_bits(), y.to_bits(), "prior-only recovery must not move params");
            }
        }
    }

    #[test]
    fn srpo_null_control_and_zero_delta_gives_zero_objective() {
        let (flow, rm, _prompts, s) = tiny_setup();
        // Identical control bags are rejected by the type, so realize the
        // null case through bags that encode to the same embedding: with
        // prompt {a}, the bags {a}+prompt and {a,a}+prompt both average to
        // the "a" row. Collapsing delta_sigma makes both recoveries x0, so
        // every per-state objective value is (numerically) zero.
        let prompts = vec![vec![tok::A]];
        let mut cfg = quick_cfg(Method::Srpo, 8);
        cfg.delta_sigma_fraction = 0.0;
        cfg.srpo_construction = SrpoConstruction::Direct;
        cfg.control = Some(ControlWordPair::new(vec![tok::A], vec![tok::A, tok::A]).unwrap());
        let metrics = align_srpo(&flow, &rm, &cfg, &prompts, None, &s).unwrap();
        for r in &metrics.records {
            assert!(
                r.reward.abs() < 1e-12,
                "null-case per-state objective {}",
                r.reward
            );
        }
    }

    #[test]
    fn seed_determinism_numeric_identical() {
        let (flow, rm, prompts, s) = tiny_setup();
        let cfg = quick_cfg(Method::DirectAlign, 9);
        let m1 = align_direct(&flow.clone_model(), &rm, &cfg, &prompts, None, &s).unwrap();
        let m2 = align_direct(&flow.clone_model(), &rm, &cfg, &prompts, None, &s).unwrap();
        assert!(m1.numeric_eq(&m2));
        let mut other = cfg.clone();
        other.seed = 10;
        let m3 = align_direct(&flow.clone_model(), &rm, &other, &prompts, None, &s).unwrap();
        assert!(!m1.numeric_eq(&m3));
    }

    #[test]
    fn draft_one_equals_refl_at_final_grid_step() {
        let (flow, rm, prompts, s) = tiny_setup();
        // Frozen model comparison: compute both losses by hand from the
        // same start state and check they agree to machine precision.
        let prompt = &prompts[0];
        let c = flow.condition(prompt).unwrap();
        let conditioned = flow.conditioned(&c);
        let steps = 6;
        let x_start = draw_start_state(&mut rng::stream(1234, 700), flow.image_shape()).unwrap();

        let mut tape_draft = Tape::new();
        let final_img = sampler_rollout_opts(
            &mut tape_draft,
            &conditioned,
            &x_start,
            steps,
            1,
            &s,
            gen_opts(),
        )
        .unwrap();
        let r_draft = base_reward(&mut tape_draft, &rm, &final_img, prompt).unwrap();

        let j = steps - 1;
        let grid = sampler_grid(steps, &s);
        let xt = rollout_to_index(&conditioned, &x_start, steps, j, &s).unwrap();
        let mut tape_refl = Tape::new();
        let eps_hat = flow.eps(&mut tape_refl, &xt, grid[j], &c).unwrap();
        let x0_hat = predict_x0(&mut tape_refl, &xt, &eps_hat, grid[j], &s).unwrap();
        let r_refl = base_reward(&mut tape_refl, &rm, &x0_hat, prompt).unwrap();

        assert!(
            (r_draft.value() - r_refl.value()).abs() < 1e-9,
            "{} vs {}",
            r_draft.value(),
            r_refl.value()
        );
    }

    #[test]
    fn refl_samples_late_interval() {
        let (flow, rm, prompts, s) = tiny_setup();
        let mut cfg = quick_cfg(Method::Refl, 12);
        cfg.steps = 4;
        let metrics = align_refl(&flow, &rm, &cfg, &prompts, &s).unwrap();
        let (lo, hi) = cfg.interval_bounds(&s);
        for r in &metrics.records {
            assert!(r.t_mean >= lo && r.t_mean <= hi);
        }
    }

    #[test]
    fn direct_align_single_state_reduces_to_one_recovery() {
        let (flow, rm, prompts, s) = tiny_setup();
        let mut cfg = quick_cfg(Method::DirectAlign, 13);
        cfg.injections = 0;
        cfg.aggregation = AggregationPolicy::new(0, 0.37, 0.0).unwrap();
        cfg.steps = 2;
        // gamma is irrelevant at n = 0: weight(0) == 1 regardless.
        let metrics = align_direct(&flow, &rm, &cfg, &prompts, None, &s).unwrap();
        for r in &metrics.records {
            assert!(r.reward.is_finite());
            assert!((-1.0..=1.0).contains(&r.reward), "single-state objective is one base reward");
        }
    }

    #[test]
    fn offline_requires_dataset() {
        let (flow, rm, prompts, s) = tiny_setup();
        let mut cfg = quick_cfg(Method::DirectAlign, 14);
        cfg.offline = true;
        assert!(align_direct(&flow, &rm, &cfg, &prompts, None, &s).is_err());
        let data = gen_dataset(8, 4, 99);
        assert!(align_direct(&flow, &rm, &cfg, &prompts, Some(&data), &s).is_ok());
    }

    #[test]
    fn pretrain_flow_reduces_loss_on_two_mode_set() {
        let flow = FlowModel::new(4, 4, &[32], 12, 8, 41);
        let data = gen_dataset(16, 4, 5);
        let metrics = pretrain_flow(&flow, &data, 500, 8, 2e-3, 6).unwrap();
        let first: f64 = metrics.records[..20].iter().map(|r| r.loss).sum::<f64>() / 20.0;
        let last: f64 = metrics.records[480..].iter().map(|r| r.loss).sum::<f64>() / 20.0;
        assert!(
            last < 0.5 * first,
            "pretraining should halve the loss: {first} -> {last}"
        );
    }

    #[test]
    fn pretrain_reward_learns_pairs() {
        use crate::synthdata::{gen_image, AttributeSpec, Shape};
        // Brightness-only comparisons: the cleanest learnable signal at
        // this tiny scale. Full-attribute pairs at 16x16 are exercised by
        // the acceptance suite.
        let rm = RewardModel::new(4, 4, &[32], 12, 8, 42);
        let mut r = rng::stream(50, 0);
        let pairs: Vec<PreferencePair> = (0..200)
            .map(|i| {
                let hi = uniform(&mut r, 0.65, 0.9);
                let lo = uniform(&mut r, 0.1, 0.35);
                let bright = AttributeSpec::new(hi, 0, Shape::Disc, 0.2).unwrap();
                let dark = AttributeSpec::new(lo, 0, Shape::Disc, 0.2).unwrap();
                PreferencePair::new(
                    gen_image(&bright, 4, i),
                    gen_image(&dark, 4, i + 1000),
                    vec![tok::A, tok::BRIGHT],
                )
                .unwrap()
            })
            .collect();
        let metrics = pretrain_reward(&rm, &pairs, 6, 8, 2e-3, 51).unwrap();
        let last_acc = metrics.records.last().unwrap().reward;
        assert!(last_acc > 0.9, "brightness pairs should be separable: {last_acc}");
    }

    #[test]
    fn eval_generation_is_deterministic() {
        let (flow, rm, prompts, s) = tiny_setup();
        let probe = ControlWordPair::new(vec![tok::PHOTO], vec![tok::RENDER]).unwrap();
        let a = eval_generation(&flow, Some(&rm), Some(&probe), &prompts, 6, 3, &s).unwrap();
        let b = eval_generation(&flow, Some(&rm), Some(&probe), &prompts, 6, 3, &s).unwrap();
        assert_eq!(a.brightness.to_bits(), b.brightness.to_bits());
        assert_eq!(a.sgp_probe.to_bits(), b.sgp_probe.to_bits());
    }

    #[test]
    fn unimodal_alignment_runs() {
        let (flow, _rm, prompts, s) = tiny_setup();
        let mut cfg = quick_cfg(Method::DirectAlign, 15);
        cfg.steps = 2;
        let scorer = crate::rewards::saturation_scorer;
        let m = align_unimodal(&flow, &scorer, true, 0.1, &cfg, &prompts, &s).unwrap();
        assert_eq!(m.records.len(), 2);
    }
}
