//! The two learnable networks: a conditioned noise-prediction MLP for the
//! generator and a dual-encoder (image MLP + token-embedding table) reward
//! model, plus their pretraining losses.
//!
//! Images are rank-2 `[h, w]` tensors in [0, 1]; condition embeddings are
//! unit vectors. The flow trunk consumes `flattened image (+) time
//! features (+) condition vector` by concatenation.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::diffusion::{add_noise, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng::{self, randn_vec, uniform};
use crate::tensor::{Tape, Tensor};
use crate::trainers::PreferencePair;

/// d-dimensional unit vector produced from a token bag.
#[derive(Clone)]
pub struct ConditionEmbedding {
    pub vector: Tensor,
    pub source_tokens: Vec<usize>,
}

pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (in_dim as f64).sqrt();
        let w: Vec<f64> = randn_vec(rng, in_dim * out_dim)
            .into_iter()
            .map(|v| v * scale)
            .collect();
        Linear {
            w: Tensor::param(vec![out_dim, in_dim], w).expect("finite init"),
            b: Tensor::param(vec![out_dim], vec![0.0; out_dim]).expect("finite init"),
        }
    }

    fn zeroed(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            w: Tensor::param(vec![out_dim, in_dim], vec![0.0; in_dim * out_dim]).unwrap(),
            b: Tensor::param(vec![out_dim], vec![0.0; out_dim]).unwrap(),
        }
    }

    fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let in_dim = self.w.shape()[1];
        let out_dim = self.w.shape()[0];
        let col = tape.reshape(x, vec![in_dim, 1])?;
        let prod = tape.matmul(&self.w, &col)?;
        let flat = tape.reshape(&prod, vec![out_dim])?;
        tape.add(&flat, &self.b)
    }
}

/// MLP with tanh hidden activations and a linear head.
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    fn new(dims: &[usize], rng: &mut ChaCha8Rng, zero_final: bool) -> Self {
        let mut layers = Vec::new();
        for i in 0..dims.len() - 1 {
            let last = i == dims.len() - 2;
            layers.push(if last && zero_final {
                Linear::zeroed(dims[i], dims[i + 1])
            } else {
                Linear::new(dims[i], dims[i + 1], rng)
            });
        }
        Mlp { layers }
    }

    fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, &h)?;
            if i + 1 < self.layers.len() {
                h = tape.tanh(&h)?;
            }
        }
        Ok(h)
    }

    fn parameters(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [l.w.clone(), l.b.clone()])
            .collect()
    }
}

pub const TIME_FREQUENCIES: usize = 8;

/// Sinusoidal time features: sin/cos at 8 dyadic frequencies.
pub fn time_features(t: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * TIME_FREQUENCIES);
    for k in 0..TIME_FREQUENCIES {
        let freq = (1u64 << k) as f64 * std::f64::consts::PI;
        out.push((freq * t).sin());
        out.push((freq * t).cos());
    }
    out
}

/// Pixel prior used by the flow model's analytic skip path.
pub const PRIOR_MEAN: f64 = 0.5;
pub const PRIOR_VAR: f64 = 0.08;

/// Noise-prediction network `eps(x, t, c)` with a fixed token table for
/// the condition branch.
///
/// The prediction is `trunk(features) + g * m(t) * x + h * u(t)`, where
/// `m`/`u` are the Gaussian-posterior coefficients for a pixel prior
/// `N(PRIOR_MEAN, PRIOR_VAR)` and `g`, `h` are learnable scalar gains
/// initialized at zero. Without the analytic path, plain eps-prediction
/// is ill-conditioned near t = 1: the sampler's clean estimate divides by
/// alpha, so even small prediction error explodes the first step. The
/// gains train to ~1 within a few optimizer steps and keep the rollout
/// state in distribution.
pub struct FlowModel {
    pub trunk: Mlp,
    /// Non-trainable token embeddings used only to form condition vectors.
    pub cond_table: Tensor,
    /// Gain on the posterior x-proportional term, scalar, init 0.
    pub skip_gain: Tensor,
    /// Gain on the posterior mean offset term, scalar, init 0.
    pub mean_gain: Tensor,
    pub img_h: usize,
    pub img_w: usize,
    pub cond_dim: usize,
}

impl FlowModel {
    /// Fresh model with a zero-initialized final layer and zero skip
    /// gains, so an untrained model predicts exactly zero noise.
    pub fn new(
        img_h: usize,
        img_w: usize,
        hidden: &[usize],
        vocab: usize,
        cond_dim: usize,
        seed: u64,
    ) -> Self {
        let mut r = rng::stream(seed, 100);
        let in_dim = img_h * img_w + 2 * TIME_FREQUENCIES + cond_dim;
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden);
        dims.push(img_h * img_w);
        let trunk = Mlp::new(&dims, &mut r, true);
        let table = randn_vec(&mut r, vocab * cond_dim);
        FlowModel {
            trunk,
            cond_table: Tensor::new(vec![vocab, cond_dim], table).unwrap(),
            skip_gain: Tensor::param(vec![1], vec![0.0]).unwrap(),
            mean_gain: Tensor::param(vec![1], vec![0.0]).unwrap(),
            img_h,
            img_w,
            cond_dim,
        }
    }

    /// Posterior coefficients (m, u) so that `m * x + u` is the optimal
    /// blind noise estimate under the pixel prior.
    pub fn posterior_coefficients(t: f64) -> (f64, f64) {
        let (alpha, sigma) = (1.0 - t, t);
        let denom = alpha * alpha * PRIOR_VAR + sigma * sigma;
        if denom < 1e-12 {
            return (0.0, 0.0);
        }
        (
            sigma / denom,
            -alpha * sigma * PRIOR_MEAN / denom,
        )
    }

    pub fn image_shape(&self) -> Vec<usize> {
        vec![self.img_h, self.img_w]
    }

    /// Condition vector for a token bag: mean of fixed table rows,
    /// L2-normalized. Pure data, never on a tape.
    pub fn condition(&self, tokens: &[usize]) -> Result<ConditionEmbedding> {
        if tokens.is_empty() {
            return Err(Error::EmptyTokenList);
        }
        let mut scratch = Tape::new();
        let mean = scratch.embed_mean(&self.cond_table, tokens)?;
        let vector = scratch.l2_normalize(&mean)?.detach();
        Ok(ConditionEmbedding {
            vector,
            source_tokens: tokens.to_vec(),
        })
    }

    /// Predicted noise, same shape as `x`.
    pub fn eps(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        t: f64,
        c: &ConditionEmbedding,
    ) -> Result<Tensor> {
        if x.shape() != self.image_shape() {
            return Err(Error::ShapeMismatch {
                left: x.shape(),
                right: self.image_shape(),
            });
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TimestepOutOfRange { t, lo: 0.0, hi: 1.0 });
        }
        let n = self.img_h * self.img_w;
        let flat = tape.reshape(x, vec![n])?;
        let tf = Tensor::new(vec![2 * TIME_FREQUENCIES], time_features(t))?;
        let features = tape.concat(&[&flat, &tf, &c.vector])?;
        let out = self.trunk.forward(tape, &features)?;
        let (m, u) = Self::posterior_coefficients(t);
        let skip = tape.scale(&self.skip_gain, m)?;
        let skip = tape.mul(&flat, &skip)?;
        let offset = tape.scale(&self.mean_gain, u)?;
        let out = tape.add(&out, &skip)?;
        let out = tape.add(&out, &offset)?;
        tape.reshape(&out, self.image_shape())
    }

    /// Bind a condition so the model satisfies [`NoisePredictor`].
    pub fn conditioned<'a>(&'a self, c: &'a ConditionEmbedding) -> ConditionedFlow<'a> {
        ConditionedFlow { model: self, c }
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        let mut p = self.trunk.parameters();
        p.push(self.skip_gain.clone());
        p.push(self.mean_gain.clone());
        p
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.trunk.layers.iter().enumerate() {
            out.push((format!("flow.trunk.{i}.w"), layer.w.clone()));
            out.push((format!("flow.trunk.{i}.b"), layer.b.clone()));
        }
        out.push(("flow.skip_gain".to_string(), self.skip_gain.clone()));
        out.push(("flow.mean_gain".to_string(), self.mean_gain.clone()));
        out.push(("flow.cond_table".to_string(), self.cond_table.clone()));
        out.push((
            "flow.meta".to_string(),
            Tensor::new(
                vec![3],
                vec![self.img_h as f64, self.img_w as f64, self.cond_dim as f64],
            )
            .unwrap(),
        ));
        out
    }

    pub fn from_named(table: &BTreeMap<String, Tensor>) -> Result<Self> {
        let meta = named(table, "flow.meta")?.to_vec();
        if meta.len() != 3 {
            return Err(Error::Config("flow.meta must have 3 entries".into()));
        }
        let (img_h, img_w, cond_dim) = (meta[0] as usize, meta[1] as usize, meta[2] as usize);
        let mut layers = Vec::new();
        let mut i = 0;
        while table.contains_key(&format!("flow.trunk.{i}.w")) {
            layers.push(Linear {
                w: as_param(named(table, &format!("flow.trunk.{i}.w"))?),
                b: as_param(named(table, &format!("flow.trunk.{i}.b"))?),
            });
            i += 1;
        }
        if layers.is_empty() {
            return Err(Error::Config("checkpoint has no flow trunk layers".into()));
        }
        Ok(FlowModel {
            trunk: Mlp { layers },
            cond_table: named(table, "flow.cond_table")?.detach(),
            skip_gain: as_param(named(table, "flow.skip_gain")?),
            mean_gain: as_param(named(table, "flow.mean_gain")?),
            img_h,
            img_w,
            cond_dim,
        })
    }

    /// Deep copy with fresh parameter storage.
    pub fn clone_model(&self) -> Self {
        let map: BTreeMap<String, Tensor> = self
            .named_parameters()
            .into_iter()
            .map(|(k, v)| (k, v.detach()))
            .collect();
        Self::from_named(&map).expect("self-roundtrip")
    }
}

pub struct ConditionedFlow<'a> {
    model: &'a FlowModel,
    c: &'a ConditionEmbedding,
}

impl NoisePredictor for ConditionedFlow<'_> {
    fn predict(&self, tape: &mut Tape, x: &Tensor, t: f64) -> Result<Tensor> {
        self.model.eps(tape, x, t, self.c)
    }
}

fn named(table: &BTreeMap<String, Tensor>, key: &str) -> Result<Tensor> {
    table
        .get(key)
        .cloned()
        .ok_or_else(|| Error::Config(format!("checkpoint missing tensor '{key}'")))
}

fn as_param(t: Tensor) -> Tensor {
    let p = t.detach();
    p.set_requires_grad(true);
    p
}

/// Dual-encoder reward model: image MLP to a unit vector, token-embedding
/// table for the text branch.
pub struct RewardModel {
    pub img_encoder: Mlp,
    pub token_table: Tensor,
    pub dim: usize,
    pub img_h: usize,
    pub img_w: usize,
}

impl RewardModel {
    pub fn new(
        img_h: usize,
        img_w: usize,
        hidden: &[usize],
        vocab: usize,
        dim: usize,
        seed: u64,
    ) -> Self {
        let mut r = rng::stream(seed, 200);
        let mut dims = vec![img_h * img_w];
        dims.extend_from_slice(hidden);
        dims.push(dim);
        let img_encoder = Mlp::new(&dims, &mut r, false);
        let scale = 1.0 / (dim as f64).sqrt();
        let table: Vec<f64> = randn_vec(&mut r, vocab * dim)
            .into_iter()
            .map(|v| v * scale)
            .collect();
        RewardModel {
            img_encoder,
            token_table: Tensor::param(vec![vocab, dim], table).unwrap(),
            dim,
            img_h,
            img_w,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.token_table.shape()[0]
    }

    /// Unit-norm image embedding, differentiable w.r.t. the image and the
    /// encoder weights.
    pub fn img_encode(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        if x.shape() != vec![self.img_h, self.img_w] {
            return Err(Error::ShapeMismatch {
                left: x.shape(),
                right: vec![self.img_h, self.img_w],
            });
        }
        let flat = tape.reshape(x, vec![self.img_h * self.img_w])?;
        let raw = self.img_encoder.forward(tape, &flat)?;
        tape.l2_normalize(&raw)
    }

    /// Bag-of-tokens text embedding: mean of table rows, L2-normalized.
    pub fn txt_encode(&self, tape: &mut Tape, tokens: &[usize]) -> Result<ConditionEmbedding> {
        if tokens.is_empty() {
            return Err(Error::EmptyTokenList);
        }
        let mean = tape.embed_mean(&self.token_table, tokens)?;
        let vector = tape.l2_normalize(&mean)?;
        Ok(ConditionEmbedding {
            vector,
            source_tokens: tokens.to_vec(),
        })
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        let mut p = self.img_encoder.parameters();
        p.push(self.token_table.clone());
        p
    }

    pub fn set_trainable(&self, flag: bool) {
        for p in self.parameters() {
            p.set_requires_grad(flag);
        }
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.img_encoder.layers.iter().enumerate() {
            out.push((format!("reward.img.{i}.w"), layer.w.clone()));
            out.push((format!("reward.img.{i}.b"), layer.b.clone()));
        }
        out.push(("reward.token_table".to_string(), self.token_table.clone()));
        out.push((
            "reward.meta".to_string(),
            Tensor::new(vec![2], vec![self.img_h as f64, self.img_w as f64]).unwrap(),
        ));
        out
    }

    pub fn from_named(table: &BTreeMap<String, Tensor>) -> Result<Self> {
        let meta = named(table, "reward.meta")?.to_vec();
        if meta.len() != 2 {
            return Err(Error::Config("reward.meta must have 2 entries".into()));
        }
        let mut layers = Vec::new();
        let mut i = 0;
        while table.contains_key(&format!("reward.img.{i}.w")) {
            layers.push(Linear {
                w: as_param(named(table, &format!("reward.img.{i}.w"))?),
                b: as_param(named(table, &format!("reward.img.{i}.b"))?),
            });
            i += 1;
        }
        if layers.is_empty() {
            return Err(Error::Config(
                "checkpoint has no reward encoder layers".into(),
            ));
        }
        let token_table = as_param(named(table, "reward.token_table")?);
        let dim = token_table.shape()[1];
        Ok(RewardModel {
            img_encoder: Mlp { layers },
            token_table,
            dim,
            img_h: meta[0] as usize,
            img_w: meta[1] as usize,
        })
    }
}

/// Deterministic per-item draws for the flow-matching pretraining loss.
pub fn pretrain_draws(
    seed: u64,
    round: u64,
    count: usize,
    n: usize,
    s: &NoiseSchedule,
) -> Vec<(f64, Vec<f64>)> {
    let mut r = rng::stream(seed, 300 + round);
    (0..count)
        .map(|_| {
            let t = uniform(&mut r, s.t_min, s.t_max);
            (t, randn_vec(&mut r, n))
        })
        .collect()
}

/// Mean over the batch of the squared noise-prediction residual, using a
/// caller-supplied predictor. `round` separates the random draws of
/// successive optimization steps.
pub fn flow_matching_loss_with<P>(
    tape: &mut Tape,
    predictor: P,
    batch: &[(Tensor, Vec<usize>)],
    s: &NoiseSchedule,
    seed: u64,
    round: u64,
) -> Result<Tensor>
where
    P: Fn(&mut Tape, &Tensor, f64, &[usize]) -> Result<Tensor>,
{
    if batch.is_empty() {
        return Err(Error::EmptyBatch {
            op: "flow_matching_loss",
        });
    }
    let n = batch[0].0.len();
    let draws = pretrain_draws(seed, round, batch.len(), n, s);
    let mut total: Option<Tensor> = None;
    for ((x0, tokens), (t, eps)) in batch.iter().zip(draws) {
        let eps = Tensor::new(x0.shape(), eps)?;
        let ns = add_noise(x0, &eps, t, s)?;
        let eps_hat = predictor(tape, &ns.xt, t, tokens)?;
        let resid = tape.sub(&eps_hat, &ns.eps_gt)?;
        let sq = tape.l2norm_sq(&resid)?;
        total = Some(match total {
            Some(acc) => tape.add(&acc, &sq)?,
            None => sq,
        });
    }
    tape.scale(&total.unwrap(), 1.0 / batch.len() as f64)
}

/// Standard noise-matching pretraining objective for the flow model.
pub fn flow_pretrain_loss(
    tape: &mut Tape,
    model: &FlowModel,
    batch: &[(Tensor, Vec<usize>)],
    s: &NoiseSchedule,
    seed: u64,
    round: u64,
) -> Result<Tensor> {
    flow_matching_loss_with(
        tape,
        |tape, xt, t, tokens| {
            let c = model.condition(tokens)?;
            model.eps(tape, xt, t, &c)
        },
        batch,
        s,
        seed,
        round,
    )
}

/// -log sigmoid(r_winner - r_loser) from two scalar rewards.
pub fn bt_loss_from_rewards(tape: &mut Tape, r_winner: &Tensor, r_loser: &Tensor) -> Result<Tensor> {
    let margin = tape.sub(r_winner, r_loser)?;
    let neg = tape.scale(&margin, -1.0)?;
    tape.softplus(&neg)
}

/// Bradley-Terry loss of a preference pair under the dual-encoder reward.
pub fn reward_bt_loss(tape: &mut Tape, rm: &RewardModel, pair: &PreferencePair) -> Result<Tensor> {
    let c = rm.txt_encode(tape, &pair.prompt)?;
    let fw = rm.img_encode(tape, &pair.winner)?;
    let fl = rm.img_encode(tape, &pair.loser)?;
    let rw = tape.dot(&fw, &c.vector)?;
    let rl = tape.dot(&fl, &c.vector)?;
    bt_loss_from_rewards(tape, &rw, &rl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::bit_identical;

    fn small_flow() -> FlowModel {
        FlowModel::new(4, 4, &[32], 6, 8, 9)
    }

    fn small_reward() -> RewardModel {
        RewardModel::new(4, 4, &[32], 6, 8, 10)
    }

    fn rand_image(seed: u64, h: usize, w: usize) -> Tensor {
        let v = randn_vec(&mut rng::stream(seed, 7), h * w);
        Tensor::new(vec![h, w], v.iter().map(|x| 0.5 + 0.2 * x).collect()).unwrap()
    }

    #[test]
    fn zero_final_layer_predicts_zero() {
        let m = small_flow();
        let c = m.condition(&[0, 1]).unwrap();
        let x = rand_image(1, 4, 4);
        let mut tape = Tape::new();
        let e = m.eps(&mut tape, &x, 0.4, &c).unwrap();
        assert!(e.to_vec().iter().all(|&v| v == 0.0));
        assert_eq!(e.shape(), vec![4, 4]);
    }

    #[test]
    fn flow_eps_deterministic() {
        let m = small_flow();
        let c = m.condition(&[2]).unwrap();
        let x = rand_image(2, 4, 4);
        let mut t1 = Tape::new();
        let a = m.eps(&mut t1, &x, 0.3, &c).unwrap();
        let mut t2 = Tape::new();
        let b = m.eps(&mut t2, &x, 0.3, &c).unwrap();
        assert!(bit_identical(&a, &b));
    }

    #[test]
    fn flow_eps_shape_mismatch() {
        let m = small_flow();
        let c = m.condition(&[0]).unwrap();
        let x = Tensor::new(vec![3, 3], vec![0.0; 9]).unwrap();
        let mut tape = Tape::new();
        assert!(matches!(
            m.eps(&mut tape, &x, 0.3, &c),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn trunk_gradient_matches_finite_differences() {
        // Pretrained-style path: perturb one weight tensor, compare the
        // autodiff gradient of mean(eps) against central differences.
        let m = FlowModel::new(4, 4, &[16], 6, 8, 11);
        // Make the head nonzero so the loss depends on every layer.
        let head = &m.trunk.layers.last().unwrap().w;
        let head_init: Vec<f64> = randn_vec(&mut rng::stream(12, 0), head.len())
            .iter()
            .map(|v| 0.1 * v)
            .collect();
        head.set_data(head_init).unwrap();

        let c = m.condition(&[1, 3]).unwrap();
        let x = rand_image(3, 4, 4);
        let forward = |m: &FlowModel| {
            let mut tape = Tape::new();
            let e = m.eps(&mut tape, &x, 0.6, &c).unwrap();
            let loss = tape.mean(&e).unwrap();
            (tape, loss)
        };

        let (mut tape, loss) = forward(&m);
        tape.backward(&loss).unwrap();

        for target in [&m.trunk.layers[0].w, &m.trunk.layers[0].b] {
            let auto = target.grad().unwrap();
            let base = target.to_vec();
            let h = 1e-5;
            for i in (0..base.len()).step_by(base.len() / 7 + 1) {
                let mut plus = base.clone();
                plus[i] += h;
                target.set_data(plus).unwrap();
                let fp = forward(&m).1.value();
                let mut minus = base.clone();
                minus[i] -= h;
                target.set_data(minus).unwrap();
                let fm = forward(&m).1.value();
                target.set_data(base.clone()).unwrap();
                let central = (fp - fm) / (2.0 * h);
                let err = (auto[i] - central).abs() / central.abs().max(1.0);
                assert!(err < 1e-4, "coord {i}: {} vs {central}", auto[i]);
            }
            target.zero_grad();
        }
    }

    #[test]
    fn txt_encode_bag_semantics() {
        let rm = small_reward();
        let mut tape = Tape::new();
        let single = rm.txt_encode(&mut tape, &[3]).unwrap();
        let row = rm.token_table.to_vec()[3 * rm.dim..4 * rm.dim].to_vec();
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, b) in single.vector.to_vec().iter().zip(&row) {
            assert!((a - b / norm).abs() < 1e-12);
        }

        let ab = rm.txt_encode(&mut tape, &[1, 4]).unwrap();
        let ba = rm.txt_encode(&mut tape, &[4, 1]).unwrap();
        for (x, y) in ab.vector.to_vec().iter().zip(ba.vector.to_vec()) {
            assert_eq!(*x, y);
        }

        // Prepending a control token means the bag mean runs over all rows.
        let with_control = rm.txt_encode(&mut tape, &[0, 1, 4, 5]).unwrap();
        let table = rm.token_table.to_vec();
        let mut mean = vec![0.0; rm.dim];
        for &id in &[0usize, 1, 4, 5] {
            for (m, v) in mean.iter_mut().zip(&table[id * rm.dim..(id + 1) * rm.dim]) {
                *m += v / 4.0;
            }
        }
        let n: f64 = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, b) in with_control.vector.to_vec().iter().zip(&mean) {
            assert!((a - b / n).abs() < 1e-12);
        }

        assert!(matches!(
            rm.txt_encode(&mut tape, &[]),
            Err(Error::EmptyTokenList)
        ));
        assert!(matches!(
            rm.txt_encode(&mut tape, &[99]),
            Err(Error::UnknownToken { .. })
        ));
    }

    #[test]
    fn img_encode_unit_norm_and_distinct() {
        let rm = small_reward();
        let mut tape = Tape::new();
        for seed in 0..100u64 {
            let x = rand_image(seed, 4, 4);
            let e = rm.img_encode(&mut tape, &x).unwrap();
            let norm: f64 = e.to_vec().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
        for seed in 0..100u64 {
            let a = rm
                .img_encode(&mut tape, &rand_image(2 * seed + 1000, 4, 4))
                .unwrap();
            let b = rm
                .img_encode(&mut tape, &rand_image(2 * seed + 1001, 4, 4))
                .unwrap();
            let cos: f64 = a
                .to_vec()
                .iter()
                .zip(b.to_vec().iter())
                .map(|(x, y)| x * y)
                .sum();
            assert!(cos < 1.0 - 1e-6, "seed {seed}: cosine {cos}");
        }
    }

    #[test]
    fn img_encode_gradient_wrt_image() {
        let rm = small_reward();
        let x = rand_image(5, 4, 4);
        let probe = Tensor::new(vec![rm.dim], randn_vec(&mut rng::stream(6, 0), rm.dim)).unwrap();
        let err = crate::tensor::grad_check(
            |tape, x| {
                let e = rm.img_encode(tape, x)?;
                tape.dot(&e, &probe)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "img_encode grad error {err}");
    }

    #[test]
    fn pretrain_loss_oracle_is_zero() {
        let s = NoiseSchedule::default();
        let batch: Vec<(Tensor, Vec<usize>)> = (0..3)
            .map(|i| (rand_image(i, 4, 4), vec![0usize]))
            .collect();
        let draws = pretrain_draws(21, 0, batch.len(), 16, &s);
        let queue = std::cell::RefCell::new(std::collections::VecDeque::from(draws));
        let mut tape = Tape::new();
        let loss = flow_matching_loss_with(
            &mut tape,
            |_tape, _xt, _t, _tokens| {
                let (_, eps) = queue.borrow_mut().pop_front().unwrap();
                Tensor::new(vec![4, 4], eps)
            },
            &batch,
            &s,
            21,
            0,
        )
        .unwrap();
        assert!(loss.value().abs() < 1e-18, "oracle loss {}", loss.value());
    }

    #[test]
    fn pretrain_loss_zero_model_near_dimension() {
        let s = NoiseSchedule::default();
        let m = small_flow();
        let batch: Vec<(Tensor, Vec<usize>)> = (0..1000)
            .map(|i| (rand_image(i, 4, 4), vec![(i % 6) as usize]))
            .collect();
        let mut tape = Tape::new();
        let loss = flow_pretrain_loss(&mut tape, &m, &batch, &s, 22, 0).unwrap();
        let v = loss.value();
        assert!(
            (v - 16.0).abs() / 16.0 < 0.05,
            "zero-model loss {v} should be near 16"
        );
    }

    #[test]
    fn pretrain_loss_rejects_empty_batch() {
        let s = NoiseSchedule::default();
        let m = small_flow();
        let mut tape = Tape::new();
        assert!(matches!(
            flow_pretrain_loss(&mut tape, &m, &[], &s, 1, 0),
            Err(Error::EmptyBatch { .. })
        ));
    }

    #[test]
    fn bt_loss_values() {
        let mut tape = Tape::new();
        let r = Tensor::scalar(0.4);
        let equal = bt_loss_from_rewards(&mut tape, &r, &r).unwrap();
        assert!((equal.value() - std::f64::consts::LN_2).abs() < 1e-12);

        let hi = Tensor::scalar(40.0);
        let lo = Tensor::scalar(0.0);
        let separated = bt_loss_from_rewards(&mut tape, &hi, &lo).unwrap();
        assert!(separated.value() < 1e-12, "logistic limit {}", separated.value());
    }

    #[test]
    fn bt_loss_gradient_direction() {
        let rm = small_reward();
        let winner = rand_image(30, 4, 4);
        let loser = rand_image(31, 4, 4);
        let pair = PreferencePair::new(winner, loser, vec![1, 2]).unwrap();
        let mut tape = Tape::new();
        let before = reward_bt_loss(&mut tape, &rm, &pair).unwrap();
        tape.backward(&before).unwrap();
        let mut opt = crate::tensor::Optimizer::adam(rm.parameters(), 1e-2);
        opt.step().unwrap();
        let mut tape2 = Tape::new();
        let after = reward_bt_loss(&mut tape2, &rm, &pair).unwrap();
        assert!(after.value() < before.value());
    }

    #[test]
    fn checkpoint_name_roundtrip() {
        let m = small_flow();
        let map: BTreeMap<String, Tensor> = m.named_parameters().into_iter().collect();
        let restored = FlowModel::from_named(&map).unwrap();
        for ((ka, a), (kb, b)) in m
            .named_parameters()
            .iter()
            .zip(restored.named_parameters().iter())
        {
            assert_eq!(ka, kb);
            assert!(bit_identical(a, b), "tensor {ka} changed in roundtrip");
        }

        let rm = small_reward();
        let map: BTreeMap<String, Tensor> = rm.named_parameters().into_iter().collect();
        let restored = RewardModel::from_named(&map).unwrap();
        assert_eq!(restored.dim, rm.dim);
        assert_eq!(restored.vocab_size(), rm.vocab_size());
    }
}
