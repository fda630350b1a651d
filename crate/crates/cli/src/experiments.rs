//! Experiment runners behind the CLI subcommands: data generation, both
//! pretraining stages, alignment runs, the recovery-quality curve, the
//! hacking-interval study, the relative-preference ablation, and the
//! combined report with its pass/fail gates.

use std::collections::BTreeMap;
use std::path::Path;

use flowalign::diffusion::{add_noise, denoise_recover, NoiseSchedule};
use flowalign::nets::{FlowModel, RewardModel};
use flowalign::rewards::ControlWordPair;
use flowalign::rng::{randn_vec, stream};
use flowalign::synthdata::{self, tok, DataItem};
use flowalign::tensor::Tensor;
use flowalign::trainers::{
    align, eval_generation, pretrain_flow, pretrain_reward, AlignConfig, GenStats, Interval,
    Method, PreferencePair, RunMetrics,
};
use flowalign::{Error, Result, Tape};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::emit::{emit_csv, emit_svg_lineplot, fmt_f64};

/// Brightness-neutral prompts for drift studies: without a brightness
/// token, the labeler's bias axis is the only coherent brightness signal.
pub fn study_prompts() -> Vec<Vec<usize>> {
    vec![
        vec![tok::A, tok::SHARP, tok::DISC],
        vec![tok::A, tok::SHARP, tok::SQUARE],
        vec![tok::A, tok::SMOOTH, tok::DISC],
        vec![tok::A, tok::SMOOTH, tok::SQUARE],
        vec![tok::THE, tok::SHARP, tok::DISC],
        vec![tok::THE, tok::SMOOTH, tok::SQUARE],
        vec![tok::A, tok::DISC],
        vec![tok::A, tok::SQUARE],
    ]
}

pub fn realism_probe() -> ControlWordPair {
    ControlWordPair::new(vec![tok::PHOTO], vec![tok::RENDER]).expect("distinct bags")
}

fn base_study_config(cfg: &RunConfig, seed: u64) -> Result<AlignConfig> {
    let mut ac = cfg.align_config()?;
    ac.method = Method::DirectAlign;
    ac.lr = cfg.f64("study.lr")?;
    ac.steps = cfg.usize("study.steps")?;
    ac.seed = seed;
    Ok(ac)
}

// ── Data and pretraining ────────────────────────────────────────────

pub fn generate_dataset(cfg: &RunConfig) -> Result<Vec<DataItem>> {
    Ok(synthdata::gen_dataset(
        cfg.usize("data.train_count")?,
        cfg.usize("data.size")?,
        cfg.u64("data.seed")?,
    ))
}

pub fn generate_pairs(cfg: &RunConfig, bias_strength: f64) -> Result<Vec<PreferencePair>> {
    synthdata::gen_preference_pairs_sized(
        cfg.usize("data.pair_count")?,
        bias_strength,
        cfg.usize("data.size")?,
        cfg.u64("data.seed")?.wrapping_add(1),
    )
}

pub fn build_flow(cfg: &RunConfig) -> Result<FlowModel> {
    let size = cfg.usize("data.size")?;
    Ok(FlowModel::new(
        size,
        size,
        &cfg.usize_list("flow.hidden")?,
        synthdata::Vocabulary::len(),
        cfg.usize("flow.cond_dim")?,
        cfg.u64("flow.seed")?,
    ))
}

pub fn train_flow(cfg: &RunConfig, data: &[DataItem]) -> Result<(FlowModel, RunMetrics)> {
    let flow = build_flow(cfg)?;
    let metrics = pretrain_flow(
        &flow,
        data,
        cfg.usize("flow.pretrain_steps")?,
        cfg.usize("flow.batch")?,
        cfg.f64("flow.lr")?,
        cfg.u64("flow.seed")?.wrapping_add(1),
    )?;
    Ok((flow, metrics))
}

/// Two-phase Bradley-Terry training: a hot phase then a cool phase.
pub fn train_reward(
    cfg: &RunConfig,
    bias_strength: f64,
    seed_offset: u64,
) -> Result<(RewardModel, RunMetrics)> {
    let size = cfg.usize("data.size")?;
    let pairs = generate_pairs(cfg, bias_strength)?;
    let rm = RewardModel::new(
        size,
        size,
        &cfg.usize_list("reward.hidden")?,
        synthdata::Vocabulary::len(),
        cfg.usize("reward.dim")?,
        cfg.u64("reward.seed")?.wrapping_add(seed_offset),
    );
    let batch = cfg.usize("reward.batch")?;
    let seed = cfg.u64("reward.seed")?.wrapping_add(seed_offset);
    let mut metrics = pretrain_reward(
        &rm,
        &pairs,
        cfg.usize("reward.epochs_hi")?,
        batch,
        cfg.f64("reward.lr_hi")?,
        seed.wrapping_add(1),
    )?;
    let cool = pretrain_reward(
        &rm,
        &pairs,
        cfg.usize("reward.epochs_lo")?,
        batch,
        cfg.f64("reward.lr_lo")?,
        seed.wrapping_add(2),
    )?;
    let offset = metrics.records.len();
    for (i, mut rec) in cool.records.into_iter().enumerate() {
        rec.step = offset + i;
        metrics.records.push(rec);
    }
    Ok((rm, metrics))
}

// ── Recovery-quality curve ──────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct CurveRow {
    pub t: f64,
    pub fraction: f64,
    pub mse: f64,
}

/// Mean-squared recovery error of `denoise_recover` with
/// `delta_sigma = fraction * sigma(t)` over a held-out batch, for each
/// (timestep, fraction). Rows come out sorted by (t, fraction).
pub fn run_recovery_curve(
    flow: &FlowModel,
    batch: &[DataItem],
    fractions: &[f64],
    timesteps: &[f64],
    seed: u64,
    s: &NoiseSchedule,
) -> Result<Vec<CurveRow>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch {
            op: "recovery curve",
        });
    }
    let mut ts = timesteps.to_vec();
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut fs = fractions.to_vec();
    fs.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut rows = Vec::new();
    for &t in &ts {
        let (_, sigma) = s.eval(t)?;
        // One noise draw and one model prediction per image, shared by
        // every fraction: the comparison isolates the prediction weight.
        let mut states = Vec::with_capacity(batch.len());
        for (i, item) in batch.iter().enumerate() {
            let eps = Tensor::new(
                item.image.shape(),
                randn_vec(&mut stream(seed.wrapping_add(i as u64), 810), item.image.len()),
            )?;
            let ns = add_noise(&item.image, &eps, t, s)?;
            let c = flow.condition(&item.prompt)?;
            let mut tape = Tape::new();
            let eps_hat = flow.eps(&mut tape, &ns.xt, t, &c)?.detach();
            states.push((ns, eps_hat));
        }
        for &f in &fs {
            let mut mse = 0.0;
            for (ns, eps_hat) in &states {
                let mut tape = Tape::new();
                let rec = denoise_recover(&mut tape, ns, eps_hat, f * sigma, s)?;
                let err: f64 = rec
                    .to_vec()
                    .iter()
                    .zip(ns.x0.to_vec())
                    .map(|(r, x)| (r - x) * (r - x))
                    .sum();
                mse += err / ns.x0.len() as f64;
            }
            rows.push(CurveRow {
                t,
                fraction: f,
                mse: mse / batch.len() as f64,
            });
        }
    }
    Ok(rows)
}

// ── Drift studies ───────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct StudyRow {
    pub variant: String,
    pub interval: String,
    pub gamma: f64,
    pub d_brightness: f64,
    pub d_extremity: f64,
    pub d_total_variation: f64,
    pub raw_pre: f64,
    pub raw_post: f64,
    pub probe_pre: f64,
    pub probe_post: f64,
    pub seed: u64,
}

impl StudyRow {
    fn from_stats(
        variant: &str,
        interval: &str,
        gamma: f64,
        pre: &GenStats,
        post: &GenStats,
        seed: u64,
    ) -> Self {
        StudyRow {
            variant: variant.to_string(),
            interval: interval.to_string(),
            gamma,
            d_brightness: post.brightness - pre.brightness,
            d_extremity: post.extremity - pre.extremity,
            d_total_variation: post.total_variation - pre.total_variation,
            raw_pre: pre.raw_reward,
            raw_post: post.raw_reward,
            probe_pre: pre.sgp_probe,
            probe_post: post.sgp_probe,
            seed,
        }
    }

    pub fn raw_improvement(&self) -> f64 {
        self.raw_post - self.raw_pre
    }

    pub fn probe_improvement(&self) -> f64 {
        self.probe_post - self.probe_pre
    }
}

fn eval_stats(
    flow: &FlowModel,
    rm: &RewardModel,
    prompts: &[Vec<usize>],
    cfg: &RunConfig,
    s: &NoiseSchedule,
) -> Result<GenStats> {
    eval_generation(
        flow,
        Some(rm),
        Some(&realism_probe()),
        prompts,
        cfg.usize("study.eval_rollout")?,
        cfg.u64("study.eval_seed")?,
        s,
    )
}

/// Send-able parameter snapshot for cross-thread model rebuilds.
pub type RawParams = Vec<(String, Vec<usize>, Vec<f64>)>;

pub fn snapshot_params(named: &[(String, Tensor)]) -> RawParams {
    named
        .iter()
        .map(|(k, t)| (k.clone(), t.shape(), t.to_vec()))
        .collect()
}

fn rebuild(raw: &RawParams) -> Result<BTreeMap<String, Tensor>> {
    raw.iter()
        .map(|(k, shape, data)| Ok((k.clone(), Tensor::new(shape.clone(), data.clone())?)))
        .collect()
}

const HACKING_VARIANTS: [(Interval, &str, f64); 6] = [
    (Interval::Early, "early", 1.0),
    (Interval::Early, "early", 0.9),
    (Interval::All, "all", 1.0),
    (Interval::All, "all", 0.9),
    (Interval::Late, "late", 1.0),
    (Interval::Late, "late", 0.9),
];

fn run_hacking_variant(
    flow_raw: &RawParams,
    rm_raw: &RawParams,
    cfg: &RunConfig,
    interval: Interval,
    name: &str,
    gamma: f64,
    pre: &GenStats,
) -> Result<StudyRow> {
    let s = cfg.align_schedule()?;
    let prompts = study_prompts();
    let seed = cfg.u64("study.seed")?;
    let flow = FlowModel::from_named(&rebuild(flow_raw)?)?;
    let rm = RewardModel::from_named(&rebuild(rm_raw)?)?;
    let mut ac = base_study_config(cfg, seed)?;
    ac.interval = interval;
    ac.aggregation = flowalign::rewards::AggregationPolicy::new(ac.injections, gamma, 0.0)?;
    align(&flow, &rm, &ac, &prompts, None, &s)?;
    let post = eval_stats(&flow, &rm, &prompts, cfg, &s)?;
    Ok(StudyRow::from_stats("direct_align", name, gamma, pre, &post, seed))
}

/// Interval-by-discount grid of Direct-Align runs against the biased
/// reward, reporting attribute drift of fixed-seed generations.
pub fn run_hacking_study(
    flow: &FlowModel,
    rm: &RewardModel,
    cfg: &RunConfig,
) -> Result<Vec<StudyRow>> {
    run_hacking_study_jobs(flow, rm, cfg, 1)
}

/// Same grid with up to `jobs` variants running on separate threads.
/// Each variant is self-seeded and rebuilt from a parameter snapshot, so
/// results are identical to the sequential path.
pub fn run_hacking_study_jobs(
    flow: &FlowModel,
    rm: &RewardModel,
    cfg: &RunConfig,
    jobs: usize,
) -> Result<Vec<StudyRow>> {
    let s = cfg.align_schedule()?;
    let prompts = study_prompts();
    let pre = eval_stats(flow, rm, &prompts, cfg, &s)?;
    let flow_raw = snapshot_params(&flow.named_parameters());
    let rm_raw = snapshot_params(&rm.named_parameters());
    if jobs <= 1 {
        return HACKING_VARIANTS
            .iter()
            .map(|(interval, name, gamma)| {
                run_hacking_variant(&flow_raw, &rm_raw, cfg, *interval, name, *gamma, &pre)
            })
            .collect();
    }
    let mut results: Vec<Option<Result<StudyRow>>> =
        (0..HACKING_VARIANTS.len()).map(|_| None).collect();
    let indices: Vec<usize> = (0..HACKING_VARIANTS.len()).collect();
    std::thread::scope(|scope| {
        for chunk in indices.chunks(jobs.max(1)) {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&i| {
                    let (interval, name, gamma) = HACKING_VARIANTS[i];
                    let flow_raw = &flow_raw;
                    let rm_raw = &rm_raw;
                    let cfg = &cfg;
                    let pre = &pre;
                    (
                        i,
                        scope.spawn(move || {
                            run_hacking_variant(flow_raw, rm_raw, cfg, interval, name, gamma, pre)
                        }),
                    )
                })
                .collect();
            for (i, handle) in handles {
                results[i] = Some(handle.join().expect("study worker panicked"));
            }
        }
    });
    results.into_iter().map(|r| r.unwrap()).collect()
}

/// Relative-preference ablation: penalty through the inversion path,
/// direct construction of the difference, and the plain reward baseline.
pub fn run_ablation(
    flow: &FlowModel,
    rm: &RewardModel,
    cfg: &RunConfig,
) -> Result<Vec<StudyRow>> {
    let s = cfg.align_schedule()?;
    let prompts = study_prompts();
    let seed = cfg.u64("ablate.seed")?;
    let pre = eval_stats(flow, rm, &prompts, cfg, &s)?;
    let lr = cfg.f64("ablate.lr")?;
    let steps = cfg.usize("study.steps")?;

    let mut variants: Vec<(&str, AlignConfig)> = Vec::new();
    let mut srpo_inv = cfg.align_config()?;
    srpo_inv.method = Method::Srpo;
    srpo_inv.srpo_construction = flowalign::trainers::SrpoConstruction::Inversion;
    variants.push(("srpo_inversion", srpo_inv));
    let mut srpo_direct = cfg.align_config()?;
    srpo_direct.method = Method::Srpo;
    srpo_direct.srpo_construction = flowalign::trainers::SrpoConstruction::Direct;
    variants.push(("srpo_direct", srpo_direct));
    let mut plain = cfg.align_config()?;
    plain.method = Method::DirectAlign;
    variants.push(("direct_align", plain));

    let mut rows = Vec::new();
    for (name, mut ac) in variants {
        ac.lr = lr;
        ac.steps = steps;
        ac.seed = seed;
        ac.control = Some(realism_probe());
        let trained = flow.clone_model();
        align(&trained, rm, &ac, &prompts, None, &s)?;
        let post = eval_stats(&trained, rm, &prompts, cfg, &s)?;
        rows.push(StudyRow::from_stats(name, "all", ac.aggregation.gamma, &pre, &post, seed));
    }
    Ok(rows)
}

// ── Tables ──────────────────────────────────────────────────────────

pub fn curve_rows_to_csv(rows: &[CurveRow], seed: u64, hash: &str) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            vec![
                fmt_f64(r.t),
                fmt_f64(r.fraction),
                fmt_f64(r.mse),
                seed.to_string(),
                hash.to_string(),
            ]
        })
        .collect()
}

pub const CURVE_HEADER: [&str; 5] = ["t", "fraction", "mse", "seed", "config_hash"];

pub fn study_rows_to_csv(rows: &[StudyRow], hash: &str) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            vec![
                r.variant.clone(),
                r.interval.clone(),
                fmt_f64(r.gamma),
                fmt_f64(r.d_brightness),
                fmt_f64(r.d_extremity),
                fmt_f64(r.d_total_variation),
                fmt_f64(r.raw_pre),
                fmt_f64(r.raw_post),
                fmt_f64(r.probe_pre),
                fmt_f64(r.probe_post),
                r.seed.to_string(),
                hash.to_string(),
            ]
        })
        .collect()
}

pub const STUDY_HEADER: [&str; 12] = [
    "variant",
    "interval",
    "gamma",
    "d_brightness",
    "d_extremity",
    "d_total_variation",
    "raw_pre",
    "raw_post",
    "probe_pre",
    "probe_post",
    "seed",
    "config_hash",
];

pub fn metrics_to_csv(path: &Path, metrics: &RunMetrics, seed: u64, hash: &str) -> Result<()> {
    let rows: Vec<Vec<String>> = metrics
        .records
        .iter()
        .map(|r| {
            vec![
                r.step.to_string(),
                fmt_f64(r.reward),
                fmt_f64(r.brightness),
                fmt_f64(r.extremity),
                fmt_f64(r.total_variation),
                fmt_f64(r.t_mean),
                fmt_f64(r.loss),
                fmt_f64(r.wall_clock_ms),
                seed.to_string(),
                hash.to_string(),
            ]
        })
        .collect();
    emit_csv(
        path,
        &[
            "step",
            "reward",
            "brightness",
            "extremity",
            "total_variation",
            "t_mean",
            "loss",
            "wall_clock_ms",
            "seed",
            "config_hash",
        ],
        &rows,
    )
}

// ── Gates and report ────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Gate {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

pub fn curve_gates(rows: &[CurveRow]) -> Vec<Gate> {
    let at = |t: f64, f: f64| {
        rows.iter()
            .find(|r| (r.t - t).abs() < 1e-9 && (r.fraction - f).abs() < 1e-9)
            .map(|r| r.mse)
    };
    let mut gates = Vec::new();
    if let (Some(m0), Some(m025), Some(m075), Some(m1)) =
        (at(0.95, 0.0), at(0.95, 0.025), at(0.95, 0.075), at(0.95, 1.0))
    {
        gates.push(Gate {
            name: "recovery_exact_floor".into(),
            value: m0,
            threshold: 1e-18,
            pass: m0 < 1e-18,
        });
        gates.push(Gate {
            name: "recovery_ordering_low".into(),
            value: m025 - m0,
            threshold: 0.0,
            pass: m0 < m025,
        });
        gates.push(Gate {
            name: "recovery_ordering_mid".into(),
            value: m075 - m025,
            threshold: 0.0,
            pass: m025 <= m075,
        });
        gates.push(Gate {
            name: "recovery_ordering_high".into(),
            value: m1 - m075,
            threshold: 0.0,
            pass: m075 < m1,
        });
    }
    gates
}

pub fn hacking_gates(rows: &[StudyRow]) -> Vec<Gate> {
    let drift = |interval: &str, gamma: f64| {
        rows.iter()
            .find(|r| r.interval == interval && (r.gamma - gamma).abs() < 1e-9)
            .map(|r| r.d_extremity)
    };
    let mut gates = Vec::new();
    if let (Some(late), Some(early)) = (drift("late", 1.0), drift("early", 1.0)) {
        gates.push(Gate {
            name: "hacking_late_over_early".into(),
            value: late / early,
            threshold: 1.5,
            pass: late > 1.5 * early && late > 0.0,
        });
    }
    if let (Some(no_disc), Some(disc)) = (drift("all", 1.0), drift("all", 0.9)) {
        gates.push(Gate {
            name: "discount_reduces_drift".into(),
            value: no_disc - disc,
            threshold: 0.0,
            pass: no_disc >= disc,
        });
    }
    gates
}

pub fn ablation_gates(rows: &[StudyRow]) -> Vec<Gate> {
    let find = |v: &str| rows.iter().find(|r| r.variant == v);
    let mut gates = Vec::new();
    if let (Some(srpo), Some(direct)) = (find("srpo_inversion"), find("direct_align")) {
        gates.push(Gate {
            name: "srpo_brightness_drift_halved".into(),
            value: srpo.d_brightness.abs(),
            threshold: 0.5 * direct.d_brightness.abs(),
            pass: srpo.d_brightness.abs() <= 0.5 * direct.d_brightness.abs(),
        });
        gates.push(Gate {
            name: "srpo_probe_improvement".into(),
            value: srpo.probe_improvement(),
            threshold: 0.5 * direct.raw_improvement(),
            pass: srpo.probe_improvement() >= 0.5 * direct.raw_improvement(),
        });
    }
    if let (Some(srpo), Some(srpo_d), Some(direct)) =
        (find("srpo_inversion"), find("srpo_direct"), find("direct_align"))
    {
        gates.push(Gate {
            name: "both_srpo_below_plain_extremity".into(),
            value: srpo.d_extremity.max(srpo_d.d_extremity),
            threshold: direct.d_extremity,
            pass: srpo.d_extremity <= direct.d_extremity
                && srpo_d.d_extremity <= direct.d_extremity,
        });
    }
    gates
}

pub fn gates_to_csv(gates: &[Gate], hash: &str) -> Vec<Vec<String>> {
    gates
        .iter()
        .map(|g| {
            vec![
                g.name.clone(),
                fmt_f64(g.value),
                fmt_f64(g.threshold),
                if g.pass { "pass" } else { "fail" }.to_string(),
                hash.to_string(),
            ]
        })
        .collect()
}

pub const GATE_HEADER: [&str; 5] = ["gate", "value", "threshold", "status", "config_hash"];

/// Full pipeline: pretrain both models, run the three studies, write the
/// tables plus a summary with pass/fail gates. Deterministic byte-for-byte
/// under a fixed configuration.
pub fn run_report(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", out.display())))?;
    cfg.echo_to(out)?;
    let hash = cfg.hash();
    let s = cfg.schedule()?;

    let data = generate_dataset(cfg)?;
    let (flow, _) = train_flow(cfg, &data)?;
    let (rm_biased, _) = train_reward(cfg, cfg.f64("data.bias_strength")?, 0)?;
    let (rm_strong, _) = train_reward(cfg, cfg.f64("ablate.bias_strength")?, 100)?;

    let held_out: Vec<DataItem> = data
        .iter()
        .rev()
        .take(cfg.usize("curve.batch")?)
        .cloned()
        .collect();
    let curve = run_recovery_curve(
        &flow,
        &held_out,
        &cfg.f64_list("curve.fractions")?,
        &cfg.f64_list("curve.timesteps")?,
        cfg.u64("eval.seed")?,
        &s,
    )?;
    emit_csv(
        &out.join("recovery.csv"),
        &CURVE_HEADER,
        &curve_rows_to_csv(&curve, cfg.u64("eval.seed")?, &hash),
    )?;
    let series: Vec<(String, Vec<(f64, f64)>)> = cfg
        .f64_list("curve.fractions")?
        .iter()
        .map(|&f| {
            (
                format!("fraction {f}"),
                curve
                    .iter()
                    .filter(|r| (r.fraction - f).abs() < 1e-9)
                    .map(|r| (r.t, r.mse))
                    .collect(),
            )
        })
        .collect();
    emit_svg_lineplot(
        &out.join("recovery.svg"),
        "single-step recovery error",
        "t",
        "mse",
        &series,
    )?;

    let hacking = run_hacking_study(&flow, &rm_biased, cfg)?;
    emit_csv(
        &out.join("hacking.csv"),
        &STUDY_HEADER,
        &study_rows_to_csv(&hacking, &hash),
    )?;

    let ablation = run_ablation(&flow, &rm_strong, cfg)?;
    emit_csv(
        &out.join("ablation.csv"),
        &STUDY_HEADER,
        &study_rows_to_csv(&ablation, &hash),
    )?;

    let mut gates = curve_gates(&curve);
    gates.extend(hacking_gates(&hacking));
    gates.extend(ablation_gates(&ablation));
    emit_csv(&out.join("summary.csv"), &GATE_HEADER, &gates_to_csv(&gates, &hash))?;
    Ok(())
}

// ── Checkpoint helpers ──────────────────────────────────────────────

pub fn save_flow(path: &Path, flow: &FlowModel) -> Result<()> {
    checkpoint::save(path, &flow.named_parameters())
}

pub fn load_flow(path: &Path) -> Result<FlowModel> {
    FlowModel::from_named(&checkpoint::load(path)?)
}

pub fn save_reward(path: &Path, rm: &RewardModel) -> Result<()> {
    checkpoint::save(path, &rm.named_parameters())
}

pub fn load_reward(path: &Path) -> Result<RewardModel> {
    RewardModel::from_named(&checkpoint::load(path)?)
}

/// Serialize a dataset as a named tensor table.
pub fn save_dataset(path: &Path, data: &[DataItem]) -> Result<()> {
    let n = data.len();
    if n == 0 {
        return Err(Error::EmptyBatch { op: "save_dataset" });
    }
    let shape = data[0].image.shape();
    let (h, w) = (shape[0], shape[1]);
    let mut images = Vec::with_capacity(n * h * w);
    for item in data {
        images.extend(item.image.to_vec());
    }
    let max_len = data.iter().map(|d| d.prompt.len()).max().unwrap();
    let mut prompts = Vec::with_capacity(n * max_len);
    for item in data {
        for i in 0..max_len {
            prompts.push(item.prompt.get(i).map(|&t| t as f64).unwrap_or(-1.0));
        }
    }
    let mut specs = Vec::with_capacity(n * 4);
    for item in data {
        specs.push(item.spec.brightness);
        specs.push(item.spec.texture_freq as f64);
        specs.push(match item.spec.shape {
            synthdata::Shape::Disc => 0.0,
            synthdata::Shape::Square => 1.0,
        });
        specs.push(item.spec.contrast);
    }
    checkpoint::save(
        path,
        &[
            ("images".to_string(), Tensor::new(vec![n, h, w], images)?),
            (
                "prompt_tokens".to_string(),
                Tensor::new(vec![n, max_len], prompts)?,
            ),
            ("specs".to_string(), Tensor::new(vec![n, 4], specs)?),
        ],
    )
}

pub fn load_dataset(path: &Path) -> Result<Vec<DataItem>> {
    let table: BTreeMap<String, Tensor> = checkpoint::load(path)?;
    let images = table
        .get("images")
        .ok_or_else(|| Error::Config("dataset missing 'images'".into()))?;
    let prompts = table
        .get("prompt_tokens")
        .ok_or_else(|| Error::Config("dataset missing 'prompt_tokens'".into()))?;
    let specs = table
        .get("specs")
        .ok_or_else(|| Error::Config("dataset missing 'specs'".into()))?;
    let ishape = images.shape();
    let (n, h, w) = (ishape[0], ishape[1], ishape[2]);
    let max_len = prompts.shape()[1];
    let idata = images.to_vec();
    let pdata = prompts.to_vec();
    let sdata = specs.to_vec();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let image = Tensor::new(vec![h, w], idata[i * h * w..(i + 1) * h * w].to_vec())?;
        let prompt: Vec<usize> = pdata[i * max_len..(i + 1) * max_len]
            .iter()
            .filter(|v| **v >= 0.0)
            .map(|v| *v as usize)
            .collect();
        let spec = synthdata::AttributeSpec::new(
            sdata[i * 4],
            sdata[i * 4 + 1] as u32,
            if sdata[i * 4 + 2] == 0.0 {
                synthdata::Shape::Disc
            } else {
                synthdata::Shape::Square
            },
            sdata[i * 4 + 3],
        )?;
        out.push(DataItem {
            image,
            prompt,
            spec,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        for (k, v) in [
            ("data.size", "8"),
            ("data.train_count", "24"),
            ("data.pair_count", "40"),
            ("flow.hidden", "32"),
            ("flow.cond_dim", "8"),
            ("flow.pretrain_steps", "30"),
            ("reward.hidden", "32"),
            ("reward.dim", "8"),
            ("reward.epochs_hi", "1"),
            ("reward.epochs_lo", "1"),
            ("align.rollout_steps", "6"),
            ("study.steps", "2"),
            ("study.eval_rollout", "6"),
            ("curve.batch", "4"),
        ] {
            cfg.set(k, v).unwrap();
        }
        cfg
    }

    #[test]
    fn recovery_curve_rows_sorted_and_exact_at_zero() {
        let cfg = tiny_cfg();
        let data = generate_dataset(&cfg).unwrap();
        let flow = build_flow(&cfg).unwrap();
        let s = cfg.schedule().unwrap();
        let rows = run_recovery_curve(
            &flow,
            &data[..4],
            &[0.0, 0.5, 1.0],
            &[0.5, 0.95],
            3,
            &s,
        )
        .unwrap();
        assert_eq!(rows.len(), 6);
        for pair in rows.windows(2) {
            assert!(
                (pair[0].t, pair[0].fraction) <= (pair[1].t, pair[1].fraction),
                "rows must be sorted"
            );
        }
        for r in rows.iter().filter(|r| r.fraction == 0.0) {
            assert!(r.mse < 1e-18, "exact recovery row has mse {}", r.mse);
        }
        // With a zero-prediction model the error grows in the fraction.
        for t in [0.5, 0.95] {
            let group: Vec<f64> = rows.iter().filter(|r| r.t == t).map(|r| r.mse).collect();
            assert!(group[0] < group[1] && group[1] < group[2]);
        }
    }

    #[test]
    fn dataset_roundtrip() {
        let cfg = tiny_cfg();
        let data = generate_dataset(&cfg).unwrap();
        let dir = std::env::temp_dir().join(format!("fa-ds-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("data.srpk");
        save_dataset(&path, &data).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.len(), data.len());
        for (a, b) in data.iter().zip(&loaded) {
            assert!(flowalign::tensor::bit_identical(&a.image, &b.image));
            assert_eq!(a.prompt, b.prompt);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn parallel_study_matches_sequential() {
        let cfg = tiny_cfg();
        let data = generate_dataset(&cfg).unwrap();
        let (flow, _) = train_flow(&cfg, &data).unwrap();
        let (rm, _) = train_reward(&cfg, 0.5, 0).unwrap();
        let seq = run_hacking_study_jobs(&flow, &rm, &cfg, 1).unwrap();
        let par = run_hacking_study_jobs(&flow, &rm, &cfg, 3).unwrap();
        assert_eq!(seq.len(), par.len());
        for (a, b) in seq.iter().zip(&par) {
            assert_eq!(a.variant, b.variant);
            assert_eq!(a.interval, b.interval);
            assert_eq!(a.d_extremity.to_bits(), b.d_extremity.to_bits());
            assert_eq!(a.d_brightness.to_bits(), b.d_brightness.to_bits());
        }
    }

    #[test]
    fn report_is_bit_deterministic() {
        let cfg = tiny_cfg();
        let base = std::env::temp_dir().join(format!("fa-report-{}", std::process::id()));
        let out_a = base.join("a");
        let out_b = base.join("b");
        run_report(&cfg, &out_a).unwrap();
        run_report(&cfg, &out_b).unwrap();
        for name in ["recovery.csv", "hacking.csv", "ablation.csv", "summary.csv"] {
            let a = std::fs::read(out_a.join(name)).unwrap();
            let b = std::fs::read(out_b.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
        std::fs::remove_dir_all(&base).ok();
    }
}
