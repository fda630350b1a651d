//! Training-run direction checks for the alignment baselines at tiny
//! scale: a briefly pretrained 6x6 model plus a brightness reward, then a
//! short alignment run whose objective must improve.

use flowalign::diffusion::NoiseSchedule;
use flowalign::nets::{FlowModel, RewardModel};
use flowalign::rng::{stream, uniform};
use flowalign::synthdata::{gen_image, tok, AttributeSpec, Shape};
use flowalign::trainers::{
    align_direct, align_draft_k, align_refl, eval_generation, pretrain_flow, pretrain_reward,
    AlignConfig, PreferencePair,
};

fn fixture() -> (FlowModel, RewardModel, Vec<Vec<usize>>, NoiseSchedule) {
    let size = 6;
    let mut r = stream(90, 0);
    let data: Vec<flowalign::synthdata::DataItem> = (0..24)
        .map(|i| {
            let spec = flowalign::synthdata::random_spec(&mut r);
            flowalign::synthdata::DataItem {
                image: gen_image(&spec, size, 1000 + i),
                prompt: flowalign::synthdata::gen_prompt(&spec),
                spec,
            }
        })
        .collect();
    let flow = FlowModel::new(size, size, &[48], 12, 8, 91);
    pretrain_flow(&flow, &data, 400, 8, 2e-3, 92).unwrap();

    let rm = RewardModel::new(size, size, &[48], 12, 8, 93);
    let mut rp = stream(94, 0);
    let pairs: Vec<PreferencePair> = (0..160)
        .map(|i| {
            let hi = uniform(&mut rp, 0.6, 0.9);
            let lo = uniform(&mut rp, 0.1, 0.4);
            let freq = [0u32, 2, 4][i % 3];
            let bright = AttributeSpec::new(hi, freq, Shape::Disc, 0.3).unwrap();
            let dark = AttributeSpec::new(lo, freq, Shape::Disc, 0.3).unwrap();
            PreferencePair::new(
                gen_image(&bright, size, 2000 + i as u64),
                gen_image(&dark, size, 3000 + i as u64),
                vec![tok::A, tok::BRIGHT],
            )
            .unwrap()
        })
        .collect();
    pretrain_reward(&rm, &pairs, 5, 8, 2e-3, 95).unwrap();

    let prompts = vec![vec![tok::A, tok::BRIGHT], vec![tok::A, tok::BRIGHT, tok::DISC]];
    (flow, rm, prompts, NoiseSchedule::default())
}

#[test]
fn refl_improves_reward_and_drifts_toward_bias() {
    let (flow, rm, prompts, s) = fixture();
    let pre = eval_generation(&flow, Some(&rm), None, &prompts, 8, 96, &s).unwrap();
    let mut cfg = AlignConfig::refl(97);
    cfg.steps = 120;
    cfg.batch = 2;
    cfg.rollout_steps = 8;
    cfg.lr = 3e-4;
    let metrics = align_refl(&flow, &rm, &cfg, &prompts, &s).unwrap();
    let ma = metrics.moving_average_rewards(20);
    assert!(
        ma.last().unwrap() > ma.first().unwrap(),
        "moving-average reward should rise: {:.4} -> {:.4}",
        ma.first().unwrap(),
        ma.last().unwrap()
    );
    let post = eval_generation(&flow, Some(&rm), None, &prompts, 8, 96, &s).unwrap();
    // The reward prefers bright images, so generated brightness moves up.
    assert!(
        post.brightness > pre.brightness,
        "brightness should drift toward the reward's preference: {:.3} -> {:.3}",
        pre.brightness,
        post.brightness
    );
}

#[test]
fn draft_improves_reward_over_training() {
    let (flow, rm, prompts, s) = fixture();
    let mut cfg = AlignConfig::draft(2, 98);
    cfg.steps = 120;
    cfg.batch = 2;
    cfg.rollout_steps = 8;
    cfg.lr = 3e-4;
    let metrics = align_draft_k(&flow, &rm, &cfg, &prompts, &s).unwrap();
    let ma = metrics.moving_average_rewards(20);
    assert!(
        ma.last().unwrap() > ma.first().unwrap(),
        "draft reward should rise: {:.4} -> {:.4}",
        ma.first().unwrap(),
        ma.last().unwrap()
    );
}

#[test]
fn offline_alignment_shifts_generations_toward_dataset() {
    let (flow, rm, prompts, s) = fixture();
    // Offline photo-like dataset: sharp texture. Alignment on it should
    // raise generated total variation toward the dataset's.
    let offline = flowalign::synthdata::gen_photo_dataset(32, 6, 99);
    let pre = eval_generation(&flow, Some(&rm), None, &prompts, 8, 96, &s).unwrap();
    let offline_tv: f64 = offline
        .iter()
        .map(|d| flowalign::synthdata::attribute_metrics(&d.image).unwrap().2)
        .sum::<f64>()
        / offline.len() as f64;
    let mut cfg = AlignConfig::direct_align(100);
    cfg.offline = true;
    cfg.steps = 150;
    cfg.batch = 2;
    cfg.rollout_steps = 8;
    cfg.lr = 3e-4;
    cfg.injections = 1;
    cfg.spacing = 0.08;
    cfg.aggregation = flowalign::rewards::AggregationPolicy::new(1, 0.9, 0.0).unwrap();
    align_direct(&flow, &rm, &cfg, &prompts, Some(&offline), &s).unwrap();
    let post = eval_generation(&flow, Some(&rm), None, &prompts, 8, 96, &s).unwrap();
    let moved = (post.total_variation - offline_tv).abs() < (pre.total_variation - offline_tv).abs();
    assert!(
        moved,
        "offline training should pull generation stats toward the dataset: tv {:.3} -> {:.3} (target {:.3})",
        pre.total_variation, post.total_variation, offline_tv
    );
}
