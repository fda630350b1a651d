//! Scratch pilot for hyperparameter tuning. Not part of the deliverable.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::time::Instant;

use flowalign::diffusion::NoiseSchedule;
use flowalign::nets::{FlowModel, RewardModel};
use flowalign::rewards::{AggregationPolicy, ControlWordPair};
use flowalign::synthdata::{self, gen_image, tok, AttributeSpec, Shape};
use flowalign::tensor::Tensor;
use flowalign::trainers::*;
use flowalign::Tape;

fn save_params(path: &str, params: &[(String, Tensor)]) {
    let mut f = std::fs::File::create(path).unwrap();
    for (name, t) in params {
        let shape = t.shape();
        f.write_all(&(name.len() as u32).to_le_bytes()).unwrap();
        f.write_all(name.as_bytes()).unwrap();
        f.write_all(&(shape.len() as u32).to_le_bytes()).unwrap();
        for d in &shape {
            f.write_all(&(*d as u32).to_le_bytes()).unwrap();
        }
        for v in t.to_vec() {
            f.write_all(&v.to_le_bytes()).unwrap();
        }
    }
}

fn load_params(path: &str) -> Option<BTreeMap<String, Tensor>> {
    let mut buf = Vec::new();
    std::fs::File::open(path).ok()?.read_to_end(&mut buf).ok()?;
    let mut map = BTreeMap::new();
    let mut pos = 0usize;
    let rd_u32 = |buf: &[u8], pos: &mut usize| {
        let v = u32::from_le_bytes(buf[*pos..*pos + 4].try_into().unwrap());
        *pos += 4;
        v as usize
    };
    while pos < buf.len() {
        let nlen = rd_u32(&buf, &mut pos);
        let name = String::from_utf8(buf[pos..pos + nlen].to_vec()).unwrap();
        pos += nlen;
        let rank = rd_u32(&buf, &mut pos);
        let mut shape = Vec::new();
        for _ in 0..rank {
            shape.push(rd_u32(&buf, &mut pos));
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(buf[pos..pos + 8].try_into().unwrap()));
            pos += 8;
        }
        map.insert(name, Tensor::new(shape, data).unwrap());
    }
    Some(map)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let stage = args.get(1).map(|s| s.as_str()).unwrap_or("all");
    let s = NoiseSchedule::default();
    // Working schedule for alignment/generation: alpha >= 0.05 everywhere.
    let sw = NoiseSchedule::new(flowalign::diffusion::ScheduleKind::RectifiedLinear, 0.001, 0.95).unwrap();
    let seed = 20250809u64;

    // ── Flow model (cached) ─────────────────────────────────────────
    let t0 = Instant::now();
    let data = synthdata::gen_dataset(512, 16, seed);
    let flow = if let Some(map) = load_params("/tmp/pilot_flow.bin") {
        println!("[pretrain-flow] loaded cache");
        FlowModel::from_named(&map).unwrap()
    } else {
        let flow = FlowModel::new(16, 16, &[256, 256], 12, 32, seed);
        let pre = pretrain_flow(&flow, &data, 8000, 16, 1e-3, seed + 1).unwrap();
        let last: f64 = pre.records[pre.records.len() - 50..]
            .iter()
            .map(|r| r.loss)
            .sum::<f64>()
            / 50.0;
        println!(
            "[pretrain-flow] steps=8000 final loss {last:.1} gains ({:.3},{:.3}) ({:.0}s)",
            flow.skip_gain.value(),
            flow.mean_gain.value(),
            t0.elapsed().as_secs_f64()
        );
        save_params("/tmp/pilot_flow.bin", &flow.named_parameters());
        flow
    };

    let mut db = (0.0, 0.0, 0.0);
    for d in data.iter().take(64) {
        let (b, e, tv) = synthdata::attribute_metrics(&d.image).unwrap();
        db.0 += b / 64.0;
        db.1 += e / 64.0;
        db.2 += tv / 64.0;
    }
    println!("[data] b {:.3} e {:.3} tv {:.3}", db.0, db.1, db.2);
    let prompts: Vec<Vec<usize>> = data.iter().take(32).map(|d| d.prompt.clone()).collect();
    let stats = eval_generation(&flow, None, None, &prompts, 25, seed + 2, &sw).unwrap();
    println!(
        "[gen] b {:.3} e {:.3} tv {:.3}",
        stats.brightness, stats.extremity, stats.total_variation
    );
    let bright: Vec<Vec<usize>> = (0..16).map(|_| vec![tok::A, tok::BRIGHT, tok::SHARP, tok::DISC]).collect();
    let dark: Vec<Vec<usize>> = (0..16).map(|_| vec![tok::A, tok::DARK, tok::SHARP, tok::DISC]).collect();
    let gb = eval_generation(&flow, None, None, &bright, 25, seed + 3, &sw).unwrap();
    let gd = eval_generation(&flow, None, None, &dark, 25, seed + 3, &sw).unwrap();
    println!("[gen-cond] bright {:.3} dark {:.3}", gb.brightness, gd.brightness);

    // ── Reward models (cached, two bias strengths) ─────────────────
    let train_reward = |bias: f64, tag: &str| -> RewardModel {
        let path = format!("/tmp/pilot_rm_{tag}.bin");
        if let Some(map) = load_params(&path) {
            println!("[reward {tag}] loaded cache");
            return RewardModel::from_named(&map).unwrap();
        }
        let t = Instant::now();
        let pairs = synthdata::gen_preference_pairs(2400, bias, seed + 4).unwrap();
        let rm = RewardModel::new(16, 16, &[256, 256], 12, 32, seed + 5);
        let m1 = pretrain_reward(&rm, &pairs, 10, 8, 2e-3, seed + 6).unwrap();
        let m2 = pretrain_reward(&rm, &pairs, 8, 8, 5e-4, seed + 7).unwrap();
        println!(
            "[reward {tag}] acc after phase1 {:.3} phase2 {:.3} ({:.0}s)",
            m1.records.last().unwrap().reward,
            m2.records.last().unwrap().reward,
            t.elapsed().as_secs_f64()
        );
        save_params(&path, &rm.named_parameters());
        rm
    };
    let rm_half = train_reward(0.5, "b05");
    let rm_full = train_reward(1.0, "b10");

    // Bias-direction diagnostic: reward delta for brightness +/- around a
    // neutral prompt (no brightness token).
    let bias_probe = |rm: &RewardModel, tag: &str| {
        let mut delta = 0.0;
        let mut n = 0.0;
        for i in 0..40u64 {
            let freq = [0u32, 2, 4, 8][(i % 4) as usize];
            let shape = if i % 2 == 0 { Shape::Disc } else { Shape::Square };
            let hi = AttributeSpec::new(0.7, freq, shape, 0.4).unwrap();
            let lo = AttributeSpec::new(0.3, freq, shape, 0.4).unwrap();
            let prompt = vec![tok::A, if freq >= 2 { tok::SHARP } else { tok::SMOOTH }];
            let mut tape = Tape::new();
            let r_hi = flowalign::rewards::base_reward(&mut tape, rm, &gen_image(&hi, 16, 40 + i), &prompt).unwrap();
            let r_lo = flowalign::rewards::base_reward(&mut tape, rm, &gen_image(&lo, 16, 80 + i), &prompt).unwrap();
            delta += r_hi.value() - r_lo.value();
            n += 1.0;
        }
        println!("[bias-probe {tag}] mean r(bright)-r(dark) = {:+.4}", delta / n);
    };
    bias_probe(&rm_half, "b05");
    bias_probe(&rm_full, "b10");

    if stage == "pretrain" {
        return;
    }

    // ── Alignment studies ───────────────────────────────────────────
    let eval_prompts: Vec<Vec<usize>> = data.iter().skip(100).take(24).map(|d| d.prompt.clone()).collect();
    let align_prompts: Vec<Vec<usize>> = data.iter().skip(200).take(64).map(|d| d.prompt.clone()).collect();
    let probe = ControlWordPair::new(vec![tok::PHOTO], vec![tok::RENDER]).unwrap();

    let run = |label: &str, rm: &RewardModel, cfg: &AlignConfig, pre: &GenStats| -> GenStats {
        let t = Instant::now();
        let f = flow.clone_model();
        align(&f, rm, cfg, &align_prompts, None, &sw).unwrap();
        let post = eval_generation(&f, Some(rm), Some(&probe), &eval_prompts, 25, seed + 7, &sw).unwrap();
        println!(
            "[{label}] drift b {:+.4} e {:+.4} tv {:+.4} | raw {:+.4} probe {:+.4} ({:.0}s)",
            post.brightness - pre.brightness,
            post.extremity - pre.extremity,
            post.total_variation - pre.total_variation,
            post.raw_reward - pre.raw_reward,
            post.sgp_probe - pre.sgp_probe,
            t.elapsed().as_secs_f64()
        );
        post
    };

    let pre_half = eval_generation(&flow, Some(&rm_half), Some(&probe), &eval_prompts, 25, seed + 7, &sw).unwrap();
    let pre_full = eval_generation(&flow, Some(&rm_full), Some(&probe), &eval_prompts, 25, seed + 7, &sw).unwrap();
    println!(
        "[pre] b {:.3} e {:.3} tv {:.3} | raw(b05) {:.3} raw(b10) {:.3}",
        pre_half.brightness, pre_half.extremity, pre_half.total_variation,
        pre_half.raw_reward, pre_full.raw_reward
    );

    if stage == "lr" {
        for lr in [2e-5f64, 5e-5, 1e-4, 2e-4] {
            let mut cfg = AlignConfig::direct_align(seed + 8);
            cfg.lr = lr;
            let t = Instant::now();
            let f = flow.clone_model();
            let m = align(&f, &rm_half, &cfg, &align_prompts, None, &sw).unwrap();
            let post = eval_generation(&f, Some(&rm_half), Some(&probe), &eval_prompts, 25, seed + 7, &sw).unwrap();
            let avg = |r: &[StepRecord]| r.iter().map(|x| x.reward).sum::<f64>() / r.len() as f64;
            println!(
                "[lr {lr}] step-reward {:.3}->{:.3} | drift b {:+.4} e {:+.4} tv {:+.4} | raw {:+.4} probe {:+.4} ({:.0}s)",
                avg(&m.records[..30]),
                avg(&m.records[270..]),
                post.brightness - pre_half.brightness,
                post.extremity - pre_half.extremity,
                post.total_variation - pre_half.total_variation,
                post.raw_reward - pre_half.raw_reward,
                post.sgp_probe - pre_half.sgp_probe,
                t.elapsed().as_secs_f64()
            );
        }
        return;
    }

    if stage == "all" || stage == "c8" {
        // Brightness-neutral prompts: the bias axis is the only coherent
        // ascent direction for brightness/extremity.
        let study_prompts: Vec<Vec<usize>> = vec![
            vec![tok::A, tok::SHARP, tok::DISC],
            vec![tok::A, tok::SHARP, tok::SQUARE],
            vec![tok::A, tok::SMOOTH, tok::DISC],
            vec![tok::A, tok::SMOOTH, tok::SQUARE],
            vec![tok::THE, tok::SHARP, tok::DISC],
            vec![tok::THE, tok::SMOOTH, tok::SQUARE],
            vec![tok::A, tok::DISC],
            vec![tok::A, tok::SQUARE],
        ];
        let pre_study = eval_generation(&flow, Some(&rm_half), Some(&probe), &study_prompts, 25, seed + 7, &sw).unwrap();
        println!("[c8-pre] b {:.3} e {:.3} tv {:.3} raw {:.3}", pre_study.brightness, pre_study.extremity, pre_study.total_variation, pre_study.raw_reward);
        let runp = |label: &str, cfg: &AlignConfig| -> GenStats {
            let t = Instant::now();
            let f = flow.clone_model();
            align(&f, &rm_half, cfg, &study_prompts, None, &sw).unwrap();
            let post = eval_generation(&f, Some(&rm_half), Some(&probe), &study_prompts, 25, seed + 7, &sw).unwrap();
            println!(
                "[{label}] drift b {:+.4} e {:+.4} tv {:+.4} | raw {:+.4} ({:.0}s)",
                post.brightness - pre_study.brightness,
                post.extremity - pre_study.extremity,
                post.total_variation - pre_study.total_variation,
                post.raw_reward - pre_study.raw_reward,
                t.elapsed().as_secs_f64()
            );
            post
        };
        for (lr, cap) in [(1e-4f64, 0.02f64), (2e-4, 0.02), (3e-4, 0.02), (2e-4, 0.01)] {
            let mut early = AlignConfig::direct_align(seed + 8);
            early.lr = lr;
            early.delta_sigma_fraction = 1.0;
            early.delta_cap_ratio = cap;
            early.interval = Interval::Early;
            early.aggregation = AggregationPolicy::new(2, 1.0, 0.0).unwrap();
            let mut late = early.clone();
            late.interval = Interval::Late;
            let e = runp(&format!("c8-early-{lr}-cap{cap}"), &early);
            let l = runp(&format!("c8-late -{lr}-cap{cap}"), &late);
            println!(
                "[c8 lr={lr} cap={cap}] extremity late/early = {:.2}",
                (l.extremity - pre_study.extremity) / (e.extremity - pre_study.extremity)
            );
        }
    }

    let study_prompts: Vec<Vec<usize>> = vec![
        vec![tok::A, tok::SHARP, tok::DISC],
        vec![tok::A, tok::SHARP, tok::SQUARE],
        vec![tok::A, tok::SMOOTH, tok::DISC],
        vec![tok::A, tok::SMOOTH, tok::SQUARE],
        vec![tok::THE, tok::SHARP, tok::DISC],
        vec![tok::THE, tok::SMOOTH, tok::SQUARE],
        vec![tok::A, tok::DISC],
        vec![tok::A, tok::SQUARE],
    ];
    let pre_study = eval_generation(&flow, Some(&rm_half), Some(&probe), &study_prompts, 25, seed + 7, &sw).unwrap();
    let pre_study_full = eval_generation(&flow, Some(&rm_full), Some(&probe), &study_prompts, 25, seed + 7, &sw).unwrap();
    let runp = |label: &str, rm: &RewardModel, cfg: &AlignConfig, pre: &GenStats| -> GenStats {
        let t = Instant::now();
        let f = flow.clone_model();
        align(&f, rm, cfg, &study_prompts, None, &sw).unwrap();
        let post = eval_generation(&f, Some(rm), Some(&probe), &study_prompts, 25, seed + 7, &sw).unwrap();
        println!(
            "[{label}] drift b {:+.4} e {:+.4} tv {:+.4} | raw {:+.4} probe {:+.4} ({:.0}s)",
            post.brightness - pre.brightness,
            post.extremity - pre.extremity,
            post.total_variation - pre.total_variation,
            post.raw_reward - pre.raw_reward,
            post.sgp_probe - pre.sgp_probe,
            t.elapsed().as_secs_f64()
        );
        post
    };

    if stage == "n0" {
        for lr in [3e-5f64, 1e-4, 3e-4] {
            let mut early = AlignConfig::direct_align(seed + 8);
            early.lr = lr;
            early.injections = 0;
            early.spacing = 0.0;
            early.aggregation = AggregationPolicy::new(0, 1.0, 0.0).unwrap();
            early.interval = Interval::Early;
            let mut late = early.clone();
            late.interval = Interval::Late;
            let e = runp(&format!("n0-early-{lr}"), &rm_half, &early, &pre_study);
            let l = runp(&format!("n0-late -{lr}"), &rm_half, &late, &pre_study);
            println!(
                "[n0 lr={lr}] extremity late/early = {:.2} (late {:+.4} early {:+.4})",
                (l.extremity - pre_study.extremity) / (e.extremity - pre_study.extremity),
                l.extremity - pre_study.extremity,
                e.extremity - pre_study.extremity,
            );
        }
        return;
    }

    if stage == "offline" {
        let offline_data = synthdata::gen_dataset(256, 16, seed + 40);
        let runo = |label: &str, rm: &RewardModel, cfg: &AlignConfig, pre: &GenStats| -> GenStats {
            let t = Instant::now();
            let f = flow.clone_model();
            align(&f, rm, cfg, &study_prompts, Some(&offline_data), &sw).unwrap();
            let post = eval_generation(&f, Some(rm), Some(&probe), &study_prompts, 25, seed + 7, &sw).unwrap();
            println!(
                "[{label}] drift b {:+.4} e {:+.4} tv {:+.4} | raw {:+.4} probe {:+.4} ({:.0}s)",
                post.brightness - pre.brightness,
                post.extremity - pre.extremity,
                post.total_variation - pre.total_variation,
                post.raw_reward - pre.raw_reward,
                post.sgp_probe - pre.sgp_probe,
                t.elapsed().as_secs_f64()
            );
            post
        };
        let base = || {
            let mut c = AlignConfig::direct_align(seed + 8);
            c.offline = true;
            c.lr = 5e-5;
            c.delta_cap_ratio = 0.3;
            c.injections = 3;
            c.spacing = 0.08;
            c.aggregation = AggregationPolicy::new(3, 0.9, 0.0).unwrap();
            c
        };
        // c8 offline pair (no discount)
        let mut early = base();
        early.interval = Interval::Early;
        early.aggregation = AggregationPolicy::new(3, 1.0, 0.0).unwrap();
        let mut late = early.clone();
        late.interval = Interval::Late;
        let e = runo("off-c8-early", &rm_half, &early, &pre_study);
        let l = runo("off-c8-late ", &rm_half, &late, &pre_study);
        println!("[off c8] ratio late/early = {:.2}",
            (l.extremity - pre_study.extremity) / (e.extremity - pre_study.extremity));
        // c9 offline pair
        let mut nd_cfg = base();
        nd_cfg.aggregation = AggregationPolicy::new(3, 1.0, 0.0).unwrap();
        let dc_cfg = base();
        let nd = runo("off-c9-g1.0", &rm_half, &nd_cfg, &pre_study);
        let dc = runo("off-c9-g0.9", &rm_half, &dc_cfg, &pre_study);
        println!("[off c9] no-disc {:+.4} vs disc {:+.4} ({})",
            nd.extremity - pre_study.extremity, dc.extremity - pre_study.extremity,
            if nd.extremity >= dc.extremity { "OK" } else { "REVERSED" });
        // c10 offline pair on full-bias
        let direct = base();
        let mut srpo_cfg = AlignConfig::srpo(probe.clone(), seed + 8);
        srpo_cfg.offline = true;
        srpo_cfg.lr = 5e-5;
        srpo_cfg.delta_cap_ratio = 0.3;
        srpo_cfg.injections = 3;
        srpo_cfg.spacing = 0.08;
        srpo_cfg.aggregation = AggregationPolicy::new(3, 0.9, 0.0).unwrap();
        let d = runo("off-c10-direct", &rm_full, &direct, &pre_study_full);
        let sp = runo("off-c10-srpo  ", &rm_full, &srpo_cfg, &pre_study_full);
        println!("[off c10] direct raw imp {:+.4} | |b| srpo {:.4} vs 0.5*direct {:.4} ({}) | probe imp {:+.4} vs 0.5*raw {:+.4} ({})",
            d.raw_reward - pre_study_full.raw_reward,
            (sp.brightness - pre_study_full.brightness).abs(),
            0.5 * (d.brightness - pre_study_full.brightness).abs(),
            if (sp.brightness - pre_study_full.brightness).abs() <= 0.5 * (d.brightness - pre_study_full.brightness).abs() { "OK" } else { "FAIL" },
            sp.sgp_probe - pre_study_full.sgp_probe,
            0.5 * (d.raw_reward - pre_study_full.raw_reward),
            if sp.sgp_probe - pre_study_full.sgp_probe >= 0.5 * (d.raw_reward - pre_study_full.raw_reward) && d.raw_reward > pre_study_full.raw_reward { "OK" } else { "CHECK" });
        return;
    }

    if stage == "c10c" {
        let rm_mid = train_reward(0.75, "b075");
        let pre_mid = eval_generation(&flow, Some(&rm_mid), Some(&probe), &study_prompts, 25, seed + 7, &sw).unwrap();
        let offline_data = synthdata::gen_dataset(256, 16, seed + 40);
        let runo = |label: &str, rm: &RewardModel, cfg: &AlignConfig, pre: &GenStats| -> GenStats {
            let t = Instant::now();
            let f = flow.clone_model();
            align(&f, rm, cfg, &study_prompts, Some(&offline_data), &sw).unwrap();
            let post = eval_generation(&f, Some(rm), Some(&probe), &study_prompts, 25, seed + 7, &sw).unwrap();
            println!(
                "[{label}] drift b {:+.4} e {:+.4} tv {:+.4} | raw {:+.4} probe {:+.4} ({:.0}s)",
                post.brightness - pre.brightness,
                post.extremity - pre.extremity,
                post.total_variation - pre.total_variation,
                post.raw_reward - pre.raw_reward,
                post.sgp_probe - pre.sgp_probe,
                t.elapsed().as_secs_f64()
            );
            post
        };
        for (tag, rm, pre, lr, steps) in [
            ("b075-1e5-600", &rm_mid, &pre_mid, 1e-5f64, 600usize),
            ("b075-2e5-300", &rm_mid, &pre_mid, 2e-5, 300),
            ("b075-2e5-600", &rm_mid, &pre_mid, 2e-5, 600),
            ("b10-1e5-600", &rm_full, &pre_study_full, 1e-5, 600),
        ] {
            let mut direct = AlignConfig::direct_align(seed + 8);
            direct.offline = true;
            direct.lr = lr;
            direct.steps = steps;
            direct.delta_cap_ratio = 0.3;
            direct.injections = 3;
            direct.spacing = 0.08;
            direct.aggregation = AggregationPolicy::new(3, 0.9, 0.0).unwrap();
            let mut srpo_cfg = AlignConfig::srpo(probe.clone(), seed + 8);
            srpo_cfg.offline = true;
            srpo_cfg.lr = lr;
            srpo_cfg.steps = steps;
            srpo_cfg.delta_cap_ratio = 0.3;
            srpo_cfg.injections = 3;
            srpo_cfg.spacing = 0.08;
            srpo_cfg.aggregation = AggregationPolicy::new(3, 0.9, 0.0).unwrap();
            let d = runo(&format!("c10c-direct-{tag}"), rm, &direct, pre);
            let sp = runo(&format!("c10c-srpo-{tag}  "), rm, &srpo_cfg, pre);
            println!("[c10c {tag}] direct raw {:+.4} | |b| srpo {:.4} vs 0.5*direct {:.4} ({}) | probe {:+.4} vs 0.5raw {:+.4} ({})",
                d.raw_reward - pre.raw_reward,
                (sp.brightness - pre.brightness).abs(),
                0.5 * (d.brightness - pre.brightness).abs(),
                if (sp.brightness - pre.brightness).abs() <= 0.5 * (d.brightness - pre.brightness).abs() { "OK" } else { "FAIL" },
                sp.sgp_probe - pre.sgp_probe,
                0.5 * (d.raw_reward - pre.raw_reward),
                if sp.sgp_probe - pre.sgp_probe >= 0.5 * (d.raw_reward - pre.raw_reward) && d.raw_reward > pre.raw_reward { "OK" } else { "CHECK" });
        }
        return;
    }

    if stage == "c10b" {
        let rm_mid = train_reward(0.75, "b075");
        let pre_mid = eval_generation(&flow, Some(&rm_mid), Some(&probe), &study_prompts, 25, seed + 7, &sw).unwrap();
        for (lr, rm, pre, tag) in [
            (1e-5f64, &rm_full, &pre_study_full, "b10-lr1e-5"),
            (2e-5, &rm_mid, &pre_mid, "b075-lr2e-5"),
            (1e-5, &rm_mid, &pre_mid, "b075-lr1e-5"),
        ] {
            let mut direct = AlignConfig::direct_align(seed + 8);
            direct.lr = lr;
            direct.delta_cap_ratio = 0.3;
            direct.injections = 3;
            direct.spacing = 0.08;
            direct.aggregation = AggregationPolicy::new(3, 0.9, 0.0).unwrap();
            let mut srpo_cfg = AlignConfig::srpo(probe.clone(), seed + 8);
            srpo_cfg.lr = lr;
            srpo_cfg.delta_cap_ratio = 0.3;
            srpo_cfg.injections = 3;
            srpo_cfg.spacing = 0.08;
            srpo_cfg.aggregation = AggregationPolicy::new(3, 0.9, 0.0).unwrap();
            let d = runp(&format!("c10b-direct-{tag}"), rm, &direct, pre);
            let sp = runp(&format!("c10b-srpo-{tag}  "), rm, &srpo_cfg, pre);
            println!("[c10b {tag}] direct raw imp {:+.4} | |b| srpo {:.4} vs 0.5*direct {:.4} ({}) | probe imp {:+.4} vs 0.5*raw {:+.4} ({})",
                d.raw_reward - pre.raw_reward,
                (sp.brightness - pre.brightness).abs(),
                0.5 * (d.brightness - pre.brightness).abs(),
                if (sp.brightness - pre.brightness).abs() <= 0.5 * (d.brightness - pre.brightness).abs() { "OK" } else { "FAIL" },
                sp.sgp_probe - pre.sgp_probe,
                0.5 * (d.raw_reward - pre.raw_reward),
                if sp.sgp_probe - pre.sgp_probe >= 0.5 * (d.raw_reward - pre.raw_reward) && d.raw_reward > pre.raw_reward { "OK" } else { "CHECK" });
        }
        return;
    }

    if stage == "lock" {
        let base = |seed_off: u64| {
            let mut c = AlignConfig::direct_align(seed + seed_off);
            c.lr = 2e-5;
            c.delta_cap_ratio = 0.3;
            c.injections = 3;
            c.spacing = 0.08;
            c.aggregation = AggregationPolicy::new(3, 0.9, 0.0).unwrap();
            c
        };
        // c8 pair (no discount per the study design)
        let mut early = base(8);
        early.interval = Interval::Early;
        early.aggregation = AggregationPolicy::new(3, 1.0, 0.0).unwrap();
        let mut late = early.clone();
        late.interval = Interval::Late;
        let e = runp("lock-c8-early", &rm_half, &early, &pre_study);
        let l = runp("lock-c8-late ", &rm_half, &late, &pre_study);
        println!("[lock c8] ratio late/early extremity = {:.2}",
            (l.extremity - pre_study.extremity) / (e.extremity - pre_study.extremity));
        // c9 pair
        let no_disc = early.clone();
        let mut no_disc = AlignConfig { interval: Interval::All, ..no_disc };
        no_disc.aggregation = AggregationPolicy::new(3, 1.0, 0.0).unwrap();
        let mut disc = no_disc.clone();
        disc.aggregation = AggregationPolicy::new(3, 0.9, 0.0).unwrap();
        let nd = runp("lock-c9-g1.0", &rm_half, &no_disc, &pre_study);
        let dc = runp("lock-c9-g0.9", &rm_half, &disc, &pre_study);
        println!("[lock c9] no-disc {:+.4} vs disc {:+.4} ({})",
            nd.extremity - pre_study.extremity, dc.extremity - pre_study.extremity,
            if nd.extremity >= dc.extremity { "OK" } else { "REVERSED" });
        // c10 pair on full-bias reward
        let direct = base(8);
        let mut srpo_cfg = AlignConfig::srpo(probe.clone(), seed + 8);
        srpo_cfg.lr = 2e-5;
        srpo_cfg.delta_cap_ratio = 0.3;
        srpo_cfg.injections = 3;
        srpo_cfg.spacing = 0.08;
        srpo_cfg.aggregation = AggregationPolicy::new(3, 0.9, 0.0).unwrap();
        let d = runp("lock-c10-direct", &rm_full, &direct, &pre_study_full);
        let sp = runp("lock-c10-srpo  ", &rm_full, &srpo_cfg, &pre_study_full);
        println!("[lock c10] |b| srpo {:.4} vs 0.5*direct {:.4} ({}) | probe imp {:+.4} vs 0.5*raw {:+.4} ({})",
            (sp.brightness - pre_study_full.brightness).abs(),
            0.5 * (d.brightness - pre_study_full.brightness).abs(),
            if (sp.brightness - pre_study_full.brightness).abs() <= 0.5 * (d.brightness - pre_study_full.brightness).abs() { "OK" } else { "FAIL" },
            sp.sgp_probe - pre_study_full.sgp_probe,
            0.5 * (d.raw_reward - pre_study_full.raw_reward),
            if sp.sgp_probe - pre_study_full.sgp_probe >= 0.5 * (d.raw_reward - pre_study_full.raw_reward) && d.raw_reward > pre_study_full.raw_reward { "OK" } else { "CHECK" });
        // c11 pair
        let uni = base(8);
        let f_raw = flow.clone_model();
        align_unimodal(&f_raw, &flowalign::rewards::saturation_scorer, false, 0.1, &uni, &study_prompts, &sw).unwrap();
        let raw_post = eval_generation(&f_raw, None, None, &study_prompts, 25, seed + 7, &sw).unwrap();
        let f_rel = flow.clone_model();
        align_unimodal(&f_rel, &flowalign::rewards::saturation_scorer, true, 0.1, &uni, &study_prompts, &sw).unwrap();
        let rel_post = eval_generation(&f_rel, None, None, &study_prompts, 25, seed + 7, &sw).unwrap();
        println!("[lock c11] raw {:+.4} vs rel {:+.4} ({})",
            raw_post.extremity - pre_study.extremity,
            rel_post.extremity - pre_study.extremity,
            if rel_post.extremity < raw_post.extremity { "OK" } else { "FAIL" });
        return;
    }

    if stage == "all" || stage == "c9" {
        for (lr, n, spacing) in [(3e-5f64, 2usize, 0.04f64), (3e-5, 3, 0.08), (1e-4, 2, 0.04)] {
            let mut no_disc = AlignConfig::direct_align(seed + 8);
            no_disc.lr = lr;
            no_disc.injections = n;
            no_disc.spacing = spacing;
            no_disc.aggregation = AggregationPolicy::new(n, 1.0, 0.0).unwrap();
            let mut disc = no_disc.clone();
            disc.aggregation = AggregationPolicy::new(n, 0.9, 0.0).unwrap();
            let nd = runp(&format!("c9-lr{lr}-n{n}-g1.0"), &rm_half, &no_disc, &pre_study);
            let dc = runp(&format!("c9-lr{lr}-n{n}-g0.9"), &rm_half, &disc, &pre_study);
            println!(
                "[c9 lr={lr} n={n}] e-drift no-disc {:+.4} vs disc {:+.4} ({})",
                nd.extremity - pre_study.extremity,
                dc.extremity - pre_study.extremity,
                if nd.extremity >= dc.extremity { "OK" } else { "REVERSED" }
            );
        }
    }

    if stage == "all" || stage == "c10" {
        for (lr, label) in [(3e-5f64, "3e-5"), (1e-4, "1e-4")] {
            let mut direct = AlignConfig::direct_align(seed + 8);
            direct.lr = lr;
            let mut srpo_cfg = AlignConfig::srpo(probe.clone(), seed + 8);
            srpo_cfg.lr = lr;
            let d = runp(&format!("c10-direct-{label}"), &rm_full, &direct, &pre_study_full);
            let sp = runp(&format!("c10-srpo-{label}  "), &rm_full, &srpo_cfg, &pre_study_full);
            let pre_full = pre_study_full;
            println!(
                "[c10 lr{label}] |b| srpo {:.4} vs direct {:.4} ({}) | probe imp {:+.4} vs 0.5*raw imp {:+.4} ({})",
                (sp.brightness - pre_full.brightness).abs(),
                (d.brightness - pre_full.brightness).abs(),
                if (sp.brightness - pre_full.brightness).abs() <= 0.5 * (d.brightness - pre_full.brightness).abs() { "OK" } else { "FAIL" },
                sp.sgp_probe - pre_full.sgp_probe,
                0.5 * (d.raw_reward - pre_full.raw_reward),
                if sp.sgp_probe - pre_full.sgp_probe >= 0.5 * (d.raw_reward - pre_full.raw_reward) { "OK" } else { "FAIL" },
            );
        }
    }

    if stage == "all" || stage == "c11" {
        for lvl in [0.05f64, 0.1, 0.2] {
            let mut uni_cfg = AlignConfig::direct_align(seed + 8);
            uni_cfg.lr = 3e-5;
            let f_raw = flow.clone_model();
            align_unimodal(&f_raw, &flowalign::rewards::saturation_scorer, false, lvl, &uni_cfg, &study_prompts, &sw).unwrap();
            let raw_post = eval_generation(&f_raw, None, None, &study_prompts, 25, seed + 7, &sw).unwrap();
            let f_rel = flow.clone_model();
            align_unimodal(&f_rel, &flowalign::rewards::saturation_scorer, true, lvl, &uni_cfg, &study_prompts, &sw).unwrap();
            let rel_post = eval_generation(&f_rel, None, None, &study_prompts, 25, seed + 7, &sw).unwrap();
            println!(
                "[c11 lvl={lvl}] e-drift raw {:+.4} vs rel {:+.4} ({})",
                raw_post.extremity - pre_study.extremity,
                rel_post.extremity - pre_study.extremity,
                if rel_post.extremity < raw_post.extremity { "OK" } else { "FAIL" }
            );
        }
    }

    println!("[total] {:.0}s", t0.elapsed().as_secs_f64());
}
