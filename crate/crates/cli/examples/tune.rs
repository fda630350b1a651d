//! Scratch tuning harness for the ablation study. Not part of the deliverable.

use std::path::Path;

use flowalign_cli::config::RunConfig;
use flowalign_cli::experiments::{self, run_ablation};
use flowalign_cli::checkpoint;

fn main() {
    let cfg = RunConfig::default();
    let flow_path = Path::new("/tmp/tune_flow.ckpt");
    let rm_path = Path::new("/tmp/tune_rm_strong.ckpt");
    let rm_half_path = Path::new("/tmp/tune_rm_half.ckpt");

    let flow = if flow_path.exists() {
        experiments::load_flow(flow_path).unwrap()
    } else {
        let data = experiments::generate_dataset(&cfg).unwrap();
        let (flow, _) = experiments::train_flow(&cfg, &data).unwrap();
        checkpoint::save(flow_path, &flow.named_parameters()).unwrap();
        flow
    };
    let rm_strong = if rm_path.exists() {
        experiments::load_reward(rm_path).unwrap()
    } else {
        let (rm, m) = experiments::train_reward(&cfg, 1.0, 100).unwrap();
        println!("[rm strong] acc {:.3}", m.records.last().unwrap().reward);
        checkpoint::save(rm_path, &rm.named_parameters()).unwrap();
        rm
    };
    if !rm_half_path.exists() {
        let (rm, m) = experiments::train_reward(&cfg, 0.5, 0).unwrap();
        println!("[rm half] acc {:.3}", m.records.last().unwrap().reward);
        checkpoint::save(rm_half_path, &rm.named_parameters()).unwrap();
    }

    let args: Vec<String> = std::env::args().collect();
    let lrs: Vec<f64> = if args.len() > 1 {
        args[1..].iter().map(|a| a.parse().unwrap()).collect()
    } else {
        vec![5e-6, 1e-5, 3e-5]
    };
    for lr in lrs {
        let mut c = RunConfig::default();
        c.set("ablate.lr", &format!("{lr}")).unwrap();
        let rows = run_ablation(&flow, &rm_strong, &c).unwrap();
        let srpo = rows.iter().find(|r| r.variant == "srpo_inversion").unwrap();
        let srpo_d = rows.iter().find(|r| r.variant == "srpo_direct").unwrap();
        let direct = rows.iter().find(|r| r.variant == "direct_align").unwrap();
        let drift_ok = srpo.d_brightness.abs() <= 0.5 * direct.d_brightness.abs();
        let probe_ok = srpo.probe_improvement() >= 0.5 * direct.raw_improvement();
        println!(
            "[ablate lr={lr}] direct: b {:+.4} e {:+.4} raw {:+.4} | srpo-inv: b {:+.4} e {:+.4} probe {:+.4} raw {:+.4} | srpo-dir: b {:+.4} | drift {} probe {}",
            direct.d_brightness,
            direct.d_extremity,
            direct.raw_improvement(),
            srpo.d_brightness,
            srpo.d_extremity,
            srpo.probe_improvement(),
            srpo.raw_improvement(),
            srpo_d.d_brightness,
            if drift_ok { "OK" } else { "FAIL" },
            if probe_ok { "OK" } else { "FAIL" },
        );
    }
}
