//! One scripted run with timing, stats and events:
//! `smoke [n_frames] [losses] [revisits] [seed] [c]`. `NOISE=k,sigma0` and
//! `DEFORM=amplitude` override the noise model and wall motion.

use std::time::Instant;

use atlas_slam::evaluation::{coverage, default_tolerance, multi_map_ate, map_stats};
use atlas_slam::pipeline::{build_core, run, PipelineConfig, RunEvent, RunMode};
use atlas_slam::simulator::{generate_sequence, gt_entries, Scenario};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(300);
    let losses: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0);
    let revisits: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0);
    let seed: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1);
    let mode = if args.get(5).map(|s| s == "c").unwrap_or(false) { RunMode::Concurrent } else { RunMode::Sequential };
    let mut sc = Scenario::scripted(n, losses, revisits, seed);
    let mut config = PipelineConfig::default();
    if let Some(v) = std::env::var("NOISE").ok() {
        let p: Vec<f64> = v.split(',').map(|x| x.parse().unwrap()).collect();
        config.noise = atlas_slam::optim::NoiseModel::new(p[0], p[1]).unwrap();
    }
    if let Some(v) = std::env::var("DEFORM").ok() {
        sc.sensor.deformation_amplitude = v.parse().unwrap();
    }
    eprintln!("occlusions {:?} revisits {:?}", sc.clutter.occlusions, sc.clutter.revisits);
    let seq = generate_sequence(&sc).unwrap();
    let gt = gt_entries(&seq.gt);
    let t0 = Instant::now();
    let core = build_core(config, Some(sc.camera), None).unwrap();
    let out = match run(core, seq.input_frames(), mode) { Ok(o) => o, Err(e) => panic!("{e}") };
    let dt = t0.elapsed().as_secs_f64();
    let cov = coverage(&out.log, n).unwrap();
    let ate = multi_map_ate(&out.trajectory, &gt, default_tolerance(&gt));
    let st = map_stats(&out.atlas, &out.log);
    println!("time {dt:.2}s ({:.1} fps) coverage {cov:.1}", n as f64 / dt);
    println!("{}", st.to_json().unwrap());
    if let Ok(a) = ate {
        println!("ate rms {:.4} n {} unscored {}", a.rms, a.n_associated, a.unscored_frames);
        for m in &a.per_map {
            println!("  {:?}", m);
        }
    }
    for e in &out.log.events {
        match e {
            RunEvent::Merge { .. } | RunEvent::Relocation { .. } | RunEvent::MapCreated { .. } | RunEvent::Loss { .. } => println!("{e:?}"),
        }
    }
}
