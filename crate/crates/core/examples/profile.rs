//! Per-stage timings of a sequential run: `profile [n_frames]`.

use std::time::Instant;

use atlas_slam::pipeline::{build_core, PipelineConfig, PipelineCore};
use atlas_slam::simulator::{generate_sequence, Scenario};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(600);
    let sc = Scenario::scripted(n, 1, 1, 1);
    let t = Instant::now();
    let seq = generate_sequence(&sc).unwrap();
    println!("generate {:.2}", t.elapsed().as_secs_f64());
    let mut core = build_core(PipelineConfig::default(), Some(sc.camera), None).unwrap();
    let mut tm = [0.0f64; 7];
    for f in seq.input_frames() {
        let t = Instant::now();
        let f = PipelineCore::prepare_frame(&core.config, &core.camera, f).unwrap();
        tm[0] += t.elapsed().as_secs_f64();
        let t = Instant::now();
        let req = core.track(&f, 0);
        tm[1] += t.elapsed().as_secs_f64();
        if let Some(r) = req {
            let t = Instant::now();
            let Some(kf) = core.insert(r).unwrap() else { continue };
            tm[2] += t.elapsed().as_secs_f64();
            let t = Instant::now();
            core.fuse(kf).unwrap();
            tm[3] += t.elapsed().as_secs_f64();
            let t = Instant::now();
            core.bundle_adjust(kf, None).unwrap();
            tm[4] += t.elapsed().as_secs_f64();
            let t = Instant::now();
            core.cull(kf).unwrap();
            tm[5] += t.elapsed().as_secs_f64();
            let t = Instant::now();
            core.place_recognition(kf).unwrap();
            tm[6] += t.elapsed().as_secs_f64();
        }
    }
    println!("prepare {:.2} track {:.2} insert {:.2} fuse {:.2} ba {:.2} cull {:.2} placerec {:.2}", tm[0], tm[1], tm[2], tm[3], tm[4], tm[5], tm[6]);
}
