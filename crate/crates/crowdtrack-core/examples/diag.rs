use crowdtrack_core::metrics::{clear_mot, ObjectRecord};
use crowdtrack_core::refine::{refine_frame, RefineConfig};
use crowdtrack_core::sim::{generate, preset, Preset, Scene};
use crowdtrack_core::track::{AssocConfig, Tracker, TrackRecord};

fn run(scene: &Scene, refine: Option<&RefineConfig>) -> (f64, usize, usize, usize) {
    let mut tracker = Tracker::new(AssocConfig::default());
    let mut out: Vec<TrackRecord> = Vec::new();
    for (f, frame_dets) in scene.detections.iter().enumerate() {
        let dets: Vec<_> = frame_dets.iter().map(|d| d.detection.clone()).collect();
        let dets = match refine {
            Some(cfg) => refine_frame(&dets, &scene.densities[f], cfg).unwrap().0,
            None => dets,
        };
        out.extend(tracker.step(&dets).unwrap());
    }
    let hyp: Vec<ObjectRecord> = out.iter().map(|r| ObjectRecord { frame: r.frame, id: r.id, bbox: r.bbox }).collect();
    let e = clear_mot(&scene.gt, &hyp, 0.5).unwrap();
    (e.mota, e.false_positives, e.false_negatives, e.id_switches)
}

fn main() {
    let sep: usize = std::env::var("SEP").ok().and_then(|v| v.parse().ok()).unwrap_or(2);
    let gain: f64 = std::env::var("GAIN").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0);
    for jitter in [2.3f64, 2.4, 2.5, 2.6] {
        let mut cfg = preset(Preset::Crowded);
        cfg.box_jitter_std = jitter;
        cfg.occlusion_miss_gain = gain;
        if let Ok(b) = std::env::var("BASE") { cfg.occlusion_miss_base = b.parse().unwrap(); }
        let scene = generate(&cfg).unwrap();
        let (m0, fp0, fn0, ids0) = run(&scene, None);
        let rcfg = RefineConfig { min_peak_separation: sep, ..RefineConfig::default() };
        let (m1, fp1, fn1, ids1) = run(&scene, Some(&rcfg));
        let fn_red = 1.0 - fn1 as f64 / fn0 as f64;
        let fp_inc = fp1 as f64 / fp0.max(1) as f64 - 1.0;
        println!(
            "jitter {jitter}: plain MOTA {m0:.4} FP {fp0} FN {fn0} IDS {ids0} | refined MOTA {m1:.4} FP {fp1} FN {fn1} IDS {ids1} | dMOTA {:+.4} FNred {:.1}% FPinc {:+.1}%",
            m1 - m0, 100.0 * fn_red, 100.0 * fp_inc
        );
    }
}
