//! End-to-end pipeline checks on simulated scenes: noiseless perfection,
//! refinement direction-of-effect, and output well-formedness.

use crowdtrack_core::metrics::{evaluate_sequence, ObjectRecord};
use crowdtrack_core::refine::{refine_frame, RefineConfig};
use crowdtrack_core::sim::{generate, preset, Preset, Scene, SimConfig};
use crowdtrack_core::track::{AssocConfig, Tracker};

fn noiseless(mut cfg: SimConfig) -> SimConfig {
    cfg.occlusion_miss_base = 0.0;
    cfg.occlusion_miss_gain = 0.0;
    cfg.fp_rate = 0.0;
    cfg.box_jitter_std = 0.0;
    cfg.embedding_noise_std = 0.0;
    cfg
}

fn track_scene(scene: &Scene, with_density: bool) -> Vec<ObjectRecord> {
    let mut tracker = Tracker::new(AssocConfig::default());
    let refine_cfg = RefineConfig::default();
    let mut out = Vec::new();
    for (f, frame_dets) in scene.detections.iter().enumerate() {
        let dets: Vec<_> = frame_dets.iter().map(|d| d.detection.clone()).collect();
        let dets = if with_density {
            let (refined, _) = refine_frame(&dets, &scene.densities[f], &refine_cfg).unwrap();
            refined
        } else {
            dets
        };
        for r in tracker.step(&dets).unwrap() {
            out.push(ObjectRecord { frame: r.frame, id: r.id, bbox: r.bbox });
        }
    }
    out.sort_by_key(|r| (r.frame, r.id));
    out
}

#[test]
fn noiseless_scenes_track_perfectly() {
    for p in [Preset::Sparse, Preset::Crowded] {
        let cfg = noiseless(preset(p));
        let scene = generate(&cfg).unwrap();
        let hyp = track_scene(&scene, false);
        let eval = evaluate_sequence(&scene.gt, &hyp, 0.5, None).unwrap();
        assert_eq!(eval.mota, 1.0, "{p:?}: MOTA {}", eval.mota);
        assert_eq!(eval.id_switches, 0, "{p:?}");
        assert_eq!(eval.idf1, 1.0, "{p:?}: IDF1 {}", eval.idf1);
    }
}

#[test]
fn output_ids_unique_per_frame() {
    let scene = generate(&preset(Preset::Crowded)).unwrap();
    let hyp = track_scene(&scene, true);
    let mut seen = std::collections::HashSet::new();
    for r in &hyp {
        assert!(seen.insert((r.frame, r.id)), "duplicate (frame {}, id {})", r.frame, r.id);
    }
}

#[test]
fn refinement_reduces_false_negatives_on_crowded_scene() {
    let scene = generate(&preset(Preset::Crowded)).unwrap();
    let plain = track_scene(&scene, false);
    let refined = track_scene(&scene, true);
    let eval_plain = evaluate_sequence(&scene.gt, &plain, 0.5, None).unwrap();
    let eval_refined = evaluate_sequence(&scene.gt, &refined, 0.5, None).unwrap();
    eprintln!(
        "plain:   MOTA {:.4} IDF1 {:.4} FP {} FN {} IDS {}",
        eval_plain.mota,
        eval_plain.idf1,
        eval_plain.false_positives,
        eval_plain.false_negatives,
        eval_plain.id_switches
    );
    eprintln!(
        "refined: MOTA {:.4} IDF1 {:.4} FP {} FN {} IDS {}",
        eval_refined.mota,
        eval_refined.idf1,
        eval_refined.false_positives,
        eval_refined.false_negatives,
        eval_refined.id_switches
    );
    assert!(
        (eval_refined.false_negatives as f64) <= 0.8 * eval_plain.false_negatives as f64,
        "FN {} -> {}",
        eval_plain.false_negatives,
        eval_refined.false_negatives
    );
    assert!(
        eval_refined.mota >= eval_plain.mota + 0.02,
        "MOTA {} -> {}",
        eval_plain.mota,
        eval_refined.mota
    );
    assert!(
        (eval_refined.false_positives as f64) <= 1.05 * eval_plain.false_positives as f64,
        "FP {} -> {}",
        eval_plain.false_positives,
        eval_refined.false_positives
    );
}
