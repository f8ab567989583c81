use crowdtrack_core::metrics::ObjectRecord;
use crowdtrack_core::model::iou;
use crowdtrack_core::refine::{refine_frame, RefineConfig};
use crowdtrack_core::sim::{generate, preset, Preset};
use crowdtrack_core::track::{AssocConfig, Tracker, TrackRecord};
use std::collections::BTreeMap;

fn main() {
    let scene = generate(&preset(Preset::Crowded)).unwrap();
    let cfg = RefineConfig { min_peak_separation: 3, ..RefineConfig::default() };
    let mut tracker = Tracker::new(AssocConfig::default());
    let mut out: Vec<TrackRecord> = Vec::new();
    for (f, frame_dets) in scene.detections.iter().enumerate() {
        let dets: Vec<_> = frame_dets.iter().map(|d| d.detection.clone()).collect();
        let (refined, _) = refine_frame(&dets, &scene.densities[f], &cfg).unwrap();
        out.extend(tracker.step(&refined).unwrap());
    }
    let mut frames: BTreeMap<u64, Vec<&TrackRecord>> = BTreeMap::new();
    for r in &out { frames.entry(r.frame).or_default().push(r); }
    let mut shown = 0;
    for (frame, recs) in &frames {
        let gts: Vec<&ObjectRecord> = scene.gt.iter().filter(|g| g.frame == *frame).collect();
        let mut claimed: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, r) in recs.iter().enumerate() {
            let mut best = (0.0f64, 0u64);
            for g in &gts {
                let v = iou(&g.bbox, &r.bbox);
                if v > best.0 { best = (v, g.id); }
            }
            if best.0 >= 0.5 { claimed.entry(best.1).or_default().push(i); }
        }
        for (gid, who) in &claimed {
            if who.len() > 1 && shown < 10 {
                shown += 1;
                let g = gts.iter().find(|g| g.id == *gid).unwrap();
                println!("frame {frame} GT {gid} at ({:.1},{:.1}) {:.0}x{:.0}:", g.bbox.center().0, g.bbox.center().1, g.bbox.w, g.bbox.h);
                for &i in who {
                    let r = recs[i];
                    println!("   hyp id {} conf {:.2} at ({:.1},{:.1}) {:.1}x{:.1} iou {:.3}", r.id, r.confidence, r.bbox.center().0, r.bbox.center().1, r.bbox.w, r.bbox.h, iou(&g.bbox, &r.bbox));
                }
                // nearest other GTs
                for g2 in &gts {
                    if g2.id != *gid {
                        let d = ((g2.bbox.center().0 - g.bbox.center().0).powi(2) + (g2.bbox.center().1 - g.bbox.center().1).powi(2)).sqrt();
                        if d < 40.0 { println!("   nearby GT {} at dist {:.1} iou-with-claimed {:.3}", g2.id, d, iou(&g2.bbox, &g.bbox)); }
                    }
                }
            }
        }
    }
}
