//! Online association engine: constant-velocity Kalman tracks, two-stage
//! hierarchical matching (appearance + motion blend, then IoU), and track
//! lifecycle management.

pub mod assignment;
pub mod kalman;

pub use assignment::{hungarian, Assignment, CostMatrix};
pub use kalman::{kf_initiate, kf_predict, kf_update, mahalanobis, KalmanError, KalmanState};

use alloc::vec::Vec;

use crate::model::{cosine_distance, iou, BBox, Detection, Embedding};

/// Association parameters.
///
/// `lambda` blends appearance and motion in stage one; `iou_threshold` is
/// the stage-two gate. The Mahalanobis gate is the chi-squared 0.95
/// quantile at 4 degrees of freedom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssocConfig {
    pub lambda: f64,
    pub iou_threshold: f64,
    pub max_age: usize,
    pub gating_threshold: f64,
    pub embedding_momentum: f64,
    pub n_init: usize,
}

impl Default for AssocConfig {
    fn default() -> Self {
        AssocConfig {
            lambda: 0.98,
            iou_threshold: 0.5,
            max_age: 30,
            gating_threshold: 9.4877,
            embedding_momentum: 0.9,
            n_init: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStatus {
    Tentative,
    Confirmed,
    Deleted,
}

/// One tracked identity.
#[derive(Debug, Clone)]
pub struct Track {
    id: u64,
    state: KalmanState,
    embedding: Option<Embedding>,
    hits: usize,
    age: usize,
    time_since_update: usize,
    status: TrackStatus,
    /// Output records buffered while tentative; emitted on confirmation.
    pending: Vec<TrackRecord>,
}

impl Track {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn state(&self) -> &KalmanState {
        &self.state
    }

    pub fn bbox(&self) -> BBox {
        self.state.bbox()
    }

    pub fn embedding(&self) -> Option<&Embedding> {
        self.embedding.as_ref()
    }

    pub fn hits(&self) -> usize {
        self.hits
    }

    pub fn age(&self) -> usize {
        self.age
    }

    pub fn time_since_update(&self) -> usize {
        self.time_since_update
    }

    pub fn status(&self) -> TrackStatus {
        self.status
    }

    pub fn is_confirmed(&self) -> bool {
        self.status == TrackStatus::Confirmed
    }
}

/// One output row: a confirmed identity in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackRecord {
    pub frame: u64,
    pub id: u64,
    pub bbox: BBox,
    pub confidence: f64,
}

/// Stage-one cost: `lambda * cosine + (1 - lambda) * min(maha/gate, 1)`.
/// Pairs are gated when the Mahalanobis distance exceeds the gate or
/// either side lacks an embedding.
pub fn build_cost_matrix(tracks: &[Track], dets: &[Detection], cfg: &AssocConfig) -> CostMatrix {
    let mut m = CostMatrix::new(tracks.len(), dets.len());
    for (t, track) in tracks.iter().enumerate() {
        let Some(track_emb) = track.embedding.as_ref() else {
            continue;
        };
        for (d, det) in dets.iter().enumerate() {
            let Some(det_emb) = det.embedding.as_ref() else {
                continue;
            };
            let Ok(maha) = mahalanobis(&track.state, det) else {
                continue;
            };
            if maha > cfg.gating_threshold {
                continue;
            }
            let motion = f64::min(maha / cfg.gating_threshold, 1.0);
            let appearance = cosine_distance(track_emb, det_emb);
            m.set(t, d, cfg.lambda * appearance + (1.0 - cfg.lambda) * motion);
        }
    }
    m
}

/// Online tracker over one sequence. Frames are 1-based; each `step` call
/// consumes one frame of detections.
#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: AssocConfig,
    tracks: Vec<Track>,
    next_id: u64,
    frame: u64,
}

impl Tracker {
    pub fn new(cfg: AssocConfig) -> Self {
        Tracker { cfg, tracks: Vec::new(), next_id: 1, frame: 0 }
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn frame(&self) -> u64 {
        self.frame
    }

    /// Advances one frame: predicts all tracks, associates detections in
    /// two stages, updates lifecycles, and returns the output records
    /// (sorted by frame then id; confirmation can release buffered rows
    /// from earlier frames).
    pub fn step(&mut self, dets: &[Detection]) -> Result<Vec<TrackRecord>, KalmanError> {
        self.frame += 1;
        let frame = self.frame;
        let cfg = self.cfg;

        for track in self.tracks.iter_mut() {
            track.state = kf_predict(&track.state);
        }

        // Stage 1: confirmed tracks vs detections on the blended
        // appearance + motion cost.
        let confirmed_idx: Vec<usize> = (0..self.tracks.len())
            .filter(|&i| self.tracks[i].is_confirmed())
            .collect();
        let stage1_tracks: Vec<Track> =
            confirmed_idx.iter().map(|&i| self.tracks[i].clone()).collect();
        let cost = build_cost_matrix(&stage1_tracks, dets, &cfg);
        let stage1 = hungarian(&cost);

        let mut track_matched = alloc::vec![false; self.tracks.len()];
        let mut det_matched = alloc::vec![false; dets.len()];
        let mut matches: Vec<(usize, usize)> = Vec::new();
        for &(r, c) in &stage1.pairs {
            matches.push((confirmed_idx[r], c));
            track_matched[confirmed_idx[r]] = true;
            det_matched[c] = true;
        }

        // Stage 2: everything still unmatched, on IoU with threshold tau.
        let rest_tracks: Vec<usize> =
            (0..self.tracks.len()).filter(|&i| !track_matched[i]).collect();
        let rest_dets: Vec<usize> = (0..dets.len()).filter(|&d| !det_matched[d]).collect();
        let mut iou_cost = CostMatrix::new(rest_tracks.len(), rest_dets.len());
        for (r, &t) in rest_tracks.iter().enumerate() {
            let tb = self.tracks[t].bbox();
            for (c, &d) in rest_dets.iter().enumerate() {
                let overlap = iou(&tb, &dets[d].bbox);
                if overlap >= cfg.iou_threshold {
                    iou_cost.set(r, c, 1.0 - overlap);
                }
            }
        }
        let stage2 = hungarian(&iou_cost);
        for &(r, c) in &stage2.pairs {
            matches.push((rest_tracks[r], rest_dets[c]));
            track_matched[rest_tracks[r]] = true;
            det_matched[rest_dets[c]] = true;
        }

        let mut out: Vec<TrackRecord> = Vec::new();

        matches.sort_unstable();
        for (t, d) in matches {
            let track = &mut self.tracks[t];
            let det = &dets[d];
            track.state = kf_update(&track.state, det)?;
            track.hits += 1;
            track.time_since_update = 0;
            if let Some(det_emb) = det.embedding.as_ref() {
                track.embedding = Some(match track.embedding.take() {
                    Some(e) => ema_embedding(&e, det_emb, cfg.embedding_momentum),
                    None => det_emb.clone(),
                });
            }
            let record = TrackRecord {
                frame,
                id: track.id,
                bbox: det.bbox,
                confidence: det.confidence,
            };
            match track.status {
                TrackStatus::Confirmed => out.push(record),
                TrackStatus::Tentative => {
                    track.pending.push(record);
                    if track.hits >= cfg.n_init {
                        track.status = TrackStatus::Confirmed;
                        out.append(&mut track.pending);
                    }
                }
                TrackStatus::Deleted => {}
            }
        }

        // Unmatched tracks age out; tentative ones die immediately.
        for (t, track) in self.tracks.iter_mut().enumerate() {
            if track_matched[t] {
                continue;
            }
            track.time_since_update += 1;
            match track.status {
                TrackStatus::Tentative => track.status = TrackStatus::Deleted,
                TrackStatus::Confirmed if track.time_since_update > cfg.max_age => {
                    track.status = TrackStatus::Deleted;
                }
                _ => {}
            }
        }

        // Unmatched detections seed new tracks; ids are never reused.
        for (d, det) in dets.iter().enumerate() {
            if det_matched[d] {
                continue;
            }
            let id = self.next_id;
            self.next_id += 1;
            let record = TrackRecord { frame, id, bbox: det.bbox, confidence: det.confidence };
            let mut track = Track {
                id,
                state: kf_initiate(det),
                embedding: det.embedding.clone(),
                hits: 1,
                age: 0,
                time_since_update: 0,
                status: TrackStatus::Tentative,
                pending: Vec::new(),
            };
            if cfg.n_init <= 1 {
                track.status = TrackStatus::Confirmed;
                out.push(record);
            } else {
                track.pending.push(record);
            }
            self.tracks.push(track);
        }

        for track in self.tracks.iter_mut() {
            track.age += 1;
        }
        self.tracks.retain(|t| t.status != TrackStatus::Deleted);

        out.sort_by_key(|r| (r.frame, r.id));
        Ok(out)
    }
}

fn ema_embedding(current: &Embedding, new: &Embedding, momentum: f64) -> Embedding {
    let mixed: Vec<f64> = current
        .as_slice()
        .iter()
        .zip(new.as_slice())
        .map(|(c, n)| momentum * c + (1.0 - momentum) * n)
        .collect();
    Embedding::from_unnormalized(mixed).unwrap_or_else(|_| new.clone())
}
