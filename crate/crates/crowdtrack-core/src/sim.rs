//! Seeded synthetic crowd-scene generator: GT trajectories with
//! constant-velocity motion and boundary reflection, occlusion-driven
//! detection dropout, jittered boxes, uniform false positives, GT density
//! maps, and per-identity embeddings.
//!
//! Generation consumes a single SplitMix64 stream in a fixed order (agent
//! initialization, then per frame: motion, per-agent detection draws,
//! false positives), so a seed plus config identifies a scene exactly on
//! every platform.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::density::{self, AdaptiveSigmaConfig, DensityError, DensityGrid};
use crate::math;
use crate::metrics::ObjectRecord;
use crate::model::{BBox, Detection, Embedding, GridGeometry, ModelError, EMBEDDING_DIM};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq)]
pub enum SimError {
    BadConfig(&'static str),
    UnknownPreset,
    Model(ModelError),
    Density(DensityError),
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::BadConfig(what) => write!(f, "bad sim config: {what}"),
            SimError::UnknownPreset => {
                write!(f, "unknown preset (expected sparse, crowded or mot20like)")
            }
            SimError::Model(e) => write!(f, "{e}"),
            SimError::Density(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for SimError {}

impl From<ModelError> for SimError {
    fn from(e: ModelError) -> Self {
        SimError::Model(e)
    }
}

impl From<DensityError> for SimError {
    fn from(e: DensityError) -> Self {
        SimError::Density(e)
    }
}

/// Scene generation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub n_agents: usize,
    pub n_frames: usize,
    /// Mean box size in pixels and its normal spread.
    pub agent_w_mean: f64,
    pub agent_h_mean: f64,
    pub agent_size_std: f64,
    /// Speed distribution, pixels per frame.
    pub speed_mean: f64,
    pub speed_std: f64,
    /// Per-frame heading noise, radians.
    pub turn_std: f64,
    /// Base probability of missing an unoccluded agent.
    pub occlusion_miss_base: f64,
    /// Extra miss probability per unit of overlap with nearer agents.
    pub occlusion_miss_gain: f64,
    /// Expected false positives per frame (Poisson rate).
    pub fp_rate: f64,
    /// Std of the detection box jitter, pixels.
    pub box_jitter_std: f64,
    /// Std of the embedding noise added to the identity basis vector.
    pub embedding_noise_std: f64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_agents == 0 || self.n_frames == 0 {
            return Err(SimError::BadConfig("need at least one agent and one frame"));
        }
        if !(0.0..=1.0).contains(&self.occlusion_miss_base)
            || self.occlusion_miss_gain < 0.0
        {
            return Err(SimError::BadConfig("miss probabilities out of range"));
        }
        if self.fp_rate < 0.0 || self.box_jitter_std < 0.0 || self.embedding_noise_std < 0.0 {
            return Err(SimError::BadConfig("rates and stds must be non-negative"));
        }
        if self.agent_w_mean < 4.0 || self.agent_h_mean < 4.0 {
            return Err(SimError::BadConfig("agent size too small"));
        }
        if self.agent_w_mean >= self.width as f64 / 2.0
            || self.agent_h_mean >= self.height as f64 / 2.0
        {
            return Err(SimError::BadConfig("agent size too large for the scene"));
        }
        Ok(())
    }
}

/// Named scene configurations used by the benchmarks and acceptance suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Sparse,
    Crowded,
    Mot20Like,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Sparse, Preset::Crowded, Preset::Mot20Like];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Sparse => "sparse",
            Preset::Crowded => "crowded",
            Preset::Mot20Like => "mot20like",
        }
    }
}

impl FromStr for Preset {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        match s {
            "sparse" => Ok(Preset::Sparse),
            "crowded" => Ok(Preset::Crowded),
            "mot20like" => Ok(Preset::Mot20Like),
            _ => Err(SimError::UnknownPreset),
        }
    }
}

/// The committed preset table.
pub fn preset(p: Preset) -> SimConfig {
    match p {
        Preset::Sparse => SimConfig {
            seed: 7,
            width: 640,
            height: 480,
            n_agents: 8,
            n_frames: 80,
            agent_w_mean: 24.0,
            agent_h_mean: 56.0,
            agent_size_std: 3.0,
            speed_mean: 2.0,
            speed_std: 0.7,
            turn_std: 0.03,
            occlusion_miss_base: 0.02,
            occlusion_miss_gain: 0.3,
            fp_rate: 0.2,
            box_jitter_std: 0.8,
            embedding_noise_std: 0.05,
        },
        Preset::Crowded => SimConfig {
            seed: 17,
            width: 768,
            height: 448,
            n_agents: 40,
            n_frames: 100,
            agent_w_mean: 22.0,
            agent_h_mean: 50.0,
            agent_size_std: 3.0,
            speed_mean: 2.2,
            speed_std: 0.8,
            turn_std: 0.05,
            occlusion_miss_base: 0.04,
            occlusion_miss_gain: 1.0,
            fp_rate: 0.8,
            box_jitter_std: 2.2,
            embedding_noise_std: 0.08,
        },
        Preset::Mot20Like => SimConfig {
            seed: 20,
            width: 1088,
            height: 608,
            n_agents: 100,
            n_frames: 60,
            agent_w_mean: 20.0,
            agent_h_mean: 46.0,
            agent_size_std: 3.0,
            speed_mean: 2.0,
            speed_std: 0.8,
            turn_std: 0.05,
            occlusion_miss_base: 0.05,
            occlusion_miss_gain: 0.9,
            fp_rate: 1.5,
            box_jitter_std: 1.2,
            embedding_noise_std: 0.1,
        },
    }
}

/// A detection plus its source agent (None for a false positive). The
/// source is diagnostic only and never reaches the tracker.
#[derive(Debug, Clone, PartialEq)]
pub struct SimDetection {
    pub detection: Detection,
    pub source: Option<usize>,
}

/// One generated sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub config: SimConfig,
    pub geom: GridGeometry,
    /// GT boxes, frames 1-based, ids = agent index + 1.
    pub gt: Vec<ObjectRecord>,
    /// Detections per frame (agents in index order, then false positives).
    pub detections: Vec<Vec<SimDetection>>,
    /// GT density map per frame.
    pub densities: Vec<DensityGrid>,
}

impl Scene {
    /// Fraction of GT boxes with no detection derived from them.
    pub fn miss_rate(&self) -> f64 {
        let detected: usize = self
            .detections
            .iter()
            .map(|f| f.iter().filter(|d| d.source.is_some()).count())
            .sum();
        1.0 - detected as f64 / self.gt.len() as f64
    }

    /// Mean false positives per frame.
    pub fn fp_per_frame(&self) -> f64 {
        let fps: usize = self
            .detections
            .iter()
            .map(|f| f.iter().filter(|d| d.source.is_none()).count())
            .sum();
        fps as f64 / self.detections.len() as f64
    }
}

struct Agent {
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    w: f64,
    h: f64,
}

impl Agent {
    fn bbox(&self) -> BBox {
        BBox {
            x: self.cx - self.w / 2.0,
            y: self.cy - self.h / 2.0,
            w: self.w,
            h: self.h,
        }
    }
}

/// Generates a scene. Identical config (including seed) yields an
/// identical scene.
pub fn generate(cfg: &SimConfig) -> Result<Scene, SimError> {
    cfg.validate()?;
    let geom = GridGeometry::new(cfg.width, cfg.height, GridGeometry::DEFAULT_R)?;
    let mut rng = SplitMix64::new(cfg.seed);
    let (w_px, h_px) = (cfg.width as f64, cfg.height as f64);

    // Agent initialization: size, position, heading, speed.
    let mut agents: Vec<Agent> = Vec::with_capacity(cfg.n_agents);
    for _ in 0..cfg.n_agents {
        let w = f64::max(6.0, rng.normal_scaled(cfg.agent_w_mean, cfg.agent_size_std));
        let h = f64::max(10.0, rng.normal_scaled(cfg.agent_h_mean, cfg.agent_size_std));
        let cx = rng.uniform(w / 2.0, w_px - w / 2.0);
        let cy = rng.uniform(h / 2.0, h_px - h / 2.0);
        let angle = rng.uniform(0.0, 2.0 * core::f64::consts::PI);
        let speed = math::abs(rng.normal_scaled(cfg.speed_mean, cfg.speed_std));
        agents.push(Agent {
            cx,
            cy,
            vx: speed * math::cos(angle),
            vy: speed * math::sin(angle),
            w,
            h,
        });
    }

    let sigma_cfg = AdaptiveSigmaConfig::default();
    let mut gt = Vec::with_capacity(cfg.n_agents * cfg.n_frames);
    let mut detections = Vec::with_capacity(cfg.n_frames);
    let mut densities = Vec::with_capacity(cfg.n_frames);

    for frame in 1..=cfg.n_frames as u64 {
        // Motion with heading noise and boundary reflection.
        for agent in agents.iter_mut() {
            let turn = rng.normal_scaled(0.0, cfg.turn_std);
            let (c, s) = (math::cos(turn), math::sin(turn));
            let (vx, vy) = (agent.vx, agent.vy);
            agent.vx = c * vx - s * vy;
            agent.vy = s * vx + c * vy;
            agent.cx += agent.vx;
            agent.cy += agent.vy;
            let (lo_x, hi_x) = (agent.w / 2.0, w_px - agent.w / 2.0);
            if agent.cx < lo_x {
                agent.cx = lo_x + (lo_x - agent.cx);
                agent.vx = -agent.vx;
            } else if agent.cx > hi_x {
                agent.cx = hi_x - (agent.cx - hi_x);
                agent.vx = -agent.vx;
            }
            let (lo_y, hi_y) = (agent.h / 2.0, h_px - agent.h / 2.0);
            if agent.cy < lo_y {
                agent.cy = lo_y + (lo_y - agent.cy);
                agent.vy = -agent.vy;
            } else if agent.cy > hi_y {
                agent.cy = hi_y - (agent.cy - hi_y);
                agent.vy = -agent.vy;
            }
            agent.cx = agent.cx.clamp(lo_x, hi_x);
            agent.cy = agent.cy.clamp(lo_y, hi_y);
        }

        for (i, agent) in agents.iter().enumerate() {
            gt.push(ObjectRecord { frame, id: i as u64 + 1, bbox: agent.bbox() });
        }

        // GT density from the agent center cells.
        let mut cells = Vec::with_capacity(cfg.n_agents);
        for agent in &agents {
            let (cell, _) = crate::model::center_to_grid((agent.cx, agent.cy), &geom)?;
            cells.push(cell);
        }
        let sigmas = density::adaptive_sigmas(&cells, &sigma_cfg)?;
        densities.push(density::density_from_centers(&cells, &sigmas, &geom)?);

        // Detections: occlusion dropout, box jitter, confidence, embedding.
        let mut frame_dets: Vec<SimDetection> = Vec::new();
        for (i, agent) in agents.iter().enumerate() {
            let mut occlusion: f64 = 0.0;
            let own = agent.bbox();
            for (j, other) in agents.iter().enumerate() {
                if i != j && other.cy > agent.cy {
                    occlusion = f64::max(occlusion, crate::model::iou(&own, &other.bbox()));
                }
            }
            let p_miss = f64::min(
                1.0,
                cfg.occlusion_miss_base + cfg.occlusion_miss_gain * occlusion,
            );
            if rng.next_f64() < p_miss {
                continue;
            }
            let jx = rng.normal() * cfg.box_jitter_std;
            let jy = rng.normal() * cfg.box_jitter_std;
            let jw = rng.normal() * cfg.box_jitter_std * 0.5;
            let jh = rng.normal() * cfg.box_jitter_std * 0.5;
            let bw = f64::max(4.0, agent.w + jw);
            let bh = f64::max(6.0, agent.h + jh);
            let bx = (own.x + jx).clamp(0.0, w_px - bw);
            let by = (own.y + jy).clamp(0.0, h_px - bh);
            let conf = rng.uniform(0.6, 1.0);
            let embedding = noisy_identity_embedding(&mut rng, i, cfg.embedding_noise_std);
            let det = Detection::new(BBox::new(bx, by, bw, bh)?, conf, 0)?
                .with_embedding(embedding);
            frame_dets.push(SimDetection { detection: det, source: Some(i) });
        }

        // False positives: uniform boxes with low confidence and an
        // identity-free random embedding.
        let n_fp = rng.poisson(cfg.fp_rate);
        for _ in 0..n_fp {
            let w = f64::max(6.0, rng.normal_scaled(cfg.agent_w_mean, cfg.agent_size_std));
            let h = f64::max(10.0, rng.normal_scaled(cfg.agent_h_mean, cfg.agent_size_std));
            let x = rng.uniform(0.0, w_px - w);
            let y = rng.uniform(0.0, h_px - h);
            let conf = rng.uniform(0.1, 0.5);
            let mut raw = Vec::with_capacity(EMBEDDING_DIM);
            for _ in 0..EMBEDDING_DIM {
                raw.push(rng.normal());
            }
            let embedding = Embedding::from_unnormalized(raw)
                .unwrap_or_else(|_| Embedding::axis(0));
            let det = Detection::new(BBox::new(x, y, w, h)?, conf, 0)?.with_embedding(embedding);
            frame_dets.push(SimDetection { detection: det, source: None });
        }
        detections.push(frame_dets);
    }

    Ok(Scene { config: cfg.clone(), geom, gt, detections, densities })
}

/// Identity basis vector (the agent's axis) plus isotropic noise,
/// renormalized. Consumes exactly `EMBEDDING_DIM` normal draws.
fn noisy_identity_embedding(rng: &mut SplitMix64, agent: usize, noise_std: f64) -> Embedding {
    let mut v = alloc::vec![0.0; EMBEDDING_DIM];
    v[agent % EMBEDDING_DIM] = 1.0;
    for x in v.iter_mut() {
        *x += noise_std * rng.normal();
    }
    Embedding::from_unnormalized(v).unwrap_or_else(|_| Embedding::axis(agent))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless(mut cfg: SimConfig) -> SimConfig {
        cfg.occlusion_miss_base = 0.0;
        cfg.occlusion_miss_gain = 0.0;
        cfg.fp_rate = 0.0;
        cfg.box_jitter_std = 0.0;
        cfg.embedding_noise_std = 0.0;
        cfg
    }

    #[test]
    fn noiseless_detections_equal_gt() {
        let cfg = noiseless(preset(Preset::Sparse));
        let scene = generate(&cfg).unwrap();
        assert_eq!(scene.gt.len(), cfg.n_agents * cfg.n_frames);
        for (f, dets) in scene.detections.iter().enumerate() {
            assert_eq!(dets.len(), cfg.n_agents);
            for det in dets {
                let agent = det.source.expect("no FPs in noiseless scene");
                let gt_box = scene
                    .gt
                    .iter()
                    .find(|r| r.frame == f as u64 + 1 && r.id == agent as u64 + 1)
                    .unwrap()
                    .bbox;
                assert_eq!(det.detection.bbox, gt_box);
                assert!((det.detection.confidence - 0.6).abs() < 0.4 + 1e-9);
            }
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = preset(Preset::Crowded);
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        let mut other = cfg;
        other.seed += 1;
        let c = generate(&other).unwrap();
        assert_ne!(a.gt, c.gt);
    }

    #[test]
    fn miss_rate_tracks_crowding() {
        // Rank correlation between per-frame mean pairwise overlap and
        // per-frame miss rate must be positive when the gain dominates.
        let mut cfg = preset(Preset::Crowded);
        cfg.n_agents = 30;
        cfg.n_frames = 100;
        cfg.occlusion_miss_base = 0.0;
        cfg.occlusion_miss_gain = 0.8;
        cfg.fp_rate = 0.0;
        let scene = generate(&cfg).unwrap();

        let mut occ = alloc::vec![0.0f64; cfg.n_frames];
        let mut miss = alloc::vec![0.0f64; cfg.n_frames];
        for f in 0..cfg.n_frames {
            let frame = f as u64 + 1;
            let boxes: Vec<BBox> = scene
                .gt
                .iter()
                .filter(|r| r.frame == frame)
                .map(|r| r.bbox)
                .collect();
            let mut total = 0.0;
            let mut pairs = 0usize;
            for i in 0..boxes.len() {
                for j in i + 1..boxes.len() {
                    total += crate::model::iou(&boxes[i], &boxes[j]);
                    pairs += 1;
                }
            }
            occ[f] = total / pairs as f64;
            let detected = scene.detections[f].iter().filter(|d| d.source.is_some()).count();
            miss[f] = 1.0 - detected as f64 / cfg.n_agents as f64;
        }

        fn ranks(vals: &[f64]) -> Vec<f64> {
            let mut idx: Vec<usize> = (0..vals.len()).collect();
            idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
            let mut r = alloc::vec![0.0; vals.len()];
            for (rank, &i) in idx.iter().enumerate() {
                r[i] = rank as f64;
            }
            r
        }
        let ro = ranks(&occ);
        let rm = ranks(&miss);
        let n = ro.len() as f64;
        let mean = (n - 1.0) / 2.0;
        let mut num = 0.0;
        let mut da = 0.0;
        let mut db = 0.0;
        for i in 0..ro.len() {
            num += (ro[i] - mean) * (rm[i] - mean);
            da += (ro[i] - mean) * (ro[i] - mean);
            db += (rm[i] - mean) * (rm[i] - mean);
        }
        let spearman = num / (da.sqrt() * db.sqrt());
        assert!(spearman > 0.0, "rank correlation {spearman}");
    }

    #[test]
    fn density_mass_bounded_by_agent_counts() {
        let scene = generate(&preset(Preset::Crowded)).unwrap();
        let cfg = &scene.config;
        let sigma_cfg = AdaptiveSigmaConfig::default();
        for f in 0..cfg.n_frames {
            let frame = f as u64 + 1;
            let cells: Vec<(usize, usize)> = scene
                .gt
                .iter()
                .filter(|r| r.frame == frame)
                .map(|r| {
                    crate::model::center_to_grid(r.bbox.center(), &scene.geom)
                        .unwrap()
                        .0
                })
                .collect();
            let sigmas = density::adaptive_sigmas(&cells, &sigma_cfg).unwrap();
            let interior = cells
                .iter()
                .zip(&sigmas)
                .filter(|(&(x, y), &s)| {
                    let r = (3.0 * s).ceil() as usize;
                    x >= r
                        && y >= r
                        && x + r < scene.geom.grid_w()
                        && y + r < scene.geom.grid_h()
                })
                .count();
            let mass = scene.densities[f].total();
            let n = cfg.n_agents as f64;
            assert!(
                mass >= interior as f64 - 1e-3 * n && mass <= n + 1e-3 * n,
                "frame {frame}: mass {mass}, interior {interior}, n {n}"
            );
        }
    }

    #[test]
    fn preset_table_is_stable() {
        assert_eq!(preset(Preset::Sparse).n_agents, 8);
        assert_eq!(preset(Preset::Crowded).n_agents, 40);
        assert_eq!(preset(Preset::Mot20Like).n_agents, 100);
        assert_eq!(preset(Preset::Mot20Like).width, 1088);
        assert_eq!(preset(Preset::Mot20Like).height, 608);
        for p in Preset::ALL {
            assert_eq!(Preset::from_str(p.name()).unwrap(), p);
            preset(p).validate().unwrap();
        }
        assert!(matches!(Preset::from_str("dense"), Err(SimError::UnknownPreset)));
    }

    #[test]
    fn detections_have_unit_embeddings_and_in_image_centers() {
        let scene = generate(&preset(Preset::Mot20Like)).unwrap();
        for dets in &scene.detections {
            for d in dets {
                let e = d.detection.embedding.as_ref().unwrap();
                let norm: f64 = e.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-9);
                let (cx, cy) = d.detection.bbox.center();
                assert!(cx >= 0.0 && cx < scene.config.width as f64);
                assert!(cy >= 0.0 && cy < scene.config.height as f64);
            }
        }
    }
}
