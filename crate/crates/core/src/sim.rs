//! Synthetic lineage videos: drifting, diffusing, dividing ellipses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrackError};
use crate::lineage::{Detection, Features, Frame, LineageGraph, NodeId};

const PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureModel {
    pub area_mean: f64,
    pub area_sigma: f64,
    pub intensity_mean: f64,
    pub intensity_sigma: f64,
    /// Ratio of the ellipse axes, drawn uniformly per object.
    pub elongation: [f64; 2],
    /// Per-frame log-normal noise on area and intensity.
    pub noise: f64,
    /// Per-frame multiplicative area growth.
    pub growth: f64,
}

impl Default for FeatureModel {
    fn default() -> Self {
        FeatureModel {
            area_mean: 60.0,
            area_sigma: 15.0,
            intensity_mean: 1.0,
            intensity_sigma: 0.3,
            elongation: [1.0, 2.5],
            noise: 0.02,
            growth: 1.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub frames: u32,
    pub initial: usize,
    pub width: f64,
    pub height: f64,
    /// Per-axis standard deviation of the random step, px.
    pub sigma: f64,
    /// Displacement shared by all objects, px/frame.
    pub drift: [f64; 2],
    pub p_divide: f64,
    pub p_disappear: f64,
    /// Mean number of new objects per frame. Objects leaving the arena
    /// end their track and a new object enters at the opposite edge.
    pub appear_rate: f64,
    pub min_spacing: f64,
    /// Distance of each daughter from the mother's position.
    pub division_offset: f64,
    pub features: FeatureModel,
    /// Largest link length used by distance-based scoring on this data.
    pub dist_max: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self::easy()
    }
}

impl SimConfig {
    pub const PRESETS: [&'static str; 2] = ["easy", "hard"];

    /// Sparse, slow, few divisions.
    pub fn easy() -> Self {
        SimConfig {
            frames: 30,
            initial: 20,
            width: 256.0,
            height: 256.0,
            sigma: 1.0,
            drift: [0.0, 0.0],
            p_divide: 0.01,
            p_disappear: 0.002,
            appear_rate: 0.1,
            min_spacing: 12.0,
            division_offset: 6.0,
            features: FeatureModel::default(),
            dist_max: 20.0,
            seed: 0,
        }
    }

    /// Dense, drifting, division-rich.
    pub fn hard() -> Self {
        SimConfig {
            frames: 50,
            initial: 100,
            width: 200.0,
            height: 200.0,
            sigma: 1.5,
            drift: [6.0, 2.0],
            p_divide: 0.03,
            p_disappear: 0.016,
            appear_rate: 0.2,
            min_spacing: 6.0,
            division_offset: 3.5,
            features: FeatureModel {
                growth: 1.025,
                ..FeatureModel::default()
            },
            dist_max: 16.0,
            seed: 0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "easy" => Ok(Self::easy()),
            "hard" => Ok(Self::hard()),
            _ => Err(TrackError::Config(format!(
                "unknown preset {name:?}; expected one of {:?}",
                Self::PRESETS
            ))),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(TrackError::Config(m.to_string()));
        let f = &self.features;
        if self.frames < 2 {
            return err("frames must be at least 2");
        }
        for (name, p) in [("p_divide", self.p_divide), ("p_disappear", self.p_disappear)] {
            if !(0.0..=1.0).contains(&p) {
                return err(&format!("{name} must lie in [0, 1]"));
            }
        }
        if self.p_divide + self.p_disappear > 1.0 {
            return err("p_divide + p_disappear must not exceed 1");
        }
        if !(self.width > 0.0 && self.height > 0.0) {
            return err("arena must have positive size");
        }
        if !(self.sigma >= 0.0 && self.appear_rate >= 0.0 && self.min_spacing >= 0.0 && self.division_offset >= 0.0) {
            return err("sigma, appear_rate, min_spacing and division_offset must be non-negative");
        }
        if !(self.dist_max > 0.0) {
            return err("dist_max must be positive");
        }
        if !(f.area_mean > 0.0 && f.area_sigma >= 0.0 && f.intensity_sigma >= 0.0 && f.noise >= 0.0 && f.growth > 0.0) {
            return err("invalid feature model");
        }
        if !(f.elongation[0] >= 1.0 && f.elongation[1] >= f.elongation[0]) {
            return err("elongation range must satisfy 1 <= lo <= hi");
        }
        if !self.drift.iter().all(|d| d.is_finite()) {
            return err("drift must be finite");
        }
        Ok(())
    }
}

/// One simulated video. Detections are the ground-truth objects.
#[derive(Clone, Debug, PartialEq)]
pub struct SimVideo {
    pub detections: Vec<Detection>,
    pub gt: LineageGraph,
    /// Object-frames that were given a chance to divide.
    pub division_trials: usize,
    /// Bernoulli successes among those trials.
    pub division_draws: usize,
}

impl SimVideo {
    pub fn n_divisions(&self) -> usize {
        self.gt.nodes().filter(|&n| self.gt.out_degree(n) == 2).count()
    }
}

#[derive(Clone, Debug)]
struct Object {
    node: NodeId,
    pos: [f64; 2],
    area: f64,
    intensity: f64,
    elongation: f64,
    angle: f64,
}

impl Object {
    fn features(&self) -> Features {
        let e = self.elongation;
        // Semi-axes of an ellipse of this area; a uniform ellipse has
        // central second moments a²/4 and b²/4 along its axes.
        let a2 = self.area * e / std::f64::consts::PI;
        let b2 = self.area / (e * std::f64::consts::PI);
        let (l1, l2) = (a2 / 4.0, b2 / 4.0);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        Features {
            area: self.area,
            intensity: self.intensity,
            ixx: l1 * c * c + l2 * s * s,
            iyy: l1 * s * s + l2 * c * c,
            ixy: (l1 - l2) * c * s,
        }
    }
}

struct Sim<'a> {
    cfg: &'a SimConfig,
    rng: ChaCha8Rng,
    next_id: NodeId,
    step: Normal<f64>,
    noise: Normal<f64>,
}

impl Sim<'_> {
    fn inside(&self, p: [f64; 2]) -> bool {
        (0.0..self.cfg.width).contains(&p[0]) && (0.0..self.cfg.height).contains(&p[1])
    }

    fn spaced(&self, p: [f64; 2], others: &[Object], skip: Option<usize>) -> bool {
        let d2 = self.cfg.min_spacing * self.cfg.min_spacing;
        others.iter().enumerate().all(|(i, o)| {
            if Some(i) == skip {
                return true;
            }
            let (dx, dy) = (o.pos[0] - p[0], o.pos[1] - p[1]);
            dx * dx + dy * dy >= d2
        })
    }

    fn new_object(&mut self, others: &[Object]) -> Option<Object> {
        let f = &self.cfg.features;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let pos = [
                self.rng.random_range(0.0..self.cfg.width),
                self.rng.random_range(0.0..self.cfg.height),
            ];
            if self.spaced(pos, others, None) {
                let area = (f.area_mean + f.area_sigma * self.rng.sample::<f64, _>(rand_distr::StandardNormal)).max(f.area_mean * 0.2);
                let intensity = (f.intensity_mean + f.intensity_sigma * self.rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .max(f.intensity_mean * 0.1);
                let elongation = if f.elongation[1] > f.elongation[0] {
                    self.rng.random_range(f.elongation[0]..f.elongation[1])
                } else {
                    f.elongation[0]
                };
                let angle = self.rng.random_range(0.0..std::f64::consts::PI);
                return Some(Object {
                    node: 0,
                    pos,
                    area,
                    intensity,
                    elongation,
                    angle,
                });
            }
        }
        log::warn!("could not place a new object with spacing {}; skipped", self.cfg.min_spacing);
        None
    }

    /// A fresh object entering at the opposite edge from where `pos` left.
    fn reenter(&mut self, pos: [f64; 2], others: &[Object]) -> Option<Object> {
        let p = [pos[0].rem_euclid(self.cfg.width), pos[1].rem_euclid(self.cfg.height)];
        if !self.spaced(p, others, None) {
            return None;
        }
        let mut o = self.new_object(&[])?;
        o.pos = p;
        Some(o)
    }

    fn id(&mut self) -> NodeId {
        self.next_id += 1;
        self.next_id
    }

    fn evolve(&mut self, o: &mut Object) {
        let f = &self.cfg.features;
        o.pos[0] += self.cfg.drift[0] + self.step.sample(&mut self.rng);
        o.pos[1] += self.cfg.drift[1] + self.step.sample(&mut self.rng);
        o.area *= f.growth * self.noise.sample(&mut self.rng).exp();
        o.intensity *= self.noise.sample(&mut self.rng).exp();
        o.angle += 0.05 * self.rng.sample::<f64, _>(rand_distr::StandardNormal);
    }

    /// Two daughters around the mother, or `None` when they cannot be placed.
    fn divide(&mut self, mother: &Object, others: &[Object], skip: usize) -> Option<[Object; 2]> {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let th = self.rng.random_range(0.0..std::f64::consts::PI);
            let off = [self.cfg.division_offset * th.cos(), self.cfg.division_offset * th.sin()];
            let make = |sign: f64| {
                let mut d = mother.clone();
                d.pos = [mother.pos[0] + sign * off[0], mother.pos[1] + sign * off[1]];
                d.area = mother.area / 2.0;
                d.angle = th + std::f64::consts::FRAC_PI_2;
                d
            };
            let (mut a, mut b) = (make(1.0), make(-1.0));
            if self.spaced(a.pos, others, Some(skip)) && self.spaced(b.pos, others, Some(skip)) {
                for d in [&mut a, &mut b] {
                    d.area *= self.noise.sample(&mut self.rng).exp();
                    self.evolve(d);
                }
                return Some([a, b]);
            }
        }
        log::warn!("could not place daughters of node {}; division skipped", mother.node);
        None
    }
}

pub fn simulate(cfg: &SimConfig) -> Result<SimVideo> {
    cfg.validate()?;
    let mut sim = Sim {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        next_id: 0,
        step: Normal::new(0.0, cfg.sigma).map_err(|e| TrackError::Config(e.to_string()))?,
        noise: Normal::new(0.0, cfg.features.noise).map_err(|e| TrackError::Config(e.to_string()))?,
    };
    let appear = if cfg.appear_rate > 0.0 {
        Some(Poisson::new(cfg.appear_rate).map_err(|e| TrackError::Config(e.to_string()))?)
    } else {
        None
    };

    let mut objects: Vec<Object> = Vec::new();
    for _ in 0..cfg.initial {
        if let Some(o) = sim.new_object(&objects) {
            objects.push(o);
        }
    }
    let mut dets = Vec::new();
    let mut gt = LineageGraph::new();
    let (mut trials, mut draws) = (0, 0);
    for t in 0..cfg.frames as Frame {
        for o in objects.iter_mut() {
            let parent = o.node;
            o.node = sim.id();
            gt.add_node(o.node);
            if parent != 0 {
                gt.add_edge(parent, o.node, None);
            }
            dets.push(Detection::point(o.node, t, o.pos[0], o.pos[1]).with_features(o.features()));
        }
        if t + 1 == cfg.frames {
            break;
        }

        let mut next: Vec<Object> = Vec::with_capacity(objects.len());
        for i in 0..objects.len() {
            let u: f64 = sim.rng.random();
            trials += 1;
            if u < cfg.p_disappear {
                continue;
            }
            let children = if u < cfg.p_disappear + cfg.p_divide {
                draws += 1;
                match sim.divide(&objects[i], &objects, i) {
                    Some(pair) => pair.to_vec(),
                    None => {
                        let mut o = objects[i].clone();
                        sim.evolve(&mut o);
                        vec![o]
                    }
                }
            } else {
                let mut o = objects[i].clone();
                sim.evolve(&mut o);
                vec![o]
            };
            for c in children {
                if sim.inside(c.pos) {
                    next.push(c);
                } else if let Some(o) = sim.reenter(c.pos, &next) {
                    next.push(o);
                }
            }
        }
        if let Some(p) = appear {
            let n = p.sample(&mut sim.rng) as usize;
            for _ in 0..n {
                if let Some(o) = sim.new_object(&next) {
                    next.push(o);
                }
            }
        }
        objects = next;
    }
    Ok(SimVideo {
        detections: dets,
        gt,
        division_trials: trials,
        division_draws: draws,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub split: Split,
    pub config: SimConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub videos: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = (usize, &ManifestEntry)> + '_ {
        self.videos.iter().enumerate().filter(move |(_, v)| v.split == split)
    }
}

/// Seed of video `i` under master seed `seed` (a SplitMix64 step, so
/// distinct indices never share a stream).
pub fn video_seed(seed: u64, i: usize) -> u64 {
    let mut z = seed.wrapping_add((i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Assigns one video per config to train/val/test in order, with counts
/// rounded from `ratios`, and reseeds every config from `seed`.
pub fn plan_dataset(configs: &[SimConfig], ratios: [f64; 3], seed: u64) -> Result<Manifest> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(TrackError::Config(format!("split ratios {ratios:?} must be in [0, 1] and sum to 1")));
    }
    let n = configs.len();
    let n_train = (n as f64 * ratios[0]).round() as usize;
    let n_val = ((n as f64 * ratios[1]).round() as usize).min(n - n_train);
    let videos = configs
        .iter()
        .enumerate()
        .map(|(i, c)| {
            c.validate()?;
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            Ok(ManifestEntry {
                name: format!("{}_{i:03}", split.name()),
                split,
                config: c.clone().with_seed(video_seed(seed, i)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Manifest { seed, ratios, videos })
}

/// Simulates every manifest entry, in parallel.
pub fn generate(manifest: &Manifest) -> Result<Vec<SimVideo>> {
    manifest.videos.par_iter().map(|v| simulate(&v.config)).collect()
}

pub fn make_dataset(configs: &[SimConfig], ratios: [f64; 3], seed: u64) -> Result<(Manifest, Vec<SimVideo>)> {
    let m = plan_dataset(configs, ratios, seed)?;
    let videos = generate(&m)?;
    Ok((m, videos))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lineage::frame_map;

    #[test]
    fn same_seed_same_video() {
        let c = SimConfig::easy().with_seed(3);
        assert_eq!(simulate(&c).unwrap(), simulate(&c).unwrap());
        assert_ne!(simulate(&c).unwrap(), simulate(&c.clone().with_seed(4)).unwrap());
    }

    #[test]
    fn gt_is_valid() {
        for cfg in [SimConfig::easy(), SimConfig::hard()] {
            let v = simulate(&cfg.with_seed(1)).unwrap();
            let frames = frame_map(&v.detections);
            assert!(v.gt.validate(&frames).unwrap().is_empty());
            for (p, c, _) in v.gt.edges() {
                assert_eq!(frames[&c], frames[&p] + 1);
            }
            for d in &v.detections {
                d.validate().unwrap();
            }
        }
    }

    #[test]
    fn no_divisions_means_chains() {
        let mut c = SimConfig::hard().with_seed(2);
        c.p_divide = 0.0;
        let v = simulate(&c).unwrap();
        assert!(v.gt.nodes().all(|n| v.gt.out_degree(n) <= 1));
        assert_eq!(v.n_divisions(), 0);
    }

    #[test]
    fn hard_preset_size() {
        let c = SimConfig::hard().with_seed(5);
        let v = simulate(&c).unwrap();
        let per_frame = v.detections.len() as f64 / c.frames as f64;
        assert!((70.0..150.0).contains(&per_frame), "{per_frame}");
        assert!(v.n_divisions() > 50);
    }

    #[test]
    fn division_draws_are_binomial() {
        for seed in 0..5 {
            let v = simulate(&SimConfig::hard().with_seed(seed)).unwrap();
            let (n, p) = (v.division_trials as f64, SimConfig::hard().p_divide);
            let dev = (v.division_draws as f64 - n * p).abs();
            assert!(dev <= 4.0 * (n * p * (1.0 - p)).sqrt(), "seed {seed}: {} of {n}", v.division_draws);
            assert!(v.n_divisions() <= v.division_draws);
        }
    }

    #[test]
    fn split_counts() {
        let m = plan_dataset(&vec![SimConfig::easy(); 10], [0.8, 0.1, 0.1], 7).unwrap();
        let count = |s| m.split(s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (8, 1, 1));
        let mut seeds: Vec<u64> = m.videos.iter().map(|v| v.config.seed).collect();
        seeds.sort();
        seeds.dedup();
        assert_eq!(seeds.len(), 10);
        assert!(plan_dataset(&[SimConfig::easy()], [0.5, 0.1, 0.1], 0).is_err());
    }
}
