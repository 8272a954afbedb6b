//! Synthetic multi-scenario click/conversion data with planted interactions.
//!
//! Each informative feature `a` contributes a scalar `s_a = v_a · x_a`.
//! Informative features are partitioned into latent blocks with summaries
//! `z_p = Σ_{a∈p} s_a`. The click score is a sum of cross-block products
//! `Σ_{p<q} c_pq z_p z_q`, a small linear term, and a scenario-specific
//! term, standardized per scenario. A sample clicks when
//! `f − t_c + noise·ε > 0` with logistic `ε`, `t_c` chosen so scenario `c`
//! has the target click rate. Conversions use a second score and only
//! happen on clicks.
//!
//! Feature 0 comes from a per-user table and feature 1 from a per-item
//! table; the rest are drawn per sample.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::FeatureSpec;
use crate::error::{bail, Result};
use crate::heads::TASKS;
use crate::rng::{stream, SeededRng};

const CALIBRATION_SAMPLES: usize = 20_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_users: usize,
    pub n_items: usize,
    /// Width of every raw feature.
    pub dims: Vec<usize>,
    pub scenarios: usize,
    /// Scale of the logistic label noise relative to the unit-variance score.
    pub noise: f64,
    /// Features that drive labels; `None` means all of them.
    pub informative: Option<Vec<usize>>,
    /// Number of latent blocks the informative features are split into.
    pub blocks: usize,
    /// Weight of the per-feature linear term.
    pub linear: f64,
    /// Weight of the scenario-specific term.
    pub scenario_shift: f64,
    pub target_ctr: f64,
    /// Fraction of clicks that convert.
    pub conversion_rate: f64,
    /// Share of samples in the main scenario 0.
    pub main_share: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self::desk(0)
    }
}

impl SyntheticConfig {
    /// Matches [`crate::config::ModelConfig::desk`]'s feature layout.
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            n_users: 200,
            n_items: 300,
            dims: vec![8, 8, 4, 4, 4, 4, 4, 4],
            scenarios: 3,
            noise: 0.11,
            informative: None,
            blocks: 4,
            linear: 0.3,
            scenario_shift: 0.5,
            target_ctr: 0.25,
            conversion_rate: 0.5,
            main_share: 0.5,
        }
    }

    /// Twelve narrow features of which six drive labels, for grouping ablations
    /// where the token slots cannot hold every feature.
    pub fn selection(seed: u64) -> Self {
        Self { dims: vec![4; 12], informative: Some(vec![0, 1, 3, 6, 8, 11]), blocks: 3, ..Self::desk(seed) }
    }

    pub fn feature_spec(&self, embed_dim: usize, groups: usize, group_size: usize) -> FeatureSpec {
        FeatureSpec { dims: self.dims.clone(), embed_dim, groups, group_size }
    }

    pub fn informative_features(&self) -> Vec<usize> {
        self.informative.clone().unwrap_or_else(|| (0..self.dims.len()).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenarios < 2 {
            bail!(Config, "synthetic data needs at least 2 scenarios, got {}", self.scenarios);
        }
        if self.dims.len() < 2 || self.dims.contains(&0) {
            bail!(Config, "synthetic data needs at least 2 features of positive width");
        }
        if self.n_users == 0 || self.n_items == 0 {
            bail!(Config, "user and item tables must be nonempty");
        }
        if !(0.02..=0.5).contains(&self.target_ctr) {
            bail!(Config, "target click rate {} outside [0.02, 0.5]", self.target_ctr);
        }
        if !(self.conversion_rate > 0.0 && self.conversion_rate < 1.0) || !(self.main_share > 0.0 && self.main_share < 1.0) {
            bail!(Config, "conversion rate and main share must lie in (0, 1)");
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            bail!(Config, "noise {} must be finite and nonnegative", self.noise);
        }
        let informative = self.informative_features();
        if informative.len() < 2 || informative.iter().any(|&f| f >= self.dims.len()) {
            bail!(Config, "informative features {:?} invalid for {} features", informative, self.dims.len());
        }
        if self.blocks < 2 || self.blocks > informative.len() {
            bail!(Config, "{} blocks for {} informative features", self.blocks, informative.len());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// One raw vector per feature.
    pub features: Vec<Vec<f64>>,
    pub user: u64,
    pub item: u64,
    pub scenario: usize,
    pub click: u8,
    pub conversion: u8,
}

impl Sample {
    /// (CTR label, CTCVR label).
    pub fn labels(&self) -> [u8; TASKS] {
        [self.click, crate::heads::ctcvr_label(self.click, self.conversion)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub dims: Vec<usize>,
    pub scenarios: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// First `at` samples and the rest.
    pub fn split(&self, at: usize) -> Result<(Dataset, Dataset)> {
        if at == 0 || at >= self.len() {
            bail!(Domain, "split point {} leaves an empty side of {}", at, self.len());
        }
        let part = |s: &[Sample]| Dataset { dims: self.dims.clone(), scenarios: self.scenarios, samples: s.to_vec() };
        Ok((part(&self.samples[..at]), part(&self.samples[at..])))
    }

    /// Check every sample against the declared layout.
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.features.len() != self.dims.len() {
                bail!(Domain, "sample {} has {} features, expected {}", i, s.features.len(), self.dims.len());
            }
            for (f, (v, &w)) in s.features.iter().zip(&self.dims).enumerate() {
                if v.len() != w {
                    return Err(crate::Error::FeatureWidth { feature: f, expected: w, got: v.len() });
                }
            }
            if s.scenario >= self.scenarios {
                bail!(Domain, "sample {} has scenario {} of {}", i, s.scenario, self.scenarios);
            }
            if s.click > 1 || s.conversion > s.click {
                bail!(Domain, "sample {} has labels click={} conversion={}", i, s.click, s.conversion);
            }
        }
        Ok(())
    }

    pub fn check_spec(&self, spec: &FeatureSpec) -> Result<()> {
        if spec.dims != self.dims {
            bail!(Config, "dataset feature widths {:?} differ from model's {:?}", self.dims, spec.dims);
        }
        Ok(())
    }
}

/// The hidden ground truth behind a synthetic dataset.
#[derive(Clone, Debug)]
pub struct World {
    cfg: SyntheticConfig,
    users: Vec<Vec<f64>>,
    items: Vec<Vec<f64>>,
    /// Projection per informative feature (zero vector for noise features).
    projections: Vec<Vec<f64>>,
    block_of: Vec<Option<usize>>,
    click_pairs: Vec<f64>,
    convert_pairs: Vec<f64>,
    linear: Vec<f64>,
    /// Per scenario, a coefficient per feature scalar.
    scenario_linear: Vec<Vec<f64>>,
    /// Per scenario and task: (mean, std, threshold) of the raw score.
    calibration: Vec<[(f64, f64, f64); TASKS]>,
}

fn unit_vector(rng: &mut SeededRng, width: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..width).map(|_| rng.normal()).collect();
    let n = libm::sqrt(v.iter().map(|x| x * x).sum());
    v.into_iter().map(|x| x / n).collect()
}

fn pair_index(blocks: usize, p: usize, q: usize) -> usize {
    p * blocks + q
}

impl World {
    pub fn new(cfg: &SyntheticConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::split(cfg.seed, stream::DATA);
        let table = |rng: &mut SeededRng, n: usize, w: usize| -> Vec<Vec<f64>> { (0..n).map(|_| (0..w).map(|_| rng.normal()).collect()).collect() };
        let users = table(&mut rng, cfg.n_users, cfg.dims[0]);
        let items = table(&mut rng, cfg.n_items, cfg.dims[1]);
        let mut informative = cfg.informative_features();
        rng.shuffle(&mut informative);
        let mut block_of = vec![None; cfg.dims.len()];
        for (i, &f) in informative.iter().enumerate() {
            block_of[f] = Some(i % cfg.blocks);
        }
        let projections = cfg.dims.iter().enumerate().map(|(f, &w)| if block_of[f].is_some() { unit_vector(&mut rng, w) } else { vec![0.0; w] }).collect();
        let b = cfg.blocks;
        let pairs = |rng: &mut SeededRng| {
            let mut c = vec![0.0; b * b];
            for p in 0..b {
                for q in p + 1..b {
                    c[pair_index(b, p, q)] = rng.normal();
                }
            }
            c
        };
        let click_pairs = pairs(&mut rng);
        let convert_pairs = pairs(&mut rng);
        let n_f = cfg.dims.len();
        let linear = (0..n_f).map(|_| rng.normal()).collect();
        let scenario_linear = (0..cfg.scenarios).map(|_| (0..n_f).map(|_| rng.normal()).collect()).collect();
        let mut world =
            Self { cfg: cfg.clone(), users, items, projections, block_of, click_pairs, convert_pairs, linear, scenario_linear, calibration: Vec::new() };
        world.calibrate();
        Ok(world)
    }

    fn calibrate(&mut self) {
        let mut rng = SeededRng::split(self.cfg.seed, stream::DATA_CALIBRATION);
        let c = self.cfg.scenarios;
        let mut raw: Vec<Vec<[f64; TASKS]>> = vec![Vec::new(); c];
        for i in 0..CALIBRATION_SAMPLES {
            let scenario = i % c;
            let features = self.draw_features(&mut rng).2;
            raw[scenario].push(self.raw_scores(&features, scenario));
        }
        let quantile = |mut v: Vec<f64>, q: f64| {
            v.sort_by(f64::total_cmp);
            v[((v.len() as f64 * q) as usize).min(v.len() - 1)]
        };
        self.calibration = raw
            .into_iter()
            .map(|rows| {
                let mut out = [(0.0, 1.0, 0.0); TASKS];
                for (t, slot) in out.iter_mut().enumerate() {
                    let v: Vec<f64> = rows.iter().map(|r| r[t]).collect();
                    let n = v.len() as f64;
                    let mean = v.iter().sum::<f64>() / n;
                    let std = libm::sqrt(v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).max(1e-12);
                    let standardized: Vec<f64> = v.iter().map(|x| (x - mean) / std).collect();
                    let rate = if t == 0 { self.cfg.target_ctr } else { self.cfg.conversion_rate };
                    *slot = (mean, std, quantile(standardized, 1.0 - rate));
                }
                out
            })
            .collect();
    }

    fn draw_features(&self, rng: &mut SeededRng) -> (u64, u64, Vec<Vec<f64>>) {
        let user = rng.below(self.cfg.n_users);
        let item = rng.below(self.cfg.n_items);
        let mut features = Vec::with_capacity(self.cfg.dims.len());
        features.push(self.users[user].clone());
        features.push(self.items[item].clone());
        for &w in &self.cfg.dims[2..] {
            features.push((0..w).map(|_| rng.normal()).collect());
        }
        (user as u64, item as u64, features)
    }

    fn raw_scores(&self, features: &[Vec<f64>], scenario: usize) -> [f64; TASKS] {
        let b = self.cfg.blocks;
        let mut z = vec![0.0; b];
        let mut scalars = vec![0.0; features.len()];
        for (f, x) in features.iter().enumerate() {
            if let Some(p) = self.block_of[f] {
                let s: f64 = x.iter().zip(&self.projections[f]).map(|(a, v)| a * v).sum();
                scalars[f] = s;
                z[p] += s;
            }
        }
        let cross = |c: &[f64]| -> f64 {
            let mut acc = 0.0;
            for p in 0..b {
                for q in p + 1..b {
                    acc += c[pair_index(b, p, q)] * z[p] * z[q];
                }
            }
            acc
        };
        let dot = |w: &[f64]| -> f64 { w.iter().zip(&scalars).map(|(a, s)| a * s).sum() };
        let scen = &self.scenario_linear[scenario];
        let shift = self.cfg.scenario_shift;
        let click = cross(&self.click_pairs) + self.cfg.linear * dot(&self.linear) + shift * dot(scen) * z[0];
        let convert = cross(&self.convert_pairs) + shift * dot(scen);
        [click, convert]
    }

    /// Standardized scores minus thresholds: positive means the noiseless label is 1.
    pub fn margins(&self, sample: &Sample) -> Result<[f64; TASKS]> {
        if sample.scenario >= self.cfg.scenarios || sample.features.len() != self.cfg.dims.len() {
            bail!(Domain, "sample does not match the synthetic layout");
        }
        let raw = self.raw_scores(&sample.features, sample.scenario);
        let cal = &self.calibration[sample.scenario];
        Ok(core::array::from_fn(|t| (raw[t] - cal[t].0) / cal[t].1 - cal[t].2))
    }

    /// Ground-truth ranking scores: click probability and click-and-convert probability.
    pub fn oracle_scores(&self, sample: &Sample) -> Result<[f64; TASKS]> {
        let m = self.margins(sample)?;
        let noise = self.cfg.noise;
        if noise == 0.0 {
            return Ok([m[0], m[0].min(m[1])]);
        }
        let p = |x: f64| crate::graph::sigmoid(x / noise);
        Ok([p(m[0]), p(m[0]) * p(m[1])])
    }

    /// Draw `n` labelled samples.
    pub fn sample(&self, n: usize, rng: &mut SeededRng) -> Result<Vec<Sample>> {
        if n == 0 {
            bail!(Domain, "requested zero samples");
        }
        let c = self.cfg.scenarios;
        (0..n)
            .map(|_| {
                let scenario = if rng.uniform() < self.cfg.main_share { 0 } else { 1 + rng.below(c - 1) };
                let (user, item, features) = self.draw_features(rng);
                let mut s = Sample { features, user, item, scenario, click: 0, conversion: 0 };
                let m = self.margins(&s)?;
                let noise = self.cfg.noise;
                let click = m[0] + noise * rng.logistic() > 0.0;
                let convert = m[1] + noise * rng.logistic() > 0.0;
                s.click = click as u8;
                s.conversion = (click && convert) as u8;
                Ok(s)
            })
            .collect()
    }
}

/// Deterministic dataset of `n` samples.
pub fn generate(cfg: &SyntheticConfig, n: usize) -> Result<Dataset> {
    let world = World::new(cfg)?;
    let mut rng = SeededRng::split(cfg.seed, stream::DATA).fork(1);
    Ok(Dataset { dims: cfg.dims.clone(), scenarios: cfg.scenarios, samples: world.sample(n, &mut rng)? })
}
