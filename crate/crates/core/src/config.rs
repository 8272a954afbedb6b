//! Model and training configuration, presets, and ablation grids.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::optim::AdamConfig;

/// Raw feature layout and the grouping it is folded into.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    /// Input width of every raw feature; `n_f = dims.len()`.
    pub dims: Vec<usize>,
    /// Unified embedding width `e` after alignment.
    pub embed_dim: usize,
    /// Number of groups (tokens) `n_g`.
    pub groups: usize,
    /// Features selected per group `k`.
    pub group_size: usize,
}

impl FeatureSpec {
    pub fn n_features(&self) -> usize {
        self.dims.len()
    }

    /// Token dimension `d = k · e`.
    pub fn token_dim(&self) -> usize {
        self.group_size * self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        let n_f = self.dims.len();
        if n_f == 0 {
            bail!(Config, "at least one feature is required");
        }
        if let Some(i) = self.dims.iter().position(|&w| w == 0) {
            bail!(Config, "feature {} has zero width", i);
        }
        if self.embed_dim == 0 {
            bail!(Config, "embed_dim must be at least 1");
        }
        if self.groups == 0 {
            bail!(Config, "groups must be at least 1");
        }
        if self.group_size == 0 || self.group_size > n_f {
            bail!(Config, "group_size {} must lie in 1..={}", self.group_size, n_f);
        }
        Ok(())
    }
}

/// How raw features are assigned to tokens (G1–G3).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingMode {
    /// G1: seeded random assignment with frozen uniform weights.
    Random,
    /// G2: learnable selection matrix with top-k + softmax.
    AutoToken,
    /// G3: fixed prior assignment with learnable per-group weights.
    Manual,
}

/// Token-mixing matrices (M1–M3, plus the degenerate all-ones start).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingInit {
    /// M1: no learnable matrices; the block passes `Xᵀ` through.
    FixedTranspose,
    /// M2: learnable, zero at start.
    Zeros,
    /// M3: learnable, random orthogonal at start.
    Orthogonal,
    /// Learnable, all ones at start. Collapses tokens to rank one.
    Ones,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormVariant {
    PreNorm,
    PostNorm,
    /// PreNorm plus one extra normalization after the final layer.
    PreNormL,
    /// `norm(input + body(input))`.
    PostNormR,
}

/// Weighting applied to fine-grained gate logits in the main scenario.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    Sigmoid,
    /// ReLU-weighted sparse MoE, the N1 ablation baseline.
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeConfig {
    /// Token-level shared experts `K_s`, always active.
    pub shared_experts: usize,
    /// Base experts `N`.
    pub experts: usize,
    /// Split factor `m`; the fine-grained pool holds `m·N` sub-experts.
    pub split: usize,
    /// Base expert hidden width is `ffn_mult · d`; sub-experts get `1/m` of it.
    pub ffn_mult: usize,
    pub gate: GateKind,
}

impl MoeConfig {
    pub fn pool(&self) -> usize {
        self.experts * self.split
    }
}

/// Scenario-level routing for every non-main scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioMoeConfig {
    /// Scenario-level shared experts, always active, weighted by `p`.
    pub shared: usize,
    /// Experts retained from the fine-grained pool per token.
    pub route_k: usize,
    /// Whether the scenario's designated expert receives the `gamma` bonus.
    pub forced: bool,
    pub gamma: f64,
}

impl Default for ScenarioMoeConfig {
    fn default() -> Self {
        ScenarioVariant::V4.preset(DEFAULT_GAMMA)
    }
}

pub const DEFAULT_GAMMA: f64 = 10.0;

/// Scenario-MoE ablation presets; every one activates four experts per token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioVariant {
    V1,
    V2,
    V3,
    V4,
    V5,
    V6,
}

impl ScenarioVariant {
    pub const ALL: [ScenarioVariant; 6] = [Self::V1, Self::V2, Self::V3, Self::V4, Self::V5, Self::V6];

    pub fn preset(self, gamma: f64) -> ScenarioMoeConfig {
        let (shared, route_k, forced) = match self {
            Self::V1 => (4, 0, false),
            Self::V2 => (3, 1, true),
            Self::V3 => (3, 1, false),
            Self::V4 => (2, 2, true),
            Self::V5 => (2, 2, false),
            Self::V6 => (1, 3, false),
        };
        ScenarioMoeConfig { shared, route_k, forced, gamma }
    }

    pub fn parse(id: &str) -> Result<Self> {
        Ok(match id.to_ascii_uppercase().as_str() {
            "V1" => Self::V1,
            "V2" => Self::V2,
            "V3" => Self::V3,
            "V4" => Self::V4,
            "V5" => Self::V5,
            "V6" => Self::V6,
            _ => bail!(Config, "unknown scenario variant {:?}", id),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub features: FeatureSpec,
    /// Must equal `group_size · embed_dim`.
    pub token_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub grouping: GroupingMode,
    /// Feature ids per group, required by `Manual` grouping.
    pub manual_groups: Option<Vec<Vec<usize>>>,
    pub mixing: MixingInit,
    pub norm: NormVariant,
    pub moe: MoeConfig,
    pub scenario_moe: ScenarioMoeConfig,
    /// Scenario count `C`; scenario 0 is the main scenario.
    pub scenarios: usize,
    pub adapter_rank: usize,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Gradient-check sized model (a few thousand scalars).
    pub fn tiny() -> Self {
        Self {
            features: FeatureSpec { dims: vec![3, 2, 4, 1, 2, 3], embed_dim: 2, groups: 3, group_size: 2 },
            token_dim: 4,
            layers: 2,
            heads: 2,
            grouping: GroupingMode::AutoToken,
            manual_groups: None,
            mixing: MixingInit::Orthogonal,
            norm: NormVariant::PostNormR,
            moe: MoeConfig { shared_experts: 1, experts: 2, split: 2, ffn_mult: 1, gate: GateKind::Sigmoid },
            scenario_moe: ScenarioMoeConfig::default(),
            scenarios: 3,
            adapter_rank: 2,
            head_hidden: 8,
        }
    }

    /// Desk-scale default, roughly 10⁵ parameters.
    pub fn desk() -> Self {
        Self {
            features: FeatureSpec { dims: vec![8, 8, 4, 4, 4, 4, 4, 4], embed_dim: 16, groups: 6, group_size: 2 },
            token_dim: 32,
            layers: 2,
            heads: 2,
            grouping: GroupingMode::AutoToken,
            manual_groups: None,
            mixing: MixingInit::Orthogonal,
            norm: NormVariant::PostNormR,
            moe: MoeConfig { shared_experts: 1, experts: 2, split: 2, ffn_mult: 2, gate: GateKind::Sigmoid },
            scenario_moe: ScenarioMoeConfig::default(),
            scenarios: 3,
            adapter_rank: 4,
            head_hidden: 256,
        }
    }

    /// Pairs with the `selection` synthetic layout: 12 features, 3 tokens of 2.
    pub fn selection() -> Self {
        let mut cfg = Self::desk();
        cfg.features = FeatureSpec { dims: vec![4; 12], embed_dim: 8, groups: 3, group_size: 2 };
        cfg.token_dim = 16;
        cfg.head_hidden = 128;
        cfg
    }

    fn production_scale(layers: usize, experts: usize, groups: usize, token_dim: usize, group_size: usize) -> Self {
        Self {
            features: FeatureSpec { dims: vec![16; 413], embed_dim: token_dim / group_size, groups, group_size },
            token_dim,
            layers,
            heads: 4,
            grouping: GroupingMode::AutoToken,
            manual_groups: None,
            mixing: MixingInit::Orthogonal,
            norm: NormVariant::PostNormR,
            moe: MoeConfig { shared_experts: 0, experts, split: 1, ffn_mult: 4, gate: GateKind::Sigmoid },
            scenario_moe: ScenarioMoeConfig::default(),
            scenarios: 5,
            adapter_rank: 4,
            head_hidden: 512,
        }
    }

    /// 4 layers, 3 experts, 12 tokens, token dimension 204.
    pub fn production_15m() -> Self {
        Self::production_scale(4, 3, 12, 204, 12)
    }

    /// 8 layers, 4 experts, 27 tokens, token dimension 756.
    pub fn production_1b() -> Self {
        Self::production_scale(8, 4, 27, 756, 27)
    }

    /// Four configs of strictly increasing depth, token count and width.
    pub fn size_ladder() -> Vec<(String, ModelConfig)> {
        [(1, 3, 4), (2, 4, 8), (3, 6, 12), (4, 8, 16)]
            .into_iter()
            .map(|(layers, groups, e)| {
                let mut cfg = Self::desk();
                cfg.layers = layers;
                cfg.features.groups = groups;
                cfg.features.embed_dim = e;
                cfg.token_dim = cfg.features.token_dim();
                (format!("L{layers}-g{groups}-d{}", cfg.token_dim), cfg)
            })
            .collect()
    }

    pub fn pool(&self) -> usize {
        self.moe.pool()
    }

    /// Hidden width of a token-level shared expert.
    pub fn shared_hidden(&self) -> usize {
        self.moe.ffn_mult * self.token_dim
    }

    /// Hidden width of a fine-grained (or scenario-shared) sub-expert.
    pub fn sub_hidden(&self) -> usize {
        self.shared_hidden() / self.moe.split
    }

    pub fn has_scenario_moe(&self) -> bool {
        self.scenarios >= 2
    }

    /// Scenario-shared experts present in each layer.
    pub fn scenario_shared(&self) -> usize {
        if self.has_scenario_moe() {
            self.scenario_moe.shared
        } else {
            0
        }
    }

    /// Designated expert `i*(c)` for a non-main scenario.
    pub fn designated_expert(&self, scenario: usize) -> usize {
        (scenario.max(1) - 1) % self.pool()
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        let d = self.token_dim;
        if d != self.features.token_dim() {
            bail!(Config, "token_dim {} must equal group_size × embed_dim = {}", d, self.features.token_dim());
        }
        if self.layers == 0 {
            bail!(Config, "layers must be at least 1");
        }
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            bail!(Config, "token_dim {} is not divisible by heads {}", d, self.heads);
        }
        let moe = &self.moe;
        if moe.experts == 0 || moe.split == 0 || moe.ffn_mult == 0 {
            bail!(Config, "experts, split and ffn_mult must all be at least 1");
        }
        if !self.shared_hidden().is_multiple_of(moe.split) {
            bail!(Config, "expert width {} is not divisible by split {}", self.shared_hidden(), moe.split);
        }
        if self.scenarios == 0 {
            bail!(Config, "scenarios must be at least 1");
        }
        if self.has_scenario_moe() {
            let s = &self.scenario_moe;
            if s.route_k > self.pool() {
                bail!(Config, "route_k {} exceeds the fine-grained pool of {}", s.route_k, self.pool());
            }
            if s.forced && s.route_k == 0 {
                bail!(Config, "a forced scenario expert needs route_k ≥ 1");
            }
            if s.forced && !(s.gamma > 0.0 && s.gamma.is_finite()) {
                bail!(Config, "gamma must be positive and finite, got {}", s.gamma);
            }
        }
        if self.adapter_rank == 0 || self.head_hidden == 0 {
            bail!(Config, "adapter_rank and head_hidden must be at least 1");
        }
        if self.grouping == GroupingMode::Manual {
            let Some(groups) = &self.manual_groups else {
                bail!(Config, "manual grouping requires manual_groups");
            };
            validate_assignment(groups, self.features.groups, self.features.group_size, self.features.n_features())?;
        }
        Ok(())
    }

    /// Exact learnable-scalar count, computed without building the model.
    pub fn count_params(&self) -> usize {
        let f = &self.features;
        let (e, d, n_g, k) = (f.embed_dim, self.token_dim, f.groups, f.group_size);
        let mut total = 0;
        for &w in &f.dims {
            total += w * e + e + e * e + e;
        }
        total += match self.grouping {
            GroupingMode::AutoToken => n_g * f.n_features(),
            GroupingMode::Manual => n_g * k,
            GroupingMode::Random => 0,
        };
        let pool = self.pool();
        let ks = self.moe.shared_experts;
        let (fw, hw) = (self.shared_hidden(), self.sub_hidden());
        let s = self.scenario_shared();
        let mut layer = 0;
        if self.mixing != MixingInit::FixedTranspose {
            layer += self.heads * n_g * n_g;
        }
        layer += 2 * d;
        if ks > 0 {
            layer += d * ks + ks + d * ks * fw + ks * fw + ks * fw * d + ks * d;
        }
        layer += d * pool + pool;
        if self.has_scenario_moe() {
            layer += self.scenarios * d;
            if s > 0 {
                layer += 2 * d * s + s;
            }
            if self.scenario_moe.route_k > 0 {
                layer += 2 * d * pool + pool;
            }
        }
        let bank = pool + s;
        layer += d * bank * hw + bank * hw + bank * hw * d + bank * d;
        total += self.layers * layer;
        if self.norm == NormVariant::PreNormL {
            total += 2 * d;
        }
        let flat = n_g * d;
        let hh = self.head_hidden;
        total += flat * hh + hh + hh * 2 + 2;
        let r = self.adapter_rank;
        total += (self.scenarios - 1) * (flat * r + r * hh + hh * r + r * 2);
        total
    }

    /// Multiply-adds per sample in the expert layers, for the constant-compute check.
    pub fn expert_macs_per_token(&self) -> usize {
        let d = self.token_dim;
        let dense = self.moe.shared_experts * 2 * d * self.shared_hidden();
        let pool = self.pool() * 2 * d * self.sub_hidden();
        dense + pool
    }
}

pub fn validate_assignment(groups: &[Vec<usize>], n_groups: usize, k: usize, n_features: usize) -> Result<()> {
    if groups.len() != n_groups {
        bail!(Config, "manual assignment has {} groups, expected {}", groups.len(), n_groups);
    }
    for (g, members) in groups.iter().enumerate() {
        if members.len() != k {
            bail!(Config, "manual group {} has {} features, expected {}", g, members.len(), k);
        }
        for (i, &f) in members.iter().enumerate() {
            if f >= n_features {
                bail!(Config, "manual group {} references feature {} of {}", g, f, n_features);
            }
            if members[..i].contains(&f) {
                bail!(Config, "manual group {} repeats feature {}", g, f);
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Evaluate every this many steps (0: only at start and end).
    pub eval_every: usize,
    /// Refuse to train models with more parameters than this.
    pub param_budget: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { optimizer: AdamConfig::default(), batch_size: 128, steps: 2000, seed: 0, eval_every: 500, param_budget: 5_000_000 }
    }
}

impl TrainConfig {
    /// Optimizer settings reported for the production models.
    pub fn production() -> Self {
        Self { optimizer: AdamConfig { learning_rate: 5e-5, ..AdamConfig::default() }, batch_size: 4800, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.optimizer.learning_rate;
        if !(lr > 0.0 && lr.is_finite()) {
            bail!(Config, "learning rate must be positive, got {}", lr);
        }
        if self.batch_size == 0 {
            bail!(Config, "batch_size must be at least 1");
        }
        Ok(())
    }
}

/// Built-in ablation grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    Grouping,
    Mixing,
    DenseMoe,
    ScenarioMoe,
    Norm,
}

impl GridKind {
    pub const ALL: [GridKind; 5] = [Self::Grouping, Self::Mixing, Self::DenseMoe, Self::ScenarioMoe, Self::Norm];

    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "grouping" => Self::Grouping,
            "mixing" => Self::Mixing,
            "dense_moe" | "dense-moe" => Self::DenseMoe,
            "scenario_moe" | "scenario-moe" => Self::ScenarioMoe,
            "norm" => Self::Norm,
            _ => bail!(Config, "unknown grid {:?}", name),
        })
    }

    /// Named variants of `base`. Variants may be invalid; callers validate.
    pub fn variants(self, base: &ModelConfig) -> Vec<(String, ModelConfig)> {
        let with = |name: &str, f: &dyn Fn(&mut ModelConfig)| {
            let mut cfg = base.clone();
            f(&mut cfg);
            (name.to_string(), cfg)
        };
        match self {
            Self::Grouping => vec![
                with("G1", &|c| c.grouping = GroupingMode::Random),
                with("G2", &|c| c.grouping = GroupingMode::AutoToken),
                with("G3", &|c| {
                    c.grouping = GroupingMode::Manual;
                    if c.manual_groups.is_none() {
                        c.manual_groups = Some(contiguous_groups(&c.features));
                    }
                }),
            ],
            Self::Mixing => vec![
                with("M1", &|c| c.mixing = MixingInit::FixedTranspose),
                with("M2", &|c| c.mixing = MixingInit::Zeros),
                with("M3", &|c| c.mixing = MixingInit::Orthogonal),
            ],
            Self::DenseMoe => {
                let total = base.moe.shared_experts + base.moe.experts;
                let dense = |name: &str, gate: GateKind, shared: usize| {
                    with(name, &move |c: &mut ModelConfig| {
                        c.moe.gate = gate;
                        c.moe.shared_experts = shared;
                        c.moe.experts = total.saturating_sub(shared);
                    })
                };
                vec![dense("N1", GateKind::Relu, 0), dense("N2", GateKind::Sigmoid, 0), dense("N3", GateKind::Sigmoid, 1), dense("N4", GateKind::Sigmoid, 2)]
            }
            Self::ScenarioMoe => ScenarioVariant::ALL
                .iter()
                .map(|v| {
                    let preset = v.preset(base.scenario_moe.gamma);
                    with(&format!("{v:?}"), &move |c: &mut ModelConfig| c.scenario_moe = preset.clone())
                })
                .collect(),
            Self::Norm => vec![
                with("PreNorm", &|c| c.norm = NormVariant::PreNorm),
                with("PostNorm", &|c| c.norm = NormVariant::PostNorm),
                with("PreNorm_L", &|c| c.norm = NormVariant::PreNormL),
                with("PostNorm_R", &|c| c.norm = NormVariant::PostNormR),
            ],
        }
    }
}

/// Group `g` takes features `g·k, g·k+1, …` (wrapping), a simple prior layout.
pub fn contiguous_groups(spec: &FeatureSpec) -> Vec<Vec<usize>> {
    let n_f = spec.n_features();
    (0..spec.groups).map(|g| (0..spec.group_size).map(|j| (g * spec.group_size + j) % n_f).collect()).collect()
}
