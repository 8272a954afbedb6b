//! Fine-grained mixture of experts with shared experts and scenario routing.
//!
//! Every layer has an always-on token-shared term (`K_s` experts, sigmoid
//! gate on the token) and a pool of `P = N·m` sub-experts. Main-scenario
//! tokens (scenario 0) weight the whole pool densely. Other scenarios see
//! `S` scenario-shared experts gated on `[u ‖ u_c]` and a sparse top-k route
//! over the pool, optionally with a bonus `γ` on the scenario's designated
//! expert.
//!
//! The expert bank stores the `S` scenario-shared experts first, then the
//! pool. All experts are evaluated for every token and masked by weight.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::{GateKind, ModelConfig};
use crate::error::{bail, Result};
use crate::graph::{sigmoid, silu, Graph, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::topk::topk_indices;

/// A bias-inclusive dense map, `w` stored `[in × out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Self {
        Self { w: store.add_weight(format!("{prefix}.w"), fan_in, fan_out, rng), b: store.add_zeros(format!("{prefix}.b"), &[fan_out]) }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        let xw = g.matmul(x, bound.var(self.w))?;
        g.add_row(xw, bound.var(self.b))
    }

    /// Single-row evaluation.
    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let (w, b) = (store.get(self.w), store.get(self.b));
        let mut out = b.data().to_vec();
        for (i, &xi) in x.iter().enumerate() {
            for (o, &wij) in out.iter_mut().zip(w.row(i)) {
                *o += xi * wij;
            }
        }
        out
    }
}

/// `count` two-layer experts `d → hidden → d` with SiLU, stored side by side.
#[derive(Clone, Copy, Debug)]
pub struct ExpertBank {
    pub count: usize,
    pub hidden: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ExpertBank {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, count: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        let width = count * hidden;
        let w1 = store.add_weight(format!("{prefix}.w1"), d, width, rng);
        let b1 = store.add_zeros(format!("{prefix}.b1"), &[width]);
        let w2 = store.add(format!("{prefix}.w2"), Tensor::randn(&[width, d], 1.0 / libm::sqrt(hidden as f64), rng));
        let b2 = store.add_zeros(format!("{prefix}.b2"), &[count, d]);
        Self { count, hidden, w1, b1, w2, b2 }
    }

    /// `Σ_i weights[:, i] · FFN_i(u)` for token rows `u [T × d]`, weights `[T × count]`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, u: Var, weights: Var) -> Result<Var> {
        let pre = g.matmul(u, bound.var(self.w1))?;
        let pre = g.add_row(pre, bound.var(self.b1))?;
        let act = g.silu(pre);
        let spread = g.repeat_cols(weights, self.hidden)?;
        let scaled = g.mul(act, spread)?;
        let out = g.matmul(scaled, bound.var(self.w2))?;
        let bias = g.matmul(weights, bound.var(self.b2))?;
        g.add(out, bias)
    }

    /// Output of expert `i` for a single token.
    pub fn expert(&self, store: &ParamStore, i: usize, u: &[f64]) -> Vec<f64> {
        let (w1, b1, w2, b2) = (store.get(self.w1), store.get(self.b1), store.get(self.w2), store.get(self.b2));
        let cols = i * self.hidden..(i + 1) * self.hidden;
        let mut hidden: Vec<f64> = b1.data()[cols.clone()].to_vec();
        for (r, &x) in u.iter().enumerate() {
            for (h, &w) in hidden.iter_mut().zip(&w1.row(r)[cols.clone()]) {
                *h += x * w;
            }
        }
        let mut out = b2.row(i).to_vec();
        for (j, h) in hidden.into_iter().enumerate() {
            let a = silu(h);
            for (o, &w) in out.iter_mut().zip(w2.row(cols.start + j)) {
                *o += a * w;
            }
        }
        out
    }
}

/// Apply a gate nonlinearity to raw logits.
pub fn gate_weights(logits: &[f64], kind: GateKind) -> Vec<f64> {
    logits
        .iter()
        .map(|&z| match kind {
            GateKind::Sigmoid => sigmoid(z),
            GateKind::Relu => z.max(0.0),
        })
        .collect()
}

/// Result of routing one token over the pool.
#[derive(Clone, Debug, PartialEq)]
pub struct Route {
    /// Logits after the designated-expert bonus.
    pub logits: Vec<f64>,
    /// Surviving pool indices, highest logit first.
    pub survivors: Vec<usize>,
    /// `σ(z_i) + p̃_i` on survivors, 0 elsewhere.
    pub beta: Vec<f64>,
}

/// Sparse routing from pool logits `z`.
///
/// `shared_gate` is aligned to the pool by index (zero-extended or
/// truncated). `bonus` adds `γ` to the logit of one designated expert.
pub fn route(z: &[f64], shared_gate: &[f64], route_k: usize, bonus: Option<(usize, f64)>) -> Result<Route> {
    if route_k > z.len() {
        bail!(Config, "route_k {} exceeds pool size {}", route_k, z.len());
    }
    let mut logits = z.to_vec();
    if let Some((i, gamma)) = bonus {
        if i >= logits.len() {
            bail!(Domain, "designated expert {} outside pool of {}", i, logits.len());
        }
        logits[i] += gamma;
    }
    let survivors = topk_indices(&logits, route_k)?;
    let mut beta = vec![0.0; logits.len()];
    for &i in &survivors {
        beta[i] = sigmoid(logits[i]) + shared_gate.get(i).copied().unwrap_or(0.0);
    }
    Ok(Route { logits, survivors, beta })
}

/// Routing metadata for one token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub layer: usize,
    pub scenario: usize,
    pub token: usize,
    /// True when the sparse scenario route was used rather than the dense pool.
    pub routed: bool,
    /// Designated expert `i*(c)`, when the scenario has one.
    pub designated: Option<usize>,
    /// Pool indices with nonzero weight.
    pub active: Vec<usize>,
    /// Pool weights (`β` when routed, gate weights otherwise).
    pub beta: Vec<f64>,
    /// Token-shared expert weights.
    pub alpha: Vec<f64>,
    /// Scenario-shared expert weights (empty on the dense path).
    pub shared_gate: Vec<f64>,
}

/// Activation statistics for one scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertUtilization {
    pub scenario: usize,
    pub tokens: usize,
    /// Fraction of tokens activating each pool expert.
    pub frequency: Vec<f64>,
    /// Mean pool weight per expert over all tokens.
    pub mean_weight: Vec<f64>,
    /// Designated expert and its activation frequency.
    pub designated: Option<(usize, f64)>,
}

/// Per-scenario expert activation frequency and mean weight.
pub fn expert_utilization(traces: &[RoutingTrace]) -> Result<Vec<ExpertUtilization>> {
    let Some(first) = traces.first() else {
        bail!(Domain, "expert utilization over no traces");
    };
    let pool = first.beta.len();
    let mut by_scenario: BTreeMap<usize, (usize, Vec<f64>, Vec<f64>, Option<usize>)> = BTreeMap::new();
    for t in traces {
        if t.beta.len() != pool {
            bail!(Domain, "trace pool width {} differs from {}", t.beta.len(), pool);
        }
        let entry = by_scenario.entry(t.scenario).or_insert_with(|| (0, vec![0.0; pool], vec![0.0; pool], t.designated));
        entry.0 += 1;
        for &i in &t.active {
            entry.1[i] += 1.0;
        }
        for (acc, &b) in entry.2.iter_mut().zip(&t.beta) {
            *acc += b;
        }
    }
    Ok(by_scenario
        .into_iter()
        .map(|(scenario, (tokens, counts, weights, designated))| {
            let n = tokens as f64;
            let frequency: Vec<f64> = counts.iter().map(|c| c / n).collect();
            ExpertUtilization {
                scenario,
                tokens,
                designated: designated.map(|i| (i, frequency[i])),
                mean_weight: weights.iter().map(|w| w / n).collect(),
                frequency,
            }
        })
        .collect())
}

/// Scenario parameters of one layer.
#[derive(Clone, Copy, Debug)]
pub struct ScenarioParams {
    /// Learnable scenario embeddings `[C × d]`.
    pub embedding: ParamId,
    pub shared_gate: Option<Linear>,
    pub router: Option<Linear>,
}

/// One layer's mixture of experts.
#[derive(Clone, Debug)]
pub struct MoeLayer {
    /// Layer index recorded in traces.
    pub layer: usize,
    pub d: usize,
    pub kind: GateKind,
    pub shared: Option<(Linear, ExpertBank)>,
    pub pool_gate: Linear,
    pub scenario: Option<ScenarioParams>,
    /// `[S scenario-shared | P pool]`.
    pub bank: ExpertBank,
    pub pool: usize,
    pub scenario_shared: usize,
    pub scenarios: usize,
    pub route_k: usize,
    pub forced: bool,
    pub gamma: f64,
}

impl MoeLayer {
    /// Register parameters under `prefix` in a fixed order.
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut SeededRng) -> Self {
        let d = cfg.token_dim;
        let ks = cfg.moe.shared_experts;
        let shared = (ks > 0).then(|| {
            let gate = Linear::new(store, &format!("{prefix}.shared.gate"), d, ks, rng);
            let bank = ExpertBank::new(store, &format!("{prefix}.shared"), d, ks, cfg.shared_hidden(), rng);
            (gate, bank)
        });
        let pool = cfg.pool();
        let pool_gate = Linear::new(store, &format!("{prefix}.pool.gate"), d, pool, rng);
        let s = cfg.scenario_shared();
        let route_k = if cfg.has_scenario_moe() { cfg.scenario_moe.route_k } else { 0 };
        let scenario = cfg.has_scenario_moe().then(|| {
            let embedding = store.add(format!("{prefix}.scenario.emb"), Tensor::randn(&[cfg.scenarios, d], 1.0, rng));
            let shared_gate = (s > 0).then(|| Linear::new(store, &format!("{prefix}.scenario.shared_gate"), 2 * d, s, rng));
            let router = (route_k > 0).then(|| Linear::new(store, &format!("{prefix}.scenario.router"), 2 * d, pool, rng));
            ScenarioParams { embedding, shared_gate, router }
        });
        let bank = ExpertBank::new(store, &format!("{prefix}.experts"), d, s + pool, cfg.sub_hidden(), rng);
        Self {
            layer: 0,
            d,
            kind: cfg.moe.gate,
            shared,
            pool_gate,
            scenario,
            bank,
            pool,
            scenario_shared: s,
            scenarios: cfg.scenarios.max(1),
            route_k,
            forced: cfg.scenario_moe.forced,
            gamma: cfg.scenario_moe.gamma,
        }
    }

    /// Designated pool expert of a non-main scenario.
    pub fn designated(&self, scenario: usize) -> Option<usize> {
        (scenario > 0 && self.scenario.is_some()).then(|| (scenario - 1) % self.pool)
    }

    fn bonus(&self, scenario: usize) -> Option<(usize, f64)> {
        if self.forced {
            self.designated(scenario).map(|i| (i, self.gamma))
        } else {
            None
        }
    }

    fn check_scenario(&self, scenario: usize) -> Result<()> {
        if scenario >= self.scenarios {
            bail!(Domain, "scenario {} out of range for {} scenarios", scenario, self.scenarios);
        }
        Ok(())
    }

    fn concat_scenario(&self, store: &ParamStore, u: &[f64], scenario: usize) -> Result<Vec<f64>> {
        self.check_scenario(scenario)?;
        let Some(sc) = &self.scenario else {
            bail!(Config, "layer has no scenario parameters");
        };
        let mut cat = u.to_vec();
        cat.extend_from_slice(store.get(sc.embedding).row(scenario));
        Ok(cat)
    }

    /// `p = σ(gate3([u ‖ u_c]))` for one token.
    pub fn scenario_shared_gate(&self, store: &ParamStore, u: &[f64], scenario: usize) -> Result<Vec<f64>> {
        let cat = self.concat_scenario(store, u, scenario)?;
        Ok(match self.scenario.as_ref().and_then(|s| s.shared_gate) {
            Some(gate) => gate_weights(&gate.apply(store, &cat), GateKind::Sigmoid),
            None => Vec::new(),
        })
    }

    /// Sparse route of one token of a non-main scenario.
    pub fn scenario_route(&self, store: &ParamStore, u: &[f64], scenario: usize) -> Result<Route> {
        let p = self.scenario_shared_gate(store, u, scenario)?;
        let cat = self.concat_scenario(store, u, scenario)?;
        match self.scenario.as_ref().and_then(|s| s.router) {
            Some(router) => route(&router.apply(store, &cat), &p, self.route_k, self.bonus(scenario)),
            None => Ok(Route { logits: vec![0.0; self.pool], survivors: Vec::new(), beta: vec![0.0; self.pool] }),
        }
    }

    /// Single-token reference evaluation of the whole layer.
    pub fn forward_token(&self, store: &ParamStore, u: &[f64], scenario: usize) -> Result<(Vec<f64>, RoutingTrace)> {
        self.check_scenario(scenario)?;
        if u.len() != self.d {
            bail!(Domain, "token width {} differs from {}", u.len(), self.d);
        }
        let mut h = vec![0.0; self.d];
        let mut accumulate = |bank: &ExpertBank, i: usize, w: f64| {
            if w != 0.0 {
                for (acc, y) in h.iter_mut().zip(bank.expert(store, i, u)) {
                    *acc += w * y;
                }
            }
        };
        let mut alpha = Vec::new();
        if let Some((gate, bank)) = &self.shared {
            alpha = gate_weights(&gate.apply(store, u), GateKind::Sigmoid);
            for (i, &a) in alpha.iter().enumerate() {
                accumulate(bank, i, a);
            }
        }
        let s = self.scenario_shared;
        let routed = scenario > 0 && self.scenario.is_some();
        let (beta, p) = if routed {
            let p = self.scenario_shared_gate(store, u, scenario)?;
            for (i, &w) in p.iter().enumerate() {
                accumulate(&self.bank, i, w);
            }
            (self.scenario_route(store, u, scenario)?.beta, p)
        } else {
            (gate_weights(&self.pool_gate.apply(store, u), self.kind), Vec::new())
        };
        for (j, &w) in beta.iter().enumerate() {
            accumulate(&self.bank, s + j, w);
        }
        let trace = RoutingTrace {
            layer: self.layer,
            scenario,
            token: 0,
            routed,
            designated: self.designated(scenario),
            active: (0..self.pool).filter(|&j| beta[j] != 0.0).collect(),
            beta,
            alpha,
            shared_gate: p,
        };
        Ok((h, trace))
    }

    /// Batched layer over token rows `u [T × d]`; `scenarios[t]` labels row `t`.
    ///
    /// When `traces` is given, one trace per row is appended.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, u: Var, scenarios: &[usize], traces: Option<&mut Vec<RoutingTrace>>) -> Result<Var> {
        let rows = g.value(u).rows();
        if scenarios.len() != rows {
            bail!(Domain, "{} scenario labels for {} token rows", scenarios.len(), rows);
        }
        for &c in scenarios {
            self.check_scenario(c)?;
        }
        let mut alpha = None;
        let mut out = None;
        if let Some((gate, bank)) = &self.shared {
            let logits = gate.forward(g, bound, u)?;
            let a = g.sigmoid(logits);
            alpha = Some(a);
            out = Some(bank.forward(g, bound, u, a)?);
        }
        let pool_logits = self.pool_gate.forward(g, bound, u)?;
        let pool_w = match self.kind {
            GateKind::Sigmoid => g.sigmoid(pool_logits),
            GateKind::Relu => g.relu(pool_logits),
        };
        let s = self.scenario_shared;
        let routed = |c: usize| c > 0 && self.scenario.is_some();
        let mut p_var = None;
        let bank_w = if let (Some(sc), true) = (&self.scenario, scenarios.iter().any(|&c| routed(c))) {
            let main: Vec<f64> = scenarios.iter().map(|&c| if routed(c) { 0.0 } else { 1.0 }).collect();
            let other: Vec<f64> = main.iter().map(|m| 1.0 - m).collect();
            let main_mask = g.constant(Tensor::new(&[rows], main)?);
            let other_mask = g.constant(Tensor::new(&[rows], other)?);
            let mut pool_total = g.mul_col(pool_w, main_mask)?;
            let uc = g.gather_rows(bound.var(sc.embedding), scenarios)?;
            let cat = g.concat_cols(&[u, uc])?;
            let p = match sc.shared_gate {
                Some(gate) => {
                    let logits = gate.forward(g, bound, cat)?;
                    Some(g.sigmoid(logits))
                }
                None => None,
            };
            if let Some(router) = sc.router {
                let mut z = router.forward(g, bound, cat)?;
                let mut bonus = vec![0.0; rows * self.pool];
                let mut any_bonus = false;
                for (t, &c) in scenarios.iter().enumerate() {
                    if let (true, Some((i, gamma))) = (routed(c), self.bonus(c)) {
                        bonus[t * self.pool + i] = gamma;
                        any_bonus = true;
                    }
                }
                if any_bonus {
                    let b = g.constant(Tensor::new(&[rows, self.pool], bonus)?);
                    z = g.add(z, b)?;
                }
                let mut mask = vec![0.0; rows * self.pool];
                for (t, &c) in scenarios.iter().enumerate() {
                    if routed(c) {
                        for i in topk_indices(g.value(z).row(t), self.route_k)? {
                            mask[t * self.pool + i] = 1.0;
                        }
                    }
                }
                let scores = g.sigmoid(z);
                let scores = match p {
                    Some(p) => {
                        let aligned = g.resize_cols(p, self.pool)?;
                        g.add(scores, aligned)?
                    }
                    None => scores,
                };
                let mask = g.constant(Tensor::new(&[rows, self.pool], mask)?);
                let beta = g.mul(scores, mask)?;
                pool_total = g.add(pool_total, beta)?;
            }
            match p {
                Some(p) => {
                    let p = g.mul_col(p, other_mask)?;
                    p_var = Some(p);
                    g.concat_cols(&[p, pool_total])?
                }
                None => pool_total,
            }
        } else if s > 0 {
            let zeros = g.constant(Tensor::zeros(&[rows, s]));
            g.concat_cols(&[zeros, pool_w])?
        } else {
            pool_w
        };
        let routed_out = self.bank.forward(g, bound, u, bank_w)?;
        let result = match out {
            Some(o) => g.add(o, routed_out)?,
            None => routed_out,
        };
        if let Some(traces) = traces {
            let weights = g.value(bank_w);
            for (t, &c) in scenarios.iter().enumerate() {
                let row = weights.row(t);
                let beta = row[s..].to_vec();
                let shared_gate = match (routed(c), p_var) {
                    (true, Some(p)) => g.value(p).row(t).to_vec(),
                    _ => Vec::new(),
                };
                traces.push(RoutingTrace {
                    layer: self.layer,
                    scenario: c,
                    token: t,
                    routed: routed(c),
                    designated: self.designated(c),
                    active: (0..self.pool).filter(|&j| beta[j] != 0.0).collect(),
                    beta,
                    alpha: alpha.map_or_else(Vec::new, |a| g.value(a).row(t).to_vec()),
                    shared_gate,
                });
            }
        }
        Ok(result)
    }

    /// Parameters owned by this layer, for gradient-norm reporting.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if let Some((gate, bank)) = &self.shared {
            ids.extend([gate.w, gate.b, bank.w1, bank.b1, bank.w2, bank.b2]);
        }
        ids.extend([self.pool_gate.w, self.pool_gate.b]);
        if let Some(sc) = &self.scenario {
            ids.push(sc.embedding);
            for lin in [sc.shared_gate, sc.router].into_iter().flatten() {
                ids.extend([lin.w, lin.b]);
            }
        }
        ids.extend([self.bank.w1, self.bank.b1, self.bank.w2, self.bank.b2]);
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ScenarioVariant, DEFAULT_GAMMA};
    use crate::gradcheck::{finite_diff_check, Tolerance};
    use proptest::prelude::*;

    fn layer_cfg(variant: ScenarioVariant, kind: GateKind) -> ModelConfig {
        let mut cfg = ModelConfig::tiny();
        cfg.scenario_moe = variant.preset(DEFAULT_GAMMA);
        cfg.moe.gate = kind;
        cfg
    }

    fn build(cfg: &ModelConfig, seed: u64) -> (ParamStore, MoeLayer) {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(seed);
        let layer = MoeLayer::new(&mut store, "moe", cfg, &mut rng);
        // Nonzero biases so every term is exercised.
        for t in store.tensors_mut() {
            if t.norm() == 0.0 {
                for v in t.data_mut() {
                    *v = rng.uniform_range(-0.3, 0.3);
                }
            }
        }
        (store, layer)
    }

    /// FFN_i(u) from raw tensors with explicit index arithmetic.
    fn ffn_oracle(store: &ParamStore, bank: &ExpertBank, i: usize, u: &[f64]) -> Vec<f64> {
        let (w1, b1, w2, b2) = (store.get(bank.w1), store.get(bank.b1), store.get(bank.w2), store.get(bank.b2));
        let d = u.len();
        let width = bank.count * bank.hidden;
        let mut out = vec![0.0; d];
        for o in 0..d {
            let mut acc = b2.data()[i * d + o];
            for j in 0..bank.hidden {
                let c = i * bank.hidden + j;
                let mut pre = b1.data()[c];
                for r in 0..d {
                    pre += u[r] * w1.data()[r * width + c];
                }
                acc += pre / (1.0 + libm::exp(-pre)) * w2.data()[c * d + o];
            }
            out[o] = acc;
        }
        out
    }

    fn logits_oracle(store: &ParamStore, lin: &Linear, x: &[f64]) -> Vec<f64> {
        let (w, b) = (store.get(lin.w), store.get(lin.b));
        let out = b.len();
        (0..out).map(|j| b.data()[j] + (0..x.len()).map(|i| x[i] * w.data()[i * out + j]).sum::<f64>()).collect()
    }

    #[test]
    fn dense_path_matches_loop_oracle() {
        // K_s = 1, N = 2, m = 2, d = 4.
        let cfg = layer_cfg(ScenarioVariant::V4, GateKind::Sigmoid);
        let (store, layer) = build(&cfg, 1);
        let mut rng = SeededRng::new(2);
        for _ in 0..20 {
            let u: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let (h, trace) = layer.forward_token(&store, &u, 0).unwrap();
            let (gate1, shared) = layer.shared.unwrap();
            let mut expect = [0.0; 4];
            for (i, z) in logits_oracle(&store, &gate1, &u).into_iter().enumerate() {
                let y = ffn_oracle(&store, &shared, i, &u);
                (0..4).for_each(|o| expect[o] += y[o] / (1.0 + libm::exp(-z)));
            }
            for (j, z) in logits_oracle(&store, &layer.pool_gate, &u).into_iter().enumerate() {
                let y = ffn_oracle(&store, &layer.bank, layer.scenario_shared + j, &u);
                (0..4).for_each(|o| expect[o] += y[o] / (1.0 + libm::exp(-z)));
            }
            for o in 0..4 {
                assert!((h[o] - expect[o]).abs() < 1e-12);
            }
            assert_eq!(trace.active.len(), 4);
        }
    }

    #[test]
    fn zero_logits_weight_every_expert_half() {
        let mut cfg = layer_cfg(ScenarioVariant::V4, GateKind::Sigmoid);
        cfg.scenarios = 1;
        let (mut store, layer) = build(&cfg, 3);
        let (gate1, shared) = layer.shared.unwrap();
        for id in [gate1.w, gate1.b, layer.pool_gate.w, layer.pool_gate.b] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let u = [0.3, -1.0, 0.5, 2.0];
        let (h, _) = layer.forward_token(&store, &u, 0).unwrap();
        let mut expect = ffn_oracle(&store, &shared, 0, &u);
        for j in 0..layer.pool {
            let y = ffn_oracle(&store, &layer.bank, j, &u);
            (0..4).for_each(|o| expect[o] += y[o]);
        }
        for o in 0..4 {
            assert!((h[o] - 0.5 * expect[o]).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_single_expert_is_plain_ffn() {
        let mut cfg = layer_cfg(ScenarioVariant::V4, GateKind::Sigmoid);
        cfg.scenarios = 1;
        cfg.moe.shared_experts = 0;
        cfg.moe.experts = 1;
        cfg.moe.split = 1;
        let (mut store, layer) = build(&cfg, 4);
        store.get_mut(layer.pool_gate.b).data_mut()[0] = 800.0;
        let u = [1.0, 0.5, -0.25, 0.0];
        let (h, _) = layer.forward_token(&store, &u, 0).unwrap();
        for (a, b) in h.iter().zip(ffn_oracle(&store, &layer.bank, 0, &u)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_gates() {
        let mut cfg = layer_cfg(ScenarioVariant::V4, GateKind::Relu);
        cfg.scenarios = 1;
        let (mut store, layer) = build(&cfg, 5);
        let u = [0.2, 0.1, -0.3, 0.7];
        let (gate1, shared) = layer.shared.unwrap();
        let alpha = 1.0 / (1.0 + libm::exp(-logits_oracle(&store, &gate1, &u)[0]));
        let shared_only: Vec<f64> = ffn_oracle(&store, &shared, 0, &u).iter().map(|y| alpha * y).collect();

        store.get_mut(layer.pool_gate.w).data_mut().fill(0.0);
        store.get_mut(layer.pool_gate.b).data_mut().copy_from_slice(&[-1.0, -0.5, -2.0, -0.1]);
        let (h, trace) = layer.forward_token(&store, &u, 0).unwrap();
        assert!(trace.active.is_empty());
        for o in 0..4 {
            assert!((h[o] - shared_only[o]).abs() < 1e-12);
        }

        store.get_mut(layer.pool_gate.b).data_mut()[2] = 0.75;
        let (h, trace) = layer.forward_token(&store, &u, 0).unwrap();
        assert_eq!(trace.active, vec![2]);
        assert_eq!(trace.beta[2], 0.75);
        let y = ffn_oracle(&store, &layer.bank, 2, &u);
        for o in 0..4 {
            assert!((h[o] - shared_only[o] - 0.75 * y[o]).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_computed_route() {
        let r = route(&[2.0, 1.0, 0.0, -1.0], &[], 2, None).unwrap();
        assert_eq!(r.survivors, vec![0, 1]);
        assert_eq!(r.beta, vec![sigmoid(2.0), sigmoid(1.0), 0.0, 0.0]);
        let full = route(&[0.5, -0.5, 1.5], &[0.25, 0.75], 3, None).unwrap();
        assert_eq!(full.beta, vec![sigmoid(0.5) + 0.25, sigmoid(-0.5) + 0.75, sigmoid(1.5)]);
        assert!(matches!(route(&[0.0; 3], &[], 4, None), Err(crate::Error::Config(_))));
    }

    #[test]
    fn zero_shared_gate_is_half() {
        let cfg = layer_cfg(ScenarioVariant::V4, GateKind::Sigmoid);
        let (mut store, layer) = build(&cfg, 6);
        let gate = layer.scenario.unwrap().shared_gate.unwrap();
        store.get_mut(gate.w).data_mut().fill(0.0);
        store.get_mut(gate.b).data_mut().fill(0.0);
        let p = layer.scenario_shared_gate(&store, &[1.0, 2.0, 3.0, 4.0], 2).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        assert!(matches!(layer.scenario_shared_gate(&store, &[0.0; 4], 3), Err(crate::Error::Domain(_))));
    }

    #[test]
    fn large_bonus_forces_designated_expert() {
        let mut rng = SeededRng::new(7);
        for _ in 0..2000 {
            let z: Vec<f64> = (0..4).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            let star = rng.below(4);
            let r = route(&z, &[], 2, Some((star, 1e3))).unwrap();
            assert!(r.survivors.contains(&star));
        }
    }

    #[test]
    fn uniform_gates_activate_each_expert_half_the_time() {
        let mut rng = SeededRng::new(8);
        let traces: Vec<RoutingTrace> = (0..10_000)
            .map(|t| {
                let z: Vec<f64> = (0..4).map(|_| rng.uniform()).collect();
                let r = route(&z, &[], 2, None).unwrap();
                RoutingTrace {
                    layer: 0,
                    scenario: 1,
                    token: t,
                    routed: true,
                    designated: Some(0),
                    active: r.survivors.clone(),
                    beta: r.beta,
                    alpha: Vec::new(),
                    shared_gate: Vec::new(),
                }
            })
            .collect();
        let util = expert_utilization(&traces).unwrap();
        assert_eq!(util.len(), 1);
        for f in &util[0].frequency {
            assert!((f - 0.5).abs() < 0.05, "{f}");
        }
    }

    #[test]
    fn utilization_of_single_trace() {
        let trace = RoutingTrace {
            layer: 0,
            scenario: 2,
            token: 0,
            routed: true,
            designated: Some(1),
            active: vec![0, 1],
            beta: vec![0.7, 1.2, 0.0, 0.0],
            alpha: Vec::new(),
            shared_gate: Vec::new(),
        };
        let util = expert_utilization(&[trace]).unwrap();
        assert_eq!(util[0].frequency, vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(util[0].designated, Some((1, 1.0)));
        assert!(matches!(expert_utilization(&[]), Err(crate::Error::Domain(_))));
    }

    fn batch_matches_tokens(variant: ScenarioVariant, kind: GateKind, seed: u64) {
        let cfg = layer_cfg(variant, kind);
        let (store, layer) = build(&cfg, seed);
        let mut rng = SeededRng::new(seed + 100);
        let rows = 9;
        let scenarios: Vec<usize> = (0..rows).map(|t| t % 3).collect();
        let u = Tensor::randn(&[rows, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let uv = g.constant(u.clone());
        let mut traces = Vec::new();
        let out = layer.forward(&mut g, &bound, uv, &scenarios, Some(&mut traces)).unwrap();
        for t in 0..rows {
            let (h, trace) = layer.forward_token(&store, u.row(t), scenarios[t]).unwrap();
            for (a, b) in g.value(out).row(t).iter().zip(&h) {
                assert!((a - b).abs() < 1e-12, "{variant:?} row {t}");
            }
            assert_eq!(traces[t].active, trace.active);
            for (a, b) in traces[t].beta.iter().zip(&trace.beta) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batched_layer_matches_single_token_reference() {
        for (i, v) in ScenarioVariant::ALL.into_iter().enumerate() {
            batch_matches_tokens(v, GateKind::Sigmoid, i as u64);
        }
        batch_matches_tokens(ScenarioVariant::V5, GateKind::Relu, 42);
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let cfg = layer_cfg(ScenarioVariant::V4, GateKind::Sigmoid);
        let (mut store, layer) = build(&cfg, 11);
        let mut rng = SeededRng::new(12);
        let scenarios = [0, 1, 2, 1, 2, 0];
        let u = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let weights = Tensor::randn(&[24], 1.0, &mut rng).into_data();
        let base = store.clone();
        let eval = |params: &[Tensor], grads: bool| -> Result<(f64, Vec<Vec<usize>>, Vec<Vec<f64>>)> {
            let mut s = base.clone();
            s.tensors_mut().clone_from_slice(params);
            let mut g = Graph::new();
            let bound = s.bind(&mut g);
            let uv = g.constant(u.clone());
            let mut traces = Vec::new();
            let out = layer.forward(&mut g, &bound, uv, &scenarios, Some(&mut traces))?;
            let loss = g.dot_const(out, weights.clone())?;
            let value = g.value(loss).data()[0];
            let mut all = Vec::new();
            if grads {
                g.backward(loss)?;
                all = bound.grads(&g, &s);
            }
            Ok((value, traces.into_iter().map(|t| t.active).collect(), all))
        };
        let (_, _, analytic) = eval(store.tensors(), true).unwrap();
        let coords: Vec<Vec<usize>> = store.tensors().iter().map(|t| (0..t.len()).collect()).collect();
        let names = store.names().to_vec();
        let report =
            finite_diff_check(&names, store.tensors_mut(), &analytic, &coords, 1e-6, Tolerance::default(), |p| eval(p, false).map(|(v, s, _)| (v, s))).unwrap();
        assert!(report.passed(), "{report:?}");
        let emb = report.tensors.iter().find(|t| t.name.ends_with("scenario.emb")).unwrap();
        assert!(emb.probes > 0);
    }

    #[test]
    fn masked_experts_get_no_gradient() {
        let mut cfg = layer_cfg(ScenarioVariant::V3, GateKind::Sigmoid);
        cfg.scenario_moe.shared = 0;
        let (store, layer) = build(&cfg, 13);
        let mut rng = SeededRng::new(14);
        let u = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let uv = g.constant(u);
        let mut traces = Vec::new();
        let out = layer.forward(&mut g, &bound, uv, &[1], Some(&mut traces)).unwrap();
        let loss = g.sum(out);
        g.backward(loss).unwrap();
        let grads = bound.grads(&g, &store);
        let w1 = &grads[layer.bank.w1.index()];
        let width = layer.bank.count * layer.bank.hidden;
        let chosen = traces[0].active[0];
        for e in 0..layer.pool {
            let cols = e * layer.bank.hidden..(e + 1) * layer.bank.hidden;
            let touched = (0..4).any(|r| cols.clone().any(|c| w1[r * width + c] != 0.0));
            assert_eq!(touched, e == chosen, "expert {e}");
        }
    }

    proptest! {
        #[test]
        fn exactly_route_k_survivors(
            z in proptest::collection::vec(-3.0f64..3.0, 1..9),
            k_frac in 0.0f64..1.0,
            p in proptest::collection::vec(0.0f64..1.0, 0..5),
        ) {
            let k = ((z.len() as f64 * k_frac) as usize).max(1).min(z.len());
            let r = route(&z, &p, k, None).unwrap();
            prop_assert_eq!(r.beta.iter().filter(|b| **b != 0.0).count(), k);
            prop_assert!(r.beta.iter().all(|b| (0.0..2.0).contains(b)));
        }

        #[test]
        fn bonus_above_spread_forces_survival(
            z in proptest::collection::vec(-3.0f64..3.0, 2..9),
            star_frac in 0.0f64..1.0,
            extra in 1e-6f64..5.0,
        ) {
            let star = ((z.len() as f64 * star_frac) as usize).min(z.len() - 1);
            let spread = z.iter().cloned().fold(f64::MIN, f64::max) - z.iter().cloned().fold(f64::MAX, f64::min);
            let r = route(&z, &[], 1, Some((star, spread + extra))).unwrap();
            prop_assert_eq!(r.survivors, vec![star]);
        }
    }
}
