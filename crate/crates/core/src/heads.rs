//! Prediction heads with per-scenario low-rank adapters, and the
//! scenario-balanced cross-entropy objective.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::graph::{sigmoid, silu, Graph, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Probabilities are kept inside `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;

/// Number of tasks: CTR and CTCVR.
pub const TASKS: usize = 2;

/// Low-rank update `down · up` on one linear layer; `up` starts at zero.
#[derive(Clone, Copy, Debug)]
pub struct Adapter {
    pub down: ParamId,
    pub up: ParamId,
}

impl Adapter {
    fn new(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rank: usize, rng: &mut SeededRng) -> Self {
        Self { down: store.add_weight(format!("{prefix}.down"), fan_in, rank, rng), up: store.add_zeros(format!("{prefix}.up"), &[rank, fan_out]) }
    }

    fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        let low = g.matmul(x, bound.var(self.down))?;
        g.matmul(low, bound.var(self.up))
    }

    /// Dense `down · up`, `[in × out]`.
    pub fn delta(&self, store: &ParamStore) -> Result<Tensor> {
        store.get(self.down).matmul(store.get(self.up))
    }
}

/// Flatten → SiLU hidden layer → one logit per task, adapted per scenario.
#[derive(Clone, Debug)]
pub struct Heads {
    pub input: usize,
    pub hidden: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    /// `adapters[c - 1]` holds both layers' adapters for scenario `c ≥ 1`.
    pub adapters: Vec<[Adapter; 2]>,
}

/// One sample's probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub scenario: usize,
    pub ctr: f64,
    pub ctcvr: f64,
}

impl Heads {
    pub fn new(store: &mut ParamStore, input: usize, hidden: usize, scenarios: usize, rank: usize, rng: &mut SeededRng) -> Self {
        let w1 = store.add_weight("head.w1", input, hidden, rng);
        let b1 = store.add_zeros("head.b1", &[hidden]);
        let w2 = store.add_weight("head.w2", hidden, TASKS, rng);
        let b2 = store.add_zeros("head.b2", &[TASKS]);
        let adapters = (1..scenarios.max(1))
            .map(|c| {
                [
                    Adapter::new(store, &format!("head.adapter{c}.l1"), input, hidden, rank, rng),
                    Adapter::new(store, &format!("head.adapter{c}.l2"), hidden, TASKS, rank, rng),
                ]
            })
            .collect();
        Self { input, hidden, w1, b1, w2, b2, adapters }
    }

    pub fn scenarios(&self) -> usize {
        self.adapters.len() + 1
    }

    fn check_scenario(&self, scenario: usize) -> Result<()> {
        if scenario >= self.scenarios() {
            bail!(Domain, "unknown scenario {} (have {})", scenario, self.scenarios());
        }
        Ok(())
    }

    fn adapted(&self, g: &mut Graph, bound: &Bound, x: Var, base: Var, layer: usize, scenarios: &[usize]) -> Result<Var> {
        let mut out = base;
        for (i, pair) in self.adapters.iter().enumerate() {
            let c = i + 1;
            if !scenarios.contains(&c) {
                continue;
            }
            let mask: Vec<f64> = scenarios.iter().map(|&s| if s == c { 1.0 } else { 0.0 }).collect();
            let mask = g.constant(Tensor::new(&[scenarios.len()], mask)?);
            let delta = pair[layer].forward(g, bound, x)?;
            let delta = g.mul_col(delta, mask)?;
            out = g.add(out, delta)?;
        }
        Ok(out)
    }

    /// Clamped probabilities `[B × 2]` (CTR, CTCVR) for flattened inputs `[B × input]`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var, scenarios: &[usize]) -> Result<Var> {
        if scenarios.len() != g.value(x).rows() {
            bail!(Domain, "{} scenario labels for {} rows", scenarios.len(), g.value(x).rows());
        }
        for &c in scenarios {
            self.check_scenario(c)?;
        }
        let h = g.matmul(x, bound.var(self.w1))?;
        let h = g.add_row(h, bound.var(self.b1))?;
        let h = self.adapted(g, bound, x, h, 0, scenarios)?;
        let h = g.silu(h);
        let z = g.matmul(h, bound.var(self.w2))?;
        let z = g.add_row(z, bound.var(self.b2))?;
        let z = self.adapted(g, bound, h, z, 1, scenarios)?;
        let p = g.sigmoid(z);
        Ok(g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP))
    }

    /// Single-sample prediction from a flattened final representation.
    pub fn predict(&self, store: &ParamStore, repr: &[f64], scenario: usize) -> Result<Prediction> {
        self.check_scenario(scenario)?;
        if repr.len() != self.input {
            bail!(Domain, "representation width {} differs from {}", repr.len(), self.input);
        }
        let adapter = scenario.checked_sub(1).map(|i| self.adapters[i]);
        let layer = |x: &[f64], w: ParamId, b: ParamId, which: usize| -> Result<Vec<f64>> {
            let mut weight = store.get(w).clone();
            if let Some(pair) = adapter {
                let delta = pair[which].delta(store)?;
                weight.data_mut().iter_mut().zip(delta.data()).for_each(|(a, d)| *a += d);
            }
            let mut out = store.get(b).data().to_vec();
            for (i, &xi) in x.iter().enumerate() {
                for (o, &wij) in out.iter_mut().zip(weight.row(i)) {
                    *o += xi * wij;
                }
            }
            Ok(out)
        };
        let hidden: Vec<f64> = layer(repr, self.w1, self.b1, 0)?.into_iter().map(silu).collect();
        let logits = layer(&hidden, self.w2, self.b2, 1)?;
        let prob = |z: f64| sigmoid(z).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        Ok(Prediction { scenario, ctr: prob(logits[0]), ctcvr: prob(logits[1]) })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = alloc::vec![self.w1, self.b1, self.w2, self.b2];
        for pair in &self.adapters {
            for a in pair {
                ids.extend([a.down, a.up]);
            }
        }
        ids
    }
}

/// CTCVR label: clicked and converted.
pub fn ctcvr_label(click: u8, conversion: u8) -> u8 {
    click * conversion
}

/// Per-sample weights `1 / (C_present · n_c)`.
pub fn scenario_weights(scenarios: &[usize]) -> Vec<f64> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in scenarios {
        *counts.entry(c).or_default() += 1;
    }
    let present = counts.len() as f64;
    scenarios.iter().map(|c| 1.0 / (present * counts[c] as f64)).collect()
}

fn check_labels(labels: &[[f64; TASKS]], rows: usize, scenarios: usize) -> Result<()> {
    if labels.len() != rows || scenarios != rows {
        bail!(Domain, "{} labels and {} scenario ids for {} predictions", labels.len(), scenarios, rows);
    }
    if rows == 0 {
        bail!(Domain, "loss over an empty batch");
    }
    for (i, l) in labels.iter().enumerate() {
        for &y in l {
            if y != 0.0 && y != 1.0 {
                bail!(Domain, "label {} of sample {} is not 0 or 1", y, i);
            }
        }
    }
    Ok(())
}

/// Per-scenario mean cross-entropy, averaged over present scenarios and summed over tasks.
pub fn multiscenario_bce(probs: &[[f64; TASKS]], labels: &[[f64; TASKS]], scenarios: &[usize]) -> Result<f64> {
    check_labels(labels, probs.len(), scenarios.len())?;
    let weights = scenario_weights(scenarios);
    let mut loss = 0.0;
    for ((p, y), w) in probs.iter().zip(labels).zip(&weights) {
        for t in 0..TASKS {
            let q = p[t].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            loss -= w * (y[t] * libm::log(q) + (1.0 - y[t]) * libm::log(1.0 - q));
        }
    }
    Ok(loss)
}

/// Graph form of [`multiscenario_bce`] over probabilities `[B × 2]`.
pub fn bce_loss(g: &mut Graph, probs: Var, labels: &[[f64; TASKS]], scenarios: &[usize]) -> Result<Var> {
    check_labels(labels, g.value(probs).rows(), scenarios.len())?;
    let weights = scenario_weights(scenarios);
    let mut pos = Vec::with_capacity(labels.len() * TASKS);
    let mut neg = Vec::with_capacity(labels.len() * TASKS);
    for (y, w) in labels.iter().zip(&weights) {
        for &yt in y {
            pos.push(-w * yt);
            neg.push(-w * (1.0 - yt));
        }
    }
    let ln_p = g.ln(probs);
    let complement = g.affine(probs, -1.0, 1.0);
    let ln_q = g.ln(complement);
    let a = g.dot_const(ln_p, pos)?;
    let b = g.dot_const(ln_q, neg)?;
    g.add(a, b)
}
