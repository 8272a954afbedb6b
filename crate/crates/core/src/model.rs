//! The full multi-scenario model: alignment, grouping, stacked mixing/MoE
//! blocks and adapted prediction heads.

use alloc::format;
use alloc::vec::Vec;

use crate::autotoken::{AlignmentNets, GroupAssignment, Grouper};
use crate::config::{ModelConfig, NormVariant};
use crate::data::Sample;
use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::heads::{bce_loss, Heads, TASKS};
use crate::metrics::MetricReport;
use crate::mixing::{apply_block, MixingHeads, NormParams};
use crate::moe::{MoeLayer, RoutingTrace};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::{stream, SeededRng};
use crate::tensor::Tensor;

/// A minibatch in model layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// One `[B × dims[i]]` tensor per feature.
    pub features: Vec<Tensor>,
    pub scenarios: Vec<usize>,
    pub users: Vec<u64>,
    pub labels: Vec<[u8; TASKS]>,
}

impl Batch {
    pub fn from_samples<'a>(dims: &[usize], samples: impl IntoIterator<Item = &'a Sample>) -> Result<Self> {
        let samples: Vec<&Sample> = samples.into_iter().collect();
        if samples.is_empty() {
            bail!(Domain, "empty batch");
        }
        let mut features = Vec::with_capacity(dims.len());
        for (f, &w) in dims.iter().enumerate() {
            let mut data = Vec::with_capacity(samples.len() * w);
            for s in &samples {
                let Some(v) = s.features.get(f) else {
                    bail!(Domain, "sample has {} features, expected {}", s.features.len(), dims.len());
                };
                if v.len() != w {
                    return Err(crate::Error::FeatureWidth { feature: f, expected: w, got: v.len() });
                }
                data.extend_from_slice(v);
            }
            features.push(Tensor::new(&[samples.len(), w], data)?);
        }
        Ok(Self {
            features,
            scenarios: samples.iter().map(|s| s.scenario).collect(),
            users: samples.iter().map(|s| s.user).collect(),
            labels: samples.iter().map(|s| s.labels()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    pub fn float_labels(&self) -> Vec<[f64; TASKS]> {
        self.labels.iter().map(|l| [l[0] as f64, l[1] as f64]).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub mixing: MixingHeads,
    pub norm: NormParams,
    pub moe: MoeLayer,
}

/// Result of one forward pass.
#[derive(Clone, Debug)]
pub struct Output {
    /// Clamped probabilities `[B × 2]`.
    pub probs: Var,
    pub assignment: GroupAssignment,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub align: AlignmentNets,
    pub grouper: Grouper,
    pub blocks: Vec<Block>,
    pub final_norm: Option<NormParams>,
    pub heads: Heads,
}

impl Model {
    /// Build and initialize all parameters from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let spec = &cfg.features;
        let mut store = ParamStore::new();
        let mut rng = SeededRng::split(seed, stream::PARAMS);
        let mut mix_rng = SeededRng::split(seed, stream::MIXING);
        let align = AlignmentNets::new(&mut store, spec, &mut rng);
        let grouper = Grouper::new(cfg.grouping, spec, cfg.manual_groups.as_deref(), &mut store, &mut rng, seed)?;
        let d = cfg.token_dim;
        let blocks = (0..cfg.layers)
            .map(|l| {
                let mixing = MixingHeads::new(&mut store, &format!("layer{l}.mix"), cfg.mixing, cfg.heads, spec.groups, &mut mix_rng);
                let norm = NormParams::new(&mut store, &format!("layer{l}.norm"), d);
                let mut moe = MoeLayer::new(&mut store, &format!("layer{l}"), cfg, &mut rng);
                moe.layer = l;
                Block { mixing, norm, moe }
            })
            .collect();
        let final_norm = (cfg.norm == NormVariant::PreNormL).then(|| NormParams::new(&mut store, "final_norm", d));
        let heads = Heads::new(&mut store, spec.groups * d, cfg.head_hidden, cfg.scenarios, cfg.adapter_rank, &mut rng);
        Ok(Self { cfg: cfg.clone(), store, align, grouper, blocks, final_norm, heads })
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Forward pass; routing traces are appended when `traces` is given.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, batch: &Batch, mut traces: Option<&mut Vec<RoutingTrace>>) -> Result<Output> {
        if batch.is_empty() {
            bail!(Domain, "empty batch");
        }
        let spec = &self.cfg.features;
        let inputs: Vec<Var> = batch.features.iter().map(|t| g.constant(t.clone())).collect();
        let aligned = self.align.forward(g, bound, &inputs)?;
        let (mut x, assignment) = self.grouper.forward(g, bound, aligned, spec)?;
        let n_g = spec.groups;
        let token_scenarios: Vec<usize> = batch.scenarios.iter().flat_map(|&c| core::iter::repeat_n(c, n_g)).collect();
        let last = self.blocks.len().saturating_sub(1);
        for (l, block) in self.blocks.iter().enumerate() {
            let tr = traces.as_deref_mut();
            x = apply_block(g, bound, x, self.cfg.norm, &block.norm, self.final_norm.as_ref(), l == last, |g, v| {
                let mixed = block.mixing.forward(g, bound, v)?;
                block.moe.forward(g, bound, mixed, &token_scenarios, tr)
            })?;
        }
        let flat = g.reshape(x, &[batch.len(), n_g * self.cfg.token_dim])?;
        let probs = self.heads.forward(g, bound, flat, &batch.scenarios)?;
        Ok(Output { probs, assignment })
    }

    /// Forward pass plus the scenario-balanced loss.
    pub fn loss(&self, g: &mut Graph, bound: &Bound, batch: &Batch, traces: Option<&mut Vec<RoutingTrace>>) -> Result<(Var, Output)> {
        let out = self.forward(g, bound, batch, traces)?;
        let loss = bce_loss(g, out.probs, &batch.float_labels(), &batch.scenarios)?;
        Ok((loss, out))
    }

    /// Probabilities without gradient bookkeeping beyond one throwaway tape.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<[f64; TASKS]>> {
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g);
        let out = self.forward(&mut g, &bound, batch, None)?;
        let p = g.value(out.probs);
        Ok((0..p.rows()).map(|r| [p.at(r, 0), p.at(r, 1)]).collect())
    }

    /// Metrics over `samples`, evaluated in chunks of `chunk`.
    pub fn evaluate(&self, samples: &[Sample], chunk: usize) -> Result<MetricReport> {
        let (probs, batch) = self.predict_all(samples, chunk)?;
        MetricReport::compute(&probs, &batch.labels, &batch.users, &batch.scenarios)
    }

    fn predict_all(&self, samples: &[Sample], chunk: usize) -> Result<(Vec<[f64; TASKS]>, Batch)> {
        if samples.is_empty() {
            bail!(Domain, "evaluation over no samples");
        }
        let dims = &self.cfg.features.dims;
        let mut probs = Vec::with_capacity(samples.len());
        for part in samples.chunks(chunk.max(1)) {
            probs.extend(self.predict(&Batch::from_samples(dims, part)?)?);
        }
        let mut meta = Batch::from_samples(dims, samples.iter().take(1))?;
        meta.scenarios = samples.iter().map(|s| s.scenario).collect();
        meta.users = samples.iter().map(|s| s.user).collect();
        meta.labels = samples.iter().map(|s| s.labels()).collect();
        Ok((probs, meta))
    }

    /// Routing traces for `samples`, token indices counted across chunks.
    pub fn routing_traces(&self, samples: &[Sample], chunk: usize) -> Result<Vec<RoutingTrace>> {
        let dims = &self.cfg.features.dims;
        let mut all = Vec::new();
        let mut offset = 0;
        for part in samples.chunks(chunk.max(1)) {
            let batch = Batch::from_samples(dims, part)?;
            let mut g = Graph::new();
            let bound = self.store.bind(&mut g);
            let mut traces = Vec::new();
            self.forward(&mut g, &bound, &batch, Some(&mut traces))?;
            let rows = batch.len() * self.cfg.features.groups;
            all.extend(traces.into_iter().map(|mut t| {
                t.token += offset;
                t
            }));
            offset += rows;
        }
        Ok(all)
    }

    pub fn assignment(&self) -> Result<GroupAssignment> {
        self.grouper.assignment(&self.store, &self.cfg.features)
    }

    /// Parameters of block `l` counted for gradient-norm reporting: mixing and experts.
    pub fn layer_params(&self, l: usize) -> Vec<ParamId> {
        let block = &self.blocks[l];
        let mut ids: Vec<ParamId> = block.mixing.mats.into_iter().collect();
        ids.extend(block.moe.param_ids());
        ids
    }

    /// L2 gradient norm of each block's mixing and expert parameters, first to last.
    pub fn layer_gradient_norms(&self, g: &Graph, bound: &Bound) -> Result<Vec<f64>> {
        if !g.backward_done() {
            bail!(State, "layer gradient norms requested before backward");
        }
        Ok((0..self.blocks.len())
            .map(|l| {
                let sq: f64 = self.layer_params(l).into_iter().filter_map(|id| g.grad(bound.var(id))).flat_map(|gr| gr.iter().map(|v| v * v)).sum();
                libm::sqrt(sq)
            })
            .collect())
    }
}
