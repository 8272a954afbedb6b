//! Training loop, linear baseline, ablation runner and model-level gradient check.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autotoken::GroupAssignment;
use crate::config::{ModelConfig, TrainConfig};
use crate::data::{Dataset, Sample};
use crate::error::{bail, Result};
use crate::gradcheck::{finite_diff_check, GradReport, Tolerance};
use crate::graph::{Graph, OpKind};
use crate::heads::{bce_loss, PROB_CLAMP, TASKS};
use crate::metrics::MetricReport;
use crate::model::{Batch, Model};
use crate::moe::{expert_utilization, ExpertUtilization};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::rng::{stream, SeededRng};
use crate::tensor::Tensor;

/// Bumped whenever the report layout changes.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Evaluation chunk size; results do not depend on it.
const EVAL_CHUNK: usize = 512;

/// Samples whose routing is summarized in the report.
const TRACE_SAMPLES: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    /// Mean training loss since the previous evaluation.
    pub train_loss: Option<f64>,
    pub metrics: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub param_count: usize,
    pub evals: Vec<EvalPoint>,
    pub best_step: usize,
    pub best_ctcvr_gauc: Option<f64>,
    /// Per-block gradient norms of the final step, first to last.
    pub layer_grad_norms: Vec<f64>,
    pub expert_utilization: Vec<ExpertUtilization>,
    pub assignment: GroupAssignment,
    /// Filled by callers with a clock; left empty so reports stay reproducible.
    pub wall_clock_secs: Option<f64>,
}

impl RunReport {
    pub fn final_metrics(&self) -> &MetricReport {
        &self.evals.last().expect("at least the initial evaluation").metrics
    }
}

pub struct TrainOutcome {
    pub model: Model,
    /// Parameters at the best CTCVR GAUC evaluation.
    pub best: ParamStore,
    pub report: RunReport,
}

/// Shuffled minibatch indices, reshuffled each pass over the data.
struct Batches {
    rng: SeededRng,
    order: Vec<usize>,
    cursor: usize,
    size: usize,
}

impl Batches {
    fn new(n: usize, size: usize, seed: u64) -> Self {
        let mut rng = SeededRng::split(seed, stream::BATCHES);
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        Self { rng, order, cursor: 0, size: size.min(n) }
    }

    fn next(&mut self) -> Vec<usize> {
        if self.cursor + self.size > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + self.size].to_vec();
        self.cursor += self.size;
        out
    }
}

fn gauc_key(m: &MetricReport) -> f64 {
    m.ctcvr.gauc.unwrap_or(f64::NEG_INFINITY)
}

fn check_inputs(cfg: &ModelConfig, tc: &TrainConfig, train: &Dataset, eval: &Dataset) -> Result<()> {
    cfg.validate()?;
    tc.validate()?;
    let params = cfg.count_params();
    if params > tc.param_budget {
        bail!(Config, "model has {} parameters, above the training budget of {}", params, tc.param_budget);
    }
    for d in [train, eval] {
        d.check_spec(&cfg.features)?;
        d.validate()?;
        if d.is_empty() {
            bail!(Domain, "empty dataset");
        }
        if d.scenarios > cfg.scenarios {
            bail!(Config, "dataset has {} scenarios, model {}", d.scenarios, cfg.scenarios);
        }
    }
    Ok(())
}

/// Minibatch Adam on the scenario-balanced loss, fully determined by the seed.
pub fn train(cfg: &ModelConfig, tc: &TrainConfig, train: &Dataset, eval: &Dataset) -> Result<TrainOutcome> {
    check_inputs(cfg, tc, train, eval)?;
    let mut model = Model::new(cfg, tc.seed)?;
    let mut adam = Adam::new(tc.optimizer, &model.store);
    let mut batches = Batches::new(train.len(), tc.batch_size, tc.seed);
    let dims = &cfg.features.dims;

    let initial = model.evaluate(&eval.samples, EVAL_CHUNK)?;
    let mut best = (0, gauc_key(&initial), model.store.clone());
    let mut evals = vec![EvalPoint { step: 0, train_loss: None, metrics: initial }];
    let mut layer_grad_norms = vec![0.0; cfg.layers];
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);

    for step in 1..=tc.steps {
        let idx = batches.next();
        let batch = Batch::from_samples(dims, idx.iter().map(|&i| &train.samples[i]))?;
        let mut g = Graph::new();
        let bound = model.store.bind(&mut g);
        let (loss, _) = model.loss(&mut g, &bound, &batch, None)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            let culprit = g.first_non_finite().map_or_else(|| String::from("unknown"), |(i, k)| format!("node {i} ({k:?})"));
            bail!(NonFinite, "loss is {} at step {}; first non-finite tensor: {}", value, step, culprit);
        }
        g.backward(loss)?;
        let grads = bound.grads(&g, &model.store);
        if let Some(i) = grads.iter().position(|gr| gr.iter().any(|v| !v.is_finite())) {
            bail!(NonFinite, "gradient of {} is not finite at step {}", model.store.names()[i], step);
        }
        layer_grad_norms = model.layer_gradient_norms(&g, &bound)?;
        adam.step(&mut model.store, &grads);
        if let Some(i) = model.store.tensors().iter().position(|t| !t.all_finite()) {
            bail!(NonFinite, "parameter {} became non-finite at step {}", model.store.names()[i], step);
        }
        loss_sum += value;
        loss_count += 1;

        let due = (tc.eval_every > 0 && step % tc.eval_every == 0) || step == tc.steps;
        if due {
            let metrics = model.evaluate(&eval.samples, EVAL_CHUNK)?;
            if gauc_key(&metrics) > best.1 {
                best = (step, gauc_key(&metrics), model.store.clone());
            }
            evals.push(EvalPoint { step, train_loss: Some(loss_sum / loss_count as f64), metrics });
            loss_sum = 0.0;
            loss_count = 0;
        }
    }

    let trace_samples = &eval.samples[..eval.len().min(TRACE_SAMPLES)];
    let traces = model.routing_traces(trace_samples, EVAL_CHUNK)?;
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        model: cfg.clone(),
        train: tc.clone(),
        seed: tc.seed,
        param_count: model.param_count(),
        evals,
        best_step: best.0,
        best_ctcvr_gauc: best.1.is_finite().then_some(best.1),
        layer_grad_norms,
        expert_utilization: expert_utilization(&traces)?,
        assignment: model.assignment()?,
        wall_clock_secs: None,
    };
    Ok(TrainOutcome { model, best: best.2, report })
}

/// Logistic regression on concatenated raw features plus a scenario one-hot.
pub struct LinearBaseline {
    pub store: ParamStore,
    pub scenarios: usize,
}

impl LinearBaseline {
    fn inputs(samples: &[&Sample], scenarios: usize) -> Result<Tensor> {
        let width = samples[0].features.iter().map(Vec::len).sum::<usize>() + scenarios;
        let mut data = Vec::with_capacity(samples.len() * width);
        for s in samples {
            for f in &s.features {
                data.extend_from_slice(f);
            }
            data.extend((0..scenarios).map(|c| if c == s.scenario { 1.0 } else { 0.0 }));
        }
        Tensor::new(&[samples.len(), width], data)
    }

    pub fn predict(&self, samples: &[&Sample]) -> Result<Vec<[f64; TASKS]>> {
        let x = Self::inputs(samples, self.scenarios)?;
        let z = x.matmul(&self.store.tensors()[0])?;
        let b = self.store.tensors()[1].data();
        Ok((0..z.rows()).map(|r| core::array::from_fn(|t| crate::graph::sigmoid(z.at(r, t) + b[t]).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))).collect())
    }

    pub fn evaluate(&self, samples: &[Sample]) -> Result<MetricReport> {
        let refs: Vec<&Sample> = samples.iter().collect();
        let probs = self.predict(&refs)?;
        let labels: Vec<[u8; TASKS]> = samples.iter().map(Sample::labels).collect();
        let users: Vec<u64> = samples.iter().map(|s| s.user).collect();
        let scen: Vec<usize> = samples.iter().map(|s| s.scenario).collect();
        MetricReport::compute(&probs, &labels, &users, &scen)
    }
}

/// Train the linear baseline with the same optimizer, batches and step count.
pub fn train_linear(tc: &TrainConfig, train: &Dataset, eval: &Dataset) -> Result<(LinearBaseline, MetricReport)> {
    tc.validate()?;
    train.validate()?;
    if train.is_empty() {
        bail!(Domain, "empty dataset");
    }
    let width = train.dims.iter().sum::<usize>() + train.scenarios;
    let mut store = ParamStore::new();
    store.add_zeros("linear.w", &[width, TASKS]);
    store.add_zeros("linear.b", &[TASKS]);
    let mut adam = Adam::new(tc.optimizer, &store);
    let mut batches = Batches::new(train.len(), tc.batch_size, tc.seed);
    for _ in 0..tc.steps {
        let refs: Vec<&Sample> = batches.next().into_iter().map(|i| &train.samples[i]).collect();
        let x = LinearBaseline::inputs(&refs, train.scenarios)?;
        let labels: Vec<[f64; TASKS]> = refs.iter().map(|s| s.labels().map(f64::from)).collect();
        let scen: Vec<usize> = refs.iter().map(|s| s.scenario).collect();
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let xv = g.constant(x);
        let ids: Vec<_> = store.ids().collect();
        let z = g.matmul(xv, bound.var(ids[0]))?;
        let z = g.add_row(z, bound.var(ids[1]))?;
        let p = g.sigmoid(z);
        let p = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
        let loss = bce_loss(&mut g, p, &labels, &scen)?;
        g.backward(loss)?;
        let grads = bound.grads(&g, &store);
        adam.step(&mut store, &grads);
    }
    let model = LinearBaseline { store, scenarios: train.scenarios };
    let metrics = model.evaluate(&eval.samples)?;
    Ok((model, metrics))
}

/// One ablation result row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub ctr_auc: Option<f64>,
    pub ctr_gauc: Option<f64>,
    pub ctcvr_auc: Option<f64>,
    pub ctcvr_gauc: Option<f64>,
    pub params: usize,
}

impl AblationRow {
    pub fn from_report(variant: &str, report: &RunReport) -> Self {
        let m = report.final_metrics();
        Self { variant: variant.into(), ctr_auc: m.ctr.auc, ctr_gauc: m.ctr.gauc, ctcvr_auc: m.ctcvr.auc, ctcvr_gauc: m.ctcvr.gauc, params: report.param_count }
    }
}

/// Reject an empty grid or any invalid variant before training starts.
pub fn validate_grid(grid: &[(String, ModelConfig)], tc: &TrainConfig) -> Result<()> {
    if grid.is_empty() {
        bail!(Config, "ablation grid is empty");
    }
    for (name, cfg) in grid {
        cfg.validate().map_err(|e| crate::Error::Config(format!("variant {name}: {e}")))?;
        let n = cfg.count_params();
        if n > tc.param_budget {
            bail!(Config, "variant {} has {} parameters, above the budget of {}", name, n, tc.param_budget);
        }
    }
    Ok(())
}

/// Train every variant under the same seed and data, in order.
pub fn ablate(grid: &[(String, ModelConfig)], tc: &TrainConfig, train_set: &Dataset, eval: &Dataset) -> Result<Vec<(AblationRow, RunReport)>> {
    validate_grid(grid, tc)?;
    grid.iter()
        .map(|(name, cfg)| {
            let out = train(cfg, tc, train_set, eval)?;
            Ok((AblationRow::from_report(name, &out.report), out.report))
        })
        .collect()
}

/// Outcome of a model-level gradient check.
#[derive(Clone, Debug)]
pub struct GradcheckOutcome {
    pub report: GradReport,
    /// Set when the check was vacuous.
    pub warning: Option<String>,
}

impl GradcheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

/// Finite-difference check of the full model's loss gradient on `n_probes`
/// random coordinates per parameter tensor. Probes that change any
/// grouping or routing decision are skipped. `fault` corrupts one backward
/// rule, as a negative control.
pub fn gradcheck(cfg: &ModelConfig, data: &[Sample], n_probes: usize, seed: u64, fault: Option<OpKind>) -> Result<GradcheckOutcome> {
    let mut model = Model::new(cfg, seed)?;
    let mut rng = SeededRng::split(seed, stream::GRADCHECK);
    // Move away from the zero-initialized adapters and biases so every path carries gradient.
    for t in model.store.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.1 * rng.normal();
        }
    }
    let batch = Batch::from_samples(&cfg.features.dims, data)?;
    let base_model = model.clone();
    let eval = |params: &[Tensor], fault: Option<OpKind>, grads: bool| -> Result<(f64, Vec<Vec<usize>>, Vec<Vec<f64>>)> {
        let mut m = base_model.clone();
        m.store.tensors_mut().clone_from_slice(params);
        let mut g = Graph::new();
        g.inject_backward_fault(fault);
        let bound = m.store.bind(&mut g);
        let mut traces = Vec::new();
        let (loss, out) = m.loss(&mut g, &bound, &batch, Some(&mut traces))?;
        let value = g.value(loss).data()[0];
        let mut decisions = vec![out.assignment.flat_indices()];
        decisions.extend(traces.into_iter().map(|t| t.active));
        let mut all = Vec::new();
        if grads {
            g.backward(loss)?;
            all = bound.grads(&g, &m.store);
        }
        Ok((value, decisions, all))
    };
    let (_, _, analytic) = eval(model.store.tensors(), fault, true)?;
    let coords: Vec<Vec<usize>> = model
        .store
        .tensors()
        .iter()
        .map(|t| {
            let mut all: Vec<usize> = (0..t.len()).collect();
            rng.shuffle(&mut all);
            all.truncate(n_probes);
            all
        })
        .collect();
    let names = model.store.names().to_vec();
    let report =
        finite_diff_check(&names, model.store.tensors_mut(), &analytic, &coords, 1e-5, Tolerance::default(), |p| eval(p, None, false).map(|(v, d, _)| (v, d)))?;
    let warning = (report.total_probes() == 0).then(|| String::from("no coordinates were probed; the check is vacuous"));
    Ok(GradcheckOutcome { report, warning })
}
