//! AutoToken: per-feature dimension alignment and differentiable top-k
//! grouping of aligned features into tokens.
//!
//! Each raw feature `x_i` is mapped by its own two-layer perceptron to width
//! `e`. A learnable selection matrix `W [n_g × n_f]` then picks, per group,
//! the `k` features with the largest logits; the softmax of those `k` logits
//! scales each selected embedding before the `k` embeddings are concatenated
//! into one token of width `d = k·e`. The index choice itself carries no
//! gradient; `W` learns only through the softmax scores, so non-selected
//! logits get exactly zero gradient.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::{validate_assignment, FeatureSpec, GroupingMode};
use crate::error::{bail, Error, Result};
use crate::graph::{softmax_in_place, Graph, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::topk::topk_indices;

/// Nonlinearity between the two alignment layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Silu,
    /// Linear pass-through; only used to build exact identity nets.
    Identity,
}

#[derive(Clone, Debug)]
struct AlignLayer {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// One two-layer perceptron per raw feature, each mapping `dims[i] → e`.
#[derive(Clone, Debug)]
pub struct AlignmentNets {
    dims: Vec<usize>,
    embed_dim: usize,
    activation: Activation,
    nets: Vec<AlignLayer>,
}

impl AlignmentNets {
    pub fn new(store: &mut ParamStore, spec: &FeatureSpec, rng: &mut SeededRng) -> Self {
        let e = spec.embed_dim;
        let nets = spec
            .dims
            .iter()
            .enumerate()
            .map(|(i, &w)| AlignLayer {
                w1: store.add_weight(alloc::format!("autotoken.align{i}.w1"), w, e, rng),
                b1: store.add_zeros(alloc::format!("autotoken.align{i}.b1"), &[e]),
                w2: store.add_weight(alloc::format!("autotoken.align{i}.w2"), e, e, rng),
                b2: store.add_zeros(alloc::format!("autotoken.align{i}.b2"), &[e]),
            })
            .collect();
        Self { dims: spec.dims.clone(), embed_dim: e, activation: Activation::Silu, nets }
    }

    /// Nets that reproduce their input exactly: identity weights, zero bias and
    /// a linear activation. Every width must equal `e`.
    pub fn identity(store: &mut ParamStore, dims: &[usize], e: usize) -> Result<Self> {
        if let Some(i) = dims.iter().position(|&w| w != e) {
            bail!(Config, "identity alignment needs width {} for feature {}, got {}", e, i, dims[i]);
        }
        let nets = (0..dims.len())
            .map(|i| AlignLayer {
                w1: store.add(alloc::format!("autotoken.align{i}.w1"), Tensor::identity(e)),
                b1: store.add_zeros(alloc::format!("autotoken.align{i}.b1"), &[e]),
                w2: store.add(alloc::format!("autotoken.align{i}.w2"), Tensor::identity(e)),
                b2: store.add_zeros(alloc::format!("autotoken.align{i}.b2"), &[e]),
            })
            .collect();
        Ok(Self { dims: dims.to_vec(), embed_dim: e, activation: Activation::Identity, nets })
    }

    pub fn n_features(&self) -> usize {
        self.dims.len()
    }

    /// Map `inputs[i]` (`[batch × dims[i]]`) through net `i` and concatenate
    /// the results into `[batch × n_f·e]`, features in order.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != self.dims.len() {
            bail!(Domain, "expected {} features, got {}", self.dims.len(), inputs.len());
        }
        let batch = g.value(inputs[0]).rows();
        let mut outs = Vec::with_capacity(inputs.len());
        for (i, (&x, net)) in inputs.iter().zip(&self.nets).enumerate() {
            let (rows, cols) = g.value(x).dims2();
            if cols != self.dims[i] {
                return Err(Error::FeatureWidth { feature: i, expected: self.dims[i], got: cols });
            }
            if rows != batch {
                bail!(Domain, "feature {} has {} rows, expected {}", i, rows, batch);
            }
            let h = g.matmul(x, bound.var(net.w1))?;
            let h = g.add_row(h, bound.var(net.b1))?;
            let h = match self.activation {
                Activation::Silu => g.silu(h),
                Activation::Identity => h,
            };
            let o = g.matmul(h, bound.var(net.w2))?;
            outs.push(g.add_row(o, bound.var(net.b2))?);
        }
        g.concat_cols(&outs)
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }
}

/// Run the alignment nets on one batch and return each sample's `X̂` as an
/// `[n_f × e]` matrix.
pub fn align_features(store: &ParamStore, nets: &AlignmentNets, features: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let inputs: Vec<Var> = features.iter().map(|t| g.constant(t.clone())).collect();
    let out = nets.forward(&mut g, &bound, &inputs)?;
    let v = g.value(out);
    (0..v.rows()).map(|b| Tensor::new(&[nets.n_features(), nets.embed_dim], v.row(b).to_vec())).collect()
}

/// Per group: the selected feature ids (in slot order) and their scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub groups: Vec<GroupEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub features: Vec<usize>,
    pub scores: Vec<f64>,
}

impl GroupAssignment {
    pub fn flat_indices(&self) -> Vec<usize> {
        self.groups.iter().flat_map(|g| g.features.iter().copied()).collect()
    }
}

/// Grouped representation of one sample: `x` is `[d × n_g]`, one token per column.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix {
    pub x: Tensor,
    pub assignment: GroupAssignment,
}

/// The grouping function `G` for one of the three strategies.
#[derive(Clone, Debug)]
pub enum Grouper {
    /// Frozen seeded assignment with uniform `1/k` weights.
    Random { indices: Vec<usize> },
    /// Learnable selection matrix `[n_g × n_f]`.
    AutoToken { select: ParamId },
    /// Fixed assignment with learnable per-group logits `[n_g × k]`.
    Manual { indices: Vec<usize>, logits: ParamId },
}

impl Grouper {
    pub fn new(
        mode: GroupingMode,
        spec: &FeatureSpec,
        manual: Option<&[Vec<usize>]>,
        store: &mut ParamStore,
        params_rng: &mut SeededRng,
        grouping_seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        let (n_g, k, n_f) = (spec.groups, spec.group_size, spec.n_features());
        Ok(match mode {
            GroupingMode::Random => Grouper::Random { indices: random_assignment(n_g, k, n_f, grouping_seed).into_iter().flatten().collect() },
            GroupingMode::AutoToken => Grouper::AutoToken { select: store.add("autotoken.select", Tensor::randn(&[n_g, n_f], 0.01, params_rng)) },
            GroupingMode::Manual => {
                let Some(groups) = manual else {
                    bail!(Config, "manual grouping requires an assignment");
                };
                validate_assignment(groups, n_g, k, n_f)?;
                Grouper::Manual { indices: groups.iter().flatten().copied().collect(), logits: store.add_zeros("autotoken.manual_logits", &[n_g, k]) }
            }
        })
    }

    /// Token rows `[batch·n_g × k·e]` from aligned features `[batch × n_f·e]`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, aligned: Var, spec: &FeatureSpec) -> Result<(Var, GroupAssignment)> {
        let (n_g, k, e) = (spec.groups, spec.group_size, spec.embed_dim);
        let (indices, scores) = match self {
            Grouper::Random { indices } => {
                let s = g.constant(Tensor::full(&[n_g, k], 1.0 / k as f64));
                (indices.clone(), s)
            }
            Grouper::AutoToken { select } => {
                let w = bound.var(*select);
                let indices = select_topk(g.value(w), k)?;
                let n_f = g.value(w).cols();
                let flat: Vec<usize> = indices.iter().enumerate().map(|(pos, &f)| (pos / k) * n_f + f).collect();
                let picked = g.gather_elems(w, &flat, &[n_g, k])?;
                (indices, g.softmax_rows(picked))
            }
            Grouper::Manual { indices, logits } => {
                let s = g.softmax_rows(bound.var(*logits));
                (indices.clone(), s)
            }
        };
        let tokens = g.group_tokens(aligned, scores, &indices, e)?;
        let sv = g.value(scores);
        let assignment = GroupAssignment {
            groups: (0..n_g).map(|gi| GroupEntry { features: indices[gi * k..(gi + 1) * k].to_vec(), scores: sv.row(gi).to_vec() }).collect(),
        };
        Ok((tokens, assignment))
    }

    /// Parameters that belong to the grouping function.
    pub fn param(&self) -> Option<ParamId> {
        match self {
            Grouper::Random { .. } => None,
            Grouper::AutoToken { select } => Some(*select),
            Grouper::Manual { logits, .. } => Some(*logits),
        }
    }

    /// Current assignment read from the parameters, without a forward pass.
    pub fn assignment(&self, store: &ParamStore, spec: &FeatureSpec) -> Result<GroupAssignment> {
        let k = spec.group_size;
        let (indices, scores) = match self {
            Grouper::Random { indices } => (indices.clone(), vec![vec![1.0 / k as f64; k]; spec.groups]),
            Grouper::AutoToken { select } => (select_topk(store.get(*select), k)?, selected_scores(store.get(*select), k)?),
            Grouper::Manual { indices, logits } => {
                let t = store.get(*logits);
                let scores = (0..t.rows())
                    .map(|r| {
                        let mut row = t.row(r).to_vec();
                        softmax_in_place(&mut row);
                        row
                    })
                    .collect();
                (indices.clone(), scores)
            }
        };
        Ok(GroupAssignment {
            groups: scores.into_iter().enumerate().map(|(gi, scores)| GroupEntry { features: indices[gi * k..(gi + 1) * k].to_vec(), scores }).collect(),
        })
    }
}

/// Row-wise top-k of the selection matrix, flattened group-major.
pub fn select_topk(w: &Tensor, k: usize) -> Result<Vec<usize>> {
    let (rows, n_f) = w.dims2();
    if k > n_f {
        bail!(Domain, "group size {} exceeds {} features", k, n_f);
    }
    let mut out = Vec::with_capacity(rows * k);
    for r in 0..rows {
        out.extend(topk_indices(w.row(r), k)?);
    }
    Ok(out)
}

/// Seeded assignment of `k` distinct features to each of `n_g` groups.
///
/// Features are dealt from successive shuffles of all features so that
/// coverage is as even as the group count allows.
pub fn random_assignment(n_g: usize, k: usize, n_f: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = SeededRng::split(seed, crate::rng::stream::GROUPING);
    let mut deck: Vec<usize> = Vec::new();
    let mut groups = Vec::with_capacity(n_g);
    for _ in 0..n_g {
        let mut members: Vec<usize> = Vec::with_capacity(k);
        while members.len() < k {
            if deck.is_empty() {
                deck = (0..n_f).collect();
                rng.shuffle(&mut deck);
            }
            match deck.iter().position(|f| !members.contains(f)) {
                Some(pos) => members.push(deck.remove(pos)),
                None => deck.clear(),
            }
        }
        groups.push(members);
    }
    groups
}

/// Single-sample AutoToken grouping: `aligned` is `X̂ [n_f × e]`, `select`
/// is `W [n_g × n_f]`. Returns `X [d × n_g]` and the assignment.
pub fn group_topk(aligned: &Tensor, select: &Tensor, k: usize) -> Result<TokenMatrix> {
    let (n_f, e) = aligned.dims2();
    let (n_g, w_cols) = select.dims2();
    if w_cols != n_f {
        return Err(Error::ShapeMismatch { op: "group_topk", left: aligned.shape().to_vec(), right: select.shape().to_vec() });
    }
    if k > n_f {
        bail!(Domain, "k = {} exceeds {} features", k, n_f);
    }
    let spec = FeatureSpec { dims: vec![e; n_f], embed_dim: e, groups: n_g, group_size: k };
    let mut store = ParamStore::new();
    let select_id = store.add("autotoken.select", select.clone());
    let grouper = Grouper::AutoToken { select: select_id };
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let flat = g.constant(aligned.clone().reshape(&[1, n_f * e])?);
    let (tokens, assignment) = grouper.forward(&mut g, &bound, flat, &spec)?;
    Ok(TokenMatrix { x: g.value(tokens).transpose(), assignment })
}

/// Softmax of the selected logits, exposed for reporting.
pub fn selected_scores(select: &Tensor, k: usize) -> Result<Vec<Vec<f64>>> {
    let idx = select_topk(select, k)?;
    Ok((0..select.rows())
        .map(|r| {
            let mut row: Vec<f64> = idx[r * k..(r + 1) * k].iter().map(|&f| select.at(r, f)).collect();
            softmax_in_place(&mut row);
            row
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::Tolerance;

    /// Brute force: sort each row by (value desc, index asc), softmax the top
    /// two logits, scale, concatenate.
    fn oracle(aligned: &Tensor, select: &Tensor, k: usize) -> Tensor {
        let (n_f, e) = aligned.dims2();
        let n_g = select.rows();
        let mut x = Tensor::zeros(&[k * e, n_g]);
        for gi in 0..n_g {
            let mut pairs: Vec<(f64, usize)> = (0..n_f).map(|j| (select.at(gi, j), j)).collect();
            pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let top = &pairs[..k];
            let m = top[0].0;
            let z: f64 = top.iter().map(|p| libm::exp(p.0 - m)).sum();
            for (slot, &(v, f)) in top.iter().enumerate() {
                let s = libm::exp(v - m) / z;
                for c in 0..e {
                    x.data_mut()[(slot * e + c) * n_g + gi] = s * aligned.at(f, c);
                }
            }
        }
        x
    }

    #[test]
    fn shape_contract_and_identity_nets() {
        let mut store = ParamStore::new();
        let nets = AlignmentNets::identity(&mut store, &[4, 4, 4], 4).unwrap();
        let mut rng = SeededRng::new(2);
        let feats: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[2, 4], 1.0, &mut rng)).collect();
        let out = align_features(&store, &nets, &feats).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].shape(), &[3, 4]);
        for b in 0..2 {
            for (i, f) in feats.iter().enumerate() {
                assert_eq!(out[b].row(i), f.row(b));
            }
        }
    }

    #[test]
    fn width_mismatch_names_feature() {
        let spec = FeatureSpec { dims: vec![2, 3], embed_dim: 2, groups: 1, group_size: 1 };
        let mut store = ParamStore::new();
        let nets = AlignmentNets::new(&mut store, &spec, &mut SeededRng::new(0));
        let feats = [Tensor::zeros(&[1, 2]), Tensor::zeros(&[1, 4])];
        assert_eq!(align_features(&store, &nets, &feats).unwrap_err(), Error::FeatureWidth { feature: 1, expected: 3, got: 4 });
    }

    #[test]
    fn alignment_gradients_match_finite_differences() {
        let spec = FeatureSpec { dims: vec![3, 2, 1], embed_dim: 4, groups: 1, group_size: 1 };
        let mut rng = SeededRng::new(9);
        let mut store = ParamStore::new();
        let nets = AlignmentNets::new(&mut store, &spec, &mut rng);
        let feats: Vec<Tensor> = spec.dims.iter().map(|&w| Tensor::randn(&[5, w], 1.0, &mut rng)).collect();
        let report = crate::gradcheck::check_graph_fn(
            store.tensors(),
            |g, vars| {
                let inputs: Vec<Var> = feats.iter().map(|t| g.constant(t.clone())).collect();
                let out = nets.forward(g, &Bound::from_vars(vars.to_vec()), &inputs)?;
                Ok(g.sum(out))
            },
            1e-5,
            Tolerance::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn uniform_row_gives_mean_scaling() {
        let mut rng = SeededRng::new(4);
        let aligned = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let tm = group_topk(&aligned, &Tensor::full(&[1, 3], 0.7), 3).unwrap();
        assert_eq!(tm.assignment.groups[0].features, [0, 1, 2]);
        for slot in 0..3 {
            for c in 0..2 {
                let want = aligned.at(slot, c) / 3.0;
                assert!((tm.x.at(slot * 2 + c, 0) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn singleton_group_passes_feature_through() {
        let mut rng = SeededRng::new(5);
        let aligned = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let w = Tensor::new(&[1, 4], vec![0.1, -0.2, 0.9, 0.3]).unwrap();
        let tm = group_topk(&aligned, &w, 1).unwrap();
        assert_eq!(tm.assignment.groups[0].scores, [1.0]);
        assert_eq!(tm.x.data(), aligned.row(2));
    }

    #[test]
    fn matches_bruteforce_oracle() {
        let mut rng = SeededRng::new(6);
        for _ in 0..20 {
            let aligned = Tensor::randn(&[4, 2], 1.0, &mut rng);
            let w = Tensor::randn(&[2, 4], 1.0, &mut rng);
            let tm = group_topk(&aligned, &w, 2).unwrap();
            assert!(tm.x.max_abs_diff(&oracle(&aligned, &w, 2)) < 1e-12);
            for entry in &tm.assignment.groups {
                assert!((entry.scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(entry.scores.iter().all(|&s| s > 0.0));
            }
        }
    }

    #[test]
    fn random_assignment_is_deterministic_and_distinct() {
        let a = random_assignment(5, 3, 7, 42);
        assert_eq!(a, random_assignment(5, 3, 7, 42));
        for g in &a {
            let mut s = g.clone();
            s.sort();
            s.dedup();
            assert_eq!(s.len(), 3);
        }
        // First ⌊7/3⌋ groups come from one shuffle and cannot overlap.
        assert!(a[0].iter().all(|f| !a[1].contains(f)));
    }

    #[test]
    fn manual_singletons_pass_features_through() {
        let spec = FeatureSpec { dims: vec![2; 3], embed_dim: 2, groups: 2, group_size: 1 };
        let mut store = ParamStore::new();
        let manual = [vec![2], vec![0]];
        let grouper = Grouper::new(GroupingMode::Manual, &spec, Some(&manual), &mut store, &mut SeededRng::new(0), 0).unwrap();
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let aligned = g.constant(Tensor::new(&[1, 6], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let (tokens, assignment) = grouper.forward(&mut g, &bound, aligned, &spec).unwrap();
        assert_eq!(g.value(tokens).data(), &[5.0, 6.0, 1.0, 2.0]);
        assert_eq!(assignment.groups[0].scores, [1.0]);

        let bad = [vec![0, 1], vec![2]];
        assert!(Grouper::new(GroupingMode::Manual, &spec, Some(&bad), &mut store, &mut SeededRng::new(0), 0).is_err());
    }

    #[test]
    fn k_larger_than_features_is_rejected() {
        let aligned = Tensor::zeros(&[2, 2]);
        assert!(matches!(group_topk(&aligned, &Tensor::zeros(&[1, 2]), 3), Err(Error::Domain(_))));
    }
}
