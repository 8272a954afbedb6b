//! Head-wise learnable token mixing and the per-block normalization placements.
//!
//! Token rows are `M = Xᵀ` (`n_g × d`). The feature axis is split into `H`
//! heads of width `d/H`; head `h` mixes tokens through its own `n_g × n_g`
//! matrix `W_h` with a residual: `Z^(h) = (I + W_hᵀ) M^(h)`.

use alloc::vec::Vec;

use crate::config::{MixingInit, NormVariant};
use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Mixing matrices for one block. `mats` is `None` in fixed-transpose mode.
#[derive(Clone, Debug)]
pub struct MixingHeads {
    pub heads: usize,
    pub tokens: usize,
    pub mats: Option<ParamId>,
}

impl MixingHeads {
    pub fn new(store: &mut ParamStore, name: &str, init: MixingInit, heads: usize, tokens: usize, rng: &mut SeededRng) -> Self {
        let mats = init_mixing(init, heads, tokens, rng).map(|t| store.add(name, t));
        Self { heads, tokens, mats }
    }

    /// Mix token rows `[batch·n_g × d]`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, input: Var) -> Result<Var> {
        let d = g.value(input).cols();
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            bail!(Config, "token dimension {} is not divisible by {} heads", d, self.heads);
        }
        match self.mats {
            None => Ok(input),
            Some(id) => g.token_mix(input, bound.var(id), self.heads, self.tokens),
        }
    }
}

/// Initial matrices stacked as `[H·n_g × n_g]`, or `None` for fixed transpose.
pub fn init_mixing(init: MixingInit, heads: usize, tokens: usize, rng: &mut SeededRng) -> Option<Tensor> {
    let shape = [heads * tokens, tokens];
    match init {
        MixingInit::FixedTranspose => None,
        MixingInit::Zeros => Some(Tensor::zeros(&shape)),
        MixingInit::Ones => Some(Tensor::full(&shape, 1.0)),
        MixingInit::Orthogonal => {
            let mut data = Vec::with_capacity(heads * tokens * tokens);
            for _ in 0..heads {
                data.extend_from_slice(orthogonal(tokens, rng).data());
            }
            Some(Tensor::new(&shape, data).expect("consistent shape"))
        }
    }
}

/// Q factor of a Gaussian draw, with the sign convention that `R` has a
/// positive diagonal (Gram–Schmidt on columns, re-orthogonalized once).
pub fn orthogonal(n: usize, rng: &mut SeededRng) -> Tensor {
    loop {
        let a = Tensor::randn(&[n, n], 1.0, rng);
        if let Some(q) = gram_schmidt(&a) {
            return q;
        }
    }
}

fn gram_schmidt(a: &Tensor) -> Option<Tensor> {
    let n = a.rows();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| a.at(i, j)).collect()).collect();
    for j in 0..n {
        for _pass in 0..2 {
            for p in 0..j {
                let dot: f64 = (0..n).map(|i| cols[j][i] * cols[p][i]).sum();
                for i in 0..n {
                    cols[j][i] -= dot * cols[p][i];
                }
            }
        }
        let norm = libm::sqrt(cols[j].iter().map(|v| v * v).sum());
        if norm < 1e-8 {
            return None;
        }
        cols[j].iter_mut().for_each(|v| *v /= norm);
    }
    let mut q = Tensor::zeros(&[n, n]);
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            q.data_mut()[i * n + j] = v;
        }
    }
    Some(q)
}

/// Single-sample mixing: `x` is `X [d × n_g]`; returns `Z [n_g × d]`.
/// `mats` of `None` means fixed transpose, `Z = Xᵀ`.
pub fn token_mix(x: &Tensor, mats: Option<&Tensor>, heads: usize) -> Result<Tensor> {
    let (d, tokens) = x.dims2();
    if heads == 0 || d % heads != 0 {
        bail!(Config, "token dimension {} is not divisible by {} heads", d, heads);
    }
    let m = x.transpose();
    let Some(w) = mats else { return Ok(m) };
    let mut g = Graph::new();
    let mv = g.constant(m);
    let wv = g.constant(w.clone());
    let z = g.token_mix(mv, wv, heads, tokens)?;
    Ok(g.value(z).clone())
}

/// Gain and bias of one normalization site.
#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        Self { gain: store.add(alloc::format!("{prefix}.gain"), Tensor::full(&[d], 1.0)), bias: store.add_zeros(alloc::format!("{prefix}.bias"), &[d]) }
    }

    pub fn apply(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, bound.var(self.gain), bound.var(self.bias))
    }
}

/// Wrap a block body with one of the normalization placements.
///
/// `final_norm` is the extra site PreNorm_L applies after the last layer.
pub fn apply_block<F>(
    g: &mut Graph,
    bound: &Bound,
    input: Var,
    variant: NormVariant,
    norm: &NormParams,
    final_norm: Option<&NormParams>,
    is_last_layer: bool,
    body: F,
) -> Result<Var>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    match variant {
        NormVariant::PreNorm => {
            let x = norm.apply(g, bound, input)?;
            body(g, x)
        }
        NormVariant::PreNormL => {
            let x = norm.apply(g, bound, input)?;
            let out = body(g, x)?;
            match (is_last_layer, final_norm) {
                (true, Some(f)) => f.apply(g, bound, out),
                (true, None) => bail!(Config, "PreNorm_L needs a final normalization site"),
                (false, _) => Ok(out),
            }
        }
        NormVariant::PostNorm => {
            let out = body(g, input)?;
            norm.apply(g, bound, out)
        }
        NormVariant::PostNormR => {
            let out = body(g, input)?;
            let sum = g.add(input, out)?;
            norm.apply(g, bound, sum)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_graph_fn, Tolerance};

    /// Elementwise loop over the defining sum `Z[t, h·dh + c] = M[t, ·] + Σ_s W_h[s, t] M[s, ·]`.
    fn loop_oracle(x: &Tensor, w: &Tensor, heads: usize) -> Tensor {
        let (d, n) = x.dims2();
        let dh = d / heads;
        let mut z = Tensor::zeros(&[n, d]);
        for h in 0..heads {
            for t in 0..n {
                for c in 0..dh {
                    let col = h * dh + c;
                    let mut acc = x.at(col, t);
                    for s in 0..n {
                        acc += w.at(h * n + s, t) * x.at(col, s);
                    }
                    z.data_mut()[t * d + col] = acc;
                }
            }
        }
        z
    }

    #[test]
    fn zero_init_is_transpose_exactly() {
        let mut rng = SeededRng::new(1);
        let x = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let w = init_mixing(MixingInit::Zeros, 3, 4, &mut rng).unwrap();
        assert_eq!(w.norm(), 0.0);
        assert_eq!(token_mix(&x, Some(&w), 3).unwrap(), x.transpose());
        assert_eq!(token_mix(&x, None, 3).unwrap(), x.transpose());
    }

    #[test]
    fn orthogonal_init_is_orthogonal_and_seeded() {
        let w = init_mixing(MixingInit::Orthogonal, 2, 5, &mut SeededRng::new(3)).unwrap();
        let again = init_mixing(MixingInit::Orthogonal, 2, 5, &mut SeededRng::new(3)).unwrap();
        assert_eq!(w, again);
        for h in 0..2 {
            let block = Tensor::new(&[5, 5], w.data()[h * 25..(h + 1) * 25].to_vec()).unwrap();
            let gram = block.transpose().matmul(&block).unwrap();
            assert!(gram.max_abs_diff(&Tensor::identity(5)) < 1e-9);
        }
    }

    #[test]
    fn ones_init_collapses_tokens() {
        let x = Tensor::from_rows(&[&[1.0, -2.0], &[0.5, 3.0], &[4.0, 0.25], &[-1.0, 2.0]]).unwrap();
        let w = init_mixing(MixingInit::Ones, 2, 2, &mut SeededRng::new(0)).unwrap();
        let z = token_mix(&x, Some(&w), 2).unwrap();
        let m = x.transpose();
        // Y = Z - M = W_hᵀ M^(h): each row is the column sum over tokens.
        for col in 0..4 {
            let y0 = z.at(0, col) - m.at(0, col);
            let y1 = z.at(1, col) - m.at(1, col);
            assert_eq!(y0, y1);
            assert_eq!(y0, m.at(0, col) + m.at(1, col));
        }
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = SeededRng::new(7);
        for _ in 0..10 {
            let x = Tensor::randn(&[4, 3], 1.0, &mut rng);
            let w = Tensor::randn(&[6, 3], 1.0, &mut rng);
            let z = token_mix(&x, Some(&w), 2).unwrap();
            assert!(z.max_abs_diff(&loop_oracle(&x, &w, 2)) < 1e-12);
        }
    }

    #[test]
    fn indivisible_heads_is_config_error() {
        let x = Tensor::zeros(&[5, 2]);
        assert!(matches!(token_mix(&x, None, 2), Err(crate::Error::Config(_))));
    }

    #[test]
    fn head_locality_and_linearity() {
        let mut rng = SeededRng::new(8);
        let x1 = Tensor::randn(&[6, 3], 1.0, &mut rng);
        let x2 = Tensor::randn(&[6, 3], 1.0, &mut rng);
        let w = Tensor::randn(&[9, 3], 1.0, &mut rng);
        let mut w_pert = w.clone();
        w_pert.data_mut()[3 * 3 + 4] += 0.5; // head 1
        let (z, zp) = (token_mix(&x1, Some(&w), 3).unwrap(), token_mix(&x1, Some(&w_pert), 3).unwrap());
        for t in 0..3 {
            for col in 0..6 {
                let changed = z.at(t, col) != zp.at(t, col);
                if !(2..4).contains(&col) {
                    assert!(!changed);
                }
            }
        }
        let combo = Tensor::new(&[6, 3], x1.data().iter().zip(x2.data()).map(|(a, b)| 2.0 * a - 0.5 * b).collect()).unwrap();
        let lhs = token_mix(&combo, Some(&w), 3).unwrap();
        let (z1, z2) = (token_mix(&x1, Some(&w), 3).unwrap(), token_mix(&x2, Some(&w), 3).unwrap());
        let rhs = Tensor::new(&[3, 6], z1.data().iter().zip(z2.data()).map(|(a, b)| 2.0 * a - 0.5 * b).collect()).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn mixing_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(9);
        let m = Tensor::randn(&[2 * 3, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[2 * 3, 3], 1.0, &mut rng);
        let weights = Tensor::randn(&[24], 1.0, &mut rng).into_data();
        let report = check_graph_fn(
            &[m, w],
            |g, v| {
                let z = g.token_mix(v[0], v[1], 2, 3)?;
                g.dot_const(z, weights.clone())
            },
            1e-5,
            Tolerance::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn norm_variants() {
        let mut store = ParamStore::new();
        let norm = NormParams::new(&mut store, "n", 4);
        let fin = NormParams::new(&mut store, "f", 4);
        // Distinct final gain so PreNorm_L's extra site is observable.
        store.get_mut(fin.gain).data_mut().copy_from_slice(&[2.0, 2.0, 2.0, 2.0]);
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let mut rng = SeededRng::new(10);
        let x = g.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let identity = |_: &mut Graph, v: Var| Ok(v);

        let post_r = apply_block(&mut g, &bound, x, NormVariant::PostNormR, &norm, None, false, identity).unwrap();
        let doubled = g.affine(x, 2.0, 0.0);
        let expect = norm.apply(&mut g, &bound, doubled).unwrap();
        assert_eq!(g.value(post_r), g.value(expect));

        let pre = apply_block(&mut g, &bound, x, NormVariant::PreNorm, &norm, Some(&fin), true, identity).unwrap();
        let pre_l_mid = apply_block(&mut g, &bound, x, NormVariant::PreNormL, &norm, Some(&fin), false, identity).unwrap();
        let pre_l_last = apply_block(&mut g, &bound, x, NormVariant::PreNormL, &norm, Some(&fin), true, identity).unwrap();
        assert_eq!(g.value(pre), g.value(pre_l_mid));
        assert_ne!(g.value(pre), g.value(pre_l_last));
    }
}
