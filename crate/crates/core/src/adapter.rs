//! Adaptive-rank LoRA layer.
//!
//! A frozen weight `W*` is adapted as `W* + B·Λ·A`, where `Λ` is the
//! importance diagonal of the layer's [`RankParameter`]. `B` and `A` live in
//! buffers sized to the rank capacity `R_max`; only the first `D` columns of
//! `B` and the first `D` rows of `A` are active.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::checkpoint::checkpoint_size;
use crate::error::{Error, Result};
use crate::optim::{adam_update, AdamConfig, Moments};
use crate::rank::{importance_diagonal, importance_energy, importance_values, nu_target, RankParameter};

/// Role of a linear map inside the toy network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    SelfAttnQ,
    SelfAttnK,
    SelfAttnV,
    SelfAttnO,
    CrossAttnQ,
    CrossAttnK,
    CrossAttnV,
    CrossAttnO,
    Mlp,
}

impl LayerKind {
    pub const ALL: [LayerKind; 9] = [
        LayerKind::SelfAttnQ,
        LayerKind::SelfAttnK,
        LayerKind::SelfAttnV,
        LayerKind::SelfAttnO,
        LayerKind::CrossAttnQ,
        LayerKind::CrossAttnK,
        LayerKind::CrossAttnV,
        LayerKind::CrossAttnO,
        LayerKind::Mlp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::SelfAttnQ => "self_attn_q",
            LayerKind::SelfAttnK => "self_attn_k",
            LayerKind::SelfAttnV => "self_attn_v",
            LayerKind::SelfAttnO => "self_attn_o",
            LayerKind::CrossAttnQ => "cross_attn_q",
            LayerKind::CrossAttnK => "cross_attn_k",
            LayerKind::CrossAttnV => "cross_attn_v",
            LayerKind::CrossAttnO => "cross_attn_o",
            LayerKind::Mlp => "mlp",
        }
    }

    /// Whether the layer feeds a cross-attention probability map.
    pub fn is_cross_attention(self) -> bool {
        matches!(
            self,
            LayerKind::CrossAttnQ | LayerKind::CrossAttnK | LayerKind::CrossAttnV | LayerKind::CrossAttnO
        )
    }
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Non-trainable base weight `W*` of shape `m×n`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenLinear {
    pub name: String,
    pub kind: LayerKind,
    pub w_star: Tensor,
}

impl FrozenLinear {
    pub fn new(name: impl Into<String>, kind: LayerKind, w_star: Tensor) -> Result<Self> {
        let name = name.into();
        if w_star.rows() == 0 || w_star.cols() == 0 {
            return Err(Error::Construction(format!("layer {name} has a degenerate {:?} weight", w_star.shape())));
        }
        Ok(Self { name, kind, w_star })
    }

    pub fn out_features(&self) -> usize {
        self.w_star.rows()
    }

    pub fn in_features(&self) -> usize {
        self.w_star.cols()
    }
}

/// How the update `ΔW` is parameterized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterMode {
    /// `ΔW = B·Λ(ν)·A` with a learned rank.
    Adaptive,
    /// Plain `ΔW = B·A` at a pinned rank.
    FixedRank,
}

/// How newly activated columns of `B` are filled when the rank grows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthInit {
    /// New `B` columns start at zero so the layer output is unchanged.
    #[default]
    ZeroB,
    /// New `B` columns are drawn at random too.
    RandomB,
}

/// Trainable size of a set of adapters and the bytes their checkpoint takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    pub params: usize,
    pub bytes: usize,
}

/// `params = Σ_ℓ D_ℓ(m_ℓ + n_ℓ) + #layers`; `bytes` is the exact size of
/// the checkpoint [`crate::checkpoint::save_checkpoint`] would write.
pub fn active_param_count(layers: &[AdaptiveLoraLayer]) -> Footprint {
    Footprint {
        params: layers.iter().map(AdaptiveLoraLayer::active_params).sum(),
        bytes: checkpoint_size(layers),
    }
}

/// Result of a rank refresh.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResizeReport {
    pub old_d: usize,
    pub new_d: usize,
}

impl ResizeReport {
    pub fn changed(&self) -> bool {
        self.old_d != self.new_d
    }
}

/// Standard deviation of the rescaled Kaiming law, `√2 / √(Σ_j f²(j; ν))`.
pub fn rescaled_kaiming_std(nu: f64, d: usize) -> Result<f64> {
    Ok(std::f64::consts::SQRT_2 / importance_energy(nu, d)?.sqrt())
}

/// Tape handles for one layer during a forward/backward pass.
#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub w: Var,
    pub b: Var,
    pub a: Var,
    pub nu: Var,
    /// Importance diagonal; `None` in fixed-rank mode.
    pub lambda: Option<Var>,
}

impl BoundLayer {
    /// Differentiable `ΔW = B·Λ·A` (or `B·A` in fixed-rank mode).
    pub fn delta_weight(&self, tape: &mut Tape) -> Result<Var> {
        let scaled = match self.lambda {
            Some(l) => tape.diag_mul(l, self.a)?,
            None => self.a,
        };
        tape.matmul(self.b, scaled)
    }
}

/// Gradients of one layer's trainable state, restricted to active slots.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    /// `m×D`
    pub b: Tensor,
    /// `D×n`
    pub a: Tensor,
    pub raw: f64,
    pub nu: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerMoments {
    b: Moments,
    a: Moments,
    raw: Moments,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveLoraLayer {
    base: FrozenLinear,
    b_buf: Tensor,
    a_buf: Tensor,
    rank: RankParameter,
    mode: AdapterMode,
    growth: GrowthInit,
    generation: u64,
    moments: LayerMoments,
}

impl AdaptiveLoraLayer {
    /// Adaptive layer with `ν` set to the target rate of `r_init`, `A` drawn
    /// from the rescaled Kaiming law and `B = 0`.
    pub fn init_adapter<R: Rng + ?Sized>(
        base: FrozenLinear,
        r_init: usize,
        q: f64,
        r_max: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if r_init < 1 || r_init > r_max {
            return Err(Error::Construction(format!(
                "initial rank {r_init} outside [1, {r_max}] for layer {}",
                base.name
            )));
        }
        let nu = nu_target(q, r_init)?;
        let rank = RankParameter::new(nu, q, r_max)?;
        debug_assert_eq!(rank.d(), r_init);
        let std = rescaled_kaiming_std(nu, r_init)?;
        Ok(Self::assemble(base, rank, AdapterMode::Adaptive, std, rng))
    }

    /// Standard LoRA layer at a pinned rank `r`: `ΔW = B·A`, `B = 0`, `A`
    /// drawn with std `√(2/r)` (the rescaled law with every importance 1).
    pub fn init_fixed<R: Rng + ?Sized>(base: FrozenLinear, r: usize, q: f64, rng: &mut R) -> Result<Self> {
        if r < 1 {
            return Err(Error::Construction(format!("fixed rank must be >= 1 for layer {}", base.name)));
        }
        let rank = RankParameter::with_rank(nu_target(q, r)?, q, r, r)?;
        let std = (2.0 / r as f64).sqrt();
        Ok(Self::assemble(base, rank, AdapterMode::FixedRank, std, rng))
    }

    fn assemble<R: Rng + ?Sized>(
        base: FrozenLinear,
        rank: RankParameter,
        mode: AdapterMode,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let (m, n) = (base.out_features(), base.in_features());
        let cap = rank.r_max();
        let mut a_buf = Tensor::zeros(cap, n);
        let normal = Normal::new(0.0, std).expect("finite std");
        for v in &mut a_buf.data_mut()[..rank.d() * n] {
            *v = normal.sample(rng);
        }
        Self {
            base,
            b_buf: Tensor::zeros(m, cap),
            a_buf,
            rank,
            mode,
            growth: GrowthInit::default(),
            generation: 0,
            moments: LayerMoments {
                b: Moments::zeros(m * cap),
                a: Moments::zeros(cap * n),
                raw: Moments::zeros(1),
            },
        }
    }

    pub fn with_growth(mut self, growth: GrowthInit) -> Self {
        self.growth = growth;
        self
    }

    pub fn base(&self) -> &FrozenLinear {
        &self.base
    }

    pub fn name(&self) -> &str {
        &self.base.name
    }

    pub fn kind(&self) -> LayerKind {
        self.base.kind
    }

    pub fn mode(&self) -> AdapterMode {
        self.mode
    }

    pub fn rank(&self) -> &RankParameter {
        &self.rank
    }

    pub fn rank_mut(&mut self) -> &mut RankParameter {
        &mut self.rank
    }

    pub fn d(&self) -> usize {
        self.rank.d()
    }

    pub fn nu(&self) -> f64 {
        self.rank.nu()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn out_features(&self) -> usize {
        self.base.out_features()
    }

    pub fn in_features(&self) -> usize {
        self.base.in_features()
    }

    /// Active `B` slice, `m×D`.
    pub fn b_active(&self) -> Tensor {
        self.b_buf.slice_cols(0, self.d())
    }

    /// Active `A` slice, `D×n`.
    pub fn a_active(&self) -> Tensor {
        self.a_buf.slice_rows(0, self.d())
    }

    /// Full capacity buffers, active and inactive slots alike.
    pub fn buffers(&self) -> (&Tensor, &Tensor) {
        (&self.b_buf, &self.a_buf)
    }

    /// Overwrites the active slices.
    pub fn set_active(&mut self, b: &Tensor, a: &Tensor) -> Result<()> {
        let (m, n, d) = (self.out_features(), self.in_features(), self.d());
        if b.shape() != [m, d] {
            return Err(Error::Dimension { op: "set_active(b)", lhs: [m, d], rhs: b.shape() });
        }
        if a.shape() != [d, n] {
            return Err(Error::Dimension { op: "set_active(a)", lhs: [d, n], rhs: a.shape() });
        }
        let cap = self.rank.r_max();
        for i in 0..m {
            self.b_buf.data_mut()[i * cap..i * cap + d].copy_from_slice(b.row(i));
        }
        self.a_buf.data_mut()[..d * n].copy_from_slice(a.data());
        Ok(())
    }

    /// Restores rank rate, active rank and active slices, e.g. from a
    /// checkpoint. Slots beyond `d` are cleared.
    pub fn restore(&mut self, nu: f64, d: usize, b: &Tensor, a: &Tensor) -> Result<()> {
        if d < 1 || d > self.rank.r_max() {
            return Err(Error::ShapeMismatch(format!(
                "rank {d} outside [1, {}] for layer {}",
                self.rank.r_max(),
                self.name()
            )));
        }
        self.rank.set_nu(nu)?;
        self.rank.set_d(d);
        self.b_buf.data_mut().fill(0.0);
        self.a_buf.data_mut().fill(0.0);
        self.set_active(b, a)?;
        let (m, n, cap) = (self.out_features(), self.in_features(), self.rank.r_max());
        self.moments = LayerMoments {
            b: Moments::zeros(m * cap),
            a: Moments::zeros(cap * n),
            raw: Moments::zeros(1),
        };
        Ok(())
    }

    /// Current importance values (all ones in fixed-rank mode).
    pub fn importance(&self) -> Vec<f64> {
        match self.mode {
            AdapterMode::Adaptive => importance_values(self.nu(), self.d()),
            AdapterMode::FixedRank => vec![1.0; self.d()],
        }
    }

    /// Dense `ΔW = B·Λ·A`.
    pub fn delta_weight(&self) -> Tensor {
        let lambda = self.importance();
        let n = self.in_features();
        let mut scaled = self.a_active();
        for (j, l) in lambda.iter().enumerate() {
            for v in &mut scaled.data_mut()[j * n..(j + 1) * n] {
                *v *= l;
            }
        }
        self.b_active().matmul(&scaled).expect("consistent layer shapes")
    }

    /// Records the layer's state on `tape`. `B`, `A` and, in adaptive mode,
    /// the raw rank rate become trainable leaves.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundLayer> {
        let w = tape.constant(self.base.w_star.clone());
        let b = tape.leaf(self.b_active(), true);
        let a = tape.leaf(self.a_active(), true);
        let adaptive = self.mode == AdapterMode::Adaptive;
        let nu = self.rank.bind(tape, adaptive);
        let lambda = if adaptive {
            Some(importance_diagonal(tape, nu, self.d())?)
        } else {
            None
        };
        Ok(BoundLayer { w, b, a, nu, lambda })
    }

    /// `W*·x + B·(Λ·(A·x))` for `x` of shape `n×T`; `ΔW` is never formed.
    pub fn adapted_forward(&self, tape: &mut Tape, bound: &BoundLayer, x: Var) -> Result<Var> {
        let base = tape.matmul(bound.w, x)?;
        let ax = tape.matmul(bound.a, x)?;
        let scaled = match bound.lambda {
            Some(l) => tape.diag_mul(l, ax)?,
            None => ax,
        };
        let up = tape.matmul(bound.b, scaled)?;
        tape.add(base, up)
    }

    /// Frozen-only forward `W*·x`.
    pub fn base_forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.constant(self.base.w_star.clone());
        tape.matmul(w, x)
    }

    /// Reads this layer's gradients off a tape after `backward`.
    pub fn grads(&self, tape: &Tape, bound: &BoundLayer) -> LayerGrads {
        let nu = tape.grad(bound.nu).item();
        LayerGrads {
            b: tape.grad(bound.b),
            a: tape.grad(bound.a),
            raw: nu * self.rank.dnu_draw(),
            nu,
        }
    }

    /// Adam step on the active slots of `B` and `A` and, when `update_rate`
    /// is set in adaptive mode, on the raw rank rate.
    pub fn adam_step(
        &mut self,
        grads: &LayerGrads,
        weights: &AdamConfig,
        rate: &AdamConfig,
        update_rate: bool,
        step: u64,
    ) {
        let (m, n, d, cap) = (self.out_features(), self.in_features(), self.d(), self.rank.r_max());
        debug_assert_eq!(grads.b.shape(), [m, d]);
        debug_assert_eq!(grads.a.shape(), [d, n]);
        for i in 0..m {
            let span = i * cap..i * cap + d;
            adam_update(
                &mut self.b_buf.data_mut()[span.clone()],
                grads.b.row(i),
                &mut self.moments.b.m[span.clone()],
                &mut self.moments.b.v[span],
                weights,
                step,
            );
        }
        let span = 0..d * n;
        adam_update(
            &mut self.a_buf.data_mut()[span.clone()],
            grads.a.data(),
            &mut self.moments.a.m[span.clone()],
            &mut self.moments.a.v[span],
            weights,
            step,
        );
        if update_rate && self.mode == AdapterMode::Adaptive {
            let mut raw = [self.rank.raw()];
            adam_update(&mut raw, &[grads.raw], &mut self.moments.raw.m, &mut self.moments.raw.v, rate, step);
            self.rank.set_raw(raw[0]);
        }
    }

    /// Recomputes `D` from the current `ν` and grows or shrinks the active
    /// slots to match. Fixed-rank layers never resize.
    pub fn refresh_rank<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<ResizeReport> {
        let old_d = self.d();
        if self.mode == AdapterMode::FixedRank {
            return Ok(ResizeReport { old_d, new_d: old_d });
        }
        let new_d = self.rank.target_d()?;
        if new_d == old_d {
            return Ok(ResizeReport { old_d, new_d });
        }
        let (m, n, cap) = (self.out_features(), self.in_features(), self.rank.r_max());
        let (lo, hi) = (old_d.min(new_d), old_d.max(new_d));

        // Slots in lo..hi are either freshly activated or discarded; both
        // start from a clean slate.
        for i in 0..m {
            self.b_buf.data_mut()[i * cap + lo..i * cap + hi].fill(0.0);
            self.moments.b.reset(i * cap + lo..i * cap + hi);
        }
        self.a_buf.data_mut()[lo * n..hi * n].fill(0.0);
        self.moments.a.reset(lo * n..hi * n);

        if new_d > old_d {
            let a_std = rescaled_kaiming_std(self.nu(), new_d)?;
            let a_law = Normal::new(0.0, a_std).expect("finite std");
            for v in &mut self.a_buf.data_mut()[old_d * n..new_d * n] {
                *v = a_law.sample(rng);
            }
            if self.growth == GrowthInit::RandomB {
                let b_law = Normal::new(0.0, (2.0 / new_d as f64).sqrt()).expect("finite std");
                for i in 0..m {
                    for v in &mut self.b_buf.data_mut()[i * cap + old_d..i * cap + new_d] {
                        *v = b_law.sample(rng);
                    }
                }
            }
        }
        self.rank.set_d(new_d);
        self.generation += 1;
        Ok(ResizeReport { old_d, new_d })
    }

    /// `D·(m + n) + 1` trainable scalars.
    pub fn active_params(&self) -> usize {
        self.d() * (self.out_features() + self.in_features()) + 1
    }

    /// Active entries of `B` and `A`, in that order.
    pub fn active_entries(&self) -> impl Iterator<Item = f64> + '_ {
        let (m, d, cap) = (self.out_features(), self.d(), self.rank.r_max());
        let b = (0..m).flat_map(move |i| self.b_buf.data()[i * cap..i * cap + d].iter().copied());
        let a = self.a_buf.data()[..d * self.in_features()].iter().copied();
        b.chain(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rank::importance_values;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    fn base(m: usize, n: usize, rng: &mut ChaCha8Rng) -> FrozenLinear {
        let w = Tensor::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        FrozenLinear::new("q", LayerKind::SelfAttnQ, w).unwrap()
    }

    fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn rescaled_std_worked_example() {
        // Σf² = 0.25² + 0.125² = 0.078125
        let std = rescaled_kaiming_std(LN_2, 2).unwrap();
        assert!((std - 2f64.sqrt() / 0.078125f64.sqrt()).abs() < 1e-12);
        assert!((std - 5.059_644).abs() < 1e-6);
    }

    #[test]
    fn fresh_layer_has_zero_delta_and_base_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = AdaptiveLoraLayer::init_adapter(base(6, 5, &mut rng), 3, 0.9, 16, &mut rng).unwrap();
        assert_eq!(layer.d(), 3);
        assert_eq!(layer.delta_weight(), Tensor::zeros(6, 5));
        assert!(layer.b_active().data().iter().all(|&v| v == 0.0));

        let x0 = random_tensor(&mut rng, 5, 4);
        let mut tape = Tape::new();
        let x = tape.constant(x0);
        let bound = layer.bind(&mut tape).unwrap();
        let adapted = layer.adapted_forward(&mut tape, &bound, x).unwrap();
        let plain = layer.base_forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(adapted), tape.value(plain));
    }

    #[test]
    fn init_rejects_bad_shapes_and_ranks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(FrozenLinear::new("x", LayerKind::Mlp, Tensor::zeros(0, 4)).is_err());
        assert!(AdaptiveLoraLayer::init_adapter(base(4, 4, &mut rng), 0, 0.9, 8, &mut rng).is_err());
        assert!(AdaptiveLoraLayer::init_adapter(base(4, 4, &mut rng), 9, 0.9, 8, &mut rng).is_err());
    }

    #[test]
    fn init_std_matches_rescaled_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = AdaptiveLoraLayer::init_adapter(base(4, 400, &mut rng), 8, 0.9, 64, &mut rng).unwrap();
        let a = layer.a_active();
        let var = a.data().iter().map(|v| v * v).sum::<f64>() / a.len() as f64;
        let expected = rescaled_kaiming_std(layer.nu(), 8).unwrap();
        assert!((var.sqrt() / expected - 1.0).abs() < 0.05);
    }

    #[test]
    fn rank_one_delta_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = AdaptiveLoraLayer::init_adapter(base(3, 3, &mut rng), 1, 0.9, 4, &mut rng).unwrap();
        layer.rank_mut().set_nu(LN_2).unwrap();
        layer
            .set_active(&Tensor::column(&[1.0, 0.0, 0.0]), &Tensor::from_rows(&[[1.0, 0.0, 0.0]]))
            .unwrap();
        let dw = layer.delta_weight();
        for i in 0..3 {
            for j in 0..3 {
                let want = if (i, j) == (0, 0) { 0.25 } else { 0.0 };
                assert!((dw.get(i, j) - want).abs() < 1e-15);
            }
        }
    }

    fn randomized_layer(rng: &mut ChaCha8Rng, m: usize, n: usize, d: usize, cap: usize) -> AdaptiveLoraLayer {
        let mut layer = AdaptiveLoraLayer::init_adapter(base(m, n, rng), d, 0.9, cap, rng).unwrap();
        let b = random_tensor(rng, m, d);
        let a = random_tensor(rng, d, n);
        layer.set_active(&b, &a).unwrap();
        layer
    }

    #[test]
    fn delta_weight_frobenius_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let layer = randomized_layer(&mut rng, 5, 7, 4, 8);
            let f = importance_values(layer.nu(), 4);
            let (b, a) = (layer.b_active(), layer.a_active());
            let bound: f64 = (0..4)
                .map(|j| f[j] * b.slice_cols(j, 1).frobenius_norm() * a.slice_rows(j, 1).frobenius_norm())
                .sum();
            assert!(layer.delta_weight().frobenius_norm() <= bound + 1e-12);
        }
    }

    #[test]
    fn factored_forward_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let layer = randomized_layer(&mut rng, 6, 5, 3, 10);
            let x0 = random_tensor(&mut rng, 5, 4);
            let mut tape = Tape::new();
            let x = tape.constant(x0.clone());
            let bound = layer.bind(&mut tape).unwrap();
            let y = layer.adapted_forward(&mut tape, &bound, x).unwrap();
            let dense = layer.base().w_star.add(&layer.delta_weight()).unwrap().matmul(&x0).unwrap();
            let err = tape.value(y).sub(&dense).unwrap().frobenius_norm() / dense.frobenius_norm();
            assert!(err <= 1e-10, "{err}");
        }
    }

    #[test]
    fn bound_delta_weight_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let layer = randomized_layer(&mut rng, 4, 3, 2, 5);
        let mut tape = Tape::new();
        let bound = layer.bind(&mut tape).unwrap();
        let dw = bound.delta_weight(&mut tape).unwrap();
        let diff = tape.value(dw).sub(&layer.delta_weight()).unwrap();
        assert!(diff.frobenius_norm() < 1e-14);
    }

    #[test]
    fn unchanged_nu_refresh_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut layer = randomized_layer(&mut rng, 4, 4, 3, 8);
        let before = layer.clone();
        let report = layer.refresh_rank(&mut rng).unwrap();
        assert!(!report.changed());
        assert_eq!(layer, before);
    }

    #[test]
    fn growth_preserves_output_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut layer = randomized_layer(&mut rng, 5, 4, 2, 8);
        let x0 = random_tensor(&mut rng, 4, 3);
        let out = |layer: &AdaptiveLoraLayer| {
            let mut tape = Tape::new();
            let x = tape.constant(x0.clone());
            let bound = layer.bind(&mut tape).unwrap();
            let y = layer.adapted_forward(&mut tape, &bound, x).unwrap();
            tape.value(y).clone()
        };
        let before = out(&layer);
        let nu = layer.nu();
        // ν moves first (as after an optimizer step); the resize instant is
        // between that move and the refresh.
        layer.rank_mut().set_nu(nu_target(0.9, 4).unwrap()).unwrap();
        let at_new_nu = out(&layer);
        let report = layer.refresh_rank(&mut rng).unwrap();
        assert_eq!(report, ResizeReport { old_d: 2, new_d: 4 });
        assert_eq!(layer.generation(), 1);
        let grown = out(&layer);
        assert_eq!(grown, at_new_nu);
        assert_ne!(before, at_new_nu, "changing ν alters Λ; nu was {nu}");
        assert!(layer.b_active().slice_cols(2, 2).data().iter().all(|&v| v == 0.0));
        assert!(layer.a_active().slice_rows(2, 2).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn random_b_growth_changes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut layer = randomized_layer(&mut rng, 5, 4, 2, 8).with_growth(GrowthInit::RandomB);
        layer.rank_mut().set_nu(nu_target(0.9, 4).unwrap()).unwrap();
        let dw_before = layer.delta_weight();
        layer.refresh_rank(&mut rng).unwrap();
        assert_ne!(layer.delta_weight(), dw_before);
    }

    #[test]
    fn shrink_discards_slots_and_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut layer = randomized_layer(&mut rng, 6, 6, 6, 8);
        let f = importance_values(layer.nu(), 6);
        let (b, a) = (layer.b_active(), layer.a_active());
        let bound: f64 = (2..6)
            .map(|j| f[j] * b.slice_cols(j, 1).frobenius_norm() * a.slice_rows(j, 1).frobenius_norm())
            .sum();
        let before = layer.delta_weight();
        let nu = layer.nu();
        layer.rank_mut().set_nu(nu_target(0.9, 2).unwrap()).unwrap();
        layer.refresh_rank(&mut rng).unwrap();
        // compare at the original ν so only truncation differs
        layer.rank_mut().set_nu(nu).unwrap();
        let after = layer.delta_weight();
        assert_eq!(layer.d(), 2);
        assert!(before.sub(&after).unwrap().frobenius_norm() <= bound + 1e-12);
        let (bb, ab) = layer.buffers();
        assert!(bb.slice_cols(2, 6).data().iter().all(|&v| v == 0.0));
        assert!(ab.slice_rows(2, 6).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fixed_rank_layer_never_resizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut layer = AdaptiveLoraLayer::init_fixed(base(4, 4, &mut rng), 8, 0.9, &mut rng).unwrap();
        layer.rank_mut().set_nu(5.0).unwrap();
        assert!(!layer.refresh_rank(&mut rng).unwrap().changed());
        assert_eq!(layer.d(), 8);
        assert_eq!(layer.importance(), vec![1.0; 8]);
        let mut tape = Tape::new();
        let bound = layer.bind(&mut tape).unwrap();
        assert!(bound.lambda.is_none());
        assert!(!tape.requires_grad(bound.nu));
    }

    #[test]
    fn param_count_example() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layer = AdaptiveLoraLayer::init_adapter(base(8, 8, &mut rng), 2, 0.9, 8, &mut rng).unwrap();
        assert_eq!(layer.active_params(), 33);
    }

    #[test]
    fn adam_step_touches_only_active_slots() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut layer = randomized_layer(&mut rng, 3, 3, 2, 5);
        let (b0, a0) = (layer.buffers().0.clone(), layer.buffers().1.clone());
        let grads = LayerGrads {
            b: Tensor::filled(3, 2, 1.0),
            a: Tensor::filled(2, 3, -1.0),
            raw: 0.5,
            nu: 0.0,
        };
        let cfg = AdamConfig::with_lr(0.1);
        let raw0 = layer.rank().raw();
        layer.adam_step(&grads, &cfg, &cfg, true, 1);
        let (b1, a1) = layer.buffers();
        for i in 0..3 {
            for j in 0..5 {
                assert_eq!(b1.get(i, j) == b0.get(i, j), j >= 2);
            }
        }
        for j in 0..5 {
            assert_eq!(a1.get(j, 0) == a0.get(j, 0), j >= 2);
        }
        assert!((layer.rank().raw() - (raw0 - 0.1)).abs() < 1e-6);
    }
}
