//! Desk-scale conditional network and teacher–student benchmark.
//!
//! The network reads an input of `P = 4` patch tokens of width `d_model`
//! and `k_tokens` condition tokens of width `d_cond`, and runs
//!
//! 1. self-attention over the patches (`Q/K/V/O`, residual),
//! 2. cross-attention from patches to condition tokens (`Q/K/V/O`,
//!    residual), emitting its probability map,
//! 3. a linear MLP with a residual connection.
//!
//! Tokens are stored as matrix columns, so a linear layer maps `n×T` to
//! `m×T`. Every one of the nine linear maps carries one adapter.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::adapter::{AdaptiveLoraLayer, BoundLayer, FrozenLinear, GrowthInit, LayerKind};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Number of patch tokens an input is split into.
pub const PATCHES: usize = 4;

/// Planted ranks of the default teacher, in [`LayerKind::ALL`] order.
pub const DEFAULT_PLANTED_RANKS: [usize; 9] = [1, 2, 4, 8, 2, 1, 4, 2, 6];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyNetSpec {
    pub d_model: usize,
    pub k_tokens: usize,
    pub d_cond: usize,
}

impl Default for ToyNetSpec {
    fn default() -> Self {
        Self { d_model: 32, k_tokens: 4, d_cond: 32 }
    }
}

impl ToyNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.k_tokens == 0 || self.d_cond == 0 {
            return Err(Error::Construction(format!("toy net dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        PATCHES * self.d_model
    }

    pub fn cond_width(&self) -> usize {
        self.k_tokens * self.d_cond
    }

    /// `(out, in)` shape of the layer of the given kind.
    pub fn layer_shape(&self, kind: LayerKind) -> (usize, usize) {
        match kind {
            LayerKind::CrossAttnK | LayerKind::CrossAttnV => (self.d_model, self.d_cond),
            _ => (self.d_model, self.d_model),
        }
    }
}

/// How adapters are initialized when a network is built.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdapterInit {
    Adaptive { r_init: usize, q: f64, r_max: usize, growth: GrowthInit },
    Fixed { rank: usize, q: f64 },
}

/// Toy network: frozen base weights plus one adapter per linear map.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    spec: ToyNetSpec,
    layers: Vec<AdaptiveLoraLayer>,
}

/// Linear maps used by one forward pass.
pub enum Linears<'a> {
    Adapted(&'a ToyModel, &'a [BoundLayer]),
    Plain(&'a [Var]),
}

impl Linears<'_> {
    fn apply(&self, tape: &mut Tape, idx: usize, x: Var) -> Result<Var> {
        match self {
            Linears::Adapted(model, bound) => model.layers[idx].adapted_forward(tape, &bound[idx], x),
            Linears::Plain(ws) => tape.matmul(ws[idx], x),
        }
    }
}

/// Output of a batched forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `N × (P·d_model)`, one flattened output per row.
    pub pred: Var,
    /// Cross-attention probabilities, `(P·N) × k_tokens`.
    pub cross_map: Var,
}

/// Base weights drawn i.i.d. Gaussian with std `1/√fan_in`, in
/// [`LayerKind::ALL`] order.
pub fn base_weights(spec: &ToyNetSpec, seed: u64) -> Result<Vec<FrozenLinear>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LayerKind::ALL
        .iter()
        .map(|&kind| {
            let (m, n) = spec.layer_shape(kind);
            let law = Normal::new(0.0, 1.0 / (n as f64).sqrt()).expect("finite std");
            let w = Tensor::from_fn(m, n, |_, _| law.sample(&mut rng));
            FrozenLinear::new(kind.as_str(), kind, w)
        })
        .collect()
}

/// Builds the toy network. Base weights depend only on `seed`, so adaptive
/// and fixed-rank students built with the same seed share them.
pub fn build_toy_net(spec: &ToyNetSpec, init: &AdapterInit, seed: u64) -> Result<ToyModel> {
    let bases = base_weights(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let layers = bases
        .into_iter()
        .map(|base| match *init {
            AdapterInit::Adaptive { r_init, q, r_max, growth } => {
                Ok(AdaptiveLoraLayer::init_adapter(base, r_init, q, r_max, &mut rng)?.with_growth(growth))
            }
            AdapterInit::Fixed { rank, q } => AdaptiveLoraLayer::init_fixed(base, rank, q, &mut rng),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ToyModel { spec: *spec, layers })
}

fn tokens(flat: &[f64], width: usize, count: usize) -> Tensor {
    Tensor::from_fn(width, count, |i, t| flat[t * width + i])
}

impl ToyModel {
    pub fn from_layers(spec: ToyNetSpec, layers: Vec<AdaptiveLoraLayer>) -> Result<Self> {
        if layers.len() != LayerKind::ALL.len() {
            return Err(Error::Construction(format!("toy net needs 9 layers, got {}", layers.len())));
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &ToyNetSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[AdaptiveLoraLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [AdaptiveLoraLayer] {
        &mut self.layers
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.d()).collect()
    }

    pub fn nus(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.nu()).collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<Vec<BoundLayer>> {
        self.layers.iter().map(|l| l.bind(tape)).collect()
    }

    /// Frozen base weights as constants on `tape`.
    pub fn bind_base(&self, tape: &mut Tape) -> Vec<Var> {
        self.layers.iter().map(|l| tape.constant(l.base().w_star.clone())).collect()
    }

    /// Batched forward over the rows of `inputs` (`N × P·d_model`) and
    /// `conds` (`N × k_tokens·d_cond`).
    pub fn forward(&self, tape: &mut Tape, lin: &Linears<'_>, inputs: &Tensor, conds: &Tensor) -> Result<ForwardOutput> {
        forward(&self.spec, tape, lin, inputs, conds)
    }

    /// Adapted prediction without keeping the tape.
    pub fn predict(&self, inputs: &Tensor, conds: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let out = self.forward(&mut tape, &Linears::Adapted(self, &bound), inputs, conds)?;
        Ok(tape.value(out.pred).clone())
    }

    /// Prediction of the frozen base network alone.
    pub fn predict_base(&self, inputs: &Tensor, conds: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let ws = self.bind_base(&mut tape);
        let out = self.forward(&mut tape, &Linears::Plain(&ws), inputs, conds)?;
        Ok(tape.value(out.pred).clone())
    }

    /// Adapted prediction together with the cross-attention map.
    pub fn predict_with_map(&self, inputs: &Tensor, conds: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let out = self.forward(&mut tape, &Linears::Adapted(self, &bound), inputs, conds)?;
        Ok((tape.value(out.pred).clone(), tape.value(out.cross_map).clone()))
    }
}

fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, scale: f64) -> Result<(Var, Var)> {
    let qt = tape.transpose(q);
    let scores = tape.matmul(qt, k)?;
    let scores = tape.scale(scores, scale);
    let probs = tape.softmax_rows(scores);
    let pt = tape.transpose(probs);
    let out = tape.matmul(v, pt)?;
    Ok((out, probs))
}

fn forward(spec: &ToyNetSpec, tape: &mut Tape, lin: &Linears<'_>, inputs: &Tensor, conds: &Tensor) -> Result<ForwardOutput> {
    if inputs.cols() != spec.input_width() || inputs.rows() == 0 {
        return Err(Error::Dimension { op: "toy forward (inputs)", lhs: [inputs.rows().max(1), spec.input_width()], rhs: inputs.shape() });
    }
    if conds.shape() != [inputs.rows(), spec.cond_width()] {
        return Err(Error::Dimension { op: "toy forward (conditions)", lhs: [inputs.rows(), spec.cond_width()], rhs: conds.shape() });
    }
    let d = spec.d_model;
    let scale = 1.0 / (d as f64).sqrt();
    let mut rows = Vec::with_capacity(inputs.rows());
    let mut maps = Vec::with_capacity(inputs.rows());
    for s in 0..inputs.rows() {
        let x = tape.constant(tokens(inputs.row(s), d, PATCHES));
        let c = tape.constant(tokens(conds.row(s), spec.d_cond, spec.k_tokens));

        let q = lin.apply(tape, 0, x)?;
        let k = lin.apply(tape, 1, x)?;
        let v = lin.apply(tape, 2, x)?;
        let (att, _) = attention(tape, q, k, v, scale)?;
        let o = lin.apply(tape, 3, att)?;
        let h1 = tape.add(x, o)?;

        let q = lin.apply(tape, 4, h1)?;
        let k = lin.apply(tape, 5, c)?;
        let v = lin.apply(tape, 6, c)?;
        let (att, probs) = attention(tape, q, k, v, scale)?;
        let o = lin.apply(tape, 7, att)?;
        let h2 = tape.add(h1, o)?;

        let m = lin.apply(tape, 8, h2)?;
        let h3 = tape.add(h2, m)?;

        let mut cols = Vec::with_capacity(PATCHES);
        for t in 0..PATCHES {
            let col = tape.slice_cols(h3, t, 1)?;
            cols.push(tape.transpose(col));
        }
        rows.push(tape.concat_cols(&cols)?);
        maps.push(probs);
    }
    Ok(ForwardOutput {
        pred: tape.concat_rows(&rows)?,
        cross_map: tape.concat_rows(&maps)?,
    })
}

/// Columns of a Gaussian `rows×r` matrix orthonormalized by modified
/// Gram–Schmidt.
fn orthonormal_columns<R: Rng + ?Sized>(rows: usize, r: usize, rng: &mut R) -> Tensor {
    loop {
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(r);
        let mut ok = true;
        for _ in 0..r {
            let mut v: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(rng)).collect();
            for u in &cols {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= dot * ui;
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-6 {
                ok = false;
                break;
            }
            v.iter_mut().for_each(|a| *a /= norm);
            cols.push(v);
        }
        if ok {
            return Tensor::from_fn(rows, r, |i, j| cols[j][i]);
        }
    }
}

/// Frozen network whose weights are the student's base plus planted
/// low-rank deltas `scale·U·Vᵀ` with orthonormal `U`, `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct Teacher {
    spec: ToyNetSpec,
    weights: Vec<Tensor>,
    deltas: Vec<Tensor>,
    ranks: Vec<usize>,
    scale: f64,
    seed: u64,
}

/// Plants a delta of rank `ranks[ℓ]` on layer `ℓ` of `model`'s base.
pub fn plant_teacher(model: &ToyModel, ranks: &[usize], scale: f64, seed: u64) -> Result<Teacher> {
    if ranks.len() != model.layers.len() {
        return Err(Error::Construction(format!(
            "need one planted rank per layer ({}), got {}",
            model.layers.len(),
            ranks.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(ranks.len());
    let mut deltas = Vec::with_capacity(ranks.len());
    for (layer, &r) in model.layers.iter().zip(ranks) {
        let (m, n) = (layer.out_features(), layer.in_features());
        if r > m.min(n) {
            return Err(Error::RankTooLarge { layer: layer.name().to_string(), rank: r, m, n });
        }
        let delta = if r == 0 {
            Tensor::zeros(m, n)
        } else {
            let u = orthonormal_columns(m, r, &mut rng);
            let v = orthonormal_columns(n, r, &mut rng);
            u.matmul(&v.transpose())?.map(|x| scale * x)
        };
        weights.push(layer.base().w_star.add(&delta)?);
        deltas.push(delta);
    }
    Ok(Teacher { spec: model.spec, weights, deltas, ranks: ranks.to_vec(), scale, seed })
}

impl Teacher {
    pub fn spec(&self) -> &ToyNetSpec {
        &self.spec
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Planted `ΔW*` per layer.
    pub fn deltas(&self) -> &[Tensor] {
        &self.deltas
    }

    /// `W* + ΔW*` per layer.
    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn predict(&self, inputs: &Tensor, conds: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let ws: Vec<Var> = self.weights.iter().map(|w| tape.constant(w.clone())).collect();
        let out = forward(&self.spec, &mut tape, &Linears::Plain(&ws), inputs, conds)?;
        Ok(tape.value(out.pred).clone())
    }
}

/// Inputs, conditions and teacher targets, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub conditions: Tensor,
    pub targets: Tensor,
}

/// Draws `n` standard-Gaussian inputs and conditions and labels them with
/// the teacher, adding Gaussian noise of std `sigma_obs` when positive.
pub fn sample_dataset(teacher: &Teacher, n: usize, sigma_obs: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Contract("dataset needs at least one sample".into()));
    }
    if !(sigma_obs >= 0.0) {
        return Err(Error::Domain(format!("observation noise must be >= 0, got {sigma_obs}")));
    }
    let spec = teacher.spec;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = Tensor::from_fn(n, spec.input_width(), |_, _| StandardNormal.sample(&mut rng));
    let conditions = Tensor::from_fn(n, spec.cond_width(), |_, _| StandardNormal.sample(&mut rng));
    let mut targets = teacher.predict(&inputs, &conditions)?;
    if sigma_obs > 0.0 {
        let law = Normal::new(0.0, sigma_obs).expect("finite std");
        for v in targets.data_mut() {
            *v += law.sample(&mut rng);
        }
    }
    Ok(Dataset { inputs, conditions, targets })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    /// Payload size in bytes at 64-bit precision.
    pub fn byte_size(&self) -> usize {
        8 * (self.inputs.len() + self.conditions.len() + self.targets.len())
    }

    /// Rows `idx` of each tensor.
    pub fn batch(&self, idx: &[usize]) -> Dataset {
        let pick = |t: &Tensor| {
            let data = idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
            Tensor::from_vec(idx.len(), t.cols(), data).expect("consistent batch")
        };
        Dataset {
            inputs: pick(&self.inputs),
            conditions: pick(&self.conditions),
            targets: pick(&self.targets),
        }
    }

    /// Writes one CSV row per sample: `x0..`, `c0..`, `y0..` columns.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Report(e.to_string()))?;
        let mut header: Vec<String> = (0..self.inputs.cols()).map(|i| format!("x{i}")).collect();
        header.extend((0..self.conditions.cols()).map(|i| format!("c{i}")));
        header.extend((0..self.targets.cols()).map(|i| format!("y{i}")));
        w.write_record(&header).map_err(|e| Error::Report(e.to_string()))?;
        for s in 0..self.len() {
            let row: Vec<String> = self
                .inputs
                .row(s)
                .iter()
                .chain(self.conditions.row(s))
                .chain(self.targets.row(s))
                .map(|v| v.to_string())
                .collect();
            w.write_record(&row).map_err(|e| Error::Report(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::mse_loss;

    fn adaptive() -> AdapterInit {
        AdapterInit::Adaptive { r_init: 4, q: 0.9, r_max: 64, growth: GrowthInit::ZeroB }
    }

    fn small() -> ToyNetSpec {
        ToyNetSpec { d_model: 8, k_tokens: 3, d_cond: 6 }
    }

    #[test]
    fn fresh_model_matches_base_bitwise() {
        let spec = small();
        let model = build_toy_net(&spec, &adaptive(), 1).unwrap();
        let teacher = plant_teacher(&model, &[1, 2, 1, 2, 1, 2, 1, 2, 1], 0.5, 2).unwrap();
        let data = sample_dataset(&teacher, 5, 0.0, 3).unwrap();
        let adapted = model.predict(&data.inputs, &data.conditions).unwrap();
        let base = model.predict_base(&data.inputs, &data.conditions).unwrap();
        assert_eq!(adapted, base);
    }

    #[test]
    fn cross_map_rows_are_distributions() {
        let spec = small();
        let model = build_toy_net(&spec, &adaptive(), 1).unwrap();
        let teacher = plant_teacher(&model, &[0; 9], 0.5, 2).unwrap();
        let data = sample_dataset(&teacher, 3, 0.0, 3).unwrap();
        let (_, map) = model.predict_with_map(&data.inputs, &data.conditions).unwrap();
        assert_eq!(map.shape(), [PATCHES * 3, spec.k_tokens]);
        for i in 0..map.rows() {
            assert!((map.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn builds_are_deterministic() {
        let a = build_toy_net(&ToyNetSpec::default(), &adaptive(), 7).unwrap();
        let b = build_toy_net(&ToyNetSpec::default(), &adaptive(), 7).unwrap();
        assert_eq!(a, b);
        let c = build_toy_net(&ToyNetSpec::default(), &adaptive(), 8).unwrap();
        assert_ne!(a, c);
        let fixed = build_toy_net(&ToyNetSpec::default(), &AdapterInit::Fixed { rank: 8, q: 0.9 }, 7).unwrap();
        for (x, y) in a.layers().iter().zip(fixed.layers()) {
            assert_eq!(x.base(), y.base());
        }
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let bad = ToyNetSpec { d_model: 0, ..small() };
        assert!(build_toy_net(&bad, &adaptive(), 0).is_err());
    }

    #[test]
    fn teacher_layers_and_errors() {
        let model = build_toy_net(&small(), &adaptive(), 1).unwrap();
        let ranks = [0, 2, 0, 0, 0, 0, 0, 0, 3];
        let teacher = plant_teacher(&model, &ranks, 0.5, 4).unwrap();
        assert_eq!(teacher.weights()[0], model.layers()[0].base().w_star);
        assert_ne!(teacher.weights()[1], model.layers()[1].base().w_star);
        assert!(matches!(
            plant_teacher(&model, &[9, 0, 0, 0, 0, 0, 0, 0, 0], 0.5, 4),
            Err(Error::RankTooLarge { .. })
        ));
        assert!(plant_teacher(&model, &[1, 1], 0.5, 4).is_err());

        let data = sample_dataset(&teacher, 4, 0.0, 5).unwrap();
        let base = model.predict_base(&data.inputs, &data.conditions).unwrap();
        assert_ne!(base, data.targets);
    }

    #[test]
    fn dataset_is_reproducible_and_noise_free_targets_match() {
        let model = build_toy_net(&small(), &adaptive(), 1).unwrap();
        let teacher = plant_teacher(&model, &[1; 9], 0.5, 4).unwrap();
        let a = sample_dataset(&teacher, 6, 0.0, 9).unwrap();
        let b = sample_dataset(&teacher, 6, 0.0, 9).unwrap();
        assert_eq!(a, b);

        let mut tape = Tape::new();
        let p = tape.constant(teacher.predict(&a.inputs, &a.conditions).unwrap());
        let l = mse_loss(&mut tape, p, &a.targets).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let noisy = sample_dataset(&teacher, 6, 0.1, 9).unwrap();
        assert_eq!(noisy.inputs, a.inputs);
        assert_ne!(noisy.targets, a.targets);
        assert!(sample_dataset(&teacher, 0, 0.0, 9).is_err());
    }

    #[test]
    fn default_train_split_is_small() {
        let model = build_toy_net(&ToyNetSpec::default(), &adaptive(), 1).unwrap();
        let teacher = plant_teacher(&model, &DEFAULT_PLANTED_RANKS, 0.5, 4).unwrap();
        let data = sample_dataset(&teacher, 256, 0.0, 9).unwrap();
        // 256 · (128 + 128 + 128) · 8 bytes
        assert_eq!(data.byte_size(), 786_432);
        assert!(data.byte_size() < 10 * 1024 * 1024);
    }

    #[test]
    fn batch_selects_rows() {
        let model = build_toy_net(&small(), &adaptive(), 1).unwrap();
        let teacher = plant_teacher(&model, &[1; 9], 0.5, 4).unwrap();
        let data = sample_dataset(&teacher, 5, 0.0, 9).unwrap();
        let b = data.batch(&[3, 1]);
        assert_eq!(b.inputs.row(0), data.inputs.row(3));
        assert_eq!(b.targets.row(1), data.targets.row(1));
    }

    #[test]
    fn dataset_csv_export() {
        let model = build_toy_net(&small(), &adaptive(), 1).unwrap();
        let teacher = plant_teacher(&model, &[1; 9], 0.5, 4).unwrap();
        let data = sample_dataset(&teacher, 3, 0.0, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        data.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("x0,"));
    }
}
