//! Finite-difference gradient suite and randomized property checks, shared
//! by the `gradcheck` and `selftest` commands.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::adapter::{AdaptiveLoraLayer, FrozenLinear, GrowthInit, LayerKind};
use crate::autodiff::{grad_check, Tape, Tensor};
use crate::checkpoint::{checkpoint_size, decode, encode, layer_record_size, restore_layers};
use crate::config;
use crate::error::{Error, Result};
use crate::losses::attention_entropy_loss;
use crate::rank::{effective_rank, importance_values, nu_target, pmf};
use crate::toy::{build_toy_net, AdapterInit, Dataset, ToyModel, ToyNetSpec, PATCHES};
use crate::train::{record_objective, TrainConfig, TrainMode};

pub const FD_STEP: f64 = 1e-5;
pub const LOSS_GRAD_TOLERANCE: f64 = 1e-4;
pub const ENTROPY_GRAD_TOLERANCE: f64 = 1e-5;

/// `|analytic − numeric| / max(1, |analytic|)`, the same measure as
/// [`grad_check`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

/// Worst errors of one random instance.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct GradInstance {
    pub b: f64,
    pub a: f64,
    pub nu: f64,
    pub entropy: f64,
    pub coordinates: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradSuiteReport {
    pub instances: Vec<GradInstance>,
    pub worst_b: f64,
    pub worst_a: f64,
    pub worst_nu: f64,
    pub worst_entropy: f64,
}

impl GradSuiteReport {
    pub fn passed(&self) -> bool {
        self.worst_b.max(self.worst_a).max(self.worst_nu) <= LOSS_GRAD_TOLERANCE
            && self.worst_entropy <= ENTROPY_GRAD_TOLERANCE
    }
}

/// A small toy network with every adapter in a random nonzero state and a
/// random batch, together with the objective configuration to check.
fn random_instance(rng: &mut ChaCha8Rng) -> Result<(ToyModel, Dataset, TrainConfig)> {
    let q = rng.random_range(0.5..0.95);
    let cfg = TrainConfig {
        q,
        r_target: rng.random_range(1..=4),
        r_max: 8,
        lambda_r: rng.random_range(0.05..1.0),
        lambda_e: rng.random_range(0.05..1.0),
        lambda_w: rng.random_range(0.01..0.2),
        sigma_theta: rng.random_range(0.5..2.0),
        mode: TrainMode::Adaptive,
        d_model: rng.random_range(3..=5),
        k_tokens: rng.random_range(2..=3),
        d_cond: rng.random_range(2..=4),
        ..TrainConfig::default()
    };
    let spec = cfg.spec();
    let init = AdapterInit::Adaptive { r_init: 1, q, r_max: cfg.r_max, growth: GrowthInit::ZeroB };
    let mut model = build_toy_net(&spec, &init, rng.random())?;
    let nu_tgt = nu_target(q, cfg.r_target)?;
    for layer in model.layers_mut() {
        let (m, n) = (layer.out_features(), layer.in_features());
        // Keep away from the kink of |ν − ν_target|.
        let nu = loop {
            let nu: f64 = rng.random_range(0.3..2.5);
            if (nu - nu_tgt).abs() > 1e-2 {
                break nu;
            }
        };
        let d = rng.random_range(1..=4);
        let b = normal_tensor(rng, m, d, 0.5);
        let a = normal_tensor(rng, d, n, 0.5);
        layer.restore(nu, d, &b, &a)?;
    }
    let n = 2;
    let batch = Dataset {
        inputs: normal_tensor(rng, n, PATCHES * spec.d_model, 1.0),
        conditions: normal_tensor(rng, n, spec.k_tokens * spec.d_cond, 1.0),
        targets: normal_tensor(rng, n, PATCHES * spec.d_model, 1.0),
    };
    Ok((model, batch, cfg))
}

fn objective_value(model: &ToyModel, batch: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let (total, breakdown, _) = record_objective(&mut tape, model, batch, cfg)?;
    let v = tape.value(total).item();
    if !v.is_finite() {
        return Err(Error::Evaluation(format!("non-finite objective {breakdown:?}")));
    }
    Ok(v)
}

fn central<F>(mut at: F, h: f64) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    Ok((at(h)? - at(-h)?) / (2.0 * h))
}

/// Checks the gradients of `L_total` wrt every active `B`, `A` entry and
/// every `ν` (with `D` held fixed) on one random instance.
fn check_objective(rng: &mut ChaCha8Rng, h: f64) -> Result<GradInstance> {
    let (model, batch, cfg) = random_instance(rng)?;
    let mut tape = Tape::new();
    let (total, _, bound) = record_objective(&mut tape, &model, &batch, &cfg)?;
    tape.backward(total)?;
    let grads: Vec<_> = model.layers().iter().zip(&bound).map(|(l, b)| l.grads(&tape, b)).collect();

    let mut out = GradInstance::default();
    for (li, g) in grads.iter().enumerate() {
        let layer = &model.layers()[li];
        let (b0, a0) = (layer.b_active(), layer.a_active());
        for idx in 0..b0.len() {
            let num = central(
                |dh| {
                    let mut probe = model.clone();
                    let mut b = b0.clone();
                    b.data_mut()[idx] += dh;
                    probe.layers_mut()[li].set_active(&b, &a0)?;
                    objective_value(&probe, &batch, &cfg)
                },
                h,
            )?;
            out.b = out.b.max(relative_error(g.b.data()[idx], num));
        }
        for idx in 0..a0.len() {
            let num = central(
                |dh| {
                    let mut probe = model.clone();
                    let mut a = a0.clone();
                    a.data_mut()[idx] += dh;
                    probe.layers_mut()[li].set_active(&b0, &a)?;
                    objective_value(&probe, &batch, &cfg)
                },
                h,
            )?;
            out.a = out.a.max(relative_error(g.a.data()[idx], num));
        }
        let nu0 = layer.nu();
        let num = central(
            |dh| {
                let mut probe = model.clone();
                probe.layers_mut()[li].rank_mut().set_nu(nu0 + dh)?;
                objective_value(&probe, &batch, &cfg)
            },
            h,
        )?;
        out.nu = out.nu.max(relative_error(g.nu, num));
        out.coordinates += b0.len() + a0.len() + 1;
    }
    Ok(out)
}

/// Entropy of softmax maps wrt their logits, split over one to three maps.
fn check_entropy(rng: &mut ChaCha8Rng, h: f64) -> Result<f64> {
    let maps = rng.random_range(1..=3usize);
    let rows = rng.random_range(1..=4usize);
    let k = rng.random_range(2..=6usize);
    let logits = normal_tensor(rng, maps * rows, k, 2.0);
    grad_check(
        |tape, x| {
            let parts = (0..maps)
                .map(|i| {
                    let part = tape.slice_rows(x, i * rows, rows)?;
                    Ok(tape.softmax_rows(part))
                })
                .collect::<Result<Vec<_>>>()?;
            attention_entropy_loss(tape, &parts)
        },
        &logits,
        h,
    )
}

/// Runs `trials` random instances of both checks.
pub fn gradient_suite(trials: usize, seed: u64) -> Result<GradSuiteReport> {
    let mut instances = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        let mut inst = check_objective(&mut rng, FD_STEP)?;
        inst.entropy = check_entropy(&mut rng, FD_STEP)?;
        instances.push(inst);
    }
    let worst = |f: fn(&GradInstance) -> f64| instances.iter().map(f).fold(0.0, f64::max);
    Ok(GradSuiteReport {
        worst_b: worst(|i| i.b),
        worst_a: worst(|i| i.a),
        worst_nu: worst(|i| i.nu),
        worst_entropy: worst(|i| i.entropy),
        instances,
    })
}

/// Outcome of one property suite.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Evaluation(msg()))
    }
}

/// Adaptive layer of random shape with random `ν`, `D` and nonzero factors.
pub fn random_layer<R: Rng + ?Sized>(rng: &mut R, name: &str, r_max: usize) -> Result<AdaptiveLoraLayer> {
    let m = rng.random_range(1..=12);
    let n = rng.random_range(1..=12);
    let kind = LayerKind::ALL[rng.random_range(0..LayerKind::ALL.len())];
    let base = FrozenLinear::new(name, kind, normal_tensor(rng, m, n, 1.0))?;
    let mut layer = AdaptiveLoraLayer::init_adapter(base, 1, 0.9, r_max, rng)?;
    let nu = rng.random_range(0.05..3.0);
    let d = effective_rank(nu, 0.9, r_max)?;
    let b = normal_tensor(rng, m, d, 1.0);
    let a = normal_tensor(rng, d, n, 1.0);
    layer.restore(nu, d, &b, &a)?;
    Ok(layer)
}

fn layer_output(layer: &AdaptiveLoraLayer, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = layer.bind(&mut tape)?;
    let xv = tape.constant(x.clone());
    let y = layer.adapted_forward(&mut tape, &bound, xv)?;
    Ok(tape.value(y).clone())
}

fn suite_controller(rng: &mut ChaCha8Rng) -> Result<String> {
    for r in [8, 16, 32, 64, 128, 256, 512] {
        let d = effective_rank(nu_target(0.9, r)?, 0.9, 512)?;
        ensure(d == r, || format!("q=0.9 r={r} gave D={d}"))?;
    }
    for _ in 0..2000 {
        let q = rng.random_range(0.05..0.99);
        let r = rng.random_range(1..=512);
        let d = effective_rank(nu_target(q, r)?, q, 512)?;
        ensure(d == r, || format!("q={q} r={r} gave D={d}"))?;
    }
    for _ in 0..2000 {
        let lo: f64 = rng.random_range(1e-3..5.0);
        let hi = lo + rng.random_range(0.0..5.0);
        let (dl, dh) = (effective_rank(lo, 0.9, 512)?, effective_rank(hi, 0.9, 512)?);
        ensure(dl >= dh, || format!("D({lo})={dl} < D({hi})={dh}"))?;
    }
    Ok("inverse pair and monotonicity hold".into())
}

fn suite_telescoping(rng: &mut ChaCha8Rng) -> Result<String> {
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let nu = rng.random_range(1e-4..10.0);
        let d = rng.random_range(1..=512u64);
        let mut sum = 0.0;
        for j in 1..=d {
            sum += pmf(j, nu)?;
        }
        let closed = (-nu).exp() - (-nu * (d as f64 + 1.0)).exp();
        worst = worst.max((sum - closed).abs());
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("max deviation {worst:.3e}"))
}

fn suite_softmax(rng: &mut ChaCha8Rng) -> Result<String> {
    for _ in 0..500 {
        let rows = rng.random_range(1..=8);
        let k = rng.random_range(1..=8);
        let x = normal_tensor(rng, rows, k, 5.0);
        let shift: f64 = rng.random_range(-50.0..50.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let xs = tape.constant(x.map(|v| v + shift));
        let p = tape.softmax_rows(xv);
        let ps = tape.softmax_rows(xs);
        let h = attention_entropy_loss(&mut tape, &[p])?;
        let (p, ps, h) = (tape.value(p).clone(), tape.value(ps).clone(), tape.value(h).item());
        for i in 0..rows {
            let s: f64 = p.row(i).iter().sum();
            ensure((s - 1.0).abs() <= 1e-12, || format!("row sum {s}"))?;
        }
        let shift_err = p.data().iter().zip(ps.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(shift_err <= 1e-12, || format!("shift changed probabilities by {shift_err:e}"))?;
        ensure((-1e-12..=(k as f64).ln() + 1e-12).contains(&h), || format!("entropy {h} outside [0, ln {k}]"))?;
    }
    Ok("row sums, shift invariance and entropy bounds hold".into())
}

fn small_spec() -> ToyNetSpec {
    ToyNetSpec { d_model: 8, k_tokens: 3, d_cond: 5 }
}

fn suite_zero_init(rng: &mut ChaCha8Rng) -> Result<String> {
    let spec = small_spec();
    let init = AdapterInit::Adaptive { r_init: 4, q: 0.9, r_max: 32, growth: GrowthInit::ZeroB };
    let model = build_toy_net(&spec, &init, rng.random())?;
    let inputs = normal_tensor(rng, 100, spec.input_width(), 1.0);
    let conds = normal_tensor(rng, 100, spec.cond_width(), 1.0);
    let (y, y0) = (model.predict(&inputs, &conds)?, model.predict_base(&inputs, &conds)?);
    let same = y.data().iter().zip(y0.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(same, || "fresh adapter changed the output".into())?;
    Ok("100 inputs bitwise equal".into())
}

fn suite_resize(rng: &mut ChaCha8Rng) -> Result<String> {
    for t in 0..1000 {
        let mut layer = random_layer(rng, "l", 64)?;
        let before_d = layer.d();
        if t % 2 == 0 {
            let x = normal_tensor(rng, layer.in_features(), 3, 1.0);
            let nu = layer.nu() * rng.random_range(0.2..1.0);
            layer.rank_mut().set_nu(nu)?;
            let y0 = layer_output(&layer, &x)?;
            layer.refresh_rank(rng)?;
            let y1 = layer_output(&layer, &x)?;
            let same = y0.data().iter().zip(y1.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(same, || format!("growth {before_d}->{} changed the output", layer.d()))?;
        } else {
            let nu = layer.nu() * rng.random_range(1.0..5.0);
            layer.rank_mut().set_nu(nu)?;
            let w0 = layer.delta_weight();
            let (b, a) = (layer.b_active(), layer.a_active());
            let f = importance_values(nu, before_d);
            layer.refresh_rank(rng)?;
            let d_new = layer.d();
            let bound: f64 = (d_new..before_d)
                .map(|j| {
                    let bn = (0..b.rows()).map(|i| b.get(i, j).powi(2)).sum::<f64>().sqrt();
                    let an = a.row(j).iter().map(|v| v * v).sum::<f64>().sqrt();
                    f[j] * bn * an
                })
                .sum();
            let err = layer.delta_weight().sub(&w0)?.frobenius_norm();
            ensure(err <= bound * (1.0 + 1e-10) + 1e-14, || {
                format!("shrink {before_d}->{d_new}: error {err:e} above bound {bound:e}")
            })?;
        }
    }
    Ok("1000 layers: growth bitwise, shrink within bound".into())
}

fn suite_checkpoint(rng: &mut ChaCha8Rng) -> Result<String> {
    for _ in 0..200 {
        let count = rng.random_range(0..=5);
        let layers = (0..count)
            .map(|i| random_layer(rng, &format!("layer_{i}"), 32))
            .collect::<Result<Vec<_>>>()?;
        let bytes = encode(&layers)?;
        let formula = 12 + layers
            .iter()
            .map(|l| layer_record_size(l.name().len(), l.out_features(), l.in_features(), l.d()))
            .sum::<usize>();
        ensure(bytes.len() == formula && bytes.len() == checkpoint_size(&layers), || {
            format!("size {} vs formula {formula}", bytes.len())
        })?;
        let mut restored = layers.clone();
        restore_layers(&decode(&bytes)?, &mut restored)?;
        ensure(encode(&restored)? == bytes, || "save/load/save not idempotent".into())?;
    }
    Ok("200 random models: size formula and idempotent round trip".into())
}

fn suite_config(rng: &mut ChaCha8Rng) -> Result<String> {
    for _ in 0..200 {
        let c = TrainConfig {
            q: rng.random_range(0.01..0.99),
            r_init: rng.random_range(1..64),
            lambda_r: rng.random::<f64>() * 10f64.powi(rng.random_range(-12..2)),
            learning_rate: rng.random(),
            nu_learning_rate: if rng.random() { Some(rng.random()) } else { None },
            steps: rng.random_range(0..10_000),
            mode: if rng.random() { TrainMode::Adaptive } else { TrainMode::FixedRank(rng.random_range(1..512)) },
            growth: if rng.random() { GrowthInit::ZeroB } else { GrowthInit::RandomB },
            seed: rng.random(),
            planted_ranks: (0..rng.random_range(0..10)).map(|_| rng.random_range(1..9)).collect(),
            sigma_obs: rng.random(),
            ..TrainConfig::default()
        };
        let back = config::parse(&config::serialize(&c))?;
        ensure(back == c, || format!("config did not round trip: {c:?}"))?;
    }
    Ok("200 random configs round trip".into())
}

fn suite_gradients(_: &mut ChaCha8Rng) -> Result<String> {
    let report = gradient_suite(10, 0x5e1f)?;
    ensure(report.passed(), || format!("{report:?}"))?;
    Ok(format!(
        "10 instances, worst B {:.1e}, A {:.1e}, nu {:.1e}, entropy {:.1e}",
        report.worst_b, report.worst_a, report.worst_nu, report.worst_entropy
    ))
}

type Suite = fn(&mut ChaCha8Rng) -> Result<String>;

const SUITES: [(&str, Suite); 8] = [
    ("controller", suite_controller),
    ("telescoping", suite_telescoping),
    ("softmax_entropy", suite_softmax),
    ("zero_init", suite_zero_init),
    ("resize", suite_resize),
    ("checkpoint", suite_checkpoint),
    ("config", suite_config),
    ("gradients", suite_gradients),
];

/// Runs every property suite with its own RNG stream.
pub fn selftest(seed: u64) -> Vec<SuiteOutcome> {
    SUITES
        .iter()
        .enumerate()
        .map(|(i, (name, suite))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            match suite(&mut rng) {
                Ok(detail) => SuiteOutcome { name, passed: true, detail },
                Err(e) => SuiteOutcome { name, passed: false, detail: e.to_string() },
            }
        })
        .collect()
}
