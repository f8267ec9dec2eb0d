//! Training loop, fixed-rank baseline and rank sweeps.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{active_param_count, AdapterMode, BoundLayer, Footprint, GrowthInit};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{
    attention_entropy_loss, mse_loss, rank_reg_loss, total_loss, weight_prior_loss, HyperPrior, LossBreakdown,
    LossTerms, LossWeights,
};
use crate::optim::AdamConfig;
use crate::rank::nu_target;
use crate::toy::{
    build_toy_net, plant_teacher, sample_dataset, AdapterInit, Dataset, Linears, Teacher, ToyModel, ToyNetSpec,
    DEFAULT_PLANTED_RANKS,
};

pub use crate::optim::adam_update;

/// Whether ranks are learned or pinned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    Adaptive,
    FixedRank(usize),
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainMode::Adaptive => f.write_str("adaptive"),
            TrainMode::FixedRank(r) => write!(f, "fixed_rank:{r}"),
        }
    }
}

/// Every knob of a run: objective, optimizer, rank control and the
/// synthetic task it trains on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub q: f64,
    pub r_init: usize,
    pub r_target: usize,
    pub r_max: usize,
    pub lambda_r: f64,
    pub lambda_e: f64,
    pub lambda_w: f64,
    pub learning_rate: f64,
    /// Separate step size for the rank rates; `None` shares `learning_rate`.
    pub nu_learning_rate: Option<f64>,
    pub steps: usize,
    pub batch_size: usize,
    pub rank_refresh_interval: usize,
    pub mode: TrainMode,
    pub growth: GrowthInit,
    pub seed: u64,
    pub sigma_theta: f64,
    pub mu_lambda: f64,
    pub sigma_lambda: f64,
    pub d_model: usize,
    pub k_tokens: usize,
    pub d_cond: usize,
    pub planted_ranks: Vec<usize>,
    pub teacher_scale: f64,
    pub n_train: usize,
    pub n_eval: usize,
    pub sigma_obs: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            q: 0.9,
            r_init: 4,
            r_target: 2,
            r_max: 512,
            lambda_r: 1e-4,
            lambda_e: 1e-4,
            lambda_w: 0.0,
            learning_rate: 5e-5,
            nu_learning_rate: None,
            steps: 500,
            batch_size: 1,
            rank_refresh_interval: 1,
            mode: TrainMode::Adaptive,
            growth: GrowthInit::ZeroB,
            seed: 0,
            sigma_theta: 1.0,
            mu_lambda: 0.0,
            sigma_lambda: 1.0,
            d_model: 32,
            k_tokens: 4,
            d_cond: 32,
            planted_ranks: DEFAULT_PLANTED_RANKS.to_vec(),
            teacher_scale: 0.5,
            n_train: 256,
            n_eval: 64,
            sigma_obs: 0.0,
        }
    }
}

impl TrainConfig {
    /// Defaults rescaled for the desk-size toy task: the same objective
    /// weights and step count, with step sizes, batch and starting rank
    /// calibrated so the adaptive run fits the teacher in 500 steps.
    pub fn desk() -> Self {
        Self {
            r_init: DESK_R_INIT,
            learning_rate: DESK_LEARNING_RATE,
            nu_learning_rate: Some(DESK_NU_LEARNING_RATE),
            batch_size: DESK_BATCH_SIZE,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Contract(msg));
        if !(self.q > 0.0 && self.q < 1.0) {
            return bad(format!("q must lie in (0, 1), got {}", self.q));
        }
        for (name, v) in [("lambda_r", self.lambda_r), ("lambda_e", self.lambda_e), ("lambda_w", self.lambda_w)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.r_init < 1 || self.r_target < 1 || self.r_init > self.r_max || self.r_target > self.r_max {
            return bad(format!(
                "need 1 <= r_init, r_target <= r_max (got {}, {}, {})",
                self.r_init, self.r_target, self.r_max
            ));
        }
        if let TrainMode::FixedRank(r) = self.mode {
            if r < 1 {
                return bad("fixed rank must be >= 1".into());
            }
        }
        if self.rank_refresh_interval < 1 {
            return bad("rank_refresh_interval must be >= 1".into());
        }
        if self.batch_size < 1 || self.n_train < 1 || self.n_eval < 1 {
            return bad("batch_size, n_train and n_eval must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) || self.nu_learning_rate.is_some_and(|v| !(v > 0.0)) {
            return bad("learning rates must be positive".into());
        }
        if !(self.sigma_theta > 0.0 && self.sigma_lambda > 0.0) {
            return bad("prior scales must be positive".into());
        }
        if !(self.sigma_obs >= 0.0) {
            return bad("sigma_obs must be >= 0".into());
        }
        self.spec().validate()
    }

    pub fn spec(&self) -> ToyNetSpec {
        ToyNetSpec { d_model: self.d_model, k_tokens: self.k_tokens, d_cond: self.d_cond }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { lambda_r: self.lambda_r, lambda_e: self.lambda_e, lambda_w: self.lambda_w }
    }

    pub fn prior(&self) -> HyperPrior {
        HyperPrior { mu_lambda: self.mu_lambda, sigma_lambda: self.sigma_lambda, sigma_theta: self.sigma_theta }
    }

    pub fn adapter_init(&self) -> AdapterInit {
        match self.mode {
            TrainMode::Adaptive => AdapterInit::Adaptive {
                r_init: self.r_init,
                q: self.q,
                r_max: self.r_max,
                growth: self.growth,
            },
            TrainMode::FixedRank(rank) => AdapterInit::Fixed { rank, q: self.q },
        }
    }

    fn weight_adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.learning_rate)
    }

    fn rate_adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.nu_learning_rate.unwrap_or(self.learning_rate))
    }
}

/// Step size of the desk preset for adapter weights.
pub const DESK_LEARNING_RATE: f64 = 3e-3;
/// Step size of the desk preset for the raw rank rates.
pub const DESK_NU_LEARNING_RATE: f64 = 2e-2;
/// Batch size of the desk preset, equal to the default training split.
pub const DESK_BATCH_SIZE: usize = 256;
/// Starting rank of the desk preset.
pub const DESK_R_INIT: usize = 12;

/// The synthetic task a run trains on: student, teacher and data splits.
#[derive(Debug, Clone)]
pub struct Task {
    pub model: ToyModel,
    pub teacher: Teacher,
    pub train: Dataset,
    pub eval: Dataset,
}

/// Builds the student, plants the teacher and samples both splits. Depends
/// only on the task fields and `seed`, never on the training mode.
pub fn build_task(config: &TrainConfig) -> Result<Task> {
    config.validate()?;
    let spec = config.spec();
    let model = build_toy_net(&spec, &config.adapter_init(), config.seed)?;
    let teacher = plant_teacher(&model, &config.planted_ranks, config.teacher_scale, config.seed.wrapping_add(1))?;
    let train = sample_dataset(&teacher, config.n_train, config.sigma_obs, config.seed.wrapping_add(2))?;
    let eval = sample_dataset(&teacher, config.n_eval, 0.0, config.seed.wrapping_add(3))?;
    Ok(Task { model, teacher, train, eval })
}

/// Metrics on a held-out split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mse: f64,
    /// Mean row entropy of the cross-attention map.
    pub entropy: f64,
}

pub fn evaluate(model: &ToyModel, data: &Dataset) -> Result<EvalMetrics> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let out = model.forward(&mut tape, &Linears::Adapted(model, &bound), &data.inputs, &data.conditions)?;
    let mse = mse_loss(&mut tape, out.pred, &data.targets)?;
    let ent = attention_entropy_loss(&mut tape, &[out.cross_map])?;
    Ok(EvalMetrics { mse: tape.value(mse).item(), entropy: tape.value(ent).item() })
}

/// What happened at one optimization step (after the optional refresh).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    pub ranks: Vec<usize>,
    pub nus: Vec<f64>,
    pub active_params: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<StepRecord>,
    pub initial_eval: EvalMetrics,
    pub final_eval: EvalMetrics,
    pub final_ranks: Vec<usize>,
    pub final_footprint: Footprint,
    /// Wall-clock seconds; the only field that varies between identical runs.
    pub wall_time_secs: f64,
}

impl TrainHistory {
    /// Everything except wall time, for determinism checks.
    pub fn same_trajectory(&self, other: &TrainHistory) -> bool {
        self.records == other.records
            && self.initial_eval == other.initial_eval
            && self.final_eval == other.final_eval
            && self.final_ranks == other.final_ranks
            && self.final_footprint == other.final_footprint
    }
}

/// Result of [`train_run`]: the history and the trained model.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub history: TrainHistory,
    pub model: ToyModel,
    pub teacher: Teacher,
}

fn non_finite_dump(model: &ToyModel, step: usize, loss: &LossBreakdown) -> Error {
    let layers: Vec<String> = model
        .layers()
        .iter()
        .map(|l| {
            format!(
                "{}: |B|={:.4e} |A|={:.4e} nu={:.6e} D={}",
                l.name(),
                l.b_active().frobenius_norm(),
                l.a_active().frobenius_norm(),
                l.nu(),
                l.d()
            )
        })
        .collect();
    Error::NonFiniteLoss {
        step,
        dump: format!("loss={loss:?}; {}", layers.join("; ")),
    }
}

/// Records `L_total` of `model` on `batch` on a fresh section of `tape`.
/// Returns the loss node, its breakdown and the bound layers.
pub fn record_objective(
    tape: &mut Tape,
    model: &ToyModel,
    batch: &Dataset,
    config: &TrainConfig,
) -> Result<(Var, LossBreakdown, Vec<BoundLayer>)> {
    let adaptive = config.mode == TrainMode::Adaptive;
    let nu_tgt = nu_target(config.q, config.r_target)?;
    let bound = model.bind(tape)?;
    let out = model.forward(tape, &Linears::Adapted(model, &bound), &batch.inputs, &batch.conditions)?;
    let mse = mse_loss(tape, out.pred, &batch.targets)?;
    let (reg, per_layer_reg) = if adaptive {
        let nus: Vec<_> = bound.iter().map(|b| b.nu).collect();
        let per: Vec<f64> = nus.iter().map(|&v| (tape.value(v).item() - nu_tgt).abs()).collect();
        (rank_reg_loss(tape, &nus, nu_tgt)?, per)
    } else {
        (rank_reg_loss(tape, &[], nu_tgt)?, Vec::new())
    };
    let entropy = attention_entropy_loss(tape, &[out.cross_map])?;
    let weight = weight_prior_loss(tape, &bound, config.sigma_theta)?;
    let terms = LossTerms { mse, reg, entropy: Some(entropy), weight };
    let (total, breakdown) = total_loss(tape, &terms, &config.loss_weights(), per_layer_reg)?;
    Ok((total, breakdown, bound))
}

/// One optimization step on `batch`: forward, loss, backward, Adam, and a
/// rank refresh when `step` is a multiple of the refresh interval.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut ToyModel,
    batch: &Dataset,
    config: &TrainConfig,
    step: usize,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let adaptive = config.mode == TrainMode::Adaptive;
    let mut tape = Tape::new();
    let (total, breakdown, bound) = record_objective(&mut tape, model, batch, config)?;
    if !breakdown.total.is_finite() {
        return Err(non_finite_dump(model, step, &breakdown));
    }
    tape.backward(total)?;

    let (wa, ra) = (config.weight_adam(), config.rate_adam());
    let grads: Vec<_> = model.layers().iter().zip(&bound).map(|(l, b)| l.grads(&tape, b)).collect();
    for (layer, g) in model.layers_mut().iter_mut().zip(&grads) {
        layer.adam_step(g, &wa, &ra, adaptive, step as u64);
    }
    if adaptive && step % config.rank_refresh_interval == 0 {
        for layer in model.layers_mut() {
            layer.refresh_rank(rng)?;
        }
    }
    Ok(breakdown)
}

/// Full run on the task described by `config`.
pub fn train_run(config: &TrainConfig) -> Result<TrainRun> {
    train_run_stream(config, 0)
}

/// Like [`train_run`], drawing batches and regrown weights from RNG stream
/// `stream` so parallel runs of a sweep stay independent.
pub fn train_run_stream(config: &TrainConfig, stream: u64) -> Result<TrainRun> {
    let started = Instant::now();
    let Task { mut model, teacher, train, eval } = build_task(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2 + stream);

    let initial_eval = evaluate(&model, &eval)?;
    let mut records = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let idx: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..train.len())).collect();
        let batch = train.batch(&idx);
        let loss = train_step(&mut model, &batch, config, step, &mut rng)?;
        let Footprint { params, bytes } = active_param_count(model.layers());
        records.push(StepRecord {
            step,
            loss,
            ranks: model.ranks(),
            nus: model.nus(),
            active_params: params,
            bytes,
        });
    }
    let final_eval = evaluate(&model, &eval)?;
    let history = TrainHistory {
        records,
        initial_eval,
        final_eval,
        final_ranks: model.ranks(),
        final_footprint: active_param_count(model.layers()),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainRun { history, model, teacher })
}

/// One row of the capacity/quality tradeoff table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub final_mse: f64,
    pub params: usize,
    pub bytes: usize,
    pub ranks: Vec<usize>,
}

/// Runs `fixed_rank(r)` for each `r` in `ranks`, then one adaptive run, on
/// the same task. Runs execute in parallel, each on its own RNG stream.
pub fn sweep(config: &TrainConfig, ranks: &[usize]) -> Result<Vec<SweepRow>> {
    if let Some(&bad) = ranks.iter().find(|&&r| r < 1 || r > config.r_max) {
        return Err(Error::Contract(format!("sweep rank {bad} outside [1, {}]", config.r_max)));
    }
    let mut modes: Vec<TrainMode> = ranks.iter().map(|&r| TrainMode::FixedRank(r)).collect();
    modes.push(TrainMode::Adaptive);
    modes
        .par_iter()
        .enumerate()
        .map(|(i, &mode)| {
            let cfg = TrainConfig { mode, ..config.clone() };
            let run = train_run_stream(&cfg, i as u64)?;
            Ok(SweepRow {
                label: mode.to_string(),
                final_mse: run.history.final_eval.mse,
                params: run.history.final_footprint.params,
                bytes: run.history.final_footprint.bytes,
                ranks: run.history.final_ranks,
            })
        })
        .collect()
}

/// Whether every layer of `model` is in adaptive mode.
pub fn is_adaptive(model: &ToyModel) -> bool {
    model.layers().iter().all(|l| l.mode() == AdapterMode::Adaptive)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            d_model: 8,
            k_tokens: 3,
            d_cond: 6,
            planted_ranks: vec![1, 2, 1, 2, 1, 2, 1, 2, 1],
            r_max: 32,
            n_train: 32,
            n_eval: 8,
            steps: 20,
            batch_size: 8,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn defaults_follow_reference_protocol() {
        let c = TrainConfig::default();
        assert_eq!((c.q, c.r_max, c.steps, c.batch_size), (0.9, 512, 500, 1));
        assert_eq!((c.lambda_r, c.lambda_e, c.lambda_w), (1e-4, 1e-4, 0.0));
        assert_eq!(c.learning_rate, 5e-5);
        assert_eq!(c.rank_refresh_interval, 1);
        c.validate().unwrap();
        TrainConfig::desk().validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_configs() {
        for bad in [
            TrainConfig { q: 1.0, ..tiny() },
            TrainConfig { lambda_r: -1.0, ..tiny() },
            TrainConfig { r_init: 64, ..tiny() },
            TrainConfig { rank_refresh_interval: 0, ..tiny() },
            TrainConfig { mode: TrainMode::FixedRank(0), ..tiny() },
            TrainConfig { d_model: 0, ..tiny() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn zero_weights_make_total_equal_mse() {
        let cfg = TrainConfig { lambda_r: 0.0, lambda_e: 0.0, lambda_w: 0.0, ..tiny() };
        let run = train_run(&cfg).unwrap();
        for r in &run.history.records {
            assert_eq!(r.loss.total, r.loss.mse);
        }
    }

    #[test]
    fn zero_steps_returns_initial_model() {
        let cfg = TrainConfig { steps: 0, ..tiny() };
        let run = train_run(&cfg).unwrap();
        assert!(run.history.records.is_empty());
        assert_eq!(run.model, build_task(&cfg).unwrap().model);
    }

    #[test]
    fn fixed_rank_never_changes_rank() {
        let cfg = TrainConfig { mode: TrainMode::FixedRank(8), ..tiny() };
        let run = train_run(&cfg).unwrap();
        assert!(run.history.records.iter().all(|r| r.ranks.iter().all(|&d| d == 8)));
        assert!(run.history.records.iter().all(|r| r.loss.reg == 0.0));
        assert!(!is_adaptive(&run.model));
    }

    #[test]
    fn runs_are_deterministic() {
        let a = train_run(&tiny()).unwrap();
        let b = train_run(&tiny()).unwrap();
        assert!(a.history.same_trajectory(&b.history));
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn history_shape() {
        let cfg = tiny();
        let run = train_run(&cfg).unwrap();
        assert_eq!(run.history.records.len(), cfg.steps);
        for r in &run.history.records {
            assert!(r.ranks.iter().all(|&d| (1..=cfg.r_max).contains(&d)));
            assert_eq!(r.loss.per_layer_reg.len(), 9);
        }
    }

    #[test]
    fn refresh_interval_gates_resizes() {
        let cfg = TrainConfig { rank_refresh_interval: 1000, lambda_r: 1.0, r_target: 1, ..tiny() };
        let run = train_run(&cfg).unwrap();
        assert!(run.history.records.iter().all(|r| r.ranks.iter().all(|&d| d == cfg.r_init)));
    }

    #[test]
    fn non_finite_loss_aborts_with_dump() {
        let cfg = tiny();
        let Task { mut model, train, .. } = build_task(&cfg).unwrap();
        let mut batch = train.batch(&[0]);
        batch.targets.data_mut()[0] = f64::NAN;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        match train_step(&mut model, &batch, &cfg, 1, &mut rng) {
            Err(Error::NonFiniteLoss { step, dump }) => {
                assert_eq!(step, 1);
                assert!(dump.contains("nu="), "{dump}");
            }
            other => panic!("expected abort, got {other:?}"),
        }
    }

    #[test]
    fn sweep_rows_and_rank_validation() {
        let cfg = TrainConfig { steps: 5, ..tiny() };
        let rows = sweep(&cfg, &[1, 2, 4]).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[3].label, "adaptive");
        assert!(rows.windows(2).take(2).all(|w| w[0].params < w[1].params));
        assert!(sweep(&cfg, &[64]).is_err());
    }
}
