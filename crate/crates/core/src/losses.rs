//! Training losses and the variational diagnostic.

use serde::{Deserialize, Serialize};

use crate::adapter::{AdaptiveLoraLayer, BoundLayer};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Prior hyperparameters over rank rates (`μ^λ`, `σ^λ`) and adapter
/// weights (`σ^θ`), shared across layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperPrior {
    pub mu_lambda: f64,
    pub sigma_lambda: f64,
    pub sigma_theta: f64,
}

impl HyperPrior {
    pub fn new(mu_lambda: f64, sigma_lambda: f64, sigma_theta: f64) -> Result<Self> {
        if !(sigma_lambda > 0.0 && sigma_theta > 0.0) {
            return Err(Error::Domain(format!(
                "prior scales must be positive, got sigma_lambda={sigma_lambda} sigma_theta={sigma_theta}"
            )));
        }
        Ok(Self { mu_lambda, sigma_lambda, sigma_theta })
    }
}

impl Default for HyperPrior {
    fn default() -> Self {
        Self { mu_lambda: 0.0, sigma_lambda: 1.0, sigma_theta: 1.0 }
    }
}

/// Non-negative weights of the auxiliary losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_r: f64,
    pub lambda_e: f64,
    pub lambda_w: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_r: 1e-4, lambda_e: 1e-4, lambda_w: 0.0 }
    }
}

/// Scalar values of every loss term for one step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub reg: f64,
    pub entropy: f64,
    pub weight: f64,
    pub total: f64,
    /// `|ν_ℓ − ν_target|` per layer.
    pub per_layer_reg: Vec<f64>,
}

/// Tape nodes of the individual terms, before weighting.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub mse: Var,
    pub reg: Var,
    pub entropy: Option<Var>,
    pub weight: Var,
}

/// `(1/N) Σ_i ‖pred_i − target_i‖²` over the `N` rows.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    let shape = tape.value(pred).shape();
    if shape != target.shape() {
        return Err(Error::Dimension { op: "mse_loss", lhs: shape, rhs: target.shape() });
    }
    if shape[0] == 0 {
        return Err(Error::Contract("mse_loss needs at least one row".into()));
    }
    let t = tape.constant(target.clone());
    let diff = tape.sub(pred, t)?;
    let sq = tape.square(diff);
    let total = tape.sum_all(sq);
    Ok(tape.scale(total, 1.0 / shape[0] as f64))
}

/// `Σ_ℓ |ν_ℓ − ν_target|`.
pub fn rank_reg_loss(tape: &mut Tape, nus: &[Var], nu_tgt: f64) -> Result<Var> {
    if !(nu_tgt > 0.0) {
        return Err(Error::Domain(format!("target rate must be positive, got {nu_tgt}")));
    }
    if nus.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let stacked = tape.concat_rows(nus)?;
    let target = tape.constant(Tensor::filled(nus.len(), 1, nu_tgt));
    let diff = tape.sub(stacked, target)?;
    let abs = tape.abs(diff);
    Ok(tape.sum_all(abs))
}

/// Mean over maps of the mean row entropy `−Σ_k p log p`, with
/// `0·log 0 = 0`. Each map holds one probability row per query (and per
/// batch sample).
pub fn attention_entropy_loss(tape: &mut Tape, maps: &[Var]) -> Result<Var> {
    if maps.is_empty() {
        return Err(Error::Contract("entropy loss needs at least one attention map".into()));
    }
    let mut per_map = Vec::with_capacity(maps.len());
    for &p in maps {
        let t = tape.value(p);
        for i in 0..t.rows() {
            let s: f64 = t.row(i).iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!("attention row {i} sums to {s}, not 1")));
            }
        }
        let rows = t.rows() as f64;
        let plogp = tape.xlogx(p);
        let s = tape.sum_all(plogp);
        per_map.push(tape.scale(s, -1.0 / rows));
    }
    let stacked = tape.concat_rows(&per_map)?;
    Ok(tape.mean_all(stacked))
}

/// `Σ ρ² / (2σ_θ²)` over the active entries of every adapter.
pub fn weight_prior_loss(tape: &mut Tape, layers: &[BoundLayer], sigma_theta: f64) -> Result<Var> {
    if !(sigma_theta > 0.0) {
        return Err(Error::Domain(format!("sigma_theta must be positive, got {sigma_theta}")));
    }
    let mut sums = Vec::with_capacity(2 * layers.len());
    for l in layers {
        for v in [l.b, l.a] {
            let sq = tape.square(v);
            sums.push(tape.sum_all(sq));
        }
    }
    if sums.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let stacked = tape.concat_rows(&sums)?;
    let total = tape.sum_all(stacked);
    Ok(tape.scale(total, 1.0 / (2.0 * sigma_theta * sigma_theta)))
}

/// `L_total = L_MSE + λ_r L_reg + λ_e L_entropy + λ_w L_weight`.
///
/// The terms are added left to right, so re-summing the breakdown in the
/// same order reproduces `total` exactly.
pub fn total_loss(
    tape: &mut Tape,
    terms: &LossTerms,
    weights: &LossWeights,
    per_layer_reg: Vec<f64>,
) -> Result<(Var, LossBreakdown)> {
    let LossWeights { lambda_r, lambda_e, lambda_w } = *weights;
    if !(lambda_r >= 0.0 && lambda_e >= 0.0 && lambda_w >= 0.0) {
        return Err(Error::Domain(format!("loss weights must be non-negative, got {weights:?}")));
    }
    if terms.entropy.is_none() && lambda_e > 0.0 {
        return Err(Error::Contract("lambda_e > 0 needs at least one cross-attention map".into()));
    }
    let reg = tape.scale(terms.reg, lambda_r);
    let mut total = tape.add(terms.mse, reg)?;
    if let Some(e) = terms.entropy {
        let e = tape.scale(e, lambda_e);
        total = tape.add(total, e)?;
    }
    let w = tape.scale(terms.weight, lambda_w);
    total = tape.add(total, w)?;

    let breakdown = LossBreakdown {
        mse: tape.value(terms.mse).item(),
        reg: tape.value(terms.reg).item(),
        entropy: terms.entropy.map_or(0.0, |e| tape.value(e).item()),
        weight: tape.value(terms.weight).item(),
        total: tape.value(total).item(),
        per_layer_reg,
    };
    Ok((total, breakdown))
}

/// Recomputes the weighted total of a breakdown in the composition order.
pub fn compose(b: &LossBreakdown, w: &LossWeights) -> f64 {
    b.mse + w.lambda_r * b.reg + w.lambda_e * b.entropy + w.lambda_w * b.weight
}

/// The two prior-to-posterior log-ratio sums evaluated at the variational
/// means. Report-only; never part of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariationalTerms {
    pub rank_term: f64,
    pub weight_term: f64,
}

/// `rank_term = Σ_ℓ [−ln σ^λ − (ν_ℓ − μ^λ)²/(2σ^λ²)]` and
/// `weight_term = Σ_ρ [−ln σ^θ − ρ²/(2σ^θ²)]` over active adapter entries.
pub fn variational_diagnostic(layers: &[AdaptiveLoraLayer], prior: &HyperPrior) -> VariationalTerms {
    let HyperPrior { mu_lambda, sigma_lambda, sigma_theta } = *prior;
    let rank_term = layers
        .iter()
        .map(|l| {
            let z = l.nu() - mu_lambda;
            -sigma_lambda.ln() - z * z / (2.0 * sigma_lambda * sigma_lambda)
        })
        .sum();
    let log_sigma = sigma_theta.ln();
    let inv = 1.0 / (2.0 * sigma_theta * sigma_theta);
    let weight_term = layers
        .iter()
        .flat_map(|l| l.active_entries())
        .map(|rho| -log_sigma - rho * rho * inv)
        .sum();
    VariationalTerms { rank_term, weight_term }
}
