//! Learned rank control through a discretized exponential.
//!
//! Rank index `j` of a component gets importance
//! `f(j; ν) = e^{−νj}(1 − e^{−ν})`, the mass the geometric law with rate `ν`
//! puts on `j`. The effective rank is the `q`-quantile of that law,
//! `D = ⌈−ln(1−q)/ν⌉`, capped to `[1, r_max]`.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Distance from an integer under which the quantile is snapped onto it
/// before taking the ceiling.
pub const SNAP_TOLERANCE: f64 = 1e-9;

fn check_nu(nu: f64) -> Result<()> {
    if nu > 0.0 && nu.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("rank rate must be positive and finite, got {nu}")))
    }
}

fn check_q(q: f64) -> Result<()> {
    if q > 0.0 && q < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("quantile must lie in (0, 1), got {q}")))
    }
}

/// Probability mass `f(j; ν) = (1 − e^{−ν(j+1)}) − (1 − e^{−νj})`, evaluated
/// in the cancellation-free form `e^{−νj}(1 − e^{−ν})`.
pub fn pmf(j: u64, nu: f64) -> Result<f64> {
    check_nu(nu)?;
    Ok((-nu * j as f64).exp() * -(-nu).exp_m1())
}

/// Effective rank `D = clamp(⌈−ln(1−q)/ν⌉, 1, r_max)`.
pub fn effective_rank(nu: f64, q: f64, r_max: usize) -> Result<usize> {
    check_nu(nu)?;
    check_q(q)?;
    if r_max < 1 {
        return Err(Error::Domain("r_max must be at least 1".into()));
    }
    let t = -(-q).ln_1p() / nu;
    let rounded = t.round();
    let t = if (t - rounded).abs() < SNAP_TOLERANCE { rounded } else { t };
    let d = t.ceil();
    if d >= r_max as f64 {
        Ok(r_max)
    } else {
        Ok((d as usize).max(1))
    }
}

/// Rate whose effective rank is exactly `r_target`: `−ln(1−q)/r_target`.
pub fn nu_target(q: f64, r_target: usize) -> Result<f64> {
    check_q(q)?;
    if r_target < 1 {
        return Err(Error::Domain("target rank must be at least 1".into()));
    }
    Ok(-(-q).ln_1p() / r_target as f64)
}

/// `Σ_{j=1}^{D} f(j; ν) = e^{−ν} − e^{−ν(D+1)}`.
pub fn truncated_mass(nu: f64, d: usize) -> Result<f64> {
    check_nu(nu)?;
    Ok((-nu).exp() - (-nu * (d as f64 + 1.0)).exp())
}

/// `Σ_{j=1}^{D} f(j; ν)²`, the normalizer of the rescaled Kaiming law.
pub fn importance_energy(nu: f64, d: usize) -> Result<f64> {
    check_nu(nu)?;
    Ok(importance_values(nu, d).iter().map(|v| v * v).sum())
}

/// Plain values `[f(1; ν), …, f(D; ν)]`.
pub fn importance_values(nu: f64, d: usize) -> Vec<f64> {
    let head = -(-nu).exp_m1();
    (1..=d).map(|j| (-nu * j as f64).exp() * head).collect()
}

/// Differentiable importance diagonal `[f(1; ν), …, f(D; ν)]` as a `D×1`
/// column, built from tape primitives so the gradient reaches `nu`.
pub fn importance_diagonal(tape: &mut Tape, nu: Var, d: usize) -> Result<Var> {
    if tape.value(nu).shape() != [1, 1] {
        return Err(Error::Contract("rank rate must be a scalar node".into()));
    }
    check_nu(tape.value(nu).item())?;
    if d < 1 {
        return Err(Error::Domain("importance diagonal needs D >= 1".into()));
    }
    let idx = tape.constant(Tensor::from_fn(d, 1, |j, _| -((j + 1) as f64)));
    let exponent = tape.matmul(idx, nu)?;
    let decay = tape.exp(exponent);
    let neg_nu = tape.scale(nu, -1.0);
    let e = tape.exp(neg_nu);
    let one = tape.constant(Tensor::scalar(1.0));
    let head = tape.sub(one, e)?;
    tape.matmul(decay, head)
}

/// Smooth positive map `ν = ln(1 + e^raw)`.
pub fn softplus(raw: f64) -> f64 {
    if raw > 30.0 {
        raw + (-raw).exp().ln_1p()
    } else {
        raw.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `ν > 0`.
pub fn softplus_inverse(nu: f64) -> f64 {
    if nu > 30.0 {
        nu + (-(-nu).exp()).ln_1p()
    } else {
        nu.exp_m1().ln()
    }
}

/// Per-layer learnable rank rate together with its derived effective rank.
#[derive(Debug, Clone, PartialEq)]
pub struct RankParameter {
    raw: f64,
    nu: f64,
    q: f64,
    r_max: usize,
    d: usize,
}

impl RankParameter {
    /// Creates a parameter whose rate starts at `nu`, with `d` refreshed.
    pub fn new(nu: f64, q: f64, r_max: usize) -> Result<Self> {
        let d = effective_rank(nu, q, r_max)?;
        Ok(Self {
            raw: softplus_inverse(nu),
            nu,
            q,
            r_max,
            d,
        })
    }

    /// Parameter with a pinned rank that never follows `ν`.
    pub(crate) fn with_rank(nu: f64, q: f64, r_max: usize, d: usize) -> Result<Self> {
        check_nu(nu)?;
        check_q(q)?;
        Ok(Self {
            raw: softplus_inverse(nu),
            nu,
            q,
            r_max,
            d,
        })
    }

    pub fn raw(&self) -> f64 {
        self.raw
    }

    pub fn set_raw(&mut self, raw: f64) {
        self.raw = raw;
        self.nu = softplus(raw);
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    /// Sets `ν` exactly; the raw value follows through the inverse map.
    pub fn set_nu(&mut self, nu: f64) -> Result<()> {
        check_nu(nu)?;
        self.raw = softplus_inverse(nu);
        self.nu = nu;
        Ok(())
    }

    /// `∂ν/∂raw`, the logistic function of `raw`, written as `1 − e^{−ν}`.
    pub fn dnu_draw(&self) -> f64 {
        -(-self.nu).exp_m1()
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn r_max(&self) -> usize {
        self.r_max
    }

    /// Effective rank as of the last refresh.
    pub fn d(&self) -> usize {
        self.d
    }

    pub(crate) fn set_d(&mut self, d: usize) {
        self.d = d;
    }

    /// Rank implied by the current rate; does not modify `d`.
    pub fn target_d(&self) -> Result<usize> {
        effective_rank(self.nu(), self.q, self.r_max)
    }

    /// Records `ν` on the tape as a scalar leaf. Gradients reach `raw`
    /// through [`RankParameter::dnu_draw`].
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Var {
        tape.leaf(Tensor::scalar(self.nu), trainable)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use std::f64::consts::LN_2;

    #[test]
    fn pmf_examples() {
        assert!((pmf(1, LN_2).unwrap() - 0.25).abs() < 1e-15);
        assert!((pmf(2, LN_2).unwrap() - 0.125).abs() < 1e-15);
        for nu in [0.01, 0.3, 2.0] {
            assert!((pmf(0, nu).unwrap() - (1.0 - (-nu).exp())).abs() < 1e-15);
        }
        assert!(matches!(pmf(1, 0.0), Err(Error::Domain(_))));
        assert!(matches!(pmf(1, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn pmf_matches_difference_form() {
        for nu in [1e-3, 0.07, 0.9, 4.0] {
            for j in 0..50u64 {
                let x = j as f64;
                let diff = (1.0 - (-nu * (x + 1.0)).exp()) - (1.0 - (-nu * x).exp());
                assert!((pmf(j, nu).unwrap() - diff).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn effective_rank_examples() {
        let nu64 = -(0.1f64.ln()) / 64.0;
        assert_eq!(effective_rank(nu64, 0.9, 512).unwrap(), 64);
        assert_eq!(effective_rank(2.302585093, 0.9, 512).unwrap(), 1);
        assert_eq!(effective_rank(1e-6, 0.9, 512).unwrap(), 512);
        assert_eq!(effective_rank(100.0, 0.9, 512).unwrap(), 1);
        assert!(effective_rank(1.0, 1.0, 512).is_err());
        assert!(effective_rank(1.0, 0.5, 0).is_err());
    }

    #[test]
    fn nu_target_examples() {
        assert!((nu_target(0.9, 64).unwrap() - 0.035_977_892_08).abs() < 1e-10);
        assert!((nu_target(0.9, 1).unwrap() - 2.302_585_093).abs() < 1e-9);
        assert!(nu_target(0.9, 0).is_err());
        for r in [8, 16, 32, 64, 128, 256, 512] {
            assert_eq!(effective_rank(nu_target(0.9, r).unwrap(), 0.9, 512).unwrap(), r);
        }
    }

    #[test]
    fn truncated_mass_examples() {
        assert!((truncated_mass(LN_2, 2).unwrap() - 0.375).abs() < 1e-15);
        let nu = 0.2;
        assert!((truncated_mass(nu, 100_000).unwrap() - (-nu).exp()).abs() < 1e-15);
    }

    #[test]
    fn importance_diagonal_values_and_gradient() {
        let mut tape = Tape::new();
        let nu = tape.constant(Tensor::scalar(LN_2));
        let diag = importance_diagonal(&mut tape, nu, 2).unwrap();
        let v = tape.value(diag).data();
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.125).abs() < 1e-15);

        let err = grad_check(
            |t, nu| {
                let d = importance_diagonal(t, nu, 4)?;
                Ok(t.sum_all(d))
            },
            &Tensor::scalar(0.37),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn importance_diagonal_gradient_closed_form() {
        // ∂f(j)/∂ν = e^{−νj}((1+j)e^{−ν} − j)
        let nu0 = 0.41;
        for j in 1..=6usize {
            let mut tape = Tape::new();
            let nu = tape.leaf(Tensor::scalar(nu0), true);
            let diag = importance_diagonal(&mut tape, nu, 6).unwrap();
            let pick = tape.slice_rows(diag, j - 1, 1).unwrap();
            tape.backward(pick).unwrap();
            let jf = j as f64;
            let expected = (-nu0 * jf).exp() * ((1.0 + jf) * (-nu0).exp() - jf);
            assert!((tape.grad(nu).item() - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn softplus_round_trip() {
        for nu in [1e-5, 0.004, 0.5, 2.3, 40.0] {
            let back = softplus(softplus_inverse(nu));
            assert!((back - nu).abs() <= 1e-12 * nu.max(1.0), "{nu} -> {back}");
        }
    }

    #[test]
    fn rank_parameter_tracks_nu() {
        let mut p = RankParameter::new(nu_target(0.9, 16).unwrap(), 0.9, 512).unwrap();
        assert_eq!(p.d(), 16);
        p.set_nu(nu_target(0.9, 3).unwrap()).unwrap();
        assert_eq!(p.d(), 16);
        assert_eq!(p.target_d().unwrap(), 3);

        let mut tape = Tape::new();
        let nu = p.bind(&mut tape, true);
        assert_eq!(tape.value(nu).item(), p.nu());

        p.set_raw(0.3);
        assert_eq!(p.nu(), softplus(0.3));
        let h = 1e-6;
        let fd = (softplus(0.3 + h) - softplus(0.3 - h)) / (2.0 * h);
        assert!((p.dnu_draw() - fd).abs() < 1e-9);
    }
}
