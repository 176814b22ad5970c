//! Compound reconstruction loss `λ₁·SmoothL1 + λ₂·Focal + λ₃·Dice` with
//! learnable weights `λᵢ = softplus(aᵢ)`.

use ect_autodiff::{Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `ln(e − 1)`: the raw value with `softplus(a) = 1`.
pub const LAMBDA_INIT_RAW: f64 = 0.541_324_854_612_918_1;

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTerm {
    SmoothL1,
    Focal,
    Dice,
}

impl LossTerm {
    pub const ALL: [LossTerm; 3] = [LossTerm::SmoothL1, LossTerm::Focal, LossTerm::Dice];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::SmoothL1 => "smoothl1",
            LossTerm::Focal => "focal",
            LossTerm::Dice => "dice",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidInput(format!("unknown loss term `{s}` (smoothl1, focal, dice)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Enabled terms, indexed like [`LossTerm::ALL`].
    pub enabled: [bool; 3],
    pub smooth_l1_beta: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub focal_clamp: f64,
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            enabled: [true; 3],
            smooth_l1_beta: 0.1,
            focal_gamma: 2.0,
            focal_alpha: 0.75,
            focal_clamp: 1e-7,
            dice_smooth: 1.0,
        }
    }
}

impl LossConfig {
    pub fn with_terms(terms: &[LossTerm]) -> Self {
        Self {
            enabled: LossTerm::ALL.map(|t| terms.contains(&t)),
            ..Self::default()
        }
    }

    /// Parses a comma-separated list such as `smoothl1,focal,dice`.
    pub fn parse_terms(list: &str) -> Result<Self> {
        let terms = list.split(',').map(LossTerm::parse).collect::<Result<Vec<_>>>()?;
        let cfg = Self::with_terms(&terms);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn terms(&self) -> Vec<LossTerm> {
        LossTerm::ALL
            .into_iter()
            .zip(self.enabled)
            .filter(|(_, e)| *e)
            .map(|(t, _)| t)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.enabled.iter().any(|&e| e) {
            return Err(Error::InvalidInput("at least one loss term must be enabled".into()));
        }
        if !(self.smooth_l1_beta > 0.0 && self.focal_gamma >= 0.0 && (0.0..=1.0).contains(&self.focal_alpha)) {
            return Err(Error::InvalidInput("invalid loss hyperparameters".into()));
        }
        if !(self.focal_clamp > 0.0 && self.focal_clamp < 0.5 && self.dice_smooth >= 0.0) {
            return Err(Error::InvalidInput("invalid focal clamp or dice smoothing".into()));
        }
        Ok(())
    }
}

/// Records `Σ softplus(aᵢ)·Lᵢ` over the enabled terms.
pub fn compound_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    target: Var,
    lambda_raw: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let lambdas = tape.softplus(lambda_raw);
    let mut total: Option<Var> = None;
    for (i, term) in LossTerm::ALL.into_iter().enumerate() {
        if !cfg.enabled[i] {
            continue;
        }
        let l = match term {
            LossTerm::SmoothL1 => tape.smooth_l1(pred, target, T::of(cfg.smooth_l1_beta))?,
            LossTerm::Focal => tape.focal(
                pred,
                target,
                T::of(cfg.focal_gamma),
                T::of(cfg.focal_alpha),
                T::of(cfg.focal_clamp),
            )?,
            LossTerm::Dice => tape.dice(pred, target, T::of(cfg.dice_smooth))?,
        };
        let w = tape.select(lambdas, i)?;
        let weighted = tape.mul(w, l)?;
        total = Some(match total {
            None => weighted,
            Some(t) => tape.add(t, weighted)?,
        });
    }
    total.ok_or_else(|| Error::InvalidInput("no loss term enabled".into()))
}

fn eval_loss(
    pred: &Tensor<f64>,
    target: &Tensor<f64>,
    f: impl FnOnce(&mut Tape<f64>, Var, Var) -> ect_autodiff::Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let y = tape.constant(target.clone());
    let l = f(&mut tape, p, y)?;
    Ok(tape.value(l).item())
}

/// Mean Smooth-L1 (Huber) loss.
pub fn loss_smooth_l1(pred: &Tensor<f64>, target: &Tensor<f64>, beta: f64) -> Result<f64> {
    eval_loss(pred, target, |t, p, y| t.smooth_l1(p, y, beta))
}

/// Mean soft-target focal loss.
pub fn loss_focal(pred: &Tensor<f64>, target: &Tensor<f64>, gamma: f64, alpha: f64, clamp: f64) -> Result<f64> {
    eval_loss(pred, target, |t, p, y| t.focal(p, y, gamma, alpha, clamp))
}

/// Soft Dice loss with squared denominator, per sample over the leading
/// dimension and averaged.
pub fn loss_dice(pred: &Tensor<f64>, target: &Tensor<f64>, smooth: f64) -> Result<f64> {
    eval_loss(pred, target, |t, p, y| t.dice(p, y, smooth))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn lambda_init_is_one() {
        assert!((softplus(LAMBDA_INIT_RAW) - 1.0).abs() < 1e-15);
        assert!((LAMBDA_INIT_RAW - (std::f64::consts::E - 1.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn smooth_l1_values() {
        let y = t(&[1, 1, 2, 2], vec![0.0, 1.0, 0.5, 0.2]);
        assert_eq!(loss_smooth_l1(&y, &y, 0.1).unwrap(), 0.0);
        let plus = y.map(|v| v + 1.0);
        let minus = y.map(|v| v - 1.0);
        assert!((loss_smooth_l1(&plus, &y, 0.1).unwrap() - 0.95).abs() < 1e-12);
        assert_eq!(
            loss_smooth_l1(&plus, &y, 0.1).unwrap(),
            loss_smooth_l1(&minus, &y, 0.1).unwrap()
        );
    }

    #[test]
    fn focal_reduces_to_half_bce() {
        let p = t(&[1, 1, 1, 3], vec![0.2, 0.7, 0.9]);
        let y = t(&[1, 1, 1, 3], vec![0.0, 1.0, 0.3]);
        let bce: f64 = p
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
            .sum::<f64>()
            / 3.0;
        assert!((loss_focal(&p, &y, 0.0, 0.5, 1e-7).unwrap() - 0.5 * bce).abs() < 1e-12);
    }

    #[test]
    fn focal_confident_wrong_dominates() {
        let clamp = 1e-7;
        let one = t(&[1], vec![1.0]);
        let wrong = loss_focal(&t(&[1], vec![clamp]), &one, 2.0, 0.75, clamp).unwrap();
        assert!((wrong - (-(0.75 * (1.0 - clamp).powi(2) * clamp.ln()))).abs() < 1e-9);
        let right = loss_focal(&t(&[1], vec![1.0 - clamp]), &one, 2.0, 0.75, clamp).unwrap();
        assert!(wrong > right && right < 1e-12);
        let zero = t(&[1], vec![0.0]);
        assert!(loss_focal(&t(&[1], vec![0.0]), &zero, 2.0, 0.75, clamp).unwrap() < 1e-12);
    }

    #[test]
    fn dice_closed_forms() {
        let ones = t(&[1, 1, 4, 4], vec![1.0; 16]);
        assert!(loss_dice(&ones, &ones, 1.0).unwrap().abs() < 1e-15);
        let zeros = t(&[1, 1, 4, 4], vec![0.0; 16]);
        assert_eq!(loss_dice(&zeros, &zeros, 1.0).unwrap(), 0.0);
        let a: Vec<f64> = (0..16).map(|k| if k < 3 { 1.0 } else { 0.0 }).collect();
        let b: Vec<f64> = (0..16).map(|k| if k >= 10 { 1.0 } else { 0.0 }).collect();
        let (n1, n2) = (3.0, 6.0);
        let got = loss_dice(&t(&[1, 1, 4, 4], a), &t(&[1, 1, 4, 4], b), 1.0).unwrap();
        assert!((got - (1.0 - 1.0 / (n1 + n2 + 1.0))).abs() < 1e-15);
    }

    fn compound_value(pred: &Tensor<f64>, target: &Tensor<f64>, raw: [f64; 3], cfg: &LossConfig) -> f64 {
        let mut tape = Tape::new();
        let p = tape.constant(pred.clone());
        let y = tape.constant(target.clone());
        let a = tape.constant(t(&[3], raw.to_vec()));
        let l = compound_loss(&mut tape, p, y, a, cfg).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn compound_identity_toggles_and_linearity() {
        let y = t(&[2, 1, 2, 3], (0..12).map(|k| f64::from(k % 2 == 0)).collect());
        let cfg = LossConfig::default();
        let raw = [LAMBDA_INIT_RAW; 3];
        assert_eq!(compound_value(&y, &y, raw, &cfg), 0.0);

        let p = t(&[2, 1, 2, 3], (0..12).map(|k| 0.1 + 0.07 * k as f64).collect());
        let only_l1 = LossConfig::with_terms(&[LossTerm::SmoothL1]);
        assert!((compound_value(&p, &y, raw, &only_l1) - loss_smooth_l1(&p, &y, 0.1).unwrap()).abs() < 1e-15);

        // softplus(a) = 2 at a = ln(e² − 1).
        let two = (std::f64::consts::E.powi(2) - 1.0).ln();
        let base = compound_value(&p, &y, raw, &cfg);
        let doubled = compound_value(&p, &y, [two; 3], &cfg);
        assert!((doubled - 2.0 * base).abs() < 1e-12 * base);
    }

    #[test]
    fn parse_terms() {
        let cfg = LossConfig::parse_terms("smoothl1,focal").unwrap();
        assert_eq!(cfg.terms(), vec![LossTerm::SmoothL1, LossTerm::Focal]);
        assert!(LossConfig::parse_terms("l2").is_err());
    }
}
