use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates checked per input; inputs no larger than this are checked exhaustively.
    pub samples_per_input: usize,
    pub seed: u64,
    /// Magnitude below which errors are measured absolutely rather than relatively.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples_per_input: 20,
            seed: 0,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst error per input tensor.
    pub per_input: Vec<f64>,
    pub checked: usize,
    /// Coordinates discarded because the perturbation crossed a ReLU or clamp kink.
    pub skipped: usize,
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape.value(out).item(), tape.kink_signature()))
}

/// Compares reverse-mode gradients of the scalar function `f` against central
/// finite differences on sampled coordinates of every input.
///
/// `f` receives a fresh tape plus one leaf per input and returns the scalar
/// output. Coordinates whose perturbation flips a ReLU sign or a clamp are
/// resampled instead of compared.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base_sig = tape.kink_signature();
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_input: vec![0.0; inputs.len()],
        checked: 0,
        skipped: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]);
        let exhaustive = input.len() <= cfg.samples_per_input;
        let mut done = 0;
        let mut attempts = 0;
        while done < cfg.samples_per_input.min(input.len()) && attempts < 20 * cfg.samples_per_input.max(1) {
            let k = if exhaustive {
                attempts
            } else {
                rng.random_range(0..input.len())
            };
            attempts += 1;
            if exhaustive && k >= input.len() {
                break;
            }
            let orig = input.data()[k];
            work[i].data_mut()[k] = orig + cfg.step;
            let (fp, sp) = evaluate(&f, &work)?;
            work[i].data_mut()[k] = orig - cfg.step;
            let (fm, sm) = evaluate(&f, &work)?;
            work[i].data_mut()[k] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let err = relative_error(analytic.data()[k], numeric, cfg.abs_floor);
            report.per_input[i] = report.per_input[i].max(err);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
            done += 1;
        }
    }
    Ok(report)
}
