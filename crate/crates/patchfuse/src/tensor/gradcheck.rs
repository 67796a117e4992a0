//! Finite-difference verification of tape gradients.

use super::{Tape, Tensor, TensorError, Var};

/// Tolerances and step size for [`gradcheck`].
#[derive(Debug, Clone, Copy)]
pub struct GradcheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Relative tolerance where gradients are well away from zero.
    pub rel_tol: f64,
    /// Absolute tolerance used when both the analytic and numeric gradient
    /// magnitudes fall below `zero_band`.
    pub abs_tol: f64,
    /// Magnitude under which the absolute fallback applies.
    pub zero_band: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-3,
            rel_tol: 1e-4,
            abs_tol: 1e-7,
            zero_band: 1e-6,
        }
    }
}

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// Largest relative error among elements outside the zero band.
    pub max_rel_err: f64,
    /// Largest absolute error among elements inside the zero band.
    pub max_abs_err: f64,
    /// Elements compared.
    pub checked: usize,
    /// Elements judged by the absolute fallback.
    pub fallback: usize,
    pub pass: bool,
    /// Index and (analytic, numeric) pair of the worst relative offender.
    pub worst: Option<(usize, f64, f64)>,
}

impl GradcheckReport {
    fn empty() -> Self {
        GradcheckReport {
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            checked: 0,
            fallback: 0,
            pass: true,
            worst: None,
        }
    }

    fn record(&mut self, index: usize, analytic: f64, numeric: f64, cfg: &GradcheckConfig) {
        self.checked += 1;
        let mag = analytic.abs().max(numeric.abs());
        let diff = (analytic - numeric).abs();
        if mag < cfg.zero_band {
            self.fallback += 1;
            self.max_abs_err = self.max_abs_err.max(diff);
            if diff > cfg.abs_tol {
                self.pass = false;
            }
        } else {
            let rel = diff / mag;
            if rel > self.max_rel_err {
                self.max_rel_err = rel;
                self.worst = Some((index, analytic, numeric));
            }
            if rel > cfg.rel_tol {
                self.pass = false;
            }
        }
    }

    fn merge(&mut self, other: &GradcheckReport) {
        self.checked += other.checked;
        self.fallback += other.fallback;
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
        self.pass &= other.pass;
    }
}

/// Compare the tape gradient of `f` at `x` against central finite
/// differences, element by element.
///
/// `f` must build a scalar on the tape from the single staged input. It is
/// re-invoked on a fresh tape for every probe, so it must be a pure function
/// of the input value.
pub fn gradcheck<F>(mut f: F, x: &Tensor, cfg: &GradcheckConfig) -> Result<GradcheckReport, TensorError>
where
    F: FnMut(&mut Tape, Var) -> Result<Var, TensorError>,
{
    let eval = |f: &mut F, point: &Tensor| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let v = tape.leaf(point.clone().requires_grad(false));
        let out = f(&mut tape, v)?;
        if tape.numel(out) != 1 {
            return Err(TensorError::contract(
                "gradcheck",
                format!("function output must be scalar, got {:?}", tape.shape(out)),
            ));
        }
        Ok(tape.values(out)[0])
    };

    // Analytic pass.
    let analytic = {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone().requires_grad(true));
        let out = f(&mut tape, v)?;
        if tape.numel(out) != 1 {
            return Err(TensorError::contract(
                "gradcheck",
                format!("function output must be scalar, got {:?}", tape.shape(out)),
            ));
        }
        tape.backward(out)?;
        tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()])
    };

    let mut report = GradcheckReport::empty();
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let original = probe.values()[i];
        probe.values_mut()[i] = original + cfg.step;
        let plus = eval(&mut f, &probe)?;
        probe.values_mut()[i] = original - cfg.step;
        let minus = eval(&mut f, &probe)?;
        probe.values_mut()[i] = original;
        let numeric = (plus - minus) / (2.0 * cfg.step);
        report.record(i, analytic[i], numeric, cfg);
    }
    Ok(report)
}

/// Gradcheck a function of several tensors by checking each input in turn.
/// `build` receives one staged [`Var`] per input, in order.
pub fn gradcheck_fn<F>(
    mut build: F,
    inputs: &[Tensor],
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport, TensorError>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut report = GradcheckReport::empty();
    for target in 0..inputs.len() {
        let others: Vec<Tensor> = inputs.to_vec();
        let sub = gradcheck(
            |tape, v| {
                let vars: Vec<Var> = others
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        if i == target {
                            v
                        } else {
                            tape.leaf(t.clone().requires_grad(false))
                        }
                    })
                    .collect();
                build(tape, &vars)
            },
            &inputs[target],
            cfg,
        )?;
        report.merge(&sub);
    }
    Ok(report)
}
