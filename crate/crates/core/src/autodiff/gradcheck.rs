use super::params::ParamSet;
use super::tape::{Fault, Tape, Var};
use crate::error::Result;

/// Finite-difference check of tape gradients: central differences at `step` and
/// `step / 2`, Richardson-extrapolated so truncation error is `O(step⁴)`.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub fault: Option<Fault>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-8,
            fault: None,
        }
    }
}

/// `|a − f| / max(|a|, |f|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

impl GradCheck {
    /// Worst relative error over every entry of every trainable parameter.
    pub fn at<F>(&self, params: &ParamSet, build: &F) -> Result<f64>
    where
        F: Fn(&mut Tape, &ParamSet) -> Var,
    {
        let mut tape = Tape::with_fault(self.fault);
        let loss = build(&mut tape, params);
        let grads = tape.backward(loss)?;

        let eval = |p: &ParamSet| -> Result<f64> {
            let mut t = Tape::new();
            let l = build(&mut t, p);
            t.check()?;
            Ok(t.scalar(l))
        };

        let mut worst: f64 = 0.0;
        let mut probe = params.clone();
        for id in params.ids() {
            if !params.is_trainable(id) {
                continue;
            }
            for k in 0..params.get(id).len() {
                let orig = params.get(id).data()[k];
                let mut central = |h: f64| -> Result<f64> {
                    probe.get_mut(id).data_mut()[k] = orig + h;
                    let up = eval(&probe)?;
                    probe.get_mut(id).data_mut()[k] = orig - h;
                    let down = eval(&probe)?;
                    probe.get_mut(id).data_mut()[k] = orig;
                    Ok((up - down) / (2.0 * h))
                };
                let (coarse, fine) = (central(self.step)?, central(self.step / 2.0)?);
                let numeric = (4.0 * fine - coarse) / 3.0;
                let analytic = grads.get(id).map_or(0.0, |g| g.data()[k]);
                worst = worst.max(relative_error(analytic, numeric, self.floor));
            }
        }
        Ok(worst)
    }

    /// Worst error across `trials` parameter draws.
    pub fn trials<D, F>(&self, mut draw: D, build: &F, trials: usize) -> Result<f64>
    where
        D: FnMut(usize) -> ParamSet,
        F: Fn(&mut Tape, &ParamSet) -> Var,
    {
        assert!(trials >= 1, "gradcheck needs at least one trial");
        let mut worst: f64 = 0.0;
        for i in 0..trials {
            worst = worst.max(self.at(&draw(i), build)?);
        }
        Ok(worst)
    }
}
