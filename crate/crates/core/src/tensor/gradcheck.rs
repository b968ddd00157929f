use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Coordinates checked per input; inputs at most this large are checked exhaustively.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-6,
            max_coords: 48,
            seed: 0,
        }
    }
}

/// Compare reverse-mode gradients of a scalar function against central
/// differences. Returns the max over checked coordinates of
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with(
        f,
        inputs,
        GradCheckOptions {
            eps,
            ..GradCheckOptions::default()
        },
    )
}

pub fn grad_check_with<F>(f: F, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = 0.0f64;
    let mut values = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let len = inputs[k].len();
        let coords: Vec<usize> = if len <= opts.max_coords {
            (0..len).collect()
        } else {
            sample(&mut rng, len, opts.max_coords).into_vec()
        };
        for idx in coords {
            let analytic = grads.get(*var).map_or(0.0, |g| g.data()[idx]);
            let orig = values[k].data()[idx];
            values[k].data_mut()[idx] = orig + opts.eps;
            let plus = eval(&values)?;
            values[k].data_mut()[idx] = orig - opts.eps;
            let minus = eval(&values)?;
            values[k].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn scalar(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::Usage(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_to_rounding() {
        let x = Tensor::from_fn([3, 4], |i| i as f64 * 0.37 - 1.0);
        let err = grad_check(|t, v| Ok(t.sum(v[0])), &[x], 1e-6).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn relu_away_from_kink() {
        let x = Tensor::from_fn([20], |i| if i % 2 == 0 { 0.5 + i as f64 } else { -0.5 - i as f64 });
        let err = grad_check(
            |t, v| {
                let r = t.relu(v[0]);
                Ok(t.sum(r))
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
