//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which coordinates of each input to perturb.
#[derive(Clone, Copy, Debug)]
pub struct CoordSample {
    /// Maximum number of coordinates checked per input tensor.
    pub per_input: usize,
    pub seed: u64,
}

/// Max relative error between the tape gradient of `f` at `x` and a
/// central difference with step `eps`.
///
/// The per-coordinate error is `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|t, v| f(t, v[0]), std::slice::from_ref(x), eps, None)
}

/// [`grad_check`] over several inputs, optionally on a random subset of
/// coordinates for large parameter sets.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], eps: f64, coords: Option<CoordSample>) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(Error::invalid("grad_check function must return a scalar"));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut rng = coords.map(|c| ChaCha8Rng::seed_from_u64(c.seed));
    let mut worst = 0.0f64;
    let mut probe = xs.to_vec();
    for (i, x) in xs.iter().enumerate() {
        let analytic: Vec<f64> = match tape.grad(vars[i]) {
            Some(g) => g.to_vec(),
            None => vec![0.0; x.len()],
        };
        let picks: Vec<usize> = match (&mut rng, coords) {
            (Some(r), Some(c)) if c.per_input < x.len() => {
                let mut idx = sample(r, x.len(), c.per_input).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..x.len()).collect(),
        };
        for j in picks {
            let orig = x.data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[j];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
