//! Plain fully connected Q-network (affine layers with SiLU) used as the
//! baseline against the spline network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kan::{silu, silu_grad};
use crate::qnet::QFunction;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    widths: Vec<usize>,
    params: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct MlpTape {
    /// Input to each layer.
    acts: Vec<Vec<f64>>,
    /// Pre-activations of each layer; the last one is the output.
    pre: Vec<Vec<f64>>,
}

fn count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// Uniform init in `±1/√fan_in`, zero biases.
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: &[usize], outputs: usize, rng: &mut R) -> Result<Self> {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(outputs);
        if widths.contains(&0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        let mut params = Vec::with_capacity(count(&widths));
        for w in widths.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            params.extend((0..w[0] * w[1]).map(|_| rng.random_range(-bound..bound)));
            params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        Ok(Self { widths, params })
    }

    /// Width `h` for `depth` equal hidden layers whose parameter count is
    /// closest to `target`.
    pub fn matched_width(input: usize, outputs: usize, depth: usize, target: usize) -> usize {
        let size = |h: usize| {
            let mut w = vec![input];
            w.extend(std::iter::repeat_n(h, depth));
            w.push(outputs);
            count(&w)
        };
        (1..=target.max(1))
            .take_while(|&h| h == 1 || size(h - 1) <= target)
            .min_by_key(|&h| size(h).abs_diff(target))
            .unwrap_or(1)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    fn offsets(&self) -> Vec<usize> {
        let mut out = vec![0];
        for w in self.widths.windows(2) {
            out.push(out.last().unwrap() + w[0] * w[1] + w[1]);
        }
        out
    }
}

impl QFunction for Mlp {
    type Tape = MlpTape;

    fn input_width(&self) -> usize {
        self.widths[0]
    }

    fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward_tape(&self, x: &[f64], tape: &mut MlpTape) -> Result<()> {
        if x.len() != self.widths[0] {
            return Err(Error::WidthMismatch { expected: self.widths[0], got: x.len() });
        }
        let layers = self.widths.len() - 1;
        tape.acts.resize(layers, Vec::new());
        tape.pre.resize(layers, Vec::new());
        let offsets = self.offsets();
        for l in 0..layers {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let input: Vec<f64> = if l == 0 { x.to_vec() } else { tape.pre[l - 1].iter().map(|&z| silu(z)).collect() };
            let w = &self.params[offsets[l]..offsets[l] + n_in * n_out];
            let b = &self.params[offsets[l] + n_in * n_out..offsets[l + 1]];
            let z = &mut tape.pre[l];
            z.clear();
            z.extend((0..n_out).map(|j| b[j] + w[j * n_in..(j + 1) * n_in].iter().zip(&input).map(|(a, c)| a * c).sum::<f64>()));
            tape.acts[l] = input;
        }
        Ok(())
    }

    fn tape_output(tape: &MlpTape) -> &[f64] {
        tape.pre.last().map(|v| v.as_slice()).unwrap_or(&[])
    }

    fn backward(&self, tape: &MlpTape, upstream: &[f64], grad: &mut [f64]) {
        let offsets = self.offsets();
        let mut delta = upstream.to_vec();
        for l in (0..self.widths.len() - 1).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let input = &tape.acts[l];
            let (w_off, b_off) = (offsets[l], offsets[l] + n_in * n_out);
            for j in 0..n_out {
                let d = delta[j];
                if d == 0.0 {
                    continue;
                }
                grad[b_off + j] += d;
                for (g, a) in grad[w_off + j * n_in..w_off + (j + 1) * n_in].iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            if l > 0 {
                let w = &self.params[w_off..b_off];
                delta = (0..n_in)
                    .map(|i| (0..n_out).map(|j| w[j * n_in + i] * delta[j]).sum::<f64>() * silu_grad(tape.pre[l - 1][i]))
                    .collect();
            }
        }
    }

    fn validate(&mut self) -> Result<()> {
        if self.widths.len() < 2 || self.params.len() != count(&self.widths) {
            return Err(Error::InvalidConfig("parameter vector does not match the layer widths".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gradient_matches_finite_differences() {
        let mut net = Mlp::new(4, &[6, 5], 3, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let x = [0.3, -0.7, 0.1, 0.9];
        let up = [0.5, -1.0, 2.0];
        let mut tape = MlpTape::default();
        net.forward_tape(&x, &mut tape).unwrap();
        let mut g = vec![0.0; net.num_params()];
        net.backward(&tape, &up, &mut g);
        let f = |n: &Mlp| n.forward(&x).unwrap().iter().zip(&up).map(|(q, u)| q * u).sum::<f64>();
        for i in 0..net.num_params() {
            let p = net.params[i];
            net.params[i] = p + 1e-6;
            let hi = f(&net);
            net.params[i] = p - 1e-6;
            let lo = f(&net);
            net.params[i] = p;
            let fd = (hi - lo) / 2e-6;
            assert!((fd - g[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn matched_width_is_closest() {
        let target = 63_360;
        let h = Mlp::matched_width(35, 5, 2, target);
        let size = |h: usize| 35 * h + h + h * h + h + h * 5 + 5;
        assert!(size(h).abs_diff(target) <= size(h + 1).abs_diff(target));
        assert!(size(h).abs_diff(target) <= size(h - 1).abs_diff(target));
    }

    #[test]
    fn wrong_width_is_rejected() {
        let net = Mlp::new(3, &[2], 5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::WidthMismatch { expected: 3, got: 1 })));
    }
}
