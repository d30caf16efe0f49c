use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::{gelu, matmul, Tensor};
use crate::error::{Error, Result};

/// Two-hidden-layer perceptron `in -> H -> H -> out` with GELU activations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub input_dim: usize,
    pub hidden: usize,
    pub output_dim: usize,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

/// The six parameter leaves of an [`Mlp`] recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
    pub b3: Var,
}

impl Mlp {
    pub fn zeros(input_dim: usize, hidden: usize, output_dim: usize) -> Self {
        Mlp {
            input_dim,
            hidden,
            output_dim,
            w1: Tensor::zeros(input_dim, hidden),
            b1: Tensor::zeros(1, hidden),
            w2: Tensor::zeros(hidden, hidden),
            b2: Tensor::zeros(1, hidden),
            w3: Tensor::zeros(hidden, output_dim),
            b3: Tensor::zeros(1, output_dim),
        }
    }

    /// Uniform fan-in initialisation; the output layer is shrunk by `final_scale`.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: usize,
        output_dim: usize,
        final_scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut layer = |fan_in: usize, fan_out: usize, scale: f64| {
            let bound = scale / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            let b = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            (Tensor::new(fan_in, fan_out, w), Tensor::row(b))
        };
        let (w1, b1) = layer(input_dim, hidden, 1.0);
        let (w2, b2) = layer(hidden, hidden, 1.0);
        let (w3, b3) = layer(hidden, output_dim, final_scale);
        Mlp { input_dim, hidden, output_dim, w1, b1, w2, b2, w3, b3 }
    }

    pub fn param_count(&self) -> usize {
        (self.input_dim + 1) * self.hidden
            + (self.hidden + 1) * self.hidden
            + (self.hidden + 1) * self.output_dim
    }

    /// Batched forward pass without recording: `x` is `batch x input_dim`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let h = dense(x, &self.w1, &self.b1).map(gelu);
        let h = dense(&h, &self.w2, &self.b2).map(gelu);
        Ok(dense(&h, &self.w3, &self.b3))
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.cols != self.input_dim {
            return Err(Error::input(format!(
                "mlp expects {} input features, got {}",
                self.input_dim, x.cols
            )));
        }
        Ok(())
    }

    pub fn record(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            w1: tape.param(self.w1.clone()),
            b1: tape.param(self.b1.clone()),
            w2: tape.param(self.w2.clone()),
            b2: tape.param(self.b2.clone()),
            w3: tape.param(self.w3.clone()),
            b3: tape.param(self.b3.clone()),
        }
    }

    /// Records the weights as constants that receive no gradient.
    pub fn record_constant(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            w1: tape.constant(self.w1.clone()),
            b1: tape.constant(self.b1.clone()),
            w2: tape.constant(self.w2.clone()),
            b2: tape.constant(self.b2.clone()),
            w3: tape.constant(self.w3.clone()),
            b3: tape.constant(self.b3.clone()),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2, &mut self.w3, &mut self.b3]
    }

    pub const TENSOR_NAMES: [&'static str; 6] = ["w1", "b1", "w2", "b2", "w3", "b3"];
}

impl MlpVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = tape.matmul(x, self.w1);
        let h = tape.add_row(h, self.b1);
        let h = tape.gelu(h);
        let h = tape.matmul(h, self.w2);
        let h = tape.add_row(h, self.b2);
        let h = tape.gelu(h);
        let o = tape.matmul(h, self.w3);
        tape.add_row(o, self.b3)
    }

    pub fn vars(&self) -> [Var; 6] {
        [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]
    }
}

fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut out = matmul(x, false, w, false);
    for r in 0..out.rows {
        for (v, bias) in out.data[r * out.cols..(r + 1) * out.cols].iter_mut().zip(&b.data) {
            *v += bias;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_output_bias() {
        let mut m = Mlp::zeros(3, 5, 2);
        m.b3 = Tensor::row(vec![0.25, -1.5]);
        let out = m.forward(&Tensor::new(2, 3, vec![1.0, 2.0, 3.0, -4.0, 0.0, 9.0])).unwrap();
        assert_eq!(out.data, vec![0.25, -1.5, 0.25, -1.5]);
    }

    #[test]
    fn parameter_count_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Mlp::init(3, 8, 2, 0.01, &mut rng);
        let counted: usize = m.tensors().iter().map(|t| t.len()).sum();
        assert_eq!(counted, m.param_count());
        assert_eq!(m.param_count(), 4 * 8 + 9 * 8 + 9 * 2);
    }

    #[test]
    fn pass_through_in_linear_regime() {
        // GELU has slope 1/2 at the origin: scale in by s, out by 2/s per layer.
        let d = 3;
        let s = 1e-4;
        let mut m = Mlp::zeros(d, d, d);
        for i in 0..d {
            m.w1.data[i * d + i] = s;
            m.w2.data[i * d + i] = 2.0;
            m.w3.data[i * d + i] = 2.0 / s;
        }
        let x = Tensor::new(1, d, vec![0.3, -0.2, 0.5]);
        let y = m.forward(&x).unwrap();
        for i in 0..d {
            assert!((y.data[i] - x.data[i]).abs() < 1e-3, "{:?}", y.data);
        }
    }

    #[test]
    fn tape_and_plain_forward_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Mlp::init(2, 6, 4, 1.0, &mut rng);
        let x = Tensor::new(3, 2, vec![0.1, 2.0, -1.0, 0.4, 3.3, -0.2]);
        let mut tape = Tape::new();
        let vars = m.record(&mut tape);
        let xv = tape.constant(x.clone());
        let out = vars.forward(&mut tape, xv);
        assert_eq!(tape.value(out), &m.forward(&x).unwrap());
    }

    #[test]
    fn input_dim_mismatch_is_error() {
        let m = Mlp::zeros(3, 4, 1);
        assert!(m.forward(&Tensor::zeros(1, 2)).is_err());
    }

    #[test]
    fn scalar_head_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = Mlp::init(2, 5, 1, 1.0, &mut rng);
        let x = Tensor::new(4, 2, vec![0.3, -1.0, 1.2, 0.5, -0.8, 0.9, 2.0, -0.1]);
        let loss = |m: &Mlp| m.forward(&x).unwrap().data.iter().map(|v| v * v).sum::<f64>();
        let mut tape = Tape::new();
        let vars = m.record(&mut tape);
        let xv = tape.constant(x.clone());
        let o = vars.forward(&mut tape, xv);
        let sq = tape.square(o);
        let l = tape.sum(sq);
        let grads = tape.backward(l).unwrap();
        let h = 1e-6;
        for (ti, var) in vars.vars().iter().enumerate() {
            let g = grads.wrt(*var).unwrap();
            for i in 0..g.len() {
                let mut mp = m.clone();
                mp.tensors_mut()[ti].data[i] += h;
                let mut mm = m.clone();
                mm.tensors_mut()[ti].data[i] -= h;
                let fd = (loss(&mp) - loss(&mm)) / (2.0 * h);
                let err = (fd - g.data[i]).abs() / fd.abs().max(1e-3);
                assert!(err < 1e-5, "{} [{i}]: fd {fd} ad {}", Mlp::TENSOR_NAMES[ti], g.data[i]);
            }
        }
    }
}
