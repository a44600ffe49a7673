//! Recurrent controller: an LSTM cell with forget gates and the linear map
//! from hidden state to raw glimpse parameters.

use ndcore::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ArcError, Result};

/// Number of raw glimpse parameters per step (x̂, ŷ, δ̂).
pub const GLIMPSE_PARAMS: usize = 3;

/// LSTM cell. Gate rows of `weight`/`bias` are stacked in the order
/// input, forget, output, candidate; columns of `weight` are `[x ; h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub input_size: usize,
    pub hidden: usize,
    /// `[4H, input_size + H]`
    pub weight: Tensor,
    /// `[4H, 1]`
    pub bias: Tensor,
}

impl LstmCell {
    /// Orthogonal weights at gain 1, forget-gate bias 1, other biases 0.
    pub fn new<R: Rng + ?Sized>(input_size: usize, hidden: usize, rng: &mut R) -> Self {
        let weight = orthogonal(4 * hidden, input_size + hidden, rng);
        let mut bias = Tensor::zeros(&[4 * hidden, 1]);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        Self {
            input_size,
            hidden,
            weight,
            bias,
        }
    }

    pub fn zeros(input_size: usize, hidden: usize) -> Self {
        Self {
            input_size,
            hidden,
            weight: Tensor::zeros(&[4 * hidden, input_size + hidden]),
            bias: Tensor::zeros(&[4 * hidden, 1]),
        }
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (rows, cols) = match weight.shape() {
            &[r, c] => (r, c),
            s => return Err(ArcError::Config(format!("lstm weight must be rank 2, got {s:?}"))),
        };
        let hidden = rows / 4;
        if rows % 4 != 0 || cols <= hidden || bias.shape() != [rows, 1] {
            return Err(ArcError::Config(format!(
                "inconsistent lstm shapes: weight {:?}, bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self {
            input_size: cols - hidden,
            hidden,
            weight,
            bias,
        })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundLstm {
        let leaf = |t: &mut Tape, x: &Tensor| if trainable { t.param(x.clone()) } else { t.constant(x.clone()) };
        BoundLstm {
            weight: leaf(tape, &self.weight),
            bias: leaf(tape, &self.bias),
            input_size: self.input_size,
            hidden: self.hidden,
        }
    }
}

/// Hidden and cell state, each `[H, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(tape: &mut Tape, hidden: usize) -> Self {
        let h = tape.constant(Tensor::zeros(&[hidden, 1]));
        let c = tape.constant(Tensor::zeros(&[hidden, 1]));
        Self { h, c }
    }
}

/// An [`LstmCell`] whose parameters live on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundLstm {
    pub weight: Var,
    pub bias: Var,
    pub input_size: usize,
    pub hidden: usize,
}

impl BoundLstm {
    /// One step. `input` may be `[input_size]` or `[input_size, 1]`.
    pub fn step(&self, tape: &mut Tape, input: Var, state: LstmState) -> Result<LstmState> {
        let h = self.hidden;
        let numel: usize = tape.shape(input).iter().product();
        if numel != self.input_size || tape.shape(state.h) != [h, 1] || tape.shape(state.c) != [h, 1] {
            return Err(ndcore::NdError::Shape {
                op: "lstm_step",
                lhs: vec![self.input_size, h],
                rhs: vec![numel, tape.shape(state.h)[0]],
            }
            .into());
        }
        let x = tape.reshape(input, &[self.input_size, 1])?;
        let xh = tape.concat(&[x, state.h], 0)?;
        let pre = tape.matmul(self.weight, xh)?;
        let pre = tape.add(pre, self.bias)?;
        let gates = tape.slice(pre, 0, 0, 3 * h)?;
        let gates = tape.sigmoid(gates);
        let input_gate = tape.slice(gates, 0, 0, h)?;
        let forget_gate = tape.slice(gates, 0, h, h)?;
        let output_gate = tape.slice(gates, 0, 2 * h, h)?;
        let candidate = tape.slice(pre, 0, 3 * h, h)?;
        let candidate = tape.tanh(candidate);

        let kept = tape.mul(forget_gate, state.c)?;
        let written = tape.mul(input_gate, candidate)?;
        let c = tape.add(kept, written)?;
        let squashed = tape.tanh(c);
        let h_next = tape.mul(output_gate, squashed)?;
        Ok(LstmState { h: h_next, c })
    }
}

/// `Ω = W_g h (+ b)`; `W_g` is `[3, H]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlimpseProjection {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl GlimpseProjection {
    /// Small Gaussian weights so early windows stay near the full-image view.
    pub fn new<R: Rng + ?Sized>(hidden: usize, with_bias: bool, rng: &mut R) -> Self {
        let scale = 0.1 / (hidden as f64).sqrt();
        let data = (0..GLIMPSE_PARAMS * hidden)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            weight: Tensor::new(&[GLIMPSE_PARAMS, hidden], data).expect("projection shape"),
            bias: with_bias.then(|| Tensor::zeros(&[GLIMPSE_PARAMS, 1])),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundProjection {
        let leaf = |t: &mut Tape, x: &Tensor| if trainable { t.param(x.clone()) } else { t.constant(x.clone()) };
        BoundProjection {
            weight: leaf(tape, &self.weight),
            bias: self.bias.as_ref().map(|b| leaf(tape, b)),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundProjection {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl BoundProjection {
    /// Raw glimpse parameters `[3, 1]` from `h` (`[H, 1]`).
    pub fn project(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let omega = tape.matmul(self.weight, h)?;
        Ok(match self.bias {
            Some(b) => tape.add(omega, b)?,
            None => omega,
        })
    }
}

/// Matrix with orthonormal columns (or rows, when wider than tall).
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let (long, short) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    // Gram-Schmidt on `short` Gaussian vectors of length `long`.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v: Vec<f64> = (0..long).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let mut data = vec![0.0; rows * cols];
    for (k, b) in basis.iter().enumerate() {
        for (j, &x) in b.iter().enumerate() {
            if rows >= cols {
                data[j * cols + k] = x;
            } else {
                data[k * cols + j] = x;
            }
        }
    }
    Tensor::new(&[rows, cols], data).expect("orthogonal shape")
}
