use super::{check_inputs, Activation, Cell, ModelError, ParamId, ParamStore};
use crate::diffnum::{Tape, Tensor, Var};
use crate::rng::Stream;

/// Recurrent forecaster: the final hidden state is mapped by `w_logit`
/// (`d*k x h`) to the logits.
///
/// `elman`: `h_t = f(W_input x_t + W_hidden h_{t-1} + b)`.
/// `lstm`: the same affine map produces four blocks of `h` rows, the input,
/// forget, cell and output gates in that order.
#[derive(Clone, Debug)]
pub struct RecurrentNet {
    pub cell: Cell,
    pub activation: Activation,
    pub d: usize,
    pub hidden: usize,
    pub k: usize,
    pub params: ParamStore,
    w_input: ParamId,
    w_hidden: ParamId,
    bias: ParamId,
    w_logit: ParamId,
}

impl RecurrentNet {
    pub fn new(cell: Cell, activation: Activation, d: usize, hidden: usize, k: usize, seed: u64) -> Self {
        let mut rng = Stream::new(seed);
        let rows = match cell {
            Cell::Lstm => 4 * hidden,
            Cell::Elman => hidden,
        };
        let mut params = ParamStore::new();
        let w_input = params.add_weight("w_input", rows, d, &mut rng);
        let w_hidden = params.add_weight("w_hidden", rows, hidden, &mut rng);
        let bias = params.add_uniform("bias", &[rows], hidden, &mut rng);
        let w_logit = params.add_weight("w_logit", d * k, hidden, &mut rng);
        Self { cell, activation, d, hidden, k, params, w_input, w_hidden, bias, w_logit }
    }

    pub fn w_input(&self) -> ParamId {
        self.w_input
    }

    pub fn w_hidden(&self) -> ParamId {
        self.w_hidden
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn w_logit(&self) -> ParamId {
        self.w_logit
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], inputs: &Tensor) -> Result<Var, ModelError> {
        let (b, t) = check_inputs(inputs, self.d)?;
        let [w_in, w_h, bias, w_logit] = [self.w_input, self.w_hidden, self.bias, self.w_logit].map(|p| vars[p.0]);
        let h = self.hidden;
        let x = inputs.data();
        let mut state: Option<(Var, Option<Var>)> = None;
        for step in 0..t {
            let mut xt = Vec::with_capacity(b * self.d);
            for i in 0..b {
                let at = (i * t + step) * self.d;
                xt.extend_from_slice(&x[at..at + self.d]);
            }
            let xt = tape.constant(Tensor::matrix(b, self.d, xt))?;
            let mut pre = tape.matmul_nt(xt, w_in)?;
            if let Some((hp, _)) = state {
                let rec = tape.matmul_nt(hp, w_h)?;
                pre = tape.add(pre, rec)?;
            }
            let pre = tape.add_row(pre, bias)?;
            state = Some(match self.cell {
                Cell::Elman => {
                    let hn = match self.activation {
                        Activation::Tanh => tape.tanh(pre)?,
                        Activation::Relu => tape.relu(pre)?,
                        Activation::Identity => pre,
                    };
                    (hn, None)
                }
                Cell::Lstm => {
                    let i = tape.slice_cols(pre, 0, h)?;
                    let i = tape.sigmoid(i)?;
                    let f = tape.slice_cols(pre, h, h)?;
                    let f = tape.sigmoid(f)?;
                    let g = tape.slice_cols(pre, 2 * h, h)?;
                    let g = tape.tanh(g)?;
                    let o = tape.slice_cols(pre, 3 * h, h)?;
                    let o = tape.sigmoid(o)?;
                    let mut c = tape.mul(i, g)?;
                    if let Some((_, Some(cp))) = state {
                        let keep = tape.mul(f, cp)?;
                        c = tape.add(keep, c)?;
                    }
                    let tc = tape.tanh(c)?;
                    (tape.mul(o, tc)?, Some(c))
                }
            });
        }
        let (h_last, _) = state.expect("t_in >= 1 checked with the input shape");
        Ok(tape.matmul_nt(h_last, w_logit)?)
    }
}
