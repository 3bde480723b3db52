use crate::error::Result;
use crate::numkit::{ParamId, ParameterStore, Tape, Var};
use crate::rng::XorShiftRng;

/// Gate order used throughout: input, forget, output, candidate.
pub const GATES: [&str; 4] = ["input", "forget", "output", "candidate"];

/// LSTM weights bound on a tape. `input[k]` is `d_in x d_h`, `hidden[k]` is
/// `d_h x d_h` and `bias[k]` has `d_h` elements, for gate `k` in [`GATES`]
/// order.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    pub input: [Var; 4],
    pub hidden: [Var; 4],
    pub bias: [Var; 4],
}

/// One LSTM step over a batch of rows.
///
/// `i, f, o = σ(x W + h U + b)`, `g = tanh(x W_g + h U_g + b_g)`,
/// `c = f ⊙ c_prev + i ⊙ g`, `h = o ⊙ tanh(c)`.
pub fn lstm_cell(tape: &mut Tape, x: Var, h_prev: Var, c_prev: Var, w: &LstmWeights) -> Result<(Var, Var)> {
    let mut pre = [x; 4];
    for k in 0..4 {
        let xi = tape.matmul(x, w.input[k])?;
        let hh = tape.matmul(h_prev, w.hidden[k])?;
        let s = tape.add(xi, hh)?;
        pre[k] = tape.add_bias(s, w.bias[k])?;
    }
    let i = tape.sigmoid(pre[0])?;
    let f = tape.sigmoid(pre[1])?;
    let o = tape.sigmoid(pre[2])?;
    let g = tape.tanh(pre[3])?;
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// Parameter ids of an LSTM held in a [`ParameterStore`].
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub input: [ParamId; 4],
    pub hidden: [ParamId; 4],
    pub bias: [ParamId; 4],
    pub d_in: usize,
    pub d_hidden: usize,
}

impl LstmParams {
    pub fn init(store: &mut ParameterStore, prefix: &str, d_in: usize, d_hidden: usize, rng: &mut XorShiftRng) -> Self {
        let input = GATES.map(|g| store.add_glorot(format!("{prefix}.w_{g}"), d_in, d_hidden, rng));
        let hidden = GATES.map(|g| store.add_glorot(format!("{prefix}.u_{g}"), d_hidden, d_hidden, rng));
        let bias = GATES.map(|g| store.add_zeros(format!("{prefix}.b_{g}"), &[d_hidden]));
        LstmParams {
            input,
            hidden,
            bias,
            d_in,
            d_hidden,
        }
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParameterStore, trainable: bool) -> LstmWeights {
        let mut bind = |id: ParamId| {
            if trainable {
                tape.param(store, id)
            } else {
                tape.frozen(store, id)
            }
        };
        LstmWeights {
            input: self.input.map(&mut bind),
            hidden: self.hidden.map(&mut bind),
            bias: self.bias.map(&mut bind),
        }
    }
}
