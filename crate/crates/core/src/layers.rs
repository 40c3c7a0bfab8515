//! Parameterized building blocks: per-location linear maps, learnable
//! activation slopes, embeddings, dropout, and LSTMs.
//!
//! Layer structs own no values; they hold parameter names plus dimensions
//! and register their tensors into a `ParamStore`. Forward passes take the
//! graph and a `Bound` handle, so the same layer definition works across
//! any number of per-step graphs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Forward-pass mode. Training enables stochastic regularization; eval is
/// fully deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout: in train mode each unit is zeroed with probability `p`
/// and survivors are scaled by 1/(1-p), so the expectation is the identity.
/// Eval mode and p = 0 return the input unchanged.
pub fn dropout(g: &mut Graph, x: Var, p: f64, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!(
            "dropout probability must be in [0, 1), got {p}"
        )));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - p;
    let mask: Vec<f64> = (0..g.data(x).len())
        .map(|_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    let m = g.constant(Tensor::new(g.shape(x).to_vec(), mask)?);
    g.mul(x, m)
}

/// Per-location affine map: every row of a [K x in] input goes through the
/// same weight [in x out] and bias [out].
#[derive(Debug, Clone)]
pub struct Conv1x1 {
    weight: String,
    bias: String,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv1x1 {
    pub fn register(store: &mut ParamStore, prefix: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        let weight = format!("{prefix}.weight");
        let bias = format!("{prefix}.bias");
        store.register(&weight, &[in_ch, out_ch], Init::Glorot)?;
        store.register(&bias, &[out_ch], Init::Zeros)?;
        Ok(Conv1x1 { weight, bias, in_ch, out_ch })
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != self.in_ch {
            return Err(Error::dim(
                "conv1x1",
                format!("expected [K x {}], got {shape:?}", self.in_ch),
            ));
        }
        let w = b.var(&self.weight)?;
        let bias = b.var(&self.bias)?;
        let prod = g.matmul(x, w)?;
        g.add_row(prod, bias)
    }

    pub fn param_count(&self) -> usize {
        self.in_ch * self.out_ch + self.out_ch
    }
}

/// Learnable per-channel activation slope, initialized to 0.25.
#[derive(Debug, Clone)]
pub struct PreluSlope {
    name: String,
    pub channels: usize,
}

impl PreluSlope {
    pub fn register(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        let name = format!("{prefix}.slope");
        store.register(&name, &[channels], Init::Constant(0.25))?;
        Ok(PreluSlope { name, channels })
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let slope = b.var(&self.name)?;
        g.prelu(x, slope)
    }

    pub fn param_count(&self) -> usize {
        self.channels
    }
}

/// Token embedding: a learned table passed through tanh, concatenated with
/// a frozen random table with unit-norm rows that stands in for pretrained
/// vectors. The frozen half receives no gradient.
#[derive(Debug, Clone)]
pub struct Embedding {
    learned: String,
    frozen: String,
    pub vocab: usize,
    pub learned_dim: usize,
    pub frozen_dim: usize,
}

impl Embedding {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        vocab: usize,
        learned_dim: usize,
        frozen_dim: usize,
    ) -> Result<Self> {
        let learned = format!("{prefix}.learned");
        let frozen = format!("{prefix}.frozen");
        store.register(&learned, &[vocab, learned_dim], Init::Glorot)?;
        store.register_frozen(&frozen, &[vocab, frozen_dim], Init::UnitNormRows)?;
        Ok(Embedding { learned, frozen, vocab, learned_dim, frozen_dim })
    }

    pub fn width(&self) -> usize {
        self.learned_dim + self.frozen_dim
    }

    /// Row n of the result is tanh(learned[token_n]) joined with
    /// frozen[token_n].
    pub fn forward(&self, g: &mut Graph, b: &Bound, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::degenerate("embed", "empty token list"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::Vocab(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.vocab
            )));
        }
        let lt = b.var(&self.learned)?;
        let ft = b.var(&self.frozen)?;
        let learned_rows = g.gather_rows(lt, tokens)?;
        let squashed = g.tanh(learned_rows)?;
        let frozen_rows = g.gather_rows(ft, tokens)?;
        g.concat(&[squashed, frozen_rows], 1)
    }

    /// Trainable parameters only (the frozen table is excluded).
    pub fn param_count(&self) -> usize {
        self.vocab * self.learned_dim
    }
}

/// Unidirectional LSTM with one weight matrix and bias per gate and layer.
/// Gate weights act on the concatenation [x_t, h_{t-1}], are initialized
/// uniform in [-0.08, 0.08], and the forget-gate bias starts at 1.0.
#[derive(Debug, Clone)]
pub struct Lstm {
    prefix: String,
    pub input: usize,
    pub hidden: usize,
    pub layers: usize,
}

const GATES: [&str; 4] = ["in", "forget", "cell", "out"];
const LSTM_INIT_BOUND: f64 = 0.08;

impl Lstm {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        layers: usize,
    ) -> Result<Self> {
        if layers == 0 || hidden == 0 || input == 0 {
            return Err(Error::config(format!(
                "lstm dims must be positive: input {input}, hidden {hidden}, layers {layers}"
            )));
        }
        for layer in 0..layers {
            let in_dim = if layer == 0 { input } else { hidden };
            for gate in GATES {
                store.register(
                    &format!("{prefix}.l{layer}.{gate}.weight"),
                    &[in_dim + hidden, hidden],
                    Init::Uniform(LSTM_INIT_BOUND),
                )?;
                let bias_init = if gate == "forget" {
                    Init::Constant(1.0)
                } else {
                    Init::Zeros
                };
                store.register(&format!("{prefix}.l{layer}.{gate}.bias"), &[hidden], bias_init)?;
            }
        }
        Ok(Lstm { prefix: prefix.to_string(), input, hidden, layers })
    }

    fn gate(&self, g: &mut Graph, b: &Bound, layer: usize, name: &str, z: Var) -> Result<Var> {
        let w = b.var(&format!("{}.l{layer}.{name}.weight", self.prefix))?;
        let bias = b.var(&format!("{}.l{layer}.{name}.bias", self.prefix))?;
        let prod = g.matmul(z, w)?;
        g.add_row(prod, bias)
    }

    /// One cell update. `x_t` is [1 x in], `h` and `c` are [1 x hidden].
    pub fn step(
        &self,
        g: &mut Graph,
        b: &Bound,
        layer: usize,
        x_t: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        if layer >= self.layers {
            return Err(Error::contract(
                "lstm_step",
                format!("layer {layer} out of {}", self.layers),
            ));
        }
        let expect_in = if layer == 0 { self.input } else { self.hidden };
        if g.shape(x_t) != [1, expect_in] {
            return Err(Error::dim(
                "lstm_step",
                format!("input shape {:?}, expected [1, {expect_in}]", g.shape(x_t)),
            ));
        }
        if g.shape(h) != [1, self.hidden] || g.shape(c) != [1, self.hidden] {
            return Err(Error::dim(
                "lstm_step",
                format!(
                    "state shapes {:?}/{:?}, expected [1, {}]",
                    g.shape(h),
                    g.shape(c),
                    self.hidden
                ),
            ));
        }
        let z = g.concat(&[x_t, h], 1)?;
        let i_pre = self.gate(g, b, layer, "in", z)?;
        let i = g.sigmoid(i_pre)?;
        let f_pre = self.gate(g, b, layer, "forget", z)?;
        let f = g.sigmoid(f_pre)?;
        let o_pre = self.gate(g, b, layer, "out", z)?;
        let o = g.sigmoid(o_pre)?;
        let cand_pre = self.gate(g, b, layer, "cell", z)?;
        let cand = g.tanh(cand_pre)?;
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_t = g.add(keep, write)?;
        let c_squashed = g.tanh(c_t)?;
        let h_t = g.mul(o, c_squashed)?;
        Ok((h_t, c_t))
    }

    /// Run the full stack over a [N x input] sequence with zero initial
    /// state. Returns the per-step hidden states of every layer,
    /// concatenated per step to [N x layers*hidden].
    pub fn sequence(&self, g: &mut Graph, b: &Bound, xs: Var) -> Result<Var> {
        self.run(g, b, xs, |_, v| Ok(v))
    }

    /// `sequence` with dropout applied to each layer's output sequence in
    /// train mode (feeding both the next layer and the returned
    /// concatenation).
    pub fn sequence_dropout(
        &self,
        g: &mut Graph,
        b: &Bound,
        xs: Var,
        drop_p: f64,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        self.run(g, b, xs, |g, v| dropout(g, v, drop_p, mode, rng))
    }

    fn run(
        &self,
        g: &mut Graph,
        b: &Bound,
        xs: Var,
        mut regularize: impl FnMut(&mut Graph, Var) -> Result<Var>,
    ) -> Result<Var> {
        let shape = g.shape(xs).to_vec();
        if shape.len() != 2 || shape[1] != self.input {
            return Err(Error::dim(
                "lstm_sequence",
                format!("input shape {shape:?}, expected [N x {}]", self.input),
            ));
        }
        let n = shape[0];
        let mut layer_input = xs;
        let mut per_layer_outputs = Vec::with_capacity(self.layers);
        for layer in 0..self.layers {
            let mut h = g.constant(Tensor::zeros(&[1, self.hidden])?);
            let mut c = g.constant(Tensor::zeros(&[1, self.hidden])?);
            let mut rows = Vec::with_capacity(n);
            for t in 0..n {
                let x_t = g.slice_rows(layer_input, t, 1)?;
                let (h_t, c_t) = self.step(g, b, layer, x_t, h, c)?;
                h = h_t;
                c = c_t;
                rows.push(h_t);
            }
            let stacked = g.concat(&rows, 0)?;
            let regularized = regularize(g, stacked)?;
            per_layer_outputs.push(regularized);
            layer_input = regularized;
        }
        if per_layer_outputs.len() == 1 {
            Ok(per_layer_outputs[0])
        } else {
            g.concat(&per_layer_outputs, 1)
        }
    }

    pub fn param_count(&self) -> usize {
        let mut total = 0;
        for layer in 0..self.layers {
            let in_dim = if layer == 0 { self.input } else { self.hidden };
            total += 4 * ((in_dim + self.hidden) * self.hidden + self.hidden);
        }
        total
    }
}
