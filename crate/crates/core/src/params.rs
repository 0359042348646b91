//! Named parameter storage and the building blocks shared by every module.

use amda_autodiff::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Parameters in registration order. Order is part of the checkpoint layout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.param(v.clone())).collect(),
        }
    }

    /// Records every parameter as a constant (evaluation).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.constant(v.clone())).collect(),
        }
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps handles recorded elsewhere, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Everything a forward pass needs besides its inputs.
pub struct Fwd<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a Bound,
    pub train: bool,
    pub dropout: f64,
}

impl Fwd<'_> {
    pub fn p(&self, id: ParamId) -> Var {
        self.params.var(id)
    }

    pub fn dropout(&mut self, x: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
        Ok(self.tape.dropout(x, self.dropout, self.train, rng)?)
    }

    /// Zeroes the rows of `x` whose `valid` flag is false. No-op when every
    /// row is valid.
    pub fn zero_invalid_rows(&mut self, x: Var, valid: &[bool]) -> Result<Var> {
        if valid.iter().all(|v| *v) {
            return Ok(x);
        }
        let (r, c) = self.tape.value(x).dims2()?;
        let mut m = Vec::with_capacity(r * c);
        for &v in valid {
            m.extend(std::iter::repeat_n(if v { 1.0 } else { 0.0 }, c));
        }
        let mask = self.tape.constant(Tensor::matrix(r, c, m)?);
        Ok(self.tape.mul(x, mask)?)
    }
}

/// Glorot-uniform matrix.
pub fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

/// `x·W + b` applied row-wise.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), xavier(rng, input, output)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, output])),
        }
    }

    pub fn forward(&self, fx: &mut Fwd, x: Var) -> Result<Var> {
        let y = fx.tape.matmul(x, fx.p(self.weight))?;
        Ok(fx.tape.add(y, fx.p(self.bias))?)
    }
}

/// Two affine layers with a ReLU between them.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.0"), input, hidden, rng),
            out: Linear::new(store, &format!("{name}.1"), hidden, output, rng),
        }
    }

    pub fn forward(&self, fx: &mut Fwd, x: Var) -> Result<Var> {
        let h = self.hidden.forward(fx, x)?;
        let h = fx.tape.relu(h);
        self.out.forward(fx, h)
    }
}
