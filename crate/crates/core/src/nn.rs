//! Layer building blocks shared by the backbone and encoder networks.

use cife_tensor::{Scalar, Tape, Var};

use crate::error::{CifeError, Result};
use crate::params::{Bound, Init};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// A tape plus the parameters bound onto it.
pub(crate) struct Net<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub params: &'a Bound,
}

impl<'a, T: Scalar> Net<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, params: &'a Bound) -> Self {
        Net { tape, params }
    }

    pub fn p(&self, name: &str) -> Result<Var> {
        self.params.get(name)
    }

    pub fn conv(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.p(&format!("{name}.weight"))?;
        let b = self.p(&format!("{name}.bias"))?;
        Ok(self.tape.conv2d(x, w, Some(b), stride, pad)?)
    }

    pub fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{name}.weight"))?;
        let b = self.p(&format!("{name}.bias"))?;
        Ok(self.tape.linear(x, w, Some(b))?)
    }

    pub fn group_norm(&mut self, name: &str, x: Var, groups: usize) -> Result<Var> {
        let g = self.p(&format!("{name}.gamma"))?;
        let b = self.p(&format!("{name}.beta"))?;
        Ok(self.tape.group_norm(x, groups, g, b, NORM_EPS)?)
    }

    pub fn layer_norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let g = self.p(&format!("{name}.gamma"))?;
        let b = self.p(&format!("{name}.beta"))?;
        Ok(self.tape.layer_norm(x, g, b, NORM_EPS)?)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        Ok(self.tape.silu(x)?)
    }

    /// Multi-head attention over `[N, L, D]` inputs with per-head width `D / heads`.
    pub fn multi_head(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (n, lq, d) = dims3(self.tape.shape(q));
        let lk = self.tape.shape(k)[1];
        let dh = d / heads;
        let split = |t: &mut Tape<T>, x: Var, l: usize| -> Result<Var> {
            let x = t.reshape(x, &[n, l, heads, dh])?;
            let x = t.permute(x, &[0, 2, 1, 3])?;
            Ok(t.reshape(x, &[n * heads, l, dh])?)
        };
        let qh = split(self.tape, q, lq)?;
        let kh = split(self.tape, k, lk)?;
        let vh = split(self.tape, v, lk)?;
        let o = self.tape.attention(qh, kh, vh, causal)?;
        let o = self.tape.reshape(o, &[n, heads, lq, dh])?;
        let o = self.tape.permute(o, &[0, 2, 1, 3])?;
        Ok(self.tape.reshape(o, &[n, lq, d])?)
    }

    /// Pre-norm transformer block: self-attention then a SiLU MLP, both residual.
    pub fn transformer_block(&mut self, name: &str, x: Var, heads: usize, causal: bool) -> Result<Var> {
        let h = self.layer_norm(&format!("{name}.ln1"), x)?;
        let q = self.linear(&format!("{name}.attn.q"), h)?;
        let k = self.linear(&format!("{name}.attn.k"), h)?;
        let v = self.linear(&format!("{name}.attn.v"), h)?;
        let a = self.multi_head(q, k, v, heads, causal)?;
        let a = self.linear(&format!("{name}.attn.o"), a)?;
        let x = self.tape.add(x, a)?;
        let h = self.layer_norm(&format!("{name}.ln2"), x)?;
        let h = self.linear(&format!("{name}.mlp.fc1"), h)?;
        let h = self.silu(h)?;
        let h = self.linear(&format!("{name}.mlp.fc2"), h)?;
        Ok(self.tape.add(x, h)?)
    }

    /// Residual conv block with an additive per-channel time embedding.
    pub fn res_block(
        &mut self,
        name: &str,
        x: Var,
        temb: Option<Var>,
        groups: usize,
    ) -> Result<Var> {
        let h = self.group_norm(&format!("{name}.norm1"), x, groups)?;
        let h = self.silu(h)?;
        let mut h = self.conv(&format!("{name}.conv1"), h, 1, 1)?;
        if let Some(temb) = temb {
            let e = self.linear(&format!("{name}.temb"), temb)?;
            h = self.tape.add_channel(h, e)?;
        }
        let h = self.group_norm(&format!("{name}.norm2"), h, groups)?;
        let h = self.silu(h)?;
        let h = self.conv(&format!("{name}.conv2"), h, 1, 1)?;
        let skip = if self.params.get(&format!("{name}.skip.weight")).is_ok() {
            self.conv(&format!("{name}.skip"), x, 1, 0)?
        } else {
            x
        };
        Ok(self.tape.add(h, skip)?)
    }

    /// Spatial features `[N, C, H, W]` attend over condition rows `[N, L, Dc]`.
    pub fn cross_attention(&mut self, name: &str, x: Var, cond: Var, groups: usize) -> Result<Var> {
        let shape = self.tape.shape(x).to_vec();
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let wk = self.p(&format!("{name}.k.weight"))?;
        let expected = self.tape.shape(wk)[1];
        let cs = self.tape.shape(cond);
        if cs.len() != 3 || cs[0] != n || cs[2] != expected {
            return Err(CifeError::CondWidth {
                expected,
                found: *cs.last().unwrap_or(&0),
            });
        }
        let h = self.group_norm(&format!("{name}.norm"), x, groups)?;
        let h = self.tape.reshape(h, &[n, c, hw])?;
        let h = self.tape.permute(h, &[0, 2, 1])?;
        let q = self.linear(&format!("{name}.q"), h)?;
        let k = self.linear(&format!("{name}.k"), cond)?;
        let v = self.linear(&format!("{name}.v"), cond)?;
        let a = self.tape.attention(q, k, v, false)?;
        let o = self.linear(&format!("{name}.o"), a)?;
        let o = self.tape.permute(o, &[0, 2, 1])?;
        let o = self.tape.reshape(o, &shape)?;
        Ok(self.tape.add(x, o)?)
    }
}

pub(crate) fn dims3(s: &[usize]) -> (usize, usize, usize) {
    (s[0], s[1], s[2])
}

impl Init<'_> {
    pub fn transformer_block(&mut self, name: &str, d: usize, hidden: usize, zero_out: bool) {
        self.norm(&format!("{name}.ln1"), d);
        for p in ["q", "k", "v"] {
            self.linear(&format!("{name}.attn.{p}"), d, d);
        }
        self.norm(&format!("{name}.ln2"), d);
        self.linear(&format!("{name}.mlp.fc1"), hidden, d);
        if zero_out {
            self.zero_linear(&format!("{name}.attn.o"), d, d);
            self.zero_linear(&format!("{name}.mlp.fc2"), d, hidden);
        } else {
            self.linear(&format!("{name}.attn.o"), d, d);
            self.linear(&format!("{name}.mlp.fc2"), d, hidden);
        }
    }

    pub fn res_block(&mut self, name: &str, cin: usize, cout: usize, temb: Option<usize>) {
        self.norm(&format!("{name}.norm1"), cin);
        self.conv(&format!("{name}.conv1"), cout, cin, 3);
        if let Some(width) = temb {
            self.linear(&format!("{name}.temb"), cout, width);
        }
        self.norm(&format!("{name}.norm2"), cout);
        self.conv(&format!("{name}.conv2"), cout, cout, 3);
        if cin != cout {
            self.conv(&format!("{name}.skip"), cout, cin, 1);
        }
    }

    pub fn cross_attention(&mut self, name: &str, c: usize, cond: usize) {
        self.norm(&format!("{name}.norm"), c);
        self.linear(&format!("{name}.q"), c, c);
        self.linear(&format!("{name}.k"), c, cond);
        self.linear(&format!("{name}.v"), c, cond);
        self.linear(&format!("{name}.o"), c, c);
    }
}
