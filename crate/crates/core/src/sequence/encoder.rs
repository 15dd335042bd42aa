//! Pre-norm transformer encoder block with key-masked multi-head attention.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Graph, LayerNorm, Linear, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug)]
pub struct EncoderBlock {
    pub dim: usize,
    pub heads: usize,
    pub ff_width: usize,
    ln_attn: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

pub struct BlockOutput<'t, T: Real> {
    /// `[B, L, dim]`.
    pub out: Var<'t, T>,
    /// `[B·heads, L, L]`; row `q` holds the weights query `q` puts on each key.
    pub weights: Var<'t, T>,
    /// Multiply-adds of the score and weighted-sum products, times two.
    pub attention_flops: u64,
}

impl EncoderBlock {
    pub fn ff_width(dim: usize, multiplier: f64) -> usize {
        ((dim as f64 * multiplier).round() as usize).max(1)
    }

    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        ff_multiplier: f64,
    ) -> Result<Self> {
        if dim == 0 || heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::invalid(format!("{heads} heads do not divide model width {dim}")));
        }
        if !(ff_multiplier > 0.0) {
            return Err(Error::invalid(format!("ff multiplier {ff_multiplier} must be positive")));
        }
        let ff_width = Self::ff_width(dim, ff_multiplier);
        Ok(EncoderBlock {
            dim,
            heads,
            ff_width,
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim),
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            o: Linear::new(store, rng, &format!("{name}.o"), dim, dim),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), dim),
            ff_in: Linear::new(store, rng, &format!("{name}.ff_in"), dim, ff_width),
            ff_out: Linear::new(store, rng, &format!("{name}.ff_out"), ff_width, dim),
        })
    }

    /// Scalar parameters of one block at the given sizes.
    pub fn param_count(dim: usize, ff_multiplier: f64) -> usize {
        let ff = Self::ff_width(dim, ff_multiplier);
        4 * (dim * dim + dim) + 2 * (2 * dim) + (dim * ff + ff) + (ff * dim + dim)
    }

    /// `x`: `[B, L, dim]`; `key_mask[b·L + j]` is false for padded key `j` of
    /// sequence `b`.
    pub fn forward<'t, T: Real>(
        &self,
        g: &Graph<'t, T>,
        x: Var<'t, T>,
        key_mask: &[bool],
    ) -> Result<BlockOutput<'t, T>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.dim || key_mask.len() != shape[0] * shape[1] {
            return Err(Error::shape("encoder block", &[key_mask.len(), self.dim], &shape));
        }
        let (b, l, d) = (shape[0], shape[1], self.dim);
        let (h, dh) = (self.heads, self.dim / self.heads);
        let flat = x.reshape(&[b * l, d])?;
        let normed = self.ln_attn.forward(g, flat)?;
        let split = |lin: &Linear| -> Result<Var<'t, T>> {
            lin.forward(g, normed)?
                .reshape(&[b, l, h, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[b * h, l, dh])
        };
        let (q, k, v) = (split(&self.q)?, split(&self.k)?, split(&self.v)?);
        let scores = q.bmm(k.transpose()?)?.scale(T::of(1.0 / (dh as f64).sqrt()));
        let mut mask = Vec::with_capacity(b * h * l * l);
        for bi in 0..b {
            let keys = &key_mask[bi * l..(bi + 1) * l];
            for _ in 0..h * l {
                mask.extend_from_slice(keys);
            }
        }
        let weights = scores.masked_softmax(2, Some(&mask))?;
        let attended = weights
            .bmm(v)?
            .reshape(&[b, h, l, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * l, d])?;
        let y = flat.add(self.o.forward(g, attended)?)?;
        let hidden = self.ff_in.forward(g, self.ln_ff.forward(g, y)?)?.relu();
        let out = y.add(self.ff_out.forward(g, hidden)?)?.reshape(&[b, l, d])?;
        Ok(BlockOutput {
            out,
            weights,
            attention_flops: 4 * (b * l * l * d) as u64,
        })
    }
}
