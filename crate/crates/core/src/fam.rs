//! Frequency-based attention.
//!
//! For a feature map `f: [C,H,W]` the layer computes
//!
//! ```text
//! f_a   = Σ_i w_i · f_i                 (channel aggregation)
//! att   = σ(idct2(dct2(f_a) ⊙ M))       (spectral mask, back to space)
//! f_out = f + att ⊙ f                   (att broadcast over channels)
//! ```
//!
//! `w` and `M` are learnable. `M` starts as the high-band indicator, i.e. the
//! low-frequency corner block is zeroed.

use crate::error::{Error, Result};
use crate::plane::{Image, Plane};
use crate::spectral::make_band_mask;
use crate::tensorcore::{Tape, Tensor, Var};

/// Learnable state of one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FamParams {
    /// `[C]` channel aggregation weights.
    pub agg_weights: Tensor,
    /// `[H,W]` spectral mask.
    pub mask: Tensor,
}

impl FamParams {
    /// Uniform `1/C` aggregation and a mask that removes the low band.
    pub fn new(channels: usize, height: usize, width: usize, band_fraction: f64) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArgument("attention over zero channels".into()));
        }
        let band = make_band_mask(height, width, band_fraction)?;
        Ok(Self {
            agg_weights: Tensor::full(vec![channels], 1.0 / channels as f64),
            mask: Tensor::new(vec![height, width], band.high().as_slice().to_vec())?,
        })
    }

    pub fn from_parts(agg_weights: Tensor, mask: Tensor) -> Result<Self> {
        if agg_weights.rank() != 1 || mask.rank() != 2 {
            return Err(Error::Shape(format!(
                "attention params need [C] and [H,W], got {:?} and {:?}",
                agg_weights.shape(),
                mask.shape()
            )));
        }
        Ok(Self { agg_weights, mask })
    }

    pub fn channels(&self) -> usize {
        self.agg_weights.len()
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.mask.shape()[0], self.mask.shape()[1])
    }

    pub fn num_params(&self) -> usize {
        self.agg_weights.len() + self.mask.len()
    }
}

/// Tape handles for one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct FamVars {
    pub agg_weights: Var,
    pub mask: Var,
}

/// Output of the differentiable layer.
#[derive(Debug, Clone, Copy)]
pub struct FamOutput {
    pub features: Var,
    /// `[N,1,H,W]` attention in `(0,1)`.
    pub attention: Var,
}

/// Weighted channel sum on the tape, `[N,C,H,W] → [N,1,H,W]`, realized as
/// a bias-free 1x1 convolution with a single output channel.
pub fn aggregate_on_tape(tape: &mut Tape, f: Var, agg_weights: Var) -> Result<Var> {
    let c = tape.value(agg_weights).len();
    let fc = tape.value(f).shape().get(1).copied().unwrap_or(0);
    if fc != c {
        return Err(Error::Shape(format!("{c} aggregation weights for {fc} channels")));
    }
    let kernel = tape.reshape(agg_weights, &[1, c, 1, 1])?;
    tape.conv2d(f, kernel, 1, 0)
}

pub fn fam_on_tape(tape: &mut Tape, f: Var, vars: FamVars) -> Result<FamOutput> {
    let shape = tape.value(f).shape().to_vec();
    let mshape = tape.value(vars.mask).shape().to_vec();
    if shape.len() != 4 || mshape != shape[2..] {
        return Err(Error::Shape(format!(
            "attention mask {mshape:?} does not fit features {shape:?}"
        )));
    }
    let fa = aggregate_on_tape(tape, f, vars.agg_weights)?;
    let spec = tape.dct2(fa)?;
    let high = tape.mul(spec, vars.mask)?;
    let back = tape.idct2(high)?;
    let attention = tape.sigmoid(back)?;
    let scaled = tape.mul(f, attention)?;
    let features = tape.add(f, scaled)?;
    Ok(FamOutput { features, attention })
}

fn check_chw(f: &Tensor) -> Result<(usize, usize, usize)> {
    match *f.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::Shape(format!("expected [C,H,W] features, got {s:?}"))),
    }
}

/// `f_a = Σ_i w_i · f_i` for a single `[C,H,W]` feature map.
pub fn aggregate(f: &Tensor, agg_weights: &[f64]) -> Result<Plane> {
    let (c, h, w) = check_chw(f)?;
    let mut tape = Tape::new();
    let fv = tape.constant(f.reshaped(vec![1, c, h, w])?);
    let wv = tape.constant(Tensor::new(vec![agg_weights.len()], agg_weights.to_vec())?);
    let out = aggregate_on_tape(&mut tape, fv, wv)?;
    Plane::new(h, w, tape.value(out).data().to_vec())
}

fn run_single(f: &Tensor, p: &FamParams) -> Result<(Tensor, Plane)> {
    let (c, h, w) = check_chw(f)?;
    if p.channels() != c || p.spatial() != (h, w) {
        return Err(Error::Shape(format!(
            "params for {}x{:?} applied to {c}x{h}x{w}",
            p.channels(),
            p.spatial()
        )));
    }
    let mut tape = Tape::new();
    let fv = tape.constant(f.reshaped(vec![1, c, h, w])?);
    let vars = FamVars {
        agg_weights: tape.constant(p.agg_weights.clone()),
        mask: tape.constant(p.mask.clone()),
    };
    let out = fam_on_tape(&mut tape, fv, vars)?;
    let features = tape.value(out.features).reshaped(vec![c, h, w])?;
    let att = Plane::new(h, w, tape.value(out.attention).data().to_vec())?;
    Ok((features, att))
}

/// Frequency-enhanced features for a single `[C,H,W]` map.
pub fn fam_forward(f: &Tensor, p: &FamParams) -> Result<Tensor> {
    run_single(f, p).map(|(out, _)| out)
}

/// The raw `(0,1)` attention map for a single `[C,H,W]` map.
pub fn attention_map(f: &Tensor, p: &FamParams) -> Result<Plane> {
    run_single(f, p).map(|(_, att)| att)
}

/// Rescales an attention map for viewing: min→0, max→1. A constant map
/// (max − min below 1e-12) is kept at its absolute value, so the neutral
/// 0.5 map becomes mid-gray (128 after 8-bit quantization).
pub fn rescale_attention(att: &Plane) -> Image {
    let (lo, hi) = att
        .as_slice()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi - lo < 1e-12 {
        return att.clamp01();
    }
    att.map(|v| (v - lo) / (hi - lo))
}

/// Attention map of a single `[C,H,W]` map as a viewable unit-range image.
pub fn export_attention(f: &Tensor, p: &FamParams) -> Result<Image> {
    attention_map(f, p).map(|a| rescale_attention(&a))
}
