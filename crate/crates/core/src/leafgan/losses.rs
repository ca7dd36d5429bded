//! Loss terms of the masked translation objective.
//!
//! Every expectation is reduced as the mean over all elements of the batch
//! (pixels, channels and samples), which keeps `λ` independent of resolution.

use candle_core::{DType, Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weight shared by the cycle and background-similarity terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
}

impl LossWeights {
    pub fn new(lambda: f64) -> Result<Self> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::config("lambda", format!("{lambda} must be finite and non-negative")));
        }
        Ok(Self { lambda })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 10.0 }
    }
}

pub(crate) fn scalar(t: &Tensor, what: &str) -> Result<f64> {
    let v = t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            what: what.to_string(),
            iteration: 0,
        })
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `S ⊙ x` with a `(B,1,H,W)` mask broadcast over the three channels.
pub fn gate(img: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = img.dims4()?;
    let (mb, mc, mh, mw) = mask.dims4()?;
    if (mb, mc, mh, mw) != (b, 1, h, w) {
        return Err(Error::Shape(format!(
            "mask {:?} is not aligned with image {:?}",
            mask.dims(),
            img.dims()
        )));
    }
    Ok(img.broadcast_mul(mask)?)
}

/// `mean((pred − target)²)`.
pub fn least_squares(pred: &Tensor, target: f64) -> Result<Tensor> {
    Ok((pred - target)?.sqr()?.mean_all()?)
}

fn mean_abs(t: &Tensor) -> Result<Tensor> {
    Ok(t.abs()?.mean_all()?)
}

/// `E[(D_Y(y_s) − 1)²] + E[D_Y(x′_s)²]`.
pub fn adv_loss_g<D: Module + ?Sized>(d_y: &D, y_s: &Tensor, x_prime_s: &Tensor) -> Result<Tensor> {
    let loss = (least_squares(&d_y.forward(y_s)?, 1.0)? + least_squares(&d_y.forward(x_prime_s)?, 0.0)?)?;
    scalar(&loss, "adversarial loss (G, D_Y)")?;
    Ok(loss)
}

/// `E[(D_X(x_s) − 1)²] + E[D_X(y′_s)²]`.
pub fn adv_loss_f<D: Module + ?Sized>(d_x: &D, x_s: &Tensor, y_prime_s: &Tensor) -> Result<Tensor> {
    let loss = (least_squares(&d_x.forward(x_s)?, 1.0)? + least_squares(&d_x.forward(y_prime_s)?, 0.0)?)?;
    scalar(&loss, "adversarial loss (F, D_X)")?;
    Ok(loss)
}

/// Generator-side adversarial term: `E[(D(fake_s) − 1)²]`.
pub fn generator_adv<D: Module + ?Sized>(d: &D, fake_s: &Tensor) -> Result<Tensor> {
    least_squares(&d.forward(fake_s)?, 1.0)
}

/// Discriminator objective on gated real/fake pairs: `½(E[(D(real)−1)²] + E[D(fake)²])`.
pub fn discriminator_loss<D: Module + ?Sized>(d: &D, real_s: &Tensor, fake_s: &Tensor) -> Result<Tensor> {
    Ok(((least_squares(&d.forward(real_s)?, 1.0)? + least_squares(&d.forward(fake_s)?, 0.0)?)? * 0.5)?)
}

/// `mean|F(G(x)) − x| + mean|G(F(y)) − y|` from precomputed reconstructions.
pub fn cycle_terms(x: &Tensor, rec_x: &Tensor, y: &Tensor, rec_y: &Tensor) -> Result<Tensor> {
    same_shape(x, rec_x, "cycle reconstruction of x")?;
    same_shape(y, rec_y, "cycle reconstruction of y")?;
    Ok((mean_abs(&(rec_x - x)?)? + mean_abs(&(rec_y - y)?)?)?)
}

pub fn cycle_loss<G: Module + ?Sized, F: Module + ?Sized>(g: &G, f: &F, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let rec_x = f.forward(&g.forward(x)?)?;
    let rec_y = g.forward(&f.forward(y)?)?;
    cycle_terms(x, &rec_x, y, &rec_y)
}

/// `mean|(1−S_x) ⊙ (G(x) − x)| + mean|(1−S_y) ⊙ (F(y) − y)|` from precomputed outputs.
pub fn bs_terms(
    x: &Tensor,
    fake_y: &Tensor,
    s_x: &Tensor,
    y: &Tensor,
    fake_x: &Tensor,
    s_y: &Tensor,
) -> Result<Tensor> {
    same_shape(x, fake_y, "G(x)")?;
    same_shape(y, fake_x, "F(y)")?;
    let bg_x = s_x.affine(-1.0, 1.0)?;
    let bg_y = s_y.affine(-1.0, 1.0)?;
    let tx = gate(&(fake_y - x)?, &bg_x)?;
    let ty = gate(&(fake_x - y)?, &bg_y)?;
    Ok((mean_abs(&tx)? + mean_abs(&ty)?)?)
}

pub fn bs_loss<G: Module + ?Sized, F: Module + ?Sized>(
    g: &G,
    f: &F,
    x: &Tensor,
    y: &Tensor,
    s_x: &Tensor,
    s_y: &Tensor,
) -> Result<Tensor> {
    bs_terms(x, &g.forward(x)?, s_x, y, &f.forward(y)?, s_y)
}

/// `adv_G + adv_F + λ·(cyc + bs)`.
pub fn total_loss(adv_g: f64, adv_f: f64, cyc: f64, bs: f64, w: LossWeights) -> Result<f64> {
    for (name, v) in [("adv_G", adv_g), ("adv_F", adv_f), ("cyc", cyc), ("bs", bs)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: format!("total loss component {name}"),
                iteration: 0,
            });
        }
    }
    Ok(adv_g + adv_f + w.lambda * (cyc + bs))
}

pub fn total_loss_tensor(adv_g: &Tensor, adv_f: &Tensor, cyc: &Tensor, bs: &Tensor, w: LossWeights) -> Result<Tensor> {
    Ok(((adv_g + adv_f)? + ((cyc + bs)? * w.lambda)?)?)
}

/// Unmasked CycleGAN objective, kept as a separate path for comparisons.
pub mod vanilla {
    use super::*;

    /// `E[(D(real) − 1)²] + E[D(fake)²]` on raw images.
    pub fn adv_loss<D: Module + ?Sized>(d: &D, real: &Tensor, fake: &Tensor) -> Result<Tensor> {
        Ok((least_squares(&d.forward(real)?, 1.0)? + least_squares(&d.forward(fake)?, 0.0)?)?)
    }

    pub fn cycle_loss<G: Module + ?Sized, F: Module + ?Sized>(g: &G, f: &F, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        super::cycle_loss(g, f, x, y)
    }

    /// `adv_G + adv_F + λ·cyc`.
    pub fn total_loss(adv_g: f64, adv_f: f64, cyc: f64, w: LossWeights) -> f64 {
        adv_g + adv_f + w.lambda * cyc
    }
}
