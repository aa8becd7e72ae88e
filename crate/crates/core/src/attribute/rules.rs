//! Relevance propagation rules for individual layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, BnParams, ConvParams, DenseParams, PoolParams};
use crate::tensor::Tensor;

/// Rule applied to a linear (conv or dense) layer.
///
/// With `z_jk = a_j w_jk` and `z_k = sum_j z_jk + b_k`:
///
/// * `Epsilon`: `R_j = sum_k z_jk / (z_k + eps * sign(z_k)) R_k`
/// * `AlphaBeta`: positive and negative parts of `z_jk` are normalised
///   separately (bias parts included in each denominator) and combined as
///   `alpha * R+ - beta * R-`
/// * `Flat`: weights set to 1 and biases to 0, inputs treated as 1, so each
///   output's relevance is split evenly over its receptive field
/// * `ExcitationPositive`: alpha=1, beta=0 with biases left out of the
///   denominator
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearRule {
    Epsilon,
    AlphaBeta { alpha: f32, beta: f32 },
    Flat,
    ExcitationPositive,
}

/// How relevance crosses a BN node that was not fused away.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnRule {
    /// BN as `y = z + beta` with input term `z = gamma * (x - mean) / s`;
    /// the epsilon rule then gives `R_in = z / (y + eps * sign(y)) * R`.
    #[default]
    AffineEpsilon,
    /// `R_in = R`
    IdentityPassthrough,
}

impl std::str::FromStr for BnRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "affine_epsilon" => Ok(BnRule::AffineEpsilon),
            "identity_passthrough" => Ok(BnRule::IdentityPassthrough),
            other => Err(Error::InvalidArgument(format!("unknown bn rule `{}`", other))),
        }
    }
}

impl std::fmt::Display for BnRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BnRule::AffineEpsilon => "affine_epsilon",
            BnRule::IdentityPassthrough => "identity_passthrough",
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum LinearLayer<'a> {
    Conv(&'a ConvParams),
    Dense(&'a DenseParams),
}

impl LinearLayer<'_> {
    pub fn weight(&self) -> &Tensor {
        match self {
            LinearLayer::Conv(p) => &p.weight,
            LinearLayer::Dense(p) => &p.weight,
        }
    }

    pub fn bias(&self) -> &Tensor {
        match self {
            LinearLayer::Conv(p) => &p.bias,
            LinearLayer::Dense(p) => &p.bias,
        }
    }

    /// Forward pass with substituted parameters.
    fn apply(&self, x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let bias = bias
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.bias().shape()));
        match self {
            LinearLayer::Conv(p) => kernels::conv2d_forward(
                x,
                &ConvParams {
                    weight: weight.clone(),
                    bias,
                    stride: p.stride,
                    padding: p.padding,
                },
            ),
            LinearLayer::Dense(_) => kernels::dense_forward(
                x,
                &DenseParams {
                    weight: weight.clone(),
                    bias,
                },
            ),
        }
    }

    /// Transposed map of [`apply`](Self::apply) (bias irrelevant).
    fn apply_transpose(&self, s: &Tensor, weight: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
        let bias = Tensor::zeros(self.bias().shape());
        match self {
            LinearLayer::Conv(p) => kernels::conv2d_input_grad(
                s,
                &ConvParams {
                    weight: weight.clone(),
                    bias,
                    stride: p.stride,
                    padding: p.padding,
                },
                input_shape,
            ),
            LinearLayer::Dense(_) => kernels::dense_input_grad(
                s,
                &DenseParams {
                    weight: weight.clone(),
                    bias,
                },
                input_shape,
            ),
        }
    }
}

/// `z + eps * sign(z)` with `sign(0) = +1`.
#[inline]
pub fn stabilize(z: f64, eps: f64) -> f64 {
    if z >= 0.0 {
        z + eps
    } else {
        z - eps
    }
}

/// `relevance / stabilize(z)` elementwise.
fn ratio(relevance: &Tensor, z: &Tensor, eps: f32) -> Result<Tensor> {
    relevance.zip_map(z, |r, z| (r as f64 / stabilize(z as f64, eps as f64)) as f32)
}

pub(crate) fn check_epsilon(eps: f32) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "epsilon must be a positive finite number, got {}",
            eps
        )))
    }
}

/// Redistributes `relevance_out` onto the layer's input `activations`.
pub fn lrp_linear_rule(
    activations: &Tensor,
    layer: LinearLayer<'_>,
    relevance_out: &Tensor,
    rule: LinearRule,
    eps: f32,
) -> Result<Tensor> {
    check_epsilon(eps)?;
    let a = activations;
    let w = layer.weight();
    match rule {
        LinearRule::Epsilon => {
            let z = layer.apply(a, w, Some(layer.bias()))?;
            let s = ratio(relevance_out, &z, eps)?;
            a.mul(&layer.apply_transpose(&s, w, a.shape())?)
        }
        LinearRule::Flat => {
            let ones_in = Tensor::full(a.shape(), 1.0);
            let ones_w = Tensor::full(w.shape(), 1.0);
            let z = layer.apply(&ones_in, &ones_w, None)?;
            let s = ratio(relevance_out, &z, eps)?;
            layer.apply_transpose(&s, &ones_w, a.shape())
        }
        LinearRule::AlphaBeta { alpha, beta } => {
            alpha_beta(a, layer, relevance_out, alpha, beta, true, eps)
        }
        LinearRule::ExcitationPositive => alpha_beta(a, layer, relevance_out, 1.0, 0.0, false, eps),
    }
}

fn alpha_beta(
    a: &Tensor,
    layer: LinearLayer<'_>,
    relevance: &Tensor,
    alpha: f32,
    beta: f32,
    use_bias: bool,
    eps: f32,
) -> Result<Tensor> {
    let w = layer.weight();
    let (a_pos, a_neg) = (a.map(|v| v.max(0.0)), a.map(|v| v.min(0.0)));
    let (w_pos, w_neg) = (w.map(|v| v.max(0.0)), w.map(|v| v.min(0.0)));
    let b = layer.bias();

    // positive contributions: a+ w+ and a- w-
    let part = |pa: &Tensor, pw: &Tensor, na: &Tensor, nw: &Tensor, bias: Tensor| -> Result<Tensor> {
        let z = layer
            .apply(pa, pw, Some(&bias))?
            .add(&layer.apply(na, nw, None)?)?;
        let s = ratio(relevance, &z, eps)?;
        pa.mul(&layer.apply_transpose(&s, pw, a.shape())?)?
            .add(&na.mul(&layer.apply_transpose(&s, nw, a.shape())?)?)
    };
    let zero_bias = Tensor::zeros(b.shape());
    let b_pos = if use_bias { b.map(|v| v.max(0.0)) } else { zero_bias.clone() };
    let r_pos = part(&a_pos, &w_pos, &a_neg, &w_neg, b_pos)?;
    if beta == 0.0 {
        return Ok(r_pos.scale(alpha));
    }
    let b_neg = if use_bias { b.map(|v| v.min(0.0)) } else { zero_bias };
    let r_neg = part(&a_pos, &w_neg, &a_neg, &w_pos, b_neg)?;
    r_pos.zip_map(&r_neg, |p, n| alpha * p - beta * n)
}

pub fn lrp_bn(input: &Tensor, p: &BnParams, relevance: &Tensor, rule: BnRule, eps: f32) -> Result<Tensor> {
    check_epsilon(eps)?;
    match rule {
        BnRule::IdentityPassthrough => Ok(relevance.clone()),
        BnRule::AffineEpsilon => {
            input.expect_same_shape(relevance, "bn relevance")?;
            let (c, inner) = kernels::channel_layout(input.shape());
            let mut out = relevance.clone();
            for (i, r) in out.data_mut().iter_mut().enumerate() {
                let ch = (i / inner) % c;
                let z = p.scale(ch) * (input.data()[i] as f64 - p.running_mean.data()[ch] as f64);
                let y = z + p.beta.data()[ch] as f64;
                *r = (z / stabilize(y, eps as f64) * *r as f64) as f32;
            }
            Ok(out)
        }
    }
}

/// Splits relevance of `a + b` in proportion to each operand's contribution.
pub fn lrp_add(a: &Tensor, b: &Tensor, relevance: &Tensor, eps: f32) -> Result<(Tensor, Tensor)> {
    check_epsilon(eps)?;
    a.expect_same_shape(b, "add relevance")?;
    a.expect_same_shape(relevance, "add relevance")?;
    let n = a.len();
    let (mut ra, mut rb) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let (za, zb) = (a.data()[i] as f64, b.data()[i] as f64);
        let s = relevance.data()[i] as f64 / stabilize(za + zb, eps as f64);
        ra.push((za * s) as f32);
        rb.push((zb * s) as f32);
    }
    Ok((
        Tensor::new(a.shape().to_vec(), ra)?,
        Tensor::new(b.shape().to_vec(), rb)?,
    ))
}

/// Average pooling as a uniform-weight linear layer under the epsilon rule.
pub fn lrp_avgpool(input: &Tensor, p: &PoolParams, relevance: &Tensor, eps: f32) -> Result<Tensor> {
    check_epsilon(eps)?;
    let z = kernels::avgpool2d_forward(input, p)?;
    let s = ratio(relevance, &z, eps)?;
    input.mul(&kernels::avgpool2d_backward(&s, input.shape(), p)?)
}
