//! Plaintext integer evaluation of compressed models.
//!
//! This is the correctness oracle: straightforward nested loops over the
//! dense weight expansion, with i128 accumulation. It shares the model types
//! with the homomorphic evaluator but none of its execution machinery, so
//! the two paths can check each other.

use crate::compress::{CompressedWeights, Layer, LayerSpec, Model};
use crate::encoding::{PlainTensor, Shape};
use crate::error::{Error, Result};

fn to_i64(v: i128) -> Result<i64> {
    i64::try_from(v).map_err(|_| Error::BoundOverflow("plaintext value exceeds i64".into()))
}

/// `W·x + b` over the dense expansion of the weights.
pub fn eval_fc_plain(layer: &Layer, input: &[i64]) -> Result<Vec<i64>> {
    let LayerSpec::Fc { in_dim, out_dim } = layer.spec else {
        return Err(Error::Shape("not an fc layer".into()));
    };
    if input.len() != in_dim {
        return Err(Error::Shape("fc input length mismatch".into()));
    }
    let dense = layer
        .weights
        .as_ref()
        .expect("fc layer has weights")
        .to_dense(in_dim * out_dim);
    let mut out = Vec::with_capacity(out_dim);
    for k in 0..out_dim {
        let mut acc: i128 = layer.bias[k] as i128;
        for j in 0..in_dim {
            acc += dense[k * in_dim + j] as i128 * input[j] as i128;
        }
        out.push(to_i64(acc)?);
    }
    Ok(out)
}

/// Zero-padded convolution over the dense expansion.
pub fn eval_conv_plain(layer: &Layer, input: &[i64]) -> Result<Vec<i64>> {
    let LayerSpec::Conv {
        in_h,
        in_w,
        in_c,
        f_h,
        f_w,
        f_c,
        c_o,
        stride,
        padding,
    } = layer.spec
    else {
        return Err(Error::Shape("not a conv layer".into()));
    };
    if input.len() != in_h * in_w * in_c {
        return Err(Error::Shape("conv input length mismatch".into()));
    }
    let dense = layer
        .weights
        .as_ref()
        .expect("conv layer has weights")
        .to_dense(layer.spec.weight_count());
    let oh = (in_h + 2 * padding - f_h) / stride + 1;
    let ow = (in_w + 2 * padding - f_w) / stride + 1;
    let mut out = vec![0i64; oh * ow * c_o];
    for orow in 0..oh {
        for ocol in 0..ow {
            for o in 0..c_o {
                let mut acc: i128 = layer.bias[o] as i128;
                for kr in 0..f_h {
                    for kc in 0..f_w {
                        for ch in 0..f_c {
                            let ir = (orow * stride + kr) as isize - padding as isize;
                            let ic = (ocol * stride + kc) as isize - padding as isize;
                            if ir < 0 || ic < 0 || ir as usize >= in_h || ic as usize >= in_w {
                                continue;
                            }
                            let x = input[(ir as usize * in_w + ic as usize) * in_c + ch];
                            let w = dense[((o * f_h + kr) * f_w + kc) * f_c + ch];
                            acc += w as i128 * x as i128;
                        }
                    }
                }
                out[(orow * ow + ocol) * c_o + o] = to_i64(acc)?;
            }
        }
    }
    Ok(out)
}

pub fn relu_plain(input: &[i64]) -> Vec<i64> {
    input.iter().map(|&x| x.max(0)).collect()
}

pub fn maxpool_plain(
    input: &[i64],
    shape: &Shape,
    window: usize,
    stride: usize,
) -> Result<Vec<i64>> {
    let Shape::Hwc { h, w, c } = *shape else {
        return Err(Error::Shape("maxpool needs a 3-d input".into()));
    };
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = vec![i64::MIN; oh * ow * c];
    for orow in 0..oh {
        for ocol in 0..ow {
            for ch in 0..c {
                let mut best = i64::MIN;
                for kr in 0..window {
                    for kc in 0..window {
                        let v = input[((orow * stride + kr) * w + ocol * stride + kc) * c + ch];
                        best = best.max(v);
                    }
                }
                out[(orow * ow + ocol) * c + ch] = best;
            }
        }
    }
    Ok(out)
}

/// Evaluate the whole model in the integer domain, returning the logits with
/// their cumulative scale.
pub fn eval_model(model: &Model, input: &PlainTensor) -> Result<PlainTensor> {
    if input.shape != model.input_shape {
        return Err(Error::Shape(format!(
            "model expects {:?}, got {:?}",
            model.input_shape, input.shape
        )));
    }
    let mut values = input.values.clone();
    let mut shape = input.shape.clone();
    let mut scale = input.scale_exp;
    for layer in &model.layers {
        match layer.spec {
            LayerSpec::Fc { .. } => values = eval_fc_plain(layer, &values)?,
            LayerSpec::Conv { .. } => values = eval_conv_plain(layer, &values)?,
            LayerSpec::Relu => values = relu_plain(&values),
            LayerSpec::MaxPool { window, stride } => {
                values = maxpool_plain(&values, &shape, window, stride)?
            }
            LayerSpec::Flatten => {}
        }
        scale += model.layer_weight_scale(layer);
        shape = layer.spec.output_shape(&shape)?;
    }
    PlainTensor::new(shape, values, scale)
}

/// Largest |value| any intermediate activation reaches; used by tests to
/// keep fixtures inside codec bounds.
pub fn peak_magnitude(model: &Model, input: &PlainTensor) -> Result<u128> {
    let mut values = input.values.clone();
    let mut shape = input.shape.clone();
    let mut peak = values.iter().map(|v| v.unsigned_abs() as u128).max().unwrap_or(0);
    for layer in &model.layers {
        match layer.spec {
            LayerSpec::Fc { .. } => values = eval_fc_plain(layer, &values)?,
            LayerSpec::Conv { .. } => values = eval_conv_plain(layer, &values)?,
            LayerSpec::Relu => values = relu_plain(&values),
            LayerSpec::MaxPool { window, stride } => {
                values = maxpool_plain(&values, &shape, window, stride)?
            }
            LayerSpec::Flatten => {}
        }
        shape = layer.spec.output_shape(&shape)?;
        peak = peak.max(values.iter().map(|v| v.unsigned_abs() as u128).max().unwrap_or(0));
    }
    Ok(peak)
}

/// Sanity check used by tests: every compressed variant of the same layer
/// must agree with its own dense expansion, exactly.
pub fn weights_self_consistent(layer: &Layer, input: &[i64]) -> Result<bool> {
    let Some(weights) = &layer.weights else {
        return Ok(true);
    };
    let dense_layer = Layer {
        spec: layer.spec.clone(),
        weights: Some(CompressedWeights::DenseInt(
            weights.to_dense(layer.spec.weight_count()),
        )),
        bias: layer.bias.clone(),
    };
    let (a, b) = match layer.spec {
        LayerSpec::Fc { .. } => (
            eval_fc_plain(layer, input)?,
            eval_fc_plain(&dense_layer, input)?,
        ),
        LayerSpec::Conv { .. } => (
            eval_conv_plain(layer, input)?,
            eval_conv_plain(&dense_layer, input)?,
        ),
        _ => return Ok(true),
    };
    Ok(a == b)
}
