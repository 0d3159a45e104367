//! Layer descriptions and the forward dispatch over tensor primitives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d,
    Relu,
    Maxpool2x2,
    BilinearUpsample,
    Linear,
    GlobalAvgPool,
}

/// Static description of one layer. Spatial fields are meaningful only for
/// the kinds that use them: `kernel`/`stride`/`padding` for conv2d, `stride`
/// as the integer scale factor for bilinear_upsample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub prunable: bool,
}

impl LayerSpec {
    pub fn conv2d(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize, prunable: bool) -> Self {
        LayerSpec {
            kind: LayerKind::Conv2d,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            prunable,
        }
    }

    pub fn relu(channels: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Relu,
            in_channels: channels,
            out_channels: channels,
            kernel: 1,
            stride: 1,
            padding: 0,
            prunable: false,
        }
    }

    pub fn maxpool2x2(channels: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Maxpool2x2,
            in_channels: channels,
            out_channels: channels,
            kernel: 2,
            stride: 2,
            padding: 0,
            prunable: false,
        }
    }

    pub fn bilinear_upsample(channels: usize, scale: usize) -> Self {
        LayerSpec {
            kind: LayerKind::BilinearUpsample,
            in_channels: channels,
            out_channels: channels,
            kernel: 1,
            stride: scale,
            padding: 0,
            prunable: false,
        }
    }

    pub fn linear(in_features: usize, out_features: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Linear,
            in_channels: in_features,
            out_channels: out_features,
            kernel: 1,
            stride: 1,
            padding: 0,
            prunable: false,
        }
    }

    pub fn global_avg_pool(channels: usize) -> Self {
        LayerSpec {
            kind: LayerKind::GlobalAvgPool,
            in_channels: channels,
            out_channels: channels,
            kernel: 1,
            stride: 1,
            padding: 0,
            prunable: false,
        }
    }

    pub fn has_parameters(&self) -> bool {
        matches!(self.kind, LayerKind::Conv2d | LayerKind::Linear)
    }

    /// Weight shape, when the layer has one.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self.kind {
            LayerKind::Conv2d => Some(vec![
                self.out_channels,
                self.in_channels,
                self.kernel,
                self.kernel,
            ]),
            LayerKind::Linear => Some(vec![self.out_channels, self.in_channels]),
            _ => None,
        }
    }

    /// out·in·k² + out for parameterized layers (k = 1 for linear), 0 for the
    /// rest.
    pub fn param_count(&self) -> usize {
        match self.kind {
            LayerKind::Conv2d => {
                self.out_channels * self.in_channels * self.kernel * self.kernel
                    + self.out_channels
            }
            LayerKind::Linear => self.out_channels * self.in_channels + self.out_channels,
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prunable && self.kind != LayerKind::Conv2d {
            return Err(Error::InvalidParam {
                name: "prunable",
                detail: format!("only conv2d layers are prunable, got {:?}", self.kind),
            });
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidParam {
                name: "channels",
                detail: "channel counts must be at least 1".into(),
            });
        }
        match self.kind {
            LayerKind::Conv2d => {
                if self.kernel == 0 || self.stride == 0 {
                    return Err(Error::InvalidParam {
                        name: "conv2d geometry",
                        detail: "kernel and stride must be at least 1".into(),
                    });
                }
            }
            LayerKind::BilinearUpsample => {
                if self.stride < 1 {
                    return Err(Error::InvalidParam {
                        name: "upsample scale",
                        detail: "scale factor must be at least 1".into(),
                    });
                }
            }
            _ => {}
        }
        if !matches!(self.kind, LayerKind::Conv2d | LayerKind::Linear)
            && self.in_channels != self.out_channels
        {
            return Err(Error::InvalidParam {
                name: "channels",
                detail: format!("{:?} cannot change channel count", self.kind),
            });
        }
        Ok(())
    }

    /// Output shape for a given input shape, following standard
    /// conv/pool/upsample arithmetic.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() < 2 || input[1] != self.in_channels {
            return Err(Error::shape(
                "output_shape",
                format!(
                    "input {:?} does not provide {} channels for {:?}",
                    input, self.in_channels, self.kind
                ),
            ));
        }
        match self.kind {
            LayerKind::Conv2d => {
                if input.len() != 4 {
                    return Err(Error::shape("output_shape", format!("conv2d needs [N,C,H,W], got {input:?}")));
                }
                let span = |dim: usize| -> Result<usize> {
                    let padded = dim + 2 * self.padding;
                    if padded < self.kernel {
                        return Err(Error::shape(
                            "output_shape",
                            format!("kernel {} exceeds padded extent {padded}", self.kernel),
                        ));
                    }
                    Ok((padded - self.kernel) / self.stride + 1)
                };
                Ok(vec![input[0], self.out_channels, span(input[2])?, span(input[3])?])
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::Maxpool2x2 => {
                if input.len() != 4 || input[2] % 2 != 0 || input[3] % 2 != 0 {
                    return Err(Error::shape(
                        "output_shape",
                        format!("maxpool2x2 needs even [N,C,H,W], got {input:?}"),
                    ));
                }
                Ok(vec![input[0], input[1], input[2] / 2, input[3] / 2])
            }
            LayerKind::BilinearUpsample => {
                if input.len() != 4 {
                    return Err(Error::shape("output_shape", format!("upsample needs [N,C,H,W], got {input:?}")));
                }
                Ok(vec![input[0], input[1], input[2] * self.stride, input[3] * self.stride])
            }
            LayerKind::Linear => {
                if input.len() != 2 {
                    return Err(Error::shape("output_shape", format!("linear needs [N,F], got {input:?}")));
                }
                Ok(vec![input[0], self.out_channels])
            }
            LayerKind::GlobalAvgPool => {
                if input.len() != 4 {
                    return Err(Error::shape("output_shape", format!("global_avg_pool needs [N,C,H,W], got {input:?}")));
                }
                Ok(vec![input[0], input[1]])
            }
        }
    }
}

/// Run one layer. Weight and bias are required exactly for conv2d and linear.
/// Errors are re-anchored on `id` so a failure names the offending layer.
pub fn forward_layer<S: Scalar>(
    id: &str,
    spec: &LayerSpec,
    input: &Tensor<S>,
    weight: Option<&Tensor<S>>,
    bias: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    let run = || -> Result<Tensor<S>> {
        let shape = input.shape();
        let channel_axis_ok = match spec.kind {
            LayerKind::Linear => shape.len() == 2 && shape[1] == spec.in_channels,
            _ => shape.len() >= 2 && shape[1] == spec.in_channels,
        };
        if !channel_axis_ok {
            return Err(Error::shape(
                "forward",
                format!(
                    "input {:?} does not provide {} channels for {:?}",
                    shape, spec.in_channels, spec.kind
                ),
            ));
        }
        match spec.kind {
            LayerKind::Conv2d => {
                let (w, b) = require_params(spec, weight, bias)?;
                input.conv2d(w, b, spec.stride, spec.padding)
            }
            LayerKind::Relu => Ok(input.relu()),
            LayerKind::Maxpool2x2 => input.max_pool2x2(),
            LayerKind::BilinearUpsample => {
                input.bilinear_resize(shape[2] * spec.stride, shape[3] * spec.stride)
            }
            LayerKind::Linear => {
                let (w, b) = require_params(spec, weight, bias)?;
                input.linear(w, b)
            }
            LayerKind::GlobalAvgPool => input.global_avg_pool(),
        }
    };
    run().map_err(|e| e.in_layer(id))
}

fn require_params<'a, S: Scalar>(
    spec: &LayerSpec,
    weight: Option<&'a Tensor<S>>,
    bias: Option<&'a Tensor<S>>,
) -> Result<(&'a Tensor<S>, &'a Tensor<S>)> {
    match (weight, bias) {
        (Some(w), Some(b)) => Ok((w, b)),
        _ => Err(Error::shape(
            "forward",
            format!("{:?} layer is missing its weight or bias", spec.kind),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_names_serialize_in_snake_case() {
        let names: Vec<String> = [
            LayerKind::Conv2d,
            LayerKind::Relu,
            LayerKind::Maxpool2x2,
            LayerKind::BilinearUpsample,
            LayerKind::Linear,
            LayerKind::GlobalAvgPool,
        ]
        .iter()
        .map(|k| serde_json::to_string(k).unwrap())
        .collect();
        assert_eq!(
            names,
            vec![
                "\"conv2d\"",
                "\"relu\"",
                "\"maxpool2x2\"",
                "\"bilinear_upsample\"",
                "\"linear\"",
                "\"global_avg_pool\""
            ]
        );
    }

    #[test]
    fn prunable_restricted_to_conv() {
        let mut spec = LayerSpec::relu(8);
        spec.prunable = true;
        assert!(spec.validate().is_err());
        assert!(LayerSpec::conv2d(3, 16, 3, 2, 1, true).validate().is_ok());
    }

    #[test]
    fn param_count_formula() {
        assert_eq!(LayerSpec::conv2d(3, 16, 3, 2, 1, true).param_count(), 16 * 3 * 9 + 16);
        assert_eq!(LayerSpec::linear(64, 6).param_count(), 64 * 6 + 6);
        assert_eq!(LayerSpec::relu(64).param_count(), 0);
    }

    #[test]
    fn forward_layer_names_offender_on_mismatch() {
        let spec = LayerSpec::conv2d(3, 8, 3, 1, 1, true);
        let input = Tensor::<f64>::zeros(&[1, 4, 8, 8]);
        let w = Tensor::<f64>::zeros(&[8, 3, 3, 3]);
        let b = Tensor::<f64>::zeros(&[8]);
        let err = forward_layer("backbone.c1", &spec, &input, Some(&w), Some(&b)).unwrap_err();
        assert!(err.to_string().contains("backbone.c1"), "{err}");
    }

    #[test]
    fn upsample_doubles_spatial_extent() {
        let spec = LayerSpec::bilinear_upsample(2, 2);
        let input = Tensor::<f64>::filled(&[1, 2, 4, 4], 3.0);
        let out = forward_layer("da.u1", &spec, &input, None, None).unwrap();
        assert_eq!(out.shape(), vec![1, 2, 8, 8]);
        assert_eq!(out.value(), vec![3.0; 128]);
    }

    #[test]
    fn output_shape_matches_forward_for_reference_stages() {
        let conv = LayerSpec::conv2d(3, 16, 3, 2, 1, true);
        assert_eq!(conv.output_shape(&[8, 3, 64, 64]).unwrap(), vec![8, 16, 32, 32]);
        let gap = LayerSpec::global_avg_pool(64);
        assert_eq!(gap.output_shape(&[8, 64, 8, 8]).unwrap(), vec![8, 64]);
        let lin = LayerSpec::linear(64, 6);
        assert_eq!(lin.output_shape(&[8, 64]).unwrap(), vec![8, 6]);
    }
}
