//! Layer-list syntax and the architecture presets used by the experiments.
//!
//! A layer list is a whitespace- or comma-separated sequence of items:
//! `ttn:OUT`, `dense:OUT`, `conv:OUT:K:S:P`, `deconv:OUT:K:S:P`, `relu`,
//! `sigmoid`, `identity`, `flatten`, `to_channels`, `reshape:AxBxC`.

use htn_core::layers::{Activation, ConvGeometry, InputSpec, LayerError, LayerSpec, ModelSpec};
use thiserror::Error;

use crate::config::{AutoencodeConfig, Decoder, Family};

#[derive(Debug, Error, PartialEq)]
pub enum ArchError {
    #[error("layer item `{item}`: {message}")]
    Item { item: String, message: String },
}

fn item_err(item: &str, message: &str) -> ArchError {
    ArchError::Item { item: item.into(), message: message.into() }
}

fn numbers(item: &str, args: &[&str], expected: usize) -> Result<Vec<usize>, ArchError> {
    if args.len() != expected {
        return Err(item_err(item, &format!("expected {expected} numeric argument(s)")));
    }
    args.iter()
        .map(|a| match a.parse::<usize>() {
            Ok(n) if n > 0 || expected == 4 => Ok(n),
            _ => Err(item_err(item, &format!("`{a}` is not a positive integer"))),
        })
        .collect()
}

pub fn parse_layer(item: &str) -> Result<LayerSpec, ArchError> {
    let mut parts = item.split(':');
    let name = parts.next().unwrap_or("");
    let args: Vec<&str> = parts.collect();
    let conv = |args: &[&str]| -> Result<(usize, ConvGeometry), ArchError> {
        let n = numbers(item, args, 4)?;
        if n[0] == 0 || n[1] == 0 || n[2] == 0 {
            return Err(item_err(item, "channels, kernel and stride must be positive"));
        }
        Ok((n[0], ConvGeometry::square(n[1], n[2], n[3])))
    };
    let bare = |spec: LayerSpec| if args.is_empty() { Ok(spec) } else { Err(item_err(item, "takes no arguments")) };
    match name {
        "ttn" => Ok(LayerSpec::Ttn { out_dim: numbers(item, &args, 1)?[0] }),
        "dense" => Ok(LayerSpec::Dense { out_features: numbers(item, &args, 1)?[0] }),
        "conv" => conv(&args).map(|(out_channels, geometry)| LayerSpec::Conv2d { out_channels, geometry }),
        "deconv" => conv(&args).map(|(out_channels, geometry)| LayerSpec::Deconv2d { out_channels, geometry }),
        "relu" => bare(LayerSpec::Activation { function: Activation::Relu }),
        "sigmoid" => bare(LayerSpec::Activation { function: Activation::Sigmoid }),
        "identity" => bare(LayerSpec::Activation { function: Activation::Identity }),
        "flatten" => bare(LayerSpec::Flatten),
        "to_channels" => bare(LayerSpec::ToChannels),
        "reshape" => {
            let [dims] = args.as_slice() else { return Err(item_err(item, "expected reshape:AxBxC")) };
            let shape = dims
                .split('x')
                .map(|d| d.parse::<usize>().ok().filter(|&n| n > 0))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| item_err(item, "expected reshape:AxBxC"))?;
            Ok(LayerSpec::Reshape { shape })
        }
        _ => Err(item_err(item, "unknown layer")),
    }
}

pub fn parse_layers(text: &str) -> Result<Vec<LayerSpec>, ArchError> {
    text.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).map(parse_layer).collect()
}

/// Inverse of [`parse_layer`].
pub fn format_layer(layer: &LayerSpec) -> String {
    match layer {
        LayerSpec::Ttn { out_dim } => format!("ttn:{out_dim}"),
        LayerSpec::Dense { out_features } => format!("dense:{out_features}"),
        LayerSpec::Conv2d { out_channels, geometry: g } => {
            format!("conv:{out_channels}:{}:{}:{}", g.kernel_h, g.stride, g.padding)
        }
        LayerSpec::Deconv2d { out_channels, geometry: g } => {
            format!("deconv:{out_channels}:{}:{}:{}", g.kernel_h, g.stride, g.padding)
        }
        LayerSpec::Activation { function } => match function {
            Activation::Relu => "relu".into(),
            Activation::Sigmoid => "sigmoid".into(),
            Activation::Identity => "identity".into(),
        },
        LayerSpec::Flatten => "flatten".into(),
        LayerSpec::ToChannels => "to_channels".into(),
        LayerSpec::Reshape { shape } => {
            format!("reshape:{}", shape.iter().map(ToString::to_string).collect::<Vec<_>>().join("x"))
        }
    }
}

pub fn format_layers(layers: &[LayerSpec]) -> String {
    layers.iter().map(format_layer).collect::<Vec<_>>().join(" ")
}

/// Sizes tried by the regression sweep when the config gives none.
pub fn default_sweep(family: Family) -> Vec<usize> {
    match family {
        Family::Htn => vec![2, 4, 8, 16, 32, 64],
        Family::Fcn => vec![2, 4, 8, 16, 32, 64],
        Family::Ttn => vec![1, 2, 3, 4, 5, 6],
        Family::Cnn => vec![1, 2, 4, 8, 16, 32],
    }
}

const SIDE: usize = 32;

/// Scalar-output regression model of `family` at sweep size `size`.
///
/// * `htn`: two tree layers (bond `htn_bond`, then 1) to an 8×8 grid, then a
///   hidden dense layer of width `size`.
/// * `fcn`: one hidden dense layer of width `size` on the raw pixels.
/// * `ttn`: five tree layers of bond `size` down to a single site.
/// * `cnn`: two stride-2 5×5 convolutions with `size` channels, then a dense
///   readout.
pub fn regression_spec(family: Family, size: usize, d: usize, htn_bond: usize) -> Result<ModelSpec, LayerError> {
    let relu = LayerSpec::Activation { function: Activation::Relu };
    let product = InputSpec::ProductState { height: SIDE, width: SIDE, d };
    let image = InputSpec::Image { channels: 1, height: SIDE, width: SIDE };
    match family {
        Family::Htn => ModelSpec::new(
            product,
            vec![
                LayerSpec::Ttn { out_dim: htn_bond },
                LayerSpec::Ttn { out_dim: 1 },
                LayerSpec::Flatten,
                LayerSpec::Dense { out_features: size },
                relu,
                LayerSpec::Dense { out_features: 1 },
            ],
        ),
        Family::Fcn => ModelSpec::new(
            image,
            vec![LayerSpec::Flatten, LayerSpec::Dense { out_features: size }, relu, LayerSpec::Dense { out_features: 1 }],
        ),
        Family::Ttn => {
            let mut layers = vec![LayerSpec::Ttn { out_dim: size }; 4];
            layers.push(LayerSpec::Ttn { out_dim: 1 });
            layers.push(LayerSpec::Flatten);
            ModelSpec::new(product, layers)
        }
        Family::Cnn => {
            let g = ConvGeometry::square(5, 2, 2);
            ModelSpec::new(
                image,
                vec![
                    LayerSpec::Conv2d { out_channels: size, geometry: g },
                    relu.clone(),
                    LayerSpec::Conv2d { out_channels: size, geometry: g },
                    relu,
                    LayerSpec::Flatten,
                    LayerSpec::Dense { out_features: 1 },
                ],
            )
        }
    }
}

/// Tree-layer encoder down to a `bottleneck`×`bottleneck` grid of scalars,
/// followed by the configured decoder back to `[1, 32, 32]` in `[0, 1]`.
pub fn autoencoder_spec(cfg: &AutoencodeConfig, d: usize) -> Result<ModelSpec, LayerError> {
    let stages = (SIDE / cfg.bottleneck).trailing_zeros() as usize;
    let mut layers = vec![LayerSpec::Ttn { out_dim: cfg.bond }; stages - 1];
    layers.push(LayerSpec::Ttn { out_dim: 1 });
    match cfg.decoder {
        Decoder::Deconv => {
            layers.push(LayerSpec::ToChannels);
            let up = ConvGeometry::square(4, 2, 1);
            for stage in 0..stages {
                let last = stage + 1 == stages;
                layers.push(LayerSpec::Deconv2d { out_channels: if last { 1 } else { cfg.channels }, geometry: up });
                if !last {
                    layers.push(LayerSpec::Activation { function: Activation::Relu });
                }
            }
        }
        Decoder::Dense => {
            layers.push(LayerSpec::Flatten);
            layers.push(LayerSpec::Dense { out_features: SIDE * SIDE });
            layers.push(LayerSpec::Reshape { shape: vec![1, SIDE, SIDE] });
        }
    }
    layers.push(LayerSpec::Activation { function: Activation::Sigmoid });
    ModelSpec::new(InputSpec::ProductState { height: SIDE, width: SIDE, d }, layers)
}

/// Number of scalars at the encoder output.
pub fn bottleneck_len(cfg: &AutoencodeConfig) -> usize {
    cfg.bottleneck * cfg.bottleneck
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DEFAULT_LAYERS;

    #[test]
    fn grammar_roundtrips() {
        let text = "ttn:4 ttn:1 flatten dense:256 relu conv:3:5:2:2 deconv:1:4:2:1 sigmoid identity to_channels reshape:4x4x4";
        let layers = parse_layers(text).unwrap();
        assert_eq!(format_layers(&layers), text);
        assert_eq!(parse_layers("ttn:4,ttn:1, flatten").unwrap().len(), 3);
    }

    #[test]
    fn grammar_errors() {
        for bad in ["ttn", "ttn:0", "ttn:a", "dense:1:2", "conv:1:2:3", "relu:1", "reshape:4y4", "pool:2"] {
            assert!(parse_layer(bad).is_err(), "{bad}");
        }
        assert!(parse_layer("conv:1:3:1:0").is_ok());
    }

    #[test]
    fn default_classifier_shapes() {
        let spec = ModelSpec::new(
            InputSpec::ProductState { height: 32, width: 32, d: 2 },
            parse_layers(DEFAULT_LAYERS).unwrap(),
        )
        .unwrap();
        let shapes = spec.shapes().unwrap();
        assert_eq!(shapes[1], vec![16, 16, 4]);
        assert_eq!(shapes[2], vec![8, 8, 1]);
        assert_eq!(shapes[3], vec![64]);
        assert_eq!(spec.output_shape(), vec![10]);
    }

    #[test]
    fn autoencoder_presets() {
        for (b, tree_layers) in [(8, 2), (4, 3), (2, 4)] {
            for decoder in [Decoder::Deconv, Decoder::Dense] {
                let cfg = AutoencodeConfig { bottleneck: b, bond: 4, decoder, channels: 8 };
                let spec = autoencoder_spec(&cfg, 2).unwrap();
                assert_eq!(spec.output_shape(), vec![1, 32, 32]);
                let ttn = spec.layers().iter().filter(|l| matches!(l, LayerSpec::Ttn { .. })).count();
                assert_eq!(ttn, tree_layers);
                let shapes = spec.shapes().unwrap();
                assert_eq!(shapes[tree_layers], vec![b, b, 1]);
            }
        }
    }

    #[test]
    fn regression_families_output_a_scalar() {
        for family in Family::ALL {
            for &size in &default_sweep(family) {
                let spec = regression_spec(family, size, 2, 2).unwrap();
                assert_eq!(spec.output_shape(), vec![1], "{family:?} {size}");
            }
        }
    }
}
