//! Built-in model plugins: degenerate adapters for tests and tooling, plus
//! loading of serialized reference classifiers.

use ndarray::{Array1, Array2, ArrayD};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{image_shape, Image};
use crate::models::{container, Concurrency, LayerInfo, ModelAdapter};

/// Every activation is zero; gradients vanish. Useful as the
/// constant-objective probe.
pub struct ZeroModel {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

impl ModelAdapter for ZeroModel {
    fn input_size(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    fn class_count(&self) -> usize {
        self.classes
    }

    fn layer_catalog(&self) -> Vec<LayerInfo> {
        vec![LayerInfo {
            id: "logits".to_string(),
            channels: self.classes,
        }]
    }

    fn forward_activations(&self, x: &Image, layer: &str) -> Result<ArrayD<f64>> {
        check_input(self, x)?;
        check_layer(self, layer)?;
        Ok(Array1::<f64>::zeros(self.classes).into_dyn())
    }

    fn value_and_input_gradient(
        &self,
        x: &Image,
        layer: &str,
        grad_fn: &mut dyn FnMut(&ArrayD<f64>) -> Result<(f64, ArrayD<f64>)>,
    ) -> Result<(f64, Image)> {
        let act = self.forward_activations(x, layer)?;
        let (value, _) = grad_fn(&act)?;
        Ok((value, Image::zeros(x.dim())))
    }
}

/// Activations are the input itself (layer "input"); the logits are the
/// per-channel spatial means.
pub struct IdentityModel {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ModelAdapter for IdentityModel {
    fn input_size(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    fn class_count(&self) -> usize {
        self.channels
    }

    fn layer_catalog(&self) -> Vec<LayerInfo> {
        vec![
            LayerInfo {
                id: "input".to_string(),
                channels: self.channels,
            },
            LayerInfo {
                id: "logits".to_string(),
                channels: self.channels,
            },
        ]
    }

    fn forward_activations(&self, x: &Image, layer: &str) -> Result<ArrayD<f64>> {
        check_input(self, x)?;
        match layer {
            "input" => Ok(x.clone().into_dyn()),
            "logits" => {
                let (c, h, w) = image_shape(x);
                let denom = (h * w) as f64;
                Ok(Array1::from_shape_fn(c, |ch| {
                    x.index_axis(ndarray::Axis(0), ch).sum() / denom
                })
                .into_dyn())
            }
            _ => Err(unknown_layer(self, layer)),
        }
    }

    fn value_and_input_gradient(
        &self,
        x: &Image,
        layer: &str,
        grad_fn: &mut dyn FnMut(&ArrayD<f64>) -> Result<(f64, ArrayD<f64>)>,
    ) -> Result<(f64, Image)> {
        let act = self.forward_activations(x, layer)?;
        let (value, g) = grad_fn(&act)?;
        let grad = match layer {
            "input" => g
                .into_dimensionality::<ndarray::Ix3>()
                .map_err(|_| Error::invalid_input("gradient shape mismatch"))?,
            "logits" => {
                let (c, h, w) = image_shape(x);
                let g1 = g
                    .into_dimensionality::<ndarray::Ix1>()
                    .map_err(|_| Error::invalid_input("gradient shape mismatch"))?;
                let denom = (h * w) as f64;
                Image::from_shape_fn((c, h, w), |(ch, _, _)| g1[ch] / denom)
            }
            _ => return Err(unknown_layer(self, layer)),
        };
        Ok((value, grad))
    }
}

/// Linear readout of a flattened `[1, 1, d]` input: logits = W·x.
pub struct LinearModel {
    pub weight: Array2<f64>,
}

impl ModelAdapter for LinearModel {
    fn input_size(&self) -> (usize, usize, usize) {
        (1, 1, self.weight.dim().1)
    }

    fn class_count(&self) -> usize {
        self.weight.dim().0
    }

    fn layer_catalog(&self) -> Vec<LayerInfo> {
        vec![LayerInfo {
            id: "logits".to_string(),
            channels: self.weight.dim().0,
        }]
    }

    fn forward_activations(&self, x: &Image, layer: &str) -> Result<ArrayD<f64>> {
        check_input(self, x)?;
        check_layer(self, layer)?;
        let flat = Array1::from_iter(x.iter().cloned());
        Ok(self.weight.dot(&flat).into_dyn())
    }

    fn value_and_input_gradient(
        &self,
        x: &Image,
        layer: &str,
        grad_fn: &mut dyn FnMut(&ArrayD<f64>) -> Result<(f64, ArrayD<f64>)>,
    ) -> Result<(f64, Image)> {
        let act = self.forward_activations(x, layer)?;
        let (value, g) = grad_fn(&act)?;
        let g1 = g
            .into_dimensionality::<ndarray::Ix1>()
            .map_err(|_| Error::invalid_input("gradient shape mismatch"))?;
        let gx = self.weight.t().dot(&g1);
        let d = self.weight.dim().1;
        Ok((
            value,
            gx.into_shape_with_order((1, 1, d))
                .expect("gradient reshape"),
        ))
    }
}

/// Always emits the same one-hot logits regardless of input.
pub struct ConstantClassifier {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub fixed_class: usize,
}

impl ModelAdapter for ConstantClassifier {
    fn input_size(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    fn class_count(&self) -> usize {
        self.classes
    }

    fn layer_catalog(&self) -> Vec<LayerInfo> {
        vec![LayerInfo {
            id: "logits".to_string(),
            channels: self.classes,
        }]
    }

    fn forward_activations(&self, x: &Image, layer: &str) -> Result<ArrayD<f64>> {
        check_input(self, x)?;
        check_layer(self, layer)?;
        let mut logits = Array1::<f64>::zeros(self.classes);
        logits[self.fixed_class] = 1.0;
        Ok(logits.into_dyn())
    }

    fn value_and_input_gradient(
        &self,
        x: &Image,
        layer: &str,
        grad_fn: &mut dyn FnMut(&ArrayD<f64>) -> Result<(f64, ArrayD<f64>)>,
    ) -> Result<(f64, Image)> {
        let act = self.forward_activations(x, layer)?;
        let (value, _) = grad_fn(&act)?;
        Ok((value, Image::zeros(x.dim())))
    }
}

fn check_input(model: &dyn ModelAdapter, x: &Image) -> Result<()> {
    let (c, h, w) = model.input_size();
    if x.dim() != (c, h, w) {
        return Err(Error::invalid_input(format!(
            "input shape {:?} does not match model input ({c}, {h}, {w})",
            x.dim()
        )));
    }
    Ok(())
}

fn check_layer(model: &dyn ModelAdapter, layer: &str) -> Result<()> {
    if model.layer_catalog().iter().any(|l| l.id == layer) {
        Ok(())
    } else {
        Err(unknown_layer(model, layer))
    }
}

fn unknown_layer(model: &dyn ModelAdapter, layer: &str) -> Error {
    Error::invalid_target(format!(
        "unknown layer '{layer}'; known: {}",
        model
            .layer_catalog()
            .iter()
            .map(|l| l.id.clone())
            .collect::<Vec<_>>()
            .join(", ")
    ))
}

const AVAILABLE_PLUGINS: &str = "identity, reffile, zero";

/// Resolve a plugin descriptor of the form `<name>:<arg>`:
///
/// - `zero:<C>x<H>x<W>:<classes>` — the all-zero probe model,
/// - `identity:<C>x<H>x<W>` — the pass-through model,
/// - `reffile:<path>` — a serialized reference classifier.
pub fn load_external_model(descriptor: &str) -> Result<Box<dyn ModelAdapter>> {
    let (name, arg) = descriptor
        .split_once(':')
        .map(|(n, a)| (n, Some(a)))
        .unwrap_or((descriptor, None));
    match name {
        "zero" => {
            let arg = arg.ok_or_else(|| Error::invalid_input("zero plugin needs CxHxW:classes"))?;
            let (dims, classes) = arg
                .split_once(':')
                .ok_or_else(|| Error::invalid_input("zero plugin needs CxHxW:classes"))?;
            let (c, h, w) = parse_dims(dims)?;
            Ok(Box::new(ZeroModel {
                channels: c,
                height: h,
                width: w,
                classes: classes
                    .parse()
                    .map_err(|_| Error::invalid_input("bad class count"))?,
            }))
        }
        "identity" => {
            let arg = arg.ok_or_else(|| Error::invalid_input("identity plugin needs CxHxW"))?;
            let (c, h, w) = parse_dims(arg)?;
            Ok(Box::new(IdentityModel {
                channels: c,
                height: h,
                width: w,
            }))
        }
        "reffile" => {
            let path = arg.ok_or_else(|| Error::invalid_input("reffile plugin needs a path"))?;
            let net = container::load_model(Path::new(path))?;
            Ok(Box::new(net))
        }
        _ => Err(Error::UnsupportedModel {
            requested: descriptor.to_string(),
            available: AVAILABLE_PLUGINS.to_string(),
        }),
    }
}

fn parse_dims(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 3 {
        return Err(Error::invalid_input(format!("expected CxHxW, got '{s}'")));
    }
    let parse = |p: &str| -> Result<usize> {
        p.parse()
            .map_err(|_| Error::invalid_input(format!("bad dimension '{p}'")))
    };
    Ok((parse(parts[0])?, parse(parts[1])?, parse(parts[2])?))
}
