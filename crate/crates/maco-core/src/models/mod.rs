//! The differentiable-model contract, the trainable desk-scale classifier,
//! the synthetic shapes testbed and built-in plugins.

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::objectives::Objective;

pub mod container;
pub mod net;
pub mod plugins;
pub mod shapes;

pub use net::{train, ConvNet, ConvStageSpec, NetSpec, TrainConfig, TrainedModel};
pub use plugins::load_external_model;
pub use shapes::{generate_shapes_dataset, ShapesDataset, SHAPE_CLASS_NAMES};

/// Whether an adapter tolerates concurrent read-only use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Concurrency {
    ConcurrentReadSafe,
    Exclusive,
}

#[derive(Debug, Clone)]
pub struct LayerInfo {
    pub id: String,
    pub channels: usize,
}

/// Forward-to-named-layer and input-gradient contract for a differentiable
/// classifier. Inference must be deterministic; `logits` is always an
/// addressable layer.
pub trait ModelAdapter: Send + Sync {
    /// (channels, height, width) of a valid input.
    fn input_size(&self) -> (usize, usize, usize);

    fn class_count(&self) -> usize;

    fn layer_catalog(&self) -> Vec<LayerInfo>;

    fn concurrency(&self) -> Concurrency {
        Concurrency::ConcurrentReadSafe
    }

    /// Activation of the named layer: `[K]` for vector layers, `[C, h, w]`
    /// for spatial ones.
    fn forward_activations(&self, x: &Image, layer: &str) -> Result<ArrayD<f64>>;

    /// One forward pass to `layer`, then reverse mode back to the input.
    /// `grad_fn` maps the layer activation to the scalar value and its
    /// gradient with respect to that activation.
    fn value_and_input_gradient(
        &self,
        x: &Image,
        layer: &str,
        grad_fn: &mut dyn FnMut(&ArrayD<f64>) -> Result<(f64, ArrayD<f64>)>,
    ) -> Result<(f64, Image)>;
}

impl ModelAdapter for ConvNet {
    fn input_size(&self) -> (usize, usize, usize) {
        (self.spec.in_channels, self.spec.height, self.spec.width)
    }

    fn class_count(&self) -> usize {
        self.spec.classes
    }

    fn layer_catalog(&self) -> Vec<LayerInfo> {
        self.layer_ids()
            .into_iter()
            .map(|(id, channels)| LayerInfo { id, channels })
            .collect()
    }

    fn forward_activations(&self, x: &Image, layer: &str) -> Result<ArrayD<f64>> {
        let cache = self.forward(x)?;
        self.activation(&cache, layer)
    }

    fn value_and_input_gradient(
        &self,
        x: &Image,
        layer: &str,
        grad_fn: &mut dyn FnMut(&ArrayD<f64>) -> Result<(f64, ArrayD<f64>)>,
    ) -> Result<(f64, Image)> {
        let cache = self.forward(x)?;
        let act = self.activation(&cache, layer)?;
        let (value, grad_act) = grad_fn(&act)?;
        let grad = self.backward_to_input(&cache, layer, &grad_act)?;
        Ok((value, grad))
    }
}

/// Exact reverse-mode gradient of the scalar objective with respect to the
/// input, plus the objective value at `x`.
pub fn objective_input_gradient(
    model: &dyn ModelAdapter,
    objective: &Objective,
    x: &Image,
) -> Result<(f64, Image)> {
    objective.check_against(model)?;
    let mut grad_fn =
        |act: &ArrayD<f64>| -> Result<(f64, ArrayD<f64>)> { objective.value_and_activation_grad(act) };
    let (value, grad) = model.value_and_input_gradient(x, objective.layer_id(), &mut grad_fn)?;
    if !value.is_finite() {
        return Err(Error::numeric(0, "non-finite objective value"));
    }
    Ok((value, grad))
}

/// Train the default reference classifier on the dataset with the standard
/// budget semantics: 20% held out, 0.80 accuracy floor (skipped for zero
/// epochs).
pub fn train_reference(seed: u64, dataset: &ShapesDataset, epochs: usize) -> Result<TrainedModel> {
    let spec = NetSpec::reference(dataset.size, dataset.size);
    net::train(spec, dataset, &TrainConfig::new(seed, epochs))
}
