//! Differentiable scalar criteria over model activations: logit, channel,
//! direction and inversion objectives, with analytic gradients with respect
//! to the targeted activation.

use ndarray::{Array1, Array3, ArrayD};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::models::ModelAdapter;

#[derive(Debug, Clone)]
enum ObjectiveKind {
    Logit {
        class: usize,
    },
    Channel {
        layer: String,
        channel: usize,
    },
    Direction {
        layer: String,
        /// Unit vector in the layer's channel space.
        vector: Array1<f64>,
    },
    Inversion {
        layer: String,
        /// Flattened reference activation captured at construction.
        reference: Array1<f64>,
        reference_norm: f64,
    },
}

/// Immutable optimization criterion; evaluation is read-only.
#[derive(Debug, Clone)]
pub struct Objective {
    kind: ObjectiveKind,
    descriptor: String,
}

/// L(x) = pre-softmax logit of the class, averaged over the batch.
pub fn logit_objective(class_index: usize) -> Objective {
    Objective {
        kind: ObjectiveKind::Logit { class: class_index },
        descriptor: format!("logit:{class_index}"),
    }
}

/// L(x) = spatial mean of one channel's activation map.
pub fn channel_objective(layer_id: impl Into<String>, channel_index: usize) -> Objective {
    let layer = layer_id.into();
    let descriptor = format!("channel:{layer}:{channel_index}");
    Objective {
        kind: ObjectiveKind::Channel {
            layer,
            channel: channel_index,
        },
        descriptor,
    }
}

/// L(x) = ⟨spatial-mean activation, v/‖v‖⟩; the direction is stored
/// normalized, so positive rescaling of `vector` leaves L unchanged.
pub fn direction_objective(layer_id: impl Into<String>, vector: &[f64]) -> Result<Objective> {
    let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::invalid_target(
            "direction vector must be nonzero and finite",
        ));
    }
    let layer = layer_id.into();
    let unit: Array1<f64> = vector.iter().map(|v| v / norm).collect();
    let descriptor = format!("direction:{layer}:#{}", short_hash(unit.as_slice().unwrap()));
    Ok(Objective {
        kind: ObjectiveKind::Direction {
            layer,
            vector: unit,
        },
        descriptor,
    })
}

/// L(x) = cosine similarity between the flattened activations of x and of a
/// reference image, captured once here.
pub fn inversion_objective(
    layer_id: impl Into<String>,
    reference_image: &Image,
    model: &dyn ModelAdapter,
) -> Result<Objective> {
    let layer = layer_id.into();
    let act = model.forward_activations(reference_image, &layer)?;
    let reference: Array1<f64> = act.iter().cloned().collect();
    let reference_norm = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    if reference_norm == 0.0 {
        return Err(Error::invalid_target(
            "reference activation is identically zero",
        ));
    }
    let descriptor = format!(
        "inversion:{layer}:#{}",
        short_hash(reference.as_slice().unwrap())
    );
    Ok(Objective {
        kind: ObjectiveKind::Inversion {
            layer,
            reference,
            reference_norm,
        },
        descriptor,
    })
}

fn short_hash(data: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for v in data {
        hasher.update(v.to_le_bytes());
    }
    let digest = hasher.finalize();
    digest[..4].iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-channel spatial mean of an activation ([K] passes through).
fn pooled(act: &ArrayD<f64>) -> Result<Array1<f64>> {
    match act.ndim() {
        1 => Ok(act
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned()),
        3 => {
            let a = act.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let (c, h, w) = a.dim();
            let denom = (h * w) as f64;
            Ok(Array1::from_shape_fn(c, |ch| {
                a.index_axis(ndarray::Axis(0), ch).sum() / denom
            }))
        }
        n => Err(Error::invalid_input(format!(
            "unsupported activation rank {n}"
        ))),
    }
}

/// Broadcast a per-channel gradient back over an activation's shape.
fn unpool_grad(act: &ArrayD<f64>, per_channel: &Array1<f64>) -> Result<ArrayD<f64>> {
    match act.ndim() {
        1 => Ok(per_channel.clone().into_dyn()),
        3 => {
            let a = act.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let (c, h, w) = a.dim();
            let denom = (h * w) as f64;
            Ok(
                Array3::from_shape_fn((c, h, w), |(ch, _, _)| per_channel[ch] / denom)
                    .into_dyn(),
            )
        }
        n => Err(Error::invalid_input(format!(
            "unsupported activation rank {n}"
        ))),
    }
}

impl Objective {
    /// Layer whose activation this objective reads ("logits" for logit
    /// objectives).
    pub fn layer_id(&self) -> &str {
        match &self.kind {
            ObjectiveKind::Logit { .. } => "logits",
            ObjectiveKind::Channel { layer, .. }
            | ObjectiveKind::Direction { layer, .. }
            | ObjectiveKind::Inversion { layer, .. } => layer,
        }
    }

    /// Stable textual form used in sidecars and fingerprints.
    pub fn descriptor(&self) -> &str {
        &self.descriptor
    }

    /// Validate the target against a concrete model.
    pub fn check_against(&self, model: &dyn ModelAdapter) -> Result<()> {
        let catalog = model.layer_catalog();
        let layer = self.layer_id();
        let info = catalog
            .iter()
            .find(|l| l.id == layer)
            .ok_or_else(|| Error::invalid_target(format!("model has no layer '{layer}'")))?;
        match &self.kind {
            ObjectiveKind::Logit { class } => {
                if *class >= model.class_count() {
                    return Err(Error::invalid_target(format!(
                        "class {class} out of range (model has {})",
                        model.class_count()
                    )));
                }
            }
            ObjectiveKind::Channel { channel, .. } => {
                if *channel >= info.channels {
                    return Err(Error::invalid_target(format!(
                        "channel {channel} out of range (layer has {})",
                        info.channels
                    )));
                }
            }
            ObjectiveKind::Direction { vector, .. } => {
                if vector.len() != info.channels {
                    return Err(Error::invalid_target(format!(
                        "direction length {} != layer channels {}",
                        vector.len(),
                        info.channels
                    )));
                }
            }
            ObjectiveKind::Inversion { .. } => {}
        }
        Ok(())
    }

    /// Objective value and its gradient with respect to the layer activation.
    pub fn value_and_activation_grad(&self, act: &ArrayD<f64>) -> Result<(f64, ArrayD<f64>)> {
        match &self.kind {
            ObjectiveKind::Logit { class } => {
                let a = act
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .map_err(|_| Error::invalid_input("logits must be 1-D"))?;
                if *class >= a.len() {
                    return Err(Error::invalid_target(format!(
                        "class {class} out of range (got {} logits)",
                        a.len()
                    )));
                }
                let mut g = Array1::<f64>::zeros(a.len());
                g[*class] = 1.0;
                Ok((a[*class], g.into_dyn()))
            }
            ObjectiveKind::Channel { channel, .. } => {
                let p = pooled(act)?;
                if *channel >= p.len() {
                    return Err(Error::invalid_target(format!(
                        "channel {channel} out of range (layer has {})",
                        p.len()
                    )));
                }
                let mut g = Array1::<f64>::zeros(p.len());
                g[*channel] = 1.0;
                Ok((p[*channel], unpool_grad(act, &g)?))
            }
            ObjectiveKind::Direction { vector, .. } => {
                let p = pooled(act)?;
                if p.len() != vector.len() {
                    return Err(Error::invalid_target(format!(
                        "direction length {} != layer channels {}",
                        vector.len(),
                        p.len()
                    )));
                }
                Ok((p.dot(vector), unpool_grad(act, vector)?))
            }
            ObjectiveKind::Inversion {
                reference,
                reference_norm,
                ..
            } => {
                let a: Array1<f64> = act.iter().cloned().collect();
                if a.len() != reference.len() {
                    return Err(Error::invalid_target(format!(
                        "activation length {} != reference length {}",
                        a.len(),
                        reference.len()
                    )));
                }
                let norm = a.dot(&a).sqrt();
                if norm == 0.0 {
                    // Cosine undefined at the origin; treat as flat zero.
                    return Ok((0.0, ArrayD::zeros(act.raw_dim())));
                }
                let denom = norm * reference_norm;
                let value = a.dot(reference) / denom;
                let grad_flat: Array1<f64> = (0..a.len())
                    .map(|i| reference[i] / denom - value * a[i] / (norm * norm))
                    .collect();
                Ok((
                    value,
                    grad_flat
                        .into_shape_with_order(act.raw_dim())
                        .expect("gradient reshape"),
                ))
            }
        }
    }

    /// Evaluate on one image.
    pub fn evaluate(&self, model: &dyn ModelAdapter, x: &Image) -> Result<f64> {
        self.check_against(model)?;
        let act = model.forward_activations(x, self.layer_id())?;
        Ok(self.value_and_activation_grad(&act)?.0)
    }

    /// Evaluate on a batch; the criterion is the mean over the batch.
    pub fn evaluate_batch(&self, model: &dyn ModelAdapter, batch: &[Image]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::invalid_input("empty batch"));
        }
        let mut sum = 0.0;
        for x in batch {
            sum += self.evaluate(model, x)?;
        }
        Ok(sum / batch.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::plugins::{IdentityModel, LinearModel};
    use crate::models::{ConvNet, ModelAdapter, NetSpec};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_net(seed: u64) -> ConvNet {
        // 8×8 input, three stride-2 stages, 10 classes.
        let spec = NetSpec {
            in_channels: 3,
            height: 8,
            width: 8,
            stages: vec![
                crate::models::ConvStageSpec { out_channels: 6, kernel: 3, stride: 2 },
                crate::models::ConvStageSpec { out_channels: 8, kernel: 3, stride: 2 },
                crate::models::ConvStageSpec { out_channels: 10, kernel: 3, stride: 2 },
            ],
            classes: 10,
        };
        ConvNet::init(spec, seed)
    }

    fn rand_image(c: usize, h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_shape_fn((c, h, w), |_| rng.gen())
    }

    #[test]
    fn linear_identity_model_reads_out_feature() {
        let model = LinearModel {
            weight: Array2::eye(2),
        };
        let x = Image::from_shape_vec((1, 1, 2), vec![3.0, 1.0]).unwrap();
        let obj = logit_objective(0);
        assert_eq!(obj.evaluate(&model, &x).unwrap(), 3.0);
    }

    #[test]
    fn batch_of_identical_images_equals_single_value() {
        let model = tiny_net(1);
        let x = rand_image(3, 8, 8, 2);
        let obj = logit_objective(4);
        let single = obj.evaluate(&model, &x).unwrap();
        let batch = obj.evaluate_batch(&model, &[x.clone(), x]).unwrap();
        assert!((single - batch).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_class_is_invalid_target() {
        let model = tiny_net(1);
        let x = rand_image(3, 8, 8, 3);
        assert!(matches!(
            logit_objective(99).evaluate(&model, &x),
            Err(Error::InvalidTarget(_))
        ));
    }

    #[test]
    fn unknown_layer_is_invalid_target() {
        let model = tiny_net(1);
        let x = rand_image(3, 8, 8, 4);
        assert!(matches!(
            channel_objective("conv9", 0).evaluate(&model, &x),
            Err(Error::InvalidTarget(_))
        ));
    }

    #[test]
    fn identity_layer_channel_objective_of_ones_is_one() {
        let model = IdentityModel {
            channels: 1,
            height: 4,
            width: 4,
        };
        let x = Image::from_elem((1, 4, 4), 1.0);
        let obj = channel_objective("input", 0);
        assert!((obj.evaluate(&model, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn channel_equals_one_hot_direction() {
        let model = tiny_net(5);
        let x = rand_image(3, 8, 8, 6);
        let ch = channel_objective("conv2", 3).evaluate(&model, &x).unwrap();
        let mut v = vec![0.0; 8];
        v[3] = 1.0;
        let dir = direction_objective("conv2", &v)
            .unwrap()
            .evaluate(&model, &x)
            .unwrap();
        assert!((ch - dir).abs() < 1e-12);
    }

    #[test]
    fn direction_is_scale_invariant() {
        let model = tiny_net(7);
        let x = rand_image(3, 8, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v: Vec<f64> = (0..8).map(|_| rng.gen::<f64>() - 0.5).collect();
        let base = direction_objective("conv2", &v).unwrap().evaluate(&model, &x).unwrap();
        for alpha in [2.0, 4.0, 0.5] {
            let scaled: Vec<f64> = v.iter().map(|a| a * alpha).collect();
            let l = direction_objective("conv2", &scaled)
                .unwrap()
                .evaluate(&model, &x)
                .unwrap();
            // Power-of-two gains rescale exactly.
            assert_eq!(base, l);
        }
        let scaled: Vec<f64> = v.iter().map(|a| a * 3.7).collect();
        let l = direction_objective("conv2", &scaled)
            .unwrap()
            .evaluate(&model, &x)
            .unwrap();
        assert!((base - l).abs() < 1e-12);
    }

    #[test]
    fn zero_direction_is_invalid_target() {
        assert!(direction_objective("conv1", &[0.0, 0.0]).is_err());
    }

    #[test]
    fn inversion_attains_one_at_reference() {
        let model = tiny_net(11);
        let reference = rand_image(3, 8, 8, 12);
        let obj = inversion_objective("conv3", &reference, &model).unwrap();
        let l = obj.evaluate(&model, &reference).unwrap();
        assert!((l - 1.0).abs() < 1e-6);
    }

    #[test]
    fn inversion_zero_for_orthogonal_activations() {
        // Two-unit identity layer lets us stage exact orthogonality.
        let model = IdentityModel {
            channels: 2,
            height: 1,
            width: 1,
        };
        let reference = Image::from_shape_vec((2, 1, 1), vec![1.0, 0.0]).unwrap();
        let other = Image::from_shape_vec((2, 1, 1), vec![0.0, 1.0]).unwrap();
        let obj = inversion_objective("input", &reference, &model).unwrap();
        assert!(obj.evaluate(&model, &other).unwrap().abs() < 1e-12);
    }

    #[test]
    fn inversion_invariant_to_positive_activation_rescale() {
        let model = IdentityModel {
            channels: 3,
            height: 2,
            width: 2,
        };
        let reference = rand_image(3, 2, 2, 13);
        let x = rand_image(3, 2, 2, 14);
        let obj = inversion_objective("input", &reference, &model).unwrap();
        let l1 = obj.evaluate(&model, &x).unwrap();
        let l2 = obj.evaluate(&model, &x.mapv(|v| v * 2.0)).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
    }

    /// Central finite differences at step 1e−3 for each objective kind.
    #[test]
    fn input_gradients_match_finite_differences() {
        let model = tiny_net(15);
        let x = rand_image(3, 8, 8, 16);
        let reference = rand_image(3, 8, 8, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let v: Vec<f64> = (0..8).map(|_| rng.gen::<f64>() - 0.5).collect();
        let objectives = vec![
            logit_objective(2),
            channel_objective("conv2", 1),
            direction_objective("conv2", &v).unwrap(),
            inversion_objective("conv3", &reference, &model).unwrap(),
        ];
        for obj in &objectives {
            let (_, grad) =
                crate::models::objective_input_gradient(&model, obj, &x).unwrap();
            let step = 1e-3;
            let mut checked = 0usize;
            let mut probe_rng = ChaCha8Rng::seed_from_u64(19);
            let mut x_mut = x.clone();
            while checked < 12 {
                let c = probe_rng.gen_range(0..3);
                let i = probe_rng.gen_range(0..8);
                let j = probe_rng.gen_range(0..8);
                let orig = x_mut[[c, i, j]];
                x_mut[[c, i, j]] = orig + step;
                let up = obj.evaluate(&model, &x_mut).unwrap();
                x_mut[[c, i, j]] = orig - step;
                let dn = obj.evaluate(&model, &x_mut).unwrap();
                x_mut[[c, i, j]] = orig;
                let fd = (up - dn) / (2.0 * step);
                let an = grad[[c, i, j]];
                if fd.abs() < 1e-8 && an.abs() < 1e-8 {
                    checked += 1;
                    continue;
                }
                let rel = (fd - an).abs() / fd.abs().max(an.abs());
                assert!(
                    rel < 1e-3,
                    "{}: pixel ({c},{i},{j}) fd {fd} vs analytic {an} (rel {rel})",
                    obj.descriptor()
                );
                checked += 1;
            }
        }
    }

    #[test]
    fn constant_objective_has_zero_gradient() {
        let model = crate::models::plugins::ZeroModel {
            channels: 3,
            height: 8,
            width: 8,
            classes: 10,
        };
        let x = rand_image(3, 8, 8, 20);
        let (value, grad) =
            crate::models::objective_input_gradient(&model, &logit_objective(0), &x).unwrap();
        assert_eq!(value, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }
}
