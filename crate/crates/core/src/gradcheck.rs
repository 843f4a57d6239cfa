//! Central finite-difference checks of the full model backward pass.
//!
//! The scalar objective is `L = Σ R ⊙ features` for a fixed weight matrix `R`,
//! so `∂L/∂features = R`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CurateError, Result};
use crate::tensor::{fd_gradient_at, max_relative_error, Tensor};
use crate::vit::{encode_batch, model_backward, model_forward_traced, ModelParams, ViTConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor of the relative error. Some gradients are identically
    /// zero (a bias feeding a normalization, the key bias of attention); there
    /// the central difference is pure roundoff, around 1e-10 at the default
    /// step.
    pub floor: f64,
    /// Coordinates checked per parameter tensor; 0 checks all.
    pub per_tensor: usize,
    /// Coordinates checked in the input; 0 checks all.
    pub input_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            floor: 1e-5,
            per_tensor: 64,
            input_coords: 1024,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
}

fn objective(features: &Tensor, weights: &Tensor) -> f64 {
    features.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

fn coords(len: usize, wanted: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if wanted == 0 || wanted >= len {
        return (0..len).collect();
    }
    let mut picked = sample(rng, len, wanted).into_vec();
    picked.sort_unstable();
    picked
}

/// Adds `U(−scale, scale)` noise to every parameter so that biases, norm
/// affines and embeddings all carry nontrivial values.
pub fn perturb_params(params: &mut ModelParams, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in params.named_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

/// Compares analytic input and parameter gradients against central
/// differences at sampled coordinates.
pub fn check_model_gradients(
    config: &ViTConfig,
    params: &ModelParams,
    images: &Tensor,
    weights: &Tensor,
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (features, trace) = model_forward_traced(images, config, params)?;
    if features.shape() != weights.shape() {
        return Err(CurateError::Dimension(format!(
            "weights {:?} do not match features {:?}",
            weights.shape(),
            features.shape()
        )));
    }
    let (d_image, grads) = model_backward(config, params, &trace, weights)?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut tensors = Vec::new();

    let picks = coords(images.len(), options.input_coords, &mut rng);
    let numeric = fd_gradient_at(
        |x| encode_batch(x, config, params).map_or(f64::NAN, |f| objective(&f, weights)),
        images,
        options.step,
        &picks,
    )?;
    let analytic: Vec<f64> = picks.iter().map(|&i| d_image.data()[i]).collect();
    tensors.push(TensorCheck {
        name: "input".into(),
        checked: picks.len(),
        max_rel_error: max_relative_error(&analytic, &numeric, options.floor),
    });

    let grad_named = grads.named();
    for (index, (name, tensor)) in params.named().into_iter().enumerate() {
        let picks = coords(tensor.len(), options.per_tensor, &mut rng);
        let numeric = fd_gradient_at(
            |t| {
                let mut probe = params.clone();
                *probe.named_mut().swap_remove(index).1 = t.clone();
                encode_batch(images, config, &probe).map_or(f64::NAN, |f| objective(&f, weights))
            },
            tensor,
            options.step,
            &picks,
        )?;
        let grad = grad_named[index].1;
        let analytic: Vec<f64> = picks.iter().map(|&i| grad.data()[i]).collect();
        tensors.push(TensorCheck {
            name,
            checked: picks.len(),
            max_rel_error: max_relative_error(&analytic, &numeric, options.floor),
        });
    }
    if tensors.iter().any(|t| t.max_rel_error.is_nan()) {
        return Err(CurateError::DegenerateFeature("objective evaluated to NaN".into()));
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { tensors, max_rel_error })
}
