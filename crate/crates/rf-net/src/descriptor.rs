//! Patch descriptor network: a seven-layer convolutional stack producing
//! 128-dimensional unit-norm descriptors, plus the unit-descriptor distance
//! `d(x, y) = sqrt(2 - 2 x.y)` in scalar and batch form.

use crate::error::RfError;
use crate::geometry::PatchSpec;
use crate::tensor::ops::{add_scalar, clamp_min, l2_normalize, matmul_nt, relu, reshape, scale, sqrt};
use crate::tensor::{batch_norm, conv2d, instance_norm, BatchNormState, BnMode, Tensor};
use rand::Rng;
use std::sync::Mutex;

use crate::detector::xavier_uniform;

/// Descriptor length.
pub const DESCRIPTOR_DIM: usize = 128;
/// Input patch side.
pub const PATCH_SIZE: usize = 32;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const NORM_EPS: f64 = 1e-8;
/// Floor for squared distances before the square root; keeps the distance
/// gradient finite for coincident descriptors.
const DIST_FLOOR: f64 = 1e-12;

/// Per-layer geometry of the seven-convolution stack: 3x3 convolutions with
/// strides 1,1,2,1,2,1 followed by an 8x8 valid convolution onto 1x1x128.
/// Batch norm and ReLU follow layers 1-6; the output is L2 normalized.
#[derive(Debug, Clone)]
struct LayerShape {
    cout: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

/// Descriptor network parameters. `widths` are the channel counts of the
/// first six layers (the seventh is always [`DESCRIPTOR_DIM`]).
pub struct RfDesParams {
    pub widths: [usize; 6],
    conv_weights: Vec<Tensor>,
    conv_biases: Vec<Tensor>,
    bn_gammas: Vec<Tensor>,
    bn_betas: Vec<Tensor>,
    bn_states: Mutex<Vec<BatchNormState>>,
}

impl RfDesParams {
    pub const DEFAULT_WIDTHS: [usize; 6] = [32, 32, 64, 64, 128, 128];

    pub fn new(rng: &mut impl Rng) -> Self {
        Self::with_widths(Self::DEFAULT_WIDTHS, rng)
    }

    pub fn with_widths(widths: [usize; 6], rng: &mut impl Rng) -> Self {
        let shapes = Self::layer_shapes(&widths);
        let mut conv_weights = Vec::new();
        let mut conv_biases = Vec::new();
        let mut bn_gammas = Vec::new();
        let mut bn_betas = Vec::new();
        let mut bn_states = Vec::new();
        let mut cin = 1;
        for (i, s) in shapes.iter().enumerate() {
            let k2 = s.kernel * s.kernel;
            conv_weights.push(xavier_uniform(
                &[s.cout, cin, s.kernel, s.kernel],
                cin * k2,
                s.cout * k2,
                rng,
            ));
            conv_biases.push(Tensor::param(&[s.cout], vec![0.0; s.cout]));
            if i < 6 {
                bn_gammas.push(Tensor::param(&[s.cout], vec![1.0; s.cout]));
                bn_betas.push(Tensor::param(&[s.cout], vec![0.0; s.cout]));
                bn_states.push(BatchNormState::new(s.cout));
            }
            cin = s.cout;
        }
        RfDesParams {
            widths,
            conv_weights,
            conv_biases,
            bn_gammas,
            bn_betas,
            bn_states: Mutex::new(bn_states),
        }
    }

    fn layer_shapes(widths: &[usize; 6]) -> Vec<LayerShape> {
        vec![
            LayerShape { cout: widths[0], kernel: 3, stride: 1, pad: 1 },
            LayerShape { cout: widths[1], kernel: 3, stride: 1, pad: 1 },
            LayerShape { cout: widths[2], kernel: 3, stride: 2, pad: 1 },
            LayerShape { cout: widths[3], kernel: 3, stride: 1, pad: 1 },
            LayerShape { cout: widths[4], kernel: 3, stride: 2, pad: 1 },
            LayerShape { cout: widths[5], kernel: 3, stride: 1, pad: 1 },
            LayerShape { cout: DESCRIPTOR_DIM, kernel: 8, stride: 1, pad: 0 },
        ]
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for i in 0..7 {
            out.push((format!("des.conv{i}.weight"), self.conv_weights[i].clone()));
            out.push((format!("des.conv{i}.bias"), self.conv_biases[i].clone()));
            if i < 6 {
                out.push((format!("des.bn{i}.gamma"), self.bn_gammas[i].clone()));
                out.push((format!("des.bn{i}.beta"), self.bn_betas[i].clone()));
            }
        }
        out
    }

    /// Running batch-norm statistics, for checkpointing.
    pub fn bn_snapshot(&self) -> Vec<BatchNormState> {
        self.bn_states.lock().unwrap().clone()
    }

    pub fn restore_bn(&self, states: Vec<BatchNormState>) -> Result<(), RfError> {
        let mut guard = self.bn_states.lock().unwrap();
        if states.len() != guard.len() {
            return Err(RfError::Checkpoint(format!(
                "expected {} batch-norm states, found {}",
                guard.len(),
                states.len()
            )));
        }
        *guard = states;
        Ok(())
    }

    pub fn bn_initialized(&self) -> bool {
        self.bn_states.lock().unwrap().iter().all(|s| s.initialized())
    }
}

/// A batch of descriptors with the patch windows they came from.
pub struct DescriptorSet {
    /// `[K, 128]`, unit-norm rows.
    pub descriptors: Tensor,
    pub provenance: Vec<PatchSpec>,
}

impl DescriptorSet {
    pub fn new(descriptors: Tensor, provenance: Vec<PatchSpec>) -> Result<Self, RfError> {
        if descriptors.shape().len() != 2 || descriptors.shape()[1] != DESCRIPTOR_DIM {
            return Err(RfError::Descriptor(format!(
                "descriptor matrix must be K x {DESCRIPTOR_DIM}, got {:?}",
                descriptors.shape()
            )));
        }
        if descriptors.shape()[0] != provenance.len() {
            return Err(RfError::Descriptor(format!(
                "{} descriptors but {} provenance records",
                descriptors.shape()[0],
                provenance.len()
            )));
        }
        let d = descriptors.data();
        for k in 0..provenance.len() {
            let row = &d[k * DESCRIPTOR_DIM..(k + 1) * DESCRIPTOR_DIM];
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(RfError::Descriptor(format!(
                    "descriptor row {k} has norm {norm}, expected 1"
                )));
            }
        }
        drop(d);
        Ok(DescriptorSet { descriptors, provenance })
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    /// Plain copy of row `k`.
    pub fn row(&self, k: usize) -> Vec<f64> {
        let d = self.descriptors.data();
        d[k * DESCRIPTOR_DIM..(k + 1) * DESCRIPTOR_DIM].to_vec()
    }
}

/// Run the descriptor stack over a `[K, 1, 32, 32]` patch batch, yielding a
/// `[K, 128]` matrix of unit-norm descriptors. Patches are standardized
/// per patch first, so the descriptor is insensitive to affine illumination
/// changes of its input window.
pub fn describe(patches: &Tensor, params: &RfDesParams, mode: BnMode) -> Result<Tensor, RfError> {
    if patches.shape().len() != 4
        || patches.shape()[1] != 1
        || patches.shape()[2] != PATCH_SIZE
        || patches.shape()[3] != PATCH_SIZE
    {
        return Err(RfError::Shape(format!(
            "describe: expected [K, 1, {PATCH_SIZE}, {PATCH_SIZE}], got {:?}",
            patches.shape()
        )));
    }
    let k = patches.shape()[0];
    let shapes = RfDesParams::layer_shapes(&params.widths);
    let mut x = instance_norm(patches, BN_EPS)?;
    let mut bn_states = params.bn_states.lock().unwrap();
    for (i, s) in shapes.iter().enumerate() {
        x = conv2d(&x, &params.conv_weights[i], Some(&params.conv_biases[i]), s.stride, s.pad)?;
        if i < 6 {
            x = batch_norm(
                &x,
                &params.bn_gammas[i],
                &params.bn_betas[i],
                &mut bn_states[i],
                mode,
                BN_EPS,
                BN_MOMENTUM,
            )?;
            x = relu(&x);
        }
    }
    drop(bn_states);
    let flat = reshape(&x, &[k, DESCRIPTOR_DIM]);
    Ok(l2_normalize(&flat, NORM_EPS))
}

/// Distance between two unit descriptors: `sqrt(2 - 2 a.b)`, range [0, 2].
/// Inputs must be unit-norm within 1e-4.
pub fn descriptor_distance(a: &[f64], b: &[f64]) -> Result<f64, RfError> {
    for (name, v) in [("a", a), ("b", b)] {
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(RfError::Descriptor(format!(
                "descriptor_distance: input {name} has norm {norm}, expected 1"
            )));
        }
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((2.0 - 2.0 * dot).max(0.0).sqrt())
}

/// Pairwise unit-descriptor distances between two `[K, 128]` batches;
/// entry (i, j) is the distance between row i of `da` and row j of `db`.
/// Differentiable.
pub fn distance_matrix(da: &Tensor, db: &Tensor) -> Tensor {
    let dots = matmul_nt(da, db);
    sqrt(&clamp_min(&add_scalar(&scale(&dots, -2.0), 2.0), DIST_FLOOR))
}
