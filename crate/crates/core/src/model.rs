//! Multi-stage dense network: per-stage forward, loss head, backward
//! recursion, and rank-1 per-stage gradients.
//!
//! A stage is one linear layer plus an elementwise activation,
//! `z = W x`, `x_out = g(z)`, with no bias term. The backward error is a
//! row vector: `δ_m = (δ_{m+1} W_{m+1}) ⊙ g'(z_m)`, and the weight
//! gradient of stage m is the outer product `δ_m ⊗ x_m`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::device::DeviceConfig;
use crate::error::{Error, Result};
use crate::linalg::{outer, Matrix, Vector};

/// Elementwise activation. All variants are centered (`g(0) = 0`) and
/// smooth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ActivationKind {
    Identity,
    Tanh,
    /// Smooth centered ramp `g(z) = s·z + (1-s)·(softplus(z) - ln 2)` with
    /// slope `s ∈ (0,1)`: behaves like `s·z` for large negative inputs and
    /// like `z` for large positive ones, with `g(0) = 0` and
    /// `g'(z) = s + (1-s)·sigmoid(z)`.
    LeakySmooth { slope: f64 },
}

impl ActivationKind {
    pub fn apply(&self, z: f64) -> f64 {
        match self {
            ActivationKind::Identity => z,
            ActivationKind::Tanh => z.tanh(),
            ActivationKind::LeakySmooth { slope } => {
                slope * z + (1.0 - slope) * (softplus(z) - std::f64::consts::LN_2)
            }
        }
    }

    pub fn derivative(&self, z: f64) -> f64 {
        match self {
            ActivationKind::Identity => 1.0,
            ActivationKind::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            ActivationKind::LeakySmooth { slope } => slope + (1.0 - slope) * sigmoid(z),
        }
    }

    /// `(g(z), g'(z))` elementwise.
    pub fn eval(&self, z: &Vector) -> (Vector, Vector) {
        let g = Vector::new(z.iter().map(|&v| self.apply(v)).collect());
        let gp = Vector::new(z.iter().map(|&v| self.derivative(v)).collect());
        (g, gp)
    }
}

/// Stable `ln(1 + e^z)`.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Loss head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    /// `½‖x - y‖²` (the ½ makes the gradient exactly `x - y`).
    Mse,
    /// `-Σ y_i ln softmax(x)_i`; requires `y` to be a probability vector.
    SoftmaxCrossEntropy,
}

impl LossKind {
    /// Loss value and its gradient with respect to the network output.
    pub fn value_and_grad(&self, output: &Vector, y: &Vector) -> Result<(f64, Vector)> {
        if output.len() != y.len() {
            return Err(Error::config(format!(
                "loss: output dim {} != label dim {}",
                output.len(),
                y.len()
            )));
        }
        match self {
            LossKind::Mse => {
                let mut loss = 0.0;
                let mut grad = Vec::with_capacity(output.len());
                for (o, t) in output.iter().zip(y.iter()) {
                    let d = o - t;
                    loss += 0.5 * d * d;
                    grad.push(d);
                }
                Ok((loss, Vector::new(grad)))
            }
            LossKind::SoftmaxCrossEntropy => {
                validate_probability_vector(y)?;
                let p = softmax(output);
                let mut loss = 0.0;
                let mut grad = Vec::with_capacity(output.len());
                for i in 0..output.len() {
                    let yi = y[i];
                    if yi > 0.0 {
                        loss -= yi * p[i].max(f64::MIN_POSITIVE).ln();
                    }
                    grad.push(p[i] - yi);
                }
                Ok((loss, Vector::new(grad)))
            }
        }
    }
}

fn validate_probability_vector(y: &Vector) -> Result<()> {
    let mut sum = 0.0;
    for v in y.iter() {
        if *v < 0.0 {
            return Err(Error::config(format!(
                "cross-entropy label has negative entry {v}"
            )));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::config(format!(
            "cross-entropy label entries sum to {sum}, expected 1"
        )));
    }
    Ok(())
}

fn softmax(x: &Vector) -> Vector {
    let max = x.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Vector::new(exps.into_iter().map(|e| e / sum).collect())
}

/// One pipeline stage: weight matrix, activation, update-version counter,
/// and the device it lives on.
#[derive(Debug, Clone)]
pub struct StageState {
    pub weight: Matrix,
    pub activation: ActivationKind,
    /// Number of device updates applied so far (the subscript k of W_k).
    pub version: u64,
    pub device: DeviceConfig,
}

impl StageState {
    pub fn new(weight: Matrix, activation: ActivationKind, device: DeviceConfig) -> Self {
        Self {
            weight,
            activation,
            version: 0,
            device,
        }
    }
}

/// One labeled sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vector,
    pub y: Vector,
}

/// The M-stage network plus loss head.
#[derive(Debug, Clone)]
pub struct NetworkModel {
    pub stages: Vec<StageState>,
    pub loss: LossKind,
}

/// Output of one stage forward: pre-activation, activation, and the
/// elementwise activation derivative.
#[derive(Debug, Clone)]
pub struct StageForward {
    pub z: Vector,
    pub x_out: Vector,
    pub gprime: Vector,
}

impl NetworkModel {
    pub fn new(stages: Vec<StageState>, loss: LossKind) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::config("network needs at least one stage"));
        }
        for m in 1..stages.len() {
            if stages[m].weight.cols() != stages[m - 1].weight.rows() {
                return Err(Error::config(format!(
                    "stage {} output dim {} != stage {} input dim {}",
                    m,
                    stages[m - 1].weight.rows(),
                    m + 1,
                    stages[m].weight.cols()
                )));
            }
        }
        Ok(Self { stages, loss })
    }

    /// Random network with `stage_dims = [d_in, d_1, ..., d_M]` and
    /// `N(0, 1/√fan_in)` weight entries.
    pub fn random<R: Rng>(
        stage_dims: &[usize],
        activation: ActivationKind,
        loss: LossKind,
        device: DeviceConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if stage_dims.len() < 2 {
            return Err(Error::config("stage_dims needs at least [d_in, d_out]"));
        }
        let mut stages = Vec::with_capacity(stage_dims.len() - 1);
        for m in 1..stage_dims.len() {
            let (rows, cols) = (stage_dims[m], stage_dims[m - 1]);
            let scale = 1.0 / (cols as f64).sqrt();
            let data: Vec<f64> = (0..rows * cols)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(rng);
                    v * scale
                })
                .collect();
            stages.push(StageState::new(
                Matrix::new(rows, cols, data),
                activation,
                device,
            ));
        }
        Self::new(stages, loss)
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn input_dim(&self) -> usize {
        self.stages[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.stages.last().unwrap().weight.rows()
    }

    pub fn weights(&self) -> Vec<Matrix> {
        self.stages.iter().map(|s| s.weight.clone()).collect()
    }
}

/// Forward one stage: `z = W x_in`, `x_out = g(z)`, `gprime = g'(z)`.
pub fn forward_stage(stage: &StageState, x_in: &Vector) -> Result<StageForward> {
    let z = stage.weight.matvec(x_in);
    let (x_out, gprime) = stage.activation.eval(&z);
    if !x_out.all_finite() || !gprime.all_finite() {
        return Err(Error::run(format!(
            "non-finite forward output (|W|_inf={}, |x|_inf={})",
            stage.weight.inf_norm(),
            x_in.inf_norm()
        )));
    }
    Ok(StageForward { z, x_out, gprime })
}

/// Loss head: loss value and the last-stage error
/// `δ_M = ∇ℓ(x_last, y) ⊙ g'(z_last)`.
pub fn loss_head(
    x_last: &Vector,
    z_last: &Vector,
    y: &Vector,
    loss: LossKind,
    activation_last: ActivationKind,
) -> Result<(f64, Vector)> {
    let (value, grad) = loss.value_and_grad(x_last, y)?;
    let gprime = Vector::new(z_last.iter().map(|&v| activation_last.derivative(v)).collect());
    Ok((value, grad.hadamard(&gprime)))
}

/// Backward recursion: `δ_m = (δ_{m+1} W_{m+1}) ⊙ g'(z_m)`.
pub fn backward_stage(delta_next: &Vector, w_next: &Matrix, gprime: &Vector) -> Vector {
    w_next.vecmat(delta_next).hadamard(gprime)
}

/// Weight gradient of one stage: `δ ⊗ x`.
pub fn stage_gradient(delta: &Vector, x: &Vector) -> Matrix {
    outer(delta, x)
}

/// Mean loss and per-stage gradients over a batch, with every stage at its
/// current weights. The model is not modified.
pub fn full_gradient(model: &NetworkModel, batch: &[Sample]) -> Result<(f64, Vec<Matrix>)> {
    assert!(!batch.is_empty(), "full_gradient: empty batch");
    let m_stages = model.num_stages();
    let mut grads: Vec<Matrix> = model
        .stages
        .iter()
        .map(|s| Matrix::zeros(s.weight.rows(), s.weight.cols()))
        .collect();
    let mut loss_sum = 0.0;

    for sample in batch {
        let mut inputs: Vec<Vector> = Vec::with_capacity(m_stages);
        let mut gprimes: Vec<Vector> = Vec::with_capacity(m_stages);
        let mut x = sample.x.clone();
        let mut z_last = None;
        for stage in &model.stages {
            let fwd = forward_stage(stage, &x)?;
            inputs.push(x);
            gprimes.push(fwd.gprime);
            z_last = Some(fwd.z);
            x = fwd.x_out;
        }
        let last = model.stages.last().unwrap();
        let (loss, mut delta) = loss_head(
            &x,
            &z_last.unwrap(),
            &sample.y,
            model.loss,
            last.activation,
        )?;
        loss_sum += loss;

        for m in (0..m_stages).rev() {
            grads[m] = grads[m].add_scaled(&stage_gradient(&delta, &inputs[m]), 1.0);
            if m > 0 {
                delta = backward_stage(&delta, &model.stages[m].weight, &gprimes[m - 1]);
            }
        }
    }

    let inv_b = 1.0 / batch.len() as f64;
    let grads = grads
        .into_iter()
        .map(|g| {
            let (r, c) = (g.rows(), g.cols());
            Matrix::new(r, c, g.as_slice().iter().map(|v| v * inv_b).collect())
        })
        .collect();
    Ok((loss_sum * inv_b, grads))
}

/// Mean loss over a batch (forward only).
pub fn batch_loss(model: &NetworkModel, batch: &[Sample]) -> Result<f64> {
    assert!(!batch.is_empty(), "batch_loss: empty batch");
    let mut sum = 0.0;
    for sample in batch {
        let mut x = sample.x.clone();
        for stage in &model.stages {
            x = forward_stage(stage, &x)?.x_out;
        }
        let (loss, _) = model.loss.value_and_grad(&x, &sample.y)?;
        sum += loss;
    }
    Ok(sum / batch.len() as f64)
}

/// Central-difference approximation of the mean-loss gradient for every
/// weight entry. Independent of the backward recursion; used as a test
/// oracle for it.
pub fn finite_diff_gradient(
    model: &NetworkModel,
    batch: &[Sample],
    h: f64,
) -> Result<Vec<Matrix>> {
    assert!(h > 0.0, "finite_diff_gradient: h must be positive");
    let mut probe = model.clone();
    let mut grads = Vec::with_capacity(model.num_stages());
    for m in 0..model.num_stages() {
        let (rows, cols) = (model.stages[m].weight.rows(), model.stages[m].weight.cols());
        let mut g = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                let w0 = model.stages[m].weight.get(i, j);
                probe.stages[m].weight.set(i, j, w0 + h);
                let up = batch_loss(&probe, batch)?;
                probe.stages[m].weight.set(i, j, w0 - h);
                let down = batch_loss(&probe, batch)?;
                probe.stages[m].weight.set(i, j, w0);
                g.set(i, j, (up - down) / (2.0 * h));
            }
        }
        grads.push(g);
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dev() -> DeviceConfig {
        DeviceConfig::digital()
    }

    #[test]
    fn forward_identity_stage() {
        let stage = StageState::new(Matrix::identity(2), ActivationKind::Identity, dev());
        let fwd = forward_stage(&stage, &Vector::new(vec![0.6, 0.8])).unwrap();
        assert_eq!(fwd.z.as_slice(), &[0.6, 0.8]);
        assert_eq!(fwd.x_out.as_slice(), &[0.6, 0.8]);
        assert_eq!(fwd.gprime.as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn forward_tanh_centered() {
        let stage = StageState::new(Matrix::zeros(2, 3), ActivationKind::Tanh, dev());
        let fwd = forward_stage(&stage, &Vector::new(vec![1.0, -2.0, 3.0])).unwrap();
        assert_eq!(fwd.x_out.as_slice(), &[0.0, 0.0]);
        assert_eq!(fwd.gprime.as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn forward_tanh_scalar() {
        let stage = StageState::new(
            Matrix::from_rows(&[&[1.0, 1.0]]),
            ActivationKind::Tanh,
            dev(),
        );
        let fwd = forward_stage(&stage, &Vector::new(vec![0.6, 0.8])).unwrap();
        assert!((fwd.z[0] - 1.4).abs() < 1e-15);
        assert!((fwd.x_out[0] - 0.885352).abs() < 1e-6);
        assert!((fwd.gprime[0] - 0.216152).abs() < 1e-6);
    }

    #[test]
    fn leaky_smooth_centered_and_bounded_slope() {
        let act = ActivationKind::LeakySmooth { slope: 0.1 };
        assert_eq!(act.apply(0.0), 0.0);
        for z in [-30.0, -2.0, -0.5, 0.0, 0.5, 2.0, 30.0] {
            let d = act.derivative(z);
            assert!(d > 0.1 - 1e-12 && d < 1.0 + 1e-12, "g'({z}) = {d}");
        }
        // Ramp limits.
        assert!((act.derivative(-30.0) - 0.1).abs() < 1e-9);
        assert!((act.derivative(30.0) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn loss_head_mse() {
        let y = Vector::new(vec![1.0, 2.0]);
        let (l, d) = loss_head(
            &y.clone(),
            &Vector::new(vec![0.0, 0.0]),
            &y,
            LossKind::Mse,
            ActivationKind::Identity,
        )
        .unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(d.as_slice(), &[0.0, 0.0]);

        let (l, d) = loss_head(
            &Vector::new(vec![1.0]),
            &Vector::new(vec![1.0]),
            &Vector::new(vec![0.0]),
            LossKind::Mse,
            ActivationKind::Identity,
        )
        .unwrap();
        assert_eq!(l, 0.5);
        assert_eq!(d.as_slice(), &[1.0]);
    }

    #[test]
    fn loss_head_softmax_uniform() {
        let (l, d) = loss_head(
            &Vector::new(vec![0.0, 0.0]),
            &Vector::new(vec![0.0, 0.0]),
            &Vector::new(vec![1.0, 0.0]),
            LossKind::SoftmaxCrossEntropy,
            ActivationKind::Identity,
        )
        .unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((d[0] + 0.5).abs() < 1e-15);
        assert!((d[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn loss_rejects_bad_labels() {
        let x = Vector::new(vec![0.0, 0.0]);
        assert!(LossKind::SoftmaxCrossEntropy
            .value_and_grad(&x, &Vector::new(vec![0.5, 0.2]))
            .is_err());
        assert!(LossKind::SoftmaxCrossEntropy
            .value_and_grad(&x, &Vector::new(vec![-0.5, 1.5]))
            .is_err());
    }

    #[test]
    fn backward_stage_cases() {
        // Identity weight, unit gprime: delta passes through.
        let d = Vector::new(vec![0.3, -0.7]);
        let out = backward_stage(&d, &Matrix::identity(2), &Vector::new(vec![1.0, 1.0]));
        assert_eq!(out.as_slice(), d.as_slice());

        let out = backward_stage(
            &Vector::new(vec![1.0]),
            &Matrix::from_rows(&[&[2.0, 3.0]]),
            &Vector::new(vec![1.0, 1.0]),
        );
        assert_eq!(out.as_slice(), &[2.0, 3.0]);

        // Dead activation kills the error.
        let out = backward_stage(&d, &Matrix::identity(2), &Vector::new(vec![0.0, 0.0]));
        assert_eq!(out.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn full_gradient_scalar_chain() {
        // M=1, identity, MSE: W=[[1]], x=[1], y=[0] → loss ½, grad [[1]].
        let model = NetworkModel::new(
            vec![StageState::new(
                Matrix::from_rows(&[&[1.0]]),
                ActivationKind::Identity,
                dev(),
            )],
            LossKind::Mse,
        )
        .unwrap();
        let batch = vec![Sample {
            x: Vector::new(vec![1.0]),
            y: Vector::new(vec![0.0]),
        }];
        let (loss, grads) = full_gradient(&model, &batch).unwrap();
        assert_eq!(loss, 0.5);
        assert_eq!(grads[0].as_slice(), &[1.0]);

        // Duplicating the sample changes nothing.
        let twice = vec![batch[0].clone(), batch[0].clone()];
        let (loss2, grads2) = full_gradient(&model, &twice).unwrap();
        assert_eq!(loss2, 0.5);
        assert_eq!(grads2[0].as_slice(), &[1.0]);
    }

    #[test]
    fn full_gradient_zero_at_fit() {
        let model = NetworkModel::new(
            vec![StageState::new(
                Matrix::identity(2),
                ActivationKind::Identity,
                dev(),
            )],
            LossKind::Mse,
        )
        .unwrap();
        let batch = vec![Sample {
            x: Vector::new(vec![0.3, 0.4]),
            y: Vector::new(vec![0.3, 0.4]),
        }];
        let (loss, grads) = full_gradient(&model, &batch).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads[0].as_slice().iter().all(|&v| v == 0.0));
    }

    fn random_model(seed: u64, dims: &[usize], loss: LossKind) -> NetworkModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NetworkModel::random(dims, ActivationKind::Tanh, loss, dev(), &mut rng).unwrap()
    }

    fn random_batch(seed: u64, n: usize, d_in: usize, d_out: usize, one_hot: bool) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
        (0..n)
            .map(|_| {
                let x = Vector::new((0..d_in).map(|_| rng.random_range(-1.0..1.0)).collect());
                let y = if one_hot {
                    let hot = rng.random_range(0..d_out);
                    Vector::new((0..d_out).map(|i| if i == hot { 1.0 } else { 0.0 }).collect())
                } else {
                    Vector::new((0..d_out).map(|_| rng.random_range(-1.0..1.0)).collect())
                };
                Sample { x, y }
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (seed, dims, loss) in [
            (1u64, vec![3usize, 4, 2], LossKind::Mse),
            (2, vec![4, 3, 3, 2], LossKind::SoftmaxCrossEntropy),
            (3, vec![2, 2], LossKind::Mse),
        ] {
            let model = random_model(seed, &dims, loss);
            let d_out = *dims.last().unwrap();
            let batch = random_batch(
                seed,
                5,
                dims[0],
                d_out,
                loss == LossKind::SoftmaxCrossEntropy,
            );
            let (_, analytic) = full_gradient(&model, &batch).unwrap();
            let fd = finite_diff_gradient(&model, &batch, 1e-5).unwrap();
            for m in 0..model.num_stages() {
                assert_eq!(
                    (analytic[m].rows(), analytic[m].cols()),
                    (model.stages[m].weight.rows(), model.stages[m].weight.cols())
                );
                for (a, f) in analytic[m].as_slice().iter().zip(fd[m].as_slice()) {
                    let rel = (a - f).abs() / (1.0 + a.abs());
                    assert!(rel <= 1e-5, "seed {seed} stage {m}: {a} vs {f}");
                }
            }
        }
    }

    #[test]
    fn finite_diff_zero_gradient_case() {
        let model = NetworkModel::new(
            vec![StageState::new(
                Matrix::identity(2),
                ActivationKind::Identity,
                dev(),
            )],
            LossKind::Mse,
        )
        .unwrap();
        let batch = vec![Sample {
            x: Vector::new(vec![0.3, 0.4]),
            y: Vector::new(vec![0.3, 0.4]),
        }];
        let fd = finite_diff_gradient(&model, &batch, 1e-5).unwrap();
        assert!(fd[0].as_slice().iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn full_gradient_is_pure() {
        let model = random_model(7, &[3, 3, 2], LossKind::Mse);
        let batch = random_batch(7, 4, 3, 2, false);
        let before = model.weights();
        let (l1, g1) = full_gradient(&model, &batch).unwrap();
        let (l2, g2) = full_gradient(&model, &batch).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        for (a, b) in g1.iter().zip(&g2) {
            assert!(a.bits_eq(b));
        }
        for (w, b) in model.weights().iter().zip(&before) {
            assert!(w.bits_eq(b));
        }
    }

    #[test]
    fn rejects_mismatched_stage_dims() {
        let stages = vec![
            StageState::new(Matrix::zeros(3, 2), ActivationKind::Tanh, dev()),
            StageState::new(Matrix::zeros(2, 4), ActivationKind::Tanh, dev()),
        ];
        assert!(NetworkModel::new(stages, LossKind::Mse).is_err());
    }
}
