//! The Q-network and Q-learning logic: architecture assembly, epsilon-greedy
//! action selection, TD targets against a frozen target network, and the
//! gradient step.
//!
//! Architecture (two inputs):
//!
//! ```text
//! depth images [2,32,32] -> conv 2->16 6x6 /2 + ReLU -> conv 16->8 3x3 /1 + ReLU
//!                        -> flatten 1152 --------------------+
//! velocity [3] -> linear 3->16 + ReLU ----------------------concat 1168
//!                        -> linear 1168->256 + ReLU -> linear 256->2 .. Q(s,a)
//! ```
//!
//! Depth inputs are normalized by the camera range to [0,1] before the
//! network; velocities are fed raw.

use crate::nn::{
    self, adam_step, concat, concat_backward, conv2d_backward_with, conv2d_forward_with,
    linear_backward, linear_forward, relu_backward, relu_forward, AdamState, Layer, LayerKind,
    NetParams, NetParamsT, NnError, ParamGrads, Scalar, Tensor,
};
use crate::replay::Experience;
use crate::simcore::{Action, AgentStateTriple, DepthImage, DEPTH_HEIGHT, DEPTH_WIDTH};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use thiserror::Error;

pub const N_ACTIONS: usize = 2;
pub const IMAGE_CHANNELS: usize = 2;
pub const CONV1_OUT: usize = 16;
pub const CONV1_KERNEL: usize = 6;
pub const CONV1_STRIDE: usize = 2;
pub const CONV2_OUT: usize = 8;
pub const CONV2_KERNEL: usize = 3;
pub const CONV2_STRIDE: usize = 1;
pub const CONV1_SPATIAL: usize = (DEPTH_WIDTH - CONV1_KERNEL) / CONV1_STRIDE + 1; // 14
pub const CONV2_SPATIAL: usize = (CONV1_SPATIAL - CONV2_KERNEL) / CONV2_STRIDE + 1; // 12
/// Flattened image-branch width: 12 * 12 * 8.
pub const FLAT_WIDTH: usize = CONV2_SPATIAL * CONV2_SPATIAL * CONV2_OUT;
pub const VEL_INPUT: usize = 3;
pub const VEL_HIDDEN: usize = 16;
pub const CONCAT_WIDTH: usize = FLAT_WIDTH + VEL_HIDDEN; // 1168
pub const HIDDEN_WIDTH: usize = 256;

const L_CONV1: usize = 0;
const L_CONV2: usize = 1;
const L_VEL: usize = 2;
const L_FC1: usize = 3;
const L_FC2: usize = 4;

#[derive(Debug, Error)]
pub enum DqnError {
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error("non-finite loss; update aborted")]
    NonFiniteLoss,
    #[error("non-finite network input")]
    NonFiniteInput,
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Index into the two-action command set: 0 = left (+0.25 m/s lateral),
/// 1 = right (-0.25 m/s lateral).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionIndex(u8);

impl ActionIndex {
    pub const LEFT: ActionIndex = ActionIndex(0);
    pub const RIGHT: ActionIndex = ActionIndex(1);

    pub fn new(index: u8) -> Result<Self, DqnError> {
        if index as usize >= N_ACTIONS {
            return Err(DqnError::Architecture(format!("action index {index} out of range")));
        }
        Ok(ActionIndex(index))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn to_sim_action(self) -> Action {
        match self.0 {
            0 => Action::Left,
            _ => Action::Right,
        }
    }
}

/// Run hyperparameters. Defaults: discount 0.99, replay capacity 15000,
/// mini-batch 32, target sync every 150 trainer steps, 50 Hz training.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub gamma: f32,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub target_sync_every: u64,
    pub train_hz: f64,
    pub lr: f32,
    pub grad_clip: f32,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            replay_capacity: 15_000,
            batch_size: 32,
            target_sync_every: 150,
            train_hz: 50.0,
            lr: 1e-4,
            grad_clip: 10.0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), DqnError> {
        let ok = self.gamma > 0.0
            && self.gamma <= 1.0
            && self.replay_capacity > 0
            && self.batch_size > 0
            && self.target_sync_every > 0
            && self.train_hz > 0.0
            && self.lr > 0.0
            && self.grad_clip > 0.0;
        if ok {
            Ok(())
        } else {
            Err(DqnError::Architecture("hyperparameters must all be positive".into()))
        }
    }
}

/// Network input: stacked current/previous depth images plus velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedState {
    pub image_now: DepthImage,
    pub image_prev: DepthImage,
    pub velocity: [f32; 3],
}

impl StackedState {
    pub fn is_finite(&self) -> bool {
        self.velocity.iter().all(|v| v.is_finite())
            && self.image_now.depths().iter().all(|v| v.is_finite())
            && self.image_prev.depths().iter().all(|v| v.is_finite())
    }
}

impl From<&AgentStateTriple> for StackedState {
    fn from(t: &AgentStateTriple) -> Self {
        StackedState {
            image_now: t.now.clone(),
            image_prev: t.prev.clone(),
            velocity: [t.velocity.x as f32, t.velocity.y as f32, t.velocity.z as f32],
        }
    }
}

fn he_uniform(rng: &mut StdRng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-limit..limit) as f32).collect();
    Tensor::from_vec(shape, data).expect("shape matches data")
}

/// Build the Q-network with seeded He-uniform weights and zero biases.
/// Two builds from the same seed are bit-identical.
pub fn build_network(seed: u64) -> NetParams {
    let mut rng = StdRng::seed_from_u64(seed);
    let conv1 = Layer {
        kind: LayerKind::Conv2d { stride: (CONV1_STRIDE, CONV1_STRIDE) },
        weights: he_uniform(
            &mut rng,
            &[CONV1_OUT, IMAGE_CHANNELS, CONV1_KERNEL, CONV1_KERNEL],
            IMAGE_CHANNELS * CONV1_KERNEL * CONV1_KERNEL,
        ),
        bias: Tensor::zeros(&[CONV1_OUT]),
    };
    let conv2 = Layer {
        kind: LayerKind::Conv2d { stride: (CONV2_STRIDE, CONV2_STRIDE) },
        weights: he_uniform(
            &mut rng,
            &[CONV2_OUT, CONV1_OUT, CONV2_KERNEL, CONV2_KERNEL],
            CONV1_OUT * CONV2_KERNEL * CONV2_KERNEL,
        ),
        bias: Tensor::zeros(&[CONV2_OUT]),
    };
    let vel = Layer {
        kind: LayerKind::Linear,
        weights: he_uniform(&mut rng, &[VEL_HIDDEN, VEL_INPUT], VEL_INPUT),
        bias: Tensor::zeros(&[VEL_HIDDEN]),
    };
    let fc1 = Layer {
        kind: LayerKind::Linear,
        weights: he_uniform(&mut rng, &[HIDDEN_WIDTH, CONCAT_WIDTH], CONCAT_WIDTH),
        bias: Tensor::zeros(&[HIDDEN_WIDTH]),
    };
    let fc2 = Layer {
        kind: LayerKind::Linear,
        weights: he_uniform(&mut rng, &[N_ACTIONS, HIDDEN_WIDTH], HIDDEN_WIDTH),
        bias: Tensor::zeros(&[N_ACTIONS]),
    };
    NetParams { version: 0, layers: vec![conv1, conv2, vel, fc1, fc2] }
}

/// Check that a parameter table matches the fixed architecture.
pub fn validate_architecture<S: Scalar>(params: &NetParamsT<S>) -> Result<(), DqnError> {
    let expect: [(&str, LayerKind, &[usize], &[usize]); 5] = [
        (
            "conv1",
            LayerKind::Conv2d { stride: (CONV1_STRIDE, CONV1_STRIDE) },
            &[CONV1_OUT, IMAGE_CHANNELS, CONV1_KERNEL, CONV1_KERNEL],
            &[CONV1_OUT],
        ),
        (
            "conv2",
            LayerKind::Conv2d { stride: (CONV2_STRIDE, CONV2_STRIDE) },
            &[CONV2_OUT, CONV1_OUT, CONV2_KERNEL, CONV2_KERNEL],
            &[CONV2_OUT],
        ),
        ("vel", LayerKind::Linear, &[VEL_HIDDEN, VEL_INPUT], &[VEL_HIDDEN]),
        ("fc1", LayerKind::Linear, &[HIDDEN_WIDTH, CONCAT_WIDTH], &[HIDDEN_WIDTH]),
        ("fc2", LayerKind::Linear, &[N_ACTIONS, HIDDEN_WIDTH], &[N_ACTIONS]),
    ];
    if params.layers.len() != expect.len() {
        return Err(DqnError::Architecture(format!(
            "expected {} layers, got {}",
            expect.len(),
            params.layers.len()
        )));
    }
    for (layer, (name, kind, wshape, bshape)) in params.layers.iter().zip(expect) {
        if layer.kind != kind || layer.weights.shape() != wshape || layer.bias.shape() != bshape {
            return Err(DqnError::Architecture(format!(
                "layer {name}: got kind {:?} w{:?} b{:?}",
                layer.kind,
                layer.weights.shape(),
                layer.bias.shape()
            )));
        }
    }
    Ok(())
}

struct ForwardPass<S> {
    imgs: Vec<Tensor<S>>,      // per sample [2,32,32]
    conv1_pre: Vec<Tensor<S>>, // [16,14,14]
    conv1_act: Vec<Tensor<S>>,
    conv2_pre: Vec<Tensor<S>>, // [8,12,12]
    vel_in: Tensor<S>,         // [N,3]
    vel_pre: Tensor<S>,        // [N,16]
    concat_in: Tensor<S>,      // [N,1168]
    fc1_pre: Tensor<S>,        // [N,256]
    fc1_act: Tensor<S>,
    q: Tensor<S>, // [N,2]
}

/// Fixed chunk count for batch-parallel sections. The chunking (not the
/// machine's core count) decides every accumulation order, so results are
/// identical across hosts and runs.
const PAR_CHUNKS: usize = 4;

/// Per-worker column buffers reused across a chunk of samples.
struct ConvScratch<S> {
    cols: Vec<S>,
    dcols: Vec<S>,
}

impl<S> Default for ConvScratch<S> {
    fn default() -> Self {
        Self { cols: Vec::new(), dcols: Vec::new() }
    }
}

/// Map per-sample work over fixed chunks, each chunk with its own scratch
/// buffers. Output order matches input order; below a training half-batch
/// the spawn overhead outweighs the work and everything stays on the
/// caller's thread.
fn par_map_scratch<T, R, S, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    S: Scalar,
    F: Fn(&T, &mut ConvScratch<S>) -> R + Sync,
{
    if items.len() < 4 * PAR_CHUNKS {
        let mut scratch = ConvScratch::default();
        return items.iter().map(|t| f(t, &mut scratch)).collect();
    }
    let chunk_size = items.len().div_ceil(PAR_CHUNKS);
    let mut results: Vec<Vec<R>> = Vec::with_capacity(PAR_CHUNKS);
    std::thread::scope(|s| {
        let fr = &f;
        let handles: Vec<_> = items
            .chunks(chunk_size)
            .map(|chunk| {
                s.spawn(move || {
                    let mut scratch = ConvScratch::default();
                    chunk.iter().map(|t| fr(t, &mut scratch)).collect::<Vec<R>>()
                })
            })
            .collect();
        for h in handles {
            results.push(h.join().expect("batch worker panicked"));
        }
    });
    results.into_iter().flatten().collect()
}

fn assemble_inputs<S: Scalar>(
    states: &[&StackedState],
    max_range: f32,
) -> Result<(Vec<Tensor<S>>, Tensor<S>), DqnError> {
    if states.is_empty() {
        return Err(DqnError::EmptyBatch);
    }
    let scale = 1.0 / max_range as f64;
    let mut imgs = Vec::with_capacity(states.len());
    let mut vel = Vec::with_capacity(states.len() * VEL_INPUT);
    for s in states {
        if !s.is_finite() {
            return Err(DqnError::NonFiniteInput);
        }
        let mut data = Vec::with_capacity(IMAGE_CHANNELS * DEPTH_WIDTH * DEPTH_HEIGHT);
        data.extend(s.image_now.depths().iter().map(|&d| S::from_f64(d as f64 * scale)));
        data.extend(s.image_prev.depths().iter().map(|&d| S::from_f64(d as f64 * scale)));
        imgs.push(Tensor::from_vec(&[IMAGE_CHANNELS, DEPTH_HEIGHT, DEPTH_WIDTH], data)?);
        vel.extend(s.velocity.iter().map(|&v| S::from_f64(v as f64)));
    }
    let vel = Tensor::from_vec(&[states.len(), VEL_INPUT], vel)?;
    Ok((imgs, vel))
}

fn forward<S: Scalar>(
    params: &NetParamsT<S>,
    imgs: Vec<Tensor<S>>,
    vel_in: Tensor<S>,
) -> Result<ForwardPass<S>, DqnError> {
    let n = imgs.len();
    let conv1 = &params.layers[L_CONV1];
    let conv2 = &params.layers[L_CONV2];
    let (s1, s2) = match (conv1.kind, conv2.kind) {
        (LayerKind::Conv2d { stride: s1 }, LayerKind::Conv2d { stride: s2 }) => (s1, s2),
        _ => return Err(DqnError::Architecture("conv layers must come first".into())),
    };

    let per_sample = par_map_scratch(&imgs, |img, scratch: &mut ConvScratch<S>| {
        let c1 = conv2d_forward_with(img, &conv1.weights, &conv1.bias, s1, &mut scratch.cols)?;
        let a1 = relu_forward(&c1);
        let c2 = conv2d_forward_with(&a1, &conv2.weights, &conv2.bias, s2, &mut scratch.cols)?;
        let a2 = relu_forward(&c2);
        Ok::<_, DqnError>((c1, a1, c2, a2))
    });
    let mut conv1_pre = Vec::with_capacity(n);
    let mut conv1_act = Vec::with_capacity(n);
    let mut conv2_pre = Vec::with_capacity(n);
    let mut flat_rows = Vec::with_capacity(n * FLAT_WIDTH);
    for item in per_sample {
        let (c1, a1, c2, a2) = item?;
        flat_rows.extend_from_slice(a2.data());
        conv1_pre.push(c1);
        conv1_act.push(a1);
        conv2_pre.push(c2);
    }
    let flat = Tensor::from_vec(&[n, FLAT_WIDTH], flat_rows)?;

    let velp = &params.layers[L_VEL];
    let vel_pre = linear_forward(&vel_in, &velp.weights, &velp.bias)?;
    let vel_act = relu_forward(&vel_pre);

    let concat_in = concat(&flat, &vel_act)?;
    let fc1p = &params.layers[L_FC1];
    let fc1_pre = linear_forward(&concat_in, &fc1p.weights, &fc1p.bias)?;
    let fc1_act = relu_forward(&fc1_pre);
    let fc2p = &params.layers[L_FC2];
    let q = linear_forward(&fc1_act, &fc2p.weights, &fc2p.bias)?;

    Ok(ForwardPass {
        imgs,
        conv1_pre,
        conv1_act,
        conv2_pre,
        vel_in,
        vel_pre,
        concat_in,
        fc1_pre,
        fc1_act,
        q,
    })
}

fn add_into<S: Scalar>(dst: &mut Tensor<S>, src: &Tensor<S>) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += *s;
    }
}

fn backward<S: Scalar>(
    params: &NetParamsT<S>,
    fwd: &ForwardPass<S>,
    dq: &Tensor<S>,
) -> Result<ParamGrads<S>, DqnError> {
    let n = fwd.imgs.len();
    let mut grads = ParamGrads::zeros_like(params);

    // head
    let (d_fc1_act, dw5, db5) = linear_backward(&fwd.fc1_act, &params.layers[L_FC2].weights, dq)?;
    grads.layers[L_FC2] = (dw5, db5);
    let d_fc1_pre = relu_backward(&fwd.fc1_pre, &d_fc1_act)?;
    let (d_concat, dw4, db4) =
        linear_backward(&fwd.concat_in, &params.layers[L_FC1].weights, &d_fc1_pre)?;
    grads.layers[L_FC1] = (dw4, db4);

    // split into image and velocity branches
    let (d_flat, d_vel_act) = concat_backward(&d_concat, FLAT_WIDTH)?;
    let d_vel_pre = relu_backward(&fwd.vel_pre, &d_vel_act)?;
    let (_, dw3, db3) = linear_backward(&fwd.vel_in, &params.layers[L_VEL].weights, &d_vel_pre)?;
    grads.layers[L_VEL] = (dw3, db3);

    // image branch, per sample, with per-sample gradients reduced in
    // index order afterward
    let (s1, s2) = match (params.layers[L_CONV1].kind, params.layers[L_CONV2].kind) {
        (LayerKind::Conv2d { stride: s1 }, LayerKind::Conv2d { stride: s2 }) => (s1, s2),
        _ => return Err(DqnError::Architecture("conv layers must come first".into())),
    };
    let indices: Vec<usize> = (0..n).collect();
    let per_sample = par_map_scratch(&indices, |&i, scratch: &mut ConvScratch<S>| {
        let row = &d_flat.data()[i * FLAT_WIDTH..(i + 1) * FLAT_WIDTH];
        let d_conv2_act =
            Tensor::from_vec(&[CONV2_OUT, CONV2_SPATIAL, CONV2_SPATIAL], row.to_vec())?;
        let d_conv2_pre = relu_backward(&fwd.conv2_pre[i], &d_conv2_act)?;
        let (d_conv1_act, dw2, db2) = conv2d_backward_with(
            &fwd.conv1_act[i],
            &params.layers[L_CONV2].weights,
            s2,
            &d_conv2_pre,
            &mut scratch.cols,
            &mut scratch.dcols,
        )?;
        let d_conv1_pre = relu_backward(&fwd.conv1_pre[i], &d_conv1_act)?;
        let (_, dw1, db1) = conv2d_backward_with(
            &fwd.imgs[i],
            &params.layers[L_CONV1].weights,
            s1,
            &d_conv1_pre,
            &mut scratch.cols,
            &mut scratch.dcols,
        )?;
        Ok::<_, DqnError>((dw1, db1, dw2, db2))
    });
    for item in per_sample {
        let (dw1, db1, dw2, db2) = item?;
        add_into(&mut grads.layers[L_CONV1].0, &dw1);
        add_into(&mut grads.layers[L_CONV1].1, &db1);
        add_into(&mut grads.layers[L_CONV2].0, &dw2);
        add_into(&mut grads.layers[L_CONV2].1, &db2);
    }
    Ok(grads)
}

/// Q-values for a batch of states; one [left, right] row per state.
pub fn q_values_batch(
    params: &NetParams,
    states: &[&StackedState],
    max_range: f32,
) -> Result<Vec<[f32; 2]>, DqnError> {
    validate_architecture(params)?;
    let (imgs, vel) = assemble_inputs::<f32>(states, max_range)?;
    let fwd = forward(params, imgs, vel)?;
    Ok(fwd.q.data().chunks_exact(N_ACTIONS).map(|row| [row[0], row[1]]).collect())
}

/// Q-values for a single state.
pub fn q_values(
    params: &NetParams,
    state: &StackedState,
    max_range: f32,
) -> Result<[f32; 2], DqnError> {
    Ok(q_values_batch(params, &[state], max_range)?[0])
}

/// Epsilon-greedy selection: with probability `epsilon` a uniform action,
/// otherwise the argmax (ties go to index 0).
pub fn select_action<R: Rng>(q: [f32; 2], epsilon: f64, rng: &mut R) -> ActionIndex {
    debug_assert!((0.0..=1.0).contains(&epsilon));
    let coin: f64 = rng.gen();
    if coin < epsilon {
        ActionIndex(rng.gen_range(0..N_ACTIONS as u8))
    } else if q[1] > q[0] {
        ActionIndex(1)
    } else {
        ActionIndex(0)
    }
}

/// Linear exploration decay over the buffer capacity:
/// epsilon = max(0, 1 - a_T / capacity), with a_T the lifetime count of
/// actions performed by all agents.
pub fn epsilon_schedule(total_actions: u64, capacity: usize) -> f64 {
    (1.0 - total_actions as f64 / capacity as f64).max(0.0)
}

/// One-step TD targets from the target network only:
/// y = r + gamma * max_a' Q_target(s', a'), or y = r on terminal
/// transitions.
pub fn td_targets(
    batch: &[Experience],
    target_params: &NetParams,
    gamma: f32,
    max_range: f32,
) -> Result<Vec<f32>, DqnError> {
    if batch.is_empty() {
        return Err(DqnError::EmptyBatch);
    }
    let next_states: Vec<&StackedState> = batch.iter().map(|e| &e.next_state).collect();
    let next_q = q_values_batch(target_params, &next_states, max_range)?;
    Ok(batch
        .iter()
        .zip(next_q)
        .map(|(e, q)| if e.done { e.reward } else { e.reward + gamma * q[0].max(q[1]) })
        .collect())
}

/// Deep copy of the online parameters for use as the frozen target.
pub fn sync_target(params: &NetParams) -> NetParams {
    params.clone()
}

/// One training step: MSE over the taken-action TD errors, global
/// gradient-norm clip, one Adam update. Returns the pre-update loss.
/// A non-finite loss or gradient aborts the update with no mutation.
pub fn train_step(
    params: &mut NetParams,
    target_params: &NetParams,
    batch: &[Experience],
    adam: &mut AdamState,
    hyper: &Hyperparams,
    max_range: f32,
) -> Result<f32, DqnError> {
    validate_architecture(params)?;
    // the target-network bootstrap and the online forward are independent;
    // overlap them
    let (targets, fwd) = std::thread::scope(|s| {
        let t = s.spawn(|| td_targets(batch, target_params, hyper.gamma, max_range));
        let fwd = (|| {
            let states: Vec<&StackedState> = batch.iter().map(|e| &e.state).collect();
            let (imgs, vel) = assemble_inputs::<f32>(&states, max_range)?;
            forward(params, imgs, vel)
        })();
        (t.join().expect("td target thread panicked"), fwd)
    });
    let targets = targets?;
    let fwd = fwd?;

    let n = batch.len();
    let mut loss = 0.0f64;
    let mut dq = Tensor::<f32>::zeros(&[n, N_ACTIONS]);
    for (i, (e, y)) in batch.iter().zip(&targets).enumerate() {
        let qa = fwd.q.data()[i * N_ACTIONS + e.action.index()];
        let err = (qa - y) as f64;
        loss += err * err;
        dq.data_mut()[i * N_ACTIONS + e.action.index()] = (2.0 * err / n as f64) as f32;
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(DqnError::NonFiniteLoss);
    }

    let mut grads = backward(params, &fwd, &dq)?;
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(DqnError::Nn(NnError::NonFiniteGradient));
    }
    if norm > hyper.grad_clip as f64 {
        grads.scale(hyper.grad_clip as f64 / norm);
    }
    adam_step(params, &grads, adam)?;
    Ok(loss as f32)
}

/// Forward in f64 for verification; returns per-row Q values.
fn q_forward_f64(
    params: &NetParamsT<f64>,
    states: &[&StackedState],
    max_range: f32,
) -> Result<Tensor<f64>, DqnError> {
    let (imgs, vel) = assemble_inputs::<f64>(states, max_range)?;
    Ok(forward(params, imgs, vel)?.q)
}

/// Gradient verification on the exact architecture in 64-bit mode.
///
/// Builds a seeded network and a random batch, computes the analytic
/// gradient of the taken-action MSE loss, and compares against central
/// finite differences over at most `n_coords` sampled parameter
/// coordinates. `grad_scale` multiplies the analytic conv1 weight gradient:
/// 1.0 verifies the true backward pass, anything else is a deliberate
/// corruption for negative controls. Returns the max relative error.
pub fn verify_gradients(seed: u64, n_coords: usize, grad_scale: f64) -> f64 {
    let params64: NetParamsT<f64> = build_network(seed).cast();
    let mut rng = StdRng::seed_from_u64(seed ^ 0x5eed);
    let max_range = 20.0f32;
    let batch = 4;

    let states: Vec<StackedState> = (0..batch)
        .map(|_| {
            let img = |rng: &mut StdRng| {
                DepthImage::from_depths(
                    (0..DEPTH_WIDTH * DEPTH_HEIGHT).map(|_| rng.gen_range(0.0..max_range)).collect(),
                )
                .unwrap()
            };
            StackedState {
                image_now: img(&mut rng),
                image_prev: img(&mut rng),
                velocity: [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ],
            }
        })
        .collect();
    let actions: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..N_ACTIONS)).collect();
    let targets: Vec<f64> = (0..batch).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let refs: Vec<&StackedState> = states.iter().collect();

    let loss_of = {
        let actions = actions.clone();
        let targets = targets.clone();
        move |p: &NetParamsT<f64>, refs: &[&StackedState]| -> f64 {
            let q = q_forward_f64(p, refs, max_range).unwrap();
            let mut acc = 0.0;
            for i in 0..batch {
                let err = q.data()[i * N_ACTIONS + actions[i]] - targets[i];
                acc += err * err;
            }
            acc / batch as f64
        }
    };

    // analytic gradient
    let (imgs, vel) = assemble_inputs::<f64>(&refs, max_range).unwrap();
    let fwd = forward(&params64, imgs, vel).unwrap();
    let mut dq = Tensor::<f64>::zeros(&[batch, N_ACTIONS]);
    for i in 0..batch {
        let err = fwd.q.data()[i * N_ACTIONS + actions[i]] - targets[i];
        dq.data_mut()[i * N_ACTIONS + actions[i]] = 2.0 * err / batch as f64;
    }
    let mut grads = backward(&params64, &fwd, &dq).unwrap();
    if grad_scale != 1.0 {
        for v in grads.layers[L_CONV1].0.data_mut() {
            *v *= grad_scale;
        }
    }

    let theta = params64.flat_values();
    let analytic = grads.flat_values();
    let mut scratch = params64;
    nn::grad_check(
        &theta,
        &analytic,
        move |t| {
            scratch.set_flat_values(t).unwrap();
            loss_of(&scratch, &refs)
        },
        n_coords,
        1e-5,
        seed ^ 0xc0ffee,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::replay::Experience;

    fn flat_state(now: f32, prev: f32, vel: [f32; 3]) -> StackedState {
        StackedState {
            image_now: DepthImage::constant(now),
            image_prev: DepthImage::constant(prev),
            velocity: vel,
        }
    }

    fn random_state(rng: &mut StdRng) -> StackedState {
        let img = |rng: &mut StdRng| {
            DepthImage::from_depths((0..1024).map(|_| rng.gen_range(0.0..20.0)).collect()).unwrap()
        };
        StackedState {
            image_now: img(rng),
            image_prev: img(rng),
            velocity: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0],
        }
    }

    #[test]
    fn architecture_anchors() {
        let p = build_network(0);
        validate_architecture(&p).unwrap();
        assert_eq!(CONV1_SPATIAL, 14);
        assert_eq!(CONV2_SPATIAL, 12);
        assert_eq!(FLAT_WIDTH, 1152);
        assert_eq!(CONCAT_WIDTH, 1168);
        assert_eq!(p.layers[L_FC2].weights.shape(), &[2, 256]);
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_network(123);
        let b = build_network(123);
        assert_eq!(a, b);
        let c = build_network(124);
        assert_ne!(a, c);
    }

    #[test]
    fn zeroed_head_gives_zero_q() {
        let mut p = build_network(5);
        p.layers[L_FC2].weights = Tensor::zeros(&[N_ACTIONS, HIDDEN_WIDTH]);
        p.layers[L_FC2].bias = Tensor::zeros(&[N_ACTIONS]);
        let s = flat_state(0.0, 0.0, [0.0; 3]);
        let q = q_values(&p, &s, 20.0).unwrap();
        assert_eq!(q, [0.0, 0.0]);
    }

    #[test]
    fn batch_matches_single_evaluations() {
        let p = build_network(9);
        let mut rng = StdRng::seed_from_u64(1);
        let states: Vec<StackedState> = (0..32).map(|_| random_state(&mut rng)).collect();
        let refs: Vec<&StackedState> = states.iter().collect();
        let batch = q_values_batch(&p, &refs, 20.0).unwrap();
        for (s, qb) in states.iter().zip(batch) {
            let q1 = q_values(&p, s, 20.0).unwrap();
            assert!((q1[0] - qb[0]).abs() <= 1e-6);
            assert!((q1[1] - qb[1]).abs() <= 1e-6);
        }
    }

    #[test]
    fn permuting_head_rows_permutes_outputs() {
        let p = build_network(11);
        let mut swapped = p.clone();
        {
            let w = swapped.layers[L_FC2].weights.data_mut();
            let (a, b) = w.split_at_mut(HIDDEN_WIDTH);
            a.swap_with_slice(b);
        }
        {
            let b = swapped.layers[L_FC2].bias.data_mut();
            b.swap(0, 1);
        }
        let mut rng = StdRng::seed_from_u64(2);
        let s = random_state(&mut rng);
        let q = q_values(&p, &s, 20.0).unwrap();
        let qs = q_values(&swapped, &s, 20.0).unwrap();
        assert_eq!(q[0], qs[1]);
        assert_eq!(q[1], qs[0]);
    }

    #[test]
    fn select_action_greedy_and_ties() {
        let mut rng = StdRng::seed_from_u64(3);
        assert_eq!(select_action([1.0, 2.0], 0.0, &mut rng), ActionIndex(1));
        assert_eq!(select_action([2.0, 1.0], 0.0, &mut rng), ActionIndex(0));
        assert_eq!(select_action([0.7, 0.7], 0.0, &mut rng), ActionIndex(0));
    }

    #[test]
    fn select_action_uniform_at_full_epsilon() {
        let mut rng = StdRng::seed_from_u64(4);
        let n = 100_000;
        let mut left = 0usize;
        for _ in 0..n {
            if select_action([5.0, -5.0], 1.0, &mut rng) == ActionIndex(0) {
                left += 1;
            }
        }
        let freq = left as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.01, "left frequency {freq}");
    }

    #[test]
    fn policy_invariant_to_constant_q_shift() {
        let p = build_network(17);
        let mut shifted = p.clone();
        for b in shifted.layers[L_FC2].bias.data_mut() {
            *b += 13.5;
        }
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..16 {
            let s = random_state(&mut rng);
            let q = q_values(&p, &s, 20.0).unwrap();
            let qs = q_values(&shifted, &s, 20.0).unwrap();
            let mut r1 = StdRng::seed_from_u64(0);
            let mut r2 = StdRng::seed_from_u64(0);
            assert_eq!(select_action(q, 0.0, &mut r1), select_action(qs, 0.0, &mut r2));
        }
    }

    #[test]
    fn epsilon_schedule_formula() {
        assert_eq!(epsilon_schedule(0, 15_000), 1.0);
        assert_eq!(epsilon_schedule(15_000, 15_000), 0.0);
        assert_eq!(epsilon_schedule(22_500, 15_000), 0.0);
        assert!((epsilon_schedule(7_500, 15_000) - 0.5).abs() < 1e-12);
        let mut last = 1.0;
        for a in (0..20_000).step_by(500) {
            let e = epsilon_schedule(a, 15_000);
            assert!(e <= last);
            last = e;
        }
    }

    fn experience(
        s: StackedState,
        action: ActionIndex,
        s2: StackedState,
        reward: f32,
        done: bool,
    ) -> Experience {
        Experience { state: s, action, next_state: s2, reward, done }
    }

    #[test]
    fn td_targets_terminal_and_gamma_zero() {
        let target = build_network(19);
        let s = flat_state(5.0, 5.0, [1.0, 0.0, 0.0]);
        let batch = vec![
            experience(s.clone(), ActionIndex::LEFT, s.clone(), -100.0, true),
            experience(s.clone(), ActionIndex::RIGHT, s.clone(), 3.0, false),
        ];
        let ys = td_targets(&batch, &target, 0.99, 20.0).unwrap();
        assert_eq!(ys[0], -100.0);
        let ys0 = td_targets(&batch, &target, 0.0, 20.0).unwrap();
        assert_eq!(ys0[1], 3.0);
    }

    #[test]
    fn td_targets_match_hand_computation() {
        let target = build_network(23);
        let mut rng = StdRng::seed_from_u64(7);
        let batch: Vec<Experience> = (0..5)
            .map(|i| {
                experience(
                    random_state(&mut rng),
                    ActionIndex::new(i % 2).unwrap(),
                    random_state(&mut rng),
                    3.0,
                    false,
                )
            })
            .collect();
        let ys = td_targets(&batch, &target, 0.9, 20.0).unwrap();
        for (e, y) in batch.iter().zip(ys) {
            let q = q_values(&target, &e.next_state, 20.0).unwrap();
            let expect = 3.0 + 0.9 * q[0].max(q[1]);
            assert!((y - expect).abs() <= 1e-6);
        }
    }

    #[test]
    fn train_step_zero_error_batch_keeps_params() {
        let mut params = build_network(29);
        let target = sync_target(&params);
        let s = flat_state(4.0, 4.0, [0.5, 0.0, 0.0]);
        // terminal transition with reward equal to the current prediction:
        // the TD error is exactly zero, the gradient is zero, and Adam with
        // a zero gradient is the identity.
        let q = q_values(&params, &s, 20.0).unwrap();
        let batch = vec![experience(s.clone(), ActionIndex::LEFT, s.clone(), q[0], true)];
        let mut adam = AdamState::new(params.param_count(), 1e-3);
        let before = params.flat_values();
        let loss =
            train_step(&mut params, &target, &batch, &mut adam, &Hyperparams::default(), 20.0)
                .unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(params.flat_values(), before);
        assert_eq!(params.version, 1);
    }

    #[test]
    fn train_step_overfits_fixed_batch() {
        let mut params = build_network(31);
        let target = sync_target(&params);
        let mut rng = StdRng::seed_from_u64(8);
        let batch: Vec<Experience> = (0..8)
            .map(|i| {
                experience(
                    random_state(&mut rng),
                    ActionIndex::new(i % 2).unwrap(),
                    random_state(&mut rng),
                    if i % 2 == 0 { 3.0 } else { -100.0 },
                    true,
                )
            })
            .collect();
        let hyper = Hyperparams { lr: 1e-3, ..Hyperparams::default() };
        let mut adam = AdamState::new(params.param_count(), hyper.lr);
        let first = train_step(&mut params, &target, &batch, &mut adam, &hyper, 20.0).unwrap();
        let mut last = first;
        for _ in 0..99 {
            last = train_step(&mut params, &target, &batch, &mut adam, &hyper, 20.0).unwrap();
        }
        assert!(last < first * 0.5, "loss {first} -> {last}");
    }

    #[test]
    fn train_step_rejects_non_finite() {
        let mut params = build_network(37);
        let target = sync_target(&params);
        let mut s = flat_state(1.0, 1.0, [0.0; 3]);
        s.velocity[0] = f32::NAN;
        let batch = vec![experience(s.clone(), ActionIndex::LEFT, s.clone(), 3.0, false)];
        let mut adam = AdamState::new(params.param_count(), 1e-3);
        let before = params.flat_values();
        assert!(train_step(&mut params, &target, &batch, &mut adam, &Hyperparams::default(), 20.0)
            .is_err());
        assert_eq!(params.flat_values(), before);
        assert_eq!(params.version, 0);
    }

    #[test]
    fn sync_target_isolates_mutation() {
        let mut params = build_network(41);
        let target = sync_target(&params);
        assert_eq!(params, target);
        params.layers[L_FC2].bias.data_mut()[0] += 1.0;
        params.version += 1;
        assert_ne!(params.layers[L_FC2].bias.data()[0], target.layers[L_FC2].bias.data()[0]);
        assert_eq!(target.version, 0);
    }

    #[test]
    fn gradients_verify_small_sample() {
        // a quick 32-coordinate slice of the acceptance-level check
        let err = verify_gradients(1, 32, 1.0);
        assert!(err <= 1e-4, "max rel error {err}");
    }

    #[test]
    fn corrupted_gradients_detected_small_sample() {
        let err = verify_gradients(1, 600, 1.05);
        assert!(err > 1e-2, "corruption must be visible, got {err}");
    }
}
