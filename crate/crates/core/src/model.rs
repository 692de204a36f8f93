//! The model zoo: two learned next-frame predictors and a trivial baseline.
//!
//! All models map a stacked history window `[B,H,W,window]` plus a normalized
//! action `[B,3]` to a predicted next frame `[B,H,W,1]`:
//!
//! * **SDF-tiling** — a three-stage stride-2 conv encoder, the action tiled
//!   across the bottleneck and concatenated channel-wise, a three-stage
//!   deconv decoder emitting `n_basis` non-negative full-resolution basis
//!   images, and a learned linear combination collapsing them to one frame.
//!   The action influences every output pixel through the tiled bottleneck.
//! * **SDF-vector** — the same encoder, flattened through a wide fully
//!   connected stack whose hidden vector is gated multiplicatively by a
//!   linear action embedding, reshaped back and decoded to a single channel.
//!   Far more parameters for the same job; kept as the capacity ablation.
//! * **copy-last-frame** — emits the newest history frame unchanged; the
//!   floor any learned model must beat.
//!
//! Builders draw weights Glorot-uniform (`±sqrt(6/(fan_in+fan_out))`) from a
//! seeded ChaCha stream in declaration order with zero biases, so a given
//! `(config, seed)` always yields bit-identical parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Parameter, Tape};
use crate::conv::{conv_out_dim, deconv_out_dim};
use crate::data::{ActionVector, HistoryWindow};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Which architecture a model instance is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    SdfTiling,
    SdfVector,
    CopyLastFrame,
}

impl ModelKind {
    /// Stable name used in CLI arguments, reports, and checkpoints.
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::SdfTiling => "sdf-tiling",
            ModelKind::SdfVector => "sdf-vector",
            ModelKind::CopyLastFrame => "copy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sdf-tiling" => Ok(ModelKind::SdfTiling),
            "sdf-vector" => Ok(ModelKind::SdfVector),
            "copy" => Ok(ModelKind::CopyLastFrame),
            other => Err(Error::InvalidConfig(format!(
                "unknown model '{other}'; expected sdf-tiling, sdf-vector, or copy"
            ))),
        }
    }
}

/// Geometry and widths of the SDF-tiling model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SdfTilingConfig {
    /// History frames stacked into the input channels.
    pub window: usize,
    pub input_height: usize,
    pub input_width: usize,
    /// Components of the action vector concatenated at the bottleneck.
    pub action_dim: usize,
    /// Output channels of the three conv stages.
    pub encoder_channels: [usize; 3],
    /// Output channels of the three deconv stages; the last is the number of
    /// basis images.
    pub decoder_channels: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Default for SdfTilingConfig {
    fn default() -> Self {
        SdfTilingConfig {
            window: 4,
            input_height: 80,
            input_width: 160,
            action_dim: 3,
            encoder_channels: [64, 64, 64],
            decoder_channels: [80, 80, 80],
            kernel: 6,
            stride: 2,
            padding: 2,
        }
    }
}

impl SdfTilingConfig {
    pub fn with_window(mut self, window: usize) -> Self {
        self.window = window;
        self
    }

    pub fn with_decoder_channels(mut self, channels: [usize; 3]) -> Self {
        self.decoder_channels = channels;
        self
    }

    /// Number of basis images the decoder emits.
    pub fn n_basis(&self) -> usize {
        self.decoder_channels[2]
    }

    /// `(H, W)` after each encoder stage: index 0 is the input, 3 the
    /// bottleneck. Errors if any stage fails or the decoder would not restore
    /// the input size exactly (with the default kernel geometry this means
    /// the input dimensions must be divisible by 8).
    pub fn stage_dims(&self) -> Result<[(usize, usize); 4]> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let mut dims = [(self.input_height, self.input_width); 4];
        for i in 0..3 {
            let (h, w) = dims[i];
            dims[i + 1] = (conv_out_dim(h, k, s, p)?, conv_out_dim(w, k, s, p)?);
        }
        for i in (0..3).rev() {
            let (h, w) = dims[i + 1];
            let up = (deconv_out_dim(h, k, s, p)?, deconv_out_dim(w, k, s, p)?);
            if up != dims[i] {
                return Err(Error::InvalidConfig(format!(
                    "decoder stage cannot restore {:?} from {:?} (got {:?}); \
                     with the default kernel geometry, input dimensions must be \
                     divisible by 8",
                    dims[i],
                    dims[i + 1],
                    up
                )));
            }
        }
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::InvalidConfig("window must be ≥ 1".into()));
        }
        if self.action_dim == 0 {
            return Err(Error::InvalidConfig("action_dim must be ≥ 1".into()));
        }
        if self.encoder_channels.contains(&0) || self.decoder_channels.contains(&0) {
            return Err(Error::InvalidConfig("channel counts must be ≥ 1".into()));
        }
        if self.n_basis() > self.input_height {
            return Err(Error::InvalidConfig(format!(
                "{} basis images exceed the input height {}; the combination \
                 layer cannot use more bases than rows",
                self.n_basis(),
                self.input_height
            )));
        }
        self.stage_dims()?;
        Ok(())
    }
}

/// Geometry and widths of the SDF-vector model. Shares the encoder layout
/// with [`SdfTilingConfig`]; the decoder's final stage always emits a single
/// channel, so only two decoder widths are free.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SdfVectorConfig {
    pub window: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub action_dim: usize,
    pub encoder_channels: [usize; 3],
    pub decoder_channels: [usize; 2],
    /// Width of the fully connected stack and the action embedding.
    pub hidden_width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Default for SdfVectorConfig {
    fn default() -> Self {
        SdfVectorConfig {
            window: 4,
            input_height: 80,
            input_width: 160,
            action_dim: 3,
            encoder_channels: [64, 64, 64],
            decoder_channels: [80, 80],
            hidden_width: 2048,
            kernel: 6,
            stride: 2,
            padding: 2,
        }
    }
}

impl SdfVectorConfig {
    pub fn with_window(mut self, window: usize) -> Self {
        self.window = window;
        self
    }

    /// The equivalent conv/deconv geometry, for shared shape algebra.
    fn geometry(&self) -> SdfTilingConfig {
        SdfTilingConfig {
            window: self.window,
            input_height: self.input_height,
            input_width: self.input_width,
            action_dim: self.action_dim,
            encoder_channels: self.encoder_channels,
            decoder_channels: [self.decoder_channels[0], self.decoder_channels[1], 1],
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn stage_dims(&self) -> Result<[(usize, usize); 4]> {
        self.geometry().stage_dims()
    }

    /// Length of the flattened bottleneck the FC stack operates on.
    pub fn flat_dim(&self) -> Result<usize> {
        let (h, w) = self.stage_dims()?[3];
        Ok(h * w * self.encoder_channels[2])
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry().validate()?;
        if self.hidden_width == 0 {
            return Err(Error::InvalidConfig("hidden width must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Geometry of the copy-last-frame baseline (no parameters).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CopyConfig {
    pub window: usize,
    pub input_height: usize,
    pub input_width: usize,
}

impl Default for CopyConfig {
    fn default() -> Self {
        CopyConfig {
            window: 4,
            input_height: 80,
            input_width: 160,
        }
    }
}

/// Configuration of any model in the zoo.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelConfig {
    SdfTiling(SdfTilingConfig),
    SdfVector(SdfVectorConfig),
    CopyLastFrame(CopyConfig),
}

impl ModelConfig {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::SdfTiling(_) => ModelKind::SdfTiling,
            ModelConfig::SdfVector(_) => ModelKind::SdfVector,
            ModelConfig::CopyLastFrame(_) => ModelKind::CopyLastFrame,
        }
    }

    pub fn window(&self) -> usize {
        match self {
            ModelConfig::SdfTiling(c) => c.window,
            ModelConfig::SdfVector(c) => c.window,
            ModelConfig::CopyLastFrame(c) => c.window,
        }
    }

    pub fn input_height(&self) -> usize {
        match self {
            ModelConfig::SdfTiling(c) => c.input_height,
            ModelConfig::SdfVector(c) => c.input_height,
            ModelConfig::CopyLastFrame(c) => c.input_height,
        }
    }

    pub fn input_width(&self) -> usize {
        match self {
            ModelConfig::SdfTiling(c) => c.input_width,
            ModelConfig::SdfVector(c) => c.input_width,
            ModelConfig::CopyLastFrame(c) => c.input_width,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            ModelConfig::SdfTiling(c) => c.action_dim,
            ModelConfig::SdfVector(c) => c.action_dim,
            ModelConfig::CopyLastFrame(_) => 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::SdfTiling(c) => c.validate(),
            ModelConfig::SdfVector(c) => c.validate(),
            ModelConfig::CopyLastFrame(c) => {
                if c.window == 0 || c.input_height == 0 || c.input_width == 0 {
                    Err(Error::InvalidConfig("copy baseline needs nonzero geometry".into()))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// A tape-backed forward evaluation of a model on one batch. Holds the graph
/// so gradients can be pulled back into the parameters after a backward pass.
pub struct ForwardPass<T: Scalar = f32> {
    pub tape: Tape<T>,
    /// Predicted frames, `[B,H,W,1]`.
    pub output: NodeId,
    /// Non-negative basis images `[B,H,W,n_basis]` (SDF-tiling only).
    pub basis: Option<NodeId>,
    param_nodes: Vec<NodeId>,
}

impl<T: Scalar> ForwardPass<T> {
    /// Tape nodes of the model parameters, in parameter order.
    pub fn param_nodes(&self) -> &[NodeId] {
        &self.param_nodes
    }

    /// Appends an MSE loss node against `target` (`[B,H,W,1]`).
    pub fn loss_against(&mut self, target: Tensor<T>) -> Result<NodeId> {
        let t = self.tape.leaf(target);
        self.tape.mse_loss(self.output, t)
    }
}

/// One single-sample prediction.
#[derive(Debug, Clone)]
pub struct Prediction<T: Scalar = f32> {
    /// Predicted next frame `[H,W,1]`, unclamped.
    pub frame: Tensor<T>,
    /// The basis images `[H,W,n_basis]` behind the frame (SDF-tiling only).
    pub basis: Option<Tensor<T>>,
    /// The combination weights applied to the basis (SDF-tiling only).
    pub basis_weights: Option<Vec<T>>,
}

/// A next-frame predictor: configuration plus named parameters.
#[derive(Debug, Clone)]
pub struct PredictiveModel<T: Scalar = f32> {
    config: ModelConfig,
    params: Vec<Parameter<T>>,
}

/// Draws a Glorot-uniform tensor, filling in declaration order.
fn glorot<T: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-limit..limit)))
}

/// A conv/deconv weight `[k,k,cin,cout]` (fans scaled by the kernel area)
/// plus a zero bias of length `cout`.
fn conv_pair<T: Scalar>(
    rng: &mut ChaCha8Rng,
    name: &str,
    k: usize,
    cin: usize,
    cout: usize,
) -> [Parameter<T>; 2] {
    let w = glorot(rng, &[k, k, cin, cout], k * k * cin, k * k * cout);
    [
        Parameter::new(format!("{name}.weight"), w),
        Parameter::new(format!("{name}.bias"), Tensor::zeros(&[cout])),
    ]
}

/// A fully connected weight `[cin,cout]` plus a zero bias.
fn fc_pair<T: Scalar>(
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
) -> [Parameter<T>; 2] {
    let w = glorot(rng, &[cin, cout], cin, cout);
    [
        Parameter::new(format!("{name}.weight"), w),
        Parameter::new(format!("{name}.bias"), Tensor::zeros(&[cout])),
    ]
}

impl<T: Scalar> PredictiveModel<T> {
    /// Builds a model with freshly initialized parameters. The same
    /// `(config, seed)` always produces bit-identical parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = match &config {
            ModelConfig::SdfTiling(c) => {
                let k = c.kernel;
                let [e1, e2, e3] = c.encoder_channels;
                let [d1, d2, nb] = c.decoder_channels;
                let mut p = Vec::with_capacity(13);
                p.extend(conv_pair(&mut rng, "enc1", k, c.window, e1));
                p.extend(conv_pair(&mut rng, "enc2", k, e1, e2));
                p.extend(conv_pair(&mut rng, "enc3", k, e2, e3));
                p.extend(conv_pair(&mut rng, "dec1", k, e3 + c.action_dim, d1));
                p.extend(conv_pair(&mut rng, "dec2", k, d1, d2));
                p.extend(conv_pair(&mut rng, "dec3", k, d2, nb));
                p.push(Parameter::new(
                    "basis.weights",
                    glorot(&mut rng, &[nb], nb, 1),
                ));
                p
            }
            ModelConfig::SdfVector(c) => {
                let k = c.kernel;
                let [e1, e2, e3] = c.encoder_channels;
                let [d1, d2] = c.decoder_channels;
                let flat = c.flat_dim()?;
                let h = c.hidden_width;
                let mut p = Vec::with_capacity(21);
                p.extend(conv_pair(&mut rng, "enc1", k, c.window, e1));
                p.extend(conv_pair(&mut rng, "enc2", k, e1, e2));
                p.extend(conv_pair(&mut rng, "enc3", k, e2, e3));
                p.extend(fc_pair(&mut rng, "fc1", flat, h));
                p.extend(fc_pair(&mut rng, "fc2", h, h));
                p.push(Parameter::new(
                    "action.weight",
                    glorot(&mut rng, &[c.action_dim, h], c.action_dim, h),
                ));
                p.extend(fc_pair(&mut rng, "fc3", h, h));
                p.extend(fc_pair(&mut rng, "fc4", h, flat));
                p.extend(conv_pair(&mut rng, "dec1", k, e3, d1));
                p.extend(conv_pair(&mut rng, "dec2", k, d1, d2));
                p.extend(conv_pair(&mut rng, "dec3", k, d2, 1));
                p
            }
            ModelConfig::CopyLastFrame(_) => Vec::new(),
        };
        Ok(PredictiveModel { config, params })
    }

    pub fn sdf_tiling(config: SdfTilingConfig, seed: u64) -> Result<Self> {
        Self::new(ModelConfig::SdfTiling(config), seed)
    }

    pub fn sdf_vector(config: SdfVectorConfig, seed: u64) -> Result<Self> {
        Self::new(ModelConfig::SdfVector(config), seed)
    }

    pub fn copy_last_frame(config: CopyConfig) -> Self {
        Self::new(ModelConfig::CopyLastFrame(config), 0).expect("copy config is validated")
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind()
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    /// Total number of scalar parameters.
    pub fn count_params(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// Runs the model on a batch: `history` is `[B,H,W,window]`, `actions`
    /// is `[B,action_dim]` (normalized). Returns the tape for training.
    pub fn forward_batch(&self, history: &Tensor<T>, actions: &Tensor<T>) -> Result<ForwardPass<T>> {
        let (h, w) = (self.config.input_height(), self.config.input_width());
        let window = self.config.window();
        if history.rank() != 4 || history.shape()[1..] != [h, w, window] {
            return Err(Error::shapes(
                "forward history",
                &[history.shape()[0], h, w, window],
                history.shape(),
            ));
        }
        let b = history.shape()[0];
        if actions.shape() != [b, self.config.action_dim()] {
            return Err(Error::shapes(
                "forward actions",
                &[b, self.config.action_dim()],
                actions.shape(),
            ));
        }
        match self.config {
            ModelConfig::SdfTiling(c) => self.forward_tiling(&c, history, actions),
            ModelConfig::SdfVector(c) => self.forward_vector(&c, history, actions),
            ModelConfig::CopyLastFrame(_) => {
                let mut tape = Tape::new();
                let last = last_history_frame(history);
                let output = tape.leaf(last);
                Ok(ForwardPass {
                    tape,
                    output,
                    basis: None,
                    param_nodes: Vec::new(),
                })
            }
        }
    }

    fn param_leaves(&self, tape: &mut Tape<T>) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| tape.leaf_shared(p.shared_value()))
            .collect()
    }

    fn forward_tiling(
        &self,
        c: &SdfTilingConfig,
        history: &Tensor<T>,
        actions: &Tensor<T>,
    ) -> Result<ForwardPass<T>> {
        let (s, p) = (c.stride, c.padding);
        let (bh, bw) = c.stage_dims()?[3];
        let mut tape = Tape::new();
        let pn = self.param_leaves(&mut tape);
        let x = tape.leaf(history.clone());
        let a = tape.leaf(actions.clone());

        let mut enc = x;
        for i in 0..3 {
            let conv = tape.conv2d(enc, pn[2 * i], pn[2 * i + 1], s, p)?;
            enc = tape.relu(conv);
        }
        let tiled = tape.tile_action(a, bh, bw)?;
        let cat = tape.concat_channels(enc, tiled)?;

        let mut dec = cat;
        for i in 3..6 {
            let deconv = tape.deconv2d(dec, pn[2 * i], pn[2 * i + 1], s, p)?;
            dec = tape.relu(deconv);
        }
        let basis = dec;
        let output = tape.linear_combine(basis, pn[12])?;
        Ok(ForwardPass {
            tape,
            output,
            basis: Some(basis),
            param_nodes: pn,
        })
    }

    fn forward_vector(
        &self,
        c: &SdfVectorConfig,
        history: &Tensor<T>,
        actions: &Tensor<T>,
    ) -> Result<ForwardPass<T>> {
        let (s, p) = (c.stride, c.padding);
        let (bh, bw) = c.stage_dims()?[3];
        let b = history.shape()[0];
        let flat = c.flat_dim()?;
        let mut tape = Tape::new();
        let pn = self.param_leaves(&mut tape);
        let x = tape.leaf(history.clone());
        let a = tape.leaf(actions.clone());

        let mut enc = x;
        for i in 0..3 {
            let conv = tape.conv2d(enc, pn[2 * i], pn[2 * i + 1], s, p)?;
            enc = tape.relu(conv);
        }
        let flattened = tape.reshape(enc, &[b, flat])?;
        // fc1 (relu) → fc2 (linear) → multiplicative action gate
        let m1 = tape.matmul(flattened, pn[6])?;
        let b1 = tape.add_row_bias(m1, pn[7])?;
        let f1 = tape.relu(b1);
        let m2 = tape.matmul(f1, pn[8])?;
        let f2 = tape.add_row_bias(m2, pn[9])?;
        let embed = tape.matmul(a, pn[10])?;
        let gated = tape.mul_elem(f2, embed)?;
        let m3 = tape.matmul(gated, pn[11])?;
        let b3 = tape.add_row_bias(m3, pn[12])?;
        let f3 = tape.relu(b3);
        let m4 = tape.matmul(f3, pn[13])?;
        let b4 = tape.add_row_bias(m4, pn[14])?;
        let f4 = tape.relu(b4);
        let cube = tape.reshape(f4, &[b, bh, bw, c.encoder_channels[2]])?;

        let dc1 = tape.deconv2d(cube, pn[15], pn[16], s, p)?;
        let r1 = tape.relu(dc1);
        let dc2 = tape.deconv2d(r1, pn[17], pn[18], s, p)?;
        let r2 = tape.relu(dc2);
        // final stage stays linear: the output layer must reach any pixel value
        let output = tape.deconv2d(r2, pn[19], pn[20], s, p)?;
        Ok(ForwardPass {
            tape,
            output,
            basis: None,
            param_nodes: pn,
        })
    }

    /// Adds each parameter's gradient from a completed backward pass into the
    /// parameter's gradient buffer.
    pub fn accumulate_grads(&mut self, pass: &ForwardPass<T>) {
        for (param, &node) in self.params.iter_mut().zip(&pass.param_nodes) {
            if let Some(g) = pass.tape.grad(node) {
                param.accumulate_grad(g);
            }
        }
    }

    /// Predicts the next frame for one history window and normalized action.
    pub fn predict(&self, history: &HistoryWindow, action: &ActionVector) -> Result<Prediction<T>> {
        let (h, w) = (self.config.input_height(), self.config.input_width());
        let window = self.config.window();
        if history.as_tensor().shape() != [h, w, window] {
            return Err(Error::shapes(
                "predict history",
                &[h, w, window],
                history.as_tensor().shape(),
            ));
        }
        if self.config.action_dim() != 3 {
            return Err(Error::InvalidConfig(format!(
                "predict needs a 3-component action model, this one takes {}",
                self.config.action_dim()
            )));
        }
        if let ModelConfig::CopyLastFrame(_) = self.config {
            return Ok(Prediction {
                frame: history.last_frame().cast(),
                basis: None,
                basis_weights: None,
            });
        }
        let hist: Tensor<T> = history.as_tensor().cast();
        let hist4 = hist.reshape(&[1, h, w, window])?;
        let act = Tensor::from_fn(&[1, 3], |i| T::from_f64(action.0[i] as f64));
        let pass = self.forward_batch(&hist4, &act)?;
        let frame = pass.tape.value(pass.output).reshape(&[h, w, 1])?;
        let basis = match pass.basis {
            Some(node) => {
                let nb = pass.tape.value(node).shape()[3];
                Some(pass.tape.value(node).reshape(&[h, w, nb])?)
            }
            None => None,
        };
        let basis_weights = match self.config {
            ModelConfig::SdfTiling(_) => Some(self.params[12].value().data().to_vec()),
            _ => None,
        };
        Ok(Prediction {
            frame,
            basis,
            basis_weights,
        })
    }

    /// Feeds the model its own predictions: each predicted frame is clamped
    /// to `[0,1]`, appended to the history, and the oldest frame dropped.
    /// Returns the clamped predicted frames, one per action.
    pub fn rollout(
        &self,
        history: &HistoryWindow,
        actions: &[ActionVector],
    ) -> Result<Vec<Tensor<T>>> {
        let mut window = history.clone();
        let mut frames = Vec::with_capacity(actions.len());
        for action in actions {
            let pred = self.predict(&window, action)?;
            let clamped = pred.frame.clamp(T::ZERO, T::ONE);
            window = window.push_frame(&clamped.cast::<f32>())?;
            frames.push(clamped);
        }
        Ok(frames)
    }
}

/// Extracts the newest history frame: `[B,H,W,window]` → `[B,H,W,1]`.
fn last_history_frame<T: Scalar>(history: &Tensor<T>) -> Tensor<T> {
    let (b, h, w, n) = (
        history.shape()[0],
        history.shape()[1],
        history.shape()[2],
        history.shape()[3],
    );
    Tensor::from_fn(&[b, h, w, 1], |i| history.data()[i * n + n - 1])
}

/// Repeats an action across a spatial grid: `[height, width, 3]` with every
/// pixel equal to the action components.
pub fn tile_action(action: &ActionVector, height: usize, width: usize) -> Tensor<f32> {
    Tensor::from_fn(&[height, width, 3], |i| action.0[i % 3])
}
