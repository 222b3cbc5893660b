//! The multi-branch encoder/decoder network.
//!
//! A shared trunk (SM encoder) lifts an RGB image into a wide feature stack
//! at `H/4 x W/4`, which is split channel-wise into `L` blocks proportional
//! to the per-branch payload widths `d`. Each block passes through its own
//! branch encoder (SFE) down to an `(d_i, H/8, W/8)` payload, is transmitted
//! independently, recovered by its branch decoder (SFR) back to `H/4 x W/4`,
//! and the concatenation of all recovered blocks is contracted to an image by
//! the SC decoder. Branches that were not transmitted contribute an all-zero
//! recovered block, so any non-empty subset decodes.
//!
//! Layer plan per branch path (3 + 4 + 4 + 3 = 14 conv layers):
//!
//! ```text
//! sm_encoder    conv(3->F)+PReLU, pool, conv(F->2F)+PReLU, pool, conv(2F->C)+PReLU
//! sfe_encoder.i [conv(Ci->Ci)+PReLU] x3, pool, conv(Ci->d_i)+PReLU
//! sfr_decoder.i conv(d_i->Ci)+ReLU, deconv(Ci->Ci)+ReLU, [conv(Ci->Ci)+ReLU] x2
//! sc_decoder    deconv(C->2F)+ReLU, deconv(2F->F)+ReLU, conv(F->3) linear
//! ```
//!
//! with `C = 2F` and `Ci = C * d_i / sum(d)`. Staged training may install
//! cloned groups `sm_encoder_2` / `sc_decoder_2`; pipeline routing picks the
//! originals for single-branch (level-1) transmission and the clones, when
//! present, for transmissions that include branch 1.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use num_rational::Ratio;
use thiserror::Error;

use crate::channel::{draw_fade, noise_std_for_snr, ChannelError, ChannelRealization, ChannelSpec};
use crate::rng::Rng;
use crate::tensor::{ops, Parameter, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    InvalidInput(String),
    #[error("unknown parameter group '{0}'")]
    UnknownGroup(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SafeConfig {
    /// Number of sub-semantic branches `L`.
    pub branches: usize,
    /// Payload channel count per branch (`d_i`).
    pub d: Vec<usize>,
    /// First-layer feature width `F`; the trunk output has `2F` channels.
    pub base_width: usize,
    /// Input image channels (RGB).
    pub input_channels: usize,
    /// Input spatial extent, both divisible by 8.
    pub input_hw: (usize, usize),
    /// Trunk conv depth (the implemented plan uses 3).
    pub common_depth: usize,
    /// Branch conv depth (the implemented plan uses 4).
    pub branch_depth: usize,
}

impl Default for SafeConfig {
    fn default() -> Self {
        SafeConfig {
            branches: 2,
            d: vec![8, 8],
            base_width: 16,
            input_channels: 3,
            input_hw: (32, 32),
            common_depth: 3,
            branch_depth: 4,
        }
    }
}

impl SafeConfig {
    /// Full-scale configuration (224x224 input).
    pub fn paper_scale() -> Self {
        SafeConfig {
            input_hw: (224, 224),
            ..SafeConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.branches == 0 {
            return Err(NetError::InvalidConfig("branches must be >= 1".into()));
        }
        if self.d.len() != self.branches {
            return Err(NetError::InvalidConfig(format!(
                "d has {} entries for {} branches",
                self.d.len(),
                self.branches
            )));
        }
        if self.d.iter().any(|&di| di == 0) {
            return Err(NetError::InvalidConfig("every d_i must be >= 1".into()));
        }
        let (h, w) = self.input_hw;
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(NetError::InvalidConfig(format!(
                "input extent {h}x{w} must be positive and divisible by 8"
            )));
        }
        if self.base_width == 0 {
            return Err(NetError::InvalidConfig("base_width must be >= 1".into()));
        }
        if self.input_channels == 0 {
            return Err(NetError::InvalidConfig("input_channels must be >= 1".into()));
        }
        if self.common_depth != 3 || self.branch_depth != 4 {
            return Err(NetError::InvalidConfig(format!(
                "implemented layer plan requires common_depth 3 and branch_depth 4, got {} and {}",
                self.common_depth, self.branch_depth
            )));
        }
        let d_sum: usize = self.d.iter().sum();
        for (i, &di) in self.d.iter().enumerate() {
            let c = self.trunk_channels() * di;
            if c % d_sum != 0 || c / d_sum == 0 {
                return Err(NetError::InvalidConfig(format!(
                    "trunk width {} cannot be split proportionally to d (branch {i}: {c}/{d_sum} is not a positive integer)",
                    self.trunk_channels()
                )));
            }
        }
        Ok(())
    }

    /// Trunk output channel count `C = 2F`.
    pub fn trunk_channels(&self) -> usize {
        2 * self.base_width
    }

    /// Channel count `C_i` of each split block, proportional to `d_i`.
    pub fn split_channels(&self) -> Vec<usize> {
        let d_sum: usize = self.d.iter().sum();
        self.d
            .iter()
            .map(|&di| self.trunk_channels() * di / d_sum)
            .collect()
    }

    /// Payload spatial extent `(H/8, W/8)`.
    pub fn payload_hw(&self) -> (usize, usize) {
        (self.input_hw.0 / 8, self.input_hw.1 / 8)
    }

    /// Payload shape `(d_i, H/8, W/8)` of branch `i`.
    pub fn payload_shape(&self, i: usize) -> Option<(usize, usize, usize)> {
        let (ph, pw) = self.payload_hw();
        self.d.get(i).map(|&di| (di, ph, pw))
    }
}

/// Bandwidth ratio of branch `i`: `(H/8 * W/8 * d_i) / (H * W * input_channels)`
/// as an exact rational. Independent of `H` and `W` (they cancel).
pub fn bandwidth_ratio(config: &SafeConfig, i: usize) -> Result<Ratio<u64>, NetError> {
    if i >= config.branches {
        return Err(NetError::InvalidInput(format!(
            "branch index {i} out of range (L = {})",
            config.branches
        )));
    }
    let (h, w) = config.input_hw;
    if h % 8 != 0 || w % 8 != 0 {
        return Err(NetError::InvalidConfig(format!(
            "input extent {h}x{w} must be divisible by 8"
        )));
    }
    let num = (h as u64 / 8) * (w as u64 / 8) * config.d[i] as u64;
    let den = h as u64 * w as u64 * config.input_channels as u64;
    Ok(Ratio::new(num, den))
}

/// Sum of per-branch bandwidth ratios (all branches selected).
pub fn total_bandwidth_ratio(config: &SafeConfig) -> Result<Ratio<u64>, NetError> {
    let mut total = Ratio::new(0, 1);
    for i in 0..config.branches {
        total += bandwidth_ratio(config, i)?;
    }
    Ok(total)
}

/// One transmittable latent block.
#[derive(Debug)]
pub struct SubSemantic {
    pub index: usize,
    /// `[N, d_i, H/8, W/8]` payload, still attached to the graph.
    pub payload: Tensor<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Act {
    PRelu,
    Relu,
    Linear,
}

#[derive(Debug, Clone, Copy)]
enum ConvKind {
    Standard { stride: usize, padding: usize },
    Transposed { stride: usize, padding: usize, output_padding: usize },
}

#[derive(Debug)]
struct ConvLayer {
    kind: ConvKind,
    weight: Parameter,
    bias: Parameter,
    slope: Option<Parameter>,
    act: Act,
}

#[derive(Debug)]
enum Item {
    Conv(ConvLayer),
    Pool,
}

/// Named parameter group holding an ordered stack of layers.
#[derive(Debug)]
pub struct Block {
    name: String,
    items: Vec<Item>,
}

impl Block {
    pub fn name(&self) -> &str {
        &self.name
    }

    /// Number of conv/deconv layers (pooling layers are parameter-free).
    pub fn conv_count(&self) -> usize {
        self.items.iter().filter(|i| matches!(i, Item::Conv(_))).count()
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        for item in &self.items {
            if let Item::Conv(layer) = item {
                out.push(&layer.weight);
                out.push(&layer.bias);
                if let Some(s) = &layer.slope {
                    out.push(s);
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        for item in &mut self.items {
            if let Item::Conv(layer) = item {
                out.push(&mut layer.weight);
                out.push(&mut layer.bias);
                if let Some(s) = &mut layer.slope {
                    out.push(s);
                }
            }
        }
        out
    }

    fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>, NetError> {
        let mut cur = x.clone();
        for item in &self.items {
            cur = match item {
                Item::Pool => ops::maxpool2d(&cur)?,
                Item::Conv(layer) => {
                    let y = match layer.kind {
                        ConvKind::Standard { stride, padding } => {
                            ops::conv2d(&cur, layer.weight.tensor(), layer.bias.tensor(), stride, padding)?
                        }
                        ConvKind::Transposed { stride, padding, output_padding } => ops::conv_transpose2d(
                            &cur,
                            layer.weight.tensor(),
                            layer.bias.tensor(),
                            stride,
                            padding,
                            output_padding,
                        )?,
                    };
                    match layer.act {
                        Act::PRelu => ops::prelu(&y, layer.slope.as_ref().expect("prelu has slope").tensor())?,
                        Act::Relu => ops::relu(&y),
                        Act::Linear => y,
                    }
                }
            };
        }
        Ok(cur)
    }

    /// Deep copy under a new group name; parameter names are re-prefixed.
    fn deep_clone_as(&self, new_name: &str) -> Block {
        let rename = |p: &Parameter| {
            let mut q = p.deep_clone();
            let suffix = p
                .name()
                .strip_prefix(&self.name)
                .expect("parameter name carries its group prefix");
            q.set_name(format!("{new_name}{suffix}"));
            q
        };
        let items = self
            .items
            .iter()
            .map(|item| match item {
                Item::Pool => Item::Pool,
                Item::Conv(layer) => Item::Conv(ConvLayer {
                    kind: layer.kind,
                    weight: rename(&layer.weight),
                    bias: rename(&layer.bias),
                    slope: layer.slope.as_ref().map(&rename),
                    act: layer.act,
                }),
            })
            .collect();
        Block {
            name: new_name.to_string(),
            items,
        }
    }

    /// Zeroes the weight and bias of the last conv layer, making the block
    /// output exactly zero (its activations pass zero unchanged).
    pub fn zero_last_conv(&mut self) {
        for item in self.items.iter_mut().rev() {
            if let Item::Conv(layer) = item {
                let n = layer.weight.numel();
                layer.weight.set_data(&vec![0.0; n]);
                let n = layer.bias.numel();
                layer.bias.set_data(&vec![0.0; n]);
                return;
            }
        }
    }
}

struct BlockBuilder<'a> {
    block: Block,
    conv_idx: usize,
    rng: &'a mut Rng,
}

impl<'a> BlockBuilder<'a> {
    fn new(name: &str, rng: &'a mut Rng) -> Self {
        BlockBuilder {
            block: Block {
                name: name.to_string(),
                items: Vec::new(),
            },
            conv_idx: 0,
            rng,
        }
    }

    fn push_conv(&mut self, kind: ConvKind, w_shape: [usize; 4], c_out: usize, act: Act) {
        // Kaiming-style fan-in scaling; fan-in is Cin * kh * kw.
        let fan_in = match kind {
            ConvKind::Standard { .. } => w_shape[1] * w_shape[2] * w_shape[3],
            ConvKind::Transposed { .. } => w_shape[0] * w_shape[2] * w_shape[3],
        };
        let std = (2.0 / fan_in as f64).sqrt();
        let name = |field: &str| format!("{}.conv{}.{}", self.block.name, self.conv_idx, field);
        let weight = Parameter::new(name("weight"), Tensor::randn(&w_shape, std, self.rng), true);
        let bias = Parameter::new(name("bias"), Tensor::zeros(&[c_out]), true);
        let slope = (act == Act::PRelu)
            .then(|| Parameter::new(name("slope"), Tensor::scalar(0.25), true));
        self.block.items.push(Item::Conv(ConvLayer {
            kind,
            weight,
            bias,
            slope,
            act,
        }));
        self.conv_idx += 1;
    }

    fn conv(&mut self, c_in: usize, c_out: usize, act: Act) {
        self.push_conv(
            ConvKind::Standard { stride: 1, padding: 1 },
            [c_out, c_in, 3, 3],
            c_out,
            act,
        );
    }

    fn deconv(&mut self, c_in: usize, c_out: usize, act: Act) {
        // stride 2, kernel 3, padding 1, output_padding 1: exact 2x upsampling.
        self.push_conv(
            ConvKind::Transposed { stride: 2, padding: 1, output_padding: 1 },
            [c_in, c_out, 3, 3],
            c_out,
            act,
        );
    }

    fn pool(&mut self) {
        self.block.items.push(Item::Pool);
    }

    fn finish(self) -> Block {
        self.block
    }
}

/// Which trunk / combining decoder a pipeline variant uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Routing {
    pub alt_trunk: bool,
    pub alt_decoder: bool,
}

/// One branch's transmission record inside a pipeline run.
pub struct BranchTransmission {
    pub index: usize,
    /// Power-normalized symbols put on the channel (detached copy).
    pub transmitted: Tensor<f32>,
    /// Receiver-side payload after equalization and rescaling (in graph).
    pub received: Tensor<f32>,
    pub realization: ChannelRealization,
}

/// Output of an end-to-end pipeline run.
pub struct PipelineRun {
    /// Unclamped reconstruction, still attached to the graph.
    pub reconstruction: Tensor<f32>,
    pub branches: Vec<BranchTransmission>,
}

/// The assembled network: shared trunk, per-branch coders, combining decoder,
/// and optional cloned groups installed by staged training.
#[derive(Debug)]
pub struct SafeNetwork {
    config: SafeConfig,
    strategy: u8,
    sm_encoder: Block,
    sfe_encoders: Vec<Block>,
    sfr_decoders: Vec<Block>,
    sc_decoder: Block,
    sm_encoder_alt: Option<Block>,
    sc_decoder_alt: Option<Block>,
}

impl SafeNetwork {
    /// Builds a freshly initialized network; identical seeds give bit-identical
    /// parameters.
    pub fn build(config: &SafeConfig, rng: &mut Rng) -> Result<SafeNetwork, NetError> {
        config.validate()?;
        let f = config.base_width;
        let c = config.trunk_channels();
        let ci = config.split_channels();

        let mut b = BlockBuilder::new("sm_encoder", rng);
        b.conv(config.input_channels, f, Act::PRelu);
        b.pool();
        b.conv(f, 2 * f, Act::PRelu);
        b.pool();
        b.conv(2 * f, c, Act::PRelu);
        let sm_encoder = b.finish();

        let mut sfe_encoders = Vec::with_capacity(config.branches);
        let mut sfr_decoders = Vec::with_capacity(config.branches);
        for i in 0..config.branches {
            let (cb, di) = (ci[i], config.d[i]);
            let mut b = BlockBuilder::new(&format!("sfe_encoder.{i}"), rng);
            b.conv(cb, cb, Act::PRelu);
            b.conv(cb, cb, Act::PRelu);
            b.conv(cb, cb, Act::PRelu);
            b.pool();
            b.conv(cb, di, Act::PRelu);
            sfe_encoders.push(b.finish());

            let mut b = BlockBuilder::new(&format!("sfr_decoder.{i}"), rng);
            b.conv(di, cb, Act::Relu);
            b.deconv(cb, cb, Act::Relu);
            b.conv(cb, cb, Act::Relu);
            b.conv(cb, cb, Act::Relu);
            sfr_decoders.push(b.finish());
        }

        let mut b = BlockBuilder::new("sc_decoder", rng);
        b.deconv(c, 2 * f, Act::Relu);
        b.deconv(2 * f, f, Act::Relu);
        b.conv(f, config.input_channels, Act::Linear);
        let sc_decoder = b.finish();

        Ok(SafeNetwork {
            config: config.clone(),
            strategy: 0,
            sm_encoder,
            sfe_encoders,
            sfr_decoders,
            sc_decoder,
            sm_encoder_alt: None,
            sc_decoder_alt: None,
        })
    }

    pub fn config(&self) -> &SafeConfig {
        &self.config
    }

    /// Strategy that trained this network (0 = untrained/plain).
    pub fn strategy(&self) -> u8 {
        self.strategy
    }

    pub fn set_strategy(&mut self, strategy: u8) {
        self.strategy = strategy;
    }

    pub fn has_alt_trunk(&self) -> bool {
        self.sm_encoder_alt.is_some()
    }

    pub fn has_alt_decoder(&self) -> bool {
        self.sc_decoder_alt.is_some()
    }

    /// Installs `sc_decoder_2` as a deep copy of the current SC decoder.
    pub fn install_sc_decoder_alt(&mut self) {
        self.sc_decoder_alt = Some(self.sc_decoder.deep_clone_as("sc_decoder_2"));
    }

    /// Installs `sm_encoder_2` as a deep copy of the current SM encoder.
    pub fn install_sm_encoder_alt(&mut self) {
        self.sm_encoder_alt = Some(self.sm_encoder.deep_clone_as("sm_encoder_2"));
    }

    fn blocks(&self) -> Vec<&Block> {
        let mut out = vec![&self.sm_encoder];
        out.extend(self.sfe_encoders.iter());
        out.extend(self.sfr_decoders.iter());
        out.push(&self.sc_decoder);
        if let Some(b) = &self.sm_encoder_alt {
            out.push(b);
        }
        if let Some(b) = &self.sc_decoder_alt {
            out.push(b);
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut Block> {
        let mut out: Vec<&mut Block> = vec![&mut self.sm_encoder];
        out.extend(self.sfe_encoders.iter_mut());
        out.extend(self.sfr_decoders.iter_mut());
        out.push(&mut self.sc_decoder);
        if let Some(b) = &mut self.sm_encoder_alt {
            out.push(b);
        }
        if let Some(b) = &mut self.sc_decoder_alt {
            out.push(b);
        }
        out
    }

    /// Group names in canonical order.
    pub fn group_names(&self) -> Vec<String> {
        self.blocks().iter().map(|b| b.name.clone()).collect()
    }

    pub fn group(&self, name: &str) -> Result<&Block, NetError> {
        self.blocks()
            .into_iter()
            .find(|b| b.name == name)
            .ok_or_else(|| NetError::UnknownGroup(name.to_string()))
    }

    pub fn group_mut(&mut self, name: &str) -> Result<&mut Block, NetError> {
        self.blocks_mut()
            .into_iter()
            .find(|b| b.name == name)
            .ok_or_else(|| NetError::UnknownGroup(name.to_string()))
    }

    /// All parameters in canonical order.
    pub fn params(&self) -> Vec<&Parameter> {
        self.blocks().into_iter().flat_map(|b| b.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.blocks_mut().into_iter().flat_map(|b| b.params_mut()).collect()
    }

    pub fn set_group_trainable(&mut self, name: &str, flag: bool) -> Result<(), NetError> {
        let block = self.group_mut(name)?;
        for p in block.params_mut() {
            p.set_trainable(flag);
        }
        Ok(())
    }

    /// Conv layer count along the path of branch `i` (trunk + branch coders +
    /// combining decoder).
    pub fn conv_layers_per_branch_path(&self, i: usize) -> Result<usize, NetError> {
        if i >= self.config.branches {
            return Err(NetError::InvalidInput(format!(
                "branch index {i} out of range (L = {})",
                self.config.branches
            )));
        }
        Ok(self.sm_encoder.conv_count()
            + self.sfe_encoders[i].conv_count()
            + self.sfr_decoders[i].conv_count()
            + self.sc_decoder.conv_count())
    }

    fn check_image_shape(&self, image: &Tensor<f32>) -> Result<(), NetError> {
        let s = image.shape();
        let (h, w) = self.config.input_hw;
        if s.len() != 4 || s[1] != self.config.input_channels || s[2] != h || s[3] != w {
            return Err(NetError::InvalidInput(format!(
                "image shape {s:?} does not match configured [N, {}, {h}, {w}]",
                self.config.input_channels
            )));
        }
        Ok(())
    }

    /// Encodes a `[N, 3, H, W]` image batch into all `L` sub-semantics using
    /// the original trunk.
    pub fn encode(&self, image: &Tensor<f32>) -> Result<Vec<SubSemantic>, NetError> {
        self.encode_routed(image, false)
    }

    /// Encode with an explicit trunk selection (the clone, when installed).
    pub fn encode_routed(&self, image: &Tensor<f32>, alt_trunk: bool) -> Result<Vec<SubSemantic>, NetError> {
        self.check_image_shape(image)?;
        let trunk = if alt_trunk {
            self.sm_encoder_alt
                .as_ref()
                .ok_or_else(|| NetError::InvalidInput("no cloned trunk installed".into()))?
        } else {
            &self.sm_encoder
        };
        let features = trunk.forward(image)?;
        let ci = self.config.split_channels();
        let mut subs = Vec::with_capacity(self.config.branches);
        let mut offset = 0;
        for (i, &c) in ci.iter().enumerate() {
            let block = ops::narrow_channels(&features, offset, c)?;
            offset += c;
            let payload = self.sfe_encoders[i].forward(&block)?;
            subs.push(SubSemantic { index: i, payload });
        }
        Ok(subs)
    }

    fn check_subset(&self, received: &[(usize, Tensor<f32>)]) -> Result<(), NetError> {
        if received.is_empty() {
            return Err(NetError::InvalidInput("received subset is empty".into()));
        }
        let mut seen = vec![false; self.config.branches];
        for (i, _) in received {
            if *i >= self.config.branches {
                return Err(NetError::InvalidInput(format!(
                    "branch index {i} out of range (L = {})",
                    self.config.branches
                )));
            }
            if seen[*i] {
                return Err(NetError::InvalidInput(format!("duplicate branch index {i}")));
            }
            seen[*i] = true;
        }
        Ok(())
    }

    /// Decodes a subset of received payloads with the original decoder.
    pub fn decode(&self, received: &[(usize, Tensor<f32>)]) -> Result<Tensor<f32>, NetError> {
        self.decode_routed(received, false)
    }

    /// Decode with an explicit decoder selection (the clone, when installed).
    pub fn decode_routed(
        &self,
        received: &[(usize, Tensor<f32>)],
        alt_decoder: bool,
    ) -> Result<Tensor<f32>, NetError> {
        let recovered = self.recover_blocks(received)?;
        self.contract(recovered, alt_decoder)
    }

    /// Runs each received payload through its branch decoder and zero-fills
    /// the recovered feature block of every missing branch.
    fn recover_blocks(
        &self,
        received: &[(usize, Tensor<f32>)],
    ) -> Result<Vec<Tensor<f32>>, NetError> {
        self.check_subset(received)?;
        let n = received[0].1.shape()[0];
        let ci = self.config.split_channels();
        let (ph, pw) = self.config.payload_hw();
        let mut blocks: Vec<Option<Tensor<f32>>> = (0..self.config.branches).map(|_| None).collect();
        for (i, payload) in received {
            let want = vec![n, self.config.d[*i], ph, pw];
            if payload.shape() != want {
                return Err(NetError::InvalidInput(format!(
                    "branch {i} payload shape {:?} does not match {want:?}",
                    payload.shape()
                )));
            }
            blocks[*i] = Some(self.sfr_decoders[*i].forward(payload)?);
        }
        let (fh, fw) = (self.config.input_hw.0 / 4, self.config.input_hw.1 / 4);
        Ok(blocks
            .into_iter()
            .enumerate()
            .map(|(i, b)| b.unwrap_or_else(|| Tensor::zeros(&[n, ci[i], fh, fw])))
            .collect())
    }

    /// Concatenates recovered feature blocks and applies the combining decoder.
    /// Exposed so the zero-fill rule can be exercised directly.
    pub fn contract(&self, recovered: Vec<Tensor<f32>>, alt_decoder: bool) -> Result<Tensor<f32>, NetError> {
        let decoder = if alt_decoder {
            self.sc_decoder_alt
                .as_ref()
                .ok_or_else(|| NetError::InvalidInput("no cloned decoder installed".into()))?
        } else {
            &self.sc_decoder
        };
        let cat = ops::concat_channels(&recovered)?;
        Ok(decoder.forward(&cat)?)
    }

    /// Pipeline routing: level-1 (single-branch-0) transmission keeps the
    /// original groups; a level-2 transmission uses the clones its training
    /// strategy installed.
    pub fn routing(&self, train_x: u8, subset: &[usize]) -> Routing {
        let includes_later_branch = subset.iter().any(|&i| i > 0);
        match self.strategy {
            2 => Routing {
                alt_trunk: false,
                alt_decoder: includes_later_branch && self.has_alt_decoder(),
            },
            3 => {
                let level2 = train_x >= 2 && self.has_alt_trunk() && self.has_alt_decoder();
                Routing {
                    alt_trunk: level2,
                    alt_decoder: level2,
                }
            }
            _ => Routing {
                alt_trunk: false,
                alt_decoder: false,
            },
        }
    }

    /// End-to-end run: encode, transmit the chosen subset branch-by-branch
    /// (ascending index), decode. Routing is inferred from the subset: any
    /// set including a branch beyond 0 is treated as a level-2 transmission.
    pub fn forward_pipeline(
        &self,
        image: &Tensor<f32>,
        channel: &ChannelSpec,
        subset: &[usize],
        rng: &mut Rng,
    ) -> Result<PipelineRun, NetError> {
        let train_x = if subset.iter().any(|&i| i > 0) { 2 } else { 1 };
        self.forward_pipeline_routed(image, Some(channel), subset, train_x, rng)
    }

    /// End-to-end run with explicit level selection; `channel = None` skips
    /// normalization and noise entirely (the noiseless autoencoder path).
    pub fn forward_pipeline_routed(
        &self,
        image: &Tensor<f32>,
        channel: Option<&ChannelSpec>,
        subset: &[usize],
        train_x: u8,
        rng: &mut Rng,
    ) -> Result<PipelineRun, NetError> {
        let mut order: Vec<usize> = subset.to_vec();
        order.sort_unstable();
        let routing = self.routing(train_x, &order);
        let subs = self.encode_routed(image, routing.alt_trunk)?;

        let mut received = Vec::with_capacity(order.len());
        let mut branches = Vec::with_capacity(order.len());
        for &i in &order {
            if i >= subs.len() {
                return Err(NetError::InvalidInput(format!(
                    "branch index {i} out of range (L = {})",
                    self.config.branches
                )));
            }
            let payload = &subs[i].payload;
            match channel {
                None => {
                    received.push((i, payload.clone()));
                    branches.push(BranchTransmission {
                        index: i,
                        transmitted: payload.detach(),
                        received: payload.clone(),
                        realization: ChannelRealization {
                            fade: 1.0,
                            noise_seed: rng.seed(),
                        },
                    });
                }
                Some(spec) => {
                    // Transparent power control: symbols go out normalized to
                    // unit average power (defining the SNR), the receiver
                    // rescales by the known factor. Folding both into one
                    // offset keeps the zero-noise limit bit-exact and the
                    // gradient through the channel an identity.
                    let data = payload.to_vec();
                    let sum_sq: f64 = data.iter().map(|&v| (v as f64) * (v as f64)).sum();
                    if sum_sq == 0.0 {
                        return Err(NetError::InvalidInput(format!(
                            "branch {i} payload is all zero, transmit power undefined"
                        )));
                    }
                    let m = data.len() as f64;
                    let scale = (m / sum_sq).sqrt();
                    let h = draw_fade(spec.kind, rng);
                    let sigma = noise_std_for_snr(spec.snr_db);
                    let offset: Vec<f32> = (0..data.len())
                        .map(|_| (rng.normal() * sigma / (scale * h)) as f32)
                        .collect();
                    let y = ops::add_constant(payload, &offset)?;
                    let transmitted = Tensor::from_vec(
                        &payload.shape(),
                        data.iter().map(|&v| (v as f64 * scale) as f32).collect(),
                    )?;
                    received.push((i, y.clone()));
                    branches.push(BranchTransmission {
                        index: i,
                        transmitted,
                        received: y,
                        realization: ChannelRealization {
                            fade: h,
                            noise_seed: rng.seed(),
                        },
                    });
                }
            }
        }
        let reconstruction = self.decode_routed(&received, routing.alt_decoder)?;
        Ok(PipelineRun {
            reconstruction,
            branches,
        })
    }

    /// Serializes to the checkpoint byte format.
    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::to_bytes(self)
    }

    /// Deserializes from the checkpoint byte format.
    pub fn from_bytes(bytes: &[u8]) -> Result<SafeNetwork, NetError> {
        checkpoint::from_bytes(bytes)
    }

}
