//! Model assembly: residual bottleneck classifiers and the convolutional
//! autoencoder, built from the layer primitives with stable parameter names.

use indexmap::IndexMap;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, ValueId};
use crate::error::{Error, Result};
use crate::nn::{self, BnBatchStats, BnMode};
use crate::rng;
use crate::tensor::{Element, Tensor};

/// Bottleneck expansion: the third conv widens by this factor.
pub const EXPANSION: usize = 4;

// ---------------------------------------------------------------------------
// layer and block specs
// ---------------------------------------------------------------------------

/// One primitive layer. `name` keys the parameter store where applicable.
#[derive(Debug, Clone)]
pub enum Layer {
    Conv {
        name: String,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    BatchNorm {
        name: String,
        channels: usize,
        /// Initialize gamma to zero (used on the last BN of a bottleneck so
        /// the residual branch starts as an exact no-op).
        zero_gamma: bool,
    },
    Relu,
    Sigmoid,
    Softmax,
    MaxPool {
        k: usize,
        stride: usize,
        padding: usize,
    },
    GlobalAvgPool,
    Flatten,
    Dense {
        name: String,
        in_features: usize,
        out_features: usize,
    },
    UpsampleNearest {
        factor: usize,
    },
}

/// Sequential step of a model: a single layer or a two-branch residual add.
#[derive(Debug, Clone)]
pub enum Block {
    Plain(Layer),
    Residual {
        main: Vec<Layer>,
        /// Empty means identity shortcut.
        shortcut: Vec<Layer>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Classifier,
    Autoencoder,
}

// ---------------------------------------------------------------------------
// configs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ResNetConfig {
    /// Bottleneck blocks per stage.
    pub stage_blocks: [usize; 4],
    /// Stem/first-stage width; stages run at w, 2w, 4w, 8w.
    pub base_width: usize,
    pub num_classes: usize,
    /// (C, H, W) of one input image.
    pub input: (usize, usize, usize),
    /// 3x3/stride-2 max pool after the stem conv.
    pub stem_pool: bool,
    pub zero_init_residual: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl ResNetConfig {
    /// The 104-convolution bottleneck configuration with a 7-way head.
    pub fn resnet101() -> Self {
        ResNetConfig {
            stage_blocks: [3, 4, 23, 3],
            base_width: 64,
            num_classes: 7,
            input: (3, 224, 224),
            stem_pool: true,
            zero_init_residual: false,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    /// Desk-scale preset: one bottleneck per stage on 32x32 inputs.
    pub fn tiny() -> Self {
        ResNetConfig {
            stage_blocks: [1, 1, 1, 1],
            base_width: 8,
            num_classes: 7,
            input: (3, 32, 32),
            stem_pool: true,
            zero_init_residual: false,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "resnet101" => Ok(Self::resnet101()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!(
                "unknown model preset '{other}' (expected tiny or resnet101)"
            ))),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.stage_blocks.iter().any(|&b| b == 0) {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        if self.base_width == 0 || self.num_classes == 0 {
            return Err(Error::Config(
                "base_width and num_classes must be positive".into(),
            ));
        }
        let (c, h, w) = self.input;
        if c == 0 {
            return Err(Error::Config("input needs at least one channel".into()));
        }
        if h < 7 || w < 7 {
            return Err(Error::Config(format!(
                "input {h}x{w} is smaller than the 7x7 stem receptive field"
            )));
        }
        if self.bn_eps <= 0.0 {
            return Err(Error::Config("bn_eps must be > 0".into()));
        }
        Ok(())
    }

    fn config_string(&self) -> String {
        format!(
            "resnet;blocks={},{},{},{};width={};classes={};input={}x{}x{};pool={};zero={};eps={};mom={}",
            self.stage_blocks[0],
            self.stage_blocks[1],
            self.stage_blocks[2],
            self.stage_blocks[3],
            self.base_width,
            self.num_classes,
            self.input.0,
            self.input.1,
            self.input.2,
            self.stem_pool as u8,
            self.zero_init_residual as u8,
            self.bn_eps,
            self.bn_momentum
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DaeConfig {
    /// (C, H, W) of one input image.
    pub input: (usize, usize, usize),
    /// Channel ladder of the stride-2 encoder convs, e.g. [16, 8].
    pub encoder_channels: Vec<usize>,
}

impl DaeConfig {
    pub fn default_for(input: (usize, usize, usize)) -> Self {
        DaeConfig {
            input,
            encoder_channels: vec![16, 8],
        }
    }

    /// Spatial and channel dims of the latent representation.
    pub fn latent_dims(&self) -> (usize, usize, usize) {
        let down = 1usize << self.encoder_channels.len();
        (
            *self.encoder_channels.last().unwrap_or(&self.input.0),
            self.input.1 / down,
            self.input.2 / down,
        )
    }

    fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config("autoencoder input dims must be positive".into()));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::Config(
                "encoder channel ladder must be non-empty and positive".into(),
            ));
        }
        let down = 1usize << self.encoder_channels.len();
        if h % down != 0 || w % down != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} is not divisible by the total encoder stride {down}"
            )));
        }
        let (lc, lh, lw) = self.latent_dims();
        let latent = lc * lh * lw;
        let input = c * h * w;
        if latent >= input {
            return Err(Error::Config(format!(
                "latent size {latent} ({lc}x{lh}x{lw}) does not compress the {input}-element input"
            )));
        }
        Ok(())
    }

    fn config_string(&self) -> String {
        let ch: Vec<String> = self.encoder_channels.iter().map(|c| c.to_string()).collect();
        format!(
            "dae;channels={};input={}x{}x{}",
            ch.join(","),
            self.input.0,
            self.input.1,
            self.input.2
        )
    }
}

/// Either model family, as recorded in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelConfig {
    Resnet(ResNetConfig),
    Dae(DaeConfig),
}

impl ModelConfig {
    pub fn to_config_string(&self) -> String {
        match self {
            ModelConfig::Resnet(c) => c.config_string(),
            ModelConfig::Dae(c) => c.config_string(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut fields = s.split(';');
        let kind = fields
            .next()
            .ok_or_else(|| Error::Format("empty model config string".into()))?;
        let mut map = std::collections::HashMap::new();
        for f in fields {
            let (k, v) = f
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad model config field '{f}'")))?;
            map.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<String> {
            map.get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("model config missing '{k}'")))
        };
        let parse_dims = |v: &str| -> Result<(usize, usize, usize)> {
            let parts: Vec<&str> = v.split('x').collect();
            if parts.len() != 3 {
                return Err(Error::Format(format!("bad input dims '{v}'")));
            }
            Ok((
                parts[0].parse().map_err(|_| Error::Format(format!("bad dim in '{v}'")))?,
                parts[1].parse().map_err(|_| Error::Format(format!("bad dim in '{v}'")))?,
                parts[2].parse().map_err(|_| Error::Format(format!("bad dim in '{v}'")))?,
            ))
        };
        match kind {
            "resnet" => {
                let blocks: Vec<usize> = get("blocks")?
                    .split(',')
                    .map(|b| b.parse().map_err(|_| Error::Format("bad block count".into())))
                    .collect::<Result<_>>()?;
                if blocks.len() != 4 {
                    return Err(Error::Format("expected 4 stage block counts".into()));
                }
                Ok(ModelConfig::Resnet(ResNetConfig {
                    stage_blocks: [blocks[0], blocks[1], blocks[2], blocks[3]],
                    base_width: get("width")?
                        .parse()
                        .map_err(|_| Error::Format("bad width".into()))?,
                    num_classes: get("classes")?
                        .parse()
                        .map_err(|_| Error::Format("bad classes".into()))?,
                    input: parse_dims(&get("input")?)?,
                    stem_pool: get("pool")? == "1",
                    zero_init_residual: get("zero")? == "1",
                    bn_eps: get("eps")?
                        .parse()
                        .map_err(|_| Error::Format("bad eps".into()))?,
                    bn_momentum: get("mom")?
                        .parse()
                        .map_err(|_| Error::Format("bad momentum".into()))?,
                }))
            }
            "dae" => Ok(ModelConfig::Dae(DaeConfig {
                encoder_channels: get("channels")?
                    .split(',')
                    .map(|c| c.parse().map_err(|_| Error::Format("bad channel".into())))
                    .collect::<Result<_>>()?,
                input: parse_dims(&get("input")?)?,
            })),
            other => Err(Error::Format(format!("unknown model kind '{other}'"))),
        }
    }
}

// ---------------------------------------------------------------------------
// the graph
// ---------------------------------------------------------------------------

/// A layered parameterized network: ordered blocks plus named parameter and
/// buffer tensors. The collective parameter tensors are the weight vector the
/// optimizers update.
pub struct ModelGraph<E: Element = f32> {
    pub kind: ModelKind,
    pub config: ModelConfig,
    blocks: Vec<Block>,
    params: IndexMap<String, Tensor<E>>,
    buffers: IndexMap<String, Tensor<E>>,
    bn_eps: E,
    bn_momentum: E,
}

/// Everything a forward pass exposes for optimization and inspection.
pub struct ForwardPass<E: Element> {
    pub output: ValueId,
    /// Tape ids of every bound parameter, in parameter-store order.
    pub param_ids: Vec<(String, ValueId)>,
    /// Batch statistics per BN layer (train mode only).
    pub bn_stats: Vec<(String, BnBatchStats<E>)>,
    /// (residual-add output, shortcut branch output) per residual block.
    pub residual_taps: Vec<(ValueId, ValueId)>,
}

impl<E: Element> ModelGraph<E> {
    /// A graph with no layers at all (count_conv_layers = 0).
    pub fn empty() -> Self {
        ModelGraph {
            kind: ModelKind::Classifier,
            config: ModelConfig::Resnet(ResNetConfig::tiny()),
            blocks: Vec::new(),
            params: IndexMap::new(),
            buffers: IndexMap::new(),
            bn_eps: E::from_f64(1e-5),
            bn_momentum: E::from_f64(0.1),
        }
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<E>> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.params.get_mut(name)
    }

    pub fn params(&self) -> &IndexMap<String, Tensor<E>> {
        &self.params
    }

    pub fn set_param(&mut self, name: &str, t: Tensor<E>) -> Result<()> {
        match self.params.get_mut(name) {
            Some(slot) => {
                if slot.shape() != t.shape() {
                    return Err(Error::Dimension(format!(
                        "parameter '{name}' has shape {:?}, tried to set {:?}",
                        slot.shape(),
                        t.shape()
                    )));
                }
                *slot = t;
                Ok(())
            }
            None => Err(Error::Contract(format!("unknown parameter '{name}'"))),
        }
    }

    pub fn buffers(&self) -> &IndexMap<String, Tensor<E>> {
        &self.buffers
    }

    pub fn set_buffer(&mut self, name: &str, t: Tensor<E>) -> Result<()> {
        match self.buffers.get_mut(name) {
            Some(slot) => {
                if slot.shape() != t.shape() {
                    return Err(Error::Dimension(format!(
                        "buffer '{name}' has shape {:?}, tried to set {:?}",
                        slot.shape(),
                        t.shape()
                    )));
                }
                *slot = t;
                Ok(())
            }
            None => Err(Error::Contract(format!("unknown buffer '{name}'"))),
        }
    }

    /// Extra (non-layer) buffer, e.g. normalization statistics bundled with a
    /// trained classifier.
    pub fn add_extra_buffer(&mut self, name: &str, t: Tensor<E>) {
        self.buffers.insert(name.to_string(), t);
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<E>> {
        self.buffers.get(name)
    }

    /// Total number of parameter elements.
    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// FNV-1a hash of all parameter bytes in store order.
    pub fn param_hash(&self) -> u64 {
        let mut h = crate::util::Fnv1a::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            for &v in t.data() {
                let mut buf = Vec::with_capacity(8);
                v.write_le(&mut buf);
                h.update(&buf);
            }
        }
        h.finish()
    }

    pub fn cast<F: Element>(&self) -> ModelGraph<F> {
        ModelGraph {
            kind: self.kind,
            config: self.config.clone(),
            blocks: self.blocks.clone(),
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<F>()))
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<F>()))
                .collect(),
            bn_eps: F::from_f64(self.bn_eps.to_f64()),
            bn_momentum: F::from_f64(self.bn_momentum.to_f64()),
        }
    }

    /// Number of convolution layers, including projection-shortcut convs and
    /// excluding pooling and dense layers.
    pub fn count_conv_layers(&self) -> usize {
        let count_in = |layers: &[Layer]| {
            layers
                .iter()
                .filter(|l| matches!(l, Layer::Conv { .. }))
                .count()
        };
        self.blocks
            .iter()
            .map(|b| match b {
                Block::Plain(l) => count_in(std::slice::from_ref(l)),
                Block::Residual { main, shortcut } => count_in(main) + count_in(shortcut),
            })
            .sum()
    }

    /// Width of the final dense head, if the graph has one.
    pub fn head_width(&self) -> Option<usize> {
        self.blocks.iter().rev().find_map(|b| match b {
            Block::Plain(Layer::Dense { out_features, .. }) => Some(*out_features),
            _ => None,
        })
    }

    /// Iterate conv weight shapes in graph order (used by structure audits).
    pub fn conv_weight_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut visit = |layers: &[Layer]| {
            for l in layers {
                if let Layer::Conv { name, .. } = l {
                    let w = &self.params[&format!("{name}.weight")];
                    out.push((name.clone(), w.shape().to_vec()));
                }
            }
        };
        for b in &self.blocks {
            match b {
                Block::Plain(l) => visit(std::slice::from_ref(l)),
                Block::Residual { main, shortcut } => {
                    visit(main);
                    visit(shortcut);
                }
            }
        }
        out
    }

    fn bind_params(&self, tape: &mut Tape<E>) -> IndexMap<String, ValueId> {
        let mut ids = IndexMap::new();
        for (name, t) in &self.params {
            ids.insert(name.clone(), tape.leaf(t.clone()));
        }
        ids
    }

    fn apply_layer(
        &self,
        tape: &mut Tape<E>,
        layer: &Layer,
        x: ValueId,
        mode: BnMode,
        ids: &IndexMap<String, ValueId>,
        bn_stats: &mut Vec<(String, BnBatchStats<E>)>,
    ) -> Result<ValueId> {
        match layer {
            Layer::Conv {
                name,
                stride,
                padding,
                bias,
                ..
            } => {
                let w = ids[&format!("{name}.weight")];
                let b = if *bias {
                    Some(ids[&format!("{name}.bias")])
                } else {
                    None
                };
                tape.conv2d(x, w, b, *stride, *padding)
            }
            Layer::BatchNorm { name, .. } => {
                let gamma = ids[&format!("{name}.gamma")];
                let beta = ids[&format!("{name}.beta")];
                match mode {
                    BnMode::Train => {
                        let (out, stats) = tape.batchnorm_train(x, gamma, beta, self.bn_eps)?;
                        bn_stats.push((name.clone(), stats));
                        Ok(out)
                    }
                    BnMode::Eval => tape.batchnorm_eval(
                        x,
                        gamma,
                        beta,
                        &self.buffers[&format!("{name}.running_mean")],
                        &self.buffers[&format!("{name}.running_var")],
                        self.bn_eps,
                    ),
                }
            }
            Layer::Relu => Ok(tape.relu(x)),
            Layer::Sigmoid => Ok(tape.sigmoid(x)),
            Layer::Softmax => tape.softmax(x),
            Layer::MaxPool { k, stride, padding } => tape.maxpool(x, *k, *stride, *padding),
            Layer::GlobalAvgPool => tape.global_avg_pool(x),
            Layer::Flatten => tape.flatten(x),
            Layer::Dense { name, .. } => {
                let w = ids[&format!("{name}.weight")];
                let b = ids[&format!("{name}.bias")];
                tape.dense(x, w, b)
            }
            Layer::UpsampleNearest { factor } => tape.upsample_nearest(x, *factor),
        }
    }

    /// Record a full forward pass on the tape, binding this graph's own
    /// parameter tensors as leaves.
    pub fn forward(&self, tape: &mut Tape<E>, input: ValueId, mode: BnMode) -> Result<ForwardPass<E>> {
        let ids = self.bind_params(tape);
        self.forward_bound(tape, input, mode, ids)
    }

    /// Forward pass over externally supplied parameter leaves (one per
    /// parameter name). Gradient checking perturbs parameters through here.
    pub fn forward_bound(
        &self,
        tape: &mut Tape<E>,
        input: ValueId,
        mode: BnMode,
        ids: IndexMap<String, ValueId>,
    ) -> Result<ForwardPass<E>> {
        let mut bn_stats = Vec::new();
        let mut residual_taps = Vec::new();
        let mut cur = input;
        for block in &self.blocks {
            match block {
                Block::Plain(layer) => {
                    cur = self.apply_layer(tape, layer, cur, mode, &ids, &mut bn_stats)?;
                }
                Block::Residual { main, shortcut } => {
                    let mut m = cur;
                    for layer in main {
                        m = self.apply_layer(tape, layer, m, mode, &ids, &mut bn_stats)?;
                    }
                    let mut s = cur;
                    for layer in shortcut {
                        s = self.apply_layer(tape, layer, s, mode, &ids, &mut bn_stats)?;
                    }
                    cur = tape.add(m, s)?;
                    residual_taps.push((cur, s));
                }
            }
        }
        Ok(ForwardPass {
            output: cur,
            param_ids: ids.into_iter().collect(),
            bn_stats,
            residual_taps,
        })
    }

    /// Fold train-mode batch statistics into the running buffers.
    pub fn commit_bn_stats(&mut self, stats: &[(String, BnBatchStats<E>)]) -> Result<()> {
        for (name, s) in stats {
            let mean_key = format!("{name}.running_mean");
            let var_key = format!("{name}.running_var");
            let mut params = nn::BnParams {
                gamma: Tensor::zeros(vec![1]),
                beta: Tensor::zeros(vec![1]),
                running_mean: self.buffers[&mean_key].clone(),
                running_var: self.buffers[&var_key].clone(),
            };
            nn::bn_update_running(&mut params, s, self.bn_momentum);
            self.set_buffer(&mean_key, params.running_mean)?;
            self.set_buffer(&var_key, params.running_var)?;
        }
        Ok(())
    }

    /// Simulated output shape for a single input of the configured size;
    /// verifies the wiring is dimensionally consistent.
    pub fn validate_shapes(&self, input: (usize, usize, usize)) -> Result<Vec<usize>> {
        fn walk(layers: &[Layer], mut shape: Vec<usize>) -> Result<Vec<usize>> {
            for l in layers {
                shape = step(l, shape)?;
            }
            Ok(shape)
        }
        fn step(layer: &Layer, shape: Vec<usize>) -> Result<Vec<usize>> {
            match layer {
                Layer::Conv {
                    name,
                    in_ch,
                    out_ch,
                    k,
                    stride,
                    padding,
                    ..
                } => {
                    if shape.len() != 4 || shape[1] != *in_ch {
                        return Err(Error::Config(format!(
                            "conv '{name}' expects {in_ch} channels, upstream shape is {shape:?}"
                        )));
                    }
                    if shape[2] + 2 * padding < *k || shape[3] + 2 * padding < *k {
                        return Err(Error::Config(format!(
                            "conv '{name}' kernel {k} exceeds padded input {}x{}",
                            shape[2] + 2 * padding,
                            shape[3] + 2 * padding
                        )));
                    }
                    Ok(vec![
                        shape[0],
                        *out_ch,
                        nn::conv_out_len(shape[2], *k, *stride, *padding),
                        nn::conv_out_len(shape[3], *k, *stride, *padding),
                    ])
                }
                Layer::BatchNorm { name, channels, .. } => {
                    if shape.len() != 4 || shape[1] != *channels {
                        return Err(Error::Config(format!(
                            "batchnorm '{name}' expects {channels} channels, upstream shape is {shape:?}"
                        )));
                    }
                    Ok(shape)
                }
                Layer::Relu | Layer::Sigmoid | Layer::Softmax => Ok(shape),
                Layer::MaxPool { k, stride, padding } => {
                    if shape.len() != 4
                        || shape[2] + 2 * padding < *k
                        || shape[3] + 2 * padding < *k
                    {
                        return Err(Error::Config(format!(
                            "maxpool window {k} too large for shape {shape:?}"
                        )));
                    }
                    Ok(vec![
                        shape[0],
                        shape[1],
                        nn::conv_out_len(shape[2], *k, *stride, *padding),
                        nn::conv_out_len(shape[3], *k, *stride, *padding),
                    ])
                }
                Layer::GlobalAvgPool => Ok(vec![shape[0], shape[1]]),
                Layer::Flatten => Ok(vec![shape[0], shape[1..].iter().product()]),
                Layer::Dense {
                    name,
                    in_features,
                    out_features,
                } => {
                    if shape.len() != 2 || shape[1] != *in_features {
                        return Err(Error::Config(format!(
                            "dense '{name}' expects {in_features} features, upstream shape is {shape:?}"
                        )));
                    }
                    Ok(vec![shape[0], *out_features])
                }
                Layer::UpsampleNearest { factor } => Ok(vec![
                    shape[0],
                    shape[1],
                    shape[2] * factor,
                    shape[3] * factor,
                ]),
            }
        }
        let (c, h, w) = input;
        let mut shape = vec![1, c, h, w];
        for block in &self.blocks {
            match block {
                Block::Plain(l) => shape = step(l, shape)?,
                Block::Residual { main, shortcut } => {
                    let m = walk(main, shape.clone())?;
                    let s = walk(shortcut, shape)?;
                    if m != s {
                        return Err(Error::Config(format!(
                            "residual branches disagree: main {m:?} vs shortcut {s:?}"
                        )));
                    }
                    shape = m;
                }
            }
        }
        Ok(shape)
    }
}

// ---------------------------------------------------------------------------
// builders
// ---------------------------------------------------------------------------

struct Builder<E: Element> {
    blocks: Vec<Block>,
    params: IndexMap<String, Tensor<E>>,
    buffers: IndexMap<String, Tensor<E>>,
    rng: rand_chacha::ChaCha8Rng,
}

impl<E: Element> Builder<E> {
    fn new(seed: u64) -> Self {
        Builder {
            blocks: Vec::new(),
            params: IndexMap::new(),
            buffers: IndexMap::new(),
            rng: rng::stream(seed, "init", 0),
        }
    }

    fn he_tensor(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor<E> {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("std is positive");
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| E::from_f64(normal.sample(&mut self.rng)))
            .collect();
        Tensor::from_vec(shape, data).expect("shape matches data")
    }

    fn conv(
        &mut self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Layer {
        let w = self.he_tensor(vec![out_ch, in_ch, k, k], in_ch * k * k);
        self.params.insert(format!("{name}.weight"), w);
        if bias {
            self.params
                .insert(format!("{name}.bias"), Tensor::zeros(vec![out_ch]));
        }
        Layer::Conv {
            name: name.to_string(),
            in_ch,
            out_ch,
            k,
            stride,
            padding,
            bias,
        }
    }

    fn batchnorm(&mut self, name: &str, channels: usize, zero_gamma: bool) -> Layer {
        let gamma = if zero_gamma {
            Tensor::zeros(vec![channels])
        } else {
            Tensor::ones(vec![channels])
        };
        self.params.insert(format!("{name}.gamma"), gamma);
        self.params
            .insert(format!("{name}.beta"), Tensor::zeros(vec![channels]));
        self.buffers
            .insert(format!("{name}.running_mean"), Tensor::zeros(vec![channels]));
        self.buffers
            .insert(format!("{name}.running_var"), Tensor::ones(vec![channels]));
        Layer::BatchNorm {
            name: name.to_string(),
            channels,
            zero_gamma,
        }
    }

    fn dense(&mut self, name: &str, in_features: usize, out_features: usize) -> Layer {
        let w = self.he_tensor(vec![out_features, in_features], in_features);
        self.params.insert(format!("{name}.weight"), w);
        self.params
            .insert(format!("{name}.bias"), Tensor::zeros(vec![out_features]));
        Layer::Dense {
            name: name.to_string(),
            in_features,
            out_features,
        }
    }
}

/// Assemble a bottleneck residual classifier:
/// stem conv -> (max pool) -> 4 stages of bottlenecks -> global pool -> dense.
pub fn build_resnet<E: Element>(cfg: &ResNetConfig, seed: u64) -> Result<ModelGraph<E>> {
    cfg.validate()?;
    let mut b = Builder::<E>::new(seed);
    let (in_c, _, _) = cfg.input;
    let w0 = cfg.base_width;

    let stem_conv = b.conv("stem.conv", in_c, w0, 7, 2, 3, false);
    b.blocks.push(Block::Plain(stem_conv));
    let stem_bn = b.batchnorm("stem.bn", w0, false);
    b.blocks.push(Block::Plain(stem_bn));
    b.blocks.push(Block::Plain(Layer::Relu));
    if cfg.stem_pool {
        b.blocks.push(Block::Plain(Layer::MaxPool {
            k: 3,
            stride: 2,
            padding: 1,
        }));
    }

    let mut in_ch = w0;
    for (stage, &blocks) in cfg.stage_blocks.iter().enumerate() {
        let width = w0 << stage;
        let out_ch = width * EXPANSION;
        for block in 0..blocks {
            let stride = if block == 0 && stage > 0 { 2 } else { 1 };
            let block_in = if block == 0 { in_ch } else { out_ch };
            let p = format!("stage{stage}.block{block}");
            let mut main = Vec::new();
            main.push(b.conv(&format!("{p}.conv1"), block_in, width, 1, 1, 0, false));
            main.push(b.batchnorm(&format!("{p}.bn1"), width, false));
            main.push(Layer::Relu);
            main.push(b.conv(&format!("{p}.conv2"), width, width, 3, stride, 1, false));
            main.push(b.batchnorm(&format!("{p}.bn2"), width, false));
            main.push(Layer::Relu);
            main.push(b.conv(&format!("{p}.conv3"), width, out_ch, 1, 1, 0, false));
            main.push(b.batchnorm(&format!("{p}.bn3"), out_ch, cfg.zero_init_residual));
            let shortcut = if block == 0 {
                vec![
                    b.conv(&format!("{p}.shortcut.conv"), block_in, out_ch, 1, stride, 0, false),
                    b.batchnorm(&format!("{p}.shortcut.bn"), out_ch, false),
                ]
            } else {
                Vec::new()
            };
            b.blocks.push(Block::Residual { main, shortcut });
            b.blocks.push(Block::Plain(Layer::Relu));
        }
        in_ch = out_ch;
    }

    b.blocks.push(Block::Plain(Layer::GlobalAvgPool));
    let head = b.dense("head.fc", in_ch, cfg.num_classes);
    b.blocks.push(Block::Plain(head));

    let graph = ModelGraph {
        kind: ModelKind::Classifier,
        config: ModelConfig::Resnet(cfg.clone()),
        blocks: b.blocks,
        params: b.params,
        buffers: b.buffers,
        bn_eps: E::from_f64(cfg.bn_eps),
        bn_momentum: E::from_f64(cfg.bn_momentum),
    };
    let out = graph.validate_shapes(cfg.input)?;
    debug_assert_eq!(out, vec![1, cfg.num_classes]);
    Ok(graph)
}

/// Assemble the autoencoder: stride-2 conv encoder, mirrored
/// nearest-neighbor-upsample decoder, sigmoid output in [0, 1].
pub fn build_dae<E: Element>(cfg: &DaeConfig, seed: u64) -> Result<ModelGraph<E>> {
    cfg.validate()?;
    let mut b = Builder::<E>::new(seed);
    let (in_c, _, _) = cfg.input;

    let mut ch = in_c;
    for (i, &out_ch) in cfg.encoder_channels.iter().enumerate() {
        let conv = b.conv(&format!("enc{i}.conv"), ch, out_ch, 3, 2, 1, true);
        b.blocks.push(Block::Plain(conv));
        b.blocks.push(Block::Plain(Layer::Relu));
        ch = out_ch;
    }
    for (i, stage) in (0..cfg.encoder_channels.len()).rev().enumerate() {
        let out_ch = if stage == 0 {
            cfg.encoder_channels[0]
        } else {
            cfg.encoder_channels[stage - 1]
        };
        b.blocks.push(Block::Plain(Layer::UpsampleNearest { factor: 2 }));
        let conv = b.conv(&format!("dec{i}.conv"), ch, out_ch, 3, 1, 1, true);
        b.blocks.push(Block::Plain(conv));
        b.blocks.push(Block::Plain(Layer::Relu));
        ch = out_ch;
    }
    let out_conv = b.conv("out.conv", ch, in_c, 3, 1, 1, true);
    b.blocks.push(Block::Plain(out_conv));
    b.blocks.push(Block::Plain(Layer::Sigmoid));

    let graph = ModelGraph {
        kind: ModelKind::Autoencoder,
        config: ModelConfig::Dae(cfg.clone()),
        blocks: b.blocks,
        params: b.params,
        buffers: b.buffers,
        bn_eps: E::from_f64(1e-5),
        bn_momentum: E::from_f64(0.1),
    };
    let (c, h, w) = cfg.input;
    let out = graph.validate_shapes(cfg.input)?;
    debug_assert_eq!(out, vec![1, c, h, w]);
    Ok(graph)
}

/// Rebuild a graph of either kind from its recorded config string. Parameters
/// come out freshly initialized (seed 0); checkpoint loading overwrites them.
pub fn build_from_config<E: Element>(config: &ModelConfig, seed: u64) -> Result<ModelGraph<E>> {
    match config {
        ModelConfig::Resnet(c) => build_resnet(c, seed),
        ModelConfig::Dae(c) => build_dae(c, seed),
    }
}

// ---------------------------------------------------------------------------
// inference
// ---------------------------------------------------------------------------

/// Eval-mode class probabilities and argmax labels for a batch.
/// Ties break toward the lower class index.
pub fn predict<E: Element>(
    graph: &ModelGraph<E>,
    batch: &Tensor<E>,
) -> Result<(Tensor<E>, Vec<usize>)> {
    if graph.kind != ModelKind::Classifier {
        return Err(Error::Contract(
            "predict requires a classifier graph".into(),
        ));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(batch.clone());
    let pass = graph.forward(&mut tape, x, BnMode::Eval)?;
    let logits = tape.value(pass.output);
    let probs = nn::softmax_rows(logits)?;
    let (n, k) = probs.dims2("probabilities")?;
    let mut labels = Vec::with_capacity(n);
    for row in 0..n {
        let r = &probs.data()[row * k..(row + 1) * k];
        let mut best = 0usize;
        for (j, &v) in r.iter().enumerate() {
            if v > r[best] {
                best = j;
            }
        }
        labels.push(best);
    }
    Ok((probs, labels))
}

/// Eval-mode forward for an autoencoder batch: the reconstruction.
pub fn reconstruct_batch<E: Element>(graph: &ModelGraph<E>, batch: &Tensor<E>) -> Result<Tensor<E>> {
    if graph.kind != ModelKind::Autoencoder {
        return Err(Error::Contract(
            "reconstruct requires an autoencoder graph".into(),
        ));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(batch.clone());
    let pass = graph.forward(&mut tape, x, BnMode::Eval)?;
    Ok(tape.value(pass.output).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resnet101_has_104_convs_and_a_7_wide_head() {
        let g: ModelGraph<f32> = build_resnet(&ResNetConfig::resnet101(), 1).unwrap();
        assert_eq!(g.count_conv_layers(), 104);
        assert_eq!(g.head_width(), Some(7));
    }

    #[test]
    fn tiny_preset_has_17_convs() {
        let g: ModelGraph<f32> = build_resnet(&ResNetConfig::tiny(), 1).unwrap();
        assert_eq!(g.count_conv_layers(), 1 + 12 + 4);
    }

    #[test]
    fn empty_graph_has_zero_convs() {
        assert_eq!(ModelGraph::<f32>::empty().count_conv_layers(), 0);
    }

    #[test]
    fn dae_conv_count_by_construction() {
        // 2-conv encoder + 2 upsample-convs + 1 output conv = 5.
        let cfg = DaeConfig {
            input: (3, 32, 32),
            encoder_channels: vec![16, 8],
        };
        let g: ModelGraph<f32> = build_dae(&cfg, 1).unwrap();
        assert_eq!(g.count_conv_layers(), 5);
    }

    #[test]
    fn dae_compression_invariant_is_enforced() {
        // 3 -> 32 -> 64 on 32x32 would give a 4096-element latent for a
        // 3072-element input: must be rejected.
        let bad = DaeConfig {
            input: (3, 32, 32),
            encoder_channels: vec![32, 64],
        };
        assert!(matches!(
            build_dae::<f32>(&bad, 1),
            Err(Error::Config(_))
        ));
        // 3 -> 16 -> 8 gives 8x8x8 = 512 < 3072: accepted.
        let good = DaeConfig {
            input: (3, 32, 32),
            encoder_channels: vec![16, 8],
        };
        assert!(build_dae::<f32>(&good, 1).is_ok());
        assert_eq!(good.latent_dims(), (8, 8, 8));
    }

    #[test]
    fn dae_rejects_indivisible_input() {
        let cfg = DaeConfig {
            input: (3, 30, 30),
            encoder_channels: vec![4, 2],
        };
        assert!(matches!(build_dae::<f32>(&cfg, 1), Err(Error::Config(_))));
    }

    #[test]
    fn resnet_rejects_input_below_stem_field() {
        let mut cfg = ResNetConfig::tiny();
        cfg.input = (3, 6, 6);
        assert!(matches!(
            build_resnet::<f32>(&cfg, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dae_output_shape_equals_input_shape() {
        let cfg = DaeConfig {
            input: (3, 16, 16),
            encoder_channels: vec![4, 2],
        };
        let g: ModelGraph<f64> = build_dae(&cfg, 7).unwrap();
        let x = Tensor::<f64>::filled(vec![2, 3, 16, 16], 0.25);
        let y = reconstruct_batch(&g, &x).unwrap();
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn zero_parameter_dae_reconstructs_all_halves() {
        let cfg = DaeConfig {
            input: (3, 16, 16),
            encoder_channels: vec![4, 2],
        };
        let mut g: ModelGraph<f64> = build_dae(&cfg, 7).unwrap();
        let names: Vec<String> = g.param_names().map(String::from).collect();
        for n in names {
            let shape = g.param(&n).unwrap().shape().to_vec();
            g.set_param(&n, Tensor::zeros(shape)).unwrap();
        }
        let x = Tensor::<f64>::filled(vec![1, 3, 16, 16], 0.9);
        let y = reconstruct_batch(&g, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn dae_output_stays_in_unit_interval() {
        let cfg = DaeConfig {
            input: (3, 16, 16),
            encoder_channels: vec![4, 2],
        };
        let g: ModelGraph<f64> = build_dae(&cfg, 3).unwrap();
        let mut rng = crate::rng::stream(5, "dae-range", 0);
        use rand::Rng;
        let x = Tensor::<f64>::from_vec(
            vec![2, 3, 16, 16],
            (0..2 * 3 * 256).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        )
        .unwrap();
        let y = reconstruct_batch(&g, &x).unwrap();
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn predict_rows_are_distributions_and_uniform_for_zero_head() {
        let mut g: ModelGraph<f32> = build_resnet(&ResNetConfig::tiny(), 2).unwrap();
        g.set_param("head.fc.weight", Tensor::zeros(vec![7, 256])).unwrap();
        g.set_param("head.fc.bias", Tensor::zeros(vec![7])).unwrap();
        let x = Tensor::<f32>::filled(vec![2, 3, 32, 32], 0.5);
        let (probs, labels) = predict(&g, &x).unwrap();
        for row in 0..2 {
            let r = &probs.data()[row * 7..(row + 1) * 7];
            let sum: f32 = r.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            for &v in r {
                assert!((v - 1.0 / 7.0).abs() < 1e-6);
            }
        }
        // Uniform rows tie-break to class 0.
        assert_eq!(labels, vec![0, 0]);
    }

    #[test]
    fn residual_blocks_are_identities_under_zero_gamma_init() {
        let mut cfg = ResNetConfig::tiny();
        cfg.zero_init_residual = true;
        let g: ModelGraph<f32> = build_resnet(&cfg, 3).unwrap();
        let mut tape = Tape::new();
        let mut r = crate::rng::stream(8, "resid", 0);
        use rand::Rng;
        let x = tape.leaf(
            Tensor::from_vec(
                vec![2, 3, 32, 32],
                (0..2 * 3 * 1024).map(|_| r.gen_range(0.0f32..1.0)).collect(),
            )
            .unwrap(),
        );
        let pass = g.forward(&mut tape, x, BnMode::Train).unwrap();
        assert_eq!(pass.residual_taps.len(), 4);
        for (add_out, shortcut) in &pass.residual_taps {
            assert_eq!(
                tape.value(*add_out).data(),
                tape.value(*shortcut).data(),
                "block output must equal its shortcut input exactly"
            );
        }
    }

    #[test]
    fn gradients_reach_the_stem_under_zero_gamma_init() {
        let mut cfg = ResNetConfig::tiny();
        cfg.zero_init_residual = true;
        let g: ModelGraph<f32> = build_resnet(&cfg, 3).unwrap();
        let mut tape = Tape::new();
        let mut r = crate::rng::stream(9, "flow", 0);
        use rand::Rng;
        let x = tape.leaf(
            Tensor::from_vec(
                vec![2, 3, 32, 32],
                (0..2 * 3 * 1024).map(|_| r.gen_range(0.0f32..1.0)).collect(),
            )
            .unwrap(),
        );
        let pass = g.forward(&mut tape, x, BnMode::Train).unwrap();
        let loss = tape.softmax_cross_entropy(pass.output, &[1, 4]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let stem_id = pass
            .param_ids
            .iter()
            .find(|(n, _)| n == "stem.conv.weight")
            .unwrap()
            .1;
        let stem_grad = grads.wrt(stem_id);
        let norm: f32 = stem_grad.data().iter().map(|v| v * v).sum();
        assert!(norm > 0.0, "stem gradient must be nonzero");
    }

    #[test]
    fn resnet101_conv_shapes_follow_the_bottleneck_schedule() {
        let g: ModelGraph<f32> = build_resnet(&ResNetConfig::resnet101(), 1).unwrap();
        let shapes = g.conv_weight_shapes();
        assert_eq!(shapes.len(), 104);
        // Independently enumerate the expected shapes.
        let mut expected = vec![("stem.conv".to_string(), vec![64, 3, 7, 7])];
        let stage_blocks = [3usize, 4, 23, 3];
        let mut in_ch = 64usize;
        for (s, &blocks) in stage_blocks.iter().enumerate() {
            let width = 64usize << s;
            let out_ch = width * 4;
            for b in 0..blocks {
                let block_in = if b == 0 { in_ch } else { out_ch };
                let p = format!("stage{s}.block{b}");
                expected.push((format!("{p}.conv1"), vec![width, block_in, 1, 1]));
                expected.push((format!("{p}.conv2"), vec![width, width, 3, 3]));
                expected.push((format!("{p}.conv3"), vec![out_ch, width, 1, 1]));
                if b == 0 {
                    expected.push((format!("{p}.shortcut.conv"), vec![out_ch, block_in, 1, 1]));
                }
            }
            in_ch = out_ch;
        }
        assert_eq!(shapes.len(), expected.len());
        for (got, want) in shapes.iter().zip(expected.iter()) {
            assert_eq!(got.0, want.0);
            assert_eq!(got.1, want.1, "shape mismatch at {}", got.0);
        }
    }

    #[test]
    fn config_string_round_trips() {
        let cfg = ModelConfig::Resnet(ResNetConfig::resnet101());
        let s = cfg.to_config_string();
        assert_eq!(ModelConfig::parse(&s).unwrap(), cfg);
        let d = ModelConfig::Dae(DaeConfig {
            input: (3, 64, 64),
            encoder_channels: vec![12, 6, 3],
        });
        assert_eq!(ModelConfig::parse(&d.to_config_string()).unwrap(), d);
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let a: ModelGraph<f32> = build_resnet(&ResNetConfig::tiny(), 42).unwrap();
        let b: ModelGraph<f32> = build_resnet(&ResNetConfig::tiny(), 42).unwrap();
        let c: ModelGraph<f32> = build_resnet(&ResNetConfig::tiny(), 43).unwrap();
        assert_eq!(a.param_hash(), b.param_hash());
        assert_ne!(a.param_hash(), c.param_hash());
    }
}
