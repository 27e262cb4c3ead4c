//! U-Net and dilated U-Net builders, forward execution and receptive-field analysis.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::autograd::{ConvSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{he_normal_init, Element, Tensor};

/// Initial negative-side slope of every PReLU.
pub const PRELU_INIT: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arch {
    Plain,
    Dilated,
}

impl Arch {
    pub fn label(self) -> &'static str {
        match self {
            Arch::Plain => "unet",
            Arch::Dilated => "dilated",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" | "plain" => Ok(Arch::Plain),
            "dilated" => Ok(Arch::Dilated),
            other => Err(Error::InvalidConfig(format!("unknown arch {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleMode {
    Transposed,
    Bilinear,
}

impl FromStr for UpsampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transposed" => Ok(UpsampleMode::Transposed),
            "bilinear" => Ok(UpsampleMode::Bilinear),
            other => Err(Error::InvalidConfig(format!("unknown upsample mode {other:?}"))),
        }
    }
}

impl fmt::Display for UpsampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpsampleMode::Transposed => "transposed",
            UpsampleMode::Bilinear => "bilinear",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Number of pooling steps.
    pub depth: usize,
    pub convs_per_level: usize,
    /// Output channels of the first level; doubled at each level below it.
    pub base_channels: usize,
    pub residual_blocks: bool,
    pub deep_supervision: bool,
    pub upsample_mode: UpsampleMode,
    /// Dilations of the extra bottleneck convs (dilated arch only).
    pub dilations: Vec<usize>,
    pub input_size: (usize, usize),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Arch::Plain,
            depth: 3,
            convs_per_level: 2,
            base_channels: 16,
            residual_blocks: true,
            deep_supervision: true,
            upsample_mode: UpsampleMode::Transposed,
            dilations: vec![2, 4],
            input_size: (128, 128),
        }
    }
}

impl ModelConfig {
    pub fn new(arch: Arch) -> Self {
        ModelConfig {
            arch,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.depth == 0 || self.depth > 16 {
            return bad(format!("depth must be in 1..=16, got {}", self.depth));
        }
        if self.convs_per_level == 0 {
            return bad("convs_per_level must be >= 1".into());
        }
        if self.base_channels == 0 {
            return bad("base_channels must be >= 1".into());
        }
        self.base_channels
            .checked_shl(self.depth as u32)
            .filter(|c| c >> self.depth == self.base_channels)
            .ok_or_else(|| Error::InvalidConfig("channel count overflows".into()))?;
        let (h, w) = self.input_size;
        let step = 1usize << self.depth;
        if h == 0 || w == 0 || h % step != 0 || w % step != 0 {
            return bad(format!("input {h}x{w} not divisible by 2^{}", self.depth));
        }
        if self.arch == Arch::Dilated {
            if self.dilations.is_empty() {
                return bad("dilated arch needs at least one dilation".into());
            }
            if self.dilations[0] < 2 || self.dilations.windows(2).any(|p| p[1] <= p[0]) {
                return bad(format!(
                    "dilations must be strictly increasing and >= 2, got {:?}",
                    self.dilations
                ));
            }
        }
        Ok(())
    }

    /// Output channels at shrinking level `l` (0-based); `l == depth` is the bottleneck.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Dilations actually used by this arch.
    pub fn active_dilations(&self) -> &[usize] {
        match self.arch {
            Arch::Plain => &[],
            Arch::Dilated => &self.dilations,
        }
    }

    /// `key=value` lines, one per field.
    pub fn to_kv(&self) -> String {
        let dil: Vec<String> = self.dilations.iter().map(usize::to_string).collect();
        format!(
            "arch={}\ndepth={}\nconvs_per_level={}\nbase_channels={}\nresidual_blocks={}\n\
             deep_supervision={}\nupsample_mode={}\ndilations={}\ninput_size={}x{}\n",
            self.arch,
            self.depth,
            self.convs_per_level,
            self.base_channels,
            self.residual_blocks,
            self.deep_supervision,
            self.upsample_mode,
            dil.join(","),
            self.input_size.0,
            self.input_size.1,
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let parse_err = |k: &str, v: &str| Error::InvalidConfig(format!("bad value {v:?} for {k}"));
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("malformed line {line:?}")))?;
            let num = |v: &str| v.parse::<usize>().map_err(|_| parse_err(k, v));
            let flag = |v: &str| v.parse::<bool>().map_err(|_| parse_err(k, v));
            match k {
                "arch" => cfg.arch = v.parse()?,
                "depth" => cfg.depth = num(v)?,
                "convs_per_level" => cfg.convs_per_level = num(v)?,
                "base_channels" => cfg.base_channels = num(v)?,
                "residual_blocks" => cfg.residual_blocks = flag(v)?,
                "deep_supervision" => cfg.deep_supervision = flag(v)?,
                "upsample_mode" => cfg.upsample_mode = v.parse()?,
                "dilations" => {
                    cfg.dilations = if v.is_empty() {
                        Vec::new()
                    } else {
                        v.split(',').map(num).collect::<Result<_>>()?
                    }
                }
                "input_size" => {
                    let (h, w) = v.split_once('x').ok_or_else(|| parse_err(k, v))?;
                    cfg.input_size = (num(h)?, num(w)?);
                }
                other => return Err(Error::InvalidConfig(format!("unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Realized network: a validated config and its named parameters in creation order.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Element = f32> {
    pub config: ModelConfig,
    pub params: IndexMap<String, Tensor<T>>,
}

/// Logits of one forward pass: full-resolution head plus one map per pooling step.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    pub aux: Vec<Var>,
}

struct Builder<'a> {
    params: IndexMap<String, Tensor<f32>>,
    rng: &'a mut Rng,
}

impl Builder<'_> {
    fn tensor(&mut self, name: String, t: Tensor<f32>) {
        let prev = self.params.insert(name, t);
        debug_assert!(prev.is_none());
    }

    /// Conv with no activation after it: unit-gain N(0, 1/fan_in) weights.
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
        // He-normal with doubled fan-in has variance 1/fan_in.
        let w = he_normal_init([cout, cin, k, k], 2 * cin * k * k, self.rng)?;
        self.tensor(format!("{name}.weight"), w);
        self.tensor(format!("{name}.bias"), Tensor::zeros_unchecked([cout, 1, 1, 1]));
        Ok(())
    }

    fn act(&mut self, name: &str, c: usize) {
        self.tensor(
            format!("{name}.slope"),
            Tensor::filled([c, 1, 1, 1], PRELU_INIT as f32).expect("finite slope"),
        );
    }

    fn conv_act(&mut self, name: &str, cin: usize, cout: usize) -> Result<()> {
        let w = he_normal_init([cout, cin, 3, 3], cin * 9, self.rng)?;
        self.tensor(format!("{name}.weight"), w);
        self.tensor(format!("{name}.bias"), Tensor::zeros_unchecked([cout, 1, 1, 1]));
        self.act(name, cout);
        Ok(())
    }

    fn block(&mut self, prefix: &str, cfg: &ModelConfig, cin: usize, cout: usize) -> Result<()> {
        for i in 0..cfg.convs_per_level {
            let from = if i == 0 { cin } else { cout };
            self.conv_act(&format!("{prefix}.conv{}", i + 1), from, cout)?;
        }
        if cfg.residual_blocks && cin != cout {
            self.conv(&format!("{prefix}.proj"), cin, cout, 1)?;
        }
        Ok(())
    }
}

fn build(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut rng = Rng::new(seed);
    let mut b = Builder {
        params: IndexMap::new(),
        rng: &mut rng,
    };
    let mut cin = 1;
    for l in 0..cfg.depth {
        let c = cfg.channels(l);
        b.block(&format!("down{}", l + 1), cfg, cin, c)?;
        if cfg.deep_supervision {
            b.conv(&format!("aux{}", l + 1), c, 1, 1)?;
        }
        cin = c;
    }
    let cmid = cfg.channels(cfg.depth);
    b.block("mid", cfg, cin, cmid)?;
    for (i, _) in cfg.active_dilations().iter().enumerate() {
        b.conv_act(&format!("dilated{}", i + 1), cmid, cmid)?;
    }
    let mut below = cmid;
    for l in (0..cfg.depth).rev() {
        let c = cfg.channels(l);
        let name = format!("up{}", l + 1);
        let merged = match cfg.upsample_mode {
            UpsampleMode::Transposed => {
                let w = he_normal_init([below, c, 2, 2], 2 * below, b.rng)?;
                b.tensor(format!("{name}.upconv.weight"), w);
                b.tensor(format!("{name}.upconv.bias"), Tensor::zeros_unchecked([c, 1, 1, 1]));
                2 * c
            }
            UpsampleMode::Bilinear => below + c,
        };
        b.block(&name, cfg, merged, c)?;
        below = c;
    }
    b.conv("head", cfg.base_channels, 1, 1)?;
    Ok(Model {
        config: cfg.clone(),
        params: b.params,
    })
}

/// Plain U-Net: `depth` two-conv levels with pooling, a two-conv bottleneck and a mirrored
/// expanding path merged with the shrinking tensors of matching resolution.
pub fn build_unet(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    if cfg.arch != Arch::Plain {
        return Err(Error::InvalidConfig("build_unet needs arch = unet".into()));
    }
    build(cfg, seed)
}

/// U-Net with one extra 3×3 conv per configured dilation after the bottleneck.
pub fn build_dilated_unet(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    if cfg.arch != Arch::Dilated {
        return Err(Error::InvalidConfig("build_dilated_unet needs arch = dilated".into()));
    }
    build(cfg, seed)
}

/// Dispatches on `cfg.arch`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    build(cfg, seed)
}

impl<T: Element> Model<T> {
    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Registers every parameter as a trainable leaf, in `params` order.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.values().map(|t| g.param(t.clone())).collect()
    }

    /// Binds the parameters and runs the network on `x [N, 1, H, W]`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<(ForwardOutput, Vec<Var>)> {
        let vars = self.bind(g);
        let out = self.forward_with(g, &vars, x)?;
        Ok((out, vars))
    }

    /// Runs the network with parameters already bound as `vars` (aligned with `params`).
    pub fn forward_with(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if vars.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter vars, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        let [_, c, h, w] = g.value(x).dims();
        let step = 1usize << cfg.depth;
        if c != 1 || h == 0 || w == 0 || h % step != 0 || w % step != 0 {
            return Err(Error::shape(
                "forward",
                format!("input {c}x{h}x{w} needs 1 channel and extent divisible by {step}"),
            ));
        }
        let p = |name: String| -> Result<Var> {
            self.params
                .get_index_of(&name)
                .map(|i| vars[i])
                .ok_or_else(|| Error::InvalidConfig(format!("missing parameter {name}")))
        };
        let conv = |g: &mut Graph<T>, name: &str, x: Var, spec: ConvSpec| -> Result<Var> {
            g.conv2d(x, p(format!("{name}.weight"))?, p(format!("{name}.bias"))?, spec)
        };
        let conv_act = |g: &mut Graph<T>, name: &str, x: Var, d: usize| -> Result<Var> {
            let y = conv(g, name, x, ConvSpec::same3(d))?;
            g.prelu(y, p(format!("{name}.slope"))?)
        };
        let block = |g: &mut Graph<T>, prefix: &str, x: Var| -> Result<Var> {
            let mut y = x;
            for i in 0..cfg.convs_per_level {
                y = conv_act(g, &format!("{prefix}.conv{}", i + 1), y, 1)?;
            }
            if !cfg.residual_blocks {
                return Ok(y);
            }
            let short = if g.value(x).dims()[1] == g.value(y).dims()[1] {
                x
            } else {
                conv(g, &format!("{prefix}.proj"), x, ConvSpec::pointwise())?
            };
            g.residual_add(y, short)
        };

        let mut skips = Vec::with_capacity(cfg.depth);
        let mut aux = Vec::new();
        let mut y = x;
        for l in 0..cfg.depth {
            let s = block(g, &format!("down{}", l + 1), y)?;
            skips.push(s);
            y = g.maxpool2d(s)?;
            if cfg.deep_supervision {
                aux.push(conv(g, &format!("aux{}", l + 1), y, ConvSpec::pointwise())?);
            }
        }
        y = block(g, "mid", y)?;
        for (i, &d) in cfg.active_dilations().iter().enumerate() {
            y = conv_act(g, &format!("dilated{}", i + 1), y, d)?;
        }
        for l in (0..cfg.depth).rev() {
            let name = format!("up{}", l + 1);
            let up = match cfg.upsample_mode {
                UpsampleMode::Transposed => g.transposed_conv2d(
                    y,
                    p(format!("{name}.upconv.weight"))?,
                    p(format!("{name}.upconv.bias"))?,
                )?,
                UpsampleMode::Bilinear => g.bilinear_upsample2d(y),
            };
            let merged = g.concat_channels(up, skips[l])?;
            y = block(g, &name, merged)?;
        }
        let logits = conv(g, "head", y, ConvSpec::pointwise())?;
        Ok(ForwardOutput { logits, aux })
    }
}

/// Nearest-neighbour downsampling of `[N, C, H, W]` by an integer factor, sampling
/// source index `i·f + f/2`.
pub fn downsample_nearest<T: Element>(t: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = t.dims();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(
            "downsample_nearest",
            format!("{h}x{w} not divisible by {factor}"),
        ));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut data = Vec::with_capacity(n * c * oh * ow);
    for plane in t.data().chunks_exact((h * w).max(1)).take(n * c) {
        for i in 0..oh {
            let row = &plane[(i * factor + factor / 2) * w..];
            data.extend((0..ow).map(|j| row[j * factor + factor / 2]));
        }
    }
    Tensor::from_vec([n, c, oh, ow], data)
}

/// Main BCE plus `aux_weight` times the BCE of every deep-supervision map against the
/// correspondingly downsampled mask.
pub fn segmentation_loss<T: Element>(
    g: &mut Graph<T>,
    out: &ForwardOutput,
    target: &Tensor<T>,
    aux_weight: f64,
) -> Result<Var> {
    let mut loss = g.bce_loss(out.logits, target)?;
    for (l, &a) in out.aux.iter().enumerate() {
        let t = downsample_nearest(target, 2 << l)?;
        let mut term = g.bce_loss(a, &t)?;
        if aux_weight != 1.0 {
            term = g.weighted_sum(term, Tensor::scalar(T::of(aux_weight)))?;
        }
        loss = g.residual_add(loss, term)?;
    }
    Ok(loss)
}

/// One stage of the receptive-field recurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RfLayer {
    Conv { kernel: usize, dilation: usize, stride: usize },
    /// 2×2, stride 2.
    Pool,
}

impl RfLayer {
    pub fn conv3(dilation: usize) -> Self {
        RfLayer::Conv {
            kernel: 3,
            dilation,
            stride: 1,
        }
    }

    /// Applies the layer to `(rf, jump)`.
    pub fn step(self, (rf, jump): (usize, usize)) -> (usize, usize) {
        match self {
            RfLayer::Conv {
                kernel,
                dilation,
                stride,
            } => (rf + (kernel - 1) * dilation * jump, jump * stride),
            RfLayer::Pool => (rf + jump, jump * 2),
        }
    }
}

/// Receptive field and jump after a stack of layers, starting from a single pixel.
pub fn receptive_field(layers: &[RfLayer]) -> (usize, usize) {
    layers.iter().fold((1, 1), |acc, l| l.step(acc))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RFRow {
    pub layer: String,
    /// Receptive field edge length in input pixels.
    pub rf: usize,
    /// Distance in input pixels between adjacent outputs.
    pub jump: usize,
    pub out_size: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RfTable {
    pub rows: Vec<RFRow>,
    pub innermost: usize,
    pub covers_input: bool,
}

/// Shrinking-path and bottleneck layers in execution order.
pub fn shrinking_layers(cfg: &ModelConfig) -> Vec<(String, RfLayer)> {
    let mut layers = Vec::new();
    for l in 0..=cfg.depth {
        let prefix = if l == cfg.depth {
            "mid".to_string()
        } else {
            format!("down{}", l + 1)
        };
        for i in 0..cfg.convs_per_level {
            layers.push((format!("{prefix}.conv{}", i + 1), RfLayer::conv3(1)));
        }
        if l < cfg.depth {
            layers.push((format!("pool{}", l + 1), RfLayer::Pool));
        }
    }
    for (i, &d) in cfg.active_dilations().iter().enumerate() {
        layers.push((format!("dilated{}", i + 1), RfLayer::conv3(d)));
    }
    layers
}

/// Receptive field of every shrinking-path and bottleneck layer.
pub fn receptive_field_table(cfg: &ModelConfig) -> Result<RfTable> {
    cfg.validate()?;
    let mut state = (1, 1);
    let (mut h, mut w) = cfg.input_size;
    let mut rows = Vec::new();
    for (layer, kind) in shrinking_layers(cfg) {
        state = kind.step(state);
        if kind == RfLayer::Pool {
            h /= 2;
            w /= 2;
        }
        rows.push(RFRow {
            layer,
            rf: state.0,
            jump: state.1,
            out_size: (h, w),
        });
    }
    let (ih, iw) = cfg.input_size;
    Ok(RfTable {
        rows,
        innermost: state.0,
        covers_input: state.0 >= ih.max(iw),
    })
}

#[cfg(test)]
mod tests;
