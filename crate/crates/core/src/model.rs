//! The structural residual network.
//!
//! A shallow stem (one convolution and two residual blocks) produces the
//! features `O_1` and `O_2`. Each configured scale runs an encoder-decoder
//! branch over `O_2` with its own dilation factor, fuses the result with a
//! 1x1 then 3x3 convolution, optionally adds `O_1` (global residual), and
//! maps the resulting sparse feature map `M` to a 3-channel rain layer with a
//! linear head. The background estimate is the input minus the summed rain.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{
    self, bilinear_upsample2_backward, bilinear_upsample2_taped, conv2d_backward, conv2d_forward_taped,
    maxpool2_backward, maxpool2_forward_taped, maxunpool2_backward, maxunpool2_forward_taped, relu_backward,
    relu_taped, resblock_backward, resblock_forward, ConvSpec, LayerKey, LayerTape, PoolIndices, ResBlockParams,
};
use crate::tensor::{RngState, Scalar, Tensor, TensorShape};

/// Image channels consumed and produced by the network.
pub const IMAGE_CHANNELS: usize = 3;

/// Head weights start at this fraction of their He-normal scale so an
/// untrained network begins close to the identity map `B = O`.
const HEAD_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    /// Single branch, residual blocks only, no global residual.
    Ba,
    /// `Ba` plus global residual learning.
    Bb,
    /// Single-branch encoder-decoder with bilinear upsampling.
    Bc,
    /// Single-branch encoder-decoder with max-unpooling.
    Bd,
    /// Multi-scale with one parameter set shared by all branches.
    Be,
    /// The full network.
    Bf,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [Self::Ba, Self::Bb, Self::Bc, Self::Bd, Self::Be, Self::Bf];
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Ba => "Ba",
            Self::Bb => "Bb",
            Self::Bc => "Bc",
            Self::Bd => "Bd",
            Self::Be => "Be",
            Self::Bf => "Bf",
        };
        f.write_str(s)
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown ablation variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Feature channels `N`.
    pub width: usize,
    /// Encoder/decoder stages per branch `T`.
    pub depth: usize,
    pub dilation_factors: Vec<usize>,
    /// When false only the first dilation factor builds a branch.
    pub multi_scale: bool,
    /// Encoder-decoder with pooling; false gives plain stacked residual blocks.
    pub use_pooling: bool,
    /// Max-unpooling in the decoder; false uses bilinear upsampling.
    pub use_maxunpool: bool,
    pub global_residual: bool,
    /// Encoder-to-decoder additive skips.
    pub local_skips: bool,
    pub weight_sharing: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::ablation(Ablation::Bf, 64, 2)
    }
}

impl ModelConfig {
    pub fn ablation(variant: Ablation, width: usize, depth: usize) -> Self {
        let full = Self {
            width,
            depth,
            dilation_factors: vec![1, 2, 3],
            multi_scale: true,
            use_pooling: true,
            use_maxunpool: true,
            global_residual: true,
            local_skips: true,
            weight_sharing: false,
        };
        match variant {
            Ablation::Ba => {
                Self { multi_scale: false, use_pooling: false, global_residual: false, local_skips: false, ..full }
            }
            Ablation::Bb => Self { multi_scale: false, use_pooling: false, local_skips: false, ..full },
            Ablation::Bc => Self { multi_scale: false, use_maxunpool: false, ..full },
            Ablation::Bd => Self { multi_scale: false, ..full },
            Ablation::Be => Self { weight_sharing: true, ..full },
            Ablation::Bf => full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 {
            return Err(Error::Config("width and depth must be >= 1".into()));
        }
        if self.depth > 16 {
            return Err(Error::Config(format!("depth {} is unreasonably large", self.depth)));
        }
        if self.dilation_factors.is_empty() {
            return Err(Error::Config("at least one dilation factor is required".into()));
        }
        if let Some(d) = self.dilation_factors.iter().find(|d| !(1..=3).contains(*d)) {
            return Err(Error::Config(format!("dilation factor {d} outside {{1, 2, 3}}")));
        }
        if self.weight_sharing && self.scales().len() < 2 {
            return Err(Error::Config("weight sharing needs more than one branch".into()));
        }
        Ok(())
    }

    /// Dilation factors of the branches actually built.
    pub fn scales(&self) -> &[usize] {
        if self.multi_scale {
            &self.dilation_factors
        } else {
            &self.dilation_factors[..1]
        }
    }

    /// Spatial extents of the input must be multiples of this.
    pub fn alignment(&self) -> usize {
        if self.use_pooling {
            1 << self.depth
        } else {
            1
        }
    }

    /// Ordered tensor names and shapes of every learnable parameter.
    pub fn parameter_layout(&self) -> Result<Vec<(String, TensorShape)>> {
        self.validate()?;
        let n = self.width;
        let mut out = Vec::new();
        let mut conv = |name: String, spec: ConvSpec| {
            out.push((format!("{name}.weight"), spec.weight_shape()));
            out.push((format!("{name}.bias"), spec.bias_shape()));
        };
        let res = |c: usize| ConvSpec::new(c, c, 3, 1);
        conv("stem.conv".into(), ConvSpec::new(IMAGE_CHANNELS, n, 3, 1)?);
        for r in 0..2 {
            conv(format!("stem.res{r}.conv1"), res(n)?);
            conv(format!("stem.res{r}.conv2"), res(n)?);
        }
        let prefixes: Vec<String> = if self.weight_sharing {
            vec!["shared".into()]
        } else {
            (0..self.scales().len()).map(|i| format!("branch{i}")).collect()
        };
        for p in prefixes {
            for stage in ["enc", "dec"] {
                for k in 0..self.depth {
                    conv(format!("{p}.{stage}{k}.conv1"), res(n)?);
                    conv(format!("{p}.{stage}{k}.conv2"), res(n)?);
                }
            }
            conv(format!("{p}.fuse1x1"), ConvSpec::new(n, n, 1, 1)?);
            conv(format!("{p}.fuse3x3"), ConvSpec::new(n, n, 3, 1)?);
            conv(format!("{p}.head"), ConvSpec::new(n, IMAGE_CHANNELS, 3, 1)?);
        }
        Ok(out)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.parameter_layout()?.iter().map(|(_, s)| s.numel()).sum())
    }

    /// Stable 64-bit FNV-1a fingerprint of the configuration.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: u64| {
            for b in v.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        eat(self.width as u64);
        eat(self.depth as u64);
        eat(self.dilation_factors.len() as u64);
        self.dilation_factors.iter().for_each(|&d| eat(d as u64));
        eat(u64::from(self.flags()));
        h
    }

    /// Boolean toggles packed as a bit set (bit order fixed by the
    /// checkpoint format).
    pub fn flags(&self) -> u8 {
        [
            self.multi_scale,
            self.use_pooling,
            self.use_maxunpool,
            self.global_residual,
            self.local_skips,
            self.weight_sharing,
        ]
        .iter()
        .enumerate()
        .fold(0u8, |acc, (i, &on)| acc | (u8::from(on) << i))
    }

    pub fn with_flags(mut self, flags: u8) -> Result<Self> {
        if flags >> 6 != 0 {
            return Err(Error::Config(format!("unknown configuration flags {flags:#04x}")));
        }
        let bit = |i: u8| flags & (1 << i) != 0;
        self.multi_scale = bit(0);
        self.use_pooling = bit(1);
        self.use_maxunpool = bit(2);
        self.global_residual = bit(3);
        self.local_skips = bit(4);
        self.weight_sharing = bit(5);
        Ok(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Ordered, named learnable tensors with one gradient slot each.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<T: Scalar> {
    params: Vec<Param<T>>,
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), grads: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.grads.push(Tensor::zeros(value.shape()));
        self.params.push(Param { name, value });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.iter_mut().map(|p| &mut p.value)
    }

    pub fn grads(&self) -> &[Tensor<T>] {
        &self.grads
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    /// Parameter values paired with their gradient slots.
    pub fn values_and_grads_mut(&mut self) -> impl Iterator<Item = (&mut Tensor<T>, &Tensor<T>)> {
        self.params.iter_mut().map(|p| &mut p.value).zip(self.grads.iter())
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(T::zero()));
    }

    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        if grads.0.len() != self.grads.len() {
            return Err(Error::Config("gradient set does not match parameter store".into()));
        }
        for (slot, g) in self.grads.iter_mut().zip(&grads.0) {
            slot.add_inplace(g)?;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self.params.iter().map(|p| Param { name: p.name.clone(), value: p.value.cast() }).collect(),
            grads: self.grads.iter().map(Tensor::cast).collect(),
        }
    }
}

impl<T: Scalar> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients for every parameter of a store, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T: Scalar>(Vec<Tensor<T>>);

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(store: &ParameterStore<T>) -> Self {
        Self(store.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect())
    }

    /// Wraps tensors given in parameter order.
    pub fn from_vec(tensors: Vec<Tensor<T>>) -> Self {
        Self(tensors)
    }

    fn add(&mut self, id: ParamId, g: &Tensor<T>) -> Result<()> {
        self.0[id.0].add_inplace(g)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.0[id.0]
    }

    pub fn as_slice(&self) -> &[Tensor<T>] {
        &self.0
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_inplace(b)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
}

impl ConvLayer {
    fn spec(&self, dilation: usize) -> ConvSpec {
        ConvSpec::new(self.in_channels, self.out_channels, self.kernel, dilation)
            .expect("layer dimensions validated at construction")
    }
}

#[derive(Clone, Copy, Debug)]
struct ResLayer {
    conv1: ConvLayer,
    conv2: ConvLayer,
}

impl ResLayer {
    fn params<'a, T: Scalar>(&self, store: &'a ParameterStore<T>) -> ResBlockParams<'a, T> {
        ResBlockParams {
            w1: store.get(self.conv1.weight),
            b1: store.get(self.conv1.bias),
            w2: store.get(self.conv2.weight),
            b2: store.get(self.conv2.bias),
        }
    }
}

#[derive(Clone, Debug)]
struct BranchParams {
    enc: Vec<ResLayer>,
    dec: Vec<ResLayer>,
    fuse1: ConvLayer,
    fuse3: ConvLayer,
    head: ConvLayer,
}

#[derive(Clone, Debug)]
struct Branch {
    dilation: usize,
    params: usize,
    key_base: u32,
}

// Layer key numbering inside a branch.
const K_ENC: u32 = 0;
const K_POOL: u32 = 100;
const K_DEC: u32 = 200;
const K_UP: u32 = 300;
const K_FUSE1: u32 = 400;
const K_FUSE_RELU: u32 = 401;
const K_FUSE3: u32 = 402;
const K_HEAD: u32 = 403;
const BRANCH_KEY_STRIDE: u32 = 1000;
const K_STEM: LayerKey = LayerKey::new(0);
const K_STEM_RELU: LayerKey = LayerKey::new(1);
const K_STEM_RES: u32 = 2;

/// Per-scale outputs of one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleOutput<T: Scalar> {
    pub dilation: usize,
    /// Rain layer of this scale, `(batch, 3, H, W)`.
    pub rain: Tensor<T>,
    /// Sparse rain feature map `M`, `(batch, N, H, W)`.
    pub features: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DerainOutput<T: Scalar> {
    pub background: Tensor<T>,
    /// Rain removed from the input: exactly `input - background`.
    pub rain: Tensor<T>,
    /// One entry per configured scale, small to large.
    pub scales: Vec<ScaleOutput<T>>,
}

impl<T: Scalar> DerainOutput<T> {
    /// Rain layer of the scale with the given dilation factor, if built.
    pub fn scale_rain(&self, dilation: usize) -> Option<&Tensor<T>> {
        self.scales.iter().find(|s| s.dilation == dilation).map(|s| &s.rain)
    }
}

/// Forward state consumed by [`Srnet::backward`].
#[derive(Debug)]
pub struct ForwardTrace<T: Scalar> {
    tape: LayerTape<T>,
    fingerprint: u64,
    input_shape: TensorShape,
    /// Post-stem-convolution features `O_1`.
    pub shallow1: Tensor<T>,
    /// Output of the two stem residual blocks `O_2`.
    pub shallow2: Tensor<T>,
    /// Pool switches per branch, outermost stage first.
    pub pool_indices: Vec<Vec<PoolIndices>>,
    /// Decoder activations right after unpooling/upsampling and before the
    /// skip addition, per branch, innermost stage first. Only filled by
    /// [`Srnet::forward_capture`].
    pub unpooled: Vec<Vec<Tensor<T>>>,
}

#[derive(Clone, Debug)]
pub struct Srnet<T: Scalar> {
    config: ModelConfig,
    store: ParameterStore<T>,
    stem: ConvLayer,
    stem_res: [ResLayer; 2],
    branch_params: Vec<BranchParams>,
    branches: Vec<Branch>,
}

fn conv_layer(store: &ParameterStore<impl Scalar>, name: &str, cin: usize, cout: usize, k: usize) -> Result<ConvLayer> {
    let find = |suffix: &str| {
        let full = format!("{name}.{suffix}");
        store.id(&full).ok_or_else(|| Error::Config(format!("missing parameter {full}")))
    };
    Ok(ConvLayer { weight: find("weight")?, bias: find("bias")?, in_channels: cin, out_channels: cout, kernel: k })
}

fn res_layer(store: &ParameterStore<impl Scalar>, name: &str, n: usize) -> Result<ResLayer> {
    Ok(ResLayer {
        conv1: conv_layer(store, &format!("{name}.conv1"), n, n, 3)?,
        conv2: conv_layer(store, &format!("{name}.conv2"), n, n, 3)?,
    })
}

impl<T: Scalar> Srnet<T> {
    /// He-normal weights, zero biases; the rain heads start scaled down.
    pub fn new(config: ModelConfig, rng: &mut RngState) -> Result<Self> {
        let mut store = ParameterStore::new();
        for (name, shape) in config.parameter_layout()? {
            let value = if name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else {
                let fan_in = shape.channels * shape.height * shape.width;
                let t = Tensor::kaiming(shape, fan_in, rng);
                if name.ends_with(".head.weight") {
                    t.scale(T::from_f64(HEAD_INIT_SCALE))
                } else {
                    t
                }
            };
            store.push(name, value)?;
        }
        Self::from_store(config, store)
    }

    /// Every parameter zero: the network outputs zero rain.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut store = ParameterStore::new();
        for (name, shape) in config.parameter_layout()? {
            store.push(name, Tensor::zeros(shape))?;
        }
        Self::from_store(config, store)
    }

    /// Wraps an existing store; names and shapes must match the layout of
    /// `config` exactly.
    pub fn from_store(config: ModelConfig, store: ParameterStore<T>) -> Result<Self> {
        let layout = config.parameter_layout()?;
        check_names(&layout, &store)?;
        for (name, shape) in &layout {
            let actual = store.by_name(name).map(|t| t.shape()).unwrap_or(*shape);
            if actual != *shape {
                return Err(Error::ShapeMismatch { op: "parameter", expected: *shape, actual });
            }
        }
        let n = config.width;
        let stem = conv_layer(&store, "stem.conv", IMAGE_CHANNELS, n, 3)?;
        let stem_res = [res_layer(&store, "stem.res0", n)?, res_layer(&store, "stem.res1", n)?];
        let scales = config.scales().to_vec();
        let prefixes: Vec<String> = if config.weight_sharing {
            vec!["shared".into()]
        } else {
            (0..scales.len()).map(|i| format!("branch{i}")).collect()
        };
        let mut branch_params = Vec::new();
        for p in &prefixes {
            branch_params.push(BranchParams {
                enc: (0..config.depth).map(|k| res_layer(&store, &format!("{p}.enc{k}"), n)).collect::<Result<_>>()?,
                dec: (0..config.depth).map(|k| res_layer(&store, &format!("{p}.dec{k}"), n)).collect::<Result<_>>()?,
                fuse1: conv_layer(&store, &format!("{p}.fuse1x1"), n, n, 1)?,
                fuse3: conv_layer(&store, &format!("{p}.fuse3x3"), n, n, 3)?,
                head: conv_layer(&store, &format!("{p}.head"), n, IMAGE_CHANNELS, 3)?,
            });
        }
        let branches = scales
            .iter()
            .enumerate()
            .map(|(i, &dilation)| Branch {
                dilation,
                params: if config.weight_sharing { 0 } else { i },
                key_base: BRANCH_KEY_STRIDE * (i as u32 + 1),
            })
            .collect();
        Ok(Self { config, store, stem, stem_res, branch_params, branches })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParameterStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore<T> {
        &mut self.store
    }

    /// Rain-head weight `(3, N, 3, 3)` of the `i`-th built branch.
    pub fn head_weight(&self, i: usize) -> &Tensor<T> {
        self.store.get(self.branch_params[self.branches[i].params].head.weight)
    }

    pub fn into_store(self) -> ParameterStore<T> {
        self.store
    }

    pub fn cast<U: Scalar>(&self) -> Srnet<U> {
        Srnet::from_store(self.config.clone(), self.store.cast()).expect("same layout")
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        let s = input.shape();
        if s.channels != IMAGE_CHANNELS {
            return Err(Error::Incompatible {
                op: "srnet_forward",
                detail: format!("expected {IMAGE_CHANNELS} input channels, got {}", s.channels),
            });
        }
        let m = self.config.alignment();
        if !s.height.is_multiple_of(m) || !s.width.is_multiple_of(m) {
            return Err(Error::NotDivisible { op: "srnet_forward", height: s.height, width: s.width, multiple: m });
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<(DerainOutput<T>, ForwardTrace<T>)> {
        self.forward_impl(input, false)
    }

    /// Like [`forward`](Self::forward), additionally keeping the decoder's
    /// unpooled activations in the trace.
    pub fn forward_capture(&self, input: &Tensor<T>) -> Result<(DerainOutput<T>, ForwardTrace<T>)> {
        self.forward_impl(input, true)
    }

    fn forward_impl(&self, input: &Tensor<T>, capture: bool) -> Result<(DerainOutput<T>, ForwardTrace<T>)> {
        self.check_input(input)?;
        let s = &self.store;
        let mut tape = LayerTape::new();
        let h = conv2d_forward_taped(
            &mut tape,
            K_STEM,
            input,
            s.get(self.stem.weight),
            s.get(self.stem.bias),
            &self.stem.spec(1),
        )?;
        let o1 = relu_taped(&mut tape, K_STEM_RELU, &h);
        let x = resblock_forward(&mut tape, LayerKey::new(K_STEM_RES), &o1, self.stem_res[0].params(s), 1)?;
        let o2 = resblock_forward(&mut tape, LayerKey::new(K_STEM_RES + 1), &x, self.stem_res[1].params(s), 1)?;

        let mut scales = Vec::with_capacity(self.branches.len());
        let mut pool_indices = Vec::with_capacity(self.branches.len());
        let mut unpooled = Vec::new();
        for branch in &self.branches {
            let out = self.branch_forward(&mut tape, branch, &o1, &o2, capture)?;
            scales.push(ScaleOutput { dilation: branch.dilation, rain: out.rain, features: out.features });
            pool_indices.push(out.indices);
            if capture {
                unpooled.push(out.unpooled);
            }
        }

        let mut rain_sum = scales[0].rain.clone();
        for sc in &scales[1..] {
            rain_sum.add_inplace(&sc.rain)?;
        }
        let background = input.sub(&rain_sum)?;
        let rain = input.sub(&background)?;
        Ok((
            DerainOutput { background, rain, scales },
            ForwardTrace {
                tape,
                fingerprint: self.config.fingerprint(),
                input_shape: input.shape(),
                shallow1: o1,
                shallow2: o2,
                pool_indices,
                unpooled,
            },
        ))
    }

    fn branch_forward(
        &self,
        tape: &mut LayerTape<T>,
        branch: &Branch,
        o1: &Tensor<T>,
        o2: &Tensor<T>,
        capture: bool,
    ) -> Result<BranchOut<T>> {
        let s = &self.store;
        let p = &self.branch_params[branch.params];
        let df = branch.dilation;
        let key = |k: u32| LayerKey::new(branch.key_base + k);
        let depth = self.config.depth;

        let mut x = o2.clone();
        let mut skips = Vec::with_capacity(depth);
        let mut indices = Vec::with_capacity(depth);
        for (k, layer) in p.enc.iter().enumerate() {
            let e = resblock_forward(tape, key(K_ENC + k as u32), &x, layer.params(s), df)?;
            if self.config.use_pooling {
                let (pooled, idx) = maxpool2_forward_taped(tape, key(K_POOL + k as u32), &e)?;
                x = pooled;
                indices.push(idx);
            } else {
                x = e.clone();
            }
            skips.push(e);
        }
        let mut unpooled = Vec::new();
        for (j, layer) in p.dec.iter().enumerate() {
            let k = depth - 1 - j;
            let d = resblock_forward(tape, key(K_DEC + j as u32), &x, layer.params(s), df)?;
            let mut u = if !self.config.use_pooling {
                d
            } else if self.config.use_maxunpool {
                maxunpool2_forward_taped(tape, key(K_UP + j as u32), &d, &indices[k], skips[k].shape())?
            } else {
                bilinear_upsample2_taped(tape, key(K_UP + j as u32), &d)
            };
            if capture {
                unpooled.push(u.clone());
            }
            if self.config.local_skips {
                u.add_inplace(&skips[k])?;
            }
            x = u;
        }
        let f =
            conv2d_forward_taped(tape, key(K_FUSE1), &x, s.get(p.fuse1.weight), s.get(p.fuse1.bias), &p.fuse1.spec(1))?;
        let a = relu_taped(tape, key(K_FUSE_RELU), &f);
        let mut m = conv2d_forward_taped(
            tape,
            key(K_FUSE3),
            &a,
            s.get(p.fuse3.weight),
            s.get(p.fuse3.bias),
            &p.fuse3.spec(df),
        )?;
        if self.config.global_residual {
            m.add_inplace(o1)?;
        }
        let rain =
            conv2d_forward_taped(tape, key(K_HEAD), &m, s.get(p.head.weight), s.get(p.head.bias), &p.head.spec(1))?;
        Ok(BranchOut { rain, features: m, indices, unpooled })
    }

    /// Gradients of all parameters given `dL/dB` for the background estimate.
    pub fn backward(&self, grad_background: &Tensor<T>, mut trace: ForwardTrace<T>) -> Result<Gradients<T>> {
        if trace.fingerprint != self.config.fingerprint() {
            return Err(Error::Tape("trace was recorded with a different configuration".into()));
        }
        if grad_background.shape() != trace.input_shape {
            return Err(Error::ShapeMismatch {
                op: "srnet_backward",
                expected: trace.input_shape,
                actual: grad_background.shape(),
            });
        }
        let s = &self.store;
        let tape = &mut trace.tape;
        let mut grads = Gradients::zeros_like(s);
        let grad_rain = grad_background.neg();
        let feat_shape = trace.shallow2.shape();
        let mut g_o1 = Tensor::zeros(feat_shape);
        let mut g_o2 = Tensor::zeros(feat_shape);

        for branch in self.branches.iter().rev() {
            self.branch_backward(tape, branch, &grad_rain, &mut g_o1, &mut g_o2, &mut grads)?;
        }

        let mut g = g_o2;
        for (r, layer) in self.stem_res.iter().enumerate().rev() {
            let rg = resblock_backward(tape, LayerKey::new(K_STEM_RES + r as u32), &g, layer.params(s), 1)?;
            add_res_grads(&mut grads, layer, &rg)?;
            g = rg.input;
        }
        g.add_inplace(&g_o1)?;
        let g = relu_backward(tape, K_STEM_RELU, &g)?;
        let cg = conv2d_backward(tape, K_STEM, &g, s.get(self.stem.weight), &self.stem.spec(1))?;
        grads.add(self.stem.weight, &cg.weight)?;
        grads.add(self.stem.bias, &cg.bias)?;
        if !tape.is_empty() {
            return Err(Error::Tape(format!("{} records left after backward", tape.len())));
        }
        Ok(grads)
    }

    fn branch_backward(
        &self,
        tape: &mut LayerTape<T>,
        branch: &Branch,
        grad_rain: &Tensor<T>,
        g_o1: &mut Tensor<T>,
        g_o2: &mut Tensor<T>,
        grads: &mut Gradients<T>,
    ) -> Result<()> {
        let s = &self.store;
        let p = &self.branch_params[branch.params];
        let df = branch.dilation;
        let key = |k: u32| LayerKey::new(branch.key_base + k);
        let depth = self.config.depth;

        let hg = conv2d_backward(tape, key(K_HEAD), grad_rain, s.get(p.head.weight), &p.head.spec(1))?;
        grads.add(p.head.weight, &hg.weight)?;
        grads.add(p.head.bias, &hg.bias)?;
        let gm = hg.input;
        if self.config.global_residual {
            g_o1.add_inplace(&gm)?;
        }
        let f3 = conv2d_backward(tape, key(K_FUSE3), &gm, s.get(p.fuse3.weight), &p.fuse3.spec(df))?;
        grads.add(p.fuse3.weight, &f3.weight)?;
        grads.add(p.fuse3.bias, &f3.bias)?;
        let ga = relu_backward(tape, key(K_FUSE_RELU), &f3.input)?;
        let f1 = conv2d_backward(tape, key(K_FUSE1), &ga, s.get(p.fuse1.weight), &p.fuse1.spec(1))?;
        grads.add(p.fuse1.weight, &f1.weight)?;
        grads.add(p.fuse1.bias, &f1.bias)?;

        let mut gx = f1.input;
        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; depth];
        for (j, layer) in p.dec.iter().enumerate().rev() {
            let k = depth - 1 - j;
            if self.config.local_skips {
                skip_grads[k] = Some(gx.clone());
            }
            let gd = if !self.config.use_pooling {
                gx
            } else if self.config.use_maxunpool {
                maxunpool2_backward(tape, key(K_UP + j as u32), &gx)?
            } else {
                bilinear_upsample2_backward(tape, key(K_UP + j as u32), &gx)?
            };
            let rg = resblock_backward(tape, key(K_DEC + j as u32), &gd, layer.params(s), df)?;
            add_res_grads(grads, layer, &rg)?;
            gx = rg.input;
        }
        for (k, layer) in p.enc.iter().enumerate().rev() {
            let mut ge =
                if self.config.use_pooling { maxpool2_backward(tape, key(K_POOL + k as u32), &gx)? } else { gx };
            if let Some(sg) = &skip_grads[k] {
                ge.add_inplace(sg)?;
            }
            let rg = resblock_backward(tape, key(K_ENC + k as u32), &ge, layer.params(s), df)?;
            add_res_grads(grads, layer, &rg)?;
            gx = rg.input;
        }
        g_o2.add_inplace(&gx)?;
        Ok(())
    }
}

struct BranchOut<T: Scalar> {
    rain: Tensor<T>,
    features: Tensor<T>,
    indices: Vec<PoolIndices>,
    unpooled: Vec<Tensor<T>>,
}

fn add_res_grads<T: Scalar>(grads: &mut Gradients<T>, layer: &ResLayer, rg: &ops::ResBlockGrads<T>) -> Result<()> {
    grads.add(layer.conv1.weight, &rg.w1)?;
    grads.add(layer.conv1.bias, &rg.b1)?;
    grads.add(layer.conv2.weight, &rg.w2)?;
    grads.add(layer.conv2.bias, &rg.b2)
}

/// Compares the names in `store` with the layout, reporting both directions.
pub(crate) fn check_names<T: Scalar>(layout: &[(String, TensorShape)], store: &ParameterStore<T>) -> Result<()> {
    let missing: Vec<String> = layout.iter().filter(|(n, _)| store.id(n).is_none()).map(|(n, _)| n.clone()).collect();
    let unexpected: Vec<String> =
        store.names().filter(|n| !layout.iter().any(|(l, _)| l == n)).map(str::to_owned).collect();
    if missing.is_empty() && unexpected.is_empty() {
        Ok(())
    } else {
        Err(crate::error::CheckpointError::NameMismatch { missing, unexpected }.into())
    }
}
