//! The five model variants, from image batch to class logits.
//!
//! Hierarchical variants (`hvit`, `gcn_hvit_1`, `gcn_hvit_2`):
//!
//! ```text
//! images [B,H,W,C] -conv P1=H/4-> f1 [B,4,4,D] -flatten-> x_p [B,16,D]
//!   k = x_p + E_pos1 -> L encoder layers -> reshape -> z [B,4,4,D]
//!   -conv 2x2-> f2 [B,2,2,D] -flatten-> z_p [B,4,D]
//!   h = [class; z_p + E_pos2] [B,5,D] -> L encoder layers -> LN -> head(h[:,0]) [B,K]
//! ```
//!
//! `vit4` and `vit16` are single-level ViTs with a class token and a learned
//! positional table added to every token, class token included.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::graph::{build_grid_adjacency, gcn_positional_embedding, normalize_adjacency, AdjacencyMode};
use crate::nn::{encoder_layer, EncoderLayerParams, LayerNormParams, Linear};
use crate::rng::Rng;
use crate::tensor::{concat, conv2d_patchify, Float, Tensor};

/// Side of the level-1 token grid (16 tokens).
pub const LEVEL1_GRID: usize = 4;
/// Kernel and stride of the level-2 patch embedding over the level-1 grid.
pub const LEVEL2_KERNEL: usize = 2;
/// Side of the level-2 token grid (4 tokens).
pub const LEVEL2_GRID: usize = LEVEL1_GRID / LEVEL2_KERNEL;
/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Vit4,
    Vit16,
    Hvit,
    GcnHvit1,
    GcnHvit2,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Vit4,
        Variant::Vit16,
        Variant::Hvit,
        Variant::GcnHvit1,
        Variant::GcnHvit2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vit4 => "vit4",
            Variant::Vit16 => "vit16",
            Variant::Hvit => "hvit",
            Variant::GcnHvit1 => "gcn_hvit_1",
            Variant::GcnHvit2 => "gcn_hvit_2",
        }
    }

    pub fn is_hierarchical(self) -> bool {
        !matches!(self, Variant::Vit4 | Variant::Vit16)
    }

    pub fn pos_mode(self) -> PosMode {
        match self {
            Variant::GcnHvit1 | Variant::GcnHvit2 => PosMode::Gcn,
            _ => PosMode::Learnable1d,
        }
    }

    pub fn adjacency_mode(self) -> Option<AdjacencyMode> {
        match self {
            Variant::GcnHvit1 => Some(AdjacencyMode::OneWay),
            Variant::GcnHvit2 => Some(AdjacencyMode::Bidirectional),
            _ => None,
        }
    }

    pub fn end_to_end_check_name(self) -> &'static str {
        match self {
            Variant::Vit4 => "model[vit4]",
            Variant::Vit16 => "model[vit16]",
            Variant::Hvit => "model[hvit]",
            Variant::GcnHvit1 => "model[gcn_hvit_1]",
            Variant::GcnHvit2 => "model[gcn_hvit_2]",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(name: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| Error::UnknownVariant {
                name: name.to_string(),
                valid: Variant::ALL.map(Variant::name).join(", "),
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosMode {
    Learnable1d,
    Gcn,
}

/// Image geometry and class count of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
}

impl DatasetDims {
    pub const fn grayscale(side: usize, classes: usize) -> Self {
        DatasetDims {
            height: side,
            width: side,
            channels: 1,
            classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub layers_per_level: usize,
    pub heads: usize,
    pub num_classes: usize,
    pub pos_mode: PosMode,
    pub adjacency_mode: Option<AdjacencyMode>,
}

impl ModelConfig {
    pub const DEFAULT_EMBED_DIM: usize = 64;
    pub const DEFAULT_LAYERS: usize = 4;
    pub const DEFAULT_HEADS: usize = 4;

    /// Tiny configuration used for end-to-end gradient checks.
    pub fn tiny(variant: Variant) -> Self {
        build_variant(variant.name(), DatasetDims::grayscale(8, 10))
            .and_then(|c| c.with_size(8, 1, 2))
            .expect("tiny config is valid")
    }

    /// Overrides width, depth per level and head count.
    pub fn with_size(mut self, embed_dim: usize, layers_per_level: usize, heads: usize) -> Result<Self> {
        self.embed_dim = embed_dim;
        self.layers_per_level = layers_per_level;
        self.heads = heads;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.image_h != self.image_w {
            return fail(format!("images must be square, got {}x{}", self.image_h, self.image_w));
        }
        let divisor = if self.variant == Variant::Vit4 { 2 } else { LEVEL1_GRID };
        if self.image_h == 0 || !self.image_h.is_multiple_of(divisor) {
            return fail(format!(
                "{} needs an image side divisible by {divisor}, got {}",
                self.variant, self.image_h
            ));
        }
        if self.channels == 0 || self.num_classes == 0 || self.embed_dim == 0 || self.layers_per_level == 0 {
            return fail("channels, classes, embed_dim and layers must be positive".into());
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.pos_mode != self.variant.pos_mode() || self.adjacency_mode != self.variant.adjacency_mode() {
            return fail(format!("{} fixes its positional embedding mode", self.variant));
        }
        Ok(())
    }

    /// Side of the first patch embedding's square kernel.
    pub fn patch_size(&self) -> usize {
        match self.variant {
            Variant::Vit4 => self.image_h / 2,
            _ => self.image_h / LEVEL1_GRID,
        }
    }

    /// Side of the first-level token grid.
    pub fn grid(&self) -> usize {
        self.image_h / self.patch_size()
    }

    /// Number of patch tokens at the first level.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.embed_dim;
        let p = self.patch_size();
        let mut specs = Vec::new();
        let mut push = |name: String, dims: Vec<usize>, init: Init| specs.push(ParamSpec { name, dims, init });
        let layer_specs = |push: &mut dyn FnMut(String, Vec<usize>, Init), prefix: &str| {
            for layer in 0..self.layers_per_level {
                for (rel, dims) in EncoderLayerParams::<f32>::param_shapes(d) {
                    let init = if rel.ends_with("gamma") {
                        Init::Ones
                    } else if dims.len() == 2 {
                        Init::TruncNormal
                    } else {
                        Init::Zeros
                    };
                    push(format!("{prefix}layers.{layer}.{rel}"), dims, init);
                }
            }
        };
        if self.variant.is_hierarchical() {
            for (level, kernel, channels, grid) in [
                (1, p, self.channels, LEVEL1_GRID),
                (2, LEVEL2_KERNEL, d, LEVEL2_GRID),
            ] {
                let prefix = format!("level{level}.");
                push(format!("{prefix}patch.kernel"), vec![kernel, kernel, channels, d], Init::TruncNormal);
                push(format!("{prefix}patch.bias"), vec![d], Init::Zeros);
                match self.pos_mode {
                    PosMode::Gcn => push(format!("{prefix}pos.gcn_weight"), vec![d, d], Init::TruncNormal),
                    PosMode::Learnable1d => push(format!("{prefix}pos.embedding"), vec![grid * grid, d], Init::Zeros),
                }
                if level == 2 {
                    push(format!("{prefix}class_token"), vec![d], Init::Zeros);
                }
                layer_specs(&mut push, &prefix);
            }
        } else {
            push("patch.kernel".into(), vec![p, p, self.channels, d], Init::TruncNormal);
            push("patch.bias".into(), vec![d], Init::Zeros);
            push("class_token".into(), vec![d], Init::Zeros);
            push("pos.embedding".into(), vec![self.tokens() + 1, d], Init::Zeros);
            layer_specs(&mut push, "");
        }
        push("norm.gamma".into(), vec![d], Init::Ones);
        push("norm.beta".into(), vec![d], Init::Zeros);
        push("head.weight".into(), vec![d, self.num_classes], Init::TruncNormal);
        push("head.bias".into(), vec![self.num_classes], Init::Zeros);
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(ParamSpec::numel).sum()
    }

    /// Flat `key=value` form, as echoed into checkpoints.
    pub fn to_entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("variant", self.variant.name().to_string()),
            ("image_h", self.image_h.to_string()),
            ("image_w", self.image_w.to_string()),
            ("channels", self.channels.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("layers", self.layers_per_level.to_string()),
            ("heads", self.heads.to_string()),
        ]
    }

    pub fn from_entries<'a>(get: impl Fn(&str) -> Option<&'a str>) -> Result<Self> {
        let field = |key: &str| get(key).ok_or_else(|| Error::Config(format!("missing key `{key}`")));
        let number = |key: &str| -> Result<usize> {
            field(key)?
                .parse()
                .map_err(|_| Error::Config(format!("`{key}` is not a non-negative integer")))
        };
        let dims = DatasetDims {
            height: number("image_h")?,
            width: number("image_w")?,
            channels: number("channels")?,
            classes: number("num_classes")?,
        };
        build_variant(field("variant")?, dims)?.with_size(number("embed_dim")?, number("layers")?, number("heads")?)
    }
}

/// Fully populated configuration for a named variant with default sizes.
pub fn build_variant(name: &str, dims: DatasetDims) -> Result<ModelConfig> {
    let variant: Variant = name.parse()?;
    let config = ModelConfig {
        variant,
        image_h: dims.height,
        image_w: dims.width,
        channels: dims.channels,
        embed_dim: ModelConfig::DEFAULT_EMBED_DIM,
        layers_per_level: ModelConfig::DEFAULT_LAYERS,
        heads: ModelConfig::DEFAULT_HEADS,
        num_classes: dims.classes,
        pos_mode: variant.pos_mode(),
        adjacency_mode: variant.adjacency_mode(),
    };
    config.validate()?;
    Ok(config)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Truncated normal with standard deviation [`INIT_STD`].
    TruncNormal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug)]
pub struct ParamSet<T: Float = f32> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Float> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            tensors: IndexMap::new(),
        }
    }
}

impl<T: Float> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Pairs `specs` with `tensors` positionally, checking every shape.
    pub fn from_tensors(specs: &[ParamSpec], tensors: Vec<Tensor<T>>) -> Result<Self> {
        if specs.len() != tensors.len() {
            return Err(Error::Config(format!(
                "{} parameter specs but {} tensors",
                specs.len(),
                tensors.len()
            )));
        }
        let mut set = ParamSet::new();
        for (spec, t) in specs.iter().zip(tensors) {
            if t.dims() != spec.dims.as_slice() {
                return Err(Error::shape(
                    "parameters",
                    format!("`{}` is {:?}, expected {:?}", spec.name, t.dims(), spec.dims),
                ));
            }
            set.insert(spec.name.clone(), t);
        }
        Ok(set)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Copies as gradient-taking leaves.
    pub fn trainable(&self) -> Self {
        self.map(|t| t.to_leaf(true))
    }

    /// Copies as constant leaves, for inference.
    pub fn frozen(&self) -> Self {
        self.map(|t| t.to_leaf(false))
    }

    pub fn cast<U: Float>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    fn map(&self, f: impl Fn(&Tensor<T>) -> Tensor<T>) -> Self {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), f(v))).collect(),
        }
    }

    /// Checks names and shapes against `specs`, in order.
    pub fn matches(&self, specs: &[ParamSpec]) -> Result<()> {
        if self.len() != specs.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, found {}",
                specs.len(),
                self.len()
            )));
        }
        for ((name, t), spec) in self.iter().zip(specs) {
            if name != spec.name || t.dims() != spec.dims.as_slice() {
                return Err(Error::Config(format!(
                    "parameter `{name}` {:?} does not match expected `{}` {:?}",
                    t.dims(),
                    spec.name,
                    spec.dims
                )));
            }
        }
        Ok(())
    }

    fn layers(&self, prefix: &str, count: usize, heads: usize) -> Result<Vec<EncoderLayerParams<T>>> {
        (0..count)
            .map(|i| {
                let tensors = EncoderLayerParams::<T>::param_shapes(1)
                    .into_iter()
                    .map(|(rel, _)| self.get(&format!("{prefix}layers.{i}.{rel}")).cloned())
                    .collect::<Result<Vec<_>>>()?;
                EncoderLayerParams::from_slice(&tensors, heads)
            })
            .collect()
    }
}

/// Draws parameters per [`ModelConfig::param_specs`]; deterministic in `rng`.
pub fn init_params(config: &ModelConfig, rng: &mut Rng) -> ParamSet<f32> {
    let mut set = ParamSet::new();
    for spec in config.param_specs() {
        let n = spec.numel();
        let data = match spec.init {
            Init::TruncNormal => (0..n).map(|_| rng.truncated_normal(INIT_STD) as f32).collect(),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        set.insert(spec.name, Tensor::new(spec.dims, data).expect("spec dims are positive"));
    }
    set
}

/// Maps the 16 level-1 tokens `[B, 16, D]` back onto their 4x4 grid,
/// `[B, 4, 4, D]`. Token `i` lands in cell `(i / 4, i % 4)`.
pub fn reshape_bridge<T: Float>(k: &Tensor<T>) -> Result<Tensor<T>> {
    let dims = k.dims();
    if dims.len() != 3 || dims[1] != LEVEL1_GRID * LEVEL1_GRID {
        return Err(Error::shape(
            "reshape_bridge",
            format!("expected [B, 16, D], got {:?}", dims),
        ));
    }
    k.reshape([dims[0], LEVEL1_GRID, LEVEL1_GRID, dims[2]])
}

/// Every intermediate of one forward pass. Level-2 fields stay `None` for
/// the single-level variants.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace<T: Float = f32> {
    pub f1: Option<Tensor<T>>,
    pub x_p: Option<Tensor<T>>,
    pub e_pos1: Option<Tensor<T>>,
    /// Level-1 sequence: the encoder input, then each layer's output.
    pub k: Vec<Tensor<T>>,
    pub z: Option<Tensor<T>>,
    pub f2: Option<Tensor<T>>,
    pub z_p: Option<Tensor<T>>,
    pub e_pos2: Option<Tensor<T>>,
    /// Level-2 sequence, class token first: encoder input, then each layer.
    pub h: Vec<Tensor<T>>,
    pub logits: Option<Tensor<T>>,
}

pub fn forward<T: Float>(config: &ModelConfig, params: &ParamSet<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    run(config, params, images, None)
}

pub fn forward_traced<T: Float>(
    config: &ModelConfig,
    params: &ParamSet<T>,
    images: &Tensor<T>,
) -> Result<(Tensor<T>, ForwardTrace<T>)> {
    let mut trace = ForwardTrace::default();
    let logits = run(config, params, images, Some(&mut trace))?;
    Ok((logits, trace))
}

fn run<T: Float>(
    config: &ModelConfig,
    params: &ParamSet<T>,
    images: &Tensor<T>,
    mut trace: Option<&mut ForwardTrace<T>>,
) -> Result<Tensor<T>> {
    let expected = [config.image_h, config.image_w, config.channels];
    let dims = images.dims();
    if dims.len() != 4 || dims[1..] != expected {
        return Err(Error::shape(
            "forward",
            format!("images {:?}, expected [B, {}, {}, {}]", dims, expected[0], expected[1], expected[2]),
        )
        .at("input"));
    }
    let b = dims[0];
    let d = config.embed_dim;
    let mut record = |f: &mut dyn FnMut(&mut ForwardTrace<T>)| {
        if let Some(t) = trace.as_deref_mut() {
            f(t);
        }
    };

    let logits = if config.variant.is_hierarchical() {
        let f1 = conv2d_patchify(images, params.get("level1.patch.kernel")?, params.get("level1.patch.bias")?)
            .map_err(|e| e.at("f1 = Conv(x)"))?;
        let x_p = f1.reshape([b, 16, d]).map_err(|e| e.at("x_p = Flatten(f1)"))?;
        let e_pos1 = positional(config, params, "level1", &x_p, LEVEL1_GRID).map_err(|e| e.at("E_pos1"))?;
        let mut k = x_p.add(&e_pos1).map_err(|e| e.at("k = x_p + E_pos1"))?;
        record(&mut |t| {
            t.f1 = Some(f1.clone());
            t.x_p = Some(x_p.clone());
            t.e_pos1 = Some(e_pos1.clone());
            t.k.push(k.clone());
        });
        for layer in params.layers("level1.", config.layers_per_level, config.heads)? {
            k = encoder_layer(&k, &layer).map_err(|e| e.at("level-1 encoder"))?;
            record(&mut |t| t.k.push(k.clone()));
        }

        let z = reshape_bridge(&k).map_err(|e| e.at("z = Reshape(k)"))?;
        let f2 = conv2d_patchify(&z, params.get("level2.patch.kernel")?, params.get("level2.patch.bias")?)
            .map_err(|e| e.at("f2 = Conv(z)"))?;
        let tokens2 = LEVEL2_GRID * LEVEL2_GRID;
        let z_p = f2.reshape([b, tokens2, d]).map_err(|e| e.at("z_p = Flatten(f2)"))?;
        let e_pos2 = positional(config, params, "level2", &z_p, LEVEL2_GRID).map_err(|e| e.at("E_pos2"))?;
        let h = z_p.add(&e_pos2).map_err(|e| e.at("h = z_p + E_pos2"))?;
        let class = params.get("level2.class_token")?.expand_leading(b)?.reshape([b, 1, d])?;
        let mut h = concat(&[class, h], 1).map_err(|e| e.at("h = [x_class; h]"))?;
        record(&mut |t| {
            t.z = Some(z.clone());
            t.f2 = Some(f2.clone());
            t.z_p = Some(z_p.clone());
            t.e_pos2 = Some(e_pos2.clone());
            t.h.push(h.clone());
        });
        for layer in params.layers("level2.", config.layers_per_level, config.heads)? {
            h = encoder_layer(&h, &layer).map_err(|e| e.at("level-2 encoder"))?;
            record(&mut |t| t.h.push(h.clone()));
        }
        head(params, &h)?
    } else {
        let n = config.tokens();
        let f1 = conv2d_patchify(images, params.get("patch.kernel")?, params.get("patch.bias")?)
            .map_err(|e| e.at("f1 = Conv(x)"))?;
        let x_p = f1.reshape([b, n, d]).map_err(|e| e.at("x_p = Flatten(f1)"))?;
        let class = params.get("class_token")?.expand_leading(b)?.reshape([b, 1, d])?;
        let pos = params.get("pos.embedding")?;
        let mut k = concat(&[class, x_p.clone()], 1)
            .and_then(|seq| seq.add(pos))
            .map_err(|e| e.at("k = [x_class; x_p] + E_pos"))?;
        record(&mut |t| {
            t.f1 = Some(f1.clone());
            t.x_p = Some(x_p.clone());
            t.e_pos1 = Some(pos.clone());
            t.k.push(k.clone());
        });
        for layer in params.layers("", config.layers_per_level, config.heads)? {
            k = encoder_layer(&k, &layer).map_err(|e| e.at("encoder"))?;
            record(&mut |t| t.k.push(k.clone()));
        }
        head(params, &k)?
    };
    record(&mut |t| t.logits = Some(logits.clone()));
    Ok(logits)
}

/// Final LayerNorm and classification head, applied to the class token
/// (sequence position 0) only.
fn head<T: Float>(params: &ParamSet<T>, seq: &Tensor<T>) -> Result<Tensor<T>> {
    let norm = LayerNormParams {
        gamma: params.get("norm.gamma")?.clone(),
        beta: params.get("norm.beta")?.clone(),
    };
    let head = Linear::new(params.get("head.weight")?.clone(), params.get("head.bias")?.clone())?;
    let class = norm.forward(&seq.select(1, 0)?)?;
    head.forward(&class).map_err(|e| e.at("y = CH(h_N^0)"))
}

fn positional<T: Float>(
    config: &ModelConfig,
    params: &ParamSet<T>,
    level: &str,
    tokens: &Tensor<T>,
    grid: usize,
) -> Result<Tensor<T>> {
    match config.adjacency_mode {
        Some(mode) => {
            let a_hat = normalize_adjacency(&build_grid_adjacency(grid, grid, mode)?);
            gcn_positional_embedding(tokens, &a_hat, params.get(&format!("{level}.pos.gcn_weight"))?)
        }
        None => Ok(params.get(&format!("{level}.pos.embedding"))?.clone()),
    }
}

/// Class index of each row's maximum; ties go to the lowest index.
pub fn argmax_rows<T: Float>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape().last();
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, row[0]), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
