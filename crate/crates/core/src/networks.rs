//! Trainable sub-networks and the composed translation pass.
//!
//! Layout (all widths derive from `base_channels`, `b`):
//!
//! * content encoder: 3x3 stem, two stride-2 4x4 convolutions, two residual
//!   blocks, instance normalization throughout; output has `4b` channels at
//!   1/4 resolution.
//! * style encoder: four stride-2 convolutions, global average pool, linear
//!   projection to `style_dim`. One encoder serves foreground and background.
//! * attention network: consumes the content code; two residual blocks, two
//!   nearest-upsample + conv stages and a sigmoid head at full resolution.
//! * decoder: two residual blocks whose normalizations are highway AdaIN
//!   layers, then two nearest-upsample + conv stages and a tanh head.
//! * affine heads: two separate MLPs mapping a style code to `[β; γ]` for
//!   every AdaIN site of the decoder.
//! * critic: four stride-2 convolutions with a realness head and an
//!   attribute classifier head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{nn, Device, Tensor};

use crate::error::{dim_err, LomitError, Result};
use crate::hadain::{self, AffineParams};

/// Spatial reduction of the content encoder.
pub const CONTENT_DOWNSAMPLING: i64 = 4;
/// AdaIN sites inside the decoder (two per residual block).
pub const ADAIN_SITES: usize = 4;
const RESIDUAL_BLOCKS: usize = 2;
const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub resolution: i64,
    pub base_channels: i64,
    pub style_dim: i64,
    pub attributes: i64,
    pub mlp_hidden: i64,
    pub critic_channels: i64,
    /// Encode styles from whole images instead of masked regions (the
    /// exemplar-mask ablation).
    #[serde(default)]
    pub whole_image_style: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            resolution: 64,
            base_channels: 8,
            style_dim: 8,
            attributes: 1,
            mlp_hidden: 64,
            critic_channels: 16,
            whole_image_style: false,
        }
    }
}

impl Architecture {
    pub fn content_channels(&self) -> i64 {
        4 * self.base_channels
    }

    pub fn content_resolution(&self) -> i64 {
        self.resolution / CONTENT_DOWNSAMPLING
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("resolution", self.resolution),
            ("base_channels", self.base_channels),
            ("style_dim", self.style_dim),
            ("attributes", self.attributes),
            ("mlp_hidden", self.mlp_hidden),
            ("critic_channels", self.critic_channels),
        ];
        for (name, v) in positive {
            if v <= 0 {
                return Err(LomitError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.resolution % 16 != 0 {
            return Err(LomitError::Config(format!(
                "resolution must be a multiple of 16, got {}",
                self.resolution
            )));
        }
        Ok(())
    }
}

/// Named parameter groups; each owns a sub-tree of the variable store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    ContentEncoder,
    StyleEncoder,
    Attention,
    Decoder,
    MlpForeground,
    MlpBackground,
    Critic,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::ContentEncoder,
        ParamGroup::StyleEncoder,
        ParamGroup::Attention,
        ParamGroup::Decoder,
        ParamGroup::MlpForeground,
        ParamGroup::MlpBackground,
        ParamGroup::Critic,
    ];

    pub const GENERATOR: [ParamGroup; 6] = [
        ParamGroup::ContentEncoder,
        ParamGroup::StyleEncoder,
        ParamGroup::Attention,
        ParamGroup::Decoder,
        ParamGroup::MlpForeground,
        ParamGroup::MlpBackground,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::ContentEncoder => "e_c",
            ParamGroup::StyleEncoder => "e_s",
            ParamGroup::Attention => "g_m",
            ParamGroup::Decoder => "g",
            ParamGroup::MlpForeground => "mlp_f",
            ParamGroup::MlpBackground => "mlp_b",
            ParamGroup::Critic => "d",
        }
    }
}

fn conv(p: nn::Path, c_in: i64, c_out: i64, k: i64, stride: i64) -> nn::Conv2D {
    let cfg = nn::ConvConfig {
        stride,
        padding: if stride == 2 { 1 } else { k / 2 },
        ..Default::default()
    };
    nn::conv2d(p, c_in, c_out, k, cfg)
}

/// Nearest-neighbour 2x upsampling followed by a 3×3 convolution.
#[derive(Debug)]
struct UpConv(nn::Conv2D);

impl UpConv {
    fn new(p: nn::Path, c_in: i64, c_out: i64) -> Self {
        Self(conv(p, c_in, c_out, 3, 1))
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let (h, w) = (x.size()[2], x.size()[3]);
        x.upsample_nearest2d([2 * h, 2 * w], None, None).apply(&self.0)
    }
}

fn instance_norm(x: &Tensor) -> Tensor {
    hadain::instance_normalize(x).expect("rank-4 activation")
}

#[derive(Debug)]
struct ResBlock {
    conv_a: nn::Conv2D,
    conv_b: nn::Conv2D,
}

impl ResBlock {
    fn new(p: nn::Path, channels: i64) -> Self {
        Self {
            conv_a: conv(&p / "conv_a", channels, channels, 3, 1),
            conv_b: conv(&p / "conv_b", channels, channels, 3, 1),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let y = instance_norm(&x.apply(&self.conv_a)).relu();
        x + instance_norm(&y.apply(&self.conv_b))
    }
}

#[derive(Debug)]
struct ContentEncoder {
    stem: nn::Conv2D,
    down: [nn::Conv2D; 2],
    blocks: Vec<ResBlock>,
}

impl ContentEncoder {
    fn new(p: nn::Path, arch: &Architecture) -> Self {
        let b = arch.base_channels;
        Self {
            stem: conv(&p / "stem", 3, b, 3, 1),
            down: [
                conv(&p / "down1", b, 2 * b, 4, 2),
                conv(&p / "down2", 2 * b, 4 * b, 4, 2),
            ],
            blocks: (0..RESIDUAL_BLOCKS)
                .map(|i| ResBlock::new(&p / format!("res{i}"), 4 * b))
                .collect(),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let mut h = instance_norm(&x.apply(&self.stem)).relu();
        for d in &self.down {
            h = instance_norm(&h.apply(d)).relu();
        }
        for block in &self.blocks {
            h = block.forward(&h);
        }
        h
    }
}

#[derive(Debug)]
struct StyleEncoder {
    convs: Vec<nn::Conv2D>,
    head: nn::Linear,
}

impl StyleEncoder {
    fn new(p: nn::Path, arch: &Architecture) -> Self {
        let b = arch.base_channels;
        let widths = [3, b, 2 * b, 4 * b, 4 * b];
        Self {
            convs: widths
                .windows(2)
                .enumerate()
                .map(|(i, w)| conv(&p / format!("down{i}"), w[0], w[1], 4, 2))
                .collect(),
            head: nn::linear(&p / "head", 4 * b, arch.style_dim, Default::default()),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let mut h = x.shallow_clone();
        for c in &self.convs {
            h = h.apply(c).relu();
        }
        h.mean_dim(&[2i64, 3][..], false, None).apply(&self.head)
    }
}

#[derive(Debug)]
struct AttentionNet {
    blocks: Vec<ResBlock>,
    up: [UpConv; 2],
    head: nn::Conv2D,
}

impl AttentionNet {
    fn new(p: nn::Path, arch: &Architecture) -> Self {
        let c = arch.content_channels();
        Self {
            blocks: (0..RESIDUAL_BLOCKS)
                .map(|i| ResBlock::new(&p / format!("res{i}"), c))
                .collect(),
            up: [UpConv::new(&p / "up1", c, c / 2), UpConv::new(&p / "up2", c / 2, c / 4)],
            head: conv(&p / "head", c / 4, 1, 3, 1),
        }
    }

    fn forward(&self, c: &Tensor) -> Tensor {
        let mut h = c.shallow_clone();
        for block in &self.blocks {
            h = block.forward(&h);
        }
        for u in &self.up {
            h = u.forward(&h).relu();
        }
        h.apply(&self.head).sigmoid()
    }
}

/// How the decoder's AdaIN sites are normalized.
enum SiteNorm<'a> {
    Highway {
        mask: &'a Tensor,
        fg: &'a [AffineParams],
        bg: &'a [AffineParams],
    },
    Uniform(&'a [AffineParams]),
}

impl SiteNorm<'_> {
    fn apply(&self, site: usize, x: &Tensor) -> Result<Tensor> {
        match self {
            SiteNorm::Highway { mask, fg, bg } => {
                let a = hadain::adain(x, &fg[site])?;
                let b = hadain::adain(x, &bg[site])?;
                Ok(hadain::blend(mask, &a, &b))
            }
            SiteNorm::Uniform(params) => hadain::adain(x, &params[site]),
        }
    }
}

#[derive(Debug)]
struct Decoder {
    blocks: Vec<(nn::Conv2D, nn::Conv2D)>,
    up: [UpConv; 2],
    head: nn::Conv2D,
}

impl Decoder {
    fn new(p: nn::Path, arch: &Architecture) -> Self {
        let c = arch.content_channels();
        Self {
            blocks: (0..RESIDUAL_BLOCKS)
                .map(|i| {
                    let q = &p / format!("res{i}");
                    (conv(&q / "conv_a", c, c, 3, 1), conv(&q / "conv_b", c, c, 3, 1))
                })
                .collect(),
            up: [UpConv::new(&p / "up1", c, c / 2), UpConv::new(&p / "up2", c / 2, c / 4)],
            head: conv(&p / "head", c / 4, 3, 3, 1),
        }
    }

    fn stylize(&self, c: &Tensor, norm: &SiteNorm) -> Result<Tensor> {
        let mut h = c.shallow_clone();
        for (i, (conv_a, conv_b)) in self.blocks.iter().enumerate() {
            let y = norm.apply(2 * i, &h.apply(conv_a))?.relu();
            let y = norm.apply(2 * i + 1, &y.apply(conv_b))?;
            h = h + y;
        }
        Ok(h)
    }

    fn upsample(&self, h: &Tensor) -> Tensor {
        let mut y = h.shallow_clone();
        for u in &self.up {
            y = u.forward(&y).relu();
        }
        y.apply(&self.head).tanh()
    }
}

#[derive(Debug)]
struct AffineMlp {
    layers: [nn::Linear; 3],
}

impl AffineMlp {
    fn new(p: nn::Path, arch: &Architecture) -> Self {
        let out = 2 * ADAIN_SITES as i64 * arch.content_channels();
        Self {
            layers: [
                nn::linear(&p / "fc1", arch.style_dim, arch.mlp_hidden, Default::default()),
                nn::linear(&p / "fc2", arch.mlp_hidden, arch.mlp_hidden, Default::default()),
                nn::linear(&p / "fc3", arch.mlp_hidden, out, Default::default()),
            ],
        }
    }

    /// Splits the flat `[β; γ]` output into one [`AffineParams`] per site.
    fn forward(&self, s: &Tensor, channels: i64) -> Result<Vec<AffineParams>> {
        let h = s.apply(&self.layers[0]).relu().apply(&self.layers[1]).relu();
        let flat = h.apply(&self.layers[2]);
        (0..ADAIN_SITES as i64)
            .map(|k| {
                let beta = flat.narrow(1, 2 * k * channels, channels);
                let gamma = flat.narrow(1, (2 * k + 1) * channels, channels);
                AffineParams::new(gamma, beta)
            })
            .collect()
    }
}

#[derive(Debug)]
struct Critic {
    convs: Vec<nn::Conv2D>,
    realness: nn::Linear,
    classifier: nn::Linear,
}

impl Critic {
    fn new(p: nn::Path, arch: &Architecture) -> Self {
        let d = arch.critic_channels;
        let widths = [3, d, 2 * d, 4 * d, 8 * d];
        let side = arch.resolution / 16;
        let feats = 8 * d * side * side;
        Self {
            convs: widths
                .windows(2)
                .enumerate()
                .map(|(i, w)| conv(&p / format!("down{i}"), w[0], w[1], 4, 2))
                .collect(),
            realness: nn::linear(&p / "realness", feats, 1, Default::default()),
            classifier: nn::linear(&p / "classifier", feats, arch.attributes, Default::default()),
        }
    }

    fn forward(&self, x: &Tensor) -> (Tensor, Tensor) {
        let mut h = x.shallow_clone();
        for c in &self.convs {
            let y = h.apply(c);
            h = y.maximum(&(&y * LEAKY_SLOPE));
        }
        let h = h.flatten(1, -1);
        (h.apply(&self.realness).squeeze_dim(1), h.apply(&self.classifier))
    }
}

#[derive(Debug)]
pub struct CriticOutput {
    /// `[B]`, unbounded.
    pub realness: Tensor,
    /// `[B, A]`.
    pub attr_logits: Tensor,
}

/// User-supplied masks replacing the extracted ones.
#[derive(Debug, Default)]
pub struct MaskOverrides {
    pub input: Option<Tensor>,
    pub exemplar: Option<Tensor>,
}

/// Result of translating an input toward an exemplar.
#[derive(Debug)]
pub struct Translation {
    pub output: Tensor,
    /// Input mask as consumed by the pipeline.
    pub input_mask: Tensor,
    /// Exemplar mask as consumed by the pipeline.
    pub exemplar_mask: Tensor,
    pub content: Tensor,
    pub style_fg: Tensor,
    pub style_bg: Tensor,
    pub fg_params: Vec<AffineParams>,
    pub bg_params: Vec<AffineParams>,
    /// Input mask pooled to content resolution.
    pub content_mask: Tensor,
    /// Decoder activations after the HAdaIN residual blocks.
    pub stylized: Tensor,
}

/// Every trainable network plus the variable store that owns their weights.
pub struct ModelBundle {
    vs: nn::VarStore,
    arch: Architecture,
    e_c: ContentEncoder,
    e_s: StyleEncoder,
    g_m: AttentionNet,
    g: Decoder,
    mlp_f: AffineMlp,
    mlp_b: AffineMlp,
    d: Critic,
}

impl std::fmt::Debug for ModelBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelBundle").field("arch", &self.arch).finish_non_exhaustive()
    }
}

impl ModelBundle {
    /// Builds the networks and initializes every weight from `seed`.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let model = Self::uninitialized(arch)?;
        model.initialize(seed);
        Ok(model)
    }

    /// Builds the networks with placeholder weights, to be overwritten by a
    /// checkpoint load.
    pub(crate) fn uninitialized(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let vs = nn::VarStore::new(Device::Cpu);
        let root = vs.root();
        Ok(Self {
            e_c: ContentEncoder::new(&root / ParamGroup::ContentEncoder.prefix(), &arch),
            e_s: StyleEncoder::new(&root / ParamGroup::StyleEncoder.prefix(), &arch),
            g_m: AttentionNet::new(&root / ParamGroup::Attention.prefix(), &arch),
            g: Decoder::new(&root / ParamGroup::Decoder.prefix(), &arch),
            mlp_f: AffineMlp::new(&root / ParamGroup::MlpForeground.prefix(), &arch),
            mlp_b: AffineMlp::new(&root / ParamGroup::MlpBackground.prefix(), &arch),
            d: Critic::new(&root / ParamGroup::Critic.prefix(), &arch),
            vs,
            arch,
        })
    }

    /// He-uniform weights, zero biases; the last affine-head layer is scaled
    /// down with its γ biases at one so the decoder starts near plain
    /// instance normalization.
    fn initialize(&self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vars = self.named_variables();
        let channels = self.arch.content_channels();
        tch::no_grad(|| {
            for (name, var) in &vars {
                let shape = var.size();
                let numel: i64 = shape.iter().product();
                let is_affine_out = name.ends_with("fc3.weight") || name.ends_with("fc3.bias");
                let values: Vec<f32> = if name.ends_with(".bias") {
                    if is_affine_out {
                        (0..numel)
                            .map(|i| if (i / channels) % 2 == 1 { 1.0 } else { 0.0 })
                            .collect()
                    } else {
                        vec![0.0; numel as usize]
                    }
                } else {
                    let fan_in: i64 = shape[1..].iter().product();
                    let mut bound = (6.0 / fan_in as f64).sqrt();
                    if is_affine_out {
                        bound *= 0.1;
                    }
                    (0..numel)
                        .map(|_| rng.gen_range(-bound..bound) as f32)
                        .collect()
                };
                var.shallow_clone()
                    .copy_(&Tensor::from_slice(&values).reshape(&shape));
            }
        });
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn var_store(&self) -> &nn::VarStore {
        &self.vs
    }

    /// All variables sorted by name.
    pub fn named_variables(&self) -> Vec<(String, Tensor)> {
        let mut vars: Vec<_> = self.vs.variables().into_iter().collect();
        vars.sort_by(|a, b| a.0.cmp(&b.0));
        vars
    }

    pub fn group_variables(&self, group: ParamGroup) -> Vec<(String, Tensor)> {
        let prefix = format!("{}.", group.prefix());
        self.named_variables()
            .into_iter()
            .filter(|(name, _)| name.starts_with(&prefix))
            .collect()
    }

    pub fn parameter_count(&self) -> i64 {
        self.named_variables().iter().map(|(_, t)| t.numel() as i64).sum()
    }

    fn check_image(&self, x: &Tensor) -> Result<()> {
        match x.size().as_slice() {
            &[_, 3, h, w] if h > 0 && w > 0 => {
                if h % CONTENT_DOWNSAMPLING != 0 || w % CONTENT_DOWNSAMPLING != 0 {
                    return dim_err(format!(
                        "image resolution {h}x{w} is not divisible by the downsampling factor {CONTENT_DOWNSAMPLING}"
                    ));
                }
                Ok(())
            }
            other => dim_err(format!("expected an image shaped [B, 3, H, W], got {other:?}")),
        }
    }

    fn check_content(&self, c: &Tensor) -> Result<()> {
        match c.size().as_slice() {
            &[_, ch, _, _] if ch == self.arch.content_channels() => Ok(()),
            other => dim_err(format!(
                "expected a content code with {} channels, got shape {other:?}",
                self.arch.content_channels()
            )),
        }
    }

    pub fn encode_content(&self, x: &Tensor) -> Result<Tensor> {
        self.check_image(x)?;
        Ok(self.e_c.forward(x))
    }

    pub fn encode_style(&self, x_region: &Tensor) -> Result<Tensor> {
        self.check_image(x_region)?;
        Ok(self.e_s.forward(x_region))
    }

    pub fn extract_mask(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.encode_content(x)?;
        self.mask_from_content(&c)
    }

    /// Runs the attention network on an already computed content code.
    pub fn mask_from_content(&self, c: &Tensor) -> Result<Tensor> {
        self.check_content(c)?;
        Ok(self.g_m.forward(c))
    }

    /// `[β; γ]` for every decoder AdaIN site, from the foreground and
    /// background heads respectively.
    pub fn affine_heads(
        &self,
        s_f: &Tensor,
        s_b: &Tensor,
    ) -> Result<(Vec<AffineParams>, Vec<AffineParams>)> {
        for (name, s) in [("foreground", s_f), ("background", s_b)] {
            match s.size().as_slice() {
                &[_, len] if len == self.arch.style_dim => {}
                other => {
                    return dim_err(format!(
                        "{name} style code must be [B, {}], got {other:?}",
                        self.arch.style_dim
                    ))
                }
            }
        }
        let c = self.arch.content_channels();
        Ok((self.mlp_f.forward(s_f, c)?, self.mlp_b.forward(s_b, c)?))
    }

    /// The highway-normalized residual stage of the decoder; `mask` is at
    /// image resolution and is area-pooled to the content grid.
    pub fn stylize(
        &self,
        c: &Tensor,
        mask: &Tensor,
        fg: &[AffineParams],
        bg: &[AffineParams],
    ) -> Result<(Tensor, Tensor)> {
        self.check_content(c)?;
        check_sites(fg)?;
        check_sites(bg)?;
        let size = c.size();
        let content_mask = hadain::downsample_mask(mask, (size[2], size[3]))?;
        // Validate alignment and range once; the per-site blend skips it.
        let _ = hadain::hadain(&content_mask, c, &fg[0], &bg[0])?;
        let h = self.g.stylize(
            c,
            &SiteNorm::Highway {
                mask: &content_mask,
                fg,
                bg,
            },
        )?;
        Ok((h, content_mask))
    }

    /// The residual stage with every site normalized by plain AdaIN.
    pub fn stylize_uniform(&self, c: &Tensor, params: &[AffineParams]) -> Result<Tensor> {
        self.check_content(c)?;
        check_sites(params)?;
        self.g.stylize(c, &SiteNorm::Uniform(params))
    }

    /// Upsampling stage of the decoder: stylized features to an image in [-1, 1].
    pub fn decode(&self, h: &Tensor) -> Result<Tensor> {
        self.check_content(h)?;
        Ok(self.g.upsample(h))
    }

    pub fn criticize(&self, x: &Tensor) -> Result<CriticOutput> {
        self.check_critic_input(x)?;
        let (realness, attr_logits) = self.d.forward(x);
        Ok(CriticOutput {
            realness,
            attr_logits,
        })
    }

    /// Critic realness without the classifier head.
    pub fn critic_realness(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.criticize(x)?.realness)
    }

    fn check_critic_input(&self, x: &Tensor) -> Result<()> {
        let r = self.arch.resolution;
        match x.size().as_slice() {
            &[_, 3, h, w] if h == r && w == r => Ok(()),
            other => dim_err(format!("critic expects [B, 3, {r}, {r}] images, got {other:?}")),
        }
    }

    /// Translates `x1` toward the style of exemplar `x2`.
    pub fn translate(
        &self,
        x1: &Tensor,
        x2: &Tensor,
        overrides: MaskOverrides,
    ) -> Result<Translation> {
        self.check_image(x1)?;
        self.check_image(x2)?;
        if x1.size() != x2.size() {
            return dim_err(format!(
                "input {:?} and exemplar {:?} differ in shape",
                x1.size(),
                x2.size()
            ));
        }
        for (name, x) in [("input", x1), ("exemplar", x2)] {
            let (lo, hi) = (x.min().double_value(&[]), x.max().double_value(&[]));
            if !(lo >= -1.0 && hi <= 1.0) {
                return Err(LomitError::Domain(format!(
                    "{name} image values must lie in [-1, 1], found [{lo}, {hi}]"
                )));
            }
        }
        let c1 = self.encode_content(x1)?;
        let m1 = match overrides.input {
            Some(m) => {
                check_override(&m, x1, "input")?;
                m
            }
            None => self.mask_from_content(&c1)?,
        };
        let m2 = match overrides.exemplar {
            Some(m) => {
                check_override(&m, x2, "exemplar")?;
                m
            }
            None => self.extract_mask(x2)?,
        };
        self.translate_from_parts(x1, &c1, &m1, x2, &m2)
    }

    /// Translation given precomputed content and masks.
    pub fn translate_from_parts(
        &self,
        x1: &Tensor,
        c1: &Tensor,
        m1: &Tensor,
        x2: &Tensor,
        m2: &Tensor,
    ) -> Result<Translation> {
        let (style_src_fg, style_src_bg, exemplar_mask) = if self.arch.whole_image_style {
            (x2.shallow_clone(), x1.shallow_clone(), m2.ones_like())
        } else {
            let (x2_fg, _) = hadain::split_by_mask(x2, m2)?;
            let (_, x1_bg) = hadain::split_by_mask(x1, m1)?;
            (x2_fg, x1_bg, m2.shallow_clone())
        };
        let style_fg = self.encode_style(&style_src_fg)?;
        let style_bg = self.encode_style(&style_src_bg)?;
        let (fg_params, bg_params) = self.affine_heads(&style_fg, &style_bg)?;
        let (stylized, content_mask) = self.stylize(c1, m1, &fg_params, &bg_params)?;
        let output = self.decode(&stylized)?;
        Ok(Translation {
            output,
            input_mask: m1.shallow_clone(),
            exemplar_mask,
            content: c1.shallow_clone(),
            style_fg,
            style_bg,
            fg_params,
            bg_params,
            content_mask,
            stylized,
        })
    }
}

fn check_sites(params: &[AffineParams]) -> Result<()> {
    if params.len() != ADAIN_SITES {
        return dim_err(format!(
            "expected {ADAIN_SITES} affine parameter sets, got {}",
            params.len()
        ));
    }
    Ok(())
}

fn check_override(m: &Tensor, x: &Tensor, name: &str) -> Result<()> {
    let xs = x.size();
    let expected = [xs[0], 1, xs[2], xs[3]];
    if m.size() != expected {
        return dim_err(format!(
            "{name} mask override {:?} does not match image {:?}",
            m.size(),
            xs
        ));
    }
    hadain::check_mask_range(m)
}
