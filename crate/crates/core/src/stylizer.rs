//! Information hiding networks: the texture preprocessor that produces the
//! content feature, the encoder, the decoder that renders the stylized stego
//! image, the discriminator, and their losses.

use rand::Rng;
use serde::{Deserialize, Serialize};
use stylestego_nn::{Activation, Conv2d, ConvBlock, Graph, Module, Parameter, ResidualBlock, Tensor, UpsampleBlock, Var};

use crate::error::{Result, StegoError};
use crate::filter_bank::{FilterBank, BANK_SIZE};
use crate::message::{bind, SecretFeature};

/// Total spatial downsampling of the encoder (four stride-2 layers).
pub const DOWNSAMPLE: usize = 16;
const KERNEL: usize = 3;

/// Architecture hyperparameters. Stored in checkpoints; a checkpoint only
/// loads into a model with an identical architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Encoder widths are `b, b, 2b, 4b, 8b`; the decoder mirrors them.
    pub base_width: usize,
    /// Channels of the secret-feature grid.
    pub secret_channels: usize,
    /// Width of the preprocessing conv head.
    pub head_width: usize,
    pub extractor_width: usize,
    pub disc_width: usize,
    /// Number of stride-2 discriminator layers.
    pub disc_layers: usize,
    pub res_blocks: usize,
    /// Channel-attention reduction ratio.
    pub reduction: usize,
    pub slope: f64,
    /// Initialise the extractor's first layer from the SRM table (random otherwise).
    pub srm_init: bool,
    /// Learned channel attention in the extractor (gates fixed at 0.5 otherwise).
    pub attention: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            base_width: 32,
            secret_channels: 128,
            head_width: 16,
            extractor_width: 32,
            disc_width: 32,
            disc_layers: 4,
            res_blocks: 9,
            reduction: 8,
            slope: 0.2,
            srm_init: true,
            attention: true,
        }
    }
}

impl ArchConfig {
    /// Discriminator depth for a training crop: seven halvings are kept for
    /// crops of 128 px and up, smaller crops get four.
    pub fn disc_layers_for_crop(crop: usize) -> usize {
        if crop >= 128 {
            7
        } else {
            4
        }
    }

    pub fn encoder_widths(&self) -> [usize; 5] {
        let b = self.base_width;
        [b, b, 2 * b, 4 * b, 8 * b]
    }

    pub fn latent_channels(&self) -> usize {
        8 * self.base_width
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(StegoError::Config(m));
        if self.base_width == 0 || self.secret_channels == 0 || self.head_width == 0 {
            return bad("network widths must be positive".into());
        }
        if self.extractor_width == 0 || self.disc_width == 0 || self.disc_layers == 0 {
            return bad("extractor and discriminator widths/depth must be positive".into());
        }
        if self.reduction == 0 || (2 * self.extractor_width) % self.reduction != 0 {
            return bad(format!(
                "attention reduction {} must divide the attended width {}",
                self.reduction,
                2 * self.extractor_width
            ));
        }
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return bad(format!("leaky ReLU slope {} must lie in (0, 1)", self.slope));
        }
        Ok(())
    }
}

/// Rejects image sizes the encoder cannot halve four times.
pub fn check_image_dims(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
        let fit = |v: usize| (v / DOWNSAMPLE).max(1) * DOWNSAMPLE;
        return Err(StegoError::Shape(format!(
            "image is {h}x{w}; both sides must be positive multiples of {DOWNSAMPLE} (resize or crop to e.g. {}x{})",
            fit(h),
            fit(w)
        )));
    }
    Ok(())
}

fn image_dims(g: &Graph, img: Var) -> Result<(usize, usize)> {
    match *g.shape(img) {
        [h, w, 3] => {
            check_image_dims(h, w)?;
            Ok((h, w))
        }
        ref s => Err(StegoError::Shape(format!("expected an [h, w, 3] image, got {s:?}"))),
    }
}

/// Texture preprocessing: high-pass bank, then a four-layer Leaky ReLU conv
/// head. The head's third and fourth layers are separated by a 16x average
/// pool so the content feature lands on the secret grid resolution.
#[derive(Clone, Debug)]
pub struct Preprocessor {
    pub bank: FilterBank,
    pub head: Vec<Conv2d>,
    pub slope: f64,
}

impl Preprocessor {
    pub fn new<R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R) -> Result<Self> {
        let w = arch.head_width;
        let mut head = vec![
            Conv2d::new("pre.head.0", BANK_SIZE, w, KERNEL, 1, rng),
            Conv2d::new("pre.head.1", w, w, KERNEL, 1, rng),
            Conv2d::new("pre.head.2", w, w, KERNEL, 1, rng),
            Conv2d::new("pre.head.3", w, arch.secret_channels, KERNEL, 1, rng),
        ];
        // Residual responses are small, so a unit bias makes the bound feature
        // start out as the plain +-1 message; texture modulation is learned.
        head[3].bias.value = Tensor::full(&[arch.secret_channels], 1.0);
        Ok(Self { bank: FilterBank::srm("pre.bank")?, head, slope: arch.slope })
    }

    /// Content feature `F` of shape `[h/16, w/16, secret_channels]`.
    pub fn content_feature(&self, g: &mut Graph, img: Var) -> Result<Var> {
        image_dims(g, img)?;
        let mut x = self.bank.extract_texture(g, img)?;
        for (i, conv) in self.head.iter().enumerate() {
            if i == 3 {
                x = g.avg_pool(x, DOWNSAMPLE)?;
            }
            let y = conv.forward(g, x)?;
            x = g.leaky_relu(y, self.slope);
        }
        Ok(x)
    }
}

impl Module for Preprocessor {
    fn params(&self) -> Vec<&Parameter> {
        let mut p = self.bank.params();
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.bank.params_mut();
        p.extend(self.head.params_mut());
        p
    }
}

/// One stride-1 and four stride-2 conv/norm/ReLU layers.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<ConvBlock>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R) -> Self {
        let widths = arch.encoder_widths();
        let mut c_in = 3;
        let layers = widths
            .iter()
            .enumerate()
            .map(|(i, &c_out)| {
                let stride = if i == 0 { 1 } else { 2 };
                let block =
                    ConvBlock::new(&format!("enc.{i}"), c_in, c_out, KERNEL, stride, true, Activation::Relu, rng);
                c_in = c_out;
                block
            })
            .collect();
        Self { layers }
    }

    /// Latent representation `A` of shape `[h/16, w/16, 8b]`.
    pub fn encode(&self, g: &mut Graph, img: Var) -> Result<Var> {
        image_dims(g, img)?;
        let mut x = img;
        for layer in &self.layers {
            x = layer.forward(g, x)?;
        }
        Ok(x)
    }
}

impl Module for Encoder {
    fn params(&self) -> Vec<&Parameter> {
        self.layers.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.params_mut()
    }
}

/// Residual blocks over the concatenation `[A; M']`, four upsampling blocks
/// and a final tanh conv producing an image in [-1, 1].
#[derive(Clone, Debug)]
pub struct Decoder {
    pub latent_channels: usize,
    pub residual: Vec<ResidualBlock>,
    pub upsample: Vec<UpsampleBlock>,
    pub output: Conv2d,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R) -> Self {
        let latent = arch.latent_channels();
        let joint = latent + arch.secret_channels;
        let b = arch.base_width;
        let residual = (0..arch.res_blocks).map(|i| ResidualBlock::new(&format!("dec.res.{i}"), joint, KERNEL, rng)).collect();
        let widths = [joint, 4 * b, 2 * b, b, b];
        let upsample = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| UpsampleBlock::new(&format!("dec.up.{i}"), w[0], w[1], KERNEL, rng))
            .collect();
        let output = Conv2d::new("dec.out", b, 3, KERNEL, 1, rng);
        Self { latent_channels: latent, residual, upsample, output }
    }

    pub fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    pub fn secret_channels(&self) -> usize {
        self.upsample[0].block.conv.in_channels() - self.latent_channels
    }

    /// Renders the stego image from the latent `A` and bound secret `M'`.
    pub fn generate(&self, g: &mut Graph, latent: Var, bound: Var) -> Result<Var> {
        let (sa, sb) = (g.shape(latent).to_vec(), g.shape(bound).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[..2] != sb[..2] {
            return Err(StegoError::Shape(format!(
                "latent {sa:?} and bound secret {sb:?} must share spatial axes"
            )));
        }
        if sa[2] != self.latent_channels() || sb[2] != self.secret_channels() {
            return Err(StegoError::Shape(format!(
                "decoder expects {} latent and {} secret channels, got {} and {}",
                self.latent_channels(),
                self.secret_channels(),
                sa[2],
                sb[2]
            )));
        }
        let mut x = g.concat_channels(latent, bound)?;
        for block in &self.residual {
            x = block.forward(g, x)?;
        }
        for block in &self.upsample {
            x = block.forward(g, x)?;
        }
        let y = self.output.forward(g, x)?;
        Ok(g.tanh(y))
    }
}

impl Module for Decoder {
    fn params(&self) -> Vec<&Parameter> {
        let mut p = self.residual.params();
        p.extend(self.upsample.params());
        p.extend(self.output.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.residual.params_mut();
        p.extend(self.upsample.params_mut());
        p.extend(self.output.params_mut());
        p
    }
}

/// Fully convolutional stack of stride-2 layers ending in a one-channel logit map.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub layers: Vec<ConvBlock>,
    pub output: Conv2d,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R) -> Self {
        let d = arch.disc_width;
        let mut c_in = 3;
        let layers = (0..arch.disc_layers)
            .map(|i| {
                let c_out = d * (1 << i.min(3));
                let block = ConvBlock::new(
                    &format!("disc.{i}"),
                    c_in,
                    c_out,
                    KERNEL,
                    2,
                    i > 0,
                    Activation::LeakyRelu(0.2),
                    rng,
                );
                c_in = c_out;
                block
            })
            .collect();
        let output = Conv2d::new("disc.out", c_in, 1, KERNEL, 1, rng);
        Self { layers, output }
    }

    /// Logit map `[h', w', 1]`.
    pub fn logits(&self, g: &mut Graph, img: Var) -> Result<Var> {
        let mut x = img;
        for layer in &self.layers {
            x = layer.forward(g, x)?;
        }
        Ok(self.output.forward(g, x)?)
    }
}

impl Module for Discriminator {
    fn params(&self) -> Vec<&Parameter> {
        let mut p = self.layers.params();
        p.extend(self.output.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.layers.params_mut();
        p.extend(self.output.params_mut());
        p
    }
}

fn batch_mean(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let (first, rest) = terms
        .split_first()
        .ok_or_else(|| StegoError::Shape("loss over an empty batch".into()))?;
    let mut acc = *first;
    for &t in rest {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f64))
}

/// `-(mean log D(s) + mean log(1 - D(x)))`, evaluated from logits.
pub fn discriminator_loss(g: &mut Graph, style_logits: &[Var], stego_logits: &[Var]) -> Result<Var> {
    let real: Vec<Var> = style_logits.iter().map(|&z| g.bce_with_logits(z, 1.0)).collect();
    let fake: Vec<Var> = stego_logits.iter().map(|&z| g.bce_with_logits(z, 0.0)).collect();
    let real = batch_mean(g, &real)?;
    let fake = batch_mean(g, &fake)?;
    Ok(g.add(real, fake)?)
}

/// Non-saturating generator objective `-mean log D(stego)`.
pub fn generator_adv_loss(g: &mut Graph, stego_logits: &[Var]) -> Result<Var> {
    let terms: Vec<Var> = stego_logits.iter().map(|&z| g.bce_with_logits(z, 1.0)).collect();
    batch_mean(g, &terms)
}

/// Both sides of the adversarial style loss.
pub struct StyleLoss {
    pub discriminator: Var,
    pub generator: Var,
}

/// Runs `disc` on both batches and returns the discriminator and generator
/// losses. Gradients flow to whatever the graph tracks; the trainer evaluates
/// each side in its own phase.
pub fn style_loss(g: &mut Graph, disc: &Discriminator, stego: &[Var], style: &[Var]) -> Result<StyleLoss> {
    if stego.is_empty() || style.is_empty() {
        return Err(StegoError::Shape("style loss needs non-empty stego and style batches".into()));
    }
    let style_logits = style.iter().map(|&s| disc.logits(g, s)).collect::<Result<Vec<_>>>()?;
    let stego_logits = stego.iter().map(|&s| disc.logits(g, s)).collect::<Result<Vec<_>>>()?;
    Ok(StyleLoss {
        discriminator: discriminator_loss(g, &style_logits, &stego_logits)?,
        generator: generator_adv_loss(g, &stego_logits)?,
    })
}

/// Mean squared distance between encoder features of the content image and
/// of its stego.
pub fn content_loss(g: &mut Graph, latent: Var, stego_latent: Var) -> Result<Var> {
    Ok(g.mse(latent, stego_latent)?)
}

/// Loss weights of the generator-side objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Style (adversarial) weight.
    pub lambda: f64,
    /// Secret-loss weight.
    pub mu: f64,
}

/// `lambda * style + content + mu * secret`.
pub fn total_loss(g: &mut Graph, w: LossWeights, style: Var, content: Var, secret: Var) -> Result<Var> {
    let s = g.scale(style, w.lambda);
    let m = g.scale(secret, w.mu);
    let sc = g.add(s, content)?;
    Ok(g.add(sc, m)?)
}

/// Scalar form of [`total_loss`].
pub fn total_loss_value(w: LossWeights, style: f64, content: f64, secret: f64) -> f64 {
    w.lambda * style + content + w.mu * secret
}

/// Activations of one generator pass.
pub struct StegoForward {
    pub latent: Var,
    pub content_feature: Var,
    pub bound: Var,
    pub stego: Var,
}

/// Encoder, preprocessor and decoder run on one content image. With no secret
/// the bound feature is all zeros, which yields the cover image.
pub fn forward_stego(
    g: &mut Graph,
    pre: &Preprocessor,
    enc: &Encoder,
    dec: &Decoder,
    content: Var,
    secret: Option<&SecretFeature>,
) -> Result<StegoForward> {
    let latent = enc.encode(g, content)?;
    let content_feature = pre.content_feature(g, content)?;
    let mask = match secret {
        Some(sf) => {
            if sf.matrix.shape() != g.shape(content_feature) {
                return Err(StegoError::Shape(format!(
                    "secret grid {:?} does not match content feature {:?}",
                    sf.matrix.shape(),
                    g.shape(content_feature)
                )));
            }
            sf.matrix.clone()
        }
        None => stylestego_nn::Tensor::zeros(g.shape(content_feature)),
    };
    let mask = g.input(mask);
    let bound = bind(g, mask, content_feature)?;
    let stego = dec.generate(g, latent, bound)?;
    Ok(StegoForward { latent, content_feature, bound, stego })
}
