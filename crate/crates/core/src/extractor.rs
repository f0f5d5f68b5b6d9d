//! Message recovery: a high-pass first layer, a strided conv trunk with
//! squeeze-excitation channel attention, and a head that regresses the
//! secret grid. Bits are read off by sign.

use rand::Rng;
use stylestego_nn::{Activation, Conv2d, ConvBlock, Graph, Module, Parameter, Tensor, Var};

use crate::error::{Result, StegoError};
use crate::filter_bank::{FilterBank, BANK_SIZE};
use crate::message::{decide_bits, BitMessage, SecretFeature, SecretGrid};
use crate::stylizer::{check_image_dims, ArchConfig, DOWNSAMPLE};

/// Default hinge threshold on the squared per-cell error.
pub const DEFAULT_TOLERANCE: f64 = 0.1;

/// Squeeze-excitation gating: `x * sigmoid(W2 relu(W1 mean(x)))` per channel.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    /// `[c / r, c]`
    pub squeeze: Parameter,
    /// `[c, c / r]`
    pub excite: Parameter,
    /// When false every gate is a constant 0.5 and the weights are unused.
    pub enabled: bool,
}

impl ChannelAttention {
    pub fn new<R: Rng + ?Sized>(name: &str, channels: usize, reduction: usize, enabled: bool, rng: &mut R) -> Result<Self> {
        if reduction == 0 || channels == 0 || channels % reduction != 0 {
            return Err(StegoError::Config(format!(
                "reduction ratio {reduction} must divide the channel count {channels}"
            )));
        }
        let hidden = channels / reduction;
        let squeeze = Tensor::randn(&[hidden, channels], (2.0 / channels as f64).sqrt(), rng);
        let excite = Tensor::randn(&[channels, hidden], (1.0 / hidden as f64).sqrt(), rng);
        Ok(Self {
            squeeze: Parameter::new(format!("{name}.squeeze"), squeeze),
            excite: Parameter::new(format!("{name}.excite"), excite),
            enabled,
        })
    }

    pub fn channels(&self) -> usize {
        self.squeeze.shape()[1]
    }

    /// Per-channel gates in (0, 1), length `c`.
    pub fn gates(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let c = self.channels();
        match g.shape(x) {
            [_, _, xc] if *xc == c => {}
            s => return Err(StegoError::Shape(format!("attention over {c} channels got input {s:?}"))),
        }
        if !self.enabled {
            return Ok(g.input(Tensor::full(&[c], 0.5)));
        }
        let pooled = g.global_avg_pool(x)?;
        let w1 = g.param(&self.squeeze);
        let w2 = g.param(&self.excite);
        let h = g.matvec(w1, pooled)?;
        let h = g.relu(h);
        let s = g.matvec(w2, h)?;
        Ok(g.sigmoid(s))
    }

    pub fn attend(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = self.gates(g, x)?;
        Ok(g.channel_scale(x, s)?)
    }
}

impl Module for ChannelAttention {
    fn params(&self) -> Vec<&Parameter> {
        if self.enabled {
            vec![&self.squeeze, &self.excite]
        } else {
            Vec::new()
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        if self.enabled {
            vec![&mut self.squeeze, &mut self.excite]
        } else {
            Vec::new()
        }
    }
}

#[derive(Clone, Debug)]
pub struct Extractor {
    pub bank: FilterBank,
    /// Four stride-2 blocks; attention follows the second and the fourth.
    pub trunk: Vec<ConvBlock>,
    pub attention: Vec<ChannelAttention>,
    pub head: Conv2d,
}

impl Extractor {
    pub fn new<R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R) -> Result<Self> {
        let bank = if arch.srm_init { FilterBank::srm("ext.bank")? } else { FilterBank::random("ext.bank", rng) };
        let e = arch.extractor_width;
        let widths = [BANK_SIZE, e, 2 * e, 2 * e, 2 * e];
        let act = Activation::LeakyRelu(arch.slope);
        let trunk = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| ConvBlock::new(&format!("ext.trunk.{i}"), w[0], w[1], 3, 2, true, act, rng))
            .collect();
        let attention = (0..2)
            .map(|i| ChannelAttention::new(&format!("ext.att.{i}"), 2 * e, arch.reduction, arch.attention, rng))
            .collect::<Result<_>>()?;
        let head = Conv2d::new("ext.head", 2 * e, arch.secret_channels, 3, 1, rng);
        Ok(Self { bank, trunk, attention, head })
    }

    pub fn secret_channels(&self) -> usize {
        self.head.out_channels()
    }

    /// Raw secret-grid estimate `[h/16, w/16, secret_channels]`.
    pub fn forward(&self, g: &mut Graph, stego: Var) -> Result<Var> {
        match *g.shape(stego) {
            [h, w, 3] => check_image_dims(h, w)?,
            ref s => return Err(StegoError::Shape(format!("expected an [h, w, 3] stego image, got {s:?}"))),
        }
        let mut x = self.bank.extract_texture(g, stego)?;
        for (i, block) in self.trunk.iter().enumerate() {
            x = block.forward(g, x)?;
            if i % 2 == 1 {
                x = self.attention[i / 2].attend(g, x)?;
            }
        }
        Ok(self.head.forward(g, x)?)
    }

    /// Raw estimate as a plain tensor.
    pub fn raw(&self, stego: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(stego.clone());
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    /// Recovers `len` bits placed with `key`.
    pub fn extract(&self, stego: &Tensor, key: u64, len: usize) -> Result<BitMessage> {
        let (h, w, _) = stego.hwc()?;
        let raw = self.raw(stego)?;
        let grid = SecretGrid::new(h / DOWNSAMPLE, w / DOWNSAMPLE, self.secret_channels());
        decide_bits(&raw, grid, key, len)
    }
}

impl Module for Extractor {
    fn params(&self) -> Vec<&Parameter> {
        let mut p = self.bank.params();
        p.extend(self.trunk.params());
        p.extend(self.attention.params());
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.bank.params_mut();
        p.extend(self.trunk.params_mut());
        p.extend(self.attention.params_mut());
        p.extend(self.head.params_mut());
        p
    }
}

/// Mean over placed cells of `max(0, (m - m_hat)^2 - tol)`.
pub fn secret_loss(g: &mut Graph, raw: Var, targets: &SecretFeature, tol: f64) -> Result<Var> {
    if !(tol >= 0.0) {
        return Err(StegoError::Config(format!("error tolerance {tol} must be non-negative")));
    }
    if g.shape(raw) != targets.matrix.shape() {
        return Err(StegoError::Shape(format!(
            "extractor output {:?} does not match secret grid {:?}",
            g.shape(raw),
            targets.matrix.shape()
        )));
    }
    let est = g.gather(raw, &targets.cells)?;
    let want = g.input(Tensor::new(&[targets.cells.len()], targets.targets())?);
    let diff = g.sub(est, want)?;
    let sq = g.square(diff);
    let shifted = g.add_scalar(sq, -tol);
    let hinged = g.relu(shifted);
    Ok(g.mean(hinged))
}
