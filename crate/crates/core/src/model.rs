//! All networks of the scheme bundled together, with inference helpers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stylestego_nn::{Graph, Module, Parameter, Tensor};

use crate::error::{Result, StegoError};
use crate::extractor::Extractor;
use crate::message::{map_bits, BitMessage, SecretGrid};
use crate::stylizer::{check_image_dims, forward_stego, ArchConfig, Decoder, Discriminator, Encoder, Preprocessor, DOWNSAMPLE};

#[derive(Clone, Debug)]
pub struct StegoModel {
    pub arch: ArchConfig,
    pub preprocessor: Preprocessor,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub discriminator: Discriminator,
    pub extractor: Extractor,
}

impl StegoModel {
    /// Fresh model; every weight is drawn from a stream seeded by `seed`.
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let preprocessor = Preprocessor::new(&arch, &mut rng)?;
        let encoder = Encoder::new(&arch, &mut rng);
        let decoder = Decoder::new(&arch, &mut rng);
        let discriminator = Discriminator::new(&arch, &mut rng);
        let extractor = Extractor::new(&arch, &mut rng)?;
        Ok(Self { arch, preprocessor, encoder, decoder, discriminator, extractor })
    }

    /// Secret grid for an `h x w` image.
    pub fn grid(&self, h: usize, w: usize) -> Result<SecretGrid> {
        check_image_dims(h, w)?;
        Ok(SecretGrid::new(h / DOWNSAMPLE, w / DOWNSAMPLE, self.arch.secret_channels))
    }

    /// Parameters updated by the generator-side objective.
    pub fn generator_params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.preprocessor.params_mut();
        p.extend(self.encoder.params_mut());
        p.extend(self.decoder.params_mut());
        p.extend(self.extractor.params_mut());
        p
    }

    pub fn discriminator_params_mut(&mut self) -> Vec<&mut Parameter> {
        self.discriminator.params_mut()
    }

    fn render(&self, content: &Tensor, msg: Option<(&BitMessage, u64)>) -> Result<Tensor> {
        let (h, w, _) = content.hwc()?;
        let grid = self.grid(h, w)?;
        let secret = msg.map(|(m, key)| map_bits(m, grid, key)).transpose()?;
        let mut g = Graph::new();
        g.set_params_frozen(true);
        let x = g.input(content.clone());
        let out = forward_stego(&mut g, &self.preprocessor, &self.encoder, &self.decoder, x, secret.as_ref())?;
        Ok(g.value(out.stego).clone())
    }

    /// Stylized stego image carrying `msg` under `key`.
    pub fn embed(&self, content: &Tensor, msg: &BitMessage, key: u64) -> Result<Tensor> {
        self.render(content, Some((msg, key)))
    }

    /// Stylized image with the message path zeroed.
    pub fn cover(&self, content: &Tensor) -> Result<Tensor> {
        self.render(content, None)
    }

    pub fn extract(&self, stego: &Tensor, key: u64, len: usize) -> Result<BitMessage> {
        let (h, w, _) = stego.hwc()?;
        let grid = self.grid(h, w)?;
        if len > grid.capacity() {
            return Err(StegoError::Capacity { bits: len, capacity: grid.capacity(), grid: grid.to_string() });
        }
        self.extractor.extract(stego, key, len)
    }
}

impl Module for StegoModel {
    /// Checkpoint order: preprocessor, encoder, decoder, discriminator, extractor.
    fn params(&self) -> Vec<&Parameter> {
        let mut p = self.preprocessor.params();
        p.extend(self.encoder.params());
        p.extend(self.decoder.params());
        p.extend(self.discriminator.params());
        p.extend(self.extractor.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.preprocessor.params_mut();
        p.extend(self.encoder.params_mut());
        p.extend(self.decoder.params_mut());
        p.extend(self.discriminator.params_mut());
        p.extend(self.extractor.params_mut());
        p
    }
}
