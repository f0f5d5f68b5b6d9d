//! Seeded finite-difference checks. Each returns the worst relative error
//! over its seeds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stylestego::extractor::{secret_loss, ChannelAttention};
use stylestego::filter_bank::FilterBank;
use stylestego::message::{bind, map_bits, BitMessage, SecretFeature, SecretGrid};
use stylestego::model::StegoModel;
use stylestego::stylizer::{
    content_loss, discriminator_loss, forward_stego, generator_adv_loss, total_loss, ArchConfig, LossWeights,
};
use stylestego_nn::gradcheck::{check_inputs, check_module, project, projection};
use stylestego_nn::{Activation, Graph, Module, NnError, Tensor, Var};

pub type Check = fn(u64) -> f64;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x0b1e_c700 + seed)
}

pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        base_width: 2,
        secret_channels: 2,
        head_width: 2,
        extractor_width: 2,
        disc_width: 2,
        disc_layers: 2,
        res_blocks: 1,
        reduction: 2,
        ..ArchConfig::default()
    }
}

pub fn tiny_secret(seed: u64, grid: SecretGrid) -> SecretFeature {
    let mut r = rng(seed ^ 0xff);
    let msg = BitMessage::random(grid.capacity() / 2, &mut r).unwrap();
    map_bits(&msg, grid, seed).unwrap()
}

pub fn nn_err(e: stylestego::StegoError) -> NnError {
    NnError::Shape(e.to_string())
}

/// Zero-initialised biases put exact zeros through dead ReLU regions, which
/// lands later activations exactly on their kinks; probe at a generic point.
pub fn jitter_biases<M: Module>(module: &mut M, r: &mut ChaCha8Rng) {
    for p in module.params_mut() {
        if p.name.ends_with("bias") || p.name.ends_with("beta") {
            let shape = p.value.shape().to_vec();
            p.value = Tensor::uniform(&shape, -0.1, 0.1, r);
        }
    }
}

fn worst(seeds: u64, f: impl Fn(u64) -> f64) -> f64 {
    (0..seeds).map(f).fold(0.0, f64::max)
}

pub fn bind_gradient(seeds: u64) -> f64 {
    let grid = SecretGrid::new(2, 3, 2);
    worst(seeds, |seed| {
        let sf = tiny_secret(seed, grid);
        let mut r = rng(seed);
        let f = Tensor::uniform(&grid.shape(), -1.0, 1.0, &mut r);
        let w = projection(&grid.shape(), &mut r);
        check_inputs(&[f], None, |g, v| {
            let m = g.input(sf.matrix.clone());
            let y = bind(g, m, v[0]).map_err(nn_err)?;
            project(g, y, &w)
        })
        .unwrap()
        .max_rel_error
    })
}

pub fn secret_loss_gradient(seeds: u64) -> f64 {
    let grid = SecretGrid::new(2, 2, 4);
    worst(seeds, |seed| {
        let sf = tiny_secret(seed, grid);
        let raw = Tensor::uniform(&grid.shape(), -2.0, 2.0, &mut rng(seed));
        check_inputs(&[raw], None, |g, v| secret_loss(g, v[0], &sf, 0.05).map_err(nn_err)).unwrap().max_rel_error
    })
}

pub fn content_loss_gradient(seeds: u64) -> f64 {
    worst(seeds, |seed| {
        let mut r = rng(seed);
        let a = Tensor::uniform(&[2, 2, 3], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(&[2, 2, 3], -1.0, 1.0, &mut r);
        check_inputs(&[a, b], None, |g, v| content_loss(g, v[0], v[1]).map_err(nn_err)).unwrap().max_rel_error
    })
}

pub fn attention_gradient(seeds: u64) -> f64 {
    worst(seeds, |seed| {
        let mut r = rng(seed);
        let mut att = ChannelAttention::new("att", 4, 2, true, &mut r).unwrap();
        let x = Tensor::uniform(&[3, 3, 4], -1.0, 1.0, &mut r);
        let w = projection(&[3, 3, 4], &mut r);
        let a = check_inputs(&[x.clone()], None, |g, v| {
            let y = att.attend(g, v[0]).map_err(nn_err)?;
            project(g, y, &w)
        })
        .unwrap();
        let b = check_module(&mut att, &[x], None, |m, g, v| {
            let y = m.attend(g, v[0]).map_err(nn_err)?;
            project(g, y, &w)
        })
        .unwrap();
        a.max_rel_error.max(b.max_rel_error)
    })
}

pub fn filter_bank_gradient(seeds: u64) -> f64 {
    worst(seeds, |seed| {
        let mut r = rng(seed);
        let mut bank = FilterBank::srm("bank").unwrap();
        let img = Tensor::uniform(&[4, 5, 3], -1.0, 1.0, &mut r);
        let w = projection(&[4, 5, 32], &mut r);
        let f = |b: &FilterBank, g: &mut Graph, v: &[Var]| {
            let y = b.extract_texture(g, v[0]).map_err(nn_err)?;
            project(g, y, &w)
        };
        let a = check_inputs(&[img.clone()], None, |g, v| f(&bank, g, v)).unwrap();
        let b = check_module(&mut bank, &[img], Some(64), f).unwrap();
        a.max_rel_error.max(b.max_rel_error)
    })
}

/// Discriminator loss as a function of every discriminator parameter.
pub fn discriminator_loss_gradient(seeds: u64) -> f64 {
    worst(seeds, |seed| {
        let mut model = StegoModel::new(tiny_arch(), seed).unwrap();
        let mut r = rng(seed);
        let style = Tensor::uniform(&[8, 8, 3], -1.0, 1.0, &mut r);
        let stego = Tensor::uniform(&[8, 8, 3], -1.0, 1.0, &mut r);
        check_module(&mut model.discriminator, &[style, stego], Some(6), |d, g, v| {
            let real = d.logits(g, v[0]).map_err(nn_err)?;
            let fake = d.logits(g, v[1]).map_err(nn_err)?;
            discriminator_loss(g, &[real], &[fake]).map_err(nn_err)
        })
        .unwrap()
        .max_rel_error
    })
}

pub fn encoder_mean_gradient(seeds: u64) -> f64 {
    worst(seeds, |seed| {
        let model = StegoModel::new(tiny_arch(), seed).unwrap();
        let img = Tensor::uniform(&[32, 32, 3], -1.0, 1.0, &mut rng(seed));
        check_inputs(&[img], Some(48), |g, v| {
            let a = model.encoder.encode(g, v[0]).map_err(nn_err)?;
            Ok(g.mean(a))
        })
        .unwrap()
        .max_rel_error
    })
}

pub const WEIGHTS: LossWeights = LossWeights { lambda: 0.7, mu: 1.3 };

/// The same network with every rectifier replaced by tanh and the
/// preprocessor's leaky slope set to 1. Finite differences across a deep
/// rectifier stack keep crossing kinks; the smooth twin checks the wiring of
/// the whole chain, while the rectifiers themselves are checked per op.
pub fn smooth(model: &mut StegoModel) {
    let blocks = model
        .encoder
        .layers
        .iter_mut()
        .chain(model.decoder.residual.iter_mut().flat_map(|r| [&mut r.first, &mut r.second]))
        .chain(model.decoder.upsample.iter_mut().map(|u| &mut u.block))
        .chain(model.discriminator.layers.iter_mut())
        .chain(model.extractor.trunk.iter_mut());
    for b in blocks {
        if b.act != Activation::None {
            b.act = Activation::Tanh;
        }
    }
    model.preprocessor.slope = 1.0;
}

fn objective(m: &StegoModel, g: &mut Graph, content: Var, sf: &SecretFeature) -> Result<Var, NnError> {
    let fwd = forward_stego(g, &m.preprocessor, &m.encoder, &m.decoder, content, Some(sf)).map_err(nn_err)?;
    let logits = m.discriminator.logits(g, fwd.stego).map_err(nn_err)?;
    let style = generator_adv_loss(g, &[logits]).map_err(nn_err)?;
    let re = m.encoder.encode(g, fwd.stego).map_err(nn_err)?;
    let lc = content_loss(g, fwd.latent, re).map_err(nn_err)?;
    let raw = m.extractor.forward(g, fwd.stego).map_err(nn_err)?;
    let lm = secret_loss(g, raw, sf, 0.0).map_err(nn_err)?;
    total_loss(g, WEIGHTS, style, lc, lm).map_err(nn_err)
}

/// The generator-side objective through preprocessor, encoder, decoder,
/// discriminator and extractor, w.r.t. every parameter and the content image.
pub fn total_objective_gradient(seeds: u64) -> f64 {
    worst(seeds, |seed| {
        let mut model = StegoModel::new(tiny_arch(), seed).unwrap();
        let mut r = rng(seed);
        jitter_biases(&mut model, &mut r);
        let content = Tensor::uniform(&[32, 32, 3], -1.0, 1.0, &mut r);
        let sf = tiny_secret(seed, model.grid(32, 32).unwrap());
        smooth(&mut model);
        let a = check_module(&mut model, &[content.clone()], Some(2), |m, g, v| objective(m, g, v[0], &sf)).unwrap();
        let m = &model;
        let b = check_inputs(&[content], Some(12), |g, v| objective(m, g, v[0], &sf)).unwrap();
        a.max_rel_error.max(b.max_rel_error)
    })
}

pub const OBJECTIVE_CHECKS: [(&str, Check); 8] = [
    ("bind", bind_gradient),
    ("secret loss", secret_loss_gradient),
    ("content loss", content_loss_gradient),
    ("channel attention", attention_gradient),
    ("filter bank", filter_bank_gradient),
    ("discriminator loss", discriminator_loss_gradient),
    ("encoder", encoder_mean_gradient),
    ("total objective", total_objective_gradient),
];
