//! Alternating adversarial training: a discriminator update followed by one
//! joint update of the preprocessor, encoder, decoder and extractor.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stylestego_nn::{Adam, Graph, Tensor, Var};

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{Result, StegoError};
use crate::extractor::secret_loss;
use crate::message::{decide_bits, map_bits, BitMessage};
use crate::model::StegoModel;
use crate::stylizer::{content_loss, discriminator_loss, forward_stego, generator_adv_loss, total_loss, LossWeights};

/// Consecutive non-finite steps tolerated before training aborts.
pub const MAX_CONSECUTIVE_SKIPS: usize = 10;

pub const METRICS_HEADER: &str = "step,loss_d,loss_g_style,l_c,l_m,bit_acc";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_d: f64,
    pub loss_g_style: f64,
    pub l_c: f64,
    pub l_m: f64,
    pub bit_acc: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.6}",
            self.step, self.loss_d, self.loss_g_style, self.l_c, self.l_m, self.bit_acc
        )
    }

    pub fn is_finite(&self) -> bool {
        [self.loss_d, self.loss_g_style, self.l_c, self.l_m, self.bit_acc].iter().all(|v| v.is_finite())
    }
}

/// Outcome of one iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutcome {
    Updated(StepMetrics),
    /// A loss or gradient was non-finite; the named phase was not applied.
    Skipped(&'static str),
}

/// Model plus optimizer settings and the number of completed steps.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: StegoModel,
    pub adam: Adam,
    pub weights: LossWeights,
    pub tolerance: f64,
    pub step: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            model: StegoModel::new(cfg.arch.clone(), cfg.seed)?,
            adam: Adam::new(cfg.lr),
            weights: LossWeights { lambda: cfg.lambda, mu: cfg.mu },
            tolerance: cfg.tolerance,
            step: 0,
        })
    }
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).data()[0]
}

fn mean_of(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(g.scale(acc, 1.0 / vars.len() as f64))
}

/// One discriminator update, then one generator-side update.
pub fn train_step(
    state: &mut TrainState,
    content: &[Tensor],
    style: &[Tensor],
    messages: &[BitMessage],
    key: u64,
) -> Result<StepOutcome> {
    if content.is_empty() || style.is_empty() || content.len() != messages.len() {
        return Err(StegoError::Training(format!(
            "batch needs content, style and one message per content image (got {}, {}, {})",
            content.len(),
            style.len(),
            messages.len()
        )));
    }
    let model = &state.model;
    let mut g = Graph::new();

    let mut fwd = Vec::with_capacity(content.len());
    let mut secrets = Vec::with_capacity(content.len());
    for (img, msg) in content.iter().zip(messages) {
        let (h, w, _) = img.hwc()?;
        let sf = map_bits(msg, model.grid(h, w)?, key)?;
        let x = g.input(img.clone());
        fwd.push(forward_stego(&mut g, &model.preprocessor, &model.encoder, &model.decoder, x, Some(&sf))?);
        secrets.push(sf);
    }

    // Discriminator phase: stego images enter as constants.
    let style_vars: Vec<Var> = style.iter().map(|s| g.input(s.clone())).collect();
    let style_logits = style_vars
        .iter()
        .map(|&s| model.discriminator.logits(&mut g, s))
        .collect::<Result<Vec<_>>>()?;
    let detached: Vec<Var> = fwd.iter().map(|f| g.detach(f.stego)).collect();
    let fake_logits = detached
        .iter()
        .map(|&s| model.discriminator.logits(&mut g, s))
        .collect::<Result<Vec<_>>>()?;
    let loss_d = discriminator_loss(&mut g, &style_logits, &fake_logits)?;
    let loss_d_value = scalar(&g, loss_d);
    if !loss_d_value.is_finite() {
        return Ok(StepOutcome::Skipped("discriminator"));
    }
    let grads_d = g.backward(loss_d)?;
    if state.adam.step(&mut state.model.discriminator_params_mut(), &grads_d).is_err() {
        return Ok(StepOutcome::Skipped("discriminator"));
    }
    drop(grads_d);

    // Generator phase against the freshly updated discriminator.
    let model = &state.model;
    g.set_params_frozen(true);
    let stego_logits = fwd
        .iter()
        .map(|f| model.discriminator.logits(&mut g, f.stego))
        .collect::<Result<Vec<_>>>()?;
    g.set_params_frozen(false);
    let style_g = generator_adv_loss(&mut g, &stego_logits)?;

    let mut contents = Vec::with_capacity(fwd.len());
    let mut secret_terms = Vec::with_capacity(fwd.len());
    let mut correct = 0usize;
    let mut total_bits = 0usize;
    for ((f, sf), msg) in fwd.iter().zip(&secrets).zip(messages) {
        let re = model.encoder.encode(&mut g, f.stego)?;
        contents.push(content_loss(&mut g, f.latent, re)?);
        let raw = model.extractor.forward(&mut g, f.stego)?;
        secret_terms.push(secret_loss(&mut g, raw, sf, state.tolerance)?);
        let got = decide_bits(g.value(raw), sf.grid, key, msg.len())?;
        correct += msg.bits().iter().zip(got.bits()).filter(|(a, b)| a == b).count();
        total_bits += msg.len();
    }
    let l_c = mean_of(&mut g, &contents)?;
    let l_m = mean_of(&mut g, &secret_terms)?;
    let total = total_loss(&mut g, state.weights, style_g, l_c, l_m)?;

    let metrics = StepMetrics {
        step: state.step,
        loss_d: loss_d_value,
        loss_g_style: scalar(&g, style_g),
        l_c: scalar(&g, l_c),
        l_m: scalar(&g, l_m),
        bit_acc: correct as f64 / total_bits as f64,
    };
    if !scalar(&g, total).is_finite() {
        return Ok(StepOutcome::Skipped("generator"));
    }
    let grads = g.backward(total)?;
    drop(g);
    if state.adam.step(&mut state.model.generator_params_mut(), &grads).is_err() {
        return Ok(StepOutcome::Skipped("generator"));
    }
    state.step += 1;
    Ok(StepOutcome::Updated(metrics))
}

/// Final state and the per-step metric trace of a run.
pub struct TrainRun {
    pub state: TrainState,
    pub metrics: Vec<StepMetrics>,
    /// Checkpoints written, in step order.
    pub checkpoints: Vec<PathBuf>,
}

/// Trains from `cfg`. With an output directory, writes `metrics.csv`,
/// `step_<n>.ckpt` every `save_every` steps and `final.ckpt`.
pub fn run_training(cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainRun> {
    cfg.validate()?;
    let content = Dataset::load(&cfg.content_dir, cfg.crop_size)?;
    let style = Dataset::load(&cfg.style_dir, cfg.crop_size)?;
    train_on(cfg, &content, &style, out_dir)
}

/// [`run_training`] over already loaded datasets.
pub fn train_on(cfg: &TrainConfig, content: &Dataset, style: &Dataset, out_dir: Option<&Path>) -> Result<TrainRun> {
    cfg.validate()?;
    let mut state = TrainState::new(cfg)?;
    // Separate streams so data order does not depend on the architecture.
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let mut msg_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_b175);
    let pinned = BitMessage::random(cfg.msg_len, &mut msg_rng)?;

    let mut writer = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut w = BufWriter::new(File::create(dir.join("metrics.csv"))?);
            writeln!(w, "{METRICS_HEADER}")?;
            Some(w)
        }
        None => None,
    };
    let mut metrics = Vec::with_capacity(cfg.iterations as usize);
    let mut checkpoints = Vec::new();
    let mut skips = 0usize;

    for it in 0..cfg.iterations {
        let c = content.crops(cfg.batch, cfg.crop_size, &mut data_rng)?;
        let s = style.crops(cfg.batch, cfg.crop_size, &mut data_rng)?;
        let msgs = (0..cfg.batch)
            .map(|_| if cfg.overfit { Ok(pinned.clone()) } else { BitMessage::random(cfg.msg_len, &mut msg_rng) })
            .collect::<Result<Vec<_>>>()?;
        match train_step(&mut state, &c, &s, &msgs, cfg.key)? {
            StepOutcome::Updated(m) => {
                skips = 0;
                if let Some(w) = writer.as_mut() {
                    writeln!(w, "{}", m.csv_row())?;
                }
                metrics.push(m);
            }
            StepOutcome::Skipped(phase) => {
                skips += 1;
                warn!("iteration {it}: non-finite {phase} loss, step skipped");
                if skips >= MAX_CONSECUTIVE_SKIPS {
                    return Err(StegoError::Training(format!(
                        "{skips} consecutive non-finite steps at iteration {it} (last in the {phase} phase); \
                         try a lower lr"
                    )));
                }
            }
        }
        if it % 100 == 99 {
            if let Some(m) = metrics.last() {
                info!(
                    "step {} loss_d {:.4} style {:.4} l_c {:.4} l_m {:.4} bit_acc {:.3}",
                    m.step, m.loss_d, m.loss_g_style, m.l_c, m.l_m, m.bit_acc
                );
            }
        }
        if let Some(dir) = out_dir {
            if (it + 1) % cfg.save_every == 0 {
                let path = dir.join(format!("step_{}.ckpt", it + 1));
                save_checkpoint(&Checkpoint::from_state(&state, cfg), &path)?;
                checkpoints.push(path);
            }
        }
    }
    if let Some(mut w) = writer {
        w.flush()?;
    }
    if let Some(dir) = out_dir {
        let path = dir.join("final.ckpt");
        save_checkpoint(&Checkpoint::from_state(&state, cfg), &path)?;
        checkpoints.push(path);
    }
    Ok(TrainRun { state, metrics, checkpoints })
}
