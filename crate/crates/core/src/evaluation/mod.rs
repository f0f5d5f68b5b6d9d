//! Reliability, quality and security measurements at desk scale.

pub mod detector;
pub mod ssim;

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stylestego_nn::Tensor;

use crate::config::TrainConfig;
use crate::data::{quantize_tensor, Dataset};
use crate::error::{Result, StegoError};
use crate::message::BitMessage;
use crate::model::StegoModel;
use crate::trainer::train_on;

pub use detector::{detection_accuracy, Detector, DetectorConfig};
pub use ssim::ssim;

/// Minimum cover/stego pairs per class for a scenario run.
pub const DEFAULT_MIN_PAIRS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub trials: usize,
}

/// Bit accuracy of an arbitrary channel over `trials` fresh random messages.
pub fn channel_accuracy<R: Rng>(
    trials: usize,
    msg_len: usize,
    rng: &mut R,
    mut channel: impl FnMut(usize, &BitMessage) -> Result<BitMessage>,
) -> Result<AccuracyReport> {
    if trials == 0 {
        return Err(StegoError::Evaluation("bit accuracy needs at least one trial".into()));
    }
    let mut correct = 0;
    let mut total = 0;
    for t in 0..trials {
        let msg = BitMessage::random(msg_len, rng)?;
        let got = channel(t, &msg)?;
        if got.len() != msg.len() {
            return Err(StegoError::Evaluation(format!("channel returned {} of {} bits", got.len(), msg.len())));
        }
        correct += msg.bits().iter().zip(got.bits()).filter(|(a, b)| a == b).count();
        total += msg.len();
    }
    Ok(AccuracyReport { accuracy: correct as f64 / total as f64, correct, total, trials })
}

/// Embeds and extracts `trials` fresh messages, cycling through `contents`.
/// With `quantized`, stegos pass through the 8-bit PNG grid first.
pub fn bit_accuracy(
    model: &StegoModel,
    contents: &[Tensor],
    msg_len: usize,
    key: u64,
    trials: usize,
    seed: u64,
    quantized: bool,
) -> Result<AccuracyReport> {
    if contents.is_empty() {
        return Err(StegoError::Evaluation("bit accuracy needs content images".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    channel_accuracy(trials, msg_len, &mut rng, |t, msg| {
        let stego = model.embed(&contents[t % contents.len()], msg, key)?;
        let stego = if quantized { quantize_tensor(&stego) } else { stego };
        model.extract(&stego, key, msg_len)
    })
}

/// Mean SSIM between stego and cover renderings of the same content.
pub fn stego_cover_ssim(model: &StegoModel, contents: &[Tensor], msg_len: usize, key: u64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for c in contents {
        let msg = BitMessage::random(msg_len, &mut rng)?;
        total += ssim(&model.embed(c, &msg, key)?, &model.cover(c)?)?;
    }
    Ok(total / contents.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Ignorant,
    Knowledgeable,
    Omniscient,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 3] = [ScenarioKind::Ignorant, ScenarioKind::Knowledgeable, ScenarioKind::Omniscient];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ignorant" => Ok(Self::Ignorant),
            "knowledgeable" => Ok(Self::Knowledgeable),
            "omniscient" => Ok(Self::Omniscient),
            _ => Err(StegoError::Config(format!("unknown scenario `{s}` (ignorant, knowledgeable, omniscient)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Ignorant => "ignorant",
            Self::Knowledgeable => "knowledgeable",
            Self::Omniscient => "omniscient",
        }
    }
}

/// Which checkpoints (indices into a step-ordered list) the detector trains
/// and is tested on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl ScenarioSpec {
    /// Standard split over `n` checkpoints, testing on the last one:
    /// ignorant trains on its predecessor, knowledgeable on up to three
    /// predecessors, omniscient on the test checkpoint itself.
    pub fn standard(kind: ScenarioKind, n: usize) -> Result<Self> {
        if n < 2 && kind != ScenarioKind::Omniscient {
            return Err(StegoError::Evaluation(format!("the {} scenario needs at least 2 checkpoints, got {n}", kind.name())));
        }
        if n == 0 {
            return Err(StegoError::Evaluation("no checkpoints given".into()));
        }
        let last = n - 1;
        let train = match kind {
            ScenarioKind::Ignorant => vec![last - 1],
            ScenarioKind::Knowledgeable => (last.saturating_sub(3)..last).collect(),
            ScenarioKind::Omniscient => vec![last],
        };
        let spec = Self { kind, train, test: vec![last] };
        spec.validate(n)?;
        Ok(spec)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |m: String| Err(StegoError::Evaluation(m));
        if self.train.is_empty() || self.test.is_empty() {
            return bad("scenario needs train and test checkpoints".into());
        }
        if let Some(&i) = self.train.iter().chain(&self.test).find(|&&i| i >= n) {
            return bad(format!("checkpoint index {i} out of range for {n} checkpoints"));
        }
        let disjoint = self.train.iter().all(|i| !self.test.contains(i));
        match self.kind {
            ScenarioKind::Ignorant if self.train.len() != 1 || self.test.len() != 1 || !disjoint => {
                bad("ignorant: one training and one different test checkpoint".into())
            }
            ScenarioKind::Knowledgeable if self.train.len() < 2 || !disjoint => {
                bad("knowledgeable: several training checkpoints, test checkpoint held out".into())
            }
            ScenarioKind::Omniscient if self.train != self.test => {
                bad("omniscient: training and test checkpoints must be identical".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairConfig {
    /// Pairs per class on each side (train and test).
    pub pairs: usize,
    pub min_pairs: usize,
    pub crop: usize,
    pub msg_len: usize,
    pub key: u64,
    pub seed: u64,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self { pairs: DEFAULT_MIN_PAIRS, min_pairs: DEFAULT_MIN_PAIRS, crop: 64, msg_len: 64, key: 0, seed: 0 }
    }
}

/// `n` (cover, stego) pairs from `model` on random crops, both quantized as
/// they would be when written to disk.
pub fn generate_pairs<R: Rng>(
    model: &StegoModel,
    content: &Dataset,
    n: usize,
    cfg: &PairConfig,
    rng: &mut R,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let mut covers = Vec::with_capacity(n);
    let mut stegos = Vec::with_capacity(n);
    for crop in content.crops(n, cfg.crop, rng)? {
        let msg = BitMessage::random(cfg.msg_len, rng)?;
        covers.push(quantize_tensor(&model.cover(&crop)?));
        stegos.push(quantize_tensor(&model.embed(&crop, &msg, cfg.key)?));
    }
    Ok((covers, stegos))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub kind: ScenarioKind,
    pub accuracy: f64,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub train_checkpoints: Vec<usize>,
    pub test_checkpoints: Vec<usize>,
}

/// Trains a detector on pairs from the scenario's training checkpoints and
/// tests it on fresh pairs from its test checkpoints.
pub fn run_scenario(
    spec: &ScenarioSpec,
    models: &[StegoModel],
    content: &Dataset,
    pairs: &PairConfig,
    detector: &DetectorConfig,
) -> Result<ScenarioResult> {
    spec.validate(models.len())?;
    if pairs.pairs < pairs.min_pairs {
        return Err(StegoError::Evaluation(format!(
            "{} pairs per class requested, at least {} required",
            pairs.pairs, pairs.min_pairs
        )));
    }
    let split = |ids: &[usize], stream: u64| -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(pairs.seed ^ stream);
        let (mut c, mut s) = (Vec::new(), Vec::new());
        for (k, &i) in ids.iter().enumerate() {
            let share = pairs.pairs / ids.len() + usize::from(k < pairs.pairs % ids.len());
            let (mut ck, mut sk) = generate_pairs(&models[i], content, share, pairs, &mut rng)?;
            c.append(&mut ck);
            s.append(&mut sk);
        }
        Ok((c, s))
    };
    let (train_c, train_s) = split(&spec.train, 0x7a1a)?;
    let (test_c, test_s) = split(&spec.test, 0x7e57)?;
    let accuracy = detection_accuracy((&train_c, &train_s), (&test_c, &test_s), detector)?;
    Ok(ScenarioResult {
        kind: spec.kind,
        accuracy,
        train_pairs: train_c.len(),
        test_pairs: test_c.len(),
        train_checkpoints: spec.train.clone(),
        test_checkpoints: spec.test.clone(),
    })
}

/// Mean absolute pixel difference between stegos of the same probe rendered
/// by each pair of models, averaged over pairs.
pub fn checkpoint_divergence(models: &[&StegoModel], probe: &Tensor, msg: &BitMessage, key: u64) -> Result<f64> {
    if models.len() < 2 {
        return Err(StegoError::Evaluation("divergence needs at least two checkpoints".into()));
    }
    let stegos = models.iter().map(|m| m.embed(probe, msg, key)).collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut n = 0usize;
    for i in 0..stegos.len() {
        for j in i + 1..stegos.len() {
            let d: f64 = stegos[i].data().iter().zip(stegos[j].data()).map(|(a, b)| (a - b).abs()).sum();
            total += d / stegos[i].numel() as f64;
            n += 1;
        }
    }
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub attention: bool,
    pub srm_init: bool,
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

/// The three extractor variants: attention only (random first layer),
/// filters only (gates fixed at 0.5), and both.
pub fn ablation_configs(base: &TrainConfig) -> [(String, TrainConfig); 3] {
    let variant = |name: &str, attention: bool, srm_init: bool| {
        let mut cfg = base.clone();
        cfg.arch.attention = attention;
        cfg.arch.srm_init = srm_init;
        (name.to_string(), cfg)
    };
    [variant("attention-only", true, false), variant("filters-only", false, true), variant("both", true, true)]
}

/// Trains each variant for every seed via `train` and measures held-out bit
/// accuracy with `trials` embeddings.
pub fn ablation_suite(
    base: &TrainConfig,
    seeds: &[u64],
    held_out: &[Tensor],
    trials: usize,
    mut train: impl FnMut(&TrainConfig) -> Result<StegoModel>,
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(StegoError::Evaluation("ablation needs at least one seed".into()));
    }
    ablation_configs(base)
        .into_iter()
        .map(|(name, cfg)| {
            let per_seed = seeds
                .iter()
                .map(|&seed| {
                    let cfg = TrainConfig { seed, ..cfg.clone() };
                    let model = train(&cfg)?;
                    Ok(bit_accuracy(&model, held_out, cfg.msg_len, cfg.key, trials, seed ^ 0xab1a, false)?.accuracy)
                })
                .collect::<Result<Vec<f64>>>()?;
            let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
            Ok(AblationRow { name, attention: cfg.arch.attention, srm_init: cfg.arch.srm_init, per_seed, mean })
        })
        .collect()
}

/// [`ablation_suite`] training each run on the given datasets.
pub fn ablation_suite_on(
    base: &TrainConfig,
    seeds: &[u64],
    content: &Dataset,
    style: &Dataset,
    held_out: &[Tensor],
    trials: usize,
) -> Result<Vec<AblationRow>> {
    ablation_suite(base, seeds, held_out, trials, |cfg| Ok(train_on(cfg, content, style, None)?.state.model))
}

/// Published full-scale figures, kept for side-by-side reporting only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaperReference {
    pub ablation_attention_only: f64,
    pub ablation_filters_only: f64,
    pub ablation_both: f64,
    pub bit_accuracy_1000_bits: f64,
    pub ssim: f64,
    pub detector_ignorant: f64,
    pub detector_knowledgeable: f64,
    pub detector_omniscient: f64,
}

impl Default for PaperReference {
    fn default() -> Self {
        Self {
            ablation_attention_only: 0.96,
            ablation_filters_only: 0.98,
            ablation_both: 0.99,
            bit_accuracy_1000_bits: 0.99,
            ssim: 0.93,
            detector_ignorant: 0.55,
            detector_knowledgeable: 0.60,
            detector_omniscient: 0.71,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bit_accuracy: Option<AccuracyReport>,
    pub ssim_mean: Option<f64>,
    pub ssim_samples: usize,
    pub scenarios: Vec<ScenarioResult>,
    pub ablation: Vec<AblationRow>,
    pub divergence: Option<f64>,
    pub config: Option<TrainConfig>,
    pub reference: PaperReference,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Human-readable summary with reference values alongside.
    pub fn table(&self) -> String {
        let r = &self.reference;
        let mut out = String::new();
        let _ = writeln!(out, "{:<28} {:>10} {:>10} {:>10}", "metric", "value", "samples", "reference");
        if let Some(a) = &self.bit_accuracy {
            let _ = writeln!(out, "{:<28} {:>10.4} {:>10} {:>10.2}", "bit accuracy", a.accuracy, a.total, r.bit_accuracy_1000_bits);
        }
        if let Some(s) = self.ssim_mean {
            let _ = writeln!(out, "{:<28} {:>10.4} {:>10} {:>10.2}", "ssim stego/cover", s, self.ssim_samples, r.ssim);
        }
        for s in &self.scenarios {
            let reference = match s.kind {
                ScenarioKind::Ignorant => r.detector_ignorant,
                ScenarioKind::Knowledgeable => r.detector_knowledgeable,
                ScenarioKind::Omniscient => r.detector_omniscient,
            };
            let _ = writeln!(
                out,
                "{:<28} {:>10.4} {:>10} {:>10.2}",
                format!("detector {}", s.kind.name()),
                s.accuracy,
                s.test_pairs * 2,
                reference
            );
        }
        for row in &self.ablation {
            let reference = match (row.attention, row.srm_init) {
                (true, false) => r.ablation_attention_only,
                (false, true) => r.ablation_filters_only,
                _ => r.ablation_both,
            };
            let _ = writeln!(
                out,
                "{:<28} {:>10.4} {:>10} {:>10.2}",
                format!("ablation {}", row.name),
                row.mean,
                row.per_seed.len(),
                reference
            );
        }
        if let Some(d) = self.divergence {
            let _ = writeln!(out, "{:<28} {:>10.6} {:>10} {:>10}", "checkpoint divergence", d, "", "-");
        }
        out
    }
}
