//! Small from-scratch CNN that tells covers from stegos.
//!
//! A high-pass bank initialised from the SRM table, two unpooled conv layers,
//! then four conv + average-pool blocks, global pooling and a linear logit.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stylestego_nn::{Activation, Adam, ConvBlock, Graph, Linear, Module, Parameter, Tensor, Var};

use crate::error::{Result, StegoError};
use crate::filter_bank::{FilterBank, BANK_SIZE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub width: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { width: 8, epochs: 8, lr: 1e-3, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub bank: FilterBank,
    pub front: Vec<ConvBlock>,
    pub blocks: Vec<ConvBlock>,
    pub classifier: Linear,
}

impl Detector {
    pub fn new(cfg: &DetectorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let w = cfg.width;
        let relu = Activation::Relu;
        let front = vec![
            ConvBlock::new("det.front.0", BANK_SIZE, w, 3, 1, false, relu, &mut rng),
            ConvBlock::new("det.front.1", w, w, 3, 1, false, relu, &mut rng),
        ];
        let widths = [w, w, 2 * w, 2 * w, 4 * w];
        let blocks = widths
            .windows(2)
            .enumerate()
            .map(|(i, c)| ConvBlock::new(&format!("det.block.{i}"), c[0], c[1], 3, 1, false, relu, &mut rng))
            .collect();
        let classifier = Linear::new("det.fc", 4 * w, 1, &mut rng);
        let bank = FilterBank::srm("det.bank").expect("the SRM table is well formed");
        Self { bank, front, blocks, classifier }
    }

    fn logit(&self, g: &mut Graph, img: Var) -> Result<Var> {
        let mut x = self.bank.extract_texture(g, img)?;
        for b in &self.front {
            x = b.forward(g, x)?;
        }
        for b in &self.blocks {
            x = b.forward(g, x)?;
            x = g.avg_pool(x, 2)?;
        }
        let pooled = g.global_avg_pool(x)?;
        Ok(self.classifier.forward(g, pooled)?)
    }

    /// Probability-free score: positive means "stego".
    pub fn score(&self, img: &Tensor) -> Result<f64> {
        let (h, w, _) = img.hwc()?;
        if h % 16 != 0 || w % 16 != 0 {
            return Err(StegoError::Shape(format!("detector input {h}x{w} must be a multiple of 16")));
        }
        let mut g = Graph::new();
        g.set_params_frozen(true);
        let x = g.input(img.clone());
        let z = self.logit(&mut g, x)?;
        Ok(g.value(z).data()[0])
    }

    /// Trains on labelled images (`true` = stego) with per-sample Adam steps.
    pub fn train(&mut self, covers: &[Tensor], stegos: &[Tensor], cfg: &DetectorConfig) -> Result<()> {
        if covers.is_empty() || stegos.is_empty() {
            return Err(StegoError::Evaluation("detector training needs both classes".into()));
        }
        let adam = Adam { lr: cfg.lr, beta1: 0.9, ..Adam::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xde7e_c7);
        let mut order: Vec<(bool, usize)> =
            (0..covers.len()).map(|i| (false, i)).chain((0..stegos.len()).map(|i| (true, i))).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for &(label, i) in &order {
                let img = if label { &stegos[i] } else { &covers[i] };
                let mut g = Graph::new();
                let x = g.input(img.clone());
                let z = self.logit(&mut g, x)?;
                let loss = g.bce_with_logits(z, if label { 1.0 } else { 0.0 });
                let grads = g.backward(loss)?;
                adam.step(&mut self.params_mut(), &grads)?;
            }
        }
        Ok(())
    }

    /// Balanced accuracy: mean of the per-class hit rates.
    pub fn balanced_accuracy(&self, covers: &[Tensor], stegos: &[Tensor]) -> Result<f64> {
        if covers.is_empty() || stegos.is_empty() {
            return Err(StegoError::Evaluation("detector testing needs both classes".into()));
        }
        let rate = |set: &[Tensor], stego: bool| -> Result<f64> {
            let hits = set
                .iter()
                .map(|t| self.score(t).map(|s| (s > 0.0) == stego))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .filter(|&h| h)
                .count();
            Ok(hits as f64 / set.len() as f64)
        };
        Ok((rate(covers, false)? + rate(stegos, true)?) / 2.0)
    }
}

impl Module for Detector {
    fn params(&self) -> Vec<&Parameter> {
        let mut p = self.bank.params();
        p.extend(self.front.params());
        p.extend(self.blocks.params());
        p.extend(self.classifier.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.bank.params_mut();
        p.extend(self.front.params_mut());
        p.extend(self.blocks.params_mut());
        p.extend(self.classifier.params_mut());
        p
    }
}

/// Trains a fresh detector and reports its balanced accuracy on the test split.
pub fn detection_accuracy(
    train: (&[Tensor], &[Tensor]),
    test: (&[Tensor], &[Tensor]),
    cfg: &DetectorConfig,
) -> Result<f64> {
    let mut det = Detector::new(cfg);
    det.train(train.0, train.1, cfg)?;
    det.balanced_accuracy(test.0, test.1)
}
