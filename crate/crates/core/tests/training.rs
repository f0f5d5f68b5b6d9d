use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stylestego::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use stylestego::config::TrainConfig;
use stylestego::data::{save_png, toy_content, toy_style, Dataset};
use stylestego::extractor::secret_loss;
use stylestego::message::{map_bits, BitMessage, SecretFeature};
use stylestego::model::StegoModel;
use stylestego::stylizer::{
    content_loss, discriminator_loss, forward_stego, generator_adv_loss, total_loss, ArchConfig,
};
use stylestego::trainer::{run_training, train_on, train_step, StepOutcome, TrainState, METRICS_HEADER};
use stylestego::StegoError;
use stylestego_nn::{Graph, Module, Tensor};

fn tiny_cfg(iterations: u64) -> TrainConfig {
    TrainConfig {
        crop_size: 32,
        iterations,
        batch: 2,
        msg_len: 8,
        save_every: 1000,
        arch: ArchConfig {
            base_width: 2,
            secret_channels: 2,
            head_width: 2,
            extractor_width: 2,
            disc_width: 2,
            disc_layers: 2,
            res_blocks: 1,
            reduction: 2,
            ..ArchConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn toy_sets(n_content: usize, n_style: usize, crop: usize) -> (Dataset, Dataset) {
    let c = (0..n_content).map(|i| toy_content(i, crop + 8)).collect();
    let s = (0..n_style).map(|i| toy_style(i, crop + 8)).collect();
    (Dataset::from_images(c, crop).unwrap(), Dataset::from_images(s, crop).unwrap())
}

fn param_values(model: &StegoModel) -> Vec<Vec<f64>> {
    model.params().iter().map(|p| p.value.data().to_vec()).collect()
}

struct Batch {
    content: Vec<Tensor>,
    style: Vec<Tensor>,
    messages: Vec<BitMessage>,
    key: u64,
}

fn batch(seed: u64, crop: usize, msg_len: usize) -> Batch {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (c, s) = toy_sets(2, 1, crop);
    Batch {
        content: c.crops(2, crop, &mut r).unwrap(),
        style: s.crops(2, crop, &mut r).unwrap(),
        messages: (0..2).map(|_| BitMessage::random(msg_len, &mut r).unwrap()).collect(),
        key: seed,
    }
}

fn secrets(model: &StegoModel, b: &Batch) -> Vec<SecretFeature> {
    b.content
        .iter()
        .zip(&b.messages)
        .map(|(c, m)| {
            let (h, w, _) = c.hwc().unwrap();
            map_bits(m, model.grid(h, w).unwrap(), b.key).unwrap()
        })
        .collect()
}

fn stegos(model: &StegoModel, b: &Batch) -> Vec<Tensor> {
    secrets(model, b)
        .iter()
        .zip(&b.content)
        .map(|(sf, c)| {
            let mut g = Graph::new();
            let x = g.input(c.clone());
            let f = forward_stego(&mut g, &model.preprocessor, &model.encoder, &model.decoder, x, Some(sf)).unwrap();
            g.value(f.stego).clone()
        })
        .collect()
}

fn d_loss(model: &StegoModel, style: &[Tensor], fakes: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let real: Vec<_> = style.iter().map(|s| {
        let v = g.input(s.clone());
        model.discriminator.logits(&mut g, v).unwrap()
    }).collect();
    let fake: Vec<_> = fakes.iter().map(|s| {
        let v = g.input(s.clone());
        model.discriminator.logits(&mut g, v).unwrap()
    }).collect();
    let l = discriminator_loss(&mut g, &real, &fake).unwrap();
    g.value(l).data()[0]
}

fn g_loss(model: &StegoModel, state: &TrainState, b: &Batch) -> f64 {
    let sfs = secrets(model, b);
    let mut g = Graph::new();
    let (mut logits, mut lcs, mut lms) = (vec![], vec![], vec![]);
    for (c, sf) in b.content.iter().zip(&sfs) {
        let x = g.input(c.clone());
        let f = forward_stego(&mut g, &model.preprocessor, &model.encoder, &model.decoder, x, Some(sf)).unwrap();
        logits.push(model.discriminator.logits(&mut g, f.stego).unwrap());
        let re = model.encoder.encode(&mut g, f.stego).unwrap();
        lcs.push(content_loss(&mut g, f.latent, re).unwrap());
        let raw = model.extractor.forward(&mut g, f.stego).unwrap();
        lms.push(secret_loss(&mut g, raw, sf, state.tolerance).unwrap());
    }
    let style = generator_adv_loss(&mut g, &logits).unwrap();
    let lc = g.add(lcs[0], lcs[1]).unwrap();
    let lc = g.scale(lc, 0.5);
    let lm = g.add(lms[0], lms[1]).unwrap();
    let lm = g.scale(lm, 0.5);
    let t = total_loss(&mut g, state.weights, style, lc, lm).unwrap();
    g.value(t).data()[0]
}

#[test]
fn zero_lr_step_leaves_parameters_unchanged() {
    let mut cfg = tiny_cfg(1);
    cfg.lr = 0.0;
    let mut state = TrainState::new(&cfg).unwrap();
    let before = param_values(&state.model);
    let b = batch(1, 32, 8);
    let outcome = train_step(&mut state, &b.content, &b.style, &b.messages, b.key).unwrap();
    let StepOutcome::Updated(m) = outcome else { panic!("step skipped") };
    assert!(m.is_finite());
    assert!((0.0..=1.0).contains(&m.bit_acc));
    assert_eq!(param_values(&state.model), before);
    assert_eq!(state.step, 1);
}

/// Each player's own loss drops after its update, the other player held at
/// its post-update value (the generator answers the updated discriminator).
#[test]
fn alternating_step_decreases_each_players_loss() {
    let (mut d_ok, mut g_ok) = (0, 0);
    for seed in 0..10 {
        let mut cfg = tiny_cfg(1);
        cfg.lr = 1e-5;
        cfg.seed = seed;
        let mut state = TrainState::new(&cfg).unwrap();
        let before = state.model.clone();
        let b = batch(100 + seed, 32, 8);
        let fakes = stegos(&before, &b);
        let d_before = d_loss(&before, &b.style, &fakes);
        train_step(&mut state, &b.content, &b.style, &b.messages, b.key).unwrap();
        if d_loss(&state.model, &b.style, &fakes) < d_before {
            d_ok += 1;
        }
        let mut stale = before.clone();
        stale.discriminator = state.model.discriminator.clone();
        if g_loss(&state.model, &state, &b) < g_loss(&stale, &state, &b) {
            g_ok += 1;
        }
    }
    assert!(d_ok >= 8, "discriminator improved on {d_ok}/10 seeds");
    assert!(g_ok >= 8, "generator improved on {g_ok}/10 seeds");
}

#[test]
fn same_seed_runs_are_identical() {
    let cfg = tiny_cfg(4);
    let (c, s) = toy_sets(3, 2, 32);
    let a = train_on(&cfg, &c, &s, None).unwrap();
    let b = train_on(&cfg, &c, &s, None).unwrap();
    assert_eq!(a.metrics, b.metrics);
    let bytes = |r: &stylestego::trainer::TrainRun| Checkpoint::from_state(&r.state, &cfg).to_bytes().unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    let mut other = cfg.clone();
    other.seed = 1;
    let o = train_on(&other, &c, &s, None).unwrap();
    assert_ne!(o.metrics, a.metrics);
}

#[test]
fn one_iteration_writes_one_row_and_one_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (c, s) = toy_sets(2, 1, 32);
    let run = train_on(&tiny_cfg(1), &c, &s, Some(dir.path())).unwrap();
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("0,"));
    assert_eq!(run.checkpoints, vec![dir.path().join("final.ckpt")]);
    assert_eq!(run.metrics.len(), 1);
}

#[test]
fn checkpoints_track_training_progress() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_cfg(4);
    cfg.save_every = 2;
    cfg.lr = 1e-3;
    let (c, s) = toy_sets(2, 1, 32);
    let run = train_on(&cfg, &c, &s, Some(dir.path())).unwrap();
    let names: Vec<_> = run.checkpoints.iter().map(|p| p.file_name().unwrap().to_str().unwrap().to_owned()).collect();
    assert_eq!(names, ["step_2.ckpt", "step_4.ckpt", "final.ckpt"]);
    let early = load_checkpoint(&run.checkpoints[0]).unwrap();
    let late = load_checkpoint(&run.checkpoints[1]).unwrap();
    assert_eq!((early.step, late.step), (2, 4));
    assert_ne!(param_values(&early.model), param_values(&late.model));
    assert_eq!(fs::read(&run.checkpoints[1]).unwrap(), fs::read(&run.checkpoints[2]).unwrap());
}

#[test]
fn secret_loss_falls_on_a_small_overfit_run() {
    let mut cfg = tiny_cfg(500);
    cfg.batch = 1;
    cfg.overfit = true;
    cfg.lr = 1e-3;
    cfg.lambda = 0.1;
    cfg.mu = 10.0;
    let (c, s) = toy_sets(2, 1, 32);
    let run = train_on(&cfg, &c, &s, None).unwrap();
    assert!(run.metrics.iter().all(|m| m.is_finite() && (0.0..=1.0).contains(&m.bit_acc)));
    let first = run.metrics[0].l_m;
    let last = run.metrics.last().unwrap().l_m;
    assert!(last < first, "l_m {first} -> {last}");
}

#[test]
fn runaway_learning_rate_aborts_after_consecutive_skips() {
    let mut cfg = tiny_cfg(40);
    cfg.lr = 1e300;
    let (c, s) = toy_sets(2, 1, 32);
    match train_on(&cfg, &c, &s, None) {
        Err(StegoError::Training(msg)) => assert!(msg.contains("consecutive"), "{msg}"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training with lr 1e300 finished"),
    }
}

#[test]
fn datasets_from_disk() {
    let root = tempfile::tempdir().unwrap();
    let (content, style) = (root.path().join("content"), root.path().join("style"));
    fs::create_dir_all(&content).unwrap();
    fs::create_dir_all(&style).unwrap();
    save_png(&content.join("a.png"), &toy_content(0, 40)).unwrap();
    fs::write(content.join("broken.png"), b"not an image").unwrap();
    save_png(&content.join("small.png"), &toy_content(1, 16)).unwrap();
    let ds = Dataset::load(&content, 32).unwrap();
    assert_eq!(ds.len(), 1);
    let mut r = ChaCha8Rng::seed_from_u64(0);
    assert!(ds.crops(5, 32, &mut r).unwrap().iter().all(|t| t.shape() == [32, 32, 3]));

    let mut cfg = tiny_cfg(1);
    cfg.content_dir = content.clone();
    cfg.style_dir = style.clone();
    assert!(matches!(run_training(&cfg, None), Err(StegoError::Dataset(_))));
    save_png(&style.join("s.png"), &toy_style(0, 32)).unwrap();
    assert_eq!(run_training(&cfg, None).unwrap().metrics.len(), 1);
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg(2);
    let (c, s) = toy_sets(2, 1, 32);
    let run = train_on(&cfg, &c, &s, None).unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&Checkpoint::from_state(&run.state, &cfg), &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let probe = toy_content(7, 32);
    let msg = BitMessage::random(8, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let a = run.state.model.embed(&probe, &msg, 5).unwrap();
    let b = loaded.model.embed(&probe, &msg, 5).unwrap();
    assert_eq!(a.data(), b.data());
    assert_eq!(
        run.state.model.extract(&a, 5, 8).unwrap(),
        loaded.model.extract(&b, 5, 8).unwrap()
    );
    let again = dir.path().join("again.ckpt");
    save_checkpoint(&loaded, &again).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());

    let bytes = fs::read(&path).unwrap();
    let truncated = dir.path().join("cut.ckpt");
    fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&truncated), Err(StegoError::Integrity(_))));
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    let bad = dir.path().join("flip.ckpt");
    fs::write(&bad, flipped).unwrap();
    assert!(matches!(load_checkpoint(&bad), Err(StegoError::Integrity(_))));
    assert!(matches!(load_checkpoint(&dir.path().join("missing.ckpt")), Err(StegoError::Io(_))));
}
