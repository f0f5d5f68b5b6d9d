use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stylestego::extractor::ChannelAttention;
use stylestego::filter_bank::{FilterBank, BANK_SIZE};
use stylestego::message::{bind, decide_bits, map_bits, BitMessage, SecretGrid};
use stylestego_nn::{Graph, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn bank_response(bank: &FilterBank, img: Tensor) -> Tensor {
    let mut g = Graph::new();
    let x = g.input(img);
    let y = bank.extract_texture(&mut g, x).unwrap();
    g.value(y).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn codec_round_trip(h in 1usize..5, w in 1usize..5, c in 1usize..9, frac in 0.0f64..=1.0, key: u64, seed: u64) {
        let grid = SecretGrid::new(h, w, c);
        let len = 1 + ((grid.capacity() - 1) as f64 * frac).round() as usize;
        let msg = BitMessage::random(len, &mut rng(seed)).unwrap();
        let sf = map_bits(&msg, grid, key).unwrap();
        prop_assert_eq!(sf.matrix.data().iter().filter(|v| **v != 0.0).count(), len);
        prop_assert_eq!(decide_bits(&sf.matrix, grid, key, len).unwrap(), msg);
    }

    #[test]
    fn bind_is_exact_for_zero_and_unit_masks(h in 1usize..5, w in 1usize..5, c in 1usize..5, seed: u64) {
        let f = Tensor::uniform(&[h, w, c], -4.0, 4.0, &mut rng(seed));
        let mut g = Graph::new();
        let fv = g.input(f.clone());
        let zero = g.input(Tensor::zeros(&[h, w, c]));
        let one = g.input(Tensor::full(&[h, w, c], 1.0));
        let masked = bind(&mut g, zero, fv).unwrap();
        let passed = bind(&mut g, one, fv).unwrap();
        prop_assert!(g.value(masked).data().iter().all(|&v| v == 0.0));
        prop_assert_eq!(g.value(passed).data(), f.data());
    }

    #[test]
    fn constant_images_vanish_under_the_bank(h in 5usize..14, w in 5usize..14, r in -1.0f64..=1.0, gr in -1.0f64..=1.0, b in -1.0f64..=1.0) {
        let bank = FilterBank::srm("bank").unwrap();
        let mut img = Tensor::zeros(&[h, w, 3]);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = [r, gr, b][i % 3];
        }
        let out = bank_response(&bank, img);
        prop_assert_eq!(out.shape(), &[h, w, BANK_SIZE][..]);
        prop_assert!(out.data().iter().all(|v| v.abs() <= 1e-8));
    }
}

#[test]
fn bind_matches_elementwise_product() {
    let mut r = rng(11);
    let m = Tensor::uniform(&[4, 4, 2], -1.0, 1.0, &mut r);
    let f = Tensor::uniform(&[4, 4, 2], -1.0, 1.0, &mut r);
    let mut g = Graph::new();
    let (mv, fv) = (g.input(m.clone()), g.input(f.clone()));
    let y = bind(&mut g, mv, fv).unwrap();
    let oracle: Vec<f64> = m.data().iter().zip(f.data()).map(|(a, b)| a * b).collect();
    assert_eq!(g.value(y).data(), &oracle[..]);
}

#[test]
fn checkerboard_excites_the_bank_more_than_flat_gray() {
    let bank = FilterBank::srm("bank").unwrap();
    let mut board = Tensor::zeros(&[12, 12, 3]);
    for (i, v) in board.data_mut().iter_mut().enumerate() {
        let (y, x) = (i / 36, (i / 3) % 12);
        *v = if (y + x) % 2 == 0 { 0.8 } else { -0.8 };
    }
    let mean_abs = |t: &Tensor| t.data().iter().map(|v| v.abs()).sum::<f64>() / t.numel() as f64;
    let flat = bank_response(&bank, Tensor::full(&[12, 12, 3], 0.3));
    assert!(mean_abs(&bank_response(&bank, board)) > mean_abs(&flat));
}

#[test]
fn saturated_gate_passes_its_channel_unchanged() {
    let mut att = ChannelAttention::new("att", 4, 2, true, &mut rng(0)).unwrap();
    att.squeeze.value = Tensor::full(att.squeeze.value.shape(), 1.0);
    let mut excite = Tensor::zeros(att.excite.value.shape());
    excite.data_mut()[..2].copy_from_slice(&[1000.0, 1000.0]);
    att.excite.value = excite;
    let x = Tensor::uniform(&[3, 3, 4], 0.5, 1.0, &mut rng(1));
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = att.attend(&mut g, xv).unwrap();
    let y = g.value(y);
    for p in 0..9 {
        assert_eq!(y.data()[p * 4], x.data()[p * 4]);
        assert_eq!(y.data()[p * 4 + 1], 0.5 * x.data()[p * 4 + 1]);
    }
}
