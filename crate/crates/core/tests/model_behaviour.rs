//! Block-level and whole-network behaviour checks.

mod common;

use std::path::PathBuf;

use common::random;
use sctransnet::decoder::{total_loss, Heads};
use sctransnet::sctb::{Cfn, Ssca};
use sctransnet::{Mode, ModelConfig, ParamStore, SCTransNet, Tape, Tensor, Trainer};
use sctransnet_oracle::{naive_cfn, naive_matmul, CfnWeights};

fn small_config() -> ModelConfig {
    ModelConfig {
        num_sctb: 1,
        ..ModelConfig::default()
    }
}

fn values(store: &ParamStore<f64>, id: sctransnet::ParamId) -> Vec<f64> {
    store.value(id).data().to_vec()
}

#[test]
fn cfn_matches_step_by_step_reference() {
    let cfg = ModelConfig::default();
    let mut store = ParamStore::<f64>::new(5);
    let cfn = Cfn::new(&mut store, "cfn", 32, &cfg).unwrap();
    *store.value_mut(cfn.norm.weight) = random(&[32], 6).map(|v| 1.0 + 0.5 * v);
    *store.value_mut(cfn.norm.bias) = random(&[32], 7).map(|v| 0.3 * v);
    let x = random(&[1, 32, 4, 4], 8);
    let mut tape = Tape::new(Mode::Eval);
    let xv = tape.input(x.clone());
    let y = cfn.forward(&mut tape, &store, xv).unwrap();
    let weights = CfnWeights {
        norm_scale: values(&store, cfn.norm.weight),
        norm_shift: values(&store, cfn.norm.bias),
        expand: values(&store, cfn.expand.weight),
        local3: values(&store, cfn.local3.weight),
        local5: values(&store, cfn.local5.weight),
        contract: values(&store, cfn.contract.weight),
        gate: cfn.gate.map(|g| values(&store, g)),
        eps: cfg.norm_eps,
    };
    assert!(weights.gate.is_some());
    let want = naive_cfn(x.data(), 32, 4, 4, &weights);
    let err = tape
        .value(y)
        .data()
        .iter()
        .zip(&want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err <= 1e-5, "max error {err}");
}

#[test]
fn attention_rows_are_distributions_and_mix_values_linearly() {
    let cfg = ModelConfig {
        channels: [2, 3, 4, 5],
        spatial_embedding: false,
        ..ModelConfig::default()
    };
    let mut store = ParamStore::<f64>::new(9);
    let ssca = Ssca::new(&mut store, "attn", &cfg).unwrap();
    let total = 14;
    // Identity value and output projections expose the raw attention product.
    let identity = |n: usize| Tensor::from_fn(&[n, n, 1, 1], |i| (i / n == i % n) as u8 as f64);
    *store.value_mut(ssca.value.pointwise.weight) = identity(total);
    for (out, &c) in ssca.outputs.iter().zip(&cfg.channels) {
        *store.value_mut(out.weight) = identity(c);
    }
    let (h, w) = (3, 2);
    let mut tape = Tape::new(Mode::Eval);
    let levels: Vec<_> = cfg
        .channels
        .iter()
        .enumerate()
        .map(|(i, &c)| tape.input(random(&[1, c, h, w], 20 + i as u64)))
        .collect();
    let all_value = random(&[1, total, h, w], 30);
    let all = tape.input(all_value.clone());
    let out = ssca
        .forward(
            &mut tape,
            &store,
            &[levels[0], levels[1], levels[2], levels[3]],
            all,
        )
        .unwrap();
    for (i, &c) in cfg.channels.iter().enumerate() {
        let attn = tape.value(out.attention[i]);
        assert_eq!(attn.shape(), &[1, c, total]);
        for row in attn.data().chunks(total) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            assert!(row.iter().all(|&v| v > 0.0));
        }
        let want = naive_matmul(attn.data(), all_value.data(), c, total, h * w);
        let got = tape.value(out.features[i]).data();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12);
        }
    }
}

#[test]
fn mapped_skips_keep_encoder_shapes() {
    let (model, store) = SCTransNet::build::<f32>(&small_config()).unwrap();
    for h in [32, 64, 96] {
        for w in [32, 64, 96] {
            let mut tape = Tape::new(Mode::Eval);
            let x = tape.input(Tensor::zeros(&[1, 1, h, w]));
            let out = model.forward(&mut tape, &store, x).unwrap();
            for i in 0..4 {
                assert_eq!(tape.shape(out.merged[i]), tape.shape(out.encoded[i]));
                assert_eq!(
                    tape.shape(out.embedded[i]),
                    &[1, model.config.channels[i], h / 16, w / 16]
                );
            }
            assert_eq!(tape.shape(out.saliency.fused), &[1, 1, h, w]);
        }
    }
}

#[test]
fn three_by_three_mapper_is_supported() {
    let cfg = ModelConfig {
        fm_kernel: 3,
        ..small_config()
    };
    let (model, store) = SCTransNet::build::<f32>(&cfg).unwrap();
    let (base, base_store) = SCTransNet::build::<f32>(&small_config()).unwrap();
    let delta = model.count_params(&store) - base.count_params(&base_store);
    assert_eq!(delta, 8 * (32 * 32 + 64 * 64 + 128 * 128 + 256 * 256));
    let y = model
        .predict(&store, &Tensor::full(&[1, 1, 32, 32], 0.3))
        .unwrap();
    assert_eq!(y.shape(), &[1, 1, 32, 32]);
    assert!(y.all_finite());
}

#[test]
fn zeroed_encoder_convs_give_constant_channels() {
    let (model, mut store) = SCTransNet::build::<f64>(&small_config()).unwrap();
    store.zero_where(|n| n.starts_with("encoder.") && n.contains("conv"));
    let image = random(&[1, 1, 32, 32], 40);
    let mut tape = Tape::new(Mode::Eval);
    let x = tape.input(image);
    let encoded = model.encoder.forward(&mut tape, &store, x).unwrap();
    for e in encoded {
        let (_, c, h, w) = tape.dims4(e).unwrap();
        let v = tape.value(e);
        for ch in 0..c {
            let plane = &v.data()[ch * h * w..(ch + 1) * h * w];
            assert!(plane.iter().all(|&p| p == plane[0]));
        }
    }
}

#[test]
fn evaluation_is_batch_independent() {
    let (model, store) = SCTransNet::build::<f64>(&small_config()).unwrap();
    let a = random(&[1, 1, 32, 32], 41);
    let b = random(&[1, 1, 32, 32], 42);
    let both = Tensor::stack_batch(&[a.clone(), b.clone()]).unwrap();
    let y = model.predict(&store, &both).unwrap();
    let ya = model.predict(&store, &a).unwrap();
    let yb = model.predict(&store, &b).unwrap();
    assert!(y.batch_item(0).max_abs_diff(&ya) <= 1e-12);
    assert!(y.batch_item(1).max_abs_diff(&yb) <= 1e-12);

    let same = Tensor::stack_batch(&[a.clone(), a]).unwrap();
    let y = model.predict(&store, &same).unwrap();
    assert_eq!(y.batch_item(0), y.batch_item(1));
}

#[test]
fn output_is_a_probability_map() {
    let (model, store) = SCTransNet::build::<f32>(&ModelConfig::default()).unwrap();
    let x = random(&[1, 1, 256, 256], 43).cast::<f32>();
    let y = model.predict(&store, &x).unwrap();
    assert_eq!(y.shape(), &[1, 1, 256, 256]);
    assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn zero_heads_give_one_half_everywhere() {
    let widths = [2, 3, 3, 4, 5];
    let mut store = ParamStore::<f64>::new(12);
    let heads = Heads::new(&mut store, &widths, true).unwrap();
    store.zero_where(|n| n.starts_with("heads."));
    let mut tape = Tape::new(Mode::Eval);
    let decoded: Vec<_> = widths
        .iter()
        .enumerate()
        .map(|(i, &c)| tape.input(random(&[1, c, 16 >> i, 16 >> i], 50 + i as u64)))
        .collect();
    let decoded = [decoded[0], decoded[1], decoded[2], decoded[3], decoded[4]];
    let maps = heads.forward(&mut tape, &store, &decoded).unwrap();
    assert_eq!(maps.levels.len(), 5);
    for &m in maps.levels.iter().chain([&maps.fused]) {
        assert_eq!(tape.shape(m), &[1, 1, 16, 16]);
        assert!(tape.value(m).data().iter().all(|&v| v == 0.5));
    }
}

#[test]
fn fused_map_responds_only_to_weighted_levels() {
    let widths = [2, 3, 3, 4, 5];
    let mut store = ParamStore::<f64>::new(13);
    let heads = Heads::new(&mut store, &widths, true).unwrap();
    let fuse = heads.fuse.clone().unwrap().weight;
    let run = |store: &ParamStore<f64>, bump: f64| {
        let mut tape = Tape::new(Mode::Eval);
        let decoded: Vec<_> = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let mut t = random(&[1, c, 16 >> i, 16 >> i], 60 + i as u64);
                if i == 2 {
                    t.data_mut()[..16].iter_mut().for_each(|v| *v += bump);
                }
                tape.input(t)
            })
            .collect();
        let decoded = [decoded[0], decoded[1], decoded[2], decoded[3], decoded[4]];
        let maps = heads.forward(&mut tape, store, &decoded).unwrap();
        tape.value(maps.fused).clone()
    };
    let base = run(&store, 0.0);
    let moved = run(&store, 2.0).max_abs_diff(&base);
    assert!(moved > 1e-4, "moved {moved}");
    store.value_mut(fuse).data_mut()[2] = 0.0;
    let base = run(&store, 0.0);
    assert_eq!(run(&store, 2.0), base);
}

#[test]
fn total_loss_is_the_weighted_sum_of_terms() {
    let (model, store) = SCTransNet::build::<f64>(&small_config()).unwrap();
    let mut tape = Tape::new(Mode::Train);
    let x = tape.input(random(&[2, 1, 32, 32], 70));
    let out = model.forward(&mut tape, &store, x).unwrap();
    let target = Tensor::from_fn(&[2, 1, 32, 32], |i| (i % 97 < 3) as u8 as f64);
    let loss = total_loss(
        &mut tape,
        &out.saliency,
        &target,
        &model.config.loss_weights,
    )
    .unwrap();
    assert_eq!(loss.terms.len(), 6);
    let sum: f64 = loss
        .terms
        .iter()
        .map(|(_, v)| tape.value(*v).data()[0])
        .sum();
    assert!((tape.value(loss.total).data()[0] - sum).abs() <= 1e-9);
}

#[test]
fn small_adam_step_decreases_the_loss() {
    let mut trainer = Trainer::<f64>::from_config(&small_config()).unwrap();
    let images = random(&[2, 1, 32, 32], 71);
    let masks = Tensor::from_fn(&[2, 1, 32, 32], |i| (i % 64 == 5) as u8 as f64);
    let before = trainer.step(&images, &masks, 1e-4, 0).unwrap().loss;
    let after = trainer.step(&images, &masks, 1e-4, 0).unwrap().loss;
    assert!(after < before, "{after} >= {before}");
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/default_forward.txt")
}

fn golden_input() -> Tensor<f64> {
    Tensor::from_fn(&[1, 1, 32, 32], |i| {
        let (y, x) = ((i / 32) as f64, (i % 32) as f64);
        ((x * 0.37 + y * 0.11).sin() + 0.5 * (x * y * 0.01).cos()) / 1.5
    })
}

/// Set `SCTRANSNET_BLESS=1` to rewrite the stored output.
#[test]
fn default_forward_matches_stored_output() {
    let (model, store) = SCTransNet::build::<f64>(&ModelConfig::default()).unwrap();
    let y = model.predict(&store, &golden_input()).unwrap();
    let path = golden_path();
    if std::env::var_os("SCTRANSNET_BLESS").is_some() {
        let text: String = y.data().iter().map(|v| format!("{v:.12e}\n")).collect();
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, text).unwrap();
    }
    let stored: Vec<f64> = std::fs::read_to_string(&path)
        .unwrap()
        .lines()
        .map(|l| l.parse().unwrap())
        .collect();
    assert_eq!(stored.len(), y.numel());
    let err = y
        .data()
        .iter()
        .zip(&stored)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err <= 1e-5, "max deviation {err}");
}
