//! Acceptance criteria. Runs without the libtest harness so that one
//! `PASS`/`FAIL` line per criterion is always printed; exits non-zero on failure.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sctransnet::checkpoint::{load_checkpoint, save_checkpoint};
use sctransnet::data::{prepare_eval, prepare_train, synth_generate, SynthSpec};
use sctransnet::decoder::{total_loss, Saliency};
use sctransnet::evaluate::{evaluate_samples, evaluate_sharded};
use sctransnet::metrics::{binarize, BinaryMask, Connectivity, EvalAccumulator, EvalReport};
use sctransnet::{LossWeights, Mode, ModelConfig, SCTransNet, Tape, Tensor, Trainer};
use sctransnet_oracle::{naive_pixel_metrics, naive_target_metrics};

fn c01_parameter_budget() -> Outcome {
    let (model, store) = SCTransNet::build::<f32>(&ModelConfig::default()).unwrap();
    let params = model.count_params(&store);
    let rel = params as f64 / 11.19e6 - 1.0;
    let ok = rel.abs() <= 0.10;
    Outcome::new(
        ok,
        format!("{params} params ({:+.2}% vs 11.19 M, tol 10%)", rel * 100.0),
    )
}

fn c02_flop_budget() -> Outcome {
    let (model, _) = SCTransNet::build::<f32>(&ModelConfig::default()).unwrap();
    let flops = model.count_flops(256, 256);
    let rel = flops as f64 / 20.24e9 - 1.0;
    let ok = rel.abs() <= 0.15;
    Outcome::new(
        ok,
        format!(
            "{flops} FLOPs at 256x256 ({:+.2}% vs 20.24 G, tol 15%)",
            rel * 100.0
        ),
    )
}

fn c03_gradient_suite() -> Outcome {
    let reports = common::blocks::all();
    let worst = reports.iter().map(|r| r.max_rel).fold(0.0, f64::max);
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passes(1e-3))
        .map(|r| r.block.as_str())
        .collect();
    let coords: usize = reports.iter().map(|r| r.coords).sum();
    let ok = failed.is_empty();
    Outcome::new(
        ok,
        format!(
            "{} blocks, {coords} coordinates, worst rel {worst:.2e} (tol 1e-3) {failed:?}",
            reports.len()
        ),
    )
}

fn c04_residual_identity() -> Outcome {
    let cfg = ModelConfig::default();
    let (model, mut store) = SCTransNet::build::<f32>(&cfg).unwrap();
    let is_norm_scale =
        |n: &str| (n.contains(".norm") || n.contains(".bn.")) && n.ends_with(".weight");
    store.zero_where(|n| (n.starts_with("sctb") || n.starts_with("fm")) && !is_norm_scale(n));
    let mut ok = true;
    for mode in [Mode::Train, Mode::Eval] {
        let mut tape = Tape::new(mode);
        let x = tape.input(common_image(&[2, 1, 32, 32]));
        let out = model.forward(&mut tape, &store, x).unwrap();
        for i in 0..4 {
            ok &= tape.value(out.merged[i]) == tape.value(out.encoded[i]);
            ok &= tape.value(out.transformed[i]) == tape.value(out.embedded[i]);
        }
    }
    Outcome::new(
        ok,
        "merged skip == E_i bitwise for all levels, train and eval mode",
    )
}

fn common_image(shape: &[usize]) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn c05_attention_normalization() -> Outcome {
    let cfg = ModelConfig::default();
    let (model, store) = SCTransNet::build::<f32>(&cfg).unwrap();
    let mut tape = Tape::new(Mode::Eval);
    let x = tape.input(common_image(&[2, 1, 32, 32]));
    let out = model.forward(&mut tape, &store, x).unwrap();
    let mut worst = 0.0f64;
    let mut shapes_ok = true;
    for block in &out.attention {
        for (i, &a) in block.iter().enumerate() {
            shapes_ok &= tape.shape(a) == [2, cfg.channels[i], cfg.total_channels()];
            for row in tape.value(a).data().chunks(cfg.total_channels()) {
                let s: f64 = row.iter().map(|&v| v as f64).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
    }
    let ok = shapes_ok && worst <= 1e-5;
    Outcome::new(
        ok,
        format!(
            "{} blocks x 4 levels, shape (b, C_i, 480): {shapes_ok}, max |row sum - 1| {worst:.1e}",
            out.attention.len()
        ),
    )
}

fn bools(mask: &BinaryMask) -> Vec<bool> {
    mask.data().iter().map(|&v| v != 0).collect()
}

fn fuzz_mask(rng: &mut ChaCha8Rng, side: usize) -> BinaryMask {
    let mut m = BinaryMask::new(side, side);
    for _ in 0..rng.random_range(0..5) {
        let (y, x) = (rng.random_range(0..side), rng.random_range(0..side));
        let (h, w) = (rng.random_range(1..5), rng.random_range(1..5));
        for yy in y..(y + h).min(side) {
            for xx in x..(x + w).min(side) {
                m.set(yy, xx, true);
            }
        }
    }
    for _ in 0..rng.random_range(0..6) {
        m.set(rng.random_range(0..side), rng.random_range(0..side), true);
    }
    m
}

fn c06_metric_oracle_equivalence() -> Outcome {
    let mut pixel_mismatch = 0;
    for pred_bits in 0u32..512 {
        let pred = BinaryMask::from_fn(3, 3, |y, x| pred_bits >> (y * 3 + x) & 1 == 1);
        for gt_bits in 0u32..512 {
            let gt = BinaryMask::from_fn(3, 3, |y, x| gt_bits >> (y * 3 + x) & 1 == 1);
            let mut acc = EvalAccumulator::new(Connectivity::Eight);
            acc.add(0, &pred, &gt).unwrap();
            let m = acc.metrics();
            let (iou, niou, f) = naive_pixel_metrics(&[(bools(&pred), bools(&gt))]);
            if (m.iou, m.niou, m.f_measure) != (iou, niou, f) {
                pixel_mismatch += 1;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut target_mismatch = 0;
    let mut all = Vec::new();
    let mut total = EvalAccumulator::new(Connectivity::Eight);
    for case in 0..1000u64 {
        let gt = fuzz_mask(&mut rng, 32);
        let mut pred = fuzz_mask(&mut rng, 32);
        // Jittered copies of the ground truth put many centroids near the 3-pixel boundary.
        let (dy, dx) = (rng.random_range(-3i32..=3), rng.random_range(-3i32..=3));
        for y in 0..32i32 {
            for x in 0..32i32 {
                let (sy, sx) = (y - dy, x - dx);
                if (0..32).contains(&sy)
                    && (0..32).contains(&sx)
                    && gt.get(sy as usize, sx as usize)
                    && rng.random_bool(0.8)
                {
                    pred.set(y as usize, x as usize, true);
                }
            }
        }
        let mut acc = EvalAccumulator::new(Connectivity::Eight);
        acc.add(case, &pred, &gt).unwrap();
        total.add(case, &pred, &gt).unwrap();
        let m = acc.metrics();
        let pair = (bools(&pred), bools(&gt));
        if (m.pd, m.fa) != naive_target_metrics(std::slice::from_ref(&pair), 32, 32) {
            target_mismatch += 1;
        }
        all.push(pair);
    }
    let m = total.metrics();
    let (pd, fa) = naive_target_metrics(&all, 32, 32);
    let (iou, niou, f) = naive_pixel_metrics(&all);
    let aggregate_ok = (m.pd, m.fa, m.iou, m.niou, m.f_measure) == (pd, fa, iou, niou, f);
    let ok = pixel_mismatch == 0 && target_mismatch == 0 && aggregate_ok;
    Outcome::new(ok, format!(
            "262144 3x3 pairs: {pixel_mismatch} IoU/nIoU/F mismatches; 1000 fuzzed 32x32: {target_mismatch} Pd/Fa mismatches; aggregate equal: {aggregate_ok}"
        ),
    )
}

/// A vertical line of `n` pixels at column `col`; optionally its last pixel
/// is moved one column left, shifting the centroid by `-1/n`.
fn line(n: usize, col: usize, nudge: bool) -> BinaryMask {
    let mut m = BinaryMask::new(n, 8);
    for y in 0..n {
        m.set(y, col, true);
    }
    if nudge {
        m.set(n - 1, col, false);
        m.set(n - 1, col - 1, true);
    }
    m
}

fn c07_pd_boundary() -> Outcome {
    let gt = line(1000, 1, false);
    let pd_at = |pred: &BinaryMask| {
        let mut acc = EvalAccumulator::new(Connectivity::Eight);
        acc.add(0, pred, &gt).unwrap();
        acc.metrics().pd
    };
    let near = pd_at(&line(1000, 4, true));
    let far = pd_at(&line(1000, 4, false));
    let ok = near == 1.0 && far == 0.0;
    Outcome::new(
        ok,
        format!("deviation 2.999 -> Pd {near}, deviation 3.0 -> Pd {far}"),
    )
}

fn c08_loss_sanity() -> Outcome {
    let mut tape = Tape::<f64>::new(Mode::Eval);
    let half = Tensor::full(&[2, 1, 8, 8], 0.5);
    let target = Tensor::from_fn(&[2, 1, 8, 8], |i| (i % 5 == 0) as u8 as f64);
    let levels: Vec<_> = (0..5).map(|_| tape.input(half.clone())).collect();
    let fused = tape.input(half);
    let loss = total_loss(
        &mut tape,
        &Saliency { fused, levels },
        &target,
        &LossWeights::default(),
    )
    .unwrap();
    let l = tape.value(loss.total).data()[0];
    let err = (l - 6.0 * std::f64::consts::LN_2).abs();
    let ok = err <= 1e-6;
    Outcome::new(ok, format!("L = {l:.9} vs 6 ln 2, error {err:.1e}"))
}

fn toy_config() -> ModelConfig {
    let mut cfg = ModelConfig {
        deep_supervision: false,
        ..ModelConfig::default()
    };
    cfg.train.crop_size = 64;
    cfg.train.batch_size = 1;
    cfg.train.augment = false;
    cfg.train.epochs = 200;
    cfg
}

fn toy_image() -> sctransnet::data::Sample {
    let spec = SynthSpec {
        count: 1,
        height: 64,
        width: 64,
        targets: (2, 2),
        sigma: (1.0, 2.0),
        seed: 0,
        ..SynthSpec::default()
    };
    synth_generate(&spec).unwrap().remove(0)
}

fn iou_on(trainer: &Trainer<f32>, sample: &sctransnet::data::Sample) -> f64 {
    let input = prepare_eval::<f32>(sample, trainer.config().spatial_multiple());
    let map = input
        .crop_back(&trainer.model.predict(&trainer.store, &input.image).unwrap())
        .unwrap();
    let mut acc = EvalAccumulator::new(Connectivity::Eight);
    acc.add(
        0,
        &binarize(&map, trainer.config().threshold).unwrap(),
        &sample.mask,
    )
    .unwrap();
    acc.metrics().iou
}

fn c09_toy_learnability() -> Outcome {
    let sample = toy_image();
    let cfg = toy_config();
    let pair = prepare_train::<f32>(&sample, 64, 0, false);

    let mut slow = Trainer::<f32>::from_config(&cfg).unwrap();
    let losses: Vec<f64> = (0..20)
        .map(|_| slow.step(&pair.image, &pair.mask, 1e-4, 0).unwrap().loss)
        .collect();
    let monotone = losses.windows(2).all(|w| w[1] < w[0]);

    let mut trainer = Trainer::<f32>::from_config(&cfg).unwrap();
    let mut sink = Vec::new();
    for epoch in 0..cfg.train.epochs {
        trainer
            .run_epoch(std::slice::from_ref(&sample), epoch, &mut sink)
            .unwrap();
    }
    let iou = iou_on(&trainer, &sample);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.ckpt");
    save_checkpoint(&path, trainer.config(), &trainer.store).unwrap();
    let (model, store) = load_checkpoint::<f32>(&path).unwrap();
    let reloaded = iou_on(&Trainer::new(model, store), &sample);

    let ok = monotone && iou >= 0.9 && reloaded == iou;
    Outcome::new(ok, format!(
            "IoU after 200 steps {iou:.4} (>= 0.9), reloaded {reloaded:.4}; first 20 losses at lr 1e-4 strictly decreasing: {monotone} ({:.5} -> {:.5})",
            losses[0], losses[19]
        ),
    )
}

fn c10_determinism_and_persistence() -> Outcome {
    let mut cfg = ModelConfig::default();
    cfg.train.crop_size = 32;
    cfg.train.batch_size = 2;
    cfg.train.epochs = 3;
    let data = synth_generate(&SynthSpec {
        count: 3,
        height: 40,
        width: 36,
        seed: 9,
        ..SynthSpec::default()
    })
    .unwrap();
    let run = || {
        let mut trainer = Trainer::<f32>::from_config(&cfg).unwrap();
        let mut log = Vec::new();
        for epoch in 0..cfg.train.epochs {
            trainer.run_epoch(&data, epoch, &mut log).unwrap();
        }
        (trainer, log)
    };
    let (trainer, log_a) = run();
    let (_, log_b) = run();
    let logs_equal = !log_a.is_empty() && log_a == log_b;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, trainer.config(), &trainer.store).unwrap();
    let (model, store) = load_checkpoint::<f32>(&path).unwrap();
    let input = prepare_eval::<f32>(&data[0], cfg.spatial_multiple());
    let before = trainer.model.predict(&trainer.store, &input.image).unwrap();
    let after = model.predict(&store, &input.image).unwrap();
    let same_bits = before
        .data()
        .iter()
        .zip(after.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let ok = logs_equal && same_bits;
    Outcome::new(
        ok,
        format!(
            "{} log bytes identical: {logs_equal}; reloaded forward bitwise equal: {same_bits}",
            log_a.len()
        ),
    )
}

fn c11_ablation_structure() -> Outcome {
    let base_cfg = ModelConfig::default();
    let (_, base_store) = SCTransNet::build::<f32>(&base_cfg).unwrap();
    let base = base_store.count_learnable() as i64;
    let c = base_cfg.channels.map(|v| v as i64);
    let total: i64 = c.iter().sum();
    let blocks = base_cfg.num_sctb as i64;
    let d = base_cfg.decoder_channels.map(|v| v as i64);
    let level_heads: i64 = d
        .iter()
        .chain([&(base_cfg.bottleneck_channels as i64)])
        .map(|w| w + 1)
        .sum();
    let grid = (base_cfg.pe_reference_size / base_cfg.patch_size) as i64;

    let variants: Vec<(&str, ModelConfig, i64)> = vec![
        (
            "deep_supervision off",
            ModelConfig {
                deep_supervision: false,
                ..base_cfg.clone()
            },
            (d[0] + 1) - level_heads - 6,
        ),
        (
            "positional_encoding on",
            ModelConfig {
                positional_encoding: true,
                ..base_cfg.clone()
            },
            total * grid * grid,
        ),
        (
            "num_heads = 8",
            ModelConfig {
                num_heads: 8,
                ..base_cfg.clone()
            },
            0,
        ),
        (
            "spatial_embedding off",
            ModelConfig {
                spatial_embedding: false,
                ..base_cfg.clone()
            },
            -blocks * 9 * (total + 2 * total),
        ),
        (
            "gslc off",
            ModelConfig {
                gslc: false,
                ..base_cfg.clone()
            },
            -blocks * 4 * 3,
        ),
    ];
    let mut ok = true;
    let mut detail = Vec::new();
    for (name, cfg, want) in variants {
        let (model, store) = SCTransNet::build::<f32>(&cfg).unwrap();
        let got = store.count_learnable() as i64 - base;
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.input(Tensor::<f32>::zeros(&[1, 1, 48, 32]));
        let runs = model.forward(&mut tape, &store, x).is_ok_and(|o| {
            tape.shape(o.saliency.fused) == [1, 1, 48, 32]
                && tape.value(o.saliency.fused).all_finite()
        });
        ok &= runs && got == want;
        detail.push(format!(
            "{name}: {got:+} (predicted {want:+}, forward ok {runs})"
        ));
    }
    Outcome::new(ok, detail.join("; "))
}

fn c12_sharded_evaluation() -> Outcome {
    let cfg = ModelConfig {
        num_sctb: 1,
        ..ModelConfig::default()
    };
    let (model, store) = SCTransNet::build::<f32>(&cfg).unwrap();
    let samples = synth_generate(&SynthSpec {
        count: 7,
        height: 40,
        width: 48,
        seed: 12,
        ..SynthSpec::default()
    })
    .unwrap();
    let single = evaluate_samples(&model, &store, &samples, 0, Connectivity::Eight).unwrap();
    let single_report = EvalReport::from_accumulator(&single).unwrap();
    let mut ok = true;
    for shards in [2, 3, 7] {
        let merged =
            evaluate_sharded(&model, &store, &samples, shards, Connectivity::Eight).unwrap();
        let r = EvalReport::from_accumulator(&merged).unwrap();
        ok &= r.to_records() == single_report.to_records() && merged.roc() == single.roc();
    }
    Outcome::new(
        ok,
        format!(
            "{} samples, k in {{2, 3, 7}}: metrics, AUCs and ROC bitwise equal to single pass",
            samples.len()
        ),
    )
}

struct Outcome {
    ok: bool,
    detail: String,
}

impl Outcome {
    fn new(ok: bool, detail: impl Into<String>) -> Self {
        Self {
            ok,
            detail: detail.into(),
        }
    }
}

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 12] = [
    (1, "parameter budget", c01_parameter_budget),
    (2, "FLOP budget", c02_flop_budget),
    (3, "gradient suite", c03_gradient_suite),
    (4, "residual identity", c04_residual_identity),
    (5, "attention normalization", c05_attention_normalization),
    (
        6,
        "metric oracle equivalence",
        c06_metric_oracle_equivalence,
    ),
    (7, "Pd boundary", c07_pd_boundary),
    (8, "loss sanity", c08_loss_sanity),
    (9, "toy learnability", c09_toy_learnability),
    (
        10,
        "determinism & persistence",
        c10_determinism_and_persistence,
    ),
    (11, "ablation structure", c11_ablation_structure),
    (12, "sharded evaluation", c12_sharded_evaluation),
];

fn main() {
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let selected: Vec<&Criterion> = CRITERIA
        .iter()
        .filter(|(_, name, _)| {
            filter.is_empty() || filter.iter().any(|f| name.contains(f.as_str()))
        })
        .collect();
    let outcomes: Vec<Outcome> = std::thread::scope(|s| {
        let handles: Vec<_> = selected
            .iter()
            .map(|&&(_, _, run)| s.spawn(move || std::panic::catch_unwind(run)))
            .collect();
        handles
            .into_iter()
            .map(|h| match h.join().expect("criterion thread") {
                Ok(outcome) => outcome,
                Err(panic) => {
                    let msg = panic
                        .downcast_ref::<String>()
                        .cloned()
                        .or_else(|| panic.downcast_ref::<&str>().map(|m| m.to_string()))
                        .unwrap_or_default();
                    Outcome::new(false, format!("panicked: {msg}"))
                }
            })
            .collect()
    });
    let mut failed = 0;
    for (&&(id, name, _), outcome) in selected.iter().zip(&outcomes) {
        println!(
            "criterion {id:>2} {name:<26} {}  {}",
            if outcome.ok { "PASS" } else { "FAIL" },
            outcome.detail
        );
        failed += usize::from(!outcome.ok);
    }
    println!(
        "{} of {} acceptance criteria passed",
        outcomes.len() - failed,
        outcomes.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
