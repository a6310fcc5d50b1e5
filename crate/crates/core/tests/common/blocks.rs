//! Toy-sized instances of every parameterized block, each run through [`check_block`].

use super::{check_block, random, GradReport};
use sctransnet::decoder::{CcaGate, DecoderStage, Heads};
use sctransnet::encoder::ResidualBlock;
use sctransnet::sctb::{Cfn, FeatureMapper, PatchEmbed, Sctb, Ssca};
use sctransnet::{Mode, ModelConfig, ParamStore, Tape, Var};

pub fn toy_config() -> ModelConfig {
    ModelConfig {
        channels: [2, 3, 4, 5],
        bottleneck_channels: 6,
        decoder_channels: [2, 3, 3, 4],
        patch_size: 8,
        seed: 11,
        ..ModelConfig::default()
    }
}

fn grid_inputs(cfg: &ModelConfig, side: usize, seed: u64) -> Vec<sctransnet::Tensor<f64>> {
    cfg.channels
        .iter()
        .enumerate()
        .map(|(i, &c)| random(&[1, c, side, side], seed + i as u64))
        .collect()
}

fn four(v: &[Var]) -> [Var; 4] {
    [v[0], v[1], v[2], v[3]]
}

pub fn encoder_stage() -> GradReport {
    let mut store = ParamStore::new(1);
    let block = ResidualBlock::new(&mut store, "stage", 3, 4, 1e-5).unwrap();
    check_block(
        "encoder stage",
        &store,
        &[random(&[1, 3, 4, 4], 2)],
        Mode::Train,
        &|t, s, x| vec![block.forward(t, s, x[0]).unwrap()],
    )
}

pub fn patch_embed() -> GradReport {
    let cfg = ModelConfig {
        positional_encoding: true,
        pe_reference_size: 32,
        ..toy_config()
    };
    let mut store = ParamStore::new(2);
    let embed = PatchEmbed::new(&mut store, &cfg).unwrap();
    let inputs: Vec<_> = cfg
        .channels
        .iter()
        .enumerate()
        .map(|(i, &c)| random(&[1, c, 8 >> i, 8 >> i], 20 + i as u64))
        .collect();
    check_block("patch embed", &store, &inputs, Mode::Train, &|t, s, x| {
        embed.forward(t, s, &four(x)).unwrap().to_vec()
    })
}

pub fn ssca() -> GradReport {
    let cfg = toy_config();
    let mut store = ParamStore::new(3);
    let attn = Ssca::new(&mut store, "ssca", &cfg).unwrap();
    let mut inputs = grid_inputs(&cfg, 2, 30);
    inputs.push(random(&[1, cfg.total_channels(), 2, 2], 39));
    check_block("ssca", &store, &inputs, Mode::Train, &|t, s, x| {
        attn.forward(t, s, &four(x), x[4])
            .unwrap()
            .features
            .to_vec()
    })
}

pub fn cfn() -> GradReport {
    let cfg = toy_config();
    let mut store = ParamStore::new(4);
    let ffn = Cfn::new(&mut store, "cfn", 4, &cfg).unwrap();
    check_block(
        "cfn",
        &store,
        &[random(&[1, 4, 4, 4], 40)],
        Mode::Train,
        &|t, s, x| vec![ffn.forward(t, s, x[0]).unwrap()],
    )
}

pub fn sctb() -> GradReport {
    let cfg = toy_config();
    let mut store = ParamStore::new(5);
    let block = Sctb::new(&mut store, "sctb", &cfg).unwrap();
    check_block(
        "sctb",
        &store,
        &grid_inputs(&cfg, 2, 50),
        Mode::Train,
        &|t, s, x| block.forward(t, s, &four(x)).unwrap().tokens.to_vec(),
    )
}

pub fn feature_mapper() -> GradReport {
    let cfg = toy_config();
    let mut store = ParamStore::new(6);
    let fm = FeatureMapper::new(&mut store, "fm", 3, &cfg).unwrap();
    let inputs = [random(&[1, 3, 2, 2], 60), random(&[1, 3, 4, 4], 61)];
    check_block(
        "feature mapping",
        &store,
        &inputs,
        Mode::Train,
        &|t, s, x| vec![fm.forward(t, s, x[0], x[1]).unwrap()],
    )
}

pub fn cca() -> GradReport {
    let mut store = ParamStore::new(7);
    let gate = CcaGate::new(&mut store, "cca", 4, 3).unwrap();
    let inputs = [random(&[1, 4, 4, 4], 70), random(&[1, 3, 4, 4], 71)];
    check_block("cca", &store, &inputs, Mode::Train, &|t, s, x| {
        vec![gate.forward(t, s, x[0], x[1]).unwrap()]
    })
}

pub fn decoder_stage() -> GradReport {
    let mut store = ParamStore::new(8);
    let stage = DecoderStage::new(&mut store, "stage", 4, 3, 3, 1e-5).unwrap();
    let inputs = [random(&[1, 4, 2, 2], 80), random(&[1, 3, 4, 4], 81)];
    check_block("decoder stage", &store, &inputs, Mode::Train, &|t, s, x| {
        vec![stage.forward(t, s, x[0], x[1]).unwrap()]
    })
}

/// Heads emit probabilities, so the outputs are mapped back to logits before scoring.
pub fn heads() -> GradReport {
    let mut store = ParamStore::new(9);
    let widths = [2, 3, 3, 4, 5];
    let heads = Heads::new(&mut store, &widths, true).unwrap();
    let inputs: Vec<_> = widths
        .iter()
        .enumerate()
        .map(|(i, &c)| random(&[1, c, (4 >> i).max(1), (4 >> i).max(1)], 90 + i as u64))
        .collect();
    check_block(
        "heads",
        &store,
        &inputs,
        Mode::Train,
        &|t: &mut Tape<f64>, s, x| {
            let decoded = [x[0], x[1], x[2], x[3], x[4]];
            let maps = heads.forward(t, s, &decoded).unwrap();
            let mut outs = maps.levels.clone();
            outs.push(maps.fused);
            outs
        },
    )
}

pub fn all() -> Vec<GradReport> {
    vec![
        encoder_stage(),
        patch_embed(),
        ssca(),
        cfn(),
        sctb(),
        feature_mapper(),
        cca(),
        decoder_stage(),
        heads(),
    ]
}
