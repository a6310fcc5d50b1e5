use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use log::{info, warn};
use sctransnet::checkpoint::{save_checkpoint, Checkpoint};
use sctransnet::data::{
    load_dataset, mask_to_gray, read_gray, save_gray, split_path, synth_generate, to_gray,
    write_dataset, Sample,
};
use sctransnet::evaluate::{evaluate_sharded, predict_sample};
use sctransnet::metrics::{
    binarize, roc_to_csv, BinaryMask, Connectivity, EvalAccumulator, EvalReport,
};
use sctransnet::{ParamStore, SCTransNet, Tensor, Trainer};

use crate::run_config::RunConfig;

fn output_dir(rc: &RunConfig) -> Result<&Path> {
    rc.out
        .as_deref()
        .context("no output directory: pass --out or set `out` in the config")
}

fn data_root(rc: &RunConfig) -> Result<&Path> {
    rc.data
        .root
        .as_deref()
        .context("no dataset: pass --data or set `data.root` in the config")
}

fn load_split(rc: &RunConfig, split: &str) -> Result<Vec<Sample>> {
    let root = data_root(rc)?;
    let list = split_path(root, split, &rc.data.name);
    ensure!(
        list.is_file(),
        "dataset split {} does not exist",
        list.display()
    );
    load_dataset(root, &list).with_context(|| format!("loading {split} split"))
}

/// How `eval` and `infer` pick the model configuration.
#[derive(Clone, Copy, Debug)]
pub struct ModelSource {
    /// The run config has a `[model]` table the checkpoint must match.
    pub explicit: bool,
    /// `--threshold`, which otherwise comes from the chosen config.
    pub threshold: Option<f64>,
}

/// Loads the checkpoint. With an explicit model section in the run config the
/// checkpoint must match it exactly; otherwise its stored config is used.
fn restore(rc: &RunConfig, source: ModelSource) -> Result<(SCTransNet, ParamStore<f32>)> {
    let path = rc
        .checkpoint
        .as_deref()
        .context("no checkpoint: pass --checkpoint or set `checkpoint` in the config")?;
    let ckpt = Checkpoint::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut config = if source.explicit {
        rc.model.clone()
    } else {
        ckpt.config.clone()
    };
    if let Some(t) = source.threshold {
        config.threshold = t;
    }
    let (model, mut store) = SCTransNet::build::<f32>(&config)?;
    ckpt.load_into(&mut store).with_context(|| {
        format!(
            "checkpoint {} does not match the configured model",
            path.display()
        )
    })?;
    Ok((model, store))
}

pub fn train(rc: &RunConfig) -> Result<()> {
    let data = load_split(rc, "train")?;
    let test_list = split_path(data_root(rc)?, "test", &rc.data.name);
    let validation = if test_list.is_file() {
        load_split(rc, "test")?
    } else {
        warn!("no test split; validating on the training images");
        data.clone()
    };
    let out = output_dir(rc)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("run.toml"), rc.to_toml())?;

    let mut trainer = Trainer::<f32>::from_config(&rc.model)?;
    let mut log = BufWriter::new(File::create(out.join("train_log.jsonl"))?);
    let epochs = rc.model.train.epochs;
    let mut best: Option<(usize, f64)> = None;
    for epoch in 0..epochs {
        let rec = trainer.run_epoch(&data, epoch, &mut log)?;
        let last = epoch + 1 == epochs;
        if (epoch + 1) % rc.run.validate_every == 0 || last {
            let acc = evaluate_sharded(
                &trainer.model,
                &trainer.store,
                &validation,
                rc.run.eval_shards,
                Connectivity::Eight,
            )?;
            let iou = acc.metrics().iou;
            info!(
                "epoch {:>4}  lr {:.3e}  loss {:.5}  val IoU {:.4}",
                epoch + 1,
                rec.lr,
                rec.mean_loss,
                iou
            );
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((epoch + 1, iou));
                save_checkpoint(&out.join("best.ckpt"), trainer.config(), &trainer.store)?;
            }
        } else {
            info!(
                "epoch {:>4}  lr {:.3e}  loss {:.5}",
                epoch + 1,
                rec.lr,
                rec.mean_loss
            );
        }
        if rc.run.checkpoint_every > 0 && (epoch + 1) % rc.run.checkpoint_every == 0 {
            let path = out
                .join("checkpoints")
                .join(format!("epoch_{:04}.ckpt", epoch + 1));
            save_checkpoint(&path, trainer.config(), &trainer.store)?;
        }
    }
    log.flush()?;
    save_checkpoint(&out.join("final.ckpt"), trainer.config(), &trainer.store)?;
    if let Some((epoch, iou)) = best {
        fs::write(
            out.join("best.txt"),
            format!("epoch\t{epoch}\nval_iou\t{iou:?}\n"),
        )?;
        println!("best validation IoU {iou:.4} at epoch {epoch}");
    }
    println!("wrote checkpoints to {}", out.display());
    Ok(())
}

fn read_prediction(dir: &Path, sample: &Sample) -> Result<Tensor<f64>> {
    let path = dir.join(format!("{}.png", sample.id));
    let img = read_gray(&path).with_context(|| format!("prediction for `{}`", sample.id))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    ensure!(
        (h, w) == (sample.height, sample.width),
        "{} is {h}x{w}, ground truth is {}x{}",
        path.display(),
        sample.height,
        sample.width
    );
    Ok(Tensor::from_vec(
        &[1, 1, h, w],
        img.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
    )?)
}

pub fn eval(rc: &RunConfig, pred_dir: Option<&Path>, source: ModelSource) -> Result<()> {
    let samples = load_split(rc, "test")?;
    ensure!(!samples.is_empty(), "the test split is empty");
    let acc = match pred_dir {
        Some(dir) => {
            let mut acc = EvalAccumulator::new(Connectivity::Eight);
            for (i, s) in samples.iter().enumerate() {
                let map = read_prediction(dir, s)?;
                acc.add_saliency(i as u64, &map, &s.mask, rc.model.threshold)?;
            }
            acc
        }
        None => {
            let (model, store) = restore(rc, source)?;
            evaluate_sharded(
                &model,
                &store,
                &samples,
                rc.run.eval_shards,
                Connectivity::Eight,
            )?
        }
    };
    let report = EvalReport::from_accumulator(&acc)?;
    print!("{}", report.to_table());
    if let Some(out) = &rc.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("report.tsv"), report.to_records())?;
        fs::write(out.join("roc.csv"), roc_to_csv(&acc.roc()))?;
    }
    Ok(())
}

fn expand_inputs(inputs: &[PathBuf]) -> Vec<PathBuf> {
    let mut files = Vec::new();
    for p in inputs {
        match fs::read_dir(p) {
            Ok(entries) => {
                let mut found: Vec<PathBuf> = entries
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|f| f.is_file())
                    .collect();
                found.sort();
                files.extend(found);
            }
            Err(_) => files.push(p.clone()),
        }
    }
    files
}

fn infer_one(
    model: &SCTransNet,
    store: &ParamStore<f32>,
    input: &Path,
    out: &Path,
    threshold: f64,
) -> Result<()> {
    let img = read_gray(input)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let stem = input
        .file_stem()
        .and_then(|s| s.to_str())
        .with_context(|| format!("{} has no usable file name", input.display()))?;
    let image = img.pixels().map(|p| p.0[0] as f32 / 255.0).collect();
    let sample = Sample::new(stem, h, w, image, BinaryMask::new(h, w))?;
    let map = predict_sample(model, store, &sample)
        .with_context(|| format!("running the model on {}", input.display()))?;
    let saliency = to_gray(h, w, map.data().iter().map(|&v| v as f64));
    save_gray(&saliency, &out.join(format!("{stem}_saliency.png")))?;
    let mask = binarize(&map, threshold)?;
    save_gray(&mask_to_gray(&mask), &out.join(format!("{stem}_mask.png")))?;
    Ok(())
}

pub fn infer(rc: &RunConfig, inputs: &[PathBuf], source: ModelSource) -> Result<()> {
    let (model, store) = restore(rc, source)?;
    let out = output_dir(rc)?;
    let files = expand_inputs(inputs);
    ensure!(!files.is_empty(), "no input images");
    fs::create_dir_all(out)?;
    let mut failed = Vec::new();
    for f in &files {
        match infer_one(&model, &store, f, out, model.config.threshold) {
            Ok(()) => info!("{}", f.display()),
            Err(e) => {
                eprintln!("error: {e:#}");
                failed.push(f.display().to_string());
            }
        }
    }
    if !failed.is_empty() {
        bail!(
            "{} of {} inputs failed: {}",
            failed.len(),
            files.len(),
            failed.join(", ")
        );
    }
    Ok(())
}

pub fn analyze(rc: &RunConfig) -> Result<()> {
    let (h, w) = (rc.run.analyze_height, rc.run.analyze_width);
    let (model, store) = SCTransNet::build::<f32>(&rc.model)?;
    let params = model.count_params(&store);
    let flops = model.count_flops(h, w);
    let mut text = format!(
        "params\t{params}\t{:.2} M\nflops\t{flops}\t{:.2} G at {h}x{w}\n\nmodule\tparams\tflops\n",
        params as f64 / 1e6,
        flops as f64 / 1e9
    );
    for m in model.breakdown(&store, h, w) {
        text.push_str(&format!("{}\t{}\t{}\n", m.name, m.params, m.flops));
    }
    print!("{text}");
    if let Some(out) = &rc.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("analysis.tsv"), &text)?;
    }
    Ok(())
}

pub fn synth(rc: &RunConfig) -> Result<()> {
    let out = output_dir(rc)?;
    let train = rc.synth.count;
    let mut spec = rc.synth.clone();
    spec.count = train + rc.run.synth_test_count;
    let samples = synth_generate(&spec)?;
    write_dataset(out, &rc.data.name, &samples[..train], &samples[train..])?;
    println!(
        "wrote {} training and {} test images to {}",
        train,
        samples.len() - train,
        out.display()
    );
    Ok(())
}
