//! Batch command-line front end: dataset synthesis, training, prediction,
//! instance recovery, evaluation, and label-map rendering.
//!
//! Exit codes: 0 success, 2 usage/configuration error, 3 data error,
//! 4 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nucleiseg::config::{apply_network_keys, apply_train_keys, KvFile};
use nucleiseg::data::{
    load_dataset, load_image_png, load_instances_png, load_prob_png, save_dataset, save_instances_png,
    save_prob_png, synth_generate,
};
use nucleiseg::error::{Error, Result};
use nucleiseg::metrics::evaluate_dataset;
use nucleiseg::network::{load_checkpoint, Network, NetworkConfig};
use nucleiseg::postprocess::{binarize, instance_segment};
use nucleiseg::trainer::{resume, train, TrainConfig, TrainState};
use nucleiseg::viz::render;

#[derive(Parser)]
#[command(name = "nucleiseg", version, about = "Nucleus instance segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic nucleus dataset
    Synth {
        /// Output dataset directory (images/ + labels/ + manifest)
        out_dir: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Nucleus density; expected count ≈ density·size²/1000
        #[arg(long, default_value_t = 0.6)]
        density: f64,
        /// Largest allowed overlap fraction for a new nucleus, in [0,1]
        #[arg(long, default_value_t = 0.0)]
        overlap: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on a dataset directory
    Train {
        data_dir: PathBuf,
        out_dir: PathBuf,
        /// key = value config file; flags below override file values
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from this checkpoint instead of fresh weights
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict probability maps for every image in a directory
    Predict {
        ckpt: PathBuf,
        images_dir: PathBuf,
        out_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the six per-stage side maps of each branch
        #[arg(long, default_value_t = false)]
        sides: bool,
    },
    /// Recover instances from mask + edge probability maps
    Postprocess {
        mask_png: PathBuf,
        edge_png: PathBuf,
        out_png: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = 1)]
        erosion_iters: usize,
    },
    /// Score predicted instance maps against ground truth
    Eval {
        pred_dir: PathBuf,
        gt_dir: PathBuf,
        report_path: PathBuf,
    },
    /// Render an instance label map as a color PNG
    Viz {
        instances_png: PathBuf,
        out_png: PathBuf,
        #[arg(long, default_value_t = false)]
        boundaries: bool,
    },
}

/// Written into each output directory before any artifact, so a run can be
/// reproduced from its manifest alone.
fn write_manifest(dir: &Path, command: &str, details: &[(&str, String)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut text = format!(
        "tool = nucleiseg {}\ncommand = {command}\n",
        env!("CARGO_PKG_VERSION")
    );
    for (k, v) in details {
        text.push_str(&format!("{k} = {v}\n"));
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn network_config(config: Option<&PathBuf>) -> Result<(NetworkConfig, Option<KvFile>)> {
    match config {
        None => Ok((NetworkConfig::default(), None)),
        Some(path) => {
            let kv = KvFile::load(path)?;
            let cfg = apply_network_keys(&kv, NetworkConfig::default())?;
            Ok((cfg, Some(kv)))
        }
    }
}

fn cmd_synth(out_dir: &Path, n: usize, size: usize, density: f64, overlap: f64, seed: u64) -> Result<()> {
    write_manifest(
        out_dir,
        "synth",
        &[
            ("n", n.to_string()),
            ("size", size.to_string()),
            ("density", density.to_string()),
            ("overlap", overlap.to_string()),
            ("seed", seed.to_string()),
        ],
    )?;
    let samples = synth_generate(n, size, density, overlap, seed)?;
    save_dataset(&samples, out_dir)?;
    println!("wrote {} samples to {}", samples.len(), out_dir.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data_dir: &Path,
    out_dir: &Path,
    config: Option<&PathBuf>,
    epochs: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    resume_from: Option<&PathBuf>,
) -> Result<()> {
    let (net_cfg, kv) = network_config(config)?;
    let mut train_cfg = TrainConfig::default();
    if let Some(kv) = &kv {
        train_cfg = apply_train_keys(kv, train_cfg)?;
        kv.reject_unknown()?;
    }
    // CLI flags take precedence over config-file values
    if let Some(e) = epochs {
        train_cfg.epochs = e;
    }
    if let Some(l) = lr {
        train_cfg.lr = l;
    }
    if let Some(s) = seed {
        train_cfg.seed = s;
    }
    train_cfg.out_dir = Some(out_dir.to_path_buf());
    train_cfg.validate()?;
    net_cfg.validate()?;
    write_manifest(
        out_dir,
        "train",
        &[
            ("data_dir", data_dir.display().to_string()),
            ("epochs", train_cfg.epochs.to_string()),
            ("lr", train_cfg.lr.to_string()),
            ("seed", train_cfg.seed.to_string()),
            ("network", net_cfg.canonical().replace('\n', " ").trim().to_string()),
        ],
    )?;
    let dataset = load_dataset(data_dir)?;
    let net = Network::build(net_cfg)?;
    let state = match resume_from {
        // a resumed run keeps the (possibly decayed) rate from the checkpoint
        Some(path) => resume(&net, path)?,
        None => TrainState::fresh(&train_cfg),
    };
    let state = train(&net, &dataset, &train_cfg, state)?;
    println!(
        "trained to epoch {} (mean loss {:.6}); checkpoints in {}",
        state.epoch,
        state.best_loss,
        out_dir.display()
    );
    Ok(())
}

fn cmd_predict(
    ckpt: &Path,
    images_dir: &Path,
    out_dir: &Path,
    config: Option<&PathBuf>,
    sides: bool,
) -> Result<()> {
    let (net_cfg, kv) = network_config(config)?;
    if let Some(kv) = &kv {
        // the same config file drives train and predict; training keys are
        // simply irrelevant here, not errors
        apply_train_keys(kv, TrainConfig::default())?;
        kv.reject_unknown()?;
    }
    write_manifest(
        out_dir,
        "predict",
        &[
            ("ckpt", ckpt.display().to_string()),
            ("images_dir", images_dir.display().to_string()),
            ("sides", sides.to_string()),
        ],
    )?;
    let net = Network::build(net_cfg)?;
    load_checkpoint(&net, ckpt)?;
    let mut ids: Vec<String> = fs::read_dir(images_dir)
        .map_err(|e| Error::io(images_dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_string_lossy()
                .strip_suffix(".png")
                .map(str::to_string)
        })
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::Data(format!("no PNG images in {}", images_dir.display())));
    }
    for id in ids {
        let (h, w, image) = load_image_png(&images_dir.join(format!("{id}.png")))?;
        let input = nucleiseg::Tensor::from_vec(&[1, 3, h, w], image);
        let out = net.forward(&input, false)?;
        save_prob_png(&out.s_mask.data(), h, w, &out_dir.join(format!("{id}_mask.png")))?;
        save_prob_png(&out.s_edge.data(), h, w, &out_dir.join(format!("{id}_edge.png")))?;
        if sides {
            for (i, side) in out.mask_sides.iter().enumerate() {
                save_prob_png(&side.data(), h, w, &out_dir.join(format!("{id}_mask_side{i}.png")))?;
            }
            for (i, side) in out.edge_sides.iter().enumerate() {
                save_prob_png(&side.data(), h, w, &out_dir.join(format!("{id}_edge_side{i}.png")))?;
            }
        }
        println!("predicted {id}");
    }
    Ok(())
}

fn cmd_postprocess(
    mask_png: &Path,
    edge_png: &Path,
    out_png: &Path,
    threshold: f64,
    erosion_iters: usize,
) -> Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Usage(format!("threshold {threshold} outside [0,1]")));
    }
    let (h, w, mask_prob) = load_prob_png(mask_png)?;
    let (eh, ew, edge_prob) = load_prob_png(edge_png)?;
    if (h, w) != (eh, ew) {
        return Err(Error::Dimension(format!(
            "mask is {h}×{w} but edge is {eh}×{ew}"
        )));
    }
    let mask = binarize(&mask_prob, h, w, threshold);
    let edge = binarize(&edge_prob, h, w, threshold);
    let instances = instance_segment(&mask, &edge, erosion_iters)?;
    if let Some(dir) = out_png.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    save_instances_png(&instances, out_png)?;
    println!("{} instances -> {}", instances.num_instances(), out_png.display());
    Ok(())
}

fn cmd_eval(pred_dir: &Path, gt_dir: &Path, report_path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut names: Vec<String> = fs::read_dir(pred_dir)
        .map_err(|e| Error::io(pred_dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Data(format!("no prediction PNGs in {}", pred_dir.display())));
    }
    for name in names {
        let pred = load_instances_png(&pred_dir.join(&name))?;
        // prediction "<id>_instances.png" pairs with ground truth "<id>.png"
        let stem = name.trim_end_matches(".png").trim_end_matches("_instances");
        let gt_path = gt_dir.join(format!("{stem}.png"));
        let gt = load_instances_png(&gt_path)?;
        entries.push((stem.to_string(), pred, gt));
    }
    let report = evaluate_dataset(&entries)?;
    if let Some(dir) = report_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(report_path, report.to_kv()).map_err(|e| Error::io(report_path, e))?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_viz(instances_png: &Path, out_png: &Path, boundaries: bool) -> Result<()> {
    let m = load_instances_png(instances_png)?;
    let rgb = render(&m, boundaries);
    let buf: image::RgbImage =
        image::ImageBuffer::from_raw(m.w as u32, m.h as u32, rgb).expect("render size");
    buf.save(out_png)
        .map_err(|e| Error::Data(format!("{}: {e}", out_png.display())))?;
    println!("wrote {}", out_png.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out_dir, n, size, density, overlap, seed } => {
            cmd_synth(&out_dir, n, size, density, overlap, seed)
        }
        Command::Train { data_dir, out_dir, config, epochs, lr, seed, resume } => {
            cmd_train(&data_dir, &out_dir, config.as_ref(), epochs, lr, seed, resume.as_ref())
        }
        Command::Predict { ckpt, images_dir, out_dir, config, sides } => {
            cmd_predict(&ckpt, &images_dir, &out_dir, config.as_ref(), sides)
        }
        Command::Postprocess { mask_png, edge_png, out_png, threshold, erosion_iters } => {
            cmd_postprocess(&mask_png, &edge_png, &out_png, threshold, erosion_iters)
        }
        Command::Eval { pred_dir, gt_dir, report_path } => cmd_eval(&pred_dir, &gt_dir, &report_path),
        Command::Viz { instances_png, out_png, boundaries } => cmd_viz(&instances_png, &out_png, boundaries),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
