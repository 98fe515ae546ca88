//! SGD training loop with deep supervision, reduce-on-plateau learning-rate
//! decay, per-epoch checkpoints, and deterministic resumption.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{derive_targets, Sample};
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossBreakdown, LossWeights};
use crate::network::{load_checkpoint, save_checkpoint, Network};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub seed: u64,
    pub mean_bce: bool,
    pub weights: LossWeights,
    pub edge_width: usize,
    pub checkpoint_every: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr: 1e-5,
            momentum: 0.0,
            batch_size: 1,
            epochs: 200,
            plateau_factor: 0.5,
            plateau_patience: 10,
            seed: 0,
            mean_bce: false,
            weights: LossWeights::default(),
            edge_width: 1,
            checkpoint_every: 1,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.plateau_factor) || self.plateau_factor <= 0.0 {
            return Err(Error::Config("plateau_factor must be in (0,1)".into()));
        }
        Ok(())
    }
}

/// Serializable position inside a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub best_loss: f64,
    pub epochs_since_best: usize,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub rng_stream: u64,
}

impl TrainState {
    pub fn fresh(config: &TrainConfig) -> TrainState {
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        TrainState {
            epoch: 0,
            step: 0,
            lr: config.lr,
            best_loss: f64::INFINITY,
            epochs_since_best: 0,
            rng_seed: rng.get_seed(),
            rng_word_pos: rng.get_word_pos(),
            rng_stream: rng.get_stream(),
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_stream(self.rng_stream);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }

    pub fn capture_rng(&mut self, rng: &ChaCha8Rng) {
        self.rng_seed = rng.get_seed();
        self.rng_word_pos = rng.get_word_pos();
        self.rng_stream = rng.get_stream();
    }

    /// Checkpoint trailer bytes (appended after the weight blobs).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(b"TRST");
        b.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        b.extend_from_slice(&(self.step as u64).to_le_bytes());
        b.extend_from_slice(&self.lr.to_le_bytes());
        b.extend_from_slice(&self.best_loss.to_le_bytes());
        b.extend_from_slice(&(self.epochs_since_best as u64).to_le_bytes());
        b.extend_from_slice(&self.rng_seed);
        b.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        b.extend_from_slice(&self.rng_stream.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<TrainState> {
        let expect = 4 + 8 + 8 + 8 + 8 + 8 + 32 + 16 + 8;
        if b.len() != expect || &b[..4] != b"TRST" {
            return Err(Error::Data("malformed trainer state in checkpoint".into()));
        }
        let u64_at = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        Ok(TrainState {
            epoch: u64_at(4) as usize,
            step: u64_at(12) as usize,
            lr: f64_at(20),
            best_loss: f64_at(28),
            epochs_since_best: u64_at(36) as usize,
            rng_seed: b[44..76].try_into().unwrap(),
            rng_word_pos: u128::from_le_bytes(b[76..92].try_into().unwrap()),
            rng_stream: u64_at(92),
        })
    }
}

fn check_finite(b: &LossBreakdown) -> Result<()> {
    let mut terms: Vec<(String, f64)> = vec![
        ("zeta_mask".into(), b.zeta_mask),
        ("tau_edge".into(), b.tau_edge),
    ];
    for (i, (&z, &t)) in b.zeta_sides.iter().zip(&b.tau_sides).enumerate() {
        terms.push((format!("zeta_side{i}"), z));
        terms.push((format!("tau_side{i}"), t));
    }
    for (name, v) in terms {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss term {name} is {v}; aborting")));
        }
    }
    Ok(())
}

/// One SGD update over a batch of samples. Per-sample gradients accumulate
/// and the update uses their mean. Returns the batch-mean loss breakdown
/// values (loss tensor of the last sample).
pub fn sgd_step(
    net: &Network,
    batch: &[&Sample],
    momentum_buf: &mut Vec<Vec<f64>>,
    lr: f64,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Usage("sgd_step: empty batch".into()));
    }
    net.zero_grads();
    let mut last = None;
    for s in batch {
        let out = net.forward(&s.to_tensor(), true)?;
        let targets = derive_targets(&s.instances, config.edge_width)?;
        let breakdown = total_loss(
            &out,
            &targets.mask_tensor(),
            &targets.edge_tensor(),
            &config.weights,
            config.mean_bce,
        )?;
        check_finite(&breakdown)?;
        breakdown.total.backward()?;
        last = Some(breakdown);
    }
    let set = net.param_set();
    if momentum_buf.is_empty() {
        *momentum_buf = set.params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
    }
    let scale = 1.0 / batch.len() as f64;
    for ((_, p), velo) in set.params.iter().zip(momentum_buf.iter_mut()) {
        p.update_data(|i, x, g| {
            velo[i] = config.momentum * velo[i] + g * scale;
            x - lr * velo[i]
        });
    }
    Ok(last.unwrap())
}

fn log_line(log: &mut Option<fs::File>, line: &str) -> Result<()> {
    if let Some(f) = log {
        writeln!(f, "{line}").map_err(|e| Error::Io {
            path: "training log".into(),
            source: e,
        })?;
    }
    Ok(())
}

/// Runs `config.epochs` epochs (continuing from `state` if resuming).
/// Writes `epoch_NNNN.ckpt` plus `latest.ckpt` and a plain-text
/// `train.log` when `config.out_dir` is set.
pub fn train(net: &Network, dataset: &[Sample], config: &TrainConfig, mut state: TrainState) -> Result<TrainState> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    let mut log = match &config.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("train.log");
            let f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some(f)
        }
        None => None,
    };
    let mut rng = state.rng();
    let mut momentum_buf = Vec::new();
    while state.epoch < config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        // Fisher–Yates on the persisted stream so resume replays the
        // same shuffles
        for i in (1..order.len()).rev() {
            order.swap(i, (rng.next_u64() % (i as u64 + 1)) as usize);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let b = sgd_step(net, &batch, &mut momentum_buf, state.lr, config)?;
            let total = b.total_value();
            epoch_loss += total;
            batches += 1;
            state.step += 1;
            log_line(
                &mut log,
                &format!(
                    "epoch {} step {} lr {:.3e} total {:.6} zeta_mask {:.6} tau_edge {:.6} zeta_sides {:.6} tau_sides {:.6}",
                    state.epoch + 1,
                    state.step,
                    state.lr,
                    total,
                    b.zeta_mask,
                    b.tau_edge,
                    b.zeta_sides.iter().sum::<f64>(),
                    b.tau_sides.iter().sum::<f64>()
                ),
            )?;
        }
        epoch_loss /= batches as f64;
        state.epoch += 1;
        if epoch_loss < state.best_loss {
            state.best_loss = epoch_loss;
            state.epochs_since_best = 0;
        } else {
            state.epochs_since_best += 1;
            if state.epochs_since_best >= config.plateau_patience {
                state.lr *= config.plateau_factor;
                state.epochs_since_best = 0;
                log_line(&mut log, &format!("epoch {} lr reduced to {:.3e}", state.epoch, state.lr))?;
            }
        }
        log_line(
            &mut log,
            &format!("epoch {} mean_loss {:.6} lr {:.3e}", state.epoch, epoch_loss, state.lr),
        )?;
        state.capture_rng(&rng);
        if let Some(dir) = &config.out_dir {
            if state.epoch % config.checkpoint_every == 0 || state.epoch == config.epochs {
                let trailer = state.to_bytes();
                save_checkpoint(net, &dir.join(format!("epoch_{:04}.ckpt", state.epoch)), Some(&trailer))?;
                save_checkpoint(net, &dir.join("latest.ckpt"), Some(&trailer))?;
            }
        }
    }
    Ok(state)
}

/// Restores network weights and the training position from a checkpoint.
pub fn resume(net: &Network, path: &Path) -> Result<TrainState> {
    let trailer = load_checkpoint(net, path)?;
    if trailer.is_empty() {
        return Err(Error::Data(format!(
            "{}: checkpoint has no trainer state, cannot resume",
            path.display()
        )));
    }
    TrainState::from_bytes(&trailer)
}
