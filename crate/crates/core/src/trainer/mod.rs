//! Adversarial training loop, checkpoints and evaluation.

mod checkpoint;
mod config;
mod eval;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ea_tensor::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{
    checkpoint_path, decode, encode, load_checkpoint, manifest_path, save_checkpoint, Manifest, Optimizers, TrainState,
};
pub use config::TrainConfig;
pub use eval::{evaluate, evaluate_checkpoint, EvalReport, EvalRow};

use crate::data::{augment, load_dataset, synthetic_triplets, AugmentConfig, Sample, SampleSource, SyntheticConfig};
use crate::error::{Error, Result};
use crate::models::{Interpolator, NormMode, PipelineInputs};
use crate::objective::{
    critic_loss_node, flow_loss_node, generator_adversarial_node, synthesis_loss_node, total_loss, LossParts,
    LossReport,
};

pub const METRICS_HEADER: &str = "epoch,l_syn,l_flow,l_adv_frame,l_adv_edge,total,val_psnr,val_ssim";
pub const METRICS_FILE: &str = "metrics.csv";

/// Generator for everything random in a 1-based epoch: sample order,
/// augmentation and target choice.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x1000 + epoch as u64);
    rng
}

/// One assembled mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub inputs: PipelineInputs,
    pub targets: Tensor<f32>,
}

impl Batch {
    /// Stacks `(sample, target index)` pairs; all samples must share a resolution.
    pub fn assemble(model: &Interpolator, picks: &[(&Sample, usize)]) -> Result<Self> {
        let dims = picks[0].0.dims();
        if let Some((s, _)) = picks.iter().find(|(s, _)| s.dims() != dims) {
            return Err(Error::Dataset(format!(
                "{}: resolution {:?} differs from {:?} within one batch (enable augmentation to crop)",
                s.id,
                s.dims(),
                dims
            )));
        }
        let i0: Vec<Tensor<f32>> = picks.iter().map(|(s, _)| s.i0.to_tensor()).collect();
        let i1: Vec<Tensor<f32>> = picks.iter().map(|(s, _)| s.i1.to_tensor()).collect();
        let gt: Vec<Tensor<f32>> = picks.iter().map(|(s, k)| s.targets[*k].1.to_tensor()).collect();
        let t = picks.iter().map(|(s, k)| s.targets[*k].0).collect();
        let stack = |v: &[Tensor<f32>]| Tensor::stack(&v.iter().collect::<Vec<_>>());
        Ok(Self {
            ids: picks.iter().map(|(s, _)| s.id.clone()).collect(),
            inputs: model.inputs(stack(&i0)?, stack(&i1)?, t)?,
            targets: stack(&gt)?,
        })
    }
}

/// Losses of one generator step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub report: LossReport,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_syn: f64,
    pub l_flow: f64,
    pub l_adv_frame: f64,
    pub l_adv_edge: f64,
    pub total: f64,
    pub validation: Option<(f64, f64)>,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let (p, s) = self
            .validation
            .map(|(p, s)| (p.to_string(), s.to_string()))
            .unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{p},{s}",
            self.epoch, self.l_syn, self.l_flow, self.l_adv_frame, self.l_adv_edge, self.total
        )
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochMetrics>,
    pub checkpoints: Vec<PathBuf>,
    pub state: TrainState,
}

/// Training samples described by the config.
pub fn training_data(config: &TrainConfig) -> Result<Vec<SampleSource>> {
    if config.synthetic_samples > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(0x5eed);
        let synth = SyntheticConfig {
            size: config.synthetic_size,
            ..SyntheticConfig::default()
        };
        return Ok(synthetic_triplets(config.synthetic_samples, synth, &mut rng)
            .into_iter()
            .map(SampleSource::Memory)
            .collect());
    }
    let root = config
        .train_root
        .as_ref()
        .ok_or_else(|| Error::Config("no training data configured".into()))?;
    load_dataset(config.mode, root, config.train_split.as_deref(), config.clip_group)
}

/// Validation samples: the validation root when set, else the training data.
pub fn validation_data(config: &TrainConfig, train: &[SampleSource]) -> Result<Vec<SampleSource>> {
    match &config.val_root {
        Some(root) => load_dataset(config.mode, root, config.val_split.as_deref(), config.clip_group),
        None => Ok(train.to_vec()),
    }
}

/// One generator update followed by one update of each enabled critic on the
/// same batch.
pub fn train_step(state: &mut TrainState, batch: &Batch, config: &TrainConfig, lr: f64, epoch: usize) -> Result<LossReport> {
    let form = config.adversarial_form;
    let model = &state.model;
    let use_frame = config.model.frame_discriminator;
    let use_edge = config.model.edge_discriminator;
    let frame_critic = model.frame_critic.as_ref().filter(|_| use_frame);
    let edge_critic = model.edge_critic.as_ref().filter(|_| use_edge);
    let mut tape = Tape::new();
    for critic in [frame_critic, edge_critic].into_iter().flatten() {
        tape.freeze(critic.store());
    }
    let out = model.forward(&mut tape, &batch.inputs)?;
    let gt = tape.input(batch.targets.clone());
    let l_syn = synthesis_loss_node(&mut tape, out.prediction, gt);
    let l_flow = flow_loss_node(&mut tape, out.i0, out.i1, out.f01, out.f10);
    let w = config.weights;
    let a = tape.scale(l_syn, w.synthesis as f32);
    let b = tape.scale(l_flow, w.flow as f32);
    let mut total = tape.add(a, b);
    let mut adv = [0.0f64; 2];
    let fake_edges = edge_critic.map(|_| tape.soft_edges(out.prediction));
    let critics = [frame_critic.map(|c| (c, out.prediction)), edge_critic.zip(fake_edges)];
    for (slot, entry) in adv.iter_mut().zip(critics) {
        if let Some((critic, fake)) = entry {
            let term = generator_adversarial_node(&mut tape, critic, fake, form, NormMode::Train);
            *slot = tape.value(term).data()[0] as f64;
            if w.adversarial != 0.0 {
                let scaled = tape.scale(term, w.adversarial as f32);
                total = tape.add(total, scaled);
            }
        }
    }
    let parts = LossParts {
        l_syn: tape.value(l_syn).data()[0] as f64,
        l_flow: tape.value(l_flow).data()[0] as f64,
        l_adv_frame: adv[0],
        l_adv_edge: adv[1],
    };
    let report = total_loss(parts, w)?;
    let recorded = tape.value(total).data()[0];
    if !report.total.is_finite() || !recorded.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch,
            step: state.step + 1,
            samples: batch.ids.clone(),
        });
    }
    let grads = tape.backward(total);
    let flow_grads = grads.for_store(state.model.flow.store());
    let refine_grads = state.model.refiner.as_ref().map(|r| grads.for_store(r.store()));
    let prediction = tape.value(out.prediction).clone();
    drop(tape);
    state.optim.flow.step(state.model.flow.store_mut(), &flow_grads, lr);
    if let (Some(r), Some(opt), Some(g)) = (state.model.refiner.as_mut(), state.optim.refiner.as_mut(), refine_grads) {
        opt.step(r.store_mut(), &g, lr);
    }

    let critics = [
        (state.model.frame_critic.as_mut().filter(|_| use_frame), state.optim.frame_critic.as_mut(), false),
        (state.model.edge_critic.as_mut().filter(|_| use_edge), state.optim.edge_critic.as_mut(), true),
    ];
    for (critic, opt, edges) in critics {
        let (Some(critic), Some(opt)) = (critic, opt) else { continue };
        let mut tape = Tape::new();
        let mut real = tape.input(batch.targets.clone());
        let mut fake = tape.input(prediction.clone());
        if edges {
            real = tape.soft_edges(real);
            fake = tape.soft_edges(fake);
        }
        let (loss, stats) = critic_loss_node(&mut tape, critic, real, fake, form);
        if !tape.value(loss).all_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step: state.step + 1,
                samples: batch.ids.clone(),
            });
        }
        let g = tape.backward(loss).for_store(critic.store());
        drop(tape);
        opt.step(critic.store_mut(), &g, lr);
        let layers = stats.len() / 2;
        critic.update_running_stats(&stats[..layers]);
        critic.update_running_stats(&stats[layers..]);
    }
    state.step += 1;
    Ok(report)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Write(path.to_path_buf(), e.to_string()))
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::Write(path.to_path_buf(), e.to_string()))?;
    writeln!(f, "{line}").map_err(|e| Error::Write(path.to_path_buf(), e.to_string()))
}

/// Keeps the metrics header and the rows of epochs up to `epoch`.
fn truncate_metrics(path: &Path, epoch: usize) -> Result<()> {
    let kept: Vec<String> = match fs::read_to_string(path) {
        Ok(text) => text
            .lines()
            .skip(1)
            .filter(|l| l.split(',').next().and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e <= epoch))
            .map(str::to_string)
            .collect(),
        Err(_) => Vec::new(),
    };
    let mut text = format!("{METRICS_HEADER}\n");
    for l in kept {
        text.push_str(&l);
        text.push('\n');
    }
    write_text(path, &text)
}

/// Trains from scratch.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let model = Interpolator::build(config.model.clone(), config.seed)?;
    run(config, TrainState::new(model, config.mode, config.seed))
}

/// Continues a run from a checkpoint written by [`train`] with the same config.
pub fn resume(config: &TrainConfig, checkpoint: impl AsRef<Path>, force: bool) -> Result<TrainOutcome> {
    config.validate()?;
    let state = load_checkpoint(checkpoint.as_ref(), Some(&config.model), force)?;
    if state.mode != config.mode {
        return Err(Error::Config(format!("checkpoint was trained for {}, config asks for {}", state.mode, config.mode)));
    }
    run(config, state)
}

fn run(config: &TrainConfig, mut state: TrainState) -> Result<TrainOutcome> {
    let train_set = training_data(config)?;
    if train_set.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let val_set = validation_data(config, &train_set)?;
    let run_dir = config.run_dir.clone();
    fs::create_dir_all(&run_dir).map_err(|e| Error::Io(run_dir.clone(), e))?;
    write_text(&run_dir.join("config.txt"), &config.to_text())?;
    let metrics_path = run_dir.join(METRICS_FILE);
    truncate_metrics(&metrics_path, state.epoch)?;

    let augment_cfg = AugmentConfig {
        crop: config.crop,
        ..AugmentConfig::default()
    };
    let n = train_set.len();
    let bs = config.batch_size.min(n);
    let steps_per_epoch = if config.steps_per_epoch > 0 { config.steps_per_epoch } else { n.div_ceil(bs) };
    let cached: Vec<Option<Sample>> = train_set
        .iter()
        .map(|s| match s {
            SampleSource::Memory(m) => Some(m.clone()),
            _ => None,
        })
        .collect();

    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut checkpoints = Vec::new();
    let mut stop = false;
    for epoch in state.epoch + 1..=config.epochs {
        let lr = config.learning_rate_at(epoch);
        let mut rng = epoch_rng(config.seed, epoch);
        let mut order: Vec<usize> = Vec::new();
        let mut sums = [0.0f64; 5];
        let mut taken = 0;
        for _ in 0..steps_per_epoch {
            let mut picks = Vec::with_capacity(bs);
            while picks.len() < bs {
                if order.is_empty() {
                    order = (0..n).collect();
                    order.shuffle(&mut rng);
                    order.reverse();
                }
                picks.push(order.pop().unwrap());
            }
            let mut samples = Vec::with_capacity(bs);
            for &i in &picks {
                let raw = match &cached[i] {
                    Some(s) => s.clone(),
                    None => train_set[i].load()?,
                };
                let s = if config.augment { augment(&raw, &mut rng, augment_cfg)? } else { raw };
                let k = rng.gen_range(0..s.targets.len());
                samples.push((s, k));
            }
            let refs: Vec<(&Sample, usize)> = samples.iter().map(|(s, k)| (s, *k)).collect();
            let batch = Batch::assemble(&state.model, &refs)?;
            let report = match train_step(&mut state, &batch, config, lr, epoch) {
                Err(e @ Error::NonFiniteLoss { .. }) => {
                    let dump = run_dir.join("nonfinite_batch.txt");
                    let _ = write_text(&dump, &format!("epoch = {epoch}\nids = {}\n", batch.ids.join(",")));
                    return Err(e);
                }
                other => other?,
            };
            for (acc, v) in sums.iter_mut().zip([report.l_syn, report.l_flow, report.l_adv_frame, report.l_adv_edge, report.total]) {
                *acc += v;
            }
            taken += 1;
            steps.push(StepRecord {
                epoch,
                step: state.step,
                report,
            });
            log::debug!("epoch {epoch} step {}: total {:.6}", state.step, report.total);
            if config.max_steps > 0 && state.step >= config.max_steps {
                stop = true;
                break;
            }
        }
        state.epoch = epoch;
        let last = stop || epoch == config.epochs;
        let validate = config.validation_interval > 0 && (epoch % config.validation_interval == 0 || last);
        let validation = if validate {
            let r = evaluate(&state.model, &val_set)?;
            Some((r.mean_psnr, r.mean_ssim))
        } else {
            None
        };
        if config.target_psnr > 0.0 && validation.is_some_and(|(p, _)| p >= config.target_psnr) {
            log::info!("validation PSNR reached {} dB at epoch {epoch}", config.target_psnr);
            stop = true;
        }
        let mean = |v: f64| v / taken.max(1) as f64;
        let metrics = EpochMetrics {
            epoch,
            l_syn: mean(sums[0]),
            l_flow: mean(sums[1]),
            l_adv_frame: mean(sums[2]),
            l_adv_edge: mean(sums[3]),
            total: mean(sums[4]),
            validation,
        };
        append_line(&metrics_path, &metrics.csv_row())?;
        log::info!("{}", metrics.csv_row());
        epochs.push(metrics);
        if epoch % config.checkpoint_interval == 0 || last || stop {
            let path = checkpoint_path(&run_dir, epoch);
            save_checkpoint(&state, &path)?;
            checkpoints.push(path);
        }
        if stop {
            break;
        }
    }
    Ok(TrainOutcome {
        run_dir,
        steps,
        epochs,
        checkpoints,
        state,
    })
}
