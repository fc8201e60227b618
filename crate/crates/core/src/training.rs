//! Forward + cycle-reconstruction training with two Adam optimizers.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ragan_tensor::{Graph, ParamId, ParamStore, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{AgeSampling, Config, OptimizerMode};
use crate::domain::{sample_target_age, AgeValue, ImageTensor, OptimizerConfig};
use crate::error::{RaganError, Result};
use crate::losses::{total_loss_graph, LossBreakdown};
use crate::model::RaGan;
use crate::weights;

/// Adam with L2-style weight decay (`g + λ·p`) and bias correction.
/// State is kept per parameter and only advanced for parameters that
/// received a gradient.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: OptimizerConfig,
    pub eps: f64,
    slots: BTreeMap<ParamId, AdamSlot<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot<T> {
    pub step: u64,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            eps: 1e-8,
            slots: BTreeMap::new(),
        }
    }

    pub fn slot(&self, id: ParamId) -> Option<&AdamSlot<T>> {
        self.slots.get(&id)
    }

    pub fn slots(&self) -> impl Iterator<Item = (ParamId, &AdamSlot<T>)> {
        self.slots.iter().map(|(k, v)| (*k, v))
    }

    pub fn insert_slot(&mut self, id: ParamId, slot: AdamSlot<T>) {
        self.slots.insert(id, slot);
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) {
        let c = self.config;
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (lr, wd, eps) = (
            c.learning_rate,
            T::from_f64_lossy(c.weight_decay),
            T::from_f64_lossy(self.eps),
        );
        let one = T::one();
        for (id, grad) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let p = store.value_mut(*id);
            let slot = self.slots.entry(*id).or_insert_with(|| AdamSlot {
                step: 0,
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
            });
            slot.step += 1;
            let bc1 = 1.0 - c.beta1.powi(slot.step as i32);
            let bc2 = 1.0 - c.beta2.powi(slot.step as i32);
            let step_size = T::from_f64_lossy(lr / bc1);
            let bc2_sqrt = T::from_f64_lossy(bc2.sqrt());
            let (pd, md, vd) = (p.data_mut(), slot.m.data_mut(), slot.v.data_mut());
            for (i, &g0) in grad.data().iter().enumerate() {
                let g = g0 + wd * pd[i];
                md[i] = b1 * md[i] + (one - b1) * g;
                vd[i] = b2 * vd[i] + (one - b2) * g * g;
                let denom = vd[i].sqrt() / bc2_sqrt + eps;
                pd[i] -= step_size * md[i] / denom;
            }
        }
    }
}

/// Everything besides model weights needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub step: u64,
    pub seed: u64,
    pub forward_opt: Adam<T>,
    pub cycle_opt: Adam<T>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(cfg: &Config) -> Self {
        Self {
            step: 0,
            seed: cfg.seed,
            forward_opt: Adam::new(cfg.forward),
            cycle_opt: Adam::new(cfg.reconstruction),
        }
    }
}

/// One batch: images `[n, 3, 256, 256]` in `[-1, 1]` with their ages.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub source_ages: Vec<f64>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(images: &[ImageTensor<T>], ages: &[AgeValue]) -> Result<Self> {
        if images.is_empty() || images.len() != ages.len() {
            return Err(RaganError::Validation(format!(
                "{} images with {} ages",
                images.len(),
                ages.len()
            )));
        }
        if let Some(bad) = images.iter().position(|i| !i.is_normalized()) {
            return Err(RaganError::Validation(format!(
                "image {bad} is not normalized to [-1, 1]"
            )));
        }
        Ok(Self {
            images: ImageTensor::batch(images)?,
            source_ages: ages.iter().map(|a| a.years()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.source_ages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_ages.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub target_ages: Vec<f64>,
    pub forward: LossBreakdown,
    pub cycle: LossBreakdown,
}

/// Random stream for step `step` (1-based) of a run seeded with `seed`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

pub fn sample_targets(cfg: &Config, rng: &mut ChaCha8Rng, n: usize) -> Result<Vec<f64>> {
    let lo = AgeValue::new(cfg.target_age_min)?;
    let hi = AgeValue::new(cfg.target_age_max)?;
    Ok(match cfg.target_age_sampling {
        AgeSampling::PerImage => (0..n)
            .map(|_| sample_target_age(rng, lo, hi).map(|a| a.years()))
            .collect::<Result<_>>()?,
        AgeSampling::PerBatch => vec![sample_target_age(rng, lo, hi)?.years(); n],
    })
}

fn check_finite(b: &LossBreakdown, step: u64, phase: &'static str) -> Result<()> {
    if b.is_finite() {
        Ok(())
    } else {
        Err(RaganError::NonFiniteLoss {
            step,
            phase,
            breakdown: Box::new(*b),
        })
    }
}

fn add_grads<T: Scalar>(a: &mut Vec<(ParamId, Tensor<T>)>, b: Vec<(ParamId, Tensor<T>)>) {
    let mut map: BTreeMap<ParamId, Tensor<T>> = std::mem::take(a).into_iter().collect();
    for (id, g) in b {
        match map.get_mut(&id) {
            Some(acc) => acc.add_assign(&g),
            None => {
                map.insert(id, g);
            }
        }
    }
    *a = map.into_iter().collect();
}

/// One iteration: sample target ages, forward `x → x′`, cycle `x′ → xʳ`
/// with the ages swapped, score both against `x`, backpropagate both
/// objectives and step the optimizers. Parameters are untouched when
/// either loss is non-finite.
pub fn train_step<T: Scalar>(
    model: &mut RaGan<T>,
    state: &mut TrainState<T>,
    batch: &Batch<T>,
) -> Result<StepLog> {
    let step = state.step + 1;
    let cfg = model.config.clone();
    let mut rng = step_rng(state.seed, step);
    let targets = sample_targets(&cfg, &mut rng, batch.len())?;

    let mut g = Graph::new();
    let x = g.constant(batch.images.clone());
    let fwd = model.forward(&mut g, x, &targets)?;
    let l_fwd = total_loss_graph(
        &mut g,
        &model.store,
        &model.backbones,
        x,
        fwd.x_prime,
        fwd.f_mix,
        &cfg.loss,
    )?;
    let cyc = model.forward(&mut g, fwd.x_prime, &batch.source_ages)?;
    let l_cyc = total_loss_graph(
        &mut g,
        &model.store,
        &model.backbones,
        x,
        cyc.x_prime,
        cyc.f_mix,
        &cfg.loss,
    )?;

    let forward = l_fwd.breakdown(&g, &cfg.loss);
    let cycle = l_cyc.breakdown(&g, &cfg.loss);
    check_finite(&forward, step, "forward")?;
    check_finite(&cycle, step, "cycle")?;

    let g_fwd = g.param_grads(&g.backward(l_fwd.total)?);
    let g_cyc = g.param_grads(&g.backward(l_cyc.total)?);
    match cfg.optimizer_mode {
        OptimizerMode::Dual => {
            state.forward_opt.step(&mut model.store, &g_fwd);
            state.cycle_opt.step(&mut model.store, &g_cyc);
        }
        OptimizerMode::Single => {
            let mut sum = g_fwd;
            add_grads(&mut sum, g_cyc);
            state.cycle_opt.step(&mut model.store, &sum);
        }
    }
    state.step = step;
    Ok(StepLog {
        step,
        target_ages: targets,
        forward,
        cycle,
    })
}

/// Indexed access to training samples.
pub trait SampleSource<T: Scalar> {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<(ImageTensor<T>, AgeValue)>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T: Scalar> SampleSource<T> for Vec<(ImageTensor<T>, AgeValue)> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, index: usize) -> Result<(ImageTensor<T>, AgeValue)> {
        Ok(self[index].clone())
    }
}

/// Sample indices of the batch that step `step` (1-based) trains on. The
/// order within each epoch is a permutation seeded by `(seed, epoch)`, so
/// the schedule depends only on the step number.
pub fn batch_indices(seed: u64, step: u64, len: usize, batch_size: usize) -> Vec<usize> {
    let per_epoch = len.div_ceil(batch_size) as u64;
    let epoch = (step - 1) / per_epoch;
    let within = ((step - 1) % per_epoch) as usize;
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_ba7c);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order[within * batch_size..((within + 1) * batch_size).min(len)].to_vec()
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Total step count to reach, counted from the start of the run.
    pub steps: u64,
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: u64,
    pub log_path: Option<PathBuf>,
}

/// Trains until `state.step == opts.steps`, appending one JSON line per
/// step to the log and writing checkpoints every `checkpoint_every` steps.
pub fn run_training<T: Scalar>(
    model: &mut RaGan<T>,
    state: &mut TrainState<T>,
    data: &dyn SampleSource<T>,
    opts: &RunOptions,
) -> Result<Vec<StepLog>> {
    if data.is_empty() {
        return Err(RaganError::Config("training dataset is empty".into()));
    }
    model.config.validate()?;
    if state.step > opts.steps {
        return Err(RaganError::Config(format!(
            "state is at step {} beyond the requested {}",
            state.step, opts.steps
        )));
    }
    let mut log = match &opts.log_path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| RaganError::io(dir, e))?;
            }
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(state.step > 0)
                .write(true)
                .truncate(state.step == 0)
                .open(p)
                .map_err(|e| RaganError::io(p, e))?;
            Some(std::io::BufWriter::new(f))
        }
        None => None,
    };
    let bs = model.config.batch_size;
    let mut out = Vec::new();
    while state.step < opts.steps {
        let idx = batch_indices(state.seed, state.step + 1, data.len(), bs);
        let mut images = Vec::with_capacity(idx.len());
        let mut ages = Vec::with_capacity(idx.len());
        for i in idx {
            let (img, age) = data.get(i)?;
            images.push(img);
            ages.push(age);
        }
        let entry = train_step(model, state, &Batch::new(&images, &ages)?)?;
        if let (Some(w), Some(p)) = (log.as_mut(), &opts.log_path) {
            let line = serde_json::to_string(&entry).expect("log entry serializes");
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| RaganError::io(p, e))?;
        }
        if let Some(dir) = &opts.checkpoint_dir {
            if opts.checkpoint_every > 0 && state.step.is_multiple_of(opts.checkpoint_every) {
                save_checkpoint(model, state, &dir.join(format!("step{}", state.step)))?;
            }
        }
        out.push(entry);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
    pub forward_steps: BTreeMap<String, u64>,
    pub cycle_steps: BTreeMap<String, u64>,
}

pub const CHECKPOINT_WEIGHTS: &str = "weights.ragw";
pub const CHECKPOINT_MANIFEST: &str = "manifest.json";

fn export_adam<T: Scalar>(
    store: &ParamStore<T>,
    opt: &Adam<T>,
    tag: &str,
    out: &mut weights::NamedArrays,
) -> BTreeMap<String, u64> {
    let mut steps = BTreeMap::new();
    for (id, slot) in opt.slots() {
        let name = &store.get(id).name;
        out.push((format!("adam.{tag}.m.{name}"), slot.m.cast()));
        out.push((format!("adam.{tag}.v.{name}"), slot.v.cast()));
        steps.insert(name.clone(), slot.step);
    }
    steps
}

/// Writes trainable parameters and optimizer moments to
/// `dir/weights.ragw` and the step, seed and config hash to
/// `dir/manifest.json`.
pub fn save_checkpoint<T: Scalar>(
    model: &RaGan<T>,
    state: &TrainState<T>,
    dir: &Path,
) -> Result<()> {
    let mut entries: weights::NamedArrays = model
        .store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(_, p)| (p.name.clone(), p.value.cast()))
        .collect();
    let forward_steps = export_adam(&model.store, &state.forward_opt, "forward", &mut entries);
    let cycle_steps = export_adam(&model.store, &state.cycle_opt, "cycle", &mut entries);
    let manifest = CheckpointManifest {
        step: state.step,
        seed: state.seed,
        config_hash: model.config.hash(),
        forward_steps,
        cycle_steps,
    };
    std::fs::create_dir_all(dir).map_err(|e| RaganError::io(dir, e))?;
    weights::save(&dir.join(CHECKPOINT_WEIGHTS), &entries)?;
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    weights::write_atomic(&dir.join(CHECKPOINT_MANIFEST), &json)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| RaganError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| RaganError::Weights(format!("{}: {e}", path.display())))
}

/// Restores parameters into `model` and returns the optimizer state. The
/// model's config must hash identically to the one that wrote the checkpoint.
pub fn load_checkpoint<T: Scalar>(model: &mut RaGan<T>, dir: &Path) -> Result<TrainState<T>> {
    let manifest = read_manifest(dir)?;
    if manifest.config_hash != model.config.hash() {
        return Err(RaganError::Config(format!(
            "checkpoint config hash {} differs from the current config {}",
            manifest.config_hash,
            model.config.hash()
        )));
    }
    let entries = weights::load(&dir.join(CHECKPOINT_WEIGHTS))?;
    let mut state = TrainState::new(&model.config);
    state.step = manifest.step;
    state.seed = manifest.seed;
    let mut params = Vec::new();
    let mut moments: BTreeMap<(String, String), (Option<Tensor<f32>>, Option<Tensor<f32>>)> =
        BTreeMap::new();
    for (name, t) in entries {
        if let Some(rest) = name.strip_prefix("adam.") {
            let (tag, rest) = rest
                .split_once('.')
                .ok_or_else(|| RaganError::Weights(format!("bad entry `{name}`")))?;
            let (kind, pname) = rest
                .split_once('.')
                .ok_or_else(|| RaganError::Weights(format!("bad entry `{name}`")))?;
            let slot = moments
                .entry((tag.to_string(), pname.to_string()))
                .or_default();
            match kind {
                "m" => slot.0 = Some(t),
                "v" => slot.1 = Some(t),
                _ => return Err(RaganError::Weights(format!("bad entry `{name}`"))),
            }
        } else {
            params.push((name, t));
        }
    }
    let trainable: Vec<String> = model
        .store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(_, p)| p.name.clone())
        .collect();
    for name in &trainable {
        if !params.iter().any(|(n, _)| n == name) {
            return Err(RaganError::Weights(format!("checkpoint lacks `{name}`")));
        }
    }
    weights::import_params(&mut model.store, &params, "", false)?;
    for ((tag, pname), (m, v)) in moments {
        let (Some(m), Some(v)) = (m, v) else {
            return Err(RaganError::Weights(format!(
                "incomplete moments for `{pname}`"
            )));
        };
        let (opt, steps) = match tag.as_str() {
            "forward" => (&mut state.forward_opt, &manifest.forward_steps),
            "cycle" => (&mut state.cycle_opt, &manifest.cycle_steps),
            _ => return Err(RaganError::Weights(format!("unknown optimizer `{tag}`"))),
        };
        let id = model
            .store
            .id(&pname)
            .map_err(|_| RaganError::Weights(format!("unknown parameter `{pname}`")))?;
        let step = *steps
            .get(&pname)
            .ok_or_else(|| RaganError::Weights(format!("no step count for `{pname}`")))?;
        opt.insert_slot(
            id,
            AdamSlot {
                step,
                m: m.cast(),
                v: v.cast(),
            },
        );
    }
    Ok(state)
}
