//! Optimisation: AdamW, the epoch loop, checkpoints and metric logs.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Box3D;
use crate::loss::{detection_loss, LossBreakdown, LossConfig};
use crate::matching::BoxNorm;
use crate::model::{Model, ModelConfig, ModelInput};
use crate::nn::{ParamStore, Session};
use crate::scalar::Scalar;
use crate::synthetic::SensorRig;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// Write a numbered checkpoint every this many epochs (0: only `last`).
    pub checkpoint_every: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 4,
            epochs: 20,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 10.0,
            seed: 0,
            checkpoint_every: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Invalid("Adam betas must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return Err(Error::Invalid("weight_decay and clip_norm must be non-negative".into()));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = T::of(1.0 / (1.0 - b1.powf(t)));
        let c2 = T::of(1.0 / (1.0 - b2.powf(t)));
        let lr = T::of(cfg.learning_rate);
        let decay = T::one() - lr * T::of(cfg.weight_decay);
        let (b1, b2, eps) = (T::of(b1), T::of(b2), T::of(cfg.adam_eps));
        let one = T::one();
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let pd = p.value.data_mut();
            for (((w, &g), m), v) in pd.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mh = *m * c1;
                let vh = *v * c2;
                *w = *w * decay - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Scale `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.squared_norm().f64()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / (norm + 1e-12));
        for g in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

/// One prepared training frame.
#[derive(Debug, Clone)]
pub struct TrainSample<T> {
    pub name: String,
    pub input: ModelInput<T>,
    pub targets: Vec<Box3D<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub batch_seed: u64,
    pub class_loss: f64,
    pub box_loss: f64,
    pub total: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub class_loss: f64,
    pub box_loss: f64,
    pub total: f64,
    pub learning_rate: f64,
    pub seconds: f64,
}

/// Serializable ChaCha position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    /// Word position, as a decimal string (it is a u128).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Invalid(format!("bad rng word position '{}'", self.word_pos)))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Gradient and loss of one sample.
pub fn sample_gradients<T: Scalar>(
    model: &Model<T>,
    sample: &TrainSample<T>,
    loss: &LossConfig,
    dropout_seed: u64,
) -> Result<(Vec<Tensor<T>>, LossBreakdown)> {
    let mut s = Session::training(&model.params, model.config.attention.dropout, dropout_seed);
    let cycles = model.forward(&mut s, &sample.input)?;
    let norm = BoxNorm {
        range_max: model.layout.fov.range_max,
        size_scale: loss.size_scale,
    };
    let l = detection_loss(&mut s, &cycles, &sample.targets, loss, &norm)?;
    let grads = s.tape.backward(l.total);
    Ok((s.param_grads(&grads), l.breakdown))
}

/// Model, optimiser and data-order state.
pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub optimizer: AdamW<T>,
    pub config: TrainConfig,
    pub epoch: usize,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            optimizer: AdamW::new(&model.params),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            config,
            epoch: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.optimizer.step
    }

    /// One optimiser step on `batch`.
    pub fn train_step(&mut self, batch: &[&TrainSample<T>], batch_seed: u64) -> Result<StepRecord> {
        let model = &self.model;
        let loss_cfg = self.config.loss;
        let results: Vec<_> = batch
            .par_iter()
            .enumerate()
            .map(|(i, smp)| sample_gradients(model, smp, &loss_cfg, batch_seed.wrapping_add(i as u64)))
            .collect::<Result<_>>()?;
        let inv = 1.0 / batch.len() as f64;
        let mut grads: Option<Vec<Tensor<T>>> = None;
        let (mut cls, mut bx) = (0.0, 0.0);
        // fixed summation order keeps steps reproducible under any thread count
        for (g, b) in results {
            cls += b.class_loss;
            bx += b.box_loss;
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, g)| a.add_assign(g)),
            }
        }
        let breakdown = crate::loss::total_loss(cls * inv, bx * inv);
        let step = self.optimizer.step + 1;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.epoch,
                step: step as usize,
                batch_seed,
            });
        }
        let mut grads = grads.expect("non-empty batch");
        for g in &mut grads {
            g.scale_assign(T::of(inv));
        }
        let grad_norm = clip_grad_norm(&mut grads, self.config.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.epoch,
                step: step as usize,
                batch_seed,
            });
        }
        self.optimizer.update(&mut self.model.params, &grads, &self.config);
        Ok(StepRecord {
            epoch: self.epoch,
            step,
            batch_seed,
            class_loss: breakdown.class_loss,
            box_loss: breakdown.box_loss,
            total: breakdown.total,
            grad_norm,
        })
    }

    /// One pass over `data` in a freshly shuffled order.
    pub fn train_epoch(
        &mut self,
        data: &[TrainSample<T>],
        mut on_step: impl FnMut(&StepRecord) -> Result<()>,
    ) -> Result<EpochRecord> {
        if data.is_empty() {
            return Err(Error::Invalid("training set is empty".into()));
        }
        let start = Instant::now();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sum = LossBreakdown::default();
        let mut steps = 0u64;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&TrainSample<T>> = chunk.iter().map(|&i| &data[i]).collect();
            let batch_seed = self.rng.random();
            let rec = self.train_step(&batch, batch_seed)?;
            on_step(&rec)?;
            sum = sum + crate::loss::total_loss(rec.class_loss, rec.box_loss);
            steps += 1;
        }
        let n = steps as f64;
        let rec = EpochRecord {
            epoch: self.epoch,
            steps,
            class_loss: sum.class_loss / n,
            box_loss: sum.box_loss / n,
            total: sum.total / n,
            learning_rate: self.config.learning_rate,
            seconds: start.elapsed().as_secs_f64(),
        };
        self.epoch += 1;
        Ok(rec)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model_config: self.model.config.clone(),
            rig: self.model.rig.clone(),
            train_config: self.config.clone(),
            epoch: self.epoch,
            rng: RngState::capture(&self.rng),
            params: self.model.params.clone(),
            optimizer: Some(self.optimizer.clone()),
        }
    }

    /// Rebuild a trainer from a checkpoint holding optimiser state.
    pub fn resume(ckpt: Checkpoint<T>) -> Result<Self> {
        let mut model = Model::new(&ckpt.model_config, &ckpt.rig)?;
        model.params.load_from(&ckpt.params)?;
        let optimizer = ckpt.optimizer.ok_or_else(|| Error::Invalid("checkpoint has no optimizer state".into()))?;
        Ok(Self {
            model,
            optimizer,
            config: ckpt.train_config,
            epoch: ckpt.epoch,
            rng: ckpt.rng.restore()?,
        })
    }
}

/// Where `train_loop` writes its artifacts.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }

    pub fn steps(&self) -> PathBuf {
        self.dir.join("steps.jsonl")
    }

    pub fn last_checkpoint(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }

    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch:04}.ckpt"))
    }
}

fn append_json<S: Serialize>(path: &Path, record: &S) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

/// Train until `config.epochs` epochs have run in total, logging one record
/// per epoch to `metrics.jsonl`, one per step to `steps.jsonl`, and saving
/// `last.ckpt` after every epoch.
pub fn train_loop<T: Scalar>(
    trainer: &mut Trainer<T>,
    data: &[TrainSample<T>],
    outputs: Option<&TrainOutputs>,
) -> Result<Vec<EpochRecord>> {
    if let Some(o) = outputs {
        fs::create_dir_all(&o.dir)?;
    }
    let mut records = Vec::new();
    while trainer.epoch < trainer.config.epochs {
        let rec = trainer.train_epoch(data, |step| match outputs {
            Some(o) => append_json(&o.steps(), step),
            None => Ok(()),
        })?;
        if let Some(o) = outputs {
            append_json(&o.metrics(), &rec)?;
            let ckpt = trainer.checkpoint();
            ckpt.save(&o.last_checkpoint())?;
            let every = trainer.config.checkpoint_every;
            if every > 0 && trainer.epoch % every == 0 {
                ckpt.save(&o.epoch_checkpoint(trainer.epoch))?;
            }
        }
        records.push(rec);
    }
    Ok(records)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to rebuild a model and continue training exactly.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model_config: ModelConfig,
    pub rig: SensorRig,
    pub train_config: TrainConfig,
    /// Epochs completed.
    pub epoch: usize,
    pub rng: RngState,
    pub params: ParamStore<T>,
    pub optimizer: Option<AdamW<T>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    dtype: String,
    model_config: ModelConfig,
    rig: SensorRig,
    train_config: TrainConfig,
    epoch: usize,
    rng: RngState,
    optimizer_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Layout (little-endian):
    ///
    /// ```text
    /// magic b"RCKP", u32 version, u64 header length, JSON header,
    /// then every tensor listed in the header as raw values of `dtype`
    /// (parameters, then Adam first moments, then second moments).
    /// ```
    ///
    /// Parameter names carry the stream/module group as their first path
    /// component, e.g. `camera.encoder.stem.weight`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(TensorEntry, &Tensor<T>)> = Vec::new();
        let group_of = |name: &str| name.split('.').next().unwrap_or("").to_string();
        for p in self.params.iter() {
            tensors.push((
                TensorEntry {
                    group: group_of(&p.name),
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                },
                &p.value,
            ));
        }
        if let Some(opt) = &self.optimizer {
            for (kind, list) in [("adam_m", &opt.m), ("adam_v", &opt.v)] {
                for (p, t) in self.params.iter().zip(list) {
                    tensors.push((
                        TensorEntry {
                            group: kind.into(),
                            name: format!("{kind}.{}", p.name),
                            shape: t.shape().to_vec(),
                        },
                        t,
                    ));
                }
            }
        }
        let header = CheckpointHeader {
            dtype: T::DTYPE.into(),
            model_config: self.model_config.clone(),
            rig: self.rig.clone(),
            train_config: self.train_config.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            tensors: tensors.iter().map(|(e, _)| e.clone()).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        // write to a sibling then rename, so a crash never leaves a torn file
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(CHECKPOINT_MAGIC)?;
            w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
            w.write_u64::<LittleEndian>(json.len() as u64)?;
            w.write_all(&json)?;
            let mut buf = Vec::new();
            for (_, t) in &tensors {
                buf.clear();
                for &v in t.data() {
                    v.write_le(&mut buf);
                }
                w.write_all(&buf)?;
            }
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
            expected: CHECKPOINT_VERSION,
        };
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("file too short".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let len = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated header".into()))? as usize;
        if len > 1 << 30 {
            return Err(bad("implausible header length".into()));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|_| bad("truncated header".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&json).map_err(|e| bad(format!("corrupt header: {e}")))?;
        let read_one = |r: &mut BufReader<File>| -> Result<T> {
            let v = match header.dtype.as_str() {
                "f32" => r.read_f32::<LittleEndian>().map(|x| T::of(x as f64)),
                "f64" => r.read_f64::<LittleEndian>().map(T::of),
                other => return Err(bad(format!("unknown dtype {other}"))),
            };
            v.map_err(|_| bad("truncated tensor data".into()))
        };
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let data = (0..n).map(|_| read_one(&mut r)).collect::<Result<Vec<T>>>()?;
            let t = Tensor::from_vec(&e.shape, data)?;
            match e.group.as_str() {
                "adam_m" => m.push(t),
                "adam_v" => v.push(t),
                _ => {
                    params.add(e.name.clone(), t);
                }
            }
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes after tensor data".into()));
        }
        let optimizer = match header.optimizer_step {
            Some(step) if m.len() == params.len() && v.len() == params.len() => Some(AdamW { step, m, v }),
            Some(_) => return Err(bad("optimizer state does not match parameters".into())),
            None => None,
        };
        Ok(Self {
            model_config: header.model_config,
            rig: header.rig,
            train_config: header.train_config,
            epoch: header.epoch,
            rng: header.rng,
            params,
            optimizer,
        })
    }

    /// Model with the stored weights.
    pub fn model(&self) -> Result<Model<T>> {
        let mut model = Model::new(&self.model_config, &self.rig)?;
        model.params.load_from(&self.params)?;
        Ok(model)
    }
}
