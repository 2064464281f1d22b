//! Mini-batch contrastive training with Adam, checkpointing and resumable,
//! seeded data order.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, Dtype, TensorEntry};
use crate::contrastive::{logit_matrix, symmetric_loss, PairBatch, PairExample, Temperature};
use crate::encoder::{embed_on_tape, Encoder, EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::tokenizer::{Side, Vocabulary};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CPTE";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Fraction of `total_steps` spent on linear warmup.
    pub warmup_frac: f64,
    pub total_steps: u64,
    pub seed: u64,
    pub grad_clip_norm: f64,
    /// Intermediate checkpoint interval; 0 disables.
    pub eval_every: u64,
    /// Initial logit scale `exp(tau)`.
    pub init_scale: f64,
    pub max_scale: f64,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            warmup_frac: 0.1,
            total_steps: 1000,
            seed: 0,
            grad_clip_norm: 1.0,
            eval_every: 0,
            init_scale: 1.0 / 0.07,
            max_scale: 100.0,
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config("learning_rate and grad_clip_norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("warmup_frac must lie in [0, 1]".into()));
        }
        if !(self.init_scale > 0.0 && self.init_scale <= self.max_scale) {
            return Err(Error::Config("need 0 < init_scale <= max_scale".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        ((self.total_steps as f64 * self.warmup_frac).ceil() as u64).max(1)
    }

    /// Linear warmup, then constant.
    pub fn lr_at(&self, step: u64) -> f64 {
        let w = self.warmup_steps();
        self.learning_rate * ((step + 1) as f64 / w as f64).min(1.0)
    }
}

/// Position in the seeded, shuffle-per-epoch stream of batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataOrder {
    pub seed: u64,
    pub epoch: u64,
    pub cursor: usize,
}

impl DataOrder {
    /// Permutation for the current epoch; each epoch has its own ChaCha stream.
    fn permutation(&self, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch + 1);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx
    }
}

/// Adam moments for every encoder tensor followed by the temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    fn zeros(sizes: impl Iterator<Item = usize>) -> Self {
        let m: Vec<Vec<f64>> = sizes.map(|n| vec![0.0; n]).collect();
        AdamState {
            t: 0,
            v: m.clone(),
            m,
        }
    }

    fn update(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powf(self.t as f64);
        let bc2 = 1.0 - cfg.beta2.powf(self.t as f64);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Everything needed to resume training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub encoder: Encoder,
    pub temperature: Temperature,
    pub optimizer: AdamState,
    pub step: u64,
    pub data_order: DataOrder,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    config: TrainConfig,
    vocab: Vocabulary,
    step: u64,
    max_scale: f64,
    adam_t: u64,
    data_order: DataOrder,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    /// Fresh state: random weights, zero optimizer moments, step 0.
    pub fn initial(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::random(config.encoder.clone(), config.seed)?;
        let sizes = encoder
            .weights()
            .tensors()
            .iter()
            .map(Tensor::len)
            .chain(std::iter::once(1));
        Ok(Checkpoint {
            config: config.clone(),
            temperature: Temperature::new(config.init_scale.ln(), config.max_scale),
            optimizer: AdamState::zeros(sizes),
            step: 0,
            data_order: DataOrder {
                seed: config.seed,
                epoch: 0,
                cursor: 0,
            },
            encoder,
        })
    }

    pub fn to_bytes(&self, dtype: Dtype) -> Result<Vec<u8>> {
        let names = self.encoder.weights().names();
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (n, t) in self.encoder.weights().named() {
            tensors.push((n.to_string(), t.clone()));
        }
        tensors.push(("tau".into(), Tensor::scalar(self.temperature.tau)));
        let opt_names: Vec<&str> = names.iter().map(String::as_str).chain(["tau"]).collect();
        for (kind, moments) in [("m", &self.optimizer.m), ("v", &self.optimizer.v)] {
            for (name, mom) in opt_names.iter().zip(moments) {
                let shape = if *name == "tau" {
                    vec![]
                } else {
                    vec![mom.len()]
                };
                tensors.push((format!("adam.{kind}.{name}"), Tensor::new(shape, mom.clone())?));
            }
        }
        let (manifest, payload) = container::pack(tensors.iter().map(|(n, t)| (n.clone(), t)), dtype);
        let meta = CheckpointMeta {
            config: self.config.clone(),
            vocab: self.encoder.vocab().clone(),
            step: self.step,
            max_scale: self.temperature.max_scale,
            adam_t: self.optimizer.t,
            data_order: self.data_order,
            tensors: manifest,
        };
        let json = serde_json::to_vec(&meta)?;
        Ok(container::frame(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &json, &payload))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, payload) = container::unframe(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let meta: CheckpointMeta =
            serde_json::from_slice(meta).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        meta.config.validate()?;
        let tensors = container::unpack(&meta.tensors, payload)?;
        let mut by_name: std::collections::BTreeMap<String, Tensor> = tensors.into_iter().collect();
        let layout = crate::encoder::parameter_layout(&meta.config.encoder);
        let mut weights = Vec::with_capacity(layout.len());
        for (name, _) in &layout {
            let t = by_name
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))?;
            weights.push((name.clone(), t));
        }
        let take = |map: &mut std::collections::BTreeMap<String, Tensor>, name: &str| {
            map.remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))
        };
        let tau = take(&mut by_name, "tau")?;
        if !tau.is_scalar() {
            return Err(Error::Format("tau must be a scalar".into()));
        }
        let mut m = Vec::new();
        let mut v = Vec::new();
        for name in layout.iter().map(|(n, _)| n.as_str()).chain(["tau"]) {
            let want = if name == "tau" {
                1
            } else {
                weights.iter().find(|(n, _)| n == name).map(|(_, t)| t.len()).unwrap_or(0)
            };
            for (kind, dst) in [("m", &mut m), ("v", &mut v)] {
                let t = take(&mut by_name, &format!("adam.{kind}.{name}"))?;
                if t.len() != want {
                    return Err(Error::Format(format!("adam.{kind}.{name} has wrong length")));
                }
                dst.push(t.into_data());
            }
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra}")));
        }
        let weights = EncoderWeights::from_named(&meta.config.encoder, weights)?;
        let encoder = Encoder::new(meta.config.encoder.clone(), meta.vocab, weights)?;
        Ok(Checkpoint {
            config: meta.config,
            encoder,
            temperature: Temperature {
                tau: tau.item(),
                max_scale: meta.max_scale,
            },
            optimizer: AdamState { t: meta.adam_t, m, v },
            step: meta.step,
            data_order: meta.data_order,
        })
    }
}

/// Writes a lossless (`f64`) checkpoint.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    save_checkpoint_as(ckpt, path, Dtype::F64)
}

/// Writes a checkpoint with the given tensor precision. `F32` halves the
/// size but resuming from it is no longer bit-exact.
pub fn save_checkpoint_as(ckpt: &Checkpoint, path: &Path, dtype: Dtype) -> Result<()> {
    container::write_atomic(path, &ckpt.to_bytes(dtype)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&container::read_file(path)?)
}

/// Per-step training log entry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    /// Number of completed updates, counting this one.
    pub step: u64,
    pub loss: f64,
    /// Logit scale used in this step's forward pass.
    pub exp_tau: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

pub fn metrics_csv(metrics: &[StepMetrics]) -> String {
    let mut s = String::from("step,loss,exp_tau,grad_norm\n");
    for m in metrics {
        s.push_str(&format!("{},{},{},{}\n", m.step, m.loss, m.exp_tau, m.grad_norm));
    }
    s
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let total: f64 = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if total > max_norm {
        let s = max_norm / total;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    total
}

/// Drives [`Checkpoint`] state forward over a fixed dataset.
pub struct Trainer<'a> {
    state: Checkpoint,
    data: &'a [PairExample],
    order: Vec<usize>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &TrainConfig, data: &'a [PairExample]) -> Result<Self> {
        Trainer::resume(Checkpoint::initial(config)?, data)
    }

    pub fn resume(state: Checkpoint, data: &'a [PairExample]) -> Result<Self> {
        let m = state.config.batch_size;
        if data.len() < m {
            return Err(Error::invalid(format!(
                "batch size {m} exceeds dataset size {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|p| p.x.is_empty() || p.y.is_empty()) {
            return Err(Error::Data(format!("pair {} has an empty side", bad.pair_id)));
        }
        let order = state.data_order.permutation(data.len());
        Ok(Trainer { state, data, order })
    }

    pub fn state(&self) -> &Checkpoint {
        &self.state
    }

    pub fn into_state(self) -> Checkpoint {
        self.state
    }

    pub fn step_count(&self) -> u64 {
        self.state.step
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let m = self.state.config.batch_size;
        let order = &mut self.state.data_order;
        if order.cursor + m > self.data.len() {
            order.epoch += 1;
            order.cursor = 0;
            self.order = order.permutation(self.data.len());
        }
        let batch = self.order[order.cursor..order.cursor + m].to_vec();
        order.cursor += m;
        batch
    }

    /// One forward/backward/update.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let idx = self.next_batch();
        let batch = PairBatch {
            examples: idx.iter().map(|&i| &self.data[i]).collect(),
        };
        let enc = &self.state.encoder;
        let x_seqs = batch
            .x_side_texts()
            .iter()
            .map(|t| enc.tokenize(t.as_bytes(), Side::X))
            .collect::<Result<Vec<_>>>()?;
        let (y_texts, _) = batch.y_side_texts();
        let y_seqs = y_texts
            .iter()
            .map(|t| enc.tokenize(t.as_bytes(), Side::Y))
            .collect::<Result<Vec<_>>>()?;

        let mut tape = Tape::new();
        let params = enc.weights().bind(&mut tape, true);
        let tau = self.state.temperature.bind(&mut tape, true);
        let xv = embed_on_tape(&mut tape, &params, enc.config(), enc.vocab(), &x_seqs)?;
        let yv = embed_on_tape(&mut tape, &params, enc.config(), enc.vocab(), &y_seqs)?;
        let logits = logit_matrix(&mut tape, xv, yv, tau)?;
        let loss_var = symmetric_loss(&mut tape, logits)?;
        let loss = tape.value(loss_var).item();
        let exp_tau = self.state.temperature.scale();
        tape.backward(loss_var)?;

        let mut grads: Vec<Vec<f64>> = params
            .iter()
            .chain(std::iter::once(&tau))
            .map(|&v| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
            })
            .collect();
        drop(tape);
        let max_param_grad = grads.iter().flatten().fold(0.0f64, |a, g| a.max(g.abs()));
        let grad_norm = clip_grad_norm(&mut grads, self.state.config.grad_clip_norm);
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                step: self.state.step,
                exp_tau,
                grad_norm,
                max_param_grad,
            });
        }

        let lr = self.state.config.lr_at(self.state.step);
        let state = &mut self.state;
        let mut tau_value = [state.temperature.tau];
        {
            let mut slices: Vec<&mut [f64]> = state
                .encoder
                .weights_mut()
                .tensors_mut()
                .iter_mut()
                .map(Tensor::data_mut)
                .collect();
            slices.push(&mut tau_value);
            state.optimizer.update(&mut slices, &grads, lr, &state.config);
        }
        state.temperature.tau = tau_value[0];
        state.temperature.clamp();
        state.step += 1;
        Ok(StepMetrics {
            step: state.step,
            loss,
            exp_tau,
            grad_norm,
        })
    }

    /// Steps until `until` total updates, calling `on_step` after each one.
    pub fn run_until<F>(&mut self, until: u64, mut on_step: F) -> Result<Vec<StepMetrics>>
    where
        F: FnMut(&Checkpoint, &StepMetrics) -> Result<()>,
    {
        let mut out = Vec::new();
        while self.state.step < until {
            let m = self.step()?;
            on_step(&self.state, &m)?;
            out.push(m);
        }
        Ok(out)
    }
}

/// Trains for `config.total_steps` from a fresh initialisation.
pub fn train(config: &TrainConfig, data: &[PairExample]) -> Result<(Checkpoint, Vec<StepMetrics>)> {
    let mut trainer = Trainer::new(config, data)?;
    let metrics = trainer.run_until(config.total_steps, |_, m| {
        log::debug!("step {} loss {:.5} exp_tau {:.3}", m.step, m.loss, m.exp_tau);
        Ok(())
    })?;
    Ok((trainer.into_state(), metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_pairs, SyntheticSpec};

    fn tiny_config(steps: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            total_steps: steps,
            learning_rate: 3e-3,
            encoder: EncoderConfig {
                n_layers: 1,
                n_heads: 2,
                d_model: 16,
                d_ff: 32,
                max_seq_len: 24,
                ..EncoderConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn data(n: usize) -> Vec<PairExample> {
        synthetic_pairs(&SyntheticSpec {
            n_pairs: n,
            ..SyntheticSpec::default()
        })
    }

    #[test]
    fn lr_schedule_warms_up_then_holds() {
        let cfg = TrainConfig {
            total_steps: 100,
            learning_rate: 1.0,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.warmup_steps(), 10);
        assert!((cfg.lr_at(0) - 0.1).abs() < 1e-15);
        assert!((cfg.lr_at(9) - 1.0).abs() < 1e-15);
        assert_eq!(cfg.lr_at(50), 1.0);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = vec![vec![3.0, 4.0], vec![12.0]];
        let pre = clip_grad_norm(&mut g, 1.0);
        assert!((pre - 13.0).abs() < 1e-12);
        let post: f64 = g.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        assert!(post <= 1.0 + 1e-9);
        let mut small = vec![vec![0.1]];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }

    #[test]
    fn batch_larger_than_data_is_rejected() {
        let d = data(3);
        assert!(Trainer::new(&tiny_config(1), &d).is_err());
    }

    #[test]
    fn epochs_cover_every_example_once() {
        let d = data(10);
        let mut cfg = tiny_config(1);
        cfg.batch_size = 3;
        let mut t = Trainer::new(&cfg, &d).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|_| t.next_batch()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert_eq!(t.state.data_order.epoch, 0);
        let next = t.next_batch();
        assert_eq!(t.state.data_order.epoch, 1);
        assert_eq!(next.len(), 3);
    }

    #[test]
    fn same_seed_same_curve_and_bytes() {
        let d = data(40);
        let (c1, m1) = train(&tiny_config(6), &d).unwrap();
        let (c2, m2) = train(&tiny_config(6), &d).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(c1.to_bytes(Dtype::F64).unwrap(), c2.to_bytes(Dtype::F64).unwrap());
        assert!(m1.iter().all(|m| m.grad_norm.is_finite()));
    }

    #[test]
    fn checkpoint_bytes_round_trip() {
        let d = data(20);
        let (c, _) = train(&tiny_config(3), &d).unwrap();
        for dtype in [Dtype::F64, Dtype::F32] {
            let bytes = c.to_bytes(dtype).unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back.to_bytes(dtype).unwrap(), bytes);
            if dtype == Dtype::F64 {
                assert_eq!(back, c);
            }
        }
    }

    #[test]
    fn corrupt_checkpoints_fail_cleanly() {
        let c = Checkpoint::initial(&tiny_config(1)).unwrap();
        let bytes = c.to_bytes(Dtype::F64).unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad_magic), Err(Error::Format(_))));
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad_version), Err(Error::Version { .. })));
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let d = data(30);
        let cfg = tiny_config(8);
        let (full, full_metrics) = train(&cfg, &d).unwrap();

        let mut first = Trainer::new(&cfg, &d).unwrap();
        let mut metrics = first.run_until(5, |_, _| Ok(())).unwrap();
        let bytes = first.into_state().to_bytes(Dtype::F64).unwrap();
        let mut second = Trainer::resume(Checkpoint::from_bytes(&bytes).unwrap(), &d).unwrap();
        metrics.extend(second.run_until(8, |_, _| Ok(())).unwrap());
        assert_eq!(metrics, full_metrics);
        assert_eq!(second.into_state(), full);
    }

    #[test]
    fn hard_negatives_enter_training() {
        let mut d = data(8);
        for (i, p) in d.iter_mut().enumerate() {
            p.hard_negatives = vec![format!("neg{i}")];
        }
        let (_, m) = train(&tiny_config(2), &d).unwrap();
        assert!(m.iter().all(|s| s.loss.is_finite() && s.loss > 0.0));
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let d = data(8);
        let mut state = Checkpoint::initial(&tiny_config(1)).unwrap();
        state.encoder.weights_mut().tensors_mut()[0].data_mut()[0] = f64::NAN;
        let err = {
            let mut t = Trainer::resume(state, &d).unwrap();
            // Force every example to hit the poisoned byte row 0.
            let poisoned: Vec<PairExample> = vec![PairExample::new("a", "\0", "\0"); 8];
            t.data = Box::leak(poisoned.into_boxed_slice());
            t.step().unwrap_err()
        };
        assert!(matches!(err, Error::NonFinite { step: 0, .. }), "{err}");
    }
}
