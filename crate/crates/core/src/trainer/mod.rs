//! Deterministic pretraining loop.
//!
//! Parameters and Adam moments are rounded to f32 after every step, so the
//! f32 checkpoint container captures the state exactly and a resumed run
//! continues bit for bit. Computation itself runs in the scalar type `T`.

mod checkpoint;
mod spikes;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, MAGIC, VERSION};
pub use spikes::{detect_spikes, SpikeError};

use crate::analysis::param_norm_profile;
use crate::config::{ConfigError, TrainConfig};
use crate::data::{eval_batches, Batch, BatchSampler, DataError};
use crate::engine::Tensor;
use crate::init::{apply_scheme, InitError};
use crate::model::{ModelError, ModelGraph, ModelParams};
use crate::optim::{adamw_step, clip_grad_norm, OptimError, OptimState};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Init(#[from] InitError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("corpus token {token} is outside the model vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("checkpoint was written for a different config")]
    ConfigMismatch,
    #[error("non-finite {what} at step {step}; last good state is step {}", last_good.step)]
    NonFinite {
        step: u64,
        what: String,
        last_good: Box<Checkpoint>,
        log: Box<RunLog>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
    pub lr: f64,
    pub param_norm: f64,
}

/// What a run observed. `losses[i]` is the training loss of step
/// `start_step + i + 1`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub start_step: u64,
    pub records: Vec<LogRecord>,
    pub losses: Vec<f64>,
    /// Steps flagged by [`detect_spikes`].
    pub spikes: Vec<u64>,
}

pub const METRICS_HEADER: &str = "step,train_loss,eval_loss,lr,param_norm";

impl RunLog {
    pub fn loss_at(&self, step: u64) -> Option<f64> {
        let i = step.checked_sub(self.start_step + 1)?;
        self.losses.get(i as usize).copied()
    }

    pub fn last(&self) -> Option<&LogRecord> {
        self.records.last()
    }

    /// Metrics CSV; floats carry 9 significant digits and a missing eval
    /// loss is an empty field.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for r in &self.records {
            let eval = r.eval_loss.map(|e| format!("{e:.8e}")).unwrap_or_default();
            writeln!(
                s,
                "{},{:.8e},{},{:.8e},{:.8e}",
                r.step, r.train_loss, eval, r.lr, r.param_norm
            )
            .unwrap();
        }
        s
    }
}

/// Parses a metrics CSV written by [`RunLog::to_csv`].
pub fn parse_metrics_csv(text: &str) -> Result<Vec<LogRecord>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == METRICS_HEADER => {}
        other => return Err(format!("expected header `{METRICS_HEADER}`, found {other:?}")),
    }
    let num = |f: &str, line: usize| f.trim().parse::<f64>().map_err(|e| format!("line {line}: `{f}`: {e}"));
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let line = i + 2;
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(format!("line {line}: expected 5 fields, found {}", f.len()));
            }
            Ok(LogRecord {
                step: f[0].trim().parse().map_err(|e| format!("line {line}: step: {e}"))?,
                train_loss: num(f[1], line)?,
                eval_loss: if f[2].trim().is_empty() { None } else { Some(num(f[2], line)?) },
                lr: num(f[3], line)?,
                param_norm: num(f[4], line)?,
            })
        })
        .collect()
}

fn cast_map<T: Scalar, U: Scalar>(m: &BTreeMap<String, Tensor<T>>) -> BTreeMap<String, Tensor<U>> {
    m.iter().map(|(k, t)| (k.clone(), t.cast())).collect()
}

fn round_storage<T: Scalar>(m: &mut BTreeMap<String, Tensor<T>>) {
    for t in m.values_mut() {
        for x in t.data_mut() {
            *x = x.round_f32();
        }
    }
}

/// Global L2 norm over every trainable tensor.
pub fn global_param_norm<T: Scalar>(params: &ModelParams<T>) -> f64 {
    param_norm_profile(&params.tensors).global
}

/// Mean loss over fixed evaluation batches.
pub fn eval_loss<T: Scalar>(graph: &ModelGraph<T>, params: &ModelParams<T>, batches: &[Batch]) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for b in batches {
        total += graph.loss(params, &b.inputs, &b.targets)?.f64();
    }
    Ok(total / batches.len() as f64)
}

struct Snapshot<'a, T: Scalar> {
    cfg: &'a TrainConfig,
    params: &'a ModelParams<T>,
    state: &'a OptimState<T>,
    sampler: &'a BatchSampler,
}

impl<T: Scalar> Snapshot<'_, T> {
    fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            params: self.params.cast(),
            optim: OptimState {
                m: cast_map(&self.state.m),
                v: cast_map(&self.state.v),
                t: self.state.t,
            },
            step: self.state.t,
            sampler: self.sampler.state(),
        }
    }
}

/// Trains from scratch to `optim.total_steps`.
pub fn train<T: Scalar>(cfg: &TrainConfig) -> Result<(Checkpoint, RunLog), TrainError> {
    train_with::<T>(cfg, None, |_| Ok(()))
}

/// Continues a checkpointed run to its configured step count.
pub fn resume<T: Scalar>(ckpt: &Checkpoint) -> Result<(Checkpoint, RunLog), TrainError> {
    train_with::<T>(&ckpt.config, Some(ckpt), |_| Ok(()))
}

/// Training loop. `on_checkpoint` receives a checkpoint every
/// `logging.checkpoint_every` steps.
pub fn train_with<T: Scalar>(
    cfg: &TrainConfig,
    start: Option<&Checkpoint>,
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<(), TrainError>,
) -> Result<(Checkpoint, RunLog), TrainError> {
    cfg.validate()?;
    let corpus = cfg.data.source()?.load()?;
    if let Some(&token) = corpus.tokens.iter().find(|&&t| t as usize >= cfg.model.vocab_size) {
        return Err(TrainError::TokenOutOfRange {
            token,
            vocab: cfg.model.vocab_size,
        });
    }
    let (train_seq, holdout) = corpus.split_holdout(cfg.data.holdout);
    let (batch, seq_len) = (cfg.data.batch, cfg.data.seq_len);
    let evals = if cfg.data.holdout > 0.0 {
        let b = eval_batches(&holdout, batch, seq_len, cfg.data.eval_windows);
        if b.is_empty() {
            return Err(DataError::TooShort {
                len: holdout.len(),
                need: batch * seq_len + 1,
            }
            .into());
        }
        b
    } else {
        Vec::new()
    };
    let hyper = cfg.optim.hyper();

    let (mut params, mut state, mut sampler) = match start {
        Some(ck) => {
            if ck.config_hash() != cfg.hash() {
                return Err(TrainError::ConfigMismatch);
            }
            let state = OptimState {
                m: cast_map(&ck.optim.m),
                v: cast_map(&ck.optim.v),
                t: ck.step,
            };
            let sampler = BatchSampler::restore(&train_seq, batch, seq_len, &ck.sampler)
                .ok_or_else(|| CheckpointError::Corrupt("unreadable sampler state".into()))?;
            (ck.params.cast::<T>(), state, sampler)
        }
        None => {
            let mut p = ModelParams::<T>::build(&cfg.model)?;
            apply_scheme(&mut p, &cfg.init.scheme())?;
            round_storage(&mut p.tensors);
            let state = OptimState::new(&p.tensors);
            (p, state, BatchSampler::new(&train_seq, batch, seq_len, cfg.seed)?)
        }
    };

    let graph = ModelGraph::<T>::new(&cfg.model, batch, seq_len, true)?;
    let mut log = RunLog {
        start_step: state.t,
        ..RunLog::default()
    };

    while state.t < hyper.total_steps {
        let step = state.t + 1;
        let last_good = |what: &str, log: &RunLog, p: &ModelParams<T>, s: &OptimState<T>, sm: &BatchSampler| {
            TrainError::NonFinite {
                step,
                what: what.to_string(),
                last_good: Box::new(
                    Snapshot {
                        cfg,
                        params: p,
                        state: s,
                        sampler: sm,
                    }
                    .checkpoint(),
                ),
                log: Box::new(log.clone()),
            }
        };
        let sampler_before = sampler.clone();
        let b = sampler.next_batch(&train_seq)?;
        let (loss, grads) = graph.loss_and_grads(&params, &b.inputs, &b.targets)?;
        if !loss.f64().is_finite() {
            return Err(last_good("loss", &log, &params, &state, &sampler_before));
        }
        let mut grads = grads.into_map();
        if let Some(c) = cfg.optim.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        let before = (params.clone(), state.clone());
        let lr = match adamw_step(&mut params.tensors, &grads, &mut state, &hyper) {
            Ok(lr) => lr,
            Err(OptimError::NonFiniteGradient(name)) => {
                return Err(last_good(&format!("gradient of {name}"), &log, &before.0, &before.1, &sampler_before));
            }
            Err(e) => return Err(e.into()),
        };
        round_storage(&mut params.tensors);
        round_storage(&mut state.m);
        round_storage(&mut state.v);
        if params.tensors.values().any(|t| !t.all_finite()) {
            return Err(last_good("parameters", &log, &before.0, &before.1, &sampler_before));
        }
        log.losses.push(loss.f64());

        if step % cfg.logging.log_every == 0 || step == hyper.total_steps {
            let eval = if evals.is_empty() {
                None
            } else {
                Some(eval_loss(&graph, &params, &evals)?)
            };
            log.records.push(LogRecord {
                step,
                train_loss: loss.f64(),
                eval_loss: eval,
                lr,
                param_norm: global_param_norm(&params),
            });
        }
        if cfg.logging.checkpoint_every > 0 && step % cfg.logging.checkpoint_every == 0 {
            let ck = Snapshot {
                cfg,
                params: &params,
                state: &state,
                sampler: &sampler,
            }
            .checkpoint();
            on_checkpoint(&ck)?;
        }
    }

    if log.losses.len() >= cfg.logging.spike_window {
        log.spikes = detect_spikes(&log.losses, cfg.logging.spike_window, cfg.logging.spike_k)
            .expect("window validated")
            .into_iter()
            .map(|i| log.start_step + i as u64 + 1)
            .collect();
    }
    let ck = Snapshot {
        cfg,
        params: &params,
        state: &state,
        sampler: &sampler,
    }
    .checkpoint();
    Ok((ck, log))
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.cclm";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.cclm";
pub const SPIKES_FILE: &str = "spikes.csv";

pub fn checkpoint_file(step: u64) -> String {
    format!("step-{step:08}.cclm")
}

fn write(path: &Path, data: impl AsRef<[u8]>) -> Result<(), TrainError> {
    std::fs::write(path, data).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn spikes_csv(log: &RunLog) -> String {
    let mut s = String::from("step,train_loss\n");
    for &st in &log.spikes {
        writeln!(s, "{st},{:.8e}", log.loss_at(st).unwrap()).unwrap();
    }
    s
}

/// Runs [`train_with`] and writes metrics, spikes, periodic and final
/// checkpoints under `logging.out_dir`. On a non-finite abort the last good
/// state is saved as `last_good.cclm` along with the metrics so far.
pub fn train_to_dir<T: Scalar>(cfg: &TrainConfig, start: Option<&Checkpoint>) -> Result<(Checkpoint, RunLog), TrainError> {
    let dir = cfg.logging.out_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|source| TrainError::Io {
        path: dir.clone(),
        source,
    })?;
    let result = train_with::<T>(cfg, start, |ck| {
        save_checkpoint(ck, &dir.join(checkpoint_file(ck.step)))?;
        Ok(())
    });
    match result {
        Ok((ck, log)) => {
            write(&dir.join(METRICS_FILE), log.to_csv())?;
            write(&dir.join(SPIKES_FILE), spikes_csv(&log))?;
            save_checkpoint(&ck, &dir.join(FINAL_CHECKPOINT))?;
            Ok((ck, log))
        }
        Err(TrainError::NonFinite {
            step,
            what,
            last_good,
            log,
        }) => {
            write(&dir.join(METRICS_FILE), log.to_csv())?;
            save_checkpoint(&last_good, &dir.join(LAST_GOOD_CHECKPOINT))?;
            Err(TrainError::NonFinite {
                step,
                what,
                last_good,
                log,
            })
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(steps: u64) -> TrainConfig {
        let text = format!(
            r#"{{
            "model": {{"n_layers": 1, "d_model": 16, "n_heads": 2, "n_kv_heads": 1, "head_dim": 8,
                      "vocab_size": 4, "max_seq_len": 16}},
            "init": {{"kind": "gamma", "value": 0.5, "seed": 3}},
            "optim": {{"lr_max": 0.01, "lr_min": 0.001, "warmup_frac": 0.1, "beta1": 0.9,
                      "beta2": 0.95, "lambda": 0.1, "total_steps": {steps}}},
            "data": {{"synth": {{"transitions": [[0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0],
                                               [0.0, 0.0, 0.0, 1.0], [0.5, 0.5, 0.0, 0.0]],
                               "length": 4000, "seed": 1}},
                     "batch": 4, "seq_len": 8, "holdout": 0.1}},
            "logging": {{"log_every": 10, "checkpoint_every": 0, "out_dir": "unused", "spike_window": 8}},
            "seed": 5
        }}"#
        );
        TrainConfig::from_json(&text).unwrap()
    }

    #[test]
    fn loss_decreases_and_logs() {
        let (ck, log) = train::<f64>(&tiny_config(60)).unwrap();
        assert_eq!(ck.step, 60);
        assert_eq!(log.losses.len(), 60);
        assert_eq!(log.records.iter().map(|r| r.step).collect::<Vec<_>>(), vec![10, 20, 30, 40, 50, 60]);
        assert!(log.losses[59] < log.losses[0]);
        assert!(log.records.iter().all(|r| r.eval_loss.is_some()));
    }

    #[test]
    fn csv_round_trip() {
        let (_, log) = train::<f32>(&tiny_config(20)).unwrap();
        let parsed = parse_metrics_csv(&log.to_csv()).unwrap();
        assert_eq!(parsed.len(), log.records.len());
        for (a, b) in parsed.iter().zip(&log.records) {
            assert_eq!(a.step, b.step);
            assert!((a.train_loss - b.train_loss).abs() <= 1e-8 * b.train_loss.abs());
        }
        assert!(parse_metrics_csv("step,loss\n").is_err());
    }

    #[test]
    fn container_round_trip_is_exact() {
        let (ck, _) = train::<f64>(&tiny_config(5)).unwrap();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn container_rejects_damage() {
        let (ck, _) = train::<f64>(&tiny_config(2)).unwrap();
        let bytes = ck.to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Corrupt(_))
        ));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..10]), Err(CheckpointError::Corrupt(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(CheckpointError::UnknownVersion(2))));
    }

    #[test]
    fn diverging_run_aborts_with_last_good_state() {
        let mut cfg = tiny_config(30);
        cfg.optim.lr_max = 1e38;
        cfg.optim.lr_min = 1e37;
        match train::<f64>(&cfg) {
            Err(TrainError::NonFinite { step, last_good, .. }) => {
                assert_eq!(last_good.step, step - 1);
                assert!(last_good.params.tensors.values().all(|t| t.all_finite()));
            }
            other => panic!("expected abort, got {:?}", other.map(|r| r.0.step)),
        }
    }
}
