//! The two training phases.
//!
//! Pretraining fits the shared encoder on pooled voxels from several subjects
//! with the semantic objective. Adaptation freezes the encoder and fits only a
//! new subject's adapter on a few-shot subset, optionally supervised by
//! same-class voxels drawn from the pretrained subjects.

pub mod optim;
pub mod schedule;

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Supervision, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::{LossReport, LossSpec, COMPONENTS};
use crate::models::{self, AdapterParams, Batch, EncoderOutput, EncoderParams, Trainable};
use crate::spectral::adaptive_max_pool;
use crate::synthgen::{rng, Dataset, Split};

pub use optim::{AdamHyper, AdamW};
pub use schedule::cyclical_lr;

const STREAM_SHUFFLE: u64 = 100;
const STREAM_PAIRING: u64 = 200;

/// Combines an experiment seed with a phase-specific seed and tag.
pub fn mix_seed(base: u64, offset: u64, tag: &str) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15 ^ base;
    for b in offset.to_le_bytes().iter().chain(tag.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
        h ^= h >> 29;
    }
    h
}

/// Pooled, labelled rows for one or more subjects.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledSet {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
    pub class_ids: Vec<usize>,
    pub stimulus_ids: Vec<String>,
    pub subject_ids: Vec<String>,
}

impl PooledSet {
    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    fn rows(&self, idx: &[usize]) -> (Array2<f64>, Array2<f64>) {
        (
            self.inputs.select(ndarray::Axis(0), idx),
            self.targets.select(ndarray::Axis(0), idx),
        )
    }
}

/// Pools every sample of the given subjects and split to the canonical length.
pub fn pooled_set(dataset: &Dataset, subjects: &[String], split: Split) -> Result<PooledSet> {
    let l = dataset.config.canonical_len;
    let d = dataset.stimulus_set.embed_dim();
    let rows: Vec<_> = dataset
        .samples
        .iter()
        .filter(|s| s.split == split && subjects.contains(&s.series.subject_id))
        .collect();
    let mut inputs = Array2::zeros((rows.len(), l));
    let mut targets = Array2::zeros((rows.len(), d));
    let mut set = PooledSet {
        inputs: Array2::zeros((0, l)),
        targets: Array2::zeros((0, d)),
        class_ids: Vec::with_capacity(rows.len()),
        stimulus_ids: Vec::with_capacity(rows.len()),
        subject_ids: Vec::with_capacity(rows.len()),
    };
    for (i, s) in rows.iter().enumerate() {
        let pooled = adaptive_max_pool(&s.series.values, l)?;
        inputs.row_mut(i).assign(&ArrayView1::from(&pooled));
        targets
            .row_mut(i)
            .assign(&ArrayView1::from(dataset.target(&s.series.stimulus_id)));
        set.class_ids.push(s.series.class_id);
        set.stimulus_ids.push(s.series.stimulus_id.clone());
        set.subject_ids.push(s.series.subject_id.clone());
    }
    set.inputs = inputs;
    set.targets = targets;
    Ok(set)
}

/// Same-class partner candidates (rows of a partner pool) for each anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct PairingPlan {
    pub candidates: Vec<Vec<usize>>,
}

impl PairingPlan {
    pub fn build(anchor_classes: &[usize], pool_classes: &[usize]) -> Result<Self> {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, c) in pool_classes.iter().enumerate() {
            by_class.entry(*c).or_default().push(i);
        }
        let candidates = anchor_classes
            .iter()
            .map(|c| {
                by_class
                    .get(c)
                    .cloned()
                    .ok_or(Error::MissingClass { class_id: *c })
            })
            .collect::<Result<_>>()?;
        Ok(PairingPlan { candidates })
    }

    /// One uniformly drawn partner per anchor.
    pub fn draw<R: Rng>(&self, r: &mut R) -> Vec<usize> {
        self.candidates
            .iter()
            .map(|c| c[r.random_range(0..c.len())])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub report: LossReport,
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["step", "lr", "total"];
    header.extend(COMPONENTS);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.step.to_string(),
            r.lr.to_string(),
            r.report.total.to_string(),
        ];
        for c in COMPONENTS {
            rec.push(r.report.get(c).map(|v| v.to_string()).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    crate::array::write_bytes(path, &bytes)?;
    Ok(crate::array::sha256_hex(&bytes))
}

fn spec_for(cfg: &TrainConfig, supervision: Supervision) -> LossSpec {
    LossSpec {
        tau: cfg.tau,
        weights: cfg.weights,
        supervision,
        bidirectional: cfg.bidirectional,
        wrap_phase_diff: cfg.wrap_phase_diff,
        use_prior: cfg.use_prior,
    }
}

/// Shuffled batches for one epoch; trailing batches smaller than 2 are dropped.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng(seed, STREAM_SHUFFLE + epoch as u64);
    for i in (1..n).rev() {
        let j = r.random_range(0..=i);
        order.swap(i, j);
    }
    order
        .chunks(batch_size)
        .filter(|c| {
            if c.len() < 2 {
                log::warn!(
                    "dropping a batch of {} sample(s): contrastive loss needs B >= 2",
                    c.len()
                );
                false
            } else {
                true
            }
        })
        .map(<[usize]>::to_vec)
        .collect()
}

pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n / batch_size + usize::from(n % batch_size >= 2)
}

fn non_finite(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("at step {step}: {m}")),
        other => other,
    }
}

pub struct PretrainOutcome {
    pub encoder: EncoderParams,
    pub log: Vec<LogRow>,
    /// `(epoch, params)` snapshots every `checkpoint_every` epochs.
    pub checkpoints: Vec<(usize, EncoderParams)>,
}

/// Fits the encoder on pooled samples of the pretraining subjects.
pub fn pretrain(
    data: &PooledSet,
    encoder: EncoderParams,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    if data.len() < 2 {
        return Err(Error::InvalidInput(
            "pretraining needs at least two samples".into(),
        ));
    }
    let spec = spec_for(cfg, Supervision::None);
    let mut encoder = encoder;
    let mut opt = AdamW::new(&encoder, AdamHyper::from(cfg));
    let total = cfg.epochs * batches_per_epoch(data.len(), cfg.batch_size);
    let mut log = Vec::with_capacity(total);
    let mut checkpoints = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for idx in epoch_batches(data.len(), cfg.batch_size, seed, epoch) {
            let (inputs, targets) = data.rows(&idx);
            let batch = Batch {
                inputs,
                targets,
                partners: None,
            };
            let (report, grads) = models::grad(None, &encoder, &batch, &spec, Trainable::ENCODER)
                .map_err(|e| non_finite(step, e))?;
            let lr = cyclical_lr(step, total, cfg.max_lr)?;
            opt.step(
                &mut encoder,
                grads.encoder.as_ref().expect("encoder is trainable"),
                lr,
            );
            log.push(LogRow {
                step,
                epoch,
                lr,
                report,
            });
            step += 1;
        }
        if cfg.checkpoint_every > 0
            && (epoch + 1) % cfg.checkpoint_every == 0
            && epoch + 1 < cfg.epochs
        {
            checkpoints.push((epoch + 1, encoder.clone()));
        }
    }
    Ok(PretrainOutcome {
        encoder,
        log,
        checkpoints,
    })
}

/// Repeats optimizer steps on a single fixed batch (overfitting sanity mode).
pub fn overfit_single_batch(
    data: &PooledSet,
    encoder: EncoderParams,
    cfg: &TrainConfig,
    steps: usize,
) -> Result<(EncoderParams, Vec<LogRow>)> {
    let spec = spec_for(cfg, Supervision::None);
    let idx: Vec<usize> = (0..data.len()).collect();
    let (inputs, targets) = data.rows(&idx);
    let batch = Batch {
        inputs,
        targets,
        partners: None,
    };
    let mut encoder = encoder;
    let mut opt = AdamW::new(&encoder, AdamHyper::from(cfg));
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let (report, grads) = models::grad(None, &encoder, &batch, &spec, Trainable::ENCODER)?;
        let lr = cyclical_lr(step, steps, cfg.max_lr)?;
        opt.step(&mut encoder, grads.encoder.as_ref().expect("trainable"), lr);
        log.push(LogRow {
            step,
            epoch: 0,
            lr,
            report,
        });
    }
    Ok((encoder, log))
}

pub struct AdaptOutcome {
    pub adapter: AdapterParams,
    pub log: Vec<LogRow>,
}

/// Fits the new subject's adapter in front of the frozen encoder.
///
/// `anchors` are the new subject's pooled few-shot training rows; `partners`
/// are pooled training rows of the pretrained subjects.
pub fn adapt(
    anchors: &PooledSet,
    partners: &PooledSet,
    encoder: &EncoderParams,
    adapter: AdapterParams,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<AdaptOutcome> {
    if anchors.len() < 2 {
        return Err(Error::InvalidInput(
            "adaptation needs at least two samples".into(),
        ));
    }
    let plan = PairingPlan::build(&anchors.class_ids, &partners.class_ids)?;
    let spec = spec_for(cfg, cfg.supervision);
    let mut adapter = adapter;
    let mut opt = AdamW::new(&adapter, AdamHyper::from(cfg));
    let total = cfg.epochs * batches_per_epoch(anchors.len(), cfg.batch_size);
    let mut log = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut pr = rng(seed, STREAM_PAIRING + epoch as u64);
        let partner_of = plan.draw(&mut pr);
        for idx in epoch_batches(anchors.len(), cfg.batch_size, seed, epoch) {
            let (inputs, targets) = anchors.rows(&idx);
            let partner_rows: Vec<usize> = idx.iter().map(|&i| partner_of[i]).collect();
            let batch = Batch {
                inputs,
                targets,
                partners: (cfg.supervision != Supervision::None)
                    .then(|| partners.inputs.select(ndarray::Axis(0), &partner_rows)),
            };
            let (report, grads) =
                models::grad(Some(&adapter), encoder, &batch, &spec, Trainable::ADAPTER)
                    .map_err(|e| non_finite(step, e))?;
            let lr = cyclical_lr(step, total, cfg.max_lr)?;
            opt.step(
                &mut adapter,
                grads.adapter.as_ref().expect("adapter is trainable"),
                lr,
            );
            log.push(LogRow {
                step,
                epoch,
                lr,
                report,
            });
            step += 1;
        }
    }
    Ok(AdaptOutcome { adapter, log })
}

/// Embeddings for pooled inputs, through the adapter if one is given.
pub fn predict(
    adapter: Option<&AdapterParams>,
    encoder: &EncoderParams,
    inputs: &Array2<f64>,
) -> Result<EncoderOutput> {
    match adapter {
        Some(a) => encoder.forward(a.forward(inputs.view())?.view()),
        None => encoder.forward(inputs.view()),
    }
}

/// Mean total loss per epoch.
pub fn epoch_means(log: &[LogRow]) -> Vec<f64> {
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in log {
        let e = sums.entry(r.epoch).or_default();
        e.0 += r.report.total;
        e.1 += 1;
    }
    sums.values().map(|(s, n)| s / *n as f64).collect()
}
