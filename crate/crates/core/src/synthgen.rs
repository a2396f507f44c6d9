//! Synthetic multi-subject fMRI datasets with a known ground truth.
//!
//! Each stimulus has a unit-norm semantic embedding `z`. A tuning matrix shared
//! by all subjects maps it to a canonical response `r = T z` of length `L`; a
//! subject then applies its own affine distortion (BOLD gain, per-position
//! gain perturbation, additive bias), the result is upsampled to the
//! subject's raw length and observed under Gaussian noise.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array;
use crate::config::DatasetConfig;
use crate::error::{Error, Result};

/// Sampling step and horizon for the BOLD gain convolution.
pub const BOLD_DT: f64 = 0.1;
pub const BOLD_HORIZON: f64 = 40.0;

pub fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

// Stream ids for the independent random sources of a dataset.
const STREAM_PROTOTYPES: u64 = 1;
const STREAM_STIMULI: u64 = 2;
const STREAM_TUNING: u64 = 3;
const STREAM_IDS: u64 = 4;
const STREAM_SUBJECTS: u64 = 1 << 16;
const STREAM_NOISE: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HrfParams {
    pub peak_delay: f64,
    pub undershoot_delay: f64,
    pub peak_dispersion: f64,
    pub undershoot_dispersion: f64,
    pub undershoot_ratio: f64,
}

impl HrfParams {
    pub const CANONICAL: HrfParams = HrfParams {
        peak_delay: 6.0,
        undershoot_delay: 16.0,
        peak_dispersion: 1.0,
        undershoot_dispersion: 1.0,
        undershoot_ratio: 1.0 / 6.0,
    };

    pub fn validate(&self) -> Result<()> {
        let all_pos = [
            self.peak_delay,
            self.undershoot_delay,
            self.peak_dispersion,
            self.undershoot_dispersion,
        ]
        .iter()
        .all(|v| *v > 0.0 && v.is_finite());
        if !all_pos || self.peak_delay >= self.undershoot_delay {
            return Err(Error::InvalidInput(format!(
                "bad HRF delays/dispersions: {self:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.undershoot_ratio) {
            return Err(Error::InvalidInput(format!(
                "undershoot_ratio {} outside [0, 1)",
                self.undershoot_ratio
            )));
        }
        Ok(())
    }
}

/// Gamma-density-shaped lobe with its mode at `delay`, scaled to unit peak:
/// `(t/delay)^(delay/disp) * exp(-(t - delay)/disp)`.
fn gamma_lobe(t: f64, delay: f64, dispersion: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let shape = delay / dispersion;
    (shape * (t / delay).ln() - (t - delay) / dispersion).exp()
}

/// Double-gamma haemodynamic response at time `t` seconds.
pub fn double_gamma_hrf(t: f64, p: &HrfParams) -> Result<f64> {
    if !t.is_finite() {
        return Err(Error::NonFinite(format!("hrf time {t}")));
    }
    if t < 0.0 {
        return Err(Error::InvalidInput(format!(
            "hrf time must be >= 0, got {t}"
        )));
    }
    Ok(gamma_lobe(t, p.peak_delay, p.peak_dispersion)
        - p.undershoot_ratio * gamma_lobe(t, p.undershoot_delay, p.undershoot_dispersion))
}

/// Peak of the discrete convolution of a boxcar of `stimulus_duration` seconds
/// with the HRF, sampled at `BOLD_DT` over `[0, BOLD_HORIZON]`.
pub fn bold_gain(p: &HrfParams, stimulus_duration: f64) -> Result<f64> {
    if !(stimulus_duration > 0.0 && stimulus_duration.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "stimulus duration must be positive, got {stimulus_duration}"
        )));
    }
    let n = (BOLD_HORIZON / BOLD_DT).round() as usize + 1;
    let h: Vec<f64> = (0..n)
        .map(|i| double_gamma_hrf(i as f64 * BOLD_DT, p))
        .collect::<Result<_>>()?;
    // Boxcar covers samples m with m*dt < duration; at least one sample.
    let width = ((stimulus_duration / BOLD_DT - 1e-9).ceil() as usize).clamp(1, n);
    let mut best = f64::NEG_INFINITY;
    let mut acc = 0.0;
    // Running sum of h over the boxcar window ending at i.
    for i in 0..n {
        acc += h[i];
        if i >= width {
            acc -= h[i - width];
        }
        best = best.max(acc * BOLD_DT);
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectProfile {
    pub subject_id: String,
    pub raw_len: usize,
    pub raw_multiple: usize,
    pub gain: f64,
    pub gain_profile: Vec<f64>,
    pub bias: Vec<f64>,
    pub hrf: HrfParams,
    pub noise_sigma: f64,
}

impl SubjectProfile {
    pub fn canonical_len(&self) -> usize {
        self.bias.len()
    }

    /// Noise-free, subject-specific response at canonical resolution.
    pub fn canonical_response(&self, r: &[f64], squash: bool) -> Vec<f64> {
        r.iter()
            .zip(&self.gain_profile)
            .zip(&self.bias)
            .map(|((&rv, &g), &b)| {
                let x = self.gain * (1.0 + g) * rv + b;
                if squash {
                    2.0 * (x / 2.0).tanh()
                } else {
                    x
                }
            })
            .collect()
    }
}

pub fn subject_id(index: usize) -> String {
    format!("subj{:02}", index + 1)
}

/// Samples a subject's generative parameters.
pub fn make_subject(
    subject_id: &str,
    seed: u64,
    canonical_len: usize,
    raw_multiple: usize,
    noise_sigma: f64,
) -> Result<SubjectProfile> {
    if canonical_len == 0 {
        return Err(Error::InvalidInput(
            "canonical length must be positive".into(),
        ));
    }
    if !(2..=8).contains(&raw_multiple) {
        return Err(Error::InvalidInput(format!(
            "raw_multiple {raw_multiple} outside [2, 8]"
        )));
    }
    let mut r = rng(seed, 0);
    let mut normal = |mean: f64, sd: f64| mean + sd * r.sample::<f64, _>(StandardNormal);
    let peak_delay = normal(6.0, 0.5).clamp(4.5, 7.5);
    let undershoot_delay = normal(16.0, 1.0).max(peak_delay + 1.0);
    let undershoot_ratio = normal(1.0 / 6.0, 0.02).clamp(1e-3, 0.999);
    let hrf = HrfParams {
        peak_delay,
        undershoot_delay,
        peak_dispersion: 1.0,
        undershoot_dispersion: 1.0,
        undershoot_ratio,
    };
    let gain_profile = (0..canonical_len)
        .map(|_| normal(0.0, 0.1).clamp(-0.2, 0.2))
        .collect();
    let bias = (0..canonical_len).map(|_| normal(0.0, 0.3)).collect();
    Ok(SubjectProfile {
        subject_id: subject_id.to_string(),
        raw_len: canonical_len * raw_multiple,
        raw_multiple,
        gain: bold_gain(&hrf, 1.0)?,
        gain_profile,
        bias,
        hrf,
        noise_sigma,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stimulus {
    pub stimulus_id: String,
    pub class_id: usize,
    #[serde(skip)]
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StimulusSet {
    pub n_classes: usize,
    /// `n_classes x D`, unit-norm rows.
    pub prototypes: Array2<f64>,
    /// Sorted by `stimulus_id`.
    pub stimuli: Vec<Stimulus>,
}

impl StimulusSet {
    pub fn embed_dim(&self) -> usize {
        self.prototypes.ncols()
    }

    pub fn index_of(&self, stimulus_id: &str) -> Option<usize> {
        self.stimuli
            .binary_search_by(|s| s.stimulus_id.as_str().cmp(stimulus_id))
            .ok()
    }

    pub fn embeddings(&self) -> Array2<f64> {
        let d = self.embed_dim();
        let mut m = Array2::zeros((self.stimuli.len(), d));
        for (i, s) in self.stimuli.iter().enumerate() {
            m.row_mut(i).assign(&Array1::from(s.embedding.clone()));
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelSeries {
    pub subject_id: String,
    pub stimulus_id: String,
    pub class_id: usize,
    #[serde(skip)]
    pub values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub series: VoxelSeries,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub seed: u64,
    pub subjects: Vec<SubjectProfile>,
    pub stimulus_set: StimulusSet,
    /// `L x D`, shared by all subjects.
    pub tuning: Array2<f64>,
    pub samples: Vec<Sample>,
}

fn unit_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v.iter_mut() {
        *x /= n;
    }
}

fn gaussian_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect()
}

/// One observed voxel series for `stimulus` as seen by `subject`.
pub fn synthesize_sample(
    subject: &SubjectProfile,
    stimulus: &Stimulus,
    tuning: &Array2<f64>,
    noise_seed: u64,
    squash: bool,
) -> Result<VoxelSeries> {
    let (l, d) = tuning.dim();
    if stimulus.embedding.len() != d {
        return Err(Error::shape(
            "synthesize_sample (embedding)",
            d,
            stimulus.embedding.len(),
        ));
    }
    if subject.canonical_len() != l || subject.gain_profile.len() != l {
        return Err(Error::shape(
            "synthesize_sample (subject)",
            l,
            subject.canonical_len(),
        ));
    }
    let z = Array1::from(stimulus.embedding.clone());
    let r = tuning.dot(&z);
    let x = subject.canonical_response(r.as_slice().expect("contiguous"), squash);
    let mut values = Vec::with_capacity(subject.raw_len);
    let mut noise_rng = rng(noise_seed, 0);
    let noise = Normal::new(0.0, subject.noise_sigma.max(0.0))
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    for &xv in &x {
        for _ in 0..subject.raw_multiple {
            let e = if subject.noise_sigma > 0.0 {
                noise.sample(&mut noise_rng)
            } else {
                0.0
            };
            values.push(xv + e);
        }
    }
    Ok(VoxelSeries {
        subject_id: subject.subject_id.clone(),
        stimulus_id: stimulus.stimulus_id.clone(),
        class_id: stimulus.class_id,
        values,
    })
}

/// Generates prototypes, stimuli, tuning, subjects and every subject's samples.
pub fn build_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Dataset> {
    if cfg.n_classes < 2 {
        return Err(Error::Config("n_classes must be >= 2".into()));
    }
    if cfg.train_per_class < 1 || cfg.test_per_class < 1 {
        return Err(Error::Config("stimuli per class must be >= 1".into()));
    }
    if cfg.raw_multiples.is_empty() {
        return Err(Error::Config("raw_multiples is empty".into()));
    }
    let (l, d) = (cfg.canonical_len, cfg.embed_dim);

    let mut pr = rng(seed, STREAM_PROTOTYPES);
    let mut prototypes = Array2::zeros((cfg.n_classes, d));
    for c in 0..cfg.n_classes {
        let mut v = gaussian_vec(&mut pr, d);
        unit_normalize(&mut v);
        prototypes.row_mut(c).assign(&Array1::from(v));
    }

    // Stimulus ids are a shuffled numbering so that id order within a class
    // is unrelated to generation order, as with naturally named image files.
    let per_class = cfg.train_per_class + cfg.test_per_class;
    let total = cfg.n_classes * per_class;
    let mut numbers: Vec<usize> = (0..total).collect();
    let mut idr = rng(seed, STREAM_IDS);
    for i in (1..total).rev() {
        let j = idr.random_range(0..=i);
        numbers.swap(i, j);
    }

    let mut sr = rng(seed, STREAM_STIMULI);
    let mut stimuli = Vec::with_capacity(total);
    let mut split_of = BTreeMap::new();
    for c in 0..cfg.n_classes {
        for k in 0..per_class {
            let eta = gaussian_vec(&mut sr, d);
            let mut z: Vec<f64> = prototypes
                .row(c)
                .iter()
                .zip(&eta)
                .map(|(p, e)| p + cfg.sigma_stim * e)
                .collect();
            unit_normalize(&mut z);
            let id = format!("stim{:05}", numbers[c * per_class + k]);
            let split = if k < cfg.train_per_class {
                Split::Train
            } else {
                Split::Test
            };
            split_of.insert(id.clone(), split);
            stimuli.push(Stimulus {
                stimulus_id: id,
                class_id: c,
                embedding: z,
            });
        }
    }
    stimuli.sort_by(|a, b| a.stimulus_id.cmp(&b.stimulus_id));

    let mut tr = rng(seed, STREAM_TUNING);
    let tuning = Array2::from_shape_fn((l, d), |_| tr.sample::<f64, _>(StandardNormal));

    let subjects: Vec<SubjectProfile> = (0..cfg.n_subjects)
        .map(|s| {
            let subject_seed = rng(seed, STREAM_SUBJECTS + s as u64).random::<u64>();
            make_subject(
                &subject_id(s),
                subject_seed,
                l,
                cfg.raw_multiples[s % cfg.raw_multiples.len()],
                cfg.noise_sigma,
            )
        })
        .collect::<Result<_>>()?;

    let per_subject: Vec<Vec<Sample>> = subjects
        .par_iter()
        .enumerate()
        .map(|(s, subj)| {
            stimuli
                .iter()
                .enumerate()
                .map(|(i, stim)| {
                    let noise_seed =
                        STREAM_NOISE ^ seed.rotate_left(17) ^ ((s as u64) << 40 | i as u64);
                    Ok(Sample {
                        series: synthesize_sample(
                            subj,
                            stim,
                            &tuning,
                            noise_seed,
                            cfg.subject_nonlinearity,
                        )?,
                        split: split_of[&stim.stimulus_id],
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    Ok(Dataset {
        config: cfg.clone(),
        seed,
        subjects,
        stimulus_set: StimulusSet {
            n_classes: cfg.n_classes,
            prototypes,
            stimuli,
        },
        tuning,
        samples: per_subject.into_iter().flatten().collect(),
    })
}

impl Dataset {
    pub fn subject(&self, subject_id: &str) -> Option<&SubjectProfile> {
        self.subjects.iter().find(|s| s.subject_id == subject_id)
    }

    pub fn subject_ids(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.subject_id.clone()).collect()
    }

    pub fn samples_for<'a>(
        &'a self,
        subject_id: &'a str,
        split: Split,
    ) -> impl Iterator<Item = &'a Sample> + 'a {
        self.samples
            .iter()
            .filter(move |s| s.series.subject_id == subject_id && s.split == split)
    }

    /// Target embedding for a sample.
    pub fn target(&self, stimulus_id: &str) -> &[f64] {
        let i = self
            .stimulus_set
            .index_of(stimulus_id)
            .expect("sample refers to a known stimulus");
        &self.stimulus_set.stimuli[i].embedding
    }

    pub fn n_train(&self, subject_id: &str) -> usize {
        self.samples_for(subject_id, Split::Train).count()
    }
}

/// Keeps only the first `k` stimuli per class (by stimulus id) in the named
/// subject's training split. Other subjects and all test samples are untouched.
pub fn few_shot_subset(dataset: &Dataset, subject_id: &str, k: usize) -> Result<Dataset> {
    if dataset.subject(subject_id).is_none() {
        return Err(Error::InvalidInput(format!(
            "unknown subject `{subject_id}`"
        )));
    }
    if k < 1 {
        return Err(Error::InvalidInput("few-shot k must be >= 1".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for s in dataset.samples_for(subject_id, Split::Train) {
        by_class
            .entry(s.series.class_id)
            .or_default()
            .push(&s.series.stimulus_id);
    }
    let mut keep = std::collections::BTreeSet::new();
    for (class_id, mut ids) in by_class {
        if k > ids.len() {
            return Err(Error::InvalidInput(format!(
                "k = {k} exceeds the {} training stimuli of class {class_id}",
                ids.len()
            )));
        }
        ids.sort_unstable();
        keep.extend(ids.into_iter().take(k).map(str::to_string));
    }
    retain_train(dataset, subject_id, |id| keep.contains(id))
}

/// Restricts the subject's training split to the given stimulus ids.
pub fn subset_by_ids(dataset: &Dataset, subject_id: &str, ids: &[String]) -> Result<Dataset> {
    let keep: std::collections::BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    retain_train(dataset, subject_id, |id| keep.contains(id))
}

fn retain_train(
    dataset: &Dataset,
    subject_id: &str,
    keep: impl Fn(&str) -> bool,
) -> Result<Dataset> {
    let mut out = dataset.clone();
    out.samples.retain(|s| {
        s.series.subject_id != subject_id || s.split == Split::Test || keep(&s.series.stimulus_id)
    });
    Ok(out)
}

// ---------------------------------------------------------------------------
// Persistence

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    subject_id: String,
    stimulus_id: String,
    class_id: usize,
    split: Split,
    row: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct SubjectRecord {
    subject_id: String,
    raw_len: usize,
    raw_multiple: usize,
    gain: f64,
    hrf: HrfParams,
    noise_sigma: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub config: DatasetConfig,
    pub seed: u64,
    pub counts: BTreeMap<String, usize>,
    /// File name -> SHA-256 of its bytes.
    pub checksums: BTreeMap<String, String>,
    subjects: Vec<SubjectRecord>,
    stimuli: Vec<Stimulus>,
    samples: Vec<SampleRecord>,
}

pub const DATASET_MANIFEST: &str = "manifest.json";

fn to_dyn(a: Array2<f64>) -> ndarray::ArrayD<f64> {
    a.into_dyn()
}

fn row_matrix(rows: &[&[f64]], width: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows.len(), width));
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).assign(&ndarray::ArrayView1::from(*r));
    }
    m
}

/// Writes the dataset to `dir` and returns the manifest checksum.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<String> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut checksums = BTreeMap::new();
    let mut put = |name: String, a: ndarray::ArrayD<f64>| -> Result<()> {
        let sha = array::write(&dir.join(&name), &a)?;
        checksums.insert(name, sha);
        Ok(())
    };
    put(
        "prototypes.msarr".into(),
        to_dyn(dataset.stimulus_set.prototypes.clone()),
    )?;
    put(
        "stimuli.msarr".into(),
        to_dyn(dataset.stimulus_set.embeddings()),
    )?;
    put("tuning.msarr".into(), to_dyn(dataset.tuning.clone()))?;

    let mut samples = Vec::new();
    for subj in &dataset.subjects {
        let id = &subj.subject_id;
        put(
            format!("{id}_gain_profile.msarr"),
            Array1::from(subj.gain_profile.clone()).into_dyn(),
        )?;
        put(
            format!("{id}_bias.msarr"),
            Array1::from(subj.bias.clone()).into_dyn(),
        )?;
        let rows: Vec<&Sample> = dataset
            .samples
            .iter()
            .filter(|s| &s.series.subject_id == id)
            .collect();
        for (row, s) in rows.iter().enumerate() {
            samples.push(SampleRecord {
                subject_id: id.clone(),
                stimulus_id: s.series.stimulus_id.clone(),
                class_id: s.series.class_id,
                split: s.split,
                row,
            });
        }
        let values: Vec<&[f64]> = rows.iter().map(|s| s.series.values.as_slice()).collect();
        put(
            format!("{id}_voxels.msarr"),
            to_dyn(row_matrix(&values, subj.raw_len)),
        )?;
    }

    let mut counts = BTreeMap::new();
    counts.insert("classes".to_string(), dataset.stimulus_set.n_classes);
    counts.insert("stimuli".to_string(), dataset.stimulus_set.stimuli.len());
    counts.insert("subjects".to_string(), dataset.subjects.len());
    counts.insert("samples".to_string(), dataset.samples.len());
    counts.insert(
        "train_samples".to_string(),
        dataset
            .samples
            .iter()
            .filter(|s| s.split == Split::Train)
            .count(),
    );
    counts.insert(
        "test_samples".to_string(),
        dataset
            .samples
            .iter()
            .filter(|s| s.split == Split::Test)
            .count(),
    );

    let manifest = DatasetManifest {
        format: "fslab-dataset/1".into(),
        config: dataset.config.clone(),
        seed: dataset.seed,
        counts,
        checksums,
        subjects: dataset
            .subjects
            .iter()
            .map(|s| SubjectRecord {
                subject_id: s.subject_id.clone(),
                raw_len: s.raw_len,
                raw_multiple: s.raw_multiple,
                gain: s.gain,
                hrf: s.hrf,
                noise_sigma: s.noise_sigma,
            })
            .collect(),
        stimuli: dataset.stimulus_set.stimuli.clone(),
        samples,
    };
    array::write_json(&dir.join(DATASET_MANIFEST), &manifest)
}

pub fn read_dataset_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(DATASET_MANIFEST);
    if !path.exists() {
        return Err(Error::MissingArtifact {
            stage: "gen-data".into(),
            path,
        });
    }
    array::read_json(&path)
}

fn read_matrix(
    dir: &Path,
    name: &str,
    checksums: Option<&BTreeMap<String, String>>,
) -> Result<Array2<f64>> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(Error::MissingArtifact {
            stage: "gen-data".into(),
            path,
        });
    }
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if let Some(expected) = checksums.and_then(|c| c.get(name)) {
        let found = array::sha256_hex(&bytes);
        if &found != expected {
            return Err(Error::ChecksumMismatch {
                path,
                expected: expected.clone(),
                found,
            });
        }
    }
    let a = array::decode(&bytes, &path)?;
    let shape = a.shape().to_vec();
    match shape.len() {
        2 => Ok(a.into_dimensionality().expect("2-d")),
        1 => Ok(a.insert_axis(Axis(0)).into_dimensionality().expect("2-d")),
        _ => Err(Error::Container {
            path,
            reason: format!("expected a matrix, got shape {shape:?}"),
        }),
    }
}

/// Loads a dataset directory, verifying every array against the manifest.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    load_dataset_with(dir, true)
}

/// Like [`load_dataset`]; with `verify == false` array checksums are not checked.
pub fn load_dataset_with(dir: &Path, verify: bool) -> Result<Dataset> {
    let m = read_dataset_manifest(dir)?;
    let sums = verify.then_some(&m.checksums);
    let prototypes = read_matrix(dir, "prototypes.msarr", sums)?;
    let embeddings = read_matrix(dir, "stimuli.msarr", sums)?;
    let tuning = read_matrix(dir, "tuning.msarr", sums)?;
    let stimuli: Vec<Stimulus> = m
        .stimuli
        .iter()
        .enumerate()
        .map(|(i, s)| Stimulus {
            stimulus_id: s.stimulus_id.clone(),
            class_id: s.class_id,
            embedding: embeddings.row(i).to_vec(),
        })
        .collect();

    let mut subjects = Vec::new();
    let mut voxels = BTreeMap::new();
    for rec in &m.subjects {
        let id = &rec.subject_id;
        let gp = read_matrix(dir, &format!("{id}_gain_profile.msarr"), sums)?;
        let bias = read_matrix(dir, &format!("{id}_bias.msarr"), sums)?;
        voxels.insert(
            id.clone(),
            read_matrix(dir, &format!("{id}_voxels.msarr"), sums)?,
        );
        subjects.push(SubjectProfile {
            subject_id: id.clone(),
            raw_len: rec.raw_len,
            raw_multiple: rec.raw_multiple,
            gain: rec.gain,
            gain_profile: gp.row(0).to_vec(),
            bias: bias.row(0).to_vec(),
            hrf: rec.hrf,
            noise_sigma: rec.noise_sigma,
        });
    }
    let samples = m
        .samples
        .iter()
        .map(|r| Sample {
            series: VoxelSeries {
                subject_id: r.subject_id.clone(),
                stimulus_id: r.stimulus_id.clone(),
                class_id: r.class_id,
                values: voxels[&r.subject_id].row(r.row).to_vec(),
            },
            split: r.split,
        })
        .collect();
    Ok(Dataset {
        config: m.config.clone(),
        seed: m.seed,
        subjects,
        stimulus_set: StimulusSet {
            n_classes: m.config.n_classes,
            prototypes,
            stimuli,
        },
        tuning,
        samples,
    })
}
