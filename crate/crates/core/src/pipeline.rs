//! Staged experiment pipeline with a checksum-chained manifest per stage.
//!
//! Layout under the output directory:
//!
//! ```text
//! data/                  dataset containers + manifest.json
//! pretrain/              encoder/, checkpoints/epoch_NNNN/, train_log.csv
//! select/<strategy>/     selection.json
//! adapt/<run>/           adapter/, train_log.csv
//! eval/<run>/            predictions.msarr, eval_report.json
//! report/tables/         comparison CSVs
//! ablate/<axis>/         table.csv
//! ```
//!
//! Every stage directory holds a `run_manifest.json` listing the checksums of
//! its inputs (upstream manifests) and outputs. Wall time goes to a sibling
//! `timings.json`, listed as volatile, so manifests stay byte-identical
//! across reruns.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::array;
use crate::config::{EmbeddingHead, ExperimentConfig, SelectionStrategy, SubsetRule, Supervision};
use crate::error::{Error, Result};
use crate::eval::{self, EvalInput, EvalReport, TableRow};
use crate::models::{self, AdapterParams, ModelDims, Params};
use crate::select::{self, SelectionFile};
use crate::spectral::pool_series;
use crate::synthgen::{self, rng, Dataset, Split};
use crate::train::{self, mix_seed};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const TIMINGS: &str = "timings.json";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub tool_version: String,
    pub config: Value,
    /// Stage-specific parameters (run spec, strategy, axis).
    pub params: Value,
    pub seeds: BTreeMap<String, u64>,
    /// Upstream manifest path (relative to the output directory) -> SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output path (relative) -> SHA-256.
    pub outputs: BTreeMap<String, String>,
    /// Files owned by the stage whose bytes may differ between reruns.
    pub volatile: Vec<String>,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageResult {
    pub stage: String,
    pub dir: String,
    pub status: StageStatus,
    pub metrics: BTreeMap<String, f64>,
}

/// One adaptation run: supervision mode, shot count, subset rule and adapter variant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptSpec {
    pub supervision: Supervision,
    pub shots: usize,
    /// `None` takes the first `shots` stimuli per class; otherwise the
    /// one-shot stimulus picked by this selection strategy.
    pub selection: Option<SelectionStrategy>,
    pub adapter_depth: usize,
    pub adapter_residual: bool,
}

impl AdaptSpec {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        AdaptSpec {
            supervision: cfg.adapt.supervision,
            shots: cfg.adapt.shots,
            selection: (cfg.adapt.subset == SubsetRule::Selected).then_some(cfg.selection.strategy),
            adapter_depth: cfg.model.adapter_depth,
            adapter_residual: cfg.model.adapter_residual,
        }
    }

    pub fn name(&self) -> String {
        let subset = self.selection.map_or("first", SelectionStrategy::as_str);
        let mut n = format!("{}-{}shot-{subset}", self.supervision.as_str(), self.shots);
        if !self.adapter_residual {
            n.push_str("-nonres");
        } else if self.adapter_depth != 1 {
            n.push_str(&format!("-d{}", self.adapter_depth));
        }
        n
    }

    pub fn variant(&self) -> String {
        if self.adapter_residual {
            format!("{}-layer", self.adapter_depth)
        } else {
            "non-residual".to_string()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.shots < 1 {
            return Err(Error::Config("shots must be >= 1".into()));
        }
        if self.selection.is_some() && self.shots != 1 {
            return Err(Error::Config("selected subsets are one-shot only".into()));
        }
        if !(1..=3).contains(&self.adapter_depth)
            || (!self.adapter_residual && self.adapter_depth != 1)
        {
            return Err(Error::Config(format!(
                "unsupported adapter variant (depth {}, residual {})",
                self.adapter_depth, self.adapter_residual
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Supervision,
    AdapterDepth,
    Selection,
    Shots,
}

impl AblationAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::Supervision => "supervision",
            AblationAxis::AdapterDepth => "adapter_depth",
            AblationAxis::Selection => "selection",
            AblationAxis::Shots => "shots",
        }
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervision" => Ok(AblationAxis::Supervision),
            "adapter_depth" => Ok(AblationAxis::AdapterDepth),
            "selection" => Ok(AblationAxis::Selection),
            "shots" => Ok(AblationAxis::Shots),
            other => Err(Error::Config(format!("unknown ablation axis `{other}`"))),
        }
    }
}

/// What an eval stage persists: the run it evaluated and its metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub spec: AdaptSpec,
    pub report: EvalReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub manifests: usize,
    pub files: usize,
    pub problems: Vec<String>,
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub root: PathBuf,
    pub force: bool,
}

fn rel(p: &Path, root: &Path) -> String {
    p.strip_prefix(root)
        .unwrap_or(p)
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

struct StageWriter {
    name: String,
    dir: PathBuf,
    outputs: BTreeMap<String, String>,
    started: Instant,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, root: impl Into<PathBuf>, force: bool) -> Self {
        Pipeline {
            cfg,
            root: root.into(),
            force,
        }
    }

    fn seed(&self, offset: u64, tag: &str) -> u64 {
        mix_seed(self.cfg.seed, offset, tag)
    }

    fn dims(&self, spec: Option<&AdaptSpec>) -> ModelDims {
        let mut d = ModelDims::new(
            &self.cfg.model,
            self.cfg.dataset.canonical_len,
            self.cfg.dataset.embed_dim,
        );
        if let Some(s) = spec {
            d.adapter_depth = s.adapter_depth;
            d.adapter_residual = s.adapter_residual;
        }
        d
    }

    fn begin(&self, name: &str, dir: &str) -> Result<StageWriter> {
        let dir = self.root.join(dir);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(StageWriter {
            name: name.to_string(),
            dir,
            outputs: BTreeMap::new(),
            started: Instant::now(),
        })
    }

    fn record(&self, w: &mut StageWriter, path: &Path, sha: String) {
        w.outputs.insert(rel(path, &self.root), sha);
    }

    fn finish(
        &self,
        w: StageWriter,
        params: Value,
        seeds: BTreeMap<String, u64>,
        inputs: BTreeMap<String, String>,
        metrics: BTreeMap<String, f64>,
    ) -> Result<StageResult> {
        let timings = w.dir.join(TIMINGS);
        array::write_json(
            &timings,
            &json!({ "wall_seconds": w.started.elapsed().as_secs_f64() }),
        )?;
        let manifest = RunManifest {
            stage: w.name.clone(),
            tool_version: TOOL_VERSION.to_string(),
            config: self.cfg.echo(),
            params,
            seeds,
            inputs,
            outputs: w.outputs,
            volatile: vec![rel(&timings, &self.root)],
            metrics: metrics.clone(),
        };
        array::write_json(&w.dir.join(RUN_MANIFEST), &manifest)?;
        log::info!("{}: wrote {}", w.name, rel(&w.dir, &self.root));
        Ok(StageResult {
            stage: w.name,
            dir: rel(&w.dir, &self.root),
            status: StageStatus::Ran,
            metrics,
        })
    }

    fn check_outputs(&self, m: &RunManifest) -> Result<()> {
        for (path, expected) in &m.outputs {
            let p = self.root.join(path);
            if !p.exists() {
                return Err(Error::MissingArtifact {
                    stage: m.stage.clone(),
                    path: p,
                });
            }
            let found = array::file_sha256(&p)?;
            if &found != expected {
                return Err(Error::ChecksumMismatch {
                    path: p,
                    expected: expected.clone(),
                    found,
                });
            }
        }
        Ok(())
    }

    /// Loads an upstream stage's manifest and verifies its outputs, returning
    /// `(manifest path, manifest sha)` for the downstream input list.
    fn require(&self, stage: &str, dir: &str) -> Result<(String, String)> {
        let path = self.root.join(dir).join(RUN_MANIFEST);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                stage: stage.to_string(),
                path,
            });
        }
        let m: RunManifest = array::read_json(&path)?;
        if let Err(e) = self.check_outputs(&m) {
            match e {
                Error::ChecksumMismatch { .. } if self.force => {
                    log::warn!("{e} (continuing: --force)")
                }
                other => return Err(other),
            }
        }
        Ok((rel(&path, &self.root), array::file_sha256(&path)?))
    }

    /// A previous run of this stage with identical config, params and inputs.
    fn completed(
        &self,
        name: &str,
        dir: &str,
        params: &Value,
        inputs: &BTreeMap<String, String>,
    ) -> Option<StageResult> {
        if self.force {
            return None;
        }
        let m: RunManifest = array::read_json(&self.root.join(dir).join(RUN_MANIFEST)).ok()?;
        let same = m.stage == name
            && m.config == self.cfg.echo()
            && &m.params == params
            && &m.inputs == inputs
            && m.tool_version == TOOL_VERSION;
        if !same || self.check_outputs(&m).is_err() {
            return None;
        }
        log::info!("{name}: {dir} is up to date, skipping");
        Some(StageResult {
            stage: name.to_string(),
            dir: dir.to_string(),
            status: StageStatus::Skipped,
            metrics: m.metrics,
        })
    }

    fn load_data(&self) -> Result<Dataset> {
        synthgen::load_dataset_with(&self.root.join("data"), !self.force)
    }

    pub fn gen_data(&self) -> Result<StageResult> {
        let params = json!({});
        let inputs = BTreeMap::new();
        if let Some(r) = self.completed("gen-data", "data", &params, &inputs) {
            return Ok(r);
        }
        let mut w = self.begin("gen-data", "data")?;
        let seed = self.seed(0, "dataset");
        let ds = synthgen::build_dataset(&self.cfg.dataset, seed)?;
        synthgen::save_dataset(&ds, &w.dir)?;
        let m = synthgen::read_dataset_manifest(&w.dir)?;
        for name in m
            .checksums
            .keys()
            .chain(std::iter::once(&synthgen::DATASET_MANIFEST.to_string()))
        {
            let p = w.dir.join(name);
            let sha = array::file_sha256(&p)?;
            self.record(&mut w, &p, sha);
        }
        let metrics = m
            .counts
            .iter()
            .map(|(k, v)| (k.clone(), *v as f64))
            .collect();
        self.finish(
            w,
            params,
            BTreeMap::from([("dataset".into(), seed)]),
            inputs,
            metrics,
        )
    }

    fn pretrain_subjects(&self) -> Vec<String> {
        let new = self.cfg.new_subject_id();
        (0..self.cfg.dataset.n_subjects)
            .map(synthgen::subject_id)
            .filter(|s| *s != new)
            .collect()
    }

    pub fn pretrain(&self) -> Result<StageResult> {
        let inputs = BTreeMap::from([self.require("gen-data", "data")?]);
        let params = json!({ "subjects": self.pretrain_subjects() });
        if let Some(r) = self.completed("pretrain", "pretrain", &params, &inputs) {
            return Ok(r);
        }
        let ds = self.load_data()?;
        let mut w = self.begin("pretrain", "pretrain")?;
        let _ = std::fs::remove_dir_all(w.dir.join("checkpoints"));
        let dims = self.dims(None);
        let init_seed = self.seed(0, "init");
        let train_seed = self.seed(self.cfg.pretrain.seed, "pretrain");
        let (_, encoder) = models::init_params(init_seed, &dims)?;
        let data = train::pooled_set(&ds, &self.pretrain_subjects(), Split::Train)?;
        let out = train::pretrain(&data, encoder, &self.cfg.pretrain, train_seed)?;

        let final_loss = out.log.last().map_or(f64::NAN, |r| r.report.total);
        for (epoch, params) in &out.checkpoints {
            let dir = w.dir.join("checkpoints").join(format!("epoch_{epoch:04}"));
            for (file, sha) in models::save_checkpoint(
                &dir,
                params,
                &dims,
                train_seed,
                "pretrain",
                *epoch,
                f64::NAN,
            )? {
                self.record(&mut w, &dir.join(file), sha);
            }
        }
        let enc_dir = w.dir.join("encoder");
        for (file, sha) in models::save_checkpoint(
            &enc_dir,
            &out.encoder,
            &dims,
            train_seed,
            "pretrain",
            out.log.len(),
            final_loss,
        )? {
            self.record(&mut w, &enc_dir.join(file), sha);
        }
        let log_path = w.dir.join("train_log.csv");
        let sha = train::write_log_csv(&log_path, &out.log)?;
        self.record(&mut w, &log_path, sha);

        let test = train::pooled_set(&ds, &self.pretrain_subjects(), Split::Test)?;
        let pred = train::predict(None, &out.encoder, &test.inputs)?;
        let metrics = BTreeMap::from([
            ("final_loss".to_string(), final_loss),
            ("steps".to_string(), out.log.len() as f64),
            (
                "test_two_way".to_string(),
                eval::two_way_identification(pred.brain.view(), test.targets.view())?,
            ),
        ]);
        let seeds = BTreeMap::from([("init".into(), init_seed), ("train".into(), train_seed)]);
        self.finish(w, params, seeds, inputs, metrics)
    }

    fn new_subject_pooled(
        &self,
        ds: &Dataset,
        split: Split,
    ) -> Result<Vec<crate::spectral::PooledVoxels>> {
        let subj = self.cfg.new_subject_id();
        ds.samples_for(&subj, split)
            .map(|s| pool_series(&s.series, self.cfg.dataset.canonical_len))
            .collect()
    }

    fn select_dir(strategy: SelectionStrategy) -> String {
        format!("select/{}", strategy.as_str())
    }

    pub fn select(&self, strategy: SelectionStrategy) -> Result<StageResult> {
        let inputs = BTreeMap::from([self.require("gen-data", "data")?]);
        let dir = Self::select_dir(strategy);
        let params = json!({
            "strategy": strategy,
            "method": self.cfg.selection.method,
            "subject_id": self.cfg.new_subject_id(),
        });
        if let Some(r) = self.completed("select", &dir, &params, &inputs) {
            return Ok(r);
        }
        let ds = self.load_data()?;
        let mut w = self.begin("select", &dir)?;
        let seed = self.seed(0, "select");
        let samples = self.new_subject_pooled(&ds, Split::Train)?;
        let file = select::select_all(
            &self.cfg.new_subject_id(),
            &samples,
            self.cfg.selection.method,
            strategy,
            seed,
        )?;
        let path = w.dir.join("selection.json");
        let sha = array::write_json(&path, &file)?;
        self.record(&mut w, &path, sha);
        let metrics = BTreeMap::from([("classes".to_string(), file.classes.len() as f64)]);
        self.finish(
            w,
            params,
            BTreeMap::from([("select".into(), seed)]),
            inputs,
            metrics,
        )
    }

    pub fn adapt(&self, spec: &AdaptSpec) -> Result<StageResult> {
        spec.validate()?;
        let mut inputs = BTreeMap::from([
            self.require("gen-data", "data")?,
            self.require("pretrain", "pretrain")?,
        ]);
        if let Some(s) = spec.selection {
            inputs.extend([self.require("select", &Self::select_dir(s))?]);
        }
        let dir = format!("adapt/{}", spec.name());
        let params = serde_json::to_value(spec).expect("spec serializes");
        if let Some(r) = self.completed("adapt", &dir, &params, &inputs) {
            return Ok(r);
        }
        let ds = self.load_data()?;
        let (encoder, _) = models::load_encoder(&self.root.join("pretrain/encoder"))?;
        let subj = self.cfg.new_subject_id();
        let few = match spec.selection {
            None => synthgen::few_shot_subset(&ds, &subj, spec.shots)?,
            Some(s) => {
                let sel: SelectionFile =
                    array::read_json(&self.root.join(Self::select_dir(s)).join("selection.json"))?;
                synthgen::subset_by_ids(&ds, &subj, &sel.chosen_ids())?
            }
        };
        let anchors = train::pooled_set(&few, &[subj], Split::Train)?;
        let partners = train::pooled_set(&ds, &self.pretrain_subjects(), Split::Train)?;

        let mut w = self.begin("adapt", &dir)?;
        let dims = self.dims(Some(spec));
        let init_seed = self.seed(0, "adapter-init");
        let train_seed = self.seed(self.cfg.adapt.seed, "adapt");
        let adapter = AdapterParams::init(
            dims.input_len,
            spec.adapter_depth,
            spec.adapter_residual,
            &mut rng(init_seed, 0),
        )?;
        let cfg = crate::config::TrainConfig {
            supervision: spec.supervision,
            shots: spec.shots,
            ..self.cfg.adapt.clone()
        };
        let before = encoder.checksum();
        let out = train::adapt(&anchors, &partners, &encoder, adapter, &cfg, train_seed)?;
        debug_assert_eq!(before, encoder.checksum());

        let final_loss = out.log.last().map_or(f64::NAN, |r| r.report.total);
        let ad_dir = w.dir.join("adapter");
        for (file, sha) in models::save_checkpoint(
            &ad_dir,
            &out.adapter,
            &dims,
            train_seed,
            "adapt",
            out.log.len(),
            final_loss,
        )? {
            self.record(&mut w, &ad_dir.join(file), sha);
        }
        let log_path = w.dir.join("train_log.csv");
        let sha = train::write_log_csv(&log_path, &out.log)?;
        self.record(&mut w, &log_path, sha);
        let metrics = BTreeMap::from([
            ("final_loss".to_string(), final_loss),
            ("steps".to_string(), out.log.len() as f64),
            ("anchors".to_string(), anchors.len() as f64),
            ("adapter_params".to_string(), out.adapter.n_params() as f64),
            ("encoder_params".to_string(), encoder.n_params() as f64),
        ]);
        let seeds = BTreeMap::from([("init".into(), init_seed), ("train".into(), train_seed)]);
        self.finish(w, params, seeds, inputs, metrics)
    }

    pub fn eval(&self, spec: &AdaptSpec) -> Result<StageResult> {
        let name = spec.name();
        let inputs = BTreeMap::from([
            self.require("gen-data", "data")?,
            self.require("pretrain", "pretrain")?,
            self.require("adapt", &format!("adapt/{name}"))?,
        ]);
        let dir = format!("eval/{name}");
        let params = serde_json::to_value(spec).expect("spec serializes");
        if let Some(r) = self.completed("eval", &dir, &params, &inputs) {
            return Ok(r);
        }
        let ds = self.load_data()?;
        let (encoder, _) = models::load_encoder(&self.root.join("pretrain/encoder"))?;
        let (adapter, _) = models::load_adapter(&self.root.join(format!("adapt/{name}/adapter")))?;
        let subj = self.cfg.new_subject_id();
        let test = train::pooled_set(&ds, std::slice::from_ref(&subj), Split::Test)?;
        let out = train::predict(Some(&adapter), &encoder, &test.inputs)?;
        let pred = match self.cfg.eval.head {
            EmbeddingHead::Contrastive => out.brain,
            EmbeddingHead::Prior => out.refined,
        };

        let mut w = self.begin("eval", &dir)?;
        let pred_path = w.dir.join("predictions.msarr");
        let sha = array::write(&pred_path, &pred.clone().into_dyn())?;
        self.record(&mut w, &pred_path, sha);
        let record = self.report_from_predictions(&ds, spec, &pred)?;
        let rep_path = w.dir.join("eval_report.json");
        let sha = array::write_json(&rep_path, &record)?;
        self.record(&mut w, &rep_path, sha);
        let r = &record.report;
        let mut metrics = BTreeMap::from([
            ("two_way".to_string(), r.two_way_accuracy),
            ("mean_cosine".to_string(), r.mean_cosine),
        ]);
        metrics.extend(r.topk.iter().map(|(k, v)| (k.clone(), *v)));
        self.finish(w, params, BTreeMap::new(), inputs, metrics)
    }

    /// Rebuilds an evaluation record from stored predictions.
    pub fn report_from_predictions(
        &self,
        ds: &Dataset,
        spec: &AdaptSpec,
        pred: &ndarray::Array2<f64>,
    ) -> Result<EvalRecord> {
        let subj = self.cfg.new_subject_id();
        let test = train::pooled_set(ds, std::slice::from_ref(&subj), Split::Test)?;
        let report = eval::build_report(
            &EvalInput {
                run: &spec.name(),
                subject_id: &subj,
                pred: pred.view(),
                targets: test.targets.view(),
                class_ids: &test.class_ids,
            },
            &ds.stimulus_set,
            &self.cfg.eval.topk,
        )?;
        Ok(EvalRecord {
            spec: spec.clone(),
            report,
        })
    }

    /// Adaptation followed by evaluation.
    pub fn adapt_and_eval(&self, spec: &AdaptSpec) -> Result<Vec<StageResult>> {
        Ok(vec![self.adapt(spec)?, self.eval(spec)?])
    }

    fn read_eval(&self, spec: &AdaptSpec) -> Result<(String, String, EvalRecord)> {
        let dir = format!("eval/{}", spec.name());
        let (m, sha) = self.require("eval", &dir)?;
        let rec: EvalRecord = array::read_json(&self.root.join(&dir).join("eval_report.json"))?;
        Ok((m, sha, rec))
    }

    /// The runs making up each comparison table for the current config.
    pub fn table_specs(&self) -> Vec<(&'static str, &'static str, Vec<AdaptSpec>)> {
        let base = AdaptSpec {
            selection: None,
            ..AdaptSpec::from_config(&self.cfg)
        };
        let supervision = Supervision::ALL
            .iter()
            .map(|&s| AdaptSpec {
                supervision: s,
                ..base.clone()
            })
            .collect();
        let shots = (1..=3.min(self.cfg.dataset.train_per_class))
            .map(|k| AdaptSpec {
                shots: k,
                ..base.clone()
            })
            .collect();
        let selection = SelectionStrategy::ALL
            .iter()
            .map(|&s| AdaptSpec {
                shots: 1,
                selection: Some(s),
                ..base.clone()
            })
            .collect();
        vec![
            ("supervision", "supervision", supervision),
            ("few_shot", "shots", shots),
            ("selection", "strategy", selection),
        ]
    }

    fn label(spec: &AdaptSpec, column: &str) -> BTreeMap<String, String> {
        let v = match column {
            "supervision" => spec.supervision.as_str().to_string(),
            "shots" => spec.shots.to_string(),
            "strategy" => spec
                .selection
                .map_or("first", SelectionStrategy::as_str)
                .to_string(),
            "variant" => spec.variant(),
            _ => spec.name(),
        };
        BTreeMap::from([(column.to_string(), v)])
    }

    /// Writes the comparison tables for every evaluated run of the standard sweeps.
    pub fn report(&self) -> Result<StageResult> {
        let mut inputs = BTreeMap::new();
        let mut tables = Vec::new();
        for (table, column, specs) in self.table_specs() {
            let mut rows = Vec::new();
            for spec in specs {
                let (m, sha, rec) = self.read_eval(&spec)?;
                inputs.insert(m, sha);
                rows.push(TableRow {
                    label: Self::label(&spec, column),
                    report: rec.report,
                });
            }
            tables.push((table, rows));
        }
        let params = json!({ "tables": tables.iter().map(|t| t.0).collect::<Vec<_>>() });
        if let Some(r) = self.completed("report", "report", &params, &inputs) {
            return Ok(r);
        }
        let mut w = self.begin("report", "report")?;
        let mut metrics = BTreeMap::new();
        for (table, rows) in &tables {
            let path = w.dir.join("tables").join(format!("{table}.csv"));
            let sha = eval::write_table(&path, rows)?;
            self.record(&mut w, &path, sha);
            for r in rows {
                let label = r.label.values().next().cloned().unwrap_or_default();
                metrics.insert(
                    format!("{table}/{label}/two_way"),
                    r.report.two_way_accuracy,
                );
            }
        }
        self.finish(w, params, BTreeMap::new(), inputs, metrics)
    }

    /// Runs (or reuses) every adaptation along `axis` and writes one table.
    pub fn ablate(&self, axis: AblationAxis) -> Result<Vec<StageResult>> {
        let base = AdaptSpec {
            selection: None,
            ..AdaptSpec::from_config(&self.cfg)
        };
        let (column, specs): (&str, Vec<AdaptSpec>) = match axis {
            AblationAxis::Supervision => ("supervision", self.table_specs()[0].2.clone()),
            AblationAxis::Shots => ("shots", self.table_specs()[1].2.clone()),
            AblationAxis::AdapterDepth => (
                "variant",
                [(1, true), (2, true), (3, true), (1, false)]
                    .into_iter()
                    .map(|(d, r)| AdaptSpec {
                        adapter_depth: d,
                        adapter_residual: r,
                        ..base.clone()
                    })
                    .collect(),
            ),
            AblationAxis::Selection => (
                "run",
                SelectionStrategy::ALL
                    .iter()
                    .flat_map(|&st| {
                        Supervision::ALL.iter().map(move |&su| AdaptSpec {
                            supervision: su,
                            shots: 1,
                            selection: Some(st),
                            adapter_depth: 1,
                            adapter_residual: true,
                        })
                    })
                    .collect(),
            ),
        };
        let mut results = vec![self.gen_data()?, self.pretrain()?];
        if axis == AblationAxis::Selection {
            for s in SelectionStrategy::ALL {
                results.push(self.select(s)?);
            }
        }
        for spec in &specs {
            results.extend(self.adapt_and_eval(spec)?);
        }

        let mut inputs = BTreeMap::new();
        let mut rows = Vec::new();
        for spec in &specs {
            let (m, sha, rec) = self.read_eval(spec)?;
            inputs.insert(m, sha);
            let mut label = Self::label(spec, column);
            if axis == AblationAxis::Selection {
                label = BTreeMap::from([
                    (
                        "strategy".to_string(),
                        spec.selection
                            .map_or("first", SelectionStrategy::as_str)
                            .to_string(),
                    ),
                    (
                        "supervision".to_string(),
                        spec.supervision.as_str().to_string(),
                    ),
                ]);
            }
            rows.push(TableRow {
                label,
                report: rec.report,
            });
        }
        let dir = format!("ablate/{}", axis.as_str());
        let params = json!({ "axis": axis.as_str(), "runs": specs.iter().map(AdaptSpec::name).collect::<Vec<_>>() });
        if let Some(r) = self.completed("ablate", &dir, &params, &inputs) {
            results.push(r);
            return Ok(results);
        }
        let mut w = self.begin("ablate", &dir)?;
        let path = w.dir.join("table.csv");
        let sha = eval::write_table(&path, &rows)?;
        self.record(&mut w, &path, sha);
        let metrics = rows
            .iter()
            .map(|r| (r.report.run.clone(), r.report.two_way_accuracy))
            .collect();
        results.push(self.finish(w, params, BTreeMap::new(), inputs, metrics)?);
        Ok(results)
    }

    /// Every stage needed for the report tables.
    pub fn run_all(&self) -> Result<Vec<StageResult>> {
        let mut results = vec![self.gen_data()?, self.pretrain()?];
        for s in SelectionStrategy::ALL {
            results.push(self.select(s)?);
        }
        let mut seen = BTreeSet::new();
        for (_, _, specs) in self.table_specs() {
            for spec in specs {
                if seen.insert(spec.name()) {
                    results.extend(self.adapt_and_eval(&spec)?);
                }
            }
        }
        results.push(self.report()?);
        Ok(results)
    }

    /// Checks every manifest's outputs and that each file on disk belongs to exactly one manifest.
    pub fn verify(&self) -> Result<VerifyReport> {
        let mut report = VerifyReport::default();
        let mut files = BTreeSet::new();
        collect_files(&self.root, &self.root, &mut files)?;
        report.files = files.len();
        let mut owner: BTreeMap<String, String> = BTreeMap::new();
        for f in files.iter().filter(|f| f.ends_with(RUN_MANIFEST)) {
            report.manifests += 1;
            let m: RunManifest = match array::read_json(&self.root.join(f)) {
                Ok(m) => m,
                Err(e) => {
                    report
                        .problems
                        .push(format!("{f}: unreadable manifest: {e}"));
                    continue;
                }
            };
            if let Err(e) = self.check_outputs(&m) {
                report.problems.push(format!("{f}: {e}"));
            }
            for (input, sha) in &m.inputs {
                match array::file_sha256(&self.root.join(input)) {
                    Ok(found) if &found == sha => {}
                    Ok(_) => report.problems.push(format!(
                        "{f}: upstream {input} changed since this stage ran"
                    )),
                    Err(_) => report
                        .problems
                        .push(format!("{f}: upstream {input} is missing")),
                }
            }
            let owned = m
                .outputs
                .keys()
                .chain(&m.volatile)
                .cloned()
                .chain(std::iter::once(f.clone()));
            for o in owned {
                if let Some(prev) = owner.insert(o.clone(), f.clone()) {
                    if &prev != f {
                        report
                            .problems
                            .push(format!("{o} is claimed by both {prev} and {f}"));
                    }
                }
            }
        }
        for f in &files {
            if !owner.contains_key(f) {
                report
                    .problems
                    .push(format!("{f} is not reachable from any manifest"));
            }
        }
        if report.problems.is_empty() {
            Ok(report)
        } else {
            Err(Error::Verify(report.problems.join("; ")))
        }
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeSet<String>) -> Result<()> {
    if !dir.exists() {
        return Err(Error::MissingArtifact {
            stage: "verify".into(),
            path: dir.to_path_buf(),
        });
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.insert(rel(&p, root));
        }
    }
    Ok(())
}

/// Pooled test predictions for a stored evaluation, for regenerating reports.
pub fn load_predictions(root: &Path, spec: &AdaptSpec) -> Result<ndarray::Array2<f64>> {
    let p = root
        .join("eval")
        .join(spec.name())
        .join("predictions.msarr");
    let a = array::read(&p)?;
    let shape = a.shape().to_vec();
    a.into_dimensionality().map_err(|_| Error::Container {
        path: p,
        reason: format!("expected a matrix, got shape {shape:?}"),
    })
}
