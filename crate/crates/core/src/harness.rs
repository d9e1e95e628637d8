//! End-to-end experiment orchestration on synthetic biased datasets:
//! per-dataset scorers, ensemble pair labels, the pairwise-trained scorer,
//! cross-dataset matrices and the two ablations.
//!
//! Every unit of work is keyed by a hash of its configuration and input
//! artifact hashes. Outputs are written under content-addressed names and
//! recorded in `state.json`; a unit whose key is already recorded, and whose
//! artifacts still verify, is reused instead of recomputed.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{
    load_manifest, rescale_mos, split_dataset, DatasetManifest, DEFAULT_TRAIN_FRACTION,
};
use crate::error::{Error, Result};
use crate::metrics::{
    cross_dataset_matrix, evaluate, CrossMatrix, EvalReport, EvalSet, LookupPredictor, ModelEntry,
    Predictor, ScorerPredictor, DEFAULT_TEST_PATCHES, MIN_FIT_LEN,
};
use crate::pseudolabel::{
    generate_pair_manifest, pool_crops, EnsembleMember, EnsembleSnapshot, MemberProvenance,
    PairManifest, Preprocess,
};
use crate::rng::derive_seed;
use crate::scorer::{decode_params, encode_params, ScorerConfig, ScorerParams};
use crate::synthbench::{
    gen_biased_dataset, truth_path_for, BiasedDatasetConfig, DegradationKind, GroundTruth,
    LabelRemap, DEFAULT_IMAGE_SIZE,
};
use crate::trainer::{pairwise_loss, train_pairwise, train_single, EpochLog, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;
pub const STATE_FILE: &str = "state.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CDR_MODEL: &str = "cdr";

/// A synthetic dataset as listed in an experiment; its seed is derived from
/// the experiment seed and its name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub n_images: usize,
    pub allowed_kinds: Vec<DegradationKind>,
    pub label_remap: LabelRemap,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
}

fn default_image_size() -> usize {
    DEFAULT_IMAGE_SIZE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub name: String,
    pub n_images: usize,
    #[serde(default = "all_kinds")]
    pub allowed_kinds: Vec<DegradationKind>,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
}

fn all_kinds() -> Vec<DegradationKind> {
    DegradationKind::ALL.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSpec {
    pub n_pairs: usize,
    #[serde(default)]
    pub keep_per_model: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    #[serde(default = "default_test_patches")]
    pub n_patches: usize,
}

fn default_test_patches() -> usize {
    DEFAULT_TEST_PATCHES
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            n_patches: DEFAULT_TEST_PATCHES,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    /// Pair counts for the pair-count ablation; nested prefixes of one list.
    #[serde(default)]
    pub pair_ladder: Vec<usize>,
    /// Ensemble subsets (dataset names) for the ensemble ablation.
    #[serde(default)]
    pub ensembles: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub datasets: Vec<DatasetSpec>,
    pub pool: PoolSpec,
    pub preprocess: Preprocess,
    pub scorer: ScorerConfig,
    pub stage1: TrainConfig,
    pub stage3: TrainConfig,
    pub pairs: PairSpec,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default)]
    pub ablation: AblationSpec,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    /// Reference configuration: three biased datasets, sized to finish in minutes on one core.
    pub fn reference() -> Self {
        let ds = |name: &str, kinds: &[DegradationKind], remap| DatasetSpec {
            name: name.into(),
            n_images: 300,
            allowed_kinds: kinds.to_vec(),
            label_remap: remap,
            image_size: DEFAULT_IMAGE_SIZE,
        };
        use DegradationKind::*;
        Self {
            version: CONFIG_VERSION,
            seed: 42,
            output_dir: default_output_dir(),
            datasets: vec![
                ds("blur", &[GaussianBlur], LabelRemap::Identity),
                ds("noise", &[AdditiveNoise], LabelRemap::Sqrt),
                ds(
                    "mixed",
                    &[GaussianBlur, AdditiveNoise, ContrastReduction],
                    LabelRemap::Square,
                ),
            ],
            pool: PoolSpec {
                name: "pool".into(),
                n_images: 1000,
                allowed_kinds: all_kinds(),
                image_size: DEFAULT_IMAGE_SIZE,
            },
            preprocess: Preprocess {
                short_side: DEFAULT_IMAGE_SIZE,
                crop: 32,
            },
            scorer: ScorerConfig::default(),
            stage1: TrainConfig {
                epochs: 30,
                ..TrainConfig::default()
            },
            stage3: TrainConfig {
                epochs: 10,
                ..TrainConfig::default()
            },
            pairs: PairSpec {
                n_pairs: 5000,
                keep_per_model: false,
            },
            eval: EvalSpec::default(),
            ablation: AblationSpec {
                pair_ladder: vec![500, 5000],
                ensembles: vec![
                    vec!["blur".into()],
                    vec!["noise".into()],
                    vec!["mixed".into()],
                    vec!["blur".into(), "noise".into(), "mixed".into()],
                ],
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.datasets.len() < 2 {
            return Err(Error::Config(format!(
                "cross-dataset testing needs at least 2 datasets, found {}",
                self.datasets.len()
            )));
        }
        let mut names: Vec<&str> = self.datasets.iter().map(|d| d.name.as_str()).collect();
        names.push(&self.pool.name);
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != names.len() {
            return Err(Error::Config(
                "dataset and pool names must be distinct".into(),
            ));
        }
        for d in &self.datasets {
            self.dataset_config(d).validate()?;
            let held_out =
                d.n_images - (DEFAULT_TRAIN_FRACTION * d.n_images as f64).round() as usize;
            if held_out < MIN_FIT_LEN {
                return Err(Error::Config(format!(
                    "dataset {}: {} images leave {held_out} for the held-out evaluation, need at least {MIN_FIT_LEN}",
                    d.name, d.n_images
                )));
            }
        }
        self.pool_config().validate()?;
        self.scorer.validate()?;
        self.stage1.validate()?;
        self.stage3.validate()?;
        if self.preprocess.crop != self.scorer.patch_size {
            return Err(Error::Config(format!(
                "preprocess crop {} must equal scorer patch size {}",
                self.preprocess.crop, self.scorer.patch_size
            )));
        }
        if self.preprocess.crop > self.preprocess.short_side {
            return Err(Error::Config("preprocess crop exceeds short_side".into()));
        }
        let smallest = self
            .datasets
            .iter()
            .map(|d| d.image_size)
            .chain([self.pool.image_size])
            .min()
            .unwrap();
        if smallest < self.scorer.patch_size {
            return Err(Error::Config(format!(
                "image size {smallest} is smaller than the patch size {}",
                self.scorer.patch_size
            )));
        }
        let capacity = self.pool.n_images * self.pool.n_images.saturating_sub(1);
        for &n in self
            .ablation
            .pair_ladder
            .iter()
            .chain([&self.pairs.n_pairs])
        {
            if n == 0 || n > capacity {
                return Err(Error::Config(format!(
                    "pair count {n} must be in 1..={capacity} for a pool of {}",
                    self.pool.n_images
                )));
            }
        }
        for subset in &self.ablation.ensembles {
            if subset.is_empty() {
                return Err(Error::Config("empty ensemble subset".into()));
            }
            if let Some(n) = subset
                .iter()
                .find(|n| !self.datasets.iter().any(|d| &d.name == *n))
            {
                return Err(Error::Config(format!(
                    "ensemble subset names unknown dataset {n:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn dataset_config(&self, d: &DatasetSpec) -> BiasedDatasetConfig {
        BiasedDatasetConfig {
            name: d.name.clone(),
            n_images: d.n_images,
            allowed_kinds: d.allowed_kinds.clone(),
            label_remap: d.label_remap,
            seed: derive_seed(self.seed, &format!("dataset/{}", d.name)),
            image_size: d.image_size,
        }
    }

    pub fn pool_config(&self) -> BiasedDatasetConfig {
        BiasedDatasetConfig {
            name: self.pool.name.clone(),
            n_images: self.pool.n_images,
            allowed_kinds: self.pool.allowed_kinds.clone(),
            label_remap: LabelRemap::Identity,
            seed: derive_seed(self.seed, "pool"),
            image_size: self.pool.image_size,
        }
    }

    fn unit_seed(&self, unit: &str) -> u64 {
        derive_seed(self.seed, unit)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn json_hash<T: Serialize>(v: &T) -> String {
    sha256_hex(&serde_json::to_vec(v).expect("key material serializes"))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub kind: String,
    /// Relative to the output directory.
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub label: String,
    pub artifacts: Vec<Artifact>,
    /// Hashes of the artifacts this unit consumed.
    pub inputs: Vec<String>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentState {
    pub version: u32,
    pub units: BTreeMap<String, UnitRecord>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageStatus {
    pub stage: String,
    pub unit: String,
    pub status: String,
}

pub const STATUS_RAN: &str = "ran";
pub const STATUS_SKIPPED: &str = "skipped (up to date)";

#[derive(Clone, Debug)]
pub struct DatasetArtifact {
    pub name: String,
    pub manifest: DatasetManifest,
    pub truth: GroundTruth,
    pub manifest_path: PathBuf,
    pub digest: String,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub name: String,
    pub trained_on: String,
    pub params: Arc<ScorerParams>,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug)]
pub struct PairArtifact {
    pub manifest: PairManifest,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRef {
    pub name: String,
    pub trained_on: String,
    pub path: PathBuf,
    pub sha256: String,
}

impl From<&TrainedModel> for ModelRef {
    fn from(m: &TrainedModel) -> Self {
        Self {
            name: m.name.clone(),
            trained_on: m.trained_on.clone(),
            path: m.path.clone(),
            sha256: m.sha256.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossEvalReport {
    pub models: Vec<ModelRef>,
    pub datasets: Vec<(String, String)>,
    /// Predictions against true quality.
    pub truth: CrossMatrix,
    /// Predictions against each dataset's own (biased) labels.
    pub labels: CrossMatrix,
    /// SRCC of a lookup scorer returning true quality, per dataset.
    pub oracle_control: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub version: u32,
    pub seed: u64,
    pub datasets: Vec<(String, String)>,
    pub stage1_models: Vec<ModelRef>,
    /// Each per-dataset scorer on the held-out side of its own split.
    pub stage1_test: Vec<EvalReport>,
    pub pairs: (PathBuf, String),
    pub cdr_model: ModelRef,
    pub cdr_pair_loss_before: f64,
    pub cdr_pair_loss_after: f64,
    pub cross_eval: CrossEvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub n_pairs: usize,
    pub ensemble: Vec<String>,
    pub pairs_sha256: String,
    pub model: ModelRef,
    pub srcc: Vec<(String, f64)>,
    pub mean_srcc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub kind: String,
    pub rows: Vec<AblationRow>,
}

pub type Reporter<'r> = dyn Fn(&str) + Sync + 'r;

pub struct Experiment<'a> {
    pub config: ExperimentConfig,
    root: PathBuf,
    state: ExperimentState,
    force: bool,
    statuses: Vec<StageStatus>,
    report: &'a Reporter<'a>,
}

impl<'a> Experiment<'a> {
    /// Opens (or creates) an output directory. `force` ignores recorded units.
    pub fn open(
        config: ExperimentConfig,
        root: &Path,
        force: bool,
        report: &'a Reporter<'a>,
    ) -> Result<Self> {
        config.validate()?;
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let state_path = root.join(STATE_FILE);
        let state = if state_path.exists() && !force {
            let text = fs::read_to_string(&state_path).map_err(|e| Error::io(&state_path, e))?;
            serde_json::from_str(&text)?
        } else {
            ExperimentState {
                version: CONFIG_VERSION,
                units: BTreeMap::new(),
            }
        };
        Ok(Self {
            config,
            root: root.to_path_buf(),
            state,
            force,
            statuses: Vec::new(),
            report,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn statuses(&self) -> &[StageStatus] {
        &self.statuses
    }

    pub fn state(&self) -> &ExperimentState {
        &self.state
    }

    fn save_state(&self) -> Result<()> {
        let path = self.root.join(STATE_FILE);
        let text = serde_json::to_string_pretty(&self.state)?;
        write_atomic(&path, text.as_bytes())
    }

    fn verify(&self, record: &UnitRecord) -> Result<()> {
        for a in &record.artifacts {
            let path = self.root.join(&a.path);
            let actual = match a.kind.as_str() {
                "dataset" => dataset_digest(&path)?,
                _ => file_sha256(&path)?,
            };
            if actual != a.sha256 {
                return Err(Error::StaleArtifact {
                    path,
                    reason: format!("hash {} != recorded {}", &actual[..12], &a.sha256[..12]),
                });
            }
        }
        Ok(())
    }

    /// A recorded unit whose artifacts all still verify.
    fn reusable(&self, key: &str) -> Option<UnitRecord> {
        if self.force {
            return None;
        }
        let rec = self.state.units.get(key)?;
        match self.verify(rec) {
            Ok(()) => Some(rec.clone()),
            Err(e) => {
                (self.report)(&format!("[state] refusing to reuse {}: {e}", rec.label));
                None
            }
        }
    }

    fn record(&mut self, stage: &str, key: String, record: UnitRecord, ran: bool) -> Result<()> {
        self.statuses.push(StageStatus {
            stage: stage.into(),
            unit: record.label.clone(),
            status: if ran { STATUS_RAN } else { STATUS_SKIPPED }.into(),
        });
        (self.report)(&format!(
            "[{stage}] {}: {}",
            record.label,
            if ran { STATUS_RAN } else { STATUS_SKIPPED }
        ));
        if ran {
            self.state.units.insert(key, record);
            self.save_state()?;
        }
        Ok(())
    }

    fn rel(&self, path: &Path) -> PathBuf {
        path.strip_prefix(&self.root).unwrap_or(path).to_path_buf()
    }

    fn epoch_logger(&self, unit: &str) -> Result<impl FnMut(&EpochLog) + use<'a>> {
        let dir = self.root.join("logs");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!("{unit}.jsonl"));
        let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let report = self.report;
        let unit = unit.to_string();
        Ok(move |log: &EpochLog| {
            let _ = writeln!(file, "{}", log.to_json_line());
            report(&format!(
                "[{}] {unit} epoch {} lr {:.3e} loss {:.6} ({:.1}s)",
                log.stage, log.epoch, log.lr, log.loss, log.seconds
            ));
        })
    }

    fn load_dataset(&self, rel_csv: &Path, digest: String) -> Result<DatasetArtifact> {
        let path = self.root.join(rel_csv);
        let manifest = rescale_mos(&load_manifest(&path)?)?;
        let truth = GroundTruth::read_csv(&truth_path_for(&path))?;
        Ok(DatasetArtifact {
            name: manifest.name.clone(),
            manifest,
            truth,
            manifest_path: path,
            digest,
        })
    }

    fn ensure_dataset(&mut self, cfg: BiasedDatasetConfig) -> Result<DatasetArtifact> {
        let key = json_hash(&("dataset", &cfg));
        if let Some(rec) = self.reusable(&key) {
            let a = &rec.artifacts[0];
            let out = self.load_dataset(&a.path, a.sha256.clone())?;
            self.record("datasets", key, rec, false)?;
            return Ok(out);
        }
        let dir = self.root.join("datasets");
        let gen = gen_biased_dataset(&cfg, &dir)?;
        let digest = dataset_digest(&gen.manifest_path)?;
        let rel = self.rel(&gen.manifest_path);
        let rec = UnitRecord {
            label: cfg.name.clone(),
            artifacts: vec![Artifact {
                kind: "dataset".into(),
                path: rel,
                sha256: digest.clone(),
            }],
            inputs: vec![],
            meta: serde_json::json!({ "seed": cfg.seed }),
        };
        self.record("datasets", key, rec, true)?;
        Ok(DatasetArtifact {
            name: cfg.name.clone(),
            manifest: rescale_mos(&gen.manifest)?,
            truth: gen.truth,
            manifest_path: gen.manifest_path,
            digest,
        })
    }

    /// Generates (or reuses) every labelled dataset and the unlabelled pool.
    pub fn run_datasets(&mut self) -> Result<(Vec<DatasetArtifact>, DatasetArtifact)> {
        let mut out = Vec::new();
        for d in self.config.datasets.clone() {
            let cfg = self.config.dataset_config(&d);
            out.push(self.ensure_dataset(cfg)?);
        }
        let pool = self.ensure_dataset(self.config.pool_config())?;
        Ok((out, pool))
    }

    fn save_model(&self, stem: &str, params: &ScorerParams) -> Result<(PathBuf, String)> {
        write_addressed(
            &self.root.join("models"),
            stem,
            "bin",
            &encode_params(params),
        )
    }

    fn load_model(&self, a: &Artifact, name: &str, trained_on: &str) -> Result<TrainedModel> {
        let path = self.root.join(&a.path);
        let params = decode_params(&fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
        params.ensure_config(&self.config.scorer)?;
        Ok(TrainedModel {
            name: name.into(),
            trained_on: trained_on.into(),
            params: Arc::new(params),
            path: a.path.clone(),
            sha256: a.sha256.clone(),
        })
    }

    /// One scorer per dataset, trained on the 80% side of a seeded split,
    /// plus its evaluation on the held-out 20%.
    pub fn run_stage1(
        &mut self,
        datasets: &[DatasetArtifact],
    ) -> Result<(Vec<TrainedModel>, Vec<EvalReport>)> {
        struct Job {
            key: String,
            name: String,
            split_seed: u64,
            train: TrainConfig,
        }
        let mut jobs = Vec::new();
        let mut done: BTreeMap<usize, (TrainedModel, EvalReport, UnitRecord, String, bool)> =
            BTreeMap::new();
        for (i, d) in datasets.iter().enumerate() {
            let split_seed = self.config.unit_seed(&format!("split/{}", d.name));
            let train = TrainConfig {
                seed: self.config.unit_seed(&format!("stage1/{}", d.name)),
                ..self.config.stage1.clone()
            };
            let key = json_hash(&(
                "stage1",
                &d.digest,
                split_seed,
                &train,
                &self.config.scorer,
                &self.config.eval,
            ));
            if let Some(rec) = self.reusable(&key) {
                let model =
                    self.load_model(&rec.artifacts[0], &format!("stage1-{}", d.name), &d.name)?;
                let report: EvalReport = serde_json::from_value(rec.meta["test"].clone())?;
                done.insert(i, (model, report, rec, key, false));
            } else {
                jobs.push((
                    i,
                    Job {
                        key,
                        name: d.name.clone(),
                        split_seed,
                        train,
                    },
                ));
            }
        }

        let mut loggers = Vec::new();
        for (_, job) in &jobs {
            loggers.push(std::sync::Mutex::new(
                self.epoch_logger(&format!("stage1-{}", job.name))?,
            ));
        }
        let scorer = self.config.scorer.clone();
        let eval_seed = self.config.unit_seed("eval");
        let n_patches = self.config.eval.n_patches;
        let trained: Vec<(ScorerParams, EvalReport)> = jobs
            .par_iter()
            .zip(&loggers)
            .map(|((i, job), logger)| {
                let d = &datasets[*i];
                let split = split_dataset(&d.manifest, job.split_seed, DEFAULT_TRAIN_FRACTION)?;
                let params = train_single(&d.manifest, &split, &scorer, &job.train, |l| {
                    (logger.lock().unwrap())(l)
                })?;
                let predictor = ScorerPredictor {
                    params: Arc::new(params.clone()),
                    n_patches,
                    seed: eval_seed,
                };
                let test = EvalSet::subset(&d.manifest, &split.test_ids)?;
                let report = evaluate(
                    &predictor,
                    &test,
                    &format!("stage1-{}", d.name),
                    &d.name,
                    job.split_seed,
                )?;
                Ok((params, report))
            })
            .collect::<Result<_>>()?;
        drop(loggers);

        for ((i, job), (params, report)) in jobs.into_iter().zip(trained) {
            let d = &datasets[i];
            let (path, sha) = self.save_model(&format!("stage1-{}", d.name), &params)?;
            let rel = self.rel(&path);
            let rec = UnitRecord {
                label: format!("stage1-{}", d.name),
                artifacts: vec![Artifact {
                    kind: "model".into(),
                    path: rel.clone(),
                    sha256: sha.clone(),
                }],
                inputs: vec![d.digest.clone()],
                meta: serde_json::json!({ "trained_on": d.name, "test": report }),
            };
            let model = TrainedModel {
                name: format!("stage1-{}", d.name),
                trained_on: d.name.clone(),
                params: Arc::new(params),
                path: rel,
                sha256: sha,
            };
            done.insert(i, (model, report, rec, job.key, true));
        }

        let mut models = Vec::new();
        let mut reports = Vec::new();
        for (_, (model, report, rec, key, ran)) in done {
            self.record("stage1", key, rec, ran)?;
            models.push(model);
            reports.push(report);
        }
        Ok((models, reports))
    }

    fn snapshot(models: &[&TrainedModel]) -> Result<EnsembleSnapshot> {
        EnsembleSnapshot::new(
            models
                .iter()
                .map(|m| EnsembleMember {
                    provenance: MemberProvenance {
                        source: m.trained_on.clone(),
                        model_hash: m.sha256.clone(),
                    },
                    params: m.params.clone(),
                })
                .collect(),
        )
    }

    fn ensure_pairs(
        &mut self,
        stage: &str,
        label: &str,
        models: &[&TrainedModel],
        pool: &DatasetArtifact,
        n_pairs: usize,
    ) -> Result<PairArtifact> {
        let seed = self.config.unit_seed("pairs");
        let hashes: Vec<&str> = models.iter().map(|m| m.sha256.as_str()).collect();
        let key = json_hash(&(
            "pairs",
            &hashes,
            &pool.digest,
            &self.config.preprocess,
            n_pairs,
            seed,
            self.config.pairs.keep_per_model,
        ));
        if let Some(rec) = self.reusable(&key) {
            let a = &rec.artifacts[0];
            let path = self.root.join(&a.path);
            let manifest = PairManifest::read(&path)?;
            let out = PairArtifact {
                manifest,
                path: a.path.clone(),
                sha256: a.sha256.clone(),
            };
            self.record(stage, key, rec, false)?;
            return Ok(out);
        }
        let snapshot = Self::snapshot(models)?;
        let manifest = generate_pair_manifest(
            &snapshot,
            &pool.manifest,
            self.config.preprocess,
            n_pairs,
            seed,
            self.config.pairs.keep_per_model,
        )?;
        let (path, sha) = write_addressed(
            &self.root.join("pairs"),
            label,
            "csv",
            manifest.to_csv().as_bytes(),
        )?;
        let side = crate::pseudolabel::sidecar_path(&path);
        fs::write(&side, manifest.sidecar_json()).map_err(|e| Error::io(&side, e))?;
        let side_sha = file_sha256(&side)?;
        let rel = self.rel(&path);
        let rec = UnitRecord {
            label: label.into(),
            artifacts: vec![
                Artifact {
                    kind: "pairs".into(),
                    path: rel.clone(),
                    sha256: sha.clone(),
                },
                Artifact {
                    kind: "pairs-sidecar".into(),
                    path: self.rel(&side),
                    sha256: side_sha,
                },
            ],
            inputs: hashes
                .iter()
                .map(|h| h.to_string())
                .chain([pool.digest.clone()])
                .collect(),
            meta: serde_json::Value::Null,
        };
        self.record(stage, key, rec, true)?;
        Ok(PairArtifact {
            manifest,
            path: rel,
            sha256: sha,
        })
    }

    /// Pseudo-labels `n_pairs` pool pairs with the full ensemble.
    pub fn run_stage2(
        &mut self,
        models: &[TrainedModel],
        pool: &DatasetArtifact,
    ) -> Result<PairArtifact> {
        let refs: Vec<&TrainedModel> = models.iter().collect();
        let n = self.config.pairs.n_pairs;
        self.ensure_pairs("stage2", &format!("pairs-{n}"), &refs, pool, n)
    }

    fn ensure_cdr(
        &mut self,
        stage: &str,
        label: &str,
        pairs: &PairArtifact,
        pool: &DatasetArtifact,
    ) -> Result<(TrainedModel, f64, f64)> {
        let train = TrainConfig {
            seed: self.config.unit_seed("stage3"),
            ..self.config.stage3.clone()
        };
        let key = json_hash(&(
            "stage3",
            &pairs.sha256,
            &pool.digest,
            &self.config.preprocess,
            &self.config.scorer,
            &train,
        ));
        if let Some(rec) = self.reusable(&key) {
            let model = self.load_model(&rec.artifacts[0], label, &pool.name)?;
            let before = rec.meta["loss_before"].as_f64().unwrap_or(f64::NAN);
            let after = rec.meta["loss_after"].as_f64().unwrap_or(f64::NAN);
            self.record(stage, key, rec, false)?;
            return Ok((model, before, after));
        }
        let crops = pool_crops(&pool.manifest, self.config.preprocess)?;
        let init =
            crate::scorer::init_params(&self.config.scorer, derive_seed(train.seed, "init"))?;
        let before = pairwise_loss(&init, &pairs.manifest.pairs, &crops)?;
        let logger = self.epoch_logger(label)?;
        let params = train_pairwise(
            &pairs.manifest.pairs,
            &crops,
            &self.config.scorer,
            &train,
            logger,
        )?;
        let after = pairwise_loss(&params, &pairs.manifest.pairs, &crops)?;
        let (path, sha) = self.save_model(label, &params)?;
        let rel = self.rel(&path);
        let rec = UnitRecord {
            label: label.into(),
            artifacts: vec![Artifact {
                kind: "model".into(),
                path: rel.clone(),
                sha256: sha.clone(),
            }],
            inputs: vec![pairs.sha256.clone(), pool.digest.clone()],
            meta: serde_json::json!({ "loss_before": before, "loss_after": after }),
        };
        self.record(stage, key, rec, true)?;
        Ok((
            TrainedModel {
                name: label.into(),
                trained_on: pool.name.clone(),
                params: Arc::new(params),
                path: rel,
                sha256: sha,
            },
            before,
            after,
        ))
    }

    /// Trains the pairwise scorer from scratch on the pair manifest. Returns
    /// the model and the mean pair loss before and after training.
    pub fn run_stage3(
        &mut self,
        pairs: &PairArtifact,
        pool: &DatasetArtifact,
    ) -> Result<(TrainedModel, f64, f64)> {
        self.ensure_cdr("stage3", CDR_MODEL, pairs, pool)
    }

    fn predictor(&self, m: &TrainedModel) -> ScorerPredictor {
        ScorerPredictor {
            params: m.params.clone(),
            n_patches: self.config.eval.n_patches,
            seed: self.config.unit_seed("eval"),
        }
    }

    fn truth_sets(datasets: &[DatasetArtifact]) -> Result<Vec<EvalSet>> {
        datasets
            .iter()
            .map(|d| EvalSet::from_scores(&d.manifest, &d.truth.0))
            .collect()
    }

    /// Every given model on every full dataset, against true quality and
    /// against the datasets' own labels.
    pub fn run_cross_eval(
        &mut self,
        models: &[TrainedModel],
        datasets: &[DatasetArtifact],
    ) -> Result<CrossEvalReport> {
        let predictors: Vec<ScorerPredictor> = models.iter().map(|m| self.predictor(m)).collect();
        let entries: Vec<ModelEntry<'_>> = models
            .iter()
            .zip(&predictors)
            .map(|(m, p)| ModelEntry {
                name: m.name.clone(),
                trained_on: m.trained_on.clone(),
                predictor: p as &dyn Predictor,
            })
            .collect();
        let seed = self.config.unit_seed("eval");
        let truth_sets = Self::truth_sets(datasets)?;
        let label_sets: Vec<EvalSet> = datasets
            .iter()
            .map(|d| EvalSet::from_labels(&d.manifest))
            .collect();
        let truth = cross_dataset_matrix(&entries, &truth_sets, seed)?;
        let labels = cross_dataset_matrix(&entries, &label_sets, seed)?;

        let mut all_truth = BTreeMap::new();
        for d in datasets {
            all_truth.extend(d.truth.0.clone());
        }
        let oracle = LookupPredictor(all_truth);
        let oracle_control = truth_sets
            .iter()
            .map(|s| evaluate(&oracle, s, "oracle", "truth", seed).map(|r| r.srcc))
            .collect::<Result<_>>()?;

        let report = CrossEvalReport {
            models: models.iter().map(ModelRef::from).collect(),
            datasets: datasets
                .iter()
                .map(|d| (d.name.clone(), d.digest.clone()))
                .collect(),
            truth,
            labels,
            oracle_control,
        };
        let dir = self.root.join("reports");
        write_addressed(
            &dir,
            "matrix-truth",
            "csv",
            report.truth.to_csv().as_bytes(),
        )?;
        write_addressed(
            &dir,
            "matrix-labels",
            "csv",
            report.labels.to_csv().as_bytes(),
        )?;
        write_addressed(
            &dir,
            "cross-eval",
            "json",
            serde_json::to_string_pretty(&report)?.as_bytes(),
        )?;
        self.statuses.push(StageStatus {
            stage: "cross-eval".into(),
            unit: "matrix".into(),
            status: STATUS_RAN.into(),
        });
        Ok(report)
    }

    /// Datasets, per-dataset scorers, pair labels, pairwise scorer and the
    /// cross-dataset matrices; writes `summary.json`.
    pub fn run_all(&mut self) -> Result<Summary> {
        let (datasets, pool) = self.run_datasets()?;
        let (stage1, stage1_test) = self.run_stage1(&datasets)?;
        let pairs = self.run_stage2(&stage1, &pool)?;
        let (cdr, before, after) = self.run_stage3(&pairs, &pool)?;
        let mut all = stage1.clone();
        all.push(cdr.clone());
        let cross_eval = self.run_cross_eval(&all, &datasets)?;
        let summary = Summary {
            version: CONFIG_VERSION,
            seed: self.config.seed,
            datasets: datasets
                .iter()
                .map(|d| (d.name.clone(), d.digest.clone()))
                .collect(),
            stage1_models: stage1.iter().map(ModelRef::from).collect(),
            stage1_test,
            pairs: (pairs.path.clone(), pairs.sha256.clone()),
            cdr_model: ModelRef::from(&cdr),
            cdr_pair_loss_before: before,
            cdr_pair_loss_after: after,
            cross_eval,
        };
        let text = serde_json::to_string_pretty(&summary)?;
        write_atomic(&self.root.join(SUMMARY_FILE), text.as_bytes())?;
        Ok(summary)
    }

    fn ablation_row(
        &mut self,
        label: &str,
        ensemble: Vec<String>,
        pairs: &PairArtifact,
        pool: &DatasetArtifact,
        datasets: &[DatasetArtifact],
    ) -> Result<AblationRow> {
        let (model, _, _) = self.ensure_cdr("ablation", label, pairs, pool)?;
        let predictor = self.predictor(&model);
        let seed = self.config.unit_seed("eval");
        let srcc: Vec<(String, f64)> = Self::truth_sets(datasets)?
            .iter()
            .map(|s| {
                evaluate(&predictor, s, label, &pool.name, seed).map(|r| (s.name.clone(), r.srcc))
            })
            .collect::<Result<_>>()?;
        let mean_srcc = srcc.iter().map(|(_, v)| v).sum::<f64>() / srcc.len() as f64;
        Ok(AblationRow {
            label: label.into(),
            n_pairs: pairs.manifest.n_pairs,
            ensemble,
            pairs_sha256: pairs.sha256.clone(),
            model: ModelRef::from(&model),
            srcc,
            mean_srcc,
        })
    }

    fn write_ablation(&self, report: &AblationReport) -> Result<PathBuf> {
        let text = serde_json::to_string_pretty(report)?;
        let (path, _) = write_addressed(
            &self.root.join("reports"),
            &format!("ablation-{}", report.kind),
            "json",
            text.as_bytes(),
        )?;
        Ok(path)
    }

    /// One pairwise scorer per rung of the pair ladder; smaller pair sets are
    /// prefixes of the largest.
    pub fn run_ablation_paircount(&mut self) -> Result<AblationReport> {
        let ladder = self.config.ablation.pair_ladder.clone();
        let largest = *ladder
            .iter()
            .max()
            .ok_or_else(|| Error::Config("ablation.pair_ladder is empty".into()))?;
        let (datasets, pool) = self.run_datasets()?;
        let (stage1, _) = self.run_stage1(&datasets)?;
        let refs: Vec<&TrainedModel> = stage1.iter().collect();
        let full = self.ensure_pairs(
            "ablation",
            &format!("pairs-{largest}"),
            &refs,
            &pool,
            largest,
        )?;
        let mut rows = Vec::new();
        for &n in &ladder {
            let rung = if n == largest {
                full.clone()
            } else {
                self.ensure_pairs("ablation", &format!("pairs-{n}"), &refs, &pool, n)?
            };
            if rung.manifest.pairs[..] != full.manifest.pairs[..n] {
                return Err(Error::invalid(format!(
                    "pair set {n} is not a prefix of {largest}"
                )));
            }
            let names = stage1.iter().map(|m| m.trained_on.clone()).collect();
            rows.push(self.ablation_row(
                &format!("cdr-pairs-{n}"),
                names,
                &rung,
                &pool,
                &datasets,
            )?);
        }
        let report = AblationReport {
            kind: "pairs".into(),
            rows,
        };
        self.write_ablation(&report)?;
        Ok(report)
    }

    /// One pairwise scorer per configured ensemble subset.
    pub fn run_ablation_ensemble(&mut self) -> Result<AblationReport> {
        let subsets = self.config.ablation.ensembles.clone();
        if subsets.is_empty() {
            return Err(Error::Config("ablation.ensembles is empty".into()));
        }
        let (datasets, pool) = self.run_datasets()?;
        let (stage1, _) = self.run_stage1(&datasets)?;
        let n = self.config.pairs.n_pairs;
        let mut rows = Vec::new();
        for subset in subsets {
            let members: Vec<&TrainedModel> = subset
                .iter()
                .map(|name| {
                    stage1
                        .iter()
                        .find(|m| &m.trained_on == name)
                        .expect("validated subset")
                })
                .collect();
            let tag = subset.join("+");
            let pairs =
                self.ensure_pairs("ablation", &format!("pairs-{n}-{tag}"), &members, &pool, n)?;
            rows.push(self.ablation_row(
                &format!("cdr-ens-{tag}"),
                subset,
                &pairs,
                &pool,
                &datasets,
            )?);
        }
        let report = AblationReport {
            kind: "ensemble".into(),
            rows,
        };
        self.write_ablation(&report)?;
        Ok(report)
    }
}

/// Hash over a manifest CSV, its ground-truth file and every image it lists.
pub fn dataset_digest(manifest_csv: &Path) -> Result<String> {
    let mut h = Sha256::new();
    let csv_bytes = fs::read(manifest_csv).map_err(|e| Error::io(manifest_csv, e))?;
    h.update(&csv_bytes);
    let truth = truth_path_for(manifest_csv);
    h.update(fs::read(&truth).map_err(|e| Error::io(&truth, e))?);
    let base = manifest_csv.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::Reader::from_reader(csv_bytes.as_slice());
    for row in rdr.records() {
        let row = row.map_err(|source| Error::Csv {
            path: manifest_csv.to_path_buf(),
            source,
        })?;
        let p = base.join(&row[1]);
        h.update(fs::read(&p).map_err(|e| Error::io(&p, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes `<dir>/<stem>-<hash16>.<ext>` and returns the path and full hash.
pub fn write_addressed(
    dir: &Path,
    stem: &str,
    ext: &str,
    bytes: &[u8],
) -> Result<(PathBuf, String)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let sha = sha256_hex(bytes);
    let path = dir.join(format!("{stem}-{}.{ext}", &sha[..16]));
    write_atomic(&path, bytes)?;
    Ok((path, sha))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::reference();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut one = ExperimentConfig::reference();
        one.datasets.truncate(1);
        assert!(matches!(one.validate(), Err(Error::Config(m)) if m.contains("at least 2")));

        let mut v = ExperimentConfig::reference();
        v.version = 9;
        assert!(v.validate().is_err());

        let mut dup = ExperimentConfig::reference();
        dup.pool.name = "blur".into();
        assert!(dup.validate().is_err());

        let mut crop = ExperimentConfig::reference();
        crop.preprocess.crop = 16;
        assert!(crop.validate().is_err());

        let mut ens = ExperimentConfig::reference();
        ens.ablation.ensembles.push(vec!["nope".into()]);
        assert!(ens.validate().is_err());

        let mut pairs = ExperimentConfig::reference();
        pairs.pairs.n_pairs = 1000 * 999 + 1;
        assert!(pairs.validate().is_err());

        assert!(ExperimentConfig::from_toml("version = 1\nbogus = 3\n").is_err());
    }

    #[test]
    fn pool_and_dataset_seeds_are_distinct() {
        let cfg = ExperimentConfig::reference();
        let mut seeds: Vec<u64> = cfg
            .datasets
            .iter()
            .map(|d| cfg.dataset_config(d).seed)
            .collect();
        seeds.push(cfg.pool_config().seed);
        let n = seeds.len();
        seeds.sort();
        seeds.dedup();
        assert_eq!(seeds.len(), n);
    }

    #[test]
    fn addressed_names_carry_the_hash() {
        let dir = tempfile::tempdir().unwrap();
        let (p, sha) = write_addressed(dir.path(), "x", "bin", b"abc").unwrap();
        assert_eq!(sha, sha256_hex(b"abc"));
        assert!(p
            .file_name()
            .unwrap()
            .to_string_lossy()
            .starts_with(&format!("x-{}", &sha[..16])));
        assert_eq!(file_sha256(&p).unwrap(), sha);
    }
}
