//! Stage wiring with on-disk artifacts.
//!
//! Every stage reads its inputs from the output directory (or the raw data
//! directory), writes its artifacts under `<out>/<stage>/` and records a
//! `manifest.json` with the config hash, the stage seed and the sha256 of
//! every file read and written. All randomness derives from the root seed.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{self, BaselineConfig};
use crate::cmf::{self, CmfConfig, RowMask};
use crate::error::{Error, Result};
use crate::features;
use crate::geo::{self, poi::HttpProviderConfig, FixturePoiProvider};
use crate::ingest::{self, Dataset};
use crate::lda::{self, LdaConfig, TopicModel};
use crate::sparse::{Index, SparseCountMatrix};
use crate::synth::{self, SynthConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Directory with the raw logs. Defaults to the `synth` stage output.
    pub dir: Option<PathBuf>,
    pub cdr: String,
    pub ccr: String,
    pub towers: String,
    pub pois: String,
    /// Split each MCC into this many amount buckets.
    pub amount_buckets: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            cdr: "cdr.csv".into(),
            ccr: "ccr.csv".into(),
            towers: "towers.csv".into(),
            pois: "pois.csv".into(),
            amount_buckets: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShoppingLdaConfig {
    /// Number of shopping behaviors.
    pub topics: usize,
    pub alpha: Option<f64>,
    pub beta: f64,
    pub iterations: usize,
    pub infer_iterations: usize,
    /// Share of users with transactions used to train; the rest are folded in.
    pub train_fraction: f64,
}

impl Default for ShoppingLdaConfig {
    fn default() -> Self {
        let d = LdaConfig::default();
        ShoppingLdaConfig {
            topics: 5,
            alpha: None,
            beta: d.beta,
            iterations: d.iterations,
            infer_iterations: d.infer_iterations,
            train_fraction: 0.4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoiSource {
    Fixture,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeoConfig {
    /// Number of tower classes.
    pub classes: usize,
    pub alpha: Option<f64>,
    pub beta: f64,
    pub iterations: usize,
    /// Categories listed by more than this fraction of towers are dropped.
    pub poi_threshold: f64,
    pub poi_source: PoiSource,
    pub http: HttpProviderConfig,
}

impl Default for GeoConfig {
    fn default() -> Self {
        GeoConfig {
            classes: 20,
            alpha: None,
            beta: 0.01,
            iterations: 1000,
            poi_threshold: 0.25,
            poi_source: PoiSource::Fixture,
            http: HttpProviderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FeaturesConfig {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CmfStageConfig {
    #[serde(flatten)]
    pub model: CmfConfig,
    pub rank_grid: Vec<usize>,
    pub folds: usize,
}

impl Default for CmfStageConfig {
    fn default() -> Self {
        CmfStageConfig {
            model: CmfConfig::default(),
            rank_grid: (2..=10).collect(),
            folds: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub lda: ShoppingLdaConfig,
    pub geo: GeoConfig,
    pub features: FeaturesConfig,
    pub cmf: CmfStageConfig,
    pub baselines: BaselineConfig,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            data: DataConfig::default(),
            lda: ShoppingLdaConfig::default(),
            geo: GeoConfig::default(),
            features: FeaturesConfig::default(),
            cmf: CmfStageConfig::default(),
            baselines: BaselineConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

fn lda_violations(section: &str, topics: usize, alpha: Option<f64>, beta: f64, out: &mut Vec<String>) {
    if topics == 0 {
        out.push(format!("{section}: topic count must be >= 1"));
    }
    if let Some(a) = alpha {
        if !(a > 0.0 && a.is_finite()) {
            out.push(format!("{section}.alpha must be > 0, got {a}"));
        }
    }
    if !(beta > 0.0 && beta.is_finite()) {
        out.push(format!("{section}.beta must be > 0, got {beta}"));
    }
}

impl PipelineConfig {
    /// Parses a JSON config; unknown sections are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("config is not valid JSON: {e}")))?;
        if let Some(obj) = value.as_object() {
            let known = ["seed", "data", "lda", "geo", "features", "cmf", "baselines", "synth"];
            let unknown: Vec<&String> = obj.keys().filter(|k| !known.contains(&k.as_str())).collect();
            if !unknown.is_empty() {
                return Err(Error::InvalidConfig(format!("unknown config sections: {unknown:?}")));
            }
        }
        serde_json::from_value(value).map_err(|e| Error::InvalidConfig(format!("config: {e}")))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Every violated constraint across all sections.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if let Some(b) = self.data.amount_buckets {
            if b < 2 {
                v.push(format!("data.amount_buckets must be >= 2, got {b}"));
            }
        }
        lda_violations("lda", self.lda.topics, self.lda.alpha, self.lda.beta, &mut v);
        if !(self.lda.train_fraction > 0.0 && self.lda.train_fraction <= 1.0) {
            v.push(format!("lda.train_fraction must be in (0, 1], got {}", self.lda.train_fraction));
        }
        lda_violations("geo", self.geo.classes, self.geo.alpha, self.geo.beta, &mut v);
        if !(self.geo.poi_threshold > 0.0 && self.geo.poi_threshold <= 1.0) {
            v.push(format!("geo.poi_threshold must be in (0, 1], got {}", self.geo.poi_threshold));
        }
        v.extend(self.cmf.model.violations());
        if self.cmf.rank_grid.is_empty() || self.cmf.rank_grid.contains(&0) {
            v.push("cmf.rank_grid must be a nonempty list of ranks >= 1".into());
        }
        if self.cmf.folds < 2 {
            v.push(format!("cmf.folds must be >= 2, got {}", self.cmf.folds));
        }
        v.extend(self.baselines.violations());
        v.extend(self.synth.violations());
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v.join("; ")))
        }
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// Seed for a labeled consumer: the first 8 bytes of `sha256("{root}:{label}")`.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let digest = Sha256::digest(format!("{root}:{label}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    Ingest,
    LdaShopping,
    Towers,
    Features,
    CmfFit,
    CmfCv,
    CompareViews,
    Baselines,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Synth,
        Stage::Ingest,
        Stage::LdaShopping,
        Stage::Towers,
        Stage::Features,
        Stage::CmfFit,
        Stage::CmfCv,
        Stage::CompareViews,
        Stage::Baselines,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::LdaShopping => "lda-shopping",
            Stage::Towers => "towers",
            Stage::Features => "features",
            Stage::CmfFit => "cmf-fit",
            Stage::CmfCv => "cmf-cv",
            Stage::CompareViews => "compare-views",
            Stage::Baselines => "baselines",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_sha256: String,
    pub seed: u64,
    /// Stage options that are not part of the config file.
    pub parameters: serde_json::Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOptions {
    /// Rows per topic in the `report` tables.
    pub top_k: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { top_k: 20 }
    }
}

/// Tracks the files a stage reads and writes.
struct StageRun<'a> {
    pipeline: &'a Pipeline,
    stage: Stage,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
}

impl<'a> StageRun<'a> {
    fn new(pipeline: &'a Pipeline, stage: Stage) -> Result<Self> {
        let dir = pipeline.stage_dir(stage);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(StageRun { pipeline, stage, inputs: Vec::new(), outputs: Vec::new() })
    }

    fn label(&self, path: &Path) -> String {
        path.strip_prefix(&self.pipeline.out)
            .unwrap_or(path)
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/")
    }

    /// Reads an artifact of `producer`, failing with a pointer to that stage.
    fn read(&mut self, producer: Stage, name: &str) -> Result<Vec<u8>> {
        let path = self.pipeline.stage_dir(producer).join(name);
        if !path.is_file() {
            return Err(Error::MissingArtifact { path, stage: producer.name().to_string() });
        }
        self.read_path(&path)
    }

    fn read_path(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.inputs.push(FileHash { path: self.label(path), sha256: sha256_hex(&bytes) });
        Ok(bytes)
    }

    /// Reads a raw data file, pointing at `synth` when the default data
    /// directory is missing it.
    fn read_data(&mut self, name: &str) -> Result<Vec<u8>> {
        match &self.pipeline.config.data.dir {
            Some(dir) => {
                let path = dir.join(name);
                self.read_path(&path)
            }
            None => self.read(Stage::Synth, name),
        }
    }

    fn write(&mut self, name: &str, bytes: Vec<u8>) -> Result<()> {
        let path = self.pipeline.stage_dir(self.stage).join(name);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        self.outputs.push(FileHash { path: self.label(&path), sha256: sha256_hex(&bytes) });
        Ok(())
    }

    fn write_with(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, buf)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, bytes)
    }

    fn finish(self, seed: u64, parameters: serde_json::Value) -> Result<Manifest> {
        let manifest = Manifest {
            stage: self.stage.name().to_string(),
            config_sha256: self.pipeline.config.hash(),
            seed,
            parameters,
            inputs: self.inputs,
            outputs: self.outputs,
        };
        let path = self.pipeline.stage_dir(self.stage).join(MANIFEST);
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        log::info!("stage {} wrote {} files", manifest.stage, manifest.outputs.len());
        Ok(manifest)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IngestIndex {
    users: Vec<String>,
    towers: Vec<String>,
    mccs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IngestSummary {
    cdr_events: usize,
    ccr_events: usize,
    cdr_errors: Vec<ingest::RowError>,
    ccr_errors: Vec<ingest::RowError>,
    unknown_towers: usize,
    users: usize,
    towers: usize,
    vocabulary: usize,
    visit_zero_fraction: f64,
}

/// A pipeline bound to a config and an output directory.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub out: PathBuf,
}

fn top_rows(model: &TopicModel, label: &str, k: usize) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([label, "rank", "token", "weight"])?;
    for t in 0..model.topics {
        for (rank, (token, weight)) in model.top_words(t, k)?.into_iter().enumerate() {
            w.write_record([t.to_string(), (rank + 1).to_string(), token, format!("{weight:?}")])?;
        }
    }
    w.into_inner().map_err(|e| Error::Numerical(e.to_string()))
}

impl Pipeline {
    pub fn new(config: PipelineConfig, out: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        Ok(Pipeline { config, out: out.into() })
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.out.join(stage.name())
    }

    pub fn seed(&self, label: &str) -> u64 {
        derive_seed(self.config.seed, label)
    }

    /// Runs every stage in order. `synth` is skipped when an external data
    /// directory is configured.
    pub fn run_all(&self, options: &RunOptions) -> Result<Vec<Manifest>> {
        Stage::ALL
            .into_iter()
            .filter(|&s| s != Stage::Synth || self.config.data.dir.is_none())
            .map(|s| self.run(s, options))
            .collect()
    }

    pub fn run(&self, stage: Stage, options: &RunOptions) -> Result<Manifest> {
        log::info!("running stage {stage}");
        match stage {
            Stage::Synth => self.synth(),
            Stage::Ingest => self.ingest(),
            Stage::LdaShopping => self.lda_shopping(),
            Stage::Towers => self.towers(),
            Stage::Features => self.features(),
            Stage::CmfFit => self.cmf_fit(),
            Stage::CmfCv => self.cmf_cv(),
            Stage::CompareViews => self.compare_views(),
            Stage::Baselines => self.baselines(),
            Stage::Report => self.report(options),
        }
    }

    fn synth(&self) -> Result<Manifest> {
        let mut run = StageRun::new(self, Stage::Synth)?;
        let seed = self.seed("synth");
        let config = SynthConfig { seed, ..self.config.synth.clone() };
        let data = synth::generate(&config)?;
        let tmp = tempdir_in(&self.stage_dir(Stage::Synth))?;
        for path in data.write_to_dir(&tmp)? {
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let name = path.file_name().expect("file name").to_string_lossy().into_owned();
            run.write(&name, bytes)?;
        }
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let sparsity = synth::sparsity_report(&data.visits)?;
        run.finish(seed, serde_json::json!({ "visit_zero_fraction": sparsity }))
    }

    fn ingest(&self) -> Result<Manifest> {
        let mut run = StageRun::new(self, Stage::Ingest)?;
        let data = &self.config.data;
        let towers = ingest::parse_towers(run.read_data(&data.towers)?.as_slice())?;
        let tower_index = Index::from_unsorted(towers.iter().map(|t| t.tower_id.clone()));
        if tower_index.len() != towers.len() {
            return Err(Error::Parse("towers file lists a tower id twice".into()));
        }
        let cdr = ingest::parse_cdr(run.read_data(&data.cdr)?.as_slice(), &tower_index)?;
        let ccr = ingest::parse_ccr(run.read_data(&data.ccr)?.as_slice())?;
        for e in cdr.errors.iter().chain(&ccr.errors) {
            log::warn!("skipped line {}: {}", e.line, e.message);
        }
        let dataset = Dataset::build(&cdr.events, &ccr.events, tower_index, data.amount_buckets)?;
        let spend = ingest::average_weekly_spend(&ccr.events, &dataset.users)?;

        run.write_json(
            "index.json",
            &IngestIndex {
                users: dataset.users.ids().to_vec(),
                towers: dataset.towers.ids().to_vec(),
                mccs: dataset.mccs.ids().to_vec(),
            },
        )?;
        run.write_with("visits.csv", |b| dataset.visit_counts.write_triplets_csv(b, &dataset.users, &dataset.towers))?;
        run.write_with("mcc_counts.csv", |b| dataset.mcc_counts.write_triplets_csv(b, &dataset.users, &dataset.mccs))?;
        let has_ccr = dataset.mcc_counts.row_sums();
        run.write_with("weekly_spend.csv", |b| {
            let mut w = csv::Writer::from_writer(b);
            w.write_record(["user_id", "avg_weekly_spend", "transactions"])?;
            for (i, s) in spend.iter().enumerate() {
                w.write_record([dataset.users.id(i).to_string(), format!("{s:?}"), has_ccr[i].to_string()])?;
            }
            w.flush().map_err(|e| Error::io("weekly_spend.csv", e))
        })?;
        let summary = IngestSummary {
            cdr_events: cdr.events.len(),
            ccr_events: ccr.events.len(),
            cdr_errors: cdr.errors.clone(),
            ccr_errors: ccr.errors.clone(),
            unknown_towers: cdr.unknown_towers,
            users: dataset.users.len(),
            towers: dataset.towers.len(),
            vocabulary: dataset.mccs.len(),
            visit_zero_fraction: synth::sparsity_report(&dataset.visit_counts).unwrap_or(1.0),
        };
        run.write_json("summary.json", &summary)?;
        run.finish(0, serde_json::Value::Null)
    }

    fn load_index(run: &mut StageRun) -> Result<(Index, Index, Index)> {
        let index: IngestIndex = serde_json::from_slice(&run.read(Stage::Ingest, "index.json")?)?;
        Ok((
            Index::from_ordered(index.users)?,
            Index::from_ordered(index.towers)?,
            Index::from_ordered(index.mccs)?,
        ))
    }

    fn lda_shopping(&self) -> Result<Manifest> {
        let mut run = StageRun::new(self, Stage::LdaShopping)?;
        let (users, _, mccs) = Self::load_index(&mut run)?;
        let counts = SparseCountMatrix::read_triplets_csv(run.read(Stage::Ingest, "mcc_counts.csv")?.as_slice(), &users, &mccs)?;
        let with_docs: Vec<usize> = counts.row_sums().iter().enumerate().filter(|(_, &s)| s > 0).map(|(i, _)| i).collect();
        if with_docs.is_empty() {
            return Err(Error::Empty("no user has card transactions".into()));
        }
        let seed = self.seed("lda-shopping");
        let mut order = with_docs.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "split"));
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let n_train = ((self.config.lda.train_fraction * order.len() as f64).ceil() as usize).clamp(1, order.len());
        let mut train = order[..n_train].to_vec();
        let mut rest = order[n_train..].to_vec();
        train.sort_unstable();
        rest.sort_unstable();

        let cfg = &self.config.lda;
        let lda_config = LdaConfig {
            topics: cfg.topics,
            alpha: cfg.alpha,
            beta: cfg.beta,
            iterations: cfg.iterations,
            infer_iterations: cfg.infer_iterations,
            seed: derive_seed(seed, "train"),
        };
        let model = lda::train(&counts.select_rows(&train), mccs.ids(), &lda_config)?;
        let inferred = model.infer(&counts.select_rows(&rest), mccs.ids(), cfg.infer_iterations, derive_seed(seed, "infer"))?;

        let mut theta = Array2::<f64>::zeros((with_docs.len(), cfg.topics));
        let position = |u: usize| with_docs.binary_search(&u).expect("user has a document");
        for (r, &u) in train.iter().enumerate() {
            theta.row_mut(position(u)).assign(&model.theta.row(r));
        }
        for (r, &u) in rest.iter().enumerate() {
            theta.row_mut(position(u)).assign(&inferred.theta.row(r));
        }
        let ids = Index::from(with_docs.iter().map(|&u| users.id(u).to_string()).collect::<Vec<_>>());
        run.write_json("model.json", &model)?;
        run.write_with("shopping.csv", |b| features::write_dense_csv(b, "user_id", "behavior_", &ids, theta.view()))?;
        run.write_with("split.csv", |b| {
            let mut w = csv::Writer::from_writer(b);
            w.write_record(["user_id", "role"])?;
            for &u in &with_docs {
                let role = if train.binary_search(&u).is_ok() { "train" } else { "infer" };
                w.write_record([users.id(u), role])?;
            }
            w.flush().map_err(|e| Error::io("split.csv", e))
        })?;
        run.finish(
            seed,
            serde_json::json!({ "train_users": train.len(), "inferred_users": rest.len(), "oov_tokens": inferred.oov_tokens }),
        )
    }

    fn towers(&self) -> Result<Manifest> {
        let mut run = StageRun::new(self, Stage::Towers)?;
        let data = &self.config.data;
        let mut records = ingest::parse_towers(run.read_data(&data.towers)?.as_slice())?;
        records.sort_by(|a, b| a.tower_id.cmp(&b.tower_id));
        let sites = geo::project_towers(&records);
        let tri = geo::delaunay(&sites)?;
        let radii = tri.input_radii()?;
        let fetched = match self.config.geo.poi_source {
            PoiSource::Fixture => {
                let provider = FixturePoiProvider::from_csv(run.read_data(&data.pois)?.as_slice())?;
                geo::fetch_all(&provider, &sites, &radii)?
            }
            PoiSource::Http => self.fetch_http(&sites, &radii)?,
        };
        let docs: Vec<Vec<String>> = fetched.iter().map(|f| f.categories.clone()).collect();
        let filtered = geo::filter_frequent_categories(&docs, self.config.geo.poi_threshold)?;
        let seed = self.seed("towers");
        let g = &self.config.geo;
        let lda_config = LdaConfig {
            topics: g.classes,
            alpha: g.alpha,
            beta: g.beta,
            iterations: g.iterations,
            seed,
            ..Default::default()
        };
        let classes = geo::tower_classes(&filtered, g.classes, &lda_config)?;
        let ids = Index::from(records.iter().map(|r| r.tower_id.clone()).collect::<Vec<_>>());

        run.write_with("edges.csv", |b| tri.write_edges_csv(b))?;
        run.write_with("radii.csv", |b| {
            let mut w = csv::Writer::from_writer(b);
            w.write_record(["tower_id", "radius_m", "poi_count", "missing"])?;
            for (i, r) in radii.iter().enumerate() {
                w.write_record([
                    ids.id(i).to_string(),
                    format!("{r:?}"),
                    fetched[i].categories.len().to_string(),
                    fetched[i].missing.to_string(),
                ])?;
            }
            w.flush().map_err(|e| Error::io("radii.csv", e))
        })?;
        run.write_with("removed_categories.csv", |b| {
            let mut w = csv::Writer::from_writer(b);
            w.write_record(["category", "tower_fraction"])?;
            for (c, f) in &filtered.removed {
                w.write_record([c.clone(), format!("{f:?}")])?;
            }
            w.flush().map_err(|e| Error::io("removed_categories.csv", e))
        })?;
        run.write_json("class_model.json", &classes.model)?;
        run.write_with("classes.csv", |b| features::write_dense_csv(b, "tower_id", "class_", &ids, classes.classes.view()))?;
        run.finish(seed, serde_json::json!({ "aliases": tri.aliases, "edges": tri.edges.len() }))
    }

    #[cfg(feature = "http-poi")]
    fn fetch_http(&self, sites: &[geo::TowerSite], radii: &[f64]) -> Result<Vec<geo::PoiFetch>> {
        let provider = geo::poi::HttpPoiProvider::new(self.config.geo.http.clone(), geo::poi::UreqTransport::default())?;
        geo::fetch_all(&provider, sites, radii)
    }

    #[cfg(not(feature = "http-poi"))]
    fn fetch_http(&self, _sites: &[geo::TowerSite], _radii: &[f64]) -> Result<Vec<geo::PoiFetch>> {
        Err(Error::InvalidConfig(
            "geo.poi_source = \"http\" needs a build with the `http-poi` feature".into(),
        ))
    }

    fn features(&self) -> Result<Manifest> {
        let mut run = StageRun::new(self, Stage::Features)?;
        let (users, towers, _) = Self::load_index(&mut run)?;
        let visits = SparseCountMatrix::read_triplets_csv(run.read(Stage::Ingest, "visits.csv")?.as_slice(), &users, &towers)?;
        let (class_ids, classes) = features::read_dense_csv(run.read(Stage::Towers, "classes.csv")?.as_slice())?;
        let mut aligned = Array2::<f64>::zeros((towers.len(), classes.ncols()));
        for (t, id) in towers.ids().iter().enumerate() {
            let row = class_ids
                .get(id)
                .ok_or_else(|| Error::Shape(format!("tower {id} has no class row")))?;
            aligned.row_mut(t).assign(&classes.row(row));
        }
        let weighted = features::tfidf(&visits)?;
        let m = features::mobility_matrix(&weighted, aligned.view())?;
        run.write_with("mobility.csv", |b| features::write_dense_csv(b, "user_id", "class_", &users, m.view()))?;
        let dropped = towers.len() - weighted.columns.len();
        run.finish(0, serde_json::json!({ "towers_without_visits": dropped }))
    }

    /// Mobility rows for every user and shopping rows where known.
    fn load_views(run: &mut StageRun) -> Result<(Index, Array2<f64>, Array2<f64>, RowMask)> {
        let mobility = run.read(Stage::Features, "mobility.csv")?;
        let shopping = run.read(Stage::LdaShopping, "shopping.csv")?;
        let (users, m) = features::read_dense_csv(mobility.as_slice())?;
        let (shoppers, s_known) = features::read_dense_csv(shopping.as_slice())?;
        let mut s = Array2::<f64>::zeros((users.len(), s_known.ncols()));
        let mut rows = Vec::with_capacity(shoppers.len());
        for (r, id) in shoppers.ids().iter().enumerate() {
            let i = users
                .get(id)
                .ok_or_else(|| Error::Shape(format!("shopping user {id} has no mobility row")))?;
            s.row_mut(i).assign(&s_known.row(r));
            rows.push(i);
        }
        let mask = RowMask::from_indices(users.len(), &rows)?;
        Ok((users, s, m, mask))
    }

    fn cmf_config(&self, seed: u64) -> CmfConfig {
        CmfConfig { seed, ..self.config.cmf.model.clone() }
    }

    fn cmf_fit(&self) -> Result<Manifest> {
        let mut run = StageRun::new(self, Stage::CmfFit)?;
        let (users, s, m, mask) = Self::load_views(&mut run)?;
        let seed = self.seed("cmf-fit");
        let config = self.cmf_config(seed);
        let model = cmf::fit(s.view(), m.view(), &mask, &config)?;
        let unseen: Vec<usize> = (0..users.len()).filter(|&i| !mask.is_observed(i)).collect();
        let predicted = cmf::predict_shopping(&model, m.select(Axis(0), &unseen).view(), &config)?;
        let unseen_ids = Index::from(unseen.iter().map(|&i| users.id(i).to_string()).collect::<Vec<_>>());
        run.write_json("model.json", &model)?;
        run.write_with("predicted_shopping.csv", |b| {
            features::write_dense_csv(b, "user_id", "behavior_", &unseen_ids, predicted.view())
        })?;
        run.write_json(
            "summary.json",
            &serde_json::json!({
                "objective": model.objective_history.last(),
                "iterations": model.objective_history.len() - 1,
                "group_norms_shopping": cmf::group_norms(model.vs.view()),
                "group_norms_mobility": cmf::group_norms(model.vm.view()),
            }),
        )?;
        run.finish(seed, serde_json::Value::Null)
    }

    fn cmf_cv(&self) -> Result<Manifest> {
        let mut run = StageRun::new(self, Stage::CmfCv)?;
        let (_, s, m, mask) = Self::load_views(&mut run)?;
        let seed = self.seed("cmf-cv");
        let config = self.cmf_config(derive_seed(seed, "init"));
        let report = cmf::cross_validate(
            s.view(),
            m.view(),
            &mask,
            &self.config.cmf.rank_grid,
            &config,
            self.config.cmf.folds,
            seed,
        )?;
        run.write_with("cv.csv", |b| report.write_csv(b))?;
        run.write_json(
            "summary.json",
            &serde_json::json!({ "mean_rmse": report.mean_rmse, "selected_rank": report.selected_rank }),
        )?;
        run.finish(seed, serde_json::Value::Null)
    }

    fn compare_views(&self) -> Result<Manifest> {
        let mut run = StageRun::new(self, Stage::CompareViews)?;
        let (_, s, m, mask) = Self::load_views(&mut run)?;
        let seed = self.seed("compare-views");
        let config = self.cmf_config(derive_seed(seed, "init"));
        let cmp = cmf::compare_views(s.view(), m.view(), &mask, &config, self.config.cmf.folds, seed)?;
        run.write_json("comparison.json", &cmp)?;
        run.finish(seed, serde_json::Value::Null)
    }

    fn baselines(&self) -> Result<Manifest> {
        let mut run = StageRun::new(self, Stage::Baselines)?;
        let (users, towers, _) = Self::load_index(&mut run)?;
        let visits = SparseCountMatrix::read_triplets_csv(run.read(Stage::Ingest, "visits.csv")?.as_slice(), &users, &towers)?;
        let spend_bytes = run.read(Stage::Ingest, "weekly_spend.csv")?;
        let (spenders, spend) = features::read_dense_csv(spend_bytes.as_slice())?;
        let (shoppers, s) = features::read_dense_csv(run.read(Stage::LdaShopping, "shopping.csv")?.as_slice())?;
        let w = visits.to_dense();
        let seed = self.seed("baselines");

        let rows_of = |ids: &[String]| -> Result<Vec<usize>> {
            ids.iter()
                .map(|id| users.get(id).ok_or_else(|| Error::Shape(format!("unknown user {id}"))))
                .collect()
        };
        let with_ccr: Vec<usize> = (0..spenders.len()).filter(|&r| spend[[r, 1]] > 0.0).collect();
        let reg_ids: Vec<String> = with_ccr.iter().map(|&r| spenders.id(r).to_string()).collect();
        let x_reg = w.select(Axis(0), &rows_of(&reg_ids)?);
        let y = spend.column(0).select(Axis(0), &with_ccr);
        let lasso = baselines::lasso_regression(x_reg.view(), y.view(), &self.config.baselines, derive_seed(seed, "lasso"))?;

        let labels = s
            .rows()
            .into_iter()
            .map(baselines::primary_behavior)
            .collect::<Result<Vec<_>>>()?;
        let x_cls = w.select(Axis(0), &rows_of(shoppers.ids())?);
        let cls = baselines::classify_primary(x_cls.view(), &labels, &self.config.baselines, derive_seed(seed, "classify"))?;

        run.write_with("lasso.csv", |b| baselines::write_lasso_csv(&lasso, b))?;
        run.write_with("classification.csv", |b| cls.write_csv(b))?;
        let best = lasso.iter().map(|r| r.r2_test).fold(f64::NEG_INFINITY, f64::max);
        run.write_json(
            "summary.json",
            &serde_json::json!({
                "best_r2_test": best,
                "pooled_accuracy": cls.pooled_accuracy,
                "majority_frequency": cls.majority_frequency,
                "single_class_folds": cls.single_class_folds,
            }),
        )?;
        run.finish(seed, serde_json::Value::Null)
    }

    fn report(&self, options: &RunOptions) -> Result<Manifest> {
        if options.top_k == 0 {
            return Err(Error::InvalidConfig("--top-k must be >= 1".into()));
        }
        let mut run = StageRun::new(self, Stage::Report)?;
        let behaviors: TopicModel = serde_json::from_slice(&run.read(Stage::LdaShopping, "model.json")?)?;
        let classes: TopicModel = serde_json::from_slice(&run.read(Stage::Towers, "class_model.json")?)?;
        run.write("behaviors_top.csv", top_rows(&behaviors, "behavior", options.top_k)?)?;
        run.write("classes_top.csv", top_rows(&classes, "class", options.top_k)?)?;
        run.finish(0, serde_json::json!({ "top_k": options.top_k }))
    }
}

/// Scratch directory inside `parent` with a fixed name.
fn tempdir_in(parent: &Path) -> Result<PathBuf> {
    let dir = parent.join(".tmp");
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Reads a stage manifest.
pub fn read_manifest(out: &Path, stage: Stage) -> Result<Manifest> {
    let path = out.join(stage.name()).join(MANIFEST);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}
