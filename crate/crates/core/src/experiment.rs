//! End-to-end experiments: data generation, pre-training, augmentation,
//! fine-tuning per variant, evaluation and reporting.
//!
//! Every stage reads its inputs from and writes its outputs to one output
//! directory, plus a manifest recording the config hash, seed and content
//! hashes of the files it read and wrote:
//!
//! ```text
//! data/       source.pgrd, source_poi.pgrd, target.pgrd, target_poi.pgrd, augmented.pgrd
//! models/     stnet, snet, pgnet and one checkpoint per variant
//! manifests/  <stage>.json
//! png/        grayscale truth/prediction dumps
//! report.md, report.json
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::ModelCheckpoint;
use crate::error::{Error, Result};
use crate::grid::{
    coarsen, load_grid, make_windows, save_grid, split_source, split_target, GridMeta, PoiMap, PopulationSeries,
    ReferenceSnapshot, WindowSample, POI_CATEGORIES, SLOTS_PER_DAY, WEEK_SLOTS,
};
use crate::metrics::{bicubic_upsample, evaluate, MetricReport};
use crate::pada::{pada_finetune, PadaConfig};
use crate::pgnet::{augment_target, split_frames, Pgnet, PgnetConfig, PgnetTrainOptions};
use crate::stnet::{Stnet, StnetConfig};
use crate::synth::{default_pair, generate_city, CitySpec};
use crate::tensor::Tensor;
use crate::train::{predict_windows, stack_targets, train_stnet, TrainOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Pre-train on a source city, adapt to a target city.
    CrossCity,
    /// Pre-train on coarse→mid pairs of the target city, adapt to mid→fine.
    CrossGranularity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "snet")]
    Snet,
    #[serde(rename = "stnet")]
    Stnet,
    /// The pre-trained STNet applied without any target data.
    #[serde(rename = "stnet-frozen")]
    StnetFrozen,
    #[serde(rename = "snet+pgnet")]
    SnetPgnet,
    #[serde(rename = "stnet+pgnet")]
    StnetPgnet,
    #[serde(rename = "psrnet")]
    Psrnet,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Snet, Variant::Stnet, Variant::StnetFrozen, Variant::SnetPgnet, Variant::StnetPgnet, Variant::Psrnet];

    pub fn key(self) -> &'static str {
        match self {
            Variant::Snet => "snet",
            Variant::Stnet => "stnet",
            Variant::StnetFrozen => "stnet-frozen",
            Variant::SnetPgnet => "snet+pgnet",
            Variant::StnetPgnet => "stnet+pgnet",
            Variant::Psrnet => "psrnet",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Snet => "SNet",
            Variant::Stnet => "STNet",
            Variant::StnetFrozen => "STNet (frozen)",
            Variant::SnetPgnet => "SNet+PGNet",
            Variant::StnetPgnet => "STNet+PGNet",
            Variant::Psrnet => "PSRNet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.key() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }

    pub fn temporal(self) -> bool {
        !matches!(self, Variant::Snet | Variant::SnetPgnet)
    }

    pub fn uses_pgnet(self) -> bool {
        matches!(self, Variant::SnetPgnet | Variant::StnetPgnet | Variant::Psrnet)
    }

    /// File stem of the checkpoint, safe on every filesystem.
    fn file_stem(self) -> String {
        format!("variant-{}", self.key().replace('+', "-"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub upscale: usize,
    pub variants: Vec<Variant>,
    /// Seed for model initialization and training streams.
    pub seed: u64,
    pub profile: Profile,
    pub source: CitySpec,
    pub target: CitySpec,
    pub stnet: StnetConfig,
    pub pretrain: TrainOptions,
    pub pgnet: PgnetConfig,
    pub pgnet_train: PgnetTrainOptions,
    pub finetune: TrainOptions,
    pub pada: PadaConfig,
    /// Length of the target test period in slots.
    pub test_slots: usize,
    /// Number of test slots dumped as PNG.
    pub png_slots: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk(Scenario::CrossCity, 4, 0)
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults: 32×32 fine grids, 14 days, small networks.
    pub fn desk(scenario: Scenario, upscale: usize, seed: u64) -> Self {
        let (mut source, mut target) = default_pair(seed);
        let n_city = match scenario {
            Scenario::CrossCity => upscale,
            Scenario::CrossGranularity => upscale * upscale,
        };
        source.upscale = n_city;
        target.upscale = n_city;
        let fine = target.fine_h;
        let pg_grid = match scenario {
            Scenario::CrossCity => fine,
            Scenario::CrossGranularity => fine / upscale,
        };
        Self {
            scenario,
            upscale,
            variants: vec![Variant::Stnet, Variant::StnetFrozen, Variant::StnetPgnet, Variant::Psrnet],
            seed,
            profile: Profile::Desk,
            source,
            target,
            stnet: StnetConfig::desk(upscale),
            pretrain: TrainOptions { steps: 150, batch_size: 8, lr: 1e-3, eval_every: 25, patience: 10 },
            pgnet: PgnetConfig::desk(pg_grid, pg_grid, upscale),
            pgnet_train: PgnetTrainOptions::default(),
            finetune: TrainOptions { steps: 60, batch_size: 4, lr: 1e-3, eval_every: 0, patience: 10 },
            pada: PadaConfig::default(),
            test_slots: WEEK_SLOTS,
            png_slots: 2,
        }
    }

    /// Paper-scale network sizes on larger synthetic cities.
    pub fn paper(scenario: Scenario, upscale: usize, seed: u64) -> Self {
        let mut c = Self::desk(scenario, upscale, seed);
        c.profile = Profile::Paper;
        for city in [&mut c.source, &mut c.target] {
            city.fine_h = 64;
            city.fine_w = 64;
            city.days = 28;
        }
        let pg_grid = match scenario {
            Scenario::CrossCity => 64,
            Scenario::CrossGranularity => 64 / upscale,
        };
        c.stnet = StnetConfig::paper(upscale);
        c.pgnet = PgnetConfig::paper(pg_grid, pg_grid, upscale);
        c.pretrain.steps = 2000;
        c.pgnet_train.steps = 2000;
        c.finetune.steps = 200;
        c.pada.steps = 200;
        c.variants = Variant::ALL.to_vec();
        c
    }

    /// A seconds-long configuration on 16×16 three-day cities, for smoke
    /// runs and tests. Results are not meaningful.
    pub fn smoke(scenario: Scenario, upscale: usize, seed: u64) -> Self {
        let mut c = Self::desk(scenario, upscale, seed);
        for city in [&mut c.source, &mut c.target] {
            city.fine_h = 16;
            city.fine_w = 16;
            city.days = 3;
            city.n_centers = 4;
        }
        let (pg_h, pg_w) = c.pgnet_grid();
        c.stnet = StnetConfig { seq_len: 8, time_stride: 4, base_channels: 4, time_channels: 4, block_width: 4, ..c.stnet };
        c.pretrain = TrainOptions { steps: 4, batch_size: 4, lr: 1e-3, eval_every: 2, patience: 2 };
        c.pgnet = PgnetConfig {
            gen_channels: 4,
            embed_dim: 4,
            lstm_context: 4,
            frames: 3,
            disc_channels: 2,
            disc_layers: 2,
            ..PgnetConfig::desk(pg_h, pg_w, upscale)
        };
        c.pgnet_train = PgnetTrainOptions { steps: 4, eval_every: 2, ..PgnetTrainOptions::default() };
        c.finetune = TrainOptions { steps: 2, batch_size: 2, ..c.finetune };
        c.pada = PadaConfig { steps: 2, target_batch: 2, source_batch: 2, classifier_channels: 4, hidden: 4, ..c.pada };
        c.test_slots = SLOTS_PER_DAY;
        c.png_slots = 1;
        c
    }

    pub fn for_profile(profile: Profile, scenario: Scenario, upscale: usize, seed: u64) -> Self {
        match profile {
            Profile::Desk => Self::desk(scenario, upscale, seed),
            Profile::Paper => Self::paper(scenario, upscale, seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if ![2, 4, 8].contains(&self.upscale) {
            return Err(Error::Config(format!("upscale must be 2, 4 or 8, got {}", self.upscale)));
        }
        if self.stnet.upscale != self.upscale || self.pgnet.upscale != self.upscale {
            return Err(Error::Config("network upscale factors must match the experiment".into()));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("no variants selected".into()));
        }
        if self.test_slots == 0 {
            return Err(Error::Config("empty test period".into()));
        }
        let n_city = self.city_factor();
        for spec in [&self.source, &self.target] {
            spec.validate()?;
            if spec.upscale != n_city {
                return Err(Error::Config(format!("city {} must be divisible by {n_city}", spec.name)));
            }
        }
        let (pg_h, pg_w) = self.pgnet_grid();
        if (self.pgnet.fine_h, self.pgnet.fine_w) != (pg_h, pg_w) {
            return Err(Error::Config(format!("PGNet grid must be {pg_h}x{pg_w}")));
        }
        self.stnet.validate()?;
        self.pgnet.validate()?;
        self.pada.validate()
    }

    /// Total refinement between the coarsest grid and the city grid.
    fn city_factor(&self) -> usize {
        match self.scenario {
            Scenario::CrossCity => self.upscale,
            Scenario::CrossGranularity => self.upscale * self.upscale,
        }
    }

    /// Grid PGNet is trained on.
    fn pgnet_grid(&self) -> (usize, usize) {
        let d = match self.scenario {
            Scenario::CrossCity => 1,
            Scenario::CrossGranularity => self.upscale,
        };
        (self.target.fine_h / d, self.target.fine_w / d)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))
    }
}

/// Preset configurations for the two hyper-parameter sweeps: input length
/// × time stride (STNet fine-tuned on the reference only) and synthetic
/// frame count × PGNet MSE weight (full PSRNet).
pub fn sweep_presets(base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let mut out = Vec::new();
    for seq_len in [12, 24, 48] {
        for stride in [3, 6, 12] {
            let mut c = base.clone();
            c.stnet.seq_len = seq_len;
            c.stnet.time_stride = stride;
            c.variants = vec![Variant::Stnet];
            if c.stnet.validate().is_ok() {
                out.push((format!("seq{seq_len}-stride{stride}"), c));
            }
        }
    }
    for frames in [5, 9, 17] {
        for alpha in [1e-2, 1e-3, 1e-4] {
            let mut c = base.clone();
            c.pgnet.frames = frames;
            c.pgnet.alpha = alpha;
            c.variants = vec![Variant::Psrnet];
            out.push((format!("frames{frames}-alpha{alpha:e}"), c));
        }
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub seed: u64,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub notes: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub key: String,
    pub metrics: MetricReport,
    pub parameters: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: Scenario,
    pub upscale: usize,
    pub seed: u64,
    pub config_hash: String,
    pub test_slots: Vec<usize>,
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn row(&self, key: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.key == key)
    }

    pub fn to_markdown(&self) -> String {
        let title = match self.scenario {
            Scenario::CrossCity => format!("Cross-city transfer, ×{}", self.upscale),
            Scenario::CrossGranularity => format!("Cross-granularity transfer, ×{}", self.upscale),
        };
        let mut s = format!("# {title}\n\n");
        let _ = writeln!(
            s,
            "Target test period: {} slots starting at slot {}. Seed {}.\n",
            self.test_slots.len(),
            self.test_slots.first().copied().unwrap_or(0),
            self.seed
        );
        s.push_str("| Model | RMSE | NRMSE | MAE | MAPE | Corr |\n|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let m = &r.metrics;
            let mape = m.mape.map_or("n/a".to_string(), |v| format!("{v:.3}"));
            let _ = writeln!(s, "| {} | {:.3} | {:.3} | {:.3} | {} | {:.3} |", r.model, m.rmse, m.nrmse, m.mae, mape, m.corr);
        }
        s.push_str("\n## Parameters\n\n| Model | Trainable parameters |\n|---|---|\n");
        for r in self.rows.iter().filter(|r| r.parameters.is_some()) {
            let _ = writeln!(s, "| {} | {} |", r.model, r.parameters.unwrap_or(0));
        }
        s
    }
}

/// Task-level data shared by the later stages.
struct TaskData {
    /// Windows used to pre-train STNet.
    pretrain: Vec<WindowSample<f64>>,
    /// Target task windows (coarse input → fine output).
    target: Vec<WindowSample<f64>>,
    /// Target coarse series at task input level.
    target_coarse: Tensor<f64>,
    /// Series and POI map PGNet learns from.
    pgnet_series: Tensor<f64>,
    pgnet_poi: PoiMap<f64>,
    /// POI map at the target task's fine level.
    target_poi: PoiMap<f64>,
}

/// A configured experiment rooted at an output directory.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    config_hash: String,
}

fn stage_err(stage: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| e.in_stage(stage)
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

impl Experiment {
    pub fn new(config: ExperimentConfig, out: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let config_hash = config.hash()?;
        Ok(Self { config, out: out.into(), config_hash })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn model_stem(&self, name: &str) -> PathBuf {
        self.out.join("models").join(name)
    }

    fn require(&self, rel: &Path) -> Result<()> {
        if !rel.exists() {
            return Err(Error::Config(format!("missing input {}; run the earlier stages first", rel.display())));
        }
        Ok(())
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.out).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }

    fn write_manifest(
        &self,
        stage: &str,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
        notes: BTreeMap<String, serde_json::Value>,
    ) -> Result<()> {
        let hashes = |paths: &[PathBuf]| -> Result<BTreeMap<String, String>> {
            paths.iter().map(|p| Ok((self.rel(p), file_hash(p)?))).collect()
        };
        let m = StageManifest {
            stage: stage.to_string(),
            seed: self.config.seed,
            config_hash: self.config_hash.clone(),
            inputs: hashes(inputs)?,
            outputs: hashes(outputs)?,
            notes,
        };
        let path = self.path(&format!("manifests/{stage}.json"));
        fs::create_dir_all(path.parent().expect("manifest dir"))?;
        fs::write(path, serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(())
    }

    fn ckpt_files(stem: &Path) -> [PathBuf; 2] {
        let (a, b) = ModelCheckpoint::<f64>::paths(stem);
        [a, b]
    }

    fn sub_seed(&self, k: u64) -> u64 {
        self.config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k)
    }

    // ---------------------------------------------------------------- synth

    fn city_paths(&self, city: &str) -> (PathBuf, PathBuf) {
        (self.path(&format!("data/{city}.pgrd")), self.path(&format!("data/{city}_poi.pgrd")))
    }

    fn cities(&self) -> Vec<(&'static str, &CitySpec)> {
        match self.config.scenario {
            Scenario::CrossCity => vec![("source", &self.config.source), ("target", &self.config.target)],
            Scenario::CrossGranularity => vec![("target", &self.config.target)],
        }
    }

    pub fn synth(&self) -> Result<()> {
        let run = || -> Result<()> {
            let mut outputs = Vec::new();
            for (role, spec) in self.cities() {
                let city = generate_city::<f64>(spec)?;
                let (pop_path, poi_path) = self.city_paths(role);
                let meta = GridMeta {
                    city: spec.name.clone(),
                    cell_meters: spec.cell_meters,
                    slot_minutes: 30,
                    categories: Vec::new(),
                };
                save_grid(&pop_path, &city.population.values, &meta)?;
                let poi_meta = GridMeta { categories: city.poi.categories.clone(), ..meta };
                save_grid(&poi_path, &city.poi.counts, &poi_meta)?;
                outputs.extend([pop_path, poi_path]);
            }
            self.write_manifest("synth", &[], &outputs, BTreeMap::new())
        };
        run().map_err(stage_err("synth"))
    }

    fn load_city(&self, role: &str) -> Result<(PopulationSeries<f64>, PoiMap<f64>)> {
        let (pop_path, poi_path) = self.city_paths(role);
        self.require(&pop_path)?;
        self.require(&poi_path)?;
        let (values, meta) = load_grid::<f64>(&pop_path)?;
        let (counts, poi_meta) = load_grid::<f64>(&poi_path)?;
        let categories = if poi_meta.categories.is_empty() {
            POI_CATEGORIES.iter().map(|s| s.to_string()).collect()
        } else {
            poi_meta.categories
        };
        Ok((PopulationSeries::new(values, meta.cell_meters)?, PoiMap::new(counts, categories)?))
    }

    fn task_data(&self) -> Result<TaskData> {
        let n = self.config.upscale;
        let window = self.config.stnet.seq_len;
        let (target, target_poi) = self.load_city("target")?;
        match self.config.scenario {
            Scenario::CrossCity => {
                let (source, source_poi) = self.load_city("source")?;
                Ok(TaskData {
                    pretrain: make_windows(&source, n, window)?,
                    target: make_windows(&target, n, window)?,
                    target_coarse: coarsen(&target.values, n)?,
                    pgnet_series: source.values,
                    pgnet_poi: source_poi,
                    target_poi,
                })
            }
            Scenario::CrossGranularity => {
                let mid = PopulationSeries::new(coarsen(&target.values, n)?, target.cell_meters * n as u32)?;
                let mid_poi = target_poi.coarsen(n)?;
                Ok(TaskData {
                    pretrain: make_windows(&mid, n, window)?,
                    target: make_windows(&target, n, window)?,
                    target_coarse: mid.values.clone(),
                    pgnet_series: mid.values,
                    pgnet_poi: mid_poi,
                    target_poi,
                })
            }
        }
    }

    fn city_inputs(&self) -> Vec<PathBuf> {
        self.cities()
            .into_iter()
            .flat_map(|(role, _)| {
                let (a, b) = self.city_paths(role);
                [a, b]
            })
            .collect()
    }

    // ------------------------------------------------------------- pretrain

    fn needs_snet(&self) -> bool {
        self.config.variants.iter().any(|v| !v.temporal())
    }

    fn needs_pgnet(&self) -> bool {
        self.config.variants.iter().any(|v| v.uses_pgnet())
    }

    pub fn pretrain_stnet(&self) -> Result<()> {
        let run = || -> Result<()> {
            let data = self.task_data()?;
            let split = split_source(data.pretrain.len(), self.sub_seed(1))?;
            let train: Vec<_> = split.train.iter().map(|&i| &data.pretrain[i]).collect();
            let val: Vec<_> = split.val.iter().map(|&i| &data.pretrain[i]).collect();
            let mut outputs = Vec::new();
            let mut notes = BTreeMap::new();
            let mut kinds = vec![("stnet", true)];
            if self.needs_snet() {
                kinds.push(("snet", false));
            }
            for (name, temporal) in kinds {
                let cfg = StnetConfig { temporal, ..self.config.stnet.clone() };
                let mut model = Stnet::<f64>::new(&cfg, self.sub_seed(2))?;
                let log = train_stnet(&mut model, &train, &val, &self.config.pretrain, self.sub_seed(3))?;
                let best = log.best_val.unwrap_or(f64::NAN);
                log::info!("pretrained {name}: {} steps, best val RMSE {best:.4}", log.losses.len());
                let stem = self.model_stem(name);
                model.to_checkpoint()?.with_metric("val_rmse", best).with_metric("steps", log.losses.len() as f64).save(&stem)?;
                outputs.extend(Self::ckpt_files(&stem));
                notes.insert(name.to_string(), serde_json::to_value(&log)?);
            }
            let baseline = evaluate(&bicubic_windows(&val, self.config.upscale)?, &stack_targets(&val)?)?;
            notes.insert("bicubic_val_rmse".into(), baseline.rmse.into());
            self.write_manifest("pretrain-stnet", &self.city_inputs(), &outputs, notes)
        };
        run().map_err(stage_err("pretrain-stnet"))
    }

    pub fn pretrain_pgnet(&self) -> Result<()> {
        let run = || -> Result<()> {
            let data = self.task_data()?;
            let mut model = Pgnet::<f64>::new(&self.config.pgnet, self.sub_seed(4))?;
            let log = model.train(&data.pgnet_series, &data.pgnet_poi, &self.config.pgnet_train, self.sub_seed(5))?;
            log::info!("pretrained pgnet: best val flow MSE {:?}", log.best_val);
            let stem = self.model_stem("pgnet");
            model.to_checkpoint()?.with_metric("val_flow_mse", log.best_val.unwrap_or(f64::NAN)).save(&stem)?;
            let mut notes = BTreeMap::new();
            notes.insert("log".into(), serde_json::to_value(&log)?);
            self.write_manifest("pretrain-pgnet", &self.city_inputs(), &Self::ckpt_files(&stem), notes)
        };
        run().map_err(stage_err("pretrain-pgnet"))
    }

    // -------------------------------------------------------------- augment

    fn reference(&self, data: &TaskData) -> Result<(ReferenceSnapshot<f64>, Vec<usize>)> {
        split_target(&data.target, self.config.test_slots)
    }

    pub fn augment(&self) -> Result<()> {
        let run = || -> Result<()> {
            let data = self.task_data()?;
            let (reference, _) = self.reference(&data)?;
            let stem = self.model_stem("pgnet");
            let [ckpt_data, ckpt_manifest] = Self::ckpt_files(&stem);
            self.require(&ckpt_manifest)?;
            let mut model = Pgnet::from_checkpoint(&ModelCheckpoint::load(&stem)?)?;
            let samples = augment_target(
                &reference,
                &data.target_poi,
                &data.target_coarse,
                &mut model,
                self.config.pgnet.frames,
                self.config.stnet.seq_len,
                self.config.upscale,
            )?;
            let s = reference.values.shape();
            let frames: Vec<f64> = samples.iter().flat_map(|w| w.fine_target.data().iter().copied()).collect();
            let stack = Tensor::new(&[samples.len(), s[1], s[2]], frames)?;
            let path = self.path("data/augmented.pgrd");
            let meta = GridMeta { city: self.config.target.name.clone(), cell_meters: 0, slot_minutes: 30, categories: Vec::new() };
            save_grid(&path, &stack, &meta)?;
            let mut notes = BTreeMap::new();
            notes.insert("reference_slot".into(), reference.slot_index.into());
            notes.insert("slots".into(), serde_json::to_value(samples.iter().map(|w| w.slot).collect::<Vec<_>>())?);
            let mut inputs = self.city_inputs();
            inputs.extend([ckpt_data, ckpt_manifest]);
            self.write_manifest("augment", &inputs, &[path], notes)
        };
        run().map_err(stage_err("augment"))
    }

    /// Augmented target windows, read back from `data/augmented.pgrd`.
    fn augmented_windows(&self, data: &TaskData, reference: &ReferenceSnapshot<f64>) -> Result<Vec<WindowSample<f64>>> {
        let path = self.path("data/augmented.pgrd");
        self.require(&path)?;
        let (stack, _) = load_grid::<f64>(&path)?;
        let (_, lb) = split_frames(self.config.pgnet.frames);
        let first = reference.slot_index - lb;
        let by_slot: BTreeMap<usize, &WindowSample<f64>> = data.target.iter().map(|w| (w.slot, w)).collect();
        (0..stack.shape()[0])
            .map(|k| {
                let slot = first + k;
                let w = by_slot.get(&slot).ok_or_else(|| Error::Data(format!("no target window ends at slot {slot}")))?;
                Ok(WindowSample { fine_target: crate::grid::frame(&stack, k), ..(*w).clone() })
            })
            .collect()
    }

    // ------------------------------------------------------------- finetune

    pub fn finetune(&self) -> Result<()> {
        let run = || -> Result<()> {
            let data = self.task_data()?;
            let (reference, _) = self.reference(&data)?;
            let ref_window = data
                .target
                .iter()
                .find(|w| w.slot == reference.slot_index)
                .cloned()
                .ok_or_else(|| Error::Data("reference window missing".into()))?;
            let augmented = if self.needs_pgnet() { self.augmented_windows(&data, &reference)? } else { Vec::new() };
            let split = split_source(data.pretrain.len(), self.sub_seed(1))?;
            let source: Vec<_> = split.train.iter().map(|&i| &data.pretrain[i]).collect();
            let mut inputs = self.city_inputs();
            let mut outputs = Vec::new();
            let mut notes = BTreeMap::new();
            for &variant in &self.config.variants {
                let base = if variant.temporal() { "stnet" } else { "snet" };
                let base_stem = self.model_stem(base);
                let [a, b] = Self::ckpt_files(&base_stem);
                self.require(&b)?;
                inputs.extend([a, b]);
                let mut model = Stnet::from_checkpoint(&ModelCheckpoint::load(&base_stem)?)?;
                let seed = self.sub_seed(6);
                match variant {
                    Variant::StnetFrozen => {}
                    Variant::Snet | Variant::Stnet => {
                        let log = train_stnet(&mut model, &[&ref_window], &[], &self.config.finetune, seed)?;
                        notes.insert(variant.key().to_string(), serde_json::to_value(log.losses)?);
                    }
                    Variant::SnetPgnet | Variant::StnetPgnet => {
                        let pool: Vec<_> = augmented.iter().collect();
                        let log = train_stnet(&mut model, &pool, &[], &self.config.finetune, seed)?;
                        notes.insert(variant.key().to_string(), serde_json::to_value(log.losses)?);
                    }
                    Variant::Psrnet => {
                        let pool: Vec<_> = augmented.iter().collect();
                        let log = pada_finetune(&mut model, &source, &pool, &self.config.pada, seed)?;
                        notes.insert(variant.key().to_string(), serde_json::to_value(log)?);
                    }
                }
                let stem = self.model_stem(&variant.file_stem());
                let mut ckpt = model.to_checkpoint()?;
                ckpt.kind = "stnet".into();
                ckpt.save(&stem)?;
                outputs.extend(Self::ckpt_files(&stem));
            }
            if self.needs_pgnet() {
                inputs.push(self.path("data/augmented.pgrd"));
            }
            self.write_manifest("finetune", &inputs, &outputs, notes)
        };
        run().map_err(stage_err("finetune"))
    }

    // ------------------------------------------------------------- evaluate

    pub fn evaluate(&self) -> Result<EvalReport> {
        let run = || -> Result<EvalReport> {
            let data = self.task_data()?;
            let (_, test_idx) = self.reference(&data)?;
            let test: Vec<_> = test_idx.iter().map(|&i| &data.target[i]).collect();
            let truth = stack_targets(&test)?;
            let n = self.config.upscale;
            let mut rows = Vec::new();
            let mut inputs = self.city_inputs();
            let mut dumps: Vec<(String, Tensor<f64>)> = vec![("truth".into(), truth.clone())];
            for &variant in &self.config.variants {
                let stem = self.model_stem(&variant.file_stem());
                let [a, b] = Self::ckpt_files(&stem);
                self.require(&b)?;
                inputs.extend([a, b]);
                let mut model = Stnet::from_checkpoint(&ModelCheckpoint::load(&stem)?)?;
                let pred = predict_windows(&mut model, &test, 16)?;
                rows.push(ReportRow {
                    model: variant.label().into(),
                    key: variant.key().into(),
                    metrics: evaluate(&pred, &truth)?,
                    parameters: Some(model.parameter_count()),
                });
                dumps.push((variant.file_stem(), pred));
            }
            let bicubic = bicubic_windows(&test, n)?;
            rows.push(ReportRow { model: "Bicubic".into(), key: "bicubic".into(), metrics: evaluate(&bicubic, &truth)?, parameters: None });
            dumps.push(("bicubic".into(), bicubic));
            let report = EvalReport {
                scenario: self.config.scenario,
                upscale: n,
                seed: self.config.seed,
                config_hash: self.config_hash.clone(),
                test_slots: test.iter().map(|w| w.slot).collect(),
                rows,
            };
            let md = self.path("report.md");
            let js = self.path("report.json");
            fs::write(&md, report.to_markdown())?;
            fs::write(&js, serde_json::to_string_pretty(&report)? + "\n")?;
            let mut outputs = vec![md, js];
            for (k, w) in test.iter().take(self.config.png_slots).enumerate() {
                for (name, stack) in &dumps {
                    let path = self.path(&format!("png/slot{}_{name}.png", w.slot));
                    write_png(&path, &crate::grid::frame(stack, k))?;
                    outputs.push(path);
                }
            }
            self.write_manifest("evaluate", &inputs, &outputs, BTreeMap::new())?;
            Ok(report)
        };
        run().map_err(stage_err("evaluate"))
    }

    /// Every stage in order.
    pub fn run_all(&self) -> Result<EvalReport> {
        fs::create_dir_all(&self.out)?;
        fs::write(self.path("config.json"), serde_json::to_string_pretty(&self.config)? + "\n")?;
        self.synth()?;
        self.pretrain_stnet()?;
        if self.needs_pgnet() {
            self.pretrain_pgnet()?;
            self.augment()?;
        }
        self.finetune()?;
        self.evaluate()
    }
}

/// Bicubic upsampling of each window's last coarse frame, stacked like
/// the fine targets.
fn bicubic_windows(windows: &[&WindowSample<f64>], n: usize) -> Result<Tensor<f64>> {
    let frames = windows.iter().map(|w| bicubic_upsample(&w.last_coarse(), n)).collect::<Result<Vec<_>>>()?;
    let first = frames.first().ok_or_else(|| Error::Data("no windows".into()))?;
    let (h, w) = (first.shape()[1], first.shape()[2]);
    Tensor::new(&[frames.len(), h, w], frames.into_iter().flat_map(Tensor::into_data).collect())
}

/// Pixel scale of PNG dumps.
const PNG_ZOOM: u32 = 8;

/// Grayscale dump of a `[1, H, W]` frame, linearly normalized so the
/// frame maximum is white.
pub fn write_png(path: &Path, frame: &Tensor<f64>) -> Result<()> {
    let s = frame.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let max = frame.data().iter().copied().fold(0.0f64, f64::max);
    let (zh, zw) = (h as u32 * PNG_ZOOM, w as u32 * PNG_ZOOM);
    let mut px = Vec::with_capacity((zh * zw) as usize);
    for y in 0..zh {
        for x in 0..zw {
            let v = frame.data()[(y / PNG_ZOOM) as usize * w + (x / PNG_ZOOM) as usize];
            px.push(if max > 0.0 { (v.max(0.0) / max * 255.0).round() as u8 } else { 0 });
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let img = image::GrayImage::from_raw(zw, zh, px).expect("buffer matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Format(format!("png: {e}")))
}
