//! Command-line front end: one subcommand per pipeline stage plus `pipeline`,
//! which runs them all from a flat JSON config.
//!
//! Exit codes: 0 on success, 2 for validation and I/O errors, 3 for numeric
//! failures (singular designs, divergence, the accuracy gate).

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::convnet::{Model, ModelSpec, TrainConfig};
use crate::error::{Error, Result};
use crate::glm::{build_confound_mask, ConfoundMask, FeatureMatrix, GlmReport, MaskOptions};
use crate::saliency::{
    average_saliency, partial_saliency_map, region_mean, saliency_map, SaliencyMap,
};
use crate::synthdata::{block_mask, generate_dataset, Block, Dataset, CONFOUNDER_NAMES};

/// Minimum training accuracy accepted by `train` and `pipeline`.
pub const ACCURACY_GATE: f64 = 0.95;

/// Environment variable holding the log filter.
pub const LOG_ENV: &str = "CONFVIZ_LOG";

#[derive(Debug, Parser)]
#[command(name = "confviz", version, about = "Confounder-aware saliency maps for small ConvNets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic four-blob dataset.
    Synth(SynthArgs),
    /// Train the ConvNet on a dataset directory.
    Train(TrainArgs),
    /// Test every encoder feature for confounder association.
    ConfoundTest(ConfoundArgs),
    /// Compute the average saliency map, optionally with a confound mask.
    Saliency(SaliencyArgs),
    /// Run every stage from a JSON config.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 512)]
    pub n_per_group: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_model: PathBuf,
    /// Loss history CSV; defaults to the model path with a `.loss.csv` suffix.
    #[arg(long)]
    pub loss_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.0)]
    pub l2: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Do not fail when training accuracy is below the gate.
    #[arg(long)]
    pub no_gate: bool,
}

#[derive(Debug, Args)]
pub struct ConfoundArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Comma-separated covariate columns to test.
    #[arg(long, value_delimiter = ',', default_value = "sigma_B,sigma_C")]
    pub confounders: Vec<String>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Divide alpha by (features x confounders).
    #[arg(long)]
    pub bonferroni: bool,
    /// Output directory for features.csv, glm_report.json and mask.txt.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SaliencyArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// A glm_report.json, a file holding a 0/1 string, or the string itself.
    #[arg(long)]
    pub mask: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write one CSV per subject.
    #[arg(long)]
    pub per_subject: bool,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Flat JSON config; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_per_group: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub bonferroni: bool,
    #[arg(long, value_delimiter = ',')]
    pub confounders: Option<Vec<String>>,
    #[arg(long)]
    pub no_gate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub n_per_group: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub alpha: f64,
    pub bonferroni: bool,
    pub confounders: Vec<String>,
    pub gate: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seed: 7,
            n_per_group: 512,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            epochs: t.epochs,
            batch_size: t.batch_size,
            l2: t.l2,
            alpha: 0.05,
            bonferroni: false,
            confounders: CONFOUNDER_NAMES.iter().map(|s| s.to_string()).collect(),
            gate: true,
            out_dir: None,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format("config", e.to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            epochs: self.epochs,
            batch_size: self.batch_size,
            l2: self.l2,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_per_group == 0 {
            return Err(Error::Validation("n_per_group must be at least 1".into()));
        }
        check_alpha(self.alpha)?;
        if self.confounders.is_empty() {
            return Err(Error::Validation("at least one confounder column is required".into()));
        }
        self.train_config().validate()
    }

    fn apply(&mut self, a: &PipelineArgs) {
        if let Some(v) = &a.out {
            self.out_dir = Some(v.clone());
        }
        if let Some(v) = a.seed {
            self.seed = v;
        }
        if let Some(v) = a.n_per_group {
            self.n_per_group = v;
        }
        if let Some(v) = a.learning_rate {
            self.learning_rate = v;
        }
        if let Some(v) = a.momentum {
            self.momentum = v;
        }
        if let Some(v) = a.epochs {
            self.epochs = v;
        }
        if let Some(v) = a.batch_size {
            self.batch_size = v;
        }
        if let Some(v) = a.l2 {
            self.l2 = v;
        }
        if let Some(v) = a.alpha {
            self.alpha = v;
        }
        if a.bonferroni {
            self.bonferroni = true;
        }
        if let Some(v) = &a.confounders {
            self.confounders = v.clone();
        }
        if a.no_gate {
            self.gate = false;
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Validation(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub struct BlockMeans {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub dataset: String,
    pub model: String,
    pub loss_history: String,
    pub features: String,
    pub glm_report: String,
    pub mask: String,
    pub saliency_full_csv: String,
    pub saliency_full_pgm: String,
    pub saliency_partial_csv: String,
    pub saliency_partial_pgm: String,
}

impl Default for Artifacts {
    fn default() -> Self {
        Self {
            dataset: "data".into(),
            model: "model.txt".into(),
            loss_history: "loss.csv".into(),
            features: "features.csv".into(),
            glm_report: "glm_report.json".into(),
            mask: "mask.txt".into(),
            saliency_full_csv: "saliency_full.csv".into(),
            saliency_full_pgm: "saliency_full.pgm".into(),
            saliency_partial_csv: "saliency_partial.csv".into(),
            saliency_partial_pgm: "saliency_partial.pgm".into(),
        }
    }
}

/// Summary of one pipeline run. Paths are relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: PipelineConfig,
    pub training_accuracy: f64,
    pub epoch_losses: Vec<f64>,
    pub n_features: usize,
    pub n_confounded: usize,
    pub confounded_indices: Vec<usize>,
    pub mask: String,
    pub full_block_means: BlockMeans,
    pub partial_block_means: BlockMeans,
    /// full(B u C) / partial(B u C).
    #[serde(with = "crate::floats")]
    pub attenuation_bc: f64,
    /// partial(A u D) / full(A u D).
    #[serde(with = "crate::floats")]
    pub retention_ad: f64,
    pub confounded_fraction: f64,
    pub artifacts: Artifacts,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format("run_report.json", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// `num / den`, with a zero denominator reported as infinity.
pub fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        if num == 0.0 {
            f64::NAN
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

pub fn block_means(map: &SaliencyMap) -> Result<BlockMeans> {
    let m = |b| region_mean(map, &block_mask(b));
    Ok(BlockMeans {
        a: m(Block::A)?,
        b: m(Block::B)?,
        c: m(Block::C)?,
        d: m(Block::D)?,
    })
}

pub fn union_mean(map: &SaliencyMap, blocks: &[Block]) -> Result<f64> {
    let pixels: Vec<(usize, usize)> = blocks.iter().flat_map(|&b| block_mask(b)).collect();
    region_mean(map, &pixels)
}

/// Short content hash identifying a model file.
pub fn model_id(model: &Model) -> String {
    let digest = Sha256::digest(model.to_text().as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Encoder features and prediction scores for every record, in record order.
pub fn extract_features(model: &Model, dataset: &Dataset) -> Result<(FeatureMatrix, Vec<f64>)> {
    let mut rows = Vec::with_capacity(dataset.len());
    let mut scores = Vec::with_capacity(dataset.len());
    for rec in &dataset.records {
        let pass = model.forward(&rec.image)?;
        rows.push(pass.features().data().to_vec());
        scores.push(pass.score());
    }
    Ok((FeatureMatrix::from_rows(rows, model_id(model))?, scores))
}

/// Per-subject maps in record order, full or masked.
pub fn subject_maps(model: &Model, dataset: &Dataset, mask: Option<&ConfoundMask>) -> Result<Vec<SaliencyMap>> {
    dataset
        .records
        .iter()
        .map(|rec| {
            let mut map = match mask {
                None => saliency_map(model, &rec.image)?,
                Some(m) => partial_saliency_map(model, &rec.image, m)?,
            };
            map.subject = Some(rec.id);
            Ok(map)
        })
        .collect()
}

/// Resolves `--mask`: a report JSON, a file with a bit string, or the string itself.
pub fn resolve_mask(arg: &str) -> Result<ConfoundMask> {
    let path = Path::new(arg);
    if path.is_file() {
        if path.extension().is_some_and(|e| e == "json") {
            return GlmReport::load(path)?.confound_mask();
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        return ConfoundMask::parse_bit_string(text.trim());
    }
    ConfoundMask::parse_bit_string(arg)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn loss_csv(history: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (i, l) in history.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, l));
    }
    out
}

fn write_map(map: &SaliencyMap, csv: &Path, pgm: &Path) -> Result<()> {
    write(csv, &map.to_csv())?;
    write(pgm, &map.to_pgm())
}

fn check_columns(dataset: &Dataset, names: &[String]) -> Result<()> {
    for name in names {
        dataset.covariate_index(name)?;
    }
    Ok(())
}

fn stage(name: &'static str) -> impl FnOnce(Error) -> Error {
    move |e| Error::Stage {
        stage: name,
        source: Box::new(e),
    }
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let ds = generate_dataset(args.n_per_group, args.seed)?;
    ds.save(&args.out)?;
    log::info!("wrote {} records to {}", ds.len(), args.out.display());
    Ok(())
}

/// Trains and saves a model; returns the training accuracy.
pub fn cmd_train(args: &TrainArgs) -> Result<f64> {
    let config = TrainConfig {
        learning_rate: args.learning_rate,
        momentum: args.momentum,
        epochs: args.epochs,
        batch_size: args.batch_size,
        l2: args.l2,
        seed: args.seed,
    };
    config.validate()?;
    let ds = Dataset::load(&args.data)?;
    let mut model = Model::init(ModelSpec::synthetic(), args.seed)?;
    let history = model.train(&ds, &config)?;
    let accuracy = model.training_accuracy(&ds)?;
    model.save(&args.out_model)?;
    let loss_path = args
        .loss_out
        .clone()
        .unwrap_or_else(|| args.out_model.with_extension("loss.csv"));
    write(&loss_path, &loss_csv(&history))?;
    log::info!("training accuracy {accuracy:.4}");
    if !args.no_gate && accuracy < ACCURACY_GATE {
        return Err(Error::AccuracyGate {
            accuracy,
            gate: ACCURACY_GATE,
        });
    }
    Ok(accuracy)
}

pub fn cmd_confound_test(args: &ConfoundArgs) -> Result<GlmReport> {
    check_alpha(args.alpha)?;
    let ds = Dataset::load(&args.data)?;
    check_columns(&ds, &args.confounders)?;
    let model = Model::load(&args.model)?;
    let (features, scores) = extract_features(&model, &ds)?;
    let z = ds.covariate_columns(&args.confounders)?;
    let options = MaskOptions {
        alpha: args.alpha,
        bonferroni: args.bonferroni,
    };
    let (mask, report) = build_confound_mask(&features, &scores, &z, &args.confounders, &options)?;
    create_dir(&args.out)?;
    write(&args.out.join("features.csv"), &features.to_csv())?;
    report.save(&args.out.join("glm_report.json"))?;
    write(&args.out.join("mask.txt"), &format!("{}\n", mask.to_bit_string()))?;
    log::info!("{}", report.summary());
    Ok(report)
}

pub fn cmd_saliency(args: &SaliencyArgs) -> Result<SaliencyMap> {
    let mask = args.mask.as_deref().map(resolve_mask).transpose()?;
    let ds = Dataset::load(&args.data)?;
    let model = Model::load(&args.model)?;
    if let Some(m) = &mask {
        if m.len() != model.feature_dim() {
            return Err(Error::Shape(format!(
                "mask has {} bits, model has {} features",
                m.len(),
                model.feature_dim()
            )));
        }
    }
    let maps = subject_maps(&model, &ds, mask.as_ref())?;
    let mode = if mask.is_some() { "partial" } else { "full" };
    create_dir(&args.out)?;
    if args.per_subject {
        let dir = args.out.join("subjects");
        create_dir(&dir)?;
        for map in &maps {
            let id = map.subject.unwrap_or_default();
            write(&dir.join(format!("{mode}_{id:05}.csv")), &map.to_csv())?;
        }
    }
    let mut avg = average_saliency(&maps)?;
    if let Some(m) = &mask {
        avg.mask_id = Some(m.to_bit_string());
    }
    write_map(
        &avg,
        &args.out.join(format!("saliency_{mode}.csv")),
        &args.out.join(format!("saliency_{mode}.pgm")),
    )?;
    Ok(avg)
}

/// Runs every stage into the config's output directory and writes
/// `run_report.json` there.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunReport> {
    config.validate()?;
    let out = config
        .out_dir
        .clone()
        .ok_or_else(|| Error::Validation("pipeline needs an output directory".into()))?;
    let paths = Artifacts::default();
    create_dir(&out)?;

    log::info!("generating {} images per group", config.n_per_group);
    let ds = generate_dataset(config.n_per_group, config.seed).map_err(stage("synth"))?;
    check_columns(&ds, &config.confounders).map_err(stage("synth"))?;
    ds.save(&out.join(&paths.dataset)).map_err(stage("synth"))?;

    log::info!("training for {} epochs", config.epochs);
    let train = || -> Result<(Model, Vec<f64>, f64)> {
        let mut model = Model::init(ModelSpec::synthetic(), config.seed)?;
        let history = model.train(&ds, &config.train_config())?;
        let accuracy = model.training_accuracy(&ds)?;
        model.save(&out.join(&paths.model))?;
        write(&out.join(&paths.loss_history), &loss_csv(&history))?;
        log::info!("training accuracy {accuracy:.4}");
        if config.gate && accuracy < ACCURACY_GATE {
            return Err(Error::AccuracyGate {
                accuracy,
                gate: ACCURACY_GATE,
            });
        }
        Ok((model, history, accuracy))
    };
    let (model, history, accuracy) = train().map_err(stage("train"))?;

    let confound = || -> Result<(ConfoundMask, GlmReport)> {
        let (features, scores) = extract_features(&model, &ds)?;
        let z = ds.covariate_columns(&config.confounders)?;
        let options = MaskOptions {
            alpha: config.alpha,
            bonferroni: config.bonferroni,
        };
        let (mask, report) = build_confound_mask(&features, &scores, &z, &config.confounders, &options)?;
        write(&out.join(&paths.features), &features.to_csv())?;
        report.save(&out.join(&paths.glm_report))?;
        write(&out.join(&paths.mask), &format!("{}\n", mask.to_bit_string()))?;
        log::info!("{}", report.summary());
        Ok((mask, report))
    };
    let (mask, glm) = confound().map_err(stage("confound-test"))?;

    let maps = || -> Result<(SaliencyMap, SaliencyMap)> {
        let full = average_saliency(&subject_maps(&model, &ds, None)?)?;
        let mut partial = average_saliency(&subject_maps(&model, &ds, Some(&mask))?)?;
        partial.mask_id = Some(mask.to_bit_string());
        write_map(&full, &out.join(&paths.saliency_full_csv), &out.join(&paths.saliency_full_pgm))?;
        write_map(
            &partial,
            &out.join(&paths.saliency_partial_csv),
            &out.join(&paths.saliency_partial_pgm),
        )?;
        Ok((full, partial))
    };
    let (full, partial) = maps().map_err(stage("saliency"))?;

    let bc = [Block::B, Block::C];
    let ad = [Block::A, Block::D];
    let report = RunReport {
        config: PipelineConfig {
            out_dir: None,
            ..config.clone()
        },
        training_accuracy: accuracy,
        epoch_losses: history,
        n_features: mask.len(),
        n_confounded: glm.n_confounded,
        confounded_indices: (0..mask.len()).filter(|&j| !mask.bits()[j]).collect(),
        mask: mask.to_bit_string(),
        full_block_means: block_means(&full)?,
        partial_block_means: block_means(&partial)?,
        attenuation_bc: ratio(union_mean(&full, &bc)?, union_mean(&partial, &bc)?),
        retention_ad: ratio(union_mean(&partial, &ad)?, union_mean(&full, &ad)?),
        confounded_fraction: glm.n_confounded as f64 / mask.len().max(1) as f64,
        artifacts: paths,
    };
    write(&out.join("run_report.json"), &report.to_json())?;
    log::info!(
        "attenuation(B,C) {:.3}, retention(A,D) {:.3}",
        report.attenuation_bc,
        report.retention_ad
    );
    Ok(report)
}

pub fn cmd_pipeline(args: &PipelineArgs) -> Result<RunReport> {
    let mut config = match &args.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    config.apply(args);
    if config.out_dir.is_none() {
        config.out_dir = Some(PathBuf::from("confviz-run"));
    }
    run_pipeline(&config)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a).map(drop),
        Command::ConfoundTest(a) => cmd_confound_test(a).map(drop),
        Command::Saliency(a) => cmd_saliency(a).map(drop),
        Command::Pipeline(a) => cmd_pipeline(a).map(drop),
    }
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_numeric() {
        3
    } else {
        2
    }
}
