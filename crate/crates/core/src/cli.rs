//! Command-line workflows. Every artifact is written under `--out` and
//! carries (or sits next to) the seed and configuration that produced it.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bench::{self, BenchConfig, BenchMethod, SyntheticRaster};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{Error, Result};
use crate::eval::{self, FoldAssignment, MetricsReport, PredictionTable, DEFAULT_THRESHOLD};
use crate::export;
use crate::model::{LossMode, ModelDims, ModelParams};
use crate::sampler::{self, CachedFeatures, Method, SamplingConfig};
use crate::seed;
use crate::slide::{self, Bag, CohortSpec, EncoderKind, ManifestEntry, SynthSpec};
use crate::train::{self, TrainConfig};
use crate::tune::{self, Goal, ParamSpace};

#[derive(Debug, Parser)]
#[command(name = "drasmil", version, about = "Attention MIL with active region sampling")]
pub struct Cli {
    /// Worker threads (0 = one per core). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,

    /// JSON file with `seed`, `train` and `sampling` sections; flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort of cached bags and a manifest.
    Synth(SynthArgs),
    /// Tile, tissue-filter and encode a raster image into a cached bag.
    Patch(PatchArgs),
    /// Train one model per cross-validation fold.
    Train(TrainArgs),
    /// Evaluate test folds with repeats and bootstrap the metrics.
    Eval(EvalArgs),
    /// Time and memory sweep over encoding batch sizes.
    Bench(BenchArgs),
    /// Random-search tuning of training or sampling hyperparameters.
    Tune(TuneArgs),
    /// Export sampling trace, attention and weight maps for one slide.
    Heatmap(HeatmapArgs),
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    train: Option<TrainConfig>,
    sampling: Option<SamplingConfig>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 120)]
    pub slides: usize,
    #[arg(long, default_value_t = 40)]
    pub patients: usize,
    #[arg(long, default_value_t = 0.35)]
    pub positive_fraction: f64,
    #[arg(long, default_value_t = 50)]
    pub width: u32,
    #[arg(long, default_value_t = 80)]
    pub height: u32,
    #[arg(long, default_value_t = 0.05)]
    pub signal_fraction: f64,
    #[arg(long, default_value_t = 2.0)]
    pub shift: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum EncoderArg {
    RandomProjection,
    ColorHistogram,
}

impl From<EncoderArg> for EncoderKind {
    fn from(e: EncoderArg) -> Self {
        match e {
            EncoderArg::RandomProjection => EncoderKind::RandomProjection,
            EncoderArg::ColorHistogram => EncoderKind::ColorHistogram,
        }
    }
}

#[derive(Debug, Args)]
pub struct PatchArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Output feature cache file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub slide_id: String,
    #[arg(long)]
    pub patient_id: String,
    #[arg(long)]
    pub label: u8,
    #[arg(long, default_value_t = 256)]
    pub patch_size: u32,
    #[arg(long, default_value_t = slide::DEFAULT_SATURATION_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, value_enum, default_value_t = EncoderArg::RandomProjection)]
    pub encoder: EncoderArg,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum LossArg {
    CrossEntropy,
    BalancedCrossEntropy,
}

#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub attention_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
}

impl TrainFlags {
    fn apply(&self, mut c: TrainConfig) -> TrainConfig {
        if let Some(v) = self.lr {
            c.learning_rate = v;
        }
        if let Some(v) = self.weight_decay {
            c.weight_decay = v;
        }
        if let Some(v) = self.dropout {
            c.dropout = v;
        }
        if let Some(v) = self.loss {
            c.loss_mode = match v {
                LossArg::CrossEntropy => LossMode::CrossEntropy,
                LossArg::BalancedCrossEntropy => LossMode::BalancedCrossEntropy,
            };
        }
        if let Some(v) = self.max_epochs {
            c.max_epochs = v;
        }
        if let Some(v) = self.patience {
            c.patience = v;
        }
        if let Some(v) = self.attention_dim {
            c.attention_dim = v;
        }
        if self.hidden_dim.is_some() {
            c.hidden_dim = self.hidden_dim;
        }
        c
    }
}

#[derive(Debug, Args, Default)]
pub struct SamplingFlags {
    /// Total patch budget for random and active sampling.
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub final_extra: Option<usize>,
    #[arg(long)]
    pub neighbours: Option<usize>,
    #[arg(long)]
    pub random_rate: Option<f64>,
    #[arg(long)]
    pub random_delta: Option<f64>,
}

impl SamplingFlags {
    fn apply(&self, mut c: SamplingConfig) -> SamplingConfig {
        if let Some(v) = self.budget {
            c.total_budget = v;
        }
        if let Some(v) = self.iterations {
            c.iterations = v;
        }
        match (self.final_extra, self.budget) {
            (Some(v), _) => c.final_extra = v,
            // keep the default 4:1 split between iterations and final draw
            (None, Some(b)) => c.final_extra = b / 5,
            (None, None) => {}
        }
        if let Some(v) = self.neighbours {
            c.neighbours = v;
        }
        if let Some(v) = self.random_rate {
            c.random_rate = v;
        }
        if let Some(v) = self.random_delta {
            c.random_delta = v;
        }
        c
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub folds: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum MethodArg {
    Full,
    Random,
    Dras,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory written by `train` (folds.json and fold_<i>.ckpt).
    #[arg(long, conflicts_with = "checkpoint")]
    pub models: Option<PathBuf>,
    /// Evaluate every manifest slide with a single checkpoint instead.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = MethodArg::Dras)]
    pub method: MethodArg,
    #[arg(long, default_value_t = 50)]
    pub repeats: usize,
    #[arg(long, default_value_t = 100_000)]
    pub epochs: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub sampling: SamplingFlags,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub slides: usize,
    #[arg(long, default_value_t = 100)]
    pub width: u32,
    #[arg(long, default_value_t = 160)]
    pub height: u32,
    #[arg(long, default_value_t = 8)]
    pub patch_size: u32,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 64)]
    pub attention_dim: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 4, 8, 16, 32, 64])]
    pub batch_sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec!["full".to_string(), "dras".to_string()])]
    pub methods: Vec<String>,
    #[arg(long, default_value_t = 3)]
    pub repetitions: usize,
    #[arg(long, value_enum, default_value_t = EncoderArg::RandomProjection)]
    pub encoder: EncoderArg,
    /// Use trained parameters instead of a seeded initialisation.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub sampling: SamplingFlags,
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum TuneMode {
    Training,
    Sampling,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long, value_enum)]
    pub mode: TuneMode,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Sampling mode: directory written by `train`; fold 0 is tuned.
    #[arg(long)]
    pub models: Option<PathBuf>,
    /// JSON parameter space; defaults to the built-in space for the mode.
    #[arg(long)]
    pub space: Option<PathBuf>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long, default_value_t = 3)]
    pub folds: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub sampling: SamplingFlags,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    /// Cached bag to map.
    #[arg(long)]
    pub bag: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::Dras)]
    pub method: MethodArg,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub sampling: SamplingFlags,
}

/// Parse arguments, run, and map the outcome to a process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => serde_json::from_str::<FileConfig>(&read_text(p)?)?,
        None => FileConfig::default(),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build()
        .map_err(|e| Error::config(e.to_string()))?;
    pool.install(|| match &cli.command {
        Command::Synth(a) => synth(a, &file),
        Command::Patch(a) => patch(a, &file),
        Command::Train(a) => train_cmd(a, &file),
        Command::Eval(a) => eval_cmd(a, &file),
        Command::Bench(a) => bench_cmd(a, &file),
        Command::Tune(a) => tune_cmd(a, &file),
        Command::Heatmap(a) => heatmap(a, &file),
    })
}

fn resolve_seed(flag: Option<u64>, file: &FileConfig) -> u64 {
    flag.or(file.seed).unwrap_or(0)
}

fn train_config(flags: &TrainFlags, file: &FileConfig, seed: u64) -> TrainConfig {
    let base = file.train.clone().unwrap_or_default();
    TrainConfig {
        seed,
        ..flags.apply(base)
    }
}

fn sampling_config(flags: &SamplingFlags, file: &FileConfig) -> SamplingConfig {
    flags.apply(file.sampling.clone().unwrap_or_default())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(Error::file(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn method_for(arg: MethodArg, sampling: &SamplingConfig) -> Method {
    match arg {
        MethodArg::Full => Method::Full,
        MethodArg::Random => Method::Random {
            budget: sampling.total_budget,
        },
        MethodArg::Dras => Method::Dras(sampling.clone()),
    }
}

fn synth(a: &SynthArgs, file: &FileConfig) -> Result<()> {
    let seed = resolve_seed(a.seed, file);
    let spec = CohortSpec {
        slides: a.slides,
        patients: a.patients,
        positive_fraction: a.positive_fraction,
        slide: SynthSpec {
            width: a.width,
            height: a.height,
            signal_fraction: a.signal_fraction,
            signal_shift: a.shift,
            noise: a.noise,
            dim: a.dim,
            seed: 0,
            prototype_seed: seed::derive(seed, &["prototypes".into()]),
        },
        seed,
    };
    let cohort = slide::generate_cohort(&spec)?;
    fs::create_dir_all(a.out.join("bags"))?;
    let mut entries = Vec::with_capacity(cohort.len());
    let mut regions = Vec::with_capacity(cohort.len());
    for s in &cohort {
        let rel = format!("bags/{}.drasfeat", s.bag.slide_id);
        slide::cache_write(&s.bag, &a.out.join(&rel))?;
        entries.push(ManifestEntry {
            slide_id: s.bag.slide_id.clone(),
            patient_id: s.bag.patient_id.clone(),
            label: s.bag.label,
            path: rel,
        });
        regions.push(json!({"slide_id": s.bag.slide_id, "region": s.region}));
    }
    slide::write_manifest(&entries, &a.out.join("manifest.csv"))?;
    write_json(
        &a.out.join("synth.json"),
        &json!({"seed": seed, "cohort": spec, "regions": regions}),
    )?;
    eprintln!("wrote {} slides to {}", cohort.len(), a.out.display());
    Ok(())
}

fn patch(a: &PatchArgs, file: &FileConfig) -> Result<()> {
    let seed = resolve_seed(a.seed, file);
    let raster = slide::Raster::load(&a.image)?;
    let mask = slide::tissue_mask(&raster, a.patch_size, a.threshold)?;
    let (coords, patches) = slide::extract_grid(&raster, a.patch_size, &mask)?;
    if coords.is_empty() {
        return Err(Error::EmptyBag);
    }
    let encoder = slide::Encoder::new(a.encoder.into(), a.patch_size, a.dim, seed)?;
    let features = slide::encode_patches(&patches, &encoder)?;
    let bag = Bag::new(&a.slide_id, &a.patient_id, a.label, coords, features)?;
    slide::cache_write(&bag, &a.out)?;
    let mut meta_path = a.out.clone().into_os_string();
    meta_path.push(".json");
    write_json(
        Path::new(&meta_path),
        &json!({
            "seed": seed,
            "image": a.image,
            "patch_size": a.patch_size,
            "threshold": a.threshold,
            "encoder": EncoderKind::from(a.encoder),
            "dim": a.dim,
            "grid": [mask.columns, mask.rows],
            "patches": bag.len(),
        }),
    )?;
    eprintln!("{}: {} tissue patches", a.slide_id, bag.len());
    Ok(())
}

fn train_cmd(a: &TrainArgs, file: &FileConfig) -> Result<()> {
    use rayon::prelude::*;

    let seed = resolve_seed(a.seed, file);
    let config = train_config(&a.train, file, seed);
    config.validate()?;
    let bags = slide::load_manifest_bags(&a.manifest)?;
    let folds = eval::stratified_folds(&bags, a.folds, seed)?;
    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("folds.json"), &folds)?;

    let outcomes = (0..a.folds)
        .into_par_iter()
        .map(|round| {
            let split = folds.split(round);
            let pick = |idx: &[usize]| idx.iter().map(|&i| bags[i].clone()).collect::<Vec<_>>();
            let fold_config = TrainConfig {
                seed: seed::derive(seed, &["train-fold".into(), round.into()]),
                ..config.clone()
            };
            train::train(&pick(&split.train), &pick(&split.val), &fold_config)
                .map(|o| (fold_config, o))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut summary = Vec::new();
    for (round, (fold_config, outcome)) in outcomes.iter().enumerate() {
        let meta = json!({"seed": seed, "fold": round, "config": fold_config});
        save_checkpoint(&a.out.join(format!("fold_{round}.ckpt")), &outcome.params, &meta)?;
        train::write_log(&outcome.log, &a.out.join(format!("fold_{round}_log.csv")))?;
        summary.push(json!({
            "fold": round,
            "best_epoch": outcome.best_epoch,
            "best_val_loss": outcome.best_val_loss,
            "epochs_run": outcome.log.len(),
        }));
        eprintln!(
            "fold {round}: best epoch {} val loss {:.4}",
            outcome.best_epoch, outcome.best_val_loss
        );
    }
    write_json(
        &a.out.join("train.json"),
        &json!({"seed": seed, "config": config, "folds": summary}),
    )
}

fn load_folds(models: &Path) -> Result<FoldAssignment> {
    Ok(serde_json::from_str(&read_text(&models.join("folds.json"))?)?)
}

fn eval_cmd(a: &EvalArgs, file: &FileConfig) -> Result<()> {
    let seed = resolve_seed(a.seed, file);
    let sampling = sampling_config(&a.sampling, file);
    let method = method_for(a.method, &sampling);
    if let Method::Dras(c) = &method {
        c.validate()?;
    }
    let bags = slide::load_manifest_bags(&a.manifest)?;
    let mut table = PredictionTable::new(Vec::new())?;
    match (&a.models, &a.checkpoint) {
        (Some(models), None) => {
            let folds = load_folds(models)?;
            if folds.bag_fold.len() != bags.len() {
                return Err(Error::config("folds.json does not match the manifest"));
            }
            for round in 0..folds.n_folds {
                let (params, _) = load_checkpoint(&models.join(format!("fold_{round}.ckpt")))?;
                let test: Vec<Bag> = folds
                    .split(round)
                    .test
                    .iter()
                    .map(|&i| bags[i].clone())
                    .collect();
                table.extend(sampler::repeat_evaluate(
                    &params, &test, &method, a.repeats, seed,
                )?)?;
            }
        }
        (None, Some(ckpt)) => {
            let (params, _) = load_checkpoint(ckpt)?;
            table = sampler::repeat_evaluate(&params, &bags, &method, a.repeats, seed)?;
        }
        _ => return Err(Error::config("eval needs exactly one of --models or --checkpoint")),
    }
    fs::create_dir_all(&a.out)?;
    table.write_csv(&a.out.join("predictions.csv"))?;
    let metrics = MetricsReport::compute(&table.mean_scores(), &table.labels(), DEFAULT_THRESHOLD)?;
    let boot = eval::bootstrap(&table, a.epochs, seed::derive(seed, &["bootstrap".into()]))?;
    write_json(
        &a.out.join("report.json"),
        &json!({
            "seed": seed,
            "method": method,
            "repeats": a.repeats,
            "epochs": a.epochs,
            "slides": table.rows().len(),
            "metrics": metrics,
            "bootstrap": boot,
        }),
    )?;
    eprintln!(
        "{}: AUC {:.4} ± {:.4} over {} slides",
        method.name(),
        boot.auc.mean,
        boot.auc.std,
        table.rows().len()
    );
    Ok(())
}

fn bench_cmd(a: &BenchArgs, file: &FileConfig) -> Result<()> {
    let seed = resolve_seed(a.seed, file);
    let model = match &a.checkpoint {
        Some(p) => load_checkpoint(p)?.0,
        None => ModelParams::init(&ModelDims::standard(a.attention_dim, a.dim), seed)?,
    };
    let methods = a
        .methods
        .iter()
        .map(|m| m.parse())
        .collect::<Result<Vec<BenchMethod>>>()?;
    let config = BenchConfig {
        batch_sizes: a.batch_sizes.clone(),
        methods,
        repetitions: a.repetitions,
        encoder: a.encoder.into(),
        sampling: sampling_config(&a.sampling, file),
        seed,
    };
    let slides = (0..a.slides)
        .map(|i| {
            let spec = SynthSpec {
                width: a.width,
                height: a.height,
                seed: seed::derive(seed, &["bench-slide".into(), i.into()]),
                ..SynthSpec::default()
            };
            SyntheticRaster::new(&format!("bench_{i:03}"), (i % 2) as u8, &spec, a.patch_size)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = bench::run_bench(&model, &slides, &config)?;
    fs::create_dir_all(&a.out)?;
    bench::write_report(&report, &a.out.join("bench.csv"), &a.out.join("bench.txt"))?;
    write_json(
        &a.out.join("bench.json"),
        &json!({
            "seed": seed,
            "config": config,
            "slides": a.slides,
            "grid": [a.width, a.height],
            "patch_size": a.patch_size,
        }),
    )?;
    eprint!("{}", bench::render_table(&report));
    Ok(())
}

fn tune_cmd(a: &TuneArgs, file: &FileConfig) -> Result<()> {
    let seed = resolve_seed(a.seed, file);
    let space = match &a.space {
        Some(p) => ParamSpace::from_json(&read_text(p)?)?,
        None => match a.mode {
            TuneMode::Training => ParamSpace::training(),
            TuneMode::Sampling => ParamSpace::sampling(),
        },
    };
    let bags = slide::load_manifest_bags(&a.manifest)?;
    let folds = match (&a.models, a.mode) {
        (Some(m), _) => load_folds(m)?,
        (None, TuneMode::Training) => eval::stratified_folds(&bags, a.folds, seed)?,
        (None, TuneMode::Sampling) => {
            return Err(Error::config("sampling mode needs --models"));
        }
    };
    let split = folds.split(0);
    let pick = |idx: &[usize]| idx.iter().map(|&i| bags[i].clone()).collect::<Vec<_>>();
    let (train_bags, val_bags) = (pick(&split.train), pick(&split.val));

    let outcome = match a.mode {
        TuneMode::Training => {
            let base = train_config(&a.train, file, seed);
            tune::random_search(
                &space,
                |c, s| {
                    let cfg = TrainConfig {
                        seed: s,
                        ..tune::apply_training(c, &base)
                    };
                    train::train(&train_bags, &val_bags, &cfg).map(|o| o.best_val_loss)
                },
                a.trials.unwrap_or(500),
                a.repeats.unwrap_or(1),
                seed,
                Goal::Minimize,
            )?
        }
        TuneMode::Sampling => {
            let models = a.models.as_ref().expect("checked above");
            let (params, _) = load_checkpoint(&models.join("fold_0.ckpt"))?;
            let base = sampling_config(&a.sampling, file);
            let labels: Vec<u8> = val_bags.iter().map(|b| b.label).collect();
            tune::random_search(
                &space,
                |c, s| {
                    let cfg = tune::apply_sampling(c, &base);
                    let scores = val_bags
                        .iter()
                        .map(|b| {
                            let seed = sampler::repeat_seed(s, &b.slide_id, 0);
                            sampler::evaluate(
                                &params,
                                &mut CachedFeatures(b),
                                &Method::Dras(cfg.clone()),
                                seed,
                            )
                            .map(|r| r.positive_probability())
                        })
                        .collect::<Result<Vec<f64>>>()?;
                    eval::auc(&scores, &labels)
                },
                a.trials.unwrap_or(200),
                a.repeats.unwrap_or(30),
                seed,
                Goal::Maximize,
            )?
        }
    };
    fs::create_dir_all(&a.out)?;
    tune::write_log(&space, &outcome.log, &a.out.join("tune_log.csv"))?;
    write_json(
        &a.out.join("best.json"),
        &json!({
            "seed": seed,
            "mode": format!("{:?}", a.mode).to_lowercase(),
            "space": space,
            "best": outcome.best,
        }),
    )?;
    eprintln!(
        "best trial {} objective {:?}",
        outcome.best.trial, outcome.best.objective
    );
    Ok(())
}

fn heatmap(a: &HeatmapArgs, file: &FileConfig) -> Result<()> {
    let seed = resolve_seed(a.seed, file);
    let bag = slide::cache_read(&a.bag)?;
    let (params, _) = load_checkpoint(&a.checkpoint)?;
    let sampling = sampling_config(&a.sampling, file);
    let method = method_for(a.method, &sampling);
    let run_seed = sampler::repeat_seed(seed, &bag.slide_id, 0);
    let result = sampler::evaluate(&params, &mut CachedFeatures(&bag), &method, run_seed)?;
    fs::create_dir_all(&a.out)?;
    export::write_trace(&result.trace, &a.out.join("trace.csv"))?;
    let attention = result.attention_map(bag.len());
    export::write_pgm(&bag.coords, &attention, &a.out.join("attention.pgm"))?;
    export::write_map_csv(&bag.coords, &attention, &a.out.join("attention.csv"))?;
    if matches!(method, Method::Dras(_)) {
        export::write_pgm(&bag.coords, &result.weights, &a.out.join("weights.pgm"))?;
        export::write_map_csv(&bag.coords, &result.weights, &a.out.join("weights.csv"))?;
    }
    write_json(
        &a.out.join("heatmap.json"),
        &json!({
            "seed": seed,
            "slide_id": bag.slide_id,
            "method": method,
            "probability": result.positive_probability(),
            "patches_encoded": result.patches_encoded,
            "forward_passes": result.forward_passes,
        }),
    )
}
