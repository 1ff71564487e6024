//! Command-line orchestration of the full workflow: synthesize data,
//! pretrain, align, evaluate, cross-validate, visualize, benchmark.
//!
//! Config precedence: built-in defaults < JSON config file < flags.
//! All artifacts land under `--out` in `checkpoints/`, `logs/`,
//! `reports/`, `viz/`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::datamodel::{load_manifest, make_folds, AugmentPolicy, Dataset, FoldPlan};
use crate::error::{Error, Result};
use crate::eval::{
    accuracy, cross_validate, export_feature_heatmap, export_heatmap_grid, predict,
    render_feature_heatmap, timing_benchmark, PipelineConfig, Report,
};
use crate::losses::TripletConfig;
use crate::nets::{
    extractor_forward, load_checkpoint, save_checkpoint, ExtractorConfig,
    FeatureSource,
};
use crate::synthgen::{generate_dataset, SynthConfig};
use crate::trainer::{
    metrics_to_csv, pretrain, train_alignment, LossWeights, Modality, OptimizerConfig,
};

/// Defaults for every knob; a JSON config file mirrors this structure.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: PathBuf,
    pub manifest: Option<PathBuf>,
    pub extractor: String,
    pub optimizer: OptimizerConfig,
    pub synth: SynthConfig,
    pub augment: AugmentPolicy,
    pub triplet: TripletConfig,
    pub weights: LossWeights,
    pub k: usize,
    pub fold: usize,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out: PathBuf::from("out"),
            manifest: None,
            extractor: "tiny".into(),
            optimizer: OptimizerConfig {
                epochs: 25,
                ..OptimizerConfig::default()
            },
            synth: SynthConfig::default(),
            augment: AugmentPolicy::default(),
            triplet: TripletConfig::default(),
            weights: LossWeights::default(),
            k: 5,
            fold: 0,
            seed: 0,
            jobs: 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "cpc-align",
    about = "Teacher-student domain alignment for paired two-modality image classification",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// JSON config file mirroring RunConfig; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for all artifacts.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset manifest (JSON Lines).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Extractor config name: "tiny" or "resnet50-like".
    #[arg(long)]
    pub extractor: Option<String>,
    /// Number of cross-validation folds.
    #[arg(long)]
    pub k: Option<usize>,
    /// Fold index used as the validation split.
    #[arg(long)]
    pub fold: Option<usize>,
    /// Master seed for folds and training.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Batch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    pub learning_rate: Option<f32>,
    /// Loss weights "w_c,w_a,w_t" (e.g. "1,1,1"; "1,0,1" ablates DA).
    #[arg(long)]
    pub weights: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic paired-modality dataset plus manifest.
    Synth {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        n_pairs: Option<usize>,
        #[arg(long)]
        image_side: Option<usize>,
        #[arg(long)]
        gap_noise_sigma: Option<f64>,
        #[arg(long)]
        gap_blur_radius: Option<usize>,
        #[arg(long)]
        gap_contrast: Option<f64>,
        #[arg(long)]
        gap_color_jitter: Option<f64>,
        #[arg(long)]
        gap_artifact_max: Option<usize>,
        #[arg(long)]
        class_prior: Option<f64>,
    },
    /// Pretrain the teacher extractor + F2 on the strong modality.
    PretrainTeacher {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Pretrain the unaligned extractor on the weak modality.
    PretrainUnaligned {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Alignment phase: alternating discriminator / student updates.
    Align {
        #[command(flatten)]
        common: CommonArgs,
        /// Teacher pretrain checkpoint.
        #[arg(long)]
        teacher: PathBuf,
        /// Unaligned pretrain checkpoint.
        #[arg(long)]
        unaligned: PathBuf,
    },
    /// Evaluate a checkpoint's weak-modality accuracy on its fold.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Full k-fold cross-validation into a table-shaped report.
    Cv {
        #[command(flatten)]
        common: CommonArgs,
        /// Worker threads for fold fan-out (1 = deterministic order).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Export feature heatmaps (weak / unaligned / aligned / teacher).
    Viz {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// Number of validation samples to render.
        #[arg(long, default_value_t = 6)]
        n_samples: usize,
    },
    /// Per-image inference latency of a checkpoint.
    Bench {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 50)]
        n_images: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
    },
}

fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<RunConfig>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(v) = &common.out {
        cfg.out = v.clone();
    }
    if let Some(v) = &common.manifest {
        cfg.manifest = Some(v.clone());
    }
    if let Some(v) = &common.extractor {
        cfg.extractor = v.clone();
    }
    if let Some(v) = common.k {
        cfg.k = v;
    }
    if let Some(v) = common.fold {
        cfg.fold = v;
    }
    if let Some(v) = common.seed {
        cfg.seed = v;
        cfg.optimizer.seed = v;
        cfg.synth.seed = v;
    }
    if let Some(v) = common.epochs {
        cfg.optimizer.epochs = v;
    }
    if let Some(v) = common.batch_size {
        cfg.optimizer.batch_size = v;
    }
    if let Some(v) = common.learning_rate {
        cfg.optimizer.learning_rate = v;
    }
    if let Some(spec) = &common.weights {
        let parts: Vec<&str> = spec.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!(
                "--weights expects \"w_c,w_a,w_t\", got {spec:?}"
            )));
        }
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("bad weight {s:?}: {e}")))
        };
        cfg.weights = LossWeights {
            w_c: parse(parts[0])?,
            w_a: parse(parts[1])?,
            w_t: parse(parts[2])?,
        };
    }
    Ok(cfg)
}

fn ensure_dirs(out: &Path) -> Result<()> {
    for sub in ["checkpoints", "logs", "reports", "viz"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    Ok(())
}

struct LoadedData {
    dataset: Dataset,
    plan: FoldPlan,
    extractor: ExtractorConfig,
}

fn load_data(cfg: &RunConfig) -> Result<LoadedData> {
    let manifest_path = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Config("--manifest is required".into()))?;
    let manifest = load_manifest(manifest_path)?;
    let extractor = ExtractorConfig::by_name(&cfg.extractor)?;
    let dataset = Dataset::from_manifest(&manifest, extractor.in_side)?;
    let plan = make_folds(&manifest, cfg.k, cfg.seed)?;
    Ok(LoadedData {
        dataset,
        plan,
        extractor,
    })
}

fn save_fold_plan(plan: &FoldPlan, out: &Path) -> Result<()> {
    let path = out.join("fold_plan.json");
    let json = serde_json::to_string_pretty(plan).expect("plan serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

fn run_pretrain(common: &CommonArgs, modality: Modality) -> Result<()> {
    let cfg = load_config(common)?;
    ensure_dirs(&cfg.out)?;
    let data = load_data(&cfg)?;
    save_fold_plan(&data.plan, &cfg.out)?;
    let result = pretrain(
        modality,
        &data.dataset,
        &data.plan,
        cfg.fold,
        data.extractor,
        &cfg.optimizer,
        &cfg.augment,
    )?;
    let tag = match modality {
        Modality::Strong => "teacher",
        Modality::Weak => "unaligned",
    };
    let ckpt_path = cfg.out.join(format!("checkpoints/{tag}_fold{}.ckpt", cfg.fold));
    save_checkpoint(&result.checkpoint, &ckpt_path)?;
    let mut log = String::from("epoch,train_loss,val_acc\n");
    for row in &result.history {
        log.push_str(&format!(
            "{},{:.6},{:.6}\n",
            row.epoch, row.train_loss, row.val_acc
        ));
    }
    let log_path = cfg.out.join(format!("logs/pretrain_{tag}_fold{}.csv", cfg.fold));
    fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))?;
    println!(
        "pretrained {tag} on fold {}: best val acc {:.4} -> {}",
        cfg.fold,
        result.best_val_acc,
        ckpt_path.display()
    );
    Ok(())
}

fn val_split<'a>(data: &'a LoadedData, fold: usize) -> (Vec<usize>, Vec<u8>) {
    let idx: Vec<usize> = (0..data.dataset.len())
        .filter(|i| data.plan.assignments.get(data.dataset.ids[*i].as_str()) == Some(&fold))
        .collect();
    let labels = idx.iter().map(|i| data.dataset.labels[*i]).collect();
    (idx, labels)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            common,
            n_pairs,
            image_side,
            gap_noise_sigma,
            gap_blur_radius,
            gap_contrast,
            gap_color_jitter,
            gap_artifact_max,
            class_prior,
        } => {
            let cfg = load_config(&common)?;
            let mut synth = cfg.synth;
            synth.seed = cfg.seed;
            if let Some(v) = n_pairs {
                synth.n_pairs = v;
            }
            if let Some(v) = image_side {
                synth.image_side = v;
            }
            if let Some(v) = gap_noise_sigma {
                synth.gap_noise_sigma = v;
            }
            if let Some(v) = gap_blur_radius {
                synth.gap_blur_radius = v;
            }
            if let Some(v) = gap_contrast {
                synth.gap_contrast = v;
            }
            if let Some(v) = gap_color_jitter {
                synth.gap_color_jitter = v;
            }
            if let Some(v) = gap_artifact_max {
                synth.gap_artifact_max = v;
            }
            if let Some(v) = class_prior {
                synth.class_prior = v;
            }
            let manifest = generate_dataset(&synth, &cfg.out)?;
            println!(
                "wrote {} pairs to {} (manifest.jsonl)",
                manifest.records.len(),
                cfg.out.display()
            );
            Ok(())
        }
        Command::PretrainTeacher { common } => run_pretrain(&common, Modality::Strong),
        Command::PretrainUnaligned { common } => run_pretrain(&common, Modality::Weak),
        Command::Align {
            common,
            teacher,
            unaligned,
        } => {
            let cfg = load_config(&common)?;
            ensure_dirs(&cfg.out)?;
            let data = load_data(&cfg)?;
            save_fold_plan(&data.plan, &cfg.out)?;
            let teacher_ckpt = load_checkpoint(&teacher)?;
            let unaligned_ckpt = load_checkpoint(&unaligned)?;
            let result = train_alignment(
                &data.dataset,
                &data.plan,
                cfg.fold,
                &teacher_ckpt,
                &unaligned_ckpt,
                &cfg.optimizer,
                cfg.weights,
                cfg.triplet,
                &cfg.augment,
            )?;
            let ckpt_path = cfg
                .out
                .join(format!("checkpoints/aligned_fold{}.ckpt", cfg.fold));
            save_checkpoint(&result.checkpoint, &ckpt_path)?;
            let log_path = cfg.out.join(format!("logs/align_fold{}.csv", cfg.fold));
            fs::write(&log_path, metrics_to_csv(&result.metrics))
                .map_err(|e| Error::io(&log_path, e))?;
            println!(
                "aligned student on fold {} [{}]: best val acc {:.4} -> {}",
                cfg.fold,
                cfg.weights.method_label(),
                result.best_val_acc,
                ckpt_path.display()
            );
            Ok(())
        }
        Command::Eval { common, ckpt } => {
            let cfg = load_config(&common)?;
            ensure_dirs(&cfg.out)?;
            let data = load_data(&cfg)?;
            let checkpoint = load_checkpoint(&ckpt)?;
            let (val_idx, labels) = val_split(&data, cfg.fold);
            if val_idx.is_empty() {
                return Err(Error::Config(format!("fold {} has no validation records", cfg.fold)));
            }
            let images: Vec<_> = val_idx.iter().map(|i| data.dataset.wl[*i].clone()).collect();
            let preds: Vec<u8> = predict(&checkpoint, &images)?
                .into_iter()
                .map(|(p, _)| p)
                .collect();
            let mut result = accuracy(&preds, &labels)?;
            result.fold = cfg.fold;
            let json = serde_json::to_string_pretty(&result).expect("serializes");
            let path = cfg.out.join(format!("reports/eval_fold{}.json", cfg.fold));
            fs::write(&path, &json).map_err(|e| Error::io(&path, e))?;
            println!("fold {} accuracy {:.4} ({} samples)", cfg.fold, result.accuracy, result.n_valid);
            Ok(())
        }
        Command::Cv { common, jobs } => {
            let cfg = load_config(&common)?;
            ensure_dirs(&cfg.out)?;
            let data = load_data(&cfg)?;
            save_fold_plan(&data.plan, &cfg.out)?;
            let pipeline = PipelineConfig {
                extractor: data.extractor,
                pretrain_opt: cfg.optimizer,
                align_opt: cfg.optimizer,
                weights: cfg.weights,
                triplet: cfg.triplet,
                augment: cfg.augment.clone(),
            };
            let jobs = jobs.unwrap_or(cfg.jobs);
            let report = cross_validate(&data.dataset, &data.plan, &pipeline, jobs)?;
            let json_path = cfg.out.join("reports/report.json");
            fs::write(
                &json_path,
                serde_json::to_string_pretty(&report).expect("serializes"),
            )
            .map_err(|e| Error::io(&json_path, e))?;
            let table = Report::render_table(std::slice::from_ref(&report));
            let txt_path = cfg.out.join("reports/report.txt");
            fs::write(&txt_path, &table).map_err(|e| Error::io(&txt_path, e))?;
            print!("{table}");
            Ok(())
        }
        Command::Viz {
            common,
            ckpt,
            n_samples,
        } => {
            let cfg = load_config(&common)?;
            ensure_dirs(&cfg.out)?;
            let data = load_data(&cfg)?;
            let checkpoint = load_checkpoint(&ckpt)?;
            let student = checkpoint.extractor("student", 0)?;
            let teacher = checkpoint.extractor("teacher", 0)?;
            let unaligned = checkpoint.extractor("unaligned", 0)?;
            let wl_norm = checkpoint
                .wl_norm
                .ok_or_else(|| Error::Compatibility("missing wl norm stats".into()))?;
            let nbi_norm = checkpoint
                .nbi_norm
                .ok_or_else(|| Error::Compatibility("missing nbi norm stats".into()))?;
            let (val_idx, _) = val_split(&data, cfg.fold);
            let picks: Vec<usize> = val_idx.into_iter().take(n_samples).collect();
            if picks.is_empty() {
                return Err(Error::Config("no validation samples to visualize".into()));
            }
            let mut rows: Vec<Vec<_>> = vec![Vec::new(); 4];
            for i in &picks {
                let wl = &data.dataset.wl[*i];
                let nbi = &data.dataset.nbi[*i];
                let wl_n = crate::datamodel::normalize(wl, &wl_norm);
                let nbi_n = crate::datamodel::normalize(nbi, &nbi_norm);
                let feat_n = extractor_forward(&unaligned, &wl_n, FeatureSource::Negative)?;
                let feat_a = extractor_forward(&student, &wl_n, FeatureSource::Aligned)?;
                let feat_p = extractor_forward(&teacher, &nbi_n, FeatureSource::Positive)?;
                rows[0].push(wl.clone());
                rows[1].push(render_feature_heatmap(&feat_n, wl));
                rows[2].push(render_feature_heatmap(&feat_a, wl));
                rows[3].push(render_feature_heatmap(&feat_p, nbi));
                let path = cfg
                    .out
                    .join(format!("viz/heatmap_aligned_{}.png", data.dataset.ids[*i]));
                export_feature_heatmap(&feat_a, wl, &path)?;
            }
            let grid_path = cfg.out.join("viz/feature_grid.png");
            export_heatmap_grid(&rows, &grid_path)?;
            println!(
                "wrote {} heatmaps and {} (rows: weak image, unaligned, aligned, teacher)",
                picks.len(),
                grid_path.display()
            );
            Ok(())
        }
        Command::Bench {
            common,
            ckpt,
            n_images,
            warmup,
        } => {
            let cfg = load_config(&common)?;
            ensure_dirs(&cfg.out)?;
            let checkpoint = load_checkpoint(&ckpt)?;
            let (mean, median) = timing_benchmark(&checkpoint, n_images, warmup)?;
            println!(
                "inference latency over {n_images} images: mean {mean:.2} ms, median {median:.2} ms (batch size 1)"
            );
            Ok(())
        }
    }
    .map(|_: ()| ())
}

/// Fold plan serialization sanity used by the CLI tests.
pub fn fold_plan_to_json(plan: &FoldPlan) -> String {
    serde_json::to_string_pretty(plan).expect("plan serializes")
}
