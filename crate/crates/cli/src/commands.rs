use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use ivif_rlhf::annotation::{annotation_discrepancy, denormalize_scores, SCORE_KEYS};
use ivif_rlhf::checkpoint::Checkpoint;
use ivif_rlhf::data_pipeline::{
    assemble_manifest, clean_pairs, load_pair_dir, ClusterFile, DownsampleEmbedder, ImagePair, ImageTriplet,
    Manifest, Split, SplitFractions,
};
use ivif_rlhf::fusion_policy::{pretrain_supervised, FusionPolicy};
use ivif_rlhf::grpo::{finetune_grpo, SegmenterKind};
use ivif_rlhf::image::Image;
use ivif_rlhf::metrics::{cc, psnr, qabf, ssim, MetricReport, MetricRow, Plane};
use ivif_rlhf::overlay::render_overlay;
use ivif_rlhf::reward_model::{build_reward_samples, load_annotation_dir, train_reward, RewardModel};
use ivif_rlhf::synthetic::{write_dataset, METHODS};
use serde_json::json;

use crate::config::RunConfig;
use crate::service::{self, Store};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "ivif-rlhf", version, about = "Human-feedback fine-tuning for infrared-visible image fusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options every subcommand accepts.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn keeps(self, split: Split) -> bool {
        match self {
            SplitArg::All => true,
            SplitArg::Train => split == Split::Train,
            SplitArg::Val => split == Split::Val,
            SplitArg::Test => split == Split::Test,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cluster near-duplicate pairs and pick one representative per cluster.
    Dedup {
        /// Directory with `visible/` and `infrared/` PNGs matched by stem.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        /// Cluster file to write.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Match representatives with fused outputs and assign splits.
    BuildManifest {
        #[arg(long)]
        clusters: PathBuf,
        /// `method=DIR` entries, comma separated or repeated.
        #[arg(long, value_delimiter = ',')]
        fused_dirs: Vec<String>,
        /// Train, val and test fractions, e.g. `0.786,0.107,0.107`.
        #[arg(long)]
        splits: Option<SplitFractions>,
        #[arg(long)]
        out: PathBuf,
        /// Skip report; defaults to `<out>.skipped.json`.
        #[arg(long)]
        skip_report: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the fusion policy on the proxy loss.
    PretrainFusion {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
        /// History CSV; defaults to `<out>.history.csv`.
        #[arg(long)]
        history: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the reward model on annotated triplets.
    TrainReward {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory of `<triplet_id>.json` annotation documents.
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Predict scores and heatmaps for every triplet.
    EvalReward {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Where heatmap and overlay PNGs go; defaults to the report's directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Annotations to compare predictions against.
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune a policy against a reward model with region-level GRPO.
    FinetuneGrpo {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        reward: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// Overrides `grpo.segmenter`.
        #[arg(long)]
        segmenter: Option<SegmenterKind>,
        /// Overrides `grpo.regions`.
        #[arg(long)]
        regions: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
        /// Writes the policy's output for the first pair after every epoch.
        #[arg(long)]
        dump_dir: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Fuse one pair with a policy checkpoint.
    Fuse {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        visible: PathBuf,
        #[arg(long)]
        infrared: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Reference metrics (CC, PSNR, Qabf, SSIM) for every triplet.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Score this policy's outputs instead of the manifest's fused images.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        #[command(flatten)]
        common: Common,
    },
    /// Run the annotation service.
    Serve {
        #[arg(long)]
        manifest: PathBuf,
        /// Overrides `service.store_dir`.
        #[arg(long)]
        store: Option<PathBuf>,
        /// Overrides `service.addr`.
        #[arg(long)]
        addr: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Draw predicted artifact regions over each fused image.
    ExportOverlays {
        #[arg(long)]
        reward: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write a seeded synthetic dataset (pairs, fused outputs, annotations).
    Synthesize {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        pairs: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[command(flatten)]
        common: Common,
    },
}

fn config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn parent_dir(path: &Path) -> Result<(), CliError> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(parent) => mkdir(parent),
        None => Ok(()),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    parent_dir(path)?;
    std::fs::write(path, bytes).map_err(|e| ivif_rlhf::Error::io(path, e).into())
}

fn mkdir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| ivif_rlhf::Error::io(path, e).into())
}

/// Paths recorded in cluster files and manifests are absolute so they
/// resolve from any working directory.
fn absolute(path: &Path) -> Result<PathBuf, CliError> {
    std::path::absolute(path).map_err(|e| ivif_rlhf::Error::io(path, e).into())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_triplets(manifest: &Path, split: SplitArg) -> Result<Vec<ImageTriplet>, CliError> {
    let manifest = Manifest::load(manifest)?;
    let triplets: Vec<ImageTriplet> = manifest
        .entries
        .iter()
        .filter(|e| split.keeps(e.split))
        .map(|e| e.load())
        .collect::<Result<_, _>>()?;
    if triplets.is_empty() {
        return Err(CliError::Validation(format!("manifest has no triplets in split {split:?}")));
    }
    Ok(triplets)
}

/// Distinct source pairs of `triplets`, sorted by id.
fn pairs_of(triplets: &[ImageTriplet]) -> Result<Vec<ImagePair>, CliError> {
    let mut seen = BTreeMap::new();
    for t in triplets {
        if !seen.contains_key(&t.pair_id) {
            let pair = ImagePair::new(t.pair_id.clone(), t.visible.clone(), t.infrared.clone(), "manifest", 0)?;
            seen.insert(t.pair_id.clone(), pair);
        }
    }
    Ok(seen.into_values().collect())
}

fn load_policy(path: &Path) -> Result<FusionPolicy, CliError> {
    Ok(FusionPolicy::from_checkpoint(&Checkpoint::load(path)?)?)
}

fn load_reward(path: &Path) -> Result<RewardModel, CliError> {
    Ok(RewardModel::from_checkpoint(&Checkpoint::load(path)?)?)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Dedup {
            input,
            threshold,
            out,
            common,
        } => {
            let cfg = config(&common)?;
            let threshold = threshold.unwrap_or(cfg.data.dedup_threshold);
            let pairs = load_pair_dir(absolute(&input)?)?;
            let embedder = DownsampleEmbedder {
                side: cfg.data.embed_side,
            };
            let clusters = clean_pairs(&pairs, &embedder, threshold)?;
            log::info!("{} pairs -> {} clusters", pairs.len(), clusters.len());
            let file = ClusterFile {
                threshold,
                clusters,
                pairs: pairs.iter().filter_map(ImagePair::source).collect(),
                excluded: cfg.data.exclusions.clone(),
            };
            write(&out, serde_json::to_string_pretty(&file).map_err(ivif_rlhf::Error::from)?)
        }
        Command::BuildManifest {
            clusters,
            fused_dirs,
            splits,
            out,
            skip_report,
            common,
        } => {
            let cfg = config(&common)?;
            let text = std::fs::read_to_string(&clusters).map_err(|e| ivif_rlhf::Error::io(&clusters, e))?;
            let file: ClusterFile = serde_json::from_str(&text).map_err(ivif_rlhf::Error::from)?;
            let mut dirs = cfg.data.fused_dirs.clone();
            for spec in &fused_dirs {
                let (method, dir) = spec
                    .split_once('=')
                    .ok_or_else(|| CliError::Validation(format!("--fused-dirs entry `{spec}` is not METHOD=DIR")))?;
                dirs.insert(method.to_string(), absolute(Path::new(dir))?);
            }
            if dirs.is_empty() {
                return Err(CliError::Validation("no fused directories (--fused-dirs or data.fused_dirs)".into()));
            }
            let [tr, va, te] = cfg.data.splits;
            let fractions = match splits {
                Some(s) => s,
                None => SplitFractions::new(tr, va, te)?,
            };
            let mut exclusions: BTreeSet<String> = cfg.data.exclusions.iter().cloned().collect();
            exclusions.extend(file.excluded.iter().cloned());
            let report = assemble_manifest(&file.retained(), &dirs, fractions, cfg.seed, &exclusions)?;
            parent_dir(&out)?;
            report.manifest.save(&out)?;
            let skip_path = skip_report.unwrap_or_else(|| sibling(&out, ".skipped.json"));
            write(&skip_path, serde_json::to_string_pretty(&report.skipped).map_err(ivif_rlhf::Error::from)?)?;
            log::info!(
                "{} triplets, {} skipped",
                report.manifest.entries.len(),
                report.skipped.len()
            );
            Ok(())
        }
        Command::PretrainFusion {
            manifest,
            split,
            out,
            history,
            common,
        } => {
            let cfg = config(&common)?;
            let pairs = pairs_of(&load_triplets(&manifest, split)?)?;
            let policy = FusionPolicy::new(cfg.policy.model.clone(), cfg.seed)?;
            let hist = pretrain_supervised(&policy, &pairs, &cfg.policy.pretrain, cfg.seed)?;
            parent_dir(&out)?;
            policy.to_checkpoint()?.save(&out)?;
            write(&history.unwrap_or_else(|| sibling(&out, ".history.csv")), hist.to_csv())
        }
        Command::TrainReward {
            manifest,
            annotations,
            split,
            out,
            history,
            common,
        } => {
            let cfg = config(&common)?;
            let triplets = load_triplets(&manifest, split)?;
            let records = load_annotation_dir(&annotations, &triplets)?;
            let samples = build_reward_samples(&cfg.reward.model, &triplets, &records, cfg.reward.train.heatmap_style)?;
            let (model, hist) = train_reward(&cfg.reward.model, &cfg.reward.train, &samples, cfg.seed)?;
            parent_dir(&out)?;
            model.to_checkpoint()?.save(&out)?;
            write(&history.unwrap_or_else(|| sibling(&out, ".history.csv")), hist.to_csv())
        }
        Command::EvalReward {
            ckpt,
            manifest,
            report,
            out_dir,
            annotations,
            split,
            common,
        } => {
            config(&common)?;
            let model = load_reward(&ckpt)?;
            let triplets = load_triplets(&manifest, split)?;
            let out_dir = out_dir.unwrap_or_else(|| report.parent().unwrap_or(Path::new(".")).to_path_buf());
            mkdir(&out_dir.join("heatmaps"))?;
            mkdir(&out_dir.join("overlays"))?;
            let records = match &annotations {
                Some(dir) => load_annotation_dir(dir, &triplets)?,
                None => BTreeMap::new(),
            };
            let mut rows = Vec::new();
            for t in &triplets {
                let pred = model.predict(&t.visible, &t.infrared, &t.fused)?;
                let heat_path = out_dir.join("heatmaps").join(format!("{}.png", t.triplet_id));
                let overlay_path = out_dir.join("overlays").join(format!("{}.png", t.triplet_id));
                pred.heatmap.save_png(&heat_path)?;
                let (overlay, circles) = render_overlay(&t.fused, &pred.heatmap)?;
                overlay.save_png(&overlay_path)?;
                let scores: serde_json::Map<String, serde_json::Value> = SCORE_KEYS
                    .iter()
                    .zip(denormalize_scores(&pred.scores))
                    .map(|(k, v)| (k.to_string(), json!(v)))
                    .collect();
                let discrepancy = match records.get(&t.triplet_id) {
                    Some(reference) => {
                        let mut predicted = reference.clone();
                        predicted.scores = ivif_rlhf::annotation::ScoreVector::from_array(denormalize_scores(&pred.scores))
                            .map_err(ivif_rlhf::Error::from)?;
                        predicted.shapes = circles
                            .iter()
                            .map(|c| ivif_rlhf::annotation::CircleAnnotation::new((c.cx, c.cy), (c.cx + c.r, c.cy)))
                            .collect();
                        let d = annotation_discrepancy(reference, &predicted, t.fused.dims())
                            .map_err(ivif_rlhf::Error::from)?;
                        json!({ "score_err": d.score_err, "heatmap_err": d.heatmap_err })
                    }
                    None => serde_json::Value::Null,
                };
                rows.push(json!({
                    "triplet_id": t.triplet_id,
                    "scores": scores,
                    "normalized_scores": pred.scores,
                    "heatmap": heat_path,
                    "overlay": overlay_path,
                    "circles": circles,
                    "discrepancy": discrepancy,
                }));
            }
            write(
                &report,
                serde_json::to_string_pretty(&json!({ "triplets": rows })).map_err(ivif_rlhf::Error::from)?,
            )
        }
        Command::FinetuneGrpo {
            policy,
            reward,
            manifest,
            split,
            segmenter,
            regions,
            out,
            history,
            dump_dir,
            common,
        } => {
            let mut cfg = config(&common)?;
            if let Some(s) = segmenter {
                cfg.grpo.segmenter = s;
            }
            if let Some(k) = regions {
                cfg.grpo.regions = k;
            }
            let policy = load_policy(&policy)?;
            let reward = load_reward(&reward)?;
            let pairs = pairs_of(&load_triplets(&manifest, split)?)?;
            let seg = cfg.grpo.segmenter.build();
            if let Some(dir) = &dump_dir {
                mkdir(dir)?;
            }
            let first = pairs[0].clone();
            let mut dump = |epoch: usize, p: &FusionPolicy| -> ivif_rlhf::Result<()> {
                if let Some(dir) = &dump_dir {
                    p.fuse(&first.visible, &first.infrared)?
                        .save_png(dir.join(format!("epoch{epoch:03}_{}.png", first.pair_id)))?;
                }
                Ok(())
            };
            let hist = finetune_grpo(&policy, &reward, &pairs, &cfg.grpo, seg.as_ref(), cfg.seed, Some(&mut dump))?;
            parent_dir(&out)?;
            policy.to_checkpoint()?.save(&out)?;
            write(&history.unwrap_or_else(|| sibling(&out, ".history.csv")), hist.to_csv())
        }
        Command::Fuse {
            ckpt,
            visible,
            infrared,
            out,
            common,
        } => {
            config(&common)?;
            let policy = load_policy(&ckpt)?;
            let v = Image::load_png(&visible)?;
            let i = Image::load_png(&infrared)?;
            if !v.same_dims(&i) {
                return Err(CliError::Validation(format!(
                    "visible is {:?} but infrared is {:?}",
                    v.dims(),
                    i.dims()
                )));
            }
            parent_dir(&out)?;
            Ok(policy.fuse(&v, &i)?.save_png(&out)?)
        }
        Command::Evaluate {
            manifest,
            report,
            policy,
            split,
            common,
        } => {
            let cfg = config(&common)?;
            let policy = policy.as_deref().map(load_policy).transpose()?;
            let m = &cfg.metrics;
            let mut rows = Vec::new();
            let mut seen = std::collections::BTreeSet::new();
            for t in load_triplets(&manifest, split)? {
                // A policy output depends only on the pair, so it gets one row per pair.
                let (id, fused) = match &policy {
                    Some(p) if seen.insert(t.pair_id.clone()) => (t.pair_id.clone(), p.fuse(&t.visible, &t.infrared)?),
                    Some(_) => continue,
                    None => (t.triplet_id.clone(), t.fused.clone()),
                };
                let f = Plane::from_image(&fused, m.peak);
                let v = Plane::from_image(&t.visible, m.peak);
                let i = Plane::from_image(&t.infrared, m.peak);
                rows.push(MetricRow {
                    triplet_id: id,
                    cc: cc(&f, &v, &i)?,
                    psnr: psnr(&f, &v, &i, m.peak, m.psnr_cap)?,
                    qabf: qabf(&f, &v, &i)?,
                    ssim: ssim(&f, &v, &i, m.peak)?,
                });
            }
            write(&report, MetricReport { rows }.to_csv())
        }
        Command::Serve {
            manifest,
            store,
            addr,
            common,
        } => {
            let cfg = config(&common)?;
            let manifest = Manifest::load(&manifest)?;
            let store_dir = store.unwrap_or(cfg.service.store_dir.clone());
            let addr = addr.unwrap_or(cfg.service.addr.clone());
            let store = Store::open(&store_dir, &manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(&addr)
                    .await
                    .map_err(|e| CliError::Runtime(format!("bind {addr}: {e}")))?;
                log::info!("serving {} tasks on http://{addr}", manifest.entries.len());
                service::serve(listener, Arc::new(store))
                    .await
                    .map_err(|e| CliError::Runtime(e.to_string()))
            })
        }
        Command::ExportOverlays {
            reward,
            manifest,
            out,
            common,
        } => {
            config(&common)?;
            let model = load_reward(&reward)?;
            mkdir(&out)?;
            for t in load_triplets(&manifest, SplitArg::All)? {
                let pred = model.predict(&t.visible, &t.infrared, &t.fused)?;
                let (overlay, _) = render_overlay(&t.fused, &pred.heatmap)?;
                overlay.save_png(out.join(format!("{}.png", t.triplet_id)))?;
            }
            Ok(())
        }
        Command::Synthesize {
            out,
            pairs,
            size,
            common,
        } => {
            let cfg = config(&common)?;
            if pairs == 0 || size < 4 {
                return Err(CliError::Validation("need at least one pair of at least 4x4 pixels".into()));
            }
            write_dataset(&out, pairs, size, &METHODS, cfg.seed)?;
            Ok(())
        }
    }
}
