use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use maskdiff::checkpoint;
use maskdiff::io;
use maskdiff::manifest::{self, AnnotationMode, DatasetManifest};
use maskdiff::pipeline::{self, DiffusionPreset, GateCounts};
use maskdiff::review::{self, ReviewStore, Submission};
use maskdiff::sweep::{self, LoadedData, SweepSpec};
use maskdiff_core::augment::{AugmentPolicy, PolicyKind};
use maskdiff_core::dataset::Split;
use maskdiff_core::diffusion::{
    train_per_trimester, AdapterRouter, DiffusionTrainConfig, SamplerConfig, TrainMode,
};
use maskdiff_core::extraction::{extract, QualityGate};
use maskdiff_core::harness::AugmentConfig;
use maskdiff_core::image::decompose_tri_channel;
use maskdiff_core::segmentor::{evaluate, fine_tune, SegConfig, SegModel, TrainConfig};
use maskdiff_core::{AnnotatedPair, TrimesterLabel};
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "maskdiff", version, about = "Mask-guided diffusion augmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Phantom generation, ingestion and splitting.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Preview the WA/SA baselines on a phantom.
    #[command(subcommand)]
    Augment(AugmentCmd),
    #[command(subcommand)]
    Diffusion(DiffusionCmd),
    /// Ellipse extraction over sampled tri-channel images.
    #[command(subcommand)]
    Extract(ExtractCmd),
    /// Human review service.
    #[command(subcommand)]
    Review(ReviewCmd),
    #[command(subcommand)]
    Segmentor(SegCmd),
    #[command(subcommand)]
    Experiment(ExperimentCmd),
}

#[derive(Subcommand)]
enum DatasetCmd {
    Phantoms {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        size: usize,
        /// Equal counts per trimester instead of the reference mix.
        #[arg(long)]
        balanced: bool,
        #[arg(long)]
        out: PathBuf,
    },
    Ingest {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, value_enum, default_value_t = AnnotationMode::FilledMask)]
        mode: AnnotationMode,
        #[arg(long)]
        out: PathBuf,
    },
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        train_frac: f64,
        #[arg(long, default_value_t = 50)]
        val_count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to rewriting the input manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Weak,
    Strong,
}

#[derive(Subcommand)]
enum AugmentCmd {
    Preview {
        #[arg(long, value_enum)]
        policy: PolicyArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON file with `augment.weak` / `augment.strong` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Pair to augment; a phantom is generated when omitted.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "augment_preview")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Preset JSON (model, train, timesteps); desk defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum DiffusionCmd {
    /// Train the base denoiser from scratch.
    Train {
        #[command(flatten)]
        args: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// One adapter set per trimester over a frozen base.
    FinetuneLora {
        #[command(flatten)]
        args: TrainArgs,
        #[arg(long)]
        base: PathBuf,
        #[arg(long, default_value_t = 128)]
        rank: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long)]
        out: PathBuf,
    },
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of adapter sets from `finetune-lora`.
        #[arg(long)]
        adapters: Option<PathBuf>,
        #[arg(long)]
        trimester: String,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = 0.9)]
        alpha: f32,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ExtractCmd {
    Run {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 127)]
        threshold: u8,
        #[arg(long, default_value_t = 0.90)]
        q_hi: f64,
        #[arg(long, default_value_t = 0.50)]
        q_lo: f64,
        /// Trimester recorded for the samples (taken from file names when absent).
        #[arg(long)]
        trimester: Option<String>,
        /// Queue needs_review results into this review store.
        #[arg(long)]
        store: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ReviewCmd {
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    Export {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum SegCmd {
    Finetune {
        #[arg(long)]
        config: PathBuf,
    },
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Evaluate only this split (train, val or test).
        #[arg(long)]
        split: Option<String>,
        #[arg(long, default_value_t = 20)]
        q_max: u32,
    },
}

#[derive(Subcommand)]
enum ExperimentCmd {
    Run {
        #[arg(long)]
        grid: PathBuf,
    },
    Report {
        /// Run directory holding rows.json.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::Dataset(c) => dataset(c),
        Cmd::Augment(c) => augment(c),
        Cmd::Diffusion(c) => diffusion(c),
        Cmd::Extract(c) => extraction(c),
        Cmd::Review(c) => review_cmd(c),
        Cmd::Segmentor(c) => segmentor(c),
        Cmd::Experiment(c) => experiment(c),
    }
}

fn parse_trimester(s: &str) -> Result<TrimesterLabel> {
    TrimesterLabel::parse(s).with_context(|| format!("unknown trimester {s:?} (first, second, third)"))
}

fn parse_split(s: &str) -> Result<Split> {
    Ok(match s {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        _ => bail!("unknown split {s:?}"),
    })
}

fn dataset(c: DatasetCmd) -> Result<()> {
    match c {
        DatasetCmd::Phantoms {
            count,
            seed,
            size,
            balanced,
            out,
        } => {
            let pairs = if balanced {
                manifest::phantom_pairs_balanced(count.div_ceil(3), size, seed)?
            } else {
                manifest::phantom_pairs(count, size, seed)?
            };
            let m = manifest::write_pairs(&out, &pairs, seed)?;
            m.save(&out.join("manifest.json"))?;
            println!("{} phantoms -> {}", m.entries.len(), out.join("manifest.json").display());
        }
        DatasetCmd::Ingest { dir, mode, out } => {
            let (mut m, warnings) = manifest::ingest_hc18_style(&dir, mode)?;
            for w in &warnings {
                log::warn!("{w}");
            }
            // keep paths valid relative to the output manifest
            let out_dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
            let abs = std::path::absolute(&dir)?;
            let out_abs = std::path::absolute(&out_dir)?;
            if abs != out_abs {
                for e in &mut m.entries {
                    e.image_path = abs.join(&e.image_path);
                    e.mask_path = abs.join(&e.mask_path);
                }
            }
            m.save(&out)?;
            println!("{} pairs, {} skipped -> {}", m.entries.len(), warnings.len(), out.display());
        }
        DatasetCmd::Split {
            manifest: path,
            train_frac,
            val_count,
            seed,
            out,
        } => {
            let m = DatasetManifest::load(&path)?.with_split(train_frac, val_count, seed)?;
            let out = out.unwrap_or(path);
            m.save(&out)?;
            let [tr, va, te] = m.split_counts();
            println!("train {tr}, val {va}, test {te} -> {}", out.display());
        }
    }
    Ok(())
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct AugmentFile {
    augment: AugmentConfig,
}

fn augment(c: AugmentCmd) -> Result<()> {
    let AugmentCmd::Preview {
        policy,
        seed,
        config,
        manifest: mpath,
        out,
    } = c;
    let cfg = match config {
        Some(p) => io::read_json::<AugmentFile>(&p)?.augment,
        None => AugmentConfig::default(),
    };
    let policy: AugmentPolicy = match policy {
        PolicyArg::Weak => cfg.weak,
        PolicyArg::Strong => cfg.strong,
    };
    let pair = match mpath {
        Some(p) => manifest::load_pairs(&p, None)?.into_iter().next().context("manifest is empty")?,
        None => manifest::phantom_pairs(1, 128, seed)?.remove(0),
    };
    let (aug, applied) = policy.apply_traced(&pair, seed);
    io::write_gray(&out.join("image.png"), &pair.image)?;
    io::write_mask(&out.join("mask.png"), &pair.mask)?;
    io::write_gray(&out.join("augmented_image.png"), &aug.image)?;
    io::write_mask(&out.join("augmented_mask.png"), &aug.mask)?;
    io::write_json(&out.join("applied.json"), &applied)?;
    let kind = if policy.kind == PolicyKind::Weak { "weak" } else { "strong" };
    println!("{kind} policy, seed {seed}: {} transforms -> {}", applied.len(), out.display());
    Ok(())
}

fn load_preset(args: &TrainArgs, size: usize) -> Result<DiffusionPreset> {
    let mut preset = match &args.config {
        Some(p) => io::read_json(p)?,
        None => DiffusionPreset::desk(size),
    };
    preset.model.image_size = size;
    if let Some(e) = args.epochs {
        preset.train.epochs = e;
    }
    if let Some(s) = args.seed {
        preset.train.seed = s;
        preset.model.seed = s;
    }
    Ok(preset)
}

fn training_pairs(path: &Path) -> Result<Vec<AnnotatedPair>> {
    let m = DatasetManifest::load(path)?;
    let split = if m.split.is_empty() { None } else { Some(Split::Train) };
    let pairs = manifest::load_pairs(path, split)?;
    if pairs.is_empty() {
        bail!("{} has no training pairs", path.display());
    }
    Ok(pairs)
}

fn write_log(path: &Path, losses: &[f64]) -> Result<()> {
    let text: String = losses.iter().enumerate().map(|(i, l)| format!("{i},{l}\n")).collect();
    io::write_atomic(path, format!("step,loss\n{text}").as_bytes())?;
    Ok(())
}

fn diffusion(c: DiffusionCmd) -> Result<()> {
    match c {
        DiffusionCmd::Train { args, out } => {
            let pairs = training_pairs(&args.manifest)?;
            let preset = load_preset(&args, pairs[0].height())?;
            log::info!("training on {} pairs for {} epochs", pairs.len(), preset.train.epochs);
            let (model, schedule, log) = pipeline::train_base(&pairs, &preset)?;
            checkpoint::save_denoiser(&out, &model, &schedule)?;
            write_log(&out.with_extension("loss.csv"), &log.losses)?;
            println!(
                "{} steps, loss {:.4} -> {:.4}; {}",
                log.losses.len(),
                log.head_mean(20),
                log.tail_mean(20),
                out.display()
            );
        }
        DiffusionCmd::FinetuneLora {
            args,
            base,
            rank,
            lr,
            out,
        } => {
            let pairs = training_pairs(&args.manifest)?;
            let (model, schedule) = checkpoint::load_denoiser(&base)?;
            let cfg = DiffusionTrainConfig {
                mode: TrainMode::LoraFinetune,
                lora_rank: rank,
                learning_rate: lr,
                epochs: args.epochs.unwrap_or(1),
                seed: args.seed.unwrap_or(0),
                ..Default::default()
            };
            let by: Vec<Vec<_>> = TrimesterLabel::ALL
                .iter()
                .map(|t| {
                    pipeline::tri_dataset(&pairs)
                        .into_iter()
                        .filter(|(_, l)| l == t)
                        .map(|(x, _)| x)
                        .collect()
                })
                .collect();
            let sets = train_per_trimester(&model, [&by[0], &by[1], &by[2]], &schedule, &cfg)?;
            for s in &sets {
                let f = out.join(format!("{}.safetensors", s.trimester));
                checkpoint::save_adapter_set(&f, s)?;
                write_log(&out.join(format!("{}.loss.csv", s.trimester)), &s.log.losses)?;
                println!(
                    "{}: {} pairs, {} trainable, loss {:.4} -> {:.4}; {}",
                    s.trimester,
                    by[s.trimester.index()].len(),
                    s.log.trainable_params,
                    s.log.head_mean(5),
                    s.log.tail_mean(5),
                    f.display()
                );
            }
        }
        DiffusionCmd::Sample {
            checkpoint: ck,
            adapters,
            trimester,
            count,
            seed,
            steps,
            alpha,
            out,
        } => {
            let t = parse_trimester(&trimester)?;
            let (model, schedule) = checkpoint::load_denoiser(&ck)?;
            let sampler = SamplerConfig {
                steps,
                seed,
                alpha_merge: alpha,
            };
            let model = match adapters {
                Some(dir) => {
                    let set = checkpoint::load_adapter_set(&dir.join(format!("{t}.safetensors")))?;
                    let mut router = AdapterRouter::new(model, vec![set]);
                    let m = router.model_for(t)?;
                    for (label, id) in router.audit() {
                        log::info!("{label} served by adapter {id}");
                    }
                    m
                }
                None => model,
            };
            let samples = pipeline::generate(&model, &schedule, t, count, &sampler)?;
            for (id, _, tri) in &samples {
                io::write_tri(&out.join(format!("{id}.png")), tri)?;
            }
            println!("{} samples -> {}", samples.len(), out.display());
        }
    }
    Ok(())
}

fn trimester_from_name(name: &str) -> Option<TrimesterLabel> {
    TrimesterLabel::ALL.into_iter().find(|t| name.contains(&format!("-{t}-")))
}

fn extraction(c: ExtractCmd) -> Result<()> {
    let ExtractCmd::Run {
        input,
        out,
        threshold,
        q_hi,
        q_lo,
        trimester,
        store,
    } = c;
    let gate = QualityGate { threshold, q_hi, q_lo };
    let fixed = trimester.as_deref().map(parse_trimester).transpose()?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(&input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    files.sort();
    let out_dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut subs = Vec::new();
    let mut entries = Vec::new();
    for f in &files {
        let id = f.file_stem().unwrap().to_string_lossy().into_owned();
        let tri = io::read_tri(f)?;
        let r = extract(&tri, &gate);
        let t = fixed.or_else(|| trimester_from_name(&id)).unwrap_or(TrimesterLabel::Second);
        io::write_json(
            &input.join(format!("{id}.json")),
            &serde_json::json!({
                "id": id, "ellipse": r.ellipse, "quality": r.quality, "status": r.status,
            }),
        )?;
        if let Some(filled) = &r.filled {
            let image = decompose_tri_channel(&tri).0;
            let image_path = PathBuf::from("extracted/images").join(format!("{id}.png"));
            let mask_path = PathBuf::from("extracted/masks").join(format!("{id}.png"));
            io::write_gray(&out_dir.join(&image_path), &image)?;
            io::write_mask(&out_dir.join(&mask_path), filled)?;
            entries.push(manifest::ManifestEntry {
                id: id.clone(),
                image_path,
                mask_path,
                trimester: t,
                provenance: maskdiff_core::Provenance::SyntheticRaw,
            });
        }
        subs.push(Submission {
            id,
            trimester: t,
            image: decompose_tri_channel(&tri).0,
            extraction: r,
        });
    }
    DatasetManifest::new(entries, 0).save(&out)?;
    let counts = GateCounts::of(&subs);
    println!(
        "{} images: {} accepted_auto, {} needs_review, {} rejected_auto -> {}",
        counts.total(),
        counts.accepted_auto,
        counts.needs_review,
        counts.rejected_auto,
        out.display()
    );
    if let Some(dir) = store {
        let keep: Vec<Submission> = subs
            .into_iter()
            .filter(|s| s.extraction.status != maskdiff_core::extraction::ExtractionStatus::RejectedAuto)
            .collect();
        let r = ReviewStore::open(&dir)?.enqueue(&keep, false)?;
        println!(
            "queued {} for review, {} auto-accepted, {} already known",
            r.added, r.auto_accepted, r.duplicates
        );
    }
    Ok(())
}

fn review_cmd(c: ReviewCmd) -> Result<()> {
    match c {
        ReviewCmd::Serve { port, store, host } => {
            let store = Arc::new(ReviewStore::open(&store)?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await?;
                log::info!("review API on http://{}", listener.local_addr()?);
                review::serve(listener, store).await
            })?;
        }
        ReviewCmd::Export { store, out } => {
            let m = ReviewStore::open(&store)?.export(&out)?;
            println!("{} curated pairs -> {}", m.entries.len(), out.display());
        }
    }
    Ok(())
}

/// `segmentor finetune --config` file.
#[derive(Deserialize)]
struct FinetuneFile {
    /// Real data with train/val splits.
    manifest: PathBuf,
    /// Curated synthetic pairs added to the training set.
    #[serde(default)]
    synthetic_manifest: Option<PathBuf>,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    model: SegConfig,
    /// `weak` or `strong` to augment on the fly.
    #[serde(default)]
    augment: Option<PolicyKind>,
    out: PathBuf,
}

fn segmentor(c: SegCmd) -> Result<()> {
    match c {
        SegCmd::Finetune { config } => {
            let base = config.parent().unwrap_or(Path::new("")).to_path_buf();
            let f: FinetuneFile = io::read_json(&config)?;
            let mpath = base.join(&f.manifest);
            let mut train = manifest::load_pairs(&mpath, Some(Split::Train))?;
            let val = manifest::load_pairs(&mpath, Some(Split::Val))?;
            if let Some(s) = &f.synthetic_manifest {
                train.extend(manifest::load_pairs(&base.join(s), None)?);
            }
            let model = SegModel::new(f.model.clone());
            let policy = f.augment.map(AugmentPolicy::for_kind);
            let hook = policy.as_ref().map(|p| move |pair: &AnnotatedPair, s: u64| p.apply(pair, s));
            let res = match &hook {
                Some(h) => fine_tune(&model, &train, &val, &f.train, Some(h))?,
                None => fine_tune(&model, &train, &val, &f.train, None)?,
            };
            for e in &res.history {
                println!(
                    "epoch {:>3}  loss {:.4}  val DSC {}",
                    e.epoch,
                    e.train_loss,
                    e.val_dsc.map_or("-".into(), |d| format!("{d:.4}"))
                );
            }
            let out = base.join(&f.out);
            let sums = checkpoint::save_segmentor(&out, &res.best)?;
            io::write_json(&out.with_extension("history.json"), &res.history)?;
            println!(
                "best epoch {} (val DSC {:.4}); encoder {:016x}, prompt {:016x}; {}",
                res.best_epoch,
                res.best_val_dsc,
                sums.encoder,
                sums.prompt,
                out.display()
            );
        }
        SegCmd::Eval {
            checkpoint: ck,
            manifest: mpath,
            out,
            split,
            q_max,
        } => {
            let model = checkpoint::load_segmentor(&ck)?;
            let split = split.as_deref().map(parse_split).transpose()?;
            let pairs = manifest::load_pairs(&mpath, split)?;
            let report = evaluate(&model, &pairs, q_max)?;
            let mut w = csv::Writer::from_path(&out)?;
            w.write_record(["id", "dsc"])?;
            for (p, d) in pairs.iter().zip(&report.per_item) {
                w.write_record([p.id.as_str(), &format!("{d:?}")])?;
            }
            w.flush()?;
            println!("{} images, mean DSC {:.4} -> {}", pairs.len(), report.mean, out.display());
        }
    }
    Ok(())
}

fn experiment(c: ExperimentCmd) -> Result<()> {
    match c {
        ExperimentCmd::Run { grid } => {
            let spec = SweepSpec::load(&grid)?;
            let data = LoadedData::load(&spec)?;
            let s = sweep::run_sweep(&spec, &data)?;
            println!(
                "{} new runs, {} failed cells, {} rows -> {}",
                s.new_runs,
                s.failed,
                s.rows.len(),
                spec.run_dir.join("rows.json").display()
            );
        }
        ExperimentCmd::Report { run, out } => {
            let rows = sweep::load_rows(&run)?;
            let paths = sweep::emit_reports(&rows, &out)?;
            print!("{}", sweep::markdown_table(&rows)?);
            for p in paths {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}
