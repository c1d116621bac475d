use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle::{DType, Device};
use clap::{Args, Parser, Subcommand};

use fot::config::{ConfigMap, RunConfig};
use fot::datamodel::{list_class_dirs, make_split, sample_episode, SampleStage, SplitConfig, SplitRole};
use fot::eval::{run_episode, FotLearner, VariantFlags};
use fot::extractor::Preprocess;
use fot::miner::read_manifest;
use fot::networks::checkpoint;
use fot::pipeline::{self, Pipeline, BACKBONE_FILE, GENERATOR_FILE};
use fot::saliency::SaliencyCache;
use fot::synth::{gen_synthetic, SyntheticSpec};
use fot::training::{augment_support, AugmentContext};
use fot::{FotError, Result};

#[derive(Parser)]
#[command(name = "fot", version, about = "Foreground object transformation for few-shot classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// key = value config file; later --set flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set beta=60.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic shapes dataset with exact saliency masks.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        classes: usize,
        #[arg(long, default_value_t = 30)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Preprocess every image under `data` into <out>/images and <out>/maps.
    Extract {
        #[command(flatten)]
        common: Common,
        /// raw, rb or rbrf.
        #[arg(long, default_value = "rbrf")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mine posture quadruplets from a prepared directory into a manifest.
    Mine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prepared: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the backbone and base classifier on prepared base classes.
    TrainBase {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prepared: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the generator against frozen base networks.
    TrainGen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prepared: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding the base checkpoints.
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate extra samples for the listed support ids.
    Augment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prepared: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding the generator checkpoint.
        #[arg(long)]
        generator: PathBuf,
        /// Comma-separated `class/stem` ids.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune and score a single episode.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prepared: PathBuf,
        /// Directory holding the base checkpoints.
        #[arg(long)]
        base: PathBuf,
        #[arg(long, requires = "generator")]
        manifest: Option<PathBuf>,
        #[arg(long, requires = "manifest")]
        generator: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        shot: usize,
        #[arg(long, default_value_t = 0)]
        episode_seed: u64,
    },
    /// Evaluate the configured variant, running any missing stages.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Variant name such as baseline, rb, rb_rf, fot or fot_star.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the standard variant grid on shared episodes.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage; completed stages are reused.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenSynth { .. } => "gen-synth",
            Command::Extract { .. } => "extract",
            Command::Mine { .. } => "mine",
            Command::TrainBase { .. } => "train-base",
            Command::TrainGen { .. } => "train-gen",
            Command::Augment { .. } => "augment",
            Command::Finetune { .. } => "finetune",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Run { .. } => "run",
        }
    }
}

fn load_config(common: &Common, extra: &[(&str, String)]) -> Result<RunConfig> {
    let mut map = match &common.config {
        Some(path) => ConfigMap::read(path)?,
        None => ConfigMap::default(),
    };
    for (k, v) in extra {
        map.set(k, v.clone());
    }
    for assignment in &common.set {
        map.apply(assignment)?;
    }
    if let Some(seed) = common.seed {
        map.set("seed", seed.to_string());
    }
    RunConfig::from_map(&map)
}

/// The configured split file, a split drawn over `root`'s class directories,
/// or every class as base.
fn split_for(cfg: &RunConfig, root: &Path) -> Result<SplitConfig> {
    if let Some(path) = &cfg.split_file {
        return SplitConfig::read(path);
    }
    match cfg.split_counts {
        Some(counts) => make_split(&list_class_dirs(root)?, counts, cfg.split_seed),
        None => pipeline::all_base_split(root),
    }
}

fn parse_mode(s: &str) -> Result<Preprocess> {
    [Preprocess::Resize, Preprocess::RemoveBackground, Preprocess::Foreground]
        .into_iter()
        .find(|m| m.tag() == s)
        .ok_or_else(|| FotError::Config(format!("unknown mode '{s}'; expected raw, rb or rbrf")))
}

fn run_pipeline(cfg: RunConfig, out: &Path) -> Result<()> {
    let summary = Pipeline::new(cfg, out).run()?;
    eprint!("{}", pipeline::describe(&summary.stages));
    print!("{}", summary.report_text);
    Ok(())
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenSynth {
            out,
            classes,
            per_class,
            size,
            seed,
            force,
        } => {
            let spec = SyntheticSpec {
                n_classes: classes,
                samples_per_class: per_class,
                image_size: size,
                seed,
                ..SyntheticSpec::default()
            };
            let layout = gen_synthetic(&spec, &out, force)?;
            println!(
                "wrote {} images and {} masks for {} classes to {}",
                layout.images,
                layout.masks,
                layout.class_names.len(),
                out.display()
            );
        }
        Command::Extract { common, mode, out } => {
            let cfg = load_config(&common, &[])?;
            let mode = parse_mode(&mode)?;
            let data = cfg.data.clone().ok_or_else(|| FotError::Config("'data' is not set".into()))?;
            let raw = fot::datamodel::load_dataset(&data, &pipeline::all_base_split(&data)?)?;
            let cache = cfg.saliency.as_ref().map(SaliencyCache::new);
            let n = pipeline::extract_to(&raw, cache.as_ref(), mode, &cfg, &out)?;
            println!("prepared {n} images into {}", out.display());
        }
        Command::Mine { common, prepared, out } => {
            let cfg = load_config(&common, &[])?;
            let split = split_for(&cfg, &prepared.join("images"))?;
            let reg = pipeline::load_prepared(&prepared, &split)?;
            let maps = SaliencyCache::new(prepared.join("maps"));
            let n = pipeline::mine_to(&reg, &maps, &cfg, &out)?;
            println!("mined {n} quadruplets into {}", out.display());
        }
        Command::TrainBase { common, prepared, out } => {
            let cfg = load_config(&common, &[])?;
            let split = split_for(&cfg, &prepared.join("images"))?;
            let reg = pipeline::load_prepared(&prepared, &split)?;
            std::fs::create_dir_all(&out).map_err(|source| FotError::Io {
                path: out.clone(),
                source,
            })?;
            let hash = cfg.stage_hash("train-base", &[], &[]);
            pipeline::train_base_to(&reg, &cfg, &hash, &out)?;
            println!("wrote base checkpoints to {}", out.display());
        }
        Command::TrainGen {
            common,
            prepared,
            manifest,
            base,
            out,
        } => {
            let cfg = load_config(&common, &[])?;
            let split = split_for(&cfg, &prepared.join("images"))?;
            let reg = pipeline::load_prepared(&prepared, &split)?;
            std::fs::create_dir_all(&out).map_err(|source| FotError::Io {
                path: out.clone(),
                source,
            })?;
            let hash = cfg.stage_hash("train-gen", &[], &[]);
            pipeline::train_gen_to(&reg, &manifest, &base, &cfg, &hash, &out)?;
            println!("wrote generator checkpoint to {}", out.display());
        }
        Command::Augment {
            common,
            prepared,
            manifest,
            generator,
            ids,
            out,
        } => {
            let cfg = load_config(&common, &[])?;
            let split = split_for(&cfg, &prepared.join("images"))?;
            let reg = pipeline::load_prepared(&prepared, &split)?;
            let maps_cache = SaliencyCache::new(prepared.join("maps"));
            let text = std::fs::read_to_string(&manifest).map_err(|source| FotError::Io {
                path: manifest.clone(),
                source,
            })?;
            let d_g = read_manifest(&text, &reg)?;
            let index = pipeline::base_match_index(&reg, &maps_cache, &cfg)?;
            let base_images = reg
                .indices_with_role(SplitRole::Base)
                .into_iter()
                .map(|i| Ok((reg.entry(i).id.clone(), reg.pixels(i)?)))
                .collect::<Result<_>>()?;
            let g = checkpoint::load_generator(&generator.join(GENERATOR_FILE), DType::F32, &Device::Cpu)?;
            let mut support = Vec::new();
            let mut maps = Vec::new();
            let mut labels = Vec::new();
            for id in &ids {
                let i = reg
                    .index_of(id)
                    .ok_or_else(|| FotError::Invalid(format!("unknown sample id {id}")))?;
                let s = reg.sample(i)?;
                labels.push(s.class_id);
                maps.push(maps_cache.get(id)?.ok_or_else(|| FotError::SaliencyUnavailable(id.clone()))?);
                support.push(s);
            }
            let k = cfg.k_generated.unwrap_or(if ids.len() <= 1 { 3 } else { 5 });
            let ctx = AugmentContext {
                generator: &g,
                d_g: &d_g,
                index: &index,
                base_images: &base_images,
            };
            let (samples, _) = augment_support(&support, &labels, &maps, &ctx, k, cfg.seed)?;
            let mut written = 0;
            for s in samples.iter().filter(|s| s.stage == SampleStage::Generated) {
                let path = out.join(format!("{}.png", s.id.replace(['/', '#'], "_")));
                s.pixels.save_png(&path)?;
                written += 1;
            }
            println!("wrote {written} generated images to {}", out.display());
        }
        Command::Finetune {
            common,
            prepared,
            base,
            manifest,
            generator,
            shot,
            episode_seed,
        } => {
            let cfg = load_config(&common, &[])?;
            let split = split_for(&cfg, &prepared.join("images"))?;
            let reg = pipeline::load_prepared(&prepared, &split)?;
            let gen = manifest.as_deref().zip(generator.as_ref().map(|g| g.join(GENERATOR_FILE)));
            let assets = pipeline::load_mode_assets(
                &reg,
                &prepared.join("maps"),
                &base.join(BACKBONE_FILE),
                gen.as_ref().map(|(m, g)| (*m, g.as_path())),
                &cfg,
            )?;
            let flags = VariantFlags {
                remove_background: false,
                resize_foreground: false,
                use_generator: gen.is_some(),
                transductive: cfg.fot.transductive,
            };
            let mut learner = FotLearner::new(cfg.fot_for_shot(shot));
            learner.insert(flags.preprocess(), assets);
            let episode = sample_episode(&reg, cfg.n_way, shot, cfg.n_query, episode_seed)?;
            let acc = run_episode(&episode, &learner, &flags)?;
            println!("episode {episode_seed}: accuracy {:.2}%", acc * 100.0);
        }
        Command::Eval { common, variant, out } => {
            let extra: Vec<(&str, String)> = variant.into_iter().map(|v| ("variants", v)).collect();
            run_pipeline(load_config(&common, &extra)?, &out)?;
        }
        Command::Ablate { common, out } => {
            let mut cfg = load_config(&common, &[])?;
            if cfg.value("variants").is_none() {
                let grid: Vec<String> = VariantFlags::standard_grid().iter().map(|v| v.to_string()).collect();
                cfg = load_config(&common, &[("variants", grid.join(","))])?;
            }
            run_pipeline(cfg, &out)?;
        }
        Command::Run { common, out } => run_pipeline(load_config(&common, &[])?, &out)?,
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let name = cli.command.name();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(FotError::Stage { stage, source }) => {
            eprintln!("error: stage={stage} reason={}", one_line(&source.to_string()));
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: stage={name} reason={}", one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
