//! `personaseg`: synthetic data, clustering, two-stage training, pseudo-label
//! selection, evaluation and ablations, each command working inside one run
//! directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use personaseg::context::ContextVariant;
use personaseg::pipeline::{run_ablation, AblationMatrix, DataMode, RunConfig, RunDir, CONFIG_FILE};
use personaseg::training::Stage;

#[derive(Parser, Debug)]
#[command(name = "personaseg", version, about = "Personalized image segmentation experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration (defaults to the desk preset, or the run directory's copy).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for data, initialization, clustering and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run (or ablation output) directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    variant: Option<ContextVariant>,
    /// Number of k-means groups per user.
    #[arg(long = "groups", global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    select_rate: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic fixture into the run directory.
    SynthData,
    /// Cluster the personal images into groups.
    Cluster,
    /// Adversarial training with group context.
    TrainStep1,
    /// Select low-entropy predictions as pseudo labels.
    SelectPseudo,
    /// Continue training with the pseudo labels.
    TrainStep2,
    /// Evaluate a checkpoint on the labeled personal split.
    Eval {
        /// `step1` or `step2`; defaults to the latest checkpoint.
        #[arg(long)]
        stage: Option<String>,
    },
    /// Every command above in order.
    Run,
    /// Cross-product ablation on synthetic data.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long, value_delimiter = ',', default_value = "none,global,group")]
    variants: Vec<ContextVariant>,
    /// Group counts; defaults to the configured K.
    #[arg(long, value_delimiter = ',')]
    ks: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "personal")]
    modes: Vec<DataMode>,
    /// Seeds; defaults to `--seed` (or 0).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 1)]
    users: usize,
    /// Also run pseudo-label selection and step 2 in every cell.
    #[arg(long)]
    step2: bool,
}

fn read_config(path: &Path) -> personaseg::Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| personaseg::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Base configuration: `--config`, else the run directory's stored copy, else
/// the desk preset; then flag overrides.
fn resolve_config(common: &Common, out: Option<&Path>) -> personaseg::Result<RunConfig> {
    let mut config = match (&common.config, out) {
        (Some(p), _) => read_config(p)?,
        (None, Some(dir)) if dir.join(CONFIG_FILE).exists() => read_config(&dir.join(CONFIG_FILE))?,
        _ => RunConfig::desk(),
    };
    if let Some(seed) = common.seed {
        config = config.with_seed(seed);
    }
    if let Some(v) = common.variant {
        config.model.variant = v;
    }
    if let Some(k) = common.k {
        config.grouping.k = k;
    }
    if let Some(r) = common.select_rate {
        config.train.select_rate = r;
    }
    Ok(config)
}

fn parse_stage(s: &str) -> personaseg::Result<Stage> {
    match s {
        "step1" => Ok(Stage::Step1),
        "step2" => Ok(Stage::Step2),
        _ => Err(personaseg::Error::InvalidArgument(format!(
            "unknown stage `{s}` (expected step1 or step2)"
        ))),
    }
}

fn run(cli: Cli) -> personaseg::Result<()> {
    let common = &cli.common;
    if let Command::Ablate(a) = &cli.command {
        let base = resolve_config(common, None)?;
        let matrix = AblationMatrix {
            variants: a.variants.clone(),
            ks: if a.ks.is_empty() { vec![base.grouping.k] } else { a.ks.clone() },
            modes: a.modes.clone(),
            seeds: if a.seeds.is_empty() { vec![common.seed.unwrap_or(base.seed)] } else { a.seeds.clone() },
            users: a.users,
            with_step2: a.step2,
            base,
        };
        let out = common.out.clone().unwrap_or_else(|| PathBuf::from("runs/ablation"));
        let result = run_ablation(&matrix, Some(&out))?;
        print!("{}", result.render());
        return Ok(());
    }

    let preliminary = resolve_config(common, None)?;
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(&preliminary.name));
    let config = resolve_config(common, Some(&out))?;
    let dir = RunDir::create(&out, &config)?;
    match &cli.command {
        Command::SynthData => dir.synth_data()?,
        Command::Cluster => {
            let groups = dir.cluster()?;
            log::info!("{} images in {} groups", groups.mapping.len(), groups.k);
        }
        Command::TrainStep1 => {
            let s = dir.train_step1()?;
            log::info!("step 1: L_seg {:.4} -> {:.4}", s.first_seg_loss, s.last_seg_loss);
        }
        Command::SelectPseudo => {
            let set = dir.select_pseudo()?;
            log::info!("{} pseudo-labeled images", set.len());
        }
        Command::TrainStep2 => {
            let s = dir.train_step2()?;
            log::info!("step 2: L_seg {:.4} -> {:.4}", s.first_seg_loss, s.last_seg_loss);
        }
        Command::Eval { stage } => {
            let stage = stage.as_deref().map(parse_stage).transpose()?;
            let (tag, report) = dir.eval(stage)?;
            println!(
                "{tag}: FIoU {} MIoU {}",
                personaseg::metrics::fmt_cell(report.mean_fiou),
                personaseg::metrics::fmt_cell(report.mean_miou)
            );
        }
        Command::Run => {
            for (tag, report) in dir.run_all()? {
                println!(
                    "{tag}: FIoU {} MIoU {}",
                    personaseg::metrics::fmt_cell(report.mean_fiou),
                    personaseg::metrics::fmt_cell(report.mean_miou)
                );
            }
        }
        Command::Ablate(_) => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var("PERSONASEG_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            std::env::set_var("RAYON_NUM_THREADS", n.to_string());
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("could not size the thread pool: {e}");
            }
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
