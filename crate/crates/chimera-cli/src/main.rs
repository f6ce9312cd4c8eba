//! `chimera` — corpus generation, staged training, evaluation, and the
//! mask-ratio ablation, driven by one JSON experiment config.
//!
//! Exit codes: 0 success, 2 usage/config, 3 I/O, 4 numerical abort.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use chimera_core::checkpoint;
use chimera_core::config::{ExperimentConfig, StageKind};
use chimera_core::datagen;
use chimera_core::error::ChimeraError;
use chimera_core::evalkit;
use chimera_core::fusion::AssemblyMode;
use chimera_core::model::ModelState;
use chimera_core::training::{self, Trainer};

#[derive(Parser)]
#[command(name = "chimera", version, about = "expert-routed multimodal toy model pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its manifest.
    Generate(GenerateArgs),
    /// Run one training stage, writing a checkpoint and metrics log.
    Train(TrainArgs),
    /// Run analyses over a checkpoint and corpus.
    Eval(EvalArgs),
    /// Mask-ratio ablation: full stage-2 run per (ratio, seed).
    Ablate(AblateArgs),
}

#[derive(Args)]
struct CommonConfig {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed (flag wins over the environment).
    #[arg(long, env = "CHIMERA_SEED")]
    seed: Option<u64>,
}

impl CommonConfig {
    fn load(&self) -> Result<ExperimentConfig, ChimeraError> {
        let text = std::fs::read_to_string(&self.config)?;
        let mut cfg = ExperimentConfig::from_json(&text)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: CommonConfig,
    /// Output directory for corpus.jsonl and manifest.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonConfig,
    /// Which stage to run: 1, 2, or dpo.
    #[arg(long)]
    stage: String,
    /// Directory holding corpus.jsonl and manifest.json.
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint output directory.
    #[arg(long)]
    out: PathBuf,
    /// Prerequisite checkpoint (stage-1 result for stage 2, stage-2
    /// result for dpo).
    #[arg(long)]
    init_from: Option<PathBuf>,
    /// Resume an interrupted run from its periodic checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override the stage's masking ratio.
    #[arg(long)]
    gscm_ratio: Option<f64>,
    /// Override the stage's assembly mode
    /// (chimera | naive-finetune | naive-concat).
    #[arg(long)]
    mode: Option<String>,
    /// Override the stage's epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the stage's learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Override the stage's batch size.
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus directory.
    #[arg(long)]
    corpus: PathBuf,
    /// Comma-separated analyses: confusion,attention,accuracy,metrics.
    #[arg(long)]
    analyses: String,
    /// Report output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonConfig,
    /// Corpus directory.
    #[arg(long)]
    corpus: PathBuf,
    /// Comma-separated mask ratios.
    #[arg(long, default_value = "0.0,0.3,0.5,1.0")]
    ratios: String,
    /// Comma-separated seeds.
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    /// Output directory for ablation.csv / ablation.json.
    #[arg(long)]
    out: PathBuf,
}

fn exit_code_for(err: &ChimeraError) -> u8 {
    match err {
        ChimeraError::Io(_) => 3,
        ChimeraError::Numeric { .. } => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn cmd_generate(args: GenerateArgs) -> Result<(), ChimeraError> {
    let cfg = args.common.load()?;
    let (manifest, samples) = datagen::generate_corpus(&cfg.corpus, cfg.seed)?;
    datagen::write_corpus(&args.out, &manifest, &samples)?;
    println!(
        "wrote {} samples to {} (content hash {})",
        samples.len(),
        args.out.display(),
        manifest.content_hash
    );
    Ok(())
}

fn parse_stage(s: &str) -> Result<StageKind, ChimeraError> {
    match s {
        "1" => Ok(StageKind::One),
        "2" => Ok(StageKind::Two),
        "dpo" => Ok(StageKind::Dpo),
        other => Err(ChimeraError::config(format!("unknown stage `{other}` (use 1, 2, or dpo)"))),
    }
}

fn parse_mode(s: &str) -> Result<AssemblyMode, ChimeraError> {
    match s {
        "chimera" => Ok(AssemblyMode::Chimera),
        "naive-finetune" => Ok(AssemblyMode::NaiveFinetune),
        "naive-concat" => Ok(AssemblyMode::NaiveConcat),
        other => Err(ChimeraError::config(format!("unknown assembly mode `{other}`"))),
    }
}

fn load_prerequisite(
    stage: StageKind,
    init_from: &Option<PathBuf>,
) -> Result<Option<checkpoint::LoadedCheckpoint>, ChimeraError> {
    match stage {
        StageKind::One => Ok(None),
        StageKind::Two | StageKind::Dpo => {
            let path = init_from.as_ref().ok_or_else(|| {
                ChimeraError::config(format!(
                    "stage {stage:?} requires --init-from with the previous stage's checkpoint"
                ))
            })?;
            if !path.join(checkpoint::MANIFEST_FILE).exists() {
                return Err(ChimeraError::config(format!(
                    "prerequisite checkpoint {} not found",
                    path.display()
                )));
            }
            Ok(Some(checkpoint::load(path)?))
        }
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), ChimeraError> {
    let stage = parse_stage(&args.stage)?;
    let (_, samples) = datagen::load_corpus(&args.corpus)?;

    // resumption restores the exact embedded config
    if let Some(resume_path) = &args.resume {
        if stage == StageKind::Dpo {
            return Err(ChimeraError::config("resume is supported for stages 1 and 2"));
        }
        let loaded = checkpoint::load(resume_path)?;
        let cfg = loaded.manifest.config.clone();
        let stage_cfg = match stage {
            StageKind::One => cfg.stage1.clone(),
            StageKind::Two => cfg.stage2.clone(),
            StageKind::Dpo => unreachable!(),
        };
        let mut trainer = Trainer::new(loaded.state);
        if let Some(opt) = loaded.optimizer {
            trainer.optimizer = opt;
        }
        trainer.progress = loaded.manifest.progress;
        trainer.checkpoint_dir = Some(args.out.join("periodic"));
        let report = run_with_abort_handling(&mut trainer, stage, &stage_cfg, &samples, &args.out)?;
        finish_training(&args.out, trainer, stage, report)?;
        return Ok(());
    }

    let mut cfg = args.common.load()?;
    {
        let stage_cfg = match stage {
            StageKind::One => &mut cfg.stage1,
            StageKind::Two | StageKind::Dpo => &mut cfg.stage2,
        };
        if let Some(r) = args.gscm_ratio {
            stage_cfg.gscm_ratio = Some(r);
        }
        if let Some(m) = &args.mode {
            stage_cfg.mode = parse_mode(m)?;
        }
        if let Some(e) = args.epochs {
            stage_cfg.epochs = e;
        }
        if let Some(lr) = args.lr {
            stage_cfg.lr = lr;
        }
        if let Some(b) = args.batch_size {
            stage_cfg.batch_size = b;
        }
        stage_cfg.validate()?;
    }

    let prereq = load_prerequisite(stage, &args.init_from)?;
    match stage {
        StageKind::One => {
            let state = ModelState::init(&cfg)?;
            let mut trainer = Trainer::new(state);
            trainer.checkpoint_dir = Some(args.out.join("periodic"));
            let report =
                run_with_abort_handling(&mut trainer, stage, &cfg.stage1, &samples, &args.out)?;
            finish_training(&args.out, trainer, stage, report)?;
        }
        StageKind::Two => {
            let loaded = prereq.expect("checked");
            let mut state = loaded.state;
            // stage-2 settings come from the current config; the model and
            // corpus identity come from the stage-1 checkpoint
            state.experiment.stage2 = cfg.stage2.clone();
            let mut trainer = Trainer::new(state);
            trainer.checkpoint_dir = Some(args.out.join("periodic"));
            let report =
                run_with_abort_handling(&mut trainer, stage, &cfg.stage2, &samples, &args.out)?;
            finish_training(&args.out, trainer, stage, report)?;
        }
        StageKind::Dpo => {
            let loaded = prereq.expect("checked");
            let state = loaded.state;
            let reference = state.params.clone();
            let pairs = training::build_preference_pairs(&state, &samples, &cfg.dpo, cfg.seed)?;
            if pairs.is_empty() {
                return Err(ChimeraError::config(
                    "no preference pairs could be built (model rollouts never disagree)",
                ));
            }
            let mut trainer = Trainer::new(state);
            let report = training::run_dpo(&mut trainer, &reference, &pairs, &cfg.dpo)?;
            checkpoint::save(
                &args.out,
                &trainer.state,
                Some(&trainer.optimizer),
                trainer.progress,
                Some(StageKind::Dpo),
                serde_json::json!({
                    "pairs": report.pairs_used,
                    "final_loss": report.records.last().map(|r| r.loss),
                    "final_margin": report.records.last().map(|r| r.margin),
                }),
            )?;
            let mut lines = String::new();
            for r in &report.records {
                lines.push_str(&serde_json::to_string(r)?);
                lines.push('\n');
            }
            std::fs::write(args.out.join("metrics.jsonl"), lines)?;
            println!(
                "dpo finished: {} pairs, final loss {:.4}",
                report.pairs_used,
                report.records.last().map(|r| r.loss).unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}

fn run_with_abort_handling(
    trainer: &mut Trainer,
    stage: StageKind,
    stage_cfg: &chimera_core::config::StageConfig,
    samples: &[datagen::Sample],
    out: &Path,
) -> Result<training::StageReport, ChimeraError> {
    match trainer.run_stage(stage, stage_cfg, samples) {
        Ok(report) => Ok(report),
        Err(ChimeraError::Numeric { step, msg }) => {
            let periodic = out.join("periodic");
            if periodic.join(checkpoint::MANIFEST_FILE).exists() {
                eprintln!("last good checkpoint: {}", periodic.display());
            }
            Err(ChimeraError::Numeric { step, msg })
        }
        Err(other) => Err(other),
    }
}

fn finish_training(
    out: &Path,
    trainer: Trainer,
    stage: StageKind,
    report: training::StageReport,
) -> Result<(), ChimeraError> {
    checkpoint::save(
        out,
        &trainer.state,
        Some(&trainer.optimizer),
        trainer.progress,
        Some(stage),
        serde_json::json!({
            "final_loss": report.final_loss,
            "steps": report.steps_run,
        }),
    )?;
    checkpoint::write_metrics(out, &report.records)?;
    println!(
        "stage {stage:?} finished: {} steps, final loss {:.4}, checkpoint at {}",
        report.steps_run,
        report.final_loss,
        out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), ChimeraError> {
    let analyses: Vec<&str> =
        args.analyses.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if analyses.is_empty() {
        return Err(ChimeraError::config("no analyses requested"));
    }
    for a in &analyses {
        if !["confusion", "attention", "accuracy", "metrics"].contains(a) {
            return Err(ChimeraError::config(format!("unknown analysis `{a}`")));
        }
    }
    let loaded = checkpoint::load(&args.checkpoint)?;
    let state = loaded.state;
    let ckpt_hash = loaded.manifest.params_hash;
    let (_, samples) = datagen::load_corpus(&args.corpus)?;
    let test: Vec<datagen::Sample> = {
        let t: Vec<datagen::Sample> = samples
            .iter()
            .filter(|s| s.split == datagen::Split::Test)
            .cloned()
            .collect();
        if t.is_empty() {
            samples.clone()
        } else {
            t
        }
    };
    std::fs::create_dir_all(&args.out)?;
    let write = |name: &str, body: serde_json::Value| -> Result<(), ChimeraError> {
        let wrapped = serde_json::json!({ "checkpoint_hash": ckpt_hash, "report": body });
        std::fs::write(
            args.out.join(format!("{name}.json")),
            serde_json::to_string_pretty(&wrapped)?,
        )?;
        Ok(())
    };
    for a in &analyses {
        match *a {
            "confusion" => {
                let m = evalkit::router_confusion(&state, &test)?;
                write("confusion", serde_json::to_value(&m)?)?;
                println!("confusion: accuracy {:.4} over {}", m.accuracy, m.total);
            }
            "attention" => {
                let instruct: Vec<datagen::Sample> = test
                    .iter()
                    .filter(|s| s.stage_tag == datagen::StageTag::Instruction)
                    .cloned()
                    .collect();
                let (masses, n) = evalkit::mean_expert_attention(&state, &instruct)?;
                write(
                    "attention",
                    serde_json::json!({
                        "mean": masses,
                        "n_expert_routed": n,
                    }),
                )?;
                println!(
                    "attention: general {:.4} expert {:.4} text {:.4} over {n} samples",
                    masses.general, masses.expert, masses.text
                );
            }
            "accuracy" => {
                let instruct: Vec<datagen::Sample> = test
                    .iter()
                    .filter(|s| s.stage_tag == datagen::StageTag::Instruction)
                    .cloned()
                    .collect();
                let r = evalkit::answer_accuracy(&state, &instruct, AssemblyMode::Chimera)?;
                write("accuracy", serde_json::to_value(&r)?)?;
                println!(
                    "accuracy: overall {:.4}, value queries {:.4} ({} samples)",
                    r.overall, r.value_query, r.n
                );
            }
            "metrics" => {
                let r = evalkit::similarity_metrics(&state, &test, AssemblyMode::Chimera)?;
                write("metrics", serde_json::to_value(&r)?)?;
                println!(
                    "metrics: mean normalized edit distance {:.4}, tree similarity {:?}",
                    r.mean_normalized_edit_distance, r.mean_teds
                );
            }
            _ => unreachable!(),
        }
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, ChimeraError> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<T>()
                .map_err(|_| ChimeraError::config(format!("invalid {what} entry `{p}`")))
        })
        .collect()
}

fn cmd_ablate(args: AblateArgs) -> Result<(), ChimeraError> {
    let cfg = args.common.load()?;
    let ratios: Vec<f64> = parse_list(&args.ratios, "ratio")?;
    let seeds: Vec<u64> = parse_list(&args.seeds, "seed")?;
    if seeds.len() < 2 {
        eprintln!("warning: a single seed gives no spread estimate");
    }
    let (_, samples) = datagen::load_corpus(&args.corpus)?;
    let outcome = evalkit::ablate_mask_ratio(&cfg, &samples, &ratios, &seeds)?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("ablation.csv"), evalkit::ablation_csv(&outcome.rows))?;
    std::fs::write(
        args.out.join("ablation.json"),
        serde_json::to_string_pretty(&outcome.rows)?,
    )?;
    for row in &outcome.rows {
        println!(
            "ratio {:.2}: accuracy {:.4} +- {:.4} over {} seeds",
            row.ratio, row.mean_accuracy, row.std_accuracy, row.n_seeds
        );
    }
    Ok(())
}
