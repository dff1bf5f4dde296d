use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rgat::autodiff::Checkpoint;
use rgat::classify::Split;
use rgat::config::{RunConfig, Task};
use rgat::inspect::{
    alignment_chance_baseline, aspect_alignment_score, channel_attention_summary, top_facts,
};
use rgat::model::{EntityClassifier, LinkPredictor};
use rgat::synth::{generate_labeled, generate_synthetic, load_aspects, LabeledSpec, SynthSpec};
use rgat::train::{
    evaluate_ec, evaluate_lp, sweep_channels, train_ec, train_lp, ClassDataset, LinkDataset,
};
use rgat::{Result, RgatError};

#[derive(Parser, Debug)]
#[command(name = "rgat", version, about = "Relational graph attention toolkit")]
struct Cli {
    /// Run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for logs, reports and checkpoints.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Checkpoint path; defaults to `<out-dir>/model.ckpt`.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a link predictor.
    TrainLp,
    /// Train an entity classifier.
    TrainEc,
    /// Filtered ranking of a split with a saved link predictor.
    EvalLp(EvalArgs),
    /// Accuracy of a split with a saved entity classifier.
    EvalEc(EvalArgs),
    /// Train one link predictor per channel count.
    SweepK {
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        channels: Vec<usize>,
    },
    /// Write a synthetic dataset.
    GenSynth(SynthArgs),
    /// Channel-attention and fact-attribution reports for a link predictor.
    Inspect(InspectArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Emit an entity-classification dataset instead.
    #[arg(long)]
    labeled: bool,
    #[arg(long, default_value_t = 4)]
    aspects: usize,
    #[arg(long, default_value_t = 3)]
    relations_per_aspect: usize,
    #[arg(long, default_value_t = 200)]
    entities: usize,
    #[arg(long, default_value_t = 5)]
    groups: usize,
    #[arg(long, default_value_t = 0.05)]
    density: f64,
    /// Relations map groups through a random permutation instead of linking within a group.
    #[arg(long)]
    permute: bool,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 3)]
    relations: usize,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    subject: Option<String>,
    #[arg(long)]
    relation: Option<String>,
    #[arg(long, default_value_t = 3)]
    top_channels: usize,
    #[arg(long, default_value_t = 4)]
    top_facts: usize,
    /// Query relations for the channel summary; all base relations by default.
    #[arg(long, value_delimiter = ',')]
    relations: Vec<String>,
    #[arg(long, default_value_t = 100)]
    sample: usize,
    /// "relation TAB aspect" file; adds the alignment score.
    #[arg(long)]
    aspects: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| RgatError::Config("--config is required for this command".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint_path(cli: &Cli) -> PathBuf {
    cli.checkpoint.clone().unwrap_or_else(|| cli.out_dir.join("model.ckpt"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| RgatError::io(path, e))
}

fn ensure_task(cfg: &RunConfig, task: Task) -> Result<()> {
    if cfg.task != task {
        return Err(RgatError::Config(format!("config task is {:?}, command needs {task:?}", cfg.task)));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    fs::create_dir_all(&cli.out_dir).map_err(|e| RgatError::io(&cli.out_dir, e))?;
    match &cli.command {
        Command::TrainLp => {
            let cfg = load_config(cli)?;
            ensure_task(&cfg, Task::LinkPrediction)?;
            let data = LinkDataset::load(&cfg)?;
            let out = train_lp(&cfg, &data)?;
            out.log.write(&cli.out_dir.join("metrics.log"))?;
            out.model
                .checkpoint(cfg.architecture_hash(), out.best_epoch as u64, out.best_metric)
                .save(&checkpoint_path(cli))?;
            write(&cli.out_dir.join("vocab.tsv"), &data.vocab.dump())?;
            let mut report = format!("best_epoch={}\nbest_metric={}\n", out.best_epoch, out.best_metric);
            for (name, split) in [("valid", &data.valid), ("test", &data.test)] {
                if !split.is_empty() {
                    let r = evaluate_lp(&out.model, &data, split, &cfg)?;
                    let _ = write!(report, "\n[{name}]\n{}", r.table());
                }
            }
            write(&cli.out_dir.join("report.txt"), &report)?;
            print!("{report}");
        }
        Command::TrainEc => {
            let cfg = load_config(cli)?;
            ensure_task(&cfg, Task::EntityClassification)?;
            let data = ClassDataset::load(&cfg)?;
            let out = train_ec(&cfg, &data)?;
            out.log.write(&cli.out_dir.join("metrics.log"))?;
            out.model
                .checkpoint(cfg.architecture_hash(), out.best_epoch as u64, out.best_metric)
                .save(&checkpoint_path(cli))?;
            write(&cli.out_dir.join("vocab.tsv"), &data.vocab.dump())?;
            let mut report = format!("best_epoch={}\nbest_metric={}\n", out.best_epoch, out.best_metric);
            for split in [Split::Train, Split::Valid, Split::Test] {
                if data.labels.count(split) > 0 {
                    let acc = evaluate_ec(&out.model, &data, split)?;
                    let _ = writeln!(report, "{}_accuracy={acc}", split.name());
                }
            }
            write(&cli.out_dir.join("report.txt"), &report)?;
            print!("{report}");
        }
        Command::EvalLp(args) => {
            let cfg = load_config(cli)?;
            ensure_task(&cfg, Task::LinkPrediction)?;
            let data = LinkDataset::load(&cfg)?;
            let model = load_lp(&cfg, &data, &checkpoint_path(cli))?;
            let split = match args.split {
                SplitArg::Train => &data.train,
                SplitArg::Valid => &data.valid,
                SplitArg::Test => &data.test,
            };
            let r = evaluate_lp(&model, &data, split, &cfg)?;
            let text = format!("{}\n{}", r.table(), r.machine_lines());
            write(&cli.out_dir.join("eval.txt"), &text)?;
            print!("{text}");
        }
        Command::EvalEc(args) => {
            let cfg = load_config(cli)?;
            ensure_task(&cfg, Task::EntityClassification)?;
            let data = ClassDataset::load(&cfg)?;
            let mut model = EntityClassifier::new(
                &cfg.model_config(),
                data.labels.num_classes(),
                data.vocab.num_entities(),
                data.vocab.num_relations(),
                cfg.seed,
            )?;
            model.load_checkpoint(&Checkpoint::load(&checkpoint_path(cli))?, cfg.architecture_hash())?;
            let split = match args.split {
                SplitArg::Train => Split::Train,
                SplitArg::Valid => Split::Valid,
                SplitArg::Test => Split::Test,
            };
            let acc = evaluate_ec(&model, &data, split)?;
            let text = format!("{}_accuracy={acc}\n", split.name());
            write(&cli.out_dir.join("eval.txt"), &text)?;
            print!("{text}");
        }
        Command::SweepK { channels } => {
            let cfg = load_config(cli)?;
            ensure_task(&cfg, Task::LinkPrediction)?;
            let data = LinkDataset::load(&cfg)?;
            let table = sweep_channels(&cfg, &data, channels);
            let text = table.render();
            write(&cli.out_dir.join("sweep.txt"), &text)?;
            print!("{text}");
        }
        Command::GenSynth(args) => {
            let seed = cli.seed.unwrap_or(0);
            if args.labeled {
                let spec = LabeledSpec {
                    entities: args.entities,
                    classes: args.classes,
                    relations: args.relations,
                    density: args.density,
                    seed,
                    ..LabeledSpec::default()
                };
                generate_labeled(&spec)?.write(&cli.out_dir)?;
            } else {
                let spec = SynthSpec {
                    aspects: args.aspects,
                    relations_per_aspect: args.relations_per_aspect,
                    entities: args.entities,
                    groups: args.groups,
                    density: args.density,
                    permute: args.permute,
                    seed,
                };
                let data = generate_synthetic(&spec)?;
                data.write(&cli.out_dir)?;
                println!(
                    "train={} valid={} test={}",
                    data.train.len(),
                    data.valid.len(),
                    data.test.len()
                );
            }
        }
        Command::Inspect(args) => {
            let cfg = load_config(cli)?;
            ensure_task(&cfg, Task::LinkPrediction)?;
            let data = LinkDataset::load(&cfg)?;
            let model = load_lp(&cfg, &data, &checkpoint_path(cli))?;
            let names: Vec<String> = if args.relations.is_empty() {
                data.vocab.relation_names()[..data.vocab.num_base_relations()].to_vec()
            } else {
                args.relations.clone()
            };
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let summary = channel_attention_summary(&model, &data.graph, &data.vocab, &refs, args.sample, cfg.seed)?;
            let mut text = summary.render();
            if let Some(path) = &args.aspects {
                let aspects = load_aspects(path)?;
                let score = aspect_alignment_score(&summary, &aspects);
                let mut sizes = std::collections::BTreeMap::new();
                for (name, a) in &aspects {
                    if names.contains(name) {
                        *sizes.entry(*a).or_insert(0usize) += 1;
                    }
                }
                let sizes: Vec<usize> = sizes.into_values().collect();
                let chance = alignment_chance_baseline(&sizes, summary.channels(), 10_000, cfg.seed);
                let _ = writeln!(text, "alignment={score}\nchance={chance}");
            }
            if let (Some(s), Some(r)) = (&args.subject, &args.relation) {
                let facts = top_facts(&model, &data.graph, &data.vocab, s, r, args.top_channels, args.top_facts)?;
                let _ = write!(text, "\n{}", facts.render());
            }
            write(&cli.out_dir.join("inspect.txt"), &text)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn load_lp(cfg: &RunConfig, data: &LinkDataset, path: &Path) -> Result<LinkPredictor> {
    let mut model = LinkPredictor::new(
        &cfg.model_config(),
        &cfg.decoder,
        data.vocab.num_entities(),
        data.vocab.num_relations(),
        cfg.seed,
    )?;
    model.load_checkpoint(&Checkpoint::load(path)?, cfg.architecture_hash())?;
    Ok(model)
}
