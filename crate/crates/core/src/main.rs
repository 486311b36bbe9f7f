use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tapasr::data::write_manifest;
use tapasr::experiments::ablate::{parse_results_csv, results_csv};
use tapasr::experiments::config::DataSource;
use tapasr::experiments::train::final_checkpoint_path;
use tapasr::experiments::{ablate, report, run_evaluate, run_train, AblationConfig, ExperimentConfig};
use tapasr::frontend::SpecAugPolicy;
use tapasr::{Error, Result};

#[derive(Parser)]
#[command(name = "tapasr", version, about = "Encoder-tap transfer learning for Conformer ASR")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Tap depth K for `tap` runs
    #[arg(long)]
    tap_k: Option<usize>,
    /// Freeze (true) or update (false) the tapped prefix
    #[arg(long)]
    freeze: Option<bool>,
    /// Embedding SpecAug widths as FxT, or `none`
    #[arg(long, value_name = "FxT")]
    embed_specaug: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Decoding beam size
    #[arg(long)]
    beam: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write every fixture split named in the config as WAV files plus a manifest
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Directory for manifests and audio (default: <output_dir>/data)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model; writes metrics.csv and checkpoints under output_dir
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Continue from the latest periodic checkpoint
        #[arg(long)]
        resume: bool,
    },
    /// Decode a data split with a checkpoint and score it
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Defaults to <output_dir>/final.ckpt
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// CTC weight used during decoding
        #[arg(long)]
        ctc_weight: Option<f64>,
    },
    /// Run the (K, freeze, SpecAug) grid plus reference rows
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Add relative improvements to a results table and render markdown
    Report {
        /// Ablation config whose output_dir holds results.csv
        #[arg(long, required_unless_present = "results")]
        config: Option<PathBuf>,
        #[arg(long)]
        results: Option<PathBuf>,
        /// Output directory (default: next to the results file)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn apply(cfg: &mut ExperimentConfig, o: &Overrides) -> Result<()> {
    if let Some(seed) = o.seed {
        cfg.optimizer.seed = seed;
    }
    if let Some(beam) = o.beam {
        cfg.decode.beam_size = beam;
    }
    if o.tap_k.is_some() || o.freeze.is_some() || o.embed_specaug.is_some() {
        let t = cfg.transfer.get_or_insert_with(Default::default);
        if let Some(k) = o.tap_k {
            t.tap_layer_k = k;
        }
        if let Some(f) = o.freeze {
            t.freeze_prefix = f;
        }
        if let Some(s) = &o.embed_specaug {
            t.embed_specaug = if s.eq_ignore_ascii_case("none") {
                None
            } else {
                Some(SpecAugPolicy::parse_widths(s).ok_or_else(|| Error::Config(format!("--embed-specaug {s:?}: expected FxT")))?)
            };
        }
    }
    cfg.validate()
}

fn load(path: &PathBuf, o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    apply(&mut cfg, o)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.join("data"));
            let splits = [("train", Some(&cfg.data.train)), ("dev", cfg.data.dev.as_ref()), ("test", cfg.data.test.as_ref())];
            for (name, src) in splits {
                let Some(src @ DataSource::Fixture { .. }) = src else { continue };
                let utts = src.load()?;
                let manifest = out.join(format!("{name}.tsv"));
                write_manifest(&manifest, &utts, &out.join(name))?;
                println!("{name}: {} utterances -> {}", utts.len(), manifest.display());
            }
        }
        Command::Train {
            config,
            overrides,
            resume,
        } => {
            let cfg = load(&config, &overrides)?;
            let s = run_train(&cfg, resume)?;
            if let Some(m) = s.metrics.last() {
                println!("step {} loss {:.4} (ctc {:.4}, att {:.4})", m.step, m.loss, m.ctc, m.att);
            }
            println!("checkpoint: {}", s.final_checkpoint.display());
        }
        Command::Evaluate {
            config,
            overrides,
            checkpoint,
            split,
            ctc_weight,
        } => {
            let mut cfg = load(&config, &overrides)?;
            if let Some(w) = ctc_weight {
                cfg.decode.ctc_weight = w;
            }
            let src = match split.as_str() {
                "train" => Some(&cfg.data.train),
                "dev" => cfg.data.dev.as_ref(),
                "test" => cfg.data.test.as_ref(),
                other => return Err(Error::Config(format!("unknown split {other:?} (train, dev or test)"))),
            }
            .ok_or_else(|| Error::Config(format!("config has no {split} data")))?;
            let ckpt = checkpoint.unwrap_or_else(|| final_checkpoint_path(&cfg.output_dir));
            let dir = cfg.output_dir.join(format!("eval_{split}"));
            let r = run_evaluate(&ckpt, &src.load()?, &cfg.frontend, &cfg.decode, cfg.unit, Some(&dir))?;
            println!(
                "{split}: {:.2}% ({} sub, {} del, {} ins over {} reference units); report in {}",
                r.wer,
                r.substitutions,
                r.deletions,
                r.insertions,
                r.ref_tokens,
                dir.display()
            );
        }
        Command::Ablate { config, overrides } => {
            let mut cfg = AblationConfig::load(&config)?;
            apply(&mut cfg.target, &overrides)?;
            if let Some(seed) = overrides.seed {
                cfg.source.optimizer.seed = seed;
            }
            let rows = ablate(&cfg)?;
            print!("{}", results_csv(&rows));
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            if failed > 0 {
                eprintln!("{failed} cell(s) failed; see {}", cfg.output_dir.join("errors.log").display());
            }
        }
        Command::Report { config, results, out } => {
            let path = match (results, config) {
                (Some(p), _) => p,
                (None, Some(c)) => AblationConfig::load(&c)?.output_dir.join("results.csv"),
                (None, None) => unreachable!("clap enforces one of --config/--results"),
            };
            let text = fs::read_to_string(&path)?;
            let (md, csv) = report(&parse_results_csv(&text, &path)?)?;
            let dir = out.unwrap_or_else(|| path.parent().map(PathBuf::from).unwrap_or_default());
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("report.md"), &md)?;
            fs::write(dir.join("report.csv"), &csv)?;
            print!("{md}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
