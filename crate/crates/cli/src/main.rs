//! `ctcspell` command-line driver.
//!
//! Exit codes: 0 success, 2 invalid input or arguments, 3 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ctcspell::corpus::experiment::{
    build_graph, correct_transcripts, decode_utterances, greedy_transcripts, lattice_transcripts,
    speller_vocab, train_acoustic_model, train_speller_on,
};
use ctcspell::corpus::io::{read_pairs, read_transcripts, write_pairs, write_transcripts};
use ctcspell::corpus::{
    expand_dataset, load_decoded, parse_sources, report, run_experiment, save_decoded, score,
    synthesize, CharVocab, CorpusError, ExperimentConfig, Recipe, ScoredRun, SynthData,
};
use ctcspell::ctc::DEFAULT_MAX_PATHS;
use ctcspell::dfsmn::DfsmnModel;
use ctcspell::speller::{SpellerError, SpellerModel};
use ctcspell::wfst::SearchGraph;

#[derive(Parser)]
#[command(
    name = "ctcspell",
    version,
    about = "CTC decoding and transformer spelling correction on a synthetic homophone language"
)]
struct Cli {
    /// Seed for every stochastic step (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat key = value experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Greedy,
    Wfst,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the language, vocabulary and train/test utterances.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the DFSMN acoustic model with CTC.
    TrainAm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Decode a split greedily or through the WFST decoding graph.
    Decode {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        am: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        acoustic_scale: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a pair file from decode outputs. Recipe keys: decode, sources,
    /// out, max_paths.
    Expand {
        #[arg(long)]
        recipe: PathBuf,
    },
    /// Train the speller on a pair file.
    TrainSpeller {
        #[arg(long)]
        pairs: PathBuf,
        /// Vocabulary written by `synth`.
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        passes: Option<usize>,
        #[arg(long)]
        steps_per_pass: Option<usize>,
    },
    /// Correct `id<TAB>hyp` transcripts with a trained speller.
    Correct {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score hypotheses against references; appends a line to --out.
    Score {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long, default_value = "system")]
        system: String,
        #[arg(long, default_value = "test")]
        testset: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare scored systems.
    Report {
        /// Score files written by `score`.
        #[arg(required = true)]
        scores: Vec<PathBuf>,
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long)]
        csv: bool,
    },
    /// Run every stage end to end.
    Experiment {
        #[arg(long)]
        out: PathBuf,
    },
}

/// Bad input detected by the CLI itself.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Invalid>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<CorpusError>() {
            let speller_input = matches!(
                e,
                CorpusError::Speller(SpellerError::Config(_) | SpellerError::TooLong { .. })
            );
            return if e.is_validation() || speller_input {
                2
            } else {
                3
            };
        }
        if let Some(
            SpellerError::Config(_) | SpellerError::TooLong { .. } | SpellerError::EmptyCorpus,
        ) = cause.downcast_ref::<SpellerError>()
        {
            return 2;
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::desk();
    if let Some(path) = &cli.config {
        let r = Recipe::load(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_recipe(&r)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn log(msg: &str) {
    eprintln!("{msg}");
}

fn run(cli: Cli) -> Result<()> {
    let cfg = config(&cli)?;
    match cli.command {
        Command::Synth { out } => {
            let data = synthesize(&cfg)?;
            data.save(&out)?;
            std::fs::write(out.join("config.recipe"), cfg.to_recipe().to_text())?;
            log(&format!(
                "{} train / {} test utterances, {} units, coverage {:.4}",
                data.train.len(),
                data.test.len(),
                data.vocab.units().len(),
                data.vocab.coverage()
            ));
            for w in data.vocab.warnings() {
                log(&format!("warning: {w}"));
            }
        }
        Command::TrainAm { data, out, epochs } => {
            let mut cfg = cfg;
            if let Some(e) = epochs {
                cfg.am_epochs = e;
            }
            let data = SynthData::load(&data)?;
            let (_, rep) = train_acoustic_model(&cfg, &data, Some(&out))?;
            for (i, l) in rep.epoch_losses.iter().enumerate() {
                log(&format!("epoch {}: loss {l:.4}", i + 1));
            }
            if !rep.skipped.is_empty() {
                log(&format!(
                    "skipped {} infeasible utterances",
                    rep.skipped.len()
                ));
            }
        }
        Command::Decode {
            data,
            am,
            split,
            mode,
            beam,
            acoustic_scale,
            out,
        } => {
            let mut cfg = cfg;
            if let Some(b) = beam {
                if b == 0 {
                    bail!(Invalid("beam must be positive".into()));
                }
                cfg.beam = b;
            }
            if let Some(a) = acoustic_scale {
                cfg.acoustic_scale = a;
            }
            let data = SynthData::load(&data)?;
            let model =
                DfsmnModel::load(&am).with_context(|| format!("loading {}", am.display()))?;
            let units = data.vocab.ctc_vocab();
            let utts = if split == Split::Train {
                &data.train
            } else {
                &data.test
            };
            let decoded = match mode {
                Mode::Greedy => decode_utterances(&model, None, utts, &cfg.beam_options())?,
                Mode::Wfst => {
                    let graph = build_graph(&units, &data.text, cfg.lm_order, cfg.lm_discount)?;
                    let search = SearchGraph::new(&graph)?;
                    decode_utterances(&model, Some(&search), utts, &cfg.beam_options())?
                }
            };
            save_decoded(&out, &decoded)?;
            data.vocab.save(&out.join("vocab.txt"))?;
            let hyps = match mode {
                Mode::Greedy => greedy_transcripts(&decoded, &units)?,
                Mode::Wfst => lattice_transcripts(&decoded, &units)?,
            };
            write_transcripts(&out.join("hyp.txt"), &hyps)?;
            log(&format!("decoded {} utterances", hyps.len()));
        }
        Command::Expand { recipe } => {
            let r = Recipe::load(&recipe)?;
            let dir = PathBuf::from(r.require("decode")?);
            let sources = parse_sources(r.require("sources")?)?;
            let out = PathBuf::from(r.require("out")?);
            let max_paths = r.get("max_paths")?.unwrap_or(DEFAULT_MAX_PATHS);
            let decoded = load_decoded(&dir)?;
            let units = CharVocab::load(&dir.join("vocab.txt"))?.ctc_vocab();
            let corpus = expand_dataset(&decoded, &units, &sources, max_paths)?;
            write_pairs(&out, &corpus.pairs)?;
            for (tag, n) in &corpus.tag_counts {
                println!("{tag}\t{n}");
            }
        }
        Command::TrainSpeller {
            pairs,
            vocab,
            out,
            passes,
            steps_per_pass,
        } => {
            let mut cfg = cfg;
            if let Some(p) = passes {
                cfg.passes = p;
            }
            let pairs = read_pairs(&pairs)?;
            if let Some(n) = steps_per_pass {
                if n == 0 {
                    bail!(Invalid("steps per pass must be positive".into()));
                }
                // Express the requested steps as epochs over the pair set.
                cfg.speller_epochs_per_pass =
                    (n * cfg.speller_batch) as f64 / pairs.len().max(1) as f64;
            }
            let vocab = speller_vocab(&CharVocab::load(&vocab)?);
            let (_, rep) = train_speller_on(&cfg, vocab, &pairs, cfg.seed, Some(&out))?;
            log(&format!("validation input CER {:.4}", rep.input_cer));
            for (i, c) in rep.pass_cer.iter().enumerate() {
                println!("pass{}\t{c:.6}", i + 1);
            }
        }
        Command::Correct { model, input, out } => {
            let model = load_speller(&model)?;
            let hyps = read_transcripts(&input)?;
            write_transcripts(&out, &correct_transcripts(&model, &hyps)?)?;
        }
        Command::Score {
            reference,
            hyp,
            system,
            testset,
            out,
        } => {
            let r = score(&read_transcripts(&reference)?, &read_transcripts(&hyp)?)?;
            let t = r.totals;
            println!(
                "CER {:.4}%  S={} I={} D={} N={}",
                100.0 * r.cer(),
                t.sub,
                t.ins,
                t.del,
                t.ref_len
            );
            if let Some(path) = out {
                use std::io::Write;
                let mut f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)?;
                f.write_all(
                    ScoredRun {
                        system,
                        testset,
                        counts: t,
                    }
                    .to_line()
                    .as_bytes(),
                )?;
            }
        }
        Command::Report {
            scores,
            baseline,
            csv,
        } => {
            let mut runs = Vec::new();
            for p in &scores {
                runs.extend(ScoredRun::parse_lines(&std::fs::read_to_string(p)?)?);
            }
            let table = report(&runs, baseline.as_deref())?;
            print!("{}", if csv { table.to_csv() } else { table.to_text() });
        }
        Command::Experiment { out } => {
            let rep = run_experiment(&cfg, &out, &mut log)?;
            print!("{}", rep.table.to_text());
        }
    }
    Ok(())
}

fn load_speller(path: &Path) -> Result<SpellerModel> {
    SpellerModel::load(path).with_context(|| format!("loading {}", path.display()))
}
