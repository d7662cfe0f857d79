//! Pipeline stages and the end-to-end desk-scale experiment.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use numerics::Rng;

use super::expand::{expand_dataset, words_to_units, DecodedUtterance, PairedCorpus, Source};
use super::features::{stack_frames, synth_features, ChannelConfig};
use super::io::{save_utterances, write_pairs, write_transcripts, Pair, Utterance};
use super::language::{build_char_vocab, mix, synth_language, CharVocab, LanguageConfig, Lexicon};
use super::recipe::Recipe;
use super::scoring::{report, score, ComparisonTable, ScoredRun};
use super::{CorpusError, Result};
use crate::ctc::{greedy_search, Vocab};
use crate::dfsmn::{
    am_forward, train_am, AmExample, AmTrainOptions, AmTrainReport, DfsmnConfig, DfsmnLayerConfig,
    DfsmnModel,
};
use crate::speller::{
    train_speller, SgdrSchedule, SpellerModel, SpellerOptimizer, SpellerPair, SpellerReport,
    SpellerTrainOptions, SpellerVocab, TransformerConfig,
};
use crate::wfst::{
    decoding_graph_from_parts, BeamOptions, Fst, NgramCounts, SearchGraph, WfstError,
};

/// Every knob of the experiment. Field names double as recipe keys.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub language: LanguageConfig,
    pub vocab_size: usize,
    pub channel: ChannelConfig,
    pub train_utts: usize,
    pub test_utts: usize,
    pub am_layers: usize,
    pub am_hidden: usize,
    pub am_proj: usize,
    pub am_relu: usize,
    pub am_context: usize,
    pub am_epochs: usize,
    pub am_lr: f64,
    pub am_lr_decay: f64,
    pub am_batch: usize,
    pub lm_order: usize,
    pub lm_discount: f64,
    pub beam: usize,
    pub acoustic_scale: f64,
    pub lattice_beam: f64,
    pub nbest: usize,
    pub speller: TransformerConfig,
    pub passes: usize,
    pub speller_batch: usize,
    /// Epochs over the pair set per pass; fixes the steps per pass.
    pub speller_epochs_per_pass: f64,
    pub eta_max: f64,
    pub eta_min: f64,
    pub speller_momentum: f64,
    /// Adam instead of momentum SGD under the same schedule.
    pub speller_adam: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Five thousand utterances; AM and speller training fit in a few CPU
    /// minutes. The sentence pool is exactly the utterances, so the language
    /// model and the speller learn from the same training transcripts.
    pub fn desk() -> Self {
        Self {
            seed: 1,
            language: LanguageConfig {
                n_sentences: 5000,
                ..LanguageConfig::default()
            },
            vocab_size: 50,
            channel: ChannelConfig::default(),
            train_utts: 4500,
            test_utts: 500,
            am_layers: 2,
            am_hidden: 96,
            am_proj: 48,
            am_relu: 96,
            am_context: 0,
            am_epochs: 6,
            am_lr: 0.05,
            am_lr_decay: 0.8,
            am_batch: 8,
            lm_order: 3,
            lm_discount: 0.7,
            beam: 32,
            acoustic_scale: 3.0,
            lattice_beam: 8.0,
            nbest: 5,
            speller: TransformerConfig {
                layers: 2,
                d_model: 32,
                d_ff: 128,
                heads: 4,
                d_k: 8,
                d_v: 8,
                dropout: 0.1,
                max_len: 32,
            },
            passes: 4,
            speller_batch: 32,
            speller_epochs_per_pass: 4.0,
            eta_max: 0.002,
            eta_min: 0.00002,
            speller_momentum: 0.9,
            speller_adam: true,
        }
    }

    /// Overrides fields named in `r`; unknown keys are an error.
    pub fn apply_recipe(&mut self, r: &Recipe) -> Result<()> {
        for key in r.keys() {
            match key {
                "seed" => r.apply(key, &mut self.seed)?,
                "n_chars" => r.apply(key, &mut self.language.n_chars)?,
                "n_classes" => r.apply(key, &mut self.language.n_classes)?,
                "grammar_order" => r.apply(key, &mut self.language.order)?,
                "n_sentences" => r.apply(key, &mut self.language.n_sentences)?,
                "min_len" => r.apply(key, &mut self.language.min_len)?,
                "max_len" => r.apply(key, &mut self.language.max_len)?,
                "branching" => r.apply(key, &mut self.language.branching)?,
                "zipf_exponent" => r.apply(key, &mut self.language.zipf_exponent)?,
                "topics" => r.apply(key, &mut self.language.topics)?,
                "vocab_size" => r.apply(key, &mut self.vocab_size)?,
                "feature_dim" => r.apply(key, &mut self.channel.dim)?,
                "noise" => r.apply(key, &mut self.channel.noise)?,
                "train_utts" => r.apply(key, &mut self.train_utts)?,
                "test_utts" => r.apply(key, &mut self.test_utts)?,
                "am_layers" => r.apply(key, &mut self.am_layers)?,
                "am_hidden" => r.apply(key, &mut self.am_hidden)?,
                "am_proj" => r.apply(key, &mut self.am_proj)?,
                "am_relu" => r.apply(key, &mut self.am_relu)?,
                "am_context" => r.apply(key, &mut self.am_context)?,
                "am_epochs" => r.apply(key, &mut self.am_epochs)?,
                "am_lr" => r.apply(key, &mut self.am_lr)?,
                "am_lr_decay" => r.apply(key, &mut self.am_lr_decay)?,
                "am_batch" => r.apply(key, &mut self.am_batch)?,
                "lm_order" => r.apply(key, &mut self.lm_order)?,
                "lm_discount" => r.apply(key, &mut self.lm_discount)?,
                "beam" => r.apply(key, &mut self.beam)?,
                "acoustic_scale" => r.apply(key, &mut self.acoustic_scale)?,
                "lattice_beam" => r.apply(key, &mut self.lattice_beam)?,
                "nbest" => r.apply(key, &mut self.nbest)?,
                "speller_layers" => r.apply(key, &mut self.speller.layers)?,
                "speller_d_model" => r.apply(key, &mut self.speller.d_model)?,
                "speller_d_ff" => r.apply(key, &mut self.speller.d_ff)?,
                "speller_heads" => r.apply(key, &mut self.speller.heads)?,
                "speller_d_k" => r.apply(key, &mut self.speller.d_k)?,
                "speller_d_v" => r.apply(key, &mut self.speller.d_v)?,
                "speller_dropout" => r.apply(key, &mut self.speller.dropout)?,
                "speller_max_len" => r.apply(key, &mut self.speller.max_len)?,
                "passes" => r.apply(key, &mut self.passes)?,
                "speller_batch" => r.apply(key, &mut self.speller_batch)?,
                "speller_epochs_per_pass" => r.apply(key, &mut self.speller_epochs_per_pass)?,
                "eta_max" => r.apply(key, &mut self.eta_max)?,
                "eta_min" => r.apply(key, &mut self.eta_min)?,
                "speller_momentum" => r.apply(key, &mut self.speller_momentum)?,
                "speller_adam" => r.apply(key, &mut self.speller_adam)?,
                other => return Err(CorpusError::Config(format!("unknown recipe key {other}"))),
            }
        }
        Ok(())
    }

    pub fn to_recipe(&self) -> Recipe {
        let mut r = Recipe::default();
        let l = &self.language;
        let s = &self.speller;
        r.set("seed", self.seed);
        r.set("n_chars", l.n_chars);
        r.set("n_classes", l.n_classes);
        r.set("grammar_order", l.order);
        r.set("n_sentences", l.n_sentences);
        r.set("min_len", l.min_len);
        r.set("max_len", l.max_len);
        r.set("branching", l.branching);
        r.set("zipf_exponent", l.zipf_exponent);
        r.set("topics", l.topics);
        r.set("vocab_size", self.vocab_size);
        r.set("feature_dim", self.channel.dim);
        r.set("noise", self.channel.noise);
        r.set("train_utts", self.train_utts);
        r.set("test_utts", self.test_utts);
        r.set("am_layers", self.am_layers);
        r.set("am_hidden", self.am_hidden);
        r.set("am_proj", self.am_proj);
        r.set("am_relu", self.am_relu);
        r.set("am_context", self.am_context);
        r.set("am_epochs", self.am_epochs);
        r.set("am_lr", self.am_lr);
        r.set("am_lr_decay", self.am_lr_decay);
        r.set("am_batch", self.am_batch);
        r.set("lm_order", self.lm_order);
        r.set("lm_discount", self.lm_discount);
        r.set("beam", self.beam);
        r.set("acoustic_scale", self.acoustic_scale);
        r.set("lattice_beam", self.lattice_beam);
        r.set("nbest", self.nbest);
        r.set("speller_layers", s.layers);
        r.set("speller_d_model", s.d_model);
        r.set("speller_d_ff", s.d_ff);
        r.set("speller_heads", s.heads);
        r.set("speller_d_k", s.d_k);
        r.set("speller_d_v", s.d_v);
        r.set("speller_dropout", s.dropout);
        r.set("speller_max_len", s.max_len);
        r.set("passes", self.passes);
        r.set("speller_batch", self.speller_batch);
        r.set("speller_epochs_per_pass", self.speller_epochs_per_pass);
        r.set("eta_max", self.eta_max);
        r.set("eta_min", self.eta_min);
        r.set("speller_momentum", self.speller_momentum);
        r.set("speller_adam", self.speller_adam);
        r
    }

    pub fn beam_options(&self) -> BeamOptions {
        BeamOptions {
            beam_width: Some(self.beam),
            acoustic_scale: self.acoustic_scale,
            lattice_beam: Some(self.lattice_beam),
        }
    }

    pub fn am_config(&self, output_dim: usize) -> DfsmnConfig {
        let layer = DfsmnLayerConfig {
            hidden_dim: self.am_hidden,
            proj_dim: self.am_proj,
            look_back: self.am_context,
            look_ahead: self.am_context,
            stride_back: 1,
            stride_ahead: 1,
        };
        DfsmnConfig {
            input_dim: STACK_WIDTH * self.channel.dim,
            layers: vec![layer; self.am_layers],
            relu_dims: [self.am_relu, self.am_relu],
            output_dim,
        }
    }

    pub fn am_options(&self) -> AmTrainOptions {
        AmTrainOptions {
            epochs: self.am_epochs,
            learning_rate: self.am_lr,
            lr_decay: self.am_lr_decay,
            batch_size: self.am_batch,
            clip_norm: 5.0,
            seed: mix(self.seed, &[4]),
        }
    }
}

/// Frames spliced per stacked frame (2 + 1 + 2).
pub const STACK_WIDTH: usize = 5;
pub const DOWNSAMPLE: usize = 3;

/// Synthesized corpus: the lexicon, folded LM text, unit vocabulary and the
/// train/test utterances (folded references, stacked features).
#[derive(Clone, Debug)]
pub struct SynthData {
    pub lexicon: Lexicon,
    pub text: Vec<String>,
    pub vocab: CharVocab,
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl SynthData {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.lexicon.save(&dir.join("lexicon.txt"))?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        std::fs::write(
            dir.join("text.txt"),
            self.text
                .iter()
                .map(|s| format!("{s}\n"))
                .collect::<String>(),
        )?;
        save_utterances(dir, "train", &self.train)?;
        save_utterances(dir, "test", &self.test)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("text.txt"))?;
        Ok(Self {
            lexicon: Lexicon::load(&dir.join("lexicon.txt"))?,
            vocab: CharVocab::load(&dir.join("vocab.txt"))?,
            text: text
                .lines()
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect(),
            train: super::io::load_utterances(dir, "train")?,
            test: super::io::load_utterances(dir, "test")?,
        })
    }
}

/// Generates the language, folds it to `vocab_size` units and renders the
/// first `train_utts` and last `test_utts` sentences through the channel.
/// The LM text is every sentence except the test ones.
pub fn synthesize(cfg: &ExperimentConfig) -> Result<SynthData> {
    let n = cfg.language.n_sentences;
    if cfg.train_utts + cfg.test_utts > n || cfg.train_utts == 0 || cfg.test_utts == 0 {
        return Err(CorpusError::Config(format!(
            "need 0 < train_utts + test_utts <= n_sentences ({n})"
        )));
    }
    let (lexicon, sentences) = synth_language(mix(cfg.seed, &[1]), &cfg.language)?;
    let lm_raw = &sentences[..n - cfg.test_utts];
    let vocab = build_char_vocab(lm_raw, &lexicon, cfg.vocab_size)?;
    let render = |i: usize| -> Result<Utterance> {
        let raw = synth_features(
            &lexicon,
            &sentences[i],
            mix(cfg.seed, &[3, i as u64]),
            &cfg.channel,
        )?;
        Ok(Utterance {
            id: format!("utt{i:06}"),
            reference: vocab.fold_text(&sentences[i]),
            features: stack_frames(&raw, 2, 2, DOWNSAMPLE)?,
        })
    };
    let train = (0..cfg.train_utts)
        .map(render)
        .collect::<Result<Vec<_>>>()?;
    let test = (n - cfg.test_utts..n)
        .map(render)
        .collect::<Result<Vec<_>>>()?;
    let text = lm_raw.iter().map(|s| vocab.fold_text(s)).collect();
    Ok(SynthData {
        lexicon,
        text,
        vocab,
        train,
        test,
    })
}

fn encode(units: &Vocab, s: &str) -> Result<Vec<usize>> {
    s.chars()
        .map(|c| {
            units
                .id(&c.to_string())
                .ok_or_else(|| CorpusError::Vocab(format!("{c} is not a unit")))
        })
        .collect()
}

pub fn am_examples(utts: &[Utterance], units: &Vocab) -> Result<Vec<AmExample>> {
    utts.iter()
        .map(|u| {
            Ok(AmExample {
                id: u.id.clone(),
                features: u.features.clone(),
                target: encode(units, &u.reference)?,
            })
        })
        .collect()
}

pub fn train_acoustic_model(
    cfg: &ExperimentConfig,
    data: &SynthData,
    checkpoint: Option<&Path>,
) -> Result<(DfsmnModel, AmTrainReport)> {
    let units = data.vocab.ctc_vocab();
    let mut rng = Rng::seed(mix(cfg.seed, &[5]));
    let mut model = DfsmnModel::new(cfg.am_config(units.width()), &mut rng)?;
    let examples = am_examples(&data.train, &units)?;
    let report = train_am(&mut model, &examples, &cfg.am_options(), checkpoint)?;
    Ok((model, report))
}

/// `S = T ∘ min(det(L ∘ G))` with an identity lexicon over the units and an
/// n-gram grammar estimated on `text`.
pub fn build_graph(units: &Vocab, text: &[String], order: usize, discount: f64) -> Result<Fst> {
    let sentences: Vec<Vec<u32>> = text
        .iter()
        .map(|s| encode(units, s).map(|ids| ids.into_iter().map(|i| i as u32).collect()))
        .collect::<Result<_>>()?;
    let counts = NgramCounts::from_sentences(&sentences, order);
    let prons: Vec<Vec<usize>> = (0..units.len()).map(|i| vec![i]).collect();
    Ok(decoding_graph_from_parts(
        units.len(),
        &prons,
        &counts,
        discount,
    )?)
}

/// Posteriors for every utterance, plus a lattice when a graph is given.
pub fn decode_utterances(
    model: &DfsmnModel,
    graph: Option<&SearchGraph<'_>>,
    utts: &[Utterance],
    opts: &BeamOptions,
) -> Result<Vec<DecodedUtterance>> {
    utts.iter()
        .map(|u| {
            let post = am_forward(model, &u.features)?;
            let lattice = match graph {
                Some(g) => Some(match g.decode(&post, opts) {
                    // Histogram pruning can strand every hypothesis; redo
                    // that utterance without it.
                    Err(WfstError::EmptyLattice) => g.decode(
                        &post,
                        &BeamOptions {
                            beam_width: None,
                            ..opts.clone()
                        },
                    )?,
                    other => other?,
                }),
                None => None,
            };
            Ok(DecodedUtterance {
                id: u.id.clone(),
                reference: u.reference.clone(),
                posterior: Some(post),
                lattice,
            })
        })
        .collect()
}

/// Greedy 1-best transcripts.
pub fn greedy_transcripts(
    decoded: &[DecodedUtterance],
    units: &Vocab,
) -> Result<Vec<(String, String)>> {
    decoded
        .iter()
        .map(|d| {
            let post = d
                .posterior
                .as_ref()
                .ok_or_else(|| CorpusError::MissingArtifact(format!("posteriors for {}", d.id)))?;
            Ok((d.id.clone(), spell(units, &greedy_search(post).1)))
        })
        .collect()
}

/// Lattice 1-best transcripts; utterances without a lattice fall back to
/// the greedy transcript.
pub fn lattice_transcripts(
    decoded: &[DecodedUtterance],
    units: &Vocab,
) -> Result<Vec<(String, String)>> {
    let greedy = greedy_transcripts(decoded, units)?;
    Ok(decoded
        .iter()
        .zip(greedy)
        .map(
            |(d, g)| match d.lattice.as_ref().and_then(|l| l.best_path()) {
                Some(p) => (d.id.clone(), spell(units, &words_to_units(&p.olabels))),
                None => g,
            },
        )
        .collect())
}

fn spell(units: &Vocab, ids: &[usize]) -> String {
    ids.iter().filter_map(|&i| units.token(i)).collect()
}

pub fn speller_vocab(vocab: &CharVocab) -> SpellerVocab {
    let tokens: Vec<String> = vocab.units().iter().map(|c| c.to_string()).collect();
    SpellerVocab::from_corpus([tokens.as_slice()])
}

pub fn speller_pairs(model: &SpellerModel, pairs: &[Pair]) -> Vec<SpellerPair> {
    let chars = |s: &str| -> Vec<String> { s.chars().map(|c| c.to_string()).collect() };
    pairs
        .iter()
        .map(|p| SpellerPair {
            src: model.vocab().encode(&chars(&p.hyp)),
            tgt: model.vocab().encode(&chars(&p.reference)),
        })
        .collect()
}

pub fn speller_options(
    cfg: &ExperimentConfig,
    n_pairs: usize,
    seed: u64,
) -> Result<SpellerTrainOptions> {
    let per_pass = (n_pairs as f64 * cfg.speller_epochs_per_pass / cfg.speller_batch.max(1) as f64)
        .ceil() as usize;
    let schedule = SgdrSchedule::new(cfg.passes, per_pass.max(1), cfg.eta_max, cfg.eta_min)?;
    let optimizer = if cfg.speller_adam {
        SpellerOptimizer::Adam
    } else {
        SpellerOptimizer::Sgd {
            momentum: cfg.speller_momentum,
        }
    };
    Ok(SpellerTrainOptions {
        batch_size: cfg.speller_batch,
        optimizer,
        ..SpellerTrainOptions::new(schedule, seed)
    })
}

/// Trains a fresh speller on `pairs`, checkpointing each pass to `dir`.
pub fn train_speller_on(
    cfg: &ExperimentConfig,
    vocab: SpellerVocab,
    pairs: &[Pair],
    seed: u64,
    dir: Option<&Path>,
) -> Result<(SpellerModel, SpellerReport)> {
    let mut model = SpellerModel::new(cfg.speller, vocab, &mut Rng::seed(seed))?;
    let data = speller_pairs(&model, pairs);
    let opts = speller_options(cfg, data.len(), mix(seed, &[1]))?;
    let report = train_speller(&mut model, &data, &opts, dir)?;
    Ok((model, report))
}

/// Greedy corrections; hypotheses too long for the model pass through.
pub fn correct_transcripts(
    model: &SpellerModel,
    hyps: &[(String, String)],
) -> Result<Vec<(String, String)>> {
    hyps.iter()
        .map(|(id, h)| {
            let toks: Vec<String> = h.chars().map(|c| c.to_string()).collect();
            if toks.len() + 1 > model.config().max_len {
                return Ok((id.clone(), h.clone()));
            }
            let (out, _) = model.correct_tokens(&toks)?;
            Ok((id.clone(), out.concat()))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub coverage: f64,
    pub am: AmTrainReport,
    /// Test-set scores: `greedy`, `wfst`, `greedy+speller`, `wfst+speller`,
    /// `wfst+speller-nbest<k>`.
    pub runs: Vec<ScoredRun>,
    pub table: ComparisonTable,
    pub pairs: BTreeMap<String, PairedCorpus>,
    pub spellers: BTreeMap<String, SpellerReport>,
    /// Wall-clock seconds per stage (not written to disk).
    pub timings: Vec<(String, f64)>,
}

impl ExperimentReport {
    pub fn run(&self, system: &str) -> Option<&ScoredRun> {
        self.runs.iter().find(|r| r.system == system)
    }
}

/// Runs every stage, writing artifacts under `out`:
/// `data/`, `am.ckpt`, `hyp/`, `pairs/`, `speller/<name>/pass<k>.ckpt`,
/// `scores.tsv`, `report.txt`, `report.csv`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out: &Path,
    progress: &mut dyn FnMut(&str),
) -> Result<ExperimentReport> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.recipe"), cfg.to_recipe().to_text())?;
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<(String, f64)>, progress: &mut dyn FnMut(&str)| {
        let secs = clock.elapsed().as_secs_f64();
        progress(&format!("{name}: {secs:.1}s"));
        timings.push((name.to_string(), secs));
        clock = Instant::now();
    };

    let data = synthesize(cfg)?;
    data.save(&out.join("data"))?;
    for w in data.vocab.warnings() {
        progress(&format!("warning: {w}"));
    }
    lap("synth", &mut timings, progress);

    let units = data.vocab.ctc_vocab();
    let (am, am_report) = train_acoustic_model(cfg, &data, Some(&out.join("am.ckpt")))?;
    progress(&format!(
        "am loss {:.3} -> {:.3}",
        am_report.initial_loss, am_report.final_loss
    ));
    lap("train-am", &mut timings, progress);

    let graph = build_graph(&units, &data.text, cfg.lm_order, cfg.lm_discount)?;
    progress(&format!(
        "graph: {} states, {} arcs",
        graph.num_states(),
        graph.num_arcs()
    ));
    let search = SearchGraph::new(&graph)?;
    let opts = cfg.beam_options();
    let train_dec = decode_utterances(&am, Some(&search), &data.train, &opts)?;
    let test_dec = decode_utterances(&am, Some(&search), &data.test, &opts)?;
    lap("decode", &mut timings, progress);

    let hyp_dir = out.join("hyp");
    std::fs::create_dir_all(&hyp_dir)?;
    let refs: Vec<(String, String)> = data
        .test
        .iter()
        .map(|u| (u.id.clone(), u.reference.clone()))
        .collect();
    let greedy = greedy_transcripts(&test_dec, &units)?;
    let wfst = lattice_transcripts(&test_dec, &units)?;
    write_transcripts(&hyp_dir.join("greedy.txt"), &greedy)?;
    write_transcripts(&hyp_dir.join("wfst.txt"), &wfst)?;

    let pair_dir = out.join("pairs");
    std::fs::create_dir_all(&pair_dir)?;
    let nbest_name = format!("nbest{}", cfg.nbest);
    let recipes = [
        ("greedy", vec![Source::Greedy]),
        ("wfst", vec![Source::Nbest(1)]),
        (nbest_name.as_str(), vec![Source::Nbest(cfg.nbest)]),
    ];
    let mut pairs = BTreeMap::new();
    for (name, recipe) in &recipes {
        let p = expand_dataset(&train_dec, &units, recipe, crate::ctc::DEFAULT_MAX_PATHS)?;
        write_pairs(&pair_dir.join(format!("{name}.tsv")), &p.pairs)?;
        progress(&format!("pairs {name}: {}", p.pairs.len()));
        pairs.insert(name.to_string(), p);
    }
    lap("expand", &mut timings, progress);

    let mut runs = vec![
        ScoredRun {
            system: "greedy".into(),
            testset: "test".into(),
            counts: score(&refs, &greedy)?.totals,
        },
        ScoredRun {
            system: "wfst".into(),
            testset: "test".into(),
            counts: score(&refs, &wfst)?.totals,
        },
    ];
    let mut spellers = BTreeMap::new();
    let jobs = [
        ("greedy", &greedy, "greedy+speller"),
        ("wfst", &wfst, "wfst+speller"),
    ];
    let nbest_system = format!("wfst+speller-{nbest_name}");
    let jobs = jobs
        .iter()
        .copied()
        .chain([(nbest_name.as_str(), &wfst, nbest_system.as_str())]);
    for (k, (pair_set, inputs, system)) in jobs.enumerate() {
        let dir = out.join("speller").join(pair_set);
        let seed = mix(cfg.seed, &[6, k as u64]);
        let (model, rep) = train_speller_on(
            cfg,
            speller_vocab(&data.vocab),
            &pairs[pair_set].pairs,
            seed,
            Some(&dir),
        )?;
        let pass_cer: Vec<String> = rep.pass_cer.iter().map(|c| format!("{:.4}", c)).collect();
        progress(&format!(
            "speller {pair_set}: valid input CER {:.4}, passes [{}]",
            rep.input_cer,
            pass_cer.join(", ")
        ));
        let corrected = correct_transcripts(&model, inputs)?;
        write_transcripts(&hyp_dir.join(format!("{system}.txt")), &corrected)?;
        runs.push(ScoredRun {
            system: system.into(),
            testset: "test".into(),
            counts: score(&refs, &corrected)?.totals,
        });
        spellers.insert(pair_set.to_string(), rep);
        lap(&format!("speller-{pair_set}"), &mut timings, progress);
    }

    std::fs::write(
        out.join("scores.tsv"),
        runs.iter().map(ScoredRun::to_line).collect::<String>(),
    )?;
    let table = report(&runs, Some("greedy"))?;
    std::fs::write(out.join("report.txt"), table.to_text())?;
    std::fs::write(out.join("report.csv"), table.to_csv())?;
    Ok(ExperimentReport {
        coverage: data.vocab.coverage(),
        am: am_report,
        runs,
        table,
        pairs,
        spellers,
        timings,
    })
}
