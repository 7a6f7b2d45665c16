use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use grasame::decode::DecodeMode;
use grasame::hiergraph::{self, edge_counts, EdgeCounts};
use grasame::ingest::{
    build_vocabulary, linearize, linearize_surface, parse_dataset, tokenize, write_dataset, Example, Vocabulary,
};
use grasame::metrics::{chrf_pp, corpus_bleu};
use grasame::model::{Model, Variation};
use grasame::synthetic::{generate_corpus, SyntheticConfig};
use grasame::tensor::checkpoint;
use grasame::training::{generate_all, prepare_all, sweep_lambda, train as train_model, FreezeMode, PreparedExample};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{RunConfig, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE, VOCAB_FILE};
use crate::{CliError, TrainFlags};

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// Config file, then flags. Rejects combinations that make no sense.
pub fn merge(flags: &TrainFlags) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(flags.config.as_deref())?;
    if let Some(v) = flags.variation {
        cfg.model.variation = v.into();
    }
    if let Some(g) = flags.gnn {
        if cfg.model.variation == Variation::Base {
            return Err(CliError::Usage("--gnn has no effect with variation `base`".into()));
        }
        cfg.model.gnn.family = g.into();
    }
    if flags.freeze_base {
        if cfg.model.variation == Variation::Base {
            return Err(CliError::Usage("--freeze-base with variation `base` leaves nothing to train".into()));
        }
        cfg.train.freeze_mode = FreezeMode::FreezeBase;
    }
    if flags.no_gr_loss {
        cfg.train.disable_gr_loss = true;
    }
    if flags.unidirectional {
        cfg.train.unidirectional_edges = true;
    }
    if let Some(p) = &flags.data {
        cfg.paths.train_data = Some(p.clone());
    }
    if let Some(p) = &flags.valid {
        cfg.paths.valid_data = Some(p.clone());
    }
    if let Some(p) = &flags.out {
        cfg.paths.output_dir = p.clone();
    }
    if let Some(e) = flags.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = flags.lr {
        cfg.train.lr = lr;
    }
    if let Some(s) = flags.seed {
        cfg.train.seed = s;
    }
    cfg.train.validate()?;
    if cfg.train.epochs == 0 {
        return Err(CliError::Usage("epochs must be ≥ 1".into()));
    }
    Ok(cfg)
}

pub fn synth(out: &Path, num_examples: usize, seed: u64, min_triples: usize, max_triples: usize) -> Result<(), CliError> {
    if min_triples == 0 || min_triples > max_triples {
        return Err(CliError::Usage(format!("bad triple range {min_triples}..={max_triples}")));
    }
    let corpus = generate_corpus(&SyntheticConfig {
        num_examples,
        min_triples,
        max_triples,
        seed,
        ..Default::default()
    });
    write_dataset(out, &corpus)?;
    Ok(())
}

fn load_data(path: &Path) -> Result<Vec<Example>, CliError> {
    let data = parse_dataset(path)?;
    if data.is_empty() {
        return Err(CliError::Data(format!("{}: no examples", path.display())));
    }
    Ok(data)
}

pub fn build_graph_dump(data: &[Example], prompt: &str, max_len: usize, bidirectional: bool) -> Result<serde_json::Value, CliError> {
    let vocab = build_vocabulary(data, prompt, 1)?;
    let mut total = EdgeCounts::default();
    let mut graphs = Vec::with_capacity(data.len());
    for (i, ex) in data.iter().enumerate() {
        let input = linearize(ex, prompt, &vocab, max_len).map_err(|e| CliError::Data(format!("example {i}: {e}")))?;
        let graph = hiergraph::build_graph(&input, bidirectional)?;
        total.merge(&edge_counts(&graph));
        let mut dump = graph.to_json();
        dump["tokens"] = json!(linearize_surface(ex, prompt)?.surface);
        graphs.push(dump);
    }
    Ok(json!({
        "bidirectional": bidirectional,
        "num_examples": data.len(),
        "graphs": graphs,
        "summary": summary_json(&total),
    }))
}

fn summary_json(c: &EdgeCounts) -> serde_json::Value {
    json!({
        "forward_non_self": c.forward_non_self(),
        "directed_non_self": c.directed_non_self(),
        "counts": c,
    })
}

pub fn build_graph(data: &Path, out: &Path, unidirectional: bool, config: Option<&Path>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let examples = load_data(data)?;
    let dump = build_graph_dump(&examples, &cfg.prompt, cfg.model.max_sequence_length, !unidirectional)?;
    write_file(out, &serde_json::to_string(&dump).expect("dump serializes"))?;
    println!("{}", serde_json::to_string_pretty(&dump["summary"]).expect("summary serializes"));
    Ok(())
}

/// Vocabulary, model and prepared data for a training run.
struct Setup {
    vocab: Vocabulary,
    model: Model,
    train: Vec<PreparedExample>,
    valid: Vec<PreparedExample>,
}

fn setup(cfg: &mut RunConfig) -> Result<Setup, CliError> {
    let train_path = cfg
        .paths
        .train_data
        .clone()
        .ok_or_else(|| CliError::Usage("no training data: set paths.train_data or pass --data".into()))?;
    let train_data = load_data(&train_path)?;
    let valid_data = match &cfg.paths.valid_data {
        Some(p) => load_data(p)?,
        None => Vec::new(),
    };
    let vocab = build_vocabulary(&train_data, &cfg.prompt, cfg.min_count)?;
    cfg.model.vocab_size = vocab.len();
    cfg.model.sync_gnn_dims();
    let model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    let bidir = cfg.bidirectional();
    let train = prepare_all(&train_data, &vocab, &cfg.prompt, &model, bidir)?;
    let valid = prepare_all(&valid_data, &vocab, &cfg.prompt, &model, bidir)?;
    Ok(Setup {
        vocab,
        model,
        train,
        valid,
    })
}

fn output_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.paths.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let mut cfg = cfg.clone();
    let Setup {
        vocab,
        mut model,
        train,
        valid,
    } = setup(&mut cfg)?;
    let dir = output_dir(&cfg)?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    vocab.save(&dir.join(VOCAB_FILE))?;
    let out = train_model(&mut model, &vocab, &train, &valid, &cfg.train, |r| {
        let bleu = r.val_bleu.map_or(String::from("-"), |b| format!("{b:.2}"));
        eprintln!(
            "epoch {:>4}  l_tg {:.4}  l_gr {:.4}  tok_acc {:.4}  gr_acc {:.4}  val_bleu {bleu}",
            r.epoch, r.l_tg, r.l_gr, r.token_accuracy, r.gr_accuracy
        );
    })?;
    checkpoint::save(&out.best, &dir.join(CHECKPOINT_FILE))?;
    out.write_log(&dir.join(METRICS_FILE))?;
    let last = out.log.last().expect("at least one epoch ran");
    println!(
        "{}",
        json!({
            "best_epoch": out.best_epoch,
            "best_val_bleu": out.best_val_bleu,
            "trainable_params": last.trainable_params,
            "total_params": last.total_params,
            "output_dir": dir,
        })
    );
    Ok(())
}

/// Model, vocabulary and config of a finished `train` run.
pub fn load_run(run: &Path, checkpoint_path: Option<&Path>) -> Result<(RunConfig, Vocabulary, Model), CliError> {
    let cfg = RunConfig::load(Some(&run.join(CONFIG_FILE)))?;
    let vocab = Vocabulary::load(&run.join(VOCAB_FILE))?;
    if cfg.model.vocab_size != vocab.len() {
        return Err(CliError::Data(format!(
            "{}: vocab_size {} does not match vocabulary of {} entries",
            run.display(),
            cfg.model.vocab_size,
            vocab.len()
        )));
    }
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    let ckpt = checkpoint_path.map(Path::to_path_buf).unwrap_or_else(|| run.join(CHECKPOINT_FILE));
    checkpoint::load_into(&mut model.store, &ckpt)?;
    Ok((cfg, vocab, model))
}

#[derive(Serialize, Deserialize)]
struct Prediction {
    hypothesis: String,
    reference: String,
}

pub fn generate(
    run: &Path,
    checkpoint_path: Option<&Path>,
    data: &Path,
    out: &Path,
    greedy: bool,
    beam_size: Option<usize>,
) -> Result<(), CliError> {
    let (cfg, vocab, model) = load_run(run, checkpoint_path)?;
    let examples = load_data(data)?;
    let prepared = prepare_all(&examples, &vocab, &cfg.prompt, &model, cfg.bidirectional())?;
    let mut dec = cfg.decode.clone();
    if greedy {
        dec.mode = DecodeMode::Greedy;
    }
    if let Some(k) = beam_size {
        if k == 0 {
            return Err(CliError::Usage("--beam-size must be ≥ 1".into()));
        }
        dec.mode = DecodeMode::Beam;
        dec.beam_size = k;
    }
    let hyps = generate_all(&model, &vocab, &prepared, &dec)?;
    let mut f = fs::File::create(out).map_err(|e| io_err(out, e))?;
    for (h, ex) in hyps.iter().zip(&examples) {
        let p = Prediction {
            hypothesis: h.join(" "),
            reference: ex.target_text.clone(),
        };
        writeln!(f, "{}", serde_json::to_string(&p).expect("prediction serializes")).map_err(|e| io_err(out, e))?;
    }
    Ok(())
}

/// Metrics over a predictions file. Both sides are re-tokenized, so raw
/// references and space-joined hypotheses compare on equal terms.
pub fn score_predictions(path: &Path) -> Result<serde_json::Value, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let p: Prediction = serde_json::from_str(line)
            .map_err(|e| CliError::Data(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        cands.push(tokenize(&p.hypothesis));
        refs.push(tokenize(&p.reference));
    }
    if cands.is_empty() {
        return Err(CliError::Data(format!("{}: no predictions", path.display())));
    }
    Ok(json!({
        "bleu": corpus_bleu(&cands, &refs)?,
        "chrf_pp": chrf_pp(&cands, &refs)?,
        "num_examples": cands.len(),
    }))
}

pub fn eval(predictions: &Path) -> Result<(), CliError> {
    println!("{}", score_predictions(predictions)?);
    Ok(())
}

pub fn sweep(cfg: &RunConfig, values: &[f64]) -> Result<(), CliError> {
    if let Some(v) = values.iter().find(|v| v.is_nan() || **v < 0.0) {
        return Err(CliError::Usage(format!("λ must be ≥ 0, got {v}")));
    }
    let mut cfg = cfg.clone();
    let s = setup(&mut cfg)?;
    let dir = output_dir(&cfg)?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    let result = sweep_lambda(&s.model, &s.vocab, &s.train, &s.valid, &cfg.train, values)?;
    let tsv = result.to_tsv();
    write_file(&dir.join("sweep.tsv"), &tsv)?;
    write_file(
        &dir.join("sweep_plot.json"),
        &serde_json::to_string_pretty(&result.plot_data()).expect("plot data serializes"),
    )?;
    print!("{tsv}");
    Ok(())
}
