//! Held-out BLEU for the full model and its single ablations.

use grasame::ingest::{build_vocabulary, DEFAULT_PROMPT};
use grasame::model::{Model, ModelConfig};
use grasame::synthetic::{generate_corpus, SyntheticConfig};
use grasame::training::{greedy_bleu, prepare_all, train, TrainConfig};

fn main() -> grasame::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let corpus = generate_corpus(&SyntheticConfig {
        num_examples: 40,
        ..Default::default()
    });
    let (train_ex, held) = corpus.split_at(32);
    let vocab = build_vocabulary(&corpus, DEFAULT_PROMPT, 1)?;
    for seed in [123u64, 124, 125] {
        for (name, bidir, gr) in [("full", true, true), ("-bidir", false, true), ("-gr", true, false)] {
            let mut mc = ModelConfig {
                vocab_size: vocab.len(),
                ..Default::default()
            };
            mc.sync_gnn_dims();
            let mut model = Model::new(mc, seed)?;
            let tr = prepare_all(train_ex, &vocab, DEFAULT_PROMPT, &model, bidir)?;
            let ho = prepare_all(held, &vocab, DEFAULT_PROMPT, &model, bidir)?;
            let cfg = TrainConfig {
                epochs,
                seed,
                disable_gr_loss: !gr,
                eval_every: epochs,
                ..Default::default()
            };
            train(&mut model, &vocab, &tr, &[], &cfg, |_| {})?;
            println!("seed {seed} {name:>7} held-out bleu {:.2} train bleu {:.2}", greedy_bleu(&model, &vocab, &ho)?, greedy_bleu(&model, &vocab, &tr)?);
        }
    }
    Ok(())
}
