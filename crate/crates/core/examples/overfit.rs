//! Overfit the synthetic corpus and print per-epoch metrics.

use grasame::ingest::{build_vocabulary, DEFAULT_PROMPT};
use grasame::model::{Model, ModelConfig};
use grasame::synthetic::{generate_corpus, SyntheticConfig};
use grasame::training::{prepare_all, train, TrainConfig};

fn main() -> grasame::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let lr = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let corpus = generate_corpus(&SyntheticConfig::default());
    let vocab = build_vocabulary(&corpus, DEFAULT_PROMPT, 1)?;
    let mut mc = ModelConfig {
        vocab_size: vocab.len(),
        ..Default::default()
    };
    mc.sync_gnn_dims();
    let mut model = Model::new(mc, 123)?;
    let data = prepare_all(&corpus, &vocab, DEFAULT_PROMPT, &model, true)?;
    let cfg = TrainConfig {
        epochs,
        lr,
        eval_every: 10,
        ..Default::default()
    };
    let t = std::time::Instant::now();
    let out = train(&mut model, &vocab, &data, &[], &cfg, |r| {
        println!(
            "{:>4} {:>8.2}s tg={:.4} gr={:.4} tok={:.4} gra={:.4} bleu={:?}",
            r.epoch,
            t.elapsed().as_secs_f64(),
            r.l_tg,
            r.l_gr,
            r.token_accuracy,
            r.gr_accuracy,
            r.val_bleu
        )
    })?;
    println!("best epoch {} bleu {:.2}", out.best_epoch, out.best_val_bleu);
    Ok(())
}
