mod common;

use common::{fd_check, fd_check_model, fd_check_params, probe, random_example, random_tensor};
use grasame::gnn::{gnn_forward, Activation, GnnConfig, GnnFamily, GraphOperators, SageAggregator};
use grasame::hiergraph::build_graph;
use grasame::ingest::{build_vocabulary, linearize, DEFAULT_PROMPT};
use grasame::model::{Model, ModelConfig, Variation};
use grasame::synthetic::{generate_corpus, SyntheticConfig};
use grasame::tensor::{Graph, NodeId, ParameterStore, Tensor};
use grasame::training::{prepare_all, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(2024)
}

fn check(name: &str, inputs: &[Tensor], f: impl Fn(&mut Graph, &[NodeId]) -> grasame::Result<NodeId>) {
    let e = fd_check(inputs, f);
    assert!(e <= TOL, "{name}: max relative error {e:.3e}");
}

#[test]
fn every_tape_op() {
    for (name, e) in common::op_errors() {
        assert!(e <= TOL, "{name}: max relative error {e:.3e}");
    }
}

fn small_graph_ops(seed: u64) -> GraphOperators {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let ex = random_example(&mut r, 2);
    let vocab = build_vocabulary(std::slice::from_ref(&ex), "", 1).unwrap();
    let input = linearize(&ex, "", &vocab, 1000).unwrap();
    GraphOperators::new(&build_graph(&input, true).unwrap()).unwrap()
}

#[test]
fn gnn_layers_inputs_and_weights() {
    let ops = small_graph_ops(5);
    let n = ops.num_nodes;
    let dim = 4;
    let families = [
        (GnnFamily::Sage, SageAggregator::Mean),
        (GnnFamily::Sage, SageAggregator::Max),
        (GnnFamily::Sage, SageAggregator::Sum),
        (GnnFamily::Gat, SageAggregator::Mean),
        (GnnFamily::Rgcn, SageAggregator::Mean),
    ];
    for (family, aggregator) in families {
        for activation in [Activation::Relu, Activation::Identity] {
            let cfg = GnnConfig {
                family,
                aggregator,
                activation,
                in_dim: dim,
                out_dim: dim,
                gat_heads: 2,
                ..GnnConfig::default()
            };
            let mut r = rng();
            let mut store = ParameterStore::new();
            cfg.init_params("gnn", &mut store, &mut r).unwrap();
            // push biases away from zero so ReLU kinks are unlikely
            for name in store.names().map(String::from).collect::<Vec<_>>() {
                let v = store.value(&name).unwrap().clone();
                let shifted: Vec<f64> = v.data().iter().map(|x| x + r.gen_range(-0.3..0.3)).collect();
                store.set_value(&name, Tensor::new(v.shape().to_vec(), shifted).unwrap()).unwrap();
            }
            let x = random_tensor(&mut r, &[n, dim]);
            let label = format!("{family:?}/{aggregator:?}/{activation:?}");
            check(&format!("{label} input"), &[x.clone()], |g, v| {
                let y = gnn_forward(g, &store, "gnn", &cfg, v[0], &ops)?;
                probe(g, y, 40)
            });
            let e = fd_check_params(&store, |g, s| {
                let xv = g.constant(x.clone());
                let y = gnn_forward(g, s, "gnn", &cfg, xv, &ops)?;
                probe(g, y, 41)
            });
            assert!(e <= TOL, "{label} weights: {e:.3e}");
        }
    }
}

fn toy_model(variation: Variation, family: GnnFamily, d: usize) -> (Model, Vec<grasame::training::PreparedExample>) {
    let corpus = generate_corpus(&SyntheticConfig {
        num_examples: 2,
        max_triples: 2,
        seed: 5,
        ..Default::default()
    });
    let vocab = build_vocabulary(&corpus, DEFAULT_PROMPT, 1).unwrap();
    let mut mc = ModelConfig {
        d_model: d,
        num_heads: 4,
        feedforward_dim: 2 * d,
        vocab_size: vocab.len(),
        variation,
        ..Default::default()
    };
    mc.gnn.family = family;
    mc.gnn.gat_heads = 2;
    let model = Model::new(mc, 9).unwrap();
    let data = prepare_all(&corpus, &vocab, DEFAULT_PROMPT, &model, true).unwrap();
    (model, data)
}

#[test]
fn small_models_all_variations() {
    for variation in [Variation::Base, Variation::Grasame, Variation::Var1, Variation::Var2] {
        for family in [GnnFamily::Sage, GnnFamily::Gat, GnnFamily::Rgcn] {
            if variation == Variation::Base && family != GnnFamily::Sage {
                continue;
            }
            let (model, data) = toy_model(variation, family, 8);
            let batch: Vec<_> = data.iter().collect();
            let (e, n) = fd_check_model(&model, &batch, &TrainConfig::default(), &mut rng(), 3, |name| name.contains(".gnn."));
            assert!(e <= TOL, "{variation:?}/{family:?}: {e:.3e} over {n} elements");
        }
    }
}
