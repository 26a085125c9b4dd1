//! Shared fixtures for the criterion benchmarks.
//!
//! Everything here is seeded so benchmark runs are comparable across
//! machines and commits.

use neurodiv_core::model::{
    build_lm_graph, BackboneConfig, ForwardOptions, LoraTargets, NdModel, PrefixMode,
    StreamConfig, TARGETS_INPUT, TOKENS_INPUT,
};
use neurodiv_core::{Bindings, Graph, NodeId, SeedTree, Tensor};

/// Per-stream feature matrices drawn i.i.d. standard normal.
pub fn random_streams(p: usize, n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = SeedTree::new(seed).rng("streams");
    (0..p)
        .map(|_| {
            Tensor::<f64>::randn(&[n, d], 0.0, 1.0, &mut rng)
                .data()
                .to_vec()
        })
        .collect()
}

/// A compiled language-model step: the forward graph with its training
/// loss, a model holding the parameters, and one batch of tokens.
pub struct StepFixture {
    pub graph: Graph<f64>,
    pub loss: NodeId,
    pub model: NdModel<f64>,
    pub tokens: Tensor<f64>,
    pub targets: Tensor<f64>,
}

impl StepFixture {
    /// A two-layer model at the benchmark reference size.
    pub fn new(streams: usize, batch: usize, seq: usize) -> Self {
        let bb = BackboneConfig {
            dim: 32,
            layers: 2,
            heads: 2,
            mlp_hidden: 64,
            max_seq: 2 * seq,
            ..BackboneConfig::default()
        };
        let sc = StreamConfig {
            streams,
            rank: 4,
            targets: LoraTargets::All,
            n_prefix: 4,
            prefix_mode: PrefixMode::KvPerLayer,
            epsilon: 0.1,
            shared_adapters: false,
        };
        let model = NdModel::<f64>::build(bb, sc, 17).expect("benchmark model");
        let mut gb = neurodiv_core::GraphBuilder::<f64>::new();
        let opts = ForwardOptions::<f64>::new(batch, seq, 1);
        let handles = build_lm_graph(&mut gb, &bb, &sc, &opts).expect("benchmark graph");
        let loss = handles.ce.expect("training graph carries a loss");
        let graph = gb.finish();

        let mut rng = SeedTree::new(18).rng("tokens");
        let tokens = random_tokens(&mut rng, batch, seq);
        let targets = random_tokens(&mut rng, batch, seq);
        StepFixture { graph, loss, model, tokens, targets }
    }

    /// Bindings for one forward/backward pass over the stored batch.
    pub fn bindings(&self) -> Bindings<'_, f64> {
        let mut b = self.model.bindings();
        b.insert(TOKENS_INPUT.to_string(), &self.tokens);
        b.insert(TARGETS_INPUT.to_string(), &self.targets);
        b
    }
}

fn random_tokens<R: rand::Rng>(rng: &mut R, batch: usize, seq: usize) -> Tensor<f64> {
    let vals: Vec<f64> = (0..batch * seq).map(|_| rng.gen_range(0..256) as f64).collect();
    Tensor::from_f64s(&[batch, seq], &vals).expect("token tensor")
}
