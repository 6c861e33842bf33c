//! The assembled network: encoders, query set, fusion net and heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::config::RunConfig;
use crate::encoders::{TextEncoder, VisionEncoder, Vocab};
use crate::error::{Error, Result};
use crate::fusion::{run_qfnet, FusionParams, FusionState, LayerTrace};
use crate::geometry::region_target;
use crate::heads::{decode, DecodedSet, HeadVars, Heads, PredictionBundle};
use crate::matching::{
    fixed_order_assignment, match_queries, pad_gold, set_loss, GoldTarget, PaddedGold,
};
use crate::params::{Gradients, ParamStore};
use crate::queryset::QuerySetParams;
use crate::types::{Example, TypeSchema};

#[derive(Debug, Clone)]
pub struct Model {
    pub config: RunConfig,
    pub schema: TypeSchema,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub text: TextEncoder,
    pub vision: VisionEncoder,
    pub queries: QuerySetParams,
    pub fusion: FusionParams,
    pub heads: Heads,
}

/// Everything a forward pass records.
pub struct Forward {
    pub heads: HeadVars,
    pub state: FusionState,
    pub traces: Vec<LayerTrace>,
}

/// Loss value and parameter gradients for one example.
pub struct LossOutput {
    pub loss: f64,
    pub grads: Gradients,
}

impl Model {
    /// Fresh model with parameters drawn from `config.seed`.
    pub fn new(config: RunConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let schema = config.schema()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (h, heads) = (config.h, config.heads);
        let text = TextEncoder::new(
            &mut store,
            vocab.len(),
            h,
            heads,
            config.text_depth,
            config.text_positions.then_some(config.max_positions),
            &mut rng,
        );
        let vision = VisionEncoder::new(&mut store, config.raw_feature_dim, h, &mut rng);
        let q = &config.queries;
        let queries = QuerySetParams::new(
            &mut store,
            config.u,
            config.p,
            h,
            q.entity_init_std,
            q.type_init_std,
            q.source,
            q.mode,
            q.layout,
            &mut rng,
        )?;
        let fusion = FusionParams::new(&mut store, h, heads, &config.qfnet, config.lambda_v, &mut rng)?;
        let head_params = Heads::new(&mut store, h, &mut rng);
        Ok(Self {
            config,
            schema,
            vocab,
            store,
            text,
            vision,
            queries,
            fusion,
            heads: head_params,
        })
    }

    /// Rebuild a model around saved parameters.
    pub fn from_parts(config: RunConfig, vocab: Vocab, store: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, vocab)?;
        if !model.store.same_layout(&store) {
            return Err(Error::Load(
                "saved parameters do not match the configured architecture".into(),
            ));
        }
        model.store = store;
        Ok(model)
    }

    pub fn type_map(&self) -> Vec<usize> {
        self.queries.type_map()
    }

    /// Text and region encodings for `example`.
    pub fn encode(&self, g: &mut Graph, example: &Example) -> Result<(Var, Var)> {
        let text = self.text.encode(g, &self.vocab.ids(&example.tokens))?;
        let regions = self.vision.encode(g, &example.regions)?;
        Ok((text, regions))
    }

    /// The composed `u × h` query set.
    pub fn build_queries(&self, g: &mut Graph) -> Result<Var> {
        self.queries.build(g, &self.schema, &self.text, &self.vocab)
    }

    /// Fusion and heads starting from explicit query rows.
    pub fn forward_from(&self, g: &mut Graph, queries: Var, text: Var, regions: Var) -> Forward {
        let (state, traces) = run_qfnet(
            g,
            &self.fusion,
            FusionState {
                queries,
                text,
                regions,
            },
        );
        let heads = self
            .heads
            .forward(g, state.queries, state.text, state.regions);
        Forward {
            heads,
            state,
            traces,
        }
    }

    pub fn forward(&self, g: &mut Graph, example: &Example) -> Result<Forward> {
        let (text, regions) = self.encode(g, example)?;
        let queries = self.build_queries(g)?;
        Ok(self.forward_from(g, queries, text, regions))
    }

    pub fn bundle(&self, example: &Example) -> Result<PredictionBundle> {
        let mut g = Graph::new(&self.store);
        let f = self.forward(&mut g, example)?;
        Ok(f.heads.bundle(&g))
    }

    pub fn predict(&self, example: &Example) -> Result<(PredictionBundle, DecodedSet)> {
        let bundle = self.bundle(example)?;
        let decoded = decode(&bundle, &self.type_map(), self.config.tau_c);
        Ok((bundle, decoded))
    }

    /// Training targets for the gold entities of `example`.
    pub fn gold_targets(&self, example: &Example) -> Result<Vec<GoldTarget>> {
        example
            .gold
            .iter()
            .map(|q| {
                Ok(GoldTarget {
                    start: q.start,
                    end: q.end,
                    type_id: q.type_id,
                    region: region_target(&q.region, &example.regions, self.config.iou_threshold)?,
                })
            })
            .collect()
    }

    pub fn pad(&self, gold: &[GoldTarget]) -> Result<PaddedGold> {
        pad_gold(gold, self.config.u, self.config.loss.padding)
    }

    /// Assignment used by the loss: optimal matching, or the fixed order
    /// when bipartite matching is switched off.
    pub fn assignment(&self, padded: &PaddedGold, bundle: &PredictionBundle) -> Result<Vec<usize>> {
        let type_map = self.type_map();
        if self.config.loss.bipartite {
            Ok(match_queries(padded, bundle, &type_map, &self.config.loss)?.perm)
        } else {
            Ok(fixed_order_assignment(padded, &type_map))
        }
    }

    /// Loss node for `example` against precomputed padded targets. The
    /// assignment is computed from the current probabilities and then held
    /// constant.
    pub fn loss_node(&self, g: &mut Graph, example: &Example, padded: &PaddedGold) -> Result<Var> {
        let f = self.forward(g, example)?;
        let bundle = f.heads.bundle(g);
        let perm = self.assignment(padded, &bundle)?;
        Ok(set_loss(g, &f.heads, padded, &perm, self.config.loss.negatives))
    }

    pub fn loss_value(&self, example: &Example, padded: &PaddedGold) -> Result<f64> {
        self.loss_value_in(&self.store, example, padded)
    }

    /// Loss evaluated with `store` in place of the model's own parameters
    /// (same layout required).
    pub fn loss_value_in(&self, store: &ParamStore, example: &Example, padded: &PaddedGold) -> Result<f64> {
        let mut g = Graph::new(store);
        let l = self.loss_node(&mut g, example, padded)?;
        Ok(g.value(l).get(0, 0))
    }

    pub fn loss_and_grads(&self, example: &Example, padded: &PaddedGold) -> Result<LossOutput> {
        let mut g = Graph::new(&self.store);
        let l = self.loss_node(&mut g, example, padded)?;
        Ok(LossOutput {
            loss: g.value(l).get(0, 0),
            grads: g.param_grads(l),
        })
    }
}

/// Vocabulary over the training tokens plus the words of the type prompts.
pub fn build_vocab(examples: &[Example], schema: &TypeSchema) -> Vocab {
    let prompt_words = schema.prompts().iter().flat_map(|p| p.split_whitespace());
    let tokens = examples.iter().flat_map(|e| e.tokens.iter().map(String::as_str));
    Vocab::build(prompt_words.chain(tokens))
}
