//! The assembled grounding model and its per-record forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamStore, Tape, Var};
use crate::config::{Ablation, ModelConfig};
use crate::encoders::{
    classify_objects, embed_boxes, encode_text, fuse_object_features, pairwise_geometry, toy_object_features,
    BoxEmbedding, FeatureBundle, FusionBlock, GeometryEmbedding, TextEncoder, ToyObjectEncoder,
};
use crate::error::{Error, Result};
use crate::extract::pairs_to_binary_labels;
use crate::grounding::{
    argmax_node, build_scene_graph, ground, grounding_loss, GroundingNetwork, RelationTokens, SceneGraph,
};
use crate::nn::{Linear, Mlp};
use crate::prl::{
    attend_selected_pairs, binary_loss, binary_relations, cross_attend, group_combos, nary_loss, nary_relations,
    RelationStage,
};
use crate::scene::{Record, Vocabulary};
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    pub objects: ToyObjectEncoder,
    pub fusion: FusionBlock,
    pub boxes: BoxEmbedding,
    pub geometry: GeometryEmbedding,
    pub text: TextEncoder,
    pub classifier: Linear,
    pub binary: RelationStage,
    pub nary: RelationStage,
    pub grounding: GroundingNetwork,
    /// Direct object scorer for the graph-free ablation.
    pub direct_head: Mlp,
}

/// Loss terms of one record. Relational terms are absent when the ablation
/// does not train them.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub reference: Var,
    pub text: Var,
    pub visual: Var,
    pub binary: Option<Var>,
    pub nary: Option<Var>,
}

pub struct ForwardOutput {
    pub prediction: usize,
    pub text_class: usize,
    pub graph: Option<SceneGraph>,
    pub gat_calls: usize,
    pub losses: Option<LossTerms>,
}

impl Model {
    /// Builds the model and its freshly initialized parameters. Parameter
    /// names and order depend only on `cfg` and `vocab`.
    pub fn new(cfg: ModelConfig, vocab: Vocabulary) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let objects = ToyObjectEncoder::new(&mut ps, &cfg, vocab.clone(), &mut rng);
        let fusion = FusionBlock::new(&mut ps, &cfg, &mut rng);
        let boxes = BoxEmbedding::new(&mut ps, &cfg, &mut rng);
        let geometry = GeometryEmbedding::new(&mut ps, &cfg, &mut rng);
        let text = TextEncoder::new(&mut ps, &cfg, vocab.len(), &mut rng)?;
        let classifier = Linear::new(&mut ps, "classifier", cfg.dim, vocab.len(), &mut rng);
        let binary = RelationStage::new(&mut ps, "binary", &cfg, &mut rng)?;
        let nary = RelationStage::new(&mut ps, "nary", &cfg, &mut rng)?;
        let grounding = GroundingNetwork::new(&mut ps, &cfg, &mut rng)?;
        let direct_head = Mlp::new(&mut ps, "direct_head", cfg.dim, cfg.mlp_hidden, 1, cfg.dropout, &mut rng);
        let model =
            Self { cfg, vocab, objects, fusion, boxes, geometry, text, classifier, binary, nary, grounding, direct_head };
        Ok((model, ps))
    }

    pub fn features(&self, tape: &mut Tape, record: &Record) -> Result<(FeatureBundle, Var, Var)> {
        let scene = &record.scene;
        let (f2d, f3d) = toy_object_features(tape, scene, &self.objects)?;
        let objects = fuse_object_features(tape, f2d, f3d, &self.fusion)?;
        let boxes_list = scene.boxes();
        let boxes = embed_boxes(tape, &boxes_list, &self.boxes);
        let geometry = pairwise_geometry(tape, &boxes_list, &self.geometry)?;
        let (text, text_logits) = encode_text(tape, &record.utterance.text, &self.text)?;
        let class_logits = classify_objects(tape, objects, &self.classifier);
        Ok((FeatureBundle { objects, text, boxes, geometry }, text_logits, class_logits))
    }

    /// Runs one record. On training tapes, teacher forcing is on and the loss
    /// terms are returned.
    pub fn forward(&self, tape: &mut Tape, record: &Record, ablation: Ablation) -> Result<ForwardOutput> {
        let training = tape.is_training();
        let scene = &record.scene;
        let n = scene.len();
        let target = scene.target_id;
        let force = training.then_some(target);
        let (fb, text_logits, class_logits) = self.features(tape, record)?;
        let text_class = argmax(tape.value(text_logits).data());

        let mut binary_term = None;
        let mut nary_term = None;
        let (graph, relations, pairs, attended) = match ablation {
            Ablation::Full | Ablation::BinaryOnly => {
                let bs = binary_relations(tape, fb.objects, fb.boxes, fb.geometry, fb.text, &self.binary, self.cfg.k1, force)?;
                if training {
                    let labels = pairs_to_binary_labels(&record.utterance.pairs, scene);
                    binary_term = Some(binary_loss(tape, bs.scores, &labels, self.cfg.mask_binary_diagonal)?);
                }
                if ablation == Ablation::Full {
                    let ns = nary_relations(tape, &bs, fb.text, &self.nary, self.cfg.k2, force)?;
                    if training {
                        let (pos, neg) = group_combos(&ns.combos, target);
                        nary_term = Some(nary_loss(tape, ns.scores, &pos, &neg)?);
                    }
                    let sets: Vec<&[usize]> = ns.selected.iter().map(|&c| ns.combos[c].objects.as_slice()).collect();
                    (Some(build_scene_graph(&sets)), Some(ns.pairs), bs.selected, bs.objects)
                } else {
                    let tokens = attend_selected_pairs(tape, &bs, fb.text, &self.nary)?;
                    let sets: Vec<[usize; 2]> = bs.selected.iter().map(|&(i, j)| [i, j]).collect();
                    (Some(build_scene_graph(&sets)), Some(tokens), bs.selected, bs.objects)
                }
            }
            Ablation::FullyConnected | Ablation::NoGraph => {
                let x = tape.add(fb.objects, fb.boxes);
                let attended = cross_attend(tape, x, fb.text, &self.binary.attn)?;
                let graph = (ablation == Ablation::FullyConnected).then(|| SceneGraph::complete(n));
                (graph, None, Vec::new(), attended)
            }
        };

        let (logits, prediction, gat_calls, graph) = match graph {
            Some(g) => {
                let tokens = relations.map(|features| RelationTokens { features, pairs: &pairs });
                let out = ground(tape, &g, attended, tokens, fb.text, &self.grounding)?;
                (out.confidences, out.prediction, out.gat_calls, Some(g))
            }
            None => {
                let s = self.direct_head.forward(tape, attended);
                let logits = tape.transpose(s);
                let all = SceneGraph::complete(n);
                let prediction = argmax_node(&all, tape.value(logits).data());
                (logits, prediction, 0, None)
            }
        };

        let losses = if training {
            let reference = match &graph {
                Some(g) if self.cfg.lref_over_all_objects && g.len() < n => {
                    // non-graph objects keep a fixed zero logit
                    let mut scatter = Matrix::zeros(g.len(), n);
                    for (k, &id) in g.nodes.iter().enumerate() {
                        scatter.set(k, id, 1.0);
                    }
                    let scatter = tape.constant(scatter);
                    let full = tape.matmul(logits, scatter);
                    tape.cross_entropy(full, &[target])
                }
                Some(g) => grounding_loss(tape, logits, g, target)?,
                None => tape.cross_entropy(logits, &[target]),
            };
            let target_class = self.class_index(&record.utterance.target_category)?;
            let text = tape.cross_entropy(text_logits, &[target_class]);
            let classes = self.objects.category_indices(scene)?;
            let visual = tape.cross_entropy(class_logits, &classes);
            Some(LossTerms { reference, text, visual, binary: binary_term, nary: nary_term })
        } else {
            None
        };
        Ok(ForwardOutput { prediction, text_class, graph, gat_calls, losses })
    }

    pub fn class_index(&self, category: &str) -> Result<usize> {
        self.vocab
            .index_of(category)
            .ok_or_else(|| Error::Input(format!("category {category:?} is not in the model vocabulary")))
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (k, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = k;
        }
    }
    best
}
