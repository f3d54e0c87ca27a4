//! Scene graphs induced by selected combinations, graph attention, and the
//! hybrid-attention grounding network that scores graph nodes.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{AttentionBlock, LayerNorm, Linear, Mlp};
use crate::prl::cross_attend;
use crate::tensor::Matrix;

/// Graph attention aggregations per grounding pass.
pub const GAT_ROUNDS: usize = 2;
pub const GAT_NEGATIVE_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneGraph {
    /// Object ids in ascending order.
    pub nodes: Vec<usize>,
    /// Undirected edges `(a, b)` with `a < b`, as object ids.
    pub edges: BTreeSet<(usize, usize)>,
    pub node_index: BTreeMap<usize, usize>,
}

impl SceneGraph {
    fn from_parts(nodes: BTreeSet<usize>, edges: BTreeSet<(usize, usize)>) -> Self {
        let nodes: Vec<usize> = nodes.into_iter().collect();
        let node_index = nodes.iter().enumerate().map(|(k, &id)| (id, k)).collect();
        Self { nodes, edges, node_index }
    }

    /// Complete graph over objects `0..n`.
    pub fn complete(n: usize) -> Self {
        let edges = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
        Self::from_parts((0..n).collect(), edges)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.node_index.contains_key(&id)
    }

    /// Row-major `V×V` neighbor mask over node positions.
    pub fn adjacency(&self, self_loop: bool) -> Vec<bool> {
        let v = self.len();
        let mut mask = vec![false; v * v];
        for &(a, b) in &self.edges {
            let (i, j) = (self.node_index[&a], self.node_index[&b]);
            mask[i * v + j] = true;
            mask[j * v + i] = true;
        }
        if self_loop {
            for i in 0..v {
                mask[i * v + i] = true;
            }
        }
        mask
    }
}

/// Nodes are the union of the sets; each set contributes a clique.
pub fn build_scene_graph<S: AsRef<[usize]>>(sets: &[S]) -> SceneGraph {
    let mut nodes = BTreeSet::new();
    let mut edges = BTreeSet::new();
    for set in sets {
        let s = set.as_ref();
        nodes.extend(s.iter().copied());
        for (k, &a) in s.iter().enumerate() {
            for &b in &s[k + 1..] {
                if a != b {
                    edges.insert((a.min(b), a.max(b)));
                }
            }
        }
    }
    SceneGraph::from_parts(nodes, edges)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Identity,
}

/// Multi-head graph attention. Per head `h`:
/// `e_ij = LeakyReLU(a_src·z_i + a_dst·z_j)` with `z = x W_h`,
/// `α_i· = softmax over N(i)`, `out_i = act(Σ_j α_ij z_j)`; heads are
/// concatenated. Nodes with an empty neighbor set pass through unchanged.
#[derive(Clone, Debug)]
pub struct GraphAttentionLayer {
    pub project: Linear,
    pub att_src: ParamId,
    pub att_dst: ParamId,
    pub heads: usize,
    pub dim: usize,
    pub activation: Activation,
}

pub struct GatOutput {
    pub out: Var,
    /// `V×V` coefficients per head.
    pub attention: Vec<Var>,
}

impl GraphAttentionLayer {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("dimension {dim} is not divisible by {heads} heads")));
        }
        let d = dim / heads;
        let scale = (6.0 / (d + 1) as f64).sqrt();
        Ok(Self {
            project: Linear::no_bias(ps, &format!("{name}.project"), dim, dim, rng),
            att_src: ps.uniform(format!("{name}.att_src"), heads, d, scale, rng),
            att_dst: ps.uniform(format!("{name}.att_dst"), heads, d, scale, rng),
            heads,
            dim,
            activation: Activation::Elu,
        })
    }

    /// `mask` is the row-major `V×V` neighbor mask (see [`SceneGraph::adjacency`]).
    pub fn forward(&self, tape: &mut Tape, x: Var, mask: &[bool]) -> Result<GatOutput> {
        let (v, c) = (tape.value(x).rows(), tape.value(x).cols());
        if c != self.dim || mask.len() != v * v {
            return Err(Error::Shape(format!("graph attention expects {v}x{} input and a {v}x{v} mask", self.dim)));
        }
        let d = self.dim / self.heads;
        let z = self.project.forward(tape, x);
        let a_src = tape.param(self.att_src);
        let a_dst = tape.param(self.att_dst);
        let mut outs = Vec::with_capacity(self.heads);
        let mut attention = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let zh = tape.slice_cols(z, h * d, d);
            let src = tape.slice_rows(a_src, h, 1);
            let dst = tape.slice_rows(a_dst, h, 1);
            let s = tape.matmul_nt(zh, src);
            let t = tape.matmul_nt(dst, zh);
            let e = tape.outer_add(s, t);
            let e = tape.leaky_relu(e, GAT_NEGATIVE_SLOPE);
            let alpha = tape.masked_softmax_rows(e, mask);
            let agg = tape.matmul(alpha, zh);
            outs.push(match self.activation {
                Activation::Elu => tape.elu(agg),
                Activation::Identity => agg,
            });
            attention.push(alpha);
        }
        let mut out = tape.concat_cols(&outs);
        let isolated: Vec<usize> = (0..v).filter(|&i| !mask[i * v..(i + 1) * v].iter().any(|&m| m)).collect();
        if !isolated.is_empty() {
            let mut keep = Matrix::zeros(v, c);
            for &i in &isolated {
                keep.row_mut(i).fill(1.0);
            }
            let keep = tape.constant(keep);
            let pass = tape.mul(x, keep);
            out = tape.add(out, pass);
        }
        Ok(GatOutput { out, attention })
    }
}

/// One round: fuse relation tokens by self-attention, attend to the text,
/// then aggregate over the graph.
#[derive(Clone, Debug)]
pub struct GroundingRound {
    pub fuse: AttentionBlock,
    pub text: AttentionBlock,
    pub gat: GraphAttentionLayer,
    pub gat_norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct GroundingNetwork {
    pub rounds: Vec<GroundingRound>,
    pub head: Mlp,
    pub self_loop: bool,
}

impl GroundingNetwork {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut rounds = Vec::with_capacity(GAT_ROUNDS);
        for r in 0..GAT_ROUNDS {
            rounds.push(GroundingRound {
                fuse: AttentionBlock::new(ps, &format!("ground.{r}.fuse"), cfg.dim, cfg.heads, 0.0, rng)?,
                text: AttentionBlock::new(ps, &format!("ground.{r}.text"), cfg.dim, cfg.heads, 0.0, rng)?,
                gat: GraphAttentionLayer::new(ps, &format!("ground.{r}.gat"), cfg.dim, cfg.heads, rng)?,
                gat_norm: LayerNorm::new(ps, &format!("ground.{r}.gat_norm"), cfg.dim),
            });
        }
        let head = Mlp::new(ps, "ground.head", cfg.dim, cfg.mlp_hidden, 1, cfg.dropout, rng);
        Ok(Self { rounds, head, self_loop: cfg.gat_self_loop })
    }
}

pub struct GroundingOutput {
    /// Node confidences, `1×V`, in graph node order.
    pub confidences: Var,
    /// Object id of the most confident node (ties to the lowest id).
    pub prediction: usize,
    pub gat_calls: usize,
}

/// Binary relation features offered to the fusion self-attention, with the
/// object pair each row describes.
#[derive(Clone, Copy, Debug)]
pub struct RelationTokens<'a> {
    pub features: Var,
    pub pairs: &'a [(usize, usize)],
}

/// Row-major `V×(V+R)` mask: every node sees every node, and only the
/// relation tokens whose pair it belongs to.
pub fn fusion_mask(graph: &SceneGraph, pairs: &[(usize, usize)]) -> Vec<bool> {
    let mut mask = Vec::with_capacity(graph.len() * (graph.len() + pairs.len()));
    for &id in &graph.nodes {
        mask.extend(std::iter::repeat_n(true, graph.len()));
        mask.extend(pairs.iter().map(|&(p, q)| p == id || q == id));
    }
    mask
}

/// Scores every graph node. `objects` holds the per-object features for the
/// whole scene (`N×C`).
pub fn ground(
    tape: &mut Tape,
    graph: &SceneGraph,
    objects: Var,
    relations: Option<RelationTokens<'_>>,
    text: Var,
    net: &GroundingNetwork,
) -> Result<GroundingOutput> {
    if graph.is_empty() {
        return Err(Error::Input("cannot ground on an empty graph".into()));
    }
    let n = tape.value(objects).rows();
    if let Some(&last) = graph.nodes.last() {
        if last >= n {
            return Err(Error::Input(format!("graph node {last} is outside the {n}-object scene")));
        }
    }
    if let Some(r) = &relations {
        if tape.value(r.features).rows() != r.pairs.len() {
            return Err(Error::Shape(format!(
                "{} relation rows for {} pairs",
                tape.value(r.features).rows(),
                r.pairs.len()
            )));
        }
    }
    let mask = graph.adjacency(net.self_loop);
    let fuse_mask = relations.as_ref().map(|r| fusion_mask(graph, r.pairs));
    let mut x = tape.gather_rows(objects, &graph.nodes);
    let mut gat_calls = 0;
    for round in &net.rounds {
        // relation tokens are keys only, so their rows never need updating
        x = match &relations {
            Some(r) => {
                let tokens = tape.concat_rows(&[x, r.features]);
                round.fuse.forward(tape, x, tokens, fuse_mask.as_deref())?
            }
            None => round.fuse.forward(tape, x, x, None)?,
        };
        x = cross_attend(tape, x, text, &round.text)?;
        let g = round.gat.forward(tape, x, &mask)?.out;
        gat_calls += 1;
        let r = tape.add(x, g);
        x = round.gat_norm.forward(tape, r);
    }
    let scores = net.head.forward(tape, x);
    let confidences = tape.transpose(scores);
    let prediction = argmax_node(graph, tape.value(confidences).data());
    Ok(GroundingOutput { confidences, prediction, gat_calls })
}

/// Object id of the highest score; ties go to the lowest id.
pub fn argmax_node(graph: &SceneGraph, scores: &[f64]) -> usize {
    let mut best = 0;
    for (k, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = k;
        }
    }
    graph.nodes[best]
}

/// Cross-entropy of the node confidences against the target's node.
pub fn grounding_loss(tape: &mut Tape, confidences: Var, graph: &SceneGraph, target: usize) -> Result<Var> {
    let Some(&pos) = graph.node_index.get(&target) else {
        return Err(Error::Contract(format!("target {target} is not a node of the scene graph")));
    };
    Ok(tape.cross_entropy(confidences, &[pos]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::{check_input, check_params, worst, DEFAULT_STEP};
    use proptest::prelude::{any, prop, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig { dim: 8, heads: 2, mlp_hidden: 8, dropout: 0.0, ..Default::default() }
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn project(tape: &mut Tape, x: Var, seed: u64) -> Var {
        let (r, c) = (tape.value(x).rows(), tape.value(x).cols());
        let w = tape.constant(random(r, c, seed));
        let y = tape.mul(x, w);
        let left = tape.constant(Matrix::filled(1, r, 1.0));
        let right = tape.constant(Matrix::filled(c, 1, 1.0));
        let y = tape.matmul(left, y);
        tape.matmul(y, right)
    }

    #[test]
    fn clique_examples() {
        let g = build_scene_graph(&[vec![0, 1, 2, 3]]);
        assert_eq!(g.nodes.len(), 4);
        assert_eq!(g.edges.len(), 6);
        let g = build_scene_graph(&[vec![0, 1], vec![1, 2]]);
        assert_eq!(g.nodes, vec![0, 1, 2]);
        assert_eq!(g.edges, [(0, 1), (1, 2)].into_iter().collect());
        assert_eq!(SceneGraph::complete(4).edges.len(), 6);
    }

    proptest! {
        #[test]
        fn clique_edges_match_enumeration(sets in prop::collection::vec(prop::collection::btree_set(0usize..10, 2..=4), 1..8)) {
            let sets: Vec<Vec<usize>> = sets.into_iter().map(|s| s.into_iter().collect()).collect();
            let g = build_scene_graph(&sets);
            let mut expected = BTreeSet::new();
            for a in 0..10 {
                for b in 0..10 {
                    if a < b && sets.iter().any(|s| s.contains(&a) && s.contains(&b)) {
                        expected.insert((a, b));
                    }
                }
            }
            prop_assert_eq!(&g.edges, &expected);
            let nodes: BTreeSet<usize> = sets.iter().flatten().copied().collect();
            prop_assert_eq!(g.nodes, nodes.into_iter().collect::<Vec<_>>());
        }

        #[test]
        fn attention_rows_are_distributions(seed in any::<u64>(), self_loop in any::<bool>()) {
            let c = cfg();
            let mut ps = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gat = GraphAttentionLayer::new(&mut ps, "g", c.dim, c.heads, &mut rng).unwrap();
            let graph = build_scene_graph(&[vec![0, 1, 2], vec![2, 3], vec![4, 5]]);
            let mask = graph.adjacency(self_loop);
            let mut tape = Tape::new(&ps);
            let x = tape.constant(random(6, 8, seed));
            let out = gat.forward(&mut tape, x, &mask).unwrap();
            for a in out.attention {
                let m = tape.value(a);
                for i in 0..6 {
                    let s: f64 = m.row(i).iter().sum();
                    prop_assert_eq!((s - 1.0).abs() < 1e-12, true);
                    for j in 0..6 {
                        if !mask[i * 6 + j] {
                            prop_assert_eq!(m.get(i, j), 0.0);
                        }
                    }
                }
            }
        }
    }

    fn identity_gat(heads: usize) -> (ParamStore, GraphAttentionLayer) {
        let mut ps = ParamStore::new();
        let mut gat = GraphAttentionLayer::new(&mut ps, "g", 4, heads, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        *ps.get_mut(gat.project.weight) = Matrix::identity(4);
        gat.activation = Activation::Identity;
        (ps, gat)
    }

    #[test]
    fn single_neighbor_copies_it() {
        let (ps, gat) = identity_gat(2);
        let graph = build_scene_graph(&[vec![0, 1]]);
        let mut tape = Tape::new(&ps);
        let x = tape.constant(random(2, 4, 1));
        let out = gat.forward(&mut tape, x, &graph.adjacency(false)).unwrap();
        let (o, xv) = (tape.value(out.out), tape.value(x));
        assert_eq!(o.row(0), xv.row(1));
        assert_eq!(o.row(1), xv.row(0));
    }

    #[test]
    fn isolated_nodes_pass_through() {
        let (ps, gat) = identity_gat(1);
        let mask = vec![false, false, false, false, true, true, false, true, true];
        let mut tape = Tape::new(&ps);
        let x = tape.constant(random(3, 4, 2));
        let out = gat.forward(&mut tape, x, &mask).unwrap();
        assert_eq!(tape.value(out.out).row(0), tape.value(x).row(0));
        assert!(tape.value(out.out).data().iter().all(|v| v.is_finite()));
    }

    /// Plain-loop evaluation of one layer, independent of the tape.
    fn dense_oracle(gat: &GraphAttentionLayer, ps: &ParamStore, x: &Matrix, mask: &[bool]) -> Matrix {
        let v = x.rows();
        let d = gat.dim / gat.heads;
        let w = ps.get(gat.project.weight);
        let mut z = Matrix::zeros(v, gat.dim);
        for i in 0..v {
            for o in 0..gat.dim {
                z.set(i, o, (0..gat.dim).map(|k| x.get(i, k) * w.get(k, o)).sum());
            }
        }
        let (asrc, adst) = (ps.get(gat.att_src), ps.get(gat.att_dst));
        let mut out = Matrix::zeros(v, gat.dim);
        for h in 0..gat.heads {
            for i in 0..v {
                let zi = |n: usize, k: usize| z.get(n, h * d + k);
                let mut logits = Vec::new();
                for j in 0..v {
                    if mask[i * v + j] {
                        let e: f64 = (0..d).map(|k| asrc.get(h, k) * zi(i, k) + adst.get(h, k) * zi(j, k)).sum();
                        logits.push((j, if e > 0.0 { e } else { 0.2 * e }));
                    }
                }
                let m = logits.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = logits.iter().map(|l| (l.1 - m).exp()).sum();
                for k in 0..d {
                    let s: f64 = logits.iter().map(|&(j, e)| (e - m).exp() / total * zi(j, k)).sum();
                    out.set(i, h * d + k, if s > 0.0 { s } else { s.exp() - 1.0 });
                }
            }
        }
        out
    }

    #[test]
    fn path_graph_matches_dense_oracle() {
        let c = cfg();
        let mut ps = ParamStore::new();
        let gat = GraphAttentionLayer::new(&mut ps, "g", c.dim, c.heads, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let graph = build_scene_graph(&[vec![0, 1], vec![1, 2]]);
        let x = random(3, 8, 6);
        for self_loop in [true, false] {
            let mask = graph.adjacency(self_loop);
            let mut tape = Tape::new(&ps);
            let xv = tape.constant(x.clone());
            let out = gat.forward(&mut tape, xv, &mask).unwrap();
            let expect = dense_oracle(&gat, &ps, &x, &mask);
            for (a, b) in tape.value(out.out).data().iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn non_neighbors_do_not_leak() {
        let c = cfg();
        let mut ps = ParamStore::new();
        let gat = GraphAttentionLayer::new(&mut ps, "g", c.dim, c.heads, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let graph = build_scene_graph(&[vec![0, 1], vec![1, 2]]);
        let mask = graph.adjacency(true);
        let x = random(3, 8, 6);
        let mut zeroed = x.clone();
        zeroed.row_mut(2).fill(0.0);
        let mut tape = Tape::new(&ps);
        let a = tape.constant(x);
        let b = tape.constant(zeroed);
        let oa = gat.forward(&mut tape, a, &mask).unwrap().out;
        let ob = gat.forward(&mut tape, b, &mask).unwrap().out;
        assert_eq!(tape.value(oa).row(0), tape.value(ob).row(0));
        assert_ne!(tape.value(oa).row(1), tape.value(ob).row(1));
    }

    #[test]
    fn gat_gradients() {
        let c = cfg();
        let mut ps = ParamStore::new();
        let gat = GraphAttentionLayer::new(&mut ps, "g", c.dim, c.heads, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let graph = build_scene_graph(&[vec![0, 1, 2], vec![2, 3]]);
        let mask = graph.adjacency(true);
        let x = random(4, 8, 6);
        let reports = check_params(
            &ps,
            None,
            |t| {
                let xv = t.constant(x.clone());
                let o = gat.forward(t, xv, &mask).unwrap().out;
                project(t, o, 1)
            },
            DEFAULT_STEP,
        );
        assert!(worst(&reports) < 1e-4, "{reports:?}");
        let r = check_input(
            &ps,
            &x,
            |t, xv| {
                let o = gat.forward(t, xv, &mask).unwrap().out;
                project(t, o, 1)
            },
            DEFAULT_STEP,
        );
        assert!(r.rel_error < 1e-4);
    }

    fn network(seed: u64) -> (ParamStore, GroundingNetwork) {
        let mut ps = ParamStore::new();
        let net = GroundingNetwork::new(&mut ps, &cfg(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (ps, net)
    }

    #[test]
    fn grounding_runs_two_graph_rounds() {
        let (ps, net) = network(1);
        let graph = build_scene_graph(&[vec![0, 2, 3], vec![3, 4]]);
        let mut tape = Tape::new(&ps);
        let o = tape.constant(random(5, 8, 1));
        let r = tape.constant(random(3, 8, 2));
        let t = tape.constant(random(1, 8, 3));
        let pairs = [(0, 2), (3, 4), (2, 1)];
        let out = ground(&mut tape, &graph, o, Some(RelationTokens { features: r, pairs: &pairs }), t, &net).unwrap();
        assert_eq!(out.gat_calls, 2);
        let conf = tape.value(out.confidences);
        assert_eq!((conf.rows(), conf.cols()), (1, 4));
        assert!(conf.data().iter().all(|v| v.is_finite()));
        assert!(graph.nodes.contains(&out.prediction));
    }

    #[test]
    fn nodes_see_only_their_own_relation_tokens() {
        let graph = build_scene_graph(&[vec![1, 4], vec![4, 6]]);
        let mask = fusion_mask(&graph, &[(4, 1), (6, 0), (2, 3)]);
        #[rustfmt::skip]
        let expect = [
            true, true, true, true, false, false,
            true, true, true, true, false, false,
            true, true, true, false, true, false,
        ];
        assert_eq!(mask, expect);
    }

    #[test]
    fn relation_rows_must_match_pairs() {
        let (ps, net) = network(1);
        let graph = build_scene_graph(&[vec![0, 1]]);
        let mut tape = Tape::new(&ps);
        let o = tape.constant(random(2, 8, 1));
        let r = tape.constant(random(2, 8, 2));
        let t = tape.constant(random(1, 8, 3));
        let tokens = RelationTokens { features: r, pairs: &[(0, 1)] };
        assert!(matches!(ground(&mut tape, &graph, o, Some(tokens), t, &net), Err(Error::Shape(_))));
    }

    #[test]
    fn singleton_graph_predicts_its_node() {
        let (ps, net) = network(2);
        let graph = build_scene_graph(&[vec![3]]);
        let mut tape = Tape::new(&ps);
        let o = tape.constant(random(5, 8, 1));
        let t = tape.constant(random(1, 8, 3));
        assert_eq!(ground(&mut tape, &graph, o, None, t, &net).unwrap().prediction, 3);
    }

    #[test]
    fn grounding_is_permutation_equivariant() {
        let (ps, net) = network(3);
        let sets = vec![vec![0, 1, 4], vec![1, 2], vec![3, 4]];
        let feats = random(5, 8, 4);
        let rel = random(2, 8, 5);
        let text = random(1, 8, 6);
        let pairs = vec![(0, 4), (1, 2)];
        // object k becomes object perm[k]
        let perm = [3, 0, 4, 1, 2];
        let psets: Vec<Vec<usize>> = sets.iter().map(|s| s.iter().map(|&k| perm[k]).collect()).collect();
        let ppairs: Vec<(usize, usize)> = pairs.iter().map(|&(p, q)| (perm[p], perm[q])).collect();
        let mut pfeats = Matrix::zeros(5, 8);
        for k in 0..5 {
            pfeats.row_mut(perm[k]).copy_from_slice(feats.row(k));
        }
        let run = |sets: &[Vec<usize>], f: &Matrix, pairs: &[(usize, usize)]| {
            let g = build_scene_graph(sets);
            let mut tape = Tape::new(&ps);
            let o = tape.constant(f.clone());
            let r = tape.constant(rel.clone());
            let t = tape.constant(text.clone());
            let out = ground(&mut tape, &g, o, Some(RelationTokens { features: r, pairs }), t, &net).unwrap();
            let by_id: BTreeMap<usize, f64> =
                g.nodes.iter().copied().zip(tape.value(out.confidences).data().iter().copied()).collect();
            (by_id, out.prediction)
        };
        let (a, pa) = run(&sets, &feats, &pairs);
        let (b, pb) = run(&psets, &pfeats, &ppairs);
        for (id, s) in &a {
            assert!((s - b[&perm[*id]]).abs() < 1e-10);
        }
        assert_eq!(perm[pa], pb);
    }

    #[test]
    fn grounding_loss_values() {
        let graph = build_scene_graph(&[vec![2, 5]]);
        let params = ParamStore::new();
        let mut tape = Tape::new(&params);
        let c = tape.input(Matrix::from_vec(1, 2, vec![0.3, 0.3]));
        let l = grounding_loss(&mut tape, c, &graph, 5).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
        let c = tape.input(Matrix::from_vec(1, 2, vec![-40.0, 40.0]));
        let l = grounding_loss(&mut tape, c, &graph, 5).unwrap();
        assert!(tape.value(l).item() < 1e-30);
        assert!(matches!(grounding_loss(&mut tape, c, &graph, 1), Err(Error::Contract(_))));
        let r = check_input(
            &params,
            &Matrix::from_vec(1, 2, vec![0.1, -0.4]),
            |t, x| grounding_loss(t, x, &graph, 2).unwrap(),
            DEFAULT_STEP,
        );
        assert!(r.rel_error < 1e-4);
    }

    #[test]
    fn grounding_network_gradients() {
        let (ps, net) = network(4);
        let graph = build_scene_graph(&[vec![0, 1, 2], vec![2, 3]]);
        let o = random(4, 8, 1);
        let r = random(2, 8, 2);
        let t = random(1, 8, 3);
        let reports = check_params(
            &ps,
            None,
            |tape| {
                let ov = tape.constant(o.clone());
                let rv = tape.constant(r.clone());
                let tv = tape.constant(t.clone());
                let tokens = RelationTokens { features: rv, pairs: &[(0, 1), (3, 2)] };
                let out = ground(tape, &graph, ov, Some(tokens), tv, &net).unwrap();
                grounding_loss(tape, out.confidences, &graph, 2).unwrap()
            },
            DEFAULT_STEP,
        );
        assert!(worst(&reports) < 1e-4, "{:?}", reports.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)));
    }
}
