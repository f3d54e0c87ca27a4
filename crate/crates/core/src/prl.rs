//! Progressive relational learning: pairwise relation scoring, top-K pair
//! selection, n-ary combination scoring over selected pairs, and the two
//! relational losses.

use std::collections::BTreeSet;

use rand::Rng;

use crate::autograd::{ParamStore, Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{AttentionBlock, Mlp};
use crate::tensor::Matrix;

/// Probability clamp for the relational losses.
pub const LOSS_EPS: f64 = 1e-7;

/// Attends every query row to the single text token, then adds the residual
/// and normalizes. `text` must be `1×C`.
pub fn cross_attend(tape: &mut Tape, queries: Var, text: Var, block: &AttentionBlock) -> Result<Var> {
    let tv = tape.value(text);
    if tv.rows() != 1 {
        return Err(Error::Input(format!("text feature must be a single row, got {}", tv.rows())));
    }
    if tv.cols() != block.attn.dim || tape.value(queries).cols() != block.attn.dim {
        return Err(Error::Input(format!(
            "cross-attention width {} does not match queries {} / text {}",
            block.attn.dim,
            tape.value(queries).cols(),
            tv.cols()
        )));
    }
    block.forward(tape, queries, text, None)
}

/// Learned parts of one relational stage: text cross-attention and a score MLP.
#[derive(Clone, Debug)]
pub struct RelationStage {
    pub attn: AttentionBlock,
    pub score: Mlp,
}

impl RelationStage {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            // residual dropout on object rows swamps the small inter-object differences
            attn: AttentionBlock::new(ps, &format!("{name}.cross"), cfg.dim, cfg.heads, 0.0, rng)?,
            score: Mlp::new(ps, &format!("{name}.score"), cfg.dim, cfg.mlp_hidden, 1, cfg.dropout, rng),
        })
    }

    /// `σ(MLP(features))`, one score per row.
    pub fn scores(&self, tape: &mut Tape, features: Var) -> Var {
        let logits = self.score.forward(tape, features);
        tape.sigmoid(logits)
    }
}

pub struct BinaryRelationState {
    pub n: usize,
    /// Text-conditioned objects, `N×C`.
    pub objects: Var,
    /// Pair features, `N²×C` with row `i·N + j`.
    pub relations: Var,
    /// Pair scores, `N²×1`.
    pub scores: Var,
    /// Selected ordered pairs, best first.
    pub selected: Vec<(usize, usize)>,
}

impl BinaryRelationState {
    pub fn score_matrix(&self, tape: &Tape) -> Matrix {
        Matrix::from_vec(self.n, self.n, tape.value(self.scores).data().to_vec())
    }
}

/// Off-diagonal pairs ranked by score, descending; ties by `(i, j)`.
pub fn top_k_pairs(scores: &Matrix, k: usize) -> Result<Vec<(usize, usize)>> {
    let n = scores.rows();
    if k > n * n.saturating_sub(1) {
        return Err(Error::Config(format!("k1 = {k} exceeds the {} off-diagonal pairs", n * n.saturating_sub(1))));
    }
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).collect();
    pairs.sort_by(|&(a, b), &(c, d)| scores.get(c, d).total_cmp(&scores.get(a, b)).then((a, b).cmp(&(c, d))));
    pairs.truncate(k);
    Ok(pairs)
}

/// When no selected pair touches `target`, swaps the lowest-ranked selection
/// for the best-scoring pair that does.
pub fn force_target_pair(selected: &mut [(usize, usize)], scores: &Matrix, target: usize) {
    if selected.is_empty() || selected.iter().any(|&(i, j)| i == target || j == target) {
        return;
    }
    let n = scores.rows();
    let best = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j && (i == target || j == target))
        .min_by(|&(a, b), &(c, d)| scores.get(c, d).total_cmp(&scores.get(a, b)).then((a, b).cmp(&(c, d))));
    if let Some(p) = best {
        *selected.last_mut().expect("nonempty") = p;
    }
}

/// `O' = CrossAttn(O + F_box, T)`, `B_ij = O'_i ⊙ O'_j + F_geo_ij`,
/// `S1 = σ(MLP(B))`, then top-`k` selection. With `force_target`, the target
/// is guaranteed to appear in a selected pair.
pub fn binary_relations(
    tape: &mut Tape,
    objects: Var,
    boxes: Var,
    geometry: Var,
    text: Var,
    stage: &RelationStage,
    k: usize,
    force_target: Option<usize>,
) -> Result<BinaryRelationState> {
    let n = tape.value(objects).rows();
    if tape.value(boxes).rows() != n || tape.value(geometry).rows() != n * n {
        return Err(Error::Input("object, box and geometry features disagree on N".into()));
    }
    let x = tape.add(objects, boxes);
    let attended = cross_attend(tape, x, text, &stage.attn)?;
    let rows: Vec<usize> = (0..n * n).map(|r| r / n).collect();
    let cols: Vec<usize> = (0..n * n).map(|r| r % n).collect();
    let left = tape.gather_rows(attended, &rows);
    let right = tape.gather_rows(attended, &cols);
    let prod = tape.mul(left, right);
    let relations = tape.add(prod, geometry);
    let scores = stage.scores(tape, relations);
    let score_matrix = Matrix::from_vec(n, n, tape.value(scores).data().to_vec());
    let mut selected = top_k_pairs(&score_matrix, k)?;
    if let Some(t) = force_target {
        force_target_pair(&mut selected, &score_matrix, t);
    }
    Ok(BinaryRelationState { n, objects: attended, relations, scores, selected })
}

/// Mean binary cross-entropy over all `N²` cells (off-diagonal only when
/// `mask_diagonal`).
pub fn binary_loss(tape: &mut Tape, scores: Var, labels: &Matrix, mask_diagonal: bool) -> Result<Var> {
    let n = labels.rows();
    if labels.cols() != n || tape.value(scores).len() != n * n {
        return Err(Error::Shape(format!("binary loss expects {n}x{n} scores and labels")));
    }
    if mask_diagonal {
        let keep: Vec<usize> = (0..n * n).filter(|r| r / n != r % n).collect();
        let s = tape.gather_rows(scores, &keep);
        let t: Vec<f64> = keep.iter().map(|&r| labels.data()[r]).collect();
        Ok(tape.bce(s, &t, LOSS_EPS))
    } else {
        Ok(tape.bce(scores, labels.data(), LOSS_EPS))
    }
}

/// Union of two selected pairs, identified by the sorted object ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Combo {
    pub p: usize,
    pub q: usize,
    pub objects: Vec<usize>,
}

impl Combo {
    pub fn contains(&self, id: usize) -> bool {
        self.objects.binary_search(&id).is_ok()
    }
}

/// Upper-triangle `(p, q)`, `p ≤ q`, in lexicographic order, keeping the
/// first entry for each distinct object set.
pub fn dedup_combos(pairs: &[(usize, usize)]) -> Vec<Combo> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for p in 0..pairs.len() {
        for q in p..pairs.len() {
            let set: BTreeSet<usize> = [pairs[p].0, pairs[p].1, pairs[q].0, pairs[q].1].into_iter().collect();
            let objects: Vec<usize> = set.into_iter().collect();
            if seen.insert(objects.clone()) {
                out.push(Combo { p, q, objects });
            }
        }
    }
    out
}

/// Indices of the `k` best scores, descending; ties by index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::Config(format!("k2 = {k} exceeds the {} distinct combinations", scores.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Splits combos into those containing `target` and the rest.
pub fn group_combos(combos: &[Combo], target: usize) -> (Vec<usize>, Vec<usize>) {
    (0..combos.len()).partition(|&c| combos[c].contains(target))
}

pub struct NaryRelationState {
    /// Text-conditioned selected pair features, `K1×C`.
    pub pairs: Var,
    pub combos: Vec<Combo>,
    /// One score per combo, `|combos|×1`.
    pub scores: Var,
    /// Selected combo indices, best first.
    pub selected: Vec<usize>,
}

impl NaryRelationState {
    pub fn selected_combos(&self) -> Vec<&Combo> {
        self.selected.iter().map(|&c| &self.combos[c]).collect()
    }
}

/// `B' = CrossAttn(B[selected], T)`, `M_pq = B'_p ⊙ B'_q` over distinct
/// combinations, `S2 = σ(MLP(M))`, then top-`k`. With `force_target`, a
/// target-containing combo is guaranteed to be selected when one exists.
pub fn nary_relations(
    tape: &mut Tape,
    binary: &BinaryRelationState,
    text: Var,
    stage: &RelationStage,
    k: usize,
    force_target: Option<usize>,
) -> Result<NaryRelationState> {
    let pairs = attend_selected_pairs(tape, binary, text, stage)?;
    let combos = dedup_combos(&binary.selected);
    let ps: Vec<usize> = combos.iter().map(|c| c.p).collect();
    let qs: Vec<usize> = combos.iter().map(|c| c.q).collect();
    let left = tape.gather_rows(pairs, &ps);
    let right = tape.gather_rows(pairs, &qs);
    let m = tape.mul(left, right);
    let scores = stage.scores(tape, m);
    let values = tape.value(scores).data().to_vec();
    let mut selected = top_k_indices(&values, k)?;
    if let Some(t) = force_target {
        if !selected.iter().any(|&c| combos[c].contains(t)) {
            let best = (0..combos.len())
                .filter(|&c| combos[c].contains(t))
                .min_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
            if let (Some(b), Some(last)) = (best, selected.last_mut()) {
                *last = b;
            }
        }
    }
    Ok(NaryRelationState { pairs, combos, scores, selected })
}

/// `B' = CrossAttn(B[selected], T)`; also the relation tokens for grounding.
pub fn attend_selected_pairs(
    tape: &mut Tape,
    binary: &BinaryRelationState,
    text: Var,
    stage: &RelationStage,
) -> Result<Var> {
    let rows: Vec<usize> = binary.selected.iter().map(|&(i, j)| i * binary.n + j).collect();
    let chosen = tape.gather_rows(binary.relations, &rows);
    cross_attend(tape, chosen, text, &stage.attn)
}

/// Mean `−ln(1 − s)` over negatives minus `ln max_pos s`.
pub fn nary_loss(tape: &mut Tape, scores: Var, pos: &[usize], neg: &[usize]) -> Result<Var> {
    if pos.is_empty() {
        return Err(Error::Contract("grouped n-ary loss needs at least one target-containing combination".into()));
    }
    Ok(tape.nary_grouped(scores, pos, neg, LOSS_EPS))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::{check_input, check_params, worst, DEFAULT_STEP};
    use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest};
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

    /// Rank by counting strictly better candidates.
    fn rank_oracle<T: Copy + Ord>(items: &[(T, f64)], k: usize) -> Vec<T> {
        let mut ranked: Vec<(usize, T)> = items
            .iter()
            .map(|&(key, s)| {
                let better = items.iter().filter(|&&(k2, s2)| s2 > s || (s2 == s && k2 < key)).count();
                (better, key)
            })
            .collect();
        ranked.retain(|(r, _)| *r < k);
        ranked.sort();
        ranked.into_iter().map(|(_, key)| key).collect()
    }

    #[test]
    fn single_token_attention_weights_are_one() {
        let c = cfg();
        let mut ps = ParamStore::new();
        let block = AttentionBlock::new(&mut ps, "x", c.dim, c.heads, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut tape = Tape::new(&ps);
        let q = tape.constant(random(5, 8, 1));
        let t = tape.constant(random(1, 8, 2));
        let att = block.attn.forward(&mut tape, q, t, None).unwrap();
        for w in att.weights {
            assert!(tape.value(w).data().iter().all(|v| *v == 1.0));
        }
    }

    #[test]
    fn zero_value_projection_leaves_normalized_residual() {
        let c = cfg();
        let mut ps = ParamStore::new();
        let block = AttentionBlock::new(&mut ps, "x", c.dim, c.heads, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        *ps.get_mut(block.attn.v.weight) = Matrix::zeros(8, 8);
        *ps.get_mut(block.attn.o.bias.unwrap()) = Matrix::zeros(1, 8);
        let mut tape = Tape::new(&ps);
        let q = tape.constant(random(3, 8, 1));
        let t = tape.constant(random(1, 8, 2));
        let out = cross_attend(&mut tape, q, t, &block).unwrap();
        let expect = tape.layer_norm_rows(q);
        for (a, b) in tape.value(out).data().iter().zip(tape.value(expect).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_attention_checks_widths_and_gradients() {
        let c = cfg();
        let mut ps = ParamStore::new();
        let block = AttentionBlock::new(&mut ps, "x", c.dim, c.heads, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        {
            let mut tape = Tape::new(&ps);
            let q = tape.constant(random(3, 6, 1));
            let t = tape.constant(random(1, 8, 2));
            assert!(matches!(cross_attend(&mut tape, q, t, &block), Err(Error::Input(_))));
        }
        let text = random(1, 8, 2);
        let q = random(3, 8, 1);
        let r = check_input(
            &ps,
            &q,
            |tape, x| {
                let t = tape.constant(text.clone());
                let o = cross_attend(tape, x, t, &block).unwrap();
                project(tape, o, 3)
            },
            DEFAULT_STEP,
        );
        assert!(r.rel_error < 1e-4, "{}", r.rel_error);
        let reports = check_params(
            &ps,
            None,
            |tape| {
                let x = tape.constant(q.clone());
                let t = tape.input(text.clone());
                let o = cross_attend(tape, x, t, &block).unwrap();
                project(tape, o, 3)
            },
            DEFAULT_STEP,
        );
        assert!(worst(&reports) < 1e-4, "{reports:?}");
    }

    fn stage_fixture(seed: u64) -> (ParamStore, RelationStage, RelationStage) {
        let c = cfg();
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = RelationStage::new(&mut ps, "binary", &c, &mut rng).unwrap();
        let b = RelationStage::new(&mut ps, "nary", &c, &mut rng).unwrap();
        (ps, a, b)
    }

    #[test]
    fn zero_attended_objects_give_pure_geometry() {
        let (mut ps, st, _) = stage_fixture(1);
        // gamma = beta = 0 forces O' = 0
        *ps.get_mut(st.attn.norm.gamma) = Matrix::zeros(1, 8);
        let mut tape = Tape::new(&ps);
        let o = tape.constant(random(3, 8, 1));
        let b = tape.constant(random(3, 8, 2));
        let g = tape.constant(random(9, 8, 3));
        let t = tape.constant(random(1, 8, 4));
        let s = binary_relations(&mut tape, o, b, g, t, &st, 4, None).unwrap();
        assert_eq!(tape.value(s.relations), tape.value(g));
    }

    #[test]
    fn product_term_commutes() {
        let (ps, st, _) = stage_fixture(2);
        let mut tape = Tape::new(&ps);
        let o = tape.constant(random(4, 8, 1));
        let b = tape.constant(random(4, 8, 2));
        let g = tape.constant(random(16, 8, 3));
        let t = tape.constant(random(1, 8, 4));
        let s = binary_relations(&mut tape, o, b, g, t, &st, 4, None).unwrap();
        let rel = tape.value(s.relations);
        let geo = tape.value(g);
        for i in 0..4 {
            for j in 0..4 {
                for c in 0..8 {
                    let a = rel.get(i * 4 + j, c) - geo.get(i * 4 + j, c);
                    let b = rel.get(j * 4 + i, c) - geo.get(j * 4 + i, c);
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn k1_larger_than_off_diagonal_is_a_config_error() {
        assert!(matches!(top_k_pairs(&Matrix::zeros(3, 3), 7), Err(Error::Config(_))));
        assert_eq!(top_k_pairs(&Matrix::zeros(3, 3), 6).unwrap().len(), 6);
        assert!(matches!(top_k_indices(&[0.1, 0.2], 3), Err(Error::Config(_))));
    }

    #[test]
    fn ties_break_lexicographically() {
        let s = Matrix::filled(3, 3, 0.5);
        assert_eq!(top_k_pairs(&s, 3).unwrap(), vec![(0, 1), (0, 2), (1, 0)]);
        assert_eq!(top_k_indices(&[0.2, 0.7, 0.7, 0.1], 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn teacher_forcing_swaps_last_pair() {
        let mut s = Matrix::zeros(4, 4);
        s.set(0, 1, 0.9);
        s.set(1, 0, 0.8);
        s.set(2, 3, 0.7);
        s.set(3, 2, 0.1);
        s.set(3, 0, 0.05);
        let mut sel = top_k_pairs(&s, 2).unwrap();
        assert_eq!(sel, vec![(0, 1), (1, 0)]);
        force_target_pair(&mut sel, &s, 3);
        assert_eq!(sel, vec![(0, 1), (2, 3)]);
        force_target_pair(&mut sel, &s, 0);
        assert_eq!(sel, vec![(0, 1), (2, 3)]);
    }

    #[test]
    fn combo_arithmetic() {
        let combos = dedup_combos(&[(0, 1), (2, 3)]);
        let sets: Vec<Vec<usize>> = combos.iter().map(|c| c.objects.clone()).collect();
        assert_eq!(sets, vec![vec![0, 1], vec![0, 1, 2, 3], vec![2, 3]]);
        let combos = dedup_combos(&[(0, 1), (1, 2)]);
        assert_eq!(combos[1].objects, vec![0, 1, 2]);
        assert_eq!(combos[0].objects, vec![0, 1]);
        // (0,1) and (1,0) describe the same set
        let combos = dedup_combos(&[(0, 1), (1, 0)]);
        assert_eq!(combos.len(), 1);
        assert_eq!((combos[0].p, combos[0].q), (0, 0));
    }

    #[test]
    fn grouping_partitions() {
        let combos = dedup_combos(&[(0, 1), (1, 2), (3, 4)]);
        let (pos, neg) = group_combos(&combos, 1);
        assert_eq!(pos.len() + neg.len(), combos.len());
        assert!(pos.iter().all(|&c| combos[c].contains(1)));
        assert!(neg.iter().all(|&c| !combos[c].contains(1)));
        let (pos, neg) = group_combos(&dedup_combos(&[(0, 1), (1, 2)]), 1);
        assert!(neg.is_empty() && pos.len() == 3);
        let (pos, _) = group_combos(&combos, 7);
        assert!(pos.is_empty());
    }

    #[test]
    fn binary_loss_values() {
        let params = ParamStore::new();
        let mut tape = Tape::new(&params);
        let s = tape.input(Matrix::filled(4, 1, 0.5));
        let r = Matrix::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let l = binary_loss(&mut tape, s, &r, false).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-9);
        let s = tape.input(Matrix::from_vec(4, 1, r.data().to_vec()));
        let l = binary_loss(&mut tape, s, &r, false).unwrap();
        assert!(tape.value(l).item() <= 4.0 * LOSS_EPS);
        let masked = binary_loss(&mut tape, s, &r, true).unwrap();
        assert!(tape.value(masked).item() <= 4.0 * LOSS_EPS);
    }

    #[test]
    fn binary_loss_gradient() {
        let params = ParamStore::new();
        let r = Matrix::from_vec(3, 3, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        for mask in [false, true] {
            let rep = check_input(
                &params,
                &random(9, 1, 4),
                |t, x| {
                    let s = t.sigmoid(x);
                    binary_loss(t, s, &r, mask).unwrap()
                },
                DEFAULT_STEP,
            );
            assert!(rep.rel_error < 1e-4);
        }
    }

    #[test]
    fn nary_loss_values() {
        let params = ParamStore::new();
        let mut tape = Tape::new(&params);
        let s = tape.input(Matrix::from_vec(2, 1, vec![0.5, 0.5]));
        let l = nary_loss(&mut tape, s, &[0], &[1]).unwrap();
        assert!((tape.value(l).item() - 2.0 * std::f64::consts::LN_2).abs() < 1e-9);
        let s = tape.input(Matrix::from_vec(3, 1, vec![1e-12, 1.0 - 1e-12, 1e-12]));
        let l = nary_loss(&mut tape, s, &[1], &[0, 2]).unwrap();
        assert!(tape.value(l).item() < 1e-6);
        assert!(matches!(nary_loss(&mut tape, s, &[], &[0]), Err(Error::Contract(_))));
        let only_pos = nary_loss(&mut tape, s, &[1], &[]).unwrap();
        assert!(tape.value(only_pos).item() < 1e-6);
    }

    #[test]
    fn nary_subgradient_goes_to_first_argmax() {
        let params = ParamStore::new();
        let mut tape = Tape::new(&params);
        let s = tape.input(Matrix::from_vec(4, 1, vec![0.6, 0.3, 0.6, 0.2]));
        let l = nary_loss(&mut tape, s, &[1, 0, 2], &[3]).unwrap();
        let g = tape.backward(l);
        let gs = g.wrt(s).unwrap().data();
        assert!(gs[0] < 0.0);
        assert_eq!(gs[1], 0.0);
        assert_eq!(gs[2], 0.0);
        assert!(gs[3] > 0.0);
    }

    proptest! {
        #[test]
        fn nary_loss_is_monotone(
            scores in prop::collection::vec(0.01f64..0.99, 2..8),
            split in 1usize..7,
            which in 0usize..8,
            delta in 1e-3f64..5e-3,
        ) {
            let split = split.min(scores.len() - 1);
            let pos: Vec<usize> = (0..split).collect();
            let neg: Vec<usize> = (split..scores.len()).collect();
            let params = ParamStore::new();
            let eval = |s: &[f64]| {
                let mut tape = Tape::new(&params);
                let v = tape.input(Matrix::column_vector(s.to_vec()));
                let l = nary_loss(&mut tape, v, &pos, &neg).unwrap();
                tape.value(l).item()
            };
            let base = eval(&scores);
            // lowering a negative
            let k = neg[which % neg.len()];
            let mut lower = scores.clone();
            lower[k] -= delta;
            prop_assert!(eval(&lower) < base);
            // raising the best positive
            let best = *pos.iter().max_by(|&&a, &&b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a))).unwrap();
            let mut raise = scores.clone();
            raise[best] += delta;
            prop_assert!(eval(&raise) < base);
        }

        #[test]
        fn selection_matches_oracles(
            n in 2usize..=10,
            seed in any::<u64>(),
            k1 in 1usize..=8,
            k2 in 1usize..=8,
            coarse in any::<bool>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // coarse scores force plenty of ties
            let draw = |rng: &mut ChaCha8Rng| if coarse { rng.gen_range(0..4) as f64 / 4.0 } else { rng.gen::<f64>() };
            let s = Matrix::from_vec(n, n, (0..n * n).map(|_| draw(&mut rng)).collect());
            let k1 = k1.min(n * (n - 1));
            let got = top_k_pairs(&s, k1).unwrap();
            let items: Vec<((usize, usize), f64)> = (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .filter(|(i, j)| i != j)
                .map(|(i, j)| ((i, j), s.get(i, j)))
                .collect();
            prop_assert_eq!(&got, &rank_oracle(&items, k1));

            let combos = dedup_combos(&got);
            let mut expected: BTreeSet<Vec<usize>> = BTreeSet::new();
            for p in 0..got.len() {
                for q in 0..got.len() {
                    let mut v = vec![got[p].0, got[p].1, got[q].0, got[q].1];
                    v.sort();
                    v.dedup();
                    expected.insert(v);
                }
            }
            let found: BTreeSet<Vec<usize>> = combos.iter().map(|c| c.objects.clone()).collect();
            prop_assert_eq!(found.len(), combos.len());
            prop_assert_eq!(found, expected);
            for c in &combos {
                prop_assert!((2..=4).contains(&c.objects.len()));
                prop_assert!(c.p <= c.q);
            }

            let s2: Vec<f64> = combos.iter().map(|_| draw(&mut rng)).collect();
            let k2 = k2.min(combos.len());
            let sel = top_k_indices(&s2, k2).unwrap();
            let items: Vec<((usize, usize), f64)> = combos.iter().zip(&s2).map(|(c, &v)| ((c.p, c.q), v)).collect();
            let oracle = rank_oracle(&items, k2);
            let got2: Vec<(usize, usize)> = sel.iter().map(|&c| (combos[c].p, combos[c].q)).collect();
            prop_assert_eq!(got2, oracle);
        }
    }

    #[test]
    fn end_to_end_relational_gradients() {
        let c = cfg();
        let (ps, binary, nary) = stage_fixture(11);
        let objects = random(4, 8, 1);
        let boxes = random(4, 8, 2);
        let geometry = random(16, 8, 3);
        let text = random(1, 8, 4);
        let labels = Matrix::from_vec(4, 4, vec![
            0.0, 1.0, 0.0, 0.0, //
            1.0, 0.0, 0.0, 1.0, //
            0.0, 0.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, 0.0,
        ]);
        let build = |tape: &mut Tape| {
            let o = tape.constant(objects.clone());
            let b = tape.constant(boxes.clone());
            let g = tape.constant(geometry.clone());
            let t = tape.constant(text.clone());
            let bs = binary_relations(tape, o, b, g, t, &binary, 4, Some(1)).unwrap();
            let lbr = binary_loss(tape, bs.scores, &labels, c.mask_binary_diagonal).unwrap();
            let ns = nary_relations(tape, &bs, t, &nary, 3, Some(1)).unwrap();
            let (pos, neg) = group_combos(&ns.combos, 1);
            let lnr = nary_loss(tape, ns.scores, &pos, &neg).unwrap();
            tape.add(lbr, lnr)
        };
        let reports = check_params(&ps, None, build, DEFAULT_STEP);
        assert!(worst(&reports) < 1e-3, "{reports:?}");
    }
}
