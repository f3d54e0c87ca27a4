use std::collections::{BTreeMap, BTreeSet};
use std::ops::{Range, RangeInclusive};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::predicates::{evaluate_predicate, Predicate};
use crate::error::{Error, Result};
use crate::scene::{
    validate_scene, write_records, Box3, CategoryPair, ObjectProposal, Record, Scene, SoftRelationalLabel, Utterance,
    Vocabulary, DEFAULT_MAX_OBJECTS,
};

const MAX_PLACEMENT_RETRIES: usize = 1000;
const MAX_CONJUNCTION_ATTEMPTS: usize = 200;
const MAX_RECORD_ATTEMPTS: usize = 200;
const STACK_PROBABILITY: f64 = 0.25;
const CHAIN_PROBABILITY: f64 = 0.35;
const SINGLETON_ANCHORS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_objects: usize,
    pub n_categories: usize,
    pub relations_min: usize,
    pub relations_max: usize,
    pub min_distractors: usize,
    pub scene_extent: [f64; 3],
    pub max_objects: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_objects: 12,
            n_categories: 6,
            relations_min: 1,
            relations_max: 3,
            min_distractors: 2,
            scene_extent: [10.0, 10.0, 3.0],
            max_objects: DEFAULT_MAX_OBJECTS,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn relations(&self) -> RangeInclusive<usize> {
        self.relations_min..=self.relations_max
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::first(self.n_categories)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_objects < 2 || self.n_objects > self.max_objects {
            return Err(Error::Config(format!("n_objects must be in 2..={}", self.max_objects)));
        }
        if self.n_objects < 2 * self.min_distractors {
            return Err(Error::Config(format!(
                "n_objects ({}) must be at least 2*min_distractors ({})",
                self.n_objects,
                2 * self.min_distractors
            )));
        }
        if self.relations_min == 0 || self.relations_min > self.relations_max {
            return Err(Error::Config("relations_per_utterance must be a nonempty range starting at 1 or more".into()));
        }
        if self.n_categories < 2 {
            return Err(Error::Config("need at least two categories".into()));
        }
        if !self.scene_extent.iter().all(|&e| e > 0.0) {
            return Err(Error::Config("scene_extent must be positive".into()));
        }
        self.vocabulary().map(|_| ())
    }

    /// Seed of the `index`-th record's independent stream.
    pub fn record_seed(&self, index: u64) -> u64 {
        splitmix64(self.seed ^ splitmix64(index.wrapping_add(0x9e37_79b9_7f4a_7c15)))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn category_counts(cfg: &GenConfig, vocab: &Vocabulary, rng: &mut impl Rng) -> Result<(usize, Vec<usize>)> {
    let n = cfg.n_objects;
    let target_cat = rng.gen_range(0..vocab.len());
    let base = 1 + cfg.min_distractors;
    if n < base + 1 {
        return Err(Error::Generation(format!(
            "{n} objects cannot hold a target, {} distractors and an anchor",
            cfg.min_distractors
        )));
    }
    let mut counts = vec![0usize; vocab.len()];
    counts[target_cat] = base + usize::from(n >= base + SINGLETON_ANCHORS + 2 && rng.gen_bool(0.5));
    let mut others: Vec<usize> = (0..vocab.len()).filter(|&c| c != target_cat).collect();
    others.shuffle(rng);
    let mut remaining = n - counts[target_cat];
    let singles = others.len().min(SINGLETON_ANCHORS).min(remaining);
    for &c in &others[..singles] {
        counts[c] = 1;
    }
    remaining -= singles;
    let rest = &others[singles..];
    if rest.is_empty() {
        counts[target_cat] += remaining;
    } else {
        // every "rest" category needs 0 or ≥2 instances so it cannot act as a singleton anchor
        while remaining > 0 {
            let c = rest[rng.gen_range(0..rest.len())];
            let take = if counts[c] == 0 { 2.min(remaining) } else { 1 };
            if counts[c] == 0 && take < 2 {
                counts[target_cat] += take;
            } else {
                counts[c] += take;
            }
            remaining -= take;
        }
    }
    Ok((target_cat, counts))
}

fn place_boxes(cfg: &GenConfig, n: usize, rng: &mut impl Rng) -> Result<Vec<Box3>> {
    let ext = cfg.scene_extent;
    let mut placed: Vec<Box3> = Vec::with_capacity(n);
    let mut on_floor: Vec<usize> = Vec::new();
    let mut retries = 0;
    while placed.len() < n {
        if retries >= MAX_PLACEMENT_RETRIES {
            return Err(Error::Generation(format!("could not place {n} boxes in {MAX_PLACEMENT_RETRIES} tries")));
        }
        let height = rng.gen_range(0.3..1.2_f64).min(ext[2] * 0.45);
        let stack = !on_floor.is_empty() && rng.gen_bool(STACK_PROBABILITY);
        let candidate = if stack {
            let base = placed[on_floor[rng.gen_range(0..on_floor.len())]];
            let sx = base.size[0] * rng.gen_range(0.4..0.9);
            let sy = base.size[1] * rng.gen_range(0.4..0.9);
            let (bmin, bmax) = (base.min(), base.max());
            let cx = rng.gen_range(bmin[0] + sx / 2.0..=bmax[0] - sx / 2.0);
            let cy = rng.gen_range(bmin[1] + sy / 2.0..=bmax[1] - sy / 2.0);
            let z0 = bmax[2];
            if z0 + height > ext[2] {
                retries += 1;
                continue;
            }
            Box3::new([cx, cy, z0 + height / 2.0], [sx, sy, height])
        } else {
            let sx = rng.gen_range(0.4..1.4_f64).min(ext[0] / 2.0);
            let sy = rng.gen_range(0.4..1.4_f64).min(ext[1] / 2.0);
            let cx = rng.gen_range(sx / 2.0..=ext[0] - sx / 2.0);
            let cy = rng.gen_range(sy / 2.0..=ext[1] - sy / 2.0);
            Box3::new([cx, cy, height / 2.0], [sx, sy, height])
        };
        if placed.iter().any(|b| b.overlaps(&candidate)) {
            retries += 1;
            continue;
        }
        if !stack {
            on_floor.push(placed.len());
        }
        placed.push(candidate);
    }
    Ok(placed)
}

/// Random scene satisfying `cfg`; the target category has at least
/// `min_distractors` other instances and at least one other category occurs
/// exactly once so it can serve as an unambiguous anchor.
pub fn generate_scene(cfg: &GenConfig, seed: u64, rng: &mut impl Rng) -> Result<Scene> {
    cfg.validate().map_err(|e| Error::Generation(e.to_string()))?;
    let vocab = cfg.vocabulary()?;
    let (target_cat, counts) = category_counts(cfg, &vocab, rng)?;
    let mut cats: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &k)| std::iter::repeat_n(c, k)).collect();
    cats.shuffle(rng);
    let boxes = place_boxes(cfg, cats.len(), rng)?;
    let objects: Vec<ObjectProposal> = cats
        .iter()
        .zip(boxes)
        .enumerate()
        .map(|(id, (&c, bbox))| ObjectProposal { id, category: vocab.name(c).to_string(), bbox })
        .collect();
    let candidates: Vec<usize> = objects.iter().filter(|o| o.category == vocab.name(target_cat)).map(|o| o.id).collect();
    let target_id = candidates[rng.gen_range(0..candidates.len())];
    let scene = Scene { objects, target_id, seed };
    debug_assert!(validate_scene(&scene, &vocab, cfg.max_objects).is_empty());
    Ok(scene)
}

/// One predicate applied to a subject with concrete anchor objects.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Atom {
    pub predicate: Predicate,
    pub anchors: Vec<usize>,
}

/// A relation between the last anchor and a further object, appended to the
/// final clause ("... the A that is left of the B").
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chain {
    pub subject: usize,
    pub predicate: Predicate,
    pub anchor: usize,
}

/// Structured meaning of a synthesized description.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conjunction {
    pub atoms: Vec<Atom>,
    pub chain: Option<Chain>,
}

/// Evaluates `atom` with `subject` as the subject, comparing against the
/// other members of `candidates`.
pub fn atom_holds(scene: &Scene, atom: &Atom, subject: usize, candidates: &[usize]) -> bool {
    let anchors: Vec<Box3> = atom.anchors.iter().map(|&a| scene.objects[a].bbox).collect();
    let competitors: Vec<Box3> =
        candidates.iter().filter(|&&c| c != subject).map(|&c| scene.objects[c].bbox).collect();
    evaluate_predicate(atom.predicate, &scene.objects[subject].bbox, &anchors, &competitors).unwrap_or(false)
}

/// Every same-category candidate that satisfies all atoms.
pub fn satisfiers(scene: &Scene, atoms: &[Atom]) -> Vec<usize> {
    let candidates = scene.ids_of(&scene.target().category);
    candidates.iter().copied().filter(|&c| atoms.iter().all(|a| atom_holds(scene, a, c, &candidates))).collect()
}

fn singleton_anchors(scene: &Scene) -> Vec<usize> {
    let target_cat = &scene.target().category;
    scene
        .objects
        .iter()
        .filter(|o| &o.category != target_cat && scene.ids_of(&o.category).len() == 1)
        .map(|o| o.id)
        .collect()
}

fn true_atoms(scene: &Scene, anchors: &[usize]) -> Vec<Atom> {
    let candidates = scene.ids_of(&scene.target().category);
    let mut atoms = Vec::new();
    for &a in anchors {
        for p in Predicate::ALL.into_iter().filter(|p| p.arity() == 2) {
            atoms.push(Atom { predicate: p, anchors: vec![a] });
        }
    }
    for (i, &a) in anchors.iter().enumerate() {
        for &b in &anchors[i + 1..] {
            atoms.push(Atom { predicate: Predicate::Between, anchors: vec![a, b] });
        }
    }
    atoms.retain(|atom| atom_holds(scene, atom, scene.target_id, &candidates));
    atoms
}

fn is_unique(scene: &Scene, atoms: &[Atom]) -> bool {
    satisfiers(scene, atoms) == [scene.target_id]
}

fn is_minimal(scene: &Scene, atoms: &[Atom]) -> bool {
    (0..atoms.len()).all(|skip| {
        let rest: Vec<Atom> = atoms.iter().enumerate().filter(|&(i, _)| i != skip).map(|(_, a)| a.clone()).collect();
        rest.is_empty() || !is_unique(scene, &rest)
    })
}

fn find_conjunction(scene: &Scene, atoms: &[Atom], k: usize, rng: &mut impl Rng) -> Option<Vec<Atom>> {
    if atoms.len() < k {
        return None;
    }
    let mut fallback = None;
    for _ in 0..MAX_CONJUNCTION_ATTEMPTS {
        let mut pick: Vec<Atom> = atoms.choose_multiple(rng, k).cloned().collect();
        pick.sort();
        pick.dedup();
        if pick.len() != k || !is_unique(scene, &pick) {
            continue;
        }
        if is_minimal(scene, &pick) {
            pick.shuffle(rng);
            return Some(pick);
        }
        fallback.get_or_insert(pick);
    }
    fallback
}

fn clause(scene: &Scene, atom: &Atom) -> String {
    let name = |i: usize| &scene.objects[i].category;
    match atom.predicate {
        Predicate::Between => {
            format!("between the {} and the {}", name(atom.anchors[0]), name(atom.anchors[1]))
        }
        p => format!("{} the {}", p.phrase(), name(atom.anchors[0])),
    }
}

fn find_chain(scene: &Scene, from: usize, anchors: &[usize], rng: &mut impl Rng) -> Option<Chain> {
    let mut options = Vec::new();
    for &b in anchors.iter().filter(|&&b| b != from && scene.objects[b].category != scene.objects[from].category) {
        for p in [Predicate::LeftOf, Predicate::RightOf, Predicate::OnTopOf, Predicate::Below] {
            if evaluate_predicate(p, &scene.objects[from].bbox, &[scene.objects[b].bbox], &[]).unwrap_or(false) {
                options.push(Chain { subject: from, predicate: p, anchor: b });
            }
        }
    }
    options.choose(rng).cloned()
}

/// Builds a uniquely-referring description of the scene's target. The
/// result is verified by exhaustive evaluation over all same-category
/// candidates before it is returned.
pub fn synthesize_utterance(scene: &Scene, cfg: &GenConfig, rng: &mut impl Rng) -> Result<(Utterance, Conjunction)> {
    let anchors = singleton_anchors(scene);
    let atoms = true_atoms(scene, &anchors);
    let mut ks: Vec<usize> = cfg.relations().collect();
    let first = ks.remove(rng.gen_range(0..ks.len()));
    let order = std::iter::once(first).chain(ks);
    let mut chosen = None;
    for k in order {
        if let Some(found) = find_conjunction(scene, &atoms, k, rng) {
            chosen = Some(found);
            break;
        }
    }
    let atoms = chosen.ok_or_else(|| Error::Synthesis("no disambiguating conjunction".into()))?;
    if !is_unique(scene, &atoms) {
        return Err(Error::Synthesis("conjunction does not single out the target".into()));
    }

    let last = atoms.last().expect("nonempty conjunction");
    let chain = if atoms.len() < cfg.relations_max && last.predicate != Predicate::Between && rng.gen_bool(CHAIN_PROBABILITY)
    {
        find_chain(scene, last.anchors[0], &anchors, rng)
    } else {
        None
    };

    let target_cat = scene.target().category.clone();
    let mut clauses: Vec<String> = atoms.iter().map(|a| clause(scene, a)).collect();
    let mut pairs = BTreeSet::new();
    for atom in &atoms {
        for &a in &atom.anchors {
            pairs.insert(CategoryPair::new(target_cat.clone(), scene.objects[a].category.clone()));
        }
    }
    if let Some(ch) = &chain {
        let tail = clauses.last_mut().expect("nonempty");
        tail.push_str(&format!(" that is {} the {}", ch.predicate.phrase(), scene.objects[ch.anchor].category));
        pairs.insert(CategoryPair::new(
            scene.objects[ch.subject].category.clone(),
            scene.objects[ch.anchor].category.clone(),
        ));
    }
    let text = format!("the {} {}", target_cat, clauses.join(" and "));
    let label = SoftRelationalLabel { pairs };
    let rn = label.len();
    Ok((Utterance { text, pairs: label, target_category: target_cat, rn }, Conjunction { atoms, chain }))
}

/// Generates the `index`-th record of a dataset; independent of every other index.
pub fn generate_record(cfg: &GenConfig, index: u64) -> Result<(Record, Conjunction)> {
    let seed = cfg.record_seed(index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last_err = None;
    for _ in 0..MAX_RECORD_ATTEMPTS {
        let scene = match generate_scene(cfg, seed, &mut rng) {
            Ok(s) => s,
            Err(e @ Error::Config(_)) => return Err(e),
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        match synthesize_utterance(&scene, cfg, &mut rng) {
            Ok((utterance, conj)) => return Ok((Record { scene, utterance }, conj)),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Generation("no attempts made".into())))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub count: usize,
    pub rn_histogram: BTreeMap<usize, usize>,
    pub distractor_histogram: BTreeMap<usize, usize>,
    pub predicate_counts: BTreeMap<String, usize>,
}

impl DatasetSummary {
    pub fn from_records<'a>(records: impl IntoIterator<Item = (&'a Record, Option<&'a Conjunction>)>) -> Self {
        let mut s = Self::default();
        for (r, conj) in records {
            s.count += 1;
            *s.rn_histogram.entry(r.utterance.rn).or_default() += 1;
            *s.distractor_histogram.entry(r.scene.distractor_count()).or_default() += 1;
            if let Some(c) = conj {
                for a in &c.atoms {
                    *s.predicate_counts.entry(a.predicate.name().to_string()).or_default() += 1;
                }
            }
        }
        s
    }
}

/// Generates `count` records (in parallel, order-independent).
pub fn generate_records(cfg: &GenConfig, count: usize) -> Result<Vec<(Record, Conjunction)>> {
    generate_record_range(cfg, 0..count as u64)
}

/// Records with the given stream indices; disjoint ranges give disjoint
/// record streams, which is how train and validation sets are split.
pub fn generate_record_range(cfg: &GenConfig, indices: Range<u64>) -> Result<Vec<(Record, Conjunction)>> {
    cfg.validate()?;
    indices.into_par_iter().map(|i| generate_record(cfg, i)).collect()
}

/// Writes `count` records to `path` and returns summary statistics.
pub fn generate_dataset(cfg: &GenConfig, count: usize, path: &Path) -> Result<DatasetSummary> {
    let generated = generate_records(cfg, count)?;
    let summary = DatasetSummary::from_records(generated.iter().map(|(r, c)| (r, Some(c))));
    let records: Vec<Record> = generated.into_iter().map(|(r, _)| r).collect();
    write_records(path, &records)?;
    Ok(summary)
}
