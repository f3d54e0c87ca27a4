//! Object and text representations: toy 2-D/3-D object features, their
//! fusion, box and pairwise-geometry embeddings, the sentence encoder and the
//! auxiliary classification heads.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::extract::{tokenize, DEFAULT_RELATIONS};
use crate::nn::{AttentionBlock, LayerNorm, Linear, Mlp};
use crate::scene::{Box3, Scene, Vocabulary, DEFAULT_CATEGORIES};
use crate::tensor::Matrix;

/// Width of the raw pairwise descriptor.
pub const GEO_FEATURES: usize = 6;
/// Width of the raw box parameter vector (center, size).
pub const BOX_FEATURES: usize = 6;
/// Init scale for maps whose inputs are raw scene coordinates.
const COORD_INIT_SCALE: f64 = 0.1;

/// Per-scene encoder outputs.
pub struct FeatureBundle {
    /// Fused object features, `N×C`.
    pub objects: Var,
    /// Sentence feature, `1×C`.
    pub text: Var,
    pub boxes: Var,
    /// Pairwise geometry, `N²×C` with row `i·N + j`.
    pub geometry: Var,
}

/// `O = MLP(φ(f2d) + f3d) + f3d`.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub project: Linear,
    pub mlp: Mlp,
}

impl FusionBlock {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        Self {
            project: Linear::new(ps, "fusion.project", cfg.dim_2d, cfg.dim, rng),
            mlp: Mlp::new(ps, "fusion.mlp", cfg.dim, cfg.mlp_hidden, cfg.dim, 0.0, rng),
        }
    }
}

pub fn fuse_object_features(tape: &mut Tape, f2d: Var, f3d: Var, block: &FusionBlock) -> Result<Var> {
    let (a, b) = (tape.value(f2d), tape.value(f3d));
    if a.rows() != b.rows() || a.cols() != block.project.in_dim || b.cols() != block.project.out_dim {
        return Err(Error::Input(format!(
            "fusion expects {}-wide 2-D and {}-wide 3-D features with equal rows, got {}x{} and {}x{}",
            block.project.in_dim,
            block.project.out_dim,
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let p = block.project.forward(tape, f2d);
    let s = tape.add(p, f3d);
    let m = block.mlp.forward(tape, s);
    Ok(tape.add(m, f3d))
}

/// Stand-in for image and point-cloud encoders: learned category embeddings,
/// a box MLP and fixed per-scene Gaussian noise.
#[derive(Clone, Debug)]
pub struct ToyObjectEncoder {
    pub embed_3d: ParamId,
    pub embed_2d: ParamId,
    pub box_mlp: Mlp,
    pub vocab: Vocabulary,
    pub noise_sigma: f64,
}

impl ToyObjectEncoder {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig, vocab: Vocabulary, rng: &mut impl Rng) -> Self {
        Self {
            embed_3d: ps.uniform("objects.embed_3d", vocab.len(), cfg.dim, 1.0, rng),
            embed_2d: ps.uniform("objects.embed_2d", vocab.len(), cfg.dim_2d, 1.0, rng),
            box_mlp: Mlp::new(ps, "objects.box_mlp", BOX_FEATURES, cfg.mlp_hidden, cfg.dim, 0.0, rng),
            vocab,
            noise_sigma: cfg.noise_sigma,
        }
    }

    pub fn category_indices(&self, scene: &Scene) -> Result<Vec<usize>> {
        scene
            .objects
            .iter()
            .map(|o| {
                self.vocab
                    .index_of(&o.category)
                    .ok_or_else(|| Error::Input(format!("category {:?} is not in the model vocabulary", o.category)))
            })
            .collect()
    }
}

/// `N×6` matrix of box parameters.
pub fn box_matrix(boxes: &[Box3]) -> Matrix {
    Matrix::from_vec(boxes.len(), BOX_FEATURES, boxes.iter().flat_map(|b| b.params()).collect())
}

/// Noise is drawn from a stream keyed by the scene seed, so a scene always
/// sees the same perturbation.
fn scene_noise(scene: &Scene, cols: usize, sigma: f64) -> Matrix {
    let mut m = Matrix::zeros(scene.len(), cols);
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0x6e6f_6973_6566_6561);
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        for v in m.data_mut() {
            *v = normal.sample(&mut rng);
        }
    }
    m
}

/// Returns `(f2d, f3d)`.
pub fn toy_object_features(tape: &mut Tape, scene: &Scene, enc: &ToyObjectEncoder) -> Result<(Var, Var)> {
    let cats = enc.category_indices(scene)?;
    let e2 = tape.param(enc.embed_2d);
    let f2d = tape.gather_rows(e2, &cats);
    let e3 = tape.param(enc.embed_3d);
    let e3 = tape.gather_rows(e3, &cats);
    let raw = tape.constant(box_matrix(&scene.boxes()).map(|x| x * COORD_INIT_SCALE));
    let shape = enc.box_mlp.forward(tape, raw);
    let f3d = tape.add(e3, shape);
    let cols = tape.value(f3d).cols();
    let noise = tape.constant(scene_noise(scene, cols, enc.noise_sigma));
    Ok((f2d, tape.add(f3d, noise)))
}

/// Linear map of the raw 6-vector (center, size).
#[derive(Clone, Debug)]
pub struct BoxEmbedding {
    pub map: Linear,
}

impl BoxEmbedding {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let weight = ps.uniform("box.weight", BOX_FEATURES, cfg.dim, COORD_INIT_SCALE, rng);
        let bias = Some(ps.zeros("box.bias", 1, cfg.dim));
        Self { map: Linear { weight, bias, in_dim: BOX_FEATURES, out_dim: cfg.dim } }
    }
}

/// Embeds each box as one row.
pub fn embed_boxes(tape: &mut Tape, boxes: &[Box3], emb: &BoxEmbedding) -> Var {
    let x = tape.constant(box_matrix(boxes));
    emb.map.forward(tape, x)
}

pub fn embed_box(tape: &mut Tape, b: &Box3, emb: &BoxEmbedding) -> Var {
    embed_boxes(tape, std::slice::from_ref(b), emb)
}

/// Raw descriptor of `j` relative to `i`: center offset `c_j − c_i`, center
/// distance, `ln(vol_i / vol_j)` and the signed vertical gap (positive when
/// `i` lies wholly above `j`, negative when wholly below, zero when the
/// z-intervals overlap).
pub fn geometry_descriptor(a: &Box3, b: &Box3) -> [f64; GEO_FEATURES] {
    let d = [b.center[0] - a.center[0], b.center[1] - a.center[1], b.center[2] - a.center[2]];
    let (amin, amax, bmin, bmax) = (a.min()[2], a.max()[2], b.min()[2], b.max()[2]);
    let gap = if amin >= bmax {
        amin - bmax
    } else if amax <= bmin {
        amax - bmin
    } else {
        0.0
    };
    [d[0], d[1], d[2], a.center_distance(b), (a.volume() / b.volume()).ln(), gap]
}

/// `N²×6` descriptors with row `i·N + j`.
pub fn geometry_matrix(boxes: &[Box3]) -> Matrix {
    let n = boxes.len();
    let mut m = Matrix::zeros(n * n, GEO_FEATURES);
    for i in 0..n {
        for j in 0..n {
            m.row_mut(i * n + j).copy_from_slice(&geometry_descriptor(&boxes[i], &boxes[j]));
        }
    }
    m
}

#[derive(Clone, Debug)]
pub struct GeometryEmbedding {
    pub map: Linear,
}

impl GeometryEmbedding {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let weight = ps.uniform("geometry.weight", GEO_FEATURES, cfg.dim, COORD_INIT_SCALE, rng);
        let bias = Some(ps.zeros("geometry.bias", 1, cfg.dim));
        Self { map: Linear { weight, bias, in_dim: GEO_FEATURES, out_dim: cfg.dim } }
    }
}

pub fn pairwise_geometry(tape: &mut Tape, boxes: &[Box3], emb: &GeometryEmbedding) -> Result<Var> {
    if boxes.is_empty() {
        return Err(Error::Input("pairwise geometry needs at least one box".into()));
    }
    let x = tape.constant(geometry_matrix(boxes));
    Ok(emb.map.forward(tape, x))
}

pub const UNKNOWN_TOKEN: &str = "<unk>";
const EXTRA_WORDS: &[&str] = &["the", "a", "that", "which", "is", "and", "of", "one", "it", ",", "."];

/// Fixed word list: relation words, the full category list (singular and
/// `s`-plural) and a few function words. Anything else maps to `<unk>`.
#[derive(Clone, Debug)]
pub struct TokenVocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl TokenVocabulary {
    pub fn standard() -> Self {
        let mut words = vec![UNKNOWN_TOKEN.to_string()];
        let rel_words = DEFAULT_RELATIONS.iter().flat_map(|r| r.split_whitespace());
        let cats = DEFAULT_CATEGORIES.iter().flat_map(|c| [c.to_string(), format!("{c}s")]);
        for w in rel_words.map(str::to_string).chain(cats).chain(EXTRA_WORDS.iter().map(|w| w.to_string())) {
            if !words.contains(&w) {
                words.push(w);
            }
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.index.get(t.as_str()).copied().unwrap_or(0)).collect()
    }
}

/// Token and position embeddings, a stack of self-attention + feed-forward
/// layers, mean pooling, and a category head over the pooled vector.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub tokens: TokenVocabulary,
    pub embed: ParamId,
    pub position: ParamId,
    pub layers: Vec<(AttentionBlock, Mlp, LayerNorm)>,
    pub head: Linear,
    pub max_tokens: usize,
}

impl TextEncoder {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig, n_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        let tokens = TokenVocabulary::standard();
        let embed = ps.uniform("text.embed", tokens.len(), cfg.dim, 1.0, rng);
        let position = ps.uniform("text.position", cfg.max_tokens, cfg.dim, 0.5, rng);
        let mut layers = Vec::with_capacity(cfg.text_layers);
        for l in 0..cfg.text_layers {
            layers.push((
                AttentionBlock::new(ps, &format!("text.{l}.attn"), cfg.dim, cfg.heads, cfg.dropout, rng)?,
                Mlp::new(ps, &format!("text.{l}.ffn"), cfg.dim, cfg.mlp_hidden, cfg.dim, cfg.dropout, rng),
                LayerNorm::new(ps, &format!("text.{l}.ffn_norm"), cfg.dim),
            ));
        }
        let head = Linear::new(ps, "text.head", cfg.dim, n_classes, rng);
        Ok(Self { tokens, embed, position, layers, head, max_tokens: cfg.max_tokens })
    }
}

/// Returns `(T, category logits)`, both single rows. Tokens beyond
/// `max_tokens` are dropped.
pub fn encode_text(tape: &mut Tape, text: &str, enc: &TextEncoder) -> Result<(Var, Var)> {
    let mut ids = enc.tokens.encode(text);
    if ids.is_empty() {
        return Err(Error::Input("cannot encode empty text".into()));
    }
    ids.truncate(enc.max_tokens);
    let positions: Vec<usize> = (0..ids.len()).collect();
    let e = tape.param(enc.embed);
    let x = tape.gather_rows(e, &ids);
    let p = tape.param(enc.position);
    let p = tape.gather_rows(p, &positions);
    let mut x = tape.add(x, p);
    for (attn, ffn, norm) in &enc.layers {
        x = attn.forward(tape, x, x, None)?;
        let f = ffn.forward(tape, x);
        let f = tape.dropout(f, ffn.dropout);
        let r = tape.add(x, f);
        x = norm.forward(tape, r);
    }
    let t = tape.mean_rows(x);
    let logits = enc.head.forward(tape, t);
    Ok((t, logits))
}

/// `N×|vocab|` logits for the per-object category loss.
pub fn classify_objects(tape: &mut Tape, objects: Var, head: &Linear) -> Var {
    head.forward(tape, objects)
}
