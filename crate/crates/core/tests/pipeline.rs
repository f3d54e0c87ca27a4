//! End-to-end plumbing: files written by one stage load unchanged in the next.

use b2n3d::checkpoint::Checkpoint;
use b2n3d::config::{Config, ModelConfig};
use b2n3d::report::plot_reports;
use b2n3d::scene::{read_records, write_records, Record};
use b2n3d::synth::{generate_records, GenConfig};
use b2n3d::train::{evaluate, train, EvalReport, SceneResult, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> Config {
    let mut cfg = Config::default();
    cfg.model = ModelConfig { dim: 16, heads: 4, mlp_hidden: 16, dim_2d: 8, k1: 8, k2: 8, ..Default::default() };
    cfg.gen = GenConfig { n_objects: 8, n_categories: 4, seed: 3, ..Default::default() };
    cfg.train.batch_size = 4;
    cfg.train.epochs = 2;
    cfg
}

fn records(cfg: &GenConfig, n: usize) -> Vec<Record> {
    generate_records(cfg, n).unwrap().into_iter().map(|(r, _)| r).collect()
}

#[test]
fn records_survive_jsonl() {
    let data = records(&GenConfig::default(), 25);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    write_records(&path, &data).unwrap();
    assert_eq!(read_records(&path).unwrap(), data);
}

#[test]
fn config_text_round_trips() {
    let mut cfg = small_config();
    cfg.train.lr0 = 1.25e-4;
    cfg.model.lref_over_all_objects = true;
    assert_eq!(Config::parse(&cfg.to_text()).unwrap(), cfg);
}

#[test]
fn partial_config_keeps_defaults() {
    let cfg = Config::parse("epochs = 7\ngen_seed = 4\n").unwrap();
    assert_eq!(cfg.train.epochs, 7);
    assert_eq!(cfg.train.batch_size, 20);
    assert_eq!(cfg.gen, GenConfig { seed: 4, ..Default::default() });
    assert_eq!(cfg.model, ModelConfig::default());
}

#[test]
fn checkpoint_reloads_to_the_same_predictions() {
    let cfg = small_config();
    let data = records(&cfg.gen, 12);
    let mut state = TrainState::new(&cfg).unwrap();
    train(&mut state, &data, None, &cfg, |_| {}).unwrap();
    let before = evaluate(&state.model, &state.params, &data, cfg.train.ablation, 2).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    Checkpoint::new(cfg.clone(), state).save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    let after = evaluate(&ck.state.model, &ck.state.params, &data, cfg.train.ablation, 2).unwrap();
    assert_eq!(before, after);
}

#[test]
fn reports_reload_and_plot() {
    let cfg = small_config();
    let data = records(&cfg.gen, 8);
    let mut state = TrainState::new(&cfg).unwrap();
    train(&mut state, &data, Some(&data), &cfg, |_| {}).unwrap();
    let mut rep = evaluate(&state.model, &state.params, &data, cfg.train.ablation, 2).unwrap();
    rep.history = state.history.clone();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    rep.save(&path).unwrap();
    let back = EvalReport::load(&path).unwrap();
    assert_eq!(serde_json::to_string(&back).unwrap(), serde_json::to_string(&rep).unwrap());

    let out = plot_reports(&[back.clone(), back], dir.path().join("plots")).unwrap();
    assert!(out.files.iter().all(|f| f.exists()));
    assert!(out.files.iter().any(|f| f.ends_with("comparison.svg")));
    assert!(out.files.iter().any(|f| f.ends_with("summary.csv")));
}

/// Guessing uniformly among the target's category has expected accuracy
/// `mean(1/k)`; the simulated score must sit within three binomial standard
/// deviations of it.
#[test]
fn uniform_guessing_matches_its_expectation() {
    let data = records(&GenConfig::default(), 2000);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut expected = 0.0;
    let mut variance = 0.0;
    let scenes: Vec<SceneResult> = data
        .iter()
        .enumerate()
        .map(|(index, r)| {
            let candidates = r.scene.ids_of(&r.utterance.target_category);
            let p = 1.0 / candidates.len() as f64;
            expected += p;
            variance += p * (1.0 - p);
            SceneResult {
                index,
                predicted: candidates[rng.gen_range(0..candidates.len())],
                target: r.scene.target_id,
                rn: r.utterance.rn,
                distractors: r.scene.distractor_count(),
                target_in_graph: true,
                text_class_correct: true,
            }
        })
        .collect();
    let n = scenes.len() as f64;
    let rep = EvalReport::from_scenes("uniform", scenes, 2);
    let (mean, sigma) = (expected / n, variance.sqrt() / n);
    assert!(
        (rep.overall_acc - mean).abs() <= 3.0 * sigma,
        "accuracy {} vs expected {mean} (sigma {sigma})",
        rep.overall_acc
    );
    // every scene has at least two candidates, so guessing is far from perfect
    assert!(mean <= 0.5);
}
