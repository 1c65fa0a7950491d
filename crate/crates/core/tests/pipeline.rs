use std::fs;

use ldsa::checkpoint;
use ldsa::model::Model;
use ldsa::sweep::{summary_table, sweep_k};
use ldsa::train::{evaluate, read_metrics, train, RunPaths};
use ldsa::{Ablation, Error, RunConfig};

fn small_cfg() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.env.name = "two_roles".into();
    cfg.env.params.insert("episode_limit".into(), "6".into());
    cfg.k = 2;
    cfg.hidden = 8;
    cfg.m = 6;
    cfg.repr_hidden = 8;
    cfg.mixer_embed = 6;
    cfg.batch_size = 4;
    cfg.total_timesteps = 300;
    cfg.eval_interval = 100;
    cfg.eval_episodes = 4;
    cfg.seed = 9;
    cfg
}

fn params_equal(a: &Model, b: &Model) -> bool {
    a.params.blocks().iter().zip(b.params.blocks()).all(|(x, y)| x.name == y.name && x.value == y.value)
}

#[test]
fn run_directory_has_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg();
    let out = train(&cfg, Some(dir.path())).unwrap();
    let paths = RunPaths::new(dir.path());

    let (header, records) = read_metrics(&fs::read_to_string(&paths.metrics).unwrap()).unwrap();
    assert_eq!(header, out.header);
    assert_eq!(header.config_hash, cfg.hash());
    assert_eq!(RunConfig::parse_text(&header.config).unwrap(), cfg);
    assert_eq!(records, out.metrics);
    assert_eq!(records.len(), 3);
    assert!(records.windows(2).all(|w| w[0].timestep < w[1].timestep));
    for r in &records {
        assert_eq!(r.subtask_usage.len(), 2);
        assert!(r.normalized_return.is_some_and(|v| (0.0..=1.0).contains(&v)));
    }

    let timeline = fs::read_to_string(&paths.timeline).unwrap();
    assert!(timeline.lines().count() > 1);
    let reps = fs::read_to_string(&paths.representations).unwrap();
    assert_eq!(reps.lines().count(), 3);
    assert_eq!(checkpoint::read_manifest(&paths.checkpoint).unwrap().config_hash, cfg.hash());
}

#[test]
fn checkpoint_round_trip_preserves_parameters_and_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg();
    let out = train(&cfg, Some(dir.path())).unwrap();
    let (loaded_cfg, model) = checkpoint::load(&dir.path().join("checkpoint")).unwrap();
    assert_eq!(loaded_cfg, cfg);
    assert!(params_equal(&model, &out.learner.model));
    let a = evaluate(&model, &loaded_cfg, 6).unwrap();
    let b = evaluate(&out.learner.model, &cfg, 6).unwrap();
    assert_eq!(a.mean_return.to_bits(), b.mean_return.to_bits());
    assert_eq!(a.switches_per_episode, b.switches_per_episode);
    assert_eq!(a.timeline_csv(2), b.timeline_csv(2));
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg();
    train(&cfg, Some(dir.path())).unwrap();
    let ckpt = dir.path().join("checkpoint");
    let manifest = ckpt.join("manifest.json");
    let text = fs::read_to_string(&manifest).unwrap();
    fs::write(&manifest, text.replacen(&cfg.hash(), "0000", 1)).unwrap();
    assert!(checkpoint::load(&ckpt).is_err());
    fs::write(&manifest, text).unwrap();
    fs::write(ckpt.join("000.bin"), [0u8; 3]).unwrap();
    assert!(checkpoint::load(&ckpt).is_err());
}

#[test]
fn evaluation_leaves_the_model_untouched() {
    let cfg = small_cfg();
    let out = train(&cfg, None).unwrap();
    let before = out.learner.model.params.clone();
    let first = evaluate(&out.learner.model, &cfg, 5).unwrap();
    let second = evaluate(&out.learner.model, &cfg, 5).unwrap();
    assert!(before.blocks().iter().zip(out.learner.model.params.blocks()).all(|(x, y)| x.value == y.value));
    assert_eq!(first.mean_return.to_bits(), second.mean_return.to_bits());
}

#[test]
fn identical_seeds_reproduce_and_different_seeds_diverge() {
    let cfg = small_cfg();
    let a = train(&cfg, None).unwrap();
    let b = train(&cfg, None).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert!(params_equal(&a.learner.model, &b.learner.model));
    let mut other = cfg.clone();
    other.seed += 1;
    let c = train(&other, None).unwrap();
    assert!(!params_equal(&a.learner.model, &c.learner.model));
}

#[test]
fn every_ablation_completes_a_short_run() {
    for ablation in Ablation::ALL {
        let mut cfg = small_cfg();
        cfg.ablation = ablation;
        cfg.total_timesteps = 120;
        cfg.eval_interval = 60;
        let out = train(&cfg, None).unwrap_or_else(|e| panic!("{ablation}: {e}"));
        assert_eq!(out.header.ablation, ablation.to_string());
        assert_eq!(out.metrics.len(), 2, "{ablation}");
    }
}

#[test]
fn sweep_rows_come_back_sorted_by_k() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_cfg();
    cfg.total_timesteps = 60;
    cfg.eval_interval = 60;
    let rows = sweep_k(&cfg, &[4, 1, 2, 2], Some(dir.path())).unwrap();
    assert_eq!(rows.iter().map(|r| r.k).collect::<Vec<_>>(), vec![1, 2, 4]);
    assert!(rows.windows(2).all(|w| w[0].param_count < w[1].param_count));
    for k in [1, 2, 4] {
        assert!(dir.path().join(format!("k{k}")).join("metrics.jsonl").exists());
    }
    assert_eq!(summary_table(&rows).lines().count(), 4);
    assert!(matches!(sweep_k(&cfg, &[], None), Err(Error::Config(_))));
}

#[test]
fn malformed_metrics_streams_are_rejected() {
    assert!(read_metrics("").is_err());
    assert!(read_metrics("{\"kind\":\"eval\"}").is_err());
    let cfg = small_cfg();
    let out = train(&cfg, None).unwrap();
    let header = serde_json::to_string(&out.header).unwrap();
    assert!(read_metrics(&format!("{header}\n{header}\n")).is_err());
    let ok = format!("{header}\n{}\n", serde_json::to_string(&out.metrics[0]).unwrap());
    assert_eq!(read_metrics(&ok).unwrap().1.len(), 1);
}
