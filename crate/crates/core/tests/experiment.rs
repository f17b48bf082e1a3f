use nextact::features::{ContextMask, SampleCache};
use nextact::harness::{run_ablation, ArmStatus, ABLATION_ARMS};
use nextact::synth::{generate_dataset, ScenarioConfig};
use nextact::training::TrainConfig;

fn tiny() -> (SampleCache, TrainConfig) {
    let corpus = generate_dataset(&ScenarioConfig::default_scenario(), 15, 31).unwrap();
    let cache = SampleCache::build(&corpus.manifest, &corpus.cases, (9, 3, 3), 5, 31, ContextMask::FULL).unwrap();
    let cfg = TrainConfig {
        max_epochs: 4,
        hidden: vec![16],
        embed_dim: 4,
        learning_rate: 1e-3,
        seed: 31,
        ..TrainConfig::default()
    };
    (cache, cfg)
}

#[test]
fn ablation_is_reproducible() {
    let (cache, cfg) = tiny();
    let a = run_ablation(&cache, &cfg, |_, _| {}).unwrap();
    let b = run_ablation(&cache, &cfg, |_, _| {}).unwrap();
    assert_eq!(a.rows.len(), ABLATION_ARMS.len());
    assert_eq!(a.cache_hash, cache.hash().unwrap());
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert_eq!(x.status, ArmStatus::Ok);
        assert_eq!(x.mask, y.mask);
        assert_eq!(x.weighted_f1, y.weighted_f1);
        assert_eq!(x.samples_f1, y.samples_f1);
        assert_eq!(x.epochs, y.epochs);
        assert_eq!(x.seed, cfg.seed);
        assert_eq!(x.cache_hash, a.cache_hash);
    }
    let table = a.render_table();
    assert!(a.rows.iter().all(|r| table.contains(&r.description)));
}

#[test]
fn different_seed_changes_results() {
    let (cache, cfg) = tiny();
    let a = run_ablation(&cache, &cfg, |_, _| {}).unwrap();
    let other = TrainConfig { seed: 32, ..cfg };
    let b = run_ablation(&cache, &other, |_, _| {}).unwrap();
    assert!(a.rows.iter().zip(&b.rows).any(|(x, y)| x.weighted_f1 != y.weighted_f1));
}
