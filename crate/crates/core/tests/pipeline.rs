use tracehead::pipeline::{self, PipelineConfig, PipelineError, ErrorClass};
use tracehead::provider::ScriptedProvider;

fn planted(dir: &std::path::Path, n: usize) -> PipelineConfig {
    let path = pipeline::write_planted_workspace(dir, n, 7).unwrap();
    let cfg = PipelineConfig::load(&path).unwrap();
    cfg.validate().unwrap();
    cfg
}

fn provider(cfg: &PipelineConfig) -> ScriptedProvider {
    ScriptedProvider::from_path(&cfg.provider.mock.as_ref().unwrap().script).unwrap()
}

#[test]
fn planted_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = planted(dir.path(), 120);
    cfg.eval.report.bootstrap.n_boot = 1000;
    let p = provider(&cfg);
    let report = pipeline::run_all(&cfg, &p).unwrap();
    let card: tracehead::features::FeatureCard =
        serde_json::from_str(&std::fs::read_to_string(cfg.artifact("feature_card.json")).unwrap()).unwrap();
    let accepted: Vec<&str> = card.columns().map(|e| e.spec.feature_name.as_str()).collect();
    println!("accepted {accepted:?}");
    for m in report.report.metrics.iter().filter(|m| m.app == "ALL") {
        println!("{} {} {:.3}", m.method, m.metric, m.mean);
    }
    assert!(accepted.contains(&"user_intent"));
}

#[test]
fn empty_script_is_a_provider_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = planted(dir.path(), 40);
    std::fs::write(&cfg.provider.mock.as_ref().unwrap().script, "").unwrap();
    pipeline::ingest(&cfg).unwrap();
    let err = pipeline::extract(&cfg, &provider(&cfg)).unwrap_err();
    assert_eq!(err.class(), ErrorClass::Provider, "{err}");
}

#[test]
fn train_before_extract_names_the_producer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = planted(dir.path(), 40);
    let err = pipeline::train(&cfg).unwrap_err();
    assert!(matches!(err, PipelineError::MissingArtifact { producer: "extract", .. }), "{err}");
}
