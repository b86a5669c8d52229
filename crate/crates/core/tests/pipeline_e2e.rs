mod common;

use policyeval::config::ExperimentConfig;
use policyeval::divergence::EmbeddingMatrix;
use policyeval::inference::DecodeMode;
use policyeval::pipeline::{Pipeline, PipelineError, Stage};
use policyeval::prompts::PromptVariant;
use policyeval::report::{read_jsonl, InvalidRateRow, MetricRow};

fn pipeline(dir: &std::path::Path) -> Pipeline {
    let cfg_path = common::write_e2e_fixture(dir);
    Pipeline::new(ExperimentConfig::load(&cfg_path).unwrap())
}

#[test]
fn full_pipeline_on_mock_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline(dir.path());
    let outcomes = p.run_all().unwrap();
    assert_eq!(outcomes.iter().map(|o| o.stage).collect::<Vec<_>>(), Stage::ALL.to_vec());
    let layout = p.layout();

    let rates: Vec<InvalidRateRow> = read_jsonl(&layout.invalid_rates().with_extension("jsonl")).unwrap();
    let cell = |model: &str, variant: &str, decode: &str| {
        rates.iter().find(|r| r.model == model && r.variant == variant && r.decode == decode).unwrap().clone()
    };
    assert_eq!(cell("beta", "zs-beta", "greedy").failure_refusal, 1);
    assert_eq!(cell("alpha", "zs-cot", "sc").failure_exceed, 30);
    assert_eq!(cell("beta", "guided-cot", "greedy").indeterminate, 1);
    assert_eq!(cell("alpha", "all", "all").responses, 8 * 20 * 31);

    let metrics: Vec<MetricRow> = read_jsonl(&layout.metrics().with_extension("jsonl")).unwrap();
    let row = |model: &str, variant: PromptVariant, decode: DecodeMode, group: &str| {
        metrics.iter().find(|r| r.model == model && r.variant == variant && r.decode == decode && r.group == group).unwrap()
    };
    // Greedy main subset drops the refused, truncated and indeterminate posts.
    assert_eq!(row("alpha", PromptVariant::ZsCot, DecodeMode::Greedy, "main").n_excluded, 3);
    // Self-consistency keeps p07 (the indeterminate run is outvoted) and counts the scripted tie.
    let sc = row("alpha", PromptVariant::ZsBeta, DecodeMode::SelfConsistency, "main");
    assert_eq!((sc.n_scored, sc.ties), (18, 1));
    assert_eq!(row("beta", PromptVariant::Ablation(3), DecodeMode::SelfConsistency, "ablation").n_scored, 20);

    for v in [PromptVariant::ZsBeta, PromptVariant::ZsCot, PromptVariant::GuidedCot] {
        let m = EmbeddingMatrix::read(&layout.embedding(v)).unwrap();
        assert_eq!(m.width(), 64);
        assert_eq!(m.len() % 2, 0);
        let r = EmbeddingMatrix::read(&layout.reduced(v)).unwrap();
        assert_eq!((r.len(), r.width()), (m.len(), 5));
        for model in ["alpha", "beta"] {
            assert!(layout.heatmap(model, v, "csv").exists());
            assert!(layout.heatmap(model, v, "pgm").exists());
        }
    }

    let report = std::fs::read_to_string(layout.report()).unwrap();
    for heading in [
        "Invalid responses",
        "Positive-class precision / recall / F1",
        "Ablation deltas",
        "Prompt transitions",
        "Dimensionality reduction",
        "Cross-model divergence ranking",
        "Intra-model group distances",
        "Cohesion KS tests",
        "Skipped analyses",
    ] {
        assert!(report.contains(heading), "report lacks {heading:?}");
    }
    assert!(!report.contains("-0.0000"));

    // Rerunning the whole pipeline reuses the store and reproduces the report.
    p.run_all().unwrap();
    assert_eq!(std::fs::read_to_string(layout.report()).unwrap(), report);
}

#[test]
fn downstream_stage_names_missing_upstream() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline(dir.path());
    let err = p.run_stage(Stage::Evaluate).unwrap_err();
    assert!(matches!(err, PipelineError::MissingArtifact { .. }), "{err}");
    p.run_stage(Stage::Ingest).unwrap();
    let err = p.run_stage(Stage::Parse).unwrap_err().to_string();
    assert!(err.contains("`run`"), "{err}");
}
