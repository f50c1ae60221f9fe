use hired::efficiency::{estimate_cost, ModelProfile};
use hired::tensor_io::{
    generate_synthetic_dump, read_selection_manifest, save_attention_dump, SelectionManifest,
};
use hired::{run_hired, Budget, EngineConfig};

/// Running on an in-memory dump gives the same manifest as the CLI on disk.
#[test]
fn in_memory_matches_cli() {
    let dump = generate_synthetic_dump(4, 4, 3, 576, &[0, 11, 22]).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("dump");
    save_attention_dump(&dump, &dir).unwrap();
    let out = tmp.path().join("sel.json");
    let code = hired::cli::run(
        [
            "hired",
            "run",
            "--dump",
            dir.to_str().unwrap(),
            "--budget",
            "0.3",
            "--alpha",
            "0.4",
            "--out",
            out.to_str().unwrap(),
        ],
        &mut Vec::new(),
        &mut Vec::new(),
    );
    assert_eq!(code, 0);

    let cfg = EngineConfig {
        budget: Budget::Fraction(0.3),
        alpha: 0.4,
        ..EngineConfig::default()
    };
    let (plan, result) = run_hired(&dump, &dump.layout().unwrap(), &cfg).unwrap();
    assert_eq!(result.total_kept, 864);
    let manifest = SelectionManifest::new(&result.without_importance(), &plan, &cfg);
    assert_eq!(manifest, read_selection_manifest(&out).unwrap());
}

#[test]
fn cost_grows_with_tokens() {
    let profile = ModelProfile::VICUNA_7B_FP16;
    let mut prev = estimate_cost(0, 2880, &profile);
    for n in (64..=2880).step_by(64) {
        let c = estimate_cost(n, 2880, &profile);
        assert!(c.kv_bytes > prev.kv_bytes);
        assert!(c.linear_ratio > prev.linear_ratio);
        assert!(c.quadratic_ratio >= prev.quadratic_ratio);
        prev = c;
    }
    assert_eq!(prev.linear_ratio, 1.0);
    let c = estimate_cost(576, 2880, &profile);
    assert_eq!(c.kv_bytes, 576 * 524_288);
    assert!((c.quadratic_ratio - 0.04).abs() < 1e-12);
}
