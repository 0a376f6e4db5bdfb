use std::path::Path;
use std::process::Command;

use coupled_core::world::{corrupt_examples, gen_dataset};
use coupled_core::Tensor;
use coupled_harness::commands::{
    cmd_ablate_guidance, cmd_ablate_sampler, cmd_ablate_steps, cmd_inspect_trace, cmd_run, cmd_sde_demo, cmd_train,
};
use coupled_harness::pipeline::{seed_role, World};
use coupled_harness::results::{read_csv, ResultRow};
use coupled_harness::{ExperimentConfig, HarnessError};
use coupled_core::rng::derive_seed;

const TINY: &str = r#"
seeds = [3]
methods = ["baseline_noisy", "baseline_enhanced", "baseline_card", "parallel", "alternating", "nested"]
corruptions = [{ kind = "pixel_replace", fraction = 0.3 }]

[world]
classes = 3
train_per_class = 12
test_per_class = 8

[classifier]
hidden = [16]
epochs = 8

[model]
hidden = [16]
embed = 8
diffusion_steps = 6

[train]
warm_start_epochs = 2
epochs = 2
sampling_epochs = 1
batch_size = 12
inner_steps = 2
"#;

fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_toml(TINY).expect("tiny config parses")
}

fn with(extra: &str) -> String {
    format!("{TINY}\n{extra}")
}

fn config_field(err: HarnessError) -> String {
    match err {
        HarnessError::Config { field, .. } => field,
        other => panic!("expected a config error, got {other}"),
    }
}

#[test]
fn unknown_keys_are_rejected_with_their_location() {
    let err = ExperimentConfig::from_toml(&TINY.replace("[world]", "[world]\ncolour = 1")).unwrap_err();
    assert!(err.to_string().contains("colour"), "{err}");
    let err = ExperimentConfig::from_toml(&with("[overrides.nested]\nsteps = 0")).unwrap_err();
    assert_eq!(config_field(err), "overrides.nested");
    let err = ExperimentConfig::from_toml(&with("[overrides.bogus]\nsteps = 2")).unwrap_err();
    assert_eq!(config_field(err), "overrides.bogus");
    let err = ExperimentConfig::from_toml(&TINY.replace("seeds = [3]", "seeds = [3, 3]")).unwrap_err();
    assert_eq!(config_field(err), "seeds");
}

#[test]
fn overrides_resolve_per_method() {
    let cfg = ExperimentConfig::from_toml(&with("[sampling]\nsteps = 4\n[overrides.alternating]\niterations = 2")).unwrap();
    let alt = cfg.coupling(coupled_core::coupling::Strategy::Alternating);
    let nested = cfg.coupling(coupled_core::coupling::Strategy::Nested);
    assert_eq!((alt.steps, alt.iterations), (4, 2));
    assert_eq!((nested.steps, nested.iterations), (4, 5));
    assert_ne!(cfg.hash(), tiny().hash());
}

#[test]
fn noisy_only_run_is_the_classifier_on_corrupted_inputs() {
    let mut cfg = tiny();
    cfg.methods = vec![coupled_core::coupling::Strategy::BaselineNoisy];
    let dir = tempfile::tempdir().unwrap();
    let table = cmd_run(&cfg, dir.path()).unwrap();
    assert_eq!(table.rows.len(), 1);

    let seed = cfg.seeds[0];
    let world = World::build(&cfg, seed).unwrap();
    let mut test = gen_dataset(3, 8, derive_seed(seed, seed_role::TEST_DATA)).unwrap();
    corrupt_examples(&mut test, cfg.corruptions[0], derive_seed(seed, seed_role::TEST_CORRUPT)).unwrap();
    let x = Tensor::stack_rows(&test.iter().map(|e| e.x_cor.data()).collect::<Vec<_>>()).unwrap();
    let labels: Vec<usize> = test.iter().map(|e| e.label).collect();
    let expected = world.classifier.accuracy(&x, &labels).unwrap();
    let row = &table.rows[0];
    assert_eq!(row.accuracy_mean, expected);
    assert_eq!(row.nfe_classifier, 24);
    assert_eq!((row.nfe_signal, row.nfe_logit), (0, 0));
    let on_disk: Vec<ResultRow> = read_csv(&dir.path().join("results.csv")).unwrap();
    assert_eq!(on_disk, table.rows);
}

#[test]
fn full_run_is_replayable_and_carries_provenance() {
    let cfg = tiny();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ta = cmd_run(&cfg, a.path()).unwrap();
    let tb = cmd_run(&cfg, b.path()).unwrap();
    assert_eq!(ta, tb);
    for f in ["results.csv", "results.json"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
    let csv = std::fs::read_to_string(a.path().join("results.csv")).unwrap();
    let first = csv.lines().next().unwrap();
    assert!(first.contains(&cfg.hash()) && first.contains("seeds=3") && first.contains("code_version="));
    assert_eq!(ta.rows.len(), cfg.methods.len() * cfg.corruptions.len());
    assert!(ta.rows.iter().all(|r| (0.0..=1.0).contains(&r.accuracy_mean)));
    let hashes: Vec<&str> = ta.runs.iter().map(|r| r.input_hash.as_str()).collect();
    assert!(hashes.windows(2).all(|w| w[0] == w[1]), "methods saw different inputs");
    let timings = std::fs::read_to_string(a.path().join("timings.csv")).unwrap();
    assert!(timings.lines().count() > cfg.methods.len());

    // A third run reuses the cached bundles and reproduces the table.
    let tc = cmd_run(&cfg, a.path()).unwrap();
    assert_eq!(ta, tc);
    let timings = std::fs::read_to_string(a.path().join("timings.csv")).unwrap();
    assert!(timings.contains(",load,") && !timings.contains(",train,"));
}

#[test]
fn two_replicates_give_two_samples_and_a_standard_error() {
    let mut cfg = tiny();
    cfg.seeds = vec![3, 4];
    cfg.methods = vec![coupled_core::coupling::Strategy::BaselineNoisy];
    let dir = tempfile::tempdir().unwrap();
    let t = cmd_run(&cfg, dir.path()).unwrap();
    let accs: Vec<f64> = t.runs.iter().map(|r| r.accuracy).collect();
    assert_eq!(accs.len(), 2);
    let mean = (accs[0] + accs[1]) / 2.0;
    let se = ((accs[0] - mean).powi(2) + (accs[1] - mean).powi(2)).sqrt() / 2f64.sqrt();
    assert_eq!(t.rows[0].replicates, 2);
    assert!((t.rows[0].accuracy_mean - mean).abs() < 1e-15);
    assert!((t.rows[0].accuracy_se - se).abs() < 1e-15);
}

#[test]
fn missing_checkpoints_are_an_explicit_error() {
    let mut cfg = tiny();
    cfg.require_checkpoints = true;
    let dir = tempfile::tempdir().unwrap();
    match cmd_run(&cfg, dir.path()) {
        Err(e @ HarnessError::MissingCheckpoint(_)) => assert_eq!(e.exit_code(), 3),
        other => panic!("expected a missing checkpoint, got {:?}", other.map(|t| t.rows)),
    }
    cfg.require_checkpoints = false;
    cmd_train(&cfg, dir.path()).unwrap();
    cfg.require_checkpoints = true;
    cmd_run(&cfg, dir.path()).unwrap();
}

#[test]
fn step_sweep_rows_and_monotone_ledger() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let single = cmd_ablate_steps(&cfg, dir.path(), Some(&[3])).unwrap();
    assert_eq!(single.rows.len(), cfg.methods.len() - 1);
    let t = cmd_ablate_steps(&cfg, dir.path(), Some(&[2, 4, 6])).unwrap();
    for m in ["enhanced", "card", "parallel", "alternating", "nested"] {
        let nfe: Vec<u64> = t
            .rows
            .iter()
            .filter(|r| r.strategy == m)
            .map(|r| r.nfe_signal + r.nfe_logit + r.nfe_classifier)
            .collect();
        assert!(nfe.windows(2).all(|w| w[0] < w[1]), "{m}: {nfe:?}");
    }
    assert!(cmd_ablate_steps(&cfg, dir.path(), Some(&[4, 2])).is_err());
    assert!(cmd_ablate_steps(&cfg, dir.path(), Some(&[])).is_err());
}

#[test]
fn guidance_ablation_pairs_variants_on_shared_inputs() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let t = cmd_ablate_guidance(&cfg, dir.path()).unwrap();
    assert_eq!(t.rows.len(), 2 * cfg.corruptions.len());
    let (clean, noisy) = (&t.rows[0], &t.rows[1]);
    assert_eq!((clean.variant.as_str(), noisy.variant.as_str()), ("clean_estimate", "noisy_sample"));
    let recomputed = t.runs[0].accuracy - t.runs[1].accuracy;
    assert!((clean.difference - recomputed).abs() < 1e-12);
    assert_eq!(clean.difference, noisy.difference);
    assert_eq!(t.runs[0].input_hash, t.runs[1].input_hash);
    assert_eq!(
        (t.runs[0].init_seed, t.runs[0].step_seed),
        (t.runs[1].init_seed, t.runs[1].step_seed)
    );
}

#[test]
fn sampler_ablation_replays_ddim_exactly() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let t = cmd_ablate_sampler(&cfg, dir.path()).unwrap();
    let g = cmd_ablate_guidance(&cfg, dir.path()).unwrap();
    assert_eq!(t.rows.len(), g.rows.len());
    let by = |name: &str| t.rows.iter().find(|r| r.variant == name).unwrap();
    assert!(by("ddim_eta0").replay_identical);
    assert!(!by("ddpm").replay_identical);
    let header = |f: &str| std::fs::read_to_string(dir.path().join(f)).unwrap().lines().nth(1).unwrap().to_string();
    assert_eq!(header("ablate_sampler.csv"), header("ablate_guidance.csv"));
}

const SDE: &str = r#"
[sde]
mode = "analytic"
trajectories = 2
[sde.signals]
count = 60
length = 32
"#;

#[test]
fn analytic_sde_demo_improves_most_examples() {
    let cfg = ExperimentConfig::from_toml(&with(SDE)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let r = cmd_sde_demo(&cfg, dir.path()).unwrap();
    assert_eq!(r.examples, 60);
    assert!(r.improved_fraction >= 0.9, "{}", r.improved_fraction);
    assert!(dir.path().join("trajectories/seed-3/example-1.csv").exists());
    let err = ExperimentConfig::from_toml(&with(&format!("{SDE}[sde.pc]\nsteps = 0\n"))).unwrap_err();
    assert_eq!(config_field(err), "sde.pc.steps");
    let err = cmd_sde_demo(&tiny(), dir.path()).unwrap_err();
    assert_eq!(config_field(err), "sde");
}

#[test]
fn traces_summarise_with_monotone_counters() {
    let mut cfg = tiny();
    cfg.methods = vec![coupled_core::coupling::Strategy::Parallel];
    let dir = tempfile::tempdir().unwrap();
    let t = cmd_run(&cfg, dir.path()).unwrap();
    let s = cmd_inspect_trace(&dir.path().join("traces/pixel30/parallel/seed-3.jsonl")).unwrap();
    assert!(s.nfe_monotone);
    assert_eq!(s.input_hash, t.runs[0].input_hash);
    assert_eq!(s.by_kind["update_x"], 6);
    assert_eq!(s.final_nfe.classifier_calls * 24, t.rows[0].nfe_classifier);
}

fn coupled(args: &[&str], dir: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_coupled"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

#[test]
fn cli_exit_codes_are_categorised() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.toml");
    let mut text = TINY.replace(
        "methods = [\"baseline_noisy\", \"baseline_enhanced\", \"baseline_card\", \"parallel\", \"alternating\", \"nested\"]",
        "methods = [\"baseline_noisy\"]",
    );
    std::fs::write(&cfg_path, &text).unwrap();
    let ok = coupled(&["run", "--config", "tiny.toml", "--out", "out", "--seed-override", "9", "--threads", "1"], dir.path());
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let json = std::fs::read_to_string(dir.path().join("out/results.json")).unwrap();
    assert!(json.contains("\"seeds\": [\n      9\n    ]"), "{json}");

    assert_eq!(coupled(&["run"], dir.path()).status.code(), Some(2));
    text.push_str("\nbogus = 1\n");
    std::fs::write(&cfg_path, &text).unwrap();
    let bad = coupled(&["run", "--config", "tiny.toml", "--out", "out"], dir.path());
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("error[config]"));
    let missing = coupled(&["inspect-trace", "nope.jsonl"], dir.path());
    assert_eq!(missing.status.code(), Some(6));
}
