use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use statrs::distribution::{ContinuousCDF, Normal};
use tta_cli::commands::analyze::{step_rows, steps_csv};
use tta_cli::commands::duality::duality_grid;
use tta_cli::commands::{self, RunInfo, SampleRecord, RUN_FILE, SAMPLES_FILE};
use tta_cli::config::RunConfig;
use tta_cli::manifest::{RunManifest, MANIFEST_FILE};
use tta_cli::{run, CliError, Command as Stage};
use tta_core::allocation::{PolicyKind, SchedulePolicy};
use tta_core::diffusion::cosine_schedule;
use tta_core::guidance::{GenerationTrace, StepRecord};
use tta_core::models::{Classifier, Denoiser};
use tta_core::rng::seeded;

const BIN: &str = env!("CARGO_BIN_EXE_tta");

fn tiny() -> RunConfig {
    let mut c = RunConfig::default();
    c.out_dir = PathBuf::from("out");
    c.corpus.spec.size = 400;
    c.schedule.t_max = 16;
    c.model.d_model = 8;
    c.model.d_ff = 16;
    c.model.blocks = 1;
    c.model.time_features = 4;
    c.classifier.d_hidden = 8;
    c.train.denoiser.steps = 20;
    c.train.classifier.steps = 20;
    c.reduce.eval_sequences = 8;
    c.reduce.finetune.steps = 2;
    c.reduce.finetune.batch_size = 4;
    c.generate.samples = 10;
    c.generate.steps = 16;
    c.duality.draws = 500;
    // existence is only checked by the command that reads them
    c.generate.denoiser = Some("den.ckpt".into());
    c.generate.classifier = Some("clf.ckpt".into());
    c
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let p = dir.join("config.toml");
    fs::write(&p, cfg.to_toml()).unwrap();
    p
}

/// Writes untrained checkpoints matching `cfg` and points `generate` at them.
fn with_models(dir: &Path, cfg: &mut RunConfig) {
    let sched = cosine_schedule(cfg.schedule.t_max, cfg.schedule.k).unwrap();
    let den = Denoiser::<f64>::new(cfg.denoiser_config(), sched, &mut seeded(1)).unwrap();
    let clf = Classifier::<f64>::new(cfg.classifier_config(), &mut seeded(2)).unwrap();
    den.save(&dir.join("den.ckpt")).unwrap();
    clf.save(&dir.join("clf.ckpt")).unwrap();
    cfg.generate.denoiser = Some("den.ckpt".into());
    cfg.generate.classifier = Some("clf.ckpt".into());
    cfg.reduce.teacher = Some("den.ckpt".into());
}

fn stderr_of(args: &[&str]) -> (i32, String) {
    let out = Command::new(BIN).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn config_round_trips_through_toml() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.generate.policies.push(SchedulePolicy::random(9));
    cfg.generate.constraint = Some(tta_core::guidance::LexicalConstraint::length(7));
    let back = RunConfig::from_toml(&cfg.to_toml(), dir.path()).unwrap();
    assert_eq!(back.to_toml(), cfg.to_toml());
    assert_eq!(back.hash(), cfg.hash());

    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    let toy = RunConfig::load(&shipped).unwrap();
    let again = RunConfig::from_toml(&toy.to_toml(), toy.base_dir()).unwrap();
    assert_eq!(again, toy);
}

#[test]
fn missing_corpus_path_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.corpus.path = Some("nowhere.jsonl".into());
    let p = write_config(dir.path(), &cfg);
    let (code, err) = stderr_of(&["train", "--config", p.to_str().unwrap()]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("corpus.path"), "{err}");
}

#[test]
fn adaptive_without_classifier_names_both_fields() {
    let mut cfg = tiny();
    cfg.generate.classifier = None;
    cfg.generate.lambdas = vec![0.0];
    cfg.generate.policies = vec![SchedulePolicy::new(PolicyKind::Constant), SchedulePolicy::adaptive(0.6)];
    let err = RunConfig::from_toml(&cfg.to_toml(), Path::new(".")).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("generate.policies[1]") && msg.contains("generate.classifier"), "{msg}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn invariant_violations_are_field_precise() {
    type Edit = Box<dyn Fn(&mut RunConfig)>;
    let cases: Vec<(&str, Edit)> = vec![
        ("reduce.ladder[1]", Box::new(|c| c.reduce.ladder = vec![0.5, 0.5])),
        ("reduce.ladder[0]", Box::new(|c| c.reduce.ladder = vec![1.5])),
        ("generate.lambdas[0]", Box::new(|c| c.generate.lambdas = vec![-1.0])),
        ("generate.lambdas[1]", Box::new(|c| {
            c.generate.classifier = None;
            c.generate.policies.truncate(1);
            c.generate.lambdas = vec![0.0, 5.0];
        })),
        ("generate.target_label", Box::new(|c| c.generate.target_label = "neutral".into())),
        ("generate.steps", Box::new(|c| c.generate.steps = 99)),
        ("schema_version", Box::new(|c| c.schema_version = 7)),
        ("corpus.split", Box::new(|c| c.corpus.split = 1.0)),
        ("duality.vocab", Box::new(|c| c.duality.vocab = 1)),
    ];
    for (field, edit) in cases {
        let mut cfg = tiny();
        edit(&mut cfg);
        match RunConfig::from_toml(&cfg.to_toml(), Path::new(".")) {
            Err(CliError::Config { field: f, .. }) => assert_eq!(f, field),
            other => panic!("{field}: {other:?}"),
        }
    }
    let err = RunConfig::from_toml("schema_version = 1\nout_dir = \"x\"\n[model]\nwidth = 3\n", Path::new(".")).unwrap_err();
    assert!(matches!(&err, CliError::Config { field, .. } if field == "width"), "{err}");
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(stderr_of(&["train"]).0, 2);
    assert_eq!(stderr_of(&["train", "--config", "/definitely/not/here.toml"]).0, 2);
    assert_eq!(stderr_of(&["fly", "--config", "x"]).0, 2);
}

#[test]
fn empty_trace_directory_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("empty")).unwrap();
    let mut cfg = tiny();
    cfg.analyze.traces = Some("empty".into());
    let p = write_config(dir.path(), &cfg);
    let (code, err) = stderr_of(&["analyze", "--config", p.to_str().unwrap()]);
    assert_eq!(code, 2, "{err}");
}

fn record(step: usize, tokens: Vec<usize>, key_tokens: Vec<usize>, conf: (f64, Option<f64>)) -> StepRecord {
    StepRecord {
        step,
        t_global: 3 - step,
        plan: vec![3 - step; tokens.len()],
        grad_norms: Vec::new(),
        tokens,
        key_tokens,
        conf_after_guidance: Some(conf.0),
        conf_before_next: conf.1,
        seed_digest: String::new(),
    }
}

fn hand_trace() -> GenerationTrace {
    GenerationTrace {
        records: vec![
            record(0, vec![1, 2, 3, 4], vec![0, 1], (0.9, Some(0.6))),
            record(1, vec![1, 5, 3, 6], vec![1, 2], (0.8, Some(0.75))),
            record(2, vec![1, 5, 7, 6], vec![2, 3], (0.7, None)),
        ],
    }
}

// Step 1 is the only step with both neighbours: two of four tokens changed
// entering it, one of its two key tokens (index 2) changes after it, and the
// confidence falls from 0.8 to 0.75.
const HAND_CSV: &str = "step,R_t,mean_R,key_change_ratio,conf_after,conf_before_next,drop\n\
                        1,0.500000,0.500000,0.500000,0.800000,0.750000,0.050000\n";

#[test]
fn hand_built_trace_gives_exact_csv() {
    let rows = step_rows(&[hand_trace()], 2).unwrap();
    assert_eq!(steps_csv(&rows), HAND_CSV);

    // averaging a trace with itself changes nothing
    let rows = step_rows(&[hand_trace(), hand_trace()], 2).unwrap();
    assert_eq!(steps_csv(&rows), HAND_CSV);
}

#[test]
fn analyze_command_on_a_hand_built_run() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("gen/constant_lambda0");
    fs::create_dir_all(run_dir.join("traces")).unwrap();
    let info = RunInfo {
        name: "constant_lambda0".into(),
        policy: SchedulePolicy::new(PolicyKind::Constant),
        lambda: 0.0,
        target_label: 1,
        samples: 1,
    };
    fs::write(run_dir.join(RUN_FILE), serde_json::to_string(&info).unwrap()).unwrap();
    let sample = SampleRecord { index: 0, seed: 5, tokens: vec![1, 5, 7, 6], text: String::new() };
    fs::write(run_dir.join(SAMPLES_FILE), serde_json::to_string(&sample).unwrap() + "\n").unwrap();
    fs::write(run_dir.join("traces/sample_0000.jsonl"), hand_trace().to_jsonl().unwrap()).unwrap();

    let mut cfg = tiny();
    cfg.analyze.traces = Some("gen".into());
    cfg.analyze.key_tokens = 2;
    let p = write_config(dir.path(), &cfg);
    run(Stage::Analyze, &p, None, None).unwrap();
    let out = dir.path().join("out/analyze");
    assert_eq!(fs::read_to_string(out.join("constant_lambda0/steps.csv")).unwrap(), HAND_CSV);
    let cmp = fs::read_to_string(out.join("comparison.csv")).unwrap();
    let header = cmp.lines().next().unwrap();
    assert!(header.contains("fluctuation_ratio") && header.contains("key_token_change_ratio"), "{header}");
    // two steps: R = 0.5 then 0.25; key changes 0.5 and 0.5
    let row: Vec<&str> = cmp.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&row[..5], ["constant_lambda0", "constant", "0", "0.375000", "0.500000"]);
    RunManifest::load(&out.join(MANIFEST_FILE)).unwrap().verify(&out).unwrap();

    // a corrupt record is reported with its index
    let mut bad = hand_trace();
    bad.records[2].step = 7;
    fs::write(run_dir.join("traces/sample_0000.jsonl"), bad.to_jsonl().unwrap()).unwrap();
    let err = run(Stage::Analyze, &p, None, None).unwrap_err();
    assert!(matches!(err, CliError::Core(tta_core::Error::TraceSchema { record: 2, .. })), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn duality_grid_endpoints_and_two_symbol_closed_form() {
    let pts = duality_grid(64, 11, 2000, 3).unwrap();
    let (first, last) = (pts[0], pts[10]);
    assert_eq!((first.alpha_bar, first.alpha_tilde, first.alpha_disc), (0.0, 0.0, 0.0));
    assert_eq!((last.alpha_bar, last.alpha_tilde, last.alpha_disc), (1.0, 1.0, 1.0));
    for w in pts.windows(2) {
        let tol = 3.0 * (w[0].std_err.powi(2) + w[1].std_err.powi(2)).sqrt();
        assert!(w[1].alpha_disc >= w[0].alpha_disc - tol);
    }

    let pts = duality_grid(2, 3, 100_000, 4).unwrap();
    let mid = pts[1];
    assert_eq!(mid.alpha_bar, 0.5);
    let phi = Normal::new(0.0, 1.0).unwrap();
    let a = mid.alpha_tilde;
    let closed = 2.0 * phi.cdf(a / (2.0 * (1.0 - a * a)).sqrt()) - 1.0;
    assert!((mid.alpha_disc - closed).abs() <= 3.0 * mid.std_err, "{} vs {closed}", mid.alpha_disc);
}

#[test]
fn duality_command_writes_csv_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), &tiny());
    let (code, err) = stderr_of(&["duality", "--config", p.to_str().unwrap(), "--seed", "3"]);
    assert_eq!(code, 0, "{err}");
    let out = dir.path().join("out/duality");
    let csv = fs::read_to_string(out.join("duality.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 12);
    assert_eq!(lines[0], "alpha_bar,alpha_tilde,alpha_disc,std_err");
    assert_eq!(lines[1], "0,0,0,0");
    assert_eq!(lines[11], "1,1,1,0");
    let m = RunManifest::load(&out.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.config.seed, 3);
    m.verify(&out).unwrap();
}

#[test]
fn train_is_deterministic_and_manifested() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), &tiny());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run(Stage::Train, &p, Some(&a), None).unwrap();
    run(Stage::Train, &p, Some(&b), None).unwrap();
    for f in [commands::train::DENOISER_FILE, commands::train::CLASSIFIER_FILE, "denoiser_losses.csv", "report.json"] {
        assert_eq!(fs::read(a.join("train").join(f)).unwrap(), fs::read(b.join("train").join(f)).unwrap(), "{f}");
    }
    let m = RunManifest::load(&a.join("train").join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.artifacts.len(), 4);
    assert!(m.artifacts.iter().all(|x| x.config_hash == m.config_hash));
    assert_eq!(m.config_hash, m.config.hash());
    m.verify(&a.join("train")).unwrap();
    Denoiser::<f64>::load(&a.join("train").join(commands::train::DENOISER_FILE)).unwrap();

    run(Stage::Train, &p, Some(&b), Some(99)).unwrap();
    assert_ne!(
        fs::read(a.join("train/denoiser.ckpt")).unwrap(),
        fs::read(b.join("train/denoiser.ckpt")).unwrap()
    );
}

#[test]
fn generate_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    with_models(dir.path(), &mut cfg);
    cfg.generate.lambdas = vec![0.0, 50.0];
    cfg.generate.threads = Some(3);
    let p = write_config(dir.path(), &cfg);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(Stage::Generate, &p, Some(&a), None).unwrap();
    run(Stage::Generate, &p, Some(&b), None).unwrap();
    let ma = RunManifest::load(&a.join("generate").join(MANIFEST_FILE)).unwrap();
    // 4 runs x (run file, samples file, 10 traces)
    assert_eq!(ma.artifacts.len(), 4 * 12);
    for art in &ma.artifacts {
        assert_eq!(
            fs::read(a.join("generate").join(&art.path)).unwrap(),
            fs::read(b.join("generate").join(&art.path)).unwrap(),
            "{}",
            art.path.display()
        );
    }
    ma.verify(&a.join("generate")).unwrap();

    // sample i shares its seed across runs
    let seeds = |run: &str| -> Vec<u64> {
        fs::read_to_string(a.join("generate").join(run).join(SAMPLES_FILE))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str::<SampleRecord>(l).unwrap().seed)
            .collect()
    };
    assert_eq!(seeds("constant_lambda0"), seeds("adaptive0.6_lambda50"));

    cfg.generate.threads = Some(1);
    let p = write_config(dir.path(), &cfg);
    let c = dir.path().join("c");
    run(Stage::Generate, &p, Some(&c), None).unwrap();
    let f = "adaptive0.6_lambda50/traces/sample_0007.jsonl";
    assert_eq!(fs::read(a.join("generate").join(f)).unwrap(), fs::read(c.join("generate").join(f)).unwrap());
}

#[test]
fn reduce_ladder_chains_students() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    with_models(dir.path(), &mut cfg);
    cfg.reduce.ladder = vec![0.5, 0.25];
    let p = write_config(dir.path(), &cfg);
    run(Stage::Reduce, &p, None, None).unwrap();
    let out = dir.path().join("out/reduce");
    let report: Vec<commands::StudentReport> =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.iter().map(|r| r.t_max).collect::<Vec<_>>(), [8, 4]);
    for r in &report {
        let s = Denoiser::<f64>::load(&out.join(&r.file)).unwrap();
        assert_eq!(s.schedule().t_max(), r.t_max);
        assert!(r.student_ce.is_finite() && r.teacher_ce_same_steps.is_finite());
    }

    cfg.reduce.ladder = vec![0.5];
    cfg.reduce.finetune.steps = 0;
    let p = write_config(dir.path(), &cfg);
    let out2 = dir.path().join("single");
    run(Stage::Reduce, &p, Some(&out2), None).unwrap();
    let teacher = Denoiser::<f64>::load(&dir.path().join("den.ckpt")).unwrap();
    let student = Denoiser::<f64>::load(&out2.join("reduce/student_T8.ckpt")).unwrap();
    assert_eq!(student.params().tensors(), teacher.params().tensors());
}

#[test]
fn missing_teacher_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.reduce.teacher = Some("ghost.ckpt".into());
    let p = write_config(dir.path(), &cfg);
    let (code, err) = stderr_of(&["reduce", "--config", p.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("reduce.teacher"), "{err}");
}
