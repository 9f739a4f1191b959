use std::fs;
use std::path::Path;

use owodlab::harness::{read_loss_totals, read_trace, Run, RunConfig, STATE_FILE};
use owodlab::Error;

fn small(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.run.output_dir = out.to_path_buf();
    cfg.data.train_images = 24;
    cfg.data.test_images = 12;
    cfg.train.iterations = 40;
    cfg.train.finetune_iterations = 20;
    cfg.train.exemplars_per_class = 3;
    cfg
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            out.extend(read_dir_bytes(&p));
        } else {
            out.push((p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn generate_is_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let a = Run::new(small(&dir.path().join("a"))).unwrap();
    let b = Run::new(small(&dir.path().join("b"))).unwrap();
    a.generate().unwrap();
    b.generate().unwrap();
    let (fa, fb) = (read_dir_bytes(&a.data_root()), read_dir_bytes(&b.data_root()));
    assert!(fa.len() > 24 + 12);
    assert_eq!(fa, fb);
}

#[test]
fn proposals_cover_every_training_image() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(small(dir.path())).unwrap();
    run.generate().unwrap();
    assert_eq!(run.proposals().unwrap(), 24);
    let manifest = run.manifest().unwrap();
    assert!(manifest.commands.contains_key("generate"));
    assert!(manifest.commands.contains_key("proposals"));
    assert_eq!(manifest.seed, 7);
    assert_eq!(manifest.config_sha256, run.config().sha256());
}

#[test]
fn train_without_data_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(small(dir.path())).unwrap();
    let err = run.train_task(1).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
}

#[test]
fn smoke_run_reduces_smoothed_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.train.iterations = 200;
    let run = Run::new(cfg).unwrap();
    run.generate().unwrap();
    run.proposals().unwrap();
    let out = run.train_task(1).unwrap();
    let (first, last) = out.train.loss_drop(20).unwrap();
    assert!(last < first, "smoothed loss {first} -> {last}");

    let totals = read_loss_totals(&run.task_dir(1).join("loss.csv")).unwrap();
    assert_eq!(totals.len(), 200);
    let trace = read_trace(&run.task_dir(1).join("trace.csv")).unwrap();
    assert_eq!(trace.iter().map(|r| r.iteration).collect::<Vec<_>>(), vec![150]);
    assert!((trace[0].w_m + trace[0].w_i - 1.0).abs() < 1e-12);
}

#[test]
fn advance_walks_all_tasks_then_stops() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(small(dir.path())).unwrap();
    run.generate().unwrap();
    run.proposals().unwrap();
    let first = run.train_task(1).unwrap();
    assert_eq!(first.registry.known().len(), 3);
    assert!(first.finetune.is_none());

    let cap = run.config().train.exemplars_per_class;
    let mut known = 3;
    for task in 2..=4 {
        let out = run.advance().unwrap();
        assert_eq!(out.task, task);
        assert_eq!(out.registry.known().len(), known + 1);
        known += 1;
        assert!(out.finetune.is_some());
        assert!(out.finetune_images > 0);
        assert!(out.finetune_images <= cap * known, "{} > {}", out.finetune_images, cap * known);
        assert!(run.task_dir(task).join("finetune_trace.csv").exists());
        assert_eq!(run.state().unwrap().task, task);
    }
    let err = run.advance().unwrap_err();
    assert!(matches!(err, Error::NoNextTask(3)), "{err}");
    assert_eq!(err.exit_code(), 2);

    // all classes known: no unknown metrics, in the struct or the JSON
    let report = run.eval(4).unwrap();
    assert!(report.u_recall.is_none() && report.wilderness_impact.is_none() && report.a_ose.is_none());
    let json = fs::read_to_string(run.task_dir(4).join("metrics.json")).unwrap();
    assert!(!json.contains("u_recall") && !json.contains("a_ose"));
    assert!(run.output_dir().join(STATE_FILE).exists());
}

#[test]
fn eval_is_deterministic_and_writes_plots() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(small(dir.path())).unwrap();
    run.generate().unwrap();
    run.proposals().unwrap();
    run.train_task(1).unwrap();
    let a = run.eval(1).unwrap();
    let bytes_a = fs::read(run.task_dir(1).join("metrics.json")).unwrap();
    let b = run.eval(1).unwrap();
    let bytes_b = fs::read(run.task_dir(1).join("metrics.json")).unwrap();
    assert_eq!(a, b);
    assert_eq!(bytes_a, bytes_b);
    assert!(a.u_recall.is_some());
    assert_eq!(a.images, 12);

    let plots = run.plot(1).unwrap();
    assert!(!plots.is_empty());
    for p in plots {
        assert!(fs::read_to_string(p).unwrap().starts_with("<svg"));
    }
}

#[test]
fn checkpoint_from_another_architecture_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(small(dir.path())).unwrap();
    run.generate().unwrap();
    run.proposals().unwrap();
    run.train_task(1).unwrap();
    let mut cfg = small(dir.path());
    cfg.detector.num_queries += 1;
    let err = Run::new(cfg).unwrap().train_task(2).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn shipped_config_matches_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/shapeworld.toml");
    let cfg = RunConfig::load(Some(&path), std::iter::empty(), &[]).unwrap();
    assert_eq!(cfg.to_toml(), RunConfig::default().to_toml());
}
