use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mtmixatt::artifacts::{load_report, read_ablation_csv};
use mtmixatt::checkpoint::Checkpoint;
use mtmixatt::experiment::ExperimentConfig;
use mtmixatt_core::metrics::MetricReport;

fn mtmixatt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtmixatt")).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn quick_config(dir: &Path, steps: usize) -> String {
    let mut cfg = ExperimentConfig::preset("tiny").unwrap();
    cfg.train.steps = steps;
    cfg.train.eval_every = 10;
    cfg.data.train_samples = 300;
    cfg.data.eval_samples = 200;
    let path = dir.join("quick.toml");
    fs::write(&path, cfg.to_toml_string().unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn train_then_evaluate_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path(), 20);
    let run = dir.path().join("run");
    let run_s = run.to_string_lossy();
    stdout(&mtmixatt(&["train", "--config", &cfg, "--out", &run_s, "--seed", "3"]));
    let report = load_report(&run.join("report.json")).unwrap();
    assert_eq!(report.seed, 3);
    assert_eq!(report.evals.iter().map(|e| e.step).collect::<Vec<_>>(), [0, 10, 20]);
    assert_eq!(report.wall_clock_secs, None);
    let routing = fs::read_to_string(run.join("routing.csv")).unwrap();
    assert!(routing.starts_with("layer,scenario,token,expert,weight\n"));
    assert!(routing.lines().count() > 1);

    let best = Checkpoint::load(&run.join("best.json")).unwrap();
    assert_eq!(best.step, report.best_step);
    let ck = run.join("checkpoint.json");
    let text = stdout(&mtmixatt(&["evaluate", "--config", &cfg, "--checkpoint", &ck.to_string_lossy()]));
    let metrics: MetricReport = serde_json::from_str(&text).unwrap();
    assert_eq!(&metrics, report.final_metrics());
}

#[test]
fn wall_clock_is_opt_in() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path(), 0);
    let run = dir.path().join("run");
    stdout(&mtmixatt(&["train", "--config", &cfg, "--out", &run.to_string_lossy(), "--wall-clock"]));
    let report = load_report(&run.join("report.json")).unwrap();
    assert!(report.wall_clock_secs.is_some());
    assert_eq!(report.evals.len(), 1);
}

#[test]
fn generated_data_feeds_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path(), 5);
    let data = dir.path().join("data");
    let data_s = data.to_string_lossy();
    stdout(&mtmixatt(&["generate-data", "--config", &cfg, "--out", &data_s]));
    let header = fs::read_to_string(data.join("train.ndjson")).unwrap();
    let first = header.lines().next().unwrap();
    assert!(first.contains("\"format\":\"mtmixatt-dataset\"") && first.contains("\"count\":300"), "{first}");
    let from_file = dir.path().join("a");
    let in_memory = dir.path().join("b");
    stdout(&mtmixatt(&["train", "--config", &cfg, "--data", &data_s, "--out", &from_file.to_string_lossy()]));
    stdout(&mtmixatt(&["train", "--config", &cfg, "--out", &in_memory.to_string_lossy()]));
    assert_eq!(fs::read(from_file.join("report.json")).unwrap(), fs::read(in_memory.join("report.json")).unwrap());
}

#[test]
fn ablate_writes_one_table_per_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path(), 3);
    let out = dir.path().join("abl");
    stdout(&mtmixatt(&["ablate", "--config", &cfg, "--grid", "mixing,norm", "--out", &out.to_string_lossy(), "--workers", "2"]));
    let mixing = read_ablation_csv(fs::File::open(out.join("mixing.csv")).unwrap()).unwrap();
    let norm = read_ablation_csv(fs::File::open(out.join("norm.csv")).unwrap()).unwrap();
    assert_eq!(mixing.iter().map(|r| r.variant.as_str()).collect::<Vec<_>>(), ["M1", "M2", "M3"]);
    assert_eq!(norm.len(), 4);
    assert!(!out.join("grouping.csv").exists());
}

#[test]
fn gradcheck_and_count_params() {
    let text = stdout(&mtmixatt(&["gradcheck", "--preset", "tiny", "--probes", "5"]));
    assert!(text.contains("gradcheck passed"), "{text}");
    let counts = stdout(&mtmixatt(&["count-params", "--preset", "tiny", "--ladder"]));
    let first = counts.lines().next().unwrap();
    assert!(first.contains(&mtmixatt_core::config::ModelConfig::tiny().count_params().to_string()), "{first}");
    assert_eq!(counts.lines().count(), 7);
}

#[test]
fn bad_input_fails_closed() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nsteps = 5\nlearning_rat = 0.1\n").unwrap();
    let out = mtmixatt(&["count-params", "--config", &bad.to_string_lossy()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));

    let over = dir.path().join("over.toml");
    fs::write(&over, "[train]\nparam_budget = 10\n").unwrap();
    let out = mtmixatt(&["train", "--config", &over.to_string_lossy(), "--out", &dir.path().join("x").to_string_lossy()]);
    assert!(!out.status.success());

    assert!(!mtmixatt(&["ablate", "--preset", "tiny", "--grid", "nope", "--out", "unused"]).status.success());
    assert!(!mtmixatt(&["train", "--preset", "huge", "--out", "unused"]).status.success());
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            ExperimentConfig::load(&path).unwrap();
            seen += 1;
        }
    }
    assert!(seen > 0);
}
