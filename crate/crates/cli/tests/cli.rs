use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ultramem(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ultramem"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn cost_sweep_writes_curves_and_crossover() {
    let dir = tempfile::tempdir().unwrap();
    let o = ultramem(&["cost", "--preset", "1p6b-analog", "--sweep", "B=1..1e6", "log"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("out/access.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    let batches: Vec<u64> = rows.iter().map(|r| r.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(batches[0], 1);
    assert_eq!(*batches.last().unwrap(), 1_000_000);
    assert!(batches.windows(2).all(|w| w[0] < w[1]));
    assert!(batches.len() > 100);
    let report = fs::read_to_string(dir.path().join("out/crossover.toml")).unwrap();
    assert!(report.contains("crossover_batch = \"17685\""));
    assert!(report.contains("linear_scan_agrees = true"));
}

#[test]
fn single_point_sweep_has_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let o = ultramem(&["cost", "--sweep", "B=1..1"], dir.path());
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(dir.path().join("out/access.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn partition_grid_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = ultramem(&["cost", "--partition", "P=2..8", "v_dim=8..64", "--topm", "16"], dir.path());
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(dir.path().join("out/partition.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 4);
    assert_eq!(code(&ultramem(&["cost", "--sweep", "X=1..10"], dir.path())), 2);
    assert_eq!(code(&ultramem(&["cost", "--sweep", "B=10..1"], dir.path())), 2);
    assert_eq!(code(&ultramem(&["cost", "--partition", "P=1..4"], dir.path())), 2);
    fs::write(dir.path().join("bad.toml"), "d_model = 8\nbogus = 1\n").unwrap();
    let o = ultramem(&["cost", "--config", "bad.toml", "--sweep", "B=1..4"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn verify_passes_and_detects_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let o = ultramem(&["verify", "--suite", "pkm,mcs,cost"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(fs::read_to_string(dir.path().join("out/verify.txt")).unwrap().contains("pkm"));
    let o = ultramem(&["verify", "--suite", "gradients", "--inject-fault", "gelu"], dir.path());
    assert_eq!(code(&o), 1);
    assert_eq!(code(&ultramem(&["verify", "--suite", "nope"], dir.path())), 2);
}

#[test]
fn training_logs_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let train = |out: &str, preset: &str| {
        let o = ultramem(
            &["train", "--preset", preset, "--steps", "12", "--seed", "3", "--out", out],
            dir.path(),
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        fs::read_to_string(dir.path().join(out).join("metrics.csv")).unwrap()
    };
    let a = train("a", "ultramem-tiny");
    let b = train("b", "ultramem-tiny");
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 13);
    assert!(dir.path().join("a/final.ckpt").exists());

    let dense = train("d", "dense-tiny");
    for row in dense.lines().skip(1) {
        let aux: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(aux, 0.0);
    }

    let o = ultramem(&["eval", "--checkpoint", "a/final.ckpt"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("perplexity"));

    let o = ultramem(&["train", "--config", "a/config.toml", "--steps", "12", "--out", "c"], dir.path());
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(dir.path().join("c/metrics.csv")).unwrap(), a);
}
