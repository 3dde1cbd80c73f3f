use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fedlora(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedlora"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

const QUICK: &[&str] = &[
    "--rounds",
    "3",
    "--n-clients",
    "2",
    "--n-train",
    "256",
    "--n-val",
    "64",
];

fn run_to(dir: &Path, name: &str, extra: &[&str]) -> (Output, String) {
    let mut args = vec!["run", "--out", name];
    args.extend_from_slice(QUICK);
    args.extend_from_slice(extra);
    if !extra.contains(&"--rank") {
        args.extend_from_slice(&["--rank", "4"]);
    }
    let out = fedlora(dir, &args);
    let csv = fs::read_to_string(dir.join(name)).unwrap_or_default();
    (out, csv)
}

#[test]
fn run_writes_one_row_per_round() {
    let dir = tempfile::tempdir().unwrap();
    let (out, csv) = run_to(dir.path(), "m.csv", &[]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("run_id,method,rule,strategy,rank,n_clients,seed,round,mean_loss"));
    let round0: Vec<_> = lines[1].split(',').collect();
    assert_eq!(round0[7], "0");
    assert_eq!(round0[10], "", "round 0 has no gradient norm");
    let round1: Vec<_> = lines[2].split(',').collect();
    assert!(round1[10].parse::<f64>().unwrap() > 0.0);
    // The resolved configuration is echoed as comments.
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.lines().any(|l| l.starts_with("# rank = 4")));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (_, a) = run_to(dir.path(), "a.csv", &[]);
    let (_, b) = run_to(dir.path(), "b.csv", &[]);
    let (_, c) = run_to(dir.path(), "c.csv", &["--parallel", "false"]);
    assert!(!a.is_empty());
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn config_file_and_flags_merge() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("exp.toml"),
        "rank = 2\nrule = \"standard\"\nrun_id = \"fromfile\"\n",
    )
    .unwrap();
    let (out, csv) = run_to(
        dir.path(),
        "m.csv",
        &["--config", "exp.toml", "--rank", "3"],
    );
    assert_eq!(out.status.code(), Some(0));
    let row: Vec<_> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(
        &row[..5],
        [
            "fromfile",
            "share_a_only/standard",
            "standard",
            "share_a_only",
            "3"
        ]
    );
}

#[test]
fn bad_configuration_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (out, _) = run_to(dir.path(), "m.csv", &["--rank", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rank"));

    fs::write(dir.path().join("bad.toml"), "ranks = 4\n").unwrap();
    let (out, _) = run_to(dir.path(), "m.csv", &["--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn divergence_sets_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = fedlora(
        dir.path(),
        &[
            "run",
            "--out",
            "d.csv",
            "--rule",
            "ablation_large",
            "--n-clients",
            "10",
            "--rank",
            "512",
            "--rounds",
            "5",
            "--n-train",
            "2048",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

#[test]
fn self_check_passes_and_catches_a_flipped_gradient() {
    let dir = tempfile::tempdir().unwrap();
    let ok = fedlora(dir.path(), &["check"]);
    assert_eq!(
        ok.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&ok.stdout)
    );
    let bad = fedlora(
        dir.path(),
        &["check", "--instances", "5", "--inject-fault", "grad-b-sign"],
    );
    assert_eq!(bad.status.code(), Some(3));
    let stdout = String::from_utf8_lossy(&bad.stdout);
    assert!(stdout.contains("first failure in"), "{stdout}");
}

#[test]
fn sweep_writes_metrics_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "sweep", "--axis", "rank", "--values", "2,4", "--out", "s.csv",
    ];
    args.extend_from_slice(&QUICK[..4]);
    args.extend_from_slice(&["--n-train", "256"]);
    let out = fedlora(dir.path(), &args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let metrics = fs::read_to_string(dir.path().join("s.csv")).unwrap();
    assert!(metrics.lines().next().unwrap().ends_with(",swept_value"));
    assert_eq!(metrics.lines().count(), 1 + 2 * 4);
    let summary = fs::read_to_string(dir.path().join("s_summary.csv")).unwrap();
    let row: Vec<_> = summary.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[4], "rank");
    assert_eq!(row[5], "2;4");
    assert_eq!(row[6].split(';').count(), 2);

    let unsorted = fedlora(dir.path(), &["sweep", "--axis", "rank", "--values", "4,2"]);
    assert_eq!(unsorted.status.code(), Some(1));
}

#[test]
fn partition_dump_lists_every_sample_once() {
    let dir = tempfile::tempdir().unwrap();
    let out = fedlora(
        dir.path(),
        &[
            "partition-dump",
            "--out",
            "p.csv",
            "--task",
            "classification",
            "--partition",
            "dirichlet",
            "--beta",
            "0.5",
            "--n-train",
            "300",
            "--n-clients",
            "3",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = fs::read_to_string(dir.path().join("p.csv")).unwrap();
    let mut samples: Vec<usize> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    samples.sort_unstable();
    assert_eq!(samples, (0..300).collect::<Vec<_>>());
}
