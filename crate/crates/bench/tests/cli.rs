use std::process::Command;

use hmat_bench::{
    dump_tree, run_benchmark, verify, write_csv, BenchConfig, BenchError, KernelPair, Method, VerifyOptions, CSV_HEADER,
};
use hmat_core::{MultiplyMode, TruncationPolicy};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hmat-bench"))
}

#[test]
fn config_round_trips() {
    let text = "\
# sweep
kernel = slp
level_min = 0
level_max = 2   # inclusive
nmin = 8
eta = 0.5
eps = 1e-10
mode = traditional
compressor = hier
seed = 42
out = rows.csv
threads = 2
";
    let cfg = BenchConfig::parse(text).unwrap();
    assert_eq!(cfg.kernel, KernelPair::SingleLayer);
    assert_eq!((cfg.level_min, cfg.level_max, cfg.n_min), (0, 2, 8));
    assert_eq!(cfg.eta, 0.5);
    assert_eq!(cfg.policy, TruncationPolicy::EpsRank(1e-10));
    assert_eq!(cfg.mode, MultiplyMode::Traditional);
    assert_eq!(cfg.method, Method::Hier);
    assert_eq!(cfg.seed, 42);
    assert_eq!(cfg.threads, Some(2));
    assert_eq!(BenchConfig::parse(&cfg.to_config_string()).unwrap(), cfg);
    assert_eq!(BenchConfig::parse("").unwrap(), BenchConfig::default());
}

#[test]
fn config_errors_name_line_and_field() {
    let err = BenchConfig::parse("kernel = exp\nnmin = many\n").unwrap_err();
    match err {
        BenchError::Config { line, field, .. } => assert_eq!((line, field.as_str()), (2, "nmin")),
        e => panic!("unexpected {e}"),
    }
    let err = BenchConfig::parse("\n\ncolour = blue").unwrap_err();
    assert!(matches!(err, BenchError::Config { line: 3, .. }));
    assert!(err.to_string().starts_with("line 3: colour"));
    assert!(matches!(BenchConfig::parse("just words"), Err(BenchError::Config { line: 1, .. })));
    assert!(matches!(BenchConfig::parse("rank = 4\neps = 1e-6"), Err(BenchError::Config { line: 2, .. })));
    assert!(matches!(BenchConfig::parse("level_min = 3\nlevel_max = 1"), Err(BenchError::Invalid(_))));
    assert!(matches!(BenchConfig::parse("level_max = 12"), Err(BenchError::Invalid(_))));
    assert!(matches!(BenchConfig::parse("compressor = hier"), Err(BenchError::Invalid(_))));
    assert!(matches!(BenchConfig::parse("rank = 0"), Err(BenchError::Invalid(_))));
}

#[test]
fn single_level_gives_one_row() {
    let cfg = BenchConfig {
        level_min: 0,
        level_max: 0,
        ..BenchConfig::default()
    };
    let rows = run_benchmark(&cfg).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].n, 6);
    let mut buf = Vec::new();
    write_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), CSV_HEADER.join(","));
    let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(fields.len(), CSV_HEADER.len());
    assert_eq!(&fields[..4], ["6", "new", "aca", "rank=16"]);
    assert!(lines.next().is_none());
}

#[test]
fn rows_are_deterministic_apart_from_timings() {
    let cfg = BenchConfig {
        level_min: 1,
        level_max: 2,
        n_min: 6,
        policy: TruncationPolicy::FixedRank(4),
        method: Method::Randomized,
        ..BenchConfig::default()
    };
    let strip = |mut r: hmat_bench::BenchRow| {
        r.wall_s = 0.0;
        r.wall_s_per_dof = 0.0;
        r
    };
    let a: Vec<_> = run_benchmark(&cfg).unwrap().into_iter().map(strip).collect();
    let b: Vec<_> = run_benchmark(&cfg).unwrap().into_iter().map(strip).collect();
    assert_eq!(a, b);
    assert_eq!(a.iter().map(|r| r.n).collect::<Vec<_>>(), [24, 96]);
    assert!(a[1].matvec_count > 0);
    assert!(a[1].max_far_rank <= 4);
}

#[test]
fn verify_default_passes_and_corruption_fails() {
    let cfg = BenchConfig {
        level_min: 2,
        level_max: 2,
        ..BenchConfig::default()
    };
    let ok = verify(&cfg, VerifyOptions::default()).unwrap();
    assert!(ok.passed(), "{}", ok.table());
    assert!(ok.checks.iter().any(|c| c.name == "product_error"));

    let bad = verify(&cfg, VerifyOptions { corrupt: true }).unwrap();
    assert!(!bad.passed());
    assert!(bad.failures().any(|c| c.name == "product_error"));
}

#[test]
fn verify_passes_when_eps_exceeds_the_error() {
    let cfg = BenchConfig {
        level_min: 2,
        level_max: 2,
        policy: TruncationPolicy::EpsRank(1e-3),
        method: Method::BiLanczos,
        ..BenchConfig::default()
    };
    assert!(verify(&cfg, VerifyOptions::default()).unwrap().passed());
}

#[test]
fn verify_refuses_large_problems() {
    let cfg = BenchConfig {
        level_min: 5,
        level_max: 5,
        ..BenchConfig::default()
    };
    assert!(matches!(verify(&cfg, VerifyOptions::default()), Err(BenchError::Invalid(_))));
}

#[test]
fn dump_tree_matches_golden() {
    let golden = include_str!("golden/dump_tree_n24.txt");
    assert_eq!(dump_tree(1, 4, 1.0).unwrap(), golden);

    // Independent structure checks: leaves tile 24 x 24 exactly once.
    let mut cover = vec![0u8; 24 * 24];
    for line in golden.lines().filter(|l| !l.contains("kind=inner")) {
        let range = |key: &str| {
            let v = line.split_whitespace().find_map(|t| t.strip_prefix(key)).unwrap();
            let (a, b) = v.split_once("..").unwrap();
            a.parse::<usize>().unwrap()..b.parse::<usize>().unwrap()
        };
        for i in range("rows=") {
            for j in range("cols=") {
                cover[i * 24 + j] += 1;
            }
        }
    }
    assert!(cover.iter().all(|&c| c == 1));
}

#[test]
fn cli_exit_codes() {
    let out = bin().args(["bench", "--level-min", "0", "--level-max", "0"]).output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 2);
    assert!(stdout.lines().nth(1).unwrap().starts_with("6,"));

    let dir = std::env::temp_dir().join(format!("hmat-bench-test-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = dir.join("run.cfg");
    std::fs::write(&cfg, "level_min = 1\nlevel_max = 1\nrank = 4\n").unwrap();
    let csv = dir.join("rows.csv");
    let out = bin()
        .args(["bench", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&csv)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(std::fs::read_to_string(&csv).unwrap().contains("\n24,new,aca,rank=4,"));

    let out = bin().args(["verify", "--level-min", "1", "--level-max", "1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8(out.stdout).unwrap().ends_with("verify: PASS\n"));

    let out = bin()
        .args(["verify", "--level-min", "2", "--level-max", "2", "--corrupt"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.lines().any(|l| l.starts_with("product_error") && l.ends_with("FAIL")));

    std::fs::write(&cfg, "nmin = -3\n").unwrap();
    let out = bin().args(["bench", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("line 1: nmin"));

    let out = bin().args(["dump-tree", "--level", "1", "--nmin", "4"]).output().unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), include_str!("golden/dump_tree_n24.txt"));
    std::fs::remove_dir_all(&dir).ok();
}
