use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bifurcated_attn::engine::Generation;
use tempfile::TempDir;

fn bifurc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bifurc"))
        .env_remove("BIFURC_CONFIG")
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
    model: PathBuf,
    prompt: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.bin");
    let prompt = dir.path().join("p.txt");
    std::fs::write(&prompt, "The quick brown fox").unwrap();
    let out = bifurc(&["--seed", "5", "init", "--out", s(&model), "--layers", "2"]);
    assert!(out.status.success());
    Fixture { dir, model, prompt }
}

fn transcript(f: &Fixture, extra: &[&str]) -> Generation {
    let mut args = extra.to_vec();
    args.extend([
        "--format",
        "json",
        "generate",
        "--model",
        s(&f.model),
        "--prompt",
        s(&f.prompt),
    ]);
    let out = bifurc(&args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn equiv_exit_codes() {
    assert_eq!(bifurc(&["equiv", "--cases", "40"]).status.code(), Some(0));
    assert_eq!(
        bifurc(&["equiv", "--cases", "40", "--inject-fault"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        bifurc(&["equiv", "--cases", "40", "--no-decode"])
            .status
            .code(),
        Some(0)
    );
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(
        bifurc(&["--path", "sideways", "equiv"]).status.code(),
        Some(2)
    );
    assert_eq!(bifurc(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(bifurc(&["--preset", "nope", "io"]).status.code(), Some(2));
    assert_eq!(bifurc(&["equiv", "--cases", "0"]).status.code(), Some(2));
    let missing = bifurc(&[
        "generate",
        "--model",
        "/nonexistent",
        "--prompt",
        "/nonexistent",
    ]);
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(bifurc(&["--help"]).status.code(), Some(0));
}

#[test]
fn io_table_csv_and_json() {
    let csv = bifurc(&["io", "--b", "1,2,4,8,16", "--m-c", "8192"]);
    assert!(csv.status.success());
    let text = String::from_utf8(csv.stdout).unwrap();
    let ratios: Vec<f64> = text
        .lines()
        .skip(2)
        .map(|l| l.split(',').nth(13).unwrap().parse().unwrap())
        .collect();
    assert_eq!(ratios.len(), 5);
    assert!(ratios.windows(2).all(|w| w[1] > w[0]));
    assert!((3.5..=5.0).contains(&ratios[4]));

    let json = bifurc(&[
        "--preset", "toy", "--format", "json", "io", "--m-d", "0", "--m-c", "16",
    ]);
    assert!(json.status.success());
    let v: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(v["schema"], 1);
    for row in v["rows"].as_array().unwrap() {
        assert_eq!(
            row["kv_ratio"].as_f64().unwrap(),
            row["b"].as_f64().unwrap()
        );
        assert_eq!(row["verified"], true);
    }
}

#[test]
fn greedy_transcript_is_byte_identical() {
    let f = fixture();
    let args = ["--batch", "1", "--max-new", "8", "--format", "json"];
    let run = || {
        let mut a = args.to_vec();
        a.extend([
            "generate",
            "--greedy",
            "--model",
            s(&f.model),
            "--prompt",
            s(&f.prompt),
        ]);
        bifurc(&a).stdout
    };
    let first = run();
    assert!(!first.is_empty());
    assert_eq!(first, run());
}

#[test]
fn naive_and_bifurcated_paths_give_same_tokens() {
    let f = fixture();
    let naive = transcript(&f, &["--batch", "8", "--max-new", "6", "--path", "naive"]);
    let bif = transcript(
        &f,
        &["--batch", "8", "--max-new", "6", "--path", "bifurcated"],
    );
    assert_eq!(naive.sequences, bif.sequences);
    assert!(bif.ledger.kv_reads() < naive.ledger.kv_reads());
}

#[test]
fn batched_context_reads_beat_sequential_runs() {
    let f = fixture();
    let common = ["--max-new", "5", "--path", "bifurcated"];
    let batched = transcript(&f, &[&common[..], &["--batch", "16"]].concat());
    let single = transcript(&f, &[&common[..], &["--batch", "1"]].concat());
    let cfg = bifurcated_attn::engine::ToyModel::<f64>::read_checkpoint(
        std::fs::File::open(&f.model).unwrap(),
    )
    .unwrap()
    .cfg;
    let (g, k, l) = (cfg.groups as u64, cfg.head_dim as u64, cfg.layers as u64);
    // Context reads per decode step, keys plus values, all layers.
    let ctx = |gen: &Generation, b: u64| -> u64 {
        gen.steps
            .iter()
            .map(|st| {
                assert_eq!(
                    st.kv_reads,
                    2 * l * g * k * (st.m_c as u64 + b * st.m_d as u64)
                );
                2 * l * g * k * st.m_c as u64
            })
            .sum()
    };
    let batched_ctx = ctx(&batched, 16);
    let sequential_ctx = 16 * ctx(&single, 1);
    assert_eq!(sequential_ctx, 16 * batched_ctx);
}

#[test]
fn config_file_from_env_and_overwrite_guard() {
    let f = fixture();
    let cfg = f.dir.path().join("c.json");
    std::fs::write(
        &cfg,
        r#"{"seed": 77, "batch": 3, "max_new": 4, "format": "json"}"#,
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_bifurc"))
        .env("BIFURC_CONFIG", &cfg)
        .args(["generate", "--model", s(&f.model), "--prompt", s(&f.prompt)])
        .output()
        .unwrap();
    assert!(out.status.success());
    let g: Generation = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(
        (g.options.seed, g.options.batch, g.options.max_new),
        (77, 3, 4)
    );

    let bad = f.dir.path().join("bad.json");
    std::fs::write(&bad, "{not json").unwrap();
    assert_eq!(
        bifurc(&["--config", s(&bad), "equiv"]).status.code(),
        Some(2)
    );

    // Calibration refuses to replace an existing file without --force.
    assert_eq!(
        bifurc(&["calibrate", "--iterations", "1", "--out", s(&cfg)])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        bifurc(&[
            "calibrate",
            "--iterations",
            "0",
            "--out",
            s(&f.dir.path().join("z.json"))
        ])
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn snapshot_round_trip_through_cli() {
    let f = fixture();
    let snap = f.dir.path().join("s.kv");
    let written = bifurc(&[
        "--batch",
        "3",
        "snapshot",
        "--model",
        s(&f.model),
        "--prompt",
        s(&f.prompt),
        "--out",
        s(&snap),
        "--steps",
        "2",
    ]);
    assert!(written.status.success());
    let inspected = bifurc(&["snapshot", "--inspect", s(&snap)]);
    assert_eq!(written.stdout, inspected.stdout);
    assert!(String::from_utf8_lossy(&inspected.stdout).contains("b=3"));
}
