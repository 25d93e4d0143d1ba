use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
master_seed = 3
sbs_count = 3
rounds = 2
cache_len_lo = 10
cache_len_hi = 14
min_cache_len = 12
pretrain_size = 24
validation_size = 10
local_epochs = 2
pretrain_epochs = 3
batch_size = 8

[channel]
grid_height = 12
grid_width = 6

[network]
layers = [
  { kernel_height = 3, kernel_width = 3, filters = 4, activation = "selu" },
  { kernel_height = 3, kernel_width = 3, filters = 2, activation = "selu" },
]
"#;

fn robustfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_robustfl")).args(args).output().expect("binary starts")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_tiny(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, format!("{TINY}\n{extra}")).unwrap();
    path
}

#[test]
fn run_writes_one_row_per_round_with_empty_beta() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path(), "");
    let out = tmp.path().join("run");
    let res = robustfl(&["run", "--config", s(&cfg), "--out", s(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let text = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers().unwrap().clone();
    let beta = headers.iter().position(|h| h == "mse_beta").unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r[beta].is_empty()));
    assert_eq!(rows.iter().map(|r| r[0].to_string()).collect::<Vec<_>>(), ["0", "1", "2"]);
}

#[test]
fn seed_flag_overrides_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path(), "");
    let out = tmp.path().join("run");
    assert!(robustfl(&["run", "--config", s(&cfg), "--out", s(&out), "--seed", "99"]).status.success());
    let text = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(text.lines().skip(1).all(|l| l.ends_with(",99")), "{text}");
}

#[test]
fn sweep_writes_one_csv_per_cell_and_a_figure() {
    let tmp = tempfile::tempdir().unwrap();
    write_tiny(tmp.path(), "");
    let spec = tmp.path().join("sweep.toml");
    std::fs::write(
        &spec,
        r#"
base = "tiny.toml"
aggregators = [{ kind = "fed_avg" }, { kind = "fed_median" }, { kind = "sto_median" }, { kind = "trimmed_mean", trim = 1 }]
modes = ["reverse"]
seeds = [5]
"#,
    )
    .unwrap();
    let out = tmp.path().join("sweep");
    let res = robustfl(&["sweep", "--config", s(&spec), "--out", s(&out), "--jobs", "2"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let names: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names.iter().filter(|n| n.ends_with(".csv")).count(), 4, "{names:?}");
    assert_eq!(names.iter().filter(|n| n.ends_with(".svg")).count(), 1, "{names:?}");
    assert!(names.iter().all(|n| !n.ends_with(".tmp")));
}

#[test]
fn plot_renders_a_small_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let csv_path = tmp.path().join("m.csv");
    std::fs::write(
        &csv_path,
        "round,mse_gamma,mse_delta,mse_beta,aggregator,attack_mode,deployment,r_a,seed\n\
         0,0.5,0.6,,fedavg,reverse,widespread,0.2,1\n\
         1,0.4,0.5,2.0,fedavg,reverse,widespread,0.2,1\n\
         2,0.3,0.4,1.5,fedavg,reverse,widespread,0.2,1\n",
    )
    .unwrap();
    let svg = tmp.path().join("fig.svg");
    let res = robustfl(&["plot", s(&csv_path), "--out", s(&svg), "--title", "demo"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let text = std::fs::read_to_string(&svg).unwrap();
    assert!(text.starts_with("<svg") || text.starts_with("<?xml"));
    assert!(text.contains("demo"));
}

#[test]
fn malformed_key_fails_without_leaving_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path(), "local_epochz = 4\n");
    let out = tmp.path().join("never");
    let res = robustfl(&["run", "--config", s(&cfg), "--out", s(&out)]);
    assert!(!res.status.success());
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("local_epochz"), "{err}");
    assert!(!out.exists());
}

#[test]
fn failing_sweep_rolls_back_partial_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    write_tiny(tmp.path(), "");
    let spec = tmp.path().join("sweep.toml");
    // Trimming two of three updates is invalid.
    std::fs::write(
        &spec,
        "base = \"tiny.toml\"\naggregators = [{ kind = \"fed_avg\" }, { kind = \"trimmed_mean\", trim = 2 }]\nmodes = [\"none\"]\nseeds = [1]\n",
    )
    .unwrap();
    let out = tmp.path().join("sweep");
    let res = robustfl(&["sweep", "--config", s(&spec), "--out", s(&out)]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("trim"));
    assert!(!out.exists());
}
