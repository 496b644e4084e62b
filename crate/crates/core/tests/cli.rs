use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sparseconv::cli::RunReport;
use sparseconv::dataset::{self, fixture_f5, fixture_k3, generate};
use sparseconv::FeatureMap;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sparseconv"));
    c.env_remove("SPARSECONV_WORKERS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn sparseconv")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixtures {
    dir: tempfile::TempDir,
}

impl Fixtures {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        dataset::save(&fixture_f5::<f32>(), dir.path().join("f5.fmap")).unwrap();
        dataset::save(&fixture_k3::<f32>().to_map(), dir.path().join("k3.fmap")).unwrap();
        dataset::save(
            &FeatureMap::<f32>::zeros(1, 5, 5).unwrap(),
            dir.path().join("zero.fmap"),
        )
        .unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn report(path: &Path) -> RunReport {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_writes_zero_map_and_is_reproducible() {
    let fx = Fixtures::new();
    let out = fx.path("z.fmap");
    let o = run(&[
        "gen",
        "--height",
        "5",
        "--width",
        "5",
        "--sparsity",
        "1.0",
        "--out",
        p(&out),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let m = dataset::load(&out).unwrap();
    assert_eq!(m.len(), 25);
    assert!(m.values().iter().all(|&v| v == 0.0));

    // stdout variant
    let o = run(&["gen", "--height", "5", "--width", "5", "--sparsity", "1.0"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(dataset::decode_fmap(&o.stdout).unwrap(), m);

    let a = fx.path("a.fmap");
    let b = fx.path("b.fmap");
    for f in [&a, &b] {
        let o = run(&[
            "gen",
            "--height",
            "9",
            "--width",
            "7",
            "--channels",
            "2",
            "--sparsity",
            "0.4",
            "--seed",
            "11",
            "--out",
            p(f),
        ]);
        assert_eq!(o.status.code(), Some(0));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn gen_reports_exact_sparsity() {
    let fx = Fixtures::new();
    let out = fx.path("g.fmap");
    let o = run(&[
        "gen",
        "--sparsity",
        "0.7",
        "--height",
        "32",
        "--width",
        "32",
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["zeros"], 716);
    assert_eq!(summary["elements"], 1024);
    assert_eq!(summary["sparsity"].as_f64().unwrap(), 716.0 / 1024.0);
}

#[test]
fn gen_rejects_bad_sparsity() {
    let o = run(&["gen", "--height", "5", "--width", "5", "--sparsity", "1.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sparsity"));
    let o = run(&["gen", "--height", "5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn conv_methods_agree_on_fixture() {
    let fx = Fixtures::new();
    let mut sums = Vec::new();
    for method in ["dense", "ecr"] {
        let rep = fx.path(&format!("{method}.json"));
        let out = fx.path(&format!("{method}.fmap"));
        let o = run(&[
            "conv",
            "--input",
            p(&fx.path("f5.fmap")),
            "--kernel",
            p(&fx.path("k3.fmap")),
            "--method",
            method,
            "--report",
            p(&rep),
            "--out",
            p(&out),
        ]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
        let r = report(&rep);
        assert_eq!(r.method, method);
        assert_eq!(dataset::load(&out).unwrap().values()[0], 51.0);
        sums.push((r.checksum, r.ops));
    }
    assert_eq!(sums[0].0, sums[1].0);
    assert_eq!(sums[0].1.multiplications, 81);
    assert_eq!(sums[1].1.multiplications, 27);
}

#[test]
fn conv_zero_input_and_stride_grid() {
    let fx = Fixtures::new();
    let o = run(&[
        "conv",
        "--input",
        p(&fx.path("zero.fmap")),
        "--kernel",
        p(&fx.path("k3.fmap")),
        "--method",
        "ecr",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let r: RunReport = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r.ops.multiplications, 0);
    assert_eq!(r.output_sparsity, 1.0);

    dataset::save(&generate(11, 11, 1, 0.5, 1).unwrap(), fx.path("m11.fmap")).unwrap();
    let o = run(&[
        "conv",
        "--input",
        p(&fx.path("m11.fmap")),
        "--kernel",
        p(&fx.path("k3.fmap")),
        "--stride",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let r: RunReport = serde_json::from_slice(&o.stdout).unwrap();
    let g = r.grid.unwrap();
    assert_eq!((g.blocks, g.threads_per_block), (5, 5));
    assert_eq!((r.dims.out_h, r.dims.out_w), (5, 5));
}

#[test]
fn conv_dimension_errors_exit_2() {
    let fx = Fixtures::new();
    dataset::save(
        &FeatureMap::<f32>::zeros(1, 2, 2).unwrap(),
        fx.path("tiny.fmap"),
    )
    .unwrap();
    let o = run(&[
        "conv",
        "--input",
        p(&fx.path("tiny.fmap")),
        "--kernel",
        p(&fx.path("k3.fmap")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&[
        "conv",
        "--input",
        p(&fx.path("missing.fmap")),
        "--kernel",
        p(&fx.path("k3.fmap")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&[
        "conv",
        "--input",
        p(&fx.path("f5.fmap")),
        "--kernel",
        p(&fx.path("k3.fmap")),
        "--workers",
        "0",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn convpool_fused_matches_separate() {
    let fx = Fixtures::new();
    let mut reports = Vec::new();
    for method in ["dense-separate", "pecr"] {
        let o = run(&[
            "convpool",
            "--input",
            p(&fx.path("f5.fmap")),
            "--kernel",
            p(&fx.path("k3.fmap")),
            "--pool-h",
            "2",
            "--pool-w",
            "2",
            "--pool-stride",
            "1",
            "--method",
            method,
        ]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
        reports.push(serde_json::from_slice::<RunReport>(&o.stdout).unwrap());
    }
    assert_eq!(reports[0].checksum, reports[1].checksum);
    assert_eq!(reports[0].traffic.transfer_floats(), 56);
    assert_eq!(reports[1].traffic.transfer_floats(), 38);
    let g = reports[1].grid.unwrap();
    assert_eq!((g.blocks, g.threads_per_block), (2, 2));

    let out = fx.path("pooled.fmap");
    let o = run(&[
        "convpool",
        "--input",
        p(&fx.path("zero.fmap")),
        "--kernel",
        p(&fx.path("k3.fmap")),
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(dataset::load(&out)
        .unwrap()
        .values()
        .iter()
        .all(|&v| v == 0.0));
}

#[test]
fn convpool_rejects_non_integral_tiling() {
    let fx = Fixtures::new();
    dataset::save(&generate(6, 5, 1, 0.5, 2).unwrap(), fx.path("m.fmap")).unwrap();
    let o = run(&[
        "convpool",
        "--input",
        p(&fx.path("m.fmap")),
        "--kernel",
        p(&fx.path("k3.fmap")),
        "--pool-stride",
        "2",
        "--method",
        "pecr",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("width"));
}

fn write_sweep(dir: &Path, json: &str) -> PathBuf {
    let path = dir.join("sweep.json");
    std::fs::write(&path, json).unwrap();
    path
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|r| r.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

#[test]
fn sweep_rows_and_counters() {
    let fx = Fixtures::new();
    let cfg = write_sweep(
        fx.dir.path(),
        r#"{"seed": 4, "points": [{"size": 12, "kernel": 3, "sparsity": 0.5}]}"#,
    );
    let out = fx.path("one.csv");
    let o = run(&["sweep", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let (header, rows) = read_csv(&out);
    assert_eq!(rows.len(), 1);
    assert_eq!(header[0], "size");
    assert!(header.contains(&"ecr_speedup".to_string()));

    let cfg = write_sweep(
        fx.dir.path(),
        r#"{"grid": {"sizes": [32], "kernels": [3], "sparsities": [0.5, 0.9], "pools": [{"size": 2, "stride": 2}]}}"#,
    );
    let out = fx.path("two.csv");
    assert_eq!(
        run(&["sweep", "--config", p(&cfg), "--out", p(&out)])
            .status
            .code(),
        Some(0)
    );
    let (header, rows) = read_csv(&out);
    let col = header.iter().position(|h| h == "ecr_muls").unwrap();
    let pcol = header.iter().position(|h| h == "pecr_muls").unwrap();
    let muls: Vec<u64> = rows.iter().map(|r| r[col].parse().unwrap()).collect();
    let pmuls: Vec<u64> = rows.iter().map(|r| r[pcol].parse().unwrap()).collect();
    assert!(muls[1] < muls[0]);
    assert!(pmuls[1] < pmuls[0]);

    let cfg = write_sweep(fx.dir.path(), r#"{"points": []}"#);
    let out = fx.path("empty.csv");
    assert_eq!(
        run(&["sweep", "--config", p(&cfg), "--out", p(&out)])
            .status
            .code(),
        Some(0)
    );
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("size,kernel,stride"));

    let cfg = write_sweep(fx.dir.path(), r#"{"points": [{"size": "big"}]}"#);
    assert_eq!(
        run(&["sweep", "--config", p(&cfg), "--out", p(&out)])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn analyze_profiles_directory() {
    let fx = Fixtures::new();
    let maps = fx.path("maps");
    std::fs::create_dir(&maps).unwrap();
    for i in 0..3 {
        dataset::save(
            &FeatureMap::<f32>::zeros(2, 6, 6).unwrap(),
            maps.join(format!("z{i}.fmap")),
        )
        .unwrap();
    }
    let out = fx.path("profile.csv");
    let o = run(&[
        "analyze",
        "--inputs",
        p(&maps),
        "--kernel-size",
        "3",
        "--stride",
        "1",
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let (header, rows) = read_csv(&out);
    let raw = header.iter().position(|h| h == "raw_sparsity").unwrap();
    let ext = header.iter().position(|h| h == "im2col_sparsity").unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r[raw] == "1.0" && r[ext] == "1.0"));

    let mixed = fx.path("mixed");
    std::fs::create_dir(&mixed).unwrap();
    dataset::save(&fixture_f5::<f32>(), mixed.join("a_f5.fmap")).unwrap();
    // 10 x 14 map with 126 zeros: sparsity 0.9 at width 14
    let mut csv = String::from("channels,height,width\n1,10,14\n");
    for y in 0..10 {
        let row: Vec<&str> = (0..14)
            .map(|x| if y * 14 + x < 14 { "1" } else { "0" })
            .collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    std::fs::write(mixed.join("b_wide.csv"), csv).unwrap();
    std::fs::write(mixed.join("c_broken.fmap"), b"NOPE").unwrap();
    let o = run(&["analyze", "--inputs", p(&mixed), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0));
    let (header, rows) = read_csv(&out);
    let theta = header.iter().position(|h| h == "theta").unwrap();
    let err = header.iter().position(|h| h == "error").unwrap();
    assert_eq!(rows[0][raw].parse::<f64>().unwrap(), 0.68);
    assert!((rows[1][theta].parse::<f64>().unwrap() - 6.4286).abs() < 1e-4);
    assert!(rows[2][err].contains("magic"));

    let broken = fx.path("broken");
    std::fs::create_dir(&broken).unwrap();
    std::fs::write(broken.join("x.fmap"), b"junk").unwrap();
    let o = run(&["analyze", "--inputs", p(&broken), "--out", p(&out)]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn forward_runs_network_file() {
    let fx = Fixtures::new();
    let net = r#"{
      "version": 1,
      "input": {"channels": 1, "height": 22, "width": 22},
      "layers": [
        {"kind": "conv_pool", "kernel": {"h": 3, "w": 3, "in_ch": 1, "out_ch": 2}, "stride": 1,
         "pool": {"h": 2, "w": 2, "stride": 2, "mode": "max"}, "activation": "relu", "weights": {"seed": 1}},
        {"kind": "conv", "kernel": {"h": 3, "w": 3, "in_ch": 2, "out_ch": 1}, "activation": "relu", "weights": {"seed": 7}}
      ]}"#;
    std::fs::write(fx.path("net.json"), net).unwrap();
    dataset::save(&generate(22, 22, 1, 0.6, 5).unwrap(), fx.path("in.fmap")).unwrap();
    let mut sums = Vec::new();
    for method in ["dense", "ecr", "pecr"] {
        let o = run(&[
            "forward",
            "--net",
            p(&fx.path("net.json")),
            "--input",
            p(&fx.path("in.fmap")),
            "--method",
            method,
        ]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
        let r: RunReport = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!((r.dims.out_channels, r.dims.out_h, r.dims.out_w), (1, 8, 8));
        sums.push(r);
    }
    assert_eq!(sums[0].checksum, sums[1].checksum);
    assert_eq!(sums[1].checksum, sums[2].checksum);
    assert_eq!(sums[2].notes, vec!["layer 1 ran with ecr".to_string()]);
}

#[test]
fn workers_from_environment() {
    let fx = Fixtures::new();
    let o = bin()
        .env("SPARSECONV_WORKERS", "3")
        .args([
            "conv",
            "--input",
            p(&fx.path("f5.fmap")),
            "--kernel",
            p(&fx.path("k3.fmap")),
        ])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let r: RunReport = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r.workers, 3);
}

#[test]
fn capacity_warning_does_not_fail() {
    let fx = Fixtures::new();
    let o = run(&[
        "conv",
        "--input",
        p(&fx.path("f5.fmap")),
        "--kernel",
        p(&fx.path("k3.fmap")),
        "--shared-memory",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let r: RunReport = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r.capacity_warning.unwrap().budget_bytes, 1);
}
