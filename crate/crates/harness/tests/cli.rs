use std::path::Path;
use std::process::{Command, Output};

use attnmap::annotations::read_annotations;
use attnmap::fixtures::{
    uniform_attention_weights, write_bright_patch_fixture, zero_head_weights, FixturePaths,
};
use attnmap::imageio::write_ppm;
use attnmap::report::{format_g, SummaryReport};
use attnmap_core::saliency::dump::read_raw;
use attnmap_core::vit::{write_vtw, Raster, ViTConfig, WeightStore};

fn attnmap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnmap"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn evaluate(fx: &FixturePaths, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "evaluate",
        "--weights",
        s(&fx.weights),
        "--config",
        s(&fx.config),
        "--data-dir",
        s(&fx.data_dir),
        "--out",
        s(out),
    ];
    args.extend_from_slice(extra);
    let o = attnmap(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn one_row_per_image_and_method() {
    let dir = tempfile::tempdir().unwrap();
    let fx = write_bright_patch_fixture(&dir.path().join("fx"), 6, 11).unwrap();
    let out = dir.path().join("out");
    evaluate(
        &fx,
        &out,
        &["--methods", "attention,chefer", "--init", "hand-built"],
    );
    let csv = read(&out, "results.csv");
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 12);
    let records = read_annotations(&fx.annotations).unwrap();
    for (i, r) in records.iter().enumerate() {
        assert!(rows[2 * i].starts_with(&format!("{},attention,hand-built,", r.image)));
        assert!(rows[2 * i + 1].starts_with(&format!("{},chefer,hand-built,", r.image)));
    }
    let summary: SummaryReport = serde_json::from_str(&read(&out, "summary.json")).unwrap();
    assert_eq!((summary.records, summary.evaluated), (6, 6));
    assert_eq!(summary.methods.len(), 2);
}

#[test]
fn missing_image_is_reported_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let fx = write_bright_patch_fixture(&dir.path().join("fx"), 3, 2).unwrap();
    let records = read_annotations(&fx.annotations).unwrap();
    std::fs::remove_file(fx.data_dir.join(&records[1].image)).unwrap();
    let out = dir.path().join("out");
    let o = evaluate(&fx, &out, &["--methods", "attention"]);
    assert!(String::from_utf8_lossy(&o.stderr).contains(&records[1].image));
    let summary: SummaryReport = serde_json::from_str(&read(&out, "summary.json")).unwrap();
    assert_eq!(summary.evaluated, 2);
    assert_eq!(summary.failures.len(), 1);
    assert_eq!(summary.failures[0].image, records[1].image);
    assert_eq!(read(&out, "results.csv").lines().count(), 3);
}

#[test]
fn nothing_evaluated_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let fx = write_bright_patch_fixture(&dir.path().join("fx"), 1, 2).unwrap();
    let records = read_annotations(&fx.annotations).unwrap();
    std::fs::remove_file(fx.data_dir.join(&records[0].image)).unwrap();
    let out = dir.path().join("out");
    let o = attnmap(&[
        "evaluate",
        "--weights",
        s(&fx.weights),
        "--config",
        s(&fx.config),
        "--data-dir",
        s(&fx.data_dir),
        "--out",
        s(&out),
    ]);
    assert!(!o.status.success());
}

#[test]
fn parallel_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let fx = write_bright_patch_fixture(&dir.path().join("fx"), 8, 5).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    evaluate(&fx, &a, &["--jobs", "1"]);
    evaluate(&fx, &b, &["--jobs", "4"]);
    evaluate(&fx, &c, &["--jobs", "3"]);
    for name in ["results.csv", "summary.json"] {
        assert_eq!(read(&a, name), read(&b, name), "{name}");
        assert_eq!(read(&a, name), read(&c, name), "{name}");
    }
}

#[test]
fn summary_agrees_with_csv() {
    let dir = tempfile::tempdir().unwrap();
    let fx = write_bright_patch_fixture(&dir.path().join("fx"), 8, 21).unwrap();
    let out = dir.path().join("out");
    evaluate(&fx, &out, &[]);
    let summary: SummaryReport = serde_json::from_str(&read(&out, "summary.json")).unwrap();
    let csv = read(&out, "results.csv");
    for (method, stats) in &summary.methods {
        let rows: Vec<Vec<&str>> = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').collect::<Vec<_>>())
            .filter(|f| f[1] == method)
            .collect();
        assert_eq!(rows.len(), stats.count);
        let hits = rows.iter().filter(|f| f[3] == "1").count();
        assert_eq!(hits, stats.hits);
        assert_eq!(stats.pointing_accuracy, hits as f64 / rows.len() as f64);
        let mean = rows
            .iter()
            .map(|f| f[4].parse::<f64>().unwrap())
            .sum::<f64>()
            / rows.len() as f64;
        // csv values carry six significant digits
        assert!(
            (mean - stats.iou_mean).abs() < 1e-6,
            "{method}: {mean} vs {}",
            stats.iou_mean
        );
        assert_eq!(
            format_g(stats.iou_max),
            rows.iter()
                .map(|f| f[4])
                .max_by(|x, y| {
                    x.parse::<f64>()
                        .unwrap()
                        .total_cmp(&y.parse::<f64>().unwrap())
                })
                .unwrap()
        );
    }
}

#[test]
fn attention_rows_ignore_the_class_policy() {
    let dir = tempfile::tempdir().unwrap();
    let fx = write_bright_patch_fixture(&dir.path().join("fx"), 4, 8).unwrap();
    let fixed = dir.path().join("fixed");
    let pred = dir.path().join("pred");
    evaluate(&fx, &fixed, &["--class", "1"]);
    evaluate(&fx, &pred, &["--class", "predicted"]);
    let a = read(&fixed, "results.csv");
    let b = read(&pred, "results.csv");
    // attention rows never depend on the class
    let attention = |csv: &str| {
        csv.lines()
            .filter(|l| l.contains(",attention,"))
            .map(String::from)
            .collect::<Vec<_>>()
    };
    assert_eq!(attention(&a), attention(&b));
    let sa: SummaryReport = serde_json::from_str(&read(&fixed, "summary.json")).unwrap();
    let sb: SummaryReport = serde_json::from_str(&read(&pred, "summary.json")).unwrap();
    assert_eq!(sa.class_policy, "fixed(1)");
    assert_eq!(sb.class_policy, "predicted");
}

fn tiny_fixture(dir: &Path, store: &WeightStore<f32>) -> (String, String) {
    let weights = dir.join("tiny.vtw");
    write_vtw(&weights, store).unwrap();
    let data: Vec<u8> = (0..16 * 16 * 3).map(|i| (i * 37 % 251) as u8).collect();
    let image = dir.join("img.ppm");
    write_ppm(&image, &Raster::rgb(16, 16, data).unwrap()).unwrap();
    (s(&weights).to_string(), s(&image).to_string())
}

fn run_saliency(weights: &str, image: &str, method: &str, out: &Path) -> Output {
    let o = attnmap(&[
        "saliency",
        "--weights",
        weights,
        "--config",
        "tiny",
        "--image",
        image,
        "--method",
        method,
        "--out",
        s(out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    o
}

#[test]
fn uniform_attention_gives_a_constant_map() {
    let dir = tempfile::tempdir().unwrap();
    let config = ViTConfig::tiny();
    let (w, img) = tiny_fixture(dir.path(), &uniform_attention_weights(&config, 4).unwrap());
    let out = dir.path().join("out");
    run_saliency(&w, &img, "attention", &out);
    let (grid, method) = read_raw(out.join("img.attention.grid.f32")).unwrap();
    assert_eq!(method.to_string(), "attention");
    assert_eq!(grid.shape(), &[4, 4]);
    for &v in grid.data() {
        assert!((v - 1.0 / 17.0).abs() < 1e-6, "{v}");
    }
    let pgm = std::fs::read(out.join("img.attention.pgm")).unwrap();
    let header = b"P5\n16 16\n65535\n";
    assert!(pgm.starts_with(header));
    let body = &pgm[header.len()..];
    assert_eq!(body.len(), 16 * 16 * 2);
    assert!(body.chunks(2).all(|c| c == &body[..2]));
}

#[test]
fn zero_head_chefer_dump_is_zero_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let config = ViTConfig::tiny();
    let (w, img) = tiny_fixture(dir.path(), &zero_head_weights(&config, 4).unwrap());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let first = run_saliency(&w, &img, "chefer", &a);
    let second = run_saliency(&w, &img, "chefer", &b);
    let (grid, _) = read_raw(a.join("img.chefer.grid.f32")).unwrap();
    assert!(grid.data().iter().all(|&v| v == 0.0));
    let (pixels, _) = read_raw(a.join("img.chefer.pixels.f32")).unwrap();
    assert!(pixels.data().iter().all(|&v| v == 0.0));
    for name in [
        "img.chefer.grid.f32",
        "img.chefer.pixels.f32",
        "img.chefer.pgm",
    ] {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap()
        );
    }
    let strip = |o: &Output| {
        String::from_utf8_lossy(&o.stdout)
            .lines()
            .filter(|l| !l.starts_with("wrote"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip(&first), strip(&second));
}

#[test]
fn unknown_method_is_a_usage_error() {
    let o = attnmap(&[
        "saliency",
        "--weights",
        "w",
        "--image",
        "i",
        "--method",
        "lrp",
        "--out",
        "o",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lrp"));
}

#[test]
fn inspect_reports_the_analytic_parameter_count() {
    let dir = tempfile::tempdir().unwrap();
    let config = ViTConfig::tiny();
    let path = dir.path().join("tiny.vtw");
    write_vtw(&path, &WeightStore::random(&config, 1, 0.02).unwrap()).unwrap();
    let o = attnmap(&["inspect-weights", s(&path), "--config", "tiny"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(
        text.contains(&format!("parameters: {}", config.param_count())),
        "{text}"
    );
    assert!(text.contains("blocks.1.attn.qkv.weight"));
    assert!(text.contains("config: ok"));

    let o = attnmap(&["inspect-weights", s(&path), "--config", "vit-b16"]);
    assert!(!o.status.success());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, bytes).unwrap();
    let o = attnmap(&["inspect-weights", s(&path)]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr)
        .to_lowercase()
        .contains("magic"));
}
