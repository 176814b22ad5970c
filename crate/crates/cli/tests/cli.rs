use std::path::Path;
use std::process::{Command, Output};

use ect_core::dataset::{read_dataset, write_dataset};
use ect_core::image::{Image, PermittivityImage};
use ect_core::metrics::{MetricsReport, SampleMetrics};
use ect_core::net::EpochRecord;

fn ect(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ect"))
        .args(args)
        .env_remove("ECT_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

const SMALL_DOMAIN: &[&str] = &[
    "--width-um",
    "40",
    "--depth-um",
    "20",
    "--pad-side-um",
    "10",
    "--pad-top-um",
    "10",
    "--electrodes",
    "4",
    "--radius-um",
    "3,5",
    "--center-depth-um",
    "4,15",
];

fn gen_small(dir: &Path, count: &str, seed: &str) -> Output {
    let mut args = vec![
        "gen-data",
        "--kind",
        "microsphere",
        "--count",
        count,
        "--seed",
        seed,
        "--out",
        path(dir),
    ];
    args.extend_from_slice(SMALL_DOMAIN);
    ect(&args)
}

#[test]
fn gen_data_writes_and_reproduces() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let out = gen_small(&a, "100", "7");
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(a.join("manifest.json").is_file());
    let ds = read_dataset(&a).unwrap();
    assert_eq!(ds.len(), 100);
    assert_eq!((ds.manifest.img_h, ds.manifest.img_w), (20, 40));

    assert_eq!(code(&gen_small(&b, "100", "7")), 0);
    let bytes = |d: &Path| std::fs::read(d.join("samples.bin")).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    assert_eq!(code(&gen_small(&out, "0", "1")), 2);
    assert_eq!(
        code(&ect(&[
            "gen-data",
            "--kind",
            "cube",
            "--count",
            "3",
            "--out",
            path(&out)
        ])),
        2
    );
    assert_eq!(
        code(&ect(&[
            "gen-data",
            "--kind",
            "biofilm",
            "--count",
            "3",
            "--bogus",
            "--out",
            path(&out)
        ])),
        2
    );
    let missing = tmp.path().join("missing");
    assert_eq!(
        code(&ect(&[
            "train",
            "--data",
            path(&missing),
            "--out",
            path(&tmp.path().join("m.ectm"))
        ])),
        2
    );
    assert_eq!(
        code(&ect(&[
            "eval",
            "--baseline",
            "kaczmarz",
            "--data",
            path(tmp.path()),
            "--out",
            "r.json"
        ])),
        2
    );
    assert_eq!(code(&ect(&["eval", "--data", path(tmp.path()), "--out", "r.json"])), 2);
    assert_eq!(code(&ect(&["--threads", "0", "gradcheck"])), 2);
}

#[test]
fn gradcheck_passes() {
    let out = ect(&["gradcheck", "--seed", "1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("end-to-end"));
    assert!(text
        .trim_end()
        .lines()
        .last()
        .unwrap()
        .starts_with("max relative error"));
}

#[test]
fn export_all_ones_is_all_255() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    assert_eq!(code(&gen_small(&data, "2", "3")), 0);
    let mut ds = read_dataset(&data).unwrap();
    ds.samples[1].image = PermittivityImage::uniform(20, 40, 1.0).unwrap();
    write_dataset(&ds, &data).unwrap();

    let pgm = tmp.path().join("ones.pgm");
    assert_eq!(
        code(&ect(&[
            "export-image",
            "--data",
            path(&data),
            "--index",
            "1",
            "--out",
            path(&pgm)
        ])),
        0
    );
    let bytes = std::fs::read(&pgm).unwrap();
    let header = b"P5\n40 20\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 800);
    assert!(bytes[header.len()..].iter().all(|&b| b == 255));

    assert_eq!(
        code(&ect(&[
            "export-image",
            "--data",
            path(&data),
            "--index",
            "2",
            "--out",
            path(&pgm)
        ])),
        2
    );
}

#[test]
fn stitch_ten_windows() {
    let tmp = tempfile::tempdir().unwrap();
    let mut inputs = Vec::new();
    let mut expected = vec![0u8; 100 * 2000];
    for w in 0..10 {
        let data: Vec<f64> = (0..100 * 200)
            .map(|k| ((k * 7 + w * 31) % 256) as f64 / 255.0)
            .collect();
        let img = Image::new(100, 200, data).unwrap();
        let pgm = img.to_pgm();
        let payload = &pgm[pgm.len() - 100 * 200..];
        for r in 0..100 {
            expected[r * 2000 + w * 200..r * 2000 + (w + 1) * 200].copy_from_slice(&payload[r * 200..(r + 1) * 200]);
        }
        let p = tmp.path().join(format!("w{w}.pgm"));
        img.write_pgm(&p).unwrap();
        inputs.push(p);
    }
    let out = tmp.path().join("wide.pgm");
    let mut args = vec!["stitch", "--overlap", "0", "--out", path(&out), "--inputs"];
    args.extend(inputs.iter().map(|p| path(p)));
    assert_eq!(code(&ect(&args)), 0);
    let bytes = std::fs::read(&out).unwrap();
    let header = b"P5\n2000 100\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(&bytes[header.len()..], &expected[..]);
}

/// Full-size pipeline with a deliberately tiny network and a single epoch.
#[test]
fn train_eval_reconstruct_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    let out = ect(&[
        "gen-data",
        "--kind",
        "biofilm",
        "--count",
        "10",
        "--seed",
        "5",
        "--out",
        path(&data),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let train = |name: &str| {
        let model = tmp.path().join(name);
        let out = ect(&[
            "--threads",
            "1",
            "train",
            "--data",
            path(&data),
            "--epochs",
            "2",
            "--batch",
            "4",
            "--seed",
            "9",
            "--widths",
            "4,4,4,4",
            "--loss",
            "smoothl1,dice",
            "--out",
            path(&model),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        model
    };
    let (m1, m2) = (train("a.ectm"), train("b.ectm"));
    assert_eq!(std::fs::read(&m1).unwrap(), std::fs::read(&m2).unwrap());
    let history = std::fs::read_to_string(tmp.path().join("a.ectm.history")).unwrap();
    let records: Vec<EpochRecord> = history.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2]);

    let mut reports = Vec::new();
    for pred in [
        ["--model", path(&m1)],
        ["--baseline", "tikhonov"],
        ["--baseline", "landweber"],
        ["--baseline", "lbp"],
    ] {
        let report = tmp.path().join(format!("{}.json", pred[1].replace('/', "_")));
        let out = ect(&[
            "eval",
            pred[0],
            pred[1],
            "--data",
            path(&data),
            "--split",
            "test",
            "--out",
            path(&report),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        reports.push(MetricsReport::from_json(&std::fs::read_to_string(&report).unwrap()).unwrap());
    }
    assert!(data.join("sensitivity.ectj").is_file());
    for r in &reports {
        assert_eq!(r.count, 1);
        let n = r.per_sample.len() as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| r.per_sample.iter().map(f).sum::<f64>() / n;
        assert!((mean(|s| s.mse) - r.means.mse).abs() < 1e-12);
        assert!((mean(|s| s.cc) - r.means.cc).abs() < 1e-12);
        assert!((mean(|s| s.iou) - r.means.iou).abs() < 1e-12);
    }
    let names: Vec<&str> = reports.iter().map(|r| r.predictor.as_str()).collect();
    assert_eq!(names, ["network", "tikhonov", "landweber", "lbp"]);

    let pgm = tmp.path().join("rec.pgm");
    let out = ect(&[
        "reconstruct",
        "--model",
        path(&m1),
        "--data",
        path(&data),
        "--index",
        "0",
        "--out",
        path(&pgm),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let img = Image::read_pgm(&pgm).unwrap();
    assert_eq!((img.rows, img.cols), (100, 200));
}
