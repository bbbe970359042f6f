use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dpanet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpanet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn pngs(dir: &Path) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count()
}

const TINY: &[&str] = &["--base-channels=8", "--radius=2", "--patch-size=32"];

#[test]
fn gen_data_writes_triplets_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = dpanet(&[
        "gen-data",
        "--out",
        out.to_str().unwrap(),
        "--count",
        "10",
        "--height=32",
        "--width=32",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(pngs(&out), 30);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["ids"].as_array().unwrap().len(), 10);
    assert_eq!(manifest["generator"]["count"], 10);
    assert!(out.join("config.txt").exists());
}

#[test]
fn usage_errors_exit_with_two() {
    let o = dpanet(&["gen-data", "--out", "/tmp/unused", "--no_such_key=3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no_such_key"), "{}", stderr(&o));
    let o = dpanet(&["gen-data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--out"), "{}", stderr(&o));
    let o = dpanet(&["train", "--data", "/tmp", "--out", "/tmp/unused", "--radius=-1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = dpanet(&["--version"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# tiny\ncount = 3\nheight = 32\nwidth = 16\n").unwrap();
    let out = dir.path().join("data");
    let o = dpanet(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--width=32",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(pngs(&out), 9);
    let img = dpanet::synth::read_png(&out.join("00000_L.png")).unwrap();
    assert_eq!((img.shape().h, img.shape().w), (32, 32));

    fs::write(&cfg, "bogus = 1\n").unwrap();
    let o = dpanet(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_eval_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_owned();
    let (data, run) = (p("data"), p("run"));
    let (best, last) = (p("run/best.dpan"), p("run/last.dpan"));
    let o = dpanet(&["gen-data", "--out", &data, "--count", "6", "--height=32", "--width=32"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let o = dpanet(
        &[
            &["train", "--data", &data, "--out", &run, "--epochs", "2", "--seed", "3"],
            TINY,
        ]
        .concat(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let log = fs::read_to_string(dir.path().join("run/train_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,lr,mean_loss,val_psnr,val_ssim,val_mae");
    assert_eq!(lines.len(), 3);
    for f in ["last.dpan", "best.dpan", "split.json", "config.txt"] {
        assert!(dir.path().join("run").join(f).exists(), "{f}");
    }

    let eval = |name: &str, extra: &[&str]| {
        let out = p(name);
        let o = dpanet(
            &[
                &["eval", "--data", &data, "--checkpoint", &best, "--out", &out],
                TINY,
                extra,
            ]
            .concat(),
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        fs::read_to_string(dir.path().join(name).join("metrics.csv")).unwrap()
    };
    let table = eval("eval1", &[]);
    assert_eq!(table, eval("eval2", &[]));
    assert!(table.starts_with("id,psnr,ssim,mae\n"));
    assert_eq!(table.lines().count(), 1 + 6 + 1);
    assert!(table.lines().last().unwrap().starts_with("mean,"));
    assert_eq!(pngs(&dir.path().join("eval1")), 6);

    let split = format!("--split-file={}", p("run/split.json"));
    assert_eq!(eval("eval3", &[&split]).lines().count(), 1 + 1 + 1);

    let o = dpanet(
        &[
            &["infer", "--data", &data, "--checkpoint", &last, "--out", &p("infer")],
            TINY,
        ]
        .concat(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("infer/00004_restored.png").exists());

    let bad = p("bad");
    let o = dpanet(&[
        "eval",
        "--data",
        &data,
        "--checkpoint",
        &best,
        "--out",
        &bad,
        "--base-channels=8",
        "--patch-size=32",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("eam1.offset_left.weight"), "{}", stderr(&o));

    let missing = p("missing");
    let o = dpanet(
        &[
            &["eval", "--data", &missing, "--checkpoint", &best, "--out", &bad],
            TINY,
        ]
        .concat(),
    );
    assert_eq!(o.status.code(), Some(1));
}
