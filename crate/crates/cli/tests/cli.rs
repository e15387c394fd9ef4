use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pfad_core::checkpoint::Checkpoint;
use pfad_core::codec::{Codec, CodecConfig, Linear};
use pfad_core::data::pnm::{read_pgm, write_pgm, write_ppm};
use pfad_core::data::{load_dataset, Dataset, Record, Split};
use pfad_core::frontend::FrontendKind;
use pfad_core::scoring::EvalReport;
use pfad_core::tensor::Tensor;
use pfad_core::train::{AdamState, TrainConfig};

fn pfad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pfad"))
        .args(args)
        .env("PFAD_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = pfad(args);
    assert!(
        out.status.success(),
        "pfad {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 8] = [
    "--set",
    "synth.n_train=10",
    "--set",
    "synth.n_test_normal=4",
    "--set",
    "synth.n_test_defect=4",
    "--set",
    "synth.size=32",
];

fn gen_small(dir: &Path, seed: &str) {
    let mut args = vec!["gen-data", "--categories", "2", "--seed", seed, "--out", s(dir)];
    args.extend(SMALL);
    ok(&args);
}

/// Relative path → bytes for every file under `root`, minus the run config.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "run_config.txt" {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn gen_data_is_deterministic_and_loads() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen_small(&a, "7");
    gen_small(&b, "7");
    let ta = tree(&a);
    assert!(ta.len() > 20);
    assert_eq!(ta, tree(&b));
    let dataset = load_dataset(&a).unwrap();
    assert_eq!(dataset.categories().len(), 2);
    assert_eq!(dataset.seed, Some(7));
    assert!(a.join("run_config.txt").exists());
}

#[test]
fn too_few_categories_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    for n in ["0", "1"] {
        let out = pfad(&["gen-data", "--categories", n, "--out", s(tmp.path())]);
        assert_eq!(out.status.code(), Some(2), "--categories {n}");
    }
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = pfad(&["gen-data", "--set", "synth.colour=red", "--out", s(tmp.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("synth.colour"));

    let cfg = tmp.path().join("bad.txt");
    fs::write(&cfg, "train.epochs = 2\ntrain.learning_rate = 0.1\n").unwrap();
    let out = pfad(&["train", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert!(!out.status.success());
}

#[test]
fn smoke_pipeline_emits_all_files() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data, "3");
    let run = tmp.path().join("run");
    ok(&["train", "--smoke", "--data", s(&data), "--out", s(&run), "--seed", "5"]);
    for f in ["checkpoint.pfck", "train.log", "epoch_losses.tsv", "run_config.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let ck = Checkpoint::load(&run.join("checkpoint.pfck")).unwrap();
    assert_eq!(ck.epoch, 2);
    let log = fs::read_to_string(run.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), ck.step);
    for line in log.lines() {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 5, "{line}");
        assert!(fields[2].parse::<f64>().unwrap().is_finite());
    }

    let ckpt = run.join("checkpoint.pfck");
    let eval = tmp.path().join("eval");
    ok(&["eval", "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&eval)]);
    let report = EvalReport::parse_record(&fs::read_to_string(eval.join("eval_report.txt")).unwrap()).unwrap();
    assert_eq!(report.n_images, 16);
    assert!(eval.join("eval_table.txt").exists());
    assert!(eval.join("run_config.txt").exists());

    let score = tmp.path().join("score");
    ok(&["score", "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&score)]);
    let scores = fs::read_to_string(score.join("scores.tsv")).unwrap();
    assert_eq!(scores.lines().count(), 17);
    for line in scores.lines().skip(1) {
        let map = line.split('\t').nth(4).unwrap();
        let (w, h, _) = read_pgm(&score.join(map)).unwrap();
        assert_eq!((w, h), (32, 32));
    }
}

#[test]
fn resolved_config_recreates_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data, "4");
    let first = tmp.path().join("first");
    ok(&["train", "--data", s(&data), "--out", s(&first), "--set", "train.epochs=2", "--seed", "8"]);
    let second = tmp.path().join("second");
    ok(&["train", "--config", s(&first.join("run_config.txt")), "--out", s(&second)]);
    assert_eq!(
        fs::read(first.join("checkpoint.pfck")).unwrap(),
        fs::read(second.join("checkpoint.pfck")).unwrap()
    );
    assert_eq!(fs::read(first.join("train.log")).unwrap(), fs::read(second.join("train.log")).unwrap());
}

/// Black normal images and defective images with a white square, so a codec
/// that reconstructs zero scores exactly the defective pixels.
fn square_fixture(root: &Path, with_defects: bool) -> Dataset {
    let size = 32;
    let mut records = Vec::new();
    for category in ["plain", "dark"] {
        let mut add = |id: String, split: Split, label: bool| {
            let dir = root.join(category).join(split.as_str());
            fs::create_dir_all(dir.join("images")).unwrap();
            fs::create_dir_all(dir.join("masks")).unwrap();
            let mut rgb = vec![0u8; size * size * 3];
            let mut mask = vec![0u8; size * size];
            if label {
                for y in 10..18 {
                    for x in 12..20 {
                        rgb[(y * size + x) * 3..(y * size + x) * 3 + 3].fill(255);
                        mask[y * size + x] = 255;
                    }
                }
            }
            let image_path = PathBuf::from(category).join(split.as_str()).join("images").join(format!("{id}.ppm"));
            write_ppm(&root.join(&image_path), size, size, &rgb).unwrap();
            let mask_path = label.then(|| {
                let p = PathBuf::from(category).join(split.as_str()).join("masks").join(format!("{id}.pgm"));
                write_pgm(&root.join(&p), size, size, &mask).unwrap();
                p
            });
            records.push(Record {
                id,
                category: category.to_string(),
                split,
                label,
                image_path,
                mask_path,
            });
        };
        for i in 0..3 {
            add(format!("{category}-train-{i}"), Split::Train, false);
            add(format!("{category}-good-{i}"), Split::Test, false);
            if with_defects {
                add(format!("{category}-bad-{i}"), Split::Test, true);
            }
        }
    }
    let dataset = Dataset {
        root: root.to_path_buf(),
        seed: None,
        records,
    };
    dataset.write_manifest().unwrap();
    dataset
}

/// A checkpoint whose codec always reconstructs the zero feature map.
fn zero_output_checkpoint(path: &Path) {
    let config = TrainConfig {
        codec: CodecConfig {
            c_in: 64,
            c_tok: 8,
            n_enc_layers: 1,
            n_dec_layers: 1,
            hidden: 8,
            ..CodecConfig::default()
        },
        ..TrainConfig::desk()
    };
    let mut codec = Codec::<f32>::init(config.codec.clone(), 0).unwrap();
    codec.proj_out = Linear::new(Tensor::zeros(&[8, 64]), Tensor::zeros(&[64])).unwrap();
    let ck = Checkpoint {
        optimizer: AdamState::new(&codec),
        codec,
        config,
        frontend: FrontendKind::desk(1),
        epoch: 0,
        step: 0,
        running_loss: 0.0,
    };
    ck.save(path).unwrap();
}

#[test]
fn eval_with_oracle_checkpoint_reports_perfect_auroc() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    square_fixture(&data, true);
    let ckpt = tmp.path().join("oracle.pfck");
    zero_output_checkpoint(&ckpt);
    let out = tmp.path().join("eval");
    ok(&["eval", "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&out)]);
    let record = fs::read_to_string(out.join("eval_report.txt")).unwrap();
    assert!(record.lines().any(|l| l == "image_auroc=1"), "{record}");
}

#[test]
fn zero_difference_scores_give_black_maps() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    square_fixture(&data, false);
    let ckpt = tmp.path().join("zero.pfck");
    zero_output_checkpoint(&ckpt);
    let out = tmp.path().join("score");
    ok(&["score", "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&out)]);
    let maps: Vec<_> = fs::read_dir(out.join("maps")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(maps.len(), 6);
    for m in maps {
        let (_, _, gray) = read_pgm(&m).unwrap();
        assert!(gray.iter().all(|&g| g == 0), "{}", m.display());
    }
}

#[test]
fn eval_without_checkpoint_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    square_fixture(&data, true);
    let out = pfad(&["eval", "--data", s(&data), "--out", s(&tmp.path().join("e"))]);
    assert!(!out.status.success());
    let out = pfad(&[
        "eval",
        "--data",
        s(&data),
        "--checkpoint",
        s(&tmp.path().join("missing.pfck")),
        "--out",
        s(&tmp.path().join("e")),
    ]);
    assert!(!out.status.success());
}
