use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use oneshot_core::data::synthetic::export_pgm_tree;
use oneshot_core::data::{generate_synthetic_anodes, read_pgm, write_pgm, SyntheticAnodeSpec};
use oneshot_core::image::Image;

fn oneshot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oneshot"))
        .args(args)
        .env_remove("ONESHOT_DATA_DIR")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_RECIPE: &str = r#"approach = "merged"
seed = 4

[dataset]
kind = "synthetic-anodes"
classes = 8
views = 4

[synthetic]
height = 10
width = 10
stub_radius_min = 0.8
stub_radius_max = 1.2

[model]
conv_filters = [4]
pool_after = []
dense = [8, 2]

[protocol]
kind = "holdout"
classes = 2
folds = 2

[pairs]
train = 40
val = 12
test = 10

[train]
epochs = 2
batch_size = 8
learning_rate = 0.001
"#;

fn write_recipe(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("r.toml");
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn train_writes_run_directory_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let recipe = write_recipe(tmp.path(), SMALL_RECIPE);
    let run1 = tmp.path().join("runs/1");
    let o = oneshot(&["train", "--recipe", s(&recipe), "--out", s(&run1)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["report.txt", "epochs.csv", "model.ckpt", "manifest.txt", "recipe.toml", "test_pairs/pairs.tsv"] {
        assert!(run1.join(f).exists(), "missing {f}");
    }
    assert!(stdout(&o).contains("test_accuracy = "));
    let manifest = std::fs::read_to_string(run1.join("manifest.txt")).unwrap();
    for key in ["version = ", "seed = 4", "fold_seed = ", "dataset_sha256 = ", "recipe_sha256 = "] {
        assert!(manifest.contains(key), "manifest lacks {key}");
    }

    let run2 = tmp.path().join("runs/2");
    assert_eq!(oneshot(&["train", "--recipe", s(&recipe), "--out", s(&run2)]).status.code(), Some(0));
    let csv = |d: &Path| std::fs::read(d.join("epochs.csv")).unwrap();
    assert_eq!(csv(&run1), csv(&run2));

    // the stored recipe reproduces the run on its own
    let run3 = tmp.path().join("runs/3");
    assert_eq!(
        oneshot(&["train", "--recipe", s(&run1.join("recipe.toml")), "--out", s(&run3)]).status.code(),
        Some(0)
    );
    assert_eq!(csv(&run1), csv(&run3));

    let run4 = tmp.path().join("runs/4");
    let o = oneshot(&["train", "--recipe", s(&recipe), "--out", s(&run4), "--seed", "99"]);
    assert_eq!(o.status.code(), Some(0));
    let m4 = std::fs::read_to_string(run4.join("manifest.txt")).unwrap();
    assert!(m4.contains("seed = 99"));
    assert!(std::fs::read_to_string(run4.join("recipe.toml")).unwrap().contains("seed = 99"));
}

#[test]
fn validation_failures_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    // 5 images per class cannot be split into 10 folds
    let faces = tmp.path().join("faces");
    for c in 1..=4 {
        for k in 1..=5 {
            write_pgm(&faces.join(format!("s{c}/{k}.pgm")), &Image::filled(8, 8, 1, (c * k) as f32 / 20.0)).unwrap();
        }
    }
    let recipe = write_recipe(
        tmp.path(),
        &format!(
            "approach = \"siamese-cnn\"\n[dataset]\nkind = \"att-faces\"\npath = \"{}\"\n[protocol]\nkind = \"kfold\"\nk = 10\n",
            faces.display()
        ),
    );
    let o = oneshot(&["train", "--recipe", s(&recipe), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("k = 10 exceeds the smallest class size 5"), "{}", stderr(&o));

    let bad = write_recipe(tmp.path(), "approach = \"bogus\"\n");
    assert_eq!(oneshot(&["train", "--recipe", s(&bad), "--out", "x"]).status.code(), Some(2));
    let bad = write_recipe(tmp.path(), "approach = \"merged\"\n[dataset\n");
    assert_eq!(oneshot(&["crossval", "--recipe", s(&bad), "--out", "x"]).status.code(), Some(2));
    let missing = tmp.path().join("absent.toml");
    assert_eq!(oneshot(&["train", "--recipe", s(&missing), "--out", "x"]).status.code(), Some(2));
    assert_eq!(oneshot(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn data_dir_falls_back_to_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = generate_synthetic_anodes(
        &SyntheticAnodeSpec {
            height: 8,
            width: 8,
            stub_radius_min: 0.8,
            stub_radius_max: 1.0,
            ..Default::default()
        },
        6,
        6,
    )
    .unwrap();
    export_pgm_tree(&ds, &tmp.path().join("data/att_faces")).unwrap();
    let recipe = write_recipe(
        tmp.path(),
        "approach = \"siamese-cnn\"\n[dataset]\nkind = \"att-faces\"\n[model]\nconv_filters = [2]\ndense = [4, 3]\n\
         [protocol]\nkind = \"kfold\"\nk = 3\n[pairs]\ntrain = 12\nval = 6\ntest = 6\n[train]\nepochs = 1\n",
    );
    let out = tmp.path().join("o");
    let o = oneshot(&["train", "--recipe", s(&recipe), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2), "relative path without a data dir");
    let o = Command::new(env!("CARGO_BIN_EXE_oneshot"))
        .args(["train", "--recipe", s(&recipe), "--out", s(&out)])
        .env("ONESHOT_DATA_DIR", tmp.path().join("data"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = oneshot(&["train", "--recipe", s(&recipe), "--out", s(&out), "--data-dir", s(&tmp.path().join("data"))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn eval_scores_every_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let recipe = write_recipe(tmp.path(), &SMALL_RECIPE.replace("\"merged\"", "\"siamese-cnn\""));
    let run = tmp.path().join("run");
    assert_eq!(oneshot(&["train", "--recipe", s(&recipe), "--out", s(&run)]).status.code(), Some(0));
    let ckpt = run.join("model.ckpt");
    let manifest = run.join("test_pairs/pairs.tsv");
    let n = std::fs::read_to_string(&manifest).unwrap().lines().count();

    let o = oneshot(&["eval", "--checkpoint", s(&ckpt), "--pairs", s(&manifest)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), n + 1);
    assert!(text.lines().last().unwrap().starts_with("accuracy = "));
    let acc: f64 = text.lines().last().unwrap().split_whitespace().nth(2).unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let first: Vec<&str> = text.lines().next().unwrap().split('\t').collect();
    assert_eq!(first.len(), 5);

    let o = oneshot(&["eval", "--checkpoint", s(&ckpt), "--pairs", s(&manifest), "--identify"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).lines().last().unwrap().starts_with("top1 = "));

    let empty = tmp.path().join("empty.tsv");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(oneshot(&["eval", "--checkpoint", s(&ckpt), "--pairs", s(&empty)]).status.code(), Some(2));

    // images of another size do not fit the architecture
    let odd = tmp.path().join("odd");
    write_pgm(&odd.join("a.pgm"), &Image::filled(12, 12, 1, 0.5)).unwrap();
    write_pgm(&odd.join("b.pgm"), &Image::filled(12, 12, 1, 0.2)).unwrap();
    std::fs::write(odd.join("pairs.tsv"), "a.pgm\tb.pgm\t0\n").unwrap();
    let o = oneshot(&["eval", "--checkpoint", s(&ckpt), "--pairs", s(&odd.join("pairs.tsv"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    std::fs::write(tmp.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
    let o = oneshot(&["eval", "--checkpoint", s(&tmp.path().join("junk.ckpt")), "--pairs", s(&manifest)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn augment_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    for (i, name) in ["a.pgm", "sub/b.pgm", "sub/c.pgm"].iter().enumerate() {
        let data = (0..49).map(|p| ((p * 7 + i * 31) % 256) as f32 / 255.0).collect();
        write_pgm(&input.join(name), &Image::gray(7, 7, data).unwrap()).unwrap();
    }
    let count = |dir: &Path, ext: &str| {
        fn walk(d: &Path, ext: &str, n: &mut usize) {
            for e in std::fs::read_dir(d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    walk(&p, ext, n)
                } else if p.extension().is_some_and(|x| x == ext) {
                    *n += 1
                }
            }
        }
        let mut n = 0;
        walk(dir, ext, &mut n);
        n
    };

    let out = tmp.path().join("out");
    let o = oneshot(&["augment", "--in", s(&input), "--out", s(&out), "--copies", "4", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(count(&out, "pgm"), 12);
    assert_eq!(count(&out, "txt"), 12);
    let side = std::fs::read_to_string(out.join("sub/b-aug2.txt")).unwrap();
    assert!(side.starts_with("source = sub/b.pgm\n"));

    let again = tmp.path().join("again");
    oneshot(&["augment", "--in", s(&input), "--out", s(&again), "--copies", "4", "--seed", "3"]);
    for name in ["a-aug0.pgm", "sub/b-aug3.pgm", "sub/c-aug1.txt"] {
        assert_eq!(std::fs::read(out.join(name)).unwrap(), std::fs::read(again.join(name)).unwrap());
    }

    let cfg = tmp.path().join("identity.toml");
    std::fs::write(
        &cfg,
        "copies = 2\nrotation = [0.0, 0.0]\nbrightness = [0.0, 0.0]\ncircles = [0, 0]\ncontour_amplitude = 0.0\n",
    )
    .unwrap();
    let ident = tmp.path().join("ident");
    let o = oneshot(&["augment", "--in", s(&input), "--config", s(&cfg), "--out", s(&ident)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for (src, dst) in [("a.pgm", "a-aug0.pgm"), ("sub/c.pgm", "sub/c-aug1.pgm")] {
        assert_eq!(std::fs::read(input.join(src)).unwrap(), std::fs::read(ident.join(dst)).unwrap());
        assert_eq!(read_pgm(&input.join(src)).unwrap(), read_pgm(&ident.join(dst)).unwrap());
    }

    let o = oneshot(&["augment", "--in", s(&tmp.path().join("nowhere")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn compare_merging_prints_both_modes() {
    let tmp = tempfile::tempdir().unwrap();
    let recipe = write_recipe(tmp.path(), SMALL_RECIPE);
    let out = tmp.path().join("cmp");
    let o = oneshot(&["compare-merging", "--recipe", s(&recipe), "--out", s(&out), "--jobs", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    for (row, mode) in rows.iter().zip(["stacked", "h-join"]) {
        let mut f = row.split('\t');
        assert_eq!(f.next(), Some(mode));
        let acc: f64 = f.next().unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
    let m = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    let get = |k: &str| m.lines().find_map(|l| l.strip_prefix(k)).unwrap().to_string();
    assert_eq!(get("seed.stacked = "), get("seed.h-join = "));
    assert_eq!(get("fold_seed.stacked = "), get("fold_seed.h-join = "));

    let siamese = write_recipe(tmp.path(), &SMALL_RECIPE.replace("\"merged\"", "\"siamese-cnn\""));
    let o = oneshot(&["compare-merging", "--recipe", s(&siamese), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_synthetic_and_crossval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("anodes");
    let o = oneshot(&["gen-synthetic", "--out", s(&data), "--classes", "5", "--views", "3", "--seed", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(data.join("s5/3.pgm").exists());
    assert!(!data.join("s6").exists());
    assert!(data.join("manifest.txt").exists());

    let recipe = write_recipe(tmp.path(), SMALL_RECIPE);
    let out = tmp.path().join("cv");
    let o = oneshot(&["crossval", "--recipe", s(&recipe), "--out", s(&out), "--jobs", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary = std::fs::read_to_string(out.join("summary.tsv")).unwrap();
    let accs: Vec<f64> = summary
        .lines()
        .skip(1)
        .take(2)
        .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
        .collect();
    let mean: f64 = summary.lines().find_map(|l| l.strip_prefix("mean\t")).unwrap().parse().unwrap();
    assert!((mean - (accs[0] + accs[1]) / 2.0).abs() < 1e-12);
    assert!(out.join("fold-00/epochs.csv").exists() && out.join("fold-01/model.ckpt").exists());
}

#[test]
fn library_entry_reports_help() {
    let mut out = Vec::new();
    let mut err = Vec::new();
    assert_eq!(oneshot_cli::run(["oneshot", "--help"], &mut out, &mut err), 0);
    let help = String::from_utf8(out).unwrap();
    for cmd in ["train", "eval", "augment", "compare-merging", "gen-synthetic", "crossval"] {
        assert!(help.contains(cmd), "help lacks {cmd}");
    }
}
