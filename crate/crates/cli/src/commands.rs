//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use oneshot_core::augment::augment_pipeline;
use oneshot_core::data::synthetic::export_pgm_tree;
use oneshot_core::data::{generate_synthetic_anodes, read_pgm, write_pgm, Dataset, DatasetMeta, SyntheticAnodeSpec};
use oneshot_core::experiment::{crossvalidate, fold_pairs, fold_split, run_fold, Experiment, FoldOutcome};
use oneshot_core::model::{Approach, Model};
use oneshot_core::pairing::{read_pair_manifest, MergeMode, PairSample};
use oneshot_core::trainer::{model_decision, score_pairs, Decision};
use sha2::{Digest, Sha256};

use crate::recipe::{AugmentSection, DatasetKind, DatasetSection, Recipe};
use crate::{write_file, CliError, Command, Common};

type Res<T> = Result<T, CliError>;

pub fn dispatch(cmd: Command, out: &mut dyn Write) -> Res<()> {
    match cmd {
        Command::Train {
            recipe,
            out: dir,
            fold,
            common,
        } => train(&recipe, &dir, fold, &common, out),
        Command::Eval {
            checkpoint,
            pairs,
            identify,
        } => eval(&checkpoint, &pairs, identify, out),
        Command::Augment {
            input,
            config,
            out: dir,
            copies,
            common,
        } => augment(&input, config.as_deref(), &dir, copies, &common, out),
        Command::CompareMerging { recipe, out: dir, common } => compare_merging(recipe.as_deref(), &dir, &common, out),
        Command::GenSynthetic {
            out: dir,
            classes,
            views,
            config,
            common,
        } => gen_synthetic(&dir, classes, views, config.as_deref(), &common, out),
        Command::Crossval { recipe, out: dir, common } => crossval(&recipe, &dir, &common, out),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) -> Res<()> {
    writeln!(out, "{}", line.as_ref()).map_err(CliError::from)
}

/// Reproducibility record of one run directory.
struct Manifest {
    lines: Vec<(String, String)>,
}

impl Manifest {
    fn new(command: &str) -> Self {
        let mut m = Manifest { lines: Vec::new() };
        m.push("version", env!("CARGO_PKG_VERSION"));
        m.push("command", command);
        m
    }

    fn push(&mut self, k: impl Into<String>, v: impl ToString) {
        self.lines.push((k.into(), v.to_string()));
    }

    fn recipe(&mut self, text: &str, recipe: &Recipe) {
        self.push("recipe", "recipe.toml");
        self.push("recipe_sha256", sha256_hex(text.as_bytes()));
        self.push("seed", recipe.seed);
    }

    fn dataset(&mut self, ds: &Dataset, section: &DatasetSection) {
        let kind = match section.kind {
            DatasetKind::Smallnorb => "smallnorb",
            DatasetKind::AttFaces => "att-faces",
            DatasetKind::SyntheticAnodes => "synthetic-anodes",
        };
        self.push("dataset_kind", kind);
        self.push("dataset_source", &ds.meta().source);
        self.push("dataset_images", ds.len());
        self.push("dataset_classes", ds.classes().len());
        self.push("dataset_sha256", ds.content_hash());
    }

    fn write(&self, dir: &Path) -> Res<()> {
        let mut s = String::new();
        for (k, v) in &self.lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        write_file(&dir.join("manifest.txt"), s)
    }
}

/// Recipe with the seed override applied, and the text to store beside the run.
fn load_recipe(path: &Path, common: &Common) -> Res<(Recipe, String)> {
    let (mut recipe, mut text) = Recipe::load(path)?;
    if let Some(s) = common.seed {
        recipe.seed = s;
        text = format!("# seed overridden on the command line\n{}", with_seed(&text, s));
    }
    Ok((recipe, text))
}

/// Replaces or prepends the top-level `seed` key.
fn with_seed(text: &str, seed: u64) -> String {
    let mut replaced = false;
    let mut in_table = false;
    let mut out = String::new();
    for line in text.lines() {
        let t = line.trim_start();
        if t.starts_with('[') {
            in_table = true;
        }
        if !in_table && !replaced && t.split('=').next().map(str::trim) == Some("seed") {
            let _ = writeln!(out, "seed = {seed}");
            replaced = true;
        } else {
            let _ = writeln!(out, "{line}");
        }
    }
    if replaced {
        out
    } else {
        format!("seed = {seed}\n{out}")
    }
}

fn prepare(recipe: &Recipe, common: &Common) -> Res<(Dataset, Experiment)> {
    let ds = recipe.dataset(common.data_dir().as_deref())?;
    let exp = recipe.experiment();
    exp.validate(&ds)?;
    Ok((ds, exp))
}

fn write_fold(dir: &Path, outcome: &FoldOutcome) -> Res<()> {
    outcome.report.write(dir)?;
    outcome.model.save(&dir.join("model.ckpt"))?;
    Ok(())
}

/// Writes the fold's test pairs with their images as PGM files, when the
/// images are single-channel.
fn export_test_pairs(dir: &Path, ds: &Dataset, pairs: &[PairSample]) -> Res<bool> {
    if ds.image_shape().is_some_and(|s| s[2] != 1) {
        return Ok(false);
    }
    let mut used: Vec<usize> = pairs.iter().flat_map(|p| [p.a, p.b]).collect();
    used.sort_unstable();
    used.dedup();
    let pdir = dir.join("test_pairs");
    for &i in &used {
        write_pgm(&pdir.join(format!("images/{i:06}.pgm")), ds.image(i))?;
    }
    let mut s = String::new();
    for p in pairs {
        let _ = writeln!(s, "images/{:06}.pgm\timages/{:06}.pgm\t{}", p.a, p.b, p.label);
    }
    write_file(&pdir.join("pairs.tsv"), s)?;
    Ok(true)
}

fn train(recipe_path: &Path, dir: &Path, fold: usize, common: &Common, out: &mut dyn Write) -> Res<()> {
    let (recipe, text) = load_recipe(recipe_path, common)?;
    let (ds, exp) = prepare(&recipe, common)?;
    if fold >= exp.protocol.folds() {
        return Err(CliError::Validation(format!(
            "fold {fold} outside the recipe's {} folds",
            exp.protocol.folds()
        )));
    }
    let outcome = run_fold(&exp, &ds, fold)?;
    write_fold(dir, &outcome)?;
    let split = fold_split(&exp, &ds, fold)?;
    let pairs = fold_pairs(&exp, &ds, &split, fold)?;
    let exported = export_test_pairs(dir, &ds, &pairs.test)?;
    write_file(&dir.join("recipe.toml"), &text)?;
    let mut m = Manifest::new("train");
    m.recipe(&text, &recipe);
    m.push("fold", fold);
    m.push("fold_seed", exp.fold_seed(fold));
    m.dataset(&ds, &recipe.dataset);
    m.push("test_pairs", if exported { "test_pairs/pairs.tsv" } else { "" });
    m.write(dir)?;
    let acc = outcome.report.test_accuracy.unwrap_or(f64::NAN);
    say(out, format!("approach = {}", recipe.approach))?;
    say(out, format!("epochs_run = {}", outcome.report.epochs.len()))?;
    say(out, format!("test_accuracy = {acc}"))?;
    say(out, format!("output = {}", dir.display()))
}

fn crossval(recipe_path: &Path, dir: &Path, common: &Common, out: &mut dyn Write) -> Res<()> {
    let (recipe, text) = load_recipe(recipe_path, common)?;
    let (ds, exp) = prepare(&recipe, common)?;
    let cv = crossvalidate(&exp, &ds, common.jobs)?;
    let mut summary = String::from("fold\ttest_accuracy\tepochs_run\n");
    for f in &cv.folds {
        write_fold(&dir.join(format!("fold-{:02}", f.fold)), f)?;
        let _ = writeln!(
            summary,
            "{}\t{}\t{}",
            f.fold,
            f.report.test_accuracy.unwrap_or(f64::NAN),
            f.report.epochs.len()
        );
    }
    let _ = writeln!(summary, "mean\t{}", cv.mean);
    let _ = writeln!(summary, "std\t{}", cv.std);
    write_file(&dir.join("summary.tsv"), &summary)?;
    write_file(&dir.join("recipe.toml"), &text)?;
    let mut m = Manifest::new("crossval");
    m.recipe(&text, &recipe);
    m.push("folds", cv.folds.len());
    for f in &cv.folds {
        m.push(format!("fold_seed.{}", f.fold), exp.fold_seed(f.fold));
    }
    m.dataset(&ds, &recipe.dataset);
    m.write(dir)?;
    out.write_all(summary.as_bytes())?;
    Ok(())
}

/// Loads the images a pair manifest names, deduplicated by path.
fn manifest_dataset(path: &Path) -> Res<(Dataset, Vec<PairSample>, Vec<(String, String)>)> {
    let entries = read_pair_manifest(path)?;
    if entries.is_empty() {
        return Err(CliError::Validation(format!("pair manifest {} is empty", path.display())));
    }
    let mut index: BTreeMap<PathBuf, usize> = BTreeMap::new();
    let mut order: Vec<PathBuf> = Vec::new();
    let mut id = |p: &PathBuf| {
        *index.entry(p.clone()).or_insert_with(|| {
            order.push(p.clone());
            order.len() - 1
        })
    };
    let mut pairs = Vec::new();
    let mut names = Vec::new();
    for e in &entries {
        let (a, b) = (id(&e.a), id(&e.b));
        pairs.push(PairSample { a, b, label: e.label });
        names.push((e.a.display().to_string(), e.b.display().to_string()));
    }
    let images = order.iter().map(|p| read_pgm(p)).collect::<oneshot_core::Result<Vec<_>>>()?;
    let n = images.len();
    let ds = Dataset::new(
        images,
        vec![0; n],
        order.iter().map(|p| p.display().to_string()).collect(),
        DatasetMeta {
            source: path.display().to_string(),
            synthetic: false,
        },
    )?;
    Ok((ds, pairs, names))
}

/// Candidate positions sorted by decreasing similarity; ties keep input order.
pub fn rank_candidates(similarity: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..similarity.len()).collect();
    idx.sort_by(|&i, &j| similarity[j].total_cmp(&similarity[i]));
    idx
}

fn eval(checkpoint: &Path, manifest: &Path, identify: bool, out: &mut dyn Write) -> Res<()> {
    let model = Model::load(checkpoint).map_err(|e| match e {
        oneshot_core::Error::Io { .. } => CliError::Runtime(e.to_string()),
        other => CliError::Validation(other.to_string()),
    })?;
    let (ds, pairs, names) = manifest_dataset(manifest)?;
    model.check_dataset(&ds)?;
    let decision = model_decision(&model)?;
    let scores = score_pairs(&model, &ds, &pairs)?;
    // similarity: larger means more alike
    let similarity: Vec<f64> = match decision {
        Decision::Argmax => scores.clone(),
        Decision::Threshold(_) => scores.iter().map(|d| -d).collect(),
    };
    if identify {
        let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
        for (k, (a, _)) in names.iter().enumerate() {
            match groups.iter_mut().find(|(q, _)| q == a) {
                Some((_, v)) => v.push(k),
                None => groups.push((a.clone(), vec![k])),
            }
        }
        let mut hits = 0usize;
        let mut judged = 0usize;
        for (query, members) in &groups {
            let sims: Vec<f64> = members.iter().map(|&k| similarity[k]).collect();
            let ranked = rank_candidates(&sims);
            let top = members[ranked[0]];
            let true_rank = ranked.iter().position(|&r| pairs[members[r]].label == 1).map(|p| p + 1);
            if let Some(r) = true_rank {
                judged += 1;
                hits += usize::from(r == 1);
            }
            say(
                out,
                format!(
                    "{query}\t{}\t{:.6}\t{}",
                    names[top].1,
                    similarity[top],
                    true_rank.map(|r| r.to_string()).unwrap_or_else(|| "-".into())
                ),
            )?;
        }
        let rate = if judged > 0 { hits as f64 / judged as f64 } else { f64::NAN };
        return say(out, format!("top1 = {rate} ({hits}/{judged} queries)"));
    }
    let mut correct = 0usize;
    for (k, p) in pairs.iter().enumerate() {
        let pred = decision.predict(scores[k]);
        correct += usize::from(pred == p.label);
        let shown = match decision {
            Decision::Argmax => 1.0 / (1.0 + (-scores[k]).exp()),
            Decision::Threshold(_) => scores[k],
        };
        say(out, format!("{}\t{}\t{:.6}\t{pred}\t{}", names[k].0, names[k].1, shown, p.label))?;
    }
    say(
        out,
        format!("accuracy = {} ({correct}/{} pairs)", correct as f64 / pairs.len() as f64, pairs.len()),
    )
}

fn pgm_files(root: &Path) -> Res<Vec<PathBuf>> {
    fn walk(dir: &Path, acc: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let p = entry?.path();
            if p.is_dir() {
                walk(&p, acc)?;
            } else if p.extension().is_some_and(|e| e == "pgm") {
                acc.push(p);
            }
        }
        Ok(())
    }
    let mut acc = Vec::new();
    walk(root, &mut acc).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", root.display())))?;
    acc.sort();
    Ok(acc)
}

fn augment(
    input: &Path,
    config: Option<&Path>,
    dir: &Path,
    copies: Option<usize>,
    common: &Common,
    out: &mut dyn Write,
) -> Res<()> {
    let mut section = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str::<AugmentSection>(&text)
                .map_err(|e| CliError::Validation(format!("augment config: {}", e.message())))?
        }
        None => AugmentSection::default(),
    };
    if let Some(c) = copies {
        section.copies = c;
    }
    if let Some(s) = common.seed {
        section.config.seed = s;
    }
    section.config.validate()?;
    let files = pgm_files(input)?;
    let mut written = 0usize;
    for (n, path) in files.iter().enumerate() {
        let img = read_pgm(path)?;
        let rel = path.strip_prefix(input).unwrap_or(path);
        let stem = rel.with_extension("");
        for k in 0..section.copies {
            let (aug, record) = augment_pipeline(&img, &section.config, (n * section.copies + k) as u64)?;
            let base = dir.join(format!("{}-aug{k}", stem.display()));
            write_pgm(&base.with_extension("pgm"), &aug)?;
            write_file(&base.with_extension("txt"), record.to_sidecar(&rel.display().to_string()))?;
            written += 1;
        }
    }
    say(out, format!("inputs = {}", files.len()))?;
    say(out, format!("outputs = {written}"))
}

fn gen_synthetic(
    dir: &Path,
    classes: usize,
    views: usize,
    config: Option<&Path>,
    common: &Common,
    out: &mut dyn Write,
) -> Res<()> {
    let mut spec = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str::<SyntheticAnodeSpec>(&text)
                .map_err(|e| CliError::Validation(format!("synthetic config: {}", e.message())))?
        }
        None => SyntheticAnodeSpec::default(),
    };
    if let Some(s) = common.seed {
        spec.seed = s;
    }
    if classes < 1 || views < 1 {
        return Err(CliError::Validation("classes and views must be at least 1".into()));
    }
    let ds = generate_synthetic_anodes(&spec, classes, views)?;
    export_pgm_tree(&ds, dir)?;
    let mut m = Manifest::new("gen-synthetic");
    m.push("seed", spec.seed);
    m.push("classes", classes);
    m.push("views", views);
    m.push("dataset_sha256", ds.content_hash());
    m.write(dir)?;
    say(out, format!("images = {}", ds.len()))?;
    say(out, format!("output = {}", dir.display()))
}

/// Recipe used by `compare-merging` without `--recipe`: aligned synthetic
/// anodes under a five-class holdout.
pub const DEFAULT_COMPARE_RECIPE: &str = r#"approach = "merged"
seed = 1

[dataset]
kind = "synthetic-anodes"
classes = 40
views = 4

[protocol]
kind = "holdout"
classes = 5
folds = 1

[pairs]
train = 2000
val = 400
test = 400
"#;

fn compare_merging(recipe_path: Option<&Path>, dir: &Path, common: &Common, out: &mut dyn Write) -> Res<()> {
    let (mut recipe, text) = match recipe_path {
        Some(p) => load_recipe(p, common)?,
        None => {
            let mut r = Recipe::parse(DEFAULT_COMPARE_RECIPE)?;
            let mut text = DEFAULT_COMPARE_RECIPE.to_string();
            if let Some(s) = common.seed {
                r.seed = s;
                text = with_seed(&text, s);
            }
            (r, text)
        }
    };
    if recipe.approach != Approach::Merged {
        return Err(CliError::Validation(format!(
            "compare-merging trains the merged CNN; recipe asks for {}",
            recipe.approach
        )));
    }
    let modes = [MergeMode::Stacked, MergeMode::HJoin];
    let ds = recipe.dataset(common.data_dir().as_deref())?;
    let exps: Vec<Experiment> = modes
        .iter()
        .map(|&mode| {
            recipe.model.merge_mode = mode;
            recipe.experiment()
        })
        .collect();
    for e in &exps {
        e.validate(&ds)?;
    }
    let run = |e: &Experiment| run_fold(e, &ds, 0);
    let results: Vec<oneshot_core::Result<FoldOutcome>> = if common.jobs >= 2 {
        std::thread::scope(|s| {
            let hs: Vec<_> = exps.iter().map(|e| s.spawn(move || run(e))).collect();
            hs.into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(oneshot_core::Error::State("worker panicked".into())))
                })
                .collect()
        })
    } else {
        exps.iter().map(run).collect()
    };
    let mut table = String::from("mode\taccuracy\n");
    let mut m = Manifest::new("compare-merging");
    m.recipe(&text, &recipe);
    for ((mode, e), r) in modes.iter().zip(&exps).zip(results) {
        let outcome = r?;
        write_fold(&dir.join(mode.name()), &outcome)?;
        let acc = outcome.report.test_accuracy.unwrap_or(f64::NAN);
        let _ = writeln!(table, "{}\t{acc}", mode.name());
        m.push(format!("seed.{}", mode.name()), e.seed);
        m.push(format!("fold_seed.{}", mode.name()), e.fold_seed(0));
    }
    m.dataset(&ds, &recipe.dataset);
    write_file(&dir.join("comparison.tsv"), &table)?;
    write_file(&dir.join("recipe.toml"), &text)?;
    m.write(dir)?;
    out.write_all(table.as_bytes())?;
    Ok(())
}
