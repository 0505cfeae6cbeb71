use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use clap::Parser;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bimoe::config::RunConfig;
use bimoe::connectivity::wpli_adjacency;
use bimoe::dataio::{synth_dataset, write_interchange, Dimension, SynthConfig, SynthScheme};
use bimoe::explain::{attribute, summary_export};
use bimoe::moe::{BiMoe, ExpertBundle};
use bimoe::pipeline::{preprocess, window_labels, PreprocessConfig, Window};
use bimoe::topology::{build_partition, Region};
use bimoe::train::{accuracy, load_checkpoint, save_checkpoint, Checkpoint, FoldResult, LosoReport};

use crate::manifest::{beside, RunManifest};
use crate::setup::{
    choose_scheme, load_dataset, output_dir, output_file, parse_dimension, prepare, resolve_config, run_folds,
};
use crate::{AdjacencyArgs, Cli, Command, EvalArgs, Exit, ExplainArgs, ReplayArgs, SweepArgs, SynthArgs, TrainArgs};

pub fn dispatch(cmd: Command, argv: &[String]) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a, argv),
        Command::Train(a) => train(a, argv),
        Command::Eval(a) => eval(a, argv),
        Command::Explain(a) => explain(a, argv),
        Command::Sweep(a) => sweep(a, argv),
        Command::Adjacency(a) => adjacency(a, argv),
        Command::Replay(a) => replay(a),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth(a: SynthArgs, argv: &[String]) -> Result<()> {
    output_file(&a.out, a.force)?;
    let scheme: SynthScheme = a.scheme.parse().map_err(|e: String| anyhow!(e)).context(Exit::Usage)?;
    let cfg = SynthConfig {
        seed: a.seed,
        subjects: a.subjects,
        trials_per_subject: a.trials,
        scheme,
        separability: a.separability,
        ..SynthConfig::default()
    };
    let ds = synth_dataset(&cfg).context(Exit::Config)?;
    write_interchange(&a.out, &ds).with_context(|| format!("writing {}", a.out.display()))?;
    let mut m = RunManifest::new("synth", argv, &[])?;
    m.seed = Some(a.seed);
    m.outputs = vec![a.out.clone()];
    m.write(&beside(&a.out))?;
    println!(
        "wrote {} trials from {} subjects to {}",
        ds.trials.len(),
        ds.subjects().len(),
        a.out.display()
    );
    Ok(())
}

fn accuracy_table(report: &LosoReport) -> String {
    let mut s = String::from("subject,fold,train_acc,test_acc,best_epoch,epochs_run\n");
    for f in &report.folds {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            f.spec.test_subject, f.spec.fold, f.train_acc, f.test_acc, f.best_epoch, f.epochs_run
        );
    }
    let _ = writeln!(s, "mean,,{},{},,", report.mean_train_acc, report.mean_test_acc);
    s
}

fn train(a: TrainArgs, argv: &[String]) -> Result<()> {
    let m = &a.model;
    let cfg = resolve_config(m)?;
    let dim = parse_dimension(&m.dimension)?;
    let ds = load_dataset(&m.data)?;
    let (scheme, scheme_files) = choose_scheme(&ds, m.scheme.as_deref(), m.partition.as_deref())?;
    let prep = prepare(&ds, &cfg, dim, &scheme)?;
    output_dir(&a.out, a.force)?;

    let mut inputs: Vec<&Path> = vec![&m.data];
    inputs.extend(m.config.as_deref());
    inputs.extend(scheme_files.iter().map(PathBuf::as_path));
    let mut manifest = RunManifest::new("train", argv, &inputs)?.with_config(&cfg);
    manifest.expert_count = Some(prep.experts.len());
    manifest.experts = Some(prep.experts.clone());

    let folds = run_folds(&prep, &cfg, m.jobs, |tf| {
        let spec = &tf.result.spec;
        let ckpt = Checkpoint::capture(
            &tf.model,
            &tf.store,
            &prep.partition,
            &prep.layout,
            &cfg.preprocess,
            dim.name(),
            Some(spec.clone()),
        );
        save_checkpoint(&a.out.join(format!("fold{}.ckpt", spec.fold)), &ckpt)?;
        write_text(
            &a.out.join(format!("metrics_fold{}.jsonl", spec.fold)),
            &jsonl(&tf.metrics)?,
        )?;
        Ok(())
    })?;

    let mut all_metrics = String::new();
    let mut outputs = Vec::new();
    let mut results: Vec<FoldResult> = Vec::new();
    for (r, metrics) in folds {
        all_metrics.push_str(&jsonl(&metrics)?);
        outputs.push(a.out.join(format!("fold{}.ckpt", r.spec.fold)));
        outputs.push(a.out.join(format!("metrics_fold{}.jsonl", r.spec.fold)));
        results.push(r);
    }
    let report = LosoReport::from_folds(results);
    let table = accuracy_table(&report);
    write_text(&a.out.join("metrics.jsonl"), &all_metrics)?;
    write_text(&a.out.join("accuracy.csv"), &table)?;
    write_text(&a.out.join("config.txt"), &cfg.to_text())?;
    outputs.extend(["metrics.jsonl", "accuracy.csv", "config.txt"].map(|f| a.out.join(f)));
    manifest.outputs = outputs;
    manifest.write(&a.out.join("manifest.json"))?;

    println!("{dim}: {} experts, {} folds", prep.experts.len(), report.folds.len());
    print!("{table}");
    println!("{dim} ACC {:.4}", report.mean_test_acc);
    Ok(())
}

fn jsonl<T: serde::Serialize>(rows: &[T]) -> Result<String> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

/// A checkpoint restored against a dataset it is about to score.
struct Loaded {
    ckpt: Checkpoint,
    model: BiMoe,
    store: bimoe::diff::ParamStore,
    dim: Dimension,
}

fn load_model(path: &Path, ds: &bimoe::dataio::Dataset) -> Result<Loaded> {
    let ckpt = load_checkpoint(path)
        .with_context(|| format!("reading {}", path.display()))
        .context(Exit::Data)?;
    let layout = ds.layout(ckpt.preprocess.sample_rate).context(Exit::Data)?;
    ckpt.check_layout(&layout).context(Exit::Data)?;
    let (_, model, store) = ckpt.restore().context(Exit::Data)?;
    let dim = parse_dimension(&ckpt.dimension).context(Exit::Data)?;
    crate::setup::require_dimension(ds, dim)?;
    Ok(Loaded {
        ckpt,
        model,
        store,
        dim,
    })
}

/// Preprocessed windows, computed once per distinct preprocessing config.
struct WindowCache(Vec<(PreprocessConfig, Vec<Window>)>);

impl WindowCache {
    fn get(&mut self, ds: &bimoe::dataio::Dataset, cfg: &PreprocessConfig) -> Result<&[Window]> {
        let i = match self.0.iter().position(|(c, _)| c == cfg) {
            Some(i) => i,
            None => {
                self.0.push((cfg.clone(), preprocess(ds, cfg).context(Exit::Data)?));
                self.0.len() - 1
            }
        };
        Ok(&self.0[i].1)
    }
}

fn select_split<'a>(windows: &'a [Window], ckpt: &Checkpoint, split: &str) -> Result<Vec<&'a Window>> {
    let keep = |w: &Window| match (&ckpt.fold, split) {
        (_, "all") | (None, _) => true,
        (Some(f), "test") => w.subject == f.test_subject,
        (Some(f), _) => f.train_subjects.contains(&w.subject),
    };
    Ok(windows.iter().filter(|w| keep(w)).collect())
}

fn bundles_for(l: &Loaded, windows: &[&Window]) -> Result<Vec<ExpertBundle>> {
    let samples = windows
        .iter()
        .map(|w| l.model.prepare(&w.data))
        .collect::<Result<Vec<_>, _>>()
        .context(Exit::Data)?;
    Ok(l.model.infer(&l.store, &samples)?)
}

fn eval(a: EvalArgs, argv: &[String]) -> Result<()> {
    if !["test", "train", "all"].contains(&a.split.as_str()) {
        return Err(anyhow!("--split must be test, train or all")).context(Exit::Usage);
    }
    if let Some(out) = &a.out {
        output_file(out, a.force)?;
    }
    let ds = load_dataset(&a.data)?;
    let mut cache = WindowCache(Vec::new());
    let mut table = String::from("checkpoint,dimension,split,windows,acc\n");
    let mut per_dim: Vec<(Dimension, Vec<f64>)> = Vec::new();
    for path in &a.checkpoint {
        let l = load_model(path, &ds)?;
        let windows = cache.get(&ds, &l.ckpt.preprocess)?;
        let chosen = select_split(windows, &l.ckpt, &a.split)?;
        if chosen.is_empty() {
            return Err(anyhow!("no `{}` windows for {}", a.split, path.display())).context(Exit::Data);
        }
        let owned: Vec<Window> = chosen.iter().map(|w| (*w).clone()).collect();
        let labels: Vec<usize> = window_labels(&ds, &owned, l.dim)
            .context(Exit::Data)?
            .into_iter()
            .map(|c| c.index())
            .collect();
        let preds: Vec<usize> = bundles_for(&l, &chosen)?.iter().map(|b| b.predicted_class()).collect();
        let acc = accuracy(&preds, &labels)?;
        let _ = writeln!(
            table,
            "{},{},{},{},{}",
            path.display(),
            l.dim,
            a.split,
            chosen.len(),
            acc
        );
        match per_dim.iter_mut().find(|(d, _)| *d == l.dim) {
            Some((_, v)) => v.push(acc),
            None => per_dim.push((l.dim, vec![acc])),
        }
    }
    print!("{table}");
    for (dim, accs) in &per_dim {
        println!(
            "{dim} ACC {:.4} ({} checkpoint{})",
            accs.iter().sum::<f64>() / accs.len() as f64,
            accs.len(),
            if accs.len() == 1 { "" } else { "s" }
        );
    }
    if let Some(out) = &a.out {
        write_text(out, &table)?;
        let mut inputs: Vec<&Path> = vec![&a.data];
        inputs.extend(a.checkpoint.iter().map(PathBuf::as_path));
        let mut m = RunManifest::new("eval", argv, &inputs)?;
        m.outputs = vec![out.clone()];
        m.write(&beside(out))?;
    }
    Ok(())
}

/// Up to `n` windows drawn without replacement, in dataset order.
fn draw<'a>(pool: Vec<&'a Window>, n: usize, rng: &mut ChaCha8Rng) -> Vec<&'a Window> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(rng);
    idx.truncate(n);
    idx.sort_unstable();
    idx.into_iter().map(|i| pool[i]).collect()
}

fn explain(a: ExplainArgs, argv: &[String]) -> Result<()> {
    if a.background == 0 || a.test == 0 {
        return Err(anyhow!("--background and --test must be positive")).context(Exit::Usage);
    }
    output_file(&a.out, a.force)?;
    let ds = load_dataset(&a.data)?;
    let l = load_model(&a.checkpoint, &ds)?;
    let windows = preprocess(&ds, &l.ckpt.preprocess).context(Exit::Data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let (test_pool, bg_pool) = match &l.ckpt.fold {
        Some(_) => (
            select_split(&windows, &l.ckpt, "test")?,
            select_split(&windows, &l.ckpt, "train")?,
        ),
        None => (windows.iter().collect(), windows.iter().collect()),
    };
    let background = draw(bg_pool, a.background, &mut rng);
    let test = draw(test_pool, a.test, &mut rng);
    if background.len() < a.background || test.len() < a.test {
        eprintln!(
            "note: only {} background and {} test windows available",
            background.len(),
            test.len()
        );
    }
    let bg = bundles_for(&l, &background)?;
    let tb = bundles_for(&l, &test)?;
    let report = attribute(&l.model, &l.store, &tb, &bg, a.winsor).context(Exit::Usage)?;
    let file = fs::File::create(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    summary_export(&report, std::io::BufWriter::new(file))?;

    let mut m = RunManifest::new("explain", argv, &[&a.data, &a.checkpoint])?;
    m.seed = Some(a.seed);
    m.expert_count = Some(report.experts.len());
    m.experts = Some(report.experts.clone());
    m.outputs = vec![a.out.clone()];
    m.write(&beside(&a.out))?;

    println!(
        "{} test × {} background windows, {} experts",
        report.samples.len(),
        report.background_size,
        report.experts.len()
    );
    let mut ranked = report.summary.clone();
    ranked.sort_by_key(|s| s.rank);
    for s in ranked {
        println!("{:>2}. {:<12} mean |phi| {:.6}", s.rank, s.expert, s.mean_abs);
    }
    Ok(())
}

fn sweep(a: SweepArgs, argv: &[String]) -> Result<()> {
    let m = &a.model;
    let base = resolve_config(m)?;
    let dim = parse_dimension(&m.dimension)?;
    let ds = load_dataset(&m.data)?;
    let (scheme, scheme_files) = choose_scheme(&ds, m.scheme.as_deref(), m.partition.as_deref())?;
    let prep = prepare(&ds, &base, dim, &scheme)?;
    output_dir(&a.out, a.force)?;

    let or_base = |v: &[f64], b: f64| if v.is_empty() { vec![b] } else { v.to_vec() };
    let heads = if a.heads.is_empty() {
        vec![base.model.gldnet.attention_heads]
    } else {
        a.heads.clone()
    };
    let xi1 = or_base(&a.xi1, base.loss.xi1);
    let xi2 = or_base(&a.xi2, base.loss.xi2);

    let mut table = String::from("heads,xi1,xi2,mean_train_acc,mean_test_acc\n");
    for &h in &heads {
        for &x1 in &xi1 {
            for &x2 in &xi2 {
                let mut cfg: RunConfig = base.clone();
                cfg.model.gldnet.attention_heads = h;
                cfg.loss.xi1 = x1;
                cfg.loss.xi2 = x2;
                cfg.validate()
                    .with_context(|| format!("heads={h} xi1={x1} xi2={x2}"))
                    .context(Exit::Config)?;
                let folds = run_folds(&prep, &cfg, m.jobs, |_| Ok(()))?;
                let report = LosoReport::from_folds(folds.into_iter().map(|(r, _)| r).collect());
                let row = format!("{h},{x1},{x2},{},{}\n", report.mean_train_acc, report.mean_test_acc);
                print!("{row}");
                table.push_str(&row);
            }
        }
    }
    let out = a.out.join("sweep.csv");
    write_text(&out, &table)?;
    let mut inputs: Vec<&Path> = vec![&m.data];
    inputs.extend(m.config.as_deref());
    inputs.extend(scheme_files.iter().map(PathBuf::as_path));
    let mut manifest = RunManifest::new("sweep", argv, &inputs)?.with_config(&base);
    manifest.expert_count = Some(prep.experts.len());
    manifest.experts = Some(prep.experts.clone());
    manifest.outputs = vec![out];
    manifest.write(&a.out.join("manifest.json"))
}

fn adjacency(a: AdjacencyArgs, argv: &[String]) -> Result<()> {
    output_file(&a.out, a.force)?;
    let mut cfg = RunConfig::default();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .context(Exit::Config)?;
        cfg = RunConfig::from_text(&text).context(Exit::Config)?;
    }
    let ds = load_dataset(&a.data)?;
    let windows = preprocess(&ds, &cfg.preprocess).context(Exit::Data)?;
    let w = windows
        .iter()
        .find(|w| w.subject == a.subject && w.trial == a.trial && w.index == a.window)
        .ok_or_else(|| anyhow!("no window {} in subject {} trial {}", a.window, a.subject, a.trial))
        .context(Exit::Usage)?;
    let layout = ds.layout(cfg.preprocess.sample_rate).context(Exit::Data)?;
    let (rows, mut inputs) = match &a.region {
        Some(name) => {
            let region: Region = name.parse().context(Exit::Usage)?;
            let (scheme, files) = choose_scheme(&ds, a.scheme.as_deref(), a.partition.as_deref())?;
            let partition = build_partition(&layout, &scheme).context(Exit::Config)?;
            let idx = partition
                .get(region)
                .ok_or_else(|| anyhow!("region `{region}` is not in the partition"))
                .context(Exit::Config)?
                .to_vec();
            (idx, files)
        }
        None => ((0..layout.eeg_count()).collect(), Vec::new()),
    };
    let window: Vec<Vec<f64>> = rows.iter().map(|&i| w.data[i].clone()).collect();
    let adj = wpli_adjacency(&window).context(Exit::Data)?;
    let names: Vec<&str> = rows.iter().map(|&i| layout.channels[i].name.as_str()).collect();
    write_text(&a.out, &adj.to_csv())?;

    inputs.insert(0, a.data.clone());
    inputs.extend(a.config.clone());
    let paths: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let mut m = RunManifest::new("adjacency", argv, &paths)?;
    m.outputs = vec![a.out.clone()];
    m.write(&beside(&a.out))?;
    println!(
        "{}×{} wPLI over [{}], mean off-diagonal {:.6}",
        names.len(),
        names.len(),
        names.join(","),
        adj.mean_connectivity()
    );
    Ok(())
}

/// Swaps the recorded `--out` for `out` and re-parses the command line.
fn replay(a: ReplayArgs) -> Result<()> {
    let manifest = RunManifest::read(&a.manifest)?;
    manifest.verify_inputs()?;
    let mut args = Vec::with_capacity(manifest.args.len() + 1);
    let mut it = manifest.args.iter();
    let mut replaced = false;
    while let Some(arg) = it.next() {
        if arg == "--out" {
            it.next();
        } else if !arg.starts_with("--out=") {
            if arg != "--force" {
                args.push(arg.clone());
            }
            continue;
        }
        args.push("--out".into());
        args.push(a.out.display().to_string());
        replaced = true;
    }
    if !replaced {
        return Err(anyhow!("the manifest's command line has no --out")).context(Exit::Usage);
    }
    if a.force {
        args.push("--force".into());
    }
    let cli = Cli::try_parse_from(std::iter::once("bimoe".to_string()).chain(args.iter().cloned()))
        .map_err(|e| anyhow!("{e}"))
        .context(Exit::Usage)?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(anyhow!("a replay manifest cannot be replayed")).context(Exit::Usage);
    }
    dispatch(cli.command, &args)
}
