//! Shared plumbing: config resolution, data loading and fold scheduling.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, Context, Result};

use bimoe::config::RunConfig;
use bimoe::dataio::{read_interchange, Dataset, Dimension};
use bimoe::diff::ParamStore;
use bimoe::moe::{BiMoe, ModalityMode};
use bimoe::pipeline::{preprocess, window_labels};
use bimoe::topology::{build_partition, ChannelLayout, RegionPartition, Scheme};
use bimoe::train::{make_loso_folds, prepare_examples, run_fold, EpochMetrics, Example, FoldResult, TrainedFold};

use crate::{Exit, ModelArgs};

/// Defaults, then the config file, then `--set` pairs, then dedicated flags.
pub fn resolve_config(args: &ModelArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .context(Exit::Config)?;
        cfg.apply_text(&text)
            .with_context(|| path.display().to_string())
            .context(Exit::Config)?;
    }
    for pair in &args.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{pair}`"))
            .context(Exit::Usage)?;
        cfg.set(k.trim(), v).context(Exit::Config)?;
    }
    if let Some(mode) = &args.mode {
        cfg.model.mode = mode
            .parse::<ModalityMode>()
            .map_err(|e| anyhow!(e))
            .context(Exit::Usage)?;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.train.max_epochs = epochs;
    }
    cfg.validate().context(Exit::Config)?;
    Ok(cfg)
}

pub fn parse_dimension(s: &str) -> Result<Dimension> {
    s.parse::<Dimension>().map_err(|e| anyhow!(e)).context(Exit::Usage)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_interchange(path)
        .with_context(|| format!("reading {}", path.display()))
        .context(Exit::Data)
}

/// The region scheme and the files it was read from.
pub fn choose_scheme(ds: &Dataset, scheme: Option<&str>, partition: Option<&Path>) -> Result<(Scheme, Vec<PathBuf>)> {
    if let Some(path) = partition {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .context(Exit::Config)?;
        return Ok((Scheme::Custom(text), vec![path.to_path_buf()]));
    }
    let name = match scheme {
        Some(s) => s,
        None => match ds.meta.dataset {
            bimoe::dataio::DatasetKind::Deap => "deap32",
            bimoe::dataio::DatasetKind::Dreamer => "dreamer14",
        },
    };
    Ok((name.parse::<Scheme>().context(Exit::Usage)?, Vec::new()))
}

pub fn require_dimension(ds: &Dataset, dim: Dimension) -> Result<()> {
    if !ds.meta.label_names.iter().any(|n| n == dim.name()) {
        return Err(anyhow!(
            "the dataset has no `{dim}` ratings (available: {})",
            ds.meta.label_names.join(", ")
        ))
        .context(Exit::Config);
    }
    Ok(())
}

/// Windows, labels and model inputs for one dataset and dimension.
pub struct Prepared {
    pub layout: ChannelLayout,
    pub partition: RegionPartition,
    pub time: usize,
    pub experts: Vec<String>,
    pub examples: Vec<Example>,
}

pub fn prepare(ds: &Dataset, cfg: &RunConfig, dim: Dimension, scheme: &Scheme) -> Result<Prepared> {
    require_dimension(ds, dim)?;
    let p = &cfg.preprocess;
    let layout = ds.layout(p.sample_rate).context(Exit::Data)?;
    let partition = build_partition(&layout, scheme).context(Exit::Config)?;
    let windows = preprocess(ds, p).context(Exit::Data)?;
    let labels: Vec<usize> = window_labels(ds, &windows, dim)
        .context(Exit::Data)?
        .into_iter()
        .map(|c| c.index())
        .collect();
    let time = (p.window_seconds * p.sample_rate).round() as usize;
    let mut scratch = ParamStore::new();
    let model = BiMoe::new(&partition, time, &cfg.model, &mut scratch, 0).context(Exit::Config)?;
    let examples = prepare_examples(&model, &windows, &labels).context(Exit::Data)?;
    Ok(Prepared {
        layout,
        partition,
        time,
        experts: model.expert_names().iter().map(|s| s.to_string()).collect(),
        examples,
    })
}

/// Every LOSO fold, up to `jobs` at a time. `on_fold` runs on the worker
/// that trained the fold; results come back in fold order.
pub fn run_folds<F>(
    prep: &Prepared,
    cfg: &RunConfig,
    jobs: usize,
    on_fold: F,
) -> Result<Vec<(FoldResult, Vec<EpochMetrics>)>>
where
    F: Fn(&TrainedFold) -> Result<()> + Sync,
{
    let subjects: Vec<u32> = prep.examples.iter().map(|e| e.subject).collect();
    let folds = make_loso_folds(&subjects).context(Exit::Data)?;
    let slots: Mutex<Vec<Option<Result<(FoldResult, Vec<EpochMetrics>)>>>> =
        Mutex::new((0..folds.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(spec) = folds.get(i) else { break };
        let mut metrics = Vec::new();
        let out = run_fold(
            spec,
            &prep.partition,
            prep.time,
            &cfg.model,
            &prep.examples,
            &cfg.train,
            &cfg.loss,
            |m| metrics.push(m.clone()),
        )
        .map_err(anyhow::Error::from)
        .and_then(|trained| {
            on_fold(&trained)?;
            Ok((trained.result, metrics))
        });
        slots.lock().expect("no poisoned workers")[i] = Some(out);
    };
    let workers = jobs.clamp(1, folds.len());
    if workers == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(work);
            }
        });
    }
    slots
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|r| r.expect("every fold ran"))
        .collect()
}

/// Refuses to reuse a non-empty directory unless forced.
pub fn output_dir(path: &Path, force: bool) -> Result<()> {
    if path.exists() {
        let non_empty = fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(true);
        if non_empty && !force {
            return Err(anyhow!("{} already exists; pass --force to overwrite", path.display())).context(Exit::Usage);
        }
    }
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

pub fn output_file(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(anyhow!("{} already exists; pass --force to overwrite", path.display())).context(Exit::Usage);
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}
