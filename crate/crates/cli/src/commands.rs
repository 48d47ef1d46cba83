use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use perturb_lab::config::RunSpec;
use perturb_lab::corpus::{read_tsv, records_to_dataset, tokenize};
use perturb_lab::embed::{load_pretrained, DEFAULT_FALLBACK_SCALE};
use perturb_lab::report::{self, ExperimentReport, ReportMetadata};
use perturb_lab::seed::{derive_seed, Stream};
use perturb_lab::train::{self, EmbeddingInit, PreparedData, Protocol, StrategyRow};
use perturb_lab::{toy, verify, Dataset, LabelMap, Vocabulary};

pub fn resolve(
    config: Option<&Path>,
    overrides: &BTreeMap<String, String>,
    env_seed: Option<&str>,
) -> anyhow::Result<RunSpec> {
    let text = match config {
        Some(p) => Some(fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let spec = RunSpec::resolve(text.as_deref(), overrides, env_seed)?;
    spec.validate_paths()?;
    Ok(spec)
}

pub fn gen_toy(n: usize, vocab_size: usize, seed: u64, out: &Path) -> anyhow::Result<()> {
    toy::write_toy_corpus(n, vocab_size, seed, out)?;
    eprintln!("wrote {n} examples to {}", out.display());
    Ok(())
}

/// Loads the dataset and builds the protocol described by `spec`.
pub fn load(spec: &RunSpec) -> anyhow::Result<(Dataset, Protocol)> {
    let records = read_tsv(&spec.dataset)?;
    let texts: Vec<Vec<String>> = records.iter().map(|r| tokenize(&r.text)).collect();
    let vocab = Vocabulary::build(&texts, spec.min_count);
    let labels = LabelMap::new(spec.labels.iter())?;
    let name = spec
        .dataset
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let dataset = records_to_dataset(&name, &records, &vocab, &labels)?;

    let embeddings = match &spec.embeddings {
        Some(path) => {
            let loaded = load_pretrained(
                path,
                &vocab,
                spec.embed_dim,
                DEFAULT_FALLBACK_SCALE,
                derive_seed(spec.train.seed, Stream::EmbeddingInit, u64::MAX),
            )?;
            eprintln!(
                "loaded vectors for {:.1}% of {} vocabulary entries",
                100.0 * loaded.coverage,
                vocab.len()
            );
            EmbeddingInit::Fixed(loaded.matrix)
        }
        None => EmbeddingInit::Random {
            vocab_size: vocab.len(),
            dim: spec.embed_dim,
            scale: spec.init_scale,
        },
    };
    let protocol = Protocol {
        train: spec.train,
        model: spec.model,
        embeddings,
        freeze_embeddings: spec.freeze_embeddings,
        test_fraction: spec.test_fraction,
        dev: spec.dev,
        grid: spec.grid.clone(),
        runs_per_point: spec.runs_per_point,
        n_runs: spec.n_runs,
        flip_order: spec.flip_order,
    };
    protocol.validate()?;
    Ok((dataset, protocol))
}

/// `<out>` with its extension replaced.
pub fn sibling(out: &Path, ext: &str) -> PathBuf {
    out.with_extension(ext)
}

fn write(path: &Path, content: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, content).with_context(|| format!("writing {}", path.display()))
}

fn metadata(spec: &RunSpec, dataset: &Dataset) -> ReportMetadata {
    ReportMetadata {
        dataset: dataset.name.clone(),
        architecture: spec.model.arch.to_string(),
        config_hash: spec.config_hash(),
        resolved_config: spec.to_config_string(),
    }
}

/// Writes `<out>` (CSV), `<out>.txt` (table) and `<out>.config`. The CSV
/// is rewritten after every strategy; on failure it ends with a `FAILED`
/// row for the strategy that did not finish.
pub fn experiment(spec: &RunSpec) -> anyhow::Result<ExperimentReport> {
    let (dataset, protocol) = load(spec)?;
    write(&sibling(&spec.out, "config"), &spec.to_config_string())?;
    let data = PreparedData::prepare(&dataset, &protocol)?;
    let order = train::normalize_strategies(&spec.strategies);

    let mut rows: Vec<StrategyRow> = Vec::new();
    let mut flush_err = None;
    let result = train::run_experiment_with(&data, &spec.strategies, &protocol, |row| {
        rows.push(row.clone());
        eprintln!("{:<18} mean {:.4}  std {:.4}", row.strategy.name(), row.mean, row.std);
        if let Err(e) = write(&spec.out, &report::experiment_csv(&rows, None)) {
            flush_err.get_or_insert(e);
        }
    });
    if let Err(e) = result {
        let failed = order.get(rows.len()).copied();
        write(&spec.out, &report::experiment_csv(&rows, failed))?;
        return Err(e).context("experiment failed; partial results written");
    }
    if let Some(e) = flush_err {
        return Err(e);
    }

    let report = ExperimentReport {
        rows,
        metadata: metadata(spec, &dataset),
    };
    let table = report::render_table(&report, spec.arrow_threshold);
    write(&spec.out, &report::experiment_csv(&report.rows, None))?;
    write(&sibling(&spec.out, "txt"), &table)?;
    print!("{table}");
    Ok(report)
}

/// Writes the long-format sweep CSV to `<out>` and the resolved
/// configuration to `<out>.config`.
pub fn sweep(spec: &RunSpec) -> anyhow::Result<()> {
    let (dataset, protocol) = load(spec)?;
    write(&sibling(&spec.out, "config"), &spec.to_config_string())?;
    let points = train::fraction_sweep(&dataset, &spec.strategies, &spec.fractions, &protocol)?;
    let csv = report::sweep_csv(&points);
    write(&spec.out, &csv)?;
    for pt in &points {
        for row in &pt.rows {
            println!(
                "fraction {:.4} (n={}) {:<18} mean {:.4}  std {:.4}",
                pt.fraction,
                pt.train_size,
                row.strategy.name(),
                row.mean,
                row.std
            );
        }
    }
    Ok(())
}

/// Prints every check; returns whether all passed.
pub fn verify(instances: usize) -> bool {
    let report = verify::run_checks(&verify::VerifyHooks::default(), instances);
    print!("{}", report.render());
    report.passed()
}
