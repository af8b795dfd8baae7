//! The three experiment commands. Each writes its reports, partitions, a
//! resolved-config dump and a JSON summary under the report directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use feded::data::{gen_synthetic, load_mnist_idx, Split};
use feded::engine::{
    compare_methods, run_ablation_suite, run_lambda_sweep, Trial, VariantResult, DEFAULT_LAMBDA_GRID,
};
use feded::metrics::{write_report, ReportFormat};
use feded::partition::{partition_stats, Partition};
use feded::{Dataset64, Error, Result};
use serde::Serialize;

use crate::config::{DatasetConfig, ExperimentConfig};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Serialization(e.to_string()))
}

pub fn load_data(config: &ExperimentConfig) -> Result<(Dataset64, Dataset64)> {
    match &config.dataset {
        DatasetConfig::Mnist {
            train_images,
            train_labels,
            test_images,
            test_labels,
            subset_fraction,
            subset_seed,
        } => {
            let train = load_mnist_idx(train_images, train_labels, Split::Train)?;
            let test = load_mnist_idx(test_images, test_labels, Split::Test)?;
            let train = match subset_fraction {
                Some(f) => train.stratified_subset(*f, *subset_seed)?,
                None => train,
            };
            Ok((train, test))
        }
        DatasetConfig::Synthetic { .. } => {
            gen_synthetic(&config.synthetic_spec().expect("synthetic dataset section"))
        }
    }
}

/// Data, one partition per seed, and the prepared report directory.
struct Prepared {
    train: Dataset64,
    test: Dataset64,
    partitions: Vec<Partition>,
    dir: PathBuf,
}

impl Prepared {
    fn trials<'a>(&'a self, config: &ExperimentConfig) -> Vec<Trial<'a>> {
        config
            .seeds
            .iter()
            .zip(&self.partitions)
            .map(|(&seed, partition)| Trial { seed, partition })
            .collect()
    }
}

fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    let (train, test) = load_data(config)?;
    let partitions = config
        .seeds
        .iter()
        .map(|&seed| {
            config
                .partition
                .spec(seed)?
                .apply(train.labels(), train.num_classes())
        })
        .collect::<Result<Vec<_>>>()?;
    let dir = config.report.dir.clone();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write_text(&dir.join("resolved_config.json"), &config.to_resolved_json()?)?;
    if config.report.export_partition {
        for (&seed, p) in config.seeds.iter().zip(&partitions) {
            p.write_json(dir.join(format!("partition_seed{seed}.json")))?;
            let stats = partition_stats(p);
            write_text(
                &dir.join(format!("partition_stats_seed{seed}.json")),
                &to_json(&stats)?,
            )?;
        }
    }
    Ok(Prepared {
        train,
        test,
        partitions,
        dir,
    })
}

fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect::<String>()
        .trim_matches('_')
        .to_string()
}

fn write_variant(dir: &Path, prefix: &str, config: &ExperimentConfig, v: &VariantResult) -> Result<()> {
    let format = ReportFormat::from(config.report.format);
    for (&seed, reports) in config.seeds.iter().zip(&v.runs) {
        let path = dir.join(format!("{prefix}_seed{seed}.{}", format.extension()));
        write_report(reports, path, format)?;
    }
    Ok(())
}

fn summary_line(v: &VariantResult) -> String {
    let mut line = format!("{:<28} {} (n={})", v.label, v.summary, v.summary.runs);
    if let Some(r) = v.empty_class_retention {
        write!(line, "  empty-class retention {:.2}", 100.0 * r).expect("writing to a String");
    }
    line
}

/// One method, one report per seed, plus a summary.
pub fn cmd_run(config: &ExperimentConfig) -> Result<String> {
    let prep = prepare(config)?;
    let base = config.fed_config(config.seeds[0]);
    let method = base.method;
    let results = compare_methods(
        &base,
        &[(method.label(), method)],
        &prep.train,
        &prep.test,
        &prep.trials(config),
    )?;
    let v = &results[0];
    write_variant(&prep.dir, "run", config, v)?;
    write_text(&prep.dir.join("summary.json"), &to_json(v)?)?;
    Ok(summary_line(v))
}

/// The four-row study: calibration alone, plus suppression, plus
/// distillation, both.
pub fn cmd_ablate(config: &ExperimentConfig) -> Result<String> {
    let prep = prepare(config)?;
    let base = config.fed_config(config.seeds[0]);
    let rows = run_ablation_suite(&base, &prep.train, &prep.test, &prep.trials(config))?;
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let prefix = format!("ablation{}_{}", i + 1, file_stem(&row.result.label));
        write_variant(&prep.dir, &prefix, config, &row.result)?;
        writeln!(
            out,
            "row {} dis={} logit={}  {}  delta {:+.2}",
            i + 1,
            u8::from(row.distillation),
            u8::from(row.logit_suppression),
            summary_line(&row.result),
            100.0 * row.delta_over_first
        )
        .expect("writing to a String");
    }
    write_text(&prep.dir.join("ablation.json"), &to_json(&rows)?)?;
    Ok(out.trim_end().to_string())
}

pub fn cmd_lambda_sweep(config: &ExperimentConfig, lambdas: Option<&[f64]>) -> Result<String> {
    let lambdas = lambdas.unwrap_or(&DEFAULT_LAMBDA_GRID);
    if lambdas.is_empty() || lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return Err(Error::Config(format!(
            "lambda grid must be non-empty and non-negative, got {lambdas:?}"
        )));
    }
    let prep = prepare(config)?;
    let base = config.fed_config(config.seeds[0]);
    let results = run_lambda_sweep(&base, lambdas, &prep.train, &prep.test, &prep.trials(config))?;
    let mut out = String::new();
    for v in &results {
        write_variant(&prep.dir, &file_stem(&v.label), config, v)?;
        writeln!(out, "{}", summary_line(v)).expect("writing to a String");
    }
    write_text(&prep.dir.join("lambda_sweep.json"), &to_json(&results)?)?;
    Ok(out.trim_end().to_string())
}
