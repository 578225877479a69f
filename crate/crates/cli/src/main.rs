//! `chorus`: command line front end for the separation and classification
//! pipeline. Every subcommand is deterministic given its config and seed.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use chorus_core::activity::select_windows;
use chorus_core::audio::{read_wav, write_wav, WavFormat};
use chorus_core::classifier::{
    classify, ensemble_logit_average, train_ensemble, ClassifierModel,
};
use chorus_core::combine::{
    evaluate_dataset, write_per_class_csv, write_report_json, CombineMode, Separates,
};
use chorus_core::config::{load_config, save_config, ChorusConfig};
use chorus_core::dataset::{
    load_labeled_clips, load_manifest, load_path_manifest, Taxonomy,
};
use chorus_core::grad::ParameterStore;
use chorus_core::metrics::{EvalMatrix, EvalReport};
use chorus_core::mixit::train_separator;
use chorus_core::separator::SeparatorModel;
use chorus_core::synthbird::build_synth_dataset;

#[derive(Parser)]
#[command(name = "chorus", version, about = "bioacoustic separation and classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a config file populated with every default value.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic labeled dataset under a directory.
    MakeSynth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Find active windows in recordings and write a window manifest.
    DetectActivity {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output CSV: path, start_s, duration_s, peak_energy.
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Train the separator on unlabeled mixtures.
    TrainSeparator {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Clip manifest (labeled or path-only); labels are ignored.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training log (line-delimited records); defaults to
        /// <out>/train_log.jsonl.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Separate one recording into its model sources.
    Separate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to the input's directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train the classifier ensemble on a labeled manifest.
    TrainClassifier {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        taxonomy: PathBuf,
        /// Path-only manifest of noise recordings for augmentation.
        #[arg(long)]
        noise: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Ensemble species probabilities for recordings, one JSON line each.
    Infer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Score a prediction table against a labeled manifest.
    Evaluate {
        /// CSV with header `path,<species codes...>` and one score row per
        /// clip.
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        per_class: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        min_count: usize,
    },
    /// Evaluate a manifest under a combination mode.
    CombineEval {
        #[arg(long)]
        mode: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        separator: Option<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        classifiers: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        taxonomy: PathBuf,
        /// Directory clip paths resolve against; defaults to the manifest's
        /// directory.
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        per_class: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        min_count: usize,
    },
}

fn manifest_root(manifest: &Path, root: Option<&Path>) -> PathBuf {
    root.map(Path::to_path_buf)
        .unwrap_or_else(|| manifest.parent().unwrap_or(Path::new(".")).to_path_buf())
}

/// Clip paths from a labeled manifest or, failing that, a path-only one.
fn load_any_paths(manifest: &Path) -> Result<Vec<PathBuf>> {
    if let Ok(records) = load_manifest(manifest) {
        return Ok(records.into_iter().map(|r| r.path).collect());
    }
    Ok(load_path_manifest(manifest)
        .with_context(|| format!("reading manifest {}", manifest.display()))?)
}

fn load_ensemble(
    cfg: &ChorusConfig,
    taxonomy: &Taxonomy,
    checkpoints: &[PathBuf],
) -> Result<Vec<ClassifierModel>> {
    checkpoints
        .iter()
        .map(|path| {
            ClassifierModel::load(cfg.classifier.clone(), taxonomy, path)
                .with_context(|| format!("loading classifier {}", path.display()))
        })
        .collect()
}

fn run_make_synth(seed: u64, out: &Path, config: Option<&Path>) -> Result<()> {
    let mut cfg = load_config(config)?.synth;
    cfg.seed = seed;
    let paths = build_synth_dataset(&cfg, out)?;
    println!("taxonomy: {}", paths.taxonomy.display());
    println!("train: {}", paths.train_manifest.display());
    println!("eval: {}", paths.eval_manifest.display());
    println!("noise: {}", paths.noise_manifest.display());
    println!("mixture pairs: {}", paths.mom_manifest.display());
    Ok(())
}

fn run_detect_activity(config: Option<&Path>, out: &Path, inputs: &[PathBuf]) -> Result<()> {
    let cfg = load_config(config)?.activity;
    let mut writer = csv::Writer::from_path(out)
        .with_context(|| format!("creating {}", out.display()))?;
    writer.write_record(["path", "start_s", "duration_s", "peak_energy"])?;
    let mut total = 0usize;
    for input in inputs {
        let audio =
            read_wav(input).with_context(|| format!("reading {}", input.display()))?;
        for window in select_windows(&audio, &cfg)? {
            writer.write_record([
                input.to_string_lossy().as_ref(),
                &window.start_s.to_string(),
                &window.duration_s.to_string(),
                &window.peak_energy.to_string(),
            ])?;
            total += 1;
        }
    }
    writer.flush()?;
    println!("{total} windows from {} recordings", inputs.len());
    Ok(())
}

fn run_train_separator(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    log: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let root = manifest_root(data, None);
    let mixtures = load_any_paths(data)?
        .iter()
        .map(|p| read_wav(&root.join(p)).map_err(anyhow::Error::from))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out)?;
    let log_path = log
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join("train_log.jsonl"));
    let mut log_file = std::fs::File::create(&log_path)
        .with_context(|| format!("creating {}", log_path.display()))?;
    let mut model = SeparatorModel::new(cfg.separator.clone(), cfg.separator_train.seed)?;
    let report = train_separator(
        &mut model,
        &mixtures,
        &cfg.separator_train,
        &mut log_file,
        Some(out),
    )?;
    println!(
        "trained {} steps, final loss {:.4}",
        report.steps,
        report.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn run_separate(
    config: Option<&Path>,
    checkpoint: &Path,
    input: &Path,
    out_dir: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let store = ParameterStore::load(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    let model = SeparatorModel::from_store(cfg.separator, store)?;
    let audio = read_wav(input).with_context(|| format!("reading {}", input.display()))?;
    let sources = model.separate(&audio)?;
    let dir = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| input.parent().unwrap_or(Path::new(".")).to_path_buf());
    std::fs::create_dir_all(&dir)?;
    let stem = input
        .file_stem()
        .context("input path has no file name")?
        .to_string_lossy();
    for (k, source) in sources.sources.iter().enumerate() {
        let path = dir.join(format!("{stem}_src{k}.wav"));
        write_wav(&path, source, WavFormat::Float32)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn run_train_classifier(
    config: Option<&Path>,
    data: &Path,
    taxonomy_path: &Path,
    noise: Option<&Path>,
    out: &Path,
    log: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let taxonomy = Taxonomy::load_csv(taxonomy_path)?;
    let root = manifest_root(data, None);
    let records = load_manifest(data)?;
    let clips = load_labeled_clips(&root, &records, &taxonomy)?;
    let noise_pool = match noise {
        Some(manifest) => {
            let noise_root = manifest_root(manifest, None);
            load_path_manifest(manifest)?
                .iter()
                .map(|p| read_wav(&noise_root.join(p)).map_err(anyhow::Error::from))
                .collect::<Result<Vec<_>>>()?
        }
        None => Vec::new(),
    };
    std::fs::create_dir_all(out)?;
    let log_path = log
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join("train_log.jsonl"));
    let mut log_file = std::fs::File::create(&log_path)
        .with_context(|| format!("creating {}", log_path.display()))?;
    let models = train_ensemble(
        &cfg.classifier,
        &clips,
        &noise_pool,
        &taxonomy,
        &cfg.classifier_train,
        &mut log_file,
        Some(out),
    )?;
    println!("trained {} models into {}", models.len(), out.display());
    Ok(())
}

fn run_infer(
    config: Option<&Path>,
    taxonomy_path: &Path,
    checkpoints: &[PathBuf],
    out: Option<&Path>,
    inputs: &[PathBuf],
) -> Result<()> {
    let cfg = load_config(config)?;
    let taxonomy = Taxonomy::load_csv(taxonomy_path)?;
    let models = load_ensemble(&cfg, &taxonomy, checkpoints)?;
    let mut sink: Box<dyn Write> = match out {
        Some(path) => Box::new(std::fs::File::create(path)?),
        None => Box::new(std::io::stdout()),
    };
    for input in inputs {
        let audio =
            read_wav(input).with_context(|| format!("reading {}", input.display()))?;
        let per_model: Vec<_> = models
            .iter()
            .map(|m| classify(m, &audio))
            .collect::<Result<_, _>>()?;
        let species = ensemble_logit_average(
            &per_model.iter().map(|p| p.species.clone()).collect::<Vec<_>>(),
        )?;
        let detection = ensemble_logit_average(
            &per_model.iter().map(|p| vec![p.detection]).collect::<Vec<_>>(),
        )?[0];
        let by_code: BTreeMap<&str, f64> = taxonomy
            .species_codes()
            .iter()
            .map(String::as_str)
            .zip(species)
            .collect();
        let line = serde_json::json!({
            "path": input.to_string_lossy(),
            "detection": detection,
            "species": by_code,
        });
        writeln!(sink, "{line}")?;
    }
    Ok(())
}

fn run_evaluate(
    predictions: &Path,
    labels: &Path,
    taxonomy_path: &Path,
    report_path: &Path,
    per_class: Option<&Path>,
    min_count: usize,
) -> Result<()> {
    let taxonomy = Taxonomy::load_csv(taxonomy_path)?;
    let mut reader = csv::Reader::from_path(predictions)
        .with_context(|| format!("reading {}", predictions.display()))?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() || &headers[0] != "path" {
        bail!("prediction header must start with `path`");
    }
    let mut column_of = vec![None; taxonomy.n_species()];
    for (i, code) in headers.iter().enumerate().skip(1) {
        match taxonomy.species_index(code) {
            Some(s) => column_of[s] = Some(i),
            None => bail!("prediction column {code} is not in the taxonomy"),
        }
    }
    let mut rows: BTreeMap<PathBuf, Vec<f64>> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let mut scores = vec![0.0; taxonomy.n_species()];
        for (s, col) in column_of.iter().enumerate() {
            let col = col.with_context(|| {
                format!("species {} missing from predictions", taxonomy.species_code(s))
            })?;
            scores[s] = record[col]
                .parse::<f64>()
                .with_context(|| format!("bad score {:?}", &record[col]))?;
        }
        rows.insert(PathBuf::from(&record[0]), scores);
    }

    let mut scores_flat = Vec::new();
    let mut labels_flat = Vec::new();
    for clip in load_manifest(labels)? {
        let scores = rows
            .get(&clip.path)
            .with_context(|| format!("no prediction row for {}", clip.path.display()))?;
        let set = clip.label_set(&taxonomy)?;
        let mut truth = vec![false; taxonomy.n_species()];
        for &s in set.foreground().iter().chain(set.background()) {
            truth[s] = true;
        }
        scores_flat.extend_from_slice(scores);
        labels_flat.extend_from_slice(&truth);
    }
    let matrix = EvalMatrix::new(
        scores_flat,
        labels_flat,
        taxonomy.species_codes().to_vec(),
    )?;
    let report = EvalReport::from_matrix(&matrix, min_count)?;
    write_report_json(report_path, &report)?;
    if let Some(path) = per_class {
        write_per_class_csv(path, &report)?;
    }
    print_summary(&report);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_combine_eval(
    mode: &str,
    config: Option<&Path>,
    separator: Option<&Path>,
    classifiers: &[PathBuf],
    data: &Path,
    taxonomy_path: &Path,
    root: Option<&Path>,
    report_path: &Path,
    per_class: Option<&Path>,
    min_count: usize,
) -> Result<()> {
    let mode: CombineMode = mode.parse()?;
    let cfg = load_config(config)?;
    let taxonomy = Taxonomy::load_csv(taxonomy_path)?;
    let models = load_ensemble(&cfg, &taxonomy, classifiers)?;
    let separator_model = separator
        .map(|path| -> Result<SeparatorModel> {
            let store = ParameterStore::load(path)
                .with_context(|| format!("loading {}", path.display()))?;
            Ok(SeparatorModel::from_store(cfg.separator.clone(), store)?)
        })
        .transpose()?;
    let records = load_manifest(data)?;
    let root = manifest_root(data, root);
    let report = evaluate_dataset(
        &root,
        &records,
        &taxonomy,
        separator_model.as_ref().map(|m| m as &dyn Separates),
        &models,
        mode,
        cfg.classifier.window_s,
        min_count,
    )?;
    write_report_json(report_path, &report)?;
    if let Some(path) = per_class {
        write_per_class_csv(path, &report)?;
    }
    println!("mode: {}", mode.as_str());
    print_summary(&report);
    Ok(())
}

fn print_summary(report: &EvalReport) {
    println!(
        "cmap {:.4}  lwlrap {:.4}  d_prime {:.4}  top1 {:.4}",
        report.cmap, report.lwlrap, report.d_prime, report.top1
    );
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::InitConfig { out } => {
            save_config(&out, &ChorusConfig::default())?;
            println!("{}", out.display());
            Ok(())
        }
        Command::MakeSynth { seed, out, config } => {
            run_make_synth(seed, &out, config.as_deref())
        }
        Command::DetectActivity {
            config,
            out,
            inputs,
        } => run_detect_activity(config.as_deref(), &out, &inputs),
        Command::TrainSeparator {
            config,
            data,
            out,
            log,
        } => run_train_separator(config.as_deref(), &data, &out, log.as_deref()),
        Command::Separate {
            config,
            checkpoint,
            input,
            out_dir,
        } => run_separate(config.as_deref(), &checkpoint, &input, out_dir.as_deref()),
        Command::TrainClassifier {
            config,
            data,
            taxonomy,
            noise,
            out,
            log,
        } => run_train_classifier(
            config.as_deref(),
            &data,
            &taxonomy,
            noise.as_deref(),
            &out,
            log.as_deref(),
        ),
        Command::Infer {
            config,
            taxonomy,
            checkpoints,
            out,
            inputs,
        } => run_infer(
            config.as_deref(),
            &taxonomy,
            &checkpoints,
            out.as_deref(),
            &inputs,
        ),
        Command::Evaluate {
            predictions,
            labels,
            taxonomy,
            report,
            per_class,
            min_count,
        } => run_evaluate(
            &predictions,
            &labels,
            &taxonomy,
            &report,
            per_class.as_deref(),
            min_count,
        ),
        Command::CombineEval {
            mode,
            config,
            separator,
            classifiers,
            data,
            taxonomy,
            root,
            report,
            per_class,
            min_count,
        } => run_combine_eval(
            &mode,
            config.as_deref(),
            separator.as_deref(),
            &classifiers,
            &data,
            &taxonomy,
            root.as_deref(),
            &report,
            per_class.as_deref(),
            min_count,
        ),
    }
}
