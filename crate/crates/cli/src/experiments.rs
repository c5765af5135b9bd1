//! Experiment execution: single runs, seed fans, parameter sweeps, and
//! landscape scans. Every run writes into its own directory: the resolved
//! config, a per-eval-point record CSV (flushed as it grows), checkpoints of
//! the raw and EMA models, the dataset dump, and a closing manifest.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use flatmatch_core::data::{augment, make_dataset, save_csv, split_ssl, Batch, SslDataset, Strength};
use flatmatch_core::diagnostics::{landscape_1d, landscape_2d, pseudo_label_accuracy, ProbeData};
use flatmatch_core::model::{save_checkpoint, MlpSpec};
use flatmatch_core::trainers::{
    train_flatmatch_fixed_labels_with, train_flatmatch_with, train_ssl_baseline_with,
    train_supervised_with, ExperimentRecord, TrainConfig, TrainOutput, RECORD_CSV_HEADER,
};
use flatmatch_core::{rng, Error, Result};

use crate::ExperimentKind;

/// Record sink that appends and flushes per eval point, so interrupted runs
/// keep their trail.
struct CsvSink {
    writer: BufWriter<File>,
}

impl CsvSink {
    fn create(path: &Path) -> Result<Self> {
        let file = File::create(path)?;
        let mut writer = BufWriter::new(file);
        writeln!(writer, "{RECORD_CSV_HEADER}")?;
        writer.flush()?;
        Ok(CsvSink { writer })
    }

    fn write(&mut self, record: &ExperimentRecord) -> Result<()> {
        writeln!(self.writer, "{}", record.csv_row())?;
        self.writer.flush()?;
        Ok(())
    }
}

fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

struct ManifestBuilder {
    experiment: String,
    seeds: Vec<u64>,
    config: serde_json::Value,
    started_at: String,
    outputs: Vec<String>,
}

impl ManifestBuilder {
    fn new(exp: &str, seeds: Vec<u64>, cfg: &TrainConfig) -> Self {
        ManifestBuilder {
            experiment: exp.to_string(),
            seeds,
            config: serde_json::to_value(cfg).expect("config serializes"),
            started_at: now_rfc3339(),
            outputs: Vec::new(),
        }
    }

    fn add(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    fn write(&self, dir: &Path, status: &str) -> Result<()> {
        let manifest = serde_json::json!({
            "experiment": self.experiment,
            "seeds": self.seeds,
            "config": self.config,
            "version": env!("CARGO_PKG_VERSION"),
            "started_at": self.started_at,
            "finished_at": now_rfc3339(),
            "status": status,
            "outputs": self.outputs,
        });
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?,
        )?;
        Ok(())
    }
}

fn split_of(cfg: &TrainConfig) -> Result<SslDataset> {
    let full = make_dataset(
        cfg.dataset.kind,
        cfg.dataset.total,
        cfg.dataset.noise,
        cfg.dataset.num_classes,
        rng::derived_seed(cfg.seed, "dataset"),
    )?;
    split_ssl(
        &full,
        cfg.dataset.labels_per_class,
        cfg.dataset.test_fraction,
        rng::derived_seed(cfg.seed, "split"),
    )
}

fn train_by_name(name: &str, cfg: &TrainConfig, sink: &mut CsvSink) -> Result<TrainOutput> {
    let mut cb = |r: &ExperimentRecord| sink.write(r);
    match name {
        "supervised" => train_supervised_with(cfg, &mut cb),
        "ssl_baseline" => train_ssl_baseline_with(cfg, &mut cb),
        "flatmatch" => train_flatmatch_with(cfg, &mut cb),
        "flatmatch_e" => {
            let mut cfg = cfg.clone();
            cfg.flatmatch.efficient = true;
            train_flatmatch_with(&cfg, &mut cb)
        }
        "flatmatch_fixlabel" => train_flatmatch_fixed_labels_with(cfg, &mut cb),
        other => Err(Error::Config(format!("unknown trainer `{other}`"))),
    }
}

/// One training run into `dir`. Returns the final test error.
fn run_training(trainer: &str, cfg: &TrainConfig, dir: &Path) -> Result<f64> {
    fs::create_dir_all(dir)?;
    let mut manifest = ManifestBuilder::new(trainer, vec![cfg.seed], cfg);

    let config_path = dir.join("config.json");
    fs::write(
        &config_path,
        serde_json::to_string_pretty(cfg).map_err(|e| Error::Parse(e.to_string()))?,
    )?;
    manifest.add(&config_path);

    let record_path = dir.join("record.csv");
    let mut sink = CsvSink::create(&record_path)?;
    manifest.add(&record_path);

    let out = match train_by_name(trainer, cfg, &mut sink) {
        Ok(out) => out,
        Err(e) => {
            // records up to the failure are already on disk
            manifest.write(dir, "failed")?;
            return Err(e);
        }
    };

    let raw_stem = dir.join("final_raw");
    save_checkpoint(&out.theta, &raw_stem)?;
    manifest.add(&raw_stem.with_extension("layout"));
    manifest.add(&raw_stem.with_extension("bin"));
    let ema_stem = dir.join("final_ema");
    save_checkpoint(&out.theta_ema, &ema_stem)?;
    manifest.add(&ema_stem.with_extension("layout"));
    manifest.add(&ema_stem.with_extension("bin"));

    let ds = split_of(cfg)?;
    let dataset_path = dir.join("dataset.csv");
    save_csv(&ds, &dataset_path)?;
    manifest.add(&dataset_path);

    let model = MlpSpec::new(ds.dim, cfg.model.hidden_dims.clone(), ds.num_classes)?;
    let summary_path = dir.join("summary.json");
    let pl_acc = pseudo_label_accuracy(&model, &out.theta_ema, &ds)?;
    let summary = serde_json::json!({
        "final_test_err": out.final_test_err(),
        "final_test_acc": out.records.last().map(|r| r.test_acc),
        "pseudo_label_accuracy": pl_acc,
        "fixed_set_size": out.fixed_set.as_ref().map(Vec::len),
    });
    fs::write(&summary_path, serde_json::to_string_pretty(&summary).map_err(|e| Error::Parse(e.to_string()))?)?;
    manifest.add(&summary_path);

    manifest.write(dir, "ok")?;
    Ok(out.final_test_err())
}

/// Landscape experiment: train the configured source, then scan 1-D and 2-D
/// slices of the labeled and unlabeled losses around the trained model.
fn run_landscape(cfg: &TrainConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = ManifestBuilder::new("landscape", vec![cfg.seed], cfg);

    let config_path = dir.join("config.json");
    fs::write(
        &config_path,
        serde_json::to_string_pretty(cfg).map_err(|e| Error::Parse(e.to_string()))?,
    )?;
    manifest.add(&config_path);

    let record_path = dir.join("record.csv");
    let mut sink = CsvSink::create(&record_path)?;
    manifest.add(&record_path);
    let out = train_by_name(&cfg.landscape.source, cfg, &mut sink)?;

    let ds = split_of(cfg)?;
    let model = MlpSpec::new(ds.dim, cfg.model.hidden_dims.clone(), ds.num_classes)?;
    let centroid = ds.centroid();
    let ls = &cfg.landscape;

    // probe batches carry the heavier landscape rotation
    let mut probe_spec = cfg.augment.clone();
    probe_spec.strong_rotation_max_deg = ls.probe_rotation_deg;
    let mut probe_rng = rng::stream(cfg.seed, "landscape_probe");
    let (lx, ly) = ds.labeled();
    let labeled_rows: Vec<Vec<f64>> = lx
        .iter()
        .map(|x| augment(x, &probe_spec, Strength::Strong, &centroid, &mut probe_rng))
        .collect();
    let labeled_xs = Batch::from_rows(&labeled_rows);
    let n_unlabeled = ls.probe_batch.min(ds.n_unlabeled());
    let unlabeled_rows: Vec<Vec<f64>> = ds.unlabeled()[..n_unlabeled]
        .iter()
        .map(|x| augment(x, &probe_spec, Strength::Strong, &centroid, &mut probe_rng))
        .collect();
    let unlabeled_xs = Batch::from_rows(&unlabeled_rows);

    let theta = &out.theta_ema;
    let scans: [(&str, ProbeData); 2] = [
        ("labeled", ProbeData::Labeled { xs: &labeled_xs, ys: ly }),
        ("unlabeled", ProbeData::Unlabeled { xs: &unlabeled_xs, tau: cfg.flatmatch.tau }),
    ];
    for (tag, probe) in &scans {
        let g1 = landscape_1d(&model, theta, probe, ls.dir_seed1, ls.t_range, ls.points, ls.filter_normalized)?;
        let g2 = landscape_2d(
            &model,
            theta,
            probe,
            (ls.dir_seed1, ls.dir_seed2),
            ls.grid_range,
            ls.grid_n,
            ls.filter_normalized,
        )?;
        for (grid, kind) in [(g1, "1d"), (g2, "2d")] {
            let csv = dir.join(format!("landscape_{tag}_{kind}.csv"));
            let json = dir.join(format!("landscape_{tag}_{kind}.json"));
            grid.write_csv(&csv)?;
            grid.write_header_json(&json)?;
            manifest.add(&csv);
            manifest.add(&json);
        }
    }

    let stem = dir.join("final_ema");
    save_checkpoint(&out.theta_ema, &stem)?;
    manifest.add(&stem.with_extension("layout"));
    manifest.add(&stem.with_extension("bin"));
    manifest.write(dir, "ok")?;
    Ok(())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Parameter sweep over the flatmatch trainer: one run per (value, seed),
/// plus a summary CSV of final test error per value.
fn run_sweep(
    cfg: &TrainConfig,
    dir: &Path,
    param: &str,
    values: &[String],
    seeds: &[u64],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = ManifestBuilder::new("sweep", seeds.to_vec(), cfg);

    let mut rows: Vec<(String, u64, f64)> = Vec::new();
    for raw in values {
        let runs: Vec<(u64, f64)> = seeds
            .par_iter()
            .map(|&seed| {
                // route the override through the same dotted-path machinery
                // the command line uses
                let toml_text =
                    toml::to_string(cfg).map_err(|e| Error::Parse(e.to_string()))?;
                let mut tv: toml::Value =
                    toml_text.parse().map_err(|e| Error::Parse(format!("{e}")))?;
                crate::config::apply_override(&mut tv, param, raw)?;
                crate::config::apply_override(&mut tv, "seed", &seed.to_string())?;
                let run_cfg: TrainConfig =
                    tv.try_into().map_err(|e| Error::Config(format!("sweep config: {e}")))?;
                run_cfg.validate()?;
                let sub = dir
                    .join(format!("{}_{}", sanitize(param), sanitize(raw)))
                    .join(format!("seed_{seed}"));
                let err = run_training("flatmatch", &run_cfg, &sub)?;
                Ok((seed, err))
            })
            .collect::<Result<_>>()?;
        for (seed, err) in runs {
            rows.push((raw.clone(), seed, err));
        }
    }

    let per_run = dir.join("sweep_runs.csv");
    let mut text = String::from("param,value,seed,final_test_err\n");
    for (value, seed, err) in &rows {
        text.push_str(&format!("{param},{value},{seed},{err}\n"));
    }
    fs::write(&per_run, text)?;
    manifest.add(&per_run);

    let summary = dir.join("sweep_summary.csv");
    let mut text = String::from("param,value,runs,mean_err,std_err\n");
    for raw in values {
        let errs: Vec<f64> = rows.iter().filter(|r| &r.0 == raw).map(|r| r.2).collect();
        let (mean, std) = mean_std(&errs);
        text.push_str(&format!("{param},{raw},{},{mean},{std}\n", errs.len()));
    }
    fs::write(&summary, text)?;
    manifest.add(&summary);
    manifest.write(dir, "ok")?;
    Ok(())
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_alphanumeric() { c } else { '_' }).collect()
}

pub struct RunArgs<'a> {
    pub exp: ExperimentKind,
    pub cfg: TrainConfig,
    pub out: PathBuf,
    pub seeds: usize,
    pub param: Option<&'a str>,
    pub values: Option<&'a str>,
}

pub fn run(args: RunArgs) -> Result<()> {
    match args.exp {
        ExperimentKind::Sweep => {
            let param = args
                .param
                .ok_or_else(|| Error::Config("sweep requires --param".into()))?;
            let values: Vec<String> = args
                .values
                .ok_or_else(|| Error::Config("sweep requires --values".into()))?
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            if values.is_empty() {
                return Err(Error::Config("sweep got an empty --values list".into()));
            }
            let seeds: Vec<u64> =
                (0..args.seeds.max(1) as u64).map(|i| args.cfg.seed + i).collect();
            run_sweep(&args.cfg, &args.out, param, &values, &seeds)
        }
        ExperimentKind::Landscape => run_landscape(&args.cfg, &args.out),
        _ => {
            let trainer = args.exp.trainer_name();
            if args.seeds <= 1 {
                run_training(trainer, &args.cfg, &args.out).map(|_| ())
            } else {
                // disjoint subdirectory per seed
                let seeds: Vec<u64> = (0..args.seeds as u64).map(|i| args.cfg.seed + i).collect();
                let errs: Vec<(u64, f64)> = seeds
                    .par_iter()
                    .map(|&seed| {
                        let mut cfg = args.cfg.clone();
                        cfg.seed = seed;
                        let sub = args.out.join(format!("seed_{seed}"));
                        run_training(trainer, &cfg, &sub).map(|e| (seed, e))
                    })
                    .collect::<Result<_>>()?;
                fs::create_dir_all(&args.out)?;
                let mut text = String::from("seed,final_test_err\n");
                for (seed, err) in &errs {
                    text.push_str(&format!("{seed},{err}\n"));
                }
                fs::write(args.out.join("seeds_summary.csv"), text)?;
                let mut manifest = ManifestBuilder::new(trainer, seeds, &args.cfg);
                manifest.add(&args.out.join("seeds_summary.csv"));
                manifest.write(&args.out, "ok")?;
                Ok(())
            }
        }
    }
}
