//! The five subcommands. Each reads the resolved config, writes its outputs
//! under `config.out`, and finishes with a manifest.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scvi_core::data::{
    load_csv, load_metadata, load_mtx, save_csv, save_metadata, select_variable_genes, simulate, split,
    CovariateEncoder, Covariates, ExpressionMatrix, QcTable,
};
use scvi_core::diffexpr::{de_test, CellGroup};
use scvi_core::evaluation::{
    calibrate_lambda, corrupt, factor_analysis_fit, global_mean_baseline, heldout_log_likelihoods, impute,
    imputation_errors, qc_correlation, silhouette, BenchmarkReport, CorruptionConfig,
};
use scvi_core::model::{Checkpoint, ScviModel};
use scvi_core::training::{train_with_progress, TrainOutput};
use scvi_core::Tensor;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::{OutDir, Stamp};

/// EM stops once the per-cell log-likelihood gain falls below this.
const FA_TOL: f64 = 1e-6;

pub struct Ctx {
    pub config: RunConfig,
    pub quiet: bool,
}

impl Ctx {
    fn progress(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn rel(path: &Path) -> String {
    path.display().to_string()
}

/// Prepends the stamp comment to a file written by the core library.
fn stamp_file(path: &Path, stamp: &Stamp) -> Result<(), CliError> {
    let body = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", rel(path))))?;
    let mut bytes = format!("# seed={} config_hash={}\n", stamp.seed, stamp.config_hash).into_bytes();
    bytes.extend_from_slice(&body);
    fs::write(path, bytes).map_err(|e| CliError::Data(format!("{}: {e}", rel(path))))
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} {} does not exist", rel(path))))
    }
}

/// Counts plus metadata, optionally reduced to the most variable genes.
fn load_data(cfg: &RunConfig) -> Result<ExpressionMatrix, CliError> {
    let counts = cfg.counts_path();
    require_file(&counts, "counts file")?;
    let is_mtx = counts.extension().is_some_and(|e| e.eq_ignore_ascii_case("mtx"));
    let mut data = if is_mtx {
        let (genes, cells) = match (&cfg.data.genes, &cfg.data.cells) {
            (Some(g), Some(c)) => (g, c),
            _ => {
                return Err(CliError::Config(
                    "MatrixMarket input needs data.genes and data.cells".into(),
                ))
            }
        };
        require_file(genes, "gene list")?;
        require_file(cells, "cell list")?;
        load_mtx(&counts, genes, cells)?
    } else {
        load_csv(&counts)?
    };
    if let Some(meta) = cfg.metadata_path() {
        require_file(&meta, "metadata file")?;
        data = load_metadata(data, &meta)?;
    }
    if let Some(k) = cfg.data.n_variable_genes {
        data = select_variable_genes(&data, k)?;
    }
    Ok(data)
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Checkpoint, CliError> {
    let path = cfg.checkpoint_path();
    require_file(&path, "checkpoint")?;
    Ok(Checkpoint::load(&path)?)
}

/// Restricts `data` to the checkpoint's genes, in checkpoint order.
fn align_genes(data: ExpressionMatrix, ckpt: &Checkpoint) -> Result<ExpressionMatrix, CliError> {
    let n_genes = ckpt.model.config.n_genes;
    let genes: Option<Vec<String>> = ckpt
        .metadata
        .get("genes")
        .and_then(|v| serde_json::from_value(v.clone()).ok());
    let data = match genes {
        Some(genes) if genes.as_slice() != data.gene_names() => {
            let index: HashMap<&str, usize> = data
                .gene_names()
                .iter()
                .enumerate()
                .map(|(i, g)| (g.as_str(), i))
                .collect();
            let cols = genes
                .iter()
                .map(|g| {
                    index
                        .get(g.as_str())
                        .copied()
                        .ok_or_else(|| CliError::Data(format!("gene '{g}' from the checkpoint is missing from the data")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            data.subset_genes(&cols)?
        }
        _ => data,
    };
    if data.n_genes() != n_genes {
        return Err(CliError::Data(format!(
            "checkpoint expects {n_genes} genes, data has {}",
            data.n_genes()
        )));
    }
    Ok(data)
}

fn encode(enc: Option<&CovariateEncoder>, data: &ExpressionMatrix) -> Result<Option<Covariates>, CliError> {
    match enc {
        Some(e) if !e.is_empty() => Ok(Some(e.encode(data)?)),
        _ => Ok(None),
    }
}

fn report(metric: &str, value: f64, dataset: &str, stamp: &Stamp) -> BenchmarkReport {
    BenchmarkReport {
        metric: metric.to_string(),
        value,
        dataset: dataset.to_string(),
        config_hash: stamp.config_hash.clone(),
        seed: stamp.seed,
    }
}

fn dataset_name(cfg: &RunConfig) -> String {
    cfg.data
        .counts
        .as_ref()
        .and_then(|p| p.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "counts".into())
}

/// Trains with progress on stderr, roughly twenty lines per run.
fn fit(
    ctx: &Ctx,
    data: &ExpressionMatrix,
    enc: &CovariateEncoder,
) -> Result<(TrainOutput, Option<Covariates>), CliError> {
    let cfg = &ctx.config;
    let cov = encode(Some(enc), data)?;
    let model_config = cfg.model.to_model_config(data.n_genes(), enc.width());
    let training = cfg.training.to_training_config(cfg.seed);
    let every = (training.epochs / 20).max(1);
    ctx.progress(format!(
        "training on {} cells x {} genes for {} epochs",
        data.n_cells(),
        data.n_genes(),
        training.epochs
    ));
    let out = train_with_progress(data, cov.as_ref(), &model_config, &training, |e, loss| {
        if (e + 1) % every == 0 || e + 1 == training.epochs {
            ctx.progress(format!("epoch {:>5}  mean -ELBO {loss:.4}", e + 1));
        }
    })?;
    Ok((out, cov))
}

fn loss_rows(trace: &[f64]) -> impl Iterator<Item = Vec<String>> + '_ {
    trace
        .iter()
        .enumerate()
        .map(|(e, l)| vec![(e + 1).to_string(), l.to_string()])
}

fn checkpoint_bytes(
    model: ScviModel,
    enc: &CovariateEncoder,
    metadata: BTreeMap<String, Value>,
) -> Result<Vec<u8>, CliError> {
    let mut ckpt = Checkpoint::new(model);
    ckpt.covariates = (!enc.is_empty()).then(|| enc.clone());
    ckpt.metadata = metadata;
    Ok(ckpt.to_bytes()?)
}

pub fn simulate_cmd(ctx: &Ctx) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let stamp = Stamp::new("simulate", cfg);
    let mut out = OutDir::create(&cfg.out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sim = simulate(&cfg.simulation, &mut rng)?;
    let truth = &sim.truth;
    // log library size gives downstream QC metrics a column to work with
    let n = sim.matrix.n_cells();
    let lib: Vec<f64> = (0..n).map(|i| sim.matrix.row(i).iter().sum::<f64>().ln_1p()).collect();
    let matrix = sim.matrix.clone().with_qc(QcTable {
        names: vec!["log_library_size".into()],
        values: Tensor::matrix(n, 1, lib)?,
    })?;

    let counts = out.path("counts.csv");
    save_csv(&matrix, &counts)?;
    stamp_file(&counts, &stamp)?;
    let meta = out.path("metadata.csv");
    save_metadata(&matrix, &meta)?;
    stamp_file(&meta, &stamp)?;

    let d = truth.latent.cols();
    let mut header = vec!["cell_id".to_string(), "group".into(), "batch".into()];
    header.extend((0..d).map(|k| format!("z{k}")));
    let header_ref: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = (0..n).map(|i| {
        let mut r = vec![
            matrix.cell_ids()[i].clone(),
            truth.groups[i].to_string(),
            truth.batches[i].to_string(),
        ];
        r.extend(truth.latent.row(i).iter().map(|v| v.to_string()));
        r
    });
    out.write_csv("truth_latent.csv", &stamp, &header_ref, rows)?;
    out.write_json(
        "truth.json",
        &json!({
            "seed": stamp.seed,
            "config_hash": stamp.config_hash,
            "decoder": truth.decoder,
            "centers": truth.centers,
            "group_log_fold": truth.group_log_fold,
            "batch_log_effect": truth.batch_log_effect,
            "theta": truth.theta,
            "pi": truth.pi,
        }),
    )?;
    ctx.progress(format!(
        "simulated {} cells x {} genes into {}",
        n,
        matrix.n_genes(),
        rel(&cfg.out)
    ));
    out.finish(&stamp, cfg)
}

pub fn train_cmd(ctx: &Ctx) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let stamp = Stamp::new("train", cfg);
    let data = load_data(cfg)?;
    let (train_set, heldout) = if cfg.data.heldout_fraction > 0.0 {
        let (t, h) = split(&data, cfg.data.heldout_fraction, cfg.seed)?;
        (t, Some(h))
    } else {
        (data, None)
    };
    let enc = CovariateEncoder::fit(&train_set, cfg.model.use_batch, cfg.model.use_qc)?;
    let (trained, _) = fit(ctx, &train_set, &enc)?;

    let mut out = OutDir::create(&cfg.out)?;
    let mut meta = BTreeMap::new();
    meta.insert("genes".into(), json!(train_set.gene_names()));
    meta.insert(
        "heldout_cells".into(),
        json!(heldout.as_ref().map(|h| h.cell_ids().to_vec()).unwrap_or_default()),
    );
    meta.insert("seed".into(), json!(cfg.seed));
    meta.insert("config_hash".into(), json!(stamp.config_hash));
    let bytes = checkpoint_bytes(trained.model, &enc, meta)?;
    out.write_bytes("model.ckpt", &bytes)?;
    out.write_csv("loss_trace.csv", &stamp, &["epoch", "mean_neg_elbo"], loss_rows(&trained.loss_trace))?;
    out.finish(&stamp, cfg)
}

pub fn eval_cmd(ctx: &Ctx) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let stamp = Stamp::new("eval", cfg);
    let ckpt = load_checkpoint(cfg)?;
    let data = align_genes(load_data(cfg)?, &ckpt)?;
    let cov = encode(ckpt.covariates.as_ref(), &data)?;
    let model = &ckpt.model;
    let dataset = dataset_name(cfg);
    let mut reports = Vec::new();
    let mut notes = serde_json::Map::new();
    let wants = |m: &str| cfg.eval.metrics.iter().any(|x| x == m);

    if wants("heldout_ll") {
        let names: Vec<String> = ckpt
            .metadata
            .get("heldout_cells")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .unwrap_or_default();
        let index: HashMap<&str, usize> = data
            .cell_ids()
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        let cells: Vec<usize> = if names.is_empty() {
            notes.insert("heldout_ll".into(), json!("no held-out cells recorded; scored every cell"));
            (0..data.n_cells()).collect()
        } else {
            names
                .iter()
                .map(|c| {
                    index
                        .get(c.as_str())
                        .copied()
                        .ok_or_else(|| CliError::Data(format!("held-out cell '{c}' is missing from the data")))
                })
                .collect::<Result<_, _>>()?
        };
        let subset = data.subset_cells(&cells)?;
        let sub_cov = cov.as_ref().map(|c| c.select(&cells));
        ctx.progress(format!(
            "importance sampling {} cells with {} samples each",
            cells.len(),
            cfg.eval.heldout_samples
        ));
        let ll = heldout_log_likelihoods(model, subset.counts(), sub_cov.as_ref(), cfg.eval.heldout_samples, cfg.seed)?;
        let mean = ll.iter().sum::<f64>() / ll.len() as f64;
        reports.push(report("heldout_ll", mean, &dataset, &stamp));
    }

    let latent = model.latent_means(data.counts(), cov.as_ref().map(Covariates::values))?;

    if wants("silhouette") {
        match data.labels() {
            Some(labels) => {
                reports.push(report("silhouette", silhouette(&latent, labels)?, &dataset, &stamp));
                if cfg.eval.fa_baseline {
                    let fa = factor_analysis_fit(&data.log1p(), model.config.latent_dim, cfg.eval.fa_max_iter, FA_TOL)?;
                    if !fa.converged {
                        let msg = format!("factor analysis did not converge in {} iterations", cfg.eval.fa_max_iter);
                        ctx.progress(format!("warning: {msg}"));
                        notes.insert("fa_silhouette".into(), json!(msg));
                    }
                    reports.push(report("fa_silhouette", silhouette(&fa.latents, labels)?, &dataset, &stamp));
                }
            }
            None => {
                notes.insert("silhouette".into(), json!("skipped: data has no labels"));
            }
        }
    }

    if wants("qc_correlation") {
        match data.qc() {
            Some(qc) => {
                reports.push(report("qc_correlation", qc_correlation(&latent, &qc.values)?, &dataset, &stamp));
                notes.insert(
                    "qc_correlation".into(),
                    json!("mean absolute Pearson correlation over (latent dimension, QC column) pairs"),
                );
            }
            None => {
                notes.insert("qc_correlation".into(), json!("skipped: data has no QC columns"));
            }
        }
    }

    let mut out = OutDir::create(&cfg.out)?;
    out.write_reports(&stamp, &reports, &Value::Object(notes))?;
    let d = latent.cols();
    let mut header = vec!["cell_id".to_string()];
    header.extend((0..d).map(|k| format!("z{k}")));
    let header_ref: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = (0..data.n_cells()).map(|i| {
        let mut r = vec![data.cell_ids()[i].clone()];
        r.extend(latent.row(i).iter().map(|v| v.to_string()));
        r
    });
    out.write_csv("latent.csv", &stamp, &header_ref, rows)?;
    for r in &reports {
        ctx.progress(format!("{:<16} {}", r.metric, r.value));
    }
    out.finish(&stamp, cfg)
}

pub fn impute_cmd(ctx: &Ctx) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let stamp = Stamp::new("impute", cfg);
    let data = load_data(cfg)?;
    let lambda = match cfg.corruption.lambda {
        Some(l) => l,
        None => calibrate_lambda(data.counts(), cfg.corruption.target_fraction)?,
    };
    let corrupted = corrupt(&data, &CorruptionConfig { lambda, seed: cfg.seed })?;
    if corrupted.mask.is_empty() {
        return Err(CliError::Data("corruption zeroed no entries; nothing to impute".into()));
    }
    let nonzero = data.counts().data().iter().filter(|&&v| v > 0.0).count();
    ctx.progress(format!(
        "lambda {lambda:.4} zeroed {} of {nonzero} nonzero entries",
        corrupted.mask.len()
    ));
    let enc = CovariateEncoder::fit(&corrupted.matrix, cfg.model.use_batch, cfg.model.use_qc)?;
    let (trained, cov) = fit(ctx, &corrupted.matrix, &enc)?;
    let imp = impute(&trained.model, &corrupted.matrix, cov.as_ref(), &corrupted.mask)?;
    let baseline = global_mean_baseline(corrupted.matrix.counts(), &corrupted.mask);
    let (b_median, b_mean) = imputation_errors(&baseline, &corrupted.mask)?;

    let dataset = dataset_name(cfg);
    let reports = vec![
        report("median_abs_error", imp.median_abs_error, &dataset, &stamp),
        report("mean_abs_error", imp.mean_abs_error, &dataset, &stamp),
        report("baseline_median_abs_error", b_median, &dataset, &stamp),
        report("baseline_mean_abs_error", b_mean, &dataset, &stamp),
        report("dropout_cross_entropy", imp.cross_entropy, &dataset, &stamp),
        report("corruption_lambda", lambda, &dataset, &stamp),
        report(
            "corrupted_fraction",
            corrupted.mask.len() as f64 / nonzero as f64,
            &dataset,
            &stamp,
        ),
    ];
    let notes = json!({
        "baseline": "per-gene mean of the corrupted matrix over unmasked cells",
        "dropout_cross_entropy": "binary cross entropy of the dropout probability over zeros of the corrupted matrix, masked entries positive",
    });

    let mut out = OutDir::create(&cfg.out)?;
    out.write_reports(&stamp, &reports, &notes)?;
    let rows = corrupted.mask.iter().enumerate().map(|(k, m)| {
        vec![
            data.cell_ids()[m.cell].clone(),
            data.gene_names()[m.gene].clone(),
            m.value.to_string(),
            imp.imputed[k].to_string(),
            baseline[k].to_string(),
            imp.dropout_prob[k].to_string(),
        ]
    });
    out.write_csv(
        "imputation.csv",
        &stamp,
        &["cell_id", "gene", "true_value", "imputed", "baseline", "dropout_prob"],
        rows,
    )?;
    out.write_csv(
        "impute_loss_trace.csv",
        &stamp,
        &["epoch", "mean_neg_elbo"],
        loss_rows(&trained.loss_trace),
    )?;
    let mut meta = BTreeMap::new();
    meta.insert("genes".into(), json!(data.gene_names()));
    meta.insert("seed".into(), json!(cfg.seed));
    meta.insert("config_hash".into(), json!(stamp.config_hash));
    meta.insert("corruption_lambda".into(), json!(lambda));
    let bytes = checkpoint_bytes(trained.model, &enc, meta)?;
    out.write_bytes("impute_model.ckpt", &bytes)?;
    for r in &reports {
        ctx.progress(format!("{:<26} {}", r.metric, r.value));
    }
    out.finish(&stamp, cfg)
}

pub fn de_cmd(ctx: &Ctx) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let stamp = Stamp::new("de", cfg);
    let ckpt = load_checkpoint(cfg)?;
    let data = align_genes(load_data(cfg)?, &ckpt)?;
    let cov = encode(ckpt.covariates.as_ref(), &data)?;
    let labels = data
        .labels()
        .ok_or_else(|| CliError::Config("de needs cell labels (a metadata file with a label column)".into()))?;
    let mut levels: Vec<&str> = labels.iter().map(String::as_str).collect();
    levels.sort_unstable();
    levels.dedup();
    let a_label = cfg.de.group_a.as_deref().unwrap_or(levels[0]);
    let a = data.cells_with_label(a_label);
    if a.is_empty() {
        return Err(CliError::Config(format!("no cells carry label '{a_label}'")));
    }
    let (b_label, b) = match cfg.de.group_b.as_deref() {
        Some(l) => (l.to_string(), data.cells_with_label(l)),
        None => (
            format!("not {a_label}"),
            (0..data.n_cells()).filter(|i| labels[*i] != a_label).collect(),
        ),
    };
    if b.is_empty() {
        return Err(CliError::Config(format!("group B ({b_label}) has no cells")));
    }
    ctx.progress(format!(
        "comparing {a_label} ({} cells) against {b_label} ({} cells)",
        a.len(),
        b.len()
    ));
    let results = de_test(
        &ckpt.model,
        &data,
        cov.as_ref(),
        &CellGroup::new(a, 0),
        &CellGroup::new(b, 1),
        &cfg.de_config(),
    )?;
    let mut out = OutDir::create(&cfg.out)?;
    let rows = results.iter().map(|r| {
        vec![
            r.gene.clone(),
            r.p_h0.to_string(),
            r.log_bayes_factor.to_string(),
            r.std_error.to_string(),
            r.log_bayes_factor_corrected.to_string(),
            r.saturated.to_string(),
            r.n_samples.to_string(),
        ]
    });
    out.write_csv(
        "de.csv",
        &stamp,
        &[
            "gene",
            "p_h0",
            "log_bayes_factor",
            "std_error",
            "log_bayes_factor_corrected",
            "saturated",
            "n_samples",
        ],
        rows,
    )?;
    out.finish(&stamp, cfg)
}
