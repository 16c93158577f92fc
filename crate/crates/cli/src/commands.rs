use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use geossl::baselines::{knn_regress, BasicPredictor, KnnPoint, Statistic};
use geossl::config::parse_encoder_tag;
use geossl::contrastive::{pretrain as run_pretrain, PretrainConfig};
use geossl::data::{gen_synthetic_world, read_dataset, write_dataset, Dataset, DatasetMode, NormStats, SampleRecord, SynthParams, MINERAL_SOIL_CAP};
use geossl::finetune::{eligible, finetune as run_finetune, labels_of, split, FinetuneOutcome, TrainPlan};
use geossl::metrics::fmt_float;
use geossl::model::Checkpoint;
use geossl::{Error, FeatureToggles, MetricsReport, ModelConfig, Preset, SoilNet};

use crate::tables::{self, PREDICTION_HEADER};
use crate::{AblateArgs, BaselineArgs, CliResult, Failure, FinetuneArgs, GenDataArgs, PlanArgs, PretrainArgs, ReportArgs, RunArgs};

/// Temporal neighbours used to fill missing climate months on load.
const IMPUTE_K: usize = 3;

pub const ABLATION_CONFIGS: [&str; 3] = ["vit-trans", "vit-lstm", "cnn-trans"];
pub const ABLATION_TOGGLES: [&str; 5] = ["1111", "1011", "1101", "1110", "1100"];

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn load(path: &Path) -> CliResult<Dataset> {
    let mut ds = read_dataset(path)?;
    let filled = ds.impute(IMPUTE_K)?;
    if filled > 0 {
        eprintln!("imputed {filled} missing climate values");
    }
    Ok(ds)
}

fn label_cap(mode: DatasetMode) -> Option<f64> {
    (mode == DatasetMode::LucasLike).then_some(MINERAL_SOIL_CAP)
}

fn train_plan(run: &RunArgs, plan: &PlanArgs, preset: Preset, mode: DatasetMode) -> TrainPlan {
    let mut p = TrainPlan::preset(preset);
    p.seed = run.seed;
    p.epochs = run.epochs.unwrap_or(p.epochs);
    p.batch_size = run.batch.unwrap_or(p.batch_size);
    p.lr = run.lr.unwrap_or(p.lr);
    p.folds = plan.folds.unwrap_or(p.folds);
    p.freeze_encoders = plan.freeze_encoders;
    p.label_cap = label_cap(mode);
    p
}

fn pretrain_config(run: &RunArgs, preset: Preset, epochs: Option<usize>) -> PretrainConfig {
    let mut c = PretrainConfig::preset(preset);
    c.seed = run.seed;
    c.epochs = epochs.unwrap_or(c.epochs);
    c.batch_size = run.batch.unwrap_or(c.batch_size);
    c.lr = run.lr.unwrap_or(c.lr);
    c
}

pub fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    if a.out.exists() {
        let non_empty = fs::read_dir(&a.out)
            .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", a.out.display())))?
            .next()
            .is_some();
        if non_empty && !a.force {
            return Err(Failure::Usage(format!("{} is not empty; pass --force to overwrite", a.out.display())));
        }
        if non_empty {
            fs::remove_dir_all(&a.out).map_err(|e| Failure::Usage(format!("cannot clear {}: {e}", a.out.display())))?;
        }
    }
    let params = match a.preset {
        Preset::Desk => SynthParams::desk(a.mode, a.labeled, a.unlabeled),
        Preset::Paper => SynthParams::paper(a.mode, a.labeled, a.unlabeled),
    };
    let world = gen_synthetic_world(a.seed, &params)?;
    write_dataset(&world.dataset, &a.out)?;
    let ds = &world.dataset;
    println!(
        "wrote {} records ({} labelled, {} unlabelled) to {}",
        ds.records.len(),
        ds.labeled().len(),
        ds.unlabeled().len(),
        a.out.display()
    );
    println!("mode {}  patch {}x{}  months {}  land-cover rejections {}", ds.mode, ds.image_size, ds.image_size, ds.series_len, world.rejected);
    Ok(())
}

pub fn pretrain(a: &PretrainArgs) -> CliResult<()> {
    let cfg = a.model.model_config()?;
    let ds = load(&a.run.dataset)?;
    if ds.records.is_empty() {
        return Err(Error::Data("the dataset has no records".into()).into());
    }
    create_dir(&a.run.out)?;
    let pc = pretrain_config(&a.run, a.model.preset, a.run.epochs);
    let records: Vec<&SampleRecord> = ds.records.iter().collect();
    let model = SoilNet::new(&cfg, a.run.seed)?;
    eprintln!("pretraining {} on {} records for {} epochs", cfg.encoder_tag(), records.len(), pc.epochs);
    let out = run_pretrain(&records, model, &pc)?;
    out.checkpoint.save(&a.run.out.join("checkpoint"))?;
    let rows = out.history.iter().map(|r| [r.epoch.to_string(), r.step.to_string(), fmt_float(r.loss)]);
    tables::write_csv(&a.run.out.join("pretrain_loss.csv"), &["epoch", "step", "loss"], rows)?;
    match (out.history.first(), out.final_loss) {
        (Some(first), Some(last)) => println!("contrastive loss {:.4} -> {:.4} over {} steps", first.loss, last, out.history.len()),
        _ => println!("no optimisation steps; checkpoint holds the initial weights"),
    }
    Ok(())
}

fn model_name(approach: &str, cfg: &ModelConfig) -> String {
    format!("{approach}-{}-{}", cfg.encoder_tag(), cfg.toggles)
}

fn finetune_rows(approach: &str, outcome: &FinetuneOutcome) -> Vec<Vec<String>> {
    outcome
        .fold_reports
        .iter()
        .chain(std::iter::once(&outcome.test_report))
        .map(|r| tables::report_row(&[approach.to_string()], r))
        .collect()
}

pub fn finetune(a: &FinetuneArgs) -> CliResult<()> {
    let cfg = a.model.model_config()?;
    let init = match a.init.as_str() {
        "none" => None,
        path => Some(Checkpoint::load(Path::new(path), Some(&cfg))?),
    };
    let ds = load(&a.run.dataset)?;
    let plan = train_plan(&a.run, &a.plan, a.model.preset, ds.mode);
    create_dir(&a.run.out)?;
    let labelled = ds.labeled();
    eprintln!("fine-tuning {} on {} labelled records ({} folds)", cfg.encoder_tag(), labelled.len(), plan.folds);
    let outcome = run_finetune(&labelled, &cfg, &plan, init.as_ref())?;
    let approach = outcome.approach;
    let out = &a.run.out;
    tables::write_csv(&out.join("report.csv"), &tables::report_header(&["approach"]), finetune_rows(approach, &outcome))?;
    let name = model_name(approach, &cfg);
    tables::write_csv(&out.join("predictions.csv"), &PREDICTION_HEADER, tables::prediction_rows(&name, &outcome.predictions))?;
    let history = outcome.history.iter().map(|h| {
        let train = if h.train_loss.is_finite() { fmt_float(h.train_loss) } else { String::new() };
        [h.fold.to_string(), h.epoch.to_string(), train, fmt_float(h.val_rmse)]
    });
    tables::write_csv(&out.join("history.csv"), &["fold", "epoch", "train_rmsle", "val_rmse"], history)?;
    let ck = Checkpoint {
        model: outcome.model.clone(),
        norm: outcome.norm.clone(),
        meta: serde_json::json!({ "stage": "finetune", "plan": plan, "approach": approach, "selected_fold": outcome.selected_fold }),
    };
    ck.save(&out.join("model"))?;
    for r in &outcome.fold_reports {
        tables::print_report(&name, r);
    }
    tables::print_report(&name, &outcome.test_report);
    Ok(())
}

/// One ablation cell: encoder pair, feature groups and approach.
#[derive(Debug, Clone)]
pub struct Cell {
    pub encoders: &'static str,
    pub toggles: &'static str,
    pub ssl: bool,
}

impl Cell {
    pub fn id(&self) -> String {
        format!("{}/{}/{}", self.encoders, self.toggles, self.approach())
    }

    fn approach(&self) -> &'static str {
        if self.ssl {
            "ssl"
        } else {
            "supervised"
        }
    }
}

/// Every toggle row supervised, then the full-feature self-supervised row,
/// for each encoder pair.
pub fn ablation_grid() -> Vec<Cell> {
    let mut cells = Vec::new();
    for encoders in ABLATION_CONFIGS {
        for toggles in ABLATION_TOGGLES {
            cells.push(Cell { encoders, toggles, ssl: false });
        }
        cells.push(Cell { encoders, toggles: "1111", ssl: true });
    }
    cells
}

fn worker_count() -> usize {
    std::env::var("GEOSSL_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

fn run_cell(cell: &Cell, a: &AblateArgs, ds: &Dataset) -> CliResult<FinetuneOutcome> {
    let (img, ser) = parse_encoder_tag(cell.encoders)?;
    let toggles: FeatureToggles = cell.toggles.parse()?;
    let mut cfg = ModelConfig::preset(a.preset).with_encoders(img, ser).with_toggles(toggles);
    if let Some(t) = a.temperature {
        cfg.temperature = t;
    }
    let plan = train_plan(&a.run, &a.plan, a.preset, ds.mode);
    let init = if cell.ssl {
        let records: Vec<&SampleRecord> = ds.records.iter().collect();
        let pc = pretrain_config(&a.run, a.preset, a.pretrain_epochs);
        Some(run_pretrain(&records, SoilNet::new(&cfg, a.run.seed)?, &pc)?.checkpoint)
    } else {
        None
    };
    Ok(run_finetune(&ds.labeled(), &cfg, &plan, init.as_ref())?)
}

pub fn ablate(a: &AblateArgs) -> CliResult<()> {
    let ds = load(&a.run.dataset)?;
    create_dir(&a.run.out)?;
    let cells = ablation_grid();
    let results: Vec<Mutex<Option<CliResult<FinetuneOutcome>>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = worker_count().min(cells.len());
    eprintln!("running {} ablation cells on {workers} worker thread(s)", cells.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                let failed = results.iter().any(|r| matches!(*r.lock().unwrap(), Some(Err(_))));
                if failed {
                    break;
                }
                eprintln!("cell {}", cell.id());
                let res = run_cell(cell, a, &ds);
                *results[i].lock().unwrap() = Some(res);
            });
        }
    });
    let mut rows = Vec::new();
    let mut preds = Vec::new();
    for (cell, slot) in cells.iter().zip(results) {
        let outcome = match slot.into_inner().unwrap() {
            Some(Ok(o)) => o,
            Some(Err(e)) => return Err(Failure::Cell { id: cell.id(), source: Box::new(e) }),
            None => continue,
        };
        let labels = [cell.encoders.to_string(), cell.toggles.to_string(), cell.approach().to_string()];
        rows.push(tables::report_row(&labels, &outcome.test_report));
        let name = format!("{}-{}-{}", cell.approach(), cell.encoders, cell.toggles);
        preds.extend(tables::prediction_rows(&name, &outcome.predictions));
        tables::print_report(&cell.id(), &outcome.test_report);
    }
    if rows.len() != cells.len() {
        return Err(Failure::Usage("ablation stopped before every cell ran".into()));
    }
    tables::write_csv(&a.run.out.join("ablation.csv"), &tables::report_header(&["config", "toggles", "approach"]), rows)?;
    tables::write_csv(&a.run.out.join("predictions.csv"), &PREDICTION_HEADER, preds)?;
    Ok(())
}

/// Normalised image planes and climate values of one record, flattened.
fn knn_features(norm: &NormStats, r: &SampleRecord) -> Vec<f64> {
    let mut v = Vec::new();
    norm.image(r, &FeatureToggles::ALL.image_channels(), &mut v);
    norm.series(r, &FeatureToggles::ALL.series_vars(), &mut v);
    v
}

pub fn baseline(a: &BaselineArgs) -> CliResult<()> {
    let ds = load(&a.dataset)?;
    let plan = TrainPlan { seed: a.seed, ..TrainPlan::default() };
    let records = eligible(&ds.labeled(), label_cap(ds.mode))?;
    let parts = split(records.len(), plan.fractions, plan.seed)?;
    let train: Vec<&SampleRecord> = parts.train.iter().chain(&parts.val).map(|&i| records[i]).collect();
    let test: Vec<&SampleRecord> = parts.test.iter().map(|&i| records[i]).collect();
    let statistic = a.statistic.unwrap_or(match ds.mode {
        DatasetMode::LucasLike => Statistic::Mean,
        DatasetMode::RacaLike => Statistic::Median,
    });
    let (y_train, y_test) = (labels_of(&train), labels_of(&test));
    let basic = BasicPredictor::fit(&y_train, statistic)?;
    let basic_pred = basic.predict(test.len());

    let owned: Vec<SampleRecord> = train.iter().map(|r| (*r).clone()).collect();
    let norm = NormStats::fit(&owned)?;
    let points: Vec<KnnPoint> = train
        .iter()
        .zip(&y_train)
        .map(|(r, &label)| KnnPoint { location_id: r.location_id, features: knn_features(&norm, r), label })
        .collect();
    let knn_pred = test.iter().map(|r| knn_regress(&knn_features(&norm, r), &points, a.k)).collect::<Result<Vec<_>, _>>()?;

    create_dir(&a.out)?;
    let basic_name = format!("basic-{}", if statistic == Statistic::Mean { "mean" } else { "median" });
    let knn_name = format!("knn-{}", a.k);
    let mut rows = Vec::new();
    let mut preds = Vec::new();
    for (name, yhat) in [(&basic_name, &basic_pred), (&knn_name, &knn_pred)] {
        let report = MetricsReport::compute(&y_test, yhat, "test", a.seed)?;
        tables::print_report(name, &report);
        rows.push(tables::report_row(std::slice::from_ref(name), &report));
        let triples: Vec<(u32, f64, f64)> = test.iter().zip(y_test.iter().zip(yhat)).map(|(r, (&y, &p))| (r.location_id, y, p)).collect();
        preds.extend(tables::prediction_rows(name, &triples));
    }
    tables::write_csv(&a.out.join("report.csv"), &tables::report_header(&["approach"]), rows)?;
    tables::write_csv(&a.out.join("predictions.csv"), &PREDICTION_HEADER, preds)?;
    Ok(())
}

fn parse_value(path: &Path, line: usize, field: &str) -> CliResult<f64> {
    field
        .parse()
        .map_err(|_| Error::Data(format!("{}: row {line} holds `{field}`, not a number", path.display())).into())
}

pub fn report(a: &ReportArgs) -> CliResult<()> {
    // model name -> (observed, predicted), in order of first appearance
    let mut models: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    let mut scatter = Vec::new();
    for path in &a.inputs {
        let (header, rows) = tables::read_csv(path)?;
        if header != PREDICTION_HEADER {
            return Err(Error::Data(format!("{} has columns {header:?}, expected {PREDICTION_HEADER:?}", path.display())).into());
        }
        if rows.is_empty() {
            return Err(Error::Data(format!("{} holds no predictions", path.display())).into());
        }
        for (i, row) in rows.iter().enumerate() {
            let (y, p) = (parse_value(path, i + 1, &row[2])?, parse_value(path, i + 1, &row[3])?);
            let pos = match models.iter().position(|m| m.0 == row[0]) {
                Some(pos) => pos,
                None => {
                    models.push((row[0].clone(), Vec::new(), Vec::new()));
                    models.len() - 1
                }
            };
            models[pos].1.push(y);
            models[pos].2.push(p);
            scatter.push(vec![row[0].clone(), row[1].clone(), row[2].clone(), row[3].clone()]);
        }
    }
    create_dir(&a.out)?;
    let mut summary = Vec::new();
    for (name, y, p) in &models {
        let r = MetricsReport::compute(y, p, "test", 0)?;
        tables::print_report(name, &r);
        summary.push(
            [name.clone(), r.n.to_string()]
                .into_iter()
                .chain([r.mae, r.r2_percent, r.rmse, r.rpiq, r.ccc].map(fmt_float))
                .collect::<Vec<_>>(),
        );
    }
    tables::write_csv(&a.out.join("summary.csv"), &["model", "n", "mae", "r2_percent", "rmse", "rpiq", "ccc"], summary)?;
    tables::write_csv(&a.out.join("scatter.csv"), &PREDICTION_HEADER, scatter)?;
    Ok(())
}
