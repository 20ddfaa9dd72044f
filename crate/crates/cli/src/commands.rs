use std::collections::HashMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Parser;
use log::info;
use rem_core::analysis::{radial_correlogram, write_metrics_csv, MetricsReport};
use rem_core::checkpoint::{load_model, save_model};
use rem_core::config::{GridFormat, RunConfig};
use rem_core::io::{export_rem_grid, ingest_csv, read_query_points, MeasurementSet, Predictor};
use rem_core::kriging::Kriging;
use rem_core::model::{init_model, EncoderModel};
use rem_core::scenario::Layout;
use rem_core::training::{finetune_split, pretrain, split_dataset, TrainReport};
use rem_core::RemError;

use crate::manifest::{FileDigest, Manifest};
use crate::{Cli, Command, PredictionSource};

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    inputs: Vec<PathBuf>,
    outputs: Vec<String>,
}

impl Ctx {
    fn input(&mut self, p: &Path) -> PathBuf {
        self.inputs.push(p.to_path_buf());
        p.to_path_buf()
    }

    fn output(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.out.join(name)
    }

    fn measurements(&mut self, p: &Path) -> Result<MeasurementSet> {
        let p = self.input(p);
        self.cfg.load_measurements(&p).with_context(|| format!("reading {}", p.display()))
    }

    fn model(&mut self, p: &Path) -> Result<EncoderModel> {
        let p = self.input(p);
        load_model(&p).with_context(|| format!("loading {}", p.display()))
    }
}

fn required(p: &Option<PathBuf>, fallback: &Option<PathBuf>, flag: &str, key: &str) -> Result<PathBuf> {
    p.clone()
        .or_else(|| fallback.clone())
        .ok_or_else(|| RemError::Config(vec![format!("{flag} is required (or set {key})")]).into())
}

fn apply_overrides(cfg: &mut RunConfig, cli: &Cli) -> Result<()> {
    if let Some(s) = cli.seed {
        cfg.reseed(s);
    }
    if let Some(r) = cli.rmax {
        cfg.range.r_max = r;
    }
    if let Some(s) = cli.step {
        cfg.range.step = s;
    }
    if let Some(f) = cli.floor_dbm {
        cfg.ingest.rsrp_floor_dbm = f;
    }
    if cli.altitudes.is_empty() {
        return Ok(());
    }
    if matches!(cli.command, Command::Synth) {
        let Layout::Slices { altitudes, .. } = &mut cfg.scenario.layout else {
            return Err(RemError::Config(vec!["--altitudes needs a slices layout".into()]).into());
        };
        *altitudes = cli
            .altitudes
            .iter()
            .map(|a| a.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| RemError::Config(vec![format!("--altitudes: expected meters, got {:?}", cli.altitudes)]))?;
    } else {
        cfg.ingest.altitudes = cli.altitudes.clone();
    }
    Ok(())
}

/// Runs one command. `resolved` replaces the `--config` file (used by replay).
pub fn run(cli: Cli, argv: Vec<String>, resolved: Option<RunConfig>) -> Result<()> {
    if let Command::Replay { manifest } = &cli.command {
        return replay(manifest, cli.out.clone());
    }
    let mut cfg = match resolved {
        Some(c) => c,
        None => match &cli.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        },
    };
    apply_overrides(&mut cfg, &cli)?;
    cfg.validate()?;
    let out = cli.out.clone().or_else(|| cfg.paths.out.clone()).unwrap_or_else(|| PathBuf::from("rem_out"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut ctx = Ctx { cfg, out, inputs: Vec::new(), outputs: Vec::new() };
    let name = execute(&cli.command, &mut ctx)?;

    let inputs = ctx.inputs.iter().map(|p| FileDigest::of(p)).collect::<Result<Vec<_>>>()?;
    let outputs = ctx
        .outputs
        .iter()
        .map(|n| Ok(FileDigest { path: n.into(), ..FileDigest::of(&ctx.out.join(n))? }))
        .collect::<Result<Vec<_>>>()?;
    let m = Manifest {
        tool: "rem".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: name.into(),
        argv,
        seed: ctx.cfg.seed,
        parallel: cfg!(feature = "parallel"),
        config: ctx.cfg,
        inputs,
        outputs,
    };
    let path = m.write(&ctx.out)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn execute(cmd: &Command, ctx: &mut Ctx) -> Result<&'static str> {
    match cmd {
        Command::Synth => {
            let data = ctx.cfg.scenario().generate(ctx.cfg.seed)?;
            data.write_csv(ctx.output("measurements.csv"))?;
            info!("synthesized {} measurements", data.len());
            Ok("synth")
        }
        Command::Pretrain { init } => {
            let m0 = match init {
                Some(p) => ctx.model(p)?,
                None => init_model(&ctx.cfg.model, &ctx.cfg.range.to_range()?, ctx.cfg.seed)?,
            };
            let (m, report) = pretrain(&m0, &ctx.cfg.pretrain_channel(), &ctx.cfg.directions, &ctx.cfg.stage1)?;
            save_model(&m, ctx.output("stage1.ckpt"))?;
            write_report(&report, ctx.output("stage1_report.csv"))?;
            Ok("pretrain")
        }
        Command::Finetune { model, data, val } => {
            let m0 = ctx.model(&required(model, &ctx.cfg.paths.model, "--model", "paths.model")?)?;
            let data = ctx.measurements(&required(data, &ctx.cfg.paths.data, "--data", "paths.data")?)?;
            let (train, val) = match val {
                Some(v) => {
                    let v = ctx.measurements(v)?;
                    (data, v)
                }
                None => {
                    let [train, val, test] = split_dataset(&data, ctx.cfg.split.ratios, ctx.cfg.seed)?;
                    train.write_csv(ctx.output("train.csv"))?;
                    val.write_csv(ctx.output("val.csv"))?;
                    test.write_csv(ctx.output("test.csv"))?;
                    info!("split {} records into {}/{}/{}", data.len(), train.len(), val.len(), test.len());
                    (train, val)
                }
            };
            let (m, report) = finetune_split(&m0, &train.records, &val.records, &ctx.cfg.stage2)?;
            save_model(&m, ctx.output("stage2.ckpt"))?;
            write_report(&report, ctx.output("stage2_report.csv"))?;
            Ok("finetune")
        }
        Command::Predict { model, data } => {
            let m = ctx.model(&required(model, &ctx.cfg.paths.model, "--model", "paths.model")?)?;
            let q = read_query_points(ctx.input(data), &ctx.cfg.ingest.schema)
                .with_context(|| format!("reading {}", data.display()))?;
            let preds = write_predictions(&m, q, ctx.output("predictions.csv"))?;
            info!("predicted {preds} locations");
            Ok("predict")
        }
        Command::Krige { data, query } => {
            let data = ctx.measurements(&required(data, &ctx.cfg.paths.data, "--data", "paths.data")?)?;
            let k = Kriging::fit(&data, &ctx.cfg.kriging)?;
            fs::write(ctx.output("variogram.json"), serde_json::to_string_pretty(&k.variogram)? + "\n")?;
            if let Some(q) = query {
                let q = read_query_points(ctx.input(q), &ctx.cfg.ingest.schema)
                    .with_context(|| format!("reading {}", q.display()))?;
                write_predictions(&k, q, ctx.output("predictions.csv"))?;
            }
            Ok("krige")
        }
        Command::Correlate { data } => {
            let data = ctx.measurements(&required(data, &ctx.cfg.paths.data, "--data", "paths.data")?)?;
            let c = radial_correlogram(&data, &ctx.cfg.analysis)?;
            c.write_csv(BufWriter::new(File::create(ctx.output("correlogram.csv"))?))?;
            info!(
                "correlogram over {} groups ({} used), {} bins",
                c.diagnostics.groups,
                c.diagnostics.groups_used,
                c.lag_m.len()
            );
            Ok("correlate")
        }
        Command::Evaluate { truth, source } => {
            let truth = ctx.measurements(truth)?;
            if truth.is_empty() {
                return Err(RemError::Empty("no truth records after filtering".into()).into());
            }
            let pred = predictions_for(&truth, source, ctx)?;
            let rows = metric_rows(&truth, &pred)?;
            for (label, r) in &rows {
                println!("{}", r.csv_row(label));
            }
            write_metrics_csv(&rows, BufWriter::new(File::create(ctx.output("metrics.csv"))?))?;
            Ok("evaluate")
        }
        Command::Export { source } => {
            let (pred, delta): (Box<dyn Predictor>, _) = match (&source.model, &source.kriging) {
                (Some(m), _) => {
                    let m = ctx.model(m)?;
                    let d = m.delta.clone();
                    (Box::new(m), d)
                }
                (None, Some(k)) => {
                    let data = ctx.measurements(k)?;
                    (Box::new(Kriging::fit(&data, &ctx.cfg.kriging)?), ctx.cfg.range.to_range()?)
                }
                (None, None) => unreachable!("clap requires one predictor"),
            };
            let ex = ctx.cfg.export.clone();
            let grid = export_rem_grid(pred.as_ref(), &ex.region, &delta, ex.fill)?;
            match ex.format {
                GridFormat::Binary => {
                    ctx.output("rem_grid.bin");
                    ctx.output("rem_grid.json");
                    grid.write_binary(ctx.out.join("rem_grid"))?;
                }
                GridFormat::Csv => grid.write_csv(ctx.output("rem_grid.csv"))?,
            }
            info!("exported {:?} grid", grid.counts);
            Ok("export")
        }
        Command::Replay { .. } => unreachable!("handled before execution"),
    }
}

fn write_report(r: &TrainReport, path: PathBuf) -> Result<()> {
    r.write_csv(BufWriter::new(File::create(&path)?))?;
    if let Some(best) = r.best_epoch {
        info!(
            "best epoch {best}: train {:.4} val {:.4} ({:.1} s)",
            r.train_loss[best],
            r.val_loss.get(best).copied().unwrap_or(f64::NAN),
            r.wall_time_s
        );
    }
    Ok(())
}

fn write_predictions(p: &dyn Predictor, mut q: Vec<rem_core::io::Measurement>, path: PathBuf) -> Result<usize> {
    let pos: Vec<_> = q.iter().map(|r| r.position).collect();
    for (r, v) in q.iter_mut().zip(p.predict_many(&pos)?) {
        r.rsrp_dbm = v;
    }
    let n = q.len();
    MeasurementSet::from_records(q).write_csv(path)?;
    Ok(n)
}

fn position_key(p: &rem_core::geometry::CartesianPoint) -> [u64; 3] {
    [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()]
}

fn predictions_for(truth: &MeasurementSet, src: &PredictionSource, ctx: &mut Ctx) -> Result<Vec<f64>> {
    if let Some(m) = &src.model {
        return Ok(ctx.model(m)?.predict_many(&truth.positions())?);
    }
    if let Some(k) = &src.kriging {
        // The altitude selection applies to the truth file only.
        let p = ctx.input(k);
        let train = ingest_csv(&p, &ctx.cfg.ingest.schema, ctx.cfg.ingest.rsrp_floor_dbm)
            .with_context(|| format!("reading {}", p.display()))?;
        return Ok(Kriging::fit(&train, &ctx.cfg.kriging)?.predict_many(&truth.positions())?);
    }
    let p = ctx.input(src.predictions.as_ref().expect("clap requires one source"));
    let preds = ingest_csv(&p, &ctx.cfg.ingest.schema, f64::NEG_INFINITY)
        .with_context(|| format!("reading {}", p.display()))?;
    // Match by exact position, consuming duplicates in file order.
    let mut by_pos: HashMap<[u64; 3], Vec<f64>> = HashMap::new();
    for r in preds.records.iter().rev() {
        by_pos.entry(position_key(&r.position)).or_default().push(r.rsrp_dbm);
    }
    truth
        .records
        .iter()
        .map(|r| {
            by_pos.get_mut(&position_key(&r.position)).and_then(Vec::pop).ok_or_else(|| {
                RemError::Data(format!("no prediction for truth point {:?} in {}", r.position, p.display())).into()
            })
        })
        .collect()
}

fn metric_rows(truth: &MeasurementSet, pred: &[f64]) -> Result<Vec<(String, MetricsReport)>> {
    let values = truth.values();
    let mut rows = vec![("all".to_string(), MetricsReport::compute(pred, &values)?)];
    let mut labels: Vec<&str> = truth.records.iter().filter_map(|r| r.altitude_label.as_deref()).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() > 1 {
        for l in labels {
            let idx: Vec<usize> =
                (0..truth.len()).filter(|&i| truth.records[i].altitude_label.as_deref() == Some(l)).collect();
            let p: Vec<f64> = idx.iter().map(|&i| pred[i]).collect();
            let t: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
            rows.push((l.to_string(), MetricsReport::compute(&p, &t)?));
        }
    }
    Ok(rows)
}

fn replay(path: &Path, out: Option<PathBuf>) -> Result<()> {
    let m = Manifest::read(path)?;
    for input in &m.inputs {
        let now = FileDigest::of(&input.path)?;
        if now.sha256 != input.sha256 {
            return Err(RemError::Data(format!("input {} changed since the recorded run", input.path.display())).into());
        }
    }
    let out = out.unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).join("replay"));
    let mut argv = Vec::with_capacity(m.argv.len() + 2);
    let mut it = m.argv.iter();
    while let Some(a) = it.next() {
        if a == "--out" {
            it.next();
        } else if !a.starts_with("--out=") {
            argv.push(a.clone());
        }
    }
    argv.push("--out".into());
    argv.push(out.to_string_lossy().into_owned());
    let cli = Cli::try_parse_from(std::iter::once("rem".to_string()).chain(argv.iter().cloned()))?;
    run(cli, argv, Some(m.config.clone()))?;

    let again = Manifest::read(&out.join(Manifest::file_name(&m.command)))?;
    let differ: Vec<String> = m
        .outputs
        .iter()
        .filter(|o| !again.outputs.contains(o))
        .map(|o| o.path.display().to_string())
        .collect();
    if !differ.is_empty() || again.outputs.len() != m.outputs.len() {
        return Err(RemError::Data(format!("replay outputs differ: {}", differ.join(", "))).into());
    }
    println!("replay ok: {} outputs identical", m.outputs.len());
    Ok(())
}
