//! Experiment runner: the TOML config schema and the implementations behind
//! the CLI subcommands (gen, train-baseline, adapt, oracle, eval, report).

use crate::evalmetrics::{csv_header, csv_row, sweep_tau, EvalError, EvalProtocol, SweepResult};
use crate::geometry::{BevGrid, CameraCalibration, GeometryError, Vec3};
use crate::pseudolabel::Method;
use crate::selftrain::{
    adapt, dataset_tables, pretrain_baseline, AdaptConfig, TrainConfig, TrainError,
};
use crate::synthworld::{generate_dataset, load_dataset, DataError, DomainStyle, RigConfig, SceneConfig};
use crate::tinynet::checkpoint::{load_params, save_params};
use crate::tinynet::loss::gaussian_soft_target;
use crate::tinynet::{forward, NetConfig, NetError, OccupancyMap, ParameterSet};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config file {path}: {reason}")]
    Config { path: PathBuf, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Config schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraPose {
    pub pos: Vec3,
    pub look_at: Vec3,
}

/// Rig description in config files: shared lens parameters plus one pose per
/// camera; principal point defaults to the image center.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RigSpec {
    pub image_w: usize,
    pub image_h: usize,
    pub fx: f64,
    pub fy: f64,
    #[serde(default)]
    pub cx: Option<f64>,
    #[serde(default)]
    pub cy: Option<f64>,
    pub cameras: Vec<CameraPose>,
}

impl RigSpec {
    pub fn build(&self) -> Result<RigConfig, GeometryError> {
        let cx = self.cx.unwrap_or(self.image_w as f64 / 2.0);
        let cy = self.cy.unwrap_or(self.image_h as f64 / 2.0);
        let cameras = self
            .cameras
            .iter()
            .map(|pose| {
                CameraCalibration::look_at(
                    self.fx,
                    self.fy,
                    cx,
                    cy,
                    self.image_w,
                    self.image_h,
                    pose.pos,
                    pose.look_at,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(RigConfig {
            cameras,
            image_w: self.image_w,
            image_h: self.image_h,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenSpec {
    pub n_frames: usize,
    pub source_seed: u64,
    pub target_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StylePair {
    pub source: DomainStyle,
    pub target: DomainStyle,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RigPair {
    pub source: RigSpec,
    pub target: RigSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin_x: f64,
    pub origin_y: f64,
    pub cell_size: f64,
    pub h_g: usize,
    pub w_g: usize,
}

impl GridSpec {
    pub fn build(&self) -> Result<BevGrid, GeometryError> {
        BevGrid::new(self.origin_x, self.origin_y, self.cell_size, self.h_g, self.w_g)
    }
}

fn default_eval_taus() -> Vec<f64> {
    (1..=19).map(|k| k as f64 * 0.05).collect()
}

fn default_half_meter() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSpec {
    /// Tau grid for model selection.
    pub tau_set: Vec<f64>,
    /// Match gate radius, meters.
    pub r_match_m: f64,
    /// Vanilla NMS suppression radius, meters.
    pub d_nms_m: f64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            tau_set: default_eval_taus(),
            r_match_m: default_half_meter(),
            d_nms_m: default_half_meter(),
        }
    }
}

/// One benchmark experiment: synthetic source and target domains plus all
/// training and evaluation hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub grid: GridSpec,
    pub scene: SceneConfig,
    pub gen: GenSpec,
    pub style: StylePair,
    pub rig: RigPair,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub adapt: AdaptConfig,
    #[serde(default)]
    pub eval: EvalSpec,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn protocol(&self) -> EvalProtocol {
        EvalProtocol {
            method: Method::Vanilla,
            d_nms_cells: self.eval.d_nms_m / self.grid.cell_size,
            k_d: self.adapt.k_d,
            r_match_cells: self.eval.r_match_m / self.grid.cell_size,
            tau_set: self.eval.tau_set.clone(),
        }
    }

    pub fn source_dir(&self, out: &Path) -> PathBuf {
        out.join("data").join("source")
    }

    pub fn target_dir(&self, out: &Path) -> PathBuf {
        out.join("data").join("target")
    }
}

// ---------------------------------------------------------------------------
// Metrics CSV
// ---------------------------------------------------------------------------

pub fn metrics_path(out: &Path) -> PathBuf {
    out.join("metrics.csv")
}

fn append_metrics(out: &Path, rows: &[String]) -> Result<(), CliError> {
    let path = metrics_path(out);
    let mut text = if path.exists() {
        fs::read_to_string(&path).map_err(io_err(&path))?
    } else {
        format!("{}\n", csv_header())
    };
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    fs::write(&path, text).map_err(io_err(&path))
}

/// Sweeps a checkpoint over both test splits and appends one row per tau to
/// the metrics CSV. Returns the target-split sweep.
pub fn evaluate_checkpoint(
    cfg: &ExperimentConfig,
    out: &Path,
    params: &ParameterSet,
    method_label: &str,
    protocol: &EvalProtocol,
) -> Result<SweepResult, CliError> {
    let source = load_dataset(&cfg.source_dir(out))?;
    let target = load_dataset(&cfg.target_dir(out))?;
    let mut rows = Vec::new();
    let mut target_sweep = None;
    for (split_name, ds) in [("source", &source), ("target", &target)] {
        let tables = dataset_tables(ds, &cfg.net)?;
        let frames = ds.test_frames();
        let sweep = sweep_tau(params, &cfg.net, &frames, &tables, protocol)?;
        for (tau, report) in &sweep.per_tau {
            rows.push(csv_row(
                &format!("{}:{}", cfg.name, split_name),
                method_label,
                *tau,
                report,
            ));
        }
        if split_name == "target" {
            target_sweep = Some(sweep);
        }
    }
    append_metrics(out, &rows)?;
    Ok(target_sweep.expect("target split evaluated"))
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// `gen`: renders the source and target datasets described by the config.
pub fn cmd_gen(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let grid = cfg.grid.build()?;
    for (dir, rig_spec, style, seed) in [
        (cfg.source_dir(out), &cfg.rig.source, &cfg.style.source, cfg.gen.source_seed),
        (cfg.target_dir(out), &cfg.rig.target, &cfg.style.target, cfg.gen.target_seed),
    ] {
        let rig = rig_spec.build()?;
        let manifest =
            generate_dataset(&cfg.scene, &rig, style, &grid, seed, cfg.gen.n_frames, &dir)?;
        println!(
            "generated {}: {} frames ({} train / {} test), {} views",
            dir.display(),
            manifest.n_frames,
            manifest.train_frames.len(),
            manifest.test_frames.len(),
            manifest.n_views,
        );
    }
    Ok(())
}

pub fn baseline_path(out: &Path) -> PathBuf {
    out.join("baseline.mvp")
}

pub fn adapted_path(out: &Path) -> PathBuf {
    out.join("adapted.mvp")
}

pub fn oracle_path(out: &Path) -> PathBuf {
    out.join("oracle.mvp")
}

/// `train-baseline`: source-only pre-training, then a tau sweep on both test
/// splits tagged `method=baseline`.
pub fn cmd_train_baseline(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let source = load_dataset(&cfg.source_dir(out))?;
    let params = pretrain_baseline(&source, &cfg.net, &cfg.train, cfg.seed)?.params;
    let ckpt = baseline_path(out);
    save_params(&ckpt, &params)?;
    let sweep = evaluate_checkpoint(cfg, out, &params, "baseline", &cfg.protocol())?;
    println!(
        "baseline: checkpoint {} | target best tau {:.2} MODA {:.1}",
        ckpt.display(),
        sweep.best_tau,
        sweep.best.moda
    );
    Ok(())
}

/// `adapt`: mean-teacher self-training from the baseline checkpoint, with
/// run log, per-epoch pseudo-label counts and checkpoints, then the sweep
/// tagged `method=mvuda`.
pub fn cmd_adapt(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let source = load_dataset(&cfg.source_dir(out))?;
    let mut target = load_dataset(&cfg.target_dir(out))?;
    // The target domain is unlabeled during adaptation; evaluation reloads
    // labels separately.
    for frame in &mut target.frames {
        frame.gt_positions = None;
    }
    let baseline = load_params(&baseline_path(out))?;
    let outcome = adapt(&baseline, &source, &target, &cfg.net, &cfg.adapt, cfg.seed)?;

    save_params(&adapted_path(out), &outcome.params)?;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
    for (epoch, params) in outcome.epoch_checkpoints.iter().enumerate() {
        save_params(&ckpt_dir.join(format!("epoch_{epoch:02}.mvp")), params)?;
    }

    let mut log = String::from("step,lr,loss_src,loss_tgt,n_pseudo_labels\n");
    for rec in &outcome.steps {
        log.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{}\n",
            rec.step,
            rec.lr,
            rec.loss_src,
            rec.loss_tgt,
            rec.pseudo_cells.len()
        ));
    }
    let log_path = out.join("run_log.csv");
    fs::write(&log_path, log).map_err(io_err(&log_path))?;

    let mut counts = String::from("epoch,total_pseudo_labels\n");
    for epoch in 0..outcome.epochs_run {
        let total: usize = outcome
            .steps
            .iter()
            .filter(|r| r.epoch == epoch)
            .map(|r| r.pseudo_cells.len())
            .sum();
        counts.push_str(&format!("{epoch},{total}\n"));
    }
    let counts_path = out.join("pseudo_counts.csv");
    fs::write(&counts_path, counts).map_err(io_err(&counts_path))?;

    let sweep = evaluate_checkpoint(cfg, out, &outcome.params, "mvuda", &cfg.protocol())?;
    println!(
        "adapted: {} epochs | target best tau {:.2} MODA {:.1}",
        outcome.epochs_run, sweep.best_tau, sweep.best.moda
    );
    Ok(())
}

/// `oracle`: the same recipe as the baseline, trained on target labels.
pub fn cmd_oracle(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let target = load_dataset(&cfg.target_dir(out))?;
    let params = pretrain_baseline(&target, &cfg.net, &cfg.train, cfg.seed)?.params;
    save_params(&oracle_path(out), &params)?;
    let sweep = evaluate_checkpoint(cfg, out, &params, "oracle", &cfg.protocol())?;
    println!(
        "oracle: target best tau {:.2} MODA {:.1}",
        sweep.best_tau, sweep.best.moda
    );
    Ok(())
}

/// `eval`: sweeps an existing checkpoint with a chosen extraction method and
/// appends rows under the given tag.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    out: &Path,
    checkpoint: &Path,
    method: Method,
    tag: &str,
) -> Result<(), CliError> {
    let params = load_params(checkpoint)?;
    let protocol = cfg.protocol().with_method(method, cfg.adapt.k_d);
    let sweep = evaluate_checkpoint(cfg, out, &params, tag, &protocol)?;
    println!(
        "eval {}: target best tau {:.2} MODA {:.1}",
        tag, sweep.best_tau, sweep.best.moda
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub benchmark: String,
    pub method: String,
    pub tau: f64,
    pub moda: f64,
    pub modp: f64,
    pub precision: f64,
    pub recall: f64,
}

pub fn read_metrics_csv(out: &Path) -> Result<Vec<MetricsRow>, CliError> {
    let path = metrics_path(out);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut rows = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if k == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(CliError::Config {
                path: path.clone(),
                reason: format!("line {}: expected 7 fields", k + 1),
            });
        }
        let num = |s: &str| -> Result<f64, CliError> {
            s.parse().map_err(|_| CliError::Config {
                path: path.clone(),
                reason: format!("line {}: bad number {s}", k + 1),
            })
        };
        rows.push(MetricsRow {
            benchmark: fields[0].to_string(),
            method: fields[1].to_string(),
            tau: num(fields[2])?,
            moda: num(fields[3])?,
            modp: num(fields[4])?,
            precision: num(fields[5])?,
            recall: num(fields[6])?,
        });
    }
    Ok(rows)
}

/// Best row (max MODA, ties to smaller tau) per (benchmark, method), in
/// first-appearance order.
pub fn best_rows(rows: &[MetricsRow]) -> Vec<MetricsRow> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows {
        let key = (r.benchmark.clone(), r.method.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.iter()
        .map(|(b, m)| {
            rows.iter()
                .filter(|r| &r.benchmark == b && &r.method == m)
                .fold(None::<MetricsRow>, |acc, r| match acc {
                    None => Some(r.clone()),
                    Some(best) => {
                        if r.moda > best.moda || (r.moda == best.moda && r.tau < best.tau) {
                            Some(r.clone())
                        } else {
                            Some(best)
                        }
                    }
                })
                .expect("key came from rows")
        })
        .collect()
}

fn write_pgm(path: &Path, map: &OccupancyMap) -> Result<(), CliError> {
    let mut buf = format!("P5\n{} {}\n255\n", map.w, map.h).into_bytes();
    buf.extend(map.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, buf).map_err(io_err(path))
}

/// `report`: a text summary of the best swept row per benchmark and method,
/// plus predicted-vs-label occupancy heatmaps as 8-bit PGM images for the
/// first target test frame under every checkpoint found in the run dir.
pub fn cmd_report(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let rows = read_metrics_csv(out)?;
    let best = best_rows(&rows);
    let mut table = String::new();
    table.push_str(&format!(
        "{:<24} {:<10} {:>5} {:>8} {:>8} {:>10} {:>8}\n",
        "benchmark", "method", "tau", "MODA", "MODP", "precision", "recall"
    ));
    for r in &best {
        table.push_str(&format!(
            "{:<24} {:<10} {:>5.2} {:>8.1} {:>8.1} {:>10.1} {:>8.1}\n",
            r.benchmark, r.method, r.tau, r.moda, r.modp, r.precision, r.recall
        ));
    }
    print!("{table}");
    let report_dir = out.join("report");
    fs::create_dir_all(&report_dir).map_err(io_err(&report_dir))?;
    let summary_path = report_dir.join("summary.txt");
    fs::write(&summary_path, &table).map_err(io_err(&summary_path))?;

    let target = load_dataset(&cfg.target_dir(out))?;
    let frames = target.test_frames();
    if let Some(frame) = frames.first() {
        let tables = dataset_tables(&target, &cfg.net)?;
        if let Some(labels) = frame.gt_positions.as_ref() {
            let soft = gaussian_soft_target(labels, cfg.adapt.sigma_bev, &target.grid)?;
            write_pgm(&report_dir.join("label.pgm"), &soft)?;
        }
        for (name, path) in [
            ("baseline", baseline_path(out)),
            ("mvuda", adapted_path(out)),
            ("oracle", oracle_path(out)),
        ] {
            if path.exists() {
                let params = load_params(&path)?;
                let active = vec![true; frame.views.len()];
                let (map, _, _) = forward(&params, &cfg.net, &frame.views, &tables, &active)?;
                write_pgm(&report_dir.join(format!("pred_{name}.pgm")), &map)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn best_rows_picks_max_moda_smaller_tau() {
        let rows = vec![
            MetricsRow {
                benchmark: "b:t".into(),
                method: "baseline".into(),
                tau: 0.2,
                moda: 50.0,
                modp: 70.0,
                precision: 80.0,
                recall: 60.0,
            },
            MetricsRow {
                benchmark: "b:t".into(),
                method: "baseline".into(),
                tau: 0.3,
                moda: 50.0,
                modp: 71.0,
                precision: 81.0,
                recall: 61.0,
            },
            MetricsRow {
                benchmark: "b:t".into(),
                method: "baseline".into(),
                tau: 0.4,
                moda: 40.0,
                modp: 72.0,
                precision: 82.0,
                recall: 62.0,
            },
        ];
        let best = best_rows(&rows);
        assert_eq!(best.len(), 1);
        assert_eq!(best[0].tau, 0.2);
    }

    #[test]
    fn pgm_has_grid_dimensions() {
        let mut map = OccupancyMap::zeros(5, 7);
        map.data[3] = 1.0;
        let path = std::env::temp_dir().join(format!("mvbev_pgm_{}.pgm", std::process::id()));
        write_pgm(&path, &map).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header = String::from_utf8_lossy(&bytes[..11]);
        assert!(header.starts_with("P5\n7 5\n255\n"));
        assert_eq!(bytes.len(), 11 + 35);
        assert_eq!(bytes[11 + 3], 255);
        let _ = fs::remove_file(&path);
    }
}
