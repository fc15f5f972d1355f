//! Mean-teacher self-training: EMA teacher, pseudo-labeling on clean target
//! frames, strong augmentation for the student, the combined source/target
//! loss, source-only pre-training, and early stopping.

use crate::geometry::{build_projection_table, BevGrid, GeometryError, ProjectionTable};
use crate::pseudolabel::{extract, to_pseudo_label, Method, PostprocessConfig};
use crate::rng::{derive_rng, step_stream, Purpose};
use crate::synthworld::{upright_rect_quad, DataError, Dataset, FrameRecord, RigConfig};
use crate::tinynet::loss::{gaussian_soft_target, mse_loss, perspective_loss};
use crate::tinynet::optim::{one_cycle_lr, sgd_step, SgdConfig, SgdState};
use crate::tinynet::{backward, forward, NetConfig, NetError, ParameterSet};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset has no training frames")]
    EmptyDataset,
    #[error("frame {frame_id} is missing labels required for supervision")]
    MissingLabels { frame_id: u64 },
    #[error("source and target datasets use different BEV grids")]
    GridMismatch,
    #[error("parameter sets have mismatched layouts")]
    LayoutMismatch,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

// ---------------------------------------------------------------------------
// Configs
// ---------------------------------------------------------------------------

/// Strong augmentation applied to the student's inputs: DropView plus
/// 3D random occlusion, both geometry-consistent across views.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationSpec {
    /// Probability of dropping exactly one uniformly chosen view.
    pub dropview_prob: f64,
    pub occlusion_count_min: usize,
    pub occlusion_count_max: usize,
    /// Occluder width range, meters.
    pub occluder_w_range: (f64, f64),
    /// Occluder height range, meters.
    pub occluder_h_range: (f64, f64),
    /// Base elevation range, meters. Occluders float: a flat-shaded
    /// rectangle standing on the ground is indistinguishable from a
    /// pedestrian in every view at once and poisons supervision, while an
    /// elevated one still occludes without forming a consistent ground
    /// object.
    pub occluder_z_range: (f64, f64),
    /// Fill intensity range, [0, 1].
    pub occluder_intensity_range: (f64, f64),
}

impl AugmentationSpec {
    pub fn none() -> Self {
        AugmentationSpec {
            dropview_prob: 0.0,
            occlusion_count_min: 0,
            occlusion_count_max: 0,
            occluder_w_range: (0.4, 1.2),
            occluder_h_range: (0.4, 1.0),
            occluder_z_range: (0.3, 1.2),
            occluder_intensity_range: (0.0, 1.0),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.dropview_prob == 0.0 && self.occlusion_count_max == 0
    }
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec::none()
    }
}

/// Self-training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    /// EMA coefficient; 1 freezes the teacher at the baseline.
    pub alpha: f64,
    /// Weight of the target (pseudo-label) loss term.
    pub lambda: f64,
    pub epochs: usize,
    /// Pseudo-labeling threshold.
    pub tau: f64,
    /// Local-max neighborhood half-width, cells.
    pub k_d: usize,
    /// Vanilla pseudo-labeling suppression radius, cells.
    pub d_cells: f64,
    pub method: Method,
    pub aug: AugmentationSpec,
    pub use_perspective_supervision: bool,
    pub max_lr: f64,
    /// Soft-target sigma over BEV cells.
    pub sigma_bev: f64,
    /// Perspective-target sigma over feature pixels.
    pub sigma_px: f64,
    /// Pedestrian height for head projection, meters.
    pub ped_height: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            alpha: 0.99,
            lambda: 1.0,
            epochs: 5,
            tau: 0.3,
            k_d: 3,
            d_cells: 5.0,
            method: Method::LocalMax,
            aug: AugmentationSpec::none(),
            use_perspective_supervision: false,
            max_lr: 0.1,
            sigma_bev: 2.0,
            sigma_px: 3.0,
            ped_height: 1.8,
        }
    }
}

/// Source-only (pre-)training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub max_lr: f64,
    pub aug: AugmentationSpec,
    pub use_perspective_supervision: bool,
    pub sigma_bev: f64,
    pub sigma_px: f64,
    pub ped_height: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            max_lr: 0.1,
            aug: AugmentationSpec::none(),
            use_perspective_supervision: false,
            sigma_bev: 2.0,
            sigma_px: 3.0,
            ped_height: 1.8,
        }
    }
}

/// The mean teacher's weights.
#[derive(Debug, Clone)]
pub struct TeacherState {
    pub phi: ParameterSet,
}

/// Per-step log record; serialized by the CLI as the run-log CSV.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_src: f64,
    pub loss_tgt: f64,
    pub target_frame_id: u64,
    pub pseudo_cells: Vec<(usize, usize)>,
}

// ---------------------------------------------------------------------------
// Core operations
// ---------------------------------------------------------------------------

/// Eq.-style EMA: `phi <- alpha*phi + (1 - alpha)*theta`, elementwise in a
/// fixed order.
pub fn ema_update(
    phi: &mut ParameterSet,
    theta: &ParameterSet,
    alpha: f64,
) -> Result<(), TrainError> {
    if !phi.same_layout(theta) {
        return Err(TrainError::LayoutMismatch);
    }
    let a = alpha as f32;
    let b = (1.0 - alpha) as f32;
    for ((_, p), (_, t)) in phi.iter_mut().zip(theta.iter()) {
        for (pv, &tv) in p.data_mut().iter_mut().zip(t.data()) {
            *pv = a * *pv + b * tv;
        }
    }
    Ok(())
}

/// Applies DropView and 3D occlusion to one frame. Ground-truth labels are
/// untouched. Draw order is fixed: the DropView coin (and view index), the
/// occluder count, then per occluder x, y, width, height, base elevation,
/// intensity. Occluders are world rectangles rendered into every view that
/// sees them.
pub fn augment(
    frame: &FrameRecord,
    rng: &mut ChaCha8Rng,
    spec: &AugmentationSpec,
    rig: &RigConfig,
    grid: &BevGrid,
) -> (FrameRecord, Vec<bool>) {
    let n = frame.views.len();
    let mut active = vec![true; n];
    if spec.dropview_prob > 0.0 {
        let u: f64 = rng.random_range(0.0..1.0);
        if u < spec.dropview_prob && n > 1 {
            let drop = rng.random_range(0..n);
            active[drop] = false;
        }
    }

    let mut out = frame.clone();
    if spec.occlusion_count_max > 0 {
        let count = rng.random_range(spec.occlusion_count_min..=spec.occlusion_count_max);
        let x_extent = grid.h_g as f64 * grid.cell_size;
        let y_extent = grid.w_g as f64 * grid.cell_size;
        for _ in 0..count {
            let x = grid.origin_x + rng.random_range(0.0..x_extent);
            let y = grid.origin_y + rng.random_range(0.0..y_extent);
            let w = rng.random_range(spec.occluder_w_range.0..=spec.occluder_w_range.1);
            let h = rng.random_range(spec.occluder_h_range.0..=spec.occluder_h_range.1);
            let z0 = rng.random_range(spec.occluder_z_range.0..=spec.occluder_z_range.1);
            let intensity =
                rng.random_range(spec.occluder_intensity_range.0..=spec.occluder_intensity_range.1);
            for (v, view) in out.views.iter_mut().enumerate() {
                if let Some(quad) = upright_rect_quad(&rig.cameras[v], x, y, w, h, z0) {
                    let (img_h, img_w) = (view.shape()[1], view.shape()[2]);
                    for c in 0..view.shape()[0] {
                        let base = c * img_h * img_w;
                        crate::synthworld::fill_convex_quad(
                            &mut view.data_mut()[base..base + img_h * img_w],
                            img_w,
                            img_h,
                            &quad,
                            intensity as f32,
                        );
                    }
                }
            }
        }
    }
    (out, active)
}

/// Teacher pseudo-labeling on the clean frame: all views active, no
/// augmentation, the configured post-processing.
pub fn make_pseudo_label(
    teacher: &TeacherState,
    net: &NetConfig,
    frame: &FrameRecord,
    tables: &[ProjectionTable],
    cfg: &AdaptConfig,
) -> Result<Vec<(usize, usize)>, TrainError> {
    let active = vec![true; frame.views.len()];
    let (map, _, _) = forward(&teacher.phi, net, &frame.views, tables, &active)?;
    let pp = PostprocessConfig {
        tau: cfg.tau,
        d_cells: cfg.d_cells,
        k_d: cfg.k_d,
    };
    Ok(to_pseudo_label(&extract(&map, &pp, cfg.method)))
}

/// One supervised domain term: augment, forward, Gaussian-target MSE (plus
/// the optional perspective term), backward. Returns the gradients and the
/// scalar loss.
struct DomainTermArgs<'a> {
    rig: &'a RigConfig,
    tables: &'a [ProjectionTable],
    aug: &'a AugmentationSpec,
    use_persp: bool,
    sigma_bev: f64,
    sigma_px: f64,
    ped_height: f64,
}

fn domain_term(
    theta: &ParameterSet,
    net: &NetConfig,
    grid: &BevGrid,
    frame: &FrameRecord,
    labels: &[(usize, usize)],
    args: &DomainTermArgs<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<(ParameterSet, f64), TrainError> {
    let (aug_frame, active) = augment(frame, rng, args.aug, args.rig, grid);
    let (map, aux_maps, cache) = forward(theta, net, &aug_frame.views, args.tables, &active)?;
    let target = gaussian_soft_target(labels, args.sigma_bev, grid)?;
    let (loss_main, grad_map) = mse_loss(&target, &map)?;
    if args.use_persp {
        let calibs: Vec<&crate::geometry::CameraCalibration> = active
            .iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .map(|(v, _)| &args.rig.cameras[v])
            .collect();
        let (loss_p, aux_grads) =
            perspective_loss(&aux_maps, &calibs, labels, grid, args.sigma_px, args.ped_height)?;
        let grads = backward(theta, net, &cache, &grad_map, Some(&aux_grads))?;
        Ok((grads, loss_main + loss_p))
    } else {
        let grads = backward(theta, net, &cache, &grad_map, None)?;
        Ok((grads, loss_main))
    }
}

/// Everything a training step needs besides the frames: the grid shared by
/// both domains, per-domain rigs and projection tables, and the optimizer
/// settings.
pub struct StepContext<'a> {
    pub net: &'a NetConfig,
    pub grid: &'a BevGrid,
    pub source_rig: &'a RigConfig,
    pub source_tables: &'a [ProjectionTable],
    pub target_rig: &'a RigConfig,
    pub target_tables: &'a [ProjectionTable],
    pub sgd: SgdConfig,
}

/// One self-training step: teacher pseudo-labels on the clean target frame,
/// one combined source + lambda*target gradient, one SGD update on the
/// student, then the EMA teacher update. With lambda = 0 the target term is
/// skipped entirely, so the parameter update matches a source-only step on
/// the same source stream bit for bit.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    theta: &mut ParameterSet,
    teacher: &mut TeacherState,
    ctx: &StepContext<'_>,
    source_frame: &FrameRecord,
    target_frame: &FrameRecord,
    cfg: &AdaptConfig,
    state: &mut SgdState,
    lr: f64,
    rng_src: &mut ChaCha8Rng,
    rng_tgt: &mut ChaCha8Rng,
) -> Result<StepRecord, TrainError> {
    let pseudo = make_pseudo_label(teacher, ctx.net, target_frame, ctx.target_tables, cfg)?;

    let src_labels = source_frame
        .gt_positions
        .as_ref()
        .ok_or(TrainError::MissingLabels {
            frame_id: source_frame.frame_id,
        })?;
    let src_args = DomainTermArgs {
        rig: ctx.source_rig,
        tables: ctx.source_tables,
        aug: &cfg.aug,
        use_persp: cfg.use_perspective_supervision,
        sigma_bev: cfg.sigma_bev,
        sigma_px: cfg.sigma_px,
        ped_height: cfg.ped_height,
    };
    let (mut grads, loss_src) =
        domain_term(theta, ctx.net, ctx.grid, source_frame, src_labels, &src_args, rng_src)?;

    let mut loss_tgt = 0.0;
    if cfg.lambda != 0.0 {
        let tgt_args = DomainTermArgs {
            rig: ctx.target_rig,
            tables: ctx.target_tables,
            ..src_args
        };
        let (tgt_grads, ltgt) =
            domain_term(theta, ctx.net, ctx.grid, target_frame, &pseudo, &tgt_args, rng_tgt)?;
        for ((_, g), (_, tg)) in grads.iter_mut().zip(tgt_grads.iter()) {
            g.add_scaled(tg, cfg.lambda as f32);
        }
        loss_tgt = ltgt;
    }

    sgd_step(theta, &grads, lr, &ctx.sgd, state)?;
    ema_update(&mut teacher.phi, theta, cfg.alpha)?;

    Ok(StepRecord {
        step: 0,
        epoch: 0,
        lr,
        loss_src,
        loss_tgt,
        target_frame_id: target_frame.frame_id,
        pseudo_cells: pseudo,
    })
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

fn fisher_yates(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Per-view projection tables for one dataset.
pub fn dataset_tables(ds: &Dataset, net: &NetConfig) -> Result<Vec<ProjectionTable>, TrainError> {
    let (h_f, w_f) = net.feature_shape(ds.rig.image_h, ds.rig.image_w)?;
    let scale = h_f as f64 / ds.rig.image_h as f64;
    ds.rig
        .cameras
        .iter()
        .map(|cam| Ok(build_projection_table(cam, &ds.grid, h_f, w_f, scale)?))
        .collect()
}

/// Mean clean-forward MSE against the soft targets over a frame list; the
/// early-stopping and checkpoint-selection signal.
pub fn held_out_loss(
    params: &ParameterSet,
    net: &NetConfig,
    frames: &[&FrameRecord],
    tables: &[ProjectionTable],
    grid: &BevGrid,
    sigma_bev: f64,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for frame in frames {
        let labels = frame.gt_positions.as_ref().ok_or(TrainError::MissingLabels {
            frame_id: frame.frame_id,
        })?;
        let active = vec![true; frame.views.len()];
        let (map, _, _) = forward(params, net, &frame.views, tables, &active)?;
        let target = gaussian_soft_target(labels, sigma_bev, grid)?;
        let (loss, _) = mse_loss(&target, &map)?;
        total += loss;
    }
    Ok(total / frames.len() as f64)
}

/// Result of supervised pre-training: the selected checkpoint plus the
/// final-epoch parameters and the held-out loss trace.
pub struct PretrainOutcome {
    /// Best checkpoint by held-out loss (the final parameters when the
    /// dataset has no test split).
    pub params: ParameterSet,
    pub final_params: ParameterSet,
    pub held_out: Vec<f64>,
}

/// Supervised training on one labeled dataset with augmentation: the
/// Baseline recipe (and the Oracle, when pointed at the target domain).
/// Runs the one-cycle schedule over the whole run and selects the checkpoint
/// with the best held-out loss.
pub fn pretrain_baseline(
    ds: &Dataset,
    net: &NetConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<PretrainOutcome, TrainError> {
    let train = ds.train_frames();
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let test = ds.test_frames();
    let tables = dataset_tables(ds, net)?;

    let mut theta = ParameterSet::init(net, seed);
    let mut state = SgdState::new(&theta);
    let sgd = SgdConfig::default();
    let total_steps = (cfg.epochs * train.len()).max(1);
    let args = DomainTermArgs {
        rig: &ds.rig,
        tables: &tables,
        aug: &cfg.aug,
        use_persp: cfg.use_perspective_supervision,
        sigma_bev: cfg.sigma_bev,
        sigma_px: cfg.sigma_px,
        ped_height: cfg.ped_height,
    };

    let mut best: Option<(f64, ParameterSet)> = None;
    let mut held_trace = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = derive_rng(seed, step_stream(Purpose::EpochShuffle, epoch as u64));
        let order = fisher_yates(train.len(), &mut shuffle_rng);
        for &k in &order {
            let frame = train[k];
            let labels = frame.gt_positions.as_ref().ok_or(TrainError::MissingLabels {
                frame_id: frame.frame_id,
            })?;
            let lr = one_cycle_lr(step, total_steps, cfg.max_lr)?;
            let mut rng = derive_rng(seed, step_stream(Purpose::SourceAugment, step as u64));
            let (grads, _) = domain_term(&theta, net, &ds.grid, frame, labels, &args, &mut rng)?;
            sgd_step(&mut theta, &grads, lr, &sgd, &mut state)?;
            step += 1;
        }
        if !test.is_empty() {
            let held = held_out_loss(&theta, net, &test, &tables, &ds.grid, cfg.sigma_bev)?;
            held_trace.push(held);
            if best.as_ref().map(|(b, _)| held < *b).unwrap_or(true) {
                best = Some((held, theta.clone()));
            }
        }
    }
    Ok(PretrainOutcome {
        params: best.map(|(_, p)| p).unwrap_or_else(|| theta.clone()),
        final_params: theta,
        held_out: held_trace,
    })
}

/// What [`adapt`] returns: the selected student checkpoint, the final
/// teacher, per-step records, and per-epoch student checkpoints.
pub struct AdaptOutcome {
    pub params: ParameterSet,
    pub teacher: TeacherState,
    pub steps: Vec<StepRecord>,
    pub epoch_checkpoints: Vec<ParameterSet>,
    /// Number of epochs actually run (early stopping may cut the run short).
    pub epochs_run: usize,
}

const EARLY_STOP_PATIENCE: usize = 2;

/// Mean-teacher self-training from a pre-trained baseline. Each epoch pairs
/// source and target training frames (independently shuffled, cycling the
/// shorter list), runs [`train_step`] per pair, and evaluates held-out
/// source loss for early stopping (patience 2) and checkpoint selection.
pub fn adapt(
    baseline: &ParameterSet,
    source: &Dataset,
    target: &Dataset,
    net: &NetConfig,
    cfg: &AdaptConfig,
    seed: u64,
) -> Result<AdaptOutcome, TrainError> {
    if source.grid != target.grid {
        return Err(TrainError::GridMismatch);
    }
    let src_train = source.train_frames();
    let tgt_train = target.train_frames();
    if src_train.is_empty() || tgt_train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let src_test = source.test_frames();
    let source_tables = dataset_tables(source, net)?;
    let target_tables = dataset_tables(target, net)?;
    let ctx = StepContext {
        net,
        grid: &source.grid,
        source_rig: &source.rig,
        source_tables: &source_tables,
        target_rig: &target.rig,
        target_tables: &target_tables,
        sgd: SgdConfig::default(),
    };

    let mut theta = baseline.clone();
    let mut teacher = TeacherState {
        phi: baseline.clone(),
    };
    let mut state = SgdState::new(&theta);
    let steps_per_epoch = src_train.len().max(tgt_train.len());
    let total_steps = (cfg.epochs * steps_per_epoch).max(1);

    let mut steps: Vec<StepRecord> = Vec::new();
    let mut epoch_checkpoints = Vec::new();
    let mut best: Option<(f64, ParameterSet)> = None;
    let mut stale_epochs = 0usize;
    let mut epochs_run = 0usize;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut src_shuffle =
            derive_rng(seed, step_stream(Purpose::EpochShuffle, 2 * epoch as u64));
        let src_order = fisher_yates(src_train.len(), &mut src_shuffle);
        let mut tgt_shuffle =
            derive_rng(seed, step_stream(Purpose::EpochShuffle, 2 * epoch as u64 + 1));
        let tgt_order = fisher_yates(tgt_train.len(), &mut tgt_shuffle);

        for s in 0..steps_per_epoch {
            let source_frame = src_train[src_order[s % src_order.len()]];
            let target_frame = tgt_train[tgt_order[s % tgt_order.len()]];
            let lr = one_cycle_lr(step, total_steps, cfg.max_lr)?;
            let mut rng_src = derive_rng(seed, step_stream(Purpose::SourceAugment, step as u64));
            let mut rng_tgt = derive_rng(seed, step_stream(Purpose::TargetAugment, step as u64));
            let mut rec = train_step(
                &mut theta,
                &mut teacher,
                &ctx,
                source_frame,
                target_frame,
                cfg,
                &mut state,
                lr,
                &mut rng_src,
                &mut rng_tgt,
            )?;
            rec.step = step;
            rec.epoch = epoch;
            steps.push(rec);
            step += 1;
        }
        epochs_run = epoch + 1;
        epoch_checkpoints.push(theta.clone());

        if !src_test.is_empty() {
            let held =
                held_out_loss(&theta, net, &src_test, &source_tables, &source.grid, cfg.sigma_bev)?;
            let improved = best.as_ref().map(|(b, _)| held < *b).unwrap_or(true);
            if improved {
                best = Some((held, theta.clone()));
                stale_epochs = 0;
            } else {
                stale_epochs += 1;
                if stale_epochs >= EARLY_STOP_PATIENCE {
                    break;
                }
            }
        }
    }

    Ok(AdaptOutcome {
        params: best.map(|(_, p)| p).unwrap_or(theta),
        teacher,
        steps,
        epoch_checkpoints,
        epochs_run,
    })
}

/// Source-only fine-tuning from a baseline with the exact loop geometry of
/// [`adapt`] minus the teacher and target machinery. With equal-length
/// source and target training splits, `adapt` with lambda = 0 reproduces
/// this trajectory bit for bit.
pub fn fine_tune(
    baseline: &ParameterSet,
    source: &Dataset,
    net: &NetConfig,
    cfg: &AdaptConfig,
    seed: u64,
) -> Result<ParameterSet, TrainError> {
    let src_train = source.train_frames();
    if src_train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let src_test = source.test_frames();
    let tables = dataset_tables(source, net)?;
    let args = DomainTermArgs {
        rig: &source.rig,
        tables: &tables,
        aug: &cfg.aug,
        use_persp: cfg.use_perspective_supervision,
        sigma_bev: cfg.sigma_bev,
        sigma_px: cfg.sigma_px,
        ped_height: cfg.ped_height,
    };

    let mut theta = baseline.clone();
    let mut state = SgdState::new(&theta);
    let sgd = SgdConfig::default();
    let steps_per_epoch = src_train.len();
    let total_steps = (cfg.epochs * steps_per_epoch).max(1);

    let mut best: Option<(f64, ParameterSet)> = None;
    let mut stale_epochs = 0usize;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut src_shuffle =
            derive_rng(seed, step_stream(Purpose::EpochShuffle, 2 * epoch as u64));
        let order = fisher_yates(src_train.len(), &mut src_shuffle);
        for &k in &order {
            let frame = src_train[k];
            let labels = frame.gt_positions.as_ref().ok_or(TrainError::MissingLabels {
                frame_id: frame.frame_id,
            })?;
            let lr = one_cycle_lr(step, total_steps, cfg.max_lr)?;
            let mut rng = derive_rng(seed, step_stream(Purpose::SourceAugment, step as u64));
            let (grads, _) = domain_term(&theta, net, &source.grid, frame, labels, &args, &mut rng)?;
            sgd_step(&mut theta, &grads, lr, &sgd, &mut state)?;
            step += 1;
        }
        if !src_test.is_empty() {
            let held = held_out_loss(&theta, net, &src_test, &tables, &source.grid, cfg.sigma_bev)?;
            let improved = best.as_ref().map(|(b, _)| held < *b).unwrap_or(true);
            if improved {
                best = Some((held, theta.clone()));
                stale_epochs = 0;
            } else {
                stale_epochs += 1;
                if stale_epochs >= EARLY_STOP_PATIENCE {
                    break;
                }
            }
        }
    }
    Ok(best.map(|(_, p)| p).unwrap_or(theta))
}
