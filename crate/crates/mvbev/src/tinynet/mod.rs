//! The detector: per-view conv feature extractor, BEV warp, view-average
//! aggregation, a dilated-conv BEV head with logistic output, an auxiliary
//! per-view head/foot regressor, and exact manual backprop through it all.

pub mod checkpoint;
pub mod conv;
pub mod loss;
pub mod optim;

use crate::geometry::{warp_backward, warp_to_bev, GeometryError, ProjectionTable};
use crate::rng::{derive_rng, Purpose};
use crate::tensor::Tensor;
use conv::{conv2d, conv2d_backward, logistic, relu, relu_backward, ConvSpec};
use rand::RngExt;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("forward needs at least one active view")]
    NoActiveViews,
    #[error("position ({0}, {1}) outside grid {2}x{3}", .cell.0, .cell.1, .grid.0, .grid.1)]
    PositionOutOfGrid {
        cell: (usize, usize),
        grid: (usize, usize),
    },
    #[error("cache mismatch: {0}")]
    CacheMismatch(String),
    #[error("scheduler step {step} out of range [0, {total})")]
    StepOutOfRange { step: usize, total: usize },
    #[error("invalid net config: {0}")]
    InvalidConfig(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint {file}: {reason}")]
    CorruptCheckpoint { file: PathBuf, reason: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Probabilistic occupancy map: `h_g x w_g`, logistic outputs in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl OccupancyMap {
    pub fn zeros(h: usize, w: usize) -> Self {
        OccupancyMap {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.w + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.w + j] = v;
    }
}

/// Architecture knobs. The layer plan is fixed: two stride-2 3x3 extractor
/// convs (so features are at 1/4 image resolution), three 3x3 BEV convs with
/// dilations 1, 2, 4, and a two-conv auxiliary head emitting (head, foot)
/// channels per view.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct NetConfig {
    pub c_feat: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { c_feat: 16 }
    }
}

pub const C_IMG: usize = 3;
pub const DOWNSAMPLE: usize = 4;
pub const BEV_DILATIONS: [usize; 3] = [1, 2, 4];
/// logit(0.05), the occupancy prior the output bias starts at.
pub const OUTPUT_BIAS_INIT: f32 = -2.944_439;
/// Images are zero-centered before the extractor; all-positive inputs give
/// first-layer weight gradients a shared sign and stall early training.
pub const INPUT_CENTER: f32 = 0.5;

impl NetConfig {
    /// Feature-map shape for a given image size; images must be divisible by
    /// the extractor downsampling factor.
    pub fn feature_shape(&self, image_h: usize, image_w: usize) -> Result<(usize, usize), NetError> {
        if !image_h.is_multiple_of(DOWNSAMPLE) || !image_w.is_multiple_of(DOWNSAMPLE) {
            return Err(NetError::InvalidConfig(format!(
                "image size {image_h}x{image_w} not divisible by {DOWNSAMPLE}"
            )));
        }
        Ok((image_h / DOWNSAMPLE, image_w / DOWNSAMPLE))
    }

    fn layer_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let c = self.c_feat;
        vec![
            ("ext1.weight", vec![c, C_IMG, 3, 3]),
            ("ext1.bias", vec![c]),
            ("ext2.weight", vec![c, c, 3, 3]),
            ("ext2.bias", vec![c]),
            ("bev1.weight", vec![c, c, 3, 3]),
            ("bev1.bias", vec![c]),
            ("bev2.weight", vec![c, c, 3, 3]),
            ("bev2.bias", vec![c]),
            ("bev3.weight", vec![1, c, 3, 3]),
            ("bev3.bias", vec![1]),
            ("aux1.weight", vec![c, c, 3, 3]),
            ("aux1.bias", vec![c]),
            ("aux2.weight", vec![2, c, 3, 3]),
            ("aux2.bias", vec![2]),
        ]
    }
}

/// Every learnable tensor of the detector, in a fixed named order. The same
/// container carries parameters, gradients, and optimizer velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    entries: Vec<(String, Tensor)>,
}

impl ParameterSet {
    /// Kaiming-uniform fan-in init for conv weights, zero biases, seeded.
    /// The occupancy-output bias starts at logit(0.05): pedestrians cover a
    /// small fraction of the grid, and starting the map near that prior
    /// keeps the first optimizer steps from slamming the logistic into its
    /// saturated zero region, where MSE gradients vanish.
    pub fn init(cfg: &NetConfig, seed: u64) -> Self {
        let mut rng = derive_rng(seed, Purpose::WeightInit as u64);
        let entries = cfg
            .layer_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let tensor = if shape.len() == 4 {
                    let fan_in: usize = shape[1] * shape[2] * shape[3];
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let n: usize = shape.iter().product();
                    Tensor::from_vec(
                        &shape,
                        (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect(),
                    )
                } else if name == "bev3.bias" {
                    Tensor::from_vec(&shape, vec![OUTPUT_BIAS_INIT; 1])
                } else {
                    Tensor::zeros(&shape)
                };
                (name.to_string(), tensor)
            })
            .collect();
        ParameterSet { entries }
    }

    pub fn zeros(cfg: &NetConfig) -> Self {
        ParameterSet {
            entries: cfg
                .layer_shapes()
                .into_iter()
                .map(|(name, shape)| (name.to_string(), Tensor::zeros(&shape)))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.zeros_like()))
                .collect(),
        }
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        ParameterSet { entries }
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self
            .entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), &mut *t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn same_layout(&self, other: &ParameterSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((an, at), (bn, bt))| an == bn && at.shape() == bt.shape())
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }
}

/// Everything backward needs to replay the forward pass exactly.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Active view indices, ascending.
    pub active_views: Vec<usize>,
    view_inputs: Vec<Tensor>,
    z1: Vec<Tensor>,
    a1: Vec<Tensor>,
    z2: Vec<Tensor>,
    feat: Vec<Tensor>,
    za1: Vec<Tensor>,
    aa1: Vec<Tensor>,
    tables: Vec<ProjectionTable>,
    mean_bev: Tensor,
    zb1: Tensor,
    ab1: Tensor,
    zb2: Tensor,
    ab2: Tensor,
    output: OccupancyMap,
}

fn expect_shape(t: &Tensor, shape: &[usize], what: &str) -> Result<(), NetError> {
    if t.shape() != shape {
        return Err(NetError::ShapeMismatch {
            expected: format!("{what} {shape:?}"),
            got: format!("{:?}", t.shape()),
        });
    }
    Ok(())
}

/// Runs the detector on one multi-view sample.
///
/// Per active view: extractor -> features -> BEV warp; the per-view BEV maps
/// are averaged elementwise over active views only, then refined by the
/// dilated head and squashed by the logistic. The per-cell average sums its
/// inputs in value-sorted order, so the output is invariant to permuting
/// (view, table) pairs. Returns the occupancy map, one `(2, h_f, w_f)`
/// (head, foot) auxiliary map per active view, and the backward cache.
pub fn forward(
    params: &ParameterSet,
    cfg: &NetConfig,
    views: &[Tensor],
    tables: &[ProjectionTable],
    active: &[bool],
) -> Result<(OccupancyMap, Vec<Tensor>, ForwardCache), NetError> {
    if views.len() != tables.len() || views.len() != active.len() {
        return Err(NetError::ShapeMismatch {
            expected: format!("{} views, tables and mask entries", views.len()),
            got: format!("{} tables, {} mask entries", tables.len(), active.len()),
        });
    }
    let active_views: Vec<usize> = (0..views.len()).filter(|&v| active[v]).collect();
    if active_views.is_empty() {
        return Err(NetError::NoActiveViews);
    }
    let (image_h, image_w) = {
        let s = views[active_views[0]].shape();
        if s.len() != 3 || s[0] != C_IMG {
            return Err(NetError::ShapeMismatch {
                expected: format!("({C_IMG}, H, W) view"),
                got: format!("{s:?}"),
            });
        }
        (s[1], s[2])
    };
    let (h_f, w_f) = cfg.feature_shape(image_h, image_w)?;
    let (h_g, w_g) = (tables[active_views[0]].h_g, tables[active_views[0]].w_g);

    let c = cfg.c_feat;
    let mut cache_views = Vec::new();
    let mut z1s = Vec::new();
    let mut a1s = Vec::new();
    let mut z2s = Vec::new();
    let mut feats = Vec::new();
    let mut za1s = Vec::new();
    let mut aa1s = Vec::new();
    let mut cache_tables = Vec::new();
    let mut aux_maps = Vec::new();
    let mut bev_maps = Vec::new();

    for &v in &active_views {
        let view = &views[v];
        expect_shape(view, &[C_IMG, image_h, image_w], "view")?;
        let table = &tables[v];
        if table.h_f != h_f || table.w_f != w_f || table.h_g != h_g || table.w_g != w_g {
            return Err(NetError::ShapeMismatch {
                expected: format!("table ({h_f}, {w_f}) -> ({h_g}, {w_g})"),
                got: format!(
                    "table ({}, {}) -> ({}, {})",
                    table.h_f, table.w_f, table.h_g, table.w_g
                ),
            });
        }

        let mut centered = view.clone();
        for v in centered.data_mut().iter_mut() {
            *v -= INPUT_CENTER;
        }
        let z1 = conv2d(&centered, params.get("ext1.weight"), params.get("ext1.bias"), &ConvSpec::strided());
        let a1 = relu(&z1);
        let z2 = conv2d(&a1, params.get("ext2.weight"), params.get("ext2.bias"), &ConvSpec::strided());
        let feat = relu(&z2);
        expect_shape(&feat, &[c, h_f, w_f], "features")?;

        let za1 = conv2d(&feat, params.get("aux1.weight"), params.get("aux1.bias"), &ConvSpec::unit());
        let aa1 = relu(&za1);
        let aux = conv2d(&aa1, params.get("aux2.weight"), params.get("aux2.bias"), &ConvSpec::unit());

        bev_maps.push(warp_to_bev(&feat, table)?);

        cache_views.push(centered);
        z1s.push(z1);
        a1s.push(a1);
        z2s.push(z2);
        feats.push(feat);
        za1s.push(za1);
        aa1s.push(aa1);
        aux_maps.push(aux);
        cache_tables.push(table.clone());
    }

    // Value-sorted per-cell reduction: permutation-invariant to the bit.
    let n_active = active_views.len();
    let inv_n = 1.0f32 / n_active as f32;
    let mut mean_bev = Tensor::zeros(&[c, h_g, w_g]);
    let cell_count = c * h_g * w_g;
    let mut vals = vec![0.0f32; n_active];
    for idx in 0..cell_count {
        for (k, m) in bev_maps.iter().enumerate() {
            vals[k] = m.data()[idx];
        }
        vals.sort_by(|a, b| a.total_cmp(b));
        let sum: f32 = vals.iter().sum();
        mean_bev.data_mut()[idx] = sum * inv_n;
    }

    let zb1 = conv2d(&mean_bev, params.get("bev1.weight"), params.get("bev1.bias"), &ConvSpec::dilated(BEV_DILATIONS[0]));
    let ab1 = relu(&zb1);
    let zb2 = conv2d(&ab1, params.get("bev2.weight"), params.get("bev2.bias"), &ConvSpec::dilated(BEV_DILATIONS[1]));
    let ab2 = relu(&zb2);
    let zb3 = conv2d(&ab2, params.get("bev3.weight"), params.get("bev3.bias"), &ConvSpec::dilated(BEV_DILATIONS[2]));

    let mut output = OccupancyMap::zeros(h_g, w_g);
    for (o, &z) in output.data.iter_mut().zip(zb3.data()) {
        *o = logistic(z);
    }

    let cache = ForwardCache {
        active_views,
        view_inputs: cache_views,
        z1: z1s,
        a1: a1s,
        z2: z2s,
        feat: feats,
        za1: za1s,
        aa1: aa1s,
        tables: cache_tables,
        mean_bev,
        zb1,
        ab1,
        zb2,
        ab2,
        output: output.clone(),
    };
    Ok((output, aux_maps, cache))
}

/// Exact reverse-mode gradients for the whole detector, aligned with the
/// [`ParameterSet`] layout. `grad_output` is dL/d(occupancy map);
/// `aux_grads`, when present, carries dL/d(aux map) per active view.
pub fn backward(
    params: &ParameterSet,
    cfg: &NetConfig,
    cache: &ForwardCache,
    grad_output: &OccupancyMap,
    aux_grads: Option<&[Tensor]>,
) -> Result<ParameterSet, NetError> {
    let (h_g, w_g) = (cache.output.h, cache.output.w);
    if grad_output.h != h_g || grad_output.w != w_g {
        return Err(NetError::CacheMismatch(format!(
            "grad shape {}x{} != cached output {}x{}",
            grad_output.h, grad_output.w, h_g, w_g
        )));
    }
    if let Some(ag) = aux_grads {
        if ag.len() != cache.active_views.len() {
            return Err(NetError::CacheMismatch(format!(
                "{} aux grads for {} active views",
                ag.len(),
                cache.active_views.len()
            )));
        }
    }

    let mut grads = ParameterSet::zeros(cfg);
    if !grads.same_layout(params) {
        return Err(NetError::CacheMismatch(
            "config does not match parameter layout".to_string(),
        ));
    }

    // Logistic: dL/dz = dL/dy * y * (1 - y).
    let mut grad_zb3 = Tensor::zeros(&[1, h_g, w_g]);
    for (g, (&go, &y)) in grad_zb3
        .data_mut()
        .iter_mut()
        .zip(grad_output.data.iter().zip(cache.output.data.iter()))
    {
        *g = go * y * (1.0 - y);
    }

    let (g_ab2, gw3, gb3) = conv2d_backward(&cache.ab2, params.get("bev3.weight"), &ConvSpec::dilated(BEV_DILATIONS[2]), &grad_zb3);
    grads.get_mut("bev3.weight").add_assign(&gw3);
    grads.get_mut("bev3.bias").add_assign(&gb3);
    let g_zb2 = relu_backward(&cache.zb2, &g_ab2);
    let (g_ab1, gw2, gb2) = conv2d_backward(&cache.ab1, params.get("bev2.weight"), &ConvSpec::dilated(BEV_DILATIONS[1]), &g_zb2);
    grads.get_mut("bev2.weight").add_assign(&gw2);
    grads.get_mut("bev2.bias").add_assign(&gb2);
    let g_zb1 = relu_backward(&cache.zb1, &g_ab1);
    let (mut g_mean, gw1, gb1) = conv2d_backward(&cache.mean_bev, params.get("bev1.weight"), &ConvSpec::dilated(BEV_DILATIONS[0]), &g_zb1);
    grads.get_mut("bev1.weight").add_assign(&gw1);
    grads.get_mut("bev1.bias").add_assign(&gb1);

    // Through the view average: each active view receives grad / n_active.
    g_mean.scale(1.0 / cache.active_views.len() as f32);

    for (k, _) in cache.active_views.iter().enumerate() {
        let mut g_feat = warp_backward(&g_mean, &cache.tables[k])?;

        if let Some(ag) = aux_grads {
            expect_shape(&ag[k], &[2, cache.feat[k].shape()[1], cache.feat[k].shape()[2]], "aux grad")
                .map_err(|e| NetError::CacheMismatch(e.to_string()))?;
            let (g_aa1, gwa2, gba2) = conv2d_backward(&cache.aa1[k], params.get("aux2.weight"), &ConvSpec::unit(), &ag[k]);
            grads.get_mut("aux2.weight").add_assign(&gwa2);
            grads.get_mut("aux2.bias").add_assign(&gba2);
            let g_za1 = relu_backward(&cache.za1[k], &g_aa1);
            let (g_feat_aux, gwa1, gba1) = conv2d_backward(&cache.feat[k], params.get("aux1.weight"), &ConvSpec::unit(), &g_za1);
            grads.get_mut("aux1.weight").add_assign(&gwa1);
            grads.get_mut("aux1.bias").add_assign(&gba1);
            g_feat.add_assign(&g_feat_aux);
        }

        let g_z2 = relu_backward(&cache.z2[k], &g_feat);
        let (g_a1, gwe2, gbe2) = conv2d_backward(&cache.a1[k], params.get("ext2.weight"), &ConvSpec::strided(), &g_z2);
        grads.get_mut("ext2.weight").add_assign(&gwe2);
        grads.get_mut("ext2.bias").add_assign(&gbe2);
        let g_z1 = relu_backward(&cache.z1[k], &g_a1);
        let (_, gwe1, gbe1) = conv2d_backward(&cache.view_inputs[k], params.get("ext1.weight"), &ConvSpec::strided(), &g_z1);
        grads.get_mut("ext1.weight").add_assign(&gwe1);
        grads.get_mut("ext1.bias").add_assign(&gbe1);
    }

    Ok(grads)
}
