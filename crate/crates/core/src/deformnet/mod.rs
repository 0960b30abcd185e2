//! Structure-aware neural deformation: a target encoder and a per-part MLP
//! conditioned on auto-decoded source codes predict box-parameter offsets.

mod ido;

pub use ido::{ido_distillation_loss, inner_deformation_optimization, IdoConfig, IdoResult};

use ndarray::{s, Array2, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{chamfer_points, PointCloud, SpatialIndex, Vec3};
use crate::partmodel::{
    fit_gradient, FitEval, FitOptions, DeformationParams, SourceShape, PARAMS_PER_PART,
};
use crate::tensornet::{Activation, EncoderCache, Gradients, Mlp, MlpCache, ParamId, ParamStore, SetEncoder};

pub const DEFAULT_ALPHA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeformConfig {
    pub point_widths: Vec<usize>,
    pub target_code_dim: usize,
    pub global_code_dim: usize,
    pub part_code_dim: usize,
    /// Hidden widths of the per-part MLP; its output is always 6.
    pub hidden: Vec<usize>,
    pub alpha: f64,
    pub code_init_std: f64,
    /// Start the output layer at zero so the initial deformation is identity.
    pub zero_init_output: bool,
}

impl Default for DeformConfig {
    fn default() -> Self {
        Self {
            point_widths: vec![64, 128, 256],
            target_code_dim: 256,
            global_code_dim: 256,
            part_code_dim: 32,
            hidden: vec![512, 256],
            alpha: DEFAULT_ALPHA,
            code_init_std: 1.0,
            zero_init_output: false,
        }
    }
}

impl DeformConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = self.point_widths.iter().chain(&self.hidden);
        if self.point_widths.is_empty()
            || widths.clone().any(|&w| w == 0)
            || self.target_code_dim == 0
            || self.global_code_dim == 0
            || self.part_code_dim == 0
        {
            return Err(Error::InvalidConfig("deformation widths must be positive".into()));
        }
        if !(self.alpha > 0.0) || !(self.code_init_std >= 0.0) {
            return Err(Error::InvalidConfig("alpha must be > 0 and code_init_std >= 0".into()));
        }
        Ok(())
    }
}

/// Outcome of deforming one source toward one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub source: usize,
    pub target: usize,
    pub raw_offset: DeformationParams,
    pub projected_offset: DeformationParams,
    pub pre_chamfer: f64,
    pub post_chamfer: f64,
    pub symmetry: f64,
    pub weight: f64,
}

/// Cached forward pass of the part MLP for one (source, target code) pair.
#[derive(Debug, Clone)]
pub struct PartForward {
    pub source: usize,
    pub offset: DeformationParams,
    mlp: MlpCache,
}

#[derive(Debug, Clone)]
pub struct DeformNet {
    pub store: ParamStore,
    pub encoder: SetEncoder,
    pub part_mlp: Mlp,
    global_codes: Vec<ParamId>,
    part_codes: Vec<Vec<ParamId>>,
    pub alpha: f64,
}

impl DeformNet {
    pub fn new(cfg: &DeformConfig, sources: &[SourceShape], rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let encoder = SetEncoder::new(&mut store, "enc", &cfg.point_widths, cfg.target_code_dim, rng);
        let mut widths = vec![cfg.global_code_dim + cfg.part_code_dim + cfg.target_code_dim];
        widths.extend_from_slice(&cfg.hidden);
        widths.push(PARAMS_PER_PART);
        let part_mlp = Mlp::new(&mut store, "mlp", &widths, Activation::Relu, Activation::None, rng);
        if cfg.zero_init_output {
            let last = part_mlp.layers.last().unwrap();
            store.value_mut(last.weight).iter_mut().for_each(|w| *w = 0.0);
        }
        let mut global_codes = Vec::with_capacity(sources.len());
        let mut part_codes = Vec::with_capacity(sources.len());
        for (k, s) in sources.iter().enumerate() {
            global_codes.push(store.add_code(format!("src{k}.glob"), cfg.global_code_dim, cfg.code_init_std, rng));
            part_codes.push(
                (0..s.part_count())
                    .map(|i| store.add_code(format!("src{k}.part{i}"), cfg.part_code_dim, cfg.code_init_std, rng))
                    .collect(),
            );
        }
        Ok(Self {
            store,
            encoder,
            part_mlp,
            global_codes,
            part_codes,
            alpha: cfg.alpha,
        })
    }

    pub fn num_sources(&self) -> usize {
        self.global_codes.len()
    }

    pub fn global_code_id(&self, source: usize) -> ParamId {
        self.global_codes[source]
    }

    pub fn part_code_id(&self, source: usize, part: usize) -> ParamId {
        self.part_codes[source][part]
    }

    fn check_source(&self, source: usize, shape: &SourceShape) -> Result<()> {
        let codes = self.part_codes.get(source).ok_or(Error::UnknownSource(source))?;
        if codes.len() != shape.part_count() {
            return Err(Error::DimensionMismatch {
                expected: codes.len(),
                got: shape.part_count(),
            });
        }
        Ok(())
    }

    pub fn encode_target(&self, points: &[Vec3]) -> Result<EncoderCache> {
        self.encoder.forward(&self.store, points)
    }

    /// Runs the part MLP on `[global, part_i, t]` rows, one per part.
    pub fn forward_parts(&self, source: usize, shape: &SourceShape, t_code: &[f64]) -> Result<PartForward> {
        self.check_source(source, shape)?;
        let g = self.store.value(self.global_codes[source]);
        let parts = &self.part_codes[source];
        let width = self.part_mlp.in_dim();
        if g.len() + self.store.value(parts[0]).len() + t_code.len() != width {
            return Err(Error::DimensionMismatch {
                expected: width,
                got: g.len() + self.store.value(parts[0]).len() + t_code.len(),
            });
        }
        let mut x = Array2::zeros((parts.len(), width));
        for (i, &pid) in parts.iter().enumerate() {
            let row: Vec<f64> = g
                .iter()
                .chain(self.store.value(pid))
                .chain(t_code)
                .copied()
                .collect();
            x.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
        }
        let mlp = self.part_mlp.forward(&self.store, x)?;
        let offset = DeformationParams(mlp.output().iter().copied().collect());
        Ok(PartForward { source, offset, mlp })
    }

    /// Backpropagates `d offset` through the part MLP into the codes and
    /// returns the gradient with respect to the target code.
    pub fn backward_parts(
        &self,
        fwd: &PartForward,
        d_offset: &[f64],
        grads: &mut Gradients,
    ) -> Result<Vec<f64>> {
        let n = fwd.offset.part_count();
        let dy = Array2::from_shape_vec((n, PARAMS_PER_PART), d_offset.to_vec()).map_err(|_| {
            Error::DimensionMismatch {
                expected: fwd.offset.len(),
                got: d_offset.len(),
            }
        })?;
        let dx = self.part_mlp.backward(&self.store, &fwd.mlp, dy, grads)?;
        let gid = self.global_codes[fwd.source];
        let ng = self.store.value(gid).len();
        let np = self.store.value(self.part_codes[fwd.source][0]).len();
        let dg = dx.slice(s![.., ..ng]).sum_axis(Axis(0));
        for (a, b) in grads.slot(&self.store, gid).iter_mut().zip(dg.iter()) {
            *a += b;
        }
        for (i, &pid) in self.part_codes[fwd.source].iter().enumerate() {
            let slot = grads.slot(&self.store, pid);
            for (a, b) in slot.iter_mut().zip(dx.slice(s![i, ng..ng + np]).iter()) {
                *a += b;
            }
        }
        Ok(dx.slice(s![.., ng + np..]).sum_axis(Axis(0)).to_vec())
    }

    pub fn backward_encoder(&self, cache: &EncoderCache, dt: &[f64], grads: &mut Gradients) -> Result<()> {
        self.encoder.backward(&self.store, cache, dt, grads)
    }

    pub fn predict_offset(&self, source: usize, shape: &SourceShape, target: &PointCloud) -> Result<DeformationParams> {
        let t = self.encode_target(target.points())?;
        Ok(self.forward_parts(source, shape, &t.output().to_vec())?.offset)
    }

    /// Predicts, optionally projects, and applies the offset.
    pub fn deform(
        &self,
        source: usize,
        shape: &SourceShape,
        target_id: usize,
        target: &PointCloud,
        use_projection: bool,
    ) -> Result<(PointCloud, FitReport)> {
        let raw = self.predict_offset(source, shape, target)?;
        let index = SpatialIndex::build(target);
        evaluate_offset(shape, source, target_id, &index, raw, self.alpha, use_projection)
    }
}

/// Applies `raw` (projected when requested) and fills a report against
/// `target`.
pub fn evaluate_offset(
    shape: &SourceShape,
    source: usize,
    target_id: usize,
    target: &SpatialIndex,
    raw: DeformationParams,
    alpha: f64,
    use_projection: bool,
) -> Result<(PointCloud, FitReport)> {
    shape.check_offset(&raw)?;
    let projected = if use_projection {
        DeformationParams(shape.constraint.project(&raw.0))
    } else {
        raw.clone()
    };
    let cloud = PointCloud::new(shape.deform_absolute(&shape.default_params.offset_by(&projected, alpha)))?;
    let report = FitReport {
        source,
        target: target_id,
        pre_chamfer: chamfer_points(shape.default_cloud().points(), target),
        post_chamfer: chamfer_points(cloud.points(), target),
        symmetry: crate::partmodel::symmetry_loss(&cloud),
        raw_offset: raw,
        projected_offset: projected,
        weight: 1.0,
    };
    Ok((cloud, report))
}

#[derive(Debug, Clone)]
pub struct DeformationLoss {
    pub loss: f64,
    pub fits: Vec<FitEval>,
    pub offsets: Vec<DeformationParams>,
}

/// Forward pass and fit evaluation of one candidate source.
#[derive(Debug, Clone)]
pub struct CandidateEval {
    pub forward: PartForward,
    pub fit: FitEval,
}

/// Predicts and scores every candidate of one target without touching
/// gradients.
pub fn evaluate_candidates(
    net: &DeformNet,
    shapes: &[SourceShape],
    target: &EncoderCache,
    target_index: &SpatialIndex,
    sources: &[usize],
    opts: FitOptions,
) -> Result<Vec<CandidateEval>> {
    let t = target.output().to_vec();
    sources
        .iter()
        .map(|&src| {
            let shape = shapes.get(src).ok_or(Error::UnknownSource(src))?;
            let forward = net.forward_parts(src, shape, &t)?;
            let fit = fit_gradient(shape, &forward.offset, net.alpha, target_index, opts)?;
            Ok(CandidateEval { forward, fit })
        })
        .collect()
}

/// Backpropagates per-candidate offset gradients through the part MLP,
/// the codes and the target encoder.
pub fn backward_candidates(
    net: &DeformNet,
    target: &EncoderCache,
    evals: &[CandidateEval],
    d_offsets: &[Vec<f64>],
    grads: &mut Gradients,
) -> Result<()> {
    if evals.len() != d_offsets.len() {
        return Err(Error::DimensionMismatch {
            expected: evals.len(),
            got: d_offsets.len(),
        });
    }
    let mut dt = vec![0.0; net.encoder.output_dim()];
    for (e, d) in evals.iter().zip(d_offsets) {
        if d.iter().all(|v| *v == 0.0) {
            continue;
        }
        let dti = net.backward_parts(&e.forward, d, grads)?;
        dt.iter_mut().zip(&dti).for_each(|(a, b)| *a += b);
    }
    net.backward_encoder(target, &dt, grads)
}

/// `Σ_k w_k · (L_fit + λ·L_symm)` over the candidate sources of one target,
/// with gradients accumulated into `grads`. Weights are constants.
#[allow(clippy::too_many_arguments)]
pub fn deformation_loss(
    net: &DeformNet,
    shapes: &[SourceShape],
    target: &EncoderCache,
    target_index: &SpatialIndex,
    sources: &[usize],
    weights: &[f64],
    opts: FitOptions,
    grads: &mut Gradients,
) -> Result<DeformationLoss> {
    if sources.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            expected: sources.len(),
            got: weights.len(),
        });
    }
    let evals = evaluate_candidates(net, shapes, target, target_index, sources, opts)?;
    let loss = evals.iter().zip(weights).map(|(e, w)| w * e.fit.loss).sum();
    let d: Vec<Vec<f64>> = evals
        .iter()
        .zip(weights)
        .map(|(e, &w)| e.fit.grad.iter().map(|g| w * g).collect())
        .collect();
    backward_candidates(net, target, &evals, &d, grads)?;
    Ok(DeformationLoss {
        loss,
        offsets: evals.iter().map(|e| e.forward.offset.clone()).collect(),
        fits: evals.into_iter().map(|e| e.fit).collect(),
    })
}
