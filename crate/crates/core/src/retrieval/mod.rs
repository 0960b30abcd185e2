//! Deformation-aware retrieval space: target encoder, per-source codes with a
//! learned diagonal metric, soft candidate sampling, and the embedding loss
//! that aligns retrieval probabilities with post-fit distances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::partmodel::SourceShape;
use crate::tensornet::{EncoderCache, Gradients, ParamId, ParamStore, SetEncoder};

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_SIGMA0: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Per-point MLP widths of the target encoder.
    pub point_widths: Vec<usize>,
    pub code_dim: usize,
    /// Initial per-source σ_k (stored through an inverse softplus).
    pub sigma_k_init: f64,
    /// Initial diagonal metric entry (stored through an inverse sigmoid).
    pub variance_init: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            point_widths: vec![64, 128, 256],
            code_dim: 256,
            sigma_k_init: 1.0,
            variance_init: 0.5,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.point_widths.is_empty() || self.point_widths.contains(&0) || self.code_dim == 0 {
            return Err(Error::InvalidConfig("retrieval widths must be positive".into()));
        }
        if !(self.sigma_k_init > 0.0) || !(self.variance_init > 0.0 && self.variance_init < 1.0) {
            return Err(Error::InvalidConfig(
                "sigma_k_init must be > 0 and variance_init in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    Biased,
    Uniform,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn inv_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[derive(Debug, Clone)]
pub struct RetrievalSpace {
    pub store: ParamStore,
    pub encoder: SetEncoder,
    variance_logits: Vec<ParamId>,
    sigma_logits: Vec<ParamId>,
    /// Encoder outputs on each source's default cloud, refreshed explicitly.
    source_codes: Vec<Vec<f64>>,
}

impl RetrievalSpace {
    pub fn new(cfg: &RetrievalConfig, sources: &[SourceShape], rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let encoder = SetEncoder::new(&mut store, "enc", &cfg.point_widths, cfg.code_dim, rng);
        let v0 = (cfg.variance_init / (1.0 - cfg.variance_init)).ln();
        let s0 = inv_softplus(cfg.sigma_k_init);
        let mut variance_logits = Vec::with_capacity(sources.len());
        let mut sigma_logits = Vec::with_capacity(sources.len());
        for k in 0..sources.len() {
            variance_logits.push(store.add(format!("src{k}.var"), vec![cfg.code_dim], vec![v0; cfg.code_dim]));
            sigma_logits.push(store.add(format!("src{k}.sigma"), vec![1], vec![s0]));
        }
        let mut space = Self {
            store,
            encoder,
            variance_logits,
            sigma_logits,
            source_codes: Vec::new(),
        };
        space.refresh_source_codes(sources)?;
        Ok(space)
    }

    pub fn num_sources(&self) -> usize {
        self.variance_logits.len()
    }

    pub fn dim(&self) -> usize {
        self.encoder.output_dim()
    }

    /// Recomputes every `s_R` from the current encoder.
    pub fn refresh_source_codes(&mut self, sources: &[SourceShape]) -> Result<()> {
        if sources.len() != self.num_sources() {
            return Err(Error::DimensionMismatch {
                expected: self.num_sources(),
                got: sources.len(),
            });
        }
        let codes = sources
            .par_iter()
            .map(|s| self.encoder.encode(&self.store, s.default_cloud().points()))
            .collect::<Result<Vec<_>>>()?;
        self.source_codes = codes;
        Ok(())
    }

    fn check_source(&self, k: usize) -> Result<()> {
        if k < self.num_sources() {
            Ok(())
        } else {
            Err(Error::UnknownSource(k))
        }
    }

    pub fn source_code(&self, k: usize) -> Result<&[f64]> {
        self.check_source(k)?;
        Ok(&self.source_codes[k])
    }

    /// Replaces a cached source code (used by tests and checkpoint restore).
    pub fn set_source_code(&mut self, k: usize, code: Vec<f64>) -> Result<()> {
        self.check_source(k)?;
        if code.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: code.len(),
            });
        }
        self.source_codes[k] = code;
        Ok(())
    }

    /// Diagonal metric `sigmoid(logits)` of source `k`.
    pub fn variance(&self, k: usize) -> Result<Vec<f64>> {
        self.check_source(k)?;
        Ok(self.store.value(self.variance_logits[k]).iter().map(|&l| sigmoid(l)).collect())
    }

    pub fn variance_logits_id(&self, k: usize) -> ParamId {
        self.variance_logits[k]
    }

    pub fn sigma_logit_id(&self, k: usize) -> ParamId {
        self.sigma_logits[k]
    }

    /// Learned σ_k of source `k`.
    pub fn sigma(&self, k: usize) -> Result<f64> {
        self.check_source(k)?;
        Ok(softplus(self.store.value(self.sigma_logits[k])[0]))
    }

    pub fn encode_target(&self, target: &PointCloud) -> Result<Vec<f64>> {
        self.encoder.encode(&self.store, target.points())
    }

    /// Squared weighted distance `(s_R − t)ᵀ diag(v) (s_R − t)`.
    pub fn distance2_to_code(&self, k: usize, t_code: &[f64]) -> Result<f64> {
        self.check_source(k)?;
        if t_code.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: t_code.len(),
            });
        }
        let s = &self.source_codes[k];
        let logits = self.store.value(self.variance_logits[k]);
        Ok(s.iter()
            .zip(t_code)
            .zip(logits)
            .map(|((s, t), &l)| sigmoid(l) * (s - t) * (s - t))
            .sum())
    }

    pub fn distance_to_code(&self, k: usize, t_code: &[f64]) -> Result<f64> {
        Ok(self.distance2_to_code(k, t_code)?.sqrt())
    }

    pub fn distance(&self, k: usize, target: &PointCloud) -> Result<f64> {
        self.distance_to_code(k, &self.encode_target(target)?)
    }

    /// Distances from every source to the target code.
    pub fn all_distances(&self, t_code: &[f64]) -> Result<Vec<f64>> {
        (0..self.num_sources()).map(|k| self.distance_to_code(k, t_code)).collect()
    }

    /// Draws `k` candidates for `target` with probabilities under `sigma0`.
    pub fn sample_candidates(
        &self,
        target_id: usize,
        target: &PointCloud,
        k: usize,
        mode: SamplingMode,
        sigma0: f64,
        seed: u64,
    ) -> Result<CandidateSet> {
        let d = self.all_distances(&self.encode_target(target)?)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_candidates(target_id, &d, sigma0, k, mode, &mut rng)
    }
}

/// `p_k ∝ exp(−d_k² / σ_k²)`, normalized with each candidate's own σ.
pub fn soft_probabilities(distances: &[f64], sigmas: &[f64]) -> Result<Vec<f64>> {
    if distances.len() != sigmas.len() {
        return Err(Error::DimensionMismatch {
            expected: distances.len(),
            got: sigmas.len(),
        });
    }
    if distances.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    if let Some(s) = sigmas.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
        return Err(Error::Numerical(format!("non-positive sigma {s}")));
    }
    let logits: Vec<f64> = distances
        .iter()
        .zip(sigmas)
        .map(|(d, s)| -(d * d) / (s * s))
        .collect();
    softmax(&logits)
}

fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::Numerical("non-finite logits".into()));
    }
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// `k` distinct indices drawn sequentially, renormalizing after each draw.
pub fn sample_without_replacement<R: Rng + ?Sized>(probs: &[f64], k: usize, rng: &mut R) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..probs.len()).collect();
    let mut out = Vec::with_capacity(k);
    while out.len() < k && !remaining.is_empty() {
        let total: f64 = remaining.iter().map(|&i| probs[i]).sum();
        let pos = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = None;
            for (pos, &i) in remaining.iter().enumerate() {
                u -= probs[i];
                if u < 0.0 {
                    pick = Some(pos);
                    break;
                }
            }
            // rounding can leave u marginally positive: take the last live entry
            pick.unwrap_or_else(|| remaining.iter().rposition(|&i| probs[i] > 0.0).unwrap())
        } else {
            rng.gen_range(0..remaining.len())
        };
        out.push(remaining.remove(pos));
    }
    out
}

/// Candidate sources of one target and their retrieval probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub target: usize,
    pub sources: Vec<usize>,
    pub distances: Vec<f64>,
    /// Softmax of the candidates' distances under σ₀, summing to 1.
    pub probabilities: Vec<f64>,
}

impl CandidateSet {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("candidate set serializes")
    }
}

/// Samples `k` distinct candidates from `P_R(· | d, σ₀)` or uniformly.
pub fn sample_candidates(
    target: usize,
    distances: &[f64],
    sigma0: f64,
    k: usize,
    mode: SamplingMode,
    rng: &mut ChaCha8Rng,
) -> Result<CandidateSet> {
    if distances.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    if k > distances.len() || k == 0 {
        return Err(Error::DatabaseTooSmall {
            requested: k,
            available: distances.len(),
        });
    }
    let sigmas = vec![sigma0; distances.len()];
    let probs = soft_probabilities(distances, &sigmas)?;
    let sources = match mode {
        SamplingMode::Biased => sample_without_replacement(&probs, k, rng),
        SamplingMode::Uniform => sample_without_replacement(&vec![1.0; distances.len()], k, rng),
    };
    let cand_d: Vec<f64> = sources.iter().map(|&s| distances[s]).collect();
    let probabilities = soft_probabilities(&cand_d, &sigmas[..k])?;
    Ok(CandidateSet {
        target,
        sources,
        distances: cand_d,
        probabilities,
    })
}

#[derive(Debug, Clone)]
pub struct EmbeddingLoss {
    pub loss: f64,
    pub p_retrieval: Vec<f64>,
    pub p_fit: Vec<f64>,
    /// Gradient of the loss with respect to each candidate's `s_R`.
    pub d_source_codes: Vec<Vec<f64>>,
}

/// `Σ_k |p(s_k; d_R, σ₀) − p(s_k; d_fit, σ_k)|` over the candidates, with
/// gradients accumulated into `grads` for the encoder (through the target
/// code), the candidates' metric logits and their σ_k logits. `source_codes`
/// are the candidates' `s_R`; their gradients are returned so the caller can
/// backpropagate them through the encoder once per source.
pub fn embedding_loss(
    space: &RetrievalSpace,
    target: &EncoderCache,
    sources: &[usize],
    source_codes: &[&[f64]],
    fit_distances: &[f64],
    sigma0: f64,
    grads: &mut Gradients,
) -> Result<EmbeddingLoss> {
    for n in [fit_distances.len(), source_codes.len()] {
        if n != sources.len() {
            return Err(Error::DimensionMismatch {
                expected: sources.len(),
                got: n,
            });
        }
    }
    let t: Vec<f64> = target.output().to_vec();
    if let Some(c) = source_codes.iter().find(|c| c.len() != t.len()) {
        return Err(Error::DimensionMismatch {
            expected: t.len(),
            got: c.len(),
        });
    }
    let inv_s0 = 1.0 / (sigma0 * sigma0);
    let d2 = sources
        .iter()
        .zip(source_codes)
        .map(|(&k, s)| {
            space.check_source(k)?;
            let logits = space.store.value(space.variance_logits[k]);
            Ok(s.iter().zip(&t).zip(logits).map(|((s, t), &l)| sigmoid(l) * (s - t) * (s - t)).sum())
        })
        .collect::<Result<Vec<f64>>>()?;
    let p_r = softmax(&d2.iter().map(|d| -d * inv_s0).collect::<Vec<_>>())?;
    let sig = sources.iter().map(|&k| space.sigma(k)).collect::<Result<Vec<_>>>()?;
    let p_f = soft_probabilities(fit_distances, &sig)?;

    let sign: Vec<f64> = p_r
        .iter()
        .zip(&p_f)
        .map(|(a, b)| match a.partial_cmp(b) {
            Some(std::cmp::Ordering::Greater) => 1.0,
            Some(std::cmp::Ordering::Less) => -1.0,
            _ => 0.0,
        })
        .collect();
    let loss: f64 = p_r.iter().zip(&p_f).map(|(a, b)| (a - b).abs()).sum();

    // softmax backward: dz_j = p_j (g_j − Σ p g)
    let mean_r: f64 = p_r.iter().zip(&sign).map(|(p, g)| p * g).sum();
    let mean_f: f64 = p_f.iter().zip(&sign).map(|(p, g)| -p * g).sum();
    let mut dt = vec![0.0; t.len()];
    let mut d_source = vec![vec![0.0; t.len()]; sources.len()];
    for (c, &k) in sources.iter().enumerate() {
        let dz = p_r[c] * (sign[c] - mean_r);
        let d_d2 = -dz * inv_s0;
        if d_d2 != 0.0 {
            let s = source_codes[c];
            let lid = space.variance_logits[k];
            let logits = space.store.value(lid).to_vec();
            let gl = grads.slot(&space.store, lid);
            for i in 0..t.len() {
                let u = s[i] - t[i];
                let v = sigmoid(logits[i]);
                gl[i] += d_d2 * u * u * v * (1.0 - v);
                dt[i] -= d_d2 * 2.0 * v * u;
                d_source[c][i] += d_d2 * 2.0 * v * u;
            }
        }
        let dy = p_f[c] * (-sign[c] - mean_f);
        if dy != 0.0 {
            let f = fit_distances[c];
            let sid = space.sigma_logits[k];
            let rho = space.store.value(sid)[0];
            let dsig = 2.0 * f * f / sig[c].powi(3);
            grads.slot(&space.store, sid)[0] += dy * dsig * sigmoid(rho);
        }
    }
    space.encoder.backward(&space.store, target, &dt, grads)?;
    Ok(EmbeddingLoss {
        loss,
        p_retrieval: p_r,
        p_fit: p_f,
        d_source_codes: d_source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partmodel::test_shapes::three_part_shape;
    use crate::testutil::max_rel_err;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn small_cfg() -> RetrievalConfig {
        RetrievalConfig {
            point_widths: vec![8, 16],
            code_dim: 6,
            ..Default::default()
        }
    }

    fn toy_space(n_sources: usize) -> (RetrievalSpace, Vec<SourceShape>) {
        let sources: Vec<SourceShape> = (0..n_sources).map(|i| three_part_shape(i as u64, 16)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        (RetrievalSpace::new(&small_cfg(), &sources, &mut rng).unwrap(), sources)
    }

    #[test]
    fn distance_of_own_code_is_zero() {
        let (space, sources) = toy_space(2);
        let d = space.distance(1, sources[1].default_cloud()).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn one_dimensional_distance() {
        let (mut space, _) = toy_space(1);
        let mut code = vec![0.0; 6];
        space.set_source_code(0, code.clone()).unwrap();
        let id = space.variance_logits_id(0);
        space.store.value_mut(id)[0] = (0.25f64 / 0.75).ln();
        code[0] = 2.0;
        let v = space.variance(0).unwrap();
        let d = space.distance_to_code(0, &code).unwrap();
        assert!((v[0] - 0.25).abs() < 1e-15);
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distance_matches_scalar_loop() {
        let (space, sources) = toy_space(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for k in 0..3 {
            let s = space.source_code(k).unwrap();
            let v = space.variance(k).unwrap();
            let mut acc = 0.0;
            for i in 0..6 {
                acc += (s[i] - t[i]) * v[i] * (s[i] - t[i]);
            }
            assert!((space.distance_to_code(k, &t).unwrap() - acc.sqrt()).abs() < 1e-12);
        }
        assert!(matches!(space.distance(7, sources[0].default_cloud()), Err(Error::UnknownSource(7))));
    }

    #[test]
    fn probabilities_examples() {
        let p = soft_probabilities(&[0.3; 10], &[2.0; 10]).unwrap();
        assert!(p.iter().all(|v| (v - 0.1).abs() < 1e-15));
        let p = soft_probabilities(&[0.0, 1.0], &[1.0, 1.0]).unwrap();
        assert!((p[0] - 0.7310585786300049).abs() < 1e-12);
        assert!((p[1] - 0.2689414213699951).abs() < 1e-12);
        assert!(soft_probabilities(&[1.0], &[0.0]).is_err());
        // extreme logits stay finite thanks to max subtraction
        let p = soft_probabilities(&[0.0, 1e3], &[1e-3, 1e-3]).unwrap();
        assert_eq!(p, vec![1.0, 0.0]);
    }

    #[test]
    fn exhaustive_draw_returns_all() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for mode in [SamplingMode::Biased, SamplingMode::Uniform] {
            let c = sample_candidates(0, &[0.1, 5.0, 0.3], 1.0, 3, mode, &mut rng).unwrap();
            let mut s = c.sources.clone();
            s.sort();
            assert_eq!(s, vec![0, 1, 2]);
            assert!((c.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(matches!(
            sample_candidates(0, &[0.1, 0.2], 1.0, 3, SamplingMode::Biased, &mut rng),
            Err(Error::DatabaseTooSmall { requested: 3, available: 2 })
        ));
    }

    #[test]
    fn first_draw_frequencies_match_probabilities() {
        let d: Vec<f64> = (0..10).map(|i| 0.15 * i as f64).collect();
        let p = soft_probabilities(&d, &[1.0; 10]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let mut counts = [0usize; 10];
        for _ in 0..n {
            let c = sample_candidates(0, &d, 1.0, 3, SamplingMode::Biased, &mut rng).unwrap();
            counts[c.sources[0]] += 1;
        }
        let mut chi2 = 0.0;
        for i in 0..10 {
            let f = counts[i] as f64 / n as f64;
            assert!((f - p[i]).abs() < 0.01, "source {i}: {f} vs {}", p[i]);
            let e = p[i] * n as f64;
            chi2 += (counts[i] as f64 - e).powi(2) / e;
        }
        let pval = 1.0 - ChiSquared::new(9.0).unwrap().cdf(chi2);
        assert!(pval > 0.01, "chi-square p-value {pval}");
    }

    #[test]
    fn embedding_loss_examples() {
        let (mut space, sources) = toy_space(2);
        // identical codes for both sources give p_R = (0.5, 0.5)
        let c = space.source_code(0).unwrap().to_vec();
        space.set_source_code(1, c).unwrap();
        let cache = space.encoder.forward(&space.store, sources[0].default_cloud().points()).unwrap();
        let mut grads = Gradients::for_store(&space.store);
        let codes = [space.source_code(0).unwrap(), space.source_code(1).unwrap()];
        let out = embedding_loss(&space, &cache, &[0, 1], &codes, &[0.2, 0.2], 1.0, &mut grads).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(grads.is_zero());
        // p_fit = (0.6, 0.4) against uniform p_R
        let ratio: f64 = (0.6f64 / 0.4).ln();
        let f1 = ratio.sqrt();
        let out = embedding_loss(&space, &cache, &[0, 1], &codes, &[0.0, f1], 1.0, &mut grads).unwrap();
        assert!((out.p_fit[0] - 0.6).abs() < 1e-12);
        assert!((out.loss - 0.2).abs() < 1e-12);
    }

    /// Embedding loss with live source codes, backpropagated through the
    /// encoder for both the target and the sources.
    fn live_loss(space: &RetrievalSpace, sources: &[SourceShape], target: &PointCloud, cands: &[usize], fit: &[f64], sigma0: f64, grads: &mut Gradients) -> f64 {
        let tc = space.encoder.forward(&space.store, target.points()).unwrap();
        let sc: Vec<EncoderCache> = cands
            .iter()
            .map(|&k| space.encoder.forward(&space.store, sources[k].default_cloud().points()).unwrap())
            .collect();
        let codes: Vec<Vec<f64>> = sc.iter().map(|c| c.output().to_vec()).collect();
        let code_refs: Vec<&[f64]> = codes.iter().map(|c| c.as_slice()).collect();
        let out = embedding_loss(space, &tc, cands, &code_refs, fit, sigma0, grads).unwrap();
        for (c, d) in sc.iter().zip(&out.d_source_codes) {
            space.encoder.backward(&space.store, c, d, grads).unwrap();
        }
        out.loss
    }

    #[test]
    fn embedding_loss_gradient_check() {
        let (mut space, sources) = toy_space(4);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for k in 0..4 {
            for l in space.store.value_mut(space.variance_logits_id(k)) {
                *l = rng.gen_range(-1.0..1.0);
            }
            space.store.value_mut(space.sigma_logit_id(k))[0] = rng.gen_range(-0.5..0.5);
        }
        for l in space.encoder.point_mlp.layers.iter().chain([&space.encoder.head]) {
            for b in space.store.value_mut(l.bias) {
                *b = rng.gen_range(-0.2..0.2);
            }
        }
        let target = PointCloud::new(
            sources[2].default_cloud().points().iter().map(|p| [p[0] * 1.1, p[1] + 0.05, p[2] * 0.9]).collect(),
        )
        .unwrap();
        let cands = [3usize, 0, 2];
        let fit = [0.4, 0.9, 0.1];
        let sigma0 = 0.3;
        let mut grads = Gradients::for_store(&space.store);
        live_loss(&space, &sources, &target, &cands, &fit, sigma0, &mut grads);
        let h = 1e-5;
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for t in 0..space.store.len() {
            let id = ParamId(t);
            let n = space.store.value(id).len();
            let g = grads.get(id).map(|g| g.to_vec()).unwrap_or(vec![0.0; n]);
            for i in 0..n {
                let orig = space.store.value(id)[i];
                space.store.value_mut(id)[i] = orig + h;
                let lp = live_loss(&space, &sources, &target, &cands, &fit, sigma0, &mut Gradients::for_store(&space.store));
                space.store.value_mut(id)[i] = orig - h;
                let lm = live_loss(&space, &sources, &target, &cands, &fit, sigma0, &mut Gradients::for_store(&space.store));
                space.store.value_mut(id)[i] = orig;
                analytic.push(g[i]);
                numeric.push((lp - lm) / (2.0 * h));
            }
        }
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "embedding loss gradient rel err {err}");
        assert!(analytic.iter().any(|g| g.abs() > 1e-8));
    }

    #[test]
    fn source_code_gradient_matches_finite_differences() {
        let (space, sources) = toy_space(3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let codes: Vec<Vec<f64>> = (0..3).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let cache = space.encoder.forward(&space.store, sources[1].default_cloud().points()).unwrap();
        let fit = [0.3, 0.1, 0.6];
        let loss = |codes: &[Vec<f64>]| {
            let r: Vec<&[f64]> = codes.iter().map(|c| c.as_slice()).collect();
            embedding_loss(&space, &cache, &[0, 1, 2], &r, &fit, 0.7, &mut Gradients::for_store(&space.store)).unwrap()
        };
        let out = loss(&codes);
        let h = 1e-6;
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for c in 0..3 {
            for i in 0..6 {
                let mut a = codes.clone();
                let mut b = codes.clone();
                a[c][i] += h;
                b[c][i] -= h;
                analytic.push(out.d_source_codes[c][i]);
                numeric.push((loss(&a).loss - loss(&b).loss) / (2.0 * h));
            }
        }
        assert!(max_rel_err(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn candidate_set_json_line_round_trip() {
        let c = CandidateSet {
            target: 3,
            sources: vec![1, 0],
            distances: vec![0.5, 0.25],
            probabilities: vec![0.4, 0.6],
        };
        let line = c.to_json_line();
        assert!(!line.contains('\n'));
        assert_eq!(serde_json::from_str::<CandidateSet>(&line).unwrap(), c);
    }
}
