use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::geometry::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Sigmoid => z.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp())),
            Activation::None => {}
        }
    }

    /// Multiplies `dy` by the activation derivative, expressed through the
    /// activation output `y`.
    fn backprop(self, y: &Array2<f64>, dy: &mut Array2<f64>) {
        match self {
            Activation::Relu => dy.zip_mut_with(y, |d, &y| {
                if y <= 0.0 {
                    *d = 0.0
                }
            }),
            Activation::Sigmoid => dy.zip_mut_with(y, |d, &y| *d *= y * (1.0 - y)),
            Activation::None => {}
        }
    }
}

/// Fully connected layer `y = act(W x + b)` with `W` stored out×in.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

/// Inputs and outputs of one dense forward pass, one row per batch item.
#[derive(Debug, Clone)]
pub struct DenseCache {
    input: Array2<f64>,
    output: Array2<f64>,
    version: u64,
}

impl DenseCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            input: self.input.select(Axis(0), rows),
            output: self.output.select(Axis(0), rows),
            version: self.version,
        }
    }
}

impl DenseLayer {
    /// Registers `{name}.weight` (Glorot uniform) and `{name}.bias` (zeros).
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_glorot(format!("{name}.weight"), out_dim, in_dim, rng);
        let bias = store.add(format!("{name}.bias"), vec![out_dim], vec![0.0; out_dim]);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
            activation,
        }
    }

    fn weight_view<'a>(&self, store: &'a ParamStore) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.out_dim, self.in_dim), store.value(self.weight))
            .expect("weight shape")
    }

    pub fn forward(&self, store: &ParamStore, x: Array2<f64>) -> Result<DenseCache> {
        if x.ncols() != self.in_dim {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim,
                got: x.ncols(),
            });
        }
        let mut y = x.dot(&self.weight_view(store).t());
        y += &ArrayView1::from(store.value(self.bias));
        self.activation.apply(&mut y);
        Ok(DenseCache {
            input: x,
            output: y,
            version: store.version(),
        })
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &DenseCache,
        mut dy: Array2<f64>,
        grads: &mut Gradients,
    ) -> Result<Array2<f64>> {
        if cache.version != store.version() {
            return Err(Error::StaleCache);
        }
        if dy.dim() != cache.output.dim() {
            return Err(Error::DimensionMismatch {
                expected: cache.output.ncols(),
                got: dy.ncols(),
            });
        }
        self.activation.backprop(&cache.output, &mut dy);
        let dw = dy.t().dot(&cache.input);
        for (g, d) in grads.slot(store, self.weight).iter_mut().zip(dw.iter()) {
            *g += d;
        }
        let db = dy.sum_axis(Axis(0));
        for (g, d) in grads.slot(store, self.bias).iter_mut().zip(db.iter()) {
            *g += d;
        }
        Ok(dy.dot(&self.weight_view(store)))
    }
}

/// Stack of dense layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    layers: Vec<DenseCache>,
}

impl MlpCache {
    pub fn output(&self) -> &Array2<f64> {
        self.layers.last().expect("non-empty mlp").output()
    }

    fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            layers: self.layers.iter().map(|c| c.select_rows(rows)).collect(),
        }
    }
}

impl Mlp {
    /// `widths = [in, h1, ..., out]`; hidden layers use `hidden`, the last
    /// layer `last`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        hidden: Activation,
        last: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "mlp needs at least one layer");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { last } else { hidden };
                DenseLayer::new(store, &format!("{name}.{i}"), widths[i], widths[i + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn forward(&self, store: &ParamStore, x: Array2<f64>) -> Result<MlpCache> {
        let mut caches: Vec<DenseCache> = Vec::with_capacity(self.layers.len());
        let mut cur = x;
        for layer in &self.layers {
            let c = layer.forward(store, cur)?;
            cur = c.output.clone();
            caches.push(c);
        }
        Ok(MlpCache { layers: caches })
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &MlpCache,
        dy: Array2<f64>,
        grads: &mut Gradients,
    ) -> Result<Array2<f64>> {
        let mut d = dy;
        for (layer, c) in self.layers.iter().zip(&cache.layers).rev() {
            d = layer.backward(store, c, d, grads)?;
        }
        Ok(d)
    }

    /// Single-vector convenience forward.
    pub fn forward_vec(&self, store: &ParamStore, x: &[f64]) -> Result<MlpCache> {
        let row = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row shape");
        self.forward(store, row)
    }
}

/// Shared per-point MLP, channel-wise max pool, and a linear head.
#[derive(Debug, Clone)]
pub struct SetEncoder {
    pub point_mlp: Mlp,
    pub head: DenseLayer,
}

/// What the encoder backward needs: only points that win the max pool in at
/// least one channel receive gradient, so the per-point cache keeps just
/// those rows.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    /// Winning point indices, ascending.
    pub winners: Vec<usize>,
    /// For each pooled channel, the position of its winner in `winners`.
    channel_winner: Vec<usize>,
    points: MlpCache,
    head: DenseCache,
}

impl EncoderCache {
    pub fn output(&self) -> ArrayView1<'_, f64> {
        self.head.output.row(0)
    }

    /// Index of the point selected by the max pool for each channel.
    pub fn argmax(&self) -> Vec<usize> {
        self.channel_winner.iter().map(|&k| self.winners[k]).collect()
    }
}

impl SetEncoder {
    /// `point_widths` are the per-point MLP widths after the 3-d input.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        point_widths: &[usize],
        output_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut widths = vec![3];
        widths.extend_from_slice(point_widths);
        let point_mlp = Mlp::new(
            store,
            &format!("{name}.point"),
            &widths,
            Activation::Relu,
            Activation::Relu,
            rng,
        );
        let head = DenseLayer::new(
            store,
            &format!("{name}.head"),
            point_mlp.out_dim(),
            output_dim,
            Activation::None,
            rng,
        );
        Self { point_mlp, head }
    }

    pub fn output_dim(&self) -> usize {
        self.head.out_dim
    }

    pub fn forward(&self, store: &ParamStore, points: &[Vec3]) -> Result<EncoderCache> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let x = Array2::from_shape_fn((points.len(), 3), |(i, k)| points[i][k]);
        let full = self.point_mlp.forward(store, x)?;
        let feats = full.output();
        let channels = feats.ncols();
        let mut pooled = Array1::from_elem(channels, f64::NEG_INFINITY);
        let mut arg = vec![0usize; channels];
        for (i, row) in feats.outer_iter().enumerate() {
            for c in 0..channels {
                // strict comparison keeps the first maximal point
                if row[c] > pooled[c] {
                    pooled[c] = row[c];
                    arg[c] = i;
                }
            }
        }
        let mut winners = arg.clone();
        winners.sort_unstable();
        winners.dedup();
        let channel_winner = arg
            .iter()
            .map(|a| winners.binary_search(a).expect("winner present"))
            .collect();
        let pooled = pooled.insert_axis(Axis(0));
        let head = self.head.forward(store, pooled)?;
        Ok(EncoderCache {
            points: full.select_rows(&winners),
            winners,
            channel_winner,
            head,
        })
    }

    pub fn encode(&self, store: &ParamStore, points: &[Vec3]) -> Result<Vec<f64>> {
        Ok(self.forward(store, points)?.output().to_vec())
    }

    /// Accumulates parameter gradients for `d output`.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &EncoderCache,
        dout: &[f64],
        grads: &mut Gradients,
    ) -> Result<()> {
        let dy = Array2::from_shape_vec((1, dout.len()), dout.to_vec()).map_err(|_| {
            Error::DimensionMismatch {
                expected: self.output_dim(),
                got: dout.len(),
            }
        })?;
        let dpooled = self.head.backward(store, &cache.head, dy, grads)?;
        let mut dfeat = Array2::zeros((cache.winners.len(), dpooled.ncols()));
        for (c, &k) in cache.channel_winner.iter().enumerate() {
            dfeat[(k, c)] += dpooled[(0, c)];
        }
        self.point_mlp.backward(store, &cache.points, dfeat, grads)?;
        Ok(())
    }
}
