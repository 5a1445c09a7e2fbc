use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::codebook::Codebook;
use crate::audio::FeatureSequence;
use crate::error::{Error, Result};
use crate::model::{GroundingModel, LayerHook, NoHook, VqConfig};
use crate::numerics::{Graph, NodeId, Tensor};

/// Number of LSTM layers followed by a VQ layer.
pub const VQ_LAYERS: usize = 2;

fn rows_of(g: &Graph, h: NodeId) -> Vec<Vec<f64>> {
    let t = g.value(h);
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

/// A layer hook that may contribute VQ loss terms.
pub trait VqHook: LayerHook {
    /// `(node, frames)` per quantised layer: the per-utterance mean squared
    /// distance node and the number of frames it averages over.
    fn loss_terms(&self) -> Vec<(usize, NodeId, usize)>;
}

impl VqHook for NoHook {
    fn loss_terms(&self) -> Vec<(usize, NodeId, usize)> {
        Vec::new()
    }
}

/// Read-only quantisation for evaluation. Usage counters are not touched.
pub struct InferenceVq<'a> {
    codebooks: &'a [Codebook],
}

impl<'a> InferenceVq<'a> {
    pub fn new(codebooks: &'a [Codebook]) -> Self {
        InferenceVq { codebooks }
    }
}

impl LayerHook for InferenceVq<'_> {
    fn after_lstm_layer(&mut self, g: &mut Graph, layer: usize, h: NodeId) -> Result<NodeId> {
        let Some(cb) = self.codebooks.get(layer - 1).filter(|_| layer <= VQ_LAYERS) else {
            return Ok(h);
        };
        let mut q = Vec::with_capacity(g.value(h).len());
        for row in rows_of(g, h) {
            q.extend_from_slice(cb.code(cb.nearest(&row)?));
        }
        g.straight_through(h, Tensor::new(g.value(h).shape().to_vec(), q)?)
    }
}

/// What one VQ layer saw during a training forward pass.
#[derive(Debug, Clone, Default)]
pub struct LayerRecord {
    pub inputs: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Scalar node: mean squared distance to the assigned codes for this
    /// utterance, with the codes held constant.
    pub loss: Option<NodeId>,
}

/// Training-time quantisation: straight-through forward, VQ loss nodes,
/// and the (input, code) pairs needed for usage counts and EMA.
pub struct TrainingVq<'a> {
    codebooks: &'a [Codebook],
    pub records: Vec<LayerRecord>,
}

impl<'a> TrainingVq<'a> {
    pub fn new(codebooks: &'a [Codebook]) -> Self {
        TrainingVq {
            codebooks,
            records: vec![LayerRecord::default(); codebooks.len().min(VQ_LAYERS)],
        }
    }
}

impl VqHook for TrainingVq<'_> {
    fn loss_terms(&self) -> Vec<(usize, NodeId, usize)> {
        self.records
            .iter()
            .enumerate()
            .filter_map(|(l, r)| r.loss.map(|n| (l + 1, n, r.assignments.len())))
            .collect()
    }
}

impl LayerHook for TrainingVq<'_> {
    fn after_lstm_layer(&mut self, g: &mut Graph, layer: usize, h: NodeId) -> Result<NodeId> {
        if layer > self.records.len() {
            return Ok(h);
        }
        let cb = &self.codebooks[layer - 1];
        let rows = rows_of(g, h);
        let mut q = Vec::with_capacity(rows.len() * cb.d());
        let rec = &mut self.records[layer - 1];
        for row in rows {
            let k = cb.nearest(&row)?;
            q.extend_from_slice(cb.code(k));
            rec.assignments.push(k);
            rec.inputs.push(row);
        }
        rec.loss = Some(g.mse_to_const(h, &q)?);
        g.straight_through(h, Tensor::new(g.value(h).shape().to_vec(), q)?)
    }
}

/// Frozen-assignment surrogate used by finite-difference checks.
///
/// The true quantiser is piecewise constant, so its numeric derivative is
/// zero almost everywhere and cannot be compared to the straight-through
/// estimate. This hook fixes each frame's code at a base point and emits
/// `x + (e_k - x_base)`, whose exact derivative is the identity the
/// straight-through rule uses, and whose value at the base point is `e_k`.
#[derive(Debug, Clone)]
pub struct LinearizedVq {
    offsets: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    frames: Vec<usize>,
    losses: Vec<(usize, NodeId, usize)>,
}

impl LinearizedVq {
    /// Records assignments for `fs` under the model's current parameters.
    pub fn capture(model: &GroundingModel, fs: &FeatureSequence) -> Result<Self> {
        let mut g = Graph::new();
        let mut hook = TrainingVq::new(&model.codebooks);
        model.caption_forward(&mut g, fs, &mut hook)?;
        let mut offsets = Vec::new();
        let mut targets = Vec::new();
        let frames = hook.records.iter().map(|r| r.assignments.len()).collect();
        for (rec, cb) in hook.records.iter().zip(&model.codebooks) {
            let mut off = Vec::new();
            let mut tgt = Vec::new();
            for (x, &k) in rec.inputs.iter().zip(&rec.assignments) {
                for (e, xv) in cb.code(k).iter().zip(x) {
                    off.push(e - xv);
                    tgt.push(*e);
                }
            }
            offsets.push(off);
            targets.push(tgt);
        }
        Ok(LinearizedVq {
            offsets,
            targets,
            frames,
            losses: Vec::new(),
        })
    }
}

impl VqHook for LinearizedVq {
    fn loss_terms(&self) -> Vec<(usize, NodeId, usize)> {
        self.losses.clone()
    }
}

impl LayerHook for LinearizedVq {
    fn after_lstm_layer(&mut self, g: &mut Graph, layer: usize, h: NodeId) -> Result<NodeId> {
        if layer > self.offsets.len() {
            return Ok(h);
        }
        let loss = g.mse_to_const(h, &self.targets[layer - 1])?;
        self.losses.push((layer, loss, self.frames[layer - 1]));
        g.add_const(h, &self.offsets[layer - 1])
    }
}

/// Collects the output rows of every LSTM layer (after any quantisation
/// applied by the wrapped hook).
pub struct ActivationRecorder<H> {
    inner: H,
    pub layers: BTreeMap<usize, Vec<Vec<f64>>>,
}

impl<H: LayerHook> ActivationRecorder<H> {
    pub fn new(inner: H) -> Self {
        ActivationRecorder {
            inner,
            layers: BTreeMap::new(),
        }
    }
}

impl<H: LayerHook> LayerHook for ActivationRecorder<H> {
    fn after_lstm_layer(&mut self, g: &mut Graph, layer: usize, h: NodeId) -> Result<NodeId> {
        self.layers.entry(layer).or_default().extend(rows_of(g, h));
        self.inner.after_lstm_layer(g, layer, h)
    }
}

/// Groups training records by assigned code, ready for `ema_update`.
pub fn activations_by_code(records: &[&LayerRecord]) -> BTreeMap<usize, Vec<Vec<f64>>> {
    let mut map: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for rec in records {
        for (x, &k) in rec.inputs.iter().zip(&rec.assignments) {
            map.entry(k).or_default().push(x.clone());
        }
    }
    map
}

fn sample_rows(pool: &[Vec<f64>], n: usize, gamma: f64, rng: &mut ChaCha8Rng, layer: usize) -> Result<Codebook> {
    if pool.len() < n {
        return Err(Error::invalid(format!(
            "warm-up pass produced {} activations after layer {layer}, need {n}",
            pool.len()
        )));
    }
    let rows: Vec<Vec<f64>> = sample(rng, pool.len(), n).into_iter().map(|i| pool[i].clone()).collect();
    Codebook::from_rows(&rows, gamma)
}

/// Copies a trained plain model and inserts VQ layers after LSTM layers 1
/// and 2. Each codebook is a uniform sample (without replacement) of the
/// activations that reach it on a warm-up pass; layer 2 is sampled with
/// layer 1 already quantising.
pub fn warm_start_insert(
    base: &GroundingModel,
    cfg: &VqConfig,
    warmup: &[FeatureSequence],
    seed: u64,
) -> Result<GroundingModel> {
    let mc = &base.config;
    if mc.lstm_layers < VQ_LAYERS {
        return Err(Error::Config(format!(
            "VQ insertion needs {VQ_LAYERS} LSTM layers, model has {}",
            mc.lstm_layers
        )));
    }
    if let Some(d) = cfg.code_dim {
        if d != 2 * mc.lstm_hidden {
            return Err(Error::Config(format!(
                "codebook dimension {d} does not match LSTM output width {}",
                2 * mc.lstm_hidden
            )));
        }
    }
    if warmup.is_empty() {
        return Err(Error::invalid("empty warm-up batch"));
    }
    let mut model = base.clone();
    model.config.vq = VqConfig {
        enabled: true,
        ..cfg.clone()
    };
    model.config.validate()?;
    model.codebooks.clear();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in 1..=VQ_LAYERS {
        let mut rec = ActivationRecorder::new(InferenceVq::new(&model.codebooks));
        for fs in warmup {
            let mut g = Graph::new();
            model.caption_forward(&mut g, fs, &mut rec)?;
        }
        let pool = rec.layers.remove(&layer).unwrap_or_default();
        let n = cfg.codebook_sizes[layer - 1];
        let cb = sample_rows(&pool, n, cfg.gamma, &mut rng, layer)?;
        model.codebooks.push(cb);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::{reverse_accumulate, Axis};
    use rand::Rng;

    fn seq(t: usize, seed: u64) -> FeatureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..t * 39).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureSequence::new(format!("u{seed}"), t, 39, data).unwrap()
    }

    fn vq_cfg() -> VqConfig {
        VqConfig {
            enabled: true,
            ..ModelConfig::tiny().vq
        }
    }

    #[test]
    fn straight_through_sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 2, vec![0.3, -0.2, 0.9, 0.1]).unwrap()).unwrap();
        let q = g.straight_through(x, Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap()).unwrap();
        let l = g.sum_all(q);
        assert_eq!(g.value(l).item().unwrap(), 1.0);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn straight_through_passes_upstream_gradient_bit_exact() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![0.4, -1.3, 2.2])).unwrap();
        let q = g.straight_through(x, Tensor::row(vec![0.0, -1.0, 2.0])).unwrap();
        let t = g.tanh(q);
        let s = g.mul(t, t).unwrap();
        let l = g.sum_all(s);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), grads.wrt(q).unwrap());
    }

    #[test]
    fn stacked_vq_gradient_equals_identity_backward() {
        let base = GroundingModel::init(ModelConfig::tiny()).unwrap();
        let warm: Vec<_> = (0..3).map(|s| seq(14, s)).collect();
        let model = warm_start_insert(&base, &vq_cfg(), &warm, 4).unwrap();
        let fs = seq(12, 9);

        let grad_with = |hook: &mut dyn LayerHook| {
            let mut g = Graph::new();
            let nodes = model.caption_forward(&mut g, &fs, hook).unwrap();
            let s = g.sum(nodes.embedding, Axis::Cols).unwrap();
            let l = g.sum_all(s);
            let mut store = model.params.clone();
            reverse_accumulate(&g, l, &mut store).unwrap()
        };
        let st = grad_with(&mut TrainingVq::new(&model.codebooks));
        let id = grad_with(&mut LinearizedVq::capture(&model, &fs).unwrap());
        for (name, a) in &st {
            let b = &id[name];
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{name}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn warm_start_copies_parameters_and_samples_activations() {
        let base = GroundingModel::init(ModelConfig::tiny()).unwrap();
        let warm: Vec<_> = (0..2).map(|s| seq(10, s)).collect();
        let model = warm_start_insert(&base, &vq_cfg(), &warm, 1).unwrap();
        assert_eq!(model.params, base.params);
        assert_eq!(model.codebooks.len(), 2);
        assert_eq!(model.codebooks[0].n(), 4);
        assert_eq!(model.codebooks[1].n(), 6);

        let mut rec = ActivationRecorder::new(NoHook);
        for fs in &warm {
            base.caption_forward(&mut Graph::new(), fs, &mut rec).unwrap();
        }
        let pool = &rec.layers[&1];
        for k in 0..4 {
            assert!(pool.iter().any(|r| r.as_slice() == model.codebooks[0].code(k)));
        }
    }

    #[test]
    fn codes_from_own_activations_reproduce_plain_output() {
        let base = GroundingModel::init(ModelConfig::tiny()).unwrap();
        let fs = seq(12, 3);
        // 12 frames -> 6 conv steps; build codebooks from exactly those rows
        let mut rec = ActivationRecorder::new(NoHook);
        base.caption_forward(&mut Graph::new(), &fs, &mut rec).unwrap();
        let mut model = base.clone();
        model.config.vq = vq_cfg();
        model.codebooks = vec![
            Codebook::from_rows(&rec.layers[&1], 0.99).unwrap(),
            Codebook::from_rows(&rec.layers[&2], 0.99).unwrap(),
        ];
        assert_eq!(model.encode_caption(&fs).unwrap(), base.encode_caption(&fs).unwrap());
    }

    #[test]
    fn too_few_activations_is_error() {
        let base = GroundingModel::init(ModelConfig::tiny()).unwrap();
        let cfg = VqConfig {
            codebook_sizes: vec![50, 50],
            ..vq_cfg()
        };
        assert!(warm_start_insert(&base, &cfg, &[seq(8, 0)], 0).is_err());
    }

    #[test]
    fn code_dim_mismatch_is_error() {
        let base = GroundingModel::init(ModelConfig::tiny()).unwrap();
        let cfg = VqConfig {
            code_dim: Some(12),
            ..vq_cfg()
        };
        assert!(warm_start_insert(&base, &cfg, &[seq(30, 0)], 0).is_err());
    }

    #[test]
    fn training_records_match_inference_codes() {
        let base = GroundingModel::init(ModelConfig::tiny()).unwrap();
        let warm: Vec<_> = (0..3).map(|s| seq(14, s)).collect();
        let model = warm_start_insert(&base, &vq_cfg(), &warm, 2).unwrap();
        let fs = seq(16, 7);
        let mut g = Graph::new();
        let mut hook = TrainingVq::new(&model.codebooks);
        let nodes = model.caption_forward(&mut g, &fs, &mut hook).unwrap();
        assert_eq!(g.value(nodes.embedding).values(), model.encode_caption(&fs).unwrap().vector.as_slice());
        assert_eq!(hook.records[0].assignments.len(), 8);
        let loss = g.value(hook.records[0].loss.unwrap()).item().unwrap();
        let oracle = super::super::vq_loss(&hook.records[0].inputs, &model.codebooks[0]).unwrap();
        assert!((loss - oracle).abs() < 1e-12);
    }
}
