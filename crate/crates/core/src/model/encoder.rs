use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::audio::FeatureSequence;
use crate::error::{Error, Result};
use crate::numerics::{Axis, Graph, NodeId, ParamStore, Tensor};
use crate::vq::{Codebook, InferenceVq};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Image,
    Caption,
}

/// Unit-norm vector in the shared embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub modality: Modality,
}

impl Embedding {
    pub fn cosine(&self, other: &Embedding) -> f64 {
        crate::numerics::dot(&self.vector, &other.vector)
    }
}

/// Intercepts the output of each LSTM layer of the caption encoder.
pub trait LayerHook {
    /// `layer` is 1-based; the returned node feeds the next layer.
    fn after_lstm_layer(&mut self, g: &mut Graph, layer: usize, h: NodeId) -> Result<NodeId>;
}

/// Leaves every layer output unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoHook;

impl LayerHook for NoHook {
    fn after_lstm_layer(&mut self, _g: &mut Graph, _layer: usize, h: NodeId) -> Result<NodeId> {
        Ok(h)
    }
}

/// Nodes produced by one caption forward pass.
#[derive(Debug, Clone, Copy)]
pub struct CaptionNodes {
    pub embedding: NodeId,
    /// `[T', embed_dim]` attention weights, softmax over time per channel.
    pub attention: NodeId,
    /// Output of the last LSTM layer.
    pub hidden: NodeId,
}

/// Attention pooling: `a_t = softmax_t(V tanh(W h_t + b_w) + b_v)` per
/// channel, then `sum_t a_t * h_t`. Returns the pooled `[1, D]` value and
/// the `[T, D]` weights.
pub fn attention_pool(
    g: &mut Graph,
    hidden: NodeId,
    w: NodeId,
    b_w: NodeId,
    v: NodeId,
    b_v: NodeId,
) -> Result<(NodeId, NodeId)> {
    if g.value(hidden).rows() == 0 {
        return Err(Error::invalid("attention over an empty sequence"));
    }
    let pre = g.linear(hidden, w, b_w)?;
    let act = g.tanh(pre);
    let logits = g.linear(act, v, b_v)?;
    let weights = g.softmax(logits, Axis::Rows)?;
    let weighted = g.mul(weights, hidden)?;
    let pooled = g.sum(weighted, Axis::Rows)?;
    Ok((pooled, weights))
}

/// `img · Aᵀ + b`, scaled to unit L2 norm.
pub fn encode_image(img_feat: &[f64], a: &Tensor, b: &Tensor) -> Result<Embedding> {
    let (d, f) = a.dims2().ok_or_else(|| Error::shape("encode_image", a.shape(), &[]))?;
    if img_feat.len() != f {
        return Err(Error::shape("encode_image", &[img_feat.len()], a.shape()));
    }
    if b.len() != d {
        return Err(Error::shape("encode_image", a.shape(), b.shape()));
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::row(img_feat.to_vec()))?;
    let an = g.constant(a.clone())?;
    let bn = g.constant(Tensor::row(b.values().to_vec()))?;
    let y = g.linear(x, an, bn)?;
    let y = g.l2_normalize(y)?;
    Ok(Embedding {
        vector: g.value(y).values().to_vec(),
        modality: Modality::Image,
    })
}

/// The two-branch model: parameters plus VQ codebooks when inserted.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Codebooks after LSTM layers 1 and 2; empty for the plain model.
    pub codebooks: Vec<Codebook>,
}

pub(crate) fn lstm_name(layer: usize, dir: &str, part: &str) -> String {
    format!("lstm{layer}.{dir}.{part}")
}

impl GroundingModel {
    /// Seeded initialisation: uniform in `±1/sqrt(fan_in)`, LSTM forget-gate
    /// biases set to 1.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let mut p = ParamStore::new();
        p.insert_uniform("image.A", vec![c.embed_dim, c.image_feat_dim], c.image_feat_dim, &mut rng)?;
        p.insert_uniform("image.b", vec![c.embed_dim], c.image_feat_dim, &mut rng)?;
        let conv_in = c.conv_kernel * c.feature_dim;
        p.insert_uniform("conv.w", vec![c.conv_channels, conv_in], conv_in, &mut rng)?;
        p.insert_uniform("conv.b", vec![c.conv_channels], conv_in, &mut rng)?;
        let h = c.lstm_hidden;
        for layer in 1..=c.lstm_layers {
            let input = if layer == 1 { c.conv_channels } else { 2 * h };
            for dir in ["fw", "bw"] {
                p.insert_uniform(&lstm_name(layer, dir, "w_ih"), vec![4 * h, input], h, &mut rng)?;
                p.insert_uniform(&lstm_name(layer, dir, "w_hh"), vec![4 * h, h], h, &mut rng)?;
                p.insert_uniform(&lstm_name(layer, dir, "b"), vec![4 * h], h, &mut rng)?;
                let b = p.get_mut(&lstm_name(layer, dir, "b"))?;
                b.values_mut()[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
            }
        }
        p.insert_uniform("attn.W", vec![c.attn_dim, c.embed_dim], c.embed_dim, &mut rng)?;
        p.insert_uniform("attn.b_w", vec![c.attn_dim], c.embed_dim, &mut rng)?;
        p.insert_uniform("attn.V", vec![c.embed_dim, c.attn_dim], c.attn_dim, &mut rng)?;
        p.insert_uniform("attn.b_v", vec![c.embed_dim], c.attn_dim, &mut rng)?;
        Ok(GroundingModel {
            config,
            params: p,
            codebooks: Vec::new(),
        })
    }

    pub fn has_vq(&self) -> bool {
        !self.codebooks.is_empty()
    }

    /// Encodes a batch of image feature vectors into `[B, embed_dim]` unit rows.
    pub fn image_forward(&self, g: &mut Graph, feats: &[&[f64]]) -> Result<NodeId> {
        let f = self.config.image_feat_dim;
        if feats.is_empty() {
            return Err(Error::invalid("empty image batch"));
        }
        if let Some(bad) = feats.iter().find(|x| x.len() != f) {
            return Err(Error::shape("encode_image", &[bad.len()], &[f]));
        }
        let x = g.constant(Tensor::matrix(feats.len(), f, feats.concat())?)?;
        let a = g.param(&self.params, "image.A")?;
        let b = g.param(&self.params, "image.b")?;
        let y = g.linear(x, a, b)?;
        g.l2_normalize(y)
    }

    fn bilstm_layer(&self, g: &mut Graph, x: NodeId, layer: usize) -> Result<NodeId> {
        let h = self.config.lstm_hidden;
        let t_len = g.value(x).rows();
        let mut outputs = Vec::with_capacity(2);
        for (dir, reverse) in [("fw", false), ("bw", true)] {
            let w_ih = g.param(&self.params, &lstm_name(layer, dir, "w_ih"))?;
            let w_hh = g.param(&self.params, &lstm_name(layer, dir, "w_hh"))?;
            let b = g.param(&self.params, &lstm_name(layer, dir, "b"))?;
            let proj = g.linear(x, w_ih, b)?;
            let mut hs = g.constant(Tensor::zeros(vec![1, h]))?;
            let mut cs = g.constant(Tensor::zeros(vec![1, h]))?;
            let mut steps = vec![hs; t_len];
            for i in 0..t_len {
                let t = if reverse { t_len - 1 - i } else { i };
                let xp = g.row(proj, t)?;
                (hs, cs) = g.lstm_step(xp, hs, cs, w_hh, h)?;
                steps[t] = hs;
            }
            outputs.push(g.stack_rows(&steps)?);
        }
        g.concat_cols(outputs[0], outputs[1])
    }

    /// conv → bi-LSTM stack (hook after each layer) → attention → L2 norm.
    pub fn caption_forward(&self, g: &mut Graph, fs: &FeatureSequence, hook: &mut dyn LayerHook) -> Result<CaptionNodes> {
        let c = &self.config;
        if fs.dim() != c.feature_dim {
            return Err(Error::shape("encode_caption", &[fs.n_frames(), fs.dim()], &[c.feature_dim]));
        }
        let x = g.constant(fs.to_tensor())?;
        let w = g.param(&self.params, "conv.w")?;
        let b = g.param(&self.params, "conv.b")?;
        let mut h = g.conv1d(x, w, b, c.conv_kernel, c.conv_stride)?;
        for layer in 1..=c.lstm_layers {
            h = self.bilstm_layer(g, h, layer)?;
            h = hook.after_lstm_layer(g, layer, h)?;
        }
        let aw = g.param(&self.params, "attn.W")?;
        let abw = g.param(&self.params, "attn.b_w")?;
        let av = g.param(&self.params, "attn.V")?;
        let abv = g.param(&self.params, "attn.b_v")?;
        let (pooled, attention) = attention_pool(g, h, aw, abw, av, abv)?;
        let embedding = g.l2_normalize(pooled)?;
        Ok(CaptionNodes {
            embedding,
            attention,
            hidden: h,
        })
    }

    pub fn encode_image(&self, img_feat: &[f64]) -> Result<Embedding> {
        encode_image(img_feat, self.params.get("image.A")?, self.params.get("image.b")?)
    }

    /// Inference encoding; inserted codebooks quantise without touching
    /// their usage counters.
    pub fn encode_caption(&self, fs: &FeatureSequence) -> Result<Embedding> {
        let mut g = Graph::new();
        let nodes = if self.has_vq() {
            self.caption_forward(&mut g, fs, &mut InferenceVq::new(&self.codebooks))?
        } else {
            self.caption_forward(&mut g, fs, &mut NoHook)?
        };
        Ok(Embedding {
            vector: g.value(nodes.embedding).values().to_vec(),
            modality: Modality::Caption,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let cfg = toml::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(dir.join("model.toml"), cfg)?;
        self.params.save(&dir.join("params.ckpt"))?;
        for (i, cb) in self.codebooks.iter().enumerate() {
            cb.save(&dir.join(format!("codebook{}.txt", i + 1)))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join("model.toml");
        let text = std::fs::read_to_string(&cfg_path)
            .map_err(|e| Error::MissingInput(format!("{}: {e}", cfg_path.display())))?;
        let config: ModelConfig = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        let params = ParamStore::load(&dir.join("params.ckpt"))?;
        let mut codebooks = Vec::new();
        for i in 1.. {
            let p = dir.join(format!("codebook{i}.txt"));
            if !p.exists() {
                break;
            }
            codebooks.push(Codebook::load(&p)?);
        }
        Ok(GroundingModel {
            config,
            params,
            codebooks,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(t: usize, seed: u64) -> FeatureSequence {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..t * 39).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureSequence::new("u", t, 39, data).unwrap()
    }

    #[test]
    fn identity_projection_gives_unit_vector() {
        let a = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let e = encode_image(&[3.0, 4.0], &a, &b).unwrap();
        assert_eq!(e.vector, vec![0.6, 0.8]);
    }

    #[test]
    fn hand_projection_matches_matrix_arithmetic() {
        // A = [[1, 0, 2, -1], [0.5, 1, 0, 3]], b = [0.1, -0.2], x = [1, 2, -1, 0.5]
        // xAᵀ + b = [1 - 2 - 0.5 + 0.1, 0.5 + 2 + 1.5 - 0.2] = [-1.4, 3.8]
        let a = Tensor::matrix(2, 4, vec![1.0, 0.0, 2.0, -1.0, 0.5, 1.0, 0.0, 3.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.1, -0.2]).unwrap();
        let e = encode_image(&[1.0, 2.0, -1.0, 0.5], &a, &b).unwrap();
        let n = (1.4f64 * 1.4 + 3.8 * 3.8).sqrt();
        assert!((e.vector[0] + 1.4 / n).abs() < 1e-15);
        assert!((e.vector[1] - 3.8 / n).abs() < 1e-15);
    }

    #[test]
    fn image_dimension_mismatch_is_error() {
        let m = GroundingModel::init(ModelConfig::tiny()).unwrap();
        assert!(m.encode_image(&[0.0; 3]).is_err());
    }

    #[test]
    fn single_step_attention_returns_the_state() {
        let mut g = Graph::new();
        let h = g.constant(Tensor::row(vec![0.3, -0.7])).unwrap();
        let w = g.constant(Tensor::matrix(1, 2, vec![0.5, 0.2]).unwrap()).unwrap();
        let bw = g.constant(Tensor::row(vec![0.1])).unwrap();
        let v = g.constant(Tensor::matrix(2, 1, vec![1.0, -2.0]).unwrap()).unwrap();
        let bv = g.constant(Tensor::row(vec![0.0, 0.3])).unwrap();
        let (pooled, weights) = attention_pool(&mut g, h, w, bw, v, bv).unwrap();
        assert_eq!(g.value(weights).values(), &[1.0, 1.0]);
        assert_eq!(g.value(pooled).values(), &[0.3, -0.7]);
    }

    #[test]
    fn identical_states_get_uniform_weights() {
        let mut g = Graph::new();
        let h = g.constant(Tensor::matrix(4, 2, vec![0.3, -0.7, 0.3, -0.7, 0.3, -0.7, 0.3, -0.7]).unwrap()).unwrap();
        let w = g.constant(Tensor::matrix(1, 2, vec![0.5, 0.2]).unwrap()).unwrap();
        let bw = g.constant(Tensor::row(vec![0.1])).unwrap();
        let v = g.constant(Tensor::matrix(2, 1, vec![1.0, -2.0]).unwrap()).unwrap();
        let bv = g.constant(Tensor::row(vec![0.0, 0.3])).unwrap();
        let (pooled, weights) = attention_pool(&mut g, h, w, bw, v, bv).unwrap();
        assert!(g.value(weights).values().iter().all(|w| (w - 0.25).abs() < 1e-15));
        assert!((g.value(pooled).values()[0] - 0.3).abs() < 1e-15);
        assert!((g.value(pooled).values()[1] + 0.7).abs() < 1e-15);
    }

    #[test]
    fn two_step_attention_by_hand() {
        // h1 = [1, 0], h2 = [0, 2]; W = [[1, 1]], b_w = 0; V = [[1], [-1]], b_v = 0
        // u1 = tanh(1), u2 = tanh(2); logits channel 0: (u1, u2), channel 1: (-u1, -u2)
        let (u1, u2) = (1f64.tanh(), 2f64.tanh());
        let a0 = [u1.exp() / (u1.exp() + u2.exp()), u2.exp() / (u1.exp() + u2.exp())];
        let a1 = [(-u1).exp() / ((-u1).exp() + (-u2).exp()), (-u2).exp() / ((-u1).exp() + (-u2).exp())];
        let expect = [a0[0] * 1.0 + a0[1] * 0.0, a1[0] * 0.0 + a1[1] * 2.0];

        let mut g = Graph::new();
        let h = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap()).unwrap();
        let w = g.constant(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap()).unwrap();
        let bw = g.constant(Tensor::row(vec![0.0])).unwrap();
        let v = g.constant(Tensor::matrix(2, 1, vec![1.0, -1.0]).unwrap()).unwrap();
        let bv = g.constant(Tensor::row(vec![0.0, 0.0])).unwrap();
        let (pooled, _) = attention_pool(&mut g, h, w, bw, v, bv).unwrap();
        let got = g.value(pooled).values();
        assert!((got[0] - expect[0]).abs() < 1e-15);
        assert!((got[1] - expect[1]).abs() < 1e-15);
    }

    #[test]
    fn conv_halves_100_frames_to_50() {
        let m = GroundingModel::init(ModelConfig::default()).unwrap();
        let mut g = Graph::new();
        let nodes = m.caption_forward(&mut g, &seq(100, 1), &mut NoHook).unwrap();
        assert_eq!(g.value(nodes.hidden).rows(), 50);
        assert_eq!(g.value(nodes.attention).dims2(), Some((50, 64)));
    }

    #[test]
    fn caption_embedding_is_unit_norm_and_deterministic() {
        let m = GroundingModel::init(ModelConfig::default()).unwrap();
        let fs = seq(37, 2);
        let a = m.encode_caption(&fs).unwrap();
        let b = m.encode_caption(&fs).unwrap();
        assert_eq!(a, b);
        let n: f64 = a.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prefix_embedding_differs_from_full() {
        let m = GroundingModel::init(ModelConfig::default()).unwrap();
        let fs = seq(30, 3);
        let full = m.encode_caption(&fs).unwrap();
        let part = m.encode_caption(&fs.prefix(12).unwrap()).unwrap();
        assert!(full.cosine(&part) < 1.0 - 1e-9);
    }

    #[test]
    fn wrong_feature_dim_rejected() {
        let m = GroundingModel::init(ModelConfig::default()).unwrap();
        let fs = FeatureSequence::new("u", 4, 13, vec![0.0; 52]).unwrap();
        assert!(m.encode_caption(&fs).is_err());
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let m = GroundingModel::init(ModelConfig::tiny()).unwrap();
        let b = m.params.get("lstm2.bw.b").unwrap().values();
        assert!(b[8..16].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn embed_dim_must_be_twice_hidden() {
        let cfg = ModelConfig {
            embed_dim: 10,
            ..ModelConfig::tiny()
        };
        assert!(GroundingModel::init(cfg).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = GroundingModel::init(ModelConfig::tiny()).unwrap();
        m.save(dir.path()).unwrap();
        assert_eq!(GroundingModel::load(dir.path()).unwrap(), m);
    }
}
