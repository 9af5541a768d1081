use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::PmformerConfig;
use crate::autograd::{Checkpoint, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Whether a forward pass is for training (dropout active, drawing from the
/// given stream) or evaluation.
pub enum Pass<'r> {
    Eval,
    Train(&'r mut dyn RngCore),
}

#[derive(Debug, Clone, PartialEq)]
struct AttnIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct NormIds {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct BlockIds {
    norm_ta: NormIds,
    ta: AttnIds,
    norm_fa: NormIds,
    fa: AttnIds,
    norm_mlp: NormIds,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct ModelIds {
    e_x: ParamId,
    e_time: ParamId,
    e_feat: ParamId,
    blocks: Vec<BlockIds>,
    head_w: ParamId,
    head_b: ParamId,
}

/// Parameters of one model bound into a graph.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    fn get(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }
}

/// Partial-multivariate transformer: per-feature tokens, stacked
/// temporal/feature attention blocks, and one linear head shared by all
/// features.
#[derive(Debug, Clone, PartialEq)]
pub struct Pmformer {
    config: PmformerConfig,
    pub params: ParamStore,
    ids: ModelIds,
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| rng.gen_range(-a..a))
}

fn small(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-0.1..0.1))
}

impl Pmformer {
    /// Fresh model with parameters drawn from a seeded stream.
    pub fn new(config: PmformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (dim, sl, d) = (config.dim, config.window, config.num_features);

        let e_x = p.add("embed.x", glorot(&mut rng, 1, dim));
        let e_time = p.add("embed.time", small(&mut rng, &[sl, dim]));
        let e_feat = p.add("embed.feat", small(&mut rng, &[d, dim]));

        let norm = |p: &mut ParamStore, name: &str| NormIds {
            gamma: p.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: p.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        };
        let attn = |p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str| AttnIds {
            wq: p.add(format!("{name}.wq"), glorot(rng, dim, dim)),
            bq: p.add(format!("{name}.bq"), Tensor::zeros(&[dim])),
            wk: p.add(format!("{name}.wk"), glorot(rng, dim, dim)),
            bk: p.add(format!("{name}.bk"), Tensor::zeros(&[dim])),
            wv: p.add(format!("{name}.wv"), glorot(rng, dim, dim)),
            bv: p.add(format!("{name}.bv"), Tensor::zeros(&[dim])),
            wo: p.add(format!("{name}.wo"), glorot(rng, dim, dim)),
            bo: p.add(format!("{name}.bo"), Tensor::zeros(&[dim])),
        };
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let b = format!("block{l}");
            blocks.push(BlockIds {
                norm_ta: norm(&mut p, &format!("{b}.norm_ta")),
                ta: attn(&mut p, &mut rng, &format!("{b}.ta")),
                norm_fa: norm(&mut p, &format!("{b}.norm_fa")),
                fa: attn(&mut p, &mut rng, &format!("{b}.fa")),
                norm_mlp: norm(&mut p, &format!("{b}.norm_mlp")),
                w1: p.add(format!("{b}.mlp.w1"), glorot(&mut rng, dim, config.d_ff)),
                b1: p.add(format!("{b}.mlp.b1"), Tensor::zeros(&[config.d_ff])),
                w2: p.add(format!("{b}.mlp.w2"), glorot(&mut rng, config.d_ff, dim)),
                b2: p.add(format!("{b}.mlp.b2"), Tensor::zeros(&[dim])),
            });
        }
        let head_w = p.add("head.w", glorot(&mut rng, sl * dim, 1));
        let head_b = p.add("head.b", Tensor::zeros(&[1]));
        Ok(Self {
            config,
            params: p,
            ids: ModelIds {
                e_x,
                e_time,
                e_feat,
                blocks,
                head_w,
                head_b,
            },
        })
    }

    pub fn config(&self) -> &PmformerConfig {
        &self.config
    }

    /// Binds every parameter into `g`. Reuse one binding for all forward
    /// passes that share a loss so gradients accumulate once per parameter.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.params.ids().map(|id| g.param(&self.params, id)).collect(),
        }
    }

    pub fn check_subset(&self, feature_ids: &[usize]) -> Result<()> {
        if feature_ids.is_empty() {
            return Err(Error::Subset("empty feature subset".into()));
        }
        let mut seen = vec![false; self.config.num_features];
        for &f in feature_ids {
            if f >= self.config.num_features {
                return Err(Error::Subset(format!(
                    "feature id {f} out of range for {} features",
                    self.config.num_features
                )));
            }
            if std::mem::replace(&mut seen[f], true) {
                return Err(Error::Subset(format!("duplicate feature id {f}")));
            }
        }
        Ok(())
    }

    /// Tokens `(N, S, SL, dim)` from inputs `(N, S, SL)`:
    /// `E_x * x + E_time[t] + E_feat[id]`.
    pub fn embed(&self, g: &mut Graph, b: &Bound, x: Var, feature_ids: &[usize]) -> Result<Var> {
        self.check_subset(feature_ids)?;
        let shape = g.shape(x).to_vec();
        let (sl, s) = (self.config.window, feature_ids.len());
        if shape.len() != 3 || shape[1] != s || shape[2] != sl {
            return Err(Error::shape("embed", &shape, &[shape.first().copied().unwrap_or(0), s, sl]));
        }
        let dim = self.config.dim;
        let x4 = g.reshape(x, &[shape[0], s, sl, 1])?;
        let proj = g.matmul(x4, b.get(self.ids.e_x))?;
        let with_time = g.add(proj, b.get(self.ids.e_time))?;
        let feat = g.index_select(b.get(self.ids.e_feat), feature_ids)?;
        let feat = g.reshape(feat, &[s, 1, dim])?;
        g.add(with_time, feat)
    }

    fn norm(&self, g: &mut Graph, b: &Bound, ids: &NormIds, x: Var) -> Result<Var> {
        let n = g.layer_norm(x)?;
        let n = g.mul(n, b.get(ids.gamma))?;
        g.add(n, b.get(ids.beta))
    }

    fn linear(g: &mut Graph, x: Var, w: Var, bias: Var) -> Result<Var> {
        let y = g.matmul(x, w)?;
        g.add(y, bias)
    }

    /// Multi-head self-attention over axis 1 of `(M, L, dim)`. Also returns
    /// the `(M, H, L, L)` attention weights.
    fn mha(&self, g: &mut Graph, b: &Bound, ids: &AttnIds, x: Var) -> Result<(Var, Var)> {
        let shape = g.shape(x).to_vec();
        let (m, l, dim) = (shape[0], shape[1], shape[2]);
        let (h, dh) = (self.config.heads, self.config.head_dim());
        let heads = |g: &mut Graph, w: ParamId, bias: ParamId| -> Result<Var> {
            let y = Self::linear(g, x, b.get(w), b.get(bias))?;
            let y = g.reshape(y, &[m, l, h, dh])?;
            g.permute(y, &[0, 2, 1, 3])
        };
        let q = heads(g, ids.wq, ids.bq)?;
        let k = heads(g, ids.wk, ids.bk)?;
        let v = heads(g, ids.wv, ids.bv)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let att = g.softmax(scores)?;
        let o = g.matmul(att, v)?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[m, l, dim])?;
        Ok((Self::linear(g, o, b.get(ids.wo), b.get(ids.bo))?, att))
    }

    fn block_ids(&self, block: usize) -> Result<&BlockIds> {
        self.ids.blocks.get(block).ok_or_else(|| {
            Error::InvalidParameter(format!("block {block} of {}", self.ids.blocks.len()))
        })
    }

    fn check_tokens(&self, g: &Graph, h: Var) -> Result<[usize; 4]> {
        let s = g.shape(h);
        if s.len() != 4 || s[2] != self.config.window || s[3] != self.config.dim {
            return Err(Error::shape("tokens", s, &[self.config.window, self.config.dim]));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// Pre-normed self-attention across time, separately for every feature.
    pub fn temporal_attention(&self, g: &mut Graph, b: &Bound, block: usize, h: Var) -> Result<Var> {
        self.temporal_attention_with_weights(g, b, block, h).map(|(o, _)| o)
    }

    fn temporal_attention_with_weights(
        &self,
        g: &mut Graph,
        b: &Bound,
        block: usize,
        h: Var,
    ) -> Result<(Var, Var)> {
        let [n, s, sl, dim] = self.check_tokens(g, h)?;
        let ids = self.block_ids(block)?;
        let x = self.norm(g, b, &ids.norm_ta, h)?;
        let x = g.reshape(x, &[n * s, sl, dim])?;
        let (o, att) = self.mha(g, b, &ids.ta, x)?;
        Ok((g.reshape(o, &[n, s, sl, dim])?, att))
    }

    /// Pre-normed self-attention across features, separately for every time
    /// step.
    pub fn feature_attention(&self, g: &mut Graph, b: &Bound, block: usize, h: Var) -> Result<Var> {
        let [n, s, sl, dim] = self.check_tokens(g, h)?;
        let ids = self.block_ids(block)?;
        let x = self.norm(g, b, &ids.norm_fa, h)?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        let x = g.reshape(x, &[n * sl, s, dim])?;
        let (o, _) = self.mha(g, b, &ids.fa, x)?;
        let o = g.reshape(o, &[n, sl, s, dim])?;
        g.permute(o, &[0, 2, 1, 3])
    }

    /// `H + MLP(FA(TA(H)))`, with one residual around the whole block.
    pub fn encoder_block(
        &self,
        g: &mut Graph,
        b: &Bound,
        block: usize,
        h: Var,
        pass: &mut Pass<'_>,
    ) -> Result<Var> {
        let keep = 1.0 - self.config.dropout;
        let ids = self.block_ids(block)?;
        let mut drop = |g: &mut Graph, x: Var| -> Result<Var> {
            match pass {
                Pass::Train(rng) if keep < 1.0 => g.dropout(x, keep, &mut **rng),
                _ => Ok(x),
            }
        };
        let ta = self.temporal_attention(g, b, block, h)?;
        let ta = drop(g, ta)?;
        let fa = self.feature_attention(g, b, block, ta)?;
        let fa = drop(g, fa)?;
        let x = self.norm(g, b, &ids.norm_mlp, fa)?;
        let x = Self::linear(g, x, b.get(ids.w1), b.get(ids.b1))?;
        let x = g.gelu(x);
        let x = Self::linear(g, x, b.get(ids.w2), b.get(ids.b2))?;
        let x = drop(g, x)?;
        g.add(h, x)
    }

    /// Predictions `(N, S)` for inputs `(N, S, SL)` of the listed features.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        b: &Bound,
        x: Var,
        feature_ids: &[usize],
        pass: &mut Pass<'_>,
    ) -> Result<Var> {
        let mut h = self.embed(g, b, x, feature_ids)?;
        for l in 0..self.config.layers {
            h = self.encoder_block(g, b, l, h, pass)?;
        }
        let [n, s, sl, dim] = self.check_tokens(g, h)?;
        let flat = g.reshape(h, &[n, s, sl * dim])?;
        let y = Self::linear(g, flat, b.get(self.ids.head_w), b.get(self.ids.head_b))?;
        g.reshape(y, &[n, s])
    }

    /// Gathers `(N, S, SL)` inputs from full `SL x D` row-major windows.
    pub fn gather_inputs(&self, windows: &[&[f64]], feature_ids: &[usize]) -> Result<Tensor> {
        let (sl, d) = (self.config.window, self.config.num_features);
        let s = feature_ids.len();
        let mut data = Vec::with_capacity(windows.len() * s * sl);
        for w in windows {
            if w.len() != sl * d {
                return Err(Error::shape("window", &[w.len()], &[sl, d]));
            }
            for &f in feature_ids {
                data.extend((0..sl).map(|t| w[t * d + f]));
            }
        }
        Tensor::new(&[windows.len(), s, sl], data)
    }

    /// Token grid `(S, SL, dim)` for one `SL x S` window.
    pub fn embed_tokens(&self, window: &[f64], feature_ids: &[usize]) -> Result<Tensor> {
        let x = self.subset_window(window, feature_ids)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let x = g.constant(x);
        let t = self.embed(&mut g, &b, x, feature_ids)?;
        let shape = g.shape(t)[1..].to_vec();
        g.value(t).clone().reshaped(&shape)
    }

    fn subset_window(&self, window: &[f64], feature_ids: &[usize]) -> Result<Tensor> {
        let (sl, s) = (self.config.window, feature_ids.len());
        if window.len() != sl * s {
            return Err(Error::shape("window", &[window.len()], &[sl, s]));
        }
        Ok(Tensor::from_fn(&[1, s, sl], |i| window[(i % sl) * s + i / sl]))
    }

    /// One scaled next-step prediction per subset feature, ordered as
    /// `feature_ids`, for an `SL x S` row-major window of those features.
    pub fn forward(&self, window: &[f64], feature_ids: &[usize]) -> Result<Vec<f64>> {
        let x = self.subset_window(window, feature_ids)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let x = g.constant(x);
        let y = self.forward_graph(&mut g, &b, x, feature_ids, &mut Pass::Eval)?;
        Ok(g.value(y).data().to_vec())
    }

    /// Evaluation-mode predictions `(N, S)` for full windows.
    pub fn forward_windows(&self, windows: &[&[f64]], feature_ids: &[usize]) -> Result<Vec<f64>> {
        let x = self.gather_inputs(windows, feature_ids)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let x = g.constant(x);
        let y = self.forward_graph(&mut g, &b, x, feature_ids, &mut Pass::Eval)?;
        Ok(g.value(y).data().to_vec())
    }

    /// Target-channel prediction for each full `SL x D` window, averaged over
    /// `k` random subsets that all contain the target. The same `k` subsets
    /// are used for every window of the call.
    pub fn predict_target_batch<R: Rng + ?Sized>(
        &self,
        windows: &[&[f64]],
        k: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if k == 0 {
            return Err(Error::InvalidParameter("ensemble size must be >= 1".into()));
        }
        let mut acc = vec![0.0; windows.len()];
        for _ in 0..k {
            let subset = draw_target_subset(
                self.config.num_features,
                self.config.subset_size,
                self.config.target_channel,
                rng,
            )?;
            let pred = self.forward_windows(windows, &subset)?;
            let s = subset.len();
            for (n, a) in acc.iter_mut().enumerate() {
                *a += pred[n * s];
            }
        }
        Ok(acc.into_iter().map(|a| a / k as f64).collect())
    }

    pub fn predict_target<R: Rng + ?Sized>(&self, window: &[f64], k: usize, rng: &mut R) -> Result<f64> {
        Ok(self.predict_target_batch(&[window], k, rng)?[0])
    }

    pub fn to_checkpoint(&self, channel_names: &[String]) -> Checkpoint {
        let c = &self.config;
        Checkpoint::new(self.params.clone())
            .with_meta("kind", "pmformer")
            .with_meta("D", c.num_features)
            .with_meta("S", c.subset_size)
            .with_meta("SL", c.window)
            .with_meta("dim", c.dim)
            .with_meta("H", c.heads)
            .with_meta("d_ff", c.d_ff)
            .with_meta("L", c.layers)
            .with_meta("dropout", c.dropout)
            .with_meta("target_channel", c.target_channel)
            .with_meta("channels", channel_names.join(","))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind") != Some("pmformer") {
            return Err(Error::Format(format!(
                "expected a pmformer checkpoint, found kind {:?}",
                ck.meta("kind")
            )));
        }
        let config = PmformerConfig {
            num_features: ck.meta_parse("D")?,
            subset_size: ck.meta_parse("S")?,
            window: ck.meta_parse("SL")?,
            dim: ck.meta_parse("dim")?,
            heads: ck.meta_parse("H")?,
            d_ff: ck.meta_parse("d_ff")?,
            layers: ck.meta_parse("L")?,
            dropout: ck.meta_parse("dropout")?,
            target_channel: ck.meta_parse("target_channel")?,
        };
        let mut model = Self::new(config, 0)?;
        model.params.load_from(&ck.params)?;
        Ok(model)
    }
}

/// A subset of `size` distinct ids from `0..num_features`: the target first,
/// then `size - 1` others drawn uniformly without replacement.
pub fn draw_target_subset<R: Rng + ?Sized>(
    num_features: usize,
    size: usize,
    target: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if size > num_features || size == 0 || target >= num_features {
        return Err(Error::Config(format!(
            "cannot draw {size} of {num_features} features around target {target}"
        )));
    }
    let mut others: Vec<usize> = (0..num_features).filter(|&f| f != target).collect();
    for i in 0..size - 1 {
        let j = rng.gen_range(i..others.len());
        others.swap(i, j);
    }
    let mut out = Vec::with_capacity(size);
    out.push(target);
    out.extend_from_slice(&others[..size - 1]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> PmformerConfig {
        PmformerConfig {
            num_features: 6,
            subset_size: 3,
            window: 4,
            dim: 8,
            heads: 2,
            d_ff: 12,
            layers: 2,
            dropout: 0.0,
            target_channel: 5,
        }
    }

    fn window(sl: usize, s: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..sl * s).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    fn tokens(m: &Pmformer, seed: u64, s: usize) -> Tensor {
        let c = m.config();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[1, s, c.window, c.dim], |_| rng.gen_range(-1.0..1.0))
    }

    fn run(m: &Pmformer, t: &Tensor, f: impl Fn(&Pmformer, &mut Graph, &Bound, Var) -> Result<Var>) -> Tensor {
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let x = g.constant(t.clone());
        let y = f(m, &mut g, &b, x).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn embedding_is_additive_per_feature() {
        let mut m = Pmformer::new(toy(), 1).unwrap();
        for name in ["embed.x", "embed.time"] {
            let id = m.params.id(name).unwrap();
            m.params.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let ids = [4, 0, 2];
        let tok = m.embed_tokens(&[0.0; 12], &ids).unwrap();
        assert_eq!(tok.shape(), &[3, 4, 8]);
        let feat = m.params.value(m.params.id("embed.feat").unwrap()).data().to_vec();
        for (s, &id) in ids.iter().enumerate() {
            for t in 0..4 {
                let got = &tok.data()[(s * 4 + t) * 8..(s * 4 + t + 1) * 8];
                assert_eq!(got, &feat[id * 8..(id + 1) * 8]);
            }
        }
    }

    #[test]
    fn swapping_subset_positions_permutes_tokens() {
        let m = Pmformer::new(toy(), 2).unwrap();
        let w = window(4, 3, 3);
        let a = m.embed_tokens(&w, &[1, 3, 5]).unwrap();
        // swap columns 0 and 2 together with their ids
        let swapped: Vec<f64> = (0..12).map(|i| w[(i / 3) * 3 + [2, 1, 0][i % 3]]).collect();
        let b = m.embed_tokens(&swapped, &[5, 3, 1]).unwrap();
        let block = 4 * 8;
        assert_eq!(&a.data()[..block], &b.data()[2 * block..]);
        assert_eq!(&a.data()[block..2 * block], &b.data()[block..2 * block]);
    }

    #[test]
    fn subset_errors() {
        let m = Pmformer::new(toy(), 2).unwrap();
        assert!(matches!(m.forward(&[0.0; 12], &[1, 1, 2]), Err(Error::Subset(_))));
        assert!(matches!(m.forward(&[0.0; 12], &[1, 6, 2]), Err(Error::Subset(_))));
        assert!(matches!(m.forward(&[0.0; 8], &[1, 2, 3]), Err(Error::Shape { .. })));
    }

    #[test]
    fn temporal_attention_with_one_step_has_unit_weights() {
        let m = Pmformer::new(PmformerConfig { window: 1, ..toy() }, 3).unwrap();
        let t = tokens(&m, 4, 3);
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let x = g.constant(t);
        let (_, att) = m.temporal_attention_with_weights(&mut g, &b, 0, x).unwrap();
        assert_eq!(g.shape(att), &[3, 2, 1, 1]);
        assert!(g.value(att).data().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn temporal_attention_keeps_features_apart() {
        let m = Pmformer::new(toy(), 5).unwrap();
        let base = tokens(&m, 6, 3);
        let mut perturbed = base.clone();
        let per_feature = 4 * 8;
        for v in &mut perturbed.data_mut()[per_feature..] {
            *v += 0.5;
        }
        let ta = |m: &Pmformer, g: &mut Graph, b: &Bound, x: Var| m.temporal_attention(g, b, 0, x);
        let a = run(&m, &base, ta);
        let p = run(&m, &perturbed, ta);
        assert_eq!(&a.data()[..per_feature], &p.data()[..per_feature]);
        assert_ne!(&a.data()[per_feature..], &p.data()[per_feature..]);
    }

    #[test]
    fn feature_attention_keeps_time_steps_apart() {
        let m = Pmformer::new(toy(), 7).unwrap();
        let base = tokens(&m, 8, 3);
        let mut perturbed = base.clone();
        // perturb every feature's tokens at time 2 only
        for s in 0..3 {
            for j in 0..8 {
                perturbed.data_mut()[(s * 4 + 2) * 8 + j] -= 0.3;
            }
        }
        let fa = |m: &Pmformer, g: &mut Graph, b: &Bound, x: Var| m.feature_attention(g, b, 1, x);
        let a = run(&m, &base, fa);
        let p = run(&m, &perturbed, fa);
        for s in 0..3 {
            for t in [0, 1, 3] {
                let r = (s * 4 + t) * 8..(s * 4 + t + 1) * 8;
                assert_eq!(&a.data()[r.clone()], &p.data()[r]);
            }
        }
    }

    #[test]
    fn zeroed_block_is_identity() {
        let mut m = Pmformer::new(toy(), 9).unwrap();
        for id in m.params.ids().collect::<Vec<_>>() {
            if m.params.name(id).starts_with("block") {
                m.params.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let t = tokens(&m, 10, 3);
        let out = run(&m, &t, |m, g, b, x| m.encoder_block(g, b, 0, x, &mut Pass::Eval));
        assert_eq!(out, t);
    }

    #[test]
    fn output_length_and_determinism() {
        let m = Pmformer::new(toy(), 11).unwrap();
        let w = window(4, 3, 12);
        let y = m.forward(&w, &[0, 2, 5]).unwrap();
        assert_eq!(y.len(), 3);
        assert_eq!(y, m.forward(&w, &[0, 2, 5]).unwrap());
        assert_eq!(Pmformer::new(toy(), 11).unwrap(), m);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Pmformer::new(toy(), 13).unwrap();
        let names: Vec<String> = (0..6).map(|i| format!("c{i}")).collect();
        let ck = m.to_checkpoint(&names);
        let back = Pmformer::from_checkpoint(&Checkpoint::from_text(&ck.to_text()).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn target_subsets_contain_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let s = draw_target_subset(16, 4, 15, &mut rng).unwrap();
            assert_eq!(s[0], 15);
            let mut sorted = s.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 4);
        }
        assert!(draw_target_subset(3, 4, 0, &mut rng).is_err());
    }
}
