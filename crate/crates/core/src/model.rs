//! The policy transformer: patch embedding, token assembly, causal blocks
//! with per-layer taps, and the action head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sf_autograd::{AttentionWeights, Bound, ParamId, ParamStore, Tape, TensorId};
use sf_scene::RenderOutput;

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Vision,
    Language,
    Action,
}

#[derive(Clone, Debug)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bq: ParamId,
    bk: ParamId,
    bv: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    patch_w: ParamId,
    patch_b: ParamId,
    lang: ParamId,
    pos: ParamId,
    queries: ParamId,
    blocks: Vec<BlockIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    head_w1: ParamId,
    head_b1: ParamId,
    head_w2: ParamId,
    head_b2: ParamId,
}

/// Expected `(name, shape)` of every backbone parameter, in store order.
fn param_specs(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, h) = (c.d_model, c.mlp_hidden());
    let mut v = vec![
        ("patch_proj.w".to_string(), vec![c.patch_pixels(), d]),
        ("patch_proj.b".to_string(), vec![d]),
        ("lang_embed".to_string(), vec![c.vocab, d]),
        ("pos_embed".to_string(), vec![c.seq_len(), d]),
        ("action_queries".to_string(), vec![c.n_action_queries, d]),
    ];
    for l in 0..c.n_layers {
        let p = |s: &str| format!("blocks.{l}.{s}");
        for (name, shape) in [
            ("ln1.gamma", vec![d]),
            ("ln1.beta", vec![d]),
            ("attn.wq", vec![d, d]),
            ("attn.wk", vec![d, d]),
            ("attn.wv", vec![d, d]),
            ("attn.wo", vec![d, d]),
            ("attn.bq", vec![d]),
            ("attn.bk", vec![d]),
            ("attn.bv", vec![d]),
            ("attn.bo", vec![d]),
            ("ln2.gamma", vec![d]),
            ("ln2.beta", vec![d]),
            ("mlp.w1", vec![d, h]),
            ("mlp.b1", vec![h]),
            ("mlp.w2", vec![h, d]),
            ("mlp.b2", vec![d]),
        ] {
            v.push((p(name), shape));
        }
    }
    v.extend([
        ("ln_f.gamma".to_string(), vec![d]),
        ("ln_f.beta".to_string(), vec![d]),
        ("head.w1".to_string(), vec![d, 64]),
        ("head.b1".to_string(), vec![64]),
        ("head.w2".to_string(), vec![64, c.action_dim]),
        ("head.b2".to_string(), vec![c.action_dim]),
    ]);
    v
}

/// Backbone weights (everything used at inference time).
#[derive(Clone, Debug)]
pub struct VlaParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    layout: Layout,
}

impl VlaParams {
    /// Random initialisation: linear maps ~ N(0, 1/fan_in) with residual
    /// output maps scaled by 1/sqrt(2·n_layers); embeddings ~ N(0, 0.02²);
    /// biases zero, layer-norm gains one.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let residual = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let mut store = ParamStore::new();
        for (name, shape) in param_specs(config) {
            let n: usize = shape.iter().product();
            let leaf = name.rsplit('.').next().unwrap_or(&name);
            let std = if leaf == "gamma" || leaf.starts_with('b') {
                None
            } else if name.ends_with("embed") || name == "action_queries" {
                Some(0.02)
            } else {
                let s = 1.0 / (shape[0] as f64).sqrt();
                let out_map = name.starts_with("blocks") && (leaf == "wo" || leaf == "w2");
                Some(if out_map { s * residual } else { s })
            };
            let data = match std {
                Some(s) => {
                    let dist = Normal::new(0.0, s).expect("positive std");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
                None if leaf == "gamma" => vec![1.0; n],
                None => vec![0.0; n],
            };
            store.add(name, &shape, data)?;
        }
        Self::from_store(config.clone(), store)
    }

    /// Wraps a store after checking that it holds exactly the expected
    /// parameters.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != store.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} backbone parameters, found {}",
                specs.len(),
                store.len()
            )));
        }
        let find = |name: &str| -> Result<ParamId> {
            let id = store.find(name).ok_or_else(|| ModelError::Checkpoint(format!("missing parameter `{name}`")))?;
            let expected = &specs.iter().find(|(n, _)| n == name).expect("spec").1;
            if &store.get(id).shape != expected {
                return Err(ModelError::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {expected:?}",
                    store.get(id).shape
                )));
            }
            Ok(id)
        };
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let f = |s: &str| find(&format!("blocks.{l}.{s}"));
            blocks.push(BlockIds {
                ln1_g: f("ln1.gamma")?,
                ln1_b: f("ln1.beta")?,
                wq: f("attn.wq")?,
                wk: f("attn.wk")?,
                wv: f("attn.wv")?,
                wo: f("attn.wo")?,
                bq: f("attn.bq")?,
                bk: f("attn.bk")?,
                bv: f("attn.bv")?,
                bo: f("attn.bo")?,
                ln2_g: f("ln2.gamma")?,
                ln2_b: f("ln2.beta")?,
                w1: f("mlp.w1")?,
                b1: f("mlp.b1")?,
                w2: f("mlp.w2")?,
                b2: f("mlp.b2")?,
            });
        }
        let layout = Layout {
            patch_w: find("patch_proj.w")?,
            patch_b: find("patch_proj.b")?,
            lang: find("lang_embed")?,
            pos: find("pos_embed")?,
            queries: find("action_queries")?,
            blocks,
            lnf_g: find("ln_f.gamma")?,
            lnf_b: find("ln_f.beta")?,
            head_w1: find("head.w1")?,
            head_b1: find("head.b1")?,
            head_w2: find("head.w2")?,
            head_b2: find("head.b2")?,
        };
        Ok(Self { config, store, layout })
    }

    pub fn patch_projection(&self) -> ParamId {
        self.layout.patch_w
    }

    pub fn position_table(&self) -> ParamId {
        self.layout.pos
    }

    pub fn language_table(&self) -> ParamId {
        self.layout.lang
    }
}

/// Cuts each view into `patch_size²·channels` rows: view-major, then raster
/// order over the patch grid, pixels row-major with interleaved channels
/// inside a patch.
pub fn patchify(views: &[RenderOutput], config: &ModelConfig) -> Result<Vec<f64>> {
    if views.len() != config.n_views {
        return Err(ModelError::Dimension {
            what: "view count",
            expected: config.n_views.to_string(),
            got: views.len().to_string(),
        });
    }
    let (h, w, ch, p) = (config.image_height, config.image_width, config.image_channels, config.patch_size);
    let mut out = Vec::with_capacity(config.n_visual_tokens() * config.patch_pixels());
    for v in views {
        if v.height != h || v.width != w || v.image.len() != h * w * ch {
            return Err(ModelError::Dimension {
                what: "image size",
                expected: format!("{h}x{w}x{ch}"),
                got: format!("{}x{}x{}", v.height, v.width, v.image.len() / (v.height * v.width).max(1)),
            });
        }
        for pr in 0..h / p {
            for pc in 0..w / p {
                for r in pr * p..(pr + 1) * p {
                    let start = (r * w + pc * p) * ch;
                    out.extend(v.image[start..start + p * ch].iter().map(|&x| x as f64));
                }
            }
        }
    }
    Ok(out)
}

/// Embedded inputs of a batch on a tape, in `[V×N, L×M, A×K]` order.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    /// `[batch, N+M+K, d_model]`.
    pub embeddings: TensorId,
    pub segments: Vec<Segment>,
    pub batch: usize,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[batch, K, action_dim]`.
    pub actions: TensorId,
    /// Block outputs, `taps[l]` recorded after block `l + 1`; each
    /// `[batch, N+M+K, d_model]`.
    pub taps: Vec<TensorId>,
}

impl VlaParams {
    /// Embeds `batch` samples. `patches` holds `batch·N` rows of patch pixels
    /// and `instruction_ids` holds `batch·M` token ids.
    pub fn assemble(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        patches: &[f64],
        instruction_ids: &[usize],
        batch: usize,
    ) -> Result<TokenSequence> {
        let c = &self.config;
        let (n, m, k, d) = (c.n_visual_tokens(), c.n_lang_tokens, c.n_action_queries, c.d_model);
        if batch == 0 || patches.len() != batch * n * c.patch_pixels() {
            return Err(ModelError::Dimension {
                what: "patch matrix",
                expected: format!("{batch}x{n}x{}", c.patch_pixels()),
                got: format!("{} values", patches.len()),
            });
        }
        if instruction_ids.len() != batch * m {
            return Err(ModelError::Dimension {
                what: "instruction length",
                expected: (batch * m).to_string(),
                got: instruction_ids.len().to_string(),
            });
        }
        if let Some(&id) = instruction_ids.iter().find(|&&id| id >= c.vocab) {
            return Err(ModelError::BadToken { id, vocab: c.vocab });
        }
        let l = &self.layout;
        let px = tape.constant(&[batch * n, c.patch_pixels()], patches.to_vec())?;
        let vis = tape.matmul(px, bound[l.patch_w])?;
        let vis = tape.add(vis, bound[l.patch_b])?;
        let vis = tape.reshape(vis, &[batch, n, d])?;
        let lang = tape.embedding(bound[l.lang], instruction_ids)?;
        let lang = tape.reshape(lang, &[batch, m, d])?;
        let zeros = tape.constant(&[batch, k, d], vec![0.0; batch * k * d])?;
        let queries = tape.add(zeros, bound[l.queries])?;
        let seq = tape.concat(&[vis, lang, queries], 1)?;
        let embeddings = tape.add(seq, bound[l.pos])?;
        let mut segments = vec![Segment::Vision; n];
        segments.extend(std::iter::repeat_n(Segment::Language, m));
        segments.extend(std::iter::repeat_n(Segment::Action, k));
        Ok(TokenSequence { embeddings, segments, batch })
    }

    /// Pre-norm causal blocks followed by the action head on the K query
    /// positions of the final layer.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, tokens: &TokenSequence) -> Result<ForwardOutput> {
        let c = &self.config;
        let (b, t, d) = (tokens.batch, c.seq_len(), c.d_model);
        let lay = &self.layout;
        let mut x = tokens.embeddings;
        let mut taps = Vec::with_capacity(c.n_layers);
        for (i, blk) in lay.blocks.iter().enumerate() {
            let h = tape.layer_norm(x, bound[blk.ln1_g], bound[blk.ln1_b])?;
            let w = AttentionWeights {
                wq: bound[blk.wq],
                wk: bound[blk.wk],
                wv: bound[blk.wv],
                wo: bound[blk.wo],
                bq: Some(bound[blk.bq]),
                bk: Some(bound[blk.bk]),
                bv: Some(bound[blk.bv]),
                bo: Some(bound[blk.bo]),
            };
            let a = tape.causal_self_attention(h, &w, c.n_heads)?;
            x = tape.add(x, a)?;
            let h = tape.layer_norm(x, bound[blk.ln2_g], bound[blk.ln2_b])?;
            let h = tape.reshape(h, &[b * t, d])?;
            let h = tape.matmul(h, bound[blk.w1])?;
            let h = tape.add(h, bound[blk.b1])?;
            let h = tape.gelu(h);
            let h = tape.matmul(h, bound[blk.w2])?;
            let h = tape.add(h, bound[blk.b2])?;
            let h = tape.reshape(h, &[b, t, d])?;
            x = tape.add(x, h)?;
            if !tape.value(x).iter().all(|v| v.is_finite()) {
                return Err(ModelError::NonFinite { layer: i + 1 });
            }
            taps.push(x);
        }
        let k = c.n_action_queries;
        let q = tape.slice(x, 1, t - k, t)?;
        let q = tape.layer_norm(q, bound[lay.lnf_g], bound[lay.lnf_b])?;
        let q = tape.reshape(q, &[b * k, d])?;
        let h = tape.matmul(q, bound[lay.head_w1])?;
        let h = tape.add(h, bound[lay.head_b1])?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, bound[lay.head_w2])?;
        let h = tape.add(h, bound[lay.head_b2])?;
        let actions = tape.reshape(h, &[b, k, c.action_dim])?;
        Ok(ForwardOutput { actions, taps })
    }

    /// `assemble` + `forward` in one call.
    pub fn run(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        patches: &[f64],
        instruction_ids: &[usize],
        batch: usize,
    ) -> Result<ForwardOutput> {
        let tokens = self.assemble(tape, bound, patches, instruction_ids, batch)?;
        self.forward(tape, bound, &tokens)
    }

    /// First action-query prediction for each of `batch` samples. Uses the
    /// backbone only.
    pub fn predict_batch(&self, patches: &[f64], instruction_ids: &[usize], batch: usize) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let bound = tape.bind(&self.store, false);
        let out = self.run(&mut tape, &bound, patches, instruction_ids, batch)?;
        let (k, a) = (self.config.n_action_queries, self.config.action_dim);
        let v = tape.value(out.actions);
        Ok((0..batch).map(|i| v[i * k * a..i * k * a + a].to_vec()).collect())
    }

    /// The action executed by closed-loop control for one observation.
    pub fn predict_action(&self, views: &[RenderOutput], instruction_ids: &[u16]) -> Result<Vec<f64>> {
        let patches = patchify(views, &self.config)?;
        let ids: Vec<usize> = instruction_ids.iter().map(|&i| i as usize).collect();
        Ok(self.predict_batch(&patches, &ids, 1)?.remove(0))
    }
}

/// Mean absolute error over all entries of `pred` and `target`.
pub fn action_loss(tape: &mut Tape, pred: TensorId, target: TensorId) -> Result<TensorId> {
    Ok(tape.l1_loss(pred, target)?)
}

/// The `horizon` expert actions starting at step `t`, padded with the final
/// action when the episode ends first. Flattened `[horizon, action_dim]`.
pub fn action_chunk(actions: &[[f32; 4]], t: usize, horizon: usize) -> Vec<f64> {
    let last = actions.len() - 1;
    (0..horizon).flat_map(|k| actions[(t + k).min(last)].map(f64::from)).collect()
}
