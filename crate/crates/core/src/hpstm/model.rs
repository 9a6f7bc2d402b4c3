use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::cholesky::CovarianceFactors;
use super::config::{Activation, ModelConfig};
use crate::diffcore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::kinematics::{forward_kinematics, PoseParameters, PoseSequence, Quaternion, SkeletonDefinition};

/// Lower bound added to the softplus of the bone-length head, in meters.
pub const BONE_LENGTH_FLOOR: f64 = 1e-4;
/// Initial log standard deviation of the covariance head diagonal.
const INITIAL_LOG_STD: f64 = -3.0;
const LAYER_NORM_EPS: f64 = 1e-5;

/// Model output for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedWindow {
    pub positions: PoseSequence<f64>,
    pub params: Vec<PoseParameters<f64>>,
    pub cov: Option<CovarianceFactors<f64>>,
}

/// Graph nodes produced by [`HpstmModel::forward_graph`].
#[derive(Debug, Clone, Copy)]
pub struct GraphOutputs {
    /// `[B, T, J, 3]`
    pub positions: Var,
    /// `[B, T, 3]`
    pub root: Var,
    /// `[B, T, J, 4]`, unit norm, `w >= 0`
    pub quaternions: Var,
    /// `[B, T, J]`, root entry 0
    pub lengths: Var,
    /// `[B, T, J, 6]` raw Cholesky entries
    pub chol_raw: Option<Var>,
}

#[derive(Debug, Clone)]
struct NormIds {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct LinearIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct AttentionIds {
    q: LinearIds,
    k: LinearIds,
    v: LinearIds,
    o: LinearIds,
}

#[derive(Debug, Clone)]
struct FeedForwardIds {
    up: LinearIds,
    down: LinearIds,
}

#[derive(Debug, Clone)]
struct EncoderIds {
    norm_attn: NormIds,
    attn: AttentionIds,
    norm_ff: NormIds,
    ff: FeedForwardIds,
}

#[derive(Debug, Clone)]
struct DecoderIds {
    norm_self: NormIds,
    self_attn: AttentionIds,
    norm_cross: NormIds,
    cross_attn: AttentionIds,
    norm_ff: NormIds,
    ff: FeedForwardIds,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: LinearIds,
    encoder: Vec<EncoderIds>,
    encoder_norm: NormIds,
    queries: ParamId,
    decoder: Vec<DecoderIds>,
    decoder_norm: NormIds,
    pose_head: LinearIds,
    cov_head: Option<LinearIds>,
}

/// Encoder-decoder attention smoother that decodes through forward kinematics.
#[derive(Debug)]
pub struct HpstmModel {
    config: ModelConfig,
    skeleton: SkeletonDefinition<f64>,
    params: ParamStore<f64>,
    layout: Layout,
    covariance_evaluations: AtomicUsize,
}

impl Clone for HpstmModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            skeleton: self.skeleton.clone(),
            params: self.params.clone(),
            layout: self.layout.clone(),
            covariance_evaluations: AtomicUsize::new(self.covariance_evaluations()),
        }
    }
}

/// Fixed sinusoidal encoding, `[T, d]`.
pub fn positional_encoding(frames: usize, d: usize) -> Tensor<f64> {
    let mut data = vec![0.0; frames * d];
    for t in 0..frames {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[t * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![frames, d], data).expect("shape")
}

struct Builder<'a> {
    store: &'a mut ParamStore<f64>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.store.insert(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    fn fill(&mut self, name: String, shape: &[usize], value: f64) -> ParamId {
        self.store.insert(name, Tensor::full(shape, value))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> LinearIds {
        let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
        LinearIds {
            w: self.uniform(format!("{name}.weight"), &[fan_in, fan_out], bound),
            b: self.fill(format!("{name}.bias"), &[fan_out], 0.0),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> NormIds {
        NormIds {
            gain: self.fill(format!("{name}.gain"), &[d], 1.0),
            bias: self.fill(format!("{name}.bias"), &[d], 0.0),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> AttentionIds {
        AttentionIds {
            q: self.linear(&format!("{name}.query"), d, d, 1.0),
            k: self.linear(&format!("{name}.key"), d, d, 1.0),
            v: self.linear(&format!("{name}.value"), d, d, 1.0),
            o: self.linear(&format!("{name}.out"), d, d, 1.0),
        }
    }

    fn feed_forward(&mut self, name: &str, d: usize, width: usize) -> FeedForwardIds {
        FeedForwardIds {
            up: self.linear(&format!("{name}.up"), d, width, 1.0),
            down: self.linear(&format!("{name}.down"), width, d, 1.0),
        }
    }
}

fn inverse_softplus(y: f64) -> f64 {
    if y > 20.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl HpstmModel {
    /// Randomly initialized model whose output heads start at the rest pose of `skeleton`.
    pub fn new(config: ModelConfig, skeleton: SkeletonDefinition<f64>, seed: u64) -> Result<Self> {
        config.validate()?;
        if skeleton.num_joints() != config.joints {
            return Err(Error::Config(format!(
                "config has {} joints, skeleton has {}",
                config.joints,
                skeleton.num_joints()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let j = config.joints;
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let embed = b.linear("embed", 3 * j, d, 1.0);
        let encoder = (0..config.encoder_layers)
            .map(|l| EncoderIds {
                norm_attn: b.norm(&format!("encoder.{l}.norm_attn"), d),
                attn: b.attention(&format!("encoder.{l}.attn"), d),
                norm_ff: b.norm(&format!("encoder.{l}.norm_ff"), d),
                ff: b.feed_forward(&format!("encoder.{l}.ff"), d, config.ff_width),
            })
            .collect();
        let encoder_norm = b.norm("encoder.norm", d);
        let queries = b
            .store
            .insert("decoder.queries", positional_encoding(config.window, d));
        let decoder = (0..config.decoder_layers)
            .map(|l| DecoderIds {
                norm_self: b.norm(&format!("decoder.{l}.norm_self"), d),
                self_attn: b.attention(&format!("decoder.{l}.self_attn"), d),
                norm_cross: b.norm(&format!("decoder.{l}.norm_cross"), d),
                cross_attn: b.attention(&format!("decoder.{l}.cross_attn"), d),
                norm_ff: b.norm(&format!("decoder.{l}.norm_ff"), d),
                ff: b.feed_forward(&format!("decoder.{l}.ff"), d, config.ff_width),
            })
            .collect();
        let decoder_norm = b.norm("decoder.norm", d);
        let pose_head = b.linear("pose_head", d, config.pose_width(), 0.1);
        let cov_head = config
            .covariance_head
            .then(|| b.linear("cov_head", d, 6 * j, 0.1));

        // Rest-pose biases: identity quaternions, canonical lengths.
        {
            let bias = store.get_mut(pose_head.b).value.data_mut();
            for jj in 0..j {
                bias[3 + 4 * jj] = 1.0;
                let canon = skeleton.canonical_lengths()[jj];
                bias[3 + 4 * j + jj] = inverse_softplus((canon - BONE_LENGTH_FLOOR).max(1e-3));
            }
        }
        if let Some(ch) = &cov_head {
            let bias = store.get_mut(ch.b).value.data_mut();
            for jj in 0..j {
                for k in 0..3 {
                    bias[6 * jj + k] = INITIAL_LOG_STD;
                }
            }
        }
        Ok(Self {
            config,
            skeleton,
            params: store,
            layout: Layout {
                embed,
                encoder,
                encoder_norm,
                queries,
                decoder,
                decoder_norm,
                pose_head,
                cov_head,
            },
            covariance_evaluations: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn skeleton(&self) -> &SkeletonDefinition<f64> {
        &self.skeleton
    }

    pub fn params(&self) -> &ParamStore<f64> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.params
    }

    /// How many times the covariance head has been evaluated.
    pub fn covariance_evaluations(&self) -> usize {
        self.covariance_evaluations.load(Ordering::Relaxed)
    }

    /// Writes `<path>` (manifest), `<path>.bin` (values) and `<path>.config.json`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.params.save(path)?;
        self.config.save(config_sidecar(path))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, skeleton: SkeletonDefinition<f64>) -> Result<Self> {
        let path = path.as_ref();
        let config = ModelConfig::load(config_sidecar(path))?;
        let mut model = Self::new(config, skeleton, 0)?;
        model.params.load_values(path)?;
        Ok(model)
    }

    fn check_windows(&self, windows: &[PoseSequence<f64>]) -> Result<()> {
        if windows.is_empty() {
            return Err(shape_err("model_forward", "empty batch"));
        }
        for w in windows {
            if w.frames() != self.config.window || w.joints() != self.config.joints {
                return Err(shape_err(
                    "model_forward",
                    format!(
                        "window {}x{} does not match config {}x{}",
                        w.frames(),
                        w.joints(),
                        self.config.window,
                        self.config.joints
                    ),
                ));
            }
            if !w.is_finite() {
                return Err(Error::NonFinite("model input window".into()));
            }
        }
        Ok(())
    }

    /// Builds the forward pass for a batch of windows into `g`.
    ///
    /// `weights` comes from `ParamStore::bind_all` (or any vars with the same shapes).
    /// Inputs are shifted by each window's centroid before embedding; the shift is
    /// added back to the root translation. Dropout is applied only when `dropout_rng` is set.
    pub fn forward_graph(
        &self,
        g: &mut Graph<f64>,
        weights: &[Var],
        windows: &[PoseSequence<f64>],
        with_cov: bool,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<GraphOutputs> {
        self.check_windows(windows)?;
        let c = &self.config;
        let (bsz, t, j, d) = (windows.len(), c.window, c.joints, c.d_model);
        let w = |id: ParamId| weights[id.index()];

        let mut input = Vec::with_capacity(bsz * t * j * 3);
        let mut centroids = Vec::with_capacity(bsz * 3);
        for win in windows {
            let centroid = window_centroid(win);
            for p in win.as_slice().chunks_exact(3) {
                input.extend((0..3).map(|k| p[k] - centroid[k]));
            }
            centroids.extend(centroid);
        }
        let x = g.constant(Tensor::new(vec![bsz, t, 3 * j], input)?);
        let centroid = g.constant(Tensor::new(vec![bsz, 1, 3], centroids)?);

        let mut h = self.embed_graph(g, weights, x)?;
        let p = c.dropout;
        for (l, ids) in self.layout.encoder.iter().enumerate() {
            let n = layer_norm(g, h, &ids.norm_attn, weights)?;
            let a = attention(g, n, n, &ids.attn, weights, c.heads)?;
            let a = dropout(g, a, p, dropout_rng.as_deref_mut())?;
            h = g.add(h, a)?;
            let n = layer_norm(g, h, &ids.norm_ff, weights)?;
            let f = feed_forward(g, n, &ids.ff, weights, c.activation)?;
            let f = dropout(g, f, p, dropout_rng.as_deref_mut())?;
            h = g.add(h, f)?;
            ensure_finite(g, h, &format!("encoder layer {l}"))?;
        }
        let memory = layer_norm(g, h, &self.layout.encoder_norm, weights)?;

        let mut q = g.broadcast_to(w(self.layout.queries), &[bsz, t, d])?;
        for (l, ids) in self.layout.decoder.iter().enumerate() {
            let n = layer_norm(g, q, &ids.norm_self, weights)?;
            let a = attention(g, n, n, &ids.self_attn, weights, c.heads)?;
            let a = dropout(g, a, p, dropout_rng.as_deref_mut())?;
            q = g.add(q, a)?;
            let n = layer_norm(g, q, &ids.norm_cross, weights)?;
            let a = attention(g, n, memory, &ids.cross_attn, weights, c.heads)?;
            let a = dropout(g, a, p, dropout_rng.as_deref_mut())?;
            q = g.add(q, a)?;
            let n = layer_norm(g, q, &ids.norm_ff, weights)?;
            let f = feed_forward(g, n, &ids.ff, weights, c.activation)?;
            let f = dropout(g, f, p, dropout_rng.as_deref_mut())?;
            q = g.add(q, f)?;
            ensure_finite(g, q, &format!("decoder layer {l}"))?;
        }
        let out = layer_norm(g, q, &self.layout.decoder_norm, weights)?;

        let pose = linear(g, out, &self.layout.pose_head, weights)?;
        ensure_finite(g, pose, "pose head")?;
        let root_raw = g.slice(pose, 2, 0, 3)?;
        let root = g.add(root_raw, centroid)?;
        let quat_raw = g.slice(pose, 2, 3, 4 * j)?;
        let quat_raw = g.reshape(quat_raw, &[bsz, t, j, 4])?;
        let quaternions = normalize_quaternions(g, quat_raw)?;
        let len_raw = g.slice(pose, 2, 3 + 4 * j, j)?;
        let sp = g.softplus(len_raw);
        let sp = g.offset(sp, BONE_LENGTH_FLOOR);
        let mut mask = vec![1.0; j];
        mask[0] = 0.0;
        let mask = g.constant(Tensor::from_vec(mask));
        let lengths = g.mul(sp, mask)?;
        let positions = fk_graph(g, &self.skeleton, root, quaternions, lengths)?;

        let chol_raw = match (&self.layout.cov_head, with_cov) {
            (Some(ids), true) => {
                self.covariance_evaluations.fetch_add(1, Ordering::Relaxed);
                let raw = linear(g, out, ids, weights)?;
                ensure_finite(g, raw, "covariance head")?;
                Some(g.reshape(raw, &[bsz, t, j, 6])?)
            }
            (None, true) => {
                return Err(Error::Config("model was built without a covariance head".into()))
            }
            _ => None,
        };
        Ok(GraphOutputs {
            positions,
            root,
            quaternions,
            lengths,
            chol_raw,
        })
    }

    fn embed_graph(&self, g: &mut Graph<f64>, weights: &[Var], x: Var) -> Result<Var> {
        let e = linear(g, x, &self.layout.embed, weights)?;
        let pe = g.constant(positional_encoding(self.config.window, self.config.d_model));
        g.add(e, pe)
    }

    /// Per-frame linear embedding plus positional encoding of a single window, `[T, d]`.
    /// No centering is applied here.
    pub fn embed_window(&self, window: &PoseSequence<f64>) -> Result<Tensor<f64>> {
        self.check_windows(std::slice::from_ref(window))?;
        let mut g = Graph::new();
        let weights = self.params.bind_all(&mut g);
        let x = g.constant(Tensor::new(
            vec![window.frames(), 3 * window.joints()],
            window.as_slice().to_vec(),
        )?);
        let e = self.embed_graph(&mut g, &weights, x)?;
        Ok(g.value(e).clone())
    }

    /// Smooths one window. Covariance factors are produced when the model has a
    /// covariance head and `with_cov` is set.
    pub fn forward(&self, window: &PoseSequence<f64>, with_cov: bool) -> Result<SmoothedWindow> {
        let mut g = Graph::new();
        let weights = self.params.bind_all(&mut g);
        let with_cov = with_cov && self.config.covariance_head;
        let out = self.forward_graph(&mut g, &weights, std::slice::from_ref(window), with_cov, None)?;
        let (t, j) = (self.config.window, self.config.joints);
        let root = g.value(out.root).data();
        let quats = g.value(out.quaternions).data();
        let lengths = g.value(out.lengths).data();
        let mut params = Vec::with_capacity(t);
        let mut positions = Vec::with_capacity(t * j * 3);
        for f in 0..t {
            let q = |jj: usize| {
                let o = (f * j + jj) * 4;
                Quaternion::from_raw(quats[o], quats[o + 1], quats[o + 2], quats[o + 3])
            };
            let p = PoseParameters {
                root_translation: [root[f * 3], root[f * 3 + 1], root[f * 3 + 2]],
                root_orientation: q(0),
                local_rotations: (1..j).map(q).collect(),
                bone_lengths: lengths[f * j..(f + 1) * j].to_vec(),
            };
            for x in forward_kinematics(&self.skeleton, &p)? {
                positions.extend(x);
            }
            params.push(p);
        }
        let cov = match out.chol_raw {
            Some(v) => Some(CovarianceFactors::from_raw(t, j, g.value(v).data())?),
            None => None,
        };
        Ok(SmoothedWindow {
            positions: PoseSequence::new(t, j, positions)?,
            params,
            cov,
        })
    }
}

/// Free-function form of [`HpstmModel::forward`].
pub fn model_forward(model: &HpstmModel, window: &PoseSequence<f64>) -> Result<SmoothedWindow> {
    model.forward(window, true)
}

fn config_sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config.json");
    s.into()
}

/// Mean position over all frames and joints.
pub fn window_centroid(win: &PoseSequence<f64>) -> [f64; 3] {
    let mut c = [0.0; 3];
    for p in win.as_slice().chunks_exact(3) {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    let n = (win.frames() * win.joints()) as f64;
    c.map(|v| v / n)
}

fn ensure_finite(g: &Graph<f64>, v: Var, layer: &str) -> Result<()> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("activation in {layer}")))
    }
}

fn linear(g: &mut Graph<f64>, x: Var, ids: &LinearIds, w: &[Var]) -> Result<Var> {
    let y = g.matmul(x, w[ids.w.index()])?;
    g.add(y, w[ids.b.index()])
}

fn layer_norm(g: &mut Graph<f64>, x: Var, ids: &NormIds, w: &[Var]) -> Result<Var> {
    let n = g.layer_norm(x, LAYER_NORM_EPS)?;
    let n = g.mul(n, w[ids.gain.index()])?;
    g.add(n, w[ids.bias.index()])
}

fn feed_forward(
    g: &mut Graph<f64>,
    x: Var,
    ids: &FeedForwardIds,
    w: &[Var],
    act: Activation,
) -> Result<Var> {
    let h = linear(g, x, &ids.up, w)?;
    let h = match act {
        Activation::Gelu => g.gelu(h),
        Activation::Relu => g.relu(h),
    };
    linear(g, h, &ids.down, w)
}

fn split_heads(g: &mut Graph<f64>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[b, t, heads, d / heads])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b * heads, t, d / heads])
}

fn merge_heads(g: &mut Graph<f64>, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (t, dh) = (s[1], s[2]);
    let x = g.reshape(x, &[batch, heads, t, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[batch, t, heads * dh])
}

/// Multi-head scaled dot-product attention without masking.
fn attention(
    g: &mut Graph<f64>,
    query_src: Var,
    kv_src: Var,
    ids: &AttentionIds,
    w: &[Var],
    heads: usize,
) -> Result<Var> {
    let batch = g.shape(query_src)[0];
    let d = g.shape(query_src)[2];
    let q = linear(g, query_src, &ids.q, w)?;
    let k = linear(g, kv_src, &ids.k, w)?;
    let v = linear(g, kv_src, &ids.v, w)?;
    let q = split_heads(g, q, heads)?;
    let k = split_heads(g, k, heads)?;
    let v = split_heads(g, v, heads)?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / ((d / heads) as f64).sqrt());
    let attn = g.softmax(scores)?;
    let ctx = g.matmul(attn, v)?;
    let ctx = merge_heads(g, ctx, batch, heads)?;
    linear(g, ctx, &ids.o, w)
}

fn dropout(g: &mut Graph<f64>, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let shape = g.shape(x).to_vec();
    let n = shape.iter().product();
    let mask = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    let m = g.constant(Tensor::new(shape, mask)?);
    g.mul(x, m)
}

/// Unit-normalizes `[..., 4]` quaternions and flips each to `w >= 0`.
fn normalize_quaternions(g: &mut Graph<f64>, raw: Var) -> Result<Var> {
    let rank = g.shape(raw).len();
    let sq = g.square(raw)?;
    let n2 = g.sum_axis(sq, rank - 1)?;
    let n2 = g.offset(n2, 1e-12);
    let norm = g.sqrt(n2);
    let mut shape = g.shape(norm).to_vec();
    shape.push(1);
    let norm = g.reshape(norm, &shape)?;
    let unit = g.div(raw, norm)?;
    let sign: Vec<f64> = g
        .value(unit)
        .data()
        .chunks_exact(4)
        .map(|q| if q[0] < 0.0 { -1.0 } else { 1.0 })
        .collect();
    let sign = g.constant(Tensor::new(shape, sign)?);
    g.mul(unit, sign)
}

/// Forward kinematics on graph nodes: `root [B, T, 3]`, `quats [B, T, J, 4]`,
/// `lengths [B, T, J]` to positions `[B, T, J, 3]`.
pub fn fk_graph(
    g: &mut Graph<f64>,
    skeleton: &SkeletonDefinition<f64>,
    root: Var,
    quats: Var,
    lengths: Var,
) -> Result<Var> {
    let qs = g.shape(quats).to_vec();
    let (b, t, j) = (qs[0], qs[1], qs[2]);
    if j != skeleton.num_joints() || g.shape(root) != [b, t, 3] || g.shape(lengths) != [b, t, j] {
        return Err(shape_err("fk_graph", "root/quaternion/length shapes disagree"));
    }
    let lengths = g.reshape(lengths, &[b, t, j, 1])?;
    let mut pos = vec![g.reshape(root, &[b, t, 1, 3])?];
    let mut global = vec![g.slice(quats, 2, 0, 1)?];
    for (jj, p) in skeleton.bones() {
        let len = g.slice(lengths, 2, jj, 1)?;
        let dir = g.constant(Tensor::from_vec(skeleton.rest_directions()[jj].to_vec()));
        let offset = g.mul(len, dir)?;
        let rotated = g.quat_rotate(global[p], offset)?;
        pos.push(g.add(pos[p], rotated)?);
        let local = g.slice(quats, 2, jj, 1)?;
        global.push(g.quat_mul(global[p], local)?);
    }
    g.concat(&pos, 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::check_gradients;
    use crate::kinematics::extract_bone_lengths;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            window: 5,
            joints: 4,
            d_model: 16,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            ff_width: 16,
            dropout: 0.0,
            covariance_head: true,
            activation: Activation::Gelu,
        }
    }

    fn tiny_skeleton() -> SkeletonDefinition<f64> {
        SkeletonDefinition::with_unnormalized_directions(
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            vec![None, Some(0), Some(1), Some(1)],
            vec![[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [1.0, 0.2, 0.0], [-1.0, 0.3, 0.1]],
            vec![0.0, 0.4, 0.3, 0.25],
        )
        .unwrap()
    }

    fn random_window(rng: &mut ChaCha8Rng, t: usize, j: usize) -> PoseSequence<f64> {
        PoseSequence::new(t, j, (0..t * j * 3).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap()
    }

    fn randomize(model: &mut HpstmModel, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, p) in model.params_mut().iter_mut() {
            for v in p.value.data_mut() {
                *v += rng.random_range(-scale..scale);
            }
        }
    }

    #[test]
    fn initial_output_is_rest_pose_at_centroid_offset() {
        let skel = tiny_skeleton();
        let model = HpstmModel::new(tiny_config(), skel.clone(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random_window(&mut rng, 5, 4);
        let out = model.forward(&w, true).unwrap();
        for p in &out.params {
            for (l, c) in p.bone_lengths.iter().zip(skel.canonical_lengths()) {
                assert!((l - c).abs() < 0.05, "{l} vs {c}");
            }
        }
        let cov = out.cov.unwrap();
        assert!((cov.get(0, 0)[0][0] - INITIAL_LOG_STD.exp()).abs() < 0.02);
    }

    #[test]
    fn heads_respect_constraints_for_random_weights() {
        let skel = tiny_skeleton();
        let mut model = HpstmModel::new(tiny_config(), skel.clone(), 3).unwrap();
        randomize(&mut model, 4, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random_window(&mut rng, 5, 4);
        let out = model.forward(&w, true).unwrap();
        assert_eq!(out.positions.frames(), 5);
        assert_eq!(out.positions.joints(), 4);
        assert_eq!(out.params.len(), 5);
        for (f, p) in out.params.iter().enumerate() {
            for jj in 1..4 {
                assert!(p.bone_lengths[jj] > 0.0);
            }
            assert_eq!(p.bone_lengths[0], 0.0);
            for jj in 0..4 {
                let q = p.rotation(jj);
                assert!((q.norm() - 1.0).abs() < 1e-7);
                assert!(q.w >= 0.0);
            }
            let frame = out.positions.frame(f);
            let extracted = extract_bone_lengths(&frame, &skel).unwrap();
            for (a, b) in extracted.iter().zip(&p.bone_lengths) {
                assert!((a - b).abs() < 1e-9);
            }
            let recomputed = forward_kinematics(&skel, p).unwrap();
            for (a, b) in recomputed.iter().zip(&frame) {
                for k in 0..3 {
                    assert!((a[k] - b[k]).abs() < 1e-12);
                }
            }
        }
        let cov = out.cov.unwrap();
        for f in 0..5 {
            for jj in 0..4 {
                let l = cov.get(f, jj);
                assert!((0..3).all(|k| l[k][k] >= 1e-6));
            }
        }
    }

    #[test]
    fn graph_positions_match_value_fk() {
        let skel = tiny_skeleton();
        let mut model = HpstmModel::new(tiny_config(), skel, 6).unwrap();
        randomize(&mut model, 7, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = random_window(&mut rng, 5, 4);
        let mut g = Graph::new();
        let weights = model.params().bind_all(&mut g);
        let out = model.forward_graph(&mut g, &weights, &[w.clone()], false, None).unwrap();
        let value = model.forward(&w, false).unwrap();
        for (a, b) in g.value(out.positions).data().iter().zip(value.positions.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(value.cov.is_none());
    }

    #[test]
    fn embedding_matches_manual_matmul() {
        let model = HpstmModel::new(tiny_config(), tiny_skeleton(), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w = random_window(&mut rng, 5, 4);
        let got = model.embed_window(&w).unwrap();
        let wm = &model.params().get(model.layout.embed.w).value;
        let bias = &model.params().get(model.layout.embed.b).value;
        let pe = positional_encoding(5, 16);
        for t in 0..5 {
            for k in 0..16 {
                let mut s = bias.data()[k];
                for i in 0..12 {
                    s += w.as_slice()[t * 12 + i] * wm.data()[i * 16 + k];
                }
                // independent sinusoid
                let angle = t as f64 / 10000f64.powf((2 * (k / 2)) as f64 / 16.0);
                let pe_k = if k % 2 == 0 { angle.sin() } else { angle.cos() };
                assert!((pe.data()[t * 16 + k] - pe_k).abs() < 1e-15);
                s += pe_k;
                assert!((got.data()[t * 16 + k] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embedding_of_zero_input_is_positional_encoding() {
        let model = HpstmModel::new(tiny_config(), tiny_skeleton(), 11).unwrap();
        let z = PoseSequence::zeros(5, 4);
        let got = model.embed_window(&z).unwrap();
        assert_eq!(got.data(), positional_encoding(5, 16).data());
    }

    #[test]
    fn identical_frames_differ_only_by_position_term() {
        let model = HpstmModel::new(tiny_config(), tiny_skeleton(), 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut w = random_window(&mut rng, 5, 4);
        let f0 = w.frame(0);
        w.set_frame(4, &f0);
        let e = model.embed_window(&w).unwrap();
        let pe = positional_encoding(5, 16);
        for k in 0..16 {
            let de = e.data()[4 * 16 + k] - e.data()[k];
            let dp = pe.data()[4 * 16 + k] - pe.data()[k];
            assert!((de - dp).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_order_matters() {
        let mut model = HpstmModel::new(tiny_config(), tiny_skeleton(), 14).unwrap();
        randomize(&mut model, 15, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let w = random_window(&mut rng, 5, 4);
        let frames: Vec<_> = [3, 0, 4, 1, 2].iter().map(|&i| w.frame(i)).collect();
        let shuffled = PoseSequence::from_frames(&frames).unwrap();
        let a = model.forward(&w, false).unwrap();
        let b = model.forward(&shuffled, false).unwrap();
        let reordered: Vec<_> = [3, 0, 4, 1, 2].iter().map(|&i| a.positions.frame(i)).collect();
        let reordered = PoseSequence::from_frames(&reordered).unwrap();
        assert!(reordered.max_abs_diff(&b.positions).unwrap() > 1e-6);
    }

    #[test]
    fn rejects_wrong_window_and_reports_non_finite_layer() {
        let mut model = HpstmModel::new(tiny_config(), tiny_skeleton(), 17).unwrap();
        assert!(matches!(
            model.forward(&PoseSequence::zeros(4, 4), false),
            Err(Error::Shape { .. })
        ));
        let id = model.layout.encoder[0].ff.down.b;
        model.params_mut().get_mut(id).value.data_mut()[0] = f64::INFINITY;
        match model.forward(&PoseSequence::zeros(5, 4), false) {
            Err(Error::NonFinite(m)) => assert!(m.contains("encoder layer 0"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fk_graph_gradients() {
        let skel = tiny_skeleton();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut r = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let root = Tensor::new(vec![1, 2, 3], r(6)).unwrap();
        let quats = Tensor::new(vec![1, 2, 4, 4], r(32)).unwrap();
        let lengths = Tensor::new(vec![1, 2, 4], r(8)).unwrap();
        let e = check_gradients(
            |g, v| {
                let p = fk_graph(g, &skel, v[0], v[1], v[2])?;
                let s = g.square(p)?;
                Ok(g.sum(s))
            },
            &[root, quats, lengths],
            1e-6,
            None,
        )
        .unwrap();
        assert!(e.max_rel_error < 1e-6, "{}", e.max_rel_error);
    }

    #[test]
    fn staged_losses_pass_gradient_check_through_the_model() {
        use crate::losses::{graph::total, LossWeights, Stage};
        let skel = tiny_skeleton();
        let mut model = HpstmModel::new(tiny_config(), skel.clone(), 21).unwrap();
        randomize(&mut model, 22, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let noisy = random_window(&mut rng, 5, 4);
        let clean = random_window(&mut rng, 5, 4);
        let target = Tensor::new(vec![1, 5, 4, 3], clean.as_slice().to_vec()).unwrap();
        let inputs: Vec<Tensor<f64>> = model.params().iter().map(|(_, p)| p.value.clone()).collect();
        let canon = skel.canonical_lengths().to_vec();
        for stage in [Stage::NoiseAware, Stage::Uncertainty] {
            let report = check_gradients(
                |g, w| {
                    let out = model.forward_graph(g, w, &[noisy.clone()], stage.uses_covariance(), None)?;
                    let gt = g.constant(target.clone());
                    let (loss, _) = total(
                        g,
                        stage,
                        out.positions,
                        gt,
                        Some(out.lengths),
                        &canon,
                        out.chol_raw,
                        &LossWeights::default(),
                    )?;
                    Ok(loss)
                },
                &inputs,
                1e-6,
                Some(6),
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{stage:?}: {}", report.max_rel_error);
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut model = HpstmModel::new(tiny_config(), tiny_skeleton(), 19).unwrap();
        randomize(&mut model, 20, 0.2);
        model.save(&path).unwrap();
        let loaded = HpstmModel::load(&path, tiny_skeleton()).unwrap();
        let w = PoseSequence::new(5, 4, (0..60).map(|i| i as f64 * 0.01).collect()).unwrap();
        assert_eq!(model.forward(&w, true).unwrap(), loaded.forward(&w, true).unwrap());
    }
}
