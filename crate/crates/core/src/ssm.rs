//! Four-stage selective state space encoder.
//!
//! Images are cut into non-overlapping patches and linearly embedded. Each
//! stage runs pre-norm residual blocks whose mixer is a diagonal selective
//! scan over the raster-ordered tokens (optionally also over the reversed
//! sequence). A 2×2 strided linear merge halves the grid and doubles the
//! channels between stages.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BoundParams, ParamId, ParamStore, Tensor, Var};

pub const NUM_STAGES: usize = 4;
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// `A_log` initial value: `exp(−0.105) ≈ 0.9` at `Δ = 1`.
pub const A_LOG_INIT: f64 = -2.253_794_700_810_147; // ln(0.105)

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub stage_channels: [usize; NUM_STAGES],
    pub state_dim: usize,
    pub blocks_per_stage: usize,
    pub num_classes: usize,
    pub scan_directions: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            image_size: 32,
            patch_size: 4,
            stage_channels: [16, 32, 64, 128],
            state_dim: 8,
            blocks_per_stage: 1,
            num_classes: 8,
            scan_directions: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        let grid = self.image_size / self.patch_size;
        if grid % (1 << (NUM_STAGES - 1)) != 0 {
            return fail(format!("patch grid {grid} must be divisible by 8"));
        }
        if self.stage_channels[0] == 0
            || self.stage_channels.windows(2).any(|w| w[1] != 2 * w[0])
        {
            return fail(format!(
                "stage channels {:?} must double per stage",
                self.stage_channels
            ));
        }
        if !(1..=2).contains(&self.scan_directions) {
            return fail(format!("scan_directions must be 1 or 2, got {}", self.scan_directions));
        }
        if self.state_dim == 0 || self.blocks_per_stage == 0 || self.in_channels == 0 {
            return fail("state_dim, blocks_per_stage and in_channels must be positive".into());
        }
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        Ok(())
    }

    /// Spatial side of stage `i` (0-based).
    pub fn grid(&self, stage: usize) -> usize {
        self.image_size / self.patch_size >> stage
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }
}

/// Output of one encoder stage, `[B, C_i, H_i, W_i]`.
#[derive(Clone, Copy, Debug)]
pub struct StateEmbedding<'t> {
    pub f: Var<'t>,
    /// 1-based stage index.
    pub stage: usize,
}

/// Parameters of one selective-scan block.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmBlockParams {
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub delta_proj: ParamId,
    pub delta_bias: ParamId,
    pub b_proj: ParamId,
    pub c_proj: ParamId,
    /// `log(−A)`, `[C, N]`.
    pub a_log: ParamId,
    pub skip: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Merge {
    weight: ParamId,
    bias: ParamId,
}

/// Encoder layout over a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    cfg: EncoderConfig,
    patch_weight: ParamId,
    patch_bias: ParamId,
    stages: Vec<Vec<SsmBlockParams>>,
    merges: Vec<Merge>,
    head_weight: ParamId,
    head_bias: ParamId,
}

fn uniform_init(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("init shape")
}

impl Encoder {
    /// Allocates and initializes all parameters in `store`.
    pub fn new(cfg: EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c1 = cfg.stage_channels[0];
        let pd = cfg.patch_dim();
        let patch_weight = store.add("patch.weight", uniform_init(rng, &[pd, c1], pd));
        let patch_bias = store.add("patch.bias", Tensor::zeros(&[c1]));
        let n = cfg.state_dim;
        let mut stages = Vec::new();
        let mut merges = Vec::new();
        for (i, &c) in cfg.stage_channels.iter().enumerate() {
            if i > 0 {
                let cin = 4 * cfg.stage_channels[i - 1];
                merges.push(Merge {
                    weight: store.add(format!("merge{i}.weight"), uniform_init(rng, &[cin, c], cin)),
                    bias: store.add(format!("merge{i}.bias"), Tensor::zeros(&[c])),
                });
            }
            let mut blocks = Vec::new();
            for j in 0..cfg.blocks_per_stage {
                let p = format!("stage{}.block{j}", i + 1);
                blocks.push(SsmBlockParams {
                    norm_gain: store.add(format!("{p}.norm.gain"), Tensor::ones(&[c])),
                    norm_bias: store.add(format!("{p}.norm.bias"), Tensor::zeros(&[c])),
                    delta_proj: store.add(format!("{p}.delta.weight"), uniform_init(rng, &[c, c], c)),
                    // softplus(ln(e − 1)) = 1
                    delta_bias: store.add(
                        format!("{p}.delta.bias"),
                        Tensor::full(&[c], (std::f64::consts::E - 1.0).ln()),
                    ),
                    b_proj: store.add(format!("{p}.b.weight"), uniform_init(rng, &[c, n], c)),
                    // small read-out keeps the residual stream O(1) at init
                    c_proj: store.add(format!("{p}.c.weight"), uniform_init(rng, &[c, n], c).map(|v| 0.1 * v)),
                    a_log: store.add(format!("{p}.a_log"), Tensor::full(&[c, n], A_LOG_INIT)),
                    skip: store.add(format!("{p}.skip"), Tensor::ones(&[c])),
                });
            }
            stages.push(blocks);
        }
        let c4 = cfg.stage_channels[NUM_STAGES - 1];
        let k = cfg.num_classes;
        // zero head: both branches start at the uniform-softmax loss
        let head_weight = store.add("head.weight", Tensor::zeros(&[c4, k]));
        let head_bias = store.add("head.bias", Tensor::zeros(&[k]));
        Ok(Self {
            cfg,
            patch_weight,
            patch_bias,
            stages,
            merges,
            head_weight,
            head_bias,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn head(&self) -> (ParamId, ParamId) {
        (self.head_weight, self.head_bias)
    }

    pub fn block(&self, stage: usize, block: usize) -> &SsmBlockParams {
        &self.stages[stage][block]
    }

    /// Non-overlapping patch embedding: `[B,3,H,W]` → `[B,C_1,H/p,W/p]`.
    pub fn patchify<'t>(&self, p: &BoundParams<'t>, images: Var<'t>) -> Result<Var<'t>> {
        let cfg = &self.cfg;
        let shape = images.shape();
        let ps = cfg.patch_size;
        if shape.len() != 4
            || shape[1] != cfg.in_channels
            || shape[2] != cfg.image_size
            || shape[3] != cfg.image_size
        {
            return Err(Error::ShapeMismatch {
                op: "patchify",
                lhs: shape,
                rhs: vec![cfg.in_channels, cfg.image_size, cfg.image_size],
            });
        }
        let (b, ch, g) = (shape[0], shape[1], cfg.grid(0));
        let tokens = images
            .reshape(&[b, ch, g, ps, g, ps])?
            .permute(&[0, 2, 4, 1, 3, 5])?
            .reshape(&[b * g * g, cfg.patch_dim()])?
            .linear(p[self.patch_weight], p[self.patch_bias])?;
        tokens
            .reshape(&[b, g, g, cfg.stage_channels[0]])?
            .permute(&[0, 3, 1, 2])
    }

    /// Runs stage `stage` (0-based) on its input grid.
    fn stage_blocks<'t>(&self, p: &BoundParams<'t>, stage: usize, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let mut tokens = x.permute(&[0, 2, 3, 1])?.reshape(&[b * h * w, c])?;
        for block in &self.stages[stage] {
            tokens = self.block_forward(p, block, tokens, b)?;
        }
        tokens.reshape(&[b, h, w, c])?.permute(&[0, 3, 1, 2])
    }

    /// Pre-norm residual selective-scan block over `[B·L, C]` tokens.
    fn block_forward<'t>(
        &self,
        p: &BoundParams<'t>,
        block: &SsmBlockParams,
        tokens: Var<'t>,
        batch: usize,
    ) -> Result<Var<'t>> {
        let shape = tokens.shape();
        let (m, c) = (shape[0], shape[1]);
        let len = m / batch;
        let n = self.cfg.state_dim;
        let normed = layer_norm(tokens, p[block.norm_gain], p[block.norm_bias])?;
        let delta = normed
            .linear(p[block.delta_proj], p[block.delta_bias])?
            .softplus()?
            .reshape(&[batch, len, c])?;
        let b_sel = normed.matmul(p[block.b_proj])?.reshape(&[batch, len, n])?;
        let c_sel = normed.matmul(p[block.c_proj])?.reshape(&[batch, len, n])?;
        let a = p[block.a_log].exp()?.neg()?;
        let x = normed.reshape(&[batch, len, c])?;
        let d = p[block.skip];
        let mut y = selective_scan(x, delta, a, b_sel, c_sel, d)?;
        if self.cfg.scan_directions == 2 {
            let rev = selective_scan(
                x.flip(1)?,
                delta.flip(1)?,
                a,
                b_sel.flip(1)?,
                c_sel.flip(1)?,
                d,
            )?
            .flip(1)?;
            y = y.add(rev)?.scale(0.5)?;
        }
        tokens.add(y.reshape(&[m, c])?)
    }

    /// 2×2 strided linear merge feeding stage `stage` (1-based index ≥ 1).
    fn merge<'t>(&self, p: &BoundParams<'t>, stage: usize, f: Var<'t>) -> Result<Var<'t>> {
        let shape = f.shape();
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (h2, w2) = (h / 2, w / 2);
        let merge = &self.merges[stage - 1];
        let out_c = self.cfg.stage_channels[stage];
        f.reshape(&[b, c, h2, 2, w2, 2])?
            .permute(&[0, 2, 4, 1, 3, 5])?
            .reshape(&[b * h2 * w2, 4 * c])?
            .linear(p[merge.weight], p[merge.bias])?
            .reshape(&[b, h2, w2, out_c])?
            .permute(&[0, 3, 1, 2])
    }

    /// Clean forward pass: `(F^1, F^2, F^3, F^4)`.
    pub fn encode<'t>(&self, p: &BoundParams<'t>, images: Var<'t>) -> Result<Vec<StateEmbedding<'t>>> {
        self.encode_with(p, images, |e| Ok(e))
    }

    /// Forward pass where `hook` may replace each `F^i` before the next
    /// stage consumes it. Returned embeddings are the hooked ones.
    pub fn encode_with<'t>(
        &self,
        p: &BoundParams<'t>,
        images: Var<'t>,
        mut hook: impl FnMut(StateEmbedding<'t>) -> Result<StateEmbedding<'t>>,
    ) -> Result<Vec<StateEmbedding<'t>>> {
        let x = self.patchify(p, images)?;
        let f1 = hook(StateEmbedding {
            f: self.stage_blocks(p, 0, x)?,
            stage: 1,
        })?;
        let mut out = vec![f1];
        out.extend(self.resume(p, f1, hook)?);
        Ok(out)
    }

    /// Runs the stages after `from`, returning `F^{from+1} … F^4`.
    pub fn resume<'t>(
        &self,
        p: &BoundParams<'t>,
        from: StateEmbedding<'t>,
        mut hook: impl FnMut(StateEmbedding<'t>) -> Result<StateEmbedding<'t>>,
    ) -> Result<Vec<StateEmbedding<'t>>> {
        let mut out = Vec::new();
        let mut prev = from;
        for stage in from.stage..NUM_STAGES {
            let x = self.merge(p, stage, prev.f)?;
            prev = hook(StateEmbedding {
                f: self.stage_blocks(p, stage, x)?,
                stage: stage + 1,
            })?;
            out.push(prev);
        }
        Ok(out)
    }

    /// Global average pool of `F^4` followed by the linear head.
    pub fn classify<'t>(&self, p: &BoundParams<'t>, f4: StateEmbedding<'t>) -> Result<Var<'t>> {
        classify(f4, p[self.head_weight], p[self.head_bias])
    }
}

/// Logits from a stage-4 embedding: spatial mean pool, then `pooled·W + b`.
pub fn classify<'t>(f4: StateEmbedding<'t>, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    if f4.stage != NUM_STAGES || f4.f.shape().len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "classify",
            lhs: f4.f.shape(),
            rhs: vec![f4.stage],
        });
    }
    f4.f.mean(&[2, 3])?.linear(weight, bias)
}

/// Layer normalization over the last axis of `[M, C]`.
pub fn layer_norm<'t>(x: Var<'t>, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    let m = shape[0];
    let mean = x.mean(&[1])?.reshape(&[m, 1])?;
    let centered = x.sub(mean)?;
    let std = centered
        .square()?
        .mean(&[1])?
        .add_scalar(LAYER_NORM_EPS)?
        .sqrt()?
        .reshape(&[m, 1])?;
    centered.div(std)?.mul(gain)?.add(bias)
}

/// Diagonal selective scan.
///
/// Shapes: `x`, `delta` `[B, L, C]`; `a` `[C, N]` (negative); `b`, `c`
/// `[B, L, N]`; `d` `[C]`. For every channel and state:
///
/// ```text
/// h_t = exp(Δ_t·A)·h_{t−1} + Δ_t·B_t·x_t,   h_0 = 0
/// y_t = Σ_n C_t[n]·h_t[n] + D·x_t
/// ```
pub fn selective_scan<'t>(
    x: Var<'t>,
    delta: Var<'t>,
    a: Var<'t>,
    b: Var<'t>,
    c: Var<'t>,
    d: Var<'t>,
) -> Result<Var<'t>> {
    let dims = ScanDims::new(&x.shape(), &delta.shape(), &a.shape(), &b.shape(), &c.shape(), &d.shape())?;
    let (y, states) = scan_forward(
        &dims,
        &x.value(),
        &delta.value(),
        &a.value(),
        &b.value(),
        &c.value(),
        &d.value(),
    );
    if !y.is_finite() {
        return Err(Error::NonFinite("selective_scan"));
    }
    let tape = x.tape();
    Ok(tape.custom(&[x, delta, a, b, c, d], y, move |g, inputs, _| {
        scan_backward(&dims, g, inputs, &states)
    }))
}

#[derive(Clone, Copy, Debug)]
struct ScanDims {
    batch: usize,
    len: usize,
    channels: usize,
    state: usize,
}

impl ScanDims {
    fn new(
        x: &[usize],
        delta: &[usize],
        a: &[usize],
        b: &[usize],
        c: &[usize],
        d: &[usize],
    ) -> Result<Self> {
        let bad = |rhs: &[usize]| Error::ShapeMismatch {
            op: "selective_scan",
            lhs: x.to_vec(),
            rhs: rhs.to_vec(),
        };
        if x.len() != 3 || x[1] == 0 {
            return Err(bad(x));
        }
        let (batch, len, channels) = (x[0], x[1], x[2]);
        if delta != x {
            return Err(bad(delta));
        }
        if a.len() != 2 || a[0] != channels {
            return Err(bad(a));
        }
        let state = a[1];
        if b != [batch, len, state] {
            return Err(bad(b));
        }
        if c != [batch, len, state] {
            return Err(bad(c));
        }
        if d != [channels] {
            return Err(bad(d));
        }
        Ok(Self {
            batch,
            len,
            channels,
            state,
        })
    }
}

/// Returns `y` and every hidden state `h_t`, laid out `[B, L, C, N]`.
fn scan_forward(
    dims: &ScanDims,
    x: &Tensor,
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d: &Tensor,
) -> (Tensor, Vec<f64>) {
    let ScanDims {
        batch,
        len,
        channels: ch,
        state: ns,
    } = *dims;
    let (x, delta, a, b, c, d) = (x.data(), delta.data(), a.data(), b.data(), c.data(), d.data());
    let mut y = vec![0.0; batch * len * ch];
    let mut states = vec![0.0; batch * len * ch * ns];
    for bi in 0..batch {
        for t in 0..len {
            let tok = bi * len + t;
            let bt = &b[tok * ns..(tok + 1) * ns];
            let ct = &c[tok * ns..(tok + 1) * ns];
            for k in 0..ch {
                let xv = x[tok * ch + k];
                let dt = delta[tok * ch + k];
                let cur = (tok * ch + k) * ns;
                let mut acc = d[k] * xv;
                for n in 0..ns {
                    let prev = if t == 0 { 0.0 } else { states[cur - ch * ns + n] };
                    let h = (dt * a[k * ns + n]).exp() * prev + dt * bt[n] * xv;
                    states[cur + n] = h;
                    acc += ct[n] * h;
                }
                y[tok * ch + k] = acc;
            }
        }
    }
    (
        Tensor::new(&[batch, len, ch], y).expect("scan shape"),
        states,
    )
}

fn scan_backward(
    dims: &ScanDims,
    g: &Tensor,
    inputs: &[&Tensor],
    states: &[f64],
) -> Vec<Option<Tensor>> {
    let ScanDims {
        batch,
        len,
        channels: ch,
        state: ns,
    } = *dims;
    let (x, delta, a, b, c, d) = (
        inputs[0].data(),
        inputs[1].data(),
        inputs[2].data(),
        inputs[3].data(),
        inputs[4].data(),
        inputs[5].data(),
    );
    let g = g.data();
    let mut gx = vec![0.0; x.len()];
    let mut gdelta = vec![0.0; delta.len()];
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    let mut gc = vec![0.0; c.len()];
    let mut gd = vec![0.0; d.len()];
    // dL/dh_t carried backwards through h_{t+1} = ā_{t+1}·h_t + …
    let mut carry = vec![0.0; ch * ns];
    for bi in 0..batch {
        carry.iter_mut().for_each(|v| *v = 0.0);
        for t in (0..len).rev() {
            let tok = bi * len + t;
            for k in 0..ch {
                let i = tok * ch + k;
                let (xv, dt, gy) = (x[i], delta[i], g[i]);
                gd[k] += gy * xv;
                gx[i] += gy * d[k];
                for n in 0..ns {
                    let an = a[k * ns + n];
                    let abar = (dt * an).exp();
                    let h = states[i * ns + n];
                    let prev = if t == 0 { 0.0 } else { states[(i - ch) * ns + n] };
                    gc[tok * ns + n] += gy * h;
                    let dh = gy * c[tok * ns + n] + carry[k * ns + n];
                    // through ā_t = exp(Δ·A)
                    let dabar = dh * prev * abar;
                    gdelta[i] += dabar * an;
                    ga[k * ns + n] += dabar * dt;
                    // through ū_t = Δ·B·x
                    let bn = b[tok * ns + n];
                    gdelta[i] += dh * bn * xv;
                    gb[tok * ns + n] += dh * dt * xv;
                    gx[i] += dh * dt * bn;
                    carry[k * ns + n] = dh * abar;
                }
            }
        }
    }
    let mk = |t: &Tensor, v: Vec<f64>| Some(Tensor::new(t.shape(), v).expect("scan grad shape"));
    vec![
        mk(inputs[0], gx),
        mk(inputs[1], gdelta),
        mk(inputs[2], ga),
        mk(inputs[3], gb),
        mk(inputs[4], gc),
        mk(inputs[5], gd),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            image_size: 16,
            patch_size: 2,
            stage_channels: [4, 8, 16, 32],
            state_dim: 3,
            num_classes: 5,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let bad = EncoderConfig {
            image_size: 30,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig {
            stage_channels: [16, 32, 48, 96],
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig {
            image_size: 24,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn default_stage_shapes() {
        let cfg = EncoderConfig::default();
        let mut store = ParamStore::new();
        let enc = Encoder::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let images = tape.constant(Tensor::full(&[2, 3, 32, 32], 0.5));
        let feats = enc.encode(&p, images).unwrap();
        let shapes: Vec<Vec<usize>> = feats.iter().map(|e| e.f.shape()).collect();
        assert_eq!(
            shapes,
            vec![vec![2, 16, 8, 8], vec![2, 32, 4, 4], vec![2, 64, 2, 2], vec![2, 128, 1, 1]]
        );
        let logits = enc.classify(&p, feats[3]).unwrap();
        assert_eq!(logits.shape(), vec![2, 8]);
    }

    #[test]
    fn zero_image_with_zero_bias_gives_zero_tokens() {
        let cfg = small_config();
        let mut store = ParamStore::new();
        let enc = Encoder::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let images = tape.constant(Tensor::zeros(&[1, 3, 16, 16]));
        let tokens = enc.patchify(&p, images).unwrap();
        assert_eq!(tokens.shape(), vec![1, 4, 8, 8]);
        assert!(tokens.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patchify_rejects_wrong_size() {
        let cfg = small_config();
        let mut store = ParamStore::new();
        let enc = Encoder::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let images = tape.constant(Tensor::zeros(&[1, 3, 12, 12]));
        assert!(matches!(enc.patchify(&p, images), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn single_step_scan() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 1], vec![0.7]).unwrap());
        let delta = tape.constant(Tensor::new(&[1, 1, 1], vec![0.3]).unwrap());
        let a = tape.constant(Tensor::new(&[1, 2], vec![-0.5, -1.0]).unwrap());
        let b = tape.constant(Tensor::new(&[1, 1, 2], vec![1.5, -2.0]).unwrap());
        let c = tape.constant(Tensor::new(&[1, 1, 2], vec![0.4, 0.9]).unwrap());
        let d = tape.constant(Tensor::from_vec(vec![1.1]));
        let y = selective_scan(x, delta, a, b, c, d).unwrap().item();
        let expected = 0.4 * (0.3 * 1.5 * 0.7) + 0.9 * (0.3 * -2.0 * 0.7) + 1.1 * 0.7;
        assert!((y - expected).abs() < 1e-15);
    }

    #[test]
    fn no_decay_limit_is_a_running_sum() {
        // A → 0⁻ gives Ā → 1; with Δ = B = C = 1, D = 0 the output is the
        // prefix sum of the inputs.
        let tape = Tape::new();
        let xs = vec![1.0, -2.0, 0.5, 3.0];
        let x = tape.constant(Tensor::new(&[1, 4, 1], xs.clone()).unwrap());
        let ones = |s: &[usize]| tape.constant(Tensor::ones(s));
        let a = tape.constant(Tensor::new(&[1, 1], vec![-1e-300]).unwrap());
        let d = tape.constant(Tensor::zeros(&[1]));
        let y = selective_scan(x, ones(&[1, 4, 1]), a, ones(&[1, 4, 1]), ones(&[1, 4, 1]), d).unwrap();
        let mut run = 0.0;
        for (t, &v) in xs.iter().enumerate() {
            run += v;
            assert!((y.value().data()[t] - run).abs() < 1e-12);
        }
    }

    #[test]
    fn scan_rejects_mismatched_state_dim() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 2]));
        let a = tape.constant(Tensor::full(&[2, 4], -1.0));
        let b = tape.constant(Tensor::zeros(&[1, 3, 5]));
        let d = tape.constant(Tensor::zeros(&[2]));
        assert!(selective_scan(x, x, a, b, b, d).is_err());
    }

    #[test]
    fn initial_decay_is_point_nine() {
        assert!(((-A_LOG_INIT.exp()).exp() - 0.9).abs() < 1e-3);
    }
}
