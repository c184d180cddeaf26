//! Plain ViT encoder: patchify, linear token embedding, class token, learned
//! positional embeddings, pre-norm transformer blocks and a final layer norm.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::LN_EPS;
use crate::tape::{GradTape, Var};
use crate::tensor::TensorBuf;

const INIT_STD: f64 = 0.02;
const PARAMS_PER_BLOCK: usize = 12;
const HEAD_PARAMS: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
}

impl ViTConfig {
    pub fn vit_tiny() -> Self {
        Self::imagenet(192, 3)
    }

    pub fn vit_small() -> Self {
        Self::imagenet(384, 6)
    }

    pub fn vit_base() -> Self {
        Self::imagenet(768, 12)
    }

    fn imagenet(embed_dim: usize, num_heads: usize) -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            depth: 12,
            embed_dim,
            num_heads,
            mlp_ratio: 4,
        }
    }

    /// Desk-scale student: 16×16 input, 4×4 patches, D = 16.
    pub fn micro() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            depth: 2,
            embed_dim: 16,
            num_heads: 2,
            mlp_ratio: 4,
        }
    }

    /// Desk-scale toy teacher: same token grid as [`ViTConfig::micro`], D = 32.
    pub fn toy_teacher() -> Self {
        Self {
            embed_dim: 32,
            num_heads: 4,
            ..Self::micro()
        }
    }

    /// A depth of zero is accepted as a degenerate configuration (embedding
    /// followed directly by the final norm).
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 {
            return bad(format!("image_size {} / patch_size {}", self.image_size, self.patch_size));
        }
        if self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.embed_dim < 2 {
            return bad(format!("embed_dim {} < 2", self.embed_dim));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.embed_dim
    }

    /// `(name, shape)` of every parameter buffer in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let h = self.mlp_hidden();
        let mut out = vec![
            ("patch_embed.weight".to_string(), vec![self.patch_dim(), d]),
            ("patch_embed.bias".to_string(), vec![d]),
            ("cls_token".to_string(), vec![d]),
            ("pos_embed".to_string(), vec![self.num_tokens(), d]),
        ];
        for b in 0..self.depth {
            let p = |s: &str| format!("blocks.{b}.{s}");
            out.extend([
                (p("norm1.weight"), vec![d]),
                (p("norm1.bias"), vec![d]),
                (p("attn.qkv.weight"), vec![d, 3 * d]),
                (p("attn.qkv.bias"), vec![3 * d]),
                (p("attn.proj.weight"), vec![d, d]),
                (p("attn.proj.bias"), vec![d]),
                (p("norm2.weight"), vec![d]),
                (p("norm2.bias"), vec![d]),
                (p("mlp.fc1.weight"), vec![d, h]),
                (p("mlp.fc1.bias"), vec![h]),
                (p("mlp.fc2.weight"), vec![h, d]),
                (p("mlp.fc2.bias"), vec![d]),
            ]);
        }
        out.push(("norm.weight".to_string(), vec![d]));
        out.push(("norm.bias".to_string(), vec![d]));
        out
    }
}

/// Exact scalar parameter count, closed form.
pub fn param_count(config: &ViTConfig) -> usize {
    let d = config.embed_dim;
    let h = config.mlp_hidden();
    let embed = config.patch_dim() * d + d;
    let cls = d;
    let pos = config.num_tokens() * d;
    let block = 2 * d // norm1
        + d * 3 * d + 3 * d // qkv
        + d * d + d // proj
        + 2 * d // norm2
        + d * h + h // fc1
        + h * d + d; // fc2
    embed + cls + pos + config.depth * block + 2 * d
}

/// Splits a `3×H×W` image into `N × 3p²` patch rows.
///
/// Patches run row-major over the grid; inside a patch the layout is
/// channel-major, then row-major pixels.
pub fn patchify(image: &TensorBuf, p: usize) -> Result<TensorBuf> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::Shape(format!("patchify expects C×H×W, got {s:?}"))),
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!("image {h}×{w} not divisible by patch {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    let pd = c * p * p;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * pd);
    for gy in 0..gh {
        for gx in 0..gw {
            for ch in 0..c {
                for i in 0..p {
                    let row = ch * h * w + (gy * p + i) * w + gx * p;
                    out.extend_from_slice(&src[row..row + p]);
                }
            }
        }
    }
    Ok(TensorBuf::from_parts(vec![gh * gw, pd], out))
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &TensorBuf, channels: usize, h: usize, w: usize, p: usize) -> Result<TensorBuf> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!("image {h}×{w} not divisible by patch {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    let (n, pd) = patches.dims2()?;
    if n != gh * gw || pd != channels * p * p {
        return Err(Error::Shape(format!(
            "patches {:?} do not tile {channels}×{h}×{w} with p={p}",
            patches.shape()
        )));
    }
    let mut out = vec![0.0; channels * h * w];
    for gy in 0..gh {
        for gx in 0..gw {
            let patch = patches.row(gy * gw + gx);
            for ch in 0..channels {
                for i in 0..p {
                    let dst = ch * h * w + (gy * p + i) * w + gx * p;
                    let srco = ch * p * p + i * p;
                    out[dst..dst + p].copy_from_slice(&patch[srco..srco + p]);
                }
            }
        }
    }
    Ok(TensorBuf::from_parts(vec![channels, h, w], out))
}

/// Per-image `(N+1) × D` encoder output; row 0 is the class token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence(TensorBuf);

impl TokenSequence {
    pub fn new(tokens: TensorBuf, config: &ViTConfig) -> Result<Self> {
        let (n, d) = tokens.dims2()?;
        if n != config.num_tokens() || d != config.embed_dim {
            return Err(Error::Shape(format!(
                "token sequence {:?} for config with {} tokens of dim {}",
                tokens.shape(),
                config.num_tokens(),
                config.embed_dim
            )));
        }
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &TensorBuf {
        &self.0
    }

    pub fn into_tensor(self) -> TensorBuf {
        self.0
    }

    pub fn class_token(&self) -> &[f64] {
        self.0.row(0)
    }

    pub fn num_tokens(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViTEncoder {
    config: ViTConfig,
    params: Vec<TensorBuf>,
    frozen: bool,
}

impl ViTEncoder {
    /// ViT-convention init: weights and positional embeddings `N(0, 0.02²)`,
    /// biases and class token zero, layer norms identity.
    pub fn init(config: &ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with("norm1.weight") || name.ends_with("norm2.weight") || name == "norm.weight" {
                    TensorBuf::filled(&shape, 1.0)
                } else if name.ends_with(".weight") || name == "pos_embed" {
                    TensorBuf::randn(&shape, INIT_STD, &mut rng)
                } else {
                    TensorBuf::zeros(&shape)
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            params,
            frozen: false,
        })
    }

    /// Rebuilds an encoder from named buffers in canonical order.
    pub fn from_named(config: &ViTConfig, named: Vec<(String, TensorBuf)>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != named.len() {
            return Err(Error::Shape(format!(
                "encoder expects {} buffers, got {}",
                expected.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        for ((ename, eshape), (name, t)) in expected.into_iter().zip(named) {
            if ename != name || eshape != t.shape() {
                return Err(Error::Shape(format!(
                    "expected {ename} {eshape:?}, found {name} {:?}",
                    t.shape()
                )));
            }
            params.push(t);
        }
        Ok(Self {
            config: config.clone(),
            params,
            frozen: false,
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn params(&self) -> &[TensorBuf] {
        &self.params
    }

    pub fn named_params(&self) -> Vec<(String, &TensorBuf)> {
        self.config
            .param_shapes()
            .into_iter()
            .map(|(n, _)| n)
            .zip(&self.params)
            .collect()
    }

    /// Mutable access for optimizers; refused while frozen.
    pub fn params_mut(&mut self) -> Result<&mut [TensorBuf]> {
        if self.frozen {
            return Err(Error::InvalidArgument(
                "encoder is frozen; parameters are read-only".into(),
            ));
        }
        Ok(&mut self.params)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(TensorBuf::len).sum()
    }

    pub fn cls_token_mut(&mut self) -> Result<&mut TensorBuf> {
        Ok(&mut self.params_mut()?[2])
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for v in p.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Registers every parameter on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut GradTape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    fn check_image(&self, image: &TensorBuf) -> Result<()> {
        let s = self.config.image_size;
        if image.shape() != [3, s, s] {
            return Err(Error::Shape(format!(
                "image {:?} does not match encoder input 3×{s}×{s}",
                image.shape()
            )));
        }
        Ok(())
    }

    /// Token embedding on the tape: `[t₀; P·W + b] + pos`.
    pub fn embed_on_tape(&self, tape: &mut GradTape, vars: &[Var], patches: Var) -> Result<Var> {
        let d = self.config.embed_dim;
        let proj = tape.matmul(patches, vars[0])?;
        let proj = tape.add_row_bias(proj, vars[1])?;
        let cls = tape.reshape(vars[2], &[1, d])?;
        let x = tape.concat_rows(&[cls, proj])?;
        tape.add(x, vars[3])
    }

    /// Full encoder from a `N × 3p²` patch matrix already on the tape.
    pub fn forward_patches(&self, tape: &mut GradTape, vars: &[Var], patches: Var) -> Result<Var> {
        if vars.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "bound {} vars for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        let mut x = self.embed_on_tape(tape, vars, patches)?;
        for b in 0..self.config.depth {
            let v = &vars[HEAD_PARAMS + b * PARAMS_PER_BLOCK..HEAD_PARAMS + (b + 1) * PARAMS_PER_BLOCK];
            x = self.block(tape, v, x)?;
        }
        let n = vars.len();
        tape.layer_norm_rows(x, vars[n - 2], vars[n - 1], LN_EPS)
    }

    pub fn forward(&self, tape: &mut GradTape, vars: &[Var], image: &TensorBuf) -> Result<Var> {
        self.check_image(image)?;
        let patches = tape.constant(patchify(image, self.config.patch_size)?);
        self.forward_patches(tape, vars, patches)
    }

    fn block(&self, tape: &mut GradTape, v: &[Var], x: Var) -> Result<Var> {
        let d = self.config.embed_dim;
        let heads = self.config.num_heads;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();

        let h = tape.layer_norm_rows(x, v[0], v[1], LN_EPS)?;
        let qkv = tape.matmul(h, v[2])?;
        let qkv = tape.add_row_bias(qkv, v[3])?;
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let q = tape.slice_cols(qkv, head * hd, hd)?;
            let k = tape.slice_cols(qkv, d + head * hd, hd)?;
            let val = tape.slice_cols(qkv, 2 * d + head * hd, hd)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores)?;
            outs.push(tape.matmul(attn, val)?);
        }
        let merged = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let proj = tape.matmul(merged, v[4])?;
        let proj = tape.add_row_bias(proj, v[5])?;
        let x = tape.add(x, proj)?;

        let h = tape.layer_norm_rows(x, v[6], v[7], LN_EPS)?;
        let h = tape.matmul(h, v[8])?;
        let h = tape.add_row_bias(h, v[9])?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, v[10])?;
        let h = tape.add_row_bias(h, v[11])?;
        tape.add(x, h)
    }

    /// Token embedding `(N+1) × D` without the transformer blocks.
    pub fn embed(&self, image: &TensorBuf) -> Result<TensorBuf> {
        self.check_image(image)?;
        let mut tape = GradTape::new();
        let vars = self.bind(&mut tape, false);
        let patches = tape.constant(patchify(image, self.config.patch_size)?);
        let out = self.embed_on_tape(&mut tape, &vars, patches)?;
        Ok(tape.value(out).clone())
    }

    pub fn encode(&self, image: &TensorBuf) -> Result<TokenSequence> {
        let mut tape = GradTape::new();
        let vars = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &vars, image)?;
        TokenSequence::new(tape.value(out).clone(), &self.config)
    }
}
