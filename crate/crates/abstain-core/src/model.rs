//! The shared projector with its energy and softmax heads.
//!
//! Parameters live in one flat `f64` buffer with a fixed tensor layout;
//! typed array views are carved out on demand. One buffer means gradient
//! accumulation, optimizer state, checkpoint serialisation, and
//! finite-difference probing all operate on plain slices, and parameter
//! identity is positional rather than name-based.
//!
//! Forward passes are batched (rows = items); backward passes are
//! hand-derived adjoints accumulating into a gradient buffer with the same
//! layout. Projector inputs are data, not parameters, so no input gradient
//! is computed.

use std::fs;
use std::ops::Range;
use std::path::Path;

use ndarray::{linalg::general_mat_mul, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::EPS_NORM;
use crate::error::{Error, Result};
use crate::rng::{salt, stream};

/// Layer widths. The defaults mirror the reference architecture
/// (1024 → 512 → 256 projector; 256 → 256 → {1,2} heads); tests shrink
/// them so exhaustive finite-difference sweeps stay cheap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub input: usize,
    pub proj_hidden: usize,
    pub latent: usize,
    pub head_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            input: 1024,
            proj_hidden: 512,
            latent: 256,
            head_hidden: 256,
        }
    }
}

/// Parameter groups, in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Projector,
    Energy,
    Softmax,
}

#[derive(Clone, Copy)]
struct TensorMeta {
    rows: usize,
    cols: usize,
    bias: bool,
}

impl TensorMeta {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.proj_hidden == 0 || self.latent == 0 || self.head_hidden == 0 {
            return Err(Error::InvalidConfig("model dims must be positive".into()));
        }
        Ok(())
    }

    /// The twelve tensors: projector W1,b1,W2,b2; energy head ditto;
    /// softmax head ditto. Biases are (len × 1) with the flag set.
    fn tensors(&self) -> [TensorMeta; 12] {
        let w = |rows, cols| TensorMeta { rows, cols, bias: false };
        let b = |rows| TensorMeta { rows, cols: 1, bias: true };
        [
            w(self.proj_hidden, self.input),
            b(self.proj_hidden),
            w(self.latent, self.proj_hidden),
            b(self.latent),
            w(self.head_hidden, self.latent),
            b(self.head_hidden),
            w(1, self.head_hidden),
            b(1),
            w(self.head_hidden, self.latent),
            b(self.head_hidden),
            w(2, self.head_hidden),
            b(2),
        ]
    }

    fn offsets(&self) -> [usize; 13] {
        let mut offs = [0usize; 13];
        for (i, t) in self.tensors().iter().enumerate() {
            offs[i + 1] = offs[i] + t.len();
        }
        offs
    }

    pub fn n_params(&self) -> usize {
        self.offsets()[12]
    }

    fn block_tensor_range(block: Block) -> Range<usize> {
        match block {
            Block::Projector => 0..4,
            Block::Energy => 4..8,
            Block::Softmax => 8..12,
        }
    }
}

/// Read-only views of one two-layer MLP's tensors.
#[derive(Clone, Copy)]
pub struct MlpView<'a> {
    pub w1: ArrayView2<'a, f64>,
    pub b1: ArrayView1<'a, f64>,
    pub w2: ArrayView2<'a, f64>,
    pub b2: ArrayView1<'a, f64>,
}

/// Flat parameter (or gradient) buffer plus its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    dims: ModelDims,
    data: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.n_params()],
        }
    }

    /// Kaiming-uniform fan-in initialisation: weights uniform on
    /// `±√(6/fan_in)` (std √(2/fan_in)), biases zero. Each tensor draws
    /// from its own derived stream, so layouts with equal prefixes get
    /// identical prefixes of parameters.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut out = Self::zeros(dims);
        let offs = dims.offsets();
        for (i, t) in dims.tensors().iter().enumerate() {
            if t.bias {
                continue;
            }
            let bound = (6.0 / t.cols as f64).sqrt();
            let mut rng = stream(seed, &[salt::INIT, i as u64]);
            for x in &mut out.data[offs[i]..offs[i + 1]] {
                *x = rng.random_range(-bound..bound);
            }
        }
        Ok(out)
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn from_flat(dims: ModelDims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.n_params() {
            return Err(Error::ShapeMismatch(format!(
                "flat buffer has {} values, layout wants {}",
                data.len(),
                dims.n_params()
            )));
        }
        Ok(Self { dims, data })
    }

    /// Flat index range of a parameter group (for trainability masks).
    pub fn block_range(&self, block: Block) -> Range<usize> {
        let offs = self.dims.offsets();
        let t = ModelDims::block_tensor_range(block);
        offs[t.start]..offs[t.end]
    }

    fn tensor_view(&self, i: usize) -> ArrayView2<'_, f64> {
        let offs = self.dims.offsets();
        let t = self.dims.tensors()[i];
        ArrayView2::from_shape((t.rows, t.cols), &self.data[offs[i]..offs[i + 1]]).unwrap()
    }

    fn tensor_view_mut(&mut self, i: usize) -> ArrayViewMut2<'_, f64> {
        let offs = self.dims.offsets();
        let t = self.dims.tensors()[i];
        ArrayViewMut2::from_shape((t.rows, t.cols), &mut self.data[offs[i]..offs[i + 1]])
            .unwrap()
    }

    fn mlp(&self, base: usize) -> MlpView<'_> {
        let offs = self.dims.offsets();
        let t = self.dims.tensors();
        let view1 = |i: usize| {
            ArrayView1::from_shape(t[i].rows, &self.data[offs[i]..offs[i + 1]]).unwrap()
        };
        MlpView {
            w1: self.tensor_view(base),
            b1: view1(base + 1),
            w2: self.tensor_view(base + 2),
            b2: view1(base + 3),
        }
    }

    pub fn projector(&self) -> MlpView<'_> {
        self.mlp(0)
    }

    pub fn energy_head(&self) -> MlpView<'_> {
        self.mlp(4)
    }

    pub fn softmax_head(&self) -> MlpView<'_> {
        self.mlp(8)
    }

    fn head(&self, block: Block) -> MlpView<'_> {
        match block {
            Block::Energy => self.energy_head(),
            Block::Softmax => self.softmax_head(),
            Block::Projector => self.projector(),
        }
    }
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

/// GELU and the standard-normal CDF, elementwise over a matrix. The CDF is
/// retained so the backward pass pays one `exp` instead of a second `erf`.
fn gelu_matrix(h: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let cdf = h.mapv(|x| 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)));
    let a = h * &cdf;
    (a, cdf)
}

/// `gelu'(x) = Φ(x) + x·φ(x)` from the cached CDF.
fn gelu_prime_from_cdf(h: &Array2<f64>, cdf: &Array2<f64>) -> Array2<f64> {
    let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let mut out = h.mapv(|x| (-0.5 * x * x).exp() * inv_sqrt_2pi);
    out *= h;
    out += cdf;
    out
}

/// `x·W1ᵀ + b1 → gelu → ·W2ᵀ + b2`, keeping what backward needs.
struct MlpCache {
    h1: Array2<f64>,
    a1: Array2<f64>,
    cdf1: Array2<f64>,
    out: Array2<f64>,
}

fn mlp_forward(mlp: MlpView<'_>, x: ArrayView2<f64>) -> MlpCache {
    let mut h1 = x.dot(&mlp.w1.t());
    h1 += &mlp.b1;
    let (a1, cdf1) = gelu_matrix(&h1);
    let mut out = a1.dot(&mlp.w2.t());
    out += &mlp.b2;
    MlpCache { h1, a1, cdf1, out }
}

/// Everything the projector backward pass needs, plus the latent codes.
pub struct ProjectorCache {
    x: Array2<f64>,
    inner: MlpCache,
    inv_norm: Array1<f64>,
    /// Unit-norm latent codes, one row per input row.
    pub z: Array2<f64>,
}

/// Batched projector forward: `z = l2_normalize(W2·gelu(W1·x + b1) + b2)`.
pub fn project_batch(params: &ModelParams, x: Array2<f64>) -> Result<ProjectorCache> {
    let dims = params.dims();
    if x.ncols() != dims.input {
        return Err(Error::DimensionMismatch {
            expected: dims.input,
            got: x.ncols(),
        });
    }
    let inner = mlp_forward(params.projector(), x.view());
    let n = x.nrows();
    let mut inv_norm = Array1::zeros(n);
    let mut z = inner.out.clone();
    for i in 0..n {
        let norm = z.row(i).dot(&z.row(i)).sqrt();
        if norm <= EPS_NORM {
            return Err(Error::DegenerateNorm {
                norm,
                eps: EPS_NORM,
            });
        }
        inv_norm[i] = 1.0 / norm;
        z.row_mut(i).mapv_inplace(|v| v * inv_norm[i]);
    }
    Ok(ProjectorCache {
        x,
        inner,
        inv_norm,
        z,
    })
}

/// A head's forward pass over latent codes.
pub struct HeadCache {
    inner: MlpCache,
}

impl HeadCache {
    /// Raw head outputs: `n × 1` (energy) or `n × 2` (softmax logits).
    pub fn out(&self) -> &Array2<f64> {
        &self.inner.out
    }
}

pub fn head_forward(params: &ModelParams, block: Block, z: &Array2<f64>) -> HeadCache {
    HeadCache {
        inner: mlp_forward(params.head(block), z.view()),
    }
}

// ---------------------------------------------------------------------------
// Backward passes
// ---------------------------------------------------------------------------

fn add_colsum_into(m: &Array2<f64>, out: &mut [f64]) {
    for row in m.rows() {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// Shared two-layer adjoint. Accumulates parameter gradients into `grads`
/// (same layout as params) and returns the input adjoint.
fn mlp_backward(
    mlp: MlpView<'_>,
    base: usize,
    cache: &MlpCache,
    x: ArrayView2<f64>,
    d_out: &Array2<f64>,
    grads: &mut ModelParams,
) -> Array2<f64> {
    let offs = grads.dims.offsets();

    // dW2 += d_outᵀ·a1 ; db2 += Σrows d_out
    {
        let mut dw2 = grads.tensor_view_mut(base + 2);
        general_mat_mul(1.0, &d_out.t(), &cache.a1.view(), 1.0, &mut dw2);
    }
    add_colsum_into(d_out, {
        let r = offs[base + 3]..offs[base + 4];
        &mut grads.data[r]
    });

    // Through the activation: dH1 = (d_out·W2) ⊙ gelu'(h1)
    let mut dh1 = d_out.dot(&mlp.w2);
    dh1 *= &gelu_prime_from_cdf(&cache.h1, &cache.cdf1);

    // dW1 += dH1ᵀ·x ; db1 += Σrows dH1
    {
        let mut dw1 = grads.tensor_view_mut(base);
        general_mat_mul(1.0, &dh1.t(), &x, 1.0, &mut dw1);
    }
    add_colsum_into(&dh1, {
        let r = offs[base + 1]..offs[base + 2];
        &mut grads.data[r]
    });

    // Input adjoint: dX = dH1·W1
    dh1.dot(&mlp.w1)
}

/// Head adjoint: accumulate the head's parameter gradients and add the
/// latent adjoint into `dz`.
pub fn head_backward(
    params: &ModelParams,
    block: Block,
    cache: &HeadCache,
    z: &Array2<f64>,
    d_out: &Array2<f64>,
    grads: &mut ModelParams,
    dz: &mut Array2<f64>,
) {
    let base = match block {
        Block::Energy => 4,
        Block::Softmax => 8,
        Block::Projector => unreachable!("projector is not a head"),
    };
    let dz_head = mlp_backward(
        params.head(block),
        base,
        &cache.inner,
        z.view(),
        d_out,
        grads,
    );
    *dz += &dz_head;
}

/// Projector adjoint from the latent gradient `dz`. Inputs are data, so no
/// input adjoint is produced.
pub fn projector_backward(
    params: &ModelParams,
    cache: &ProjectorCache,
    dz: &Array2<f64>,
    grads: &mut ModelParams,
) {
    // Through the row-wise normalisation: dh2 = (dz − z·(z·dz)) / ‖h2‖.
    let mut dh2 = dz.clone();
    for i in 0..dh2.nrows() {
        let zi = cache.z.row(i);
        let dot = zi.dot(&dz.row(i));
        let inv = cache.inv_norm[i];
        let mut row = dh2.row_mut(i);
        row.zip_mut_with(&zi, |d, &zv| *d = (*d - zv * dot) * inv);
    }
    mlp_backward(
        params.projector(),
        0,
        &cache.inner,
        cache.x.view(),
        &dh2,
        grads,
    );
}

// ---------------------------------------------------------------------------
// Single-vector convenience wrappers
// ---------------------------------------------------------------------------

/// Project one embedding to its unit-norm latent code.
pub fn project(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    let mat = Array2::from_shape_vec((1, x.len()), x.to_vec())
        .expect("row-vector shape is always valid");
    let cache = project_batch(params, mat)?;
    Ok(cache.z.row(0).to_vec())
}

/// Scalar energy of a latent code.
pub fn energy(params: &ModelParams, z: &[f64]) -> f64 {
    let mat = Array2::from_shape_vec((1, z.len()), z.to_vec()).unwrap();
    head_forward(params, Block::Energy, &mat).out()[(0, 0)]
}

/// Binary logits of a latent code; class 0 = in-domain, 1 = out-of-domain.
pub fn softmax_logits(params: &ModelParams, z: &[f64]) -> [f64; 2] {
    let mat = Array2::from_shape_vec((1, z.len()), z.to_vec()).unwrap();
    let out = head_forward(params, Block::Softmax, &mat);
    [out.out()[(0, 0)], out.out()[(0, 1)]]
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// AdamW moment buffers, stored alongside parameters so training can
/// resume bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimMoments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// A training snapshot: parameters, optimizer moments, and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub moments: OptimMoments,
    pub epoch: usize,
    pub val_loss: f64,
    pub config_hash: String,
    pub seed: u64,
}

const CKPT_MAGIC: &[u8; 4] = b"CKPT";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CkptMeta {
    epoch: usize,
    val_loss: f64,
    config_hash: String,
    seed: u64,
}

/// Serialise a checkpoint. Layout mirrors EMB1: magic, fixed header,
/// little-endian f64 tensors in declaration order (params, then first and
/// second moments), then a length-prefixed JSON metadata trailer.
pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let dims = ckpt.params.dims();
    let n = dims.n_params();
    let mut out = Vec::with_capacity(4 + 4 + 16 + 3 * n * 8 + 64);
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    for d in [dims.input, dims.proj_hidden, dims.latent, dims.head_hidden] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for buf in [ckpt.params.data(), &ckpt.moments.m[..], &ckpt.moments.v[..]] {
        for &x in buf {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out.extend_from_slice(&ckpt.moments.step.to_le_bytes());
    let meta = serde_json::to_vec(&CkptMeta {
        epoch: ckpt.epoch,
        val_loss: ckpt.val_loss,
        config_hash: ckpt.config_hash.clone(),
        seed: ckpt.seed,
    })
    .expect("plain struct serialises");
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let fail = |msg: &str| Error::Format(format!("CKPT: {msg}"));
    if bytes.len() < 24 {
        return Err(fail("file shorter than fixed header"));
    }
    if &bytes[0..4] != CKPT_MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
    let dims = ModelDims {
        input: word(0) as usize,
        proj_hidden: word(1) as usize,
        latent: word(2) as usize,
        head_hidden: word(3) as usize,
    };
    dims.validate().map_err(|_| fail("degenerate dims"))?;
    let n = dims.n_params();
    let tensors_at = 24;
    let step_at = tensors_at + 3 * n * 8;
    if bytes.len() < step_at + 8 + 8 {
        return Err(fail("truncated tensor section"));
    }
    let read_block = |at: usize| -> Vec<f64> {
        bytes[at..at + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    };
    let data = read_block(tensors_at);
    let m = read_block(tensors_at + n * 8);
    let v = read_block(tensors_at + 2 * n * 8);
    if data.iter().any(|x| !x.is_finite()) {
        return Err(fail("non-finite parameter"));
    }
    let step = u64::from_le_bytes(bytes[step_at..step_at + 8].try_into().unwrap());
    let meta_len =
        u64::from_le_bytes(bytes[step_at + 8..step_at + 16].try_into().unwrap()) as usize;
    let meta_at = step_at + 16;
    if bytes.len() != meta_at + meta_len {
        return Err(fail("file length disagrees with metadata length"));
    }
    let meta: CkptMeta =
        serde_json::from_slice(&bytes[meta_at..]).map_err(|e| fail(&format!("bad metadata: {e}")))?;
    Ok(Checkpoint {
        params: ModelParams::from_flat(dims, data)?,
        moments: OptimMoments { m, v, step },
        epoch: meta.epoch,
        val_loss: meta.val_loss,
        config_hash: meta.config_hash,
        seed: meta.seed,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, checkpoint_to_bytes(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    checkpoint_from_bytes(&fs::read(path)?)
}
