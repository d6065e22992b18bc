//! Minimal fully-connected network engine: f64 end to end, ReLU hidden
//! activations, SGD with classical momentum. Small fixed topologies run in
//! tight loops here, so the kernels avoid allocation and accumulate in a
//! fixed lane order; results are bit-identical run to run.

pub mod batch;
pub mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("stale cache: params at version {params_version}, cache built at {cache_version}")]
    StaleCache {
        params_version: u64,
        cache_version: u64,
    },
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("gradient shape does not match parameters")]
    GradShapeMismatch,
}

/// Layer widths, input first. `[14, 150, 100]` is two linear layers. ReLU
/// follows every layer except the last; `output_relu` adds it there too.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub output_relu: bool,
}

impl MlpSpec {
    pub fn new(widths: &[usize], output_relu: bool) -> MlpSpec {
        assert!(widths.len() >= 2, "need at least one layer");
        assert!(widths.iter().all(|&w| w > 0), "zero-width layer");
        MlpSpec {
            widths: widths.to_vec(),
            output_relu,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    fn relu_at(&self, layer: usize) -> bool {
        layer + 1 < self.n_layers() || self.output_relu
    }
}

#[derive(Clone, Debug)]
struct Layer {
    /// Row-major `out x in`.
    w: Vec<f64>,
    b: Vec<f64>,
    /// Momentum buffers, same shapes as `w` and `b`.
    mw: Vec<f64>,
    mb: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct MlpParams {
    spec: MlpSpec,
    layers: Vec<Layer>,
    /// Bumped on every parameter update; caches remember the version they
    /// were built against.
    version: u64,
}

/// Equality is functional: same topology, same weights and biases.
/// Momentum buffers and the cache version are optimizer state, not part of
/// the function, so a checkpoint roundtrip preserves equality.
impl PartialEq for MlpParams {
    fn eq(&self, other: &MlpParams) -> bool {
        self.spec == other.spec
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.w == b.w && a.b == b.b)
    }
}

/// Per-layer parameter gradients, shaped like the parameters themselves.
#[derive(Clone, Debug)]
pub struct MlpGrads {
    w: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> MlpGrads {
        MlpGrads {
            w: params.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            b: params.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
        }
    }

    pub fn zero(&mut self) {
        for v in self.w.iter_mut().chain(self.b.iter_mut()) {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for v in self.w.iter_mut().chain(self.b.iter_mut()) {
            v.iter_mut().for_each(|x| *x *= c);
        }
    }

    /// Elementwise accumulate; shapes must match.
    pub fn add(&mut self, other: &MlpGrads) {
        for (a, b) in self.w.iter_mut().zip(&other.w) {
            axpy(1.0, b, a);
        }
        for (a, b) in self.b.iter_mut().zip(&other.b) {
            axpy(1.0, b, a);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w
            .iter()
            .chain(self.b.iter())
            .all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Flat view in (layer, weights-then-bias) order; used by gradient checks.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.w.iter().zip(&self.b) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

/// Forward pass record: layer inputs and pre-activations, enough to run the
/// backward pass. Tied to the parameter version it was computed against.
#[derive(Clone, Debug)]
pub struct MlpCache {
    version: u64,
    /// `acts[0]` is the input; `acts[l]` the post-activation output of layer l.
    acts: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }
}

/// Dot product with eight fixed-order accumulator lanes. The lane layout is
/// part of the numeric contract: it pins the rounding order so parallel and
/// sequential callers agree bit for bit.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let ra = ca.remainder();
    let rb = cb.remainder();
    for (xa, xb) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] = xa[k].mul_add(xb[k], lanes[k]);
        }
    }
    let mut s = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
    for (xa, xb) in ra.iter().zip(rb) {
        s = xa.mul_add(*xb, s);
    }
    s
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = xi.mul_add(alpha, *yi);
    }
}

impl MlpParams {
    /// Weights and biases drawn from U(-1/sqrt(fan_in), +1/sqrt(fan_in)),
    /// row-major weights first, then biases, layer by layer.
    pub fn init(spec: MlpSpec, rng: &mut impl Rng) -> MlpParams {
        let mut layers = Vec::with_capacity(spec.n_layers());
        for l in 0..spec.n_layers() {
            let (nin, nout) = (spec.widths[l], spec.widths[l + 1]);
            let bound = 1.0 / (nin as f64).sqrt();
            let mut draw = |_| (rng.gen::<f64>() * 2.0 - 1.0) * bound;
            let w: Vec<f64> = (0..nin * nout).map(&mut draw).collect();
            let b: Vec<f64> = (0..nout).map(&mut draw).collect();
            layers.push(Layer {
                mw: vec![0.0; w.len()],
                mb: vec![0.0; b.len()],
                w,
                b,
            });
        }
        MlpParams {
            spec,
            layers,
            version: 0,
        }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<(), NetError> {
        if x.len() != self.spec.input_dim() {
            return Err(NetError::DimMismatch {
                expected: self.spec.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Writes `b + W a` into `out`, two rows per pass so both FMA ports stay
    /// busy. Per-row accumulation order matches `dot`, so blocking does not
    /// change any result bit.
    fn affine(&self, layer: usize, a: &[f64], out: &mut Vec<f64>) {
        let l = &self.layers[layer];
        let nin = self.spec.widths[layer];
        let nout = self.spec.widths[layer + 1];
        out.clear();
        out.resize(nout, 0.0);
        let mut o = 0;
        while o + 2 <= nout {
            let w0 = &l.w[o * nin..(o + 1) * nin];
            let w1 = &l.w[(o + 1) * nin..(o + 2) * nin];
            let (mut l0, mut l1) = ([0.0f64; 8], [0.0f64; 8]);
            let c0 = w0.chunks_exact(8);
            let c1 = w1.chunks_exact(8);
            let ca = a.chunks_exact(8);
            let (r0, r1, ra) = (c0.remainder(), c1.remainder(), ca.remainder());
            for ((x0, x1), xa) in c0.zip(c1).zip(ca) {
                for k in 0..8 {
                    l0[k] = x0[k].mul_add(xa[k], l0[k]);
                    l1[k] = x1[k].mul_add(xa[k], l1[k]);
                }
            }
            let mut s0 =
                ((l0[0] + l0[1]) + (l0[2] + l0[3])) + ((l0[4] + l0[5]) + (l0[6] + l0[7]));
            let mut s1 =
                ((l1[0] + l1[1]) + (l1[2] + l1[3])) + ((l1[4] + l1[5]) + (l1[6] + l1[7]));
            for ((x0, x1), xa) in r0.iter().zip(r1).zip(ra) {
                s0 = x0.mul_add(*xa, s0);
                s1 = x1.mul_add(*xa, s1);
            }
            out[o] = l.b[o] + s0;
            out[o + 1] = l.b[o + 1] + s1;
            o += 2;
        }
        if o < nout {
            out[o] = l.b[o] + dot(&l.w[o * nin..(o + 1) * nin], a);
        }
    }

    /// Allocation-free forward: `out` receives the output, `tmp` is scratch.
    pub fn forward_into(
        &self,
        x: &[f64],
        out: &mut Vec<f64>,
        tmp: &mut Vec<f64>,
    ) -> Result<(), NetError> {
        self.check_input(x)?;
        tmp.clear();
        tmp.extend_from_slice(x);
        // Invariant: current activation lives in `tmp`, next is written to `out`.
        for layer in 0..self.spec.n_layers() {
            self.affine(layer, tmp, out);
            if self.spec.relu_at(layer) {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(out, tmp);
        }
        std::mem::swap(out, tmp);
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        let mut out = Vec::new();
        let mut tmp = Vec::new();
        self.forward_into(x, &mut out, &mut tmp)?;
        Ok(out)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<MlpCache, NetError> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.spec.n_layers() + 1);
        let mut pre = Vec::with_capacity(self.spec.n_layers());
        acts.push(x.to_vec());
        for layer in 0..self.spec.n_layers() {
            let mut z = Vec::new();
            self.affine(layer, acts.last().unwrap(), &mut z);
            let mut a = z.clone();
            if self.spec.relu_at(layer) {
                a.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            pre.push(z);
            acts.push(a);
        }
        Ok(MlpCache {
            version: self.version,
            acts,
            pre,
        })
    }

    /// Backpropagates `dy` through the cached pass, accumulating parameter
    /// gradients into `grads` and returning the input gradient.
    pub fn backward(
        &self,
        cache: &MlpCache,
        dy: &[f64],
        grads: &mut MlpGrads,
    ) -> Result<Vec<f64>, NetError> {
        if cache.version != self.version {
            return Err(NetError::StaleCache {
                params_version: self.version,
                cache_version: cache.version,
            });
        }
        if dy.len() != self.spec.output_dim() {
            return Err(NetError::DimMismatch {
                expected: self.spec.output_dim(),
                got: dy.len(),
            });
        }
        if grads.w.len() != self.layers.len() {
            return Err(NetError::GradShapeMismatch);
        }
        let n_layers = self.spec.n_layers();
        let mut dz = dy.to_vec();
        if self.spec.relu_at(n_layers - 1) {
            mask_relu(&mut dz, &cache.pre[n_layers - 1]);
        }
        let mut dx: Vec<f64> = Vec::new();
        for layer in (0..n_layers).rev() {
            let nin = self.spec.widths[layer];
            let l = &self.layers[layer];
            let a_prev = &cache.acts[layer];
            let (gw, gb) = (&mut grads.w[layer], &mut grads.b[layer]);
            if gw.len() != l.w.len() || gb.len() != l.b.len() {
                return Err(NetError::GradShapeMismatch);
            }
            dx.clear();
            dx.resize(nin, 0.0);
            for (o, &d) in dz.iter().enumerate() {
                gb[o] += d;
                if d != 0.0 {
                    let row = &l.w[o * nin..(o + 1) * nin];
                    axpy(d, a_prev, &mut gw[o * nin..(o + 1) * nin]);
                    axpy(d, row, &mut dx);
                }
            }
            if layer > 0 {
                if self.spec.relu_at(layer - 1) {
                    mask_relu(&mut dx, &cache.pre[layer - 1]);
                }
                std::mem::swap(&mut dz, &mut dx);
            }
        }
        Ok(dx)
    }

    /// Momentum update: m <- beta m + g; p <- p - lr m. Errors out before
    /// touching any parameter if the gradient contains a non-finite value.
    pub fn sgd_step(&mut self, grads: &MlpGrads, lr: f64, momentum: f64) -> Result<(), NetError> {
        if grads.w.len() != self.layers.len() {
            return Err(NetError::GradShapeMismatch);
        }
        for (l, (gw, gb)) in self.layers.iter().zip(grads.w.iter().zip(&grads.b)) {
            if gw.len() != l.w.len() || gb.len() != l.b.len() {
                return Err(NetError::GradShapeMismatch);
            }
        }
        if !grads.is_finite() {
            return Err(NetError::NonFiniteGradient);
        }
        for (l, (gw, gb)) in self.layers.iter_mut().zip(grads.w.iter().zip(&grads.b)) {
            for ((m, p), g) in l.mw.iter_mut().zip(l.w.iter_mut()).zip(gw) {
                *m = momentum * *m + g;
                *p -= lr * *m;
            }
            for ((m, p), g) in l.mb.iter_mut().zip(l.b.iter_mut()).zip(gb) {
                *m = momentum * *m + g;
                *p -= lr * *m;
            }
        }
        self.version += 1;
        Ok(())
    }

    /// Flat parameter view in (layer, weights-then-bias) order, the same
    /// order `MlpGrads::flat` uses. Gradient checks pair the two.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out
    }

    /// Overwrite every parameter from the flat order above. Momentum
    /// buffers are untouched; the version bump invalidates live caches.
    pub fn set_flat_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params());
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        self.version += 1;
    }

    /// Raw parameter blocks in serialization order, one (weights, bias,
    /// w-momentum, b-momentum) tuple per layer.
    pub(crate) fn blocks(&self) -> impl Iterator<Item = (&[f64], &[f64], &[f64], &[f64])> {
        self.layers
            .iter()
            .map(|l| (l.w.as_slice(), l.b.as_slice(), l.mw.as_slice(), l.mb.as_slice()))
    }

    pub(crate) fn from_blocks(
        spec: MlpSpec,
        blocks: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)>,
    ) -> MlpParams {
        assert_eq!(blocks.len(), spec.n_layers());
        let layers = blocks
            .into_iter()
            .map(|(w, b, mw, mb)| Layer { w, b, mw, mb })
            .collect();
        MlpParams {
            spec,
            layers,
            version: 0,
        }
    }
}

#[inline]
fn mask_relu(d: &mut [f64], pre: &[f64]) {
    for (di, zi) in d.iter_mut().zip(pre) {
        if *zi <= 0.0 {
            *di = 0.0;
        }
    }
}
