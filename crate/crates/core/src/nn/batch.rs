//! Batched forward/backward over same-shape inputs. Weight blocks are reused
//! across samples, which is where the single-core throughput comes from: the
//! replay batch, the action lookahead, and dataset regression all push many
//! rows through one small network.
//!
//! Accumulation order per output element is fixed (8 lanes, same reduction
//! tree as the single-sample path), so batch forward outputs are bit-equal
//! to repeated single forwards. Gradient accumulation order is fixed by
//! sample index; it is the canonical order for training.

use super::{axpy, dot, MlpGrads, MlpParams, NetError};

#[inline]
fn lane_reduce(l: &[f64; 8]) -> f64 {
    ((l[0] + l[1]) + (l[2] + l[3])) + ((l[4] + l[5]) + (l[6] + l[7]))
}

/// out[s, o] = b[o] + w[o, :] . xs[s, :], blocked 2 output rows x 4 samples.
fn affine_batch(w: &[f64], b: &[f64], nin: usize, nout: usize, xs: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(xs.len(), n * nin);
    debug_assert_eq!(out.len(), n * nout);
    let mut s = 0;
    while s + 4 <= n {
        let x = [
            &xs[s * nin..(s + 1) * nin],
            &xs[(s + 1) * nin..(s + 2) * nin],
            &xs[(s + 2) * nin..(s + 3) * nin],
            &xs[(s + 3) * nin..(s + 4) * nin],
        ];
        let mut o = 0;
        while o + 2 <= nout {
            let w0 = &w[o * nin..(o + 1) * nin];
            let w1 = &w[(o + 1) * nin..(o + 2) * nin];
            let mut acc = [[0.0f64; 8]; 8];
            let chunks = nin / 8;
            for c in 0..chunks {
                let base = c * 8;
                let wc0 = &w0[base..base + 8];
                let wc1 = &w1[base..base + 8];
                for (j, xj) in x.iter().enumerate() {
                    let xc = &xj[base..base + 8];
                    for k in 0..8 {
                        acc[j][k] = wc0[k].mul_add(xc[k], acc[j][k]);
                        acc[j + 4][k] = wc1[k].mul_add(xc[k], acc[j + 4][k]);
                    }
                }
            }
            for (j, xj) in x.iter().enumerate() {
                let mut s0 = lane_reduce(&acc[j]);
                let mut s1 = lane_reduce(&acc[j + 4]);
                for i in chunks * 8..nin {
                    s0 = w0[i].mul_add(xj[i], s0);
                    s1 = w1[i].mul_add(xj[i], s1);
                }
                out[(s + j) * nout + o] = b[o] + s0;
                out[(s + j) * nout + o + 1] = b[o + 1] + s1;
            }
            o += 2;
        }
        if o < nout {
            let wo = &w[o * nin..(o + 1) * nin];
            for (j, xj) in x.iter().enumerate() {
                out[(s + j) * nout + o] = b[o] + dot(wo, xj);
            }
        }
        s += 4;
    }
    // Sample tail: single-sample rows, same per-element order.
    while s < n {
        let xj = &xs[s * nin..(s + 1) * nin];
        for o in 0..nout {
            out[s * nout + o] = b[o] + dot(&w[o * nin..(o + 1) * nin], xj);
        }
        s += 1;
    }
}

/// gw[o, i] += sum_s dz[s, o] * acts[s, i]; gb[o] += sum_s dz[s, o].
/// Blocked over 8 output rows so `acts` streams once per block.
fn accumulate_dw_batch(
    dz: &[f64],
    acts: &[f64],
    n: usize,
    nin: usize,
    nout: usize,
    gw: &mut [f64],
    gb: &mut [f64],
    local: &mut Vec<f64>,
) {
    let mut o = 0;
    while o < nout {
        let bs = (nout - o).min(8);
        local.clear();
        local.resize(bs * nin, 0.0);
        for s in 0..n {
            let drow = &dz[s * nout + o..s * nout + o + bs];
            if drow.iter().all(|&d| d == 0.0) {
                continue;
            }
            let arow = &acts[s * nin..(s + 1) * nin];
            for (r, &d) in drow.iter().enumerate() {
                if d != 0.0 {
                    axpy(d, arow, &mut local[r * nin..(r + 1) * nin]);
                }
            }
        }
        for r in 0..bs {
            axpy(1.0, &local[r * nin..(r + 1) * nin], &mut gw[(o + r) * nin..(o + r + 1) * nin]);
            let mut s_b = 0.0;
            for s in 0..n {
                s_b += dz[s * nout + o + r];
            }
            gb[o + r] += s_b;
        }
        o += bs;
    }
}

/// dx[s, i] = sum_o dz[s, o] * w[o, i], blocked 4 samples per weight-row pass.
fn backward_dx_batch(dz: &[f64], w: &[f64], n: usize, nin: usize, nout: usize, dx: &mut [f64]) {
    debug_assert_eq!(dx.len(), n * nin);
    dx.iter_mut().for_each(|v| *v = 0.0);
    let mut s = 0;
    while s + 4 <= n {
        for o in 0..nout {
            let d = [
                dz[s * nout + o],
                dz[(s + 1) * nout + o],
                dz[(s + 2) * nout + o],
                dz[(s + 3) * nout + o],
            ];
            if d.iter().all(|&v| v == 0.0) {
                continue;
            }
            let wrow = &w[o * nin..(o + 1) * nin];
            // Four independent rows of dx; split_at_mut keeps borrows disjoint.
            let (a, rest) = dx[s * nin..].split_at_mut(nin);
            let (b, rest) = rest.split_at_mut(nin);
            let (c, rest) = rest.split_at_mut(nin);
            let e = &mut rest[..nin];
            for (i, &wv) in wrow.iter().enumerate() {
                a[i] = d[0].mul_add(wv, a[i]);
                b[i] = d[1].mul_add(wv, b[i]);
                c[i] = d[2].mul_add(wv, c[i]);
                e[i] = d[3].mul_add(wv, e[i]);
            }
        }
        s += 4;
    }
    while s < n {
        for o in 0..nout {
            let d = dz[s * nout + o];
            if d != 0.0 {
                axpy(d, &w[o * nin..(o + 1) * nin], &mut dx[s * nin..(s + 1) * nin]);
            }
        }
        s += 1;
    }
}

/// Forward records for a batch: flattened `n x width` activations per layer.
#[derive(Clone, Debug)]
pub struct BatchCache {
    pub(super) version: u64,
    pub(super) n: usize,
    /// `acts[0]` is the input matrix; `acts[l]` layer l's post-activation.
    pub(super) acts: Vec<Vec<f64>>,
    pub(super) pre: Vec<Vec<f64>>,
}

impl BatchCache {
    pub fn outputs(&self) -> &[f64] {
        self.acts.last().unwrap()
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

impl MlpParams {
    fn check_batch(&self, xs: &[f64], n: usize) -> Result<(), NetError> {
        if xs.len() != n * self.spec.input_dim() {
            return Err(NetError::DimMismatch {
                expected: n * self.spec.input_dim(),
                got: xs.len(),
            });
        }
        Ok(())
    }

    /// `n` outputs written to `out` (flattened `n x output_dim`).
    pub fn forward_batch_into(
        &self,
        xs: &[f64],
        n: usize,
        out: &mut Vec<f64>,
        tmp: &mut Vec<f64>,
    ) -> Result<(), NetError> {
        self.check_batch(xs, n)?;
        tmp.clear();
        tmp.extend_from_slice(xs);
        for layer in 0..self.spec.n_layers() {
            let (nin, nout) = (self.spec.widths[layer], self.spec.widths[layer + 1]);
            let l = &self.layers[layer];
            out.clear();
            out.resize(n * nout, 0.0);
            affine_batch(&l.w, &l.b, nin, nout, tmp, n, out);
            if self.spec.relu_at(layer) {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(out, tmp);
        }
        std::mem::swap(out, tmp);
        Ok(())
    }

    pub fn forward_batch(&self, xs: &[f64], n: usize) -> Result<Vec<f64>, NetError> {
        let mut out = Vec::new();
        let mut tmp = Vec::new();
        self.forward_batch_into(xs, n, &mut out, &mut tmp)?;
        Ok(out)
    }

    pub fn forward_batch_cached(&self, xs: &[f64], n: usize) -> Result<BatchCache, NetError> {
        self.check_batch(xs, n)?;
        let mut acts = Vec::with_capacity(self.spec.n_layers() + 1);
        let mut pre = Vec::with_capacity(self.spec.n_layers());
        acts.push(xs.to_vec());
        for layer in 0..self.spec.n_layers() {
            let (nin, nout) = (self.spec.widths[layer], self.spec.widths[layer + 1]);
            let l = &self.layers[layer];
            let mut z = vec![0.0; n * nout];
            affine_batch(&l.w, &l.b, nin, nout, acts.last().unwrap(), n, &mut z);
            let mut a = z.clone();
            if self.spec.relu_at(layer) {
                a.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            pre.push(z);
            acts.push(a);
        }
        Ok(BatchCache {
            version: self.version,
            n,
            acts,
            pre,
        })
    }

    /// Batch backward: accumulates parameter gradients (summed over samples)
    /// into `grads` and returns the flattened input gradients.
    pub fn backward_batch(
        &self,
        cache: &BatchCache,
        dys: &[f64],
        grads: &mut MlpGrads,
    ) -> Result<Vec<f64>, NetError> {
        if cache.version != self.version {
            return Err(NetError::StaleCache {
                params_version: self.version,
                cache_version: cache.version,
            });
        }
        let n = cache.n;
        if dys.len() != n * self.spec.output_dim() {
            return Err(NetError::DimMismatch {
                expected: n * self.spec.output_dim(),
                got: dys.len(),
            });
        }
        if grads.w.len() != self.layers.len() {
            return Err(NetError::GradShapeMismatch);
        }
        let n_layers = self.spec.n_layers();
        let mut dz = dys.to_vec();
        if self.spec.relu_at(n_layers - 1) {
            mask_relu_flat(&mut dz, &cache.pre[n_layers - 1]);
        }
        let mut local = Vec::new();
        let mut dx: Vec<f64> = Vec::new();
        for layer in (0..n_layers).rev() {
            let (nin, nout) = (self.spec.widths[layer], self.spec.widths[layer + 1]);
            let l = &self.layers[layer];
            let (gw, gb) = (&mut grads.w[layer], &mut grads.b[layer]);
            if gw.len() != l.w.len() || gb.len() != l.b.len() {
                return Err(NetError::GradShapeMismatch);
            }
            accumulate_dw_batch(&dz, &cache.acts[layer], n, nin, nout, gw, gb, &mut local);
            dx.clear();
            dx.resize(n * nin, 0.0);
            backward_dx_batch(&dz, &l.w, n, nin, nout, &mut dx);
            if layer > 0 {
                if self.spec.relu_at(layer - 1) {
                    mask_relu_flat(&mut dx, &cache.pre[layer - 1]);
                }
                std::mem::swap(&mut dz, &mut dx);
            }
        }
        Ok(dx)
    }
}

#[inline]
fn mask_relu_flat(d: &mut [f64], pre: &[f64]) {
    for (di, zi) in d.iter_mut().zip(pre) {
        if *zi <= 0.0 {
            *di = 0.0;
        }
    }
}
