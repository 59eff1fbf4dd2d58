//! Stacked LSTM over a window of normalized counts, followed by a single
//! logit. Gradients are computed with backpropagation through time.
//!
//! Parameter layout (also the order used by the optimizer and the weights
//! file):
//!
//! 1. `embedding`: `rows × embedding_dim`, one row per adapter.
//! 2. for each layer `l`: `w_l`, `4H × (in_l + H)` row-major, acting on the
//!    concatenation `[x_t; h_{t-1}]`; then `b_l` of length `4H`. Gate blocks
//!    are ordered input, forget, cell, output. `in_0 = 1 + embedding_dim`,
//!    deeper layers take `H` inputs.
//! 3. `head_w` (`H`) and `head_b` (1).

use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub layers: usize,
    pub hidden: usize,
    pub embedding_dim: usize,
}

impl ModelShape {
    pub fn input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            1 + self.embedding_dim
        } else {
            self.hidden
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub embedding: Vec<f64>,
    pub layers: Vec<LayerParams>,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

impl LstmParams {
    fn zeros(shape: ModelShape, rows: usize) -> Self {
        let h = shape.hidden;
        Self {
            embedding: vec![0.0; rows * shape.embedding_dim],
            layers: (0..shape.layers)
                .map(|l| LayerParams {
                    w: vec![0.0; 4 * h * (shape.input_dim(l) + h)],
                    b: vec![0.0; 4 * h],
                })
                .collect(),
            head_w: vec![0.0; h],
            head_b: vec![0.0],
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.embedding];
        for l in &self.layers {
            out.push(&l.w);
            out.push(&l.b);
        }
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.embedding];
        for l in &mut self.layers {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn fill(&mut self, v: f64) {
        for t in self.tensors_mut() {
            t.fill(v);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmModel {
    shape: ModelShape,
    params: LstmParams,
    init_rng: Pcg64,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `C = alpha·A·B + beta·C` on row/column-strided f64 matrices.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k.max(1) - 1) * csa);
    debug_assert!(b.len() > (k.max(1) - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() >= (m - 1) * rsc + n);
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Activations of one layer across a window for a whole batch, kept for
/// the backward pass. Every buffer is laid out step-major, then batch item.
#[derive(Debug, Default, Clone)]
struct LayerTrace {
    /// `[x_t; h_{t-1}]`.
    z: Vec<f64>,
    /// post-activation gates `i, f, g, o`.
    gates: Vec<f64>,
    /// cell states, `c_{-1} = 0` first.
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

/// Reusable buffers for forward/backward passes.
#[derive(Debug, Default, Clone)]
pub struct Workspace {
    traces: Vec<LayerTrace>,
    pre: Vec<f64>,
    dh_ext: Vec<Vec<f64>>,
    dh_rec: Vec<f64>,
    dc: Vec<f64>,
    da: Vec<f64>,
    dz: Vec<f64>,
    logits: Vec<f64>,
}

impl LstmModel {
    /// Weights uniform in `[-1/√H, 1/√H]`, seeded.
    pub fn new(shape: ModelShape, seed: u64) -> Self {
        let mut model = Self {
            shape,
            params: LstmParams::zeros(shape, 0),
            init_rng: Pcg64::seed_from_u64(seed),
        };
        let bound = 1.0 / (shape.hidden as f64).sqrt();
        let mut rng = model.init_rng.clone();
        for t in model.params.tensors_mut() {
            for v in t.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        model.init_rng = rng;
        model
    }

    pub fn zeroed(shape: ModelShape) -> Self {
        let mut m = Self::new(shape, 0);
        m.params.fill(0.0);
        m
    }

    pub fn from_params(shape: ModelShape, params: LstmParams, seed: u64) -> Self {
        Self {
            shape,
            params,
            init_rng: Pcg64::seed_from_u64(seed),
        }
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn params(&self) -> &LstmParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut LstmParams {
        &mut self.params
    }

    pub fn embedding_rows(&self) -> usize {
        self.params.embedding.len() / self.shape.embedding_dim.max(1)
    }

    /// Adds one embedding row initialized like the other weights.
    pub fn add_embedding_row(&mut self) -> usize {
        let bound = 1.0 / (self.shape.hidden as f64).sqrt();
        for _ in 0..self.shape.embedding_dim {
            let v = self.init_rng.random_range(-bound..bound);
            self.params.embedding.push(v);
        }
        self.embedding_rows() - 1
    }

    /// Runs the window through the network and returns the logit.
    pub fn logit(&self, row: usize, counts: &[f64], ws: &mut Workspace) -> f64 {
        self.logits(&[(row, counts)], ws)[0]
    }

    pub fn probability(&self, row: usize, counts: &[f64], ws: &mut Workspace) -> f64 {
        sigmoid(self.logit(row, counts, ws))
    }

    /// Logits for several `(embedding row, window)` pairs of equal length.
    pub fn logits<'w>(&self, items: &[(usize, &[f64])], ws: &'w mut Workspace) -> &'w [f64] {
        self.forward(items, ws);
        let h = self.shape.hidden;
        let n = items.len();
        let steps = items.first().map_or(0, |it| it.1.len());
        ws.logits.clear();
        if n > 0 {
            let top = ws.traces.last().expect("at least one layer");
            let last = &top.h[(steps - 1) * n * h..steps * n * h];
            for hb in last.chunks_exact(h) {
                let z: f64 = hb.iter().zip(&self.params.head_w).map(|(a, b)| a * b).sum();
                ws.logits.push(z + self.params.head_b[0]);
            }
        }
        &ws.logits
    }

    fn forward(&self, items: &[(usize, &[f64])], ws: &mut Workspace) {
        let shape = self.shape;
        let h = shape.hidden;
        let h4 = 4 * h;
        let n = items.len();
        if n == 0 {
            return;
        }
        let steps = items[0].1.len();
        assert!(steps > 0, "empty window");
        assert!(
            items.iter().all(|it| it.1.len() == steps),
            "windows differ in length"
        );
        ws.traces.resize_with(shape.layers, LayerTrace::default);
        ws.pre.resize(n * h4, 0.0);
        let e = shape.embedding_dim;

        for l in 0..shape.layers {
            let n_in = shape.input_dim(l);
            let zw = n_in + h;
            let (below, rest) = ws.traces.split_at_mut(l);
            let tr = &mut rest[0];
            tr.z.resize(steps * n * zw, 0.0);
            tr.gates.resize(steps * n * h4, 0.0);
            tr.c.resize((steps + 1) * n * h, 0.0);
            tr.tanh_c.resize(steps * n * h, 0.0);
            tr.h.resize(steps * n * h, 0.0);
            tr.c[..n * h].fill(0.0);
            let p = &self.params.layers[l];
            for t in 0..steps {
                for (b, &(row, counts)) in items.iter().enumerate() {
                    let z = &mut tr.z[(t * n + b) * zw..(t * n + b + 1) * zw];
                    if l == 0 {
                        z[0] = counts[t];
                        z[1..n_in].copy_from_slice(&self.params.embedding[row * e..(row + 1) * e]);
                    } else {
                        z[..n_in]
                            .copy_from_slice(&below[l - 1].h[(t * n + b) * h..(t * n + b + 1) * h]);
                    }
                    if t == 0 {
                        z[n_in..].fill(0.0);
                    } else {
                        z[n_in..].copy_from_slice(
                            &tr.h[((t - 1) * n + b) * h..((t - 1) * n + b + 1) * h],
                        );
                    }
                }
                for pre in ws.pre.chunks_exact_mut(h4) {
                    pre.copy_from_slice(&p.b);
                }
                // pre = Z · Wᵀ + b
                let z = &tr.z[t * n * zw..(t + 1) * n * zw];
                gemm(
                    n,
                    zw,
                    h4,
                    1.0,
                    z,
                    (zw, 1),
                    &p.w,
                    (1, zw),
                    1.0,
                    &mut ws.pre,
                    h4,
                );
                for b in 0..n {
                    let pre = &ws.pre[b * h4..(b + 1) * h4];
                    let at = t * n + b;
                    let gates = &mut tr.gates[at * h4..(at + 1) * h4];
                    for j in 0..h {
                        let i = sigmoid(pre[j]);
                        let f = sigmoid(pre[h + j]);
                        let g = pre[2 * h + j].tanh();
                        let o = sigmoid(pre[3 * h + j]);
                        gates[j] = i;
                        gates[h + j] = f;
                        gates[2 * h + j] = g;
                        gates[3 * h + j] = o;
                        let c = f * tr.c[at * h + j] + i * g;
                        tr.c[(at + n) * h + j] = c;
                        let tc = c.tanh();
                        tr.tanh_c[at * h + j] = tc;
                        tr.h[at * h + j] = o * tc;
                    }
                }
            }
        }
    }

    /// Accumulates gradients into `grads` given `dloss/dlogit` per item,
    /// using the activations left in `ws` by the latest forward pass.
    fn backward(
        &self,
        items: &[(usize, &[f64])],
        dlogit: &[f64],
        ws: &mut Workspace,
        grads: &mut LstmParams,
    ) {
        let shape = self.shape;
        let h = shape.hidden;
        let h4 = 4 * h;
        let layers = shape.layers;
        let n = items.len();
        let steps = items[0].1.len();

        ws.dh_ext.resize_with(layers, Vec::new);
        for v in ws.dh_ext.iter_mut() {
            v.clear();
            v.resize(steps * n * h, 0.0);
        }
        {
            let top = &ws.traces[layers - 1];
            let base = (steps - 1) * n * h;
            for (b, &d) in dlogit.iter().enumerate() {
                let last = &top.h[base + b * h..base + (b + 1) * h];
                for (g, x) in grads.head_w.iter_mut().zip(last) {
                    *g += d * x;
                }
                grads.head_b[0] += d;
                let ext = &mut ws.dh_ext[layers - 1][base + b * h..base + (b + 1) * h];
                for (x, w) in ext.iter_mut().zip(&self.params.head_w) {
                    *x += d * w;
                }
            }
        }

        ws.dh_rec.resize(n * h, 0.0);
        ws.dc.resize(n * h, 0.0);
        ws.da.resize(n * h4, 0.0);
        let e = shape.embedding_dim;

        for l in (0..layers).rev() {
            let n_in = shape.input_dim(l);
            let zw = n_in + h;
            ws.dz.resize(n * zw, 0.0);
            ws.dh_rec.fill(0.0);
            ws.dc.fill(0.0);
            let p = &self.params.layers[l];
            let g_layer = &mut grads.layers[l];
            let (lower_ext, upper_ext) = ws.dh_ext.split_at_mut(l);
            let ext = &upper_ext[0];
            let tr = &ws.traces[l];
            for t in (0..steps).rev() {
                for b in 0..n {
                    let at = t * n + b;
                    let gates = &tr.gates[at * h4..(at + 1) * h4];
                    let da = &mut ws.da[b * h4..(b + 1) * h4];
                    for j in 0..h {
                        let dh = ext[at * h + j] + ws.dh_rec[b * h + j];
                        let i = gates[j];
                        let f = gates[h + j];
                        let g = gates[2 * h + j];
                        let o = gates[3 * h + j];
                        let tc = tr.tanh_c[at * h + j];
                        let dc = ws.dc[b * h + j] + dh * o * (1.0 - tc * tc);
                        let c_prev = tr.c[at * h + j];
                        da[j] = dc * g * i * (1.0 - i);
                        da[h + j] = dc * c_prev * f * (1.0 - f);
                        da[2 * h + j] = dc * i * (1.0 - g * g);
                        da[3 * h + j] = dh * tc * o * (1.0 - o);
                        ws.dc[b * h + j] = dc * f;
                    }
                }
                let z = &tr.z[t * n * zw..(t + 1) * n * zw];
                // dW += dAᵀ · Z, db += Σ dA, dZ = dA · W
                gemm(
                    h4,
                    n,
                    zw,
                    1.0,
                    &ws.da,
                    (1, h4),
                    z,
                    (zw, 1),
                    1.0,
                    &mut g_layer.w,
                    zw,
                );
                for da in ws.da.chunks_exact(h4) {
                    for (g, d) in g_layer.b.iter_mut().zip(da) {
                        *g += d;
                    }
                }
                gemm(
                    n,
                    h4,
                    zw,
                    1.0,
                    &ws.da,
                    (h4, 1),
                    &p.w,
                    (zw, 1),
                    0.0,
                    &mut ws.dz,
                    zw,
                );
                for b in 0..n {
                    let dz = &ws.dz[b * zw..(b + 1) * zw];
                    ws.dh_rec[b * h..(b + 1) * h].copy_from_slice(&dz[n_in..]);
                    if l == 0 {
                        let row = items[b].0;
                        let ge = &mut grads.embedding[row * e..(row + 1) * e];
                        for (gi, d) in ge.iter_mut().zip(&dz[1..n_in]) {
                            *gi += d;
                        }
                    } else {
                        let at = t * n + b;
                        let below = &mut lower_ext[l - 1][at * h..(at + 1) * h];
                        for (x, d) in below.iter_mut().zip(&dz[..n_in]) {
                            *x += d;
                        }
                    }
                }
            }
        }
    }

    /// Mean binary cross-entropy over `batch` and its gradient. Each item is
    /// `(embedding row, window, label)`; windows must share one length.
    pub fn loss_and_gradient<'a, I>(&self, batch: I, ws: &mut Workspace) -> (f64, LstmParams)
    where
        I: IntoIterator<Item = (usize, &'a [f64], bool)>,
    {
        let mut grads = LstmParams::zeros(self.shape, self.embedding_rows());
        let (items, labels): (Vec<(usize, &[f64])>, Vec<bool>) =
            batch.into_iter().map(|(r, c, y)| ((r, c), y)).unzip();
        if items.is_empty() {
            return (0.0, grads);
        }
        let n = items.len() as f64;
        let logits = self.logits(&items, ws).to_vec();
        let mut loss = 0.0;
        let mut dlogit = Vec::with_capacity(items.len());
        for (&z, &label) in logits.iter().zip(&labels) {
            let y = if label { 1.0 } else { 0.0 };
            // stable log(1 + e^{-|z|}) form of the cross-entropy
            loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            dlogit.push((sigmoid(z) - y) / n);
        }
        self.backward(&items, &dlogit, ws, &mut grads);
        (loss / n, grads)
    }
}
