//! Dense kernels with hand-written backward passes. Matrices are row-major
//! slices; weights are stored `[inputs x outputs]` so a layer computes
//! `y = x W + b`.

use super::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// A strided read-only matrix view.
#[derive(Clone, Copy)]
pub struct View<'a, F> {
    data: &'a [F],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, F: Scalar> View<'a, F> {
    pub fn new(data: &'a [F], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a [F], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        if rows > 0 && cols > 0 {
            let last = (rows - 1) * rs + (cols - 1) * cs;
            assert!(last < data.len(), "view {rows}x{cols} exceeds {} elements", data.len());
        }
        View {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }

    pub fn t(self) -> Self {
        View {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    /// Columns `start..start + width` of a row-major matrix.
    pub fn cols(self, start: usize, width: usize) -> Self {
        assert!(start + width <= self.cols);
        if self.rows == 0 || width == 0 {
            return View {
                data: self.data,
                rows: self.rows,
                cols: width,
                rs: self.rs,
                cs: self.cs,
            };
        }
        Self::strided(&self.data[start * self.cs..], self.rows, width, self.rs, self.cs)
    }
}

/// `c = alpha * a b + beta * c`, where `c` is row-major with row stride `ldc`.
pub fn gemm<F: Scalar>(a: View<F>, b: View<F>, alpha: F, beta: F, c: &mut [F], ldc: usize) {
    assert_eq!(a.cols, b.rows, "inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * ldc + n <= c.len(), "output too small");
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * ldc..i * ldc + n] {
                *v = if beta == F::zero() { F::zero() } else { *v * beta };
            }
        }
        return;
    }
    // SAFETY: every view was bounds-checked on construction and `c` above.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        )
    }
}

pub fn matmul<F: Scalar>(a: View<F>, b: View<F>) -> Vec<F> {
    let mut c = vec![F::zero(); a.rows * b.cols];
    gemm(a, b, F::one(), F::zero(), &mut c, b.cols);
    c
}

/// `y = x W + b` for `rows` inputs of width `n_in`.
pub fn linear<F: Scalar>(x: &[F], rows: usize, w: &[F], b: &[F], n_in: usize, n_out: usize) -> Vec<F> {
    let mut y = Vec::with_capacity(rows * n_out);
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    gemm(
        View::new(x, rows, n_in),
        View::new(w, n_in, n_out),
        F::one(),
        F::one(),
        &mut y,
        n_out,
    );
    y
}

/// Backward of [`linear`]. Accumulates `dW` and `db` into `grads` when given
/// and returns `dx`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<F: Scalar>(
    x: &[F],
    dy: &[F],
    rows: usize,
    w: &[F],
    n_in: usize,
    n_out: usize,
    grads: Option<(&mut [F], &mut [F])>,
) -> Vec<F> {
    if let Some((dw, db)) = grads {
        gemm(
            View::new(x, rows, n_in).t(),
            View::new(dy, rows, n_out),
            F::one(),
            F::one(),
            dw,
            n_out,
        );
        for r in 0..rows {
            for (g, &d) in db.iter_mut().zip(&dy[r * n_out..(r + 1) * n_out]) {
                *g += d;
            }
        }
    }
    matmul(View::new(dy, rows, n_out), View::new(w, n_in, n_out).t())
}

pub struct NormCache<F> {
    pub out: Vec<F>,
    xhat: Vec<F>,
    inv_std: Vec<F>,
}

pub fn layer_norm<F: Scalar>(x: &[F], rows: usize, d: usize, gain: &[F], bias: &[F]) -> NormCache<F> {
    let eps = F::of(LAYER_NORM_EPS);
    let n = F::of(d as f64);
    let mut out = vec![F::zero(); rows * d];
    let mut xhat = vec![F::zero(); rows * d];
    let mut inv_std = vec![F::zero(); rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<F>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let inv = F::one() / (var + eps).sqrt();
        inv_std[r] = inv;
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain[j] + bias[j];
        }
    }
    NormCache { out, xhat, inv_std }
}

pub fn layer_norm_backward<F: Scalar>(
    cache: &NormCache<F>,
    dy: &[F],
    rows: usize,
    d: usize,
    gain: &[F],
    grads: Option<(&mut [F], &mut [F])>,
) -> Vec<F> {
    if let Some((dg, db)) = grads {
        for r in 0..rows {
            for j in 0..d {
                dg[j] += dy[r * d + j] * cache.xhat[r * d + j];
                db[j] += dy[r * d + j];
            }
        }
    }
    let n = F::of(d as f64);
    let mut dx = vec![F::zero(); rows * d];
    let mut dxhat = vec![F::zero(); d];
    for r in 0..rows {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        for j in 0..d {
            dxhat[j] = dy[r * d + j] * gain[j];
        }
        let mean_d = dxhat.iter().copied().sum::<F>() / n;
        let mean_dx = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>() / n;
        let inv = cache.inv_std[r];
        for j in 0..d {
            dx[r * d + j] = inv * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<F: Scalar>(x: &[F]) -> Vec<F> {
    let (c, a, half) = (F::of(GELU_C), F::of(GELU_A), F::of(0.5));
    x.iter()
        .map(|&v| half * v * (F::one() + (c * (v + a * v * v * v)).tanh()))
        .collect()
}

pub fn gelu_backward<F: Scalar>(x: &[F], dy: &[F]) -> Vec<F> {
    let (c, a, half, three) = (F::of(GELU_C), F::of(GELU_A), F::of(0.5), F::of(3.0));
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let t = (c * (v + a * v * v * v)).tanh();
            let dt = (F::one() - t * t) * c * (F::one() + three * a * v * v);
            g * (half * (F::one() + t) + half * v * dt)
        })
        .collect()
}

/// In-place softmax over each row of length `n`.
pub fn softmax_rows<F: Scalar>(x: &mut [F], n: usize) {
    for row in x.chunks_mut(n) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Log-softmax of one row.
pub fn log_softmax<F: Scalar>(row: &[F]) -> Vec<F> {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
    row.iter().map(|&v| v - lse).collect()
}

/// Shape of one attention call over a single sequence.
#[derive(Debug, Clone, Copy)]
pub struct AttnShape {
    pub queries: usize,
    pub keys: usize,
    pub heads: usize,
    pub d_model: usize,
    /// Query `i` sees keys `j <= i + offset`; `None` sees every key.
    pub causal_offset: Option<usize>,
}

impl AttnShape {
    fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    fn visible(&self, i: usize) -> usize {
        match self.causal_offset {
            Some(off) => (i + off + 1).min(self.keys),
            None => self.keys,
        }
    }
}

/// Multi-head scaled dot-product attention. Returns the concatenated head
/// outputs (`queries x d_model`) and the attention maps (`heads x queries x
/// keys`).
pub fn attention<F: Scalar>(q: &[F], k: &[F], v: &[F], s: AttnShape) -> (Vec<F>, Vec<F>) {
    let (d, dh) = (s.d_model, s.head_dim());
    let scale = F::one() / F::of(dh as f64).sqrt();
    let mut ctx = vec![F::zero(); s.queries * d];
    let mut probs = vec![F::zero(); s.heads * s.queries * s.keys];
    for h in 0..s.heads {
        let qh = View::new(q, s.queries, d).cols(h * dh, dh);
        let kh = View::new(k, s.keys, d).cols(h * dh, dh);
        let vh = View::new(v, s.keys, d).cols(h * dh, dh);
        let p = &mut probs[h * s.queries * s.keys..(h + 1) * s.queries * s.keys];
        gemm(qh, kh.t(), scale, F::zero(), p, s.keys);
        for i in 0..s.queries {
            let row = &mut p[i * s.keys..(i + 1) * s.keys];
            let vis = s.visible(i);
            softmax_rows(&mut row[..vis], vis.max(1));
            for x in &mut row[vis..] {
                *x = F::zero();
            }
        }
        gemm(
            View::new(p, s.queries, s.keys),
            vh,
            F::one(),
            F::zero(),
            &mut ctx[h * dh..],
            d,
        );
    }
    (ctx, probs)
}

/// Backward of [`attention`]: returns `(dq, dk, dv)`.
pub fn attention_backward<F: Scalar>(
    dctx: &[F],
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    s: AttnShape,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let (d, dh) = (s.d_model, s.head_dim());
    let scale = F::one() / F::of(dh as f64).sqrt();
    let mut dq = vec![F::zero(); s.queries * d];
    let mut dk = vec![F::zero(); s.keys * d];
    let mut dv = vec![F::zero(); s.keys * d];
    let mut dp = vec![F::zero(); s.queries * s.keys];
    for h in 0..s.heads {
        let p = &probs[h * s.queries * s.keys..(h + 1) * s.queries * s.keys];
        let pv = View::new(p, s.queries, s.keys);
        let dch = View::new(dctx, s.queries, d).cols(h * dh, dh);
        let vh = View::new(v, s.keys, d).cols(h * dh, dh);
        // dV_h = P^T dctx_h
        gemm(pv.t(), dch, F::one(), F::zero(), &mut dv[h * dh..], d);
        // dP = dctx_h V_h^T
        gemm(dch, vh.t(), F::one(), F::zero(), &mut dp, s.keys);
        // dS = P * (dP - rowsum(dP * P)), scaled
        for i in 0..s.queries {
            let row_p = &p[i * s.keys..(i + 1) * s.keys];
            let row_d = &mut dp[i * s.keys..(i + 1) * s.keys];
            let dot = row_p.iter().zip(row_d.iter()).map(|(&a, &b)| a * b).sum::<F>();
            for (g, &pp) in row_d.iter_mut().zip(row_p) {
                *g = pp * (*g - dot) * scale;
            }
        }
        let ds = View::new(&dp, s.queries, s.keys);
        let qh = View::new(q, s.queries, d).cols(h * dh, dh);
        let kh = View::new(k, s.keys, d).cols(h * dh, dh);
        gemm(ds, kh, F::one(), F::zero(), &mut dq[h * dh..], d);
        gemm(ds.t(), qh, F::one(), F::zero(), &mut dk[h * dh..], d);
    }
    (dq, dk, dv)
}

pub fn add_into<F: Scalar>(acc: &mut [F], x: &[F]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}
