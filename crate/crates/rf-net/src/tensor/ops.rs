//! Elementwise, reduction, and structural ops with backward rules.

use super::{Backward, Tensor};

fn assert_same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

// ---------------------------------------------------------------- binary

struct AddBack {
    a: Tensor,
    b: Tensor,
}
impl Backward for AddBack {
    fn backward(&self, g: &[f64]) {
        self.a.accumulate_grad(g);
        self.b.accumulate_grad(g);
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b, "add");
    let data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(AddBack { a: a.clone(), b: b.clone() }),
    )
}

struct SubBack {
    a: Tensor,
    b: Tensor,
}
impl Backward for SubBack {
    fn backward(&self, g: &[f64]) {
        self.a.accumulate_grad(g);
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        self.b.accumulate_grad(&neg);
    }
}

pub fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b, "sub");
    let data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x - y).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(SubBack { a: a.clone(), b: b.clone() }),
    )
}

struct MulBack {
    a: Tensor,
    b: Tensor,
}
impl Backward for MulBack {
    fn backward(&self, g: &[f64]) {
        {
            let bd = self.b.data();
            let ga: Vec<f64> = g.iter().zip(bd.iter()).map(|(gv, bv)| gv * bv).collect();
            drop(bd);
            self.a.accumulate_grad(&ga);
        }
        let ad = self.a.data();
        let gb: Vec<f64> = g.iter().zip(ad.iter()).map(|(gv, av)| gv * av).collect();
        drop(ad);
        self.b.accumulate_grad(&gb);
    }
}

pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b, "mul");
    let data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(MulBack { a: a.clone(), b: b.clone() }),
    )
}

struct Atan2Back {
    s: Tensor,
    c: Tensor,
}
impl Backward for Atan2Back {
    fn backward(&self, g: &[f64]) {
        let sd = self.s.data();
        let cd = self.c.data();
        let mut gs = vec![0.0; g.len()];
        let mut gc = vec![0.0; g.len()];
        for i in 0..g.len() {
            let denom = sd[i] * sd[i] + cd[i] * cd[i];
            if denom > 0.0 {
                gs[i] = g[i] * cd[i] / denom;
                gc[i] = -g[i] * sd[i] / denom;
            }
        }
        drop(sd);
        drop(cd);
        self.s.accumulate_grad(&gs);
        self.c.accumulate_grad(&gc);
    }
}

/// Elementwise `atan2(s, c)`, range (-pi, pi]. Gradients are defined away
/// from the origin; at (0, 0) the contribution is dropped.
pub fn atan2(s: &Tensor, c: &Tensor) -> Tensor {
    assert_same_shape(s, c, "atan2");
    let data: Vec<f64> = s.data().iter().zip(c.data().iter()).map(|(y, x)| y.atan2(*x)).collect();
    Tensor::from_op(
        s.shape().to_vec(),
        data,
        vec![s.clone(), c.clone()],
        Box::new(Atan2Back { s: s.clone(), c: c.clone() }),
    )
}

// ---------------------------------------------------------------- unary

struct ScaleBack {
    x: Tensor,
    c: f64,
}
impl Backward for ScaleBack {
    fn backward(&self, g: &[f64]) {
        let gx: Vec<f64> = g.iter().map(|v| v * self.c).collect();
        self.x.accumulate_grad(&gx);
    }
}

pub fn scale(x: &Tensor, c: f64) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|v| v * c).collect();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(ScaleBack { x: x.clone(), c }),
    )
}

struct PassBack {
    x: Tensor,
}
impl Backward for PassBack {
    fn backward(&self, g: &[f64]) {
        self.x.accumulate_grad(g);
    }
}

pub fn add_scalar(x: &Tensor, c: f64) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|v| v + c).collect();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(PassBack { x: x.clone() }),
    )
}

/// Reinterpret the same values under a new shape.
pub fn reshape(x: &Tensor, shape: &[usize]) -> Tensor {
    assert_eq!(
        shape.iter().product::<usize>(),
        x.numel(),
        "reshape: {:?} incompatible with {} elements",
        shape,
        x.numel()
    );
    Tensor::from_op(
        shape.to_vec(),
        x.to_vec(),
        vec![x.clone()],
        Box::new(PassBack { x: x.clone() }),
    )
}

struct LeakyReluBack {
    x: Tensor,
    slope: f64,
}
impl Backward for LeakyReluBack {
    fn backward(&self, g: &[f64]) {
        let xd = self.x.data();
        // Subgradient at 0 is the negative-side slope.
        let gx: Vec<f64> = g
            .iter()
            .zip(xd.iter())
            .map(|(gv, xv)| if *xv > 0.0 { *gv } else { gv * self.slope })
            .collect();
        drop(xd);
        self.x.accumulate_grad(&gx);
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|v| if *v > 0.0 { *v } else { v * slope }).collect();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(LeakyReluBack { x: x.clone(), slope }),
    )
}

pub fn relu(x: &Tensor) -> Tensor {
    leaky_relu(x, 0.0)
}

struct ClampMinBack {
    x: Tensor,
    c: f64,
}
impl Backward for ClampMinBack {
    fn backward(&self, g: &[f64]) {
        let xd = self.x.data();
        let gx: Vec<f64> = g
            .iter()
            .zip(xd.iter())
            .map(|(gv, xv)| if *xv > self.c { *gv } else { 0.0 })
            .collect();
        drop(xd);
        self.x.accumulate_grad(&gx);
    }
}

/// `max(x, c)` elementwise; gradient is zero on the clamped side.
pub fn clamp_min(x: &Tensor, c: f64) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|v| v.max(c)).collect();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(ClampMinBack { x: x.clone(), c }),
    )
}

struct SqrtBack {
    x: Tensor,
    out: Vec<f64>,
}
impl Backward for SqrtBack {
    fn backward(&self, g: &[f64]) {
        let gx: Vec<f64> = g
            .iter()
            .zip(self.out.iter())
            .map(|(gv, yv)| if *yv > 0.0 { gv * 0.5 / yv } else { 0.0 })
            .collect();
        self.x.accumulate_grad(&gx);
    }
}

pub fn sqrt(x: &Tensor) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|v| v.sqrt()).collect();
    Tensor::from_op(
        x.shape().to_vec(),
        data.clone(),
        vec![x.clone()],
        Box::new(SqrtBack { x: x.clone(), out: data }),
    )
}

// ------------------------------------------------------------- reductions

struct SumAllBack {
    x: Tensor,
}
impl Backward for SumAllBack {
    fn backward(&self, g: &[f64]) {
        let gx = vec![g[0]; self.x.numel()];
        self.x.accumulate_grad(&gx);
    }
}

pub fn sum_all(x: &Tensor) -> Tensor {
    let s: f64 = x.data().iter().sum();
    Tensor::from_op(
        vec![1],
        vec![s],
        vec![x.clone()],
        Box::new(SumAllBack { x: x.clone() }),
    )
}

pub fn mean_all(x: &Tensor) -> Tensor {
    let n = x.numel() as f64;
    scale(&sum_all(x), 1.0 / n)
}

struct SumAxis0Back {
    x: Tensor,
    n: usize,
    rest: usize,
}
impl Backward for SumAxis0Back {
    fn backward(&self, g: &[f64]) {
        let mut gx = vec![0.0; self.n * self.rest];
        for layer in 0..self.n {
            gx[layer * self.rest..(layer + 1) * self.rest].copy_from_slice(g);
        }
        self.x.accumulate_grad(&gx);
    }
}

/// Sum over the leading axis: `[N, rest..] -> [rest..]`.
pub fn sum_axis0(x: &Tensor) -> Tensor {
    assert!(!x.shape().is_empty());
    let n = x.shape()[0];
    let rest_shape: Vec<usize> = x.shape()[1..].to_vec();
    let rest: usize = rest_shape.iter().product();
    let xd = x.data();
    let mut out = vec![0.0; rest];
    for layer in 0..n {
        for i in 0..rest {
            out[i] += xd[layer * rest + i];
        }
    }
    drop(xd);
    Tensor::from_op(
        rest_shape,
        out,
        vec![x.clone()],
        Box::new(SumAxis0Back { x: x.clone(), n, rest }),
    )
}

// ------------------------------------------------------------- structural

struct Stack0Back {
    parts: Vec<Tensor>,
    part_len: usize,
}
impl Backward for Stack0Back {
    fn backward(&self, g: &[f64]) {
        for (i, p) in self.parts.iter().enumerate() {
            p.accumulate_grad(&g[i * self.part_len..(i + 1) * self.part_len]);
        }
    }
}

/// Stack same-shape tensors along a new leading axis.
pub fn stack0(parts: &[Tensor]) -> Tensor {
    assert!(!parts.is_empty(), "stack0 of zero tensors");
    let part_shape = parts[0].shape().to_vec();
    let part_len: usize = part_shape.iter().product();
    let mut data = Vec::with_capacity(parts.len() * part_len);
    for p in parts {
        assert_eq!(p.shape(), &part_shape[..], "stack0: ragged shapes");
        data.extend_from_slice(&p.data());
    }
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(&part_shape);
    Tensor::from_op(
        shape,
        data,
        parts.to_vec(),
        Box::new(Stack0Back { parts: parts.to_vec(), part_len }),
    )
}

struct Gather2Back {
    x: Tensor,
    cols: usize,
    idx: Vec<(usize, usize)>,
}
impl Backward for Gather2Back {
    fn backward(&self, g: &[f64]) {
        let mut gx = vec![0.0; self.x.numel()];
        for (k, (r, c)) in self.idx.iter().enumerate() {
            gx[r * self.cols + c] += g[k];
        }
        self.x.accumulate_grad(&gx);
    }
}

/// Gather entries of a 2-D tensor at (row, col) positions.
pub fn gather2(x: &Tensor, idx: &[(usize, usize)]) -> Tensor {
    assert_eq!(x.shape().len(), 2, "gather2 expects a 2-D tensor");
    let (rows, cols) = (x.shape()[0], x.shape()[1]);
    let xd = x.data();
    let mut out = Vec::with_capacity(idx.len());
    for &(r, c) in idx {
        assert!(r < rows && c < cols, "gather2 index ({r},{c}) out of {rows}x{cols}");
        out.push(xd[r * cols + c]);
    }
    drop(xd);
    Tensor::from_op(
        vec![idx.len()],
        out,
        vec![x.clone()],
        Box::new(Gather2Back { x: x.clone(), cols, idx: idx.to_vec() }),
    )
}

struct SelectChannelBack {
    x: Tensor,
    channel: usize,
    channels: usize,
    hw: usize,
    batch: usize,
}
impl Backward for SelectChannelBack {
    fn backward(&self, g: &[f64]) {
        let mut gx = vec![0.0; self.x.numel()];
        for b in 0..self.batch {
            let src = b * self.hw;
            let dst = (b * self.channels + self.channel) * self.hw;
            gx[dst..dst + self.hw].copy_from_slice(&g[src..src + self.hw]);
        }
        self.x.accumulate_grad(&gx);
    }
}

/// Select one channel of a `[B, C, H, W]` tensor, yielding `[B, 1, H, W]`.
pub fn select_channel(x: &Tensor, channel: usize) -> Tensor {
    assert_eq!(x.shape().len(), 4, "select_channel expects [B,C,H,W]");
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    assert!(channel < c, "channel {channel} out of {c}");
    let hw = h * w;
    let xd = x.data();
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        let src = (bi * c + channel) * hw;
        out.extend_from_slice(&xd[src..src + hw]);
    }
    drop(xd);
    Tensor::from_op(
        vec![b, 1, h, w],
        out,
        vec![x.clone()],
        Box::new(SelectChannelBack { x: x.clone(), channel, channels: c, hw, batch: b }),
    )
}

// ---------------------------------------------------------------- matmul

pub(crate) fn dgemm_rm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct MatmulNtBack {
    a: Tensor,
    b: Tensor,
    m: usize,
    d: usize,
    n: usize,
}
impl Backward for MatmulNtBack {
    fn backward(&self, g: &[f64]) {
        // dA = G * B, dB = G^T * A
        {
            let bd = self.b.data();
            let mut ga = vec![0.0; self.m * self.d];
            dgemm_rm(self.m, self.n, self.d, 1.0, g, false, &bd, false, 0.0, &mut ga);
            drop(bd);
            self.a.accumulate_grad(&ga);
        }
        let ad = self.a.data();
        let mut gb = vec![0.0; self.n * self.d];
        dgemm_rm(self.n, self.m, self.d, 1.0, g, true, &ad, false, 0.0, &mut gb);
        drop(ad);
        self.b.accumulate_grad(&gb);
    }
}

/// `a (M x D)` times `b (N x D)` transposed: output `M x N` of row dot
/// products.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape().len(), 2);
    assert_eq!(b.shape().len(), 2);
    assert_eq!(a.shape()[1], b.shape()[1], "matmul_nt inner dims differ");
    let (m, d, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
    let mut out = vec![0.0; m * n];
    dgemm_rm(m, d, n, 1.0, &a.data(), false, &b.data(), true, 0.0, &mut out);
    Tensor::from_op(
        vec![m, n],
        out,
        vec![a.clone(), b.clone()],
        Box::new(MatmulNtBack { a: a.clone(), b: b.clone(), m, d, n }),
    )
}

struct L2NormRowsBack {
    x: Tensor,
    eps: f64,
    rows: usize,
    cols: usize,
}
impl Backward for L2NormRowsBack {
    fn backward(&self, g: &[f64]) {
        let xd = self.x.data();
        let mut gx = vec![0.0; xd.len()];
        for r in 0..self.rows {
            let row = &xd[r * self.cols..(r + 1) * self.cols];
            let gr = &g[r * self.cols..(r + 1) * self.cols];
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let s = norm + self.eps;
            let dot: f64 = gr.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
            for c in 0..self.cols {
                let mut v = gr[c] / s;
                if norm > 1e-300 {
                    v -= row[c] * dot / (norm * s * s);
                }
                gx[r * self.cols + c] = v;
            }
        }
        drop(xd);
        self.x.accumulate_grad(&gx);
    }
}

/// Scale each row of a `K x D` tensor to unit Euclidean norm via
/// `v / (||v|| + eps)`.
pub fn l2_normalize(x: &Tensor, eps: f64) -> Tensor {
    assert_eq!(x.shape().len(), 2, "l2_normalize expects K x D");
    let (rows, cols) = (x.shape()[0], x.shape()[1]);
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for r in 0..rows {
        let row = &xd[r * cols..(r + 1) * cols];
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let s = norm + eps;
        for c in 0..cols {
            out[r * cols + c] = row[c] / s;
        }
    }
    drop(xd);
    Tensor::from_op(
        vec![rows, cols],
        out,
        vec![x.clone()],
        Box::new(L2NormRowsBack { x: x.clone(), eps, rows, cols }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn leaky_relu_values() {
        let x = Tensor::from_vec(&[3], vec![2.0, -2.0, 0.0]);
        let y = leaky_relu(&x, 0.01);
        let d = y.to_vec();
        assert_relative_eq!(d[0], 2.0);
        assert_relative_eq!(d[1], -0.02);
        assert_relative_eq!(d[2], 0.0);
    }

    #[test]
    fn l2_normalize_examples() {
        let x = Tensor::from_vec(&[1, 2], vec![3.0, 4.0]);
        let y = l2_normalize(&x, 0.0);
        let d = y.to_vec();
        assert_relative_eq!(d[0], 0.6, epsilon = 1e-12);
        assert_relative_eq!(d[1], 0.8, epsilon = 1e-12);

        let zero = Tensor::from_vec(&[1, 3], vec![0.0; 3]);
        let yz = l2_normalize(&zero, 1e-8);
        assert!(yz.to_vec().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matmul_nt_matches_loops() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(&[2, 3], vec![0.5, -1.0, 2.0, 1.0, 1.0, 1.0]);
        let c = matmul_nt(&a, &b);
        let cd = c.to_vec();
        let ad = a.to_vec();
        let bd = b.to_vec();
        for i in 0..2 {
            for j in 0..2 {
                let want: f64 = (0..3).map(|k| ad[i * 3 + k] * bd[j * 3 + k]).sum();
                assert_relative_eq!(cd[i * 2 + j], want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn backward_through_simple_chain() {
        // f = sum((a * b) + a) => df/da = b + 1, df/db = a
        let a = Tensor::param(&[2], vec![2.0, 3.0]);
        let b = Tensor::param(&[2], vec![5.0, 7.0]);
        let y = sum_all(&add(&mul(&a, &b), &a));
        y.backward();
        assert_eq!(a.grad().unwrap(), vec![6.0, 8.0]);
        assert_eq!(b.grad().unwrap(), vec![2.0, 3.0]);
    }

    #[test]
    fn shared_node_grads_accumulate_once_per_use() {
        // f = sum(x + x) => df/dx = 2
        let x = Tensor::param(&[2], vec![1.0, 1.0]);
        let y = sum_all(&add(&x, &x));
        y.backward();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }
}
