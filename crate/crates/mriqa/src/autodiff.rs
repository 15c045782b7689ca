//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Graph`] records every operation of a forward pass; [`Graph::backward`]
//! walks the tape in reverse and produces exact gradients for every node that
//! wants them. The element type is generic so the same network code runs in
//! f32 for training and f64 for finite-difference gradient checks.

use std::fmt::{Debug, Display};
use std::sync::Arc;

/// Element type of the engine: f32 or f64.
pub trait Scalar:
    Copy
    + Send
    + Sync
    + 'static
    + PartialOrd
    + Debug
    + Display
    + Default
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::iter::Sum
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    /// Dense matrix multiply c = alpha * a @ b + beta * c with explicit
    /// row/column strides (so transposes need no data movement).
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn tanh(self) -> Self {
                self.tanh()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn max(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            unsafe fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Shape plus shared storage. Cloning is cheap (the buffer is reference
/// counted); mutation goes through [`TensorData::make_mut`].
#[derive(Clone, Debug)]
pub struct TensorData<T> {
    pub shape: Vec<usize>,
    pub data: Arc<Vec<T>>,
}

impl<T: Scalar> TensorData<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} vs {} elements",
            data.len()
        );
        TensorData {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        TensorData {
            shape,
            data: Arc::new(vec![T::ZERO; n]),
        }
    }

    pub fn scalar(v: T) -> Self {
        TensorData::new(vec![1], vec![v])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// Product of all leading dimensions (rows when viewed as a matrix).
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn make_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub usize);

/// Precomputed pooling bins: `offsets[r]..offsets[r+1]` indexes into `rows`
/// giving the input rows averaged into output row r.
#[derive(Debug)]
pub struct PoolBins {
    pub offsets: Vec<u32>,
    pub rows: Vec<u32>,
}

impl PoolBins {
    pub fn out_rows(&self) -> usize {
        self.offsets.len() - 1
    }
}

enum Op<T: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    /// (rows, C) + (C,) broadcast over rows; also covers subtraction via
    /// scale(-1) + add.
    AddBias(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId, T),
    /// (rows, K) @ (K, M).
    Matmul(NodeId, NodeId),
    /// Batched (B, N, K) @ (B, K, M), or @ (B, M, K)^T per batch.
    Bmm {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
    },
    /// out[i] = in[map[i]]; the map must be injective.
    Reindex {
        a: NodeId,
        map: Arc<Vec<u32>>,
    },
    Reshape(NodeId),
    /// Concatenate along the last dimension.
    ConcatLast(Vec<NodeId>),
    LayerNorm {
        a: NodeId,
        gain: NodeId,
        bias: NodeId,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    /// Softmax over the last dimension; backward uses the stored output.
    SoftmaxLast(NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    /// Multiply row r (all channels) by factors[r]; factors take no gradient.
    ScaleRows {
        a: NodeId,
        factors: Arc<Vec<T>>,
    },
    /// scores (B, H, T, T) + mask (B, T, T) broadcast over heads; the mask
    /// is constant so only the scores node is kept.
    AddAttnMask(NodeId),
    /// scores (B, H, T, T) + table[index[t], h]; table is a learned leaf.
    AddRelBias {
        a: NodeId,
        table: NodeId,
        index: Arc<Vec<u32>>,
    },
    /// (rows, C) -> (bins, C), each output row the mean of its bin.
    PoolRows {
        a: NodeId,
        bins: Arc<PoolBins>,
    },
    MeanAll(NodeId),
    Abs(NodeId),
    Square(NodeId),
}

struct Node<T: Scalar> {
    value: TensorData<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// One recorded forward pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    /// (external parameter id, leaf node) pairs registered via `leaf_param`.
    params: Vec<(usize, NodeId)>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &TensorData<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    fn push(&mut self, value: TensorData<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, value: TensorData<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input, e.g. the image in input-sensitivity checks.
    pub fn leaf(&mut self, value: TensorData<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Parameter leaf tracked under an external id so optimizers can collect
    /// its gradient after backward.
    pub fn leaf_param(&mut self, param_id: usize, value: TensorData<T>) -> NodeId {
        let id = self.push(value, Op::Leaf, true);
        self.params.push((param_id, id));
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let data: Vec<T> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(self.nodes[b.0].value.data.iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = TensorData::new(self.shape(a).to_vec(), data);
        let ng = self.wants(a) || self.wants(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let c = self.nodes[a.0].value.last_dim();
        assert_eq!(self.shape(bias), &[c], "bias shape mismatch");
        let bv = self.nodes[bias.0].value.data.clone();
        let data: Vec<T> = self.nodes[a.0]
            .value
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % c])
            .collect();
        let value = TensorData::new(self.shape(a).to_vec(), data);
        let ng = self.wants(a) || self.wants(bias);
        self.push(value, Op::AddBias(a, bias), ng)
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let data: Vec<T> = self.nodes[a.0].value.data.iter().map(|&x| x * factor).collect();
        let value = TensorData::new(self.shape(a).to_vec(), data);
        let ng = self.wants(a);
        self.push(value, Op::Scale(a, factor), ng)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: T) -> NodeId {
        let data: Vec<T> = self.nodes[a.0].value.data.iter().map(|&x| x + c).collect();
        let value = TensorData::new(self.shape(a).to_vec(), data);
        let ng = self.wants(a);
        self.push(value, Op::AddScalar(a, c), ng)
    }

    /// (rows, K) @ (K, M) with all leading dimensions of `a` flattened into
    /// rows; the output keeps `a`'s leading dims with M as the last.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let k = self.nodes[a.0].value.last_dim();
        let bs = self.shape(b);
        assert_eq!(bs.len(), 2, "matmul rhs must be 2-d");
        assert_eq!(bs[0], k, "matmul inner dim mismatch");
        let m = bs[1];
        let rows = self.nodes[a.0].value.rows();
        let mut out = vec![T::ZERO; rows * m];
        unsafe {
            T::gemm(
                rows,
                k,
                m,
                T::ONE,
                self.nodes[a.0].value.data.as_ptr(),
                k as isize,
                1,
                self.nodes[b.0].value.data.as_ptr(),
                m as isize,
                1,
                T::ZERO,
                out.as_mut_ptr(),
                m as isize,
                1,
            );
        }
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = m;
        let ng = self.wants(a) || self.wants(b);
        self.push(TensorData::new(shape, out), Op::Matmul(a, b), ng)
    }

    /// Batched matmul. `a` is (B, N, K); `b` is (B, K, M), or (B, M, K) with
    /// `trans_b` in which case the result is a @ b^T per batch.
    pub fn bmm(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> NodeId {
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(b).to_vec();
        assert_eq!(ashape.len(), 3, "bmm lhs must be 3-d");
        assert_eq!(bshape.len(), 3, "bmm rhs must be 3-d");
        assert_eq!(ashape[0], bshape[0], "bmm batch mismatch");
        let (batch, n, k) = (ashape[0], ashape[1], ashape[2]);
        let m = if trans_b { bshape[1] } else { bshape[2] };
        let inner = if trans_b { bshape[2] } else { bshape[1] };
        assert_eq!(inner, k, "bmm inner dim mismatch");
        let mut out = vec![T::ZERO; batch * n * m];
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        for t in 0..batch {
            let (rsb, csb) = if trans_b {
                (1isize, k as isize)
            } else {
                (m as isize, 1isize)
            };
            unsafe {
                T::gemm(
                    n,
                    k,
                    m,
                    T::ONE,
                    av.as_ptr().add(t * n * k),
                    k as isize,
                    1,
                    bv.as_ptr().add(t * bshape[1] * bshape[2]),
                    rsb,
                    csb,
                    T::ZERO,
                    out.as_mut_ptr().add(t * n * m),
                    m as isize,
                    1,
                );
            }
        }
        let ng = self.wants(a) || self.wants(b);
        self.push(
            TensorData::new(vec![batch, n, m], out),
            Op::Bmm { a, b, trans_b },
            ng,
        )
    }

    /// Gather elements: out[i] = in[map[i]]. The map must be injective for
    /// the backward scatter to be exact (it is for every use here:
    /// window partition/reverse, head split/merge, slicing, 2x2 regrouping).
    pub fn reindex(&mut self, a: NodeId, out_shape: Vec<usize>, map: Arc<Vec<u32>>) -> NodeId {
        assert_eq!(
            out_shape.iter().product::<usize>(),
            map.len(),
            "reindex map length mismatch"
        );
        let av = &self.nodes[a.0].value.data;
        let data: Vec<T> = map.iter().map(|&i| av[i as usize]).collect();
        let ng = self.wants(a);
        self.push(TensorData::new(out_shape, data), Op::Reindex { a, map }, ng)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.nodes[a.0].value.numel(),
            "reshape element count mismatch"
        );
        let value = TensorData {
            shape,
            data: self.nodes[a.0].value.data.clone(),
        };
        let ng = self.wants(a);
        self.push(value, Op::Reshape(a), ng)
    }

    pub fn concat_last(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0].0].value.rows();
        let mut total_c = 0;
        for &p in parts {
            assert_eq!(self.nodes[p.0].value.rows(), rows, "concat row mismatch");
            total_c += self.nodes[p.0].value.last_dim();
        }
        let mut data = vec![T::ZERO; rows * total_c];
        let mut off = 0;
        for &p in parts {
            let c = self.nodes[p.0].value.last_dim();
            let pv = &self.nodes[p.0].value.data;
            for r in 0..rows {
                data[r * total_c + off..r * total_c + off + c]
                    .copy_from_slice(&pv[r * c..(r + 1) * c]);
            }
            off += c;
        }
        let mut shape = self.shape(parts[0]).to_vec();
        *shape.last_mut().unwrap() = total_c;
        let ng = parts.iter().any(|&p| self.wants(p));
        self.push(TensorData::new(shape, data), Op::ConcatLast(parts.to_vec()), ng)
    }

    /// Layer normalization over the last dimension with learned gain/bias.
    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let c = self.nodes[a.0].value.last_dim();
        assert_eq!(self.shape(gain), &[c]);
        assert_eq!(self.shape(bias), &[c]);
        let rows = self.nodes[a.0].value.rows();
        let eps = T::from_f64(1e-5);
        let av = &self.nodes[a.0].value.data;
        let gv = &self.nodes[gain.0].value.data;
        let bv = &self.nodes[bias.0].value.data;
        let mut out = vec![T::ZERO; rows * c];
        let mut means = vec![T::ZERO; rows];
        let mut rstds = vec![T::ZERO; rows];
        let cn = T::from_f64(c as f64);
        for r in 0..rows {
            let row = &av[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row
                .iter()
                .map(|&x| (x - mean) * (x - mean))
                .sum::<T>()
                / cn;
            let rstd = T::ONE / (var + eps).sqrt();
            means[r] = mean;
            rstds[r] = rstd;
            for i in 0..c {
                out[r * c + i] = (row[i] - mean) * rstd * gv[i] + bv[i];
            }
        }
        let ng = self.wants(a) || self.wants(gain) || self.wants(bias);
        self.push(
            TensorData::new(self.shape(a).to_vec(), out),
            Op::LayerNorm {
                a,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
            ng,
        )
    }

    pub fn softmax_last(&mut self, a: NodeId) -> NodeId {
        let c = self.nodes[a.0].value.last_dim();
        let rows = self.nodes[a.0].value.rows();
        let av = &self.nodes[a.0].value.data;
        let mut out = vec![T::ZERO; rows * c];
        for r in 0..rows {
            let row = &av[r * c..(r + 1) * c];
            let mut mx = row[0];
            for &x in row {
                mx = mx.max(x);
            }
            let mut z = T::ZERO;
            for i in 0..c {
                let e = (row[i] - mx).exp();
                out[r * c + i] = e;
                z += e;
            }
            for i in 0..c {
                out[r * c + i] = out[r * c + i] / z;
            }
        }
        let ng = self.wants(a);
        self.push(
            TensorData::new(self.shape(a).to_vec(), out),
            Op::SoftmaxLast(a),
            ng,
        )
    }

    /// Tanh-form GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let half = T::from_f64(0.5);
        let c0 = T::from_f64(GELU_C);
        let a3 = T::from_f64(GELU_A);
        let data: Vec<T> = self.nodes[a.0]
            .value
            .data
            .iter()
            .map(|&x| {
                let inner = c0 * (x + a3 * x * x * x);
                half * x * (T::ONE + inner.tanh())
            })
            .collect();
        let value = TensorData::new(self.shape(a).to_vec(), data);
        let ng = self.wants(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let data: Vec<T> = self.nodes[a.0]
            .value
            .data
            .iter()
            .map(|&x| T::ONE / (T::ONE + (-x).exp()))
            .collect();
        let value = TensorData::new(self.shape(a).to_vec(), data);
        let ng = self.wants(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    /// Multiply every channel of row r by factors[r] (feature masking).
    pub fn scale_rows(&mut self, a: NodeId, factors: Arc<Vec<T>>) -> NodeId {
        let rows = self.nodes[a.0].value.rows();
        let c = self.nodes[a.0].value.last_dim();
        assert_eq!(factors.len(), rows, "row factor count mismatch");
        let av = &self.nodes[a.0].value.data;
        let mut data = vec![T::ZERO; rows * c];
        for r in 0..rows {
            let f = factors[r];
            for i in 0..c {
                data[r * c + i] = av[r * c + i] * f;
            }
        }
        let ng = self.wants(a);
        self.push(
            TensorData::new(self.shape(a).to_vec(), data),
            Op::ScaleRows { a, factors },
            ng,
        )
    }

    /// Add a constant attention mask (B, T, T) to scores (B, H, T, T).
    pub fn add_attn_mask(&mut self, a: NodeId, mask: Arc<Vec<T>>) -> NodeId {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 4, "attention scores must be 4-d");
        let (b, h, t) = (s[0], s[1], s[2]);
        assert_eq!(s[3], t);
        assert_eq!(mask.len(), b * t * t, "attention mask size mismatch");
        let av = &self.nodes[a.0].value.data;
        let mut data = vec![T::ZERO; av.len()];
        for bi in 0..b {
            for hi in 0..h {
                let base = (bi * h + hi) * t * t;
                let mbase = bi * t * t;
                for i in 0..t * t {
                    data[base + i] = av[base + i] + mask[mbase + i];
                }
            }
        }
        let ng = self.wants(a);
        self.push(TensorData::new(s, data), Op::AddAttnMask(a), ng)
    }

    /// Add the learned relative-position bias: scores (B, H, T, T) plus
    /// table[index[i*T+j], h] per head.
    pub fn add_rel_bias(&mut self, a: NodeId, table: NodeId, index: Arc<Vec<u32>>) -> NodeId {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 4);
        let (b, h, t) = (s[0], s[1], s[2]);
        assert_eq!(s[3], t);
        assert_eq!(index.len(), t * t);
        let ts = self.shape(table).to_vec();
        assert_eq!(ts.len(), 2);
        assert_eq!(ts[1], h, "bias table head count mismatch");
        let av = &self.nodes[a.0].value.data;
        let tv = &self.nodes[table.0].value.data;
        let mut data = vec![T::ZERO; av.len()];
        for bi in 0..b {
            for hi in 0..h {
                let base = (bi * h + hi) * t * t;
                for i in 0..t * t {
                    data[base + i] = av[base + i] + tv[index[i] as usize * h + hi];
                }
            }
        }
        let ng = self.wants(a) || self.wants(table);
        self.push(TensorData::new(s, data), Op::AddRelBias { a, table, index }, ng)
    }

    /// Average input rows into bins (adaptive pooling / global pooling).
    pub fn pool_rows(&mut self, a: NodeId, bins: Arc<PoolBins>, out_leading: Vec<usize>) -> NodeId {
        let c = self.nodes[a.0].value.last_dim();
        let out_rows = bins.out_rows();
        assert_eq!(
            out_leading.iter().product::<usize>(),
            out_rows,
            "pool bin count mismatch"
        );
        let av = &self.nodes[a.0].value.data;
        let mut data = vec![T::ZERO; out_rows * c];
        for r in 0..out_rows {
            let lo = bins.offsets[r] as usize;
            let hi = bins.offsets[r + 1] as usize;
            let inv = T::from_f64(1.0 / (hi - lo) as f64);
            for &src in &bins.rows[lo..hi] {
                let src = src as usize;
                for i in 0..c {
                    data[r * c + i] += av[src * c + i];
                }
            }
            for i in 0..c {
                data[r * c + i] = data[r * c + i] * inv;
            }
        }
        let mut shape = out_leading;
        shape.push(c);
        let ng = self.wants(a);
        self.push(TensorData::new(shape, data), Op::PoolRows { a, bins }, ng)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.numel();
        let mean = self.nodes[a.0].value.data.iter().copied().sum::<T>()
            / T::from_f64(n as f64);
        let ng = self.wants(a);
        self.push(TensorData::scalar(mean), Op::MeanAll(a), ng)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let data: Vec<T> = self.nodes[a.0].value.data.iter().map(|&x| x.abs()).collect();
        let value = TensorData::new(self.shape(a).to_vec(), data);
        let ng = self.wants(a);
        self.push(value, Op::Abs(a), ng)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let data: Vec<T> = self.nodes[a.0].value.data.iter().map(|&x| x * x).collect();
        let value = TensorData::new(self.shape(a).to_vec(), data);
        let ng = self.wants(a);
        self.push(value, Op::Square(a), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let neg = self.scale(b, -T::ONE);
        self.add(a, neg)
    }

    /// Reverse pass from a scalar loss node. Returns per-node gradients for
    /// every node on a path from a differentiable leaf to the loss.
    pub fn backward(&self, loss: NodeId) -> Gradients<T> {
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::ONE]);
        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn grad_buf<'a>(
        &self,
        grads: &'a mut Vec<Option<Vec<T>>>,
        id: NodeId,
    ) -> Option<&'a mut Vec<T>> {
        if !self.nodes[id.0].needs_grad {
            return None;
        }
        Some(
            grads[id.0]
                .get_or_insert_with(|| vec![T::ZERO; self.nodes[id.0].value.numel()]),
        )
    }

    fn accumulate(&self, idx: usize, g: &[T], grads: &mut Vec<Option<Vec<T>>>) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    for (d, &gi) in db.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                let c = self.nodes[bias.0].value.numel();
                if let Some(db) = self.grad_buf(grads, *bias) {
                    for (i, &gi) in g.iter().enumerate() {
                        db[i % c] += gi;
                    }
                }
            }
            Op::Scale(a, factor) => {
                let f = *factor;
                if let Some(da) = self.grad_buf(grads, *a) {
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d += gi * f;
                    }
                }
            }
            Op::AddScalar(a, _) => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
            Op::Matmul(a, b) => {
                let k = self.nodes[a.0].value.last_dim();
                let m = self.nodes[b.0].value.shape[1];
                let rows = self.nodes[a.0].value.rows();
                let av = self.nodes[a.0].value.data.clone();
                let bv = self.nodes[b.0].value.data.clone();
                if self.nodes[a.0].needs_grad {
                    let da = self.grad_buf(grads, *a).unwrap();
                    // da += g @ b^T
                    unsafe {
                        T::gemm(
                            rows,
                            m,
                            k,
                            T::ONE,
                            g.as_ptr(),
                            m as isize,
                            1,
                            bv.as_ptr(),
                            1,
                            m as isize,
                            T::ONE,
                            da.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let db = self.grad_buf(grads, *b).unwrap();
                    // db += a^T @ g
                    unsafe {
                        T::gemm(
                            k,
                            rows,
                            m,
                            T::ONE,
                            av.as_ptr(),
                            1,
                            k as isize,
                            g.as_ptr(),
                            m as isize,
                            1,
                            T::ONE,
                            db.as_mut_ptr(),
                            m as isize,
                            1,
                        );
                    }
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let ashape = &self.nodes[a.0].value.shape;
                let bshape = &self.nodes[b.0].value.shape;
                let (batch, n, k) = (ashape[0], ashape[1], ashape[2]);
                let m = if *trans_b { bshape[1] } else { bshape[2] };
                let av = self.nodes[a.0].value.data.clone();
                let bv = self.nodes[b.0].value.data.clone();
                let bstride = bshape[1] * bshape[2];
                if self.nodes[a.0].needs_grad {
                    let da = self.grad_buf(grads, *a).unwrap();
                    for t in 0..batch {
                        // no trans: da += g @ b^T ; trans: da += g @ b
                        let (rsb, csb) = if *trans_b {
                            (k as isize, 1isize)
                        } else {
                            (1isize, m as isize)
                        };
                        unsafe {
                            T::gemm(
                                n,
                                m,
                                k,
                                T::ONE,
                                g.as_ptr().add(t * n * m),
                                m as isize,
                                1,
                                bv.as_ptr().add(t * bstride),
                                rsb,
                                csb,
                                T::ONE,
                                da.as_mut_ptr().add(t * n * k),
                                k as isize,
                                1,
                            );
                        }
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let db = self.grad_buf(grads, *b).unwrap();
                    for t in 0..batch {
                        if *trans_b {
                            // out = a @ b^T, b is (m, k): db += g^T @ a
                            unsafe {
                                T::gemm(
                                    m,
                                    n,
                                    k,
                                    T::ONE,
                                    g.as_ptr().add(t * n * m),
                                    1,
                                    m as isize,
                                    av.as_ptr().add(t * n * k),
                                    k as isize,
                                    1,
                                    T::ONE,
                                    db.as_mut_ptr().add(t * bstride),
                                    k as isize,
                                    1,
                                );
                            }
                        } else {
                            // db += a^T @ g
                            unsafe {
                                T::gemm(
                                    k,
                                    n,
                                    m,
                                    T::ONE,
                                    av.as_ptr().add(t * n * k),
                                    1,
                                    k as isize,
                                    g.as_ptr().add(t * n * m),
                                    m as isize,
                                    1,
                                    T::ONE,
                                    db.as_mut_ptr().add(t * bstride),
                                    m as isize,
                                    1,
                                );
                            }
                        }
                    }
                }
            }
            Op::Reindex { a, map } => {
                if self.nodes[a.0].needs_grad {
                    let da = self.grad_buf(grads, *a).unwrap();
                    for (i, &src) in map.iter().enumerate() {
                        da[src as usize] += g[i];
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
            Op::ConcatLast(parts) => {
                let rows = self.nodes[parts[0].0].value.rows();
                let total_c: usize = parts
                    .iter()
                    .map(|&p| self.nodes[p.0].value.last_dim())
                    .sum();
                let mut off = 0;
                for &p in parts {
                    let c = self.nodes[p.0].value.last_dim();
                    if self.nodes[p.0].needs_grad {
                        let dp = self.grad_buf(grads, p).unwrap();
                        for r in 0..rows {
                            for i in 0..c {
                                dp[r * c + i] += g[r * total_c + off + i];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::LayerNorm {
                a,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let c = self.nodes[a.0].value.last_dim();
                let rows = self.nodes[a.0].value.rows();
                let av = self.nodes[a.0].value.data.clone();
                let gv = self.nodes[gain.0].value.data.clone();
                let cn = T::from_f64(c as f64);
                if self.nodes[bias.0].needs_grad {
                    let db = self.grad_buf(grads, *bias).unwrap();
                    for r in 0..rows {
                        for i in 0..c {
                            db[i] += g[r * c + i];
                        }
                    }
                }
                if self.nodes[gain.0].needs_grad {
                    let dg = self.grad_buf(grads, *gain).unwrap();
                    for r in 0..rows {
                        for i in 0..c {
                            let xhat = (av[r * c + i] - mean[r]) * rstd[r];
                            dg[i] += g[r * c + i] * xhat;
                        }
                    }
                }
                if self.nodes[a.0].needs_grad {
                    let da = self.grad_buf(grads, *a).unwrap();
                    for r in 0..rows {
                        let mut sum_gg = T::ZERO;
                        let mut sum_ggx = T::ZERO;
                        for i in 0..c {
                            let gg = g[r * c + i] * gv[i];
                            let xhat = (av[r * c + i] - mean[r]) * rstd[r];
                            sum_gg += gg;
                            sum_ggx += gg * xhat;
                        }
                        let mg = sum_gg / cn;
                        let mgx = sum_ggx / cn;
                        for i in 0..c {
                            let gg = g[r * c + i] * gv[i];
                            let xhat = (av[r * c + i] - mean[r]) * rstd[r];
                            da[r * c + i] += rstd[r] * (gg - mg - xhat * mgx);
                        }
                    }
                }
            }
            Op::SoftmaxLast(a) => {
                if self.nodes[a.0].needs_grad {
                    let c = self.nodes[idx].value.last_dim();
                    let rows = self.nodes[idx].value.rows();
                    let y = self.nodes[idx].value.data.clone();
                    let da = self.grad_buf(grads, *a).unwrap();
                    for r in 0..rows {
                        let mut dot = T::ZERO;
                        for i in 0..c {
                            dot += g[r * c + i] * y[r * c + i];
                        }
                        for i in 0..c {
                            da[r * c + i] += y[r * c + i] * (g[r * c + i] - dot);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if self.nodes[a.0].needs_grad {
                    let av = self.nodes[a.0].value.data.clone();
                    let half = T::from_f64(0.5);
                    let c0 = T::from_f64(GELU_C);
                    let a3 = T::from_f64(GELU_A);
                    let three = T::from_f64(3.0);
                    let da = self.grad_buf(grads, *a).unwrap();
                    for (i, &x) in av.iter().enumerate() {
                        let u = c0 * (x + a3 * x * x * x);
                        let t = u.tanh();
                        let du = c0 * (T::ONE + three * a3 * x * x);
                        let d = half * (T::ONE + t) + half * x * (T::ONE - t * t) * du;
                        da[i] += g[i] * d;
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.nodes[a.0].needs_grad {
                    let y = self.nodes[idx].value.data.clone();
                    let da = self.grad_buf(grads, *a).unwrap();
                    for i in 0..y.len() {
                        da[i] += g[i] * y[i] * (T::ONE - y[i]);
                    }
                }
            }
            Op::ScaleRows { a, factors } => {
                if self.nodes[a.0].needs_grad {
                    let c = self.nodes[idx].value.last_dim();
                    let da = self.grad_buf(grads, *a).unwrap();
                    for r in 0..factors.len() {
                        let f = factors[r];
                        for i in 0..c {
                            da[r * c + i] += g[r * c + i] * f;
                        }
                    }
                }
            }
            Op::AddAttnMask(a) => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
            Op::AddRelBias { a, table, index } => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                if self.nodes[table.0].needs_grad {
                    let s = &self.nodes[idx].value.shape;
                    let (b, h, t) = (s[0], s[1], s[2]);
                    let dt = self.grad_buf(grads, *table).unwrap();
                    for bi in 0..b {
                        for hi in 0..h {
                            let base = (bi * h + hi) * t * t;
                            for i in 0..t * t {
                                dt[index[i] as usize * h + hi] += g[base + i];
                            }
                        }
                    }
                }
            }
            Op::PoolRows { a, bins } => {
                if self.nodes[a.0].needs_grad {
                    let c = self.nodes[idx].value.last_dim();
                    let da = self.grad_buf(grads, *a).unwrap();
                    for r in 0..bins.out_rows() {
                        let lo = bins.offsets[r] as usize;
                        let hi = bins.offsets[r + 1] as usize;
                        let inv = T::from_f64(1.0 / (hi - lo) as f64);
                        for &src in &bins.rows[lo..hi] {
                            let src = src as usize;
                            for i in 0..c {
                                da[src * c + i] += g[r * c + i] * inv;
                            }
                        }
                    }
                }
            }
            Op::MeanAll(a) => {
                if self.nodes[a.0].needs_grad {
                    let n = self.nodes[a.0].value.numel();
                    let gi = g[0] * T::from_f64(1.0 / n as f64);
                    let da = self.grad_buf(grads, *a).unwrap();
                    for d in da.iter_mut() {
                        *d += gi;
                    }
                }
            }
            Op::Abs(a) => {
                if self.nodes[a.0].needs_grad {
                    let av = self.nodes[a.0].value.data.clone();
                    let da = self.grad_buf(grads, *a).unwrap();
                    for (i, &x) in av.iter().enumerate() {
                        let s = if x > T::ZERO {
                            T::ONE
                        } else if x < T::ZERO {
                            -T::ONE
                        } else {
                            T::ZERO
                        };
                        da[i] += g[i] * s;
                    }
                }
            }
            Op::Square(a) => {
                if self.nodes[a.0].needs_grad {
                    let av = self.nodes[a.0].value.data.clone();
                    let two = T::from_f64(2.0);
                    let da = self.grad_buf(grads, *a).unwrap();
                    for (i, &x) in av.iter().enumerate() {
                        da[i] += g[i] * two * x;
                    }
                }
            }
        }
    }

    /// Parameter leaves registered on this graph, as (external id, node).
    pub fn registered_params(&self) -> &[(usize, NodeId)] {
        &self.params
    }
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, id: NodeId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }
}
