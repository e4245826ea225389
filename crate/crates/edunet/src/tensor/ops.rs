//! Elementwise ops, activations, reductions, reshaping and concatenation.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Supported pointwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ActKind {
    Relu,
    /// tanh approximation, cubic coefficient 0.044715.
    Gelu,
    Swish,
    Sigmoid,
}

impl std::str::FromStr for ActKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(ActKind::Relu),
            "gelu" => Ok(ActKind::Gelu),
            "swish" => Ok(ActKind::Swish),
            "sigmoid" => Ok(ActKind::Sigmoid),
            other => Err(Error::Invalid(format!("unknown activation kind `{other}`"))),
        }
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other, "add")?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| *a + *b)
            .collect();
        Tensor::from_op(
            data,
            self.shape(),
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![g.to_vec(), g.to_vec()]),
            "add",
        )
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other, "sub")?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| *a - *b)
            .collect();
        Tensor::from_op(
            data,
            self.shape(),
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![g.to_vec(), g.iter().map(|v| -*v).collect()]),
            "sub",
        )
    }

    /// Compensated subtraction: adjusts the rounded difference so that
    /// `other + result == self` holds exactly in `T` arithmetic. The backward
    /// rule is the plain subtraction rule (the correction is sub-ulp).
    pub fn sub_exact(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other, "sub_exact")?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| {
                let mut d = a - b;
                for _ in 0..4 {
                    let r = (b + d) - a;
                    if r == T::zero() {
                        break;
                    }
                    d = d - r;
                }
                d
            })
            .collect();
        Tensor::from_op(
            data,
            self.shape(),
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![g.to_vec(), g.iter().map(|v| -*v).collect()]),
            "sub_exact",
        )
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other, "mul")?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| *a * *b)
            .collect();
        let (a, b) = (self.data().to_vec(), other.data().to_vec());
        Tensor::from_op(
            data,
            self.shape(),
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                vec![
                    g.iter().zip(&b).map(|(g, b)| *g * *b).collect(),
                    g.iter().zip(&a).map(|(g, a)| *g * *a).collect(),
                ]
            }),
            "mul",
        )
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other, "div")?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| *a / *b)
            .collect();
        let (a, b) = (self.data().to_vec(), other.data().to_vec());
        Tensor::from_op(
            data,
            self.shape(),
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let da: Vec<T> = g.iter().zip(&b).map(|(g, b)| *g / *b).collect();
                let db: Vec<T> = g
                    .iter()
                    .zip(a.iter().zip(&b))
                    .map(|(g, (a, b))| -*g * *a / (*b * *b))
                    .collect();
                vec![da, db]
            }),
            "div",
        )
    }

    /// y = a*x + b, elementwise with scalar coefficients.
    pub fn affine(&self, a: f64, b: f64) -> Result<Tensor<T>> {
        let (a, b) = (T::from_f64(a), T::from_f64(b));
        let data: Vec<T> = self.data().iter().map(|x| a * *x + b).collect();
        Tensor::from_op(
            data,
            self.shape(),
            vec![self.clone()],
            Box::new(move |g| vec![g.iter().map(|g| *g * a).collect()]),
            "affine",
        )
    }

    /// Broadcasting multiply. Ranks must match; each extent must be equal or
    /// 1 on one side (gradients sum over the broadcast extents).
    pub fn mul_bc(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        if sa.len() != sb.len() {
            return Err(Error::Shape(format!("mul_bc rank mismatch: {sa:?} vs {sb:?}")));
        }
        let mut out_shape = Vec::with_capacity(sa.len());
        for (&a, &b) in sa.iter().zip(&sb) {
            if a == b || a == 1 || b == 1 {
                out_shape.push(a.max(b));
            } else {
                return Err(Error::Shape(format!("mul_bc: {sa:?} vs {sb:?}")));
            }
        }
        let strides = |s: &[usize]| -> Vec<usize> {
            let mut st = vec![0usize; s.len()];
            let mut acc = 1;
            for i in (0..s.len()).rev() {
                st[i] = if s[i] == 1 { 0 } else { acc };
                acc *= s[i];
            }
            st
        };
        let (sta, stb) = (strides(&sa), strides(&sb));
        let numel: usize = out_shape.iter().product();
        let rank = out_shape.len();
        let index_pair = {
            let out_shape = out_shape.clone();
            move |lin: usize| -> (usize, usize) {
                let mut rem = lin;
                let (mut ia, mut ib) = (0usize, 0usize);
                for d in (0..rank).rev() {
                    let idx = rem % out_shape[d];
                    rem /= out_shape[d];
                    ia += idx * sta[d];
                    ib += idx * stb[d];
                }
                (ia, ib)
            }
        };
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let (ia, ib) = index_pair(i);
            data.push(self.data()[ia] * other.data()[ib]);
        }
        let (a, b) = (self.data().to_vec(), other.data().to_vec());
        let (na, nb) = (a.len(), b.len());
        Tensor::from_op(
            data,
            &out_shape,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let mut da = vec![T::zero(); na];
                let mut db = vec![T::zero(); nb];
                for (i, gi) in g.iter().enumerate() {
                    let (ia, ib) = index_pair(i);
                    da[ia] += *gi * b[ib];
                    db[ib] += *gi * a[ia];
                }
                vec![da, db]
            }),
            "mul_bc",
        )
    }

    pub fn activation(&self, kind: ActKind) -> Result<Tensor<T>> {
        let x = self.data().to_vec();
        let data: Vec<T> = x.iter().map(|&v| act_fwd(kind, v)).collect();
        Tensor::from_op(
            data,
            self.shape(),
            vec![self.clone()],
            Box::new(move |g| {
                vec![g
                    .iter()
                    .zip(&x)
                    .map(|(g, &v)| *g * act_grad(kind, v))
                    .collect()]
            }),
            "activation",
        )
    }

    /// Softmax over the channel axis of an [N,C,H,W] tensor.
    pub fn softmax_channels(&self) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4()?;
        let hw = h * w;
        let x = self.data();
        let mut p = vec![T::zero(); x.len()];
        for ni in 0..n {
            for s in 0..hw {
                let at = |ci: usize| ni * c * hw + ci * hw + s;
                let mut m = x[at(0)];
                for ci in 1..c {
                    m = m.max(x[at(ci)]);
                }
                let mut z = T::zero();
                for ci in 0..c {
                    let e = (x[at(ci)] - m).exp();
                    p[at(ci)] = e;
                    z += e;
                }
                for ci in 0..c {
                    p[at(ci)] = p[at(ci)] / z;
                }
            }
        }
        let pc = p.clone();
        let shape = self.shape().to_vec();
        Tensor::from_op(
            p,
            &shape.clone(),
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![T::zero(); g.len()];
                for ni in 0..n {
                    for s in 0..hw {
                        let at = |ci: usize| ni * c * hw + ci * hw + s;
                        let mut dot = T::zero();
                        for ci in 0..c {
                            dot += g[at(ci)] * pc[at(ci)];
                        }
                        for ci in 0..c {
                            dx[at(ci)] = pc[at(ci)] * (g[at(ci)] - dot);
                        }
                    }
                }
                vec![dx]
            }),
            "softmax",
        )
    }

    pub fn sum_all(&self) -> Result<Tensor<T>> {
        let mut acc = 0.0f64;
        for v in self.data() {
            acc += v.as_f64();
        }
        let n = self.numel();
        Tensor::from_op(
            vec![T::from_f64(acc)],
            &[1],
            vec![self.clone()],
            Box::new(move |g| vec![vec![g[0]; n]]),
            "sum_all",
        )
    }

    pub fn mean_all(&self) -> Result<Tensor<T>> {
        let n = self.numel() as f64;
        self.sum_all()?.affine(1.0 / n, 0.0)
    }

    /// Reduce an [N,C,H,W] tensor over N,H,W, yielding a [C] vector.
    pub fn sum_per_channel(&self) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4()?;
        let hw = h * w;
        let mut out = vec![0.0f64; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = ni * c * hw + ci * hw;
                for s in 0..hw {
                    out[ci] += self.data()[base + s].as_f64();
                }
            }
        }
        let data: Vec<T> = out.into_iter().map(T::from_f64).collect();
        Tensor::from_op(
            data,
            &[c],
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![T::zero(); n * c * hw];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = ni * c * hw + ci * hw;
                        for s in 0..hw {
                            dx[base + s] = g[ci];
                        }
                    }
                }
                vec![dx]
            }),
            "sum_per_channel",
        )
    }

    /// Mean over the channel axis, [N,C,H,W] -> [N,1,H,W].
    pub fn mean_channels(&self) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4()?;
        let hw = h * w;
        let inv = T::from_f64(1.0 / c as f64);
        let mut out = vec![T::zero(); n * hw];
        for ni in 0..n {
            for ci in 0..c {
                for s in 0..hw {
                    out[ni * hw + s] += self.data()[ni * c * hw + ci * hw + s];
                }
            }
        }
        for v in out.iter_mut() {
            *v = *v * inv;
        }
        Tensor::from_op(
            out,
            &[n, 1, h, w],
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![T::zero(); n * c * hw];
                for ni in 0..n {
                    for ci in 0..c {
                        for s in 0..hw {
                            dx[ni * c * hw + ci * hw + s] = g[ni * hw + s] * inv;
                        }
                    }
                }
                vec![dx]
            }),
            "mean_channels",
        )
    }

    /// Max over the channel axis, [N,C,H,W] -> [N,1,H,W]. Gradient routes to
    /// the first maximal channel.
    pub fn max_channels(&self) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4()?;
        let hw = h * w;
        let mut out = vec![T::zero(); n * hw];
        let mut arg = vec![0usize; n * hw];
        for ni in 0..n {
            for s in 0..hw {
                let mut best = self.data()[ni * c * hw + s];
                let mut bi = 0usize;
                for ci in 1..c {
                    let v = self.data()[ni * c * hw + ci * hw + s];
                    if v > best {
                        best = v;
                        bi = ci;
                    }
                }
                out[ni * hw + s] = best;
                arg[ni * hw + s] = bi;
            }
        }
        Tensor::from_op(
            out,
            &[n, 1, h, w],
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![T::zero(); n * c * hw];
                for ni in 0..n {
                    for s in 0..hw {
                        let ci = arg[ni * hw + s];
                        dx[ni * c * hw + ci * hw + s] = g[ni * hw + s];
                    }
                }
                vec![dx]
            }),
            "max_channels",
        )
    }

    /// Channel slice [start, end) of an [N,C,H,W] tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4()?;
        if start >= end || end > c {
            return Err(Error::Invalid(format!(
                "slice_channels [{start},{end}) out of range for C={c}"
            )));
        }
        let hw = h * w;
        let cs = end - start;
        let mut out = Vec::with_capacity(n * cs * hw);
        for ni in 0..n {
            for ci in start..end {
                let base = ni * c * hw + ci * hw;
                out.extend_from_slice(&self.data()[base..base + hw]);
            }
        }
        Tensor::from_op(
            out,
            &[n, cs, h, w],
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![T::zero(); n * c * hw];
                for ni in 0..n {
                    for (j, ci) in (start..end).enumerate() {
                        let src = ni * cs * hw + j * hw;
                        let dst = ni * c * hw + ci * hw;
                        dx[dst..dst + hw].copy_from_slice(&g[src..src + hw]);
                    }
                }
                vec![dx]
            }),
            "slice_channels",
        )
    }

    /// Same data, different shape (element counts must agree).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?}",
                self.shape(),
                shape
            )));
        }
        Tensor::from_op(
            self.data().to_vec(),
            shape,
            vec![self.clone()],
            Box::new(|g| vec![g.to_vec()]),
            "reshape",
        )
    }

    /// Fully connected layer: x [N,Cin] @ w [Cout,Cin]^T + b [Cout].
    pub fn linear(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let (n, cin) = match self.shape() {
            [n, c] => (*n, *c),
            s => return Err(Error::Shape(format!("linear input must be 2-d, got {s:?}"))),
        };
        let (cout, wcin) = match weight.shape() {
            [o, i] => (*o, *i),
            s => return Err(Error::Shape(format!("linear weight must be 2-d, got {s:?}"))),
        };
        if wcin != cin {
            return Err(Error::Shape(format!(
                "linear: input Cin {cin} vs weight Cin {wcin}"
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::Shape(format!(
                    "linear bias shape {:?}, expected [{cout}]",
                    b.shape()
                )));
            }
        }
        let mut out = vec![T::zero(); n * cout];
        for ni in 0..n {
            for oi in 0..cout {
                let mut acc = 0.0f64;
                for ii in 0..cin {
                    acc += self.data()[ni * cin + ii].as_f64()
                        * weight.data()[oi * cin + ii].as_f64();
                }
                if let Some(b) = bias {
                    acc += b.data()[oi].as_f64();
                }
                out[ni * cout + oi] = T::from_f64(acc);
            }
        }
        let x = self.data().to_vec();
        let w = weight.data().to_vec();
        let has_bias = bias.is_some();
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Tensor::from_op(
            out,
            &[n, cout],
            parents,
            Box::new(move |g| {
                let mut dx = vec![T::zero(); n * cin];
                let mut dw = vec![T::zero(); cout * cin];
                for ni in 0..n {
                    for oi in 0..cout {
                        let gv = g[ni * cout + oi];
                        for ii in 0..cin {
                            dx[ni * cin + ii] += gv * w[oi * cin + ii];
                            dw[oi * cin + ii] += gv * x[ni * cin + ii];
                        }
                    }
                }
                let mut grads = vec![dx, dw];
                if has_bias {
                    let mut db = vec![T::zero(); cout];
                    for ni in 0..n {
                        for oi in 0..cout {
                            db[oi] += g[ni * cout + oi];
                        }
                    }
                    grads.push(db);
                }
                grads
            }),
            "linear",
        )
    }
}

/// Concatenate along the channel axis of [N,C,H,W] tensors.
pub fn concat_channels<T: Scalar>(xs: &[Tensor<T>]) -> Result<Tensor<T>> {
    if xs.is_empty() {
        return Err(Error::Invalid("concat of empty list".into()));
    }
    let (n, _, h, w) = xs[0].dims4()?;
    let mut channels = Vec::with_capacity(xs.len());
    for x in xs {
        let (xn, xc, xh, xw) = x.dims4()?;
        if (xn, xh, xw) != (n, h, w) {
            return Err(Error::Shape(format!(
                "concat: incompatible shapes {:?} vs {:?}",
                xs[0].shape(),
                x.shape()
            )));
        }
        channels.push(xc);
    }
    let ctot: usize = channels.iter().sum();
    let hw = h * w;
    let mut out = Vec::with_capacity(n * ctot * hw);
    for ni in 0..n {
        for (x, &c) in xs.iter().zip(&channels) {
            let base = ni * c * hw;
            out.extend_from_slice(&x.data()[base..base + c * hw]);
        }
    }
    let ch = channels.clone();
    Tensor::from_op(
        out,
        &[n, ctot, h, w],
        xs.to_vec(),
        Box::new(move |g| {
            let mut grads: Vec<Vec<T>> = ch.iter().map(|c| vec![T::zero(); n * c * hw]).collect();
            for ni in 0..n {
                let mut coff = 0usize;
                for (k, &c) in ch.iter().enumerate() {
                    let src = ni * ctot * hw + coff * hw;
                    let dst = ni * c * hw;
                    grads[k][dst..dst + c * hw].copy_from_slice(&g[src..src + c * hw]);
                    coff += c;
                }
            }
            grads
        }),
        "concat",
    )
}

fn act_fwd<T: Scalar>(kind: ActKind, x: T) -> T {
    match kind {
        ActKind::Relu => x.max(T::zero()),
        ActKind::Sigmoid => sigmoid(x),
        ActKind::Swish => x * sigmoid(x),
        ActKind::Gelu => {
            let c = T::from_f64(GELU_C);
            let a = T::from_f64(GELU_A);
            let half = T::from_f64(0.5);
            let u = c * (x + a * x * x * x);
            half * x * (T::one() + u.tanh())
        }
    }
}

fn act_grad<T: Scalar>(kind: ActKind, x: T) -> T {
    match kind {
        ActKind::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        ActKind::Sigmoid => {
            let s = sigmoid(x);
            s * (T::one() - s)
        }
        ActKind::Swish => {
            let s = sigmoid(x);
            s * (T::one() + x * (T::one() - s))
        }
        ActKind::Gelu => {
            let c = T::from_f64(GELU_C);
            let a = T::from_f64(GELU_A);
            let half = T::from_f64(0.5);
            let three = T::from_f64(3.0);
            let u = c * (x + a * x * x * x);
            let t = u.tanh();
            let du = c * (T::one() + three * a * x * x);
            half * (T::one() + t) + half * x * (T::one() - t * t) * du
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(data: Vec<f64>, shape: &[usize]) -> Tensor<f64> {
        Tensor::leaf(data, shape, false).unwrap()
    }

    #[test]
    fn relu_and_sigmoid_points() {
        let x = t4(vec![-1.0, 2.0, 0.0], &[3]);
        let r = x.activation(ActKind::Relu).unwrap();
        assert_eq!(r.data(), &[0.0, 2.0, 0.0]);
        let s = x.activation(ActKind::Sigmoid).unwrap();
        assert!((s.data()[2] - 0.5).abs() < 1e-12);
        let sw = x.activation(ActKind::Swish).unwrap();
        assert_eq!(sw.data()[2], 0.0);
    }

    #[test]
    fn gelu_odd_part_identity() {
        // the even part of x*Phi(x) is x/2: gelu(x) - gelu(-x) == x,
        // preserved exactly by the tanh approximation
        for i in -40..=40 {
            let x = i as f64 * 0.25;
            let xt = t4(vec![x, -x], &[2]);
            let g = xt.activation(ActKind::Gelu).unwrap();
            assert!((g.data()[0] - g.data()[1] - x).abs() < 1e-12, "x={x}");
        }
    }

    #[test]
    fn softmax_basics() {
        let x = t4(vec![1.0, 1.0, 1.0], &[1, 3, 1, 1]);
        let p = x.softmax_channels().unwrap();
        for v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        // logits (0, ln 3) -> (0.25, 0.75)
        let x = t4(vec![0.0, 3.0f64.ln()], &[1, 2, 1, 1]);
        let p = x.softmax_channels().unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-12);
        assert!((p.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = t4(vec![0.3, -1.2, 2.0, 0.5], &[1, 4, 1, 1]);
        let y = x.affine(1.0, 17.5).unwrap();
        let (p, q) = (x.softmax_channels().unwrap(), y.softmax_channels().unwrap());
        for (a, b) in p.data().iter().zip(q.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn linear_identity_zero_and_matmul() {
        let x = t4(vec![1.0, 2.0], &[1, 2]);
        let eye = t4(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let y = x.linear(&eye, None).unwrap();
        assert_eq!(y.data(), x.data());

        let zero = t4(vec![0.0; 4], &[2, 2]);
        let b = t4(vec![5.0, -3.0], &[2]);
        let y = x.linear(&zero, Some(&b)).unwrap();
        assert_eq!(y.data(), b.data());

        // hand matmul: [1,2] @ [[1,2],[3,4]]^T = [1*1+2*2, 1*3+2*4] = [5, 11]
        let w = t4(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let y = x.linear(&w, None).unwrap();
        assert_eq!(y.data(), &[5.0, 11.0]);
    }

    #[test]
    fn concat_roundtrip() {
        let a = t4(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        let b = t4(vec![5.0, 6.0, 7.0, 8.0], &[1, 1, 2, 2]);
        let single = concat_channels(&[a.clone()]).unwrap();
        assert_eq!(single.data(), a.data());
        let c = concat_channels(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.shape(), &[1, 2, 2, 2]);
        assert_eq!(c.slice_channels(0, 1).unwrap().data(), a.data());
        assert_eq!(c.slice_channels(1, 2).unwrap().data(), b.data());
    }

    #[test]
    fn mul_bc_channel_gate() {
        let x = t4(vec![1.0, 2.0, 3.0, 4.0], &[1, 2, 1, 2]);
        let gate = t4(vec![2.0, 10.0], &[1, 2, 1, 1]);
        let y = x.mul_bc(&gate).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 30.0, 40.0]);
    }

    #[test]
    fn sub_exact_reconstructs() {
        let a = t4(vec![0.1, 0.75, 1.0, 0.3], &[4]);
        let b = t4(vec![0.3, 0.1, 0.9, 0.1], &[4]);
        let d = a.sub_exact(&b).unwrap();
        for i in 0..4 {
            assert_eq!(b.data()[i] + d.data()[i], a.data()[i]);
        }
    }
}
