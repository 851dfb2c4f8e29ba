//! Differentiable operations recorded on a [`Graph`].

use std::rc::Rc;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Scalar, Tensor};

/// Layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

fn same_shape(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = kernels::matmul(&av, &bv)?;
        self.record("matmul", out, &[a, b], move |g, need| {
            vec![
                need[0].then(|| kernels::matmul_nt(g, &bv).unwrap()),
                need[1].then(|| kernels::matmul_tn(&av, g).unwrap()),
            ]
        })
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", &av, &bv)?;
        let out = av.zip_map(&bv, |x, y| x + y);
        self.record("add", out, &[a, b], |g, need| {
            vec![need[0].then(|| g.clone()), need[1].then(|| g.clone())]
        })
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("sub", &av, &bv)?;
        let out = av.zip_map(&bv, |x, y| x - y);
        self.record("sub", out, &[a, b], |g, need| {
            vec![need[0].then(|| g.clone()), need[1].then(|| g.map(|v| -v))]
        })
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mul", &av, &bv)?;
        let out = av.zip_map(&bv, |x, y| x * y);
        self.record("mul", out, &[a, b], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&bv, |d, y| d * y)),
                need[1].then(|| g.zip_map(&av, |d, x| d * x)),
            ]
        })
    }

    pub fn scale(&self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.record("scale", out, &[a], move |g, _| vec![Some(g.map(|d| d * s))])
    }

    /// Adds `b` (shape `[r, C]` or `[C]`) to every block of `r` rows of
    /// `a` (`[R, C]`, `R % r == 0`). Covers bias addition (`r = 1`) and
    /// per-token positional embeddings tiled over a batch.
    pub fn add_broadcast_rows(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (rows, cols) = av.dims2("add_broadcast_rows")?;
        let brows = match bv.shape() {
            [c] if *c == cols => 1,
            [r, c] if *c == cols && *r > 0 && rows % *r == 0 => *r,
            _ => {
                return Err(Error::Shape {
                    op: "add_broadcast_rows",
                    lhs: av.shape().to_vec(),
                    rhs: bv.shape().to_vec(),
                })
            }
        };
        let block = brows * cols;
        let mut out = (*av).clone();
        for chunk in out.data_mut().chunks_exact_mut(block) {
            for (o, &x) in chunk.iter_mut().zip(bv.data()) {
                *o += x;
            }
        }
        let bshape = bv.shape().to_vec();
        self.record("add_broadcast_rows", out, &[a, b], move |g, need| {
            let gb = need[1].then(|| {
                let mut acc = vec![T::zero(); block];
                for chunk in g.data().chunks_exact(block) {
                    for (a, &x) in acc.iter_mut().zip(chunk) {
                        *a += x;
                    }
                }
                Tensor::new(bshape.clone(), acc).unwrap()
            });
            vec![need[0].then(|| g.clone()), gb]
        })
    }

    pub fn gelu(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let out = av.map(kernels::gelu);
        self.record("gelu", out, &[a], move |g, _| {
            vec![Some(g.zip_map(&av, |d, x| d * kernels::gelu_grad(x)))]
        })
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        let out = self.value(a).map(kernels::sigmoid);
        let y = Rc::new(out.clone());
        self.record("sigmoid", out, &[a], move |g, _| {
            vec![Some(g.zip_map(&y, |d, s| d * s * (T::one() - s)))]
        })
    }

    /// Normalizes each row of `x` (`[R, C]`) to zero mean and unit
    /// variance, then applies `gain` and `bias` (both `[C]`).
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let (rows, cols) = xv.dims2("layer_norm")?;
        if gv.shape() != [cols] || bv.shape() != [cols] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let eps = T::from_f64_lossy(LN_EPS);
        let n = T::from_usize(cols).unwrap();
        let mut xhat = vec![T::zero(); rows * cols];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &xv.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let out = Tensor::new([rows, cols], out)?;
        self.record("layer_norm", out, &[x, gain, bias], move |g, need| {
            let gd = g.data();
            let mut dx = need[0].then(|| vec![T::zero(); rows * cols]);
            let mut dgain = vec![T::zero(); cols];
            let mut dbias = vec![T::zero(); cols];
            let mut dxhat = vec![T::zero(); cols];
            for r in 0..rows {
                let grow = &gd[r * cols..(r + 1) * cols];
                let hrow = &xhat[r * cols..(r + 1) * cols];
                for c in 0..cols {
                    dgain[c] += grow[c] * hrow[c];
                    dbias[c] += grow[c];
                    dxhat[c] = grow[c] * gv.data()[c];
                }
                if let Some(dx) = dx.as_mut() {
                    let mean_d = dxhat.iter().copied().sum::<T>() / n;
                    let mean_dh = dxhat.iter().zip(hrow).map(|(&d, &h)| d * h).sum::<T>() / n;
                    for c in 0..cols {
                        dx[r * cols + c] = inv_std[r] * (dxhat[c] - mean_d - hrow[c] * mean_dh);
                    }
                }
            }
            vec![
                dx.map(|d| Tensor::new([rows, cols], d).unwrap()),
                need[1].then(|| Tensor::new([cols], dgain.clone()).unwrap()),
                need[2].then(|| Tensor::new([cols], dbias).unwrap()),
            ]
        })
    }

    pub fn sum_all(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        self.record("sum_all", Tensor::scalar(av.sum()), &[a], move |g, _| {
            vec![Some(Tensor::full(shape.clone(), g.data()[0]))]
        })
    }

    pub fn mean_all(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let n = T::from_usize(av.len()).unwrap();
        let shape = av.shape().to_vec();
        self.record("mean_all", Tensor::scalar(av.sum() / n), &[a], move |g, _| {
            vec![Some(Tensor::full(shape.clone(), g.data()[0] / n))]
        })
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose2()?;
        self.record("transpose", out, &[a], |g, _| vec![Some(g.transpose2().unwrap())])
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let old = av.shape().to_vec();
        let out = (*av).clone().reshaped(shape)?;
        self.record("reshape", out, &[a], move |g, _| {
            vec![Some(g.clone().reshaped(old.clone()).unwrap())]
        })
    }

    /// Stacks 2-D tensors with equal column counts vertically.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let Some(first) = values.first() else {
            return Err(Error::Contract("concat_rows of zero tensors".into()));
        };
        let (_, cols) = first.dims2("concat_rows")?;
        let mut row_counts = Vec::with_capacity(values.len());
        let mut data = Vec::new();
        for v in &values {
            let (r, c) = v.dims2("concat_rows")?;
            if c != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: first.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            row_counts.push(r);
            data.extend_from_slice(v.data());
        }
        let total = row_counts.iter().sum::<usize>();
        let out = Tensor::new([total, cols], data)?;
        self.record("concat_rows", out, parts, move |g, need| {
            let mut start = 0;
            row_counts
                .iter()
                .zip(need)
                .map(|(&r, &n)| {
                    let s = start;
                    start += r;
                    n.then(|| {
                        Tensor::new([r, cols], g.data()[s * cols..(s + r) * cols].to_vec()).unwrap()
                    })
                })
                .collect()
        })
    }

    /// Joins 2-D tensors with equal row counts side by side.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let Some(first) = values.first() else {
            return Err(Error::Contract("concat_cols of zero tensors".into()));
        };
        let (rows, _) = first.dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(values.len());
        for v in &values {
            let (r, c) = v.dims2("concat_cols")?;
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: first.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new([rows, total], data)?;
        self.record("concat_cols", out, parts, move |g, need| {
            let mut offset = 0;
            widths
                .iter()
                .zip(need)
                .map(|(&w, &n)| {
                    let o = offset;
                    offset += w;
                    n.then(|| {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + o..r * total + o + w]);
                        }
                        Tensor::new([rows, w], d).unwrap()
                    })
                })
                .collect()
        })
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let rows = self.value(a).dims2("slice_rows")?.0;
        if start > end || end > rows {
            return Err(Error::Contract(format!(
                "slice_rows {start}..{end} out of range for {rows} rows"
            )));
        }
        self.gather_rows(a, &(start..end).collect::<Vec<_>>())
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let (rows, cols) = av.dims2("slice_cols")?;
        if start > end || end > cols {
            return Err(Error::Contract(format!(
                "slice_cols {start}..{end} out of range for {cols} columns"
            )));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&av.data()[r * cols + start..r * cols + end]);
        }
        let out = Tensor::new([rows, w], data)?;
        self.record("slice_cols", out, &[a], move |g, _| {
            let mut d = vec![T::zero(); rows * cols];
            for r in 0..rows {
                d[r * cols + start..r * cols + end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
            }
            vec![Some(Tensor::new([rows, cols], d).unwrap())]
        })
    }

    /// Selects rows by index; backward scatter-adds.
    pub fn gather_rows(&self, a: Var, indices: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let (rows, cols) = av.dims2("gather_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!("row index {bad} out of range for {rows} rows")));
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&av.data()[i * cols..(i + 1) * cols]);
        }
        let out = Tensor::new([indices.len(), cols], data)?;
        let indices = indices.to_vec();
        self.record("gather_rows", out, &[a], move |g, _| {
            let mut d = vec![T::zero(); rows * cols];
            for (k, &i) in indices.iter().enumerate() {
                for c in 0..cols {
                    d[i * cols + c] += g.data()[k * cols + c];
                }
            }
            vec![Some(Tensor::new([rows, cols], d).unwrap())]
        })
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let out = kernels::softmax_rows(&self.value(a))?;
        let y = Rc::new(out.clone());
        self.record("softmax_rows", out, &[a], move |g, _| {
            vec![Some(softmax_backward(&y, g))]
        })
    }

    /// Multi-head scaled dot-product attention over a batch of sequences.
    ///
    /// `q`, `k`, `v` are `[B·n_tok, D]` with the sequences stacked
    /// vertically; head `h` owns columns `h·D/heads..(h+1)·D/heads`.
    /// Per sequence and head: `softmax(Q·Kᵀ/√d_head)·V`.
    pub fn attention(&self, q: Var, k: Var, v: Var, n_tok: usize, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        same_shape("attention", &qv, &kv)?;
        same_shape("attention", &qv, &vv)?;
        let (rows, dim) = qv.dims2("attention")?;
        if n_tok == 0 || rows % n_tok != 0 || heads == 0 || dim % heads != 0 {
            return Err(Error::Contract(format!(
                "attention: {rows} rows / {n_tok} tokens, {dim} dims / {heads} heads"
            )));
        }
        let batch = rows / n_tok;
        let dh = dim / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

        let head_block = move |t: &Tensor<T>, b: usize, h: usize| -> Tensor<T> {
            let mut d = Vec::with_capacity(n_tok * dh);
            for i in 0..n_tok {
                let r = b * n_tok + i;
                d.extend_from_slice(&t.data()[r * dim + h * dh..r * dim + (h + 1) * dh]);
            }
            Tensor::new([n_tok, dh], d).unwrap()
        };
        let write_block = move |dst: &mut [T], src: &Tensor<T>, b: usize, h: usize| {
            for i in 0..n_tok {
                let r = b * n_tok + i;
                dst[r * dim + h * dh..r * dim + (h + 1) * dh]
                    .copy_from_slice(&src.data()[i * dh..(i + 1) * dh]);
            }
        };

        let mut out = vec![T::zero(); rows * dim];
        let mut probs = Vec::with_capacity(batch * heads);
        for b in 0..batch {
            for h in 0..heads {
                let (qb, kb, vb) = (head_block(&qv, b, h), head_block(&kv, b, h), head_block(&vv, b, h));
                let scores = kernels::matmul_nt(&qb, &kb)?.map(|s| s * scale);
                let p = kernels::softmax_rows(&scores)?;
                let o = kernels::matmul(&p, &vb)?;
                write_block(&mut out, &o, b, h);
                probs.push(p);
            }
        }
        let out = Tensor::new([rows, dim], out)?;
        self.record("attention", out, &[q, k, v], move |g, need| {
            let mut dq = vec![T::zero(); rows * dim];
            let mut dk = vec![T::zero(); rows * dim];
            let mut dv = vec![T::zero(); rows * dim];
            for b in 0..batch {
                for h in 0..heads {
                    let p = &probs[b * heads + h];
                    let go = head_block(g, b, h);
                    if need[2] {
                        write_block(&mut dv, &kernels::matmul_tn(p, &go).unwrap(), b, h);
                    }
                    if need[0] || need[1] {
                        let vb = head_block(&vv, b, h);
                        let dp = kernels::matmul_nt(&go, &vb).unwrap();
                        let ds = softmax_backward(p, &dp).map(|x| x * scale);
                        if need[0] {
                            let kb = head_block(&kv, b, h);
                            write_block(&mut dq, &kernels::matmul(&ds, &kb).unwrap(), b, h);
                        }
                        if need[1] {
                            let qb = head_block(&qv, b, h);
                            write_block(&mut dk, &kernels::matmul_tn(&ds, &qb).unwrap(), b, h);
                        }
                    }
                }
            }
            [dq, dk, dv]
                .into_iter()
                .zip(need)
                .map(|(d, &n)| n.then(|| Tensor::new([rows, dim], d).unwrap()))
                .collect()
        })
    }
}

/// `dX = Y ⊙ (dY − rowsum(dY ⊙ Y))` for a row-softmax output `Y`.
fn softmax_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let cols = y.shape()[1];
    let mut out = vec![T::zero(); y.len()];
    if cols == 0 {
        return Tensor::new(y.shape(), out).unwrap();
    }
    for ((yr, gr), or) in y
        .data()
        .chunks_exact(cols)
        .zip(g.data().chunks_exact(cols))
        .zip(out.chunks_exact_mut(cols))
    {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &gv) in or.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    Tensor::new(y.shape(), out).unwrap()
}
