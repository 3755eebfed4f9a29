//! Differentiable operations on [`Tensor`].

use std::rc::Rc;

use crate::error::{Result, TapaError};

use super::Tensor;

fn dim_err(msg: String) -> TapaError {
    TapaError::Dimension(msg)
}

/// Elementwise sum of two tensors of identical shape.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(dim_err(format!("add: {:?} vs {:?}", sa, sb)));
    }
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_op(
        sa,
        data,
        vec![a.clone(), b.clone()],
        Rc::new(|g, parents| {
            parents[0].accumulate_grad(g);
            parents[1].accumulate_grad(g);
        }),
    ))
}

/// Sum of several tensors of identical shape in one graph node.
pub fn add_n(ts: &[Tensor]) -> Result<Tensor> {
    let first = ts
        .first()
        .ok_or_else(|| TapaError::Contract("add_n on empty list".into()))?;
    let shape = first.shape();
    let mut data = vec![0.0; first.numel()];
    for t in ts {
        if t.shape() != shape {
            return Err(dim_err(format!("add_n: {:?} vs {:?}", shape, t.shape())));
        }
        for (acc, v) in data.iter_mut().zip(t.data()) {
            *acc += v;
        }
    }
    Ok(Tensor::from_op(
        shape,
        data,
        ts.to_vec(),
        Rc::new(|g, parents| {
            for p in parents {
                p.accumulate_grad(g);
            }
        }),
    ))
}

/// Scalar multiple of a tensor.
pub fn scale(a: &Tensor, c: f64) -> Tensor {
    let data: Vec<f64> = a.data().iter().map(|x| x * c).collect();
    Tensor::from_op(
        a.shape(),
        data,
        vec![a.clone()],
        Rc::new(move |g, parents| {
            let d: Vec<f64> = g.iter().map(|x| x * c).collect();
            parents[0].accumulate_grad(&d);
        }),
    )
}

/// Sum of all elements, as a scalar.
pub fn sum(a: &Tensor) -> Tensor {
    let total: f64 = a.data().iter().sum();
    let n = a.numel();
    Tensor::from_op(
        vec![],
        vec![total],
        vec![a.clone()],
        Rc::new(move |g, parents| {
            parents[0].accumulate_grad(&vec![g[0]; n]);
        }),
    )
}

/// Matrix product of a `[n, k]` and a `[k, m]` tensor.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(dim_err(format!("matmul: {:?} x {:?}", sa, sb)));
    }
    let (n, k, m) = (sa[0], sa[1], sb[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..m {
                out[i * m + j] += av * bd[p * m + j];
            }
        }
    }
    Ok(Tensor::from_op(
        vec![n, m],
        out,
        vec![a.clone(), b.clone()],
        Rc::new(move |g, parents| {
            if parents[0].requires_grad() {
                let mut da = vec![0.0; n * k];
                for i in 0..n {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..m {
                            acc += g[i * m + j] * bd[p * m + j];
                        }
                        da[i * k + p] = acc;
                    }
                }
                parents[0].accumulate_grad(&da);
            }
            if parents[1].requires_grad() {
                let mut db = vec![0.0; k * m];
                for p in 0..k {
                    for i in 0..n {
                        let av = ad[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..m {
                            db[p * m + j] += av * g[i * m + j];
                        }
                    }
                }
                parents[1].accumulate_grad(&db);
            }
        }),
    ))
}

/// Matrix-vector product of a `[n, k]` matrix and a length-`k` vector.
pub fn matvec(a: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (sa, sv) = (a.shape(), v.shape());
    if sa.len() != 2 || sv.len() != 1 || sa[1] != sv[0] {
        return Err(dim_err(format!("matvec: {:?} x {:?}", sa, sv)));
    }
    let (n, k) = (sa[0], sa[1]);
    let (ad, vd) = (a.data(), v.data());
    let mut out = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for p in 0..k {
            acc += ad[i * k + p] * vd[p];
        }
        out[i] = acc;
    }
    Ok(Tensor::from_op(
        vec![n],
        out,
        vec![a.clone(), v.clone()],
        Rc::new(move |g, parents| {
            if parents[0].requires_grad() {
                let mut da = vec![0.0; n * k];
                for i in 0..n {
                    for p in 0..k {
                        da[i * k + p] = g[i] * vd[p];
                    }
                }
                parents[0].accumulate_grad(&da);
            }
            if parents[1].requires_grad() {
                let mut dv = vec![0.0; k];
                for i in 0..n {
                    for p in 0..k {
                        dv[p] += g[i] * ad[i * k + p];
                    }
                }
                parents[1].accumulate_grad(&dv);
            }
        }),
    ))
}

/// Elementwise (Hadamard) product.
pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(dim_err(format!("hadamard: {:?} vs {:?}", sa, sb)));
    }
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<f64> = ad.iter().zip(&bd).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_op(
        sa,
        data,
        vec![a.clone(), b.clone()],
        Rc::new(move |g, parents| {
            if parents[0].requires_grad() {
                let da: Vec<f64> = g.iter().zip(&bd).map(|(gi, y)| gi * y).collect();
                parents[0].accumulate_grad(&da);
            }
            if parents[1].requires_grad() {
                let db: Vec<f64> = g.iter().zip(&ad).map(|(gi, x)| gi * x).collect();
                parents[1].accumulate_grad(&db);
            }
        }),
    ))
}

/// Concatenation along `axis`; all other axes must agree.
pub fn concat(a: &Tensor, b: &Tensor, axis: usize) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != sb.len() || axis >= sa.len() {
        return Err(dim_err(format!(
            "concat axis {}: {:?} vs {:?}",
            axis, sa, sb
        )));
    }
    for (i, (x, y)) in sa.iter().zip(&sb).enumerate() {
        if i != axis && x != y {
            return Err(dim_err(format!(
                "concat axis {}: {:?} vs {:?}",
                axis, sa, sb
            )));
        }
    }
    let outer: usize = sa[..axis].iter().product();
    let inner: usize = sa[axis + 1..].iter().product();
    let (la, lb) = (sa[axis], sb[axis]);
    let (ad, bd) = (a.data(), b.data());
    let mut shape = sa.clone();
    shape[axis] = la + lb;
    let mut data = Vec::with_capacity(ad.len() + bd.len());
    for o in 0..outer {
        data.extend_from_slice(&ad[o * la * inner..(o + 1) * la * inner]);
        data.extend_from_slice(&bd[o * lb * inner..(o + 1) * lb * inner]);
    }
    Ok(Tensor::from_op(
        shape,
        data,
        vec![a.clone(), b.clone()],
        Rc::new(move |g, parents| {
            let block = (la + lb) * inner;
            if parents[0].requires_grad() {
                let mut da = Vec::with_capacity(outer * la * inner);
                for o in 0..outer {
                    da.extend_from_slice(&g[o * block..o * block + la * inner]);
                }
                parents[0].accumulate_grad(&da);
            }
            if parents[1].requires_grad() {
                let mut db = Vec::with_capacity(outer * lb * inner);
                for o in 0..outer {
                    db.extend_from_slice(&g[o * block + la * inner..(o + 1) * block]);
                }
                parents[1].accumulate_grad(&db);
            }
        }),
    ))
}

const COSINE_NORM_FLOOR: f64 = 1e-12;

/// Cosine similarity of two equal-length vectors. A vector with norm
/// below 1e-12 yields 0.0 with zero gradient (padded positions map to
/// neutral affinity).
pub fn cosine(u: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (su, sv) = (u.shape(), v.shape());
    if su.len() != 1 || sv.len() != 1 || su[0] != sv[0] {
        return Err(dim_err(format!("cosine: {:?} vs {:?}", su, sv)));
    }
    let (ud, vd) = (u.data(), v.data());
    let nu = ud.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = vd.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu < COSINE_NORM_FLOOR || nv < COSINE_NORM_FLOOR {
        return Ok(Tensor::scalar(0.0));
    }
    let dot: f64 = ud.iter().zip(&vd).map(|(x, y)| x * y).sum();
    let value = (dot / (nu * nv)).clamp(-1.0, 1.0);
    Ok(Tensor::from_op(
        vec![],
        vec![value],
        vec![u.clone(), v.clone()],
        Rc::new(move |g, parents| {
            let g0 = g[0];
            if parents[0].requires_grad() {
                let du: Vec<f64> = ud
                    .iter()
                    .zip(&vd)
                    .map(|(x, y)| g0 * (y / (nu * nv) - value * x / (nu * nu)))
                    .collect();
                parents[0].accumulate_grad(&du);
            }
            if parents[1].requires_grad() {
                let dv: Vec<f64> = ud
                    .iter()
                    .zip(&vd)
                    .map(|(x, y)| g0 * (x / (nu * nv) - value * y / (nv * nv)))
                    .collect();
                parents[1].accumulate_grad(&dv);
            }
        }),
    ))
}

fn unary(a: &Tensor, f: impl Fn(f64) -> f64, dfdy: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
    let input = a.data();
    let out: Vec<f64> = input.iter().map(|&x| f(x)).collect();
    let saved = out.clone();
    Tensor::from_op(
        a.shape(),
        out,
        vec![a.clone()],
        Rc::new(move |g, parents| {
            let d: Vec<f64> = g
                .iter()
                .zip(input.iter().zip(&saved))
                .map(|(gi, (&x, &y))| gi * dfdy(x, y))
                .collect();
            parents[0].accumulate_grad(&d);
        }),
    )
}

pub fn relu(a: &Tensor) -> Tensor {
    unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    unary(a, |x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
}

pub fn tanh(a: &Tensor) -> Tensor {
    unary(a, f64::tanh, |_, y| 1.0 - y * y)
}

/// Row `i` of a `[r, c]` matrix as a length-`c` vector. Backward scatters
/// into that row only (embedding-style lookup).
pub fn row(m: &Tensor, i: usize) -> Result<Tensor> {
    let s = m.shape();
    if s.len() != 2 || i >= s[0] {
        return Err(dim_err(format!("row {} of shape {:?}", i, s)));
    }
    let (r, c) = (s[0], s[1]);
    let data = m.data()[i * c..(i + 1) * c].to_vec();
    Ok(Tensor::from_op(
        vec![c],
        data,
        vec![m.clone()],
        Rc::new(move |g, parents| {
            let mut dm = vec![0.0; r * c];
            dm[i * c..(i + 1) * c].copy_from_slice(g);
            parents[0].accumulate_grad(&dm);
        }),
    ))
}

/// Contiguous slice `[start, start+len)` of a 1-D tensor.
pub fn slice1d(v: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let s = v.shape();
    if s.len() != 1 || start + len > s[0] {
        return Err(dim_err(format!(
            "slice [{}, {}) of shape {:?}",
            start,
            start + len,
            s
        )));
    }
    let total = s[0];
    let data = v.data()[start..start + len].to_vec();
    Ok(Tensor::from_op(
        vec![len],
        data,
        vec![v.clone()],
        Rc::new(move |g, parents| {
            let mut dv = vec![0.0; total];
            dv[start..start + len].copy_from_slice(g);
            parents[0].accumulate_grad(&dv);
        }),
    ))
}

/// Stack equal-shaped tensors along a new leading axis.
pub fn stack(ts: &[Tensor]) -> Result<Tensor> {
    let first = ts
        .first()
        .ok_or_else(|| TapaError::Contract("stack on empty list".into()))?;
    let shape = first.shape();
    let chunk = first.numel();
    let mut data = Vec::with_capacity(chunk * ts.len());
    for t in ts {
        if t.shape() != shape {
            return Err(dim_err(format!("stack: {:?} vs {:?}", shape, t.shape())));
        }
        data.extend_from_slice(&t.data());
    }
    let mut out_shape = vec![ts.len()];
    out_shape.extend_from_slice(&shape);
    Ok(Tensor::from_op(
        out_shape,
        data,
        ts.to_vec(),
        Rc::new(move |g, parents| {
            for (i, p) in parents.iter().enumerate() {
                if p.requires_grad() {
                    p.accumulate_grad(&g[i * chunk..(i + 1) * chunk]);
                }
            }
        }),
    ))
}

/// View with a new shape of equal element count.
pub fn reshape(a: &Tensor, new_shape: Vec<usize>) -> Result<Tensor> {
    if new_shape.iter().product::<usize>() != a.numel() {
        return Err(dim_err(format!(
            "reshape {:?} -> {:?}",
            a.shape(),
            new_shape
        )));
    }
    Ok(Tensor::from_op(
        new_shape,
        a.data(),
        vec![a.clone()],
        Rc::new(|g, parents| {
            parents[0].accumulate_grad(g);
        }),
    ))
}

/// Place a `[h, w]` matrix into the top-left corner of a zero
/// `[out_h, out_w]` canvas.
pub fn pad2d(m: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = m.shape();
    if s.len() != 2 || s[0] > out_h || s[1] > out_w {
        return Err(dim_err(format!("pad2d {:?} -> [{}, {}]", s, out_h, out_w)));
    }
    let (h, w) = (s[0], s[1]);
    let md = m.data();
    let mut data = vec![0.0; out_h * out_w];
    for i in 0..h {
        data[i * out_w..i * out_w + w].copy_from_slice(&md[i * w..(i + 1) * w]);
    }
    Ok(Tensor::from_op(
        vec![out_h, out_w],
        data,
        vec![m.clone()],
        Rc::new(move |g, parents| {
            let mut dm = vec![0.0; h * w];
            for i in 0..h {
                dm[i * w..(i + 1) * w].copy_from_slice(&g[i * out_w..i * out_w + w]);
            }
            parents[0].accumulate_grad(&dm);
        }),
    ))
}

/// Valid (unpadded) 2-D convolution of a `[c, h, w]` input with
/// `[k, c, fh, fw]` filters.
pub fn conv2d(input: &Tensor, filters: &Tensor, stride: usize) -> Result<Tensor> {
    let (si, sf) = (input.shape(), filters.shape());
    if si.len() != 3 || sf.len() != 4 || si[0] != sf[1] {
        return Err(dim_err(format!("conv2d: input {:?}, filters {:?}", si, sf)));
    }
    if stride == 0 {
        return Err(TapaError::Contract("conv2d: stride must be >= 1".into()));
    }
    let (c, h, w) = (si[0], si[1], si[2]);
    let (k, fh, fw) = (sf[0], sf[2], sf[3]);
    if fh > h || fw > w {
        return Err(dim_err(format!(
            "conv2d: filter {}x{} larger than input {}x{}",
            fh, fw, h, w
        )));
    }
    let oh = (h - fh) / stride + 1;
    let ow = (w - fw) / stride + 1;
    let (id, fd) = (input.data(), filters.data());
    let mut out = vec![0.0; k * oh * ow];
    for f in 0..k {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ch in 0..c {
                    for dy in 0..fh {
                        for dx in 0..fw {
                            acc += id[ch * h * w + (oy * stride + dy) * w + ox * stride + dx]
                                * fd[f * c * fh * fw + ch * fh * fw + dy * fw + dx];
                        }
                    }
                }
                out[f * oh * ow + oy * ow + ox] = acc;
            }
        }
    }
    Ok(Tensor::from_op(
        vec![k, oh, ow],
        out,
        vec![input.clone(), filters.clone()],
        Rc::new(move |g, parents| {
            if parents[0].requires_grad() {
                let mut di = vec![0.0; c * h * w];
                for f in 0..k {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[f * oh * ow + oy * ow + ox];
                            for ch in 0..c {
                                for dy in 0..fh {
                                    for dx in 0..fw {
                                        di[ch * h * w
                                            + (oy * stride + dy) * w
                                            + ox * stride
                                            + dx] += gv
                                            * fd[f * c * fh * fw + ch * fh * fw + dy * fw + dx];
                                    }
                                }
                            }
                        }
                    }
                }
                parents[0].accumulate_grad(&di);
            }
            if parents[1].requires_grad() {
                let mut df = vec![0.0; k * c * fh * fw];
                for f in 0..k {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[f * oh * ow + oy * ow + ox];
                            for ch in 0..c {
                                for dy in 0..fh {
                                    for dx in 0..fw {
                                        df[f * c * fh * fw + ch * fh * fw + dy * fw + dx] += gv
                                            * id[ch * h * w
                                                + (oy * stride + dy) * w
                                                + ox * stride
                                                + dx];
                                    }
                                }
                            }
                        }
                    }
                }
                parents[1].accumulate_grad(&df);
            }
        }),
    ))
}

/// Add a per-channel bias to a `[k, h, w]` tensor.
pub fn add_channel_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sx, sb) = (x.shape(), b.shape());
    if sx.len() != 3 || sb.len() != 1 || sx[0] != sb[0] {
        return Err(dim_err(format!("add_channel_bias: {:?} + {:?}", sx, sb)));
    }
    let (k, h, w) = (sx[0], sx[1], sx[2]);
    let bd = b.data();
    let mut data = x.data();
    for ch in 0..k {
        for v in data[ch * h * w..(ch + 1) * h * w].iter_mut() {
            *v += bd[ch];
        }
    }
    Ok(Tensor::from_op(
        sx,
        data,
        vec![x.clone(), b.clone()],
        Rc::new(move |g, parents| {
            parents[0].accumulate_grad(g);
            if parents[1].requires_grad() {
                let mut db = vec![0.0; k];
                for ch in 0..k {
                    db[ch] = g[ch * h * w..(ch + 1) * h * w].iter().sum();
                }
                parents[1].accumulate_grad(&db);
            }
        }),
    ))
}

/// Windowed maximum over a `[c, h, w]` tensor. Ties route the gradient to
/// the first maximal element in row-major order.
pub fn maxpool2d(input: &Tensor, size: usize, stride: usize) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 3 {
        return Err(dim_err(format!("maxpool2d: input {:?}", s)));
    }
    if size == 0 || stride == 0 {
        return Err(TapaError::Contract("maxpool2d: size and stride >= 1".into()));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if size > h || size > w {
        return Err(dim_err(format!(
            "maxpool2d: window {} larger than input {}x{}",
            size, h, w
        )));
    }
    let oh = (h - size) / stride + 1;
    let ow = (w - size) / stride + 1;
    let id = input.data();
    let mut out = vec![0.0; c * oh * ow];
    let mut argmax = vec![0usize; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = ch * h * w + (oy * stride + dy) * w + ox * stride + dx;
                        if id[idx] > best {
                            best = id[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[ch * oh * ow + oy * ow + ox] = best;
                argmax[ch * oh * ow + oy * ow + ox] = best_idx;
            }
        }
    }
    let total = c * h * w;
    Ok(Tensor::from_op(
        vec![c, oh, ow],
        out,
        vec![input.clone()],
        Rc::new(move |g, parents| {
            let mut di = vec![0.0; total];
            for (gi, &idx) in g.iter().zip(&argmax) {
                di[idx] += gi;
            }
            parents[0].accumulate_grad(&di);
        }),
    ))
}

/// Numerically stable binary softmax cross-entropy over two logits.
pub fn softmax_crossentropy(logits: &Tensor, label: u8) -> Result<Tensor> {
    let s = logits.shape();
    if s != vec![2] {
        return Err(dim_err(format!("softmax_crossentropy: logits {:?}", s)));
    }
    if label > 1 {
        return Err(TapaError::Domain(format!(
            "softmax_crossentropy: label {} outside {{0, 1}}",
            label
        )));
    }
    let ld = logits.data();
    let m = ld[0].max(ld[1]);
    let lse = m + ((ld[0] - m).exp() + (ld[1] - m).exp()).ln();
    let loss = lse - ld[label as usize];
    let probs = [(ld[0] - lse).exp(), (ld[1] - lse).exp()];
    Ok(Tensor::from_op(
        vec![],
        vec![loss],
        vec![logits.clone()],
        Rc::new(move |g, parents| {
            let mut d = [probs[0] * g[0], probs[1] * g[0]];
            d[label as usize] -= g[0];
            parents[0].accumulate_grad(&d);
        }),
    ))
}

/// All pairwise cosine similarities between the rows of `l` (`[n, d]`) and
/// `r` (`[m, d]`). Entries whose row or column is masked out are exactly 0,
/// as are entries involving a near-zero row.
pub fn cosine_affinity(l: &Tensor, r: &Tensor, lmask: &[bool], rmask: &[bool]) -> Result<Tensor> {
    let (sl, sr) = (l.shape(), r.shape());
    if sl.len() != 2 || sr.len() != 2 || sl[1] != sr[1] {
        return Err(dim_err(format!("cosine_affinity: {:?} vs {:?}", sl, sr)));
    }
    let (n, d, m) = (sl[0], sl[1], sr[0]);
    if lmask.len() != n || rmask.len() != m {
        return Err(TapaError::Contract(format!(
            "cosine_affinity: mask lengths {}/{} vs rows {}/{}",
            lmask.len(),
            rmask.len(),
            n,
            m
        )));
    }
    let (ld, rd) = (l.data(), r.data());
    let lnorm: Vec<f64> = (0..n)
        .map(|i| ld[i * d..(i + 1) * d].iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let rnorm: Vec<f64> = (0..m)
        .map(|j| rd[j * d..(j + 1) * d].iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let live = |mask: &[bool], norm: &[f64], i: usize| mask[i] && norm[i] >= COSINE_NORM_FLOOR;
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        if !live(lmask, &lnorm, i) {
            continue;
        }
        for j in 0..m {
            if !live(rmask, &rnorm, j) {
                continue;
            }
            let dot: f64 = ld[i * d..(i + 1) * d]
                .iter()
                .zip(&rd[j * d..(j + 1) * d])
                .map(|(x, y)| x * y)
                .sum();
            out[i * m + j] = (dot / (lnorm[i] * rnorm[j])).clamp(-1.0, 1.0);
        }
    }
    let values = out.clone();
    let (lmask, rmask) = (lmask.to_vec(), rmask.to_vec());
    Ok(Tensor::from_op(
        vec![n, m],
        out,
        vec![l.clone(), r.clone()],
        Rc::new(move |g, parents| {
            let mut dl = vec![0.0; n * d];
            let mut dr = vec![0.0; m * d];
            for i in 0..n {
                if !(lmask[i] && lnorm[i] >= COSINE_NORM_FLOOR) {
                    continue;
                }
                for j in 0..m {
                    if !(rmask[j] && rnorm[j] >= COSINE_NORM_FLOOR) {
                        continue;
                    }
                    let gv = g[i * m + j];
                    if gv == 0.0 {
                        continue;
                    }
                    let a = values[i * m + j];
                    let scale = 1.0 / (lnorm[i] * rnorm[j]);
                    for t in 0..d {
                        let (x, y) = (ld[i * d + t], rd[j * d + t]);
                        dl[i * d + t] += gv * (y * scale - a * x / (lnorm[i] * lnorm[i]));
                        dr[j * d + t] += gv * (x * scale - a * y / (rnorm[j] * rnorm[j]));
                    }
                }
            }
            if parents[0].requires_grad() {
                parents[0].accumulate_grad(&dl);
            }
            if parents[1].requires_grad() {
                parents[1].accumulate_grad(&dr);
            }
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Central-difference gradient of `f` w.r.t. a parameter tensor.
    fn numeric_grad(param: &Tensor, f: impl Fn() -> f64, eps: f64) -> Vec<f64> {
        let base = param.data();
        let mut out = vec![0.0; base.len()];
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += eps;
            param.set_data(plus);
            let fp = f();
            let mut minus = base.clone();
            minus[i] -= eps;
            param.set_data(minus);
            let fm = f();
            param.set_data(base.clone());
            out[i] = (fp - fm) / (2.0 * eps);
        }
        out
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{} vs {} (tol {})", x, y, tol);
        }
    }

    #[test]
    fn matmul_identity() {
        let i = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&i, &b).unwrap().data(), b.data());
    }

    #[test]
    fn matmul_one_by_one() {
        let a = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let b = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), vec![6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ad = rand_vec(&mut rng, 12);
        let bd = rand_vec(&mut rng, 8);
        let a = Tensor::new(vec![3, 4], ad.clone()).unwrap();
        let b = Tensor::new(vec![4, 2], bd.clone()).unwrap();
        let got = matmul(&a, &b).unwrap().data();
        let mut want = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                for p in 0..4 {
                    want[i * 2 + j] += ad[i * 4 + p] * bd[p * 2 + j];
                }
            }
        }
        assert_close(&got, &want, 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap();
        match matmul(&a, &b) {
            Err(TapaError::Dimension(msg)) => {
                assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
            }
            other => panic!("expected dimension error, got {:?}", other.map(|t| t.shape())),
        }
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::param(vec![3, 4], rand_vec(&mut rng, 12)).unwrap();
        let b = Tensor::param(vec![4, 2], rand_vec(&mut rng, 8)).unwrap();
        let loss = sum(&matmul(&a, &b).unwrap());
        loss.backward().unwrap();
        let f = || sum(&matmul(&a, &b).unwrap()).item();
        assert_close(&a.grad().unwrap(), &numeric_grad(&a, f, 1e-5), 1e-7);
        let f = || sum(&matmul(&a, &b).unwrap()).item();
        assert_close(&b.grad().unwrap(), &numeric_grad(&b, f, 1e-5), 1e-7);
    }

    #[test]
    fn hadamard_with_ones_is_identity() {
        let a = Tensor::new(vec![3], vec![1.5, -2.0, 0.25]).unwrap();
        let ones = Tensor::new(vec![3], vec![1.0; 3]).unwrap();
        assert_eq!(hadamard(&a, &ones).unwrap().data(), a.data());
    }

    #[test]
    fn hadamard_matches_elementwise_oracle() {
        let a = Tensor::new(vec![2], vec![0.5, 0.5]).unwrap();
        let b = Tensor::new(vec![2], vec![0.8, 0.2]).unwrap();
        assert_eq!(hadamard(&a, &b).unwrap().data(), vec![0.4, 0.1]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xd = rand_vec(&mut rng, 7);
        let yd = rand_vec(&mut rng, 7);
        let x = Tensor::new(vec![7], xd.clone()).unwrap();
        let y = Tensor::new(vec![7], yd.clone()).unwrap();
        let want: Vec<f64> = xd.iter().zip(&yd).map(|(p, q)| p * q).collect();
        assert_eq!(hadamard(&x, &y).unwrap().data(), want);
    }

    #[test]
    fn concat_shapes_and_identity() {
        let a = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::new(vec![2], vec![4.0, 5.0]).unwrap();
        let c = concat(&a, &b, 0).unwrap();
        assert_eq!(c.shape(), vec![5]);
        assert_eq!(c.data(), vec![1.0, 2.0, 3.0, 4.0, 5.0]);

        let empty = Tensor::new(vec![0], vec![]).unwrap();
        let d = concat(&a, &empty, 0).unwrap();
        assert_eq!(d.data(), a.data());
    }

    #[test]
    fn concat_backward_recovers_segment_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::param(vec![3], rand_vec(&mut rng, 3)).unwrap();
        let b = Tensor::param(vec![2], rand_vec(&mut rng, 2)).unwrap();
        // weight the concatenated vector so per-segment grads differ
        let w = Tensor::new(vec![5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let loss = sum(&hadamard(&concat(&a, &b, 0).unwrap(), &w).unwrap());
        loss.backward().unwrap();
        let f = || {
            sum(&hadamard(&concat(&a, &b, 0).unwrap(), &w).unwrap()).item()
        };
        assert_close(&a.grad().unwrap(), &numeric_grad(&a, f, 1e-5), 1e-8);
        let f = || {
            sum(&hadamard(&concat(&a, &b, 0).unwrap(), &w).unwrap()).item()
        };
        assert_close(&b.grad().unwrap(), &numeric_grad(&b, f, 1e-5), 1e-8);
    }

    #[test]
    fn concat_axis1_of_matrices() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap();
        let c = concat(&a, &b, 1).unwrap();
        assert_eq!(c.shape(), vec![2, 3]);
        assert_eq!(c.data(), vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
    }

    #[test]
    fn cosine_values() {
        let v = Tensor::new(vec![3], vec![1.0, 2.0, -0.5]).unwrap();
        assert!((cosine(&v, &v).unwrap().item() - 1.0).abs() < 1e-12);

        let x = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let y = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        assert_eq!(cosine(&x, &y).unwrap().item(), 0.0);

        let z = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        assert!((cosine(&x, &z).unwrap().item() - 0.7071067811865475).abs() < 1e-15);
    }

    #[test]
    fn cosine_zero_vector_neutral() {
        let zero = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let v = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        let c = cosine(&zero, &v).unwrap();
        assert_eq!(c.item(), 0.0);
        assert!(!c.requires_grad());
    }

    #[test]
    fn cosine_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let u = Tensor::param(vec![4], rand_vec(&mut rng, 4)).unwrap();
        let v = Tensor::param(vec![4], rand_vec(&mut rng, 4)).unwrap();
        let loss = cosine(&u, &v).unwrap();
        loss.backward().unwrap();
        let f = || cosine(&u, &v).unwrap().item();
        assert_close(&u.grad().unwrap(), &numeric_grad(&u, f, 1e-6), 1e-6);
        let f = || cosine(&u, &v).unwrap().item();
        assert_close(&v.grad().unwrap(), &numeric_grad(&v, f, 1e-6), 1e-6);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let input = Tensor::new(vec![1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let filt = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let out = conv2d(&input, &filt, 1).unwrap();
        assert_eq!(out.shape(), vec![1, 2, 3]);
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn conv2d_sum_kernel() {
        let input = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let filt = Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let out = conv2d(&input, &filt, 1).unwrap();
        assert_eq!(out.shape(), vec![1, 1, 1]);
        assert_eq!(out.data(), vec![10.0]);
    }

    #[test]
    fn conv2d_matches_six_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (c, h, w, k, fh, fw, stride) = (2, 5, 6, 3, 2, 3, 2);
        let id = rand_vec(&mut rng, c * h * w);
        let fd = rand_vec(&mut rng, k * c * fh * fw);
        let input = Tensor::new(vec![c, h, w], id.clone()).unwrap();
        let filt = Tensor::new(vec![k, c, fh, fw], fd.clone()).unwrap();
        let got = conv2d(&input, &filt, stride).unwrap();
        let (oh, ow) = ((h - fh) / stride + 1, (w - fw) / stride + 1);
        assert_eq!(got.shape(), vec![k, oh, ow]);
        let mut want = vec![0.0; k * oh * ow];
        for f in 0..k {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        for dy in 0..fh {
                            for dx in 0..fw {
                                want[f * oh * ow + oy * ow + ox] += id
                                    [ch * h * w + (oy * stride + dy) * w + ox * stride + dx]
                                    * fd[f * c * fh * fw + ch * fh * fw + dy * fw + dx];
                            }
                        }
                    }
                }
            }
        }
        assert_close(&got.data(), &want, 1e-12);
    }

    #[test]
    fn conv2d_filter_larger_than_input_rejected() {
        let input = Tensor::new(vec![1, 2, 2], vec![0.0; 4]).unwrap();
        let filt = Tensor::new(vec![1, 1, 3, 3], vec![0.0; 9]).unwrap();
        assert!(matches!(
            conv2d(&input, &filt, 1),
            Err(TapaError::Dimension(_))
        ));
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let input = Tensor::param(vec![2, 4, 4], rand_vec(&mut rng, 32)).unwrap();
        let filt = Tensor::param(vec![2, 2, 2, 2], rand_vec(&mut rng, 16)).unwrap();
        let loss = sum(&conv2d(&input, &filt, 1).unwrap());
        loss.backward().unwrap();
        let f = || sum(&conv2d(&input, &filt, 1).unwrap()).item();
        assert_close(&input.grad().unwrap(), &numeric_grad(&input, f, 1e-5), 1e-7);
        let f = || sum(&conv2d(&input, &filt, 1).unwrap()).item();
        assert_close(&filt.grad().unwrap(), &numeric_grad(&filt, f, 1e-5), 1e-7);
    }

    #[test]
    fn maxpool_basics() {
        let input = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = maxpool2d(&input, 2, 2).unwrap();
        assert_eq!(out.data(), vec![4.0]);

        let constant = Tensor::new(vec![1, 4, 4], vec![0.7; 16]).unwrap();
        let out = maxpool2d(&constant, 2, 2).unwrap();
        assert_eq!(out.data(), vec![0.7; 4]);
    }

    #[test]
    fn maxpool_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (c, h, w, size, stride) = (2, 5, 5, 2, 2);
        let id = rand_vec(&mut rng, c * h * w);
        let input = Tensor::new(vec![c, h, w], id.clone()).unwrap();
        let got = maxpool2d(&input, size, stride).unwrap();
        let (oh, ow) = ((h - size) / stride + 1, (w - size) / stride + 1);
        let mut want = vec![f64::NEG_INFINITY; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    for dy in 0..size {
                        for dx in 0..size {
                            let v = id[ch * h * w + (oy * stride + dy) * w + ox * stride + dx];
                            let slot = &mut want[ch * oh * ow + oy * ow + ox];
                            if v > *slot {
                                *slot = v;
                            }
                        }
                    }
                }
            }
        }
        assert_eq!(got.data(), want);
    }

    #[test]
    fn maxpool_tie_routes_gradient_to_first_occurrence() {
        let input = Tensor::param(vec![1, 2, 2], vec![5.0, 5.0, 1.0, 5.0]).unwrap();
        let out = maxpool2d(&input, 2, 2).unwrap();
        out.backward().unwrap();
        assert_eq!(input.grad().unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_window_larger_than_input_rejected() {
        let input = Tensor::new(vec![1, 2, 2], vec![0.0; 4]).unwrap();
        assert!(matches!(
            maxpool2d(&input, 3, 1),
            Err(TapaError::Dimension(_))
        ));
    }

    #[test]
    fn crossentropy_values() {
        let logits = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let loss = softmax_crossentropy(&logits, 0).unwrap();
        assert!((loss.item() - std::f64::consts::LN_2).abs() < 1e-15);
        let loss = softmax_crossentropy(&logits, 1).unwrap();
        assert!((loss.item() - std::f64::consts::LN_2).abs() < 1e-15);

        let saturated = Tensor::new(vec![2], vec![50.0, -50.0]).unwrap();
        assert!(softmax_crossentropy(&saturated, 0).unwrap().item() < 1e-20);
    }

    #[test]
    fn crossentropy_rejects_bad_label() {
        let logits = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            softmax_crossentropy(&logits, 2),
            Err(TapaError::Domain(_))
        ));
    }

    #[test]
    fn crossentropy_gradient_matches_finite_differences() {
        let logits = Tensor::param(vec![2], vec![1.0, -1.0]).unwrap();
        let loss = softmax_crossentropy(&logits, 1).unwrap();
        loss.backward().unwrap();
        let f = || softmax_crossentropy(&logits, 1).unwrap().item();
        assert_close(&logits.grad().unwrap(), &numeric_grad(&logits, f, 1e-6), 1e-6);
    }

    #[test]
    fn cosine_affinity_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (n, m, d) = (3, 4, 5);
        let l = Tensor::new(vec![n, d], rand_vec(&mut rng, n * d)).unwrap();
        let r = Tensor::new(vec![m, d], rand_vec(&mut rng, m * d)).unwrap();
        let got = cosine_affinity(&l, &r, &vec![true; n], &vec![true; m]).unwrap();
        for i in 0..n {
            for j in 0..m {
                let li = row(&l, i).unwrap();
                let rj = row(&r, j).unwrap();
                let want = cosine(&li, &rj).unwrap().item();
                assert!((got.data()[i * m + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cosine_affinity_masks_force_zero() {
        let l = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.5, 0.5]).unwrap();
        let r = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = cosine_affinity(&l, &r, &[true, false], &[true, true]).unwrap();
        let d = a.data();
        assert_eq!(d[2], 0.0);
        assert_eq!(d[3], 0.0);
        assert!((d[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_affinity_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let (n, m, d) = (3, 2, 4);
        let l = Tensor::param(vec![n, d], rand_vec(&mut rng, n * d)).unwrap();
        let r = Tensor::param(vec![m, d], rand_vec(&mut rng, m * d)).unwrap();
        let weights = Tensor::new(vec![n, m], rand_vec(&mut rng, n * m)).unwrap();
        let lmask = vec![true, true, false];
        let rmask = vec![true, true];
        let run = || {
            let a = cosine_affinity(&l, &r, &lmask, &rmask).unwrap();
            sum(&hadamard(&a, &weights).unwrap())
        };
        let loss = run();
        loss.backward().unwrap();
        let f = || run().item();
        assert_close(&l.grad().unwrap(), &numeric_grad(&l, f, 1e-6), 1e-6);
        let f = || run().item();
        assert_close(&r.grad().unwrap(), &numeric_grad(&r, f, 1e-6), 1e-6);
    }

    #[test]
    fn stack_and_row_roundtrip() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let s = stack(&[a, b]).unwrap();
        assert_eq!(s.shape(), vec![2, 2]);
        assert_eq!(row(&s, 1).unwrap().data(), vec![3.0, 4.0]);
    }

    #[test]
    fn slice_and_activation_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let v = Tensor::param(vec![6], rand_vec(&mut rng, 6)).unwrap();
        let run = || {
            let s = slice1d(&v, 1, 3).unwrap();
            sum(&tanh(&sigmoid(&s)))
        };
        let loss = run();
        loss.backward().unwrap();
        let f = || run().item();
        assert_close(&v.grad().unwrap(), &numeric_grad(&v, f, 1e-6), 1e-7);
    }

    #[test]
    fn pad2d_places_top_left() {
        let m = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = pad2d(&m, 3, 4).unwrap();
        assert_eq!(p.shape(), vec![3, 4]);
        assert_eq!(
            p.data(),
            vec![1.0, 2.0, 0.0, 0.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );
    }
}
