//! Differentiable primitives. Each forward records an [`Op`] on the tape;
//! [`backward_node`] holds the matching vector-Jacobian products.

use super::conv::{self, ConvGeom};
use super::tape::{Node, Var};
use super::{concat_geometry, Tensor};
use crate::error::{shape_err, Result};

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Sum(usize),
    Mean(usize),
    Silu(usize),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Conv3d {
        x: usize,
        k: usize,
        geom: ConvGeom,
    },
    AddBias {
        x: usize,
        b: usize,
    },
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    L1Loss {
        pred: usize,
        target: usize,
    },
    MseLoss {
        pred: usize,
        target: usize,
    },
    Concat {
        parts: Vec<usize>,
        channels: Vec<usize>,
    },
    SliceChannels {
        x: usize,
        start: usize,
    },
    Upsample2x(usize),
    Reshape(usize),
}

fn record(inputs: &[&Var], value: Tensor, op: Op) -> Var {
    let needs = inputs.iter().any(|v| v.needs_grad());
    inputs[0].tape().push(value, op, needs)
}

fn same_tape(vars: &[&Var]) -> Result<()> {
    for v in &vars[1..] {
        vars[0].check_same_tape(v)?;
    }
    Ok(())
}

fn binary(a: &Var, b: &Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    same_tape(&[a, b])?;
    a.value().zip_map(&b.value(), f)
}

pub fn add(a: &Var, b: &Var) -> Result<Var> {
    let v = binary(a, b, |x, y| x + y)?;
    Ok(record(&[a, b], v, Op::Add(a.id(), b.id())))
}

pub fn sub(a: &Var, b: &Var) -> Result<Var> {
    let v = binary(a, b, |x, y| x - y)?;
    Ok(record(&[a, b], v, Op::Sub(a.id(), b.id())))
}

pub fn mul(a: &Var, b: &Var) -> Result<Var> {
    let v = binary(a, b, |x, y| x * y)?;
    Ok(record(&[a, b], v, Op::Mul(a.id(), b.id())))
}

pub fn scale(x: &Var, c: f64) -> Var {
    let v = x.value().map(|a| a * c);
    record(&[x], v, Op::Scale(x.id(), c))
}

pub fn add_scalar(x: &Var, c: f64) -> Var {
    let v = x.value().map(|a| a + c);
    record(&[x], v, Op::AddScalar(x.id()))
}

pub fn exp(x: &Var) -> Var {
    let v = x.value().map(f64::exp);
    record(&[x], v, Op::Exp(x.id()))
}

pub fn sum(x: &Var) -> Var {
    let s = x.value().data().iter().sum();
    record(&[x], Tensor::scalar(s), Op::Sum(x.id()))
}

pub fn mean(x: &Var) -> Var {
    let val = x.value();
    let m = val.data().iter().sum::<f64>() / val.numel().max(1) as f64;
    drop(val);
    record(&[x], Tensor::scalar(m), Op::Mean(x.id()))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &Var) -> Var {
    let v = x.value().map(|a| a * sigmoid(a));
    record(&[x], v, Op::Silu(x.id()))
}

/// `x[B,I] @ w[I,O] + b[O]`.
pub fn linear(x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
    same_tape(&[x, w])?;
    let (xv, wv) = (x.value(), w.value());
    let (xs, ws) = (xv.shape(), wv.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
        return Err(shape_err(format!("linear: x {xs:?} and w {ws:?}")));
    }
    let (batch, inner, out) = (xs[0], xs[1], ws[1]);
    let mut data = vec![0.0; batch * out];
    if let Some(b) = b {
        x.check_same_tape(b)?;
        let bv = b.value();
        if bv.shape() != [out] {
            return Err(shape_err(format!("linear: bias {:?} for {out} outputs", bv.shape())));
        }
        for row in data.chunks_mut(out) {
            row.copy_from_slice(bv.data());
        }
    }
    conv::gemm(batch, inner, out, xv.data(), false, wv.data(), false, 1.0, &mut data);
    drop((xv, wv));
    let value = Tensor::new([batch, out], data)?;
    let op = Op::Linear {
        x: x.id(),
        w: w.id(),
        b: b.map(Var::id),
    };
    Ok(match b {
        Some(b) => record(&[x, w, b], value, op),
        None => record(&[x, w], value, op),
    })
}

/// 3D cross-correlation of `x[B,Cin,D,H,W]` with `k[Cout,Cin,kd,kh,kw]`.
pub fn conv3d(x: &Var, k: &Var, stride: usize, pad: usize) -> Result<Var> {
    same_tape(&[x, k])?;
    let (xv, kv) = (x.value(), k.value());
    let geom = ConvGeom::new(xv.shape(), kv.shape(), stride, pad)?;
    let out = conv::forward(&geom, xv.data(), kv.data());
    drop((xv, kv));
    let value = Tensor::new(geom.out_shape(), out)?;
    Ok(record(
        &[x, k],
        value,
        Op::Conv3d {
            x: x.id(),
            k: k.id(),
            geom,
        },
    ))
}

/// Adds a per-channel bias to `x[B,C,...]`; `b` is `[C]` (shared across the
/// batch) or `[B,C]` (one row per sample).
pub fn add_bias(x: &Var, b: &Var) -> Result<Var> {
    same_tape(&[x, b])?;
    let (xv, bv) = (x.value(), b.value());
    let xs = xv.shape();
    if xs.len() < 2 {
        return Err(shape_err(format!("add_bias on {xs:?}")));
    }
    let (batch, ch) = (xs[0], xs[1]);
    let inner: usize = xs[2..].iter().product();
    let per_sample = match bv.shape() {
        [c] if *c == ch => false,
        [bb, c] if *bb == batch && *c == ch => true,
        other => return Err(shape_err(format!("add_bias: bias {other:?} for x {xs:?}"))),
    };
    let mut data = xv.data().to_vec();
    for s in 0..batch {
        for c in 0..ch {
            let beta = bv.data()[if per_sample { s * ch + c } else { c }];
            let off = (s * ch + c) * inner;
            data[off..off + inner].iter_mut().for_each(|v| *v += beta);
        }
    }
    let value = Tensor::new(xs.to_vec(), data)?;
    drop((xv, bv));
    Ok(record(&[x, b], value, Op::AddBias { x: x.id(), b: b.id() }))
}

/// Group normalization over `x[B,C,...]` with per-channel affine.
pub fn group_norm(x: &Var, groups: usize, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
    same_tape(&[x, gamma, beta])?;
    let (xv, gv, bv) = (x.value(), gamma.value(), beta.value());
    let xs = xv.shape();
    if xs.len() < 2 || groups == 0 || xs[1] % groups != 0 {
        return Err(shape_err(format!("group_norm: {groups} groups over {xs:?}")));
    }
    let ch = xs[1];
    if gv.shape() != [ch] || bv.shape() != [ch] {
        return Err(shape_err(format!(
            "group_norm: gamma {:?} / beta {:?} for {ch} channels",
            gv.shape(),
            bv.shape()
        )));
    }
    let inner: usize = xs[2..].iter().product();
    let cpg = ch / groups;
    let span = cpg * inner;
    let mut mean = Vec::with_capacity(xs[0] * groups);
    let mut rstd = Vec::with_capacity(xs[0] * groups);
    let mut data = vec![0.0; xv.numel()];
    for (gi, chunk) in xv.data().chunks(span).enumerate() {
        let m = chunk.iter().sum::<f64>() / span as f64;
        let var = chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / span as f64;
        let r = 1.0 / (var + eps).sqrt();
        let g = gi % groups;
        for (j, v) in chunk.iter().enumerate() {
            let c = g * cpg + j / inner;
            data[gi * span + j] = (v - m) * r * gv.data()[c] + bv.data()[c];
        }
        mean.push(m);
        rstd.push(r);
    }
    let value = Tensor::new(xs.to_vec(), data)?;
    drop((xv, gv, bv));
    Ok(record(
        &[x, gamma, beta],
        value,
        Op::GroupNorm {
            x: x.id(),
            gamma: gamma.id(),
            beta: beta.id(),
            groups,
            mean,
            rstd,
        },
    ))
}

/// Mean absolute error. The subgradient at a zero residual is 0.
pub fn l1_loss(pred: &Var, target: &Var) -> Result<Var> {
    same_tape(&[pred, target])?;
    let (pv, tv) = (pred.value(), target.value());
    pv.expect_same_shape(&tv)?;
    let n = pv.numel().max(1) as f64;
    let residual: Vec<f64> = pv.data().iter().zip(tv.data()).map(|(p, t)| p - t).collect();
    drop((pv, tv));
    let loss = residual.iter().map(|r| r.abs()).sum::<f64>() / n;
    pred.tape().mix_nonsmooth(residual.iter().map(|&r| sign(r) as i8));
    Ok(record(
        &[pred, target],
        Tensor::scalar(loss),
        Op::L1Loss {
            pred: pred.id(),
            target: target.id(),
        },
    ))
}

pub fn mse_loss(pred: &Var, target: &Var) -> Result<Var> {
    same_tape(&[pred, target])?;
    let (pv, tv) = (pred.value(), target.value());
    pv.expect_same_shape(&tv)?;
    let n = pv.numel().max(1) as f64;
    let loss = pv
        .data()
        .iter()
        .zip(tv.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n;
    drop((pv, tv));
    Ok(record(
        &[pred, target],
        Tensor::scalar(loss),
        Op::MseLoss {
            pred: pred.id(),
            target: target.id(),
        },
    ))
}

pub fn concat_channels(parts: &[&Var]) -> Result<Var> {
    if parts.is_empty() {
        return Err(shape_err("concat of zero tensors"));
    }
    same_tape(parts)?;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let refs: Vec<&Tensor> = values.iter().map(|v| &**v).collect();
    let value = Tensor::concat_channels(&refs)?;
    let (_, _, channels) = concat_geometry(refs.iter().map(|t| t.shape()))?;
    drop(refs);
    drop(values);
    Ok(record(
        parts,
        value,
        Op::Concat {
            parts: parts.iter().map(|p| p.id()).collect(),
            channels,
        },
    ))
}

/// Channels `start..start+len` of `x[B,C,...]`.
pub fn slice_channels(x: &Var, start: usize, len: usize) -> Result<Var> {
    let xv = x.value();
    let xs = xv.shape();
    if xs.len() < 2 || start + len > xs[1] || len == 0 {
        return Err(shape_err(format!("slice_channels {start}..{} of {xs:?}", start + len)));
    }
    let inner: usize = xs[2..].iter().product();
    let mut data = Vec::with_capacity(xs[0] * len * inner);
    for b in 0..xs[0] {
        let off = (b * xs[1] + start) * inner;
        data.extend_from_slice(&xv.data()[off..off + len * inner]);
    }
    let mut shape = xs.to_vec();
    shape[1] = len;
    let value = Tensor::new(shape, data)?;
    drop(xv);
    Ok(record(&[x], value, Op::SliceChannels { x: x.id(), start }))
}

/// Nearest-neighbour 2x upsampling of `x[B,C,D,H,W]`.
pub fn upsample_nearest2x(x: &Var) -> Result<Var> {
    let xv = x.value();
    let xs = xv.shape();
    if xs.len() != 5 {
        return Err(shape_err(format!("upsample expects [B,C,D,H,W], got {xs:?}")));
    }
    let (d, h, w) = (xs[2], xs[3], xs[4]);
    let planes = xs[0] * xs[1];
    let mut data = vec![0.0; planes * 8 * d * h * w];
    for p in 0..planes {
        let src = &xv.data()[p * d * h * w..(p + 1) * d * h * w];
        let dst = &mut data[p * 8 * d * h * w..(p + 1) * 8 * d * h * w];
        for z in 0..2 * d {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[(z * 2 * h + y) * 2 * w + xx] = src[((z / 2) * h + y / 2) * w + xx / 2];
                }
            }
        }
    }
    let value = Tensor::new([xs[0], xs[1], 2 * d, 2 * h, 2 * w], data)?;
    drop(xv);
    Ok(record(&[x], value, Op::Upsample2x(x.id())))
}

pub fn reshape(x: &Var, shape: &[usize]) -> Result<Var> {
    let value = x.value().clone().reshape(shape.to_vec())?;
    Ok(record(&[x], value, Op::Reshape(x.id())))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn val(nodes: &[Node], id: usize) -> &Tensor {
    &nodes[id].value
}

fn wants(nodes: &[Node], id: usize) -> bool {
    nodes[id].needs_grad
}

/// Vector-Jacobian product of one recorded op: calls `emit(parent, grad)`
/// for every parent input.
pub(crate) fn backward_node(
    op: &Op,
    out: &Tensor,
    g: &[f64],
    nodes: &[Node],
    emit: &mut dyn FnMut(usize, Vec<f64>),
) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            emit(*a, g.to_vec());
            emit(*b, g.to_vec());
        }
        Op::Sub(a, b) => {
            emit(*a, g.to_vec());
            emit(*b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(nodes, *a).data(), val(nodes, *b).data());
            emit(*a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
            emit(*b, g.iter().zip(av).map(|(g, x)| g * x).collect());
        }
        Op::Scale(a, c) => emit(*a, g.iter().map(|v| v * c).collect()),
        Op::AddScalar(a) => emit(*a, g.to_vec()),
        Op::Exp(a) => emit(*a, g.iter().zip(out.data()).map(|(g, y)| g * y).collect()),
        Op::Sum(a) => emit(*a, vec![g[0]; val(nodes, *a).numel()]),
        Op::Mean(a) => {
            let n = val(nodes, *a).numel();
            emit(*a, vec![g[0] / n.max(1) as f64; n]);
        }
        Op::Silu(a) => {
            let x = val(nodes, *a).data();
            emit(
                *a,
                g.iter()
                    .zip(x)
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect(),
            );
        }
        Op::Linear { x, w, b } => {
            let (xv, wv) = (val(nodes, *x), val(nodes, *w));
            let (batch, inner) = (xv.shape()[0], xv.shape()[1]);
            let outn = wv.shape()[1];
            if wants(nodes, *x) {
                let mut dx = vec![0.0; batch * inner];
                conv::gemm(batch, outn, inner, g, false, wv.data(), true, 0.0, &mut dx);
                emit(*x, dx);
            }
            if wants(nodes, *w) {
                let mut dw = vec![0.0; inner * outn];
                conv::gemm(inner, batch, outn, xv.data(), true, g, false, 0.0, &mut dw);
                emit(*w, dw);
            }
            if let Some(b) = b {
                let mut db = vec![0.0; outn];
                for row in g.chunks(outn) {
                    db.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                }
                emit(*b, db);
            }
        }
        Op::Conv3d { x, k, geom } => {
            let (dx, dk) = conv::backward(
                geom,
                val(nodes, *x).data(),
                val(nodes, *k).data(),
                g,
                wants(nodes, *x),
                wants(nodes, *k),
            );
            if let Some(dx) = dx {
                emit(*x, dx);
            }
            if let Some(dk) = dk {
                emit(*k, dk);
            }
        }
        Op::AddBias { x, b } => {
            let xs = val(nodes, *x).shape();
            let (batch, ch) = (xs[0], xs[1]);
            let inner: usize = xs[2..].iter().product();
            let per_sample = val(nodes, *b).rank() == 2;
            let mut db = vec![0.0; val(nodes, *b).numel()];
            for s in 0..batch {
                for c in 0..ch {
                    let off = (s * ch + c) * inner;
                    let acc: f64 = g[off..off + inner].iter().sum();
                    db[if per_sample { s * ch + c } else { c }] += acc;
                }
            }
            emit(*x, g.to_vec());
            emit(*b, db);
        }
        Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            mean,
            rstd,
        } => {
            let xv = val(nodes, *x);
            let gam = val(nodes, *gamma).data();
            let ch = xv.shape()[1];
            let inner: usize = xv.shape()[2..].iter().product();
            let cpg = ch / groups;
            let span = cpg * inner;
            let mut dx = vec![0.0; xv.numel()];
            let mut dgamma = vec![0.0; ch];
            let mut dbeta = vec![0.0; ch];
            for (gi, chunk) in xv.data().chunks(span).enumerate() {
                let (m, r) = (mean[gi], rstd[gi]);
                let grp = gi % groups;
                let gg = &g[gi * span..(gi + 1) * span];
                let mut sum_d = 0.0;
                let mut sum_dx = 0.0;
                for (j, (&v, &go)) in chunk.iter().zip(gg).enumerate() {
                    let c = grp * cpg + j / inner;
                    let xhat = (v - m) * r;
                    dgamma[c] += go * xhat;
                    dbeta[c] += go;
                    let d = go * gam[c];
                    sum_d += d;
                    sum_dx += d * xhat;
                }
                let n = span as f64;
                for (j, (&v, &go)) in chunk.iter().zip(gg).enumerate() {
                    let c = grp * cpg + j / inner;
                    let xhat = (v - m) * r;
                    let d = go * gam[c];
                    dx[gi * span + j] = r * (d - sum_d / n - xhat * sum_dx / n);
                }
            }
            emit(*x, dx);
            emit(*gamma, dgamma);
            emit(*beta, dbeta);
        }
        Op::L1Loss { pred, target } => {
            let (p, t) = (val(nodes, *pred).data(), val(nodes, *target).data());
            let n = p.len().max(1) as f64;
            let d: Vec<f64> = p.iter().zip(t).map(|(p, t)| g[0] * sign(p - t) / n).collect();
            emit(*target, d.iter().map(|v| -v).collect());
            emit(*pred, d);
        }
        Op::MseLoss { pred, target } => {
            let (p, t) = (val(nodes, *pred).data(), val(nodes, *target).data());
            let n = p.len().max(1) as f64;
            let d: Vec<f64> = p.iter().zip(t).map(|(p, t)| g[0] * 2.0 * (p - t) / n).collect();
            emit(*target, d.iter().map(|v| -v).collect());
            emit(*pred, d);
        }
        Op::Concat { parts, channels } => {
            let batch = out.shape()[0];
            let total: usize = channels.iter().sum();
            let inner = out.numel() / (batch * total).max(1);
            let mut offset = 0;
            for (&p, &c) in parts.iter().zip(channels) {
                let mut d = Vec::with_capacity(batch * c * inner);
                for b in 0..batch {
                    let start = (b * total + offset) * inner;
                    d.extend_from_slice(&g[start..start + c * inner]);
                }
                emit(p, d);
                offset += c;
            }
        }
        Op::SliceChannels { x, start } => {
            let xs = val(nodes, *x).shape();
            let inner: usize = xs[2..].iter().product();
            let len = out.shape()[1];
            let mut d = vec![0.0; val(nodes, *x).numel()];
            for b in 0..xs[0] {
                let dst = (b * xs[1] + start) * inner;
                let src = b * len * inner;
                d[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            emit(*x, d);
        }
        Op::Upsample2x(x) => {
            let xs = val(nodes, *x).shape();
            let (d, h, w) = (xs[2], xs[3], xs[4]);
            let planes = xs[0] * xs[1];
            let mut dx = vec![0.0; planes * d * h * w];
            for p in 0..planes {
                let src = &g[p * 8 * d * h * w..(p + 1) * 8 * d * h * w];
                let dst = &mut dx[p * d * h * w..(p + 1) * d * h * w];
                for z in 0..2 * d {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[((z / 2) * h + y / 2) * w + xx / 2] +=
                                src[(z * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
            }
            emit(*x, dx);
        }
        Op::Reshape(x) => emit(*x, g.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zb = tape.constant(t(&[2], &[0.0, 0.0]));
        assert_eq!(linear(&x, &eye, Some(&zb)).unwrap().value().data(), &[1.0, 2.0]);

        let ones = tape.constant(t(&[1, 2], &[1.0, 1.0]));
        let w = tape.constant(t(&[2, 2], &[2.0, 3.0, 4.0, 5.0]));
        let b = tape.constant(t(&[2], &[1.0, 1.0]));
        assert_eq!(linear(&ones, &w, Some(&b)).unwrap().value().data(), &[7.0, 9.0]);

        let zero = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let b56 = tape.constant(t(&[2], &[5.0, 6.0]));
        assert_eq!(linear(&zero, &w, Some(&b56)).unwrap().value().data(), &[5.0, 6.0]);

        let bad = tape.constant(t(&[3, 2], &[0.0; 6]));
        assert!(linear(&x, &bad, None).is_err());
    }

    #[test]
    fn conv_examples() {
        let tape = Tape::new();
        let data: Vec<f64> = (0..2 * 27).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = tape.constant(t(&[1, 2, 3, 3, 3], &data));
        let eye = tape.constant(t(&[2, 2, 1, 1, 1], &[1.0, 0.0, 0.0, 1.0]));
        assert_eq!(conv3d(&x, &eye, 1, 0).unwrap().value().data(), &data[..]);

        let ones = tape.constant(Tensor::ones([1, 1, 5, 5, 5]));
        let k = tape.constant(Tensor::ones([1, 1, 3, 3, 3]));
        let y = conv3d(&ones, &k, 1, 1).unwrap();
        assert_eq!(y.value().data()[2 * 25 + 2 * 5 + 2], 27.0);
        // corners see only 2x2x2 in-range taps
        assert_eq!(y.value().data()[0], 8.0);

        let kz = tape.constant(Tensor::zeros([3, 2, 3, 3, 3]));
        let y = conv3d(&x, &kz, 1, 1).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            conv3d(&x, &kz, 0, 1),
            Err(crate::Error::InvalidStride(0))
        ));
    }

    #[test]
    fn silu_values() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 1.0, 40.0]));
        let y = silu(&x);
        let y = y.value();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((y.data()[2] - 40.0).abs() < 1e-12);
    }

    #[test]
    fn group_norm_examples() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full([2, 4, 3], 2.5));
        let g1 = tape.constant(Tensor::ones([4]));
        let b0 = tape.constant(Tensor::zeros([4]));
        let y = group_norm(&x, 2, &g1, &b0, 1e-5).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));

        let g0 = tape.constant(Tensor::zeros([4]));
        let b7 = tape.constant(Tensor::full([4], 7.0));
        let y = group_norm(&x, 2, &g0, &b7, 1e-5).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 7.0));

        let data: Vec<f64> = (0..24).map(|i| ((i * 7919) % 23) as f64 * 0.37 - 1.1).collect();
        let xr = tape.constant(t(&[2, 4, 3], &data));
        let y = group_norm(&xr, 2, &g1, &b0, 1e-5).unwrap();
        for chunk in y.value().data().chunks(6) {
            let m: f64 = chunk.iter().sum::<f64>() / 6.0;
            assert!(m.abs() < 1e-10);
        }
        assert!(group_norm(&xr, 3, &g1, &b0, 1e-5).is_err());
    }

    #[test]
    fn l1_examples() {
        let tape = Tape::new();
        let p = tape.leaf(t(&[2], &[1.0, -1.0]).with_requires_grad(true));
        let z = tape.constant(Tensor::zeros([2]));
        let loss = l1_loss(&p, &z).unwrap();
        assert_eq!(loss.item(), Some(1.0));
        let same = l1_loss(&z, &z).unwrap();
        assert_eq!(same.item(), Some(0.0));

        let tape = Tape::new();
        let p = tape.leaf(t(&[1], &[2.0]).with_requires_grad(true));
        let z = tape.constant(Tensor::zeros([1]));
        l1_loss(&p, &z).unwrap().backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![1.0]);

        let tape = Tape::new();
        let p = tape.leaf(t(&[1], &[0.0]).with_requires_grad(true));
        let z = tape.constant(Tensor::zeros([1]));
        l1_loss(&p, &z).unwrap().backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![0.0]);
        assert!(l1_loss(&p, &tape.constant(Tensor::zeros([2]))).is_err());
    }

    #[test]
    fn upsample_repeats_voxels() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1, 1, 2], &[3.0, 4.0]));
        let y = upsample_nearest2x(&x).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 2, 2, 4]);
        assert_eq!(&y.value().data()[..4], &[3.0, 3.0, 4.0, 4.0]);
    }
}
