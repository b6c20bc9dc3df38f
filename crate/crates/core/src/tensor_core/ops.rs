//! Exact contraction, softmax and concatenation primitives.
//!
//! Layout conventions (row-major):
//! - queries `[b, g, p, n, k]`, per-batch keys `[b, g, m, k]`, shared keys `[g, m, k]`
//! - logits / weights `[b, g, p, n, m]`
//! - per-batch values `[b, g, m, v]`, shared values `[g, m, v]`, output `[b, g, p, n, v]`
//!
//! Every contraction sums left to right over the contracted axis. The shared
//! and per-batch variants run the same inner loop with a zero batch stride
//! on the key/value operand, so they agree bit for bit.

use rayon::prelude::*;

use super::ledger::{Access, IoLedger, Operand};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

fn expect_rank<T: Scalar>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::RankMismatch {
            op,
            expected: rank,
            found: t.rank(),
        });
    }
    Ok(())
}

fn expect_axis(op: &'static str, axis: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::ShapeMismatch {
            op,
            axis,
            expected,
            found,
        });
    }
    Ok(())
}

#[derive(Clone, Copy)]
struct QkDims {
    b: usize,
    g: usize,
    p: usize,
    n: usize,
    m: usize,
    k: usize,
    /// Elements between consecutive batch entries of the key operand (0 when shared).
    kv_batch_stride: usize,
}

fn qk_kernel<T: Scalar>(q: &[T], keys: &[T], out: &mut [T], d: QkDims) {
    let block = d.p * d.n * d.m;
    if block == 0 {
        return;
    }
    out.par_chunks_mut(block)
        .enumerate()
        .for_each(|(bg, out_block)| {
            let (bi, gi) = (bg / d.g, bg % d.g);
            let q_block = &q[bg * d.p * d.n * d.k..][..d.p * d.n * d.k];
            let k_block = &keys[bi * d.kv_batch_stride + gi * d.m * d.k..][..d.m * d.k];
            for (row, out_row) in out_block.chunks_exact_mut(d.m).enumerate() {
                let q_row = &q_block[row * d.k..][..d.k];
                for (mi, o) in out_row.iter_mut().enumerate() {
                    let k_row = &k_block[mi * d.k..][..d.k];
                    let mut acc = T::zero();
                    for (&a, &c) in q_row.iter().zip(k_row) {
                        acc = acc + a * c;
                    }
                    *o = acc;
                }
            }
        });
}

#[derive(Clone, Copy)]
struct WvDims {
    b: usize,
    g: usize,
    p: usize,
    n: usize,
    m: usize,
    v: usize,
    kv_batch_stride: usize,
}

/// Adds `Σ_m w·V` onto `out`, continuing each output element's running sum.
fn wv_kernel<T: Scalar>(w: &[T], values: &[T], out: &mut [T], d: WvDims) {
    let block = d.p * d.n * d.v;
    if block == 0 {
        return;
    }
    out.par_chunks_mut(block)
        .enumerate()
        .for_each(|(bg, out_block)| {
            let (bi, gi) = (bg / d.g, bg % d.g);
            let w_block = &w[bg * d.p * d.n * d.m..][..d.p * d.n * d.m];
            let v_block = &values[bi * d.kv_batch_stride + gi * d.m * d.v..][..d.m * d.v];
            for (row, out_row) in out_block.chunks_exact_mut(d.v).enumerate() {
                let w_row = &w_block[row * d.m..][..d.m];
                for (vi, o) in out_row.iter_mut().enumerate() {
                    let mut acc = *o;
                    for (mi, &wm) in w_row.iter().enumerate() {
                        acc = acc + wm * v_block[mi * d.v + vi];
                    }
                    *o = acc;
                }
            }
        });
}

fn qk_dims<T: Scalar>(op: &'static str, q: &Tensor<T>) -> Result<[usize; 5]> {
    expect_rank(op, q, 5)?;
    let s = q.shape();
    Ok([s[0], s[1], s[2], s[3], s[4]])
}

/// `logits[b,g,p,n,m] = Σ_k q[b,g,p,n,k]·K[b,g,m,k]`.
pub fn contract_qk<T: Scalar>(
    q: &Tensor<T>,
    keys: &Tensor<T>,
    ledger: &mut IoLedger,
) -> Result<Tensor<T>> {
    const OP: &str = "contract_qk";
    let [b, g, p, n, k] = qk_dims(OP, q)?;
    expect_rank(OP, keys, 4)?;
    let ks = keys.shape();
    expect_axis(OP, "b", b, ks[0])?;
    expect_axis(OP, "g", g, ks[1])?;
    expect_axis(OP, "k", k, ks[3])?;
    let m = ks[2];
    let mut out = vec![T::zero(); b * g * p * n * m];
    let dims = QkDims {
        b,
        g,
        p,
        n,
        m,
        k,
        kv_batch_stride: g * m * k,
    };
    qk_kernel(q.data(), keys.data(), &mut out, dims);
    let w = q.elem_width_bytes();
    ledger.record(
        "qk",
        &[
            Access::new(Operand::Activation, q.len(), w),
            Access::new(Operand::Key, keys.len(), keys.elem_width_bytes()),
        ],
        &[Access::new(Operand::Activation, out.len(), w)],
        2 * (dims.b * g * p * n * m * k) as u64,
    );
    Ok(Tensor::from_parts(vec![b, g, p, n, m], out, w))
}

/// Context branch of query-key attention: one `[g, m_c, k]` key tensor
/// shared by every batch index. The shared keys are read once.
pub fn contract_qk_shared<T: Scalar>(
    q: &Tensor<T>,
    keys_ctx: &Tensor<T>,
    ledger: &mut IoLedger,
) -> Result<Tensor<T>> {
    const OP: &str = "contract_qk_shared";
    let [b, g, p, n, k] = qk_dims(OP, q)?;
    expect_rank(OP, keys_ctx, 3)?;
    let ks = keys_ctx.shape();
    expect_axis(OP, "g", g, ks[0])?;
    expect_axis(OP, "k", k, ks[2])?;
    let m = ks[1];
    let mut out = vec![T::zero(); b * g * p * n * m];
    let dims = QkDims {
        b,
        g,
        p,
        n,
        m,
        k,
        kv_batch_stride: 0,
    };
    qk_kernel(q.data(), keys_ctx.data(), &mut out, dims);
    let w = q.elem_width_bytes();
    ledger.record(
        "qk_ctx",
        &[
            Access::new(Operand::Activation, q.len(), w),
            Access::new(Operand::Key, keys_ctx.len(), keys_ctx.elem_width_bytes()),
        ],
        &[Access::new(Operand::Activation, out.len(), w)],
        2 * (b * g * p * n * m * k) as u64,
    );
    Ok(Tensor::from_parts(vec![b, g, p, n, m], out, w))
}

fn wv_check<T: Scalar>(
    op: &'static str,
    w: &Tensor<T>,
    values: &Tensor<T>,
    shared: bool,
) -> Result<WvDims> {
    expect_rank(op, w, 5)?;
    let ws = w.shape();
    let (b, g, p, n, m) = (ws[0], ws[1], ws[2], ws[3], ws[4]);
    let v = if shared {
        expect_rank(op, values, 3)?;
        let vs = values.shape();
        expect_axis(op, "g", g, vs[0])?;
        expect_axis(op, "m", m, vs[1])?;
        vs[2]
    } else {
        expect_rank(op, values, 4)?;
        let vs = values.shape();
        expect_axis(op, "b", b, vs[0])?;
        expect_axis(op, "g", g, vs[1])?;
        expect_axis(op, "m", m, vs[2])?;
        vs[3]
    };
    Ok(WvDims {
        b,
        g,
        p,
        n,
        m,
        v,
        kv_batch_stride: if shared { 0 } else { g * m * v },
    })
}

/// `out[b,g,p,n,v] = Σ_m w[b,g,p,n,m]·V[b,g,m,v]`.
pub fn contract_wv<T: Scalar>(
    w: &Tensor<T>,
    values: &Tensor<T>,
    ledger: &mut IoLedger,
) -> Result<Tensor<T>> {
    let d = wv_check("contract_wv", w, values, false)?;
    let mut out = vec![T::zero(); d.b * d.g * d.p * d.n * d.v];
    wv_kernel(w.data(), values.data(), &mut out, d);
    let width = w.elem_width_bytes();
    ledger.record(
        "wv",
        &[
            Access::new(Operand::Activation, w.len(), width),
            Access::new(Operand::Value, values.len(), values.elem_width_bytes()),
        ],
        &[Access::new(Operand::Activation, out.len(), width)],
        2 * (d.b * d.g * d.p * d.n * d.m * d.v) as u64,
    );
    Ok(Tensor::from_parts(
        vec![d.b, d.g, d.p, d.n, d.v],
        out,
        width,
    ))
}

/// Context branch of weight-value attention against one shared
/// `[g, m_c, v]` value tensor, read once.
pub fn contract_wv_shared<T: Scalar>(
    w_ctx: &Tensor<T>,
    values_ctx: &Tensor<T>,
    ledger: &mut IoLedger,
) -> Result<Tensor<T>> {
    let d = wv_check("contract_wv_shared", w_ctx, values_ctx, true)?;
    let mut out = vec![T::zero(); d.b * d.g * d.p * d.n * d.v];
    wv_kernel(w_ctx.data(), values_ctx.data(), &mut out, d);
    let width = w_ctx.elem_width_bytes();
    ledger.record(
        "wv_ctx",
        &[
            Access::new(Operand::Activation, w_ctx.len(), width),
            Access::new(
                Operand::Value,
                values_ctx.len(),
                values_ctx.elem_width_bytes(),
            ),
        ],
        &[Access::new(Operand::Activation, out.len(), width)],
        2 * (d.b * d.g * d.p * d.n * d.m * d.v) as u64,
    );
    Ok(Tensor::from_parts(
        vec![d.b, d.g, d.p, d.n, d.v],
        out,
        width,
    ))
}

/// Per-batch weight-value contraction summed onto a partial output `acc`.
///
/// Each output element continues its running sum from `acc`, which makes
/// `contract_wv_shared` followed by this call reproduce `contract_wv` over
/// the concatenated length exactly. The partial output is read and
/// rewritten, so it is charged as an extra `b·h·n·v` read and write.
pub fn contract_wv_accumulate<T: Scalar>(
    w: &Tensor<T>,
    values: &Tensor<T>,
    acc: &mut Tensor<T>,
    ledger: &mut IoLedger,
) -> Result<()> {
    const OP: &str = "contract_wv_accumulate";
    let d = wv_check(OP, w, values, false)?;
    expect_rank(OP, acc, 5)?;
    let expected = [d.b, d.g, d.p, d.n, d.v];
    for (axis, (&e, &f)) in ["b", "g", "p", "n", "v"]
        .into_iter()
        .zip(expected.iter().zip(acc.shape()))
    {
        expect_axis(OP, axis, e, f)?;
    }
    wv_kernel(w.data(), values.data(), acc.data_mut(), d);
    let width = w.elem_width_bytes();
    ledger.record(
        "wv",
        &[
            Access::new(Operand::Activation, w.len(), width),
            Access::new(Operand::Value, values.len(), values.elem_width_bytes()),
            Access::new(Operand::Activation, acc.len(), width),
        ],
        &[Access::new(Operand::Activation, acc.len(), width)],
        2 * (d.b * d.g * d.p * d.n * d.m * d.v) as u64,
    );
    Ok(())
}

/// Numerically stable softmax over the last axis.
pub fn softmax_lastaxis<T: Scalar>(x: &Tensor<T>, ledger: &mut IoLedger) -> Result<Tensor<T>> {
    let m = *x.shape().last().ok_or(Error::EmptySoftmax)?;
    if m == 0 {
        return Err(Error::EmptySoftmax);
    }
    let mut out = x.data().to_vec();
    out.par_chunks_mut(m).for_each(|row| {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    });
    let w = x.elem_width_bytes();
    ledger.record(
        "softmax",
        &[Access::new(Operand::Activation, x.len(), w)],
        &[Access::new(Operand::Activation, out.len(), w)],
        x.len() as u64,
    );
    Ok(Tensor::from_parts(x.shape().to_vec(), out, w))
}

/// Joins two tensors along the last axis; all leading axes must agree.
pub fn concat_lastaxis<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "concat_lastaxis";
    if a.rank() == 0 {
        return Err(Error::RankMismatch {
            op: OP,
            expected: 1,
            found: 0,
        });
    }
    expect_rank(OP, b, a.rank())?;
    let r = a.rank();
    for i in 0..r - 1 {
        expect_axis(OP, "leading", a.shape()[i], b.shape()[i])?;
    }
    let (m1, m2) = (a.shape()[r - 1], b.shape()[r - 1]);
    let rows: usize = a.shape()[..r - 1].iter().product();
    let mut data = Vec::with_capacity(rows * (m1 + m2));
    for row in 0..rows {
        data.extend_from_slice(&a.data()[row * m1..(row + 1) * m1]);
        data.extend_from_slice(&b.data()[row * m2..(row + 1) * m2]);
    }
    let mut shape = a.shape().to_vec();
    shape[r - 1] = m1 + m2;
    Ok(Tensor::from_parts(shape, data, a.elem_width_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn qk_identity_key() {
        let mut l = IoLedger::new();
        let out = contract_qk(
            &t(&[1, 1, 1, 1, 2], &[1., 0.]),
            &t(&[1, 1, 2, 2], &[1., 0., 0., 1.]),
            &mut l,
        )
        .unwrap();
        assert_eq!(out.data(), &[1., 0.]);
        assert_eq!(l.flops, 2 * 2 * 2);
        assert_eq!(l.elements_read, 2 + 4);
        assert_eq!(l.elements_written, 2);
    }

    #[test]
    fn qk_two_heads_share_one_group() {
        let mut l = IoLedger::new();
        let out = contract_qk(
            &t(&[1, 1, 2, 1, 2], &[1., 0., 0., 1.]),
            &t(&[1, 1, 2, 2], &[1., 0., 1., 1.]),
            &mut l,
        )
        .unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 1, 2]);
        assert_eq!(out.data(), &[1., 1., 0., 1.]);
    }

    #[test]
    fn qk_empty_keys() {
        let mut l = IoLedger::new();
        let out = contract_qk(
            &t(&[1, 1, 1, 1, 2], &[1., 0.]),
            &t(&[1, 1, 0, 2], &[]),
            &mut l,
        )
        .unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1, 0]);
        assert!(out.is_empty());
        assert_eq!(l.flops, 0);
    }

    #[test]
    fn qk_names_offending_axis() {
        let mut l = IoLedger::new();
        let err = contract_qk(
            &t(&[1, 1, 1, 1, 2], &[1., 0.]),
            &t(&[1, 1, 2, 3], &[0.; 6]),
            &mut l,
        )
        .unwrap_err();
        assert!(
            matches!(err, Error::ShapeMismatch { axis: "k", .. }),
            "{err}"
        );
        let err = contract_qk(
            &t(&[2, 1, 1, 1, 2], &[0.; 4]),
            &t(&[1, 1, 2, 2], &[0.; 4]),
            &mut l,
        )
        .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { axis: "b", .. }));
    }

    #[test]
    fn wv_examples() {
        let mut l = IoLedger::new();
        let v = t(&[1, 1, 2, 2], &[3., 4., 5., 6.]);
        let out = contract_wv(&t(&[1, 1, 1, 1, 2], &[1., 0.]), &v, &mut l).unwrap();
        assert_eq!(out.data(), &[3., 4.]);
        let v = t(&[1, 1, 2, 2], &[2., 0., 0., 2.]);
        let out = contract_wv(&t(&[1, 1, 1, 1, 2], &[0.5, 0.5]), &v, &mut l).unwrap();
        assert_eq!(out.data(), &[1., 1.]);
        let out = contract_wv(&t(&[1, 1, 1, 1, 2], &[0., 0.]), &v, &mut l).unwrap();
        assert_eq!(out.data(), &[0., 0.]);
        assert!(contract_wv(&t(&[1, 1, 1, 1, 3], &[0.; 3]), &v, &mut l).is_err());
    }

    #[test]
    fn shared_qk_broadcasts_over_batch() {
        let mut l = IoLedger::new();
        let out = contract_qk_shared(
            &t(&[2, 1, 1, 1, 2], &[2., 0., 0., 2.]),
            &t(&[1, 2, 2], &[1., 0., 0., 1.]),
            &mut l,
        )
        .unwrap();
        assert_eq!(out.data(), &[2., 0., 0., 2.]);

        let out = contract_qk_shared(
            &t(&[3, 1, 1, 1, 2], &[0.3, -1., 0.3, -1., 0.3, -1.]),
            &t(&[1, 2, 2], &[1., 2., 3., 4.]),
            &mut l,
        )
        .unwrap();
        assert_eq!(out.data()[0..2], out.data()[2..4]);
        assert_eq!(out.data()[0..2], out.data()[4..6]);
    }

    #[test]
    fn shared_qk_reads_context_once() {
        let (b, g, m_c, k) = (4, 1, 8, 2);
        let mut l = IoLedger::new();
        contract_qk_shared(
            &Tensor::<f64>::zeros([b, g, 1, 1, k]),
            &Tensor::<f64>::zeros([g, m_c, k]),
            &mut l,
        )
        .unwrap();
        assert_eq!(l.reads_of(Operand::Key), 16);
        assert_eq!(l.reads_of(Operand::Activation), (b * k) as u64);
    }

    #[test]
    fn shared_wv_examples() {
        let mut l = IoLedger::new();
        let vc = t(&[1, 2, 2], &[4., 0., 0., 4.]);
        let out = contract_wv_shared(&t(&[1, 1, 1, 1, 2], &[0.5, 0.25]), &vc, &mut l).unwrap();
        assert_eq!(out.data(), &[2., 1.]);
        let out = contract_wv_shared(&t(&[1, 1, 1, 1, 2], &[0., 0.]), &vc, &mut l).unwrap();
        assert_eq!(out.data(), &[0., 0.]);
        let out =
            contract_wv_shared(&t(&[2, 1, 1, 1, 2], &[0.3, 0.7, 0.3, 0.7]), &vc, &mut l).unwrap();
        assert_eq!(out.data()[0..2], out.data()[2..4]);
        assert_eq!(l.reads_of(Operand::Value), 12);
    }

    #[test]
    fn accumulate_continues_running_sum() {
        let mut l = IoLedger::new();
        let mut acc = t(&[1, 1, 1, 1, 2], &[1., 2.]);
        contract_wv_accumulate(
            &t(&[1, 1, 1, 1, 1], &[0.5]),
            &t(&[1, 1, 1, 2], &[2., 4.]),
            &mut acc,
            &mut l,
        )
        .unwrap();
        assert_eq!(acc.data(), &[2., 4.]);
        assert_eq!(l.elements_read, 1 + 2 + 2);
    }

    #[test]
    fn softmax_examples() {
        let mut l = IoLedger::new();
        assert_eq!(
            softmax_lastaxis(&t(&[2], &[0., 0.]), &mut l)
                .unwrap()
                .data(),
            &[0.5, 0.5]
        );
        assert_eq!(
            softmax_lastaxis(&t(&[2], &[1000., 1000.]), &mut l)
                .unwrap()
                .data(),
            &[0.5, 0.5]
        );
        let s = softmax_lastaxis(&t(&[2], &[1f64.ln(), 3f64.ln()]), &mut l).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
        assert!(matches!(
            softmax_lastaxis(&t(&[2, 0], &[]), &mut l),
            Err(Error::EmptySoftmax)
        ));
    }

    #[test]
    fn concat_examples() {
        let out = concat_lastaxis(&t(&[2], &[1., 2.]), &t(&[1], &[3.])).unwrap();
        assert_eq!(out.data(), &[1., 2., 3.]);
        let b = t(&[1], &[9.]);
        assert_eq!(concat_lastaxis(&t(&[0], &[]), &b).unwrap(), b);
        let out = concat_lastaxis(&t(&[2, 2], &[1., 2., 3., 4.]), &t(&[2, 1], &[5., 6.])).unwrap();
        assert_eq!(out.shape(), &[2, 3]);
        assert_eq!(out.data(), &[1., 2., 5., 3., 4., 6.]);
        assert!(concat_lastaxis(&t(&[2, 2], &[0.; 4]), &t(&[3, 1], &[0.; 3])).is_err());
    }
}
