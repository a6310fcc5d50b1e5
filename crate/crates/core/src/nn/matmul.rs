use crate::error::{shape_err, Result};
use crate::float::Float;
use crate::tensor::Tensor;

fn dims3<T: Float>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [b, r, c] => Ok((b, r, c)),
        _ => Err(shape_err(
            op,
            format!("expected rank 3, got {:?}", t.shape()),
        )),
    }
}

/// Batched matrix product of `(b, m, k)` by `(b, k, n)`. `trans_a` / `trans_b`
/// read the stored operand transposed.
pub fn batched_matmul<T: Float>(
    a: &Tensor<T>,
    trans_a: bool,
    b: &Tensor<T>,
    trans_b: bool,
) -> Result<Tensor<T>> {
    let (ba, ar, ac) = dims3(a, "batched_matmul")?;
    let (bb, br, bc) = dims3(b, "batched_matmul")?;
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
    if ba != bb || k != k2 {
        return Err(shape_err(
            "batched_matmul",
            format!(
                "{:?}{} x {:?}{}",
                a.shape(),
                if trans_a { "ᵀ" } else { "" },
                b.shape(),
                if trans_b { "ᵀ" } else { "" }
            ),
        ));
    }
    let (rsa, csa) = if trans_a { (1, ac) } else { (ac, 1) };
    let (rsb, csb) = if trans_b { (1, bc) } else { (bc, 1) };
    let mut out = Tensor::zeros(&[ba, m, n]);
    for i in 0..ba {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &a.data()[i * ar * ac..(i + 1) * ar * ac],
            rsa,
            csa,
            &b.data()[i * br * bc..(i + 1) * br * bc],
            rsb,
            csb,
            T::zero(),
            &mut out.data_mut()[i * m * n..(i + 1) * m * n],
            n,
            1,
        );
    }
    Ok(out)
}

/// Gradients `(da, db)` of [`batched_matmul`], in the stored layouts of `a` and `b`.
pub fn batched_matmul_backward<T: Float>(
    a: &Tensor<T>,
    trans_a: bool,
    b: &Tensor<T>,
    trans_b: bool,
    dc: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let da = if trans_a {
        batched_matmul(b, trans_b, dc, true)?
    } else {
        batched_matmul(dc, false, b, !trans_b)?
    };
    let db = if trans_b {
        batched_matmul(dc, true, a, trans_a)?
    } else {
        batched_matmul(a, !trans_a, dc, false)?
    };
    Ok((da, db))
}

/// Flop-relevant multiply-accumulate count of [`batched_matmul`].
pub fn matmul_macs(batch: usize, m: usize, k: usize, n: usize) -> u64 {
    (batch * m * k * n) as u64
}
