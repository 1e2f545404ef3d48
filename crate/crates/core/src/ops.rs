//! Fused CPU kernels for the hot broadcast patterns of the backbone, with
//! backward passes that reduce over contiguous rows instead of going through
//! candle's strided reductions.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor, WithDType};

use crate::error::Result;

type CResult<T> = candle_core::Result<T>;

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> CResult<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("fused op needs a contiguous input"),
    }
}

/// `(G, S, D)` and `(G, 1, D)` layouts; returns `(G, S, D)`.
fn row_dims(lx: &Layout, lb: &Layout) -> CResult<(usize, usize, usize)> {
    let (g, s, d) = lx.shape().dims3()?;
    if lb.shape().dims() != [g, 1, d] {
        candle_core::bail!(
            "row operand {:?} does not match {:?}",
            lb.shape(),
            lx.shape()
        );
    }
    Ok((g, s, d))
}

fn row_map<T: WithDType>(
    x: &[T],
    b: &[T],
    (g, s, d): (usize, usize, usize),
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for gi in 0..g {
        let row = &b[gi * d..(gi + 1) * d];
        for si in 0..s {
            let base = (gi * s + si) * d;
            out.extend(x[base..base + d].iter().zip(row).map(|(&a, &c)| f(a, c)));
        }
    }
    out
}

macro_rules! dispatch2 {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, $dims:expr, $f:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(x), CpuStorage::F32(b)) => {
                CpuStorage::F32(row_map(contiguous(x, $l1)?, contiguous(b, $l2)?, $dims, $f))
            }
            (CpuStorage::F64(x), CpuStorage::F64(b)) => {
                CpuStorage::F64(row_map(contiguous(x, $l1)?, contiguous(b, $l2)?, $dims, $f))
            }
            _ => candle_core::bail!("fused op supports matching f32 or f64 inputs"),
        }
    };
}

struct RowAdd;

impl CustomOp2 for RowAdd {
    fn name(&self) -> &'static str {
        "row-add"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let dims = row_dims(l1, l2)?;
        Ok((
            dispatch2!(s1, l1, s2, l2, dims, |a, c| a + c),
            l1.shape().clone(),
        ))
    }

    fn bwd(
        &self,
        _x: &Tensor,
        _b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        Ok((Some(grad.clone()), Some(sum_rows(grad)?)))
    }
}

struct RowMul;

impl CustomOp2 for RowMul {
    fn name(&self) -> &'static str {
        "row-mul"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let dims = row_dims(l1, l2)?;
        Ok((
            dispatch2!(s1, l1, s2, l2, dims, |a, c| a * c),
            l1.shape().clone(),
        ))
    }

    fn bwd(
        &self,
        x: &Tensor,
        m: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gx = grad.apply_op2_no_bwd(m, &RowMul)?;
        let gm = sum_rows(&(&grad * x)?)?;
        Ok((Some(gx), Some(gm)))
    }
}

fn sum_rows_vec<T: WithDType>(x: &[T], g: usize, s: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); g * d];
    for gi in 0..g {
        let acc = &mut out[gi * d..(gi + 1) * d];
        for si in 0..s {
            let base = (gi * s + si) * d;
            for (o, &v) in acc.iter_mut().zip(&x[base..base + d]) {
                *o += v;
            }
        }
    }
    out
}

struct SumRows;

impl CustomOp1 for SumRows {
    fn name(&self) -> &'static str {
        "sum-rows"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (g, s, d) = layout.shape().dims3()?;
        let out = match storage {
            CpuStorage::F32(x) => CpuStorage::F32(sum_rows_vec(contiguous(x, layout)?, g, s, d)),
            CpuStorage::F64(x) => CpuStorage::F64(sum_rows_vec(contiguous(x, layout)?, g, s, d)),
            _ => candle_core::bail!("sum-rows supports f32 or f64"),
        };
        Ok((out, Shape::from((g, 1, d))))
    }
}

/// `(G, S, D) -> (G, 1, D)` sum over the middle axis; not differentiable.
fn sum_rows(x: &Tensor) -> CResult<Tensor> {
    x.contiguous()?.apply_op1_no_bwd(&SumRows)
}

const GELU_K: f64 = 1.702;

struct Gelu;

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "gelu-sigmoid"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> CResult<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(x) => {
                let k = GELU_K as f32;
                CpuStorage::F32(
                    contiguous(x, layout)?
                        .iter()
                        .map(|&v| v / (1.0 + (-k * v).exp()))
                        .collect(),
                )
            }
            CpuStorage::F64(x) => CpuStorage::F64(
                contiguous(x, layout)?
                    .iter()
                    .map(|&v| v / (1.0 + (-GELU_K * v).exp()))
                    .collect(),
            ),
            _ => candle_core::bail!("gelu supports f32 or f64"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(x.apply_op2_no_bwd(&grad.contiguous()?, &GeluGrad)?))
    }
}

/// `grad · d/dx [x·σ(kx)]`, elementwise over `(x, grad)`.
struct GeluGrad;

impl CustomOp2 for GeluGrad {
    fn name(&self) -> &'static str {
        "gelu-sigmoid-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                let k = GELU_K as f32;
                let (x, g) = (contiguous(x, l1)?, contiguous(g, l2)?);
                CpuStorage::F32(
                    x.iter()
                        .zip(g)
                        .map(|(&v, &gr)| {
                            let s = 1.0 / (1.0 + (-k * v).exp());
                            gr * (s + k * v * s * (1.0 - s))
                        })
                        .collect(),
                )
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                let (x, g) = (contiguous(x, l1)?, contiguous(g, l2)?);
                CpuStorage::F64(
                    x.iter()
                        .zip(g)
                        .map(|(&v, &gr)| {
                            let s = 1.0 / (1.0 + (-GELU_K * v).exp());
                            gr * (s + GELU_K * v * s * (1.0 - s))
                        })
                        .collect(),
                )
            }
            _ => candle_core::bail!("gelu grad supports matching f32 or f64 inputs"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// `x + b` for `x: (G, S, D)` and `b: (G, 1, D)`.
pub fn add_rows(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op2(&b.contiguous()?, RowAdd)?)
}

/// `x * m` for `x: (G, S, D)` and `m: (G, 1, D)`.
pub fn mul_rows(x: &Tensor, m: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op2(&m.contiguous()?, RowMul)?)
}

/// GELU in its sigmoid form, `x·σ(1.702x)`.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Gelu)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(
            crate::rng::SeededRng::new(seed).normal_vec_f64(n),
            shape,
            &Device::Cpu,
        )
        .unwrap()
    }

    fn close(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    #[test]
    fn fused_ops_match_reference_values_and_gradients() {
        let x = Var::from_tensor(&rand(&[2, 5, 3], 1)).unwrap();
        let b = Var::from_tensor(&rand(&[2, 1, 3], 2)).unwrap();
        let w = rand(&[2, 5, 3], 3);
        let fused = (mul_rows(
            &add_rows(x.as_tensor(), b.as_tensor()).unwrap(),
            b.as_tensor(),
        )
        .unwrap()
            * &w)
            .unwrap()
            .sum_all()
            .unwrap();
        let plain = (x
            .as_tensor()
            .broadcast_add(b.as_tensor())
            .unwrap()
            .broadcast_mul(b.as_tensor())
            .unwrap()
            * &w)
            .unwrap()
            .sum_all()
            .unwrap();
        assert!(close(&fused, &plain) < 1e-12);
        let (gf, gp) = (fused.backward().unwrap(), plain.backward().unwrap());
        for v in [&x, &b] {
            assert!(close(gf.get(v).unwrap(), gp.get(v).unwrap()) < 1e-12);
        }

        let y = gelu(x.as_tensor()).unwrap();
        let k = x
            .as_tensor()
            .affine(-GELU_K, 0.0)
            .unwrap()
            .exp()
            .unwrap()
            .affine(1.0, 1.0)
            .unwrap();
        let reference = (x.as_tensor() / k).unwrap();
        assert!(close(&y, &reference) < 1e-12);
        let (gf, gp) = (
            (&y * &w).unwrap().sum_all().unwrap().backward().unwrap(),
            (&reference * &w)
                .unwrap()
                .sum_all()
                .unwrap()
                .backward()
                .unwrap(),
        );
        assert!(close(gf.get(&x).unwrap(), gp.get(&x).unwrap()) < 1e-12);
    }
}
