//! Differentiable primitives that candle-nn only ships forward kernels for.

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor, D};
use num_traits::Float;

use crate::error::Result;

struct SoftmaxLastDim;

fn softmax_rows<T: Float>(src: &[T], dim: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for (row, dst) in src.chunks(dim).zip(out.chunks_mut(dim)) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            sum = sum + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / sum;
        }
    }
    out
}

impl CustomOp1 for SoftmaxLastDim {
    fn name(&self) -> &'static str {
        "softmax-last-dim-bwd"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dim = *layout.dims().last().unwrap_or(&1);
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("softmax input must be contiguous".into()))?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(softmax_rows(&v[start..end], dim)),
            CpuStorage::F64(v) => CpuStorage::F64(softmax_rows(&v[start..end], dim)),
            other => candle_core::bail!("softmax not implemented for {:?}", candle_core::backend::BackendStorage::dtype(other)),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let dot = (grad_res * res)?.sum_keepdim(D::Minus1)?;
        let grad = (grad_res.broadcast_sub(&dot)? * res)?;
        Ok(Some(grad))
    }
}

/// Softmax over the last dimension with an analytic backward pass.
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let x = x.contiguous()?;
    Ok(x.apply_op1(SoftmaxLastDim)?)
}

/// Tanh-approximated GELU and its derivative, evaluated elementwise in one pass.
/// candle's own backward for this op goes through `powf`, `tanh` and several
/// temporaries, which dominates a training step of the small models here.
struct Gelu;
struct GeluGrad;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn gelu_value<T: Float>(x: T) -> T {
    let k = T::from(SQRT_2_OVER_PI).unwrap();
    let c = T::from(GELU_CUBIC).unwrap();
    let half = T::from(0.5).unwrap();
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_derivative<T: Float>(x: T) -> T {
    let k = T::from(SQRT_2_OVER_PI).unwrap();
    let c = T::from(GELU_CUBIC).unwrap();
    let half = T::from(0.5).unwrap();
    let three = T::from(3.0).unwrap();
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + three * c * x * x)
}

fn map_elementwise(
    storage: &CpuStorage,
    layout: &Layout,
    f32_fn: fn(f32) -> f32,
    f64_fn: fn(f64) -> f64,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("gelu input must be contiguous".into()))?;
    let out = match storage {
        CpuStorage::F32(v) => CpuStorage::F32(v[start..end].iter().map(|&x| f32_fn(x)).collect()),
        CpuStorage::F64(v) => CpuStorage::F64(v[start..end].iter().map(|&x| f64_fn(x)).collect()),
        other => candle_core::bail!("gelu not implemented for {:?}", candle_core::backend::BackendStorage::dtype(other)),
    };
    Ok((out, layout.shape().clone()))
}

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "gelu-tanh-fused"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        map_elementwise(storage, layout, gelu_value::<f32>, gelu_value::<f64>)
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let slope = arg.contiguous()?.apply_op1_no_bwd(&GeluGrad)?;
        Ok(Some(grad_res.mul(&slope)?))
    }
}

impl CustomOp1 for GeluGrad {
    fn name(&self) -> &'static str {
        "gelu-tanh-derivative"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        map_elementwise(storage, layout, gelu_derivative::<f32>, gelu_derivative::<f64>)
    }
}

/// Tanh-approximated GELU (same values as candle's `gelu`) with a fused backward pass.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Gelu)?)
}

/// `(x - mean) / sqrt(var + eps)` over the last dimension (population variance),
/// with the analytic backward `(g - mean(g) - y * mean(g * y)) / sqrt(var + eps)`.
struct Standardize {
    eps: f64,
}

fn standardize_rows<T: Float>(src: &[T], dim: usize, eps: f64) -> Vec<T> {
    let n = T::from(dim).unwrap();
    let eps = T::from(eps).unwrap();
    let mut out = vec![T::zero(); src.len()];
    for (row, dst) in src.chunks(dim).zip(out.chunks_mut(dim)) {
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
        let inv = T::one() / (var + eps).sqrt();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - mean) * inv;
        }
    }
    out
}

fn standardize_grad_rows<T: Float>(x: &[T], y: &[T], g: &[T], dim: usize, eps: f64) -> Vec<T> {
    let n = T::from(dim).unwrap();
    let eps = T::from(eps).unwrap();
    let mut out = vec![T::zero(); x.len()];
    for (((xr, yr), gr), dst) in x.chunks(dim).zip(y.chunks(dim)).zip(g.chunks(dim)).zip(out.chunks_mut(dim)) {
        let mean = xr.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = xr.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
        let inv = T::one() / (var + eps).sqrt();
        let g_mean = gr.iter().fold(T::zero(), |a, &v| a + v) / n;
        let gy_mean = gr.iter().zip(yr).fold(T::zero(), |a, (&gv, &yv)| a + gv * yv) / n;
        for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
            *d = (gv - g_mean - yv * gy_mean) * inv;
        }
    }
    out
}

impl CustomOp1 for Standardize {
    fn name(&self) -> &'static str {
        "standardize-last-dim"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dim = *layout.dims().last().unwrap_or(&1);
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("standardize input must be contiguous".into()))?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(standardize_rows(&v[start..end], dim, self.eps)),
            CpuStorage::F64(v) => CpuStorage::F64(standardize_rows(&v[start..end], dim, self.eps)),
            other => candle_core::bail!("standardize not implemented for {:?}", candle_core::backend::BackendStorage::dtype(other)),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let dim = arg.dim(D::Minus1)?;
        let (x, y, g) = (arg.contiguous()?, res.contiguous()?, grad_res.contiguous()?);
        let grad = match x.dtype() {
            DType::F32 => {
                let (xv, yv, gv) = (x.flatten_all()?.to_vec1::<f32>()?, y.flatten_all()?.to_vec1::<f32>()?, g.flatten_all()?.to_vec1::<f32>()?);
                Tensor::from_vec(standardize_grad_rows(&xv, &yv, &gv, dim, self.eps), x.shape(), x.device())?
            }
            DType::F64 => {
                let (xv, yv, gv) = (x.flatten_all()?.to_vec1::<f64>()?, y.flatten_all()?.to_vec1::<f64>()?, g.flatten_all()?.to_vec1::<f64>()?);
                Tensor::from_vec(standardize_grad_rows(&xv, &yv, &gv, dim, self.eps), x.shape(), x.device())?
            }
            other => candle_core::bail!("standardize not implemented for {other:?}"),
        };
        Ok(Some(grad))
    }
}

/// Normalizes each row of the last dimension to zero mean and unit variance.
pub fn standardize_last_dim(x: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Standardize { eps })?)
}

/// `log_softmax` over the last dimension, built from differentiable primitives.
pub fn log_softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Additive attention bias from a `B × T` visibility tensor (1 = visible):
/// 0 for visible keys, a large negative value for hidden ones; shape `B × 1 × 1 × T`.
pub fn key_bias(visible: &Tensor) -> Result<Tensor> {
    let (b, t) = visible.dims2()?;
    let bias = ((visible.to_dtype(DType::F32)? - 1.0)? * 1e9)?;
    Ok(bias.reshape((b, 1, 1, t))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn matches_composed_softmax_and_its_gradient() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (3, 5), &dev).unwrap()).unwrap();
        let w = Tensor::randn(0f64, 1.0, (3, 5), &dev).unwrap();

        let fast = softmax_last_dim(x.as_tensor()).unwrap();
        let slow = candle_nn::ops::softmax(x.as_tensor(), D::Minus1).unwrap();
        let diff = (&fast - &slow).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);

        let g_fast = (fast * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let g_slow = (slow * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let d = (g_fast.get(&x).unwrap() - g_slow.get(&x).unwrap())
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap();
        assert!(d.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn hidden_keys_get_exactly_zero_weight() {
        let dev = Device::Cpu;
        let scores = Tensor::new(&[[[[1.0f32, 2.0, 3.0]]]], &dev).unwrap();
        let vis = Tensor::new(&[[1.0f32, 0.0, 1.0]], &dev).unwrap();
        let p = softmax_last_dim(&scores.broadcast_add(&key_bias(&vis).unwrap()).unwrap()).unwrap();
        let p = p.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(p[1], 0.0);
        assert!((p[0] + p[2] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn fused_gelu_matches_candle_values_and_finite_difference_gradient() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&(Tensor::randn(0f64, 2.0, (4, 7), &dev).unwrap())).unwrap();
        let fast = gelu(x.as_tensor()).unwrap();
        let slow = x.as_tensor().gelu().unwrap();
        let diff = (&fast - &slow).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
        let grads = fast.sum_all().unwrap().backward().unwrap();
        let analytic = grads.get(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let xs = x.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let h = 1e-6;
        for (&v, &g) in xs.iter().zip(&analytic) {
            let numeric = (gelu_value(v + h) - gelu_value(v - h)) / (2.0 * h);
            assert!((numeric - g).abs() < 1e-8, "x {v}: {g} vs {numeric}");
        }
    }

    #[test]
    fn fused_standardize_matches_composed_version_and_gradient() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&(Tensor::randn(0.5f64, 2.0, (2, 3, 6), &dev).unwrap())).unwrap();
        let w = Tensor::randn(0f64, 1.0, (2, 3, 6), &dev).unwrap();
        let composed = |t: &Tensor| {
            let mean = t.mean_keepdim(D::Minus1).unwrap();
            let c = t.broadcast_sub(&mean).unwrap();
            let var = c.sqr().unwrap().mean_keepdim(D::Minus1).unwrap();
            c.broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap()).unwrap()
        };
        let fast = standardize_last_dim(x.as_tensor(), 1e-5).unwrap();
        let slow = composed(x.as_tensor());
        let diff = (&fast - &slow).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
        let g_fast = (fast * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let g_slow = (slow * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let d = (g_fast.get(&x).unwrap() - g_slow.get(&x).unwrap())
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap();
        assert!(d.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn log_softmax_normalizes() {
        let x = Tensor::new(&[[0.5f64, -1.0, 2.0]], &Device::Cpu).unwrap();
        let lp = log_softmax_last_dim(&x).unwrap();
        let s = lp.exp().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
