use std::collections::BTreeMap;

use candle_core::{DType, Tensor, D};

use super::{Loss, LossReport};
use crate::error::{Error, Result};

pub const PATCH_NORM_EPS: f64 = 1e-6;

/// Standardizes each patch (last dimension) to zero mean and unit variance:
/// `(x - mean) / (std + eps)` with the population standard deviation.
/// Statistics are taken in f64, so single-precision constant patches center to
/// exactly zero instead of to rounding noise amplified by `1 / eps`.
pub fn patch_pixel_target(patches: &Tensor) -> Result<Tensor> {
    let p = patches.dim(D::Minus1)?;
    if p < 2 {
        return Err(Error::Shape("patch needs at least two pixels".into()));
    }
    let x = patches.detach().to_dtype(DType::F64)?;
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let std = centered.sqr()?.mean_keepdim(D::Minus1)?.sqrt()?;
    Ok(centered.broadcast_div(&(std + PATCH_NORM_EPS)?)?.to_dtype(patches.dtype())?)
}

/// `MSE(T, T*) + lambda * MSE(Z, sg(Z*))`, each MSE averaged over all elements
/// of the masked rows (`masked` is `B × M`, 1 = masked). `target_latent` is
/// detached, so no gradient reaches whatever produced it.
pub fn mim_loss(
    pred_pixels: &Tensor,
    target_pixels: &Tensor,
    pred_latent: &Tensor,
    target_latent: &Tensor,
    masked: &Tensor,
    lambda: f64,
) -> Result<Loss> {
    if pred_pixels.dims() != target_pixels.dims() || pred_latent.dims() != target_latent.dims() {
        return Err(Error::Shape(format!(
            "prediction/target mismatch: {:?} vs {:?}, {:?} vs {:?}",
            pred_pixels.dims(),
            target_pixels.dims(),
            pred_latent.dims(),
            target_latent.dims()
        )));
    }
    let (b, m) = masked.dims2()?;
    if pred_pixels.dims()[..2] != [b, m] || pred_latent.dims()[..2] != [b, m] {
        return Err(Error::Shape("mask does not match prediction rows".into()));
    }
    let dtype = pred_pixels.dtype();
    let weight = masked.to_dtype(dtype)?;
    let count = weight.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if count < 0.5 {
        return Err(Error::EmptyMask("no masked patches"));
    }
    let w = weight.unsqueeze(D::Minus1)?;
    let masked_mse = |pred: &Tensor, target: &Tensor| -> Result<Tensor> {
        let width = pred.dim(D::Minus1)? as f64;
        let sq = (pred - target)?.sqr()?.broadcast_mul(&w)?.sum_all()?;
        Ok((sq / (count * width))?)
    };
    let pixel = masked_mse(pred_pixels, target_pixels)?;
    let align = masked_mse(pred_latent, &target_latent.detach())?;
    let total = (&pixel + (&align * lambda)?)?;
    let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let report = LossReport {
        total: scalar(&total)?,
        components: BTreeMap::from([
            ("pixel".to_string(), scalar(&pixel)?),
            ("align".to_string(), scalar(&align)?),
        ]),
        counted_positions: count.round() as usize,
    };
    Ok(Loss { value: total, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn constant_patch_maps_to_zero() {
        let x = Tensor::full(0.7f32, (1, 1, 12), &Device::Cpu).unwrap();
        let t = patch_pixel_target(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(t.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_pixel_patch() {
        let x = Tensor::new(&[[[0.0f64, 1.0]]], &Device::Cpu).unwrap();
        let t = patch_pixel_target(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!((t[0] + 1.0).abs() < 1e-5 && (t[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn identical_predictions_give_zero() {
        let dev = Device::Cpu;
        let t = Tensor::randn(0f64, 1.0, (2, 4, 6), &dev).unwrap();
        let z = Tensor::randn(0f64, 1.0, (2, 4, 3), &dev).unwrap();
        let mask = Tensor::new(&[[1f64, 0., 1., 0.], [0., 0., 1., 1.]], &dev).unwrap();
        let l = mim_loss(&t, &t, &z, &z, &mask, 0.05).unwrap();
        assert_eq!(l.report.total, 0.0);
        assert_eq!(l.report.counted_positions, 4);
        let none = Tensor::zeros((2, 4), DType::F64, &dev).unwrap();
        assert!(matches!(mim_loss(&t, &t, &z, &z, &none, 0.05), Err(Error::EmptyMask(_))));
    }

    #[test]
    fn target_branch_is_gradient_blocked() {
        let dev = Device::Cpu;
        let t = Tensor::randn(0f64, 1.0, (1, 3, 4), &dev).unwrap();
        let z = Var::from_tensor(&Tensor::randn(0f64, 1.0, (1, 3, 2), &dev).unwrap()).unwrap();
        let zs = Var::from_tensor(&Tensor::randn(0f64, 1.0, (1, 3, 2), &dev).unwrap()).unwrap();
        let mask = Tensor::new(&[[1f64, 1., 0.]], &dev).unwrap();
        let l = mim_loss(&t, &t, z.as_tensor(), zs.as_tensor(), &mask, 0.05).unwrap();
        let g = l.value.backward().unwrap();
        assert!(g.get(&z).is_some());
        assert!(g.get(&zs).is_none());
    }
}
