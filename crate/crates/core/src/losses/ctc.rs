//! CTC negative log-likelihood via the forward-backward recursion in log space.

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor};

use super::Loss;
use crate::error::{Error, Result};

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Frames needed to emit `target`: one per label plus a blank between repeats.
pub fn ctc_required_frames(target: &[u32]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check(num_frames: usize, num_classes: usize, target: &[u32], blank: u32) -> Result<()> {
    if num_frames == 0 {
        return Err(Error::Shape("CTC needs at least one frame".into()));
    }
    if blank as usize >= num_classes || target.iter().any(|&t| t as usize >= num_classes) {
        return Err(Error::Shape(format!("label id out of range for {num_classes} classes")));
    }
    if target.contains(&blank) {
        return Err(Error::Shape("CTC target contains the blank label".into()));
    }
    let required = ctc_required_frames(target);
    if required > num_frames {
        return Err(Error::CtcInfeasible {
            target_len: target.len(),
            required,
            frames: num_frames,
        });
    }
    Ok(())
}

fn extended(target: &[u32], blank: u32) -> Vec<u32> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &t in target {
        ext.push(t);
        ext.push(blank);
    }
    ext
}

fn can_skip(ext: &[u32], s: usize, blank: u32) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

fn forward_table(log_probs: &[Vec<f64>], ext: &[u32], blank: u32) -> Vec<Vec<f64>> {
    let (t_len, s_len) = (log_probs.len(), ext.len());
    let mut alpha = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    alpha[0][0] = log_probs[0][ext[0] as usize];
    if s_len > 1 {
        alpha[0][1] = log_probs[0][ext[1] as usize];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = log_add(acc, alpha[t - 1][s - 1]);
            }
            if can_skip(ext, s, blank) {
                acc = log_add(acc, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = acc + log_probs[t][ext[s] as usize];
        }
    }
    alpha
}

fn backward_table(log_probs: &[Vec<f64>], ext: &[u32], blank: u32) -> Vec<Vec<f64>> {
    let (t_len, s_len) = (log_probs.len(), ext.len());
    let mut beta = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    let last = t_len - 1;
    beta[last][s_len - 1] = log_probs[last][ext[s_len - 1] as usize];
    if s_len > 1 {
        beta[last][s_len - 2] = log_probs[last][ext[s_len - 2] as usize];
    }
    for t in (0..last).rev() {
        for s in 0..s_len {
            let mut acc = beta[t + 1][s];
            if s + 1 < s_len {
                acc = log_add(acc, beta[t + 1][s + 1]);
            }
            if s + 2 < s_len && can_skip(ext, s + 2, blank) {
                acc = log_add(acc, beta[t + 1][s + 2]);
            }
            beta[t][s] = acc + log_probs[t][ext[s] as usize];
        }
    }
    beta
}

fn total_log_prob(alpha: &[Vec<f64>]) -> f64 {
    let last = &alpha[alpha.len() - 1];
    let s_len = last.len();
    if s_len > 1 {
        log_add(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    }
}

fn log_softmax_rows(logits: &[Vec<f64>]) -> Vec<Vec<f64>> {
    logits
        .iter()
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter().map(|v| v - lse).collect()
        })
        .collect()
}

/// `-log p(target | frames)` for `T × K` per-frame log-probabilities.
pub fn ctc_nll(log_probs: &[Vec<f64>], target: &[u32], blank: u32) -> Result<f64> {
    let k = log_probs.first().map_or(0, Vec::len);
    check(log_probs.len(), k, target, blank)?;
    let ext = extended(target, blank);
    Ok(-total_log_prob(&forward_table(log_probs, &ext, blank)))
}

/// NLL and its gradient with respect to the raw (pre-softmax) frame logits.
pub fn ctc_nll_grad(logits: &[Vec<f64>], target: &[u32], blank: u32) -> Result<(f64, Vec<Vec<f64>>)> {
    let k = logits.first().map_or(0, Vec::len);
    check(logits.len(), k, target, blank)?;
    let lp = log_softmax_rows(logits);
    let ext = extended(target, blank);
    let alpha = forward_table(&lp, &ext, blank);
    let beta = backward_table(&lp, &ext, blank);
    let log_p = total_log_prob(&alpha);
    let mut grad = vec![vec![0.0; k]; lp.len()];
    for t in 0..lp.len() {
        let mut occupancy = vec![f64::NEG_INFINITY; k];
        for (s, &label) in ext.iter().enumerate() {
            let l = label as usize;
            occupancy[l] = log_add(occupancy[l], alpha[t][s] + beta[t][s]);
        }
        for c in 0..k {
            let post = if occupancy[c] == f64::NEG_INFINITY {
                0.0
            } else {
                (occupancy[c] - lp[t][c] - log_p).exp()
            };
            grad[t][c] = lp[t][c].exp() - post;
        }
    }
    Ok((-log_p, grad))
}

/// Reference CTC likelihood by enumerating all `K^T` frame paths. Only for
/// tiny problems; used to validate the recursion.
pub fn ctc_brute_force(log_probs: &[Vec<f64>], target: &[u32], blank: u32) -> f64 {
    let t_len = log_probs.len();
    let k = log_probs[0].len();
    let mut path = vec![0usize; t_len];
    let mut total = 0.0;
    loop {
        let collapsed: Vec<u32> = {
            let frames: Vec<u32> = path.iter().map(|&p| p as u32).collect();
            crate::model::ctc_collapse(&frames, blank)
        };
        if collapsed == target {
            total += path.iter().enumerate().map(|(t, &c)| log_probs[t][c]).sum::<f64>().exp();
        }
        let mut i = 0;
        loop {
            if i == t_len {
                return -total.ln();
            }
            path[i] += 1;
            if path[i] < k {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

struct CtcOp {
    targets: Vec<Vec<u32>>,
    blank: u32,
}

fn rows_f64(data: &[f64], b: usize, t: usize, k: usize) -> Vec<Vec<Vec<f64>>> {
    (0..b)
        .map(|i| (0..t).map(|j| data[(i * t + j) * k..(i * t + j + 1) * k].to_vec()).collect())
        .collect()
}

impl CustomOp1 for CtcOp {
    fn name(&self) -> &'static str {
        "ctc-loss"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, t, k) = layout.shape().dims3()?;
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("ctc input must be contiguous".into()))?;
        let data: Vec<f64> = match storage {
            CpuStorage::F32(v) => v[start..end].iter().map(|&x| x as f64).collect(),
            CpuStorage::F64(v) => v[start..end].to_vec(),
            other => candle_core::bail!("ctc not implemented for {:?}", candle_core::backend::BackendStorage::dtype(other)),
        };
        let mut out = Vec::with_capacity(b);
        for (logits, target) in rows_f64(&data, b, t, k).iter().zip(&self.targets) {
            let lp = log_softmax_rows(logits);
            let nll = ctc_nll(&lp, target, self.blank).map_err(|e| candle_core::Error::Msg(e.to_string()))?;
            out.push(nll);
        }
        let storage = match storage {
            CpuStorage::F32(_) => CpuStorage::F32(out.into_iter().map(|v| v as f32).collect()),
            _ => CpuStorage::F64(out),
        };
        Ok((storage, Shape::from(b)))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (b, t, k) = arg.dims3()?;
        let data = arg.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let upstream = grad_res.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let mut grad = Vec::with_capacity(b * t * k);
        for ((logits, target), g) in rows_f64(&data, b, t, k).iter().zip(&self.targets).zip(upstream) {
            let (_, dl) = ctc_nll_grad(logits, target, self.blank)
                .map_err(|e| candle_core::Error::Msg(e.to_string()))?;
            grad.extend(dl.into_iter().flatten().map(|v| v * g));
        }
        let grad = Tensor::from_vec(grad, (b, t, k), arg.device())?.to_dtype(arg.dtype())?;
        Ok(Some(grad))
    }
}

/// Batch-mean CTC loss over `B × T × K` raw frame logits (softmax applied inside).
pub fn ctc_loss(frame_logits: &Tensor, targets: &[Vec<u32>], blank: u32) -> Result<Loss> {
    let (b, t, k) = frame_logits.dims3()?;
    if targets.len() != b {
        return Err(Error::Shape(format!("{} targets for batch of {b}", targets.len())));
    }
    for target in targets {
        check(t, k, target, blank)?;
    }
    let per_sample = frame_logits.contiguous()?.apply_op1(CtcOp {
        targets: targets.to_vec(),
        blank,
    })?;
    let value = per_sample.mean_all()?;
    let counted = targets.iter().map(Vec::len).sum();
    Loss::single(value, "ctc", counted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_logits(rng: &mut impl Rng, t: usize, k: usize) -> Vec<Vec<f64>> {
        (0..t).map(|_| (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect()
    }

    #[test]
    fn single_frame_single_symbol() {
        let logits = vec![vec![0.3, -1.0, 0.9]];
        let lp = log_softmax_rows(&logits);
        let nll = ctc_nll(&lp, &[1], 2).unwrap();
        assert!((nll + lp[0][1]).abs() < 1e-12);
    }

    #[test]
    fn three_frames_ab_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lp = log_softmax_rows(&random_logits(&mut rng, 3, 4));
        let fast = ctc_nll(&lp, &[0, 1], 3).unwrap();
        let slow = ctc_brute_force(&lp, &[0, 1], 3);
        assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
    }

    #[test]
    fn infeasible_targets() {
        let lp = vec![vec![-1.0; 3]; 2];
        assert!(matches!(ctc_nll(&lp, &[0, 1, 0], 2), Err(Error::CtcInfeasible { .. })));
        assert!(matches!(ctc_nll(&lp, &[1, 1], 2), Err(Error::CtcInfeasible { required: 3, .. })));
        assert!(ctc_nll(&lp, &[1, 0], 2).is_ok());
    }

    #[test]
    fn empty_target_is_all_blanks() {
        let lp = log_softmax_rows(&[vec![0.1, 0.5], vec![0.2, -0.3]]);
        let nll = ctc_nll(&lp, &[], 1).unwrap();
        assert!((nll + lp[0][1] + lp[1][1]).abs() < 1e-12);
    }

    #[test]
    fn tensor_op_matches_scalar_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_logits(&mut rng, 5, 4);
        let b = random_logits(&mut rng, 5, 4);
        let flat: Vec<f64> = a.iter().chain(&b).flatten().copied().collect();
        let x = Var::from_tensor(&Tensor::from_vec(flat, (2, 5, 4), &Device::Cpu).unwrap()).unwrap();
        let targets = vec![vec![0, 1], vec![2, 2, 1]];
        let loss = ctc_loss(x.as_tensor(), &targets, 3).unwrap();
        let (na, ga) = ctc_nll_grad(&a, &targets[0], 3).unwrap();
        let (nb, _) = ctc_nll_grad(&b, &targets[1], 3).unwrap();
        assert!((loss.report.total - (na + nb) / 2.0).abs() < 1e-12);
        let g = loss.value.backward().unwrap().get(&x).unwrap().to_vec3::<f64>().unwrap();
        for t in 0..5 {
            for c in 0..4 {
                assert!((g[0][t][c] - ga[t][c] / 2.0).abs() < 1e-12);
            }
        }
    }
}
