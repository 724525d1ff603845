//! Symmetric contrastive objective and the combined training loss.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{Error, Result};

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            expected: a.len().to_string(),
            actual: b.len().to_string(),
        });
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("zero-norm latent".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// `-log(exp(sim(z_i, z_j) / tau) / sum_{k != i} exp(sim(z_i, z_k) / tau))`
/// over the latent set `z`, with `j` the partner of `i`.
pub fn contrastive_loss(z: &[Vec<f64>], i: usize, j: usize, tau: f64) -> Result<f64> {
    if z.len() < 2 {
        return Err(Error::invalid("contrastive loss needs at least two latents"));
    }
    if i >= z.len() || j >= z.len() || i == j {
        return Err(Error::invalid(format!("bad pair ({i}, {j}) for {} latents", z.len())));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("tau must be positive"));
    }
    let sims: Vec<(usize, f64)> = (0..z.len())
        .filter(|&k| k != i)
        .map(|k| Ok((k, cosine_similarity(&z[i], &z[k])? / tau)))
        .collect::<Result<_>>()?;
    let m = sims.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let lse = m + sims.iter().map(|s| (s.1 - m).exp()).sum::<f64>().ln();
    let pos = sims.iter().find(|s| s.0 == j).expect("j != i").1;
    Ok((lse - pos).max(0.0))
}

fn check_partners(partners: &[Option<usize>]) -> Result<()> {
    for (i, p) in partners.iter().enumerate() {
        if let Some(j) = *p {
            if j >= partners.len() || j == i {
                return Err(Error::invalid(format!("partner {j} of sample {i} is outside the batch")));
            }
        }
    }
    Ok(())
}

/// Per-sample contrastive terms `[N]` for a batch of latents `[N, D]`;
/// samples without a partner get 0.
pub fn contrastive_terms(z: &Tensor, partners: &[Option<usize>], tau: f64) -> Result<Tensor> {
    let (n, _) = z.dims2()?;
    if n < 2 {
        return Err(Error::invalid("contrastive loss needs at least two latents"));
    }
    if partners.len() != n {
        return Err(Error::Shape {
            expected: format!("{n} partner entries"),
            actual: partners.len().to_string(),
        });
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("tau must be positive"));
    }
    check_partners(partners)?;
    let dtype = z.dtype();
    let norms = z.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let min_norm = norms.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if min_norm.iter().any(|v| *v == 0.0) {
        return Err(Error::Degenerate("zero-norm latent".into()));
    }
    let zn = z.broadcast_div(&norms)?;
    let sims = (zn.matmul(&zn.t()?)? / tau)?;
    let mut diag = vec![0f64; n * n];
    let mut pos = vec![0f64; n * n];
    let mut has = vec![0f64; n];
    for i in 0..n {
        diag[i * n + i] = -1e30;
        if let Some(j) = partners[i] {
            pos[i * n + j] = 1.0;
            has[i] = 1.0;
        }
    }
    let dev = Device::Cpu;
    let to = |v: Vec<f64>, shape: (usize, usize)| -> Result<Tensor> {
        Ok(Tensor::from_vec(v, shape, &dev)?.to_dtype(dtype)?)
    };
    let masked = (&sims + to(diag, (n, n))?)?;
    let m = masked.max_keepdim(D::Minus1)?.detach();
    let lse = (masked.broadcast_sub(&m)?.exp()?.sum_keepdim(D::Minus1)?.log()? + &m)?.squeeze(1)?;
    let positive = (&sims * to(pos, (n, n))?)?.sum(D::Minus1)?;
    Ok(((lse - positive)? * to(has, (n, 1))?.squeeze(1)?)?)
}

/// `(1/N) * sum_i [w_con * l_con(i) + w_mse * (y_i - y_hat_i)^2]`; the
/// contrastive term is dropped when `use_sym` is off.
pub fn total_loss(
    y_hat: &Tensor,
    y: &Tensor,
    z: &Tensor,
    partners: &[Option<usize>],
    tau: f64,
    use_sym: bool,
    weights: (f64, f64),
) -> Result<Tensor> {
    let n = y_hat.dim(0)?;
    if y.dims() != y_hat.dims() {
        return Err(Error::Shape {
            expected: format!("{:?}", y_hat.dims()),
            actual: format!("{:?}", y.dims()),
        });
    }
    let mse = ((y_hat - y)?.sqr()? * weights.1)?;
    let per_sample = if use_sym {
        if let Some(i) = partners.iter().position(Option::is_none) {
            return Err(Error::invalid(format!("sample {i} has no symmetric partner in the batch")));
        }
        (mse + (contrastive_terms(z, partners, tau)? * weights.0)?)?
    } else {
        mse
    };
    Ok((per_sample.sum_all()? / n as f64)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_element_set_is_zero() {
        let z = vec![vec![1.0, 2.0], vec![-3.0, 0.5]];
        assert_eq!(contrastive_loss(&z, 0, 1, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn hand_case() {
        let z = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let expect = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((contrastive_loss(&z, 0, 1, 1.0).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn errors() {
        assert!(contrastive_loss(&[vec![1.0]], 0, 0, 1.0).is_err());
        let z = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(matches!(contrastive_loss(&z, 0, 1, 1.0), Err(Error::Degenerate(_))));
        let z = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        assert!(contrastive_loss(&z, 0, 1, 0.0).is_err());
    }

    #[test]
    fn tensor_terms_match_scalar() {
        let z = vec![vec![0.3, -1.0, 2.0], vec![1.0, 0.1, 0.2], vec![-0.5, 0.5, 0.9], vec![2.0, 2.0, -1.0]];
        let t = Tensor::new(z.clone(), &Device::Cpu).unwrap();
        let partners = [Some(1), Some(0), Some(3), Some(2)];
        let terms = contrastive_terms(&t, &partners, 0.5).unwrap().to_vec1::<f64>().unwrap();
        for (i, p) in partners.iter().enumerate() {
            let s = contrastive_loss(&z, i, p.unwrap(), 0.5).unwrap();
            assert!((terms[i] - s).abs() < 1e-12, "{i}: {} vs {s}", terms[i]);
        }
    }

    #[test]
    fn pure_mse_when_sym_off() {
        let y = Tensor::new(&[0.2f64, 0.5, 0.9], &Device::Cpu).unwrap();
        let y_hat = (&y + 0.1).unwrap();
        let z = Tensor::ones((3, 2), DType::F64, &Device::Cpu).unwrap();
        let l = total_loss(&y_hat, &y, &z, &[None, None, None], 0.1, false, (1.0, 1.0)).unwrap();
        assert!((l.to_scalar::<f64>().unwrap() - 0.01).abs() < 1e-12);
        assert!(total_loss(&y_hat, &y, &z, &[None, None, None], 0.1, true, (1.0, 1.0)).is_err());
    }

    #[test]
    fn perfect_pairs_give_zero() {
        let y = Tensor::new(&[0.2f64, 0.5], &Device::Cpu).unwrap();
        let z = Tensor::new(&[[1.0f64, 2.0], [3.0, -1.0]], &Device::Cpu).unwrap();
        let l = total_loss(&y, &y, &z, &[Some(1), Some(0)], 0.1, true, (1.0, 1.0)).unwrap();
        assert_eq!(l.to_scalar::<f64>().unwrap(), 0.0);
    }
}
