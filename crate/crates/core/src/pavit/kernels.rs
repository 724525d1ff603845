//! CPU kernels for the texture encoder: same-padded 3x3 convolution and 2x2
//! max pooling in NCHW layout, wired into autograd as custom ops.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Layout, Shape, Tensor, WithDType};

type CResult<T> = candle_core::Result<T>;

#[inline]
fn dot<T: WithDType>(a: &[T], b: &[T]) -> T {
    let zero = T::from_f64(0.0);
    let mut acc = [zero; 8];
    let n = a.len() / 8 * 8;
    for (ca, cb) in a[..n].chunks_exact(8).zip(b[..n].chunks_exact(8)) {
        for i in 0..8 {
            acc[i] += ca[i] * cb[i];
        }
    }
    let mut s = zero;
    for v in acc {
        s += v;
    }
    for i in n..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy<T: WithDType>(y: &mut [T], a: T, x: &[T]) {
    for (yy, xx) in y.iter_mut().zip(x) {
        *yy += a * *xx;
    }
}

type Dims = (usize, usize, usize, usize);

fn conv_fwd<T: WithDType>(x: &[T], (b, c, h, w): Dims, wt: &[T], co: usize) -> Vec<T> {
    let mut out = vec![T::from_f64(0.0); b * co * h * w];
    for bi in 0..b {
        for k in 0..co {
            for y in 0..h {
                let o = &mut out[((bi * co + k) * h + y) * w..][..w];
                for ci in 0..c {
                    let inp = &x[(bi * c + ci) * h * w..][..h * w];
                    for dy in 0..3 {
                        if (y == 0 && dy == 0) || (y + 1 == h && dy == 2) {
                            continue;
                        }
                        let row = &inp[(y + dy - 1) * w..][..w];
                        let wk = &wt[((k * c + ci) * 3 + dy) * 3..][..3];
                        if w > 1 {
                            axpy(&mut o[1..], wk[0], &row[..w - 1]);
                            axpy(&mut o[..w - 1], wk[2], &row[1..]);
                        }
                        axpy(o, wk[1], row);
                    }
                }
            }
        }
    }
    out
}

fn conv_bwd<T: WithDType>(
    x: &[T],
    (b, c, h, w): Dims,
    wt: &[T],
    co: usize,
    g: &[T],
    want_gx: bool,
) -> (Vec<T>, Vec<T>) {
    let zero = T::from_f64(0.0);
    let mut gw = vec![zero; co * c * 9];
    let mut gx = vec![zero; if want_gx { b * c * h * w } else { 0 }];
    for bi in 0..b {
        for k in 0..co {
            for y in 0..h {
                let go = &g[((bi * co + k) * h + y) * w..][..w];
                for ci in 0..c {
                    let base = (bi * c + ci) * h * w;
                    for dy in 0..3 {
                        if (y == 0 && dy == 0) || (y + 1 == h && dy == 2) {
                            continue;
                        }
                        let yi = y + dy - 1;
                        let row = &x[base + yi * w..][..w];
                        let wi = ((k * c + ci) * 3 + dy) * 3;
                        gw[wi + 1] += dot(go, row);
                        if w > 1 {
                            gw[wi] += dot(&go[1..], &row[..w - 1]);
                            gw[wi + 2] += dot(&go[..w - 1], &row[1..]);
                        }
                        if want_gx {
                            let gr = &mut gx[base + yi * w..][..w];
                            axpy(gr, wt[wi + 1], go);
                            if w > 1 {
                                axpy(&mut gr[..w - 1], wt[wi], &go[1..]);
                                axpy(&mut gr[1..], wt[wi + 2], &go[..w - 1]);
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> CResult<&'a [T]> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("kernel input must be contiguous".into()))?;
    Ok(&s.as_slice::<T>()?[start..end])
}

/// Same-padded 3x3 convolution without bias. `input_grad: false` skips the
/// gradient with respect to the input (first layer).
pub struct Conv3x3 {
    pub input_grad: bool,
}

impl CustomOp2 for Conv3x3 {
    fn name(&self) -> &'static str {
        "conv3x3"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let dims = l1.shape().dims4()?;
        let (co, ci, kh, kw) = l2.shape().dims4()?;
        if ci != dims.1 || kh != 3 || kw != 3 {
            candle_core::bail!("conv3x3: input {:?} vs kernel {:?}", l1.shape(), l2.shape());
        }
        let shape = Shape::from((dims.0, co, dims.2, dims.3));
        let out = match s1.dtype() {
            DType::F32 => f32::to_cpu_storage_owned(conv_fwd(contiguous::<f32>(s1, l1)?, dims, contiguous(s2, l2)?, co)),
            DType::F64 => f64::to_cpu_storage_owned(conv_fwd(contiguous::<f64>(s1, l1)?, dims, contiguous(s2, l2)?, co)),
            dt => candle_core::bail!("conv3x3: unsupported dtype {dt:?}"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, x: &Tensor, wt: &Tensor, _res: &Tensor, g: &Tensor) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let dims = x.dims4()?;
        let co = wt.dim(0)?;
        fn run<T: WithDType>(
            x: &Tensor,
            wt: &Tensor,
            g: &Tensor,
            dims: Dims,
            co: usize,
            want: bool,
        ) -> CResult<(Vec<T>, Vec<T>)> {
            let xv = x.flatten_all()?.to_vec1::<T>()?;
            let wv = wt.flatten_all()?.to_vec1::<T>()?;
            let gv = g.flatten_all()?.to_vec1::<T>()?;
            Ok(conv_bwd(&xv, dims, &wv, co, &gv, want))
        }
        let dev = x.device();
        let (gx, gw) = match x.dtype() {
            DType::F32 => {
                let (a, b) = run::<f32>(x, wt, g, dims, co, self.input_grad)?;
                (Tensor::from_vec(a, x.shape(), dev), Tensor::from_vec(b, wt.shape(), dev)?)
            }
            DType::F64 => {
                let (a, b) = run::<f64>(x, wt, g, dims, co, self.input_grad)?;
                (Tensor::from_vec(a, x.shape(), dev), Tensor::from_vec(b, wt.shape(), dev)?)
            }
            dt => candle_core::bail!("conv3x3: unsupported dtype {dt:?}"),
        };
        Ok((if self.input_grad { Some(gx?) } else { None }, Some(gw)))
    }
}

fn pool_fwd<T: WithDType>(x: &[T], (b, c, h, w): Dims) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * c * ho * wo);
    for p in 0..b * c {
        for y in 0..ho {
            for xx in 0..wo {
                let i = p * h * w + 2 * y * w + 2 * xx;
                let mut m = x[i];
                for j in [i + 1, i + w, i + w + 1] {
                    if x[j] > m {
                        m = x[j];
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

fn pool_bwd<T: WithDType>(x: &[T], (b, c, h, w): Dims, g: &[T]) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let mut gx = vec![T::from_f64(0.0); b * c * h * w];
    for p in 0..b * c {
        for y in 0..ho {
            for xx in 0..wo {
                let i = p * h * w + 2 * y * w + 2 * xx;
                let mut best = i;
                for j in [i + 1, i + w, i + w + 1] {
                    if x[j] > x[best] {
                        best = j;
                    }
                }
                gx[best] += g[(p * ho + y) * wo + xx];
            }
        }
    }
    gx
}

/// 2x2 max pooling with stride 2; ties route the gradient to the first
/// maximum in row-major order.
pub struct MaxPool2;

impl CustomOp1 for MaxPool2 {
    fn name(&self) -> &'static str {
        "maxpool2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let dims = l.shape().dims4()?;
        if dims.2 % 2 != 0 || dims.3 % 2 != 0 {
            candle_core::bail!("maxpool2: odd spatial size {:?}", l.shape());
        }
        let shape = Shape::from((dims.0, dims.1, dims.2 / 2, dims.3 / 2));
        let out = match s.dtype() {
            DType::F32 => f32::to_cpu_storage_owned(pool_fwd(contiguous::<f32>(s, l)?, dims)),
            DType::F64 => f64::to_cpu_storage_owned(pool_fwd(contiguous::<f64>(s, l)?, dims)),
            dt => candle_core::bail!("maxpool2: unsupported dtype {dt:?}"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, g: &Tensor) -> CResult<Option<Tensor>> {
        let dims = x.dims4()?;
        let gx = match x.dtype() {
            DType::F32 => Tensor::from_vec(
                pool_bwd(&x.flatten_all()?.to_vec1::<f32>()?, dims, &g.flatten_all()?.to_vec1::<f32>()?),
                x.shape(),
                x.device(),
            )?,
            DType::F64 => Tensor::from_vec(
                pool_bwd(&x.flatten_all()?.to_vec1::<f64>()?, dims, &g.flatten_all()?.to_vec1::<f64>()?),
                x.shape(),
                x.device(),
            )?,
            dt => candle_core::bail!("maxpool2: unsupported dtype {dt:?}"),
        };
        Ok(Some(gx))
    }
}

pub fn conv3x3(x: &Tensor, w: &Tensor, input_grad: bool) -> CResult<Tensor> {
    x.contiguous()?.apply_op2(&w.contiguous()?, Conv3x3 { input_grad })
}

pub fn maxpool2(x: &Tensor) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(MaxPool2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn conv_matches_reference() {
        let x = rand(&[2, 3, 6, 5], 1);
        let w = rand(&[4, 3, 3, 3], 2);
        let ours = conv3x3(&x, &w, true).unwrap();
        let reference = x.conv2d(&w, 1, 1, 1, 1).unwrap();
        let diff = (ours - reference).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn conv_gradients_match_reference() {
        let x = Var::from_tensor(&rand(&[2, 3, 6, 4], 3)).unwrap();
        let w = Var::from_tensor(&rand(&[2, 3, 3, 3], 4)).unwrap();
        let t = rand(&[2, 2, 6, 4], 5);
        let g1 = (conv3x3(&x, &w, true).unwrap() * &t).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (x.conv2d(&w, 1, 1, 1, 1).unwrap() * &t).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &w] {
            let d = (g1.get(v).unwrap() - g2.get(v).unwrap()).unwrap().abs().unwrap().max_all().unwrap();
            assert!(d.to_scalar::<f64>().unwrap() < 1e-12);
        }
    }

    #[test]
    fn pool_forward_and_backward() {
        let x = Var::from_tensor(&rand(&[1, 2, 4, 6], 6)).unwrap();
        let ours = maxpool2(&x).unwrap();
        let reference = x.max_pool2d(2).unwrap();
        let d = (&ours - &reference).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(d.to_scalar::<f64>().unwrap(), 0.0);
        let t = rand(&[1, 2, 2, 3], 7);
        let g = (ours * &t).unwrap().sum_all().unwrap().backward().unwrap();
        let gx = g.get(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let nonzero = gx.iter().filter(|v| **v != 0.0).count();
        assert_eq!(nonzero, 12);
        let total: f64 = gx.iter().sum();
        let expect: f64 = t.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().sum();
        assert!((total - expect).abs() < 1e-12);
    }
}
