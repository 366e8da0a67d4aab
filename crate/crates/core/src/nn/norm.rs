use super::tensor::Tensor;
use super::Module;
use crate::scalar::Scalar;

const EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self { gain: Tensor::filled(&[dim], T::one()), bias: Tensor::zeros(&[dim]) }
    }

    pub fn dim(&self) -> usize {
        self.gain.len()
    }

    pub fn forward(&self, x: &[T], n: usize) -> (Vec<T>, LayerNormCache<T>) {
        let d = self.dim();
        let inv_d = T::one() / T::from_usize(d).unwrap();
        let eps = T::lit(EPS);
        let mut y = vec![T::zero(); n * d];
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        for r in 0..n {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                y[r * d + j] = h * self.gain.data[j] + self.bias.data[j];
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, dy: &[T], n: usize, mut grads: Option<&mut Self>) -> Vec<T> {
        let d = self.dim();
        let inv_d = T::one() / T::from_usize(d).unwrap();
        let mut dx = vec![T::zero(); n * d];
        for r in 0..n {
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let g = &dy[r * d..(r + 1) * d];
            if let Some(gr) = grads.as_deref_mut() {
                for j in 0..d {
                    gr.gain.data[j] = gr.gain.data[j] + g[j] * xh[j];
                    gr.bias.data[j] = gr.bias.data[j] + g[j];
                }
            }
            let mut mean_dxh = T::zero();
            let mut mean_dxh_xh = T::zero();
            for j in 0..d {
                let dxh = g[j] * self.gain.data[j];
                mean_dxh = mean_dxh + dxh;
                mean_dxh_xh = mean_dxh_xh + dxh * xh[j];
            }
            mean_dxh = mean_dxh * inv_d;
            mean_dxh_xh = mean_dxh_xh * inv_d;
            let rs = cache.rstd[r];
            for j in 0..d {
                let dxh = g[j] * self.gain.data[j];
                dx[r * d + j] = rs * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
            }
        }
        dx
    }
}

impl<T: Scalar> Module<T> for LayerNorm<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}.gain"), &self.gain));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{prefix}.gain"), &mut self.gain));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}
