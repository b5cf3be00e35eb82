//! Spatial attention module: two 1x1x1 convolutions (channel halving +
//! ReLU, then reduction to one channel + sigmoid) producing a map that
//! multiplies the input features, with a residual connection:
//! `out = f + f * A`.

use crate::error::{Error, Result};
use crate::nn::conv::Conv3d;
use crate::nn::layers::{Relu, Sigmoid};
use crate::nn::{Param, Tensor};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct AttentionModule {
    conv1: Conv3d,
    relu: Relu,
    conv2: Conv3d,
    sigmoid: Sigmoid,
    channels: usize,
    cache: Option<(Tensor, Tensor)>,
}

impl AttentionModule {
    pub fn new(scope: &str, channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if channels % 2 != 0 {
            return Err(Error::Config(format!(
                "attention module needs an even channel count, got {channels}"
            )));
        }
        Ok(AttentionModule {
            conv1: Conv3d::new(&format!("{scope}.conv1"), channels, channels / 2, [1, 1, 1], rng),
            relu: Relu::new(),
            conv2: Conv3d::new(&format!("{scope}.conv2"), channels / 2, 1, [1, 1, 1], rng),
            sigmoid: Sigmoid::new(),
            channels,
            cache: None,
        })
    }

    /// Returns the calibrated features and the attention map (N,1,D,H,W).
    pub fn forward(&mut self, f: &Tensor, train: bool) -> (Tensor, Tensor) {
        debug_assert_eq!(f.dim().1, self.channels);
        let t1 = self.conv1.forward(f, train);
        let r = self.relu.forward(&t1, train);
        let t2 = self.conv2.forward(&r, train);
        let a = self.sigmoid.forward(&t2, train);

        let (n, c, d, h, w) = f.dim();
        let mut out = f.clone();
        {
            let dhw = d * h * w;
            let os = out.as_slice_mut().expect("standard layout");
            let avs = a.as_slice().expect("standard layout");
            for s in 0..n {
                let am = &avs[s * dhw..(s + 1) * dhw];
                for ch in 0..c {
                    let seg = &mut os[(s * c + ch) * dhw..(s * c + ch + 1) * dhw];
                    for (o, &av) in seg.iter_mut().zip(am.iter()) {
                        *o += *o * av;
                    }
                }
            }
        }
        if train {
            self.cache = Some((f.clone(), a.clone()));
        }
        (out, a)
    }

    /// `d_out` is the gradient at the calibrated output; `d_a_ext` is an
    /// optional extra gradient applied directly to the attention map (the
    /// supervised-attention loss term).
    pub fn backward(&mut self, d_out: &Tensor, d_a_ext: Option<&Tensor>) -> Tensor {
        let (f, a) = self.cache.take().expect("forward(train) before backward");
        let (n, c, d, h, w) = f.dim();
        let dhw = d * h * w;

        // d_f (direct residual path) and d_a (map path)
        let mut df = d_out.clone();
        let mut da = Tensor::zeros((n, 1, d, h, w));
        {
            let dfs = df.as_slice_mut().expect("standard layout");
            let fs = f.as_slice().expect("standard layout");
            let avs = a.as_slice().expect("standard layout");
            let das = da.as_slice_mut().expect("standard layout");
            let dos = d_out.as_slice().expect("standard layout");
            for s in 0..n {
                let am = &avs[s * dhw..(s + 1) * dhw];
                let dam = &mut das[s * dhw..(s + 1) * dhw];
                for ch in 0..c {
                    let off = (s * c + ch) * dhw;
                    for i in 0..dhw {
                        let g = dos[off + i];
                        dfs[off + i] = g * (1.0 + am[i]);
                        dam[i] += fs[off + i] * g;
                    }
                }
            }
        }
        if let Some(ext) = d_a_ext {
            da += ext;
        }

        let dt2 = self.sigmoid.backward(&da);
        let dr = self.conv2.backward(&dt2);
        let dt1 = self.relu.backward(&dr);
        let df_attn = self.conv1.backward(&dt1);
        df += &df_attn;
        df
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_params(f);
        self.conv2.visit_params(f);
    }

    /// Bias of the final map convolution; tests use it to pin the sigmoid
    /// input to extreme values.
    pub fn map_bias_mut(&mut self) -> &mut Param {
        &mut self.conv2.b
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array5;
    use rand::{Rng, SeedableRng};

    fn random_tensor(shape: (usize, usize, usize, usize, usize), seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array5::from_shape_fn(shape, |_| rng.gen_range(-1.0f32..1.0))
    }

    #[test]
    fn odd_channel_count_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            AttentionModule::new("a", 5, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn saturated_map_gives_identity_and_doubling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut attn = AttentionModule::new("a", 4, &mut rng).unwrap();
        let f = random_tensor((2, 4, 2, 3, 3), 2);

        // bias the sigmoid input far negative: A == 0, out == f
        attn.map_bias_mut().data.fill(-1e4);
        let (out, a) = attn.forward(&f, false);
        assert!(a.iter().all(|&v| v == 0.0));
        assert_eq!(out, f);

        // far positive: A == 1, out == 2f
        attn.map_bias_mut().data.fill(1e4);
        let (out, a) = attn.forward(&f, false);
        assert!(a.iter().all(|&v| v == 1.0));
        for (o, x) in out.iter().zip(f.iter()) {
            assert_eq!(*o, 2.0 * *x);
        }
    }

    #[test]
    fn residual_identity_with_random_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut attn = AttentionModule::new("a", 6, &mut rng).unwrap();
        let f = random_tensor((1, 6, 2, 4, 4), 4);
        let (out, a) = attn.forward(&f, false);
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let (n, c, d, h, w) = f.dim();
        for s in 0..n {
            for ch in 0..c {
                for z in 0..d {
                    for y in 0..h {
                        for x in 0..w {
                            let fa = f[[s, ch, z, y, x]] * a[[s, 0, z, y, x]];
                            let diff = out[[s, ch, z, y, x]] - f[[s, ch, z, y, x]] - fa;
                            assert!(diff.abs() < 1e-6, "residual identity violated: {diff}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn backward_finite_difference_including_external_map_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_tensor((1, 4, 1, 3, 3), 6);
        let proj = random_tensor((1, 4, 1, 3, 3), 7);
        let proj_a = random_tensor((1, 1, 1, 3, 3), 8);
        let loss = |attn: &mut AttentionModule, f: &Tensor| -> f64 {
            let (out, a) = attn.forward(f, false);
            let l1: f64 = out.iter().zip(proj.iter()).map(|(x, p)| (*x * *p) as f64).sum();
            let l2: f64 = a.iter().zip(proj_a.iter()).map(|(x, p)| (*x * *p) as f64).sum();
            l1 + l2
        };
        let mut attn = AttentionModule::new("a", 4, &mut rng).unwrap();
        attn.forward(&f, true);
        let df = attn.backward(&proj, Some(&proj_a));
        let h = 1e-3f32;
        for idx in [[0usize, 0, 0, 0, 0], [0, 3, 0, 2, 2], [0, 1, 0, 1, 0]] {
            let mut fp = f.clone();
            fp[idx] += h;
            let lp = loss(&mut attn, &fp);
            fp[idx] -= 2.0 * h;
            let lm = loss(&mut attn, &fp);
            let num = (lp - lm) / (2.0 * h as f64);
            let ana = df[idx] as f64;
            assert!((num - ana).abs() < 2e-2 * (1.0 + ana.abs()), "{num} vs {ana}");
        }
    }
}
