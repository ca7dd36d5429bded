use candle_core::{DType, Device, Tensor, D};
use leafgan::backbone::{Classifier, ConvStage};
use leafgan::image::{Image, ValueRange};
use leafgan::lflseg::gradcam_trace;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Features are the input itself; class `c` scores `Σ v[c,k]·A_k(y,x)²`.
struct Quadratic {
    v: Vec<[f64; 3]>,
}

impl ConvStage for Quadratic {
    fn features(&self, xs: &Tensor) -> leafgan::Result<Tensor> {
        Ok(xs.clone())
    }

    fn head(&self, a: &Tensor) -> leafgan::Result<Tensor> {
        let per_channel = a.sqr()?.sum(D::Minus1)?.sum(D::Minus1)?;
        let flat: Vec<f64> = self.v.iter().flatten().copied().collect();
        let w = Tensor::from_vec(flat, (self.v.len(), 3), a.device())?;
        Ok(per_channel.matmul(&w.t()?)?)
    }
}

impl Classifier for Quadratic {
    fn num_classes(&self) -> usize {
        self.v.len()
    }

    fn logits(&self, xs: &Tensor) -> leafgan::Result<Tensor> {
        self.head(&self.features(xs)?)
    }

    fn conv_stage(&self) -> Option<&dyn ConvStage> {
        Some(self)
    }
}

#[test]
fn trace_matches_hand_derived_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (h, w) = (5, 4);
    for _ in 0..20 {
        let net = Quadratic {
            v: (0..3).map(|_| [0, 1, 2].map(|_| rng.random_range(-1.0..1.0))).collect(),
        };
        let img = Image::from_fn(h, w, ValueRange::Signed, |_, _, _| rng.random_range(-1.0..1.0f32)).unwrap();
        let target = rng.random_range(0..3);
        let t = gradcam_trace(&net, &img, target, DType::F64, &Device::Cpu).unwrap();
        assert_eq!((t.channels, t.feat_height, t.feat_width), (3, h, w));

        let mut raw = vec![0.0f64; h * w];
        for k in 0..3 {
            let mut alpha = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let a = img.get(y, x, k) as f64;
                    let g = 2.0 * net.v[target][k] * a;
                    let i = (k * h + y) * w + x;
                    assert!((t.features[i] - a).abs() < 1e-12);
                    assert!((t.gradients[i] - g).abs() < 1e-12);
                    alpha += g / (h * w) as f64;
                }
            }
            assert!((t.weights[k] - alpha).abs() < 1e-12);
            for y in 0..h {
                for x in 0..w {
                    raw[y * w + x] += alpha * img.get(y, x, k) as f64;
                }
            }
        }
        for (got, want) in t.raw.iter().zip(&raw) {
            assert!((got - want.max(0.0)).abs() < 1e-12);
        }
        let values = t.heatmap.values();
        if raw.iter().any(|v| *v > 0.0) {
            let hi = values.iter().copied().fold(f32::MIN, f32::max);
            assert!((hi - 1.0).abs() < 1e-6);
        } else {
            assert!(values.iter().all(|v| *v == 0.0));
        }
    }
}
