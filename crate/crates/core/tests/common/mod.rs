#![allow(dead_code)]

pub mod checks;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Largest relative error between autodiff and central differences over
/// sampled entries of `vars`. `f` must evaluate the scalar loss from the
/// current variable values. Relative error is
/// `|a − n| / max(|a|, |n|, floor)`.
pub fn grad_check<F>(vars: &[(String, Var)], f: F, h: f64, per_var: usize, floor: f64, seed: u64) -> (f64, String)
where
    F: Fn() -> Tensor,
{
    let loss = f();
    let grads = loss.backward().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0, String::new());
    for (name, var) in vars {
        let Some(g) = grads.get(var.as_tensor()) else {
            panic!("no gradient reached `{name}`");
        };
        let g = g.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let dims = var.dims().to_vec();
        let picks: Vec<usize> = if base.len() <= per_var {
            (0..base.len()).collect()
        } else {
            (0..per_var).map(|_| rng.random_range(0..base.len())).collect()
        };
        for i in picks {
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, dims.as_slice(), &Device::Cpu).unwrap()).unwrap();
                f().to_scalar::<f64>().unwrap()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            var.set(&Tensor::from_vec(base.clone(), dims.as_slice(), &Device::Cpu).unwrap()).unwrap();
            let a = g[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}]: autodiff {a:e}, numeric {numeric:e}"));
            }
        }
    }
    worst
}

pub fn randn(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let n: usize = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(v, dims, &Device::Cpu).unwrap()
}

pub fn var(rng: &mut ChaCha8Rng, dims: &[usize]) -> Var {
    Var::from_tensor(&randn(rng, dims)).unwrap()
}

pub fn bits(t: &Tensor) -> Vec<u64> {
    t.flatten_all()
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_vec1::<f64>()
        .unwrap()
        .into_iter()
        .map(f64::to_bits)
        .collect()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Brute-force adaptive average pooling of one `h × w` plane to `oh × ow`,
/// with windows `[floor(i·h/oh), ceil((i+1)·h/oh))`.
pub fn pool_plane(x: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let (y0, y1) = (i * h / oh, ((i + 1) * h).div_ceil(oh));
        for j in 0..ow {
            let (x0, x1) = (j * w / ow, ((j + 1) * w).div_ceil(ow));
            let mut s = 0.0;
            for y in y0..y1 {
                for xx in x0..x1 {
                    s += x[y * w + xx];
                }
            }
            out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
        }
    }
    out
}

/// Reference hierarchical context loss on `(B, C, H, W)` arrays: the mean
/// squared difference at the full size and at each of `levels` (clipped to
/// the map, deduplicated), averaged over levels.
pub fn hcl_oracle(t: &[f64], s: &[f64], dims: [usize; 4], levels: &[usize]) -> f64 {
    let [b, c, h, w] = dims;
    let mut sizes = vec![(h, w)];
    for &l in levels {
        let sz = (l.min(h), l.min(w));
        if !sizes.contains(&sz) {
            sizes.push(sz);
        }
    }
    let plane = h * w;
    let mut total = 0.0;
    for &(oh, ow) in &sizes {
        let mut se = 0.0;
        for p in 0..b * c {
            let pt = pool_plane(&t[p * plane..(p + 1) * plane], h, w, oh, ow);
            let ps = pool_plane(&s[p * plane..(p + 1) * plane], h, w, oh, ow);
            se += pt.iter().zip(&ps).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        total += se / (b * c * oh * ow) as f64;
    }
    total / sizes.len() as f64
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
