//! Gradient checks shared by the gradient tests and the acceptance run.
//! Each returns the worst relative error and where it occurred.

use candle_core::{DType, Tensor, Var};
use pat_core::afp::{Afp, AfpConfig};
use pat_core::backbones::{BackboneKind, BackboneSpec, StagedBackbone};
use pat_core::distiller::{DistillConfig, DistillSession, Method};
use pat_core::feature::{Layout, StageFeature, StageShape};
use pat_core::losses::{hcl, kl_distill, reg_loss, HclConfig};
use pat_core::optim::OptimConfig;
use pat_core::params::ParamStore;
use pat_core::raa::{Raa, RaaConfig};

use super::{grad_check, randn, rng, var};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const FLOOR: f64 = 1e-6;

pub type Worst = (f64, String);

fn store_vars(store: &ParamStore) -> Vec<(String, Var)> {
    store.iter().map(|(n, v)| (n.to_string(), v.clone())).collect()
}

fn weighted_sum(t: &Tensor, w: &Tensor) -> Tensor {
    (t * w).unwrap().sum_all().unwrap()
}

fn worse(a: Worst, b: Worst) -> Worst {
    if b.0 > a.0 { b } else { a }
}

pub fn raa_forward() -> Worst {
    let mut r = rng(1);
    let student = [
        StageShape::Spatial { channels: 2, height: 4, width: 4 },
        StageShape::Spatial { channels: 3, height: 2, width: 2 },
        StageShape::Tokens { tokens: 4, dim: 3 },
        StageShape::Spatial { channels: 2, height: 1, width: 1 },
    ];
    let teacher = [
        StageShape::Tokens { tokens: 4, dim: 2 },
        StageShape::Spatial { channels: 2, height: 3, width: 3 },
        StageShape::Spatial { channels: 3, height: 2, width: 2 },
        StageShape::Tokens { tokens: 1, dim: 2 },
    ];
    let mut store = ParamStore::new(4, DType::F64);
    let raa = Raa::new(&mut store, "raa", &RaaConfig::new(16, 4), &student, &teacher).unwrap();
    let inputs: Vec<Var> = student.iter().map(|s| var(&mut r, &s.dims(1))).collect();
    let weights: Vec<Tensor> = teacher.iter().map(|t| randn(&mut r, &t.dims(1))).collect();
    let f = || {
        let feats: Vec<StageFeature> = inputs
            .iter()
            .zip(&student)
            .enumerate()
            .map(|(i, (v, s))| StageFeature::new(v.as_tensor().clone(), s.layout(), i + 1))
            .collect();
        let out = raa.forward(&feats).unwrap();
        out.aligned
            .iter()
            .zip(&weights)
            .map(|(a, w)| weighted_sum(&a.data, w))
            .reduce(|a, b| (a + b).unwrap())
            .unwrap()
    };
    let mut vars = store_vars(&store);
    vars.extend(inputs.iter().enumerate().map(|(i, v)| (format!("input{}", i + 1), v.clone())));
    grad_check(&vars, f, H, 8, FLOOR, 0)
}

fn afp_check(teacher: StageShape, student: StageShape, seed: u64) -> Worst {
    let mut r = rng(seed);
    let mut store = ParamStore::new(seed, DType::F64);
    let shapes_t = [teacher; 4];
    let shapes_s = [student; 4];
    let cfg = AfpConfig { active_stages: vec![2], ..Default::default() };
    let afp = Afp::new(&mut store, "afp", &cfg, &shapes_t, &shapes_s).unwrap();
    // move the zero-initialized layer away from zero so every path carries gradient
    for (name, v) in store.iter() {
        if name.contains("conv2") {
            v.set(&(randn(&mut r, v.dims()) * 0.3).unwrap()).unwrap();
        }
    }
    let x = var(&mut r, &teacher.dims(2));
    let fb = var(&mut r, &teacher.dims(2));
    let w = randn(&mut r, &teacher.dims(2));
    let f = || weighted_sum(&afp.afp_stage(x.as_tensor(), fb.as_tensor(), 2).unwrap(), &w);
    let mut vars: Vec<(String, Var)> = store_vars(&store)
        .into_iter()
        .filter(|(n, _)| !n.contains("student_proj"))
        .collect();
    vars.push(("teacher_feature".into(), x.clone()));
    vars.push(("feedback".into(), fb.clone()));
    grad_check(&vars, f, H, 8, FLOOR, seed)
}

pub fn afp_stage_spatial() -> Worst {
    afp_check(
        StageShape::Spatial { channels: 3, height: 4, width: 4 },
        StageShape::Spatial { channels: 2, height: 2, width: 2 },
        2,
    )
}

pub fn afp_stage_tokens() -> Worst {
    afp_check(
        StageShape::Tokens { tokens: 9, dim: 4 },
        StageShape::Spatial { channels: 2, height: 2, width: 2 },
        3,
    )
}

pub fn hcl_loss() -> Worst {
    let mut r = rng(5);
    let mut worst = (0.0, String::new());
    for dims in [[1usize, 2, 4, 4], [2, 1, 8, 8], [1, 3, 1, 1]] {
        let t = var(&mut r, &dims);
        let s = var(&mut r, &dims);
        let f = || {
            hcl(
                &StageFeature::new(t.as_tensor().clone(), Layout::Spatial, 1),
                &StageFeature::new(s.as_tensor().clone(), Layout::Spatial, 1),
                &HclConfig::default(),
            )
            .unwrap()
        };
        let vars = vec![("teacher".to_string(), t.clone()), ("student".to_string(), s.clone())];
        let (err, at) = grad_check(&vars, f, H, 64, FLOOR, 5);
        worst = worse(worst, (err, format!("{dims:?} {at}")));
    }
    worst
}

pub fn kl() -> Worst {
    let mut r = rng(6);
    let t = var(&mut r, &[3, 5]);
    let s = var(&mut r, &[3, 5]);
    let vars = vec![("teacher".to_string(), t.clone()), ("student".to_string(), s.clone())];
    let mut worst = (0.0, String::new());
    for tau in [1.0, 4.0] {
        let (err, at) = grad_check(&vars, || kl_distill(t.as_tensor(), s.as_tensor(), tau).unwrap(), H, 64, FLOOR, 6);
        worst = worse(worst, (err, format!("τ={tau} {at}")));
    }
    worst
}

pub fn reg() -> Worst {
    let mut r = rng(7);
    let t = randn(&mut r, &[3, 5]);
    let s = var(&mut r, &[3, 5]);
    // the clean side is a constant; only the adapted logits are checked
    let adapted = vec![("adapted".to_string(), s.clone())];
    grad_check(&adapted, || reg_loss(&t, s.as_tensor(), 1.0).unwrap(), H, 64, FLOOR, 7)
}

pub fn train_step_loss() -> Worst {
    let spec = |k| BackboneSpec::new(k, 4, 16);
    let teacher = StagedBackbone::build(&spec(BackboneKind::TinyVit), 11, DType::F64)
        .unwrap()
        .frozen_copy()
        .unwrap();
    let student = StagedBackbone::build(&spec(BackboneKind::TinyMixer), 12, DType::F64).unwrap();
    let mut cfg = DistillConfig::new(Method::Pat, OptimConfig::adamw());
    cfg.raa = RaaConfig::new(16, 4);
    cfg.dtype = DType::F64;
    let mut session = DistillSession::new(cfg, Some(teacher), student).unwrap();
    let mut r = rng(13);
    let x = randn(&mut r, &[2, 3, 16, 16]);
    let y = Tensor::new(&[1u32, 3], &candle_core::Device::Cpu).unwrap();
    // one real step so the feedback path is live
    session.train_step(&x, &y).unwrap();
    let x2 = randn(&mut r, &[2, 3, 16, 16]);
    let mut vars = store_vars(session.student().store());
    vars.extend(store_vars(session.extras()));
    grad_check(&vars, || session.forward(&x2, &y).unwrap().loss, H, 2, FLOOR, 13)
}

/// Every check, by name.
pub fn all() -> Vec<(&'static str, fn() -> Worst)> {
    vec![
        ("raa_forward", raa_forward),
        ("afp_stage (spatial)", afp_stage_spatial),
        ("afp_stage (tokens)", afp_stage_tokens),
        ("hcl", hcl_loss),
        ("kl_distill", kl),
        ("reg_loss", reg),
        ("train_step", train_step_loss),
    ]
}
