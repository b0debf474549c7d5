mod common;

use common::*;
use rand::SeedableRng;
use wm_distill::distill::{add_linear_projection, fit_teacher_pca, FrozenTeacher, Projection};
use wm_distill::rng::Rng;
use wm_distill::tensor::Activation;
use wm_distill::world_model::{LossCoeffs, Preset};

const TOL: f64 = 1e-4;

fn micro_teacher() -> Preset {
    Preset::new("micro-teacher", 4, 6, 1)
}

#[test]
fn original_loss_components_match_finite_differences() {
    let ds = random_dataset(2, 20, 1);
    let coeffs = LossCoeffs::default();
    for act in [Activation::Tanh, Activation::Mish] {
        let mut m = model::<f64>(Preset::micro(), act, 3);
        jitter(&mut m, 0.3, 4);
        let batch = ds.sample_batch(6, coeffs.horizon, &mut Rng::seed_from_u64(5)).unwrap();
        for c in [Component::Consistency, Component::Reward, Component::Value] {
            let e = check_original(&m, &batch, &coeffs, c);
            assert!(e < TOL, "{act:?} {c:?}: {e}");
        }
    }
}

#[test]
fn distillation_terms_match_finite_differences() {
    let ds = random_dataset(10, 40, 2);
    let mut t = model::<f64>(micro_teacher(), Activation::Tanh, 7);
    jitter(&mut t, 0.3, 8);
    let teacher = FrozenTeacher::new(t);
    let mut s = model::<f64>(Preset::micro(), Activation::Tanh, 9);
    jitter(&mut s, 0.3, 10);
    let batch = ds.sample_batch(5, 3, &mut Rng::seed_from_u64(11)).unwrap();

    let e = check_distill(&teacher, &s, &batch, 3, &Projection::None, false);
    assert!(e < TOL, "reward distill {e}");

    let mut linear = s.clone();
    let id = add_linear_projection(&mut linear, 4, &mut Rng::seed_from_u64(12));
    let e = check_distill(&teacher, &linear, &batch, 3, &Projection::Linear(id), true);
    assert!(e < TOL, "linear latent distill {e}");

    let pca = fit_teacher_pca(&teacher, &ds, 2, 1000, &mut Rng::seed_from_u64(13)).unwrap();
    let e = check_distill(&teacher, &s, &batch, 3, &Projection::Pca(pca), true);
    assert!(e < TOL, "pca latent distill {e}");
}
