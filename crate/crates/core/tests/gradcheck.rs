//! Analytic gradients against central finite differences, f64, eval-mode normalization.

use candle_core::{DType, Device, Tensor, Var};
use covidscreen_core::data::Label;
use covidscreen_core::nn::{Model, ModelSpec, Task};
use covidscreen_core::train::{bce_loss, target_for};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-4;
const MAX_REL_ERR: f64 = 1e-3;

fn loss(model: &Model, x: &Tensor, y: &Tensor) -> Tensor {
    bce_loss(&model.forward(x, false).unwrap(), y, None).unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

fn nudge(var: &Var, index: usize, delta: f64) {
    let t = var.as_tensor();
    let mut v = t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    v[index] += delta;
    var.set(&Tensor::from_vec(v, t.dims(), t.device()).unwrap()).unwrap();
}

/// Checks `per_prefix` random coordinates under each prefix; returns the number checked.
fn check(model: &Model, label: Label, prefixes: &[&str], per_prefix: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [h, w] = model.spec().input_size;
    let xs: Vec<f64> = (0..3 * h * w).map(|_| rng.random_range(-1.5..1.5)).collect();
    let x = Tensor::from_vec(xs, (1, 3, h, w), &Device::Cpu).unwrap();
    let t = target_for(model.spec().task, label).unwrap();
    let y = Tensor::from_vec(t.clone(), (1, t.len()), &Device::Cpu).unwrap();

    let grads = loss(model, &x, &y).backward().unwrap();
    let params = model.trainable();
    let mut checked = 0;
    for prefix in prefixes {
        let pool: Vec<&(String, Var)> = params.iter().filter(|(n, _)| n.starts_with(prefix)).collect();
        assert!(!pool.is_empty(), "no parameters under {prefix}");
        let mut done = 0;
        let mut tries = 0;
        while done < per_prefix {
            tries += 1;
            assert!(tries < 50 * per_prefix, "too few informative coordinates under {prefix}");
            let (name, var) = pool[rng.random_range(0..pool.len())];
            let g = grads.get(var.as_tensor()).expect("gradient present").flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let i = rng.random_range(0..g.len());
            nudge(var, i, EPS);
            let up = scalar(&loss(model, &x, &y));
            nudge(var, i, -2.0 * EPS);
            let down = scalar(&loss(model, &x, &y));
            nudge(var, i, EPS);
            let numeric = (up - down) / (2.0 * EPS);
            let analytic = g[i];
            // coordinates with no effect (dead units) carry no information
            if analytic.abs() < 1e-9 && numeric.abs() < 1e-9 {
                continue;
            }
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
            assert!(rel < MAX_REL_ERR, "{name}[{i}]: analytic {analytic:e}, numeric {numeric:e}, rel {rel:e}");
            done += 1;
            checked += 1;
        }
    }
    checked
}

#[test]
fn ct_attention_and_head_gradients() {
    let model = Model::new(&ModelSpec::tiny(Task::Ct, 64), DType::F64, 21).unwrap();
    let n = check(&model, Label::Covid19, &["attention.", "head."], 12, 1);
    assert!(n >= 20);
}

#[test]
fn cxr_attention_and_head_gradients() {
    let model = Model::new(&ModelSpec::tiny(Task::Cxr, 64), DType::F64, 22).unwrap();
    let n = check(&model, Label::Normal, &["attention.", "head."], 10, 2);
    assert!(n >= 20);
}
