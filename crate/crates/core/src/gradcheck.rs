//! Central finite-difference checks of every differentiable operation.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::Sample;
use crate::error::Result;
use crate::geometry::{CameraIntrinsics, FeatureBox, VoxelGrid};
use crate::integral::{box_mean_backward, IntegralMap};
use crate::network::{Model, ModelConfig, StageConfig};
use crate::oft::PoolPlan;
use crate::synth::{generate_scene, SceneConfig};
use crate::targets::{encode_targets, record_detection_loss, Box3D, ClassStats, DetectionVars, LossConfig};
use crate::tensor::{Backward, Graph, ParamId, Tensor, Var};

/// Step of the central differences.
pub const STEP: f64 = 1e-6;
/// Tolerance for single operations.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for parameters probed through the whole model.
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Coordinates checked per input tensor.
const PROBES: usize = 24;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub rel_error: f64,
    pub tolerance: f64,
    pub coordinates: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.rel_error < self.tolerance
    }
}

/// `||a - n|| / max(||a||, ||n||)`, or the absolute gap when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Compares `analytic[i]` to central differences of `eval` on sampled
/// coordinates of every input.
fn compare<E>(name: &str, inputs: &[Tensor<f64>], analytic: &[Tensor<f64>], eval: E, tolerance: f64, rng: &mut ChaCha8Rng) -> Result<CheckResult>
where
    E: Fn(&[Tensor<f64>]) -> Result<f64>,
{
    let (mut a, mut n) = (Vec::new(), Vec::new());
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let picks = sample(rng, input.numel(), PROBES.min(input.numel())).into_vec();
        for j in picks {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + STEP;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - STEP;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            n.push((up - down) / (2.0 * STEP));
            a.push(analytic[i].data()[j]);
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        rel_error: relative_error(&a, &n),
        tolerance,
        coordinates: a.len(),
    })
}

/// `sum(c * x)` for a constant `c`.
struct WeightedSum(Tensor<f64>);

impl Backward<f64> for WeightedSum {
    fn backward(&self, _: &[&Tensor<f64>], _: &Tensor<f64>, grad: &Tensor<f64>, _: &[bool]) -> Result<Vec<Option<Tensor<f64>>>> {
        let g = grad.data()[0];
        Ok(vec![Some(self.0.map(|c| c * g))])
    }

    fn name(&self) -> &'static str {
        "weighted_sum"
    }
}

fn weighted_sum(g: &mut Graph<f64>, x: Var, c: &Tensor<f64>) -> Result<Var> {
    let value = Tensor::scalar(g.value(x).dot(c)?);
    Ok(g.record(value, &[x], WeightedSum(c.clone())))
}

/// Checks a graph-recorded function of `inputs`, projected to a scalar by
/// random weights when it is not one already.
fn graph_check<B>(name: &str, inputs: Vec<Tensor<f64>>, build: B, tolerance: f64, rng: &mut ChaCha8Rng) -> Result<CheckResult>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().enumerate().map(|(i, t)| g.parameter(ParamId(i), t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let weights = random_tensor(g.value(out).shape(), rng);
    let loss = weighted_sum(&mut g, out, &weights)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = (0..inputs.len()).map(|i| grads.get(ParamId(i)).expect("registered").clone()).collect();
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        g.value(out).dot(&weights)
    };
    compare(name, &inputs, &analytic, eval, tolerance, rng)
}

fn pool_setup() -> Result<(VoxelGrid, CameraIntrinsics)> {
    let grid = VoxelGrid {
        extent_x: 2.0,
        extent_y: 1.0,
        extent_z: 2.0,
        resolution: 0.5,
        y0: 1.0,
        z_min: 2.0,
    };
    Ok((grid, CameraIntrinsics::new(12.0, 7.5, 3.0, 16, 12)?))
}

fn op_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let tol = OP_TOLERANCE;
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
        let inputs = vec![random_tensor(&[2, 5, 6], rng), random_tensor(&[3, 2, k, k], rng), random_tensor(&[3], rng)];
        out.push(graph_check(
            &format!("conv2d k{k} s{stride}"),
            inputs,
            |g, v| g.conv2d(v[0], v[1], v[2], stride, pad),
            tol,
            rng,
        )?);
    }
    let inputs = vec![random_tensor(&[4, 3, 3], rng), random_tensor(&[4], rng), random_tensor(&[4], rng)];
    out.push(graph_check("group_norm", inputs, |g, v| g.group_norm(v[0], 2, v[1], v[2], 1e-5), tol, rng)?);

    let away = |rng: &mut ChaCha8Rng, shape: &[usize]| {
        Tensor::from_fn(shape, |_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
    };
    out.push(graph_check("relu", vec![away(rng, &[3, 4, 4])], |g, v| Ok(g.relu(v[0])), tol, rng)?);
    out.push(graph_check("sigmoid", vec![random_tensor(&[3, 4, 4], rng)], |g, v| Ok(g.sigmoid(v[0])), tol, rng)?);

    // box means straight from the integral image
    let f = random_tensor(&[3, 9, 11], rng);
    let boxes: Vec<FeatureBox> = (0..20)
        .map(|_| {
            let (u1, v1) = (rng.gen_range(0..10), rng.gen_range(0..8));
            FeatureBox {
                u1,
                v1,
                u2: rng.gen_range(u1 + 1..=11),
                v2: rng.gen_range(v1 + 1..=9),
            }
        })
        .collect();
    let c = random_tensor(&[boxes.len(), 3], rng);
    let analytic = box_mean_backward(&c, &boxes, [3, 9, 11])?;
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let map = IntegralMap::new(&xs[0])?;
        let mut acc = 0.0;
        for (i, b) in boxes.iter().enumerate() {
            let m: Vec<f64> = map.box_mean(b)?;
            acc += m.iter().enumerate().map(|(ch, v)| v * c.data()[i * 3 + ch]).sum::<f64>();
        }
        Ok(acc)
    };
    out.push(compare("box_mean", std::slice::from_ref(&f), &[analytic], eval, tol, rng)?);

    let (grid, intr) = pool_setup()?;
    let plan = Arc::new(PoolPlan::new(&grid, &intr, 0.5, 8, 6)?);
    out.push(graph_check(
        "voxel_features",
        vec![random_tensor(&[3, 6, 8], rng)],
        |g, v| g.voxel_pool(v[0], plan.clone()),
        tol,
        rng,
    )?);
    out.push(graph_check(
        "collapse",
        vec![random_tensor(&[3, 4, 2, 5], rng), random_tensor(&[2, 3, 3], rng)],
        |g, v| g.collapse(v[0], v[1]),
        tol,
        rng,
    )?);
    Ok(out)
}

pub fn small_model_config(layers: usize) -> ModelConfig {
    ModelConfig {
        frontend: vec![StageConfig { channels: 4, stride: 4 }, StageConfig { channels: 8, stride: 2 }],
        scales: vec![4, 8],
        channels: 4,
        topdown_layers: layers,
        classes: ClassStats { names: vec!["Car".into()], mean_dims: vec![[0.8, 0.7, 1.5]] },
        grid: VoxelGrid {
            extent_x: 4.0,
            extent_y: 1.0,
            extent_z: 4.0,
            resolution: 0.5,
            y0: 1.65,
            z_min: 4.0,
        },
        ..ModelConfig::default()
    }
}

pub fn small_sample(seed: u64) -> Result<Sample> {
    let cfg = SceneConfig {
        width: 64,
        height: 32,
        focal: 40.0,
        cu: 31.5,
        cv: 12.0,
        min_objects: 1,
        max_objects: 2,
        x_min: -2.0,
        x_max: 2.0,
        z_min: 4.0,
        z_max: 8.0,
        ..SceneConfig::default()
    };
    generate_scene(&cfg, &small_model_config(0).classes, seed)
}

fn block_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let model = Model::<f64>::new(ModelConfig { init_seed: rng.gen(), ..small_model_config(2) })?;
    let blocks: Vec<String> = model.names().iter().filter(|n| n.starts_with("topdown.0.")).cloned().collect();
    let mut inputs = vec![random_tensor(&[4, 5, 6], rng)];
    inputs.extend(blocks.iter().map(|n| model.param(n).expect("named").clone()));
    out.push(graph_check(
        "topdown block",
        inputs,
        |g, v| {
            let p = bind_with(&model, g, &blocks, &v[1..]);
            model.topdown_forward(g, &p, v[0])
        },
        OP_TOLERANCE,
        rng,
    )?);

    let heads: Vec<String> = model.names().iter().filter(|n| n.starts_with("head.")).cloned().collect();
    let mut inputs = vec![random_tensor(&[4, 5, 6], rng)];
    inputs.extend(heads.iter().map(|n| random_tensor(model.param(n).expect("named").shape(), rng)));
    out.push(graph_check(
        "heads",
        inputs,
        |g, v| {
            let p = bind_with(&model, g, &heads, &v[1..]);
            let d = model.heads_forward(g, &p, v[0])?;
            let parts = [
                g.sum(d.confidence),
                g.sum(d.position),
                g.sum(d.dimension),
                g.sum(d.angle),
            ];
            let mut acc = parts[0];
            for (i, &q) in parts.iter().enumerate().skip(1) {
                let s = g.scale(q, 0.5 + i as f64);
                acc = g.add(acc, s)?;
            }
            Ok(acc)
        },
        OP_TOLERANCE,
        rng,
    )?);

    out.push(graph_check(
        "l1_loss",
        vec![random_tensor(&[3, 4], rng)],
        |g, v| {
            let target = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.71).sin() * 0.5);
            let weight = Tensor::from_fn(&[3, 4], |i| if i % 3 == 0 { 1e-2 } else { 1.0 });
            g.l1_loss(v[0], target, weight)
        },
        OP_TOLERANCE,
        rng,
    )?);

    let cfg = small_model_config(0);
    let (nz, nx) = (cfg.grid.nz(), cfg.grid.nx());
    let objects = [Box3D {
        center: [0.3, 1.3, 5.9],
        dims: [0.8, 0.7, 1.5],
        yaw: 0.4,
        class_id: 0,
    }];
    let targets = encode_targets::<f64>(&objects, &cfg.grid, cfg.sigma, &cfg.classes)?;
    let inputs = vec![
        Tensor::from_fn(&[1, nz, nx], |_| rng.gen_range(0.0..1.0)),
        random_tensor(&[3, nz, nx], rng),
        random_tensor(&[3, nz, nx], rng),
        random_tensor(&[2, nz, nx], rng),
    ];
    out.push(graph_check(
        "detection_loss",
        inputs,
        |g, v| {
            let vars = DetectionVars {
                confidence: v[0],
                position: v[1],
                dimension: v[2],
                angle: v[3],
            };
            Ok(record_detection_loss(g, &vars, &targets, &LossConfig::default())?.0)
        },
        OP_TOLERANCE,
        rng,
    )?);
    Ok(out)
}

/// Binds `model`, substituting the given graph values for the named parameters.
fn bind_with<'m>(model: &'m Model<f64>, g: &mut Graph<f64>, names: &[String], vars: &[Var]) -> crate::network::Bound<'m, f64> {
    let mut bound = model.bind(g, false);
    for (name, &v) in names.iter().zip(vars) {
        bound.replace(name, v);
    }
    bound
}

/// Perturbs single parameters of every module and compares against the
/// full-model gradient of the detection loss.
pub fn model_probe(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let model = Model::<f64>::new(ModelConfig { init_seed: rng.gen(), ..small_model_config(2) })?;
    let sample = small_sample(rng.gen_range(0..1000))?;
    let loss = LossConfig::default();
    let (_, grads) = model.sample_gradients(&sample, &loss)?;
    let prefixes = ["frontend.0.0.conv.weight", "frontend.1.0.gn.gamma", "lateral.4.weight", "lateral.8.weight", "oft.collapse", "topdown.0.conv1.weight", "topdown.0.gn2.beta", "head.confidence.weight", "head.position.bias", "head.dimension.weight", "head.angle.weight"];
    let (mut a, mut n) = (Vec::new(), Vec::new());
    for name in prefixes {
        let id = model.param_id(name).expect("probe exists");
        let numel = model.params()[id.0].numel();
        for j in sample_indices(rng, numel, 3) {
            let eval = |delta: f64| -> Result<f64> {
                let mut m = model.clone();
                m.params_mut()[id.0].data_mut()[j] += delta;
                Ok(m.sample_gradients(&sample, &loss)?.0.total())
            };
            n.push((eval(STEP)? - eval(-STEP)?) / (2.0 * STEP));
            a.push(grads.get(id).expect("registered").data()[j]);
        }
    }
    Ok(CheckResult {
        name: "full model probe".into(),
        rel_error: relative_error(&a, &n),
        tolerance: MODEL_TOLERANCE,
        coordinates: a.len(),
    })
}

fn sample_indices(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    sample(rng, n, k.min(n)).into_vec()
}

/// Every check with a fixed seed.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = op_checks(&mut rng)?;
    out.extend(block_checks(&mut rng)?);
    out.push(model_probe(&mut rng)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0], &[1.1]) - 0.1 / 1.1).abs() < 1e-12);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&[5], &mut rng);
        let wrong = x.map(|v| 3.0 * v);
        let r = compare("square", std::slice::from_ref(&x), &[wrong], |xs| Ok(xs[0].data().iter().map(|v| v * v).sum()), 1e-4, &mut rng).unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn op_suite_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for r in op_checks(&mut rng).unwrap().into_iter().chain(block_checks(&mut rng).unwrap()) {
            assert!(r.passed(), "{r:?}");
        }
    }
}
