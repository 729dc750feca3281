//! The trainable detector: strided conv front-end, per-scale projections,
//! orthographic feature transform, residual topdown network and 1x1 heads.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::decoder::{detect, DecodeConfig, Detection};
use crate::error::{ensure, Error, Result};
use crate::geometry::{CameraIntrinsics, VoxelGrid};
use crate::oft::PoolPlan;
use crate::par;
use crate::targets::{encode_targets, record_detection_loss, ClassStats, DetectionMaps, DetectionVars, LossComponents, LossConfig};
use crate::tensor::io::{read_weights, write_weights};
use crate::tensor::{sgd_step, Gradients, Graph, OptimState, ParamId, Real, Tensor, Var};

/// One front-end stage: `log2(stride)` stride-2 conv blocks (a single
/// stride-1 block when `stride == 1`), each conv3x3 -> group norm -> relu.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub frontend: Vec<StageConfig>,
    /// Downsampling denominators of the features fed to the transform.
    pub scales: Vec<usize>,
    /// Common channel count after projection, through the topdown network.
    pub channels: usize,
    /// Conv layers in the topdown network; two per residual unit.
    pub topdown_layers: usize,
    pub classes: ClassStats,
    pub grid: VoxelGrid,
    /// Width of the confidence Gaussian and unit of position offsets, metres.
    pub sigma: f64,
    pub group_norm_groups: usize,
    pub group_norm_eps: f64,
    /// Initial confidence-head bias (pre-sigmoid).
    pub confidence_bias: f64,
    /// Seed of the parameter initialisation.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frontend: vec![
                StageConfig { channels: 16, stride: 4 },
                StageConfig { channels: 32, stride: 2 },
                StageConfig { channels: 64, stride: 2 },
                StageConfig { channels: 64, stride: 2 },
            ],
            scales: vec![8, 16, 32],
            channels: 32,
            topdown_layers: 8,
            classes: ClassStats::default(),
            grid: VoxelGrid::toy(),
            sigma: 1.0,
            group_norm_groups: 16,
            group_norm_eps: 1e-5,
            confidence_bias: 0.0,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Cumulative stride after each stage.
    pub fn stage_strides(&self) -> Vec<usize> {
        self.frontend
            .iter()
            .scan(1usize, |acc, s| {
                *acc *= s.stride;
                Some(*acc)
            })
            .collect()
    }

    pub fn coarsest_scale(&self) -> usize {
        self.scales.iter().copied().max().unwrap_or(1)
    }

    /// Group count used for `c` channels.
    pub fn groups_for(&self, c: usize) -> usize {
        if c < self.group_norm_groups {
            c
        } else {
            self.group_norm_groups
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.classes.validate()?;
        ensure!(!self.frontend.is_empty(), Config, "front-end needs at least one stage");
        for s in &self.frontend {
            ensure!(s.channels > 0, Config, "front-end stage with zero channels");
            ensure!(s.stride.is_power_of_two(), Config, "stage stride {} is not a power of two", s.stride);
        }
        ensure!(!self.scales.is_empty(), Config, "at least one feature scale is required");
        let strides = self.stage_strides();
        for s in &self.scales {
            ensure!(strides.contains(s), Config, "scale 1/{s} is not produced by the front-end (strides {strides:?})");
        }
        ensure!(self.channels > 0, Config, "channel count must be positive");
        ensure!(self.topdown_layers.is_multiple_of(2), Config, "topdown layer count {} must be even", self.topdown_layers);
        ensure!(self.sigma > 0.0, Config, "sigma must be positive");
        ensure!(self.group_norm_groups > 0 && self.group_norm_eps > 0.0, Config, "group norm needs positive groups and eps");
        let widths = self.frontend.iter().map(|s| s.channels).chain([self.channels]);
        for c in widths {
            ensure!(c % self.groups_for(c) == 0, Config, "{} groups do not divide {c} channels", self.groups_for(c));
        }
        Ok(())
    }

    pub fn class_count(&self) -> usize {
        self.classes.class_count()
    }
}

/// Maps an image in `[0, 1]` to the network input range.
pub fn normalize_image<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let (half, scale) = (T::from_f64(0.5), T::from_f64(4.0));
    t.map(|v| (v - half) * scale)
}

/// Named parameters plus the configuration that shaped them.
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

/// Parameters of a forward pass, registered as graph leaves.
pub struct Bound<'m, T> {
    model: &'m Model<T>,
    vars: Vec<Var>,
}

impl<T> Bound<'_, T> {
    fn var(&self, name: &str) -> Var {
        self.vars[self.model.index[name]]
    }

    /// Uses `var` in place of the named parameter.
    pub fn replace(&mut self, name: &str, var: Var) {
        let i = self.model.index[name];
        self.vars[i] = var;
    }
}

impl<T: Real> Model<T> {
    /// Fresh model with seeded fan-in uniform initialisation.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut m = Model {
            config: config.clone(),
            names: Vec::new(),
            params: Vec::new(),
            index: HashMap::new(),
        };
        let conv = |m: &mut Model<T>, rng: &mut ChaCha8Rng, name: &str, cout: usize, cin: usize, k: usize, bound_scale: f64| {
            let fan_in = (cin * k * k) as f64;
            let bound = bound_scale * (6.0 / fan_in).sqrt();
            let w = Tensor::from_fn(&[cout, cin, k, k], |_| T::from_f64(rng.gen_range(-bound..bound)));
            m.push(&format!("{name}.weight"), w);
            m.push(&format!("{name}.bias"), Tensor::zeros(&[cout]));
        };
        let gn = |m: &mut Model<T>, name: &str, c: usize| {
            m.push(&format!("{name}.gamma"), Tensor::full(&[c], T::ONE));
            m.push(&format!("{name}.beta"), Tensor::zeros(&[c]));
        };
        let mut cin = 3;
        for (i, stage) in config.frontend.iter().enumerate() {
            for b in 0..blocks_in(stage) {
                let name = format!("frontend.{i}.{b}");
                conv(&mut m, &mut rng, &format!("{name}.conv"), stage.channels, cin, 3, 1.0);
                gn(&mut m, &format!("{name}.gn"), stage.channels);
                cin = stage.channels;
            }
        }
        let strides = config.stage_strides();
        for &s in &config.scales {
            let stage = strides.iter().position(|&x| x == s).expect("validated scale");
            conv(&mut m, &mut rng, &format!("lateral.{s}"), config.channels, config.frontend[stage].channels, 1, 1.0);
        }
        let (n, ny) = (config.channels, config.grid.ny());
        let collapse = Tensor::from_fn(&[ny, n, n], |i| {
            let (r, c) = ((i / n) % n, i % n);
            let noise = rng.gen_range(-0.01..0.01);
            T::from_f64(if r == c { 1.0 + noise } else { noise })
        });
        m.push("oft.collapse", collapse);
        for u in 0..config.topdown_layers / 2 {
            conv(&mut m, &mut rng, &format!("topdown.{u}.conv1"), n, n, 3, 1.0);
            gn(&mut m, &format!("topdown.{u}.gn1"), n);
            conv(&mut m, &mut rng, &format!("topdown.{u}.conv2"), n, n, 3, 1.0);
            gn(&mut m, &format!("topdown.{u}.gn2"), n);
        }
        let k = config.class_count();
        for (head, width) in HEADS.iter().zip([k, 3 * k, 3 * k, 2 * k]) {
            conv(&mut m, &mut rng, &format!("head.{head}"), width, n, 1, 0.1);
        }
        let b = T::from_f64(config.confidence_bias);
        m.param_mut("head.confidence.bias").expect("head exists").data_mut().fill(b);
        Ok(m)
    }

    fn push(&mut self, name: &str, t: Tensor<T>) {
        self.index.insert(name.to_string(), self.params.len());
        self.names.push(name.to_string());
        self.params.push(t);
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter in `g`, trainable or constant.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound<'_, T> {
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| if trainable { g.parameter(ParamId(i), p.clone()) } else { g.constant(p.clone()) })
            .collect();
        Bound { model: self, vars }
    }

    fn conv_gn_relu(&self, g: &mut Graph<T>, p: &Bound<'_, T>, x: Var, name: &str, stride: usize, relu: bool) -> Result<Var> {
        let c = g.conv2d(x, p.var(&format!("{name}.conv.weight")), p.var(&format!("{name}.conv.bias")), stride, 1)?;
        let channels = g.value(c).shape()[0];
        let n = g.group_norm(
            c,
            self.config.groups_for(channels),
            p.var(&format!("{name}.gn.gamma")),
            p.var(&format!("{name}.gn.beta")),
            self.config.group_norm_eps,
        )?;
        Ok(if relu { g.relu(n) } else { n })
    }

    /// Projected `n`-channel feature maps, one per configured scale.
    pub fn frontend_forward(&self, g: &mut Graph<T>, p: &Bound<'_, T>, image: Var) -> Result<Vec<Var>> {
        let shape = g.value(image).shape().to_vec();
        ensure!(shape.len() == 3 && shape[0] == 3, Dimension, "image must be [3,H,W], got {shape:?}");
        let s = self.config.coarsest_scale();
        ensure!(
            shape[1].is_multiple_of(s) && shape[2].is_multiple_of(s),
            Contract,
            "image extents {}x{} must be multiples of {s}; pad or crop first",
            shape[2],
            shape[1]
        );
        let strides = self.config.stage_strides();
        let mut x = image;
        let mut taps = HashMap::new();
        for (i, stage) in self.config.frontend.iter().enumerate() {
            for b in 0..blocks_in(stage) {
                let stride = if stage.stride == 1 { 1 } else { 2 };
                x = self.conv_gn_relu(g, p, x, &format!("frontend.{i}.{b}"), stride, true)?;
            }
            taps.insert(strides[i], x);
        }
        self.config
            .scales
            .iter()
            .map(|s| g.conv2d(taps[s], p.var(&format!("lateral.{s}.weight")), p.var(&format!("lateral.{s}.bias")), 1, 0))
            .collect()
    }

    /// Pools every scale into the voxel lattice, sums and collapses to `[n, nz, nx]`.
    pub fn oft_forward(&self, g: &mut Graph<T>, p: &Bound<'_, T>, features: &[Var], intr: &CameraIntrinsics) -> Result<Var> {
        let mut pooled = Vec::with_capacity(features.len());
        for (f, &s) in features.iter().zip(&self.config.scales) {
            let shape = g.value(*f).shape().to_vec();
            let plan = Arc::new(PoolPlan::new(&self.config.grid, intr, 1.0 / s as f64, shape[2], shape[1])?);
            pooled.push(g.voxel_pool(*f, plan)?);
        }
        let fused = g.add_all(&pooled)?;
        g.collapse(fused, p.var("oft.collapse"))
    }

    /// `L/2` post-activation residual units; identity when `L = 0`.
    pub fn topdown_forward(&self, g: &mut Graph<T>, p: &Bound<'_, T>, h: Var) -> Result<Var> {
        let mut x = h;
        for u in 0..self.config.topdown_layers / 2 {
            let name = format!("topdown.{u}");
            let mut y = g.conv2d(x, p.var(&format!("{name}.conv1.weight")), p.var(&format!("{name}.conv1.bias")), 1, 1)?;
            let groups = self.config.groups_for(self.config.channels);
            let eps = self.config.group_norm_eps;
            y = g.group_norm(y, groups, p.var(&format!("{name}.gn1.gamma")), p.var(&format!("{name}.gn1.beta")), eps)?;
            y = g.relu(y);
            y = g.conv2d(y, p.var(&format!("{name}.conv2.weight")), p.var(&format!("{name}.conv2.bias")), 1, 1)?;
            y = g.group_norm(y, groups, p.var(&format!("{name}.gn2.gamma")), p.var(&format!("{name}.gn2.beta")), eps)?;
            let sum = g.add(x, y)?;
            x = g.relu(sum);
        }
        Ok(x)
    }

    /// The four 1x1 heads; confidence goes through a sigmoid.
    pub fn heads_forward(&self, g: &mut Graph<T>, p: &Bound<'_, T>, x: Var) -> Result<DetectionVars> {
        let mut out = [x; 4];
        for (i, head) in HEADS.iter().enumerate() {
            out[i] = g.conv2d(x, p.var(&format!("head.{head}.weight")), p.var(&format!("head.{head}.bias")), 1, 0)?;
        }
        Ok(DetectionVars {
            confidence: g.sigmoid(out[0]),
            position: out[1],
            dimension: out[2],
            angle: out[3],
        })
    }

    /// Full forward pass of a `[3, H, W]` image already in `[0, 1]`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound<'_, T>, image: &Tensor<T>, intr: &CameraIntrinsics) -> Result<DetectionVars> {
        let x = g.constant(normalize_image(image));
        let features = self.frontend_forward(g, p, x)?;
        let h = self.oft_forward(g, p, &features, intr)?;
        let t = self.topdown_forward(g, p, h)?;
        self.heads_forward(g, p, t)
    }

    /// Prediction maps without recording gradients.
    pub fn predict(&self, image: &Tensor<T>, intr: &CameraIntrinsics) -> Result<DetectionMaps<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let vars = self.forward(&mut g, &p, image, intr)?;
        vars.values(&g)
    }

    pub fn detect(&self, sample: &Sample, cfg: &DecodeConfig) -> Result<Vec<Detection>> {
        let maps = self.predict(&sample.image.to_tensor(), &sample.intrinsics)?;
        detect(&maps, &self.config.grid, self.config.sigma, &self.config.classes, cfg)
    }

    /// Loss of one sample and the gradient of every parameter.
    pub fn sample_gradients(&self, sample: &Sample, loss: &LossConfig) -> Result<(LossComponents, Gradients<T>)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, true);
        let vars = self.forward(&mut g, &p, &sample.image.to_tensor(), &sample.intrinsics)?;
        let targets = encode_targets(&sample.objects, &self.config.grid, self.config.sigma, &self.config.classes)?;
        let (total, parts) = record_detection_loss(&mut g, &vars, &targets, loss)?;
        if !g.value(total).all_finite() {
            return Err(Error::NonFinite("detection loss"));
        }
        let v = |x: Var| g.value(x).data()[0].to_f64();
        let components = LossComponents {
            confidence: v(parts[0]),
            position: v(parts[1]),
            dimension: v(parts[2]),
            angle: v(parts[3]),
        };
        Ok((components, g.backward(total)?))
    }

    /// Summed losses and gradients over a batch. Per-sample results are
    /// combined in batch order, so the sum does not depend on thread count.
    pub fn batch_gradients(&self, batch: &[Sample], loss: &LossConfig) -> Result<(LossComponents, Gradients<T>)> {
        ensure!(!batch.is_empty(), Contract, "empty training batch");
        let results = par::map_range(batch.len(), |i| self.sample_gradients(&batch[i], loss));
        let mut iter = results.into_iter();
        let (mut total, mut grads) = iter.next().expect("non-empty")?;
        for r in iter {
            let (c, g) = r?;
            total.add(&c);
            grads.accumulate(&g)?;
        }
        Ok((total, grads))
    }

    /// One SGD step on the summed batch loss; returns the pre-step losses.
    pub fn train_step(&mut self, batch: &[Sample], optim: &mut OptimState<T>, loss: &LossConfig) -> Result<LossComponents> {
        let (components, grads) = self.batch_gradients(batch, loss)?;
        let zeros: Vec<Tensor<T>>;
        let refs: Vec<&Tensor<T>> = {
            zeros = self.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            (0..self.params.len()).map(|i| grads.get(ParamId(i)).unwrap_or(&zeros[i])).collect()
        };
        for r in &refs {
            if !r.all_finite() {
                return Err(Error::NonFinite("parameter gradient"));
            }
        }
        sgd_step(&mut self.params, &refs, optim)?;
        Ok(components)
    }

    /// Optimiser state matching this model's parameters.
    pub fn optimizer(&self, learning_rate: f64, momentum: f64) -> OptimState<T> {
        OptimState::new(self.params.iter(), learning_rate, momentum)
    }

    pub fn write_weights<W: Write>(&self, out: W) -> Result<()> {
        let named: Vec<(&str, &Tensor<T>)> = self.names.iter().map(String::as_str).zip(&self.params).collect();
        write_weights(out, &named)
    }

    /// Loads weights for `config`; names and shapes must match exactly.
    pub fn read_weights<R: Read>(config: ModelConfig, input: R) -> Result<Self> {
        let mut m = Self::new(config)?;
        let loaded = read_weights::<T, _>(input)?;
        ensure!(
            loaded.len() == m.params.len(),
            WeightFormat,
            "file holds {} tensors, model expects {}",
            loaded.len(),
            m.params.len()
        );
        for (name, t) in loaded {
            let i = *m
                .index
                .get(&name)
                .ok_or_else(|| Error::WeightFormat(format!("unexpected tensor {name:?}")))?;
            ensure!(
                t.shape() == m.params[i].shape(),
                WeightFormat,
                "tensor {name:?} has shape {:?}, expected {:?}",
                t.shape(),
                m.params[i].shape()
            );
            m.params[i] = t;
        }
        Ok(m)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_weights(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(config: ModelConfig, path: &std::path::Path) -> Result<Self> {
        let r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_weights(config, r)
    }
}

const HEADS: [&str; 4] = ["confidence", "position", "dimension", "angle"];

fn blocks_in(stage: &StageConfig) -> usize {
    (stage.stride.trailing_zeros() as usize).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use crate::synth::{generate_scene, SceneConfig};
    use crate::tensor::ops;

    fn small_config(layers: usize) -> ModelConfig {
        ModelConfig {
            frontend: vec![
                StageConfig { channels: 4, stride: 4 },
                StageConfig { channels: 8, stride: 2 },
            ],
            scales: vec![4, 8],
            channels: 4,
            topdown_layers: layers,
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

    #[test]
    fn default_config_is_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.stage_strides(), vec![4, 8, 16, 32]);
        let bad = ModelConfig { topdown_layers: 3, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { scales: vec![8, 64], ..ModelConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn frontend_extents_and_channels() {
        let m = Model::<f32>::new(ModelConfig::default()).unwrap();
        let mut g = Graph::new();
        let p = m.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[3, 384, 1248]));
        let feats = m.frontend_forward(&mut g, &p, x).unwrap();
        assert_eq!(g.value(feats[0]).shape(), &[32, 48, 156]);
        assert_eq!(g.value(feats[1]).shape(), &[32, 24, 78]);
        assert_eq!(g.value(feats[2]).shape(), &[32, 12, 39]);
        let odd = g.constant(Tensor::zeros(&[3, 100, 64]));
        assert!(m.frontend_forward(&mut g, &p, odd).is_err());
    }

    #[test]
    fn zero_image_zero_biases_give_zero_features() {
        let m = Model::<f64>::new(small_config(2)).unwrap();
        let mut g = Graph::new();
        let p = m.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[3, 32, 64]));
        for f in m.frontend_forward(&mut g, &p, x).unwrap() {
            assert!(g.value(f).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn topdown_identity_and_zero_blocks() {
        let m = Model::<f64>::new(small_config(0)).unwrap();
        let mut g = Graph::new();
        let p = m.bind(&mut g, false);
        let input = Tensor::from_fn(&[4, 8, 8], |i| ((i * 7) % 13) as f64 - 6.0);
        let h = g.constant(input.clone());
        let out = m.topdown_forward(&mut g, &p, h).unwrap();
        assert_eq!(g.value(out), &input);

        let mut m2 = Model::<f64>::new(small_config(2)).unwrap();
        for name in ["topdown.0.conv2.weight", "topdown.0.conv2.bias"] {
            m2.param_mut(name).unwrap().data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let p = m2.bind(&mut g, false);
        let h = g.constant(input.clone());
        let out = m2.topdown_forward(&mut g, &p, h).unwrap();
        assert_eq!(g.value(out), &ops::relu(&input));
    }

    #[test]
    fn topdown_matches_primitive_composition() {
        let m = Model::<f64>::new(small_config(2)).unwrap();
        let input = Tensor::from_fn(&[4, 6, 5], |i| (i as f64 * 0.37).sin());
        let mut g = Graph::new();
        let p = m.bind(&mut g, false);
        let h = g.constant(input.clone());
        let out = m.topdown_forward(&mut g, &p, h).unwrap();
        let w = |n: &str| m.param(n).unwrap();
        let y = ops::conv2d(&input, w("topdown.0.conv1.weight"), w("topdown.0.conv1.bias"), 1, 1).unwrap();
        let y = ops::group_norm(&y, 4, w("topdown.0.gn1.gamma"), w("topdown.0.gn1.beta"), 1e-5).unwrap().0;
        let y = ops::relu(&y);
        let y = ops::conv2d(&y, w("topdown.0.conv2.weight"), w("topdown.0.conv2.bias"), 1, 1).unwrap();
        let y = ops::group_norm(&y, 4, w("topdown.0.gn2.gamma"), w("topdown.0.gn2.beta"), 1e-5).unwrap().0;
        let expect = ops::relu(&input.zip_map(&y, |a, b| a + b).unwrap());
        assert_eq!(g.value(out), &expect);
    }

    #[test]
    fn heads_layout_and_sigmoid() {
        let mut m = Model::<f64>::new(small_config(0)).unwrap();
        for name in m.names().to_vec() {
            if name.starts_with("head.") {
                m.param_mut(&name).unwrap().data_mut().fill(0.0);
            }
        }
        let mut g = Graph::new();
        let p = m.bind(&mut g, false);
        let x = g.constant(Tensor::full(&[4, 8, 8], 0.3));
        let heads = m.heads_forward(&mut g, &p, x).unwrap();
        assert!(g.value(heads.confidence).data().iter().all(|&v| v == 0.5));
        assert!(g.value(heads.position).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.value(heads.position).shape()[0], 3);
        assert_eq!(g.value(heads.dimension).shape()[0], 3);
        assert_eq!(g.value(heads.angle).shape()[0], 2);

        m.param_mut("head.confidence.bias").unwrap().data_mut().fill(1.5);
        let mut g = Graph::new();
        let p = m.bind(&mut g, false);
        let x = g.constant(Tensor::full(&[4, 8, 8], 0.3));
        let heads = m.heads_forward(&mut g, &p, x).unwrap();
        let expect = 1.0 / (1.0 + (-1.5f64).exp());
        assert!(g.value(heads.confidence).data().iter().all(|&v| (v - expect).abs() < 1e-15));
    }

    fn toy_sample() -> Sample {
        let cfg = SceneConfig {
            width: 64,
            height: 32,
            focal: 40.0,
            cu: 31.5,
            cv: 12.0,
            min_objects: 1,
            max_objects: 1,
            x_min: -2.0,
            x_max: 2.0,
            z_min: 4.0,
            z_max: 8.0,
            ..SceneConfig::default()
        };
        let stats = ClassStats { names: vec!["Car".into()], mean_dims: vec![[0.8, 0.7, 1.5]] };
        generate_scene(&cfg, &stats, 9).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut m = Model::<f32>::new(small_config(2)).unwrap();
        let before = m.params().to_vec();
        let mut opt = m.optimizer(0.0, 0.9);
        m.train_step(&[toy_sample()], &mut opt, &LossConfig::default()).unwrap();
        assert_eq!(m.params(), &before[..]);
    }

    #[test]
    fn duplicated_batch_doubles_gradient() {
        let m = Model::<f64>::new(small_config(2)).unwrap();
        let s = toy_sample();
        let (l1, g1) = m.batch_gradients(std::slice::from_ref(&s), &LossConfig::default()).unwrap();
        let (l2, g2) = m.batch_gradients(&[s.clone(), s], &LossConfig::default()).unwrap();
        assert_eq!(l2.total(), 2.0 * l1.total());
        for (id, g) in g1.iter() {
            let d = g2.get(id).unwrap();
            for (a, b) in g.data().iter().zip(d.data()) {
                assert_eq!(2.0 * a, *b);
            }
        }
    }

    #[test]
    fn weights_round_trip() {
        let m = Model::<f32>::new(small_config(2)).unwrap();
        let mut buf = Vec::new();
        m.write_weights(&mut buf).unwrap();
        let back = Model::<f32>::read_weights(small_config(2), &buf[..]).unwrap();
        assert_eq!(back.params(), m.params());
        assert!(Model::<f32>::read_weights(small_config(4), &buf[..]).is_err());
    }

    #[test]
    fn predict_shapes() {
        let m = Model::<f32>::new(small_config(2)).unwrap();
        let img = Image::new(64, 32, 3);
        let k = CameraIntrinsics::new(40.0, 31.5, 12.0, 64, 32).unwrap();
        let maps = m.predict(&img.to_tensor(), &k).unwrap();
        assert_eq!(maps.dims().unwrap(), (1, 8, 8));
        assert!(maps.confidence.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
