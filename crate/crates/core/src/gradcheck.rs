//! Central finite-difference checks of the analytic gradients in `f64`.
//!
//! Every check draws small random instances, differentiates a scalar built
//! from the same graph code used in training, and compares against
//! `(f(x + eps) - f(x - eps)) / 2 eps` coordinate by coordinate.

use ndarray::Array3;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::Result;
use crate::losses::{
    dice_matrix, grounding_loss_graph, segmentation_loss_graph, similarity_matrix, TRAIN_NORM_EPS,
};
use crate::model::{Model, ModelConfig, EMBEDDINGS, LOG_TAU};

/// Relative errors below this absolute gradient scale are measured against
/// the floor instead.
const REL_FLOOR: f64 = 1e-6;
const N: usize = 4;
const M: usize = 2;
const D: usize = 8;
const B: usize = 3;
const PIXELS: usize = 36;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub instances: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Parameter coordinates probed per end-to-end instance.
    pub model_coordinates: usize,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            instances: 20,
            eps: 1e-5,
            tolerance: 1e-3,
            seed: 0,
            model_coordinates: 24,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckSummary {
    pub name: String,
    pub instances: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub checks: Vec<CheckSummary>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.max_rel_error < self.tolerance)
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

fn binary(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| f64::from(rng.random_bool(0.4))).collect())
}

/// Largest relative error over every coordinate of the trainable inputs.
fn check_inputs(
    inputs: &[Tensor<f64>],
    trainable: &[bool],
    eps: f64,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> (f64, usize) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(trainable)
        .map(|(t, &tr)| if tr { g.param(t.clone()) } else { g.constant(t.clone()) })
        .collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out);

    let eval = |inputs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.item(out)
    };
    let mut worst = 0.0f64;
    let mut count = 0;
    for (i, v) in vars.iter().enumerate() {
        if !trainable[i] {
            continue;
        }
        let analytic = grads.get(*v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for (j, &a) in analytic.iter().enumerate() {
            let mut probe = inputs.to_vec();
            probe[i].data_mut()[j] += eps;
            let up = eval(&probe);
            probe[i].data_mut()[j] -= 2.0 * eps;
            let down = eval(&probe);
            worst = worst.max(rel_error(a, (up - down) / (2.0 * eps)));
            count += 1;
        }
    }
    (worst, count)
}

/// Word rows for `B` captions of 1 to 3 words each, and their segments.
fn captions(rng: &mut impl Rng) -> (Tensor<f64>, Vec<(usize, usize)>) {
    let mut segments = Vec::with_capacity(B);
    let mut k = 0;
    for _ in 0..B {
        let len = rng.random_range(1..=3);
        segments.push((k, len));
        k += len;
    }
    (uniform(rng, &[k, D], -1.0, 1.0), segments)
}

fn summary(name: &str, instances: usize, results: impl IntoIterator<Item = (f64, usize)>) -> CheckSummary {
    let (mut worst, mut coords) = (0.0f64, 0);
    for (e, c) in results {
        worst = worst.max(e);
        coords += c;
    }
    CheckSummary {
        name: name.into(),
        instances,
        coordinates: coords,
        max_rel_error: worst,
    }
}

fn check_dice(rng: &mut ChaCha8Rng, o: &GradcheckOptions) -> CheckSummary {
    let runs: Vec<_> = (0..o.instances)
        .map(|_| {
            let a = uniform(rng, &[1, PIXELS], 0.05, 0.95);
            let b = uniform(rng, &[1, PIXELS], 0.05, 0.95);
            check_inputs(&[a, b], &[true, true], o.eps, |g, v| {
                let d = dice_matrix(g, v[0], v[1]);
                g.sum(d)
            })
        })
        .collect();
    summary("dice", o.instances, runs)
}

fn check_segmentation(rng: &mut ChaCha8Rng, o: &GradcheckOptions) -> CheckSummary {
    let runs: Vec<_> = (0..o.instances)
        .map(|_| {
            let s = uniform(rng, &[N, PIXELS], 0.05, 0.95);
            let l = binary(rng, &[M, PIXELS]);
            check_inputs(&[s, l], &[true, false], o.eps, |g, v| segmentation_loss_graph(g, v[0], v[1]))
        })
        .collect();
    summary("segmentation_loss", o.instances, runs)
}

fn check_similarity(rng: &mut ChaCha8Rng, o: &GradcheckOptions) -> CheckSummary {
    let runs: Vec<_> = (0..o.instances)
        .map(|_| {
            let z = uniform(rng, &[B, N, D], -1.0, 1.0);
            let (w, seg) = captions(rng);
            let tau = Tensor::scalar(rng.random_range(0.2..1.0));
            // A random projection of the whole matrix exercises every entry.
            let r = uniform(rng, &[B, B], -1.0, 1.0);
            check_inputs(&[z, w, tau, r], &[true, true, true, false], o.eps, |g, v| {
                let inv = g.recip(v[2]);
                let sim = similarity_matrix(g, v[0], v[1], &seg, inv, 0.0);
                let p = g.mul(sim, v[3]);
                g.sum(p)
            })
        })
        .collect();
    summary("image_caption_similarity", o.instances, runs)
}

fn check_grounding(rng: &mut ChaCha8Rng, o: &GradcheckOptions) -> CheckSummary {
    let runs: Vec<_> = (0..o.instances)
        .map(|_| {
            let z = uniform(rng, &[B, N, D], -1.0, 1.0);
            let (w, seg) = captions(rng);
            let tau = Tensor::scalar(rng.random_range(0.2..1.0));
            check_inputs(&[z, w, tau], &[true, true, true], o.eps, |g, v| {
                let inv = g.recip(v[2]);
                let sim = similarity_matrix(g, v[0], v[1], &seg, inv, 0.0);
                grounding_loss_graph(g, sim, inv, B)
            })
        })
        .collect();
    summary("grounding_loss", o.instances, runs)
}

struct E2eInstance {
    model: Model,
    images: Vec<Array3<f32>>,
    labels: Vec<Tensor<f64>>,
    word_ids: Vec<usize>,
    segments: Vec<(usize, usize)>,
}

impl E2eInstance {
    fn random(rng: &mut ChaCha8Rng) -> Result<Self> {
        let config = ModelConfig {
            num_queries: N,
            dim: D,
            ..ModelConfig::tiny()
        };
        let vocab: Vec<String> = ["red", "blue", "circle", "square", "bar", "green"].map(String::from).to_vec();
        let model = Model::new(config.clone(), vocab.clone(), rng.random())?;
        let s = config.image_size;
        let images = (0..B)
            .map(|_| Array3::from_shape_fn((s, s, 3), |_| rng.random_range(0.0f32..1.0)))
            .collect();
        let p = config.grid() * config.grid();
        let labels = (0..B).map(|_| binary(rng, &[M, p])).collect();
        let mut segments = Vec::new();
        let mut word_ids = Vec::new();
        for _ in 0..B {
            let len = rng.random_range(1..=3);
            segments.push((word_ids.len(), len));
            word_ids.extend((0..len).map(|_| rng.random_range(0..vocab.len())));
        }
        Ok(Self {
            model,
            images,
            labels,
            word_ids,
            segments,
        })
    }

    /// Segmentation plus grounding loss, with `delta` added to one
    /// coordinate of one parameter. Also returns the parameter nodes.
    fn loss(
        &self,
        g: &mut Graph<f64>,
        trainable: bool,
        probe: Option<(&str, usize, f64)>,
    ) -> Result<(Var, Vec<Var>)> {
        let p = self.model.bind_with(g, |_| trainable, |name, t| {
            if let Some((pn, i, d)) = probe {
                if pn == name {
                    t.data_mut()[i] += d;
                }
            }
        });
        let imgs: Vec<&Array3<f32>> = self.images.iter().collect();
        let x = Model::images_to_graph(g, &imgs)?;
        let fv = self.model.forward_graph(g, &p, x);
        let mut l_s = None;
        for (b, l) in self.labels.iter().enumerate() {
            let lv = g.constant(l.clone());
            let sb = g.index0(fv.masks, b);
            let l = segmentation_loss_graph(g, sb, lv);
            l_s = Some(match l_s {
                None => l,
                Some(acc) => g.add(acc, l),
            });
        }
        let l_s = g.scale(l_s.expect("non-empty batch"), 1.0 / B as f64);
        let w = g.select_rows(p.var(EMBEDDINGS), &self.word_ids);
        let neg = g.neg(p.var(LOG_TAU));
        let inv = g.exp(neg);
        let sim = similarity_matrix(g, fv.z, w, &self.segments, inv, TRAIN_NORM_EPS);
        let l_g = grounding_loss_graph(g, sim, inv, B);
        let params = p.iter().map(|(_, v)| v).collect();
        Ok((g.add(l_g, l_s), params))
    }
}

fn check_end_to_end(rng: &mut ChaCha8Rng, o: &GradcheckOptions) -> Result<CheckSummary> {
    let mut runs = Vec::with_capacity(o.instances);
    for _ in 0..o.instances {
        let inst = E2eInstance::random(rng)?;
        let mut g = Graph::new();
        let (out, vars) = inst.loss(&mut g, true, None)?;
        let grads = g.backward(out);
        let names: Vec<String> = inst.model.params.names().map(String::from).collect();
        let always = [LOG_TAU.to_string(), EMBEDDINGS.to_string()];
        let mut worst = 0.0f64;
        for k in 0..o.model_coordinates {
            let name = if k < always.len() { &always[k] } else { names.choose(rng).expect("parameters") };
            let pos = inst.model.params.position(name).expect("known parameter");
            let numel = inst.model.params.get(name).expect("known parameter").numel();
            let idx = if name == EMBEDDINGS {
                inst.word_ids[0] * D + rng.random_range(0..D)
            } else {
                rng.random_range(0..numel)
            };
            let analytic = grads.get(vars[pos]).map_or(0.0, |t| t.data()[idx]);
            let f = |d: f64| -> Result<f64> {
                let mut g = Graph::new();
                let (out, _) = inst.loss(&mut g, false, Some((name, idx, d)))?;
                Ok(g.item(out))
            };
            let numeric = (f(o.eps)? - f(-o.eps)?) / (2.0 * o.eps);
            worst = worst.max(rel_error(analytic, numeric));
        }
        runs.push((worst, o.model_coordinates));
    }
    Ok(summary("end_to_end", o.instances, runs))
}

/// Runs every check with `options.instances` random instances each.
pub fn run(options: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let checks = vec![
        check_dice(&mut rng, options),
        check_segmentation(&mut rng, options),
        check_similarity(&mut rng, options),
        check_grounding(&mut rng, options),
        check_end_to_end(&mut rng, options)?,
    ];
    Ok(GradcheckReport {
        tolerance: options.tolerance,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(1.0, 1.0), 0.0);
        assert!((rel_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(rel_error(1e-12, 0.0) < 1e-5);
    }

    #[test]
    fn small_run_passes() {
        let o = GradcheckOptions {
            instances: 2,
            model_coordinates: 6,
            ..Default::default()
        };
        let r = run(&o).unwrap();
        assert_eq!(r.checks.len(), 5);
        assert!(r.passed(), "{r:?}");
    }
}
