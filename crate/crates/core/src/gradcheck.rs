//! Central finite-difference checks of the analytic gradients.
//!
//! Each check reduces the op output to a scalar with fixed random weights,
//! backpropagates once, then perturbs every input element by `±STEP` in
//! `f64`. The error for one element is
//! `|analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.

use crate::error::Result;
use crate::graph::{build_grid_adjacency, gcn_positional_embedding, normalize_adjacency, AdjacencyMode};
use crate::model::{self, ModelConfig, Variant};
use crate::nn::{self, AttentionParams, EncoderLayerParams};
use crate::rng::Rng;
use crate::tensor::{self, Tensor};

pub const STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-3;
/// Tolerance for single ops.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Tolerance for the end-to-end model.
pub const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub worst_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.worst_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Worst relative error over every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.to_leaf(true)).collect();
    let out = f(&leaves)?;
    let mut rng = Rng::new(0x5eed);
    let weights: Vec<f64> = (0..out.numel()).map(|_| rng.uniform() + 0.5).collect();
    let weights = Tensor::new(out.dims().to_vec(), weights)?;
    let project = |t: &Tensor<f64>| -> Result<Tensor<f64>> {
        if t.numel() == 1 {
            Ok(t.sum())
        } else {
            Ok(t.mul(&weights)?.sum())
        }
    };
    project(&out)?.backward()?;

    let mut worst = 0.0f64;
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        for (j, &a) in analytic.iter().enumerate() {
            let eval = |delta: f64| -> Result<f64> {
                let perturbed: Vec<Tensor<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        if k != i {
                            return Ok(t.detach());
                        }
                        let mut data = t.to_vec();
                        data[j] += delta;
                        Tensor::new(t.dims().to_vec(), data)
                    })
                    .collect::<Result<_>>()?;
                project(&f(&perturbed)?)?.item()
            };
            let numeric = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

fn random(rng: &mut Rng, dims: &[usize], std: f64) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.normal() * std).collect())
        .expect("positive dims")
}

type Check = (&'static str, f64, Box<dyn Fn(&mut Rng) -> Result<f64>>);

fn registry() -> Vec<Check> {
    fn op(name: &'static str, f: impl Fn(&mut Rng) -> Result<f64> + 'static) -> Check {
        (name, OP_TOLERANCE, Box::new(f))
    }
    let mut checks = vec![
        op("matmul", |rng| {
            let inputs = [random(rng, &[2, 3, 4], 1.0), random(rng, &[4, 5], 1.0)];
            let batched = check_gradients(&inputs, |x| x[0].matmul(&x[1]))?;
            let inputs = [random(rng, &[3, 3], 1.0), random(rng, &[2, 3, 2], 1.0)];
            let broadcast = check_gradients(&inputs, |x| x[0].matmul(&x[1]))?;
            let inputs = [random(rng, &[2, 2, 3], 1.0), random(rng, &[2, 3, 2], 1.0)];
            Ok(batched.max(broadcast).max(check_gradients(&inputs, |x| x[0].matmul(&x[1]))?))
        }),
        op("add", |rng| {
            let inputs = [random(rng, &[2, 3, 4], 1.0), random(rng, &[3, 4], 1.0)];
            check_gradients(&inputs, |x| x[0].add(&x[1]))
        }),
        op("mul", |rng| {
            let inputs = [random(rng, &[3, 4], 1.0), random(rng, &[3, 4], 1.0)];
            check_gradients(&inputs, |x| x[0].mul(&x[1]))
        }),
        op("scale", |rng| check_gradients(&[random(rng, &[5], 1.0)], |x| Ok(x[0].scale(-2.5)))),
        op("relu", |rng| check_gradients(&[random(rng, &[4, 6], 1.0)], |x| Ok(x[0].relu()))),
        op("gelu", |rng| check_gradients(&[random(rng, &[4, 6], 1.5)], |x| Ok(x[0].gelu()))),
        op("softmax", |rng| check_gradients(&[random(rng, &[3, 5], 2.0)], |x| x[0].softmax())),
        op("layer_norm", |rng| {
            let inputs = [random(rng, &[3, 6], 2.0), random(rng, &[6], 1.0), random(rng, &[6], 1.0)];
            check_gradients(&inputs, |x| tensor::layer_norm(&x[0], &x[1], &x[2], 1e-5))
        }),
        op("reshape", |rng| {
            check_gradients(&[random(rng, &[2, 6], 1.0)], |x| x[0].reshape([3, 4]))
        }),
        op("permute", |rng| {
            check_gradients(&[random(rng, &[2, 3, 4], 1.0)], |x| x[0].permute(&[2, 0, 1]))
        }),
        op("select", |rng| {
            check_gradients(&[random(rng, &[2, 3, 4], 1.0)], |x| x[0].select(1, 2))
        }),
        op("concat", |rng| {
            let inputs = [random(rng, &[2, 1, 3], 1.0), random(rng, &[2, 4, 3], 1.0)];
            check_gradients(&inputs, |x| tensor::concat(x, 1))
        }),
        op("expand_leading", |rng| {
            check_gradients(&[random(rng, &[2, 3], 1.0)], |x| x[0].expand_leading(3))
        }),
        op("sum", |rng| check_gradients(&[random(rng, &[3, 3], 1.0)], |x| Ok(x[0].mean()))),
        op("cross_entropy", |rng| {
            let labels = [3, 0, 4];
            check_gradients(&[random(rng, &[3, 5], 2.0)], move |x| {
                tensor::cross_entropy(&x[0], &labels)
            })
        }),
        op("conv2d_patchify", |rng| {
            let inputs = [
                random(rng, &[2, 4, 6, 2], 1.0),
                random(rng, &[2, 2, 2, 3], 1.0),
                random(rng, &[3], 1.0),
            ];
            check_gradients(&inputs, |x| tensor::conv2d_patchify(&x[0], &x[1], &x[2]))
        }),
    ];
    for mode in [AdjacencyMode::OneWay, AdjacencyMode::Bidirectional] {
        let name = match mode {
            AdjacencyMode::OneWay => "gcn_positional_embedding[one-way]",
            AdjacencyMode::Bidirectional => "gcn_positional_embedding[bidirectional]",
        };
        checks.push(op(name, move |rng| {
            let a_hat = normalize_adjacency(&build_grid_adjacency(3, 3, mode)?);
            let inputs = [random(rng, &[2, 9, 4], 1.0), random(rng, &[4, 4], 1.0)];
            check_gradients(&inputs, |x| gcn_positional_embedding(&x[0], &a_hat, &x[1]))
        }));
    }
    checks.push(op("mhsa", |rng| {
        let d = 4;
        let mut inputs = vec![random(rng, &[2, 3, d], 1.0)];
        for _ in 0..4 {
            inputs.push(random(rng, &[d, d], 0.7));
            inputs.push(random(rng, &[d], 0.3));
        }
        check_gradients(&inputs, |x| {
            let p = AttentionParams::new(
                [&x[1], &x[2], &x[3], &x[4], &x[5], &x[6], &x[7], &x[8]].map(Clone::clone),
                2,
            )?;
            nn::mhsa(&x[0], &p)
        })
    }));
    checks.push(op("encoder_layer", |rng| {
        let d = 4;
        let specs = EncoderLayerParams::<f64>::param_shapes(d);
        let mut inputs = vec![random(rng, &[2, 3, d], 1.0)];
        for (_, dims) in &specs {
            let t = random(rng, dims, 0.5);
            inputs.push(t);
        }
        check_gradients(&inputs, |x| {
            let p = EncoderLayerParams::from_slice(&x[1..], 2)?;
            nn::encoder_layer(&x[0], &p)
        })
    }));
    for variant in Variant::ALL {
        checks.push((
            variant.end_to_end_check_name(),
            MODEL_TOLERANCE,
            Box::new(move |rng: &mut Rng| end_to_end(variant, rng)),
        ));
    }
    checks
}

/// Loss gradient w.r.t. every parameter of a tiny model (D=8, L=1, 2 heads,
/// 8x8 input), all parameter groups at once.
fn end_to_end(variant: Variant, rng: &mut Rng) -> Result<f64> {
    let config = ModelConfig::tiny(variant);
    let specs = config.param_specs();
    let params: Vec<Tensor<f64>> = specs
        .iter()
        .map(|s| random(rng, &s.dims, 0.3))
        .collect();
    let images = random(rng, &[2, config.image_h, config.image_w, config.channels], 1.0);
    let labels = [1usize, 7];
    let mut inputs = params;
    inputs.push(images);
    check_gradients(&inputs, |x| {
        let (params, images) = x.split_at(x.len() - 1);
        let set = model::ParamSet::from_tensors(&specs, params.to_vec())?;
        let logits = model::forward(&config, &set, &images[0])?;
        tensor::cross_entropy(&logits, &labels)
    })
}

/// Runs every registered check with a fixed seed.
pub fn run_suite() -> Result<Vec<GradCheck>> {
    let mut rng = Rng::new(2024);
    registry()
        .into_iter()
        .map(|(name, tolerance, check)| {
            Ok(GradCheck {
                name: name.to_string(),
                worst_rel_error: check(&mut rng)?,
                tolerance,
            })
        })
        .collect()
}
