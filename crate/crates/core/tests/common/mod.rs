//! Gradient-check targets shared by the gradient suite and the acceptance
//! harness. Each target runs seeded cases against central differences in f64.
#![allow(dead_code)]

use kdgan::architectures::{Discriminator, DiscriminatorSpec, NetworkSpec, Wrn};
use kdgan::autodiff::{gradient_check_all, relative_error, Graph, Var};
use kdgan::layers::{
    dropout, seeded_rng, BatchNorm, BlockKind, Conv2d, Linear, Mode, Module, ResidualBlock, ResidualBlockSpec, Rng,
};
use kdgan::losses::*;
use kdgan::tensor::Tensor;
use kdgan::Result;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

pub const CASES: u64 = 20;
pub const TOL: f64 = 1e-4;
const STEP: f64 = 1e-6;

fn normal(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// Normal values pushed at least 0.1 away from zero, clear of kinks.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    normal(rng, shape).map(|v| v.signum() * (0.1 + v.abs()))
}

fn positive(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| 0.5 + rng.gen::<f64>())
}

fn labels(rng: &mut Rng, b: usize, c: usize) -> Vec<usize> {
    (0..b).map(|_| rng.gen_range(0..c)).collect()
}

/// Random linear functional of `y`, so every output element matters.
fn project<'g>(g: &'g Graph<f64>, y: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let mut rng = seeded_rng(seed, 777, 0);
    let w = normal(&mut rng, &y.shape());
    y.mul(g.constant(w)?)?.sum_all()
}

type Case = Box<dyn Fn(u64, &mut Rng) -> Result<f64>>;

/// A named layer, primitive or loss with its seeded case generator.
pub struct Target {
    pub name: String,
    case: Case,
}

impl Target {
    /// Largest relative error over all cases, or the first failing case.
    pub fn check(&self) -> std::result::Result<f64, String> {
        let mut worst = 0.0f64;
        for seed in 0..CASES {
            let mut rng = seeded_rng(seed, 4242, 0);
            let err = (self.case)(seed, &mut rng).map_err(|e| format!("{} case {seed}: {e}", self.name))?;
            if !(err < TOL) {
                return Err(format!("{} case {seed}: relative error {err:e}", self.name));
            }
            worst = worst.max(err);
        }
        Ok(worst)
    }
}

fn add(t: &mut Vec<Target>, name: impl Into<String>, case: impl Fn(u64, &mut Rng) -> Result<f64> + 'static) {
    t.push(Target { name: name.into(), case: Box::new(case) });
}

/// Builds the targets of one group.
pub fn collect(group: fn(&mut Vec<Target>)) -> Vec<Target> {
    let mut t = Vec::new();
    group(&mut t);
    t
}

pub const GROUPS: &[fn(&mut Vec<Target>)] = &[
    elementwise_binary,
    elementwise_unary,
    reductions,
    shape_ops,
    matmul,
    convolution_and_pooling,
    batch_norm_primitives,
    conv_layer,
    linear_layer,
    batch_norm_layer,
    dropout_layer,
    residual_blocks,
    networks,
    distillation_losses,
    adversarial_losses,
];

/// Every target in every group.
pub fn all_targets() -> Vec<Target> {
    GROUPS.iter().flat_map(|g| collect(*g)).collect()
}

fn check<Fun>(f: Fun, xs: &[Tensor<f64>]) -> Result<f64>
where
    Fun: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    gradient_check_all(f, xs, STEP)
}

// ---- primitives ----

pub fn elementwise_binary(t: &mut Vec<Target>) {
    for (name, op) in [("add", 0), ("sub", 1), ("mul", 2), ("div", 3)] {
        add(t, name, move |seed, rng| {
            let shapes: [(&[usize], &[usize]); 4] = [(&[3, 4], &[3, 4]), (&[2, 3, 4], &[3, 1]), (&[4], &[2, 4]), (&[2, 1, 3], &[1, 4, 1])];
            let (sa, sb) = shapes[seed as usize % 4];
            let a = normal(rng, sa);
            let b = if op == 3 { away_from_zero(rng, sb) } else { normal(rng, sb) };
            check(
                |g, v| {
                    let y = match op {
                        0 => v[0].add(v[1])?,
                        1 => v[0].sub(v[1])?,
                        2 => v[0].mul(v[1])?,
                        _ => v[0].div(v[1])?,
                    };
                    project(g, y, seed)
                },
                &[a, b],
            )
        });
    }
}

pub fn elementwise_unary(t: &mut Vec<Target>) {
    type Unary = for<'g> fn(Var<'g, f64>) -> Result<Var<'g, f64>>;
    let ops: [(&str, Unary); 7] = [
        ("exp", |v| v.exp()),
        ("log", |v| v.log()),
        ("relu", |v| v.relu()),
        ("abs", |v| v.abs()),
        ("neg", |v| v.neg()),
        ("scale", |v| v.scale(-2.5)),
        ("add_scalar", |v| v.add_scalar(1.5)),
    ];
    for (name, op) in ops {
        add(t, name, move |seed, rng| {
            let shape = [2 + seed as usize % 3, 5];
            let x = if name == "log" { positive(rng, &shape) } else { away_from_zero(rng, &shape) };
            check(|g, v| project(g, op(v[0])?, seed), &[x])
        });
    }
}

pub fn reductions(t: &mut Vec<Target>) {
    for name in ["sum_axis", "mean_axis", "max_axis", "sum_all", "mean_all"] {
        add(t, name, move |seed, rng| {
            let x = normal(rng, &[3, 4, 2]);
            let axis = seed as usize % 3;
            let keep = seed % 2 == 0;
            check(
                |g, v| {
                    let y = match name {
                        "sum_axis" => v[0].sum_axis(axis, keep)?,
                        "mean_axis" => v[0].mean_axis(axis, keep)?,
                        "max_axis" => v[0].max_axis(axis, keep)?,
                        "sum_all" => v[0].sum_all()?,
                        _ => v[0].mean_all()?,
                    };
                    project(g, y, seed)
                },
                &[x],
            )
        });
    }
}

pub fn shape_ops(t: &mut Vec<Target>) {
    add(t, "reshape", |seed, rng| {
        let x = normal(rng, &[2, 6]);
        check(|g, v| project(g, v[0].reshape(&[3, 2, 2])?, seed), &[x])
    });
    add(t, "slice", |seed, rng| {
        let x = normal(rng, &[4, 5]);
        let axis = seed as usize % 2;
        let n = x.shape()[axis];
        let start = seed as usize % (n - 1);
        check(|g, v| project(g, v[0].slice(axis, start, n)?, seed), &[x])
    });
    add(t, "concat", |seed, rng| {
        let axis = seed as usize % 2;
        let (a, b) = if axis == 0 {
            (normal(rng, &[2, 3]), normal(rng, &[3, 3]))
        } else {
            (normal(rng, &[2, 1]), normal(rng, &[2, 4]))
        };
        check(|g, v| project(g, Var::concat(&[v[0], v[1]], axis)?, seed), &[a, b])
    });
}

pub fn matmul(t: &mut Vec<Target>) {
    add(t, "matmul", |seed, rng| {
        let (m, k, n) = (1 + seed as usize % 4, 2 + seed as usize % 3, 1 + seed as usize % 5);
        let a = normal(rng, &[m, k]);
        let b = normal(rng, &[k, n]);
        check(|g, v| project(g, v[0].matmul(v[1])?, seed), &[a, b])
    });
}

pub fn convolution_and_pooling(t: &mut Vec<Target>) {
    let geoms = [(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0), (3, 1, 0)];
    add(t, "conv2d", move |seed, rng| {
        let (k, s, p) = geoms[seed as usize % geoms.len()];
        let x = normal(rng, &[2, 2, 5, 5]);
        let w = normal(rng, &[3, 2, k, k]);
        check(|g, v| project(g, v[0].conv2d(v[1], s, p)?, seed), &[x, w])
    });
    add(t, "pad2d", |seed, rng| {
        let x = normal(rng, &[1, 2, 3, 3]);
        let pad = 1 + seed as usize % 2;
        check(|g, v| project(g, v[0].pad2d(pad)?, seed), &[x])
    });
    add(t, "avg_pool2d", |seed, rng| {
        let (k, s) = [(2, 2), (4, 4), (3, 1)][seed as usize % 3];
        let x = normal(rng, &[2, 2, 4, 4]);
        check(|g, v| project(g, v[0].avg_pool2d(k, s)?, seed), &[x])
    });
}

pub fn batch_norm_primitives(t: &mut Vec<Target>) {
    add(t, "batch_norm_train", |seed, rng| {
        let shape: &[usize] = if seed % 2 == 0 { &[4, 3] } else { &[3, 2, 2, 2] };
        let c = shape[1];
        let x = normal(rng, shape);
        let gamma = away_from_zero(rng, &[c]);
        let beta = normal(rng, &[c]);
        check(
            |g, v| project(g, v[0].batch_norm_train(v[1], v[2], 1e-5)?.0, seed),
            &[x, gamma, beta],
        )
    });
    add(t, "batch_norm_eval", |seed, rng| {
        let x = normal(rng, &[3, 2, 2, 2]);
        let gamma = away_from_zero(rng, &[2]);
        let beta = normal(rng, &[2]);
        let mean = normal(rng, &[2]).data().to_vec();
        let var = positive(rng, &[2]).data().to_vec();
        check(
            |g, v| project(g, v[0].batch_norm_eval(v[1], v[2], &mean, &var, 1e-5)?, seed),
            &[x, gamma, beta],
        )
    });
}

// ---- layers and networks ----

/// Nonzero batch-norm shifts. With the zero default, a feature that
/// dropout removes from the whole batch normalizes to exactly zero and
/// lands on the ReLU kink.
fn shift_batch_norms<M: Module<f64>>(m: &mut M, rng: &mut Rng) {
    m.visit_params_mut(&mut |p| {
        if p.name().ends_with("beta") {
            p.value = away_from_zero(rng, p.value.shape());
        }
    });
}

/// Checks the input gradient and up to `per_param` entries of every
/// parameter's gradient of `project(forward(x))`.
fn module_check<M, Fwd>(module: &M, x: &Tensor<f64>, seed: u64, per_param: usize, forward: Fwd) -> Result<f64>
where
    M: Module<f64> + Clone,
    Fwd: for<'g> Fn(&mut M, &'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    let loss = |m: &M, x: &Tensor<f64>| -> Result<f64> {
        let g = Graph::new();
        let mut m = m.clone();
        let xv = g.constant(x.clone())?;
        Ok(project(&g, forward(&mut m, &g, xv)?, seed)?.item())
    };

    let g = Graph::new();
    let xv = g.leaf(x.clone())?;
    let mut m = module.clone();
    project(&g, forward(&mut m, &g, xv)?, seed)?.backward()?;
    let x_grad = xv.grad().expect("input gradient");
    let mut param_grads = Vec::new();
    m.visit_params(&mut |p| param_grads.push(g.param_grad(p).unwrap_or_else(|| Tensor::zeros(p.value.shape()))));

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + STEP;
        let plus = loss(module, &probe)?;
        probe.data_mut()[i] = orig - STEP;
        let minus = loss(module, &probe)?;
        probe.data_mut()[i] = orig;
        worst = worst.max(relative_error(x_grad.data()[i], (plus - minus) / (2.0 * STEP)));
    }
    for (pi, grad) in param_grads.iter().enumerate() {
        let n = grad.numel();
        let stride = n.div_ceil(per_param).max(1);
        for i in (seed as usize % stride..n).step_by(stride) {
            let shifted = |delta: f64| -> Result<f64> {
                let mut m = module.clone();
                let mut k = 0;
                m.visit_params_mut(&mut |p| {
                    if k == pi {
                        p.value.data_mut()[i] += delta;
                    }
                    k += 1;
                });
                loss(&m, x)
            };
            let numeric = (shifted(STEP)? - shifted(-STEP)?) / (2.0 * STEP);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
    }
    Ok(worst)
}

pub fn conv_layer(t: &mut Vec<Target>) {
    add(t, "Conv2d", |seed, rng| {
        let (k, s, p) = [(3, 1, 1), (3, 2, 1), (1, 2, 0)][seed as usize % 3];
        let conv = Conv2d::<f64>::new("c", 2, 3, k, s, p, rng);
        let x = normal(rng, &[2, 2, 4, 4]);
        module_check(&conv, &x, seed, 18, |m, g, x| m.forward(g, x, Mode::Train))
    });
}

pub fn linear_layer(t: &mut Vec<Target>) {
    add(t, "Linear", |seed, rng| {
        let mut lin = Linear::<f64>::new("l", 4, 3, rng);
        lin.bias.value = normal(rng, &[3]);
        let x = normal(rng, &[1 + seed as usize % 3, 4]);
        module_check(&lin, &x, seed, 12, |m, g, x| m.forward(g, x, Mode::Train))
    });
}

pub fn batch_norm_layer(t: &mut Vec<Target>) {
    for (name, mode) in [("BatchNorm train", Mode::Train), ("BatchNorm eval", Mode::Eval)] {
        add(t, name, move |seed, rng| {
            let mut bn = BatchNorm::<f64>::new("bn", 3);
            bn.visit_params_mut(&mut |p| p.value = away_from_zero(rng, &[3]));
            bn.visit_buffers_mut(&mut |name, t| {
                *t = if name.ends_with("var") { positive(rng, &[3]) } else { normal(rng, &[3]) }
            });
            let x = normal(rng, &[4, 3, 2, 2]);
            module_check(&bn, &x, seed, 3, |m, g, x| m.forward(g, x, mode))
        });
    }
}

pub fn dropout_layer(t: &mut Vec<Target>) {
    add(t, "dropout", |seed, rng| {
        let x = normal(rng, &[3, 6]);
        check(
            |g, v| {
                let mut mask_rng = seeded_rng(seed, 5, 0);
                project(g, dropout(g, v[0], 0.3, Mode::Train, &mut mask_rng)?, seed)
            },
            &[x],
        )
    });
}

pub fn residual_blocks(t: &mut Vec<Target>) {
    add(t, "ResidualBlock conv", |seed, rng| {
        let (cin, cout, stride) = [(2, 2, 1), (2, 3, 1), (2, 3, 2)][seed as usize % 3];
        let spec = ResidualBlockSpec {
            kind: BlockKind::Conv,
            in_channels: cin,
            out_channels: cout,
            stride,
            dropout_rate: 0.3,
        };
        let mut block = ResidualBlock::<f64>::new("b", spec, rng)?;
        shift_batch_norms(&mut block, rng);
        let x = normal(rng, &[2, cin, 4, 4]);
        module_check(&block, &x, seed, 6, |m, g, x| {
            m.forward(g, x, Mode::Train, &mut seeded_rng(seed, 6, 0))
        })
    });
    add(t, "ResidualBlock mlp", |seed, rng| {
        let spec = ResidualBlockSpec {
            kind: BlockKind::Mlp,
            in_channels: 5,
            out_channels: 5,
            stride: 1,
            dropout_rate: 0.3,
        };
        let mut block = ResidualBlock::<f64>::new("b", spec, rng)?;
        shift_batch_norms(&mut block, rng);
        let x = normal(rng, &[4, 5]);
        module_check(&block, &x, seed, 8, |m, g, x| {
            m.forward(g, x, Mode::Train, &mut seeded_rng(seed, 6, 0))
        })
    });
}

pub fn networks(t: &mut Vec<Target>) {
    add(t, "WRN-10-1", |seed, rng| {
        let mut net = Wrn::<f64>::new(NetworkSpec::new(10, 1, 3), rng)?;
        shift_batch_norms(&mut net, rng);
        let x = normal(rng, &[2, 3, 8, 8]);
        module_check(&net, &x, seed, 2, |m, g, x| {
            m.forward(g, x, Mode::Train, &mut seeded_rng(seed, 7, 0))
        })
    });
    add(t, "Discriminator", |seed, rng| {
        let depth = 1 + seed as usize % 4;
        let mut net = Discriminator::<f64>::new(DiscriminatorSpec::new(depth, 4), rng)?;
        shift_batch_norms(&mut net, rng);
        let x = normal(rng, &[6, 4]);
        module_check(&net, &x, seed, 4, |m, g, x| {
            m.forward(g, x, Mode::Train, &mut seeded_rng(seed, 8, 0))
        })
    });
}

// ---- losses ----

fn temperature(seed: u64) -> Temperature {
    Temperature::new([1.0, 2.0, 5.0, 10.0, 0.5][seed as usize % 5]).unwrap()
}

pub fn distillation_losses(t: &mut Vec<Target>) {
    add(t, "log_softmax", |seed, rng| {
        let x = normal(rng, &[3, 5]);
        check(|g, v| project(g, log_softmax(v[0], temperature(seed))?, seed), &[x])
    });
    add(t, "kd_loss", |seed, rng| {
        let t = normal(rng, &[4, 5]).map(|v| 3.0 * v);
        let s = normal(rng, &[4, 5]).map(|v| 3.0 * v);
        check(|_, v| kd_loss(v[0], v[1], temperature(seed)), &[t, s])
    });
    add(t, "supervised_loss", |_, rng| {
        let s = normal(rng, &[4, 6]);
        let l = labels(rng, 4, 6);
        check(|_, v| supervised_loss(&l, v[0]), &[s])
    });
    add(t, "kd_combined_loss", |seed, rng| {
        let t = normal(rng, &[3, 4]);
        let s = normal(rng, &[3, 4]);
        let l = labels(rng, 3, 4);
        check(|_, v| kd_combined_loss(&l, v[0], v[1], temperature(seed)), &[t, s])
    });
    add(t, "l1_alignment_loss", |_, rng| {
        let t = normal(rng, &[3, 4]);
        let s = away_from_zero(rng, &[3, 4]).zip_map(&t, |d, t| t + d).unwrap();
        check(|_, v| l1_alignment_loss(v[0], v[1]), &[t, s])
    });
}

pub fn adversarial_losses(t: &mut Vec<Target>) {
    add(t, "adversarial_loss", |_, rng| {
        let r = normal(rng, &[4, 2]);
        let f = normal(rng, &[4, 2]);
        check(|_, v| adversarial_loss(v[0], v[1]), &[r, f])
    });
    add(t, "student_adversarial_loss", |seed, rng| {
        let form = if seed % 2 == 0 {
            AdversarialForm::Saturating
        } else {
            AdversarialForm::NonSaturating
        };
        let r = normal(rng, &[4, 2]);
        let f = normal(rng, &[4, 2]);
        check(|_, v| student_adversarial_loss(v[0], v[1], form), &[r, f])
    });
    add(t, "discriminator_supervised_loss", |_, rng| {
        let r = normal(rng, &[4, 5]);
        let f = normal(rng, &[4, 5]);
        let l = labels(rng, 4, 5);
        check(|_, v| discriminator_supervised_loss(&l, v[0], v[1]), &[r, f])
    });
    add(t, "discriminator_objective", |_, rng| {
        let (r, f) = (normal(rng, &[3, 2]), normal(rng, &[3, 2]));
        let (lr, lf) = (normal(rng, &[3, 4]), normal(rng, &[3, 4]));
        let l = labels(rng, 3, 4);
        check(
            |_, v| discriminator_objective(adversarial_loss(v[0], v[1])?, discriminator_supervised_loss(&l, v[2], v[3])?),
            &[r, f, lr, lf],
        )
    });
    add(t, "gan_loss", |_, rng| {
        let (r, f) = (normal(rng, &[3, 2]), normal(rng, &[3, 2]));
        let (lr, lf) = (normal(rng, &[3, 4]), normal(rng, &[3, 4]));
        let l = labels(rng, 3, 4);
        check(
            |_, v| gan_loss(adversarial_loss(v[0], v[1])?, discriminator_supervised_loss(&l, v[2], v[3])?),
            &[r, f, lr, lf],
        )
    });
    add(t, "student_objective", |_, rng| {
        let t = normal(rng, &[3, 4]);
        let s = away_from_zero(rng, &[3, 4]).zip_map(&t, |d, t| t + d).unwrap();
        let (r, f) = (normal(rng, &[3, 2]), normal(rng, &[3, 2]));
        let (lr, lf) = (normal(rng, &[3, 4]), normal(rng, &[3, 4]));
        let l = labels(rng, 3, 4);
        check(
            |_, v| {
                student_objective(
                    supervised_loss(&l, v[1])?,
                    l1_alignment_loss(v[0], v[1])?,
                    adversarial_loss(v[2], v[3])?,
                    discriminator_supervised_loss(&l, v[4], v[5])?,
                )
            },
            &[t, s, r, f, lr, lf],
        )
    });
}
