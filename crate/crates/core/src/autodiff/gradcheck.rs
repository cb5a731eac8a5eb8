//! Central finite-difference verification of the reverse pass.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::scatter::ScatterPlan;
use super::tape::{OpKind, Tape, Var};
use super::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const MAGNITUDE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub name: String,
    /// Max relative error per input, in input order.
    pub per_input: Vec<f64>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

pub type Builder = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

pub fn normal_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect())
}

/// Checks `build` on unit-normal inputs of the given shapes.
pub fn gradcheck(name: &str, build: &Builder, shapes: &[&[usize]], seed: u64) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<_> = shapes.iter().map(|s| normal_tensor(s, &mut rng)).collect();
    gradcheck_inputs(name, build, &inputs, seed, None)
}

/// Checks `build` at explicit inputs. The scalar objective is the output
/// contracted with a fixed random projection so every component matters.
pub fn gradcheck_inputs(
    name: &str,
    build: &Builder,
    inputs: &[Tensor<f64>],
    seed: u64,
    fault: Option<OpKind>,
) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut projection: Option<Vec<f64>> = None;

    let mut objective = |xs: &[Tensor<f64>], fault: Option<OpKind>, want_grads: bool| {
        let mut tape = Tape::with_fault(fault);
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone().with_grad())).collect();
        let out = build(&mut tape, &vars);
        let shape = tape.shape(out).to_vec();
        let proj = projection
            .get_or_insert_with(|| (0..tape.value(out).len()).map(|_| rng.sample(StandardNormal)).collect())
            .clone();
        let p = tape.constant(&shape, proj);
        let prod = tape.mul(out, p);
        let loss = tape.sum(prod, None);
        let value = tape.value(loss).item();
        let grads = if want_grads {
            tape.backward(loss);
            vars.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).len()])).collect()
        } else {
            Vec::new()
        };
        (value, grads)
    };

    let (_, analytic) = objective(inputs, fault, true);
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for j in 0..input.len() {
            let orig = input.data[j];
            work[i].data[j] = orig + STEP;
            let (plus, _) = objective(&work, None, false);
            work[i].data[j] = orig - STEP;
            let (minus, _) = objective(&work, None, false);
            work[i].data[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[i][j], numeric));
        }
        per_input.push(worst);
    }
    GradcheckReport { name: name.to_string(), per_input }
}

/// One entry of the op suite.
pub struct GradcheckCase {
    pub op: OpKind,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Box<Builder>,
}

fn shifted_away_from(t: Tensor<f64>, points: &[f64], margin: f64) -> Tensor<f64> {
    let data = t
        .data
        .iter()
        .map(|&v| {
            let mut v = v;
            for &p in points {
                if (v - p).abs() < margin {
                    v = p + margin.copysign(v - p);
                }
            }
            v
        })
        .collect();
    Tensor::new(&t.shape, data)
}

/// Exactly one case per differentiable op.
pub fn op_suite(seed: u64) -> Vec<GradcheckCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut n = |shape: &[usize]| normal_tensor(shape, &mut rng);
    let mut cases = Vec::new();
    let mut case = |op: OpKind, inputs: Vec<Tensor<f64>>, build: Box<Builder>| cases.push(GradcheckCase { op, inputs, build });

    case(OpKind::Dense, vec![n(&[1, 4]), n(&[4, 3]), n(&[3])], Box::new(|t, v| t.dense(v[0], v[1], Some(v[2]))));
    case(
        OpKind::Conv2d,
        vec![n(&[1, 4, 6, 6]), n(&[2, 4, 3, 3]), n(&[2])],
        Box::new(|t, v| {
            let a = t.conv2d(v[0], v[1], Some(v[2]), 1, 1);
            let b = t.conv2d(v[0], v[1], None, 2, 0);
            let a = t.sum(a, None);
            let b = t.sum(b, None);
            t.add(a, b)
        }),
    );
    case(OpKind::Relu, vec![shifted_away_from(n(&[3, 4]), &[0.0], 1e-3)], Box::new(|t, v| t.relu(v[0])));
    case(OpKind::Tanh, vec![n(&[3, 4])], Box::new(|t, v| t.tanh(v[0])));
    case(OpKind::Sigmoid, vec![n(&[3, 4])], Box::new(|t, v| t.sigmoid(v[0])));
    case(OpKind::Exp, vec![n(&[5])], Box::new(|t, v| t.exp(v[0])));
    let pos = Tensor::new(&[5], n(&[5]).data.iter().map(|x| x.abs() + 0.5).collect());
    case(OpKind::Log, vec![pos], Box::new(|t, v| t.log(v[0])));
    case(OpKind::Softmax, vec![n(&[2, 3, 4])], Box::new(|t, v| t.softmax(v[0], 1)));
    case(
        OpKind::GruCell,
        vec![n(&[2, 3]), n(&[2, 4]), n(&[3, 12]), n(&[4, 12]), n(&[12]), n(&[12])],
        Box::new(|t, v| t.gru_cell(v[0], v[1], v[2], v[3], v[4], v[5])),
    );
    let plan = Rc::new(ScatterPlan::new(&[Some(0), Some(3), None, Some(0), Some(5), Some(2)], &[2, 2, 3]));
    case(OpKind::ScatterAdd, vec![n(&[6, 2])], Box::new(move |t, v| t.scatter_add(v[0], plan.clone())));
    case(OpKind::Sum, vec![n(&[2, 3, 4])], Box::new(|t, v| t.sum(v[0], Some(1))));
    case(OpKind::Mean, vec![n(&[2, 3, 4])], Box::new(|t, v| t.mean(v[0], Some(2))));
    case(OpKind::Add, vec![n(&[3, 2]), n(&[3, 2])], Box::new(|t, v| t.add(v[0], v[1])));
    case(OpKind::Sub, vec![n(&[3, 2]), n(&[3, 2])], Box::new(|t, v| t.sub(v[0], v[1])));
    case(OpKind::Mul, vec![n(&[3, 2]), n(&[3, 2])], Box::new(|t, v| t.mul(v[0], v[1])));
    case(OpKind::Scale, vec![n(&[4])], Box::new(|t, v| t.scale(v[0], -1.7)));
    case(OpKind::AddScalar, vec![n(&[4])], Box::new(|t, v| t.add_scalar(v[0], 0.3)));
    case(
        OpKind::Clamp,
        vec![shifted_away_from(n(&[8]), &[-0.5, 0.5], 1e-3)],
        Box::new(|t, v| t.clamp(v[0], -0.5, 0.5)),
    );
    let a = n(&[6]);
    let b = Tensor::new(&[6], a.data.iter().zip(n(&[6]).data).map(|(x, y)| x + if y.abs() < 1e-2 { 0.1 } else { y }).collect());
    case(OpKind::Minimum, vec![a, b], Box::new(|t, v| t.minimum(v[0], v[1])));
    case(
        OpKind::GaussianLogProb,
        vec![n(&[2, 2]), n(&[2, 2]), n(&[2, 2])],
        Box::new(|t, v| t.gaussian_log_prob(v[0], v[1], v[2])),
    );
    case(OpKind::Concat, vec![n(&[2, 1, 3]), n(&[2, 2, 3])], Box::new(|t, v| t.concat(&[v[0], v[1]], 1)));
    case(OpKind::Reshape, vec![n(&[2, 3])], Box::new(|t, v| t.reshape(v[0], &[3, 2])));
    case(OpKind::Slice, vec![n(&[2, 5, 2])], Box::new(|t, v| t.slice(v[0], 1, 1, 3)));
    case(OpKind::GatherRows, vec![n(&[4, 3])], Box::new(|t, v| t.gather_rows(v[0], &[2, 0, 2])));
    case(OpKind::DepthOuter, vec![n(&[2, 3, 2, 2]), n(&[2, 4, 2, 2])], Box::new(|t, v| t.depth_outer(v[0], v[1])));
    case(OpKind::Upsample2x, vec![n(&[1, 2, 2, 3])], Box::new(|t, v| t.upsample2x(v[0])));
    let targets: Rc<[usize]> = Rc::from(vec![0usize, 2, 1, 2, 0, 1]);
    case(
        OpKind::CrossEntropy,
        vec![n(&[2, 3, 3])],
        Box::new(move |t, v| t.cross_entropy(v[0], targets.clone(), Some(&[1.0, 2.0, 0.5]))),
    );
    cases
}

/// Runs every op case; `fault` corrupts one op's backward pass.
pub fn run_op_suite(seed: u64, fault: Option<OpKind>) -> Vec<GradcheckReport> {
    op_suite(seed)
        .into_iter()
        .map(|c| gradcheck_inputs(c.op.name(), c.build.as_ref(), &c.inputs, seed, fault))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_covers_every_op_once() {
        let cases = op_suite(1);
        assert_eq!(cases.len(), OpKind::ALL.len());
        for kind in OpKind::ALL {
            assert_eq!(cases.iter().filter(|c| c.op == kind).count(), 1, "{}", kind.name());
        }
    }

    #[test]
    fn dense_passes() {
        let r = gradcheck("dense", &|t, v| t.dense(v[0], v[1], None), &[&[4], &[4, 3]], 7);
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn whole_suite_passes() {
        for r in run_op_suite(11, None) {
            assert!(r.passed(), "{} max rel err {:e}", r.name, r.max_rel_err());
        }
    }

    #[test]
    fn injected_fault_is_caught_and_named() {
        let failed: Vec<_> = run_op_suite(11, Some(OpKind::Conv2d)).into_iter().filter(|r| !r.passed()).collect();
        assert_eq!(failed.len(), 1);
        assert_eq!(failed[0].name, "conv2d");
    }
}
