//! Every primitive checked against central finite differences, at first and
//! second order, on random inputs.

use metaprep::autodiff::{finite_difference_grad, max_relative_error, AutodiffError, Graph, Op, ParamSet, Tensor, Var};
use metaprep::rng::Stream;
use proptest::prelude::*;

const H: f64 = 1e-5;

#[derive(Clone, Copy)]
enum Domain {
    Symmetric,
    Positive,
}

struct Case {
    op: Op,
    shapes: Vec<Vec<usize>>,
    domain: Domain,
}

fn case(op: Op, shapes: &[&[usize]], domain: Domain) -> Case {
    Case {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        domain,
    }
}

fn cases() -> Vec<Case> {
    use Domain::*;
    vec![
        case(Op::Add, &[&[2, 3], &[2, 3]], Symmetric),
        case(Op::Sub, &[&[2, 3], &[2, 3]], Symmetric),
        case(Op::Mul, &[&[2, 3], &[2, 3]], Symmetric),
        case(Op::Div, &[&[4], &[4]], Positive),
        case(Op::Scale(1.7), &[&[4]], Symmetric),
        case(Op::AddScalar(-0.3), &[&[4]], Symmetric),
        case(Op::Sqrt, &[&[4]], Positive),
        case(Op::Exp, &[&[4]], Symmetric),
        case(Op::Log, &[&[4]], Positive),
        case(Op::Tanh, &[&[5]], Symmetric),
        case(Op::Gelu, &[&[5]], Symmetric),
        case(Op::GeluGrad, &[&[5]], Symmetric),
        case(Op::Matmul, &[&[2, 3], &[3, 4]], Symmetric),
        case(Op::Matmul, &[&[2, 2, 3], &[2, 3, 2]], Symmetric),
        case(Op::Transpose, &[&[2, 3, 4]], Symmetric),
        case(Op::Reshape(vec![3, 2]), &[&[2, 3]], Symmetric),
        case(
            Op::Slice {
                axis: 1,
                start: 1,
                len: 2,
            },
            &[&[2, 4, 3]],
            Symmetric,
        ),
        case(Op::Concat { axis: 1 }, &[&[2, 1], &[2, 3]], Symmetric),
        case(Op::Sum, &[&[3, 2]], Symmetric),
        case(Op::Expand(vec![2, 3]), &[&[]], Symmetric),
        case(Op::SumLast, &[&[2, 3]], Symmetric),
        case(Op::ExpandLast(3), &[&[2]], Symmetric),
        case(Op::SumLeading, &[&[2, 3]], Symmetric),
        case(Op::ExpandLeading(vec![2]), &[&[3]], Symmetric),
        case(Op::Softmax, &[&[2, 4]], Symmetric),
        case(Op::CrossEntropy(vec![0, 3, 1].into()), &[&[3, 4]], Symmetric),
        case(Op::Gather(vec![4, 0, 4, 2].into()), &[&[5, 3]], Symmetric),
        case(
            Op::ScatterAdd {
                ids: vec![1, 1, 0].into(),
                rows: 3,
            },
            &[&[3, 2]],
            Symmetric,
        ),
    ]
}

fn random_inputs(c: &Case, rng: &mut Stream) -> ParamSet {
    let mut p = ParamSet::new();
    for (i, shape) in c.shapes.iter().enumerate() {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| match c.domain {
                Domain::Symmetric => rng.next_f64() * 4.0 - 2.0,
                Domain::Positive => 0.5 + rng.next_f64() * 1.5,
            })
            .collect();
        p.insert(format!("in{i}"), Tensor::new(shape.clone(), data).unwrap())
            .unwrap();
    }
    p
}

/// `sum(weights * op(inputs))`, so every output element carries a distinct cotangent.
fn weighted_output(g: &mut Graph, op: &Op, inputs: &[Var], seed: u64) -> Var {
    let y = g.apply(op.clone(), inputs).unwrap();
    let mut rng = Stream::new(seed ^ 0xabc);
    let n = g.value(y).len();
    let w: Vec<f64> = (0..n).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
    let w = g.constant(Tensor::new(g.shape(y).to_vec(), w).unwrap());
    let wy = g.mul(y, w).unwrap();
    g.sum(wy).unwrap()
}

fn eval(op: &Op, p: &ParamSet, seed: u64) -> f64 {
    let mut g = Graph::new();
    let vars = g.bind(p);
    let out = weighted_output(&mut g, op, vars.vars(), seed);
    g.value(out).item()
}

fn first_order(op: &Op, p: &ParamSet, seed: u64) -> ParamSet {
    let mut g = Graph::new();
    let vars = g.bind(p);
    let out = weighted_output(&mut g, op, vars.vars(), seed);
    g.grad_values(out, &vars).unwrap()
}

/// `sum(v . grad f)` where `v` is a fixed direction; its gradient is a Hessian-vector product.
fn directional_grad(g: &mut Graph, op: &Op, vars: &[Var], seed: u64) -> Var {
    let out = weighted_output(g, op, vars, seed);
    let grads = g.grad(out, vars, true).unwrap();
    let mut rng = Stream::new(seed ^ 0x5eed);
    let mut total = g.scalar(0.0);
    for gv in grads {
        let n = g.value(gv).len();
        let dir: Vec<f64> = (0..n).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
        let dir = g.constant(Tensor::new(g.shape(gv).to_vec(), dir).unwrap());
        let t = g.mul(gv, dir).unwrap();
        let t = g.sum(t).unwrap();
        let t = g.reshape(t, &[]).unwrap();
        total = g.add(total, t).unwrap();
    }
    total
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_primitive_matches_finite_differences(seed in any::<u64>()) {
        for c in cases() {
            let p = random_inputs(&c, &mut Stream::new(seed));
            let analytic = first_order(&c.op, &p, seed);
            let numeric =
                finite_difference_grad(|q| Ok::<_, ()>(eval(&c.op, q, seed)), &p, H).unwrap();
            let err = max_relative_error(&analytic.flatten(), &numeric.flatten());
            prop_assert!(err <= 1e-6, "{:?}: relative error {err:e}", c.op);
        }
    }

    #[test]
    fn every_primitive_has_correct_second_derivatives(seed in any::<u64>()) {
        for c in cases() {
            let p = random_inputs(&c, &mut Stream::new(seed));
            let mut g = Graph::new();
            let vars = g.bind(&p);
            let h = directional_grad(&mut g, &c.op, vars.vars(), seed);
            let analytic = g.grad_values(h, &vars).unwrap();
            let numeric = finite_difference_grad(
                |q| {
                    let mut g = Graph::new();
                    let vars = g.bind(q);
                    let h = directional_grad(&mut g, &c.op, vars.vars(), seed);
                    Ok::<_, ()>(g.value(h).item())
                },
                &p,
                H,
            )
            .unwrap();
            let err = max_relative_error(&analytic.flatten(), &numeric.flatten());
            prop_assert!(err <= 1e-6, "{:?}: second-order relative error {err:e}", c.op);
        }
    }

    #[test]
    fn gradient_is_linear(seed in any::<u64>(), a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let mut rng = Stream::new(seed);
        let x: Vec<f64> = (0..6).map(|_| rng.next_f64() * 4.0 - 2.0).collect();
        let build = |g: &mut Graph, x: Var| -> (Var, Var) {
            let t = g.tanh(x).unwrap();
            let f = g.sum(t).unwrap();
            let s = g.softmax(x).unwrap();
            let e = g.gelu(s).unwrap();
            let m = g.mul(e, x).unwrap();
            let h = g.sum(m).unwrap();
            (f, h)
        };
        let grad_of = |ca: f64, cb: f64| {
            let mut g = Graph::new();
            let xv = g.leaf(Tensor::vector(x.clone()));
            let (f, h) = build(&mut g, xv);
            let f = g.scale(f, ca).unwrap();
            let h = g.scale(h, cb).unwrap();
            let out = g.add(f, h).unwrap();
            let gx = g.grad(out, &[xv], false).unwrap()[0];
            g.value(gx).data().to_vec()
        };
        let combined = grad_of(a, b);
        let gf = grad_of(1.0, 0.0);
        let gh = grad_of(0.0, 1.0);
        for i in 0..6 {
            let expect = a * gf[i] + b * gh[i];
            prop_assert!((combined[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }
}

#[test]
fn layer_norm_composite_matches_finite_differences() {
    let mut rng = Stream::new(99);
    let mut p = ParamSet::new();
    for (name, shape) in [("x", vec![3, 4]), ("gain", vec![4]), ("bias", vec![4])] {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.next_f64() * 4.0 - 2.0).collect();
        p.insert(name, Tensor::new(shape, data).unwrap()).unwrap();
    }
    let f = |g: &mut Graph, vars: &metaprep::autodiff::ParamVars| -> Var {
        let (x, gain, bias) = (
            vars.get("x").unwrap(),
            vars.get("gain").unwrap(),
            vars.get("bias").unwrap(),
        );
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        let y = g.tanh(y).unwrap();
        g.sum(y).unwrap()
    };
    let mut g = Graph::new();
    let vars = g.bind(&p);
    let out = f(&mut g, &vars);
    let analytic = g.grad_values(out, &vars).unwrap();
    let numeric = finite_difference_grad(
        |q| {
            let mut g = Graph::new();
            let vars = g.bind(q);
            let out = f(&mut g, &vars);
            Ok::<_, AutodiffError>(g.value(out).item())
        },
        &p,
        H,
    )
    .unwrap();
    assert!(max_relative_error(&analytic.flatten(), &numeric.flatten()) <= 1e-6);
}

/// For `f(θ) = θᵀAθ/2` with symmetric `A`, the gradient of `⟨∇f, v⟩` is `Av` exactly.
#[test]
fn hessian_vector_product_of_quadratic_is_exact() {
    let mut rng = Stream::new(4);
    let n = 6;
    for _ in 0..10 {
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = rng.next_f64() * 4.0 - 2.0;
                a[i * n + j] = v;
                a[j * n + i] = v;
            }
        }
        let theta: Vec<f64> = (0..n).map(|_| rng.next_f64() * 4.0 - 2.0).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.next_f64() * 4.0 - 2.0).collect();

        let mut g = Graph::new();
        let th = g.leaf(Tensor::new(vec![n, 1], theta.clone()).unwrap());
        let am = g.constant(Tensor::new(vec![n, n], a.clone()).unwrap());
        let ath = g.matmul(am, th).unwrap();
        let q = g.mul(th, ath).unwrap();
        let q = g.sum(q).unwrap();
        let f = g.scale(q, 0.5).unwrap();
        let grad = g.grad(f, &[th], true).unwrap()[0];
        let vv = g.constant(Tensor::new(vec![n, 1], v.clone()).unwrap());
        let gv = g.mul(grad, vv).unwrap();
        let gv = g.sum(gv).unwrap();
        let hvp = g.grad(gv, &[th], false).unwrap()[0];

        let expected: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[i * n + j] * v[j]).sum()).collect();
        let err = max_relative_error(g.value(hvp).data(), &expected);
        assert!(err <= 1e-10, "hvp relative error {err:e}");
    }
}

#[test]
fn identical_inputs_give_bit_identical_gradients() {
    let run = || {
        let c = &cases()[13];
        let p = random_inputs(c, &mut Stream::new(8));
        let mut g = Graph::new();
        let vars = g.bind(&p);
        let h = directional_grad(&mut g, &c.op, vars.vars(), 8);
        let v = g.value(h).item();
        (v.to_bits(), g.grad_values(h, &vars).unwrap().flatten())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert_eq!(
        ga.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        gb.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
}
