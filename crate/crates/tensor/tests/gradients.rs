use nppr_tensor::gradcheck::check;
use nppr_tensor::{Graph, Result, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Contracts an arbitrary-shaped output against fixed random weights so the
/// check exercises a generic cotangent, not just all-ones.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let w = g.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type OpFn = fn(&mut Graph, &[Var]) -> Result<Var>;

fn per_op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, f64, OpFn)> {
    vec![
        ("add", vec![vec![3, 4], vec![3, 4]], -2.0, |g, v| g.add(v[0], v[1])),
        ("add_bcast", vec![vec![3, 4], vec![4]], -2.0, |g, v| g.add(v[0], v[1])),
        ("sub_bcast", vec![vec![2, 3, 4], vec![3, 1]], -2.0, |g, v| g.sub(v[0], v[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], -2.0, |g, v| g.mul(v[0], v[1])),
        ("mul_bcast", vec![vec![2, 3, 4], vec![2, 3, 1]], -2.0, |g, v| g.mul(v[0], v[1])),
        ("div", vec![vec![3, 4], vec![3, 4]], 0.5, |g, v| g.div(v[0], v[1])),
        ("scale", vec![vec![5]], -2.0, |g, v| Ok(g.scale(v[0], -1.7))),
        ("add_scalar", vec![vec![5]], -2.0, |g, v| Ok(g.add_scalar(v[0], 0.3))),
        ("matmul", vec![vec![3, 4], vec![4, 2]], -2.0, |g, v| g.matmul(v[0], v[1])),
        ("affine", vec![vec![3, 4], vec![4, 2], vec![2]], -2.0, |g, v| g.affine(v[0], v[1], v[2])),
        ("bmm", vec![vec![2, 3, 4], vec![2, 4, 2]], -2.0, |g, v| g.bmm(v[0], v[1])),
        ("relu", vec![vec![3, 4]], -2.0, |g, v| Ok(g.relu(v[0]))),
        ("tanh", vec![vec![3, 4]], -2.0, |g, v| Ok(g.tanh(v[0]))),
        ("exp", vec![vec![3, 4]], -2.0, |g, v| Ok(g.exp(v[0]))),
        ("log", vec![vec![3, 4]], 0.1, |g, v| Ok(g.log(v[0]))),
        ("softplus", vec![vec![3, 4]], -2.0, |g, v| Ok(g.softplus(v[0]))),
        ("softmax", vec![vec![3, 4]], -2.0, |g, v| Ok(g.softmax(v[0]))),
        ("log_softmax", vec![vec![3, 4]], -2.0, |g, v| Ok(g.log_softmax(v[0]))),
        ("batch_norm", vec![vec![6, 3]], -2.0, |g, v| g.batch_norm(v[0])),
        ("row_normalize", vec![vec![3, 4]], -2.0, |g, v| Ok(g.row_normalize(v[0]))),
        ("sum", vec![vec![3, 4]], -2.0, |g, v| Ok(g.sum(v[0]))),
        ("mean", vec![vec![3, 4]], -2.0, |g, v| Ok(g.mean(v[0]))),
        ("sum_axis0", vec![vec![2, 3, 4]], -2.0, |g, v| g.sum_axis(v[0], 0)),
        ("sum_axis1", vec![vec![2, 3, 4]], -2.0, |g, v| g.sum_axis(v[0], 1)),
        ("sum_axis2", vec![vec![2, 3, 4]], -2.0, |g, v| g.sum_axis(v[0], 2)),
        ("gather_rows", vec![vec![3, 4]], -2.0, |g, v| g.gather_rows(v[0], &[2, 0, 2, 1, 2])),
        ("pick_cols", vec![vec![3, 4]], -2.0, |g, v| g.pick_cols(v[0], &[3, 0, 1])),
        ("concat0", vec![vec![2, 3], vec![1, 3]], -2.0, |g, v| g.concat(&[v[0], v[1]], 0)),
        ("concat1", vec![vec![2, 3], vec![2, 2]], -2.0, |g, v| g.concat(&[v[0], v[1]], 1)),
        ("reshape", vec![vec![3, 4]], -2.0, |g, v| g.reshape(v[0], &[2, 6])),
    ]
}

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut total = 0;
    for (name, shapes, lo, op) in per_op_cases() {
        for trial in 0..5u64 {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s, lo, 2.0)).collect();
            let seed = 1000 + trial;
            let report = check(&inputs, H, |g, v| {
                let y = op(g, v)?;
                project(g, y, seed)
            })
            .unwrap();
            assert!(
                report.max_rel_error <= TOL,
                "{name} trial {trial}: rel error {:.3e} at input {} element {}",
                report.max_rel_error,
                report.worst_input,
                report.worst_element
            );
            total += 1;
        }
    }
    assert!(total >= 100, "only {total} cases");
}

#[derive(Debug, Clone, Copy)]
enum Step {
    Tanh,
    Softplus,
    Exp,
    MulOther,
    AddOther,
    MatMulSquare,
    Softmax,
    Scale,
}

fn step_strategy() -> impl Strategy<Value = Step> {
    prop_oneof![
        Just(Step::Tanh),
        Just(Step::Softplus),
        Just(Step::Exp),
        Just(Step::MulOther),
        Just(Step::AddOther),
        Just(Step::MatMulSquare),
        Just(Step::Softmax),
        Just(Step::Scale),
    ]
}

fn run_chain(g: &mut Graph, v: &[Var], steps: &[Step]) -> Result<Var> {
    let (mut x, other) = (v[0], v[1]);
    for s in steps {
        x = match s {
            Step::Tanh => g.tanh(x),
            Step::Softplus => g.softplus(x),
            Step::Exp => {
                // keep magnitudes bounded so FD stays well-conditioned
                let t = g.tanh(x);
                g.exp(t)
            }
            Step::MulOther => g.mul(x, other)?,
            Step::AddOther => g.add(x, other)?,
            Step::MatMulSquare => g.matmul(x, other)?,
            Step::Softmax => g.softmax(x),
            Step::Scale => g.scale(x, 0.7),
        };
    }
    project(g, x, 99)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    #[test]
    fn random_five_op_graphs(
        steps in proptest::collection::vec(step_strategy(), 5),
        a in proptest::collection::vec(-2.0f64..2.0, 9),
        b in proptest::collection::vec(-2.0f64..2.0, 9),
    ) {
        let inputs = vec![
            Tensor::new([3, 3], a).unwrap(),
            Tensor::new([3, 3], b).unwrap(),
        ];
        let report = check(&inputs, H, |g, v| run_chain(g, v, &steps)).unwrap();
        prop_assert!(report.max_rel_error <= TOL, "{steps:?}: {report:?}");
    }

    #[test]
    fn softmax_is_a_distribution(x in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let mut g = Graph::new();
        let v = g.constant(Tensor::new([3, 4], x).unwrap());
        let y = g.softmax(v);
        for r in 0..3 {
            let row = g.value(y).row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn reused_leaf_sums_branch_gradients(x in -2.0f64..2.0, c1 in -2.0f64..2.0, c2 in -2.0f64..2.0) {
        // f = tanh(c1 x) + softplus(c2 x): grad is the sum of the two branch grads
        let mut g = Graph::new();
        let xv = g.param(Tensor::scalar(x));
        let a = g.scale(xv, c1);
        let a = g.tanh(a);
        let b = g.scale(xv, c2);
        let b = g.softplus(b);
        let y = g.add(a, b).unwrap();
        g.backward(y).unwrap();
        let expected = c1 * (1.0 - (c1 * x).tanh().powi(2)) + c2 / (1.0 + (-c2 * x).exp());
        prop_assert!((g.grad(xv).unwrap().item() - expected).abs() < 1e-12);
    }
}

#[test]
fn detached_inputs_untouched() {
    let mut g = Graph::new();
    let w = g.param(Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let x = g.constant(Tensor::new([1, 2], vec![0.5, -0.5]).unwrap());
    let y = g.matmul(x, w).unwrap();
    let y = g.tanh(y);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(x).is_none());
    assert_eq!(g.value(x).data(), &[0.5, -0.5]);
    assert!(g.grad(w).is_some());
}
