//! Finite-difference checks for every differentiable op and layer, shared by
//! the unit tests and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gradcheck::{central_difference, relative_error, richardson_difference};
use crate::*;

const EPS: f64 = 1e-3;
/// Tolerance for isolated ops and layers.
pub const LAYER_TOL: f64 = 1e-5;

/// Worst relative error seen for one named check across all trials.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

#[derive(Default)]
struct Results(Vec<CheckResult>);

impl Results {
    fn record(&mut self, name: &str, err: f64, tolerance: f64) {
        match self.0.iter_mut().find(|r| r.name == name) {
            Some(r) => r.worst = r.worst.max(err),
            None => self.0.push(CheckResult {
                name: name.to_string(),
                worst: err,
                tolerance,
            }),
        }
    }
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Contracts the op output with fixed random weights so the loss is scalar
/// and every output entry contributes.
fn contracted_loss<F>(f: &F, inputs: &[Tensor], weights_seed: u64) -> (Graph, Vec<Var>, Var)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars);
    let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
    let shape = g.shape(out).to_vec();
    let r = random_tensor(&shape, &mut rng, -1.0, 1.0);
    let rv = g.constant(r);
    let prod = g.mul(out, rv);
    let loss = g.sum(prod);
    (g, vars, loss)
}

fn check_op<F>(res: &mut Results, name: &str, inputs: &[Tensor], f: F, tol: f64)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let seed = 0xC0FFEE;
    let (g, vars, loss) = contracted_loss(&f, inputs, seed);
    let grads = g.backward_all(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let n = input.len();
        let idx: Vec<usize> = if n <= 40 {
            (0..n).collect()
        } else {
            (0..40).map(|i| i * n / 40).collect()
        };
        let numeric = richardson_difference(
            |x| {
                let mut perturbed = inputs.to_vec();
                perturbed[k] = Tensor::new(input.shape(), x.to_vec()).unwrap();
                let (g2, _, l2) = contracted_loss(&f, &perturbed, seed);
                g2.value(l2).item()
            },
            input.data(),
            &idx,
            EPS,
        );
        for (&i, num) in idx.iter().zip(numeric) {
            worst = worst.max(relative_error(analytic.data()[i], num));
        }
    }
    res.record(name, worst, tol);
}

fn trials(n: u64, mut body: impl FnMut(&mut ChaCha8Rng)) {
    for t in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + t);
        body(&mut rng);
    }
}

fn elementwise_ops(res: &mut Results, n: u64) {
    trials(n, |rng| {
        let a = random_tensor(&[3, 4], rng, -2.0, 2.0);
        let b = random_tensor(&[3, 4], rng, -2.0, 2.0);
        let pos = random_tensor(&[3, 4], rng, 0.2, 3.0);
        let row = random_tensor(&[4], rng, -1.0, 1.0);
        check_op(res, "add", &[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]), LAYER_TOL);
        check_op(res, "sub", &[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]), LAYER_TOL);
        check_op(res, "mul", &[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]), LAYER_TOL);
        check_op(res, "add_row", &[a.clone(), row.clone()], |g, v| g.add_row(v[0], v[1]), LAYER_TOL);
        check_op(res, "mul_row", &[a.clone(), row.clone()], |g, v| g.mul_row(v[0], v[1]), LAYER_TOL);
        check_op(res, "scale", std::slice::from_ref(&a), |g, v| g.scale(v[0], -1.7), LAYER_TOL);
        check_op(res, "add_scalar", std::slice::from_ref(&a), |g, v| g.add_scalar(v[0], 0.3), LAYER_TOL);
        check_op(res, "exp", std::slice::from_ref(&a), |g, v| g.exp(v[0]), LAYER_TOL);
        check_op(res, "log", &[pos], |g, v| g.log(v[0]), LAYER_TOL);
        check_op(res, "silu", std::slice::from_ref(&a), |g, v| g.silu(v[0]), LAYER_TOL);
        check_op(res, "softplus", std::slice::from_ref(&a), |g, v| g.softplus(v[0]), LAYER_TOL);
        check_op(res, "sum", &[a], |g, v| g.sum(v[0]), LAYER_TOL);
    });
}

fn linear_algebra_ops(res: &mut Results, n: u64) {
    trials(n, |rng| {
        let a = random_tensor(&[2, 3, 4], rng, -1.0, 1.0);
        let w = random_tensor(&[4, 5], rng, -1.0, 1.0);
        check_op(res, "matmul", &[a, w], |g, v| g.matmul(v[0], v[1]), LAYER_TOL);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let sa = if ta { [2, 4, 3] } else { [2, 3, 4] };
            let sb = if tb { [2, 5, 4] } else { [2, 4, 5] };
            let a = random_tensor(&sa, rng, -1.0, 1.0);
            let b = random_tensor(&sb, rng, -1.0, 1.0);
            check_op(
                res,
                &format!("bmm({ta},{tb})"),
                &[a, b],
                move |g, v| g.bmm(v[0], v[1], ta, tb),
                LAYER_TOL,
            );
        }
    });
}

fn shape_ops(res: &mut Results, n: u64) {
    trials(n, |rng| {
        let a = random_tensor(&[2, 3, 4], rng, -1.0, 1.0);
        let b = random_tensor(&[2, 2, 4], rng, -1.0, 1.0);
        check_op(res, "reshape", std::slice::from_ref(&a), |g, v| g.reshape(v[0], &[6, 4]), LAYER_TOL);
        check_op(res, "permute", std::slice::from_ref(&a), |g, v| g.permute(v[0], &[2, 0, 1]), LAYER_TOL);
        check_op(res, "narrow", std::slice::from_ref(&a), |g, v| g.narrow(v[0], 1, 1, 2), LAYER_TOL);
        check_op(res, "concat", &[a, b], |g, v| g.concat(&[v[0], v[1]], 1), LAYER_TOL);
        let table = random_tensor(&[5, 3], rng, -1.0, 1.0);
        check_op(res, "gather_rows", &[table], |g, v| g.gather_rows(v[0], &[4, 0, 4, 2]), LAYER_TOL);
        let img = random_tensor(&[2, 3, 3, 2], rng, -1.0, 1.0);
        check_op(res, "upsample2x", &[img], |g, v| g.upsample2x(v[0]), LAYER_TOL);
    });
}

fn normalisation_and_loss_ops(res: &mut Results, n: u64) {
    trials(n, |rng| {
        let a = random_tensor(&[3, 6], rng, -2.0, 2.0);
        check_op(res, "softmax", std::slice::from_ref(&a), |g, v| g.softmax(v[0]), LAYER_TOL);
        check_op(res, "log_softmax", std::slice::from_ref(&a), |g, v| g.log_softmax(v[0]), LAYER_TOL);
        check_op(res, "layer_norm", std::slice::from_ref(&a), |g, v| g.layer_norm(v[0], 1e-5), LAYER_TOL);
        check_op(res, "cross_entropy", std::slice::from_ref(&a), |g, v| g.cross_entropy(v[0], &[0, 5, 2]), LAYER_TOL);
        let target = random_tensor(&[3, 6], rng, -2.0, 2.0);
        check_op(
                res,
            "gaussian_nll",
            std::slice::from_ref(&a),
            move |g, v| gaussian_nll(g, v[0], &target).unwrap(),
            LAYER_TOL,
        );
        let lv = random_tensor(&[3, 6], rng, -1.0, 1.0);
        check_op(res, "kl", &[a, lv], |g, v| kl_standard_normal(g, v[0], v[1]), LAYER_TOL);
    });
}

fn convolution_ops(res: &mut Results, n: u64) {
    trials(n, |rng| {
        let x = random_tensor(&[2, 2, 8, 8], rng, -1.0, 1.0);
        let w = random_tensor(&[3, 2, 3, 3], rng, -0.5, 0.5);
        let b = random_tensor(&[3], rng, -0.5, 0.5);
        check_op(res, "conv2d s1", &[x.clone(), w.clone()], |g, v| g.conv2d(v[0], v[1], 1, 1), LAYER_TOL);
        check_op(res, "conv2d s2", &[x.clone(), w], |g, v| g.conv2d(v[0], v[1], 2, 1), LAYER_TOL);
        let y = random_tensor(&[2, 3, 4, 4], rng, -1.0, 1.0);
        check_op(res, "add_channel", &[y, b], |g, v| g.add_channel(v[0], v[1]), LAYER_TOL);
    });
}

/// Gradients with respect to parameters, comparing against finite differences
/// of the full loss.
fn check_params<F>(res: &mut Results, name: &str, store: &ParamStore, build: F, tol: f64, plain: bool)
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    let grads = g.backward(loss, store).unwrap();
    for (id, pname, t) in store.iter() {
        let n = t.len();
        let idx: Vec<usize> = if n <= 12 {
            (0..n).collect()
        } else {
            (0..12).map(|i| i * n / 12).collect()
        };
        let eval = |x: &[f64]| {
            let mut s = store.clone();
            *s.get_mut(id) = Tensor::new(t.shape(), x.to_vec()).unwrap();
            let mut g2 = Graph::new();
            let l = build(&mut g2, &s);
            g2.value(l).item()
        };
        let numeric = if plain {
            central_difference(eval, t.data(), &idx, 1e-4)
        } else {
            richardson_difference(eval, t.data(), &idx, EPS)
        };
        let worst = idx
            .iter()
            .zip(numeric)
            .map(|(&i, num)| relative_error(grads.get(id).data()[i], num))
            .fold(0.0, f64::max);
        res.record(&format!("{name} {pname}"), worst, tol);
    }
}

fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(out).to_vec();
    let r = g.constant(random_tensor(&shape, &mut rng, -1.0, 1.0));
    let p = g.mul(out, r);
    g.sum(p)
}

fn three_layer_mlp_parameters(res: &mut Results, n: u64) {
    trials(n, |rng| {
        let mut store = ParamStore::new();
        let l1 = Linear::new(&mut store, "l1", 5, 8, rng);
        let l2 = Linear::new(&mut store, "l2", 8, 8, rng);
        let l3 = Linear::new(&mut store, "l3", 8, 3, rng);
        for id in store.ids().collect::<Vec<_>>() {
            let t = store.get(id).clone();
            *store.get_mut(id) = random_tensor(t.shape(), rng, -0.8, 0.8);
        }
        let x = random_tensor(&[4, 5], rng, -1.0, 1.0);
        check_params(
            res,
            "mlp",
            &store,
            |g, s| {
                let xv = g.constant(x.clone());
                let h = l1.forward(g, s, xv);
                let h = g.silu(h);
                let h = l2.forward(g, s, h);
                let h = g.silu(h);
                let o = l3.forward(g, s, h);
                weighted_sum(g, o, 9)
            },
            LAYER_TOL,
            true,
        );
    });
}

fn attention_and_transformer_layers(res: &mut Results, n: u64) {
    trials(n, |rng| {
        let cfg = AttentionConfig {
            width: 8,
            heads: 2,
            layers: 1,
        };
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "mha", 8, 2, rng).unwrap();
        let enc = EncoderLayer::new(&mut store, "enc", &cfg, 16, rng).unwrap();
        let dec = DecoderLayer::new(&mut store, "dec", &cfg, 16, rng).unwrap();
        let norm = LayerNorm::new(&mut store, "ln", 8);
        for id in store.ids().collect::<Vec<_>>() {
            let t = store.get(id).clone();
            *store.get_mut(id) = random_tensor(t.shape(), rng, -0.6, 0.6);
        }
        let q = random_tensor(&[2, 3, 8], rng, -1.0, 1.0);
        let kv = random_tensor(&[2, 4, 8], rng, -1.0, 1.0);
        check_params(
            res,
            "transformer",
            &store,
            |g, s| {
                let qv = g.constant(q.clone());
                let kvv = g.constant(kv.clone());
                let a = mha.forward(g, s, qv, kvv, kvv).unwrap().output;
                let e = enc.forward(g, s, a).unwrap();
                let d = dec.forward(g, s, e, kvv).unwrap();
                let o = norm.forward(g, s, d);
                weighted_sum(g, o, 17)
            },
            LAYER_TOL,
            false,
        );
    });
}

fn conv_block_on_8x8_input(res: &mut Results, n: u64) {
    trials(n, |rng| {
        let mut store = ParamStore::new();
        let same = ConvBlock::new(&mut store, "same", 3, 3, 1, false, rng);
        let down = ConvBlock::new(&mut store, "down", 3, 4, 2, false, rng);
        let up = ConvBlock::new(&mut store, "up", 4, 2, 1, true, rng);
        let head = Conv2d::new(&mut store, "head", 2, 1, 3, rng);
        for id in store.ids().collect::<Vec<_>>() {
            let t = store.get(id).clone();
            *store.get_mut(id) = random_tensor(t.shape(), rng, -0.5, 0.5);
        }
        let x = random_tensor(&[2, 3, 8, 8], rng, -1.0, 1.0);
        check_params(
            res,
            "conv block",
            &store,
            |g, s| {
                let xv = g.constant(x.clone());
                let h = same.forward(g, s, xv).unwrap();
                let h = down.forward(g, s, h).unwrap();
                let h = up.forward(g, s, h).unwrap();
                let o = head.forward(g, s, h);
                weighted_sum(g, o, 23)
            },
            LAYER_TOL,
            false,
        );
    });
}

/// Runs every op and layer check `trials` times with fresh random inputs.
pub fn layer_suite(trials: u64) -> Vec<CheckResult> {
    let mut res = Results::default();
    elementwise_ops(&mut res, trials);
    linear_algebra_ops(&mut res, trials);
    shape_ops(&mut res, trials);
    normalisation_and_loss_ops(&mut res, trials);
    convolution_ops(&mut res, trials);
    three_layer_mlp_parameters(&mut res, trials);
    attention_and_transformer_layers(&mut res, trials);
    conv_block_on_8x8_input(&mut res, trials);
    res.0
}
