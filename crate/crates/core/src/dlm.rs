//! Discretized logistic mixture over a [`QuantGrid`].
//!
//! Bin `q` covers `[v - D/2, v + D/2]` with `v = q / (Q - 1)` and `D` the bin
//! width; the first and last bins extend to minus and plus infinity so the
//! pmf sums to one for any parameters.

use rand::Rng;

use spinterp_nn::{CustomOp, Tensor};

use crate::error::{Error, Result};
use crate::schema::QuantGrid;

pub const MIN_SCALE: f64 = 1e-3;
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct DlmParams {
    pub logits: Vec<f64>,
    pub means: Vec<f64>,
    /// Natural log of each component scale.
    pub log_scales: Vec<f64>,
}

impl DlmParams {
    pub fn new(logits: Vec<f64>, means: Vec<f64>, log_scales: Vec<f64>) -> Result<Self> {
        let k = logits.len();
        if k == 0 || means.len() != k || log_scales.len() != k {
            return Err(Error::Shape(format!(
                "mixture needs equal, non-empty component lists; got {}/{}/{}",
                logits.len(),
                means.len(),
                log_scales.len()
            )));
        }
        Ok(Self {
            logits,
            means,
            log_scales,
        })
    }

    /// Builds parameters from unconstrained network outputs, flooring every
    /// scale at [`MIN_SCALE`].
    pub fn from_raw(logits: &[f64], means: &[f64], raw_log_scales: &[f64]) -> Result<Self> {
        Self::new(
            logits.to_vec(),
            means.to_vec(),
            raw_log_scales.iter().map(|&r| floored_log_scale(r)).collect(),
        )
    }

    pub fn single(mean: f64, scale: f64) -> Self {
        Self {
            logits: vec![0.0],
            means: vec![mean],
            log_scales: vec![scale.ln()],
        }
    }

    pub fn components(&self) -> usize {
        self.logits.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        let lse = log_sum_exp(&self.logits);
        self.logits.iter().map(|l| (l - lse).exp()).collect()
    }
}

/// `ln s_min + softplus(raw - ln s_min)`: smooth, monotone, and never below
/// `ln s_min`.
pub fn floored_log_scale(raw: f64) -> f64 {
    let lmin = MIN_SCALE.ln();
    lmin + softplus(raw - lmin)
}

fn floored_log_scale_grad(raw: f64) -> f64 {
    sigmoid(raw - MIN_SCALE.ln())
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log sigma(x)`.
fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// `log(1 - exp(-x))` for `x > 0`.
fn log1mexp(x: f64) -> f64 {
    if x < std::f64::consts::LN_2 {
        (-(-x).exp_m1()).ln()
    } else {
        (-(-x).exp()).ln_1p()
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Lowest,
    Interior,
    Highest,
}

fn bin_kind(grid: QuantGrid, bin: usize) -> BinKind {
    if bin == 0 {
        BinKind::Lowest
    } else if bin == grid.steps() - 1 {
        BinKind::Highest
    } else {
        BinKind::Interior
    }
}

/// Log mass of one logistic component in a bin, and its derivatives with
/// respect to the standardized upper edge `a` and lower edge `b`.
struct ComponentTerm {
    log_p: f64,
    a: f64,
    b: f64,
    d_a: f64,
    d_b: f64,
}

fn component_term(grid: QuantGrid, bin: usize, mean: f64, log_scale: f64) -> ComponentTerm {
    let inv_s = (-log_scale).exp();
    let half = grid.bin_width() / 2.0;
    let v = grid.value(bin);
    let a = (v + half - mean) * inv_s;
    let b = (v - half - mean) * inv_s;
    match bin_kind(grid, bin) {
        BinKind::Lowest => ComponentTerm {
            log_p: log_sigmoid(a),
            a,
            b,
            d_a: sigmoid(-a),
            d_b: 0.0,
        },
        BinKind::Highest => ComponentTerm {
            log_p: log_sigmoid(-b),
            a,
            b,
            d_a: 0.0,
            d_b: -sigmoid(b),
        },
        BinKind::Interior => {
            // sigma(a) - sigma(b) = sigma(a) sigma(-b) (1 - e^{b - a})
            let log_p = log_sigmoid(a) + log_sigmoid(-b) + log1mexp(a - b);
            let dens = |x: f64| (log_sigmoid(x) + log_sigmoid(-x) - log_p).exp();
            ComponentTerm {
                log_p,
                a,
                b,
                d_a: dens(a),
                d_b: -dens(b),
            }
        }
    }
}

fn check_bin(grid: QuantGrid, bin: usize) -> Result<()> {
    if bin >= grid.steps() {
        return Err(Error::OutOfRange {
            what: "bin index",
            value: bin as f64,
        });
    }
    Ok(())
}

/// Unfloored log mass of `bin`.
fn raw_log_prob(params: &DlmParams, grid: QuantGrid, bin: usize) -> f64 {
    let lse = log_sum_exp(&params.logits);
    let terms: Vec<f64> = (0..params.components())
        .map(|i| {
            params.logits[i] - lse + component_term(grid, bin, params.means[i], params.log_scales[i]).log_p
        })
        .collect();
    log_sum_exp(&terms)
}

pub fn bin_prob(params: &DlmParams, grid: QuantGrid, bin: usize) -> Result<f64> {
    check_bin(grid, bin)?;
    Ok(raw_log_prob(params, grid, bin).exp())
}

/// Log-probability of a grid value, floored at `ln 1e-12`.
pub fn log_prob(params: &DlmParams, grid: QuantGrid, value: f64) -> Result<f64> {
    let bin = grid.index_of(value).ok_or(Error::OutOfRange {
        what: "off-grid value",
        value,
    })?;
    Ok(log_prob_bin(params, grid, bin))
}

pub fn log_prob_bin(params: &DlmParams, grid: QuantGrid, bin: usize) -> f64 {
    raw_log_prob(params, grid, bin).max(PROB_FLOOR.ln())
}

pub fn pmf(params: &DlmParams, grid: QuantGrid) -> Vec<f64> {
    (0..grid.steps())
        .map(|q| raw_log_prob(params, grid, q).exp())
        .collect()
}

/// Relative margin below which two bin probabilities count as tied.
pub const MODE_TIE_TOL: f64 = 1e-12;

/// Most probable bin; ties (within [`MODE_TIE_TOL`]) go to the lower bin.
pub fn mode_bin(params: &DlmParams, grid: QuantGrid) -> usize {
    let p = pmf(params, grid);
    let mut best = 0;
    for q in 1..p.len() {
        if p[q] > p[best] * (1.0 + MODE_TIE_TOL) {
            best = q;
        }
    }
    best
}

pub fn mode(params: &DlmParams, grid: QuantGrid) -> f64 {
    grid.value(mode_bin(params, grid))
}

pub fn sample<R: Rng>(params: &DlmParams, grid: QuantGrid, rng: &mut R) -> f64 {
    let w = params.weights();
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut comp = w.len() - 1;
    for (i, wi) in w.iter().enumerate() {
        acc += wi;
        if u < acc {
            comp = i;
            break;
        }
    }
    // Open interval so both logs stay finite.
    let mut e: f64 = rng.random();
    while e <= 0.0 {
        e = rng.random();
    }
    let x = params.means[comp] + params.log_scales[comp].exp() * (e.ln() - (-e).ln_1p());
    grid.value(grid.nearest_index(x.clamp(0.0, 1.0)))
}

/// Log-probability and its gradient with respect to
/// `(logits, means, log_scales)`. The gradient is zero where the floor is
/// active.
pub fn log_prob_with_grad(params: &DlmParams, grid: QuantGrid, bin: usize) -> (f64, [Vec<f64>; 3]) {
    let k = params.components();
    let lse = log_sum_exp(&params.logits);
    let log_w: Vec<f64> = params.logits.iter().map(|l| l - lse).collect();
    let terms: Vec<ComponentTerm> = (0..k)
        .map(|i| component_term(grid, bin, params.means[i], params.log_scales[i]))
        .collect();
    let joint: Vec<f64> = (0..k).map(|i| log_w[i] + terms[i].log_p).collect();
    let lp = log_sum_exp(&joint);
    if lp < PROB_FLOOR.ln() {
        return (PROB_FLOOR.ln(), [vec![0.0; k], vec![0.0; k], vec![0.0; k]]);
    }
    let mut g_logit = vec![0.0; k];
    let mut g_mean = vec![0.0; k];
    let mut g_ls = vec![0.0; k];
    for i in 0..k {
        let resp = (joint[i] - lp).exp();
        g_logit[i] = resp - log_w[i].exp();
        let t = &terms[i];
        let inv_s = (-params.log_scales[i]).exp();
        g_mean[i] = -resp * inv_s * (t.d_a + t.d_b);
        g_ls[i] = -resp * (t.a * t.d_a + t.b * t.d_b);
    }
    (lp, [g_logit, g_mean, g_ls])
}

/// Per-row negative log-likelihood of target bins.
///
/// Inputs are `logits`, `means` and raw (pre-floor) log-scales, each
/// `[B, K]`; the output is `[B]`.
pub struct DlmNll {
    pub grid: QuantGrid,
    pub targets: Vec<usize>,
}

impl DlmNll {
    fn row_params(&self, inputs: &[&Tensor], row: usize) -> DlmParams {
        let k = inputs[0].shape()[1];
        let slice = |t: &Tensor| t.data()[row * k..(row + 1) * k].to_vec();
        DlmParams {
            logits: slice(inputs[0]),
            means: slice(inputs[1]),
            log_scales: slice(inputs[2]).into_iter().map(floored_log_scale).collect(),
        }
    }
}

impl CustomOp for DlmNll {
    fn name(&self) -> &'static str {
        "dlm_nll"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let b = inputs[0].shape()[0];
        assert_eq!(self.targets.len(), b, "dlm_nll: one target per row");
        let out = (0..b)
            .map(|r| -log_prob_bin(&self.row_params(inputs, r), self.grid, self.targets[r]))
            .collect();
        Tensor::from_vec(out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor) -> Vec<Tensor> {
        let shape = inputs[0].shape().to_vec();
        let (b, k) = (shape[0], shape[1]);
        let mut grads = [vec![0.0; b * k], vec![0.0; b * k], vec![0.0; b * k]];
        for r in 0..b {
            let params = self.row_params(inputs, r);
            let (_, [gl, gm, gs]) = log_prob_with_grad(&params, self.grid, self.targets[r]);
            let go = -grad_output.data()[r];
            for i in 0..k {
                grads[0][r * k + i] = go * gl[i];
                grads[1][r * k + i] = go * gm[i];
                let raw = inputs[2].data()[r * k + i];
                grads[2][r * k + i] = go * gs[i] * floored_log_scale_grad(raw);
            }
        }
        grads
            .into_iter()
            .map(|d| Tensor::new(&shape, d).expect("gradient matches input shape"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use spinterp_nn::gradcheck::{central_difference, relative_error, richardson_difference};
    use spinterp_nn::Graph;

    fn logistic_cdf(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Direct per-bin CDF differences, written independently of the
    /// log-space implementation.
    fn brute_force_pmf(params: &DlmParams, grid: QuantGrid) -> Vec<f64> {
        let w = params.weights();
        let q = grid.steps();
        let d = 1.0 / (q - 1) as f64;
        (0..q)
            .map(|bin| {
                let v = bin as f64 * d;
                (0..w.len())
                    .map(|i| {
                        let s = params.log_scales[i].exp();
                        let hi = if bin == q - 1 { 1.0 } else { logistic_cdf((v + d / 2.0 - params.means[i]) / s) };
                        let lo = if bin == 0 { 0.0 } else { logistic_cdf((v - d / 2.0 - params.means[i]) / s) };
                        w[i] * (hi - lo)
                    })
                    .sum()
            })
            .collect()
    }

    fn random_params(rng: &mut ChaCha8Rng, k: usize) -> DlmParams {
        DlmParams::from_raw(
            &(0..k).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<_>>(),
            &(0..k).map(|_| rng.random_range(-0.5..1.5)).collect::<Vec<_>>(),
            &(0..k).map(|_| rng.random_range(-7.0..0.5)).collect::<Vec<_>>(),
        )
        .unwrap()
    }

    #[test]
    fn concentrated_component() {
        let grid = QuantGrid::new(100).unwrap();
        for bin in [0, 1, 37, 98, 99] {
            let p = DlmParams::single(grid.value(bin), 1e-4);
            assert!(bin_prob(&p, grid, bin).unwrap() >= 1.0 - 1e-6);
            assert!(log_prob(&p, grid, grid.value(bin)).unwrap() >= -1e-6);
            assert_eq!(mode(&p, grid), grid.value(bin));
            let mut rng = ChaCha8Rng::seed_from_u64(bin as u64);
            assert!((0..200).all(|_| sample(&p, grid, &mut rng) == grid.value(bin)));
        }
    }

    #[test]
    fn interior_bin_matches_cdf_difference() {
        let grid = QuantGrid::new(8).unwrap();
        let p = DlmParams::single(0.5, 0.2);
        let v = 4.0 / 7.0;
        let expected = logistic_cdf((v + 1.0 / 14.0 - 0.5) / 0.2) - logistic_cdf((v - 1.0 / 14.0 - 0.5) / 0.2);
        assert!((bin_prob(&p, grid, 4).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn far_low_mean_lands_in_lowest_bin() {
        for q in [8, 15, 100] {
            let grid = QuantGrid::new(q).unwrap();
            for s in [1.0, 0.5, 0.1, 0.01] {
                assert!(bin_prob(&DlmParams::single(-5.0, s), grid, 0).unwrap() > 0.99);
            }
        }
    }

    #[test]
    fn far_high_mean_is_one_hot_at_top() {
        let grid = QuantGrid::new(15).unwrap();
        let p = pmf(&DlmParams::single(40.0, 0.05), grid);
        assert!((p[14] - 1.0).abs() < 1e-12);
        assert!(p[..14].iter().all(|&x| x < 1e-12));
    }

    #[test]
    fn bin_out_of_range_and_off_grid_value_are_errors() {
        let grid = QuantGrid::new(8).unwrap();
        let p = DlmParams::single(0.5, 0.1);
        assert!(bin_prob(&p, grid, 8).is_err());
        assert!(log_prob(&p, grid, 0.5).is_err());
    }

    #[test]
    fn exp_log_prob_equals_bin_prob() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let p = random_params(&mut rng, 3);
            let grid = QuantGrid::new(15).unwrap();
            let bin = rng.random_range(0..15);
            let bp = bin_prob(&p, grid, bin).unwrap();
            if bp > PROB_FLOOR {
                let lp = log_prob(&p, grid, grid.value(bin)).unwrap();
                assert!((lp.exp() - bp).abs() <= 1e-12 * bp);
            }
        }
    }

    #[test]
    fn degenerate_mixture_equals_single_component() {
        let grid = QuantGrid::new(100).unwrap();
        let one = DlmParams::new(vec![0.0], vec![0.3], vec![(0.07f64).ln()]).unwrap();
        // Minor components with lighter tails than the dominant one, so the
        // log-space gap stays below e^-20 * (1 + P_minor / P_major).
        let three = DlmParams::new(
            vec![20.0, 0.0, 0.0],
            vec![0.3, 0.3, 0.3],
            vec![(0.07f64).ln(), (0.05f64).ln(), (0.06f64).ln()],
        )
        .unwrap();
        for bin in 0..100 {
            let a = log_prob_bin(&one, grid, bin);
            let b = log_prob_bin(&three, grid, bin);
            assert!((a - b).abs() < 1e-8, "bin {bin}: {a} vs {b}");
        }
    }

    #[test]
    fn pmf_matches_brute_force_oracle() {
        let grid = QuantGrid::new(15).unwrap();
        let p = DlmParams::single(0.5, 0.15);
        for (a, b) in pmf(&p, grid).iter().zip(brute_force_pmf(&p, grid)) {
            assert!((a - b).abs() < 1e-14);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let p = random_params(&mut rng, 3);
            for (a, b) in pmf(&p, grid).iter().zip(brute_force_pmf(&p, grid)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_point_grid_splits_at_one_half() {
        let grid = QuantGrid::new(2).unwrap();
        let p = DlmParams::single(0.3, 0.1);
        let m = pmf(&p, grid);
        assert!((m[0] - logistic_cdf((0.5 - 0.3) / 0.1)).abs() < 1e-14);
        assert!((m[0] + m[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn mode_breaks_ties_low() {
        let grid = QuantGrid::new(8).unwrap();
        let p = DlmParams::new(
            vec![0.0, 0.0],
            vec![grid.value(2), grid.value(5)],
            vec![(0.01f64).ln(); 2],
        )
        .unwrap();
        let m = pmf(&p, grid);
        assert!((m[2] - m[5]).abs() < 1e-15);
        assert_eq!(mode(&p, grid), grid.value(2));

        let two = QuantGrid::new(2).unwrap();
        let p = DlmParams::single(0.5, 0.3);
        let m = pmf(&p, two);
        assert_eq!(m[0], m[1]);
        assert_eq!(mode_bin(&p, two), 0);
    }

    #[test]
    fn samples_converge_to_pmf() {
        let grid = QuantGrid::new(8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..5 {
            let p = random_params(&mut rng, 3);
            let mut hist = [0usize; 8];
            let n = 100_000;
            let mut srng = ChaCha8Rng::seed_from_u64(trial);
            for _ in 0..n {
                hist[grid.nearest_index(sample(&p, grid, &mut srng))] += 1;
            }
            let tv: f64 = pmf(&p, grid)
                .iter()
                .zip(hist)
                .map(|(q, h)| (q - h as f64 / n as f64).abs())
                .sum::<f64>()
                / 2.0;
            assert!(tv < 0.02, "trial {trial}: tv {tv}");
        }
        let p = random_params(&mut rng, 3);
        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| sample(&p, grid, &mut r)).collect::<Vec<_>>()
        };
        assert_eq!(draw(1), draw(1));
    }

    #[test]
    fn scale_floor_is_respected() {
        for raw in [-50.0, -10.0, -6.9, 0.0, 3.0] {
            assert!(floored_log_scale(raw) >= MIN_SCALE.ln());
        }
        assert!((floored_log_scale(2.0) - 2.0).abs() < 1e-3);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for q in [8usize, 15, 100] {
            let grid = QuantGrid::new(q).unwrap();
            for _ in 0..30 {
                let k = 3;
                let raw: Vec<f64> = (0..3 * k)
                    .map(|i| match i / k {
                        0 => rng.random_range(-2.0..2.0),
                        1 => rng.random_range(-0.2..1.2),
                        _ => rng.random_range(-4.0..-0.5),
                    })
                    .collect();
                let bin = rng.random_range(0..q);
                let f = |x: &[f64]| {
                    let p = DlmParams::from_raw(&x[..k], &x[k..2 * k], &x[2 * k..]).unwrap();
                    log_prob_bin(&p, grid, bin)
                };
                let p = DlmParams::from_raw(&raw[..k], &raw[k..2 * k], &raw[2 * k..]).unwrap();
                let (_, [gl, gm, gs]) = log_prob_with_grad(&p, grid, bin);
                let analytic: Vec<f64> = gl
                    .into_iter()
                    .chain(gm)
                    .chain(gs.iter().enumerate().map(|(i, g)| g * floored_log_scale_grad(raw[2 * k + i])))
                    .collect();
                let idx: Vec<usize> = (0..3 * k).collect();
                let numeric = richardson_difference(f, &raw, &idx, 1e-4);
                for i in 0..3 * k {
                    let err = relative_error(analytic[i], numeric[i]);
                    assert!(err < 1e-5, "Q={q} bin={bin} i={i}: {} vs {} ({err:e})", analytic[i], numeric[i]);
                }
            }
        }
    }

    #[test]
    fn custom_op_backpropagates_through_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = QuantGrid::new(15).unwrap();
        let (b, k) = (4, 3);
        let mk = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
            Tensor::new(&[b, k], (0..b * k).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
        };
        let inputs = [mk(&mut rng, -1.0, 1.0), mk(&mut rng, 0.0, 1.0), mk(&mut rng, -3.0, -1.0)];
        let targets = vec![0, 7, 14, 3];
        let run = |inputs: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let nll = g.custom(
                &vars,
                Box::new(DlmNll {
                    grid,
                    targets: targets.clone(),
                }),
            );
            let loss = g.sum(nll);
            (g, vars, loss)
        };
        let (g, vars, loss) = run(&inputs);
        let grads = g.backward_all(loss).unwrap();
        for which in 0..3 {
            let analytic = grads.get(vars[which]).unwrap().clone();
            let numeric = central_difference(
                |x| {
                    let mut ins = inputs.to_vec();
                    ins[which] = Tensor::new(&[b, k], x.to_vec()).unwrap();
                    let (g, _, l) = run(&ins);
                    g.value(l).item()
                },
                inputs[which].data(),
                &(0..b * k).collect::<Vec<_>>(),
                1e-6,
            );
            for (a, n) in analytic.data().iter().zip(numeric) {
                assert!(relative_error(*a, n) < 1e-5);
            }
        }
    }

    proptest! {
        #[test]
        fn pmf_sums_to_one(seed in any::<u64>(), k in 1usize..=4, qi in 0usize..3) {
            let q = [8, 15, 100][qi];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_params(&mut rng, k);
            let s: f64 = pmf(&p, QuantGrid::new(q).unwrap()).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }

        #[test]
        fn mode_is_an_argmax(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_params(&mut rng, 3);
            let grid = QuantGrid::new(15).unwrap();
            let m = pmf(&p, grid);
            let b = mode_bin(&p, grid);
            prop_assert!(m.iter().all(|&x| m[b] * (1.0 + MODE_TIE_TOL) >= x));
        }

        #[test]
        fn single_component_mode_is_monotone_in_mean(mu in -0.5f64..1.5, delta in 0.0f64..0.5, s in 0.002f64..0.5) {
            let grid = QuantGrid::new(15).unwrap();
            let lo = mode_bin(&DlmParams::single(mu, s), grid);
            let hi = mode_bin(&DlmParams::single(mu + delta, s), grid);
            prop_assert!(hi >= lo);
        }
    }
}
