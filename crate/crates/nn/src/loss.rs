use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Summed unit-variance Gaussian negative log-likelihood, without the
/// `0.5 * ln(2 pi)` constant: `sum 0.5 * (prediction - target)^2`.
pub fn gaussian_nll(g: &mut Graph, prediction: Var, target: &Tensor) -> Result<Var> {
    if g.shape(prediction) != target.shape() {
        return Err(NnError::Shape(format!(
            "gaussian_nll: prediction {:?} vs target {:?}",
            g.shape(prediction),
            target.shape()
        )));
    }
    let t = g.constant(target.clone());
    let diff = g.sub(prediction, t);
    let sq = g.mul(diff, diff);
    let s = g.sum(sq);
    Ok(g.scale(s, 0.5))
}

/// Summed `-log softmax(logits)[class]` over the rows of `logits[rows, C]`.
pub fn softmax_cross_entropy(g: &mut Graph, logits: Var, classes: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let c = *shape.last().unwrap_or(&0);
    let rows = shape.iter().product::<usize>() / c.max(1);
    if rows != classes.len() {
        return Err(NnError::Shape(format!(
            "softmax_cross_entropy: {} targets for logits {shape:?}",
            classes.len()
        )));
    }
    if let Some(&bad) = classes.iter().find(|&&k| k >= c) {
        return Err(NnError::IndexOutOfRange {
            what: "class",
            index: bad,
            size: c,
        });
    }
    let per_row = g.cross_entropy(logits, classes);
    Ok(g.sum(per_row))
}

/// `KL(N(mu, exp(logvar)) || N(0, I))` summed over all entries:
/// `0.5 * sum(mu^2 + exp(logvar) - 1 - logvar)`.
pub fn kl_standard_normal(g: &mut Graph, mu: Var, logvar: Var) -> Var {
    let mu2 = g.mul(mu, mu);
    let var = g.exp(logvar);
    let a = g.add(mu2, var);
    let a = g.sub(a, logvar);
    let a = g.add_scalar(a, -1.0);
    let s = g.sum(a);
    g.scale(s, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_nll_examples() {
        let mut g = Graph::new();
        let target = Tensor::from_vec(vec![1.0, -2.0, 0.5]);
        let p = g.constant(target.clone());
        let l = gaussian_nll(&mut g, p, &target).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let mut g = Graph::new();
        let target = Tensor::from_vec(vec![3.0]);
        let p = g.constant(Tensor::from_vec(vec![5.0]));
        let l = gaussian_nll(&mut g, p, &target).unwrap();
        assert_eq!(g.value(l).item(), 2.0);
        let grads = g.backward_all(l).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[2.0]);
    }

    #[test]
    fn gaussian_nll_rejects_shape_mismatch() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::zeros(&[2, 2]));
        assert!(gaussian_nll(&mut g, p, &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        for c in [2usize, 8, 15] {
            let mut g = Graph::new();
            let logits = g.constant(Tensor::zeros(&[1, c]));
            let l = softmax_cross_entropy(&mut g, logits, &[c - 1]).unwrap();
            assert!((g.value(l).item() - (c as f64).ln()).abs() < 1e-12);
        }

        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(&[1, 3], vec![10.0, 0.0, 0.0]).unwrap());
        let l = softmax_cross_entropy(&mut g, logits, &[0]).unwrap();
        let expected = -(10f64.exp() / (10f64.exp() + 2.0)).ln();
        assert!((g.value(l).item() - expected).abs() < 1e-15);
        assert!((g.value(l).item() - 9.0797e-5).abs() < 1e-8);

        let grads = g.backward_all(l).unwrap();
        let gl = grads.get(logits).unwrap().data();
        let z = 10f64.exp() + 2.0;
        let sm = [10f64.exp() / z, 1.0 / z, 1.0 / z];
        assert!((gl[0] - (sm[0] - 1.0)).abs() < 1e-15);
        assert!((gl[1] - sm[1]).abs() < 1e-15);
        assert!((gl[2] - sm[2]).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_bad_class() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(
            softmax_cross_entropy(&mut g, logits, &[4]),
            Err(NnError::IndexOutOfRange { .. })
        ));
    }
}
