use super::tensor::{Parameterized, Scalar};
use crate::error::{Error, Result};

/// Plain SGD: `p <- p - lr * grad` for every trainable tensor, then zeroes
/// the gradients. Fails without touching anything if any gradient is absent.
pub fn sgd_step<T: Scalar, M: Parameterized<T> + ?Sized>(params: &mut M, lr: f64) -> Result<()> {
    let mut missing = None;
    params.visit("", &mut |name, t| {
        if t.requires_grad && t.grad.is_none() && missing.is_none() {
            missing = Some(name.to_string());
        }
    });
    if let Some(name) = missing {
        return Err(Error::MissingGrad(name));
    }
    let lr = T::of(lr);
    params.visit("", &mut |_, t| {
        if !t.requires_grad {
            return;
        }
        if let Some(g) = t.grad.as_mut() {
            for (p, gv) in t.data.iter_mut().zip(g.iter_mut()) {
                *p -= lr * *gv;
                *gv = T::zero();
            }
        }
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    struct One(Tensor<f64>);

    impl Parameterized<f64> for One {
        fn visit(&mut self, _prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<f64>)) {
            f("p", &mut self.0);
        }
    }

    #[test]
    fn update_rule() {
        let mut p = One(Tensor::from_vec(&[1], vec![1.0]).unwrap().trainable());
        assert!(matches!(sgd_step(&mut p, 0.1), Err(Error::MissingGrad(_))));
        p.0.grad = Some(vec![0.5]);
        sgd_step(&mut p, 0.1).unwrap();
        assert!((p.0.data[0] - 0.95).abs() < 1e-15);
        assert_eq!(p.0.grad.as_deref(), Some(&[0.0][..]));
        // zero grad leaves the parameter alone
        sgd_step(&mut p, 0.1).unwrap();
        assert!((p.0.data[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn two_steps_constant_grad() {
        let mut p = One(Tensor::from_vec(&[1], vec![1.0]).unwrap().trainable());
        for _ in 0..2 {
            p.0.grad = Some(vec![0.3]);
            sgd_step(&mut p, 0.1).unwrap();
        }
        assert!((p.0.data[0] - (1.0 - 2.0 * 0.1 * 0.3)).abs() < 1e-15);
    }

    #[test]
    fn decreases_convex_quadratic() {
        // f(p) = 0.5 * c * p^2 with curvature c = 4; stable for lr < 2/c
        let mut p = One(Tensor::from_vec(&[1], vec![3.0]).unwrap().trainable());
        let f = |v: f64| 2.0 * v * v;
        let mut prev = f(p.0.data[0]);
        for _ in 0..20 {
            p.0.grad = Some(vec![4.0 * p.0.data[0]]);
            sgd_step(&mut p, 0.1).unwrap();
            let now = f(p.0.data[0]);
            assert!(now < prev);
            prev = now;
        }
    }
}
