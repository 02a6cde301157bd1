use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Argmax positions recorded by [`maxpool2x2`], one flat input index per output element.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolIndex {
    input_shape: Shape,
    argmax: Vec<usize>,
}

impl PoolIndex {
    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

fn halved(op: &'static str, s: Shape) -> Result<Shape> {
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(Error::invalid(
            op,
            format!("spatial size {}x{} must be even", s.h, s.w),
        ));
    }
    Ok(Shape::new(s.n, s.c, s.h / 2, s.w / 2))
}

/// 2x2 max pooling with stride 2. Ties resolve to the first window element in row-major order.
pub fn maxpool2x2(input: &Tensor) -> Result<(Tensor, PoolIndex)> {
    let s = input.shape();
    let os = halved("maxpool2x2", s)?;
    let mut out = Tensor::zeros(os);
    let mut argmax = Vec::with_capacity(os.len());
    let data = input.data();
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.plane();
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut best = base + 2 * oy * s.w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * s.w + 2 * ox + dx;
                        if data[i] > data[best] {
                            best = i;
                        }
                    }
                    argmax.push(best);
                }
            }
        }
    }
    for (o, &i) in out.data_mut().iter_mut().zip(&argmax) {
        *o = data[i];
    }
    Ok((
        out,
        PoolIndex {
            input_shape: s,
            argmax,
        },
    ))
}

pub fn maxpool2x2_backward(index: &PoolIndex, grad_out: &Tensor) -> Result<Tensor> {
    let os = halved("maxpool2x2_backward", index.input_shape)?;
    grad_out.ensure_shape("maxpool2x2_backward", os)?;
    let mut grad = Tensor::zeros(index.input_shape);
    let g = grad.data_mut();
    for (&i, &v) in index.argmax.iter().zip(grad_out.data()) {
        g[i] += v;
    }
    Ok(grad)
}

/// 2x2 average pooling with stride 2.
pub fn avgpool2x2(input: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    let os = halved("avgpool2x2", s)?;
    Ok(Tensor::from_fn(os, |n, c, y, x| {
        0.25 * (input.at(n, c, 2 * y, 2 * x)
            + input.at(n, c, 2 * y, 2 * x + 1)
            + input.at(n, c, 2 * y + 1, 2 * x)
            + input.at(n, c, 2 * y + 1, 2 * x + 1))
    }))
}

pub fn avgpool2x2_backward(input_shape: Shape, grad_out: &Tensor) -> Result<Tensor> {
    let os = halved("avgpool2x2_backward", input_shape)?;
    grad_out.ensure_shape("avgpool2x2_backward", os)?;
    Ok(Tensor::from_fn(input_shape, |n, c, y, x| {
        0.25 * grad_out.at(n, c, y / 2, x / 2)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn picks_window_max_and_routes_gradient() {
        let t = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (out, idx) = maxpool2x2(&t).unwrap();
        assert_eq!(out.data(), &[4.0]);
        let g = maxpool2x2_backward(&idx, &Tensor::full(out.shape(), 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn ties_break_to_top_left() {
        let t = Tensor::full(Shape::new(1, 1, 4, 4), 7.0);
        let (out, idx) = maxpool2x2(&t).unwrap();
        assert!(out.data().iter().all(|&v| v == 7.0));
        assert_eq!(idx.argmax(), &[0, 2, 8, 10]);
    }

    #[test]
    fn odd_size_rejected() {
        assert!(maxpool2x2(&Tensor::zeros(Shape::new(1, 1, 3, 4))).is_err());
        assert!(avgpool2x2(&Tensor::zeros(Shape::new(1, 1, 4, 5))).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let x = Tensor::randn(Shape::new(1, 1, 6, 6), 1.0, &mut rng);
            let g = Tensor::randn(Shape::new(1, 1, 3, 3), 1.0, &mut rng);
            let (_, idx) = maxpool2x2(&x).unwrap();
            let analytic = maxpool2x2_backward(&idx, &g).unwrap();
            let numeric = central_difference(x.data(), 1e-5, |v| {
                let t = Tensor::from_vec(x.shape(), v.to_vec()).unwrap();
                maxpool2x2(&t).unwrap().0.dot(&g)
            });
            assert!(relative_error(analytic.data(), &numeric) < 1e-4);

            let analytic = avgpool2x2_backward(x.shape(), &g).unwrap();
            let numeric = central_difference(x.data(), 1e-5, |v| {
                let t = Tensor::from_vec(x.shape(), v.to_vec()).unwrap();
                avgpool2x2(&t).unwrap().dot(&g)
            });
            assert!(relative_error(analytic.data(), &numeric) < 1e-4);
        }
    }
}
