use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Reflection index without repeating the edge sample: `-1 -> 1`, `len -> len - 2`.
#[inline]
pub(crate) fn reflect(i: isize, len: usize) -> usize {
    let len = len as isize;
    let r = if i < 0 {
        -i
    } else if i >= len {
        2 * (len - 1) - i
    } else {
        i
    };
    r as usize
}

fn check_width(op: &'static str, s: Shape, width: usize) -> Result<()> {
    if width > 0 && (width >= s.h || width >= s.w) {
        return Err(Error::invalid(
            op,
            format!("mirror width {width} must be smaller than {}x{}", s.h, s.w),
        ));
    }
    Ok(())
}

/// Reflect-padding of every plane by `width` pixels on each side.
pub fn mirror_pad(input: &Tensor, width: usize) -> Result<Tensor> {
    let s = input.shape();
    check_width("mirror_pad", s, width)?;
    if width == 0 {
        return Ok(input.clone());
    }
    let (hp, wp) = (s.h + 2 * width, s.w + 2 * width);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, hp, wp));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..hp {
                let sy = reflect(y as isize - width as isize, s.h);
                for x in 0..wp {
                    let sx = reflect(x as isize - width as isize, s.w);
                    dst[y * wp + x] = src[sy * s.w + sx];
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`mirror_pad`]: folds border gradients back onto their source pixels.
pub fn mirror_pad_backward(grad_padded: &Tensor, width: usize) -> Result<Tensor> {
    let p = grad_padded.shape();
    if p.h < 2 * width + 1 || p.w < 2 * width + 1 {
        return Err(Error::invalid(
            "mirror_pad_backward",
            format!("padded map {p} too small for width {width}"),
        ));
    }
    let s = Shape::new(p.n, p.c, p.h - 2 * width, p.w - 2 * width);
    check_width("mirror_pad_backward", s, width)?;
    if width == 0 {
        return Ok(grad_padded.clone());
    }
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = grad_padded.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..p.h {
                let sy = reflect(y as isize - width as isize, s.h);
                for x in 0..p.w {
                    let sx = reflect(x as isize - width as isize, s.w);
                    dst[sy * s.w + sx] += src[y * p.w + x];
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_reflects_without_edge_duplication() {
        let t = Tensor::from_vec(
            Shape::new(1, 1, 3, 3),
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let p = mirror_pad(&t, 1).unwrap();
        assert_eq!(p.shape(), Shape::new(1, 1, 5, 5));
        // middle row [4,5,6] -> [5,4,5,6,5]
        assert_eq!(&p.plane(0, 0)[10..15], &[5.0, 4.0, 5.0, 6.0, 5.0]);
    }

    #[test]
    fn zero_width_is_identity() {
        let t = Tensor::from_fn(Shape::new(1, 2, 3, 4), |_, c, y, x| (c + y * x) as f64);
        assert_eq!(mirror_pad(&t, 0).unwrap(), t);
    }

    #[test]
    fn constant_map_stays_constant() {
        let t = Tensor::full(Shape::new(1, 1, 4, 4), 2.5);
        assert!(mirror_pad(&t, 2).unwrap().data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn too_wide_is_rejected() {
        let t = Tensor::zeros(Shape::new(1, 1, 3, 5));
        assert!(mirror_pad(&t, 3).is_err());
    }

    #[test]
    fn backward_is_adjoint() {
        let x = Tensor::from_fn(Shape::new(1, 2, 5, 4), |_, c, y, x| {
            ((c * 7 + y * 3 + x) % 5) as f64 - 2.0
        });
        let g = Tensor::from_fn(Shape::new(1, 2, 9, 8), |_, c, y, x| {
            ((c + y * 5 + x * 3) % 7) as f64 * 0.5
        });
        let lhs = mirror_pad(&x, 2).unwrap().dot(&g);
        let rhs = x.dot(&mirror_pad_backward(&g, 2).unwrap());
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
