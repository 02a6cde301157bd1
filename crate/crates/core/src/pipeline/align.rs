//! Eye-based geometric normalization. Coordinates are continuous with pixel
//! `(row, col)` centered at `(x, y) = (col, row)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

/// Left and right eye centers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eyes {
    pub left: Point,
    pub right: Point,
}

impl Eyes {
    pub const fn new(lx: f64, ly: f64, rx: f64, ry: f64) -> Self {
        Eyes {
            left: Point::new(lx, ly),
            right: Point::new(rx, ry),
        }
    }

    /// Orders the pair so that `left` has the smaller x.
    pub fn ordered(self) -> Self {
        if self.left.x > self.right.x {
            Eyes {
                left: self.right,
                right: self.left,
            }
        } else {
            self
        }
    }
}

/// `q = M p + b`, mapping source coordinates to canvas coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub m: [[f64; 2]; 2],
    pub b: [f64; 2],
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        m: [[1.0, 0.0], [0.0, 1.0]],
        b: [0.0, 0.0],
    };

    /// Rotation, uniform scale and translation taking `src` eyes onto `dst` eyes.
    pub fn similarity(src: Eyes, dst: Eyes) -> Result<Self> {
        let (src, dst) = (src.ordered(), dst.ordered());
        let (sx, sy) = (src.right.x - src.left.x, src.right.y - src.left.y);
        let (dx, dy) = (dst.right.x - dst.left.x, dst.right.y - dst.left.y);
        let den = sx * sx + sy * sy;
        if den == 0.0 || !den.is_finite() {
            return Err(Error::invalid("align", "eye points coincide"));
        }
        if dx * dx + dy * dy == 0.0 {
            return Err(Error::invalid("align", "canonical eye points coincide"));
        }
        // Complex ratio a = d / s, so q = a (p - L) + L'.
        let ar = (dx * sx + dy * sy) / den;
        let ai = (dy * sx - dx * sy) / den;
        let m = [[ar, -ai], [ai, ar]];
        let b = [
            dst.left.x - (ar * src.left.x - ai * src.left.y),
            dst.left.y - (ai * src.left.x + ar * src.left.y),
        ];
        Ok(Affine { m, b })
    }

    /// Axis-aligned stretch of a `src_h x src_w` frame onto `dst_h x dst_w`, corners to corners.
    pub fn stretch(src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> Self {
        let f = |d: usize, s: usize| {
            if s > 1 {
                (d.max(1) - 1) as f64 / (s - 1) as f64
            } else {
                1.0
            }
        };
        Affine {
            m: [[f(dst_w, src_w), 0.0], [0.0, f(dst_h, src_h)]],
            b: [0.0, 0.0],
        }
    }

    pub fn apply(&self, p: Point) -> Point {
        Point::new(
            self.m[0][0] * p.x + self.m[0][1] * p.y + self.b[0],
            self.m[1][0] * p.x + self.m[1][1] * p.y + self.b[1],
        )
    }

    pub fn inverse(&self) -> Result<Self> {
        let [[a, b], [c, d]] = self.m;
        let det = a * d - b * c;
        if det == 0.0 || !det.is_finite() {
            return Err(Error::invalid("align", "singular transform"));
        }
        let m = [[d / det, -b / det], [-c / det, a / det]];
        let t = [
            -(m[0][0] * self.b[0] + m[0][1] * self.b[1]),
            -(m[1][0] * self.b[0] + m[1][1] * self.b[1]),
        ];
        Ok(Affine { m, b: t })
    }

    pub fn is_identity(&self) -> bool {
        *self == Affine::IDENTITY
    }
}

/// Bilinear sample of a plane with edge replication.
fn sample(plane: &[f64], h: usize, w: usize, p: Point) -> f64 {
    let x = p.x.clamp(0.0, (w - 1) as f64);
    let y = p.y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |yy: usize, xx: usize| plane[yy * w + xx];
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resamples `src` onto an `out_h x out_w` grid where output pixel `q`
/// takes the source value at `to_src(q)`. Identity maps of equal-sized
/// frames are copied without resampling.
pub fn warp(src: &Tensor, to_src: &Affine, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = src.shape();
    if s.n != 1 || s.c != 1 || s.h == 0 || s.w == 0 {
        return Err(Error::shape("warp", "1x1xHxW image", s));
    }
    if to_src.is_identity() && (s.h, s.w) == (out_h, out_w) {
        return Ok(src.clone());
    }
    let plane = src.plane(0, 0);
    Ok(Tensor::from_fn(
        Shape::new(1, 1, out_h, out_w),
        |_, _, y, x| {
            sample(
                plane,
                s.h,
                s.w,
                to_src.apply(Point::new(x as f64, y as f64)),
            )
        },
    ))
}

/// Canvas geometry: side length and canonical eye positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Canvas {
    pub size: usize,
    pub eyes: Eyes,
}

/// A source-to-canvas mapping for one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub forward: Affine,
    pub source_h: usize,
    pub source_w: usize,
    pub canvas: usize,
}

impl Alignment {
    /// Similarity alignment by eyes, or a plain stretch when no eyes are given.
    pub fn new(
        source_h: usize,
        source_w: usize,
        eyes: Option<Eyes>,
        canvas: &Canvas,
    ) -> Result<Self> {
        let forward = match eyes {
            Some(e) => {
                for p in [e.left, e.right] {
                    let inside = p.x >= 0.0
                        && p.y >= 0.0
                        && p.x <= (source_w.max(1) - 1) as f64
                        && p.y <= (source_h.max(1) - 1) as f64;
                    if !inside {
                        return Err(Error::invalid(
                            "align",
                            format!(
                                "eye ({}, {}) outside the {source_w}x{source_h} image",
                                p.x, p.y
                            ),
                        ));
                    }
                }
                Affine::similarity(e, canvas.eyes)?
            }
            None => Affine::stretch(source_h, source_w, canvas.size, canvas.size),
        };
        Ok(Alignment {
            forward,
            source_h,
            source_w,
            canvas: canvas.size,
        })
    }

    /// Source image to canvas.
    pub fn align(&self, src: &Tensor) -> Result<Tensor> {
        let s = src.shape();
        if (s.h, s.w) != (self.source_h, self.source_w) {
            return Err(Error::shape(
                "align",
                format!("{}x{} source", self.source_h, self.source_w),
                s,
            ));
        }
        warp(src, &self.forward.inverse()?, self.canvas, self.canvas)
    }

    /// Canvas image back to the source frame.
    pub fn restore(&self, canvas_img: &Tensor) -> Result<Tensor> {
        warp(canvas_img, &self.forward, self.source_h, self.source_w)
    }
}
