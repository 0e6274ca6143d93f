//! Landmark coordinates to per-landmark heatmaps and back.

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::tensor::graph::{expected_coords, softmax_into};
use crate::tensor::Tensor;

/// `K x H x W` maps, channel `k` for landmark `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl HeatmapStack {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::BadSize(format!("{channels}x{height}x{width}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::BadSize(format!(
                "{channels}x{height}x{width} stack needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("heatmap"));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// From a `1 x K x H x W` (or `K x H x W`) tensor.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        match *t.shape() {
            [1, k, h, w] | [k, h, w] => Self::new(k, h, w, t.data().to_vec()),
            _ => Err(Error::BadSize(format!("cannot view {:?} as a heatmap stack", t.shape()))),
        }
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[1, self.channels, self.height, self.width], self.data.clone())
            .expect("stack shape")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channel(&self, k: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[k * plane..(k + 1) * plane]
    }

    fn channel_f64(&self, k: usize) -> Vec<f64> {
        self.channel(k).iter().map(|&v| v as f64).collect()
    }
}

/// Gaussian targets `exp(-d^2 / (2 sigma^2))`, peak 1 at each landmark.
///
/// Landmarks up to `2 sigma` outside the frame are clamped onto its border;
/// anything further out is rejected.
pub fn encode_gaussian(landmarks: &[Point2], sigma: f64, size: (usize, usize)) -> Result<HeatmapStack> {
    let (h, w) = size;
    if h == 0 || w == 0 || landmarks.is_empty() {
        return Err(Error::BadSize(format!(
            "{} landmarks on a {h}x{w} frame",
            landmarks.len()
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")));
    }
    let (max_x, max_y) = ((w - 1) as f64, (h - 1) as f64);
    let mut data = Vec::with_capacity(landmarks.len() * h * w);
    for (k, &p) in landmarks.iter().enumerate() {
        if !p.is_finite() {
            return Err(Error::NonFinite("landmark"));
        }
        let slack = 2.0 * sigma;
        if p.x < -slack || p.y < -slack || p.x > max_x + slack || p.y > max_y + slack {
            return Err(Error::InvalidParameter(format!(
                "landmark {k} at ({:.2}, {:.2}) lies more than 2 sigma outside the {h}x{w} frame",
                p.x, p.y
            )));
        }
        let c = Point2::new(p.x.clamp(0.0, max_x), p.y.clamp(0.0, max_y));
        if c != p {
            log::warn!("landmark {k} clamped from ({:.2}, {:.2}) into the frame", p.x, p.y);
        }
        let inv = 1.0 / (2.0 * sigma * sigma);
        for y in 0..h {
            let dy2 = (y as f64 - c.y).powi(2);
            for x in 0..w {
                let d2 = (x as f64 - c.x).powi(2) + dy2;
                data.push((-d2 * inv).exp() as f32);
            }
        }
    }
    HeatmapStack::new(landmarks.len(), h, w, data)
}

/// Expected grid position under `softmax(beta * h)`, per channel.
pub fn decode_soft_argmax(stack: &HeatmapStack, beta: f64) -> Result<Vec<Point2>> {
    if !(beta > 0.0) {
        return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
    }
    let mut probs = vec![0.0f64; stack.height * stack.width];
    Ok((0..stack.channels)
        .map(|k| {
            softmax_into(&stack.channel_f64(k), beta, &mut probs);
            let (x, y) = expected_coords(&probs, stack.width);
            Point2::new(x, y)
        })
        .collect())
}

/// Largest `softmax(beta * h)` probability per channel.
pub fn peak_probabilities(stack: &HeatmapStack, beta: f64) -> Vec<f64> {
    let mut probs = vec![0.0f64; stack.height * stack.width];
    (0..stack.channels)
        .map(|k| {
            softmax_into(&stack.channel_f64(k), beta, &mut probs);
            probs.iter().copied().fold(0.0, f64::max)
        })
        .collect()
}

/// Integer argmax refined by a 1-D parabola through the neighbours in x and
/// in y. Ties go to the smallest linear index.
pub fn decode_argmax_subpixel(stack: &HeatmapStack) -> Vec<Point2> {
    let (w, h) = (stack.width, stack.height);
    (0..stack.channels)
        .map(|k| {
            let c = stack.channel(k);
            let mut best = 0;
            for (i, &v) in c.iter().enumerate() {
                if v > c[best] {
                    best = i;
                }
            }
            let (bx, by) = (best % w, best / w);
            let at = |x: usize, y: usize| c[y * w + x] as f64;
            let dx = if bx > 0 && bx + 1 < w {
                parabola_offset(at(bx - 1, by), at(bx, by), at(bx + 1, by))
            } else {
                0.0
            };
            let dy = if by > 0 && by + 1 < h {
                parabola_offset(at(bx, by - 1), at(bx, by), at(bx, by + 1))
            } else {
                0.0
            };
            Point2::new(bx as f64 + dx, by as f64 + dy)
        })
        .collect()
}

/// Vertex offset of the parabola through `(-1, l)`, `(0, c)`, `(1, r)`.
fn parabola_offset(l: f64, c: f64, r: f64) -> f64 {
    let curvature = l - 2.0 * c + r;
    if curvature < 0.0 {
        (0.5 * (l - r) / curvature).clamp(-0.5, 0.5)
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_values() {
        let s = encode_gaussian(&[Point2::new(4.0, 3.0)], 1.0, (8, 10)).unwrap();
        assert_eq!(s.channel(0)[3 * 10 + 4], 1.0);
        // one sigma away: exp(-1/2)
        assert!((s.channel(0)[3 * 10 + 5] as f64 - (-0.5f64).exp()).abs() < 1e-7);
        assert!((0.606_530_66 - (-0.5f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn channels_are_independent() {
        let a = encode_gaussian(&[Point2::new(2.0, 2.0), Point2::new(12.0, 9.0)], 1.5, (12, 16)).unwrap();
        let b = encode_gaussian(&[Point2::new(2.0, 2.0), Point2::new(5.0, 3.0)], 1.5, (12, 16)).unwrap();
        assert_eq!(a.channel(0), b.channel(0));
    }

    #[test]
    fn encode_rejects_bad_input() {
        assert!(matches!(encode_gaussian(&[Point2::new(1.0, 1.0)], 1.0, (0, 4)), Err(Error::BadSize(_))));
        assert!(encode_gaussian(&[Point2::new(1.0, 1.0)], 0.0, (4, 4)).is_err());
        assert!(encode_gaussian(&[Point2::new(-3.0, 1.0)], 1.0, (4, 4)).is_err());
        // within 2 sigma: clamped onto the border
        let s = encode_gaussian(&[Point2::new(-1.5, 1.0)], 1.0, (4, 4)).unwrap();
        assert_eq!(decode_argmax_subpixel(&s)[0].x, 0.0);
    }

    #[test]
    fn soft_argmax_examples() {
        let mut one_hot = vec![0.0f32; 6 * 7];
        one_hot[4 * 7 + 5] = 1.0;
        let s = HeatmapStack::new(1, 6, 7, one_hot).unwrap();
        let p = decode_soft_argmax(&s, 100.0).unwrap()[0];
        assert!((p.x - 5.0).abs() < 1e-9 && (p.y - 4.0).abs() < 1e-9);

        let u = HeatmapStack::new(1, 6, 7, vec![0.2; 42]).unwrap();
        let p = decode_soft_argmax(&u, 1.0).unwrap()[0];
        assert!((p.x - 3.0).abs() < 1e-12 && (p.y - 2.5).abs() < 1e-12);
        assert!(decode_soft_argmax(&u, 0.0).is_err());
    }

    #[test]
    fn soft_argmax_recovers_encoded_gaussian() {
        let target = Point2::new(10.5, 7.25);
        let s = encode_gaussian(&[target], 2.0, (16, 22)).unwrap();
        let p = decode_soft_argmax(&s, 10.0).unwrap()[0];
        assert!(p.distance(target) < 0.05, "decoded {p:?}");
    }

    #[test]
    fn argmax_examples() {
        let mut one_hot = vec![0.0f32; 5 * 5];
        one_hot[3 * 5 + 1] = 1.0;
        let s = HeatmapStack::new(1, 5, 5, one_hot).unwrap();
        assert_eq!(decode_argmax_subpixel(&s)[0], Point2::new(1.0, 3.0));

        let flat = HeatmapStack::new(1, 5, 5, vec![0.7; 25]).unwrap();
        assert_eq!(decode_argmax_subpixel(&flat)[0], Point2::new(0.0, 0.0));

        // parabolic bump with its vertex at (2.3, 1.8)
        let (x0, y0) = (2.3, 1.8);
        let bump: Vec<f32> = (0..25)
            .map(|i| {
                let (x, y) = ((i % 5) as f64, (i / 5) as f64);
                (4.0 - (x - x0).powi(2) - (y - y0).powi(2)) as f32
            })
            .collect();
        let s = HeatmapStack::new(1, 5, 5, bump).unwrap();
        let p = decode_argmax_subpixel(&s)[0];
        assert!((p.x - x0).abs() < 0.05 && (p.y - y0).abs() < 0.05, "{p:?}");
    }
}
