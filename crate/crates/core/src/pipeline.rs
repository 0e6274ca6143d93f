//! Two-stage localization: a global model finds the reference pair on a
//! downscaled view of the whole image, a similarity frame is built from it,
//! and a local model places every landmark inside that frame.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{frame_from_point_pair, Point2, SimilarityTransform};
use crate::heatmap::{decode_soft_argmax, peak_probabilities, HeatmapStack};
use crate::hourglass::{train, train_with, HourglassModel, TrainReport, TrainSample};
use crate::image::GrayImage;
use crate::landmarks::{LandmarkSet, Roles, Schema, Side};

/// Fraction of the frame width spanned by the reference pair.
pub const DEFAULT_SPAN: f64 = 0.4;

/// Landmarks whose confidence falls below this are flagged: a peak less than
/// four times the flat level.
pub const LOW_CONFIDENCE_THRESHOLD: f64 = 0.75;

/// Output raster of a frame and the fixed frame positions of the reference
/// pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceFrameSpec {
    pub height: usize,
    pub width: usize,
    pub q0: Point2,
    pub q1: Point2,
}

impl ReferenceFrameSpec {
    /// Pair centered and horizontal, `span * width` apart.
    pub fn centered(height: usize, width: usize, span: f64) -> Result<Self> {
        let c = Point2::new((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let half = Point2::new(0.5 * span * width as f64, 0.0);
        let spec = Self {
            height,
            width,
            q0: c - half,
            q1: c + half,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn local_default() -> Self {
        Self::centered(96, 96, DEFAULT_SPAN).expect("default frame is valid")
    }

    /// Both points at least a tenth of the frame inside its border.
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::BadSize(format!("frame {}x{}", self.height, self.width)));
        }
        if !(self.q0.is_finite() && self.q1.is_finite()) || self.q0.distance(self.q1) < 1e-9 {
            return Err(Error::DegeneratePair);
        }
        let (mx, my) = (0.1 * self.width as f64, 0.1 * self.height as f64);
        for q in [self.q0, self.q1] {
            if q.x < mx || q.y < my || q.x > self.width as f64 - 1.0 - mx || q.y > self.height as f64 - 1.0 - my {
                return Err(Error::InvalidParameter(format!(
                    "reference point ({:.1}, {:.1}) too close to the {}x{} frame border",
                    q.x, q.y, self.height, self.width
                )));
            }
        }
        Ok(())
    }

    /// Frame-to-image transform putting the frame pair onto `p0`, `p1`.
    pub fn transform(&self, p0: Point2, p1: Point2) -> Result<SimilarityTransform> {
        frame_from_point_pair(p0, p1, self.q0, self.q1)
    }
}

/// Bilinear samples of `image` at `t(u)` for every frame pixel `u`; zero
/// outside the source.
pub fn resample_into_frame(image: &GrayImage, t: &SimilarityTransform, (height, width): (usize, usize)) -> GrayImage {
    let mut out = GrayImage::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let p = t.apply(Point2::new(x as f64, y as f64));
            out.set(x, y, image.sample_bilinear(p));
        }
    }
    out
}

/// Frame-to-image transform showing the whole image in a `height x width`
/// frame: uniform scale, centered, padded with zeros.
pub fn global_transform(image_width: usize, image_height: usize, (height, width): (usize, usize)) -> SimilarityTransform {
    let s = (image_width as f64 / width as f64).max(image_height as f64 / height as f64);
    let ci = Point2::new((image_width as f64 - 1.0) / 2.0, (image_height as f64 - 1.0) / 2.0);
    let cf = Point2::new((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    SimilarityTransform::new(s, 0.0, ci - s * cf).expect("positive scale")
}

/// Whole-image view for the global stage, low-passed before shrinking.
pub fn global_view(image: &GrayImage, size: (usize, usize)) -> (GrayImage, SimilarityTransform) {
    let t = global_transform(image.width(), image.height(), size);
    let s = t.scale();
    let src = if s > 1.0 {
        image.gaussian_blur(0.5 * (s * s - 1.0).sqrt())
    } else {
        image.clone()
    };
    (resample_into_frame(&src, &t, size), t)
}

/// Landmark estimates in frame pixels with a confidence in `[0, 1]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub points: Vec<Point2>,
    pub confidence: Vec<f64>,
}

/// A landmark detector over a frame; `to_image` maps frame pixels into the
/// source image, for detectors that need to know where the frame lies.
pub trait Detector {
    fn landmark_count(&self) -> usize;
    fn input_size(&self) -> (usize, usize);
    fn detect(&self, frame: &GrayImage, to_image: &SimilarityTransform) -> Result<Detection>;
}

/// `1 - u / p` per channel, where `p` is the largest softmax probability and
/// `u` the probability every pixel of a flat map would get. Zero for a flat
/// map, approaching one as the map concentrates on a single pixel.
pub fn confidence(stack: &HeatmapStack, beta: f64) -> Vec<f64> {
    let pixels = (stack.height() * stack.width()) as f64;
    peak_probabilities(stack, beta)
        .into_iter()
        .map(|p| (1.0 - 1.0 / (p * pixels)).max(0.0))
        .collect()
}

impl Detector for HourglassModel {
    fn landmark_count(&self) -> usize {
        self.config.landmarks
    }

    fn input_size(&self) -> (usize, usize) {
        (self.config.height, self.config.input_width)
    }

    fn detect(&self, frame: &GrayImage, _: &SimilarityTransform) -> Result<Detection> {
        let stack = HeatmapStack::from_tensor(&self.forward(&frame.to_tensor())?)?;
        let points = decode_soft_argmax(&stack, self.config.beta)?;
        let confidence = confidence(&stack, self.config.beta);
        Ok(Detection { points, confidence })
    }
}

/// Reports known image-space points, for wiring checks.
#[derive(Debug, Clone)]
pub struct OracleDetector {
    pub points: Vec<Point2>,
    pub size: (usize, usize),
}

impl Detector for OracleDetector {
    fn landmark_count(&self) -> usize {
        self.points.len()
    }

    fn input_size(&self) -> (usize, usize) {
        self.size
    }

    fn detect(&self, _: &GrayImage, to_image: &SimilarityTransform) -> Result<Detection> {
        let inv = to_image.invert();
        Ok(Detection {
            points: self.points.iter().map(|&p| inv.apply(p)).collect(),
            confidence: vec![1.0; self.points.len()],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    /// Image coordinates, in the orientation of the input image.
    pub landmarks: LandmarkSet,
    pub reference: (Point2, Point2),
    /// Local frame to image.
    pub frame: SimilarityTransform,
    pub min_confidence: f64,
    pub low_confidence: bool,
}

/// Runs both stages on a left-oriented image.
pub fn localize(
    image: &GrayImage,
    global: &dyn Detector,
    local: &dyn Detector,
    spec: &ReferenceFrameSpec,
) -> Result<Localization> {
    if global.landmark_count() != 2 {
        return Err(Error::InvalidParameter(format!(
            "global stage must detect 2 reference points, has {}",
            global.landmark_count()
        )));
    }
    if local.input_size() != (spec.height, spec.width) {
        return Err(Error::ShapeMismatch(format!(
            "local stage takes {:?}, frame is {}x{}",
            local.input_size(),
            spec.height,
            spec.width
        )));
    }
    let (view, to_image) = global_view(image, global.input_size());
    let g = global.detect(&view, &to_image)?;
    let p0 = to_image.apply(g.points[0]);
    let p1 = to_image.apply(g.points[1]);
    let frame = spec.transform(p0, p1)?;
    let patch = resample_into_frame(image, &frame, (spec.height, spec.width));
    let l = local.detect(&patch, &frame)?;
    let min_confidence = g
        .confidence
        .iter()
        .chain(&l.confidence)
        .copied()
        .fold(f64::INFINITY, f64::min);
    Ok(Localization {
        landmarks: LandmarkSet::left(l.points.iter().map(|&p| frame.apply(p)).collect()),
        reference: (p0, p1),
        frame,
        min_confidence,
        low_confidence: !(min_confidence >= LOW_CONFIDENCE_THRESHOLD),
    })
}

/// Mirrors image and landmarks about the vertical axis, remapping indices
/// through the schema's mirror table. Applying it twice restores the input.
pub fn flip_to_left(image: &GrayImage, landmarks: &LandmarkSet, schema: &Schema) -> Result<(GrayImage, LandmarkSet)> {
    let mirror = schema.mirror().ok_or(Error::MissingMirrorTable)?;
    Ok((image.flipped_horizontally(), landmarks.mirrored(image.width(), mirror)?))
}

/// Left-oriented copy: right knees are flipped, left ones cloned.
pub fn as_left(image: &GrayImage, landmarks: &LandmarkSet, schema: &Schema) -> Result<(GrayImage, LandmarkSet)> {
    match landmarks.side {
        Side::Left => Ok((image.clone(), landmarks.clone())),
        Side::Right => flip_to_left(image, landmarks, schema),
    }
}

/// Global-stage sample: the whole-image view with the reference pair as
/// target.
pub fn global_sample(image: &GrayImage, landmarks: &LandmarkSet, roles: &Roles, size: (usize, usize)) -> TrainSample {
    let (view, t) = global_view(image, size);
    let inv = t.invert();
    let (a, b) = landmarks.pair(roles.plateau_corners);
    TrainSample {
        image: view.to_tensor(),
        target: vec![inv.apply(a), inv.apply(b)],
    }
}

/// Local-stage sample in the frame built from the reference pair shifted by
/// `jitter` (image pixels, one offset per point).
pub fn local_sample(
    image: &GrayImage,
    landmarks: &LandmarkSet,
    roles: &Roles,
    spec: &ReferenceFrameSpec,
    jitter: (Point2, Point2),
) -> Result<TrainSample> {
    let (a, b) = landmarks.pair(roles.plateau_corners);
    let t = spec.transform(a + jitter.0, b + jitter.1)?;
    let inv = t.invert();
    Ok(TrainSample {
        image: resample_into_frame(image, &t, (spec.height, spec.width)).to_tensor(),
        target: landmarks.points.iter().map(|&p| inv.apply(p)).collect(),
    })
}

/// Independent Gaussian offsets for the two reference points, reproducible
/// from `(seed, epoch, index)`.
pub fn reference_jitter(sd: f64, seed: u64, epoch: usize, index: usize) -> (Point2, Point2) {
    if sd <= 0.0 {
        return (Point2::new(0.0, 0.0), Point2::new(0.0, 0.0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((epoch as u64) << 32) ^ index as u64);
    let n = Normal::new(0.0, sd).expect("positive sd");
    let mut d = || Point2::new(n.sample(&mut rng), n.sample(&mut rng));
    (d(), d())
}

/// Trains the global stage on left-oriented images.
pub fn train_global(model: &mut HourglassModel, data: &[(GrayImage, LandmarkSet)], roles: &Roles) -> Result<TrainReport> {
    let size = (model.config.height, model.config.input_width);
    let samples: Vec<TrainSample> = data.iter().map(|(i, l)| global_sample(i, l, roles, size)).collect();
    train(model, &samples)
}

/// Trains the local stage on left-oriented images, re-drawing the reference
/// jitter every epoch so the model sees frames as imperfect as the global
/// stage produces.
pub fn train_local(
    model: &mut HourglassModel,
    data: &[(GrayImage, LandmarkSet)],
    roles: &Roles,
    spec: &ReferenceFrameSpec,
    jitter_sd: f64,
) -> Result<TrainReport> {
    if model.input_size() != (spec.height, spec.width) {
        return Err(Error::ShapeMismatch(format!(
            "local model takes {:?}, frame is {}x{}",
            model.input_size(),
            spec.height,
            spec.width
        )));
    }
    let seed = model.config.seed;
    train_with(model, data.len(), |epoch, i| {
        let (img, lm) = &data[i];
        local_sample(img, lm, roles, spec, reference_jitter(jitter_sd, seed, epoch, i))
    })
}
