//! Human-feedback labels: five 1-5 quality scores plus circular artifact
//! markings, their JSON schema, rasterization into heatmap targets, and the
//! score/heatmap discrepancy between two annotation sets.
//!
//! Document schema (one file per triplet):
//!
//! ```json
//! {
//!   "scores": {"Thermal Retention": 4, "Texture Preservation": 3,
//!              "Artifacts": 2, "Sharpness": 3, "Overall Score": 3},
//!   "shapes": [{"label": "Artifacts", "points": [[390, 420], [430, 420]],
//!               "shape_type": "circle"}]
//! }
//! ```
//!
//! The first point of a shape is the circle center, the second lies on the
//! circumference. Coordinates are pixels, origin top-left, y downward.
//! Optional top-level `triplet_id`, `annotator` and `reviewed` keys carry
//! bookkeeping and are ignored by the schema itself.

use serde_json::{json, Map, Value};

use crate::image::Image;

pub const SCORE_KEYS: [&str; 5] = [
    "Thermal Retention",
    "Texture Preservation",
    "Artifacts",
    "Sharpness",
    "Overall Score",
];

pub const ARTIFACT_LABEL: &str = "Artifacts";

/// Index of "Overall Score" in score arrays.
pub const OVERALL: usize = 4;

const BCE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnnotationError {
    #[error("malformed annotation JSON: {0}")]
    Json(String),
    #[error("schema error at `{field}`: {message}")]
    Schema { field: String, message: String },
    #[error("score `{field}` = {value} is outside [1, 5]")]
    ScoreRange { field: String, value: f64 },
    #[error("shape {index}: {message}")]
    Shape { index: usize, message: String },
    #[error("shape {index}: center ({x}, {y}) lies outside the {width}x{height} image")]
    OutOfBounds {
        index: usize,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("annotations refer to different triplets: `{left}` vs `{right}`")]
    TripletMismatch { left: String, right: String },
}

impl AnnotationError {
    /// The document location the error is about.
    pub fn field(&self) -> String {
        match self {
            AnnotationError::Json(_) => "$".into(),
            AnnotationError::Schema { field, .. } | AnnotationError::ScoreRange { field, .. } => {
                field.clone()
            }
            AnnotationError::Shape { index, .. } | AnnotationError::OutOfBounds { index, .. } => {
                format!("shapes[{index}]")
            }
            AnnotationError::TripletMismatch { .. } => "triplet_id".into(),
        }
    }
}

type Result<T> = std::result::Result<T, AnnotationError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreVector {
    pub thermal_retention: f64,
    pub texture_preservation: f64,
    pub artifacts: f64,
    pub sharpness: f64,
    pub overall: f64,
}

impl ScoreVector {
    pub fn from_array(v: [f64; 5]) -> Result<Self> {
        for (key, value) in SCORE_KEYS.iter().zip(v) {
            if !(1.0..=5.0).contains(&value) {
                return Err(AnnotationError::ScoreRange {
                    field: key.to_string(),
                    value,
                });
            }
        }
        Ok(Self {
            thermal_retention: v[0],
            texture_preservation: v[1],
            artifacts: v[2],
            sharpness: v[3],
            overall: v[4],
        })
    }

    pub fn uniform(value: f64) -> Result<Self> {
        Self::from_array([value; 5])
    }

    pub fn to_array(&self) -> [f64; 5] {
        [
            self.thermal_retention,
            self.texture_preservation,
            self.artifacts,
            self.sharpness,
            self.overall,
        ]
    }
}

/// Maps each 1-5 score to `(s - 1) / 4`.
pub fn normalize_scores(scores: &ScoreVector) -> [f64; 5] {
    scores.to_array().map(|s| (s - 1.0) / 4.0)
}

/// Inverse of [`normalize_scores`]: `1 + 4 s`.
pub fn denormalize_scores(normalized: &[f64; 5]) -> [f64; 5] {
    normalized.map(|s| 1.0 + 4.0 * s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CircleAnnotation {
    pub center: (f64, f64),
    pub rim_point: (f64, f64),
    pub label: String,
}

impl CircleAnnotation {
    pub fn new(center: (f64, f64), rim_point: (f64, f64)) -> Self {
        Self {
            center,
            rim_point,
            label: ARTIFACT_LABEL.to_string(),
        }
    }

    pub fn radius_sq(&self) -> f64 {
        let dx = self.rim_point.0 - self.center.0;
        let dy = self.rim_point.1 - self.center.1;
        dx * dx + dy * dy
    }

    pub fn radius(&self) -> f64 {
        self.radius_sq().sqrt()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.center.0;
        let dy = y - self.center.1;
        dx * dx + dy * dy <= self.radius_sq()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub triplet_id: String,
    pub scores: ScoreVector,
    pub shapes: Vec<CircleAnnotation>,
    pub annotator: String,
    pub reviewed: bool,
}

fn number(v: f64) -> Value {
    if v.fract() == 0.0 && v.abs() < 9.0e15 {
        json!(v as i64)
    } else {
        json!(v)
    }
}

impl AnnotationRecord {
    /// Only the `scores` and `shapes` keys, exactly as the schema lists them.
    pub fn to_document(&self) -> Value {
        let scores: Map<String, Value> = SCORE_KEYS
            .iter()
            .zip(self.scores.to_array())
            .map(|(k, v)| (k.to_string(), number(v)))
            .collect();
        let shapes: Vec<Value> = self
            .shapes
            .iter()
            .map(|s| {
                json!({
                    "label": s.label,
                    "points": [
                        [number(s.center.0), number(s.center.1)],
                        [number(s.rim_point.0), number(s.rim_point.1)]
                    ],
                    "shape_type": "circle",
                })
            })
            .collect();
        json!({ "scores": scores, "shapes": shapes })
    }

    /// Schema document plus the bookkeeping keys.
    pub fn to_json(&self) -> Value {
        let mut doc = self.to_document();
        let obj = doc.as_object_mut().expect("object document");
        obj.insert("triplet_id".into(), json!(self.triplet_id));
        obj.insert("annotator".into(), json!(self.annotator));
        obj.insert("reviewed".into(), json!(self.reviewed));
        doc
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("serializable record")
    }
}

fn schema(field: impl Into<String>, message: impl Into<String>) -> AnnotationError {
    AnnotationError::Schema {
        field: field.into(),
        message: message.into(),
    }
}

fn parse_point(v: &Value, index: usize) -> Result<(f64, f64)> {
    let shape_err = |m: &str| AnnotationError::Shape {
        index,
        message: m.to_string(),
    };
    let arr = v.as_array().ok_or_else(|| shape_err("point is not an [x, y] array"))?;
    match arr.as_slice() {
        [x, y] => Ok((
            x.as_f64().ok_or_else(|| shape_err("x is not a number"))?,
            y.as_f64().ok_or_else(|| shape_err("y is not a number"))?,
        )),
        _ => Err(shape_err("point must have exactly two coordinates")),
    }
}

/// Parses and validates one document against an image of `(height, width)`.
pub fn parse_annotation(document: &str, image_dims: (usize, usize)) -> Result<AnnotationRecord> {
    let value: Value = serde_json::from_str(document).map_err(|e| AnnotationError::Json(e.to_string()))?;
    parse_annotation_value(&value, image_dims)
}

pub fn parse_annotation_value(value: &Value, image_dims: (usize, usize)) -> Result<AnnotationRecord> {
    let (height, width) = image_dims;
    let root = value
        .as_object()
        .ok_or_else(|| schema("$", "document must be a JSON object"))?;

    let scores_obj = root
        .get("scores")
        .ok_or_else(|| schema("scores", "missing key"))?
        .as_object()
        .ok_or_else(|| schema("scores", "must be an object"))?;
    let mut scores = [0.0; 5];
    for (slot, key) in scores.iter_mut().zip(SCORE_KEYS) {
        let v = scores_obj
            .get(key)
            .ok_or_else(|| schema(key, "missing score key"))?;
        *slot = v.as_f64().ok_or_else(|| schema(key, "score must be a number"))?;
    }
    let scores = ScoreVector::from_array(scores)?;

    let shapes_val = root
        .get("shapes")
        .ok_or_else(|| schema("shapes", "missing key"))?
        .as_array()
        .ok_or_else(|| schema("shapes", "must be an array"))?;
    let mut shapes = Vec::with_capacity(shapes_val.len());
    for (index, s) in shapes_val.iter().enumerate() {
        let shape_err = |m: String| AnnotationError::Shape { index, message: m };
        let obj = s
            .as_object()
            .ok_or_else(|| shape_err("shape must be an object".into()))?;
        let kind = obj.get("shape_type").and_then(Value::as_str).unwrap_or("");
        if kind != "circle" {
            return Err(shape_err(format!("shape_type must be \"circle\", got {kind:?}")));
        }
        let points = obj
            .get("points")
            .and_then(Value::as_array)
            .ok_or_else(|| shape_err("missing points".into()))?;
        if points.len() != 2 {
            return Err(shape_err(format!(
                "a circle needs exactly 2 points, got {}",
                points.len()
            )));
        }
        let center = parse_point(&points[0], index)?;
        let rim_point = parse_point(&points[1], index)?;
        let label = obj
            .get("label")
            .and_then(Value::as_str)
            .unwrap_or(ARTIFACT_LABEL)
            .to_string();
        let circle = CircleAnnotation {
            center,
            rim_point,
            label,
        };
        if !(circle.radius_sq() > 0.0) {
            return Err(shape_err("circle radius must be positive".into()));
        }
        let (x, y) = center;
        if !(x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64) {
            return Err(AnnotationError::OutOfBounds {
                index,
                x,
                y,
                width,
                height,
            });
        }
        shapes.push(circle);
    }

    let text = |key: &str| root.get(key).and_then(Value::as_str).unwrap_or("").to_string();
    Ok(AnnotationRecord {
        triplet_id: text("triplet_id"),
        scores,
        shapes,
        annotator: text("annotator"),
        reviewed: root.get("reviewed").and_then(Value::as_bool).unwrap_or(false),
    })
}

/// Per-pixel artifact target in `[0, 1]`, row-major `H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapLabel {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl HeatmapLabel {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn to_image(&self) -> Image {
        Image::new(self.width, self.height, 1, self.values.clone()).expect("heatmap image")
    }

    pub fn from_image(image: &Image) -> Self {
        let gray = image.to_gray();
        Self {
            height: gray.height(),
            width: gray.width(),
            values: gray.data().to_vec(),
        }
    }

    /// Bilinear resampling to `(height, width)`.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        Self::from_image(&self.to_image().resize(width, height))
    }

    /// Elementwise maximum.
    pub fn union(&self, other: &HeatmapLabel) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a.max(*b))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeatmapStyle {
    /// Hard disks: 1 inside any circle, 0 elsewhere.
    #[default]
    Binary,
    /// `exp(-d^2 / (2 sigma^2))` with `sigma = r / 2`, merged by max.
    Gaussian,
}

/// Hard-disk rasterization: pixel `(x, y)` is 1 when some circle satisfies
/// `(x - cx)^2 + (y - cy)^2 <= r^2`.
pub fn rasterize_heatmap(shapes: &[CircleAnnotation], dims: (usize, usize)) -> HeatmapLabel {
    rasterize_heatmap_styled(shapes, dims, HeatmapStyle::Binary)
}

pub fn rasterize_heatmap_styled(
    shapes: &[CircleAnnotation],
    dims: (usize, usize),
    style: HeatmapStyle,
) -> HeatmapLabel {
    let (height, width) = dims;
    let mut out = HeatmapLabel::zeros(height, width);
    if width == 0 || height == 0 {
        return out;
    }
    for circle in shapes {
        let (cx, cy) = circle.center;
        let r2 = circle.radius_sq();
        match style {
            HeatmapStyle::Binary => {
                let r = r2.sqrt();
                let x0 = (cx - r).floor().max(0.0) as usize;
                let y0 = (cy - r).floor().max(0.0) as usize;
                let x1 = ((cx + r).ceil().max(0.0) as usize).min(width - 1);
                let y1 = ((cy + r).ceil().max(0.0) as usize).min(height - 1);
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        if circle.contains(x as f64, y as f64) {
                            out.values[y * width + x] = 1.0;
                        }
                    }
                }
            }
            HeatmapStyle::Gaussian => {
                let two_sigma_sq = 2.0 * r2 / 4.0;
                for y in 0..height {
                    for x in 0..width {
                        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                        let v = (-d2 / two_sigma_sq).exp();
                        let px = &mut out.values[y * width + x];
                        *px = px.max(v);
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Discrepancy {
    pub score_err: f64,
    pub heatmap_err: f64,
}

/// Mean BCE of `prediction` against `target`, both clamped to `[eps, 1-eps]`.
pub fn binary_cross_entropy(target: &[f64], prediction: &[f64]) -> f64 {
    let clamp = |v: f64| v.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let sum: f64 = target
        .iter()
        .zip(prediction)
        .map(|(&t, &p)| {
            let (t, p) = (clamp(t), clamp(p));
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    sum / target.len().max(1) as f64
}

/// Score MSE over normalized vectors and heatmap BCE, treating `reference`
/// as the target and `candidate` as the prediction.
pub fn annotation_discrepancy(
    reference: &AnnotationRecord,
    candidate: &AnnotationRecord,
    dims: (usize, usize),
) -> Result<Discrepancy> {
    if reference.triplet_id != candidate.triplet_id {
        return Err(AnnotationError::TripletMismatch {
            left: reference.triplet_id.clone(),
            right: candidate.triplet_id.clone(),
        });
    }
    let a = normalize_scores(&reference.scores);
    let b = normalize_scores(&candidate.scores);
    let score_err = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 5.0;
    let ha = rasterize_heatmap(&reference.shapes, dims);
    let hb = rasterize_heatmap(&candidate.shapes, dims);
    Ok(Discrepancy {
        score_err,
        heatmap_err: binary_cross_entropy(&ha.values, &hb.values),
    })
}
