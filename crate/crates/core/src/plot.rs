//! SVG overlay of predicted versus ground-truth translation paths, projected
//! onto the first two translation axes.

use crate::geometry::Pose;

fn bounds(poses: &[&[Pose]]) -> (f64, f64, f64, f64) {
    let mut min_x = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    for set in poses {
        for p in *set {
            min_x = min_x.min(p.translation.x);
            max_x = max_x.max(p.translation.x);
            min_y = min_y.min(p.translation.y);
            max_y = max_y.max(p.translation.y);
        }
    }
    if !min_x.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    let pad_x = 0.05 * (max_x - min_x).max(1e-9);
    let pad_y = 0.05 * (max_y - min_y).max(1e-9);
    (min_x - pad_x, max_x + pad_x, min_y - pad_y, max_y + pad_y)
}

fn polyline(poses: &[Pose], bounds: (f64, f64, f64, f64), size: f64) -> String {
    let (min_x, max_x, min_y, max_y) = bounds;
    let sx = size / (max_x - min_x);
    let sy = size / (max_y - min_y);
    poses
        .iter()
        .map(|p| {
            format!(
                "{:.3},{:.3}",
                (p.translation.x - min_x) * sx,
                // SVG y grows downward.
                size - (p.translation.y - min_y) * sy
            )
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Renders the two paths as polylines with a small legend. Deterministic
/// output for identical inputs.
pub fn trajectory_svg(ground_truth: &[Pose], predicted: &[Pose]) -> String {
    let size = 640.0;
    let b = bounds(&[ground_truth, predicted]);
    let gt_line = polyline(ground_truth, b, size);
    let pred_line = polyline(predicted, b, size);
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {s} {s}\" ",
            "width=\"{s}\" height=\"{s}\">\n",
            "<rect width=\"{s}\" height=\"{s}\" fill=\"white\"/>\n",
            "<polyline points=\"{gt}\" fill=\"none\" stroke=\"#2166ac\" stroke-width=\"2\"/>\n",
            "<polyline points=\"{pred}\" fill=\"none\" stroke=\"#b2182b\" stroke-width=\"1.5\" ",
            "stroke-dasharray=\"6 3\"/>\n",
            "<text x=\"12\" y=\"20\" font-family=\"monospace\" font-size=\"14\" ",
            "fill=\"#2166ac\">ground truth</text>\n",
            "<text x=\"12\" y=\"38\" font-family=\"monospace\" font-size=\"14\" ",
            "fill=\"#b2182b\">predicted</text>\n",
            "</svg>\n"
        ),
        s = size,
        gt = gt_line,
        pred = pred_line,
    )
}
