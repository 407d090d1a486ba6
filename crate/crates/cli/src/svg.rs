//! Minimal SVG emission: line charts for training curves and 2D overlays
//! for trajectory comparisons. No external renderer; files are plain SVG.

pub struct Series {
    pub name: String,
    pub color: String,
    pub points: Vec<(f64, f64)>,
}

const W: f64 = 720.0;
const H: f64 = 420.0;
const MARGIN: f64 = 54.0;

fn bounds(series: &[Series]) -> (f64, f64, f64, f64) {
    let (mut x0, mut x1, mut y0, mut y1) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for &(x, y) in &s.points {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if !x0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    (x0, x1, y0, y1)
}

fn path_points(points: &[(f64, f64)], b: (f64, f64, f64, f64)) -> String {
    let (x0, x1, y0, y1) = b;
    points
        .iter()
        .map(|&(x, y)| {
            let px = MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
            let py = H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
            format!("{px:.2},{py:.2}")
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Polyline chart with axes, min/max labels, and a legend.
pub fn line_chart(title: &str, series: &[Series]) -> String {
    let b = bounds(series);
    let (x0, x1, y0, y1) = b;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"monospace\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\">{title}</text>\n",
        W / 2.0
    );
    // axes
    out.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b0}\" x2=\"{r}\" y2=\"{b0}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b0}\" stroke=\"black\"/>\n",
        m = MARGIN,
        r = W - MARGIN,
        t = MARGIN,
        b0 = H - MARGIN
    ));
    out.push_str(&format!(
        "<text x=\"{m}\" y=\"{y}\">{x0:.3}</text>\n\
         <text x=\"{r}\" y=\"{y}\" text-anchor=\"end\">{x1:.3}</text>\n\
         <text x=\"4\" y=\"{b0}\">{y0:.3e}</text>\n\
         <text x=\"4\" y=\"{t}\">{y1:.3e}</text>\n",
        m = MARGIN,
        r = W - MARGIN,
        y = H - MARGIN + 16.0,
        b0 = H - MARGIN,
        t = MARGIN + 4.0
    ));
    for (i, s) in series.iter().enumerate() {
        out.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            s.color,
            path_points(&s.points, b)
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{}\">{}</text>\n",
            W - MARGIN - 120.0,
            MARGIN + 16.0 * (i as f64 + 1.0),
            s.color,
            s.name
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Spatial overlay of polylines in one shared coordinate frame (equal
/// aspect): ground-truth vs predicted trajectories.
pub fn overlay(title: &str, series: &[Series]) -> String {
    let (x0, x1, y0, y1) = bounds(series);
    // equal aspect: expand the smaller range
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    let half = ((x1 - x0).max(y1 - y0)) / 2.0 * 1.05;
    let b = (cx - half, cx + half, cy - half, cy + half);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{H}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"monospace\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\">{title}</text>\n",
        W / 2.0
    );
    for s in series {
        if s.points.len() == 1 {
            let p = path_points(&s.points, b);
            let (px, py) = p.split_once(',').unwrap();
            out.push_str(&format!(
                "<circle cx=\"{px}\" cy=\"{py}\" r=\"2\" fill=\"{}\"/>\n",
                s.color
            ));
        } else {
            out.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1\" points=\"{}\"/>\n",
                s.color,
                path_points(&s.points, b)
            ));
        }
    }
    out.push_str("</svg>\n");
    out
}
