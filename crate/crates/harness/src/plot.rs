use std::fmt::Write;

use mpe_core::Strategy;

use crate::compare::ResultBundle;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 60.0;

fn color(strategy: Strategy) -> &'static str {
    match strategy {
        Strategy::Mpe => "#d62728",
        Strategy::OnPolicy => "#1f77b4",
        Strategy::Odi => "#2ca02c",
        Strategy::Son => "#9467bd",
        Strategy::Sodi => "#ff7f0e",
    }
}

/// Normalized relative error against episodes, both axes logarithmic.
pub fn curves_svg(bundle: &ResultBundle) -> String {
    let points: Vec<_> = bundle
        .curves
        .iter()
        .filter(|c| c.normalized > 0.0)
        .collect();
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    if points.is_empty() {
        svg.push_str("</svg>\n");
        return svg;
    }
    let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for c in &points {
        let (x, y) = ((c.n as f64).log10(), c.normalized.log10());
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    if x_hi - x_lo < 1e-9 {
        x_hi = x_lo + 1.0;
    }
    if y_hi - y_lo < 1e-9 {
        y_hi = y_lo + 1.0;
    }
    let px = |x: f64| MARGIN + (x - x_lo) / (x_hi - x_lo) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y - y_lo) / (y_hi - y_lo) * (HEIGHT - 2.0 * MARGIN);

    let _ = writeln!(
        svg,
        r#"<polyline fill="none" stroke="black" points="{m},{m} {m},{b} {r},{b}"/>"#,
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    );
    for n in &bundle.config.sample_grid {
        let x = px((*n as f64).log10());
        let _ = writeln!(
            svg,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{n}</text>"#,
            HEIGHT - MARGIN + 18.0
        );
    }
    for (y, label) in [(y_lo, 10f64.powf(y_lo)), (y_hi, 10f64.powf(y_hi))] {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{label:.3}</text>"#,
            MARGIN - 6.0,
            py(y) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">episodes</text>"#,
        WIDTH / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="15" y="{:.1}" transform="rotate(-90 15 {:.1})" text-anchor="middle">relative error</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );

    let mut legend_y = MARGIN;
    for strategy in Strategy::ALL {
        let line: Vec<String> = points
            .iter()
            .filter(|c| c.strategy == strategy)
            .map(|c| {
                format!(
                    "{:.1},{:.1}",
                    px((c.n as f64).log10()),
                    py(c.normalized.log10())
                )
            })
            .collect();
        if line.is_empty() {
            continue;
        }
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>"#,
            color(strategy),
            line.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{legend_y:.1}" fill="{}">{}</text>"#,
            WIDTH - MARGIN - 90.0,
            color(strategy),
            strategy.label()
        );
        legend_y += 16.0;
    }
    svg.push_str("</svg>\n");
    svg
}
