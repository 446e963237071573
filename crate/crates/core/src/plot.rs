//! Deterministic SVG scatter plots over the fixed viewport `[-1.5, 1.5]^2`.

use std::fmt::Write as _;

use crate::batch::Point2;
use crate::toy::Cell;

pub const VIEW_LO: f64 = -1.5;
pub const VIEW_HI: f64 = 1.5;
const SIZE: f64 = 600.0;
const PAD: f64 = 30.0;

fn px(v: f64) -> f64 {
    PAD + (v - VIEW_LO) / (VIEW_HI - VIEW_LO) * (SIZE - 2.0 * PAD)
}

fn py(v: f64) -> f64 {
    SIZE - px(v)
}

fn markers(out: &mut String, points: &[Point2], color: &str, class: &str) {
    let _ = writeln!(out, r#"<g class="{class}" fill="{color}" fill-opacity="0.6">"#);
    for p in points {
        if !(VIEW_LO..=VIEW_HI).contains(&p[0]) || !(VIEW_LO..=VIEW_HI).contains(&p[1]) {
            continue;
        }
        let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="1.6"/>"#, px(p[0]), py(p[1]));
    }
    out.push_str("</g>\n");
}

/// Scatter of `base` in grey with an optional red `overlay`, the support
/// cells outlined. Points outside the viewport are dropped.
pub fn scatter_svg(base: &[Point2], overlay: Option<&[Point2]>) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(out, r#"<rect width="{SIZE}" height="{SIZE}" fill="white"/>"#);
    let (lo, hi) = (px(VIEW_LO), px(VIEW_HI));
    let _ = writeln!(
        out,
        r#"<rect class="frame" x="{lo:.2}" y="{lo:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
        hi - lo,
        hi - lo
    );
    let _ = writeln!(
        out,
        "<g class=\"axes\" stroke=\"#bbb\"><line x1=\"{lo:.2}\" y1=\"{:.2}\" x2=\"{hi:.2}\" y2=\"{:.2}\"/><line x1=\"{:.2}\" y1=\"{lo:.2}\" x2=\"{:.2}\" y2=\"{hi:.2}\"/></g>",
        py(0.0),
        py(0.0),
        px(0.0),
        px(0.0)
    );
    out.push_str("<g class=\"ticks\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#444\">\n");
    for t in [-1.0f64, 0.0, 1.0] {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{t}</text>"#,
            px(t),
            SIZE - PAD + 15.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{t}</text>"#,
            PAD - 5.0,
            py(t) + 4.0
        );
    }
    out.push_str("</g>\n");
    markers(&mut out, base, "#888", "base");
    if let Some(overlay) = overlay {
        markers(&mut out, overlay, "#d62728", "overlay");
    }
    out.push_str("<g class=\"cells\" fill=\"none\" stroke=\"black\" stroke-width=\"1.5\">\n");
    for cell in Cell::ALL {
        let (xs, ys) = cell.bounds();
        let _ = writeln!(
            out,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}"/>"#,
            px(xs[0]),
            py(ys[1]),
            px(xs[1]) - px(xs[0]),
            py(ys[0]) - py(ys[1])
        );
    }
    out.push_str("</g>\n</svg>\n");
    out
}
