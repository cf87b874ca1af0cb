use dive_core::analysis::Heatmap;

const CELL: f64 = 36.0;
const LEFT: f64 = 110.0;
const TOP: f64 = 110.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// White-to-blue ramp over the value range.
fn color(v: f64, lo: f64, hi: f64) -> String {
    let x = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
    let r = (247.0 - x * (247.0 - 8.0)) as u8;
    let g = (251.0 - x * (251.0 - 48.0)) as u8;
    let b = (255.0 - x * (255.0 - 107.0)) as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

pub fn heatmap_svg(h: &Heatmap, title: &str) -> String {
    let finite = h.values.iter().flatten().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let w = LEFT + CELL * h.cols.len() as f64 + 20.0;
    let ht = TOP + CELL * h.rows.len() as f64 + 20.0;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{ht}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    s.push_str(&format!("<text x=\"{}\" y=\"20\" font-size=\"14\">{}</text>\n", LEFT, escape(title)));
    for (j, c) in h.cols.iter().enumerate() {
        let x = LEFT + CELL * (j as f64 + 0.5);
        s.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" transform=\"rotate(-45 {x} {})\">{}</text>\n",
            TOP - 6.0,
            TOP - 6.0,
            escape(c)
        ));
    }
    for (i, r) in h.rows.iter().enumerate() {
        let y = TOP + CELL * i as f64;
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            LEFT - 6.0,
            y + CELL * 0.6,
            escape(r)
        ));
        for (j, v) in h.values[i].iter().enumerate() {
            let x = LEFT + CELL * j as f64;
            let fill = color(*v, lo, hi);
            let ink = if hi > lo && (v - lo) / (hi - lo) > 0.6 { "#ffffff" } else { "#000000" };
            s.push_str(&format!(
                "<rect x=\"{x}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"{fill}\" stroke=\"#ffffff\"/>\n"
            ));
            s.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"9\" fill=\"{ink}\">{v:.2}</text>\n",
                x + CELL / 2.0,
                y + CELL * 0.6
            ));
        }
    }
    s.push_str("</svg>\n");
    s
}
