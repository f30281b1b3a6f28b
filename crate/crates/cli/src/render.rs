use std::fmt::Write;

use clap::ValueEnum;
use ionspec::spectra::{Scaling, SpectrumGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Component {
    Abs,
    Re,
    Im,
}

const PLOT: f64 = 480.0;
const LEFT: f64 = 70.0;
const TOP: f64 = 30.0;
const BAR_GAP: f64 = 24.0;
const BAR_WIDTH: f64 = 18.0;
const WIDTH: f64 = LEFT + PLOT + BAR_GAP + BAR_WIDTH + 80.0;
const HEIGHT: f64 = TOP + PLOT + 60.0;

/// Blue to red through cyan, green and yellow; `x` in `[0, 1]`.
pub fn colormap(x: f64) -> (u8, u8, u8) {
    const STOPS: [(f64, f64, f64); 5] = [
        (0.0, 0.0, 1.0),
        (0.0, 1.0, 1.0),
        (0.0, 1.0, 0.0),
        (1.0, 1.0, 0.0),
        (1.0, 0.0, 0.0),
    ];
    let x = if x.is_finite() { x.clamp(0.0, 1.0) } else { 0.0 };
    let pos = x * (STOPS.len() - 1) as f64;
    let i = (pos.floor() as usize).min(STOPS.len() - 2);
    let f = pos - i as f64;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    let mix = |p: f64, q: f64| ((p + (q - p) * f) * 255.0).round() as u8;
    (mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

fn hex((r, g, b): (u8, u8, u8)) -> String {
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Index range of an axis inside `[lo, hi]`.
fn window(start: f64, step: f64, count: usize, lim: Option<&[f64]>) -> Result<(usize, usize), String> {
    let Some(&[lo, hi]) = lim else {
        return Ok((0, count));
    };
    let idx: Vec<usize> = (0..count)
        .filter(|&k| {
            let v = start + k as f64 * step;
            v >= lo.min(hi) && v <= lo.max(hi)
        })
        .collect();
    match (idx.first(), idx.last()) {
        (Some(&a), Some(&b)) => Ok((a, b + 1)),
        _ => Err(format!("range [{lo}, {hi}] contains no grid points")),
    }
}

fn label(value: f64) -> String {
    if value == 0.0 {
        "0".into()
    } else if value.abs() >= 1e-2 && value.abs() < 1e4 {
        format!("{value:.3}")
    } else {
        format!("{value:.2e}")
    }
}

/// SVG heatmap of a 2D spectrum; axis 0 runs horizontally.
pub fn heatmap(
    spectrum: &SpectrumGrid,
    component: Component,
    xlim: Option<&[f64]>,
    ylim: Option<&[f64]>,
) -> Result<String, String> {
    if spectrum.axes.len() != 2 {
        return Err(format!("render needs a 2D grid, got {} axes", spectrum.axes.len()));
    }
    let (ax, ay) = (&spectrum.axes[0], &spectrum.axes[1]);
    let (x0, x1) = window(ax.start, ax.step, ax.count, xlim)?;
    let (y0, y1) = window(ay.start, ay.step, ay.count, ylim)?;
    let pick = |i: usize, j: usize| {
        let z = spectrum.values[[i, j]];
        match component {
            Component::Abs => z.norm(),
            Component::Re => z.re,
            Component::Im => z.im,
        }
    };
    let cells: Vec<(usize, usize, f64)> = (x0..x1)
        .flat_map(|i| (y0..y1).map(move |j| (i, j)))
        .map(|(i, j)| (i, j, pick(i, j)))
        .collect();
    let lo = cells.iter().map(|c| c.2).fold(f64::INFINITY, f64::min);
    let hi = cells.iter().map(|c| c.2).fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let norm = |v: f64| if span > 0.0 { (v - lo) / span } else { 0.5 };

    let (nx, ny) = (x1 - x0, y1 - y0);
    let (cw, ch) = (PLOT / nx as f64, PLOT / ny as f64);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<g id="cells" shape-rendering="crispEdges">"#);
    for &(i, j, v) in &cells {
        // frequency increases upwards
        let x = LEFT + (i - x0) as f64 * cw;
        let y = TOP + PLOT - (j - y0 + 1) as f64 * ch;
        let _ = writeln!(
            svg,
            r#"<rect x="{x:.3}" y="{y:.3}" width="{:.3}" height="{:.3}" fill="{}"/>"#,
            cw + 0.05,
            ch + 0.05,
            hex(colormap(norm(v)))
        );
    }
    let _ = writeln!(svg, "</g>");
    let _ = writeln!(
        svg,
        r#"<rect x="{LEFT}" y="{TOP}" width="{PLOT}" height="{PLOT}" fill="none" stroke="black"/>"#
    );

    let xv = |k: usize| ax.start + k as f64 * ax.step;
    let yv = |k: usize| ay.start + k as f64 * ay.step;
    for t in 0..=4 {
        let f = t as f64 / 4.0;
        let xi = x0 as f64 + f * (nx - 1) as f64;
        let px = LEFT + (xi - x0 as f64 + 0.5) * cw;
        let _ = writeln!(
            svg,
            r#"<line x1="{px:.2}" y1="{b}" x2="{px:.2}" y2="{b2}" stroke="black"/><text x="{px:.2}" y="{ty}" text-anchor="middle">{}</text>"#,
            label(xv(0) + xi * ax.step),
            b = TOP + PLOT,
            b2 = TOP + PLOT + 5.0,
            ty = TOP + PLOT + 18.0
        );
        let yi = y0 as f64 + f * (ny - 1) as f64;
        let py = TOP + PLOT - (yi - y0 as f64 + 0.5) * ch;
        let _ = writeln!(
            svg,
            r#"<line x1="{a}" y1="{py:.2}" x2="{LEFT}" y2="{py:.2}" stroke="black"/><text x="{tx}" y="{py:.2}" text-anchor="end" dominant-baseline="middle">{}</text>"#,
            label(yv(0) + yi * ay.step),
            a = LEFT - 5.0,
            tx = LEFT - 8.0
        );
    }
    let what = match (component, spectrum.scaling) {
        (Component::Abs, Scaling::Arcsinh) => "arcsinh|S|",
        (Component::Abs, Scaling::Linear) => "|S|",
        (Component::Re, _) => "Re S",
        (Component::Im, _) => "Im S",
    };
    let _ = writeln!(
        svg,
        r#"<text id="xlabel" x="{}" y="{}" text-anchor="middle">{} [{}]</text>"#,
        LEFT + PLOT / 2.0,
        TOP + PLOT + 40.0,
        ax.name,
        spectrum.units
    );
    let _ = writeln!(
        svg,
        r#"<text id="ylabel" x="18" y="{y}" text-anchor="middle" transform="rotate(-90 18 {y})">{} [{}]</text>"#,
        ay.name,
        spectrum.units,
        y = TOP + PLOT / 2.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="18" text-anchor="middle">{what}</text>"#,
        LEFT + PLOT / 2.0
    );

    let bx = LEFT + PLOT + BAR_GAP;
    let _ = writeln!(svg, r#"<g id="colorbar">"#);
    let steps = 64;
    let sh = PLOT / steps as f64;
    for s in 0..steps {
        let f = (s as f64 + 0.5) / steps as f64;
        let color = if span > 0.0 { colormap(f) } else { colormap(0.5) };
        let _ = writeln!(
            svg,
            r#"<rect x="{bx}" y="{:.3}" width="{BAR_WIDTH}" height="{:.3}" fill="{}"/>"#,
            TOP + PLOT - (s + 1) as f64 * sh,
            sh + 0.05,
            hex(color)
        );
    }
    let _ = writeln!(
        svg,
        r#"<rect x="{bx}" y="{TOP}" width="{BAR_WIDTH}" height="{PLOT}" fill="none" stroke="black"/>"#
    );
    let tx = bx + BAR_WIDTH + 4.0;
    let _ = writeln!(
        svg,
        r#"<text id="colorbar-max" x="{tx}" y="{}" dominant-baseline="middle">{}</text>"#,
        TOP,
        label(hi)
    );
    let _ = writeln!(
        svg,
        r#"<text id="colorbar-min" x="{tx}" y="{}" dominant-baseline="middle">{}</text>"#,
        TOP + PLOT,
        label(lo)
    );
    let _ = writeln!(svg, "</g>\n</svg>");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), (0, 0, 255));
        assert_eq!(colormap(1.0), (255, 0, 0));
        assert_eq!(colormap(2.0), (255, 0, 0));
        assert_eq!(colormap(f64::NAN), (0, 0, 255));
    }

    fn grid(values: Vec<f64>, nx: usize, ny: usize) -> SpectrumGrid {
        use ionspec::linalg::C64;
        use ionspec::spectra::Axis;
        use ndarray::{ArrayD, IxDyn};
        SpectrumGrid {
            axes: vec![Axis::new("w1", -1.0, 0.5, nx), Axis::new("w2", 0.0, 0.25, ny)],
            frequency: vec![true, true],
            values: ArrayD::from_shape_vec(IxDyn(&[nx, ny]), values.into_iter().map(|v| C64::new(v, 0.0)).collect())
                .unwrap(),
            scaling: Scaling::Linear,
            units: "nu_x".into(),
            metadata: Default::default(),
        }
    }

    fn cell_colors(svg: &str) -> Vec<String> {
        let cells = svg.split("<g id=\"cells\"").nth(1).unwrap().split("</g>").next().unwrap();
        cells
            .split("fill=\"")
            .skip(1)
            .map(|s| s[..7].to_string())
            .collect()
    }

    #[test]
    fn constant_field_is_one_color() {
        let svg = heatmap(&grid(vec![2.0; 12], 4, 3), Component::Abs, None, None).unwrap();
        let colors = cell_colors(&svg);
        assert_eq!(colors.len(), 12);
        assert!(colors.iter().all(|c| c == &colors[0]));
        assert!(svg.contains(r#"id="colorbar-max" x="596" y="30" dominant-baseline="middle">2.000<"#));
        assert!(svg.contains(r#"dominant-baseline="middle">2.000</text>"#));
    }

    #[test]
    fn delta_peak_lights_one_cell() {
        let mut v = vec![0.0; 12];
        // w1 = 0.5 (index 3), w2 = 0.25 (index 1)
        v[3 * 3 + 1] = 1.0;
        let svg = heatmap(&grid(v, 4, 3), Component::Re, None, None).unwrap();
        let colors = cell_colors(&svg);
        let red: Vec<usize> = colors.iter().enumerate().filter(|(_, c)| *c == "#ff0000").map(|(k, _)| k).collect();
        assert_eq!(red, vec![10]);
        assert!(colors.iter().filter(|c| *c == "#0000ff").count() == 11);
        // cell (3, 1): rightmost column, middle row
        let x = LEFT + 3.0 * PLOT / 4.0;
        let y = TOP + PLOT - 2.0 * PLOT / 3.0;
        assert!(svg.contains(&format!(r##"<rect x="{x:.3}" y="{y:.3}" width="120.050" height="160.050" fill="#ff0000"/>"##)));
    }

    #[test]
    fn rejects_non_2d() {
        let mut g = grid(vec![0.0; 12], 4, 3);
        g.axes.pop();
        assert!(heatmap(&g, Component::Abs, None, None).is_err());
    }

    #[test]
    fn window_selects_inside_points() {
        assert_eq!(window(-1.0, 0.5, 5, Some(&[0.0, 1.0])).unwrap(), (2, 5));
        assert!(window(-1.0, 0.5, 5, Some(&[3.0, 4.0])).is_err());
        assert_eq!(window(0.0, 1.0, 7, None).unwrap(), (0, 7));
    }
}
