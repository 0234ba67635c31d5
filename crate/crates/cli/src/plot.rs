//! Trajectory and yaw-error figures, drawn once as marks and emitted as
//! SVG or PNG.

use std::fmt::Write as _;

use bevloc::pipeline::FrameResult;

pub type Rgb = [u8; 3];

pub const SUCCESS: Rgb = [255, 0, 0];
pub const FAILURE: Rgb = [0, 0, 0];
const PATH: Rgb = [190, 190, 190];
const START: Rgb = [30, 110, 230];
const BACKGROUND: Rgb = [255, 255, 255];

pub const WIDTH: usize = 800;
pub const HEIGHT: usize = 800;
const MARGIN: f64 = 50.0;
const DOT: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub enum Mark {
    Dot {
        at: (f64, f64),
        r: f64,
        color: Rgb,
    },
    Star {
        at: (f64, f64),
        r: f64,
        color: Rgb,
    },
    Line {
        pts: Vec<(f64, f64)>,
        width: f64,
        color: Rgb,
    },
    Rect {
        at: (f64, f64),
        w: f64,
        h: f64,
        color: Rgb,
    },
    /// Text is only drawn in SVG output.
    Text {
        at: (f64, f64),
        text: String,
    },
}

/// Equal-aspect map from world meters to pixels, y up.
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    min: [f64; 2],
    scale: f64,
    offset: (f64, f64),
}

impl Layout {
    pub fn fit(points: &[[f64; 2]], width: usize, height: usize) -> Layout {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for p in points {
            for i in 0..2 {
                min[i] = min[i].min(p[i]);
                max[i] = max[i].max(p[i]);
            }
        }
        if points.is_empty() {
            min = [0.0; 2];
            max = [1.0; 2];
        }
        let span = [(max[0] - min[0]).max(1e-6), (max[1] - min[1]).max(1e-6)];
        let (w, h) = (width as f64 - 2.0 * MARGIN, height as f64 - 2.0 * MARGIN);
        let scale = (w / span[0]).min(h / span[1]);
        // Center the drawing in the free direction.
        let offset = (
            MARGIN + (w - span[0] * scale) / 2.0,
            MARGIN + (h - span[1] * scale) / 2.0,
        );
        Layout { min, scale, offset }
    }

    pub fn to_px(&self, p: [f64; 2]) -> (f64, f64) {
        (
            self.offset.0 + (p[0] - self.min[0]) * self.scale,
            HEIGHT as f64 - self.offset.1 - (p[1] - self.min[1]) * self.scale,
        )
    }
}

pub fn success_color(f: &FrameResult) -> Rgb {
    if f.success {
        SUCCESS
    } else {
        FAILURE
    }
}

fn truth_points(frames: &[FrameResult]) -> Vec<[f64; 2]> {
    frames.iter().map(|f| [f.truth.x(), f.truth.y()]).collect()
}

fn base_marks(frames: &[FrameResult], layout: &Layout, title: String) -> Vec<Mark> {
    let pts = truth_points(frames);
    let mut marks = vec![Mark::Text {
        at: (MARGIN, MARGIN / 2.0),
        text: title,
    }];
    if pts.len() > 1 {
        marks.push(Mark::Line {
            pts: pts.iter().map(|&p| layout.to_px(p)).collect(),
            width: 1.0,
            color: PATH,
        });
    }
    if let Some(&first) = pts.first() {
        marks.push(Mark::Star {
            at: layout.to_px(first),
            r: 12.0,
            color: START,
        });
    }
    marks
}

/// Ground-truth positions, red where localization succeeded and black
/// where it failed, with a star at the first frame.
pub fn trajectory_marks(frames: &[FrameResult]) -> Vec<Mark> {
    let layout = Layout::fit(&truth_points(frames), WIDTH, HEIGHT);
    let ok = frames.iter().filter(|f| f.success).count();
    let mut marks = base_marks(
        frames,
        &layout,
        format!("localization: {ok}/{} frames successful (red)", frames.len()),
    );
    marks.extend(frames.iter().map(|f| Mark::Dot {
        at: layout.to_px([f.truth.x(), f.truth.y()]),
        r: DOT,
        color: success_color(f),
    }));
    marks
}

const VIRIDIS: [Rgb; 5] = [
    [68, 1, 84],
    [59, 82, 139],
    [33, 145, 140],
    [94, 201, 98],
    [253, 231, 37],
];

/// Color for `t` in `[0, 1]`, clamped.
pub fn colormap(t: f64) -> Rgb {
    let t = if t.is_nan() { 1.0 } else { t.clamp(0.0, 1.0) };
    let x = t * (VIRIDIS.len() - 1) as f64;
    let i = (x.floor() as usize).min(VIRIDIS.len() - 2);
    let f = x - i as f64;
    std::array::from_fn(|c| {
        let (a, b) = (VIRIDIS[i][c] as f64, VIRIDIS[i + 1][c] as f64);
        (a + (b - a) * f).round() as u8
    })
}

/// Ground-truth positions colored by yaw error, saturating at `cap` degrees.
pub fn yaw_heatmap_marks(frames: &[FrameResult], cap: f64) -> Vec<Mark> {
    let layout = Layout::fit(&truth_points(frames), WIDTH, HEIGHT);
    let mut marks = base_marks(frames, &layout, format!("yaw error, color scale clamped at {cap} deg"));
    marks.extend(frames.iter().map(|f| Mark::Dot {
        at: layout.to_px([f.truth.x(), f.truth.y()]),
        r: DOT,
        color: colormap(f.e_y / cap),
    }));
    let (x0, y0, h) = (WIDTH as f64 - MARGIN + 12.0, MARGIN, HEIGHT as f64 - 2.0 * MARGIN);
    let steps = 50;
    for i in 0..steps {
        let t = i as f64 / (steps - 1) as f64;
        marks.push(Mark::Rect {
            at: (x0, y0 + h * (1.0 - (i + 1) as f64 / steps as f64)),
            w: 14.0,
            h: h / steps as f64 + 0.5,
            color: colormap(t),
        });
    }
    marks.push(Mark::Text {
        at: (x0 - 6.0, y0 - 6.0),
        text: format!("{cap} deg"),
    });
    marks.push(Mark::Text {
        at: (x0 - 2.0, y0 + h + 16.0),
        text: "0".into(),
    });
    marks
}

fn hex(c: Rgb) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn star_points(at: (f64, f64), r: f64) -> Vec<(f64, f64)> {
    (0..10)
        .map(|i| {
            let rad = if i % 2 == 0 { r } else { 0.45 * r };
            let a = -std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::PI / 5.0;
            (at.0 + rad * a.cos(), at.1 + rad * a.sin())
        })
        .collect()
}

pub fn render_svg(marks: &[Mark], width: usize, height: usize) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="{}"/>"#, hex(BACKGROUND));
    for m in marks {
        let _ = match m {
            Mark::Dot { at, r, color } => writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="{r}" fill="{}"/>"#,
                at.0,
                at.1,
                hex(*color)
            ),
            Mark::Star { at, r, color } => {
                let pts: Vec<String> = star_points(*at, *r)
                    .iter()
                    .map(|(x, y)| format!("{x:.2},{y:.2}"))
                    .collect();
                writeln!(s, r#"<polygon points="{}" fill="{}"/>"#, pts.join(" "), hex(*color))
            }
            Mark::Line { pts, width, color } => {
                let pts: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
                writeln!(
                    s,
                    r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="{width}"/>"#,
                    pts.join(" "),
                    hex(*color)
                )
            }
            Mark::Rect { at, w, h, color } => writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{w:.2}" height="{h:.2}" fill="{}"/>"#,
                at.0,
                at.1,
                hex(*color)
            ),
            Mark::Text { at, text } => writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="14">{}</text>"#,
                at.0,
                at.1,
                text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
            ),
        };
    }
    s.push_str("</svg>\n");
    s
}

/// RGB raster of the marks.
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Canvas {
        Canvas {
            width,
            height,
            pixels: vec![BACKGROUND; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    fn fill_where(&mut self, lo: (f64, f64), hi: (f64, f64), color: Rgb, inside: impl Fn(f64, f64) -> bool) {
        let x0 = lo.0.floor().max(0.0) as usize;
        let y0 = lo.1.floor().max(0.0) as usize;
        let x1 = (hi.0.ceil().max(0.0) as usize).min(self.width);
        let y1 = (hi.1.ceil().max(0.0) as usize).min(self.height);
        for y in y0..y1 {
            for x in x0..x1 {
                // Sample at the pixel center.
                if inside(x as f64 + 0.5, y as f64 + 0.5) {
                    self.pixels[y * self.width + x] = color;
                }
            }
        }
    }

    fn disk(&mut self, c: (f64, f64), r: f64, color: Rgb) {
        self.fill_where((c.0 - r, c.1 - r), (c.0 + r, c.1 + r), color, |x, y| {
            (x - c.0).powi(2) + (y - c.1).powi(2) <= r * r
        });
    }

    fn polygon(&mut self, pts: &[(f64, f64)], color: Rgb) {
        let lo = pts
            .iter()
            .fold((f64::INFINITY, f64::INFINITY), |a, p| (a.0.min(p.0), a.1.min(p.1)));
        let hi = pts.iter().fold((f64::NEG_INFINITY, f64::NEG_INFINITY), |a, p| {
            (a.0.max(p.0), a.1.max(p.1))
        });
        self.fill_where(lo, hi, color, |x, y| {
            // Even-odd rule.
            let mut inside = false;
            let mut j = pts.len() - 1;
            for i in 0..pts.len() {
                let (a, b) = (pts[i], pts[j]);
                if (a.1 > y) != (b.1 > y) && x < (b.0 - a.0) * (y - a.1) / (b.1 - a.1) + a.0 {
                    inside = !inside;
                }
                j = i;
            }
            inside
        });
    }

    fn segment(&mut self, a: (f64, f64), b: (f64, f64), width: f64, color: Rgb) {
        let len = (b.0 - a.0).hypot(b.1 - a.1);
        let n = (len * 2.0).ceil().max(1.0) as usize;
        for i in 0..=n {
            let t = i as f64 / n as f64;
            self.disk((a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)), width / 2.0 + 0.2, color);
        }
    }

    pub fn draw(&mut self, marks: &[Mark]) {
        for m in marks {
            match m {
                Mark::Dot { at, r, color } => self.disk(*at, *r, *color),
                Mark::Star { at, r, color } => self.polygon(&star_points(*at, *r), *color),
                Mark::Line { pts, width, color } => {
                    for w in pts.windows(2) {
                        self.segment(w[0], w[1], *width, *color);
                    }
                }
                Mark::Rect { at, w, h, color } => self.fill_where(*at, (at.0 + w, at.1 + h), *color, |_, _| true),
                Mark::Text { .. } => {}
            }
        }
    }

    pub fn to_png(&self) -> Vec<u8> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().expect("in-memory PNG header");
            let flat: Vec<u8> = self.pixels.iter().flatten().copied().collect();
            w.write_image_data(&flat).expect("in-memory PNG data");
        }
        out
    }
}

pub fn render_png(marks: &[Mark], width: usize, height: usize) -> Vec<u8> {
    let mut c = Canvas::new(width, height);
    c.draw(marks);
    c.to_png()
}

#[cfg(test)]
mod tests {
    use super::*;
    use bevloc::pipeline::SuccessThresholds;
    use bevloc::Pose2;

    fn frame(id: u64, x: f64, y: f64, e_t: f64, e_y_deg: f64) -> FrameResult {
        let truth = Pose2::new(x, y, 0.0);
        let pred = Pose2::new(x + e_t, y, e_y_deg.to_radians());
        FrameResult::new(id, truth, pred, &SuccessThresholds::default())
    }

    fn frames() -> Vec<FrameResult> {
        vec![
            frame(0, -40.0, -40.0, 0.5, 0.5),
            frame(1, 0.0, 0.0, 1.0, 1.0),
            frame(2, 30.0, 10.0, 3.0, 1.0),
            frame(3, 40.0, 40.0, 1.0, 7.0),
        ]
    }

    fn pixel_at(c: &Canvas, p: (f64, f64)) -> Rgb {
        c.get(p.0 as usize, p.1 as usize)
    }

    #[test]
    fn success_is_red_failure_black() {
        let fs = frames();
        assert_eq!(success_color(&fs[1]), SUCCESS);
        assert_eq!(success_color(&fs[2]), FAILURE);
        assert_eq!(success_color(&fs[3]), FAILURE);
        let marks = trajectory_marks(&fs);
        let mut canvas = Canvas::new(WIDTH, HEIGHT);
        canvas.draw(&marks);
        let layout = Layout::fit(&truth_points(&fs), WIDTH, HEIGHT);
        assert_eq!(pixel_at(&canvas, layout.to_px([0.0, 0.0])), SUCCESS);
        assert_eq!(pixel_at(&canvas, layout.to_px([30.0, 10.0])), FAILURE);
        let svg = render_svg(&marks, WIDTH, HEIGHT);
        let (x, y) = layout.to_px([30.0, 10.0]);
        assert!(svg.contains(&format!(r##"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="#000000"/>"##)));
        let (x, y) = layout.to_px([0.0, 0.0]);
        assert!(svg.contains(&format!(r##"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="#ff0000"/>"##)));
    }

    #[test]
    fn start_star_surrounds_first_dot() {
        let fs = frames();
        let mut canvas = Canvas::new(WIDTH, HEIGHT);
        canvas.draw(&trajectory_marks(&fs));
        let layout = Layout::fit(&truth_points(&fs), WIDTH, HEIGHT);
        let (x, y) = layout.to_px([-40.0, -40.0]);
        assert_eq!(pixel_at(&canvas, (x, y)), SUCCESS);
        assert_eq!(pixel_at(&canvas, (x, y - 8.0)), START);
    }

    #[test]
    fn layout_keeps_aspect_and_y_up() {
        let l = Layout::fit(&[[0.0, 0.0], [100.0, 50.0]], WIDTH, HEIGHT);
        let a = l.to_px([0.0, 0.0]);
        let b = l.to_px([100.0, 50.0]);
        assert!((b.0 - a.0 - 2.0 * (a.1 - b.1)).abs() < 1e-9);
        assert!(b.1 < a.1);
        assert!(a.0 >= MARGIN - 1e-9 && b.0 <= WIDTH as f64 - MARGIN + 1e-9);
    }

    #[test]
    fn heatmap_saturates_at_cap() {
        assert_eq!(colormap(0.0), VIRIDIS[0]);
        assert_eq!(colormap(1.0), VIRIDIS[4]);
        assert_eq!(colormap(7.0 / 5.0), colormap(1.0));
        assert_eq!(colormap(-1.0), colormap(0.0));
        let fs = frames();
        let marks = yaw_heatmap_marks(&fs, 5.0);
        let dots: Vec<Rgb> = marks
            .iter()
            .filter_map(|m| match m {
                Mark::Dot { color, .. } => Some(*color),
                _ => None,
            })
            .collect();
        assert_eq!(dots.len(), 4);
        // 7 degrees and 5 degrees both render at the top of the scale.
        assert_eq!(dots[3], VIRIDIS[4]);
        assert_eq!(dots[1], colormap(fs[1].e_y / 5.0));
    }

    #[test]
    fn png_decodes_to_canvas() {
        let fs = frames();
        let marks = trajectory_marks(&fs);
        let bytes = render_png(&marks, WIDTH, HEIGHT);
        let dec = png::Decoder::new(std::io::Cursor::new(bytes));
        let mut reader = dec.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!((info.width, info.height), (WIDTH as u32, HEIGHT as u32));
        let mut canvas = Canvas::new(WIDTH, HEIGHT);
        canvas.draw(&marks);
        let flat: Vec<u8> = canvas.pixels.iter().flatten().copied().collect();
        assert_eq!(&buf[..info.buffer_size()], flat.as_slice());
    }
}
