//! Loss-curve raster: one polyline per term, each scaled to its own range.

use serde::Serialize;
use serde_json::Value;

pub const TERMS: [&str; 5] = ["d_loss", "g_bce", "l_p", "l_ang", "l_curl"];

const WIDTH: usize = 800;
const HEIGHT: usize = 480;
const MARGIN: usize = 40;
const COLORS: [[u8; 3]; 5] = [[214, 39, 40], [31, 119, 180], [44, 160, 44], [255, 127, 14], [148, 103, 189]];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotSummary {
    pub rows: usize,
    pub skipped_lines: usize,
    pub plotted: Vec<String>,
    pub missing: Vec<String>,
}

pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Canvas {
    fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![255; width * height * 3],
        }
    }

    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return;
        }
        let i = (y as usize * self.width + x as usize) * 3;
        self.rgb[i..i + 3].copy_from_slice(&c);
    }

    fn rect(&mut self, x0: i64, y0: i64, w: i64, h: i64, c: [u8; 3]) {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                self.put(x, y, c);
            }
        }
    }

    /// Bresenham line, two pixels thick.
    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, c);
            self.put(x, y + 1, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn text(&mut self, x: i64, y: i64, s: &str, scale: i64, c: [u8; 3]) {
        for (k, ch) in s.chars().enumerate() {
            let rows = glyph(ch);
            for (r, bits) in rows.iter().enumerate() {
                for col in 0..3 {
                    if bits & (0b100 >> col) != 0 {
                        let gx = x + (k as i64 * 4 + col) * scale;
                        self.rect(gx, y + r as i64 * scale, scale, scale, c);
                    }
                }
            }
        }
    }
}

/// 3×5 bitmaps for the characters in the term names.
fn glyph(c: char) -> [u8; 5] {
    match c {
        'a' => [0b000, 0b110, 0b011, 0b101, 0b111],
        'b' => [0b100, 0b100, 0b111, 0b101, 0b111],
        'c' => [0b000, 0b111, 0b100, 0b100, 0b111],
        'd' => [0b001, 0b001, 0b111, 0b101, 0b111],
        'e' => [0b111, 0b101, 0b111, 0b100, 0b111],
        'g' => [0b111, 0b101, 0b111, 0b001, 0b111],
        'l' => [0b110, 0b010, 0b010, 0b010, 0b111],
        'n' => [0b000, 0b110, 0b101, 0b101, 0b101],
        'o' => [0b000, 0b111, 0b101, 0b101, 0b111],
        'p' => [0b000, 0b111, 0b101, 0b111, 0b100],
        'r' => [0b000, 0b101, 0b110, 0b100, 0b100],
        's' => [0b000, 0b011, 0b110, 0b011, 0b110],
        'u' => [0b000, 0b101, 0b101, 0b101, 0b111],
        '_' => [0b000, 0b000, 0b000, 0b000, 0b111],
        _ => [0; 5],
    }
}

fn series(rows: &[Value], term: &str) -> Vec<(f64, f64)> {
    rows.iter()
        .enumerate()
        .filter_map(|(i, row)| {
            let v = row.get(term)?.as_f64().filter(|v| v.is_finite())?;
            let it = row.get("iteration").and_then(Value::as_f64).unwrap_or((i + 1) as f64);
            Some((it, v))
        })
        .collect()
}

/// Draws every present term. `rows` must be nonempty.
pub fn render(rows: &[Value], skipped_lines: usize) -> (Canvas, PlotSummary) {
    let mut canvas = Canvas::new(WIDTH, HEIGHT);
    let (x0, y0) = (MARGIN as i64, MARGIN as i64);
    let (pw, ph) = ((WIDTH - 2 * MARGIN) as i64, (HEIGHT - 2 * MARGIN) as i64);
    let axis = [90, 90, 90];
    canvas.line((x0, y0 + ph), (x0 + pw, y0 + ph), axis);
    canvas.line((x0, y0), (x0, y0 + ph), axis);

    let all: Vec<(String, Vec<(f64, f64)>)> = TERMS.iter().map(|t| (t.to_string(), series(rows, t))).collect();
    let iters = all.iter().flat_map(|(_, s)| s.iter().map(|p| p.0));
    let (it_lo, it_hi) = iters.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));

    let mut summary = PlotSummary {
        rows: rows.len(),
        skipped_lines,
        plotted: Vec::new(),
        missing: Vec::new(),
    };
    for (k, (name, pts)) in all.iter().enumerate() {
        if pts.is_empty() {
            summary.missing.push(name.clone());
            continue;
        }
        let color = COLORS[k];
        let (lo, hi) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
        let to_px = |(it, v): (f64, f64)| {
            let fx = if it_hi > it_lo { (it - it_lo) / (it_hi - it_lo) } else { 0.5 };
            let fy = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
            (x0 + (fx * pw as f64).round() as i64, y0 + ph - (fy * ph as f64).round() as i64)
        };
        let mut prev = to_px(pts[0]);
        canvas.put(prev.0, prev.1, color);
        for &p in &pts[1..] {
            let cur = to_px(p);
            canvas.line(prev, cur, color);
            prev = cur;
        }
        let ly = y0 + 4 + summary.plotted.len() as i64 * 20;
        let lx = x0 + pw - 130;
        canvas.rect(lx, ly + 3, 18, 6, color);
        canvas.text(lx + 26, ly, name, 3, [40, 40, 40]);
        summary.plotted.push(name.clone());
    }
    (canvas, summary)
}
