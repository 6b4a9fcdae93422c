//! Minimal line plots rasterized into an [`ImageBuffer`].

use crate::image_ops::ImageBuffer;

#[derive(Debug, Clone, PartialEq)]
pub struct PlotStyle {
    pub width: usize,
    pub height: usize,
    pub margin: usize,
    pub background: [f64; 3],
    pub axis: [f64; 3],
    pub grid: [f64; 3],
    pub line: [f64; 3],
}

impl Default for PlotStyle {
    fn default() -> Self {
        Self {
            width: 480,
            height: 320,
            margin: 40,
            background: [1.0, 1.0, 1.0],
            axis: [0.0, 0.0, 0.0],
            grid: [0.85, 0.85, 0.85],
            line: [0.1, 0.3, 0.8],
        }
    }
}

// 3x5 glyphs, rows top to bottom, 3 bits per row (MSB = left column).
const GLYPHS: [(char, [u8; 5]); 12] = [
    ('0', [0b111, 0b101, 0b101, 0b101, 0b111]),
    ('1', [0b010, 0b110, 0b010, 0b010, 0b111]),
    ('2', [0b111, 0b001, 0b111, 0b100, 0b111]),
    ('3', [0b111, 0b001, 0b111, 0b001, 0b111]),
    ('4', [0b101, 0b101, 0b111, 0b001, 0b001]),
    ('5', [0b111, 0b100, 0b111, 0b001, 0b111]),
    ('6', [0b111, 0b100, 0b111, 0b101, 0b111]),
    ('7', [0b111, 0b001, 0b010, 0b010, 0b010]),
    ('8', [0b111, 0b101, 0b111, 0b101, 0b111]),
    ('9', [0b111, 0b101, 0b111, 0b001, 0b111]),
    ('.', [0b000, 0b000, 0b000, 0b000, 0b010]),
    ('-', [0b000, 0b000, 0b111, 0b000, 0b000]),
];

struct Canvas {
    img: ImageBuffer,
}

impl Canvas {
    fn put(&mut self, x: i64, y: i64, c: [f64; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.img.width && (y as usize) < self.img.height {
            self.img.set(x as usize, y as usize, c);
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [f64; 3]) {
        // Bresenham.
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = ((x1 - x0).signum(), (y1 - y0).signum());
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, c);
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

    fn square(&mut self, (x, y): (i64, i64), r: i64, c: [f64; 3]) {
        for yy in y - r..=y + r {
            for xx in x - r..=x + r {
                self.put(xx, yy, c);
            }
        }
    }

    /// Text at 2x glyph scale, top-left anchored.
    fn text(&mut self, x: i64, y: i64, s: &str, c: [f64; 3]) {
        for (k, ch) in s.chars().enumerate() {
            let Some((_, rows)) = GLYPHS.iter().find(|g| g.0 == ch) else {
                continue;
            };
            let ox = x + k as i64 * 8;
            for (r, bits) in rows.iter().enumerate() {
                for col in 0..3 {
                    if bits & (0b100 >> col) != 0 {
                        self.square((ox + col * 2, y + r as i64 * 2), 0, c);
                        self.square((ox + col * 2 + 1, y + r as i64 * 2), 0, c);
                        self.square((ox + col * 2, y + r as i64 * 2 + 1), 0, c);
                        self.square((ox + col * 2 + 1, y + r as i64 * 2 + 1), 0, c);
                    }
                }
            }
        }
    }
}

fn padded_range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 };
    (lo - pad, hi + pad)
}

/// Polyline through `points` (sorted by x) with markers, axes, a light grid
/// and numeric labels at the axis ends.
pub fn line_plot(points: &[(f64, f64)], style: &PlotStyle) -> ImageBuffer {
    let mut canvas = Canvas {
        img: ImageBuffer::filled(style.width, style.height, style.background),
    };
    let m = style.margin as i64;
    let (w, h) = (style.width as i64, style.height as i64);
    let (x_lo, x_hi) = padded_range(points.iter().map(|p| p.0));
    let (y_lo, y_hi) = padded_range(points.iter().map(|p| p.1));
    let to_px = |(x, y): (f64, f64)| {
        let px = m as f64 + (x - x_lo) / (x_hi - x_lo) * (w - 2 * m) as f64;
        let py = (h - m) as f64 - (y - y_lo) / (y_hi - y_lo) * (h - 2 * m) as f64;
        (px.round() as i64, py.round() as i64)
    };

    for k in 0..=4 {
        let gx = m + k * (w - 2 * m) / 4;
        let gy = m + k * (h - 2 * m) / 4;
        canvas.line((gx, m), (gx, h - m), style.grid);
        canvas.line((m, gy), (w - m, gy), style.grid);
    }
    canvas.line((m, h - m), (w - m, h - m), style.axis);
    canvas.line((m, m), (m, h - m), style.axis);

    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    for pair in sorted.windows(2) {
        canvas.line(to_px(pair[0]), to_px(pair[1]), style.line);
    }
    for &p in &sorted {
        canvas.square(to_px(p), 2, style.line);
    }

    canvas.text(m, h - m + 8, &format!("{x_lo:.2}"), style.axis);
    canvas.text(w - m - 32, h - m + 8, &format!("{x_hi:.2}"), style.axis);
    canvas.text(2, h - m - 12, &format!("{y_lo:.1}"), style.axis);
    canvas.text(2, m, &format!("{y_hi:.1}"), style.axis);
    canvas.img
}
