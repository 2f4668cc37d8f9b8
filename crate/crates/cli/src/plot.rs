//! Minimal raster charts. Values go to the CSV next to each PNG; the pictures
//! only need to show shape, so there are no glyphs.

pub const WIDTH: usize = 480;
pub const HEIGHT: usize = 300;
const MARGIN: usize = 24;

const BACKGROUND: [u8; 3] = [255, 255, 255];
const AXIS: [u8; 3] = [40, 40, 40];
const GRID: [u8; 3] = [225, 225, 225];
pub const PALETTE: [[u8; 3]; 4] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [255, 127, 14]];

pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: BACKGROUND.repeat(width * height),
        }
    }

    pub fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return;
        }
        let o = (y as usize * self.width + x as usize) * 3;
        self.rgb[o..o + 3].copy_from_slice(&color);
    }

    pub fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.put(x, y, color);
            }
        }
    }

    /// Bresenham, two pixels thick.
    pub fn line(&mut self, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), color: [u8; 3]) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.put(x0, y0, color);
            self.put(x0, y0 + 1, color);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }
}

/// Maps data coordinates into the plot area.
struct Frame {
    x_range: (f64, f64),
    y_range: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64, y: f64) -> (i64, i64) {
        let w = (WIDTH - 2 * MARGIN) as f64;
        let h = (HEIGHT - 2 * MARGIN) as f64;
        let span = |(lo, hi): (f64, f64)| if hi > lo { hi - lo } else { 1.0 };
        let fx = (x - self.x_range.0) / span(self.x_range);
        let fy = (y - self.y_range.0) / span(self.y_range);
        (
            MARGIN as i64 + (fx * w).round() as i64,
            (HEIGHT - MARGIN) as i64 - (fy * h).round() as i64,
        )
    }

    fn axes(&self, c: &mut Canvas) {
        for i in 1..=4 {
            let y = self.y_range.0 + (self.y_range.1 - self.y_range.0) * i as f64 / 4.0;
            let (x0, py) = self.px(self.x_range.0, y);
            let (x1, _) = self.px(self.x_range.1, y);
            c.fill_rect(x0, py, x1, py, GRID);
        }
        let origin = self.px(self.x_range.0, self.y_range.0);
        c.line(origin, self.px(self.x_range.1, self.y_range.0), AXIS);
        c.line(origin, self.px(self.x_range.0, self.y_range.1), AXIS);
    }
}

/// One bar per value, heights relative to the maximum.
pub fn bar_chart(values: &[f64]) -> Canvas {
    let mut c = Canvas::new(WIDTH, HEIGHT);
    let top = values.iter().cloned().fold(0.0, f64::max).max(1e-12);
    let frame = Frame {
        x_range: (0.0, values.len().max(1) as f64),
        y_range: (0.0, top),
    };
    frame.axes(&mut c);
    for (i, &v) in values.iter().enumerate() {
        let (x0, y0) = frame.px(i as f64 + 0.1, 0.0);
        let (x1, y1) = frame.px(i as f64 + 0.9, v);
        if v > 0.0 {
            c.fill_rect(x0, y0 - 1, x1, y1, PALETTE[0]);
        }
    }
    c
}

/// Polylines over a shared frame; series are colored in palette order.
pub fn line_chart(series: &[Vec<(f64, f64)>], y_range: Option<(f64, f64)>) -> Canvas {
    let mut c = Canvas::new(WIDTH, HEIGHT);
    let pts = series.iter().flatten();
    let fold = |f: fn(f64, f64) -> f64, init: f64, sel: fn(&(f64, f64)) -> f64| pts.clone().map(sel).fold(init, f);
    let x_range = (fold(f64::min, f64::INFINITY, |p| p.0), fold(f64::max, f64::NEG_INFINITY, |p| p.0));
    let y_range = y_range.unwrap_or((
        fold(f64::min, f64::INFINITY, |p| p.1).min(0.0),
        fold(f64::max, f64::NEG_INFINITY, |p| p.1),
    ));
    if !x_range.0.is_finite() {
        return c;
    }
    let frame = Frame { x_range, y_range };
    frame.axes(&mut c);
    for (s, points) in series.iter().enumerate() {
        let color = PALETTE[s % PALETTE.len()];
        for w in points.windows(2) {
            c.line(frame.px(w[0].0, w[0].1), frame.px(w[1].0, w[1].1), color);
        }
        if let [only] = points.as_slice() {
            let (x, y) = frame.px(only.0, only.1);
            c.fill_rect(x - 2, y - 2, x + 2, y + 2, color);
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(c: &Canvas, color: [u8; 3]) -> usize {
        c.rgb.chunks(3).filter(|p| *p == color).count()
    }

    #[test]
    fn taller_bars_paint_more() {
        let a = bar_chart(&[1.0, 0.0, 0.0]);
        let b = bar_chart(&[1.0, 1.0, 0.0]);
        assert!(count(&b, PALETTE[0]) > count(&a, PALETTE[0]));
        assert!(count(&a, PALETTE[0]) > 0);
    }

    #[test]
    fn empty_inputs_do_not_panic() {
        bar_chart(&[]);
        line_chart(&[], None);
        line_chart(&[vec![(1.0, 1.0)]], None);
    }

    #[test]
    fn lines_use_series_colors() {
        let c = line_chart(&[vec![(0.0, 0.0), (1.0, 1.0)], vec![(0.0, 1.0), (1.0, 0.0)]], Some((0.0, 1.0)));
        assert!(count(&c, PALETTE[0]) > 0 && count(&c, PALETTE[1]) > 0);
    }
}
