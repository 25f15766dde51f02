//! Loss and DSC curves rasterized without a plotting library.
//!
//! Left panel: loss (train blue, validation orange), y from 0 to the maximum.
//! Right panel: macro-DSC on a fixed 0..1 axis.

use crate::error::{Error, Result};
use crate::preprocess::Image;

use super::run::EpochLog;

const PANEL_W: usize = 360;
const PANEL_H: usize = 260;
const MARGIN: usize = 24;
const TRAIN: [u8; 3] = [31, 119, 180];
const VAL: [u8; 3] = [255, 127, 14];
const AXIS: [u8; 3] = [60, 60, 60];
const GRID: [u8; 3] = [225, 225, 225];

struct Panel<'a> {
    img: &'a mut Image,
    x0: usize,
    y0: usize,
}

impl Panel<'_> {
    fn dot(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.img.width() && (y as usize) < self.img.height() {
            self.img.set(y as usize, x as usize, rgb);
        }
    }

    /// Maps (fraction of x range, fraction of y range) to pixels.
    fn at(&self, fx: f64, fy: f64) -> (i64, i64) {
        let x = self.x0 as f64 + fx * (PANEL_W - 1) as f64;
        let y = (self.y0 + PANEL_H - 1) as f64 - fy * (PANEL_H - 1) as f64;
        (x.round() as i64, y.round() as i64)
    }

    fn line(&mut self, a: (i64, i64), b: (i64, i64), rgb: [u8; 3]) {
        let (mut x, mut y) = a;
        let dx = (b.0 - x).abs();
        let dy = -(b.1 - y).abs();
        let sx = if x < b.0 { 1 } else { -1 };
        let sy = if y < b.1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.dot(x, y, rgb);
            self.dot(x, y + 1, rgb);
            if (x, y) == b {
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

    fn frame(&mut self) {
        for q in 1..4 {
            let f = q as f64 / 4.0;
            let (a, b) = (self.at(0.0, f), self.at(1.0, f));
            self.line(a, b, GRID);
        }
        let (o, r, t) = (self.at(0.0, 0.0), self.at(1.0, 0.0), self.at(0.0, 1.0));
        self.line(o, r, AXIS);
        self.line(o, t, AXIS);
    }

    fn series(&mut self, ys: &[Option<f64>], y_max: f64, rgb: [u8; 3]) {
        let n = ys.len();
        let fx = |i: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
        let mut prev = None;
        for (i, y) in ys.iter().enumerate() {
            let Some(y) = y.filter(|v| v.is_finite()) else {
                prev = None;
                continue;
            };
            let p = self.at(fx(i), (y / y_max).clamp(0.0, 1.0));
            match prev {
                Some(q) => self.line(q, p, rgb),
                None => self.dot(p.0, p.1, rgb),
            }
            prev = Some(p);
        }
    }
}

pub fn curves(log: &[EpochLog]) -> Result<Image> {
    if log.is_empty() {
        return Err(Error::validation("no epochs to plot"));
    }
    let mut img = Image::filled(PANEL_H + 2 * MARGIN, 2 * PANEL_W + 3 * MARGIN, [255; 3]);
    let train_loss: Vec<_> = log.iter().map(|e| Some(e.train_loss)).collect();
    let val_loss: Vec<_> = log.iter().map(|e| e.val_loss).collect();
    let loss_max = train_loss
        .iter()
        .chain(&val_loss)
        .flatten()
        .filter(|v| v.is_finite())
        .fold(0.0f64, |a, &b| a.max(b));
    let loss_max = if loss_max > 0.0 { loss_max } else { 1.0 };

    let mut left = Panel {
        img: &mut img,
        x0: MARGIN,
        y0: MARGIN,
    };
    left.frame();
    left.series(&train_loss, loss_max, TRAIN);
    left.series(&val_loss, loss_max, VAL);

    let mut right = Panel {
        img: &mut img,
        x0: 2 * MARGIN + PANEL_W,
        y0: MARGIN,
    };
    right.frame();
    right.series(&log.iter().map(|e| Some(e.train_dsc)).collect::<Vec<_>>(), 1.0, TRAIN);
    right.series(&log.iter().map(|e| e.val_dsc).collect::<Vec<_>>(), 1.0, VAL);
    Ok(img)
}
