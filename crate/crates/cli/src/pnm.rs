//! Binary 8-bit PGM (`P5`) and PPM (`P6`) output.

/// Grayscale image from values in `[0, 1]`, clamped.
pub fn pgm(width: usize, height: usize, values: &[f32]) -> Vec<u8> {
    assert_eq!(values.len(), width * height, "pixel count");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| to_byte(v)));
    out
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// An RGB canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pixels: Vec<[u8; 3]>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![[0; 3]; width * height],
        }
    }

    /// Pastes a grayscale block with its top-left corner at `(x0, y0)`.
    pub fn gray(&mut self, x0: usize, y0: usize, width: usize, values: &[f32]) {
        for (i, &v) in values.iter().enumerate() {
            let b = to_byte(v);
            self.set((x0 + i % width) as i64, (y0 + i / width) as i64, [b, b, b]);
        }
    }

    pub fn set(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = rgb;
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    /// Bresenham line, endpoints included.
    pub fn line(&mut self, from: (i64, i64), to: (i64, i64), rgb: [u8; 3]) {
        let (mut x, mut y) = from;
        let (dx, dy) = ((to.0 - x).abs(), -(to.1 - y).abs());
        let (sx, sy) = ((to.0 - x).signum(), (to.1 - y).signum());
        let mut err = dx + dy;
        loop {
            self.set(x, y, rgb);
            if (x, y) == to {
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

    pub fn square(&mut self, centre: (i64, i64), radius: i64, rgb: [u8; 3]) {
        for y in -radius..=radius {
            for x in -radius..=radius {
                self.set(centre.0 + x, centre.1 + y, rgb);
            }
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().flatten());
        out
    }
}

/// Distinct saturated colour for index `i`.
pub fn palette(i: usize) -> [u8; 3] {
    const COLOURS: [[u8; 3]; 8] = [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
    ];
    COLOURS[i % COLOURS.len()]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_clamping() {
        let bytes = pgm(2, 1, &[-1.0, 2.0]);
        assert_eq!(bytes, b"P5\n2 1\n255\n\x00\xff");
    }

    #[test]
    fn line_reaches_both_ends() {
        let mut c = Canvas::new(5, 4);
        c.line((0, 3), (4, 0), [9, 9, 9]);
        assert_eq!(c.get(0, 3), [9, 9, 9]);
        assert_eq!(c.get(4, 0), [9, 9, 9]);
        assert_eq!(&c.to_ppm()[..11], b"P6\n5 4\n255\n");
        assert_eq!(c.to_ppm().len(), 11 + 5 * 4 * 3);
    }
}
