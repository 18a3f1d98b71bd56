//! Row-major image grids used for render outputs and supervision targets.

/// Row-major `height x width` grid. Depth images use `f64` with NaN marking
/// invalid pixels; color images use `[f64; 3]`; masks use `bool`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Pixel coordinates in row-major order.
    pub fn coords(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        (0..self.width * self.height).map(move |i| (i % w, i / w))
    }
}

pub type DepthImage = Grid<f64>;
pub type ColorImage = Grid<[f64; 3]>;
pub type ScalarImage = Grid<f64>;
pub type MaskImage = Grid<bool>;

impl MaskImage {
    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Dilate by a square structuring element of the given radius (pixels).
    pub fn dilate(&self, radius: usize) -> MaskImage {
        let mut out = Grid::filled(self.width, self.height, false);
        for (x, y) in self.coords() {
            if !*self.get(x, y) {
                continue;
            }
            let x0 = x.saturating_sub(radius);
            let y0 = y.saturating_sub(radius);
            let x1 = (x + radius).min(self.width - 1);
            let y1 = (y + radius).min(self.height - 1);
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    out.set(xx, yy, true);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dilate_grows_by_radius() {
        let mut m = MaskImage::filled(5, 5, false);
        m.set(2, 2, true);
        let d = m.dilate(1);
        assert_eq!(d.count_true(), 9);
        assert!(*d.get(1, 1) && *d.get(3, 3));
        assert!(!*d.get(0, 0));
    }

    #[test]
    fn coords_are_row_major() {
        let g = Grid::from_fn(3, 2, |x, y| (x, y));
        let coords: Vec<_> = g.coords().collect();
        assert_eq!(coords[0], (0, 0));
        assert_eq!(coords[1], (1, 0));
        assert_eq!(coords[3], (0, 1));
        assert_eq!(*g.get(2, 1), (2, 1));
    }
}
