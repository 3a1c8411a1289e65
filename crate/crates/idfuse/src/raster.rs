//! Boolean spatial rasters: identity location masks and their per-scale
//! downscaled variants.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RasterError {
    #[error("target extent {target} does not divide raster extent {extent}")]
    NonDivisible { extent: usize, target: usize },
    #[error("data length {len} does not match {h}x{w}")]
    BadDataLength { len: usize, h: usize, w: usize },
}

/// Boolean raster in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolRaster {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl BoolRaster {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self, RasterError> {
        if data.len() != h * w {
            return Err(RasterError::BadDataLength {
                len: data.len(),
                h,
                w,
            });
        }
        Ok(Self { h, w, data })
    }

    pub fn falses(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    pub fn trues(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![true; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn cells(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    /// Flat row-major cell value; cell index doubles as the attention query
    /// index at this scale.
    #[inline]
    pub fn get_flat(&self, i: usize) -> bool {
        self.data[i]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&v| v)
    }

    pub fn intersects(&self, other: &BoolRaster) -> bool {
        self.data
            .iter()
            .zip(&other.data)
            .any(|(&a, &b)| a && b)
    }

    pub fn union(&self, other: &BoolRaster) -> BoolRaster {
        assert_eq!((self.h, self.w), (other.h, other.w));
        BoolRaster {
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a || b)
                .collect(),
        }
    }

    /// Downscale to `target x target` by any-pooling: an output cell is true
    /// iff any covered input cell is true, so a nonempty mask stays nonempty
    /// at every scale.
    pub fn downscale_to(&self, target: usize) -> Result<BoolRaster, RasterError> {
        for extent in [self.h, self.w] {
            if target == 0 || extent % target != 0 {
                return Err(RasterError::NonDivisible { extent, target });
            }
        }
        let fy = self.h / target;
        let fx = self.w / target;
        let mut out = BoolRaster::falses(target, target);
        for y in 0..target {
            for x in 0..target {
                let mut v = false;
                'cover: for dy in 0..fy {
                    for dx in 0..fx {
                        if self.get(y * fy + dy, x * fx + dx) {
                            v = true;
                            break 'cover;
                        }
                    }
                }
                out.set(y, x, v);
            }
        }
        Ok(out)
    }
}
