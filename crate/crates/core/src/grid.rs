//! Dense per-pixel containers shared by every stage of the pipeline.
//!
//! All maps are row-major with the channel (class or feature) axis innermost,
//! so pixel `k = row * width + col` owns `data[k * depth..(k + 1) * depth]`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Simplex tolerance: 1e-9 at f64, relaxed to a few ulps-per-class for f32.
pub fn simplex_tol<T: Scalar>() -> f64 {
    (T::epsilon().as_f64() * 64.0).max(1e-9)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Degenerate(format!(
                "label map dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "label map {height}x{width} needs {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Result<Self> {
        Self::new(height, width, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, label: u8) {
        self.data[row * self.width + col] = label;
    }

    /// Largest label plus one.
    pub fn class_bound(&self) -> usize {
        self.data.iter().copied().max().map_or(0, |m| m as usize + 1)
    }

    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.data.iter().position(|&l| l as usize >= classes) {
            Some(index) => Err(Error::LabelOutOfRange {
                index,
                label: self.data[index] as usize,
                classes,
            }),
            None => Ok(()),
        }
    }

    pub fn same_shape(&self, other: &LabelMap) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::shape(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// Nearest-neighbour resampling to `height x width`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Result<LabelMap> {
        let mut out = Vec::with_capacity(height * width);
        for r in 0..height {
            let sr = r * self.height / height;
            for c in 0..width {
                let sc = c * self.width / width;
                out.push(self.get(sr, sc));
            }
        }
        LabelMap::new(height, width, out)
    }
}

/// Per-pixel indicator vectors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OneHotMap {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<u8>,
}

impl OneHotMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, k: usize) -> &[u8] {
        &self.data[k * self.classes..(k + 1) * self.classes]
    }

    /// Index of the hot entry at pixel `k`.
    #[inline]
    pub fn hot(&self, k: usize) -> usize {
        self.pixel(k)
            .iter()
            .position(|&v| v == 1)
            .expect("one-hot invariant")
    }

    /// Builds from raw indicators, checking that every pixel has exactly one 1.
    pub fn from_indicators(
        height: usize,
        width: usize,
        classes: usize,
        data: Vec<u8>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || classes == 0 {
            return Err(Error::Degenerate("empty one-hot map".into()));
        }
        if data.len() != height * width * classes {
            return Err(Error::shape("one-hot payload length".to_string()));
        }
        for (k, px) in data.chunks_exact(classes).enumerate() {
            let ones = px.iter().filter(|&&v| v == 1).count();
            let zeros = px.iter().filter(|&&v| v == 0).count();
            if ones != 1 || zeros != classes - 1 {
                return Err(Error::Degenerate(format!("pixel {k} is not one-hot")));
            }
        }
        Ok(OneHotMap {
            height,
            width,
            classes,
            data,
        })
    }

    pub fn argmax(&self) -> LabelMap {
        let data = (0..self.pixels()).map(|k| self.hot(k) as u8).collect();
        LabelMap::new(self.height, self.width, data).expect("dimensions already validated")
    }
}

pub fn one_hot(labels: &LabelMap, classes: usize) -> Result<OneHotMap> {
    if classes == 0 || classes > u8::MAX as usize + 1 {
        return Err(Error::Config(format!("unsupported class count {classes}")));
    }
    labels.check_classes(classes)?;
    let mut data = vec![0u8; labels.len() * classes];
    for (k, &l) in labels.data().iter().enumerate() {
        data[k * classes + l as usize] = 1;
    }
    Ok(OneHotMap {
        height: labels.height(),
        width: labels.width(),
        classes,
        data,
    })
}

/// Per-pixel probability vectors on the simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap<T> {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<T>,
}

impl<T: Scalar> ProbMap<T> {
    /// Validates entries in `[0, 1]` and per-pixel sums of one.
    pub fn new(height: usize, width: usize, classes: usize, data: Vec<T>) -> Result<Self> {
        let map = Self::from_raw(height, width, classes, data)?;
        let tol = simplex_tol::<T>();
        for k in 0..map.pixels() {
            let px = map.pixel(k);
            if px.iter().any(|v| !v.is_finite() || *v < T::zero() || *v > T::one()) {
                return Err(Error::Degenerate(format!(
                    "pixel {k} has an entry outside [0, 1]"
                )));
            }
            let s: T = px.iter().copied().sum();
            if (s.as_f64() - 1.0).abs() > tol {
                return Err(Error::Degenerate(format!("pixel {k} sums to {s}")));
            }
        }
        Ok(map)
    }

    /// Shape checks only; used for intermediates that are on the simplex by
    /// construction (softmax outputs, renormalised refinements).
    pub(crate) fn from_raw(height: usize, width: usize, classes: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || classes == 0 {
            return Err(Error::Degenerate("empty probability map".into()));
        }
        if data.len() != height * width * classes {
            return Err(Error::shape(format!(
                "probability map {height}x{width}x{classes} needs {} entries, got {}",
                height * width * classes,
                data.len()
            )));
        }
        Ok(ProbMap {
            height,
            width,
            classes,
            data,
        })
    }

    pub fn uniform(height: usize, width: usize, classes: usize) -> Result<Self> {
        let v = T::one() / <T as Scalar>::from_usize(classes);
        Self::from_raw(height, width, classes, vec![v; height * width * classes])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, k: usize) -> &[T] {
        &self.data[k * self.classes..(k + 1) * self.classes]
    }

    pub fn argmax(&self) -> LabelMap {
        let data = self
            .data
            .chunks_exact(self.classes)
            .map(|px| argmax_slice(px) as u8)
            .collect();
        LabelMap::new(self.height, self.width, data).expect("dimensions already validated")
    }
}

/// First index of the maximum; NaNs never win.
pub fn argmax_slice<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Degenerate("empty feature map".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "feature map {height}x{width}x{channels} needs {} entries, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature entry {i}")));
        }
        Ok(FeatureMap {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, k: usize) -> &[T] {
        &self.data[k * self.channels..(k + 1) * self.channels]
    }
}
