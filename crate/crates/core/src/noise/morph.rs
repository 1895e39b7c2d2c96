//! Binary-mask helpers for ellipse noise: connected components, covering
//! ellipses and disk-shaped dilation/erosion.

/// Row-major boolean mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    #[inline]
    fn at(&self, r: isize, c: isize) -> Option<bool> {
        if r < 0 || c < 0 || r as usize >= self.height || c as usize >= self.width {
            None
        } else {
            Some(self.data[r as usize * self.width + c as usize])
        }
    }
}

/// 8-connected components of `mask`, each as a sorted list of pixel indices.
/// Components are ordered by their first pixel in raster order.
pub fn components(mask: &Mask) -> Vec<Vec<usize>> {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask.data[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        seen[start] = true;
        stack.push(start);
        while let Some(k) = stack.pop() {
            comp.push(k);
            let (r, c) = ((k / w) as isize, (k % w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r + dr, c + dc);
                    if mask.at(nr, nc) == Some(true) {
                        let nk = nr as usize * w + nc as usize;
                        if !seen[nk] {
                            seen[nk] = true;
                            stack.push(nk);
                        }
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Second-moment ellipse of the component, inflated until every component
/// pixel centre lies inside it, rasterised onto an `height x width` mask.
pub fn covering_ellipse(pixels: &[usize], height: usize, width: usize) -> Mask {
    let n = pixels.len() as f64;
    let coords: Vec<(f64, f64)> = pixels
        .iter()
        .map(|&k| ((k / width) as f64, (k % width) as f64))
        .collect();
    let my = coords.iter().map(|p| p.0).sum::<f64>() / n;
    let mx = coords.iter().map(|p| p.1).sum::<f64>() / n;
    // Each pixel is a unit square: add its own variance so lines and single
    // pixels still give an invertible covariance.
    let mut syy = 1.0 / 12.0;
    let mut sxx = 1.0 / 12.0;
    let mut sxy = 0.0;
    for &(y, x) in &coords {
        syy += (y - my) * (y - my) / n;
        sxx += (x - mx) * (x - mx) / n;
        sxy += (y - my) * (x - mx) / n;
    }
    let det = syy * sxx - sxy * sxy;
    let (iyy, ixx, ixy) = (sxx / det, syy / det, -sxy / det);
    let maha = |y: f64, x: f64| {
        let (dy, dx) = (y - my, x - mx);
        iyy * dy * dy + 2.0 * ixy * dy * dx + ixx * dx * dx
    };
    let scale = coords
        .iter()
        .map(|&(y, x)| maha(y, x))
        .fold(0.0f64, f64::max)
        * (1.0 + 1e-9)
        + 1e-12;
    let mut mask = Mask::new(height, width);
    for r in 0..height {
        for c in 0..width {
            mask.data[r * width + c] = maha(r as f64, c as f64) <= scale;
        }
    }
    mask
}

fn disk(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut offs = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                offs.push((dy, dx));
            }
        }
    }
    offs
}

/// Disk dilation; pixels outside the image never contribute.
pub fn dilate(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let offs = disk(radius);
    let mut out = Mask::new(mask.height, mask.width);
    for r in 0..mask.height as isize {
        for c in 0..mask.width as isize {
            out.data[r as usize * mask.width + c as usize] =
                offs.iter().any(|&(dy, dx)| mask.at(r + dy, c + dx) == Some(true));
        }
    }
    out
}

/// Disk erosion; the image border is neutral (out-of-image neighbours are
/// ignored rather than treated as background).
pub fn erode(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let offs = disk(radius);
    let mut out = Mask::new(mask.height, mask.width);
    for r in 0..mask.height as isize {
        for c in 0..mask.width as isize {
            out.data[r as usize * mask.width + c as usize] =
                offs.iter().all(|&(dy, dx)| mask.at(r + dy, c + dx) != Some(false));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn from_rows(rows: &[&str]) -> Mask {
        let h = rows.len();
        let w = rows[0].len();
        let mut m = Mask::new(h, w);
        for (r, row) in rows.iter().enumerate() {
            for (c, ch) in row.chars().enumerate() {
                m.data[r * w + c] = ch == '#';
            }
        }
        m
    }

    #[test]
    fn diagonal_pixels_are_connected() {
        let m = from_rows(&["#...", ".#..", "...#", "...#"]);
        let comps = components(&m);
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[0], vec![0, 5]);
    }

    #[test]
    fn ellipse_covers_component() {
        let m = from_rows(&["......", ".###..", ".####.", "..##..", "......"]);
        let comp = &components(&m)[0];
        let e = covering_ellipse(comp, 5, 6);
        assert!(comp.iter().all(|&k| e.data[k]));
        assert!(e.count() >= comp.len());
    }

    #[test]
    fn single_pixel_ellipse() {
        let e = covering_ellipse(&[7], 4, 4);
        assert!(e.data[7]);
        assert_eq!(e.count(), 1);
    }

    #[test]
    fn dilate_erode_radius_one() {
        let m = from_rows(&[".....", ".....", "..#..", ".....", "....."]);
        let d = dilate(&m, 1);
        assert_eq!(d.count(), 5);
        assert_eq!(erode(&d, 1).count(), 1);
        assert_eq!(dilate(&m, 0), m);
    }
}
