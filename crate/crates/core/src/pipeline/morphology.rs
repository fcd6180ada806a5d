//! Binary dilation with a square all-ones structuring element.

use crate::error::{Error, Result};
use crate::imaging::Mask;

/// Dilates with a `k × k` square, treating pixels outside the image as 0.
/// Separable: a row pass then a column pass, each with a running count.
pub fn dilate_mask(mask: &Mask, k: usize) -> Result<Mask> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::invalid(format!("dilation kernel must be odd and >= 1, got {k}")));
    }
    let (w, h) = (mask.width(), mask.height());
    let r = k / 2;
    let rows = pass(mask.data(), w, h, r, true);
    let out = pass(&rows, w, h, r, false);
    Mask::from_vec(w, h, out)
}

/// One 1-D max filter of radius `r` along rows or columns.
fn pass(src: &[bool], w: usize, h: usize, r: usize, along_rows: bool) -> Vec<bool> {
    let (n, lines) = if along_rows { (w, h) } else { (h, w) };
    let idx = |line: usize, i: usize| if along_rows { line * w + i } else { i * w + line };
    let mut out = vec![false; w * h];
    for line in 0..lines {
        // count of set pixels in the window [i - r, i + r]
        let mut count = (0..=r.min(n - 1)).filter(|&i| src[idx(line, i)]).count();
        for i in 0..n {
            out[idx(line, i)] = count > 0;
            if i + r + 1 < n && src[idx(line, i + r + 1)] {
                count += 1;
            }
            if i >= r && src[idx(line, i - r)] {
                count -= 1;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel_grows_to_block() {
        let mut m = Mask::new(31, 31);
        m.set(15, 15, true);
        let d = dilate_mask(&m, 15).unwrap();
        assert_eq!(d.count(), 225);
        assert!(d.get(8, 8) && d.get(22, 22) && !d.get(7, 15) && !d.get(15, 23));
    }

    #[test]
    fn corner_pixel_is_clipped() {
        let mut m = Mask::new(10, 10);
        m.set(0, 0, true);
        assert_eq!(dilate_mask(&m, 5).unwrap().count(), 9);
    }

    #[test]
    fn empty_and_identity() {
        let m = Mask::new(9, 4);
        assert!(dilate_mask(&m, 15).unwrap().is_empty());
        let m = Mask::from_fn(9, 4, |x, y| (x * y) % 5 == 1);
        assert_eq!(dilate_mask(&m, 1).unwrap(), m);
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(dilate_mask(&Mask::new(4, 4), 4).is_err());
        assert!(dilate_mask(&Mask::new(4, 4), 0).is_err());
    }

    #[test]
    fn kernel_larger_than_image() {
        let mut m = Mask::new(3, 2);
        m.set(1, 1, true);
        assert_eq!(dilate_mask(&m, 15).unwrap().count(), 6);
    }
}
