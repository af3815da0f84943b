use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `T` indices into a clip of `F` frames: `floor((i + 0.5) * F / T)`.
/// Indices repeat when `T > F`.
pub fn uniform_sample_frames(num_frames: usize, t: usize) -> Result<Vec<usize>> {
    if num_frames == 0 || t == 0 {
        return Err(Error::invalid("frame sampling needs F >= 1 and T >= 1"));
    }
    Ok((0..t).map(|i| (2 * i + 1) * num_frames / (2 * t)).collect())
}

/// Crops `[..., H, W, C]` to `[..., h, w, C]` around the center. When the
/// margin is odd the extra row or column is removed from the bottom or right,
/// so the kept window leans toward the top-left.
pub fn center_crop<F: Real>(frames: &Tensor<F>, h: usize, w: usize) -> Result<Tensor<F>> {
    let s = frames.shape();
    let r = s.len();
    if r < 3 {
        return Err(Error::shape("center_crop", s, &[h, w]));
    }
    let (sh, sw, c) = (s[r - 3], s[r - 2], s[r - 1]);
    if h == 0 || w == 0 || h > sh || w > sw {
        return Err(Error::invalid(format!("cannot crop {sh}x{sw} to {h}x{w}")));
    }
    if (h, w) == (sh, sw) {
        return Ok(frames.clone());
    }
    let top = (sh - h) / 2;
    let left = (sw - w) / 2;
    let lead: usize = s[..r - 3].iter().product();
    let src = frames.data();
    let mut out = Vec::with_capacity(lead * h * w * c);
    for f in 0..lead {
        for y in 0..h {
            let row = ((f * sh + top + y) * sw + left) * c;
            out.extend_from_slice(&src[row..row + w * c]);
        }
    }
    let mut shape = s[..r - 3].to_vec();
    shape.extend_from_slice(&[h, w, c]);
    Tensor::new(shape, out)
}

/// Samples `t` frames from a `[F, H, W, C]` clip and center-crops them.
pub fn prepare_clip<F: Real>(clip: &Tensor<F>, t: usize, h: usize, w: usize) -> Result<Tensor<F>> {
    let s = clip.shape();
    if s.len() != 4 {
        return Err(Error::shape("prepare_clip", s, &[0, 0, 0, 0]));
    }
    let frame = s[1] * s[2] * s[3];
    let mut data = Vec::with_capacity(t * frame);
    for i in uniform_sample_frames(s[0], t)? {
        data.extend_from_slice(&clip.data()[i * frame..(i + 1) * frame]);
    }
    center_crop(&Tensor::new(vec![t, s[1], s[2], s[3]], data)?, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_examples() {
        assert_eq!(uniform_sample_frames(8, 8).unwrap(), (0..8).collect::<Vec<_>>());
        assert_eq!(uniform_sample_frames(16, 8).unwrap(), vec![1, 3, 5, 7, 9, 11, 13, 15]);
        assert_eq!(uniform_sample_frames(4, 8).unwrap(), vec![0, 0, 1, 1, 2, 2, 3, 3]);
        assert_eq!(uniform_sample_frames(16, 1).unwrap(), vec![8]);
        assert!(uniform_sample_frames(0, 1).is_err());
    }

    #[test]
    fn crop_removes_border() {
        let t = Tensor::<f32>::from_fn(vec![36, 36, 1], |i| i as f32).unwrap();
        let c = center_crop(&t, 32, 32).unwrap();
        assert_eq!(c.shape(), &[32, 32, 1]);
        assert_eq!(c.data()[0], (2 * 36 + 2) as f32);
        assert_eq!(center_crop(&t, 36, 36).unwrap(), t);
        assert!(center_crop(&t, 37, 10).is_err());
    }

    #[test]
    fn odd_margin_keeps_top_left() {
        let t = Tensor::<f32>::from_fn(vec![3, 3, 1], |i| i as f32).unwrap();
        assert_eq!(center_crop(&t, 2, 2).unwrap().data(), &[0.0, 1.0, 3.0, 4.0]);
    }
}
