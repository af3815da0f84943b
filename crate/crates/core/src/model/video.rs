use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Clips of shape `[B, T, H, W, C]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoBatch<F> {
    frames: Tensor<F>,
}

impl<F: Real> VideoBatch<F> {
    pub fn new(frames: Tensor<F>) -> Result<Self> {
        if frames.rank() != 5 {
            return Err(Error::shape("VideoBatch", frames.shape(), &[0, 0, 0, 0, 0]));
        }
        if let Some(bad) = frames
            .data()
            .iter()
            .find(|x| !(x.as_f64() >= 0.0 && x.as_f64() <= 1.0))
        {
            return Err(Error::invalid(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(VideoBatch { frames })
    }

    /// Stacks `[T, H, W, C]` clips.
    pub fn from_clips(clips: &[Tensor<F>]) -> Result<Self> {
        Self::new(Tensor::stack(clips)?)
    }

    pub fn frames(&self) -> &Tensor<F> {
        &self.frames
    }

    /// `(B, T, H, W, C)`.
    pub fn dims(&self) -> (usize, usize, usize, usize, usize) {
        let s = self.frames.shape();
        (s[0], s[1], s[2], s[3], s[4])
    }

    pub fn batch(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[1]
    }

    /// Keeps the listed frame indices of every clip.
    pub fn select_frames(&self, indices: &[usize]) -> Result<Self> {
        let (b, t, h, w, c) = self.dims();
        if indices.is_empty() {
            return Err(Error::invalid("no frames selected"));
        }
        let frame = h * w * c;
        let mut data = Vec::with_capacity(b * indices.len() * frame);
        for clip in 0..b {
            for &i in indices {
                if i >= t {
                    return Err(Error::invalid(format!("frame {i} out of range for {t} frames")));
                }
                let start = (clip * t + i) * frame;
                data.extend_from_slice(&self.frames.data()[start..start + frame]);
            }
        }
        Self::new(Tensor::new(vec![b, indices.len(), h, w, c], data)?)
    }
}

/// Non-overlapping patches in row-major grid order. `[M, H, W, C]` becomes
/// `[M, N, ph*pw*C]`; each patch vector is row-major over `(y, x, c)`.
/// Rows and columns beyond the last whole patch are dropped.
pub fn extract_patches<F: Real>(frames: &Tensor<F>, ph: usize, pw: usize) -> Result<Tensor<F>> {
    let s = frames.shape();
    if s.len() != 4 || ph == 0 || pw == 0 || s[1] < ph || s[2] < pw {
        return Err(Error::shape("extract_patches", s, &[ph, pw]));
    }
    let (m, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / ph, w / pw);
    let dim = ph * pw * c;
    let src = frames.data();
    let mut out = Vec::with_capacity(m * gh * gw * dim);
    for f in 0..m {
        for gy in 0..gh {
            for gx in 0..gw {
                for y in 0..ph {
                    let row = ((f * h + gy * ph + y) * w + gx * pw) * c;
                    out.extend_from_slice(&src[row..row + pw * c]);
                }
            }
        }
    }
    Tensor::new(vec![m, gh * gw, dim], out)
}

/// `[B*T, N, d]` to `[B, T*N, d]`; frame-major order is preserved.
pub fn flatten_temporal<F: Real>(tokens: &Tensor<F>, batch: usize) -> Result<Tensor<F>> {
    let s = tokens.shape();
    if s.len() != 3 || batch == 0 || s[0] % batch != 0 {
        return Err(Error::shape("flatten_temporal", s, &[batch]));
    }
    tokens.clone().reshape(vec![batch, s[0] / batch * s[1], s[2]])
}

/// Inverse of [`flatten_temporal`].
pub fn unflatten_temporal<F: Real>(tokens: &Tensor<F>, frames: usize) -> Result<Tensor<F>> {
    let s = tokens.shape();
    if s.len() != 3 || frames == 0 || s[1] % frames != 0 {
        return Err(Error::shape("unflatten_temporal", s, &[frames]));
    }
    tokens.clone().reshape(vec![s[0] * frames, s[1] / frames, s[2]])
}

/// Encoder output for a batch of clips, `[B*T, N, d]`, tagged with the
/// fingerprint of the encoder settings that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTokenEmbeddings<F> {
    pub tokens: Tensor<F>,
    pub frames: usize,
    pub fingerprint: u64,
}

impl<F: Real> FrameTokenEmbeddings<F> {
    pub fn batch(&self) -> usize {
        self.tokens.shape()[0] / self.frames
    }

    /// Concatenates per-clip embeddings along the batch axis.
    pub fn concat(parts: &[FrameTokenEmbeddings<F>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("no embeddings to concatenate"))?;
        let s = first.tokens.shape().to_vec();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.frames != first.frames || p.fingerprint != first.fingerprint || p.tokens.shape()[1..] != s[1..] {
                return Err(Error::invalid("embeddings disagree on frames, shape or fingerprint"));
            }
            rows += p.tokens.shape()[0];
            data.extend_from_slice(p.tokens.data());
        }
        Ok(FrameTokenEmbeddings {
            tokens: Tensor::new(vec![rows, s[1], s[2]], data)?,
            frames: first.frames,
            fingerprint: first.fingerprint,
        })
    }

    /// Embeddings for one clip.
    pub fn clip(&self, index: usize) -> Result<Self> {
        let s = self.tokens.shape();
        if index >= self.batch() {
            return Err(Error::invalid(format!("clip {index} out of range")));
        }
        let per = self.frames * s[1] * s[2];
        Ok(FrameTokenEmbeddings {
            tokens: Tensor::new(
                vec![self.frames, s[1], s[2]],
                self.tokens.data()[index * per..(index + 1) * per].to_vec(),
            )?,
            frames: self.frames,
            fingerprint: self.fingerprint,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patches_follow_row_major_grid() {
        let frames = Tensor::<f32>::from_fn(vec![1, 4, 4, 1], |i| i as f32).unwrap();
        let p = extract_patches(&frames, 2, 2).unwrap();
        assert_eq!(p.shape(), &[1, 4, 4]);
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&p.data()[12..], &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn partial_patches_are_dropped() {
        let frames = Tensor::<f32>::zeros(vec![2, 33, 33, 3]).unwrap();
        assert_eq!(extract_patches(&frames, 16, 16).unwrap().shape(), &[2, 4, 768]);
    }

    #[test]
    fn flatten_round_trips() {
        let t = Tensor::<f32>::from_fn(vec![6, 4, 2], |i| i as f32).unwrap();
        let f = flatten_temporal(&t, 2).unwrap();
        assert_eq!(f.shape(), &[2, 12, 2]);
        assert_eq!(unflatten_temporal(&f, 3).unwrap(), t);
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        let t = Tensor::<f32>::full(vec![1, 1, 2, 2, 1], 1.5).unwrap();
        assert!(VideoBatch::new(t).is_err());
    }
}
