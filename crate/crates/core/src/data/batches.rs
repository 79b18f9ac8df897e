use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::pianoroll::PianoRoll;
use crate::error::{Error, Result};
use crate::nn::{BatchSource, Tensor};
use crate::zoo::N_KEYS;

pub const DEFAULT_BATCH_SIZE: usize = 256;

/// Frames of several tracks addressable as one pool. Context windows never
/// cross track boundaries: edge frames are replicated instead.
#[derive(Debug, Clone)]
pub struct FrameDataset {
    inputs: Vec<Array2<f64>>,
    targets: Vec<Array2<u8>>,
    index: Vec<(u32, u32)>,
    bins: usize,
}

impl FrameDataset {
    pub fn new(pairs: Vec<(Array2<f64>, Array2<u8>)>) -> Result<Self> {
        let bins = pairs.first().map(|(s, _)| s.ncols()).unwrap_or(0);
        let mut inputs = Vec::with_capacity(pairs.len());
        let mut targets = Vec::with_capacity(pairs.len());
        let mut index = Vec::new();
        for (k, (spec, roll)) in pairs.into_iter().enumerate() {
            if spec.nrows() != roll.nrows() {
                return Err(Error::Alignment {
                    spec_frames: spec.nrows(),
                    roll_frames: roll.nrows(),
                });
            }
            if spec.ncols() != bins {
                return Err(Error::shape(format!("track {k} bins"), &[bins], &[spec.ncols()]));
            }
            if roll.ncols() != N_KEYS {
                return Err(Error::shape(format!("track {k} piano roll"), &[N_KEYS], &[roll.ncols()]));
            }
            index.extend((0..spec.nrows() as u32).map(|t| (k as u32, t)));
            inputs.push(spec);
            targets.push(roll);
        }
        Ok(Self {
            inputs,
            targets,
            index,
            bins,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn n_tracks(&self) -> usize {
        self.inputs.len()
    }

    pub fn track_len(&self, track: usize) -> usize {
        self.inputs[track].nrows()
    }

    pub fn track_targets(&self, track: usize) -> &Array2<u8> {
        &self.targets[track]
    }

    /// Writes the `context x bins` window centred on frame `t` into `out`.
    fn write_patch(&self, track: usize, t: usize, context: usize, out: &mut [f64]) {
        let spec = &self.inputs[track];
        let last = spec.nrows() as isize - 1;
        let half = (context / 2) as isize;
        for (r, row) in out.chunks_mut(self.bins).enumerate() {
            let src = (t as isize + r as isize - half).clamp(0, last) as usize;
            for (o, v) in row.iter_mut().zip(spec.row(src)) {
                *o = *v;
            }
        }
    }

    fn gather(&self, ids: &[(u32, u32)], context: usize) -> (Tensor, Tensor) {
        let plen = context * self.bins;
        let mut x = vec![0.0; ids.len() * plen];
        let mut y = vec![0.0; ids.len() * N_KEYS];
        for ((&(k, t), xs), ys) in ids.iter().zip(x.chunks_mut(plen)).zip(y.chunks_mut(N_KEYS)) {
            self.write_patch(k as usize, t as usize, context, xs);
            for (o, v) in ys.iter_mut().zip(self.targets[k as usize].row(t as usize)) {
                *o = f64::from(*v);
            }
        }
        (
            Tensor::from_vec(&[ids.len(), 1, context, self.bins], x).expect("sized buffer"),
            Tensor::from_vec(&[ids.len(), N_KEYS], y).expect("sized buffer"),
        )
    }

    /// Mini-batches covering every frame exactly once. With a seed the frame
    /// order is a uniform shuffle; without one it is track-major.
    pub fn batches(&self, context: usize, batch_size: usize, seed: Option<u64>) -> Result<Batches<'_>> {
        if context == 0 || context.is_multiple_of(2) {
            return Err(Error::Config(format!("context must be odd, got {context}")));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let mut order = self.index.clone();
        if let Some(seed) = seed {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        Ok(Batches {
            data: self,
            order,
            pos: 0,
            context,
            batch_size,
        })
    }

    /// All frames of one track in order, as one input tensor.
    pub fn track_inputs(&self, track: usize, context: usize) -> Tensor {
        let ids: Vec<(u32, u32)> = (0..self.track_len(track) as u32).map(|t| (track as u32, t)).collect();
        self.gather(&ids, context).0
    }

    /// Ordered input batches for batch-norm statistics and prediction.
    pub fn input_source(&self, context: usize, batch_size: usize) -> InputSource<'_> {
        InputSource {
            data: self,
            context,
            batch_size,
        }
    }
}

pub struct Batches<'a> {
    data: &'a FrameDataset,
    order: Vec<(u32, u32)>,
    pos: usize,
    context: usize,
    batch_size: usize,
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Tensor);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let out = self.data.gather(&self.order[self.pos..end], self.context);
        self.pos = end;
        Some(out)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (n, Some(n))
    }
}

impl ExactSizeIterator for Batches<'_> {}

pub struct InputSource<'a> {
    data: &'a FrameDataset,
    context: usize,
    batch_size: usize,
}

impl BatchSource for InputSource<'_> {
    fn for_each_batch(&self, f: &mut dyn FnMut(&Tensor) -> Result<()>) -> Result<()> {
        for (x, _) in self.data.batches(self.context, self.batch_size, None)? {
            f(&x)?;
        }
        Ok(())
    }
}

/// Single-track convenience wrapper around `FrameDataset::batches`.
pub fn make_batches(
    spectrogram: &Array2<f64>,
    roll: &PianoRoll,
    context: usize,
    batch_size: usize,
    seed: Option<u64>,
) -> Result<Vec<(Tensor, Tensor)>> {
    let ds = FrameDataset::new(vec![(spectrogram.clone(), roll.frames.clone())])?;
    Ok(ds.batches(context, batch_size, seed)?.collect())
}
