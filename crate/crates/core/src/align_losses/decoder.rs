use std::rc::Rc;

use ndarray::Array3;

use crate::autodiff::{Graph, Mat, Var, ZERO_ROW};
use crate::config::{pixel_frames_for, ModelConfig};
use crate::dit::{BoundParams, Initializer, ParamStore};
use crate::error::{LabError, Result};
use crate::grounding::LatentMap;

/// Upsampling stage: temporal x2 (frame 0 passthrough), spatial x`factor`,
/// then a 3x3 convolution with tanh.
#[derive(Clone, Debug, PartialEq)]
struct Stage {
    frames_in: usize,
    height_in: usize,
    width_in: usize,
    factor: usize,
    gather: Rc<Vec<u32>>,
    im2col: Rc<Vec<u32>>,
}

impl Stage {
    fn new(frames_in: usize, height_in: usize, width_in: usize, factor: usize) -> Self {
        let (f_out, h_out, w_out) = (
            1 + 2 * (frames_in - 1),
            height_in * factor,
            width_in * factor,
        );
        let mut gather = Vec::with_capacity(f_out * h_out * w_out);
        for f in 0..f_out {
            let src_f = f.div_ceil(2);
            for y in 0..h_out {
                for x in 0..w_out {
                    let src = (src_f * height_in + y / factor) * width_in + x / factor;
                    gather.push(src as u32);
                }
            }
        }
        let mut im2col = Vec::with_capacity(f_out * h_out * w_out * 9);
        for f in 0..f_out {
            for y in 0..h_out as isize {
                for x in 0..w_out as isize {
                    for dy in -1..=1isize {
                        for dx in -1..=1isize {
                            let (yy, xx) = (y + dy, x + dx);
                            if yy < 0 || xx < 0 || yy >= h_out as isize || xx >= w_out as isize {
                                im2col.push(ZERO_ROW);
                            } else {
                                let idx = (f * h_out + yy as usize) * w_out + xx as usize;
                                im2col.push(idx as u32);
                            }
                        }
                    }
                }
            }
        }
        Self {
            frames_in,
            height_in,
            width_in,
            factor,
            gather: Rc::new(gather),
            im2col: Rc::new(im2col),
        }
    }

    fn out_dims(&self) -> (usize, usize, usize) {
        (
            1 + 2 * (self.frames_in - 1),
            self.height_in * self.factor,
            self.width_in * self.factor,
        )
    }
}

/// Temporal-causal upsampler from a latent-grid map to per-pixel mask
/// probabilities, `1 + 4 (F - 1)` frames out of `F` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct CausalDecoder {
    latent: (usize, usize, usize),
    channels: usize,
    gain: f64,
    stages: [Stage; 2],
    pub params: ParamStore,
}

fn spatial_factors(patch: usize) -> (usize, usize) {
    let first = (2..=patch).find(|d| patch.is_multiple_of(*d)).unwrap_or(1);
    (first, patch / first)
}

impl CausalDecoder {
    /// `gain` rescales the head-mean attention map before the first stage.
    pub fn new(
        latent: (usize, usize, usize),
        patch: usize,
        channels: usize,
        gain: f64,
        seed: u64,
    ) -> Result<Self> {
        let (f, h, w) = latent;
        if f == 0 || h == 0 || w == 0 || patch == 0 || channels == 0 {
            return Err(LabError::config("decoder dimensions must be >= 1"));
        }
        let (s1, s2) = spatial_factors(patch);
        let first = Stage::new(f, h, w, s1);
        let (f1, h1, w1) = first.out_dims();
        let second = Stage::new(f1, h1, w1, s2);
        let mut init = Initializer::new(seed);
        let mut params = ParamStore::new();
        params.insert("conv0.w", init.linear(9, channels, 1.0));
        params.insert("conv0.b", Mat::zeros(1, channels));
        params.insert("conv1.w", init.linear(9 * channels, channels, 1.0));
        params.insert("conv1.b", Mat::zeros(1, channels));
        params.insert("head.w", init.linear(channels, 1, 1.0));
        params.insert("head.b", Mat::zeros(1, 1));
        Ok(Self {
            latent,
            channels,
            gain,
            stages: [first, second],
            params,
        })
    }

    /// Decoder sized for `cfg`'s latent grid with gain `seq_len`.
    pub fn for_model(cfg: &ModelConfig, channels: usize, seed: u64) -> Result<Self> {
        Self::new(
            (cfg.latent_frames, cfg.latent_height, cfg.latent_width),
            cfg.patch,
            channels,
            cfg.seq_len() as f64,
            seed,
        )
    }

    pub fn latent_dims(&self) -> (usize, usize, usize) {
        self.latent
    }

    pub fn output_dims(&self) -> (usize, usize, usize) {
        self.stages[1].out_dims()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    /// `input` is `[F*H*W, 1]` in (f, h, w) order; output `[F_pix*H_pix*W_pix, 1]`.
    pub fn graph(&self, g: &mut Graph, bound: &BoundParams, input: Var) -> Var {
        let mut x = g.scale(input, self.gain);
        for (i, stage) in self.stages.iter().enumerate() {
            let up = g.gather_rows(x, stage.gather.clone());
            let cols = g.gather_rows(up, stage.im2col.clone());
            let c_in = g.value(up).cols;
            let n = stage.gather.len();
            let patches = g.reshape(cols, n, 9 * c_in);
            let conv = g.matmul(patches, bound.var(&format!("conv{i}.w")));
            let conv = g.add_row(conv, bound.var(&format!("conv{i}.b")));
            x = g.tanh(conv);
        }
        let head = g.matmul(x, bound.var("head.w"));
        let head = g.add_row(head, bound.var("head.b"));
        g.sigmoid(head)
    }

    /// Decodes a head-mean latent map to `[F_pix, H_pix, W_pix]` probabilities.
    pub fn decode(&self, map: &LatentMap) -> Result<Array3<f64>> {
        if map.values.dim() != self.latent {
            return Err(LabError::shape(format!(
                "map {:?} does not match decoder grid {:?}",
                map.values.shape(),
                self.latent
            )));
        }
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, &|_| false);
        let input = g.constant(Mat::from_vec(
            map.values.len(),
            1,
            map.values.iter().copied().collect(),
        ));
        let out = self.graph(&mut g, &bound, input);
        let (f, h, w) = self.output_dims();
        Ok(Array3::from_shape_vec((f, h, w), g.value(out).data.clone())
            .expect("decoder output size"))
    }
}

/// `D(A)`: decoder applied to one attention map.
pub fn decode_attention(map: &LatentMap, dec: &CausalDecoder) -> Result<Array3<f64>> {
    dec.decode(map)
}

/// Output frames for `latent_frames` steps.
pub fn decoded_frames(latent_frames: usize) -> usize {
    pixel_frames_for(latent_frames)
}
