//! Pixel/latent conversion, conditioning channels and fixed encodings.
//!
//! The toy model has no VAE: a latent token is the RGB patch of the last
//! pixel frame of its causal frame group (frame 0 for step 0), rescaled to
//! `[-1, 1]`.

use ndarray::{Array2, Array3, Array4};

use crate::autodiff::Mat;
use crate::config::{ModelConfig, MAX_INSTANCES, TEMPORAL_STRIDE};
use crate::error::{LabError, Result};

/// Pixel frame represented by latent step `t`.
pub fn representative_frame(t: usize) -> usize {
    t * TEMPORAL_STRIDE
}

/// Latent step whose causal group contains pixel frame `f`.
pub fn latent_step_of_frame(f: usize) -> usize {
    f.div_ceil(TEMPORAL_STRIDE)
}

fn check_video(video: &Array4<f64>, cfg: &ModelConfig) -> Result<()> {
    let expected = [cfg.pixel_frames(), cfg.pixel_height(), cfg.pixel_width(), 3];
    if video.shape() != expected {
        return Err(LabError::shape(format!(
            "video {:?} does not match model pixel grid {:?}",
            video.shape(),
            expected
        )));
    }
    Ok(())
}

/// `[F_pix, H_pix, W_pix, 3]` video in `[0, 1]` -> `[N_v, 3 p^2]` latent.
pub fn encode_latent(video: &Array4<f64>, cfg: &ModelConfig) -> Result<Array2<f64>> {
    check_video(video, cfg)?;
    let p = cfg.patch;
    let mut out = Array2::zeros((cfg.n_video(), cfg.latent_channels()));
    let layout = cfg.layout();
    for f in 0..cfg.latent_frames {
        let src = representative_frame(f);
        for h in 0..cfg.latent_height {
            for w in 0..cfg.latent_width {
                let row = layout.video_index(f, h, w);
                let mut c = 0;
                for py in 0..p {
                    for px in 0..p {
                        for ch in 0..3 {
                            out[[row, c]] = 2.0 * video[[src, h * p + py, w * p + px, ch]] - 1.0;
                            c += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse patchification; each pixel frame takes its causal group's latent.
pub fn decode_latent(latent: &Array2<f64>, cfg: &ModelConfig) -> Result<Array4<f64>> {
    if latent.shape() != [cfg.n_video(), cfg.latent_channels()] {
        return Err(LabError::shape(format!(
            "latent {:?} does not match model grid",
            latent.shape()
        )));
    }
    let p = cfg.patch;
    let layout = cfg.layout();
    let mut out = Array4::zeros((cfg.pixel_frames(), cfg.pixel_height(), cfg.pixel_width(), 3));
    for f in 0..cfg.pixel_frames() {
        let t = latent_step_of_frame(f);
        for h in 0..cfg.latent_height {
            for w in 0..cfg.latent_width {
                let row = layout.video_index(t, h, w);
                let mut c = 0;
                for py in 0..p {
                    for px in 0..p {
                        for ch in 0..3 {
                            let v = (latent[[row, c]] + 1.0) * 0.5;
                            out[[f, h * p + py, w * p + px, ch]] = v.clamp(0.0, 1.0);
                            c += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Conditioning inputs concatenated channel-wise ahead of the input
/// projection.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionChannels {
    /// Noisy latent `z_t`, `[N_v, latent_channels]`.
    pub noise_latent: Array2<f64>,
    /// First RGB frame `[H_pix, W_pix, 3]` in `[0, 1]`.
    pub first_frame: Array3<f64>,
    /// First-frame palette ID map, 0 = background.
    pub id_map: Array2<u8>,
}

impl ConditionChannels {
    /// Row per video token: `[z_t | first-frame patch | id-map patch / K_max]`.
    pub fn to_matrix(&self, cfg: &ModelConfig) -> Result<Mat> {
        let (hp, wp) = (cfg.pixel_height(), cfg.pixel_width());
        if self.noise_latent.shape() != [cfg.n_video(), cfg.latent_channels()] {
            return Err(LabError::shape(format!(
                "noise latent {:?} does not match model grid",
                self.noise_latent.shape()
            )));
        }
        if self.first_frame.shape() != [hp, wp, 3] || self.id_map.shape() != [hp, wp] {
            return Err(LabError::shape(format!(
                "first frame {:?} / id map {:?} do not match pixel grid {hp}x{wp}",
                self.first_frame.shape(),
                self.id_map.shape()
            )));
        }
        if let Some(&bad) = self.id_map.iter().find(|&&v| v as usize > MAX_INSTANCES) {
            return Err(LabError::data(format!(
                "id map value {bad} exceeds {MAX_INSTANCES}"
            )));
        }
        let p = cfg.patch;
        let cl = cfg.latent_channels();
        let cols = cfg.condition_channels();
        let layout = cfg.layout();
        let mut out = Mat::zeros(cfg.n_video(), cols);
        for f in 0..cfg.latent_frames {
            for h in 0..cfg.latent_height {
                for w in 0..cfg.latent_width {
                    let row = layout.video_index(f, h, w);
                    let dst = &mut out.data[row * cols..(row + 1) * cols];
                    for c in 0..cl {
                        dst[c] = self.noise_latent[[row, c]];
                    }
                    let mut c = cl;
                    for py in 0..p {
                        for px in 0..p {
                            for ch in 0..3 {
                                dst[c] = 2.0 * self.first_frame[[h * p + py, w * p + px, ch]] - 1.0;
                                c += 1;
                            }
                        }
                    }
                    for py in 0..p {
                        for px in 0..p {
                            dst[c] =
                                self.id_map[[h * p + py, w * p + px]] as f64 / MAX_INSTANCES as f64;
                            c += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn sinusoid(pos: f64, dims: usize, base: f64, out: &mut [f64]) {
    for i in 0..dims {
        let pair = (i / 2) as f64;
        let freq = base.powf(-2.0 * pair / dims as f64);
        out[i] = if i % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        };
    }
}

/// Factorized sinusoidal encoding of `(f, h, w)`, `[N_v, d_model]`.
pub fn video_position_encoding(cfg: &ModelConfig) -> Mat {
    let d = cfg.d_model;
    let df = d / 4;
    let dh = (d - df) / 2;
    let dw = d - df - dh;
    let layout = cfg.layout();
    let mut out = Mat::zeros(cfg.n_video(), d);
    for f in 0..cfg.latent_frames {
        for h in 0..cfg.latent_height {
            for w in 0..cfg.latent_width {
                let row = layout.video_index(f, h, w);
                let dst = &mut out.data[row * d..(row + 1) * d];
                sinusoid(f as f64, df, 100.0, &mut dst[..df]);
                sinusoid(h as f64, dh, 100.0, &mut dst[df..df + dh]);
                sinusoid(w as f64, dw, 100.0, &mut dst[df + dh..]);
            }
        }
    }
    out
}

/// 1-D sinusoidal encoding of text positions, `[text_len, d_model]`.
pub fn text_position_encoding(cfg: &ModelConfig) -> Mat {
    let d = cfg.d_model;
    let mut out = Mat::zeros(cfg.text_len, d);
    for t in 0..cfg.text_len {
        sinusoid(t as f64, d, 100.0, &mut out.data[t * d..(t + 1) * d]);
    }
    out
}

/// `[1, d_model]` timestep embedding.
pub fn timestep_embedding(t: usize, d: usize) -> Mat {
    let mut out = Mat::zeros(1, d);
    sinusoid(t as f64, d, 1000.0, &mut out.data);
    out
}
