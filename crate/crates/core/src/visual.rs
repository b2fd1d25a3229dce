//! Image feature extraction: a small strided convolutional network (or a
//! parameter-free patch embedding) producing an `h x w x d` feature map,
//! flattened row-major into visual tokens with 2-D sinusoidal positions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeom, Tape, Var};
use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which feature extractor to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BackboneKind {
    /// Three ReLU convolution stages, strides 2, 2, 1.
    Conv { channels: [usize; 2], kernels: [usize; 3] },
    /// Non-overlapping `size x size` patches copied into the first
    /// `size * size` channels; no parameters.
    Patch { size: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub d: usize,
}

impl BackboneConfig {
    pub fn conv(d: usize) -> Self {
        Self {
            kind: BackboneKind::Conv {
                channels: [32, 64],
                kernels: [3, 3, 3],
            },
            d,
        }
    }

    pub fn patch(size: usize, d: usize) -> Self {
        Self {
            kind: BackboneKind::Patch { size },
            d,
        }
    }

    pub fn total_stride(&self) -> usize {
        match self.kind {
            BackboneKind::Conv { .. } => 4,
            BackboneKind::Patch { size } => size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % 4 != 0 {
            return Err(Error::Config(format!("feature width {} must be a positive multiple of 4", self.d)));
        }
        match self.kind {
            BackboneKind::Conv { channels, kernels } => {
                if channels.contains(&0) || kernels.contains(&0) {
                    return Err(Error::Config("backbone channels and kernels must be positive".into()));
                }
            }
            BackboneKind::Patch { size } => {
                if size == 0 || size * size > self.d {
                    return Err(Error::Config(format!("patch size {size} does not fit in width {}", self.d)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Stage {
    weight: ParamId,
    bias: ParamId,
    kernel: usize,
    stride: usize,
    in_channels: usize,
    out_channels: usize,
}

/// A feature extractor whose parameters live in a shared [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    stages: Vec<Stage>,
}

/// Backbone output for one image, stored as `[h * w, d]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatureMap<T> {
    pub height: usize,
    pub width: usize,
    pub features: Tensor<T>,
}

impl<T: Scalar> VisualFeatureMap<T> {
    pub fn from_tokens(height: usize, width: usize, tokens: Tensor<T>) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.rows() != height * width {
            return Err(Error::Shape(format!(
                "{:?} tokens for a {height}x{width} grid",
                tokens.shape()
            )));
        }
        Ok(Self {
            height,
            width,
            features: tokens,
        })
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn feature(&self, r: usize, c: usize) -> &[T] {
        self.features.row(r * self.width + c)
    }

    /// Flattened tokens, optionally with the sinusoidal code added.
    pub fn tokenize(&self, positional: bool) -> Tensor<T> {
        let mut tokens = self.features.clone();
        if positional {
            tokens.add_assign(&sinusoidal_2d(self.height, self.width, self.dim()));
        }
        tokens
    }
}

/// Fixed 2-D sinusoidal code, `[h * w, d]`.
///
/// Channels `0..d/2` encode the row and `d/2..d` the column. Within a half
/// of width `m`, channel `2i` is `sin(pos / 10000^(2i/m))` and `2i + 1` the
/// matching cosine.
pub fn sinusoidal_2d<T: Scalar>(height: usize, width: usize, d: usize) -> Tensor<T> {
    assert!(d % 4 == 0, "positional width {d} not divisible by 4");
    let half = d / 2;
    let mut out = Tensor::zeros(&[height * width, d]);
    for r in 0..height {
        for c in 0..width {
            let row = out.row_mut(r * width + c);
            for (offset, pos) in [(0, r), (half, c)] {
                for i in 0..half / 2 {
                    let freq = 10000f64.powf(-((2 * i) as f64) / half as f64);
                    let angle = pos as f64 * freq;
                    row[offset + 2 * i] = T::lit(angle.sin());
                    row[offset + 2 * i + 1] = T::lit(angle.cos());
                }
            }
        }
    }
    out
}

impl Backbone {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let stages = match config.kind {
            BackboneKind::Conv { channels, kernels } => {
                let widths = [1, channels[0], channels[1], config.d];
                (0..3)
                    .map(|i| {
                        let (cin, cout, k) = (widths[i], widths[i + 1], kernels[i]);
                        let fan_in = k * k * cin;
                        Stage {
                            weight: store.add(
                                format!("{name}.conv{i}.weight"),
                                normal_tensor(&[cout, fan_in], (2.0 / fan_in as f64).sqrt(), rng),
                            ),
                            bias: store.add(format!("{name}.conv{i}.bias"), Tensor::zeros(&[cout])),
                            kernel: k,
                            stride: if i < 2 { 2 } else { 1 },
                            in_channels: cin,
                            out_channels: cout,
                        }
                    })
                    .collect()
            }
            BackboneKind::Patch { .. } => Vec::new(),
        };
        Ok(Self { config, stages })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.d
    }

    /// Token grid for an `height x width` input.
    pub fn grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let stride = self.config.total_stride();
        if height < stride || width < stride {
            return Err(Error::Input(format!(
                "image {height}x{width} smaller than the backbone stride {stride}"
            )));
        }
        Ok(match self.config.kind {
            BackboneKind::Conv { .. } => {
                let (mut h, mut w) = (height, width);
                for s in &self.stages {
                    let g = self.geom(s, 1, h, w);
                    (h, w) = (g.out_height(), g.out_width());
                }
                (h, w)
            }
            BackboneKind::Patch { size } => (height / size, width / size),
        })
    }

    fn geom(&self, s: &Stage, batch: usize, height: usize, width: usize) -> ConvGeom {
        ConvGeom {
            batch,
            height,
            width,
            in_channels: s.in_channels,
            out_channels: s.out_channels,
            kernel: s.kernel,
            stride: s.stride,
            padding: s.kernel / 2,
        }
    }

    /// Stacks same-sized images into a `[batch * H * W, 1]` pixel tensor.
    pub fn pixels<T: Scalar>(images: &[&ImageSample]) -> Result<(Tensor<T>, usize, usize)> {
        let first = images
            .first()
            .ok_or_else(|| Error::Input("empty image batch".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            if (img.height, img.width) != (h, w) {
                return Err(Error::Shape(format!(
                    "image {} is {}x{}, batch is {h}x{w}",
                    img.id, img.height, img.width
                )));
            }
            data.extend(img.pixels.iter().map(|&p| T::lit(f64::from(p))));
        }
        Ok((Tensor::from_vec(&[images.len() * h * w, 1], data)?, h, w))
    }

    /// Feature maps of a batch as `[batch * h * w, d]` (no positions) plus
    /// the token grid. `pixels` is `[batch * height * width, 1]`.
    pub fn forward<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        pixels: Var<'t, T>,
        batch: usize,
        height: usize,
        width: usize,
    ) -> Result<(Var<'t, T>, (usize, usize))> {
        let grid = self.grid(height, width)?;
        let tape = pixels.tape();
        let out = match self.config.kind {
            BackboneKind::Conv { .. } => {
                let (mut x, mut h, mut w) = (pixels, height, width);
                for (i, s) in self.stages.iter().enumerate() {
                    let g = self.geom(s, batch, h, w);
                    x = x.conv2d(p[s.weight], p[s.bias], g);
                    if i + 1 < self.stages.len() {
                        x = x.relu();
                    }
                    (h, w) = (g.out_height(), g.out_width());
                }
                x
            }
            BackboneKind::Patch { size } => {
                let d = self.config.d;
                let mut weight = Tensor::zeros(&[d, size * size]);
                for j in 0..size * size {
                    weight.row_mut(j)[j] = T::one();
                }
                let geom = ConvGeom {
                    batch,
                    height,
                    width,
                    in_channels: 1,
                    out_channels: d,
                    kernel: size,
                    stride: size,
                    padding: 0,
                };
                pixels.conv2d(tape.constant(weight), tape.constant(Tensor::zeros(&[d])), geom)
            }
        };
        Ok((out, grid))
    }

    /// Tokens for a batch with the positional code added when requested.
    pub fn tokens<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        pixels: Var<'t, T>,
        batch: usize,
        height: usize,
        width: usize,
        positional: bool,
    ) -> Result<(Var<'t, T>, (usize, usize))> {
        let (features, grid) = self.forward(p, pixels, batch, height, width)?;
        if !positional {
            return Ok((features, grid));
        }
        let pe = tape_positions(features.tape(), grid, self.config.d, batch);
        Ok((features.add(pe), grid))
    }

    pub fn encode_image<T: Scalar>(&self, store: &ParamStore<T>, image: &ImageSample) -> Result<VisualFeatureMap<T>> {
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let (pixels, h, w) = Self::pixels::<T>(&[image])?;
        let (features, (gh, gw)) = self.forward(&p, tape.constant(pixels), 1, h, w)?;
        let features = features.to_tensor();
        VisualFeatureMap::from_tokens(gh, gw, features)
    }
}

fn tape_positions<T: Scalar>(tape: &Tape<T>, grid: (usize, usize), d: usize, batch: usize) -> Var<'_, T> {
    tape.constant(sinusoidal_2d(grid.0, grid.1, d)).tile_rows(batch)
}
