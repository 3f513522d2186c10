use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Param;
use crate::error::{Error, Result};
use crate::tensor::{sgemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, padding: usize, dilation: usize) -> Self {
        ConvGeometry {
            kernel,
            stride,
            padding,
            dilation,
        }
    }

    pub fn out_len(&self, len: usize) -> usize {
        let span = self.dilation * (self.kernel - 1) + 1;
        (len + 2 * self.padding - span) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// 2-D convolution via im2col and a single matrix product per image.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    in_channels: usize,
    out_channels: usize,
    geom: ConvGeometry,
    cache: Option<Tensor>,
}

impl Conv2d {
    /// He-normal initialization (fan-out, ReLU gain), no bias.
    pub fn kaiming<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeometry,
        rng: &mut R,
    ) -> Self {
        let fan_out = out_channels * geom.kernel * geom.kernel;
        let std = (2.0 / fan_out as f64).sqrt();
        Self::normal(in_channels, out_channels, geom, std, false, rng)
    }

    pub fn normal<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeometry,
        std: f64,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let dist = Normal::new(0.0, std).expect("positive std");
        let len = out_channels * in_channels * geom.kernel * geom.kernel;
        let value = (0..len).map(|_| dist.sample(rng) as f32).collect();
        let weight = Param::new(
            vec![out_channels, in_channels, geom.kernel, geom.kernel],
            value,
        );
        let bias = with_bias.then(|| Param::filled(vec![out_channels], 0.0));
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            geom,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn geometry(&self) -> ConvGeometry {
        self.geom
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.geom.kernel * self.geom.kernel
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = x.shape();
        if c != self.in_channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{} input channels", self.in_channels),
                actual: format!("{c}"),
            });
        }
        let (oh, ow) = (self.geom.out_len(h), self.geom.out_len(w));
        let mut out = Tensor::zeros([n, self.out_channels, oh, ow]);
        let mut col = Vec::new();
        for i in 0..n {
            let src: &[f32] = if self.geom.is_pointwise() {
                x.image(i)
            } else {
                col.resize(self.patch_len() * oh * ow, 0.0);
                im2col(x.image(i), c, h, w, self.geom, oh, ow, &mut col);
                &col
            };
            sgemm(
                self.out_channels,
                self.patch_len(),
                oh * ow,
                &self.weight.value,
                false,
                src,
                false,
                out.image_mut(i),
                0.0,
            );
        }
        if let Some(bias) = &self.bias {
            for i in 0..n {
                for (co, b) in bias.value.iter().enumerate() {
                    out.plane_mut(i, co).iter_mut().for_each(|v| *v += b);
                }
            }
        }
        Ok(out)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let out = self.forward(x)?;
        self.cache = Some(x.clone());
        Ok(out)
    }

    /// Accumulates weight gradients; returns the input gradient only when
    /// `input_grad` is set.
    pub fn backward(&mut self, grad_out: &Tensor, input_grad: bool) -> Option<Tensor> {
        let x = self
            .cache
            .take()
            .expect("Conv2d::backward called without forward_train");
        let [n, c, h, w] = x.shape();
        let (oh, ow) = (grad_out.height(), grad_out.width());
        let patch = self.patch_len();
        let mut grad_in = input_grad.then(|| Tensor::zeros(x.shape()));
        let mut col = Vec::new();
        let mut dcol = Vec::new();
        for i in 0..n {
            let g = grad_out.image(i);
            let src: &[f32] = if self.geom.is_pointwise() {
                x.image(i)
            } else {
                col.resize(patch * oh * ow, 0.0);
                im2col(x.image(i), c, h, w, self.geom, oh, ow, &mut col);
                &col
            };
            sgemm(
                self.out_channels,
                oh * ow,
                patch,
                g,
                false,
                src,
                true,
                &mut self.weight.grad,
                1.0,
            );
            if let Some(gi) = grad_in.as_mut() {
                if self.geom.is_pointwise() {
                    sgemm(
                        patch,
                        self.out_channels,
                        oh * ow,
                        &self.weight.value,
                        true,
                        g,
                        false,
                        gi.image_mut(i),
                        0.0,
                    );
                } else {
                    dcol.resize(patch * oh * ow, 0.0);
                    sgemm(
                        patch,
                        self.out_channels,
                        oh * ow,
                        &self.weight.value,
                        true,
                        g,
                        false,
                        &mut dcol,
                        0.0,
                    );
                    col2im(&dcol, c, h, w, self.geom, oh, ow, gi.image_mut(i));
                }
            }
        }
        if let Some(bias) = self.bias.as_mut() {
            for i in 0..n {
                for (co, b) in bias.grad.iter_mut().enumerate() {
                    *b += grad_out.plane(i, co).iter().sum::<f32>();
                }
            }
        }
        grad_in
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut())
    }
}

#[inline]
fn src_index(o: usize, k: usize, g: ConvGeometry, len: usize) -> Option<usize> {
    let pos = (o * g.stride + k * g.dilation) as isize - g.padding as isize;
    (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    src: &[f32],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeometry,
    oh: usize,
    ow: usize,
    col: &mut [f32],
) {
    let k = g.kernel;
    let mut row = 0;
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    match src_index(oy, ki, g, h) {
                        None => line.iter_mut().for_each(|v| *v = 0.0),
                        Some(iy) => {
                            let srow = &plane[iy * w..(iy + 1) * w];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match src_index(ox, kj, g, w) {
                                    Some(ix) => srow[ix],
                                    None => 0.0,
                                };
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f32],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeometry,
    oh: usize,
    ow: usize,
    dst: &mut [f32],
) {
    let k = g.kernel;
    let mut row = 0;
    for ch in 0..c {
        let plane = &mut dst[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let Some(iy) = src_index(oy, ki, g, h) else {
                        continue;
                    };
                    let drow = &mut plane[iy * w..(iy + 1) * w];
                    for ox in 0..ow {
                        if let Some(ix) = src_index(ox, kj, g, w) {
                            drow[ix] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}
