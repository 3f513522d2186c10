use crate::tensor::Tensor;

use super::ConvGeometry;

/// Windowed max pooling (the backbone stem uses 3×3, stride 2, padding 1).
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    geom: ConvGeometry,
    cache: Option<([usize; 4], Vec<u32>)>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        MaxPool2d {
            geom: ConvGeometry::new(kernel, stride, padding, 1),
            cache: None,
        }
    }

    fn run(&self, x: &Tensor) -> (Tensor, Vec<u32>) {
        let [n, c, h, w] = x.shape();
        let g = self.geom;
        let (oh, ow) = (g.out_len(h), g.out_len(w));
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut arg = vec![0u32; n * c * oh * ow];
        let mut k = 0;
        for i in 0..n {
            for ch in 0..c {
                let src = x.plane(i, ch);
                let dst = out.plane_mut(i, ch);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_at = 0usize;
                        for ky in 0..g.kernel {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..g.kernel {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let at = iy as usize * w + ix as usize;
                                if src[at] > best {
                                    best = src[at];
                                    best_at = at;
                                }
                            }
                        }
                        dst[oy * ow + ox] = best;
                        arg[k] = best_at as u32;
                        k += 1;
                    }
                }
            }
        }
        (out, arg)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.run(x).0
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let (out, arg) = self.run(x);
        self.cache = Some((x.shape(), arg));
        out
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let (shape, arg) = self
            .cache
            .take()
            .expect("MaxPool2d::backward called without forward_train");
        let mut grad_in = Tensor::zeros(shape);
        let per_plane = grad_out.plane_len();
        for i in 0..shape[0] {
            for ch in 0..shape[1] {
                let base = (i * shape[1] + ch) * per_plane;
                let g = grad_out.plane(i, ch).to_vec();
                let dst = grad_in.plane_mut(i, ch);
                for (j, gv) in g.iter().enumerate() {
                    dst[arg[base + j] as usize] += gv;
                }
            }
        }
        grad_in
    }
}
