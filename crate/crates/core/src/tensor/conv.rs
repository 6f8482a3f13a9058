//! Channels-last convolution lowered to one matrix product per image.
//!
//! For an input image `h x w x cin` the patch matrix has one row per output
//! pixel and `kh * kw * cin` columns ordered `(ky, kx, ci)`, which matches
//! the row-major layout of a `kh x kw x cin x cout` kernel viewed as a
//! `(kh * kw * cin) x cout` matrix.

use super::gemm::gemm;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let &[batch, height, width, in_channels] = input else {
            return Err(Error::shape(format!("conv2d input must be 4-D, got {input:?}")));
        };
        let &[kernel_h, kernel_w, kin, out_channels] = kernel else {
            return Err(Error::shape(format!("conv2d kernel must be 4-D, got {kernel:?}")));
        };
        if kin != in_channels {
            return Err(Error::shape(format!(
                "conv2d kernel expects {kin} input channels, input has {in_channels}"
            )));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d stride must be positive"));
        }
        if height + 2 * padding < kernel_h || width + 2 * padding < kernel_w {
            return Err(Error::shape(format!(
                "kernel {kernel_h}x{kernel_w} larger than padded input {}x{}",
                height + 2 * padding,
                width + 2 * padding
            )));
        }
        Ok(Self {
            batch,
            height,
            width,
            in_channels,
            kernel_h,
            kernel_w,
            out_channels,
            stride,
            padding,
            out_h: (height + 2 * padding - kernel_h) / stride + 1,
            out_w: (width + 2 * padding - kernel_w) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_h, self.out_w, self.out_channels]
    }

    fn patch_len(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_channels
    }

    fn pixels_out(&self) -> usize {
        self.out_h * self.out_w
    }

    fn image_len(&self) -> usize {
        self.height * self.width * self.in_channels
    }

    /// Input row/column for output coordinate `o` and kernel offset `k`,
    /// or `None` inside the zero padding.
    #[inline]
    fn source(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(self.padding).filter(|&i| i < limit)
    }

    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let cin = self.in_channels;
        let patch = self.patch_len();
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &mut cols[(oy * self.out_w + ox) * patch..][..patch];
                for ky in 0..self.kernel_h {
                    for kx in 0..self.kernel_w {
                        let dst = &mut row[(ky * self.kernel_w + kx) * cin..][..cin];
                        match (self.source(oy, ky, self.height), self.source(ox, kx, self.width)) {
                            (Some(iy), Some(ix)) => {
                                dst.copy_from_slice(&image[(iy * self.width + ix) * cin..][..cin])
                            }
                            _ => dst.fill(0.0),
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], image_grad: &mut [f64]) {
        let cin = self.in_channels;
        let patch = self.patch_len();
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &cols[(oy * self.out_w + ox) * patch..][..patch];
                for ky in 0..self.kernel_h {
                    let Some(iy) = self.source(oy, ky, self.height) else { continue };
                    for kx in 0..self.kernel_w {
                        let Some(ix) = self.source(ox, kx, self.width) else { continue };
                        let src = &row[(ky * self.kernel_w + kx) * cin..][..cin];
                        let dst = &mut image_grad[(iy * self.width + ix) * cin..][..cin];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }

    pub(crate) fn forward(&self, input: &[f64], kernel: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        let (pixels, patch, cout) = (self.pixels_out(), self.patch_len(), self.out_channels);
        let mut out = vec![0.0; self.batch * pixels * cout];
        let mut cols = vec![0.0; pixels * patch];
        for b in 0..self.batch {
            self.im2col(&input[b * self.image_len()..][..self.image_len()], &mut cols);
            let dst = &mut out[b * pixels * cout..][..pixels * cout];
            gemm(pixels, patch, cout, 1.0, &cols, false, kernel, false, 0.0, dst);
            if let Some(bias) = bias {
                for px in dst.chunks_exact_mut(cout) {
                    for (v, bv) in px.iter_mut().zip(bias) {
                        *v += bv;
                    }
                }
            }
        }
        out
    }

    /// Accumulate gradients for whichever of input/kernel/bias are requested.
    pub(crate) fn backward(
        &self,
        input: &[f64],
        kernel: &[f64],
        out_grad: &[f64],
        mut input_grad: Option<&mut [f64]>,
        mut kernel_grad: Option<&mut [f64]>,
        bias_grad: Option<&mut [f64]>,
    ) {
        let (pixels, patch, cout) = (self.pixels_out(), self.patch_len(), self.out_channels);
        if let Some(bg) = bias_grad {
            for px in out_grad.chunks_exact(cout) {
                for (g, v) in bg.iter_mut().zip(px) {
                    *g += v;
                }
            }
        }
        if input_grad.is_none() && kernel_grad.is_none() {
            return;
        }
        let mut cols = vec![0.0; pixels * patch];
        for b in 0..self.batch {
            let dout = &out_grad[b * pixels * cout..][..pixels * cout];
            if let Some(kg) = kernel_grad.as_deref_mut() {
                self.im2col(&input[b * self.image_len()..][..self.image_len()], &mut cols);
                gemm(patch, pixels, cout, 1.0, &cols, true, dout, false, 1.0, kg);
            }
            if let Some(ig) = input_grad.as_deref_mut() {
                gemm(pixels, cout, patch, 1.0, dout, false, kernel, true, 0.0, &mut cols);
                self.col2im_add(&cols, &mut ig[b * self.image_len()..][..self.image_len()]);
            }
        }
    }
}
