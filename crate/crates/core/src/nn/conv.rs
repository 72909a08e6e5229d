//! Grouped 2-D cross-correlation with zero padding, stride and dilation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Spatial geometry of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    /// Zero padding as `[top, bottom, left, right]`.
    pub padding: [usize; 4],
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeom {
    /// Stride 1 with `⌊k/2⌋·dilation` padding on each side, which preserves
    /// spatial size for odd kernels.
    pub fn same(kh: usize, kw: usize, groups: usize) -> Self {
        Self::same_dilated(kh, kw, 1, groups)
    }

    pub fn same_dilated(kh: usize, kw: usize, dilation: usize, groups: usize) -> Self {
        let ph = (kh / 2) * dilation;
        let pw = (kw / 2) * dilation;
        Self {
            stride: 1,
            padding: [ph, ph, pw, pw],
            dilation,
            groups,
        }
    }

    pub fn strided(stride: usize, pad: usize, groups: usize) -> Self {
        Self {
            stride,
            padding: [pad; 4],
            dilation: 1,
            groups,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// `(out_c, in_c / groups, kh, kw)`.
    pub kernel: Tensor,
    /// `(1, out_c, 1, 1)`.
    pub bias: Tensor,
    pub geom: ConvGeom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    pub fn new(kernel: Tensor, bias: Tensor, geom: ConvGeom) -> Result<Self> {
        let p = Self { kernel, bias, geom };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(in_c: usize, out_c: usize, kh: usize, kw: usize, geom: ConvGeom) -> Result<Self> {
        if geom.groups == 0 || in_c % geom.groups != 0 {
            return Err(Error::Config(format!(
                "groups {} must divide input channels {in_c}",
                geom.groups
            )));
        }
        Self::new(
            Tensor::zeros([out_c, in_c / geom.groups, kh, kw]),
            Tensor::zeros([1, out_c, 1, 1]),
            geom,
        )
    }

    /// Truncated-normal weights with the given std and zero bias.
    pub fn init<R: Rng + ?Sized>(
        in_c: usize,
        out_c: usize,
        kh: usize,
        kw: usize,
        geom: ConvGeom,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(in_c, out_c, kh, kw, geom)?;
        p.kernel = Tensor::trunc_normal(p.kernel.dims(), std, rng);
        Ok(p)
    }

    /// Depthwise `kh × kw` convolution with "same" padding.
    pub fn depthwise<R: Rng + ?Sized>(c: usize, kh: usize, kw: usize, std: f64, rng: &mut R) -> Self {
        Self::init(c, c, kh, kw, ConvGeom::same(kh, kw, c), std, rng).expect("valid depthwise")
    }

    /// Dense 1×1 convolution.
    pub fn pointwise<R: Rng + ?Sized>(in_c: usize, out_c: usize, std: f64, rng: &mut R) -> Self {
        Self::init(in_c, out_c, 1, 1, ConvGeom::same(1, 1, 1), std, rng).expect("valid pointwise")
    }

    /// Per-output-channel delta at the kernel center; with "same" padding
    /// and one input channel per group this is the identity map.
    pub fn set_identity(&mut self) {
        let [oc, icg, kh, kw] = self.kernel.dims();
        let ocg = oc / self.geom.groups;
        let k = self.kernel.data_mut();
        k.fill(0.0);
        for o in 0..oc {
            let ic = if icg == 1 { 0 } else { o % ocg };
            if ic < icg {
                k[((o * icg + ic) * kh + kh / 2) * kw + kw / 2] = 1.0;
            }
        }
        self.bias.data_mut().fill(0.0);
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.dims()[1] * self.geom.groups
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.dims()[0]
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        let [_, _, kh, kw] = self.kernel.dims();
        (kh, kw)
    }

    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }

    pub fn view(&self) -> ConvView<'_> {
        ConvView {
            kernel: &self.kernel,
            bias: &self.bias,
            geom: self.geom,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.view().validate()
    }

    /// Output `(H, W)` for an input of the given spatial size.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.view().output_hw(h, w)
    }
}

/// Borrowed kernel, bias and geometry; lets the autograd tape run a
/// convolution without assembling an owned [`ConvParams`].
#[derive(Debug, Clone, Copy)]
pub struct ConvView<'a> {
    pub kernel: &'a Tensor,
    pub bias: &'a Tensor,
    pub geom: ConvGeom,
}

impl ConvView<'_> {
    fn in_channels(&self) -> usize {
        self.kernel.dims()[1] * self.geom.groups
    }

    fn out_channels(&self) -> usize {
        self.kernel.dims()[0]
    }

    fn kernel_size(&self) -> (usize, usize) {
        let [_, _, kh, kw] = self.kernel.dims();
        (kh, kw)
    }

    pub fn validate(&self) -> Result<()> {
        let [oc, _, kh, kw] = self.kernel.dims();
        let g = self.geom.groups;
        if g == 0 || oc % g != 0 {
            return Err(Error::Config(format!(
                "groups {g} must divide output channels {oc}"
            )));
        }
        if self.geom.stride == 0 || self.geom.dilation == 0 {
            return Err(Error::Config("stride and dilation must be positive".into()));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::Config("empty kernel".into()));
        }
        if self.bias.dims() != [1, oc, 1, 1] {
            return Err(Error::Shape(format!(
                "bias dims {:?}, expected [1, {oc}, 1, 1]",
                self.bias.dims()
            )));
        }
        Ok(())
    }

    /// Output `(H, W)` for an input of the given spatial size.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel_size();
        let [pt, pb, pl, pr] = self.geom.padding;
        let d = self.geom.dilation;
        let eff_h = d * (kh - 1) + 1;
        let eff_w = d * (kw - 1) + 1;
        let ph = h + pt + pb;
        let pw = w + pl + pr;
        if ph < eff_h || pw < eff_w {
            return Err(Error::Shape(format!(
                "input {h}x{w} too small for kernel {kh}x{kw} (dilation {d})"
            )));
        }
        let oh = (ph - eff_h) / self.geom.stride + 1;
        let ow = (pw - eff_w) / self.geom.stride + 1;
        if oh == 0 || ow == 0 {
            return Err(Error::Shape("zero-size spatial output".into()));
        }
        Ok((oh, ow))
    }

    pub(crate) fn check_input(&self, x: &Tensor) -> Result<(usize, usize)> {
        self.validate()?;
        let [_, c, h, w] = x.dims();
        if c != self.in_channels() {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels()
            )));
        }
        self.output_hw(h, w)
    }
}

/// Range of output columns `o` for which `o·stride + offset - pad` lies in `[0, len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: usize, pad: usize) -> (usize, usize) {
    // i = o*s + offset - pad  ≥ 0  ⇔  o ≥ ceil((pad - offset)/s)
    let lo = if pad > offset {
        (pad - offset + stride - 1) / stride
    } else {
        0
    };
    // i ≤ in_len - 1  ⇔  o ≤ floor((in_len - 1 + pad - offset)/s)
    let top = in_len + pad;
    let hi = if top > offset {
        ((top - 1 - offset) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Visits every output row segment touched by kernel tap `(ky, kx)` as
/// `f(out_offset, in_offset, count, in_step)`. Forward and both adjoints share it.
#[inline]
fn for_each_tap<F: FnMut(usize, usize, usize, usize)>(
    geom: ConvGeom,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    ky: usize,
    kx: usize,
    mut f: F,
) {
    let (h, w) = in_hw;
    let (oh, ow) = out_hw;
    let s = geom.stride;
    let d = geom.dilation;
    let [pt, _, pl, _] = geom.padding;
    let (oy0, oy1) = valid_range(oh, h, s, ky * d, pt);
    let (ox0, ox1) = valid_range(ow, w, s, kx * d, pl);
    if ox0 >= ox1 || oy0 >= oy1 {
        return;
    }
    if s == 1 && ox0 == 0 && ox1 == ow && ow == w && kx * d == pl {
        // Whole rows line up in input and output, so the rows form one run.
        let iy0 = oy0 + ky * d - pt;
        f(oy0 * ow, iy0 * w, (oy1 - oy0) * ow, 1);
        return;
    }
    for oy in oy0..oy1 {
        let iy = oy * s + ky * d - pt;
        let ix0 = ox0 * s + kx * d - pl;
        f(oy * ow + ox0, iy * w + ix0, ox1 - ox0, s);
    }
}

/// Dot product with independent partial sums so the reduction can be vectorized.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            lanes[l] += x[l] * y[l];
        }
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

pub fn conv2d_forward(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    conv2d_forward_view(x, p.view())
}

pub(crate) fn conv2d_forward_view(x: &Tensor, p: ConvView<'_>) -> Result<Tensor> {
    let (oh, ow) = p.check_input(x)?;
    let [n, c, h, w] = x.dims();
    let oc = p.out_channels();
    let [_, icg, kh, kw] = p.kernel.dims();
    let g = p.geom.groups;
    let ocg = oc / g;
    let mut out = Tensor::zeros([n, oc, oh, ow]);
    let xs = x.data();
    let ks = p.kernel.data();
    let bs = p.bias.data();
    let plane_in = h * w;
    let plane_out = oh * ow;
    let od = out.data_mut();
    for b in 0..n {
        for o in 0..oc {
            let grp = o / ocg;
            let out_plane = &mut od[(b * oc + o) * plane_out..(b * oc + o + 1) * plane_out];
            out_plane.fill(bs[o]);
            for icl in 0..icg {
                let ic = grp * icg + icl;
                let in_plane = &xs[(b * c + ic) * plane_in..(b * c + ic + 1) * plane_in];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = ks[((o * icg + icl) * kh + ky) * kw + kx];
                        for_each_tap(p.geom, (h, w), (oh, ow), ky, kx, |oo, io, cnt, step| {
                            let dst = &mut out_plane[oo..oo + cnt];
                            if step == 1 {
                                for (d, &v) in dst.iter_mut().zip(&in_plane[io..io + cnt]) {
                                    *d += wv * v;
                                }
                            } else {
                                for (j, d) in dst.iter_mut().enumerate() {
                                    *d += wv * in_plane[io + j * step];
                                }
                            }
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact adjoints of [`conv2d_forward`] with respect to input, kernel and bias.
pub fn conv2d_backward(grad_out: &Tensor, x: &Tensor, p: &ConvParams) -> Result<ConvGrads> {
    conv2d_backward_view(grad_out, x, p.view())
}

pub(crate) fn conv2d_backward_view(grad_out: &Tensor, x: &Tensor, p: ConvView<'_>) -> Result<ConvGrads> {
    let (oh, ow) = p.check_input(x)?;
    let [n, c, h, w] = x.dims();
    let oc = p.out_channels();
    if grad_out.dims() != [n, oc, oh, ow] {
        return Err(Error::Shape(format!(
            "conv backward: grad dims {:?}, forward output was {:?}",
            grad_out.dims(),
            [n, oc, oh, ow]
        )));
    }
    let [_, icg, kh, kw] = p.kernel.dims();
    let g = p.geom.groups;
    let ocg = oc / g;
    let mut gin = Tensor::zeros(x.dims());
    let mut gk = Tensor::zeros(p.kernel.dims());
    let mut gb = Tensor::zeros(p.bias.dims());
    let xs = x.data();
    let gs = grad_out.data();
    let ks = p.kernel.data();
    let plane_in = h * w;
    let plane_out = oh * ow;
    {
        let gbd = gb.data_mut();
        for b in 0..n {
            for o in 0..oc {
                gbd[o] += gs[(b * oc + o) * plane_out..(b * oc + o + 1) * plane_out]
                    .iter()
                    .sum::<f64>();
            }
        }
    }
    let gid = gin.data_mut();
    let gkd = gk.data_mut();
    for b in 0..n {
        for o in 0..oc {
            let grp = o / ocg;
            let gout_plane = &gs[(b * oc + o) * plane_out..(b * oc + o + 1) * plane_out];
            for icl in 0..icg {
                let ic = grp * icg + icl;
                let in_off = (b * c + ic) * plane_in;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let kidx = ((o * icg + icl) * kh + ky) * kw + kx;
                        let wv = ks[kidx];
                        let mut acc = 0.0;
                        for_each_tap(p.geom, (h, w), (oh, ow), ky, kx, |oo, io, cnt, step| {
                            let src = &gout_plane[oo..oo + cnt];
                            let xin = &xs[in_off..in_off + plane_in];
                            let gi = &mut gid[in_off..in_off + plane_in];
                            if step == 1 {
                                acc += dot(src, &xin[io..io + cnt]);
                                for (gdst, gv) in gi[io..io + cnt].iter_mut().zip(src) {
                                    *gdst += wv * gv;
                                }
                            } else {
                                for (j, gv) in src.iter().enumerate() {
                                    acc += gv * xin[io + j * step];
                                    gi[io + j * step] += wv * gv;
                                }
                            }
                        });
                        gkd[kidx] += acc;
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: gin,
        kernel: gk,
        bias: gb,
    })
}

/// Multiply-accumulate count of one forward pass.
pub fn conv_macs(p: &ConvParams, n: usize, h: usize, w: usize) -> Result<u64> {
    let (oh, ow) = p.output_hw(h, w)?;
    let [oc, icg, kh, kw] = p.kernel.dims();
    Ok((n * oc * oh * ow * icg * kh * kw) as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct summation straight from the definition, independent of the tap traversal.
    fn naive_conv(x: &Tensor, p: &ConvParams) -> Tensor {
        let [n, _, h, w] = x.dims();
        let (oh, ow) = p.output_hw(h, w).unwrap();
        let [oc, icg, kh, kw] = p.kernel.dims();
        let ocg = oc / p.geom.groups;
        let mut out = Tensor::zeros([n, oc, oh, ow]);
        for b in 0..n {
            for o in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = p.bias.data()[o];
                        for icl in 0..icg {
                            let ic = (o / ocg) * icg + icl;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * p.geom.stride + ky * p.geom.dilation) as isize
                                        - p.geom.padding[0] as isize;
                                    let ix = (ox * p.geom.stride + kx * p.geom.dilation) as isize
                                        - p.geom.padding[2] as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += p.kernel.get(o, icl, ky, kx)
                                        * x.get(b, ic, iy as usize, ix as usize);
                                }
                            }
                        }
                        out.set(b, o, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    fn grid3() -> Tensor {
        Tensor::from_vec([1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap()
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ConvParams::init(2, 3, 3, 3, ConvGeom::same(3, 3, 1), 1.0, &mut rng).unwrap();
        let y = conv2d_forward(&Tensor::zeros([1, 2, 5, 5]), &p).unwrap();
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn([2, 3, 6, 7], 1.0, &mut rng);
        let mut p = ConvParams::depthwise(3, 3, 3, 1.0, &mut rng);
        p.set_identity();
        assert_eq!(conv2d_forward(&x, &p).unwrap(), x);
        let mut dense = ConvParams::init(3, 3, 3, 3, ConvGeom::same(3, 3, 1), 1.0, &mut rng).unwrap();
        dense.set_identity();
        assert_eq!(conv2d_forward(&x, &dense).unwrap(), x);
    }

    #[test]
    fn all_ones_kernel_on_3x3_grid() {
        let p = ConvParams::new(
            Tensor::full([1, 1, 3, 3], 1.0),
            Tensor::zeros([1, 1, 1, 1]),
            ConvGeom::same(3, 3, 1),
        )
        .unwrap();
        let y = conv2d_forward(&grid3(), &p).unwrap();
        assert_eq!(y.get(0, 0, 1, 1), 45.0);
        assert_eq!(y.get(0, 0, 0, 0), 12.0);
        assert_eq!(y, naive_conv(&grid3(), &p));
    }

    #[test]
    fn matches_naive_for_assorted_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cases = [
            (4, 6, 3, 3, ConvGeom::strided(2, 1, 2)),
            (3, 3, 7, 7, ConvGeom::strided(4, 3, 1)),
            (4, 4, 1, 5, ConvGeom::same(1, 5, 4)),
            (4, 4, 7, 1, ConvGeom::same(7, 1, 4)),
            (2, 2, 3, 3, ConvGeom::same_dilated(3, 3, 3, 2)),
            (
                2,
                4,
                2,
                3,
                ConvGeom {
                    stride: 3,
                    padding: [0, 2, 1, 0],
                    dilation: 2,
                    groups: 2,
                },
            ),
        ];
        for (ic, oc, kh, kw, geom) in cases {
            let p = ConvParams::init(ic, oc, kh, kw, geom, 1.0, &mut rng).unwrap();
            let mut p = p;
            p.bias = Tensor::randn(p.bias.dims(), 1.0, &mut rng);
            let x = Tensor::randn([2, ic, 9, 11], 1.0, &mut rng);
            let fast = conv2d_forward(&x, &p).unwrap();
            let slow = naive_conv(&x, &p);
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12, "{geom:?}");
        }
    }

    #[test]
    fn depthwise_equals_independent_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn([2, 3, 6, 6], 1.0, &mut rng);
        let p = ConvParams::depthwise(3, 3, 5, 1.0, &mut rng);
        let y = conv2d_forward(&x, &p).unwrap();
        for c in 0..3 {
            let mut xc = Tensor::zeros([2, 1, 6, 6]);
            for b in 0..2 {
                for i in 0..6 {
                    for j in 0..6 {
                        xc.set(b, 0, i, j, x.get(b, c, i, j));
                    }
                }
            }
            let kc = Tensor::from_vec([1, 1, 3, 5], p.kernel.data()[c * 15..(c + 1) * 15].to_vec())
                .unwrap();
            let pc = ConvParams::new(kc, Tensor::zeros([1, 1, 1, 1]), ConvGeom::same(3, 5, 1))
                .unwrap();
            let yc = conv2d_forward(&xc, &pc).unwrap();
            for b in 0..2 {
                for i in 0..6 {
                    for j in 0..6 {
                        assert_eq!(yc.get(b, 0, i, j), y.get(b, c, i, j));
                    }
                }
            }
        }
    }

    #[test]
    fn adjoint_identity_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for geom in [
            ConvGeom::same(3, 3, 1),
            ConvGeom::strided(2, 1, 1),
            ConvGeom::same_dilated(3, 3, 2, 1),
        ] {
            let mut p = ConvParams::init(2, 2, 3, 3, geom, 1.0, &mut rng).unwrap();
            p.bias.data_mut().fill(0.0);
            let x = Tensor::randn([2, 2, 8, 9], 1.0, &mut rng);
            let y = conv2d_forward(&x, &p).unwrap();
            let g = Tensor::randn(y.dims(), 1.0, &mut rng);
            let grads = conv2d_backward(&g, &x, &p).unwrap();
            let lhs = y.dot(&g).unwrap();
            let rhs = x.dot(&grads.input).unwrap();
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn zero_grad_gives_zero_grads_and_identity_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn([1, 2, 5, 5], 1.0, &mut rng);
        let mut p = ConvParams::depthwise(2, 3, 3, 1.0, &mut rng);
        let g0 = conv2d_backward(&Tensor::zeros([1, 2, 5, 5]), &x, &p).unwrap();
        assert_eq!(g0.input.max_abs() + g0.kernel.max_abs() + g0.bias.max_abs(), 0.0);
        p.set_identity();
        let g = Tensor::randn([1, 2, 5, 5], 1.0, &mut rng);
        assert_eq!(conv2d_backward(&g, &x, &p).unwrap().input, g);
    }

    #[test]
    fn errors_on_bad_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = ConvParams::pointwise(3, 4, 1.0, &mut rng);
        assert!(conv2d_forward(&Tensor::zeros([1, 2, 4, 4]), &p).is_err());
        assert!(ConvParams::zeros(3, 4, 3, 3, ConvGeom::same(3, 3, 2)).is_err());
        let big = ConvParams::init(1, 1, 5, 5, ConvGeom::strided(1, 0, 1), 1.0, &mut rng).unwrap();
        assert!(conv2d_forward(&Tensor::zeros([1, 1, 3, 3]), &big).is_err());
        let x = Tensor::zeros([1, 3, 4, 4]);
        assert!(conv2d_backward(&Tensor::zeros([1, 4, 3, 3]), &x, &p).is_err());
    }

    #[test]
    fn strip_convolutions_commute() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::randn([1, 3, 13, 17], 1.0, &mut rng);
        let row = ConvParams::depthwise(3, 1, 7, 1.0, &mut rng);
        let col = ConvParams::depthwise(3, 7, 1, 1.0, &mut rng);
        let a = conv2d_forward(&conv2d_forward(&x, &row).unwrap(), &col).unwrap();
        let b = conv2d_forward(&conv2d_forward(&x, &col).unwrap(), &row).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-9);
    }
}
