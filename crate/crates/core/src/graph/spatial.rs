use super::{gemm, Graph, Op, Var};
use crate::error::{shape_err, Result};
use crate::flops;
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    cout: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }

    /// Visits (patch row, kernel offset in the patch, input offset) triples.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = oy * self.wo + ox;
                for ky in 0..self.k {
                    let iy = (oy * self.sh + ky) as isize - self.ph as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.k {
                        let ix = (ox * self.sw + kx) as isize - self.pw as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        f(row, (ky * self.k + kx) * self.cin, (iy as usize * self.w + ix as usize) * self.cin);
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let kc = self.patch();
        let cin = self.cin;
        let mut cols = vec![0.0; self.ho * self.wo * kc];
        self.for_each_tap(|row, koff, src| {
            let dst = row * kc + koff;
            cols[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
        });
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let kc = self.patch();
        let cin = self.cin;
        let mut x = vec![0.0; self.h * self.w * cin];
        self.for_each_tap(|row, koff, dst| {
            let src = row * kc + koff;
            for (a, b) in x[dst..dst + cin].iter_mut().zip(&cols[src..src + cin]) {
                *a += b;
            }
        });
        x
    }
}

/// Source index pairs and weights for bilinear resampling by an integer
/// factor (half-pixel centers, border clamp).
fn upsample_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let r0 = src.floor();
            let fr = src - r0;
            let i0 = (r0 as usize).min(n_in - 1);
            let i1 = (r0 as usize + 1).min(n_in - 1);
            (i0, i1, fr)
        })
        .collect()
}

/// Clamped corner indices and fractional weights for one sample point.
#[inline]
fn corners(r: f64, c: f64, h: usize, w: usize) -> (usize, usize, usize, usize, f64, f64) {
    let r0 = r.floor();
    let c0 = c.floor();
    let fr = r - r0;
    let fc = c - c0;
    let clamp = |v: f64, n: usize| -> usize { v.max(0.0).min((n - 1) as f64) as usize };
    (clamp(r0, h), clamp(r0 + 1.0, h), clamp(c0, w), clamp(c0 + 1.0, w), fr, fc)
}

impl Graph {
    fn conv_geom(&self, x: Var, k: Var, stride: (usize, usize), pad: (usize, usize)) -> Result<ConvGeom> {
        let (h, w, cin) = self.value(x).hwc("conv2d")?;
        let ks = self.shape(k);
        let [kh, kw, kcin, cout] = ks[..] else {
            return Err(shape_err("conv2d", "kernel rank", "[k, k, Cin, Cout]", ks));
        };
        if kh != kw || kh % 2 == 0 {
            return Err(shape_err("conv2d", "kernel spatial axes", "odd square k × k", (kh, kw)));
        }
        if kcin != cin {
            return Err(shape_err("conv2d", "input channels (axis 2 of x vs axis 2 of kernel)", cin, kcin));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(shape_err("conv2d", "stride", ">= 1", stride));
        }
        if h + 2 * pad.0 < kh {
            return Err(shape_err("conv2d", "height (axis 0)", format!(">= {}", kh - 2 * pad.0.min(kh / 2)), h));
        }
        if w + 2 * pad.1 < kw {
            return Err(shape_err("conv2d", "width (axis 1)", format!(">= {}", kw - 2 * pad.1.min(kw / 2)), w));
        }
        Ok(ConvGeom {
            h,
            w,
            cin,
            k: kh,
            cout,
            sh: stride.0,
            sw: stride.1,
            ph: pad.0,
            pw: pad.1,
            ho: (h + 2 * pad.0 - kh) / stride.0 + 1,
            wo: (w + 2 * pad.1 - kw) / stride.1 + 1,
        })
    }

    /// Zero-padded 2-D convolution of `x` [H, W, Cin] with `k` [k, k, Cin, Cout].
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        self.conv2d_strided(x, k, (stride, stride), (padding, padding))
    }

    /// Convolution with separate (row, column) stride and padding.
    pub fn conv2d_strided(&mut self, x: Var, k: Var, stride: (usize, usize), pad: (usize, usize)) -> Result<Var> {
        let geo = self.conv_geom(x, k, stride, pad)?;
        let cols = geo.im2col(self.value(x).data());
        let p = geo.ho * geo.wo;
        let mut out = vec![0.0; p * geo.cout];
        gemm(p, geo.patch(), geo.cout, &cols, false, self.value(k).data(), false, 0.0, &mut out);
        flops::add((p * geo.patch() * geo.cout) as u64);
        let t = Tensor::new(&[geo.ho, geo.wo, geo.cout], out)?;
        Ok(self.push(t, Op::Conv2d { x, k, stride, pad }, &[x, k]))
    }

    pub(super) fn bw_conv2d(
        &self,
        x: Var,
        k: Var,
        stride: (usize, usize),
        pad: (usize, usize),
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let geo = self.conv_geom(x, k, stride, pad).expect("validated in forward");
        let p = geo.ho * geo.wo;
        let kc = geo.patch();
        if self.requires_grad(k) {
            let cols = geo.im2col(self.value(x).data());
            let mut dk = vec![0.0; kc * geo.cout];
            gemm(kc, p, geo.cout, &cols, true, g.data(), false, 0.0, &mut dk);
            self.accumulate(grads, k, Tensor::new(self.shape(k), dk).unwrap());
        }
        if self.requires_grad(x) {
            let mut dcols = vec![0.0; p * kc];
            gemm(p, geo.cout, kc, g.data(), false, self.value(k).data(), true, 0.0, &mut dcols);
            let dx = geo.col2im(&dcols);
            self.accumulate(grads, x, Tensor::new(self.shape(x), dx).unwrap());
        }
    }

    /// 2 × 2 average pooling with stride 2; extents must be even.
    pub fn avgpool2(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = self.value(x).hwc("avgpool2")?;
        if h % 2 != 0 {
            return Err(shape_err("avgpool2", "height (axis 0)", "even", h));
        }
        if w % 2 != 0 {
            return Err(shape_err("avgpool2", "width (axis 1)", "even", w));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = vec![0.0; ho * wo * c];
        for i in 0..ho {
            for j in 0..wo {
                let o = (i * wo + j) * c;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let s = ((2 * i + dy) * w + 2 * j + dx) * c;
                    for ch in 0..c {
                        out[o + ch] += 0.25 * xd[s + ch];
                    }
                }
            }
        }
        flops::add((h * w * c) as u64);
        let t = Tensor::new(&[ho, wo, c], out)?;
        Ok(self.push(t, Op::AvgPool2(x), &[x]))
    }

    pub(super) fn bw_avgpool2(&self, x: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (h, w, c) = self.value(x).hwc("avgpool2").unwrap();
        let wo = w / 2;
        let gd = g.data();
        let mut dx = vec![0.0; h * w * c];
        for i in 0..h {
            for j in 0..w {
                let o = ((i / 2) * wo + j / 2) * c;
                let s = (i * w + j) * c;
                for ch in 0..c {
                    dx[s + ch] = 0.25 * gd[o + ch];
                }
            }
        }
        self.accumulate(grads, x, Tensor::new(&[h, w, c], dx).unwrap());
    }

    /// Bilinear upsampling of [H, W, C] by an integer factor.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (h, w, c) = self.value(x).hwc("upsample_bilinear")?;
        if factor == 0 {
            return Err(shape_err("upsample_bilinear", "factor", ">= 1", 0));
        }
        let (rt, ct) = (upsample_taps(h, factor), upsample_taps(w, factor));
        let xd = self.value(x).data();
        let wo = w * factor;
        let mut out = vec![0.0; h * factor * wo * c];
        for (oy, &(r0, r1, fr)) in rt.iter().enumerate() {
            for (ox, &(c0, c1, fc)) in ct.iter().enumerate() {
                let o = (oy * wo + ox) * c;
                for (ri, wr) in [(r0, 1.0 - fr), (r1, fr)] {
                    for (ci, wc) in [(c0, 1.0 - fc), (c1, fc)] {
                        let wgt = wr * wc;
                        let s = (ri * w + ci) * c;
                        for ch in 0..c {
                            out[o + ch] += wgt * xd[s + ch];
                        }
                    }
                }
            }
        }
        flops::add(4 * out.len() as u64);
        let t = Tensor::new(&[h * factor, wo, c], out)?;
        Ok(self.push(t, Op::Upsample { x, factor }, &[x]))
    }

    pub(super) fn bw_upsample(&self, x: Var, factor: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (h, w, c) = self.value(x).hwc("upsample_bilinear").unwrap();
        let (rt, ct) = (upsample_taps(h, factor), upsample_taps(w, factor));
        let gd = g.data();
        let wo = w * factor;
        let mut dx = vec![0.0; h * w * c];
        for (oy, &(r0, r1, fr)) in rt.iter().enumerate() {
            for (ox, &(c0, c1, fc)) in ct.iter().enumerate() {
                let o = (oy * wo + ox) * c;
                for (ri, wr) in [(r0, 1.0 - fr), (r1, fr)] {
                    for (ci, wc) in [(c0, 1.0 - fc), (c1, fc)] {
                        let wgt = wr * wc;
                        let s = (ri * w + ci) * c;
                        for ch in 0..c {
                            dx[s + ch] += wgt * gd[o + ch];
                        }
                    }
                }
            }
        }
        self.accumulate(grads, x, Tensor::new(&[h, w, c], dx).unwrap());
    }

    /// Samples `x` [H, W, C] at fractional (row, col) points `coords` [..., 2]
    /// with four-neighbour interpolation; reads outside the map clamp to the
    /// border. Output shape is `coords` with the last axis replaced by C.
    pub fn bilinear_sample(&mut self, x: Var, coords: Var) -> Result<Var> {
        let (h, w, c) = self.value(x).hwc("bilinear_sample")?;
        let cs = self.shape(coords).to_vec();
        if cs.last() != Some(&2) {
            return Err(shape_err("bilinear_sample", "last axis of coords", 2, cs.last()));
        }
        let xd = self.value(x).data();
        let cd = self.value(coords).data();
        let npts = cd.len() / 2;
        let mut out = vec![0.0; npts * c];
        for p in 0..npts {
            let (r0, r1, c0, c1, fr, fc) = corners(cd[2 * p], cd[2 * p + 1], h, w);
            let o = &mut out[p * c..(p + 1) * c];
            for (ri, wr) in [(r0, 1.0 - fr), (r1, fr)] {
                for (ci, wc) in [(c0, 1.0 - fc), (c1, fc)] {
                    let wgt = wr * wc;
                    let s = (ri * w + ci) * c;
                    for (ov, xv) in o.iter_mut().zip(&xd[s..s + c]) {
                        *ov += wgt * xv;
                    }
                }
            }
        }
        flops::add(4 * out.len() as u64);
        let mut shape = cs;
        *shape.last_mut().unwrap() = c;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::BilinearSample { x, coords }, &[x, coords]))
    }

    pub(super) fn bw_bilinear(&self, x: Var, coords: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (h, w, c) = self.value(x).hwc("bilinear_sample").unwrap();
        let xd = self.value(x).data();
        let cd = self.value(coords).data();
        let gd = g.data();
        let npts = cd.len() / 2;
        let want_x = self.requires_grad(x);
        let want_c = self.requires_grad(coords);
        let mut dx = if want_x { vec![0.0; h * w * c] } else { Vec::new() };
        let mut dc = if want_c { vec![0.0; cd.len()] } else { Vec::new() };
        for p in 0..npts {
            let (r0, r1, c0, c1, fr, fc) = corners(cd[2 * p], cd[2 * p + 1], h, w);
            let gp = &gd[p * c..(p + 1) * c];
            if want_x {
                for (ri, wr) in [(r0, 1.0 - fr), (r1, fr)] {
                    for (ci, wc) in [(c0, 1.0 - fc), (c1, fc)] {
                        let wgt = wr * wc;
                        let s = (ri * w + ci) * c;
                        for (d, gv) in dx[s..s + c].iter_mut().zip(gp) {
                            *d += wgt * gv;
                        }
                    }
                }
            }
            if want_c {
                let px = |ri: usize, ci: usize| &xd[(ri * w + ci) * c..(ri * w + ci + 1) * c];
                let (x00, x01, x10, x11) = (px(r0, c0), px(r0, c1), px(r1, c0), px(r1, c1));
                let mut dr = 0.0;
                let mut dcol = 0.0;
                for ch in 0..c {
                    dr += gp[ch] * ((1.0 - fc) * (x10[ch] - x00[ch]) + fc * (x11[ch] - x01[ch]));
                    dcol += gp[ch] * ((1.0 - fr) * (x01[ch] - x00[ch]) + fr * (x11[ch] - x10[ch]));
                }
                // clamped reads are flat in the coordinate
                let r = cd[2 * p];
                let col = cd[2 * p + 1];
                if r < 0.0 || r > (h - 1) as f64 {
                    dr = 0.0;
                }
                if col < 0.0 || col > (w - 1) as f64 {
                    dcol = 0.0;
                }
                dc[2 * p] = dr;
                dc[2 * p + 1] = dcol;
            }
        }
        if want_x {
            self.accumulate(grads, x, Tensor::new(&[h, w, c], dx).unwrap());
        }
        if want_c {
            self.accumulate(grads, coords, Tensor::new(self.shape(coords), dc).unwrap());
        }
    }
}
