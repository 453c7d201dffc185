use std::borrow::Cow;

use super::gemm::{gemm, Mat};
use super::{Graph, Var};
use crate::error::{Error, Result};

/// Output length of a convolution along one axis.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding).saturating_sub(kernel) / stride + 1
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col<'a>(&self, x: &'a [f64]) -> Cow<'a, [f64]> {
        if self.is_pointwise() {
            return Cow::Borrowed(x);
        }
        let mut col = vec![0.0; self.col_rows() * self.col_cols()];
        let p = self.col_cols();
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ci * self.kh + ky) * self.kw + kx) * p;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let dst = &mut col[row + oy * self.wo..row + (oy + 1) * self.wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        Cow::Owned(col)
    }

    fn col2im_add(&self, col: &[f64], dx: &mut [f64]) {
        if self.is_pointwise() {
            dx.iter_mut().zip(col).for_each(|(a, b)| *a += b);
            return;
        }
        let p = self.col_cols();
        for ci in 0..self.c {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ci * self.kh + ky) * self.kw + kx) * p;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &col[row + oy * self.wo..row + (oy + 1) * self.wo];
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn same_shape(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", g.shape(a), g.shape(b)),
        ));
    }
    Ok(())
}

impl Graph {
    /// 2-D cross-correlation. `x` is `[C,H,W]` or `[N,C,H,W]`, `weight` is
    /// `[Co,C,kh,kw]`, `bias` is `[Co]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::StrideInvalid(0));
        }
        let xs = self.shape(x).to_vec();
        let (n, c, h, w, batched) = match xs.as_slice() {
            &[c, h, w] => (1, c, h, w, false),
            &[n, c, h, w] => (n, c, h, w, true),
            _ => return Err(Error::shape("conv2d", format!("input must be 3-D or 4-D, got {xs:?}"))),
        };
        let ws = self.shape(weight).to_vec();
        let &[co, ci, kh, kw] = ws.as_slice() else {
            return Err(Error::shape("conv2d", format!("weight must be 4-D, got {ws:?}")));
        };
        if ci != c {
            return Err(Error::shape("conv2d", format!("input has {c} channels, weight expects {ci}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [co] {
                return Err(Error::shape("conv2d", format!("bias shape {:?}, want [{co}]", self.shape(b))));
            }
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape("conv2d", "kernel larger than padded input"));
        }
        let geom = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            ho: conv_output_size(h, kh, stride, padding),
            wo: conv_output_size(w, kw, stride, padding),
        };
        let in_len = c * h * w;
        let out_len = co * geom.ho * geom.wo;
        let p = geom.col_cols();
        let k = geom.col_rows();
        let mut out = vec![0.0; n * out_len];
        {
            let xv = self.value(x);
            let wv = self.value(weight);
            let bv = bias.map(|b| self.value(b));
            for i in 0..n {
                let col = geom.im2col(&xv[i * in_len..(i + 1) * in_len]);
                let o = &mut out[i * out_len..(i + 1) * out_len];
                if let Some(bv) = bv {
                    for (oc, chunk) in o.chunks_mut(p).enumerate() {
                        chunk.iter_mut().for_each(|v| *v = bv[oc]);
                    }
                }
                gemm(Mat::new(wv, co, k), Mat::new(&col, k, p), o, 1.0);
            }
        }
        let shape = if batched {
            vec![n, co, geom.ho, geom.wo]
        } else {
            vec![co, geom.ho, geom.wo]
        };
        let mut parents = vec![x, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.push_op(&parents, shape, out, move |a| {
            let xv = a.inputs[0];
            let wv = a.inputs[1];
            let mut dx = a.needs[0].then(|| vec![0.0; n * in_len]);
            let mut dw = a.needs[1].then(|| vec![0.0; co * k]);
            let mut db = (has_bias && a.needs[2]).then(|| vec![0.0; co]);
            let mut dcol = vec![0.0; if dx.is_some() { k * p } else { 0 }];
            for i in 0..n {
                let go = &a.grad[i * out_len..(i + 1) * out_len];
                if let Some(dw) = dw.as_mut() {
                    let col = geom.im2col(&xv[i * in_len..(i + 1) * in_len]);
                    gemm(Mat::new(go, co, p), Mat::new(&col, k, p).t(), dw, 1.0);
                }
                if let Some(db) = db.as_mut() {
                    for (oc, chunk) in go.chunks(p).enumerate() {
                        db[oc] += chunk.iter().sum::<f64>();
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    gemm(Mat::new(wv, co, k).t(), Mat::new(go, co, p), &mut dcol, 0.0);
                    geom.col2im_add(&dcol, &mut dx[i * in_len..(i + 1) * in_len]);
                }
            }
            let mut res = vec![dx, dw];
            if has_bias {
                res.push(db);
            }
            res
        })
    }

    /// Grouped 1x1 convolution over row vectors: `x` is `[L, G*C]`, `weight`
    /// `[G, C]`, `bias` `[G]`; output `[L, G]` where output `g` only sees input
    /// channels `g*C..(g+1)*C`.
    pub fn grouped_conv1x1(&mut self, x: Var, groups: usize, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let &[l, d] = xs.as_slice() else {
            return Err(Error::shape("grouped_conv1x1", format!("input must be [L, G*C], got {xs:?}")));
        };
        if groups == 0 || d % groups != 0 {
            return Err(Error::shape("grouped_conv1x1", format!("{d} channels not divisible by {groups} groups")));
        }
        let c = d / groups;
        if self.shape(weight) != [groups, c] || self.shape(bias) != [groups] {
            return Err(Error::shape(
                "grouped_conv1x1",
                format!("weight {:?} / bias {:?} for {groups} groups of {c}", self.shape(weight), self.shape(bias)),
            ));
        }
        let (xv, wv, bv) = (self.value(x), self.value(weight), self.value(bias));
        let mut out = vec![0.0; l * groups];
        for (row, o) in xv.chunks(d).zip(out.chunks_mut(groups)) {
            for (gi, og) in o.iter_mut().enumerate() {
                let xs = &row[gi * c..(gi + 1) * c];
                let ws = &wv[gi * c..(gi + 1) * c];
                *og = bv[gi] + xs.iter().zip(ws).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        self.push_op(&[x, weight, bias], vec![l, groups], out, move |a| {
            let (xv, wv, go) = (a.inputs[0], a.inputs[1], a.grad);
            let mut dx = a.needs[0].then(|| vec![0.0; l * d]);
            let mut dw = a.needs[1].then(|| vec![0.0; groups * c]);
            let mut db = a.needs[2].then(|| vec![0.0; groups]);
            for li in 0..l {
                for gi in 0..groups {
                    let gv = go[li * groups + gi];
                    if gv == 0.0 {
                        continue;
                    }
                    let base = li * d + gi * c;
                    if let Some(dx) = dx.as_mut() {
                        for j in 0..c {
                            dx[base + j] += gv * wv[gi * c + j];
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        for j in 0..c {
                            dw[gi * c + j] += gv * xv[base + j];
                        }
                    }
                    if let Some(db) = db.as_mut() {
                        db[gi] += gv;
                    }
                }
            }
            vec![dx, dw, db]
        })
    }

    /// Dense map of row vectors: `x` `[L, D]`, `weight` `[G, D]`, `bias` `[G]` -> `[L, G]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let (&[l, d], &[g, d2]) = (xs.as_slice(), ws.as_slice()) else {
            return Err(Error::shape("linear", format!("input {xs:?}, weight {ws:?}")));
        };
        if d != d2 || self.shape(bias) != [g] {
            return Err(Error::shape("linear", format!("input {xs:?}, weight {ws:?}, bias {:?}", self.shape(bias))));
        }
        let mut out = vec![0.0; l * g];
        for row in out.chunks_mut(g) {
            row.copy_from_slice(self.value(bias));
        }
        gemm(
            Mat::new(self.value(x), l, d),
            Mat::new(self.value(weight), g, d).t(),
            &mut out,
            1.0,
        );
        self.push_op(&[x, weight, bias], vec![l, g], out, move |a| {
            let go = Mat::new(a.grad, l, g);
            let dx = a.needs[0].then(|| {
                let mut dx = vec![0.0; l * d];
                gemm(go, Mat::new(a.inputs[1], g, d), &mut dx, 0.0);
                dx
            });
            let dw = a.needs[1].then(|| {
                let mut dw = vec![0.0; g * d];
                gemm(go.t(), Mat::new(a.inputs[0], l, d), &mut dw, 0.0);
                dw
            });
            let db = a.needs[2].then(|| {
                let mut db = vec![0.0; g];
                for row in a.grad.chunks(g) {
                    db.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                }
                db
            });
            vec![dx, dw, db]
        })
    }

    /// Bilinear read of a `[C,H,W]` map at `[K,2]` fractional `(x, y)` grid
    /// coordinates, where integer coordinates hit cell centers. Taps outside
    /// the map read zero. Output `[K, C]`.
    pub fn bilinear_sample(&mut self, features: Var, points: Var) -> Result<Var> {
        let fs = self.shape(features).to_vec();
        let &[c, h, w] = fs.as_slice() else {
            return Err(Error::shape("bilinear_sample", format!("features must be [C,H,W], got {fs:?}")));
        };
        let ps = self.shape(points).to_vec();
        let &[k, 2] = ps.as_slice() else {
            return Err(Error::shape("bilinear_sample", format!("points must be [K,2], got {ps:?}")));
        };
        let fv = self.value(features);
        let pv = self.value(points);
        let mut out = vec![0.0; k * c];
        for (pt, o) in pv.chunks(2).zip(out.chunks_mut(c)) {
            for (tap, wgt) in bilinear_taps(pt[0], pt[1], h, w) {
                if let Some(idx) = tap {
                    for (ch, ov) in o.iter_mut().enumerate() {
                        *ov += wgt * fv[ch * h * w + idx];
                    }
                }
            }
        }
        self.push_op(&[features, points], vec![k, c], out, move |a| {
            let (fv, pv, go) = (a.inputs[0], a.inputs[1], a.grad);
            let mut df = a.needs[0].then(|| vec![0.0; c * h * w]);
            let mut dp = a.needs[1].then(|| vec![0.0; k * 2]);
            for (i, pt) in pv.chunks(2).enumerate() {
                let g = &go[i * c..(i + 1) * c];
                if let Some(df) = df.as_mut() {
                    for (tap, wgt) in bilinear_taps(pt[0], pt[1], h, w) {
                        if let Some(idx) = tap {
                            for (ch, gv) in g.iter().enumerate() {
                                df[ch * h * w + idx] += wgt * gv;
                            }
                        }
                    }
                }
                if let Some(dp) = dp.as_mut() {
                    let (x, y) = (pt[0], pt[1]);
                    let (x0, y0) = (x.floor(), y.floor());
                    let (fx, fy) = (x - x0, y - y0);
                    let read = |cx: f64, cy: f64, ch: usize| -> f64 {
                        if cx < 0.0 || cy < 0.0 || cx >= w as f64 || cy >= h as f64 {
                            0.0
                        } else {
                            fv[ch * h * w + cy as usize * w + cx as usize]
                        }
                    };
                    let (mut gx, mut gy) = (0.0, 0.0);
                    for (ch, gv) in g.iter().enumerate() {
                        if *gv == 0.0 {
                            continue;
                        }
                        let f00 = read(x0, y0, ch);
                        let f10 = read(x0 + 1.0, y0, ch);
                        let f01 = read(x0, y0 + 1.0, ch);
                        let f11 = read(x0 + 1.0, y0 + 1.0, ch);
                        gx += gv * ((1.0 - fy) * (f10 - f00) + fy * (f11 - f01));
                        gy += gv * ((1.0 - fx) * (f01 - f00) + fx * (f11 - f10));
                    }
                    dp[2 * i] = gx;
                    dp[2 * i + 1] = gy;
                }
            }
            vec![df, dp]
        })
    }

    /// Maps per-location polar radii (`[L, n]`, image pixels) to `[L*n, 2]`
    /// grid coordinates: `x = xc + r sin(theta)/s`, `y = yc + r cos(theta)/s`.
    pub fn transform_coordinates(&mut self, radii: Var, centers: &[(f64, f64)], stride: f64) -> Result<Var> {
        let rs = self.shape(radii).to_vec();
        let &[l, n] = rs.as_slice() else {
            return Err(Error::shape("transform_coordinates", format!("radii must be [L, n], got {rs:?}")));
        };
        if centers.len() != l {
            return Err(Error::shape("transform_coordinates", format!("{} centers for {l} locations", centers.len())));
        }
        let trig: Vec<(f64, f64)> = crate::polar_codec::ray_angles(n)
            .map(|t| (t.sin() / stride, t.cos() / stride))
            .collect();
        let rv = self.value(radii);
        let mut out = Vec::with_capacity(l * n * 2);
        for (li, &(xc, yc)) in centers.iter().enumerate() {
            for (k, &(sx, cy)) in trig.iter().enumerate() {
                let r = rv[li * n + k];
                out.push(xc + r * sx);
                out.push(yc + r * cy);
            }
        }
        self.push_op(&[radii], vec![l * n, 2], out, move |a| {
            let dr = (0..l * n)
                .map(|i| {
                    let (sx, cy) = trig[i % n];
                    a.grad[2 * i] * sx + a.grad[2 * i + 1] * cy
                })
                .collect();
            vec![Some(dr)]
        })
    }

    /// Rows of a `[C,H,W]` map at flat cell indices `row * W + col`; output `[L, C]`.
    pub fn gather_cells(&mut self, x: Var, cells: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let &[c, h, w] = xs.as_slice() else {
            return Err(Error::shape("gather_cells", format!("input must be [C,H,W], got {xs:?}")));
        };
        if let Some(&bad) = cells.iter().find(|&&i| i >= h * w) {
            return Err(Error::shape("gather_cells", format!("cell {bad} outside {h}x{w}")));
        }
        let xv = self.value(x);
        let l = cells.len();
        let mut out = vec![0.0; l * c];
        for (li, &cell) in cells.iter().enumerate() {
            for ch in 0..c {
                out[li * c + ch] = xv[ch * h * w + cell];
            }
        }
        let cells = cells.to_vec();
        self.push_op(&[x], vec![l, c], out, move |a| {
            let mut dx = vec![0.0; c * h * w];
            for (li, &cell) in cells.iter().enumerate() {
                for ch in 0..c {
                    dx[ch * h * w + cell] += a.grad[li * c + ch];
                }
            }
            vec![Some(dx)]
        })
    }

    /// Nearest-neighbour upsampling of `[C,H,W]` to `[C,out_h,out_w]`, source
    /// cell `(i * H / out_h, j * W / out_w)`.
    pub fn upsample_nearest(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let &[c, h, w] = xs.as_slice() else {
            return Err(Error::shape("upsample_nearest", format!("input must be [C,H,W], got {xs:?}")));
        };
        let map: Vec<usize> = (0..out_h)
            .flat_map(|i| (0..out_w).map(move |j| (i * h / out_h) * w + j * w / out_w))
            .collect();
        let xv = self.value(x);
        let mut out = Vec::with_capacity(c * out_h * out_w);
        for ch in 0..c {
            out.extend(map.iter().map(|&s| xv[ch * h * w + s]));
        }
        self.push_op(&[x], vec![c, out_h, out_w], out, move |a| {
            let mut dx = vec![0.0; c * h * w];
            let plane = out_h * out_w;
            for ch in 0..c {
                for (o, &s) in map.iter().enumerate() {
                    dx[ch * h * w + s] += a.grad[ch * plane + o];
                }
            }
            vec![Some(dx)]
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let v = self.value(x).to_vec();
        Ok(self.custom_op(&[x], shape.to_vec(), v, |a| vec![Some(a.grad.to_vec())]))
    }

    /// Flattens and concatenates.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let lens: Vec<usize> = parts.iter().map(|&p| self.value(p).len()).collect();
        let mut out = Vec::with_capacity(lens.iter().sum());
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let total = out.len();
        self.custom_op(parts, vec![total], out, move |a| {
            let mut off = 0;
            lens.iter()
                .map(|&n| {
                    let g = a.grad[off..off + n].to_vec();
                    off += n;
                    Some(g)
                })
                .collect()
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.custom_op(&[a, b], shape, out, |a| {
            vec![
                a.needs[0].then(|| a.grad.to_vec()),
                a.needs[1].then(|| a.grad.to_vec()),
            ]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.custom_op(&[a, b], shape, out, |a| {
            let (x, y) = (a.inputs[0], a.inputs[1]);
            vec![
                a.needs[0].then(|| a.grad.iter().zip(y).map(|(g, v)| g * v).collect()),
                a.needs[1].then(|| a.grad.iter().zip(x).map(|(g, v)| g * v).collect()),
            ]
        }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.custom_op(&[x], shape, out, |a| {
            let g = a
                .grad
                .iter()
                .zip(a.inputs[0])
                .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                .collect();
            vec![Some(g)]
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.custom_op(&[x], shape, out, |a| {
            let g = a.grad.iter().zip(a.output).map(|(g, s)| g * s * (1.0 - s)).collect();
            vec![Some(g)]
        })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        self.custom_op(&[x], shape, out, |a| {
            let g = a.grad.iter().zip(a.output).map(|(g, e)| g * e).collect();
            vec![Some(g)]
        })
    }

    /// Multiplies a whole tensor by a one-element (typically trainable) scalar.
    pub fn scalar_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scalar_scale", format!("scale must have one element, got {:?}", self.shape(s))));
        }
        let sv = self.value(s)[0];
        let out = self.value(x).iter().map(|v| v * sv).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.custom_op(&[x, s], shape, out, |a| {
            let sv = a.inputs[1][0];
            vec![
                a.needs[0].then(|| a.grad.iter().map(|g| g * sv).collect()),
                a.needs[1].then(|| vec![a.grad.iter().zip(a.inputs[0]).map(|(g, v)| g * v).sum()]),
            ]
        }))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.custom_op(&[x], shape, out, move |a| vec![Some(a.grad.iter().map(|g| g * c).collect())])
    }

    /// `max(x, floor)`; the gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(floor)).collect();
        let shape = self.shape(x).to_vec();
        self.custom_op(&[x], shape, out, move |a| {
            let g = a
                .grad
                .iter()
                .zip(a.inputs[0])
                .map(|(g, &v)| if v > floor { *g } else { 0.0 })
                .collect();
            vec![Some(g)]
        })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let n = self.value(x).len();
        self.custom_op(&[x], vec![1], vec![s], move |a| vec![Some(vec![a.grad[0]; n])])
    }

    fn push_op<F>(&mut self, parents: &[Var], shape: Vec<usize>, value: Vec<f64>, f: F) -> Result<Var>
    where
        F: Fn(&super::BackwardArgs<'_>) -> Vec<Option<Vec<f64>>> + 'static,
    {
        Ok(self.custom_op(parents, shape, value, f))
    }

    pub(crate) fn custom_op<F>(&mut self, parents: &[Var], shape: Vec<usize>, value: Vec<f64>, f: F) -> Var
    where
        F: Fn(&super::BackwardArgs<'_>) -> Vec<Option<Vec<f64>>> + 'static,
    {
        self.custom(parents, shape, value, Box::new(f))
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// The four bilinear taps of `(x, y)` as `(flat index if in range, weight)`.
fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> [(Option<usize>, f64); 4] {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let idx = |cx: f64, cy: f64| -> Option<usize> {
        (cx >= 0.0 && cy >= 0.0 && cx < w as f64 && cy < h as f64).then(|| cy as usize * w + cx as usize)
    };
    [
        (idx(x0, y0), (1.0 - fx) * (1.0 - fy)),
        (idx(x0 + 1.0, y0), fx * (1.0 - fy)),
        (idx(x0, y0 + 1.0), (1.0 - fx) * fy),
        (idx(x0 + 1.0, y0 + 1.0), fx * fy),
    ]
}
