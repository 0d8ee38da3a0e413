//! Forward/backward rules for every differentiable operation.
//!
//! Layout conventions: activations are NCHW, convolution weights are OIHW,
//! linear weights are (out, in). `bilinear_resize` uses the
//! align-corners-false convention. All reductions run in a fixed order, so
//! identical seeds and inputs give bit-identical values and gradients.

use super::tape::{BackwardFn, Tape, Var};
use super::{bilinear_resize_plane, Element, Tensor, TensorError};

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn invalid(op: &'static str, detail: String) -> TensorError {
    TensorError::InvalidArgument { op, detail }
}

/// Unpack `(dst_index, src_index, weight)` triples for a 1-d
/// align-corners-false resize axis.
fn resize_axis(in_size: usize, out_size: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_size as f64 / out_size as f64;
    (0..out_size)
        .map(|o| {
            let f = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_size - 1) as f64);
            let i0 = f.floor() as usize;
            let i1 = (i0 + 1).min(in_size - 1);
            (i0, i1, f - i0 as f64)
        })
        .collect()
}

fn im2col<T: Element>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    // cols: (C*kh*kw) x (oh*ow), row-major
    let plane = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * plane;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = row + oy * ow;
                    if iy < 0 || iy >= h as isize {
                        cols[dst..dst + ow].fill(T::ZERO);
                        continue;
                    }
                    let src_row = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        cols[dst + ox] = if ix < 0 || ix >= w as isize {
                            T::ZERO
                        } else {
                            x[src_row + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Element>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let plane = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * plane;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[dst_row + ix as usize] += cols[row + oy * ow + ox];
                    }
                }
            }
        }
    }
}

impl<T: Element> Tape<T> {
    /// 2-d convolution, NCHW input against OIHW weight plus a length-O bias.
    /// Output spatial size is `floor((in + 2*pad - k) / stride) + 1`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        if stride < 1 {
            return Err(invalid("conv2d", format!("stride must be >= 1, got {stride}")));
        }
        let (n, c, h, w) = self.value(input).dims4("conv2d")?;
        let (o, i, kh, kw) = self.value(weight).dims4("conv2d")?;
        if i != c {
            return Err(shape_err(
                "conv2d",
                format!("input has {c} channels but weight expects {i}"),
            ));
        }
        if self.value(bias).shape() != [o] {
            return Err(shape_err(
                "conv2d",
                format!(
                    "bias shape {:?} does not match {o} output channels",
                    self.value(bias).shape()
                ),
            ));
        }
        let oh = (h + 2 * padding).checked_sub(kh).map(|v| v / stride + 1);
        let ow = (w + 2 * padding).checked_sub(kw).map(|v| v / stride + 1);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})"),
            ));
        };

        let ckk = c * kh * kw;
        let plane = oh * ow;
        let mut out = vec![T::ZERO; n * o * plane];
        let mut cols_cache: Vec<Vec<T>> = Vec::with_capacity(n);
        {
            let x = self.value(input).data();
            let wt = self.value(weight).data();
            let b = self.value(bias).data();
            for bi in 0..n {
                let mut cols = vec![T::ZERO; ckk * plane];
                im2col(
                    &x[bi * c * h * w..(bi + 1) * c * h * w],
                    c,
                    h,
                    w,
                    kh,
                    kw,
                    stride,
                    padding,
                    oh,
                    ow,
                    &mut cols,
                );
                let dst = &mut out[bi * o * plane..(bi + 1) * o * plane];
                T::gemm_strided(
                    o,
                    ckk,
                    plane,
                    T::ONE,
                    wt,
                    (ckk as isize, 1),
                    &cols,
                    (plane as isize, 1),
                    T::ZERO,
                    dst,
                );
                for oc in 0..o {
                    let bv = b[oc];
                    for v in dst[oc * plane..(oc + 1) * plane].iter_mut() {
                        *v += bv;
                    }
                }
                cols_cache.push(cols);
            }
        }

        let requires = self.requires_grad(input)
            || self.requires_grad(weight)
            || self.requires_grad(bias);
        let step: Option<BackwardFn<T>> = if requires {
            Some(Box::new(move |vals, gout, grads| {
                let g = gout.data();
                if let Some(db) = grads.buf(bias, &[o]) {
                    for bi in 0..n {
                        for oc in 0..o {
                            let base = (bi * o + oc) * plane;
                            let mut acc = T::ZERO;
                            for &gv in &g[base..base + plane] {
                                acc += gv;
                            }
                            db[oc] += acc;
                        }
                    }
                }
                if grads.needs(weight) {
                    // dW += dOut[n] (O x plane) @ cols[n]^T (plane x CKK)
                    let dw = grads.buf(weight, &[o, c, kh, kw]).unwrap();
                    for bi in 0..n {
                        T::gemm_strided(
                            o,
                            plane,
                            ckk,
                            T::ONE,
                            &g[bi * o * plane..(bi + 1) * o * plane],
                            (plane as isize, 1),
                            &cols_cache[bi],
                            (1, plane as isize),
                            T::ONE,
                            dw,
                        );
                    }
                }
                if grads.needs(input) {
                    let wt = vals.value(weight).data().to_vec();
                    let dx = grads.buf(input, &[n, c, h, w]).unwrap();
                    let mut dcols = vec![T::ZERO; ckk * plane];
                    for bi in 0..n {
                        // dCols = W^T (CKK x O) @ dOut[n] (O x plane)
                        T::gemm_strided(
                            ckk,
                            o,
                            plane,
                            T::ONE,
                            &wt,
                            (1, ckk as isize),
                            &g[bi * o * plane..(bi + 1) * o * plane],
                            (plane as isize, 1),
                            T::ZERO,
                            &mut dcols,
                        );
                        col2im_add(
                            &dcols,
                            c,
                            h,
                            w,
                            kh,
                            kw,
                            stride,
                            padding,
                            oh,
                            ow,
                            &mut dx[bi * c * h * w..(bi + 1) * c * h * w],
                        );
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(Tensor::new(vec![n, o, oh, ow], out)?, requires, step))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<T> =
            self.value(x).data().iter().map(|&v| v.maximum(T::ZERO)).collect();
        let shape = self.value(x).shape().to_vec();
        let requires = self.requires_grad(x);
        let step: Option<BackwardFn<T>> = if requires {
            let sh = shape.clone();
            Some(Box::new(move |vals, gout, grads| {
                let xv = vals.value(x);
                if let Some(dx) = grads.buf(x, &sh) {
                    for ((d, &g), &v) in dx.iter_mut().zip(gout.data()).zip(xv.data()) {
                        if v > T::ZERO {
                            *d += g;
                        }
                    }
                }
            }))
        } else {
            None
        };
        self.push(Tensor { shape, data: out }.validate(), requires, step)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out: Vec<T> = self.value(x).data().iter().map(|&v| stable_sigmoid(v)).collect();
        let shape = self.value(x).shape().to_vec();
        let requires = self.requires_grad(x);
        let out_var = self.next_id();
        let step: Option<BackwardFn<T>> = if requires {
            let sh = shape.clone();
            Some(Box::new(move |vals, gout, grads| {
                let s = vals.value(out_var);
                if let Some(dx) = grads.buf(x, &sh) {
                    for ((d, &g), &sv) in dx.iter_mut().zip(gout.data()).zip(s.data()) {
                        *d += g * sv * (T::ONE - sv);
                    }
                }
            }))
        } else {
            None
        };
        self.push(Tensor { shape, data: out }.validate(), requires, step)
    }

    /// Elementwise sum; shapes must match exactly (no broadcasting).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let requires = self.requires_grad(a) || self.requires_grad(b);
        let step: Option<BackwardFn<T>> = if requires {
            let sh = shape.clone();
            Some(Box::new(move |_vals, gout, grads| {
                for var in [a, b] {
                    if let Some(d) = grads.buf(var, &sh) {
                        for (di, &g) in d.iter_mut().zip(gout.data()) {
                            *di += g;
                        }
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(Tensor { shape, data: out }.validate(), requires, step))
    }

    pub fn scalar_mul(&mut self, x: Var, k: f64) -> Var {
        let kt = T::from_f64(k);
        let out: Vec<T> = self.value(x).data().iter().map(|&v| v * kt).collect();
        let shape = self.value(x).shape().to_vec();
        let requires = self.requires_grad(x);
        let step: Option<BackwardFn<T>> = if requires {
            let sh = shape.clone();
            Some(Box::new(move |_vals, gout, grads| {
                if let Some(d) = grads.buf(x, &sh) {
                    for (di, &g) in d.iter_mut().zip(gout.data()) {
                        *di += g * kt;
                    }
                }
            }))
        } else {
            None
        };
        self.push(Tensor { shape, data: out }.validate(), requires, step)
    }

    /// 2x2 max pooling with stride 2. Spatial dims must be even. Ties route
    /// the gradient to the first maximal element in scan order.
    pub fn max_pool_2x2(&mut self, x: Var) -> Result<Var, TensorError> {
        let (n, c, h, w) = self.value(x).dims4("max_pool_2x2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err(
                "max_pool_2x2",
                format!("spatial size {h}x{w} not divisible by 2"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![T::ZERO; n * c * oh * ow];
        let mut argmax = vec![0u32; n * c * oh * ow];
        {
            let xv = self.value(x).data();
            for nc in 0..n * c {
                let src = &xv[nc * h * w..(nc + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = src[(2 * oy) * w + 2 * ox];
                        let mut best_i = (2 * oy) * w + 2 * ox;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = (2 * oy + dy) * w + 2 * ox + dx;
                            if src[idx] > best {
                                best = src[idx];
                                best_i = idx;
                            }
                        }
                        out[nc * oh * ow + oy * ow + ox] = best;
                        argmax[nc * oh * ow + oy * ow + ox] = (nc * h * w + best_i) as u32;
                    }
                }
            }
        }
        let requires = self.requires_grad(x);
        let step: Option<BackwardFn<T>> = if requires {
            Some(Box::new(move |_vals, gout, grads| {
                if let Some(dx) = grads.buf(x, &[n, c, h, w]) {
                    for (&g, &src) in gout.data().iter().zip(&argmax) {
                        dx[src as usize] += g;
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(Tensor::new(vec![n, c, oh, ow], out)?, requires, step))
    }

    /// Bilinear resize of an NCHW tensor to a new spatial size
    /// (align-corners-false).
    pub fn bilinear_resize(
        &mut self,
        x: Var,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var, TensorError> {
        let (n, c, h, w) = self.value(x).dims4("bilinear_resize")?;
        if out_h == 0 || out_w == 0 {
            return Err(invalid("bilinear_resize", "output size must be positive".into()));
        }
        let mut out = vec![T::ZERO; n * c * out_h * out_w];
        {
            let xv = self.value(x).data();
            for nc in 0..n * c {
                bilinear_resize_plane(
                    &xv[nc * h * w..(nc + 1) * h * w],
                    h,
                    w,
                    out_h,
                    out_w,
                    &mut out[nc * out_h * out_w..(nc + 1) * out_h * out_w],
                );
            }
        }
        let requires = self.requires_grad(x);
        let step: Option<BackwardFn<T>> = if requires {
            let ys = resize_axis(h, out_h);
            let xs = resize_axis(w, out_w);
            Some(Box::new(move |_vals, gout, grads| {
                if let Some(dx) = grads.buf(x, &[n, c, h, w]) {
                    let g = gout.data();
                    for nc in 0..n * c {
                        let src = nc * h * w;
                        let dst = nc * out_h * out_w;
                        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                            let wy1 = T::from_f64(fy);
                            let wy0 = T::ONE - wy1;
                            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                                let wx1 = T::from_f64(fx);
                                let wx0 = T::ONE - wx1;
                                let gv = g[dst + oy * out_w + ox];
                                dx[src + y0 * w + x0] += gv * wy0 * wx0;
                                dx[src + y0 * w + x1] += gv * wy0 * wx1;
                                dx[src + y1 * w + x0] += gv * wy1 * wx0;
                                dx[src + y1 * w + x1] += gv * wy1 * wx1;
                            }
                        }
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(Tensor::new(vec![n, c, out_h, out_w], out)?, requires, step))
    }

    /// Fully connected layer: `x (N, in) @ weight^T (in, out) + bias`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        let (n, fin) = self.value(x).dims2("linear")?;
        let (fout, fin_w) = self.value(weight).dims2("linear")?;
        if fin != fin_w {
            return Err(shape_err(
                "linear",
                format!("input features {fin} vs weight features {fin_w}"),
            ));
        }
        if self.value(bias).shape() != [fout] {
            return Err(shape_err(
                "linear",
                format!("bias shape {:?} vs {fout} outputs", self.value(bias).shape()),
            ));
        }
        let mut out = vec![T::ZERO; n * fout];
        {
            let xv = self.value(x).data();
            let wv = self.value(weight).data();
            let bv = self.value(bias).data();
            T::gemm_strided(
                n,
                fin,
                fout,
                T::ONE,
                xv,
                (fin as isize, 1),
                wv,
                (1, fin as isize),
                T::ZERO,
                &mut out,
            );
            for r in 0..n {
                for (oc, &b) in bv.iter().enumerate() {
                    out[r * fout + oc] += b;
                }
            }
        }
        let requires = self.requires_grad(x)
            || self.requires_grad(weight)
            || self.requires_grad(bias);
        let step: Option<BackwardFn<T>> = if requires {
            Some(Box::new(move |vals, gout, grads| {
                let g = gout.data();
                if let Some(db) = grads.buf(bias, &[fout]) {
                    for r in 0..n {
                        for oc in 0..fout {
                            db[oc] += g[r * fout + oc];
                        }
                    }
                }
                if grads.needs(weight) {
                    let xv = vals.value(x).data().to_vec();
                    let dw = grads.buf(weight, &[fout, fin]).unwrap();
                    // dW += g^T (fout x n) @ x (n x fin)
                    T::gemm_strided(
                        fout,
                        n,
                        fin,
                        T::ONE,
                        g,
                        (1, fout as isize),
                        &xv,
                        (fin as isize, 1),
                        T::ONE,
                        dw,
                    );
                }
                if grads.needs(x) {
                    let wv = vals.value(weight).data().to_vec();
                    let dx = grads.buf(x, &[n, fin]).unwrap();
                    // dX += g (n x fout) @ W (fout x fin)
                    T::gemm_strided(
                        n,
                        fout,
                        fin,
                        T::ONE,
                        g,
                        (fout as isize, 1),
                        &wv,
                        (fin as isize, 1),
                        T::ONE,
                        dx,
                    );
                }
            }))
        } else {
            None
        };
        Ok(self.push(Tensor::new(vec![n, fout], out)?, requires, step))
    }

    /// Concatenate NCHW tensors along the channel axis; N, H, W must agree.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        if xs.is_empty() {
            return Err(invalid("concat_channels", "no inputs".into()));
        }
        let (n, _, h, w) = self.value(xs[0]).dims4("concat_channels")?;
        let mut channels = Vec::with_capacity(xs.len());
        for &v in xs {
            let (ni, ci, hi, wi) = self.value(v).dims4("concat_channels")?;
            if (ni, hi, wi) != (n, h, w) {
                return Err(shape_err(
                    "concat_channels",
                    format!("incompatible shapes {:?} vs first {:?}",
                        self.value(v).shape(), self.value(xs[0]).shape()),
                ));
            }
            channels.push(ci);
        }
        let c_total: usize = channels.iter().sum();
        let plane = h * w;
        let mut out = vec![T::ZERO; n * c_total * plane];
        for bi in 0..n {
            let mut c_off = 0;
            for (&v, &ci) in xs.iter().zip(&channels) {
                let src = self.value(v).data();
                let s = bi * ci * plane;
                let d = (bi * c_total + c_off) * plane;
                out[d..d + ci * plane].copy_from_slice(&src[s..s + ci * plane]);
                c_off += ci;
            }
        }
        let requires = xs.iter().any(|&v| self.requires_grad(v));
        let step: Option<BackwardFn<T>> = if requires {
            let xs = xs.to_vec();
            let channels = channels.clone();
            Some(Box::new(move |_vals, gout, grads| {
                let g = gout.data();
                let mut c_off = 0;
                for (&v, &ci) in xs.iter().zip(&channels) {
                    if let Some(dx) = grads.buf(v, &[n, ci, h, w]) {
                        for bi in 0..n {
                            let s = (bi * c_total + c_off) * plane;
                            let d = bi * ci * plane;
                            for k in 0..ci * plane {
                                dx[d + k] += g[s + k];
                            }
                        }
                    }
                    c_off += ci;
                }
            }))
        } else {
            None
        };
        Ok(self.push(Tensor::new(vec![n, c_total, h, w], out)?, requires, step))
    }

    /// Concatenate along the batch axis; trailing dims must agree.
    pub fn concat_batch(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        if xs.is_empty() {
            return Err(invalid("concat_batch", "no inputs".into()));
        }
        let rest: Vec<usize> = self.value(xs[0]).shape()[1..].to_vec();
        let item: usize = rest.iter().product();
        let mut batches = Vec::with_capacity(xs.len());
        for &v in xs {
            let sh = self.value(v).shape();
            if sh.is_empty() || sh[1..] != rest[..] {
                return Err(shape_err(
                    "concat_batch",
                    format!("incompatible shapes {:?} vs first {:?}",
                        sh, self.value(xs[0]).shape()),
                ));
            }
            batches.push(sh[0]);
        }
        let n_total: usize = batches.iter().sum();
        let mut out = Vec::with_capacity(n_total * item);
        for &v in xs {
            out.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![n_total];
        shape.extend_from_slice(&rest);
        let requires = xs.iter().any(|&v| self.requires_grad(v));
        let step: Option<BackwardFn<T>> = if requires {
            let xs = xs.to_vec();
            let batches = batches.clone();
            let rest = rest.clone();
            Some(Box::new(move |_vals, gout, grads| {
                let g = gout.data();
                let mut off = 0;
                for (&v, &bi) in xs.iter().zip(&batches) {
                    let len = bi * item;
                    let mut sh = vec![bi];
                    sh.extend_from_slice(&rest);
                    if let Some(dx) = grads.buf(v, &sh) {
                        for k in 0..len {
                            dx[k] += g[off + k];
                        }
                    }
                    off += len;
                }
            }))
        } else {
            None
        };
        Ok(self.push(Tensor::new(shape, out)?, requires, step))
    }

    /// Group normalization over an NCHW tensor with per-channel affine.
    /// `groups` must divide the channel count. Statistics use the biased
    /// variance with eps = 1e-5.
    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
    ) -> Result<Var, TensorError> {
        let (n, c, h, w) = self.value(x).dims4("group_norm")?;
        if groups == 0 || c % groups != 0 {
            return Err(invalid(
                "group_norm",
                format!("{c} channels not divisible by {groups} groups"),
            ));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err(
                "group_norm",
                format!(
                    "gamma/beta shapes {:?}/{:?} vs {c} channels",
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        let eps = T::from_f64(1e-5);
        let cg = c / groups;
        let plane = h * w;
        let group_len = cg * plane;
        let mut out = vec![T::ZERO; n * c * plane];
        let mut means = vec![T::ZERO; n * groups];
        let mut inv_stds = vec![T::ZERO; n * groups];
        {
            let xv = self.value(x).data();
            let gv = self.value(gamma).data();
            let bv = self.value(beta).data();
            let inv_len = T::from_f64(1.0 / group_len as f64);
            for bi in 0..n {
                for gi in 0..groups {
                    let base = (bi * c + gi * cg) * plane;
                    let mut mean = T::ZERO;
                    for &v in &xv[base..base + group_len] {
                        mean += v;
                    }
                    mean *= inv_len;
                    let mut var = T::ZERO;
                    for &v in &xv[base..base + group_len] {
                        let d = v - mean;
                        var += d * d;
                    }
                    var *= inv_len;
                    let inv_std = T::ONE / (var + eps).sqrt();
                    means[bi * groups + gi] = mean;
                    inv_stds[bi * groups + gi] = inv_std;
                    for ci in 0..cg {
                        let ch = gi * cg + ci;
                        let row = base + ci * plane;
                        for k in 0..plane {
                            let y = (xv[row + k] - mean) * inv_std;
                            out[row + k] = gv[ch] * y + bv[ch];
                        }
                    }
                }
            }
        }
        let requires = self.requires_grad(x)
            || self.requires_grad(gamma)
            || self.requires_grad(beta);
        let step: Option<BackwardFn<T>> = if requires {
            Some(Box::new(move |vals, gout, grads| {
                let xv = vals.value(x).data();
                let gv = vals.value(gamma).data();
                let g = gout.data();
                let inv_len = T::from_f64(1.0 / group_len as f64);
                if let Some(dbeta) = grads.buf(beta, &[c]) {
                    for bi in 0..n {
                        for ch in 0..c {
                            let row = (bi * c + ch) * plane;
                            let mut acc = T::ZERO;
                            for &gvx in &g[row..row + plane] {
                                acc += gvx;
                            }
                            dbeta[ch] += acc;
                        }
                    }
                }
                if grads.needs(gamma) {
                    let dgamma = grads.buf(gamma, &[c]).unwrap();
                    for bi in 0..n {
                        for gi in 0..groups {
                            let mean = means[bi * groups + gi];
                            let inv_std = inv_stds[bi * groups + gi];
                            for ci in 0..cg {
                                let ch = gi * cg + ci;
                                let row = (bi * c + ch) * plane;
                                let mut acc = T::ZERO;
                                for k in 0..plane {
                                    let yhat = (xv[row + k] - mean) * inv_std;
                                    acc += g[row + k] * yhat;
                                }
                                dgamma[ch] += acc;
                            }
                        }
                    }
                }
                if grads.needs(x) {
                    let dx = grads.buf(x, &[n, c, h, w]).unwrap();
                    for bi in 0..n {
                        for gi in 0..groups {
                            let mean = means[bi * groups + gi];
                            let inv_std = inv_stds[bi * groups + gi];
                            let base = (bi * c + gi * cg) * plane;
                            // dy = gout * gamma; dx = inv_std * (dy - mean(dy) - yhat * mean(dy * yhat))
                            let mut s1 = T::ZERO;
                            let mut s2 = T::ZERO;
                            for ci in 0..cg {
                                let ch = gi * cg + ci;
                                let row = base + ci * plane;
                                for k in 0..plane {
                                    let dy = g[row + k] * gv[ch];
                                    let yhat = (xv[row + k] - mean) * inv_std;
                                    s1 += dy;
                                    s2 += dy * yhat;
                                }
                            }
                            s1 *= inv_len;
                            s2 *= inv_len;
                            for ci in 0..cg {
                                let ch = gi * cg + ci;
                                let row = base + ci * plane;
                                for k in 0..plane {
                                    let dy = g[row + k] * gv[ch];
                                    let yhat = (xv[row + k] - mean) * inv_std;
                                    dx[row + k] += inv_std * (dy - s1 - yhat * s2);
                                }
                            }
                        }
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(Tensor::new(vec![n, c, h, w], out)?, requires, step))
    }

    /// Sum of all elements, producing a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = T::ZERO;
        for &v in self.value(x).data() {
            acc += v;
        }
        let shape = self.value(x).shape().to_vec();
        let requires = self.requires_grad(x);
        let step: Option<BackwardFn<T>> = if requires {
            Some(Box::new(move |_vals, gout, grads| {
                let g = gout.item();
                if let Some(dx) = grads.buf(x, &shape) {
                    for d in dx.iter_mut() {
                        *d += g;
                    }
                }
            }))
        } else {
            None
        };
        self.push(Tensor::scalar(acc), requires, step)
    }

    /// Mean of all elements, producing a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scalar_mul(s, 1.0 / n as f64)
    }

    /// View with a new shape over the same elements.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() {
            return Err(shape_err(
                "reshape",
                format!("{} elements vs target shape {:?}", self.value(x).len(), shape),
            ));
        }
        let out = self.value(x).clone().reshaped(shape.clone())?;
        let in_shape = self.value(x).shape().to_vec();
        let requires = self.requires_grad(x);
        let step: Option<BackwardFn<T>> = if requires {
            Some(Box::new(move |_vals, gout, grads| {
                if let Some(dx) = grads.buf(x, &in_shape) {
                    for (d, &g) in dx.iter_mut().zip(gout.data()) {
                        *d += g;
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(out, requires, step))
    }

    /// Select elements by flat index into a 1-d result.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>) -> Result<Var, TensorError> {
        let len = self.value(x).len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(invalid(
                "gather",
                format!("index {bad} out of bounds for {len} elements"),
            ));
        }
        let xv = self.value(x).data();
        let out: Vec<T> = indices.iter().map(|&i| xv[i]).collect();
        let shape = self.value(x).shape().to_vec();
        let requires = self.requires_grad(x);
        let step: Option<BackwardFn<T>> = if requires {
            let indices = indices.clone();
            Some(Box::new(move |_vals, gout, grads| {
                if let Some(dx) = grads.buf(x, &shape) {
                    for (&i, &g) in indices.iter().zip(gout.data()) {
                        dx[i] += g;
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(Tensor::from_vec(out), requires, step))
    }
}

fn stable_sigmoid<T: Element>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

impl<T: Element> Tensor<T> {
    /// Debug-checked constructor used by ops that build shape+data in sync.
    fn validate(self) -> Self {
        debug_assert_eq!(self.shape.iter().product::<usize>(), self.data.len());
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel_returns_input() {
        let mut tape = Tape::<f32>::new();
        let data: Vec<f32> = (0..16).map(|v| v as f32 * 0.25).collect();
        let x = tape.constant(t(&[1, 1, 4, 4], &data));
        let w = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 4, 4]);
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_all_ones_sums_window() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[9.0, 9.0, 9.0, 9.0]);
    }

    #[test]
    fn conv_channel_mismatch_is_shape_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let err = tape.conv2d(x, w, b, 1, 0).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn bilinear_resize_constant_stays_constant() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[1, 2, 5, 7], 0.3));
        let y = tape.bilinear_resize(x, 13, 4).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn group_norm_normalizes_groups() {
        let mut tape = Tape::<f32>::new();
        let data: Vec<f32> = (0..2 * 8 * 3 * 3).map(|i| (i as f32 * 0.37).sin() * 3.0 + 1.0).collect();
        let x = tape.constant(t(&[2, 8, 3, 3], &data));
        let gamma = tape.constant(Tensor::full(&[8], 1.0));
        let beta = tape.constant(Tensor::zeros(&[8]));
        let y = tape.group_norm(x, 4, gamma, beta).unwrap();
        let yv = tape.value(y).data();
        // each (n, group) slab of 2 channels x 9 px has mean ~0 and var ~1
        for bi in 0..2 {
            for gi in 0..4 {
                let base = (bi * 8 + gi * 2) * 9;
                let slab = &yv[base..base + 18];
                let mean: f32 = slab.iter().sum::<f32>() / 18.0;
                let var: f32 = slab.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 18.0;
                assert!(mean.abs() < 1e-4, "mean {mean}");
                assert!((var - 1.0).abs() < 1e-3, "var {var}");
            }
        }
    }

    #[test]
    fn group_norm_rejects_indivisible_groups() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 6, 2, 2]));
        let gamma = tape.constant(Tensor::full(&[6], 1.0));
        let beta = tape.constant(Tensor::zeros(&[6]));
        assert!(tape.group_norm(x, 4, gamma, beta).is_err());
    }

    #[test]
    fn max_pool_takes_window_max() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 5.0, 3.0, 2.0]));
        let y = tape.max_pool_2x2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_channels_layout() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let b = tape.constant(Tensor::full(&[1, 2, 2, 2], 2.0));
        let y = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 3, 2, 2]);
        assert_eq!(tape.value(y).data()[..4], [1.0; 4]);
        assert_eq!(tape.value(y).data()[4..], [2.0; 8]);
    }

    #[test]
    fn gather_and_reshape_roundtrip_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
        let g = tape.gather(x, vec![3, 1, 3]).unwrap();
        let s = tape.sum(g);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 2.0]);
    }

    #[test]
    fn linear_matches_manual() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let w = tape.constant(t(&[2, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]));
        let b = tape.constant(t(&[2], &[0.5, -0.5]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, 1.5, 4.5, 4.5]);
    }

    #[test]
    fn forward_values_are_deterministic() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let data: Vec<f32> = (0..2 * 3 * 8 * 8).map(|i| ((i * 2654435761usize) as f32).sin()).collect();
            let x = tape.leaf(t(&[2, 3, 8, 8], &data));
            let wdat: Vec<f32> = (0..4 * 3 * 9).map(|i| ((i * 40503) as f32).cos() * 0.2).collect();
            let w = tape.leaf(t(&[4, 3, 3, 3], &wdat));
            let b = tape.leaf(Tensor::zeros(&[4]));
            let c = tape.conv2d(x, w, b, 1, 1).unwrap();
            let r = tape.relu(c);
            let s = tape.sum(r);
            tape.backward(s).unwrap();
            (
                tape.value(s).item(),
                tape.grad(w).unwrap().data().to_vec(),
                tape.grad(x).unwrap().data().to_vec(),
            )
        };
        let (s1, gw1, gx1) = run();
        let (s2, gw2, gx2) = run();
        assert_eq!(s1.to_bits(), s2.to_bits());
        assert_eq!(gw1, gw2);
        assert_eq!(gx1, gx2);
    }
}
