use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use super::{check_shape, uniform, NnError, Params};

/// Fully connected layer, `y = W x + b` per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `n_out × n_in`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn new(n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        let w = uniform(rng, n_out, n_in, n_in);
        let b = uniform(rng, 1, n_out, n_in)
            .into_shape_with_order(n_out)
            .expect("row vector");
        Linear { w, b }
    }

    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Linear {
            w: Array2::zeros((n_out, n_in)),
            b: Array1::zeros(n_out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Linear::zeros(self.n_in(), self.n_out())
    }

    pub fn n_in(&self) -> usize {
        self.w.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.w.nrows()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>, NnError> {
        check_shape(
            "linear",
            x.ncols() == self.n_in(),
            x.shape(),
            self.w.shape(),
        )?;
        // Row-major output whatever the input layout, so rows are slices.
        let mut y = Array2::zeros((x.nrows(), self.n_out()));
        general_mat_mul(1.0, x, &self.w.t(), 0.0, &mut y);
        y += &self.b;
        Ok(y)
    }

    /// Accumulates `dW += dyᵀ x` and `db += Σ dy` into `grad`.
    pub fn backward_params(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) {
        general_mat_mul(1.0, &dy.t(), x, 1.0, &mut grad.w);
        grad.b += &dy.sum_axis(Axis(0));
    }

    /// `dx = dy W`.
    pub fn backward_input(&self, dy: &Array2<f64>) -> Array2<f64> {
        dy.dot(&self.w)
    }
}

impl Params for Linear {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(
            "w",
            self.w.shape(),
            self.w.as_slice().expect("standard layout"),
        );
        f(
            "b",
            self.b.shape(),
            self.b.as_slice().expect("standard layout"),
        );
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("w", self.w.as_slice_mut().expect("standard layout"));
        f("b", self.b.as_slice_mut().expect("standard layout"));
    }
}

/// Gated recurrent unit:
///
/// ```text
/// z  = σ(W_z x + U_z h + b_z)
/// r  = σ(W_r x + U_r h + b_r)
/// ñ  = tanh(W_n x + U_n (r ⊙ h) + b_n)
/// h' = (1 − z) ⊙ ñ + z ⊙ h
/// ```
///
/// The three gates are stacked row-wise in the order z, r, n.
#[derive(Debug, Clone, PartialEq)]
pub struct Gru {
    /// `3H × n_in`
    pub w: Array2<f64>,
    /// `3H × H`
    pub u: Array2<f64>,
    pub b: Array1<f64>,
}

/// Everything one GRU step needs for its backward pass.
#[derive(Debug, Clone)]
pub struct GruCache {
    x: Array2<f64>,
    h: Array2<f64>,
    z: Array2<f64>,
    r: Array2<f64>,
    n: Array2<f64>,
    rh: Array2<f64>,
}

impl Gru {
    pub fn new(n_in: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let w = uniform(rng, 3 * hidden, n_in, n_in);
        let u = uniform(rng, 3 * hidden, hidden, hidden);
        let b = uniform(rng, 1, 3 * hidden, hidden)
            .into_shape_with_order(3 * hidden)
            .expect("row vector");
        Gru { w, u, b }
    }

    pub fn zeros(n_in: usize, hidden: usize) -> Self {
        Gru {
            w: Array2::zeros((3 * hidden, n_in)),
            u: Array2::zeros((3 * hidden, hidden)),
            b: Array1::zeros(3 * hidden),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Gru::zeros(self.n_in(), self.hidden())
    }

    pub fn n_in(&self) -> usize {
        self.w.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.u.ncols()
    }

    pub fn forward(
        &self,
        x: &Array2<f64>,
        h: &Array2<f64>,
    ) -> Result<(Array2<f64>, GruCache), NnError> {
        let hd = self.hidden();
        check_shape(
            "gru input",
            x.ncols() == self.n_in(),
            x.shape(),
            self.w.shape(),
        )?;
        check_shape(
            "gru state",
            h.ncols() == hd && h.nrows() == x.nrows(),
            h.shape(),
            &[x.nrows(), hd],
        )?;
        let mut gx = x.dot(&self.w.t());
        gx += &self.b;
        let mut a_zr = gx.slice(s![.., ..2 * hd]).to_owned();
        general_mat_mul(1.0, h, &self.u.slice(s![..2 * hd, ..]).t(), 1.0, &mut a_zr);
        a_zr.mapv_inplace(super::sigmoid_scalar);
        let z = a_zr.slice(s![.., ..hd]).to_owned();
        let r = a_zr.slice(s![.., hd..]).to_owned();
        let rh = &r * h;
        let mut n = gx.slice(s![.., 2 * hd..]).to_owned();
        general_mat_mul(1.0, &rh, &self.u.slice(s![2 * hd.., ..]).t(), 1.0, &mut n);
        n.mapv_inplace(f64::tanh);
        let h_next = Zip::from(&z)
            .and(&n)
            .and(h)
            .map_collect(|&z, &n, &h| (1.0 - z) * n + z * h);
        Ok((
            h_next,
            GruCache {
                x: x.clone(),
                h: h.clone(),
                z,
                r,
                n,
                rh,
            },
        ))
    }

    /// Back-propagates `dh_next` through one step, accumulating parameter
    /// gradients into `grad`. Returns `(dx, dh_prev)`.
    pub fn backward(
        &self,
        c: &GruCache,
        dh_next: &Array2<f64>,
        grad: &mut Gru,
    ) -> (Array2<f64>, Array2<f64>) {
        let hd = self.hidden();
        let batch = c.x.nrows();
        let mut da = Array2::zeros((batch, 3 * hd));
        let mut dh = dh_next * &c.z;
        // candidate
        {
            let mut dan = da.slice_mut(s![.., 2 * hd..]);
            Zip::from(&mut dan)
                .and(dh_next)
                .and(&c.z)
                .and(&c.n)
                .for_each(|o, &d, &z, &n| *o = d * (1.0 - z) * (1.0 - n * n));
        }
        let dan = da.slice(s![.., 2 * hd..]).to_owned();
        general_mat_mul(
            1.0,
            &dan.t(),
            &c.rh,
            1.0,
            &mut grad.u.slice_mut(s![2 * hd.., ..]),
        );
        let drh = dan.dot(&self.u.slice(s![2 * hd.., ..]));
        dh += &(&drh * &c.r);
        // gates
        Zip::from(da.slice_mut(s![.., ..hd]))
            .and(dh_next)
            .and(&c.h)
            .and(&c.n)
            .and(&c.z)
            .for_each(|o, &d, &h, &n, &z| *o = d * (h - n) * z * (1.0 - z));
        Zip::from(da.slice_mut(s![.., hd..2 * hd]))
            .and(&drh)
            .and(&c.h)
            .and(&c.r)
            .for_each(|o, &d, &h, &r| *o = d * h * r * (1.0 - r));
        let da_zr = da.slice(s![.., ..2 * hd]);
        general_mat_mul(
            1.0,
            &da_zr.t(),
            &c.h,
            1.0,
            &mut grad.u.slice_mut(s![..2 * hd, ..]),
        );
        general_mat_mul(1.0, &da_zr, &self.u.slice(s![..2 * hd, ..]), 1.0, &mut dh);
        general_mat_mul(1.0, &da.t(), &c.x, 1.0, &mut grad.w);
        grad.b += &da.sum_axis(Axis(0));
        (da.dot(&self.w), dh)
    }
}

impl Params for Gru {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(
            "w",
            self.w.shape(),
            self.w.as_slice().expect("standard layout"),
        );
        f(
            "u",
            self.u.shape(),
            self.u.as_slice().expect("standard layout"),
        );
        f(
            "b",
            self.b.shape(),
            self.b.as_slice().expect("standard layout"),
        );
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("w", self.w.as_slice_mut().expect("standard layout"));
        f("u", self.u.as_slice_mut().expect("standard layout"));
        f("b", self.b.as_slice_mut().expect("standard layout"));
    }
}

/// 2-D cross-correlation over channel-major `[c][row][col]` rows, computed
/// with im2col.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `out × (in·kh·kw)`, i.e. `[out][in][kh][kw]` flattened.
    pub k: Array2<f64>,
    pub b: Array1<f64>,
    /// `[channels, height, width]` of the input.
    pub in_shape: [usize; 3],
    pub kernel: [usize; 2],
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        in_shape: [usize; 3],
        out_ch: usize,
        kernel: [usize; 2],
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        let mut c = Conv2d::zeros(in_shape, out_ch, kernel, stride, pad)?;
        let fan_in = in_shape[0] * kernel[0] * kernel[1];
        c.k = uniform(rng, out_ch, fan_in, fan_in);
        c.b = uniform(rng, 1, out_ch, fan_in)
            .into_shape_with_order(out_ch)
            .expect("row vector");
        Ok(c)
    }

    pub fn zeros(
        in_shape: [usize; 3],
        out_ch: usize,
        kernel: [usize; 2],
        stride: usize,
        pad: usize,
    ) -> Result<Self, NnError> {
        let [_, h, w] = in_shape;
        check_shape(
            "conv2d geometry",
            stride >= 1 && h + 2 * pad >= kernel[0] && w + 2 * pad >= kernel[1],
            &[h + 2 * pad, w + 2 * pad],
            &kernel,
        )?;
        Ok(Conv2d {
            k: Array2::zeros((out_ch, in_shape[0] * kernel[0] * kernel[1])),
            b: Array1::zeros(out_ch),
            in_shape,
            kernel,
            stride,
            pad,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Conv2d {
            k: Array2::zeros(self.k.raw_dim()),
            b: Array1::zeros(self.b.len()),
            ..self.clone()
        }
    }

    pub fn out_channels(&self) -> usize {
        self.k.nrows()
    }

    pub fn out_hw(&self) -> [usize; 2] {
        let [_, h, w] = self.in_shape;
        let o = |n: usize, k: usize| (n + 2 * self.pad - k) / self.stride + 1;
        [o(h, self.kernel[0]), o(w, self.kernel[1])]
    }

    pub fn out_shape(&self) -> [usize; 3] {
        let [h, w] = self.out_hw();
        [self.out_channels(), h, w]
    }

    pub fn in_len(&self) -> usize {
        self.in_shape.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.out_shape().iter().product()
    }

    /// Visits `(col_row, out_pos, input_index)` for every in-bounds tap.
    fn taps(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [c, h, w] = self.in_shape;
        let [kh, kw] = self.kernel;
        let [oh, ow] = self.out_hw();
        for ci in 0..c {
            for i in 0..kh {
                for j in 0..kw {
                    let row = (ci * kh + i) * kw + j;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + i) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + j) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            f(row, oy * ow + ox, (ci * h + iy as usize) * w + ix as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Array2<f64> {
        let [oh, ow] = self.out_hw();
        let mut cols = Array2::zeros((self.k.ncols(), oh * ow));
        let data = cols.as_slice_mut().expect("fresh array");
        let n = oh * ow;
        self.taps(|row, pos, idx| data[row * n + pos] = x[idx]);
        cols
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>, NnError> {
        check_shape(
            "conv2d input",
            x.ncols() == self.in_len(),
            x.shape(),
            &self.in_shape,
        )?;
        let [oh, ow] = self.out_hw();
        let mut y = Array2::zeros((x.nrows(), self.out_len()));
        for (xr, mut yr) in x.rows().into_iter().zip(y.rows_mut()) {
            let cols = self.im2col(xr.as_slice().expect("contiguous row"));
            let mut out = self.k.dot(&cols);
            out += &self.b.view().insert_axis(Axis(1));
            yr.assign(
                &out.into_shape_with_order(self.out_channels() * oh * ow)
                    .expect("contiguous"),
            );
        }
        Ok(y)
    }

    /// Accumulates kernel and bias gradients; returns `dx` when `need_dx`.
    pub fn backward(
        &self,
        x: &Array2<f64>,
        dy: &Array2<f64>,
        grad: &mut Conv2d,
        need_dx: bool,
    ) -> Option<Array2<f64>> {
        let [oh, ow] = self.out_hw();
        let n = oh * ow;
        let mut dx = need_dx.then(|| Array2::zeros(x.raw_dim()));
        for (b, (xr, dyr)) in x.rows().into_iter().zip(dy.rows()).enumerate() {
            let cols = self.im2col(xr.as_slice().expect("contiguous row"));
            let dys: ArrayView2<f64> = dyr
                .into_shape_with_order((self.out_channels(), n))
                .expect("contiguous row");
            general_mat_mul(1.0, &dys, &cols.t(), 1.0, &mut grad.k);
            grad.b += &dys.sum_axis(Axis(1));
            if let Some(dx) = dx.as_mut() {
                let dcols = self.k.t().dot(&dys);
                let dc = dcols.as_slice().expect("fresh array");
                let mut row = dx.row_mut(b);
                let out = row.as_slice_mut().expect("contiguous row");
                self.taps(|r, pos, idx| out[idx] += dc[r * n + pos]);
            }
        }
        dx
    }
}

impl Params for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        let shape = [
            self.out_channels(),
            self.in_shape[0],
            self.kernel[0],
            self.kernel[1],
        ];
        f("k", &shape, self.k.as_slice().expect("standard layout"));
        f(
            "b",
            self.b.shape(),
            self.b.as_slice().expect("standard layout"),
        );
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("k", self.k.as_slice_mut().expect("standard layout"));
        f("b", self.b.as_slice_mut().expect("standard layout"));
    }
}
