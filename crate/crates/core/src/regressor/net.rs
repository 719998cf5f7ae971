//! Batched forward and backward passes of the fusion network.
//!
//! Activations are stored channel-major across the batch (`[C, B, H, W]`) so
//! every convolution is one matrix product over an im2col buffer.

use num_traits::Float;

pub const CONV_CHANNELS: [usize; 3] = [8, 16, 32];
pub const IMG_FEATURES: usize = 64;
pub const WRENCH_HIDDEN: usize = 32;
pub const FUSION_HIDDEN: usize = 64;
pub const OUTPUTS: usize = 5;
pub const LEAK: f64 = 0.1;

/// Layer index of each block in the flat parameter vector.
pub const FC_IMG: usize = 3;
pub const WRENCH_1: usize = 4;
pub const WRENCH_2: usize = 5;
pub const FUSION_1: usize = 6;
pub const FUSION_2: usize = 7;
pub const N_LAYERS: usize = 8;

pub trait Scalar: Float + Default + Send + Sync + std::fmt::Debug + 'static {
    /// `c = a·b + beta·c` with arbitrary strides (`m×k` times `k×n`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );

    fn of(v: f64) -> Self {
        Self::from(v).expect("representable")
    }
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                assert!(span(m, k, rsa, csa) <= a.len(), "gemm: a out of bounds");
                assert!(span(k, n, rsb, csb) <= b.len(), "gemm: b out of bounds");
                assert!(span(m, n, rsc, csc) <= c.len(), "gemm: c out of bounds");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every index the kernel touches lies inside the spans
                // checked above.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Input image dimensions the network is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arch {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// Dense block: `out × fan_in` weights followed by `out` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub out: usize,
    pub fan_in: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl LayerShape {
    pub fn end(&self) -> usize {
        self.b_off + self.out
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    cin: usize,
    hin: usize,
    win: usize,
    cout: usize,
    hout: usize,
    wout: usize,
}

impl ConvDims {
    fn k(&self) -> usize {
        self.cin * 9
    }
    fn p(&self) -> usize {
        self.hout * self.wout
    }
}

fn down(v: usize) -> usize {
    v.div_ceil(2)
}

impl Arch {
    pub const DEFAULT: Arch = Arch {
        height: 64,
        width: 64,
        channels: 3,
    };

    fn conv_dims(&self) -> [ConvDims; 3] {
        let mut out = [ConvDims { cin: 0, hin: 0, win: 0, cout: 0, hout: 0, wout: 0 }; 3];
        let (mut c, mut h, mut w) = (self.channels, self.height, self.width);
        for (l, d) in out.iter_mut().enumerate() {
            *d = ConvDims {
                cin: c,
                hin: h,
                win: w,
                cout: CONV_CHANNELS[l],
                hout: down(h),
                wout: down(w),
            };
            c = d.cout;
            h = d.hout;
            w = d.wout;
        }
        out
    }

    pub fn flat_features(&self) -> usize {
        let d = self.conv_dims()[2];
        d.cout * d.p()
    }

    pub fn layers(&self) -> [LayerShape; N_LAYERS] {
        let conv = self.conv_dims();
        let dims = [
            (conv[0].cout, conv[0].k()),
            (conv[1].cout, conv[1].k()),
            (conv[2].cout, conv[2].k()),
            (IMG_FEATURES, self.flat_features()),
            (WRENCH_HIDDEN, 6),
            (WRENCH_HIDDEN, WRENCH_HIDDEN),
            (FUSION_HIDDEN, IMG_FEATURES + WRENCH_HIDDEN),
            (OUTPUTS, FUSION_HIDDEN),
        ];
        let mut off = 0;
        dims.map(|(out, fan_in)| {
            let s = LayerShape {
                out,
                fan_in,
                w_off: off,
                b_off: off + out * fan_in,
            };
            off = s.end();
            s
        })
    }

    pub fn n_params(&self) -> usize {
        self.layers()[N_LAYERS - 1].end()
    }
}

#[inline]
fn leaky<T: Scalar>(z: T) -> T {
    if z > T::zero() {
        z
    } else {
        z * T::of(LEAK)
    }
}

#[inline]
fn leaky_grad<T: Scalar>(z: T) -> T {
    if z > T::zero() {
        T::one()
    } else {
        T::of(LEAK)
    }
}

fn im2col<T: Scalar>(src: &[T], d: &ConvDims, batch: usize, col: &mut [T]) {
    let n = batch * d.p();
    let plane = d.hin * d.win;
    for ci in 0..d.cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(ci * 9 + ky * 3 + kx) * n..][..n];
                for b in 0..batch {
                    let img = &src[(ci * batch + b) * plane..][..plane];
                    for oi in 0..d.hout {
                        let iy = (2 * oi + ky) as isize - 1;
                        let dst = &mut row[(b * d.hout + oi) * d.wout..][..d.wout];
                        if iy < 0 || iy >= d.hin as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let line = &img[iy as usize * d.win..][..d.win];
                        for (oj, v) in dst.iter_mut().enumerate() {
                            let ix = (2 * oj + kx) as isize - 1;
                            *v = if ix < 0 || ix >= d.win as isize {
                                T::zero()
                            } else {
                                line[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], d: &ConvDims, batch: usize, dst: &mut [T]) {
    dst.fill(T::zero());
    let n = batch * d.p();
    let plane = d.hin * d.win;
    for ci in 0..d.cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(ci * 9 + ky * 3 + kx) * n..][..n];
                for b in 0..batch {
                    let img = &mut dst[(ci * batch + b) * plane..][..plane];
                    for oi in 0..d.hout {
                        let iy = (2 * oi + ky) as isize - 1;
                        if iy < 0 || iy >= d.hin as isize {
                            continue;
                        }
                        let src = &row[(b * d.hout + oi) * d.wout..][..d.wout];
                        let line = &mut img[iy as usize * d.win..][..d.win];
                        for (oj, v) in src.iter().enumerate() {
                            let ix = (2 * oj + kx) as isize - 1;
                            if ix >= 0 && (ix as usize) < d.win {
                                line[ix as usize] = line[ix as usize] + *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `z[B, out] = x[B, in]·Wᵀ + b` with row strides `xs` and `zs`.
fn dense_forward<T: Scalar>(p: &[T], s: &LayerShape, batch: usize, x: &[T], xs: usize, z: &mut [T], zs: usize) {
    let w = &p[s.w_off..s.b_off];
    let bias = &p[s.b_off..s.end()];
    for b in 0..batch {
        z[b * zs..b * zs + s.out].copy_from_slice(bias);
    }
    T::gemm(batch, s.fan_in, s.out, x, xs, 1, w, 1, s.fan_in, T::one(), z, zs, 1);
}

/// Weight and bias gradients of a dense layer; returns nothing for the input.
fn dense_param_grads<T: Scalar>(s: &LayerShape, batch: usize, gz: &[T], gs: usize, x: &[T], xs: usize, grads: &mut [T]) {
    let (gw, gb) = grads[s.w_off..s.end()].split_at_mut(s.out * s.fan_in);
    T::gemm(s.out, batch, s.fan_in, gz, 1, gs, x, xs, 1, T::zero(), gw, s.fan_in, 1);
    for (o, v) in gb.iter_mut().enumerate() {
        *v = (0..batch).fold(T::zero(), |a, b| a + gz[b * gs + o]);
    }
}

/// `gx[B, in] = gz[B, out]·W`.
fn dense_input_grad<T: Scalar>(p: &[T], s: &LayerShape, batch: usize, gz: &[T], gs: usize, gx: &mut [T], gxs: usize) {
    let w = &p[s.w_off..s.b_off];
    T::gemm(batch, s.out, s.fan_in, gz, gs, 1, w, s.fan_in, 1, T::zero(), gx, gxs, 1);
}

/// Forward/backward workspace for a fixed architecture.
#[derive(Debug, Clone)]
pub struct Network<T: Scalar> {
    arch: Arch,
    shapes: [LayerShape; N_LAYERS],
    conv: [ConvDims; 3],
    batch: usize,
    x0: Vec<T>,
    col: [Vec<T>; 3],
    z: [Vec<T>; 3],
    a: [Vec<T>; 3],
    flat: Vec<T>,
    z_img: Vec<T>,
    hcat: Vec<T>,
    u: Vec<T>,
    z_w1: Vec<T>,
    a_w1: Vec<T>,
    z_w2: Vec<T>,
    z_f1: Vec<T>,
    a_f1: Vec<T>,
    out: Vec<T>,
}

impl<T: Scalar> Network<T> {
    pub fn new(arch: Arch) -> Self {
        Network {
            arch,
            shapes: arch.layers(),
            conv: arch.conv_dims(),
            batch: 0,
            x0: Vec::new(),
            col: Default::default(),
            z: Default::default(),
            a: Default::default(),
            flat: Vec::new(),
            z_img: Vec::new(),
            hcat: Vec::new(),
            u: Vec::new(),
            z_w1: Vec::new(),
            a_w1: Vec::new(),
            z_w2: Vec::new(),
            z_f1: Vec::new(),
            a_f1: Vec::new(),
            out: Vec::new(),
        }
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn shapes(&self) -> &[LayerShape; N_LAYERS] {
        &self.shapes
    }

    fn resize(&mut self, batch: usize) {
        if self.batch == batch {
            return;
        }
        self.batch = batch;
        let a = self.arch;
        self.x0 = vec![T::zero(); a.channels * batch * a.height * a.width];
        for (l, d) in self.conv.iter().enumerate() {
            let n = batch * d.p();
            self.col[l] = vec![T::zero(); d.k() * n];
            self.z[l] = vec![T::zero(); d.cout * n];
            self.a[l] = vec![T::zero(); d.cout * n];
        }
        self.flat = vec![T::zero(); batch * a.flat_features()];
        self.z_img = vec![T::zero(); batch * IMG_FEATURES];
        self.hcat = vec![T::zero(); batch * (IMG_FEATURES + WRENCH_HIDDEN)];
        self.u = vec![T::zero(); batch * 6];
        self.z_w1 = vec![T::zero(); batch * WRENCH_HIDDEN];
        self.a_w1 = vec![T::zero(); batch * WRENCH_HIDDEN];
        self.z_w2 = vec![T::zero(); batch * WRENCH_HIDDEN];
        self.z_f1 = vec![T::zero(); batch * FUSION_HIDDEN];
        self.a_f1 = vec![T::zero(); batch * FUSION_HIDDEN];
        self.out = vec![T::zero(); batch * OUTPUTS];
    }

    /// Runs the batch. `images` are HWC rasters in `[0, 1]` (centered to
    /// `[-0.5, 0.5]` here), `wrenches` are already normalized. Returns the
    /// `[B, 5]` normalized outputs.
    pub fn forward(&mut self, p: &[T], images: &[&[f32]], wrenches: &[[T; 6]]) -> &[T] {
        let batch = images.len();
        assert_eq!(batch, wrenches.len());
        assert_eq!(p.len(), self.arch.n_params());
        self.resize(batch);
        let a = self.arch;
        let plane = a.height * a.width;
        for (b, img) in images.iter().enumerate() {
            assert_eq!(img.len(), plane * a.channels);
            for (px, rgb) in img.chunks_exact(a.channels).enumerate() {
                for (c, v) in rgb.iter().enumerate() {
                    self.x0[(c * batch + b) * plane + px] = T::of(*v as f64 - 0.5);
                }
            }
        }
        for l in 0..3 {
            let d = self.conv[l];
            let s = self.shapes[l];
            let n = batch * d.p();
            let src = if l == 0 { &self.x0 } else { &self.a[l - 1] };
            im2col(src, &d, batch, &mut self.col[l]);
            let z = &mut self.z[l];
            for co in 0..d.cout {
                z[co * n..(co + 1) * n].fill(p[s.b_off + co]);
            }
            T::gemm(d.cout, d.k(), n, &p[s.w_off..s.b_off], d.k(), 1, &self.col[l], n, 1, T::one(), z, n, 1);
            for (av, zv) in self.a[l].iter_mut().zip(z.iter()) {
                *av = leaky(*zv);
            }
        }
        // [C, B, P] -> [B, C·P]
        let last = self.conv[2];
        let pp = last.p();
        let feat = a.flat_features();
        for c in 0..last.cout {
            for b in 0..batch {
                let src = &self.a[2][(c * batch + b) * pp..][..pp];
                self.flat[b * feat + c * pp..][..pp].copy_from_slice(src);
            }
        }
        let hs = IMG_FEATURES + WRENCH_HIDDEN;
        let sh = self.shapes;
        dense_forward(p, &sh[FC_IMG], batch, &self.flat, feat, &mut self.z_img, IMG_FEATURES);
        for b in 0..batch {
            for k in 0..IMG_FEATURES {
                self.hcat[b * hs + k] = leaky(self.z_img[b * IMG_FEATURES + k]);
            }
        }
        for (b, w) in wrenches.iter().enumerate() {
            self.u[b * 6..b * 6 + 6].copy_from_slice(w);
        }
        dense_forward(p, &sh[WRENCH_1], batch, &self.u, 6, &mut self.z_w1, WRENCH_HIDDEN);
        for (av, zv) in self.a_w1.iter_mut().zip(&self.z_w1) {
            *av = leaky(*zv);
        }
        dense_forward(p, &sh[WRENCH_2], batch, &self.a_w1, WRENCH_HIDDEN, &mut self.z_w2, WRENCH_HIDDEN);
        for b in 0..batch {
            for k in 0..WRENCH_HIDDEN {
                self.hcat[b * hs + IMG_FEATURES + k] = leaky(self.z_w2[b * WRENCH_HIDDEN + k]);
            }
        }
        dense_forward(p, &sh[FUSION_1], batch, &self.hcat, hs, &mut self.z_f1, FUSION_HIDDEN);
        for (av, zv) in self.a_f1.iter_mut().zip(&self.z_f1) {
            *av = leaky(*zv);
        }
        dense_forward(p, &sh[FUSION_2], batch, &self.a_f1, FUSION_HIDDEN, &mut self.out, OUTPUTS);
        &self.out
    }

    /// Mean squared error of the last forward pass against `targets` and its
    /// gradient written into `grads` (overwritten).
    pub fn backward(&mut self, p: &[T], targets: &[[T; OUTPUTS]], grads: &mut [T]) -> T {
        let batch = self.batch;
        assert_eq!(targets.len(), batch);
        assert_eq!(grads.len(), p.len());
        let inv_b = T::one() / T::of(batch as f64);
        let two = T::of(2.0);
        let mut loss = T::zero();
        let mut g_out = vec![T::zero(); batch * OUTPUTS];
        for (b, t) in targets.iter().enumerate() {
            for k in 0..OUTPUTS {
                let e = self.out[b * OUTPUTS + k] - t[k];
                loss = loss + e * e;
                g_out[b * OUTPUTS + k] = two * e * inv_b;
            }
        }
        let sh = self.shapes;
        let hs = IMG_FEATURES + WRENCH_HIDDEN;

        dense_param_grads(&sh[FUSION_2], batch, &g_out, OUTPUTS, &self.a_f1, FUSION_HIDDEN, grads);
        let mut g = vec![T::zero(); batch * FUSION_HIDDEN];
        dense_input_grad(p, &sh[FUSION_2], batch, &g_out, OUTPUTS, &mut g, FUSION_HIDDEN);
        for (gv, zv) in g.iter_mut().zip(&self.z_f1) {
            *gv = *gv * leaky_grad(*zv);
        }
        dense_param_grads(&sh[FUSION_1], batch, &g, FUSION_HIDDEN, &self.hcat, hs, grads);
        let mut g_h = vec![T::zero(); batch * hs];
        dense_input_grad(p, &sh[FUSION_1], batch, &g, FUSION_HIDDEN, &mut g_h, hs);

        // wrench branch
        let mut g2 = vec![T::zero(); batch * WRENCH_HIDDEN];
        for b in 0..batch {
            for k in 0..WRENCH_HIDDEN {
                g2[b * WRENCH_HIDDEN + k] =
                    g_h[b * hs + IMG_FEATURES + k] * leaky_grad(self.z_w2[b * WRENCH_HIDDEN + k]);
            }
        }
        dense_param_grads(&sh[WRENCH_2], batch, &g2, WRENCH_HIDDEN, &self.a_w1, WRENCH_HIDDEN, grads);
        let mut g1 = vec![T::zero(); batch * WRENCH_HIDDEN];
        dense_input_grad(p, &sh[WRENCH_2], batch, &g2, WRENCH_HIDDEN, &mut g1, WRENCH_HIDDEN);
        for (gv, zv) in g1.iter_mut().zip(&self.z_w1) {
            *gv = *gv * leaky_grad(*zv);
        }
        dense_param_grads(&sh[WRENCH_1], batch, &g1, WRENCH_HIDDEN, &self.u, 6, grads);

        // image branch
        let mut gi = vec![T::zero(); batch * IMG_FEATURES];
        for b in 0..batch {
            for k in 0..IMG_FEATURES {
                gi[b * IMG_FEATURES + k] = g_h[b * hs + k] * leaky_grad(self.z_img[b * IMG_FEATURES + k]);
            }
        }
        let feat = self.arch.flat_features();
        dense_param_grads(&sh[FC_IMG], batch, &gi, IMG_FEATURES, &self.flat, feat, grads);
        let mut g_flat = vec![T::zero(); batch * feat];
        dense_input_grad(p, &sh[FC_IMG], batch, &gi, IMG_FEATURES, &mut g_flat, feat);

        let last = self.conv[2];
        let pp = last.p();
        let mut g_a = vec![T::zero(); last.cout * batch * pp];
        for c in 0..last.cout {
            for b in 0..batch {
                g_a[(c * batch + b) * pp..][..pp].copy_from_slice(&g_flat[b * feat + c * pp..][..pp]);
            }
        }
        for l in (0..3).rev() {
            let d = self.conv[l];
            let s = sh[l];
            let n = batch * d.p();
            for (gv, zv) in g_a.iter_mut().zip(&self.z[l]) {
                *gv = *gv * leaky_grad(*zv);
            }
            let (gw, gb) = grads[s.w_off..s.end()].split_at_mut(s.out * s.fan_in);
            T::gemm(d.cout, n, d.k(), &g_a, n, 1, &self.col[l], 1, n, T::zero(), gw, d.k(), 1);
            for (co, v) in gb.iter_mut().enumerate() {
                *v = g_a[co * n..(co + 1) * n].iter().fold(T::zero(), |acc, x| acc + *x);
            }
            if l == 0 {
                break;
            }
            let mut g_col = vec![T::zero(); d.k() * n];
            T::gemm(d.k(), d.cout, n, &p[s.w_off..s.b_off], 1, d.k(), &g_a, n, 1, T::zero(), &mut g_col, n, 1);
            let mut g_prev = vec![T::zero(); d.cin * batch * d.hin * d.win];
            col2im(&g_col, &d, batch, &mut g_prev);
            g_a = g_prev;
        }
        loss * inv_b
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_dims() {
        let a = Arch::DEFAULT;
        assert_eq!(a.flat_features(), 2048);
        let l = a.layers();
        assert_eq!((l[0].out, l[0].fan_in), (8, 27));
        assert_eq!((l[2].out, l[2].fan_in), (32, 144));
        assert_eq!((l[FC_IMG].out, l[FC_IMG].fan_in), (64, 2048));
        assert_eq!((l[FUSION_1].out, l[FUSION_1].fan_in), (64, 96));
        assert_eq!((l[FUSION_2].out, l[FUSION_2].fan_in), (5, 64));
        assert_eq!(a.n_params(), 144_981);
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        // oracle: naive strided convolution with zero padding
        let d = ConvDims { cin: 2, hin: 5, win: 4, cout: 1, hout: 3, wout: 2 };
        let batch = 2;
        let src: Vec<f64> = (0..2 * batch * 20).map(|v| (v as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..18).map(|v| (v as f64 * 0.11).cos()).collect();
        let mut col = vec![0.0; d.k() * batch * d.p()];
        im2col(&src, &d, batch, &mut col);
        let n = batch * d.p();
        for b in 0..batch {
            for oi in 0..3 {
                for oj in 0..2 {
                    let mut direct = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) = (2 * oi as isize + ky as isize - 1, 2 * oj as isize + kx as isize - 1);
                                if (0..5).contains(&iy) && (0..4).contains(&ix) {
                                    direct += w[ci * 9 + ky * 3 + kx]
                                        * src[(ci * batch + b) * 20 + iy as usize * 4 + ix as usize];
                                }
                            }
                        }
                    }
                    let col_idx = (b * 3 + oi) * 2 + oj;
                    let via: f64 = (0..18).map(|k| w[k] * col[k * n + col_idx]).sum();
                    assert!((direct - via).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> = <x, col2im(y)>
        let d = ConvDims { cin: 3, hin: 7, win: 6, cout: 1, hout: 4, wout: 3 };
        let batch = 3;
        let x: Vec<f64> = (0..3 * batch * 42).map(|v| (v as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..d.k() * batch * d.p()).map(|v| (v as f64 * 0.3).cos()).collect();
        let mut cx = vec![0.0; y.len()];
        im2col(&x, &d, batch, &mut cx);
        let mut ay = vec![0.0; x.len()];
        col2im(&y, &d, batch, &mut ay);
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&ay).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
