//! Minimal CPU layers with hand-written backward passes.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::FeatureMap;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `[out_ch][in_ch][kernel][kernel]`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Output positions `o` in `[lo, hi)` whose input index `o*stride + k - pad`
/// lands inside `[0, n)`.
#[inline]
fn valid_range(n: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // o*stride + k >= pad
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    // o*stride + k - pad <= n - 1
    let hi = if n + pad < k + 1 {
        0
    } else {
        ((n + pad - k - 1) / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

impl Conv2d {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f32;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let weight = (0..out_ch * in_ch * kernel * kernel)
            .map(|_| normal.sample(rng))
            .collect();
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            weight,
            bias: vec![0.0; out_ch],
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        debug_assert_eq!(x.channels(), self.in_ch);
        let (h, w) = (x.height(), x.width());
        let (ho, wo) = self.output_size(h, w);
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let mut y = FeatureMap::zeros(self.out_ch, ho, wo);
        let xs = x.as_slice();
        let ys = y.as_mut_slice();
        for oc in 0..self.out_ch {
            let out = &mut ys[oc * ho * wo..(oc + 1) * ho * wo];
            out.fill(self.bias[oc]);
            for ic in 0..self.in_ch {
                let plane = &xs[ic * h * w..(ic + 1) * h * w];
                let wbase = (oc * self.in_ch + ic) * k * k;
                for ky in 0..k {
                    let (oy0, oy1) = valid_range(h, ho, ky, s, p);
                    for kx in 0..k {
                        let wv = self.weight[wbase + ky * k + kx];
                        let (ox0, ox1) = valid_range(w, wo, kx, s, p);
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - p;
                            let row = &plane[iy * w..(iy + 1) * w];
                            let orow = &mut out[oy * wo..(oy + 1) * wo];
                            if s == 1 {
                                let ix0 = ox0 + kx - p;
                                for (o, &i) in
                                    orow[ox0..ox1].iter_mut().zip(&row[ix0..ix0 + (ox1 - ox0)])
                                {
                                    *o += wv * i;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    orow[ox] += wv * row[ox * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grad_w` / `grad_b` and returns
    /// the gradient with respect to `x` when `want_input_grad` is set.
    pub fn backward(
        &self,
        x: &FeatureMap,
        grad_y: &FeatureMap,
        grad_w: &mut [f32],
        grad_b: &mut [f32],
        want_input_grad: bool,
    ) -> Option<FeatureMap> {
        let (h, w) = (x.height(), x.width());
        let (ho, wo) = (grad_y.height(), grad_y.width());
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let xs = x.as_slice();
        let gys = grad_y.as_slice();
        let mut grad_x = want_input_grad.then(|| FeatureMap::zeros(self.in_ch, h, w));
        for oc in 0..self.out_ch {
            let gout = &gys[oc * ho * wo..(oc + 1) * ho * wo];
            grad_b[oc] += gout.iter().sum::<f32>();
            for ic in 0..self.in_ch {
                let plane = &xs[ic * h * w..(ic + 1) * h * w];
                let wbase = (oc * self.in_ch + ic) * k * k;
                for ky in 0..k {
                    let (oy0, oy1) = valid_range(h, ho, ky, s, p);
                    for kx in 0..k {
                        let (ox0, ox1) = valid_range(w, wo, kx, s, p);
                        let wv = self.weight[wbase + ky * k + kx];
                        let mut acc = 0.0f32;
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - p;
                            let row = &plane[iy * w..(iy + 1) * w];
                            let grow = &gout[oy * wo..(oy + 1) * wo];
                            if s == 1 {
                                let ix0 = ox0 + kx - p;
                                acc += grow[ox0..ox1]
                                    .iter()
                                    .zip(&row[ix0..ix0 + (ox1 - ox0)])
                                    .map(|(g, i)| g * i)
                                    .sum::<f32>();
                            } else {
                                for ox in ox0..ox1 {
                                    acc += grow[ox] * row[ox * s + kx - p];
                                }
                            }
                        }
                        grad_w[wbase + ky * k + kx] += acc;
                        if let Some(gx) = grad_x.as_mut() {
                            let gplane = &mut gx.as_mut_slice()[ic * h * w..(ic + 1) * h * w];
                            for oy in oy0..oy1 {
                                let iy = oy * s + ky - p;
                                let grow = &gout[oy * wo..(oy + 1) * wo];
                                let xrow = &mut gplane[iy * w..(iy + 1) * w];
                                if s == 1 {
                                    let ix0 = ox0 + kx - p;
                                    for (xg, &g) in
                                        xrow[ix0..ix0 + (ox1 - ox0)].iter_mut().zip(&grow[ox0..ox1])
                                    {
                                        *xg += wv * g;
                                    }
                                } else {
                                    for ox in ox0..ox1 {
                                        xrow[ox * s + kx - p] += wv * grow[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        grad_x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    Relu,
    /// Nearest-neighbour upsampling by 2 in both spatial axes.
    Upsample2,
}

impl Layer {
    fn forward(&self, x: &FeatureMap) -> FeatureMap {
        match self {
            Layer::Conv(c) => c.forward(x),
            Layer::Relu => {
                let mut y = x.clone();
                y.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
                y
            }
            Layer::Upsample2 => {
                let (c, h, w) = x.shape();
                let mut y = FeatureMap::zeros(c, 2 * h, 2 * w);
                for ch in 0..c {
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            y.set(ch, yy, xx, x.get(ch, yy / 2, xx / 2));
                        }
                    }
                }
                y
            }
        }
    }
}

/// A chain of layers with per-conv gradient buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

/// Gradient buffers shaped like a network's parameter tensors.
pub type Grads = Vec<Vec<f32>>;

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let mut cur = x.clone();
        for l in &self.layers {
            cur = l.forward(&cur);
        }
        cur
    }

    /// Input plus every layer output, for the backward pass.
    pub fn forward_trace(&self, x: &FeatureMap) -> Vec<FeatureMap> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for l in &self.layers {
            let next = l.forward(acts.last().unwrap());
            acts.push(next);
        }
        acts
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn convs_mut(&mut self) -> impl Iterator<Item = &mut Conv2d> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    /// Parameter tensors in declared order: for each conv, weight then bias.
    pub fn params(&self) -> Vec<&[f32]> {
        self.convs()
            .flat_map(|c| [c.weight.as_slice(), c.bias.as_slice()])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f32>> {
        self.convs_mut()
            .flat_map(|c| [&mut c.weight, &mut c.bias])
            .collect()
    }

    pub fn zero_grads(&self) -> Grads {
        self.params().iter().map(|p| vec![0.0; p.len()]).collect()
    }

    /// Backpropagates `grad_out` through a trace from [`Sequential::forward_trace`],
    /// accumulating into `grads`. The input gradient is not computed.
    pub fn backward(&self, trace: &[FeatureMap], grad_out: FeatureMap, grads: &mut Grads) {
        let mut g = grad_out;
        let n_convs = self.convs().count();
        let mut conv_idx = n_convs;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &trace[i];
            match layer {
                Layer::Conv(c) => {
                    conv_idx -= 1;
                    let (gw, rest) = grads[2 * conv_idx..].split_at_mut(1);
                    let need_input = conv_idx > 0;
                    match c.backward(x, &g, &mut gw[0], &mut rest[0], need_input) {
                        Some(gx) => g = gx,
                        None => return,
                    }
                }
                Layer::Relu => {
                    let y = &trace[i + 1];
                    for (gv, &yv) in g.as_mut_slice().iter_mut().zip(y.as_slice()) {
                        if yv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                }
                Layer::Upsample2 => {
                    let (c, h, w) = x.shape();
                    let mut gx = FeatureMap::zeros(c, h, w);
                    for ch in 0..c {
                        for yy in 0..2 * h {
                            for xx in 0..2 * w {
                                let v = gx.get(ch, yy / 2, xx / 2) + g.get(ch, yy, xx);
                                gx.set(ch, yy / 2, xx / 2, v);
                            }
                        }
                    }
                    g = gx;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
        let data = (0..c * h * w)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        FeatureMap::from_vec(c, h, w, data).unwrap()
    }

    /// Direct definition of a zero-padded strided convolution.
    fn conv_oracle(c: &Conv2d, x: &FeatureMap) -> FeatureMap {
        let (ho, wo) = c.output_size(x.height(), x.width());
        let mut y = FeatureMap::zeros(c.out_ch, ho, wo);
        for oc in 0..c.out_ch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = f64::from(c.bias[oc]);
                    for ic in 0..c.in_ch {
                        for ky in 0..c.kernel {
                            for kx in 0..c.kernel {
                                let iy = (oy * c.stride + ky) as i64 - c.pad as i64;
                                let ix = (ox * c.stride + kx) as i64 - c.pad as i64;
                                if iy < 0
                                    || ix < 0
                                    || iy >= x.height() as i64
                                    || ix >= x.width() as i64
                                {
                                    continue;
                                }
                                let wv =
                                    c.weight[((oc * c.in_ch + ic) * c.kernel + ky) * c.kernel + kx];
                                s += f64::from(wv) * f64::from(x.get(ic, iy as usize, ix as usize));
                            }
                        }
                    }
                    y.set(oc, oy, ox, s as f32);
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, s, p) in [(3, 1, 1), (4, 2, 1), (3, 2, 0), (1, 1, 0), (5, 1, 2)] {
            let mut c = Conv2d::new(3, 4, k, s, p, &mut rng);
            c.bias
                .iter_mut()
                .for_each(|b| *b = rng.random_range(-0.5..0.5));
            let x = random_map(3, 9, 8, &mut rng);
            let fast = c.forward(&x);
            let slow = conv_oracle(&c, &x);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.as_slice().iter().zip(slow.as_slice()) {
                assert!((a - b).abs() < 1e-5, "k={k} s={s} p={p}: {a} vs {b}");
            }
        }
    }

    /// Central finite differences of `L = Σ r ⊙ net(x)` against backprop.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Sequential::new(vec![
            Layer::Conv(Conv2d::new(2, 3, 4, 2, 1, &mut rng)),
            Layer::Relu,
            Layer::Upsample2,
            Layer::Conv(Conv2d::new(3, 2, 3, 1, 1, &mut rng)),
        ]);
        let x = random_map(2, 6, 6, &mut rng);
        let out_shape = net.forward(&x).shape();
        let r = random_map(out_shape.0, out_shape.1, out_shape.2, &mut rng);
        let loss = |n: &Sequential| -> f64 {
            n.forward(&x)
                .as_slice()
                .iter()
                .zip(r.as_slice())
                .map(|(a, b)| f64::from(*a) * f64::from(*b))
                .sum()
        };
        let mut grads = net.zero_grads();
        net.backward(&net.forward_trace(&x), r.clone(), &mut grads);

        let eps = 1e-2f32;
        for (t, g) in grads.iter().enumerate() {
            for i in (0..g.len()).step_by(7) {
                let mut plus = net.clone();
                plus.params_mut()[t][i] += eps;
                let mut minus = net.clone();
                minus.params_mut()[t][i] -= eps;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * f64::from(eps));
                let an = f64::from(g[i]);
                assert!(
                    (fd - an).abs() <= 2e-2 * (1.0 + an.abs()),
                    "tensor {t} index {i}: fd {fd} vs backprop {an}"
                );
            }
        }
    }

    #[test]
    fn valid_range_covers_padding_edges() {
        // n=4, k=3, s=1, p=1 -> outputs 0..4; ky=0 needs oy>=1
        assert_eq!(valid_range(4, 4, 0, 1, 1), (1, 4));
        assert_eq!(valid_range(4, 4, 2, 1, 1), (0, 3));
        // stride 2, k=4, p=1 over n=8 -> 4 outputs
        assert_eq!(valid_range(8, 4, 0, 2, 1), (1, 4));
        assert_eq!(valid_range(8, 4, 3, 2, 1), (0, 3));
    }
}
