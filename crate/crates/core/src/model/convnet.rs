//! Small configurable conv-net with hand-written forward and backward
//! passes over a flat parameter vector.
//!
//! The backbone is a stack of conv blocks (conv → relu → 2×2 max-pool)
//! followed by a linear head, sized for desk-scale runs. Convolutions go
//! through im2col so the hot path is a single matrix product per layer.
//! Parameters live in one flat vector, which keeps SGD, weight decay,
//! checkpointing, and finite-difference probing trivial.

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use super::{scalar, Classifier, LossSpec, Mode, Scalar};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, tag};
use rand::Rng;

/// One layer of the architecture descriptor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    /// 2×2 max-pool with stride 2; odd trailing rows/columns are dropped.
    MaxPool2,
    /// Fully connected layer; flattens its input.
    Dense { out: usize },
}

/// Architecture descriptor: input shape plus layer list. The final layer
/// must be `Dense` and its width is the class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl ArchSpec {
    /// Conv blocks (conv3x3 → relu → pool2) per entry of `conv_channels`,
    /// then a linear head.
    pub fn conv_blocks(
        input_shape: [usize; 3],
        conv_channels: &[usize],
        num_classes: usize,
    ) -> Self {
        let mut layers = Vec::new();
        for &ch in conv_channels {
            layers.push(LayerSpec::Conv {
                out_channels: ch,
                kernel: 3,
                stride: 1,
                padding: 1,
            });
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::MaxPool2);
        }
        layers.push(LayerSpec::Dense { out: num_classes });
        ArchSpec {
            input_shape,
            layers,
        }
    }

    /// Single linear layer on the flattened input.
    pub fn linear(input_shape: [usize; 3], num_classes: usize) -> Self {
        ArchSpec {
            input_shape,
            layers: vec![LayerSpec::Dense { out: num_classes }],
        }
    }

    pub fn num_classes(&self) -> Result<usize> {
        match self.layers.last() {
            Some(LayerSpec::Dense { out }) => Ok(*out),
            _ => Err(Error::config("architecture must end with a Dense layer")),
        }
    }
}

/// Per-layer compiled layout: shapes and parameter slab offsets.
#[derive(Debug, Clone)]
struct LayerLayout {
    spec: LayerSpec,
    in_shape: [usize; 3],
    out_shape: [usize; 3],
    w_off: usize,
    w_len: usize,
    b_off: usize,
    b_len: usize,
}

fn compile(arch: &ArchSpec) -> Result<(Vec<LayerLayout>, usize)> {
    let mut shape = arch.input_shape;
    let mut offset = 0usize;
    let mut layout = Vec::with_capacity(arch.layers.len());
    for (i, spec) in arch.layers.iter().enumerate() {
        let in_shape = shape;
        let (out_shape, w_len, b_len) = match *spec {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if kernel == 0 || stride == 0 {
                    return Err(Error::config(format!("layer {i}: zero kernel or stride")));
                }
                let [c, h, w] = in_shape;
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(Error::config(format!("layer {i}: kernel exceeds input")));
                }
                let oh = (h + 2 * padding - kernel) / stride + 1;
                let ow = (w + 2 * padding - kernel) / stride + 1;
                (
                    [out_channels, oh, ow],
                    out_channels * c * kernel * kernel,
                    out_channels,
                )
            }
            LayerSpec::Relu => (in_shape, 0, 0),
            LayerSpec::MaxPool2 => {
                let [c, h, w] = in_shape;
                if h < 2 || w < 2 {
                    return Err(Error::config(format!("layer {i}: input too small to pool")));
                }
                ([c, h / 2, w / 2], 0, 0)
            }
            LayerSpec::Dense { out } => {
                let d = in_shape[0] * in_shape[1] * in_shape[2];
                ([out, 1, 1], out * d, out)
            }
        };
        let w_off = offset;
        offset += w_len;
        let b_off = offset;
        offset += b_len;
        layout.push(LayerLayout {
            spec: spec.clone(),
            in_shape,
            out_shape,
            w_off,
            w_len,
            b_off,
            b_len,
        });
        shape = out_shape;
    }
    match arch.layers.last() {
        Some(LayerSpec::Dense { .. }) => {}
        _ => return Err(Error::config("architecture must end with a Dense layer")),
    }
    Ok((layout, offset))
}

/// What `backward_batch` should produce.
#[derive(Debug, Clone, Copy)]
pub struct GradWants {
    pub params: bool,
    pub input: bool,
}

/// Gradients from a backward pass.
pub struct Grads<F: Scalar> {
    /// d(loss)/dθ, flat, same layout as the parameter vector.
    pub params: Option<Vec<F>>,
    /// d(loss)/dx for the input batch.
    pub input: Option<Array4<F>>,
}

enum LayerCache<F: Scalar> {
    Conv { cols: Array2<F> },
    Relu { mask: Vec<bool> },
    Pool { argmax: Vec<u8> },
    Dense { input: Array2<F> },
}

/// Opaque forward-pass cache consumed by `backward_batch`.
pub struct ForwardCache<F: Scalar> {
    batch: usize,
    layers: Vec<LayerCache<F>>,
    logits: Array2<F>,
}

impl<F: Scalar> ForwardCache<F> {
    pub fn logits(&self) -> &Array2<F> {
        &self.logits
    }
}

/// The reference backbone. Parameters are a single flat vector; the
/// layer layout maps slabs of it to weights and biases.
#[derive(Debug, Clone)]
pub struct ConvNet<F: Scalar> {
    arch: ArchSpec,
    layout: Vec<LayerLayout>,
    params: Vec<F>,
    num_classes: usize,
    mode: Mode,
}

impl<F: Scalar> ConvNet<F> {
    /// Build with He-uniform weight init and zero biases, keyed by `seed`.
    pub fn new(arch: ArchSpec, seed: u64) -> Result<Self> {
        let (layout, num_params) = compile(&arch)?;
        let num_classes = arch.num_classes()?;
        let mut params = vec![F::zero(); num_params];
        for (li, layer) in layout.iter().enumerate() {
            if layer.w_len == 0 {
                continue;
            }
            let fan_in = match layer.spec {
                LayerSpec::Conv { kernel, .. } => layer.in_shape[0] * kernel * kernel,
                LayerSpec::Dense { .. } => {
                    layer.in_shape[0] * layer.in_shape[1] * layer.in_shape[2]
                }
                _ => unreachable!(),
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut rng = derive_rng(seed, &[tag::INIT, li as u64]);
            for w in &mut params[layer.w_off..layer.w_off + layer.w_len] {
                *w = scalar(rng.gen_range(-bound..bound));
            }
        }
        Ok(Self {
            arch,
            layout,
            params,
            num_classes,
            mode: Mode::Train,
        })
    }

    /// Rebuild from a descriptor and an existing flat parameter vector.
    pub fn from_params(arch: ArchSpec, params: Vec<F>) -> Result<Self> {
        let (layout, num_params) = compile(&arch)?;
        if params.len() != num_params {
            return Err(Error::shape(
                format!("{num_params} parameters"),
                format!("{}", params.len()),
            ));
        }
        let num_classes = arch.num_classes()?;
        Ok(Self {
            arch,
            layout,
            params,
            num_classes,
            mode: Mode::Train,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    fn check_input(&self, x: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if [c, h, w] != self.arch.input_shape {
            return Err(Error::shape(
                format!("{:?}", self.arch.input_shape),
                format!("[{c}, {h}, {w}]"),
            ));
        }
        Ok(())
    }

    /// Forward pass retaining the per-layer caches needed for backward.
    pub fn forward_cached(&self, x: &Array4<F>) -> Result<ForwardCache<F>> {
        self.check_input(x)?;
        let n = x.dim().0;
        let mut caches = Vec::with_capacity(self.layout.len());
        let mut act = x.to_owned();
        let mut logits = Array2::zeros((0, 0));
        for (li, layer) in self.layout.iter().enumerate() {
            match layer.spec {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let cols = im2col(&act, kernel, stride, padding, layer.out_shape);
                    let w2d = self.weight_matrix(layer, out_channels);
                    let mut out2d = cols.dot(&w2d.t());
                    let bias = &self.params[layer.b_off..layer.b_off + layer.b_len];
                    for mut row in out2d.rows_mut() {
                        for (v, &b) in row.iter_mut().zip(bias) {
                            *v += b;
                        }
                    }
                    act = rows_to_nchw(&out2d, n, layer.out_shape);
                    caches.push(LayerCache::Conv { cols });
                }
                LayerSpec::Relu => {
                    let mut mask = Vec::with_capacity(act.len());
                    for v in act.iter_mut() {
                        let keep = *v > F::zero();
                        mask.push(keep);
                        if !keep {
                            *v = F::zero();
                        }
                    }
                    caches.push(LayerCache::Relu { mask });
                }
                LayerSpec::MaxPool2 => {
                    let (pooled, argmax) = maxpool2(&act, layer.out_shape);
                    act = pooled;
                    caches.push(LayerCache::Pool { argmax });
                }
                LayerSpec::Dense { out } => {
                    let d = layer.in_shape[0] * layer.in_shape[1] * layer.in_shape[2];
                    let flat = flatten(&act, n, d);
                    let w2d = self.weight_matrix(layer, out);
                    let mut y = flat.dot(&w2d.t());
                    let bias = &self.params[layer.b_off..layer.b_off + layer.b_len];
                    for mut row in y.rows_mut() {
                        for (v, &b) in row.iter_mut().zip(bias) {
                            *v += b;
                        }
                    }
                    caches.push(LayerCache::Dense { input: flat });
                    if li == self.layout.len() - 1 {
                        logits = y;
                    } else {
                        act = rows_to_nchw(&y, n, layer.out_shape);
                    }
                }
            }
        }
        Ok(ForwardCache {
            batch: n,
            layers: caches,
            logits,
        })
    }

    /// Backprop `dlogits` through the cached pass.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache<F>,
        dlogits: &Array2<F>,
        wants: GradWants,
    ) -> Grads<F> {
        let n = cache.batch;
        let mut pgrads = if wants.params {
            Some(vec![F::zero(); self.params.len()])
        } else {
            None
        };
        // Gradient flowing backward, in the output layout of each layer.
        let mut grad2d: Array2<F> = dlogits.clone();
        let mut grad4d: Option<Array4<F>> = None;
        for (li, layer) in self.layout.iter().enumerate().rev() {
            let lc = &cache.layers[li];
            match (&layer.spec, lc) {
                (LayerSpec::Dense { out }, LayerCache::Dense { input }) => {
                    let dy = match grad4d.take() {
                        Some(g) => flatten(&g, n, *out),
                        None => grad2d,
                    };
                    let w2d = self.weight_matrix(layer, *out);
                    if let Some(pg) = pgrads.as_mut() {
                        let dw = dy.t().dot(input);
                        pg[layer.w_off..layer.w_off + layer.w_len]
                            .copy_from_slice(dw.as_standard_layout().as_slice().unwrap());
                        for (j, db) in pg[layer.b_off..layer.b_off + layer.b_len]
                            .iter_mut()
                            .enumerate()
                        {
                            let mut acc = F::zero();
                            for i in 0..n {
                                acc += dy[[i, j]];
                            }
                            *db = acc;
                        }
                    }
                    if li > 0 || wants.input {
                        let dx = dy.dot(&w2d);
                        grad4d = Some(rows_to_input(&dx, n, layer.in_shape));
                    }
                    grad2d = Array2::zeros((0, 0));
                }
                (
                    LayerSpec::Conv {
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    },
                    LayerCache::Conv { cols },
                ) => {
                    let g4 = grad4d.take().expect("conv upstream gradient");
                    let dout2d = nchw_to_rows(&g4, n, layer.out_shape);
                    if let Some(pg) = pgrads.as_mut() {
                        let dw = dout2d.t().dot(cols);
                        pg[layer.w_off..layer.w_off + layer.w_len]
                            .copy_from_slice(dw.as_standard_layout().as_slice().unwrap());
                        for (j, db) in pg[layer.b_off..layer.b_off + layer.b_len]
                            .iter_mut()
                            .enumerate()
                        {
                            let mut acc = F::zero();
                            for r in 0..dout2d.nrows() {
                                acc += dout2d[[r, j]];
                            }
                            *db = acc;
                        }
                    }
                    let needs_more = li > 0 || wants.input;
                    if needs_more {
                        let w2d = self.weight_matrix(layer, *out_channels);
                        let dcols = dout2d.dot(&w2d);
                        grad4d = Some(col2im(
                            &dcols,
                            n,
                            layer.in_shape,
                            *kernel,
                            *stride,
                            *padding,
                            layer.out_shape,
                        ));
                    }
                }
                (LayerSpec::Relu, LayerCache::Relu { mask }) => {
                    let g4 = grad4d.as_mut().expect("relu upstream gradient");
                    for (v, &keep) in g4.iter_mut().zip(mask) {
                        if !keep {
                            *v = F::zero();
                        }
                    }
                }
                (LayerSpec::MaxPool2, LayerCache::Pool { argmax }) => {
                    let g4 = grad4d.take().expect("pool upstream gradient");
                    grad4d = Some(maxpool2_backward(&g4, argmax, n, layer.in_shape));
                }
                _ => unreachable!("cache/spec mismatch"),
            }
        }
        Grads {
            params: pgrads,
            input: if wants.input { grad4d } else { None },
        }
    }

    fn weight_matrix(&self, layer: &LayerLayout, rows: usize) -> Array2<F> {
        let cols = layer.w_len / rows;
        Array2::from_shape_vec(
            (rows, cols),
            self.params[layer.w_off..layer.w_off + layer.w_len].to_vec(),
        )
        .expect("weight slab shape")
    }
}

impl<F: Scalar> Classifier<F> for ConvNet<F> {
    fn input_shape(&self) -> [usize; 3] {
        self.arch.input_shape
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn forward_batch(&self, x: &Array4<F>) -> Array2<F> {
        self.forward_cached(x)
            .expect("input shape checked by caller")
            .logits
    }

    fn input_gradient_batch(&self, x: &Array4<F>, loss: &LossSpec<F>) -> Result<Array4<F>> {
        if loss.rows() != x.dim().0 {
            return Err(Error::shape(
                format!("{} loss rows", x.dim().0),
                format!("{}", loss.rows()),
            ));
        }
        let cache = self.forward_cached(x)?;
        if cache.logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite logits in gradient query"));
        }
        let dlogits = loss.dlogits(&cache.logits);
        let grads = self.backward_batch(
            &cache,
            &dlogits,
            GradWants {
                params: false,
                input: true,
            },
        );
        Ok(grads.input.expect("input gradient requested"))
    }
}

fn im2col<F: Scalar>(
    x: &Array4<F>,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_shape: [usize; 3],
) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let [_, oh, ow] = out_shape;
    let ck = c * kernel * kernel;
    let mut cols = Array2::zeros((n * oh * ow, ck));
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (ni * oh + oy) * ow + ox;
                let mut col = 0usize;
                for ci in 0..c {
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                cols[[row, col]] = x[[ni, ci, iy as usize, ix as usize]];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Scalar>(
    dcols: &Array2<F>,
    n: usize,
    in_shape: [usize; 3],
    kernel: usize,
    stride: usize,
    padding: usize,
    out_shape: [usize; 3],
) -> Array4<F> {
    let [c, h, w] = in_shape;
    let [_, oh, ow] = out_shape;
    let mut dx = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (ni * oh + oy) * ow + ox;
                let mut col = 0usize;
                for ci in 0..c {
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                dx[[ni, ci, iy as usize, ix as usize]] += dcols[[row, col]];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// [R=N·OH·OW, Cout] rows → [N, Cout, OH, OW].
fn rows_to_nchw<F: Scalar>(rows: &Array2<F>, n: usize, out_shape: [usize; 3]) -> Array4<F> {
    let [c, oh, ow] = out_shape;
    let mut out = Array4::zeros((n, c, oh, ow));
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (ni * oh + oy) * ow + ox;
                for ci in 0..c {
                    out[[ni, ci, oy, ox]] = rows[[row, ci]];
                }
            }
        }
    }
    out
}

/// [N, Cout, OH, OW] → [R=N·OH·OW, Cout] rows (inverse of `rows_to_nchw`).
fn nchw_to_rows<F: Scalar>(x: &Array4<F>, n: usize, out_shape: [usize; 3]) -> Array2<F> {
    let [c, oh, ow] = out_shape;
    let mut rows = Array2::zeros((n * oh * ow, c));
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (ni * oh + oy) * ow + ox;
                for ci in 0..c {
                    rows[[row, ci]] = x[[ni, ci, oy, ox]];
                }
            }
        }
    }
    rows
}

/// Flatten [N, C, H, W] → [N, C·H·W] in standard layout.
fn flatten<F: Scalar>(x: &Array4<F>, n: usize, d: usize) -> Array2<F> {
    let std = x.as_standard_layout();
    Array2::from_shape_vec((n, d), std.as_slice().unwrap().to_vec()).expect("flatten shape")
}

/// Flat dense gradient rows [N, D] → input layout [N, C, H, W].
fn rows_to_input<F: Scalar>(rows: &Array2<F>, n: usize, in_shape: [usize; 3]) -> Array4<F> {
    let [c, h, w] = in_shape;
    let std = rows.as_standard_layout();
    Array4::from_shape_vec((n, c, h, w), std.as_slice().unwrap().to_vec())
        .expect("gradient reshape")
}

fn maxpool2<F: Scalar>(x: &Array4<F>, out_shape: [usize; 3]) -> (Array4<F>, Vec<u8>) {
    let (n, c, _, _) = x.dim();
    let [_, oh, ow] = out_shape;
    let mut out = Array4::zeros((n, c, oh, ow));
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base_y = oy * 2;
                    let base_x = ox * 2;
                    let mut best = x[[ni, ci, base_y, base_x]];
                    let mut best_k = 0u8;
                    for k in 1u8..4 {
                        let dy = (k / 2) as usize;
                        let dx = (k % 2) as usize;
                        let v = x[[ni, ci, base_y + dy, base_x + dx]];
                        if v > best {
                            best = v;
                            best_k = k;
                        }
                    }
                    out[[ni, ci, oy, ox]] = best;
                    argmax.push(best_k);
                }
            }
        }
    }
    (out, argmax)
}

fn maxpool2_backward<F: Scalar>(
    dout: &Array4<F>,
    argmax: &[u8],
    n: usize,
    in_shape: [usize; 3],
) -> Array4<F> {
    let [c, h, w] = in_shape;
    let (_, _, oh, ow) = dout.dim();
    let mut dx = Array4::zeros((n, c, h, w));
    let mut idx = 0usize;
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let k = argmax[idx];
                    idx += 1;
                    let iy = oy * 2 + (k / 2) as usize;
                    let ix = ox * 2 + (k % 2) as usize;
                    dx[[ni, ci, iy, ix]] += dout[[ni, ci, oy, ox]];
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::math;
    use ndarray::Array4;
    use rand::Rng;

    fn random_batch(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = derive_rng(seed, &[99]);
        Array4::from_shape_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    fn ce_loss(net: &ConvNet<f64>, x: &Array4<f64>, targets: &Array2<f64>) -> f64 {
        let logits = net.forward_batch(x);
        let probs = math::softmax_batch(&logits);
        let mut acc = 0.0;
        for i in 0..x.dim().0 {
            acc += math::cross_entropy(
                probs.row(i).as_slice().unwrap(),
                targets.row(i).as_slice().unwrap(),
            );
        }
        acc
    }

    #[test]
    fn forward_shapes() {
        let arch = ArchSpec::conv_blocks([1, 12, 12], &[4, 8], 10);
        let net = ConvNet::<f32>::new(arch, 0).unwrap();
        let x = Array4::<f32>::zeros((3, 1, 12, 12));
        let logits = net.forward_batch(&x);
        assert_eq!(logits.dim(), (3, 10));
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let arch = ArchSpec::conv_blocks([1, 12, 12], &[4], 3);
        let net = ConvNet::<f32>::new(arch, 0).unwrap();
        let x = Array4::<f32>::zeros((1, 1, 10, 10));
        assert!(net.forward_cached(&x).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let arch = ArchSpec::conv_blocks([2, 6, 6], &[3], 4);
        let net = ConvNet::<f64>::new(arch, 5).unwrap();
        let x = random_batch((2, 2, 6, 6), 17);
        let targets = math::one_hot_batch::<f64>(&[1, 3], 4).unwrap();
        let loss = LossSpec::CeToTarget {
            targets: targets.clone(),
        };
        let analytic = net.input_gradient_batch(&x, &loss).unwrap();
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for &idx in &[0usize, 7, 20, 41, 63, 70] {
            let (n, c, h, w) = x.dim();
            let coords = {
                let mut rem = idx;
                let ww = rem % w;
                rem /= w;
                let hh = rem % h;
                rem /= h;
                let cc = rem % c;
                rem /= c;
                (rem % n, cc, hh, ww)
            };
            let mut xp = x.clone();
            xp[[coords.0, coords.1, coords.2, coords.3]] += eps;
            let mut xm = x.clone();
            xm[[coords.0, coords.1, coords.2, coords.3]] -= eps;
            let fd = (ce_loss(&net, &xp, &targets) - ce_loss(&net, &xm, &targets)) / (2.0 * eps);
            let an = analytic[[coords.0, coords.1, coords.2, coords.3]];
            let denom = an.abs().max(fd.abs()).max(1e-8);
            worst = worst.max((an - fd).abs() / denom);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn param_gradient_matches_finite_differences() {
        let arch = ArchSpec::conv_blocks([1, 6, 6], &[3], 3);
        let mut net = ConvNet::<f64>::new(arch, 11).unwrap();
        let x = random_batch((2, 1, 6, 6), 23);
        let targets = math::one_hot_batch::<f64>(&[0, 2], 3).unwrap();
        let cache = net.forward_cached(&x).unwrap();
        let probs = math::softmax_batch(cache.logits());
        let dlogits = probs - &targets;
        let grads = net.backward_batch(
            &cache,
            &dlogits,
            GradWants {
                params: true,
                input: false,
            },
        );
        let pg = grads.params.unwrap();
        let eps = 1e-6;
        // probe a spread of parameter indices, including biases at the end
        let total = net.num_params();
        let probes = [0, total / 3, total / 2, total - 2, total - 1];
        for &pi in &probes {
            let orig = net.params()[pi];
            net.params_mut()[pi] = orig + eps;
            let lp = ce_loss(&net, &x, &targets);
            net.params_mut()[pi] = orig - eps;
            let lm = ce_loss(&net, &x, &targets);
            net.params_mut()[pi] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let denom = pg[pi].abs().max(fd.abs()).max(1e-8);
            assert!(
                (pg[pi] - fd).abs() / denom < 1e-4,
                "param {pi}: analytic {} vs fd {fd}",
                pg[pi]
            );
        }
    }

    #[test]
    fn eval_forward_is_pure() {
        let arch = ArchSpec::conv_blocks([1, 8, 8], &[4], 5);
        let mut net = ConvNet::<f32>::new(arch, 2).unwrap();
        net.set_mode(Mode::Eval);
        let x = Array4::from_shape_fn((2, 1, 8, 8), |(n, _, i, j)| {
            ((n + i + j) % 7) as f32 / 7.0
        });
        let a = net.forward_batch(&x);
        let b = net.forward_batch(&x);
        assert_eq!(a, b);
    }

    #[test]
    fn maxpool_drops_odd_edges() {
        let arch = ArchSpec {
            input_shape: [1, 3, 3],
            layers: vec![LayerSpec::MaxPool2, LayerSpec::Dense { out: 2 }],
        };
        let net = ConvNet::<f32>::new(arch, 0).unwrap();
        let x = Array4::from_shape_fn((1, 1, 3, 3), |(_, _, i, j)| (i * 3 + j) as f32);
        let cache = net.forward_cached(&x).unwrap();
        assert_eq!(cache.logits().dim(), (1, 2));
    }
}
