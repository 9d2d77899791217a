//! Layers with hand-written backward passes.
//!
//! Every layer consumes and produces batch tensors whose leading axis is the
//! sample index. `forward` is pure; `forward_train` additionally caches what
//! `backward` needs, and calling `backward` without a cached forward pass is a
//! state error.

use crate::error::{Error, Result};
use crate::tensor::{conv_accumulate, conv_out_extent, matmul, matmul_nt, matmul_tn, Tensor};

/// Gradients produced by one backward step.
#[derive(Debug, Clone)]
pub struct Backward {
    pub input_grad: Tensor,
    /// One gradient per parameter, in `params()` order.
    pub param_grads: Vec<Tensor>,
}

pub trait Layer {
    fn forward(&self, input: &Tensor) -> Result<Tensor>;

    fn forward_train(&mut self, input: &Tensor) -> Result<Tensor>;

    fn backward(&self, upstream: &Tensor) -> Result<Backward>;

    fn params(&self) -> Vec<&Tensor> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        Vec::new()
    }

    fn param_names(&self) -> &'static [&'static str] {
        &[]
    }

    fn clear_cache(&mut self);
}

fn missing_cache(layer: &str) -> Error {
    Error::State(format!("{layer}: backward called before forward"))
}

fn check_upstream(upstream: &Tensor, expected: &[usize], layer: &str) -> Result<()> {
    if upstream.shape() != expected {
        return Err(Error::dim(format!(
            "{layer}: upstream gradient {:?} does not match output {expected:?}",
            upstream.shape()
        )));
    }
    Ok(())
}

/// Fully connected layer: `y = x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
    cache: Option<Tensor>,
}

impl Dense {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[1]] {
            return Err(Error::Spec(format!(
                "dense weight {:?} incompatible with bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self {
            weight,
            bias,
            cache: None,
        })
    }
}

impl Layer for Dense {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut out = matmul(input, &self.weight)?;
        let n = self.bias.len();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(self.bias.data()) {
                *o += b;
            }
        }
        Ok(out)
    }

    fn forward_train(&mut self, input: &Tensor) -> Result<Tensor> {
        let out = self.forward(input)?;
        self.cache = Some(input.clone());
        Ok(out)
    }

    fn backward(&self, upstream: &Tensor) -> Result<Backward> {
        let input = self.cache.as_ref().ok_or_else(|| missing_cache("dense"))?;
        check_upstream(upstream, &[input.rows(), self.bias.len()], "dense")?;
        let weight_grad = matmul_tn(input, upstream);
        let mut bias_grad = vec![0.0; self.bias.len()];
        for row in upstream.data().chunks(bias_grad.len()) {
            for (g, u) in bias_grad.iter_mut().zip(row) {
                *g += u;
            }
        }
        Ok(Backward {
            input_grad: matmul_nt(upstream, &self.weight),
            param_grads: vec![
                weight_grad,
                Tensor::from_parts(self.bias.shape().to_vec(), bias_grad),
            ],
        })
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn param_names(&self) -> &'static [&'static str] {
        &["weight", "bias"]
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// 2-D convolution over `[N,C,H,W]` batches. The convolution itself is
/// valid-padding; a non-zero `padding` zero-pads the input first.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    cache: Option<Tensor>,
}

impl Conv2d {
    pub fn new(kernel: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        if kernel.rank() != 4 || bias.shape() != [kernel.shape()[0]] || stride == 0 {
            return Err(Error::Spec(format!(
                "conv kernel {:?}, bias {:?}, stride {stride} are inconsistent",
                kernel.shape(),
                bias.shape()
            )));
        }
        Ok(Self {
            kernel,
            bias,
            stride,
            padding,
            cache: None,
        })
    }

    /// Output `[K,H',W']` for a `[C,H,W]` input, or a dimension error.
    pub fn output_shape(&self, item: &[usize]) -> Result<Vec<usize>> {
        let ks = self.kernel.shape();
        if item.len() != 3 || item[0] != ks[1] {
            return Err(Error::dim(format!(
                "conv with kernel {ks:?} cannot take input {item:?}"
            )));
        }
        let (h, w) = (item[1] + 2 * self.padding, item[2] + 2 * self.padding);
        if ks[2] > h || ks[3] > w {
            return Err(Error::dim(format!(
                "kernel {}x{} larger than input {h}x{w}",
                ks[2], ks[3]
            )));
        }
        Ok(vec![
            ks[0],
            conv_out_extent(h, ks[2], self.stride),
            conv_out_extent(w, ks[3], self.stride),
        ])
    }

    fn padded(&self, input: &Tensor) -> Tensor {
        if self.padding == 0 {
            return input.clone();
        }
        let s = input.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let p = self.padding;
        let (ph, pw) = (h + 2 * p, w + 2 * p);
        let mut out = vec![0.0; n * c * ph * pw];
        for plane in 0..n * c {
            for i in 0..h {
                let src = &input.data()[(plane * h + i) * w..(plane * h + i + 1) * w];
                let start = (plane * ph + i + p) * pw + p;
                out[start..start + w].copy_from_slice(src);
            }
        }
        Tensor::from_parts(vec![n, c, ph, pw], out)
    }

    fn check_input(&self, input: &Tensor) -> Result<Vec<usize>> {
        if input.rank() != 4 {
            return Err(Error::dim(format!(
                "conv expects [N,C,H,W], got {:?}",
                input.shape()
            )));
        }
        self.output_shape(&input.shape()[1..])
    }
}

impl Layer for Conv2d {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let out_item = self.check_input(input)?;
        let padded = self.padded(input);
        let s = padded.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let ks = self.kernel.shape();
        let (k, kh, kw) = (ks[0], ks[2], ks[3]);
        let plane = out_item[1] * out_item[2];
        let in_len = c * h * w;
        let mut out = vec![0.0; n * k * plane];
        for (b, dst) in out.chunks_mut(k * plane).enumerate() {
            for (ko, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.fill(self.bias.data()[ko]);
            }
            conv_accumulate(
                &padded.data()[b * in_len..(b + 1) * in_len],
                (c, h, w),
                self.kernel.data(),
                (k, kh, kw),
                self.stride,
                dst,
            );
        }
        let mut shape = vec![n];
        shape.extend(out_item);
        Ok(Tensor::from_parts(shape, out))
    }

    fn forward_train(&mut self, input: &Tensor) -> Result<Tensor> {
        let out = self.forward(input)?;
        self.cache = Some(input.clone());
        Ok(out)
    }

    fn backward(&self, upstream: &Tensor) -> Result<Backward> {
        let input = self.cache.as_ref().ok_or_else(|| missing_cache("conv2d"))?;
        let mut out_shape = vec![input.rows()];
        out_shape.extend(self.output_shape(&input.shape()[1..])?);
        check_upstream(upstream, &out_shape, "conv2d")?;

        let padded = self.padded(input);
        let s = padded.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let ks = self.kernel.shape();
        let (k, kh, kw) = (ks[0], ks[2], ks[3]);
        let (oh, ow) = (out_shape[2], out_shape[3]);
        let stride = self.stride;
        let kern = self.kernel.data();

        let mut kernel_grad = vec![0.0; self.kernel.len()];
        let mut bias_grad = vec![0.0; k];
        let mut padded_grad = vec![0.0; padded.len()];
        for b in 0..n {
            let x = &padded.data()[b * c * h * w..(b + 1) * c * h * w];
            let gx = &mut padded_grad[b * c * h * w..(b + 1) * c * h * w];
            let g = &upstream.data()[b * k * oh * ow..(b + 1) * k * oh * ow];
            for ko in 0..k {
                let g_plane = &g[ko * oh * ow..(ko + 1) * oh * ow];
                bias_grad[ko] += g_plane.iter().sum::<f64>();
                for ci in 0..c {
                    let x_plane = &x[ci * h * w..(ci + 1) * h * w];
                    let gx_plane = &mut gx[ci * h * w..(ci + 1) * h * w];
                    for u in 0..kh {
                        for v in 0..kw {
                            let kidx = ((ko * c + ci) * kh + u) * kw + v;
                            let kval = kern[kidx];
                            let mut acc = 0.0;
                            for i in 0..oh {
                                let row = (i * stride + u) * w;
                                for j in 0..ow {
                                    let gv = g_plane[i * ow + j];
                                    let at = row + j * stride + v;
                                    acc += gv * x_plane[at];
                                    gx_plane[at] += gv * kval;
                                }
                            }
                            kernel_grad[kidx] += acc;
                        }
                    }
                }
            }
        }

        let input_grad = if self.padding == 0 {
            Tensor::from_parts(input.shape().to_vec(), padded_grad)
        } else {
            let is = input.shape();
            let (ih, iw, p) = (is[2], is[3], self.padding);
            let mut cropped = Vec::with_capacity(input.len());
            for plane in 0..n * c {
                for i in 0..ih {
                    let start = (plane * h + i + p) * w + p;
                    cropped.extend_from_slice(&padded_grad[start..start + iw]);
                }
            }
            Tensor::from_parts(is.to_vec(), cropped)
        };

        Ok(Backward {
            input_grad,
            param_grads: vec![
                Tensor::from_parts(self.kernel.shape().to_vec(), kernel_grad),
                Tensor::from_parts(vec![k], bias_grad),
            ],
        })
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![&self.kernel, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.kernel, &mut self.bias]
    }

    fn param_names(&self) -> &'static [&'static str] {
        &["kernel", "bias"]
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    cache: Option<Tensor>,
}

impl Layer for Relu {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        Ok(input.map(|v| v.max(0.0)))
    }

    fn forward_train(&mut self, input: &Tensor) -> Result<Tensor> {
        self.cache = Some(input.clone());
        self.forward(input)
    }

    fn backward(&self, upstream: &Tensor) -> Result<Backward> {
        let input = self.cache.as_ref().ok_or_else(|| missing_cache("relu"))?;
        check_upstream(upstream, input.shape(), "relu")?;
        let data = input
            .data()
            .iter()
            .zip(upstream.data())
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect();
        Ok(Backward {
            input_grad: Tensor::from_parts(input.shape().to_vec(), data),
            param_grads: Vec::new(),
        })
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2 {
    fn pool(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        let s = input.shape();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::dim(format!(
                "maxpool expects [N,C,H,W] with H,W >= 2, got {s:?}"
            )));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut arg = Vec::with_capacity(n * c * oh * ow);
        let x = input.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let at = base + (2 * i + di) * w + 2 * j + dj;
                        if x[at] > x[best] {
                            best = at;
                        }
                    }
                    out.push(x[best]);
                    arg.push(best);
                }
            }
        }
        Ok((Tensor::from_parts(vec![n, c, oh, ow], out), arg))
    }
}

impl Layer for MaxPool2 {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        Ok(Self::pool(input)?.0)
    }

    fn forward_train(&mut self, input: &Tensor) -> Result<Tensor> {
        let (out, arg) = Self::pool(input)?;
        self.cache = Some((input.shape().to_vec(), arg));
        Ok(out)
    }

    fn backward(&self, upstream: &Tensor) -> Result<Backward> {
        let (shape, arg) = self
            .cache
            .as_ref()
            .ok_or_else(|| missing_cache("maxpool"))?;
        if upstream.len() != arg.len() {
            return Err(Error::dim(format!(
                "maxpool: upstream gradient {:?} does not match pooled output",
                upstream.shape()
            )));
        }
        let mut grad = vec![0.0; shape.iter().product()];
        for (&at, &g) in arg.iter().zip(upstream.data()) {
            grad[at] += g;
        }
        Ok(Backward {
            input_grad: Tensor::from_parts(shape.clone(), grad),
            param_grads: Vec::new(),
        })
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Collapses every axis after the batch axis.
#[derive(Debug, Clone, Default)]
pub struct Flatten {
    cache: Option<Vec<usize>>,
}

impl Layer for Flatten {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let (n, w) = (input.rows(), input.row_len());
        input.clone().reshape(vec![n, w])
    }

    fn forward_train(&mut self, input: &Tensor) -> Result<Tensor> {
        self.cache = Some(input.shape().to_vec());
        self.forward(input)
    }

    fn backward(&self, upstream: &Tensor) -> Result<Backward> {
        let shape = self
            .cache
            .as_ref()
            .ok_or_else(|| missing_cache("flatten"))?;
        Ok(Backward {
            input_grad: upstream.clone().reshape(shape.clone())?,
            param_grads: Vec::new(),
        })
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Mean over the spatial axes: `[N,C,H,W] → [N,C]`.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    cache: Option<Vec<usize>>,
}

impl Layer for GlobalAvgPool {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let s = input.shape();
        if s.len() != 4 {
            return Err(Error::dim(format!(
                "global pool expects [N,C,H,W], got {s:?}"
            )));
        }
        let area = s[2] * s[3];
        let data = input
            .data()
            .chunks(area)
            .map(|p| p.iter().sum::<f64>() / area as f64)
            .collect();
        Ok(Tensor::from_parts(vec![s[0], s[1]], data))
    }

    fn forward_train(&mut self, input: &Tensor) -> Result<Tensor> {
        let out = self.forward(input)?;
        self.cache = Some(input.shape().to_vec());
        Ok(out)
    }

    fn backward(&self, upstream: &Tensor) -> Result<Backward> {
        let shape = self
            .cache
            .as_ref()
            .ok_or_else(|| missing_cache("global pool"))?;
        check_upstream(upstream, &shape[..2], "global pool")?;
        let area = shape[2] * shape[3];
        let scale = 1.0 / area as f64;
        let mut grad = Vec::with_capacity(upstream.len() * area);
        for &g in upstream.data() {
            grad.extend(std::iter::repeat_n(g * scale, area));
        }
        Ok(Backward {
            input_grad: Tensor::from_parts(shape.clone(), grad),
            param_grads: Vec::new(),
        })
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// `relu(x + conv_b(relu(conv_a(x))))` with an identity skip. Both convs are
/// shape-preserving (odd square kernels, stride 1, half-kernel padding).
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv_a: Conv2d,
    pub conv_b: Conv2d,
    inner_relu: Relu,
    out_relu: Relu,
}

impl ResidualBlock {
    pub fn new(conv_a: Conv2d, conv_b: Conv2d) -> Result<Self> {
        let (a, b) = (conv_a.kernel.shape(), conv_b.kernel.shape());
        let channels = a[0];
        let preserving = |c: &Conv2d| {
            let ks = c.kernel.shape();
            c.stride == 1 && ks[2] == ks[3] && ks[2] % 2 == 1 && c.padding == ks[2] / 2
        };
        if a[1] != channels || b[0] != channels || b[1] != channels {
            return Err(Error::Spec(format!(
                "residual block kernels {a:?} and {b:?} must map C channels to C"
            )));
        }
        if !preserving(&conv_a) || !preserving(&conv_b) {
            return Err(Error::Spec(
                "residual convs must preserve spatial shape".into(),
            ));
        }
        Ok(Self {
            conv_a,
            conv_b,
            inner_relu: Relu::default(),
            out_relu: Relu::default(),
        })
    }

    fn sum_skip(body: &Tensor, input: &Tensor) -> Result<Tensor> {
        if body.shape() != input.shape() {
            return Err(Error::dim(format!(
                "residual body {:?} vs skip {:?}",
                body.shape(),
                input.shape()
            )));
        }
        let data = body
            .data()
            .iter()
            .zip(input.data())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_parts(input.shape().to_vec(), data))
    }
}

impl Layer for ResidualBlock {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let h = self.conv_a.forward(input)?;
        let h = self.inner_relu.forward(&h)?;
        let h = self.conv_b.forward(&h)?;
        self.out_relu.forward(&Self::sum_skip(&h, input)?)
    }

    fn forward_train(&mut self, input: &Tensor) -> Result<Tensor> {
        let h = self.conv_a.forward_train(input)?;
        let h = self.inner_relu.forward_train(&h)?;
        let h = self.conv_b.forward_train(&h)?;
        let sum = Self::sum_skip(&h, input)?;
        self.out_relu.forward_train(&sum)
    }

    fn backward(&self, upstream: &Tensor) -> Result<Backward> {
        let g_sum = self.out_relu.backward(upstream)?.input_grad;
        let b = self.conv_b.backward(&g_sum)?;
        let g_inner = self.inner_relu.backward(&b.input_grad)?.input_grad;
        let a = self.conv_a.backward(&g_inner)?;
        let input_grad = Self::sum_skip(&a.input_grad, &g_sum)?;
        let mut param_grads = a.param_grads;
        param_grads.extend(b.param_grads);
        Ok(Backward {
            input_grad,
            param_grads,
        })
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.conv_a.params();
        p.extend(self.conv_b.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.conv_a.params_mut();
        p.extend(self.conv_b.params_mut());
        p
    }

    fn param_names(&self) -> &'static [&'static str] {
        &[
            "conv_a.kernel",
            "conv_a.bias",
            "conv_b.kernel",
            "conv_b.bias",
        ]
    }

    fn clear_cache(&mut self) {
        self.conv_a.clear_cache();
        self.conv_b.clear_cache();
        self.inner_relu.clear_cache();
        self.out_relu.clear_cache();
    }
}

/// Closed set of layer kinds used by the model zoo.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)] // a handful per network; boxing buys nothing
pub enum AnyLayer {
    Dense(Dense),
    Conv2d(Conv2d),
    Relu(Relu),
    MaxPool2(MaxPool2),
    Flatten(Flatten),
    GlobalAvgPool(GlobalAvgPool),
    Residual(ResidualBlock),
}

macro_rules! dispatch {
    ($self:expr, $l:ident => $body:expr) => {
        match $self {
            AnyLayer::Dense($l) => $body,
            AnyLayer::Conv2d($l) => $body,
            AnyLayer::Relu($l) => $body,
            AnyLayer::MaxPool2($l) => $body,
            AnyLayer::Flatten($l) => $body,
            AnyLayer::GlobalAvgPool($l) => $body,
            AnyLayer::Residual($l) => $body,
        }
    };
}

impl AnyLayer {
    pub fn kind(&self) -> &'static str {
        match self {
            AnyLayer::Dense(_) => "dense",
            AnyLayer::Conv2d(_) => "conv",
            AnyLayer::Relu(_) => "relu",
            AnyLayer::MaxPool2(_) => "maxpool",
            AnyLayer::Flatten(_) => "flatten",
            AnyLayer::GlobalAvgPool(_) => "gap",
            AnyLayer::Residual(_) => "block",
        }
    }
}

impl Layer for AnyLayer {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        dispatch!(self, l => l.forward(input))
    }

    fn forward_train(&mut self, input: &Tensor) -> Result<Tensor> {
        dispatch!(self, l => l.forward_train(input))
    }

    fn backward(&self, upstream: &Tensor) -> Result<Backward> {
        dispatch!(self, l => l.backward(upstream))
    }

    fn params(&self) -> Vec<&Tensor> {
        dispatch!(self, l => l.params())
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        dispatch!(self, l => l.params_mut())
    }

    fn param_names(&self) -> &'static [&'static str] {
        dispatch!(self, l => l.param_names())
    }

    fn clear_cache(&mut self) {
        dispatch!(self, l => l.clear_cache())
    }
}
