//! Layers, their gradients, and the sequential network container.
//!
//! Conventions, fixed once here:
//! - feature maps are `[channels, length]`, row-major;
//! - conv1d is cross-correlation (no kernel flip), stride 1, VALID padding,
//!   weights `[out_ch, in_ch, k]`;
//! - dense weights are `[out, in]`;
//! - `backward` takes the layer's forward input and the upstream gradient,
//!   accumulates parameter gradients into a zeroed mirror layer, and returns
//!   the gradient with respect to the input.

use super::tensor::{Real, Tensor};
use super::NnError;

/// SeLU constants. The canonical pair comes from the self-normalizing
/// formulation; the literal mode drops the output scale (`lambda = 1`).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeluParams {
    pub alpha: f64,
    pub lambda_scale: f64,
}

impl SeluParams {
    pub const CANONICAL_ALPHA: f64 = 1.673_263_242_354_377_2;
    pub const CANONICAL_LAMBDA: f64 = 1.050_700_987_355_480_5;

    pub fn canonical() -> Self {
        Self { alpha: Self::CANONICAL_ALPHA, lambda_scale: Self::CANONICAL_LAMBDA }
    }

    /// Same alpha, unit output scale.
    pub fn literal() -> Self {
        Self { alpha: Self::CANONICAL_ALPHA, lambda_scale: 1.0 }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.alpha > 0.0 && self.lambda_scale > 0.0 {
            Ok(())
        } else {
            Err(NnError::BadHyper(format!(
                "selu constants must be positive, got alpha={} lambda={}",
                self.alpha, self.lambda_scale
            )))
        }
    }
}

impl Default for SeluParams {
    fn default() -> Self {
        Self::canonical()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind<T> {
    /// `[out_ch, in_ch, k]` weights, `[out_ch]` bias; stride 1, VALID.
    Conv1d { weight: Tensor<T>, bias: Tensor<T> },
    Selu { alpha: T, lambda: T },
    TanhAct,
    Flatten,
    /// `[out, in]` weights, `[out]` bias.
    Dense { weight: Tensor<T>, bias: Tensor<T> },
    GlobalAvgPool,
    /// Splits the input channels evenly, runs one sub-network per slice, and
    /// concatenates their rank-1 outputs.
    Branches(Vec<Network<T>>),
}

impl<T: Real> LayerKind<T> {
    pub fn selu(p: &SeluParams) -> Self {
        LayerKind::Selu { alpha: T::from_f64(p.alpha), lambda: T::from_f64(p.lambda_scale) }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let out = match self {
            LayerKind::Conv1d { weight, bias } => conv1d_forward(x, weight, bias)?,
            LayerKind::Selu { alpha, lambda } => elementwise(x, |v| selu_value(v, *alpha, *lambda)),
            LayerKind::TanhAct => elementwise(x, |v| v.tanh()),
            LayerKind::Flatten => x.clone().reshaped(&[x.numel()])?,
            LayerKind::Dense { weight, bias } => dense_forward(x, weight, bias)?,
            LayerKind::GlobalAvgPool => global_avg_pool(x)?,
            LayerKind::Branches(branches) => branches_forward(branches, x)?,
        };
        debug_assert!(out.all_finite(), "layer produced a non-finite value");
        Ok(out)
    }

    /// Returns grad wrt `x`; parameter grads are added into `grad`.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        grad_out: &Tensor<T>,
        grad: &mut LayerKind<T>,
    ) -> Result<Tensor<T>, NnError> {
        match (self, grad) {
            (LayerKind::Conv1d { weight, .. }, LayerKind::Conv1d { weight: gw, bias: gb }) => {
                conv1d_backward(x, weight, grad_out, gw, gb)
            }
            (LayerKind::Selu { alpha, lambda }, _) => Ok(elementwise_zip(x, grad_out, |v, g| {
                g * selu_derivative(v, *alpha, *lambda)
            })),
            (LayerKind::TanhAct, _) => Ok(elementwise_zip(x, grad_out, |v, g| {
                let t = v.tanh();
                g * (T::one() - t * t)
            })),
            (LayerKind::Flatten, _) => grad_out.clone().reshaped(x.dims()),
            (LayerKind::Dense { weight, .. }, LayerKind::Dense { weight: gw, bias: gb }) => {
                dense_backward(x, weight, grad_out, gw, gb)
            }
            (LayerKind::GlobalAvgPool, _) => global_avg_pool_backward(x, grad_out),
            (LayerKind::Branches(branches), LayerKind::Branches(grads)) => {
                branches_backward(branches, x, grad_out, grads)
            }
            _ => Err(NnError::ShapeMismatch("gradient mirror does not match layer".into())),
        }
    }

    fn zeros_like(&self) -> LayerKind<T> {
        match self {
            LayerKind::Conv1d { weight, bias } => LayerKind::Conv1d {
                weight: Tensor::zeros(weight.dims()),
                bias: Tensor::zeros(bias.dims()),
            },
            LayerKind::Dense { weight, bias } => LayerKind::Dense {
                weight: Tensor::zeros(weight.dims()),
                bias: Tensor::zeros(bias.dims()),
            },
            LayerKind::Branches(b) => LayerKind::Branches(b.iter().map(Network::zeros_like).collect()),
            other => other.clone(),
        }
    }

    fn visit_tensors<'a>(&'a self, f: &mut impl FnMut(&'a Tensor<T>)) {
        match self {
            LayerKind::Conv1d { weight, bias } | LayerKind::Dense { weight, bias } => {
                f(weight);
                f(bias);
            }
            LayerKind::Branches(branches) => {
                for b in branches {
                    b.visit_tensors(f);
                }
            }
            _ => {}
        }
    }

    fn visit_tensors_mut(&mut self, f: &mut impl FnMut(&mut Tensor<T>)) {
        match self {
            LayerKind::Conv1d { weight, bias } | LayerKind::Dense { weight, bias } => {
                f(weight);
                f(bias);
            }
            LayerKind::Branches(branches) => {
                for b in branches {
                    b.visit_tensors_mut(f);
                }
            }
            _ => {}
        }
    }
}

/// A plain sequential stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub layers: Vec<LayerKind<T>>,
}

impl<T: Real> Network<T> {
    pub fn new(layers: Vec<LayerKind<T>>) -> Self {
        Self { layers }
    }

    /// Pure forward pass.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur)?;
        }
        Ok(cur)
    }

    /// Forward pass keeping every activation: `trace[0]` is the input,
    /// `trace[i + 1]` the output of layer `i`.
    pub fn trace(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>, NnError> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for layer in &self.layers {
            let next = layer.forward(acts.last().unwrap())?;
            acts.push(next);
        }
        Ok(acts)
    }

    /// Backpropagate through a previously recorded trace, accumulating
    /// parameter gradients into `grads` (a [`Network::zeros_like`] mirror).
    pub fn backward(
        &self,
        trace: &[Tensor<T>],
        grad_out: &Tensor<T>,
        grads: &mut Network<T>,
    ) -> Result<Tensor<T>, NnError> {
        if trace.len() != self.layers.len() + 1 || grads.layers.len() != self.layers.len() {
            return Err(NnError::ShapeMismatch("trace/grads do not match network depth".into()));
        }
        let mut g = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            g = layer.backward(&trace[i], &g, &mut grads.layers[i])?;
        }
        Ok(g)
    }

    pub fn zeros_like(&self) -> Network<T> {
        Network { layers: self.layers.iter().map(LayerKind::zeros_like).collect() }
    }

    fn visit_tensors<'a>(&'a self, f: &mut impl FnMut(&'a Tensor<T>)) {
        for layer in &self.layers {
            layer.visit_tensors(f);
        }
    }

    fn visit_tensors_mut(&mut self, f: &mut impl FnMut(&mut Tensor<T>)) {
        for layer in &mut self.layers {
            layer.visit_tensors_mut(f);
        }
    }

    /// Parameter tensors in traversal order (layer order; weight before bias;
    /// branches depth-first). This order defines the flat parameter vector
    /// and the on-disk tensor order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        self.visit_tensors(&mut |t| out.push(t));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_tensors(&mut |t| n += t.numel());
        n
    }

    pub fn flat_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit_tensors(&mut |t| out.extend_from_slice(t.data()));
        out
    }

    pub fn set_flat_params(&mut self, params: &[T]) -> Result<(), NnError> {
        if params.len() != self.param_count() {
            return Err(NnError::ShapeMismatch(format!(
                "{} flat parameters for a network of {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        self.visit_tensors_mut(&mut |t| {
            let n = t.numel();
            t.data_mut().copy_from_slice(&params[off..off + n]);
            off += n;
        });
        Ok(())
    }

    /// Replace parameter tensors wholesale; dims must match exactly.
    pub fn set_tensors(&mut self, tensors: &[Tensor<T>]) -> Result<(), NnError> {
        let want: Vec<Vec<usize>> = self.tensors().iter().map(|t| t.dims().to_vec()).collect();
        if tensors.len() != want.len() {
            return Err(NnError::ShapeMismatch(format!(
                "{} tensors for a network of {}",
                tensors.len(),
                want.len()
            )));
        }
        for (have, need) in tensors.iter().zip(&want) {
            if have.dims() != need.as_slice() {
                return Err(NnError::ShapeMismatch(format!(
                    "tensor dims {:?} where {:?} expected",
                    have.dims(),
                    need
                )));
            }
        }
        let mut it = tensors.iter();
        self.visit_tensors_mut(&mut |t| *t = it.next().unwrap().clone());
        Ok(())
    }

    pub fn scale_params(&mut self, s: T) {
        self.visit_tensors_mut(&mut |t| {
            for v in t.data_mut() {
                *v *= s;
            }
        });
    }

    pub fn zero_params(&mut self) {
        self.visit_tensors_mut(&mut |t| t.fill(T::zero()));
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network { layers: self.layers.iter().map(cast_layer).collect() }
    }

    /// Smallest |v| over every value entering a SeLU anywhere in the stack.
    /// The SeLU derivative jumps at 0, so a finite-difference gradient check
    /// is only valid when this margin is much larger than the probe step;
    /// checks should assert that before trusting their result.
    pub fn selu_kink_margin(&self, x: &Tensor<T>) -> Result<T, NnError> {
        let mut margin = T::infinity();
        self.kink_walk(x, &mut margin)?;
        Ok(margin)
    }

    fn kink_walk(&self, x: &Tensor<T>, margin: &mut T) -> Result<Tensor<T>, NnError> {
        let mut cur = x.clone();
        for layer in &self.layers {
            if matches!(layer, LayerKind::Selu { .. }) {
                for v in cur.data() {
                    *margin = margin.min(v.abs());
                }
            }
            cur = if let LayerKind::Branches(branches) = layer {
                let mut cat = Vec::new();
                for (b, branch) in branches.iter().enumerate() {
                    let xb = branch_input(branches, &cur, b)?;
                    cat.extend_from_slice(branch.kink_walk(&xb, margin)?.data());
                }
                Tensor::from_vec(&[cat.len()], cat)?
            } else {
                layer.forward(&cur)?
            };
        }
        Ok(cur)
    }
}

fn cast_layer<T: Real, U: Real>(layer: &LayerKind<T>) -> LayerKind<U> {
    match layer {
        LayerKind::Conv1d { weight, bias } => {
            LayerKind::Conv1d { weight: weight.cast(), bias: bias.cast() }
        }
        LayerKind::Selu { alpha, lambda } => LayerKind::Selu {
            alpha: U::from_f64(alpha.into_f64()),
            lambda: U::from_f64(lambda.into_f64()),
        },
        LayerKind::TanhAct => LayerKind::TanhAct,
        LayerKind::Flatten => LayerKind::Flatten,
        LayerKind::Dense { weight, bias } => {
            LayerKind::Dense { weight: weight.cast(), bias: bias.cast() }
        }
        LayerKind::GlobalAvgPool => LayerKind::GlobalAvgPool,
        LayerKind::Branches(b) => LayerKind::Branches(b.iter().map(Network::cast).collect()),
    }
}

fn elementwise<T: Real>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = f(*v);
    }
    out
}

fn elementwise_zip<T: Real>(x: &Tensor<T>, g: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let mut out = x.clone();
    for (o, gv) in out.data_mut().iter_mut().zip(g.data()) {
        *o = f(*o, *gv);
    }
    out
}

fn selu_value<T: Real>(x: T, alpha: T, lambda: T) -> T {
    if x > T::zero() {
        lambda * x
    } else {
        lambda * alpha * (x.exp() - T::one())
    }
}

/// At exactly 0 this takes the left limit `lambda * alpha`.
fn selu_derivative<T: Real>(x: T, alpha: T, lambda: T) -> T {
    if x > T::zero() {
        lambda
    } else {
        lambda * alpha * x.exp()
    }
}

fn conv_shapes<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize), NnError> {
    if x.rank() != 2 || weight.rank() != 3 || bias.rank() != 1 {
        return Err(NnError::ShapeMismatch(format!(
            "conv1d wants x[C,L] w[O,I,K] b[O], got {:?} {:?} {:?}",
            x.dims(),
            weight.dims(),
            bias.dims()
        )));
    }
    let (c_in, len) = (x.dims()[0], x.dims()[1]);
    let (c_out, w_in, k) = (weight.dims()[0], weight.dims()[1], weight.dims()[2]);
    if w_in != c_in || bias.dims()[0] != c_out {
        return Err(NnError::ShapeMismatch(format!(
            "conv1d channel mismatch: x has {c_in}, weights want {w_in}"
        )));
    }
    if k == 0 || k > len {
        return Err(NnError::ShapeMismatch(format!(
            "kernel {k} does not fit input length {len}"
        )));
    }
    Ok((c_in, len, c_out, k, len - k + 1))
}

fn conv1d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, NnError> {
    let (c_in, _, c_out, k, out_len) = conv_shapes(x, weight, bias)?;
    let mut y = Tensor::zeros(&[c_out, out_len]);
    let w = weight.data();
    for o in 0..c_out {
        let yo = y.row_mut(o);
        yo.fill(bias.data()[o]);
        for i in 0..c_in {
            let xi = x.row(i);
            let wrow = &w[(o * c_in + i) * k..][..k];
            for (j, &wv) in wrow.iter().enumerate() {
                for (yv, &xv) in yo.iter_mut().zip(&xi[j..j + out_len]) {
                    *yv += wv * xv;
                }
            }
        }
    }
    Ok(y)
}

fn conv1d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    grad_weight: &mut Tensor<T>,
    grad_bias: &mut Tensor<T>,
) -> Result<Tensor<T>, NnError> {
    let (c_in, _, c_out, k, out_len) = conv_shapes(x, weight, grad_bias)?;
    if grad_out.dims() != [c_out, out_len] {
        return Err(NnError::ShapeMismatch(format!(
            "conv1d upstream grad {:?}, expected {:?}",
            grad_out.dims(),
            [c_out, out_len]
        )));
    }
    let mut gx = Tensor::zeros(x.dims());
    let w = weight.data();
    let gw = grad_weight.data_mut();
    for o in 0..c_out {
        let go = grad_out.row(o);
        grad_bias.data_mut()[o] += go.iter().copied().sum();
        for i in 0..c_in {
            let xi = x.row(i);
            let gxi = gx.row_mut(i);
            let wrow = &w[(o * c_in + i) * k..][..k];
            let gwrow = &mut gw[(o * c_in + i) * k..][..k];
            for j in 0..k {
                let mut dot = T::zero();
                for (&gv, &xv) in go.iter().zip(&xi[j..j + out_len]) {
                    dot += gv * xv;
                }
                gwrow[j] += dot;
                let wv = wrow[j];
                for (gxv, &gv) in gxi[j..j + out_len].iter_mut().zip(go) {
                    *gxv += wv * gv;
                }
            }
        }
    }
    Ok(gx)
}

fn dense_shapes<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize), NnError> {
    if x.rank() != 1 || weight.rank() != 2 || bias.rank() != 1 {
        return Err(NnError::ShapeMismatch(format!(
            "dense wants x[n] w[m,n] b[m], got {:?} {:?} {:?}",
            x.dims(),
            weight.dims(),
            bias.dims()
        )));
    }
    let (m, n) = (weight.dims()[0], weight.dims()[1]);
    if x.dims()[0] != n || bias.dims()[0] != m {
        return Err(NnError::ShapeMismatch(format!(
            "dense {m}x{n} applied to input of {}",
            x.dims()[0]
        )));
    }
    Ok((m, n))
}

fn dense_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, NnError> {
    let (m, _) = dense_shapes(x, weight, bias)?;
    let mut y = Tensor::zeros(&[m]);
    for o in 0..m {
        let mut acc = T::zero();
        for (&wv, &xv) in weight.row(o).iter().zip(x.data()) {
            acc += wv * xv;
        }
        y.data_mut()[o] = acc + bias.data()[o];
    }
    Ok(y)
}

fn dense_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    grad_weight: &mut Tensor<T>,
    grad_bias: &mut Tensor<T>,
) -> Result<Tensor<T>, NnError> {
    let (m, n) = dense_shapes(x, weight, grad_bias)?;
    if grad_out.dims() != [m] {
        return Err(NnError::ShapeMismatch(format!(
            "dense upstream grad {:?}, expected [{m}]",
            grad_out.dims()
        )));
    }
    let mut gx = Tensor::zeros(&[n]);
    for o in 0..m {
        let g = grad_out.data()[o];
        grad_bias.data_mut()[o] += g;
        for (gwv, &xv) in grad_weight.row_mut(o).iter_mut().zip(x.data()) {
            *gwv += g * xv;
        }
        for (gxv, &wv) in gx.data_mut().iter_mut().zip(weight.row(o)) {
            *gxv += g * wv;
        }
    }
    Ok(gx)
}

fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    if x.rank() != 2 {
        return Err(NnError::ShapeMismatch(format!("pool wants x[C,L], got {:?}", x.dims())));
    }
    let (c, l) = (x.dims()[0], x.dims()[1]);
    if l == 0 {
        return Err(NnError::EmptyAxis);
    }
    let inv = T::one() / T::from_f64(l as f64);
    let mut y = Tensor::zeros(&[c]);
    for ch in 0..c {
        y.data_mut()[ch] = x.row(ch).iter().copied().sum::<T>() * inv;
    }
    Ok(y)
}

fn global_avg_pool_backward<T: Real>(
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>, NnError> {
    let (c, l) = (x.dims()[0], x.dims()[1]);
    if grad_out.dims() != [c] {
        return Err(NnError::ShapeMismatch(format!(
            "pool upstream grad {:?}, expected [{c}]",
            grad_out.dims()
        )));
    }
    let inv = T::one() / T::from_f64(l as f64);
    let mut gx = Tensor::zeros(&[c, l]);
    for ch in 0..c {
        let g = grad_out.data()[ch] * inv;
        gx.row_mut(ch).fill(g);
    }
    Ok(gx)
}

fn branch_input<T: Real>(
    branches: &[Network<T>],
    x: &Tensor<T>,
    b: usize,
) -> Result<Tensor<T>, NnError> {
    if x.rank() != 2 || branches.is_empty() || x.dims()[0] % branches.len() != 0 {
        return Err(NnError::ShapeMismatch(format!(
            "{} branches cannot split input {:?} evenly",
            branches.len(),
            x.dims()
        )));
    }
    let per = x.dims()[0] / branches.len();
    let l = x.dims()[1];
    let mut data = Vec::with_capacity(per * l);
    for c in b * per..(b + 1) * per {
        data.extend_from_slice(x.row(c));
    }
    Tensor::from_vec(&[per, l], data)
}

fn branches_forward<T: Real>(branches: &[Network<T>], x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let mut out = Vec::new();
    for (b, net) in branches.iter().enumerate() {
        let y = net.forward(&branch_input(branches, x, b)?)?;
        if y.rank() != 1 {
            return Err(NnError::ShapeMismatch(format!(
                "branch {b} must end rank-1 for concatenation, got {:?}",
                y.dims()
            )));
        }
        out.extend_from_slice(y.data());
    }
    Tensor::from_vec(&[out.len()], out)
}

/// Branch activations are not kept by the outer trace; each branch reruns its
/// own forward here to rebuild them.
fn branches_backward<T: Real>(
    branches: &[Network<T>],
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
    grads: &mut [Network<T>],
) -> Result<Tensor<T>, NnError> {
    if grads.len() != branches.len() {
        return Err(NnError::ShapeMismatch("branch gradient mirror count".into()));
    }
    let per = x.dims()[0] / branches.len();
    let mut gx = Tensor::zeros(x.dims());
    let mut off = 0;
    for (b, net) in branches.iter().enumerate() {
        let xb = branch_input(branches, x, b)?;
        let trace = net.trace(&xb)?;
        let width = trace.last().unwrap().numel();
        if off + width > grad_out.numel() {
            return Err(NnError::ShapeMismatch("upstream grad shorter than concat".into()));
        }
        let gb = Tensor::from_vec(&[width], grad_out.data()[off..off + width].to_vec())?;
        let gxb = net.backward(&trace, &gb, &mut grads[b])?;
        for c in 0..per {
            gx.row_mut(b * per + c).copy_from_slice(gxb.row(c));
        }
        off += width;
    }
    if off != grad_out.numel() {
        return Err(NnError::ShapeMismatch("upstream grad longer than concat".into()));
    }
    Ok(gx)
}
