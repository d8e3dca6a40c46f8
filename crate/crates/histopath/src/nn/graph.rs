//! A small static-graph reverse-mode differentiation engine.
//!
//! Graphs are built once (topology plus parameter tensors), then run with
//! [`Graph::forward`], which returns the full list of node activations, and
//! differentiated with [`Graph::backward`], which replays the nodes in
//! reverse and returns a gradient for every parameter (and for the input).
//! Everything is single-threaded with a fixed reduction order, so results
//! are bit-reproducible run to run on one platform.
//!
//! Supported operations: 3x3 and 1x1 convolutions (stride 1, zero
//! same-padding), ReLU, sigmoid, 2x2 max/average pooling with stride 2
//! (odd trailing rows/columns are dropped), nearest-neighbour 2x upsampling,
//! channel concatenation, dense layers on flat features, and average
//! spatial pyramid pooling ([`GraphBuilder::spp`]), which turns a feature
//! map of any spatial size into a fixed-length vector.

use num_traits::Float;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::rng::Rng;

/// One operation in the graph. Parameter-bearing ops store indices into
/// [`Graph::params`].
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Placeholder for the single graph input (always node 0).
    Input,
    /// k x k convolution, stride 1, zero same-padding (k is 1 or 3).
    Conv { k: usize, w: usize, b: usize },
    Relu,
    Sigmoid,
    MaxPool2,
    AvgPool2,
    Upsample2,
    /// Channel-wise concatenation of two or more maps.
    Concat,
    Dense { w: usize, b: usize },
    /// Average spatial pyramid pooling over grids 1x1 .. LxL.
    Spp { levels: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<usize>,
}

/// A parameter tensor plus the fan-in used for scaled initialization.
/// Biases carry `fan_in: None` and initialize to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T = f32> {
    pub tensor: Tensor<T>,
    pub fan_in: Option<usize>,
}

/// Static channel/feature bookkeeping the builder tracks per node.
#[derive(Clone, Copy, Debug, PartialEq)]
enum ChanInfo {
    Map(usize),
    Flat(usize),
}

/// An immutable computation graph with owned parameters.
#[derive(Clone, Debug)]
pub struct Graph<T = f32> {
    nodes: Vec<Node>,
    params: Vec<Param<T>>,
    chan: Vec<ChanInfo>,
    output: usize,
}

/// Incremental graph construction; node methods return node ids that later
/// ops take as inputs. Channel chaining is validated at build time.
pub struct GraphBuilder<T = f32> {
    nodes: Vec<Node>,
    params: Vec<Param<T>>,
    chan: Vec<ChanInfo>,
}

impl<T: Float> GraphBuilder<T> {
    pub fn new(in_channels: usize) -> Result<Self> {
        if in_channels == 0 {
            return Err(Error::validation("graph input needs at least one channel"));
        }
        Ok(GraphBuilder {
            nodes: vec![Node {
                op: Op::Input,
                inputs: vec![],
            }],
            params: Vec::new(),
            chan: vec![ChanInfo::Map(in_channels)],
        })
    }

    fn node_map_channels(&self, id: usize) -> Result<usize> {
        match self.chan.get(id) {
            Some(ChanInfo::Map(c)) => Ok(*c),
            Some(ChanInfo::Flat(_)) => Err(Error::shape(format!(
                "node {id} is a flat feature vector, expected a feature map"
            ))),
            None => Err(Error::validation(format!("unknown node id {id}"))),
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, chan: ChanInfo) -> usize {
        self.nodes.push(Node { op, inputs });
        self.chan.push(chan);
        self.nodes.len() - 1
    }

    fn conv(&mut self, x: usize, out_channels: usize, k: usize) -> Result<usize> {
        let in_channels = self.node_map_channels(x)?;
        if out_channels == 0 {
            return Err(Error::validation("convolution needs at least one output channel"));
        }
        let w = Tensor::zeros(&[out_channels, in_channels, k, k])?;
        let b = Tensor::zeros(&[1, out_channels])?;
        let fan_in = in_channels * k * k;
        self.params.push(Param {
            tensor: w,
            fan_in: Some(fan_in),
        });
        self.params.push(Param {
            tensor: b,
            fan_in: None,
        });
        let (wi, bi) = (self.params.len() - 2, self.params.len() - 1);
        Ok(self.push(Op::Conv { k, w: wi, b: bi }, vec![x], ChanInfo::Map(out_channels)))
    }

    pub fn conv3(&mut self, x: usize, out_channels: usize) -> Result<usize> {
        self.conv(x, out_channels, 3)
    }

    pub fn conv1(&mut self, x: usize, out_channels: usize) -> Result<usize> {
        self.conv(x, out_channels, 1)
    }

    pub fn relu(&mut self, x: usize) -> Result<usize> {
        let chan = *self
            .chan
            .get(x)
            .ok_or_else(|| Error::validation(format!("unknown node id {x}")))?;
        Ok(self.push(Op::Relu, vec![x], chan))
    }

    pub fn sigmoid(&mut self, x: usize) -> Result<usize> {
        let chan = *self
            .chan
            .get(x)
            .ok_or_else(|| Error::validation(format!("unknown node id {x}")))?;
        Ok(self.push(Op::Sigmoid, vec![x], chan))
    }

    pub fn maxpool2(&mut self, x: usize) -> Result<usize> {
        let c = self.node_map_channels(x)?;
        Ok(self.push(Op::MaxPool2, vec![x], ChanInfo::Map(c)))
    }

    pub fn avgpool2(&mut self, x: usize) -> Result<usize> {
        let c = self.node_map_channels(x)?;
        Ok(self.push(Op::AvgPool2, vec![x], ChanInfo::Map(c)))
    }

    pub fn upsample2(&mut self, x: usize) -> Result<usize> {
        let c = self.node_map_channels(x)?;
        Ok(self.push(Op::Upsample2, vec![x], ChanInfo::Map(c)))
    }

    pub fn concat(&mut self, xs: &[usize]) -> Result<usize> {
        if xs.len() < 2 {
            return Err(Error::validation("concat needs at least two inputs"));
        }
        let mut total = 0;
        for &x in xs {
            total += self.node_map_channels(x)?;
        }
        Ok(self.push(Op::Concat, xs.to_vec(), ChanInfo::Map(total)))
    }

    pub fn dense(&mut self, x: usize, out_features: usize) -> Result<usize> {
        let in_features = match self.chan.get(x) {
            Some(ChanInfo::Flat(f)) => *f,
            Some(ChanInfo::Map(_)) => {
                return Err(Error::shape(format!(
                    "node {x} is a feature map; dense layers take flat features (pool first)"
                )))
            }
            None => return Err(Error::validation(format!("unknown node id {x}"))),
        };
        if out_features == 0 {
            return Err(Error::validation("dense layer needs at least one output feature"));
        }
        let w = Tensor::zeros(&[out_features, in_features])?;
        let b = Tensor::zeros(&[1, out_features])?;
        self.params.push(Param {
            tensor: w,
            fan_in: Some(in_features),
        });
        self.params.push(Param {
            tensor: b,
            fan_in: None,
        });
        let (wi, bi) = (self.params.len() - 2, self.params.len() - 1);
        Ok(self.push(Op::Dense { w: wi, b: bi }, vec![x], ChanInfo::Flat(out_features)))
    }

    pub fn spp(&mut self, x: usize, levels: usize) -> Result<usize> {
        if levels == 0 {
            return Err(Error::validation("spatial pyramid pooling needs at least one level"));
        }
        let c = self.node_map_channels(x)?;
        let cells: usize = (1..=levels).map(|l| l * l).sum();
        Ok(self.push(Op::Spp { levels }, vec![x], ChanInfo::Flat(c * cells)))
    }

    pub fn finish(self, output: usize) -> Result<Graph<T>> {
        if output >= self.nodes.len() {
            return Err(Error::validation(format!("output node id {output} out of range")));
        }
        Ok(Graph {
            nodes: self.nodes,
            params: self.params,
            chan: self.chan,
            output,
        })
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients<T = f32> {
    /// One flat gradient per parameter, aligned with [`Graph::params`].
    pub params: Vec<Vec<T>>,
    /// Gradient with respect to the graph input.
    pub input: Vec<T>,
}

impl<T: Float> Graph<T> {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn output_id(&self) -> usize {
        self.output
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    /// Number of input channels the graph expects.
    pub fn in_channels(&self) -> usize {
        match self.chan[0] {
            ChanInfo::Map(c) => c,
            ChanInfo::Flat(f) => f,
        }
    }

    /// Channel (or flat feature) count of the output node.
    pub fn out_channels(&self) -> usize {
        match self.chan[self.output] {
            ChanInfo::Map(c) => c,
            ChanInfo::Flat(f) => f,
        }
    }

    /// True if the output node is a feature map rather than a flat vector.
    pub fn output_is_map(&self) -> bool {
        matches!(self.chan[self.output], ChanInfo::Map(_))
    }

    /// True if the final operation is a sigmoid, i.e. the network emits
    /// probabilities rather than logits.
    pub fn ends_with_sigmoid(&self) -> bool {
        matches!(self.nodes[self.output].op, Op::Sigmoid)
    }

    /// Total number of learnable scalars.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// All parameters concatenated in declaration order.
    pub fn flat_weights(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in &self.params {
            out.extend_from_slice(p.tensor.values());
        }
        out
    }

    pub fn set_flat_weights(&mut self, weights: &[T]) -> Result<()> {
        if weights.len() != self.param_count() {
            return Err(Error::validation(format!(
                "weight vector has {} values, model needs {}",
                weights.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.tensor.len();
            p.tensor.values_mut().copy_from_slice(&weights[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Scaled-uniform initialization: weights are drawn from
    /// U(-sqrt(6/fan_in), sqrt(6/fan_in)), biases stay zero. Values are
    /// drawn in declaration order so a fixed seed fixes the model.
    pub fn init_weights(&mut self, rng: &mut Rng) {
        for p in &mut self.params {
            if let Some(fan_in) = p.fan_in {
                let bound = (6.0 / fan_in as f64).sqrt();
                for v in p.tensor.values_mut() {
                    *v = T::from(rng.range_f64(-bound, bound)).expect("cast");
                }
            }
        }
    }

    /// Exact cast of the whole graph to another float width.
    pub fn cast<U: Float>(&self) -> Graph<U> {
        Graph {
            nodes: self.nodes.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    tensor: p.tensor.cast::<U>(),
                    fan_in: p.fan_in,
                })
                .collect(),
            chan: self.chan.clone(),
            output: self.output,
        }
    }

    /// Run the graph on `input` and return every node's activation
    /// (index 0 is the input itself, `output_id()` is the result).
    pub fn forward(&self, input: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (_, c, _, _) = input.dims4()?;
        let want = self.in_channels();
        if c != want {
            return Err(Error::shape(format!(
                "graph expects {want} input channels, got {c}"
            )));
        }
        let mut acts: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let out = match node.op {
                Op::Input => input.clone(),
                Op::Conv { k, w, b } => conv_forward(
                    &acts[node.inputs[0]],
                    &self.params[w].tensor,
                    &self.params[b].tensor,
                    k,
                )?,
                Op::Relu => relu_forward(&acts[node.inputs[0]]),
                Op::Sigmoid => sigmoid_forward(&acts[node.inputs[0]]),
                Op::MaxPool2 => pool2_forward(&acts[node.inputs[0]], true)?,
                Op::AvgPool2 => pool2_forward(&acts[node.inputs[0]], false)?,
                Op::Upsample2 => upsample2_forward(&acts[node.inputs[0]])?,
                Op::Concat => concat_forward(&node.inputs, &acts)?,
                Op::Dense { w, b } => dense_forward(
                    &acts[node.inputs[0]],
                    &self.params[w].tensor,
                    &self.params[b].tensor,
                )?,
                Op::Spp { levels } => spp_forward(&acts[node.inputs[0]], levels)?,
            };
            acts.push(out);
        }
        Ok(acts)
    }

    /// Reverse pass. `acts` must come from a `forward` call on this graph;
    /// `out_grad` is d(loss)/d(output) with the output's shape.
    pub fn backward(&self, acts: &[Tensor<T>], out_grad: &Tensor<T>) -> Result<Gradients<T>> {
        if acts.len() != self.nodes.len() {
            return Err(Error::shape(format!(
                "activation list has {} entries, graph has {} nodes",
                acts.len(),
                self.nodes.len()
            )));
        }
        if out_grad.shape() != acts[self.output].shape() {
            return Err(Error::shape(format!(
                "output gradient shape {:?} does not match output shape {:?}",
                out_grad.shape(),
                acts[self.output].shape()
            )));
        }
        let mut node_grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        node_grads[self.output] = Some(out_grad.values().to_vec());
        let mut param_grads: Vec<Vec<T>> = self
            .params
            .iter()
            .map(|p| vec![T::zero(); p.tensor.len()])
            .collect();

        for id in (0..self.nodes.len()).rev() {
            let g = match node_grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            match node.op {
                Op::Input => {
                    // Reached the graph input; stash the gradient back so the
                    // caller can read it below.
                    node_grads[id] = Some(g);
                }
                Op::Conv { k, w, b } => {
                    let x = &acts[node.inputs[0]];
                    let (dx, dw, db) = conv_backward(x, &self.params[w].tensor, k, &acts[id], &g)?;
                    accumulate(&mut node_grads[node.inputs[0]], dx);
                    add_into(&mut param_grads[w], &dw);
                    add_into(&mut param_grads[b], &db);
                }
                Op::Relu => {
                    let x = &acts[node.inputs[0]];
                    let dx = x
                        .values()
                        .iter()
                        .zip(&g)
                        .map(|(v, gi)| if *v > T::zero() { *gi } else { T::zero() })
                        .collect();
                    accumulate(&mut node_grads[node.inputs[0]], dx);
                }
                Op::Sigmoid => {
                    let y = &acts[id];
                    let dx = y
                        .values()
                        .iter()
                        .zip(&g)
                        .map(|(v, gi)| *gi * *v * (T::one() - *v))
                        .collect();
                    accumulate(&mut node_grads[node.inputs[0]], dx);
                }
                Op::MaxPool2 => {
                    let dx = maxpool2_backward(&acts[node.inputs[0]], &acts[id], &g)?;
                    accumulate(&mut node_grads[node.inputs[0]], dx);
                }
                Op::AvgPool2 => {
                    let dx = avgpool2_backward(&acts[node.inputs[0]], &acts[id], &g)?;
                    accumulate(&mut node_grads[node.inputs[0]], dx);
                }
                Op::Upsample2 => {
                    let dx = upsample2_backward(&acts[node.inputs[0]], &acts[id], &g)?;
                    accumulate(&mut node_grads[node.inputs[0]], dx);
                }
                Op::Concat => {
                    let gt = &acts[id];
                    let (n, _, h, w) = gt.dims4()?;
                    let mut c_off = 0;
                    for &src in &node.inputs {
                        let (_, ci, _, _) = acts[src].dims4()?;
                        let mut dx = vec![T::zero(); acts[src].len()];
                        for ni in 0..n {
                            for c in 0..ci {
                                for y in 0..h {
                                    let src_base = ((ni * ci + c) * h + y) * w;
                                    let dst_base = gt.idx4(ni, c_off + c, y, 0);
                                    dx[src_base..src_base + w]
                                        .copy_from_slice(&g[dst_base..dst_base + w]);
                                }
                            }
                        }
                        accumulate(&mut node_grads[src], dx);
                        c_off += ci;
                    }
                }
                Op::Dense { w, b } => {
                    let x = &acts[node.inputs[0]];
                    let (dx, dw, db) = dense_backward(x, &self.params[w].tensor, &g)?;
                    accumulate(&mut node_grads[node.inputs[0]], dx);
                    add_into(&mut param_grads[w], &dw);
                    add_into(&mut param_grads[b], &db);
                }
                Op::Spp { levels } => {
                    let dx = spp_backward(&acts[node.inputs[0]], levels, &g)?;
                    accumulate(&mut node_grads[node.inputs[0]], dx);
                }
            }
        }
        let input = node_grads[0]
            .take()
            .unwrap_or_else(|| vec![T::zero(); acts[0].len()]);
        Ok(Gradients {
            params: param_grads,
            input,
        })
    }

    /// Convenience: forward and return only the output activation.
    pub fn run(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let acts = self.forward(input)?;
        Ok(acts[self.output].clone())
    }
}

fn accumulate<T: Float>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
    match slot {
        Some(g) => {
            for (a, d) in g.iter_mut().zip(delta) {
                *a = *a + d;
            }
        }
        None => *slot = Some(delta),
    }
}

fn add_into<T: Float>(acc: &mut [T], delta: &[T]) {
    for (a, d) in acc.iter_mut().zip(delta) {
        *a = *a + *d;
    }
}

fn conv_forward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    k: usize,
) -> Result<Tensor<T>> {
    let (n, ic, h, wd) = x.dims4()?;
    let (oc, wic, _, _) = w.dims4()?;
    if wic != ic {
        return Err(Error::shape(format!(
            "convolution weights expect {wic} input channels, map has {ic}"
        )));
    }
    let pad = (k / 2) as isize;
    let mut out = Tensor::zeros(&[n, oc, h, wd])?;
    for ni in 0..n {
        for o in 0..oc {
            let bias = b.values()[o];
            for y in 0..h {
                for xq in 0..wd {
                    let mut acc = bias;
                    for i in 0..ic {
                        for dy in 0..k {
                            let iy = y as isize + dy as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for dx in 0..k {
                                let ix = xq as isize + dx as isize - pad;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc = acc
                                    + w.at4(o, i, dy, dx) * x.at4(ni, i, iy as usize, ix as usize);
                            }
                        }
                    }
                    let idx = out.idx4(ni, o, y, xq);
                    out.values_mut()[idx] = acc;
                }
            }
        }
    }
    Ok(out)
}

#[allow(clippy::type_complexity)]
fn conv_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    k: usize,
    out: &Tensor<T>,
    g: &[T],
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (n, ic, h, wd) = x.dims4()?;
    let (oc, _, _, _) = w.dims4()?;
    let pad = (k / 2) as isize;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); oc];
    for ni in 0..n {
        for o in 0..oc {
            for y in 0..h {
                for xq in 0..wd {
                    let go = g[out.idx4(ni, o, y, xq)];
                    if go == T::zero() {
                        continue;
                    }
                    db[o] = db[o] + go;
                    for i in 0..ic {
                        for dy in 0..k {
                            let iy = y as isize + dy as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for dxk in 0..k {
                                let ix = xq as isize + dxk as isize - pad;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xi = x.idx4(ni, i, iy as usize, ix as usize);
                                let wi = w.idx4(o, i, dy, dxk);
                                dw[wi] = dw[wi] + go * x.values()[xi];
                                dx[xi] = dx[xi] + go * w.values()[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dw, db))
}

fn relu_forward<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    out.clear_grad();
    for v in out.values_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    out
}

fn sigmoid_forward<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    out.clear_grad();
    for v in out.values_mut() {
        *v = T::one() / (T::one() + (-*v).exp());
    }
    out
}

/// Shared 2x2/stride-2 pooling; `max` selects max pooling (first maximum in
/// row-major window order wins ties), otherwise the window mean is taken.
/// Odd trailing rows/columns are dropped, matching the usual floor rule.
fn pool2_forward<T: Float>(x: &Tensor<T>, max: bool) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if h < 2 || w < 2 {
        return Err(Error::shape(format!(
            "2x2 pooling needs spatial dims of at least 2, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from(0.25).expect("cast");
    let mut out = Tensor::zeros(&[n, c, oh, ow])?;
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..oh {
                for xq in 0..ow {
                    let v = if max {
                        let mut best = x.at4(ni, ci, 2 * y, 2 * xq);
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let cand = x.at4(ni, ci, 2 * y + dy, 2 * xq + dx);
                            if cand > best {
                                best = cand;
                            }
                        }
                        best
                    } else {
                        let mut s = T::zero();
                        for dy in 0..2 {
                            for dx in 0..2 {
                                s = s + x.at4(ni, ci, 2 * y + dy, 2 * xq + dx);
                            }
                        }
                        s * quarter
                    };
                    let idx = out.idx4(ni, ci, y, xq);
                    out.values_mut()[idx] = v;
                }
            }
        }
    }
    Ok(out)
}

fn maxpool2_backward<T: Float>(x: &Tensor<T>, out: &Tensor<T>, g: &[T]) -> Result<Vec<T>> {
    let (n, c, _, _) = x.dims4()?;
    let (_, _, oh, ow) = out.dims4()?;
    let mut dx = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..oh {
                for xq in 0..ow {
                    // Recompute the argmax with the same first-wins scan as
                    // the forward pass.
                    let (mut by, mut bx) = (2 * y, 2 * xq);
                    let mut best = x.at4(ni, ci, by, bx);
                    for (dy, dxk) in [(0, 1), (1, 0), (1, 1)] {
                        let cand = x.at4(ni, ci, 2 * y + dy, 2 * xq + dxk);
                        if cand > best {
                            best = cand;
                            by = 2 * y + dy;
                            bx = 2 * xq + dxk;
                        }
                    }
                    let xi = x.idx4(ni, ci, by, bx);
                    dx[xi] = dx[xi] + g[out.idx4(ni, ci, y, xq)];
                }
            }
        }
    }
    Ok(dx)
}

fn avgpool2_backward<T: Float>(x: &Tensor<T>, out: &Tensor<T>, g: &[T]) -> Result<Vec<T>> {
    let (n, c, _, _) = x.dims4()?;
    let (_, _, oh, ow) = out.dims4()?;
    let quarter = T::from(0.25).expect("cast");
    let mut dx = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..oh {
                for xq in 0..ow {
                    let go = g[out.idx4(ni, ci, y, xq)] * quarter;
                    for dy in 0..2 {
                        for dxk in 0..2 {
                            let xi = x.idx4(ni, ci, 2 * y + dy, 2 * xq + dxk);
                            dx[xi] = dx[xi] + go;
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

fn upsample2_forward<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w])?;
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..2 * h {
                for xq in 0..2 * w {
                    let v = x.at4(ni, ci, y / 2, xq / 2);
                    let idx = out.idx4(ni, ci, y, xq);
                    out.values_mut()[idx] = v;
                }
            }
        }
    }
    Ok(out)
}

fn upsample2_backward<T: Float>(x: &Tensor<T>, out: &Tensor<T>, g: &[T]) -> Result<Vec<T>> {
    let (n, c, h, w) = x.dims4()?;
    let mut dx = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..2 * h {
                for xq in 0..2 * w {
                    let xi = x.idx4(ni, ci, y / 2, xq / 2);
                    dx[xi] = dx[xi] + g[out.idx4(ni, ci, y, xq)];
                }
            }
        }
    }
    Ok(dx)
}

fn concat_forward<T: Float>(inputs: &[usize], acts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let (n, _, h, w) = acts[inputs[0]].dims4()?;
    let mut total_c = 0;
    for &src in inputs {
        let (ns, cs, hs, ws) = acts[src].dims4()?;
        if (ns, hs, ws) != (n, h, w) {
            return Err(Error::shape(format!(
                "concat inputs disagree: {:?} vs {:?}",
                acts[inputs[0]].shape(),
                acts[src].shape()
            )));
        }
        total_c += cs;
    }
    let mut out = Tensor::zeros(&[n, total_c, h, w])?;
    let mut c_off = 0;
    for &src in inputs {
        let (_, cs, _, _) = acts[src].dims4()?;
        for ni in 0..n {
            for c in 0..cs {
                for y in 0..h {
                    let src_base = acts[src].idx4(ni, c, y, 0);
                    let dst_base = out.idx4(ni, c_off + c, y, 0);
                    let row = &acts[src].values()[src_base..src_base + w];
                    out.values_mut()[dst_base..dst_base + w].copy_from_slice(row);
                }
            }
        }
        c_off += cs;
    }
    Ok(out)
}

fn dense_forward<T: Float>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, fi) = x.dims2()?;
    let (fo, wfi) = w.dims2()?;
    if wfi != fi {
        return Err(Error::shape(format!(
            "dense weights expect {wfi} input features, got {fi}"
        )));
    }
    let mut out = Tensor::zeros(&[n, fo])?;
    for ni in 0..n {
        for o in 0..fo {
            let mut acc = b.values()[o];
            for f in 0..fi {
                acc = acc + w.values()[o * fi + f] * x.values()[ni * fi + f];
            }
            out.values_mut()[ni * fo + o] = acc;
        }
    }
    Ok(out)
}

#[allow(clippy::type_complexity)]
fn dense_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &[T],
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (n, fi) = x.dims2()?;
    let (fo, _) = w.dims2()?;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); fo];
    for ni in 0..n {
        for o in 0..fo {
            let go = g[ni * fo + o];
            if go == T::zero() {
                continue;
            }
            db[o] = db[o] + go;
            for f in 0..fi {
                dw[o * fi + f] = dw[o * fi + f] + go * x.values()[ni * fi + f];
                dx[ni * fi + f] = dx[ni * fi + f] + go * w.values()[o * fi + f];
            }
        }
    }
    Ok((dx, dw, db))
}

/// Cell boundaries for an l-way near-equal split of extent `n`
/// (floor(i*n/l) for i = 0..=l), so cells differ in size by at most one.
fn grid_edges(n: usize, l: usize) -> Vec<usize> {
    (0..=l).map(|i| i * n / l).collect()
}

fn spp_forward<T: Float>(x: &Tensor<T>, levels: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if h < levels || w < levels {
        return Err(Error::shape(format!(
            "spatial pyramid pooling with {levels} levels needs at least {levels}x{levels} input, got {h}x{w}"
        )));
    }
    let cells: usize = (1..=levels).map(|l| l * l).sum();
    let mut out = Tensor::zeros(&[n, c * cells])?;
    for ni in 0..n {
        let mut f = 0;
        for l in 1..=levels {
            let ys = grid_edges(h, l);
            let xs = grid_edges(w, l);
            for ci in 0..c {
                for gy in 0..l {
                    for gx in 0..l {
                        let mut s = T::zero();
                        for y in ys[gy]..ys[gy + 1] {
                            for xq in xs[gx]..xs[gx + 1] {
                                s = s + x.at4(ni, ci, y, xq);
                            }
                        }
                        let area = (ys[gy + 1] - ys[gy]) * (xs[gx + 1] - xs[gx]);
                        out.values_mut()[ni * c * cells + f] =
                            s / T::from(area).expect("cast");
                        f += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn spp_backward<T: Float>(x: &Tensor<T>, levels: usize, g: &[T]) -> Result<Vec<T>> {
    let (n, c, h, w) = x.dims4()?;
    let cells: usize = (1..=levels).map(|l| l * l).sum();
    let mut dx = vec![T::zero(); x.len()];
    for ni in 0..n {
        let mut f = 0;
        for l in 1..=levels {
            let ys = grid_edges(h, l);
            let xs = grid_edges(w, l);
            for ci in 0..c {
                for gy in 0..l {
                    for gx in 0..l {
                        let area = (ys[gy + 1] - ys[gy]) * (xs[gx + 1] - xs[gx]);
                        let go = g[ni * c * cells + f] / T::from(area).expect("cast");
                        for y in ys[gy]..ys[gy + 1] {
                            for xq in xs[gx]..xs[gx + 1] {
                                let xi = x.idx4(ni, ci, y, xq);
                                dx[xi] = dx[xi] + go;
                            }
                        }
                        f += 1;
                    }
                }
            }
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(shape: &[usize], values: Vec<f32>) -> Tensor<f32> {
        Tensor::from_vec(shape, values).unwrap()
    }

    /// A 3x3 convolution whose kernel is 1 at the centre reproduces the
    /// input exactly, including at the borders (zero same-padding).
    #[test]
    fn identity_kernel_passes_input_through() {
        let mut b = GraphBuilder::<f32>::new(1).unwrap();
        let y = b.conv3(0, 1).unwrap();
        let mut g = b.finish(y).unwrap();
        let mut w = vec![0.0f32; 9];
        w[4] = 1.0; // centre tap
        let mut flat = g.flat_weights();
        flat[..9].copy_from_slice(&w);
        g.set_flat_weights(&flat).unwrap();

        let x = map(&[1, 1, 4, 5], (0..20).map(|i| i as f32 * 0.37 - 3.0).collect());
        let out = g.run(&x).unwrap();
        assert_eq!(out.values(), x.values());
    }

    #[test]
    fn relu_forward_and_backward() {
        let mut b = GraphBuilder::<f32>::new(1).unwrap();
        let y = b.relu(0).unwrap();
        let g = b.finish(y).unwrap();
        let x = map(&[1, 1, 1, 2], vec![-1.0, 2.0]);
        let acts = g.forward(&x).unwrap();
        assert_eq!(acts[g.output_id()].values(), &[0.0, 2.0]);
        let out_grad = map(&[1, 1, 1, 2], vec![1.0, 1.0]);
        let grads = g.backward(&acts, &out_grad).unwrap();
        assert_eq!(grads.input, vec![0.0, 1.0]);
    }

    #[test]
    fn maxpool_ties_go_to_first_in_scan_order() {
        let mut b = GraphBuilder::<f32>::new(1).unwrap();
        let y = b.maxpool2(0).unwrap();
        let g = b.finish(y).unwrap();
        let x = map(&[1, 1, 2, 2], vec![5.0, 5.0, 3.0, 1.0]);
        let acts = g.forward(&x).unwrap();
        assert_eq!(acts[g.output_id()].values(), &[5.0]);
        let grads = g
            .backward(&acts, &map(&[1, 1, 1, 1], vec![1.0]))
            .unwrap();
        assert_eq!(grads.input, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pooling_drops_odd_trailing_row_and_column() {
        let mut b = GraphBuilder::<f32>::new(1).unwrap();
        let y = b.avgpool2(0).unwrap();
        let g = b.finish(y).unwrap();
        let x = map(&[1, 1, 3, 3], vec![1.0, 2.0, 9.0, 3.0, 4.0, 9.0, 9.0, 9.0, 9.0]);
        let out = g.run(&x).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.values(), &[2.5]); // mean of the top-left 2x2 only
    }

    #[test]
    fn pooling_rejects_single_pixel_maps() {
        let mut b = GraphBuilder::<f32>::new(1).unwrap();
        let y = b.maxpool2(0).unwrap();
        let g = b.finish(y).unwrap();
        let err = g.run(&map(&[1, 1, 1, 4], vec![0.0; 4])).unwrap_err();
        assert!(err.to_string().contains("pooling"));
    }

    #[test]
    fn upsample_is_nearest_neighbour() {
        let mut b = GraphBuilder::<f32>::new(1).unwrap();
        let y = b.upsample2(0).unwrap();
        let g = b.finish(y).unwrap();
        let x = map(&[1, 1, 1, 2], vec![1.0, 2.0]);
        let out = g.run(&x).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 4]);
        assert_eq!(out.values(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        // Backward sums the four copies of each source pixel.
        let acts = g.forward(&x).unwrap();
        let grads = g
            .backward(&acts, &map(&[1, 1, 2, 4], vec![1.0; 8]))
            .unwrap();
        assert_eq!(grads.input, vec![4.0, 4.0]);
    }

    #[test]
    fn concat_stacks_channels_in_input_order() {
        let mut b = GraphBuilder::<f32>::new(1).unwrap();
        let r = b.relu(0).unwrap();
        let s = b.sigmoid(0).unwrap();
        let y = b.concat(&[r, s]).unwrap();
        let g = b.finish(y).unwrap();
        let x = map(&[1, 1, 1, 1], vec![2.0]);
        let out = g.run(&x).unwrap();
        assert_eq!(out.shape(), &[1, 2, 1, 1]);
        assert_eq!(out.values()[0], 2.0);
        assert!((out.values()[1] - 1.0 / (1.0 + (-2.0f32).exp())).abs() < 1e-6);
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        // x feeds two branches that are summed via concat+conv1; the input
        // gradient must be the sum of both branch gradients.
        let mut b = GraphBuilder::<f32>::new(1).unwrap();
        let r1 = b.relu(0).unwrap();
        let r2 = b.relu(0).unwrap();
        let y = b.concat(&[r1, r2]).unwrap();
        let mut g = b.finish(y).unwrap();
        let _ = &mut g; // no params to set
        let x = map(&[1, 1, 1, 1], vec![3.0]);
        let acts = g.forward(&x).unwrap();
        let grads = g
            .backward(&acts, &map(&[1, 2, 1, 1], vec![1.0, 1.0]))
            .unwrap();
        assert_eq!(grads.input, vec![2.0]);
    }

    #[test]
    fn dense_computes_affine_map() {
        let mut b = GraphBuilder::<f32>::new(2).unwrap();
        let p = b.spp(0, 1).unwrap(); // global average -> 2 features
        let y = b.dense(p, 1).unwrap();
        let mut g = b.finish(y).unwrap();
        g.set_flat_weights(&[2.0, -1.0, 0.5]).unwrap(); // w = [2, -1], b = 0.5
        let x = map(&[1, 2, 1, 1], vec![3.0, 4.0]);
        let out = g.run(&x).unwrap();
        assert_eq!(out.values(), &[2.0 * 3.0 - 4.0 + 0.5]);
    }

    #[test]
    fn spp_level_one_is_global_average() {
        let mut b = GraphBuilder::<f32>::new(1).unwrap();
        let y = b.spp(0, 1).unwrap();
        let g = b.finish(y).unwrap();
        let x = map(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]);
        let out = g.run(&x).unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.values(), &[3.0]);
    }

    #[test]
    fn spp_feature_length_law() {
        // c channels, L levels -> c * sum(l^2) features, for any input size.
        for c in 1..=8usize {
            for levels in 1..=4usize {
                for (h, w) in [(4, 4), (7, 5), (32, 9)] {
                    let mut b = GraphBuilder::<f32>::new(c).unwrap();
                    let y = b.spp(0, levels).unwrap();
                    let g = b.finish(y).unwrap();
                    let x = Tensor::zeros(&[1, c, h, w]).unwrap();
                    let out = g.run(&x).unwrap();
                    let cells: usize = (1..=levels).map(|l| l * l).sum();
                    assert_eq!(out.shape(), &[1, c * cells]);
                }
            }
        }
        // The worked example: 3 channels, 3 levels -> 3*(1+4+9) = 42.
        let mut b = GraphBuilder::<f32>::new(3).unwrap();
        let y = b.spp(0, 3).unwrap();
        let g = b.finish(y).unwrap();
        let out = g.run(&Tensor::zeros(&[1, 3, 8, 8]).unwrap()).unwrap();
        assert_eq!(out.shape(), &[1, 42]);
    }

    #[test]
    fn spp_constant_input_gives_constant_features() {
        let mut b = GraphBuilder::<f32>::new(2).unwrap();
        let y = b.spp(0, 3).unwrap();
        let g = b.finish(y).unwrap();
        let x = map(&[1, 2, 7, 5], vec![0.625; 70]);
        let out = g.run(&x).unwrap();
        for v in out.values() {
            assert_eq!(*v, 0.625);
        }
    }

    #[test]
    fn spp_rejects_inputs_smaller_than_grid() {
        let mut b = GraphBuilder::<f32>::new(1).unwrap();
        let y = b.spp(0, 3).unwrap();
        let g = b.finish(y).unwrap();
        let err = g.run(&Tensor::zeros(&[1, 1, 2, 8]).unwrap()).unwrap_err();
        assert!(err.to_string().contains("at least 3x3"));
    }

    #[test]
    fn builder_rejects_channel_mismatches() {
        let mut b = GraphBuilder::<f32>::new(3).unwrap();
        let p = b.spp(0, 1).unwrap();
        // Dense on a map and conv on a flat vector are both rejected.
        assert!(b.dense(0, 4).is_err());
        assert!(b.conv3(p, 4).is_err());
        // Running a graph on the wrong channel count is rejected.
        let y = b.relu(0).unwrap();
        let g = b.finish(y).unwrap();
        let err = g.run(&Tensor::zeros(&[1, 2, 4, 4]).unwrap()).unwrap_err();
        assert!(err.to_string().contains("3 input channels"));
    }

    #[test]
    fn flat_weights_round_trip() {
        let mut b = GraphBuilder::<f32>::new(1).unwrap();
        let c = b.conv3(0, 2).unwrap();
        let r = b.relu(c).unwrap();
        let y = b.conv1(r, 1).unwrap();
        let mut g = b.finish(y).unwrap();
        let mut rng = Rng::new(7);
        g.init_weights(&mut rng);
        let w = g.flat_weights();
        assert_eq!(w.len(), g.param_count());
        assert_eq!(g.param_count(), 2 * 9 + 2 + 2 * 1 + 1);
        let mut g2 = g.clone();
        g2.set_flat_weights(&vec![0.0; w.len()]).unwrap();
        g2.set_flat_weights(&w).unwrap();
        assert_eq!(g2.flat_weights(), w);
        assert!(g2.set_flat_weights(&w[1..]).is_err());
    }

    #[test]
    fn init_weights_is_seed_deterministic_and_bounded() {
        let mut b = GraphBuilder::<f32>::new(2).unwrap();
        let c = b.conv3(0, 4).unwrap();
        let y = b.conv1(c, 1).unwrap();
        let mut g1 = b.finish(y).unwrap();
        let mut g2 = g1.clone();
        g1.init_weights(&mut Rng::new(11));
        g2.init_weights(&mut Rng::new(11));
        assert_eq!(g1.flat_weights(), g2.flat_weights());
        let bound = (6.0f32 / 18.0).sqrt();
        for v in g1.params()[0].tensor.values() {
            assert!(v.abs() <= bound);
        }
        // Biases stay zero.
        assert!(g1.params()[1].tensor.values().iter().all(|v| *v == 0.0));
    }
}
