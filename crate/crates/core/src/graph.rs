//! Static computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes; node inputs always point at
//! earlier nodes, so graphs are acyclic by construction and ascending node
//! order is a topological order. Forward evaluation is pure: the same feeds
//! produce bit-identical activations. Backward propagates adjoints in reverse
//! node order and accumulates gradients for parameters and fed inputs.
//!
//! Derivative conventions: `relu'(0) = 0`; the plain BCE loss clamps
//! probabilities to `[1e-12, 1-1e-12]` and has zero derivative where the clamp
//! is active; the fused sigmoid-BCE loss works on logits and keeps gradients
//! alive deep into saturation (down to subnormal magnitudes) where the
//! composed `sigmoid -> bce` pair would round them to exactly zero.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding sized so the output spatial extent is `ceil(in / stride)`.
    Same,
    /// No padding; output extent is `(in - kernel) / stride + 1`.
    Valid,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(usize),
    Relu,
    Sigmoid,
    Add,
    Scale(f64),
    Linear,
    Conv2d { stride: usize, padding: Padding },
    AvgPool2d { size: usize },
    Flatten,
    BceLoss,
    SigmoidBce,
    SqDist,
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
}

#[derive(Debug, Clone)]
struct ParamSlot {
    name: String,
    value: Tensor,
    node: NodeId,
}

/// Which gradients [`Graph::backward_from`] should materialize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrt {
    All,
    Params,
    Inputs,
}

/// Gradients keyed by parameter name and by input node. Every requested
/// parameter/input gets an entry; zeros when the loss does not depend on it.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: BTreeMap<String, Tensor>,
    pub inputs: BTreeMap<NodeId, Tensor>,
}

/// Activation tensors from a forward pass, indexed by node. Nodes outside the
/// evaluated subgraph (see [`Graph::forward_to`]) are absent.
#[derive(Debug)]
pub struct Activations {
    values: Vec<Option<Tensor>>,
}

impl Activations {
    pub fn get(&self, id: NodeId) -> Result<&Tensor> {
        self.values
            .get(id.0)
            .and_then(|v| v.as_ref())
            .ok_or(Error::BadNodeId(id.0))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<ParamSlot>,
    input_ids: Vec<NodeId>,
}

fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<usize> {
    match padding {
        Padding::Same => Ok(input.div_ceil(stride)),
        Padding::Valid => {
            if input < kernel {
                return Err(Error::shape(
                    "conv2d valid padding",
                    format!("input extent >= kernel {kernel}"),
                    format!("{input}"),
                ));
            }
            Ok((input - kernel) / stride + 1)
        }
    }
}

/// Leading pad for `Same` padding (TF convention: excess goes to the end).
fn same_pad_before(input: usize, kernel: usize, stride: usize) -> usize {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    total / 2
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

const BCE_CLAMP: f64 = 1e-12;

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn input_ids(&self) -> &[NodeId] {
        &self.input_ids
    }

    pub fn node_shape(&self, id: NodeId) -> Result<&[usize]> {
        self.nodes
            .get(id.0)
            .map(|n| n.shape.as_slice())
            .ok_or(Error::BadNodeId(id.0))
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, inputs, shape });
        id
    }

    fn check_id(&self, id: NodeId, context: &str) -> Result<&Node> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| Error::InvalidArgument(format!("{context}: node {} out of range", id.0)))
    }

    pub fn input(&mut self, shape: &[usize]) -> NodeId {
        let id = self.push(Op::Input, vec![], shape.to_vec());
        self.input_ids.push(id);
        id
    }

    /// Registers a named parameter with its initial value. Names are unique.
    pub fn param(&mut self, name: &str, init: Tensor) -> Result<NodeId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name:?}")));
        }
        let shape = init.shape().to_vec();
        let idx = self.params.len();
        let id = self.push(Op::Param(idx), vec![], shape);
        self.params.push(ParamSlot { name: name.to_string(), value: init, node: id });
        Ok(id)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.check_id(x, "relu")?.shape.clone();
        Ok(self.push(Op::Relu, vec![x], shape))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.check_id(x, "sigmoid")?.shape.clone();
        Ok(self.push(Op::Sigmoid, vec![x], shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.check_id(a, "add")?.shape.clone();
        let sb = &self.check_id(b, "add")?.shape;
        if &sa != sb {
            return Err(Error::shape("add", format!("{sa:?}"), format!("{sb:?}")));
        }
        Ok(self.push(Op::Add, vec![a, b], sa))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(Error::InvalidArgument("scale factor must be finite".into()));
        }
        let shape = self.check_id(x, "scale")?.shape.clone();
        Ok(self.push(Op::Scale(factor), vec![x], shape))
    }

    /// `y = W x + b` with `x: [in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let sx = self.check_id(x, "linear")?.shape.clone();
        let sw = self.check_id(w, "linear")?.shape.clone();
        let sb = self.check_id(b, "linear")?.shape.clone();
        if sx.len() != 1 || sw.len() != 2 || sb.len() != 1 || sw[1] != sx[0] || sw[0] != sb[0] {
            return Err(Error::shape(
                "linear",
                "x:[in] w:[out,in] b:[out]".to_string(),
                format!("x:{sx:?} w:{sw:?} b:{sb:?}"),
            ));
        }
        Ok(self.push(Op::Linear, vec![x, w, b], vec![sw[0]]))
    }

    /// 2-D convolution, `x: [cin,h,w]`, `w: [cout,cin,kh,kw]`, `b: [cout]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        if !(stride == 1 || stride == 2) {
            return Err(Error::InvalidArgument(format!("conv2d stride must be 1 or 2, got {stride}")));
        }
        let sx = self.check_id(x, "conv2d")?.shape.clone();
        let sw = self.check_id(w, "conv2d")?.shape.clone();
        let sb = self.check_id(b, "conv2d")?.shape.clone();
        if sx.len() != 3 || sw.len() != 4 || sb.len() != 1 || sw[1] != sx[0] || sb[0] != sw[0] {
            return Err(Error::shape(
                "conv2d",
                "x:[cin,h,w] w:[cout,cin,kh,kw] b:[cout]".to_string(),
                format!("x:{sx:?} w:{sw:?} b:{sb:?}"),
            ));
        }
        let oh = conv_out_extent(sx[1], sw[2], stride, padding)?;
        let ow = conv_out_extent(sx[2], sw[3], stride, padding)?;
        Ok(self.push(Op::Conv2d { stride, padding }, vec![x, w, b], vec![sw[0], oh, ow]))
    }

    /// Non-overlapping average pooling; spatial extents must divide by `size`.
    pub fn avg_pool2d(&mut self, x: NodeId, size: usize) -> Result<NodeId> {
        if size == 0 {
            return Err(Error::InvalidArgument("avg_pool2d size must be positive".into()));
        }
        let sx = self.check_id(x, "avg_pool2d")?.shape.clone();
        if sx.len() != 3 || sx[1] % size != 0 || sx[2] % size != 0 {
            return Err(Error::shape(
                "avg_pool2d",
                format!("[c,h,w] with h,w divisible by {size}"),
                format!("{sx:?}"),
            ));
        }
        Ok(self.push(Op::AvgPool2d { size }, vec![x], vec![sx[0], sx[1] / size, sx[2] / size]))
    }

    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.check_id(x, "flatten")?.shape.clone();
        let n: usize = sx.iter().product();
        Ok(self.push(Op::Flatten, vec![x], vec![n]))
    }

    /// Mean binary cross-entropy over elements; `p` holds probabilities.
    pub fn bce_loss(&mut self, p: NodeId, t: NodeId) -> Result<NodeId> {
        let sp = self.check_id(p, "bce_loss")?.shape.clone();
        let st = &self.check_id(t, "bce_loss")?.shape;
        if &sp != st {
            return Err(Error::shape("bce_loss", format!("{sp:?}"), format!("{st:?}")));
        }
        Ok(self.push(Op::BceLoss, vec![p, t], vec![]))
    }

    /// Mean binary cross-entropy computed from logits (fused sigmoid + BCE).
    pub fn sigmoid_bce_loss(&mut self, z: NodeId, t: NodeId) -> Result<NodeId> {
        let sz = self.check_id(z, "sigmoid_bce_loss")?.shape.clone();
        let st = &self.check_id(t, "sigmoid_bce_loss")?.shape;
        if &sz != st {
            return Err(Error::shape("sigmoid_bce_loss", format!("{sz:?}"), format!("{st:?}")));
        }
        Ok(self.push(Op::SigmoidBce, vec![z, t], vec![]))
    }

    /// Squared Euclidean distance `sum((a-b)^2)`, a scalar.
    pub fn sq_dist(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.check_id(a, "sq_dist")?.shape.clone();
        let sb = &self.check_id(b, "sq_dist")?.shape;
        if &sa != sb {
            return Err(Error::shape("sq_dist", format!("{sa:?}"), format!("{sb:?}")));
        }
        Ok(self.push(Op::SqDist, vec![a, b], vec![]))
    }

    // --- parameter access -------------------------------------------------

    pub fn param_names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    pub fn param_node(&self, name: &str) -> Option<NodeId> {
        self.params.iter().find(|p| p.name == name).map(|p| p.node)
    }

    pub fn param_value(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))?;
        if slot.value.shape() != value.shape() {
            return Err(Error::shape(
                format!("set_param {name:?}"),
                format!("{:?}", slot.value.shape()),
                format!("{:?}", value.shape()),
            ));
        }
        slot.value = value;
        Ok(())
    }

    /// In-place update of one parameter's elements, for optimizer steps.
    pub fn update_param(&mut self, name: &str, f: impl FnMut(&mut [f64])) -> Result<()> {
        let mut f = f;
        let slot = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))?;
        f(slot.value.data_mut());
        Ok(())
    }

    /// Parameter `(name, value)` pairs in registration order.
    pub fn params_snapshot(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }

    // --- evaluation -------------------------------------------------------

    fn bind_feeds<'a>(&self, feeds: &[(NodeId, &'a Tensor)]) -> Result<Vec<Option<&'a Tensor>>> {
        let mut bound: Vec<Option<&Tensor>> = vec![None; self.nodes.len()];
        for (id, t) in feeds {
            let node = self.check_id(*id, "feeds")?;
            if !matches!(node.op, Op::Input) {
                return Err(Error::InvalidArgument(format!("feed bound to non-input node {}", id.0)));
            }
            if node.shape != t.shape() {
                return Err(Error::shape(
                    format!("feed for input node {}", id.0),
                    format!("{:?}", node.shape),
                    format!("{:?}", t.shape()),
                ));
            }
            bound[id.0] = Some(*t);
        }
        Ok(bound)
    }

    /// Marks the ancestor set of `target`, including itself.
    fn ancestors(&self, target: NodeId) -> Result<Vec<bool>> {
        self.check_id(target, "ancestors")?;
        let mut need = vec![false; self.nodes.len()];
        let mut stack = vec![target.0];
        while let Some(i) = stack.pop() {
            if need[i] {
                continue;
            }
            need[i] = true;
            for inp in &self.nodes[i].inputs {
                stack.push(inp.0);
            }
        }
        Ok(need)
    }

    /// Evaluates every node. Feeds must cover all input nodes.
    pub fn forward_eval(&self, feeds: &[(NodeId, &Tensor)]) -> Result<Activations> {
        let scope = vec![true; self.nodes.len()];
        self.eval_scope(&scope, feeds)
    }

    /// Evaluates only the ancestors of `target`; feeds are required only for
    /// input nodes inside that subgraph.
    pub fn forward_to(&self, target: NodeId, feeds: &[(NodeId, &Tensor)]) -> Result<Activations> {
        let scope = self.ancestors(target)?;
        self.eval_scope(&scope, feeds)
    }

    fn eval_scope(&self, scope: &[bool], feeds: &[(NodeId, &Tensor)]) -> Result<Activations> {
        let bound = self.bind_feeds(feeds)?;
        let mut values: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for i in 0..self.nodes.len() {
            if !scope[i] {
                continue;
            }
            let node = &self.nodes[i];
            let out = match &node.op {
                Op::Input => bound[i].ok_or(Error::MissingFeed(i))?.clone(),
                Op::Param(idx) => self.params[*idx].value.clone(),
                _ => {
                    let args: Vec<&Tensor> = node
                        .inputs
                        .iter()
                        .map(|inp| values[inp.0].as_ref().expect("topological order"))
                        .collect();
                    self.eval_op(node, &args)
                }
            };
            debug_assert_eq!(out.shape(), node.shape.as_slice());
            values[i] = Some(out);
        }
        Ok(Activations { values })
    }

    fn eval_op(&self, node: &Node, args: &[&Tensor]) -> Tensor {
        match &node.op {
            Op::Relu => args[0].map(|v| if v > 0.0 { v } else { 0.0 }),
            Op::Sigmoid => args[0].map(sigmoid),
            Op::Add => args[0].zip_map(args[1], |a, b| a + b).expect("checked at build"),
            Op::Scale(k) => args[0].map(|v| v * k),
            Op::Linear => {
                let (x, w, b) = (args[0], args[1], args[2]);
                let (n_out, n_in) = (w.shape()[0], w.shape()[1]);
                let mut out = vec![0.0; n_out];
                let wd = w.data();
                let xd = x.data();
                for (o, out_v) in out.iter_mut().enumerate() {
                    let row = &wd[o * n_in..(o + 1) * n_in];
                    let mut acc = b.data()[o];
                    for (wv, xv) in row.iter().zip(xd.iter()) {
                        acc += wv * xv;
                    }
                    *out_v = acc;
                }
                Tensor::new(node.shape.clone(), out).expect("checked at build")
            }
            Op::Conv2d { stride, padding } => conv2d_forward(args[0], args[1], args[2], *stride, *padding),
            Op::AvgPool2d { size } => {
                let x = args[0];
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (oh, ow) = (h / size, w / size);
                let inv = 1.0 / ((size * size) as f64);
                let xd = x.data();
                let mut out = vec![0.0; c * oh * ow];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0.0;
                            for dy in 0..*size {
                                let row = (ch * h + oy * size + dy) * w + ox * size;
                                for dx in 0..*size {
                                    acc += xd[row + dx];
                                }
                            }
                            out[(ch * oh + oy) * ow + ox] = acc * inv;
                        }
                    }
                }
                Tensor::new(node.shape.clone(), out).expect("checked at build")
            }
            Op::Flatten => Tensor::new(node.shape.clone(), args[0].data().to_vec()).expect("checked at build"),
            Op::BceLoss => {
                let (p, t) = (args[0], args[1]);
                let n = p.len() as f64;
                let mut acc = 0.0;
                for (&pv, &tv) in p.data().iter().zip(t.data().iter()) {
                    let pc = pv.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                    acc -= tv * pc.ln() + (1.0 - tv) * (1.0 - pc).ln();
                }
                Tensor::scalar(acc / n)
            }
            Op::SigmoidBce => {
                let (z, t) = (args[0], args[1]);
                let n = z.len() as f64;
                let mut acc = 0.0;
                for (&zv, &tv) in z.data().iter().zip(t.data().iter()) {
                    acc += tv * softplus(-zv) + (1.0 - tv) * softplus(zv);
                }
                Tensor::scalar(acc / n)
            }
            Op::SqDist => {
                let (a, b) = (args[0], args[1]);
                let mut acc = 0.0;
                for (&av, &bv) in a.data().iter().zip(b.data().iter()) {
                    let d = av - bv;
                    acc += d * d;
                }
                Tensor::scalar(acc)
            }
            Op::Input | Op::Param(_) => unreachable!("leaf ops handled by caller"),
        }
    }

    // --- reverse mode -----------------------------------------------------

    /// Runs forward then backward, returning gradients for all parameters and
    /// all fed inputs.
    pub fn backward_grad(&self, loss: NodeId, feeds: &[(NodeId, &Tensor)]) -> Result<Gradients> {
        let acts = self.forward_to(loss, feeds)?;
        self.backward_from(loss, feeds, &acts, Wrt::All)
    }

    /// Backward pass over existing activations. `wrt` restricts which leaf
    /// gradients are materialized (and skips dead branches entirely).
    pub fn backward_from(
        &self,
        loss: NodeId,
        feeds: &[(NodeId, &Tensor)],
        acts: &Activations,
        wrt: Wrt,
    ) -> Result<Gradients> {
        let loss_node = self.check_id(loss, "backward loss")?;
        if loss_node.shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(format!("loss node {} of shape {:?}", loss.0, loss_node.shape)));
        }
        let want_params = matches!(wrt, Wrt::All | Wrt::Params);
        let want_inputs = matches!(wrt, Wrt::All | Wrt::Inputs);

        let fed: Vec<NodeId> = feeds.iter().map(|(id, _)| *id).collect();

        // useful[i]: node i can reach a leaf whose gradient was requested.
        let mut useful = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            useful[i] = match node.op {
                Op::Param(_) => want_params,
                Op::Input => want_inputs && fed.iter().any(|f| f.0 == i),
                _ => node.inputs.iter().any(|inp| useful[inp.0]),
            };
        }

        let scope = self.ancestors(loss)?;
        let mut adjoint: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adjoint[loss.0] = Some(Tensor::new(loss_node.shape.clone(), vec![1.0]).expect("scalar"));

        for i in (0..self.nodes.len()).rev() {
            if !scope[i] || adjoint[i].is_none() || !useful[i] {
                continue;
            }
            let node = &self.nodes[i];
            if matches!(node.op, Op::Input | Op::Param(_)) {
                continue;
            }
            let g = adjoint[i].take().expect("present");
            let args: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|inp| acts.get(*inp).expect("forward covered ancestors"))
                .collect();
            let out_val = acts.get(NodeId(i)).expect("forward covered ancestors");
            let input_grads = self.backprop_op(node, &args, out_val, &g);
            for (inp, dg) in node.inputs.iter().zip(input_grads.into_iter()) {
                let Some(dg) = dg else { continue };
                if !useful[inp.0] {
                    continue;
                }
                match &mut adjoint[inp.0] {
                    Some(existing) => {
                        let summed = existing.zip_map(&dg, |a, b| a + b)?;
                        *existing = summed;
                    }
                    slot @ None => *slot = Some(dg),
                }
            }
            adjoint[i] = Some(g);
        }

        let mut out = Gradients { params: BTreeMap::new(), inputs: BTreeMap::new() };
        if want_params {
            for p in &self.params {
                let g = adjoint[p.node.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
                out.params.insert(p.name.clone(), g);
            }
        }
        if want_inputs {
            for id in &fed {
                let shape = self.nodes[id.0].shape.clone();
                let g = adjoint[id.0].clone().unwrap_or_else(|| Tensor::zeros(&shape));
                out.inputs.insert(*id, g);
            }
        }
        Ok(out)
    }

    /// Per-op vector-Jacobian products. Returns one optional gradient per op
    /// input (`None` where the derivative is identically zero, e.g. BCE
    /// targets never receive `None` but clamped BCE probabilities might be
    /// zeroed elementwise instead).
    fn backprop_op(&self, node: &Node, args: &[&Tensor], out_val: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        match &node.op {
            Op::Relu => {
                let x = args[0];
                let dg = x.zip_map(g, |xv, gv| if xv > 0.0 { gv } else { 0.0 }).expect("shape");
                vec![Some(dg)]
            }
            Op::Sigmoid => {
                let y = out_val;
                let dg = y.zip_map(g, |yv, gv| gv * yv * (1.0 - yv)).expect("shape");
                vec![Some(dg)]
            }
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Scale(k) => vec![Some(g.map(|v| v * k))],
            Op::Linear => {
                let (x, w, _b) = (args[0], args[1], args[2]);
                let (n_out, n_in) = (w.shape()[0], w.shape()[1]);
                let gd = g.data();
                let wd = w.data();
                let xd = x.data();
                let mut dx = vec![0.0; n_in];
                let mut dw = vec![0.0; n_out * n_in];
                for o in 0..n_out {
                    let go = gd[o];
                    let row = &wd[o * n_in..(o + 1) * n_in];
                    let drow = &mut dw[o * n_in..(o + 1) * n_in];
                    for j in 0..n_in {
                        dx[j] += go * row[j];
                        drow[j] = go * xd[j];
                    }
                }
                vec![
                    Some(Tensor::new(x.shape().to_vec(), dx).expect("shape")),
                    Some(Tensor::new(w.shape().to_vec(), dw).expect("shape")),
                    Some(g.clone()),
                ]
            }
            Op::Conv2d { stride, padding } => {
                let (dx, dw, db) = conv2d_backward(args[0], args[1], *stride, *padding, g);
                vec![Some(dx), Some(dw), Some(db)]
            }
            Op::AvgPool2d { size } => {
                let x = args[0];
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (oh, ow) = (h / size, w / size);
                let inv = 1.0 / ((size * size) as f64);
                let gd = g.data();
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = gd[(ch * oh + oy) * ow + ox] * inv;
                            for dy in 0..*size {
                                let row = (ch * h + oy * size + dy) * w + ox * size;
                                for dxx in 0..*size {
                                    dx[row + dxx] += gv;
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(x.shape().to_vec(), dx).expect("shape"))]
            }
            Op::Flatten => {
                let x = args[0];
                vec![Some(Tensor::new(x.shape().to_vec(), g.data().to_vec()).expect("shape"))]
            }
            Op::BceLoss => {
                let (p, t) = (args[0], args[1]);
                let n = p.len() as f64;
                let gs = g.item().expect("scalar adjoint");
                let mut dp = vec![0.0; p.len()];
                let mut dt = vec![0.0; p.len()];
                for (j, (&pv, &tv)) in p.data().iter().zip(t.data().iter()).enumerate() {
                    let pc = pv.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                    // Zero derivative where the clamp is active.
                    if pv == pc {
                        dp[j] = gs * (-(tv / pc) + (1.0 - tv) / (1.0 - pc)) / n;
                    }
                    dt[j] = gs * ((1.0 - pc).ln() - pc.ln()) / n;
                }
                vec![
                    Some(Tensor::new(p.shape().to_vec(), dp).expect("shape")),
                    Some(Tensor::new(t.shape().to_vec(), dt).expect("shape")),
                ]
            }
            Op::SigmoidBce => {
                let (z, t) = (args[0], args[1]);
                let n = z.len() as f64;
                let gs = g.item().expect("scalar adjoint");
                let mut dz = vec![0.0; z.len()];
                let mut dt = vec![0.0; z.len()];
                for (j, (&zv, &tv)) in z.data().iter().zip(t.data().iter()).enumerate() {
                    // d/dz = sigma(z) - t, arranged so saturation underflows to
                    // subnormals instead of rounding to zero.
                    dz[j] = if tv >= 1.0 {
                        gs * (-sigmoid(-zv)) / n
                    } else if tv <= 0.0 {
                        gs * sigmoid(zv) / n
                    } else {
                        gs * (sigmoid(zv) - tv) / n
                    };
                    // softplus(-z) - softplus(z) == -z exactly.
                    dt[j] = gs * (-zv) / n;
                }
                vec![
                    Some(Tensor::new(z.shape().to_vec(), dz).expect("shape")),
                    Some(Tensor::new(t.shape().to_vec(), dt).expect("shape")),
                ]
            }
            Op::SqDist => {
                let (a, b) = (args[0], args[1]);
                let gs = g.item().expect("scalar adjoint");
                let da = a.zip_map(b, |av, bv| gs * 2.0 * (av - bv)).expect("shape");
                let db = da.map(|v| -v);
                vec![Some(da), Some(db)]
            }
            Op::Input | Op::Param(_) => unreachable!("leaves have no inputs"),
        }
    }
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, padding: Padding) -> Tensor {
    let (cin, h, wd_) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = conv_out_extent(h, kh, stride, padding).expect("checked at build");
    let ow = conv_out_extent(wd_, kw, stride, padding).expect("checked at build");
    let (pt, pl) = match padding {
        Padding::Same => (same_pad_before(h, kh, stride), same_pad_before(wd_, kw, stride)),
        Padding::Valid => (0, 0),
    };
    let xd = x.data();
    let wdat = w.data();
    let bd = b.data();
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bd[co];
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pt as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = (ci * h + iy as usize) * wd_;
                        let wrow = ((co * cin + ci) * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pl as isize;
                            if ix < 0 || ix >= wd_ as isize {
                                continue;
                            }
                            acc += xd[xrow + ix as usize] * wdat[wrow + kx];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::new(vec![cout, oh, ow], out).expect("shape")
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    padding: Padding,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (cin, h, wd_) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (g.shape()[1], g.shape()[2]);
    let (pt, pl) = match padding {
        Padding::Same => (same_pad_before(h, kh, stride), same_pad_before(wd_, kw, stride)),
        Padding::Valid => (0, 0),
    };
    let xd = x.data();
    let wdat = w.data();
    let gd = g.data();
    let mut dx = vec![0.0; cin * h * wd_];
    let mut dw = vec![0.0; cout * cin * kh * kw];
    let mut db = vec![0.0; cout];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = gd[(co * oh + oy) * ow + ox];
                db[co] += gv;
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pt as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = (ci * h + iy as usize) * wd_;
                        let wrow = ((co * cin + ci) * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pl as isize;
                            if ix < 0 || ix >= wd_ as isize {
                                continue;
                            }
                            dx[xrow + ix as usize] += gv * wdat[wrow + kx];
                            dw[wrow + kx] += gv * xd[xrow + ix as usize];
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("shape"),
        Tensor::new(w.shape().to_vec(), dw).expect("shape"),
        Tensor::new(vec![cout], db).expect("shape"),
    )
}

// --- gradient checking ------------------------------------------------------

/// One finite-difference disagreement above tolerance.
#[derive(Debug, Clone)]
pub struct GradCheckFailure {
    pub site: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub tolerance: f64,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

const FD_STEP: f64 = 1e-5;
/// Relative error uses a floored denominator so finite-difference noise on
/// near-zero gradients does not read as failure.
const FD_DENOM_FLOOR: f64 = 1e-3;

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_DENOM_FLOOR)
}

/// Central-difference check of `backward_grad` over every parameter and every
/// fed input coordinate of `loss`.
pub fn grad_check(
    graph: &Graph,
    loss: NodeId,
    feeds: &[(NodeId, &Tensor)],
    tolerance: f64,
) -> Result<GradCheckReport> {
    let analytic = graph.backward_grad(loss, feeds)?;
    fd_check_against(graph, loss, feeds, &analytic, tolerance)
}

/// Compares a caller-supplied gradient map against central differences. Split
/// out so a corrupted map can be shown to produce a failing report.
pub fn fd_check_against(
    graph: &Graph,
    loss: NodeId,
    feeds: &[(NodeId, &Tensor)],
    analytic: &Gradients,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut work = graph.clone();
    let mut owned: Vec<(NodeId, Tensor)> = feeds.iter().map(|(id, t)| (*id, (*t).clone())).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        tolerance,
        failures: Vec::new(),
    };

    let eval = |g: &Graph, fs: &[(NodeId, Tensor)]| -> Result<f64> {
        let refs: Vec<(NodeId, &Tensor)> = fs.iter().map(|(id, t)| (*id, t)).collect();
        g.forward_to(loss, &refs)?.get(loss)?.item()
    };

    for name in graph.param_names() {
        let n_elem = graph.param_value(&name).expect("listed").len();
        let ag = &analytic.params[&name];
        for j in 0..n_elem {
            let orig = work.param_value(&name).expect("listed").data()[j];
            work.update_param(&name, |d| d[j] = orig + FD_STEP)?;
            let lp = eval(&work, &owned)?;
            work.update_param(&name, |d| d[j] = orig - FD_STEP)?;
            let lm = eval(&work, &owned)?;
            work.update_param(&name, |d| d[j] = orig)?;
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            let a = ag.data()[j];
            let re = rel_error(a, numeric);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(re);
            if re >= tolerance {
                report.failures.push(GradCheckFailure {
                    site: format!("param {name}"),
                    index: j,
                    analytic: a,
                    numeric,
                    rel_error: re,
                });
            }
        }
    }

    for fi in 0..owned.len() {
        let id = owned[fi].0;
        let Some(ag) = analytic.inputs.get(&id) else { continue };
        let ag = ag.clone();
        for j in 0..owned[fi].1.len() {
            let orig = owned[fi].1.data()[j];
            owned[fi].1.data_mut()[j] = orig + FD_STEP;
            let lp = eval(&work, &owned)?;
            owned[fi].1.data_mut()[j] = orig - FD_STEP;
            let lm = eval(&work, &owned)?;
            owned[fi].1.data_mut()[j] = orig;
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            let a = ag.data()[j];
            let re = rel_error(a, numeric);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(re);
            if re >= tolerance {
                report.failures.push(GradCheckFailure {
                    site: format!("input node {}", id.0),
                    index: j,
                    analytic: a,
                    numeric,
                    rel_error: re,
                });
            }
        }
    }

    Ok(report)
}
