//! Recorded forward computations and reverse-mode differentiation.
//!
//! A [`Graph`] borrows a slice of layers and appends one node per operation.
//! Nodes refer to layers by index, so gradients come back aligned with the
//! layer slice. A graph built with [`Graph::inference`] keeps no backward
//! caches and refuses to differentiate.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::nn::layer::{self, Layer, LayerKind};
use crate::nn::resize::{resize_batch, resize_batch_adjoint, ResizeKind};
use crate::nn::tensor::Tensor;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

enum Cache {
    None,
    Conv(Vec<f32>),
    Norm { x_hat: Vec<f32>, inv_std: Vec<f32> },
}

enum Op {
    Input,
    Layer {
        layer: usize,
        input: usize,
        cache: Cache,
    },
    Embed {
        layer: usize,
        ids: Vec<usize>,
    },
    Add(usize, usize),
    Resize {
        input: usize,
        src: (usize, usize),
        dst: (usize, usize),
        kind: ResizeKind,
    },
    BroadcastAdd {
        map: usize,
        vector: usize,
    },
    Concat(usize, usize),
    Reshape(usize),
}

struct Node {
    op: Op,
    value: Tensor,
}

pub struct Graph<'a> {
    layers: &'a [Layer],
    nodes: Vec<Node>,
    id: u64,
    record: bool,
}

/// Gradients from one backward pass.
pub struct Gradients {
    graph: u64,
    /// Aligned with the graph's layer slice; layers that did not take part
    /// hold zero tensors.
    pub params: Vec<Vec<Tensor>>,
    inputs: Vec<(usize, Tensor)>,
}

impl Gradients {
    /// Gradient with respect to an input created by [`Graph::input`].
    pub fn input(&self, var: Var) -> Result<&Tensor> {
        if var.graph != self.graph {
            return Err(Error::Unrecorded("input from a different graph".into()));
        }
        self.inputs
            .iter()
            .find(|(i, _)| *i == var.index)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Unrecorded(format!("node {} is not a graph input", var.index)))
    }
}

/// Zero gradients shaped like the parameters of `layers`.
pub fn zero_param_grads(layers: &[Layer]) -> Vec<Vec<Tensor>> {
    layers
        .iter()
        .map(|l| l.params.iter().map(|p| Tensor::zeros(p.shape())).collect())
        .collect()
}

/// `acc += g` over aligned parameter gradients.
pub fn accumulate_param_grads(acc: &mut [Vec<Tensor>], g: &[Vec<Tensor>]) {
    for (la, lg) in acc.iter_mut().zip(g) {
        for (a, b) in la.iter_mut().zip(lg) {
            a.add_assign(b);
        }
    }
}

impl<'a> Graph<'a> {
    /// A graph that records backward caches.
    pub fn new(layers: &'a [Layer]) -> Self {
        Graph {
            layers,
            nodes: Vec::new(),
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            record: true,
        }
    }

    /// A forward-only graph.
    pub fn inference(layers: &'a [Layer]) -> Self {
        Graph {
            record: false,
            ..Graph::new(layers)
        }
    }

    pub fn layers(&self) -> &'a [Layer] {
        self.layers
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn index(&self, var: Var) -> Result<usize> {
        if var.graph != self.id || var.index >= self.nodes.len() {
            return Err(Error::Unrecorded(format!(
                "value {} of graph {} used on graph {}",
                var.index, var.graph, self.id
            )));
        }
        Ok(var.index)
    }

    pub fn value(&self, var: Var) -> Result<&Tensor> {
        let i = self.index(var)?;
        Ok(&self.nodes[i].value)
    }

    pub fn input(&mut self, tensor: Tensor) -> Var {
        self.push(Op::Input, tensor)
    }

    fn layer_at(&self, layer: usize) -> Result<&'a Layer> {
        self.layers
            .get(layer)
            .ok_or_else(|| Error::shape("graph", format!("no layer with index {layer}")))
    }

    /// Apply a non-embedding layer.
    pub fn layer(&mut self, layer: usize, x: Var) -> Result<Var> {
        let l = self.layer_at(layer)?;
        let xi = self.index(x)?;
        let input = &self.nodes[xi].value;
        l.check_input(input)?;
        let p = &l.params;
        let (value, cache) = match l.kind {
            LayerKind::Dense { .. } | LayerKind::Conv1x1 { .. } => {
                (layer::pointwise_forward(input, &p[0], &p[1]), Cache::None)
            }
            LayerKind::Conv3x3 { .. } => {
                let (y, cols) = layer::conv3x3_forward(input, &p[0], &p[1]);
                (y, if self.record { Cache::Conv(cols) } else { Cache::None })
            }
            LayerKind::ChannelNorm { eps, .. } => {
                let (y, x_hat, inv_std) = layer::channel_norm_forward(input, &p[0], &p[1], eps);
                let cache = if self.record {
                    Cache::Norm { x_hat, inv_std }
                } else {
                    Cache::None
                };
                (y, cache)
            }
            LayerKind::LeakyRelu { slope } => (layer::leaky_relu_forward(input, slope), Cache::None),
            LayerKind::Embedding { .. } => {
                return Err(Error::shape(&l.name, "embedding layers take ids; use Graph::embed"))
            }
        };
        value.check_finite(&l.name)?;
        Ok(self.push(
            Op::Layer {
                layer,
                input: xi,
                cache,
            },
            value,
        ))
    }

    /// Apply a chain of layers in order.
    pub fn chain(&mut self, layers: &[usize], mut x: Var) -> Result<Var> {
        for &l in layers {
            x = self.layer(l, x)?;
        }
        Ok(x)
    }

    pub fn embed(&mut self, layer: usize, ids: &[usize]) -> Result<Var> {
        let l = self.layer_at(layer)?;
        let value = l.lookup(ids)?;
        Ok(self.push(
            Op::Embed {
                layer,
                ids: ids.to_vec(),
            },
            value,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let (ta, tb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut value = ta.clone();
        value.add_assign(tb);
        Ok(self.push(Op::Add(ai, bi), value))
    }

    /// Spatial resize of an `[N, H, W, C]` value.
    pub fn resize(&mut self, x: Var, h: usize, w: usize, kind: ResizeKind) -> Result<Var> {
        let xi = self.index(x)?;
        let t = &self.nodes[xi].value;
        if t.rank() != 4 || h == 0 || w == 0 {
            return Err(Error::shape(
                "resize",
                format!("{:?} to {h}x{w}", t.shape()),
            ));
        }
        let s = t.shape();
        let (n, src, c) = (s[0], (s[1], s[2]), s[3]);
        let data = resize_batch(t.data(), n, src, (h, w), c, kind);
        let value = Tensor::new(vec![n, h, w, c], data)?;
        Ok(self.push(
            Op::Resize {
                input: xi,
                src,
                dst: (h, w),
                kind,
            },
            value,
        ))
    }

    /// Add an `[N, C]` vector to every site of an `[N, H, W, C]` map.
    pub fn broadcast_add(&mut self, map: Var, vector: Var) -> Result<Var> {
        let (mi, vi) = (self.index(map)?, self.index(vector)?);
        let (m, v) = (&self.nodes[mi].value, &self.nodes[vi].value);
        let s = m.shape();
        if s.len() != 4 || v.shape() != [s[0], s[3]] {
            return Err(Error::shape(
                "broadcast-add",
                format!("map {:?} with vector {:?}", s, v.shape()),
            ));
        }
        let c = s[3];
        let per = s[1] * s[2] * c;
        let mut value = m.clone();
        for (b, chunk) in value.data_mut().chunks_mut(per).enumerate() {
            let row = &v.data()[b * c..(b + 1) * c];
            for site in chunk.chunks_mut(c) {
                for (x, &y) in site.iter_mut().zip(row) {
                    *x += y;
                }
            }
        }
        Ok(self.push(Op::BroadcastAdd { map: mi, vector: vi }, value))
    }

    /// Concatenate two `[N, D]` values along the feature axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let (ta, tb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[0] != tb.shape()[0] {
            return Err(Error::shape(
                "concat",
                format!("{:?} with {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (n, da, db) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut data = Vec::with_capacity(n * (da + db));
        for r in 0..n {
            data.extend_from_slice(&ta.data()[r * da..(r + 1) * da]);
            data.extend_from_slice(&tb.data()[r * db..(r + 1) * db]);
        }
        let value = Tensor::new(vec![n, da + db], data)?;
        Ok(self.push(Op::Concat(ai, bi), value))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.index(x)?;
        let value = self.nodes[xi].value.clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(xi), value))
    }

    /// Reverse pass from `output` seeded with `upstream` (same shape).
    pub fn backward(&self, output: Var, upstream: &Tensor) -> Result<Gradients> {
        if !self.record {
            return Err(Error::Unrecorded(
                "graph was built for inference only".into(),
            ));
        }
        let oi = self.index(output)?;
        if upstream.shape() != self.nodes[oi].value.shape() {
            return Err(Error::shape(
                "backward",
                format!(
                    "upstream {:?} vs output {:?}",
                    upstream.shape(),
                    self.nodes[oi].value.shape()
                ),
            ));
        }
        upstream.check_finite("upstream gradient")?;
        let mut grads: Vec<Option<Tensor>> = (0..=oi).map(|_| None).collect();
        grads[oi] = Some(upstream.clone());
        let mut params = zero_param_grads(self.layers);
        let mut inputs = Vec::new();

        fn send(grads: &mut [Option<Tensor>], to: usize, g: Tensor) {
            match &mut grads[to] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=oi).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => inputs.push((i, g)),
                Op::Layer {
                    layer,
                    input,
                    cache,
                } => {
                    let l = &self.layers[*layer];
                    let x = &self.nodes[*input].value;
                    let p = &l.params;
                    match (&l.kind, cache) {
                        (LayerKind::Dense { .. } | LayerKind::Conv1x1 { .. }, _) => {
                            let (dx, dw, db) = layer::pointwise_backward(x, &p[0], &g);
                            params[*layer][0].add_assign(&dw);
                            params[*layer][1].add_assign(&db);
                            send(&mut grads, *input, dx);
                        }
                        (LayerKind::Conv3x3 { .. }, Cache::Conv(cols)) => {
                            let (dx, dw, db) = layer::conv3x3_backward(cols, x.shape(), &p[0], &g);
                            params[*layer][0].add_assign(&dw);
                            params[*layer][1].add_assign(&db);
                            send(&mut grads, *input, dx);
                        }
                        (LayerKind::ChannelNorm { .. }, Cache::Norm { x_hat, inv_std }) => {
                            let (dx, dg, db) =
                                layer::channel_norm_backward(x_hat, inv_std, &p[0], &g);
                            params[*layer][0].add_assign(&dg);
                            params[*layer][1].add_assign(&db);
                            send(&mut grads, *input, dx);
                        }
                        (LayerKind::LeakyRelu { slope }, _) => {
                            send(&mut grads, *input, layer::leaky_relu_backward(x, &g, *slope));
                        }
                        _ => {
                            return Err(Error::Unrecorded(format!(
                                "missing backward cache for {}",
                                l.name
                            )))
                        }
                    }
                }
                Op::Embed { layer, ids } => {
                    let dim = g.last_dim();
                    let table = params[*layer][0].data_mut();
                    for (r, &id) in ids.iter().enumerate() {
                        for (t, &v) in table[id * dim..(id + 1) * dim]
                            .iter_mut()
                            .zip(&g.data()[r * dim..(r + 1) * dim])
                        {
                            *t += v;
                        }
                    }
                }
                Op::Add(a, b) => {
                    send(&mut grads, *b, g.clone());
                    send(&mut grads, *a, g);
                }
                Op::Resize {
                    input,
                    src,
                    dst,
                    kind,
                } => {
                    let s = g.shape();
                    let (n, c) = (s[0], s[3]);
                    let data = resize_batch_adjoint(g.data(), n, *src, *dst, c, *kind);
                    send(&mut grads, *input, Tensor::new(vec![n, src.0, src.1, c], data)?);
                }
                Op::BroadcastAdd { map, vector } => {
                    let s = g.shape();
                    let c = s[3];
                    let per = s[1] * s[2] * c;
                    let mut dv = vec![0.0f32; s[0] * c];
                    for (b, chunk) in g.data().chunks(per).enumerate() {
                        for site in chunk.chunks(c) {
                            for (d, &v) in dv[b * c..(b + 1) * c].iter_mut().zip(site) {
                                *d += v;
                            }
                        }
                    }
                    send(&mut grads, *vector, Tensor::new(vec![s[0], c], dv)?);
                    send(&mut grads, *map, g);
                }
                Op::Concat(a, b) => {
                    let da = self.nodes[*a].value.shape()[1];
                    let db = self.nodes[*b].value.shape()[1];
                    let n = g.shape()[0];
                    let mut ga = Vec::with_capacity(n * da);
                    let mut gb = Vec::with_capacity(n * db);
                    for row in g.data().chunks(da + db) {
                        ga.extend_from_slice(&row[..da]);
                        gb.extend_from_slice(&row[da..]);
                    }
                    send(&mut grads, *a, Tensor::new(vec![n, da], ga)?);
                    send(&mut grads, *b, Tensor::new(vec![n, db], gb)?);
                }
                Op::Reshape(input) => {
                    let shape = self.nodes[*input].value.shape().to_vec();
                    send(&mut grads, *input, g.reshape(&shape)?);
                }
            }
        }
        inputs.reverse();
        Ok(Gradients {
            graph: self.id,
            params,
            inputs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::{LayerKind, LEAKY_SLOPE, NORM_EPS};
    use crate::rng::StreamKey;

    #[test]
    fn leaky_relu_positive_region_gradient() {
        let layers = vec![Layer::new("act", LayerKind::LeakyRelu { slope: 0.01 }, vec![]).unwrap()];
        let mut g = Graph::new(&layers);
        let x = g.input(Tensor::from_slice(&[1], &[2.0]).unwrap());
        let y = g.layer(0, x).unwrap();
        let grads = g.backward(y, &Tensor::filled(&[1], 1.0)).unwrap();
        assert_eq!(grads.input(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn dense_weight_gradient_columns_equal_input() {
        let mut rng = StreamKey::root(2).stream();
        let layers = vec![Layer::init(
            "fc",
            LayerKind::Dense {
                inputs: 3,
                outputs: 2,
            },
            1.0,
            &mut rng,
        )];
        let mut g = Graph::new(&layers);
        let xs = [0.5f32, -1.5, 2.0];
        let x = g.input(Tensor::from_slice(&[1, 3], &xs).unwrap());
        let y = g.layer(0, x).unwrap();
        let grads = g.backward(y, &Tensor::filled(&[1, 2], 1.0)).unwrap();
        let dw = grads.params[0][0].data();
        for i in 0..3 {
            for o in 0..2 {
                assert_eq!(dw[i * 2 + o], xs[i]);
            }
        }
    }

    #[test]
    fn foreign_var_is_rejected() {
        let layers = vec![Layer::new("act", LayerKind::LeakyRelu { slope: LEAKY_SLOPE }, vec![]).unwrap()];
        let mut a = Graph::new(&layers);
        let mut b = Graph::new(&layers);
        let xa = a.input(Tensor::zeros(&[2]));
        let _ = b.input(Tensor::zeros(&[2]));
        assert!(matches!(b.layer(0, xa), Err(Error::Unrecorded(_))));
        assert!(matches!(
            b.backward(xa, &Tensor::zeros(&[2])),
            Err(Error::Unrecorded(_))
        ));
    }

    #[test]
    fn inference_graph_refuses_backward() {
        let layers = vec![Layer::zero_init(
            "n",
            LayerKind::ChannelNorm {
                channels: 2,
                eps: NORM_EPS,
            },
        )];
        let mut g = Graph::inference(&layers);
        let x = g.input(Tensor::zeros(&[1, 2]));
        let y = g.layer(0, x).unwrap();
        assert!(matches!(
            g.backward(y, &Tensor::zeros(&[1, 2])),
            Err(Error::Unrecorded(_))
        ));
    }

    #[test]
    fn repeated_forward_and_backward_are_bit_identical() {
        let mut rng = StreamKey::root(9).stream();
        let layers = vec![
            Layer::init("c", LayerKind::Conv3x3 { inputs: 2, outputs: 3 }, 1.0, &mut rng),
            Layer::init(
                "n",
                LayerKind::ChannelNorm {
                    channels: 3,
                    eps: NORM_EPS,
                },
                1.0,
                &mut rng,
            ),
        ];
        let x: Vec<f32> = (0..32).map(|i| (i as f32 * 0.3).cos()).collect();
        let run = || {
            let mut g = Graph::new(&layers);
            let xv = g.input(Tensor::from_slice(&[1, 4, 4, 2], &x).unwrap());
            let y = g.chain(&[0, 1], xv).unwrap();
            let up = g.value(y).unwrap().clone();
            let grads = g.backward(y, &up).unwrap();
            let dx = grads.input(xv).unwrap().clone();
            (up, grads.params, dx)
        };
        assert_eq!(run(), run());
    }
}
