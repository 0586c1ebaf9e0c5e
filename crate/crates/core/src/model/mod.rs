//! Network assembly: stem, backbone, neck, heads; parameter and MAC
//! accounting; checkpoints.

use crate::error::{Error, Result};
use crate::nn::{
    ConvBnAct, DenseStage, DetectHead, DgsmConfig, DgsmStage, DgstBlock, DgstConfig, ElanNeckBlock, Init, Module,
    Param, Spp,
};
use crate::tensor::{ConvSpec, Scalar, Shape, Tape, Tensor, Var};

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use config::{
    Anchors, BackboneKind, LossWeights, ModelConfig, NeckKind, ANCHORS_S16, ANCHORS_S32, ANCHORS_S8,
};

/// A parameterised graph node.
#[derive(Clone, Debug)]
pub enum Layer<T: Scalar = f32> {
    Conv(ConvBnAct<T>),
    Dgsm(DgsmStage<T>),
    Dense(DenseStage<T>),
    Spp(Spp<T>),
    Dgst(DgstBlock<T>),
    Elan(ElanNeckBlock<T>),
    Head(DetectHead<T>),
}

macro_rules! dispatch {
    ($layer:expr, $l:ident => $body:expr) => {
        match $layer {
            Layer::Conv($l) => $body,
            Layer::Dgsm($l) => $body,
            Layer::Dense($l) => $body,
            Layer::Spp($l) => $body,
            Layer::Dgst($l) => $body,
            Layer::Elan($l) => $body,
            Layer::Head($l) => $body,
        }
    };
}

impl<T: Scalar> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "ConvBnAct",
            Layer::Dgsm(_) => "DGSM",
            Layer::Dense(_) => "DenseStage",
            Layer::Spp(_) => "SPP",
            Layer::Dgst(_) => "DGST",
            Layer::Elan(_) => "ELAN",
            Layer::Head(_) => "Detect",
        }
    }
}

impl<T: Scalar> Module<T> for Layer<T> {
    fn forward(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        dispatch!(self, l => l.forward(tape, x))
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        dispatch!(self, l => l.visit(f))
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        dispatch!(self, l => l.visit_mut(f))
    }

    fn param_count(&self) -> usize {
        dispatch!(self, l => l.param_count())
    }

    fn out_shape(&self, input: Shape) -> Shape {
        dispatch!(self, l => l.out_shape(input))
    }

    fn macs(&self, input: Shape) -> u64 {
        dispatch!(self, l => l.macs(input))
    }
}

#[derive(Clone, Debug)]
pub enum NodeOp<T: Scalar = f32> {
    Input,
    Layer(Layer<T>),
    Upsample,
    Concat,
}

#[derive(Clone, Debug)]
pub struct Node<T: Scalar = f32> {
    pub name: String,
    pub op: NodeOp<T>,
    pub inputs: Vec<usize>,
}

/// One row of the per-layer summary.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSummary {
    pub name: String,
    pub kind: &'static str,
    pub out_shape: Shape,
    pub params: usize,
    pub macs: u64,
}

/// A built detector: a topologically ordered node list.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    nodes: Vec<Node<T>>,
    outputs: Vec<usize>,
}

struct Builder<'a, T: Scalar> {
    init: &'a mut Init,
    nodes: Vec<Node<T>>,
    shapes: Vec<Shape>,
}

impl<T: Scalar> Builder<'_, T> {
    fn push(&mut self, name: &str, op: NodeOp<T>, inputs: &[usize]) -> usize {
        let first = self.shapes[inputs[0]];
        let shape = match &op {
            NodeOp::Input => first,
            NodeOp::Layer(l) => l.out_shape(first),
            NodeOp::Upsample => Shape::new(first.n, first.c, first.h * 2, first.w * 2),
            NodeOp::Concat => Shape {
                c: inputs.iter().map(|&i| self.shapes[i].c).sum(),
                ..first
            },
        };
        self.nodes.push(Node {
            name: name.to_string(),
            op,
            inputs: inputs.to_vec(),
        });
        self.shapes.push(shape);
        self.nodes.len() - 1
    }

    fn channels(&self, node: usize) -> usize {
        self.shapes[node].c
    }

    fn conv(&mut self, name: &str, input: usize, spec: ConvSpec) -> Result<usize> {
        let layer = ConvBnAct::new(self.init, name, spec)?;
        Ok(self.push(name, NodeOp::Layer(Layer::Conv(layer)), &[input]))
    }

    fn neck_block(&mut self, cfg: &ModelConfig, name: &str, input: usize) -> Result<usize> {
        let c = self.channels(input);
        let layer = match cfg.neck {
            NeckKind::Dgst => {
                let dcfg = DgstConfig {
                    pw_groups: cfg.pw_groups,
                    pos_encoding: cfg.pos_encoding,
                    mlp_ratio: cfg.mlp_ratio,
                    ..DgstConfig::new(c)
                };
                Layer::Dgst(DgstBlock::new(self.init, name, dcfg)?)
            }
            NeckKind::Elan => Layer::Elan(ElanNeckBlock::new(self.init, name, c, c)?),
        };
        Ok(self.push(name, NodeOp::Layer(layer), &[input]))
    }

    /// `concat(inputs)` → grouped 1×1 fuse to `cout`.
    fn merge(&mut self, cfg: &ModelConfig, name: &str, inputs: &[usize], cout: usize) -> Result<usize> {
        let cat = self.push(&format!("{name}.cat"), NodeOp::Concat, inputs);
        let cin = self.channels(cat);
        self.conv(
            &format!("{name}.fuse"),
            cat,
            ConvSpec::new(cin, cout, 1).groups(cfg.fuse_groups),
        )
    }
}

impl<T: Scalar> Model<T> {
    /// Build with deterministic initialization from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = config;
        let mut init = Init::new(seed);
        let [h, w] = cfg.input_size;
        let mut b = Builder {
            init: &mut init,
            nodes: Vec::new(),
            shapes: vec![Shape::new(1, 3, h, w)],
        };
        b.nodes.push(Node {
            name: "input".into(),
            op: NodeOp::Input,
            inputs: Vec::new(),
        });
        let mut x = 0;
        x = b.conv("stem.0", x, ConvSpec::new(3, cfg.stem[0], 3).stride(2))?;
        x = b.conv("stem.1", x, ConvSpec::new(cfg.stem[0], cfg.stem[1], 3).stride(2))?;

        let mut features = Vec::new();
        for (i, &[n, c]) in cfg.stages.iter().enumerate() {
            let name = format!("stage{}", i + 1);
            let cin = b.channels(x);
            let layer = match cfg.backbone {
                BackboneKind::Dgsm => {
                    let scfg = DgsmConfig {
                        downsample: i > 0,
                        pw_groups: cfg.pw_groups,
                        ..DgsmConfig::new(c, n)
                    };
                    Layer::Dgsm(DgsmStage::new(b.init, &name, cin, scfg)?)
                }
                BackboneKind::Dense => {
                    let stride = if i > 0 { 2 } else { 1 };
                    Layer::Dense(DenseStage::new(b.init, &name, cin, c, n, stride)?)
                }
            };
            x = b.push(&name, NodeOp::Layer(layer), &[x]);
            features.push(x);
        }
        let (f8, f16, f32_) = (features[1], features[2], features[3]);
        let (c8, c16, c32) = (b.channels(f8), b.channels(f16), b.channels(f32_));

        let spp = Spp::new(b.init, "neck.spp", c32, cfg.fuse_groups)?;
        let p5 = b.push("neck.spp", NodeOp::Layer(Layer::Spp(spp)), &[f32_]);
        let n5 = b.neck_block(cfg, "neck.p5", p5)?;

        let up = b.push("neck.up5", NodeOp::Upsample, &[n5]);
        let m4 = b.merge(cfg, "neck.td4", &[up, f16], c16)?;
        let n4 = b.neck_block(cfg, "neck.p4", m4)?;

        let mut outs = Vec::new();
        let o16 = if cfg.num_heads() == 3 {
            let up = b.push("neck.up4", NodeOp::Upsample, &[n4]);
            let m3 = b.merge(cfg, "neck.td3", &[up, f8], c8)?;
            let n3 = b.neck_block(cfg, "neck.p3", m3)?;
            outs.push(n3);
            let down = b.conv("neck.down3", n3, ConvSpec::new(c8, c8 / 2, 3).stride(2))?;
            let m = b.merge(cfg, "neck.bu4", &[down, n4], c16)?;
            b.neck_block(cfg, "neck.o4", m)?
        } else {
            n4
        };
        outs.push(o16);
        let down = b.conv("neck.down4", o16, ConvSpec::new(c16, c16 / 2, 3).stride(2))?;
        let m5 = b.merge(cfg, "neck.bu5", &[down, n5], c32)?;
        let o32 = b.neck_block(cfg, "neck.o5", m5)?;
        outs.push(o32);

        let mut outputs = Vec::new();
        for (&src, &stride) in outs.iter().zip(&cfg.strides) {
            let name = format!("head.s{stride}");
            let cin = b.channels(src);
            let head = DetectHead::new(b.init, &name, cin, 3, cfg.num_classes)?;
            outputs.push(b.push(&name, NodeOp::Layer(Layer::Head(head)), &[src]));
        }
        Ok(Self {
            config: cfg.clone(),
            nodes: b.nodes,
            outputs,
        })
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn num_heads(&self) -> usize {
        self.outputs.len()
    }

    pub fn layers(&self) -> impl Iterator<Item = (&str, &Layer<T>)> {
        self.nodes.iter().filter_map(|n| match &n.op {
            NodeOp::Layer(l) => Some((n.name.as_str(), l)),
            _ => None,
        })
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer<T>> {
        self.nodes.iter_mut().filter_map(|n| match &mut n.op {
            NodeOp::Layer(l) => Some(l),
            _ => None,
        })
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        for (_, l) in self.layers() {
            l.visit(f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for l in self.layers_mut() {
            l.visit_mut(f);
        }
    }

    /// Raw head outputs, in increasing stride order.
    pub fn forward(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Vec<Var<T>>> {
        let s = x.shape();
        if s.c != 3 || s.h == 0 || s.w == 0 || s.h % 32 != 0 || s.w % 32 != 0 {
            return Err(Error::shape("model", "(n, 3, 32·k, 32·m)", s));
        }
        let mut values: Vec<Option<Var<T>>> = vec![None; self.nodes.len()];
        values[0] = Some(x.clone());
        for (i, node) in self.nodes.iter().enumerate().skip(1) {
            let inputs: Vec<&Var<T>> = node
                .inputs
                .iter()
                .map(|&j| values[j].as_ref().expect("topological order"))
                .collect();
            let y = match &node.op {
                NodeOp::Input => inputs[0].clone(),
                NodeOp::Layer(l) => l.forward(tape, inputs[0])?,
                NodeOp::Upsample => tape.upsample_nearest(inputs[0], 2)?,
                NodeOp::Concat => tape.concat(&inputs)?,
            };
            values[i] = Some(y);
        }
        Ok(self
            .outputs
            .iter()
            .map(|&o| values[o].clone().expect("output computed"))
            .collect())
    }

    /// Eval-mode forward without recording.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::inference();
        let x = tape.constant(image.clone());
        Ok(self
            .forward(&mut tape, &x)?
            .into_iter()
            .map(|v| v.value().clone())
            .collect())
    }

    fn shapes(&self, input: Shape) -> Vec<Shape> {
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let first = node.inputs.first().map_or(input, |&i| shapes[i]);
            shapes.push(match &node.op {
                NodeOp::Input => input,
                NodeOp::Layer(l) => l.out_shape(first),
                NodeOp::Upsample => Shape::new(first.n, first.c, first.h * 2, first.w * 2),
                NodeOp::Concat => Shape {
                    c: node.inputs.iter().map(|&i| shapes[i].c).sum(),
                    ..first
                },
            });
        }
        shapes
    }

    /// Head output shapes for `input`.
    pub fn output_shapes(&self, input: Shape) -> Vec<Shape> {
        let shapes = self.shapes(input);
        self.outputs.iter().map(|&o| shapes[o]).collect()
    }

    /// One row per parameterised layer, for the given input shape.
    pub fn summary(&self, input: Shape) -> Vec<LayerSummary> {
        let shapes = self.shapes(input);
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, node)| match &node.op {
                NodeOp::Layer(l) => Some(LayerSummary {
                    name: node.name.clone(),
                    kind: l.kind(),
                    out_shape: shapes[i],
                    params: l.param_count(),
                    macs: l.macs(shapes[node.inputs[0]]),
                }),
                _ => None,
            })
            .collect()
    }

    /// Closed-form parameter total.
    pub fn count_params(&self) -> usize {
        self.layers().map(|(_, l)| l.param_count()).sum()
    }

    /// Parameter total by enumerating allocated buffers.
    pub fn allocated_params(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |p| total += p.len());
        total
    }

    /// Multiply-accumulates of one forward pass at `input`.
    pub fn count_macs(&self, input: Shape) -> u64 {
        self.summary(input).iter().map(|r| r.macs).sum()
    }

    /// Same network in another scalar type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut out = Model::<U>::build(&self.config, 0).expect("config already validated");
        let mut values = Vec::new();
        self.visit(&mut |p| values.push(p.value.cast::<U>()));
        let mut it = values.into_iter();
        out.visit_mut(&mut |p| *p.tensor_mut() = it.next().expect("identical topology"));
        out
    }

    /// Set every conv weight and bias to zero.
    pub fn zero_weights(&mut self) {
        self.visit_mut(&mut |p| {
            if p.name.ends_with(".weight") || p.name.ends_with(".bias") {
                p.tensor_mut().data_mut().fill(T::zero());
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_head_shapes() {
        let m = Model::<f32>::build(&ModelConfig::default(), 0).unwrap();
        assert_eq!(m.num_heads(), 2);
        assert_eq!(
            m.output_shapes(Shape::new(1, 3, 640, 640)),
            vec![Shape::new(1, 21, 40, 40), Shape::new(1, 21, 20, 20)]
        );
        assert_eq!(
            m.output_shapes(Shape::new(1, 3, 320, 320)),
            vec![Shape::new(1, 21, 20, 20), Shape::new(1, 21, 10, 10)]
        );
    }

    #[test]
    fn backbone_stage_resolutions() {
        let m = Model::<f32>::build(&ModelConfig::default(), 0).unwrap();
        let rows = m.summary(Shape::new(1, 3, 640, 640));
        let side = |name: &str| rows.iter().find(|r| r.name == name).unwrap().out_shape;
        assert_eq!(side("stage1"), Shape::new(1, 64, 160, 160));
        assert_eq!(side("stage2"), Shape::new(1, 128, 80, 80));
        assert_eq!(side("stage3"), Shape::new(1, 256, 40, 40));
        assert_eq!(side("stage4"), Shape::new(1, 512, 20, 20));
    }

    #[test]
    fn analytic_counts_match_buffers() {
        for cfg in [ModelConfig::default(), ModelConfig::dgsm_only(), ModelConfig::baseline_three_head()] {
            let m = Model::<f32>::build(&cfg, 0).unwrap();
            for (name, l) in m.layers() {
                assert_eq!(l.param_count(), l.allocated_params(), "{name}");
            }
            assert_eq!(m.count_params(), m.allocated_params());
        }
    }

    #[test]
    fn forward_matches_shape_inference() {
        let mut cfg = ModelConfig::default();
        cfg.input_size = [64, 96];
        let m = Model::<f32>::build(&cfg, 1).unwrap();
        let x = Tensor::from_fn(Shape::new(1, 3, 64, 96), |i| (i % 13) as f32 / 13.0);
        let outs = m.predict(&x).unwrap();
        let shapes: Vec<Shape> = outs.iter().map(Tensor::shape).collect();
        assert_eq!(shapes, m.output_shapes(x.shape()));
    }

    #[test]
    fn rejects_unaligned_input() {
        let m = Model::<f32>::build(&ModelConfig::default(), 0).unwrap();
        let x = Tensor::zeros(Shape::new(1, 3, 48, 64));
        assert!(m.predict(&x).is_err());
    }

    #[test]
    fn cast_round_trip_is_exact() {
        let m = Model::<f32>::build(&ModelConfig::default(), 3).unwrap();
        let back = m.cast::<f64>().cast::<f32>();
        let mut a = Vec::new();
        m.visit(&mut |p| a.push(p.value.clone()));
        let mut i = 0;
        back.visit(&mut |p| {
            assert!(p.value.bitwise_eq(&a[i]));
            i += 1;
        });
    }
}
