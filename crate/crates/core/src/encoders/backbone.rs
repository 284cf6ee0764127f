use lococontrast_nn::{Graph, ParamId, ParamSet, Scalar, Var};
use rand::Rng;

use super::{BackboneKind, ModelConfig};

#[derive(Clone, Debug)]
pub(crate) struct ConvLayer {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<F: Scalar, R: Rng>(
        params: &mut ParamSet<F>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        Self::scaled(params, rng, name, cin, cout, k, stride, 1.0)
    }

    #[allow(clippy::too_many_arguments)]
    fn scaled<F: Scalar, R: Rng>(
        params: &mut ParamSet<F>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
    ) -> Self {
        let w = params.push_he(
            format!("{name}.weight"),
            &[cout, cin, k, k],
            cin * k * k,
            rng,
        );
        if gain != 1.0 {
            let g = F::from_f64_lossy(gain);
            params
                .get_mut(w)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v *= g);
        }
        let b = params.push_zeros(format!("{name}.bias"), &[cout]);
        Self {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    pub(crate) fn apply<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LinearLayer {
    w: ParamId,
    b: ParamId,
}

impl LinearLayer {
    pub(crate) fn new<F: Scalar, R: Rng>(
        params: &mut ParamSet<F>,
        rng: &mut R,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Self {
        let w = params.push_he(format!("{name}.weight"), &[dout, din], din, rng);
        let b = params.push_zeros(format!("{name}.bias"), &[dout]);
        Self { w, b }
    }

    pub(crate) fn apply<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BasicBlock {
    conv1: ConvLayer,
    conv2: ConvLayer,
    shortcut: Option<ConvLayer>,
}

impl BasicBlock {
    fn new<F: Scalar, R: Rng>(
        params: &mut ParamSet<F>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let conv1 = ConvLayer::new(params, rng, &format!("{name}.conv1"), cin, cout, 3, stride);
        // Without normalization layers the residual branch starts small so
        // deep stacks stay near identity at init.
        let conv2 = ConvLayer::scaled(params, rng, &format!("{name}.conv2"), cout, cout, 3, 1, 0.1);
        let shortcut = (stride != 1 || cin != cout).then(|| {
            ConvLayer::new(
                params,
                rng,
                &format!("{name}.shortcut"),
                cin,
                cout,
                1,
                stride,
            )
        });
        Self {
            conv1,
            conv2,
            shortcut,
        }
    }

    fn apply<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let h = self.conv1.apply(g, x);
        let h = g.relu(h);
        let h = self.conv2.apply(g, h);
        let skip = match &self.shortcut {
            Some(s) => s.apply(g, x),
            None => x,
        };
        let sum = g.add(h, skip);
        g.relu(sum)
    }
}

/// Feature extractor exposing C3/C4/C5 at strides `base`, `2 base`, `4 base`.
#[derive(Clone, Debug)]
pub(crate) enum Backbone {
    Tiny {
        /// Stride-2 conv + ReLU stages; the last three emit C3, C4, C5.
        stages: Vec<ConvLayer>,
        channels: [usize; 3],
    },
    Resnet18 {
        stem: ConvLayer,
        layers: Vec<Vec<BasicBlock>>,
        channels: [usize; 3],
    },
}

impl Backbone {
    pub(crate) fn new<F: Scalar, R: Rng>(
        config: &ModelConfig,
        params: &mut ParamSet<F>,
        rng: &mut R,
        name: &str,
    ) -> Self {
        match config.backbone {
            BackboneKind::Tiny => {
                let w = config.tiny_width;
                let pre = config.base_stride.trailing_zeros() as usize;
                // Widths w, 1.5w, 2w, ... up to C3, then 3w and 4w.
                let mut widths: Vec<usize> = (0..pre).map(|i| w + i * w / 2).collect();
                widths.push(3 * w);
                widths.push(4 * w);
                let mut cin = 3;
                let stages = widths
                    .iter()
                    .enumerate()
                    .map(|(i, &cout)| {
                        let layer = ConvLayer::new(
                            params,
                            rng,
                            &format!("{name}.stage{i}"),
                            cin,
                            cout,
                            3,
                            2,
                        );
                        cin = cout;
                        layer
                    })
                    .collect::<Vec<_>>();
                let n = widths.len();
                let channels = [widths[n - 3], widths[n - 2], widths[n - 1]];
                Backbone::Tiny { stages, channels }
            }
            BackboneKind::Resnet18 => {
                let stem = ConvLayer::new(params, rng, &format!("{name}.stem"), 3, 64, 7, 2);
                let spec = [(64, 1), (128, 2), (256, 2), (512, 2)];
                let mut cin = 64;
                let layers = spec
                    .iter()
                    .enumerate()
                    .map(|(li, &(cout, stride))| {
                        let b0 = BasicBlock::new(
                            params,
                            rng,
                            &format!("{name}.layer{}.0", li + 1),
                            cin,
                            cout,
                            stride,
                        );
                        let b1 = BasicBlock::new(
                            params,
                            rng,
                            &format!("{name}.layer{}.1", li + 1),
                            cout,
                            cout,
                            1,
                        );
                        cin = cout;
                        vec![b0, b1]
                    })
                    .collect();
                Backbone::Resnet18 {
                    stem,
                    layers,
                    channels: [128, 256, 512],
                }
            }
        }
    }

    pub(crate) fn channels(&self) -> [usize; 3] {
        match self {
            Backbone::Tiny { channels, .. } | Backbone::Resnet18 { channels, .. } => *channels,
        }
    }

    pub(crate) fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> [Var; 3] {
        match self {
            Backbone::Tiny { stages, .. } => {
                let mut outs = Vec::with_capacity(stages.len());
                let mut h = x;
                for s in stages {
                    let y = s.apply(g, h);
                    h = g.relu(y);
                    outs.push(h);
                }
                let n = outs.len();
                [outs[n - 3], outs[n - 2], outs[n - 1]]
            }
            Backbone::Resnet18 { stem, layers, .. } => {
                let h = stem.apply(g, x);
                let h = g.relu(h);
                let mut h = g.max_pool3s2(h);
                let mut outs = Vec::with_capacity(4);
                for layer in layers {
                    for block in layer {
                        h = block.apply(g, h);
                    }
                    outs.push(h);
                }
                [outs[1], outs[2], outs[3]]
            }
        }
    }
}
