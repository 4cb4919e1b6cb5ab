use std::path::Path;

use super::config::ModelConfig;
use super::report::{LayerReport, LayerRow};
use crate::autodiff::{Padding, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{
    glorot_uniform, serialize, Activation, AvgPool2d, BatchNorm, Conv2d, Dense, Forward, Layer, LayerNorm, Mode,
    ParamStore, SeparableConv2d,
};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug)]
pub struct NamedLayer {
    pub block: &'static str,
    pub name: &'static str,
    pub layer: Layer,
}

/// The assembled network: two convolutional branches whose feature maps
/// are concatenated and passed through a shared trunk.
#[derive(Clone, Debug)]
pub struct AbsoluteNet<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    branches: Vec<Vec<NamedLayer>>,
    trunk: Vec<NamedLayer>,
}

struct Builder<'a, T> {
    params: &'a mut ParamStore<T>,
    rng: &'a mut Rng,
}

impl<T: Element> Builder<'_, T> {
    fn conv(&mut self, prefix: &str, kh: usize, kw: usize, cin: usize, cout: usize) -> Result<Layer> {
        let w = glorot_uniform(&[kh, kw, cin, cout], kh * kw * cin, kh * kw * cout, self.rng)?;
        Ok(Layer::Conv2d(Conv2d {
            kernel: self.params.add(format!("{prefix}.kernel"), w, true),
            kh,
            kw,
            cin,
            cout,
            padding: Padding::Valid,
        }))
    }

    fn separable(&mut self, prefix: &str, kw: usize, cin: usize, cout: usize) -> Result<Layer> {
        let d = glorot_uniform(&[1, kw, cin], kw * cin, kw, self.rng)?;
        let p = glorot_uniform(&[cin, cout], cin, cout, self.rng)?;
        Ok(Layer::SeparableConv2d(SeparableConv2d {
            depthwise: self.params.add(format!("{prefix}.depthwise"), d, true),
            pointwise: self.params.add(format!("{prefix}.pointwise"), p, true),
            kh: 1,
            kw,
            cin,
            cout,
            padding: Padding::Same,
        }))
    }

    fn layer_norm(&mut self, prefix: &str, features: usize, eps: f64) -> Result<Layer> {
        Ok(Layer::LayerNorm(LayerNorm {
            gamma: self
                .params
                .add(format!("{prefix}.gamma"), Tensor::ones(vec![features])?, true),
            beta: self
                .params
                .add(format!("{prefix}.beta"), Tensor::zeros(vec![features])?, true),
            features,
            eps,
        }))
    }

    fn batch_norm(&mut self, prefix: &str, features: usize, config: &ModelConfig) -> Result<Layer> {
        let p = &mut *self.params;
        Ok(Layer::BatchNorm(BatchNorm {
            gamma: p.add(format!("{prefix}.gamma"), Tensor::ones(vec![features])?, true),
            beta: p.add(format!("{prefix}.beta"), Tensor::zeros(vec![features])?, true),
            moving_mean: p.add(format!("{prefix}.moving_mean"), Tensor::zeros(vec![features])?, false),
            moving_var: p.add(format!("{prefix}.moving_var"), Tensor::ones(vec![features])?, false),
            features,
            momentum: config.bn_momentum,
            eps: config.norm_eps,
        }))
    }

    fn dense(&mut self, prefix: &str, fin: usize, fout: usize, activation: Option<Activation>) -> Result<Layer> {
        let w = glorot_uniform(&[fin, fout], fin, fout, self.rng)?;
        Ok(Layer::Dense(Dense {
            weight: self.params.add(format!("{prefix}.weight"), w, true),
            bias: self
                .params
                .add(format!("{prefix}.bias"), Tensor::zeros(vec![fout])?, true),
            fin,
            fout,
            activation,
        }))
    }
}

fn named(block: &'static str, name: &'static str, layer: Layer) -> NamedLayer {
    NamedLayer { block, name, layer }
}

fn propagate(layers: &[NamedLayer], mut shape: Vec<usize>) -> Result<Vec<usize>> {
    for l in layers {
        shape = l
            .layer
            .output_shape(&shape)
            .map_err(|e| Error::config("model", format!("{} / {}: {e}", l.block, l.name)))?;
    }
    Ok(shape)
}

impl<T: Element> AbsoluteNet<T> {
    /// Builds the variant selected by `config` with Glorot-uniform weights,
    /// unit gains, zero offsets and moving statistics (0, 1).
    pub fn build(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut params = ParamStore::new();
        let mut b = Builder {
            params: &mut params,
            rng,
        };
        let input = vec![c.input_channels, c.input_samples, 1];

        let mut branches = Vec::new();
        if c.variant.has_spatial_temporal() {
            const B: &str = "Spatial-Temporal";
            branches.push(vec![
                named(
                    B,
                    "Spatial Conv2D",
                    b.conv("st.spatial_conv", c.spatial_kernel, 1, 1, c.st_spatial_filters)?,
                ),
                named(
                    B,
                    "Layer Normalization",
                    b.layer_norm("st.norm1", c.st_spatial_filters, c.norm_eps)?,
                ),
                named(B, "Squared Activation", Layer::Activation(Activation::Square)),
                named(
                    B,
                    "Temporal Conv2D",
                    b.conv(
                        "st.temporal_conv",
                        1,
                        c.temporal_kernel,
                        c.st_spatial_filters,
                        c.st_temporal_filters,
                    )?,
                ),
                named(
                    B,
                    "Layer Normalization",
                    b.layer_norm("st.norm2", c.st_temporal_filters, c.norm_eps)?,
                ),
                named(B, "Absolute Activation", Layer::Activation(Activation::Abs)),
            ]);
        }
        if c.variant.has_temporal_spatial() {
            const B: &str = "Temporal-Spatial";
            branches.push(vec![
                named(
                    B,
                    "Temporal Conv2D",
                    b.conv("ts.temporal_conv", 1, c.temporal_kernel, 1, c.ts_temporal_filters)?,
                ),
                named(
                    B,
                    "Layer Normalization",
                    b.layer_norm("ts.norm1", c.ts_temporal_filters, c.norm_eps)?,
                ),
                named(B, "Squared Activation", Layer::Activation(Activation::Square)),
                named(
                    B,
                    "Spatial Conv2D",
                    b.conv(
                        "ts.spatial_conv",
                        c.spatial_kernel,
                        1,
                        c.ts_temporal_filters,
                        c.ts_spatial_filters,
                    )?,
                ),
                named(
                    B,
                    "Layer Normalization",
                    b.layer_norm("ts.norm2", c.ts_spatial_filters, c.norm_eps)?,
                ),
                named(B, "Absolute Activation", Layer::Activation(Activation::Abs)),
            ]);
        }

        let outs = branches
            .iter()
            .map(|layers| propagate(layers, input.clone()))
            .collect::<Result<Vec<_>>>()?;
        if outs.windows(2).any(|w| w[0][..2] != w[1][..2]) {
            return Err(Error::config(
                "model",
                format!("branch outputs {outs:?} cannot be concatenated"),
            ));
        }
        let width: usize = outs.iter().map(|s| s[2]).sum();
        let mut shape = vec![outs[0][0], outs[0][1], width];

        let mut trunk = vec![named(
            "Concatenation",
            "Batch Normalization",
            b.batch_norm("concat.norm", width, c)?,
        )];
        let mut features = width;
        if c.variant.has_fusion1() {
            const B: &str = "Fusion Block 1";
            trunk.push(named(
                B,
                "Separable Conv2D",
                b.separable("fusion1.separable", c.separable_kernel, width, c.separable_filters)?,
            ));
            trunk.push(named(
                B,
                "Layer Normalization",
                b.layer_norm("fusion1.norm", c.separable_filters, c.norm_eps)?,
            ));
            trunk.push(named(B, "Absolute Activation", Layer::Activation(Activation::Abs)));
            features = c.separable_filters;
        }
        if c.variant.has_fusion2() {
            const B: &str = "Fusion Block 2";
            trunk.push(named(
                B,
                "Average Pooling 2D",
                Layer::AvgPool2d(AvgPool2d {
                    pool: (1, c.pool_size),
                    stride: (1, c.pool_stride),
                }),
            ));
            trunk.push(named(
                B,
                "Logarithmic Activation",
                Layer::Activation(Activation::LogAbs { eps: c.log_eps }),
            ));
            trunk.push(named(B, "Dropout", Layer::Dropout { rate: c.dropout }));
        }
        const H: &str = "Classification Head";
        trunk.push(named(
            H,
            "Dense (Absolute Activation)",
            b.dense("head.pointwise", features, c.head_units, Some(Activation::Abs))?,
        ));
        trunk.push(named(H, "Flatten", Layer::Flatten));
        shape = propagate(&trunk, shape)?;
        let flat = shape[0];
        trunk.push(named(
            H,
            "Dense (Softmax)",
            b.dense("head.output", flat, c.classes, None)?,
        ));

        Ok(AbsoluteNet {
            config: config.clone(),
            params,
            branches,
            trunk,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn layers(&self) -> impl Iterator<Item = &NamedLayer> {
        self.branches.iter().flatten().chain(&self.trunk)
    }

    pub fn cast<U: Element>(&self) -> AbsoluteNet<U> {
        AbsoluteNet {
            config: self.config.clone(),
            params: self.params.cast(),
            branches: self.branches.clone(),
            trunk: self.trunk.clone(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        let ok = match shape {
            [_, h, w] | [_, h, w, 1] => *h == c.input_channels && *w == c.input_samples,
            _ => false,
        };
        if !ok {
            return Err(Error::shape(
                "forward",
                format!(
                    "expected [N, {}, {}, 1], got {shape:?}",
                    c.input_channels, c.input_samples
                ),
            ));
        }
        Ok(())
    }

    /// Records the network up to the pre-softmax scores `[N, classes]`.
    pub fn logits(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let shape = f.tape.shape(x).to_vec();
        self.check_input(&shape)?;
        let x = if shape.len() == 3 {
            f.tape.reshape(x, &[shape[0], shape[1], shape[2], 1])?
        } else {
            x
        };
        let mut outs = Vec::with_capacity(self.branches.len());
        for branch in &self.branches {
            let mut h = x;
            for l in branch {
                h = l.layer.forward(f, h)?;
            }
            outs.push(h);
        }
        let mut h = if outs.len() == 1 {
            outs[0]
        } else {
            f.tape.concat(&outs, 3)?
        };
        for l in &self.trunk {
            h = l.layer.forward(f, h)?;
        }
        Ok(h)
    }

    /// Class probabilities for a batch `[N, ch, t]` or `[N, ch, t, 1]`.
    /// Train-mode side effects (moving statistics) are discarded.
    pub fn forward(&self, batch: &Tensor<T>, mode: Mode, rng: Option<&mut Rng>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let mut f = Forward::new(&mut tape, &self.params, mode, rng);
        let logits = self.logits(&mut f, x)?;
        drop(f);
        let p = tape.softmax(logits);
        Ok(tape.value(p).clone())
    }

    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(batch, Mode::Infer, None)
    }

    /// One row per layer (plus the input), output shapes per sample.
    pub fn report(&self) -> LayerReport {
        let c = &self.config;
        let input = vec![c.input_channels, c.input_samples, 1];
        let mut rows = vec![LayerRow {
            block: "Input".into(),
            layer: "Concatenated HbO2 + HbR".into(),
            output: input.clone(),
            params: 0,
            trainable: 0,
        }];
        let row_for = |l: &NamedLayer, shape: &mut Vec<usize>| {
            *shape = l.layer.output_shape(shape).expect("validated at build");
            let ids = l.layer.params();
            let count = |pred: &dyn Fn(bool) -> bool| {
                ids.iter()
                    .filter(|&&id| pred(self.params.get(id).trainable))
                    .map(|&id| self.params.value(id).len())
                    .sum::<usize>()
            };
            LayerRow {
                block: l.block.into(),
                layer: l.name.into(),
                output: shape.clone(),
                params: count(&|_| true),
                trainable: count(&|t| t),
            }
        };
        let mut widths = 0;
        let mut branch_shape = Vec::new();
        let mut branch_rows = Vec::new();
        for branch in &self.branches {
            let mut shape = input.clone();
            for l in branch {
                branch_rows.push(row_for(l, &mut shape));
            }
            widths += shape[2];
            branch_shape = shape;
        }
        let mut shape = vec![branch_shape[0], branch_shape[1], widths];
        let concat = LayerRow {
            block: "Concatenation".into(),
            layer: "Concatenation".into(),
            output: shape.clone(),
            params: 0,
            trainable: 0,
        };
        let trunk_rows: Vec<LayerRow> = self.trunk.iter().map(|l| row_for(l, &mut shape)).collect();
        rows.extend(branch_rows);
        rows.push(concat);
        rows.extend(trunk_rows);
        LayerReport::new(self.config.variant, rows)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        serialize::save(&self.params, path)
    }

    /// Replaces all parameters with those stored at `path`.
    pub fn load_params(&mut self, path: &Path) -> Result<()> {
        let entries = serialize::load(path)?;
        self.params.assign(entries)
    }
}
