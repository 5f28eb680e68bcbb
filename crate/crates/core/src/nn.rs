//! Building blocks shared by the teacher and student backbones: convolution
//! layers, batch norm, depthwise-separable convolution, squeeze-excitation,
//! and the MBConv inverted-residual block.

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore, Run};
use crate::tape::TensorId;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Plain 2-D convolution with 'same' padding.
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
}

impl Conv2dLayer {
    pub fn new(store: &mut ParamStore, name: &str, ci: usize, co: usize, k: usize, stride: usize, bias: bool) -> Self {
        let w = store.add_param(&format!("{name}.w"), vec![co, ci, k, k], Init::HeUniform { fan_in: ci * k * k });
        let b = bias.then(|| store.add_param(&format!("{name}.b"), vec![co], Init::Zeros));
        Conv2dLayer { w, b, stride }
    }

    /// Zero-initialized variant for final prediction layers.
    pub fn new_zero(store: &mut ParamStore, name: &str, ci: usize, co: usize, k: usize, stride: usize) -> Self {
        let w = store.add_param(&format!("{name}.w"), vec![co, ci, k, k], Init::Zeros);
        let b = Some(store.add_param(&format!("{name}.b"), vec![co], Init::Zeros));
        Conv2dLayer { w, b, stride }
    }

    pub fn forward(&self, run: &mut Run, x: TensorId) -> Result<TensorId> {
        let w = run.p(self.w)?;
        let b = match self.b {
            Some(id) => Some(run.p(id)?),
            None => None,
        };
        run.tape.conv2d(x, w, b, self.stride)
    }
}

/// Batch normalization with running statistics.
///
/// Training mode normalizes by batch statistics and folds them into the
/// running averages with momentum 0.1; eval mode uses the stored averages.
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        BatchNorm {
            gamma: store.add_param(&format!("{name}.gamma"), vec![c], Init::Ones),
            beta: store.add_param(&format!("{name}.beta"), vec![c], Init::Zeros),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), vec![c], 0.0),
            running_var: store.add_buffer(&format!("{name}.running_var"), vec![c], 1.0),
        }
    }

    pub fn forward(&self, run: &mut Run, x: TensorId) -> Result<TensorId> {
        let gamma = run.p(self.gamma)?;
        let beta = run.p(self.beta)?;
        if run.training && !run.frozen {
            let (out, mean, var) = run.tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
            run.update_running(self.running_mean, BN_MOMENTUM, &mean);
            run.update_running(self.running_var, BN_MOMENTUM, &var);
            Ok(out)
        } else {
            let rmean = run.buffer(self.running_mean).to_vec();
            let rvar = run.buffer(self.running_var).to_vec();
            run.tape.batch_norm_eval(x, gamma, beta, &rmean, &rvar, BN_EPS)
        }
    }
}

/// Fully connected layer on [n, in] inputs.
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: store.add_param(&format!("{name}.w"), vec![fan_in, fan_out], Init::HeUniform { fan_in }),
            b: store.add_param(&format!("{name}.b"), vec![fan_out], Init::Zeros),
        }
    }

    pub fn forward(&self, run: &mut Run, x: TensorId) -> Result<TensorId> {
        let w = run.p(self.w)?;
        let b = run.p(self.b)?;
        let y = run.tape.matmul(x, w)?;
        run.tape.add_row_bias(y, b)
    }
}

/// Squeeze-and-excitation: global average pool, two-layer MLP, sigmoid gate,
/// per-channel rescale.
pub struct SeBlock {
    pub reduce: Linear,
    pub expand: Linear,
    pub channels: usize,
    pub width: usize,
}

impl SeBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, width: usize) -> Result<Self> {
        if width < 1 || width > channels {
            return Err(Error::invalid(
                "se_block",
                format!("reduction width {width} must satisfy 1 <= width <= {channels}"),
            ));
        }
        Ok(SeBlock {
            reduce: Linear::new(store, &format!("{name}.reduce"), channels, width),
            expand: Linear::new(store, &format!("{name}.expand"), width, channels),
            channels,
            width,
        })
    }

    /// Standard reduction ratio of 4 (width floored at 1).
    pub fn with_ratio4(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Self::new(store, name, channels, (channels / 4).max(1))
    }

    pub fn forward(&self, run: &mut Run, x: TensorId) -> Result<TensorId> {
        let pooled = run.tape.global_avg_pool(x)?;
        let h = self.reduce.forward(run, pooled)?;
        let h = run.tape.relu(h)?;
        let h = self.expand.forward(run, h)?;
        let gate = run.tape.sigmoid(h)?;
        run.tape.mul_channel(x, gate)
    }
}

/// Depthwise-separable convolution: per-channel spatial conv followed by a
/// pointwise 1x1; channel mixing happens only in the pointwise stage.
pub struct DwsConv {
    pub dw: ParamId,
    pub pw: Conv2dLayer,
    pub stride: usize,
}

impl DwsConv {
    pub fn new(store: &mut ParamStore, name: &str, ci: usize, co: usize, k: usize, stride: usize) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::invalid("depthwise_separable_conv", format!("kernel size {k} must be odd")));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::invalid("depthwise_separable_conv", format!("stride {stride} must be 1 or 2")));
        }
        let dw = store.add_param(&format!("{name}.dw"), vec![ci, k, k], Init::HeUniform { fan_in: k * k });
        let pw = Conv2dLayer::new(store, &format!("{name}.pw"), ci, co, 1, 1, false);
        Ok(DwsConv { dw, pw, stride })
    }

    pub fn forward(&self, run: &mut Run, x: TensorId) -> Result<TensorId> {
        let dw = run.p(self.dw)?;
        let h = run.tape.dwconv2d(x, dw, self.stride)?;
        self.pw.forward(run, h)
    }
}

/// Parameter count of a depthwise-separable conv (no bias).
pub fn dws_param_count(ci: usize, co: usize, k: usize) -> usize {
    ci * k * k + ci * co
}

/// Parameter count of the equivalent dense conv (no bias).
pub fn dense_param_count(ci: usize, co: usize, k: usize) -> usize {
    co * ci * k * k
}

/// MBConv inverted residual: pointwise expand, depthwise conv, SE, pointwise
/// project, residual skip when stride is 1 and channels match. Hard-swish
/// activations throughout.
pub struct MbConv {
    pub expand: Option<(Conv2dLayer, BatchNorm)>,
    pub dw: ParamId,
    pub bn_dw: BatchNorm,
    pub se: SeBlock,
    pub project: Conv2dLayer,
    pub bn_proj: BatchNorm,
    pub stride: usize,
    pub cin: usize,
    pub cout: usize,
}

impl MbConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        expansion_ratio: usize,
        k: usize,
        stride: usize,
    ) -> Result<Self> {
        if expansion_ratio < 1 {
            return Err(Error::invalid("mbconv", format!("expansion ratio {expansion_ratio} must be >= 1")));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::invalid("mbconv", format!("stride {stride} must be 1 or 2")));
        }
        let mid = cin * expansion_ratio;
        let expand = (expansion_ratio > 1).then(|| {
            (
                Conv2dLayer::new(store, &format!("{name}.expand"), cin, mid, 1, 1, false),
                BatchNorm::new(store, &format!("{name}.bn_expand"), mid),
            )
        });
        let dw = store.add_param(&format!("{name}.dw"), vec![mid, k, k], Init::HeUniform { fan_in: k * k });
        let bn_dw = BatchNorm::new(store, &format!("{name}.bn_dw"), mid);
        let se = SeBlock::with_ratio4(store, &format!("{name}.se"), mid)?;
        let project = Conv2dLayer::new(store, &format!("{name}.project"), mid, cout, 1, 1, false);
        let bn_proj = BatchNorm::new(store, &format!("{name}.bn_project"), cout);
        Ok(MbConv { expand, dw, bn_dw, se, project, bn_proj, stride, cin, cout })
    }

    pub fn forward(&self, run: &mut Run, x: TensorId) -> Result<TensorId> {
        let mut h = x;
        if let Some((conv, bn)) = &self.expand {
            h = conv.forward(run, h)?;
            h = bn.forward(run, h)?;
            h = run.tape.hard_swish(h)?;
        }
        let dw = run.p(self.dw)?;
        h = run.tape.dwconv2d(h, dw, self.stride)?;
        h = self.bn_dw.forward(run, h)?;
        h = run.tape.hard_swish(h)?;
        h = self.se.forward(run, h)?;
        h = self.project.forward(run, h)?;
        h = self.bn_proj.forward(run, h)?;
        if self.stride == 1 && self.cin == self.cout {
            h = run.tape.add(h, x)?;
        }
        Ok(h)
    }
}
