use serde::Serialize;

use super::config::{AblationConfig, ArchFamily, ReconstructionKind};
use crate::capsule::TransformParams;
use crate::error::{Error, Result};
use crate::nn::{ConvLayerParams, FcLayerParams, ParamStore};
use crate::scalar::Scalar;
use crate::seed::SeedScheme;

/// One entry of the human-readable layer chain. Shapes exclude the batch axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerDesc {
    pub name: String,
    pub op: String,
    pub out_shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamDesc {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Shapes and parameter layout of one architecture. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSpec {
    pub cfg: AblationConfig,
    pub convs: Vec<ConvLayerParams>,
    /// Input side followed by the side after every conv layer.
    pub sides: Vec<usize>,
    /// Classifier/representation dense layers, in application order.
    pub fcs: Vec<FcLayerParams>,
    pub transform: Option<TransformParams>,
    pub decoder: Vec<FcLayerParams>,
    pub layers: Vec<LayerDesc>,
}

pub const DECODER_HIDDEN: [usize; 2] = [512, 1024];

fn conv_name(i: usize) -> String {
    format!("conv{}", i + 1)
}

fn fc_name(i: usize) -> String {
    format!("fc{}", i + 1)
}

fn decoder_name(i: usize) -> String {
    format!("decoder{}", i + 1)
}

pub const TRANSFORM_NAME: &str = "transform";

pub fn build_model(cfg: &AblationConfig) -> Result<ModelSpec> {
    cfg.validate()?;
    let (k, w) = (cfg.kernel_size, cfg.channel_width);
    let convs = match cfg.arch_family {
        ArchFamily::ConvnetFc => vec![
            ConvLayerParams { in_channels: 1, out_channels: w, kernel: k, stride: 1 },
            ConvLayerParams { in_channels: w, out_channels: w, kernel: k, stride: 1 },
            ConvLayerParams { in_channels: w, out_channels: w / 2, kernel: k, stride: 1 },
        ],
        _ => vec![
            ConvLayerParams { in_channels: 1, out_channels: w, kernel: k, stride: 1 },
            ConvLayerParams { in_channels: w, out_channels: w, kernel: k, stride: 2 },
        ],
    };

    let mut layers = vec![LayerDesc { name: "input".into(), op: "image".into(), out_shape: vec![1, cfg.input_size, cfg.input_size] }];
    let mut sides = vec![cfg.input_size];
    for (i, c) in convs.iter().enumerate() {
        let side = c.output_side(*sides.last().unwrap()).ok_or_else(|| {
            Error::Config(format!(
                "kernel {} leaves no spatial extent after {} on a {}x{} input",
                k,
                conv_name(i),
                cfg.input_size,
                cfg.input_size
            ))
        })?;
        sides.push(side);
        layers.push(LayerDesc {
            name: conv_name(i),
            op: format!("Conv({}, {}, {}) + ReLU", c.out_channels, c.kernel, c.stride),
            out_shape: vec![c.out_channels, side, side],
        });
    }
    let last = *convs.last().unwrap();
    let side = *sides.last().unwrap();
    let flat = last.out_channels * side * side;
    let (n, rep) = (cfg.num_classes, cfg.representation_width());
    let mut fcs = Vec::new();
    let mut transform = None;
    let push = |layers: &mut Vec<LayerDesc>, name: String, op: String, out_shape: Vec<usize>| {
        layers.push(LayerDesc { name, op, out_shape });
    };

    match cfg.arch_family {
        ArchFamily::ConvnetFc => {
            let (f1, f2) = (cfg.fc_widths[0], cfg.fc_widths[1]);
            fcs = vec![
                FcLayerParams { inputs: flat, outputs: f1 },
                FcLayerParams { inputs: f1, outputs: f2 },
                FcLayerParams { inputs: f2, outputs: n },
            ];
            push(&mut layers, "flatten".into(), "Flatten".into(), vec![flat]);
            push(&mut layers, fc_name(0), format!("FC({f1}) + ReLU"), vec![f1]);
            push(&mut layers, fc_name(1), format!("FC({f2}) + ReLU"), vec![f2]);
            push(&mut layers, fc_name(2), format!("FC({n}) + Softmax"), vec![n]);
        }
        ArchFamily::ConvnetAvg => {
            fcs = vec![FcLayerParams { inputs: last.out_channels, outputs: n }];
            push(&mut layers, "pool".into(), "Global AvgPool".into(), vec![last.out_channels]);
            push(&mut layers, fc_name(0), format!("FC({n})"), vec![n]);
        }
        ArchFamily::ConvnetR | ArchFamily::ConvnetCr => {
            fcs.push(FcLayerParams { inputs: flat, outputs: rep });
            push(&mut layers, "flatten".into(), "Flatten".into(), vec![flat]);
            push(&mut layers, fc_name(0), format!("FC({rep})"), vec![rep]);
            if cfg.arch_family == ArchFamily::ConvnetR {
                fcs.push(FcLayerParams { inputs: rep, outputs: n });
                push(&mut layers, fc_name(1), format!("FC({n})"), vec![n]);
            } else {
                push(&mut layers, "groups".into(), format!("group sum {n}x{}", cfg.d_out), vec![n]);
            }
        }
        ArchFamily::ConvnetCrSf => {
            let m = flat / cfg.d_in;
            let sq = if cfg.squash_enabled { " + squash" } else { "" };
            fcs.push(FcLayerParams { inputs: flat, outputs: rep });
            push(&mut layers, "primary".into(), format!("primary capsules{sq}"), vec![m, cfg.d_in]);
            push(&mut layers, fc_name(0), format!("FC({rep})"), vec![rep]);
            push(&mut layers, "capsules".into(), format!("group {n}x{}{sq}", cfg.d_out), vec![n, cfg.d_out]);
        }
        ArchFamily::Capsnet => {
            let m = flat / cfg.d_in;
            let sq = if cfg.squash_enabled { " + squash" } else { "" };
            let t = TransformParams { num_primary: m, d_in: cfg.d_in, num_classes: n, d_out: cfg.d_out, shared: cfg.shared_transm };
            push(&mut layers, "primary".into(), format!("primary capsules{sq}"), vec![m, cfg.d_in]);
            push(
                &mut layers,
                TRANSFORM_NAME.into(),
                format!("votes ({} TransM)", if t.shared { "shared" } else { "non-shared" }),
                vec![m, n, cfg.d_out],
            );
            let route = match cfg.routing {
                super::RoutingKind::Dynamic => format!("dynamic routing x{}", cfg.routing_iterations),
                super::RoutingKind::None => "uniform vote average".to_string(),
            };
            push(&mut layers, "routing".into(), format!("{route}{sq}"), vec![n, cfg.d_out]);
            transform = Some(t);
        }
    }

    let decoder = if cfg.reconstruction == ReconstructionKind::None {
        Vec::new()
    } else {
        let out = cfg.input_size * cfg.input_size;
        let [h1, h2] = DECODER_HIDDEN;
        push(&mut layers, decoder_name(0), format!("FC({h1}) + ReLU"), vec![h1]);
        push(&mut layers, decoder_name(1), format!("FC({h2}) + ReLU"), vec![h2]);
        push(&mut layers, decoder_name(2), format!("FC({out}) + Sigmoid"), vec![out]);
        vec![
            FcLayerParams { inputs: rep, outputs: h1 },
            FcLayerParams { inputs: h1, outputs: h2 },
            FcLayerParams { inputs: h2, outputs: out },
        ]
    };

    Ok(ModelSpec { cfg: cfg.clone(), convs, sides, fcs, transform, decoder, layers })
}

impl ModelSpec {
    pub(crate) fn conv_name(i: usize) -> String {
        conv_name(i)
    }

    pub(crate) fn fc_name(i: usize) -> String {
        fc_name(i)
    }

    pub(crate) fn decoder_name(i: usize) -> String {
        decoder_name(i)
    }

    /// Every parameter tensor, in registry order.
    pub fn param_descs(&self) -> Vec<ParamDesc> {
        let mut out = Vec::new();
        let dense = |name: String, fc: &FcLayerParams, out: &mut Vec<ParamDesc>| {
            out.push(ParamDesc { name: format!("{name}.weight"), shape: vec![fc.inputs, fc.outputs] });
            out.push(ParamDesc { name: format!("{name}.bias"), shape: vec![fc.outputs] });
        };
        for (i, c) in self.convs.iter().enumerate() {
            out.push(ParamDesc { name: format!("{}.weight", conv_name(i)), shape: c.weight_shape().to_vec() });
            out.push(ParamDesc { name: format!("{}.bias", conv_name(i)), shape: vec![c.out_channels] });
        }
        if let Some(t) = &self.transform {
            out.push(ParamDesc { name: TRANSFORM_NAME.into(), shape: t.shape().to_vec() });
        }
        for (i, fc) in self.fcs.iter().enumerate() {
            dense(fc_name(i), fc, &mut out);
        }
        for (i, fc) in self.decoder.iter().enumerate() {
            dense(decoder_name(i), fc, &mut out);
        }
        out
    }

    pub fn has_decoder(&self) -> bool {
        !self.decoder.is_empty()
    }

    pub fn init_params<T: Scalar>(&self, seeds: &SeedScheme) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        for (i, c) in self.convs.iter().enumerate() {
            c.init(&mut store, seeds, &conv_name(i))?;
        }
        if let Some(t) = &self.transform {
            t.init(&mut store, seeds, TRANSFORM_NAME)?;
        }
        for (i, fc) in self.fcs.iter().enumerate() {
            fc.init(&mut store, seeds, &fc_name(i))?;
        }
        for (i, fc) in self.decoder.iter().enumerate() {
            fc.init(&mut store, seeds, &decoder_name(i))?;
        }
        Ok(store)
    }
}

/// Exact number of trainable scalars, reconstruction head included.
pub fn count_params(spec: &ModelSpec) -> usize {
    spec.param_descs().iter().map(|p| p.shape.iter().product::<usize>()).sum()
}

/// `13475648 -> "13.5M"`, `595210 -> "0.60M"`: two decimals below 10M, one above.
pub fn human_count(n: usize) -> String {
    let m = n as f64 / 1e6;
    if m >= 10.0 {
        format!("{m:.1}M")
    } else {
        format!("{m:.2}M")
    }
}

/// Shrinks a ConvNet-FC's dense widths, keeping their ratio, until the
/// parameter count is as close as possible to `target`. Fails when the best
/// achievable count is more than 10% away.
pub fn fit_fc_widths(cfg: &AblationConfig, target: usize) -> Result<Vec<usize>> {
    if cfg.arch_family != ArchFamily::ConvnetFc {
        return Err(Error::Config("fc width fitting applies to convnet_fc only".into()));
    }
    let (r1, r2) = (cfg.fc_widths[0], cfg.fc_widths[1]);
    let mut best: Option<(usize, Vec<usize>)> = None;
    for f1 in 1..=r1 {
        let f2 = ((f1 * r2) as f64 / r1 as f64).round().max(1.0) as usize;
        let trial = AblationConfig { fc_widths: vec![f1, f2], ..cfg.clone() };
        let count = count_params(&build_model(&trial)?);
        let gap = count.abs_diff(target);
        if best.as_ref().is_none_or(|(g, _)| gap < *g) {
            best = Some((gap, vec![f1, f2]));
        }
    }
    let (gap, widths) = best.expect("at least one width tried");
    if gap as f64 > 0.1 * target as f64 {
        return Err(Error::Config(format!(
            "no fc widths within 10% of {target} parameters (closest {widths:?}, off by {gap})"
        )));
    }
    Ok(widths)
}

/// ConvNet-FC with kernel `k` whose dense layers are shrunk to match the
/// same-kernel CapsNet's parameter count.
pub fn convnet_fc_lk(k: usize, base: &AblationConfig) -> Result<AblationConfig> {
    let caps = AblationConfig { kernel_size: k, ..AblationConfig::preset("capsnet")? };
    let caps = AblationConfig { channel_width: base.channel_width, input_size: base.input_size, ..caps };
    let target = count_params(&build_model(&caps)?);
    let cfg = AblationConfig { kernel_size: k, ..base.clone() };
    let widths = fit_fc_widths(&cfg, target)?;
    Ok(AblationConfig { fc_widths: widths, ..cfg })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preset(name: &str) -> AblationConfig {
        AblationConfig::preset(name).unwrap()
    }

    #[test]
    fn capsnet_chain_and_primary_count() {
        let s = build_model(&preset("capsnet")).unwrap();
        assert_eq!(s.sides, vec![40, 32, 12]);
        assert_eq!(s.transform.unwrap().num_primary, 32 * 12 * 12);
        assert_eq!(s.decoder.last().unwrap().outputs, 1600);
    }

    #[test]
    fn convnet_avg_chain() {
        let s = build_model(&preset("convnet_avg")).unwrap();
        assert_eq!(s.sides, vec![40, 32, 12]);
        let ops: Vec<&str> = s.layers.iter().map(|l| l.op.as_str()).collect();
        assert_eq!(ops[3..], ["Global AvgPool", "FC(10)"]);
    }

    #[test]
    fn convnet_fc_layer_list() {
        let s = build_model(&preset("convnet_fc")).unwrap();
        let ops: Vec<&str> = s.layers.iter().skip(1).map(|l| l.op.as_str()).collect();
        assert_eq!(
            ops,
            [
                "Conv(256, 5, 1) + ReLU",
                "Conv(256, 5, 1) + ReLU",
                "Conv(128, 5, 1) + ReLU",
                "Flatten",
                "FC(328) + ReLU",
                "FC(192) + ReLU",
                "FC(10) + Softmax"
            ]
        );
    }

    #[test]
    fn registry_matches_count() {
        for name in ["capsnet", "aff_capsnet", "convnet_cr_sf", "convnet_r", "convnet_fc"] {
            let cfg = AblationConfig { channel_width: 16, fc_widths: vec![12, 7], ..preset(name) };
            let spec = build_model(&cfg).unwrap();
            let store = spec.init_params::<f32>(&SeedScheme::new(0)).unwrap();
            assert_eq!(store.num_elements(), count_params(&spec), "{name}");
            let names: Vec<String> = spec.param_descs().into_iter().map(|p| p.name).collect();
            assert_eq!(store.names(), names.as_slice());
        }
    }

    #[test]
    fn degenerate_kernel_rejected() {
        let cfg = AblationConfig { input_size: 12, kernel_size: 11, ..preset("capsnet") };
        assert!(matches!(build_model(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn cr_and_cr_sf_counts_agree() {
        let cr = count_params(&build_model(&preset("convnet_cr")).unwrap());
        let sf = count_params(&build_model(&preset("convnet_cr_sf")).unwrap());
        assert_eq!(cr, sf);
    }

    #[test]
    fn human_rendering() {
        assert_eq!(human_count(13_475_648), "13.5M");
        assert_eq!(human_count(595_210), "0.60M");
        assert_eq!(human_count(7_963_914), "7.96M");
    }
}
