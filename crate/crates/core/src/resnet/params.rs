//! Parameter and gradient containers for the residual classifier.
//!
//! A [`ParameterSet`] owns every layer's arrays in forward order; the key
//! set is a pure function of the network configuration, so two sets built
//! from the same configuration always agree on paths, shapes, and order.
//! A [`GradSet`] mirrors the learnable arrays one-to-one (running statistics
//! have no gradient) and doubles as the velocity store for the optimizer.

use std::fmt;

use crate::error::{contract, Error, Result};
use crate::resnet::network::NetworkConfig;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Address of one layer. `Display` renders the dotted form used in
/// checkpoints and diagnostics (`stem.conv`, `s2.b0.proj.norm`, `fc`);
/// [`LayerPath::parse`] inverts it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerPath {
    StemConv,
    StemNorm,
    /// `which` is 0 or 1: first or second convolution of the block.
    BlockConv { stage: u8, block: u8, which: u8 },
    BlockNorm { stage: u8, block: u8, which: u8 },
    ProjConv { stage: u8, block: u8 },
    ProjNorm { stage: u8, block: u8 },
    Fc,
}

impl fmt::Display for LayerPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerPath::StemConv => write!(f, "stem.conv"),
            LayerPath::StemNorm => write!(f, "stem.norm"),
            LayerPath::BlockConv {
                stage,
                block,
                which,
            } => write!(f, "s{stage}.b{block}.conv{which}"),
            LayerPath::BlockNorm {
                stage,
                block,
                which,
            } => write!(f, "s{stage}.b{block}.norm{which}"),
            LayerPath::ProjConv { stage, block } => write!(f, "s{stage}.b{block}.proj.conv"),
            LayerPath::ProjNorm { stage, block } => write!(f, "s{stage}.b{block}.proj.norm"),
            LayerPath::Fc => write!(f, "fc"),
        }
    }
}

impl LayerPath {
    pub fn parse(text: &str) -> Option<LayerPath> {
        match text {
            "stem.conv" => return Some(LayerPath::StemConv),
            "stem.norm" => return Some(LayerPath::StemNorm),
            "fc" => return Some(LayerPath::Fc),
            _ => {}
        }
        let mut parts = text.split('.');
        let stage = parse_index(parts.next()?, 's')?;
        let block = parse_index(parts.next()?, 'b')?;
        let leaf = parts.next()?;
        let path = match (leaf, parts.next()) {
            ("proj", Some("conv")) => LayerPath::ProjConv { stage, block },
            ("proj", Some("norm")) => LayerPath::ProjNorm { stage, block },
            ("conv0", None) => LayerPath::BlockConv {
                stage,
                block,
                which: 0,
            },
            ("conv1", None) => LayerPath::BlockConv {
                stage,
                block,
                which: 1,
            },
            ("norm0", None) => LayerPath::BlockNorm {
                stage,
                block,
                which: 0,
            },
            ("norm1", None) => LayerPath::BlockNorm {
                stage,
                block,
                which: 1,
            },
            _ => return None,
        };
        if parts.next().is_some() {
            return None;
        }
        Some(path)
    }

    /// True for the layers that count toward the weighted-layer total
    /// (convolutions and the classifier; shortcut projections and
    /// normalizations do not count).
    pub fn is_weighted(self) -> bool {
        matches!(
            self,
            LayerPath::StemConv | LayerPath::BlockConv { .. } | LayerPath::Fc
        )
    }
}

fn parse_index(part: &str, prefix: char) -> Option<u8> {
    let rest = part.strip_prefix(prefix)?;
    if rest.is_empty() || rest.len() > 3 || !rest.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    rest.parse().ok()
}

/// Arrays of one layer.
#[derive(Clone, Debug)]
pub enum LayerParams<S: Scalar> {
    Conv {
        /// `[Cout, Cin, K, K]`
        weights: Tensor<S>,
        stride: usize,
    },
    Norm {
        scale: Tensor<S>,
        shift: Tensor<S>,
        running_mean: Tensor<S>,
        running_var: Tensor<S>,
        momentum: f64,
    },
    Dense {
        /// `[Out, In]`
        weights: Tensor<S>,
        bias: Tensor<S>,
    },
}

impl<S: Scalar> LayerParams<S> {
    /// Learnable arrays in fixed order (running statistics excluded).
    fn learnable(&self) -> Vec<(&'static str, &Tensor<S>)> {
        match self {
            LayerParams::Conv { weights, .. } => vec![("weights", weights)],
            LayerParams::Norm { scale, shift, .. } => {
                vec![("scale", scale), ("shift", shift)]
            }
            LayerParams::Dense { weights, bias } => vec![("weights", weights), ("bias", bias)],
        }
    }

    fn learnable_mut(&mut self) -> Vec<&mut Tensor<S>> {
        match self {
            LayerParams::Conv { weights, .. } => vec![weights],
            LayerParams::Norm { scale, shift, .. } => vec![scale, shift],
            LayerParams::Dense { weights, bias } => vec![weights, bias],
        }
    }

    fn all_arrays(&self) -> Vec<&Tensor<S>> {
        match self {
            LayerParams::Conv { weights, .. } => vec![weights],
            LayerParams::Norm {
                scale,
                shift,
                running_mean,
                running_var,
                ..
            } => vec![scale, shift, running_mean, running_var],
            LayerParams::Dense { weights, bias } => vec![weights, bias],
        }
    }
}

/// All parameters of one network, in forward order.
///
/// `version` counts mutations of the learnable arrays; a training-mode
/// forward snapshots it into its cache so a backward pass against a
/// parameter set that has since been updated is rejected instead of
/// silently producing gradients for the wrong weights.
#[derive(Clone, Debug)]
pub struct ParameterSet<S: Scalar> {
    config: NetworkConfig,
    entries: Vec<(LayerPath, LayerParams<S>)>,
    version: u64,
}

impl<S: Scalar> ParameterSet<S> {
    pub(crate) fn from_entries(
        config: NetworkConfig,
        entries: Vec<(LayerPath, LayerParams<S>)>,
    ) -> Self {
        ParameterSet {
            config,
            entries,
            version: 0,
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn entries(&self) -> &[(LayerPath, LayerParams<S>)] {
        &self.entries
    }

    pub fn get(&self, path: LayerPath) -> Option<&LayerParams<S>> {
        self.entries
            .iter()
            .find(|(p, _)| *p == path)
            .map(|(_, l)| l)
    }

    /// Index-addressed access for the forward/backward walk; checks the
    /// entry really is the expected layer so the walk and the builder can
    /// never drift apart silently.
    pub(crate) fn at(&self, index: usize, expect: LayerPath) -> Result<&LayerParams<S>> {
        let (path, layer) = self
            .entries
            .get(index)
            .ok_or_else(|| Error::Contract(format!("no layer entry at index {index}")))?;
        contract!(
            *path == expect,
            "layer entry {index} is {path}, expected {expect}"
        );
        Ok(layer)
    }

    pub(crate) fn at_mut(&mut self, index: usize, expect: LayerPath) -> Result<&mut LayerParams<S>> {
        let (path, layer) = self
            .entries
            .get_mut(index)
            .ok_or_else(|| Error::Contract(format!("no layer entry at index {index}")))?;
        contract!(
            *path == expect,
            "layer entry {index} is {path}, expected {expect}"
        );
        Ok(layer)
    }

    /// Mechanical weighted-layer count over the stored entries.
    pub fn weighted_layer_count(&self) -> usize {
        self.entries.iter().filter(|(p, _)| p.is_weighted()).count()
    }

    /// Learnable arrays in fixed order, named like `s1.b0.norm1.scale`.
    pub fn named_learnables(&self) -> Vec<(String, &Tensor<S>)> {
        self.entries
            .iter()
            .flat_map(|(path, layer)| {
                layer
                    .learnable()
                    .into_iter()
                    .map(move |(role, t)| (format!("{path}.{role}"), t))
            })
            .collect()
    }

    /// Mutable learnable arrays in the same order as
    /// [`ParameterSet::named_learnables`]. Bumps the version.
    pub fn learnables_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.version += 1;
        self.entries
            .iter_mut()
            .flat_map(|(_, layer)| layer.learnable_mut())
            .collect()
    }

    /// Every array must be finite after every update; a NaN or infinity
    /// anywhere means training has diverged and must stop.
    pub fn assert_finite(&self) -> Result<()> {
        for (path, layer) in &self.entries {
            for t in layer.all_arrays() {
                if !t.all_finite() {
                    return Err(Error::Data(format!(
                        "non-finite value in parameter array {path}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Gradient (or velocity) arrays mirroring a parameter set's learnables.
#[derive(Clone, Debug)]
pub struct GradSet<S: Scalar> {
    entries: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> GradSet<S> {
    /// Zero arrays shaped like the learnables of `params`, in the same
    /// order.
    pub fn zeros_like(params: &ParameterSet<S>) -> Self {
        let entries = params
            .named_learnables()
            .into_iter()
            .map(|(name, t)| {
                (
                    name,
                    Tensor::zeros(t.shape().to_vec()).expect("shape already validated"),
                )
            })
            .collect();
        GradSet { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, Tensor<S>)] {
        &self.entries
    }

    pub fn arrays(&self) -> impl Iterator<Item = &Tensor<S>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn arrays_mut(&mut self) -> impl Iterator<Item = &mut Tensor<S>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Stores `grad` for the learnable `name`; the array must exist and the
    /// shape must match.
    pub(crate) fn set(&mut self, name: &str, grad: Tensor<S>) -> Result<()> {
        let slot = self
            .entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Contract(format!("no learnable named {name}")))?;
        contract!(
            slot.1.shape() == grad.shape(),
            "gradient for {name} has shape {:?}, parameter has {:?}",
            grad.shape(),
            slot.1.shape()
        );
        slot.1 = grad;
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.arrays()
            .flat_map(|t| t.data().iter())
            .map(|v| v.as_f64().abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_display_parse_roundtrip() {
        let paths = [
            LayerPath::StemConv,
            LayerPath::StemNorm,
            LayerPath::BlockConv {
                stage: 1,
                block: 0,
                which: 0,
            },
            LayerPath::BlockNorm {
                stage: 3,
                block: 8,
                which: 1,
            },
            LayerPath::ProjConv { stage: 2, block: 0 },
            LayerPath::ProjNorm { stage: 3, block: 0 },
            LayerPath::Fc,
        ];
        for p in paths {
            let text = p.to_string();
            assert_eq!(LayerPath::parse(&text), Some(p), "{text}");
        }
    }

    #[test]
    fn parse_rejects_malformed_paths() {
        for text in [
            "", "stem", "stem.conv.x", "s1.b0", "s1.b0.conv2", "s.b0.conv0", "sx.b0.conv0",
            "s1.b0.proj", "s1.b0.proj.weights", "fc.bias", "s1.b0.conv0.extra", "s01x.b0.conv0",
        ] {
            assert_eq!(LayerPath::parse(text), None, "{text:?}");
        }
    }

    #[test]
    fn weighted_flag_excludes_norms_and_projections() {
        assert!(LayerPath::StemConv.is_weighted());
        assert!(LayerPath::Fc.is_weighted());
        assert!(LayerPath::BlockConv {
            stage: 1,
            block: 0,
            which: 1
        }
        .is_weighted());
        assert!(!LayerPath::StemNorm.is_weighted());
        assert!(!LayerPath::ProjConv { stage: 2, block: 0 }.is_weighted());
        assert!(!LayerPath::ProjNorm { stage: 2, block: 0 }.is_weighted());
        assert!(!LayerPath::BlockNorm {
            stage: 1,
            block: 0,
            which: 0
        }
        .is_weighted());
    }
}
