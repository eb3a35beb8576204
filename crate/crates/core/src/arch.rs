//! Declarative layer tables for the generator and discriminator, shape
//! inference, analytic parameter counting and a plain-text architecture
//! format in row notation such as `CONV-(N64, K7x7, S1, P3), IN, ReLU`.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Negative slope of every leaky ReLU in the discriminator.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    TransposedConv,
    /// `x + IN(conv(relu(IN(conv(x)))))`, both convs sharing the row's
    /// geometry.
    ResidualBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Instance,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Tanh,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub norm: Norm,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn conv(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kind: LayerKind::Conv,
            out_channels,
            kernel: (kernel, kernel),
            stride,
            padding,
            norm: Norm::None,
            activation: Activation::None,
        }
    }

    pub fn deconv(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kind: LayerKind::TransposedConv,
            ..Self::conv(out_channels, kernel, stride, padding)
        }
    }

    pub fn residual(channels: usize, kernel: usize, padding: usize) -> Self {
        Self {
            kind: LayerKind::ResidualBlock,
            norm: Norm::Instance,
            activation: Activation::Relu,
            ..Self::conv(channels, kernel, 1, padding)
        }
    }

    pub fn with_norm(mut self, norm: Norm) -> Self {
        self.norm = norm;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    /// Trainable parameters when fed `in_channels` channels: weights,
    /// biases and instance-norm scale/shift.
    pub fn param_count(&self, in_channels: usize) -> u64 {
        let (cin, cout) = (in_channels as u64, self.out_channels as u64);
        let k = (self.kernel.0 * self.kernel.1) as u64;
        let norm = if self.norm == Norm::Instance { 2 * cout } else { 0 };
        let conv = cin * cout * k + cout;
        match self.kind {
            LayerKind::Conv | LayerKind::TransposedConv => conv + norm,
            LayerKind::ResidualBlock => 2 * (conv + norm),
        }
    }

    /// Spatial extent after this layer, or `None` when it collapses.
    pub fn output_extent(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let conv = |n: usize, k: usize| {
            let padded = n + 2 * self.padding;
            (padded >= k).then(|| (padded - k) / self.stride + 1)
        };
        let deconv = |n: usize, k: usize| ((n - 1) * self.stride + k).checked_sub(2 * self.padding);
        let out = match self.kind {
            LayerKind::Conv => (conv(h, self.kernel.0)?, conv(w, self.kernel.1)?),
            LayerKind::TransposedConv => (deconv(h, self.kernel.0)?, deconv(w, self.kernel.1)?),
            LayerKind::ResidualBlock => {
                let once = (conv(h, self.kernel.0)?, conv(w, self.kernel.1)?);
                (conv(once.0, self.kernel.0)?, conv(once.1, self.kernel.1)?)
            }
        };
        (out.0 >= 1 && out.1 >= 1).then_some(out)
    }

    fn check(&self) -> Result<()> {
        if self.out_channels == 0 || self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride == 0 {
            return Err(Error::Spec(format!("{self}: N, K and S must be at least 1")));
        }
        if self.kind == LayerKind::ResidualBlock {
            if self.stride != 1 || self.kernel.0 != 2 * self.padding + 1 || self.kernel.1 != 2 * self.padding + 1 {
                return Err(Error::Spec(format!("{self}: residual blocks must preserve spatial size")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (prefix, op) = match self.kind {
            LayerKind::Conv => ("", "CONV"),
            LayerKind::TransposedConv => ("", "DECONV"),
            LayerKind::ResidualBlock => ("Residual Block: ", "CONV"),
        };
        write!(
            f,
            "{prefix}{op}-(N{}, K{}x{}, S{}, P{})",
            self.out_channels, self.kernel.0, self.kernel.1, self.stride, self.padding
        )?;
        if self.norm == Norm::Instance {
            write!(f, ", IN")?;
        }
        match self.activation {
            Activation::Relu => write!(f, ", ReLU"),
            Activation::LeakyRelu => write!(f, ", Leaky ReLU"),
            Activation::Tanh => write!(f, ", Tanh"),
            Activation::None => Ok(()),
        }
    }
}

/// Real/fake and domain-classification heads reading the last hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Heads {
    pub src: LayerSpec,
    pub cls: LayerSpec,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
    pub heads: Option<Heads>,
}

fn scaled(base: usize, width: f64) -> usize {
    ((base as f64 * width).round() as usize).max(1)
}

fn check_width(width: f64) -> Result<()> {
    if !(width.is_finite() && width > 0.0) {
        return Err(Error::Spec(format!("width multiplier must be positive, got {width}")));
    }
    Ok(())
}

/// Number of stride-2 layers in the discriminator for an `h × w` input:
/// `⌈log2(min(h, w))⌉ − 1`, at most 6 (the 128 × 128 table).
pub fn default_discriminator_depth(h: usize, w: usize) -> usize {
    let m = h.min(w).max(1);
    let ceil_log2 = usize::BITS as usize - (m - 1).leading_zeros() as usize;
    ceil_log2.saturating_sub(1).clamp(1, 6)
}

impl NetworkSpec {
    pub fn new(name: impl Into<String>, input_channels: usize, layers: Vec<LayerSpec>, heads: Option<Heads>) -> Result<Self> {
        let spec = Self {
            name: name.into(),
            input_channels,
            layers,
            heads,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The generator table: 7×7 stem, two stride-2 downsamplers, `n_res`
    /// residual blocks, two stride-2 transposed convs and a 7×7 tanh output.
    /// `width = 1, n_res = 6` is the full-size network.
    pub fn generator(label_dim: usize, width: f64, n_res: usize) -> Result<Self> {
        if label_dim == 0 {
            return Err(Error::Spec("generator needs a label dimension of at least 1".into()));
        }
        check_width(width)?;
        let (c1, c2, c3) = (scaled(64, width), scaled(128, width), scaled(256, width));
        let inr = |l: LayerSpec| l.with_norm(Norm::Instance).with_activation(Activation::Relu);
        let mut layers = vec![
            inr(LayerSpec::conv(c1, 7, 1, 3)),
            inr(LayerSpec::conv(c2, 4, 2, 1)),
            inr(LayerSpec::conv(c3, 4, 2, 1)),
        ];
        layers.extend((0..n_res).map(|_| LayerSpec::residual(c3, 3, 1)));
        layers.push(inr(LayerSpec::deconv(c2, 4, 2, 1)));
        layers.push(inr(LayerSpec::deconv(c1, 4, 2, 1)));
        layers.push(LayerSpec::conv(3, 7, 1, 3).with_activation(Activation::Tanh));
        Self::new("generator", 3 + label_dim, layers, None)
    }

    /// The PatchGAN discriminator table for `h × w` inputs. `depth` defaults
    /// to [`default_discriminator_depth`].
    pub fn discriminator(h: usize, w: usize, n_domains: usize, width: f64, depth: Option<usize>) -> Result<Self> {
        if n_domains == 0 {
            return Err(Error::Spec("discriminator needs at least one domain".into()));
        }
        check_width(width)?;
        let depth = depth.unwrap_or_else(|| default_discriminator_depth(h, w));
        if depth == 0 {
            return Err(Error::Spec("discriminator depth must be at least 1".into()));
        }
        let total = 1usize << depth;
        if h % total != 0 || w % total != 0 || h / total < 2 || w / total < 2 {
            return Err(Error::Spec(format!(
                "discriminator of depth {depth} needs h and w to be multiples of {total} giving at least a 2x2 patch grid; \
                 got {h}x{w}, minimal legal size is {0}x{0}",
                2 * total
            )));
        }
        let leaky = |l: LayerSpec| l.with_activation(Activation::LeakyRelu);
        let layers: Vec<_> = (0..depth).map(|i| leaky(LayerSpec::conv(scaled(64 << i, width), 4, 2, 1))).collect();
        let (gh, gw) = (h / total, w / total);
        let heads = Heads {
            src: LayerSpec::conv(1, 3, 1, 1),
            cls: LayerSpec {
                kernel: (gh, gw),
                ..LayerSpec::conv(n_domains, 1, 1, 0)
            },
        };
        Self::new("discriminator", 3, layers, Some(heads))
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::Spec(format!("{}: input channels must be positive", self.name)));
        }
        let mut c = self.input_channels;
        for (i, l) in self.layers.iter().enumerate() {
            l.check().map_err(|e| Error::Spec(format!("{} layer {i}: {e}", self.name)))?;
            if l.kind == LayerKind::ResidualBlock && l.out_channels != c {
                return Err(Error::Spec(format!(
                    "{} layer {i}: residual block maps {c} channels to {}",
                    self.name, l.out_channels
                )));
            }
            c = l.out_channels;
        }
        if let Some(h) = &self.heads {
            for (which, l) in [("src", &h.src), ("cls", &h.cls)] {
                l.check()?;
                if l.kind != LayerKind::Conv {
                    return Err(Error::Spec(format!("{} {which} head must be a plain conv", self.name)));
                }
            }
        }
        Ok(())
    }

    pub fn output_channels(&self) -> usize {
        self.layers.last().map_or(self.input_channels, |l| l.out_channels)
    }

    /// Analytic parameter count, independent of spatial size.
    pub fn param_count(&self) -> u64 {
        let mut c = self.input_channels;
        let mut total = 0;
        for l in &self.layers {
            total += l.param_count(c);
            c = l.out_channels;
        }
        if let Some(h) = &self.heads {
            total += h.src.param_count(c) + h.cls.param_count(c);
        }
        total
    }

    /// Per-layer output shapes `(h, w, c)` and parameter counts.
    pub fn infer(&self, h: usize, w: usize) -> Result<ShapeReport> {
        self.validate()?;
        let mut cur = (h, w, self.input_channels);
        let mut layers = Vec::with_capacity(self.layers.len());
        let shape_of = |i: String, l: &LayerSpec, cur: (usize, usize, usize)| -> Result<LayerShape> {
            let (oh, ow) = l.output_extent(cur.0, cur.1).ok_or_else(|| {
                Error::Shape(format!(
                    "{} {i} ({l}): input {}x{} yields a non-positive output extent",
                    self.name, cur.0, cur.1
                ))
            })?;
            Ok(LayerShape {
                row: l.to_string(),
                input: cur,
                output: (oh, ow, l.out_channels),
                params: l.param_count(cur.2),
            })
        };
        for (i, l) in self.layers.iter().enumerate() {
            let s = shape_of(format!("layer {i}"), l, cur)?;
            cur = s.output;
            layers.push(s);
        }
        let heads = match &self.heads {
            Some(hd) => Some((shape_of("src head".into(), &hd.src, cur)?, shape_of("cls head".into(), &hd.cls, cur)?)),
            None => None,
        };
        let total_params = layers.iter().map(|l| l.params).sum::<u64>()
            + heads.as_ref().map_or(0, |(a, b)| a.params + b.params);
        Ok(ShapeReport {
            input: (h, w, self.input_channels),
            layers,
            heads,
            total_params,
        })
    }

    /// The layer table as architecture-file text.
    pub fn to_arch(&self) -> String {
        let mut s = format!("[{}] input_channels={}\n", self.name, self.input_channels);
        for l in &self.layers {
            s.push_str(&format!("{l}\n"));
        }
        if let Some(h) = &self.heads {
            s.push_str(&format!("D_src: {}\n", h.src));
            s.push_str(&format!("D_cls: {}\n", h.cls));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerShape {
    pub row: String,
    pub input: (usize, usize, usize),
    pub output: (usize, usize, usize),
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShapeReport {
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerShape>,
    pub heads: Option<(LayerShape, LayerShape)>,
    pub total_params: u64,
}

impl ShapeReport {
    /// Shape produced by the trunk (the generator output).
    pub fn output(&self) -> (usize, usize, usize) {
        self.layers.last().map_or(self.input, |l| l.output)
    }
}

impl fmt::Display for ShapeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sh = |t: (usize, usize, usize)| format!("({}, {}, {})", t.0, t.1, t.2);
        for l in &self.layers {
            writeln!(f, "{:<18} -> {:<18} {:>12}  {}", sh(l.input), sh(l.output), l.params, l.row)?;
        }
        if let Some((s, c)) = &self.heads {
            writeln!(f, "{:<18} -> {:<18} {:>12}  D_src: {}", sh(s.input), sh(s.output), s.params, s.row)?;
            writeln!(f, "{:<18} -> {:<18} {:>12}  D_cls: {}", sh(c.input), sh(c.output), c.params, c.row)?;
        }
        write!(f, "total parameters: {}", self.total_params)
    }
}

fn row_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"^(?:(?P<res>Residual Block):\s*)?(?P<op>CONV|DECONV)-\(\s*N(?P<n>\d+)\s*,\s*K(?P<kh>\d+)x(?P<kw>\d+)\s*,\s*S(?P<s>\d+)\s*,\s*P(?P<p>\d+)\s*\)(?P<rest>.*)$",
        )
        .unwrap()
    })
}

fn header_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\[(?P<name>[A-Za-z0-9_\-]+)\]\s*input_channels\s*=\s*(?P<c>\d+)$").unwrap())
}

/// Parses one table row such as `DECONV-(N128, K4x4, S2, P1), IN, ReLU`.
pub fn parse_row(row: &str) -> std::result::Result<LayerSpec, String> {
    let caps = row_regex()
        .captures(row.trim())
        .ok_or_else(|| format!("cannot parse layer row `{}`", row.trim()))?;
    let num = |k: &str| caps[k].parse::<usize>().map_err(|e| format!("{k}: {e}"));
    let kind = match (caps.name("res").is_some(), &caps["op"]) {
        (true, "CONV") => LayerKind::ResidualBlock,
        (true, _) => return Err("residual blocks are built from CONV rows".into()),
        (false, "CONV") => LayerKind::Conv,
        (false, _) => LayerKind::TransposedConv,
    };
    let mut layer = LayerSpec {
        kind,
        out_channels: num("n")?,
        kernel: (num("kh")?, num("kw")?),
        stride: num("s")?,
        padding: num("p")?,
        norm: Norm::None,
        activation: Activation::None,
    };
    let rest = caps["rest"].trim();
    if !rest.is_empty() {
        let rest = rest
            .strip_prefix(',')
            .ok_or_else(|| format!("unexpected `{rest}` after layer geometry"))?;
        for tok in rest.split(',').map(str::trim) {
            match tok.to_ascii_lowercase().as_str() {
                "in" => layer.norm = Norm::Instance,
                "relu" => layer.activation = Activation::Relu,
                "leaky relu" | "leakyrelu" | "lrelu" => layer.activation = Activation::LeakyRelu,
                "tanh" => layer.activation = Activation::Tanh,
                other => return Err(format!("unknown layer attribute `{other}`")),
            }
        }
    }
    layer.check().map_err(|e| e.to_string())?;
    Ok(layer)
}

/// Parses an architecture file holding one or more `[name] input_channels=C`
/// sections of table rows. `#` starts a comment. Discriminator heads are
/// written `D_src: <row>` and `D_cls: <row>`.
pub fn parse_arch(text: &str) -> Result<Vec<NetworkSpec>> {
    struct Partial {
        name: String,
        input: usize,
        layers: Vec<LayerSpec>,
        src: Option<LayerSpec>,
        cls: Option<LayerSpec>,
        line: usize,
    }
    let finish = |p: Partial| -> Result<NetworkSpec> {
        let heads = match (p.src, p.cls) {
            (Some(src), Some(cls)) => Some(Heads { src, cls }),
            (None, None) => None,
            _ => {
                return Err(Error::ArchParse {
                    line: p.line,
                    msg: format!("network `{}` declares only one of D_src/D_cls", p.name),
                })
            }
        };
        NetworkSpec::new(p.name, p.input, p.layers, heads).map_err(|e| Error::ArchParse {
            line: p.line,
            msg: e.to_string(),
        })
    };
    let mut out = Vec::new();
    let mut cur: Option<Partial> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let err = |msg: String| Error::ArchParse { line, msg };
        if content.starts_with('[') {
            let caps = header_regex()
                .captures(content)
                .ok_or_else(|| err(format!("malformed section header `{content}`")))?;
            if let Some(p) = cur.take() {
                out.push(finish(p)?);
            }
            cur = Some(Partial {
                name: caps["name"].to_string(),
                input: caps["c"].parse().map_err(|e| err(format!("{e}")))?,
                layers: Vec::new(),
                src: None,
                cls: None,
                line,
            });
            continue;
        }
        let p = cur
            .as_mut()
            .ok_or_else(|| err("layer row before any `[name] input_channels=C` header".into()))?;
        if let Some(row) = content.strip_prefix("D_src:") {
            p.src = Some(parse_row(row).map_err(err)?);
        } else if let Some(row) = content.strip_prefix("D_cls:") {
            p.cls = Some(parse_row(row).map_err(err)?);
        } else {
            if p.src.is_some() || p.cls.is_some() {
                return Err(err("trunk rows must precede the heads".into()));
            }
            p.layers.push(parse_row(content).map_err(err)?);
        }
    }
    if let Some(p) = cur {
        out.push(finish(p)?);
    }
    if out.is_empty() {
        return Err(Error::ArchParse {
            line: 0,
            msg: "no networks defined".into(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn channel_path(spec: &NetworkSpec) -> Vec<usize> {
        spec.layers.iter().map(|l| l.out_channels).collect()
    }

    #[test]
    fn generator_table() {
        let g = NetworkSpec::generator(8, 1.0, 6).unwrap();
        assert_eq!(g.input_channels, 11);
        assert_eq!(channel_path(&g), vec![64, 128, 256, 256, 256, 256, 256, 256, 256, 128, 64, 3]);
        assert_eq!(g.layers[0].to_string(), "CONV-(N64, K7x7, S1, P3), IN, ReLU");
        assert_eq!(g.layers[3].to_string(), "Residual Block: CONV-(N256, K3x3, S1, P1), IN, ReLU");
        assert_eq!(g.layers[9].to_string(), "DECONV-(N128, K4x4, S2, P1), IN, ReLU");
        assert_eq!(g.layers[11].to_string(), "CONV-(N3, K7x7, S1, P3), Tanh");
        let r = g.infer(128, 128).unwrap();
        assert_eq!(r.layers[2].output, (32, 32, 256));
        assert_eq!(r.output(), (128, 128, 3));
    }

    #[test]
    fn narrow_and_shallow_generator() {
        let g = NetworkSpec::generator(3, 1.0 / 8.0, 2).unwrap();
        assert_eq!(channel_path(&g), vec![8, 16, 32, 32, 32, 16, 8, 3]);
        assert_eq!(g.infer(16, 16).unwrap().output(), (16, 16, 3));
        let flat = NetworkSpec::generator(3, 0.5, 0).unwrap();
        assert_eq!(flat.layers.len(), 6);
        assert_eq!(flat.infer(32, 32).unwrap().output(), (32, 32, 3));
        assert!(NetworkSpec::generator(3, 0.0, 2).is_err());
        assert!(NetworkSpec::generator(3, -1.0, 2).is_err());
        assert!(NetworkSpec::generator(0, 1.0, 2).is_err());
    }

    #[test]
    fn discriminator_table() {
        let d = NetworkSpec::discriminator(128, 128, 8, 1.0, None).unwrap();
        assert_eq!(channel_path(&d), vec![64, 128, 256, 512, 1024, 2048]);
        let r = d.infer(128, 128).unwrap();
        let (src, cls) = r.heads.unwrap();
        assert_eq!(src.output, (2, 2, 1));
        assert_eq!(cls.output, (1, 1, 8));
        assert_eq!(d.heads.unwrap().cls.to_string(), "CONV-(N8, K2x2, S1, P0)");
    }

    #[test]
    fn discriminator_depth_rule() {
        assert_eq!(default_discriminator_depth(128, 128), 6);
        assert_eq!(default_discriminator_depth(256, 256), 6);
        assert_eq!(default_discriminator_depth(64, 64), 5);
        assert_eq!(default_discriminator_depth(32, 32), 4);
        assert_eq!(default_discriminator_depth(16, 16), 3);
        let err = NetworkSpec::discriminator(64, 64, 8, 1.0, Some(6)).unwrap_err().to_string();
        assert!(err.contains("128x128"), "{err}");
        let d = NetworkSpec::discriminator(64, 64, 8, 1.0, Some(5)).unwrap();
        assert_eq!(d.infer(64, 64).unwrap().heads.unwrap().0.output, (2, 2, 1));
        assert!(NetworkSpec::discriminator(100, 100, 8, 1.0, None).is_err());
        let one = NetworkSpec::discriminator(32, 32, 1, 0.25, None).unwrap();
        assert_eq!(one.infer(32, 32).unwrap().heads.unwrap().1.output, (1, 1, 1));
    }

    #[test]
    fn non_square_discriminator_head() {
        let d = NetworkSpec::discriminator(32, 64, 3, 0.25, Some(4)).unwrap();
        let r = d.infer(32, 64).unwrap();
        assert_eq!(r.heads.unwrap().1.output, (1, 1, 3));
    }

    #[test]
    fn parameter_counts() {
        let stem = LayerSpec::conv(64, 7, 1, 3);
        assert_eq!(stem.param_count(11), 34_560);
        assert_eq!(LayerSpec::residual(256, 3, 1).param_count(256), 1_181_184);
        let g = NetworkSpec::generator(8, 1.0, 6).unwrap().param_count();
        let d = NetworkSpec::discriminator(128, 128, 8, 1.0, None).unwrap().param_count();
        assert_eq!(g, 8_443_651);
        assert_eq!(d, 44_786_633);
        let total = (g + d) as f64;
        assert!((total - 53.2e6).abs() / 53.2e6 < 0.01, "{total}");
    }

    #[test]
    fn collapsing_layer_is_named() {
        let spec = NetworkSpec::new("tiny", 3, vec![LayerSpec::conv(4, 5, 1, 0), LayerSpec::conv(4, 5, 1, 0)], None).unwrap();
        let err = spec.infer(6, 6).unwrap_err().to_string();
        assert!(err.contains("layer 1"), "{err}");
    }

    #[test]
    fn residual_channel_mismatch_rejected() {
        assert!(NetworkSpec::new("bad", 3, vec![LayerSpec::residual(8, 3, 1)], None).is_err());
    }

    #[test]
    fn arch_text_round_trip() {
        let g = NetworkSpec::generator(8, 1.0, 6).unwrap();
        let d = NetworkSpec::discriminator(128, 128, 8, 1.0, None).unwrap();
        let text = format!("# full size\n{}\n{}", g.to_arch(), d.to_arch());
        let parsed = parse_arch(&text).unwrap();
        assert_eq!(parsed, vec![g, d]);
    }

    #[test]
    fn arch_parse_errors_carry_line_numbers() {
        let text = "[g] input_channels=4\nCONV-(N8, K3x3, S1, P1), IN, ReLU\nCONV-(N8, K3x3, S1), ReLU\n";
        match parse_arch(text) {
            Err(Error::ArchParse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        match parse_arch("CONV-(N8, K3x3, S1, P1)\n") {
            Err(Error::ArchParse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
        match parse_arch("[g] input_channels=4\nCONV-(N8, K3x3, S1, P1), Sparkle\n") {
            Err(Error::ArchParse { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("sparkle"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn shape_inference_composes(split in 1usize..11, n_res in 0usize..4, w in 1usize..5) {
            let g = NetworkSpec::generator(5, w as f64 / 8.0, n_res).unwrap();
            let split = split.min(g.layers.len() - 1);
            let head = NetworkSpec::new("a", g.input_channels, g.layers[..split].to_vec(), None).unwrap();
            let tail = NetworkSpec::new("b", head.output_channels(), g.layers[split..].to_vec(), None).unwrap();
            let whole = g.infer(16, 16).unwrap();
            let a = head.infer(16, 16).unwrap();
            let (h2, w2, _) = a.output();
            let b = tail.infer(h2, w2).unwrap();
            let joined: Vec<_> = a.layers.iter().chain(b.layers.iter()).cloned().collect();
            prop_assert_eq!(&whole.layers, &joined);
            prop_assert_eq!(whole.total_params, a.total_params + b.total_params);
        }

        #[test]
        fn generator_preserves_extent(k in 1usize..12, n_res in 0usize..3) {
            let g = NetworkSpec::generator(4, 0.125, n_res).unwrap();
            let r = g.infer(4 * k, 4 * (k + 1)).unwrap();
            prop_assert_eq!(r.output(), (4 * k, 4 * (k + 1), 3));
        }
    }
}
