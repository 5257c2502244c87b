//! Architecture strings such as `34x34x2-n8c3-{n16c3}*5-n16c3-{n32c3}*5-10`.
//!
//! Grammar (items joined by `-`):
//!
//! ```text
//! input  := INT 'x' INT ['x' INT]
//! conv   := ['n'] INT 'c' INT ['n']
//! dense  := ['n'] INT ['n']
//! group  := '{' (conv | dense) '}' '*' INT
//! ```
//!
//! A leading `n` normalizes the PSP feeding the layer. A trailing `n`
//! (normalization after the layer) is accepted by the parser so those
//! strings round-trip, but the model builder rejects it. `×` is accepted as
//! an alias for `x`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub h: usize,
    pub w: usize,
    /// `None` when the string gives only `HxW`; such inputs have one channel.
    pub c: Option<usize>,
}

impl InputSpec {
    pub fn channels(&self) -> usize {
        self.c.unwrap_or(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpecKind {
    Conv { channels: usize, kernel: usize },
    Dense { units: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerSpecKind,
    pub norm_before: bool,
    pub norm_after: bool,
    pub repeat: usize,
}

impl LayerSpec {
    pub fn is_conv(&self) -> bool {
        matches!(self.kind, LayerSpecKind::Conv { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Plain,
    /// `h + G(h)` with `G = Func-Conv-Func-Conv`.
    ResnetPre,
    /// `F(h + G(h))` with `G = Conv-Func-Conv`.
    ResnetPost,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: InputSpec,
    pub layers: Vec<LayerSpec>,
    pub style: Style,
    /// Residual block count; zero for plain networks.
    pub block_count: usize,
}

struct Cursor<'a> {
    chars: &'a [char],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn eat_x(&mut self) -> bool {
        self.eat('x') || self.eat('×')
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse { pos: self.pos, msg: msg.into() })
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            match self.peek() {
                Some(got) => self.err(format!("expected '{c}', found '{got}'")),
                None => self.err(format!("expected '{c}', found end of string")),
            }
        }
    }

    fn int(&mut self) -> Result<usize> {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            self.pos += 1;
        }
        if start == self.pos {
            return match self.peek() {
                Some(c) => self.err(format!("expected a number, found '{c}'")),
                None => self.err("expected a number, found end of string"),
            };
        }
        let text: String = self.chars[start..self.pos].iter().collect();
        text.parse::<usize>().map_err(|_| Error::Parse { pos: start, msg: format!("number '{text}' out of range") })
    }

    fn at_item_end(&self) -> bool {
        matches!(self.peek(), None | Some('-') | Some('}'))
    }
}

fn parse_input(cur: &mut Cursor) -> Result<InputSpec> {
    let start = cur.pos;
    if matches!(cur.peek(), Some('n') | Some('{')) {
        return cur.err("architecture must start with an input spec such as 34x34x2");
    }
    let h = cur.int()?;
    if !cur.eat_x() {
        cur.pos = start;
        return cur.err("architecture must start with an input spec such as 34x34x2");
    }
    let w = cur.int()?;
    let c = if cur.eat_x() { Some(cur.int()?) } else { None };
    if h == 0 || w == 0 || c == Some(0) {
        return Err(Error::Parse { pos: start, msg: "input extents must be positive".into() });
    }
    if !cur.at_item_end() {
        return cur.err("unexpected characters after input spec");
    }
    Ok(InputSpec { h, w, c })
}

fn parse_layer(cur: &mut Cursor) -> Result<LayerSpec> {
    let start = cur.pos;
    let norm_before = cur.eat('n');
    let count = cur.int()?;
    if count == 0 {
        return Err(Error::Parse { pos: start, msg: "layer width must be positive".into() });
    }
    let kind = if cur.eat('c') {
        let kernel = cur.int()?;
        if kernel == 0 || kernel % 2 == 0 {
            return Err(Error::Parse {
                pos: start,
                msg: format!("conv kernel must be odd and positive, got {kernel}"),
            });
        }
        LayerSpecKind::Conv { channels: count, kernel }
    } else {
        LayerSpecKind::Dense { units: count }
    };
    let norm_after = cur.eat('n');
    if !cur.at_item_end() {
        return match cur.peek() {
            Some(c) => cur.err(format!("unexpected '{c}' in layer")),
            None => cur.err("unexpected end of string"),
        };
    }
    Ok(LayerSpec { kind, norm_before, norm_after, repeat: 1 })
}

/// Parses an architecture string into a plain network spec.
pub fn parse_architecture(s: &str) -> Result<NetworkSpec> {
    let chars: Vec<char> = s.trim().chars().collect();
    if chars.is_empty() {
        return Err(Error::Parse { pos: 0, msg: "empty architecture string".into() });
    }
    let mut cur = Cursor { chars: &chars, pos: 0 };
    let input = parse_input(&mut cur)?;
    let mut layers = Vec::new();
    while cur.peek().is_some() {
        cur.expect('-')?;
        if cur.eat('{') {
            let mut layer = parse_layer(&mut cur)?;
            cur.expect('}')?;
            cur.expect('*')?;
            let at = cur.pos;
            let repeat = cur.int()?;
            if repeat == 0 {
                return Err(Error::Parse { pos: at, msg: "group repeat must be >= 1".into() });
            }
            layer.repeat = repeat;
            layers.push(layer);
        } else {
            layers.push(parse_layer(&mut cur)?);
        }
    }
    Ok(NetworkSpec { input, layers, style: Style::Plain, block_count: 0 })
}

/// `render(parse(s))`: the canonical spelling of `s`.
pub fn canonical(s: &str) -> Result<String> {
    Ok(parse_architecture(s)?.render())
}

/// Architecture string for a residual network of `depth` weighted layers:
/// one stem conv, `(depth - 2) / 2` two-conv blocks, one dense classifier.
pub fn resnet_architecture(
    input: InputSpec,
    width: usize,
    depth: usize,
    classes: usize,
    normalized: bool,
) -> Result<String> {
    if depth < 4 || !depth.is_multiple_of(2) {
        return Err(Error::Param(format!("residual depth must be even and >= 4, got {depth}")));
    }
    let spec = NetworkSpec {
        input,
        layers: vec![
            LayerSpec {
                kind: LayerSpecKind::Conv { channels: width, kernel: 3 },
                norm_before: normalized,
                norm_after: false,
                repeat: 1,
            },
            LayerSpec {
                kind: LayerSpecKind::Conv { channels: width, kernel: 3 },
                norm_before: normalized,
                norm_after: false,
                repeat: depth - 2,
            },
            LayerSpec {
                kind: LayerSpecKind::Dense { units: classes },
                norm_before: false,
                norm_after: false,
                repeat: 1,
            },
        ],
        style: Style::Plain,
        block_count: 0,
    };
    Ok(spec.render())
}

impl NetworkSpec {
    pub fn render(&self) -> String {
        let mut out = format!("{}x{}", self.input.h, self.input.w);
        if let Some(c) = self.input.c {
            let _ = write!(out, "x{c}");
        }
        for layer in &self.layers {
            out.push('-');
            let mut body = String::new();
            if layer.norm_before {
                body.push('n');
            }
            match layer.kind {
                LayerSpecKind::Conv { channels, kernel } => {
                    let _ = write!(body, "{channels}c{kernel}");
                }
                LayerSpecKind::Dense { units } => {
                    let _ = write!(body, "{units}");
                }
            }
            if layer.norm_after {
                body.push('n');
            }
            if layer.repeat > 1 {
                let _ = write!(out, "{{{body}}}*{}", layer.repeat);
            } else {
                out.push_str(&body);
            }
        }
        out
    }

    /// Layers with every group unrolled.
    pub fn expanded(&self) -> Vec<LayerSpec> {
        self.layers.iter().flat_map(|l| std::iter::repeat_n(LayerSpec { repeat: 1, ..*l }, l.repeat)).collect()
    }

    pub fn weighted_layer_count(&self) -> usize {
        self.layers.iter().map(|l| l.repeat).sum()
    }

    /// Reinterprets the layer list as a residual network: the first conv is
    /// the stem and each following pair of convs forms one block.
    pub fn with_style(mut self, style: Style) -> Result<Self> {
        self.style = style;
        self.block_count = 0;
        if style == Style::Plain {
            return Ok(self);
        }
        let convs = self.expanded().iter().filter(|l| l.is_conv()).count();
        if convs < 3 || (convs - 1) % 2 != 0 {
            return Err(Error::Build(format!(
                "a residual network needs a stem conv plus an even number of block convs, got {convs} convs"
            )));
        }
        self.block_count = (convs - 1) / 2;
        Ok(self)
    }
}
