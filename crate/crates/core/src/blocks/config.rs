//! Model hyperparameters and the flat `key = value` config format.
//!
//! One pair per line. `#` starts a comment, blank lines are ignored, keys
//! and values are trimmed, and list values are comma separated. Unknown
//! keys and repeated keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::attention::{cyclic_schedule, BiasKind, KernelKind};
use crate::error::{Error, Result};

/// Gating applied to the attention output before the output projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GateKind {
    /// `sigmoid(PW(DW3x3(x)))`
    Cla,
    /// `sigmoid(PW(x))`
    PwConv,
    None,
}

impl std::fmt::Display for GateKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GateKind::Cla => "cla",
            GateKind::PwConv => "pwconv",
            GateKind::None => "none",
        })
    }
}

impl FromStr for GateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cla" => Ok(GateKind::Cla),
            "pwconv" => Ok(GateKind::PwConv),
            "none" => Ok(GateKind::None),
            other => Err(Error::Config(format!("unknown gate '{other}'"))),
        }
    }
}

/// Parsed `key = value` pairs with line numbers for error messages.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    pairs: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value", no + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", no + 1)));
            }
            if pairs.insert(k.to_string(), (no + 1, v.to_string())).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key '{k}'", no + 1)));
            }
        }
        Ok(Self { pairs })
    }

    pub fn contains(&self, key: &str) -> bool {
        self.pairs.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.pairs.keys().map(String::as_str)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.pairs.get(key).map(|(_, v)| v.as_str())
    }

    pub fn get<V: FromStr>(&self, key: &str) -> Result<Option<V>> {
        match self.pairs.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("line {line}: bad value '{v}' for '{key}'"))),
        }
    }

    pub fn list<V: FromStr>(&self, key: &str) -> Result<Option<Vec<V>>> {
        match self.pairs.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<std::result::Result<Vec<V>, _>>()
                .map(Some)
                .map_err(|_| Error::Config(format!("line {line}: bad list '{v}' for '{key}'"))),
        }
    }

    /// Errors on any key not in `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        for (k, (line, _)) in &self.pairs {
            if !known.contains(&k.as_str()) {
                return Err(Error::Config(format!("line {line}: unknown key '{k}'")));
            }
        }
        Ok(())
    }
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SstConfig {
    pub dim: usize,
    pub blocks: usize,
    pub layers: usize,
    /// Per-layer window sizes, cycled within each block.
    pub windows: Vec<usize>,
    pub heads: usize,
    /// Fourier bands `L`.
    pub bands: usize,
    /// RIB hidden width `d_h`.
    pub hidden: usize,
    /// Per-layer positional rank, cycled like `windows`.
    pub ranks: Vec<usize>,
    /// ConvFFN hidden width is `floor(expansion * dim)`.
    pub expansion: f64,
    pub scale: usize,
    pub bias: BiasKind,
    pub kernel: KernelKind,
    pub gate: GateKind,
    pub tile: Option<usize>,
    pub in_channels: usize,
}

pub const MODEL_KEYS: [&str; 16] = [
    "dim",
    "blocks",
    "layers",
    "windows",
    "heads",
    "bands",
    "hidden",
    "ranks",
    "expansion",
    "scale",
    "bias",
    "kernel",
    "gate",
    "tile",
    "in_channels",
    "preset",
];

impl SstConfig {
    fn base(dim: usize, blocks: usize, windows: &[usize], heads: usize, ranks: &[usize], expansion: f64) -> Self {
        Self {
            dim,
            blocks,
            layers: 6,
            windows: windows.to_vec(),
            heads,
            bands: 10,
            hidden: 32,
            ranks: ranks.to_vec(),
            expansion,
            scale: 2,
            bias: BiasKind::Rib,
            kernel: KernelKind::Streaming,
            gate: GateKind::Cla,
            tile: None,
            in_channels: 3,
        }
    }

    pub fn sst_light() -> Self {
        Self::base(48, 5, &[8, 16, 32, 16, 32, 64], 3, &[16, 16, 16, 24, 24, 24], 1.5)
    }

    pub fn sst_light_plus() -> Self {
        Self {
            windows: vec![16, 32, 48, 32, 48, 96],
            ..Self::sst_light()
        }
    }

    pub fn sst() -> Self {
        Self::base(180, 6, &[16, 32, 64, 16, 32, 64], 6, &[18, 18, 18, 34, 34, 34], 1.25)
    }

    pub fn sst_plus() -> Self {
        Self {
            windows: vec![16, 32, 48, 32, 48, 96],
            ..Self::sst()
        }
    }

    pub fn sst_large() -> Self {
        Self::base(192, 8, &[16, 32, 64, 16, 32, 64], 6, &[16, 16, 16, 32, 32, 32], 2.0)
    }

    pub fn sst_large_plus() -> Self {
        Self {
            windows: vec![16, 32, 48, 32, 48, 96],
            ..Self::sst_large()
        }
    }

    /// Desk-scale model: one block of three layers.
    pub fn micro() -> Self {
        Self {
            dim: 16,
            blocks: 1,
            layers: 3,
            windows: vec![4, 8, 8],
            heads: 2,
            bands: 4,
            hidden: 16,
            ranks: vec![8],
            expansion: 2.0,
            ..Self::sst()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "sst-light" => Self::sst_light(),
            "sst-light+" => Self::sst_light_plus(),
            "sst" => Self::sst(),
            "sst+" => Self::sst_plus(),
            "sst-l" => Self::sst_large(),
            "sst-l+" => Self::sst_large_plus(),
            "micro" => Self::micro(),
            other => return Err(Error::Config(format!("unknown preset '{other}'"))),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn ffn_hidden(&self) -> usize {
        (self.expansion * self.dim as f64).floor() as usize
    }

    pub fn window(&self, layer: usize) -> usize {
        cyclic_schedule(&self.windows, layer).expect("validated non-empty")
    }

    pub fn rank(&self, layer: usize) -> usize {
        cyclic_schedule(&self.ranks, layer).expect("validated non-empty")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.blocks == 0 || self.layers == 0 {
            return fail("blocks and layers must be positive".into());
        }
        if self.windows.is_empty() || self.windows.contains(&0) {
            return fail("windows must be a non-empty list of positive sizes".into());
        }
        if self.ranks.is_empty() || (self.bias == BiasKind::Rib && self.ranks.contains(&0)) {
            return fail("ranks must be a non-empty list of positive ranks".into());
        }
        if !(2..=4).contains(&self.scale) {
            return fail(format!("scale {} not in 2..=4", self.scale));
        }
        if !(self.expansion.is_finite() && self.expansion > 0.0) || self.ffn_hidden() == 0 {
            return fail(format!("expansion {} gives an empty ConvFFN", self.expansion));
        }
        if self.bias == BiasKind::Rib && self.hidden == 0 {
            return fail("rib needs a positive hidden width".into());
        }
        if self.bias == BiasKind::Rope && !self.head_dim().is_multiple_of(4) {
            return fail(format!("rope needs head dim divisible by 4, got {}", self.head_dim()));
        }
        if self.bias == BiasKind::Rpb && self.kernel == KernelKind::Streaming {
            return Err(Error::Unsupported("rpb requires kernel = naive".into()));
        }
        if self.tile == Some(0) || self.in_channels == 0 {
            return fail("tile and in_channels must be positive".into());
        }
        Ok(())
    }

    /// Applies model keys from `kv` on top of `preset` (or micro).
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut c = match kv.raw("preset") {
            Some(p) => Self::preset(p)?,
            None => Self::micro(),
        };
        macro_rules! set {
            ($field:ident, $key:literal) => {
                if let Some(v) = kv.get($key)? {
                    c.$field = v;
                }
            };
        }
        set!(dim, "dim");
        set!(blocks, "blocks");
        set!(layers, "layers");
        set!(heads, "heads");
        set!(bands, "bands");
        set!(hidden, "hidden");
        set!(expansion, "expansion");
        set!(scale, "scale");
        set!(bias, "bias");
        set!(kernel, "kernel");
        set!(gate, "gate");
        set!(in_channels, "in_channels");
        if let Some(v) = kv.list("windows")? {
            c.windows = v;
        }
        if let Some(v) = kv.list("ranks")? {
            c.ranks = v;
        }
        if let Some(t) = kv.get("tile")? {
            c.tile = Some(t);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        kv.reject_unknown(&MODEL_KEYS)?;
        Self::from_kv(&kv)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to string");
        put("dim", self.dim.to_string());
        put("blocks", self.blocks.to_string());
        put("layers", self.layers.to_string());
        put("windows", join(&self.windows));
        put("heads", self.heads.to_string());
        put("bands", self.bands.to_string());
        put("hidden", self.hidden.to_string());
        put("ranks", join(&self.ranks));
        put("expansion", self.expansion.to_string());
        put("scale", self.scale.to_string());
        put("bias", self.bias.to_string());
        put("kernel", self.kernel.to_string());
        put("gate", self.gate.to_string());
        if let Some(t) = self.tile {
            put("tile", t.to_string());
        }
        put("in_channels", self.in_channels.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_rows() {
        let s = SstConfig::sst();
        assert_eq!((s.dim, s.blocks, s.layers, s.heads, s.bands, s.hidden), (180, 6, 6, 6, 10, 32));
        assert_eq!(s.windows, [16, 32, 64, 16, 32, 64]);
        assert_eq!(s.ranks, [18, 18, 18, 34, 34, 34]);
        assert_eq!(SstConfig::sst_plus().windows, [16, 32, 48, 32, 48, 96]);
        let l = SstConfig::sst_light();
        assert_eq!((l.dim, l.blocks, l.heads, l.expansion), (48, 5, 3, 1.5));
        assert_eq!(l.windows, [8, 16, 32, 16, 32, 64]);
        let xl = SstConfig::sst_large();
        assert_eq!((xl.dim, xl.blocks, xl.expansion), (192, 8, 2.0));
        assert_eq!(xl.ranks, [16, 16, 16, 32, 32, 32]);
        for p in ["sst-light", "sst-light+", "sst", "sst+", "sst-l", "sst-l+", "micro"] {
            SstConfig::preset(p).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn augmented_width_is_multiple_of_eight() {
        for c in [SstConfig::sst(), SstConfig::sst_light(), SstConfig::sst_large()] {
            for layer in 0..c.layers {
                assert_eq!((c.head_dim() + c.rank(layer)) % 8, 0, "{c:?}");
            }
        }
    }

    #[test]
    fn text_round_trip() {
        let mut c = SstConfig::micro();
        c.tile = Some(7);
        c.gate = GateKind::PwConv;
        assert_eq!(SstConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn parse_grammar() {
        let c = SstConfig::parse("# comment\npreset = sst\n\n windows = 8, 16 # trailing\nscale=4\n").unwrap();
        assert_eq!(c.windows, [8, 16]);
        assert_eq!((c.dim, c.scale), (180, 4));
        assert!(SstConfig::parse("dim 16").is_err());
        assert!(SstConfig::parse("dim = 16\ndim = 8").is_err());
        assert!(SstConfig::parse("colour = red").is_err());
        assert!(SstConfig::parse("scale = 5").is_err());
        assert!(SstConfig::parse("windows = 4,x").is_err());
        assert!(matches!(
            SstConfig::parse("bias = rpb\nkernel = streaming"),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn ffn_width() {
        let c = SstConfig { expansion: 2.0, dim: 16, ..SstConfig::micro() };
        assert_eq!(c.ffn_hidden(), 32);
        assert_eq!(SstConfig::sst().ffn_hidden(), 225);
    }
}
