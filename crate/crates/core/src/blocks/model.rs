//! The SST super-resolution network: shallow 3x3 conv, residual blocks of
//! SST layers, global residual, conv + pixel-shuffle upsampler, and a
//! nearest-neighbour image skip.

use std::path::Path;

use rand::Rng;

use super::config::SstConfig;
use super::conv::{nearest_index, pixel_shuffle_index};
use super::layer::{conv3x3_on_tape, init_layer_params, sst_layer, ForwardOptions, LayerSpec};
use super::params::{BoundParams, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::posbias::PosTokenCache;
use crate::tensor::{Scalar, Tensor};

pub const CONFIG_FILE: &str = "config.txt";

pub fn layer_prefix(block: usize, layer: usize) -> String {
    format!("b{block}.l{layer}.")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SstModel<T> {
    pub cfg: SstConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> SstModel<T> {
    pub fn init<R: Rng + ?Sized>(cfg: SstConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, c, r) = (cfg.dim, cfg.in_channels, cfg.scale);
        let mut p = ParamStore::new();
        p.uniform("e_s.w", &[9 * c, d], 9 * c, rng)?;
        p.zeros("e_s.b", &[d])?;
        for b in 0..cfg.blocks {
            for l in 0..cfg.layers {
                init_layer_params(&mut p, &layer_prefix(b, l), &LayerSpec::from_config(&cfg, l), rng)?;
            }
            p.uniform(&format!("b{b}.conv.w"), &[9 * d, d], 9 * d, rng)?;
            p.zeros(&format!("b{b}.conv.b"), &[d])?;
        }
        p.uniform("up.w", &[9 * d, r * r * c], 9 * d, rng)?;
        p.zeros("up.b", &[r * r * c])?;
        Ok(Self { cfg, params: p })
    }

    /// Every parameter zero except LayerNorm gains.
    pub fn zeros(cfg: SstConfig) -> Result<Self> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut m = Self::init(cfg, &mut rng)?;
        m.params.zero_where(|n| !n.ends_with(".g"));
        Ok(m)
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Builds `I_SR` for `img: [B, H, W, C]` on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &BoundParams,
        img: Var,
        opts: &ForwardOptions<'_, T>,
    ) -> Result<Var> {
        sst_forward(tape, p, &self.cfg, img, opts)
    }

    /// Inference on `[B, H, W, C]` or `[H, W, C]`; positional tokens are
    /// served from `cache` when given.
    pub fn infer(&self, img: &Tensor<T>, cache: Option<&PosTokenCache<T>>) -> Result<Tensor<T>> {
        let batched = match img.rank() {
            4 => img.clone(),
            3 => {
                let mut d = vec![1];
                d.extend_from_slice(img.dims());
                img.reshape(d)?
            }
            _ => return Err(Error::Shape(format!("image must be [H,W,C] or [B,H,W,C], got {:?}", img.dims()))),
        };
        let mut tape = Tape::new();
        let bound = self.params.bind_constant(&mut tape);
        let x = tape.constant(batched);
        let y = self.forward(&mut tape, &bound, x, &ForwardOptions { pos_cache: cache })?;
        let out = tape.value(y).clone();
        if img.rank() == 3 {
            out.reshape(out.dims()[1..].to_vec())
        } else {
            Ok(out)
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join(CONFIG_FILE);
        std::fs::write(&cfg_path, self.cfg.to_text()).map_err(|e| Error::io(cfg_path, e))?;
        self.params.save_dir(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let cfg = SstConfig::parse(&text)?;
        let like = Self::zeros(cfg.clone())?;
        let params = ParamStore::load_dir(dir, &like.params)?;
        Ok(Self { cfg, params })
    }
}

/// One residual block: layers, 3x3 conv, block residual.
pub fn sst_block<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    cfg: &SstConfig,
    block: usize,
    x: Var,
    opts: &ForwardOptions<'_, T>,
) -> Result<Var> {
    let mut h = x;
    for l in 0..cfg.layers {
        h = sst_layer(tape, p, &layer_prefix(block, l), h, &LayerSpec::from_config(cfg, l), opts)?;
    }
    let c = conv3x3_on_tape(
        tape,
        h,
        p.get(&format!("b{block}.conv.w"))?,
        Some(p.get(&format!("b{block}.conv.b"))?),
    )?;
    tape.add(c, x)
}

pub fn sst_forward<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    cfg: &SstConfig,
    img: Var,
    opts: &ForwardOptions<'_, T>,
) -> Result<Var> {
    if !(2..=4).contains(&cfg.scale) {
        return Err(Error::Config(format!("scale {} not supported", cfg.scale)));
    }
    let (b, h, w, c) = match *tape.dims(img) {
        [b, h, w, c] if c == cfg.in_channels => (b, h, w, c),
        ref d => return Err(Error::dims("sst_forward input", d, &[0, 0, 0, cfg.in_channels])),
    };
    let r = cfg.scale;
    let f_s = conv3x3_on_tape(tape, img, p.get("e_s.w")?, Some(p.get("e_s.b")?))?;
    let mut x = f_s;
    for blk in 0..cfg.blocks {
        x = sst_block(tape, p, cfg, blk, x, opts)?;
    }
    let f = tape.add(x, f_s)?;
    let u = conv3x3_on_tape(tape, f, p.get("up.w")?, Some(p.get("up.b")?))?;
    let up = tape.gather(u, pixel_shuffle_index(b, h, w, c, r).into(), [b, h * r, w * r, c])?;
    let skip = tape.gather(img, nearest_index(b, h, w, c, r).into(), [b, h * r, w * r, c])?;
    tape.add(up, skip)
}
