//! Every trainable block of the codec, laid out from a [`CodecConfig`].

use std::path::Path;

use crate::align::{FmtParams, FuseParams, GeoEmbed};
use crate::cloud::CodecConfig;
use crate::ctr::{CtrGate, CtrParams};
use crate::entropy::EntropyModel;
use crate::error::Result;
use crate::nn::{checkpoint, Mlp, ParamSet};
use crate::scale::{DownBlock, UpBlock};

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: CodecConfig,
    pub params: ParamSet,
    /// `down[s]` maps stage `s` to stage `s + 1`.
    pub down: Vec<DownBlock>,
    pub geo: GeoEmbed,
    pub fmt: FmtParams,
    pub fuse: FuseParams,
    /// Contextual encoder, `F3 ++ Context -> F4`.
    pub ctx_enc: DownBlock,
    pub entropy: EntropyModel,
    /// Contextual decoder, `F4[parent] ++ Context ++ octant -> F3`.
    pub ctx_dec: Mlp,
    pub ctr: CtrParams,
    pub ctr_gate: CtrGate,
    /// `up[s]` maps stage `s + 1` to stage `s`.
    pub up: Vec<UpBlock>,
}

impl Model {
    pub fn new(config: &CodecConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let d = c.feature_width;
        let f = c.hidden_factor;
        let s = c.seed;
        let extent = (1u64 << (c.bit_depth - 3)) as f64;
        let mut ps = ParamSet::new();
        let down = (0..3)
            .map(|k| DownBlock::new(&mut ps, &format!("down{k}"), d[k], d[k + 1], true, k == 2, s))
            .collect();
        let geo = GeoEmbed::new(&mut ps, "geo", d[3], extent, s);
        let fmt = FmtParams::new(&mut ps, "fmt", d[3], f, extent, s);
        let fuse = FuseParams::new(&mut ps, "fuse", d[3], c.context_width, s);
        let ctx_enc = DownBlock::new(&mut ps, "ctx_enc", d[3] + c.context_width, d[4], false, false, s);
        let entropy = EntropyModel::new(&mut ps, "entropy", d[4], c.context_width, c.hyper_width, c.ar_window, f, s);
        let ctx_dec = Mlp::two_layer(&mut ps, "ctx_dec", d[4] + c.context_width + 8, d[3], f, s);
        let ctr = CtrParams::new(&mut ps, "ctr", d[3], f, c.ctr_k, s);
        let ctr_gate = CtrGate::new(&mut ps, "ctr_gate", d[3], s);
        let up = (0..3)
            .map(|k| UpBlock::new(&mut ps, &format!("up{k}"), d[k + 1], d[k], f, s))
            .collect();
        Ok(Self {
            config: config.clone(),
            params: ps,
            down,
            geo,
            fmt,
            fuse,
            ctx_enc,
            entropy,
            ctx_dec,
            ctr,
            ctr_gate,
            up,
        })
    }

    pub fn config_hash(&self) -> u64 {
        self.config.arch_hash()
    }

    pub fn weights_hash(&self) -> u64 {
        checkpoint::weights_hash(&self.params)
    }

    pub fn weights_bytes(&self) -> Vec<u8> {
        checkpoint::to_bytes(&self.params, self.config_hash())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.weights_bytes())?;
        Ok(())
    }

    /// Replace the parameters with a checkpoint made for the same layout.
    pub fn load_bytes(&mut self, buf: &[u8]) -> Result<()> {
        self.params = checkpoint::from_bytes(buf, &self.params, self.config_hash())?;
        Ok(())
    }

    pub fn load(config: &CodecConfig, path: &Path) -> Result<Self> {
        let mut m = Self::new(config)?;
        m.load_bytes(&std::fs::read(path)?)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_seeded_and_round_trips() {
        let cfg = CodecConfig::default();
        let a = Model::new(&cfg).unwrap();
        let b = Model::new(&cfg).unwrap();
        assert_eq!(a.weights_hash(), b.weights_hash());
        let mut c = Model::new(&CodecConfig { seed: 99, ..cfg.clone() }).unwrap();
        assert_ne!(a.weights_hash(), c.weights_hash());
        c.load_bytes(&a.weights_bytes()).unwrap();
        assert_eq!(c.params, a.params);
        let other = Model::new(&CodecConfig { ar_window: 4, ..cfg }).unwrap();
        assert!(other.clone().load_bytes(&a.weights_bytes()).is_err());
    }
}
