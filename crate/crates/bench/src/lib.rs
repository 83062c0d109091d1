//! Shared fixtures for the benchmarks.

use advdef_core::candle::{DType, Tensor};
use advdef_core::data::{gen_synthetic_sequence, SynthConfig};
use advdef_core::defense::{build_defense_net, DefenseConfig, DefenseNet, Variant};
use advdef_core::imaging::{crop_search, crop_template};
use advdef_core::tracker::{TrackerConfig, TrackerModel};
use advdef_core::Result;

/// Untrained tracker and search defense of the given preset, plus one
/// template/search pair cut from a synthetic frame.
pub struct Fixture {
    pub tracker: TrackerModel,
    pub defense: DefenseNet,
    pub z: Tensor,
    pub x: Tensor,
}

pub fn fixture(preset: &str) -> Result<Fixture> {
    let cfg = TrackerConfig::preset(preset)?;
    let synth = if preset == "micro" {
        SynthConfig::micro(2)
    } else {
        SynthConfig { frames: 2, ..SynthConfig::default() }
    };
    let seq = gen_synthetic_sequence(&synth, 1)?;
    let (zp, _) = crop_template(&seq.frames[0], &seq.gt[0], cfg.template_size)?;
    let (xp, _) = crop_search(&seq.frames[1], &seq.gt[0], cfg.template_size, cfg.search_size)?;
    let tracker = TrackerModel::new(&cfg, 1, DType::F32)?.frozen(DType::F32)?;
    let dcfg = DefenseConfig::preset(preset, cfg.search_size)?;
    let defense = build_defense_net(Variant::Search, &dcfg, 2, DType::F32)?.frozen()?;
    Ok(Fixture {
        tracker,
        defense,
        z: zp.to_tensor(DType::F32)?,
        x: xp.to_tensor(DType::F32)?,
    })
}
