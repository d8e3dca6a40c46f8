//! Probability-map and mask combination commands.

use histopath::ensemble::{average_predictions, blend_binary, compose_multiclass, shifted_blend};
use histopath::formats::{read_mask, read_probmap, write_mask, write_probmap};
use histopath::image::ProbMap;
use histopath::postprocess::postprocess_chain;
use histopath::{Error, Result};

use super::with_path;
use crate::config::{resolve_postprocess, FileConfig};
use crate::{BlendArgs, ComposeArgs, PostprocessArgs};

pub fn postprocess(args: &PostprocessArgs) -> Result<()> {
    let map = with_path(&args.map, read_probmap(&args.map))?;
    let mask = if map.classes() == 1 {
        let file = FileConfig::load_opt(args.config.as_deref())?;
        let cfg = resolve_postprocess(&file, args)?;
        postprocess_chain(&map, &cfg)?
    } else {
        let chain_flags = args.blur_kernel.is_some()
            || args.blur_sigma.is_some()
            || args.threshold.is_some()
            || args.closing_size.is_some()
            || args.area_power.is_some()
            || args.config.is_some();
        if chain_flags {
            return Err(Error::validation(format!(
                "the blur/threshold chain applies to single-channel maps; this map has {} \
                 channels and takes the per-pixel argmax (drop the chain flags)",
                map.classes()
            )));
        }
        println!("postprocess: argmax over {} channels", map.classes());
        map.argmax_mask()?
    };
    with_path(&args.out, write_mask(&args.out, &mask))?;
    println!("wrote {}", args.out.display());
    Ok(())
}

pub fn blend(args: &BlendArgs) -> Result<()> {
    if let Some(w) = args.weight {
        if args.maps.len() != 2 {
            return Err(Error::validation(format!(
                "--weight blends exactly two maps, got {}",
                args.maps.len()
            )));
        }
        let a = with_path(&args.maps[0], read_probmap(&args.maps[0]))?;
        let b = with_path(&args.maps[1], read_probmap(&args.maps[1]))?;
        let out = blend_binary(&a, &b, w)?;
        with_path(&args.out, write_probmap(&args.out, &out))?;
        println!("wrote {} (pair blend, weight {w})", args.out.display());
        return Ok(());
    }
    let maps: Vec<ProbMap> = args
        .maps
        .iter()
        .map(|p| with_path(p, read_probmap(p)))
        .collect::<Result<_>>()?;
    let out = average_predictions(&maps)?;
    with_path(&args.out, write_probmap(&args.out, &out))?;
    println!("wrote {} (average of {} maps)", args.out.display(), maps.len());
    Ok(())
}

pub fn compose(args: &ComposeArgs) -> Result<()> {
    let binary = with_path(&args.binary, read_mask(&args.binary))?;
    let out = if args.shifted {
        shifted_blend(&binary)?
    } else {
        let multi_path = args.multi.as_ref().expect("clap enforces --multi unless --shifted");
        let multi = with_path(multi_path, read_mask(multi_path))?;
        compose_multiclass(&binary, &multi)?
    };
    with_path(&args.out, write_mask(&args.out, &out))?;
    println!("wrote {}", args.out.display());
    Ok(())
}
