//! Inference commands: running models and reassembling patch grids.

use histopath::ensemble;
use histopath::formats::{read_image, read_predmatrix_csv, write_predmatrix_csv, write_probmap};
use histopath::image::{Image, PredMatrix};
use histopath::nn::{load_model, predict_class_probs, predict_probmap, ArchDescriptor};
use histopath::tiling::{crop, grid_patches, PatchSpec};
use histopath::{Error, Result};

use super::{preprocess_for_net, with_path};
use crate::{PredictArgs, StitchArgs};

pub fn predict(args: &PredictArgs) -> Result<()> {
    let bundle = with_path(&args.model, load_model(&args.model))?;
    println!("arch: {}", bundle.arch);
    let graph = bundle.to_graph()?;
    let img = with_path(&args.image, read_image(&args.image))?;
    let pre = preprocess_for_net(&img)?;

    match bundle.arch {
        ArchDescriptor::Classifier { .. } => {
            let patch = args.patch.unwrap_or(500);
            let stride = args.stride.unwrap_or(100);
            let spec = PatchSpec::new(patch, stride)?;
            let grid = grid_patches(pre.height(), pre.width(), spec)?;
            let patches: Vec<Image> = grid
                .origins
                .iter()
                .map(|&(y0, x0)| crop(&pre, y0, x0, patch, patch))
                .collect::<Result<_>>()?;
            let scores = predict_class_probs(&graph, &patches)?;
            with_path(&args.out, write_predmatrix_csv(&args.out, &scores))?;
            println!(
                "wrote {} ({} rows x {} classes, grid {}x{})",
                args.out.display(),
                scores.rows(),
                scores.classes(),
                grid.grid_rows,
                grid.grid_cols
            );
        }
        ArchDescriptor::Segmenter { ref spec, .. } => {
            if args.patch.is_some() || args.stride.is_some() {
                return Err(Error::validation(
                    "--patch/--stride apply to classifier models; segmenters run over the whole image",
                ));
            }
            bundle.arch.check_input(pre.height(), pre.width())?;
            let map = predict_probmap(&graph, &pre)?;
            with_path(&args.out, write_probmap(&args.out, &map))?;
            println!(
                "wrote {} ({} channel(s), {}x{}, depth-{} segmenter)",
                args.out.display(),
                map.classes(),
                map.height(),
                map.width(),
                spec.depth
            );
        }
    }
    Ok(())
}

pub fn stitch(args: &StitchArgs) -> Result<()> {
    let scores = with_path(&args.pred, read_predmatrix_csv(&args.pred))?;
    // The stitcher paints one scalar per patch; pull out the requested
    // class column when the matrix holds several.
    let scores = match (scores.classes(), args.class) {
        (1, None) => scores,
        (1, Some(0)) => scores,
        (k, Some(c)) if c < k => {
            let column: Vec<f32> = (0..scores.rows()).map(|r| scores.get(r, c)).collect();
            PredMatrix::new(scores.rows(), 1, column)?
        }
        (k, Some(c)) => {
            return Err(Error::validation(format!(
                "--class {c} is out of range for a {k}-class matrix"
            )))
        }
        (k, None) => {
            return Err(Error::validation(format!(
                "the matrix has {k} class columns; pick one with --class"
            )))
        }
    };
    let spec = PatchSpec::new(args.patch, args.stride)?;
    let grid = grid_patches(args.height, args.width, spec)?;
    let map = ensemble::stitch(&scores, &grid, args.height, args.width)?;
    with_path(&args.out, write_probmap(&args.out, &map))?;
    println!(
        "wrote {} ({} channels, {}x{})",
        args.out.display(),
        map.classes(),
        map.height(),
        map.width()
    );
    Ok(())
}
