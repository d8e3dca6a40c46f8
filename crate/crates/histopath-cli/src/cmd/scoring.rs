//! Evaluation and gradient-check commands.

use histopath::formats::read_mask;
use histopath::image::CLASS_NAMES;
use histopath::metrics::{accuracy, seg_score};
use histopath::nn::{gradcheck as run_gradcheck, load_model, Tensor};
use histopath::rng::Rng;
use histopath::{Error, Result};

use super::with_path;
use crate::{EvalArgs, GradcheckArgs};

pub fn eval(args: &EvalArgs) -> Result<()> {
    let pred = with_path(&args.pred, read_mask(&args.pred))?;
    let gt = with_path(&args.gt, read_mask(&args.gt))?;
    let score = seg_score(&pred, &gt)?;
    let pred_labels: Vec<usize> = pred.labels().iter().map(|&l| l as usize).collect();
    let gt_labels: Vec<usize> = gt.labels().iter().map(|&l| l as usize).collect();
    let acc = accuracy(&pred_labels, &gt_labels)?;
    println!("bach = {:.4}", score.bach);
    for (c, name) in CLASS_NAMES.iter().enumerate() {
        println!("dice_{name} = {:.4}", score.dice[c]);
    }
    println!("dice_abnormal = {:.4}", score.dice_abnormal);
    println!("accuracy = {acc:.4}");
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<()> {
    let bundle = with_path(&args.model, load_model(&args.model))?;
    println!("arch: {}", bundle.arch);
    bundle.arch.check_input(args.height, args.width)?;
    let graph = bundle.to_graph()?;

    // A fixed random probe input around zero, matching the range the
    // preprocessing convention feeds networks.
    let mut rng = Rng::new(args.seed);
    let shape = [args.batch, graph.in_channels(), args.height, args.width];
    let n: usize = shape.iter().product();
    let values: Vec<f32> = (0..n).map(|_| rng.next_f32() - 0.5).collect();
    let input = Tensor::from_vec(&shape, values)?;

    let report = run_gradcheck(&graph, &input, args.tolerance)?;
    println!("{report}");
    if report.pass {
        Ok(())
    } else {
        Err(Error::numeric("gradient check failed (see report above)"))
    }
}
