//! Feature extraction and second-level stacking commands.

use histopath::formats::read_predmatrix_csv;
use histopath::stacking::{extract_features, gbt_train, greedy_select, stack_features, GbtModel};
use histopath::{Error, Result};

use super::with_path;
use crate::config::{resolve_stack, FileConfig};
use crate::tableio::{read_feature_table, read_labels, write_feature_table, write_labels};
use crate::{FeaturesArgs, StackPredictArgs, StackSelectArgs, StackTrainArgs};

pub fn features(args: &FeaturesArgs) -> Result<()> {
    let rows = args
        .pred
        .iter()
        .map(|p| {
            let m = with_path(p, read_predmatrix_csv(p))?;
            with_path(p, extract_features(&m))
        })
        .collect::<Result<Vec<_>>>()?;
    with_path(&args.out, write_feature_table(&args.out, &rows))?;
    println!(
        "wrote {} ({} rows x {} features)",
        args.out.display(),
        rows.len(),
        rows[0].len()
    );
    Ok(())
}

pub fn train(args: &StackTrainArgs) -> Result<()> {
    let file = FileConfig::load_opt(args.stack.config.as_deref())?;
    let (params, _) = resolve_stack(&file, &args.stack)?;
    let table = read_feature_table(&args.features)?;
    let labels = read_labels(&args.labels)?;
    let model = gbt_train(&table, &labels, &params)?;
    println!(
        "trained {} rounds x {} classes on {} rows; final train loss {:.4}",
        params.rounds,
        model.classes,
        table.len(),
        model.train_losses.last().copied().unwrap_or(f64::NAN)
    );
    std::fs::write(&args.out, model.to_json()?)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", args.out.display()))))?;
    println!("wrote {}", args.out.display());
    Ok(())
}

pub fn select(args: &StackSelectArgs) -> Result<()> {
    let file = FileConfig::load_opt(args.stack.config.as_deref())?;
    let (params, plan) = resolve_stack(&file, &args.stack)?;
    let labels = read_labels(&args.labels)?;

    let mut names = Vec::with_capacity(args.models.len());
    let mut per_model = Vec::with_capacity(args.models.len());
    for (name, path) in &args.models {
        if names.contains(name) {
            return Err(Error::validation(format!("model name {name:?} given twice")));
        }
        names.push(name.clone());
        per_model.push(read_feature_table(path)?);
    }

    let selection = greedy_select(&names, &per_model, &labels, &plan, &params)?;
    for (step, score) in selection.trace.iter().enumerate() {
        if step == 0 {
            println!("step 0: all {} models, cv accuracy {score:.4}", names.len());
        } else {
            println!(
                "step {step}: {} models left, cv accuracy {score:.4}",
                names.len() - step
            );
        }
    }
    println!("kept: {}", selection.kept_names.join(", "));
    if let Some(out) = &args.out {
        let mut text = String::new();
        for name in &selection.kept_names {
            text.push_str(name);
            text.push('\n');
        }
        std::fs::write(out, text)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", out.display()))))?;
        println!("wrote {}", out.display());
    }
    // A stacked table over the kept subset is what `stack train` would
    // consume next; report its width as a sanity cue.
    let kept_idx: Vec<usize> = selection.kept.clone();
    let stacked = stack_features(&names, &per_model, &kept_idx)?;
    println!("stacked feature width over kept models: {}", stacked[0].len());
    Ok(())
}

pub fn predict(args: &StackPredictArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.model).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", args.model.display())))
    })?;
    let model = with_path(&args.model, GbtModel::from_json(&text))?;
    let table = read_feature_table(&args.features)?;
    let labels = model.predict_labels(&table)?;
    with_path(&args.out, write_labels(&args.out, &labels))?;
    println!("wrote {} ({} labels)", args.out.display(), labels.len());
    Ok(())
}
