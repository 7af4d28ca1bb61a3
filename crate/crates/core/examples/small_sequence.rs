//! Pretrains, prunes and runs one continual sequence in memory, printing the
//! BLEU matrix. Arguments are `key=value` config overrides, e.g.
//! `cargo run --release --example small_sequence -- model.d_ff=64 max_epochs=5`.
//! A leading `*.json` argument replaces the default configuration; with
//! `--print-config` first, the resulting configuration is printed instead.

use std::time::Instant;

use fmalloc::config::{Method, RunConfig};
use fmalloc::engine::{prepare_data, pretrain_general, prune_general, run_sequence, Start};

fn main() -> fmalloc::Result<()> {
    env_logger::init();
    let mut overrides: Vec<String> = std::env::args().skip(1).collect();
    let print = overrides.first().is_some_and(|a| a == "--print-config");
    if print {
        overrides.remove(0);
    }
    let base = match overrides.first() {
        Some(path) if path.ends_with(".json") => RunConfig::load(std::path::Path::new(&overrides.remove(0)))?,
        _ => RunConfig::default(),
    };
    let cfg = base.with_overrides(&overrides)?;
    cfg.validate()?;
    if print {
        print!("{}", cfg.to_json());
        return Ok(());
    }
    let bench = prepare_data(&cfg)?;
    let t = Instant::now();
    let (model, rep) = pretrain_general(&cfg, &bench)?;
    println!(
        "pretrain: {} epochs (best {}), val scores {:?}, {:.1}s",
        rep.epochs_run,
        rep.best_epoch,
        rep.val_scores,
        t.elapsed().as_secs_f64()
    );
    let start = if cfg.method == Method::Fmalloc {
        let (pruned, archive, _) = prune_general(&cfg, &bench, &model)?;
        Start::Pruned(pruned, archive)
    } else {
        Start::Pretrained(model)
    };
    let res = run_sequence(&cfg, &bench, start, None)?;
    for (i, name) in res.bleu.tasks.iter().enumerate() {
        let row: Vec<String> = (0..res.bleu.tasks.len())
            .map(|j| res.bleu.get(i, j).map_or("     -".into(), |v| format!("{v:6.2}")))
            .collect();
        println!("{name:>10} {}", row.join(" "));
    }
    for (s, r) in res.reports.iter().enumerate().skip(1) {
        println!("stage {s}: epochs {} best {} val {:?} {:.1}s", r.epochs_run, r.best_epoch, r.val_scores, r.seconds);
    }
    println!("FR {:?}", res.summary.forgetting_ratio);
    println!("capacity {:?}", res.summary.capacity_usage);
    println!("total {:.1}s", t.elapsed().as_secs_f64());
    Ok(())
}
