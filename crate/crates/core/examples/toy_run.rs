//! Trains the three variants for one seed on the synthetic toy dataset and prints
//! the evaluation tables. Usage: `cargo run --release --example toy_run [seed] [key=value ...]`.

use std::time::Instant;

use stemsim::experiment::{run_seed, summarize, toy_dataset, PipelineConfig, Variant};

fn main() -> stemsim::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut cfg = PipelineConfig::toy().with_seed(seed);
    let mut variants = Variant::ALL.to_vec();
    for arg in std::env::args().skip(2) {
        match arg.split_once('=') {
            Some(("epochs", v)) => cfg.train.epochs = v.parse().expect("epochs"),
            Some(("pretrain_epochs", v)) => cfg.train.pretrain_epochs = v.parse().expect("pretrain_epochs"),
            Some(("individual_epochs", v)) => cfg.train.individual_epochs = v.parse().expect("individual_epochs"),
            Some(("lr", v)) => cfg.train.adam.lr = v.parse().expect("lr"),
            Some(("batch", v)) => cfg.train.batch_size = v.parse().expect("batch"),
            Some(("margin", v)) => cfg.train.margin = v.parse().expect("margin"),
            Some(("per_focus", v)) => cfg.train.per_focus_count = v.parse().expect("per_focus"),
            Some(("train_tempo", v)) => cfg.synth.tempo_choices = v.split(",").map(|t| t.parse().expect("tempo")).collect(),
            Some(("channels", v)) => cfg.main_model.channels = v.split(",").map(|t| t.parse().expect("channels")).collect(),
            Some(("fc", v)) => cfg.main_model.fc_hidden = v.parse().expect("fc"),
            Some(("main_bn", v)) => cfg.main_model.batch_norm = v.parse().expect("main_bn"),
            Some(("variant", "full")) => variants = vec![Variant::Full],
            _ => panic!("unknown option {arg}"),
        }
    }
    let t = Instant::now();
    let data = toy_dataset(&cfg)?;
    println!("dataset: {} pieces in {:.1?}", data.pieces.len(), t.elapsed());
    let results = run_seed(&cfg, &data, &variants)?;
    for (v, (model, summary)) in &results {
        println!("== {} ==", v.name());
        for h in &model.histories {
            let (head, tail) = h.head_tail_means(1);
            println!("{}: first epoch {head:.4}, last epoch {tail:.4}", h.stage);
        }
        println!("{}", summary.to_table());
        println!("{:?}", summarize(*v, seed, summary));
    }
    println!("total {:.1?}", t.elapsed());
    Ok(())
}
