//! Trains on a small synthetic dataset and prints the loss trace and AUCs.
//!
//! ```text
//! cargo run --release -p asd-core --example synthetic_benchmark -- [loss] [classes] [seed] [lr] [snr]
//! ```

use std::time::Instant;

use asd_core::data::{synthesize_all, ClassGranularity, SynthConfig};
use asd_core::dsp::SPECTRUM_LEN;
use asd_core::pipeline::{embed_all, extract_clips, fit_refs, score_tests, scored_entries, train_model};
use asd_core::eval::{evaluate, harmonic_mean, DEFAULT_P};
use asd_core::train::{Optimizer, TrainConfig};

fn main() -> asd_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let loss = arg(0, "sc-adacos").parse()?;
    let classes: ClassGranularity = arg(1, "type-section-attr").parse()?;
    let seed: u64 = arg(2, "0").parse().unwrap();
    let lr: f64 = arg(3, "0.001").parse().unwrap();
    let snr: f64 = arg(4, "0").parse().unwrap();
    let optimizer = match arg(5, "adam").as_str() {
        "sgd" => Optimizer::Sgd,
        _ => Optimizer::Adam,
    };

    let synth = SynthConfig {
        n_machine_types: 2,
        sections_per_type: 2,
        attributes_per_section: 2,
        source_train_count: arg(6, "64").parse().unwrap(),
        target_train_count: 4,
        test_count_per_domain: arg(7, "12").parse().unwrap(),
        clip_seconds: 1.1,
        noise_snr_db: snr,
        seed,
        ..SynthConfig::default()
    };
    let t = Instant::now();
    let clips = synthesize_all(&synth)?;
    let records: Vec<_> = clips.iter().map(|c| c.record.clone()).collect();
    let feats = extract_clips(&clips, SPECTRUM_LEN)?;
    println!("{} clips in {:.1?}", clips.len(), t.elapsed());

    let cfg = TrainConfig {
        loss,
        learning_rate: lr,
        optimizer,
        seed,
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let (net, meta) = train_model(&records, &feats, classes, &cfg)?;
    println!("trained in {:.1?}", t.elapsed());
    for r in &meta.trace.records {
        println!(
            "epoch {:2} loss {:9.5} intra {:.4} inter {:?}",
            r.epoch, r.loss, r.intra, r.inter
        );
    }
    let embs = embed_all(&net, &feats)?;
    let refs = fit_refs(&records, &embs, 16, seed)?;
    let scores = score_tests(&records, &embs, &refs)?;
    let report = evaluate(&scored_entries(&records, &scores)?, DEFAULT_P)?;
    for s in &report.sections {
        println!("{} both {:?}", s.section, s.both);
    }
    println!("hmean {:?}", report.hmean);
    let aucs: Vec<f64> = report
        .sections
        .iter()
        .flat_map(|s| [s.source, s.target])
        .flatten()
        .map(|m| m.auc)
        .collect();
    println!("domain-auc-hmean {:.4}", harmonic_mean(&aucs)?);
    Ok(())
}
