use std::io::Cursor;

use online_thinning::engine::{EngineConfig, ThinningEngine};
use online_thinning::stream::{batches_from_reader, write_binary, write_csv, Batching, ReadOptions, StreamFormat};
use online_thinning::synth::{gen_synthetic, SyntheticConfig};

fn static_stream() -> online_thinning::synth::SyntheticStream {
    gen_synthetic(&SyntheticConfig {
        rotation_speed: 0.0,
        total: 2500,
        train_count: 1000,
        seed: 4,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

#[test]
fn anomalies_score_higher_on_a_static_stream() {
    let s = static_stream();
    let (mut engine, _) = ThinningEngine::train(&EngineConfig::default(), &s.training()).unwrap();
    let test = s.test_data();
    let mut buf = Vec::new();
    write_binary(&mut buf, &test).unwrap();
    let reader = batches_from_reader(Cursor::new(buf), ReadOptions::new(StreamFormat::Bin, Batching::Size(10))).unwrap();
    let mut scores = Vec::new();
    for b in reader {
        scores.extend(engine.process_batch(&b.unwrap()).unwrap().scored.into_iter().map(|o| o.score));
    }
    let mean = |anom: bool| {
        let v: Vec<f64> = scores.iter().zip(s.test_labels()).filter(|(_, &l)| l == anom).map(|(x, _)| *x).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean(true) > mean(false) + 10.0, "{} vs {}", mean(true), mean(false));
}

#[test]
fn csv_and_binary_inputs_give_identical_flags() {
    let s = static_stream();
    let test = s.test_data().columns(0, 400).into_owned();
    let config = EngineConfig {
        subsample_rate: 0.6,
        seed: 9,
        ..EngineConfig::default()
    };
    let run = |format: StreamFormat, bytes: Vec<u8>| {
        let (mut engine, _) = ThinningEngine::train(&config, &s.training()).unwrap();
        let reader = batches_from_reader(Cursor::new(bytes), ReadOptions::new(format, Batching::Size(25))).unwrap();
        let mut flagged = Vec::new();
        engine
            .run_stream(reader, |recs| {
                flagged.extend(recs.iter().map(|r| (r.time_index, r.column_index, r.score.to_bits())));
                Ok(())
            })
            .unwrap();
        flagged
    };
    let mut csv = Vec::new();
    write_csv(&mut csv, &test).unwrap();
    let mut bin = Vec::new();
    write_binary(&mut bin, &test).unwrap();
    let a = run(StreamFormat::Csv, csv);
    assert!(!a.is_empty());
    assert_eq!(a, run(StreamFormat::Bin, bin));
}
