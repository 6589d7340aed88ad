use coopsense_core::harness::*;

fn main() {
    let cfg = ExperimentConfig::from_json(r#"{
        "scenario": {"topology": "linear", "n": 5},
        "sweep": {"axis": "snr_db", "values": [0.0, 10.0]},
        "trials": 20,
        "epsilon_rule": {"mode": "multiple", "value": 1.01},
        "algorithms": ["hisdcs_full", "hisdcs_noselect", "bit_realloc", "sdcs_uniform8", "sdcs_ideal", "toa_idcs"],
        "seed": 11
    }"#).unwrap();
    let t0 = std::time::Instant::now();
    let report = run_sweep(&cfg).unwrap();
    println!("elapsed {:?} for 40 trials", t0.elapsed());
    println!("{}", report.to_csv());
}
