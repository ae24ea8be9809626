//! Regenerates the golden trace set used by the replay tests:
//!
//!     cargo run -p ddc-cli --example make_golden -- crates/cli/tests/data/golden
//!
//! Synthetic paths are recorded through the trace writer, then the expected
//! reports are produced by replaying those traces, exactly as `ddc replay`
//! does.

use std::fs;
use std::path::PathBuf;

use ddc_cli::commands::{engine_config, report_path, to_document};
use ddc_cli::settings::{EngineArgs, FileConfig};
use ddc_core::engine::Engine;
use ddc_core::synthetic::{Family, GeneratorSpec, SyntheticSource};
use ddc_gateway::{load_traces, RecordingSource};

const ENGINE_TOML: &str = "\
budget = 16
b_init = 6
window = 24
top_k = 5
weight_mapping = \"fixed_range\"
weight_lo = 6.0
weight_hi = 10.0
parallelism = 1
";

fn main() {
    let root: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "crates/cli/tests/data/golden".into()).into();
    let _ = fs::remove_dir_all(&root);
    fs::create_dir_all(&root).unwrap();
    fs::write(root.join("engine.toml"), ENGINE_TOML).unwrap();

    let file = FileConfig::parse(ENGINE_TOML).unwrap();
    let cfg = engine_config(&file.group::<EngineArgs>().unwrap());
    let engine = Engine::new(cfg).unwrap();

    let base = GeneratorSpec {
        top_k: 5,
        path_len: 64,
        path_len_jitter: 8,
        dip_width: 16,
        ..GeneratorSpec::default()
    };
    let queries = [
        (
            "early-stop",
            GeneratorSpec {
                p: 0.9,
                mu_c: 0.9,
                mu_i: 0.3,
                weight_spread: 0.1,
                family: Family::DipRecover,
                seed: 101,
                ..base.clone()
            },
            None,
        ),
        (
            "pruned-tail",
            GeneratorSpec {
                p: 0.55,
                mu_c: 0.7,
                mu_i: 0.6,
                weight_spread: 0.2,
                family: Family::Degenerating,
                seed: 202,
                ..base.clone()
            },
            Some(Family::DipRecover),
        ),
        (
            "split-vote",
            GeneratorSpec {
                p: 0.5,
                mu_c: 0.6,
                mu_i: 0.6,
                distractors: 1,
                weight_spread: 0.3,
                family: Family::IsotropicNoise,
                seed: 303,
                ..base.clone()
            },
            None,
        ),
    ];

    let traces = root.join("traces");
    let mut dataset = String::new();
    for (id, spec, init_family) in &queries {
        let mut source = SyntheticSource::new(spec.clone()).unwrap();
        if let Some(f) = init_family {
            source = source.with_init_family(*f, 6);
        }
        let recording = RecordingSource::new(source, &traces, id).unwrap();
        engine.run(&recording).unwrap();
        dataset.push_str(&format!(
            "{}\n",
            serde_json::json!({"id": id, "prompt": format!("synthetic query {id}"), "gold": "correct"})
        ));
    }
    fs::write(root.join("dataset.jsonl"), dataset).unwrap();

    let store = load_traces(&traces).unwrap();
    for (id, _, _) in &queries {
        let report = engine.run(store.query(id).unwrap()).unwrap();
        let path = report_path(&root, id);
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, to_document(&report)).unwrap();
        println!(
            "{id}: answer {:?}, {} paths, {:?}, pruned {}",
            report.final_answer,
            report.paths_generated,
            report.stop_cause,
            report.paths_pruned.total()
        );
    }
}
