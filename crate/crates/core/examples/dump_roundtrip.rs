//! Writes a small synthetic dump to a temp directory, reads it back and
//! prints what the manifest says.

use hidden_geometry::dump;
use hidden_geometry::synth::{self, PhaseProfileSpec, PhaseSchedule};

fn main() -> hidden_geometry::Result<()> {
    let spec = PhaseProfileSpec {
        n: 24,
        d: 5,
        noise_std: 1.0,
        schedule: PhaseSchedule::canonical(4, 2, 4.0, 3, 0.0),
        extra_tokens: 2,
        setting: serde_json::from_str(
            r#"{"mode": "zero_shot", "num_demos": 0, "demo_selection": "random", "label_style": "natural"}"#,
        )
        .expect("valid setting"),
        seed: 1,
    };
    let original = synth::gen_phase_profile(&spec)?;

    let dir = tempfile::tempdir().expect("temp dir");
    dump::write_dump(&original, dir.path())?;
    let loaded = dump::load_dump(dir.path())?;
    assert_eq!(loaded, original);

    let m = &loaded.manifest;
    println!(
        "{} / {}: {} layers, d = {}, n = {}",
        m.model_name, m.dataset_name, m.num_layers, m.hidden_dim, m.num_queries
    );
    println!("labels {:?} -> tokens {:?}", m.labels, m.label_token_ids);
    let mut files: Vec<_> = std::fs::read_dir(dir.path())
        .expect("listing")
        .map(|e| e.expect("entry"))
        .collect();
    files.sort_by_key(|e| e.file_name());
    for f in files {
        let len = f.metadata().expect("metadata").len();
        println!("  {:<16} {:>6} bytes", f.file_name().to_string_lossy(), len);
    }
    let last = loaded.layer_matrix(loaded.num_layers())?;
    println!("final layer matrix: {} x {}", last.n(), last.d());
    Ok(())
}
