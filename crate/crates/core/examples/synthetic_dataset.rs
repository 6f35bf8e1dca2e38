//! Generate a synthetic dataset, write it as JSON and read it back.

use sgflash::harness::dataset::{generate, DatasetFile};
use sgflash::synth::{SceneConfig, PREDICATE_NAMES};

fn main() -> sgflash::Result<()> {
    let dir = std::env::temp_dir().join("sgflash-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("scenes.json");
    let file = generate(42, 16, &SceneConfig::new(5, 6, 8))?;
    file.save(&path)?;
    let loaded = DatasetFile::load(&path)?;
    let scenes = loaded.decode()?;
    println!(
        "{} scenes, {} bytes, round-trip equal: {}",
        scenes.len(),
        std::fs::metadata(&path)?.len(),
        loaded == file
    );
    let scene = &scenes[0];
    println!("scene 0:");
    for r in &scene.graph.relations {
        println!("  {} {} {}", r.subject, PREDICATE_NAMES[r.predicate], r.object);
    }
    for (i, m) in scene.graph.instances.iter().enumerate() {
        println!("  instance {i}: class {} area {}", m.class_label, m.area());
    }
    Ok(())
}
