fn main() {
    let cfg = chimera_core::config::ExperimentConfig::with_seed(11);
    let t = std::time::Instant::now();
    let _state = chimera_core::model::ModelState::init(&cfg).unwrap();
    eprintln!("init took {:?}", t.elapsed());
}
