use urbanvit::config::{load_city_layers, PipelineConfig};
use urbanvit::proxies::{compute_all, PROXY_NAMES, VITALITY};
use urbanvit::synth::{generate, write_bundle, SynthSpec};

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn recomputed_proxies_match_generator() {
    let spec = SynthSpec {
        n_cities: 2,
        districts_x: 5,
        districts_y: 4,
        ..Default::default()
    };
    let bundle = generate(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_bundle(&bundle, dir.path()).unwrap();
    let cfg = PipelineConfig::load(&dir.path().join("pipeline.toml"), &[]).unwrap();
    let mut n = 0;
    for city in &cfg.cities {
        let layers = load_city_layers(city).unwrap();
        let report = compute_all(&layers.districts, &layers.proxies);
        assert!(report.issues.is_empty(), "{:?}", report.issues);
        for rec in &report.records {
            let (_, truth) = bundle
                .truth
                .iter()
                .find(|(_, t)| t.district_id == rec.district_id)
                .unwrap();
            for name in PROXY_NAMES.iter().chain([&VITALITY]) {
                let (a, b) = (rec.get(name).unwrap(), truth.get(name).unwrap());
                assert!(close(a, b), "{} {name}: {a} vs {b}", rec.district_id);
            }
            n += 1;
        }
    }
    assert_eq!(n, 40);
}

#[test]
fn same_seed_same_bundle() {
    let spec = SynthSpec {
        districts_x: 3,
        districts_y: 3,
        ..Default::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_bundle(&generate(&spec).unwrap(), a.path()).unwrap();
    write_bundle(&generate(&spec).unwrap(), b.path()).unwrap();
    for entry in walk(a.path()) {
        let rel = entry.strip_prefix(a.path()).unwrap();
        assert_eq!(
            std::fs::read(&entry).unwrap(),
            std::fs::read(b.path().join(rel)).unwrap(),
            "{}",
            rel.display()
        );
    }
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}
