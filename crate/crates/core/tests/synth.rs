mod common;

use std::collections::HashSet;

use common::tiny_data;
use facestream::config::{Profile, RunConfig};
use facestream::synth::{generate_pair, generate_split, load_manifest, load_split, make_splits, write_dataset, Split, SynthTopology};

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn mouth_opening_follows_its_envelope() {
    let data = RunConfig::for_profile(Profile::SyntheticSmall).data;
    let topo = SynthTopology::from_config(&data).unwrap();
    let (u, l) = topo.region.mouth_pair;
    let gap = topo.region.mouth_rest_gap;
    for (seed, speaker) in [(1, 0), (2, 1), (3, 3)] {
        let pair = generate_pair(seed, 500, &topo, speaker, &data).unwrap();
        let open: Vec<f64> = (0..500)
            .map(|t| {
                let (a, b) = (pair.motion.vertex(t, u), pair.motion.vertex(t, l));
                (0..3).map(|c| (gap[c] + a[c] - b[c]).powi(2)).sum::<f64>().sqrt()
            })
            .collect();
        let env: Vec<f64> = (0..500).map(|t| pair.envelopes.row(t)[0]).collect();
        let r = pearson(&env, &open);
        assert!(r > 0.9, "seed {seed}: correlation {r}");
    }
}

#[test]
fn shapes_follow_the_config() {
    let data = tiny_data();
    let topo = SynthTopology::from_config(&data).unwrap();
    let pair = generate_pair(4, 37, &topo, 0, &data).unwrap();
    assert_eq!((pair.motion.frames(), pair.motion.vertices()), (37, data.vertices));
    assert_eq!(pair.audio.features().shape(), &[37, data.audio_dim]);
    assert!(generate_pair(4, 0, &topo, 0, &data).is_err());
}

#[test]
fn splits_are_disjoint_and_hold_out_a_speaker() {
    let data = RunConfig::for_profile(Profile::SyntheticSmall).data;
    let m = make_splits(&data, 42).unwrap();
    assert_eq!((m.train.len(), m.val.len(), m.test.len()), (8, 2, 2));
    let ids: HashSet<_> = m.all().map(|s| s.id.clone()).collect();
    let seeds: HashSet<_> = m.all().map(|s| s.seed).collect();
    assert_eq!(ids.len(), 12);
    assert_eq!(seeds.len(), 12);
    let trained: HashSet<_> = m.train.iter().map(|s| s.speaker).collect();
    assert!(m.test.iter().any(|s| !trained.contains(&s.speaker)));
    assert_eq!(m, make_splits(&data, 42).unwrap());
}

#[test]
fn written_datasets_reload_identically() {
    let data = tiny_data();
    let m = make_splits(&data, 8).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(a.path(), &data, &m).unwrap();
    write_dataset(b.path(), &data, &m).unwrap();
    assert_eq!(load_manifest(a.path()).unwrap(), m);
    for split in [Split::Train, Split::Val, Split::Test] {
        let loaded = load_split(a.path(), split).unwrap();
        for (l, g) in loaded.iter().zip(generate_split(&data, &m, split).unwrap()) {
            assert_eq!(l.spec, g.spec);
            assert!(l.motion.to_tensor().max_abs_diff(&g.motion.to_tensor()) < 1e-6);
            assert!(l.audio.features().max_abs_diff(g.audio.features()) < 1e-6);
        }
        assert_eq!(loaded, load_split(b.path(), split).unwrap());
    }
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for n in names {
        assert_eq!(std::fs::read(a.path().join(&n)).unwrap(), std::fs::read(b.path().join(&n)).unwrap(), "{n:?}");
    }
}
