use soundclr::dsp::{Featurizer, StftConfig};
use soundclr::synth::{self, SynthSpec};

/// Time-averaged log-mel profile of every clip.
fn profiles(spec: &SynthSpec) -> (Vec<Vec<f64>>, Vec<usize>, Vec<usize>) {
    let data = synth::generate(spec).unwrap();
    let featurizer = Featurizer::new(&StftConfig::default(), spec.sample_rate).unwrap();
    let feats = data
        .waves
        .iter()
        .map(|w| {
            let g = featurizer.log_mel(w).unwrap().grid;
            (0..g.rows).map(|r| g.row(r).iter().sum::<f64>() / g.cols as f64).collect()
        })
        .collect();
    (feats, data.labels(), data.folds)
}

#[test]
fn classes_separate_by_nearest_centroid() {
    let spec = SynthSpec::default();
    let (feats, labels, folds) = profiles(&spec);
    let classes = spec.classes.len();
    let (mut correct, mut total) = (0, 0);
    for fold in 1..=spec.folds {
        let mut centroids = vec![vec![0.0; feats[0].len()]; classes];
        let mut counts = vec![0usize; classes];
        for i in (0..feats.len()).filter(|&i| folds[i] != fold) {
            counts[labels[i]] += 1;
            centroids[labels[i]].iter_mut().zip(&feats[i]).for_each(|(c, x)| *c += x);
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= *n as f64);
        }
        for i in (0..feats.len()).filter(|&i| folds[i] == fold) {
            let dist = |c: &Vec<f64>| c.iter().zip(&feats[i]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let pred = (0..classes).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
            correct += usize::from(pred == labels[i]);
            total += 1;
        }
    }
    let acc = correct as f64 / total as f64;
    assert!(acc >= 0.9, "nearest-centroid accuracy {acc}");
}

#[test]
fn dump_round_trips_through_manifest() {
    let spec = SynthSpec { samples_per_class: 4, ..SynthSpec::default() };
    let data = synth::generate(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    synth::dump(&data, dir.path()).unwrap();
    let manifest = soundclr::audio_io::load_manifest(dir.path().join("meta.csv"), None).unwrap();
    let reloaded = soundclr::dataset::Dataset::load_at(&manifest, spec.sample_rate).unwrap();
    assert_eq!(reloaded.labels(), data.labels());
    assert_eq!(reloaded.folds, data.folds);
    for (a, b) in reloaded.waves.iter().zip(&data.waves) {
        let err = a.samples.iter().zip(&b.samples).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err < 1e-3, "{}: 16-bit round trip error {err}", a.source_id);
    }
}
